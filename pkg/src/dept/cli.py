"""Command-line entry point: ``dept <command> [options]``.

Settings come from an optional TOML file with ``[data]``, ``[encoder]``,
``[train]``, ``[analysis]``, ``[suite]`` and ``[run]`` sections; command-line
flags override file values and the merged result is written to
``config.toml`` in the output directory of every command.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import tomli
import tomli_w
import torch

from . import channel_importance as ci_mod
from . import gradcheck, harness, plotting
from .checkpoint import CHECKPOINT_NAME, load_checkpoint, save_checkpoint
from .data import SyntheticDatasetSpec, generate_synthetic, load_dataset, save_dataset
from .encoders import ToyEncoderSpec, build_toy_bundle, encode_class_set
from .errors import DeptError, InvalidConfigError, MissingDataError
from .harness import TrainConfig
from .heads import HeadVariant

log = logging.getLogger("dept")

COMMANDS = ("generate", "train", "eval", "analyze-ci", "plot", "gradcheck")
SPEC_NAME = "spec.json"
CONFIG_NAME = "config.toml"

DEFAULT_SECTIONS = {
    "analysis": {"threshold": 1.0, "split": "test"},
    "suite": {"sweep": "", "seeds": 1, "jobs": 1},
    "gradcheck": {"seeds": 10},
}


class UsageError(DeptError):
    pass


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def default_config() -> dict:
    return {
        "data": _plain(dataclasses.asdict(SyntheticDatasetSpec())),
        "encoder": dataclasses.asdict(ToyEncoderSpec()),
        "train": TrainConfig().to_dict(),
        **{k: dict(v) for k, v in DEFAULT_SECTIONS.items()},
        "run": {},
    }


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except FileNotFoundError:
        raise MissingDataError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise InvalidConfigError(f"{path}: {exc}") from None
    base = default_config()
    for section, values in doc.items():
        if section not in base or not isinstance(values, dict):
            raise InvalidConfigError(f"{path}: unknown section [{section}]")
        if section != "run":
            unknown = set(values) - set(base[section])
            if unknown:
                raise InvalidConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return doc


def merge_config(args) -> dict:
    cfg = default_config()
    if args.config:
        for section, values in load_config_file(args.config).items():
            cfg[section].update(values)
    if args.seed is not None:
        for section in ("data", "encoder", "train"):
            cfg[section]["seed"] = args.seed
    flags = {"method": "method", "lam": "lambda", "shots": "shots", "epochs": "epochs",
             "variant": "variant"}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg["train"][key] = value
    for attr, section, key in (("threshold", "analysis", "threshold"),
                               ("split", "analysis", "split"),
                               ("sweep", "suite", "sweep"), ("seeds", "suite", "seeds"),
                               ("jobs", "suite", "jobs")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg[section][key] = value
    if args.command == "gradcheck" and args.seeds is not None:
        cfg["gradcheck"]["seeds"] = args.seeds
    run = cfg["run"]
    run["command"] = args.command
    for attr in ("data", "run_dir"):
        value = getattr(args, attr, None)
        if value is not None:
            run[attr] = value
    out = args.out or run.get("out")
    if not out and os.environ.get("DEPT_OUT"):
        out = os.path.join(os.environ["DEPT_OUT"], args.command)
    if out:
        run["out"] = out
    return cfg


def _require_out(cfg) -> str:
    out = cfg["run"].get("out")
    if not out:
        raise UsageError("missing required --out DIR (or set DEPT_OUT)")
    os.makedirs(out, exist_ok=True)
    return out


def write_snapshot(cfg, out) -> None:
    with open(os.path.join(out, CONFIG_NAME), "wb") as fh:
        tomli_w.dump(cfg, fh)


def _dataset_spec(cfg) -> SyntheticDatasetSpec:
    d = dict(cfg["data"])
    for k in ("shared_channels", "base_channels"):
        d[k] = tuple(d[k])
    return SyntheticDatasetSpec(**d)


def _train_config(cfg) -> TrainConfig:
    t = TrainConfig.from_dict(cfg["train"])
    t.validate()
    return t


def _write_json(doc, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(cfg):
    """Dataset and encoder bundle from the directory written by ``generate``."""
    directory = cfg["run"].get("data")
    if not directory:
        raise UsageError("missing required --data DIR (the output of 'dept generate')")
    spec_path = os.path.join(directory, SPEC_NAME)
    if not os.path.exists(spec_path):
        raise MissingDataError(f"no dataset at {directory}: expected {spec_path}")
    with open(spec_path) as fh:
        spec = json.load(fh)
    bundle = build_toy_bundle(ToyEncoderSpec(**spec["encoder"]))
    return load_dataset(directory), bundle


# -- commands ---------------------------------------------------------------

def cmd_generate(cfg) -> int:
    out = _require_out(cfg)
    spec = _dataset_spec(cfg)
    enc = ToyEncoderSpec(**cfg["encoder"])
    enc.validate()
    save_dataset(generate_synthetic(spec), out)
    _write_json({"data": _plain(dataclasses.asdict(spec)), "encoder": dataclasses.asdict(enc)},
                os.path.join(out, SPEC_NAME))
    write_snapshot(cfg, out)
    print(f"dataset written to {out}")
    return 0


def _write_loss_history(state, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "epoch", "loss"])
        k = max(state.steps_per_epoch, 1)
        for i, loss in enumerate(state.loss_history):
            w.writerow([i, i // k, repr(loss)])


def _write_suite(suite, axis, out) -> None:
    rows = suite.sweep_table(axis)
    key = "lambda" if axis == "lambda" else axis
    with open(os.path.join(out, "suite.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(plotting.SWEEP_HEADER)
        for r in rows:
            value = r[key]
            if axis == "lambda" and r["method"] != "dept":
                value = 0.0
            w.writerow([axis, repr(float(value)), r["method"], repr(r["base_acc"]),
                        repr(r["new_acc"]), repr(r["harmonic"]), r["n_seeds"]])
    _write_json({"axis": axis,
                 "reports": [r.to_dict() for r in suite.reports],
                 "failures": [{"config": f.config.to_dict(), "error": f.error}
                              for f in suite.failures]},
                os.path.join(out, "suite.json"))


def cmd_train(cfg) -> int:
    out = _require_out(cfg)
    tcfg = _train_config(cfg)
    dataset, bundle = _load_data(cfg)
    write_snapshot(cfg, out)
    suite_cfg = cfg["suite"]
    if suite_cfg.get("sweep") or int(suite_cfg.get("seeds", 1)) > 1:
        axis = suite_cfg.get("sweep") or "seed"
        seeds = [tcfg.seed + i for i in range(int(suite_cfg.get("seeds", 1)))]
        if axis == "seed":
            grid = [dataclasses.replace(tcfg, seed=s) for s in seeds]
            suite = harness.run_experiment_suite(grid, bundle, dataset, int(suite_cfg["jobs"]))
            axis = "lambda"
        else:
            values = harness.default_sweep_values(axis)
            methods = ("itm_only", "dept") if tcfg.method != "oracle" else ("oracle",)
            grid = harness.sweep_grid(axis, values, tcfg, seeds, methods)
            suite = harness.run_experiment_suite(grid, bundle, dataset, int(suite_cfg["jobs"]))
        _write_suite(suite, axis, out)
        for f in suite.failures:
            print(f"run failed: {f.error}", file=sys.stderr)
        print(f"{len(suite.reports)} runs written to {out}")
        return 1 if suite.failures else 0
    before = bundle.checksum()
    state = harness.train(bundle, dataset, tcfg)
    if bundle.checksum() != before:
        raise DeptError("encoder parameters changed during training")
    report = harness.evaluate_base_to_new(state, bundle, dataset)
    save_checkpoint(state, os.path.join(out, CHECKPOINT_NAME))
    _write_json(report.to_dict(), os.path.join(out, "report.json"))
    _write_loss_history(state, os.path.join(out, "loss_history.csv"))
    print(f"base {report.base_acc:.2f}  new {report.new_acc:.2f}  H {report.harmonic:.2f}")
    return 0


def _load_run(cfg):
    run_dir = cfg["run"].get("run_dir") or cfg["run"].get("out")
    if not run_dir:
        raise UsageError("missing required --run DIR (a 'dept train' output directory)")
    path = os.path.join(run_dir, CHECKPOINT_NAME)
    if not os.path.exists(path):
        raise MissingDataError(f"checkpoint not found: expected {path}")
    if not cfg["run"].get("data"):
        snap = os.path.join(run_dir, CONFIG_NAME)
        if os.path.exists(snap):
            cfg["run"]["data"] = load_config_file(snap).get("run", {}).get("data")
    state = load_checkpoint(path)
    dataset, bundle = _load_data(cfg)
    if state.metadata.get("encoder_checksum") not in (None, bundle.checksum()):
        raise InvalidConfigError("checkpoint was trained against a different encoder")
    return state, dataset, bundle


def cmd_eval(cfg) -> int:
    out = _require_out(cfg)
    state, dataset, bundle = _load_run(cfg)
    report = harness.evaluate_base_to_new(state, bundle, dataset)
    write_snapshot(cfg, out)
    _write_json(report.to_dict(), os.path.join(out, "report.json"))
    print(f"base {report.base_acc:.2f}  new {report.new_acc:.2f}  H {report.harmonic:.2f}")
    return 0


def cmd_analyze_ci(cfg) -> int:
    out = _require_out(cfg)
    state, dataset, bundle = _load_run(cfg)
    acfg = cfg["analysis"]
    split = acfg["split"]
    if split not in ("test", "train"):
        raise InvalidConfigError(f"split must be 'test' or 'train', got {split!r}")
    base_ex = dataset.base_test if split == "test" else dataset.base_train
    new_ex = dataset.new_test if split == "test" else dataset.new_train
    if new_ex is None:
        raise MissingDataError("dataset has no new-task training split")
    model_id = f"{state.config.method}-seed{state.config.seed}"
    with torch.no_grad():
        profiles = {}
        for task, classes, ex in (("base", dataset.base_classes, base_ex),
                                  ("new", dataset.new_classes, new_ex)):
            text = encode_class_set(bundle, state.prompt, classes.tokens).numpy()
            image = bundle.encode_image(ex.x).numpy()
            profiles[task] = ci_mod.channel_importance(image, ex.y, text, task, model_id)
    cmp = ci_mod.ci_ratio_analysis(profiles["base"], profiles["new"],
                                   threshold=float(acfg["threshold"]))
    write_snapshot(cfg, out)
    for task, p in profiles.items():
        ci_mod.write_profile(p, ci_mod.profile_path(out, task))
    ci_mod.write_histogram_csv(cmp, os.path.join(out, "ci_ratio_hist.csv"))
    ci_mod.write_scatter_csv(ci_mod.ci_reordered_scatter(profiles["base"], profiles["new"]),
                             os.path.join(out, "ci_scatter.csv"))
    _write_json(dict(cmp.to_json(), model_id=model_id, split=split),
                os.path.join(out, "ci_summary.json"))
    print(f"median CI ratio {cmp.median:.4f}; {100 * cmp.frac_above:.1f}% of channels "
          f"above {cmp.threshold:g}")
    return 0


def cmd_plot(cfg, inputs) -> int:
    if not inputs:
        raise UsageError("plot needs at least one --input CSV")
    for path in inputs:
        plotting.read_table(path)  # fail before any file is written
    out = _require_out(cfg)
    for path in inputs:
        stem = os.path.splitext(os.path.basename(path))[0]
        target = os.path.join(out, f"{stem}.png")
        kind = plotting.plot_csv(path, target)
        print(f"{kind}: {target}")
    write_snapshot(cfg, out)
    return 0


def cmd_gradcheck(cfg, flip=None) -> int:
    start = int(cfg["train"]["seed"])
    n = int(cfg["gradcheck"]["seeds"])
    variant = cfg["train"]["variant"]
    worst, ok = gradcheck.run_gradcheck(range(start, start + n), variant, flip_sign_of=flip)
    print(f"{'group':<10} {'max_rel_err':>12}  status")
    for group, err in worst.items():
        status = "ok" if err <= gradcheck.TOLERANCE else "FAIL"
        print(f"{group:<10} {err:12.3e}  {status}")
    print(f"{'PASS' if ok else 'FAIL'}: {n} seeds, tolerance {gradcheck.TOLERANCE:g}, "
          f"step {gradcheck.STEP:g}")
    out = cfg["run"].get("out")
    if out:
        os.makedirs(out, exist_ok=True)
        write_snapshot(cfg, out)
        _write_json({"seeds": list(range(start, start + n)), "variant": variant,
                     "max_rel_err": worst, "passed": ok}, os.path.join(out, "gradcheck.json"))
    return 0 if ok else 1


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed", type=int)
    common.add_argument("--method", choices=harness.METHODS)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--shots", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--variant", choices=[v.value for v in HeadVariant])
    common.add_argument("--out", metavar="DIR")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dept", description="Decoupled prompt tuning lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic base/new dataset")
    p = sub.add_parser("train", parents=[common], help="train one run or a sweep")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--sweep", choices=("lambda", "epochs", "shots"))
    p.add_argument("--seeds", type=int, help="number of consecutive seeds for a suite")
    p.add_argument("--jobs", type=int)
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--run", dest="run_dir", metavar="DIR")
    p.add_argument("--data", metavar="DIR")
    p = sub.add_parser("analyze-ci", parents=[common], help="channel importance of a checkpoint")
    p.add_argument("--run", dest="run_dir", metavar="DIR")
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--threshold", type=float)
    p.add_argument("--split", choices=("test", "train"))
    p = sub.add_parser("plot", parents=[common], help="render analysis or sweep CSVs")
    p.add_argument("--input", action="append", default=[], metavar="CSV")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seeds", type=int)
    p.add_argument("--inject-sign-flip", choices=gradcheck.GROUPS, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = merge_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "analyze-ci":
            return cmd_analyze_ci(cfg)
        if args.command == "plot":
            return cmd_plot(cfg, args.input)
        return cmd_gradcheck(cfg, args.inject_sign_flip)
    except UsageError as exc:
        print(f"dept {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (DeptError, OSError, ValueError) as exc:
        print(f"dept {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
