"""Training loops, base-to-new evaluation and experiment sweeps.

Three training methods share one loop:

* ``itm_only``: the prompt is tuned with the ITM head alone (CoOp-style baseline).
* ``dept``: prompt and CAT head are tuned on ``lam * L_cat + (1 - lam) * L_itm``;
  the CAT head runs at ``cat_lr_multiplier`` times the prompt learning rate.
* ``oracle``: ITM-only tuning on the union of base and new few-shot data.

Optimisation is plain SGD. Every random draw comes from a stream derived from
``config.seed`` and the draw's purpose, so the prompt initialisation and batch
order do not depend on the method.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import statistics
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from . import heads
from .data import Examples, TaskDataset, few_shot_sample
from .encoders import DTYPE, FrozenEncoderBundle, PromptContext, encode_class_set, init_prompt
from .errors import InvalidConfigError, MissingDataError
from .heads import CatHeadParams, HeadVariant

log = logging.getLogger(__name__)

METHODS = ("itm_only", "dept", "oracle")

# Independent RNG streams, indexed by purpose.
_STREAM_PROMPT, _STREAM_CAT, _STREAM_SHOTS, _STREAM_SHUFFLE = range(4)


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.7
    base_lr: float = 0.2
    cat_lr_multiplier: float = 6.5
    epochs: int = 10
    shots: int = 16
    batch_size: int = 8
    seed: int = 0
    method: str = "dept"
    variant: str = HeadVariant.FULL.value
    apply_cwt_at_test: bool = True

    def validate(self) -> None:
        if self.method not in METHODS:
            raise InvalidConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        HeadVariant(self.variant)
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if not (self.base_lr > 0 and self.cat_lr_multiplier > 0):
            raise InvalidConfigError("learning rates must be positive")
        for name in ("epochs", "shots", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidConfigError(f"{name} must be at least 1")

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.method == "dept" else 0.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainedState:
    prompt: PromptContext
    cat_params: CatHeadParams | None
    config: TrainConfig
    loss_history: list
    steps_per_epoch: int = 1
    metadata: dict = field(default_factory=dict)

    def epoch_means(self) -> list:
        k = self.steps_per_epoch
        return [statistics.fmean(self.loss_history[i:i + k])
                for i in range(0, len(self.loss_history), k)]


@dataclass
class EvalReport:
    base_acc: float
    new_acc: float
    harmonic: float
    per_class_acc: dict
    seed: int
    method: str = "dept"
    lam: float = 0.0
    shots: int = 16
    epochs: int = 10
    variant: str = HeadVariant.FULL.value
    # Base accuracy of each head before fusion; dept only.
    fusion: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "seed": self.seed,
            "lambda": self.lam,
            "shots": self.shots,
            "epochs": self.epochs,
            "variant": self.variant,
            "base_acc": self.base_acc,
            "new_acc": self.new_acc,
            "harmonic": self.harmonic,
            "per_class_acc": self.per_class_acc,
        }
        if self.fusion is not None:
            out["fusion"] = self.fusion
        return out


def harmonic_mean(base: float, new: float) -> float:
    if base <= 0 or new <= 0:
        return 0.0
    return 2.0 * base * new / (base + new)


def _rng_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def _torch_generator(seed: int, stream: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(_rng_seed(seed, stream))
    return g


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    if n <= batch_size:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _training_examples(dataset: TaskDataset, config: TrainConfig):
    """Few-shot training set and the tokens of every class it is labelled over."""
    shot_seed = _rng_seed(config.seed, _STREAM_SHOTS)
    base = few_shot_sample(dataset.base_train, config.shots, shot_seed)
    tokens = dataset.base_classes.tokens
    if config.method != "oracle":
        return base, tokens, {}
    if dataset.new_train is None or len(dataset.new_train) == 0:
        raise MissingDataError("oracle training needs new-task training data")
    new = few_shot_sample(dataset.new_train, config.shots, shot_seed + 1)
    merged = Examples.concat([base, new], [0, len(dataset.base_classes)])
    tokens = np.concatenate([tokens, dataset.new_classes.tokens])
    return merged, tokens, {"oracle_mixing": "concatenated base+new few-shot sets, uniform batches"}


def dual_head_loss(bundle: FrozenEncoderBundle, prompt: PromptContext, cat_params, x, y, tokens,
                   lam: float, variant=HeadVariant.FULL):
    """Return ``(total, l_itm, l_cat)`` for one batch; ``l_cat`` is None without a CAT head."""
    class_feats = encode_class_set(bundle, prompt, tokens)
    image_feats = bundle.encode_image(x)
    labels = torch.as_tensor(y, dtype=torch.long)
    probs = heads.itm_probabilities(image_feats, class_feats, bundle.temperature)
    l_itm = heads.itm_loss(probs, heads.one_hot(labels, class_feats.shape[0]))
    if cat_params is None:
        return l_itm, l_itm, None
    batch = heads.cat_batch_features(image_feats, class_feats[labels], labels, cat_params, variant)

    def probs_fn(feats):
        return heads.cat_head_probabilities(feats, cat_params, variant, class_feats,
                                            bundle.temperature)

    l_cat = heads.cat_loss(batch, cat_params.W, probs_fn)
    return heads.combined_loss(l_cat, l_itm, lam), l_itm, l_cat


def train(bundle: FrozenEncoderBundle, dataset: TaskDataset, config: TrainConfig,
          record_prompts: bool = False) -> TrainedState:
    config.validate()
    examples, tokens, meta = _training_examples(dataset, config)
    l, e = bundle.prompt_shape
    prompt = init_prompt(l, e, _torch_generator(config.seed, _STREAM_PROMPT))
    prompt.vectors.requires_grad_(True)
    cat_params = None
    if config.method == "dept":
        cat_params = CatHeadParams.initialize(
            len(dataset.base_classes), bundle.dim, _torch_generator(config.seed, _STREAM_CAT))
        cat_params.requires_grad_(True)
    lam = config.effective_lambda
    cat_lr = config.base_lr * config.cat_lr_multiplier
    shuffle_rng = np.random.default_rng(_rng_seed(config.seed, _STREAM_SHUFFLE))

    x_all = torch.as_tensor(examples.x, dtype=DTYPE)
    y_all = torch.as_tensor(examples.y, dtype=torch.long)
    history, trajectory = [], []
    steps = 0
    for _ in range(config.epochs):
        batches = _batches(len(examples), config.batch_size, shuffle_rng)
        steps = len(batches)
        for idx in batches:
            idx = torch.as_tensor(idx)
            total, _, _ = dual_head_loss(bundle, prompt, cat_params, x_all[idx], y_all[idx],
                                         tokens, lam, config.variant)
            params = [prompt.vectors] + ([] if cat_params is None else cat_params.tensors())
            grads = torch.autograd.grad(total, params, allow_unused=True)
            with torch.no_grad():
                prompt.vectors -= config.base_lr * grads[0]
                for p, g in zip(params[1:], grads[1:]):
                    if g is not None:
                        p -= cat_lr * g
            history.append(float(total.detach()))
            if record_prompts:
                trajectory.append(prompt.vectors.detach().clone())
    meta = dict(meta, encoder_checksum=bundle.checksum())
    if record_prompts:
        meta["prompt_trajectory"] = trajectory
    return TrainedState(
        prompt=prompt.detached(),
        cat_params=None if cat_params is None else cat_params.detached(),
        config=config,
        loss_history=history,
        steps_per_epoch=steps,
        metadata=meta,
    )


def _argmax(probs: torch.Tensor) -> np.ndarray:
    # np.argmax returns the first maximal index: ties go to the lowest class.
    return np.argmax(probs.detach().numpy(), axis=-1)


def _accuracy(pred, y) -> float:
    return round(100.0 * float(np.mean(pred == y)), 2)


def _per_class(pred, y, names) -> dict:
    out = {}
    for c, name in enumerate(names):
        mask = y == c
        if mask.any():
            out[name] = round(100.0 * float(np.mean(pred[mask] == c)), 2)
    return out


def predict_splits(state: TrainedState, bundle: FrozenEncoderBundle, dataset: TaskDataset) -> dict:
    """Probability matrices for the base and new test splits."""
    if len(dataset.base_test) == 0 or len(dataset.new_test) == 0:
        raise MissingDataError("evaluation needs non-empty base and new test splits")
    cfg = state.config
    tau = bundle.temperature
    with torch.no_grad():
        base_feats = encode_class_set(bundle, state.prompt, dataset.base_classes.tokens)
        new_feats = encode_class_set(bundle, state.prompt, dataset.new_classes.tokens)
        f_base = bundle.encode_image(dataset.base_test.x)
        f_new = bundle.encode_image(dataset.new_test.x)
        out = {"base_itm": heads.itm_probabilities(f_base, base_feats, tau),
               "new": heads.predict_new(f_new, new_feats, tau)}
        if cfg.method == "dept":
            p = state.cat_params
            out["base_fused"] = heads.predict_base(f_base, base_feats, p, tau, cfg.lam,
                                                   cfg.variant, cfg.apply_cwt_at_test)
            out["base_cat"] = heads.predict_base(f_base, base_feats, p, tau, 1.0,
                                                 cfg.variant, cfg.apply_cwt_at_test)
    return out


def evaluate_base_to_new(state: TrainedState, bundle: FrozenEncoderBundle,
                         dataset: TaskDataset) -> EvalReport:
    cfg = state.config
    probs = predict_splits(state, bundle, dataset)
    yb, yn = dataset.base_test.y, dataset.new_test.y
    base_pred = _argmax(probs["base_fused"] if cfg.method == "dept" else probs["base_itm"])
    new_pred = _argmax(probs["new"])
    base_acc, new_acc = _accuracy(base_pred, yb), _accuracy(new_pred, yn)
    per_class = _per_class(base_pred, yb, dataset.base_classes.names)
    per_class.update(_per_class(new_pred, yn, dataset.new_classes.names))
    fusion = None
    if cfg.method == "dept":
        fusion = {"lambda": cfg.lam,
                  "base_acc_itm": _accuracy(_argmax(probs["base_itm"]), yb),
                  "base_acc_cat": _accuracy(_argmax(probs["base_cat"]), yb)}
    return EvalReport(
        base_acc=base_acc,
        new_acc=new_acc,
        harmonic=round(harmonic_mean(base_acc, new_acc), 2),
        per_class_acc=per_class,
        seed=cfg.seed,
        method=cfg.method,
        lam=cfg.effective_lambda,
        shots=cfg.shots,
        epochs=cfg.epochs,
        variant=cfg.variant,
        fusion=fusion,
    )


@dataclass
class RunResult:
    config: TrainConfig
    report: EvalReport | None = None
    error: str | None = None


@dataclass
class SuiteResult:
    runs: list

    @property
    def reports(self) -> list:
        return [r.report for r in self.runs if r.report is not None]

    @property
    def failures(self) -> list:
        return [r for r in self.runs if r.error is not None]

    def aggregate(self) -> list:
        """Seed-mean accuracies for each configuration that differs only by seed."""
        groups = defaultdict(list)
        for run in self.runs:
            if run.report is None:
                continue
            key = dataclasses.replace(run.config, seed=0).to_dict()
            key.pop("seed")
            groups[tuple(sorted(key.items()))].append(run.report)
        rows = []
        for key, reports in groups.items():
            row = dict(key)
            row["n_seeds"] = len(reports)
            for metric in ("base_acc", "new_acc", "harmonic"):
                row[metric] = statistics.fmean(getattr(r, metric) for r in reports)
            rows.append(row)
        return rows

    def sweep_table(self, axis: str) -> list:
        """Aggregate rows ordered by ``axis`` (``lambda``, ``epochs`` or ``shots``) then method."""
        rows = self.aggregate()
        return sorted(rows, key=lambda r: (r["method"], r[axis]))


def _run_one(args):
    config, bundle, dataset = args
    try:
        state = train(bundle, dataset, config)
        return RunResult(config, evaluate_base_to_new(state, bundle, dataset))
    except Exception as exc:  # recorded per run, the suite carries on
        log.warning("run %s failed: %s", config, exc)
        return RunResult(config, error=f"{type(exc).__name__}: {exc}")


def run_experiment_suite(grid, bundle: FrozenEncoderBundle, dataset: TaskDataset,
                         jobs: int = 1) -> SuiteResult:
    grid = list(grid)
    if not grid:
        raise InvalidConfigError("experiment grid is empty")
    work = [(cfg, bundle, dataset) for cfg in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_one, work))
    else:
        runs = [_run_one(w) for w in work]
    return SuiteResult(runs)


def sweep_grid(axis: str, values, base: TrainConfig, seeds, methods=("itm_only", "dept")) -> list:
    """Configurations for a one-parameter sweep over ``values`` and ``seeds``."""
    field_name = {"lambda": "lam"}.get(axis, axis)
    grid = []
    for method in methods:
        vals = values if (method == "dept" or axis != "lambda") else [base.lam]
        for v in vals:
            for s in seeds:
                grid.append(dataclasses.replace(base, method=method, seed=s, **{field_name: v}))
    return grid


def default_sweep_values(axis: str) -> list:
    if axis == "lambda":
        return [round(0.1 * i, 1) for i in range(11)]
    if axis == "epochs":
        return [1, 2, 4, 6, 8, 10]
    if axis == "shots":
        return [4, 8, 16]
    raise InvalidConfigError(f"unknown sweep axis {axis!r}")


def mean_or_nan(values) -> float:
    values = list(values)
    return statistics.fmean(values) if values else math.nan
