"""Per-channel importance of a classification task and base/new comparisons.

For channel ``r`` and example ``j`` with ground-truth class ``y``, the
contribution is ``relu(e_y[r] f_j[r]) / (mean_i relu(e_i[r] f_j[r]) + eps)``
on L2-normalised features, and the channel's importance is the mean
contribution over examples. An example whose class-mean term is exactly zero
at a channel is left out of that channel's mean; the number left out is kept
in ``skipped_counts``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFeatureError, InvalidInputError

EPS = 1e-12
HIST_RANGE = (0.0, 5.0)
HIST_BINS = 30


@dataclass
class ChannelImportanceProfile:
    ci: np.ndarray
    task_id: str
    model_id: str
    n_examples: int
    n_classes: int
    skipped_counts: np.ndarray

    @property
    def d(self) -> int:
        return len(self.ci)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "model_id": self.model_id,
            "d": self.d,
            "n_examples": self.n_examples,
            "n_classes": self.n_classes,
            "ci": [float(v) for v in self.ci],
            "skipped_counts": [int(v) for v in self.skipped_counts],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ChannelImportanceProfile":
        return cls(
            ci=np.asarray(doc["ci"], dtype=np.float64),
            task_id=doc["task_id"],
            model_id=doc["model_id"],
            n_examples=int(doc["n_examples"]),
            n_classes=int(doc["n_classes"]),
            skipped_counts=np.asarray(doc["skipped_counts"], dtype=np.int64),
        )


@dataclass
class CiComparison:
    ratio: np.ndarray          # NaN where undefined
    bin_edges: np.ndarray
    counts: np.ndarray         # len(bin_edges) - 1 bins, then one overflow bin
    threshold: float
    frac_above: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.ratio)

    @property
    def median(self) -> float:
        vals = self.ratio[self.defined]
        return float(np.median(vals)) if len(vals) else float("nan")

    def to_json(self) -> dict:
        return {
            "ratio": [None if np.isnan(v) else float(v) for v in self.ratio],
            "bin_edges": [float(v) for v in self.bin_edges],
            "counts": [int(v) for v in self.counts],
            "threshold": self.threshold,
            "frac_above": self.frac_above,
            "median": self.median,
            "n_defined": int(self.defined.sum()),
        }


def _unit_rows(x, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"{what} must be a 2-D array")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateFeatureError(f"{what} contains a zero-norm vector")
    return x / norms


def channel_importance(image_feats, labels, class_text_feats, task_id="task", model_id="model",
                       eps: float = EPS) -> ChannelImportanceProfile:
    f = _unit_rows(image_feats, "image features")
    e = _unit_rows(class_text_feats, "class text features")
    labels = np.asarray(labels, dtype=np.int64)
    n, d = f.shape
    m = e.shape[0]
    if n < 1 or m < 2:
        raise InvalidInputError(f"need N >= 1 examples and M >= 2 classes, got N={n}, M={m}")
    if e.shape[1] != d:
        raise InvalidInputError(f"image width {d} != text width {e.shape[1]}")
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= m:
        raise InvalidInputError("labels must be one class index in [0, M) per example")

    # products[j, i, r] = e_i[r] * f_j[r]
    products = np.maximum(f[:, None, :] * e[None, :, :], 0.0)
    numer = products[np.arange(n), labels]
    class_mean = products.mean(axis=1)
    live = class_mean > 0
    contrib = np.where(live, numer / (class_mean + eps), 0.0)
    kept = live.sum(axis=0)
    ci = np.divide(contrib.sum(axis=0), kept, out=np.zeros(d), where=kept > 0)
    return ChannelImportanceProfile(ci=ci, task_id=task_id, model_id=model_id, n_examples=n,
                                    n_classes=m, skipped_counts=n - kept)


def _check_pair(base, new):
    if base.d != new.d:
        raise InvalidInputError(f"profile widths differ: {base.d} vs {new.d}")


def ci_ratio_analysis(base: ChannelImportanceProfile, new: ChannelImportanceProfile,
                      bins: int = HIST_BINS, threshold: float = 1.0,
                      hist_range=HIST_RANGE, eps: float = EPS) -> CiComparison:
    """CI-Base : CI-New per channel, its histogram and the share above ``threshold``.

    Ratios above the histogram range land in a final overflow bin.
    """
    _check_pair(base, new)
    if bins < 1:
        raise InvalidInputError("bins must be positive")
    if not threshold > 0:
        raise InvalidInputError("threshold must be positive")
    undefined = (base.ci < eps) & (new.ci < eps)
    ratio = np.where(undefined, np.nan, base.ci / np.maximum(new.ci, eps))
    vals = ratio[~undefined]
    edges = np.linspace(hist_range[0], hist_range[1], bins + 1)
    inside, _ = np.histogram(vals[vals <= hist_range[1]], bins=edges)
    overflow = int(np.sum(vals > hist_range[1]))
    frac = float(np.mean(vals > threshold)) if len(vals) else 0.0
    return CiComparison(ratio=ratio, bin_edges=edges, counts=np.append(inside, overflow),
                        threshold=threshold, frac_above=frac)


def ci_reordered_scatter(base: ChannelImportanceProfile, new: ChannelImportanceProfile) -> list:
    """``(rank, ci_base, ci_new)`` rows, channels sorted by descending base CI.

    Ties keep the lower channel index first.
    """
    _check_pair(base, new)
    order = np.argsort(-base.ci, kind="stable")
    return [(rank, float(base.ci[c]), float(new.ci[c])) for rank, c in enumerate(order)]


def write_profile(profile: ChannelImportanceProfile, path) -> None:
    with open(path, "w") as fh:
        json.dump(profile.to_json(), fh, indent=2)
        fh.write("\n")


def read_profile(path) -> ChannelImportanceProfile:
    with open(path) as fh:
        return ChannelImportanceProfile.from_json(json.load(fh))


def write_histogram_csv(cmp: CiComparison, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        edges = cmp.bin_edges
        for lo, hi, c in zip(edges[:-1], edges[1:], cmp.counts[:-1]):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
        w.writerow([repr(float(edges[-1])), "inf", int(cmp.counts[-1])])


def write_scatter_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "ci_base", "ci_new"])
        for rank, b, n in rows:
            w.writerow([rank, repr(b), repr(n)])


def profile_path(directory, task_id) -> str:
    return os.path.join(directory, f"ci_{task_id}.json")

