"""Finite-difference validation of the dual-head loss gradients.

Autograd supplies the analytic side; the numeric side perturbs one entry at a
time and evaluates the loss forward only. The default stencil is the
four-point central difference at step ``h`` (truncation error of order
``h**4``); the two-point one is available for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import dataclasses

import numpy as np
import torch

from .encoders import DTYPE, PromptContext, ToyEncoderSpec, build_toy_bundle
from .heads import CatHeadParams, HeadVariant
from .harness import dual_head_loss

GROUPS = ("prompt", "gamma_img", "beta_img", "gamma_txt", "beta_txt", "W")
STEP = 1e-3
TOLERANCE = 1e-4
# Entries whose derivative is this small in both routes are compared absolutely,
# since a relative error is meaningless there.
ABS_FLOOR = 1e-7
CHECK_TEMPERATURE = 0.05
# Offsets and weights of the central stencils, in units of the step.
STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


@dataclass
class GradInstance:
    bundle: object
    tensors: dict
    x: torch.Tensor
    y: torch.Tensor
    tokens: torch.Tensor
    lam: float
    variant: HeadVariant

    def loss(self, tensors=None):
        t = self.tensors if tensors is None else tensors
        cat = CatHeadParams(t["gamma_img"], t["beta_img"], t["gamma_txt"], t["beta_txt"], t["W"])
        total, _, _ = dual_head_loss(self.bundle, PromptContext(t["prompt"]), cat, self.x, self.y,
                                     self.tokens, self.lam, self.variant)
        return total


@dataclass
class GroupResult:
    seed: int
    group: str
    max_rel_err: float
    passed: bool


def random_instance(seed: int, variant=HeadVariant.FULL) -> GradInstance:
    """A small random problem: d <= 8, M <= 4, J <= 4."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(3, 9))
    m = int(rng.integers(2, 5))
    j = int(rng.integers(2, 5))
    l, e = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    bundle = build_toy_bundle(ToyEncoderSpec(seed=seed, d=d, e=e, l=l, hidden_width=d + 2))

    def t(a):
        return torch.tensor(a, dtype=DTYPE)

    tensors = {
        "prompt": t(0.3 * rng.standard_normal((l, e))),
        "gamma_img": t(1.0 + 0.3 * rng.standard_normal(d)),
        "beta_img": t(0.3 * rng.standard_normal(d)),
        "gamma_txt": t(1.0 + 0.3 * rng.standard_normal(d)),
        "beta_txt": t(0.3 * rng.standard_normal(d)),
        "W": t(rng.standard_normal((m, d)) / np.sqrt(d)),
    }
    # At CLIP's temperature random instances saturate the softmax and the log
    # clamp flattens the loss, so checks run at a milder one.
    bundle = dataclasses.replace(bundle, temperature=CHECK_TEMPERATURE)
    return GradInstance(
        bundle=bundle,
        tensors=tensors,
        x=t(rng.standard_normal((j, d))),
        y=torch.as_tensor(rng.integers(0, m, size=j)),
        tokens=t(rng.standard_normal((m, d))),
        lam=float(rng.uniform(0.2, 0.8)),
        variant=HeadVariant(variant),
    )


def analytic_gradients(inst: GradInstance, flip_sign_of=None) -> dict:
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in inst.tensors.items()}
    grads = torch.autograd.grad(inst.loss(leaves), list(leaves.values()), allow_unused=True)
    out = {}
    for (k, v), g in zip(leaves.items(), grads):
        g = torch.zeros_like(v) if g is None else g.detach()
        out[k] = -g if k == flip_sign_of else g
    return out


def numeric_gradients(inst: GradInstance, step: float = STEP, points: int = 4) -> dict:
    stencil = STENCILS[points]
    out = {}
    with torch.no_grad():
        for name, base in inst.tensors.items():
            g = torch.zeros_like(base)
            flat = g.view(-1)
            for i in range(base.numel()):
                probe = dict(inst.tensors)
                total = 0.0
                for offset, weight in stencil:
                    moved = base.clone()
                    moved.view(-1)[i] += offset * step
                    probe[name] = moved
                    total += weight * float(inst.loss(probe))
                flat[i] = total / step
            out[name] = g
    return out


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    a, n = analytic.reshape(-1), numeric.reshape(-1)
    denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.tensor(ABS_FLOOR, dtype=DTYPE))
    return float(((a - n).abs() / denom).max())


def check_instance(seed: int, variant=HeadVariant.FULL, flip_sign_of=None,
                   tol: float = TOLERANCE) -> list:
    inst = random_instance(seed, variant)
    ana = analytic_gradients(inst, flip_sign_of)
    num = numeric_gradients(inst)
    results = []
    for group in GROUPS:
        err = max_relative_error(ana[group], num[group])
        results.append(GroupResult(seed, group, err, err <= tol))
    return results


def run_gradcheck(seeds, variant=HeadVariant.FULL, flip_sign_of=None, tol: float = TOLERANCE):
    """Per-group worst relative error over ``seeds`` and whether every check passed."""
    worst = {g: 0.0 for g in GROUPS}
    ok = True
    for seed in seeds:
        for r in check_instance(seed, variant, flip_sign_of, tol):
            worst[r.group] = max(worst[r.group], r.max_rel_err)
            ok &= r.passed
    return worst, ok

