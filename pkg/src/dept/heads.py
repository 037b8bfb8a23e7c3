"""ITM and CAT classification heads, the dual loss and test-time fusion.

All functions accept batched inputs: a feature argument may be a single
``d``-vector or an ``N x d`` matrix, and probabilities come back with the
matching leading shape.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import torch

from .encoders import DTYPE
from .errors import DegenerateFeatureError, InvalidConfigError, InvalidInputError

LOG_CLAMP = 1e-12


class HeadVariant(str, enum.Enum):
    FULL = "full"
    SHARED_CWT = "shared_cwt"
    ITM_CLASSIFIER = "itm_classifier"
    IMAGE_ONLY = "image_only"


@dataclass
class CatHeadParams:
    """Channel-wise transform for each modality plus the linear classifier ``W``.

    Under :attr:`HeadVariant.SHARED_CWT` only the image pair is used, for both
    modalities. ``W`` is carried but unused by the ITM-classifier variant.
    """

    gamma_img: torch.Tensor
    beta_img: torch.Tensor
    gamma_txt: torch.Tensor
    beta_txt: torch.Tensor
    W: torch.Tensor

    @classmethod
    def initialize(cls, n_classes: int, d: int, generator: torch.Generator) -> "CatHeadParams":
        W = torch.randn(n_classes, d, generator=generator, dtype=DTYPE) / d ** 0.5
        return cls(
            gamma_img=torch.ones(d, dtype=DTYPE),
            beta_img=torch.zeros(d, dtype=DTYPE),
            gamma_txt=torch.ones(d, dtype=DTYPE),
            beta_txt=torch.zeros(d, dtype=DTYPE),
            W=W,
        )

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def tensors(self):
        return [self.gamma_img, self.beta_img, self.gamma_txt, self.beta_txt, self.W]

    def names(self):
        return ["gamma_img", "beta_img", "gamma_txt", "beta_txt", "W"]

    def requires_grad_(self, flag: bool = True) -> "CatHeadParams":
        for t in self.tensors():
            t.requires_grad_(flag)
        return self

    def detached(self) -> "CatHeadParams":
        return CatHeadParams(*[t.detach().clone() for t in self.tensors()])

    def text_transform(self, variant: HeadVariant):
        if HeadVariant(variant) is HeadVariant.SHARED_CWT:
            return self.gamma_img, self.beta_img
        return self.gamma_txt, self.beta_txt

    def to_bytes(self) -> bytes:
        """Little-endian ``(M, d)`` header followed by the five tensors as doubles."""
        m, d = self.W.shape
        out = [struct.pack("<II", m, d)]
        for t in self.tensors():
            out.append(t.detach().contiguous().numpy().astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "CatHeadParams":
        if len(blob) < 8:
            raise InvalidInputError("CAT parameter block shorter than its header")
        m, d = struct.unpack_from("<II", blob, 0)
        expected = 8 + 8 * (4 * d + m * d)
        if len(blob) != expected:
            raise InvalidInputError(f"CAT parameter block is {len(blob)} bytes, expected {expected}")
        flat = torch.frombuffer(bytearray(blob[8:]), dtype=DTYPE)
        vecs = [flat[i * d:(i + 1) * d].clone() for i in range(4)]
        W = flat[4 * d:].reshape(m, d).clone()
        return cls(*vecs, W=W)


def _normalize(x, what):
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateFeatureError(f"{what} has zero norm; cosine similarity undefined")
    return x / norms


def itm_probabilities(image_feat, class_feats, temperature: float) -> torch.Tensor:
    """Softmax over cosine similarities to each class feature, divided by ``temperature``."""
    if not temperature > 0:
        raise InvalidInputError("temperature must be positive")
    f = torch.as_tensor(image_feat, dtype=DTYPE)
    e = torch.as_tensor(class_feats, dtype=DTYPE)
    if e.ndim != 2 or e.shape[0] == 0:
        raise InvalidInputError("class features must be a non-empty M x d matrix")
    if f.shape[-1] != e.shape[-1]:
        raise InvalidInputError(f"feature width {f.shape[-1]} != class feature width {e.shape[-1]}")
    cos = _normalize(f, "image feature") @ _normalize(e, "class feature").T
    return torch.softmax(cos / temperature, dim=-1)


def cross_entropy(probs, labels) -> torch.Tensor:
    """Mean of ``-sum_i y_i log p_i`` over rows, with probabilities clamped before the log.

    ``labels`` is one-hot with the same shape as ``probs``.
    """
    p = torch.as_tensor(probs, dtype=DTYPE)
    y = torch.as_tensor(labels, dtype=DTYPE)
    if p.shape != y.shape:
        raise InvalidInputError(f"label shape {tuple(y.shape)} != probability shape {tuple(p.shape)}")
    if p.ndim == 1:
        p, y = p.unsqueeze(0), y.unsqueeze(0)
    if p.shape[0] == 0:
        raise InvalidInputError("empty batch")
    return -(y * torch.log(p.clamp_min(LOG_CLAMP))).sum(dim=-1).mean()


def itm_loss(probs, label) -> torch.Tensor:
    return cross_entropy(probs, label)


def one_hot(labels, n_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.nn.functional.one_hot(labels, n_classes).to(DTYPE)


def cwt_transform(feat, gamma, beta) -> torch.Tensor:
    """Channel-wise affine transform ``gamma * f + beta``."""
    f = torch.as_tensor(feat, dtype=DTYPE)
    if f.shape[-1] != gamma.shape[-1] or gamma.shape != beta.shape:
        raise InvalidInputError(
            f"cwT shapes disagree: feature {tuple(f.shape)}, gamma {tuple(gamma.shape)}, "
            f"beta {tuple(beta.shape)}")
    return gamma * f + beta


def cat_batch_features(image_feats, paired_text_feats, labels, params: CatHeadParams,
                       variant=HeadVariant.FULL):
    """Build the union batch fed to the CAT classifier.

    Returns ``(features, labels)``. With two modalities the rows interleave so
    that rows ``2j`` (image) and ``2j+1`` (text) both carry example ``j``'s
    class. ``image_only`` returns the transformed image rows alone.
    """
    variant = HeadVariant(variant)
    f = torch.as_tensor(image_feats, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if f.ndim != 2 or labels.shape != (f.shape[0],):
        raise InvalidInputError("image features must be J x d with one label per row")
    img = cwt_transform(f, params.gamma_img, params.beta_img)
    if variant is HeadVariant.IMAGE_ONLY:
        return img, labels
    e = torch.as_tensor(paired_text_feats, dtype=DTYPE)
    if e.shape != f.shape:
        raise InvalidInputError(
            f"paired text features {tuple(e.shape)} do not match image features {tuple(f.shape)}")
    gamma, beta = params.text_transform(variant)
    txt = cwt_transform(e, gamma, beta)
    feats = torch.stack([img, txt], dim=1).reshape(-1, f.shape[1])
    return feats, labels.repeat_interleave(2)


def cat_probabilities(feat, W) -> torch.Tensor:
    """``softmax(W @ s)``: no cosine normalisation, no temperature."""
    s = torch.as_tensor(feat, dtype=DTYPE)
    if s.shape[-1] != W.shape[1]:
        raise InvalidInputError(f"feature width {s.shape[-1]} != classifier width {W.shape[1]}")
    return torch.softmax(s @ W.T, dim=-1)


def cat_head_probabilities(feats, params: CatHeadParams, variant=HeadVariant.FULL,
                           class_feats=None, temperature=None) -> torch.Tensor:
    """Probabilities of the CAT classifier for already-transformed features.

    The ITM-classifier variant compares against the text-side transformed
    class features with cosine similarity and ``temperature``; every other
    variant uses the linear classifier.
    """
    if HeadVariant(variant) is HeadVariant.ITM_CLASSIFIER:
        if class_feats is None or temperature is None:
            raise InvalidInputError("itm_classifier variant needs class features and a temperature")
        gamma, beta = params.text_transform(variant)
        return itm_probabilities(feats, cwt_transform(class_feats, gamma, beta), temperature)
    return cat_probabilities(feats, params.W)


def cat_loss(batch, W, probs_fn=None) -> torch.Tensor:
    """Mean cross-entropy of the CAT classifier over every row of the union batch."""
    feats, labels = batch
    if feats.shape[0] == 0:
        raise InvalidInputError("empty CAT batch")
    probs = cat_probabilities(feats, W) if probs_fn is None else probs_fn(feats)
    return cross_entropy(probs, one_hot(labels, probs.shape[-1]))


def _check_lambda(lam):
    if not 0.0 <= lam <= 1.0:
        raise InvalidConfigError(f"lambda must lie in [0, 1], got {lam}")


def combined_loss(l_cat, l_itm, lam: float):
    _check_lambda(lam)
    return lam * l_cat + (1.0 - lam) * l_itm


def fused_prediction(p_cat, p_itm, lam: float) -> torch.Tensor:
    _check_lambda(lam)
    p_cat = torch.as_tensor(p_cat, dtype=DTYPE)
    p_itm = torch.as_tensor(p_itm, dtype=DTYPE)
    if p_cat.shape != p_itm.shape:
        raise InvalidInputError(f"class counts differ: {tuple(p_cat.shape)} vs {tuple(p_itm.shape)}")
    return lam * p_cat + (1.0 - lam) * p_itm


def predict_base(image_feat, class_feats, params: CatHeadParams, temperature: float, lam: float,
                 variant=HeadVariant.FULL, apply_cwt: bool = True) -> torch.Tensor:
    """Fused base-task prediction.

    ``class_feats`` rows must follow the same order as the rows of ``W``.
    ``apply_cwt=False`` feeds the raw image feature to the classifier instead
    of its image-side transform.
    """
    f = torch.as_tensor(image_feat, dtype=DTYPE)
    if class_feats.shape[0] != params.n_classes:
        raise InvalidInputError(
            f"{class_feats.shape[0]} class features for a {params.n_classes}-way CAT head")
    s = cwt_transform(f, params.gamma_img, params.beta_img) if apply_cwt else f
    p_cat = cat_head_probabilities(s, params, variant, class_feats, temperature)
    p_itm = itm_probabilities(f, class_feats, temperature)
    return fused_prediction(p_cat, p_itm, lam)


def predict_new(image_feat, new_class_feats, temperature: float) -> torch.Tensor:
    """Zero-shot prediction on a new task: the ITM head alone."""
    return itm_probabilities(image_feat, new_class_feats, temperature)
