"""Frozen dual-encoder contract, learnable prompt context and the toy encoder pair.

The toy pair stands in for a pretrained CLIP model. The image side is a fixed
affine map over raw example vectors. The text side is a fixed two-stage map,
``W2 @ tanh(W1 @ [vec(prompt); token] + b1) + b2``, whose weights are chosen so
that with an all-zero prompt the text feature of a class token lands near the
image feature its raw vector would produce. That gives the bundle a usable
zero-shot classifier before any tuning, which is what prompt tuning starts from.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError, InvalidSpecError

DTYPE = torch.float64

# 1 / tau = 100, the CLIP logit scale.
DEFAULT_TEMPERATURE = 0.01
PROMPT_INIT_STD = 0.02


@dataclass(frozen=True)
class ToyEncoderSpec:
    """Parameters of the deterministic toy encoder pair.

    ``mixing`` sets how strongly the image map mixes raw channels,
    ``token_gain`` is the pre-activation scale applied to class tokens and
    ``prompt_gain`` the scale of the prompt's pre-activation weights.
    """

    seed: int = 0
    d: int = 32
    e: int = 16
    l: int = 4
    hidden_width: int = 32
    mixing: float = 0.5
    token_gain: float = 0.5
    prompt_gain: float = 2.0

    def validate(self) -> None:
        for name in ("d", "e", "l", "hidden_width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise InvalidSpecError(f"{name} must be a positive integer, got {value!r}")
        for name in ("token_gain", "prompt_gain"):
            if not getattr(self, name) > 0:
                raise InvalidSpecError(f"{name} must be positive")
        if self.mixing < 0:
            raise InvalidSpecError("mixing must be non-negative")


@dataclass
class PromptContext:
    """The ``l`` trainable context vectors prepended to every class token."""

    vectors: torch.Tensor
    trainable: bool = True

    def __post_init__(self):
        v = torch.as_tensor(self.vectors, dtype=DTYPE)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidInputError(f"prompt must be an l x e matrix, got shape {tuple(v.shape)}")
        if not torch.isfinite(v).all():
            raise InvalidInputError("prompt contains non-finite entries")
        self.vectors = v

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    def detached(self) -> "PromptContext":
        return PromptContext(self.vectors.detach().clone(), trainable=False)


def init_prompt(l: int, e: int, generator: torch.Generator) -> PromptContext:
    vectors = torch.randn(l, e, generator=generator, dtype=DTYPE) * PROMPT_INIT_STD
    return PromptContext(vectors)


@dataclass(frozen=True, eq=False)
class FrozenEncoderBundle:
    """Immutable image/text encoder pair with a fixed temperature.

    Tensors are stored read-only in spirit: nothing in the package assigns to
    them, and :meth:`checksum` lets callers confirm it.
    """

    image_weight: torch.Tensor
    image_bias: torch.Tensor
    text_w1: torch.Tensor
    text_b1: torch.Tensor
    text_w2: torch.Tensor
    text_b2: torch.Tensor
    prompt_shape: tuple
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidSpecError("temperature must be positive")

    @property
    def dim(self) -> int:
        return self.image_weight.shape[0]

    @property
    def token_dim(self) -> int:
        return self.text_w1.shape[1] - self.prompt_shape[0] * self.prompt_shape[1]

    @property
    def raw_dim(self) -> int:
        return self.image_weight.shape[1]

    def parameters(self):
        return (self.image_weight, self.image_bias, self.text_w1, self.text_b1,
                self.text_w2, self.text_b2)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.parameters():
            h.update(t.detach().contiguous().numpy().tobytes())
        h.update(repr((self.prompt_shape, self.temperature)).encode())
        return h.hexdigest()

    def encode_image(self, x) -> torch.Tensor:
        """Map raw examples (``N x raw_dim`` or a single vector) to image features."""
        x = torch.as_tensor(x, dtype=DTYPE)
        if x.shape[-1] != self.raw_dim:
            raise InvalidInputError(f"raw example width {x.shape[-1]} != {self.raw_dim}")
        return x @ self.image_weight.T + self.image_bias

    def encode_text(self, prompt: PromptContext, tokens) -> torch.Tensor:
        """Encode class tokens (``M x token_dim``) prefixed by ``prompt``."""
        tokens = torch.as_tensor(tokens, dtype=DTYPE)
        if tokens.ndim == 1:
            tokens = tokens.unsqueeze(0)
        if tuple(prompt.vectors.shape) != tuple(self.prompt_shape):
            raise InvalidInputError(
                f"prompt shape {tuple(prompt.vectors.shape)} != {tuple(self.prompt_shape)}")
        if tokens.shape[-1] != self.token_dim:
            raise InvalidInputError(f"class token width {tokens.shape[-1]} != {self.token_dim}")
        flat = prompt.vectors.reshape(1, -1).expand(tokens.shape[0], -1)
        z = torch.cat([flat, tokens], dim=1)
        hidden = torch.tanh(z @ self.text_w1.T + self.text_b1)
        return hidden @ self.text_w2.T + self.text_b2


def build_toy_bundle(spec: ToyEncoderSpec) -> FrozenEncoderBundle:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    d, h, n_prompt = spec.d, spec.hidden_width, spec.l * spec.e

    # Scaled so image features have norm of order one.
    image_weight = (np.eye(d) + spec.mixing * rng.standard_normal((d, d)) / np.sqrt(d)) / np.sqrt(d)
    image_bias = 0.05 * rng.standard_normal(d) / np.sqrt(d)

    # Hidden units track raw token channels one-to-one where possible; any
    # extra units read random mixtures.
    routing = np.zeros((h, d))
    k = min(h, d)
    routing[np.arange(k), np.arange(k)] = 1.0
    if h > d:
        routing[d:] = rng.standard_normal((h - d, d)) / np.sqrt(d)
    w1_prompt = spec.prompt_gain * rng.standard_normal((h, n_prompt)) / np.sqrt(n_prompt)
    w1_token = spec.token_gain * routing
    # Linearised around zero, W2 @ W1_token reproduces the image map.
    w2 = image_weight @ np.linalg.pinv(routing) / spec.token_gain

    def t(a):
        return torch.tensor(a, dtype=DTYPE)

    return FrozenEncoderBundle(
        image_weight=t(image_weight),
        image_bias=t(image_bias),
        text_w1=t(np.concatenate([w1_prompt, w1_token], axis=1)),
        text_b1=torch.zeros(h, dtype=DTYPE),
        text_w2=t(w2),
        text_b2=t(image_bias),
        prompt_shape=(spec.l, spec.e),
        temperature=DEFAULT_TEMPERATURE,
    )


def encode_class_set(bundle: FrozenEncoderBundle, prompt: PromptContext, classes) -> torch.Tensor:
    """Text features for an ordered set of class tokens, one row per class."""
    if classes is None or len(classes) == 0:
        raise InvalidInputError("class list is empty")
    if isinstance(classes, (list, tuple)):
        classes = torch.stack([torch.as_tensor(c, dtype=DTYPE) for c in classes])
    return bundle.encode_text(prompt, classes)
