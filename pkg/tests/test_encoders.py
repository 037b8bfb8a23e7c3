import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dept.encoders import (PromptContext, ToyEncoderSpec, build_toy_bundle, encode_class_set,
                           init_prompt)
from dept.errors import InvalidInputError, InvalidSpecError


def test_same_seed_gives_identical_encodings():
    spec = ToyEncoderSpec(seed=4)
    a, b = build_toy_bundle(spec), build_toy_bundle(spec)
    assert a.checksum() == b.checksum()
    prompt = init_prompt(4, 16, torch.Generator().manual_seed(0))
    tokens = torch.randn(10, 32, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    assert torch.equal(a.encode_text(prompt, tokens), b.encode_text(prompt, tokens))
    x = np.random.default_rng(0).standard_normal((3, 32))
    assert torch.equal(a.encode_image(x), b.encode_image(x))


def test_different_seed_differs():
    assert build_toy_bundle(ToyEncoderSpec(seed=0)).checksum() != \
        build_toy_bundle(ToyEncoderSpec(seed=1)).checksum()


def test_text_feature_width_for_ten_classes():
    bundle = build_toy_bundle(ToyEncoderSpec(d=32, l=4, e=16))
    prompt = init_prompt(4, 16, torch.Generator().manual_seed(0))
    feats = encode_class_set(bundle, prompt, list(np.eye(32)[:10]))
    assert feats.shape == (10, 32)


def test_prompt_init_scale():
    p = init_prompt(200, 50, torch.Generator().manual_seed(0)).vectors
    assert abs(float(p.std()) - 0.02) < 0.001
    assert abs(float(p.mean())) < 0.001


def test_zero_prompt_text_tracks_image_map():
    # With tanh near-linear the text map of a small token matches the image map.
    bundle = build_toy_bundle(ToyEncoderSpec(seed=2))
    prompt = PromptContext(torch.zeros(4, 16, dtype=torch.float64))
    tok = 0.01 * torch.randn(5, 32, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    err = bundle.encode_text(prompt, tok) - bundle.encode_image(tok)
    assert float(err.abs().max()) < 1e-4


def test_jacobian_matches_central_differences():
    bundle = build_toy_bundle(ToyEncoderSpec(seed=1, d=6, l=2, e=3, hidden_width=8))
    rng = np.random.default_rng(0)
    p0 = torch.tensor(0.3 * rng.standard_normal((2, 3)))
    tok = torch.tensor(rng.standard_normal((1, 6)))

    def f(flat):
        return bundle.encode_text(PromptContext(flat.reshape(2, 3)), tok).reshape(-1)

    jac = torch.autograd.functional.jacobian(f, p0.reshape(-1))
    h = 1e-3
    for k in range(6):
        e = torch.zeros(6, dtype=torch.float64)
        e[k] = h
        fd = (f(p0.reshape(-1) + e) - f(p0.reshape(-1) - e)) / (2 * h)
        assert not torch.allclose(fd, torch.zeros_like(fd))
        rel = (fd - jac[:, k]).norm() / jac[:, k].norm()
        assert rel < 1e-4


@given(st.floats(0.1, 100.0), st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_image_encoder_is_affine(scale, seed):
    bundle = build_toy_bundle(ToyEncoderSpec(d=8, e=2, l=1, hidden_width=8))
    x = torch.tensor(np.random.default_rng(seed).standard_normal(8))
    lhs = bundle.encode_image(scale * x) - bundle.image_bias
    rhs = scale * (bundle.encode_image(x) - bundle.image_bias)
    assert torch.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_errors():
    bundle = build_toy_bundle(ToyEncoderSpec(d=8, e=2, l=1, hidden_width=8))
    prompt = init_prompt(1, 2, torch.Generator().manual_seed(0))
    with pytest.raises(InvalidInputError):
        encode_class_set(bundle, prompt, [])
    with pytest.raises(InvalidInputError):
        bundle.encode_text(prompt, torch.zeros(2, 7))
    with pytest.raises(InvalidInputError):
        bundle.encode_text(init_prompt(2, 2, torch.Generator()), torch.zeros(2, 8))
    with pytest.raises(InvalidInputError):
        bundle.encode_image(np.zeros(5))
    with pytest.raises(InvalidInputError):
        PromptContext(torch.tensor([[float("nan")]]))
    with pytest.raises(InvalidSpecError):
        build_toy_bundle(ToyEncoderSpec(d=0))
    with pytest.raises(InvalidSpecError):
        dataclasses.replace(bundle, temperature=0.0)
