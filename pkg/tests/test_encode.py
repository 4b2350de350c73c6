"""Rank pooling, patch embedding, motion embedding, Gaussian tokenization,
token batch assembly."""

import numpy as np
import pytest

from mpt import diffcore as dc
from mpt.diffcore import Tensor
from mpt.encode import (
    PatchEmbedParams,
    PromptGenParams,
    SIGMA_FLOOR,
    build_token_batch,
    embed_motion,
    extract_patches,
    gaussian_tokenize,
    mean_patch_vectors,
    patch_embed,
    rank_pool,
    rank_pool_raw,
    write_token_dump,
)
from mpt.errors import ShapeError
from mpt.seqio import Sequence

from oracles import (
    conv3x3_avgpool_naive,
    fd_grad_at,
    gaussian_tokens_naive,
    patch_tokens_naive,
    rel_err,
)


def _seq(frames, fps=30.0):
    return Sequence(frames=np.asarray(frames, dtype=np.float64), fps=fps)


def _rand_seq(rng, t=5, h=6, w=6, c=3):
    return _seq(rng.random((t, h, w, c)))


# --- rank pooling -------------------------------------------------------------


def test_rank_pool_coefficients_t3():
    # alpha_t = 2t - T - 1 gives (-2, 0, 2) for T=3
    frames = np.zeros((3, 2, 2, 1))
    frames[0] = 0.1
    frames[1] = 0.7
    frames[2] = 0.3
    raw = rank_pool_raw(_seq(frames))
    expected = -2 * 0.1 + 0 * 0.7 + 2 * 0.3
    assert np.abs(raw - expected).max() < 1e-15


def test_rank_pool_time_reversal_negates_exactly():
    rng = np.random.default_rng(0)
    for t in (4, 5, 16):
        seq = _rand_seq(rng, t=t)
        rev = _seq(seq.frames[::-1].copy())
        assert np.array_equal(rank_pool_raw(rev), -rank_pool_raw(seq))


def test_rank_pool_constant_sequence_exactly_zero():
    seq = _seq(np.full((7, 4, 4, 3), 0.37))
    assert np.all(rank_pool_raw(seq) == 0.0)


def test_rank_pool_normalization_range_and_zero_range_guard():
    rng = np.random.default_rng(1)
    seq = _rand_seq(rng)
    dyn = rank_pool(seq)
    assert dyn.min() >= 0.0 and dyn.max() <= 1.0
    const = _seq(np.full((4, 4, 4, 3), 0.2))
    assert np.all(rank_pool(const) == 0.5)


# --- patch embedding ----------------------------------------------------------


def _embed_params(rng, patch=4, c=3, d=8, n_v=4, req=False):
    return PatchEmbedParams(
        proj=Tensor(rng.normal(size=(patch * patch * c, d)), requires_grad=req),
        bias=Tensor(rng.normal(size=(1, d)), requires_grad=req),
        pos=Tensor(rng.normal(size=(1 + n_v, d)), requires_grad=req),
        cls=Tensor(rng.normal(size=(1, d)), requires_grad=req),
    )


def test_patch_count_64_image():
    rng = np.random.default_rng(2)
    params = _embed_params(rng, patch=8, c=3, d=8, n_v=64)
    cls, vision = patch_embed(rng.random((64, 64, 3)), params, patch=8)
    assert vision.shape == (64, 8)
    assert cls.shape == (1, 8)


def test_zero_image_zero_pos_gives_bias_rows():
    rng = np.random.default_rng(3)
    params = _embed_params(rng, patch=4, c=3, d=8, n_v=4)
    params.pos = Tensor(np.zeros((5, 8)))
    cls, vision = patch_embed(np.zeros((8, 8, 3)), params, patch=4)
    assert np.abs(vision.data - params.bias.data).max() == 0.0


def test_patch_embed_matches_per_patch_oracle():
    rng = np.random.default_rng(4)
    img = rng.random((8, 8, 3))
    params = _embed_params(rng, patch=4, c=3, d=8, n_v=4)
    _, vision = patch_embed(img, params, patch=4)
    oracle = patch_tokens_naive(img, 4, params.proj.data, params.bias.data[0])
    oracle = oracle + params.pos.data[1:]
    assert np.abs(vision.data - oracle).max() < 1e-10


def test_patch_embed_rejects_indivisible():
    rng = np.random.default_rng(5)
    params = _embed_params(rng)
    with pytest.raises(ShapeError):
        extract_patches(rng.random((9, 8, 3)), 4)


# --- motion embedding ---------------------------------------------------------


def _prompt_params(rng, c=3, d=6, n_p=3, t=4, req=False):
    return PromptGenParams(
        kernel=Tensor(rng.normal(size=(3, 3, c, d)), requires_grad=req),
        bias=Tensor(rng.normal(size=(1, d)), requires_grad=req),
        w_mu=Tensor(rng.normal(size=(n_p, t)), requires_grad=req),
        w_sigma=Tensor(rng.normal(size=(n_p, t)), requires_grad=req),
        w_p=Tensor(rng.normal(size=(1, d)), requires_grad=req),
    )


def test_embed_motion_constant_field():
    rng = np.random.default_rng(6)
    params = _prompt_params(rng, c=1, d=4)
    seq = _seq(np.full((4, 5, 5, 1), 0.3))
    out = embed_motion(seq, params)
    ksum = params.kernel.data.reshape(9, 4).sum(axis=0)
    expected = 0.3 * ksum + params.bias.data[0]
    assert np.abs(out.data - expected).max() < 1e-12


def test_embed_motion_identical_frames_identical_rows():
    rng = np.random.default_rng(7)
    params = _prompt_params(rng, c=3, d=6)
    frame = rng.random((1, 6, 6, 3))
    seq = _seq(np.repeat(frame, 4, axis=0))
    out = embed_motion(seq, params).data
    assert np.abs(out - out[0]).max() < 1e-12


def test_embed_motion_matches_dense_conv_oracle():
    rng = np.random.default_rng(8)
    params = _prompt_params(rng, c=3, d=6)
    seq = _rand_seq(rng, t=4, h=6, w=6, c=3)
    out = embed_motion(seq, params).data
    oracle = conv3x3_avgpool_naive(
        seq.frames, params.kernel.data, params.bias.data[0]
    )
    assert np.abs(out - oracle).max() < 1e-10


# --- gaussian tokenization ----------------------------------------------------


def test_standard_normal_peak_value():
    # N(x=mu, sigma=1) = 1/sqrt(2*pi)
    rng = np.random.default_rng(9)
    assert abs(1.0 / np.sqrt(2 * np.pi) - 0.3989422804014327) < 1e-15


def test_gaussian_tokenize_matches_scalar_loop_oracle():
    rng = np.random.default_rng(10)
    params = _prompt_params(rng, d=6, n_p=5, t=4)
    s_prime = Tensor(rng.normal(size=(4, 6)))
    out = gaussian_tokenize(s_prime, params).data
    oracle = gaussian_tokens_naive(
        s_prime.data, params.w_mu.data, params.w_sigma.data,
        params.w_p.data[0], SIGMA_FLOOR,
    )
    assert np.abs(out - oracle).max() < 1e-10


def test_gaussian_tokenize_constant_rows_collapse():
    # if s_prime is constant over time and mu_i equals that constant, every
    # temporal term is the same density, so the average equals one term
    rng = np.random.default_rng(11)
    d, t = 5, 4
    row = rng.normal(size=(1, d))
    s_prime = Tensor(np.repeat(row, t, axis=0))
    w_mu = np.zeros((1, t))
    w_mu[0, 0] = 1.0  # picks out the (constant) row exactly
    params = PromptGenParams(
        kernel=Tensor(rng.normal(size=(3, 3, 1, d))),
        bias=Tensor(np.zeros((1, d))),
        w_mu=Tensor(w_mu),
        w_sigma=Tensor(rng.normal(size=(1, t))),
        w_p=Tensor(np.ones((1, d))),
    )
    out = gaussian_tokenize(s_prime, params).data
    var = np.log1p(np.exp(-(np.abs(params.w_sigma.data @ s_prime.data)))) \
        + np.maximum(params.w_sigma.data @ s_prime.data, 0.0) + SIGMA_FLOOR
    единичная = 1.0 / np.sqrt(2 * np.pi * var)
    assert np.abs(out - единичная).max() < 1e-12


def test_prompt_count_independent_of_content():
    rng = np.random.default_rng(12)
    params = _prompt_params(rng, n_p=5, t=4, d=6)
    for scale in (0.0, 1.0, 100.0):
        s_prime = Tensor(scale * rng.normal(size=(4, 6)))
        assert gaussian_tokenize(s_prime, params).shape == (5, 6)


def test_gaussian_densities_positive_and_finite():
    rng = np.random.default_rng(13)
    params = _prompt_params(rng, n_p=4, t=6, d=8)
    s_prime = Tensor(1e3 * rng.normal(size=(6, 8)))
    out = gaussian_tokenize(s_prime, params).data
    assert np.all(np.isfinite(out))


def test_gaussian_tokenize_gradients_finite_difference():
    rng = np.random.default_rng(14)
    params = _prompt_params(rng, n_p=2, t=4, d=5, req=True)
    s_val = rng.normal(size=(4, 5))
    r = rng.normal(size=(2, 5))

    def loss_from(params):
        out = gaussian_tokenize(Tensor(s_val), params)
        return dc.tsum(dc.mul(out, Tensor(r)))

    loss = loss_from(params)
    dc.backward(loss)
    for t in (params.w_mu, params.w_sigma, params.w_p):
        got = t.grad.reshape(-1)
        idx = list(range(t.data.size))
        fd = fd_grad_at(lambda: loss_from(params).item(), t.data, idx, h=1e-5)
        for i in idx:
            assert rel_err(fd[i], got[i]) < 1e-4


# --- token batch --------------------------------------------------------------


def _groups(rng, n_v=6, n_p=3, d=4):
    return (Tensor(rng.normal(size=(1, d))), Tensor(rng.normal(size=(n_v, d))),
            Tensor(rng.normal(size=(n_p, d))))


def test_token_batch_row_count_and_ranges():
    rng = np.random.default_rng(15)
    cls, vision, prompts = _groups(rng, n_v=64, n_p=5, d=4)
    batch = build_token_batch(cls, vision, prompts)
    assert batch.n_rows == 70
    assert batch.group_ranges() == ((0, 1), (1, 65), (65, 70))
    ranges = batch.group_ranges()
    covered = sorted(i for lo, hi in ranges for i in range(lo, hi))
    assert covered == list(range(70))


def test_token_batch_split_round_trip():
    rng = np.random.default_rng(16)
    cls, vision, prompts = _groups(rng)
    batch = build_token_batch(cls, vision, prompts)
    c, v, p = batch.split()
    assert np.array_equal(c.data, cls.data)
    assert np.array_equal(v.data, vision.data)
    assert np.array_equal(p.data, prompts.data)


def test_token_batch_no_prompts():
    rng = np.random.default_rng(17)
    cls, vision, _ = _groups(rng)
    batch = build_token_batch(cls, vision, None)
    assert batch.prompt_range == (7, 7)
    c, v, p = batch.split()
    assert p is None


def test_token_batch_dimension_mismatch():
    rng = np.random.default_rng(18)
    cls, vision, _ = _groups(rng, d=4)
    with pytest.raises(ShapeError):
        build_token_batch(cls, vision, Tensor(rng.normal(size=(3, 5))))


def test_token_dump_layout(tmp_path):
    import struct

    rng = np.random.default_rng(19)
    tokens = rng.normal(size=(7, 4))
    path = tmp_path / "tokens.bin"
    write_token_dump(tokens, str(path))
    blob = path.read_bytes()
    rows, d = struct.unpack_from("<II", blob)
    assert (rows, d) == (7, 4)
    vals = np.frombuffer(blob, dtype="<f4", offset=8).reshape(7, 4)
    assert np.abs(vals - tokens).max() < 1e-6
