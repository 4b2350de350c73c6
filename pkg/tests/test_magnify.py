"""Laplacian pyramid, Butterworth temporal filtering, motion magnification."""

import numpy as np
import pytest

from mpt.errors import ConfigError, DataError
from mpt.magnify import (
    BandpassSpec,
    Pyramid,
    laplacian_decompose,
    laplacian_reconstruct,
    magnify_motion_raw,
    magnify_sequence,
    temporal_bandpass,
)
from mpt.seqio import Sequence, SynthConfig, generate_synthetic, region_mask

from oracles import butter_bandpass_mag


def test_bandpass_spec_validation():
    with pytest.raises(ConfigError):
        BandpassSpec(4.0, 0.4, fps=100.0)  # low > high
    with pytest.raises(ConfigError):
        BandpassSpec(0.4, 60.0, fps=100.0)  # high >= fps/2
    with pytest.raises(ConfigError):
        BandpassSpec(0.0, 4.0, fps=100.0)
    with pytest.raises(ConfigError):
        BandpassSpec(0.4, 4.0, order=0, fps=100.0)


def test_constant_image_bands_are_zero():
    img = np.full((32, 32, 3), 0.7)
    pyr = laplacian_decompose(img, 3)
    for band in pyr.bands:
        assert np.abs(band).max() < 1e-12
    assert np.abs(pyr.residual - 0.7).max() < 1e-12


def test_pyramid_round_trip_random_images():
    rng = np.random.default_rng(0)
    for _ in range(10):
        img = rng.random((64, 64, 3))
        pyr = laplacian_decompose(img, 3)
        rec = laplacian_reconstruct(pyr)
        assert np.abs(rec - img).max() < 1e-9


def test_pyramid_level_resolutions():
    pyr = laplacian_decompose(np.zeros((64, 32)), 3)
    assert [b.shape for b in pyr.bands] == [(64, 32), (32, 16), (16, 8)]
    assert pyr.residual.shape == (8, 4)


def test_pyramid_rejects_nondivisible():
    with pytest.raises(DataError):
        laplacian_decompose(np.zeros((60, 64)), 3)


def test_impulse_band_energy_frozen_oracle():
    # Direct energy computation over all bands + residual for a centered unit
    # impulse; the pyramid is overcomplete and non-orthogonal, so band energy
    # undershoots the input energy (1.0). The value below was produced by the
    # oracle itself.
    imp = np.zeros((64, 64))
    imp[32, 32] = 1.0
    pyr = laplacian_decompose(imp, 3)
    energy = sum(float((b**2).sum()) for b in pyr.bands) + float((pyr.residual**2).sum())
    assert abs(energy - 0.8816876023910192) / 0.8816876023910192 < 1e-6


def test_bandpass_rejects_constant_signal():
    spec = BandpassSpec(0.4, 4.0, fps=100.0)
    out = temporal_bandpass(np.full((200,), 0.3), spec)
    assert np.abs(out).max() < 1e-9


def test_bandpass_band_center_matches_analytic_gain():
    fps = 100.0
    spec = BandpassSpec(0.4, 4.0, order=2, fps=fps)
    f = np.sqrt(0.4 * 4.0)  # geometric band center, ~1.26 Hz
    t = np.arange(2000) / fps
    x = np.sin(2 * np.pi * f * t)
    y = temporal_bandpass(x, spec)
    mid = slice(500, 1500)
    measured = (y[mid].max() - y[mid].min()) / 2.0
    expected = butter_bandpass_mag(f, 0.4, 4.0, 2) ** 2  # forward-backward squares |H|
    assert abs(measured - expected) / expected < 0.10


def test_bandpass_stopband_attenuation():
    fps = 100.0
    spec = BandpassSpec(0.4, 4.0, order=2, fps=fps)
    t = np.arange(2000) / fps
    x = np.sin(2 * np.pi * 20.0 * t)
    y = temporal_bandpass(x, spec)
    mid = slice(500, 1500)
    measured = np.abs(y[mid]).max()
    assert measured < 0.01  # < 1% of unit input amplitude
    # the analytic oracle predicts ~0.107%, which is what the 1% bound rests on
    assert butter_bandpass_mag(20.0, 0.4, 4.0, 2) ** 2 < 0.01


def test_bandpass_needs_four_samples():
    spec = BandpassSpec(0.4, 4.0, fps=100.0)
    with pytest.raises(DataError):
        temporal_bandpass(np.zeros(3), spec)


def _static_sequence(t=32, value=0.5):
    return Sequence(frames=np.full((t, 32, 32, 1), value), fps=100.0)


def test_static_sequence_maps_to_half():
    seq = _static_sequence()
    spec = BandpassSpec(0.4, 4.0, fps=seq.fps)
    out = magnify_sequence(seq, 20.0, spec, levels=3)
    assert np.abs(out.frames - 0.5).max() < 1e-6


def test_zero_gain_maps_to_half():
    rng = np.random.default_rng(1)
    frames = np.repeat(rng.random((1, 32, 32, 1)), 24, axis=0)
    frames = np.clip(frames + 0.001 * rng.standard_normal(frames.shape), 0, 1)
    seq = Sequence(frames=frames, fps=100.0)
    spec = BandpassSpec(0.4, 4.0, fps=seq.fps)
    out = magnify_sequence(seq, 0.0, spec, levels=3)
    assert np.abs(out.frames - 0.5).max() < 1e-6


def _synthetic_clip(seed=0):
    cfg = SynthConfig(subjects=3, classes=2, reps=1, height=32, width=32,
                      channels=1, frames=64, fps=50.0, freq_hz=1.5,
                      amplitude=0.4, region=10)
    seqs, _ = generate_synthetic(cfg, seed=seed)
    return cfg, seqs[0]


def test_magnified_motion_contrast_on_ground_truth_mask():
    cfg, seq = _synthetic_clip()
    spec = BandpassSpec(0.4, 4.0, fps=seq.fps)
    out = magnify_sequence(seq, 20.0, spec, levels=3)
    mask = region_mask(cfg, seq.label)
    stds = out.frames.std(axis=0)[:, :, 0]
    moving = stds[mask].mean()
    static = stds[~mask].max()
    assert moving >= 10.0 * max(static, 1e-30)


def test_linearity_scaling_of_motion_component():
    # filtering is linear and removes DC, so magnify(a*s + shift) has a motion
    # component exactly a times the original's
    _, seq = _synthetic_clip(seed=2)
    spec = BandpassSpec(0.4, 4.0, fps=seq.fps)
    base = Sequence(frames=0.25 + 0.5 * seq.frames, fps=seq.fps)
    scaled = Sequence(frames=0.4 * base.frames + 0.1, fps=seq.fps)
    raw_base = magnify_motion_raw(base, 5.0, spec, levels=3)
    raw_scaled = magnify_motion_raw(scaled, 5.0, spec, levels=3)
    assert np.abs(raw_scaled - 0.4 * raw_base).max() < 1e-9


def test_beta_doubling_is_exact():
    cfg, seq = _synthetic_clip(seed=3)
    spec = BandpassSpec(0.4, 4.0, fps=seq.fps)
    raw1 = magnify_motion_raw(seq, 7.0, spec, levels=3)
    raw2 = magnify_motion_raw(seq, 14.0, spec, levels=3)
    assert np.array_equal(raw2, 2.0 * raw1)


def test_pixel_permutation_commutes_with_filter():
    rng = np.random.default_rng(4)
    x = rng.random((40, 50))
    spec = BandpassSpec(0.4, 4.0, fps=50.0)
    perm = rng.permutation(50)
    a = temporal_bandpass(x, spec)[:, perm]
    b = temporal_bandpass(x[:, perm], spec)
    assert np.abs(a - b).max() < 1e-12


def test_reconstruct_decompose_inverse_pairing():
    rng = np.random.default_rng(5)
    img = rng.random((32, 32))
    pyr = laplacian_decompose(img, 2)
    rebuilt = laplacian_reconstruct(Pyramid(bands=list(pyr.bands), residual=pyr.residual))
    assert np.abs(rebuilt - img).max() < 1e-9
