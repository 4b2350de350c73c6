"""Sequence containers, the MESEQ file format, manifests, temporal
standardization, and a synthetic micro-motion dataset generator.

MESEQ layout: magic ``MESQ1\\0`` (6 bytes), little-endian u32 T, H, W, C,
f32 fps, then T*H*W*C little-endian f32 pixel values in t-major, row-major
order. Frames are float64 in memory; the payload stores float32, so a write
followed by a read reproduces any float32-representable frame stack exactly.

Manifest layout: UTF-8 text, first line ``#classes: name0,name1,...``, then
one ``path<TAB>subject<TAB>label_index`` record per line.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError, FormatError

MAGIC = b"MESQ1\0"
_HEADER = struct.Struct("<IIIIf")
_MAX_ELEMS = 1 << 31  # dimension-overflow guard for the payload size


@dataclass
class Sequence:
    """A frame stack with acquisition metadata.

    frames: (T, H, W, C) float64 array with values in [0, 1]; T >= 2, C in {1, 3}.
    """

    frames: np.ndarray
    fps: float
    id: str = ""
    subject: str = ""
    label: int = 0

    def __post_init__(self):
        self.frames = np.ascontiguousarray(np.asarray(self.frames, dtype=np.float64))
        if self.frames.ndim != 4:
            raise DataError(f"frames must be (T,H,W,C), got shape {self.frames.shape}")
        t, _, _, c = self.frames.shape
        if t < 2:
            raise DataError(f"need at least 2 frames, got {t}")
        if c not in (1, 3):
            raise DataError(f"channel count must be 1 or 3, got {c}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError("frames contain non-finite values")
        lo, hi = float(self.frames.min()), float(self.frames.max())
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"pixel values outside [0,1]: min={lo}, max={hi}")
        if not self.fps > 0:
            raise DataError(f"fps must be positive, got {self.fps}")

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape


@dataclass
class Manifest:
    """Dataset index: (path, subject, label) entries plus ordered class names."""

    entries: list[tuple[str, str, int]]
    class_names: list[str]

    def __post_init__(self):
        n = len(self.class_names)
        for path, subject, label in self.entries:
            if not 0 <= label < n:
                raise DataError(f"label {label} out of range for {n} classes ({path})")
            if not subject:
                raise DataError(f"empty subject for {path}")

    def subjects(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, subject, _ in self.entries:
            seen.setdefault(subject)
        return list(seen)


def write_meseq(seq: Sequence, path: str | os.PathLike) -> None:
    t, h, w, c = seq.frames.shape
    payload = seq.frames.astype("<f4").tobytes(order="C")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(t, h, w, c, float(seq.fps)))
        f.write(payload)


def read_meseq(path: str | os.PathLike) -> Sequence:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:6]!r}")
    t, h, w, c, fps = _HEADER.unpack_from(raw, len(MAGIC))
    n = t * h * w * c
    if min(t, h, w, c) == 0 or n > _MAX_ELEMS:
        raise FormatError(f"{path}: bogus dimensions {(t, h, w, c)}")
    body = raw[len(MAGIC) + _HEADER.size :]
    if len(body) != 4 * n:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {4 * n}")
    frames = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(t, h, w, c)
    stem = os.path.splitext(os.path.basename(path))[0]
    return Sequence(frames=frames, fps=float(fps), id=stem)


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    lines = ["#classes: " + ",".join(manifest.class_names)]
    lines += [f"{p}\t{s}\t{l}" for p, s, l in manifest.entries]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("#classes:"):
        raise FormatError(f"{path}: missing '#classes:' header line")
    class_names = [c.strip() for c in lines[0].split(":", 1)[1].split(",") if c.strip()]
    entries = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise FormatError(f"{path}: malformed record {ln!r}")
        try:
            entries.append((parts[0], parts[1], int(parts[2])))
        except ValueError as exc:
            raise FormatError(f"{path}: bad label in {ln!r}") from exc
    return Manifest(entries=entries, class_names=class_names)


# ---------------------------------------------------------------------------
# temporal standardization

TARGET_FRAMES = 16


def standardize_length(seq: Sequence, target: int = TARGET_FRAMES) -> Sequence:
    """Resample a sequence to exactly ``target`` frames.

    Longer sequences are uniformly index-sampled (first and last frame always
    kept); shorter ones are expanded by per-pixel linear interpolation in
    time. The fps metadata is rescaled so the clip duration is preserved.
    """
    if target < 2:
        raise ConfigError(f"target frame count must be >= 2, got {target}")
    t = seq.t
    new_fps = seq.fps * (target - 1) / (t - 1)
    if t == target:
        return replace(seq, frames=seq.frames.copy())
    if t > target:
        idx = np.round(np.linspace(0, t - 1, target)).astype(int)
        frames = seq.frames[idx].copy()
    else:
        pos = np.linspace(0.0, t - 1.0, target)
        k = np.minimum(pos.astype(int), t - 2)
        w = (pos - k).reshape(-1, 1, 1, 1)
        frames = (1.0 - w) * seq.frames[k] + w * seq.frames[k + 1]
    return replace(seq, frames=frames, fps=new_fps)


# ---------------------------------------------------------------------------
# synthetic micro-motion data


@dataclass
class SynthConfig:
    """Generator settings for the synthetic stand-in dataset.

    Each sequence is a static per-subject random texture with one
    class-specific square region translating horizontally by a sub-pixel
    sinusoid of amplitude ``amplitude`` pixels at ``freq_hz``.
    """

    subjects: int = 10
    classes: int = 3
    reps: int = 3
    height: int = 64
    width: int = 64
    channels: int = 3
    frames: int = 100
    fps: float = 100.0
    freq_hz: float = 1.5
    amplitude: float = 0.3
    region: int = 20
    # repetitions vary by a small phase/amplitude jitter; clips are
    # apex-aligned the way cropped micro-expression clips are. The base of
    # pi/2 starts clips at peak displacement, where the rank-pool order
    # weighting responds most strongly. A fraction of clips are captured in
    # the release half of the motion instead (phase shifted by pi), which
    # inverts their appearance-order signature while leaving the motion
    # dynamics observable.
    phase_base: float = math.pi / 2
    phase_jitter: float = 0.25
    amp_jitter: float = 0.1
    offset_fraction: float = 1.0 / 3.0
    noise: float = 0.0
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.subjects < 3:
            raise ConfigError(f"need >= 3 subjects, got {self.subjects}")
        if self.classes < 2:
            raise ConfigError(f"need >= 2 classes, got {self.classes}")
        if self.amplitude < 0:
            raise ConfigError(f"amplitude must be >= 0, got {self.amplitude}")
        if not 0 < self.freq_hz < self.fps / 2:
            raise ConfigError(
                f"freq {self.freq_hz} Hz outside (0, fps/2) for fps {self.fps}"
            )
        if not self.class_names:
            self.class_names = [f"class{k}" for k in range(self.classes)]
        if len(self.class_names) != self.classes:
            raise ConfigError("class_names length disagrees with classes")


def region_mask(config: SynthConfig, label: int) -> np.ndarray:
    """Ground-truth (H, W) bool mask of the region that moves for ``label``.

    Regions are laid out along the image diagonal so classes never overlap.
    """
    if not 0 <= label < config.classes:
        raise DataError(f"label {label} out of range")
    h, w, r = config.height, config.width, config.region
    slots = config.classes
    ys = np.linspace(0, h - r, slots).astype(int)
    xs = np.linspace(0, w - r, slots).astype(int)
    mask = np.zeros((h, w), dtype=bool)
    mask[ys[label] : ys[label] + r, xs[label] : xs[label] + r] = True
    return mask


def _smooth_noise(rng: np.random.Generator, h: int, w: int, c: int) -> np.ndarray:
    tex = rng.random((h, w, c))
    kern = np.array([1.0, 2.0, 1.0]) / 4.0
    for axis in (0, 1):
        tex = (
            kern[0] * np.roll(tex, 1, axis=axis)
            + kern[1] * tex
            + kern[2] * np.roll(tex, -1, axis=axis)
        )
    return tex


def _subject_texture(common: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Blend of the dataset-wide base texture and a per-subject one.

    Like faces, subjects share coarse structure while differing in detail;
    the shared component is what lets location cues transfer across subjects.
    """
    h, w, c = common.shape
    tex = 0.7 * common + 0.3 * _smooth_noise(rng, h, w, c)
    lo, hi = tex.min(), tex.max()
    return 0.1 + 0.8 * (tex - lo) / (hi - lo)


def _shift_rows(tex: np.ndarray, dx: float) -> np.ndarray:
    """Sample ``tex`` at x - dx with linear interpolation, reflect boundary."""
    h, w, c = tex.shape
    x = np.arange(w) - dx
    x = np.clip(x, 0.0, w - 1.0)
    x0 = np.minimum(x.astype(int), w - 2)
    frac = (x - x0).reshape(1, w, 1)
    return (1.0 - frac) * tex[:, x0, :] + frac * tex[:, x0 + 1, :]


def generate_synthetic(config: SynthConfig, seed: int = 0) -> tuple[list[Sequence], Manifest]:
    """Deterministically build the synthetic dataset for a seed.

    Returns sequences and a manifest whose paths follow the
    ``<subject>_<class>_<rep>.meseq`` naming convention.
    """
    sequences: list[Sequence] = []
    entries: list[tuple[str, str, int]] = []
    t_axis = np.arange(config.frames) / config.fps
    common = _smooth_noise(
        np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(999,))),
        config.height, config.width, config.channels,
    )
    for si in range(config.subjects):
        subject = f"s{si:02d}"
        # independent deterministic streams per subject and per (subject, class, rep) cell
        subj_seq = np.random.SeedSequence(entropy=seed, spawn_key=(si,))
        tex = _subject_texture(common, np.random.default_rng(subj_seq))
        for ci in range(config.classes):
            mask = region_mask(config, ci)[:, :, None]
            for ri in range(config.reps):
                cell = np.random.default_rng(
                    np.random.SeedSequence(entropy=seed, spawn_key=(si, ci, ri))
                )
                phase = config.phase_base + cell.uniform(-config.phase_jitter,
                                                         config.phase_jitter)
                amp = config.amplitude * (1.0 + cell.uniform(-config.amp_jitter,
                                                             config.amp_jitter))
                if cell.uniform() < config.offset_fraction:
                    phase += np.pi
                disp = amp * np.sin(2.0 * np.pi * config.freq_hz * t_axis + phase)
                frames = np.empty(
                    (config.frames, config.height, config.width, config.channels)
                )
                for ti in range(config.frames):
                    moved = _shift_rows(tex, disp[ti])
                    frames[ti] = np.where(mask, moved, tex)
                if config.noise > 0:
                    frames += config.noise * cell.standard_normal(frames.shape)
                    frames = np.clip(frames, 0.0, 1.0)
                sid = f"{subject}_c{ci}_r{ri}"
                sequences.append(
                    Sequence(frames=frames, fps=config.fps, id=sid, subject=subject, label=ci)
                )
                entries.append((f"{sid}.meseq", subject, ci))
    return sequences, Manifest(entries=entries, class_names=list(config.class_names))
