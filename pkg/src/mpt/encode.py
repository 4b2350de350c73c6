"""Token construction: rank-pooled dynamic image -> patch + class tokens, and
motion prompts from the magnified sequence via spatial conv/pool embedding and
temporal Gaussian tokenization.

Prompt generation is differentiable end to end; the input frame stacks are
data and never require gradients, which lets the 3x3 conv + global average
pool be evaluated as (mean patch vector) @ (kernel matrix) exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError
from .seqio import Sequence

SIGMA_FLOOR = 1e-4
_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# rank pooling


def rank_pool_raw(seq: Sequence) -> np.ndarray:
    """Order-weighted frame sum with coefficients 2t - T - 1 (t = 1..T).

    Accumulated over mirror pairs (t, T+1-t), whose coefficients are exact
    negatives; this makes time reversal negate the result bit-exactly and
    constant sequences sum to exactly zero. The middle frame of an odd-length
    sequence has coefficient 0.
    """
    t = seq.t
    frames = seq.frames
    alpha = 2.0 * np.arange(1, t + 1) - t - 1
    acc = np.zeros(frames.shape[1:])
    for i in range(t // 2):
        j = t - 1 - i
        acc = acc + (alpha[i] * frames[i] + alpha[j] * frames[j])
    return acc


def rank_pool(seq: Sequence) -> np.ndarray:
    """Dynamic image: per-channel min-max normalization of the raw pooled sum.

    Channels with zero range map to the midpoint 0.5.
    """
    raw = rank_pool_raw(seq)
    lo = raw.min(axis=(0, 1))
    rng = raw.max(axis=(0, 1)) - lo
    out = (raw - lo) / np.where(rng == 0.0, 1.0, rng)
    out[:, :, rng == 0.0] = 0.5
    return out


# ---------------------------------------------------------------------------
# patch embedding


@dataclass
class PatchEmbedParams:
    """Frozen embedding tensors: projection, bias, positional table, class token.

    ``pos`` has 1 + N_v rows; row 0 belongs to the class token. Prompts carry
    no positional embedding.
    """

    proj: Tensor  # (P*P*C, D)
    bias: Tensor  # (1, D)
    pos: Tensor   # (1 + N_v, D)
    cls: Tensor   # (1, D)


def extract_patches(img: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping P x P patches as rows, grid row-major, (dy, dx, c) inside."""
    h, w, c = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    tiles = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles).reshape(gh * gw, patch * patch * c)


def patch_embed(img: np.ndarray, params: PatchEmbedParams, patch: int) -> tuple[Tensor, Tensor]:
    """Project patches to D dims, add positional embeddings, prepend class token."""
    rows = extract_patches(np.asarray(img, dtype=np.float64), patch)
    n_v = rows.shape[0]
    if params.pos.shape[0] != n_v + 1:
        raise ShapeError(
            f"positional table has {params.pos.shape[0]} rows, expected {n_v + 1}"
        )
    vision = dc.add(
        dc.add(dc.matmul(Tensor(rows), params.proj), params.bias),
        dc.slice_axis(params.pos, 0, 1, n_v + 1),
    )
    cls = dc.add(params.cls, dc.slice_axis(params.pos, 0, 0, 1))
    return cls, vision


# ---------------------------------------------------------------------------
# motion prompt generation


@dataclass
class PromptGenParams:
    """Trainable prompt-generation tensors."""

    kernel: Tensor   # (3, 3, C, D) conv weights
    bias: Tensor     # (1, D) conv bias
    w_mu: Tensor     # (N_p, T) temporal mixing for the means
    w_sigma: Tensor  # (N_p, T) temporal mixing for the variances
    w_p: Tensor      # (1, D) shared output scale

    @property
    def n_prompts(self) -> int:
        return self.w_mu.shape[0]


def mean_patch_vectors(frames: np.ndarray) -> np.ndarray:
    """Spatial mean of all 3x3 reflect-padded patches, per frame.

    Returns (T, 9*C); combined with the kernel matrix this reproduces
    conv3x3 -> global average pool exactly, because both are linear.
    """
    t, h, w, c = frames.shape
    padded = np.pad(frames, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="reflect")
    out = np.empty((t, 3, 3, c))
    for dy in range(3):
        for dx in range(3):
            out[:, dy, dx, :] = padded[:, dy : dy + h, dx : dx + w, :].mean(axis=(1, 2))
    return out.reshape(t, 9 * c)


def embed_motion_features(mean_patches: np.ndarray, params: PromptGenParams) -> Tensor:
    """Project precomputed (T, 9C) mean-patch rows through the conv kernel."""
    c, d = params.kernel.shape[2], params.kernel.shape[3]
    mean_patches = np.asarray(mean_patches, dtype=np.float64)
    if mean_patches.ndim != 2 or mean_patches.shape[1] != 9 * c:
        raise ShapeError(
            f"mean-patch rows have shape {mean_patches.shape}, kernel expects (*, {9 * c})"
        )
    w = dc.reshape(params.kernel, (9 * c, d))
    return dc.add(dc.matmul(Tensor(mean_patches), w), params.bias)  # (T, D)


def embed_motion(seq: Sequence, params: PromptGenParams) -> Tensor:
    """Per-frame 3x3 conv (stride 1, reflect pad) to D channels + global
    average pool, giving one D-vector per frame."""
    c = params.kernel.shape[2]
    if seq.frames.shape[3] != c:
        raise ShapeError(f"sequence has {seq.frames.shape[3]} channels, kernel expects {c}")
    return embed_motion_features(mean_patch_vectors(seq.frames), params)


def gaussian_tokenize(s_prime: Tensor, params: PromptGenParams) -> Tensor:
    """Temporal Gaussian tokenization of the embedded motion features.

    For each prompt i: mean and variance rows come from temporal mixing of
    s_prime; the elementwise normal density over the (T, D) grid is averaged
    over time and scaled by the shared output vector. The variance gets a
    softplus + floor so densities stay finite. All prompts are evaluated in
    one stacked (N_p, T, D) pass.
    """
    n_p = params.n_prompts
    t = s_prime.shape[0]
    mu = dc.matmul(params.w_mu, s_prime)                          # (N_p, D)
    var = dc.softplus(dc.matmul(params.w_sigma, s_prime)) + SIGMA_FLOOR
    diff = dc.sub(dc.tile_rows(s_prime, n_p), dc.repeat_rows(mu, t))
    grid = dc.reshape(diff, (n_p, t, diff.shape[1]))              # (N_p, T, D)
    var3 = dc.reshape(var, (n_p, 1, var.shape[1]))
    quad = dc.mul(dc.div(dc.mul(grid, grid), var3), -0.5)
    dens = dc.div(dc.exp(quad), dc.sqrt(dc.mul(var3, _TWO_PI)))
    return dc.mul(dc.tmean(dens, axis=1), params.w_p)             # (N_p, D)


def generate_prompts(motion_seq: Sequence, params: PromptGenParams) -> Tensor:
    """Full prompt path: spatial embedding then Gaussian tokenization."""
    return gaussian_tokenize(embed_motion(motion_seq, params), params)


# ---------------------------------------------------------------------------
# token batch


@dataclass
class TokenBatch:
    """Ordered token rows [cls | vision | prompts] with group index ranges."""

    tokens: Tensor
    cls_range: tuple[int, int]
    vision_range: tuple[int, int]
    prompt_range: tuple[int, int]

    @property
    def n_rows(self) -> int:
        return self.tokens.shape[0]

    def group_ranges(self) -> tuple[tuple[int, int], ...]:
        return (self.cls_range, self.vision_range, self.prompt_range)

    def split(self) -> tuple[Tensor, Tensor, Tensor | None]:
        cls = dc.slice_axis(self.tokens, 0, *self.cls_range)
        vision = dc.slice_axis(self.tokens, 0, *self.vision_range)
        prompts = None
        if self.prompt_range[1] > self.prompt_range[0]:
            prompts = dc.slice_axis(self.tokens, 0, *self.prompt_range)
        return cls, vision, prompts

    def with_tokens(self, tokens: Tensor) -> "TokenBatch":
        if tokens.shape != self.tokens.shape:
            raise ShapeError(f"token shape changed: {self.tokens.shape} -> {tokens.shape}")
        return TokenBatch(tokens, self.cls_range, self.vision_range, self.prompt_range)


def build_token_batch(cls: Tensor, vision: Tensor, prompts: Tensor | None) -> TokenBatch:
    d = cls.shape[1]
    if vision.shape[1] != d or (prompts is not None and prompts.shape[1] != d):
        raise ShapeError("token groups disagree on embedding dimension")
    if cls.shape[0] != 1:
        raise ShapeError(f"expected a single class token row, got {cls.shape[0]}")
    n_v = vision.shape[0]
    n_p = prompts.shape[0] if prompts is not None else 0
    parts = [cls, vision] if prompts is None else [cls, vision, prompts]
    return TokenBatch(
        tokens=dc.concat(parts, axis=0),
        cls_range=(0, 1),
        vision_range=(1, 1 + n_v),
        prompt_range=(1 + n_v, 1 + n_v + n_p),
    )


def write_token_dump(tokens: np.ndarray, path: str) -> None:
    """Debug dump: u32 rows, u32 D header, then f32 little-endian row-major."""
    rows, d = tokens.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", rows, d))
        f.write(np.asarray(tokens, dtype="<f4").tobytes(order="C"))
