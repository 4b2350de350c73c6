"""Tiny frozen vision transformer with per-group adapters, ablation variants,
the classification head, and cross-entropy loss.

The backbone (patch embedding, positional table, class token, attention and
feed-forward stacks, layernorm parameters) is always initialized from the
seed and frozen unless the ``full-finetune`` variant unfreezes it. Adapter
up-projections start at zero so every adapted model is exactly the frozen
backbone at initialization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encode import (
    PatchEmbedParams,
    PromptGenParams,
    TokenBatch,
    build_token_batch,
    gaussian_tokenize,
    embed_motion_features,
    patch_embed,
)
from .errors import ConfigError, DataError, FormatError, ShapeError

WEIGHTS_MAGIC = b"MPTW1\0"

VARIANTS = (
    "head-only",
    "full-finetune",
    "prompt-only",
    "adapter-only",
    "vpt-random-prompts",
    "primitive-adapter",
    "full-mpt",
)

ADAPTER_MODES = ("mean-broadcast", "per-token")


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch: int = 8
    n_prompts: int = 5
    reduction: int = 8
    classes: int = 3
    image_size: int = 64
    channels: int = 3
    frames: int = 16
    adapter_mode: str = "mean-broadcast"

    def __post_init__(self):
        for name in ("dim", "layers", "heads", "mlp_ratio", "patch", "n_prompts",
                     "reduction", "classes", "image_size", "channels", "frames"):
            if getattr(self, name) < 1 and name != "n_prompts":
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_prompts < 0:
            raise ConfigError(f"n_prompts must be >= 0, got {self.n_prompts}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % self.reduction:
            raise ConfigError(f"dim {self.dim} not divisible by reduction {self.reduction}")
        if self.image_size % self.patch:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.channels not in (1, 3):
            raise ConfigError(f"channels must be 1 or 3, got {self.channels}")
        if self.adapter_mode not in ADAPTER_MODES:
            raise ConfigError(f"unknown adapter_mode {self.adapter_mode!r}")

    @property
    def n_vision(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def bottleneck(self) -> int:
        return self.dim // self.reduction


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class GroupAdapterParams:
    """Three bottleneck branches, one per token group."""

    x_down: Tensor
    x_up: Tensor
    v_down: Tensor
    v_up: Tensor
    p_down: Tensor
    p_up: Tensor


@dataclass
class PrimitiveAdapterParams:
    """Single shared bottleneck applied to every token individually."""

    down: Tensor
    up: Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    variant: str
    embed: PatchEmbedParams
    layers: list[LayerParams]
    ln_f_g: Tensor
    ln_f_b: Tensor
    head_w: Tensor
    head_b: Tensor
    prompt_gen: PromptGenParams | None = None
    free_prompts: Tensor | None = None
    adapters: list[GroupAdapterParams] | None = None
    primitive_adapters: list[PrimitiveAdapterParams] | None = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = [
            ("embed.proj", self.embed.proj),
            ("embed.bias", self.embed.bias),
            ("embed.pos", self.embed.pos),
            ("embed.cls", self.embed.cls),
        ]
        layer_fields = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                        "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")
        for i, lp in enumerate(self.layers):
            out += [(f"layer{i}.{f}", getattr(lp, f)) for f in layer_fields]
        out += [("ln_f.g", self.ln_f_g), ("ln_f.b", self.ln_f_b)]
        if self.prompt_gen is not None:
            pg = self.prompt_gen
            out += [("prompt.kernel", pg.kernel), ("prompt.bias", pg.bias),
                    ("prompt.w_mu", pg.w_mu), ("prompt.w_sigma", pg.w_sigma),
                    ("prompt.w_p", pg.w_p)]
        if self.free_prompts is not None:
            out.append(("prompt.free", self.free_prompts))
        if self.adapters is not None:
            for i, ap in enumerate(self.adapters):
                out += [(f"adapter{i}.{f}", getattr(ap, f))
                        for f in ("x_down", "x_up", "v_down", "v_up", "p_down", "p_up")]
        if self.primitive_adapters is not None:
            for i, ap in enumerate(self.primitive_adapters):
                out += [(f"adapter{i}.down", ap.down), (f"adapter{i}.up", ap.up)]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if t.requires_grad]

    def frozen(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if not t.requires_grad]

    @property
    def has_prompts(self) -> bool:
        return self.prompt_gen is not None or self.free_prompts is not None


def count_tunable(params: ModelParams) -> int:
    """Exact number of trainable scalars."""
    return sum(t.size for _, t in params.trainable())


# ---------------------------------------------------------------------------
# initialization

INIT_STD = 0.02
_ADAPTER_DOWN_INIT = 0.01


def _normal(rng: np.random.Generator, shape, req: bool) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=req)


def _zeros(shape, req: bool) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=req)


def _ones(shape, req: bool) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=req)


def init_params(config: ModelConfig, variant: str = "full-mpt", seed: int = 0) -> ModelParams:
    """Build a parameter set for an ablation variant.

    The backbone is drawn first from the seed, so every variant sharing a
    seed has a bit-identical frozen backbone. Adapter up-projections and the
    head start at zero.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(97,)))
    cfg = config
    backbone_trainable = variant == "full-finetune"
    bt = backbone_trainable
    d, dh = cfg.dim, cfg.bottleneck

    embed = PatchEmbedParams(
        proj=_normal(rng, (cfg.patch * cfg.patch * cfg.channels, d), bt),
        bias=_zeros((1, d), bt),
        pos=_normal(rng, (1 + cfg.n_vision, d), bt),
        cls=_normal(rng, (1, d), bt),
    )
    layers = []
    for _ in range(cfg.layers):
        layers.append(LayerParams(
            ln1_g=_ones((1, d), bt), ln1_b=_zeros((1, d), bt),
            wq=_normal(rng, (d, d), bt), bq=_zeros((1, d), bt),
            wk=_normal(rng, (d, d), bt), bk=_zeros((1, d), bt),
            wv=_normal(rng, (d, d), bt), bv=_zeros((1, d), bt),
            wo=_normal(rng, (d, d), bt), bo=_zeros((1, d), bt),
            ln2_g=_ones((1, d), bt), ln2_b=_zeros((1, d), bt),
            w1=_normal(rng, (d, cfg.mlp_ratio * d), bt), b1=_zeros((1, cfg.mlp_ratio * d), bt),
            w2=_normal(rng, (cfg.mlp_ratio * d, d), bt), b2=_zeros((1, d), bt),
        ))

    prompt_gen = None
    free_prompts = None
    if variant in ("prompt-only", "primitive-adapter", "full-mpt"):
        prompt_gen = PromptGenParams(
            kernel=_normal(rng, (3, 3, cfg.channels, d), True),
            bias=_zeros((1, d), True),
            w_mu=_normal(rng, (cfg.n_prompts, cfg.frames), True),
            w_sigma=_normal(rng, (cfg.n_prompts, cfg.frames), True),
            w_p=_normal(rng, (1, d), True),
        )
    elif variant == "vpt-random-prompts":
        free_prompts = _normal(rng, (cfg.n_prompts, d), True)

    adapters = None
    primitive_adapters = None
    if variant in ("adapter-only", "vpt-random-prompts", "full-mpt"):
        adapters = []
        for _ in range(cfg.layers):
            adapters.append(GroupAdapterParams(
                x_down=Tensor(rng.uniform(-_ADAPTER_DOWN_INIT, _ADAPTER_DOWN_INIT, (d, dh)),
                              requires_grad=True),
                x_up=_zeros((dh, d), True),
                v_down=Tensor(rng.uniform(-_ADAPTER_DOWN_INIT, _ADAPTER_DOWN_INIT, (d, dh)),
                              requires_grad=True),
                v_up=_zeros((dh, d), True),
                p_down=Tensor(rng.uniform(-_ADAPTER_DOWN_INIT, _ADAPTER_DOWN_INIT, (d, dh)),
                              requires_grad=True),
                p_up=_zeros((dh, d), True),
            ))
    elif variant == "primitive-adapter":
        primitive_adapters = []
        for _ in range(cfg.layers):
            primitive_adapters.append(PrimitiveAdapterParams(
                down=Tensor(rng.uniform(-_ADAPTER_DOWN_INIT, _ADAPTER_DOWN_INIT, (d, dh)),
                            requires_grad=True),
                up=_zeros((dh, d), True),
            ))

    head_w = _zeros((d, cfg.classes), True)
    head_b = _zeros((1, cfg.classes), True)
    return ModelParams(
        config=cfg, variant=variant, embed=embed, layers=layers,
        ln_f_g=_ones((1, d), bt), ln_f_b=_zeros((1, d), bt),
        head_w=head_w, head_b=head_b, prompt_gen=prompt_gen,
        free_prompts=free_prompts, adapters=adapters,
        primitive_adapters=primitive_adapters,
    )


# ---------------------------------------------------------------------------
# forward pass


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return dc.permute(dc.reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _mhsa(h: Tensor, lp: LayerParams, heads: int) -> Tensor:
    """Joint self-attention over all tokens; input and output are (B, N, D)."""
    b, n, d = h.shape
    scale = 1.0 / np.sqrt(d // heads)
    q = _split_heads(dc.add(dc.matmul(h, lp.wq), lp.bq), heads)   # (B, H, N, dh)
    k = _split_heads(dc.add(dc.matmul(h, lp.wk), lp.bk), heads)
    v = _split_heads(dc.add(dc.matmul(h, lp.wv), lp.bv), heads)
    scores = dc.mul(dc.matmul(q, dc.permute(k, (0, 1, 3, 2))), scale)
    attn = dc.softmax(scores, axis=-1)                            # (B, H, N, N)
    merged = dc.reshape(dc.permute(dc.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
    return dc.add(dc.matmul(merged, lp.wo), lp.bo)


def attention_weights(h: Tensor, lp: LayerParams, heads: int) -> list[np.ndarray]:
    """Per-head attention matrices for inspection/testing (no grad)."""
    n, d = h.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    q = h.data @ lp.wq.data + lp.bq.data
    k = h.data @ lp.wk.data + lp.bk.data
    mats = []
    for i in range(heads):
        lo, hi = i * dh, (i + 1) * dh
        s = scale * (q[:, lo:hi] @ k[:, lo:hi].T)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        mats.append(e / e.sum(axis=-1, keepdims=True))
    return mats


def _layer3(x: Tensor, lp: LayerParams, heads: int) -> Tensor:
    """Pre-norm block on a (B, N, D) stack: x + MHSA(LN(x)), then x + FFN(LN(x))."""
    x = dc.add(x, _mhsa(dc.layernorm(x, lp.ln1_g, lp.ln1_b), lp, heads))
    h = dc.layernorm(x, lp.ln2_g, lp.ln2_b)
    ffn = dc.add(dc.matmul(dc.gelu(dc.add(dc.matmul(h, lp.w1), lp.b1)), lp.w2), lp.b2)
    return dc.add(x, ffn)


def _branch3(tokens: Tensor, down: Tensor, up: Tensor, mode: str) -> Tensor:
    if mode == "mean-broadcast":
        m = dc.tmean(tokens, axis=1, keepdims=True)               # (B, 1, D)
        corr = dc.matmul(dc.gelu(dc.matmul(m, down)), up)
    else:
        corr = dc.matmul(dc.gelu(dc.matmul(tokens, down)), up)
    return dc.add(tokens, corr)


def _group_adapt3(x: Tensor, ranges, ap: GroupAdapterParams, mode: str) -> Tensor:
    branches = ((ap.x_down, ap.x_up), (ap.v_down, ap.v_up), (ap.p_down, ap.p_up))
    parts = []
    for (lo, hi), (down, up) in zip(ranges, branches):
        if hi == lo:
            continue
        parts.append(_branch3(dc.slice_axis(x, 1, lo, hi), down, up, mode))
    return dc.concat(parts, axis=1)


def _primitive_adapt3(x: Tensor, ap: PrimitiveAdapterParams) -> Tensor:
    corr = dc.matmul(dc.gelu(dc.matmul(x, ap.down)), ap.up)
    return dc.add(x, corr)


def _forward3(params: ModelParams, x: Tensor, ranges) -> Tensor:
    cfg = params.config
    for l in range(cfg.layers):
        x = _layer3(x, params.layers[l], cfg.heads)
        if params.adapters is not None:
            x = _group_adapt3(x, ranges, params.adapters[l], cfg.adapter_mode)
        elif params.primitive_adapters is not None:
            x = _primitive_adapt3(x, params.primitive_adapters[l])
    return x


def _as3(batch: TokenBatch) -> Tensor:
    n, d = batch.tokens.shape
    return dc.reshape(batch.tokens, (1, n, d))


def transformer_layer(batch: TokenBatch, lp: LayerParams, heads: int) -> TokenBatch:
    """Pre-norm block: x + MHSA(LN(x)), then x + FFN(LN(x))."""
    out = _layer3(_as3(batch), lp, heads)
    return batch.with_tokens(dc.reshape(out, batch.tokens.shape))


def group_adapt(batch: TokenBatch, ap: GroupAdapterParams, mode: str) -> TokenBatch:
    """Per-group bottleneck residual, added to every token of the group.

    In the default mean-broadcast mode the correction is computed from the
    group mean and shared by all tokens of that group.
    """
    out = _group_adapt3(_as3(batch), batch.group_ranges(), ap, mode)
    return batch.with_tokens(dc.reshape(out, batch.tokens.shape))


def primitive_adapt(batch: TokenBatch, ap: PrimitiveAdapterParams) -> TokenBatch:
    """Classic shared adapter: per-token bottleneck residual over all tokens."""
    out = _primitive_adapt3(_as3(batch), ap)
    return batch.with_tokens(dc.reshape(out, batch.tokens.shape))


def forward_tokens(params: ModelParams, batch: TokenBatch) -> TokenBatch:
    out = _forward3(params, _as3(batch), batch.group_ranges())
    return batch.with_tokens(dc.reshape(out, batch.tokens.shape))


def encode_sample(params: ModelParams, dyn_img: np.ndarray,
                  motion_features: np.ndarray | None) -> TokenBatch:
    """Assemble [cls | vision | prompts] for one sample.

    ``motion_features`` is the (T, 9C) mean-patch matrix of the magnified
    sequence; it is ignored by variants without generated prompts.
    """
    cls, vision = patch_embed(dyn_img, params.embed, params.config.patch)
    prompts = None
    if params.prompt_gen is not None:
        if motion_features is None:
            raise DataError("variant needs motion features but none were given")
        s_prime = embed_motion_features(motion_features, params.prompt_gen)
        prompts = gaussian_tokenize(s_prime, params.prompt_gen)
    elif params.free_prompts is not None:
        prompts = params.free_prompts
    return build_token_batch(cls, vision, prompts)


def cls_feature(params: ModelParams, batch: TokenBatch) -> Tensor:
    """Final-layernormed class-token state fed to the head."""
    out = forward_tokens(params, batch)
    x_last = dc.slice_axis(out.tokens, 0, 0, 1)
    return dc.layernorm(x_last, params.ln_f_g, params.ln_f_b)


def forward_stacked(params: ModelParams, tokens: Tensor, ranges) -> Tensor:
    """Logits for a pre-stacked (B, N, D) token tensor."""
    b, n, d = tokens.shape
    out = _forward3(params, tokens, ranges)
    x_last = dc.reshape(dc.slice_axis(out, 1, 0, 1), (b, d))
    feat = dc.layernorm(x_last, params.ln_f_g, params.ln_f_b)
    return dc.add(dc.matmul(feat, params.head_w), params.head_b)


def forward(params: ModelParams, batches: list[TokenBatch]) -> Tensor:
    """Logits for a batch of token stacks, one row per sample.

    All samples share one stacked graph; per-sample results are bit-identical
    to running them alone because every kernel maps batch rows independently.
    """
    n, d = batches[0].tokens.shape
    ranges = batches[0].group_ranges()
    for b in batches:
        if b.tokens.shape != (n, d) or b.group_ranges() != ranges:
            raise ShapeError("token batches disagree on shape or group layout")
    if len(batches) == 1:
        stacked = _as3(batches[0])
    else:
        stacked = dc.reshape(dc.concat([b.tokens for b in batches], axis=0),
                             (len(batches), n, d))
    return forward_stacked(params, stacked, ranges)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood via logsumexp."""
    b, k = logits.shape
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise DataError(f"label out of range [0, {k})")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    lse = dc.logsumexp(logits, axis=1, keepdims=True)
    picked = dc.tsum(dc.mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return dc.tmean(dc.sub(lse, picked))


# ---------------------------------------------------------------------------
# weights file


def save_weights(params: ModelParams, path: str) -> None:
    """Serialize all named tensors: magic, u32 count, then per entry
    (u32 name length, utf-8 name, u8 frozen flag, u32 rank, u32 dims..., f32 data)."""
    entries = params.named_tensors()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, t in entries:
            nm = name.encode("utf-8")
            f.write(struct.pack("<I", len(nm)))
            f.write(nm)
            f.write(struct.pack("<B", 0 if t.requires_grad else 1))
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(t.data.astype("<f4").tobytes(order="C"))


def load_weights(params: ModelParams, path: str) -> None:
    """Load tensor values into ``params``, validating names and shapes.

    The frozen flag in the file is metadata; trainability stays with the
    variant that built ``params``.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(WEIGHTS_MAGIC)] != WEIGHTS_MAGIC:
        raise FormatError(f"{path}: bad magic")
    off = len(WEIGHTS_MAGIC)

    def take(fmt: str):
        nonlocal off
        s = struct.Struct(fmt)
        if off + s.size > len(raw):
            raise FormatError(f"{path}: truncated at offset {off}")
        vals = s.unpack_from(raw, off)
        off += s.size
        return vals

    (count,) = take("<I")
    seen: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        if off + nlen > len(raw):
            raise FormatError(f"{path}: truncated name")
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        take("<B")
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        if off + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated data for {name}")
        data = np.frombuffer(raw, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        seen[name] = data.reshape(dims)
    expected = dict(params.named_tensors())
    missing = sorted(set(expected) - set(seen))
    extra = sorted(set(seen) - set(expected))
    if missing or extra:
        raise FormatError(f"{path}: name mismatch (missing={missing}, extra={extra})")
    for name, t in expected.items():
        if seen[name].shape != t.data.shape:
            raise FormatError(
                f"{path}: shape mismatch for {name}: {seen[name].shape} vs {t.data.shape}"
            )
    for name, t in expected.items():
        t.data = np.ascontiguousarray(seen[name])
