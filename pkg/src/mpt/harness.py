"""Training and evaluation: Adam updates, leave-one-subject-out folds,
pooled metrics, the end-to-end experiment runner, FLOP accounting, and
report emission.

Preprocessing (magnification, rank pooling, temporal standardization) is
shared by every ablation variant; only the trainable parameter set and the
prompt source differ between arms. Folds are independent and can run in
parallel processes; fold results are assembled in subject order, so pooled
metrics and reports do not depend on scheduling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encode import (
    build_token_batch,
    embed_motion_features,
    gaussian_tokenize,
    mean_patch_vectors,
    patch_embed,
    rank_pool,
)
from .errors import ConfigError, DataError, NumericalError
from .magnify import BandpassSpec, magnify_sequence
from .model import (
    ModelConfig,
    ModelParams,
    VARIANTS,
    cls_feature,
    count_tunable,
    cross_entropy,
    encode_sample,
    forward,
    init_params,
)
from .seqio import Manifest, Sequence, read_meseq, standardize_length


@dataclass
class TrainConfig:
    lr: float = 3e-4
    batch: int = 16
    epochs: int = 30
    seed: int = 0
    beta: float = 20.0
    low_hz: float = 0.4
    high_hz: float = 4.0
    filter_order: int = 2
    levels: int = 3
    variant: str = "full-mpt"
    jobs: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction; touches only the given tensors."""

    def __init__(self, tensors: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.tensors = list(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, t in enumerate(self.tensors):
            if t.grad is None:
                raise ValueError(f"missing gradient on trainable tensor {t.name or i}")
            g = t.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            t.data = t.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None


# ---------------------------------------------------------------------------
# LOSO protocol and metrics


def loso_split(manifest: Manifest) -> list[tuple[str, list[int], list[int]]]:
    """One fold per subject: (held-out subject, train indices, test indices).

    Folds are ordered by subject name; indices refer to manifest entries.
    """
    subjects = sorted(manifest.subjects())
    if len(subjects) < 2:
        raise DataError(f"LOSO needs >= 2 subjects, got {len(subjects)}")
    folds = []
    for subj in subjects:
        test = [i for i, (_, s, _) in enumerate(manifest.entries) if s == subj]
        train = [i for i, (_, s, _) in enumerate(manifest.entries) if s != subj]
        folds.append((subj, train, test))
    return folds


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if preds.shape != labels.shape:
        raise DataError("prediction/label length mismatch")
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes
                        or preds.min() < 0 or preds.max() >= n_classes):
        raise DataError(f"class index out of range [0, {n_classes})")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, l in zip(preds, labels):
        conf[l, p] += 1
    return conf


def metrics(preds, labels, n_classes: int) -> tuple[float, float, np.ndarray]:
    """Pooled accuracy, macro-F1, and the confusion matrix (rows = truth).

    Per-class F1 contributes 0 whenever the class was never predicted or
    never present.
    """
    conf = confusion_matrix(preds, labels, n_classes)
    n = conf.sum()
    acc = float(np.trace(conf)) / n if n else 0.0
    f1s = []
    for c in range(n_classes):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp == 0 or tp + fn == 0:
            f1s.append(0.0)
            continue
        p = tp / (tp + fp)
        r = tp / (tp + fn)
        f1s.append(0.0 if p + r == 0 else 2.0 * p * r / (p + r))
    return acc, float(np.mean(f1s)), conf


# ---------------------------------------------------------------------------
# FLOP accounting


def flop_breakdown(config: ModelConfig) -> dict[str, int]:
    """Analytic flop counts (2 per multiply-add) for one forward pass.

    Terms: patch embedding, prompt-generation embedding (full conv plus the
    two temporal projections), the per-layer transformer stack
    (QKV/out projections, attention matrix, feed-forward), the group-adapter
    correction, and the head. Elementwise work is not counted.
    """
    d, n_v, n_p = config.dim, config.n_vision, config.n_prompts
    n = 1 + n_v + n_p
    dh = config.bottleneck
    patch_flops = 2 * n_v * (config.patch * config.patch * config.channels) * d
    conv_flops = 2 * config.frames * config.image_size * config.image_size * 9 * config.channels * d
    gauss_flops = 2 * n_p * 2 * config.frames * d
    attn = 2 * (4 * n * d * d + 2 * n * n * d)
    ffn = 2 * n * (d * config.mlp_ratio * d + config.mlp_ratio * d * d)
    if config.adapter_mode == "mean-broadcast":
        adapter = 2 * 3 * 2 * d * dh
    else:
        adapter = 2 * n * 2 * d * dh
    head = 2 * d * config.classes
    return {
        "embed": patch_flops + conv_flops + gauss_flops,
        "per_layer": attn + ffn + adapter,
        "layers": config.layers,
        "head": head,
    }


def estimate_flops(config: ModelConfig) -> int:
    b = flop_breakdown(config)
    return b["embed"] + b["layers"] * b["per_layer"] + b["head"]


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class PreparedSample:
    """Variant-independent per-sequence preprocessing results."""

    dyn_img: np.ndarray        # (H, W, C) rank-pooled dynamic image
    motion_feats: np.ndarray   # (T, 9C) mean-patch rows of the magnified clip
    subject: str
    label: int


@dataclass
class FoldResult:
    subject: str
    predictions: list[int]
    labels: list[int]
    losses: list[float] = field(default_factory=list)


@dataclass
class EvalReport:
    variant: str
    class_names: list[str]
    folds: list[FoldResult]
    confusion: np.ndarray
    acc: float
    macro_f1: float
    tunable_params: int
    flop_estimate: int

    def to_kv(self) -> str:
        lines = [
            f"variant={self.variant}",
            f"classes={','.join(self.class_names)}",
            f"folds={len(self.folds)}",
            f"samples={int(self.confusion.sum())}",
            f"acc={self.acc!r}",
            f"macro_f1={self.macro_f1!r}",
            f"tunable_params={self.tunable_params}",
            f"flop_estimate={self.flop_estimate}",
        ]
        for fr in self.folds:
            preds = ",".join(map(str, fr.predictions))
            labs = ",".join(map(str, fr.labels))
            lines.append(f"fold.{fr.subject}.predictions={preds}")
            lines.append(f"fold.{fr.subject}.labels={labs}")
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        header = "true\\pred," + ",".join(self.class_names)
        rows = [header]
        for c, name in enumerate(self.class_names):
            rows.append(name + "," + ",".join(str(int(v)) for v in self.confusion[c]))
        return "\n".join(rows) + "\n"

    def to_text(self) -> str:
        width = max(len(n) for n in self.class_names) + 2
        lines = [
            f"variant         : {self.variant}",
            f"folds           : {len(self.folds)}",
            f"samples         : {int(self.confusion.sum())}",
            f"accuracy        : {self.acc:.4f}",
            f"macro F1        : {self.macro_f1:.4f}",
            f"tunable params  : {self.tunable_params}",
            f"flops (forward) : {self.flop_estimate}",
            "",
            "confusion (rows = truth):",
            " " * width + "".join(f"{n:>{width}}" for n in self.class_names),
        ]
        for c, name in enumerate(self.class_names):
            lines.append(f"{name:>{width}}" +
                         "".join(f"{int(v):>{width}}" for v in self.confusion[c]))
        return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as f:
        f.write(report.to_text())
    with open(os.path.join(out_dir, "report.kv"), "w", encoding="utf-8") as f:
        f.write(report.to_kv())
    with open(os.path.join(out_dir, "confusion.csv"), "w", encoding="utf-8") as f:
        f.write(report.confusion_csv())


def prepare_sample(seq: Sequence, train_cfg: TrainConfig, model_cfg: ModelConfig) -> PreparedSample:
    """Shared pipeline: standardize, rank-pool, magnify, embed motion patches."""
    app = standardize_length(seq, model_cfg.frames)
    dyn = rank_pool(app)
    band = BandpassSpec(train_cfg.low_hz, train_cfg.high_hz,
                        order=train_cfg.filter_order, fps=seq.fps)
    motion = standardize_length(
        magnify_sequence(seq, train_cfg.beta, band, train_cfg.levels), model_cfg.frames
    )
    return PreparedSample(
        dyn_img=dyn,
        motion_feats=mean_patch_vectors(motion.frames),
        subject=seq.subject,
        label=seq.label,
    )


def _sample_tokens(params: ModelParams, sample: PreparedSample,
                   cached_embed: tuple[np.ndarray, np.ndarray] | None):
    if cached_embed is None:
        return encode_sample(params, sample.dyn_img, sample.motion_feats)
    cls_rows, vis_rows = cached_embed
    prompts = None
    if params.prompt_gen is not None:
        s_prime = embed_motion_features(sample.motion_feats, params.prompt_gen)
        prompts = gaussian_tokenize(s_prime, params.prompt_gen)
    elif params.free_prompts is not None:
        prompts = params.free_prompts
    return build_token_batch(Tensor(cls_rows), Tensor(vis_rows), prompts)


def run_fold(fold_idx: int, subject: str, train_samples: list[PreparedSample],
             test_samples: list[PreparedSample], train_cfg: TrainConfig,
             model_cfg: ModelConfig) -> FoldResult:
    params = init_params(model_cfg, train_cfg.variant, seed=train_cfg.seed)
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=train_cfg.seed, spawn_key=(1, fold_idx))
    )

    # with a frozen backbone the class/vision rows never change: compute once
    cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    if train_cfg.variant != "full-finetune":
        for s in train_samples + test_samples:
            cls_t, vis_t = patch_embed(s.dyn_img, params.embed, model_cfg.patch)
            cache[id(s)] = (cls_t.data, vis_t.data)

    # for head-only nothing upstream of the head ever changes, so the
    # transformer output per sample is a constant feature vector
    feats: dict[int, np.ndarray] = {}
    if train_cfg.variant == "head-only":
        for s in train_samples + test_samples:
            batch = _sample_tokens(params, s, cache.get(id(s)))
            feats[id(s)] = cls_feature(params, batch).data[0]

    def chunk_logits(chunk):
        if feats:
            rows = Tensor(np.stack([feats[id(s)] for s in chunk]))
            return dc.add(dc.matmul(rows, params.head_w), params.head_b)
        batches = [_sample_tokens(params, s, cache.get(id(s))) for s in chunk]
        return forward(params, batches)

    opt = Adam([t for _, t in params.trainable()], lr=train_cfg.lr)
    losses: list[float] = []
    n = len(train_samples)
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, train_cfg.batch):
            chunk = [train_samples[i] for i in order[start : start + train_cfg.batch]]
            try:
                logits = chunk_logits(chunk)
                loss = cross_entropy(logits, np.array([s.label for s in chunk]))
            except NumericalError as exc:
                raise NumericalError(
                    f"non-finite loss in fold {subject!r}, epoch {epoch}, "
                    f"step {len(losses)}: {exc}"
                ) from exc
            opt.zero_grad()
            dc.backward(loss)
            opt.step()
            losses.append(loss.item())

    preds = []
    for s in test_samples:
        logits = chunk_logits([s])
        preds.append(int(np.argmax(logits.data[0])))
    return FoldResult(subject=subject, predictions=preds,
                      labels=[s.label for s in test_samples], losses=losses)


def _fold_worker(args):
    return run_fold(*args)


def run_experiment(train_cfg: TrainConfig, model_cfg: ModelConfig,
                   sequences: list[Sequence], class_names: list[str]) -> EvalReport:
    """LOSO-train a variant on the given sequences and pool the results.

    Deterministic for a fixed config and seed; folds may run in parallel
    (train_cfg.jobs) without changing the report.
    """
    if model_cfg.classes != len(class_names):
        raise ConfigError(
            f"model expects {model_cfg.classes} classes, dataset has {len(class_names)}"
        )
    entries = [(s.id, s.subject, s.label) for s in sequences]
    manifest = Manifest(entries=entries, class_names=list(class_names))
    folds = loso_split(manifest)
    prepared = [prepare_sample(s, train_cfg, model_cfg) for s in sequences]

    tasks = []
    for fold_idx, (subject, train_idx, test_idx) in enumerate(folds):
        tasks.append((
            fold_idx, subject,
            [prepared[i] for i in train_idx],
            [prepared[i] for i in test_idx],
            train_cfg, model_cfg,
        ))
    if train_cfg.jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(train_cfg.jobs, len(tasks))) as pool:
            results = pool.map(_fold_worker, tasks)
    else:
        results = [run_fold(*t) for t in tasks]

    all_preds = [p for fr in results for p in fr.predictions]
    all_labels = [l for fr in results for l in fr.labels]
    acc, macro_f1, conf = metrics(all_preds, all_labels, model_cfg.classes)
    params = init_params(model_cfg, train_cfg.variant, seed=train_cfg.seed)
    return EvalReport(
        variant=train_cfg.variant,
        class_names=list(class_names),
        folds=results,
        confusion=conf,
        acc=acc,
        macro_f1=macro_f1,
        tunable_params=count_tunable(params),
        flop_estimate=estimate_flops(model_cfg),
    )


def load_dataset(manifest: Manifest, root: str) -> list[Sequence]:
    """Read every manifest entry, attaching subject and label metadata."""
    out = []
    for path, subject, label in manifest.entries:
        full = path if os.path.isabs(path) else os.path.join(root, path)
        seq = read_meseq(full)
        seq.subject = subject
        seq.label = label
        out.append(seq)
    return out


# ---------------------------------------------------------------------------
# flat key=value config files

_TRAIN_FIELDS = {
    "lr": float, "batch": int, "epochs": int, "seed": int, "beta": float,
    "low_hz": float, "high_hz": float, "filter_order": int, "levels": int,
    "variant": str, "jobs": int,
}
_MODEL_FIELDS = {
    "dim": int, "layers": int, "heads": int, "mlp_ratio": int, "patch": int,
    "n_prompts": int, "reduction": int, "classes": int, "image_size": int,
    "channels": int, "frames": int, "adapter_mode": str,
}


def parse_config_text(text: str) -> tuple[TrainConfig, ModelConfig]:
    """Parse ``key=value`` lines (blank lines and # comments allowed).

    Every key must be a TrainConfig or ModelConfig field; unknown keys are
    configuration errors.
    """
    train_kwargs: dict = {}
    model_kwargs: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in _TRAIN_FIELDS:
            conv, target = _TRAIN_FIELDS[key], train_kwargs
        elif key in _MODEL_FIELDS:
            conv, target = _MODEL_FIELDS[key], model_kwargs
        else:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            target[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return TrainConfig(**train_kwargs), ModelConfig(**model_kwargs)


def read_config(path: str) -> tuple[TrainConfig, ModelConfig]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_config_text(f.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
