"""Optimization loop, cosine schedule, evaluation metrics and stream fusion.

Runs are bitwise reproducible: shuffling and every per-sample augmentation
stream derive from (seed, epoch, sample index), and the optimizer walks
parameters in a fixed order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import augment as aug
from . import autodiff as ad
from . import model as mdl
from .errors import NonFiniteError, UserInputError
from .skeldata import (
    KINECT25,
    MODALITIES,
    derive_modality,
    load_sequence,
    read_manifest,
    resample_frames,
    resolve_manifest_paths,
)

# cls token and positional embeddings train without weight decay
WEIGHT_DECAY_EXCLUDE = ("cls_token", "pos_spatial", "pos_temporal")


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0002
    seed: int = 0
    modality: str = "joint"
    workers: int = 1
    augment: aug.AugmentConfig = field(default_factory=aug.AugmentConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs, batch_size and workers must be >= 1")
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}")


_TRAIN_INT = {"epochs", "batch_size", "seed", "workers", "joint_mask_count"}
_TRAIN_FLOAT = {"lr", "momentum", "weight_decay", "rotation_bound", "part_mask_prob", "gaussian_sigma"}
_TRAIN_BOOL = {"rotation", "part_mask"}
KNOWN_TRAIN_KEYS = _TRAIN_INT | _TRAIN_FLOAT | _TRAIN_BOOL | {"modality"}


def train_config_from_kv(kv: dict[str, str]) -> TrainConfig:
    t_kwargs, a_kwargs = {}, {}
    aug_fields = {f.name for f in fields(aug.AugmentConfig)}
    train_fields = {f.name for f in fields(TrainConfig)} - {"augment"}
    for key, raw in kv.items():
        if key in aug_fields:
            target = a_kwargs
        elif key in train_fields:
            target = t_kwargs
        else:
            continue
        try:
            if key in _TRAIN_INT:
                target[key] = int(raw)
            elif key in _TRAIN_FLOAT:
                target[key] = float(raw)
            elif key in _TRAIN_BOOL:
                if raw.lower() not in ("true", "false", "on", "off", "1", "0"):
                    raise ValueError("expected true/false")
                target[key] = raw.lower() in ("true", "on", "1")
            else:
                target[key] = raw
        except ValueError as exc:
            raise UserInputError(f"bad value for {key}: {raw!r} ({exc})") from exc
    try:
        return TrainConfig(augment=aug.AugmentConfig(**a_kwargs), **t_kwargs)
    except ValueError as exc:
        raise UserInputError(f"bad train config: {exc}") from exc


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * step/total)) / 2, reaching 0 at step == total."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class SgdState:
    """Momentum buffers keyed by parameter name."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(
    named_params: dict[str, ad.Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    state: SgdState,
    exclude: tuple[str, ...] = WEIGHT_DECAY_EXCLUDE,
) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Parameters named in ``exclude`` skip weight decay. A non-finite gradient
    aborts the whole step before any parameter changes.
    """
    grads = {}
    for name, t in named_params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        total = float(np.sum(g))
        if not math.isfinite(total) and np.count_nonzero(~np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name} (shape {g.shape})")
        grads[name] = g
    for name, t in named_params.items():
        g = grads[name]
        if weight_decay and name not in exclude:
            g = g + weight_decay * t.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(t.data)
        v = momentum * v + g
        state.velocity[name] = v
        t.data = t.data - lr * v


@dataclass
class EvalReport:
    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray
    loss: float

    def format_text(self) -> str:
        lines = [f"top1_accuracy {self.accuracy:.6f}", f"loss {self.loss:.6f}"]
        for k, acc in enumerate(self.per_class):
            lines.append(f"class_{k}_accuracy {acc:.6f}")
        lines.append("confusion_matrix")
        for row in self.confusion:
            lines.append(" ".join(str(int(x)) for x in row))
        return "\n".join(lines)


def _load_split(manifest_path, modality: str, num_classes: int):
    entries = read_manifest(manifest_path)
    if not entries:
        raise UserInputError(f"manifest {manifest_path} is empty")
    paths = resolve_manifest_paths(manifest_path, entries)
    data = []
    for entry, path in zip(entries, paths):
        if entry.label >= num_classes:
            raise UserInputError(f"{entry.path}: label {entry.label} >= num_classes {num_classes}")
        seq = derive_modality(load_sequence(path), modality, KINECT25)
        data.append((str(path), seq, entry.label))
    return data


def _stack_batch(clips):
    """Stack per-sample (3, F, V, B) arrays, zero-padding persons to the max."""
    max_persons = max(c.shape[-1] for c in clips)
    out = np.zeros((len(clips), *clips[0].shape[:-1], max_persons))
    for i, c in enumerate(clips):
        out[i, ..., : c.shape[-1]] = c
    return out


def _prepare_sample(args):
    seq, label, frames, train_cfg, parts, stream = args
    rng = np.random.default_rng(stream)
    plan = aug.draw_plan(train_cfg.augment, parts, rng)
    seq = aug.apply_coordinate_augments(seq, train_cfg.augment, plan, rng)
    seq = resample_frames(seq, frames, mode="train", rng=rng)
    return seq.coords, label, plan.mask_part


def train(
    manifest_path,
    model_cfg: mdl.ModelConfig,
    train_cfg: TrainConfig,
    ckpt_path=None,
    log_path=None,
    params: mdl.ModelParams | None = None,
    log_stream=None,
) -> tuple[mdl.ModelParams, list[str]]:
    """Train a model on a manifest; returns final params and metric lines.

    Writes one ``epoch=<n> lr=<f> loss=<f> acc=<f>`` record per epoch (the
    accuracy is the running accuracy over augmented training batches).
    """
    data = _load_split(manifest_path, train_cfg.modality, model_cfg.num_classes)
    if params is None:
        params = mdl.init_params(model_cfg, seed=train_cfg.seed)
    named = params.named_tensors()
    state = SgdState()
    parts = model_cfg.parts
    metrics: list[str] = []
    pool = ThreadPoolExecutor(max_workers=train_cfg.workers) if train_cfg.workers > 1 else None
    try:
        for epoch in range(train_cfg.epochs):
            lr = cosine_lr(epoch, train_cfg.epochs, train_cfg.lr)
            order = np.random.default_rng([train_cfg.seed, 7, epoch]).permutation(len(data))
            total_loss = 0.0
            total_correct = 0
            for start in range(0, len(order), train_cfg.batch_size):
                batch_idx = order[start : start + train_cfg.batch_size]
                jobs = [
                    (data[i][1], data[i][2], model_cfg.frames, train_cfg, parts, [train_cfg.seed, epoch, int(i)])
                    for i in batch_idx
                ]
                if pool is not None:
                    prepared = list(pool.map(_prepare_sample, jobs))
                else:
                    prepared = [_prepare_sample(j) for j in jobs]
                coords = _stack_batch([p[0] for p in prepared])
                labels = np.array([p[1] for p in prepared])
                mask_parts = [p[2] for p in prepared]
                drop_rng = np.random.default_rng([train_cfg.seed, 13, epoch, start])
                logits = mdl.forward_coords(coords, params, model_cfg, mode="train",
                                            rng=drop_rng, mask_parts=mask_parts)
                loss = ad.cross_entropy(logits, labels)
                for t in named.values():
                    t.grad = None
                ad.backward(loss)
                sgd_step(named, lr, train_cfg.momentum, train_cfg.weight_decay, state)
                total_loss += float(loss.data) * len(batch_idx)
                total_correct += int((logits.data.argmax(axis=1) == labels).sum())
            line = (
                f"epoch={epoch} lr={lr!r} loss={total_loss / len(data)!r} "
                f"acc={total_correct / len(data)!r}"
            )
            metrics.append(line)
            if log_stream is not None:
                print(line, file=log_stream, flush=True)
    finally:
        if pool is not None:
            pool.shutdown()
    if ckpt_path is not None:
        mdl.save_checkpoint(ckpt_path, params, model_cfg, extra={"modality": train_cfg.modality})
    if log_path is not None:
        Path(log_path).write_text("\n".join(metrics) + "\n", encoding="utf-8")
    return params, metrics


def evaluate(
    manifest_path,
    params: mdl.ModelParams,
    model_cfg: mdl.ModelConfig,
    modality: str = "joint",
    batch_size: int = 16,
    scores_path=None,
) -> EvalReport:
    """Deterministic evaluation: uniform-grid resampling, no augmentation,
    eval-mode batchnorm. Optionally writes a fusion score file."""
    data = _load_split(manifest_path, modality, model_cfg.num_classes)
    k = model_cfg.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    total_loss = 0.0
    score_rows = []
    for start in range(0, len(data), batch_size):
        chunk = data[start : start + batch_size]
        clips = [resample_frames(seq, model_cfg.frames, mode="eval").coords for _, seq, _ in chunk]
        coords = _stack_batch(clips)
        labels = np.array([label for _, _, label in chunk])
        logits = mdl.forward_coords(coords, params, model_cfg, mode="eval")
        total_loss += float(ad.cross_entropy(logits, labels).data) * len(chunk)
        preds = logits.data.argmax(axis=1)
        for (path, _, label), pred, row in zip(chunk, preds, logits.data):
            confusion[label, pred] += 1
            score_rows.append((path, row))
    accuracy = float(np.trace(confusion) / confusion.sum())
    class_counts = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), class_counts, out=np.zeros(k), where=class_counts > 0)
    report = EvalReport(accuracy=accuracy, per_class=per_class, confusion=confusion,
                        loss=total_loss / len(data))
    if scores_path is not None:
        write_scores(scores_path, score_rows, k)
    return report


def evaluate_checkpoint(manifest_path, ckpt_path, scores_path=None, batch_size: int = 16) -> EvalReport:
    params, config, extra = mdl.load_checkpoint(ckpt_path)
    modality = extra.get("modality", "joint")
    return evaluate(manifest_path, params, config, modality=modality,
                    batch_size=batch_size, scores_path=scores_path)


# ---------------------------------------------------------------------------
# score files and multi-stream fusion


def write_scores(path, rows, num_classes: int) -> None:
    header = "sample_id\t" + "\t".join(f"logit_{i}" for i in range(num_classes))
    lines = [header]
    for sample_id, logits in rows:
        lines.append(sample_id + "\t" + "\t".join(repr(float(x)) for x in logits))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_scores(path) -> tuple[list[str], np.ndarray]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UserInputError(f"cannot read score file {path}: {exc}") from exc
    if not lines or not lines[0].startswith("sample_id"):
        raise UserInputError(f"{path}: missing score-file header")
    ids, rows = [], []
    for ln, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise UserInputError(f"{path}:{ln}: expected sample_id and logits")
        ids.append(parts[0])
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError as exc:
            raise UserInputError(f"{path}:{ln}: {exc}") from exc
    arr = np.array(rows)
    if arr.ndim != 2:
        raise UserInputError(f"{path}: inconsistent logit row lengths")
    return ids, arr


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fuse_streams(score_paths) -> EvalReport:
    """Average per-stream softmax probabilities and rescore.

    All files must list the same sample ids in the same order; labels come
    from the sequence files the ids point at.
    """
    if len(score_paths) < 2:
        raise UserInputError("fusion needs at least two score files")
    streams = [read_scores(p) for p in score_paths]
    ref_ids, ref = streams[0]
    for path, (ids, arr) in zip(score_paths[1:], [s for s in streams[1:]]):
        if len(ids) != len(ref_ids):
            raise UserInputError(f"{path}: {len(ids)} rows, expected {len(ref_ids)}")
        if arr.shape[1] != ref.shape[1]:
            raise UserInputError(f"{path}: {arr.shape[1]} classes, expected {ref.shape[1]}")
        for i, (a, b) in enumerate(zip(ref_ids, ids)):
            if a != b:
                raise UserInputError(f"{path}: sample id mismatch at row {i + 1}: {b!r} != {a!r}")
    probs = np.mean([_softmax_rows(arr) for _, arr in streams], axis=0)
    labels = []
    for sample_id in ref_ids:
        labels.append(load_sequence(sample_id).label)
    labels = np.array(labels)
    k = ref.shape[1]
    if labels.max() >= k:
        raise UserInputError(f"label {labels.max()} out of range for {k} score columns")
    preds = probs.argmax(axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    for label, pred in zip(labels, preds):
        confusion[label, pred] += 1
    accuracy = float(np.trace(confusion) / confusion.sum())
    class_counts = confusion.sum(axis=1)
    per_class = np.divide(np.diag(confusion), class_counts, out=np.zeros(k), where=class_counts > 0)
    loss = float(-np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None)).mean())
    return EvalReport(accuracy=accuracy, per_class=per_class, confusion=confusion, loss=loss)
