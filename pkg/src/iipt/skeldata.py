"""Skeleton sequences: storage format, modality streams, partitions, synthesis.

A sequence is a dense float array of 3D joint coordinates shaped
(3, frames, joints, persons). The on-disk format is little-endian binary:
magic ``IIPS``, five u32 header words (version, C, F, V, B) plus a u32 label,
then C*F*V*B float32 values in (c, f, v, b) row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UserInputError

MAGIC = b"IIPS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SkeletonLayout:
    """Joint topology: per-joint parent (root points at itself) and the
    joint used for centering."""

    joint_count: int
    parent: tuple[int, ...]
    center_joint: int

    def __post_init__(self):
        if len(self.parent) != self.joint_count:
            raise ValueError("parent table length != joint count")
        # every joint must reach the root by following parents
        for j in range(self.joint_count):
            seen = set()
            cur = j
            while self.parent[cur] != cur:
                if cur in seen:
                    raise ValueError(f"parent table has a cycle through joint {j}")
                seen.add(cur)
                cur = self.parent[cur]


# 25-joint Kinect-V2 convention; parents follow the usual skeleton tree with
# the spine-shoulder joint (index 20) as root, centering at mid-spine (index 1).
KINECT25 = SkeletonLayout(
    joint_count=25,
    parent=(1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0, 12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11),
    center_joint=1,
)

MODALITIES = ("joint", "bone", "joint_motion", "bone_motion")


@dataclass
class SkeletonSequence:
    """Raw coordinates (3, F, V, B) in meters plus a class label."""

    coords: np.ndarray
    label: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 4 or self.coords.shape[0] != 3:
            raise ValueError(f"coords must be (3, F, V, B), got {self.coords.shape}")
        if self.coords.shape[3] not in (1, 2):
            raise ValueError(f"persons must be 1 or 2, got {self.coords.shape[3]}")
        self.label = int(self.label)

    @property
    def frames(self) -> int:
        return self.coords.shape[1]

    @property
    def joints(self) -> int:
        return self.coords.shape[2]

    @property
    def persons(self) -> int:
        return self.coords.shape[3]


@dataclass(frozen=True)
class PartitionMap:
    """Assignment of V joints to parts, each padded to ``max_slots`` slots."""

    joint_count: int
    assignment: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        seen: list[int] = []
        for part in self.assignment:
            if len(part) == 0:
                raise ValueError("empty part")
            seen.extend(part)
        if sorted(seen) != list(range(self.joint_count)):
            raise ValueError("every joint must appear in exactly one part")
        if self.parts * self.max_slots < self.joint_count:
            raise ValueError("parts * slots must cover all joints")

    @property
    def parts(self) -> int:
        return len(self.assignment)

    @property
    def max_slots(self) -> int:
        return max(len(p) for p in self.assignment)

    def padded_indices(self, pad_index: int) -> np.ndarray:
        """(parts, max_slots) gather indices with ``pad_index`` in empty slots."""
        m = self.max_slots
        out = np.full((self.parts, m), pad_index, dtype=np.intp)
        for i, part in enumerate(self.assignment):
            out[i, : len(part)] = part
        return out

    def joint_to_part(self) -> np.ndarray:
        out = np.empty(self.joint_count, dtype=np.intp)
        for i, part in enumerate(self.assignment):
            out[list(part)] = i
        return out


def default_partition_map() -> PartitionMap:
    """Five anatomical parts (torso, arms, legs) over the 25-joint layout."""
    return PartitionMap(
        joint_count=25,
        assignment=(
            (0, 1, 2, 3, 20),          # torso: spine base/mid, neck, head, spine shoulder
            (4, 5, 6, 7, 21, 22),      # left arm incl. hand tip and thumb
            (8, 9, 10, 11, 23, 24),    # right arm incl. hand tip and thumb
            (12, 13, 14, 15),          # left leg
            (16, 17, 18, 19),          # right leg
        ),
    )


def identity_partition_map(joint_count: int = 25) -> PartitionMap:
    """One joint per part: disables part grouping (joint-level tokens)."""
    return PartitionMap(joint_count=joint_count, assignment=tuple((j,) for j in range(joint_count)))


def partition_map_by_name(name: str, joint_count: int = 25) -> PartitionMap:
    if name == "default":
        return default_partition_map()
    if name == "identity":
        return identity_partition_map(joint_count)
    raise UserInputError(f"unknown partition map {name!r} (expected default|identity)")


# ---------------------------------------------------------------------------
# file format


def save_sequence(seq: SkeletonSequence, path) -> None:
    c, f, v, b = seq.coords.shape
    payload = seq.coords.astype("<f4").tobytes(order="C")
    header = MAGIC + struct.pack("<IIIIII", FORMAT_VERSION, c, f, v, b, seq.label)
    Path(path).write_bytes(header + payload)


def load_sequence(path) -> SkeletonSequence:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise UserInputError(f"cannot read sequence file {path}: {exc}") from exc
    if len(blob) < 28:
        raise UserInputError(f"{path}: truncated header")
    if blob[:4] != MAGIC:
        raise UserInputError(f"{path}: bad magic {blob[:4]!r}")
    version, c, f, v, b, label = struct.unpack("<IIIIII", blob[4:28])
    if version != FORMAT_VERSION:
        raise UserInputError(f"{path}: unsupported version {version}")
    expected = c * f * v * b * 4
    if len(blob) - 28 < expected:
        raise UserInputError(f"{path}: truncated payload ({len(blob) - 28} of {expected} bytes)")
    if len(blob) - 28 > expected:
        raise UserInputError(f"{path}: payload length {len(blob) - 28} inconsistent with header ({expected})")
    coords = np.frombuffer(blob[28:], dtype="<f4").astype(np.float64).reshape(c, f, v, b)
    return SkeletonSequence(coords=coords, label=label)


# ---------------------------------------------------------------------------
# temporal resampling and modality streams


def resample_frames(seq: SkeletonSequence, frames_out: int, mode: str, rng: np.random.Generator | None = None) -> SkeletonSequence:
    """Fix a clip to ``frames_out`` frames.

    Eval mode uses a deterministic uniform index grid over the whole clip;
    train mode first takes a random contiguous crop of at least half the clip,
    then spreads the grid over the crop. Short clips repeat frames.
    """
    if frames_out < 1:
        raise ValueError("frames_out must be >= 1")
    f_raw = seq.frames
    if mode == "eval":
        start, length = 0, f_raw
    elif mode == "train":
        if rng is None:
            raise ValueError("train-mode resampling needs an rng")
        min_len = max(1, math.ceil(f_raw / 2))
        length = int(rng.integers(min_len, f_raw + 1))
        start = int(rng.integers(0, f_raw - length + 1))
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    idx = start + (np.arange(frames_out, dtype=np.int64) * length) // frames_out
    return SkeletonSequence(coords=seq.coords[:, idx], label=seq.label)


def derive_modality(seq: SkeletonSequence, kind: str, layout: SkeletonLayout = KINECT25) -> SkeletonSequence:
    """Joint / bone / motion streams used for multi-stream training."""
    if seq.joints != layout.joint_count:
        raise ValueError(f"sequence has {seq.joints} joints, layout expects {layout.joint_count}")
    if kind not in MODALITIES:
        raise ValueError(f"unknown modality {kind!r}")

    # center each person on its own mid-spine position at frame 0 so that an
    # absent (all-zero) second person stays exactly zero
    centered = seq.coords - seq.coords[:, 0:1, layout.center_joint : layout.center_joint + 1, :]
    if kind == "joint":
        out = centered
    elif kind == "bone":
        out = centered - centered[:, :, layout.parent, :]
    else:
        base = centered if kind == "joint_motion" else centered - centered[:, :, layout.parent, :]
        out = np.zeros_like(base)
        out[:, :-1] = base[:, 1:] - base[:, :-1]
    return SkeletonSequence(coords=out, label=seq.label)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class ManifestEntry:
    path: str
    label: int
    subject: int
    camera: int


def write_manifest(entries: list[ManifestEntry], path) -> None:
    lines = [f"{e.path}\t{e.label}\t{e.subject}\t{e.camera}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[ManifestEntry]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UserInputError(f"cannot read manifest {path}: {exc}") from exc
    entries = []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise UserInputError(f"{path}:{ln}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            entries.append(ManifestEntry(fields[0], int(fields[1]), int(fields[2]), int(fields[3])))
        except ValueError as exc:
            raise UserInputError(f"{path}:{ln}: {exc}") from exc
    for e in entries:
        if e.label < 0:
            raise UserInputError(f"{path}: negative label for {e.path}")
    return entries


def resolve_manifest_paths(manifest_path, entries: list[ManifestEntry]) -> list[Path]:
    base = Path(manifest_path).resolve().parent
    out = []
    for e in entries:
        p = Path(e.path)
        out.append(p if p.is_absolute() else base / p)
    return out


# ---------------------------------------------------------------------------
# synthetic data

_TEMPLATE_SEED = 90210
_BASE_POSE = np.random.default_rng(_TEMPLATE_SEED).uniform(-0.4, 0.4, size=(3, 25))


def class_template(label: int, frames: int, pmap: PartitionMap | None = None) -> np.ndarray:
    """Deterministic noiseless motion for one class: (3, frames, 25, 1).

    Each body part swings sinusoidally with class-specific frequency, phase
    and amplitude; templates depend only on the label, never on dataset seeds.
    """
    pmap = pmap or default_partition_map()
    t = np.arange(frames, dtype=np.float64) / 32.0  # fixed timescale
    coords = np.broadcast_to(_BASE_POSE[:, None, :], (3, frames, 25)).copy()
    joint_part = pmap.joint_to_part()
    for p in range(pmap.parts):
        prng = np.random.default_rng([_TEMPLATE_SEED, label, p])
        freq = prng.uniform(0.6, 2.8)
        amp = prng.uniform(0.18, 0.38, size=3)
        phase = prng.uniform(0.0, 2.0 * np.pi, size=3)
        wave = amp[:, None] * np.sin(2.0 * np.pi * freq * t[None, :] + phase[:, None])
        coords[:, :, joint_part == p] += wave[:, :, None]
    return coords[:, :, :, None]


def synth_dataset(
    num_classes: int,
    samples_per_class: int,
    frames_raw: int,
    seed: int,
    out_dir,
    noise_sigma: float = 0.01,
) -> Path:
    """Write a reproducible synthetic dataset; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    idx = 0
    for label in range(num_classes):
        template = class_template(label, frames_raw)
        for _ in range(samples_per_class):
            rng = np.random.default_rng([seed, idx])
            coords = template + rng.normal(0.0, noise_sigma, size=template.shape)
            name = f"c{label:03d}_s{idx:05d}.iips"
            save_sequence(SkeletonSequence(coords=coords, label=label), out / name)
            entries.append(ManifestEntry(name, label, idx % 8, idx % 3))
            idx += 1
    manifest = out / "manifest.tsv"
    write_manifest(entries, manifest)
    return manifest


def nearest_template_labels(manifest_path, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Oracle classifier: nearest noiseless class template by squared error.

    Returns (predicted, true) label arrays; used to confirm separability
    before asserting anything about learned accuracy.
    """
    entries = read_manifest(manifest_path)
    paths = resolve_manifest_paths(manifest_path, entries)
    preds, trues = [], []
    templates = None
    for entry, path in zip(entries, paths):
        seq = load_sequence(path)
        if templates is None:
            templates = np.stack([class_template(k, seq.frames) for k in range(num_classes)])
        err = ((templates - seq.coords[None]) ** 2).sum(axis=(1, 2, 3, 4))
        preds.append(int(err.argmin()))
        trues.append(entry.label)
    return np.asarray(preds), np.asarray(trues)
