"""Training-time augmentation: clip-level 3D rotation, part masking on the
lifted joint features, and the joint-level baselines (Gaussian noise, joint
mask). Everything is driven by an explicit RNG stream so runs replay exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .skeldata import PartitionMap, SkeletonSequence


@dataclass
class AugmentConfig:
    rotation: bool = True
    rotation_bound: float = math.pi / 10.0   # per-axis angle range, radians
    part_mask: bool = True
    part_mask_prob: float = 0.5
    gaussian_sigma: float = 0.0
    joint_mask_count: int = 0

    def __post_init__(self):
        if self.rotation_bound < 0 or self.gaussian_sigma < 0 or self.joint_mask_count < 0:
            raise ValueError("augmentation bounds must be nonnegative")
        if not 0.0 <= self.part_mask_prob <= 1.0:
            raise ValueError("part_mask_prob must be in [0, 1]")


def rotation_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Composed rotation R = Rz(gamma) @ Ry(beta) @ Rx(alpha)."""
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def random_rotation(rng: np.random.Generator, bound: float) -> np.ndarray:
    alpha, beta, gamma = rng.uniform(-bound, bound, size=3)
    return rotation_matrix(alpha, beta, gamma)


def apply_rotation(seq: SkeletonSequence, rot: np.ndarray) -> SkeletonSequence:
    """Rotate every joint of every frame and person by one shared matrix."""
    coords = np.einsum("ij,jfvb->ifvb", rot, seq.coords)
    return SkeletonSequence(coords=coords, label=seq.label)


def part_mask(features: Tensor, pmap: PartitionMap, part: int) -> Tensor:
    """Zero one part's joints in lifted features (channels, frames, joints)
    across all frames; every other value passes through bit-identically."""
    if not 0 <= part < pmap.parts:
        raise ValueError(f"part index {part} out of range [0, {pmap.parts})")
    if features.shape[-1] != pmap.joint_count:
        raise ValueError(f"features have {features.shape[-1]} joints, map expects {pmap.joint_count}")
    mask = np.ones(features.shape[-1])
    mask[list(pmap.assignment[part])] = 0.0
    return ad.mul(features, Tensor(mask))


def part_mask_coords(seq: SkeletonSequence, pmap: PartitionMap, part: int) -> SkeletonSequence:
    """Coordinate-level preview of the mask pattern (used by the CLI to dump
    inspectable files; training masks features, not coordinates)."""
    if not 0 <= part < pmap.parts:
        raise ValueError(f"part index {part} out of range [0, {pmap.parts})")
    coords = seq.coords.copy()
    coords[:, :, list(pmap.assignment[part]), :] = 0.0
    return SkeletonSequence(coords=coords, label=seq.label)


def gaussian_noise(seq: SkeletonSequence, sigma: float, rng: np.random.Generator) -> SkeletonSequence:
    if sigma == 0.0:
        return SkeletonSequence(coords=seq.coords.copy(), label=seq.label)
    return SkeletonSequence(coords=seq.coords + rng.normal(0.0, sigma, size=seq.coords.shape), label=seq.label)


def joint_mask(seq: SkeletonSequence, count: int, rng: np.random.Generator) -> SkeletonSequence:
    """Zero ``count`` uniformly chosen (frame, joint) cells (all channels and
    persons of each cell)."""
    cells = seq.frames * seq.joints
    if count > cells:
        raise ValueError(f"joint_mask count {count} exceeds frame*joint cells ({cells})")
    coords = seq.coords.copy()
    if count:
        chosen = rng.choice(cells, size=count, replace=False)
        f_idx, v_idx = np.divmod(chosen, seq.joints)
        coords[:, f_idx, v_idx, :] = 0.0
    return SkeletonSequence(coords=coords, label=seq.label)


@dataclass
class SamplePlan:
    """Per-sample augmentation decisions drawn from one RNG stream."""

    rotation: np.ndarray | None
    mask_part: int | None


def draw_plan(config: AugmentConfig, parts: int, rng: np.random.Generator) -> SamplePlan:
    rot = random_rotation(rng, config.rotation_bound) if config.rotation else None
    part = None
    if config.part_mask and rng.random() < config.part_mask_prob:
        part = int(rng.integers(parts))
    return SamplePlan(rotation=rot, mask_part=part)


def apply_coordinate_augments(seq: SkeletonSequence, config: AugmentConfig, plan: SamplePlan,
                              rng: np.random.Generator) -> SkeletonSequence:
    """Everything that acts on raw coordinates (the part mask happens later,
    inside the encoder, via ``plan.mask_part``)."""
    out = seq
    if plan.rotation is not None:
        out = apply_rotation(out, plan.rotation)
    if config.gaussian_sigma > 0.0:
        out = gaussian_noise(out, config.gaussian_sigma, rng)
    if config.joint_mask_count > 0:
        out = joint_mask(out, config.joint_mask_count, rng)
    return out
