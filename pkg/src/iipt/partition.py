"""Partition encoding: lift joint coordinates, group them into body parts,
and embed each (frame, part) group as one token.

Joint features come from two pointwise channel maps with batchnorm+ReLU;
parts are gathered with zero padding up to the slot count and flattened to
(slots * channels) vectors, which a final affine+ReLU projects to the token
width. Token order is frame-major: token index = frame * parts + part, with
a second person's parts stacked after the first person's within each frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .errors import ShapeError
from .skeldata import PartitionMap


@dataclass
class PartitionEncoderParams:
    w1: Tensor
    b1: Tensor
    bn1_gamma: Tensor
    bn1_beta: Tensor
    bn1_state: BatchNormState
    w2: Tensor
    b2: Tensor
    bn2_gamma: Tensor
    bn2_beta: Tensor
    bn2_state: BatchNormState
    wp: Tensor
    bp: Tensor

    @property
    def feature_channels(self) -> int:
        return self.w1.shape[1]

    @property
    def token_channels(self) -> int:
        return self.wp.shape[1]


def init_encoder_params(feature_channels: int, token_channels: int, max_slots: int, rng: np.random.Generator) -> PartitionEncoderParams:
    def affine(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        return Tensor(rng.uniform(-bound, bound, size=(d_in, d_out))), Tensor(np.zeros(d_out))

    w1, b1 = affine(3, feature_channels)
    w2, b2 = affine(feature_channels, feature_channels)
    wp, bp = affine(feature_channels * max_slots, token_channels)
    ones = lambda n: Tensor(np.ones(n))
    zeros = lambda n: Tensor(np.zeros(n))
    return PartitionEncoderParams(
        w1, b1, ones(feature_channels), zeros(feature_channels), BatchNormState(feature_channels),
        w2, b2, ones(feature_channels), zeros(feature_channels), BatchNormState(feature_channels),
        wp, bp,
    )


def extract_joint_features(x: Tensor, params: PartitionEncoderParams, training: bool) -> Tensor:
    """Two pointwise channel lifts with batchnorm+ReLU over (..., positions, 3)."""
    if x.shape[-1] != 3:
        raise ShapeError(f"joint features expect 3 input channels, got {x.shape}")
    c = params.feature_channels
    flat = ad.reshape(x, (-1, 3))
    h = ad.linear(flat, params.w1, params.b1)
    h = ad.relu(ad.batchnorm(h, params.bn1_gamma, params.bn1_beta, params.bn1_state, training))
    h = ad.linear(h, params.w2, params.b2)
    h = ad.relu(ad.batchnorm(h, params.bn2_gamma, params.bn2_beta, params.bn2_state, training))
    return ad.reshape(h, x.shape[:-1] + (c,))


def gather_parts(features: Tensor, pmap: PartitionMap) -> Tensor:
    """(..., F, V, persons, C) joint features -> (..., N, slots*C) part groups.

    Pad slots read from an appended all-zero pseudo-joint, so they carry
    exactly zero and route no gradient to any real joint.
    """
    *lead, f, v, persons, c = features.shape
    if v != pmap.joint_count:
        raise ShapeError(f"features have {v} joints, partition map expects {pmap.joint_count}")
    p, m = pmap.parts, pmap.max_slots
    pad = Tensor(np.zeros(tuple(lead) + (f, 1, persons, c)))
    padded = ad.concat([features, pad], axis=-3)
    idx = pmap.padded_indices(pad_index=v).reshape(-1)
    gathered = ad.take(padded, idx, axis=-3)                      # (..., F, P*M, persons, C)
    gathered = ad.reshape(gathered, tuple(lead) + (f, p, m, persons, c))
    gathered = ad.swapaxes(gathered, -2, -4)                      # (..., F, persons, M, P, C) -> fix below
    # axes now (..., F, persons, M, P, C); want (..., F, persons, P, M, C)
    gathered = ad.swapaxes(gathered, -2, -3)
    return ad.reshape(gathered, tuple(lead) + (f * persons * p, m * c))


def embed_parts(groups: Tensor, params: PartitionEncoderParams) -> Tensor:
    """Affine+ReLU patch embedding of flattened part groups to token width."""
    if groups.shape[-1] != params.wp.shape[0]:
        raise ShapeError(f"group width {groups.shape[-1]} != embedding input {params.wp.shape[0]}")
    return ad.relu(ad.linear(groups, params.wp, params.bp))


def partition_encode(
    coords: np.ndarray,
    pmap: PartitionMap,
    params: PartitionEncoderParams,
    training: bool = False,
    mask_parts=None,
) -> Tensor:
    """Encode a batch of raw clips (B, 3, F, V, persons) into part tokens.

    Returns (B, N, C) with N = F * persons * parts. ``mask_parts`` is an
    optional per-sample part index (or None) zeroed in the lifted joint
    features across all frames, i.e. after feature extraction.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 5 or coords.shape[1] != 3:
        raise ShapeError(f"expected (B, 3, F, V, persons) coordinates, got {coords.shape}")
    b, _, f, v, persons = coords.shape
    x = Tensor(np.moveaxis(coords, 1, -1))                        # (B, F, V, persons, 3)
    feats = extract_joint_features(x, params, training)           # (B, F, V, persons, C)
    if mask_parts is not None:
        mask = np.ones((b, 1, v, 1, 1))
        for i, part in enumerate(mask_parts):
            if part is None:
                continue
            if not 0 <= part < pmap.parts:
                raise ValueError(f"part index {part} out of range [0, {pmap.parts})")
            mask[i, :, list(pmap.assignment[part])] = 0.0
        feats = ad.mul(feats, Tensor(mask))
    groups = gather_parts(feats, pmap)
    return embed_parts(groups, params)
