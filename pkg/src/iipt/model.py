"""Full network: partition encoder, class token, positional embeddings,
stacked spatial/temporal attention layers, and the classification head.

Layers are pre-norm residual: x += attn(norm(x)) twice (spatial then
temporal) followed by x += ffn(norm(x)). The flat layer style replaces the
two grouped attentions with a single attention over the whole sequence.
Checkpoints are little-endian binary: magic ``IIPW``, a config text blob,
then named float64 tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import partition as pe
from .autodiff import Tensor
from .errors import ShapeError, UserInputError
from .skeldata import PartitionMap, SkeletonSequence, partition_map_by_name

CKPT_MAGIC = b"IIPW"
CKPT_VERSION = 1

HEAD_MODES = ("class_token", "avg_pool")
ATTN_MODES = ("iipa", "standard")
LAYER_STYLES = ("split", "flat")


@dataclass
class ModelConfig:
    num_classes: int
    frames: int = 32
    channels: int = 128
    encoder_channels: int = 64
    heads: int = 8
    layers: int = 4
    ffn_ratio: int = 2
    partition: str = "default"
    head_mode: str = "class_token"
    attn_mode: str = "iipa"
    layer_style: str = "split"
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("num_classes", "frames", "channels", "encoder_channels", "heads", "layers", "ffn_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.channels % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide channels ({self.channels})")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.attn_mode not in ATTN_MODES:
            raise ValueError(f"attn_mode must be one of {ATTN_MODES}")
        if self.layer_style not in LAYER_STYLES:
            raise ValueError(f"layer_style must be one of {LAYER_STYLES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.partition_map()  # validates the name

    def partition_map(self) -> PartitionMap:
        return partition_map_by_name(self.partition)

    @property
    def parts(self) -> int:
        return self.partition_map().parts

    @property
    def max_slots(self) -> int:
        return self.partition_map().max_slots

    @property
    def tokens_per_person(self) -> int:
        return self.parts * self.frames


def model_config_to_kv(config: ModelConfig) -> dict[str, str]:
    return {f.name: str(getattr(config, f.name)) for f in fields(ModelConfig)}


_STR_FIELDS = {"partition", "head_mode", "attn_mode", "layer_style"}


def model_config_from_kv(kv: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        try:
            if f.name in _STR_FIELDS:
                kwargs[f.name] = raw
            elif f.name == "dropout":
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        except ValueError as exc:
            raise UserInputError(f"bad value for {f.name}: {raw!r}") from exc
    try:
        return ModelConfig(**kwargs)
    except TypeError as exc:
        raise UserInputError(f"incomplete model config: {exc}") from exc
    except ValueError as exc:
        raise UserInputError(f"bad model config: {exc}") from exc


@dataclass
class LayerParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    norm3_gamma: Tensor
    norm3_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    s_attn: attn.AttentionParams | None = None
    t_attn: attn.AttentionParams | None = None
    norm2_gamma: Tensor | None = None
    norm2_beta: Tensor | None = None
    flat_attn: attn.AttentionParams | None = None


@dataclass
class ModelParams:
    encoder: pe.PartitionEncoderParams
    cls_token: Tensor
    pos_spatial: Tensor
    pos_temporal: Tensor
    layers: list[LayerParams]
    head_w: Tensor
    head_b: Tensor

    def named_tensors(self) -> dict[str, Tensor]:
        """Learnable tensors in a canonical order (excludes running stats)."""
        enc = self.encoder
        named = {
            "encoder.fj1.w": enc.w1, "encoder.fj1.b": enc.b1,
            "encoder.bn1.gamma": enc.bn1_gamma, "encoder.bn1.beta": enc.bn1_beta,
            "encoder.fj2.w": enc.w2, "encoder.fj2.b": enc.b2,
            "encoder.bn2.gamma": enc.bn2_gamma, "encoder.bn2.beta": enc.bn2_beta,
            "encoder.fp.w": enc.wp, "encoder.fp.b": enc.bp,
            "cls_token": self.cls_token,
            "pos_spatial": self.pos_spatial,
            "pos_temporal": self.pos_temporal,
        }
        for i, layer in enumerate(self.layers):
            base = f"layers.{i}"
            named[f"{base}.norm1.gamma"] = layer.norm1_gamma
            named[f"{base}.norm1.beta"] = layer.norm1_beta
            for tag, block in (("s_attn", layer.s_attn), ("t_attn", layer.t_attn), ("attn", layer.flat_attn)):
                if block is None:
                    continue
                for wname, t in zip(("wq", "bq", "wk", "bk", "wv", "bv", "w_out", "b_out", "w_intra", "b_intra"),
                                    block.tensors()):
                    if t is not None:
                        named[f"{base}.{tag}.{wname}"] = t
            if layer.norm2_gamma is not None:
                named[f"{base}.norm2.gamma"] = layer.norm2_gamma
                named[f"{base}.norm2.beta"] = layer.norm2_beta
            named[f"{base}.norm3.gamma"] = layer.norm3_gamma
            named[f"{base}.norm3.beta"] = layer.norm3_beta
            named[f"{base}.ffn.w1"] = layer.ffn_w1
            named[f"{base}.ffn.b1"] = layer.ffn_b1
            named[f"{base}.ffn.w2"] = layer.ffn_w2
            named[f"{base}.ffn.b2"] = layer.ffn_b2
        named["head.w"] = self.head_w
        named["head.b"] = self.head_b
        return named

    def named_buffers(self) -> dict[str, np.ndarray]:
        return {
            "encoder.bn1.running_mean": self.encoder.bn1_state.running_mean,
            "encoder.bn1.running_var": self.encoder.bn1_state.running_var,
            "encoder.bn2.running_mean": self.encoder.bn2_state.running_mean,
            "encoder.bn2.running_var": self.encoder.bn2_state.running_var,
        }

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Deterministic initialization: affine weights uniform(+-1/sqrt(fan_in))
    with zero biases; class token and positional embeddings N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    c = config.channels
    pmap = config.partition_map()
    encoder = pe.init_encoder_params(config.encoder_channels, c, pmap.max_slots, rng)
    cls_token = Tensor(rng.normal(0.0, 0.02, size=(1, c)))
    pos_spatial = Tensor(rng.normal(0.0, 0.02, size=(pmap.parts, c)))
    pos_temporal = Tensor(rng.normal(0.0, 0.02, size=(config.frames, c)))

    def affine(d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        return Tensor(rng.uniform(-bound, bound, size=(d_in, d_out))), Tensor(np.zeros(d_out))

    def norm_pair():
        return Tensor(np.ones(c)), Tensor(np.zeros(c))

    intra = config.attn_mode == "iipa"
    layers = []
    for _ in range(config.layers):
        n1g, n1b = norm_pair()
        n3g, n3b = norm_pair()
        hidden = config.ffn_ratio * c
        fw1, fb1 = affine(c, hidden)
        fw2, fb2 = affine(hidden, c)
        if config.layer_style == "split":
            s_block = attn.init_attention_params(c, config.heads, intra, rng)
            t_block = attn.init_attention_params(c, config.heads, intra, rng)
            n2g, n2b = norm_pair()
            layers.append(LayerParams(n1g, n1b, n3g, n3b, fw1, fb1, fw2, fb2,
                                      s_attn=s_block, t_attn=t_block, norm2_gamma=n2g, norm2_beta=n2b))
        else:
            block = attn.init_attention_params(c, config.heads, intra, rng)
            layers.append(LayerParams(n1g, n1b, n3g, n3b, fw1, fb1, fw2, fb2, flat_attn=block))
    head_w, head_b = affine(c, config.num_classes)
    return ModelParams(encoder, cls_token, pos_spatial, pos_temporal, layers, head_w, head_b)


def _ffn(x: Tensor, layer: LayerParams) -> Tensor:
    return ad.linear(ad.relu(ad.linear(x, layer.ffn_w1, layer.ffn_b1)), layer.ffn_w2, layer.ffn_b2)


def forward_coords(
    coords: np.ndarray,
    params: ModelParams,
    config: ModelConfig,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    mask_parts=None,
    collect_weights: list | None = None,
    trace_shapes: list | None = None,
) -> Tensor:
    """Logits for raw coordinates (B, 3, F, V, persons) or one clip without
    the batch axis. ``mask_parts`` feeds the part-mask augmentation into the
    encoder (train mode); ``collect_weights``/``trace_shapes`` are test hooks.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    coords = np.asarray(coords, dtype=np.float64)
    single = coords.ndim == 4
    if single:
        coords = coords[None]
    if coords.ndim != 5:
        raise ShapeError(f"expected (B, 3, F, V, persons) coordinates, got {coords.shape}")
    b, _, f, v, persons = coords.shape
    pmap = config.partition_map()
    if f != config.frames:
        raise ShapeError(f"clip has {f} frames, model expects {config.frames}; resample first")
    if v != pmap.joint_count:
        raise ShapeError(f"clip has {v} joints, partition map expects {pmap.joint_count}")
    training = mode == "train"
    drop = config.dropout if training else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("dropout needs an rng in train mode")

    tokens = pe.partition_encode(coords, pmap, params.encoder, training=training, mask_parts=mask_parts)
    p_eff = persons * pmap.parts
    n = f * p_eff
    token_ids = np.arange(n)
    sp_idx = (token_ids % p_eff) % pmap.parts
    t_idx = token_ids // p_eff
    pos = ad.add(ad.take(params.pos_spatial, sp_idx, axis=0), ad.take(params.pos_temporal, t_idx, axis=0))
    x = ad.add(tokens, pos)
    cls_rows = ad.reshape(ad.take(params.cls_token, [0] * b, axis=0), (b, 1, config.channels))
    x = ad.concat([cls_rows, x], axis=-2)

    def residual(x, branch):
        h = branch
        if drop > 0.0:
            h = ad.dropout(h, drop, rng)
        return ad.add(x, h)

    acfg = attn.AttentionConfig(mode=config.attn_mode)
    for layer in params.layers:
        if trace_shapes is not None:
            trace_shapes.append(x.shape)
        if config.layer_style == "split":
            normed = ad.layernorm(x, layer.norm1_gamma, layer.norm1_beta)
            x = residual(x, attn.s_iipa(normed, layer.s_attn, acfg, parts=p_eff, frames=f, collect=collect_weights))
            normed = ad.layernorm(x, layer.norm2_gamma, layer.norm2_beta)
            x = residual(x, attn.t_iipa(normed, layer.t_attn, acfg, parts=p_eff, frames=f, collect=collect_weights))
        else:
            normed = ad.layernorm(x, layer.norm1_gamma, layer.norm1_beta)
            x = residual(x, attn.flat_attention_layer(normed, layer.flat_attn, acfg, collect=collect_weights))
        normed = ad.layernorm(x, layer.norm3_gamma, layer.norm3_beta)
        x = residual(x, _ffn(normed, layer))
    if trace_shapes is not None:
        trace_shapes.append(x.shape)

    if config.head_mode == "class_token":
        feat = ad.reshape(ad.take(x, [0], axis=-2), (b, config.channels))
    else:
        feat = ad.tmean(ad.take(x, np.arange(1, n + 1), axis=-2), axis=-2)
    logits = ad.linear(feat, params.head_w, params.head_b)
    if single:
        logits = ad.reshape(logits, (config.num_classes,))
    return logits


def forward(seq: SkeletonSequence, params: ModelParams, config: ModelConfig, mode: str = "eval") -> Tensor:
    """Logits for one already-resampled sequence."""
    return forward_coords(seq.coords, params, config, mode=mode)


# ---------------------------------------------------------------------------
# checkpoints


def _kv_to_text(kv: dict[str, str]) -> str:
    return "\n".join(f"{k} = {v}" for k, v in sorted(kv.items())) + "\n"


def parse_kv_text(text: str, origin: str = "config") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UserInputError(f"{origin}:{ln}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def save_checkpoint(path, params: ModelParams, config: ModelConfig, extra: dict[str, str] | None = None) -> None:
    kv = model_config_to_kv(config)
    if extra:
        kv.update(extra)
    blob = _kv_to_text(kv).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    items = list(params.named_tensors().items()) + [(k, v) for k, v in params.named_buffers().items()]
    chunks.append(struct.pack("<I", len(items)))
    for name, tensor in items:
        arr = tensor.data if isinstance(tensor, Tensor) else tensor
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict[str, str]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise UserInputError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != CKPT_MAGIC:
        raise UserInputError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack("<II", blob[4:12])
    if version != CKPT_VERSION:
        raise UserInputError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    kv = parse_kv_text(blob[off : off + cfg_len].decode("utf-8"), origin=str(path))
    off += cfg_len
    config = model_config_from_kv(kv)
    extra = {k: v for k, v in kv.items() if k not in model_config_to_kv(config)}
    (count,) = struct.unpack("<I", blob[off : off + 4])
    off += 4
    stored: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", blob[off : off + 2])
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack("<B", blob[off : off + 1])
        off += 1
        shape = struct.unpack(f"<{ndim}I", blob[off : off + 4 * ndim])
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(blob[off : off + 8 * size], dtype="<f8").reshape(shape).copy()
        if arr.size != size:
            raise UserInputError(f"{path}: truncated tensor payload for {name}")
        off += 8 * size
        stored[name] = arr
    if off != len(blob):
        raise UserInputError(f"{path}: {len(blob) - off} trailing bytes after tensor data")

    params = init_params(config, seed=0)
    expected = {name: t for name, t in params.named_tensors().items()}
    buffers = params.named_buffers()
    want = set(expected) | set(buffers)
    have = set(stored)
    if want != have:
        missing = sorted(want - have)
        unexpected = sorted(have - want)
        raise UserInputError(f"{path}: tensor names do not match config (missing {missing}, unexpected {unexpected})")
    for name, tensor in expected.items():
        if stored[name].shape != tensor.data.shape:
            raise UserInputError(f"{path}: tensor {name} has shape {stored[name].shape}, expected {tensor.data.shape}")
        tensor.data = stored[name]
        tensor.grad = None
    for name, buf in buffers.items():
        if stored[name].shape != buf.shape:
            raise UserInputError(f"{path}: buffer {name} has shape {stored[name].shape}, expected {buf.shape}")
        buf[...] = stored[name]
    return params, config, extra
