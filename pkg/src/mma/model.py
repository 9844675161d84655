"""Full network assembly, variants, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"MMA1"                      magic
    u32 version                  currently 1
    u32 n, n bytes               config as UTF-8 JSON
    u32 count                    number of tensors
    per tensor:
        u16 n, n bytes           UTF-8 name
        u8 dtype code            0 = float32, 1 = float64
        u8 rank, rank x u32      extents
        raw payload              row-major, little-endian
    32 bytes                     SHA-256 of everything above
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mma.fileio import atomic_write
from mma.blocks import MMABlock, PositionEmbedding, TokenGrid, detokenize, pixel_shuffle, tokenize
from mma.numerics import ContractError, Module, Tensor, default_dtype, functional as F
from mma.numerics.layers import Conv2d

MAGIC = b"MMA1"
VERSION = 1
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}
MIN_INPUT = 8


class ConfigError(ValueError):
    pass


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class CorruptCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    def __init__(self, name: str, expected, found):
        super().__init__(f"tensor {name!r}: config expects shape {tuple(expected)}, checkpoint has {tuple(found)}")
        self.name = name


@dataclass
class ModelConfig:
    features: int = 48
    blocks: int = 8
    scale: int = 2
    mixer: str = "vim"
    use_channel_attention: bool = True
    use_pos_emb: bool = True
    state_size: int = 16
    mlp_ratio: int = 4
    ca_reduction: int = 16
    variant: str = "custom"
    expand: int = 2
    conv_width: int = 4
    pos_grid: int = 64
    pad_mode: str = "zeros"

    def validate(self) -> "ModelConfig":
        if self.scale not in (1, 2, 3, 4):
            raise ConfigError(f"scale must be 1, 2, 3 or 4, got {self.scale}")
        if self.blocks < 1:
            raise ConfigError("need at least one block")
        if self.features < self.ca_reduction:
            raise ConfigError(f"features ({self.features}) must be >= ca_reduction ({self.ca_reduction})")
        if self.use_channel_attention and self.features % self.ca_reduction:
            raise ConfigError("ca_reduction must divide features")
        if self.mixer not in ("vim", "cnn"):
            raise ConfigError(f"unknown mixer {self.mixer!r}")
        if self.pad_mode not in ("zeros", "replicate"):
            raise ConfigError(f"unknown pad mode {self.pad_mode!r}")
        if min(self.state_size, self.mlp_ratio, self.expand, self.conv_width, self.pos_grid) < 1:
            raise ConfigError("sizes must be positive")
        return self

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes).validate()


def mma_b(scale: int = 2, **kw) -> ModelConfig:
    return ModelConfig(features=192, blocks=24, scale=scale, variant="MMA-B", **kw).validate()


def mma_t(scale: int = 2, **kw) -> ModelConfig:
    return ModelConfig(features=48, blocks=8, scale=scale, variant="MMA-T", **kw).validate()


def toy(scale: int = 2, **kw) -> ModelConfig:
    kw.setdefault("state_size", 8)
    kw.setdefault("pos_grid", 16)
    return ModelConfig(features=16, blocks=2, scale=scale, variant="toy", **kw).validate()


def ablation(cfg: ModelConfig, name: str) -> ModelConfig:
    """'full', 'wo_ca' (no channel attention) or 'w_cnn' (residual CNN mixer)."""
    if name == "full":
        return cfg
    if name == "wo_ca":
        return cfg.replace(use_channel_attention=False, variant=cfg.variant + "/wo_ca")
    if name == "w_cnn":
        return cfg.replace(mixer="cnn", variant=cfg.variant + "/w_cnn")
    raise ConfigError(f"unknown ablation {name!r}")


class MMA(Module):
    """Shallow 3x3 conv, K MMA blocks with a 3x3 tail conv, then conv + pixel shuffle on F_SF + F_DF."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        c = cfg.features
        self.shallow = Conv2d(rng, 3, c)
        self.pos_embed = PositionEmbedding(rng, c, cfg.pos_grid) if cfg.use_pos_emb else None
        self.blocks = [
            MMABlock(
                rng,
                c,
                mixer=cfg.mixer,
                use_channel_attention=cfg.use_channel_attention,
                state=cfg.state_size,
                mlp_ratio=cfg.mlp_ratio,
                ca_reduction=cfg.ca_reduction,
                expand=cfg.expand,
                conv_width=cfg.conv_width,
            )
            for _ in range(cfg.blocks)
        ]
        self.body_tail = Conv2d(rng, c, c)
        self.recon = Conv2d(rng, c, 3 * cfg.scale**2)
        for conv in self.convs():
            conv.pad_mode = cfg.pad_mode

    def convs(self) -> list[Conv2d]:
        out = [self.shallow, self.body_tail, self.recon]
        for blk in self.blocks:
            if blk.mixer_kind == "cnn":
                out += [blk.mixer.conv1, blk.mixer.conv2]
        return out

    def set_scan_method(self, method: str) -> None:
        for blk in self.blocks:
            if blk.mixer_kind == "vim":
                blk.mixer.set_scan_method(method)

    def deep_features(self, f_sf: Tensor) -> Tensor:
        _, _, h, w = f_sf.shape
        pos = self.pos_embed(h, w) if self.pos_embed is not None else None
        t = tokenize(f_sf).tokens
        for blk in self.blocks:
            t = blk.forward_tokens(t, h, w, pos)
        return self.body_tail(detokenize(TokenGrid(t, h, w)))

    def __call__(self, i_lr) -> Tensor:
        x = i_lr if isinstance(i_lr, Tensor) else Tensor(i_lr, dtype=self.shallow.weight.dtype)
        squeeze = x.ndim == 3
        if squeeze:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected 3 x H x W or B x 3 x H x W input, got {x.shape}")
        if min(x.shape[2:]) < MIN_INPUT:
            raise ContractError(f"input {x.shape[2]} x {x.shape[3]} is smaller than {MIN_INPUT} x {MIN_INPUT}")
        f_sf = self.shallow(x)
        out = pixel_shuffle(self.recon(F.add(f_sf, self.deep_features(f_sf))), self.config.scale)
        return F.reshape(out, out.shape[1:]) if squeeze else out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


def build(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> MMA:
    """Deterministic initialization: the same (config, seed, dtype) gives bit-identical parameters."""
    cfg.validate()
    with default_dtype(dtype):
        return MMA(cfg, np.random.default_rng(seed))


def forward(m: MMA, i_lr) -> Tensor:
    return m(i_lr)


def parameter_count(m: MMA) -> int:
    return m.num_parameters()


# -- serialization -------------------------------------------------------------


def encode(config_json: str, tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = config_json.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", DTYPE_CODES[le], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) or blob[:4] != MAGIC:
        raise CorruptCheckpointError("bad magic: not an MMA1 checkpoint")
    if len(blob) < 4 + 4 + 32:
        raise ChecksumError("file too short to carry a checksum")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch (truncated or modified file)")
    view = memoryview(body)
    pos = 4

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CorruptCheckpointError("unexpected end of data")
        out = view[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}")
    (n,) = struct.unpack("<I", take(4))
    config_json = bytes(take(n)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise CorruptCheckpointError(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(bytes(take(size)), dtype=dtype).reshape(shape).copy()
    if pos != len(view):
        raise CorruptCheckpointError("trailing bytes after tensor table")
    return config_json, tensors


def save(m: MMA, path, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(m.state_dict())
    if extra:
        tensors.update(extra)
    atomic_write(path, encode(m.config.to_json(), tensors))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    config_json, tensors = decode(blob)
    try:
        cfg = ModelConfig.from_json(config_json)
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpointError(f"embedded config is invalid: {exc}") from exc
    return cfg, tensors


def load_state(m: MMA, tensors: dict[str, np.ndarray]) -> MMA:
    """Copy matching tensors into ``m``; the first missing or misshapen one raises."""
    for name, p in m.named_parameters():
        if name not in tensors:
            raise ShapeMismatchError(name, p.shape, ())
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ShapeMismatchError(name, p.shape, arr.shape)
        p.data = arr.astype(arr.dtype, copy=True)
    return m


def load(path, config: ModelConfig | None = None) -> MMA:
    """Rebuild a model from a checkpoint; ``config`` overrides the embedded one for shape checking."""
    embedded, tensors = read_checkpoint(path)
    cfg = config or embedded
    dtypes = {a.dtype for a in tensors.values()}
    dtype = np.float64 if np.dtype("<f8") in dtypes else np.float32
    return load_state(build(cfg, seed=0, dtype=dtype), tensors)
