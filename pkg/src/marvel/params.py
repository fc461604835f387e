"""Named parameter store with freeze groups, seeded init and the MRVL checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from marvel.autodiff import Tensor, get_dtype

GROUPS = ("lm", "vision", "projection", "prompts")

MAGIC = b"MRVL"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 1
    max_text_len: int = 128
    image_size: int = 28
    channels: int = 3
    patch_size: int = 4
    d_vis: int = 32
    vis_heads: int = 4
    vis_ff: int = 64
    vis_layers: int = 2

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def max_positions(self) -> int:
        # [IMG_START, 49 features, IMG_END, caption]
        return self.n_patches + 2 + self.max_text_len

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def group_of(name: str) -> str:
    head = name.split(".", 1)[0]
    if head == "proj":
        return "projection"
    if head not in GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no known group")
    return head


def _attention_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [(f"{prefix}.{w}", (d, d), "glorot") for w in ("wq", "wk", "wv", "wo")]


def _norm_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [(f"{prefix}.g", (d,), "ones"), (f"{prefix}.b", (d,), "zeros")]


def _ffn_shapes(prefix: str, d: int, ff: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{prefix}.w1", (d, ff), "glorot"),
        (f"{prefix}.b1", (ff,), "zeros"),
        (f"{prefix}.w2", (ff, d), "glorot"),
        (f"{prefix}.b2", (d,), "zeros"),
    ]


def parameter_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Every parameter as (name, shape, init) in the fixed initialisation order."""
    d, dv = cfg.d_model, cfg.d_vis
    out: list[tuple[str, tuple[int, ...], str]] = []
    # vision encoder
    out += [
        ("vision.patch_w", (cfg.patch_dim, dv), "glorot"),
        ("vision.patch_b", (dv,), "zeros"),
        ("vision.pos_emb", (cfg.n_patches, dv), "glorot"),
    ]
    for i in range(cfg.vis_layers):
        p = f"vision.blocks.{i}"
        out += _norm_shapes(f"{p}.ln1", dv) + _attention_shapes(f"{p}.attn", dv)
        out += _norm_shapes(f"{p}.ln2", dv) + _ffn_shapes(f"{p}.ffn", dv, cfg.vis_ff)
    out += _norm_shapes("vision.ln_post", dv)
    # projection into the LM input space
    out += [("proj.w", (dv, d), "glorot"), ("proj.b", (d,), "zeros")]
    # prompt embeddings <start>, <end>
    out += [("prompts.emb", (2, d), "glorot")]
    # language model
    out += [
        ("lm.tok_emb", (cfg.vocab_size, d), "normal"),
        ("lm.pos_emb", (cfg.max_positions, d), "zeros"),
    ]
    for i in range(cfg.n_enc_layers):
        p = f"lm.enc.{i}"
        out += _norm_shapes(f"{p}.ln1", d) + _attention_shapes(f"{p}.attn", d)
        out += _norm_shapes(f"{p}.ln2", d) + _ffn_shapes(f"{p}.ffn", d, cfg.d_ff)
    out += _norm_shapes("lm.enc_ln", d)
    for i in range(cfg.n_dec_layers):
        p = f"lm.dec.{i}"
        out += _norm_shapes(f"{p}.ln1", d) + _attention_shapes(f"{p}.self", d)
        out += _norm_shapes(f"{p}.ln2", d) + _attention_shapes(f"{p}.cross", d)
        out += _norm_shapes(f"{p}.ln3", d) + _ffn_shapes(f"{p}.ffn", d, cfg.d_ff)
    out += _norm_shapes("lm.dec_ln", d)
    out += [("lm.concat_w", (2 * d, d), "glorot")]
    return out


class ModelParams:
    """Ordered mapping name -> Tensor, with per-group freeze flags."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name
            group_of(name)
        self.trainable: frozenset[str] = frozenset()

    @classmethod
    def initialize(cls, cfg: ModelConfig, seed: int = 42) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dtype = get_dtype()
        tensors = {}
        for name, shape, init in parameter_layout(cfg):
            if init == "glorot":
                fan_in, fan_out = shape
                a = np.sqrt(6.0 / (fan_in + fan_out))
                arr = rng.uniform(-a, a, size=shape)
            elif init == "normal":
                arr = rng.standard_normal(shape)
            elif init == "ones":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            tensors[name] = Tensor(arr.astype(dtype), name=name)
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self, groups=None) -> list[str]:
        if groups is None:
            return list(self.tensors)
        groups = set(groups)
        return [n for n in self.tensors if group_of(n) in groups]

    def set_trainable(self, groups) -> None:
        groups = frozenset(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
        self.trainable = groups
        for name, t in self.tensors.items():
            t.requires_grad = group_of(name) in groups
            t.grad = None

    def trainable_tensors(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            if n not in self.tensors:
                raise CheckpointError(f"unexpected parameter {n!r}")
            if self.tensors[n].shape != arr.shape:
                raise CheckpointError(f"shape mismatch for {n}: {self.tensors[n].shape} vs {arr.shape}")
            self.tensors[n].data = arr.astype(self.tensors[n].data.dtype, copy=True)

    def astype(self, dtype) -> None:
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)

    def group_bytes(self, group: str) -> bytes:
        """Concatenated raw bytes of one group, for bitwise freeze checks."""
        return b"".join(self.tensors[n].data.tobytes() for n in self.names([group]))


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig | None = None) -> None:
    """Write the MRVL binary format; the model config goes to a JSON sidecar."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params.tensors))]
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    if cfg is not None:
        config_path(path).write_text(cfg.to_json() + "\n")


def config_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
            out[name] = arr.astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    if cfg is None:
        cp = config_path(path)
        if not cp.exists():
            raise CheckpointError(f"missing model config sidecar {cp}")
        cfg = ModelConfig.from_json(cp.read_text())
    state = read_checkpoint(path)
    params = ModelParams.initialize(cfg, seed=0)
    missing = set(params.tensors) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    params.load_state(state)
    return params, cfg
