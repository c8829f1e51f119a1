"""Frozen tiny image/text transformers and the DPCW weight archive.

Both encoders share one feature width ``dim``; the text encoder consumes
embedding sequences directly so prompt tokens can be fed in without ids.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from . import graph as G
from .graph import ContractViolation, Parameter, Tensor

ARCHIVE_MAGIC = b"DPCW"
ARCHIVE_VERSION = 1
INIT_STD = 0.02
# CLIP-scale text width; embeddings keep its row norm at any width
REFERENCE_WIDTH = 512


class ArchiveError(ContractViolation):
    pass


# ---------------------------------------------------------------------------
# weight archive


def write_entries(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    """Per tensor: u16 name length, UTF-8 name, u8 rank, u32 extents, f32 LE values."""
    for name, value in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        stream.write(struct.pack("<H", len(raw)))
        stream.write(raw)
        stream.write(struct.pack("<B", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(arr.tobytes())


def read_entries(buf: bytes, offset: int, count: int) -> tuple[dict[str, np.ndarray], int]:
    out: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise ArchiveError(
                f"truncated archive: {what} needs {n} bytes at byte offset {offset}, "
                f"only {len(buf) - offset} remain")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    for k in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"name length of entry {k}"))
        name = take(name_len, f"name of entry {k}").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        values = take(n_bytes, f"value stream of {name!r}")
        if name in out:
            raise ArchiveError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(values, dtype="<f4").reshape(shape).astype(np.float32)
    return out, offset


def save_archive(target: str | Path | BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    if isinstance(target, (str, Path)):
        with open(target, "wb") as fh:
            save_archive(fh, tensors)
        return
    target.write(ARCHIVE_MAGIC)
    target.write(struct.pack("<II", ARCHIVE_VERSION, len(tensors)))
    write_entries(target, tensors)


def archive_bytes(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    save_archive(buf, tensors)
    return buf.getvalue()


def load_archive(source: str | Path | bytes) -> dict[str, np.ndarray]:
    buf = source if isinstance(source, bytes) else Path(source).read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ArchiveError(f"bad magic {buf[:4]!r}, expected {ARCHIVE_MAGIC!r}")
    if len(buf) < 12:
        raise ArchiveError(f"truncated archive header ({len(buf)} bytes)")
    version, count = struct.unpack("<II", buf[4:12])
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    tensors, end = read_entries(buf, 12, count)
    if end != len(buf):
        raise ArchiveError(f"{len(buf) - end} trailing bytes after last tensor at byte offset {end}")
    return tensors


def archive_digest(source: str | Path) -> str:
    return hashlib.sha256(Path(source).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# transformer pieces


@dataclass(frozen=True)
class ImageEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    width: int = 32
    layers: int = 2
    dim: int = 32

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    dim: int = 32
    layers: int = 2
    context_length: int = 16


def _block_shapes(prefix: str, width: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1.gain": (width,), f"{prefix}.ln1.bias": (width,),
        f"{prefix}.attn.wq": (width, width), f"{prefix}.attn.bq": (width,),
        f"{prefix}.attn.wk": (width, width), f"{prefix}.attn.bk": (width,),
        f"{prefix}.attn.wv": (width, width), f"{prefix}.attn.bv": (width,),
        f"{prefix}.attn.wo": (width, width), f"{prefix}.attn.bo": (width,),
        f"{prefix}.ln2.gain": (width,), f"{prefix}.ln2.bias": (width,),
        f"{prefix}.mlp.w1": (width, 4 * width), f"{prefix}.mlp.b1": (4 * width,),
        f"{prefix}.mlp.w2": (4 * width, width), f"{prefix}.mlp.b2": (width,),
    }


_BIAS_NAMES = {"bias", "patch_bias", "bq", "bk", "bv", "bo", "b1", "b2"}


_EMBEDDING_NAMES = {"token_embed", "pos_embed"}


def _init_weights(shapes: Mapping[str, tuple[int, ...]], seed) -> dict[str, np.ndarray]:
    # Embedding rows get the norm a 0.02-std row has at width 512, so prompt
    # tokens are not tiny next to a finite-difference step at width 16.
    # Dense matrices ~ N(0, 1/fan_in) keep block outputs on the residual
    # stream's scale. Unit layer-norm gains, zero biases.
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".gain"):
            out[name] = np.ones(shape, dtype=np.float32)
        elif name.rsplit(".", 1)[-1] in _BIAS_NAMES:
            out[name] = np.zeros(shape, dtype=np.float32)
        else:
            if name in _EMBEDDING_NAMES:
                std = INIT_STD * np.sqrt(REFERENCE_WIDTH / shape[-1])
            else:
                std = 1.0 / np.sqrt(shape[0])
            out[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return out


def _block(x: Tensor, w: Mapping[str, Parameter], prefix: str) -> Tensor:
    width = x.shape[-1]
    h = G.layer_norm(x, w[f"{prefix}.ln1.gain"], w[f"{prefix}.ln1.bias"])
    q = h @ w[f"{prefix}.attn.wq"] + w[f"{prefix}.attn.bq"]
    k = h @ w[f"{prefix}.attn.wk"] + w[f"{prefix}.attn.bk"]
    v = h @ w[f"{prefix}.attn.wv"] + w[f"{prefix}.attn.bv"]
    att = G.softmax(G.scale(q @ G.transpose(k), 1.0 / np.sqrt(width)), axis=-1)
    x = x + ((att @ v) @ w[f"{prefix}.attn.wo"] + w[f"{prefix}.attn.bo"])
    h = G.layer_norm(x, w[f"{prefix}.ln2.gain"], w[f"{prefix}.ln2.bias"])
    h = G.gelu(h @ w[f"{prefix}.mlp.w1"] + w[f"{prefix}.mlp.b1"])
    return x + (h @ w[f"{prefix}.mlp.w2"] + w[f"{prefix}.mlp.b2"])


class _FrozenEncoder:
    config: object

    def __init__(self, config, weights: Mapping[str, np.ndarray], dtype=np.float32):
        expected = self.weight_shapes(config)
        problems = []
        for name, shape in expected.items():
            if name not in weights:
                problems.append(f"missing tensor {name!r}")
            elif tuple(weights[name].shape) != shape:
                problems.append(f"shape mismatch for {name!r}: expected {shape}, got {tuple(weights[name].shape)}")
        for name in weights:
            if name not in expected:
                problems.append(f"unexpected tensor {name!r}")
        if problems:
            raise ArchiveError("weights rejected: " + "; ".join(problems))
        self.config = config
        self.dtype = np.dtype(dtype)
        self.weights = {
            name: Parameter(np.array(weights[name], dtype=dtype), trainable=False, name=name)
            for name in expected
        }

    @staticmethod
    def weight_shapes(config) -> dict[str, tuple[int, ...]]:
        raise NotImplementedError

    @classmethod
    def init(cls, config, seed, dtype=np.float32):
        return cls(config, _init_weights(cls.weight_shapes(config), seed), dtype)

    def astype(self, dtype):
        return type(self)(self.config, self.named_weights(), dtype)

    def named_weights(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.weights.items()}

    def parameters(self) -> list[Parameter]:
        """Trainable parameters; always empty for a frozen encoder."""
        return [p for p in self.weights.values() if p.trainable]


class ImageEncoder(_FrozenEncoder):
    """Patch embedding, transformer blocks, mean pooling, linear projection."""

    config: ImageEncoderConfig

    @staticmethod
    def weight_shapes(config: ImageEncoderConfig) -> dict[str, tuple[int, ...]]:
        if config.image_size % config.patch_size:
            raise ContractViolation(
                f"image_size {config.image_size} not divisible by patch_size {config.patch_size}")
        shapes = {
            "patch_embed": (3 * config.patch_size ** 2, config.width),
            "patch_bias": (config.width,),
            "pos_embed": (config.n_patches, config.width),
        }
        for i in range(config.layers):
            shapes.update(_block_shapes(f"block{i}", config.width))
        shapes["proj"] = (config.width, config.dim)
        return shapes

    def patchify(self, pixels: np.ndarray) -> np.ndarray:
        cfg = self.config
        s, p = cfg.image_size, cfg.patch_size
        if pixels.shape[-3:] != (3, s, s):
            raise ContractViolation(
                f"encode_image: expected pixels of shape (3, {s}, {s}), got {pixels.shape[-3:]}")
        lead = pixels.shape[:-3]
        g = s // p
        x = pixels.reshape(lead + (3, g, p, g, p))
        # -> (..., gy, gx, c, py, px) -> (..., patches, 3*p*p)
        nd = len(lead)
        x = np.transpose(x, tuple(range(nd)) + tuple(nd + a for a in (1, 3, 0, 2, 4)))
        return x.reshape(lead + (g * g, 3 * p * p))

    def encode(self, pixels) -> Tensor:
        """(3, S, S) -> (dim,), or batched (N, 3, S, S) -> (N, dim)."""
        pixels = pixels.data if isinstance(pixels, Tensor) else np.asarray(pixels)
        w = self.weights
        x = Tensor(self.patchify(pixels.astype(self.dtype, copy=False)))
        x = x @ w["patch_embed"] + w["patch_bias"] + w["pos_embed"]
        for i in range(self.config.layers):
            x = _block(x, w, f"block{i}")
        return G.mean(x, axis=-2) @ w["proj"]


class TextEncoder(_FrozenEncoder):
    """Token embeddings, transformer blocks, last-token pooling, projection."""

    config: TextEncoderConfig

    @staticmethod
    def weight_shapes(config: TextEncoderConfig) -> dict[str, tuple[int, ...]]:
        shapes = {
            "token_embed": (config.vocab_size, config.dim),
            "pos_embed": (config.context_length, config.dim),
        }
        for i in range(config.layers):
            shapes.update(_block_shapes(f"block{i}", config.dim))
        shapes["proj"] = (config.dim, config.dim)
        return shapes

    @property
    def token_embedding(self) -> Parameter:
        return self.weights["token_embed"]

    def embed(self, ids) -> Tensor:
        return G.gather(self.token_embedding, ids)

    def transformer(self, embeddings: Tensor) -> Tensor:
        """Run the blocks; returns per-position outputs of the final block."""
        embeddings = G.as_tensor(embeddings)
        t = embeddings.shape[-2] if embeddings.ndim >= 2 else 0
        if embeddings.ndim < 2 or t < 1:
            raise ContractViolation(f"encode_text: need a (..., T, d) sequence, got {embeddings.shape}")
        if t > self.config.context_length:
            raise ContractViolation(
                f"encode_text: sequence length {t} exceeds context length {self.config.context_length}")
        if embeddings.shape[-1] != self.config.dim:
            raise ContractViolation(
                f"encode_text: embedding width {embeddings.shape[-1]} != dim {self.config.dim}")
        x = embeddings + self.weights["pos_embed"][:t]
        for i in range(self.config.layers):
            x = _block(x, self.weights, f"block{i}")
        return x

    def encode(self, embeddings) -> Tensor:
        """(T, d) -> (d,), or batched (..., T, d) -> (..., d)."""
        x = self.transformer(embeddings)
        return x[..., -1, :] @ self.weights["proj"]

    def encode_ids(self, ids) -> Tensor:
        return self.encode(self.embed(ids))


@dataclass
class DualEncoder:
    image: ImageEncoder
    text: TextEncoder

    @classmethod
    def init(cls, image_config: ImageEncoderConfig, text_config: TextEncoderConfig,
             seed: int, dtype=np.float32) -> "DualEncoder":
        if image_config.dim != text_config.dim:
            raise ContractViolation(
                f"encoder output dims differ: image {image_config.dim}, text {text_config.dim}")
        seeds = np.random.SeedSequence(seed).spawn(2)
        return cls(ImageEncoder.init(image_config, seeds[0], dtype),
                   TextEncoder.init(text_config, seeds[1], dtype))

    @property
    def dim(self) -> int:
        return self.text.config.dim

    def astype(self, dtype) -> "DualEncoder":
        return DualEncoder(self.image.astype(dtype), self.text.astype(dtype))

    def named_weights(self) -> dict[str, np.ndarray]:
        out = {f"image.{k}": v for k, v in self.image.named_weights().items()}
        out.update({f"text.{k}": v for k, v in self.text.named_weights().items()})
        return out

    def parameters(self) -> list[Parameter]:
        return self.image.parameters() + self.text.parameters()

    def save_weights(self, target) -> None:
        save_archive(target, self.named_weights())

    @classmethod
    def load_weights(cls, source, image_config: ImageEncoderConfig,
                     text_config: TextEncoderConfig, dtype=np.float32) -> "DualEncoder":
        tensors = load_archive(source)
        image_w = {k[6:]: v for k, v in tensors.items() if k.startswith("image.")}
        text_w = {k[5:]: v for k, v in tensors.items() if k.startswith("text.")}
        stray = [k for k in tensors if not k.startswith(("image.", "text."))]
        problems = [f"unexpected tensor {k!r}" for k in stray]
        for prefix, enc_cls, cfg, w in (("image.", ImageEncoder, image_config, image_w),
                                        ("text.", TextEncoder, text_config, text_w)):
            try:
                enc_cls(cfg, w, dtype)
            except ArchiveError as exc:
                problems.append(f"{prefix[:-1]}: {exc}")
        if problems:
            raise ArchiveError("; ".join(problems))
        return cls(ImageEncoder(image_config, image_w, dtype), TextEncoder(text_config, text_w, dtype))


# ---------------------------------------------------------------------------
# freeze verification


@dataclass(frozen=True)
class FrozenCheck:
    passed: bool
    first_mismatch: str | None = None

    def __bool__(self) -> bool:
        return self.passed


def snapshot(encoder) -> dict[str, np.ndarray]:
    return {name: value.copy() for name, value in encoder.named_weights().items()}


def assert_frozen(encoder, snap: Mapping[str, np.ndarray]) -> FrozenCheck:
    """Bit-exact comparison of every weight against a pre-training snapshot."""
    current = encoder.named_weights()
    for name in sorted(set(snap) | set(current)):
        a, b = snap.get(name), current.get(name)
        if a is None or b is None or a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
            return FrozenCheck(False, name)
    return FrozenCheck(True)
