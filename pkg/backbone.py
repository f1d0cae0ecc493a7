#!/usr/bin/env python3
"""
Frozen miniature vision transformer.

Provides the embedding layer (class token + patch tokens + positions), the
query extractor (class-token output of the full encoder) and the encoder pass
over a prompt-extended token sequence. All parameters are created once from a
seed, marked read-only and never receive gradients; gradients still flow
through the encoder into prompt tokens.
"""

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

import tensorcore as tc
from tensorcore import Tensor

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"CPBB"
SNAPSHOT_VERSION = 1


class BackboneConfigError(ValueError):
    """Invalid backbone configuration or input dimensions."""


class SnapshotError(ValueError):
    """Unreadable or mismatched weight snapshot."""


@dataclass
class BackboneConfig:
    image_side: int = 32
    patch_side: int = 8
    channels: int = 3
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    prompt_tokens: int = 15
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.image_side <= 0 or self.patch_side <= 0:
            raise BackboneConfigError("image_side and patch_side must be positive")
        if self.image_side % self.patch_side != 0:
            raise BackboneConfigError(
                f"image_side {self.image_side} is not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.n_heads != 0:
            raise BackboneConfigError(
                f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.mlp_ratio <= 0 or self.channels < 1:
            raise BackboneConfigError("n_layers, mlp_ratio and channels must be positive")
        if self.prompt_tokens < 0:
            raise BackboneConfigError("prompt_tokens must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise BackboneConfigError(f"unsupported dtype {self.dtype!r}")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch_side) ** 2

    @property
    def n_tokens(self) -> int:
        """Class token plus patch tokens."""
        return self.n_patches + 1


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal samples redrawn until they fall within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


class FrozenEncoder:
    """Seeded, immutable transformer encoder shared by query extraction and prompting."""

    def __init__(self, config: BackboneConfig, params: Optional[Dict[str, np.ndarray]] = None):
        config.validate()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        arrays = params if params is not None else self._init_params(config)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, shape in self._param_shapes(config).items():
            if name not in arrays:
                raise SnapshotError(f"missing parameter {name}")
            value = np.asarray(arrays[name], dtype=self.dtype)
            if value.shape != shape:
                raise SnapshotError(f"parameter {name} has shape {value.shape}, expected {shape}")
            tensor = Tensor(value.copy(), requires_grad=False, name=name)
            tensor.data.setflags(write=False)
            self.params[name] = tensor
        self._checksum = self.checksum()

    # Parameters ---------------------------------------------------------------
    @staticmethod
    def _param_shapes(config: BackboneConfig) -> "OrderedDict[str, tuple]":
        d = config.embed_dim
        hidden = int(round(d * config.mlp_ratio))
        patch_dim = config.channels * config.patch_side ** 2
        shapes = OrderedDict()
        shapes["patch.weight"] = (patch_dim, d)
        shapes["patch.bias"] = (d,)
        shapes["cls_token"] = (d,)
        shapes["pos_embed"] = (config.n_tokens, d)
        shapes["prompt_pos"] = (config.prompt_tokens, d)
        for i in range(config.n_layers):
            p = f"blocks.{i}."
            shapes[p + "ln1.gamma"] = (d,)
            shapes[p + "ln1.beta"] = (d,)
            shapes[p + "attn.qkv.weight"] = (d, 3 * d)
            shapes[p + "attn.qkv.bias"] = (3 * d,)
            shapes[p + "attn.out.weight"] = (d, d)
            shapes[p + "attn.out.bias"] = (d,)
            shapes[p + "ln2.gamma"] = (d,)
            shapes[p + "ln2.beta"] = (d,)
            shapes[p + "mlp.fc1.weight"] = (d, hidden)
            shapes[p + "mlp.fc1.bias"] = (hidden,)
            shapes[p + "mlp.fc2.weight"] = (hidden, d)
            shapes[p + "mlp.fc2.bias"] = (d,)
        shapes["norm.gamma"] = (d,)
        shapes["norm.beta"] = (d,)
        return shapes

    @classmethod
    def _init_params(cls, config: BackboneConfig) -> Dict[str, np.ndarray]:
        rng = np.random.default_rng(config.seed)
        arrays = {}
        for name, shape in cls._param_shapes(config).items():
            if name.endswith(".gamma"):
                arrays[name] = np.ones(shape)
            elif name.endswith(".bias") or name.endswith(".beta"):
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = truncated_normal(rng, shape)
        return arrays

    def checksum(self) -> str:
        """SHA-256 over every parameter array in declaration order."""
        digest = hashlib.sha256()
        for name, tensor in self.params.items():
            digest.update(name.encode())
            digest.update(tensor.data.tobytes())
        return digest.hexdigest()

    def verify_frozen(self) -> bool:
        return self.checksum() == self._checksum

    # Forward ----------------------------------------------------------------
    def _pixels(self, image) -> np.ndarray:
        x = image.data if isinstance(image, Tensor) else np.asarray(image)
        cfg = self.config
        expected = (cfg.channels, cfg.image_side, cfg.image_side)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != expected:
            raise BackboneConfigError(f"image shape {tuple(x.shape)} does not match {expected}")
        return x.astype(self.dtype, copy=False)

    def embed(self, image) -> Tensor:
        """Class token followed by position-encoded patch tokens.

        Args:
            image: [C, H, W] or a batch [B, C, H, W], pixel values in [0, 1].

        Returns:
            Tensor [T+1, D] (or [B, T+1, D] for a batch).
        """
        single = (image.ndim if isinstance(image, Tensor) else np.ndim(image)) == 3
        x = self._pixels(image)
        cfg = self.config
        b, c = x.shape[0], cfg.channels
        g = cfg.image_side // cfg.patch_side
        p = cfg.patch_side
        patches = x.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, g * g, p * p * c)
        tokens = patches @ self.params["patch.weight"].data + self.params["patch.bias"].data
        cls = np.broadcast_to(self.params["cls_token"].data, (b, 1, cfg.embed_dim))
        seq = np.concatenate([cls, tokens], axis=1) + self.params["pos_embed"].data
        return Tensor(seq[0] if single else seq, dtype=self.dtype)

    def _attention(self, x: Tensor, prefix: str) -> Tensor:
        b, n, d = x.shape
        h = self.config.n_heads
        dh = d // h
        qkv = tc.matmul(x, self.params[prefix + "attn.qkv.weight"]) + self.params[prefix + "attn.qkv.bias"]
        qkv = tc.transpose(tc.reshape(qkv, (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        mixed = tc.matmul(tc.softmax(scores, axis=-1), v)
        mixed = tc.reshape(tc.transpose(mixed, (0, 2, 1, 3)), (b, n, d))
        return tc.matmul(mixed, self.params[prefix + "attn.out.weight"]) + self.params[prefix + "attn.out.bias"]

    def _mlp(self, x: Tensor, prefix: str) -> Tensor:
        hidden = tc.gelu(tc.matmul(x, self.params[prefix + "mlp.fc1.weight"]) + self.params[prefix + "mlp.fc1.bias"])
        return tc.matmul(hidden, self.params[prefix + "mlp.fc2.weight"]) + self.params[prefix + "mlp.fc2.bias"]

    def encode(self, x: Tensor) -> Tensor:
        """Run every block and the final norm over tokens [B, N, D] or [N, D]."""
        single = x.ndim == 2
        if single:
            x = tc.reshape(x, (1,) + x.shape)
        for i in range(self.config.n_layers):
            prefix = f"blocks.{i}."
            x = x + self._attention(
                tc.layer_norm(x, self.params[prefix + "ln1.gamma"], self.params[prefix + "ln1.beta"]), prefix)
            x = x + self._mlp(
                tc.layer_norm(x, self.params[prefix + "ln2.gamma"], self.params[prefix + "ln2.beta"]), prefix)
        x = tc.layer_norm(x, self.params["norm.gamma"], self.params["norm.beta"])
        return tc.reshape(x, x.shape[1:]) if single else x

    def extract_query(self, image) -> Tensor:
        """q(x): class-token output of the prompt-free encoder; never records gradients."""
        with tc.no_grad():
            out = self.encode(self.embed(image))
            return out[..., 0, :]

    def encode_extended(self, x_p: Tensor, n_prompt_tokens: Optional[int] = None) -> Tensor:
        """Encode a prompt-extended sequence [prompts; x_e].

        Prompt tokens receive the frozen prompt position encodings before the
        sequence enters the encoder; x_e already carries its own.

        Args:
            x_p: [P + T + 1, D] or [B, P + T + 1, D].
            n_prompt_tokens: P; defaults to the configured prompt token count.
        """
        cfg = self.config
        n_prompt = cfg.prompt_tokens if n_prompt_tokens is None else n_prompt_tokens
        if n_prompt > cfg.prompt_tokens:
            raise BackboneConfigError(
                f"{n_prompt} prompt tokens exceed the {cfg.prompt_tokens} prompt positions")
        expected = n_prompt + cfg.n_tokens
        if x_p.ndim not in (2, 3) or x_p.shape[-2] != expected or x_p.shape[-1] != cfg.embed_dim:
            raise BackboneConfigError(
                f"extended sequence shape {x_p.shape} does not match "
                f"[{expected}, {cfg.embed_dim}] ({n_prompt} prompt tokens)")
        pos = np.concatenate([self.params["prompt_pos"].data[:n_prompt],
                              np.zeros((cfg.n_tokens, cfg.embed_dim), dtype=self.dtype)])
        return self.encode(x_p + Tensor(pos, dtype=self.dtype))

    # Snapshots --------------------------------------------------------------
    def save_weights(self, path: Union[str, Path]) -> None:
        """Header with the config, then parameters as little-endian float32."""
        header = json.dumps({"config": asdict(self.config), "names": list(self.params)}).encode()
        with open(path, "wb") as f:
            f.write(SNAPSHOT_MAGIC)
            f.write(struct.pack("<II", SNAPSHOT_VERSION, len(header)))
            f.write(header)
            for tensor in self.params.values():
                f.write(tensor.data.astype("<f4").tobytes())

    @classmethod
    def load_weights(cls, path: Union[str, Path]) -> "FrozenEncoder":
        raw = Path(path).read_bytes()
        if len(raw) < 12 or raw[:4] != SNAPSHOT_MAGIC:
            raise SnapshotError(f"{path} is not a backbone snapshot")
        version, header_len = struct.unpack("<II", raw[4:12])
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        try:
            header = json.loads(raw[12:12 + header_len].decode())
            config = BackboneConfig(**header["config"])
        except (ValueError, TypeError, KeyError) as exc:
            raise SnapshotError(f"corrupt snapshot header: {exc}") from None
        offset = 12 + header_len
        arrays = {}
        for name, shape in cls._param_shapes(config).items():
            count = int(np.prod(shape))
            end = offset + 4 * count
            if end > len(raw):
                raise SnapshotError(f"snapshot truncated inside parameter {name}")
            arrays[name] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(shape)
            offset = end
        if offset != len(raw):
            raise SnapshotError("snapshot has trailing bytes")
        logger.info("Loaded backbone snapshot %s", path)
        return cls(config, arrays)
