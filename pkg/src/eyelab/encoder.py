"""Patch-token transformer encoder.

Images are cut into non-overlapping patches in raster order, linearly
embedded, prefixed with a learned summary token, offset by learned
positional embeddings, and passed through pre-norm blocks:

    x = x + attention(norm(x));  x = x + mlp(norm(x))

with one final normalization. The summary token feeds whole-image heads;
the patch tokens keep the spatial grid for dense heads.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_container, save_container
from .errors import (
    DataError,
    DimMismatch,
    IndivisibleImage,
    InvalidSpec,
    LayerOutOfRange,
    NonFiniteActivation,
    ShapeMismatch,
)
from .hashing import digest_arrays, digest_json

__all__ = [
    "EncoderConfig",
    "EncoderState",
    "EmbeddingSet",
    "init_encoder",
    "patchify",
    "layer_norm",
    "encoder_forward",
    "encode",
    "encode_batch",
    "attention_maps",
    "save_checkpoint",
    "load_checkpoint",
]

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    embed_dim: int = 192
    depth: int = 6
    n_heads: int = 6
    image_size: int = 128
    in_channels: int = 1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("patch_size", "embed_dim", "depth", "n_heads", "image_size", "in_channels"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise IndivisibleImage(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.n_heads != 0:
            raise DimMismatch(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.mlp_ratio <= 0:
            raise InvalidSpec(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


@dataclass
class EmbeddingSet:
    """Encoder output split by role: one summary vector and the patch grid."""

    cls: np.ndarray  # (B, D)
    patches: np.ndarray  # (B, N, D)
    grid: tuple[int, int]


def init_encoder(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d = config.embed_dim

    def w(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    patch_dim = config.patch_size * config.patch_size * config.in_channels
    params: dict[str, Tensor] = {
        "patch_embed/w": w(patch_dim, d),
        "patch_embed/b": zeros(d),
        "cls_token": w(1, 1, d),
        "pos_embed": w(1, config.n_tokens, d),
    }
    for i in range(config.depth):
        pre = f"block{i}"
        params[f"{pre}/ln1/gamma"] = ones(d)
        params[f"{pre}/ln1/beta"] = zeros(d)
        params[f"{pre}/attn/wq"] = w(d, d)
        params[f"{pre}/attn/bq"] = zeros(d)
        params[f"{pre}/attn/wk"] = w(d, d)
        params[f"{pre}/attn/bk"] = zeros(d)
        params[f"{pre}/attn/wv"] = w(d, d)
        params[f"{pre}/attn/bv"] = zeros(d)
        params[f"{pre}/attn/wo"] = w(d, d)
        params[f"{pre}/attn/bo"] = zeros(d)
        params[f"{pre}/ln2/gamma"] = ones(d)
        params[f"{pre}/ln2/beta"] = zeros(d)
        params[f"{pre}/mlp/w1"] = w(d, config.mlp_dim)
        params[f"{pre}/mlp/b1"] = zeros(config.mlp_dim)
        params[f"{pre}/mlp/w2"] = w(config.mlp_dim, d)
        params[f"{pre}/mlp/b2"] = zeros(d)
    params["final/ln/gamma"] = ones(d)
    params["final/ln/beta"] = zeros(d)
    return params


@dataclass
class EncoderState:
    config: EncoderConfig
    params: dict[str, Tensor]
    modality: str | None = None
    meta: dict = field(default_factory=dict)

    def digest(self) -> str:
        arrays = {k: v.data for k, v in self.params.items()}
        return digest_arrays(arrays, extra=digest_json(asdict(self.config)))

    def copy(self) -> "EncoderState":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return EncoderState(config=self.config, params=params, modality=self.modality,
                            meta=copy.deepcopy(self.meta))

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag


def new_encoder(config: EncoderConfig, seed: int, modality: str | None = None) -> EncoderState:
    return EncoderState(config=config, params=init_encoder(config, seed), modality=modality)


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, patch*patch*C), patches in raster order."""
    if images.ndim != 4:
        raise ShapeMismatch(f"expected (B, H, W, C), got {images.shape}")
    b, h, w, c = images.shape
    if h % patch_size or w % patch_size:
        raise IndivisibleImage(f"image {h}x{w} not divisible by patch {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gamma + beta


def _attention(x: Tensor, params: Mapping[str, Tensor], pre: str, config: EncoderConfig):
    b, t, d = x.shape
    nh, hd = config.n_heads, config.head_dim

    def heads(z: Tensor) -> Tensor:
        return z.reshape(b, t, nh, hd).transpose(0, 2, 1, 3)  # (B, H, T, hd)

    q = heads(x @ params[f"{pre}/attn/wq"] + params[f"{pre}/attn/bq"])
    k = heads(x @ params[f"{pre}/attn/wk"] + params[f"{pre}/attn/bk"])
    v = heads(x @ params[f"{pre}/attn/wv"] + params[f"{pre}/attn/bv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(hd))
    attn = ad.softmax(scores, axis=-1)  # (B, H, T, T)
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = out @ params[f"{pre}/attn/wo"] + params[f"{pre}/attn/bo"]
    return out, attn


def encoder_forward(
    params: Mapping[str, Tensor],
    images: np.ndarray | Tensor,
    config: EncoderConfig,
    collect_attention: bool = False,
) -> tuple[Tensor, list[np.ndarray]]:
    """Full forward pass. Returns tokens (B, N+1, D) and, when asked,
    one (B, heads, N+1, N+1) attention array per block."""
    if isinstance(images, Tensor):
        raw = images.data
    else:
        raw = np.asarray(images, dtype=np.float64)
    if raw.ndim == 3:
        # (H, W, C) single image vs (B, H, W) grayscale batch
        if raw.shape == (config.image_size, config.image_size, config.in_channels):
            raw = raw[None, ...]
        else:
            raw = raw[..., None]
    b, h, w, c = raw.shape
    if h != config.image_size or w != config.image_size or c != config.in_channels:
        raise ShapeMismatch(
            f"encoder expects {config.image_size}x{config.image_size}x{config.in_channels}, "
            f"got {h}x{w}x{c}"
        )
    patches = patchify(raw, config.patch_size)
    x = Tensor(patches) @ params["patch_embed/w"] + params["patch_embed/b"]
    cls = ad.broadcast_to(params["cls_token"], (b, 1, config.embed_dim))
    x = ad.concat([cls, x], axis=1) + params["pos_embed"]

    maps: list[np.ndarray] = []
    for i in range(config.depth):
        pre = f"block{i}"
        normed = layer_norm(x, params[f"{pre}/ln1/gamma"], params[f"{pre}/ln1/beta"])
        attn_out, attn = _attention(normed, params, pre, config)
        if collect_attention:
            maps.append(attn.data.copy())
        x = x + attn_out
        normed = layer_norm(x, params[f"{pre}/ln2/gamma"], params[f"{pre}/ln2/beta"])
        hdn = ad.gelu(normed @ params[f"{pre}/mlp/w1"] + params[f"{pre}/mlp/b1"])
        x = x + (hdn @ params[f"{pre}/mlp/w2"] + params[f"{pre}/mlp/b2"])
    x = layer_norm(x, params["final/ln/gamma"], params["final/ln/beta"])
    return x, maps


def encode(state: EncoderState, images: np.ndarray, check_finite: bool = True) -> EmbeddingSet:
    """Inference-mode embeddings for a batch of images."""
    with ad.no_grad():
        tokens, _ = encoder_forward(state.params, images, state.config)
    data = tokens.data
    if check_finite and not np.all(np.isfinite(data)):
        raise NonFiniteActivation("encoder produced non-finite embeddings")
    g = state.config.grid
    return EmbeddingSet(cls=data[:, 0, :], patches=data[:, 1:, :], grid=(g, g))


def encode_batch(state: EncoderState, images: np.ndarray, batch_size: int = 32) -> EmbeddingSet:
    parts = [encode(state, images[i:i + batch_size])
             for i in range(0, len(images), batch_size)]
    g = state.config.grid
    return EmbeddingSet(
        cls=np.concatenate([p.cls for p in parts], axis=0),
        patches=np.concatenate([p.patches for p in parts], axis=0),
        grid=(g, g),
    )


def attention_maps(state: EncoderState, images: np.ndarray, layer: int = -1) -> np.ndarray:
    """Softmax attention of one block: (B, heads, tokens, tokens)."""
    depth = state.config.depth
    if not (-depth <= layer < depth):
        raise LayerOutOfRange(f"layer {layer} outside [-{depth}, {depth})")
    with ad.no_grad():
        _, maps = encoder_forward(state.params, images, state.config, collect_attention=True)
    return maps[layer]


def save_checkpoint(state: EncoderState, path: str | Path, extra_meta: dict | None = None) -> Path:
    meta = {
        "kind": "encoder",
        "config": asdict(state.config),
        "modality": state.modality,
        "digest": state.digest(),
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {k: v.data for k, v in state.params.items()}
    return save_container(path, meta, arrays)


def load_checkpoint(path: str | Path) -> EncoderState:
    meta, arrays = load_container(path)
    if meta.get("kind") != "encoder":
        raise DataError(f"{path} holds {meta.get('kind')!r}, expected an encoder")
    config = EncoderConfig(**meta["config"])
    expected = set(init_encoder(config, seed=0))
    if set(arrays) != expected:
        missing = expected - set(arrays)
        extra = set(arrays) - expected
        raise DataError(
            f"{path}: weight names do not match config (missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]})"
        )
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    state = EncoderState(config=config, params=params, modality=meta.get("modality"),
                         meta={k: v for k, v in meta.items()
                               if k not in ("kind", "config", "modality")})
    return state
