"""Attention-map explainability for encoder decisions.

The summary token's attention row says which patches fed the embedding.
``head_attention`` extracts that row per head at one block, drops the
self entry, renormalizes over patches, and reshapes to the patch grid;
the merged map is the plain mean over heads. ``attention_evolution``
tracks how much of that mass sits on bright structures across a series
of pretraining checkpoints.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import EncoderState, attention_maps, load_checkpoint
from .errors import ShapeMismatch, UnorderedCheckpoints
from .imaging import bilinear_resize, heat_colormap, save_png, to_uint8
from .records import Manifest, load_record_image

__all__ = [
    "AttentionMapSet",
    "head_attention",
    "foreground_mass",
    "attention_evolution",
    "EvolutionResult",
    "export_overlay",
    "export_attention",
]


@dataclass
class AttentionMapSet:
    """Per-head and merged summary-token attention on the patch grid."""

    per_head: np.ndarray  # (n_heads, G, G), each head sums to 1
    merged: np.ndarray  # (G, G), mean over heads
    layer: int
    renormalized: bool
    source: tuple[str, str]  # (encoder digest prefix, description)

    @property
    def n_heads(self) -> int:
        return self.per_head.shape[0]


def head_attention(
    encoder: EncoderState,
    image: np.ndarray,
    layer: int = -1,
    description: str = "",
) -> AttentionMapSet:
    """Summary-token attention for one image at one block (default: last)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise ShapeMismatch(f"expected one (H, W[, C]) image, got shape {img.shape}")
    maps = attention_maps(encoder, img[None], layer=layer)[0]  # (heads, T, T)
    cls_row = maps[:, 0, 1:]  # attention from the summary token to each patch
    totals = cls_row.sum(axis=-1, keepdims=True)
    per_head = cls_row / np.where(totals <= 0, 1.0, totals)
    g = encoder.config.grid
    per_head = per_head.reshape(-1, g, g)
    merged = per_head.mean(axis=0)
    return AttentionMapSet(
        per_head=per_head,
        merged=merged,
        layer=layer,
        renormalized=True,
        source=(encoder.digest()[:16], description),
    )


def foreground_mass(map_set: AttentionMapSet, image: np.ndarray, patch_size: int) -> float:
    """Fraction of merged attention on patches brighter than the image mean."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    g = map_set.merged.shape[0]
    if img.shape[0] // patch_size != g or img.shape[1] // patch_size != g:
        raise ShapeMismatch(
            f"image {img.shape} with patch {patch_size} does not give a {g}x{g} grid")
    patches = img.reshape(g, patch_size, g, patch_size).mean(axis=(1, 3))
    fg = patches > img.mean()
    if not fg.any():
        return 0.0
    return float(map_set.merged[fg].sum())


@dataclass
class EvolutionResult:
    steps: list[int]
    masses: list[float]
    checkpoints: list[str]
    csv_path: Path | None = None


def attention_evolution(
    checkpoint_paths: Sequence[str | Path],
    image: np.ndarray,
    layer: int = -1,
    out_csv: str | Path | None = None,
) -> EvolutionResult:
    """Foreground attention mass across an ordered checkpoint series.

    Checkpoints must carry strictly increasing ``pretrain_step``
    metadata; anything else raises ``UnorderedCheckpoints``.
    """
    if len(checkpoint_paths) < 2:
        raise UnorderedCheckpoints("an evolution needs at least 2 checkpoints")
    steps: list[int] = []
    masses: list[float] = []
    names: list[str] = []
    prev_step = None
    for path in checkpoint_paths:
        state = load_checkpoint(path)
        step = state.meta.get("pretrain_step")
        if step is None:
            raise UnorderedCheckpoints(f"{path} lacks a pretrain_step marker")
        step = int(step)
        if prev_step is not None and step <= prev_step:
            raise UnorderedCheckpoints(
                f"{path} has step {step}, not after {prev_step}; pass the series in order")
        prev_step = step
        map_set = head_attention(state, image, layer=layer, description=str(path))
        steps.append(step)
        masses.append(foreground_mass(map_set, image, state.config.patch_size))
        names.append(str(path))
    result = EvolutionResult(steps=steps, masses=masses, checkpoints=names)
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "checkpoint", "foreground_mass"])
            for s, name, m in zip(steps, names, masses):
                writer.writerow([s, name, f"{m:.6f}"])
        result.csv_path = out_csv
    return result


def export_overlay(
    image: np.ndarray,
    map_set: AttentionMapSet,
    path: str | Path,
    alpha: float = 0.5,
    merge: str = "mean",
) -> Path:
    """Write the attention map blended over the image as a color PNG.

    ``merge="max"`` uses the per-pixel maximum across heads instead of
    the stored head mean.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    h, w = img.shape
    if merge == "mean":
        grid_map = map_set.merged
    elif merge == "max":
        grid_map = map_set.per_head.max(axis=0)
    else:
        raise ValueError(f"merge must be 'mean' or 'max', got {merge!r}")
    up = bilinear_resize(grid_map[..., None], h, w)[..., 0]
    lo, hi = float(up.min()), float(up.max())
    norm = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    heat = heat_colormap(norm)
    gray = np.repeat(np.clip(img, 0.0, 1.0)[..., None], 3, axis=-1)
    out = (1.0 - alpha) * gray + alpha * heat
    path = Path(path)
    save_png(to_uint8(out), path)
    return path


def export_attention(map_set: AttentionMapSet, path_prefix: str | Path) -> tuple[Path, Path]:
    """Write raw maps (.npz) plus a JSON description next to them."""
    prefix = Path(path_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    npz_path = prefix.with_suffix(".npz")
    json_path = prefix.with_suffix(".json")
    with open(npz_path, "wb") as fh:
        np.savez(fh, per_head=map_set.per_head, merged=map_set.merged)
    json_path.write_text(json.dumps({
        "layer": map_set.layer,
        "renormalized": map_set.renormalized,
        "n_heads": int(map_set.n_heads),
        "grid": [int(map_set.merged.shape[0]), int(map_set.merged.shape[1])],
        "source": list(map_set.source),
    }, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return npz_path, json_path


def record_attention(
    encoder: EncoderState, manifest: Manifest, record_id: str, layer: int = -1
) -> tuple[AttentionMapSet, np.ndarray]:
    """Attention maps for one manifest record, returning the image too."""
    rec = manifest.by_id().get(record_id)
    if rec is None:
        from .errors import DataError
        raise DataError(f"record {record_id!r} not in manifest")
    img = load_record_image(manifest, rec)
    return head_attention(encoder, img, layer=layer, description=record_id), img
