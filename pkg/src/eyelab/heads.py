"""Task decoders over encoder embeddings.

Every head is a small parameter set living apart from any encoder, so
one trained head can serve embeddings from any modality's encoder:
nothing in a head knows where its inputs came from. Whole-image heads
(classify, regress, forecast) read the summary embedding; dense heads
(segment, landmarks) read the patch grid.

Dense heads use two paths from each patch token: a per-patch class
logit broadcast over the patch footprint (coarse) plus a learned
sub-patch refinement (fine), summed into full-resolution logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_container, save_container
from .encoder import EmbeddingSet
from .errors import DataError, DimMismatch, ShapeMismatch
from .hashing import digest_arrays, digest_json

__all__ = [
    "LANDMARK_COUNT",
    "ClassifierHead",
    "SegmenterHead",
    "LandmarkHead",
    "RegressorHead",
    "ForecastHead",
    "init_classifier",
    "init_segmenter",
    "init_landmark_head",
    "init_regressor",
    "init_forecaster",
    "classify_logits",
    "classify_probs",
    "segment_logits",
    "segment",
    "landmark_logits",
    "detect_landmarks",
    "soft_argmax",
    "regress_biomarkers",
    "forecast_logit",
    "forecast_prob",
    "head_digest",
    "save_head",
    "load_head",
]

LANDMARK_COUNT = 3
FORECAST_DELTA_SCALE = 1000.0  # days; visit gaps land near unit scale


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, 9001)))


def _linear(rng: np.random.Generator, n_in: int, n_out: int) -> tuple[Tensor, Tensor]:
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True)
    return w, b


# --- head types -------------------------------------------------------------

@dataclass
class ClassifierHead:
    embed_dim: int
    n_classes: int
    params: dict[str, Tensor]
    head_type: str = "classifier"

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "n_classes": self.n_classes}


@dataclass
class SegmenterHead:
    embed_dim: int
    n_classes: int
    grid: int
    upsample: int  # output is (grid*upsample)^2 pixels
    params: dict[str, Tensor]
    head_type: str = "segmenter"

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "n_classes": self.n_classes,
                "grid": self.grid, "upsample": self.upsample}


@dataclass
class LandmarkHead:
    embed_dim: int
    grid: int
    upsample: int
    n_points: int = LANDMARK_COUNT
    params: dict[str, Tensor] = None  # set by the initializer
    head_type: str = "landmark"

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "grid": self.grid,
                "upsample": self.upsample, "n_points": self.n_points}


@dataclass
class RegressorHead:
    embed_dim: int
    n_outputs: int
    hidden_dim: int
    target_mu: np.ndarray  # output de-standardization, fixed at fit time
    target_sigma: np.ndarray
    params: dict[str, Tensor] = None
    head_type: str = "regressor"

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "n_outputs": self.n_outputs,
                "hidden_dim": self.hidden_dim}


@dataclass
class ForecastHead:
    embed_dim: int
    hidden_dim: int
    delta_scale: float = FORECAST_DELTA_SCALE
    params: dict[str, Tensor] = None
    head_type: str = "forecast"

    def config(self) -> dict:
        return {"embed_dim": self.embed_dim, "hidden_dim": self.hidden_dim,
                "delta_scale": self.delta_scale}


AnyHead = Union[ClassifierHead, SegmenterHead, LandmarkHead, RegressorHead, ForecastHead]


# --- initializers -----------------------------------------------------------

def init_classifier(embed_dim: int, n_classes: int, seed: int) -> ClassifierHead:
    rng = _rng(seed)
    w, b = _linear(rng, embed_dim, n_classes)
    return ClassifierHead(embed_dim, n_classes, {"w": w, "b": b})


def init_segmenter(
    embed_dim: int, n_classes: int, grid: int, upsample: int, seed: int
) -> SegmenterHead:
    rng = _rng(seed)
    wc, bc = _linear(rng, embed_dim, n_classes)
    wf, bf = _linear(rng, embed_dim, upsample * upsample * n_classes)
    return SegmenterHead(embed_dim, n_classes, grid, upsample,
                         {"w_coarse": wc, "b_coarse": bc, "w_fine": wf, "b_fine": bf})


def init_landmark_head(embed_dim: int, grid: int, upsample: int, seed: int) -> LandmarkHead:
    rng = _rng(seed)
    wc, bc = _linear(rng, embed_dim, LANDMARK_COUNT)
    wf, bf = _linear(rng, embed_dim, upsample * upsample * LANDMARK_COUNT)
    head = LandmarkHead(embed_dim, grid, upsample)
    head.params = {"w_coarse": wc, "b_coarse": bc, "w_fine": wf, "b_fine": bf}
    return head


def init_regressor(
    embed_dim: int, n_outputs: int, seed: int, hidden_dim: int = 64
) -> RegressorHead:
    rng = _rng(seed)
    w1, b1 = _linear(rng, embed_dim, hidden_dim)
    w2, b2 = _linear(rng, hidden_dim, n_outputs)
    head = RegressorHead(embed_dim, n_outputs, hidden_dim,
                         target_mu=np.zeros(n_outputs), target_sigma=np.ones(n_outputs))
    head.params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
    return head


def init_forecaster(embed_dim: int, seed: int, hidden_dim: int = 32) -> ForecastHead:
    rng = _rng(seed)
    w1, b1 = _linear(rng, embed_dim + 1, hidden_dim)
    w2, b2 = _linear(rng, hidden_dim, 1)
    head = ForecastHead(embed_dim, hidden_dim)
    head.params = {"w1": w1, "b1": b1, "w2": w2, "b2": b2}
    return head


# --- forward passes ---------------------------------------------------------

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def classify_logits(head: ClassifierHead, cls_emb) -> Tensor:
    x = _as_tensor(cls_emb)
    if x.shape[-1] != head.embed_dim:
        raise DimMismatch(f"head expects dim {head.embed_dim}, got {x.shape[-1]}")
    return x @ head.params["w"] + head.params["b"]


def classify_probs(head: ClassifierHead, cls_emb: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        logits = classify_logits(head, cls_emb).data
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _dense_logits(params: dict[str, Tensor], patches, grid: int, up: int, ch: int) -> Tensor:
    """(B, N, D) patch tokens -> (B, grid*up, grid*up, ch) logits."""
    x = _as_tensor(patches)
    b, n, _ = x.shape
    if n != grid * grid:
        raise ShapeMismatch(f"expected {grid * grid} patch tokens, got {n}")
    coarse = x @ params["w_coarse"] + params["b_coarse"]  # (B, N, ch)
    coarse = coarse.reshape(b, grid, grid, ch)
    coarse = ad.repeat_axis(ad.repeat_axis(coarse, up, axis=1), up, axis=2)
    fine = x @ params["w_fine"] + params["b_fine"]  # (B, N, up*up*ch)
    fine = fine.reshape(b, grid, grid, up, up, ch)
    fine = fine.transpose(0, 1, 3, 2, 4, 5).reshape(b, grid * up, grid * up, ch)
    return coarse + fine


def segment_logits(head: SegmenterHead, patches) -> Tensor:
    return _dense_logits(head.params, patches, head.grid, head.upsample, head.n_classes)


def segment(head: SegmenterHead, emb: EmbeddingSet) -> np.ndarray:
    """Hard class map (B, H, W) from an embedding set's patch grid."""
    if emb.grid != (head.grid, head.grid):
        raise ShapeMismatch(f"head grid {head.grid}, embeddings {emb.grid}")
    with ad.no_grad():
        logits = segment_logits(head, emb.patches).data
    return logits.argmax(axis=-1)


def landmark_logits(head: LandmarkHead, patches) -> Tensor:
    return _dense_logits(head.params, patches, head.grid, head.upsample, head.n_points)


def soft_argmax(heatmap: np.ndarray, logits: bool = False) -> tuple[float, float]:
    """Expected (x, y) under a 2D map normalized to a distribution.

    With ``logits=True`` the map goes through softmax first; otherwise it
    must be nonnegative with positive mass and is normalized by its sum.
    """
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeMismatch(f"heatmap must be 2D, got shape {h.shape}")
    if logits:
        z = h - h.max()
        p = np.exp(z)
        p /= p.sum()
    else:
        if (h < 0).any():
            raise DataError("nonnegative map expected; pass logits=True for raw scores")
        total = h.sum()
        if total <= 0:
            raise DataError("heatmap has no mass")
        p = h / total
    ys, xs = np.mgrid[0:h.shape[0], 0:h.shape[1]]
    x = float((p * xs).sum())
    y = float((p * ys).sum())
    x = min(max(x, 0.0), h.shape[1] - 1.0)
    y = min(max(y, 0.0), h.shape[0] - 1.0)
    return x, y


def detect_landmarks(head: LandmarkHead, emb: EmbeddingSet) -> np.ndarray:
    """(B, n_points, 2) soft-argmax coordinates as (x, y) pixels."""
    if emb.grid != (head.grid, head.grid):
        raise ShapeMismatch(f"head grid {head.grid}, embeddings {emb.grid}")
    with ad.no_grad():
        logits = landmark_logits(head, emb.patches).data
    b = logits.shape[0]
    out = np.empty((b, head.n_points, 2), dtype=np.float64)
    for i in range(b):
        for k in range(head.n_points):
            out[i, k] = soft_argmax(logits[i, :, :, k], logits=True)
    return out


def regress_biomarkers(head: RegressorHead, cls_emb, raw: bool = False):
    """Panel predictions in natural units (B, n_outputs).

    ``raw=True`` returns the standardized network output as a Tensor for
    training; otherwise a plain de-standardized array.
    """
    def run() -> Tensor:
        x = _as_tensor(cls_emb)
        h = ad.gelu(x @ head.params["w1"] + head.params["b1"])
        return h @ head.params["w2"] + head.params["b2"]

    if raw:
        return run()
    with ad.no_grad():
        z = run().data
    return z * head.target_sigma + head.target_mu


def forecast_logit(head: ForecastHead, cls_emb, delta_days) -> Tensor:
    """Progression logit from an embedding and the visit interval."""
    x = _as_tensor(cls_emb)
    d = np.asarray(delta_days, dtype=np.float64).reshape(-1, 1) / head.delta_scale
    if (d <= 0).any():
        raise DataError("delta_days must be positive")
    joint = ad.concat([x, Tensor(d)], axis=1)
    h = ad.gelu(joint @ head.params["w1"] + head.params["b1"])
    return (h @ head.params["w2"] + head.params["b2"]).reshape(-1)


def forecast_prob(head: ForecastHead, cls_emb: np.ndarray, delta_days) -> np.ndarray:
    with ad.no_grad():
        logit = forecast_logit(head, cls_emb, delta_days).data
    return 1.0 / (1.0 + np.exp(-logit))


# --- persistence ------------------------------------------------------------

def head_digest(head: AnyHead) -> str:
    arrays = {k: v.data for k, v in head.params.items()}
    if isinstance(head, RegressorHead):
        arrays = dict(arrays, target_mu=head.target_mu, target_sigma=head.target_sigma)
    return digest_arrays(arrays, extra=digest_json({"head_type": head.head_type,
                                                    **head.config()}))


def save_head(head: AnyHead, path: str | Path, extra_meta: dict | None = None) -> Path:
    meta = {"kind": "head", "head_type": head.head_type, "config": head.config(),
            "digest": head_digest(head)}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {k: v.data for k, v in head.params.items()}
    if isinstance(head, RegressorHead):
        arrays = dict(arrays, target_mu=head.target_mu, target_sigma=head.target_sigma)
    return save_container(path, meta, arrays)


def load_head(path: str | Path) -> AnyHead:
    meta, arrays = load_container(path)
    if meta.get("kind") != "head":
        raise DataError(f"{path} holds {meta.get('kind')!r}, expected a head")
    head_type = meta.get("head_type")
    cfg = meta.get("config", {})
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()
              if k not in ("target_mu", "target_sigma")}
    if head_type == "classifier":
        head: AnyHead = ClassifierHead(cfg["embed_dim"], cfg["n_classes"], params)
    elif head_type == "segmenter":
        head = SegmenterHead(cfg["embed_dim"], cfg["n_classes"], cfg["grid"],
                             cfg["upsample"], params)
    elif head_type == "landmark":
        head = LandmarkHead(cfg["embed_dim"], cfg["grid"], cfg["upsample"], cfg["n_points"])
        head.params = params
    elif head_type == "regressor":
        head = RegressorHead(cfg["embed_dim"], cfg["n_outputs"], cfg["hidden_dim"],
                             target_mu=arrays["target_mu"], target_sigma=arrays["target_sigma"])
        head.params = params
    elif head_type == "forecast":
        head = ForecastHead(cfg["embed_dim"], cfg["hidden_dim"], cfg.get(
            "delta_scale", FORECAST_DELTA_SCALE))
        head.params = params
    else:
        raise DataError(f"{path}: unknown head_type {head_type!r}")
    return head
