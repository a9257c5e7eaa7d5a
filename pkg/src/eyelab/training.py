"""Supervised fitting of task heads, frozen-encoder or joint.

The default path freezes the encoder: embeddings are computed once and
the head trains on them. ``finetune_task`` instead merges encoder and
head parameters into one optimizer and recomputes embeddings per batch.

``train_head_for_task`` / ``evaluate_task`` dispatch on the task name
used across the command-line surface:

    classify, segment-vessel, segment-layer, landmark, biomarker, forecast
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderState, encode_batch, encoder_forward
from .errors import (
    ConfigError,
    DataError,
    EmptyManifest,
    NonFiniteLoss,
    SingleClassTrainSet,
)
from .heads import (
    LANDMARK_COUNT,
    AnyHead,
    ClassifierHead,
    ForecastHead,
    LandmarkHead,
    RegressorHead,
    SegmenterHead,
    classify_logits,
    classify_probs,
    detect_landmarks,
    forecast_logit,
    forecast_prob,
    init_classifier,
    init_forecaster,
    init_landmark_head,
    init_regressor,
    init_segmenter,
    landmark_logits,
    regress_biomarkers,
    segment,
    segment_logits,
)
from .metrics import (
    accuracy,
    dice,
    f1_binary,
    landmark_error,
    biomarker_accuracy,
    macro_f1,
    ovr_auc,
    r_squared,
    roc_auc,
)
from .optim import Adam, clip_grad_norm, zero_grads
from .records import Manifest, load_record_image, load_record_mask, panel_names
from .toydata import ToyTask

__all__ = [
    "TrainConfig",
    "TASK_TO_TOY",
    "cross_entropy",
    "pixel_cross_entropy",
    "heatmap_targets",
    "heatmap_loss",
    "bce_with_logits",
    "fit_classifier",
    "evaluate_classifier",
    "fit_segmenter",
    "evaluate_segmenter",
    "fit_landmarker",
    "evaluate_landmarker",
    "fit_regressor",
    "evaluate_regressor",
    "fit_forecaster",
    "evaluate_forecaster",
    "assemble_task_arrays",
    "init_head_for_task",
    "train_head_for_task",
    "evaluate_task",
    "finetune_task",
]

TASK_TO_TOY = {
    "classify": ToyTask.CLASSIFY,
    "segment-vessel": ToyTask.SEGMENT_VESSEL,
    "segment-layer": ToyTask.SEGMENT_LAYER,
    "landmark": ToyTask.LANDMARK,
    "biomarker": ToyTask.BIOMARKER,
    "forecast": ToyTask.FORECAST,
}

HEATMAP_SIGMA = 2.0  # pixels; spread of the target blob around each point


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    steps: int = 300
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 10.0


def _batches(n: int, config: TrainConfig) -> Iterator[np.ndarray]:
    size = min(config.batch_size, n)
    for step in range(config.steps):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 3000, step)))
        yield rng.choice(n, size=size, replace=False)


def _check_finite(value: float, step: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss became {value} at step {step}")


# --- losses -----------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[-1])[np.asarray(labels)]
    return -(Tensor(onehot) * ad.log_softmax(logits, axis=-1)).sum(axis=-1).mean()


def pixel_cross_entropy(logits: Tensor, masks: np.ndarray) -> Tensor:
    n_classes = logits.shape[-1]
    onehot = np.eye(n_classes)[np.asarray(masks)]  # (B, H, W, C)
    return -(Tensor(onehot) * ad.log_softmax(logits, axis=-1)).sum(axis=-1).mean()


def heatmap_targets(points: np.ndarray, size: int, sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """Normalized Gaussian distributions (B, H, W, K) around (x, y) points."""
    pts = np.asarray(points, dtype=np.float64)
    b, k = pts.shape[0], pts.shape[1]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.empty((b, size, size, k))
    for i in range(b):
        for j in range(k):
            x0, y0 = pts[i, j]
            g = np.exp(-((xs - x0) ** 2 + (ys - y0) ** 2) / (2.0 * sigma**2))
            out[i, :, :, j] = g / g.sum()
    return out


def heatmap_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Cross-entropy per point between target distribution and softmax map."""
    b, h, w, k = logits.shape
    flat = logits.transpose(0, 3, 1, 2).reshape(b, k, h * w)
    logq = ad.log_softmax(flat, axis=-1)
    p = np.asarray(targets).transpose(0, 3, 1, 2).reshape(b, k, h * w)
    return -(Tensor(p) * logq).sum(axis=-1).mean()


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    y = np.asarray(targets, dtype=np.float64)
    return (ad.softplus(logits) - logits * Tensor(y)).mean()


# --- frozen-feature fits ----------------------------------------------------

def _run_fit(head: AnyHead, n: int, config: TrainConfig, loss_of) -> list[float]:
    opt = Adam(lr=config.lr)
    history: list[float] = []
    for step, idx in enumerate(_batches(n, config)):
        loss = loss_of(idx)
        value = loss.item()
        _check_finite(value, step)
        history.append(value)
        zero_grads(head.params)
        loss.backward()
        if config.grad_clip > 0:
            clip_grad_norm(head.params, config.grad_clip)
        opt.step(head.params)
    return history


def fit_classifier(
    head: ClassifierHead, features: np.ndarray, labels: np.ndarray, config: TrainConfig
) -> list[float]:
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise SingleClassTrainSet("classifier training set has a single class")
    feats = np.asarray(features, dtype=np.float64)
    return _run_fit(
        head, len(feats), config,
        lambda idx: cross_entropy(classify_logits(head, feats[idx]), labels[idx]),
    )


def evaluate_classifier(
    head: ClassifierHead, features: np.ndarray, labels: np.ndarray
) -> tuple[dict[str, float], dict]:
    probs = classify_probs(head, features)
    preds = probs.argmax(axis=-1)
    labels = np.asarray(labels)
    metrics: dict[str, float] = {
        "accuracy": accuracy(labels, preds),
        "macro_f1": macro_f1(labels, preds, head.n_classes),
    }
    aucs = ovr_auc(probs, labels)
    for c, a in enumerate(aucs):
        metrics[f"auc_class{c}"] = a
    metrics["mean_auc"] = float(np.mean(aucs))
    return metrics, {"probs": probs, "labels": labels, "preds": preds}


def fit_segmenter(
    head: SegmenterHead, patch_features: np.ndarray, masks: np.ndarray, config: TrainConfig
) -> list[float]:
    feats = np.asarray(patch_features, dtype=np.float64)
    masks = np.asarray(masks)
    return _run_fit(
        head, len(feats), config,
        lambda idx: pixel_cross_entropy(segment_logits(head, feats[idx]), masks[idx]),
    )


def evaluate_segmenter(
    head: SegmenterHead, patch_features: np.ndarray, masks: np.ndarray
) -> tuple[dict[str, float], dict]:
    with ad.no_grad():
        logits = segment_logits(head, np.asarray(patch_features, dtype=np.float64)).data
    preds = logits.argmax(axis=-1)
    masks = np.asarray(masks)
    per_class = [float(np.mean([dice(p, m, c) for p, m in zip(preds, masks)]))
                 for c in range(head.n_classes)]
    if head.n_classes == 2:
        headline = per_class[1]  # foreground overlap
    else:
        headline = float(np.mean(per_class))
    metrics = {"dice": headline}
    for c, d in enumerate(per_class):
        metrics[f"dice_class{c}"] = d
    return metrics, {"preds": preds, "masks": masks}


def fit_landmarker(
    head: LandmarkHead, patch_features: np.ndarray, points: np.ndarray, config: TrainConfig,
    sigma: float = HEATMAP_SIGMA,
) -> list[float]:
    feats = np.asarray(patch_features, dtype=np.float64)
    size = head.grid * head.upsample
    targets = heatmap_targets(points, size, sigma)
    return _run_fit(
        head, len(feats), config,
        lambda idx: heatmap_loss(landmark_logits(head, feats[idx]), targets[idx]),
    )


def evaluate_landmarker(
    head: LandmarkHead, patch_features: np.ndarray, points: np.ndarray
) -> tuple[dict[str, float], dict]:
    from .encoder import EmbeddingSet

    feats = np.asarray(patch_features, dtype=np.float64)
    emb = EmbeddingSet(cls=np.zeros((len(feats), head.embed_dim)), patches=feats,
                       grid=(head.grid, head.grid))
    preds = detect_landmarks(head, emb)
    points = np.asarray(points, dtype=np.float64)
    per_point = [landmark_error(preds[:, k], points[:, k]) for k in range(head.n_points)]
    metrics = {"mean_error_px": landmark_error(preds, points)}
    for k, e in enumerate(per_point):
        metrics[f"error_point{k}_px"] = e
    return metrics, {"preds": preds, "points": points}


def fit_regressor(
    head: RegressorHead, features: np.ndarray, panels: np.ndarray, config: TrainConfig
) -> list[float]:
    feats = np.asarray(features, dtype=np.float64)
    targets = np.asarray(panels, dtype=np.float64)
    mu = targets.mean(axis=0)
    sigma = targets.std(axis=0, ddof=0)
    sigma = np.where(sigma < 1e-12, 1.0, sigma)
    head.target_mu = mu
    head.target_sigma = sigma
    z = (targets - mu) / sigma

    def loss_of(idx):
        pred = regress_biomarkers(head, feats[idx], raw=True)
        diff = pred - Tensor(z[idx])
        return (diff * diff).mean()

    return _run_fit(head, len(feats), config, loss_of)


def evaluate_regressor(
    head: RegressorHead, features: np.ndarray, panels: np.ndarray
) -> tuple[dict[str, float], dict]:
    preds = regress_biomarkers(head, np.asarray(features, dtype=np.float64))
    targets = np.asarray(panels, dtype=np.float64)
    names = panel_names()
    metrics: dict[str, float] = {
        "panel_accuracy": biomarker_accuracy(preds, targets),
    }
    r2s = []
    for j, name in enumerate(names[:5]):
        r2 = r_squared(preds[:, j], targets[:, j])
        metrics[f"r2_{name}"] = r2
        r2s.append(r2)
    metrics["mean_r2_named"] = float(np.mean(r2s))
    return metrics, {"preds": preds, "targets": targets}


def fit_forecaster(
    head: ForecastHead, features: np.ndarray, deltas: np.ndarray, outcomes: np.ndarray,
    config: TrainConfig,
) -> list[float]:
    feats = np.asarray(features, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    outcomes = np.asarray(outcomes)
    if len(np.unique(outcomes)) < 2:
        raise SingleClassTrainSet("forecast training set has a single outcome")
    return _run_fit(
        head, len(feats), config,
        lambda idx: bce_with_logits(forecast_logit(head, feats[idx], deltas[idx]),
                                    outcomes[idx]),
    )


def evaluate_forecaster(
    head: ForecastHead, features: np.ndarray, deltas: np.ndarray, outcomes: np.ndarray
) -> tuple[dict[str, float], dict]:
    probs = forecast_prob(head, np.asarray(features, dtype=np.float64), deltas)
    preds = (probs >= 0.5).astype(int)
    outcomes = np.asarray(outcomes)
    metrics = {
        "f1": f1_binary(outcomes, preds),
        "accuracy": accuracy(outcomes, preds),
        "auc": roc_auc(probs, outcomes),
    }
    return metrics, {"probs": probs, "preds": preds, "outcomes": outcomes}


# --- manifest-level orchestration -------------------------------------------

def _stack_images(manifest: Manifest, records) -> np.ndarray:
    if not records:
        raise EmptyManifest("no records to train on")
    imgs = [load_record_image(manifest, r) for r in records]
    shapes = {im.shape for im in imgs}
    if len(shapes) > 1:
        raise DataError(f"records have mixed image shapes: {sorted(shapes)}")
    return np.stack(imgs, axis=0)


def assemble_task_arrays(manifest: Manifest, task: str) -> dict[str, np.ndarray]:
    """Images plus task targets pulled out of manifest annotations."""
    if task not in TASK_TO_TOY:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(TASK_TO_TOY)}")
    if task == "forecast":
        by_id = manifest.by_id()
        if not manifest.pairs:
            raise EmptyManifest("forecast needs longitudinal pairs")
        records = [by_id[p.image_t0] for p in manifest.pairs]
        return {
            "images": _stack_images(manifest, records),
            "deltas": np.array([p.delta_days for p in manifest.pairs]),
            "outcomes": np.array([p.outcome for p in manifest.pairs]),
        }
    records = manifest.records
    out = {"images": _stack_images(manifest, records)}
    if task == "classify":
        missing = [r.id for r in records if r.labels is None]
        if missing:
            raise DataError(f"records lack class labels: {missing[:3]}")
        out["labels"] = np.array([r.labels.class_index for r in records])
    elif task in ("segment-vessel", "segment-layer"):
        out["masks"] = np.stack([load_record_mask(manifest, r) for r in records])
    elif task == "landmark":
        missing = [r.id for r in records if r.landmarks is None]
        if missing:
            raise DataError(f"records lack landmarks: {missing[:3]}")
        out["points"] = np.array([[list(p) for p in r.landmarks.points] for r in records])
    elif task == "biomarker":
        missing = [r.id for r in records if r.biomarkers is None]
        if missing:
            raise DataError(f"records lack biomarker panels: {missing[:3]}")
        out["panels"] = np.stack([r.biomarkers.as_vector() for r in records])
    return out


def init_head_for_task(
    encoder: EncoderState, arrays: dict[str, np.ndarray], task: str, head_seed: int = 0
) -> AnyHead:
    """A fresh head sized for this encoder and this task's targets."""
    d = encoder.config.embed_dim
    grid = encoder.config.grid
    up = encoder.config.patch_size
    if task == "classify":
        return init_classifier(d, int(arrays["labels"].max()) + 1, head_seed)
    if task in ("segment-vessel", "segment-layer"):
        return init_segmenter(d, int(arrays["masks"].max()) + 1, grid, up, head_seed)
    if task == "landmark":
        return init_landmark_head(d, grid, up, head_seed)
    if task == "biomarker":
        return init_regressor(d, arrays["panels"].shape[1], head_seed)
    if task == "forecast":
        return init_forecaster(d, head_seed)
    raise ConfigError(f"unknown task {task!r}")


def train_head_for_task(
    encoder: EncoderState,
    manifest: Manifest,
    task: str,
    config: TrainConfig,
    head_seed: int = 0,
) -> tuple[AnyHead, list[float]]:
    """Freeze the encoder, embed once, fit a fresh head."""
    arrays = assemble_task_arrays(manifest, task)
    emb = encode_batch(encoder, arrays["images"])
    head = init_head_for_task(encoder, arrays, task, head_seed)
    if task == "classify":
        history = fit_classifier(head, emb.cls, arrays["labels"], config)
    elif task in ("segment-vessel", "segment-layer"):
        history = fit_segmenter(head, emb.patches, arrays["masks"], config)
    elif task == "landmark":
        history = fit_landmarker(head, emb.patches, arrays["points"], config)
    elif task == "biomarker":
        history = fit_regressor(head, emb.cls, arrays["panels"], config)
    else:
        history = fit_forecaster(head, emb.cls, arrays["deltas"], arrays["outcomes"], config)
    return head, history


def evaluate_task(
    encoder: EncoderState, head: AnyHead, manifest: Manifest, task: str
) -> tuple[dict[str, float], dict]:
    arrays = assemble_task_arrays(manifest, task)
    emb = encode_batch(encoder, arrays["images"])
    if task == "classify":
        return evaluate_classifier(head, emb.cls, arrays["labels"])
    if task in ("segment-vessel", "segment-layer"):
        return evaluate_segmenter(head, emb.patches, arrays["masks"])
    if task == "landmark":
        return evaluate_landmarker(head, emb.patches, arrays["points"])
    if task == "biomarker":
        return evaluate_regressor(head, emb.cls, arrays["panels"])
    if task == "forecast":
        return evaluate_forecaster(head, emb.cls, arrays["deltas"], arrays["outcomes"])
    raise ConfigError(f"unknown task {task!r}")


def _task_loss(head: AnyHead, task: str, tokens: Tensor, arrays: dict, idx: np.ndarray) -> Tensor:
    cls = tokens[:, 0, :]
    patches = tokens[:, 1:, :]
    if task == "classify":
        return cross_entropy(classify_logits(head, cls), arrays["labels"][idx])
    if task in ("segment-vessel", "segment-layer"):
        return pixel_cross_entropy(segment_logits(head, patches), arrays["masks"][idx])
    if task == "landmark":
        return heatmap_loss(landmark_logits(head, patches), arrays["heatmaps"][idx])
    if task == "biomarker":
        pred = regress_biomarkers(head, cls, raw=True)
        diff = pred - Tensor(arrays["z_panels"][idx])
        return (diff * diff).mean()
    if task == "forecast":
        return bce_with_logits(
            forecast_logit(head, cls, arrays["deltas"][idx]), arrays["outcomes"][idx])
    raise ConfigError(f"unknown task {task!r}")


def finetune_task(
    encoder: EncoderState,
    head: AnyHead,
    manifest: Manifest,
    task: str,
    config: TrainConfig,
) -> list[float]:
    """Joint gradient steps through encoder and head, in place."""
    arrays = assemble_task_arrays(manifest, task)
    if task == "landmark":
        size = encoder.config.image_size
        arrays["heatmaps"] = heatmap_targets(arrays["points"], size)
    if task == "biomarker":
        targets = arrays["panels"]
        mu = targets.mean(axis=0)
        sigma = np.where(targets.std(axis=0, ddof=0) < 1e-12, 1.0,
                         targets.std(axis=0, ddof=0))
        head.target_mu = mu
        head.target_sigma = sigma
        arrays["z_panels"] = (targets - mu) / sigma
    if task == "classify" and len(np.unique(arrays["labels"])) < 2:
        raise SingleClassTrainSet("classifier training set has a single class")

    encoder.set_trainable(True)
    joint = {f"enc::{k}": v for k, v in encoder.params.items()}
    joint.update({f"head::{k}": v for k, v in head.params.items()})
    opt = Adam(lr=config.lr)
    images = arrays["images"]
    history: list[float] = []
    for step, idx in enumerate(_batches(len(images), config)):
        tokens, _ = encoder_forward(encoder.params, images[idx], encoder.config)
        loss = _task_loss(head, task, tokens, arrays, idx)
        value = loss.item()
        _check_finite(value, step)
        history.append(value)
        zero_grads(joint)
        loss.backward()
        if config.grad_clip > 0:
            clip_grad_norm(joint, config.grad_clip)
        opt.step(joint)
    return history
