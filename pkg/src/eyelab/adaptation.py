"""Encoder adaptation protocols: linear probing and few-shot episodes.

A probe never touches encoder weights: summary embeddings are computed
once (optionally cached on disk, keyed by encoder and dataset digests)
and a linear classifier trains on top. Few-shot episodes resample k
labeled examples per class and report the spread across episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderState, encode_batch
from .checkpoint import load_container, save_container
from .errors import CacheCorruption, DataError, InsufficientExamples, SingleClassTrainSet
from .hashing import sha256_hex
from .heads import ClassifierHead, init_classifier
from .metrics import ovr_auc, roc_auc
from .records import Manifest
from .training import TrainConfig, evaluate_classifier, fit_classifier

__all__ = [
    "ProbeConfig",
    "ProbeResult",
    "FewShotResult",
    "extract_features",
    "classification_labels",
    "linear_probe",
    "probe_encoder",
    "shuffled_label_probe",
    "few_shot_episode",
    "few_shot_probe",
]


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.05
    steps: int = 400
    batch_size: int = 32
    episodes: int = 5
    standardize: bool = True
    seed: int = 0

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, steps=self.steps, batch_size=self.batch_size,
                           seed=self.seed if seed is None else seed)


def extract_features(
    encoder: EncoderState,
    manifest: Manifest,
    cache_dir: str | Path | None = None,
) -> np.ndarray:
    """Summary embeddings (N, D) for every record, in manifest order.

    With ``cache_dir`` set, results are reused across calls keyed by the
    encoder digest and the manifest digest; a cache file whose stored
    digests disagree with its key raises ``CacheCorruption``.
    """
    from .records import manifest_digest

    enc_digest = encoder.digest()
    man_digest = manifest_digest(manifest)
    cache_path = None
    if cache_dir is not None:
        key = sha256_hex(f"{enc_digest}:{man_digest}".encode())[:16]
        cache_path = Path(cache_dir) / f"feat-{key}.npz"
        if cache_path.is_file():
            try:
                meta, arrays = load_container(cache_path)
            except DataError as e:
                raise CacheCorruption(f"unreadable feature cache {cache_path}: {e}") from None
            if (meta.get("encoder_digest") != enc_digest
                    or meta.get("manifest_digest") != man_digest
                    or "cls" not in arrays):
                raise CacheCorruption(f"feature cache {cache_path} does not match its key")
            return arrays["cls"]

    from .training import _stack_images

    images = _stack_images(manifest, manifest.records)
    emb = encode_batch(encoder, images)
    if cache_path is not None:
        save_container(cache_path, {
            "kind": "feature-cache",
            "encoder_digest": enc_digest,
            "manifest_digest": man_digest,
        }, {"cls": emb.cls})
    return emb.cls


def classification_labels(manifest: Manifest) -> np.ndarray:
    missing = [r.id for r in manifest.records if r.labels is None]
    if missing:
        raise DataError(f"records lack class labels: {missing[:3]}")
    return np.array([r.labels.class_index for r in manifest.records])


def _standardized(train: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train.mean(axis=0)
    sigma = train.std(axis=0, ddof=0)
    sigma = np.where(sigma < 1e-12, 1.0, sigma)
    return (train - mu) / sigma, (test - mu) / sigma


def _mean_auc(probs: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    if n_classes == 2:
        return roc_auc(probs[:, 1], (labels == 1).astype(int))
    return float(np.mean(ovr_auc(probs, labels)))


@dataclass
class ProbeOutcome:
    head: ClassifierHead
    metrics: dict[str, float]
    aux: dict


def linear_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    config: ProbeConfig,
    head_seed: int = 0,
) -> ProbeOutcome:
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    tr = np.asarray(train_features, dtype=np.float64)
    te = np.asarray(test_features, dtype=np.float64)
    if config.standardize:
        tr, te = _standardized(tr, te)
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    head = init_classifier(tr.shape[1], n_classes, head_seed)
    fit_classifier(head, tr, train_labels, config.train_config(head_seed))
    metrics, aux = evaluate_classifier(head, te, test_labels)
    metrics["mean_auc"] = _mean_auc(aux["probs"], test_labels, n_classes)
    return ProbeOutcome(head=head, metrics=metrics, aux=aux)


@dataclass
class ProbeResult:
    metrics: dict[str, float]
    encoder_digest_before: str
    encoder_digest_after: str
    head_digest: str
    n_train: int
    n_test: int

    @property
    def encoder_unchanged(self) -> bool:
        return self.encoder_digest_before == self.encoder_digest_after


def probe_encoder(
    encoder: EncoderState,
    train_manifest: Manifest,
    test_manifest: Manifest,
    config: ProbeConfig,
    cache_dir: str | Path | None = None,
) -> ProbeResult:
    """Full probe protocol over manifests, proving the encoder is frozen."""
    from .heads import head_digest

    before = encoder.digest()
    train_feats = extract_features(encoder, train_manifest, cache_dir)
    test_feats = extract_features(encoder, test_manifest, cache_dir)
    outcome = linear_probe(
        train_feats, classification_labels(train_manifest),
        test_feats, classification_labels(test_manifest), config,
    )
    after = encoder.digest()
    return ProbeResult(
        metrics=outcome.metrics,
        encoder_digest_before=before,
        encoder_digest_after=after,
        head_digest=head_digest(outcome.head),
        n_train=len(train_manifest.records),
        n_test=len(test_manifest.records),
    )


def shuffled_label_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    config: ProbeConfig,
    seed: int,
) -> float:
    """Mean AUC after destroying the label-feature pairing; a sanity null."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5005)))
    shuffled = np.array(train_labels)[rng.permutation(len(train_labels))]
    outcome = linear_probe(train_features, shuffled, test_features, test_labels,
                           config, head_seed=seed)
    return outcome.metrics["mean_auc"]


def few_shot_episode(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    k: int,
    episode_seed: int,
    config: ProbeConfig,
) -> dict[str, float]:
    """Sample k examples per class, fit a linear head, score the query set."""
    train_labels = np.asarray(train_labels)
    classes = np.unique(train_labels)
    if len(classes) < 2:
        raise SingleClassTrainSet("few-shot support pool has a single class")
    rng = np.random.default_rng(np.random.SeedSequence((episode_seed, 5010, k)))
    chosen: list[np.ndarray] = []
    for c in classes:
        pool = np.nonzero(train_labels == c)[0]
        if len(pool) < k:
            raise InsufficientExamples(int(c), len(pool), k)
        chosen.append(rng.choice(pool, size=k, replace=False))
    support = np.concatenate(chosen)
    outcome = linear_probe(
        np.asarray(train_features)[support], train_labels[support],
        test_features, test_labels, config, head_seed=episode_seed,
    )
    return outcome.metrics


@dataclass
class FewShotResult:
    k_values: list[int]
    mean_auc: dict[int, float] = field(default_factory=dict)
    std_auc: dict[int, float] = field(default_factory=dict)
    episode_auc: dict[int, list[float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "k_values": self.k_values,
            "mean_auc": {str(k): v for k, v in self.mean_auc.items()},
            "std_auc": {str(k): v for k, v in self.std_auc.items()},
            "episode_auc": {str(k): v for k, v in self.episode_auc.items()},
        }


def few_shot_probe(
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    k_values: list[int],
    config: ProbeConfig,
) -> FewShotResult:
    """Episode means and spreads of AUC for each support size k."""
    result = FewShotResult(k_values=list(k_values))
    for k in k_values:
        aucs = []
        for ep in range(config.episodes):
            metrics = few_shot_episode(
                train_features, train_labels, test_features, test_labels,
                k, episode_seed=config.seed + ep, config=config,
            )
            aucs.append(metrics["mean_auc"])
        arr = np.asarray(aucs)
        result.mean_auc[k] = float(arr.mean())
        result.std_auc[k] = float(arr.std(ddof=0))
        result.episode_auc[k] = [float(a) for a in aucs]
    return result
