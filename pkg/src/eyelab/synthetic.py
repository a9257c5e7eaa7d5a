"""Class-conditional image generation and real:synthetic mixing studies.

The generator is a small autoencoder: images compress to a latent
vector, and a decoder conditioned on a class one-hot reconstructs them.
Sampling draws latents from a per-class diagonal Gaussian fitted to the
training latents, so each class gets its own latent cloud.

The ratio sweep trains a frozen-encoder linear classifier on mixes of
real and generated examples (ratio real:synthetic) and scores each cell
on a held-out set of real images. Cells are independent, written to
disk as they finish, and skipped on rerun, so a sweep is resumable and
byte-stable.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderState, encode_batch
from .errors import (
    EmptyResponses,
    InsufficientSynthetic,
    InvalidSpec,
    TooFewImages,
)
from .heads import head_digest  # noqa: F401  (re-exported convenience)
from .imaging import save_png, to_uint8
from .metrics import TuringResult, turing_score
from .optim import Adam, zero_grads
from .records import DiseaseLabel, ImageRecord, Manifest, Modality, save_manifest
from .adaptation import ProbeConfig, linear_probe

__all__ = [
    "GeneratorConfig",
    "GeneratorState",
    "fit_generator",
    "decode_latent",
    "sample_synthetic",
    "MixPlan",
    "mix_datasets",
    "SweepConfig",
    "SweepResult",
    "run_ratio_sweep",
    "load_turing_responses",
    "score_turing_csv",
]

DEFAULT_RATIOS: tuple[tuple[int, int], ...] = ((1, 0), (1, 1), (1, 2), (1, 5), (1, 10), (0, 1))


@dataclass(frozen=True)
class GeneratorConfig:
    latent_dim: int = 16
    hidden_dim: int = 96
    lr: float = 2e-3
    steps: int = 300
    batch_size: int = 16
    seed: int = 0
    min_images: int = 32

    def __post_init__(self):
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise InvalidSpec("latent_dim and hidden_dim must be >= 1")


@dataclass
class GeneratorState:
    config: GeneratorConfig
    image_size: int
    n_classes: int
    params: dict[str, Tensor]
    class_mu: np.ndarray  # (n_classes, latent_dim)
    class_sigma: np.ndarray  # (n_classes, latent_dim)
    modality: Modality = Modality.FUNDUS


def _init_generator_params(
    pixels: int, n_classes: int, config: GeneratorConfig
) -> dict[str, Tensor]:
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 6001)))

    def lin(n_in, n_out):
        return (
            Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)),
                   requires_grad=True),
            Tensor(np.zeros(n_out), requires_grad=True),
        )

    params: dict[str, Tensor] = {}
    params["enc/w1"], params["enc/b1"] = lin(pixels, config.hidden_dim)
    params["enc/w2"], params["enc/b2"] = lin(config.hidden_dim, config.latent_dim)
    params["dec/w1"], params["dec/b1"] = lin(config.latent_dim + n_classes, config.hidden_dim)
    params["dec/w2"], params["dec/b2"] = lin(config.hidden_dim, pixels)
    return params


def _encode_latent(params: dict[str, Tensor], flat: np.ndarray) -> Tensor:
    h = ad.gelu(Tensor(flat) @ params["enc/w1"] + params["enc/b1"])
    return h @ params["enc/w2"] + params["enc/b2"]


def _decode(params: dict[str, Tensor], z: Tensor, onehot: np.ndarray) -> Tensor:
    joint = ad.concat([z, Tensor(onehot)], axis=1)
    h = ad.gelu(joint @ params["dec/w1"] + params["dec/b1"])
    return ad.sigmoid(h @ params["dec/w2"] + params["dec/b2"])


def fit_generator(
    images: np.ndarray,
    labels: np.ndarray,
    config: GeneratorConfig,
    modality: Modality = Modality.FUNDUS,
) -> GeneratorState:
    """Train the conditional autoencoder and fit per-class latent Gaussians."""
    if images.ndim == 4:
        images = images[..., 0]
    n, size, _ = images.shape
    if n < config.min_images:
        raise TooFewImages(f"generator needs >= {config.min_images} images, got {n}")
    labels = np.asarray(labels)
    n_classes = int(labels.max()) + 1
    flat = images.reshape(n, size * size).astype(np.float64)
    onehot = np.eye(n_classes)[labels]
    params = _init_generator_params(size * size, n_classes, config)
    opt = Adam(lr=config.lr)
    for step in range(config.steps):
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 6002, step)))
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        z = _encode_latent(params, flat[idx])
        recon = _decode(params, z, onehot[idx])
        diff = recon - Tensor(flat[idx])
        loss = (diff * diff).mean()
        zero_grads(params)
        loss.backward()
        opt.step(params)

    with ad.no_grad():
        latents = _encode_latent(params, flat).data
    mu = np.zeros((n_classes, config.latent_dim))
    sigma = np.ones((n_classes, config.latent_dim))
    for c in range(n_classes):
        zc = latents[labels == c]
        if len(zc) > 0:
            mu[c] = zc.mean(axis=0)
            sigma[c] = np.maximum(zc.std(axis=0, ddof=0), 1e-3)
    return GeneratorState(config=config, image_size=size, n_classes=n_classes,
                          params=params, class_mu=mu, class_sigma=sigma, modality=modality)


def decode_latent(state: GeneratorState, z: np.ndarray, classes: np.ndarray) -> np.ndarray:
    onehot = np.eye(state.n_classes)[np.asarray(classes)]
    with ad.no_grad():
        flat = _decode(state.params, Tensor(np.asarray(z, dtype=np.float64)), onehot).data
    return flat.reshape(-1, state.image_size, state.image_size)


def sample_synthetic(
    state: GeneratorState,
    n: int,
    seed: int,
    out_dir: str | Path,
) -> Manifest:
    """Draw n images (classes round-robin), save them, return their manifest.

    Every record is flagged synthetic and its id carries a ``syn-``
    prefix, so mixes stay auditable.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    classes = np.arange(n) % state.n_classes
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6100)))
    z = state.class_mu[classes] + rng.normal(0.0, 1.0, size=(n, state.config.latent_dim)) \
        * state.class_sigma[classes]
    images = np.clip(decode_latent(state, z, classes), 0.0, 1.0)
    records: list[ImageRecord] = []
    for i in range(n):
        rec_id = f"syn-{i:04d}"
        path = f"images/{rec_id}.png"
        save_png(to_uint8(images[i]), out_dir / path)
        records.append(ImageRecord(
            id=rec_id,
            subject_id=f"syn-subj-{i:04d}",
            modality=state.modality,
            image_path=path,
            height=state.image_size,
            width=state.image_size,
            labels=DiseaseLabel(class_index=int(classes[i]), class_name=f"class-{classes[i]}"),
            synthetic=True,
        ))
    manifest = Manifest(records=records, root_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


@dataclass(frozen=True)
class MixPlan:
    """Real-to-synthetic mixing ratio (a, b), read as a:b.

    With a > 0 every real example is kept and synthetic examples are
    added at b/a per real one. The all-synthetic plan (0, 1) matches the
    real baseline's size with generated examples alone.
    """

    ratio: tuple[int, int]

    def __post_init__(self):
        a, b = self.ratio
        if a < 0 or b < 0 or (a == 0 and b == 0):
            raise InvalidSpec(f"ratio must have a nonnegative part and a positive part: {self.ratio}")

    def counts(self, real_count: int) -> tuple[int, int]:
        a, b = self.ratio
        if a == 0:
            return 0, real_count
        return real_count, int(round(real_count * b / a))

    def label(self) -> str:
        return f"{self.ratio[0]}:{self.ratio[1]}"


def mix_datasets(
    real: Manifest,
    synthetic: Manifest,
    plan: MixPlan,
    seed: int,
    out_dir: str | Path,
) -> Manifest:
    """Materialize a mixed manifest; image files stay where they are.

    Paths in the new manifest are rewritten relative to ``out_dir``.
    """
    import os

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_real, n_synth = plan.counts(len(real.records))
    if n_synth > len(synthetic.records):
        raise InsufficientSynthetic(
            f"plan {plan.label()} needs {n_synth} synthetic examples, pool has "
            f"{len(synthetic.records)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6200, *plan.ratio)))
    keep_real = list(real.records) if n_real == len(real.records) else [
        real.records[i] for i in sorted(rng.choice(len(real.records), n_real, replace=False))
    ]
    keep_synth = [synthetic.records[i]
                  for i in sorted(rng.choice(len(synthetic.records), n_synth, replace=False))]

    def rebased(rec: ImageRecord, root: Path) -> ImageRecord:
        new = ImageRecord(**{**rec.__dict__})
        new.image_path = os.path.relpath(root / rec.image_path, out_dir)
        if rec.mask_path is not None:
            new.mask_path = os.path.relpath(root / rec.mask_path, out_dir)
        return new

    records = [rebased(r, real.root_dir) for r in keep_real]
    records += [rebased(r, synthetic.root_dir) for r in keep_synth]
    manifest = Manifest(records=records, root_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# --- ratio sweep ------------------------------------------------------------

@dataclass(frozen=True)
class SweepConfig:
    ratios: tuple[tuple[int, int], ...] = DEFAULT_RATIOS
    seeds: tuple[int, ...] = (0, 1)
    metric: str = "mean_auc"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    def __post_init__(self):
        if not self.ratios or not self.seeds:
            raise InvalidSpec("sweep needs at least one ratio and one seed")
        for r in self.ratios:
            MixPlan(ratio=tuple(r))  # validates


@dataclass
class SweepResult:
    cells: list[dict]
    rows: list[dict]
    metric: str

    def to_json(self) -> dict:
        return {"metric": self.metric, "cells": self.cells, "rows": self.rows}


def _cell_key(ratio: tuple[int, int], seed: int) -> str:
    return f"cell-r{ratio[0]}x{ratio[1]}-s{seed}"


def _run_cell(args: tuple) -> dict:
    (ratio, seed, real_feats, real_labels, synth_feats, synth_labels,
     test_feats, test_labels, probe) = args
    plan = MixPlan(ratio=ratio)
    n_real, n_synth = plan.counts(len(real_feats))
    if n_synth > len(synth_feats):
        raise InsufficientSynthetic(
            f"ratio {plan.label()} needs {n_synth} synthetic examples, "
            f"pool has {len(synth_feats)}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 6300, *ratio)))
    if n_real == len(real_feats):
        ri = np.arange(len(real_feats))
    else:
        ri = np.sort(rng.choice(len(real_feats), n_real, replace=False))
    si = np.sort(rng.choice(len(synth_feats), n_synth, replace=False))
    feats = np.concatenate([real_feats[ri], synth_feats[si]], axis=0)
    labels = np.concatenate([real_labels[ri], synth_labels[si]], axis=0)
    outcome = linear_probe(feats, labels, test_feats, test_labels, probe, head_seed=seed)
    return {
        "ratio": [int(ratio[0]), int(ratio[1])],
        "seed": int(seed),
        "n_real": int(n_real),
        "n_synth": int(n_synth),
        "metric": float(outcome.metrics["mean_auc"]),
    }


def run_ratio_sweep(
    encoder: EncoderState,
    train_manifest: Manifest,
    test_manifest: Manifest,
    config: SweepConfig,
    out_dir: str | Path,
    jobs: int = 1,
) -> SweepResult:
    """Train/evaluate every (ratio, seed) cell and write sweep.json/.csv.

    Completed cells found under ``cells/`` are reused, so an interrupted
    sweep picks up where it stopped. Output rows aggregate per ratio in
    the configured order.
    """
    from .adaptation import classification_labels
    from .training import assemble_task_arrays

    out_dir = Path(out_dir)
    cells_dir = out_dir / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    train_arrays = assemble_task_arrays(train_manifest, "classify")
    test_arrays = assemble_task_arrays(test_manifest, "classify")
    gen = fit_generator(train_arrays["images"], train_arrays["labels"], config.generator)
    max_synth = max(MixPlan(ratio=r).counts(len(train_manifest.records))[1]
                    for r in config.ratios)
    synth_dir = out_dir / "synthetic"
    synth_manifest = sample_synthetic(gen, max(max_synth, 1), config.generator.seed, synth_dir)
    synth_arrays = assemble_task_arrays(synth_manifest, "classify")

    real_feats = encode_batch(encoder, train_arrays["images"]).cls
    synth_feats = encode_batch(encoder, synth_arrays["images"]).cls
    test_feats = encode_batch(encoder, test_arrays["images"]).cls
    real_labels = train_arrays["labels"]
    synth_labels = synth_arrays["labels"]
    test_labels = test_arrays["labels"]

    todo = []
    done: dict[str, dict] = {}
    for ratio in config.ratios:
        for seed in config.seeds:
            key = _cell_key(tuple(ratio), seed)
            path = cells_dir / f"{key}.json"
            if path.is_file():
                done[key] = json.loads(path.read_text(encoding="utf-8"))
            else:
                todo.append((tuple(ratio), seed))

    def args_for(ratio, seed):
        return (ratio, seed, real_feats, real_labels, synth_feats, synth_labels,
                test_feats, test_labels, config.probe)

    if todo:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_cell, [args_for(r, s) for r, s in todo]))
        else:
            results = [_run_cell(args_for(r, s)) for r, s in todo]
        for (ratio, seed), cell in zip(todo, results):
            key = _cell_key(ratio, seed)
            (cells_dir / f"{key}.json").write_text(
                json.dumps(cell, sort_keys=True, indent=2) + "\n", encoding="utf-8")
            done[key] = cell

    cells = [done[_cell_key(tuple(r), s)] for r in config.ratios for s in config.seeds]
    rows = []
    for ratio in config.ratios:
        vals = [c["metric"] for c in cells if tuple(c["ratio"]) == tuple(ratio)]
        plan = MixPlan(ratio=tuple(ratio))
        n_real, n_synth = plan.counts(len(train_manifest.records))
        arr = np.asarray(vals)
        rows.append({
            "ratio": [int(ratio[0]), int(ratio[1])],
            "n_real": int(n_real),
            "n_synth": int(n_synth),
            "metric_mean": float(arr.mean()),
            "metric_std": float(arr.std(ddof=0)),
            "seeds": [int(s) for s in config.seeds],
        })

    result = SweepResult(cells=cells, rows=rows, metric=config.metric)
    (out_dir / "sweep.json").write_text(
        json.dumps(result.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ratio", "n_real", "n_synth", "metric_mean", "metric_std", "seeds"])
        for row in rows:
            writer.writerow([
                f"{row['ratio'][0]}:{row['ratio'][1]}", row["n_real"], row["n_synth"],
                f"{row['metric_mean']:.6f}", f"{row['metric_std']:.6f}",
                ";".join(str(s) for s in row["seeds"]),
            ])
    return result


# --- human discrimination scoring -------------------------------------------

def load_turing_responses(path: str | Path) -> dict[str, list[tuple[int, int]]]:
    """Read rater judgments from CSV: rater,image_id,judged_synthetic,is_synthetic."""
    path = Path(path)
    out: dict[str, list[tuple[int, int]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"rater", "image_id", "judged_synthetic", "is_synthetic"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise EmptyResponses(f"{path} lacks columns {sorted(required)}")
        for row in reader:
            out.setdefault(row["rater"], []).append(
                (int(row["judged_synthetic"]), int(row["is_synthetic"])))
    if not out:
        raise EmptyResponses(f"{path} has no judgment rows")
    return out


def score_turing_csv(path: str | Path) -> TuringResult:
    return turing_score(load_turing_responses(path))
