"""Command-line surface.

Subcommands: gen-data, pretrain, probe, finetune, eval, sweep-synthetic,
explain. Every run writes into ``--out``: a ``.incomplete`` marker
appears at the start and is removed only on success, a ``report.json``
records metrics plus an environment block (artifact version, seed,
config digest, wall time), and each curve gets its own PNG plot.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob as globlib
import json
import sys
import time
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .adaptation import ProbeConfig, few_shot_probe, probe_encoder, extract_features, \
    classification_labels  # noqa: E402
from .encoder import EncoderConfig, load_checkpoint  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DataError,
    EmptyManifest,
    EyelabError,
    MixedModalities,
    NumericalError,
    UnwritableOutputDir,
)
from .explain import (  # noqa: E402
    attention_evolution,
    export_attention,
    export_overlay,
    head_attention,
)
from .hashing import digest_json  # noqa: E402
from .heads import load_head, save_head  # noqa: E402
from .imaging import load_png, to_float  # noqa: E402
from .metrics import MetricReport, bootstrap_ci, dice, pr_curve_and_ap, roc_curve  # noqa: E402
from .pretrain import SelfDistillConfig, pretrain  # noqa: E402
from .records import load_manifest, manifest_digest, split_dataset  # noqa: E402
from .synthetic import GeneratorConfig, SweepConfig, run_ratio_sweep  # noqa: E402
from .toydata import generate_toy_dataset, toy_spec_from_json  # noqa: E402
from .training import (  # noqa: E402
    TASK_TO_TOY,
    TrainConfig,
    assemble_task_arrays,
    evaluate_task,
    finetune_task,
    init_head_for_task,
    train_head_for_task,
)

__all__ = ["main"]

MARKER = ".incomplete"


# --- config plumbing --------------------------------------------------------

def _read_json_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        obj = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {p} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return obj


def _strict_dataclass(cls, obj: dict, path: str):
    """Build a config dataclass, rejecting unknown keys by dotted path."""
    names = {f.name for f in dataclasses.fields(cls)}
    for key in obj:
        if key not in names:
            raise ConfigError(f"unknown config key '{path}.{key}'")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value under '{path}': {e}") from None


def _check_keys(obj: dict, allowed: set[str], path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{path}.{key}'")


def _prepare_out(out: str) -> Path:
    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / MARKER).write_text("", encoding="utf-8")
    except OSError as e:
        raise UnwritableOutputDir(f"cannot write to {out_dir}: {e}") from None
    return out_dir


def _complete(out_dir: Path) -> None:
    marker = out_dir / MARKER
    if marker.exists():
        marker.unlink()


def _write_report(
    out_dir: Path,
    command: str,
    seed: int,
    config_digest: str,
    started: float,
    metrics: dict | None = None,
    extra: dict | None = None,
) -> Path:
    report = {
        "command": command,
        "metrics": metrics or {},
        "environment": {
            "artifact_version": __version__,
            "seed": seed,
            "config_digest": config_digest,
            "wall_time_s": round(time.monotonic() - started, 3),
        },
    }
    if extra:
        report.update(extra)
    path = out_dir / "report.json"
    path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _plot_xy(x, y, xlabel: str, ylabel: str, title: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, y, marker="o", markersize=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _load_manifest_arg(path: str):
    p = Path(path)
    return load_manifest(p)


def _load_image_arg(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"image not found: {p}")
    return to_float(load_png(p))


# --- subcommands ------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    started = time.monotonic()
    spec_obj = _read_json_config(args.spec)
    spec = toy_spec_from_json(spec_obj)
    out_dir = _prepare_out(args.out)
    manifest = generate_toy_dataset(spec, args.seed, out_dir)
    _write_report(
        out_dir, "gen-data", args.seed, digest_json(spec_obj), started,
        metrics={"n_records": float(len(manifest.records)),
                 "n_pairs": float(len(manifest.pairs))},
        extra={"manifest_digest": manifest_digest(manifest)},
    )
    _complete(out_dir)
    print(f"gen-data: {len(manifest.records)} records -> {out_dir}")
    return 0


_PRETRAIN_KEYS = {"manifest", "seed", "encoder", "distill"}


def cmd_pretrain(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _read_json_config(args.config)
    _check_keys(cfg, _PRETRAIN_KEYS, "pretrain")
    if "manifest" not in cfg:
        raise ConfigError("pretrain config needs 'manifest'")
    seed = int(cfg.get("seed", 0))
    enc_cfg = _strict_dataclass(EncoderConfig, cfg.get("encoder", {}), "encoder")
    distill_cfg = _strict_dataclass(SelfDistillConfig, cfg.get("distill", {}), "distill")
    manifest = _load_manifest_arg(cfg["manifest"])
    if not manifest.records:
        raise EmptyManifest(f"{cfg['manifest']} lists no images")
    modalities = {r.modality.value for r in manifest.records}
    if len(modalities) > 1:
        # one run adapts one imaging mode; mixing would blur what the
        # resulting encoder is for
        raise MixedModalities(f"manifest spans {sorted(modalities)}")
    modality = modalities.pop()
    from .training import _stack_images
    images = _stack_images(manifest, manifest.records)

    out_dir = _prepare_out(args.out)
    result = pretrain(images, enc_cfg, distill_cfg, seed, out_dir=out_dir, modality=modality)
    _plot_xy(range(len(result.loss_history)), result.loss_history,
             "step", "loss", "self-distillation loss", out_dir / "loss_curve.png")
    _write_report(
        out_dir, "pretrain", seed, digest_json(cfg), started,
        metrics={"final_loss": result.loss_history[-1],
                 "steps": float(len(result.loss_history))},
        extra={"encoder_path": str(result.final_path),
               "checkpoints": [str(p) for p in result.checkpoints]},
    )
    _complete(out_dir)
    print(f"pretrain: {len(result.loss_history)} steps, final loss "
          f"{result.loss_history[-1]:.4f} -> {out_dir}")
    return 0


def cmd_probe(args: argparse.Namespace) -> int:
    started = time.monotonic()
    if args.task != "classify":
        raise ConfigError(f"probing works on 'classify', got {args.task!r}")
    encoder = load_checkpoint(args.encoder)
    manifest = _load_manifest_arg(args.manifest)
    train_m, _, test_m = split_dataset(manifest, (0.6, 0.0, 0.4), args.seed)
    config = ProbeConfig(episodes=args.episodes, seed=args.seed)
    out_dir = _prepare_out(args.out)
    config_digest = digest_json({
        "encoder": str(args.encoder), "manifest": str(args.manifest),
        "task": args.task, "k": args.k, "episodes": args.episodes, "seed": args.seed,
    })

    if args.k:
        ks = [int(x) for x in str(args.k).split(",")]
        feats_tr = extract_features(encoder, train_m, out_dir / "cache")
        feats_te = extract_features(encoder, test_m, out_dir / "cache")
        result = few_shot_probe(
            feats_tr, classification_labels(train_m),
            feats_te, classification_labels(test_m), ks, config,
        )
        (out_dir / "fewshot.json").write_text(
            json.dumps(result.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
        _plot_xy(result.k_values, [result.mean_auc[k] for k in result.k_values],
                 "k (examples per class)", "mean AUC", "few-shot probe",
                 out_dir / "fewshot_auc.png")
        metrics = {}
        for k in result.k_values:
            metrics[f"mean_auc_k{k}"] = result.mean_auc[k]
            metrics[f"std_auc_k{k}"] = result.std_auc[k]
        _write_report(out_dir, "probe", args.seed, config_digest, started, metrics=metrics)
    else:
        result = probe_encoder(encoder, train_m, test_m, config, cache_dir=out_dir / "cache")
        _write_report(
            out_dir, "probe", args.seed, config_digest, started,
            metrics=result.metrics,
            extra={"probe": {
                "encoder_unchanged": result.encoder_unchanged,
                "encoder_digest": result.encoder_digest_after,
                "head_digest": result.head_digest,
                "n_train": result.n_train,
                "n_test": result.n_test,
            }},
        )
    _complete(out_dir)
    print(f"probe -> {out_dir}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    started = time.monotonic()
    encoder = load_checkpoint(args.encoder)
    manifest = _load_manifest_arg(args.manifest)
    if args.task not in TASK_TO_TOY:
        raise ConfigError(f"unknown task {args.task!r}; choose from {sorted(TASK_TO_TOY)}")
    out_dir = _prepare_out(args.out)
    config = TrainConfig(lr=args.lr, steps=args.steps, batch_size=args.batch_size,
                         seed=args.seed)
    if args.head:
        head = load_head(args.head)
    else:
        arrays = assemble_task_arrays(manifest, args.task)
        head = init_head_for_task(encoder, arrays, args.task, head_seed=args.seed)
    history = finetune_task(encoder, head, manifest, args.task, config)
    metrics, _ = evaluate_task(encoder, head, manifest, args.task)

    from .encoder import save_checkpoint
    enc_path = save_checkpoint(encoder, out_dir / "encoder.npz", {"finetuned_on": args.task})
    head_path = save_head(head, out_dir / "head.npz")
    _plot_xy(range(len(history)), history, "step", "loss",
             f"finetune loss ({args.task})", out_dir / "loss_curve.png")
    _write_report(
        out_dir, "finetune", args.seed,
        digest_json({"encoder": str(args.encoder), "head": args.head,
                     "manifest": str(args.manifest), "task": args.task,
                     "lr": args.lr, "steps": args.steps,
                     "batch_size": args.batch_size, "seed": args.seed}),
        started,
        metrics={**metrics, "final_loss": history[-1]},
        extra={"encoder_path": str(enc_path), "head_path": str(head_path),
               "note": "metrics computed on the finetuning manifest"},
    )
    _complete(out_dir)
    print(f"finetune[{args.task}] -> {out_dir}")
    return 0


def _per_sample_scores(task: str, metrics: dict, aux: dict) -> np.ndarray | None:
    if task == "classify":
        return (aux["preds"] == aux["labels"]).astype(np.float64)
    if task in ("segment-vessel", "segment-layer"):
        return np.array([dice(p, m, 1) for p, m in zip(aux["preds"], aux["masks"])])
    if task == "landmark":
        d = np.sqrt(((aux["preds"] - aux["points"]) ** 2).sum(axis=-1))
        return d.mean(axis=-1)
    if task == "biomarker":
        band = np.maximum(0.2 * np.abs(aux["targets"]), 1e-6)
        return (np.abs(aux["preds"] - aux["targets"]) <= band).mean(axis=-1)
    if task == "forecast":
        return (aux["preds"] == aux["outcomes"]).astype(np.float64)
    return None


_HEADLINE = {"classify": "accuracy", "segment-vessel": "dice", "segment-layer": "dice",
             "landmark": "mean_error_px", "biomarker": "panel_accuracy", "forecast": "f1"}


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.monotonic()
    encoder = load_checkpoint(args.encoder)
    head = load_head(args.head)
    manifest = _load_manifest_arg(args.manifest)
    if args.task not in TASK_TO_TOY:
        raise ConfigError(f"unknown task {args.task!r}; choose from {sorted(TASK_TO_TOY)}")
    out_dir = _prepare_out(args.out)
    metrics, aux = evaluate_task(encoder, head, manifest, args.task)

    curves: dict[str, dict[str, list[float]]] = {}
    if args.task == "classify":
        probs, labels = aux["probs"], aux["labels"]
        for c in range(probs.shape[1]):
            fpr, tpr = roc_curve(probs[:, c], (labels == c).astype(int))
            curves[f"roc_class{c}"] = {"x": fpr.tolist(), "y": tpr.tolist()}
            prec, rec, _ = pr_curve_and_ap(probs[:, c], (labels == c).astype(int))
            curves[f"pr_class{c}"] = {"x": rec.tolist(), "y": prec.tolist()}
    elif args.task == "forecast":
        fpr, tpr = roc_curve(aux["probs"], aux["outcomes"])
        curves["roc"] = {"x": fpr.tolist(), "y": tpr.tolist()}
        prec, rec, _ = pr_curve_and_ap(aux["probs"], aux["outcomes"])
        curves["pr"] = {"x": rec.tolist(), "y": prec.tolist()}
    for name, xy in curves.items():
        xlabel, ylabel = (("recall", "precision") if name.startswith("pr")
                          else ("false positive rate", "true positive rate"))
        _plot_xy(xy["x"], xy["y"], xlabel, ylabel, name, out_dir / f"{name}.png")

    ci: dict[str, list[float]] = {}
    per_sample = _per_sample_scores(args.task, metrics, aux)
    if per_sample is not None and len(per_sample) >= 2:
        boot = bootstrap_ci(per_sample, seed=0)
        ci["per_sample_mean"] = [boot.lo, boot.point, boot.hi]

    config_digest = digest_json({
        "encoder": str(args.encoder), "head": str(args.head),
        "manifest": str(args.manifest), "task": args.task,
    })
    n = len(aux.get("labels", aux.get("outcomes", aux.get("preds", []))))
    MetricReport(task=args.task, metrics=metrics, n=int(n), seed=0,
                 config_digest=config_digest, curves=curves, ci=ci,
                 ).save(out_dir / "metrics.json")
    _write_report(out_dir, "eval", 0, config_digest, started, metrics=metrics)
    _complete(out_dir)
    headline = _HEADLINE[args.task]
    print(f"eval[{args.task}]: {headline}={metrics[headline]:.4f} -> {out_dir}")
    return 0


_SWEEP_KEYS = {"encoder", "manifest", "seed", "split", "ratios", "seeds",
               "metric", "generator", "probe"}


def cmd_sweep_synthetic(args: argparse.Namespace) -> int:
    started = time.monotonic()
    cfg = _read_json_config(args.config)
    _check_keys(cfg, _SWEEP_KEYS, "sweep")
    for key in ("encoder", "manifest"):
        if key not in cfg:
            raise ConfigError(f"sweep config needs '{key}'")
    seed = int(cfg.get("seed", 0))
    split = tuple(cfg.get("split", (0.7, 0.0, 0.3)))
    gen_cfg = _strict_dataclass(GeneratorConfig, cfg.get("generator", {}), "generator")
    probe_cfg = _strict_dataclass(ProbeConfig, cfg.get("probe", {}), "probe")
    sweep_cfg = SweepConfig(
        ratios=tuple(tuple(r) for r in cfg.get("ratios", [list(r) for r in
                                                          SweepConfig().ratios])),
        seeds=tuple(int(s) for s in cfg.get("seeds", (0, 1))),
        metric=str(cfg.get("metric", "mean_auc")),
        generator=gen_cfg,
        probe=probe_cfg,
    )
    encoder = load_checkpoint(cfg["encoder"])
    manifest = _load_manifest_arg(cfg["manifest"])
    train_m, _, test_m = split_dataset(manifest, split, seed)
    out_dir = _prepare_out(args.out)
    result = run_ratio_sweep(encoder, train_m, test_m, sweep_cfg, out_dir, jobs=args.jobs)
    labels = [f"{r['ratio'][0]}:{r['ratio'][1]}" for r in result.rows]
    means = [r["metric_mean"] for r in result.rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(range(len(means)), means,
                yerr=[r["metric_std"] for r in result.rows], marker="o")
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel("real:synthetic ratio")
    ax.set_ylabel(result.metric)
    ax.set_title("synthetic ratio sweep")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", dpi=110)
    plt.close(fig)
    _write_report(
        out_dir, "sweep-synthetic", seed, digest_json(cfg), started,
        metrics={f"mean_{lab}": m for lab, m in zip(labels, means)},
        extra={"rows": result.rows},
    )
    _complete(out_dir)
    print(f"sweep-synthetic: {len(result.cells)} cells -> {out_dir}")
    return 0


def _resolve_series(spec: str) -> list[Path]:
    if "," in spec:
        paths = [Path(p) for p in spec.split(",") if p]
    elif any(ch in spec for ch in "*?["):
        paths = [Path(p) for p in sorted(globlib.glob(spec))]
    else:
        p = Path(spec)
        if p.is_dir():
            paths = sorted(p.glob("*.npz"))
        else:
            paths = [p]
    if not paths:
        raise DataError(f"no checkpoints match {spec!r}")
    return paths


def cmd_explain(args: argparse.Namespace) -> int:
    started = time.monotonic()
    if bool(args.encoder) == bool(args.ckpt_series):
        raise ConfigError("pass exactly one of --encoder or --ckpt-series")
    if bool(args.image) == bool(args.manifest):
        raise ConfigError("pass exactly one of --image or --manifest")
    if args.image:
        image = _load_image_arg(args.image)
        source = str(args.image)
    else:
        manifest = _load_manifest_arg(args.manifest)
        if not manifest.records:
            raise DataError("manifest has no records")
        from .records import load_record_image
        rec = manifest.records[0]
        image = load_record_image(manifest, rec)
        source = f"{args.manifest}#{rec.id}"
    out_dir = _prepare_out(args.out)
    config_digest = digest_json({
        "encoder": args.encoder, "ckpt_series": args.ckpt_series,
        "image": args.image, "manifest": args.manifest, "layer": args.layer,
    })

    if args.encoder:
        encoder = load_checkpoint(args.encoder)
        map_set = head_attention(encoder, image, layer=args.layer, description=source)
        export_overlay(image, map_set, out_dir / "overlay_mean.png", merge="mean")
        export_overlay(image, map_set, out_dir / "overlay_max.png", merge="max")
        export_attention(map_set, out_dir / "attention")
        _write_report(
            out_dir, "explain", 0, config_digest, started,
            metrics={"n_heads": float(map_set.n_heads),
                     "merged_mass": float(map_set.merged.sum())},
            extra={"layer": args.layer, "source": source},
        )
    else:
        series = _resolve_series(args.ckpt_series)
        result = attention_evolution(series, image, layer=args.layer,
                                     out_csv=out_dir / "evolution.csv")
        _plot_xy(result.steps, result.masses, "pretrain step", "foreground mass",
                 "attention evolution", out_dir / "evolution.png")
        _write_report(
            out_dir, "explain", 0, config_digest, started,
            metrics={"n_checkpoints": float(len(result.steps)),
                     "final_foreground_mass": result.masses[-1]},
            extra={"layer": args.layer, "source": source,
                   "checkpoints": result.checkpoints},
        )
    _complete(out_dir)
    print(f"explain -> {out_dir}")
    return 0


# --- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eyelab",
        description="Self-distilled eye-imaging encoders with task decoders on toy data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a procedural toy dataset")
    p.add_argument("--spec", required=True, help="JSON file describing the dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="self-distillation pretraining")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("probe", help="linear or few-shot probe of a frozen encoder")
    p.add_argument("--encoder", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--k", default=None,
                   help="examples per class; comma list runs several sizes")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("finetune", help="joint encoder+head training")
    p.add_argument("--encoder", required=True)
    p.add_argument("--head", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a head on a manifest")
    p.add_argument("--encoder", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep-synthetic", help="real:synthetic ratio study")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep_synthetic)

    p = sub.add_parser("explain", help="attention maps and their evolution")
    p.add_argument("--encoder", default=None)
    p.add_argument("--ckpt-series", default=None,
                   help="comma list, glob, or directory of checkpoints")
    p.add_argument("--image", default=None)
    p.add_argument("--manifest", default=None,
                   help="use the first record of this manifest")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_explain)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error (config): {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error (data): {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"error (numerical): {e}", file=sys.stderr)
        return 4
    except EyelabError as e:  # pragma: no cover
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
