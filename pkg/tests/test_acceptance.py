"""Release gate: ten end-to-end properties, one PASS/FAIL line each.

Every test here exercises one numbered gate at its stated tolerance and
prints a single scoreboard line even under pytest's output capture, so
a full run ends with ten lines that summarize the package's health.
Gates cover metric oracles, gradient fidelity, self-distillation
behavior, decoder contracts, probing, few-shot trends, spatial heads,
forecasting and regression, the synthetic-mix sweep, and attention
explainability. Each gate also carries a wall-clock ceiling; the suite
is sized for an ordinary 4-core CPU box.
"""

import csv
import time
from types import SimpleNamespace

import numpy as np
import pytest

import eyelab.autodiff as ad
from eyelab.adaptation import (
    ProbeConfig,
    classification_labels,
    extract_features,
    few_shot_probe,
    probe_encoder,
    shuffled_label_probe,
)
from eyelab.autodiff import Tensor
from eyelab.encoder import (
    EncoderConfig,
    attention_maps,
    encoder_forward,
    load_checkpoint,
    new_encoder,
)
from eyelab.explain import attention_evolution, head_attention
from eyelab.heads import (
    classify_logits,
    forecast_logit,
    head_digest,
    init_classifier,
    init_forecaster,
    init_landmark_head,
    init_regressor,
    init_segmenter,
    landmark_logits,
    regress_biomarkers,
    segment_logits,
    soft_argmax,
)
from eyelab.metrics import (
    biomarker_accuracy,
    dice,
    f1_binary,
    landmark_error,
    ovr_auc,
    pr_curve_and_ap,
    roc_auc,
)
from eyelab.optim import zero_grads
from eyelab.pretrain import SelfDistillConfig, pretrain, projection_spread
from eyelab.records import Modality, split_dataset
from eyelab.synthetic import SweepConfig, run_ratio_sweep
from eyelab.toydata import ToyDataSpec, ToyTask, generate_toy_dataset
from eyelab.training import (
    TrainConfig,
    _stack_images,
    evaluate_classifier,
    evaluate_task,
    finetune_task,
    fit_classifier,
    heatmap_targets,
    train_head_for_task,
)

# tuned toy-data and schedule choices for the slower gates; thresholds
# themselves live in the asserts and stay fixed
LANDMARK_ENCODER = EncoderConfig(patch_size=16, embed_dim=32, depth=2, n_heads=4,
                                 image_size=128)
LANDMARK_IMAGES = 160
LANDMARK_WARM = TrainConfig(lr=0.05, steps=600, batch_size=8, seed=0)
LANDMARK_JOINT = [TrainConfig(lr=0.005, steps=1000, batch_size=8, seed=0)]

FORECAST_IMAGES = 96
FORECAST_WARM = TrainConfig(lr=0.1, steps=800, batch_size=16, seed=0)
FORECAST_JOINT = [TrainConfig(lr=0.005, steps=1200, batch_size=16, seed=0)]

BIOMARKER_ENCODER = EncoderConfig(patch_size=8, embed_dim=32, depth=2, n_heads=4,
                                  image_size=48)
BIOMARKER_IMAGES = 288
BIOMARKER_WARM = TrainConfig(lr=0.05, steps=300, batch_size=16, seed=0)
BIOMARKER_JOINT = [TrainConfig(lr=0.007, steps=1600, batch_size=16, seed=0),
                   TrainConfig(lr=0.002, steps=800, batch_size=16, seed=0)]


def _report(capsys, num, name, bad, detail, budget_s, elapsed):
    over = elapsed >= budget_s
    ok = not bad and not over
    line = (f"[gate {num:02d}] {name:<34s} {'PASS' if ok else 'FAIL'}"
            f"  ({detail}; {elapsed:.1f}s of {budget_s:.0f}s)")
    with capsys.disabled():
        print(line)
    assert not bad, "; ".join(bad)
    assert not over, f"wall clock {elapsed:.1f}s exceeds the {budget_s:.0f}s ceiling"


def _check(bad, cond, msg):
    if not cond:
        bad.append(msg)


# --- brute-force ranking oracles (quadratic, shared with the metric suite) --

def _auc_pairwise(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def _ap_stepwise(scores, labels):
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    n_pos = int(y.sum())
    out, tp, fp, prev_r = 0.0, 0, 0, 0.0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        r = tp / n_pos
        p = tp / (tp + fp)
        out += (r - prev_r) * p
        prev_r = r
        i = j
    return out


def _random_case(rng, tie_prob=0.5):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, size=n)
    if labels.sum() == 0:
        labels[0] = 1
    if labels.sum() == n:
        labels[0] = 0
    if rng.random() < tie_prob:
        scores = rng.integers(0, 8, size=n).astype(np.float64)
    else:
        scores = rng.normal(size=n)
    return scores, labels


# --- shared artifacts --------------------------------------------------------

@pytest.fixture(scope="session")
def acc_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("gate")


@pytest.fixture(scope="session")
def distill_run(acc_dir, small_config):
    """One 200-step self-distillation run, reused by gates 3 and 10."""
    man = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.CLASSIFY, n_images=200, image_size=32, patch_size=8),
        seed=3, out_dir=acc_dir / "distill-data")
    images = _stack_images(man, man.records)
    config = SelfDistillConfig(n_global=2, n_local=4, global_frac=1.0, local_frac=0.8,
                               teacher_momentum=0.999, proj_dim=32, lr=1e-3,
                               batch_size=8, steps=200, checkpoint_every=50)
    t0 = time.time()
    result = pretrain(images, small_config, config, seed=0,
                      out_dir=acc_dir / "distill-out")
    return SimpleNamespace(result=result, config=config, images=images,
                           seconds=time.time() - t0)


def _fit_and_eval(encoder_config, tr, te, task, warm, joint):
    enc = new_encoder(encoder_config, seed=11)
    head, _ = train_head_for_task(enc, tr, task, warm)
    for stage in joint:
        finetune_task(enc, head, tr, task, stage)
    metrics, _ = evaluate_task(enc, head, te, task)
    return metrics


# --- the ten gates -----------------------------------------------------------

def test_gate_01_metric_oracles(capsys):
    """Ranking metrics equal quadratic oracles; overlap metrics match hand cases."""
    t0 = time.time()
    bad = []
    rng = np.random.default_rng(424)
    auc_miss = ap_miss = 0
    for _ in range(1000):
        scores, labels = _random_case(rng)
        if roc_auc(scores, labels) != _auc_pairwise(scores, labels):
            auc_miss += 1
        if pr_curve_and_ap(scores, labels)[2] != _ap_stepwise(scores, labels):
            ap_miss += 1
    _check(bad, auc_miss == 0, f"{auc_miss}/1000 AUC cases off the pairwise oracle")
    _check(bad, ap_miss == 0, f"{ap_miss}/1000 AP cases off the stepwise oracle")

    pred = np.array([[1, 1, 0], [0, 1, 0]])
    target = np.array([[1, 0, 0], [0, 1, 1]])
    _check(bad, abs(dice(pred, target) - 2.0 / 3.0) < 1e-12, "dice hand case")
    _check(bad, dice(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0, "dice both-empty")
    _check(bad, dice(np.eye(2), 1 - np.eye(2)) == 0.0, "dice disjoint")
    _check(bad, abs(f1_binary([1, 1, 0, 0, 1], [1, 0, 0, 1, 1]) - 2.0 / 3.0) < 1e-12,
           "f1 hand case")
    _check(bad, f1_binary([0, 0], [0, 0]) == 0.0, "f1 empty denominator")
    got = landmark_error(np.array([[[0.0, 0.0], [3.0, 4.0]]]),
                         np.array([[[1.0, 1.0], [0.0, 0.0]]]))
    _check(bad, abs(got - (np.sqrt(2.0) + 5.0) / 2.0) < 1e-12, "landmark-error hand case")
    _report(capsys, 1, "metric oracle equivalence", bad,
            "1000/1000 AUC+AP exact, hand cases at 1e-12", 60, time.time() - t0)


def test_gate_02_gradient_fidelity(tiny_config, capsys):
    """Backprop through the encoder and every head matches central differences."""
    t0 = time.time()
    bad = []
    rng = np.random.default_rng(7)
    imgs = rng.random((2, 8, 8, 1))
    enc = new_encoder(tiny_config, seed=3)
    live = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in enc.params.items()}
    tokens, _ = encoder_forward(live, imgs, tiny_config)
    (tokens * tokens).mean().backward()
    for name in enc.params:
        def loss_for(wdata, _n=name):
            ps = {k: Tensor(v.data if k != _n else wdata) for k, v in enc.params.items()}
            t, _ = encoder_forward(ps, imgs, tiny_config)
            return float((t * t).mean().data)

        num = ad.numeric_grad(loss_for, enc.params[name].data, h=1e-5)
        rel = (np.abs(num - live[name].grad) / np.maximum(np.abs(num), 1e-6)).max()
        _check(bad, rel < 1e-4, f"encoder {name} rel err {rel:.2e}")

    def fd_head(tag, head, loss_fn):
        zero_grads(head.params)
        loss_fn().backward()
        grads = {k: p.grad.copy() for k, p in head.params.items()}
        for name, p in head.params.items():
            def loss_for(wdata, _n=name):
                saved = head.params[_n]
                head.params[_n] = Tensor(wdata)
                try:
                    return float(loss_fn().data)
                finally:
                    head.params[_n] = saved

            num = ad.numeric_grad(loss_for, p.data, h=1e-5)
            rel = (np.abs(num - grads[name]) / np.maximum(np.abs(num), 1e-6)).max()
            _check(bad, rel < 1e-4, f"{tag} {name} rel err {rel:.2e}")

    feats = rng.normal(size=(4, 8))
    labels = np.eye(3)[rng.integers(0, 3, size=4)]
    clf = init_classifier(8, 3, seed=0)
    fd_head("classifier", clf,
            lambda: (ad.log_softmax(classify_logits(clf, feats)) * labels).sum() * (-0.25))

    patches = rng.normal(size=(2, 4, 8))
    seg = init_segmenter(8, 2, grid=2, upsample=2, seed=0)
    seg_onehot = np.eye(2)[rng.integers(0, 2, size=(2, 4, 4))]
    fd_head("segmenter", seg,
            lambda: (ad.log_softmax(segment_logits(seg, patches), axis=-1)
                     * seg_onehot).sum() * (-1.0 / 32.0))

    lmk = init_landmark_head(8, grid=2, upsample=2, seed=0)
    hm = rng.random((2, 4, 4, 3))
    fd_head("landmark head", lmk,
            lambda: ((landmark_logits(lmk, patches) - hm)
                     * (landmark_logits(lmk, patches) - hm)).mean())

    reg = init_regressor(8, 5, seed=0, hidden_dim=6)
    z = rng.normal(size=(4, 5))
    fd_head("regressor", reg,
            lambda: ((regress_biomarkers(reg, feats, raw=True) - z)
                     * (regress_biomarkers(reg, feats, raw=True) - z)).mean())

    for_head = init_forecaster(8, seed=0, hidden_dim=6)
    deltas = rng.uniform(100.0, 2000.0, size=4)
    y = rng.integers(0, 2, size=4).astype(np.float64)
    fd_head("forecaster", for_head,
            lambda: (ad.softplus(forecast_logit(for_head, feats, deltas))
                     - forecast_logit(for_head, feats, deltas) * y).mean())

    _report(capsys, 2, "gradient fidelity", bad,
            "encoder + 5 heads, central differences at 1e-4", 120, time.time() - t0)


def test_gate_03_distillation_behavior(distill_run, small_config, capsys):
    """Loss drops, projections stay spread; no centering + constant input collapses."""
    t0 = time.time()
    bad = []
    hist = distill_run.result.loss_history
    first = float(np.mean(hist[:20]))
    last = float(np.mean(hist[-20:]))
    _check(bad, last < first, f"final-20 mean {last:.3f} not below first-20 {first:.3f}")

    probe = distill_run.images[:64]
    spread_live = projection_spread(distill_run.result.state, probe)
    _check(bad, spread_live > 1e-3, f"trained projection spread {spread_live:.2e} <= 1e-3")

    constant = np.full((16, 32, 32, 1), 0.5)
    off = SelfDistillConfig(n_global=2, n_local=4, global_frac=1.0, local_frac=0.8,
                            teacher_momentum=0.999, proj_dim=32, lr=1e-4,
                            batch_size=8, steps=200, centering_enabled=False)
    collapsed = pretrain(constant, small_config, off, seed=0)
    spread_off = projection_spread(collapsed.state, probe)
    _check(bad, spread_off < 1e-4, f"uncentered constant-input spread {spread_off:.2e}")

    elapsed = distill_run.seconds + (time.time() - t0)
    _report(capsys, 3, "self-distillation behavior", bad,
            f"loss {first:.2f}->{last:.2f}, spread {spread_live:.1e} vs {spread_off:.1e}",
            300, elapsed)


def test_gate_04_shared_decoder(small_encoder, acc_dir, capsys):
    """One classifier serves three imaging modes without its weights drifting."""
    t0 = time.time()
    bad = []
    parts = []
    for i, mod in enumerate((Modality.FUNDUS, Modality.OCT, Modality.UBM)):
        man = generate_toy_dataset(
            ToyDataSpec(task=ToyTask.CLASSIFY, n_images=48, image_size=32, n_classes=3,
                        modality=mod, patch_size=8),
            seed=301 + i, out_dir=acc_dir / f"mod-{mod.value.lower()}")
        tr, _, te = split_dataset(man, (0.5, 0.0, 0.5), seed=0)
        parts.append((mod, tr, te))

    train_feats = np.concatenate([extract_features(small_encoder, tr) for _, tr, _ in parts])
    train_labels = np.concatenate([classification_labels(tr) for _, tr, _ in parts])
    head = init_classifier(32, 3, seed=0)
    fit_classifier(head, train_feats, train_labels,
                   TrainConfig(lr=0.05, steps=400, batch_size=32, seed=0))
    digest0 = head_digest(head)

    probs, labels = [], []
    for mod, _, te in parts:
        m, aux = evaluate_classifier(head, extract_features(small_encoder, te),
                                     classification_labels(te))
        _check(bad, head_digest(head) == digest0,
               f"digest changed after evaluating {mod.value}")
        probs.append(aux["probs"])
        labels.append(classification_labels(te))
    aucs = ovr_auc(np.concatenate(probs), np.concatenate(labels))
    for c, a in enumerate(aucs):
        _check(bad, a >= 0.90, f"one-vs-rest AUC class {c} = {a:.3f} < 0.90")
    _report(capsys, 4, "shared decoder across modes", bad,
            "3 modes, digest stable, per-class AUC " +
            "/".join(f"{a:.3f}" for a in aucs), 300, time.time() - t0)


def test_gate_05_probing_protocol(small_encoder, acc_dir, capsys):
    """Linear probing reads the encoder without writing to it."""
    t0 = time.time()
    bad = []
    man = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.CLASSIFY, n_images=60, image_size=32, n_classes=2,
                    patch_size=8), seed=305, out_dir=acc_dir / "probe-data")
    tr, _, te = split_dataset(man, (0.6, 0.0, 0.4), seed=0)
    result = probe_encoder(small_encoder, tr, te, ProbeConfig(seed=0))
    _check(bad, result.encoder_unchanged, "probing altered the encoder digest")
    auc = result.metrics["mean_auc"]
    _check(bad, auc >= 0.95, f"probe AUC {auc:.3f} < 0.95")

    f_tr = extract_features(small_encoder, tr)
    f_te = extract_features(small_encoder, te)
    y_tr = classification_labels(tr)
    y_te = classification_labels(te)
    nulls = [shuffled_label_probe(f_tr, y_tr, f_te, y_te, ProbeConfig(seed=0), seed=s)
             for s in range(5)]
    null = float(np.mean(nulls))
    _check(bad, 0.35 <= null <= 0.65, f"shuffled-label AUC {null:.3f} outside [0.35, 0.65]")
    _report(capsys, 5, "probing protocol", bad,
            f"AUC {auc:.3f}, shuffled null {null:.3f}, encoder untouched",
            120, time.time() - t0)


def test_gate_06_few_shot_trend(small_encoder, acc_dir, capsys):
    """More labeled examples per class never hurt beyond one-sigma noise."""
    t0 = time.time()
    bad = []
    man = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.CLASSIFY, n_images=72, image_size=32, n_classes=2,
                    patch_size=8), seed=306, out_dir=acc_dir / "fewshot-data")
    tr, _, te = split_dataset(man, (0.5, 0.0, 0.5), seed=0)
    result = few_shot_probe(extract_features(small_encoder, tr), classification_labels(tr),
                            extract_features(small_encoder, te), classification_labels(te),
                            [1, 5, 10], ProbeConfig(episodes=5, steps=200, seed=0))
    for k_lo, k_hi in zip(result.k_values, result.k_values[1:]):
        lo, hi = result.mean_auc[k_lo], result.mean_auc[k_hi]
        _check(bad, hi >= lo - result.std_auc[k_lo],
               f"mean AUC drops {lo:.3f}@k={k_lo} -> {hi:.3f}@k={k_hi} "
               f"beyond one std {result.std_auc[k_lo]:.3f}")
    trend = ", ".join(
        f"k={k}: {result.mean_auc[k]:.3f}+-{result.std_auc[k]:.3f}" for k in result.k_values)
    _report(capsys, 6, "few-shot trend", bad, trend, 180, time.time() - t0)


def test_gate_07_spatial_heads(small_encoder, acc_dir, capsys):
    """Dense segmentation, landmark placement, and heatmap readout stay sharp."""
    t0 = time.time()
    bad = []
    man_v = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.SEGMENT_VESSEL, n_images=48, image_size=32, n_classes=2,
                    patch_size=8), seed=307, out_dir=acc_dir / "vessel-data")
    tr_v, _, te_v = split_dataset(man_v, (0.6, 0.0, 0.4), seed=0)
    head_v, _ = train_head_for_task(small_encoder, tr_v, "segment-vessel",
                                    TrainConfig(lr=0.05, steps=400, batch_size=16, seed=0))
    m_v, _ = evaluate_task(small_encoder, head_v, te_v, "segment-vessel")
    _check(bad, m_v["dice"] >= 0.70, f"vessel dice {m_v['dice']:.3f} < 0.70")

    man_l = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.LANDMARK, n_images=LANDMARK_IMAGES, image_size=128,
                    n_classes=2, patch_size=16), seed=308, out_dir=acc_dir / "landmark-data")
    tr_l, _, te_l = split_dataset(man_l, (0.6, 0.0, 0.4), seed=0)
    m_l = _fit_and_eval(LANDMARK_ENCODER, tr_l, te_l, "landmark",
                        LANDMARK_WARM, LANDMARK_JOINT)
    err = m_l["mean_error_px"]
    _check(bad, err < 5.0, f"landmark mean error {err:.2f}px >= 5px at 128x128")

    rng = np.random.default_rng(0)
    pts = np.stack([rng.uniform(10.0, 118.0, size=3), rng.uniform(10.0, 118.0, size=3)],
                   axis=-1)
    hm = heatmap_targets(pts[None], 128, sigma=2.0)[0]
    rec = np.array([soft_argmax(hm[:, :, k]) for k in range(3)])
    peak_err = float(np.abs(rec - pts).max())
    _check(bad, peak_err <= 0.5, f"heatmap soft-argmax off by {peak_err:.3f}px")
    delta = np.zeros((128, 128))
    delta[97, 23] = 1.0
    _check(bad, soft_argmax(delta) == (23.0, 97.0), "delta-map soft-argmax not exact")

    _report(capsys, 7, "spatial heads", bad,
            f"dice {m_v['dice']:.3f}, landmark {err:.2f}px, soft-argmax {peak_err:.3f}px",
            480, time.time() - t0)


def test_gate_08_forecast_and_regression(acc_dir, capsys):
    """Progression calls and biomarker panels track their generative latents."""
    t0 = time.time()
    bad = []
    man_f = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.FORECAST, n_images=FORECAST_IMAGES, image_size=64,
                    n_classes=2, noise_level=0.02, patch_size=16),
        seed=309, out_dir=acc_dir / "forecast-data")
    tr_f, _, te_f = split_dataset(man_f, (0.6, 0.0, 0.4), seed=0)
    enc_cfg = EncoderConfig(patch_size=8, embed_dim=32, depth=2, n_heads=4, image_size=64)
    m_f = _fit_and_eval(enc_cfg, tr_f, te_f, "forecast", FORECAST_WARM, FORECAST_JOINT)
    _check(bad, m_f["f1"] >= 0.85, f"forecast F1 {m_f['f1']:.3f} < 0.85")

    man_b = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.BIOMARKER, n_images=BIOMARKER_IMAGES,
                    image_size=BIOMARKER_ENCODER.image_size, n_classes=2,
                    noise_level=0.02, patch_size=16),
        seed=310, out_dir=acc_dir / "biomarker-data")
    tr_b, _, te_b = split_dataset(man_b, (0.6, 0.0, 0.4), seed=0)
    m_b = _fit_and_eval(BIOMARKER_ENCODER, tr_b, te_b, "biomarker",
                        BIOMARKER_WARM, BIOMARKER_JOINT)
    named = {k[3:]: v for k, v in m_b.items() if k.startswith("r2_")}
    for name, r2 in named.items():
        _check(bad, r2 >= 0.9, f"{name} R^2 {r2:.3f} < 0.9")

    _check(bad, biomarker_accuracy([110.0, 80.0], [100.0, 100.0]) == 1.0,
           "tolerance-band oracle: both inside")
    _check(bad, biomarker_accuracy([121.0], [100.0]) == 0.0,
           "tolerance-band oracle: just outside")
    _check(bad, biomarker_accuracy([[1.05, 2.5], [0.79, 4.0]],
                                   [[1.0, 2.0], [1.0, 4.0]]) == 0.5,
           "tolerance-band oracle: half inside")
    _check(bad, biomarker_accuracy([0.0], [0.0]) == 1.0,
           "tolerance-band oracle: zero reference")
    _check(bad, biomarker_accuracy([90.0], [100.0], rel_tol=0.1) == 1.0,
           "tolerance-band oracle: boundary inclusive")
    _check(bad, biomarker_accuracy([115.0], [100.0], rel_tol=0.1) == 0.0,
           "tolerance-band oracle: tighter band")

    summary = ", ".join(f"{k} {v:.2f}" for k, v in named.items())
    _report(capsys, 8, "forecast + regression heads", bad,
            f"F1 {m_f['f1']:.3f}; {summary}", 240, time.time() - t0)


def test_gate_09_synthetic_sweep(small_encoder, acc_dir, capsys):
    """The mixing-ratio study completes, validates, and reproduces byte-for-byte."""
    t0 = time.time()
    bad = []
    man = generate_toy_dataset(
        ToyDataSpec(task=ToyTask.CLASSIFY, n_images=64, image_size=32, n_classes=3,
                    patch_size=8), seed=311, out_dir=acc_dir / "sweep-data")
    tr, _, te = split_dataset(man, (0.75, 0.0, 0.25), seed=0)
    config = SweepConfig()

    result = run_ratio_sweep(small_encoder, tr, te, config, acc_dir / "sweep-a")
    _check(bad, len(result.cells) == len(config.ratios) * len(config.seeds),
           f"{len(result.cells)} cells for {len(config.ratios)}x{len(config.seeds)} grid")
    cell_keys = {"ratio", "seed", "n_real", "n_synth", "metric"}
    for cell in result.cells:
        _check(bad, set(cell) == cell_keys, f"cell keys {sorted(cell)}")
        _check(bad, isinstance(cell["metric"], float), "cell metric not a float")
    row_keys = {"ratio", "n_real", "n_synth", "metric_mean", "metric_std", "seeds"}
    for row in result.rows:
        _check(bad, set(row) == row_keys, f"row keys {sorted(row)}")
    ratios = [tuple(r["ratio"]) for r in result.rows]
    _check(bad, (1, 0) in ratios, "all-real endpoint missing")
    _check(bad, (0, 1) in ratios, "all-synthetic endpoint missing")

    run_ratio_sweep(small_encoder, tr, te, config, acc_dir / "sweep-b")
    for fname in ("sweep.json", "sweep.csv"):
        a = (acc_dir / "sweep-a" / fname).read_bytes()
        b = (acc_dir / "sweep-b" / fname).read_bytes()
        _check(bad, a == b, f"{fname} differs between identical runs")

    best = max(result.rows, key=lambda r: r["metric_mean"])
    _report(capsys, 9, "synthetic-mix sweep", bad,
            f"12 cells, endpoints present, byte-stable; best ratio "
            f"{best['ratio'][0]}:{best['ratio'][1]} at {best['metric_mean']:.3f} "
            "(reported, not asserted)", 900, time.time() - t0)


def test_gate_10_attention_explainability(distill_run, acc_dir, capsys):
    """Attention maps are distributions and sharpen over the checkpoint series."""
    t0 = time.time()
    bad = []
    state = load_checkpoint(distill_run.result.final_path)
    image = distill_run.images[0]

    raw = attention_maps(state, image[None], layer=-1)[0]
    row_sums = raw.sum(axis=-1)
    _check(bad, np.abs(row_sums - 1.0).max() <= 1e-5,
           f"raw attention rows off by {np.abs(row_sums - 1.0).max():.2e}")
    maps = head_attention(state, image)
    per_head_sums = maps.per_head.reshape(maps.n_heads, -1).sum(axis=1)
    _check(bad, np.abs(per_head_sums - 1.0).max() <= 1e-5,
           f"renormalized head maps off by {np.abs(per_head_sums - 1.0).max():.2e}")
    _check(bad, np.allclose(maps.merged, maps.per_head.mean(axis=0), atol=1e-12),
           "merged map is not the head mean")

    ckpts = distill_run.result.checkpoints
    _check(bad, len(ckpts) >= 4, f"only {len(ckpts)} checkpoints saved")
    csv_path = acc_dir / "attention-evolution.csv"
    evo = attention_evolution([str(p) for p in ckpts], image, out_csv=csv_path)
    _check(bad, all(a < b for a, b in zip(evo.steps, evo.steps[1:])),
           f"checkpoint steps not strictly increasing: {evo.steps}")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    _check(bad, rows[0] == ["step", "checkpoint", "foreground_mass"], "CSV header")
    _check(bad, len(rows) - 1 == len(ckpts), f"CSV has {len(rows) - 1} data rows")

    _report(capsys, 10, "attention explainability", bad,
            f"rows sum to 1, merged = head mean, {len(ckpts)} checkpoints traced",
            120, time.time() - t0)
