"""Label-free encoder pretraining by self-distillation.

Two networks share one architecture: the student follows gradients, the
teacher is an exponential moving average of the student. Each image is
cropped into a few large and several small views, all resized back to
the input size; every student view is pulled toward the teacher's
distribution on every *other* large view. The teacher's logits are
centered by a running mean and sharpened by a lower temperature, which
together keep the outputs from collapsing to a single point.

Per step: student gradient update, then teacher EMA update, then center
update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderState, encoder_forward, init_encoder, save_checkpoint
from .errors import CropLargerThanImage, DivergedLoss, InvalidSpec
from .imaging import bilinear_resize
from .optim import RmsProp, zero_grads

__all__ = [
    "SelfDistillConfig",
    "PretrainState",
    "PretrainResult",
    "init_pretrain",
    "multi_crop",
    "student_project",
    "distillation_loss",
    "ema_update",
    "center_update",
    "pretrain",
    "projection_spread",
]


@dataclass(frozen=True)
class SelfDistillConfig:
    n_global: int = 2
    n_local: int = 4
    global_frac: float = 0.75
    local_frac: float = 0.35
    teacher_momentum: float = 0.996
    center_momentum: float = 0.9
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    proj_dim: int = 256
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 100
    checkpoint_every: int = 0  # 0 -> only the final weights
    centering_enabled: bool = True
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.n_global < 2:
            raise InvalidSpec(f"need at least 2 large views, got {self.n_global}")
        if self.n_local < 0:
            raise InvalidSpec(f"n_local must be >= 0, got {self.n_local}")
        for name in ("global_frac", "local_frac"):
            frac = getattr(self, name)
            if frac > 1.0:
                raise CropLargerThanImage(f"{name} {frac} exceeds the full image")
            if frac <= 0.0:
                raise InvalidSpec(f"{name} must be positive, got {frac}")
        if self.local_frac >= self.global_frac:
            raise InvalidSpec(
                f"small views must come from smaller regions: local_frac "
                f"{self.local_frac} >= global_frac {self.global_frac}"
            )
        if not (0.0 < self.teacher_temp < self.student_temp):
            raise InvalidSpec(
                "teacher_temp must sharpen below student_temp, got "
                f"{self.teacher_temp} vs {self.student_temp}"
            )
        for name in ("teacher_momentum", "center_momentum"):
            m = getattr(self, name)
            if not (0.0 <= m < 1.0):
                raise InvalidSpec(f"{name} must be in [0, 1), got {m}")
        if self.proj_dim < 2:
            raise InvalidSpec(f"proj_dim must be >= 2, got {self.proj_dim}")
        if self.batch_size < 1 or self.steps < 1:
            raise InvalidSpec("batch_size and steps must be >= 1")


def _init_projector(embed_dim: int, proj_dim: int, rng: np.random.Generator) -> dict[str, Tensor]:
    hidden = 2 * embed_dim
    # fan-in scaling keeps logit spread at init large enough that the
    # dispersion statistic starts well clear of its collapse floor
    return {
        "proj/w1": Tensor(rng.normal(0.0, embed_dim ** -0.5, size=(embed_dim, hidden)),
                          requires_grad=True),
        "proj/b1": Tensor(np.zeros(hidden), requires_grad=True),
        "proj/w2": Tensor(rng.normal(0.0, hidden ** -0.5, size=(hidden, proj_dim)),
                          requires_grad=True),
        "proj/b2": Tensor(np.zeros(proj_dim), requires_grad=True),
    }


@dataclass
class PretrainState:
    encoder_config: EncoderConfig
    distill_config: SelfDistillConfig
    student: dict[str, Tensor]  # encoder weights + projector weights
    teacher: dict[str, Tensor]  # same names, never takes gradients
    center: np.ndarray  # (proj_dim,)
    step: int = 0
    modality: str | None = None

    def student_encoder(self) -> EncoderState:
        params = {k: v for k, v in self.student.items() if not k.startswith("proj/")}
        return EncoderState(config=self.encoder_config, params=params, modality=self.modality)

    def teacher_encoder(self) -> EncoderState:
        params = {k: v for k, v in self.teacher.items() if not k.startswith("proj/")}
        return EncoderState(config=self.encoder_config, params=params, modality=self.modality)


def init_pretrain(
    encoder_config: EncoderConfig,
    distill_config: SelfDistillConfig,
    seed: int,
    modality: str | None = None,
) -> PretrainState:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 7001)))
    student = init_encoder(encoder_config, seed)
    student.update(_init_projector(encoder_config.embed_dim, distill_config.proj_dim, rng))
    # teacher starts as an independent draw: it only has to be shape-congruent,
    # and a decorrelated start keeps step-0 loss from being trivially small
    t_seed = int(np.random.SeedSequence((seed, 7002)).generate_state(1)[0])
    t_rng = np.random.default_rng(np.random.SeedSequence((seed, 7003)))
    teacher = init_encoder(encoder_config, t_seed)
    teacher.update(_init_projector(encoder_config.embed_dim, distill_config.proj_dim, t_rng))
    teacher = {k: Tensor(v.data.copy(), requires_grad=False) for k, v in teacher.items()}
    return PretrainState(
        encoder_config=encoder_config,
        distill_config=distill_config,
        student=student,
        teacher=teacher,
        center=np.zeros(distill_config.proj_dim),
        modality=modality,
    )


def multi_crop(
    images: np.ndarray,
    config: SelfDistillConfig,
    image_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Random square views per image, all resized to ``image_size``.

    Returns ``n_global + n_local`` batches; the first ``n_global`` are the
    large views the teacher consumes.
    """
    if images.ndim == 3:
        images = images[..., None]
    out: list[np.ndarray] = []
    fracs = [config.global_frac] * config.n_global + [config.local_frac] * config.n_local
    for frac in fracs:
        side = max(1, int(round(frac * image_size)))
        if side > image_size:
            raise CropLargerThanImage(f"crop side {side} exceeds image {image_size}")
        batch = np.empty((len(images), image_size, image_size, images.shape[3]))
        for i, img in enumerate(images):
            top = int(rng.integers(0, image_size - side + 1))
            left = int(rng.integers(0, image_size - side + 1))
            crop = img[top:top + side, left:left + side, :]
            batch[i] = (crop if side == image_size
                        else bilinear_resize(crop, image_size, image_size))
        out.append(batch)
    return out


def student_project(
    params: dict[str, Tensor], images: np.ndarray, config: EncoderConfig
) -> Tensor:
    """Summary-token projection logits (B, proj_dim)."""
    tokens, _ = encoder_forward(params, images, config)
    cls = tokens[:, 0, :]
    h = ad.gelu(cls @ params["proj/w1"] + params["proj/b1"])
    return h @ params["proj/w2"] + params["proj/b2"]


def distillation_loss(
    student_logits: list[Tensor],
    teacher_logits: list[np.ndarray],
    center: np.ndarray,
    config: SelfDistillConfig,
) -> Tensor:
    """Cross-entropy from sharpened teacher views to all other student views.

    Pairs where both sides are the same crop index are skipped. The
    teacher side is plain data: gradients flow only through the student.
    """
    pairs = 0
    total: Tensor | None = None
    for ti, t_logit in enumerate(teacher_logits):
        t = (np.asarray(t_logit) - center) / config.teacher_temp
        t = t - t.max(axis=-1, keepdims=True)
        e = np.exp(t)
        p = e / e.sum(axis=-1, keepdims=True)
        for si, s_logit in enumerate(student_logits):
            if si == ti:
                continue
            logq = ad.log_softmax(s_logit * (1.0 / config.student_temp), axis=-1)
            ce = -(Tensor(p) * logq).sum(axis=-1).mean()
            total = ce if total is None else total + ce
            pairs += 1
    if total is None:
        raise InvalidSpec("no crop pairs to distill")
    return total * (1.0 / pairs)


def ema_update(teacher: dict[str, Tensor], student: dict[str, Tensor], momentum: float) -> None:
    for name in sorted(teacher):
        t, s = teacher[name], student[name]
        t.data *= momentum
        t.data += (1.0 - momentum) * s.data


def center_update(center: np.ndarray, teacher_logits: list[np.ndarray], momentum: float) -> np.ndarray:
    batch = np.concatenate([np.asarray(t) for t in teacher_logits], axis=0)
    return momentum * center + (1.0 - momentum) * batch.mean(axis=0)


@dataclass
class PretrainResult:
    state: PretrainState
    loss_history: list[float] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_path: Path | None = None


def pretrain(
    images: np.ndarray,
    encoder_config: EncoderConfig,
    distill_config: SelfDistillConfig,
    seed: int,
    out_dir: str | Path | None = None,
    modality: str | None = None,
) -> PretrainResult:
    """Run the full self-distillation loop over an image array (N, S, S, C).

    Writes ``checkpoints/step-*.npz`` (teacher weights) when
    ``checkpoint_every`` is set, a final ``encoder.npz``, and
    ``loss_history.csv`` when ``out_dir`` is given.
    """
    if images.ndim == 3:
        images = images[..., None]
    n = len(images)
    if n < distill_config.batch_size:
        raise InvalidSpec(f"{n} images cannot fill a batch of {distill_config.batch_size}")
    state = init_pretrain(encoder_config, distill_config, seed, modality=modality)
    opt = RmsProp(lr=distill_config.lr)
    result = PretrainResult(state=state)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if distill_config.checkpoint_every > 0:
            ckpt_dir = out_dir / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)

    for step in range(distill_config.steps):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 7100, step)))
        idx = rng.choice(n, size=distill_config.batch_size, replace=False)
        crops = multi_crop(images[idx], distill_config, encoder_config.image_size, rng)

        with ad.no_grad():
            teacher_logits = [
                student_project(state.teacher, crop, encoder_config).data
                for crop in crops[:distill_config.n_global]
            ]
        student_logits = [
            student_project(state.student, crop, encoder_config) for crop in crops
        ]
        loss = distillation_loss(student_logits, teacher_logits, state.center, distill_config)
        value = loss.item()
        if not math.isfinite(value) or abs(value) > 1e6:
            raise DivergedLoss(f"loss {value} at step {step}")
        result.loss_history.append(value)

        zero_grads(state.student)
        loss.backward()
        if distill_config.grad_clip > 0:
            from .optim import clip_grad_norm
            clip_grad_norm(state.student, distill_config.grad_clip)
        opt.step(state.student)
        ema_update(state.teacher, state.student, distill_config.teacher_momentum)
        if distill_config.centering_enabled:
            state.center = center_update(
                state.center, teacher_logits, distill_config.center_momentum)
        state.step = step + 1

        if (ckpt_dir is not None
                and distill_config.checkpoint_every > 0
                and (step + 1) % distill_config.checkpoint_every == 0):
            path = ckpt_dir / f"step-{step + 1:06d}.npz"
            save_checkpoint(state.teacher_encoder(), path, {"pretrain_step": step + 1})
            result.checkpoints.append(path)

    if out_dir is not None:
        result.final_path = save_checkpoint(
            state.teacher_encoder(), out_dir / "encoder.npz",
            {"pretrain_step": state.step},
        )
        with open(out_dir / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, v in enumerate(result.loss_history):
                writer.writerow([i, f"{v:.8f}"])
    return result


def projection_spread(state: PretrainState, probe_images: np.ndarray) -> float:
    """Mean per-dimension spread of the student's output distribution.

    Softmax at the student temperature, then the standard deviation of
    each dimension across the probe batch, averaged over dimensions.
    Collapse shows up as a value near zero.
    """
    if probe_images.ndim == 3:
        probe_images = probe_images[..., None]
    with ad.no_grad():
        logits = student_project(state.student, probe_images, state.encoder_config).data
    z = logits / state.distill_config.student_temp
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    return float(probs.std(axis=0, ddof=0).mean())
