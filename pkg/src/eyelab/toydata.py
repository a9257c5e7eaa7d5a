"""Procedural toy datasets for every supported task.

Each task renders a grayscale pattern whose controlling parameters are
also the ground truth, so the label signal is in the pixels by
construction:

* CLASSIFY        class sets brightness, grating frequency, ring radius
* SEGMENT_VESSEL  branching random-walk tree, mask is the stamped tree
* SEGMENT_LAYER   stacked horizontal bands split by smooth boundaries
* LANDMARK        two-arm wedge; apex, a blob on the upper arm, and the
                  blob's perpendicular foot on the lower arm
* BIOMARKER       five latent factors rendered as image attributes and
                  mapped linearly to a 38-entry panel
* FORECAST        cup-to-rim cue plus visit interval decide the outcome

Generation is keyed by ``(seed, task, image index)`` through
``np.random.SeedSequence`` so output bytes are reproducible.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InvalidSpec
from .imaging import save_png, to_uint8
from .records import (
    DEFAULT_PANEL_ID,
    BiomarkerPanel,
    DiseaseLabel,
    ImageRecord,
    LandmarkSet,
    LongitudinalPair,
    Manifest,
    Modality,
    panel_names,
    save_manifest,
)

__all__ = [
    "ToyTask",
    "ToyDataSpec",
    "WedgeParams",
    "generate_toy_dataset",
    "derive_wedge_landmarks",
    "toy_spec_from_json",
    "toy_spec_to_json",
]


class ToyTask(enum.Enum):
    CLASSIFY = "CLASSIFY"
    SEGMENT_VESSEL = "SEGMENT_VESSEL"
    SEGMENT_LAYER = "SEGMENT_LAYER"
    LANDMARK = "LANDMARK"
    BIOMARKER = "BIOMARKER"
    FORECAST = "FORECAST"


_TASK_MODALITY = {
    ToyTask.CLASSIFY: Modality.FUNDUS,
    ToyTask.SEGMENT_VESSEL: Modality.FUNDUS,
    ToyTask.SEGMENT_LAYER: Modality.OCT,
    ToyTask.LANDMARK: Modality.UBM,
    ToyTask.BIOMARKER: Modality.EXTERNAL_EYE,
    ToyTask.FORECAST: Modality.FUNDUS,
}

_TASK_SALT = {
    ToyTask.CLASSIFY: 101,
    ToyTask.SEGMENT_VESSEL: 102,
    ToyTask.SEGMENT_LAYER: 103,
    ToyTask.LANDMARK: 104,
    ToyTask.BIOMARKER: 105,
    ToyTask.FORECAST: 106,
}

# fraction of pixels a vessel mask must cover
VESSEL_FG_MIN = 0.02
VESSEL_FG_MAX = 0.25

FORECAST_DELTA_SCALE = 1000.0  # days; matches the forecaster's input normalization
FORECAST_THRESHOLD = 0.80
FORECAST_DELTA_WEIGHT = 0.25

# named panel rows as affine functions of the first five latent factors
NAMED_BIOMARKER_MAP: dict[str, tuple[int, float, float]] = {
    "HGB": (0, 110.0, 60.0),
    "RBC": (1, 3.5, 2.0),
    "UA": (2, 200.0, 200.0),
    "MCHC": (3, 310.0, 40.0),
    "TC": (4, 3.0, 3.0),
}


@dataclass(frozen=True)
class ToyDataSpec:
    task: ToyTask
    n_images: int = 64
    image_size: int = 64
    n_classes: int = 3
    modality: Modality | None = None  # None -> task default
    noise_level: float = 0.05
    patch_size: int = 16  # only validated for divisibility; encoders own the value
    channels: int = 1

    def __post_init__(self):
        if self.n_images < 1:
            raise InvalidSpec(f"n_images must be >= 1, got {self.n_images}")
        if self.image_size < 16:
            raise InvalidSpec(f"image_size must be >= 16, got {self.image_size}")
        if self.n_classes < 2:
            raise InvalidSpec(f"n_classes must be >= 2, got {self.n_classes}")
        if not (0.0 <= self.noise_level <= 1.0):
            raise InvalidSpec(f"noise_level must be in [0, 1], got {self.noise_level}")
        if self.patch_size < 1 or self.image_size % self.patch_size != 0:
            raise InvalidSpec(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.channels != 1:
            raise InvalidSpec(f"only single-channel toy images are supported, got {self.channels}")

    @property
    def effective_modality(self) -> Modality:
        return self.modality if self.modality is not None else _TASK_MODALITY[self.task]


_SPEC_KEYS = {
    "task", "n_images", "image_size", "n_classes", "modality",
    "noise_level", "patch_size", "channels",
}


def toy_spec_from_json(obj: Mapping) -> ToyDataSpec:
    """Strict parse; unknown keys are rejected by name."""
    unknown = set(obj) - _SPEC_KEYS
    if unknown:
        raise InvalidSpec(f"unknown toy spec key {sorted(unknown)[0]!r}")
    if "task" not in obj:
        raise InvalidSpec("toy spec requires 'task'")
    try:
        task = ToyTask(str(obj["task"]).upper())
    except ValueError:
        raise InvalidSpec(f"unknown task {obj['task']!r}") from None
    modality = None
    if obj.get("modality") is not None:
        try:
            modality = Modality(str(obj["modality"]).upper())
        except ValueError:
            raise InvalidSpec(f"unknown modality {obj['modality']!r}") from None
    try:
        return ToyDataSpec(
            task=task,
            n_images=int(obj.get("n_images", 64)),
            image_size=int(obj.get("image_size", 64)),
            n_classes=int(obj.get("n_classes", 3)),
            modality=modality,
            noise_level=float(obj.get("noise_level", 0.05)),
            patch_size=int(obj.get("patch_size", 16)),
            channels=int(obj.get("channels", 1)),
        )
    except (TypeError, ValueError) as e:
        raise InvalidSpec(f"bad toy spec value: {e}") from None


def toy_spec_to_json(spec: ToyDataSpec) -> dict:
    return {
        "task": spec.task.value,
        "n_images": spec.n_images,
        "image_size": spec.image_size,
        "n_classes": spec.n_classes,
        "modality": None if spec.modality is None else spec.modality.value,
        "noise_level": spec.noise_level,
        "patch_size": spec.patch_size,
        "channels": spec.channels,
    }


# --- drawing primitives -----------------------------------------------------

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:size, 0:size]
    return y.astype(np.float64), x.astype(np.float64)


def _disc(size: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Antialiased filled disc in [0, 1]."""
    y, x = _grid(size)
    d = np.sqrt((y - cy) ** 2 + (x - cx) ** 2)
    return np.clip(r - d + 0.5, 0.0, 1.0)


def _ring(size: int, cy: float, cx: float, r: float, thickness: float) -> np.ndarray:
    y, x = _grid(size)
    d = np.abs(np.sqrt((y - cy) ** 2 + (x - cx) ** 2) - r)
    return np.clip(thickness / 2.0 - d + 0.5, 0.0, 1.0)


def _grating(size: int, freq: float, angle: float, phase: float) -> np.ndarray:
    """Sinusoid in [-1, 1]; freq counts cycles across the image."""
    y, x = _grid(size)
    t = (x * math.cos(angle) + y * math.sin(angle)) / size
    return np.sin(2.0 * math.pi * freq * t + phase)


def _blob(size: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    y, x = _grid(size)
    return np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * sigma**2))


def _stamp_segment(canvas: np.ndarray, y0, x0, y1, x1, radius: float) -> None:
    """Mark a thick segment into a boolean canvas in place."""
    size = canvas.shape[0]
    length = math.hypot(y1 - y0, x1 - x0)
    steps = max(2, int(length * 2))
    yy, xx = _grid(size)
    for t in np.linspace(0.0, 1.0, steps):
        cy = y0 + t * (y1 - y0)
        cx = x0 + t * (x1 - x0)
        lo_y = max(0, int(cy - radius - 1))
        hi_y = min(size, int(cy + radius + 2))
        lo_x = max(0, int(cx - radius - 1))
        hi_x = min(size, int(cx + radius + 2))
        if lo_y >= hi_y or lo_x >= hi_x:
            continue
        patch = (yy[lo_y:hi_y, lo_x:hi_x] - cy) ** 2 + (xx[lo_y:hi_y, lo_x:hi_x] - cx) ** 2
        canvas[lo_y:hi_y, lo_x:hi_x] |= patch <= radius**2


def _modality_base(size: int, modality: Modality, rng: np.random.Generator) -> np.ndarray:
    """Faint modality-specific background so encoders see distinct inputs."""
    idx = list(Modality).index(modality)
    bg = 0.18 + 0.04 * (idx % 4)
    angle = idx * math.pi / 8.0
    phase = rng.uniform(0.0, 2.0 * math.pi)
    img = np.full((size, size), bg, dtype=np.float64)
    img += 0.03 * _grating(size, 3.0 + idx % 3, angle, phase)
    return img


def _finish(img: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    if noise_level > 0:
        img = img + rng.normal(0.0, noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# --- per-task renderers -----------------------------------------------------

def _render_classify(spec: ToyDataSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    s = spec.image_size
    img = _modality_base(s, spec.effective_modality, rng)
    denom = max(spec.n_classes - 1, 1)
    frac = label / denom
    img += 0.18 * frac  # class-dependent mean brightness
    freq = 2.0 + 3.0 * label + rng.uniform(-0.3, 0.3)
    img += 0.16 * _grating(s, freq, rng.uniform(0, math.pi), rng.uniform(0, 2 * math.pi))
    radius = (0.12 + 0.10 * frac) * s + rng.uniform(-1.0, 1.0)
    cy = s / 2 + rng.uniform(-0.05, 0.05) * s
    cx = s / 2 + rng.uniform(-0.05, 0.05) * s
    img += 0.30 * _ring(s, cy, cx, radius, thickness=max(2.0, 0.03 * s))
    return _finish(img, spec.noise_level, rng)


def _render_vessel(spec: ToyDataSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    mask = np.zeros((s, s), dtype=bool)
    budget = int(VESSEL_FG_MAX * 0.90 * s * s)  # stay clear of the upper bound
    floor = int(VESSEL_FG_MIN * 1.5 * s * s)

    def walk(y, x, heading, thickness, depth):
        step = s / 16.0
        for _ in range(rng.integers(8, 20)):
            if mask.sum() >= budget:
                return
            heading += rng.normal(0.0, 0.35)
            ny = y + step * math.sin(heading)
            nx = x + step * math.cos(heading)
            _stamp_segment(mask, y, x, ny, nx, thickness)
            y, x = ny, nx
            if not (-s * 0.2 < y < s * 1.2 and -s * 0.2 < x < s * 1.2):
                return
            if depth < 2 and rng.random() < 0.18:
                walk(y, x, heading + rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 1.1),
                     max(1.0, thickness * 0.7), depth + 1)

    tries = 0
    while mask.sum() < floor and tries < 40:
        edge = rng.integers(0, 4)
        pos = rng.uniform(0.1, 0.9) * s
        y0, x0, heading = {
            0: (0.0, pos, math.pi / 2),
            1: (float(s - 1), pos, -math.pi / 2),
            2: (pos, 0.0, 0.0),
            3: (pos, float(s - 1), math.pi),
        }[int(edge)]
        walk(y0, x0, heading + rng.normal(0.0, 0.3), thickness=max(1.2, s / 64.0), depth=0)
        tries += 1

    img = _modality_base(s, spec.effective_modality, rng)
    img = np.where(mask, img + 0.45, img)
    out = _finish(img, spec.noise_level, rng)
    return out, mask.astype(np.int64)


def _render_layers(spec: ToyDataSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = spec.image_size
    n = spec.n_classes
    spacing = s / n
    x = np.arange(s, dtype=np.float64)
    boundaries = []
    for k in range(1, n):
        base = k * spacing + rng.uniform(-0.15, 0.15) * spacing
        amp = rng.uniform(0.05, 0.22) * spacing
        freq = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * math.pi)
        slope = rng.uniform(-0.08, 0.08)
        boundaries.append(base + amp * np.sin(2 * math.pi * freq * x / s + phase) + slope * x)
    yy = np.arange(s, dtype=np.float64)[:, None]
    band = np.zeros((s, s), dtype=np.int64)
    for b in boundaries:
        band += (yy >= b[None, :]).astype(np.int64)
    shades = np.linspace(0.2, 0.8, n)
    img = shades[band]
    img = img + 0.04 * _grating(s, rng.uniform(4, 8), math.pi / 2, rng.uniform(0, 2 * math.pi))
    return _finish(img, spec.noise_level, rng), band


@dataclass(frozen=True)
class WedgeParams:
    """Geometry controlling one LANDMARK image; positions are (x, y) pixels."""

    apex_x: float
    apex_y: float
    theta_upper: float  # radians, y axis points down
    opening: float  # angle from upper to lower arm, radians
    arm_len: float
    spur_frac: float  # position of the blob along the upper arm, in (0, 1]


def derive_wedge_landmarks(params: WedgeParams) -> LandmarkSet:
    """The three annotated points implied by wedge geometry.

    Point order: blob on the upper arm, wedge apex, and the perpendicular
    foot of the blob on the lower arm's line.
    """
    ux, uy = math.cos(params.theta_upper), math.sin(params.theta_upper)
    lo = params.theta_upper + params.opening
    vx, vy = math.cos(lo), math.sin(lo)
    d = params.spur_frac * params.arm_len
    spur = (params.apex_x + d * ux, params.apex_y + d * uy)
    proj = d * (ux * vx + uy * vy)
    aux = (params.apex_x + proj * vx, params.apex_y + proj * vy)
    return LandmarkSet(points=(spur, (params.apex_x, params.apex_y), aux))


def _sample_wedge(size: int, rng: np.random.Generator) -> WedgeParams:
    for _ in range(200):
        params = WedgeParams(
            apex_x=rng.uniform(0.35, 0.65) * size,
            apex_y=rng.uniform(0.35, 0.65) * size,
            theta_upper=rng.uniform(0.0, 2.0 * math.pi),
            opening=rng.uniform(0.5, 1.2),
            arm_len=rng.uniform(0.22, 0.32) * size,
            spur_frac=rng.uniform(0.55, 0.9),
        )
        pts = derive_wedge_landmarks(params).points
        ends = [
            (params.apex_x + params.arm_len * math.cos(params.theta_upper),
             params.apex_y + params.arm_len * math.sin(params.theta_upper)),
            (params.apex_x + params.arm_len * math.cos(params.theta_upper + params.opening),
             params.apex_y + params.arm_len * math.sin(params.theta_upper + params.opening)),
        ]
        if all(2.0 <= x <= size - 3.0 and 2.0 <= y <= size - 3.0 for x, y in list(pts) + ends):
            return params
    raise InvalidSpec(f"could not place a wedge inside a {size}x{size} image")


def _render_landmark(
    spec: ToyDataSpec, rng: np.random.Generator
) -> tuple[np.ndarray, LandmarkSet, WedgeParams]:
    s = spec.image_size
    params = _sample_wedge(s, rng)
    landmarks = derive_wedge_landmarks(params)
    arms = np.zeros((s, s), dtype=bool)
    for theta in (params.theta_upper, params.theta_upper + params.opening):
        ex = params.apex_x + params.arm_len * math.cos(theta)
        ey = params.apex_y + params.arm_len * math.sin(theta)
        _stamp_segment(arms, params.apex_y, params.apex_x, ey, ex, max(1.2, s / 80.0))
    img = _modality_base(s, spec.effective_modality, rng)
    img = np.where(arms, img + 0.35, img)
    spur_x, spur_y = landmarks.points[0]
    img += 0.45 * _blob(s, spur_y, spur_x, sigma=max(1.5, s / 48.0))
    return _finish(img, spec.noise_level, rng), landmarks, params


def _biomarker_panel(z: np.ndarray) -> BiomarkerPanel:
    names = panel_names(DEFAULT_PANEL_ID)
    values: dict[str, float] = {}
    for name, (j, b, a) in NAMED_BIOMARKER_MAP.items():
        values[name] = b + a * float(z[j])
    mix_rng = np.random.default_rng(424242)  # fixed panel mixing, shared by all images
    for name in names:
        if name in values:
            continue
        w = mix_rng.normal(0.0, 1.0, size=5)
        b = mix_rng.uniform(10.0, 100.0)
        values[name] = float(b + 20.0 * (w @ z))
    return BiomarkerPanel(values=values, panel_spec_id=DEFAULT_PANEL_ID)


def _render_biomarker(
    spec: ToyDataSpec, rng: np.random.Generator
) -> tuple[np.ndarray, BiomarkerPanel, np.ndarray]:
    s = spec.image_size
    z = rng.uniform(0.2, 0.8, size=5)
    img = _modality_base(s, spec.effective_modality, rng)
    img += 0.45 * (z[0] - 0.5)  # brightness ~ factor 0
    r = (0.10 + 0.22 * z[1]) * s
    dx = (z[3] - 0.5) * 0.35 * s  # horizontal offset ~ factor 3
    img += 0.25 * _disc(s, s / 2.0, s / 2.0 + dx, r)  # radius ~ factor 1
    img += 0.15 * _grating(s, 2.0 + 6.0 * z[2], 0.0, 0.0)  # frequency ~ factor 2
    ramp = (np.arange(s, dtype=np.float64) / max(s - 1, 1))[:, None]
    img += 0.40 * (z[4] - 0.5) * np.broadcast_to(ramp, (s, s))  # gradient ~ factor 4
    return _finish(img, spec.noise_level, rng), _biomarker_panel(z), z


def _render_forecast(
    spec: ToyDataSpec, rng: np.random.Generator
) -> tuple[np.ndarray, float, float, int, int]:
    s = spec.image_size
    cup_ratio = float(rng.uniform(0.2, 0.9))
    delta_days = float(rng.uniform(100.0, 2000.0))
    img = _modality_base(s, spec.effective_modality, rng)
    rim = 0.30 * s
    cy = s / 2.0 + rng.uniform(-0.03, 0.03) * s
    cx = s / 2.0 + rng.uniform(-0.03, 0.03) * s
    img += 0.18 * _disc(s, cy, cx, rim)
    img += 0.20 * _ring(s, cy, cx, rim, thickness=max(2.0, 0.025 * s))
    img += 0.40 * _disc(s, cy, cx, cup_ratio * rim)
    score = cup_ratio + FORECAST_DELTA_WEIGHT * delta_days / FORECAST_DELTA_SCALE
    clean = int(score > FORECAST_THRESHOLD)
    outcome = clean
    if rng.random() < spec.noise_level:
        outcome = 1 - outcome
    return _finish(img, spec.noise_level, rng), cup_ratio, delta_days, clean, outcome


# --- dataset assembly -------------------------------------------------------

def _rng_for(seed: int, task: ToyTask, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _TASK_SALT[task], index)))


def generate_toy_dataset(spec: ToyDataSpec, seed: int, out_dir: str | Path) -> Manifest:
    """Render a dataset under ``out_dir`` and write ``manifest.jsonl``.

    Emits ``images/`` (and ``masks/`` for segmentation) plus a per-task
    sidecar recording the generating parameters. Same spec and seed give
    identical bytes.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if spec.task in (ToyTask.SEGMENT_VESSEL, ToyTask.SEGMENT_LAYER):
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    modality = spec.effective_modality
    records: list[ImageRecord] = []
    pairs: list[LongitudinalPair] = []
    sidecar: dict = {}
    images_per_subject = 1 if spec.task is ToyTask.FORECAST else 2

    for i in range(spec.n_images):
        rng = _rng_for(seed, spec.task, i)
        rec_id = f"img-{i:04d}"
        subject = f"subj-{i // images_per_subject:04d}"
        image_path = f"images/{rec_id}.png"
        rec = ImageRecord(
            id=rec_id,
            subject_id=subject,
            modality=modality,
            image_path=image_path,
            height=spec.image_size,
            width=spec.image_size,
        )

        if spec.task is ToyTask.CLASSIFY:
            label = i % spec.n_classes
            img = _render_classify(spec, label, rng)
            rec.labels = DiseaseLabel(class_index=label, class_name=f"class-{label}")
        elif spec.task is ToyTask.SEGMENT_VESSEL:
            img, mask = _render_vessel(spec, rng)
            rec.mask_path = f"masks/{rec_id}.png"
            save_png(mask.astype(np.uint8), out_dir / rec.mask_path)
        elif spec.task is ToyTask.SEGMENT_LAYER:
            img, mask = _render_layers(spec, rng)
            rec.mask_path = f"masks/{rec_id}.png"
            save_png(mask.astype(np.uint8), out_dir / rec.mask_path)
        elif spec.task is ToyTask.LANDMARK:
            img, landmarks, params = _render_landmark(spec, rng)
            rec.landmarks = landmarks
            sidecar[rec_id] = {
                "apex_x": params.apex_x, "apex_y": params.apex_y,
                "theta_upper": params.theta_upper, "opening": params.opening,
                "arm_len": params.arm_len, "spur_frac": params.spur_frac,
            }
        elif spec.task is ToyTask.BIOMARKER:
            img, panel, z = _render_biomarker(spec, rng)
            rec.biomarkers = panel
            sidecar[rec_id] = [float(v) for v in z]
        elif spec.task is ToyTask.FORECAST:
            img, cup, delta, clean, outcome = _render_forecast(spec, rng)
            rec.visit_date = f"day-{i:04d}"
            pairs.append(LongitudinalPair(
                subject_id=subject, image_t0=rec_id, delta_days=delta, outcome=outcome,
            ))
            sidecar[rec_id] = {
                "cup_ratio": cup, "delta_days": delta, "outcome_clean": clean,
            }
        else:  # pragma: no cover
            raise InvalidSpec(f"unhandled task {spec.task}")

        save_png(to_uint8(img), out_dir / image_path)
        records.append(rec)

    manifest = Manifest(records=records, pairs=pairs, root_dir=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    sidecar_name = {
        ToyTask.LANDMARK: "wedge_params.json",
        ToyTask.BIOMARKER: "toy_factors.json",
        ToyTask.FORECAST: "toy_cues.json",
    }.get(spec.task)
    if sidecar_name is not None:
        (out_dir / sidecar_name).write_text(
            json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    (out_dir / "toy_spec.json").write_text(
        json.dumps({"spec": toy_spec_to_json(spec), "seed": seed}, sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest
