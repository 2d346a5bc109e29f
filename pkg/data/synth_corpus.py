import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, Field, field_validator
from scipy import ndimage

from config import BOX_SIDE, CORPUS_FORMAT_VERSION, HELD_OUT_DOMAIN, PATCH_SIZE
from utils.domain_types import GroundTruthBox, ScannerDomain, scanner_of
from utils.error_handler import PlacementFailure

# Render palette (pre-style RGB, 0..255)
BACKGROUND_RGB = np.array([232.0, 196.0, 214.0])
NUCLEUS_RGB = np.array([112.0, 72.0, 150.0])
CHROMATIN_RGB = np.array([70.0, 40.0, 110.0])

MIN_SLIDE_SIZE = 128
MITOSIS_SPACING = BOX_SIDE
BORDER_MARGIN = BOX_SIDE // 2
DISTRACTOR_CLEARANCE = 22
MAX_PLACEMENT_RETRIES = 500


@dataclass(frozen=True)
class ScannerStylePreset:
    """Per-scanner colour response: saturation, then gain * v**gamma + bias"""
    gain: Tuple[float, float, float]
    bias: Tuple[float, float, float]
    gamma: float
    saturation: float

    def __post_init__(self):
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ValueError("gain and bias need one value per RGB channel")
        if not all(0.6 <= g <= 1.4 for g in self.gain):
            raise ValueError(f"gain outside [0.6, 1.4]: {self.gain}")
        if not all(-0.15 <= b <= 0.15 for b in self.bias):
            raise ValueError(f"bias outside [-0.15, 0.15]: {self.bias}")
        if not 0.7 <= self.gamma <= 1.4:
            raise ValueError(f"gamma outside [0.7, 1.4]: {self.gamma}")
        if not 0.5 <= self.saturation <= 1.5:
            raise ValueError(f"saturation outside [0.5, 1.5]: {self.saturation}")

    def as_vector(self) -> np.ndarray:
        return np.array([*self.gain, *self.bias, self.gamma, self.saturation], dtype=np.float64)

    def to_dict(self) -> Dict:
        return {'gain': list(self.gain), 'bias': list(self.bias),
                'gamma': self.gamma, 'saturation': self.saturation}

    @classmethod
    def from_dict(cls, data: Dict) -> 'ScannerStylePreset':
        return cls(gain=tuple(data['gain']), bias=tuple(data['bias']),
                   gamma=float(data['gamma']), saturation=float(data['saturation']))


IDENTITY_PRESET = ScannerStylePreset(gain=(1.0, 1.0, 1.0), bias=(0.0, 0.0, 0.0), gamma=1.0, saturation=1.0)

# Presets 0-3 are the training scanners. Preset 4 lies outside their hull in
# gamma and saturation.
SCANNER_PRESETS: Tuple[ScannerStylePreset, ...] = (
    ScannerStylePreset(gain=(1.00, 0.95, 1.05), bias=(0.02, -0.02, 0.03), gamma=1.00, saturation=1.00),
    ScannerStylePreset(gain=(1.15, 0.85, 1.00), bias=(0.05, -0.05, 0.00), gamma=0.90, saturation=1.20),
    ScannerStylePreset(gain=(0.90, 1.00, 1.15), bias=(-0.03, 0.02, 0.06), gamma=1.10, saturation=0.85),
    ScannerStylePreset(gain=(1.05, 1.10, 0.90), bias=(0.00, 0.04, -0.04), gamma=0.85, saturation=1.10),
    ScannerStylePreset(gain=(1.30, 0.75, 1.25), bias=(0.10, -0.10, 0.12), gamma=1.35, saturation=0.60),
)

MIN_PRESET_DISTANCE = 0.2


def preset_distance(a: ScannerStylePreset, b: ScannerStylePreset) -> float:
    return float(np.linalg.norm(a.as_vector() - b.as_vector()))


@dataclass(eq=False)
class Slide:
    image: np.ndarray
    slide_id: str
    scanner: ScannerDomain
    mitoses: List[GroundTruthBox] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.image.shape[0]

    def mitosis_centers(self) -> np.ndarray:
        if not self.mitoses:
            return np.zeros((0, 2), dtype=np.float64)
        return np.asarray([(m.x, m.y) for m in self.mitoses], dtype=np.float64)


class CorpusConfig(BaseModel):
    corpus_seed: int = 0
    slides_per_scanner: int = Field(20, ge=1)
    slide_size: int = Field(1024, ge=MIN_SLIDE_SIZE)
    mitoses_per_slide: int = Field(12, ge=0)
    mitoses_jitter: int = Field(4, ge=0)
    distractors_per_slide: int = Field(60, ge=0)
    patch_size: int = Field(PATCH_SIZE, ge=32)
    n_jobs: int = 1

    @field_validator('patch_size')
    @classmethod
    def _patch_fits(cls, v, info):
        size = info.data.get('slide_size')
        if size is not None and v > size:
            raise ValueError(f"patch_size {v} exceeds slide_size {size}")
        return v


@dataclass(eq=False)
class Corpus:
    slides: List[Slide]
    corpus_seed: int = 0
    patch_size: int = PATCH_SIZE
    presets: Tuple[ScannerStylePreset, ...] = SCANNER_PRESETS
    format_version: int = CORPUS_FORMAT_VERSION

    def slides_for(self, scanner) -> List[Slide]:
        scanner = scanner_of(scanner)
        return [s for s in self.slides if s.scanner == scanner]

    def filter(self, scanners: Optional[Iterable[int]] = None) -> 'Corpus':
        if scanners is None:
            return self
        wanted = {int(s) for s in scanners}
        return Corpus([s for s in self.slides if s.scanner.id in wanted], self.corpus_seed,
                      self.patch_size, self.presets, self.format_version)

    def by_id(self) -> Dict[str, Slide]:
        return {s.slide_id: s for s in self.slides}

    def summary(self) -> Dict[int, Dict[str, int]]:
        """Slides and mitoses per scanner"""
        slides = Counter(s.scanner.id for s in self.slides)
        mitoses = Counter()
        for s in self.slides:
            mitoses[s.scanner.id] += len(s.mitoses)
        return {d: {'slides': slides[d], 'mitoses': mitoses[d]} for d in sorted(slides)}


def apply_scanner_style(image: np.ndarray, preset: ScannerStylePreset) -> np.ndarray:
    """Apply a scanner colour response to a [0, 255] image; returns float64 in [0, 255]"""
    rgb = np.asarray(image, dtype=np.float64)
    luma = rgb @ np.array([0.299, 0.587, 0.114])
    rgb = luma[..., None] + preset.saturation * (rgb - luma[..., None])
    v = np.clip(rgb, 0.0, 255.0) / 255.0
    gain = np.asarray(preset.gain, dtype=np.float64)
    bias = np.asarray(preset.bias, dtype=np.float64)
    out = gain * np.power(v, preset.gamma) + bias
    return np.clip(out, 0.0, 1.0) * 255.0


def _render_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.standard_normal((size, size))
    texture = ndimage.gaussian_filter(coarse, sigma=12.0, mode='reflect')
    texture = texture / (np.abs(texture).max() + 1e-12)
    grain = rng.standard_normal((size, size)) * 0.04
    shade = 1.0 + 0.08 * texture + grain
    return BACKGROUND_RGB[None, None, :] * shade[..., None]


def _paint(canvas: np.ndarray, mask: np.ndarray, color: np.ndarray, opacity: float = 1.0) -> None:
    alpha = mask[..., None] * opacity
    canvas *= (1.0 - alpha)
    canvas += alpha * color[None, None, :]


def _local_grid(cx: float, cy: float, radius: int, size: int):
    x0, x1 = max(0, int(cx) - radius), min(size, int(cx) + radius + 1)
    y0, y1 = max(0, int(cy) - radius), min(size, int(cy) + radius + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    return (slice(y0, y1), slice(x0, x1)), xx + 0.5 - cx, yy + 0.5 - cy


def _draw_nucleus(canvas: np.ndarray, rng: np.random.Generator, cx: float, cy: float) -> None:
    """Elliptical interphase nucleus"""
    a, b = rng.uniform(6.0, 10.0), rng.uniform(4.0, 7.0)
    theta = rng.uniform(0.0, np.pi)
    tone = NUCLEUS_RGB + rng.uniform(-12.0, 12.0, size=3)
    region, dx, dy = _local_grid(cx, cy, 12, canvas.shape[0])
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)
    _paint(canvas[region], mask, tone, opacity=0.85)


def _draw_mitosis(canvas: np.ndarray, rng: np.random.Generator, cx: float, cy: float) -> None:
    """Dumbbell (anaphase) or starburst (metaphase) figure, about 20 px across"""
    tone = CHROMATIN_RGB + rng.uniform(-12.0, 12.0, size=3)
    region, dx, dy = _local_grid(cx, cy, 13, canvas.shape[0])
    theta = rng.uniform(0.0, np.pi)
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    if rng.random() < 0.5:
        sep, r = rng.uniform(6.0, 8.0), rng.uniform(3.5, 4.5)
        lobes = ((u - sep) ** 2 + v ** 2 <= r ** 2) | ((u + sep) ** 2 + v ** 2 <= r ** 2)
        bridge = (np.abs(u) <= sep) & (np.abs(v) <= 1.2)
        mask = lobes | bridge
    else:
        rho = np.hypot(u, v)
        phi = np.arctan2(v, u)
        spokes = int(rng.integers(6, 10))
        spoke = (np.cos(spokes * phi) > 0.55) & (rho <= rng.uniform(9.0, 11.0))
        mask = spoke | (rho <= 3.5)
    _paint(canvas[region], mask.astype(np.float64), tone, opacity=0.95)


def _place_points(rng: np.random.Generator, count: int, low: float, high: float,
                  min_spacing: float, avoid: np.ndarray, avoid_clearance: float,
                  strict: bool, snap: bool = False) -> np.ndarray:
    points: List[Tuple[float, float]] = []
    for _ in range(count):
        for _attempt in range(MAX_PLACEMENT_RETRIES):
            p = rng.uniform(low, high, size=2)
            if snap:
                p = np.floor(p)
            if points and np.min(np.hypot(*(np.asarray(points) - p).T)) < min_spacing:
                continue
            if len(avoid) and np.min(np.hypot(*(avoid - p).T)) < avoid_clearance:
                continue
            points.append((float(p[0]), float(p[1])))
            break
        else:
            if strict:
                raise PlacementFailure(
                    f"Could not place figure {len(points) + 1} of {count} after {MAX_PLACEMENT_RETRIES} attempts")
            logging.debug(f"Skipped a distractor after {MAX_PLACEMENT_RETRIES} attempts")
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def generate_slide(seed: int, scanner, size: int = 1024, n_mitoses: int = 12,
                   n_distractors: int = 60, slide_id: Optional[str] = None,
                   presets: Tuple[ScannerStylePreset, ...] = SCANNER_PRESETS) -> Slide:
    """Render one styled slide with its mitosis annotations"""
    scanner = scanner_of(scanner)
    if size < MIN_SLIDE_SIZE:
        raise ValueError(f"Slide size must be at least {MIN_SLIDE_SIZE}, got {size}")
    if n_mitoses < 0 or n_distractors < 0:
        raise ValueError("Figure counts must be non-negative")

    rng = np.random.default_rng(np.random.SeedSequence([seed, scanner.id, size, n_mitoses, n_distractors]))
    canvas = _render_background(rng, size)

    # Integer pixel centers keep annotations exact
    mitoses = _place_points(rng, n_mitoses, BORDER_MARGIN, size - BORDER_MARGIN,
                            MITOSIS_SPACING, np.zeros((0, 2)), 0.0, strict=True, snap=True)
    nuclei = _place_points(rng, n_distractors, 8.0, size - 8.0, 14.0, mitoses, DISTRACTOR_CLEARANCE, strict=False)

    for cx, cy in nuclei:
        _draw_nucleus(canvas, rng, cx, cy)
    for cx, cy in mitoses:
        _draw_mitosis(canvas, rng, cx + 0.5, cy + 0.5)

    styled = apply_scanner_style(np.clip(canvas, 0.0, 255.0), presets[scanner.id])
    image = np.rint(styled).astype(np.uint8)
    boxes = [GroundTruthBox(float(x) + 0.5, float(y) + 0.5) for x, y in mitoses]
    return Slide(image=image, slide_id=slide_id or f"scanner{scanner.id}_seed{seed}",
                 scanner=scanner, mitoses=boxes)


def _slide_job(cfg: CorpusConfig, scanner_id: int, index: int, slide_index: int) -> Slide:
    seed_seq = np.random.SeedSequence([cfg.corpus_seed, slide_index])
    slide_seed = int(seed_seq.generate_state(1)[0])
    count_rng = np.random.default_rng(seed_seq.spawn(1)[0])
    jitter = cfg.mitoses_jitter
    n_mitoses = max(0, cfg.mitoses_per_slide + int(count_rng.integers(-jitter, jitter + 1))) if jitter else cfg.mitoses_per_slide
    return generate_slide(slide_seed, scanner_id, cfg.slide_size, n_mitoses, cfg.distractors_per_slide,
                          slide_id=f"scanner{scanner_id}_{index:03d}")


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    """All five scanners, slides_per_scanner each"""
    jobs = [(d, i, d * cfg.slides_per_scanner + i)
            for d in range(HELD_OUT_DOMAIN + 1) for i in range(cfg.slides_per_scanner)]
    logging.info(f"Generating {len(jobs)} slides of {cfg.slide_size}px (seed {cfg.corpus_seed})")
    slides = Parallel(n_jobs=cfg.n_jobs)(delayed(_slide_job)(cfg, d, i, k) for d, i, k in jobs)
    return Corpus(slides=list(slides), corpus_seed=cfg.corpus_seed, patch_size=cfg.patch_size)
