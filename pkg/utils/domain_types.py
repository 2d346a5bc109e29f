"""Shared value types, style-code algebra, pixel normalization and rotation."""
from dataclasses import dataclass, field, replace
from typing import Tuple, Union

import numpy as np

from config import BOX_SIDE, HELD_OUT_DOMAIN, NUM_TRAINING_DOMAINS
from utils.error_handler import InvalidAngle, InvalidDomain, InvalidPixelRange, ShapeError

ROTATION_ANGLES = (0, 90, 180, 270)
SIMPLEX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ScannerDomain:
    """Scanner id; 0-3 are training styles, 4 is the held-out style"""
    id: int

    def __post_init__(self):
        if not isinstance(self.id, (int, np.integer)) or not 0 <= int(self.id) <= HELD_OUT_DOMAIN:
            raise InvalidDomain(f"Scanner id must be in 0..{HELD_OUT_DOMAIN}, got {self.id!r}")
        object.__setattr__(self, 'id', int(self.id))

    @property
    def is_training(self) -> bool:
        return self.id < NUM_TRAINING_DOMAINS


@dataclass(frozen=True)
class StyleCode:
    """Mixing weights over the four training styles"""
    weights: Tuple[float, float, float, float]

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        if len(weights) != NUM_TRAINING_DOMAINS:
            raise ValueError(f"Style code needs {NUM_TRAINING_DOMAINS} components, got {len(weights)}")
        if min(weights) < 0:
            raise ValueError(f"Style code components must be non-negative: {weights}")
        if abs(sum(weights) - 1.0) > SIMPLEX_TOLERANCE:
            raise ValueError(f"Style code must sum to 1, got {sum(weights)}")
        object.__setattr__(self, 'weights', weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float32)

    @property
    def is_one_hot(self) -> bool:
        return max(self.weights) == 1.0


@dataclass(frozen=True, eq=False)
class Patch:
    """Square RGB region in model range [-1, 1] with its slide origin"""
    pixels: np.ndarray
    slide_id: str = ""
    x_offset: int = 0
    y_offset: int = 0
    scanner: ScannerDomain = field(default_factory=lambda: ScannerDomain(0))

    def __post_init__(self):
        pixels = self.pixels
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] != pixels.shape[1]:
            raise ShapeError(f"Patch must be square HxWx3, got {pixels.shape}")
        if pixels.size and (pixels.min() < -1.0 or pixels.max() > 1.0):
            raise InvalidPixelRange("Patch pixels must lie in [-1, 1]")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> 'Patch':
        return replace(self, pixels=pixels)

    def require_size(self, patch_size: int) -> 'Patch':
        if self.size != patch_size:
            raise ShapeError(f"Expected a {patch_size}px patch, got {self.size}px")
        return self


@dataclass(frozen=True)
class GroundTruthBox:
    """Mitotic figure annotation; the box is always BOX_SIDE wide"""
    x: float
    y: float
    side: float = BOX_SIDE

    def __post_init__(self):
        if self.side != BOX_SIDE:
            raise ValueError(f"Ground truth boxes are always {BOX_SIDE} px, got {self.side}")

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return box_from_center(self.x, self.y, self.side)


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    score: float
    side: float = BOX_SIDE

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"Detection score must be in [0, 1], got {self.score}")

    def to_xyxy(self) -> Tuple[float, float, float, float]:
        return box_from_center(self.x, self.y, self.side)


def box_from_center(x: float, y: float, side: float = BOX_SIDE) -> Tuple[float, float, float, float]:
    half = side / 2.0
    return (x - half, y - half, x + half, y + half)


def one_hot_code(domain: Union[ScannerDomain, int]) -> StyleCode:
    domain_id = domain.id if isinstance(domain, ScannerDomain) else domain
    if not isinstance(domain_id, (int, np.integer)) or not 0 <= domain_id < NUM_TRAINING_DOMAINS:
        raise InvalidDomain(f"Only training domains 0..{NUM_TRAINING_DOMAINS - 1} have a one-hot code, got {domain_id!r}")
    weights = [0.0] * NUM_TRAINING_DOMAINS
    weights[int(domain_id)] = 1.0
    return StyleCode(tuple(weights))


def sample_style_code(rng: np.random.Generator) -> StyleCode:
    """Uniform draw from the 3-simplex"""
    weights = rng.dirichlet(np.ones(NUM_TRAINING_DOMAINS))
    weights = weights / weights.sum()
    return StyleCode(tuple(weights))


def _rotation_steps(angle: int) -> int:
    if angle not in ROTATION_ANGLES:
        raise InvalidAngle(f"Rotation angle must be one of {ROTATION_ANGLES}, got {angle!r}")
    return angle // 90


def rotate_patch(patch: Patch, angle: int) -> Patch:
    """Counterclockwise rotation by a multiple of 90 degrees"""
    k = _rotation_steps(angle)
    if k == 0:
        return patch
    return patch.with_pixels(np.ascontiguousarray(np.rot90(patch.pixels, k=k, axes=(0, 1))))


def rotate_points(points: np.ndarray, angle: int, size: int) -> np.ndarray:
    """Move (x, y) positions the same way rotate_patch moves pixels"""
    k = _rotation_steps(angle)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    for _ in range(k):
        points = np.stack([points[:, 1], size - points[:, 0]], axis=1)
    return points


def normalize(image: np.ndarray) -> np.ndarray:
    """[0, 255] image to model range [-1, 1]"""
    image = np.asarray(image)
    if image.size and (image.min() < 0 or image.max() > 255):
        raise InvalidPixelRange(f"Image values must lie in [0, 255], got [{image.min()}, {image.max()}]")
    return (image.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).clip(-1.0, 1.0)


def denormalize(pixels: np.ndarray) -> np.ndarray:
    """Model range back to [0, 255] (float)"""
    return ((np.asarray(pixels, dtype=np.float64) + 1.0) * 127.5).clip(0.0, 255.0)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.rint(denormalize(pixels)).astype(np.uint8)


def scanner_of(value: Union[ScannerDomain, int]) -> ScannerDomain:
    return value if isinstance(value, ScannerDomain) else ScannerDomain(int(value))
