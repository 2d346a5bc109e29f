import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from config import BOX_SIDE, NUM_TRAINING_DOMAINS
from data.synth_corpus import Slide
from utils.domain_types import GroundTruthBox, Patch, normalize
from utils.error_handler import InsufficientDomains, InsufficientForeground, PatchSamplingError

MAX_BACKGROUND_ATTEMPTS = 200


@dataclass
class TrainingSample:
    """A training patch and the mitoses it contains, in patch coordinates"""
    patch: Patch
    centers: np.ndarray

    @property
    def is_foreground(self) -> bool:
        return len(self.centers) > 0

    def boxes(self) -> List[GroundTruthBox]:
        return [GroundTruthBox(float(x), float(y)) for x, y in self.centers]


class SlidePatchIndex:
    """Random crops from the training-scanner slides of a corpus, grouped by scanner"""

    def __init__(self, slides: Sequence[Slide], patch_size: int):
        self.patch_size = patch_size
        self.by_domain: Dict[int, List[Slide]] = {d: [] for d in range(NUM_TRAINING_DOMAINS)}
        for slide in slides:
            if slide.scanner.is_training:
                if slide.size < patch_size:
                    raise PatchSamplingError(f"Slide {slide.slide_id} is smaller than patch size {patch_size}")
                self.by_domain[slide.scanner.id].append(slide)

        # (slide index, mitosis index) pairs for uniform foreground draws
        self.mitoses_by_domain: Dict[int, List[Tuple[int, int]]] = {
            d: [(i, j) for i, s in enumerate(self.by_domain[d]) for j in range(len(s.mitoses))]
            for d in self.by_domain
        }
        self._centers = {d: [s.mitosis_centers() for s in self.by_domain[d]] for d in self.by_domain}

    def missing_domains(self) -> List[int]:
        return [d for d, slides in self.by_domain.items() if not slides]

    def require_all_domains(self) -> None:
        missing = self.missing_domains()
        if missing:
            raise InsufficientDomains(f"No slides for training scanner(s) {missing}")

    def require_foreground(self) -> None:
        empty = [d for d, m in self.mitoses_by_domain.items() if not m]
        if empty:
            raise InsufficientForeground(f"No annotated mitoses for training scanner(s) {empty}")

    def crop(self, slide: Slide, x: int, y: int) -> Patch:
        p = self.patch_size
        return Patch(pixels=normalize(slide.image[y:y + p, x:x + p]), slide_id=slide.slide_id,
                     x_offset=int(x), y_offset=int(y), scanner=slide.scanner)

    def random_crop(self, rng: np.random.Generator, domain: int) -> Patch:
        slides = self.by_domain[domain]
        if not slides:
            raise InsufficientDomains(f"No slides for training scanner {domain}")
        slide = slides[int(rng.integers(len(slides)))]
        x = int(rng.integers(slide.size - self.patch_size + 1))
        y = int(rng.integers(slide.size - self.patch_size + 1))
        return self.crop(slide, x, y)

    def sample_domain_batch(self, rng: np.random.Generator, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        """(B, H, W, 3) pixels and their scanner ids, scanners uniform over the training set"""
        domains = rng.integers(0, NUM_TRAINING_DOMAINS, size=batch_size)
        pixels = np.stack([self.random_crop(rng, int(d)).pixels for d in domains])
        return pixels, domains.astype(np.int64)

    def _centers_in(self, domain: int, slide_idx: int, x: int, y: int, margin: float) -> np.ndarray:
        centers = self._centers[domain][slide_idx]
        if not len(centers):
            return centers
        p = self.patch_size
        inside = ((centers[:, 0] >= x - margin) & (centers[:, 0] < x + p + margin) &
                  (centers[:, 1] >= y - margin) & (centers[:, 1] < y + p + margin))
        return centers[inside]

    def sample_foreground(self, rng: np.random.Generator, domain: int) -> TrainingSample:
        """Crop fully containing a randomly chosen mitosis of the scanner

        Labels every mitosis whose box reaches into the crop, so partly visible
        figures are never trained as background.
        """
        mitoses = self.mitoses_by_domain[domain]
        if not mitoses:
            raise InsufficientForeground(f"Scanner {domain} has no annotated mitoses")
        slide_idx, mitosis_idx = mitoses[int(rng.integers(len(mitoses)))]
        slide = self.by_domain[domain][slide_idx]
        target = slide.mitoses[mitosis_idx]
        half, p = BOX_SIDE / 2.0, self.patch_size
        x_lo, x_hi = max(0, math.ceil(target.x + half - p)), min(slide.size - p, math.floor(target.x - half))
        y_lo, y_hi = max(0, math.ceil(target.y + half - p)), min(slide.size - p, math.floor(target.y - half))
        x = int(rng.integers(x_lo, max(x_lo, x_hi) + 1))
        y = int(rng.integers(y_lo, max(y_lo, y_hi) + 1))
        centers = self._centers_in(domain, slide_idx, x, y, margin=BOX_SIDE / 2.0)
        centers = centers - np.array([x, y], dtype=np.float64)
        return TrainingSample(self.crop(slide, x, y), centers)

    def sample_background(self, rng: np.random.Generator, domain: int) -> TrainingSample:
        """Crop whose area no mitosis box touches"""
        slides = self.by_domain[domain]
        if not slides:
            raise InsufficientDomains(f"No slides for training scanner {domain}")
        for _ in range(MAX_BACKGROUND_ATTEMPTS):
            slide_idx = int(rng.integers(len(slides)))
            slide = slides[slide_idx]
            x = int(rng.integers(slide.size - self.patch_size + 1))
            y = int(rng.integers(slide.size - self.patch_size + 1))
            if not len(self._centers_in(domain, slide_idx, x, y, margin=BOX_SIDE / 2.0)):
                return TrainingSample(self.crop(slide, x, y), np.zeros((0, 2), dtype=np.float64))
        logging.warning(f"No background crop found for scanner {domain}")
        raise PatchSamplingError(
            f"No mitosis-free {self.patch_size}px crop found for scanner {domain} in {MAX_BACKGROUND_ATTEMPTS} attempts")
