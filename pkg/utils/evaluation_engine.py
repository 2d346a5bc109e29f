import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.distance import cdist
from torchvision.ops import nms as torchvision_nms
from tqdm import tqdm

from config import PATCH_SIZE
from data.synth_corpus import Corpus, Slide
from utils.detection_engine import DetectorModel, detect_batch
from utils.domain_types import Detection, GroundTruthBox, Patch, normalize
from utils.error_handler import ArtifactFormatError, TileError, UnknownSlideError

INFERENCE_BATCH_SIZE = 32

Predictions = Dict[str, List[Detection]]


class EvalConfig(BaseModel):
    score_threshold: float = Field(0.7, ge=0, le=1)
    nms_iou: float = Field(0.5, ge=0, le=1)
    match_radius: float = Field(25.0, gt=0)
    # Half the patch (64 px at 128) when unset
    tile_overlap: Optional[int] = Field(None, ge=0)
    patch_size: int = Field(PATCH_SIZE, gt=0)

    @model_validator(mode='after')
    def _overlap_below_patch(self):
        if self.tile_overlap is None:
            self.tile_overlap = self.patch_size // 2
        if self.tile_overlap >= self.patch_size:
            raise ValueError(f"tile_overlap ({self.tile_overlap}) must be smaller than patch_size ({self.patch_size})")
        return self


def tile_offsets(length: int, patch_size: int, overlap: int) -> List[int]:
    if patch_size > length:
        raise TileError(f"Patch size {patch_size} exceeds slide extent {length}")
    if not 0 <= overlap < patch_size:
        raise TileError(f"Tile overlap must be in [0, {patch_size}), got {overlap}")
    stride = patch_size - overlap
    offsets = list(range(0, length - patch_size + 1, stride))
    if offsets[-1] != length - patch_size:
        offsets.append(length - patch_size)
    return offsets


def tile_slide(slide: Slide, patch_size: int, overlap: int) -> List[Tuple[Patch, Tuple[int, int]]]:
    """Overlapping tiles covering the whole slide, row by row; the last row and column are shifted inward"""
    height, width = slide.image.shape[:2]
    tiles = []
    for y in tile_offsets(height, patch_size, overlap):
        for x in tile_offsets(width, patch_size, overlap):
            pixels = normalize(slide.image[y:y + patch_size, x:x + patch_size])
            patch = Patch(pixels=pixels, slide_id=slide.slide_id, x_offset=x, y_offset=y, scanner=slide.scanner)
            tiles.append((patch, (x, y)))
    return tiles


def nms(detections: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """Greedy suppression of boxes overlapping a higher-scored one by IoU > iou_threshold"""
    if not detections:
        return []
    boxes = torch.as_tensor(np.asarray([d.to_xyxy() for d in detections], dtype=np.float64))
    scores = torch.as_tensor(np.asarray([d.score for d in detections], dtype=np.float64))
    keep = torchvision_nms(boxes, scores, iou_threshold)
    return [detections[i] for i in keep.tolist()]


def infer_slide(model: DetectorModel, slide: Slide, cfg: EvalConfig) -> List[Detection]:
    """Tile, detect, map to slide coordinates, keep scores >= threshold, then suppress duplicates"""
    tiles = tile_slide(slide, model.patch_size, cfg.tile_overlap)
    height, width = slide.image.shape[:2]
    candidates: List[Detection] = []
    for start in range(0, len(tiles), INFERENCE_BATCH_SIZE):
        chunk = tiles[start:start + INFERENCE_BATCH_SIZE]
        scores, boxes = detect_batch(model, np.stack([patch.pixels for patch, _ in chunk]))
        for (_, (x0, y0)), tile_scores, tile_boxes in zip(chunk, scores, boxes):
            keep = np.nonzero(tile_scores >= cfg.score_threshold)[0]
            for i in keep:
                cx = (tile_boxes[i, 0] + tile_boxes[i, 2]) / 2.0 + x0
                cy = (tile_boxes[i, 1] + tile_boxes[i, 3]) / 2.0 + y0
                candidates.append(Detection(x=float(np.clip(cx, 0, width)), y=float(np.clip(cy, 0, height)),
                                            score=float(np.clip(tile_scores[i], 0.0, 1.0))))
    detections = nms(candidates, cfg.nms_iou)
    logging.debug(f"{slide.slide_id}: {len(candidates)} candidates, {len(detections)} after NMS")
    return detections


def infer_corpus(model: DetectorModel, corpus: Corpus, cfg: EvalConfig,
                 scanners: Optional[Iterable[int]] = None, progress: bool = False) -> Predictions:
    selected = corpus.filter(scanners).slides if scanners is not None else corpus.slides
    model.eval()
    predictions: Predictions = {}
    for slide in tqdm(selected, disable=not progress, desc="infer"):
        predictions[slide.slide_id] = infer_slide(model, slide, cfg)
    logging.info(f"Inferred {sum(len(d) for d in predictions.values())} detections on {len(predictions)} slides")
    return predictions


@dataclass
class DetectionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def __add__(self, other: 'DetectionCounts') -> 'DetectionCounts':
        return DetectionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> Dict:
        return {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'precision': self.precision,
                'recall': self.recall, 'f1': self.f1}


@dataclass
class EvalReport:
    counts: DetectionCounts
    per_slide: Dict[str, DetectionCounts] = field(default_factory=dict)
    per_scanner: Dict[int, DetectionCounts] = field(default_factory=dict)
    score_threshold: float = 0.7
    match_radius: float = 25.0

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, **kwargs) -> 'EvalReport':
        return cls(DetectionCounts(tp, fp, fn), **kwargs)

    @property
    def tp(self) -> int:
        return self.counts.tp

    @property
    def fp(self) -> int:
        return self.counts.fp

    @property
    def fn(self) -> int:
        return self.counts.fn

    @property
    def precision(self) -> float:
        return self.counts.precision

    @property
    def recall(self) -> float:
        return self.counts.recall

    @property
    def f1(self) -> float:
        return self.counts.f1

    def to_dict(self) -> Dict:
        return {
            **self.counts.to_dict(),
            'score_threshold': self.score_threshold,
            'match_radius': self.match_radius,
            'per_scanner': {str(k): v.to_dict() for k, v in sorted(self.per_scanner.items())},
            'per_slide': {k: v.to_dict() for k, v in sorted(self.per_slide.items())},
        }


def match_detections(detections: Sequence[Detection], ground_truth: Sequence[GroundTruthBox],
                     radius: float) -> DetectionCounts:
    """Greedy one-to-one matching, highest score first, each detection claiming its nearest free box"""
    if not detections or not ground_truth:
        return DetectionCounts(0, len(detections), len(ground_truth))
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    det_xy = np.asarray([(detections[i].x, detections[i].y) for i in order], dtype=np.float64)
    gt_xy = np.asarray([(b.x, b.y) for b in ground_truth], dtype=np.float64)
    distances = cdist(det_xy, gt_xy, 'euclidean')

    claimed = np.zeros(len(ground_truth), dtype=bool)
    tp = 0
    for row in distances:
        row = np.where(claimed | (row > radius), np.inf, row)
        j = int(np.argmin(row))
        if np.isfinite(row[j]):
            claimed[j] = True
            tp += 1
    return DetectionCounts(tp, len(detections) - tp, len(ground_truth) - tp)


def evaluate(predictions: Mapping[str, Sequence[Detection]], ground_truth: Mapping[str, Sequence[GroundTruthBox]],
             cfg: EvalConfig, scanners: Optional[Mapping[str, int]] = None) -> EvalReport:
    """Precision, recall and F1 over the slides of ground_truth; slides without predictions count as all missed"""
    unknown = set(predictions) - set(ground_truth)
    if unknown:
        raise UnknownSlideError(unknown)

    per_slide: Dict[str, DetectionCounts] = {}
    per_scanner: Dict[int, DetectionCounts] = {}
    total = DetectionCounts()
    for slide_id in sorted(ground_truth):
        kept = [d for d in predictions.get(slide_id, []) if d.score >= cfg.score_threshold]
        counts = match_detections(kept, ground_truth[slide_id], cfg.match_radius)
        per_slide[slide_id] = counts
        total = total + counts
        if scanners is not None and slide_id in scanners:
            scanner = int(scanners[slide_id])
            per_scanner[scanner] = per_scanner.get(scanner, DetectionCounts()) + counts

    report = EvalReport(total, per_slide, per_scanner, cfg.score_threshold, cfg.match_radius)
    logging.info(f"Evaluated {len(per_slide)} slides: tp {report.tp}, fp {report.fp}, fn {report.fn}, "
                 f"F1 {report.f1:.4f}")
    return report


def ground_truth_of(corpus: Corpus) -> Dict[str, List[GroundTruthBox]]:
    return {s.slide_id: list(s.mitoses) for s in corpus.slides}


def scanners_of(corpus: Corpus) -> Dict[str, int]:
    return {s.slide_id: s.scanner.id for s in corpus.slides}


def predictions_to_dict(predictions: Mapping[str, Sequence[Detection]]) -> Dict:
    return {slide_id: [{'x': d.x, 'y': d.y, 'score': d.score} for d in dets]
            for slide_id, dets in sorted(predictions.items())}


def write_predictions(predictions: Mapping[str, Sequence[Detection]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(predictions_to_dict(predictions), f, indent=2, sort_keys=True)
    return path


def read_predictions(path: Union[str, Path]) -> Predictions:
    path = Path(path)
    if not path.exists():
        raise ArtifactFormatError(path, "predictions file not found")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ArtifactFormatError(path, f"invalid JSON ({e})")
    if not isinstance(raw, dict):
        raise ArtifactFormatError(path, "expected a mapping of slide id to detections")

    predictions: Predictions = {}
    for slide_id, items in raw.items():
        try:
            predictions[slide_id] = [Detection(x=float(d['x']), y=float(d['y']), score=float(d['score']))
                                     for d in items]
        except (KeyError, TypeError, ValueError) as e:
            raise ArtifactFormatError(path, f"bad detection for slide {slide_id} ({e})")
    return predictions
