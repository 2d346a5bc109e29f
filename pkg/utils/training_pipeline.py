"""Detector training: balanced patch sampling, style augmentation, rotation, LR schedule and the update loop."""
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field, field_validator
from tqdm import tqdm

from config import PATCH_SIZE
from data.checkpoint_store import Checkpoint
from data.synth_corpus import Corpus
from utils.detection_engine import AnchorConfig, DetectorModel, FocalLossConfig, build_detector, detector_loss
from utils.domain_types import ROTATION_ANGLES, Patch, StyleCode, rotate_patch, rotate_points, sample_style_code
from utils.error_handler import InvalidIteration, TrainingOrderError
from utils.patch_sampler import SlidePatchIndex, TrainingSample
from utils.transfer_module import Generator, generator_forward

TransferLike = Union[Generator, Callable[[Patch, StyleCode], Patch]]


class TrainConfig(BaseModel):
    bg_fg_ratio: float = Field(6.0, gt=0)
    background_only: bool = False
    style_prob: float = Field(0.2, ge=0, le=1)
    rotations: Tuple[int, ...] = ROTATION_ANGLES
    iterations: int = Field(2000, gt=0)
    batch_size: int = Field(14, gt=0)
    lr_start: float = Field(0.2, gt=0)
    lr_milestone_fractions: Tuple[float, ...] = (0.64, 0.90)
    lr_decay: float = Field(0.1, gt=0, le=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-4, ge=0)
    grad_clip_norm: float = Field(10.0, ge=0)
    patch_size: int = Field(PATCH_SIZE, ge=32)
    seed: int = 0
    backbone_width: int = Field(16, ge=4)
    fpn_channels: int = Field(64, ge=8)
    anchors: AnchorConfig = Field(default_factory=AnchorConfig)
    focal: FocalLossConfig = Field(default_factory=FocalLossConfig)
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @field_validator('rotations')
    @classmethod
    def _right_angles(cls, v):
        if not v or any(a not in ROTATION_ANGLES for a in v):
            raise ValueError(f"rotations must be a non-empty subset of {ROTATION_ANGLES}")
        return v

    @field_validator('lr_milestone_fractions')
    @classmethod
    def _increasing_fractions(cls, v):
        if any(not 0 < f < 1 for f in v):
            raise ValueError("milestone fractions must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("milestone fractions must be strictly increasing")
        return v

    @field_validator('patch_size')
    @classmethod
    def _multiple_of_32(cls, v):
        if v % 32:
            raise ValueError(f"patch_size must be a multiple of 32, got {v}")
        return v

    @property
    def foreground_probability(self) -> float:
        return 0.0 if self.background_only else 1.0 / (1.0 + self.bg_fg_ratio)


def _as_index(source: Union[Corpus, SlidePatchIndex], patch_size: int) -> SlidePatchIndex:
    if isinstance(source, SlidePatchIndex):
        return source
    return SlidePatchIndex(source.slides, patch_size)


def sample_training_batch(source: Union[Corpus, SlidePatchIndex], cfg: TrainConfig,
                          rng: np.random.Generator) -> List[TrainingSample]:
    """Scanner uniform per sample; foreground with probability 1/(1 + bg_fg_ratio)"""
    index = _as_index(source, cfg.patch_size)
    index.require_all_domains()
    p_fg = cfg.foreground_probability
    if p_fg > 0:
        index.require_foreground()

    batch = []
    for _ in range(cfg.batch_size):
        domain = int(rng.integers(len(index.by_domain)))
        if rng.random() < p_fg:
            batch.append(index.sample_foreground(rng, domain))
        else:
            batch.append(index.sample_background(rng, domain))
    return batch


def maybe_style_transfer(patch: Patch, transfer: Optional[TransferLike], p: float,
                         rng: np.random.Generator) -> Patch:
    """Restyle with a random mixed code with probability p, else return the patch itself"""
    if rng.random() >= p:
        return patch
    if transfer is None:
        raise TrainingOrderError("Style transfer requested but no transfer module was trained")
    code = sample_style_code(rng)
    if isinstance(transfer, Generator):
        return generator_forward(transfer, patch, code)
    return transfer(patch, code)


def lr_milestones(cfg: TrainConfig) -> List[int]:
    return [int(round(f * cfg.iterations)) for f in cfg.lr_milestone_fractions]


def lr_schedule(cfg: TrainConfig, iteration: int) -> float:
    if not 0 <= iteration < cfg.iterations:
        raise InvalidIteration(f"Iteration {iteration} outside 0..{cfg.iterations - 1}")
    passed = sum(1 for m in lr_milestones(cfg) if iteration >= m)
    return cfg.lr_start * cfg.lr_decay ** passed


def iteration_streams(seed: int, iteration: int) -> Tuple[np.random.Generator, ...]:
    """Independent (sampling, style, rotation) generators for one iteration"""
    children = np.random.SeedSequence([seed, iteration]).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def augment_sample(sample: TrainingSample, transfer: Optional[TransferLike], cfg: TrainConfig,
                   style_rng: np.random.Generator, rotation_rng: np.random.Generator) -> Tuple[TrainingSample, bool]:
    sample.patch.require_size(cfg.patch_size)
    patch = maybe_style_transfer(sample.patch, transfer, cfg.style_prob, style_rng)
    transferred = patch is not sample.patch
    angle = int(cfg.rotations[int(rotation_rng.integers(len(cfg.rotations)))])
    rotated = rotate_patch(patch, angle)
    centers = rotate_points(sample.centers, angle, patch.size)
    return TrainingSample(rotated, centers), transferred


@dataclass
class DetectorTrainingResult:
    model: DetectorModel
    history: List[Dict[str, float]]
    iteration: int
    config: TrainConfig
    optimizer: Optional[torch.optim.Optimizer] = None

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            kind='detector',
            config=self.config.model_dump(mode='json'),
            models={'detector': self.model.state_dict()},
            optimizers={'detector': self.optimizer.state_dict()} if self.optimizer else {},
            iteration=self.iteration,
            history=self.history,
        )


def train_detector(corpus: Union[Corpus, SlidePatchIndex], transfer: Optional[TransferLike], cfg: TrainConfig,
                   resume: Optional[Checkpoint] = None, progress: bool = False,
                   on_checkpoint: Optional[Callable[[DetectorTrainingResult], None]] = None) -> DetectorTrainingResult:
    if cfg.style_prob > 0 and transfer is None:
        raise TrainingOrderError(
            "Detector training with style_prob > 0 needs a trained transfer module; "
            "run train-transfer first or pass a style probability of 0")
    index = _as_index(corpus, cfg.patch_size)
    index.require_all_domains()
    if not cfg.background_only:
        index.require_foreground()

    model = build_detector(cfg.anchors, cfg.patch_size, cfg.backbone_width, cfg.fpn_channels, cfg.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr_start, momentum=cfg.momentum,
                                weight_decay=cfg.weight_decay)
    history: List[Dict[str, float]] = []
    start = 0
    if resume is not None:
        model.load_state_dict(resume.models['detector'])
        if 'detector' in resume.optimizers:
            optimizer.load_state_dict(resume.optimizers['detector'])
        start, history = resume.iteration, list(resume.history)
        logging.info(f"Resuming detector training at iteration {start + 1}")

    result = DetectorTrainingResult(model, history, start, cfg, optimizer)
    if isinstance(transfer, Generator):
        transfer.eval()
    model.train()
    for it in tqdm(range(start, cfg.iterations), disable=not progress, desc="detector", initial=start,
                   total=cfg.iterations):
        sample_rng, style_rng, rotation_rng = iteration_streams(cfg.seed, it)
        batch = sample_training_batch(index, cfg, sample_rng)
        augmented, transferred = [], 0
        for sample in batch:
            out, was_transferred = augment_sample(sample, transfer, cfg, style_rng, rotation_rng)
            augmented.append(out)
            transferred += int(was_transferred)

        lr = lr_schedule(cfg, it)
        for group in optimizer.param_groups:
            group['lr'] = lr

        pixels = np.stack([s.patch.pixels for s in augmented])
        loss = detector_loss(model, pixels, [s.centers for s in augmented], cfg.focal)
        if not math.isfinite(loss.total.item()):
            logging.warning(f"Non-finite detector loss at iteration {it + 1}; skipping update")
        else:
            optimizer.zero_grad()
            loss.total.backward()
            if cfg.grad_clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            optimizer.step()

        entry = {'iteration': it + 1, 'loss': loss.total.item(), 'cls': loss.classification.item(),
                 'reg': loss.regression.item(), 'lr': lr, 'num_fg': loss.num_foreground,
                 'transferred': transferred}
        history.append(entry)
        result.iteration = it + 1

        if (it + 1) % cfg.log_every == 0:
            logging.info(f"detector it {it + 1}/{cfg.iterations}: loss {entry['loss']:.4f} "
                         f"(cls {entry['cls']:.4f}, reg {entry['reg']:.4f}) lr {lr:g}")
        if on_checkpoint and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(result)

    model.eval()
    return result


def load_detector(checkpoint: Checkpoint) -> Tuple[DetectorModel, TrainConfig]:
    cfg = TrainConfig(**checkpoint.config)
    model = build_detector(cfg.anchors, cfg.patch_size, cfg.backbone_width, cfg.fpn_channels, cfg.seed)
    model.load_state_dict(checkpoint.models['detector'])
    model.eval()
    logging.debug(f"Loaded detector for {cfg.patch_size}px patches")
    return model, cfg
