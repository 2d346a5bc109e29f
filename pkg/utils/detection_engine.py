import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from torchvision.ops import box_iou, sigmoid_focal_loss

from config import BOX_SIDE, PATCH_SIZE
from utils.domain_types import GroundTruthBox, Patch, box_from_center
from utils.error_handler import InvalidLevel, ShapeError

FOCAL_EPS = 1e-7
FG_IOU_THRESHOLD = 0.5
BG_IOU_THRESHOLD = 0.4
SMOOTH_L1_BETA = 0.1
PRIOR_PROBABILITY = 0.01
MAX_LOG_SCALE = math.log(1000.0 / 16)

# Standard detector base sizes, before the fixed-size override
DEFAULT_BASE_SIZES = (32.0, 64.0, 128.0, 256.0, 512.0)

FG, BG, IGNORE = 1, 0, -1


class AnchorConfig(BaseModel):
    base_sizes: Tuple[float, ...] = (float(BOX_SIDE),) * 3
    scales: Tuple[float, ...] = (2 ** 0, 2 ** (1 / 3), 2 ** (2 / 3))
    aspect_ratios: Tuple[float, ...] = (1.0,)
    strides: Tuple[int, ...] = (8, 16, 32)

    @model_validator(mode='after')
    def _levels_match(self):
        if len(self.base_sizes) != len(self.strides):
            raise ValueError("base_sizes and strides need one entry per pyramid level")
        if any(b <= 0 for b in self.base_sizes) or any(s <= 0 for s in self.scales):
            raise ValueError("anchor sizes must be positive")
        return self

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    @property
    def num_levels(self) -> int:
        return len(self.base_sizes)


class FocalLossConfig(BaseModel):
    gamma: float = Field(2.0, ge=0)
    alpha: float = Field(0.25, ge=0, le=1)


def anchor_sides(cfg: AnchorConfig, level: int) -> List[float]:
    if not 0 <= level < cfg.num_levels:
        raise InvalidLevel(f"Pyramid level {level} outside 0..{cfg.num_levels - 1}")
    base = cfg.base_sizes[level]
    return [base * s for s in cfg.scales]


def build_anchors(cfg: AnchorConfig, level: int, feature_stride: float, feature_size: int) -> np.ndarray:
    """(feature_size**2 * anchors_per_cell, 4) xyxy anchors, cell-major then scale"""
    sides = anchor_sides(cfg, level)
    shapes = []
    for side in sides:
        for ratio in cfg.aspect_ratios:
            shapes.append((side / math.sqrt(ratio), side * math.sqrt(ratio)))
    shapes = np.asarray(shapes, dtype=np.float64)

    offsets = (np.arange(feature_size, dtype=np.float64) + 0.5) * feature_stride
    cy, cx = np.meshgrid(offsets, offsets, indexing='ij')
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]
    half = shapes[None, :, :] / 2.0
    anchors = np.concatenate([centers - half, centers + half], axis=2)
    return anchors.reshape(-1, 4)


def build_all_anchors(cfg: AnchorConfig, image_size: int) -> np.ndarray:
    levels = []
    for level, stride in enumerate(cfg.strides):
        levels.append(build_anchors(cfg, level, stride, image_size // stride))
    return np.concatenate(levels, axis=0)


def focal_loss(cfg: FocalLossConfig, p_t, alpha_t: Optional[float] = None):
    """-alpha_t (1 - p_t)^gamma log(p_t); p_t is clamped to [1e-7, 1]

    cfg.alpha is used as alpha_t unless given. Floats in give a float out,
    tensors in give a tensor out.
    """
    a = cfg.alpha if alpha_t is None else alpha_t
    is_tensor = isinstance(p_t, torch.Tensor)
    t = p_t if is_tensor else torch.as_tensor(p_t, dtype=torch.float64)
    t = t.clamp(min=FOCAL_EPS, max=1.0)
    value = -a * (1.0 - t) ** cfg.gamma * torch.log(t)
    if is_tensor:
        return value
    return value.item() if value.dim() == 0 else value.numpy()


def encode_boxes(anchors: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Center/size offsets (dx, dy, dw, dh) of boxes relative to anchors"""
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = anchors[:, 0] + 0.5 * aw, anchors[:, 1] + 0.5 * ah
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    bx, by = boxes[:, 0] + 0.5 * bw, boxes[:, 1] + 0.5 * bh
    return torch.stack([(bx - ax) / aw, (by - ay) / ah, torch.log(bw / aw), torch.log(bh / ah)], dim=-1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    aw, ah = anchors[..., 2] - anchors[..., 0], anchors[..., 3] - anchors[..., 1]
    ax, ay = anchors[..., 0] + 0.5 * aw, anchors[..., 1] + 0.5 * ah
    dx, dy = deltas[..., 0], deltas[..., 1]
    dw, dh = deltas[..., 2].clamp(max=MAX_LOG_SCALE), deltas[..., 3].clamp(max=MAX_LOG_SCALE)
    cx, cy = ax + dx * aw, ay + dy * ah
    w, h = aw * torch.exp(dw), ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


@dataclass
class AssignedTargets:
    labels: torch.Tensor        # (N,) FG / BG / IGNORE
    reg_targets: torch.Tensor   # (N, 4), zero off foreground
    matched_gt: torch.Tensor    # (N,) index into ground truth, -1 if none

    @property
    def num_foreground(self) -> int:
        return int((self.labels == FG).sum())


def _as_box_tensor(ground_truth, dtype) -> torch.Tensor:
    if isinstance(ground_truth, torch.Tensor):
        return ground_truth.to(dtype).reshape(-1, 4)
    if len(ground_truth) and isinstance(ground_truth[0], GroundTruthBox):
        return torch.tensor([b.to_xyxy() for b in ground_truth], dtype=dtype)
    arr = np.asarray(ground_truth, dtype=np.float64)
    if arr.size and arr.shape[-1] == 2:
        arr = np.asarray([box_from_center(x, y) for x, y in arr.reshape(-1, 2)])
    return torch.as_tensor(arr.reshape(-1, 4), dtype=dtype)


def assign_targets(anchors, ground_truth) -> AssignedTargets:
    """IoU >= 0.5 foreground, < 0.4 background, in between ignored; every box also claims its best anchor

    ground_truth may be GroundTruthBoxes, (M, 2) centers or (M, 4) xyxy boxes.
    """
    anchors = torch.as_tensor(anchors)
    if not anchors.is_floating_point():
        anchors = anchors.double()
    gt = _as_box_tensor(ground_truth, anchors.dtype)
    n = anchors.shape[0]
    if gt.shape[0] == 0:
        return AssignedTargets(torch.full((n,), BG, dtype=torch.long),
                               torch.zeros((n, 4), dtype=anchors.dtype),
                               torch.full((n,), -1, dtype=torch.long))

    iou = box_iou(anchors, gt)
    max_iou, matched = iou.max(dim=1)
    labels = torch.full((n,), IGNORE, dtype=torch.long)
    labels[max_iou < BG_IOU_THRESHOLD] = BG
    labels[max_iou >= FG_IOU_THRESHOLD] = FG

    best_anchor = iou.argmax(dim=0)
    labels[best_anchor] = FG
    matched[best_anchor] = torch.arange(gt.shape[0])

    reg = encode_boxes(anchors, gt[matched])
    fg = labels == FG
    reg = torch.where(fg[:, None], reg, torch.zeros_like(reg))
    matched = torch.where(fg, matched, torch.full_like(matched, -1))
    return AssignedTargets(labels, reg, matched)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualStage(nn.Module):
    """One strided residual block"""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = _norm(out_channels)
        self.shortcut = nn.Sequential(nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                                      _norm(out_channels))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _head(channels: int, outputs: int) -> Tuple[nn.Sequential, nn.Conv2d]:
    tower = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True),
                          nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(inplace=True))
    return tower, nn.Conv2d(channels, outputs, 3, padding=1)


class DetectorModel(nn.Module):
    """Residual backbone (3 stages), 3-level feature pyramid, shared class and box heads"""

    def __init__(self, anchor_cfg: Optional[AnchorConfig] = None, patch_size: int = PATCH_SIZE,
                 width: int = 16, fpn_channels: int = 64, prior_prob: float = PRIOR_PROBABILITY):
        super().__init__()
        self.anchor_cfg = anchor_cfg or AnchorConfig()
        if self.anchor_cfg.num_levels != 3 or tuple(self.anchor_cfg.strides) != (8, 16, 32):
            raise ValueError("DetectorModel builds pyramid levels at strides 8, 16 and 32")
        if patch_size % 32:
            raise ShapeError(f"Detector patch size must be a multiple of 32, got {patch_size}")
        self.patch_size = patch_size
        a = self.anchor_cfg.anchors_per_cell

        self.stem = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1, bias=False), _norm(width), nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1, bias=False), _norm(width), nn.ReLU(inplace=True),
        )
        chans = [width * 2, width * 4, width * 8]
        self.stages = nn.ModuleList([ResidualStage(width, chans[0]), ResidualStage(chans[0], chans[1]),
                                     ResidualStage(chans[1], chans[2])])
        self.lateral = nn.ModuleList([nn.Conv2d(c, fpn_channels, 1) for c in chans])
        self.smooth = nn.ModuleList([nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1) for _ in chans])

        self.cls_tower, self.cls_logits = _head(fpn_channels, a)
        self.reg_tower, self.reg_deltas = _head(fpn_channels, a * 4)
        for module in [*self.cls_tower, self.cls_logits, *self.reg_tower, self.reg_deltas]:
            if isinstance(module, nn.Conv2d):
                nn.init.normal_(module.weight, std=0.01)
                nn.init.zeros_(module.bias)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior_prob) / prior_prob))
        self._anchor_cache: Dict[int, np.ndarray] = {}

    def anchors_for(self, image_size: int) -> np.ndarray:
        if image_size not in self._anchor_cache:
            self._anchor_cache[image_size] = build_all_anchors(self.anchor_cfg, image_size)
        return self._anchor_cache[image_size]

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, N) class logits and (B, N, 4) box deltas"""
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ShapeError(f"Detector input must be a multiple of 32 px, got {tuple(x.shape[-2:])}")
        h = self.stem(x)
        features = []
        for stage in self.stages:
            h = stage(h)
            features.append(h)

        laterals = [lat(f) for lat, f in zip(self.lateral, features)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(laterals[i + 1], size=laterals[i].shape[-2:], mode='nearest')
        pyramid = [sm(l) for sm, l in zip(self.smooth, laterals)]

        b = x.shape[0]
        logits, deltas = [], []
        for p in pyramid:
            logits.append(self.cls_logits(self.cls_tower(p)).permute(0, 2, 3, 1).reshape(b, -1))
            deltas.append(self.reg_deltas(self.reg_tower(p)).permute(0, 2, 3, 1).reshape(b, -1, 4))
        return torch.cat(logits, dim=1), torch.cat(deltas, dim=1)


def build_detector(anchor_cfg: Optional[AnchorConfig] = None, patch_size: int = PATCH_SIZE,
                   width: int = 16, fpn_channels: int = 64, seed: int = 0) -> DetectorModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DetectorModel(anchor_cfg, patch_size, width, fpn_channels)


@dataclass
class DetectorOutput:
    scores: np.ndarray   # (N,)
    boxes: np.ndarray    # (N, 4) xyxy in patch coordinates
    anchors: np.ndarray  # (N, 4)


def detect_batch(m: DetectorModel, pixels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(B, N) scores and (B, N, 4) decoded boxes for a (B, H, W, 3) batch"""
    if pixels.ndim != 4 or pixels.shape[1] != m.patch_size or pixels.shape[2] != m.patch_size:
        raise ShapeError(f"Detector expects (B, {m.patch_size}, {m.patch_size}, 3) patches, got {pixels.shape}")
    x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(0, 3, 1, 2)
    param = next(m.parameters())
    x = x.to(param.dtype)
    anchors = torch.as_tensor(m.anchors_for(m.patch_size), dtype=param.dtype)
    with torch.no_grad():
        logits, deltas = m(x)
        scores = torch.sigmoid(logits)
        boxes = decode_boxes(anchors.unsqueeze(0), deltas)
    return scores.numpy(), boxes.numpy()


def detector_forward(m: DetectorModel, patch: Patch) -> DetectorOutput:
    patch.require_size(m.patch_size)
    scores, boxes = detect_batch(m, patch.pixels[None])
    return DetectorOutput(scores=scores[0], boxes=boxes[0], anchors=m.anchors_for(m.patch_size))


@dataclass
class DetectorLoss:
    total: torch.Tensor
    classification: torch.Tensor
    regression: torch.Tensor
    num_foreground: int


def loss_from_outputs(logits: torch.Tensor, deltas: torch.Tensor, anchors,
                      ground_truth: Sequence, cfg: FocalLossConfig) -> DetectorLoss:
    """Focal loss over non-ignored anchors plus smooth-L1 over foreground, both per foreground anchor"""
    anchors = torch.as_tensor(anchors, dtype=logits.dtype)
    assigned = [assign_targets(anchors, gt) for gt in ground_truth]
    labels = torch.stack([a.labels for a in assigned])
    targets = torch.stack([a.reg_targets.to(deltas.dtype) for a in assigned])

    valid = labels != IGNORE
    fg = labels == FG
    num_fg = int(fg.sum())
    normalizer = max(1, num_fg)

    cls_loss = sigmoid_focal_loss(logits[valid], fg[valid].to(logits.dtype),
                                  alpha=cfg.alpha, gamma=cfg.gamma, reduction='sum') / normalizer
    if num_fg:
        reg_loss = F.smooth_l1_loss(deltas[fg], targets[fg], beta=SMOOTH_L1_BETA, reduction='sum') / normalizer
    else:
        reg_loss = deltas.sum() * 0.0
    return DetectorLoss(cls_loss + reg_loss, cls_loss, reg_loss, num_fg)


def detector_loss(m: DetectorModel, pixels: Union[np.ndarray, torch.Tensor], ground_truth: Sequence,
                  cfg: FocalLossConfig) -> DetectorLoss:
    """pixels: (B, H, W, 3) array or (B, 3, H, W) tensor; one ground-truth list per image"""
    if isinstance(pixels, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(0, 3, 1, 2)
    else:
        x = pixels
    x = x.to(next(m.parameters()).dtype)
    if len(ground_truth) != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} images but {len(ground_truth)} ground-truth lists")
    logits, deltas = m(x)
    return loss_from_outputs(logits, deltas, m.anchors_for(x.shape[-1]), ground_truth, cfg)
