import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from config import NUM_TRAINING_DOMAINS
from data.synth_corpus import Corpus, Slide
from utils.domain_types import sample_style_code, to_uint8
from utils.patch_sampler import SlidePatchIndex
from utils.transfer_module import (Generator, TransferConfig, iteration_rng, nhwc_to_tensor, one_hot_codes,
                                   split_holdout, transfer_patch_batch)


class StyleClassifier(nn.Module):
    """Small CNN telling the four training scanners apart"""

    def __init__(self, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(width * 2, width * 4, 3, padding=1), nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.classifier = nn.Linear(width * 4, NUM_TRAINING_DOMAINS)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


@dataclass
class TransferReport:
    cycle_l1: float
    target_accuracy: float
    real_accuracy: float
    num_patches: int

    def to_dict(self) -> Dict:
        return asdict(self)


def train_style_classifier(slides: Sequence[Slide], patch_size: int, iterations: int = 600,
                           batch_size: int = 32, seed: int = 1234, lr: float = 1e-3) -> StyleClassifier:
    index = SlidePatchIndex(slides, patch_size)
    index.require_all_domains()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = StyleClassifier()
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for it in range(iterations):
        pixels, domains = index.sample_domain_batch(iteration_rng(seed, it), batch_size)
        loss = F.cross_entropy(model(nhwc_to_tensor(pixels)), torch.from_numpy(domains))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % 200 == 0:
            logging.info(f"style classifier it {it + 1}/{iterations}: loss {loss.item():.4f}")
    model.eval()
    return model


def evaluate_transfer(g: Generator, corpus: Corpus, cfg: TransferConfig, num_patches: int = 256,
                      classifier_iterations: int = 600, seed: int = 4321) -> TransferReport:
    """Held-out cycle L1 and how often an independent classifier sees the target scanner"""
    train_slides, held_slides = split_holdout(corpus, cfg.holdout_slides_per_domain)
    classifier = train_style_classifier(train_slides, cfg.patch_size, classifier_iterations)
    held = SlidePatchIndex(held_slides or train_slides, cfg.patch_size)
    held.require_all_domains()

    rng = np.random.default_rng(seed)
    pixels, source = held.sample_domain_batch(rng, num_patches)
    target = rng.integers(0, NUM_TRAINING_DOMAINS, size=num_patches)
    x = nhwc_to_tensor(pixels)
    c_org, c_trg = torch.from_numpy(source), torch.from_numpy(target)

    g.eval()
    with torch.no_grad():
        fake = g(x, one_hot_codes(c_trg))
        cycled = g(fake, one_hot_codes(c_org))
        cycle_l1 = torch.mean(torch.abs(x - cycled)).item()
        target_acc = (classifier(fake).argmax(dim=1) == c_trg).float().mean().item()
        real_acc = (classifier(x).argmax(dim=1) == c_org).float().mean().item()

    report = TransferReport(cycle_l1=cycle_l1, target_accuracy=target_acc, real_accuracy=real_acc,
                            num_patches=num_patches)
    logging.info(f"Transfer evaluation: cycle L1 {cycle_l1:.4f}, target accuracy {target_acc:.3f}, "
                 f"classifier accuracy on real patches {real_acc:.3f}")
    return report


def transfer_gallery(g: Generator, corpus: Corpus, cfg: TransferConfig, seed: int = 4321) -> np.ndarray:
    """uint8 grid: one held-out patch per training scanner per row

    Columns are the input, its rendering under each one-hot code and under one
    random mixed code.
    """
    train_slides, held_slides = split_holdout(corpus, cfg.holdout_slides_per_domain)
    held = SlidePatchIndex(held_slides or train_slides, cfg.patch_size)
    held.require_all_domains()

    rng = np.random.default_rng(seed)
    pixels = np.stack([held.random_crop(rng, d).pixels for d in range(NUM_TRAINING_DOMAINS)])
    codes = [np.eye(NUM_TRAINING_DOMAINS)[d] for d in range(NUM_TRAINING_DOMAINS)]
    codes.append(sample_style_code(rng).as_array())
    columns = [pixels] + [transfer_patch_batch(g, pixels, code) for code in codes]
    # (rows, H, cols * W, 3) then stacked rows
    rows = np.concatenate(columns, axis=2)
    return to_uint8(np.concatenate(list(rows), axis=0))


def write_gallery(image: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path)
    logging.info(f"Wrote transfer gallery to {path}")
    return path
