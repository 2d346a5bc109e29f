"""Multi-domain style transfer: generator, critic, losses and adversarial training.

The generator is conditioned on a 4-component style code broadcast to
constant planes. It is trained on one-hot codes only; mixed codes are used
afterwards, when the generator serves as a training-time augmenter for the
detector.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, Field, field_validator
from tqdm import tqdm

from config import NUM_TRAINING_DOMAINS, TRANSFER_PATCH_SIZE
from data.checkpoint_store import Checkpoint
from data.synth_corpus import Corpus
from utils.domain_types import Patch, StyleCode
from utils.error_handler import ShapeError
from utils.patch_sampler import SlidePatchIndex

CodeLike = Union[StyleCode, np.ndarray, torch.Tensor, Sequence[float]]


class TransferConfig(BaseModel):
    lambda_cls: float = Field(1.0, ge=0)
    lambda_rec: float = Field(10.0, ge=0)
    lambda_gp: float = Field(10.0, ge=0)
    g_lr: float = Field(1e-4, gt=0)
    d_lr: float = Field(1e-4, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    iterations: int = Field(5000, gt=0)
    batch_size: int = Field(16, gt=0)
    n_critic: int = Field(5, ge=1)
    lr_decay_start: float = Field(0.5, ge=0, le=1)
    patch_size: int = Field(TRANSFER_PATCH_SIZE, ge=8)
    base_channels: int = Field(32, ge=4)
    n_residual: int = Field(4, ge=0)
    holdout_slides_per_domain: int = Field(1, ge=0)
    seed: int = 0
    log_every: int = Field(100, ge=1)
    checkpoint_every: int = Field(0, ge=0)

    @field_validator('patch_size')
    @classmethod
    def _divisible_by_four(cls, v):
        if v % 4:
            raise ValueError(f"patch_size must be a multiple of 4, got {v}")
        return v


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, kernel_size=3, stride=1, padding=1, bias=False),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class Generator(nn.Module):
    """Encoder, residual bottleneck, decoder; output in [-1, 1]"""

    def __init__(self, base_channels: int = 32, n_residual: int = 4, zero_output: bool = False):
        super().__init__()
        c = base_channels
        layers = [nn.Conv2d(3 + NUM_TRAINING_DOMAINS, c, kernel_size=7, stride=1, padding=3, bias=False),
                  nn.InstanceNorm2d(c, affine=True),
                  nn.ReLU(inplace=True)]
        for _ in range(2):
            layers += [nn.Conv2d(c, c * 2, kernel_size=4, stride=2, padding=1, bias=False),
                       nn.InstanceNorm2d(c * 2, affine=True),
                       nn.ReLU(inplace=True)]
            c *= 2
        layers += [ResidualBlock(c) for _ in range(n_residual)]
        for _ in range(2):
            layers += [nn.ConvTranspose2d(c, c // 2, kernel_size=4, stride=2, padding=1, bias=False),
                       nn.InstanceNorm2d(c // 2, affine=True),
                       nn.ReLU(inplace=True)]
            c //= 2
        self.output = nn.Conv2d(c, 3, kernel_size=7, stride=1, padding=3, bias=False)
        layers += [self.output, nn.Tanh()]
        self.main = nn.Sequential(*layers)
        if zero_output:
            nn.init.zeros_(self.output.weight)

    def forward(self, x: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
        b, _, h, w = x.shape
        planes = codes.view(b, NUM_TRAINING_DOMAINS, 1, 1).expand(b, NUM_TRAINING_DOMAINS, h, w)
        return self.main(torch.cat([x, planes.to(x.dtype)], dim=1))


class Discriminator(nn.Module):
    """Patch critic with an adversarial map head and a 4-way domain head"""

    def __init__(self, patch_size: int = TRANSFER_PATCH_SIZE, base_channels: int = 32):
        super().__init__()
        n_layers = max(1, min(4, int(math.log2(patch_size)) - 2))
        c = base_channels
        layers = [nn.Conv2d(3, c, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.01)]
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(c, c * 2, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.01)]
            c *= 2
        self.main = nn.Sequential(*layers)
        self.src_head = nn.Conv2d(c, 1, kernel_size=3, stride=1, padding=1, bias=False)
        self.cls_head = nn.Conv2d(c, NUM_TRAINING_DOMAINS, kernel_size=3, stride=1, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.main(x)
        return self.src_head(h), self.cls_head(h).mean(dim=(2, 3))


def build_transfer_models(cfg: TransferConfig) -> Tuple[Generator, Discriminator]:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        g = Generator(cfg.base_channels, cfg.n_residual)
        d = Discriminator(cfg.patch_size, cfg.base_channels)
    return g, d


def codes_to_tensor(code: CodeLike, batch_size: int, dtype=torch.float32) -> torch.Tensor:
    """(B, 4) code tensor from a single code or a batch of codes"""
    if isinstance(code, StyleCode):
        code = code.as_array()
    t = torch.as_tensor(np.asarray(code) if not isinstance(code, torch.Tensor) else code, dtype=dtype)
    if t.dim() == 1:
        t = t.unsqueeze(0).expand(batch_size, -1)
    if t.shape != (batch_size, NUM_TRAINING_DOMAINS):
        raise ShapeError(f"Expected codes of shape ({batch_size}, {NUM_TRAINING_DOMAINS}), got {tuple(t.shape)}")
    return t


def one_hot_codes(domains: torch.Tensor) -> torch.Tensor:
    return F.one_hot(domains.long(), NUM_TRAINING_DOMAINS).float()


def nhwc_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)).permute(0, 3, 1, 2).contiguous()


def tensor_to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


def transfer_patch_batch(g: Generator, pixels: np.ndarray, codes: CodeLike) -> np.ndarray:
    """Restyle a (B, H, W, 3) batch in model range"""
    if pixels.ndim != 4 or pixels.shape[1] != pixels.shape[2] or pixels.shape[3] != 3:
        raise ShapeError(f"Expected square (B, H, W, 3) pixels, got {pixels.shape}")
    if pixels.shape[1] % 4:
        raise ShapeError(f"Generator needs patch sizes divisible by 4, got {pixels.shape[1]}")
    x = nhwc_to_tensor(pixels)
    with torch.no_grad():
        out = g(x, codes_to_tensor(codes, x.shape[0]))
    return np.clip(tensor_to_nhwc(out), -1.0, 1.0)


def generator_forward(g: Generator, patch: Patch, code: StyleCode) -> Patch:
    out = transfer_patch_batch(g, patch.pixels[None], code)
    return patch.with_pixels(out[0])


def domain_cross_entropy(logits: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, domains.long())


def classification_losses(d: Callable, real: torch.Tensor, real_domains: torch.Tensor,
                          fake: torch.Tensor, target_domains: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Domain-head cross-entropy on real patches (true scanner) and on generated ones (target scanner)"""
    _, real_logits = d(real)
    _, fake_logits = d(fake)
    return domain_cross_entropy(real_logits, real_domains), domain_cross_entropy(fake_logits, target_domains)


def reconstruction_loss(g: Callable, x: torch.Tensor, target_code: CodeLike, original_code: CodeLike,
                        fake: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean L1 between x and G(G(x, c), c'); pass fake = G(x, c) when it is already computed"""
    b = x.shape[0]
    if fake is None:
        fake = g(x, codes_to_tensor(target_code, b, x.dtype))
    cycled = g(fake, codes_to_tensor(original_code, b, x.dtype))
    return torch.mean(torch.abs(x - cycled))


def gradient_penalty(d: Callable, real: torch.Tensor, fake: torch.Tensor,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Mean (||grad D(x_hat)||_2 - 1)^2 over random interpolates"""
    b = real.shape[0]
    alpha = torch.rand(b, 1, 1, 1, generator=generator, dtype=real.dtype)
    x_hat = (alpha * real.detach() + (1 - alpha) * fake.detach()).requires_grad_(True)
    src, _ = d(x_hat)
    if not src.requires_grad:
        grad = torch.zeros_like(x_hat)
    else:
        grad = torch.autograd.grad(outputs=src, inputs=x_hat, grad_outputs=torch.ones_like(src),
                                   create_graph=True, retain_graph=True, allow_unused=True)[0]
        if grad is None:
            grad = torch.zeros_like(x_hat)
    norm = grad.reshape(b, -1).norm(2, dim=1)
    return torch.mean((norm - 1) ** 2)


def adversarial_loss(d: Callable, real: torch.Tensor, fake: torch.Tensor,
                     generator: Optional[torch.Generator] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Wasserstein critic gap E[D(real)] - E[D(fake)] and the gradient penalty"""
    if real.shape != fake.shape:
        raise ShapeError(f"Real and fake batches differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    src_real, _ = d(real)
    src_fake, _ = d(fake)
    l_adv = torch.mean(src_real) - torch.mean(src_fake)
    return l_adv, gradient_penalty(d, real, fake, generator)


@dataclass
class TransferLossPieces:
    # critic gap E[D(real)] - E[D(fake)], seen by D
    adv_d: Union[float, torch.Tensor] = 0.0
    gradient_penalty: Union[float, torch.Tensor] = 0.0
    cls_real: Union[float, torch.Tensor] = 0.0
    # -E[D(G(x, c))], seen by G
    adv_g: Union[float, torch.Tensor] = 0.0
    cls_fake: Union[float, torch.Tensor] = 0.0
    rec: Union[float, torch.Tensor] = 0.0


def total_losses(cfg: TransferConfig, pieces: TransferLossPieces):
    """(L_D, L_G)"""
    l_d = -pieces.adv_d + cfg.lambda_cls * pieces.cls_real + cfg.lambda_gp * pieces.gradient_penalty
    l_g = pieces.adv_g + cfg.lambda_cls * pieces.cls_fake + cfg.lambda_rec * pieces.rec
    return l_d, l_g


@dataclass
class TransferTrainingResult:
    generator: Generator
    discriminator: Discriminator
    history: List[Dict[str, float]]
    iteration: int
    config: TransferConfig
    optimizers: Dict[str, torch.optim.Optimizer] = field(default_factory=dict)

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            kind='transfer',
            config=self.config.model_dump(mode='json'),
            models={'generator': self.generator.state_dict(), 'discriminator': self.discriminator.state_dict()},
            optimizers={name: opt.state_dict() for name, opt in self.optimizers.items()},
            iteration=self.iteration,
            history=self.history,
        )


def split_holdout(corpus: Corpus, holdout_per_domain: int):
    """(training slides, held-out slides) over the training scanners"""
    train, held = [], []
    for d in range(NUM_TRAINING_DOMAINS):
        slides = corpus.slides_for(d)
        k = holdout_per_domain if len(slides) > holdout_per_domain else 0
        if holdout_per_domain and not k:
            logging.warning(f"Scanner {d} has too few slides for a hold-out split; training on all of them")
        train += slides[:len(slides) - k]
        held += slides[len(slides) - k:]
    return train, held


def _lr_factor(cfg: TransferConfig, iteration: int) -> float:
    start = int(cfg.lr_decay_start * cfg.iterations)
    if iteration < start or cfg.iterations == start:
        return 1.0
    return max(0.0, (cfg.iterations - iteration) / (cfg.iterations - start))


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, iteration]))


class _StepCritic:
    """Wraps D so each input tensor is scored once within a training step"""

    def __init__(self, d: Callable):
        self.d = d
        self._seen: Dict[int, Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]] = {}

    def __call__(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if id(x) not in self._seen:
            self._seen[id(x)] = (x, self.d(x))
        return self._seen[id(x)][1]


def train_transfer(cfg: TransferConfig, corpus: Corpus, resume: Optional[Checkpoint] = None,
                   progress: bool = False,
                   on_checkpoint: Optional[Callable[[TransferTrainingResult], None]] = None) -> TransferTrainingResult:
    """Alternate critic and generator updates, one critic step per iteration"""
    train_slides, _ = split_holdout(corpus, cfg.holdout_slides_per_domain)
    index = SlidePatchIndex(train_slides, cfg.patch_size)
    index.require_all_domains()

    g, d = build_transfer_models(cfg)
    g_opt = torch.optim.Adam(g.parameters(), cfg.g_lr, (cfg.beta1, cfg.beta2))
    d_opt = torch.optim.Adam(d.parameters(), cfg.d_lr, (cfg.beta1, cfg.beta2))
    history: List[Dict[str, float]] = []
    start = 0
    if resume is not None:
        g.load_state_dict(resume.models['generator'])
        d.load_state_dict(resume.models['discriminator'])
        if 'generator' in resume.optimizers:
            g_opt.load_state_dict(resume.optimizers['generator'])
            d_opt.load_state_dict(resume.optimizers['discriminator'])
        start, history = resume.iteration, list(resume.history)
        logging.info(f"Resuming transfer training at iteration {start + 1}")

    result = TransferTrainingResult(g, d, history, start, cfg, {'generator': g_opt, 'discriminator': d_opt})
    g.train()
    d.train()
    for it in tqdm(range(start, cfg.iterations), disable=not progress, desc="transfer", initial=start,
                   total=cfg.iterations):
        rng = iteration_rng(cfg.seed, it)
        torch_gen = torch.Generator().manual_seed(int(rng.integers(2 ** 31)))
        pixels, source = index.sample_domain_batch(rng, cfg.batch_size)
        target = rng.integers(0, NUM_TRAINING_DOMAINS, size=cfg.batch_size)
        x = nhwc_to_tensor(pixels)
        c_org, c_trg = torch.from_numpy(source), torch.from_numpy(target)

        factor = _lr_factor(cfg, it)
        for group in g_opt.param_groups:
            group['lr'] = cfg.g_lr * factor
        for group in d_opt.param_groups:
            group['lr'] = cfg.d_lr * factor

        # Critic step
        critic = _StepCritic(d)
        with torch.no_grad():
            fake = g(x, one_hot_codes(c_trg))
        adv_d, gp = adversarial_loss(critic, x, fake, torch_gen)
        cls_real, _ = classification_losses(critic, x, c_org, fake, c_trg)
        d_pieces = TransferLossPieces(adv_d=adv_d, gradient_penalty=gp, cls_real=cls_real)
        l_d, _ = total_losses(cfg, d_pieces)
        d_opt.zero_grad()
        l_d.backward()
        d_opt.step()

        entry = {'iteration': it + 1, 'd_loss': l_d.item(), 'd_adv': d_pieces.adv_d.item(),
                 'd_cls': d_pieces.cls_real.item(), 'd_gp': d_pieces.gradient_penalty.item(),
                 'lr_factor': factor}

        # Generator step; its columns appear only on the rows where it ran
        if it % cfg.n_critic == 0:
            critic = _StepCritic(d)
            fake = g(x, one_hot_codes(c_trg))
            src_fake, _ = critic(fake)
            _, cls_fake = classification_losses(critic, x, c_org, fake, c_trg)
            g_pieces = TransferLossPieces(
                adv_g=-src_fake.mean(),
                cls_fake=cls_fake,
                rec=reconstruction_loss(g, x, one_hot_codes(c_trg), one_hot_codes(c_org), fake=fake),
            )
            _, l_g = total_losses(cfg, g_pieces)
            g_opt.zero_grad()
            l_g.backward()
            g_opt.step()
            entry.update({'g_loss': l_g.item(), 'g_adv': g_pieces.adv_g.item(),
                          'g_cls': g_pieces.cls_fake.item(), 'g_rec': g_pieces.rec.item()})

        history.append(entry)
        result.iteration = it + 1

        if (it + 1) % cfg.log_every == 0:
            logging.info(f"transfer it {it + 1}/{cfg.iterations}: D {entry['d_loss']:.4f} "
                         f"G {entry.get('g_loss', float('nan')):.4f} rec {entry.get('g_rec', float('nan')):.4f}")
        if on_checkpoint and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(result)

    g.eval()
    d.eval()
    return result


def load_transfer_models(checkpoint: Checkpoint) -> Tuple[Generator, Discriminator, TransferConfig]:
    cfg = TransferConfig(**checkpoint.config)
    g, d = build_transfer_models(cfg)
    g.load_state_dict(checkpoint.models['generator'])
    d.load_state_dict(checkpoint.models['discriminator'])
    g.eval()
    d.eval()
    return g, d, cfg
