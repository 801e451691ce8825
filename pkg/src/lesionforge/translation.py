"""Shared-latent VAE-GAN translator between lesion and non-lesion patches.

Two encoders map patches to a spatial latent grid, two generators decode it
back, and two patch discriminators judge realism per domain.  The deepest
encoder block and the first generator block are single modules referenced by
both domains, which is what makes the latent space shared.

Loss conventions (all weights come from :class:`LossWeights`):

* KL terms assume unit posterior variance, ``z = mean + eps``, and are
  averaged over latent elements: ``0.5 * mean(mean**2)``.
* Reconstruction NLL is Laplacian, i.e. the mean absolute pixel error.
* Adversarial terms average the discriminator's per-location log outputs.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from lesionforge.errors import DataError, NumericalError
from lesionforge.seeding import torch_generator

LESION = "lesion"
NON_LESION = "non-lesion"
DOMAINS = (LESION, NON_LESION)
TERMS = ("VAE_l", "GAN_l", "CC_l", "VAE_h", "GAN_h", "CC_h")


def other(domain: str) -> str:
    if domain not in DOMAINS:
        raise DataError(f"unknown domain {domain!r}; expected one of {DOMAINS}")
    return NON_LESION if domain == LESION else LESION


@dataclass
class LossWeights:
    """Weights of the adversarial, KL, reconstruction, cycle-KL and cycle-reconstruction terms.

    Defaults follow the published UNIT configuration (10, 0.1, 100, 0.1, 100).
    """

    adversarial: float = 10.0
    kl: float = 0.1
    reconstruction: float = 100.0
    cycle_kl: float = 0.1
    cycle_reconstruction: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise DataError(f"loss weight {name} must be non-negative")


@dataclass
class TranslatorArch:
    side: int = 128
    channels: int = 16
    n_down: int = 2
    n_res: int = 1
    dis_channels: int = 16
    dis_layers: int = 3
    # start both domains' encoder and generator branches from identical weights, so
    # cross-domain translation begins as reconstruction and training only has to
    # learn the difference between the domains
    mirror_init: bool = True

    def validate(self) -> None:
        if self.side % (2**self.n_down):
            raise DataError(f"patch side {self.side} must be divisible by 2**n_down")
        if self.side // 2**self.dis_layers < 1:
            raise DataError("too many discriminator layers for this patch side")

    @property
    def latent_channels(self) -> int:
        return self.channels * 2**self.n_down

    @property
    def latent_side(self) -> int:
        return self.side // 2**self.n_down


@dataclass
class TranslatorTrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    betas: tuple = (0.5, 0.999)
    weight_decay: float = 1e-4
    seed: int = 0


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, padding_mode="reflect")

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.2))


class Encoder(nn.Module):
    """Domain-specific front layers followed by the shared block."""

    def __init__(self, arch: TranslatorArch, shared: nn.Module):
        super().__init__()
        ch = arch.channels
        layers = [nn.Conv2d(1, ch, 5, padding=2, padding_mode="reflect"), nn.LeakyReLU(0.2)]
        for _ in range(arch.n_down):
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1, padding_mode="reflect"), nn.LeakyReLU(0.2)]
            ch *= 2
        layers += [ResBlock(ch) for _ in range(arch.n_res)]
        self.front = nn.Sequential(*layers)
        self.shared = shared

    def forward(self, x):
        return self.shared(self.front(x))


class Generator(nn.Module):
    """Shared block followed by domain-specific residual and upsampling layers."""

    def __init__(self, arch: TranslatorArch, shared: nn.Module):
        super().__init__()
        self.shared = shared
        ch = arch.latent_channels
        layers = [ResBlock(ch) for _ in range(arch.n_res)]
        for _ in range(arch.n_down):
            layers += [nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch //= 2
        layers += [nn.Conv2d(ch, 1, 5, padding=2, padding_mode="reflect")]
        self.back = nn.Sequential(*layers)

    def forward(self, z):
        return torch.sigmoid(self.back(self.shared(z)))


class Discriminator(nn.Module):
    """Strided conv stack emitting one realism logit per spatial location."""

    def __init__(self, arch: TranslatorArch):
        super().__init__()
        ch = arch.dis_channels
        layers = [nn.Conv2d(1, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        for _ in range(arch.dis_layers - 1):
            layers += [nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch *= 2
        layers += [nn.Conv2d(ch, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class SharedLatentTranslator(nn.Module):
    def __init__(self, arch: TranslatorArch | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch or TranslatorArch()
        self.arch.validate()
        self.seed = seed
        self.epoch = 0
        latent = self.arch.latent_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.shared_enc = ResBlock(latent)
            self.shared_gen = ResBlock(latent)
            enc_l, gen_l = Encoder(self.arch, self.shared_enc), Generator(self.arch, self.shared_gen)
            if self.arch.mirror_init:
                # the memo keeps the shared blocks shared instead of copying them
                memo = {id(self.shared_enc): self.shared_enc, id(self.shared_gen): self.shared_gen}
                enc_h, gen_h = copy.deepcopy(enc_l, memo), copy.deepcopy(gen_l, memo)
            else:
                enc_h, gen_h = Encoder(self.arch, self.shared_enc), Generator(self.arch, self.shared_gen)
            self.encoders = nn.ModuleDict({"lesion": enc_l, "nonlesion": enc_h})
            self.generators = nn.ModuleDict({"lesion": gen_l, "nonlesion": gen_h})
            self.discriminators = nn.ModuleDict({"lesion": Discriminator(self.arch), "nonlesion": Discriminator(self.arch)})

    @staticmethod
    def _key(domain: str) -> str:
        other(domain)
        return "lesion" if domain == LESION else "nonlesion"

    def encoder(self, domain: str) -> Encoder:
        return self.encoders[self._key(domain)]

    def generator(self, domain: str) -> Generator:
        return self.generators[self._key(domain)]

    def discriminator(self, domain: str) -> Discriminator:
        return self.discriminators[self._key(domain)]

    def generator_parameters(self):
        return list(self.encoders.parameters()) + list(self.generators.parameters())

    def discriminator_parameters(self):
        return list(self.discriminators.parameters())


def _as_batch(x, arch: TranslatorArch, dtype=torch.float32) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=dtype) if not isinstance(x, torch.Tensor) else x
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    if t.shape[-2:] != (arch.side, arch.side):
        raise DataError(f"patch shape {tuple(t.shape[-2:])} does not match model side {arch.side}")
    return t


class LatentCode(NamedTuple):
    mean: torch.Tensor
    z: torch.Tensor


def encode(model: SharedLatentTranslator, domain: str, x, generator: torch.Generator | None = None) -> LatentCode:
    """Posterior mean; ``z`` adds unit Gaussian noise only when a sampling generator is given."""
    x = _as_batch(x, model.arch, dtype=next(model.parameters()).dtype)
    mean = model.encoder(domain)(x)
    if generator is None:
        return LatentCode(mean, mean)
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return LatentCode(mean, mean + eps)


def decode(model: SharedLatentTranslator, domain: str, z: torch.Tensor) -> torch.Tensor:
    a = model.arch
    if z.ndim != 4 or z.shape[1:] != (a.latent_channels, a.latent_side, a.latent_side):
        raise DataError(f"latent shape {tuple(z.shape)} does not match the architecture")
    return model.generator(domain)(z)


def translate_batch(model, from_domain: str, to_domain: str, x, generator=None) -> torch.Tensor:
    """Differentiable ``G_to(E_from(x))``; sampled when ``generator`` is given."""
    return decode(model, to_domain, encode(model, from_domain, x, generator).z)


@torch.no_grad()
def translate(model: SharedLatentTranslator, patch, from_domain: str = NON_LESION, to_domain: str = LESION) -> np.ndarray:
    """Deterministic inference translation from the posterior mean code."""
    other(from_domain), other(to_domain)
    was_training = model.training
    model.eval()
    out = decode(model, to_domain, encode(model, from_domain, patch).mean)
    model.train(was_training)
    out = out[:, 0].double().numpy()
    return out[0] if np.ndim(patch) == 2 else out


# ---------------------------------------------------------------------------
# losses


def kl_diag_gaussian(mean: torch.Tensor, logvar: torch.Tensor | None = None, reduction: str = "mean") -> torch.Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) = 0.5 * (mean^2 + var - 1 - logvar), per element then reduced.

    ``reduction='sum_last'`` sums over all but the leading (sample) axis.
    """
    if logvar is None:
        logvar = torch.zeros_like(mean)
    per = 0.5 * (mean**2 + torch.exp(logvar) - 1.0 - logvar)
    if reduction == "mean":
        return per.mean()
    if reduction == "sum":
        return per.sum()
    if reduction == "sum_last":
        return per.reshape(per.shape[0], -1).sum(dim=1)
    return per


def laplace_nll(x: torch.Tensor, recon: torch.Tensor) -> torch.Tensor:
    return (x - recon).abs().mean()


def vae_loss(model, domain: str, x, weights: LossWeights, generator=None) -> torch.Tensor:
    x = _as_batch(x, model.arch, dtype=next(model.parameters()).dtype)
    code = encode(model, domain, x, generator)
    recon = decode(model, domain, code.z)
    return weights.kl * kl_diag_gaussian(code.mean) + weights.reconstruction * laplace_nll(x, recon)


class GanTerms(NamedTuple):
    value: torch.Tensor
    d_loss: torch.Tensor
    g_loss: torch.Tensor


def gan_loss(model, domain: str, real_batch, translated_batch, weights: LossWeights) -> GanTerms:
    """Adversarial terms for ``domain``'s discriminator.

    ``value`` is ``w * (E log D(real) + E log(1 - D(fake)))``; the
    discriminator minimizes ``d_loss = -value`` and the generators minimize
    the non-saturating ``g_loss = -w * E log D(fake)``.
    """
    dis = model.discriminator(domain)
    real = _as_batch(real_batch, model.arch, dtype=next(model.parameters()).dtype)
    logit_real = dis(real)
    logit_fake = dis(translated_batch)
    value = weights.adversarial * (F.logsigmoid(logit_real).mean() + F.logsigmoid(-logit_fake).mean())
    g_loss = -weights.adversarial * F.logsigmoid(logit_fake).mean()
    return GanTerms(value, -value, g_loss)


def cycle_loss(model, domain: str, x, weights: LossWeights, generator=None) -> torch.Tensor:
    """x -> other domain -> back, compared with x; plus KL of both codes along the way."""
    x = _as_batch(x, model.arch, dtype=next(model.parameters()).dtype)
    dst = other(domain)
    code_src = encode(model, domain, x, generator)
    crossed = decode(model, dst, code_src.z)
    code_dst = encode(model, dst, crossed, generator)
    back = decode(model, domain, code_dst.z)
    kl = kl_diag_gaussian(code_src.mean) + kl_diag_gaussian(code_dst.mean)
    return weights.cycle_kl * kl + weights.cycle_reconstruction * laplace_nll(x, back)


def total_objective(model, x_lesion, x_nonlesion, weights: LossWeights, seed: int | None = None) -> dict[str, torch.Tensor]:
    """The six named terms and their sum.

    GAN terms report the min-max value (discriminator objective).  With a
    ``seed``, each term samples its codes from its own freshly seeded stream.
    """

    def g(k):
        return None if seed is None else torch_generator(seed + k)

    terms = {
        "VAE_l": vae_loss(model, LESION, x_lesion, weights, g(0)),
        "GAN_l": gan_loss(model, LESION, x_lesion, translate_batch(model, NON_LESION, LESION, x_nonlesion, g(1)), weights).value,
        "CC_l": cycle_loss(model, LESION, x_lesion, weights, g(2)),
        "VAE_h": vae_loss(model, NON_LESION, x_nonlesion, weights, g(3)),
        "GAN_h": gan_loss(model, NON_LESION, x_nonlesion, translate_batch(model, LESION, NON_LESION, x_lesion, g(4)), weights).value,
        "CC_h": cycle_loss(model, NON_LESION, x_nonlesion, weights, g(5)),
    }
    terms["total"] = sum(terms[k] for k in TERMS)
    return terms


def discriminator_objective(model, x_l, x_h, weights: LossWeights, generator=None, fakes=None) -> torch.Tensor:
    """Sum of both domains' adversarial values with translations held fixed (maximized by D).

    ``fakes`` may carry precomputed ``(h->l, l->h)`` translations.
    """
    if fakes is None:
        with torch.no_grad():
            fakes = (
                translate_batch(model, NON_LESION, LESION, x_h, generator),
                translate_batch(model, LESION, NON_LESION, x_l, generator),
            )
    fake_l, fake_h = (f.detach() for f in fakes)
    return gan_loss(model, LESION, x_l, fake_l, weights).value + gan_loss(model, NON_LESION, x_h, fake_h, weights).value


class ForwardPass(NamedTuple):
    loss: torch.Tensor
    terms: dict
    fakes: tuple


def generator_objective(model, x_l, x_h, weights: LossWeights, generator=None) -> ForwardPass:
    """What the encoders/generators minimize: VAE + cycle terms + non-saturating GAN terms.

    Runs each encode/decode once and reuses it across terms, so a code is
    sampled once and shared by the reconstruction, translation and cycle
    paths.  ``terms`` reports the six terms with GAN entries as min-max values.
    """
    dtype = next(model.parameters()).dtype
    x_l = _as_batch(x_l, model.arch, dtype)
    x_h = _as_batch(x_h, model.arch, dtype)
    c_l = encode(model, LESION, x_l, generator)
    c_h = encode(model, NON_LESION, x_h, generator)
    rec_l, rec_h = decode(model, LESION, c_l.z), decode(model, NON_LESION, c_h.z)
    h2l, l2h = decode(model, LESION, c_h.z), decode(model, NON_LESION, c_l.z)
    c_h2l = encode(model, LESION, h2l, generator)
    c_l2h = encode(model, NON_LESION, l2h, generator)
    cyc_h, cyc_l = decode(model, NON_LESION, c_h2l.z), decode(model, LESION, c_l2h.z)

    kl_l, kl_h = kl_diag_gaussian(c_l.mean), kl_diag_gaussian(c_h.mean)
    g_l = gan_loss(model, LESION, x_l, h2l, weights)
    g_h = gan_loss(model, NON_LESION, x_h, l2h, weights)
    terms = {
        "VAE_l": weights.kl * kl_l + weights.reconstruction * laplace_nll(x_l, rec_l),
        "GAN_l": g_l.value,
        "CC_l": weights.cycle_kl * (kl_l + kl_diag_gaussian(c_l2h.mean))
        + weights.cycle_reconstruction * laplace_nll(x_l, cyc_l),
        "VAE_h": weights.kl * kl_h + weights.reconstruction * laplace_nll(x_h, rec_h),
        "GAN_h": g_h.value,
        "CC_h": weights.cycle_kl * (kl_h + kl_diag_gaussian(c_h2l.mean))
        + weights.cycle_reconstruction * laplace_nll(x_h, cyc_h),
    }
    loss = terms["VAE_l"] + terms["CC_l"] + terms["VAE_h"] + terms["CC_h"] + g_l.g_loss + g_h.g_loss
    return ForwardPass(loss, terms, (h2l, l2h))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainHistory:
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "term", "value"])
            for epoch, term, value in self.rows:
                w.writerow([epoch, term, f"{value:.8g}"])


def make_optimizers(model: SharedLatentTranslator, cfg: TranslatorTrainConfig):
    opt_g = torch.optim.Adam(model.generator_parameters(), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    opt_d = torch.optim.Adam(model.discriminator_parameters(), lr=cfg.lr, betas=tuple(cfg.betas), weight_decay=cfg.weight_decay)
    return opt_g, opt_d


def train_step(model, x_l, x_h, weights: LossWeights, opt_g, opt_d, generator=None) -> dict[str, float]:
    """One encoder/generator descent step, then one discriminator ascent step on the same translations."""
    opt_g.zero_grad()
    fwd = generator_objective(model, x_l, x_h, weights, generator)
    if not torch.isfinite(fwd.loss):
        raise NumericalError(f"translator loss became non-finite: { {k: v.item() for k, v in fwd.terms.items()} }")
    fwd.loss.backward()
    opt_g.step()

    opt_d.zero_grad()
    d_value = discriminator_objective(model, x_l, x_h, weights, fakes=fwd.fakes)
    (-d_value).backward()
    opt_d.step()
    return {k: v.item() for k, v in fwd.terms.items()}


def train_translator(
    lesion_patches: np.ndarray,
    nonlesion_patches: np.ndarray,
    arch: TranslatorArch,
    weights: LossWeights,
    cfg: TranslatorTrainConfig,
    log=None,
) -> tuple[SharedLatentTranslator, TrainHistory]:
    """Alternating adversarial training on balanced lesion / non-lesion batches.

    Each epoch walks a seeded permutation of the larger domain; the smaller
    domain is resampled so every batch pairs equally many patches from both.
    """
    if len(lesion_patches) == 0 or len(nonlesion_patches) == 0:
        raise DataError("translator training needs patches from both domains")
    lesion = torch.as_tensor(np.asarray(lesion_patches), dtype=torch.float32)[:, None]
    normal = torch.as_tensor(np.asarray(nonlesion_patches), dtype=torch.float32)[:, None]
    model = SharedLatentTranslator(arch, seed=cfg.seed)
    history = TrainHistory()
    if cfg.epochs <= 0:
        return model, history

    opt_g, opt_d = make_optimizers(model, cfg)
    g = torch_generator(cfg.seed + 1)
    n = max(len(lesion), len(normal))
    bs = min(cfg.batch_size, len(lesion), len(normal))
    for epoch in range(1, cfg.epochs + 1):
        idx_l = _cycled_permutation(len(lesion), n, g)
        idx_h = _cycled_permutation(len(normal), n, g)
        sums = dict.fromkeys(TERMS, 0.0)
        steps = 0
        for start in range(0, n - bs + 1, bs):
            terms = train_step(model, lesion[idx_l[start : start + bs]], normal[idx_h[start : start + bs]], weights, opt_g, opt_d, g)
            for k in TERMS:
                sums[k] += terms[k]
            steps += 1
        model.epoch = epoch
        for k in TERMS:
            history.rows.append((epoch, k, sums[k] / max(steps, 1)))
        if log is not None:
            log(f"translator epoch {epoch}/{cfg.epochs}: " + " ".join(f"{k}={sums[k] / max(steps, 1):.3f}" for k in TERMS))
    return model, history


def _cycled_permutation(size: int, length: int, g: torch.Generator) -> torch.Tensor:
    reps = math.ceil(length / size)
    return torch.cat([torch.randperm(size, generator=g) for _ in range(reps)])[:length]


@torch.no_grad()
def reconstruction_error(model, domain: str, patches: np.ndarray) -> float:
    """Mean absolute error of ``decode(encode(x).mean)`` over ``patches``."""
    x = _as_batch(np.asarray(patches), model.arch, dtype=next(model.parameters()).dtype)
    recon = decode(model, domain, encode(model, domain, x).mean)
    return float((recon - x).abs().mean())


# ---------------------------------------------------------------------------
# checkpoints


def save_translator(path, model: SharedLatentTranslator, weights: LossWeights | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "translator",
            "arch": asdict(model.arch),
            "state": model.state_dict(),
            "seed": model.seed,
            "epoch": model.epoch,
            "loss_weights": asdict(weights) if weights else None,
            "extra": extra or {},
        },
        path,
    )


def load_translator(path) -> tuple[SharedLatentTranslator, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"translator checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "translator":
        raise DataError(f"{path} is not a translator checkpoint")
    model = SharedLatentTranslator(TranslatorArch(**blob["arch"]), seed=blob["seed"])
    model.load_state_dict(blob["state"])
    model.epoch = blob["epoch"]
    model.eval()
    return model, blob


def clone(model: SharedLatentTranslator) -> SharedLatentTranslator:
    return copy.deepcopy(model)
