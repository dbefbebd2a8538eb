"""Terms of the discriminative segment variational lower bound.

All functions return per-segment values (the objective is maximized; the
trainer minimizes its negated mean). Stage 1 is the plain FHVAE: z1 has a
zero-mean prior, there is no mu1 prior term and no z1 discriminative term.
Stage 2 centres the z1 prior on the content label's row of the mu1 table.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from .exceptions import ConfigurationError, DimensionError
from .model import GaussianParams, decode, encode_z1, encode_z2, reconstruction_log_likelihood, sample_latent

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class HyperConfig:
    sigma2_z1: float = 0.25
    sigma2_z2: float = 0.25
    sigma2_mu1: float = 1.0
    sigma2_mu2: float = 1.0
    alpha_z1: float = 10000.0
    alpha_z2: float = 100.0
    latent_dim: int = 32

    def __post_init__(self):
        for name in ("sigma2_z1", "sigma2_z2", "sigma2_mu1", "sigma2_mu2"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.alpha_z1 < 0 or self.alpha_z2 < 0:
            raise ConfigurationError("alpha weights must be non-negative")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self):
        return asdict(self)


LOSS_FIELDS = ("recon", "kl_z1", "kl_z2", "log_p_mu1", "log_p_mu2", "disc_z1", "disc_z2", "bound", "total")


@dataclass
class LossBreakdown:
    recon: float = 0.0
    kl_z1: float = 0.0
    kl_z2: float = 0.0
    log_p_mu1: float = 0.0
    log_p_mu2: float = 0.0
    disc_z1: float = 0.0
    disc_z2: float = 0.0
    bound: float = 0.0
    total: float = 0.0

    @classmethod
    def mean_of(cls, terms: dict) -> "LossBreakdown":
        return cls(**{k: float(terms[k].detach().double().mean()) for k in LOSS_FIELDS})

    def as_dict(self):
        return asdict(self)


def kl_diag_gaussian(q: GaussianParams, p_mean, p_var):
    """KL(q || N(p_mean, p_var I)) summed over the last axis."""
    if p_var <= 0:
        raise ValueError(f"prior variance must be positive, got {p_var}")
    p_mean = torch.as_tensor(p_mean, dtype=q.mean.dtype)
    if p_mean.shape[-1] != q.mean.shape[-1] or q.logvar.shape != q.mean.shape:
        raise DimensionError("posterior and prior dimensions differ")
    per_dim = (0.5 * math.log(p_var) - 0.5 * q.logvar
               + (torch.exp(q.logvar) + (q.mean - p_mean) ** 2) / (2.0 * p_var) - 0.5)
    return per_dim.sum(dim=-1)


def log_gaussian_prior(mu, sigma2: float):
    """log N(mu; 0, sigma2 I) over the last axis."""
    if sigma2 <= 0:
        raise ValueError(f"variance must be positive, got {sigma2}")
    D = mu.shape[-1]
    return -0.5 * D * math.log(2.0 * math.pi * sigma2) - (mu ** 2).sum(dim=-1) / (2.0 * sigma2)


def discriminative_log_prob(z, table, row, sigma2: float, candidates):
    """log p(row | z): softmax over ``candidates`` of -||z - table[j]||^2 / (2 sigma2).

    ``z`` may be one vector with an int ``row`` or a batch ``(B, D)`` with
    ``row`` of shape ``(B,)``.
    """
    single = z.dim() == 1
    zb = z.unsqueeze(0) if single else z
    rows = torch.as_tensor(row, dtype=torch.long).reshape(-1)
    cands = torch.as_tensor(candidates, dtype=torch.long).reshape(-1)
    if cands.numel() == 0:
        raise IndexError("empty candidate set")
    if rows.shape[0] != zb.shape[0]:
        raise DimensionError("one target row per latent required")
    match = rows[:, None] == cands[None, :]
    if not bool(match.any(dim=1).all()):
        missing = rows[~match.any(dim=1)].tolist()
        raise IndexError(f"rows {missing} are not among the candidates")
    centres = table[cands]
    d2 = ((zb[:, None, :] - centres[None, :, :]) ** 2).sum(dim=-1)
    logp = torch.log_softmax(-d2 / (2.0 * sigma2), dim=1)
    pos = match.to(torch.long).argmax(dim=1)
    out = logp.gather(1, pos[:, None])[:, 0]
    return out[0] if single else out


def segment_bound(recon, klz1, klz2, mu1_row, mu2_row, N_i, S_l, h: HyperConfig, stage: int = 2):
    """Segment lower bound. The mu-prior terms are spread over the segments that
    share a row (1/N_i per sequence, 1/S_l per content label). Stage 1 omits the
    mu1 term."""
    bound = recon - klz1 - klz2 + log_gaussian_prior(mu2_row, h.sigma2_mu2) / N_i
    if stage == 2:
        bound = bound + log_gaussian_prior(mu1_row, h.sigma2_mu1) / S_l
    return bound


def discriminative_bound(bound, disc_z1, disc_z2, h: HyperConfig):
    return bound + h.alpha_z1 * disc_z1 + h.alpha_z2 * disc_z2


def segment_terms(params, x, sequences, labels, N_i, S_l, h: HyperConfig, stage: int,
                  z2_candidates, z1_candidates, eps1, eps2, fused: bool = True) -> dict:
    """All objective terms for a batch of segments, one value per segment.

    ``N_i``/``S_l`` are per-segment counts of the segment's sequence and label;
    ``eps1``/``eps2`` are the standard-normal draws used for reparameterization.
    """
    q2 = encode_z2(params, x, fused=fused)
    z2 = sample_latent(q2, eps2)
    q1 = encode_z1(params, x, z2, fused=fused)
    z1 = sample_latent(q1, eps1)
    pred = decode(params, z1, z2, T=x.shape[1], fused=fused)
    recon = reconstruction_log_likelihood(x, pred)

    mu2_row = params["mu2"][sequences]
    mu1_row = params["mu1"][labels]
    kl_z2 = kl_diag_gaussian(q2, mu2_row, h.sigma2_z2)
    log_p_mu2 = log_gaussian_prior(mu2_row, h.sigma2_mu2) / N_i
    disc_z2 = discriminative_log_prob(z2, params["mu2"], sequences, h.sigma2_z2, z2_candidates)
    if stage == 1:
        kl_z1 = kl_diag_gaussian(q1, torch.zeros_like(q1.mean), h.sigma2_z1)
        log_p_mu1 = torch.zeros_like(recon)
        disc_z1 = torch.zeros_like(recon)
        alpha_z1 = 0.0
    else:
        kl_z1 = kl_diag_gaussian(q1, mu1_row, h.sigma2_z1)
        log_p_mu1 = log_gaussian_prior(mu1_row, h.sigma2_mu1) / S_l
        disc_z1 = discriminative_log_prob(z1, params["mu1"], labels, h.sigma2_z1, z1_candidates)
        alpha_z1 = h.alpha_z1
    bound = recon - kl_z1 - kl_z2 + log_p_mu2 + log_p_mu1
    total = bound + alpha_z1 * disc_z1 + h.alpha_z2 * disc_z2
    return {"recon": recon, "kl_z1": kl_z1, "kl_z2": kl_z2, "log_p_mu1": log_p_mu1,
            "log_p_mu2": log_p_mu2, "disc_z1": disc_z1, "disc_z2": disc_z2,
            "bound": bound, "total": total}
