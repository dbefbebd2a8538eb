"""FHVAE encoders, reparameterized sampling, decoder and Gaussian likelihood.

Two separate encoder stacks: one for the sequence-level latent z2, and one for
the segment-level latent z1 that sees every frame concatenated with z2.
The decoder receives ``[z1, z2]`` at every time step and emits a diagonal
Gaussian per frame.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch

from .exceptions import DimensionError
from .seqnet import affine, affine_params, lstm_layers, stacked_forward

LOG_2PI = math.log(2.0 * math.pi)


class GaussianParams(NamedTuple):
    mean: torch.Tensor
    logvar: torch.Tensor


@dataclass(frozen=True)
class Architecture:
    n_channels: int
    n_sequences: int
    n_labels: int
    hidden_size: int = 128
    n_layers: int = 2
    latent_dim: int = 32
    seg_len: int = 32

    def param_spec(self) -> dict:
        C, H, L, D = self.n_channels, self.hidden_size, self.n_layers, self.latent_dim
        spec = {}

        def lstm(prefix, input_size):
            for k in range(L):
                spec[f"{prefix}.lstm{k}.w_ih"] = ((4 * H, input_size if k == 0 else H), "weight")
                spec[f"{prefix}.lstm{k}.w_hh"] = ((4 * H, H), "weight")
                spec[f"{prefix}.lstm{k}.b"] = ((4 * H,), "bias")

        def head(name, n_out, n_in):
            spec[f"{name}.w"] = ((n_out, n_in), "weight")
            spec[f"{name}.b"] = ((n_out,), "bias")

        lstm("enc_z2", C)
        head("enc_z2.mean", D, L * H)
        head("enc_z2.logvar", D, L * H)
        lstm("enc_z1", C + D)
        head("enc_z1.mean", D, L * H)
        head("enc_z1.logvar", D, L * H)
        lstm("dec", 2 * D)
        head("dec.mean", C, H)
        head("dec.logvar", C, H)
        spec["mu2"] = ((self.n_sequences, D), "table")
        spec["mu1"] = ((self.n_labels, D), "table")
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


def _as_batch(x, n_channels=None):
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise DimensionError(f"expected segments of shape (T, C) or (B, T, C), got {tuple(x.shape)}")
    if n_channels is not None and x.shape[-1] != n_channels:
        raise DimensionError(f"segments have {x.shape[-1]} channels, model expects {n_channels}")
    return x


def _heads(params, prefix, summary):
    return GaussianParams(
        affine(affine_params(params, f"{prefix}.mean"), summary),
        affine(affine_params(params, f"{prefix}.logvar"), summary),
    )


def _squeeze(g, single):
    return GaussianParams(g.mean[0], g.logvar[0]) if single else g


def encode_z2(params, x, fused: bool = True) -> GaussianParams:
    single = x.dim() == 2
    layers = lstm_layers(params, "enc_z2")
    xb = _as_batch(x, layers[0].input_size)
    _, summary = stacked_forward(layers, xb, fused=fused)
    return _squeeze(_heads(params, "enc_z2", summary), single)


def encode_z1(params, x, z2, fused: bool = True) -> GaussianParams:
    """Posterior of z1 given the segment and a z2 value appended to every frame."""
    single = x.dim() == 2
    xb = _as_batch(x)
    z2b = z2.unsqueeze(0) if z2.dim() == 1 else z2
    if z2b.shape[0] != xb.shape[0]:
        raise DimensionError("one z2 per segment required")
    layers = lstm_layers(params, "enc_z1")
    if xb.shape[-1] + z2b.shape[-1] != layers[0].input_size:
        raise DimensionError(
            f"frame ({xb.shape[-1]}) + z2 ({z2b.shape[-1]}) != encoder input {layers[0].input_size}"
        )
    inp = torch.cat([xb, z2b.unsqueeze(1).expand(-1, xb.shape[1], -1)], dim=-1)
    _, summary = stacked_forward(layers, inp, fused=fused)
    return _squeeze(_heads(params, "enc_z1", summary), single)


def sample_latent(g: GaussianParams, eps):
    if eps.shape != g.mean.shape:
        raise DimensionError(f"eps shape {tuple(eps.shape)} != mean shape {tuple(g.mean.shape)}")
    return g.mean + torch.exp(0.5 * g.logvar) * eps


def decode(params, z1, z2, T: int = 32, fused: bool = True) -> GaussianParams:
    """Per-frame Gaussian over ``T`` frames; mean/logvar shaped ``(B, T, C)``
    (or ``(T, C)`` for unbatched latents)."""
    single = z1.dim() == 1
    z1b = z1.unsqueeze(0) if single else z1
    z2b = z2.unsqueeze(0) if z2.dim() == 1 else z2
    if z1b.shape[0] != z2b.shape[0]:
        raise DimensionError("z1 and z2 batch sizes differ")
    layers = lstm_layers(params, "dec")
    z = torch.cat([z1b, z2b], dim=-1)
    if z.shape[-1] != layers[0].input_size:
        raise DimensionError(f"decoder expects {layers[0].input_size}-dim input, got {z.shape[-1]}")
    out, _ = stacked_forward(layers, z.unsqueeze(1).expand(-1, T, -1), fused=fused)
    return _squeeze(_heads(params, "dec", out), single)


def reconstruction_log_likelihood(x, pred: GaussianParams):
    """log N(x; mean, exp(logvar)) summed over the last two axes (frames, channels)."""
    if x.shape != pred.mean.shape:
        raise DimensionError(f"x {tuple(x.shape)} vs prediction {tuple(pred.mean.shape)}")
    ll = -0.5 * LOG_2PI - 0.5 * pred.logvar - (x - pred.mean) ** 2 / (2.0 * torch.exp(pred.logvar))
    return ll.sum(dim=(-2, -1))
