"""Sequence-network numerics on plain tensors.

Parameters live in a flat ``ParamStore`` (``dict[str, torch.Tensor]``) so the
optimizer, the checkpoint format and gradient checks can treat every array
uniformly. LSTM weights are packed with gate blocks in the order
input, forget, candidate, output (each ``hidden_size`` rows).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .exceptions import DataError, DimensionError, NumericError

ParamStore = dict  # name -> torch.Tensor


@dataclass(frozen=True)
class LstmParams:
    w_ih: torch.Tensor  # (4H, D)
    w_hh: torch.Tensor  # (4H, H)
    b: torch.Tensor  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    def check(self):
        H = self.hidden_size
        if self.w_hh.shape != (4 * H, H) or self.w_ih.shape[0] != 4 * H or self.b.shape != (4 * H,):
            raise DimensionError(
                f"inconsistent LSTM shapes w_ih={tuple(self.w_ih.shape)} "
                f"w_hh={tuple(self.w_hh.shape)} b={tuple(self.b.shape)}"
            )


@dataclass(frozen=True)
class AffineParams:
    w: torch.Tensor  # (out, in)
    b: torch.Tensor  # (out,)


def lstm_layers(params: ParamStore, prefix: str) -> list[LstmParams]:
    layers = []
    while f"{prefix}.lstm{len(layers)}.w_ih" in params:
        k = f"{prefix}.lstm{len(layers)}"
        layers.append(LstmParams(params[f"{k}.w_ih"], params[f"{k}.w_hh"], params[f"{k}.b"]))
    if not layers:
        raise KeyError(f"no LSTM layers under {prefix!r}")
    return layers


def affine_params(params: ParamStore, prefix: str) -> AffineParams:
    return AffineParams(params[f"{prefix}.w"], params[f"{prefix}.b"])


# --------------------------------------------------------------------------
# forward numerics


def lstm_step(p: LstmParams, x_t, h_prev, c_prev):
    """One LSTM step. Accepts a single vector or a batch along dim 0."""
    p.check()
    H = p.hidden_size
    if x_t.shape[-1] != p.input_size:
        raise DimensionError(f"input has {x_t.shape[-1]} features, layer expects {p.input_size}")
    if h_prev.shape[-1] != H or c_prev.shape[-1] != H:
        raise DimensionError(f"state size must be {H}")
    gates = x_t @ p.w_ih.T + h_prev @ p.w_hh.T + p.b
    i, f, g, o = gates.split(H, dim=-1)
    i, f, o = torch.sigmoid(i), torch.sigmoid(f), torch.sigmoid(o)
    c = f * c_prev + i * torch.tanh(g)
    h = o * torch.tanh(c)
    return h, c


def _stacked_manual(layers, x):
    B, T, _ = x.shape
    inp, last = x, []
    for p in layers:
        h = x.new_zeros(B, p.hidden_size)
        c = x.new_zeros(B, p.hidden_size)
        outs = []
        for t in range(T):
            h, c = lstm_step(p, inp[:, t], h, c)
            outs.append(h)
        inp = torch.stack(outs, dim=1)
        last.append(h)
    return inp, torch.cat(last, dim=-1)


def _stacked_fused(layers, x):
    for p in layers:
        p.check()
    flat = []
    for p in layers:
        flat += [p.w_ih, p.w_hh, p.b, torch.zeros_like(p.b)]
    B = x.shape[0]
    H = layers[0].hidden_size
    h0 = x.new_zeros(len(layers), B, H)
    out, h_n, _ = torch.lstm(x, (h0, h0), flat, True, len(layers), 0.0, False, False, True)
    return out, h_n.permute(1, 0, 2).reshape(B, -1)


def stacked_forward(layers: list[LstmParams], x, fused: bool = True):
    """Run stacked LSTM layers over ``x`` of shape ``(T, D)`` or ``(B, T, D)``.

    Returns the top layer's per-step outputs and the concatenation of every
    layer's final hidden state. ``fused=True`` dispatches to torch's native
    LSTM kernel, which computes the same recurrence as :func:`lstm_step`.
    """
    if not layers:
        raise DimensionError("need at least one layer")
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 3 or x.shape[1] == 0:
        raise DimensionError(f"expected a non-empty (B, T, D) sequence, got {tuple(x.shape)}")
    if x.shape[-1] != layers[0].input_size:
        raise DimensionError(f"input has {x.shape[-1]} features, first layer expects {layers[0].input_size}")
    if any(p.hidden_size != layers[0].hidden_size for p in layers):
        fused = False
    out, last = (_stacked_fused if fused else _stacked_manual)(layers, x)
    if single:
        return out[0], last[0]
    return out, last


def affine(p: AffineParams, v):
    if p.w.dim() != 2 or p.b.shape != (p.w.shape[0],):
        raise DimensionError(f"inconsistent affine shapes w={tuple(p.w.shape)} b={tuple(p.b.shape)}")
    if v.shape[-1] != p.w.shape[1]:
        raise DimensionError(f"input has {v.shape[-1]} features, layer expects {p.w.shape[1]}")
    return v @ p.w.T + p.b


# --------------------------------------------------------------------------
# parameters


def init_params(spec: dict, seed: int, dtype=torch.float32) -> ParamStore:
    """Initialize a store from ``{name: (shape, kind)}``.

    ``kind`` is ``"weight"`` (Xavier-uniform with fan_in = shape[1],
    fan_out = shape[0]), ``"bias"`` or ``"table"`` (both zero).
    """
    rng = np.random.default_rng(seed)
    store = {}
    for name in spec:
        shape, kind = spec[name]
        if kind == "weight":
            fan_out, fan_in = shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-s, s, size=shape)
        elif kind in ("bias", "table"):
            arr = np.zeros(shape)
        else:
            raise ValueError(f"unknown parameter kind {kind!r} for {name}")
        store[name] = torch.as_tensor(arr, dtype=dtype)
    return store


def compute_gradients(loss_fn: Callable[[ParamStore], torch.Tensor], params: ParamStore):
    """Reverse-mode gradients of a scalar ``loss_fn(params)``.

    Returns ``(loss, grads)``; arrays the loss does not touch get exact zeros.
    """
    leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(leaves)
    if loss.dim() != 0:
        raise DimensionError("loss must be a scalar")
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {loss.item()}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    out = {k: torch.zeros_like(leaves[k]) if g is None else g.detach() for k, g in zip(names, grads)}
    return loss.detach(), out


# --------------------------------------------------------------------------
# checkpoints

_MAGIC = b"FHVZ"
_VERSION = 1
_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}
_TAGS = {torch.float32: 0, torch.float64: 1}


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    return Path(path).with_name("model.json")


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Write ``params`` in the FHVZ format and ``meta`` to a ``model.json`` sidecar."""
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<II", _VERSION, len(params))]
    for name, t in params.items():
        t = t.detach().cpu()
        if t.dtype not in _TAGS:
            raise DimensionError(f"{name}: unsupported dtype {t.dtype}")
        raw = name.encode("utf-8")
        tag = _TAGS[t.dtype]
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.numpy(), dtype=_DTYPES[tag][1]).tobytes())
    _atomic_write(path, b"".join(chunks))
    if meta is not None:
        _atomic_write(sidecar_path(path), json.dumps(meta, indent=1, sort_keys=True).encode())


def load_checkpoint(path) -> tuple[ParamStore, dict | None]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} not found") from exc
    if buf[:4] != _MAGIC:
        raise DataError(f"{path}: not an FHVZ checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos, store = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            tag, ndim = struct.unpack_from("<BB", buf, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            torch_dtype, np_dtype = _DTYPES[tag]
            size = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
            if pos + size > len(buf):
                raise DataError(f"{path}: truncated array {name}")
            arr = np.frombuffer(buf, dtype=np_dtype, count=int(np.prod(dims)), offset=pos).reshape(dims)
            pos += size
            store[name] = torch.from_numpy(arr.astype(np_dtype[1:], copy=True)).to(torch_dtype)
    except (struct.error, KeyError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc
    meta = None
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return store, meta
