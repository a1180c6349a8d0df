"""Differentiable building blocks on top of torch, in double precision.

Reverse-mode differentiation, Adam/SGD and the recurrent kernels come from
torch; this module fixes dtype, shape checking, the conv/pool frame-index
bookkeeping, the checkpoint format and an independent finite-difference
checker used to validate every op.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

DTYPE = torch.float64
CHECKPOINT_FORMAT = "fssearch-checkpoint/1"

Tensor = torch.Tensor


def tensor(x, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not isinstance(x, Tensor) else x, dtype=DTYPE)
    return t.requires_grad_(requires_grad) if requires_grad else t


def check_finite(t: Tensor, op: str) -> Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"{op}: non-finite value in output of shape {tuple(t.shape)}")
    return t


def check_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    return torch.softmax(x, dim=dim)


def l2_normalize(x: Tensor, dim: int = -1) -> Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if (norm == 0).any():
        raise ValueError("l2_normalize: zero vector has no direction")
    return x / norm


def cosine_distance(a: Tensor, b: Tensor) -> Tensor:
    """``1 - cos(a, b)`` along the last axis; rejects zero vectors."""
    a, b = tensor(a), tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"cosine_distance: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine_distance: zero vector")
    return 1.0 - (a * b).sum(-1) / (na * nb)


def cosine_distance_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise distances between rows of ``a`` (n, E) and ``b`` (m, E)."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"cosine_distance_matrix: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return 1.0 - l2_normalize(a) @ l2_normalize(b).T


@dataclass(frozen=True)
class ConvSpec:
    """One stage of a temporal conv/pool chain.

    ``kind`` is ``"conv"`` (same-padded, stride 1, ReLU) or ``"pool"``
    (max-pool, no padding).
    """

    kind: str
    kernel: int
    stride: int = 1
    channels: int | None = None


def default_chain(channels: Sequence[int] = (64, 64, 64)) -> tuple[ConvSpec, ...]:
    """Conv k8, max-pool k8/s4, conv k3, conv k3."""
    c1, c2, c3 = channels
    return (
        ConvSpec("conv", 8, channels=c1),
        ConvSpec("pool", 8, 4),
        ConvSpec("conv", 3, channels=c2),
        ConvSpec("conv", 3, channels=c3),
    )


class ConvPoolStack(nn.Module):
    """1-D conv / max-pool stack over ``(B, T, D)`` features."""

    def __init__(self, in_dim: int, chain: Sequence[ConvSpec] | None = None):
        super().__init__()
        self.chain = tuple(chain if chain is not None else default_chain())
        layers = []
        dim = in_dim
        for spec in self.chain:
            if spec.kind == "conv":
                layers.append(nn.Conv1d(dim, spec.channels, spec.kernel, dtype=DTYPE))
                dim = spec.channels
            elif spec.kind == "pool":
                layers.append(None)
            else:
                raise ValueError(f"unknown layer kind {spec.kind!r}")
        self.convs = nn.ModuleList([l for l in layers if l is not None])
        self.out_dim = dim
        self.in_dim = in_dim

    def min_length(self) -> int:
        n = 1
        for spec in reversed(self.chain):
            if spec.kind == "pool":
                n = (n - 1) * spec.stride + spec.kernel
        return n

    def output_length(self, T: int) -> int:
        for spec in self.chain:
            if spec.kind == "pool":
                if T < spec.kernel:
                    raise ValueError(f"sequence of length {T} shorter than pooling kernel {spec.kernel}")
                T = (T - spec.kernel) // spec.stride + 1
        return T

    def receptive_window(self, j: int) -> tuple[int, int]:
        """Input frame range ``[lo, hi)`` pooled into output position ``j``.

        Same-padded convs do not move positions, so only pools matter.
        """
        lo, hi = j, j + 1
        for spec in reversed(self.chain):
            if spec.kind == "pool":
                lo, hi = lo * spec.stride, (hi - 1) * spec.stride + spec.kernel
        return lo, hi

    def frame_centers(self, T: int) -> np.ndarray:
        """Original-frame center of every output position."""
        n = self.output_length(T)
        stride = math.prod(s.stride for s in self.chain if s.kind == "pool")
        lo0, hi0 = self.receptive_window(0)
        return (lo0 + hi0) / 2.0 + stride * np.arange(n)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.in_dim:
            raise ValueError(f"ConvPoolStack: expected (B, T, {self.in_dim}), got {tuple(x.shape)}")
        if x.shape[1] < self.min_length():
            raise ValueError(f"ConvPoolStack: sequence length {x.shape[1]} < minimum {self.min_length()}")
        h = x.transpose(1, 2)
        convs = iter(self.convs)
        for spec in self.chain:
            if spec.kind == "conv":
                left = (spec.kernel - 1) // 2
                h = F.pad(h, (left, spec.kernel - 1 - left))
                h = torch.relu(next(convs)(h))
            else:
                h = F.max_pool1d(h, spec.kernel, spec.stride)
        return h.transpose(1, 2)


class BiRecurrentEncoder(nn.Module):
    """Bidirectional GRU; output width ``2 * hidden_dim`` at every step."""

    def __init__(self, input_dim: int, hidden_dim: int = 32, n_layers: int = 1):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.rnn = nn.GRU(input_dim, hidden_dim, num_layers=n_layers, bidirectional=True,
                          batch_first=True, dtype=DTYPE)

    @property
    def out_dim(self) -> int:
        return 2 * self.hidden_dim

    def _check(self, x):
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise ValueError(f"BiRecurrentEncoder: expected (B, T, {self.input_dim}), got {tuple(x.shape)}")

    def sequence(self, x: Tensor) -> Tensor:
        """Per-step outputs for equal-length sequences ``(B, T, D)``."""
        self._check(x)
        out, _ = self.rnn(x)
        return out

    def final(self, x: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
        """Last forward state concatenated with first backward state, ``(B, 2H)``."""
        self._check(x)
        if lengths is None:
            _, h = self.rnn(x)
        else:
            lengths = torch.as_tensor(list(lengths), dtype=torch.int64)
            if (lengths < 1).any() or (lengths > x.shape[1]).any():
                raise ValueError("BiRecurrentEncoder: lengths must lie in [1, T]")
            packed = nn.utils.rnn.pack_padded_sequence(x, lengths, batch_first=True, enforce_sorted=False)
            _, h = self.rnn(packed)
        # h: (layers * 2, B, H); take the top layer's two directions
        return torch.cat([h[-2], h[-1]], dim=-1)


def make_optimizer(params, kind: str = "adam", lr: float = 1e-3) -> torch.optim.Optimizer:
    kind = kind.lower()
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def plateau_halver(optimizer, patience: int = 3):
    """Halve the learning rate when a maximised metric stalls for ``patience`` epochs."""
    return torch.optim.lr_scheduler.ReduceLROnPlateau(optimizer, mode="max", factor=0.5, patience=patience)


def save_checkpoint(path, tensors: dict[str, Tensor], meta: dict | None = None) -> None:
    """Flat ``name -> tensor`` record plus JSON metadata, as a numpy ``.npz``."""
    arrays = {f"t/{k}": v.detach().cpu().numpy() for k, v in tensors.items()}
    header = {"format": CHECKPOINT_FORMAT, "meta": meta or {},
              "shapes": {k: list(v.shape) for k, v in tensors.items()}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: not a checkpoint (missing header)")
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        tensors = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("t/")}
    for k, shape in header["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise ValueError(f"{path}: tensor {k} has shape {list(tensors[k].shape)}, header says {shape}")
    return tensors, header["meta"]


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-4) -> Tensor:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param`` (mutated in place, restored)."""
    grad = torch.zeros_like(param)
    flat, gflat = param.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: Tensor, b: Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4) -> list[float]:
    """Relative error between autograd and finite differences, one value per parameter."""
    for p in params:
        p.grad = None
    out = fn()
    if out.ndim != 0:
        raise ValueError(f"gradcheck: function must return a scalar, got shape {tuple(out.shape)}")
    analytic = torch.autograd.grad(out, list(params), allow_unused=True)
    errs = []
    for p, g in zip(params, analytic):
        g = torch.zeros_like(p) if g is None else g
        errs.append(relative_error(g, numeric_grad(fn, p, step)))
    return errs
