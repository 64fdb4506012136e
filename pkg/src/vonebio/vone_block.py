"""Forward pass of the fixed V1 front-end."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .gfb import CellType, FilterBank

NORM_MEAN = 0.5
NORM_STD = 0.5


def normalize(images):
    """Map [0, 1] pixels to [-1, 1]."""
    return (images - NORM_MEAN) / NORM_STD


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype or torch.float32)


class VOneBlock(torch.nn.Module):
    """Frozen Gabor convolution followed by simple/complex nonlinearities.

    The bank weights live in a buffer, never in ``parameters()``, so an
    optimizer over the enclosing model cannot touch them.
    """

    def __init__(self, bank: FilterBank, chunk: int = 16):
        super().__init__()
        self.bank = bank
        self.chunk = chunk
        self.register_buffer("weight", torch.from_numpy(np.array(bank.kernels)))
        # every bank kernel is replicated across input channels, so the
        # convolution can run on the channel sum with a single-channel kernel
        self._lum = bool(np.all(bank.kernels == bank.kernels[:, :1]))
        self.register_buffer("lum_weight", self.weight[:, :1].contiguous())
        simple = [rows[0] for d, rows in zip(bank.descriptors, bank.kernel_map) if d.cell_type is CellType.SIMPLE]
        cplx = [rows for d, rows in zip(bank.descriptors, bank.kernel_map) if d.cell_type is CellType.COMPLEX]
        self.register_buffer("simple_rows", torch.tensor(simple, dtype=torch.long))
        self.register_buffer("q0_rows", torch.tensor([r[0] for r in cplx], dtype=torch.long))
        self.register_buffer("q90_rows", torch.tensor([r[1] for r in cplx], dtype=torch.long))

    @property
    def padding(self) -> int:
        return (self.bank.kernel_size - 1) // 2

    def conv(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.bank.input_channels:
            raise ValueError(
                f"expected [B, {self.bank.input_channels}, H, W] images, got {tuple(x.shape)}"
            )
        if self._lum:
            w = self.lum_weight.to(x.dtype)
            return F.conv2d(x.sum(1, keepdim=True), w, stride=self.bank.stride, padding=self.padding)
        return F.conv2d(x, self.weight.to(x.dtype), stride=self.bank.stride, padding=self.padding)

    def nonlinear(self, raw: torch.Tensor) -> torch.Tensor:
        if raw.shape[1] != self.weight.shape[0]:
            raise ValueError(f"raw response has {raw.shape[1]} kernels, bank has {self.weight.shape[0]}")
        s = torch.relu(raw.index_select(1, self.simple_rows))
        q0 = raw.index_select(1, self.q0_rows)
        q90 = raw.index_select(1, self.q90_rows)
        c = torch.sqrt((q0 * q0 + q90 * q90) / 2)
        return torch.cat([s, c], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if len(x) <= self.chunk:
            return self.nonlinear(self.conv(x))
        # the raw response holds num_kernels maps per image; chunking keeps
        # that buffer small, which matters more for speed than batch size
        first = self.nonlinear(self.conv(x[: self.chunk]))
        out = first.new_empty((len(x),) + first.shape[1:])
        out[: self.chunk] = first
        for i in range(self.chunk, len(x), self.chunk):
            out[i:i + self.chunk] = self.nonlinear(self.conv(x[i:i + self.chunk]))
        return out


def conv_forward(bank: FilterBank, images) -> torch.Tensor:
    """Raw strided cross-correlation responses, ``[B, num_kernels, H', W']``."""
    x = _as_tensor(images)
    with torch.no_grad():
        return VOneBlock(bank).to(x.dtype).conv(x)


def apply_nonlinearities(raw, bank_or_descriptors) -> torch.Tensor:
    """Rectify Simple kernels and take quadrature energy for Complex pairs.

    Accepts a :class:`FilterBank` or a descriptor list; for a bare list the
    kernel layout is assumed to be the one :func:`build_filter_bank` produces.
    """
    raw = _as_tensor(raw)
    descs = bank_or_descriptors.descriptors if isinstance(bank_or_descriptors, FilterBank) else bank_or_descriptors
    n_s = sum(d.cell_type is CellType.SIMPLE for d in descs)
    n_c = len(descs) - n_s
    if raw.shape[1] != n_s + 2 * n_c:
        raise ValueError(f"raw response has {raw.shape[1]} kernels, descriptors need {n_s + 2 * n_c}")
    s = torch.relu(raw[:, :n_s])
    q0 = raw[:, n_s::2]
    q90 = raw[:, n_s + 1::2]
    return torch.cat([s, torch.sqrt((q0 * q0 + q90 * q90) / 2)], dim=1)


def vone_forward(bank: FilterBank, images, batch_size: int = 64) -> torch.Tensor:
    """V1 activations for normalized images, computed in chunks of ``batch_size``."""
    x = _as_tensor(images)
    block = VOneBlock(bank).to(x.dtype)
    with torch.no_grad():
        return torch.cat([block(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
