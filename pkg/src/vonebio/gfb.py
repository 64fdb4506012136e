"""Fixed-weight Gabor filter bank with simple/complex channel pairing.

Kernels are classical oriented Gaussian-windowed cosines, each scaled to unit
L2 norm. The Gaussian widths are expressed as multiples of the carrier
wavelength (``sigma_x = nx / sf`` degrees), so ``nx`` and ``ny`` are
scale-free shape parameters.
"""

from __future__ import annotations

import enum
import hashlib
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

THETA_RANGE = (0.0, 180.0)
SF_RANGE = (0.5, 11.3)
N_RANGE = (0.1, 1.585)

DEFAULT_PPD = 32.0
DEFAULT_STRIDE = 2
DEFAULT_KERNEL_SIZE = 25

_MAGIC = b"VGFB"
_VERSION = 1
_HEADER = struct.Struct("<4sIdIIIII")
_RECORD = struct.Struct("<BIddddd")


class AliasingWarning(UserWarning):
    """Raised when a Gaussian envelope is narrower than one pixel."""


class CellType(enum.IntEnum):
    SIMPLE = 0
    COMPLEX = 1


@dataclass(frozen=True)
class GaborParams:
    """RF parameters of one channel.

    ``theta`` is reduced modulo 180 on construction, so orientations that
    differ by a half turn describe the same kernel.
    """

    theta: float
    sf: float
    phase: float
    nx: float
    ny: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % 180.0)
        object.__setattr__(self, "phase", float(self.phase) % (2 * math.pi))
        if not SF_RANGE[0] <= self.sf <= SF_RANGE[1]:
            raise ValueError(f"sf={self.sf} outside {SF_RANGE}")
        for name in ("nx", "ny"):
            v = getattr(self, name)
            if not N_RANGE[0] <= v <= N_RANGE[1]:
                raise ValueError(f"{name}={v} outside {N_RANGE}")

    @property
    def sigma_x(self) -> float:
        """Envelope std perpendicular to the stripes, in degrees."""
        return self.nx / self.sf

    @property
    def sigma_y(self) -> float:
        return self.ny / self.sf


@dataclass(frozen=True)
class ChannelDescriptor:
    cell_type: CellType
    params: GaborParams
    channel_index: int


def is_aliased(params: GaborParams, ppd: float) -> bool:
    return min(params.sigma_x, params.sigma_y) * ppd < 1.0


def make_gabor_kernel(params: GaborParams, ppd: float, k: int) -> np.ndarray:
    """Return a ``k x k`` float64 Gabor kernel with unit L2 norm.

    Pixel ``(i, j)`` sits at ``x = (j - c) / ppd``, ``y = (c - i) / ppd``
    degrees with ``c = (k - 1) / 2``; ``theta`` is the direction of the
    carrier modulation, counter-clockwise from the x axis.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if ppd <= 0:
        raise ValueError(f"ppd must be positive, got {ppd}")
    if is_aliased(params, ppd):
        warnings.warn(
            f"Gabor envelope narrower than one pixel for {params} at ppd={ppd}",
            AliasingWarning,
            stacklevel=2,
        )
    c = (k - 1) / 2
    idx = np.arange(k, dtype=np.float64)
    x = (idx[None, :] - c) / ppd
    y = (c - idx[:, None]) / ppd
    th = math.radians(params.theta)
    xr = x * math.cos(th) + y * math.sin(th)
    yr = -x * math.sin(th) + y * math.cos(th)
    env = np.exp(-(xr**2 / (2 * params.sigma_x**2) + yr**2 / (2 * params.sigma_y**2)))
    g = env * np.cos(2 * math.pi * params.sf * xr + params.phase)
    return g / np.linalg.norm(g)


def kernel_params(desc: ChannelDescriptor, quadrature: int = 0) -> GaborParams:
    """Parameters of kernel ``quadrature`` (0 or 1) belonging to ``desc``."""
    p = desc.params
    if quadrature == 0:
        return p
    return GaborParams(p.theta, p.sf, p.phase + math.pi / 2, p.nx, p.ny)


@dataclass(frozen=True, eq=False)
class FilterBank:
    """Immutable bank of discretized Gabor kernels.

    ``kernels`` has shape ``[num_kernels, input_channels, k, k]`` and is
    laid out as all Simple kernels first, then the Complex quadrature pairs
    (``phase``, ``phase + pi/2``) interleaved. ``kernel_map[i]`` lists the
    kernel rows of output channel ``i``.
    """

    kernels: np.ndarray
    descriptors: tuple[ChannelDescriptor, ...]
    ppd: float
    stride: int
    kernel_size: int
    kernel_map: tuple[tuple[int, ...], ...] = field(default=())
    aliased_channels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.kernels.setflags(write=False)

    @property
    def num_simple(self) -> int:
        return sum(d.cell_type is CellType.SIMPLE for d in self.descriptors)

    @property
    def num_complex(self) -> int:
        return len(self.descriptors) - self.num_simple

    @property
    def num_channels(self) -> int:
        return len(self.descriptors)

    @property
    def input_channels(self) -> int:
        return self.kernels.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.kernels, dtype="<f4").tobytes())
        h.update(struct.pack("<dII", self.ppd, self.stride, self.kernel_size))
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        n_s, n_c = self.num_simple, self.num_complex
        parts = [
            _HEADER.pack(
                _MAGIC, _VERSION, self.ppd, self.stride, self.kernel_size,
                self.input_channels, n_s, n_c,
            )
        ]
        for d in self.descriptors:
            p = d.params
            parts.append(
                _RECORD.pack(int(d.cell_type), d.channel_index, p.theta, p.sf, p.phase, p.nx, p.ny)
            )
        parts.append(np.ascontiguousarray(self.kernels, dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FilterBank":
        if len(buf) < _HEADER.size:
            raise ValueError("truncated filter bank header")
        magic, version, ppd, stride, k, in_ch, n_s, n_c = _HEADER.unpack_from(buf, 0)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != _VERSION:
            raise ValueError(f"unsupported filter bank version {version}")
        off = _HEADER.size
        descs = []
        for _ in range(n_s + n_c):
            ct, idx, theta, sf, phase, nx, ny = _RECORD.unpack_from(buf, off)
            off += _RECORD.size
            descs.append(ChannelDescriptor(CellType(ct), GaborParams(theta, sf, phase, nx, ny), idx))
        n_k = n_s + 2 * n_c
        expected = n_k * in_ch * k * k * 4
        if len(buf) - off != expected:
            raise ValueError(f"kernel payload is {len(buf) - off} bytes, expected {expected}")
        kernels = np.frombuffer(buf, dtype="<f4", offset=off).reshape(n_k, in_ch, k, k).astype(np.float32)
        bank = build_filter_bank(descs, ppd=ppd, stride=stride, k=k, input_channels=in_ch)
        if not np.array_equal(bank.kernels, kernels):
            raise ValueError("stored kernels do not match their descriptors")
        return bank

    @classmethod
    def load(cls, path) -> "FilterBank":
        return cls.from_bytes(Path(path).read_bytes())


def _to_float32(a: np.ndarray) -> np.ndarray:
    """Cast to float32, flushing subnormals (far envelope tails) to zero.

    Subnormal weights make CPU convolution several times slower.
    """
    out = a.astype(np.float32)
    out[np.abs(out) < np.finfo(np.float32).tiny] = 0.0
    return out


def build_filter_bank(
    descriptors,
    ppd: float = DEFAULT_PPD,
    stride: int = DEFAULT_STRIDE,
    k: int = DEFAULT_KERNEL_SIZE,
    input_channels: int = 3,
) -> FilterBank:
    """Assemble a :class:`FilterBank`; Simple channels must precede Complex ones."""
    descriptors = tuple(descriptors)
    if not descriptors:
        raise ValueError("descriptor list is empty")
    seen_complex = False
    for d in descriptors:
        if d.cell_type is CellType.COMPLEX:
            seen_complex = True
        elif seen_complex:
            raise ValueError("Simple channels must precede Complex channels")

    rows: list[np.ndarray] = []
    kmap: list[tuple[int, ...]] = []
    aliased = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AliasingWarning)
        for i, d in enumerate(descriptors):
            if is_aliased(d.params, ppd):
                aliased.append(i)
            n_q = 1 if d.cell_type is CellType.SIMPLE else 2
            kmap.append(tuple(range(len(rows), len(rows) + n_q)))
            for q in range(n_q):
                rows.append(make_gabor_kernel(kernel_params(d, q), ppd, k))

    # luminance pooling: same kernel on every input channel, weight 1/C
    stack = np.stack(rows)[:, None, :, :] / input_channels
    kernels = _to_float32(np.repeat(stack, input_channels, axis=1))
    return FilterBank(
        kernels=kernels,
        descriptors=descriptors,
        ppd=float(ppd),
        stride=int(stride),
        kernel_size=int(k),
        kernel_map=tuple(kmap),
        aliased_channels=tuple(aliased),
    )


def regenerate_kernel(bank: FilterBank, row: int) -> np.ndarray:
    """Recompute kernel row ``row`` of ``bank`` from its descriptor alone."""
    for ch, rows in enumerate(bank.kernel_map):
        if row in rows:
            params = kernel_params(bank.descriptors[ch], rows.index(row))
            break
    else:
        raise IndexError(row)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AliasingWarning)
        g = make_gabor_kernel(params, bank.ppd, bank.kernel_size)
    c = bank.input_channels
    return _to_float32(np.repeat((g / c)[None], c, axis=0))


def dump_kernels_pgm(bank: FilterBank, out_dir, rows=None) -> list[Path]:
    """Write kernels as 8-bit binary PGM images, contrast-stretched per kernel."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = range(bank.kernels.shape[0]) if rows is None else rows
    written = []
    for r in rows:
        g = bank.kernels[r].sum(axis=0).astype(np.float64)
        lim = np.abs(g).max() or 1.0
        img = np.round((g / lim + 1.0) * 127.5).astype(np.uint8)
        k = bank.kernel_size
        path = out / f"kernel_{r:04d}.pgm"
        path.write_bytes(f"P5\n{k} {k}\n255\n".encode() + img.tobytes())
        written.append(path)
    return written
