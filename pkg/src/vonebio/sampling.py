"""Seeded RF-parameter samplers for the Uniform and Biological regimes."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .gfb import N_RANGE, SF_RANGE, THETA_RANGE, CellType, ChannelDescriptor, GaborParams

SCHEMA = "vonebio.distribution_table"
SCHEMA_VERSION = 1
_PROB_TOL = 1e-9
_EDGE_TOL = 1e-9


class TableError(ValueError):
    """A distribution table failed validation; the message names the field."""


class Regime(str, enum.Enum):
    BIOLOGICAL = "bio"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class DistributionTable:
    """Histogram description of the Biological regime.

    The nx bin is drawn from ``sf_size_coupling[sf_bin]``; the ny bin is then
    drawn from row ``nx_bin`` of ``size_probs`` (renormalized), which is how
    the joint size table enters. Values inside a bin are uniform (log-uniform
    for SF).
    """

    orientation_edges: np.ndarray
    orientation_probs: np.ndarray
    sf_edges: np.ndarray
    sf_probs: np.ndarray
    nx_edges: np.ndarray
    ny_edges: np.ndarray
    size_probs: np.ndarray
    sf_size_coupling: np.ndarray
    note: str = ""
    checksum: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        _check_edges("orientation_hist.edges", self.orientation_edges, THETA_RANGE)
        _check_edges("sf_hist.edges", self.sf_edges, SF_RANGE)
        _check_edges("size_joint.nx_edges", self.nx_edges, N_RANGE)
        _check_edges("size_joint.ny_edges", self.ny_edges, N_RANGE)
        _check_probs("orientation_hist.probs", self.orientation_probs, len(self.orientation_edges) - 1)
        _check_probs("sf_hist.probs", self.sf_probs, len(self.sf_edges) - 1)

        n_sf, n_nx, n_ny = len(self.sf_edges) - 1, len(self.nx_edges) - 1, len(self.ny_edges) - 1
        sp = self.size_probs
        if sp.shape != (n_nx, n_ny):
            raise TableError(f"size_joint.probs has shape {sp.shape}, expected {(n_nx, n_ny)}")
        if (sp < 0).any():
            raise TableError("size_joint.probs has negative entries")
        if abs(sp.sum() - 1.0) > _PROB_TOL:
            raise TableError(f"size_joint.probs sums to {sp.sum():.12g}, expected 1")
        cp = self.sf_size_coupling
        if cp.shape != (n_sf, n_nx):
            raise TableError(f"sf_size_coupling has shape {cp.shape}, expected {(n_sf, n_nx)}")
        for i, row in enumerate(cp):
            _check_probs(f"sf_size_coupling row {i}", row, n_nx)
            for j in np.flatnonzero(row > 0):
                if sp[j].sum() <= 0:
                    raise TableError(
                        f"sf_size_coupling row {i} puts mass on nx bin {j}, "
                        "which has no mass in size_joint.probs"
                    )

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "version": SCHEMA_VERSION,
            "note": self.note,
            "orientation_hist": {"edges": self.orientation_edges.tolist(), "probs": self.orientation_probs.tolist()},
            "sf_hist": {"edges": self.sf_edges.tolist(), "probs": self.sf_probs.tolist()},
            "size_joint": {
                "nx_edges": self.nx_edges.tolist(),
                "ny_edges": self.ny_edges.tolist(),
                "probs": self.size_probs.tolist(),
            },
            "sf_size_coupling": self.sf_size_coupling.tolist(),
        }

    def cell_probs(self) -> np.ndarray:
        """Joint probability over (sf bin, nx bin, ny bin)."""
        rows = self.size_probs.sum(1, keepdims=True)
        ny_given_nx = self.size_probs / np.where(rows > 0, rows, 1.0)
        return self.sf_probs[:, None, None] * self.sf_size_coupling[:, :, None] * ny_given_nx[None]


def _check_edges(name, edges, rng):
    if edges.ndim != 1 or len(edges) < 2:
        raise TableError(f"{name} needs at least two edges")
    if not np.all(np.diff(edges) > 0):
        raise TableError(f"{name} is not strictly increasing")
    lo, hi = rng
    if edges[0] < lo - _EDGE_TOL or edges[-1] > hi + _EDGE_TOL:
        raise TableError(f"{name} spans [{edges[0]}, {edges[-1]}], outside [{lo}, {hi}]")


def _check_probs(name, probs, n):
    if probs.shape != (n,):
        raise TableError(f"{name} has {probs.size} entries, expected {n}")
    if (probs < 0).any():
        raise TableError(f"{name} has negative entries")
    if abs(probs.sum() - 1.0) > _PROB_TOL:
        raise TableError(f"{name} sums to {probs.sum():.12g}, expected 1")


def table_from_dict(d: dict, checksum: str = "") -> DistributionTable:
    if d.get("schema") != SCHEMA:
        raise TableError(f"schema is {d.get('schema')!r}, expected {SCHEMA!r}")
    if d.get("version") != SCHEMA_VERSION:
        raise TableError(f"version {d.get('version')!r} not recognized")
    try:
        def arr(v):
            return np.asarray(v, dtype=np.float64)

        return DistributionTable(
            orientation_edges=arr(d["orientation_hist"]["edges"]),
            orientation_probs=arr(d["orientation_hist"]["probs"]),
            sf_edges=arr(d["sf_hist"]["edges"]),
            sf_probs=arr(d["sf_hist"]["probs"]),
            nx_edges=arr(d["size_joint"]["nx_edges"]),
            ny_edges=arr(d["size_joint"]["ny_edges"]),
            size_probs=arr(d["size_joint"]["probs"]),
            sf_size_coupling=arr(d["sf_size_coupling"]),
            note=d.get("note", ""),
            checksum=checksum,
        )
    except KeyError as e:
        raise TableError(f"missing field {e.args[0]!r}") from None


def load_distribution_table(path=None) -> DistributionTable:
    """Load and validate a table; ``None`` loads the shipped default."""
    if path is None:
        raw = resources.files("vonebio").joinpath("data/default_table.json").read_bytes()
    else:
        raw = Path(path).read_bytes()
    return table_from_dict(json.loads(raw), checksum=hashlib.sha256(raw).hexdigest())


def save_distribution_table(table: DistributionTable, path) -> None:
    Path(path).write_text(json.dumps(table.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class SamplerConfig:
    regime: Regime = Regime.BIOLOGICAL
    n_simple: int = 256
    n_complex: int = 256
    seed: int = 0
    table: DistributionTable | None = None
    sf_scale: str = "log"

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.n_simple < 0 or self.n_complex < 0 or self.n_simple + self.n_complex == 0:
            raise ValueError("need at least one channel")
        if self.sf_scale not in ("log", "linear"):
            raise ValueError(f"sf_scale must be 'log' or 'linear', not {self.sf_scale!r}")


def _descriptors(cfg: SamplerConfig, theta, sf, phase, nx, ny) -> list[ChannelDescriptor]:
    out = []
    for i in range(cfg.n_simple + cfg.n_complex):
        ct = CellType.SIMPLE if i < cfg.n_simple else CellType.COMPLEX
        out.append(ChannelDescriptor(ct, GaborParams(theta[i], sf[i], phase[i], nx[i], ny[i]), i))
    return out


def _draw_bins(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF bin index per row of ``probs``."""
    cum = np.cumsum(probs, axis=1)
    cum /= cum[:, -1:]
    # trailing zero-mass bins share cum == 1.0 exactly and u < 1, so they are never hit
    return (u[:, None] >= cum).sum(1)


def sample_uniform(cfg: SamplerConfig) -> list[ChannelDescriptor]:
    """Independent uniform draws over the full parameter ranges."""
    if cfg.regime is not Regime.UNIFORM:
        raise ValueError("sample_uniform needs regime=uniform")
    n = cfg.n_simple + cfg.n_complex
    rng = np.random.default_rng(cfg.seed)
    theta = rng.uniform(*THETA_RANGE, n)
    if cfg.sf_scale == "log":
        sf = np.exp(rng.uniform(math.log(SF_RANGE[0]), math.log(SF_RANGE[1]), n))
    else:
        sf = rng.uniform(*SF_RANGE, n)
    sf = np.clip(sf, *SF_RANGE)
    phase = rng.uniform(0.0, 2 * math.pi, n)
    nx = rng.uniform(*N_RANGE, n)
    ny = rng.uniform(*N_RANGE, n)
    return _descriptors(cfg, theta, sf, phase, nx, ny)


def sample_biological(cfg: SamplerConfig) -> list[ChannelDescriptor]:
    """Histogram draws with orientation independent and nx coupled to SF."""
    if cfg.regime is not Regime.BIOLOGICAL:
        raise ValueError("sample_biological needs regime=bio")
    t = cfg.table if cfg.table is not None else load_distribution_table()
    n = cfg.n_simple + cfg.n_complex
    rng = np.random.default_rng(cfg.seed)

    o_bin = _draw_bins(np.broadcast_to(t.orientation_probs, (n, len(t.orientation_probs))), rng.random(n))
    theta = rng.uniform(t.orientation_edges[o_bin], t.orientation_edges[o_bin + 1])

    s_bin = _draw_bins(np.broadcast_to(t.sf_probs, (n, len(t.sf_probs))), rng.random(n))
    log_e = np.log(t.sf_edges)
    sf = np.clip(np.exp(rng.uniform(log_e[s_bin], log_e[s_bin + 1])), *SF_RANGE)

    nx_bin = _draw_bins(t.sf_size_coupling[s_bin], rng.random(n))
    ny_bin = _draw_bins(t.size_probs[nx_bin], rng.random(n))
    nx = rng.uniform(t.nx_edges[nx_bin], t.nx_edges[nx_bin + 1])
    ny = rng.uniform(t.ny_edges[ny_bin], t.ny_edges[ny_bin + 1])

    phase = rng.uniform(0.0, 2 * math.pi, n)
    return _descriptors(cfg, theta, sf, phase, nx, ny)


def sample(cfg: SamplerConfig) -> list[ChannelDescriptor]:
    if cfg.regime is Regime.UNIFORM:
        return sample_uniform(cfg)
    return sample_biological(cfg)


def descriptor_arrays(descs) -> dict[str, np.ndarray]:
    """Column view of a descriptor list, handy for statistics."""
    return {
        "cell_type": np.array([int(d.cell_type) for d in descs]),
        "theta": np.array([d.params.theta for d in descs]),
        "sf": np.array([d.params.sf for d in descs]),
        "phase": np.array([d.params.phase for d in descs]),
        "nx": np.array([d.params.nx for d in descs]),
        "ny": np.array([d.params.ny for d in descs]),
    }
