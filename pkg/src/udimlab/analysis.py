"""Inconsistency-score estimation, flat-region probing and loss-landscape grids.

All functions perturb the model in place and restore its parameters bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .nn_core import GRAD_TOL, grad_params, loss, shifted


@dataclass
class InconsistencyEstimate:
    value: float
    gamma: float
    rho: float
    num_samples: int
    num_accepted: int
    seed: int
    center_gap: float = 0.0
    low_coverage: bool = False

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "InconsistencyEstimate":
        return cls(**json.loads(text))


def _ball_samples(rng: np.random.Generator, dim: int, rho: float):
    # one direction then one radius per sample, so prefixes are stable in M
    while True:
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        yield rho * rng.uniform() ** (1.0 / dim) * u


def estimate_inconsistency(m, source, target, gamma: float, rho: float, M: int = 64,
                           seed: int = 0) -> InconsistencyEstimate:
    """Monte-Carlo estimate of max |L_target(t') - L_source(t')| over the flat region.

    Candidates: the centre, the SAM ascent point and ``M`` uniform draws from
    the rho-ball. A candidate is kept when the source loss moves by at most
    ``gamma``. ``num_accepted`` counts kept non-centre candidates.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if gamma < 0 or rho < 0:
        raise ValueError("gamma and rho must be >= 0")
    ls0 = loss(m, source)
    center_gap = abs(loss(m, target) - ls0)
    best = center_gap
    accepted = 0

    def consider(eps):
        nonlocal best, accepted
        with shifted(m, eps):
            ls = loss(m, source)
            if abs(ls - ls0) <= gamma:
                accepted += 1
                best = max(best, abs(loss(m, target) - ls))

    g = grad_params(m, source)
    gnorm = np.linalg.norm(g)
    if gnorm > GRAD_TOL:
        consider(rho * g / gnorm)
    samples = _ball_samples(np.random.default_rng(seed), m.theta.size, rho)
    for _ in range(M):
        consider(next(samples))
    return InconsistencyEstimate(value=float(best), gamma=gamma, rho=rho, num_samples=M,
                                 num_accepted=accepted, seed=seed, center_gap=float(center_gap),
                                 low_coverage=accepted == 0)


def _unit_rows(rng: np.random.Generator, k: int, dim: int) -> np.ndarray:
    U = rng.standard_normal((k, dim))
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def flat_region_radius(m, source, gamma: float, rho_max: float, K: int = 16, seed: int = 0) -> float:
    """Largest r <= rho_max where all K probe directions keep the source loss within gamma.

    Bisection to 1e-3 * rho_max. Probing can only miss violations, so this is
    an upper estimate of the true radius.
    """
    if K < 8:
        raise ValueError("need at least 8 probe directions")
    dirs = _unit_rows(np.random.default_rng(seed), K, m.theta.size)
    l0 = loss(m, source)

    def ok(r):
        for u in dirs:
            with shifted(m, r * u):
                if abs(loss(m, source) - l0) > gamma:
                    return False
        return True

    if ok(rho_max):
        return float(rho_max)
    lo, hi = 0.0, float(rho_max)
    tol = 1e-3 * rho_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class LandscapeGrid:
    kind: str
    radius: float
    resolution: int
    seed: int
    values: np.ndarray
    center_loss: float
    directions: tuple = field(default=(), repr=False)

    @property
    def coords(self) -> np.ndarray:
        return grid_coords(self.radius, self.resolution)

    def sharpness(self) -> float:
        """Max cell value minus the centre loss."""
        return float(np.max(self.values) - self.center_loss)

    def to_csv(self) -> str:
        head = (f"# kind={self.kind} radius={self.radius!r} resolution={self.resolution} "
                f"seed={self.seed} center_loss={self.center_loss!r}")
        rows = [",".join(repr(float(v)) for v in row) for row in self.values]
        return "\n".join([head] + rows) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "LandscapeGrid":
        lines = text.rstrip("\n").split("\n")
        if not lines[0].startswith("# "):
            raise ValueError("grid CSV must start with a '# ' header line")
        meta = dict(item.split("=", 1) for item in lines[0][2:].split())
        r = int(meta["resolution"])
        values = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
        if values.shape != (r, r):
            raise ValueError(f"expected a {r}x{r} grid, got {values.shape}")
        return cls(kind=meta["kind"], radius=float(meta["radius"]), resolution=r,
                   seed=int(meta["seed"]), values=values, center_loss=float(meta["center_loss"]))


def save_grid(grid: LandscapeGrid, path) -> None:
    Path(path).write_text(grid.to_csv())


def load_grid(path) -> LandscapeGrid:
    return LandscapeGrid.from_csv(Path(path).read_text())


def grid_coords(radius: float, resolution: int) -> np.ndarray:
    c = (resolution - 1) // 2
    return radius * (np.arange(resolution) - c) / c


def _check_resolution(resolution: int):
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be odd and >= 3")


def _orthonormal_pair(rng: np.random.Generator, dim: int):
    if dim < 2:
        raise ValueError("need at least 2 dimensions for a perturbation plane")
    u = rng.standard_normal(dim)
    v = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    v -= (v @ u) * u
    v /= np.linalg.norm(v)
    return u, v


def param_directions(m, seed: int):
    """Two orthonormal random directions, each layer block rescaled to that layer's norm."""
    u, v = _orthonormal_pair(np.random.default_rng(seed), m.theta.size)
    for sl in m.layer_slices():
        scale = np.linalg.norm(m.theta[sl])
        for w in (u, v):
            n = np.linalg.norm(w[sl])
            w[sl] *= scale / n if n > 0 else 0.0
    return u, v


def param_sharpness_grid(m, d, radius: float, resolution: int = 11, seed: int = 0,
                         directions=None) -> LandscapeGrid:
    _check_resolution(resolution)
    u, v = directions if directions is not None else param_directions(m, seed)
    coords = grid_coords(radius, resolution)
    values = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            with shifted(m, a * u + b * v):
                values[i, j] = loss(m, d)
    return LandscapeGrid("parameter", float(radius), resolution, seed, values, loss(m, d), (u, v))


def data_sharpness_grid(m, d, radius: float, resolution: int = 11, seed: int = 0,
                        directions=None) -> LandscapeGrid:
    """Mean loss with every input shifted by ``a*u + b*v`` (shared input-space directions)."""
    _check_resolution(resolution)
    if directions is None:
        directions = _orthonormal_pair(np.random.default_rng(seed), d.inputs.shape[1])
    u, v = directions
    coords = grid_coords(radius, resolution)
    values = np.empty((resolution, resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            values[i, j] = m.loss(d.inputs + (a * u + b * v), d.labels)
    return LandscapeGrid("data", float(radius), resolution, seed, values, loss(m, d), (u, v))
