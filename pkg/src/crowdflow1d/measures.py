"""Domains, capped densities and quantile representations.

A measure lives on a radial segment ``[a, R]`` equipped with the weight
``w(r) = 2*half_angle*r`` (mass of a thin annular sector) or with the flat
weight ``w(r) = 1``.  Densities are taken with respect to ``w(r) dr`` and
are capped at one; on domains with an absorbing exit at ``r = a`` an extra
atom of mass may sit on the exit.  Quantile functions represent the same
measure by the positions of uniformly spaced mass samples, with the exit
atom appearing as a plateau at ``a`` (never as a density spike).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DomainMismatchError,
    FeasibilityError,
    MassMismatchError,
    MonotonicityError,
)

MASS_TOL = 1e-12
DENSITY_TOL = 1e-9


@dataclass(frozen=True)
class Domain1D:
    """Radial segment ``[a, R]`` with its integration weight.

    Parameters
    ----------
    a : float
        Inner radius (the exit door when ``has_exit``). Nonnegative.
    R : float
        Outer radius, ``R > a``.
    weight_kind : {"radial", "flat"}
        ``"radial"`` uses ``w(r) = 2*half_angle*r``; ``"flat"`` uses
        ``w(r) = 1``.
    half_angle : float, optional
        Sector opening parameter for the radial weight. Required iff
        ``weight_kind == "radial"``.
    has_exit : bool
        Whether ``r = a`` absorbs mass.
    """

    a: float
    R: float
    weight_kind: str = "flat"
    half_angle: float | None = None
    has_exit: bool = False

    def __post_init__(self):
        if not (self.a >= 0.0):
            raise FeasibilityError(f"inner radius must be >= 0, got {self.a}")
        if not (self.R > self.a):
            raise FeasibilityError(f"need R > a, got a={self.a}, R={self.R}")
        if self.weight_kind == "radial":
            if self.half_angle is None or not (self.half_angle > 0.0):
                raise FeasibilityError("radial weight needs half_angle > 0")
        elif self.weight_kind == "flat":
            if self.half_angle is not None:
                raise FeasibilityError("flat weight takes no half_angle")
        else:
            raise FeasibilityError(f"unknown weight_kind {self.weight_kind!r}")

    @property
    def diameter(self):
        return self.R - self.a

    def weight(self, r):
        """Weight ``w(r)``, vectorized."""
        r = np.asarray(r, dtype=float)
        if self.weight_kind == "radial":
            return 2.0 * self.half_angle * r
        return np.ones_like(r)

    def cumweight(self, r):
        """Exact ``W(r) = integral of w from a to r`` (capacity of [a, r])."""
        r = np.asarray(r, dtype=float)
        if self.weight_kind == "radial":
            return self.half_angle * (r * r - self.a * self.a)
        return r - self.a

    def inv_cumweight(self, z):
        """Inverse of :meth:`cumweight` on ``[0, W(R)]``."""
        z = np.asarray(z, dtype=float)
        if self.weight_kind == "radial":
            return np.sqrt(self.a * self.a + np.maximum(z, 0.0) / self.half_angle)
        return self.a + z

    @property
    def total_weight(self):
        """Capacity ``W(R)`` of the whole segment."""
        return float(self.cumweight(self.R))


@dataclass
class Measure1D:
    """Piecewise-constant capped density plus an optional exit atom.

    ``rho[i]`` is the density (w.r.t. ``w(r) dr``) on the cell
    ``[edges[i], edges[i+1])``.  Values are treated as immutable after
    construction.

    Parameters
    ----------
    domain : Domain1D
    edges : ndarray, shape (n+1,)
        Strictly increasing cell edges spanning ``[a, R]``.
    rho : ndarray, shape (n,)
        Cell densities in ``[0, 1]``.
    exit_mass : float
        Mass sitting on the exit. Must be 0 unless ``domain.has_exit``.
    """

    domain: Domain1D
    edges: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    exit_mass: float = 0.0

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        rho = np.asarray(self.rho, dtype=float)
        if edges.ndim != 1 or edges.size < 2 or rho.shape != (edges.size - 1,):
            raise FeasibilityError("edges must be (n+1,) and rho (n,)")
        if np.any(np.diff(edges) <= 0.0):
            raise MonotonicityError("cell edges must be strictly increasing")
        d = self.domain
        if not (abs(edges[0] - d.a) < 1e-9 and abs(edges[-1] - d.R) < 1e-9):
            raise DomainMismatchError(
                f"edges span [{edges[0]}, {edges[-1]}], domain is [{d.a}, {d.R}]"
            )
        if np.any(rho < -DENSITY_TOL) or np.any(rho > 1.0 + DENSITY_TOL):
            raise FeasibilityError(
                f"density outside [0, 1]: min={rho.min()}, max={rho.max()}"
            )
        if self.exit_mass < 0.0:
            raise FeasibilityError("exit_mass must be >= 0")
        if self.exit_mass > 0.0 and not d.has_exit:
            raise FeasibilityError("exit_mass > 0 on a domain without exit")
        edges.flags.writeable = False
        rho.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "rho", np.clip(rho, 0.0, 1.0))
        self.rho.flags.writeable = False

    # -- construction helpers ------------------------------------------

    @classmethod
    def uniform(cls, domain, value, n_cells, exit_mass=0.0):
        """Constant density ``value`` on the whole segment."""
        edges = np.linspace(domain.a, domain.R, n_cells + 1)
        return cls(domain, edges, np.full(n_cells, float(value)), exit_mass)

    @classmethod
    def from_density(cls, domain, fn, n_cells, exit_mass=0.0):
        """Cell-average a density function ``fn(r)`` (w.r.t. ``w dr``).

        Averages use a fixed 5-point Gauss rule per cell, weighted by
        ``w``; exact for polynomial profiles of low degree.
        """
        edges = np.linspace(domain.a, domain.R, n_cells + 1)
        nodes, wts = np.polynomial.legendre.leggauss(5)
        lo, hi = edges[:-1], edges[1:]
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        r = mid[:, None] + half[:, None] * nodes[None, :]
        vals = np.asarray(fn(r), dtype=float) * domain.weight(r)
        cell_mass = half * (vals * wts[None, :]).sum(axis=1)
        dW = domain.cumweight(hi) - domain.cumweight(lo)
        rho = np.where(dW > 0.0, cell_mass / np.where(dW > 0.0, dW, 1.0), 0.0)
        return cls(domain, edges, np.clip(rho, 0.0, 1.0), exit_mass)

    @classmethod
    def random_feasible(cls, domain, n_cells, rng, exit_mass=None):
        """Random probability measure with density in ``[0, 1]``.

        Draws rough cell values and rescales them monotonically (with the
        cap enforced by clipping) until the interior mass is exactly
        ``1 - exit_mass``.  Requires the domain capacity to exceed 1.
        """
        if exit_mass is None:
            exit_mass = float(rng.uniform(0.0, 0.3)) if domain.has_exit else 0.0
        target = 1.0 - exit_mass
        if domain.total_weight <= target:
            raise FeasibilityError("domain capacity too small for unit mass")
        edges = np.linspace(domain.a, domain.R, n_cells + 1)
        dW = domain.cumweight(edges[1:]) - domain.cumweight(edges[:-1])
        raw = rng.uniform(0.05, 1.0, size=n_cells)

        def mass(c):
            return float(np.clip(raw * c, 0.0, 1.0) @ dW)

        c_lo, c_hi = 0.0, 1.0
        while mass(c_hi) < target:
            c_hi *= 2.0
            if c_hi > 1e12:
                raise FeasibilityError("random measure normalization failed")
        for _ in range(200):
            c = 0.5 * (c_lo + c_hi)
            if mass(c) < target:
                c_lo = c
            else:
                c_hi = c
        rho = np.clip(raw * 0.5 * (c_lo + c_hi), 0.0, 1.0)
        # absorb the last bit of rounding into the fullest cell with room
        gap = target - float(rho @ dW)
        order = np.argsort(dW)[::-1]
        for i in order:
            room = (1.0 - rho[i]) * dW[i] if gap > 0 else rho[i] * dW[i]
            take = np.clip(gap, -room, room)
            rho[i] += take / dW[i]
            gap -= take
            if abs(gap) < 1e-15:
                break
        return cls(domain, edges, rho, exit_mass)

    # -- basic queries --------------------------------------------------

    def cell_weights(self):
        """Capacity ``W`` of each cell."""
        return self.domain.cumweight(self.edges[1:]) - self.domain.cumweight(
            self.edges[:-1]
        )

    def cell_masses(self):
        return self.rho * self.cell_weights()

    def total_mass(self):
        return float(self.exit_mass + self.cell_masses().sum())

    def cdf(self, r):
        """Cumulative mass on ``exit + [a, r]``, right-continuous at a."""
        r = np.asarray(r, dtype=float)
        cum = np.concatenate([[0.0], np.cumsum(self.cell_masses())])
        idx = np.clip(np.searchsorted(self.edges, r, side="right") - 1, 0, len(self.rho) - 1)
        frac = self.domain.cumweight(np.clip(r, self.edges[0], self.edges[-1]))
        frac = frac - self.domain.cumweight(self.edges[idx])
        out = self.exit_mass + cum[idx] + self.rho[idx] * np.clip(frac, 0.0, None)
        return np.where(r >= self.edges[-1], self.total_mass(), out)

    def interface_estimate(self, threshold=0.999):
        """Right edge of the outermost saturated cell.

        Returns ``a`` when no cell reaches ``threshold``.  A cell cut by
        the domain boundary can render slightly below the threshold even
        when the block is saturated, so the scan runs from the outside
        in rather than stopping at the first unsaturated cell.
        """
        sat = np.nonzero(self.rho >= threshold)[0]
        if sat.size == 0:
            return float(self.edges[0])
        return float(self.edges[sat[-1] + 1])

    # -- serialization ---------------------------------------------------

    def to_csv(self, path_or_buf):
        """Write rows ``r_left,r_right,rho`` and a trailing exit_mass row.

        Floats are written with ``repr`` so a round trip is bit-exact.
        """
        own = isinstance(path_or_buf, (str, bytes))
        f = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            wr = csv.writer(f)
            wr.writerow(["r_left", "r_right", "rho"])
            for lo, hi, rho in zip(self.edges[:-1], self.edges[1:], self.rho):
                wr.writerow([repr(float(lo)), repr(float(hi)), repr(float(rho))])
            wr.writerow(["exit_mass", repr(float(self.exit_mass)), ""])
        finally:
            if own:
                f.close()

    @classmethod
    def from_csv(cls, path_or_buf, domain):
        own = isinstance(path_or_buf, (str, bytes))
        f = open(path_or_buf, newline="") if own else path_or_buf
        try:
            rows = list(csv.reader(f))
        finally:
            if own:
                f.close()
        if not rows or rows[0][:3] != ["r_left", "r_right", "rho"]:
            raise FeasibilityError("bad header in measure CSV")
        exit_mass = 0.0
        lefts, rights, rho = [], [], []
        for row in rows[1:]:
            if not row:
                continue
            if row[0] == "exit_mass":
                exit_mass = float(row[1])
                continue
            lefts.append(float(row[0]))
            rights.append(float(row[1]))
            rho.append(float(row[2]))
        edges = np.array(lefts + [rights[-1]])
        if not np.allclose(edges[1:-1], np.array(rights[:-1]), rtol=0, atol=0):
            raise FeasibilityError("cells in CSV are not contiguous")
        return cls(domain, edges, np.array(rho), exit_mass)

    def to_csv_string(self):
        buf = io.StringIO()
        self.to_csv(buf)
        return buf.getvalue()


@dataclass
class QuantileFn:
    """Positions ``Q(s_j)`` of uniformly spaced mass samples.

    Samples sit at midpoints ``s_j = (j + 1/2)/n`` so each carries the
    same mass ``1/n``.  The first ``exit_plateau`` samples sit exactly at
    the exit ``r = a``.
    """

    domain: Domain1D
    q: np.ndarray = field(repr=False)
    exit_plateau: int = 0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if np.any(np.diff(q) < -1e-12):
            raise MonotonicityError("quantile samples must be nondecreasing")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)

    @property
    def n(self):
        return self.q.size

    @property
    def s(self):
        return (np.arange(self.n) + 0.5) / self.n


def total_mass(m):
    """Total mass of a measure (exit atom included)."""
    return m.total_mass()


def quantile_of(m, n_samples=4096):
    """Sample the quantile function of a probability measure.

    Parameters
    ----------
    m : Measure1D
        Must have total mass 1 within ``1e-9``.
    n_samples : int
        Number of midpoint samples, at least 2.

    Returns
    -------
    QuantileFn
    """
    if n_samples < 2:
        raise FeasibilityError("need at least 2 quantile samples")
    tm = m.total_mass()
    if abs(tm - 1.0) > 1e-9:
        raise MassMismatchError(f"total mass {tm} is not 1")
    s = (np.arange(n_samples) + 0.5) / n_samples
    masses = m.cell_masses()
    cum = m.exit_mass + np.concatenate([[0.0], np.cumsum(masses)])
    cum[-1] = tm  # guard rounding in the last edge
    idx = np.searchsorted(cum[1:], s * tm, side="left")
    idx = np.clip(idx, 0, len(masses) - 1)
    rho = m.rho[idx]
    need = s * tm - cum[idx]
    zcell = m.domain.cumweight(m.edges[idx])
    q = m.domain.inv_cumweight(zcell + need / np.where(rho > 0, rho, 1.0))
    q = np.where(s * tm <= m.exit_mass, m.domain.a, q)
    exit_plateau = int(np.searchsorted(s * tm, m.exit_mass, side="left"))
    q[:exit_plateau] = m.domain.a
    q = np.maximum.accumulate(np.clip(q, m.domain.a, m.domain.R))
    return QuantileFn(m.domain, q, exit_plateau)


def bin_quantiles_to_cells(domain, q, plateau, n_cells):
    """Cell masses of the measure encoded by midpoint quantile samples.

    Works in capacity coordinates ``z = W(r)``, where the sampled inverse
    CDF of any uniform stretch is linear in ``s``, and extrapolates the
    half-sample tails; mass is conserved exactly.  Returns
    ``(edges, cell_mass, exit_mass)`` with no cap enforcement.
    """
    n = q.size
    m = plateau if domain.has_exit else 0
    exit_mass = m / n
    edges = np.linspace(domain.a, domain.R, n_cells + 1)
    if m >= n:
        return edges, np.zeros(n_cells), 1.0
    s_mid = (np.arange(m, n) + 0.5) / n
    zi = np.asarray(domain.cumweight(np.clip(q[m:], domain.a, domain.R)))
    if zi.size == 1:
        zz = np.concatenate([zi, zi])
        ss = np.array([exit_mass, 1.0])
    else:
        half = 0.5 / n
        z_lo = max(zi[0] - (zi[1] - zi[0]) * 0.5, 0.0)
        z_hi = min(zi[-1] + (zi[-1] - zi[-2]) * 0.5, domain.total_weight)
        zz = np.concatenate([[z_lo], zi, [z_hi]])
        ss = np.concatenate([[s_mid[0] - half], s_mid, [s_mid[-1] + half]])
        ss[0] = max(ss[0], exit_mass)
    atol = 1e-14 * max(1.0, domain.total_weight)
    # collapse duplicate positions keeping the largest s (right-continuous CDF)
    keep = np.concatenate([np.diff(zz) > atol, [True]])
    zz, ss = zz[keep], ss[keep]
    z_edges = np.asarray(domain.cumweight(edges))
    cdf_edges = np.interp(z_edges, zz, ss, left=exit_mass, right=1.0)
    cdf_edges[0] = exit_mass
    cdf_edges[-1] = 1.0
    cdf_edges = np.maximum.accumulate(cdf_edges)
    return edges, np.diff(cdf_edges), exit_mass


def density_of(qf, n_cells=2048, domain=None):
    """Push the uniform law on [0, 1] through a quantile function.

    The sampled quantile is read as piecewise linear between samples; the
    plateau at ``a`` (on exit domains) becomes the exit atom.  Binning
    conserves mass exactly, so the result is a probability measure; the
    density cap can be exceeded only by interpolation slack of order one
    sample mass per cell, which is clipped and re-absorbed.

    Returns
    -------
    Measure1D
    """
    domain = domain or qf.domain
    edges, cell_mass, exit_mass = bin_quantiles_to_cells(
        domain, qf.q, qf.exit_plateau, n_cells
    )
    dW = domain.cumweight(edges[1:]) - domain.cumweight(edges[:-1])
    rho = cell_mass / dW
    over = np.clip(rho - 1.0, 0.0, None) @ dW
    if over > 1e-6:
        raise FeasibilityError(f"quantile samples overfill cells by {over}")
    if over > 0.0:
        # spill interpolation slack into the nearest cells with room
        rho = _spill_excess(rho, dW)
    return Measure1D(domain, edges, rho, exit_mass)


def _spill_excess(rho, dW):
    rho = rho.copy()
    excess = np.clip(rho - 1.0, 0.0, None) * dW
    rho = np.minimum(rho, 1.0)
    if excess.sum() <= 0.0:
        return rho
    room = (1.0 - rho) * dW
    roomy = np.nonzero(room > 0.0)[0]
    for i in np.nonzero(excess > 0.0)[0]:
        need = excess[i]
        # walk the cells with room nearest first, ties toward the door
        lt = int(np.searchsorted(roomy, i)) - 1
        rt = lt + 1
        while need > 1e-18 and (lt >= 0 or rt < len(roomy)):
            if rt >= len(roomy) or (lt >= 0 and i - roomy[lt] <= roomy[rt] - i):
                j, lt = roomy[lt], lt - 1
            else:
                j, rt = roomy[rt], rt + 1
            take = min(need, room[j])
            rho[j] += take / dW[j]
            room[j] -= take
            need -= take
    return rho
