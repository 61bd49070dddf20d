"""Minimizing-movement scheme for congested transport with gradient drive.

Each step solves

    minimize  J(rho) + W2(rho, rho_prev)^2 / (2 tau)

over densities capped at one (plus an absorbing atom on the exit when the
domain has one), with ``J(rho) = integral of D d(rho)``.  The minimization
runs in quantile coordinates, where the cap is a convex chain constraint;
see :mod:`crowdflow1d._solver`.  Pressure and velocity fields are
recovered from the optimal transport map of the step: with
``F = D + phi_bar / tau`` the pressure is ``(l - F)_+`` for the level
``l`` that makes the saturated set hold exactly the interior mass (or the
door value of ``F`` while the exit drains).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._solver import ChainProjector, minimize_free, solve_step, step_objective
from .errors import FeasibilityError
from .measures import (
    Measure1D,
    QuantileFn,
    bin_quantiles_to_cells,
    density_of,
    quantile_of,
)
from .transport import Potential1D, kantorovich_potential

SATURATION_TOL = 1e-6
PRESSURE_FLOOR = 1e-6
# the absorbed prefix is a whole number of samples, so the prefix scan
# can stop with the door marginal still below the interior level; the
# step then absorbs further among near-tied candidates until the two
# balance, as they do for the continuum minimizer
DOOR_BALANCE_MARGIN = 1e-3
DOOR_TIE_TOL = 3e-7


@dataclass(frozen=True)
class PotentialD:
    """Driving potential ``D`` with its slope and a curvature window.

    ``lam`` is a lower bound on ``D''`` (may be negative), ``curv_ub`` an
    upper bound; both enter the admissible-step-size cap and the gradient
    step of the inner solver.
    """

    fn: callable
    grad: callable
    lam: float = 0.0
    curv_ub: float = 0.0

    @classmethod
    def distance_to_exit(cls, domain):
        """``D(r) = r - a``: shortest distance to the door."""
        a = domain.a
        return cls(
            fn=lambda r: np.asarray(r, dtype=float) - a,
            grad=lambda r: np.ones_like(np.asarray(r, dtype=float)),
            lam=0.0,
            curv_ub=0.0,
        )

    @classmethod
    def from_table(cls, radii, values):
        """Piecewise-linear potential through ``(radii, values)``."""
        r = np.asarray(radii, dtype=float)
        v = np.asarray(values, dtype=float)
        if r.ndim != 1 or r.shape != v.shape or len(r) < 2:
            raise FeasibilityError("potential table needs matching 1d arrays")
        if np.any(np.diff(r) <= 0):
            raise FeasibilityError("potential table radii must increase")
        slopes = np.diff(v) / np.diff(r)
        h = 0.5 * (np.diff(r)[:-1] + np.diff(r)[1:])
        curv = np.diff(slopes) / h if len(slopes) > 1 else np.zeros(1)
        return cls(
            fn=lambda x: np.interp(x, r, v),
            grad=lambda x: slopes[
                np.clip(np.searchsorted(r, x, side="right") - 1, 0, len(slopes) - 1)
            ],
            lam=float(min(curv.min(), 0.0)),
            curv_ub=float(max(curv.max(), 0.0)),
        )

    def validate_for(self, domain, n_check=256):
        """On exit domains ``D`` must attain its minimum on the door."""
        if domain.has_exit:
            r = np.linspace(domain.a, domain.R, n_check)
            vals = np.asarray(self.fn(r), dtype=float)
            if vals[0] > vals.min() + 1e-9 * max(1.0, np.abs(vals).max()):
                raise FeasibilityError("D must be minimal at the exit")


def step_size_cap(D, cap_factor=1.0):
    """Largest admissible time step, ``cap/(4 |lam|)`` for concave parts."""
    if D.lam < 0.0:
        return cap_factor / (4.0 * abs(D.lam))
    return np.inf


def energy(m, D):
    """``J(m) = integral of D`` against the measure (exit atom included).

    Cell integrals use a 5-point Gauss rule against the domain weight.
    """
    dom = m.domain
    nodes, wts = np.polynomial.legendre.leggauss(5)
    lo, hi = m.edges[:-1], m.edges[1:]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    r = mid[:, None] + half[:, None] * nodes[None, :]
    vals = np.asarray(D.fn(r), dtype=float) * dom.weight(r)
    cell = half * (vals * wts[None, :]).sum(axis=1) * m.rho
    out = float(cell.sum())
    if m.exit_mass > 0.0:
        out += m.exit_mass * float(np.asarray(D.fn(dom.a)))
    return out


@dataclass
class JkoStepResult:
    """One minimizing-movement step with its recovered fields.

    ``pressure``, ``velocity`` and ``big_f`` are sampled at ``grid`` (the
    cell midpoints of ``rho_next``); ``level_l`` is the Lagrange level of
    the saturation constraint.
    """

    rho_next: Measure1D
    w2_increment: float
    objective_value: float
    energy: float
    level_l: float
    grid: np.ndarray = field(repr=False)
    pressure: np.ndarray = field(repr=False)
    velocity: np.ndarray = field(repr=False)
    big_f: np.ndarray = field(repr=False)
    kant_potential: Potential1D = field(repr=False, default=None)
    m_exit: int = 0
    q_prev: np.ndarray = field(repr=False, default=None)
    q_next: np.ndarray = field(repr=False, default=None)
    tau: float = 0.0


def _grid_fields(domain, D, tau, q_prev, q_next, m, exit_mass, n_cells):
    """Velocity, ``F = D + phi_bar/tau``, level, pressure, door marginal."""
    edges = np.linspace(domain.a, domain.R, n_cells + 1)
    grid = 0.5 * (edges[:-1] + edges[1:])
    dW = domain.cumweight(edges[1:]) - domain.cumweight(edges[:-1])
    u_free = -np.asarray(D.grad(grid), dtype=float)
    qi, pi = q_next[m:], q_prev[m:]
    if qi.size == 0:
        big_f = np.asarray(D.fn(grid), dtype=float)
        l_door = float(np.asarray(D.fn(domain.a)))
        return grid, u_free, big_f, l_door, np.zeros_like(grid), l_door
    # samples give the map exactly: t(q_next_j) = q_prev_j
    keep = np.concatenate([np.diff(qi) > 1e-13 * max(1.0, domain.R), [True]])
    qk, pk = qi[keep], pi[keep]

    def transport_map(r):
        # beyond the sampled range the map translates with the edge
        # sample's displacement
        t = np.interp(r, qk, pk)
        t = np.where(r < qk[0], r + (pk[0] - qk[0]), t)
        return np.where(r > qk[-1], r + (pk[-1] - qk[-1]), t)

    t_grid = transport_map(grid)
    v_map = (grid - t_grid) / tau  # equals the step velocity on the support
    # integrate phi_bar' = r - t(r) from the outer radius (phi_bar(R) = 0)
    r_nodes = np.concatenate([[domain.a], grid, [domain.R]])
    t_nodes = transport_map(r_nodes)
    dphi = np.clip(r_nodes - t_nodes, -domain.diameter, domain.diameter)
    phi = np.concatenate([[0.0], np.cumsum(0.5 * (dphi[1:] + dphi[:-1]) * np.diff(r_nodes))])
    phi -= phi[-1]
    phi_mid = phi[1:-1]
    big_f = np.asarray(D.fn(grid), dtype=float) + phi_mid / tau
    interior = 1.0 - exit_mass
    order = np.argsort(big_f, kind="stable")
    fs = big_f[order]
    cum = np.cumsum(dW[order])
    k = int(np.searchsorted(cum, interior - 1e-12))
    k = min(k, len(order) - 1)
    # the level sits at the capacity crossing, between the last cell
    # inside and the first outside; on exit domains the door marginal
    # D(a) + phi(a)/tau matches it only up to the sample quantization
    # of the absorbed mass, so the capacity level is the robust choice
    level = float(0.5 * (fs[k] + fs[k + 1])) if k + 1 < len(order) else float(fs[k])
    if domain.has_exit:
        door_level = float(np.asarray(D.fn(domain.a))) + phi[0] / tau
    else:
        door_level = np.inf
    pressure = np.clip(level - big_f, 0.0, None)
    pressure[pressure < PRESSURE_FLOOR * max(1.0, abs(level))] = 0.0
    return grid, v_map, big_f, level, pressure, door_level


def jko_step(prev, D, tau, n_samples=4096, n_cells=2048, cap_factor=1.0,
             patience=6):
    """Advance one step from ``prev``.

    Parameters
    ----------
    prev : Measure1D
        Probability measure, feasible for its domain.
    D : PotentialD
    tau : float
        Time step; must stay below :func:`step_size_cap`.
    n_samples, n_cells : int
        Quantile resolution of the inner solve and cell count of the
        returned density.

    Returns
    -------
    JkoStepResult
    """
    if tau <= 0.0:
        raise FeasibilityError("tau must be positive")
    if tau > step_size_cap(D, cap_factor):
        raise FeasibilityError("tau exceeds the admissible step cap")
    D.validate_for(prev.domain)
    qf = quantile_of(prev, n_samples)
    projector = ChainProjector(prev.domain, n_samples)
    return _assemble(projector, qf.q, qf.exit_plateau, D, tau, n_cells, patience)


def _assemble(projector, q_prev, m_prev, D, tau, n_cells, patience):
    domain = projector.domain
    ds = projector.ds
    q_next, m_next, obj = solve_step(projector, q_prev, m_prev, D, tau,
                                     patience=patience)
    fields = _grid_fields(
        domain, D, tau, q_prev, q_next, m_next, m_next * ds, n_cells
    )
    while domain.has_exit and m_next < projector.n:
        level, door_level = fields[3], fields[5]
        if door_level >= level - DOOR_BALANCE_MARGIN * max(1.0, abs(level)):
            break
        q_try = minimize_free(projector, q_prev, m_next + 1, D, tau, warm=q_next)
        val = step_objective(q_try, q_prev, D, tau, ds)
        if val > obj + DOOR_TIE_TOL * max(1.0, abs(obj)):
            break
        q_next, m_next, obj = q_try, m_next + 1, val
        fields = _grid_fields(
            domain, D, tau, q_prev, q_next, m_next, m_next * ds, n_cells
        )
    rho_next = density_of(QuantileFn(domain, q_next, m_next), n_cells)
    diff = q_next - q_prev
    w2_inc = float(np.sqrt((diff * diff).sum() * ds))
    grid, velocity, big_f, level, pressure, _ = fields
    u_free = -np.asarray(D.grad(grid), dtype=float)
    velocity = np.where(rho_next.rho > 0.0, velocity, u_free)
    pot = None
    if m_next < projector.n:
        pot = kantorovich_potential(
            QuantileFn(domain, q_next, m_next), QuantileFn(domain, q_prev, m_prev)
        )
    disc_energy = float((np.asarray(D.fn(q_next), dtype=float) * ds).sum())
    return JkoStepResult(
        rho_next=rho_next,
        w2_increment=w2_inc,
        objective_value=obj,
        energy=disc_energy,
        level_l=level,
        grid=grid,
        pressure=pressure,
        velocity=velocity,
        big_f=big_f,
        kant_potential=pot,
        m_exit=m_next,
        q_prev=q_prev.copy(),
        q_next=q_next,
        tau=tau,
    )


@dataclass
class FlowTrajectory:
    """A run of the scheme: iterates, step records and invariants."""

    domain: object
    tau: float
    times: np.ndarray = field(repr=False)
    iterates: list = field(repr=False, default=None)
    steps: list = field(repr=False, default=None)
    energy_series: np.ndarray = field(repr=False, default=None)
    exit_series: np.ndarray = field(repr=False, default=None)

    @property
    def sum_sq_increments(self):
        """``sum_k w2_k^2 / tau`` (discrete squared-speed total)."""
        return float(sum(s.w2_increment**2 for s in self.steps) / self.tau)

    def to_csv(self, path_or_buf):
        """Rows ``k,t,w2_increment,energy,exit_mass,b_estimate``."""
        import csv

        own = isinstance(path_or_buf, (str, bytes))
        f = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            wr = csv.writer(f)
            wr.writerow(["k", "t", "w2_increment", "energy", "exit_mass", "b_estimate"])
            for k, m in enumerate(self.iterates):
                inc = self.steps[k - 1].w2_increment if k > 0 else 0.0
                wr.writerow(
                    [
                        k,
                        repr(float(self.times[k])),
                        repr(float(inc)),
                        repr(float(self.energy_series[k])),
                        repr(float(m.exit_mass)),
                        repr(float(m.interface_estimate())),
                    ]
                )
        finally:
            if own:
                f.close()


def run_flow(rho0, D, tau, T, n_samples=4096, n_cells=2048, cap_factor=1.0,
             patience=6):
    """Iterate the scheme from ``rho0`` up to time ``T``.

    ``T`` must be an integer multiple of ``tau``.  Energy monotonicity holds
    exactly for the discrete quantities and is asserted on the fly.
    """
    if tau <= 0.0:
        raise FeasibilityError("tau must be positive")
    if tau > step_size_cap(D, cap_factor):
        raise FeasibilityError("tau exceeds the admissible step cap")
    n_steps = int(round(T / tau))
    if abs(n_steps * tau - T) > 1e-9 * max(1.0, T):
        raise FeasibilityError("T must be an integer multiple of tau")
    D.validate_for(rho0.domain)
    qf = quantile_of(rho0, n_samples)
    projector = ChainProjector(rho0.domain, n_samples)
    q, m = qf.q, qf.exit_plateau
    ds = projector.ds
    energies = [float((np.asarray(D.fn(q), dtype=float) * ds).sum())]
    iterates = [rho0]
    steps = []
    for _ in range(n_steps):
        res = _assemble(projector, q, m, D, tau, n_cells, patience)
        q, m = res.q_next, res.m_exit
        steps.append(res)
        iterates.append(res.rho_next)
        energies.append(res.energy)
        if energies[-1] > energies[-2] + 1e-9:
            raise FeasibilityError("energy increased along the flow")
    times = np.arange(n_steps + 1) * tau
    return FlowTrajectory(
        domain=rho0.domain,
        tau=tau,
        times=times,
        iterates=iterates,
        steps=steps,
        energy_series=np.array(energies),
        exit_series=np.array([m_.exit_mass for m_ in iterates]),
    )


@dataclass
class DecompositionDiagnostics:
    """Residuals of the velocity/pressure structure of one step."""

    residual_decomposition: float
    residual_complementarity: float
    dual_violation: float


def pressure_gradient(step, D):
    """Gradient of the step pressure on its support.

    Where ``p > 0`` the pressure equals ``l - F``, so its gradient is
    ``-(D' + v)`` with ``v`` the map velocity; off the support it is
    zero.  The support is taken as the level set joined with the
    saturated cells (dilated by one cell, since the free boundary lands
    inside a cell); this beats finite differences of the rendered
    pressure at the boundary.
    """
    grad_d = np.asarray(D.grad(step.grid), dtype=float)
    sat = step.rho_next.rho >= 1.0 - SATURATION_TOL
    near = sat.copy()
    near[:-1] |= sat[1:]
    near[1:] |= sat[:-1]
    mask = (step.pressure > 0.0) | near
    return np.where(mask, -(grad_d + step.velocity), 0.0)


def pressure_velocity_checks(step, D, rng=None, n_tests=32):
    """Check ``U = v + grad p`` on the support, complementarity and the
    sign condition of the velocity against admissible test functions.

    The decomposition residual vanishes identically on ``{p > 0}`` and
    measures free-fall exactness elsewhere, so it catches misplaced
    pressure support (cells reported free whose mass is actually
    blocked, or vice versa).  Complementarity and the dual condition
    probe the sign structure of first-order optimality independently.

    Returns
    -------
    DecompositionDiagnostics
    """
    m = step.rho_next
    dom = m.domain
    grid = step.grid
    dW = m.cell_weights()
    rho = m.rho
    u_free = -np.asarray(D.grad(grid), dtype=float)
    p_prime = pressure_gradient(step, D)
    res = u_free - step.velocity - p_prime
    supp = rho > 0.0
    dec = float(np.sqrt(((res[supp] ** 2) * rho[supp] * dW[supp]).sum()))
    comp = float(abs((p_prime * step.velocity * rho * dW).sum()))
    dual = _dual_violation(dom, grid, dW, rho, step.velocity, rng, n_tests)
    return DecompositionDiagnostics(dec, comp, dual)


def _component_gradient(grid, p):
    """Gradient of the pressure, one-sided at support-component edges."""
    out = np.zeros_like(p)
    pos = p > 0.0
    if not pos.any():
        return out
    idx = np.nonzero(pos)[0]
    splits = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[0], splits + 1])
    ends = np.concatenate([splits, [len(idx) - 1]])
    for s, e in zip(idx[starts], idx[ends]):
        if e - s >= 1:
            out[s : e + 1] = np.gradient(p[s : e + 1], grid[s : e + 1])
    return out


def _dual_violation(dom, grid, dW, rho, velocity, rng, n_tests):
    """Max of ``integral v q' w dr`` over admissible bumps ``q``.

    Admissible: smooth, nonnegative, supported where the density is
    saturated, vanishing at the exit.
    """
    rng = rng or np.random.default_rng(0)
    sat = rho >= 1.0 - SATURATION_TOL
    if dom.has_exit:
        sat &= grid > dom.a + 1e-9
    if not sat.any():
        return 0.0
    idx = np.nonzero(sat)[0]
    splits = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[0], splits + 1])
    ends = np.concatenate([splits, [len(idx) - 1]])
    runs = [(idx[s], idx[e]) for s, e in zip(starts, ends) if idx[e] > idx[s] + 2]
    worst = 0.0
    h = grid[1] - grid[0]
    for _ in range(n_tests):
        if not runs:
            break
        s, e = runs[rng.integers(len(runs))]
        c = grid[s] + (grid[e] - grid[s]) * rng.uniform(0.0, 0.6)
        d = c + (grid[e] - c) * rng.uniform(0.3, 1.0)
        if d - c < 4 * h:
            continue
        bump = np.clip((grid - c) * (d - grid), 0.0, None) ** 2
        scale = bump.max()
        if scale <= 0:
            continue
        bump = bump / scale
        qprime = np.gradient(bump, grid)
        val = float((velocity * qprime * dW).sum())
        worst = max(worst, val)
    return worst


@dataclass
class InterpolantDensity:
    """Displacement interpolant binned to cells; the cap is reported, not
    enforced."""

    edges: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    exit_mass: float = 0.0
    in_K: bool = True
    max_density: float = 0.0


def geodesic_interpolant(m0, m1, t, n_samples=4096, n_cells=2048):
    """Point on the displacement geodesic between two measures.

    The congestion cap is not preserved along geodesics; the result flags
    whether it holds (``in_K``) instead of raising.
    """
    if not 0.0 <= t <= 1.0:
        raise FeasibilityError("interpolation parameter must be in [0, 1]")
    if m0.domain != m1.domain:
        raise FeasibilityError("measures live on different domains")
    dom = m0.domain
    q0 = quantile_of(m0, n_samples)
    q1 = quantile_of(m1, n_samples)
    q = (1.0 - t) * q0.q + t * q1.q
    plateau = min(q0.exit_plateau, q1.exit_plateau) if dom.has_exit else 0
    edges, cell_mass, exit_mass = bin_quantiles_to_cells(dom, q, plateau, n_cells)
    dW = dom.cumweight(edges[1:]) - dom.cumweight(edges[:-1])
    rho = cell_mass / dW
    max_density = float(rho.max())
    return InterpolantDensity(
        edges=edges,
        rho=rho,
        exit_mass=exit_mass,
        in_K=bool(max_density <= 1.0 + 1e-6),
        max_density=max_density,
    )


def momentum_fields(traj, t, n_cells=512):
    """Momentum densities at time ``t`` along the piecewise geodesics.

    Returns ``(grid, e_tilde, e_hat)``: ``e_tilde`` carries every sample,
    ``e_hat`` drops the samples whose step destination is the exit.
    """
    tau = traj.tau
    n_steps = len(traj.steps)
    k = min(int(np.floor(t / tau)), n_steps - 1)
    step = traj.steps[k]
    sigma = np.clip((t - k * tau) / tau, 0.0, 1.0)
    y, x = step.q_prev, step.q_next
    z = (1.0 - sigma) * y + sigma * x
    v = (x - y) / tau
    dom = traj.domain
    edges = np.linspace(dom.a, dom.R, n_cells + 1)
    dW = dom.cumweight(edges[1:]) - dom.cumweight(edges[:-1])
    ds = 1.0 / len(y)
    e_tilde = np.histogram(z, bins=edges, weights=v * ds)[0] / dW
    interior = x > dom.a + 1e-12
    e_hat = np.histogram(z[interior], bins=edges, weights=(v * ds)[interior])[0] / dW
    grid = 0.5 * (edges[:-1] + edges[1:])
    return grid, e_tilde, e_hat


def momentum_discrepancy(traj):
    """Time integral of the mass-weighted gap between the two momenta.

    Equals ``sum over exiting samples of |start - door| * ds`` because a
    sample headed for the door carries the gap for exactly one step.
    """
    dom = traj.domain
    total = 0.0
    for step in traj.steps:
        ds = 1.0 / len(step.q_next)
        gone = step.q_next <= dom.a + 1e-12
        if gone.any():
            total += float(np.abs(step.q_prev[gone] - dom.a).sum() * ds)
    return total
