"""Backward induction for relative-performance and market-clearing equilibria.

Arrays at time n are laid out as (stock index, y-state, z-state, agent type).
All liability recursions run on log V so that large risk aversion or long
horizons never overflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegeneracyError, IndexOutOfRange, InvalidPath, PathModeCapExceeded,
                     ProbabilityBound, RegimeError)
from .lattice import Chain, StockLattice
from .linalg import DEFAULT_TOL
from .model import MarketSpec, RegimeClassification, classify_regime, interaction_matrix

CLEARING_TOL = 1e-9


def one_period_optimal(p: float, u: float, d: float, gamma_n: float, theta_row, delta_n, log_f: float) -> float:
    """Minimiser of p*exp(-g(phi*u - theta.delta)) * f + q*exp(-g*phi*d) over phi."""
    if not 0 < p < 1:
        raise ProbabilityBound(f"p must lie in (0, 1), got {p}")
    if not (d < 0 < u) or gamma_n <= 0:
        raise ValueError("need d < 0 < u and gamma_n > 0")
    shift = float(np.dot(np.atleast_1d(theta_row), np.atleast_1d(delta_n)))
    ell = math.log(-p * u / ((1 - p) * d))
    return shift / (u - d) + (ell + log_f) / (gamma_n * (u - d))


def logaddexp(a, b) -> np.ndarray:
    """log(exp(a) + exp(b)); several times faster than np.logaddexp on large arrays."""
    hi = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        out = hi + np.log1p(np.exp(np.minimum(a, b) - hi))
    dead = np.isneginf(hi)
    if dead.any():
        out = np.where(dead, -np.inf, out)
    return out


def log_expect(logv: np.ndarray, support: tuple, axis: int) -> np.ndarray:
    """log E[exp(logv) | state at the previous time] along one chain axis."""
    idx, logw = support
    rows, width = idx.shape
    shape = [1] * logv.ndim
    shape[axis] = rows
    # binomial-style chains move to i, i+1, ...: slices avoid copying
    banded = np.array_equal(idx, np.arange(rows)[:, None] + np.arange(width))
    out = None
    for j in range(width):
        if banded:
            sl = [slice(None)] * logv.ndim
            sl[axis] = slice(j, j + rows)
            part = logv[tuple(sl)]
        else:
            part = np.take(logv, idx[:, j], axis=axis)
        term = part + logw[:, j].reshape(shape)
        out = term if out is None else logaddexp(out, term)
    return out


@dataclass
class StepRecord:
    """Everything computed for the decision taken at time ``t`` (step t -> t+1)."""

    t: int
    p: np.ndarray                 # (S, Y) up-probabilities
    order_flow: np.ndarray        # (S, Y)
    mean_strategy: np.ndarray     # (m, S, Y) population averages of the position
    tol_ring: np.ndarray          # (m,) E[1/gamma_n] per population
    sens_ring: np.ndarray         # (m, S, Y) E[log f / gamma_n] per population
    effective: dict = field(default_factory=dict)
    strategies: list | None = None   # per population (S, Y, Z, K)
    log_f: list | None = None


@dataclass
class EquilibriumSolution:
    spec: MarketSpec
    lattice: StockLattice
    regime: RegimeClassification
    kind: str           # "Single", "MultiRegular" or "MultiSingular"
    equilibrium: str    # "market_clearing" or "relative_performance"
    steps: list
    log_liability: list | None
    liability_bounds: list
    clearing_residual: float

    @property
    def mode(self) -> str:
        return "PathDependent" if self.lattice.path_mode else "Markovian"

    @property
    def p_table(self) -> list:
        return [s.p for s in self.steps]

    @property
    def p_range(self) -> tuple:
        return (min(float(s.p.min()) for s in self.steps), max(float(s.p.max()) for s in self.steps))

    def strategy_table(self, n: int, pop: int) -> np.ndarray:
        if not 0 <= n < len(self.steps):
            raise IndexOutOfRange(f"time {n} outside 0..{len(self.steps) - 1}")
        if not 0 <= pop < self.spec.m:
            raise IndexOutOfRange(f"population {pop} outside 0..{self.spec.m - 1}")
        rec = self.steps[n]
        if rec.strategies is None:
            raise ValueError("strategies were not retained; solve with keep_strategies=True")
        return rec.strategies[pop]

    def strategy(self, n: int, s: int, y: int, z: int, pop: int, type_: int) -> float:
        table = self.strategy_table(n, pop)
        for name, i, size in zip(("s", "y", "z", "type"), (s, y, z, type_), table.shape):
            if not 0 <= i < size:
                raise IndexOutOfRange(f"{name} index {i} outside 0..{size - 1} at time {n}")
        return float(table[s, y, z, type_])

    def diagnostics(self) -> dict:
        lo, hi = self.p_range
        out = {"regime": self.regime.kind, "kind": self.kind, "mode": self.mode,
               "equilibrium": self.equilibrium, "p_min": lo, "p_max": hi,
               "clearing_residual_max": self.clearing_residual}
        if self.regime.kind == "SingularRank1":
            out["v"] = self.regime.v.tolist()
            out["kappa"] = self.regime.kappa.tolist()
        return out


def _probabilities(x: np.ndarray, u: float, d: float):
    """p = -d / (u e^x - d) and q = 1 - p, with their logs, computed without overflow."""
    lu, lmd = math.log(u), math.log(-d)
    denom = np.logaddexp(lu + x, lmd)
    log_p = lmd - denom
    log_q = lu + x - denom
    return np.exp(log_p), log_p, log_q


def _check_probabilities(p: np.ndarray, t: int):
    if not np.all(np.isfinite(p)) or np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ProbabilityBound(f"transition probability left (0, 1) at time {t}")


def _pop_mean(values: np.ndarray, pz: np.ndarray, tw: np.ndarray) -> np.ndarray:
    return np.einsum("syzk,z,k->sy", values, pz, tw)


def _backward(spec: MarketSpec, exogenous_p=None, keep_strategies: bool = True,
              keep_log_liability: bool = False, keep_effective: bool = False,
              tol: float = DEFAULT_TOL) -> EquilibriumSolution:
    lp = spec.lattice
    n_steps = lp.n_steps
    if spec.path_mode and n_steps > spec.path_cap:
        raise PathModeCapExceeded(f"path mode needs n_steps <= {spec.path_cap}, got {n_steps}")
    lat = spec.stock_lattice()
    y_chain: Chain = spec.y_chain
    m = spec.m
    w = spec.weights
    u, d = lp.u, lp.d
    spread = u - d
    theta = interaction_matrix(spec)
    reg = classify_regime(theta, tol)
    rp = exogenous_p is not None
    if reg.kind == "Unsolvable":
        raise RegimeError(f"I - Theta has kernel dimension {reg.kernel_dim}; no equilibrium is "
                          "computed for kernels of dimension two or more", reg.kernel_dim)
    if rp and reg.kind != "Regular":
        raise RegimeError("relative-performance solve needs I - Theta invertible", reg.kernel_dim)
    singular = reg.kind == "SingularRank1"
    if singular and abs(float(w @ reg.kappa)) <= tol:
        raise DegeneracyError("(w, kappa) = 0")

    pops = spec.populations
    tw = [p.type_weights for p in pops]
    gam = [p.gammas for p in pops]
    th = [p.thetas for p in pops]
    zc = [p.z_chain for p in pops]

    log_v = []
    for k, pop in enumerate(pops):
        f = pop.liability.evaluate(lat, y_chain, zc[k])
        log_v.append(f[..., None] * gam[k])
    bounds = [None] * (n_steps + 1)
    bounds[n_steps] = [(float(a.min()), float(a.max())) for a in log_v]
    kept = [None] * (n_steps + 1) if keep_log_liability else None
    if kept is not None:
        kept[n_steps] = log_v
    steps = [None] * n_steps
    resid = 0.0

    for n in range(n_steps, 0, -1):
        t = n - 1
        scale = lp.gamma_scale(n)
        flow = spec.order_flow.evaluate(lat, y_chain, t)
        up_i, dn_i = (slice(1, None, 2), slice(0, None, 2)) if lat.path_mode else (slice(1, None), slice(0, -1))
        a_up, a_dn, log_f, sens_i, inv_g = [], [], [], [], []
        tol_ring = np.empty(m)
        sens_ring = np.empty((m,) + flow.shape)
        for k in range(m):
            le = log_expect(log_v[k], zc[k].log_supports[t], axis=2)
            le = log_expect(le, y_chain.log_supports[t], axis=1)
            a_up.append(le[up_i])
            a_dn.append(le[dn_i])
            lf = a_up[k] - a_dn[k]
            log_f.append(lf)
            inv_g.append(1.0 / (gam[k] * scale))
            sens_i.append(lf * inv_g[k])
            tol_ring[k] = tw[k] @ inv_g[k]
            sens_ring[k] = _pop_mean(sens_i[k], zc[k].marginals[t], tw[k])

        eff = {}
        phi = []
        if rp:
            p = np.asarray(exogenous_p[t], dtype=float)
            if p.shape != flow.shape:
                raise IndexOutOfRange(f"exogenous p at time {t} has shape {p.shape}, expected {flow.shape}")
            _check_probabilities(p, t)
            log_p, log_q = np.log(p), np.log1p(-p)
            ell = log_p - log_q + math.log(u / -d)
            delta = np.einsum("ij,jsy->isy", reg.inv, ell * tol_ring[:, None, None] + sens_ring)
            for k in range(m):
                shift = np.einsum("km,msy->syk", th[k], delta)[:, :, None, :]
                phi.append(shift / spread + (ell[..., None, None] + log_f[k]) * inv_g[k] / spread)
            eff["delta"] = delta
        elif not singular:
            r_t = reg.inv @ tol_ring
            t_agg = float(w @ r_t)
            if abs(t_agg) <= tol * max(float(np.abs(w) @ np.abs(r_t)), 1e-300):
                raise DegeneracyError(f"aggregate effective tolerance vanishes at time {n}")
            r_v = np.einsum("ij,jsy->isy", reg.inv, sens_ring)
            v_agg = np.einsum("i,isy->sy", w, r_v)
            x = (v_agg - spread * flow) / t_agg
            p, log_p, log_q = _probabilities(x, u, d)
            t_types = []
            for k in range(m):
                t_i = inv_g[k] + th[k] @ r_t
                v_i = sens_i[k] + np.einsum("km,msy->syk", th[k], r_v)[:, :, None, :]
                ratio = t_i / t_agg
                phi.append(ratio * flow[..., None, None] + (v_i - ratio * v_agg[..., None, None]) / spread)
                t_types.append(t_i)
                if keep_effective:
                    eff.setdefault("sens_types", []).append(v_i)
            eff.update(tol_types=t_types, tol_agg=t_agg, sens_agg=v_agg)
        else:
            v, kappa, g = reg.v, reg.kappa, reg.G
            vt = float(v @ tol_ring)
            if abs(vt) <= tol * float(np.abs(v) @ np.abs(tol_ring)):
                raise DegeneracyError(f"(v, E[1/gamma]) = 0 at time {n}")
            wk = float(w @ kappa)
            c = np.einsum("i,isy->sy", v, sens_ring) / vt
            p, log_p, log_q = _probabilities(c, u, d)
            big_u = sens_ring - c[None] * tol_ring[:, None, None]
            gu = np.einsum("ij,jsy->isy", g, big_u)
            wgu = np.einsum("i,isy->sy", w, gu)
            for k in range(m):
                rho = th[k] @ kappa / wk
                u_i = sens_i[k] - c[..., None, None] * inv_g[k]
                coupled = np.einsum("km,msy->syk", th[k], gu)[:, :, None, :]
                phi.append(rho * flow[..., None, None] + (u_i + coupled - rho * wgu[..., None, None]) / spread)
            eff.update(ratio=c, U=big_u, GU=gu, delta_n=(spread * flow - wgu) / wk)
        _check_probabilities(p, t)

        mean_phi = np.stack([_pop_mean(phi[k], zc[k].marginals[t], tw[k]) for k in range(m)])
        if not rp:
            resid = max(resid, float(np.abs(w @ mean_phi.reshape(m, -1) - flow.reshape(-1)).max()))

        new_v = []
        for k in range(m):
            x_rel = phi[k] - np.einsum("km,msy->syk", th[k], mean_phi)[:, :, None, :]
            g_n = gam[k] * scale
            new_v.append(logaddexp(log_p[..., None, None] - g_n * u * x_rel + a_up[k],
                                      log_q[..., None, None] - g_n * d * x_rel + a_dn[k]))
        log_v = new_v
        bounds[t] = [(float(a.min()), float(a.max())) for a in log_v]
        if kept is not None:
            kept[t] = log_v
        steps[t] = StepRecord(t, p, flow, mean_phi, tol_ring, sens_ring, eff,
                              phi if keep_strategies else None,
                              log_f if keep_effective else None)

    if not rp and resid > CLEARING_TOL * max(1.0, max(float(np.abs(s.order_flow).max()) for s in steps)):
        raise DegeneracyError(f"market clearing residual {resid:.3g} exceeds tolerance")
    kind = "Single" if m == 1 else ("MultiSingular" if singular else "MultiRegular")
    return EquilibriumSolution(spec, lat, reg, kind, "relative_performance" if rp else "market_clearing",
                               steps, kept, bounds, resid)


def solve_mc_mfe(spec: MarketSpec, keep_strategies: bool = True, keep_log_liability: bool = False,
                 keep_effective: bool = False, tol: float = DEFAULT_TOL) -> EquilibriumSolution:
    """Market-clearing equilibrium: transition probabilities and strategies."""
    return _backward(spec, None, keep_strategies, keep_log_liability, keep_effective, tol)


def solve_rp_mfe(spec: MarketSpec, exogenous_p, keep_strategies: bool = True,
                 keep_log_liability: bool = False, keep_effective: bool = False,
                 tol: float = DEFAULT_TOL) -> EquilibriumSolution:
    """Relative-performance equilibrium under given up-probabilities.

    ``exogenous_p`` is either a scalar or a list indexed by time of
    (stock index, y-state) arrays.
    """
    lat = spec.stock_lattice()
    if np.isscalar(exogenous_p):
        exogenous_p = [np.full((lat.size(t), spec.y_chain.size(t)), float(exogenous_p))
                       for t in range(spec.lattice.n_steps)]
    return _backward(spec, exogenous_p, keep_strategies, keep_log_liability, keep_effective, tol)


def strategy(sol: EquilibriumSolution, n: int, s: int, y: int, z: int, pop: int, type_: int) -> float:
    return sol.strategy(n, s, y, z, pop, type_)


def mean_field_path(sol: EquilibriumSolution, path, pop: int, mu0: float | None = None) -> np.ndarray:
    """Population-average wealth along a path of (up, next y-state) moves.

    Starts at the time-0 y-state carrying all initial mass. ``up`` is truthy
    for an up-move of the stock.
    """
    spec = sol.spec
    if not 0 <= pop < spec.m:
        raise IndexOutOfRange(f"population {pop} outside 0..{spec.m - 1}")
    lp = spec.lattice
    path = list(path)
    if len(path) > lp.n_steps:
        raise InvalidPath(f"path has {len(path)} moves, lattice has {lp.n_steps} steps")
    init = spec.y_chain.initial
    if np.count_nonzero(init) != 1:
        raise InvalidPath("initial y law is not a point mass; start state is ambiguous")
    y = int(np.flatnonzero(init)[0])
    s = 0
    mu = spec.populations[pop].xi_mean if mu0 is None else mu0
    out = [mu]
    for t, (up, y_next) in enumerate(path):
        y_next = int(y_next)
        trans = spec.y_chain.transitions[t]
        if not 0 <= y_next < trans.shape[1] or trans[y, y_next] <= 0:
            raise InvalidPath(f"move {t}: y-state {y} cannot reach {y_next}")
        mean = sol.steps[t].mean_strategy[pop, s, y]
        mu = lp.beta * mu + (lp.u if up else lp.d) * mean
        out.append(mu)
        s = int(sol.lattice.up_child(t)[s] if up else sol.lattice.down_child(t)[s])
        y = y_next
    return np.array(out)
