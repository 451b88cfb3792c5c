"""Finite-population Monte Carlo check of the market-clearing rate.

Random numbers come from numpy's Philox counter-based generator. A stream is
keyed by (seed, purpose, replication, population). Inside a stream agent i
owns the row of N+2 consecutive uniforms starting at position i*(N+2): the
agent type, the initial z-state, then one per time step. Agent draws therefore
depend only on (seed, replication, population, agent index, time).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import EquilibriumSolution
from .errors import ExperimentError
from .lattice import Chain
from .model import MarketSpec

_AGENTS, _NODES, _BOOT = 1, 2, 3


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, key)])))


def population_counts(weights, total: int) -> np.ndarray:
    """round(w_p * total) with largest-remainder correction so counts sum to total."""
    raw = np.asarray(weights, dtype=float) * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _draw_index(u: np.ndarray, probs: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    cum[..., -1] = 1.0
    if cum.ndim == 1:
        return np.searchsorted(cum, u, side="right")
    return (u[:, None] >= cum).sum(axis=1)


def _simulate(chain: Chain, uniforms: np.ndarray, horizon: int) -> np.ndarray:
    """State indices of every agent at times 0..horizon."""
    n = uniforms.shape[0]
    states = np.empty((n, horizon + 1), dtype=np.int64)
    states[:, 0] = _draw_index(uniforms[:, 0], chain.initial) if chain.size(0) > 1 else 0
    for t in range(horizon):
        rows = chain.transitions[t][states[:, t]]
        states[:, t + 1] = np.minimum(_draw_index(uniforms[:, t + 1], rows), rows.shape[1] - 1)
    return states


@dataclass
class AgentSample:
    population: np.ndarray   # (agents,)
    type_index: np.ndarray   # (agents,)
    z_path: np.ndarray       # (agents, horizon+1) z-state indices


def _sample_pop(spec: MarketSpec, p: int, count: int, seed: int, rep: int, horizon: int):
    pop = spec.populations[p]
    rng = _stream(seed, _AGENTS, rep, p)
    u = rng.random((count, spec.lattice.n_steps + 2))
    types = _draw_index(u[:, 0], pop.type_weights)
    types = np.minimum(types, len(pop.agent_types) - 1)
    z = _simulate(pop.z_chain, u[:, 1:], horizon)
    return types, z


def sample_agents(spec: MarketSpec, total: int, seed: int, rep: int = 0, horizon: int | None = None) -> AgentSample:
    """Draw ``total`` agents split across populations by their weights."""
    if total < spec.m:
        raise ExperimentError(f"need at least {spec.m} agents, got {total}")
    horizon = spec.lattice.n_steps if horizon is None else horizon
    counts = population_counts(spec.weights, total)
    pops, types, zs = [], [], []
    for p, c in enumerate(counts):
        t, z = _sample_pop(spec, p, int(c), seed, rep, horizon)
        pops.append(np.full(int(c), p))
        types.append(t)
        zs.append(z)
    return AgentSample(np.concatenate(pops), np.concatenate(types), np.concatenate(zs))


@dataclass
class ClearingExperiment:
    sizes: list
    reps: int
    seed: int
    mse: np.ndarray            # sampling part: sum_p w_p mean_i (phi_i - E phi^p)
    mse_total: np.ndarray      # against the order flow itself
    mean_excess: np.ndarray
    slope: float
    slope_ci: tuple
    time: int | None


def _fit_slope(sizes, mse) -> float:
    if np.any(mse <= 0):
        return float("nan")
    return float(np.polyfit(np.log(sizes), np.log(mse), 1)[0])


def clearing_error(spec: MarketSpec, sol: EquilibriumSolution, sizes, reps: int, seed: int,
                   time: int | None = None, node: tuple | None = None, n_boot: int = 200) -> ClearingExperiment:
    """Mean-square excess demand of finite populations against the order flow.

    Each replication picks a decision time (uniform over 0..N-1 unless
    ``time`` is given) and a (stock, y) node from the equilibrium forward law
    unless ``node`` fixes it.
    """
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ExperimentError("need at least two population sizes to fit a slope")
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < spec.m:
        raise ExperimentError("sizes must be strictly increasing and at least the population count")
    if reps < 30:
        raise ExperimentError("need at least 30 replications")
    if sol.steps[0].strategies is None:
        raise ExperimentError("solution was solved without strategies")
    n_steps = spec.lattice.n_steps
    from .analytics import joint_law
    law = joint_law(sol)
    w = spec.weights
    max_counts = population_counts(w, sizes[-1])
    errs = np.zeros((len(sizes), reps))
    totals = np.zeros((len(sizes), reps))
    for r in range(reps):
        rng = _stream(seed, _NODES, r)
        t = int(rng.integers(n_steps)) if time is None else int(time)
        if node is None:
            flat = _draw_index(rng.random(), law[t].reshape(-1))
            s, y = np.unravel_index(min(flat, law[t].size - 1), law[t].shape)
        else:
            s, y = node
        rec = sol.steps[t]
        bias = float(w @ rec.mean_strategy[:, s, y] - rec.order_flow[s, y])
        draws = [_sample_pop(spec, p, int(max_counts[p]), seed, r, t) for p in range(spec.m)]
        for j, size in enumerate(sizes):
            counts = population_counts(w, size)
            e = 0.0
            for p in range(spec.m):
                c = int(counts[p])
                if c == 0:
                    continue
                types, z = draws[p][0][:c], draws[p][1][:c, t]
                dev = rec.strategies[p][s, y, z, types] - rec.mean_strategy[p, s, y]
                e += w[p] * dev.mean()
            errs[j, r] = e
            totals[j, r] = e + bias
    mse = (errs ** 2).mean(axis=1)
    slope = _fit_slope(sizes, mse)
    ci = (float("nan"), float("nan"))
    if np.isfinite(slope):
        rng = _stream(seed, _BOOT)
        boots = []
        for _ in range(n_boot):
            idx = rng.integers(reps, size=reps)
            boots.append(_fit_slope(sizes, (errs[:, idx] ** 2).mean(axis=1)))
        ci = (float(np.quantile(boots, 0.025)), float(np.quantile(boots, 0.975)))
    return ClearingExperiment(sizes, reps, seed, mse, (totals ** 2).mean(axis=1), totals.mean(axis=1),
                              slope, ci, time)
