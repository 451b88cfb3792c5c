"""Forward-law summaries of solved equilibria, sweeps and the singular-point continuity probe."""
from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .engine import EquilibriumSolution, solve_mc_mfe
from .errors import InvalidParams, MFEError, NotSingular, RegimeError, SimplePoleRequired
from .lattice import forward_joint_distribution, s_marginals
from .model import (AgentType, MarketSpec, classify_regime, interaction_matrix, set_dotted,
                    spec_from_dict)

DEFAULT_TIMES = (0.5, 1.0, 1.5)


def joint_law(sol: EquilibriumSolution) -> list[np.ndarray]:
    return forward_joint_distribution(sol.lattice, sol.spec.y_chain, sol.p_table)


def terminal_distribution(sol: EquilibriumSolution) -> np.ndarray:
    """Probabilities of the N+1 terminal stock nodes."""
    return s_marginals(sol.lattice, joint_law(sol))[-1]


def expected_price_curve(sol: EquilibriumSolution) -> np.ndarray:
    lat = sol.lattice
    return np.array([pn.sum(axis=1) @ lat.values(n) for n, pn in enumerate(joint_law(sol))])


def time_index(sol_or_spec, t: float) -> int:
    """Step index of a calendar time; must sit on the grid and before the horizon."""
    lp = sol_or_spec.spec.lattice if isinstance(sol_or_spec, EquilibriumSolution) else sol_or_spec.lattice
    n = int(round(t / lp.dt))
    if abs(n * lp.dt - t) > 1e-9 * max(1.0, abs(t)) or not 0 <= n < lp.n_steps:
        raise InvalidParams(f"time {t} is not a decision time on the grid (dt={lp.dt})")
    return n


def strategy_rms(sol: EquilibriumSolution, pop: int, n: int, law: list | None = None) -> float:
    """Root mean square of the equilibrium position of population ``pop`` at step n."""
    table = sol.strategy_table(n, pop)
    law = joint_law(sol) if law is None else law
    p_pop = sol.spec.populations[pop]
    second = np.einsum("syzk,z,k->sy", table ** 2, p_pop.z_chain.marginals[n], p_pop.type_weights)
    return float(np.sqrt(np.sum(law[n] * second)))


def perturb_diagonal(spec: MarketSpec, eps: float) -> MarketSpec:
    """Shift every agent's own-population concern coefficient down by eps."""
    pops = []
    for p, pop in enumerate(spec.populations):
        types = []
        for t in pop.agent_types:
            row = list(t.theta_row)
            row[p] -= eps
            types.append(AgentType(t.weight, t.gamma, tuple(row)))
        pops.append(dataclasses.replace(pop, agent_types=tuple(types)))
    return dataclasses.replace(spec, populations=tuple(pops))


@dataclass
class ProbeRow:
    eps: float
    p_deviation: float
    strategy_deviation: float
    regime: str


def continuity_probe(spec: MarketSpec, eps_list) -> list[ProbeRow]:
    """Compare regular solves at Theta - eps I with the solve at the singular point."""
    reg = classify_regime(interaction_matrix(spec))
    if reg.kind == "Regular":
        raise NotSingular("I - Theta is invertible; nothing to probe")
    if reg.kind == "Unsolvable":
        raise RegimeError(f"kernel dimension {reg.kernel_dim}", reg.kernel_dim)
    if not reg.simple_pole:
        raise SimplePoleRequired("(v, kappa) = 0: the resolvent pole is not simple")
    base = solve_mc_mfe(spec)
    rows = []
    for eps in eps_list:
        sol = solve_mc_mfe(perturb_diagonal(spec, float(eps)))
        dp = max(float(np.abs(a.p - b.p).max()) for a, b in zip(sol.steps, base.steps))
        dphi = max(float(np.abs(x - y).max())
                   for a, b in zip(sol.steps, base.steps)
                   for x, y in zip(a.strategies, b.strategies))
        rows.append(ProbeRow(float(eps), dp, dphi, sol.regime.kind))
    return rows


@dataclass
class SweepRow:
    value: float
    regime: str = ""
    kind: str = ""
    terminal_mean: float = float("nan")
    terminal_std: float = float("nan")
    distribution: np.ndarray | None = None
    price_curve: np.ndarray | None = None
    rms: dict = field(default_factory=dict)   # (population, time) -> value
    error: str = ""


@dataclass
class SweepResult:
    axis: str
    values: list
    rows: list


OUTPUTS = {"distribution", "price_curve", "rms"}


def _sweep_row(template, paths, val, outputs, times) -> SweepRow:
    row = SweepRow(val)
    try:
        doc = template
        for p in paths:
            doc = set_dotted(doc, p, val)
        spec = spec_from_dict(doc)
        row.regime = classify_regime(interaction_matrix(spec)).kind
        sol = solve_mc_mfe(spec, keep_strategies="rms" in outputs)
        row.kind = sol.kind
        law = joint_law(sol)
        dist = s_marginals(sol.lattice, law)[-1]
        nodes = sol.lattice.node_values[-1]
        row.terminal_mean = float(dist @ nodes)
        row.terminal_std = float(np.sqrt(max(dist @ nodes ** 2 - row.terminal_mean ** 2, 0.0)))
        if "distribution" in outputs:
            row.distribution = dist
        if "price_curve" in outputs:
            row.price_curve = np.array([pn.sum(axis=1) @ sol.lattice.values(n) for n, pn in enumerate(law)])
        if "rms" in outputs:
            for t in times:
                n = time_index(sol, t)
                for p in range(spec.m):
                    row.rms[(p, float(t))] = strategy_rms(sol, p, n, law)
    except MFEError as exc:
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def sweep(template: dict, axis, values, outputs=("distribution",), times=DEFAULT_TIMES,
          workers: int = 1) -> SweepResult:
    """Solve once per axis value.

    ``template`` is a config mapping and ``axis`` a dotted path into it, or a
    list of paths that all receive the same value (e.g. both diagonal entries
    of Theta). Failures are recorded in the row instead of raised.
    """
    paths = [axis] if isinstance(axis, str) else list(axis)
    values = [float(v) for v in values]
    if any(b <= a for a, b in zip(values, values[1:])):
        raise InvalidParams("sweep values must be strictly increasing")
    unknown = set(outputs) - OUTPUTS
    if unknown:
        raise InvalidParams(f"unknown sweep outputs {sorted(unknown)}")
    if workers > 1 and len(values) > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda v: _sweep_row(template, paths, v, outputs, times), values))
    else:
        rows = [_sweep_row(template, paths, v, outputs, times) for v in values]
    return SweepResult(",".join(paths), values, rows)
