"""Recombining stock tree, finite-state factor chains and forward measures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import IndexOutOfRange, InvalidParams, ProbabilityLeak

ROW_SUM_TOL = 1e-12
LEAK_TOL = 1e-8


@dataclass(frozen=True)
class LatticeParams:
    n_steps: int
    horizon: float
    rate: float
    u_tilde: float
    d_tilde: float
    s0: float = 1.0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise InvalidParams(f"n_steps must be a positive integer, got {self.n_steps}")
        if not self.horizon > 0:
            raise InvalidParams(f"horizon must be positive, got {self.horizon}")
        if not self.s0 > 0:
            raise InvalidParams(f"s0 must be positive, got {self.s0}")
        if not 0 < self.d_tilde < self.beta < self.u_tilde:
            raise InvalidParams(
                f"need 0 < d_tilde < exp(r*dt) < u_tilde, got d_tilde={self.d_tilde}, "
                f"exp(r*dt)={self.beta}, u_tilde={self.u_tilde}"
            )

    @classmethod
    def from_sigma(cls, n_steps: int, horizon: float, rate: float, sigma: float, s0: float = 1.0):
        """Symmetric tree with u_tilde = 1/d_tilde = exp(sigma*sqrt(dt))."""
        if not sigma > 0:
            raise InvalidParams(f"sigma must be positive, got {sigma}")
        up = math.exp(sigma * math.sqrt(horizon / n_steps))
        return cls(n_steps, horizon, rate, up, 1.0 / up, s0)

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def beta(self) -> float:
        return math.exp(self.rate * self.dt)

    @property
    def u(self) -> float:
        return self.u_tilde - self.beta

    @property
    def d(self) -> float:
        return self.d_tilde - self.beta

    def gamma_scale(self, n: int) -> float:
        """Factor beta^(N-n) applied to risk aversion at time n."""
        return self.beta ** (self.n_steps - n)

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def risk_neutral_up_prob(params: LatticeParams) -> float:
    return -params.d / (params.u - params.d)


@dataclass(frozen=True)
class StockLattice:
    """Stock states per time.

    In Markov mode index k at time n is the node with k up-moves. In path mode
    index j encodes the whole move history as a bit string (first move is the
    most significant bit, 1 = up), so there are 2**n indices at time n.
    """

    params: LatticeParams
    path_mode: bool = False

    @cached_property
    def node_values(self) -> list[np.ndarray]:
        p = self.params
        out = []
        for n in range(p.n_steps + 1):
            k = np.arange(n + 1)
            out.append(p.s0 * p.u_tilde ** k * p.d_tilde ** (n - k))
        return out

    def size(self, n: int) -> int:
        return 1 << n if self.path_mode else n + 1

    def node_index(self, n: int) -> np.ndarray:
        """Node (number of up-moves) of every index at time n."""
        if not self.path_mode:
            return np.arange(n + 1)
        j = np.arange(1 << n, dtype=np.int64)
        return sum((j >> b) & 1 for b in range(n)) if n else np.zeros(1, np.int64)

    def values(self, n: int) -> np.ndarray:
        return self.node_values[n][self.node_index(n)]

    def up_child(self, n: int) -> np.ndarray:
        j = np.arange(self.size(n))
        return 2 * j + 1 if self.path_mode else j + 1

    def down_child(self, n: int) -> np.ndarray:
        j = np.arange(self.size(n))
        return 2 * j if self.path_mode else j


def build_stock_lattice(params: LatticeParams, path_mode: bool = False) -> StockLattice:
    return StockLattice(params, path_mode)


@dataclass(frozen=True)
class Chain:
    """Finite-state Markov chain with time-dependent state sets.

    ``states[n]`` holds the values at time n and ``transitions[n]`` maps the
    states at n to those at n+1.
    """

    states: tuple
    transitions: tuple
    initial: np.ndarray = field(default=None)

    def __post_init__(self):
        states = tuple(np.asarray(s, dtype=float).reshape(-1) for s in self.states)
        trans = tuple(np.asarray(t, dtype=float) for t in self.transitions)
        if len(trans) != len(states) - 1:
            raise InvalidParams("need exactly one transition matrix per step")
        for n, t in enumerate(trans):
            if t.shape != (states[n].size, states[n + 1].size):
                raise InvalidParams(f"transition {n} has shape {t.shape}, "
                                    f"expected {(states[n].size, states[n + 1].size)}")
            if np.any(t < 0) or np.any(t > 1):
                raise InvalidParams(f"transition {n} has entries outside [0, 1]")
            if np.any(np.abs(t.sum(axis=1) - 1.0) > ROW_SUM_TOL):
                raise InvalidParams(f"transition {n} rows do not sum to 1")
        init = self.initial
        if init is None:
            init = np.zeros(states[0].size)
            init[0] = 1.0
        init = np.asarray(init, dtype=float)
        if init.shape != states[0].shape or abs(init.sum() - 1.0) > ROW_SUM_TOL or np.any(init < 0):
            raise InvalidParams("initial law must be a probability vector over the time-0 states")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "transitions", trans)
        object.__setattr__(self, "initial", init)

    @property
    def n_steps(self) -> int:
        return len(self.transitions)

    def size(self, n: int) -> int:
        return self.states[n].size

    @cached_property
    def marginals(self) -> list[np.ndarray]:
        """Unconditional law of the chain at every time."""
        out = [self.initial]
        for t in self.transitions:
            out.append(out[-1] @ t)
        return out

    @cached_property
    def log_supports(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per step, padded (target index, log weight) pairs for every source state."""
        out = []
        for t in self.transitions:
            width = max(1, int((t > 0).sum(axis=1).max()))
            idx = np.zeros((t.shape[0], width), dtype=np.int64)
            logw = np.full((t.shape[0], width), -np.inf)
            for i, row in enumerate(t):
                nz = np.flatnonzero(row > 0)
                idx[i, :nz.size] = nz
                logw[i, :nz.size] = np.log(row[nz])
            out.append((idx, logw))
        return out

    def step_expectation(self, n: int, state: int, values) -> float:
        if not 0 <= n < self.n_steps or not 0 <= state < self.size(n):
            raise IndexOutOfRange(f"no state {state} at time {n}")
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size(n + 1),):
            raise IndexOutOfRange(f"values must have length {self.size(n + 1)}")
        return float(self.transitions[n][state] @ values)

    def truncate(self, n_steps: int) -> "Chain":
        return Chain(self.states[:n_steps + 1], self.transitions[:n_steps], self.initial)


def _binomial_chain(level, n_steps: int, p: float) -> Chain:
    if not 0 <= p <= 1:
        raise InvalidParams(f"up-probability must lie in [0, 1], got {p}")
    states, trans = [], []
    for n in range(n_steps + 1):
        states.append(level(n, np.arange(n + 1)))
    for n in range(n_steps):
        t = np.zeros((n + 1, n + 2))
        k = np.arange(n + 1)
        t[k, k] = 1 - p
        t[k, k + 1] = p
        trans.append(t)
    return Chain(tuple(states), tuple(trans))


def _constant_chain(value: float, n_steps: int) -> Chain:
    return Chain(tuple(np.array([value]) for _ in range(n_steps + 1)),
                 tuple(np.ones((1, 1)) for _ in range(n_steps)))


def additive_binomial(y0: float, sigma: float, p: float, dt: float, n_steps: int) -> Chain:
    """Y_{n+1} = Y_n +/- sigma*sqrt(dt); a zero sigma collapses to one state per time."""
    if sigma < 0:
        raise InvalidParams(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return _constant_chain(y0, n_steps)
    h = sigma * math.sqrt(dt)
    return _binomial_chain(lambda n, k: y0 + (2 * k - n) * h, n_steps, p)


def multiplicative_binomial(z0: float, sigma: float, p: float, dt: float, n_steps: int) -> Chain:
    """Z_{n+1} = Z_n * exp(+/- sigma*sqrt(dt))."""
    if sigma < 0:
        raise InvalidParams(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return _constant_chain(z0, n_steps)
    h = sigma * math.sqrt(dt)
    return _binomial_chain(lambda n, k: z0 * np.exp((2 * k - n) * h), n_steps, p)


def forward_joint_distribution(lattice: StockLattice, y_chain: Chain, p_table) -> list[np.ndarray]:
    """Joint law P_n(s_index, y_index) for n = 0..N given up-probabilities p_table[n][s, y]."""
    n_steps = lattice.params.n_steps
    out = [np.zeros((1, y_chain.size(0)))]
    out[0][0] = y_chain.initial
    for n in range(n_steps):
        p = np.asarray(p_table[n], dtype=float)
        cur = out[-1]
        if p.shape != cur.shape:
            raise IndexOutOfRange(f"p_table[{n}] has shape {p.shape}, expected {cur.shape}")
        trans = y_chain.transitions[n]
        up = (cur * p) @ trans
        dn = (cur * (1.0 - p)) @ trans
        nxt = np.zeros((lattice.size(n + 1), y_chain.size(n + 1)))
        if lattice.path_mode:
            nxt[lattice.up_child(n)] = up
            nxt[lattice.down_child(n)] = dn
        else:
            nxt[1:] += up
            nxt[:-1] += dn
        total = nxt.sum()
        if not abs(total - 1.0) <= LEAK_TOL:
            raise ProbabilityLeak(f"mass {total!r} at time {n + 1}")
        out.append(nxt)
    return out


def s_marginals(lattice: StockLattice, joint: list[np.ndarray]) -> list[np.ndarray]:
    """Collapse a joint law onto stock nodes (path indices are merged by node)."""
    out = []
    for n, pn in enumerate(joint):
        ps = pn.sum(axis=1)
        if lattice.path_mode:
            ps = np.bincount(lattice.node_index(n), weights=ps, minlength=n + 1)
        out.append(ps)
    return out
