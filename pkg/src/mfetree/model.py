"""Market specifications, config parsing and interaction-regime classification."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .errors import InvalidParams, InvariantError, SchemaError
from .lattice import Chain, LatticeParams, StockLattice, additive_binomial, multiplicative_binomial
from .linalg import DEFAULT_TOL, analyze_kernel

WEIGHT_TOL = 1e-12
DEFAULT_PATH_CAP = 16


@dataclass(frozen=True)
class AgentType:
    weight: float
    gamma: float
    theta_row: tuple


@dataclass(frozen=True)
class ParametricLiability:
    """F = C - f_a * S_N * Y_N * Z_N."""

    C: float
    f_a: float

    def evaluate(self, lattice: StockLattice, y_chain: Chain, z_chain: Chain) -> np.ndarray:
        n = lattice.params.n_steps
        s = lattice.values(n)
        return self.C - self.f_a * s[:, None, None] * y_chain.states[n][None, :, None] * z_chain.states[n][None, None, :]


@dataclass(frozen=True)
class TabulatedLiability:
    """Terminal liability given on (stock index, y-state, z-state).

    The first axis holds either the N+1 terminal nodes or, in path mode, the
    2**N terminal paths.
    """

    table: np.ndarray

    def evaluate(self, lattice: StockLattice, y_chain: Chain, z_chain: Chain) -> np.ndarray:
        n = lattice.params.n_steps
        t = np.asarray(self.table, dtype=float)
        want = (y_chain.size(n), z_chain.size(n))
        if t.shape[1:] != want:
            raise InvalidParams(f"liability table has shape {t.shape}, trailing axes must be {want}")
        if t.shape[0] == lattice.size(n):
            return t
        if lattice.path_mode and t.shape[0] == n + 1:
            return t[lattice.node_index(n)]
        raise InvalidParams(f"liability table has {t.shape[0]} stock states, expected {lattice.size(n)}")


@dataclass(frozen=True)
class ParametricOrderFlow:
    """L_n = l_a * (1 + l_b * Y_n) * S_n."""

    l_a: float
    l_b: float

    def evaluate(self, lattice: StockLattice, y_chain: Chain, n: int) -> np.ndarray:
        return self.l_a * (1.0 + self.l_b * y_chain.states[n])[None, :] * lattice.values(n)[:, None]


@dataclass(frozen=True)
class TabulatedOrderFlow:
    """Order flow per time n = 0..N-1, each an array over (stock index, y-state)."""

    table: tuple

    def evaluate(self, lattice: StockLattice, y_chain: Chain, n: int) -> np.ndarray:
        if n >= len(self.table):
            raise InvalidParams(f"order-flow table has no entry for time {n}")
        t = np.asarray(self.table[n], dtype=float)
        if t.shape == (lattice.size(n), y_chain.size(n)):
            return t
        if lattice.path_mode and t.shape == (n + 1, y_chain.size(n)):
            return t[lattice.node_index(n)]
        raise InvalidParams(f"order-flow table at time {n} has shape {t.shape}")


@dataclass(frozen=True)
class PopulationSpec:
    label: str
    weight: float
    agent_types: tuple
    z_chain: Chain
    liability: Any
    xi_mean: float = 0.0

    @property
    def type_weights(self) -> np.ndarray:
        return np.array([t.weight for t in self.agent_types])

    @property
    def gammas(self) -> np.ndarray:
        return np.array([t.gamma for t in self.agent_types])

    @property
    def thetas(self) -> np.ndarray:
        """Array of shape (types, m)."""
        return np.array([t.theta_row for t in self.agent_types], dtype=float)


@dataclass(frozen=True)
class MarketSpec:
    lattice: LatticeParams
    y_chain: Chain
    populations: tuple
    order_flow: Any
    path_mode: bool = False
    path_cap: int = DEFAULT_PATH_CAP

    @property
    def m(self) -> int:
        return len(self.populations)

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.populations])

    def stock_lattice(self) -> StockLattice:
        return StockLattice(self.lattice, self.path_mode)


def interaction_matrix(spec: MarketSpec) -> np.ndarray:
    return np.array([pop.type_weights @ pop.thetas for pop in spec.populations])


@dataclass(frozen=True)
class RegimeClassification:
    kind: str  # "Regular", "SingularRank1" or "Unsolvable"
    singular_values: np.ndarray
    kernel_dim: int = 0
    inv: np.ndarray | None = None
    v: np.ndarray | None = None
    kappa: np.ndarray | None = None
    G: np.ndarray | None = None
    P: np.ndarray | None = None

    @property
    def simple_pole(self) -> bool:
        return self.kind == "SingularRank1" and self.P is not None


def classify_regime(theta, tol: float = DEFAULT_TOL) -> RegimeClassification:
    """Classify I - Theta as invertible, rank-one deficient, or worse."""
    if tol <= 0:
        raise InvalidParams("tol must be positive")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    m = theta.shape[0]
    a = np.eye(m) - theta
    ka = analyze_kernel(a, tol)
    if ka.kernel_dim == 0:
        return RegimeClassification("Regular", ka.singular_values, 0, inv=ka.pinv)
    if ka.kernel_dim > 1:
        return RegimeClassification("Unsolvable", ka.singular_values, ka.kernel_dim)
    v, kappa = ka.left, ka.right
    vk = float(v @ kappa)
    proj = np.eye(m) - np.outer(kappa, v) / vk if abs(vk) > tol else None
    return RegimeClassification("SingularRank1", ka.singular_values, 1, v=v, kappa=kappa, G=ka.pinv, P=proj)


# ---------------------------------------------------------------- config parsing

def _fail_missing(path, key):
    raise SchemaError(f"{path}.{key}" if path else key, "missing required field")


def _check_keys(doc, allowed: set, path: str):
    if not isinstance(doc, dict):
        raise SchemaError(path, f"expected a mapping, got {type(doc).__name__}")
    for k in doc:
        if k not in allowed:
            raise SchemaError(f"{path}.{k}" if path else str(k), "unknown field")


def _num(doc, key, path, default=None, required=True) -> float:
    if key not in doc:
        if required and default is None:
            _fail_missing(path, key)
        return default
    val = doc[key]
    where = f"{path}.{key}" if path else key
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise SchemaError(where, f"expected a number, got {val!r}")
    if not np.isfinite(val):
        raise InvariantError(where, "must be finite")
    return float(val)


def _int(doc, key, path) -> int:
    val = _num(doc, key, path)
    if val != int(val):
        raise InvariantError(f"{path}.{key}" if path else key, f"expected an integer, got {val}")
    return int(val)


def _parse_lattice(doc) -> LatticeParams:
    path = "lattice"
    _check_keys(doc, {"n_steps", "horizon_years", "rate", "sigma", "u_tilde", "d_tilde", "s0"}, path)
    n = _int(doc, "n_steps", path)
    if n < 1:
        raise InvariantError(f"{path}.n_steps", "must be at least 1")
    horizon = _num(doc, "horizon_years", path)
    if horizon <= 0:
        raise InvariantError(f"{path}.horizon_years", "must be positive")
    rate = _num(doc, "rate", path)
    s0 = _num(doc, "s0", path, default=1.0)
    if s0 <= 0:
        raise InvariantError(f"{path}.s0", "must be positive")
    has_sigma = "sigma" in doc
    has_factors = "u_tilde" in doc or "d_tilde" in doc
    if has_sigma == has_factors:
        raise SchemaError(path, "give either sigma or both u_tilde and d_tilde")
    try:
        if has_sigma:
            sigma = _num(doc, "sigma", path)
            if sigma <= 0:
                raise InvariantError(f"{path}.sigma", "must be positive")
            return LatticeParams.from_sigma(n, horizon, rate, sigma, s0)
        return LatticeParams(n, horizon, rate, _num(doc, "u_tilde", path), _num(doc, "d_tilde", path), s0)
    except InvalidParams as exc:
        raise InvariantError(path, str(exc)) from None


def _parse_chain(doc, path: str, kind: str, n_steps: int, dt: float) -> Chain:
    if not isinstance(doc, dict):
        raise SchemaError(path, "expected a mapping")
    if "states" in doc or "transitions" in doc:
        _check_keys(doc, {"states", "transitions", "initial"}, path)
        if "states" not in doc:
            _fail_missing(path, "states")
        if "transitions" not in doc:
            _fail_missing(path, "transitions")
        states, trans = doc["states"], doc["transitions"]
        try:
            trans_arr = [np.asarray(trans, dtype=float)]
            if trans_arr[0].ndim == 2:
                # one matrix reused at every step, with a fixed state list
                trans_list = trans_arr * n_steps
                states_list = [np.asarray(states, dtype=float)] * (n_steps + 1)
            else:
                trans_list = [np.asarray(t, dtype=float) for t in trans]
                states_list = [np.asarray(s, dtype=float) for s in states]
                if len(trans_list) < n_steps or len(states_list) < n_steps + 1:
                    raise InvariantError(path, f"chain covers fewer than {n_steps} steps")
                trans_list = trans_list[:n_steps]
                states_list = states_list[:n_steps + 1]
            initial = doc.get("initial")
            return Chain(tuple(states_list), tuple(trans_list), None if initial is None else np.asarray(initial, float))
        except (InvalidParams, ValueError) as exc:
            if isinstance(exc, InvariantError):
                raise
            raise InvariantError(path, str(exc)) from None
    if kind == "y":
        _check_keys(doc, {"y0", "sigma_y", "p_y"}, path)
        x0, sig, p = _num(doc, "y0", path), _num(doc, "sigma_y", path), _num(doc, "p_y", path)
        build = additive_binomial
        names = ("sigma_y", "p_y")
    else:
        _check_keys(doc, {"z0", "sigma_z", "p_z"}, path)
        x0, sig, p = _num(doc, "z0", path), _num(doc, "sigma_z", path), _num(doc, "p_z", path)
        build = multiplicative_binomial
        names = ("sigma_z", "p_z")
    if sig < 0:
        raise InvariantError(f"{path}.{names[0]}", "must be non-negative")
    if not 0 <= p <= 1:
        raise InvariantError(f"{path}.{names[1]}", "must lie in [0, 1]")
    return build(x0, sig, p, dt, n_steps)


def _theta_row(doc, path, m) -> tuple:
    if "theta_row" in doc and "theta" in doc:
        raise SchemaError(path, "give theta or theta_row, not both")
    if "theta" in doc:
        if m != 1:
            raise SchemaError(f"{path}.theta", "scalar theta only allowed with a single population")
        return (_num(doc, "theta", path),)
    if "theta_row" not in doc:
        _fail_missing(path, "theta_row")
    row = doc["theta_row"]
    if not isinstance(row, list) or len(row) != m:
        raise InvariantError(f"{path}.theta_row", f"expected a list of {m} numbers")
    for j, x in enumerate(row):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise SchemaError(f"{path}.theta_row[{j}]", f"expected a number, got {x!r}")
    return tuple(float(x) for x in row)


def _parse_population(doc, idx: int, m: int, lat: LatticeParams) -> PopulationSpec:
    path = f"populations[{idx}]"
    _check_keys(doc, {"label", "weight", "gamma_min", "gamma_max", "n_gamma", "theta", "theta_row",
                      "agent_types", "z_chain", "liability", "xi_mean"}, path)
    weight = _num(doc, "weight", path, default=1.0 if m == 1 else None)
    if not 0 < weight <= 1:
        raise InvariantError(f"{path}.weight", "must lie in (0, 1]")
    if "agent_types" in doc:
        if any(k in doc for k in ("gamma_min", "gamma_max", "n_gamma", "theta", "theta_row")):
            raise SchemaError(path, "agent_types cannot be combined with the gamma grid fields")
        raw = doc["agent_types"]
        if not isinstance(raw, list) or not raw:
            raise InvariantError(f"{path}.agent_types", "expected a non-empty list")
        types = []
        for j, t in enumerate(raw):
            tp = f"{path}.agent_types[{j}]"
            _check_keys(t, {"weight", "gamma", "theta", "theta_row"}, tp)
            w, g = _num(t, "weight", tp), _num(t, "gamma", tp)
            if w < 0:
                raise InvariantError(f"{tp}.weight", "must be non-negative")
            if g <= 0:
                raise InvariantError(f"{tp}.gamma", "must be positive")
            types.append(AgentType(w, g, _theta_row(t, tp, m)))
        total = sum(t.weight for t in types)
        if abs(total - 1.0) > WEIGHT_TOL:
            raise InvariantError(f"{path}.agent_types", f"type weights sum to {total!r}, not 1")
    else:
        g_lo, g_hi = _num(doc, "gamma_min", path), _num(doc, "gamma_max", path)
        if g_lo <= 0:
            raise InvariantError(f"{path}.gamma_min", "must be positive")
        if g_hi < g_lo:
            raise InvariantError(f"{path}.gamma_max", "must be at least gamma_min")
        n_g = _int(doc, "n_gamma", path) if "n_gamma" in doc else 0
        if n_g < 0:
            raise InvariantError(f"{path}.n_gamma", "must be non-negative")
        if n_g == 0 and g_hi != g_lo:
            raise InvariantError(f"{path}.n_gamma", "must be positive when gamma_max > gamma_min")
        row = _theta_row(doc, path, m)
        grid = [g_lo] if n_g == 0 else [g_lo + (g_hi - g_lo) * k / n_g for k in range(n_g + 1)]
        types = [AgentType(1.0 / len(grid), g, row) for g in grid]
    if "z_chain" not in doc:
        _fail_missing(path, "z_chain")
    z_chain = _parse_chain(doc["z_chain"], f"{path}.z_chain", "z", lat.n_steps, lat.dt)
    if "liability" not in doc:
        _fail_missing(path, "liability")
    liab = doc["liability"]
    lp = f"{path}.liability"
    if isinstance(liab, dict) and "table" in liab:
        _check_keys(liab, {"table"}, lp)
        liability = TabulatedLiability(np.asarray(liab["table"], dtype=float))
    else:
        _check_keys(liab, {"C", "f_a"}, lp)
        liability = ParametricLiability(_num(liab, "C", lp, default=0.0), _num(liab, "f_a", lp, default=0.0))
    label = str(doc.get("label", f"pop{idx + 1}"))
    return PopulationSpec(label, weight, tuple(types), z_chain, liability, _num(doc, "xi_mean", path, default=0.0))


TOP_KEYS = {"lattice", "y_chain", "populations", "order_flow", "path_mode", "path_cap"}


def spec_from_dict(doc: dict) -> MarketSpec:
    """Validate a parsed config mapping and build a MarketSpec."""
    _check_keys(doc, TOP_KEYS, "")
    for key in ("lattice", "y_chain", "populations", "order_flow"):
        if key not in doc:
            _fail_missing("", key)
    lat = _parse_lattice(doc["lattice"])
    y_chain = _parse_chain(doc["y_chain"], "y_chain", "y", lat.n_steps, lat.dt)
    pops_doc = doc["populations"]
    if not isinstance(pops_doc, list) or not pops_doc:
        raise InvariantError("populations", "need at least one population")
    m = len(pops_doc)
    pops = tuple(_parse_population(p, i, m, lat) for i, p in enumerate(pops_doc))
    total = sum(p.weight for p in pops)
    if abs(total - 1.0) > WEIGHT_TOL:
        raise InvariantError("populations", f"population weights sum to {total!r}, not 1")
    of = doc["order_flow"]
    if isinstance(of, dict) and "table" in of:
        _check_keys(of, {"table"}, "order_flow")
        flow = TabulatedOrderFlow(tuple(np.asarray(t, dtype=float) for t in of["table"]))
    else:
        _check_keys(of, {"l_a", "l_b"}, "order_flow")
        flow = ParametricOrderFlow(_num(of, "l_a", "order_flow", default=0.0), _num(of, "l_b", "order_flow", default=0.0))
    path_mode = doc.get("path_mode", False)
    if not isinstance(path_mode, bool):
        raise SchemaError("path_mode", "expected true or false")
    cap = _int(doc, "path_cap", "") if "path_cap" in doc else DEFAULT_PATH_CAP
    return MarketSpec(lat, y_chain, pops, flow, path_mode, cap)


def load_document(text: str | bytes) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SchemaError("", f"not a valid document: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("", "top level must be a mapping")
    return doc


def parse_config(document: str | bytes | dict) -> MarketSpec:
    """Parse YAML/JSON text (or an already loaded mapping) into a MarketSpec."""
    doc = document if isinstance(document, dict) else load_document(document)
    return spec_from_dict(doc)


def config_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def set_dotted(doc: dict, dotted: str, value) -> dict:
    """Return a copy of ``doc`` with ``a.b.0.c`` replaced by ``value``."""
    out = copy.deepcopy(doc)
    parts = dotted.split(".")
    node = out
    for i, part in enumerate(parts):
        last = i == len(parts) - 1
        where = ".".join(parts[:i + 1])
        if isinstance(node, list):
            try:
                k = int(part)
                node[k]
            except (ValueError, IndexError):
                raise SchemaError(where, "no such list element") from None
        elif isinstance(node, dict):
            k = part
            if not last and k not in node:
                raise SchemaError(where, "no such field")
        else:
            raise SchemaError(where, "cannot descend into a scalar")
        if last:
            node[k] = value
        else:
            node = node[k]
    return out


def parse_scalar(raw: str):
    """YAML scalar or list; plain exponent forms such as 1e-3 are read as floats."""
    try:
        val = yaml.safe_load(raw)
    except yaml.YAMLError:
        return raw
    if isinstance(val, str):
        try:
            return float(val)
        except ValueError:
            return val
    return val


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``path=value`` strings; values are read as YAML scalars or lists."""
    for item in overrides:
        if "=" not in item:
            raise SchemaError(item, "override must look like dotted.path=value")
        key, raw = item.split("=", 1)
        doc = set_dotted(doc, key.strip(), parse_scalar(raw))
    return doc


BUNDLED = ("table1", "table2", "table3", "table4")


def bundled_config_text(name: str) -> str:
    if name not in BUNDLED:
        raise SchemaError("", f"no bundled config named {name!r}")
    return resources.files("mfetree.configs").joinpath(f"{name}.yaml").read_text()


def read_config_bytes(source: str) -> bytes:
    """Read a config from a file path, or from a bundled name such as ``table1``."""
    if source in BUNDLED and not Path(source).exists():
        return bundled_config_text(source).encode()
    return Path(source).read_bytes()


def load_spec(source: str, overrides: list[str] = ()) -> MarketSpec:
    doc = apply_overrides(load_document(read_config_bytes(source)), list(overrides))
    return spec_from_dict(doc)
