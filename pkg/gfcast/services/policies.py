import itertools
import numpy as np
from typing import Callable, Optional
from ..exceptions import PolicyError, PolicySpecError
from ..models import ColumnGrid, ExposurePolicy

NaturalLaw = Callable[[], dict[tuple[int, ...], float]]


def thresholds(policy: ExposurePolicy, width: int) -> list[float]:
    """s* broadcast over the window (scalar) or taken per position (list)."""
    value = policy.threshold
    if isinstance(value, list):
        if len(value) != width:
            raise PolicySpecError(f"threshold has {len(value)} entries, window has {width}")
        return [float(v) for v in value]
    return [float(value)] * width


def point_mass_codes(policy: ExposurePolicy, grid: ColumnGrid, width: int) -> tuple[int, ...]:
    try:
        return tuple(grid.code_of(v) for v in thresholds(policy, width))
    except ValueError as e:
        raise PolicySpecError(f"point-mass threshold is not on the exposure grid: {e}")


def vector_law(policy: ExposurePolicy, grid: ColumnGrid, width: int,
               natural: Optional[NaturalLaw] = None) -> dict[tuple[int, ...], float]:
    """Resolve a static policy into a law over exposure window codes.

    Args:
        policy (ExposurePolicy): Any kind except dynamic-conditional.
        grid (ColumnGrid): Exposure grid.
        width (int): Window length K+1.
        natural (Optional[Callable]): Natural window law of the stratum, needed by
            'natural' and 'truncate-below'.

    Returns:
        dict[tuple[int, ...], float]: Positive masses summing to 1."""
    values = np.asarray(grid.numeric_values())
    match policy.kind:
        case "point-mass":
            law = {point_mass_codes(policy, grid, width): 1.0}
        case "natural":
            law = dict(natural())
        case "truncate-below":
            limits = thresholds(policy, width)
            kept = {v: p for v, p in natural().items()
                    if all(values[c] < limit for c, limit in zip(v, limits))}
            mass = sum(kept.values())
            if mass <= 0:
                raise PolicyError("truncate-below: the natural law has no mass below the threshold",
                                  threshold=limits)
            law = {v: p / mass for v, p in kept.items()}
        case "explicit-table":
            if policy.table is not None:
                if len(policy.table) != grid.size:
                    raise PolicySpecError(f"per-time table has {len(policy.table)} entries, grid has {grid.size}")
                law = {}
                for v in itertools.product(range(grid.size), repeat=width):
                    law[v] = float(np.prod([policy.table[c] for c in v]))
            else:
                law = {}
                for vector in policy.vectors:
                    if len(vector.values) != width:
                        raise PolicySpecError(f"explicit vector {vector.values} has length {len(vector.values)}, "
                                              f"window has {width}")
                    try:
                        codes = tuple(grid.code_of(v) for v in vector.values)
                    except ValueError as e:
                        raise PolicySpecError(f"explicit vector off the exposure grid: {e}")
                    law[codes] = law.get(codes, 0.0) + vector.prob
        case "mixture":
            law = {}
            for weight, component in zip(policy.weights, policy.components):
                for v, p in vector_law(component, grid, width, natural).items():
                    law[v] = law.get(v, 0.0) + weight * p
        case _:
            raise PolicyError(f"{policy.kind} policies have no fixed window law")
    return {v: p for v, p in law.items() if p > 0}


def is_dynamic(policy: ExposurePolicy) -> bool:
    if policy.kind == "mixture":
        return any(is_dynamic(c) for c in policy.components)
    return policy.kind == "dynamic-conditional"


class DynamicRule:
    """First-match evaluation of a dynamic-conditional policy.

    Lagged codes are passed newest first: s and y from lag 1, x from lag 0."""

    def __init__(self, policy: ExposurePolicy, n_exposure: int):
        if policy.kind != "dynamic-conditional":
            raise PolicySpecError(f"{policy.kind} is not a dynamic policy")
        self.policy = policy
        self.n_exposure = n_exposure
        laws = [rule.law for rule in policy.rules]
        if isinstance(policy.otherwise, list):
            laws.append(policy.otherwise)
        for law in laws:
            if len(law) != n_exposure:
                raise PolicySpecError(f"policy law has {len(law)} entries, exposure grid has {n_exposure}")
        limits = {"s": policy.lags.ss, "x": policy.lags.xs, "y": policy.lags.ys}
        for rule in policy.rules:
            for var, allowed in rule.when.items():
                if len(allowed) > limits[var]:
                    raise PolicySpecError(f"rule on '{var}' uses {len(allowed)} lags, policy allows {limits[var]}")

    def law(self, s_lags, x_lags, y_lags) -> Optional[np.ndarray]:
        """Law over the exposure grid, None when the natural course applies."""
        history = {"s": list(s_lags), "x": list(x_lags), "y": list(y_lags)}
        for rule in self.policy.rules:
            if all(j < len(history[var]) and history[var][j] in codes
                   for var, allowed in rule.when.items() for j, codes in enumerate(allowed)):
                return np.asarray(rule.law, dtype=float)
        if self.policy.otherwise == "natural":
            return None
        return np.asarray(self.policy.otherwise, dtype=float)

    @property
    def depths(self) -> dict[str, int]:
        """Deepest lag each variable's conditions read."""
        depths = {"s": 0, "x": 0, "y": 0}
        for rule in self.policy.rules:
            for var, allowed in rule.when.items():
                depths[var] = max(depths[var], len(allowed))
        return depths

    @property
    def first_order(self) -> bool:
        return max(self.depths.values()) <= 1

    def rows(self, x_hist: np.ndarray, y_hist: np.ndarray, s_hist: np.ndarray, natural_rows: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on (n, depth) histories, newest first: (n, n_exposure) laws."""
        out = np.array(natural_rows, dtype=float, copy=True)
        for k in range(len(out)):
            law = self.law([int(v) for v in s_hist[k]], [int(v) for v in x_hist[k]], [int(v) for v in y_hist[k]])
            if law is not None:
                out[k] = law
        return out

    def key(self) -> str:
        return self.policy.model_dump_json()


def support_codes(policy: ExposurePolicy) -> set[int]:
    """Exposure codes a dynamic policy may assign outside the natural course."""
    codes = set()
    laws = [rule.law for rule in policy.rules]
    if isinstance(policy.otherwise, list):
        laws.append(policy.otherwise)
    for law in laws:
        codes |= {c for c, p in enumerate(law) if p > 0}
    return codes
