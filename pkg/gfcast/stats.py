import logging
import numpy as np
from typing import Optional
from scipy.stats import chi2_contingency
from .models import WindowSpec

logger = logging.getLogger(__name__)


def _group(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique key rows and the inverse map (1-D), in sorted key order."""
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    return unique, inverse.reshape(-1)


class ConditionalTable:
    """Frequency table of a categorical child given a tuple of parent codes.

    Attributes:
        name (str): Table name used in diagnostics.
        parents (list): Parent labels, in key order.
        n_categories (int): Child grid size.
        min_cell (int): Rows needed before a cell's law is usable.
        counts (dict[tuple, np.ndarray]): Child counts per observed parent key."""

    def __init__(self, name: str, parents: list, n_categories: int, min_cell: int):
        self.name = name
        self.parents = list(parents)
        self.n_categories = n_categories
        self.min_cell = min_cell
        self.counts: dict[tuple[int, ...], np.ndarray] = {}

    @classmethod
    def fit(cls, name: str, parents: list, parent_rows: np.ndarray, child: np.ndarray,
            n_categories: int, min_cell: int) -> "ConditionalTable":
        table = cls(name, parents, n_categories, min_cell)
        n = len(child)
        if n == 0:
            return table
        if len(parents) == 0:
            table.counts[()] = np.bincount(child, minlength=n_categories).astype(float)
            return table
        unique, inverse = _group(parent_rows)
        matrix = np.zeros((len(unique), n_categories))
        np.add.at(matrix, (inverse, child), 1.0)
        table.counts = {tuple(int(v) for v in row): matrix[k] for k, row in enumerate(unique)}
        return table

    def count(self, key) -> int:
        row = self.counts.get(tuple(key))
        return 0 if row is None else int(row.sum())

    def estimable(self, key) -> bool:
        return self.count(key) >= self.min_cell

    def law(self, key) -> Optional[np.ndarray]:
        """Renormalized child law of a cell, None when the cell is below min_cell."""
        row = self.counts.get(tuple(key))
        if row is None or row.sum() < self.min_cell:
            return None
        return row / row.sum()

    def flagged_cells(self) -> list[tuple[int, ...]]:
        return [key for key, row in self.counts.items() if row.sum() < self.min_cell]

    @property
    def all_flagged(self) -> bool:
        """True when no cell is usable, e.g. when the lags exceed the panel depth."""
        return all(row.sum() < self.min_cell for row in self.counts.values())

    def __len__(self) -> int:
        return len(self.counts)

    def __repr__(self) -> str:
        return f"ConditionalTable({self.name}, parents={self.parents}, cells={len(self)})"


class OutcomeTable:
    """Sums, sums of squares and counts of a numeric outcome per key.

    Rows are accumulated in input order, so two tables built over the same rows in the
    same order hold bit-identical sums."""

    def __init__(self, keys: np.ndarray, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        self._index: dict[tuple[int, ...], int] = {}
        if len(values) == 0:
            self.sums = self.squares = self.counts = np.zeros(0)
            return
        keys = np.asarray(keys).reshape(len(values), -1)
        if keys.shape[1] == 0:
            inverse = np.zeros(len(values), dtype=np.int64)
            unique = np.zeros((1, 0), dtype=np.int64)
        else:
            unique, inverse = _group(keys)
        self.sums = np.zeros(len(unique))
        self.squares = np.zeros(len(unique))
        np.add.at(self.sums, inverse, values)
        np.add.at(self.squares, inverse, values ** 2)
        self.counts = np.bincount(inverse, minlength=len(unique)).astype(np.int64)
        self._index = {tuple(int(v) for v in row): k for k, row in enumerate(unique)}

    def count(self, key) -> int:
        k = self._index.get(tuple(key))
        return 0 if k is None else int(self.counts[k])

    def mean(self, key) -> Optional[float]:
        k = self._index.get(tuple(key))
        if k is None:
            return None
        return float(self.sums[k] / self.counts[k])

    def variance(self, key) -> float:
        """Unbiased within-cell variance (0 for single-row cells)."""
        k = self._index.get(tuple(key))
        if k is None or self.counts[k] < 2:
            return 0.0
        n = self.counts[k]
        mean = self.sums[k] / n
        return float(max(self.squares[k] - n * mean ** 2, 0.0) / (n - 1))

    def keys(self) -> list[tuple[int, ...]]:
        return list(self._index)


class TransitionTables:
    """One-step laws of the covariate state, the outcome and the action.

    Attributes:
        covariate (ConditionalTable): x_l given lagged x, a and y.
        outcome (ConditionalTable): y_l given current/lagged x and a, lagged y.
        action (ConditionalTable): a_l given current/lagged x, lagged y and a.
        action_variable (str): 'z' or 's'."""

    def __init__(self, covariate: ConditionalTable, outcome: ConditionalTable,
                 action: ConditionalTable, action_variable: str):
        self.covariate = covariate
        self.outcome = outcome
        self.action = action
        self.action_variable = action_variable

    def __iter__(self):
        return iter((self.covariate, self.outcome, self.action))


def transition_parents(spec: WindowSpec) -> dict[str, list[tuple[str, int]]]:
    """Parent (variable, lag) lists of the three one-step laws; lag 0 is the current time."""
    return {
        "x": [("x", k) for k in range(1, spec.L_xx + 1)]
             + [("a", k) for k in range(1, spec.L_z + 1)]
             + [("y", k) for k in range(1, spec.L_yx + 1)],
        "y": [("x", k) for k in range(0, spec.L_xy)]
             + [("a", k) for k in range(0, spec.L_z)]
             + [("y", k) for k in range(1, spec.L_yy + 1)],
        "a": [("x", k) for k in range(0, spec.L_xs)]
             + [("y", k) for k in range(1, spec.L_ys + 1)]
             + [("a", k) for k in range(1, spec.L_ss + 1)],
    }


def _design(columns: dict[str, np.ndarray], parents: list[tuple[str, int]], child: str):
    horizon = columns[child].shape[1]
    start = max([lag for _, lag in parents], default=0) + 1
    times = np.arange(start, horizon + 1)
    n = columns[child].shape[0] * len(times)
    if len(times) == 0:
        return np.zeros((0, len(parents)), dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows = [columns[var][:, times - 1 - lag].reshape(-1) for var, lag in parents]
    design = np.stack(rows, axis=1) if rows else np.zeros((n, 0), dtype=np.int64)
    return design, columns[child][:, times - 1].reshape(-1)


def fit_conditional_tables(panel, spec: WindowSpec, min_cell: int, action: str = "z") -> TransitionTables:
    """Fit the one-step transition tables on the observed window.

    Args:
        panel (Panel): Observed panel.
        spec (WindowSpec): Supplies the lag orders.
        min_cell (int): Cells with fewer rows are flagged unestimable.
        action (str): Intervened variable, 'z' or 's'.

    Returns:
        TransitionTables: Frequency tables keyed by parent codes in parent order."""
    logger.info(f"Fitting transition tables (action={action}).")
    columns = {"x": panel.x_joint, "a": panel.action(action), "y": panel.y}
    sizes = {"x": panel.schema.n_covariate_states,
             "a": 2 if action == "z" else panel.schema.exposure.size,
             "y": panel.schema.outcome.size}
    tables = {}
    for child, parents in transition_parents(spec).items():
        design, target = _design(columns, parents, child)
        tables[child] = ConditionalTable.fit(
            {"x": "covariate", "y": "outcome", "a": "action"}[child],
            parents, design, target, sizes[child], min_cell)
    flagged = sum(len(t.flagged_cells()) for t in tables.values())
    logger.info(f"Transition tables fitted, {flagged} cells flagged below min_cell={min_cell}.")
    return TransitionTables(tables["x"], tables["y"], tables["a"], action)


def dependence_strata(table: ConditionalTable, variable: str, alpha: float = 1e-3) -> list[tuple]:
    """Strata of the other parents in which the child depends on the given parent variable.

    Runs a chi-square test of independence between the child and the lags of `variable`
    within each stratum of the remaining parents.

    Returns:
        list[tuple]: Keys of the remaining parents where p < alpha."""
    positions = [k for k, (var, _) in enumerate(table.parents) if var == variable]
    if not positions:
        return []
    rest = [k for k in range(len(table.parents)) if k not in positions]
    groups: dict[tuple, list[np.ndarray]] = {}
    for key, row in table.counts.items():
        groups.setdefault(tuple(key[k] for k in rest), []).append(row)
    flagged = []
    for stratum, rows in groups.items():
        matrix = np.asarray(rows)
        matrix = matrix[matrix.sum(axis=1) > 0][:, matrix.sum(axis=0) > 0]
        if matrix.shape[0] < 2 or matrix.shape[1] < 2:
            continue
        _, p_value, _, _ = chi2_contingency(matrix)
        if p_value < alpha:
            flagged.append(stratum)
    return flagged


def tv_distance(p: dict, q: dict) -> float:
    """Total-variation distance between two finite laws given as {outcome: mass}."""
    support = set(p) | set(q)
    return 0.5 * float(sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in support))


def ordered_mean(values) -> float:
    """Mean with a fixed summation order (numpy pairwise summation over the input order)."""
    array = np.asarray(list(values), dtype=float)
    return float(array.sum() / len(array))


def ordered_se(values) -> float:
    """Standard error of the mean, std(ddof=1) / sqrt(n); 0 for fewer than two values."""
    array = np.asarray(list(values), dtype=float)
    if len(array) < 2:
        return 0.0
    return float(array.std(ddof=1) / np.sqrt(len(array)))
