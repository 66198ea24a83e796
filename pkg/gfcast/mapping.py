import numpy as np
from abc import ABC, abstractmethod
from typing import Optional
from .models import MapperSpec, WindowSpec
from .exceptions import MapperError
from .utils.utils import binary_vectors


class TreatmentMapper(ABC):
    """Abstract base class for the h(.) rules mapping a treatment window to D.

    Windows are oldest-first: position 0 is time t-B-K, position K is time t-B, so the
    entry for time t-L sits at position K-(L-B)."""
    kind = ""

    def __init__(self, spec: WindowSpec, L: Optional[int] = None, Q: Optional[int] = None):
        self.B = spec.B
        self.K = spec.K
        self.L = spec.L if L is None else L
        self.Q = spec.Q if Q is None else Q
        self._validate()
        self.position = self.K - (self.L - self.B)

    def _validate(self):
        if not self.B <= self.L <= self.B + self.K:
            raise MapperError(f"{self.kind}: L={self.L} violates B <= L <= B+K", L=self.L, B=self.B, K=self.K)

    @property
    def width(self) -> int:
        return self.K + 1

    @abstractmethod
    def indicator(self, windows: np.ndarray) -> np.ndarray:
        """Vectorized h(.) over the rows of an (n, K+1) window matrix."""
        pass

    @abstractmethod
    def canonical_treated(self) -> tuple[int, ...]:
        """Intervention pattern standing for D = 1."""
        pass

    def canonical_control(self) -> tuple[int, ...]:
        return (0,) * self.width

    def canonical(self, d: int) -> tuple[int, ...]:
        return self.canonical_treated() if d else self.canonical_control()

    def map(self, z_window) -> int:
        window = np.asarray(z_window, dtype=np.int64)
        if window.shape != (self.width,):
            raise MapperError(f"window has length {window.size}, expected K+1={self.width}")
        if np.any((window != 0) & (window != 1)):
            raise MapperError("treatment window entries must be 0 or 1")
        return int(self.indicator(window[None, :])[0])

    def control_vectors(self) -> list[tuple[int, ...]]:
        """Every window with h = 0, in lexicographic order."""
        vectors = binary_vectors(self.width)
        d = self.indicator(np.asarray(vectors, dtype=np.int64).reshape(len(vectors), self.width))
        return [v for v, flag in zip(vectors, d) if flag == 0]

    def treated_vectors(self) -> list[tuple[int, ...]]:
        controls = set(self.control_vectors())
        return [v for v in binary_vectors(self.width) if v not in controls]

    def describe(self) -> str:
        return f"{self.kind}(B={self.B}, K={self.K}, L={self.L}, Q={self.Q})"


class OneDayMapper(TreatmentMapper):
    kind = "one-day"

    def indicator(self, windows):
        return windows[:, self.position].astype(np.int64)

    def canonical_treated(self):
        return tuple(int(k == self.position) for k in range(self.width))


class AnyDayMapper(TreatmentMapper):
    kind = "any-day"

    def indicator(self, windows):
        return (windows.sum(axis=1) >= 1).astype(np.int64)

    def canonical_treated(self):
        return tuple(int(k == self.position) for k in range(self.width))


class InitiationMapper(TreatmentMapper):
    """Treatment starts at t-L after max(K-L, 0) untreated days."""
    kind = "initiation"

    def indicator(self, windows):
        p = self.position
        quiet = max(self.K - self.L, 0)
        before = windows[:, p - quiet:p].sum(axis=1) if quiet else 0
        return ((windows[:, p] == 1) & (before == 0)).astype(np.int64)

    def canonical_treated(self):
        return tuple(int(k >= self.position) for k in range(self.width))


class DurationMapper(TreatmentMapper):
    """Q consecutive ones from t-L followed by zeros up to t-B."""
    kind = "duration-Q"

    def _validate(self):
        super()._validate()
        if self.Q < 1 or not self.B + self.Q <= self.L:
            raise MapperError(f"{self.kind}: Q={self.Q}, L={self.L} violate B+Q <= L <= B+K",
                              L=self.L, B=self.B, K=self.K, Q=self.Q)

    def indicator(self, windows):
        p = self.position
        ones = windows[:, p:p + self.Q].sum(axis=1) == self.Q
        zeros = windows[:, p + self.Q:].sum(axis=1) == 0
        return (ones & zeros).astype(np.int64)

    def canonical_treated(self):
        return tuple(int(self.position <= k < self.position + self.Q) for k in range(self.width))


class IntermittentMapper(DurationMapper):
    """Exactly Q treated days anywhere in [t-L, t-B]."""
    kind = "intermittent-Q"

    def indicator(self, windows):
        return (windows[:, self.position:].sum(axis=1) == self.Q).astype(np.int64)


MAPPERS = {
    mapper.kind: mapper
    for mapper in (OneDayMapper, AnyDayMapper, InitiationMapper, DurationMapper, IntermittentMapper)
}


def build_mapper(mapper_spec: MapperSpec, spec: WindowSpec) -> TreatmentMapper:
    """Instantiate the declared mapper against a window spec.

    Args:
        mapper_spec (MapperSpec): Kind and optional L/Q overrides.
        spec (WindowSpec): Lag geometry the mapper is validated against.

    Returns:
        TreatmentMapper: Ready-to-use h(.) rule."""
    if mapper_spec.kind not in MAPPERS:
        raise MapperError(f"unknown mapper kind '{mapper_spec.kind}'")
    return MAPPERS[mapper_spec.kind](spec, L=mapper_spec.L, Q=mapper_spec.Q)
