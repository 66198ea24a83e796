import logging
from typing import Callable, Iterable, TypeVar
from joblib import Parallel, delayed
from ..config import resolve_threads

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class Runner:
    """Runs independent tasks on a joblib thread pool and returns results in input order.

    Each task derives its own RNG stream from its index, so results do not depend on the
    worker count or on scheduling.

    Attributes:
        threads (int): Worker count (flag, then GFC_THREADS, then 1)."""

    def __init__(self, threads: int | None = None):
        self.threads = resolve_threads(threads)

    def map(self, label: str, fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
        """Apply fn to every item.

        Args:
            label (str): Stage name used in the log.
            fn (Callable): Task function.
            items (Iterable): Task inputs.

        Returns:
            list: fn(item) for every item, in input order."""
        items = list(items)
        logger.info(f"Running {label}: {len(items)} tasks on {self.threads} thread(s).")
        if self.threads == 1 or len(items) < 2:
            results = [fn(item) for item in items]
        else:
            results = Parallel(n_jobs=self.threads, prefer="threads")(delayed(fn)(item) for item in items)
        logger.info(f"{label} finished.")
        return list(results)
