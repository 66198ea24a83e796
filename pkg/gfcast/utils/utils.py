import hashlib
import itertools
import numpy as np

# stream purposes
SIMULATE = 1
ORACLE = 2
IMPUTE = 3
GFORMULA = 4


def stream(seed: int, purpose: int, *ids: int) -> np.random.Generator:
    """Return an independent counter-based generator for (seed, purpose, *ids).

    Args:
        seed (int): Run seed.
        purpose (int): One of SIMULATE, ORACLE, IMPUTE, GFORMULA.
        ids (int): Unit, block, draw or key identifiers.

    Returns:
        np.random.Generator: Philox generator whose output does not depend on how many
            other streams exist or in which order they are consumed."""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(purpose, *[int(i) for i in ids]))
    return np.random.Generator(np.random.Philox(sequence))


def key_id(key) -> int:
    """Stable 63-bit identifier of a hashable key, independent of PYTHONHASHSEED."""
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def sample_rows(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of one category per row.

    Args:
        probs (np.ndarray): (n, k) row-stochastic matrix.
        u (np.ndarray): (n,) uniforms in [0, 1).

    Returns:
        np.ndarray: (n,) category codes."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    codes = (u[:, None] >= cdf).sum(axis=1)
    # last bin absorbs rounding of the cumulative sum
    return np.minimum(codes, probs.shape[1] - 1)


def joint_codes(codes: np.ndarray, sizes: tuple[int, ...]) -> np.ndarray:
    """Row-major joint category of per-covariate codes stacked on the last axis."""
    return np.ravel_multi_index(tuple(np.moveaxis(codes, -1, 0)), sizes)


def split_codes(joint: np.ndarray, sizes: tuple[int, ...]) -> np.ndarray:
    return np.stack(np.unravel_index(joint, sizes), axis=-1)


def binary_vectors(length: int) -> list[tuple[int, ...]]:
    return list(itertools.product((0, 1), repeat=length))


def grid_vectors(size: int, length: int) -> list[tuple[int, ...]]:
    return list(itertools.product(range(size), repeat=length))


def one_hot(code: int, size: int) -> np.ndarray:
    row = np.zeros(size)
    row[code] = 1.0
    return row


def format_vector(values) -> str:
    return "|".join(f"{v:g}" if isinstance(v, float) else str(v) for v in values)
