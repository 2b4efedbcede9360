"""Small numerical kernel: linear solves, MVN sampling, differentiation, RNG.

Every stochastic or numerically delicate primitive used elsewhere in the
package routes through this module, so tolerances and reproducibility
conventions live in exactly one place.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import NonFinite, NotPSD, SingularMatrix

PIVOT_RTOL = 1e-12
EIGEN_FLOOR = -1e-8


def solve_linear_system(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a @ x = b`` by pivoted LU factorization.

    Parameters
    ----------
    a : ndarray, shape (n, n)
        Coefficient matrix.
    b : ndarray, shape (n,) or (n, k)
        Right-hand side vector or matrix.

    Returns
    -------
    ndarray
        Solution with the same trailing shape as ``b``.

    Raises
    ------
    SingularMatrix
        If any pivot of the factorization falls below
        ``1e-12 * max(abs(a))``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"rhs length {b.shape[0]} != matrix order {a.shape[0]}")
    with warnings.catch_warnings():
        # the pivot check below is the singularity contract
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    threshold = PIVOT_RTOL * max(np.abs(a).max(), 1e-300)
    pivots = np.abs(np.diag(lu))
    if pivots.min() < threshold:
        raise SingularMatrix(
            f"pivot {pivots.min():.3e} below threshold {threshold:.3e}"
        )
    return scipy.linalg.lu_solve((lu, piv), b)


def mvn_sample(
    mean: np.ndarray,
    cov: np.ndarray,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Draw from a multivariate normal via a symmetric eigenvalue square root.

    The covariance is symmetrized before factorization. Eigenvalues in
    ``[-1e-8, 0)`` are treated as round-off and clipped to zero; anything
    below that is a genuine violation and raises.

    Parameters
    ----------
    mean : ndarray, shape (d,)
    cov : ndarray, shape (d, d)
    rng : numpy.random.Generator
    size : int, optional
        Number of draws. ``None`` returns a single draw of shape (d,).

    Returns
    -------
    ndarray, shape (d,) or (size, d)

    Raises
    ------
    NotPSD
        If a symmetrized eigenvalue is below ``-1e-8``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    factor = mvn_factor(cov)
    n = 1 if size is None else int(size)
    z = rng.standard_normal((n, mean.shape[0]))
    draws = mean + z @ factor.T
    return draws[0] if size is None else draws


def mvn_factor(cov: np.ndarray) -> np.ndarray:
    """Symmetric square root of ``cov`` used by :func:`mvn_sample`.

    Exposed separately so simulation code can factor once and reuse.
    """
    cov = np.asarray(cov, dtype=float)
    sym = 0.5 * (cov + cov.T)
    eigval, eigvec = np.linalg.eigh(sym)
    if eigval.min() < EIGEN_FLOOR:
        raise NotPSD(f"eigenvalue {eigval.min():.3e} below {EIGEN_FLOOR:.0e}")
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def numerical_jacobian(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``f`` at ``x``.

    Coordinate ``i`` is perturbed by ``h * (1 + |x_i|)``.

    Parameters
    ----------
    f : callable
        Maps a 1-d array of length n to a 1-d array of length m.
    x : ndarray, shape (n,)
    h : float
        Base relative step.

    Returns
    -------
    ndarray, shape (m, n)

    Raises
    ------
    NonFinite
        If any evaluation of ``f`` produces NaN or infinity.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.shape[0]):
        step = h * (1.0 + abs(x[i]))
        up, down = x.copy(), x.copy()
        up[i] += step
        down[i] -= step
        f_up = np.asarray(f(up), dtype=float)
        f_down = np.asarray(f(down), dtype=float)
        if not (np.all(np.isfinite(f_up)) and np.all(np.isfinite(f_down))):
            raise NonFinite(f"non-finite evaluation while perturbing coordinate {i}")
        cols.append((f_up - f_down) / (2.0 * step))
    return np.column_stack(cols)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Identical keys reproduce identical draws on any platform; distinct
    stream ids give statistically independent streams without any shared
    state, which is what makes replicate- and subject-level parallelism
    safe. Each stream is single-consumer: call :meth:`generator` once and
    draw from the returned generator in a fixed order.
    """

    seed: int
    stream_id: int

    def __post_init__(self) -> None:
        if self.seed < 0 or self.stream_id < 0:
            raise ValueError("seed and stream_id must be non-negative")

    def generator(self) -> np.random.Generator:
        key = np.array(
            [self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF],
            dtype=np.uint64,
        )
        return np.random.Generator(np.random.Philox(key=key))
