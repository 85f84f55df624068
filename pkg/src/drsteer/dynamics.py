"""Time-varying linear stochastic dynamics in stacked block form.

The state history, input history and noise history of a discrete-time
linear system are concatenated into single vectors so that the whole
trajectory becomes one affine map::

    X = A x0 + B U + D W

with block matrices ``A`` ((N+1)n x n), ``B`` ((N+1)n x Nm) and
``D`` ((N+1)n x Nr).  Mean and covariance of the trajectory under an
affine noise-feedback policy then have closed forms, which is what the
steering program optimizes over.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "NotPsdError",
    "LinearSystemSpec",
    "MomentPair",
    "ConcatenatedSystem",
    "time_invariant_spec",
    "build_concatenation",
    "propagate_mean",
    "propagate_covariance",
    "psd_sqrt",
]

#: eigenvalues above this (negative) threshold are treated as zero
PSD_EIG_TOL = 1e-10
#: symmetry tolerance for matrices fed to psd_sqrt
SYM_TOL = 1e-10


class DimensionError(ValueError):
    """Matrix or vector shapes are inconsistent; message names the offender."""


class NotPsdError(ValueError):
    """A matrix required to be positive semidefinite is not."""


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionError(f"{name}: expected a 2-d matrix, got shape {M.shape}")
    return M


def psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    The input is symmetrized first, eigenvalues in ``[-1e-10, 0)`` are
    clamped to zero so that rank-deficient covariances factor cleanly.

    Returns S with ``S @ S == M`` up to 1e-8 relative Frobenius error.

    Raises
    ------
    NotPsdError
        if the input has an eigenvalue below ``-1e-10`` (relative to the
        largest magnitude eigenvalue for scaled inputs).
    NotPsdError / DimensionError
        if the input is not square or not symmetric within 1e-10.
    """
    M = _as_matrix(M, "psd_sqrt input")
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"psd_sqrt input must be square, got {M.shape}")
    scale = max(1.0, float(np.abs(M).max()) if M.size else 1.0)
    if np.abs(M - M.T).max(initial=0.0) > SYM_TOL * scale:
        raise NotPsdError("psd_sqrt input is not symmetric within 1e-10")
    Ms = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(Ms)
    if w.size and w.min() < -PSD_EIG_TOL * scale:
        raise NotPsdError(
            f"matrix is not PSD: min eigenvalue {w.min():.3e} below -1e-10"
        )
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class MomentPair:
    """First two moments of a state distribution (all that is assumed known)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = _as_matrix(self.cov, "MomentPair.cov")
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(
                f"MomentPair: mean has length {mean.size} but cov is {cov.shape}"
            )
        psd_sqrt(cov)  # raises NotPsdError if invalid
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class LinearSystemSpec:
    """Per-step matrices of ``x_{k+1} = A_k x_k + B_k u_k + D_k w_k``.

    ``noise_cov`` is the (time-invariant) second moment of the zero-mean
    disturbance w_k.  Only the first two moments of the disturbance are
    assumed known; no distributional family is attached here.
    """

    A: tuple  # N matrices, n x n
    B: tuple  # N matrices, n x m
    D: tuple  # N matrices, n x r
    noise_cov: np.ndarray  # r x r

    def __post_init__(self):
        A = tuple(_as_matrix(M, f"A[{k}]") for k, M in enumerate(self.A))
        B = tuple(_as_matrix(M, f"B[{k}]") for k, M in enumerate(self.B))
        D = tuple(_as_matrix(M, f"D[{k}]") for k, M in enumerate(self.D))
        if not A:
            raise DimensionError("horizon must be at least 1 step")
        if not (len(A) == len(B) == len(D)):
            raise DimensionError(
                f"matrix lists must share length N: got {len(A)}, {len(B)}, {len(D)}"
            )
        n = A[0].shape[0]
        for k, M in enumerate(A):
            if M.shape != (n, n):
                raise DimensionError(f"A[{k}] has shape {M.shape}, expected ({n}, {n})")
        m = B[0].shape[1]
        for k, M in enumerate(B):
            if M.shape != (n, m):
                raise DimensionError(f"B[{k}] has shape {M.shape}, expected ({n}, {m})")
        r = D[0].shape[1]
        for k, M in enumerate(D):
            if M.shape != (n, r):
                raise DimensionError(f"D[{k}] has shape {M.shape}, expected ({n}, {r})")
        noise_cov = _as_matrix(self.noise_cov, "noise_cov")
        if noise_cov.shape != (r, r):
            raise DimensionError(
                f"noise_cov has shape {noise_cov.shape}, expected ({r}, {r})"
            )
        psd_sqrt(noise_cov)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "noise_cov", noise_cov)

    @property
    def horizon(self) -> int:
        return len(self.A)

    @property
    def state_dim(self) -> int:
        return self.A[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.B[0].shape[1]

    @property
    def noise_dim(self) -> int:
        return self.D[0].shape[1]

    def step(self, k: int, x: np.ndarray, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """One step of the raw recursion (reference implementation for tests)."""
        return self.A[k] @ x + self.B[k] @ u + self.D[k] @ w


def time_invariant_spec(A, B, D, noise_cov, horizon: int) -> LinearSystemSpec:
    """Replicate one (A, B, D) triple over ``horizon`` steps."""
    if horizon < 1:
        raise DimensionError("horizon must be at least 1 step")
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    D = _as_matrix(D, "D")
    return LinearSystemSpec((A,) * horizon, (B,) * horizon, (D,) * horizon, noise_cov)


@dataclass(frozen=True)
class ConcatenatedSystem:
    """Stacked trajectory form of a LinearSystemSpec plus an initial moment pair.

    Fields
    ------
    A, B, D : block maps from x0, stacked inputs and stacked noise to the
        stacked state trajectory (steps 0..N included).
    sigma_w_full : block-diagonal stacked noise covariance (Nr x Nr).
    sigma_y : covariance of the uncontrolled stochastic part
        ``A (x0 - mu0) + D W`` of the trajectory, i.e.
        ``A cov0 A' + D sigma_w_full D'``.
    sigma_y_half : its symmetric PSD square root.
    """

    spec: LinearSystemSpec
    init: MomentPair
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    sigma_w_full: np.ndarray
    sigma_y: np.ndarray
    sigma_y_half: np.ndarray
    _selectors: dict = field(repr=False, default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def state_dim(self) -> int:
        return self.spec.state_dim

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def traj_dim(self) -> int:
        """(N+1) * n, the length of the stacked state trajectory."""
        return (self.spec.horizon + 1) * self.spec.state_dim

    def selector(self, k: int) -> np.ndarray:
        """n x (N+1)n matrix picking the state at step k out of the stack."""
        if not 0 <= k <= self.horizon:
            raise DimensionError(f"step index {k} outside [0, {self.horizon}]")
        if k not in self._selectors:
            n = self.state_dim
            E = np.zeros((n, self.traj_dim))
            E[:, k * n:(k + 1) * n] = np.eye(n)
            self._selectors[k] = E
        return self._selectors[k]

    def state_block(self, stacked: np.ndarray, k: int) -> np.ndarray:
        """Slice step k out of a stacked trajectory vector (cheaper than selector)."""
        n = self.state_dim
        return stacked[k * n:(k + 1) * n]


def build_concatenation(spec: LinearSystemSpec, init: MomentPair) -> ConcatenatedSystem:
    """Stack the step recursion into block-matrix form and precompute moments.

    The returned blocks satisfy ``X = A x0 + B U + D W`` exactly, where U
    and W are the stacked inputs and disturbances, and
    ``sigma_y = A cov0 A' + D sigma_w_full D'``.

    Raises
    ------
    DimensionError
        if ``init`` does not match the spec's state dimension.
    """
    n, m, r, N = spec.state_dim, spec.input_dim, spec.noise_dim, spec.horizon
    if init.dim != n:
        raise DimensionError(
            f"initial moments have dimension {init.dim}, system state is {n}"
        )
    nn1 = (N + 1) * n
    A = np.zeros((nn1, n))
    B = np.zeros((nn1, N * m))
    D = np.zeros((nn1, N * r))
    A[:n] = np.eye(n)
    for k in range(1, N + 1):
        Ak = spec.A[k - 1]
        A[k * n:(k + 1) * n] = Ak @ A[(k - 1) * n:k * n]
        B[k * n:(k + 1) * n] = Ak @ B[(k - 1) * n:k * n]
        B[k * n:(k + 1) * n, (k - 1) * m:k * m] = spec.B[k - 1]
        D[k * n:(k + 1) * n] = Ak @ D[(k - 1) * n:k * n]
        D[k * n:(k + 1) * n, (k - 1) * r:k * r] = spec.D[k - 1]
    sigma_w_full = np.kron(np.eye(N), spec.noise_cov)
    sigma_y = A @ init.cov @ A.T + D @ sigma_w_full @ D.T
    sigma_y = 0.5 * (sigma_y + sigma_y.T)
    return ConcatenatedSystem(
        spec=spec,
        init=init,
        A=A,
        B=B,
        D=D,
        sigma_w_full=sigma_w_full,
        sigma_y=sigma_y,
        sigma_y_half=psd_sqrt(sigma_y),
    )


def propagate_mean(cs: ConcatenatedSystem, mu0: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Mean trajectory ``A mu0 + B V`` under the affine policy with feedforward V."""
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    V = np.atleast_1d(np.asarray(V, dtype=float))
    if mu0.size != cs.state_dim:
        raise DimensionError(f"mu0 has length {mu0.size}, expected {cs.state_dim}")
    if V.size != cs.horizon * cs.input_dim:
        raise DimensionError(
            f"V has length {V.size}, expected {cs.horizon * cs.input_dim}"
        )
    return cs.A @ mu0 + cs.B @ V


def propagate_covariance(cs: ConcatenatedSystem, K: np.ndarray) -> np.ndarray:
    """Trajectory covariance ``(I + B K) sigma_y (I + B K)'`` for feedback gain K."""
    K = _as_matrix(K, "K")
    expected = (cs.horizon * cs.input_dim, cs.traj_dim)
    if K.shape != expected:
        raise DimensionError(f"K has shape {K.shape}, expected {expected}")
    closed = np.eye(cs.traj_dim) + cs.B @ K
    cov = closed @ cs.sigma_y @ closed.T
    return 0.5 * (cov + cov.T)
