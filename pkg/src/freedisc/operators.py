"""Discrete derivative operators, their pseudo-inverses and forward models.

The 1D pseudo-inverse is assembled from its closed form. In 2D the
pseudo-inverse and the projector onto the range of the gradient are applied
through the discrete cosine transform, which diagonalizes the Neumann
Laplacian ``D^T D``; dense matrices are only built on request for small
grids (tests, debugging).

Conventions: ``h = 1/n``; images are ``n x n`` arrays flattened row-major,
and the 2D gradient stacks the row-major flattenings of the ``(n-1, n)``
vertical differences ``u_x`` and the ``(n, n-1)`` horizontal differences
``u_y``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import fft
from scipy.sparse.linalg import LinearOperator

__all__ = [
    "DegenerateKernelError",
    "GradientOperator1D",
    "GradientOperator2D",
    "MaskOperator",
    "ForwardModel",
    "build_gradient_1d",
    "build_gradient_2d",
    "pinv_1d",
    "decompose_mean",
    "assemble_primal",
    "mask_operator",
    "mean_value_affine",
    "estimate_norm",
    "matrix_model",
    "derivative_model",
    "schwartz_residual",
]

# dense 2D assembly stores several (2n(n-1))^2 float64 matrices
DENSE_BUDGET_BYTES = 256 * 2**20


class DegenerateKernelError(ValueError):
    """The constant vector lies (numerically) in the kernel of K."""


def pinv_1d(n: int) -> np.ndarray:
    """Closed-form Moore-Penrose inverse of the ``(n-1) x n`` difference matrix."""
    rows = np.arange(1, n + 1)[:, None]
    cols = np.arange(1, n)[None, :]
    m = np.where(rows <= cols, -(n - cols), cols).astype(float)
    return m / float(n * n)


@dataclass(frozen=True, eq=False)
class GradientOperator1D:
    n: int
    h: float
    dense_forward: np.ndarray = field(repr=False)
    dense_pinv: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.n

    @property
    def grad_size(self) -> int:
        return self.n - 1

    def forward(self, u):
        return np.diff(np.asarray(u, dtype=float)) / self.h

    def pinv(self, z):
        return self.dense_pinv @ np.asarray(z, dtype=float)

    def pinv_adjoint(self, y):
        return self.dense_pinv.T @ np.asarray(y, dtype=float)


def build_gradient_1d(n: int) -> GradientOperator1D:
    """Forward difference ``D_h`` with ``h = 1/n`` and its closed-form pseudo-inverse."""
    if int(n) != n or n < 2:
        raise ValueError(f"grid size must be an integer >= 2, got {n!r}")
    n = int(n)
    fwd = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    fwd[idx, idx] = -float(n)
    fwd[idx, idx + 1] = float(n)
    pinv = pinv_1d(n)
    fwd.setflags(write=False)
    pinv.setflags(write=False)
    return GradientOperator1D(n, 1.0 / n, fwd, pinv)


@dataclass(frozen=True, eq=False)
class GradientOperator2D:
    """Gradient on an ``n x n`` grid with matrix-free pseudo-inverse and projector."""

    n: int
    h: float

    @property
    def size(self) -> int:
        return self.n * self.n

    @property
    def grad_size(self) -> int:
        return 2 * self.n * (self.n - 1)

    @cached_property
    def _eigenvalues(self) -> np.ndarray:
        k = np.arange(self.n)
        mu = 4.0 * np.sin(np.pi * k / (2 * self.n)) ** 2
        lam = (mu[:, None] + mu[None, :]) / self.h**2
        inv = np.zeros_like(lam)
        inv[lam > 0] = 1.0 / lam[lam > 0]
        return inv

    def split(self, z):
        """Return ``(u_x, u_y)`` as ``(n-1, n)`` and ``(n, n-1)`` arrays."""
        n = self.n
        z = np.asarray(z, dtype=float)
        k = (n - 1) * n
        return z[:k].reshape(n - 1, n), z[k:].reshape(n, n - 1)

    def forward(self, u):
        img = np.asarray(u, dtype=float).reshape(self.n, self.n)
        ux = np.diff(img, axis=0) / self.h
        uy = np.diff(img, axis=1) / self.h
        return np.concatenate([ux.ravel(), uy.ravel()])

    def forward_adjoint(self, z):
        ux, uy = self.split(z)
        out = np.zeros((self.n, self.n))
        out[:-1, :] -= ux
        out[1:, :] += ux
        out[:, :-1] -= uy
        out[:, 1:] += uy
        return (out / self.h).ravel()

    def _laplacian_pinv(self, v):
        img = np.asarray(v, dtype=float).reshape(self.n, self.n)
        coef = fft.dctn(img, type=2, norm="ortho")
        coef *= self._eigenvalues
        return fft.idctn(coef, type=2, norm="ortho").ravel()

    def pinv(self, z):
        """Minimum-norm least-squares solution of ``D u = z`` (zero-mean image)."""
        return self._laplacian_pinv(self.forward_adjoint(z))

    def pinv_adjoint(self, y):
        return self.forward(self._laplacian_pinv(y))

    def project(self, z):
        """Orthogonal projection onto ``ker Q = range(D)``."""
        return self.forward(self.pinv(z))

    def constraint(self, z):
        """``Q z = z - D D^+ z``; zero exactly on discrete gradients."""
        z = np.asarray(z, dtype=float)
        return z - self.project(z)

    @property
    def pinv_norm(self) -> float:
        """Exact spectral norm of the pseudo-inverse."""
        return self.h / (2.0 * math.sin(math.pi / (2 * self.n)))

    def _check_budget(self):
        need = 8 * 4 * self.grad_size**2
        if need > DENSE_BUDGET_BYTES:
            raise MemoryError(
                f"dense 2D assembly for n={self.n} needs ~{need / 2**20:.0f} MiB"
            )

    @cached_property
    def dense_forward(self) -> np.ndarray:
        self._check_budget()
        out = np.column_stack([self.forward(e) for e in np.eye(self.size)])
        out.setflags(write=False)
        return out

    @cached_property
    def dense_pinv(self) -> np.ndarray:
        """Pseudo-inverse from a least-squares (SVD) factorization."""
        out = np.linalg.pinv(self.dense_forward, rcond=1e-12)
        out.setflags(write=False)
        return out

    @cached_property
    def dense_projector(self) -> np.ndarray:
        out = self.dense_forward @ self.dense_pinv
        out.setflags(write=False)
        return out

    @cached_property
    def dense_constraint(self) -> np.ndarray:
        out = np.eye(self.grad_size) - self.dense_projector
        out.setflags(write=False)
        return out


def build_gradient_2d(n: int) -> GradientOperator2D:
    if int(n) != n or n < 2:
        raise ValueError(f"grid size must be an integer >= 2, got {n!r}")
    return GradientOperator2D(int(n), 1.0 / int(n))


def schwartz_residual(z, op: GradientOperator2D) -> np.ndarray:
    """Mixed-path mismatch ``(u_y)_{i,j} + (u_x)_{i,j+1} - (u_y)_{i+1,j} - (u_x)_{i,j}``."""
    ux, uy = op.split(z)
    return uy[:-1, :] + ux[:, 1:] - uy[1:, :] - ux[:, :-1]


def decompose_mean(u, op):
    """Split ``u`` into its derivative ``D u`` and its mean value."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != op.size:
        raise ValueError(f"expected {op.size} samples, got {u.size}")
    return op.forward(u), float(u.mean())


def assemble_primal(z, c: float, op) -> np.ndarray:
    """Return ``D^+ z + c``."""
    z = np.asarray(z, dtype=float).ravel()
    if z.size != op.grad_size:
        raise ValueError(f"expected {op.grad_size} derivative entries, got {z.size}")
    return op.pinv(z) + c


@dataclass(frozen=True, eq=False)
class MaskOperator:
    """Diagonal 0/1 sampling operator ``u -> chi_D * u``."""

    mask: np.ndarray

    @property
    def shape(self):
        return (self.mask.size, self.mask.size)

    def matvec(self, x):
        return np.where(self.mask, np.asarray(x, dtype=float), 0.0)

    rmatvec = matvec

    def __matmul__(self, x):
        return self.matvec(x)

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.mask.astype(float))


def mask_operator(mask) -> MaskOperator:
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size == 0 or not mask.any():
        raise DegenerateKernelError("mask must observe at least one sample")
    mask.setflags(write=False)
    return MaskOperator(mask)


def estimate_norm(T, iters: int = 100, seed: int = 0) -> float:
    """Power-method estimate of the spectral norm (never exceeds the true norm)."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if isinstance(T, np.ndarray):
        T = np.atleast_2d(T)
        matvec, rmatvec, ncols = (lambda x: T @ x), (lambda y: T.T @ y), T.shape[1]
    else:
        matvec, rmatvec, ncols = T.matvec, T.rmatvec, T.shape[1]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(ncols)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = matvec(x)
        est = max(est, float(np.linalg.norm(y)))
        x = rmatvec(y)
        nx = np.linalg.norm(x)
        if nx == 0:
            return est
        x /= nx
    return max(est, float(np.linalg.norm(matvec(x))))


@dataclass(frozen=True, eq=False)
class ForwardModel:
    """Linear model ``T`` with data ``g``.

    For derivative models (``gradient`` set) ``T = (I - Pi) K D^+`` where ``Pi``
    projects onto ``span(K 1)``; the mean value is then recovered by
    ``mean_value`` and the primal signal by ``primal``.
    """

    op: LinearOperator
    data: np.ndarray
    norm_bound: float
    scale: float = 1.0
    gradient: object = None
    kernel: object = None
    observed: np.ndarray | None = None
    dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.op.shape

    def apply(self, x):
        return self.op.matvec(x)

    def adjoint(self, y):
        return self.op.rmatvec(y)

    def _k(self, v):
        K = self.kernel
        if K is None:
            return v
        if isinstance(K, MaskOperator):
            return K.matvec(v)
        return K @ v

    @cached_property
    def _k_ones(self) -> np.ndarray:
        k1 = self._k(np.ones(self.gradient.size))
        if np.linalg.norm(k1) < 1e-14:
            raise DegenerateKernelError("constant vector lies in ker K")
        return k1

    def mean_value(self, z) -> float:
        if self.gradient is None:
            raise ValueError("mean value is only defined for derivative models")
        return mean_value_affine(z, self)

    def primal(self, z) -> np.ndarray:
        return assemble_primal(z, self.mean_value(z), self.gradient)

    def rescaled(self, target: float = 0.99) -> "ForwardModel":
        """Scale ``T`` and ``g`` by ``s <= 1`` so that ``||s T|| <= target``.

        Multiplies the fidelity term of the functional by ``s**2``.
        """
        if self.norm_bound < target or self.norm_bound == 0:
            return self
        s = target / self.norm_bound
        op = LinearOperator(
            self.op.shape,
            matvec=lambda x: s * self.op.matvec(x),
            rmatvec=lambda y: s * self.op.rmatvec(y),
            dtype=float,
        )
        dense = None if self.dense is None else s * self.dense
        return ForwardModel(op, s * self.data, s * self.norm_bound, self.scale * s,
                            self.gradient, self.kernel,
                            None if self.observed is None else s * self.observed, dense)


def mean_value_affine(z, model: ForwardModel) -> float:
    """Best constant offset for fixed derivatives:
    ``<K1, g - K D^+ z> / ||K1||^2``."""
    k1 = model._k_ones
    resid = model.observed - model._k(model.gradient.pinv(z))
    return float(k1 @ resid / (k1 @ k1))


def matrix_model(T, g, check_norm: bool = True) -> ForwardModel:
    """Wrap a dense matrix and data vector."""
    T = np.array(np.atleast_2d(T), dtype=float)
    g = np.array(g, dtype=float).ravel()
    if T.shape[0] != g.size:
        raise ValueError(f"T has {T.shape[0]} rows but g has {g.size} entries")
    if not (np.isfinite(T).all() and np.isfinite(g).all()):
        raise ValueError("non-finite entries in T or g")
    norm = float(np.linalg.norm(T, 2)) if T.size else 0.0
    T.setflags(write=False)
    g.setflags(write=False)
    op = LinearOperator(T.shape, matvec=lambda x: T @ x, rmatvec=lambda y: T.T @ y,
                        dtype=float)
    return ForwardModel(op, g, norm, dense=T)


def derivative_model(gradient, observed, kernel=None) -> ForwardModel:
    """Model on derivatives ``z = D u`` for data ``observed ~ K u``.

    ``kernel`` is ``None`` (identity), a :class:`MaskOperator`, or a dense
    matrix (1D only). The constant offset is eliminated in closed form, so
    ``T = (I - Pi) K D^+`` and the data become ``(I - Pi) g``.
    """
    g = np.array(observed, dtype=float).ravel()
    if not np.isfinite(g).all():
        raise ValueError("observed data contain non-finite values")
    if isinstance(kernel, np.ndarray) and kernel.dtype == bool:
        kernel = mask_operator(kernel)
    if kernel is not None and not isinstance(kernel, MaskOperator):
        kernel = np.array(np.atleast_2d(kernel), dtype=float)
        if kernel.shape[1] != gradient.size:
            raise ValueError("kernel column count must match the signal size")
        if not isinstance(gradient, GradientOperator1D):
            raise ValueError("dense kernels are only supported in 1D")
    m = gradient.size if kernel is None else kernel.shape[0]
    if g.size != m:
        raise ValueError(f"expected {m} observations, got {g.size}")
    if isinstance(kernel, MaskOperator):
        # unobserved samples carry no information
        g = kernel.matvec(g)

    proto = ForwardModel(None, g, 0.0, gradient=gradient, kernel=kernel, observed=g)
    k1 = proto._k_ones
    k1n = k1 / np.linalg.norm(k1)

    def remove_offset(y):
        return y - (k1n @ y) * k1n

    data = remove_offset(g)

    if isinstance(gradient, GradientOperator1D):
        Kd = gradient.dense_pinv if kernel is None else np.column_stack(
            [proto._k(c) for c in gradient.dense_pinv.T]
        )
        T = Kd - np.outer(k1n, k1n @ Kd)
        model = matrix_model(T, data)
        return ForwardModel(model.op, model.data, model.norm_bound, gradient=gradient,
                            kernel=kernel, observed=g, dense=model.dense)

    def matvec(z):
        return remove_offset(proto._k(gradient.pinv(z)))

    def rmatvec(y):
        return gradient.pinv_adjoint(proto._k(remove_offset(np.asarray(y, dtype=float))))

    op = LinearOperator((m, gradient.grad_size), matvec=matvec, rmatvec=rmatvec, dtype=float)
    # ||(I - Pi) K D^+|| <= ||K|| ||D^+||, and ||K|| = 1 for masks and the identity
    return ForwardModel(op, data, gradient.pinv_norm, gradient=gradient, kernel=kernel,
                        observed=g)
