"""Local empirical losses and the proximal subproblems solved at each agent.

Each agent owns a :class:`LossModel` wrapping its shard.  The algorithms only
ever need four things from it: the loss value, its gradient, the exact
anchored prox

    argmin_x  f(x) + (tau/2) * sum_m ||x - a_m||^2

and a smoothness constant for the linearized variant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg
from scipy.special import expit

LEAST_SQUARES = "least-squares"
LOGISTIC = "logistic"
KINDS = (LEAST_SQUARES, LOGISTIC)
SOLVERS = ("auto", "direct", "iterative")

# dense Cholesky below this dimension, conjugate gradient above
DIRECT_SOLVE_MAX_DIM = 512


class SolverError(RuntimeError):
    """An inner solver failed to reach its tolerance."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


@dataclass
class DataShard:
    """Rows ``features`` (dense array or CSR matrix) with ``labels``, owned by one agent."""

    features: np.ndarray | scipy.sparse.csr_matrix
    labels: np.ndarray
    owner: int = 0
    row_ids: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        if not np.all(np.isfinite(self.labels)):
            raise ValueError("labels must be finite")

    @property
    def n_rows(self):
        return self.features.shape[0]

    @property
    def n_features(self):
        return self.features.shape[1]


@dataclass
class LossModel:
    """Convex local loss ``f_i`` on one shard.

    ``kind`` is ``"least-squares"`` (mean of 1/2 (a.x - b)^2) or ``"logistic"``
    (mean of log(1 + exp(-b a.x)), labels in {-1, +1}).  An optional ridge
    term ``l2_reg/2 ||x||^2`` is added to both.

    ``solver`` picks the least-squares prox: ``"direct"`` (Cholesky, exact),
    ``"iterative"`` (conjugate gradient from zero, stopped at relative
    residual ``inner_tol``) or ``"auto"`` (direct up to
    ``DIRECT_SOLVE_MAX_DIM`` features).  Logistic proxes always use Newton.
    """

    kind: str
    shard: DataShard
    l2_reg: float = 0.0
    solver: str = "auto"
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be nonnegative")
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.kind == LOGISTIC and not np.all(np.isin(self.shard.labels, (-1.0, 1.0))):
            raise ValueError("logistic shards need labels in {-1, +1}")

    # -- basic quantities -------------------------------------------------

    @property
    def dim(self):
        return self.shard.n_features

    @property
    def _d(self):
        # an empty shard is the zero function; avoid 0/0
        return max(self.shard.n_rows, 1)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {x.shape}")
        return x

    def loss(self, x):
        x = self._check(x)
        A, b = self.shard.features, self.shard.labels
        margin = A @ x
        if self.kind == LEAST_SQUARES:
            r = margin - b
            val = 0.5 * float(r @ r) / self._d
        else:
            val = float(np.sum(np.logaddexp(0.0, -b * margin))) / self._d
        if self.l2_reg:
            val += 0.5 * self.l2_reg * float(x @ x)
        return val

    def grad(self, x):
        x = self._check(x)
        A, b = self.shard.features, self.shard.labels
        margin = A @ x
        if self.kind == LEAST_SQUARES:
            w = margin - b
        else:
            # d/dm log(1 + exp(-b m)) = -b * sigmoid(-b m)
            w = -b * expit(-b * margin)
        g = np.asarray(A.T @ w).ravel() / self._d
        if self.l2_reg:
            g = g + self.l2_reg * x
        return g

    def gram(self):
        """A^T A / d as a dense matrix (cached)."""
        if "gram" not in self._cache:
            A = self.shard.features
            G = A.T @ A
            if scipy.sparse.issparse(G):
                G = G.toarray()
            self._cache["gram"] = np.asarray(G, dtype=float) / self._d
        return self._cache["gram"]

    def _hessian(self, x):
        A, b = self.shard.features, self.shard.labels
        if self.kind == LEAST_SQUARES:
            H = self.gram()
        else:
            s = expit(b * (A @ x))
            w = s * (1.0 - s) / self._d
            if scipy.sparse.issparse(A):
                H = (A.T @ A.multiply(w[:, None])).toarray()
            else:
                H = A.T @ (A * w[:, None])
        if self.l2_reg:
            H = H + self.l2_reg * np.eye(self.dim)
        return H

    # -- proximal subproblems --------------------------------------------

    def prox(self, anchors, tau, inner_tol=1e-10, x0=None, max_iter=100):
        """argmin_x f(x) + (tau/2) sum_m ||x - anchors[m]||^2."""
        if tau <= 0:
            raise ValueError("tau must be positive")
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        if anchors.shape[0] == 0 or anchors.shape[1] != self.dim:
            raise ValueError(f"anchors must be a nonempty (M, {self.dim}) array")
        M = anchors.shape[0]
        anchor_sum = anchors.sum(axis=0)
        if self.kind == LEAST_SQUARES:
            return self._prox_quadratic(tau * anchor_sum, tau * M, inner_tol)
        return self._prox_newton(tau * anchor_sum, tau * M, inner_tol, x0, max_iter)

    def _prox_quadratic(self, pull, weight, inner_tol):
        # (A^T A / d + (l2 + tau M) I) x = A^T b / d + tau sum_m a_m
        A, b = self.shard.features, self.shard.labels
        if "aTb" not in self._cache:
            self._cache["aTb"] = np.asarray(A.T @ b).ravel() / self._d
        rhs = self._cache["aTb"] + pull
        shift = self.l2_reg + weight
        direct = self.solver == "direct" or (self.solver == "auto" and self.dim <= DIRECT_SOLVE_MAX_DIM)
        if direct:
            fkey = ("chol", shift)
            if fkey not in self._cache:
                self._cache[fkey] = scipy.linalg.cho_factor(self.gram() + shift * np.eye(self.dim))
            return scipy.linalg.cho_solve(self._cache[fkey], rhs)

        def matvec(v):
            return np.asarray(A.T @ (A @ v)).ravel() / self._d + shift * v

        op = scipy.sparse.linalg.LinearOperator((self.dim, self.dim), matvec=matvec)
        x, info = scipy.sparse.linalg.cg(op, rhs, rtol=inner_tol, atol=0.0, maxiter=10 * self.dim)
        if info != 0:
            raise SolverError("conjugate gradient did not converge", np.linalg.norm(matvec(x) - rhs))
        return x

    def _prox_newton(self, pull, weight, inner_tol, x0, max_iter):
        center = pull / weight  # sub-objective is f(x) + weight/2 ||x - center||^2 + const
        x = center.copy() if x0 is None else np.array(x0, dtype=float)

        def sub(v):
            d = v - center
            return self.loss(v) + 0.5 * weight * float(d @ d)

        for _ in range(max_iter):
            g = self.grad(x) + weight * (x - center)
            gnorm = np.linalg.norm(g)
            if gnorm <= inner_tol:
                return x
            H = self._hessian(x) + weight * np.eye(self.dim)
            step = scipy.linalg.solve(H, g, assume_a="pos")
            slope = float(g @ step)  # squared Newton decrement
            if slope < 0.25:
                # quadratic-convergence region: full steps, no line search
                # (Armijo cannot see decreases at rounding level)
                x = x - step
                continue
            t, f0 = 1.0, sub(x)
            while t > 1e-12:
                cand = x - t * step
                if sub(cand) <= f0 - 1e-4 * t * slope:
                    break
                t *= 0.5
            else:
                cand = x - t * step
            x = cand
        g = self.grad(x) + weight * (x - center)
        gnorm = np.linalg.norm(g)
        if gnorm <= inner_tol:
            return x
        raise SolverError(f"Newton prox did not converge in {max_iter} iterations", gnorm)

    def grad_prox_step(self, x_prev, anchors, tau, rho):
        """Closed-form minimizer of the linearized sub-objective

            <grad f(x_prev), x - x_prev> + (tau/2) sum_m ||x - a_m||^2 + (rho/2) ||x - x_prev||^2
        """
        x_prev = self._check(x_prev)
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        if anchors.shape[1] != self.dim:
            raise ValueError(f"anchors must have {self.dim} columns")
        if tau <= 0 or rho < 0:
            raise ValueError("need tau > 0 and rho >= 0")
        M = anchors.shape[0]
        return (tau * anchors.sum(axis=0) + rho * x_prev - self.grad(x_prev)) / (tau * M + rho)

    # -- smoothness -------------------------------------------------------

    def smoothness(self):
        """Lipschitz constant of the gradient."""
        if "L" not in self._cache:
            A = self.shard.features
            if self.dim <= DIRECT_SOLVE_MAX_DIM:
                lam = float(np.linalg.eigvalsh(self.gram())[-1]) if self.dim else 0.0
            else:
                lam = power_iteration(lambda v: np.asarray(A.T @ (A @ v)).ravel(), self.dim) / self._d
            lam = max(lam, 0.0)
            if self.kind == LOGISTIC:
                lam /= 4.0
            self._cache["L"] = lam + self.l2_reg
        return self._cache["L"]


def power_iteration(matvec, dim, tol=1e-8, max_iter=10_000, seed=0):
    """Largest eigenvalue of a PSD operator given only its action ``matvec``."""
    if dim == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(new - lam) <= tol * max(abs(new), 1e-300):
            return new
        lam = new
    warnings.warn(f"power iteration stagnated after {max_iter} steps; returning {lam:.6g}", RuntimeWarning)
    return lam
