"""Gaussian process regression with an ARD squared-exponential kernel.

Noise-free interpolation with a zero prior mean. Observations are absorbed
exactly up to a diagonal jitter added for numerical stability; the jitter
starts at ``1e-8 * signal_variance`` and escalates by factors of ten up to
``1e-2 * signal_variance`` before factorization is abandoned.

The model is a frozen dataclass holding the Cholesky factor of the jittered
kernel matrix, so posterior queries and fantasy conditioning are cheap and
deterministic. Hyperparameters are fit by multistart L-BFGS-B on the log
marginal likelihood in log-parameter space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

JITTER_INITIAL = 1e-8
JITTER_MAX = 1e-2
SIGMA_FLOOR = 1e-10
DUPLICATE_TOL = 1e-8


class FactorizationError(RuntimeError):
    """Kernel matrix could not be factorized even at the maximum jitter."""


@dataclass(frozen=True)
class KernelParams:
    """ARD squared-exponential kernel hyperparameters.

    k(x, z) = signal_variance * exp(-0.5 * sum_j ((x_j - z_j) / lengthscales_j)^2)
    """

    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not np.isfinite(self.signal_variance) or self.signal_variance <= 0:
            raise ValueError("signal_variance must be finite and positive")
        if ls.ndim != 1 or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ValueError("lengthscales must be a 1-d array of finite positives")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


def kernel_matrix(params: KernelParams, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kernel cross-matrix k(A, B), shape (len(A), len(B))."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if A.shape[1] != params.dim or B.shape[1] != params.dim:
        raise ValueError("point dimension does not match kernel lengthscales")
    diff = (A[:, None, :] - B[None, :, :]) / params.lengthscales
    sq = np.einsum("mnd,mnd->mn", diff, diff)
    return params.signal_variance * np.exp(-0.5 * sq)


def kernel_grad_first(params: KernelParams, A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Derivative of k(a_i, b_j) with respect to a_i, shape (m, n, d)."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    return kernel_grad_first_from(params, A, B, kernel_matrix(params, A, B))


def kernel_grad_first_from(
    params: KernelParams, A: np.ndarray, B: np.ndarray, K: np.ndarray
) -> np.ndarray:
    """Same as kernel_grad_first but reusing an already computed k(A, B)."""
    diff = np.atleast_2d(A)[:, None, :] - np.atleast_2d(B)[None, :, :]
    return -K[:, :, None] * diff / params.lengthscales**2


def _min_pairwise_distance(X: np.ndarray) -> float:
    if X.shape[0] < 2:
        return np.inf
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=-1)
    iu = np.triu_indices(X.shape[0], k=1)
    return float(np.sqrt(np.min(d2[iu])))


@dataclass(frozen=True)
class GPModel:
    """A fitted noise-free GP. Posterior queries condition on (train_inputs, train_targets)."""

    kernel: KernelParams
    train_inputs: np.ndarray
    train_targets: np.ndarray
    chol: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    jitter: float

    @classmethod
    def fit(cls, inputs: np.ndarray, targets: np.ndarray, params: KernelParams) -> "GPModel":
        """Factorize the kernel matrix, escalating jitter on failure."""
        X = np.atleast_2d(np.asarray(inputs, dtype=float))
        y = np.asarray(targets, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise ValueError("inputs and targets disagree on the number of points")
        if X.shape[0] == 0:
            empty = np.zeros((0, 0))
            return cls(params, X.reshape(0, params.dim), y, empty, np.zeros(0), 0.0)
        if X.shape[1] != params.dim:
            raise ValueError("input dimension does not match kernel lengthscales")
        K = kernel_matrix(params, X, X)
        n = X.shape[0]
        jit = JITTER_INITIAL * params.signal_variance
        jit_cap = JITTER_MAX * params.signal_variance
        while True:
            try:
                L = linalg.cholesky(K + jit * np.eye(n), lower=True)
                break
            except linalg.LinAlgError:
                jit *= 10.0
                if jit > jit_cap * (1 + 1e-12):
                    raise FactorizationError(
                        f"kernel matrix not factorizable at jitter {jit_cap:g}"
                    ) from None
        w = linalg.cho_solve((L, True), y)
        return cls(params, X, y, L, w, jit)

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.kernel.dim

    def posterior(self, x: np.ndarray) -> tuple[float, float]:
        """Posterior mean and variance at a single point."""
        m, v = self.posterior_many(np.atleast_2d(x))
        return float(m[0]), float(v[0])

    def posterior_many(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means and variances at rows of X. Variances clipped at zero.

        Noise-free observations interpolate exactly, so the variance is snapped
        to zero at points coinciding with a training input; the jitter used for
        factorization stability would otherwise leak in at that scale.
        """
        X = np.atleast_2d(X)
        if self.n_train == 0:
            return np.zeros(X.shape[0]), np.full(X.shape[0], self.kernel.signal_variance)
        Kxd = kernel_matrix(self.kernel, X, self.train_inputs)
        mean = Kxd @ self.weights
        V = linalg.solve_triangular(self.chol, Kxd.T, lower=True)
        var = self.kernel.signal_variance - np.einsum("ij,ij->j", V, V)
        d2 = np.sum((X[:, None, :] - self.train_inputs[None, :, :]) ** 2, axis=-1)
        var[np.min(d2, axis=1) <= DUPLICATE_TOL**2] = 0.0
        return mean, np.maximum(var, 0.0)

    def posterior_joint(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Joint posterior mean vector and covariance matrix over rows of X."""
        X = np.atleast_2d(X)
        if _min_pairwise_distance(X) < DUPLICATE_TOL:
            warnings.warn("posterior_joint called with near-duplicate points", RuntimeWarning)
        Kxx = kernel_matrix(self.kernel, X, X)
        if self.n_train == 0:
            return np.zeros(X.shape[0]), Kxx
        Kxd = kernel_matrix(self.kernel, X, self.train_inputs)
        mean = Kxd @ self.weights
        V = linalg.solve_triangular(self.chol, Kxd.T, lower=True)
        cov = Kxx - V.T @ V
        return mean, 0.5 * (cov + cov.T)

    def condition_on_fantasy(self, X1: np.ndarray, y1: np.ndarray) -> "GPModel":
        """Model conditioned on hypothetical observations (X1, y1); kernel unchanged."""
        X1 = np.atleast_2d(X1)
        y1 = np.asarray(y1, dtype=float).ravel()
        stacked = np.vstack([self.train_inputs, X1]) if self.n_train else X1
        if _min_pairwise_distance(stacked) < DUPLICATE_TOL:
            warnings.warn("fantasy points overlap existing data", RuntimeWarning)
        targets = np.concatenate([self.train_targets, y1])
        return GPModel.fit(stacked, targets, self.kernel)

    def posterior_grads(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
        """Gradients of the posterior mean and standard deviation at a point.

        Returns (dmean, dsigma, degenerate). When the posterior standard
        deviation falls below a floor the sigma gradient is returned as zeros
        with degenerate=True.
        """
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.n_train == 0:
            return np.zeros(self.dim), np.zeros(self.dim), False
        xr = x.reshape(1, -1)
        J = kernel_grad_first(self.kernel, xr, self.train_inputs)[0]  # (n, d)
        dmean = J.T @ self.weights
        kxd = kernel_matrix(self.kernel, xr, self.train_inputs)[0]
        u = linalg.cho_solve((self.chol, True), kxd)
        var = self.kernel.signal_variance - kxd @ u
        sigma = np.sqrt(max(var, 0.0))
        near = np.sqrt(np.min(np.sum((self.train_inputs - x) ** 2, axis=-1)))
        if sigma <= SIGMA_FLOOR or near < 1e-6:
            return dmean, np.zeros(self.dim), True
        dvar = -2.0 * (J.T @ u)
        return dmean, dvar / (2.0 * sigma), False

    def fantasy_posterior_grads(
        self, X1: np.ndarray, y1: np.ndarray, x2: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, bool]:
        """Gradients with respect to the fantasy batch X1 of the one-step-ahead
        posterior mean and standard deviation at a fixed point x2.

        The fantasy targets y1 are held fixed. Returns (dmean, dsigma,
        degenerate), each of shape (q, d): row i is the derivative with respect
        to batch point i. Degenerate when x2 is within DUPLICATE_TOL**0.5 of a
        data or batch point, or the one-step variance hits the floor; then
        dsigma is zeroed.
        """
        X1 = np.atleast_2d(X1)
        y1 = np.asarray(y1, dtype=float).ravel()
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        q, d = X1.shape
        everything = np.vstack([self.train_inputs, X1]) if self.n_train else X1
        near = np.sqrt(np.min(np.sum((everything - x2) ** 2, axis=-1)))
        mu0_X1, C0 = self.posterior_joint(X1)
        jit = JITTER_INITIAL * self.kernel.signal_variance
        C = C0 + jit * np.eye(q)
        x2r = x2.reshape(1, -1)
        _, cross = self._posterior_cross(X1, x2r)
        c = cross[:, 0]  # Sigma0(X1, x2), shape (q,)
        u = linalg.solve(C, y1 - mu0_X1, assume_a="pos")
        v = linalg.solve(C, c, assume_a="pos")
        _, var2 = self.posterior_many(x2r)
        s1_sq = float(var2[0] - c @ v)

        # First-argument derivatives of the state-0 posterior covariance:
        # dSigma0(a, b)/da = dk(a, b)/da - Jk(a, D)^T K_D^{-1} k(b, D).
        dmu = np.zeros((q, d))
        dvar = np.zeros((q, d))
        Jx1 = kernel_grad_first(self.kernel, X1, X1)  # (q, q, d), dk(x_i, x_b)/dx_i
        Jx1_cross = kernel_grad_first(self.kernel, X1, x2r)[:, 0, :]  # (q, d)
        if self.n_train:
            Kd_X1 = kernel_matrix(self.kernel, self.train_inputs, X1)  # (n, q)
            kd_x2 = kernel_matrix(self.kernel, x2r, self.train_inputs)[0]  # (n,)
            A_X1 = linalg.cho_solve((self.chol, True), Kd_X1)  # K_D^{-1} k(X1, D)
            a_x2 = linalg.cho_solve((self.chol, True), kd_x2)
            Jd = kernel_grad_first(self.kernel, X1, self.train_inputs)  # (q, n, d)
            dmu0 = np.einsum("ind,n->id", Jd, self.weights)  # (q, d)
        for i in range(q):
            for j in range(d):
                r = Jx1[i, :, j].copy()  # dk(x_i, x_b)/dx_ij over b
                dc_i = Jx1_cross[i, j]
                if self.n_train:
                    r -= Jd[i, :, j] @ A_X1
                    dc_i -= Jd[i, :, j] @ a_x2
                ru = r @ u
                rv = r @ v
                dmu[i, j] = dc_i * u[i] - (v[i] * ru + rv * u[i])
                if self.n_train:
                    dmu[i, j] -= v[i] * dmu0[i, j]
                dvar[i, j] = -2.0 * dc_i * v[i] + 2.0 * v[i] * rv
        if s1_sq <= SIGMA_FLOOR**2 or near < np.sqrt(DUPLICATE_TOL):
            return dmu, np.zeros((q, d)), True
        return dmu, dvar / (2.0 * np.sqrt(s1_sq)), False

    def _posterior_cross(self, A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean at rows of A and posterior covariance block Sigma0(A, B)."""
        A = np.atleast_2d(A)
        B = np.atleast_2d(B)
        Kab = kernel_matrix(self.kernel, A, B)
        if self.n_train == 0:
            return np.zeros(A.shape[0]), Kab
        Kad = kernel_matrix(self.kernel, A, self.train_inputs)
        Kbd = kernel_matrix(self.kernel, B, self.train_inputs)
        Va = linalg.solve_triangular(self.chol, Kad.T, lower=True)
        Vb = linalg.solve_triangular(self.chol, Kbd.T, lower=True)
        return Kad @ self.weights, Kab - Va.T @ Vb


def jittered_cholesky(C: np.ndarray, scale: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky of C + jit*I with jitter escalation relative to scale.

    Returns (L, jitter_used). Raises FactorizationError past the cap.
    """
    n = C.shape[0]
    jit = JITTER_INITIAL * scale
    cap = JITTER_MAX * scale
    while True:
        try:
            return linalg.cholesky(C + jit * np.eye(n), lower=True), jit
        except linalg.LinAlgError:
            jit *= 10.0
            if jit > cap * (1 + 1e-12):
                raise FactorizationError(
                    f"covariance not factorizable at jitter {cap:g}"
                ) from None


def log_marginal_likelihood(params: KernelParams, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Log marginal likelihood of the data under the jittered kernel."""
    model = GPModel.fit(inputs, targets, params)
    n = model.n_train
    quad = model.train_targets @ model.weights
    logdet = 2.0 * np.sum(np.log(np.diag(model.chol)))
    return float(-0.5 * quad - 0.5 * logdet - 0.5 * n * np.log(2.0 * np.pi))


def _nll_and_grad(theta, X, y, jit_rel):
    """Negative log marginal likelihood and gradient in log-parameter space."""
    sv = np.exp(theta[0])
    ls = np.exp(theta[1:])
    n = X.shape[0]
    params = KernelParams(sv, ls)
    K = kernel_matrix(params, X, X) + jit_rel * sv * np.eye(n)
    try:
        L = linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        return np.inf, np.zeros_like(theta)
    w = linalg.cho_solve((L, True), y)
    nll = 0.5 * y @ w + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2.0 * np.pi)
    Kinv = linalg.cho_solve((L, True), np.eye(n))
    S = np.outer(w, w) - Kinv
    grad = np.empty_like(theta)
    grad[0] = -0.5 * np.sum(S * K)  # dK/dlog sv = K (jitter scales with sv)
    Kc = kernel_matrix(params, X, X)
    for j in range(len(ls)):
        D = ((X[:, j, None] - X[None, :, j]) / ls[j]) ** 2
        grad[1 + j] = -0.5 * np.sum(S * (Kc * D))
    return float(nll), grad


def fit_hyperparameters(
    inputs: np.ndarray,
    targets: np.ndarray,
    widths: np.ndarray | None = None,
    restarts: int = 5,
    seed: int = 0,
    warm_start: KernelParams | None = None,
) -> KernelParams:
    """Maximum-likelihood kernel hyperparameters via multistart L-BFGS-B.

    Search is in log space. Lengthscale box is [1e-3, 10] times the per-axis
    width (domain width if given, data range otherwise); signal variance box is
    [1e-4, 1e4] times the target variance. Degenerate targets (all identical,
    or fewer than two points) short-circuit to fallback parameters. When a warm
    start is supplied the result never has lower likelihood than it.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    y = np.asarray(targets, dtype=float).ravel()
    d = X.shape[1]
    if widths is None:
        widths = np.ptp(X, axis=0) if X.shape[0] > 1 else np.ones(d)
    widths = np.maximum(np.asarray(widths, dtype=float), 1e-6)
    vy = float(np.var(y)) if y.size else 0.0
    if y.size < 2 or vy == 0.0:
        return KernelParams(max(vy, 1e-6), widths.copy())

    lo = np.concatenate([[np.log(1e-4 * vy)], np.log(1e-3 * widths)])
    hi = np.concatenate([[np.log(1e4 * vy)], np.log(10.0 * widths)])
    from .sampling import sobol_unit

    starts = lo + sobol_unit(d + 1, max(restarts, 1), seed) * (hi - lo)
    if warm_start is not None:
        theta_w = np.concatenate(
            [[np.log(warm_start.signal_variance)], np.log(warm_start.lengthscales)]
        )
        starts = np.vstack([np.clip(theta_w, lo, hi), starts])

    from scipy.optimize import minimize

    best_theta, best_nll = None, np.inf
    for theta0 in starts:
        res = minimize(
            _nll_and_grad,
            theta0,
            args=(X, y, JITTER_INITIAL),
            jac=True,
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
        )
        cand_nll, _ = _nll_and_grad(res.x, X, y, JITTER_INITIAL)
        if cand_nll < best_nll:
            best_theta, best_nll = res.x, cand_nll
    if warm_start is not None:
        warm_nll, _ = _nll_and_grad(np.clip(theta_w, lo, hi), X, y, JITTER_INITIAL)
        # Never regress below the warm start (clipped into the box).
        if warm_nll < best_nll:
            best_theta, best_nll = np.clip(theta_w, lo, hi), warm_nll
    if best_theta is None or not np.isfinite(best_nll):
        return KernelParams(max(vy, 1e-6), widths.copy())
    return KernelParams(float(np.exp(best_theta[0])), np.exp(best_theta[1:]))
