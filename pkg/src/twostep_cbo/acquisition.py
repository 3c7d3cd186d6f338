"""Myopic constrained acquisition functions.

Expected improvement, probability of feasibility, their product (constrained
expected improvement over the best feasible observation), the analytic
gradient of that product, and a quasi-Monte Carlo estimator of the batch
version. Constraints whose observations are all identical and feasible are
treated as certainly feasible and contribute a factor of exactly one, which
keeps the remaining computation byte-identical to the unconstrained case.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .gp import GPModel, SIGMA_FLOOR, jittered_cholesky
from .sampling import latin_hypercube, sobol_normal


class MissingIncumbentError(RuntimeError):
    """No feasible observation exists, so improvement is undefined."""


def _phi(z):
    # density underflows to 0 beyond |z|=40; clipping avoids overflow in z*z
    z = np.clip(z, -40.0, 40.0)
    return np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)


def _Phi(z):
    return special.ndtr(z)


def ei(mean_improvement, variance):
    """Expected value of max(N(m, v), 0).

    Accepts scalars or arrays. Zero variance degenerates to max(m, 0);
    negative variance raises ValueError.
    """
    m = np.asarray(mean_improvement, dtype=float)
    v = np.asarray(variance, dtype=float)
    if np.any(v < 0):
        raise ValueError("variance must be nonnegative")
    scalar = m.ndim == 0 and v.ndim == 0
    m, v = np.atleast_1d(*np.broadcast_arrays(m, v))
    out = np.maximum(m, 0.0)
    pos = v > 0
    if np.any(pos):
        s = np.sqrt(v[pos])
        u = m[pos] / s
        out = out.copy()
        out[pos] = m[pos] * _Phi(u) + s * _phi(u)
    return float(out[0]) if scalar else out


def pf(mean, variance):
    """Probability that N(mean, variance) is nonpositive."""
    m = np.asarray(mean, dtype=float)
    v = np.asarray(variance, dtype=float)
    if np.any(v < 0):
        raise ValueError("variance must be nonnegative")
    scalar = m.ndim == 0 and v.ndim == 0
    m, v = np.atleast_1d(*np.broadcast_arrays(m, v))
    out = (m <= 0).astype(float)
    pos = v > 0
    if np.any(pos):
        out = out.copy()
        out[pos] = _Phi(-m[pos] / np.sqrt(v[pos]))
    return float(out[0]) if scalar else out


def certainly_feasible(model: GPModel) -> bool:
    """All observed values identical and feasible: the constraint is inert."""
    y = model.train_targets
    return y.size > 0 and float(np.ptp(y)) == 0.0 and float(y[0]) <= 0.0


@dataclass(frozen=True)
class PosteriorBundle:
    """Objective and constraint posteriors over shared evaluated inputs.

    incumbent_value is the best observed objective among feasible points, or
    None when no observation is feasible. Constraint models flagged certainly
    feasible are skipped by every acquisition computation.
    """

    objective: GPModel
    constraints: tuple[GPModel, ...]
    incumbent_value: float | None
    incumbent_point: np.ndarray | None
    feasible_flags: tuple[bool, ...]

    @classmethod
    def from_models(cls, objective: GPModel, constraints) -> "PosteriorBundle":
        constraints = tuple(constraints)
        feas = np.ones(objective.n_train, dtype=bool)
        for c in constraints:
            feas &= c.train_targets <= 0
        value, point = None, None
        if np.any(feas):
            idx = int(np.argmin(np.where(feas, objective.train_targets, np.inf)))
            value = float(objective.train_targets[idx])
            point = objective.train_inputs[idx].copy()
        flags = tuple(certainly_feasible(c) for c in constraints)
        return cls(objective, constraints, value, point, flags)

    @property
    def active_constraints(self) -> tuple[GPModel, ...]:
        return tuple(c for c, skip in zip(self.constraints, self.feasible_flags) if not skip)

    def require_incumbent(self) -> float:
        if self.incumbent_value is None:
            raise MissingIncumbentError("no feasible observation in the bundle")
        return self.incumbent_value


def eic(bundle: PosteriorBundle, x: np.ndarray) -> float:
    """Expected improvement over the incumbent times probability of feasibility."""
    return float(eic_many(bundle, np.atleast_2d(x))[0])


def eic_many(bundle: PosteriorBundle, X: np.ndarray) -> np.ndarray:
    """Vectorized eic over rows of X."""
    best = bundle.require_incumbent()
    X = np.atleast_2d(X)
    mu, var = bundle.objective.posterior_many(X)
    value = ei(best - mu, var)
    for c in bundle.active_constraints:
        mc, vc = c.posterior_many(X)
        value = value * pf(mc, vc)
    return np.atleast_1d(value)


def eic_grad(bundle: PosteriorBundle, x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Gradient of eic at a point; degenerate flag set when any posterior
    standard deviation sits below the floor (those factors contribute zero)."""
    best = bundle.require_incumbent()
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mu, var = bundle.objective.posterior(x)
    dmu, dsig, degen = bundle.objective.posterior_grads(x)
    sig = np.sqrt(var)
    m = best - mu
    if sig > SIGMA_FLOOR:
        u = m / sig
        ei_val = m * _Phi(u) + sig * _phi(u)
        dei = -_Phi(u) * dmu + _phi(u) * dsig
    else:
        degen = True
        ei_val = max(m, 0.0)
        dei = -float(m > 0) * dmu
    factors, dfactors = [ei_val], [dei]
    for c in bundle.active_constraints:
        mc, vc = c.posterior(x)
        dmc, dsc, cdegen = c.posterior_grads(x)
        sc = np.sqrt(vc)
        if sc > SIGMA_FLOOR:
            uc = -mc / sc
            factors.append(_Phi(uc))
            dfactors.append(_phi(uc) * (-dmc / sc + mc * dsc / (sc * sc)))
        else:
            degen = True
            factors.append(float(mc <= 0))
            dfactors.append(np.zeros_like(dmu))
        degen = degen or cdegen
    grad = np.zeros_like(dmu)
    for k, dfk in enumerate(dfactors):
        rest = np.prod([f for j, f in enumerate(factors) if j != k])
        grad += dfk * rest
    return grad, degen


def batch_eic_mc(
    bundle: PosteriorBundle, X: np.ndarray, n_samples: int = 512, seed=0
) -> tuple[float, float]:
    """QMC estimate of the expected best feasible improvement of a batch.

    Samples the joint state-0 posterior of the objective and each active
    constraint at the batch points (objective block first, then constraints in
    index order) and averages max_i (best - y_f_i)^+ 1{all constraints <= 0}.
    Returns (estimate, standard error from the sample variance).
    """
    best = bundle.require_incumbent()
    X = np.atleast_2d(X)
    q = X.shape[0]
    blocks = [bundle.objective, *bundle.active_constraints]
    dim = len(blocks) * q
    Z = sobol_normal(dim, n_samples, seed)
    draws = []
    for b, model in enumerate(blocks):
        mu, C = model.posterior_joint(X)
        L, _ = jittered_cholesky(C, model.kernel.signal_variance)
        draws.append(mu + Z[:, b * q : (b + 1) * q] @ L.T)
    improvement = np.maximum(best - draws[0], 0.0)
    feasible = np.ones((n_samples, q), dtype=bool)
    for Yg in draws[1:]:
        feasible &= Yg <= 0
    per_sample = np.max(np.where(feasible, improvement, 0.0), axis=1)
    est = float(np.mean(per_sample))
    se = float(np.std(per_sample, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else np.inf
    return est, se


def _ascent(value_fn, grad_fn, starts: np.ndarray, bounds: np.ndarray, steps: int = 60):
    """Projected backtracking gradient ascent from several starts; best point wins."""
    lo, wid = bounds[:, 0], bounds[:, 1] - bounds[:, 0]
    U = (starts - lo) / wid
    vals = value_fn(starts)
    grads = np.stack([grad_fn(x) for x in starts]) * wid
    g_inf = np.max(np.abs(grads), axis=1)
    step = np.clip(0.15 / (g_inf + 1e-12), 1e-4, 1e4)
    for _ in range(steps):
        cand_U = np.clip(U + step[:, None] * grads, 0.0, 1.0)
        cand = lo + cand_U * wid
        cvals = value_fn(cand)
        acc = cvals > vals
        U[acc] = cand_U[acc]
        vals[acc] = cvals[acc]
        if np.any(acc):
            for i in np.flatnonzero(acc):
                grads[i] = grad_fn(lo + U[i] * wid) * wid
        step[acc] *= 1.6
        step[~acc] *= 0.5
        if np.all(step < 1e-8):
            break
    best = int(np.argmax(vals))
    return lo + U[best] * wid, float(vals[best])


def maximize_eic(bundle: PosteriorBundle, bounds: np.ndarray, seed: int) -> np.ndarray:
    """Multistart ascent of the analytic acquisition; incumbent joins the starts."""
    starts = latin_hypercube(20, bounds, np.random.SeedSequence((seed, 19)))
    if bundle.incumbent_point is not None:
        starts = np.vstack([starts, bundle.incumbent_point])
    x, _ = _ascent(
        lambda X: eic_many(bundle, X),
        lambda x: eic_grad(bundle, x)[0],
        starts,
        bounds,
    )
    return x


def greedy_batch_eic(bundle: PosteriorBundle, bounds: np.ndarray, q: int, seed: int) -> np.ndarray:
    """Sequential greedy batch built on the MC batch acquisition."""
    chosen: list[np.ndarray] = []
    cand = latin_hypercube(256, bounds, np.random.SeedSequence((seed, 29)))
    for slot in range(q):
        best_v, best_x = -np.inf, None
        slot_seed = int(np.random.SeedSequence((seed, 31, slot)).generate_state(1)[0])
        for x in cand:
            X_try = np.vstack([*chosen, x]) if chosen else x.reshape(1, -1)
            if len(chosen) and np.min(
                np.linalg.norm(np.array(chosen) - x, axis=1)
            ) < 1e-6:
                continue
            v, _ = batch_eic_mc(bundle, X_try, n_samples=256, seed=slot_seed)
            if v > best_v:
                best_v, best_x = v, x
        chosen.append(best_x)
    return np.array(chosen)
