"""Weighted logistic regression for the baseline cure probability."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, FitError


def expit(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _weighted_loglik(x, y, w, alpha):
    eta = x @ alpha
    logp = -np.logaddexp(0.0, -eta)
    log1mp = -np.logaddexp(0.0, eta)
    return float(np.sum(w * (y * logp + (1.0 - y) * log1mp)))


@dataclass
class CureCoefficients:
    alpha: np.ndarray
    names: list[str] = field(default_factory=list)
    iterations: int = 0

    def __len__(self):
        return len(self.alpha)


def fit_logistic_arrays(
    x: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray,
    *,
    names=None,
    tol: float = 1e-9,
    max_iter: int = 50,
    init: np.ndarray | None = None,
    separation_bound: float = 30.0,
) -> CureCoefficients:
    """Newton/IRLS maximization of the weighted Bernoulli log-likelihood.

    Converges when the coefficient change drops below ``tol``. Separation is
    flagged when a coefficient exceeds ``separation_bound`` while the score
    has not vanished; rank deficiency is reported naming the covariate that
    dominates the null direction.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(weights, dtype=float)
    if np.any((w < 0) | (w > 1)):
        raise FitError("logistic weights must lie in [0, 1]")
    if not np.sum(w) > 0:
        raise FitError("logistic fit needs positive total weight")
    n, p = x.shape
    names = names if names is not None else [f"x{j}" for j in range(p)]
    alpha = np.zeros(p) if init is None else np.asarray(init, dtype=float).copy()
    ll = _weighted_loglik(x, y, w, alpha)

    for it in range(1, max_iter + 1):
        prob = expit(x @ alpha)
        grad = x.T @ (w * (y - prob))
        wirls = w * prob * (1.0 - prob)
        hess = (x * wirls[:, None]).T @ x
        try:
            delta = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            if np.any(np.abs(alpha) > separation_bound):
                culprit = names[int(np.argmax(np.abs(alpha)))]
                raise FitError(
                    f"separation detected in logistic fit: coefficient for '{culprit}' "
                    f"diverged past {separation_bound}"
                )
            eigval, eigvec = np.linalg.eigh(hess)
            null = eigvec[:, int(np.argmin(np.abs(eigval)))]
            culprit = names[int(np.argmax(np.abs(null)))]
            raise FitError(
                f"logistic design is rank deficient; covariate '{culprit}' spans a null direction"
            )
        step = 1.0
        while True:
            cand = alpha + step * delta
            ll_new = _weighted_loglik(x, y, w, cand)
            if ll_new >= ll - 1e-12 or step < 1e-10:
                break
            step *= 0.5
        change = float(np.max(np.abs(cand - alpha)))
        alpha, ll = cand, ll_new
        if change >= tol and np.any(np.abs(alpha) > separation_bound):
            # a finite optimum this far out would have converged already; the
            # still-moving coefficient marks a monotone likelihood
            culprit = names[int(np.argmax(np.abs(alpha)))]
            gnorm = float(np.linalg.norm(x.T @ (w * (y - expit(x @ alpha)))))
            raise FitError(
                f"separation detected in logistic fit: coefficient for '{culprit}' "
                f"diverged (|alpha| > {separation_bound}, score norm {gnorm:.2e})"
            )
        if change < tol:
            return CureCoefficients(alpha=alpha, names=list(names), iterations=it)
    raise ConvergenceError(
        f"logistic fit did not converge in {max_iter} iterations",
        last_iterate=alpha,
    )


def fit_weighted_logistic(q2_table, spec, **kwargs) -> CureCoefficients:
    """Fit the cure-probability model on a Q2-format table.

    ``q2_table`` holds one or two rows per subject with columns ``cure``,
    ``weight`` and the cure covariates; the intercept is always included.
    """
    x, names = spec.cure_design(q2_table)
    y = q2_table["cure"].to_numpy(dtype=float)
    w = q2_table["weight"].to_numpy(dtype=float)
    kwargs.setdefault("tol", spec.fit.inner_tol)
    kwargs.setdefault("max_iter", spec.fit.inner_max_iter)
    return fit_logistic_arrays(x, y, w, names=names, **kwargs)


def cure_probability(z, coefs: CureCoefficients):
    """P(cured at baseline | covariates) = expit(z' alpha)."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != len(coefs.alpha):
        raise FitError(
            f"covariate vector has dimension {z.shape[-1]}, expected {len(coefs.alpha)}"
        )
    return expit(z @ coefs.alpha)
