"""Latent-space MAP inversion by Gauss-Newton with backtracking line search,
linearised posterior covariance, and sampled bathymetry uncertainty."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .fields import BathymetryField, ObservationSet
from .prior import rng_for


@dataclass(frozen=True)
class LineSearchOptions:
    shrink: float = 0.5
    max_backtracks: int = 20
    sufficient_decrease: float = 1e-4

    def __post_init__(self):
        if not 0 < self.shrink < 1:
            raise ValueError("line-search shrink factor must be in (0, 1)")
        if self.max_backtracks < 0:
            raise ValueError("max_backtracks must be >= 0")


@dataclass(frozen=True)
class InversionOptions:
    max_iterations: int = 10
    grad_tol: float = 1e-6  # relative to the initial gradient norm
    alpha_init: float = 1.0
    line_search: LineSearchOptions = field(default_factory=LineSearchOptions)
    jacobian_mode: str = "analytic"
    fd_delta: float = 1e-4
    sigma_prior: np.ndarray | None = None  # identity when None
    step_form: str = "auto"  # "data", "information" or "auto"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.fd_delta <= 0:
            raise ValueError("fd_delta must be positive")
        if self.jacobian_mode not in ("analytic", "finite-difference"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.step_form not in ("auto", "data", "information"):
            raise ValueError(f"unknown step_form {self.step_form!r}")


@dataclass(frozen=True, eq=False)
class PosteriorEstimate:
    z_map: np.ndarray
    q_post: np.ndarray
    bathymetry_map: BathymetryField
    bathymetry_std: np.ndarray
    objective_trace: np.ndarray
    converged: bool
    iterations_used: int
    stalled: bool = False
    grad_norm_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _sigma(sigma_prior, k):
    return np.eye(k) if sigma_prior is None else np.asarray(sigma_prior, dtype=np.float64)


def map_objective(z, obs: ObservationSet, model, sigma_prior=None) -> float:
    """``(y - yhat(z))' R^-1 (y - yhat(z)) + z' Sigma^-1 z``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"latent vector must have length {model.latent_dim}")
    r = obs.values - model.predict_obs(z, obs.bc, obs.mask)
    data = float(np.sum(r**2 / obs.noise_var))
    if sigma_prior is None:
        prior = float(z @ z)
    else:
        prior = float(z @ np.linalg.solve(sigma_prior, z))
    return data + prior


def objective_gradient(z, obs, model, jac, sigma_prior=None, yhat=None):
    yhat = model.predict_obs(z, obs.bc, obs.mask) if yhat is None else yhat
    r = obs.values - yhat
    prior = z if sigma_prior is None else np.linalg.solve(sigma_prior, z)
    return 2.0 * (prior - jac.T @ (r / obs.noise_var))


def gauss_newton_target(z, obs, jac, sigma_prior=None, form="data", yhat=None, model=None):
    """Full Gauss-Newton point (the update at ``alpha = 1``).

    ``data`` form: ``Sigma J' (J Sigma J' + R)^-1 (y - yhat + J z)``, via a
    Cholesky factorisation of the n x n data-space matrix.
    ``information`` form: the algebraically equal
    ``(Sigma^-1 + J' R^-1 J)^-1 J' R^-1 (y - yhat + J z)`` (k x k solve).
    """
    z = np.asarray(z, dtype=np.float64)
    k = len(z)
    if yhat is None:
        yhat = model.predict_obs(z, obs.bc, obs.mask)
    sigma = _sigma(sigma_prior, k)
    w = obs.values - yhat + jac @ z
    rvar = obs.noise_var
    try:
        if form == "data":
            a = jac @ sigma @ jac.T
            a[np.diag_indices_from(a)] += rvar
            return sigma @ (jac.T @ cho_solve(cho_factor(a), w))
        info = jac.T @ (jac / rvar[:, None]) + np.linalg.inv(sigma)
        return cho_solve(cho_factor(info), jac.T @ (w / rvar))
    except np.linalg.LinAlgError as e:
        raise np.linalg.LinAlgError(f"Gauss-Newton factorisation failed ({form} form): {e}") from None


def gauss_newton_step(z, obs, model, jac, alpha, sigma_prior=None, form="data"):
    """``z_next = (1 - alpha) z + alpha * GN target``."""
    z = np.asarray(z, dtype=np.float64)
    target = gauss_newton_target(z, obs, jac, sigma_prior, form, model=model)
    return (1.0 - alpha) * z + alpha * target


def information_form_step(z, obs, model, jac, alpha, sigma_prior=None):
    """Gauss-Newton step written as a Newton-type correction of the objective:
    ``z - alpha (Sigma^-1 + J' R^-1 J)^-1 (Sigma^-1 z - J' R^-1 (y - yhat))``."""
    z = np.asarray(z, dtype=np.float64)
    rvar = obs.noise_var
    sinv = np.linalg.inv(_sigma(sigma_prior, len(z)))
    r = obs.values - model.predict_obs(z, obs.bc, obs.mask)
    h = sinv + jac.T @ (jac / rvar[:, None])
    return z - alpha * np.linalg.solve(h, sinv @ z - jac.T @ (r / rvar))


def jacobian_fd(model, z, obs: ObservationSet, fd_delta=1e-4, base=None) -> np.ndarray:
    """Forward differences, one column per latent component (k + 1 model evaluations)."""
    if fd_delta <= 0:
        raise ValueError("fd_delta must be positive")
    z = np.asarray(z, dtype=np.float64)
    y0 = model.predict_obs(z, obs.bc, obs.mask) if base is None else base
    cols = []
    for i in range(len(z)):
        zp = z.copy()
        zp[i] += fd_delta
        cols.append((model.predict_obs(zp, obs.bc, obs.mask) - y0) / fd_delta)
    j = np.column_stack(cols)
    if not np.all(np.isfinite(j)):
        raise FloatingPointError("non-finite model output in finite-difference Jacobian")
    return j


@dataclass(frozen=True)
class LineSearchResult:
    alpha: float
    objective: float
    stalled: bool
    trials: tuple


def line_search(z, target, obs, model, opts: InversionOptions = InversionOptions(), f0=None, grad=None) -> LineSearchResult:
    """Backtracking over ``z(alpha) = z + alpha (target - z)``.

    Accepts the first (largest) ``alpha = alpha_init * shrink^t`` with
    ``f(z(alpha)) < f(z) - c * alpha * pred`` where ``pred = -grad' (target - z)``
    is the predicted first-order decrease. If no trial passes, the smallest
    trial is returned with ``stalled=True``.
    """
    ls = opts.line_search
    z = np.asarray(z, dtype=np.float64)
    p = np.asarray(target) - z
    f0 = map_objective(z, obs, model, opts.sigma_prior) if f0 is None else f0
    pred = 0.0 if grad is None else max(-float(grad @ p), 0.0)
    alpha = opts.alpha_init
    trials = []
    for _ in range(ls.max_backtracks + 1):
        f = map_objective(z + alpha * p, obs, model, opts.sigma_prior)
        trials.append((alpha, f))
        if f < f0 - ls.sufficient_decrease * alpha * pred:
            return LineSearchResult(alpha, f, False, tuple(trials))
        alpha *= ls.shrink
    last = trials[-1]
    return LineSearchResult(last[0], last[1], True, tuple(trials))


def posterior_covariance(jac, sigma_prior, noise_var) -> np.ndarray:
    """``(Sigma^-1 + J' R^-1 J)^-1`` with diagonal ``R`` given by ``noise_var``."""
    jac = np.atleast_2d(np.asarray(jac, dtype=np.float64))
    k = jac.shape[1]
    sigma = _sigma(sigma_prior, k)
    rvar = np.broadcast_to(np.asarray(noise_var, dtype=np.float64), (jac.shape[0],))
    info = np.linalg.inv(sigma) + jac.T @ (jac / rvar[:, None])
    try:
        c = cho_factor(info)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError("singular posterior information matrix") from None
    q = cho_solve(c, np.eye(k))
    return 0.5 * (q + q.T)


def posterior_covariance_data_form(jac, sigma_prior, noise_var) -> np.ndarray:
    """``Sigma - Sigma J' (J Sigma J' + R)^-1 J Sigma``."""
    jac = np.atleast_2d(np.asarray(jac, dtype=np.float64))
    sigma = _sigma(sigma_prior, jac.shape[1])
    a = jac @ sigma @ jac.T + np.diag(np.broadcast_to(noise_var, (jac.shape[0],)))
    sj = sigma @ jac.T
    q = sigma - sj @ np.linalg.solve(a, sj.T)
    return 0.5 * (q + q.T)


def bathymetry_uncertainty(model, z_map, q_post, bc, n_samples=200, seed=0) -> np.ndarray:
    """Pointwise std of the decoded bathymetry over ``z ~ N(z_map, q_post)``."""
    q = np.asarray(q_post, dtype=np.float64)
    shape = model.geometry.shape
    if not np.any(q):
        return np.zeros(shape)
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(q + 1e-10 * np.eye(len(q)))
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("posterior covariance is not positive definite") from None
    xi = rng_for(seed).standard_normal((n_samples, len(q)))
    zs = np.asarray(z_map) + xi @ chol.T
    s = model.decode_bathymetry_many(zs, bc)
    return s.std(axis=0).reshape(shape)


def _jacobian(model, z, obs, opts, yhat):
    if opts.jacobian_mode == "analytic":
        return model.obs_jacobian(z, obs.bc, obs.mask)
    return jacobian_fd(model, z, obs, opts.fd_delta, base=yhat)


def _pick_form(opts, n_obs, k):
    if opts.step_form != "auto":
        return opts.step_form
    # the two forms are equal; the data-space solve is O(n^3), so only use it when small
    return "data" if n_obs <= 4 * k + 200 else "information"


def invert(obs: ObservationSet, model, opts: InversionOptions = InversionOptions(), uq_samples=200, uq_seed=0) -> PosteriorEstimate:
    """Gauss-Newton MAP estimate in the latent space, starting from ``z = 0``.

    Stops when the gradient norm falls below ``grad_tol`` times its initial
    value, after ``max_iterations`` accepted steps, or when the line search
    stalls (the stalled step is not taken).
    """
    k = model.latent_dim
    z = np.zeros(k)
    form = _pick_form(opts, obs.mask.n_obs, k)
    yhat = model.predict_obs(z, obs.bc, obs.mask)
    f = map_objective(z, obs, model, opts.sigma_prior)
    jac = _jacobian(model, z, obs, opts, yhat)
    g = objective_gradient(z, obs, model, jac, opts.sigma_prior, yhat)
    g0 = float(np.linalg.norm(g))
    trace, gtrace = [f], [g0]
    converged = g0 == 0.0
    stalled = False
    it = 0
    while not converged and it < opts.max_iterations:
        target = gauss_newton_target(z, obs, jac, opts.sigma_prior, form, yhat=yhat)
        ls = line_search(z, target, obs, model, opts, f0=f, grad=g)
        if ls.stalled:
            stalled = True
            break
        z = z + ls.alpha * (target - z)
        f = ls.objective
        it += 1
        yhat = model.predict_obs(z, obs.bc, obs.mask)
        jac = _jacobian(model, z, obs, opts, yhat)
        g = objective_gradient(z, obs, model, jac, opts.sigma_prior, yhat)
        trace.append(f)
        gtrace.append(float(np.linalg.norm(g)))
        converged = gtrace[-1] <= opts.grad_tol * g0
    q = posterior_covariance(jac, opts.sigma_prior, obs.noise_var)
    s_map = model.decode_bathymetry(z, obs.bc).reshape(model.geometry.shape)
    std = bathymetry_uncertainty(model, z, q, obs.bc, uq_samples, uq_seed) if uq_samples else np.zeros(model.geometry.shape)
    return PosteriorEstimate(
        z_map=z,
        q_post=q,
        bathymetry_map=BathymetryField(model.geometry, s_map),
        bathymetry_std=std,
        objective_trace=np.array(trace),
        converged=bool(converged),
        iterations_used=it,
        stalled=stalled,
        grad_norm_trace=np.array(gtrace),
    )


def result_arrays(est: PosteriorEstimate, metadata=None) -> dict:
    from .container import geometry_arrays, metadata_arrays

    arrays = {
        "result/z_map": est.z_map,
        "result/q_post": est.q_post,
        "result/bathymetry_map": est.bathymetry_map.bed_elevation,
        "result/bathymetry_std": est.bathymetry_std,
        "result/objective_trace": est.objective_trace,
        "result/grad_norm_trace": est.grad_norm_trace,
        "result/status": np.array([int(est.converged), est.iterations_used, int(est.stalled)], dtype=np.uint32),
    }
    arrays.update(geometry_arrays(est.bathymetry_map.geometry))
    arrays.update(metadata_arrays(metadata or {}))
    return arrays


def save_result(est: PosteriorEstimate, path, metadata=None):
    from .container import write_arrays

    write_arrays(path, result_arrays(est, metadata))


def load_result(path) -> tuple[PosteriorEstimate, dict]:
    from .container import geometry_from, metadata_from, read_arrays

    a = read_arrays(path)
    if "result/z_map" not in a:
        raise ValueError(f"{path} is not an inversion result container")
    g = geometry_from(a)
    converged, iterations, stalled = (int(x) for x in a["result/status"])
    est = PosteriorEstimate(
        z_map=a["result/z_map"],
        q_post=a["result/q_post"],
        bathymetry_map=BathymetryField(g, a["result/bathymetry_map"]),
        bathymetry_std=a["result/bathymetry_std"],
        objective_trace=a["result/objective_trace"],
        converged=bool(converged),
        iterations_used=iterations,
        stalled=bool(stalled),
        grad_norm_trace=a["result/grad_norm_trace"],
    )
    return est, metadata_from(a)
