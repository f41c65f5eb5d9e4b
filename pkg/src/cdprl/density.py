"""Variational Bayesian Gaussian mixture over trajectory achieved-goal features.

Coordinate-ascent variational inference with a symmetric Dirichlet prior on the
mixing weights and a Gauss-Wishart prior on each component (Gauss-Gamma per
dimension for the diagonal variant). Densities are predicted by plugging the
posterior-expected parameters into an ordinary Gaussian mixture.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import digamma, gammaln, logsumexp, multigammaln

from .core import ContractError

log = logging.getLogger(__name__)

FORMAT_NAME = "cdprl.mixture"
FORMAT_VERSION = 1
LOG_2PI = np.log(2.0 * np.pi)


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class VGMMConfig:
    max_components: int = 3
    covariance_kind: str = "diagonal"
    dirichlet_concentration: Optional[float] = None
    max_iterations: int = 100
    convergence_tol: float = 1e-3
    covariance_floor: float = 1e-6
    init_strategy: str = "kmeans_like"
    seed: int = 0
    prune_threshold: float = 0.05
    density_floor: float = 1e-300

    def __post_init__(self):
        if self.max_components < 1:
            raise ContractError("max_components must be >= 1")
        if self.covariance_kind not in ("diagonal", "full"):
            raise ContractError(f"unknown covariance_kind {self.covariance_kind!r}")
        if self.init_strategy not in ("kmeans_like", "random_responsibility"):
            raise ContractError(f"unknown init_strategy {self.init_strategy!r}")
        if self.covariance_floor <= 0 or self.convergence_tol <= 0:
            raise ContractError("covariance_floor and convergence_tol must be positive")
        if self.max_iterations < 1:
            raise ContractError("max_iterations must be >= 1")
        if self.dirichlet_concentration is not None and self.dirichlet_concentration <= 0:
            raise ContractError("dirichlet_concentration must be positive")
        if not 0 < self.density_floor:
            raise ContractError("density_floor must be positive")

    @property
    def concentration(self) -> float:
        if self.dirichlet_concentration is None:
            return 1.0 / self.max_components
        return self.dirichlet_concentration


@dataclass
class MixtureModel:
    """Posterior of a fitted mixture plus its plug-in Gaussian parameters.

    ``scale_inv`` holds the inverse Wishart scale matrices (K, D, D) for the full
    model or the inverse Gamma-rate analogue (K, D) for the diagonal one.
    """

    covariance_kind: str
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    dirichlet_counts: np.ndarray
    mean_precisions: np.ndarray
    degrees_of_freedom: np.ndarray
    scale_inv: np.ndarray
    prior: dict
    covariance_floor: float
    prune_threshold: float = 0.05
    density_floor: float = 1e-300
    lower_bounds: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def effective_components(self) -> int:
        return int(np.sum(self.weights > self.prune_threshold))

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "covariance_kind": self.covariance_kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "dirichlet_counts": self.dirichlet_counts.tolist(),
            "mean_precisions": self.mean_precisions.tolist(),
            "degrees_of_freedom": self.degrees_of_freedom.tolist(),
            "scale_inv": self.scale_inv.tolist(),
            "prior": {k: np.asarray(v).tolist() for k, v in self.prior.items()},
            "covariance_floor": self.covariance_floor,
            "prune_threshold": self.prune_threshold,
            "density_floor": self.density_floor,
            "lower_bounds": list(self.lower_bounds),
            "n_iter": self.n_iter,
            "converged": self.converged,
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "MixtureModel":
        doc = json.loads(text)
        if doc.get("format") != FORMAT_NAME:
            raise ValueError("not a serialized mixture model")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported mixture model version {doc.get('version')}")
        arr = lambda key: np.asarray(doc[key], dtype=float)  # noqa: E731
        return cls(
            covariance_kind=doc["covariance_kind"],
            weights=arr("weights"),
            means=arr("means"),
            covariances=arr("covariances"),
            dirichlet_counts=arr("dirichlet_counts"),
            mean_precisions=arr("mean_precisions"),
            degrees_of_freedom=arr("degrees_of_freedom"),
            scale_inv=arr("scale_inv"),
            prior={k: np.asarray(v, dtype=float) for k, v in doc["prior"].items()},
            covariance_floor=doc["covariance_floor"],
            prune_threshold=doc["prune_threshold"],
            density_floor=doc["density_floor"],
            lower_bounds=list(doc["lower_bounds"]),
            n_iter=doc["n_iter"],
            converged=doc["converged"],
        )


# -- variational updates ----------------------------------------------------


def _farthest_point_responsibilities(X, K, rng):
    N = X.shape[0]
    centers = [int(rng.integers(N))]
    min_d2 = np.sum((X - X[centers[0]]) ** 2, axis=1)
    for _ in range(1, K):
        nxt = int(np.argmax(min_d2))
        centers.append(nxt)
        min_d2 = np.minimum(min_d2, np.sum((X - X[nxt]) ** 2, axis=1))
    d2 = ((X[:, None, :] - X[centers][None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((N, K))
    resp[np.arange(N), np.argmin(d2, axis=1)] = 1.0
    return resp


def _random_responsibilities(X, K, rng):
    resp = rng.random((X.shape[0], K))
    return resp / resp.sum(axis=1, keepdims=True)


class _Posterior:
    """Mutable working state of one fit; not part of the public surface."""

    def __init__(self, X, K, config: VGMMConfig):
        N, D = X.shape
        self.X = X
        self.K = K
        self.full = config.covariance_kind == "full"
        self.alpha0 = config.concentration
        self.beta0 = 1.0
        self.m0 = X.mean(axis=0)
        var = X.var(axis=0) + config.covariance_floor
        if self.full:
            self.nu0 = float(D)
            cov = np.atleast_2d(np.cov(X, rowvar=False, bias=True)) if N > 1 else np.zeros((D, D))
            self.W0inv = self.nu0 * (cov + config.covariance_floor * np.eye(D))
            self.logdet_W0 = -np.linalg.slogdet(self.W0inv)[1]
        else:
            self.nu0 = 1.0
            self.W0inv = self.nu0 * var

    # M-step ------------------------------------------------------------------
    def update_params(self, resp):
        X = self.X
        Nk = resp.sum(axis=0)
        safe = np.maximum(Nk, 10 * np.finfo(float).eps)
        xbar = (resp.T @ X) / safe[:, None]
        self.alpha = self.alpha0 + Nk
        self.beta = self.beta0 + Nk
        self.nu = self.nu0 + Nk
        self.m = (self.beta0 * self.m0 + Nk[:, None] * xbar) / self.beta[:, None]
        shrink = (self.beta0 * Nk / (self.beta0 + Nk))[:, None]
        dm = xbar - self.m0
        if self.full:
            D = X.shape[1]
            Winv = np.empty((self.K, D, D))
            for k in range(self.K):
                diff = X - xbar[k]
                Winv[k] = self.W0inv + (resp[:, k, None] * diff).T @ diff + shrink[k] * np.outer(dm[k], dm[k])
                Winv[k] = 0.5 * (Winv[k] + Winv[k].T)
            self.Winv = Winv
            self.chol = np.linalg.cholesky(Winv)
            # ln|W_k| = -ln|W_k^{-1}|
            self.logdet_W = -2.0 * np.log(np.diagonal(self.chol, axis1=1, axis2=2)).sum(axis=1)
        else:
            sq = np.einsum("nk,nkd->kd", resp, (X[:, None, :] - xbar[None, :, :]) ** 2)
            self.Winv = self.W0inv[None, :] + sq + shrink * dm**2
            self.w = 1.0 / self.Winv

    # expectations --------------------------------------------------------------
    def expected_log_det(self):
        if self.full:
            D = self.X.shape[1]
            i = np.arange(1, D + 1)
            return digamma(0.5 * (self.nu[:, None] + 1 - i)).sum(axis=1) + D * np.log(2.0) + self.logdet_W
        return digamma(0.5 * self.nu)[:, None] + np.log(2.0) + np.log(self.w)

    def expected_log_gaussian(self, X, elogdet):
        """E_q[ln N(x_n | mu_k, Lambda_k^{-1})], shape (N, K)."""
        D = X.shape[1]
        if self.full:
            out = np.empty((X.shape[0], self.K))
            for k in range(self.K):
                z = solve_triangular(self.chol[k], (X - self.m[k]).T, lower=True)
                maha = self.nu[k] * np.sum(z**2, axis=0)
                out[:, k] = 0.5 * (elogdet[k] - D * LOG_2PI - D / self.beta[k] - maha)
            return out
        diff2 = (X[:, None, :] - self.m[None, :, :]) ** 2
        maha = np.einsum("nkd,kd->nk", diff2, self.w) * self.nu[None, :]
        return 0.5 * (elogdet.sum(axis=1)[None, :] - D * LOG_2PI - D / self.beta[None, :] - maha)

    def expected_log_weights(self):
        return digamma(self.alpha) - digamma(self.alpha.sum())

    # lower bound ---------------------------------------------------------------
    def kl_dirichlet(self):
        a, a0 = self.alpha, np.full(self.K, self.alpha0)
        return (
            gammaln(a.sum()) - gammaln(a).sum() - gammaln(a0.sum()) + gammaln(a0).sum()
            + np.sum((a - a0) * (digamma(a) - digamma(a.sum())))
        )

    def kl_gauss_wishart(self, elogdet):
        b, b0, nu, nu0 = self.beta, self.beta0, self.nu, self.nu0
        if self.full:
            D = self.X.shape[1]
            total = 0.0
            for k in range(self.K):
                dm = self.m[k] - self.m0
                quad = dm @ cho_solve((self.chol[k], True), dm)
                kl_mean = 0.5 * (D * b0 / b[k] - D + D * np.log(b[k] / b0) + b0 * nu[k] * quad)
                trace = np.trace(cho_solve((self.chol[k], True), self.W0inv))
                lnB = -0.5 * nu[k] * self.logdet_W[k] - 0.5 * nu[k] * D * np.log(2.0) - multigammaln(0.5 * nu[k], D)
                lnB0 = -0.5 * nu0 * self.logdet_W0 - 0.5 * nu0 * D * np.log(2.0) - multigammaln(0.5 * nu0, D)
                kl_w = lnB - lnB0 + 0.5 * (nu[k] - nu0) * elogdet[k] - 0.5 * nu[k] * D + 0.5 * nu[k] * trace
                total += kl_mean + kl_w
            return total
        w = self.w
        nu_ = nu[:, None]
        b_ = b[:, None]
        kl_mean = 0.5 * (b0 / b_ - 1.0 + np.log(b_ / b0) + b0 * nu_ * w * (self.m - self.m0) ** 2)
        lnB = -0.5 * nu_ * np.log(w) - 0.5 * nu_ * np.log(2.0) - gammaln(0.5 * nu_)
        lnB0 = 0.5 * nu0 * np.log(self.W0inv) - 0.5 * nu0 * np.log(2.0) - gammaln(0.5 * nu0)
        kl_w = lnB - lnB0[None, :] + 0.5 * (nu_ - nu0) * elogdet - 0.5 * nu_ + 0.5 * nu_ * self.W0inv[None, :] * w
        return float(np.sum(kl_mean + kl_w))

    def log_joint_terms(self):
        """Unnormalized log responsibilities under the current parameters."""
        elogdet = self.expected_log_det()
        log_rho = self.expected_log_weights()[None, :] + self.expected_log_gaussian(self.X, elogdet)
        return log_rho, elogdet

    def lower_bound(self, resp, log_rho, elogdet):
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(resp > 0, resp * np.log(resp), 0.0).sum()
        return float(np.sum(resp * log_rho) - ent - self.kl_dirichlet() - self.kl_gauss_wishart(elogdet))

    def to_model(self, config: VGMMConfig, bounds, n_iter, converged) -> MixtureModel:
        D = self.X.shape[1]
        floor = config.covariance_floor
        if self.full:
            covs = self.Winv / self.nu[:, None, None] + floor * np.eye(D)[None, :, :]
        else:
            covs = self.Winv / self.nu[:, None] + floor
        prior = {
            "dirichlet_concentration": self.alpha0,
            "mean_precision": self.beta0,
            "degrees_of_freedom": self.nu0,
            "mean": self.m0,
            "scale_inv": self.W0inv,
        }
        return MixtureModel(
            covariance_kind=config.covariance_kind,
            weights=self.alpha / self.alpha.sum(),
            means=self.m.copy(),
            covariances=covs,
            dirichlet_counts=self.alpha.copy(),
            mean_precisions=self.beta.copy(),
            degrees_of_freedom=self.nu.copy(),
            scale_inv=self.Winv.copy(),
            prior=prior,
            covariance_floor=floor,
            prune_threshold=config.prune_threshold,
            density_floor=config.density_floor,
            lower_bounds=list(bounds),
            n_iter=n_iter,
            converged=converged,
        )


def fit(features, config: VGMMConfig = VGMMConfig()) -> MixtureModel:
    """Fit the variational mixture by coordinate ascent on the lower bound.

    Convergence is declared when the bound improves by less than
    ``convergence_tol`` per sample. The recorded bound sequence is
    non-decreasing up to floating-point error.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim != 2:
        raise ContractError(f"features must be a 2-D array, got shape {X.shape}")
    N = X.shape[0]
    if N == 0:
        raise ContractError("cannot fit a mixture on zero samples")
    K = config.max_components
    if N < K:
        warnings.warn(f"only {N} samples for {K} components; reducing to {N}", RuntimeWarning, stacklevel=2)
        K = N
    rng = np.random.default_rng(config.seed)
    if config.init_strategy == "kmeans_like":
        resp = _farthest_point_responsibilities(X, K, rng)
    else:
        resp = _random_responsibilities(X, K, rng)

    post = _Posterior(X, K, config)
    bounds = []
    converged = False
    n_iter = 0
    for n_iter in range(1, config.max_iterations + 1):
        post.update_params(resp)
        log_rho, elogdet = post.log_joint_terms()
        bound = post.lower_bound(resp, log_rho, elogdet)
        bounds.append(bound)
        if len(bounds) > 1 and (bounds[-1] - bounds[-2]) / N < config.convergence_tol:
            converged = True
            break
        resp = np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))
    if not converged:
        log.debug("mixture fit stopped at max_iterations=%d", config.max_iterations)
    return post.to_model(config, bounds, n_iter, converged)


# -- prediction --------------------------------------------------------------


def component_log_pdf(model: MixtureModel, X) -> np.ndarray:
    """ln N(x_n | mu_k, Sigma_k) for every sample and component, shape (N, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.dim:
        raise ContractError(f"feature dimension {X.shape[1]} does not match model dimension {model.dim}")
    D = model.dim
    if model.covariance_kind == "full":
        out = np.empty((X.shape[0], model.n_components))
        for k in range(model.n_components):
            c, low = cho_factor(model.covariances[k], lower=True)
            z = solve_triangular(c, (X - model.means[k]).T, lower=True)
            logdet = 2.0 * np.log(np.diag(c)).sum()
            out[:, k] = -0.5 * (D * LOG_2PI + logdet + np.sum(z**2, axis=0))
        return out
    cov = model.covariances
    diff2 = (X[:, None, :] - model.means[None, :, :]) ** 2
    maha = np.sum(diff2 / cov[None, :, :], axis=2)
    logdet = np.log(cov).sum(axis=1)
    return -0.5 * (D * LOG_2PI + logdet[None, :] + maha)


def log_density(model: MixtureModel, feature):
    """log sum_k c_k N(feature | mu_k, Sigma_k); scalar for one vector, array for a batch."""
    if model is None:
        raise NotFittedError("no fitted mixture model")
    x = np.asarray(feature, dtype=float)
    single = x.ndim == 1
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    out = logsumexp(component_log_pdf(model, x) + logw[None, :], axis=1)
    return float(out[0]) if single else out


def floored_log_density(model: MixtureModel, feature):
    return np.maximum(log_density(model, feature), np.log(model.density_floor))


def predict_raw_density(model: MixtureModel, trajectory) -> float:
    """rho for one trajectory, clamped below by the model's density floor."""
    if model is None:
        raise NotFittedError("no fitted mixture model")
    feature = getattr(trajectory, "achieved_goal_feature", trajectory)
    return float(np.exp(floored_log_density(model, feature)))
