"""Quantitative evaluation: rolling-origin RMSE per horizon, uncertainty
interval coverage, latent-trajectory PCA export, and the exact linear-Gaussian
Kalman oracle used as ground truth for the variational machinery.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from . import autodiff as ad
from .data import NormStats, Observation, normalize
from .forecast import rollout
from .model import Forecaster
from .ssm import DiagGaussian, kl_diag_gaussian

_EVAL_TAG = 5


class OracleError(ArithmeticError):
    """The Kalman recursion hit a numerically invalid state."""


# ---------------------------------------------------------------------------
# Linear-Gaussian oracle
# ---------------------------------------------------------------------------


@dataclass
class LGSSMParams:
    """Exact linear-Gaussian system: x' = A x + w, y = C x + v, with diagonal
    process/emission noise and a diagonal initial covariance."""

    a: np.ndarray          # (N, N)
    q: np.ndarray          # (N,) diagonal process noise variances
    c: np.ndarray          # (M, N)
    r: np.ndarray          # (M,) diagonal emission noise variances
    init_mean: np.ndarray  # (N,)
    init_cov: np.ndarray   # (N,) diagonal

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.q = np.atleast_1d(np.asarray(self.q, dtype=np.float64))
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        self.r = np.atleast_1d(np.asarray(self.r, dtype=np.float64))
        self.init_mean = np.atleast_1d(np.asarray(self.init_mean, dtype=np.float64))
        self.init_cov = np.atleast_1d(np.asarray(self.init_cov, dtype=np.float64))
        if np.any(self.q <= 0) or np.any(self.r <= 0):
            raise ContractError("process/emission noise variances must be positive")

    @property
    def n(self) -> int:
        return self.a.shape[0]

    @property
    def m(self) -> int:
        return self.c.shape[0]

    def to_json(self, path) -> None:
        payload = {
            "a": self.a.tolist(), "q": self.q.tolist(), "c": self.c.tolist(),
            "r": self.r.tolist(), "init_mean": self.init_mean.tolist(),
            "init_cov": self.init_cov.tolist(),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "LGSSMParams":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(a=d["a"], q=d["q"], c=d["c"], r=d["r"],
                   init_mean=d["init_mean"], init_cov=d["init_cov"])


def sample_lgssm(p: LGSSMParams, length: int, seed: int
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Draw (states, observations) from the system; x_1 ~ N(init_mean, init_cov)."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    xs = np.zeros((length, p.n))
    ys = np.zeros((length, p.m))
    x = p.init_mean + np.sqrt(p.init_cov) * rng.standard_normal(p.n)
    for t in range(length):
        xs[t] = x
        ys[t] = p.c @ x + np.sqrt(p.r) * rng.standard_normal(p.m)
        x = p.a @ x + np.sqrt(p.q) * rng.standard_normal(p.n)
    return xs, ys


@dataclass
class KalmanResult:
    means: np.ndarray       # (T, N) filtered means
    covs: np.ndarray        # (T, N, N) filtered covariances
    pred_means: np.ndarray  # (T, N) one-step state predictions
    pred_covs: np.ndarray   # (T, N, N)
    obs_pred_mean: np.ndarray  # (T, M) one-step observation predictions
    obs_pred_var: np.ndarray   # (T, M) their variances
    loglik: float


def kalman_filter_oracle(p: LGSSMParams, ys: np.ndarray) -> KalmanResult:
    """Textbook predict/update recursion in 64-bit, including the exact
    innovation-based log-likelihood of the observation sequence."""
    ys = np.atleast_2d(np.asarray(ys, dtype=np.float64))
    if ys.ndim == 2 and ys.shape[1] != p.m:
        ys = ys.reshape(-1, p.m)
    T = ys.shape[0]
    n, m = p.n, p.m
    eye = np.eye(n)
    means = np.zeros((T, n))
    covs = np.zeros((T, n, n))
    pred_means = np.zeros((T, n))
    pred_covs = np.zeros((T, n, n))
    obs_pred_mean = np.zeros((T, m))
    obs_pred_var = np.zeros((T, m))
    loglik = 0.0

    mean = p.init_mean.copy()
    cov = np.diag(p.init_cov)
    for t in range(T):
        pred_means[t] = mean
        pred_covs[t] = cov
        s = p.c @ cov @ p.c.T + np.diag(p.r)
        sign, logdet = np.linalg.slogdet(s)
        if sign <= 0:
            raise OracleError(f"innovation covariance not positive definite at t={t}")
        innov = ys[t] - p.c @ mean
        solve = np.linalg.solve(s, innov)
        loglik += -0.5 * (m * math.log(2.0 * math.pi) + logdet + innov @ solve)
        gain = cov @ p.c.T @ np.linalg.inv(s)
        mean = mean + gain @ innov
        cov = (eye - gain @ p.c) @ cov
        cov = 0.5 * (cov + cov.T)
        means[t] = mean
        covs[t] = cov
        obs_pred_mean[t] = p.c @ pred_means[t]
        obs_pred_var[t] = np.diag(p.c @ pred_covs[t] @ p.c.T) + p.r
        mean = p.a @ mean
        cov = p.a @ cov @ p.a.T + np.diag(p.q)
    return KalmanResult(means, covs, pred_means, pred_covs,
                        obs_pred_mean, obs_pred_var, float(loglik))


def gaussian_logpdf(y: float, mean: float, var: float) -> float:
    return -0.5 * (math.log(2.0 * math.pi * var) + (y - mean) ** 2 / var)


def lgssm_elbo(p: LGSSMParams, q_means: np.ndarray, q_vars: np.ndarray,
               ys: np.ndarray) -> float:
    """Sequence bound for a scalar system with a diagonal-Gaussian filtering
    family q: expected value likelihood minus the KL against the predictive
    prior obtained by propagating the previous q through the dynamics. With q
    equal to the exact Kalman posterior this equals the sequence
    log-likelihood; any other q gives strictly less."""
    if p.n != 1 or p.m != 1:
        raise ContractError("lgssm_elbo is defined for the scalar system")
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    q_means = np.asarray(q_means, dtype=np.float64).reshape(-1)
    q_vars = np.asarray(q_vars, dtype=np.float64).reshape(-1)
    a = float(p.a[0, 0])
    qn = float(p.q[0])
    c = float(p.c[0, 0])
    r = float(p.r[0])
    pred_mean = float(p.init_mean[0])
    pred_var = float(p.init_cov[0])
    elbo = 0.0
    with ad.use_dtype(np.float64):
        for t in range(len(ys)):
            mu, var = q_means[t], q_vars[t]
            elbo += gaussian_logpdf(ys[t], c * mu, r) - (c * c * var) / (2.0 * r)
            q_t = DiagGaussian(ad.constant([mu]), ad.constant([math.log(var)]))
            p_t = DiagGaussian(ad.constant([pred_mean]),
                               ad.constant([math.log(pred_var)]))
            elbo -= kl_diag_gaussian(q_t, p_t).item()
            pred_mean = a * mu
            pred_var = a * a * var + qn
    return elbo


def model_step_elbo(model: Forecaster, observations: list[Observation],
                    seed: int) -> tuple[float, np.ndarray]:
    """One-sample ELBO of the trained model over a (normalized) segment, using
    the exact value log-density (unit emission variance) and the raw KL.
    Returns (total, per-step terms)."""
    state = model.initial_state()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _EVAL_TAG])))
    terms = np.zeros(len(observations))
    for i, obs in enumerate(observations):
        eps = rng.standard_normal(model.config.latent_dim).astype(ad.default_dtype())
        fwd = model.step_forward(state, obs.value, obs.text, eps)
        pred = model.dynamics.emit(fwd.x_hat).value.reshape(-1)
        val_ll = sum(
            gaussian_logpdf(float(np.reshape(obs.value, -1)[j]), float(pred[j]), 1.0)
            for j in range(len(pred))
        )
        kl = kl_diag_gaussian(fwd.post, fwd.prior).item()
        terms[i] = val_ll - kl
        state = fwd.next_state()
    return float(terms.sum()), terms


# ---------------------------------------------------------------------------
# Rolling-origin evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    horizons: list[int]
    rmse: list[float]
    coverage80: float
    coverage95: float
    mean_loglik: float
    n_origins: int

    def to_dict(self) -> dict:
        return {
            "horizons": self.horizons,
            "rmse": self.rmse,
            "coverage80": self.coverage80,
            "coverage95": self.coverage95,
            "mean_loglik": self.mean_loglik,
            "n_origins": self.n_origins,
        }

    def csv_text(self) -> str:
        lines = ["horizon,rmse"]
        for h, e in zip(self.horizons, self.rmse):
            lines.append(f"{h},{repr(e)}")
        lines.append(f"coverage80,{repr(self.coverage80)}")
        lines.append(f"coverage95,{repr(self.coverage95)}")
        lines.append(f"mean_loglik,{repr(self.mean_loglik)}")
        return "\n".join(lines) + "\n"

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())


def interval_coverage(samples: np.ndarray, targets: np.ndarray,
                      nominal: float) -> float:
    """Fraction of targets inside the central empirical quantile interval of
    their sample fan. samples is (n_points, n_samples)."""
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if samples.ndim != 2 or samples.shape[0] != targets.shape[0]:
        raise ContractError(
            f"coverage: shapes {samples.shape} and {targets.shape} do not conform"
        )
    if samples.shape[1] < 4:
        raise ContractError(
            f"coverage: need at least 4 samples per point, got {samples.shape[1]}"
        )
    alpha = (1.0 - nominal) / 2.0
    lo = np.quantile(samples, alpha, axis=1)
    hi = np.quantile(samples, 1.0 - alpha, axis=1)
    inside = (targets >= lo) & (targets <= hi)
    return float(inside.mean())


def rolling_origin_eval(model: Forecaster, observations: list[Observation],
                        stats: NormStats, test_start: int, horizons: list[int],
                        n_samples: int, seed: int) -> EvalReport:
    """Rolling-origin evaluation over every test timestep: filter up to each
    origin (incrementally), roll out to the largest horizon, and aggregate
    per-horizon RMSE on the original scale. Coverage and predictive
    log-likelihood are reported for one-step-ahead forecasts."""
    horizons = sorted(set(int(h) for h in horizons))
    if not horizons or horizons[0] < 1:
        raise ContractError(f"horizons must be >= 1, got {horizons}")
    T = len(observations)
    if test_start >= T:
        raise ContractError(f"test_start {test_start} beyond series length {T}")
    h_max = horizons[-1]
    if h_max > T - 1 - test_start:
        warnings.warn(
            f"largest horizon {h_max} exceeds test span; truncating"
        )
    normalized = normalize(observations, stats)

    state = model.initial_state()
    for obs in normalized[:test_start]:
        state = model.step_forward(state, obs.value, obs.text, None).next_state()

    sq_err: dict[int, list[float]] = {h: [] for h in horizons}
    h1_samples: list[np.ndarray] = []
    h1_targets: list[float] = []
    for i in range(test_start, T):
        state = model.step_forward(
            state, normalized[i].value, normalized[i].text, None
        ).next_state()
        h_valid = min(h_max, T - 1 - i)
        if h_valid < 1:
            continue
        result = rollout(model, state, h_valid, n_samples,
                         seed=(seed ^ (i * 2654435761)) & 0xFFFFFFFF, stats=stats)
        for h in horizons:
            if h <= h_valid:
                err = result.mean[h - 1] - observations[i + h].value
                sq_err[h].append(float(err) ** 2)
        h1_samples.append(result.samples[0])
        h1_targets.append(observations[i + 1].value)

    rmse = [
        math.sqrt(float(np.mean(sq_err[h]))) if sq_err[h] else math.nan
        for h in horizons
    ]
    sample_mat = np.asarray(h1_samples)
    target_vec = np.asarray(h1_targets)
    if n_samples >= 4 and len(h1_samples) > 0:
        cov80 = interval_coverage(sample_mat, target_vec, 0.80)
        cov95 = interval_coverage(sample_mat, target_vec, 0.95)
    else:
        cov80 = cov95 = math.nan
    if len(h1_samples) > 0:
        means = sample_mat.mean(axis=1)
        variances = np.maximum(sample_mat.var(axis=1), 1e-9)
        loglik = float(np.mean([
            gaussian_logpdf(t, m, v)
            for t, m, v in zip(target_vec, means, variances)
        ]))
    else:
        loglik = math.nan
    return EvalReport(
        horizons=horizons, rmse=rmse, coverage80=cov80, coverage95=cov95,
        mean_loglik=loglik, n_origins=len(h1_samples),
    )


# ---------------------------------------------------------------------------
# Latent-trajectory export
# ---------------------------------------------------------------------------


def latent_trajectory(model: Forecaster, observations: list[Observation],
                      stats: NormStats) -> np.ndarray:
    """Filtered posterior means over a series, as a (T, latent_dim) array."""
    normalized = normalize(observations, stats)
    state = model.initial_state()
    out = np.zeros((len(normalized), model.config.latent_dim))
    for i, obs in enumerate(normalized):
        fwd = model.step_forward(state, obs.value, obs.text, None)
        out[i] = fwd.post.mean.value
        state = fwd.next_state()
    return out


@dataclass
class PCAResult:
    components: np.ndarray   # (k, N), unit-norm rows sorted by variance
    projections: np.ndarray  # (T, k)
    explained: np.ndarray    # (k,) eigenvalues


def pca_latents(trajectory: np.ndarray, n_components: int = 3) -> PCAResult:
    """Mean-centered covariance eigendecomposition; components sorted by
    descending eigenvalue with the largest-magnitude loading made positive.
    Degenerate rank pads the remaining components with zeros."""
    X = np.asarray(trajectory, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < n_components:
        raise ContractError(
            f"pca: need at least {n_components} rows, got shape {X.shape}"
        )
    Xc = X - X.mean(axis=0, keepdims=True)
    cov = (Xc.T @ Xc) / max(X.shape[0] - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    k = n_components
    components = np.zeros((k, X.shape[1]))
    explained = np.zeros(k)
    rank = int(np.sum(eigvals > 1e-12))
    if rank < k:
        warnings.warn(f"latent trajectory has rank {rank} < {k}; zero-padding")
    for i in range(min(k, rank)):
        comp = eigvecs[:, i]
        j = int(np.argmax(np.abs(comp)))
        if comp[j] < 0:
            comp = -comp
        components[i] = comp
        explained[i] = eigvals[i]
    projections = Xc @ components.T
    return PCAResult(components=components, projections=projections,
                     explained=explained)
