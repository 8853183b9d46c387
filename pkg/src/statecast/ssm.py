"""Latent dynamical model: Gaussian prior transition driven by a GRU, numeric
emission head, neural-Kalman posterior over (hidden, value, text summary),
reparameterized sampling, and KL regularization with a free-nats floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .nn import GRUCell, Linear, MLP, ParamRegistry

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0


@dataclass
class DiagGaussian:
    """Diagonal Gaussian via mean and log-variance nodes over the latent dim."""

    mean: Node
    log_var: Node

    @property
    def dim(self) -> int:
        return self.mean.value.shape[0]


@dataclass
class StatePair:
    """Sampled latent state plus deterministic recurrent hidden, detached from
    any tape: the object threaded between stateful training steps."""

    x_hat: np.ndarray
    h: np.ndarray

    @classmethod
    def zeros(cls, latent_dim: int, hidden_dim: int) -> "StatePair":
        dt = ad.default_dtype()
        return cls(np.zeros(latent_dim, dtype=dt), np.zeros(hidden_dim, dtype=dt))


@dataclass
class StepLosses:
    """Per-step loss terms, recorded after the update."""

    l_val: float
    l_text: float
    l_kl_raw: float
    l_kl_clamped: float

    def total(self, alpha_val: float, alpha_text: float, alpha_kl: float) -> float:
        return (
            alpha_val * self.l_val
            + alpha_text * self.l_text
            + alpha_kl * self.l_kl_clamped
        )


def reparam_sample(g: DiagGaussian, eps: np.ndarray) -> Node:
    """x = mean + exp(0.5 * log_var) * eps, differentiable in mean/log_var."""
    std = ad.exp(ad.scale(g.log_var, 0.5))
    return ad.add(g.mean, ad.mul(std, ad.constant(eps)))


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian) -> Node:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over dimensions."""
    if q.mean.value.shape != p.mean.value.shape:
        raise ad.ContractError(
            f"kl: dimensions {q.mean.value.shape} and {p.mean.value.shape} differ"
        )
    log_ratio = ad.sub(p.log_var, q.log_var)  # log sigma_p^2 - log sigma_q^2
    var_ratio = ad.exp(ad.neg(log_ratio))     # sigma_q^2 / sigma_p^2
    diff = ad.sub(q.mean, p.mean)
    maha = ad.mul(ad.square(diff), ad.exp(ad.neg(p.log_var)))
    inner = ad.add_const(ad.add(ad.add(var_ratio, maha), log_ratio), -1.0)
    return ad.scale(ad.total(inner), 0.5)


def apply_free_nats(kl_raw: Node, free_nats: float) -> Node:
    """Loss contribution max(kl, free_nats): below the floor the KL term is a
    constant and contributes no gradient."""
    if free_nats < 0:
        raise ad.ContractError(f"free nats must be >= 0, got {free_nats}")
    if free_nats == 0.0:
        return kl_raw
    return ad.maximum_scalar(kl_raw, free_nats)


class LatentDynamics:
    """Prior transition, posterior inference, and numeric emission heads.

    The prior is a GRU step over the (detached) previous state pair followed
    by linear mean/log-variance heads; the posterior is an MLP over the
    concatenated hidden, observed value, and text summary.
    """

    def __init__(self, registry: ParamRegistry, latent_dim: int, hidden_dim: int,
                 target_dim: int = 1, mlp_hidden: int = 64,
                 post_depth: int = 2, val_depth: int = 2):
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.target_dim = target_dim
        self.gru = GRUCell(registry, "ssm.gru", latent_dim, hidden_dim)
        self.prior_mean = Linear(registry, "ssm.prior_mean", hidden_dim, latent_dim)
        self.prior_log_var = Linear(registry, "ssm.prior_log_var", hidden_dim, latent_dim)
        post_in = hidden_dim + target_dim + latent_dim
        post_dims = [post_in] + [mlp_hidden] * (post_depth - 1) + [2 * latent_dim]
        self.post_mlp = MLP(registry, "ssm.post", post_dims)
        val_dims = [latent_dim] + [mlp_hidden] * (val_depth - 1) + [target_dim]
        self.val_mlp = MLP(registry, "ssm.val", val_dims)

    def prior_step(self, prev: StatePair) -> tuple[DiagGaussian, Node]:
        """Advance the recurrent hidden and read the prior for the next state.

        The previous state enters as constants, so gradients reach the GRU and
        head parameters but never an earlier step's tape.
        """
        x_prev = ad.constant(prev.x_hat)
        h_prev = ad.constant(prev.h)
        h_new = self.gru.step(x_prev, h_prev)
        mean = self.prior_mean(h_new)
        log_var = ad.clamp(self.prior_log_var(h_new), LOG_VAR_MIN, LOG_VAR_MAX)
        return DiagGaussian(mean, log_var), h_new

    def posterior_infer(self, h: Node, y: np.ndarray, s: Node) -> DiagGaussian:
        """Neural-Kalman update: MLP over concat(hidden, value, summary)."""
        y = np.asarray(y, dtype=ad.default_dtype()).reshape(-1)
        if y.shape[0] != self.target_dim:
            raise ad.ContractError(
                f"posterior: value has dim {y.shape[0]}, expected {self.target_dim}"
            )
        inp = ad.concat([h, ad.constant(y), s])
        out = self.post_mlp(inp)
        n = self.latent_dim
        mean = ad.slice_rows(out, 0, n)
        log_var = ad.clamp(ad.slice_rows(out, n, 2 * n), LOG_VAR_MIN, LOG_VAR_MAX)
        return DiagGaussian(mean, log_var)

    def emit(self, x_hat: Node) -> Node:
        """Predicted value for a latent state (normalized scale)."""
        return self.val_mlp(x_hat)

    def value_loss(self, x_hat: Node, y: np.ndarray) -> Node:
        """Squared error between the emission and the normalized target; equal
        to the unit-variance Gaussian NLL up to affine constants."""
        y = np.asarray(y, dtype=ad.default_dtype()).reshape(-1)
        pred = self.emit(x_hat)
        return ad.total(ad.square(ad.sub(pred, ad.constant(y))))
