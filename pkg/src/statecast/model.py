"""Assembly of the latent dynamics and the text codec over one registry."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import textcodec
from .autodiff import Node
from .config import TrainConfig
from .nn import ParamRegistry, init_params
from .ssm import DiagGaussian, LatentDynamics, StatePair, reparam_sample
from .textcodec import TextModel


@dataclass
class StepForward:
    """Everything one filtering/training step produces on the tape."""

    prior: DiagGaussian
    h: Node
    summary: Node
    post: DiagGaussian
    x_hat: Node

    def next_state(self) -> StatePair:
        return StatePair(self.x_hat.detach(), self.h.detach())


class Forecaster:
    """One trained artifact: dynamics plus text codec sharing a registry."""

    def __init__(self, config: TrainConfig):
        config.validate()
        self.config = config
        self.registry = ParamRegistry()
        self.dynamics = LatentDynamics(
            self.registry,
            latent_dim=config.latent_dim,
            hidden_dim=config.hidden_dim,
            target_dim=config.target_dim,
            mlp_hidden=config.mlp_hidden,
            post_depth=config.post_depth,
            val_depth=config.val_depth,
        )
        self.text = TextModel(
            self.registry,
            latent_dim=config.latent_dim,
            d_model=config.d_model,
            n_heads=config.n_heads,
            depth=config.text_depth,
            ff_dim=config.ff_dim,
            n_summary=config.summary_tokens,
            n_prefix=config.prefix_tokens,
            max_seq_len=config.max_seq_len,
            summary_hidden=config.summary_hidden,
        )
        init_params(self.registry, config.seed)

    def initial_state(self) -> StatePair:
        return StatePair.zeros(self.config.latent_dim, self.config.hidden_dim)

    def summarize(self, text: str | None) -> Node:
        """Summary vector for a timestep's text; missing text (or a unimodal
        model) falls back to the learned null summary."""
        if text is None or self.config.unimodal:
            return self.text.null_summary()
        return self.text.encode_summary(textcodec.tokenize(text))

    def step_forward(self, prev: StatePair, value, text: str | None,
                     eps: np.ndarray | None) -> StepForward:
        """One pass of the per-timestep pipeline: prior from the recurrent
        hidden, text summary, posterior update, and a reparameterized sample
        (posterior mean when eps is None)."""
        prior, h = self.dynamics.prior_step(prev)
        summary = self.summarize(text)
        post = self.dynamics.posterior_infer(h, value, summary)
        if eps is None:
            x_hat = post.mean
        else:
            x_hat = reparam_sample(post, np.asarray(eps, dtype=ad.default_dtype()))
        return StepForward(prior=prior, h=h, summary=summary, post=post, x_hat=x_hat)
