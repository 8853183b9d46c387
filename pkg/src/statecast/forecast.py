"""Open-loop multi-horizon forecasting from a filtered state.

Filtering uses posterior means so the delivered state is deterministic;
rollouts sample the prior with a random stream keyed by (sample, step), so a
length-h forecast is an exact prefix of a length-H one under the same seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import NormStats, Observation
from .model import Forecaster
from .ssm import StatePair, reparam_sample

_ROLLOUT_TAG = 3


@dataclass
class ForecastResult:
    """Per-horizon forecast mean/variance plus the raw sample fan, all on the
    original (denormalized) scale."""

    horizons: list[int]
    mean: np.ndarray
    variance: np.ndarray
    samples: np.ndarray  # (H, n_samples)
    texts: dict[int, str] | None = None

    def csv_text(self) -> str:
        n = self.samples.shape[1]
        header = "horizon,mean,variance," + ",".join(f"sample_{i}" for i in range(n))
        lines = [header]
        for i, h in enumerate(self.horizons):
            row = [str(h), repr(float(self.mean[i])), repr(float(self.variance[i]))]
            row += [repr(float(v)) for v in self.samples[i]]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        out = {
            "horizons": self.horizons,
            "mean": [float(v) for v in self.mean],
            "variance": [float(v) for v in self.variance],
            "samples": [[float(v) for v in row] for row in self.samples],
        }
        if self.texts is not None:
            out["texts"] = {str(k): v for k, v in self.texts.items()}
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.csv_text())

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def filter_history(model: Forecaster, history: list[Observation]) -> StatePair:
    """Deterministic filtered state after consuming the (normalized) history;
    an empty history yields the zero initial state."""
    state = model.initial_state()
    for obs in history:
        state = model.step_forward(state, obs.value, obs.text, None).next_state()
    return state


def _sample_rng(seed: int, sample: int, step: int) -> np.random.Generator:
    key = np.random.SeedSequence([seed & 0xFFFFFFFF, _ROLLOUT_TAG, sample, step])
    return np.random.Generator(np.random.PCG64(key))


def rollout(model: Forecaster, start: StatePair, horizon: int, n_samples: int,
            seed: int, stats: NormStats | None = None) -> ForecastResult:
    """Monte-Carlo prior rollout: per sample, iterate the transition, draw a
    latent via reparameterization, emit a value, and feed the sample forward.
    Mean/variance are across samples per horizon."""
    if horizon < 1:
        raise ad.ContractError(f"rollout: horizon must be >= 1, got {horizon}")
    if n_samples < 1:
        raise ad.ContractError(f"rollout: need n_samples >= 1, got {n_samples}")
    cfg = model.config
    raw = np.zeros((horizon, n_samples), dtype=np.float64)
    latents0 = np.zeros((horizon, cfg.latent_dim), dtype=np.float64)
    for si in range(n_samples):
        state = start
        for step in range(horizon):
            prior, h = model.dynamics.prior_step(state)
            eps = _sample_rng(seed, si, step).standard_normal(
                cfg.latent_dim).astype(ad.default_dtype())
            x = reparam_sample(prior, eps)
            y = model.dynamics.emit(x)
            raw[step, si] = float(y.value.reshape(-1)[0])
            state = StatePair(x.detach(), h.detach())
            if si == 0:
                latents0[step] = x.value
    if stats is not None:
        values = raw * stats.std + stats.mean
    else:
        values = raw
    result = ForecastResult(
        horizons=list(range(1, horizon + 1)),
        mean=values.mean(axis=1),
        variance=values.var(axis=1),
        samples=values,
    )
    result.sample0_latents = latents0
    return result


def forecast_text(model: Forecaster, state_sample: np.ndarray, date_string: str,
                  max_len: int, temperature: float, seed: int) -> str:
    """Generated text for one forecast step, using the plain-text date prefix
    convention the training corpus follows."""
    prompt = f"DATE={date_string} "
    return model.text.generate(state_sample, max_len, temperature, seed, prompt)
