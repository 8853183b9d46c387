"""Dataset ingestion, normalization, temporal splitting, and the synthetic
multimodal generator used for desk-scale experiments.

The JSONL dataset format is one object per line with fields t/date/value/text
(text may be absent or null). The generator additionally emits a labels file
(CSV: t, regime_hi, event_fired, shift_active) for evaluation only; the model
never reads it.
"""

from __future__ import annotations

import dataclasses
import datetime
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import ConfigError


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class Observation:
    """One aligned multimodal record: index, date, target value, optional text."""

    t: int
    date: str
    value: float
    text: str | None = None


@dataclass
class NormStats:
    """Mean/std of the training-split values; std of a constant series is
    forced to 1 with a warning so the transform stays invertible."""

    mean: float
    std: float

    @classmethod
    def from_values(cls, values) -> "NormStats":
        arr = np.asarray(values, dtype=np.float64)
        if arr.size == 0:
            raise ConfigError("cannot compute normalization stats from an empty split")
        mean = float(arr.mean())
        std = float(arr.std())
        if std <= 0.0:
            warnings.warn("constant training series; forcing std to 1")
            std = 1.0
        return cls(mean=mean, std=std)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(mean=float(d["mean"]), std=float(d["std"]))


def load_jsonl(path) -> list[Observation]:
    """Parse a JSONL dataset; out-of-order records are an error, never
    silently reordered."""
    observations: list[Observation] = []
    prev_t: int | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"line {lineno}: expected an object")
            for field in ("t", "date", "value"):
                if field not in rec or rec[field] is None:
                    raise DataError(f"line {lineno}: missing field {field!r}")
            t = int(rec["t"])
            value = float(rec["value"])
            if not math.isfinite(value):
                raise DataError(f"line {lineno}: non-finite value")
            if prev_t is not None and t <= prev_t:
                raise DataError(
                    f"line {lineno}: t={t} not strictly increasing after {prev_t}"
                )
            prev_t = t
            text = rec.get("text")
            if text is not None and not isinstance(text, str):
                raise DataError(f"line {lineno}: text must be a string or null")
            observations.append(
                Observation(t=t, date=str(rec["date"]), value=value, text=text)
            )
    return observations


def save_jsonl(path, observations: list[Observation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obs in observations:
            fh.write(json.dumps(dataclasses.asdict(obs), sort_keys=True) + "\n")


def split_811(series: list) -> tuple[list, list, list]:
    """First 80% train, next 10% validation, remainder test; contiguous and
    order-preserving."""
    n = len(series)
    if n < 10:
        raise ConfigError(f"series too short to split 8-1-1: length {n} < 10")
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return series[:n_train], series[n_train:n_train + n_val], series[n_train + n_val:]


def normalize(series: list[Observation], stats: NormStats) -> list[Observation]:
    return [
        dataclasses.replace(obs, value=(obs.value - stats.mean) / stats.std)
        for obs in series
    ]


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.std + stats.mean


@dataclass
class SynthConfig:
    """Seasonal series with regime-dependent noise and text-forewarned shifts.

    An event fired at time t adds ``event_shift`` to the values at
    t+1 .. t+event_lead; the value at t itself is untouched, so the upcoming
    shift is inferable only from the forewarning sentence in the text.
    """

    length: int = 2000
    period: int = 50
    amplitude: float = 1.0
    slope: float = 0.0
    noise_lo: float = 0.1
    noise_hi: float = 0.5
    event_rate: float = 0.0
    event_shift: float = 1.0
    event_lead: int = 3
    seed: int = 0
    start_date: str = "2000-01-01"

    def validate(self) -> None:
        if self.length <= 0:
            raise ConfigError(f"length must be positive, got {self.length}")
        if self.period < 2:
            raise ConfigError(f"period must be >= 2, got {self.period}")
        if not 0.0 <= self.event_rate <= 1.0:
            raise ConfigError(f"event_rate must be in [0, 1], got {self.event_rate}")
        if self.event_lead < 1:
            raise ConfigError(f"event_lead must be >= 1, got {self.event_lead}")
        for name in ("amplitude", "slope", "noise_lo", "noise_hi", "event_shift"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")


@dataclass
class SynthLabels:
    """Ground-truth generator labels, for evaluation only."""

    t: list[int]
    regime_hi: list[int]
    event_fired: list[int]
    shift_active: list[int]

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t,regime_hi,event_fired,shift_active\n")
            for row in zip(self.t, self.regime_hi, self.event_fired, self.shift_active):
                fh.write(",".join(str(v) for v in row) + "\n")


def seasonal_phase(cfg: SynthConfig, t) -> np.ndarray:
    """The generator's seasonal phase signal sin(2*pi*t/period)."""
    return np.sin(2.0 * np.pi * np.asarray(t, dtype=np.float64) / cfg.period)


_LEVELS = ("low", "mid", "high")
_TRENDS = ("rising", "falling", "steady")
_REGIMES = ("calm", "choppy")
ALERT_SENTENCE = "alert: surge expected soon."


def _descriptor(cfg: SynthConfig, seasonal: float, d_seasonal: float,
                shift: float, hi_regime: bool) -> str:
    base = seasonal + shift
    if base > cfg.amplitude / 3.0:
        level = "high"
    elif base < -cfg.amplitude / 3.0:
        level = "low"
    else:
        level = "mid"
    if d_seasonal > 0.31:
        trend = "rising"
    elif d_seasonal < -0.31:
        trend = "falling"
    else:
        trend = "steady"
    regime = "choppy" if hi_regime else "calm"
    return f"level {level}, {trend}, {regime}."


def synth_generate(cfg: SynthConfig) -> tuple[list[Observation], SynthLabels]:
    """Deterministic multimodal series with per-step labels."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    start = datetime.date.fromisoformat(cfg.start_date)
    T = cfg.length

    fired = (rng.random(T) < cfg.event_rate).astype(np.int64)
    shift = np.zeros(T, dtype=np.float64)
    for t in np.flatnonzero(fired):
        lo = t + 1
        hi = min(T, t + cfg.event_lead + 1)
        shift[lo:hi] += cfg.event_shift

    phase = 2.0 * np.pi * np.arange(T, dtype=np.float64) / cfg.period
    seasonal = cfg.amplitude * np.sin(phase)
    d_seasonal = np.cos(phase)
    hi_regime = (np.arange(T) % cfg.period) >= (cfg.period / 2.0)
    sigma = np.where(hi_regime, cfg.noise_hi, cfg.noise_lo)
    noise = rng.standard_normal(T) * sigma
    values = seasonal + cfg.slope * np.arange(T, dtype=np.float64) + shift + noise

    observations = []
    for t in range(T):
        date = (start + datetime.timedelta(days=t)).isoformat()
        text = f"DATE={date} " + _descriptor(
            cfg, seasonal[t], d_seasonal[t], shift[t], bool(hi_regime[t])
        )
        if fired[t]:
            text += " " + ALERT_SENTENCE
        observations.append(
            Observation(t=t, date=date, value=float(values[t]), text=text)
        )
    labels = SynthLabels(
        t=list(range(T)),
        regime_hi=[int(v) for v in hi_regime],
        event_fired=[int(v) for v in fired],
        shift_active=[int(v > 0) for v in shift],
    )
    return observations, labels
