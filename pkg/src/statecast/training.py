"""Stateful single-step training: one observation per update, hidden state
threaded between steps, AdamW with cosine learning-rate decay, linearly
annealed free nats, early stopping, and binary checkpointing.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape
from .config import ConfigError, TrainConfig
from .data import NormStats, Observation, normalize
from .model import Forecaster
from .nn import ParamRegistry
from .ssm import StatePair, StepLosses, apply_free_nats, kl_diag_gaussian
from . import textcodec

_EPS_TRAIN = 1
_EPS_VAL = 2


class CheckpointFormatError(ValueError):
    """A checkpoint file failed validation."""


class AdamW:
    """Decoupled weight decay followed by Adam with bias correction.

    Moments are kept in float64 so long runs stay close to a 64-bit
    reference; decay skips biases and embedding rows.
    """

    def __init__(self, registry: ParamRegistry, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.registry = registry
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros(p.value.shape, dtype=np.float64)
                  for name, p in registry.items()}
        self.v = {name: np.zeros(p.value.shape, dtype=np.float64)
                  for name, p in registry.items()}
        # Master weights in float64; the float32 model values are views of
        # these after every step, so long runs track a 64-bit reference.
        self.w = {name: p.value.astype(np.float64)
                  for name, p in registry.items()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        # m_hat/(sqrt(v_hat)+eps) == sqrt(bc2)/bc1 * m/(sqrt(v)+eps*sqrt(bc2))
        lr_t = lr * math.sqrt(bc2) / bc1
        eps_t = self.eps * math.sqrt(bc2)
        for name, p in self.registry.items():
            g = p.grad.astype(np.float64)
            w = self.w[name]
            if self.weight_decay and p.kind == "weight":
                w -= lr * self.weight_decay * w
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            g *= g
            g *= 1.0 - self.beta2
            v += g
            denom = np.sqrt(v)
            denom += eps_t
            upd = m / denom
            upd *= lr_t
            w -= upd
            p.value = w.astype(p.value.dtype)


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def free_nats_schedule(epoch: int, max_epochs: int, start: float = 2.5) -> float:
    """Linear anneal from ``start`` at epoch 0 to zero at the final epoch."""
    if not 0 <= epoch < max_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {max_epochs})")
    denom = max(max_epochs - 1, 1)
    return start * (1.0 - epoch / denom)


def clip_grad_norm(registry: ParamRegistry, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in registry.parameters():
        total += float(np.vdot(p.grad, p.grad))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in registry.parameters():
            p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


def _step_losses(model: Forecaster, prev: StatePair, obs: Observation,
                 eps: np.ndarray | None, free_nats: float):
    """Forward pass of one timestep; returns loss nodes and the step output.

    Numeric failures are re-raised naming the loss term that produced them.
    """
    cfg = model.config
    term = "prior/posterior"
    try:
        fwd = model.step_forward(prev, obs.value, obs.text, eps)
        term = "value"
        l_val = model.dynamics.value_loss(fwd.x_hat, obs.value)
        l_text = None
        if obs.text is not None and not cfg.unimodal:
            term = "text"
            l_text = model.text.text_loss(fwd.x_hat, textcodec.tokenize(obs.text))
        term = "kl"
        kl_raw = kl_diag_gaussian(fwd.post, fwd.prior)
        kl_clamped = apply_free_nats(kl_raw, free_nats)
    except NumericError as exc:
        raise NumericError(f"{term} loss failed: {exc}") from exc
    return fwd, l_val, l_text, kl_raw, kl_clamped


def _weighted_total(cfg: TrainConfig, l_val, l_text, kl_clamped):
    total = ad.scale(l_val, cfg.alpha_val)
    if l_text is not None and cfg.alpha_text != 0.0:
        total = ad.add(total, ad.scale(l_text, cfg.alpha_text))
    return ad.add(total, ad.scale(kl_clamped, cfg.alpha_kl))


def train_step(model: Forecaster, opt: AdamW, prev: StatePair, obs: Observation,
               *, lr: float, free_nats: float, eps: np.ndarray
               ) -> tuple[StatePair, StepLosses]:
    """One update of the stateful loop: prior -> summary -> posterior ->
    sample -> losses -> backward -> clipped AdamW step. The returned state
    pair is detached and carries no tape references."""
    cfg = model.config
    with Tape() as tape:
        fwd, l_val, l_text, kl_raw, kl_clamped = _step_losses(
            model, prev, obs, eps, free_nats
        )
        total = _weighted_total(cfg, l_val, l_text, kl_clamped)
        if not np.isfinite(total.value):
            raise NumericError("total loss is non-finite; optimizer step skipped")
        model.registry.zero_grads()
        tape.backward(total)
    clip_grad_norm(model.registry, cfg.grad_clip)
    opt.step(lr)
    losses = StepLosses(
        l_val=l_val.item(),
        l_text=l_text.item() if l_text is not None else 0.0,
        l_kl_raw=kl_raw.item(),
        l_kl_clamped=kl_clamped.item(),
    )
    return fwd.next_state(), losses


def filtering_loss(model: Forecaster, warmup: list[Observation],
                   scored: list[Observation], seed: int) -> float:
    """Weighted negative-ELBO estimate over ``scored``, filtering through
    ``warmup`` first with posterior means and no parameter updates. The KL
    enters raw (no free-nats floor); sampling noise is fixed by the seed."""
    cfg = model.config
    state = model.initial_state()
    for obs in warmup:
        state = model.step_forward(state, obs.value, obs.text, None).next_state()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _EPS_VAL])))
    total = 0.0
    for obs in scored:
        eps = rng.standard_normal(cfg.latent_dim).astype(ad.default_dtype())
        fwd, l_val, l_text, kl_raw, _ = _step_losses(model, state, obs, eps, 0.0)
        total += cfg.alpha_val * l_val.item() + cfg.alpha_kl * kl_raw.item()
        if l_text is not None:
            total += cfg.alpha_text * l_text.item()
        state = fwd.next_state()
    return total / max(len(scored), 1)


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, loss: float) -> bool:
        if self.best is None or loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class Checkpoint:
    """A parameter snapshot plus everything needed to rebuild and reuse it."""

    config: dict
    tensors: dict[str, np.ndarray]
    norm_stats: dict | None = None
    epoch: int = -1
    best_val_loss: float = math.inf
    extra: dict = field(default_factory=dict)

    MAGIC = b"LBSCKPT1"
    VERSION = 1

    def save(self, path) -> None:
        index = []
        chunks = []
        offset = 0
        for name, arr in self.tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4")
            index.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw.tobytes())
            offset += raw.nbytes
        meta = {
            "config": self.config,
            "tensors": index,
            "norm_stats": self.norm_stats,
            "epoch": self.epoch,
            "best_val_loss": self.best_val_loss,
            "extra": self.extra,
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        blob = (
            self.MAGIC
            + struct.pack("<I", self.VERSION)
            + struct.pack("<Q", len(meta_bytes))
            + meta_bytes
            + b"".join(chunks)
        )
        crc = zlib.crc32(blob) & 0xFFFFFFFF
        with open(path, "wb") as fh:
            fh.write(blob + struct.pack("<I", crc))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < 8 or data[:8] != cls.MAGIC:
            raise CheckpointFormatError("bad magic at byte offset 0")
        if len(data) < 12:
            raise CheckpointFormatError(f"truncated header at byte offset {len(data)}")
        (version,) = struct.unpack_from("<I", data, 8)
        if version != cls.VERSION:
            raise CheckpointFormatError(
                f"unsupported version {version} at byte offset 8"
            )
        if len(data) < 20:
            raise CheckpointFormatError(f"truncated header at byte offset {len(data)}")
        (meta_len,) = struct.unpack_from("<Q", data, 12)
        meta_start = 20
        payload_start = meta_start + meta_len
        if len(data) < payload_start + 4:
            raise CheckpointFormatError(
                f"truncated metadata at byte offset {len(data)}"
            )
        (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
        actual_crc = zlib.crc32(data[:-4]) & 0xFFFFFFFF
        if stored_crc != actual_crc:
            raise CheckpointFormatError(
                f"checksum mismatch at byte offset {len(data) - 4}"
            )
        try:
            meta = json.loads(data[meta_start:payload_start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(
                f"invalid metadata at byte offset {meta_start}: {exc}"
            ) from None
        payload = data[payload_start:-4]
        tensors: dict[str, np.ndarray] = {}
        for entry in meta["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = entry["offset"]
            end = start + 4 * count
            if end > len(payload):
                raise CheckpointFormatError(
                    f"payload overrun for tensor {entry['name']!r} at byte offset "
                    f"{payload_start + start}"
                )
            arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
            tensors[entry["name"]] = arr.astype(np.float32)
        return cls(
            config=meta["config"],
            tensors=tensors,
            norm_stats=meta.get("norm_stats"),
            epoch=meta.get("epoch", -1),
            best_val_loss=meta.get("best_val_loss", math.inf),
            extra=meta.get("extra", {}),
        )

    def build_model(self) -> Forecaster:
        cfg = TrainConfig.from_dict(self.config)
        model = Forecaster(cfg)
        model.registry.load_tensors(self.tensors)
        return model

    def stats(self) -> NormStats:
        if self.norm_stats is None:
            raise CheckpointFormatError("checkpoint carries no normalization stats")
        return NormStats.from_dict(self.norm_stats)


def fit(train: list[Observation], val: list[Observation], config: TrainConfig,
        on_epoch=None) -> Checkpoint:
    """Train on the temporally ordered train split, early-stop on the
    filtering loss over the validation split, and return the best snapshot.

    Normalization stats come from the train split only. ``on_epoch`` is
    called as on_epoch(epoch, train_loss, val_loss) after each epoch.
    """
    if not train or not val:
        raise ConfigError("fit requires non-empty train and validation splits")
    config.validate()
    stats = NormStats.from_values([o.value for o in train])
    train_n = normalize(train, stats)
    val_n = normalize(val, stats)

    model = Forecaster(config)
    opt = AdamW(model.registry, config.beta1, config.beta2, config.adam_eps,
                config.weight_decay)
    total_steps = config.max_epochs * len(train_n)
    stopper = EarlyStopper(config.patience)
    best: Checkpoint | None = None
    step = 0
    for epoch in range(config.max_epochs):
        free_nats = free_nats_schedule(epoch, config.max_epochs, config.free_nats)
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([config.seed, _EPS_TRAIN, epoch]))
        )
        state = model.initial_state()
        epoch_total = 0.0
        for obs in train_n:
            lr = cosine_lr(step, total_steps, config.lr_start, config.lr_end)
            eps = rng.standard_normal(config.latent_dim).astype(ad.default_dtype())
            state, losses = train_step(
                model, opt, state, obs, lr=lr, free_nats=free_nats, eps=eps
            )
            epoch_total += losses.total(config.alpha_val, config.alpha_text,
                                        config.alpha_kl)
            step += 1
        train_loss = epoch_total / len(train_n)
        val_loss = filtering_loss(model, train_n, val_n, config.seed)
        if stopper.update(epoch, val_loss):
            best = Checkpoint(
                config=config.to_dict(),
                tensors=model.registry.tensors(),
                norm_stats=stats.to_dict(),
                epoch=epoch,
                best_val_loss=val_loss,
            )
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val_loss)
        if stopper.should_stop:
            break
    assert best is not None
    return best
