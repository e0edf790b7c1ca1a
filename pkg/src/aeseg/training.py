"""Losses, Adam, and the alternating VAE / discriminator training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericalError
from .models import (ModelKind, ModelParams, build_model, decode, discriminate, encode,
                     latent_code, ModelConfig, LatentSpec)
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def for_kind(self, kind: ModelKind) -> "LossWeights":
        """Zero the weights of terms the kind does not have."""
        return LossWeights(self.lambda1,
                           self.lambda2 if kind.variational else 0.0,
                           self.lambda3 if kind.adversarial else 0.0)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 8
    lr_rec: float = 1e-3
    lr_adv: float = 1e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be >= 1 (got {self.epochs}, {self.batch_size})")
        if not (self.lr_rec > 0 and self.lr_adv > 0):
            raise ConfigError(f"learning rates must be positive (got {self.lr_rec}, {self.lr_adv})")
        w = self.weights
        if min(w.lambda1, w.lambda2, w.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")


# -- losses ---------------------------------------------------------------
def rec_loss(x: Tensor, x_hat: Tensor) -> Tensor:
    """Per-image sum of |x - x_hat|, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise DimensionError(f"rec_loss: {x.shape} vs {x_hat.shape}")
    return T.mul(T.tsum(T.absolute(T.sub(x, x_hat))), 1.0 / x.shape[0])


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over latent dims, averaged over the batch."""
    if mu.shape != logvar.shape:
        raise DimensionError(f"kl_loss: {mu.shape} vs {logvar.shape}")
    inner = T.sub(T.sub(T.add(T.square(mu), T.exp(logvar)), 1.0), logvar)
    return T.mul(T.tsum(inner), 0.5 / mu.shape[0])


def _clamped(p: Tensor) -> Tensor:
    return T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)


def adv_loss(d_on_recon: Tensor) -> Tensor:
    return T.neg(T.mean(T.log(_clamped(d_on_recon))))


def disc_loss(d_real: Tensor, d_fake: Tensor) -> Tensor:
    real = T.log(_clamped(d_real))
    fake = T.log(T.add(T.neg(_clamped(d_fake)), 1.0))
    return T.neg(T.mean(T.add(real, fake)))


# -- optimizer ------------------------------------------------------------
class Adam:
    """Adam with bias correction over a named set of tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: Adam | None,
              lr: float) -> Adam:
    """Functional wrapper: one Adam step, creating the state on first use."""
    if state is None:
        state = Adam(params, lr)
    state.lr = lr
    state.step(grads)
    return state


# -- training loop ----------------------------------------------------------
@dataclass
class LossReport:
    steps: list[dict] = field(default_factory=list)

    def add(self, step: int, epoch: int, **values) -> None:
        self.steps.append({"step": step, "epoch": epoch, **values})

    def epoch_means(self, key: str) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.steps:
            if row.get(key) is not None:
                by_epoch.setdefault(row["epoch"], []).append(row[key])
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]

    def write_csv(self, path) -> None:
        cols = ["step", "epoch", "l_rec", "l_prior", "l_adv", "l_dis"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for row in self.steps:
                w.writerow(["" if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                            for c in cols])

    @classmethod
    def read_csv(cls, path) -> "LossReport":
        rep = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = {k: (float(v) if v != "" else None) for k, v in row.items()
                        if k not in ("step", "epoch")}
                rep.add(int(row["step"]), int(row["epoch"]), **vals)
        return rep


def _grads(group: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in group.items() if t.grad is not None}


class Trainer:
    """Holds model, optimizer groups and RNG so training can be stepped manually."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        cfg.validate()
        self.params = params
        self.cfg = cfg
        self.weights = cfg.weights.for_kind(params.kind)
        self.rng = np.random.default_rng(cfg.seed)
        gen = {**params.encoder, **params.decoder}
        self.opt_rec = Adam(gen, cfg.lr_rec)
        self.opt_adv = Adam(params.decoder, cfg.lr_adv) if params.kind.adversarial else None
        self.opt_dis = Adam(params.discriminator, cfg.lr_adv) if params.kind.adversarial else None
        self.report = LossReport()
        self.global_step = 0

    def _check(self, name: str, value: float, epoch: int) -> float:
        if not math.isfinite(value):
            raise NumericalError(f"non-finite {name} ({value}) at step {self.global_step} (epoch {epoch})")
        return value

    def step(self, xb: np.ndarray, epoch: int = 0) -> dict:
        p, w = self.params, self.weights
        kind = p.kind
        x = Tensor(xb)

        p.zero_grad()
        enc = encode(p, x)
        z = latent_code(p, enc, mode="sample", rng=self.rng) if kind.variational else enc.code
        x_hat = decode(p, z)
        l_rec = rec_loss(x, x_hat)
        loss = T.mul(l_rec, w.lambda1)
        l_prior = None
        if kind.variational:
            l_prior = kl_loss(enc.mu, enc.logvar)
            loss = T.add(loss, T.mul(l_prior, w.lambda2))
        vals = {"l_rec": self._check("l_rec", l_rec.item(), epoch),
                "l_prior": None if l_prior is None else self._check("l_prior", l_prior.item(), epoch),
                "l_adv": None, "l_dis": None}
        loss.backward()
        rec_grads = _grads({**p.encoder, **p.decoder})

        adv_grads = None
        if kind.adversarial:
            p.zero_grad()
            l_adv = adv_loss(discriminate(p, x_hat))
            vals["l_adv"] = self._check("l_adv", l_adv.item(), epoch)
            T.mul(l_adv, w.lambda3).backward()
            # only the decoder is trained through the adversarial term
            adv_grads = _grads(p.decoder)

        self.opt_rec.step(rec_grads)
        if adv_grads is not None:
            self.opt_adv.step(adv_grads)

        if kind.adversarial:
            p.zero_grad()
            fake = Tensor(x_hat.data)
            l_dis = disc_loss(discriminate(p, x), discriminate(p, fake))
            vals["l_dis"] = self._check("l_dis", l_dis.item(), epoch)
            l_dis.backward()
            self.opt_dis.step(_grads(p.discriminator))
        p.zero_grad()

        self.report.add(self.global_step, epoch, **vals)
        self.global_step += 1
        return vals

    def run_epoch(self, data: np.ndarray, epoch: int) -> None:
        order = self.rng.permutation(data.shape[0])
        bs = self.cfg.batch_size
        for i in range(0, len(order), bs):
            self.step(data[order[i:i + bs]], epoch)


def train(kind: ModelKind, data: np.ndarray, cfg: TrainConfig, latent: LatentSpec | None = None,
          config: ModelConfig | None = None, params: ModelParams | None = None,
          progress=None) -> tuple[ModelParams, LossReport]:
    """Train on normal-only slices ``data`` of shape [N, 1, H, W] (or [N, H, W])."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3:
        data = data[:, None]
    if data.shape[0] == 0:
        raise ConfigError("training set is empty")
    if params is None:
        from .models import default_latent
        config = config or ModelConfig(input_size=data.shape[-1])
        params = build_model(kind, latent or default_latent(kind), config, seed=cfg.seed)
    trainer = Trainer(params, cfg)
    for epoch in range(cfg.epochs):
        trainer.run_epoch(data, epoch)
        if progress is not None:
            progress(epoch, trainer.report)
        log.debug("epoch %d l_rec %.4f", epoch, trainer.report.epoch_means("l_rec")[-1])
    return params, trainer.report
