"""Encoder/decoder/discriminator graphs for the six autoencoding variants.

Layout (shared by every kind so trunk capacity is equal):

* encoder: ``stages`` x [3x3 conv stride 2, leaky ReLU], widths doubling from
  ``base_width``;
* bottleneck: 1x1 conv to ``c`` channels (spatial) or flatten + dense to ``d``
  (dense); variational kinds get a second head for the log-variance;
* decoder: mirror of the encoder using nearest upsampling + 3x3 conv, then a
  final 3x3 conv and sigmoid;
* discriminator: its own copy of the encoder trunk, global average pool,
  dense to one logit, sigmoid.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .tensor import Tensor

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
LOGVAR_INIT = -6.0


class ModelKind(str, enum.Enum):
    dAE = "dAE"
    sAE = "sAE"
    dVAE = "dVAE"
    sVAE = "sVAE"
    sAE_GAN = "sAE_GAN"
    AnoVAEGAN = "AnoVAEGAN"

    @property
    def variational(self) -> bool:
        return self in (ModelKind.dVAE, ModelKind.sVAE, ModelKind.AnoVAEGAN)

    @property
    def adversarial(self) -> bool:
        return self in (ModelKind.sAE_GAN, ModelKind.AnoVAEGAN)

    @property
    def dense_bottleneck(self) -> bool:
        return self in (ModelKind.dAE, ModelKind.dVAE)

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        key = text.replace("-", "").replace("_", "").lower()
        for kind in cls:
            if kind.value.replace("_", "").lower() == key:
                return kind
        raise ConfigError(f"unknown model kind {text!r}; expected one of "
                          + ", ".join(k.value for k in cls))


@dataclass(frozen=True)
class DenseLatent:
    d: int

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigError(f"dense latent size must be positive, got {self.d}")

    def shape(self, n: int) -> tuple[int, ...]:
        return (n, self.d)

    def __str__(self) -> str:
        return f"dense:{self.d}"


@dataclass(frozen=True)
class SpatialLatent:
    h: int
    w: int
    c: int

    def __post_init__(self):
        if min(self.h, self.w, self.c) <= 0:
            raise ConfigError(f"spatial latent dims must be positive, got {self.h}x{self.w}x{self.c}")

    def shape(self, n: int) -> tuple[int, ...]:
        return (n, self.c, self.h, self.w)

    def __str__(self) -> str:
        return f"spatial:{self.h}x{self.w}x{self.c}"


LatentSpec = Union[DenseLatent, SpatialLatent]


def parse_latent(text: str) -> LatentSpec:
    """``dense:512`` or ``spatial:16x16x64``."""
    try:
        kind, _, rest = text.partition(":")
        if kind == "dense":
            return DenseLatent(int(rest))
        if kind == "spatial":
            h, w, c = (int(v) for v in rest.lower().split("x"))
            return SpatialLatent(h, w, c)
    except ValueError:
        pass
    raise ConfigError(f"bad latent spec {text!r}; expected dense:D or spatial:HxWxC")


@dataclass
class ModelConfig:
    input_size: int = 64
    stages: int = 3
    base_width: int = 16
    leaky_slope: float = 0.2

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** s for s in range(self.stages)]

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2 ** self.stages


def default_latent(kind: ModelKind) -> LatentSpec:
    return DenseLatent(128) if kind.dense_bottleneck else SpatialLatent(8, 8, 32)


@dataclass
class EncoderOutput:
    code: Tensor | None = None
    mu: Tensor | None = None
    logvar: Tensor | None = None

    @property
    def variational(self) -> bool:
        return self.mu is not None


@dataclass
class ModelParams:
    kind: ModelKind
    latent: LatentSpec
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    @property
    def encoder(self) -> dict[str, Tensor]:
        return self.group("enc")

    @property
    def decoder(self) -> dict[str, Tensor]:
        return self.group("dec")

    @property
    def discriminator(self) -> dict[str, Tensor]:
        return self.group("dis")

    def num_parameters(self, prefix: str | None = None) -> int:
        items = self.tensors if prefix is None else self.group(prefix)
        return sum(t.size for t in items.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        tensors = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                   for k, v in self.tensors.items()}
        return ModelParams(self.kind, self.latent, self.config, tensors)


def check_consistency(kind: ModelKind, latent: LatentSpec, config: ModelConfig) -> None:
    if config.stages < 1 or config.base_width < 1:
        raise ConfigError(f"stages and base_width must be >= 1, got {config.stages}, {config.base_width}")
    factor = 2 ** config.stages
    if config.input_size % factor:
        raise ConfigError(f"input size {config.input_size} is not divisible by 2^{config.stages}={factor}")
    if kind.dense_bottleneck != isinstance(latent, DenseLatent):
        want = "dense" if kind.dense_bottleneck else "spatial"
        raise ConfigError(f"{kind.value} requires a {want} latent, got {latent}")
    if isinstance(latent, SpatialLatent):
        fm = config.bottleneck_size
        if (latent.h, latent.w) != (fm, fm):
            raise ConfigError(
                f"spatial latent {latent.h}x{latent.w} does not match the encoder's final "
                f"feature map: expected {fm}x{fm} for input {config.input_size} and {config.stages} stages")


def build_model(kind: ModelKind, latent: LatentSpec, config: ModelConfig | None = None,
                seed: int = 0) -> ModelParams:
    config = config or ModelConfig()
    check_consistency(kind, latent, config)
    rng = np.random.default_rng(seed)
    slope = config.leaky_slope
    tensors: dict[str, Tensor] = {}

    def conv(name, f, c, k, gain=True):
        std = np.sqrt(2.0 / ((1.0 + slope ** 2) * c * k * k)) if gain else np.sqrt(1.0 / (c * k * k))
        tensors[name + ".w"] = Tensor(rng.normal(0.0, std, (f, c, k, k)).astype(np.float32),
                                      requires_grad=True, name=name + ".w")
        tensors[name + ".b"] = Tensor(np.zeros(f, np.float32), requires_grad=True, name=name + ".b")

    def lin(name, d, e, gain=True):
        std = np.sqrt(2.0 / ((1.0 + slope ** 2) * d)) if gain else np.sqrt(1.0 / d)
        tensors[name + ".w"] = Tensor(rng.normal(0.0, std, (d, e)).astype(np.float32),
                                      requires_grad=True, name=name + ".w")
        tensors[name + ".b"] = Tensor(np.zeros(e, np.float32), requires_grad=True, name=name + ".b")

    widths = config.widths()
    fm = config.bottleneck_size
    flat = widths[-1] * fm * fm

    c_in = 1
    for s, wdt in enumerate(widths):
        conv(f"enc.conv{s}", wdt, c_in, 3)
        c_in = wdt
    heads = ("mu", "logvar") if kind.variational else ("code",)
    for head in heads:
        if isinstance(latent, SpatialLatent):
            conv(f"enc.{head}", latent.c, widths[-1], 1, gain=False)
        else:
            lin(f"enc.{head}", flat, latent.d, gain=False)
    if kind.variational:
        # start with a narrow posterior; unit-variance noise at init swamps mu
        # and the decoder collapses to the all-background solution
        tensors["enc.logvar.b"].data[:] = LOGVAR_INIT

    if isinstance(latent, SpatialLatent):
        conv("dec.entry", widths[-1], latent.c, 1)
    else:
        lin("dec.entry", latent.d, flat)
    c_in = widths[-1]
    outs = list(reversed(widths[:-1])) + [widths[0]]
    for s, wdt in enumerate(outs):
        conv(f"dec.conv{s}", wdt, c_in, 3)
        c_in = wdt
    conv("dec.out", 1, c_in, 3, gain=False)

    if kind.adversarial:
        c_in = 1
        for s, wdt in enumerate(widths):
            conv(f"dis.conv{s}", wdt, c_in, 3)
            c_in = wdt
        lin("dis.out", widths[-1], 1, gain=False)

    return ModelParams(kind, latent, config, tensors)


def _check_input(params: ModelParams, x: Tensor) -> None:
    s = params.config.input_size
    if x.data.ndim != 4 or x.shape[1:] != (1, s, s):
        raise DimensionError(f"expected input [N,1,{s},{s}], got {x.shape}")


def _trunk(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p, slope = params.tensors, params.config.leaky_slope
    h = x
    for s in range(params.config.stages):
        h = T.conv2d(h, p[f"{prefix}.conv{s}.w"], p[f"{prefix}.conv{s}.b"], stride=2, padding=1)
        h = T.leaky_relu(h, slope)
    return h


def encode(params: ModelParams, x: Tensor) -> EncoderOutput:
    _check_input(params, x)
    h = _trunk(params, "enc", x)
    p = params.tensors
    if isinstance(params.latent, DenseLatent):
        h = T.reshape(h, (h.shape[0], -1))

    def head(name):
        if isinstance(params.latent, SpatialLatent):
            return T.conv2d(h, p[f"enc.{name}.w"], p[f"enc.{name}.b"])
        return T.dense(h, p[f"enc.{name}.w"], p[f"enc.{name}.b"])

    if params.kind.variational:
        return EncoderOutput(mu=head("mu"), logvar=T.clamp(head("logvar"), LOGVAR_MIN, LOGVAR_MAX))
    return EncoderOutput(code=head("code"))


def reparameterize(out: EncoderOutput, mode: str = "mean",
                   rng: np.random.Generator | int | None = None) -> Tensor:
    """``mean`` returns mu; ``sample`` draws mu + exp(logvar/2) * eps."""
    if not out.variational:
        raise ContractError("reparameterize() needs a variational encoder output (mu, logvar)")
    if mode == "mean":
        return out.mu
    if mode != "sample":
        raise ContractError(f"unknown reparameterization mode {mode!r}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    eps = rng.standard_normal(out.mu.shape).astype(out.mu.data.dtype)
    std = T.exp(T.mul(out.logvar, 0.5))
    return T.add(out.mu, T.mul(std, eps))


def latent_code(params: ModelParams, out: EncoderOutput, mode: str = "mean", rng=None) -> Tensor:
    return reparameterize(out, mode, rng) if out.variational else out.code


def decode(params: ModelParams, z: Tensor) -> Tensor:
    n = z.shape[0]
    if z.shape != params.latent.shape(n):
        raise DimensionError(f"latent of shape {z.shape} does not match {params.latent} "
                             f"(expected {params.latent.shape(n)})")
    p, cfg = params.tensors, params.config
    slope = cfg.leaky_slope
    fm, widths = cfg.bottleneck_size, cfg.widths()
    if isinstance(params.latent, SpatialLatent):
        h = T.conv2d(z, p["dec.entry.w"], p["dec.entry.b"])
    else:
        h = T.reshape(T.dense(z, p["dec.entry.w"], p["dec.entry.b"]), (n, widths[-1], fm, fm))
    h = T.leaky_relu(h, slope)
    for s in range(cfg.stages):
        h = T.upsample_nearest(h, 2)
        h = T.leaky_relu(T.conv2d(h, p[f"dec.conv{s}.w"], p[f"dec.conv{s}.b"], padding=1), slope)
    return T.sigmoid(T.conv2d(h, p["dec.out.w"], p["dec.out.b"], padding=1))


def discriminate(params: ModelParams, x: Tensor) -> Tensor:
    if not params.kind.adversarial:
        raise ContractError(f"{params.kind.value} has no discriminator")
    _check_input(params, x)
    h = T.global_avg_pool(_trunk(params, "dis", x))
    logit = T.dense(h, params.tensors["dis.out.w"], params.tensors["dis.out.b"])
    return T.reshape(T.sigmoid(logit), (x.shape[0],))


def reconstruct(params: ModelParams, x, batch_size: int = 32) -> np.ndarray:
    """Deterministic reconstruction (mean latent for variational kinds), no tape."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)
    outs = []
    with T.no_grad():
        for i in range(0, arr.shape[0], batch_size):
            xb = Tensor(arr[i:i + batch_size])
            outs.append(decode(params, latent_code(params, encode(params, xb))).data)
    return np.concatenate(outs, axis=0) if outs else np.empty_like(arr)


# -- checkpoint I/O -----------------------------------------------------------
CKPT_MAGIC = b"AACKPT1"


def save_checkpoint(params: ModelParams, path) -> None:
    """Magic, u32 manifest length, JSON manifest, then little-endian f32 buffers."""
    entries = [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()]
    manifest = {
        "kind": params.kind.value,
        "latent": str(params.latent),
        "config": asdict(params.config),
        "parameters": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_checkpoint(path, expect: ModelParams | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:len(CKPT_MAGIC)]!r}", 0)
    off = len(CKPT_MAGIC)
    if len(raw) < off + 4:
        raise FormatError(f"{path}: truncated manifest length", off)
    (mlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        manifest = json.loads(raw[off:off + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest: {exc}", off) from exc
    off += mlen
    kind = ModelKind(manifest["kind"])
    latent = parse_latent(manifest["latent"])
    config = ModelConfig(**manifest["config"])
    template = build_model(kind, latent, config, seed=0)
    if expect is not None and (expect.kind, str(expect.latent), asdict(expect.config)) != \
            (kind, str(latent), asdict(config)):
        raise ConfigError(f"checkpoint holds {kind.value} {latent} {asdict(config)}, expected "
                          f"{expect.kind.value} {expect.latent} {asdict(expect.config)}")
    tensors = {}
    for entry in manifest["parameters"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in template.tensors or template.tensors[name].shape != shape:
            want = template.tensors[name].shape if name in template.tensors else "absent"
            raise ConfigError(f"checkpoint parameter {name} has shape {shape}, model expects {want}")
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(raw):
            raise FormatError(f"{path}: truncated buffer for {name}", off)
        data = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
        off += nbytes
    missing = set(template.tensors) - set(tensors)
    if missing:
        raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)}")
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes", off)
    return ModelParams(kind, latent, config, {k: tensors[k] for k in template.tensors})
