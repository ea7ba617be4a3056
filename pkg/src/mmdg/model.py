"""Per-modality encoders, consistency-weighted fusion and the linear classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    BatchNormStats,
    DimensionError,
    Tensor,
    add,
    batchnorm,
    concat,
    matmul,
    relu,
    scale_rows,
)

TAU_MIN, TAU_MAX = 0.01, 1.0
TAU_INIT = 0.07


class ValidationError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture knobs; the modality flags select Table-3 style settings."""

    dims: dict[str, int]
    num_classes: int
    out_dim: int = 256
    hidden_dim: int | None = None
    use_appearance: bool = True
    use_motion: bool = True
    use_audio: bool = True
    fuse_early_ap_mo: bool = False
    bn_before_relu: bool = False

    def __post_init__(self):
        if self.fuse_early_ap_mo and not (self.use_appearance and self.use_motion):
            raise ValidationError("early appearance-motion fusion needs both modalities")
        if not (self.use_appearance or self.use_motion or self.use_audio):
            raise ValidationError("at least one modality must be enabled")

    @property
    def hidden(self) -> int:
        return self.hidden_dim or self.out_dim

    def encoder_inputs(self) -> dict[str, int]:
        """Name and input width of every encoder feeding the classifier, in fusion order."""
        enc: dict[str, int] = {}
        if self.fuse_early_ap_mo:
            enc["apmo"] = self.dims["appearance"] + self.dims["motion"]
        else:
            if self.use_appearance:
                enc["appearance"] = self.dims["appearance"]
            if self.use_motion:
                enc["motion"] = self.dims["motion"]
        if self.use_audio:
            enc["audio"] = self.dims["audio"]
        return enc

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class EncoderParams:
    w1: Tensor
    b1: Tensor
    g1: Tensor
    be1: Tensor
    w2: Tensor
    b2: Tensor
    g2: Tensor
    be2: Tensor
    bn1: BatchNormStats
    bn2: BatchNormStats

    TRAINABLE = ("w1", "b1", "g1", "be1", "w2", "b2", "g2", "be2")

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in self.TRAINABLE}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn1_mean": self.bn1.mean, "bn1_var": self.bn1.var, "bn2_mean": self.bn2.mean, "bn2_var": self.bn2.var}


@dataclass
class ModelParams:
    config: ModelConfig
    encoders: dict[str, EncoderParams]
    cls_w: Tensor
    cls_b: Tensor
    log_tau: Tensor
    bn_before_relu: bool = False

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, enc in self.encoders.items():
            for k, t in enc.tensors().items():
                out[f"{name}.{k}"] = t
        out["classifier.w"] = self.cls_w
        out["classifier.b"] = self.cls_b
        out["log_tau"] = self.log_tau
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, enc in self.encoders.items():
            for k, b in enc.buffers().items():
                out[f"{name}.{k}"] = b
        return out

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def clamp_temperature(self) -> None:
        self.log_tau.data[...] = np.clip(self.log_tau.data, math.log(TAU_MIN), math.log(TAU_MAX))

    def with_tensors(self, tensors: dict[str, Tensor]) -> "ModelParams":
        """Shallow copy with the named trainable tensors swapped in (buffers shared)."""
        encs = {}
        for n, e in self.encoders.items():
            kw = {k: tensors.get(f"{n}.{k}", v) for k, v in e.tensors().items()}
            encs[n] = EncoderParams(**kw, bn1=e.bn1, bn2=e.bn2)
        return ModelParams(
            self.config, encs,
            tensors.get("classifier.w", self.cls_w), tensors.get("classifier.b", self.cls_b),
            tensors.get("log_tau", self.log_tau), self.bn_before_relu,
        )

    def astype(self, dtype) -> "ModelParams":
        """Deep copy with every tensor and buffer cast to ``dtype``."""
        def t(x: Tensor) -> Tensor:
            return Tensor(x.data.astype(dtype), requires_grad=x.requires_grad)

        def bn(s: BatchNormStats) -> BatchNormStats:
            return BatchNormStats(s.mean.astype(dtype), s.var.astype(dtype), s.momentum)

        encs = {
            n: EncoderParams(**{k: t(v) for k, v in e.tensors().items()}, bn1=bn(e.bn1), bn2=bn(e.bn2))
            for n, e in self.encoders.items()
        }
        return ModelParams(self.config, encs, t(self.cls_w), t(self.cls_b), t(self.log_tau), self.bn_before_relu)


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def _init_encoder(rng, d_in: int, hidden: int, d_out: int) -> EncoderParams:
    def p(x):
        return Tensor(np.asarray(x, dtype=np.float32), requires_grad=True)

    return EncoderParams(
        w1=p(_he_uniform(rng, d_in, hidden)),
        b1=p(np.zeros(hidden)),
        g1=p(np.ones(hidden)),
        be1=p(np.zeros(hidden)),
        w2=p(_he_uniform(rng, hidden, d_out)),
        b2=p(np.zeros(d_out)),
        g2=p(np.ones(d_out)),
        be2=p(np.zeros(d_out)),
        bn1=BatchNormStats.fresh(hidden),
        bn2=BatchNormStats.fresh(d_out),
    )


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    encoders = {}
    for name, d_in in config.encoder_inputs().items():
        encoders[name] = _init_encoder(rng, d_in, config.hidden, config.out_dim)
    encoders["text"] = _init_encoder(rng, config.dims["text"], config.hidden, config.out_dim)
    fused = len(config.encoder_inputs()) * config.out_dim
    cls_w = Tensor(_he_uniform(rng, fused, config.num_classes), requires_grad=True)
    cls_b = Tensor(np.zeros(config.num_classes, dtype=np.float32), requires_grad=True)
    log_tau = Tensor(np.asarray(math.log(TAU_INIT), dtype=np.float32), requires_grad=True)
    return ModelParams(config, encoders, cls_w, cls_b, log_tau, config.bn_before_relu)


def encode(enc: EncoderParams, x: Tensor, train: bool, bn_before_relu: bool = False) -> Tensor:
    """Two blocks of Linear -> ReLU -> BatchNorm (or Linear -> BN -> ReLU if requested)."""
    if x.data.ndim != 2 or x.shape[1] != enc.w1.shape[0]:
        raise DimensionError(f"encoder expects (batch, {enc.w1.shape[0]}), got {x.shape}")
    h = x
    for w, b, g, be, bn in ((enc.w1, enc.b1, enc.g1, enc.be1, enc.bn1), (enc.w2, enc.b2, enc.g2, enc.be2, enc.bn2)):
        h = add(matmul(h, w), b)
        if bn_before_relu:
            h = relu(batchnorm(h, g, be, bn, train))
        else:
            h = batchnorm(relu(h), g, be, bn, train)
    return h


def fuse_and_classify(params: ModelParams, features: list[Tensor], audio: Tensor | None, r=None) -> Tensor:
    """Concatenate encoded features (audio last, optionally row-scaled by ``r``) and classify."""
    parts = list(features)
    if audio is not None:
        if r is not None:
            r_arr = r.data if isinstance(r, Tensor) else np.asarray(r, dtype=audio.dtype)
            if r_arr.shape != (audio.shape[0],):
                raise DimensionError(f"consistency shape {r_arr.shape} vs batch {audio.shape[0]}")
            if np.any(~np.isfinite(r_arr)) or np.any(r_arr < 0) or np.any(r_arr > 1):
                raise ValidationError("consistency ratings must lie in [0, 1]")
            r_t = r if isinstance(r, Tensor) else Tensor(r_arr.astype(audio.dtype))
            audio = scale_rows(audio, r_t)
        parts.append(audio)
    elif r is not None:
        raise ValidationError("consistency ratings given but no audio features")
    fused = parts[0] if len(parts) == 1 else concat(parts, axis=1)
    return add(matmul(fused, params.cls_w), params.cls_b)


@dataclass
class Batch:
    """Stacked model inputs for one batch; absent modalities are ``None``."""

    appearance: np.ndarray | None
    motion: np.ndarray | None
    audio: np.ndarray | None
    labels: np.ndarray
    vis_narr: np.ndarray | None = None
    aud_narr: np.ndarray | None = None
    consistency: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class ForwardOutput:
    logits: Tensor
    features: dict[str, Tensor] = field(default_factory=dict)
    t: Tensor | None = None
    t_hat: Tensor | None = None

    @property
    def ap(self) -> Tensor | None:
        return self.features.get("appearance", self.features.get("apmo"))

    @property
    def m(self) -> Tensor | None:
        return self.features.get("motion")

    @property
    def a(self) -> Tensor | None:
        return self.features.get("audio")


def forward(
    params: ModelParams,
    batch: Batch,
    train: bool,
    weight_audio: bool = False,
    narrations: bool = True,
) -> ForwardOutput:
    """Encode every active modality and classify.

    In eval mode (``train=False``) narrations and ratings are ignored. In train
    mode the shared text encoder runs on both narration inputs when
    ``narrations`` is set, and ``weight_audio`` scales audio by the ratings.
    """
    cfg = params.config
    dtype = params.cls_w.dtype
    bnr = params.bn_before_relu

    def inp(x):
        if x is None:
            raise ValidationError("batch lacks a modality the model needs")
        return Tensor(np.asarray(x, dtype=dtype))

    feats: dict[str, Tensor] = {}
    for name in cfg.encoder_inputs():
        if name == "apmo":
            x = np.concatenate([batch.appearance, batch.motion], axis=1) if batch.appearance is not None and batch.motion is not None else None
        else:
            x = getattr(batch, name)
        feats[name] = encode(params.encoders[name], inp(x), train, bnr)

    audio = feats.get("audio")
    r = None
    if train and weight_audio and audio is not None:
        if batch.consistency is None:
            raise ValidationError("consistency weighting requested but batch has no ratings")
        r = np.asarray(batch.consistency, dtype=dtype)
    visual = [f for n, f in feats.items() if n != "audio"]
    logits = fuse_and_classify(params, visual, audio, r)

    out = ForwardOutput(logits=logits, features=feats)
    if train and narrations:
        text = params.encoders["text"]
        out.t = encode(text, inp(batch.vis_narr), train, bnr)
        if batch.aud_narr is not None:
            out.t_hat = encode(text, inp(batch.aud_narr), train, bnr)
    return out
