"""Training loop, step learning-rate schedule and top-1 evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datamodel import Dataset, SplitSpec
from .losses import total_loss
from .model import Batch, ModelConfig, ModelParams, forward, init_params
from .numerics import AdamState, OptimizerError, Tape, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 50
    lr: float = 2e-4
    lr_decay_epochs: tuple[int, ...] = (30, 40)
    lr_decay_factor: float = 10.0
    lam: float = 0.1
    use_appearance: bool = True
    use_motion: bool = True
    use_audio: bool = True
    fuse_early_ap_mo: bool = False
    use_alignment: bool = True
    align_audio_to: str = "audio"
    use_consistency_weighting: bool = True
    out_dim: int = 256
    hidden_dim: int | None = None
    bn_before_relu: bool = False
    val_fraction: float = 0.0
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")
        if any(b <= a for a, b in zip(self.lr_decay_epochs, self.lr_decay_epochs[1:])):
            raise ValueError(f"lr_decay_epochs must be strictly increasing: {self.lr_decay_epochs}")
        if any(e >= self.epochs for e in self.lr_decay_epochs):
            raise ValueError(f"lr_decay_epochs {self.lr_decay_epochs} must be < epochs ({self.epochs})")
        if self.align_audio_to not in ("audio", "visual"):
            raise ValueError(f"align_audio_to must be 'audio' or 'visual', got {self.align_audio_to!r}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d

    def model_config(self, dataset: Dataset) -> ModelConfig:
        return ModelConfig(
            dims=dict(dataset.manifest.dims),
            num_classes=dataset.manifest.num_classes,
            out_dim=self.out_dim,
            hidden_dim=self.hidden_dim,
            use_appearance=self.use_appearance,
            use_motion=self.use_motion,
            use_audio=self.use_audio,
            fuse_early_ap_mo=self.fuse_early_ap_mo,
            bn_before_relu=self.bn_before_relu,
        )


def desk_config(**overrides) -> TrainConfig:
    """Short schedule for the synthetic benchmark (same 10x step decays, scaled)."""
    base = dict(epochs=12, lr=3e-3, lr_decay_epochs=(8, 10), out_dim=32)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    n = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr / cfg.lr_decay_factor**n


@dataclass
class TrainState:
    params: ModelParams
    adam: AdamState
    epoch: int
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)


def make_batch(dataset: Dataset, rows: np.ndarray, with_narrations: bool = True) -> Batch:
    a = dataset.arrays
    audio_ok = bool(dataset.has_audio[rows].all())
    cons = dataset.consistency[rows]
    return Batch(
        appearance=a["appearance"][rows],
        motion=a["motion"][rows],
        audio=a["audio"][rows] if audio_ok else None,
        labels=dataset.labels[rows],
        vis_narr=a["vis_narr"][rows] if with_narrations else None,
        aud_narr=a["aud_narr"][rows] if with_narrations and audio_ok else None,
        consistency=cons if audio_ok and not np.isnan(cons).any() else None,
    )


def usable_ids(dataset: Dataset, ids: Sequence[str], needs_audio: bool) -> list[str]:
    """Drop audio-incomplete clips when the model consumes audio."""
    if not needs_audio:
        return list(ids)
    return [i for i in ids if dataset.has_audio[dataset.index[i]]]


def _checkpoint_paths(cfg: TrainConfig, split: SplitSpec) -> tuple[Path, Path] | None:
    if not cfg.checkpoint_dir:
        return None
    d = Path(cfg.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d / f"{split.name}.ckpt", d / f"{split.name}.metrics.jsonl"


def _header(state: TrainState, cfg: TrainConfig, split: SplitSpec, dataset: Dataset) -> dict:
    return {
        "epoch": state.epoch,
        "seed": cfg.seed,
        "split": split.name,
        "held_out": [split.held_out_scenario, split.held_out_location],
        "dataset_hash": dataset.content_hash,
        "dims": dict(dataset.manifest.dims),
        "num_classes": dataset.manifest.num_classes,
        "train_config": {k: v for k, v in cfg.to_json().items() if k != "checkpoint_dir"},
        "rng_state": state.rng.bit_generator.state,
        "history": state.history,
    }


def save_state(path, state: TrainState, cfg: TrainConfig, split: SplitSpec, dataset: Dataset) -> None:
    save_checkpoint(path, state.params, _header(state, cfg, split, dataset), state.adam)


def load_state(path) -> tuple[TrainState, dict]:
    params, head, adam = load_checkpoint(path)
    rng = np.random.default_rng()
    rng.bit_generator.state = head["rng_state"]
    if adam is None:
        adam = AdamState.for_params(params.named_tensors())
    return TrainState(params, adam, head["epoch"], rng, list(head.get("history", []))), head


def train(
    dataset: Dataset,
    split: SplitSpec,
    cfg: TrainConfig,
    state: TrainState | None = None,
    until_epoch: int | None = None,
) -> TrainState:
    """Train on ``split.train_ids`` from scratch, or continue ``state``.

    Runs epochs ``state.epoch .. until_epoch-1`` (default: to ``cfg.epochs``).
    With ``cfg.checkpoint_dir`` set, a checkpoint and a JSON-lines metrics
    log are written after every epoch, so a diverged run keeps its last good
    checkpoint.
    """
    train_ids = usable_ids(dataset, split.train_ids, cfg.use_audio)
    if not train_ids:
        raise TrainingError(f"split {split.name}: empty train set")
    if cfg.use_audio and cfg.use_consistency_weighting:
        missing = [i for i in train_ids if np.isnan(dataset.consistency[dataset.index[i]])]
        if missing:
            raise TrainingError(f"{len(missing)} train clips lack consistency ratings (run `mmdg rate`)")

    if state is None:
        params = init_params(cfg.model_config(dataset), cfg.seed)
        state = TrainState(params, AdamState.for_params(params.named_tensors()), 0, np.random.default_rng(cfg.seed + 1))
    end = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)

    rows_all = dataset.rows(train_ids)
    val_rows = np.zeros(0, dtype=np.int64)
    if cfg.val_fraction > 0:
        vrng = np.random.default_rng(cfg.seed + 2)
        perm = vrng.permutation(len(rows_all))
        n_val = max(1, int(round(cfg.val_fraction * len(rows_all))))
        val_rows, rows_all = rows_all[perm[:n_val]], rows_all[np.sort(perm[n_val:])]

    paths = _checkpoint_paths(cfg, split)
    params = state.params
    named = params.named_tensors()
    weight = cfg.use_audio and cfg.use_consistency_weighting
    align = cfg.use_alignment and cfg.lam != 0

    while state.epoch < end:
        epoch = state.epoch
        lr = lr_at(epoch, cfg)
        order = rows_all[state.rng.permutation(len(rows_all))]
        sums = {"L_c": 0.0, "L_align": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            if len(rows) < 2:
                continue
            batch = make_batch(dataset, rows, with_narrations=align)
            with Tape() as tape:
                out = forward(params, batch, train=True, weight_audio=weight, narrations=align)
                loss, bd = total_loss(out, batch.labels, params.log_tau, cfg.lam, align, cfg.align_audio_to)
            if not np.isfinite(bd.total):
                raise TrainingError(f"non-finite loss at epoch {epoch} (split {split.name}); last good checkpoint kept")
            tape.backward(loss)
            try:
                adam_step(named, {k: t.grad for k, t in named.items()}, state.adam, lr)
            except OptimizerError as e:
                raise TrainingError(f"{e} (split {split.name}); last good checkpoint kept") from e
            params.clamp_temperature()
            for k, v in bd.as_dict().items():
                sums[k] += v
            n_batches += 1
        if n_batches == 0:
            raise TrainingError(f"split {split.name}: no batch with >= 2 samples")
        rec = {"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
        if len(val_rows):
            rec["val_top1"] = _accuracy(params, dataset, val_rows)
        state.history.append(rec)
        state.epoch += 1
        log.info("split %s epoch %d: %s", split.name, epoch, rec)
        if paths is not None:
            save_state(paths[0], state, cfg, split, dataset)
            with open(paths[1], "a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    return state


def predict(params: ModelParams, dataset: Dataset, rows: np.ndarray, chunk: int = 4096) -> np.ndarray:
    preds = []
    for s in range(0, len(rows), chunk):
        batch = make_batch(dataset, rows[s:s + chunk], with_narrations=False)
        logits = forward(params, batch, train=False).logits.data
        preds.append(np.argmax(logits, axis=1))  # argmax picks the lowest index on ties
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _accuracy(params, dataset, rows) -> float:
    return float((predict(params, dataset, rows) == dataset.labels[rows]).mean())


def evaluate(params: ModelParams, dataset: Dataset, test_ids: Sequence[str]) -> tuple[dict[str, int], float]:
    """Eval-mode predictions per clip and top-1 accuracy.

    Audio-incomplete clips are skipped when the model consumes audio.
    """
    ids = usable_ids(dataset, test_ids, params.config.use_audio)
    if not ids:
        raise ValueError("empty test set")
    rows = dataset.rows(ids)
    preds = predict(params, dataset, rows)
    acc = float((preds == dataset.labels[rows]).mean())
    return dict(zip(ids, preds.tolist())), acc


def train_and_evaluate(dataset: Dataset, split: SplitSpec, cfg: TrainConfig, test_ids=None) -> float:
    state = train(dataset, split, cfg)
    return evaluate(state.params, dataset, split.test_ids if test_ids is None else test_ids)[1]


def with_flags(cfg: TrainConfig, **flags) -> TrainConfig:
    return replace(cfg, **flags)
