"""``mmdg`` command line: gen, rate, train, eval, shift, ablate.

Every subcommand reads a JSON run config (``--config``); flags override it.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .consistency import EndpointConfig, EndpointConfigError, LLMRater, RatingCache, rate_records
from .datamodel import (
    Dataset,
    SynthConfig,
    dataset_hash,
    generate_synthetic,
    make_splits,
    update_clip_metadata,
    write_dataset,
)
from .eval_report import ABLATIONS, MODALITY_SETTINGS, Report, ablation_experiment, render_report, shift_experiment, write_report
from .trainer import TrainConfig, evaluate, load_state, train

log = logging.getLogger("mmdg")


class ConfigError(ValueError):
    pass


def _strict(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


@dataclass
class ExperimentConfig:
    seeds: list[int] = field(default_factory=lambda: [0])
    test_fraction: float = 0.2
    settings: list[str] = field(default_factory=lambda: ["audio", "motion", "appearance", "multimodal"])
    methods: list[str] = field(default_factory=lambda: list(ABLATIONS))


@dataclass
class RunConfig:
    dataset: str | None = None
    output_dir: str = "mmdg-out"
    split: str = "all"
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    consistency: EndpointConfig = field(default_factory=EndpointConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        top = {"dataset", "output_dir", "split", "train", "synth", "consistency", "experiment"}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        cfg = cls(
            dataset=d.get("dataset"),
            output_dir=d.get("output_dir", "mmdg-out"),
            split=d.get("split", "all"),
            train=_strict(TrainConfig, d.get("train", {}), "train"),
            synth=_strict(SynthConfig, d.get("synth", {}), "synth"),
            consistency=_strict(EndpointConfig, d.get("consistency", {}), "consistency"),
            experiment=_strict(ExperimentConfig, d.get("experiment", {}), "experiment"),
        )
        try:
            cfg.synth.validate()
        except ValueError as e:
            raise ConfigError(f"invalid synth: {e}") from e
        for s in cfg.experiment.settings:
            if s not in MODALITY_SETTINGS:
                raise ConfigError(f"unknown modality setting {s!r}; choose from {sorted(MODALITY_SETTINGS)}")
        for m in cfg.experiment.methods:
            if m not in ABLATIONS:
                raise ConfigError(f"unknown method {m!r}; choose from {sorted(ABLATIONS)}")
        return cfg


def load_config(args) -> RunConfig:
    raw: dict = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    cfg = RunConfig.from_dict(raw)
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "split", None):
        cfg.split = args.split
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
        cfg.synth.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        try:
            cfg.train = replace(cfg.train, **overrides)
        except ValueError as e:
            raise ConfigError(str(e)) from e
    if getattr(args, "seeds", None):
        cfg.experiment.seeds = args.seeds
    return cfg


def _require_dataset(cfg: RunConfig) -> Path:
    if not cfg.dataset:
        raise ConfigError("no dataset path (set 'dataset' in the config or pass --dataset)")
    p = Path(cfg.dataset)
    if not (p / "manifest.json").exists():
        raise ConfigError(f"dataset not found: {p}")
    return p


def _select_splits(ds: Dataset, which: str):
    splits = make_splits(ds.manifest, ds.records)
    if which == "all":
        return splits
    chosen = [s for s in splits if s.name == which]
    if not chosen:
        raise ConfigError(f"unknown split {which!r}; available: {[s.name for s in splits]}")
    return chosen


# ---------------------------------------------------------------- commands

def cmd_gen(cfg: RunConfig, args) -> int:
    out = Path(cfg.dataset or Path(cfg.output_dir) / "dataset")
    manifest, records = generate_synthetic(cfg.synth)
    write_dataset(records, manifest, out)
    print(f"wrote {len(records)} clips to {out} (hash {dataset_hash(out)})")
    return 0


def cmd_rate(cfg: RunConfig, args) -> int:
    path = _require_dataset(cfg)
    ds = Dataset.load(path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache = RatingCache(out / "ratings.jsonl")
    rater = None
    if not args.fallback:
        try:
            rater = LLMRater(cfg.consistency)
        except EndpointConfigError as e:
            raise ConfigError(str(e)) from e
    fresh = rate_records(ds.records, cache, rater, cfg.consistency.max_in_flight)
    update_clip_metadata(path, ds.records)
    rated = sum(r.consistency is not None for r in ds.records)
    print(f"rated {rated} audio-complete clips ({fresh} new, {rated - fresh} from cache)")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    ds = Dataset.load(_require_dataset(cfg))
    splits = _select_splits(ds, cfg.split)
    ckpt_dir = Path(cfg.output_dir) / "checkpoints"
    tcfg = replace(cfg.train, checkpoint_dir=str(ckpt_dir))
    accs = []
    for sp in splits:
        # each run starts clean so reruns are reproducible
        for stale in (ckpt_dir / f"{sp.name}.ckpt", ckpt_dir / f"{sp.name}.metrics.jsonl"):
            if stale.exists():
                stale.unlink()
        state = train(ds, sp, tcfg)
        _, acc = evaluate(state.params, ds, sp.test_ids)
        accs.append(acc)
        print(f"{sp.name}\ttop1={100 * acc:.1f}\tcheckpoint={ckpt_dir / (sp.name + '.ckpt')}")
    report = Report([s.name for s in splits], title="Held-out top-1")
    report.add("train", _setting_name(tcfg), [100 * a for a in accs])
    write_report(report, Path(cfg.output_dir) / "reports", "train", ds.content_hash)
    print(f"mean\ttop1={100 * float(np.mean(accs)):.1f}")
    return 0


def _setting_name(t: TrainConfig) -> str:
    parts = []
    if t.fuse_early_ap_mo:
        parts.append("ap-mo")
    else:
        parts += [n for n, on in (("ap", t.use_appearance), ("mo", t.use_motion)) if on]
    if t.use_audio:
        parts.append("au")
    return ",".join(parts)


def cmd_eval(cfg: RunConfig, args) -> int:
    ds = Dataset.load(_require_dataset(cfg))
    splits = {s.name: s for s in make_splits(ds.manifest, ds.records)}
    if not args.checkpoint:
        ckpts = sorted((Path(cfg.output_dir) / "checkpoints").glob("*.ckpt"))
    else:
        ckpts = [Path(c) for c in args.checkpoint]
    if not ckpts:
        raise ConfigError("no checkpoints given or found")
    names, accs = [], []
    for ck in ckpts:
        if not ck.exists():
            raise ConfigError(f"checkpoint not found: {ck}")
        state, head = load_state(ck)
        if head.get("dataset_hash") and ds.content_hash and head["dataset_hash"] != ds.content_hash:
            log.warning("%s was trained on dataset %s, evaluating on %s", ck, head["dataset_hash"], ds.content_hash)
        sp = splits.get(head["split"])
        if sp is None:
            raise ConfigError(f"{ck}: split {head['split']!r} not present in dataset")
        _, acc = evaluate(state.params, ds, sp.test_ids)
        names.append(sp.name)
        accs.append(acc)
        print(f"{sp.name}\ttop1={100 * acc:.1f}")
    print(f"mean\ttop1={100 * float(np.mean(accs)):.1f}")
    report = Report(names, title="Held-out top-1")
    report.add("eval", "checkpoints", [100 * a for a in accs])
    write_report(report, Path(cfg.output_dir) / "reports", "eval", ds.content_hash)
    return 0


def cmd_shift(cfg: RunConfig, args) -> int:
    ds = Dataset.load(_require_dataset(cfg))
    _, report = shift_experiment(
        ds, cfg.experiment.settings, cfg.train, cfg.experiment.seeds, cfg.experiment.test_fraction
    )
    paths = write_report(report, Path(cfg.output_dir) / "reports", "shift", ds.content_hash)
    print(render_report(report, "markdown"))
    print(f"report: {paths[0]} {paths[1]}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    ds = Dataset.load(_require_dataset(cfg))
    _, report = ablation_experiment(ds, cfg.experiment.methods, cfg.train, cfg.experiment.seeds)
    paths = write_report(report, Path(cfg.output_dir) / "reports", "ablate", ds.content_hash)
    print(render_report(report, "markdown"))
    print(f"report: {paths[0]} {paths[1]}")
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mmdg", description="Multimodal domain-generalisation training and evaluation.")
    p.add_argument("--version", action="version", version=f"mmdg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="JSON run configuration file")
        sp.add_argument("--output-dir", help="directory for every artifact (overrides config)")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory (overrides config)")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--seed", type=int, help="generator seed (overrides synth.seed)")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("rate", help="fill consistency ratings for audio-complete clips")
    common(r)
    r.add_argument("--fallback", action="store_true", help="use the embedding cosine rater instead of the LLM endpoint")
    r.set_defaults(func=cmd_rate)

    t = sub.add_parser("train", help="train on one or all leave-one-domain-out splits")
    common(t)
    t.add_argument("--split", help="held-out domain as SCENARIO-LOCATION, or 'all'")
    t.add_argument("--seed", type=int, help="training seed")
    t.add_argument("--epochs", type=int, help="number of epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints on their held-out domains")
    common(e)
    e.add_argument("--checkpoint", action="append", help="checkpoint file (repeatable); default: all in output dir")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("shift", help="in-domain vs out-of-domain drop per modality")
    common(s)
    s.add_argument("--seeds", type=int, nargs="+", help="training seeds to average")
    s.add_argument("--epochs", type=int, help="number of epochs")
    s.set_defaults(func=cmd_shift)

    a = sub.add_parser("ablate", help="held-out top-1 of each method variant")
    common(a)
    a.add_argument("--seeds", type=int, nargs="+", help="training seeds to average")
    a.add_argument("--epochs", type=int, help="number of epochs")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"mmdg: configuration error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"mmdg: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        log.debug("failure", exc_info=True)
        print(f"mmdg: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
