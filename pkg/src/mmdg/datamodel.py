"""Dataset records, the on-disk format, domain splits and the synthetic generator.

A dataset directory holds::

    manifest.json     dims, classes, domains, record count, file map
    clips.jsonl       one JSON object per clip with row indices into the blobs
    appearance.bin    \
    motion.bin         |  "MMDG" | u32 version | u32 rows | u32 dim | float32 LE rows
    audio.bin          |
    vis_narr.bin       |
    aud_narr.bin      /

Audio and audio-narration rows exist only for audio-complete clips.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
MAGIC = b"MMDG"
_HEADER = struct.Struct("<4sIII")

MODALITY_FILES = {
    "appearance": "appearance.bin",
    "motion": "motion.bin",
    "audio": "audio.bin",
    "vis_narr": "vis_narr.bin",
    "aud_narr": "aud_narr.bin",
}
# which manifest dim each blob uses
_DIM_KEY = {"appearance": "appearance", "motion": "motion", "audio": "audio", "vis_narr": "text", "aud_narr": "text"}
_FIELD = {
    "appearance": "emb_appearance",
    "motion": "emb_motion",
    "audio": "emb_audio",
    "vis_narr": "emb_vis_narration",
    "aud_narr": "emb_audio_narration",
}


class DatasetError(ValueError):
    """Raised for malformed, truncated or inconsistent dataset files."""


class SplitError(ValueError):
    pass


@dataclass(eq=False)
class ClipRecord:
    clip_id: str
    scenario: str
    location: str
    label: int
    emb_appearance: np.ndarray
    emb_motion: np.ndarray
    emb_vis_narration: np.ndarray
    emb_audio: np.ndarray | None = None
    emb_audio_narration: np.ndarray | None = None
    consistency: float | None = None
    gt_consistency: float | None = None
    vis_narration_text: str | None = None
    aud_narration_text: str | None = None

    @property
    def domain(self) -> tuple[str, str]:
        return (self.scenario, self.location)

    @property
    def has_audio(self) -> bool:
        return self.emb_audio is not None and self.emb_audio_narration is not None

    def __eq__(self, other) -> bool:
        if not isinstance(other, ClipRecord):
            return NotImplemented
        for name, mine in vars(self).items():
            theirs = getattr(other, name)
            if isinstance(mine, np.ndarray) or isinstance(theirs, np.ndarray):
                if mine is None or theirs is None or mine.dtype != theirs.dtype:
                    return False
                if not np.array_equal(mine, theirs):
                    return False
            elif mine != theirs:
                return False
        return True


@dataclass
class DatasetManifest:
    num_classes: int
    dims: dict[str, int]
    class_names: list[str]
    domains: list[tuple[str, str]]
    record_count: int = 0
    test_domains: list[tuple[str, str]] | None = None
    version: int = FORMAT_VERSION
    files: dict[str, str] = field(default_factory=lambda: dict(MODALITY_FILES))

    def validate(self) -> None:
        for key in ("appearance", "motion", "audio", "text"):
            if self.dims.get(key, 0) < 1:
                raise DatasetError(f"manifest dim {key!r} must be >= 1, got {self.dims.get(key)}")
        if len(self.class_names) != self.num_classes:
            raise DatasetError(f"{len(self.class_names)} class names for {self.num_classes} classes")
        known = set(self.domains)
        for d in self.test_domains or []:
            if d not in known:
                raise DatasetError(f"test domain {d} not in domain list")

    @property
    def designated_test_domains(self) -> list[tuple[str, str]]:
        return list(self.test_domains) if self.test_domains is not None else list(self.domains)

    def to_json(self) -> dict:
        d = asdict(self)
        d["domains"] = [list(x) for x in self.domains]
        if self.test_domains is not None:
            d["test_domains"] = [list(x) for x in self.test_domains]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DatasetManifest":
        d = dict(d)
        if d.get("version") != FORMAT_VERSION:
            raise DatasetError(f"unsupported manifest version {d.get('version')!r} (expected {FORMAT_VERSION})")
        try:
            d["domains"] = [tuple(x) for x in d["domains"]]
            if d.get("test_domains") is not None:
                d["test_domains"] = [tuple(x) for x in d["test_domains"]]
            m = cls(**d)
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed manifest: {e}") from e
        m.validate()
        return m


def validate_records(manifest: DatasetManifest, records: Sequence[ClipRecord]) -> None:
    domains = set(manifest.domains)
    seen: set[str] = set()
    for r in records:
        if r.clip_id in seen:
            raise DatasetError(f"duplicate clip_id {r.clip_id!r}")
        seen.add(r.clip_id)
        if not 0 <= r.label < manifest.num_classes:
            raise DatasetError(f"clip {r.clip_id}: label {r.label} outside [0, {manifest.num_classes})")
        if r.domain not in domains:
            raise DatasetError(f"clip {r.clip_id}: domain {r.domain} not in manifest")
        if r.consistency is not None:
            if not r.has_audio:
                raise DatasetError(f"clip {r.clip_id}: consistency without audio embeddings")
            if not 0.0 <= r.consistency <= 1.0:
                raise DatasetError(f"clip {r.clip_id}: consistency {r.consistency} outside [0, 1]")
        for mod, attr in _FIELD.items():
            vec = getattr(r, attr)
            if vec is None:
                continue
            want = manifest.dims[_DIM_KEY[mod]]
            if vec.shape != (want,):
                raise DatasetError(f"clip {r.clip_id}: {attr} has shape {vec.shape}, manifest says ({want},)")


# ---------------------------------------------------------------- blobs

def write_blob(path: Path, rows: np.ndarray) -> None:
    rows = np.ascontiguousarray(rows, dtype="<f4")
    if rows.ndim != 2:
        raise DatasetError(f"blob rows must be 2-D, got shape {rows.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes())


def read_blob(path: Path, expected_dim: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    return parse_blob(raw, str(path), expected_dim)


def parse_blob(raw: bytes, where: str, expected_dim: int | None = None, offset: int = 0) -> np.ndarray:
    if len(raw) - offset < _HEADER.size:
        raise DatasetError(f"{where}: truncated header")
    magic, version, rows, dim = _HEADER.unpack_from(raw, offset)
    if magic != MAGIC:
        raise DatasetError(f"{where}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{where}: version {version}, expected {FORMAT_VERSION}")
    if expected_dim is not None and dim != expected_dim:
        raise DatasetError(f"{where}: dim {dim}, manifest says {expected_dim}")
    start = offset + _HEADER.size
    nbytes = rows * dim * 4
    if len(raw) < start + nbytes:
        raise DatasetError(f"{where}: truncated payload ({len(raw) - start} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype="<f4", count=rows * dim, offset=start)
    return data.reshape(rows, dim).astype(np.float32)


def blob_size(rows: int, dim: int) -> int:
    return _HEADER.size + rows * dim * 4


# ---------------------------------------------------------------- read / write

def write_dataset(records: Sequence[ClipRecord], manifest: DatasetManifest, path) -> None:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    manifest.validate()
    validate_records(manifest, records)
    manifest.record_count = len(records)
    path.mkdir(exist_ok=True)

    stacks: dict[str, list[np.ndarray]] = {m: [] for m in MODALITY_FILES}
    lines = []
    for r in records:
        rows = {}
        for mod, attr in _FIELD.items():
            vec = getattr(r, attr)
            if vec is None:
                rows[mod] = None
            else:
                rows[mod] = len(stacks[mod])
                stacks[mod].append(vec)
        meta = {
            "clip_id": r.clip_id,
            "scenario": r.scenario,
            "location": r.location,
            "label": int(r.label),
            "rows": rows,
            "consistency": r.consistency,
            "gt_consistency": r.gt_consistency,
            "vis_narration_text": r.vis_narration_text,
            "aud_narration_text": r.aud_narration_text,
        }
        lines.append(json.dumps(meta, sort_keys=True))

    for mod, fname in manifest.files.items():
        dim = manifest.dims[_DIM_KEY[mod]]
        arr = np.stack(stacks[mod]) if stacks[mod] else np.zeros((0, dim), np.float32)
        write_blob(path / fname, arr)
    (path / "clips.jsonl").write_text("".join(line + "\n" for line in lines))
    (path / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n")


def read_dataset(path) -> tuple[DatasetManifest, list[ClipRecord]]:
    path = Path(path)
    try:
        manifest = DatasetManifest.from_json(json.loads((path / "manifest.json").read_text()))
    except FileNotFoundError as e:
        raise DatasetError(f"{path}: no manifest.json") from e
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}/manifest.json: {e}") from e
    blobs = {}
    for mod, fname in manifest.files.items():
        try:
            blobs[mod] = read_blob(path / fname, manifest.dims[_DIM_KEY[mod]])
        except FileNotFoundError as e:
            raise DatasetError(f"{path}: missing {fname}") from e
    records = []
    with open(path / "clips.jsonl") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                meta = json.loads(line)
                kw = {}
                for mod, attr in _FIELD.items():
                    idx = meta["rows"].get(mod)
                    kw[attr] = None if idx is None else blobs[mod][idx].copy()
                rec = ClipRecord(
                    clip_id=meta["clip_id"],
                    scenario=meta["scenario"],
                    location=meta["location"],
                    label=int(meta["label"]),
                    consistency=meta.get("consistency"),
                    gt_consistency=meta.get("gt_consistency"),
                    vis_narration_text=meta.get("vis_narration_text"),
                    aud_narration_text=meta.get("aud_narration_text"),
                    **kw,
                )
            except (json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
                raise DatasetError(f"{path}/clips.jsonl line {lineno}: {e}") from e
            records.append(rec)
    if len(records) != manifest.record_count:
        raise DatasetError(f"{path}: manifest declares {manifest.record_count} records, found {len(records)}")
    validate_records(manifest, records)
    return manifest, records


def update_clip_metadata(path, records: Sequence[ClipRecord]) -> None:
    """Rewrite clips.jsonl in place, keeping blob row indices (used after rating)."""
    path = Path(path)
    by_id = {r.clip_id: r for r in records}
    out = []
    for line in (path / "clips.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        meta = json.loads(line)
        r = by_id.get(meta["clip_id"])
        if r is not None:
            meta["consistency"] = r.consistency
        out.append(json.dumps(meta, sort_keys=True))
    (path / "clips.jsonl").write_text("".join(x + "\n" for x in out))


def dataset_hash(path) -> str:
    """Short content hash over every file of a dataset directory."""
    path = Path(path)
    h = hashlib.sha256()
    for name in ["manifest.json", "clips.jsonl", *MODALITY_FILES.values()]:
        p = path / name
        if p.exists():
            h.update(name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:12]


class Dataset:
    """In-memory dataset with stacked per-modality arrays for fast batching."""

    def __init__(self, manifest: DatasetManifest, records: Sequence[ClipRecord], content_hash: str | None = None):
        self.manifest = manifest
        self.records = list(records)
        self.content_hash = content_hash
        self.index = {r.clip_id: i for i, r in enumerate(self.records)}
        n = len(self.records)
        self.labels = np.array([r.label for r in self.records], dtype=np.int64)
        self.has_audio = np.array([r.has_audio for r in self.records], dtype=bool)
        self.consistency = np.array(
            [np.nan if r.consistency is None else r.consistency for r in self.records], dtype=np.float32
        )
        self.arrays: dict[str, np.ndarray] = {}
        for mod, attr in _FIELD.items():
            arr = np.zeros((n, manifest.dims[_DIM_KEY[mod]]), dtype=np.float32)
            for i, r in enumerate(self.records):
                v = getattr(r, attr)
                if v is not None:
                    arr[i] = v
            self.arrays[mod] = arr

    @classmethod
    def load(cls, path) -> "Dataset":
        manifest, records = read_dataset(path)
        return cls(manifest, records, dataset_hash(path))

    def __len__(self) -> int:
        return len(self.records)

    def rows(self, ids: Iterable[str]) -> np.ndarray:
        return np.array([self.index[i] for i in ids], dtype=np.int64)


# ---------------------------------------------------------------- splits

@dataclass
class SplitSpec:
    held_out_scenario: str
    held_out_location: str
    train_ids: list[str]
    test_ids: list[str]

    @property
    def name(self) -> str:
        return f"{self.held_out_scenario}-{self.held_out_location}"


def _check_split_preconditions(records: Sequence[ClipRecord]) -> None:
    scen = {r.scenario for r in records}
    locs = {r.location for r in records}
    if len(scen) < 2 or len(locs) < 2:
        raise SplitError(f"need >= 2 scenarios and >= 2 locations, got {len(scen)} and {len(locs)}")


def make_splits(manifest: DatasetManifest, records: Sequence[ClipRecord]) -> list[SplitSpec]:
    """Strict leave-one-domain-out: train excludes the held-out scenario AND location."""
    _check_split_preconditions(records)
    splits = []
    for scen, loc in manifest.designated_test_domains:
        test = [r.clip_id for r in records if r.scenario == scen and r.location == loc]
        if not test:
            raise SplitError(f"test domain {scen}/{loc} has no clips")
        train = [r.clip_id for r in records if r.scenario != scen and r.location != loc]
        splits.append(SplitSpec(scen, loc, train, test))
    return splits


def make_seen_domain_splits(
    manifest: DatasetManifest, records: Sequence[ClipRecord], test_fraction: float = 0.2, seed: int = 0
) -> list[SplitSpec]:
    """In-domain counterpart of :func:`make_splits`.

    A ``test_fraction`` of each test domain's clips is held out; every other
    clip, including the rest of the test domain, goes to train.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    _check_split_preconditions(records)
    rng = np.random.default_rng(seed)
    splits = []
    for scen, loc in manifest.designated_test_domains:
        in_domain = [r.clip_id for r in records if r.scenario == scen and r.location == loc]
        if not in_domain:
            raise SplitError(f"test domain {scen}/{loc} has no clips")
        n_test = int(round(test_fraction * len(in_domain)))
        n_test = min(max(n_test, 1), len(in_domain) - 1) if len(in_domain) > 1 else 1
        picked = set(rng.choice(len(in_domain), size=n_test, replace=False).tolist())
        test = [cid for i, cid in enumerate(in_domain) if i in picked]
        test_set = set(test)
        train = [r.clip_id for r in records if r.clip_id not in test_set]
        splits.append(SplitSpec(scen, loc, train, test))
    return splits


def find_leaks(split: SplitSpec, records: Sequence[ClipRecord]) -> list[str]:
    """Train clips that share scenario or location with the held-out domain."""
    by_id = {r.clip_id: r for r in records}
    return [
        cid
        for cid in split.train_ids
        if by_id[cid].scenario == split.held_out_scenario or by_id[cid].location == split.held_out_location
    ]


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    num_classes: int = 8
    num_scenarios: int = 4
    num_locations: int = 4
    clips_per_domain: int = 200
    dim_appearance: int = 64
    dim_motion: int = 16
    dim_audio: int = 32
    dim_text: int = 32
    shift_appearance: float = 4.0
    shift_motion: float = 0.3
    shift_audio: float = 0.4
    noise: float = 1.5
    text_noise: float = 0.1
    inconsistent_audio_fraction: float = 0.3
    missing_audio_fraction: float = 0.0
    inconsistent_audio_source: str = "ambient"
    class_specific_shift: float = 0.0
    num_test_domains: int | None = None
    seed: int = 0

    def validate(self) -> None:
        for name in ("shift_appearance", "shift_motion", "shift_audio", "noise", "text_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("inconsistent_audio_fraction", "missing_audio_fraction", "class_specific_shift"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("num_classes", "num_scenarios", "num_locations", "clips_per_domain",
                     "dim_appearance", "dim_motion", "dim_audio", "dim_text"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.inconsistent_audio_source not in ("ambient", "other_class"):
            raise ValueError(f"inconsistent_audio_source must be 'ambient' or 'other_class'")


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(cfg: SynthConfig) -> tuple[DatasetManifest, list[ClipRecord]]:
    """Fabricate a multi-domain dataset with controlled per-modality shift.

    Every class has a unit-norm prototype per modality. Each domain displaces
    the prototypes by a random vector whose norm is the modality's shift;
    ``class_specific_shift`` moves that much of the offset variance into an
    independent per-class part. Clips add isotropic noise of expected norm
    ``noise``.
    With probability ``inconsistent_audio_fraction`` a clip's audio does not
    reflect its action: it is the domain's background sound (``"ambient"``)
    or another class's sound (``"other_class"``). Audio narrations describe
    the audio actually present, so for those clips they disagree with the
    visual narration. Ground truth is kept in ``gt_consistency`` (1.0
    consistent, 0.0 not).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    C = cfg.num_classes
    dims = {"appearance": cfg.dim_appearance, "motion": cfg.dim_motion, "audio": cfg.dim_audio, "text": cfg.dim_text}
    scenarios = [f"S{i}" for i in range(cfg.num_scenarios)]
    locations = [f"L{j}" for j in range(cfg.num_locations)]
    domains = [(s, l) for s in scenarios for l in locations]
    n_test = min(cfg.num_scenarios, cfg.num_locations) if cfg.num_test_domains is None else cfg.num_test_domains
    test_domains = [(scenarios[i], locations[i]) for i in range(min(n_test, cfg.num_scenarios, cfg.num_locations))]
    class_names = [f"action{c:02d}" for c in range(C)]

    proto = {m: _unit_rows(rng, C, dims[m]) for m in ("appearance", "motion", "audio")}
    text_proto = _unit_rows(rng, C, cfg.dim_text)
    sound_proto = _unit_rows(rng, C, cfg.dim_text)
    # background sound per domain, used when the action itself is silent
    ambient = {d: v for d, v in zip(domains, _unit_rows(rng, len(domains), cfg.dim_audio))}
    ambient_text = {d: v for d, v in zip(domains, _unit_rows(rng, len(domains), cfg.dim_text))}
    shifts = {"appearance": cfg.shift_appearance, "motion": cfg.shift_motion, "audio": cfg.shift_audio}
    # offset = shared (background) part + per-class part, mixed in variance by class_specific_shift
    w_cls = np.sqrt(cfg.class_specific_shift)
    w_dom = np.sqrt(1.0 - cfg.class_specific_shift)
    offsets = {}
    for m in ("appearance", "motion", "audio"):
        offsets[m] = {}
        for d in domains:
            off = w_dom * _unit_rows(rng, 1, dims[m]) + w_cls * _unit_rows(rng, C, dims[m])
            offsets[m][d] = off / np.linalg.norm(off, axis=1, keepdims=True) * shifts[m]

    def noisy(center: np.ndarray, sigma: float) -> np.ndarray:
        d = center.shape[0]
        return (center + rng.standard_normal(d) * (sigma / np.sqrt(d))).astype(np.float32)

    records = []
    for d_idx, dom in enumerate(domains):
        labels = np.arange(cfg.clips_per_domain) % C
        rng.shuffle(labels)
        for k, c in enumerate(labels):
            c = int(c)
            rec = ClipRecord(
                clip_id=f"{dom[0]}_{dom[1]}_{k:05d}",
                scenario=dom[0],
                location=dom[1],
                label=c,
                emb_appearance=noisy(proto["appearance"][c] + offsets["appearance"][dom][c], cfg.noise),
                emb_motion=noisy(proto["motion"][c] + offsets["motion"][dom][c], cfg.noise),
                emb_vis_narration=noisy(text_proto[c], cfg.text_noise),
                vis_narration_text=f"someone performs {class_names[c]}",
            )
            bad = rng.random() < cfg.inconsistent_audio_fraction
            src = c
            if bad and cfg.inconsistent_audio_source == "other_class":
                src = int((c + rng.integers(1, C)) % C)
            missing = rng.random() < cfg.missing_audio_fraction
            if not missing:
                if bad and cfg.inconsistent_audio_source == "ambient":
                    rec.emb_audio = noisy(ambient[dom], cfg.noise)
                    rec.emb_audio_narration = noisy(ambient_text[dom], cfg.text_noise)
                    rec.aud_narration_text = f"background noise in {dom[1]}"
                else:
                    rec.emb_audio = noisy(proto["audio"][src] + offsets["audio"][dom][src], cfg.noise)
                    rec.emb_audio_narration = noisy(0.8 * text_proto[src] + 0.6 * sound_proto[src], cfg.text_noise)
                    rec.aud_narration_text = f"the sound of {class_names[src]}"
                rec.gt_consistency = 0.0 if bad else 1.0
            records.append(rec)

    manifest = DatasetManifest(
        num_classes=C,
        dims=dims,
        class_names=class_names,
        domains=domains,
        record_count=len(records),
        test_domains=test_domains,
    )
    return manifest, records
