import itertools
import json
import struct
from collections import Counter

import numpy as np
import pytest

from mmdg.datamodel import (
    ClipRecord,
    Dataset,
    DatasetError,
    DatasetManifest,
    SplitError,
    SynthConfig,
    dataset_hash,
    find_leaks,
    generate_synthetic,
    make_seen_domain_splits,
    make_splits,
    read_dataset,
    update_clip_metadata,
    write_dataset,
)

DIMS = {"appearance": 4, "motion": 3, "audio": 2, "text": 5}


def manifest(domains, test_domains=None, n=0):
    return DatasetManifest(
        num_classes=3, dims=dict(DIMS), class_names=["a", "b", "c"], domains=list(domains),
        record_count=n, test_domains=test_domains,
    )


def record(i, scen="S0", loc="L0", audio=True, rng=None):
    rng = rng or np.random.default_rng(i)
    f = lambda d: rng.standard_normal(d).astype(np.float32)
    return ClipRecord(
        clip_id=f"c{i}", scenario=scen, location=loc, label=i % 3,
        emb_appearance=f(4), emb_motion=f(3), emb_vis_narration=f(5),
        emb_audio=f(2) if audio else None, emb_audio_narration=f(5) if audio else None,
        consistency=0.25 if audio else None,
    )


def grid_records(scenarios, locations, per=3):
    out, i = [], 0
    for s, l in itertools.product(scenarios, locations):
        for _ in range(per):
            out.append(record(i, s, l))
            i += 1
    return out


# ---------------------------------------------------------------- round trip

def test_empty_dataset_round_trip(tmp_path):
    write_dataset([], manifest([("S0", "L0")]), tmp_path / "ds")
    m, recs = read_dataset(tmp_path / "ds")
    assert recs == [] and m.record_count == 0


def test_three_records_bit_identical(tmp_path):
    recs = [record(0), record(1, audio=False), record(2)]
    recs[2].emb_appearance[0] = np.float32(np.nextafter(np.float32(1), np.float32(2)))
    m = manifest([("S0", "L0")], n=3)
    write_dataset(recs, m, tmp_path / "ds")
    m2, back = read_dataset(tmp_path / "ds")
    assert back == recs
    assert m2.to_json() == m.to_json()
    assert back[1].emb_audio is None and back[1].consistency is None


def test_blob_header_layout(tmp_path):
    recs = [record(0), record(1)]
    write_dataset(recs, manifest([("S0", "L0")], n=2), tmp_path / "ds")
    raw = (tmp_path / "ds" / "appearance.bin").read_bytes()
    magic, version, rows, dim = struct.unpack_from("<4sIII", raw)
    assert (magic, version, rows, dim) == (b"MMDG", 1, 2, 4)
    body = np.frombuffer(raw[16:], dtype="<f4").reshape(2, 4)
    np.testing.assert_array_equal(body[1], recs[1].emb_appearance)


def test_corrupted_magic_is_load_error(tmp_path):
    write_dataset([record(0)], manifest([("S0", "L0")], n=1), tmp_path / "ds")
    p = tmp_path / "ds" / "motion.bin"
    raw = bytearray(p.read_bytes())
    raw[:4] = b"XXXX"
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="motion"):
        read_dataset(tmp_path / "ds")


def test_truncated_blob_is_load_error(tmp_path):
    write_dataset([record(0), record(1)], manifest([("S0", "L0")], n=2), tmp_path / "ds")
    p = tmp_path / "ds" / "audio.bin"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "ds")


def test_version_mismatch_is_load_error(tmp_path):
    write_dataset([record(0)], manifest([("S0", "L0")], n=1), tmp_path / "ds")
    mp = tmp_path / "ds" / "manifest.json"
    d = json.loads(mp.read_text())
    d["version"] = 99
    mp.write_text(json.dumps(d))
    with pytest.raises(DatasetError, match="version"):
        read_dataset(tmp_path / "ds")


def test_dim_mismatch_is_load_error(tmp_path):
    write_dataset([record(0)], manifest([("S0", "L0")], n=1), tmp_path / "ds")
    mp = tmp_path / "ds" / "manifest.json"
    d = json.loads(mp.read_text())
    d["dims"]["motion"] = 7
    mp.write_text(json.dumps(d))
    with pytest.raises(DatasetError, match="dim"):
        read_dataset(tmp_path / "ds")


def test_write_rejects_inconsistent_records(tmp_path):
    bad = record(0)
    bad.emb_motion = np.zeros(9, dtype=np.float32)
    with pytest.raises(DatasetError):
        write_dataset([bad], manifest([("S0", "L0")], n=1), tmp_path / "ds")
    bad = record(0)
    bad.label = 5
    with pytest.raises(DatasetError):
        write_dataset([bad], manifest([("S0", "L0")], n=1), tmp_path / "ds2")
    bad = record(0, audio=False)
    bad.consistency = 0.5
    with pytest.raises(DatasetError):
        write_dataset([bad], manifest([("S0", "L0")], n=1), tmp_path / "ds3")


def test_missing_parent_directory(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope"):
        write_dataset([], manifest([("S0", "L0")]), tmp_path / "nope" / "ds")


def test_update_clip_metadata_and_hash(tmp_path):
    recs = [record(0), record(1)]
    write_dataset(recs, manifest([("S0", "L0")], n=2), tmp_path / "ds")
    h0 = dataset_hash(tmp_path / "ds")
    recs[0].consistency = 0.9
    update_clip_metadata(tmp_path / "ds", recs)
    _, back = read_dataset(tmp_path / "ds")
    assert back[0].consistency == 0.9
    assert dataset_hash(tmp_path / "ds") != h0


# ---------------------------------------------------------------- splits

def test_two_by_two_split_excludes_row_and_column():
    recs = grid_records(["S0", "S1"], ["L0", "L1"])
    m = manifest([(s, l) for s in ["S0", "S1"] for l in ["L0", "L1"]])
    splits = make_splits(m, recs)
    assert len(splits) == 4
    by_id = {r.clip_id: r for r in recs}
    for sp in splits:
        train_domains = {by_id[i].domain for i in sp.train_ids}
        # only the diagonally opposite domain survives
        other_s = "S1" if sp.held_out_scenario == "S0" else "S0"
        other_l = "L1" if sp.held_out_location == "L0" else "L0"
        assert train_domains == {(other_s, other_l)}
        assert {by_id[i].domain for i in sp.test_ids} == {(sp.held_out_scenario, sp.held_out_location)}


ARGO_TEST_DOMAINS = [
    ("Gardening", "US-PNA"), ("Cleaning", "US-MN"), ("Knitting", "IND"), ("Shopping", "IND"),
    ("Building", "US-PNA"), ("Mechanic", "SAU"), ("Sport", "COL"), ("Cooking", "JPN"),
    ("Art", "ITA"), ("Playing", "US-IN"),
]


def test_argo_shaped_metadata_gives_ten_splits():
    domains = list(ARGO_TEST_DOMAINS) + [("Cooking", "IND"), ("Sport", "US-PNA"), ("Art", "SAU")]
    recs = [record(i, s, l) for i, (s, l) in enumerate(domains * 2)]
    m = manifest(domains, test_domains=ARGO_TEST_DOMAINS)
    splits = make_splits(m, recs)
    assert [(s.held_out_scenario, s.held_out_location) for s in splits] == ARGO_TEST_DOMAINS
    assert splits[7].name == "Cooking-JPN"
    for sp in splits:
        assert len(sp.test_ids) == 2
        assert find_leaks(sp, recs) == []


def test_single_scenario_is_precondition_error():
    recs = grid_records(["S0"], ["L0", "L1"])
    with pytest.raises(SplitError, match="scenarios"):
        make_splits(manifest([("S0", "L0"), ("S0", "L1")]), recs)


def test_empty_test_domain_is_named():
    recs = grid_records(["S0", "S1"], ["L0", "L1"])
    recs = [r for r in recs if r.domain != ("S1", "L0")]
    m = manifest([("S0", "L0"), ("S1", "L0")])
    with pytest.raises(SplitError, match="S1/L0"):
        make_splits(m, recs)


def test_splits_deterministic():
    recs = grid_records(["S0", "S1"], ["L0", "L1"])
    m = manifest([("S0", "L0"), ("S1", "L1")])
    assert make_splits(m, recs) == make_splits(m, recs)


def test_seen_domain_split_arithmetic():
    recs = [record(i, "S0", "L0") for i in range(100)] + grid_records(["S1"], ["L1"], per=10)
    for r in recs[100:]:
        r.clip_id = "x" + r.clip_id
    m = manifest([("S0", "L0"), ("S1", "L1")], test_domains=[("S0", "L0")])
    (sp,) = make_seen_domain_splits(m, recs, test_fraction=0.2, seed=0)
    in_domain_train = [i for i in sp.train_ids if not i.startswith("x")]
    assert len(sp.test_ids) == 20 and len(in_domain_train) == 80
    assert not set(sp.test_ids) & set(sp.train_ids)


def test_seen_domain_splits_partition_and_determinism():
    man, recs = generate_synthetic(SynthConfig(num_scenarios=2, num_locations=2, clips_per_domain=30, seed=3))
    a = make_seen_domain_splits(man, recs, 0.2, seed=1)
    b = make_seen_domain_splits(man, recs, 0.2, seed=1)
    assert a == b
    unseen = make_splits(man, recs)
    for s, u in zip(a, unseen):
        assert not set(s.test_ids) & set(s.train_ids)
        assert set(s.test_ids) <= set(u.test_ids)
    assert a != make_seen_domain_splits(man, recs, 0.2, seed=2)


def test_seen_domain_rejects_bad_fraction():
    recs = grid_records(["S0", "S1"], ["L0", "L1"])
    with pytest.raises(SplitError):
        make_seen_domain_splits(manifest([("S0", "L0")]), recs, test_fraction=1.0)


def test_exhaustive_leak_scan_on_generated_data():
    man, recs = generate_synthetic(SynthConfig(num_scenarios=3, num_locations=4, clips_per_domain=10))
    splits = make_splits(man, recs)
    assert splits
    by_id = {r.clip_id: r for r in recs}
    for sp in splits:
        for cid in sp.train_ids:
            r = by_id[cid]
            assert r.scenario != sp.held_out_scenario and r.location != sp.held_out_location
        assert find_leaks(sp, recs) == []


def test_find_leaks_detects_planted_leak():
    recs = grid_records(["S0", "S1"], ["L0", "L1"])
    sp = make_splits(manifest([("S0", "L0")]), recs)[0]
    leaky = type(sp)(sp.held_out_scenario, sp.held_out_location, sp.train_ids + [sp.test_ids[0]], sp.test_ids)
    assert find_leaks(leaky, recs) == [sp.test_ids[0]]


# ---------------------------------------------------------------- generator

def test_generator_deterministic(tmp_path):
    cfg = SynthConfig(num_scenarios=2, num_locations=2, clips_per_domain=20, seed=5)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert a[1] == b[1]
    write_dataset(a[1], a[0], tmp_path / "a")
    write_dataset(b[1], b[0], tmp_path / "b")
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generated_dataset_round_trip(tmp_path):
    man, recs = generate_synthetic(SynthConfig(num_scenarios=2, num_locations=2, clips_per_domain=10))
    write_dataset(recs, man, tmp_path / "ds")
    m2, back = read_dataset(tmp_path / "ds")
    assert back == recs and m2.to_json() == man.to_json()


def test_labels_balanced_within_domain():
    man, recs = generate_synthetic(SynthConfig(clips_per_domain=203, num_classes=8))
    by_domain = {}
    for r in recs:
        by_domain.setdefault(r.domain, Counter())[r.label] += 1
    for counts in by_domain.values():
        vals = [counts.get(c, 0) for c in range(8)]
        assert max(vals) - min(vals) <= 1


def test_no_bad_audio_means_all_consistent():
    _, recs = generate_synthetic(SynthConfig(inconsistent_audio_fraction=0.0, clips_per_domain=20))
    assert all(r.gt_consistency == 1.0 for r in recs)


def test_bad_audio_fraction_recorded():
    _, recs = generate_synthetic(SynthConfig(inconsistent_audio_fraction=0.3))
    frac = np.mean([r.gt_consistency == 0.0 for r in recs])
    assert abs(frac - 0.3) < 0.03


def test_no_shift_limit_features_agree_across_domains():
    cfg = SynthConfig(shift_appearance=0, shift_motion=0, shift_audio=0, noise=0.0, clips_per_domain=16)
    _, recs = generate_synthetic(cfg)
    for c in range(cfg.num_classes):
        rows = [r for r in recs if r.label == c and r.gt_consistency == 1.0]
        ap = np.stack([r.emb_appearance for r in rows])
        mo = np.stack([r.emb_motion for r in rows])
        assert np.abs(ap - ap[0]).max() < 1e-6
        assert np.abs(mo - mo[0]).max() < 1e-6


def _centroid_spread(recs, field, c):
    cents = {}
    for r in recs:
        if r.label == c:
            cents.setdefault(r.domain, []).append(getattr(r, field))
    pts = np.stack([np.mean(v, axis=0) for v in cents.values()])
    d = [np.linalg.norm(a - b) for a, b in itertools.combinations(pts, 2)]
    return float(np.mean(d))


def test_default_appearance_centroids_spread_far_more_than_motion():
    _, recs = generate_synthetic(SynthConfig())
    for c in range(3):
        ratio = _centroid_spread(recs, "emb_appearance", c) / _centroid_spread(recs, "emb_motion", c)
        assert ratio >= 3.0, ratio


def test_missing_audio_fraction():
    _, recs = generate_synthetic(SynthConfig(missing_audio_fraction=0.4, clips_per_domain=50))
    missing = np.mean([not r.has_audio for r in recs])
    assert 0.3 < missing < 0.5
    assert all(r.consistency is None for r in recs if not r.has_audio)


def test_synth_config_validation():
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(shift_motion=-1))
    with pytest.raises(ValueError):
        generate_synthetic(SynthConfig(inconsistent_audio_fraction=1.5))


def test_dataset_view_arrays_line_up():
    man, recs = generate_synthetic(SynthConfig(num_scenarios=2, num_locations=2, clips_per_domain=5))
    ds = Dataset(man, recs)
    i = ds.index[recs[7].clip_id]
    np.testing.assert_array_equal(ds.arrays["appearance"][i], recs[7].emb_appearance)
    assert ds.labels[i] == recs[7].label
