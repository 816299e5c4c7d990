import struct

import numpy as np
import pytest

from spreadnet.dataio import (FormatError, read_esg, read_manifest, split_dataset, write_esg,
                              write_heatmap, write_manifest)
from spreadnet.grids import EnsembleSample, GridSpec


def sample_of(data, **kw):
    m, t, c, p, h, w = data.shape
    spec = GridSpec.make(n_params=c, n_levels=p, n_lat=h, n_lon=w, forecast_times=tuple(range(t)))
    return EnsembleSample(spec, data, **kw)


def test_unit_file_bytes(tmp_path):
    path = tmp_path / "one.esg"
    write_esg(sample_of(np.ones((1, 1, 1, 1, 1, 1)), control_index=0), path)
    expected = b"ESG1" + b"\x01\x00\x00\x00" * 7 + b"\x00" * 8 + b"\x00\x00\x80\x3f"
    assert path.read_bytes() == expected
    assert len(expected) == 40 + 4


def test_round_trip_single_precision(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((3, 2, 2, 3, 4, 5)) * 100
    s = sample_of(data, control_index=None, sample_id="abc", epoch_tag=7)
    write_esg(s, tmp_path / "a.esg")
    back = read_esg(tmp_path / "a.esg")
    np.testing.assert_array_equal(back.data, data.astype(np.float32).astype(np.float64))
    assert back.spec == s.spec
    assert (back.sample_id, back.epoch_tag, back.control_index) == ("abc", 7, None)
    meta = (tmp_path / "a.esg.meta").read_text()
    assert "epoch_tag=7" in meta and "control_index=none" in meta


def test_bad_files(tmp_path):
    good = tmp_path / "g.esg"
    write_esg(sample_of(np.ones((1, 1, 1, 1, 2, 2))), good)
    raw = good.read_bytes()
    bad = tmp_path / "b.esg"
    bad.write_bytes(b"ESGX" + raw[4:])
    with pytest.raises(FormatError, match="not an ESG file"):
        read_esg(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="unsupported version"):
        read_esg(bad)
    bad.write_bytes(raw[:-2])
    with pytest.raises(FormatError, match="truncated file"):
        read_esg(bad)
    bad.write_bytes(raw[:-4] + struct.pack("<f", float("nan")))
    with pytest.raises(FormatError, match="corrupt data"):
        read_esg(bad)


def test_split_sizes_and_determinism():
    ids = [f"s{i}" for i in range(100)]
    m = split_dataset(ids, seed=5)
    assert (len(m.train_ids), len(m.val_ids), len(m.test_ids)) == (80, 20, 0)
    assert split_dataset(ids, seed=5) == m
    other = split_dataset(ids, seed=6)
    assert other.train_ids != m.train_ids
    for man in (m, other):
        assert sorted(man.all_ids()) == sorted(ids)


def test_split_test_tags():
    ids = [f"s{i}" for i in range(10)]
    m = split_dataset(ids, seed=1, test_epoch_tags={8, 9}, epoch_tags=list(range(10)))
    assert m.test_ids == ["s8", "s9"]
    assert len(m.train_ids) == 6 and len(m.val_ids) == 2
    with pytest.raises(ValueError, match="empty training set"):
        split_dataset(ids, seed=1, test_epoch_tags={0}, epoch_tags=[0] * 10)


def test_manifest_file(tmp_path):
    m = split_dataset([f"s{i}" for i in range(12)], seed=42, test_epoch_tags={3},
                      epoch_tags=[i // 3 for i in range(12)])
    write_manifest(m, tmp_path / "m.txt")
    text = (tmp_path / "m.txt").read_text().splitlines()
    assert text[0] == "seed=42"
    assert "[train]" in text and "[val]" in text and "[test]" in text
    assert read_manifest(tmp_path / "m.txt") == m


def test_heatmap_floor_case(tmp_path):
    csv, pgm = write_heatmap(np.zeros((2, 3)), tmp_path / "h")
    assert csv.read_text().splitlines() == ["-8.000000,-8.000000,-8.000000"] * 2
    lines = pgm.read_text().splitlines()
    assert lines[:3] == ["P2", "3 2", "255"]
    assert lines[3:] == ["0 0 0", "0 0 0"]


def test_heatmap_single_cell(tmp_path):
    d = np.zeros((2, 2))
    d[1, 0] = 1.0
    csv, pgm = write_heatmap(d, tmp_path / "h.csv")
    assert csv.read_text().splitlines() == ["-8.000000,-8.000000", "0.000000,-8.000000"]
    assert pgm.read_text().splitlines()[3:] == ["0 0", "255 0"]
    csv, _ = write_heatmap(np.full((1, 1), 1e-8), tmp_path / "floor")
    assert csv.read_text().strip() == "-8.000000"


def test_heatmap_monotone_and_errors(tmp_path):
    vals = np.sort(np.random.default_rng(0).uniform(0, 5, 20)).reshape(1, -1)
    csv, _ = write_heatmap(vals, tmp_path / "m")
    logs = np.array([float(v) for v in csv.read_text().strip().split(",")])
    assert np.all(np.diff(logs) >= 0)
    with pytest.raises(ValueError):
        write_heatmap(-np.ones((2, 2)), tmp_path / "neg")
