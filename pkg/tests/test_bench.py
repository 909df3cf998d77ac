import csv
import json

import numpy as np
import pytest

from ubp.bench import (
    EFFICACY_FIELDS, KERNEL_FIELDS, PRESETS, TIMING_FIELDS, SweepSpec, layer_seed, paired_ratio,
    sweep_efficacy, sweep_kernels, sweep_selection_timing, write_csv,
)
from ubp.tensor_io import WeightTensor

EXAMPLE = WeightTensor.from_array(np.array([3, 9, 8, 1, 1, 7, 6, 2], np.float32).reshape(8, 1, 1, 1))
TIMING_ONLY = {"seconds", "median_elapsed", "gflops", "median_seconds", "min_seconds", "samples"}


def small_spec(**kw):
    base = dict(shapes=[(16, 12, 20), (12, 8, 9)], block_sizes=[2, 4], sparsities=[0.5, 0.8],
                repeats=2, min_time=0.0)
    base.update(kw)
    return SweepSpec(**base)


def test_efficacy_rows_on_worked_layer():
    spec = SweepSpec(shapes=[(8, 1, 1)], block_sizes=[2], sparsities=[0.25])
    rows = {r["method"]: r for r in sweep_efficacy(spec, layers=[("example", EXAMPLE)])}
    assert rows["greedy"]["efficacy"] == 0.5
    assert rows["bed"]["efficacy"] == pytest.approx(0.8333, abs=1e-4)
    assert rows["optimal"]["efficacy"] == pytest.approx(0.8333, abs=1e-4)
    assert rows["abp"]["efficacy"] == 0.0
    assert rows["ep"]["efficacy"] == 1.0
    assert rows["bed"]["kept_score"] == 34 and rows["bed"]["m"] == 3
    assert all(r["status"] == "ok" for r in rows.values())


def test_zero_dp_budget_marks_timeouts():
    rows = sweep_efficacy(small_spec(dp_timeout=0))
    dp = [r for r in rows if r["method"] == "optimal"]
    assert dp and all(r["status"] == "timeout" for r in dp)
    assert all(r["status"] == "ok" for r in rows if r["method"] in ("abp", "ep"))


def test_efficacy_rows_are_self_describing():
    spec = small_spec()
    rows = sweep_efficacy(spec)
    assert len(rows) == 2 * 2 * 2 * len(spec.methods)
    for r in rows:
        assert set(EFFICACY_FIELDS) <= set(r)
        if r["method"] == "abp" and r["status"] == "ok":
            assert r["efficacy"] == 0.0


def test_infeasible_points_are_recorded():
    # N=4 on a 6x2 layer: m = 3 at p = 0, but only one block fits per column
    spec = SweepSpec(shapes=[(6, 2, 3)], block_sizes=[4], sparsities=[0.0])
    rows = sweep_efficacy(spec)
    assert any(r["status"].startswith("infeasible") for r in rows)


def test_non_timing_fields_are_reproducible():
    def strip(rows):
        return [{k: v for k, v in r.items() if k not in TIMING_ONLY} for r in rows]

    spec = small_spec(threads=[1, 2])
    assert strip(sweep_efficacy(spec)) == strip(sweep_efficacy(spec))
    assert strip(sweep_kernels(spec)) == strip(sweep_kernels(spec))


def test_kernel_rows():
    spec = small_spec(threads=[1, 3])
    rows = sweep_kernels(spec)
    assert len(rows) == 2 * 2 * 2 * 3 * 2
    for r in rows:
        assert set(KERNEL_FIELDS) <= set(r)
        assert r["correct"] is True
        assert r["median_elapsed"] > 0 and r["gflops"] > 0
        assert len(r["samples"]) == spec.repeats
        if r["kernel"] == "wros":
            assert r["register_copies"] == 0
        if r["kernel"] == "naive":
            assert r["register_copies"] > 0


def test_timing_rows():
    spec = SweepSpec(shapes=[(64, 64, 1)], block_sizes=[4], block_counts=[1, 4],
                     methods=["greedy", "bed", "optimal", "optimal-indexset", "ep"], repeats=3)
    rows = sweep_selection_timing(spec)
    assert {r["method"] for r in rows} == {"greedy", "bed", "optimal", "optimal-indexset"}
    for r in rows:
        assert set(TIMING_FIELDS) <= set(r)
        assert r["b"] == 4096 and r["status"] == "ok"
        if r["m"] == 1:
            assert r["min_seconds"] < 1e-3


def test_timing_timeout():
    spec = SweepSpec(shapes=[(64, 64, 1)], block_sizes=[4], block_counts=[50],
                     methods=["optimal"], repeats=2, dp_timeout=0)
    (row,) = sweep_selection_timing(spec)
    assert row["status"] == "timeout" and row["median_seconds"] == ""


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        SweepSpec(shapes=[])
    with pytest.raises(ValueError):
        SweepSpec(shapes=[(4, 4, 4)], repeats=0)
    with pytest.raises(ValueError):
        SweepSpec(shapes=[(4, 4)])
    with pytest.raises(ValueError):
        SweepSpec(preset="resnet")
    f = tmp_path / "spec.json"
    f.write_text(json.dumps({"shapes": [[4, 4, 4]], "warmup": 3}))
    with pytest.raises(ValueError, match="warmup"):
        SweepSpec.from_json(f)


def test_spec_json_round_trip(tmp_path):
    spec = small_spec(threads=[1, 4], preset=None)
    f = tmp_path / "spec.json"
    f.write_text(spec.to_json())
    assert SweepSpec.from_json(f) == spec


def test_preset():
    spec = SweepSpec(preset="mobilenet_v1")
    assert spec.shapes == PRESETS["mobilenet_v1"]
    assert all(cols == 196 for _, _, cols in spec.shapes)


def test_layer_seed_is_stable():
    assert layer_seed(0, 1) == layer_seed(0, 1)
    assert layer_seed(0, 1) != layer_seed(0, 2)


def test_paired_ratio():
    # num is twice as fast as den in every round
    assert paired_ratio([1.0, 2.0, 4.0], [2.0, 4.0, 8.0]) == 2.0


def test_write_csv(tmp_path):
    rows = sweep_kernels(small_spec(shapes=[(8, 8, 4)], block_sizes=[2], sparsities=[0.5]))
    f = tmp_path / "k.csv"
    write_csv(rows, f, KERNEL_FIELDS)
    with open(f) as fh:
        back = list(csv.DictReader(fh))
    assert len(back) == len(rows)
    assert list(back[0]) == KERNEL_FIELDS
