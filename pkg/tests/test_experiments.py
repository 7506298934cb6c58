import math

import numpy as np
import pytest

from flowssc.experiments import (
    codec_comparison,
    columns,
    read_table,
    refiner_ablation,
    steps_ablation,
    write_table,
)
from flowssc.flow import StepSchedule
from flowssc.harness.config import RunConfig
from flowssc.synth import SceneSpec, generate_scene


@pytest.fixture(scope="module")
def grids():
    return np.stack([generate_scene(SceneSpec(), s) for s in range(3)])


def test_column_order():
    assert columns(5) == ["experiment", "variant", "iou", "miou", "iou_ground", "iou_building",
                          "iou_vehicle", "iou_vegetation", "wall_ms"]
    assert columns(3) == ["experiment", "variant", "iou", "miou", "iou_class1", "iou_class2", "wall_ms"]


def test_identical_sources_zero_delta(grids):
    rows = refiner_ablation(grids, grids, grids.copy(), 5)
    delta = rows[2]
    assert [r["variant"] for r in rows] == ["coarse", "refined", "delta"]
    for k in columns(5)[2:-1]:
        assert delta[k] == 0.0
    assert rows[0]["miou"] == 1.0


def test_refined_improvement_shows_in_delta(grids):
    coarse = grids.copy()
    coarse[:, :, :, 1:] = 0
    rows = refiner_ablation(grids, coarse, grids, 5)
    assert rows[2]["miou"] > 0 and rows[2]["iou"] > 0


def test_steps_table_rows_and_timing(grids):
    calls = []

    def run(n):
        calls.append(n)
        return grids, 0.003 * n

    rows = steps_ablation(run, grids, (1, 2, 4), 5)
    assert calls == [1, 2, 4]
    assert [r["variant"] for r in rows] == ["1", "2", "4"]
    assert [r["wall_ms"] for r in rows] == pytest.approx([1.0, 2.0, 4.0])


def test_table_roundtrip(tmp_path, grids):
    rows = codec_comparison({"xattn": grids, "conv": np.zeros_like(grids)}, grids, 5)
    write_table(tmp_path / "t.csv", rows, 5)
    back = read_table(tmp_path / "t.csv")
    assert list(back[0]) == columns(5)
    assert float(back[0]["miou"]) == 1.0 and float(back[1]["iou"]) == 0.0
    assert math.isnan(float(back[0]["wall_ms"]))


def test_default_step_set_accepted():
    steps = RunConfig().eval.steps
    assert steps == (1, 2, 4, 8, 16)
    for n in steps:
        StepSchedule().check_steps(n)
