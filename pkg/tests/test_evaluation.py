import numpy as np
import pytest

from gmdg import evaluation as ev


def test_empty_class_handling():
    z = np.zeros((2, 3, 3), int)
    assert ev.volumetric_dice(z, z, 1) == 1.0
    assert np.isnan(ev.case_scores([z], [z], [1], empty_nan=True)[0, 0])
    with pytest.raises(ValueError):
        ev.volumetric_dice(z, z[:1], 1)


def test_nan_cases_are_skipped_in_aggregation():
    s = np.array([[1.0, np.nan], [0.5, 0.2]])
    rows = {r["class"]: r for r in ev.aggregate("A", [s], [1, 2])}
    assert rows[1]["mean"] == 0.75 and rows[2]["mean"] == 0.2


def _report():
    rng = np.random.default_rng(0)
    rows = []
    for arm in ev.ARMS:
        rows += ev.aggregate(arm, [rng.random((4, 2)) for _ in range(3)], [1, 2])
    return {"arms": list(ev.ARMS), "classes": [1, 2], "rows": rows,
            "class_names": {"1": "ring", "2": "inner"}}


def test_table_marks_components():
    table = ev.format_table(_report())
    lines = table.strip().splitlines()
    assert lines[0] == "| HA | GMR | PITTA | ring | inner | Average |"
    assert len(lines) == 2 + len(ev.ARMS)
    gmr_pitta = next(line for line in lines if line.startswith("| ✓ | ✓ | ✓ |"))
    assert gmr_pitta.count("±") == 3


def test_csv_round_trips_values():
    rep = _report()
    lines = ev.format_csv(rep).strip().splitlines()
    assert len(lines) == 1 + len(rep["rows"])
    first = lines[1].split(",")
    assert float(first[2]) == rep["rows"][0]["mean"]


def test_unknown_arm_rejected():
    with pytest.raises(ValueError):
        ev.run_experiment({"arms": ["Oracle"]}, data=(None, None, [], 2))


def test_experiment_with_supplied_models():
    class Fixed:
        adaptation = None

        def predict(self, X):
            return (np.asarray(X) > 0.5).astype(int)

    rng = np.random.default_rng(1)
    cases = [(f"c{i}", rng.random((1, 6, 6)), rng.integers(0, 2, (1, 6, 6))) for i in range(3)]
    models = {(rep, s): Fixed() for rep in ("raw", "gmr") for s in (0, 1)}
    rep = ev.run_experiment({"arms": ["SrcOnly(raw)", "SrcOnly(GMR)"], "seeds": [0, 1]},
                            data=(None, None, cases, 2), models=models)
    a, b = ev.rows_for(rep, "SrcOnly(raw)"), ev.rows_for(rep, "SrcOnly(GMR)")
    assert a[1]["mean"] == b[1]["mean"] and a[1]["std"] == 0.0
    expect = np.mean([ev.volumetric_dice(img > 0.5, t, 1) for _, img, t in cases])
    assert abs(a[1]["mean"] - expect) <= 1e-12
    assert len(rep["per_case"]) == 2 * 2 * 3
