import json

import numpy as np
import pytest

from watermark3d import evaluation
from watermark3d.codec import InformationMatrix
from watermark3d.errors import ShapeMismatchError
from watermark3d.evaluation import (ConfusionCounts, ExperimentConfig, ExperimentReport, ReportRow,
                                    bit_position_correlation, cv_folds, run_active_learning,
                                    run_cross_validation, run_holdout, score)
from watermark3d.model import TrainConfig
from watermark3d.render import ConditionRanges, ObjectPlan, generate_objects, read_manifest

TINY_CFG = ExperimentConfig(train=TrainConfig(crop_size=64, crops_per_image=1, batch_size=4, epochs=1,
                                              channels=(2, 2, 2, 2, 1)))


@pytest.fixture(scope="module")
def tiny_records(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    plans = [ObjectPlan(1, "green", 10, 5, "train"), ObjectPlan(2, "blue", 10, 5, "train"),
             ObjectPlan(3, "green", 3, 2, "test")]
    generate_objects(out, plans, 10, 3, ranges=ConditionRanges(out_size=256))
    return read_manifest(out / "manifest.jsonl")


# -- scoring -----------------------------------------------------------------------

def matrix_with_ones(m, idx):
    bits = np.zeros(m * m, dtype=np.uint8)
    bits[list(idx)] = 1
    return InformationMatrix(bits.reshape(m, m))


def test_score_perfect():
    M = matrix_with_ones(20, range(10))
    c = score(M, M)
    assert (c.tp, c.tn, c.fp, c.fn) == (10, 390, 0, 0)
    assert c.tpr == c.spc == c.ppv == c.npv == 1.0


def test_score_complement():
    M = matrix_with_ones(4, [0, 5, 6])
    comp = InformationMatrix(1 - M.bits)
    c = score(M, comp)
    assert c.tpr == 0.0 and c.spc == 0.0


def test_score_partial():
    truth = matrix_with_ones(20, range(10))
    decoded = matrix_with_ones(20, list(range(9)) + [100, 200])
    c = score(truth, decoded)
    assert c.tpr == pytest.approx(0.9) and c.ppv == pytest.approx(9 / 11)
    assert c.tp + c.fn == 10 and c.tn + c.fp == 390


def test_score_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        score(matrix_with_ones(3, [0]), matrix_with_ones(4, [0]))


def test_rate_identities(rng):
    for _ in range(50):
        t = InformationMatrix((rng.random((6, 6)) < 0.5).astype(np.uint8))
        d = InformationMatrix((rng.random((6, 6)) < 0.5).astype(np.uint8))
        c = score(t, d)
        if c.tpr is not None:
            assert c.tpr + c.fnr == pytest.approx(1.0)
        if c.spc is not None:
            assert c.spc + c.fpr == pytest.approx(1.0)


def test_undefined_rates_are_na_and_skipped():
    c = score(matrix_with_ones(3, []), matrix_with_ones(3, []))
    assert c.tpr is None and c.ppv is None and c.spc == 1.0
    rates = evaluation.mean_rates([c, ConfusionCounts(tp=1, fn=1, tn=7, fp=0)])
    assert rates["tpr"] == 0.5
    report = ExperimentReport("x", rows=[ReportRow("g", "Average", 1, {"tpr": None, "spc": 1.0})])
    assert "n/a" in report.to_csv() and "n/a" in report.to_text()


# -- correlation -------------------------------------------------------------------

def centre_distance(m):
    c = (m - 1) / 2
    i, j = np.mgrid[0:m, 0:m]
    return np.hypot(i - c, j - c)


def test_correlation_affine():
    assert bit_position_correlation(0.5 + 0.02 * centre_distance(10), 10) == pytest.approx(1.0)


def test_correlation_constant_is_undefined():
    assert bit_position_correlation(np.full((10, 10), 0.9), 10) is None


def test_correlation_negative_with_noise(rng):
    d = centre_distance(10)
    acc = 1.0 - 0.05 * d + rng.normal(0, 0.002, d.shape)
    r = bit_position_correlation(acc, 10)
    assert r == pytest.approx(np.corrcoef(acc.ravel(), d.ravel())[0, 1], abs=1e-12)
    assert r == pytest.approx(-1.0, abs=0.05)


def test_correlation_shape_check():
    with pytest.raises(ShapeMismatchError):
        bit_position_correlation(np.zeros((3, 4)), 3)


# -- folds and experiments ---------------------------------------------------------

def test_folds_partition(tiny_records):
    recs = [r for r in tiny_records if r["object_id"] != 3]
    folds = cv_folds(recs, 5)
    ids = [i for f in folds for i in f]
    assert len(ids) == len(set(ids)) == len(recs)
    by_id = {r["id"]: r for r in recs}
    for f in folds:
        for obj in (1, 2):
            tags = [by_id[i]["illumination"] for i in f if by_id[i]["object_id"] == obj]
            assert sorted(tags) == ["extreme_artificial", "natural", "natural"]


def test_folds_need_enough_images(tiny_records):
    with pytest.raises(ValueError, match="object 3"):
        cv_folds(tiny_records, 5)


def test_cross_validation_report_shape(tiny_records):
    recs = [r for r in tiny_records if r["object_id"] != 3]
    report = run_cross_validation(recs, TINY_CFG, fold_indices=[0])
    groups = [row.group for row in report.rows]
    assert groups[:2] == ["object 1 (green)", "object 2 (blue)"]
    assert "all" in groups and "Natural light" in groups and "Extreme artificial light" in groups
    r = report.extras["pearson_accuracy_vs_centre_distance"]
    assert r is None or -1.0 <= r <= 1.0
    for row in report.rows:
        for v in row.values.values():
            assert v is None or 0.0 <= v <= 1.0


def test_holdout_rejects_overlap(tiny_records):
    with pytest.raises(ValueError):
        run_holdout(tiny_records, [1, 2], [2, 3], TINY_CFG)


def test_holdout_splits_and_vote_rows(tiny_records, monkeypatch):
    seen = []
    real_fit = evaluation.fit_model

    def spy(records, cfg, label="model"):
        seen.append(sorted({r["object_id"] for r in records}))
        return real_fit(records, cfg, label)

    monkeypatch.setattr(evaluation, "fit_model", spy)
    report = run_holdout(tiny_records, [1, 2], [3], TINY_CFG)
    assert seen == [[1, 2]]
    vote = report.find("object 3 (green)", "Majority Vote")
    avg = report.find("object 3 (green)", "Average")
    assert vote.n == avg.n == 5


def test_cross_material_excludes_material(tiny_records, monkeypatch):
    seen = []
    real_fit = evaluation.fit_model

    def spy(records, cfg, label="model"):
        seen.append({r["material"] for r in records})
        return real_fit(records, cfg, label)

    monkeypatch.setattr(evaluation, "fit_model", spy)
    report = run_holdout(tiny_records, [1, 2], [3], TINY_CFG, cross_material=True)
    assert seen == [{"blue"}]
    assert report.extras["train_objects_without_green"] == [2]


def test_active_learning_pairs(tiny_records):
    report = run_active_learning(tiny_records, [1], [2], [3], TINY_CFG, n_hard=3)
    pre = [r for r in report.rows if r.metric == "pre-active"]
    post = [r for r in report.rows if r.metric == "active"]
    assert [r.group for r in pre] == [r.group for r in post]
    assert len(pre) == 5
    assert report.extras["base_model_checksum"] != report.extras["active_model_checksum"]
    assert len(report.extras["hard_images"]) == 3


def test_active_learning_rejects_overlap(tiny_records):
    with pytest.raises(ValueError):
        run_active_learning(tiny_records, [1], [3], [3], TINY_CFG)


# -- report output ---------------------------------------------------------------

def test_report_files(tmp_path):
    report = ExperimentReport("demo", rows=[ReportRow("g", "Average", 2, {"tpr": 0.5, "spc": 1.0,
                                                                          "ppv": None, "npv": 0.25,
                                                                          "accuracy": 0.75})],
                              config={"experiment": TINY_CFG})
    paths = report.write(tmp_path)
    assert (tmp_path / "demo.csv").read_text().splitlines() == [
        "group,metric,n,tpr,spc,ppv,npv,accuracy", "g,Average,2,0.5000,1.0000,n/a,0.2500,0.7500"]
    echo = json.loads((tmp_path / "demo.config.json").read_text())
    assert echo["experiment"]["train"]["crop_size"] == 64
    assert set(paths) == {"csv", "txt", "config.json", "extras.json"}


def test_benchmark_plans():
    plans = evaluation.benchmark_plans()
    by_id = {p.object_id: p for p in plans}
    assert all(by_id[k].n_natural == 10 and by_id[k].n_artificial == 5 for k in range(1, 17))
    assert [by_id[k].material for k in (17, 18, 19, 20)] == ["blue", "wooden", "dark_green", "skin"]
    assert all(by_id[k].n_natural + by_id[k].n_artificial == 5 for k in (17, 18, 19, 20, 23))
    assert {by_id[k].material for k in (21, 22, 23)} == {evaluation.HARD_MATERIAL}
