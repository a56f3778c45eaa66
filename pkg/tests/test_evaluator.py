import csv
import json

import numpy as np
import pytest

from otcil.config import RunConfig, TrainerConfig, config_to_dict
from otcil.corpus import (SyntheticSpec, generate_synthetic, load_bundle,
                          split_tasks, write_bundle)
from otcil.evaluator import (AccuracyMatrix, build_report, evaluate_stage,
                             forgetting_measure, predict, predict_batch,
                             run_full_evaluation, train_test_split,
                             write_report, zero_shot_report)
from otcil.state import init_state
from otcil.trainer import train_task


# --- forgetting measure, hand-checked ---


def test_forgetting_two_sessions():
    m = AccuracyMatrix(rows=[[100.0], [90.0, 80.0]])
    assert forgetting_measure(m) == 10.0


def test_forgetting_three_sessions():
    m = AccuracyMatrix(rows=[[80.0], [90.0, 70.0], [85.0, 60.0, 50.0]])
    # origin 1 peaks at 90 then ends at 85; origin 2 drops 70 -> 60
    assert forgetting_measure(m) == 7.5


def test_forgetting_single_session_undefined():
    with pytest.raises(ValueError, match="undefined for single session"):
        forgetting_measure(AccuracyMatrix(rows=[[100.0]]))


def test_forgetting_constant_matrix_is_zero():
    m = AccuracyMatrix(rows=[[75.0], [75.0, 75.0], [75.0, 75.0, 75.0]])
    assert forgetting_measure(m) == 0.0


def test_forgetting_negative_on_backward_transfer():
    # later training improved the old classes: peak is over past sessions
    # only, so the measure goes negative rather than clamping at zero
    m = AccuracyMatrix(rows=[[50.0], [80.0, 90.0]])
    assert forgetting_measure(m) == -30.0


def test_report_summary_identities():
    results = [
        {"session": 1, "num_classes": 2, "accuracy": 80.0, "per_origin": [80.0]},
        {"session": 2, "num_classes": 4, "accuracy": 70.0, "per_origin": [75.0, 65.0]},
    ]
    rep = build_report(results, "full", 0.2)
    assert rep.average_accuracy == pytest.approx((80.0 + 70.0) / 2)
    assert rep.last_accuracy == 70.0
    assert rep.forgetting == 5.0
    assert rep.num_classes_per_session == [2, 4]


def test_report_single_session_has_no_forgetting():
    results = [{"session": 1, "num_classes": 2, "accuracy": 80.0,
                "per_origin": [80.0]}]
    assert build_report(results, "full", 0.2).forgetting is None


# --- the train/test split ---


def test_split_is_a_partition():
    bundle = generate_synthetic(SyntheticSpec(num_classes=4, per_class=10, dim=8,
                                              patches=6, attributes_per_class=3),
                                seed=5)
    train, test = train_test_split(bundle, 5)
    assert sorted(train + test) == list(range(len(bundle.samples)))
    assert not set(train) & set(test)


def test_split_ratio_per_class():
    bundle = generate_synthetic(SyntheticSpec(num_classes=4, per_class=10, dim=8,
                                              patches=6, attributes_per_class=3),
                                seed=5)
    train, test = train_test_split(bundle, 5)
    for cid in bundle.class_ids():
        n_test = sum(1 for i in test if bundle.samples[i].label == cid)
        assert n_test == 2  # round(0.2 * 10)


def test_split_deterministic_and_seed_sensitive():
    bundle = generate_synthetic(SyntheticSpec(num_classes=4, per_class=10, dim=8,
                                              patches=6, attributes_per_class=3),
                                seed=5)
    assert train_test_split(bundle, 5) == train_test_split(bundle, 5)
    assert train_test_split(bundle, 5) != train_test_split(bundle, 6)


def test_split_honors_bundle_markers(tmp_path):
    bundle = generate_synthetic(SyntheticSpec(num_classes=2, per_class=5, dim=8,
                                              patches=6, attributes_per_class=3),
                                seed=5)
    wanted_test = {bundle.samples[0].image_id, bundle.samples[7].image_id}
    bundle.splits = ["test" if s.image_id in wanted_test else "train"
                     for s in bundle.samples]
    path = tmp_path / "marked.otb"
    write_bundle(bundle, str(path))
    loaded = load_bundle(str(path))
    train, test = train_test_split(loaded, 999)
    assert {loaded.samples[i].image_id for i in test} == wanted_test
    assert len(train) + len(test) == len(loaded.samples)


# --- trained-model evaluation ---


@pytest.fixture(scope="module")
def trained():
    spec = SyntheticSpec(num_classes=6, per_class=12, dim=8, patches=8,
                         attributes_per_class=3)
    bundle = generate_synthetic(spec, seed=31)
    cfg = TrainerConfig(epochs=2, batch_size=16, attr_sample_size=3, top_k=4,
                        seed=31)
    schedule = split_tasks(bundle.class_ids(), 0, 3, 31)
    train_rows, test_rows = train_test_split(bundle, 31)
    train_samples = [bundle.samples[i] for i in train_rows]
    test_samples = [bundle.samples[i] for i in test_rows]
    state = init_state(bundle.dimension, cfg)
    for sess in schedule.sessions:
        train_task(state, bundle, sess, train_samples)
    return bundle, state, test_samples


def test_beta_zero_equals_global_only(trained):
    bundle, state, test_samples = trained
    table = bundle.class_by_id()
    p_full, g_full, _, fused = predict_batch(state, table, test_samples, "full",
                                             beta=0.0)
    p_glob, g_glob, _, fused_glob = predict_batch(state, table, test_samples,
                                                  "global_only")
    np.testing.assert_array_equal(fused, fused_glob)
    np.testing.assert_array_equal(g_full, g_glob)
    np.testing.assert_array_equal(p_full, p_glob)


def test_predict_single_matches_batch_row(trained):
    bundle, state, test_samples = trained
    table = bundle.class_by_id()
    preds, _, _, _ = predict_batch(state, table, test_samples[:3], "full")
    row, g, l, fused = predict_batch(state, table, [test_samples[1]], "full")
    r = predict(test_samples[1], state, table, mode="full")
    assert r.dense_index == preds[1] == row[0]
    np.testing.assert_array_equal(r.f_global, g[0])
    np.testing.assert_array_equal(r.f_local, l[0])
    np.testing.assert_array_equal(r.fused, fused[0])
    seen = state.classes_up_to(state.num_sessions)
    assert r.class_id == seen[r.dense_index]


def test_unknown_mode_rejected(trained):
    bundle, state, test_samples = trained
    with pytest.raises(ValueError, match="unknown evaluation mode"):
        predict_batch(state, bundle.class_by_id(), test_samples[:1], "psychic")


def test_stage_zero_rejected(trained):
    bundle, state, test_samples = trained
    with pytest.raises(ValueError, match="at least one trained session"):
        predict_batch(state, bundle.class_by_id(), test_samples[:1], "full",
                      stage=0)


def test_evaluate_stage_per_origin_breakdown(trained):
    bundle, state, test_samples = trained
    res = evaluate_stage(state, bundle, test_samples, 2, "full")
    assert len(res["per_origin"]) == 2
    assert res["num_classes"] == 6
    # overall accuracy is the eligible-count weighted mean of the breakdown
    origin = {cid: s for s, sess in enumerate(state.sessions, 1) for cid in sess}
    counts = [0, 0]
    for s in test_samples:
        counts[origin[s.label] - 1] += 1
    weighted = sum(a * n for a, n in zip(res["per_origin"], counts)) / sum(counts)
    assert res["accuracy"] == pytest.approx(weighted)


def test_stage_truncation_reproduces_earlier_model(trained):
    bundle, state, test_samples = trained
    cfg = TrainerConfig(epochs=2, batch_size=16, attr_sample_size=3, top_k=4,
                        seed=31)
    schedule = split_tasks(bundle.class_ids(), 0, 3, 31)
    train_rows, _ = train_test_split(bundle, 31)
    train_samples = [bundle.samples[i] for i in train_rows]
    fresh = init_state(bundle.dimension, cfg)
    train_task(fresh, bundle, schedule.sessions[0], train_samples)
    a = evaluate_stage(state, bundle, test_samples, 1, "full")
    b = evaluate_stage(fresh, bundle, test_samples, 1, "full")
    assert a == b


def test_zero_shot_ignores_training(trained):
    # same candidate set, trained vs untrained state: projectors play no part
    bundle, state, test_samples = trained
    table = bundle.class_by_id()
    sub = [s for s in test_samples if s.label in set(state.classes_up_to(1))]
    _, g1, _, _ = predict_batch(state, table, sub, "zero_shot", stage=1)
    fresh = init_state(bundle.dimension, state.config)
    fresh.sessions.append(list(state.sessions[0]))
    _, g0, _, _ = predict_batch(fresh, table, sub, "zero_shot", stage=1)
    np.testing.assert_array_equal(g1, g0)


def test_full_evaluation_matrix_shape(trained):
    bundle, state, test_samples = trained
    rep = run_full_evaluation(state, bundle, test_samples, "full")
    assert [len(r) for r in rep.matrix.rows] == [1, 2]
    assert rep.average_accuracy == pytest.approx(np.mean(rep.session_accuracies))
    assert rep.last_accuracy == rep.session_accuracies[-1]
    assert rep.forgetting is not None


def test_single_class_session_always_correct():
    spec = SyntheticSpec(num_classes=2, per_class=8, dim=8, patches=6,
                         attributes_per_class=3)
    bundle = generate_synthetic(spec, seed=9)
    cfg = TrainerConfig(epochs=1, batch_size=8, attr_sample_size=3, top_k=4,
                        seed=9)
    schedule = split_tasks(bundle.class_ids(), 0, 1, 9)
    train_rows, test_rows = train_test_split(bundle, 9)
    state = init_state(bundle.dimension, cfg)
    train_task(state, bundle, schedule.sessions[0],
               [bundle.samples[i] for i in train_rows])
    res = evaluate_stage(state, bundle,
                         [bundle.samples[i] for i in test_rows], 1, "full")
    assert res["accuracy"] == 100.0


# --- report files ---


def _demo_report():
    results = [
        {"session": 1, "num_classes": 2, "accuracy": 81.256, "per_origin": [81.256]},
        {"session": 2, "num_classes": 4, "accuracy": 70.013,
         "per_origin": [74.5, 65.526]},
    ]
    return build_report(results, "full", 0.2)


def test_write_report_file_set(tmp_path):
    write_report(_demo_report(), str(tmp_path))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["curve.csv", "matrix.csv", "report.csv", "report.json"]


def test_report_json_full_precision(tmp_path):
    write_report(_demo_report(), str(tmp_path))
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["sessions"][0]["accuracy"] == 81.256
    assert payload["last_accuracy"] == 70.013
    assert payload["num_sessions"] == 2
    assert payload["forgetting"] == pytest.approx(81.256 - 74.5)
    assert "config" not in payload


def test_report_csvs_round_to_two_decimals(tmp_path):
    write_report(_demo_report(), str(tmp_path))
    rows = list(csv.reader((tmp_path / "report.csv").open()))
    assert rows[0] == ["session", "num_classes", "accuracy"]
    assert rows[1] == ["1", "2", "81.26"]
    assert rows[2] == ["2", "4", "70.01"]
    curve = list(csv.reader((tmp_path / "curve.csv").open()))
    assert curve[1] == ["1", "81.26", "full"]
    matrix = list(csv.reader((tmp_path / "matrix.csv").open()))
    assert matrix == [["81.26"], ["74.50", "65.53"]]


def test_report_config_embeds_without_paths(tmp_path):
    run = RunConfig(bundle="/somewhere/data.otb", out=str(tmp_path),
                    base_size=0, increment=2)
    cfg_dict = config_to_dict(run)
    assert "bundle" not in cfg_dict and "out" not in cfg_dict
    write_report(_demo_report(), str(tmp_path), config_dict=cfg_dict)
    payload = json.loads((tmp_path / "report.json").read_text())
    assert payload["config"]["increment"] == 2
    assert "bundle" not in payload["config"]


def test_write_report_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    write_report(_demo_report(), str(a))
    write_report(_demo_report(), str(b))
    for name in ("report.json", "report.csv", "curve.csv", "matrix.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_zero_shot_report_shape():
    bundle = generate_synthetic(SyntheticSpec(num_classes=4, per_class=10, dim=8,
                                              patches=6, attributes_per_class=3),
                                seed=3)
    _, test_rows = train_test_split(bundle, 3)
    rep = zero_shot_report(bundle, bundle.class_ids(),
                           [bundle.samples[i] for i in test_rows],
                           temperature=0.01)
    assert rep.mode == "zero_shot"
    assert rep.forgetting is None
    assert len(rep.session_accuracies) == 1
    assert 0.0 <= rep.last_accuracy <= 100.0
    assert rep.matrix.rows == [[rep.last_accuracy]]
