import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otcil.config import TrainerConfig
from otcil.corpus import SyntheticSpec, generate_synthetic, split_tasks
from otcil.projectors import (TEXTUAL_GLOBAL, TEXTUAL_LOCAL, VISUAL_GLOBAL,
                              VISUAL_LOCAL, ProjectorStack, adapt_batch,
                              begin_task, projector_payload, snapshot)
from otcil.state import init_state
from otcil.trainer import (NumericalError, cosine_lr, global_loss,
                           group_by_patch_count, local_loss, train_task)
from otcil.evaluator import train_test_split

from oracles import (cosine_oracle, cross_entropy_oracle, local_sigma_oracle,
                     softmax_oracle)


def _stacks(d, branches, tasks=1, jitter_seed=None):
    out = {}
    rng = np.random.default_rng(jitter_seed) if jitter_seed is not None else None
    for br in branches:
        stack = ProjectorStack(branch=br, projectors=[])
        for _ in range(tasks):
            begin_task(stack, d)
        if rng is not None:
            p = stack.projectors[-1]
            p.weight[:] += (0.1 * rng.standard_normal((d, d))).astype(np.float32)
            p.bias[:] += (0.05 * rng.standard_normal(d)).astype(np.float32)
        out[br] = stack
    return out


# --- learning rate schedule ---


def test_cosine_lr_endpoints_exact():
    assert cosine_lr(0, 10, 0.05) == 0.05
    assert cosine_lr(9, 10, 0.05) == 0.0


def test_cosine_lr_midpoint():
    assert cosine_lr(5, 11, 1.0) == pytest.approx(0.5)


def test_cosine_lr_single_step():
    assert cosine_lr(0, 1, 0.05) == 0.05


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 200))
def test_cosine_lr_monotone_decreasing(total):
    vals = [cosine_lr(s, total, 0.05) for s in range(total)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[0] == 0.05 and vals[-1] == 0.0


# --- loss oracles ---


def test_global_loss_matches_composed_oracle():
    rng = np.random.default_rng(0)
    d, b, c = 6, 4, 3
    feats = rng.standard_normal((b, d))
    eos = rng.standard_normal((c, d))
    labels = np.array([0, 2, 1, 0])
    stacks = _stacks(d, (VISUAL_GLOBAL, TEXTUAL_GLOBAL), tasks=2, jitter_seed=1)
    tau = 0.25
    loss, _, probs = global_loss(feats, labels, eos, stacks[VISUAL_GLOBAL],
                                 stacks[TEXTUAL_GLOBAL], tau)
    v = adapt_batch(stacks[VISUAL_GLOBAL], feats)
    t = adapt_batch(stacks[TEXTUAL_GLOBAL], eos)
    ref = 0.0
    for i in range(b):
        logits = np.array([cosine_oracle(v[i], t[j]) / tau for j in range(c)])
        p = softmax_oracle(logits)
        np.testing.assert_allclose(probs[i], p, atol=1e-10)
        ref += cross_entropy_oracle(p, labels[i])
    assert loss == pytest.approx(ref / b, abs=1e-10)


def test_local_loss_matches_composed_oracle():
    rng = np.random.default_rng(1)
    d, m, n, c, k = 6, 5, 2, 3, 3
    patches = [rng.standard_normal((m, d)) for _ in range(4)]
    labels = np.array([0, 1, 2, 0])
    attrs = rng.standard_normal((c, n, d))
    stacks = _stacks(d, (VISUAL_LOCAL, TEXTUAL_LOCAL), tasks=2, jitter_seed=2)
    cfg = TrainerConfig(top_k=k, sinkhorn_reg=0.1, sinkhorn_tol=1e-10,
                        sinkhorn_max_iter=20000)
    groups = group_by_patch_count(patches, np.arange(4))
    loss, _, nonconv = local_loss(groups, labels, attrs, stacks[VISUAL_LOCAL],
                                  stacks[TEXTUAL_LOCAL], cfg)
    assert nonconv == 0
    ref = 0.0
    for i in range(4):
        v = adapt_batch(stacks[VISUAL_LOCAL], patches[i])
        sig = np.array([
            local_sigma_oracle(v, adapt_batch(stacks[TEXTUAL_LOCAL], attrs[j]),
                               k, 0.1)[0]
            for j in range(c)])
        ref += cross_entropy_oracle(softmax_oracle(sig), labels[i])
    assert loss == pytest.approx(ref / 4, abs=1e-7)


def test_gradient_spot_check_finite_differences():
    # quick FD probe on one weight entry per branch; the acceptance suite
    # sweeps every parameter
    rng = np.random.default_rng(3)
    d, b, c = 5, 3, 2
    feats = rng.standard_normal((b, d))
    eos = rng.standard_normal((c, d))
    labels = np.array([0, 1, 0])
    stacks = _stacks(d, (VISUAL_GLOBAL, TEXTUAL_GLOBAL), tasks=2, jitter_seed=4)
    tau = 0.3
    _, grads, _ = global_loss(feats, labels, eos, stacks[VISUAL_GLOBAL],
                              stacks[TEXTUAL_GLOBAL], tau)
    h = 1e-5
    for br in (VISUAL_GLOBAL, TEXTUAL_GLOBAL):
        p = stacks[br].projectors[-1]
        w0 = p.weight[1, 2]
        p.weight[1, 2] = np.float32(w0 + h)
        up, _, _ = global_loss(feats, labels, eos, stacks[VISUAL_GLOBAL],
                               stacks[TEXTUAL_GLOBAL], tau, want_grads=False)
        p.weight[1, 2] = np.float32(w0 - h)
        dn, _, _ = global_loss(feats, labels, eos, stacks[VISUAL_GLOBAL],
                               stacks[TEXTUAL_GLOBAL], tau, want_grads=False)
        p.weight[1, 2] = w0
        step = np.float64(np.float32(w0 + h)) - np.float64(np.float32(w0 - h))
        fd = (up - dn) / step
        assert grads[br][0][1, 2] == pytest.approx(fd, rel=1e-4, abs=1e-9)


def test_group_by_patch_count():
    patches = [np.zeros((4, 2)), np.zeros((2, 2)), np.zeros((4, 2)), np.zeros((3, 2))]
    groups = group_by_patch_count(patches, np.array([0, 1, 2, 3]))
    sizes = [g[1].shape for g in groups]
    assert sizes == [(1, 2, 2), (1, 3, 2), (2, 4, 2)]
    positions = [g[0].tolist() for g in groups]
    assert positions == [[1], [3], [0, 2]]


# --- end-to-end session training ---


@pytest.fixture(scope="module")
def tiny_setup():
    spec = SyntheticSpec(num_classes=6, per_class=12, dim=8, patches=8,
                         attributes_per_class=3)
    bundle = generate_synthetic(spec, seed=77)
    cfg = TrainerConfig(epochs=2, batch_size=16, attr_sample_size=3, top_k=4,
                        seed=77)
    schedule = split_tasks(bundle.class_ids(), 0, 3, 77)
    train_rows, _ = train_test_split(bundle, 77)
    train_samples = [bundle.samples[i] for i in train_rows]
    return bundle, cfg, schedule, train_samples


def _run_sessions(bundle, cfg, schedule, train_samples, n=None):
    state = init_state(bundle.dimension, cfg)
    logs = []
    for sess in schedule.sessions[:n]:
        logs.append(train_task(state, bundle, sess, train_samples))
    return state, logs


def test_train_is_deterministic(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    s1, _ = _run_sessions(bundle, cfg, schedule, train_samples)
    s2, _ = _run_sessions(bundle, cfg, schedule, train_samples)
    for br in s1.stacks:
        assert snapshot(s1.stacks[br]) == snapshot(s2.stacks[br])
    for cid in s1.class_stats:
        np.testing.assert_array_equal(s1.class_stats[cid].mean,
                                      s2.class_stats[cid].mean)


def test_freeze_safety_across_sessions(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    state = init_state(bundle.dimension, cfg)
    train_task(state, bundle, schedule.sessions[0], train_samples)
    before = {br: projector_payload(state.stacks[br], 1) for br in state.stacks}
    train_task(state, bundle, schedule.sessions[1], train_samples)
    for br, payload in before.items():
        assert projector_payload(state.stacks[br], 1) == payload


def test_replay_onset_and_counts(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    _, logs = _run_sessions(bundle, cfg, schedule, train_samples)
    assert logs[0].pseudo_batches == 0          # nothing to replay yet
    assert logs[1].pseudo_batches == len(logs[1].lines)


def test_replay_disabled_by_config(tiny_setup):
    bundle, _, schedule, train_samples = tiny_setup
    cfg = TrainerConfig(epochs=1, batch_size=16, attr_sample_size=3, top_k=4,
                        seed=77, replay_enabled=False)
    _, logs = _run_sessions(bundle, cfg, schedule, train_samples, n=2)
    assert logs[1].pseudo_batches == 0


def test_zero_local_weight_trains_global_only(tiny_setup):
    bundle, _, schedule, train_samples = tiny_setup
    cfg = TrainerConfig(epochs=1, batch_size=16, attr_sample_size=3, top_k=4,
                        seed=77, local_weight=0.0)
    state, logs = _run_sessions(bundle, cfg, schedule, train_samples, n=1)
    # local stacks never move off their initialization
    d = bundle.dimension
    np.testing.assert_array_equal(state.stacks[VISUAL_LOCAL].projectors[0].weight,
                                  np.eye(d, dtype=np.float32))
    np.testing.assert_array_equal(state.stacks[TEXTUAL_LOCAL].projectors[0].weight,
                                  np.eye(d, dtype=np.float32))
    assert not np.array_equal(state.stacks[VISUAL_GLOBAL].projectors[0].weight,
                              np.eye(d, dtype=np.float32))
    assert all(line["L_l"] == 0.0 for line in logs[0].lines)


def test_training_reduces_loss(tiny_setup):
    bundle, _, schedule, train_samples = tiny_setup
    cfg = TrainerConfig(epochs=4, batch_size=16, attr_sample_size=3, top_k=4,
                        seed=77)
    _, logs = _run_sessions(bundle, cfg, schedule, train_samples, n=1)
    lines = logs[0].lines
    first_epoch = [l["L"] for l in lines if l["epoch"] == 0]
    last_epoch = [l["L"] for l in lines if l["epoch"] == cfg.epochs - 1]
    assert np.mean(last_epoch) < np.mean(first_epoch)


def test_log_line_schema(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    _, logs = _run_sessions(bundle, cfg, schedule, train_samples, n=1)
    line = logs[0].lines[0]
    assert set(line) == {"session", "epoch", "step", "lr", "L_g", "L_l", "L",
                         "sinkhorn_nonconverged_count"}
    assert line["session"] == 1 and line["epoch"] == 0 and line["step"] == 0
    assert line["lr"] == cfg.learning_rate
    assert line["L"] == pytest.approx(line["L_g"] + cfg.local_weight * line["L_l"])


def test_recorded_stats_are_float32_quantized(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    state, _ = _run_sessions(bundle, cfg, schedule, train_samples, n=1)
    for stats in state.class_stats.values():
        np.testing.assert_array_equal(
            stats.mean, stats.mean.astype(np.float32).astype(np.float64))
        np.testing.assert_array_equal(
            stats.covariance, stats.covariance.astype(np.float32).astype(np.float64))


def test_train_rejects_reused_class(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    state = init_state(bundle.dimension, cfg)
    train_task(state, bundle, schedule.sessions[0], train_samples)
    with pytest.raises(ValueError, match="already trained"):
        train_task(state, bundle, schedule.sessions[0], train_samples)


def test_train_raises_numerical_error_on_poisoned_input(tiny_setup):
    bundle, cfg, schedule, train_samples = tiny_setup
    state = init_state(bundle.dimension, cfg)
    bad = [s for s in train_samples]
    poisoned = next(s for s in bad if s.label in schedule.sessions[0])
    saved = poisoned.cls.copy()
    poisoned.cls[:] = np.float32("nan")
    try:
        with pytest.raises(NumericalError, match="non-finite loss"):
            train_task(state, bundle, schedule.sessions[0], bad)
    finally:
        poisoned.cls[:] = saved
