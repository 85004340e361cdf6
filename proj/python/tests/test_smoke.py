import json
import math

import numpy as np
import pytest

import intertwiner as itw


def test_cosine_and_ground_cost():
    assert itw.cosine_distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0)
    assert itw.cosine_distance([1.0, 0.0], [1.0, 0.0]) == 0.0
    q = itw.ground_cost(np.eye(2), np.eye(2))
    assert q[0, 0] == 0.0
    assert q[0, 1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        itw.cosine_distance([0.0, 0.0], [1.0, 0.0])


def test_sinkhorn_anchor_and_exact():
    q = np.array([[0.0, 1.0], [1.0, 0.0]])
    cfg = itw.SinkhornConfig(epsilon=0.1, max_iters=200, tolerance=1e-15)
    plan = itw.sinkhorn_plan(q, cfg)
    expect = math.exp(-10.0) / (1.0 + math.exp(-10.0))
    assert float((q * plan.p).sum()) == pytest.approx(expect, abs=1e-9)
    assert plan.p.shape == (2, 2)
    assert itw.exact_ot_uniform(q) == 0.0


def test_biased_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    cfg = itw.SinkhornConfig(epsilon=0.1, max_iters=300, tolerance=1e-10)
    assert abs(itw.biased_sinkhorn(a, a, cfg)) <= 1e-12


def test_class_buffer_mean_and_checkpoint():
    buf = itw.ClassBuffer(2, 2)
    buf.update([1.0, 0.0], 0)
    buf.update([0.0, 1.0], 0)
    buf.update([1.0, 1.0], 0)
    rep = buf.representative(0)
    assert rep == pytest.approx([2.0 / 3.0, 2.0 / 3.0])
    assert buf.representative(1) is None
    restored = itw.ClassBuffer.restore(buf.checkpoint())
    assert restored.representative(0) == pytest.approx(rep)
    assert json.loads(buf.checkpoint())["strategy"] == "equal_weight_all_history"


def test_losses():
    buf = itw.ClassBuffer(1, 2)
    buf.update([0.25, 0.75], 0)
    value, used, skipped = itw.intertwiner_loss(
        np.array([[0.5, 0.5]]), [0], buf, itw.Metric.L2, 1.0
    )
    assert value == pytest.approx(0.125)
    assert (used, skipped) == (1, 0)
    assert itw.kl_term([0.5, 0.5], [0.25, 0.25]) == pytest.approx(math.log(2.0), abs=1e-7)
    fused = itw.fuse_features([1.0, 0.0], [0.0, 1.0], itw.FusionMode.LINEAR)
    assert fused == pytest.approx([0.5, 0.5])
    assert itw.total_loss(1.5, [0.2, 0.3], 2.0) == pytest.approx(4.0)


def test_assignment():
    assert itw.assign_level(224.0, 224.0) == 4
    assert itw.assign_level(112.0, 112.0) == 3
    assert itw.roi_threshold(3) == pytest.approx((14.0 / 64.0) ** 2)
    report = json.loads(itw.breakdown_report([(56.0, 56.0), (448.0, 448.0)]))
    assert report["total"] == 2
    assert report["levels"][0]["large"] == 1


def test_harness_smoke():
    spec = itw.SyntheticDatasetSpec()
    spec.n_classes = 3
    spec.dim = 8
    spec.reliable_per_class = 12
    spec.less_reliable_per_class = 12
    spec.seed = 4
    data = itw.generate_synthetic(spec)
    assert data.reliable_features().shape == (36, 8)

    cfg = itw.TrainConfig()
    cfg.steps = 8
    cfg.critic_dim = 8
    cfg.ot_panel = 6
    cfg.eval_panel = 6
    trace = itw.train_intertwiner(data, cfg, 4)
    assert len(trace.accuracy) == 8
    assert trace.initial.intra_class_variance > 0.0
    again = itw.train_intertwiner(data, cfg, 4)
    assert trace.intertwiner_loss == again.intertwiner_loss

    metrics = itw.compaction_metrics(
        data.less_reliable_features(), data.less_reliable_labels()
    )
    assert 0.0 <= metrics.nearest_centroid_accuracy <= 1.0
