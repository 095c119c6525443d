import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fine_imitate.analysis import (Experiment, SweepPoint, SweepResult, VARIANTS,
                                   baseline_comparison, config_diff, per_channel_variance,
                                   psi_sweep, sample_images, variance_from_features)
from fine_imitate.data import DatasetSpec, make_splits
from fine_imitate.detector import DetectorConfig, init_params
from fine_imitate.imitation import DistillConfig
from fine_imitate.trainer import TrainConfig, make_student, train

TINY = DetectorConfig(backbone_widths=(4, 8, 8, 8))


def two_pass(x):
    x = np.asarray(x, dtype=np.float64)
    mean = sum(x) / len(x)
    return sum((v - mean) ** 2 for v in x) / len(x)


def test_hand_filled_feature():
    feat = np.array([[[1.0], [3.0]], [[2.0], [10.0]]])
    mask = np.array([[True, True], [False, False]])
    rep = variance_from_features(feat, mask)
    assert rep.var_in[0] == pytest.approx(1.0, abs=1e-12)
    assert rep.var_out[0] == pytest.approx(16.0, abs=1e-12)
    assert rep.fraction_in_lt_out == 1.0
    assert (rep.num_in, rep.num_out, rep.num_images) == (2, 2, 1)


def test_constant_feature_zero_variance():
    rep = variance_from_features(np.full((3, 4, 4, 5), 2.5), np.random.default_rng(0).random((3, 4, 4)) < 0.5)
    assert not rep.var_in.any() and not rep.var_out.any()


def test_empty_mask_reports_missing():
    rep = variance_from_features(np.ones((2, 3, 3, 2)), np.zeros((2, 3, 3), dtype=bool))
    assert np.isnan(rep.var_in).all()
    assert np.isnan(rep.fraction_in_lt_out)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_pooled_variance_matches_two_pass(seed):
    rng = np.random.default_rng(seed)
    n, h, w, c = rng.integers(1, 4), rng.integers(2, 5), rng.integers(1, 5), rng.integers(1, 4)
    feat = rng.normal(size=(n, h, w, c)) * rng.uniform(0.1, 5)
    mask = rng.random((n, h, w)) < 0.5
    mask.flat[0], mask.flat[-1] = True, False
    rep = variance_from_features(feat, mask)
    for ch in range(c):
        inside = [feat[i, j, k, ch] for i in range(n) for j in range(h) for k in range(w) if mask[i, j, k]]
        outside = [feat[i, j, k, ch] for i in range(n) for j in range(h) for k in range(w) if not mask[i, j, k]]
        assert abs(rep.var_in[ch] - two_pass(inside)) < 1e-12 * max(1.0, two_pass(inside))
        assert abs(rep.var_out[ch] - two_pass(outside)) < 1e-12 * max(1.0, two_pass(outside))
        assert rep.var_in[ch] >= 0 and rep.var_out[ch] >= 0


def test_variance_csv_columns():
    rep = variance_from_features(np.arange(8.0).reshape(1, 2, 2, 2), np.array([[[True, False], [False, False]]]))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "channel,var_in,var_out,in_lt_out"
    assert len(lines) == 3


def test_per_channel_variance_on_detector():
    samples = make_splits(DatasetSpec(seed=2, num_images=1, image_size=32, max_size=20), 4)[1]
    rep = per_channel_variance(init_params(TINY, 0), TINY, samples, psi=0.5)
    assert rep.var_in.shape == (8,) and rep.num_images == 4 and rep.psi == 0.5
    assert rep.num_in + rep.num_out == 4 * 16


def test_sample_images_deterministic():
    samples = make_splits(DatasetSpec(num_images=1), 30)[1]
    a = sample_images(samples, 10, seed=3)
    assert [s.image_id for s in a] == [s.image_id for s in sample_images(samples, 10, seed=3)]
    assert len({s.image_id for s in a}) == 10
    with pytest.raises(ValueError):
        sample_images(samples, 31, seed=0)


def test_sweep_result_round_trip():
    res = SweepResult([SweepPoint(0.0, [0.25, None]), SweepPoint(0.5, [0.5, 0.75])], [0, 1], {"a": 1})
    assert SweepResult.from_json(res.to_json()) == res
    again = SweepResult.from_csv(res.to_csv(), [0, 1], {"a": 1})
    assert again == res
    assert res.mean_map(0.0) == 0.25 and res.mean_map(0.5) == 0.625


def test_sweep_result_requires_increasing_psi():
    with pytest.raises(ValueError):
        SweepResult([SweepPoint(0.5, [0.1]), SweepPoint(0.5, [0.2])], [0])


def test_config_diff():
    assert config_diff({"a": {"b": 1, "c": 2}}, {"a": {"b": 1, "c": 3}}) == ["a.c"]
    assert config_diff({"x": 1}, {"x": 1}) == []


@pytest.fixture(scope="module")
def experiment():
    tr, te = make_splits(DatasetSpec(seed=3, num_images=8, image_size=32, max_size=20), 4)
    return Experiment(TINY, init_params(TINY, 5), make_student(TINY, 0.5),
                      TrainConfig(iterations=3, batch_size=4, distill=DistillConfig(lam=0.5)), tr, te)


def test_psi_sweep_endpoints(experiment):
    res = psi_sweep([1.0, 0.0, 0.5], [0], experiment)
    assert [p.psi for p in res.points] == [0.0, 0.5, 1.0]
    plain = train(experiment.student_cfg, TrainConfig(iterations=3, batch_size=4), experiment.train_set,
                  experiment.test_set)
    assert res.mean_map(1.0) == plain.final_map
    assert res.config["train"]["iterations"] == 3


def test_psi_sweep_validates(experiment):
    with pytest.raises(ValueError):
        psi_sweep([0.5], [], experiment)
    with pytest.raises(ValueError):
        psi_sweep([1.5], [0], experiment)


def test_baseline_comparison_only_mask_varies(experiment):
    res = baseline_comparison([0], experiment)
    assert set(res.maps) == set(VARIANTS)
    assert set(res.varied) <= {"train.distill.mask", "train.distill.psi"}
    plain = train(experiment.student_cfg, TrainConfig(iterations=3, batch_size=4), experiment.train_set,
                  experiment.test_set)
    assert res.mean_map("no_imitation") == plain.final_map
    assert "variant,mean_map" in res.to_csv()
