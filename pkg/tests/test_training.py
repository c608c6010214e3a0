import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icpcov.dataset import DatasetManifest, RegistrationSample
from icpcov.network import GaussianPrediction, NetworkConfig, ldl_to_covariance
from icpcov.se3 import Pose
from icpcov.training import (
    Adam,
    Checkpoint,
    TrainConfig,
    TrainingDiverged,
    clip_gradient,
    finetune,
    label_scale,
    load_checkpoint,
    mean_nll,
    nll_loss,
    save_checkpoint,
    train,
)
from oracles import central_difference
from test_network import TOY, make_pair

NET = NetworkConfig(**{**TOY.__dict__, "output_scale": (0.1,) * 6})


def dense_nll(v, label):
    S = ldl_to_covariance(v[6:])
    r = label - v[:6]
    return 0.5 * r @ np.linalg.solve(S, r) + 0.5 * np.linalg.slogdet(S)[1]


def sample(k, label, converged=True, seq="a"):
    I = Pose.identity()
    return RegistrationSample(make_pair(k), I, I, np.asarray(label, float), I, converged, seq, k)


def toy_manifest(n_train=12, n_val=4, seed=0):
    r = np.random.default_rng(seed)
    samples = [sample(k, r.normal(scale=[0.3, 0.1, 0.05, 0.01, 0.01, 0.02])) for k in range(n_train)]
    samples += [sample(100 + k, r.normal(scale=[0.3, 0.1, 0.05, 0.01, 0.01, 0.02]), seq="b") for k in range(n_val)]
    return DatasetManifest(samples, ["a", "b"], {"a": "train", "b": "val"})


class TestLoss:
    def test_unit_gaussian(self):
        loss, _ = nll_loss(GaussianPrediction(np.zeros(6), np.zeros(21)), np.r_[1.0, np.zeros(5)])
        assert loss == pytest.approx(0.5)

    def test_worked_example(self):
        pred = GaussianPrediction(np.zeros(6), np.r_[np.zeros(15), np.full(6, np.log(4.0))])
        loss, grad = nll_loss(pred, np.full(6, 2.0))
        assert loss == pytest.approx(3.0 + 3.0 * np.log(4.0), abs=1e-12)
        # at r^2 == D each log-diagonal is stationary
        assert np.allclose(grad[21:], 0.0)

    @settings(max_examples=30)
    @given(st.integers(0, 10**6))
    def test_matches_dense_and_gradient(self, seed):
        r = np.random.default_rng(seed)
        v = np.r_[r.normal(size=6), r.normal(scale=0.5, size=15), r.normal(size=6)]
        label = r.normal(size=6)
        loss, grad = nll_loss(GaussianPrediction.from_vector(v), label)
        assert loss == pytest.approx(dense_nll(v, label), rel=1e-9, abs=1e-9)
        fd = central_difference(lambda x: dense_nll(x, label), v, 1e-6)
        assert np.allclose(grad, fd, atol=1e-6 * max(1.0, np.abs(fd).max()))


class TestOptimiser:
    def test_first_adam_step_is_lr_sign(self):
        cfg = TrainConfig(learning_rate=0.01)
        opt = Adam(cfg, np.zeros(3), np.zeros(3))
        out = opt.update(np.zeros(3), np.array([5.0, -0.1, 0.0]), 0.01, mask=np.array([True, True, False]))
        assert np.allclose(out, [-0.01, 0.01, 0.0], atol=1e-8)

    def test_clip(self):
        g, n = clip_gradient(np.array([3.0, 4.0]), 1.0)
        assert n == 5.0 and np.allclose(g, [0.6, 0.8])
        g, _ = clip_gradient(np.array([0.3, 0.4]), 1.0)
        assert np.array_equal(g, [0.3, 0.4])

    def test_config_validation_and_dict(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(lr_decay=1.5)
        cfg = TrainConfig(frozen_segments=["conv0"], epochs=3)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def trained():
    m = toy_manifest()
    cfg = TrainConfig(epochs=6, batch_size=4, learning_rate=3e-3, seed=1)
    return m, cfg, train(m, NET, cfg)


class TestTrain:
    def test_nll_decreases(self, trained):
        _, _, ck = trained
        h = ck.history
        assert [e.epoch for e in h] == list(range(7))
        assert h[-1].train_nll < h[0].train_nll

    def test_best_checkpoint_on_validation(self, trained):
        m, _, ck = trained
        best = min(ck.history, key=lambda e: e.val_nll)
        assert ck.epoch == best.epoch
        assert mean_nll(m.split_samples("val"), ck.params, NET) == pytest.approx(best.val_nll, rel=1e-12)

    def test_deterministic_across_workers(self, trained):
        m, cfg, ck = trained
        again = train(m, NET, TrainConfig(**{**cfg.__dict__, "workers": 3}))
        assert np.array_equal(again.params, ck.params)
        assert [(e.train_nll, e.val_nll) for e in again.history] == [(e.train_nll, e.val_nll) for e in ck.history]

    def test_frozen_all(self):
        m = toy_manifest(4, 0)
        ck = train(m, NET, TrainConfig(epochs=2, frozen_segments=("all",)))
        assert np.array_equal(ck.params, Checkpoint.initial(NET, 0).params)

    def test_zero_epochs_is_initialisation(self):
        ck = train(toy_manifest(4, 0), NET, TrainConfig(epochs=0, seed=5))
        assert np.array_equal(ck.params, Checkpoint.initial(NET, 5).params)
        assert len(ck.history) == 1

    def test_non_converged_excluded(self):
        m = toy_manifest(4, 0)
        bad = sample(50, np.full(6, 1e6), converged=False)
        m2 = DatasetManifest(m.samples + [bad], ["a"], {"a": "train"})
        a = train(m, NET, TrainConfig(epochs=1))
        b = train(m2, NET, TrainConfig(epochs=1))
        assert np.array_equal(a.params, b.params)
        with pytest.raises(ValueError):
            train(DatasetManifest([bad], ["a"]), NET, TrainConfig(epochs=1))

    def test_divergence(self):
        m = DatasetManifest([sample(0, np.full(6, np.inf))], ["a"])
        with pytest.raises(TrainingDiverged) as err:
            train(m, NET, TrainConfig(epochs=1))
        assert err.value.checkpoint.epoch == 0

    def test_log_file(self, tmp_path):
        train(toy_manifest(4, 2), NET, TrainConfig(epochs=2), log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_nll,val_nll,wallclock" and len(lines) == 4


class TestFinetune:
    def test_zero_epochs_returns_input(self, trained):
        m, _, ck = trained
        assert finetune(ck, m, TrainConfig(epochs=0)) is ck

    def test_restarts_counters(self, trained):
        m, _, ck = trained
        out = finetune(ck, m, TrainConfig(epochs=2))
        assert out.history[0].epoch == 0 and out.history[-1].epoch == 2
        assert out.history[0].val_nll == pytest.approx(mean_nll(m.split_samples("val"), ck.params, NET))

    def test_epoch_cap(self, trained):
        m, _, ck = trained
        out = finetune(ck, m, TrainConfig(epochs=50), epoch_cap=1)
        assert out.history[-1].epoch == 1

    def test_hash_mismatch(self, trained):
        m, _, ck = trained
        with pytest.raises(ValueError, match="hash"):
            finetune(ck, m, TrainConfig(epochs=1), net_cfg=TOY)


def test_checkpoint_round_trip(trained, tmp_path):
    _, _, ck = trained
    save_checkpoint(tmp_path / "c.bin", ck)
    back = load_checkpoint(tmp_path / "c.bin", NET)
    assert np.array_equal(back.params, ck.params) and np.array_equal(back.adam_v, ck.adam_v)
    assert (back.step, back.epoch, back.best_val_nll) == (ck.step, ck.epoch, ck.best_val_nll)
    assert [e.train_nll for e in back.history] == [e.train_nll for e in ck.history]


def test_label_scale():
    samples = [sample(k, [k, 0, 0, 0, 0, 0]) for k in (1, 3)] + [sample(9, np.full(6, 99.0), converged=False)]
    s = label_scale(samples)
    assert s[0] == pytest.approx(np.sqrt(5.0)) and s[1] == 1e-3 and s[3] == 1e-4


@pytest.mark.slow
def test_structured_dataset_training_lowers_nll():
    from icpcov.dataset import build_dataset, merge_manifests
    from icpcov.icp import IcpConfig
    from icpcov.scene_sim import synthetic_sequence

    parts = []
    for k in range(5):
        _, seq = synthetic_sequence("structured", 11, rng_seed=100 + k)
        parts.append(build_dataset(seq, IcpConfig(subsample_size=256), rng_seed=k, name=f"s{k}"))
    m = merge_manifests(parts)
    assert len(m.samples) == 50
    cfg = NetworkConfig.desk()
    ckpt = train(m, cfg, TrainConfig(epochs=30, seed=0))
    initial = mean_nll(m.samples, Checkpoint.initial(cfg, 0).params, cfg)
    assert mean_nll(m.samples, ckpt.params, cfg) < initial - 1.0
