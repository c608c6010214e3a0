import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from icpcov.network import (
    NetworkConfig,
    SetConvSpec,
    UpConvSpec,
    ForwardTape,
    GaussianPrediction,
    forward,
    init_params,
    layer_table,
    ldl_to_covariance,
    load_params,
    param_count,
    param_layout,
    save_params,
    segment_slices,
    set_conv,
    set_conv_geometry,
)
from icpcov.pointcloud import FilteredPair, PointCloud
from icpcov.tape import Tape
from oracles import central_difference, ldl_dense, set_conv_dense

TOY = NetworkConfig(
    num_points=32,
    set_conv_pre=(SetConvSpec(1.5, 0.5, (4,)),),
    flow_k=4,
    flow_mlp=(4,),
    set_conv_post=(SetConvSpec(3.0, 0.5, (4,)),),
    set_upconv=(UpConvSpec(3.0, (4,), (4,)),),
    regression_mlp=(4,),
    head_mlp=(4,),
    max_group=8,
)


def unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def make_pair(seed, n=32):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-2, 2, (n, 3)), r.uniform(-2, 2, (n, 3))
    return FilteredPair(PointCloud(a, unit(r.normal(size=(n, 3)))), PointCloud(b, unit(r.normal(size=(n, 3)))))


def random_params(cfg, seed):
    # nonzero head so every layer receives gradient
    return np.random.default_rng(seed).normal(scale=0.5, size=param_count(cfg))


class TestConfig:
    def test_toy_is_small(self):
        assert param_count(TOY) <= 500

    def test_desk_param_count(self):
        assert param_count(NetworkConfig.desk()) == 71_870

    def test_layout_is_contiguous(self):
        layout = param_layout(NetworkConfig.desk())
        spans = sorted((off, off + int(np.prod(shape))) for off, shape in layout.values())
        assert spans[0][0] == 0 and all(a[1] == b[0] for a, b in zip(spans, spans[1:]))

    def test_layer_order(self):
        names = [n for n, _, _ in layer_table(TOY)]
        assert names == ["conv0.0", "flow.0", "conv1.0", "up0.a.0", "up0.b.0", "reg.0", "reg.out", "head.0", "head.out"]

    def test_dict_round_trip_and_hash(self):
        cfg = NetworkConfig.desk(output_scale=(1, 2, 3, 4, 5, 6.0))
        back = NetworkConfig.from_dict(cfg.to_dict())
        assert back == cfg and back.hash() == cfg.hash()
        assert cfg.hash() != NetworkConfig.desk().hash()

    @pytest.mark.parametrize(
        "kw",
        [
            {"dropout_rate": 1.0},
            {"output_scale": (1.0,) * 5},
            {"output_scale": (0.0,) + (1.0,) * 5},
            {"set_upconv": ()},
            {"set_conv_pre": (SetConvSpec(1.0, 0.0, (4,)),)},
        ],
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            NetworkConfig(**{**TOY.__dict__, **kw})

    def test_segments(self):
        assert segment_slices(TOY, ["all"]).all()
        assert not segment_slices(TOY, []).any()
        up = segment_slices(TOY, ["up0"])
        layout = param_layout(TOY)
        want = sum(int(np.prod(s)) for k, (_, s) in layout.items() if k.startswith("up0."))
        assert up.sum() == want
        assert segment_slices(TOY, ["up0.a"]).sum() < want


class TestCovariance:
    @given(st.lists(st.floats(-3, 3), min_size=21, max_size=21))
    def test_matches_loop_oracle_and_is_pd(self, p):
        S = ldl_to_covariance(p)
        assert np.allclose(S, ldl_dense(p), rtol=1e-12, atol=1e-12)
        assert np.linalg.eigvalsh(S).min() > 0 or np.linalg.cond(S) > 1e12

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            ldl_to_covariance(np.zeros(20))
        with pytest.raises(ValueError):
            ldl_to_covariance(np.r_[np.zeros(20), np.nan])

    def test_vector_round_trip(self):
        v = np.arange(27.0)
        g = GaussianPrediction.from_vector(v)
        assert np.array_equal(g.as_vector(), v)


class TestForward:
    def test_zero_head_gives_scaled_identity(self):
        s = (0.5, 0.2, 0.1, 0.01, 0.02, 0.03)
        cfg = NetworkConfig(**{**TOY.__dict__, "output_scale": s})
        pred = forward(make_pair(0), init_params(cfg, 1), cfg)
        assert np.array_equal(pred.mu, np.zeros(6))
        assert np.allclose(pred.covariance, np.diag(np.square(s)), rtol=1e-12)

    def test_output_scaling_is_exact(self):
        # the same raw head output, read with a diagonal rescaling, gives S Sigma S
        s = np.array([0.5, 0.2, 0.1, 0.01, 0.02, 0.03])
        cfg = NetworkConfig(**{**TOY.__dict__, "output_scale": tuple(s)})
        pair, params = make_pair(1), random_params(TOY, 2)
        a, b = forward(pair, params, TOY), forward(pair, params, cfg)
        assert np.allclose(b.mu, s * a.mu)
        assert np.allclose(b.covariance, np.outer(s, s) * a.covariance)

    def test_permutation_invariant(self):
        pair, params = make_pair(3), random_params(TOY, 4)
        r = np.random.default_rng(0)
        pa, pb = r.permutation(32), r.permutation(32)
        perm = FilteredPair(pair.reading.select(pa), pair.reference.select(pb))
        a, b = forward(pair, params, TOY), forward(perm, params, TOY)
        assert np.allclose(a.as_vector(), b.as_vector(), atol=1e-12)

    def test_dropout(self):
        pair, params = make_pair(5), random_params(TOY, 6)
        a = forward(pair, params, TOY, dropout_seed=1).as_vector()
        assert np.array_equal(a, forward(pair, params, TOY, dropout_seed=1).as_vector())
        assert not np.array_equal(a, forward(pair, params, TOY, dropout_seed=2).as_vector())
        off = NetworkConfig(**{**TOY.__dict__, "dropout_rate": 0.0})
        assert np.array_equal(forward(pair, params, off, 1).as_vector(), forward(pair, params, TOY).as_vector())

    def test_input_checks(self):
        params = init_params(TOY)
        with pytest.raises(ValueError, match="points"):
            forward(make_pair(0, 31), params, TOY)
        with pytest.raises(ValueError, match="parameters"):
            forward(make_pair(0), params[:-1], TOY)
        p = make_pair(0)
        with pytest.raises(ValueError, match="normals"):
            forward(FilteredPair(PointCloud(p.reading.points), p.reference), params, TOY)


class TestGradient:
    @pytest.mark.parametrize("seed", [None, 3])
    def test_finite_difference(self, seed):
        pair, params = make_pair(7), random_params(TOY, 8)
        up = np.random.default_rng(9).normal(size=27)

        def f(p):
            return forward(pair, p, TOY, seed).as_vector() @ up

        grad = ForwardTape(pair, params, TOY, seed).backward(up)
        fd = central_difference(f, params, 1e-6)
        assert np.abs(grad - fd).max() < 1e-6 * max(1.0, np.abs(fd).max())
        if seed is None:
            assert np.count_nonzero(grad) > 0.5 * len(grad)

    def test_frozen_segments_zeroed(self):
        pair, params = make_pair(7), random_params(TOY, 8)
        up = np.ones(27)
        g = ForwardTape(pair, params, TOY).backward(up, frozen=["conv0", "flow"])
        mask = segment_slices(TOY, ["conv0", "flow"])
        assert not g[mask].any() and g[~mask].any()
        assert not ForwardTape(pair, params, TOY).backward(up, frozen=["all"]).any()


def test_set_conv_matches_dense_loop():
    r = np.random.default_rng(11)
    pts, feats = r.uniform(-2, 2, (40, 3)), r.normal(size=(40, 3))
    spec = SetConvSpec(1.5, 0.3, (4,))
    params = random_params(TOY, 12)
    layout = param_layout(TOY)
    geom = set_conv_geometry(pts, spec, 8)
    out = set_conv(Tape(params, layout, record=False), feats, geom, "conv0", 1)
    off, shape = layout["conv0.0.W"]
    W = params[off : off + np.prod(shape)].reshape(shape)
    off_b, shape_b = layout["conv0.0.b"]
    b = params[off_b : off_b + shape_b[0]]
    ref = set_conv_dense(pts, feats, geom.centers, 1.5, 8, [(W, b)])
    assert np.allclose(out.value, ref, atol=1e-12)


class TestFiles:
    def test_round_trip(self, tmp_path):
        params = random_params(TOY, 0)
        save_params(tmp_path / "p.bin", params, TOY)
        back, cfg = load_params(tmp_path / "p.bin", TOY)
        assert np.array_equal(back, params) and cfg == TOY

    def test_refuses_other_config(self, tmp_path):
        save_params(tmp_path / "p.bin", random_params(TOY, 0), TOY)
        other = NetworkConfig(**{**TOY.__dict__, "flow_k": 5})
        with pytest.raises(ValueError, match="hash"):
            load_params(tmp_path / "p.bin", other)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"NOTMAGIC" + bytes(16))
        with pytest.raises(ValueError):
            load_params(tmp_path / "p.bin")
