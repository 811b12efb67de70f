import numpy as np
import pytest

from conftest import generic_seeds, toy_loss, toy_problem
from hsfuse import tensor as T
from hsfuse.datasim import gaussian_psf_kernel, synthetic_srf
from hsfuse.losses import LossWeights, compute_losses
from hsfuse.mixing import apply_psf, apply_srf, mix
from hsfuse.network import (Network, NetworkConfig, cross_attention, decode, param_shapes,
                            psf_layer, read_arrays, srf_layer, write_arrays)
from hsfuse.tensor import Tensor
from hsfuse.trainer import init_weights


def small_config(**kw):
    base = dict(K=3, L=8, l=2, ratio=2, lr_height=4, lr_width=4, widths=(5, 4, 3))
    base.update(kw)
    return NetworkConfig(**base)


def inputs(cfg, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(size=(cfg.L, cfg.lr_height, cfg.lr_width)), dtype=dtype)
    y = Tensor(rng.uniform(size=(cfg.l, cfg.ratio * cfg.lr_height, cfg.ratio * cfg.lr_width)),
               dtype=dtype)
    return x, y


def test_config_defaults_and_validation():
    cfg = NetworkConfig(K=4, L=31, l=3, ratio=8, lr_height=8, lr_width=8)
    assert cfg.widths == (64, 32, 4) and cfg.hsi_kernels == (1, 1, 1)
    with pytest.raises(ValueError):
        small_config(widths=(5, 4, 2))
    with pytest.raises(ValueError):
        small_config(msi_kernels=(3, 5, 3))
    with pytest.raises(ValueError):
        small_config(msi_kernels=(6, 4, 2))


def test_param_shapes_follow_config():
    shapes = param_shapes(small_config())
    assert shapes["f_en.0.weight"] == (5, 8, 1, 1)
    assert shapes["g_en.0.weight"] == (5, 2, 7, 7)
    assert shapes["g_en.2.weight"] == (3, 8, 3, 3)  # doubled input after cross-attention
    assert shapes["attn.u"] == (4, 4, 4) and shapes["attn.v"] == (1, 4, 3, 3)
    assert shapes["srf"] == (8, 2) and shapes["psf"] == (2, 2)
    plain = param_shapes(small_config(cross_attention=False))
    assert "attn.u" not in plain and plain["g_en.2.weight"] == (3, 4, 3, 3)


def test_forward_shapes():
    cfg = small_config()
    net = init_weights(cfg, 0)
    x, y = inputs(cfg)
    out = net.forward(x, y)
    assert out.s_hs.shape == (3, 4, 4) and out.s_ms.shape == (3, 8, 8)
    assert out.x_rec.shape == x.shape and out.y_rec.shape == y.shape
    assert out.z_hat.shape == (8, 8, 8)
    assert out.x_hat.shape == x.shape and out.y_hat.shape == y.shape
    assert out.u_hs.shape == out.u_ms.shape == (2, 4, 4)
    assert net.forward(x, y, consistency=False).x_hat is None


@pytest.mark.parametrize("seed", range(100))
def test_abundances_stay_in_unit_interval(seed):
    cfg = small_config()
    net = init_weights(cfg, seed, head_scale=1.0)
    x, y = inputs(cfg, seed)
    s_hs, s_ms = net.encode(x, y)
    for s in (s_hs, s_ms):
        assert s.data.min() >= 0.0 and s.data.max() <= 1.0


def test_zero_weights_give_zero_abundances_and_full_asc_loss():
    cfg = small_config()
    net = init_weights(cfg, 0)
    for name, p in net.params.items():
        if name.startswith(("f_en", "g_en")):
            p.data[...] = 0.0
    x, y = inputs(cfg)
    out = net.forward(x, y)
    assert not out.s_hs.data.any() and not out.s_ms.data.any()
    parts = compute_losses(out, x, y, LossWeights())
    assert parts.asc.item() == pytest.approx(2.0)


def test_softmax_head_when_clamp_is_off():
    cfg = small_config(clamp=False)
    net = init_weights(cfg, 0)
    s_hs, s_ms = net.encode(*inputs(cfg))
    np.testing.assert_allclose(s_ms.data.sum(axis=0), 1.0, atol=1e-5)


def test_decode_with_ground_truth_is_mixing():
    rng = np.random.default_rng(0)
    s = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
    a = rng.uniform(size=(3, 8))
    np.testing.assert_allclose(decode(Tensor(s), Tensor(a)).data, mix(s, a), atol=1e-12)
    eye = decode(Tensor(s), Tensor(np.eye(3))).data
    np.testing.assert_allclose(eye, s, atol=1e-12)


def test_operator_layers_match_numpy_operators():
    rng = np.random.default_rng(1)
    z = rng.uniform(size=(8, 8, 8))
    raw_srf = rng.uniform(0.1, 1.0, (8, 2))
    raw_psf = rng.uniform(0.1, 1.0, (2, 2))
    got = srf_layer(Tensor(z), Tensor(raw_srf)).data
    np.testing.assert_allclose(got, apply_srf(z, raw_srf / raw_srf.sum(axis=0)), atol=1e-12)
    got = psf_layer(Tensor(z), Tensor(raw_psf)).data
    np.testing.assert_allclose(got, apply_psf(z, raw_psf / raw_psf.sum()), atol=1e-12)


def test_srf_layer_rejects_dead_column():
    with pytest.raises(ValueError):
        srf_layer(Tensor(np.ones((3, 2, 2))), Tensor(np.array([[1.0, 0], [1, 0], [1, 0]])))


def test_wired_ground_truth_reproduces_target():
    rng = np.random.default_rng(2)
    s = rng.dirichlet(np.ones(3), size=(8, 8)).transpose(2, 0, 1)
    a = rng.uniform(size=(3, 8))
    z = mix(s, a)
    srf = synthetic_srf(np.linspace(400, 700, 8), centers=(480.0, 620.0))
    k = gaussian_psf_kernel(2)
    cfg = small_config()
    net = init_weights(cfg, 0, dtype=np.float64)
    net.params["f_de"].data[...] = a
    net.params["srf"].data[...] = srf
    net.params["psf"].data[...] = k
    x, y = Tensor(apply_psf(z, k)), Tensor(apply_srf(z, srf))
    z_hat = decode(Tensor(s), net.params["f_de"])
    np.testing.assert_allclose(z_hat.data, z, atol=1e-12)
    x_hat, y_hat, u_hs, u_ms = net.consistency_outputs(x, y, z_hat)
    for got, want in ((x_hat, x), (y_hat, y), (u_hs, u_ms)):
        np.testing.assert_allclose(got.data, want.data, atol=1e-12)


def test_cross_attention_shapes_and_pooled_mass():
    rng = np.random.default_rng(0)
    f = Tensor(rng.normal(size=(4, 3, 3)))
    g = Tensor(rng.normal(size=(4, 6, 6)))
    u = Tensor(rng.normal(size=(4, 3, 3)))
    v = Tensor(rng.normal(size=(1, 4, 3, 3)))
    f_out, g_out = cross_attention(f, g, u, v, 2)
    assert f_out.shape == (8, 3, 3) and g_out.shape == (8, 6, 6)
    np.testing.assert_array_equal(f_out.data[:4], f.data)
    # The pooled spatial weights remain a distribution over the LR grid.
    pooled = f_out.data[4:] / f.data
    np.testing.assert_allclose(pooled, pooled[:1].repeat(4, axis=0), rtol=1e-10)
    np.testing.assert_allclose(pooled[0].sum(), 1.0, rtol=1e-10)
    with pytest.raises(ValueError):
        cross_attention(f, Tensor(rng.normal(size=(4, 5, 6))), u, v, 2)


def test_fuse_needs_hsi_with_cross_attention():
    cfg = small_config()
    net = init_weights(cfg, 0)
    x, y = inputs(cfg)
    with pytest.raises(ValueError):
        net.fuse(y)
    np.testing.assert_array_equal(net.fuse(y, x).data, net.forward(x, y).z_hat.data)
    plain = init_weights(small_config(cross_attention=False), 0)
    np.testing.assert_array_equal(plain.fuse(y).data, plain.forward(x, y).z_hat.data)


def test_input_shape_checks():
    cfg = small_config()
    net = init_weights(cfg, 0)
    x, y = inputs(cfg)
    with pytest.raises(ValueError):
        net.encode(x, Tensor(np.ones((2, 6, 6))))


def test_projection_keeps_operators_nonnegative():
    net = init_weights(small_config(), 0)
    net.params["f_de"].data[0, 0] = -1.0
    net.params["srf"].data[1, 1] = -0.5
    net.project()
    assert net.params["f_de"].data.min() >= 0 and net.params["srf"].data.min() >= 0


def test_checkpoint_round_trip(tmp_path):
    net = init_weights(small_config(), 3)
    net.save(tmp_path / "w.ckpt", step=12, extra={"note": "x"})
    back, header = Network.load(tmp_path / "w.ckpt")
    assert header["step"] == 12 and back.config == net.config
    for k in net.params:
        assert back.params[k].data.tobytes() == net.params[k].data.tobytes()
    net.save(tmp_path / "v.ckpt", step=12, extra={"note": "x"})
    assert (tmp_path / "w.ckpt").read_bytes() == (tmp_path / "v.ckpt").read_bytes()


def test_checkpoint_errors(tmp_path):
    write_arrays(tmp_path / "a.bin", {"format": "other"}, {"w": np.ones(3, np.float32)})
    with pytest.raises(ValueError):
        Network.load(tmp_path / "a.bin")
    raw = (tmp_path / "a.bin").read_bytes()
    (tmp_path / "b.bin").write_bytes(raw[:-2])
    with pytest.raises(ValueError):
        read_arrays(tmp_path / "b.bin")
    (tmp_path / "c.bin").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        read_arrays(tmp_path / "c.bin")


def test_parameter_mismatch_is_rejected():
    net = init_weights(small_config(), 0)
    params = dict(net.params)
    params["psf"] = Tensor(np.ones((3, 3)))
    with pytest.raises(ValueError):
        Network(net.config, params)


@pytest.mark.parametrize("seed", generic_seeds(3, cross_attention=False))
def test_whole_loss_gradient_without_attention(seed):
    net, x, y = toy_problem(seed, cross_attention=False)
    err = T.gradcheck(lambda: toy_loss(net, x, y), list(net.params.values()))
    assert err <= 1e-4
