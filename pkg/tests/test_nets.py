import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metavi import distributions as D
from metavi import framing, nets
from metavi import tensor as T

MOG_META = dict(kind="meta", posterior="bernoulli", latent_dim=1, obs_dim=2, summary_dim=10, summary_hidden=[10, 10], hidden=[10, 10])
GAUSS_META = dict(kind="meta", posterior="gaussian", latent_dim=2, obs_dim=3, summary_dim=6, summary_hidden=[8], hidden=[8, 8])


def build(arch, seed=0):
    return nets.build_inference(arch, np.random.default_rng(seed))


def test_mog_nets_follow_three_layer_width_ten_layout():
    m = build(MOG_META)
    assert [l.weight.shape for l in m.summary.layers] == [(2, 10), (10, 10), (10, 10)]
    assert [l.weight.shape for l in m.aggregator] == [(12, 10), (10, 10), (10, 1)]
    gen = nets.build_generative(
        dict(family="gaussian-fixed-var", latent="binary", latent_dim=1, obs_dim=2, decoder_hidden=[10, 10]), np.random.default_rng(0)
    )
    assert [l.weight.shape for l in gen.decoder] == [(1, 10), (10, 10), (10, 2)]


def test_parameter_free_decoder_has_no_parameters():
    for tag in ("gaussian-fixed-var", "exponential", "weibull-fixed-scale"):
        gen = nets.build_generative(dict(family=tag, latent="continuous", latent_dim=1, obs_dim=20), np.random.default_rng(0))
        assert gen.n_parameters() == 0
        assert gen.parameters() == {}


def test_decode_parameter_free_examples():
    g = nets.build_generative(dict(family="gaussian-fixed-var", latent="continuous", latent_dim=1, obs_dim=1), None)
    p = nets.decode(g, [1.5])
    assert p.family.tag == "gaussian-fixed-var" and p.theta[0] == 1.5
    e = nets.build_generative(dict(family="exponential", latent="continuous", latent_dim=1, obs_dim=1), None)
    assert nets.decode(e, [0.0]).theta[0] == pytest.approx(math.log(2.0))


def test_binary_decoder_outputs_two_means():
    gen = nets.build_generative(
        dict(family="gaussian-fixed-var", latent="binary", latent_dim=1, obs_dim=2, decoder_hidden=[10, 10]), np.random.default_rng(1)
    )
    out = gen.decode_tensor(np.array([[0.0], [1.0], [0.0]])).data
    assert out.shape == (3, 2)
    np.testing.assert_array_equal(out[0], out[2])
    assert not np.allclose(out[0], out[1])


def test_decode_rejects_wrong_latent_dim():
    gen = nets.build_generative(
        dict(family="bernoulli", latent="continuous", latent_dim=3, obs_dim=4, decoder_hidden=[5]), np.random.default_rng(0)
    )
    with pytest.raises(T.DimensionError):
        gen.decode_tensor(np.zeros((2, 2)))


def test_invalid_family_combination_is_config_error():
    with pytest.raises(nets.ConfigError):
        nets.build_generative(dict(family="gaussian-full", latent="continuous", latent_dim=1, obs_dim=2), None)
    with pytest.raises(nets.ConfigError):
        nets.build_inference(dict(MOG_META, latent_dim=2), np.random.default_rng(0))


@given(st.integers(0, 10_000), st.integers(2, 30))
def test_meta_infer_is_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    m = build(GAUSS_META, seed % 7)
    data = rng.normal(size=(n, 3)) * 3.0
    x = rng.normal(size=(4, 3))
    a = nets.meta_infer(m, data, x)
    b = nets.meta_infer(m, data[rng.permutation(n)], x)
    np.testing.assert_allclose(a.mean.data, b.mean.data, rtol=0, atol=1e-9)
    np.testing.assert_allclose(a.logvar.data, b.logvar.data, rtol=0, atol=1e-9)


def test_distinct_data_sets_give_distinct_posteriors():
    m = build(GAUSS_META)
    x = np.ones((1, 3))
    a = nets.meta_infer(m, np.zeros((5, 3)), x).mean.data
    b = nets.meta_infer(m, np.full((5, 3), 2.0), x).mean.data
    assert not np.allclose(a, b)


def test_meta_infer_dimension_errors():
    m = build(GAUSS_META)
    with pytest.raises(T.DimensionError, match="expects dim 3"):
        nets.meta_infer(m, np.zeros((5, 2)), np.zeros((1, 3)))
    with pytest.raises(ValueError, match="empty"):
        nets.meta_infer(m, np.zeros((0, 3)), np.zeros((1, 3)))


def test_posterior_mean_gradient_matches_finite_differences():
    m = build(dict(GAUSS_META, summary_activation="softplus", hidden_activation="softplus"))
    rng = np.random.default_rng(0)
    data, x = rng.normal(size=(6, 3)), rng.normal(size=(2, 3))
    params = {k: v for k, v in m.parameters().items() if k.startswith("aggregator")}
    res = T.grad_check(lambda: T.tsum(nets.meta_infer(m, data, x).mean), params)
    assert res.max_rel_error < 1e-4


def test_stacked_forward_matches_per_set_calls():
    m = build(MOG_META)
    rng = np.random.default_rng(2)
    sets = [rng.normal(size=(k, 2)) for k in (3, 5)]
    xs = [rng.normal(size=(2, 2)), rng.normal(size=(4, 2))]
    stacked = m.forward(
        np.concatenate(sets), np.repeat([0, 1], [3, 5]), 2, np.concatenate(xs), np.repeat([0, 1], [2, 4])
    ).data
    single = np.concatenate([nets.meta_infer(m, s, x).logit.data for s, x in zip(sets, xs)])
    np.testing.assert_allclose(stacked, single, rtol=0, atol=1e-12)


def test_input_transforms():
    assert nets.InputTransform("log", 1.0, 2.0)(np.array([math.e**3])) == pytest.approx(1.0)
    np.testing.assert_allclose(nets.InputTransform("symlog")(np.array([-math.e + 1, 0.0])), [-1.0, 0.0])
    with pytest.raises(nets.ConfigError):
        nets.InputTransform("sqrt")(np.ones(1))


# -- checkpoints ---------------------------------------------------------------------------------


def make_checkpoint():
    m = build(MOG_META)
    opt = T.Adam(m.parameters(), lr=2e-4)
    for p in m.parameters().values():
        p.grad = np.ones_like(p.data)
    opt.step()
    params = {k: v.data.copy() for k, v in m.parameters().items()}
    st_ = opt.state
    ckpt = nets.Checkpoint(
        architecture={"inference": MOG_META},
        params=params,
        optimizer={"inference": {"lr": st_.lr, "beta1": st_.beta1, "beta2": st_.beta2, "eps": st_.eps, "t": st_.t, "m": st_.m, "v": st_.v}},
        rng_seed=7,
        rng_state={"counter": [1, 2, 3, 4]},
        step=11,
    )
    return m, ckpt


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    _, ckpt = make_checkpoint()
    path = tmp_path / "c.mvi"
    nets.save_checkpoint(path, ckpt)
    back = nets.load_checkpoint(path)
    assert back.params.keys() == ckpt.params.keys()
    for k in ckpt.params:
        assert back.params[k].tobytes() == ckpt.params[k].tobytes()
    for k in ckpt.optimizer["inference"]["m"]:
        assert back.optimizer["inference"]["m"][k].tobytes() == ckpt.optimizer["inference"]["m"][k].tobytes()
    assert back.optimizer["inference"]["t"] == 1
    assert (back.rng_seed, back.rng_state, back.step) == (7, {"counter": [1, 2, 3, 4]}, 11)
    assert path.read_bytes()[:4] == b"MVI1"


def test_reloaded_model_reproduces_outputs(tmp_path):
    m, ckpt = make_checkpoint()
    nets.save_checkpoint(tmp_path / "c.mvi", ckpt)
    back = nets.load_checkpoint(tmp_path / "c.mvi")
    m2 = build(MOG_META, seed=99)
    for k, p in m2.parameters().items():
        p.data = back.params[k]
    data, x = np.random.default_rng(0).normal(size=(20, 2)), np.random.default_rng(1).normal(size=(5, 2))
    np.testing.assert_array_equal(nets.meta_infer(m, data, x).logit.data, nets.meta_infer(m2, data, x).logit.data)


def _rewrite(raw: bytes, offset: int, new: bytes) -> bytes:
    return raw[:offset] + new + raw[offset + len(new) :]


def test_checkpoint_error_kinds_are_distinct(tmp_path):
    _, ckpt = make_checkpoint()
    path = tmp_path / "c.mvi"
    nets.save_checkpoint(path, ckpt)
    raw = path.read_bytes()

    cases = {
        framing.BadMagicError: _rewrite(raw, 0, b"XXXX"),
        framing.VersionError: _rewrite(raw, 4, struct.pack("<I", 2)),
        framing.TruncatedError: raw[:-40],
        framing.ChecksumError: _rewrite(raw, len(raw) - 20, b"\x01"),
    }
    for err, blob in cases.items():
        bad = tmp_path / f"{err.__name__}.mvi"
        bad.write_bytes(blob)
        with pytest.raises(err):
            nets.load_checkpoint(bad)
    for a in cases:
        for b in cases:
            if a is not b:
                assert not issubclass(a, b)


def test_version_error_even_with_valid_crc(tmp_path):
    body = framing.encode(b"MVI1", {"architecture": {}}, {}, version=3)
    with pytest.raises(framing.VersionError):
        framing.decode(body, b"MVI1")
    assert zlib.crc32(body[:-4]) == struct.unpack("<I", body[-4:])[0]


def test_missing_checkpoint_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.mvi"):
        nets.load_checkpoint(tmp_path / "nope.mvi")


@pytest.mark.parametrize("tag", ["exponential", "laplace-fixed-loc", "weibull-fixed-scale"])
def test_positive_parameter_loglik_has_no_flat_region(tag):
    # far below the link's underflow point the likelihood still pulls z back up
    gen = nets.GenerativeModel(D.family(tag), "continuous", 1, 5)
    x = np.full((1, 5), 0.5)
    z = T.Tensor(np.array([[-60.0]]), requires_grad=True)
    with T.Tape() as tape:
        ll = T.tsum(gen.loglik(x, z))
    tape.backward(ll)
    assert np.isfinite(ll.item())
    assert z.grad[0, 0] > 1.0


def test_positive_parameter_loglik_matches_numeric_density():
    gen = nets.GenerativeModel(D.family("exponential"), "continuous", 1, 3)
    x = np.array([[0.2, 1.0, 3.0]])
    raw = 0.4
    rate = math.log1p(math.exp(raw))
    assert gen.loglik(x, np.array([[raw]])).item() == pytest.approx(3 * math.log(rate) - rate * 4.2, rel=1e-12)
