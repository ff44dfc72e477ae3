import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metavi import config as C
from metavi import datagen as G
from metavi import experiments as E
from metavi import nets

SD = math.sqrt(0.1)


@pytest.fixture(scope="module")
def mog_model():
    # a short, brisk schedule; enough to separate well-spaced components
    cfg = C.resolve({"kind": "mog", "generator": {"n_datasets": 20}, "optimizer": {"lr": 3e-3}})
    return E.train(cfg, 0, max_steps=4000).models


# -- clustering error ------------------------------------------------------


@pytest.mark.parametrize(
    "pred,true,err",
    [
        ([0, 0, 1, 1], [0, 0, 1, 1], 0.0),
        ([1, 1, 0, 0], [0, 0, 1, 1], 0.0),
        ([0, 1, 1, 1], [0, 0, 1, 1], 0.25),
        ([0, 1, 0, 1], [0, 0, 1, 1], 0.5),
        ([1, 1, 1, 1], [0, 0, 1, 1], 0.5),
    ],
)
def test_clustering_error_examples(pred, true, err):
    assert E.clustering_error(pred, true) == err


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=60))
def test_clustering_error_matches_brute_force(pairs):
    pred, true = np.array(pairs).T
    brute = min(np.mean(np.array(perm)[pred] != true) for perm in itertools.permutations([0, 1]))
    assert E.clustering_error(pred, true) == brute
    assert 0.0 <= brute <= 0.5


def test_clustering_error_shape_mismatch():
    with pytest.raises(ValueError):
        E.clustering_error([0, 1], [0])


def test_bayes_oracle_matches_analytic_error():
    means = np.array([[0.0, 0.0], [0.5, 0.3]])
    rng = np.random.default_rng(0)
    n = 200_000
    lab = rng.integers(0, 2, n)
    x = means[lab] + rng.normal(size=(n, 2)) * SD
    err = np.mean(E.bayes_labels(x, means) != lab)
    p = E.bayes_error(means, 0.1)
    assert abs(err - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_learned_error_not_below_bayes_on_average(mog_model):
    r = E.eval_mog(mog_model, 300, seed=3)
    assert np.all((r.errors >= 0) & (r.errors <= 0.5))
    # per-mixture errors are noisy; the averages must respect the oracle
    assert r.mean_error >= r.oracle_errors.mean() - 3 * r.errors.std() / math.sqrt(300)


def test_separated_components_cluster_almost_perfectly(mog_model):
    for trial in range(5):
        rng = np.random.default_rng(trial)
        centre, ang = rng.uniform(-2, 2, 2), rng.uniform(0, math.pi)
        off = 10 * SD * np.array([math.cos(ang), math.sin(ang)])
        means = np.array([centre - off, centre + off])  # 20 sigma apart
        lab = rng.integers(0, 2, 420)
        x = means[lab] + rng.normal(size=(420, 2)) * SD
        logit = nets.meta_infer(mog_model.inference, x[:20], x[20:]).logit.data[:, 0]
        assert E.clustering_error((logit > 0).astype(int), lab[20:]) < 0.01


def test_eval_mog_is_deterministic(mog_model):
    a, b = E.eval_mog(mog_model, 50, seed=9), E.eval_mog(mog_model, 50, seed=9)
    assert a.errors.tobytes() == b.errors.tobytes()


def test_finetune_curve(mog_model):
    target = G.mog_bundle(G.stream(4, "target"), "t", 200)
    curve = E.finetune_eval(mog_model, target, seed=0, steps=100)
    assert list(curve) == [0.05, 0.10, 0.15, 0.20]
    assert all(0.0 <= v <= 0.5 for v in curve.values())
    with pytest.raises(C.ConfigError):
        E.finetune_eval(mog_model, G.mog_bundle(G.stream(0), "s", 10), fractions=(0.05,), steps=1)


# -- physics ------------------------------------------------------------------


def test_prior_mean_estimator_mse_equals_prior_variance():
    def prior_mean(bound):
        return lambda cond, x: np.full(len(x), bound / 2)

    for L, A in [(3.0, 10.0), (12.0, 45.0), (20.0, 80.0)]:
        bound = G.friction_bound(A)
        g = E.eval_physics_grid(None, (L, L, 1.0), (A, A, 5.0), runs=20_000, seed=1, estimator=prior_mean(bound))
        var = bound**2 / 12
        # (mu - m)^2 for uniform mu has variance 4 var^2 / 5
        se = math.sqrt(0.8) * var / math.sqrt(20_000)
        assert g.prior_var[0, 0] == pytest.approx(var)
        assert abs(g.mse[0, 0] - var) < 4 * se


def test_physics_grid_shape_and_region():
    cfg = C.preset("physics")
    mb = E.train(cfg, 0, max_steps=200).models
    g = E.eval_physics_grid(mb, (2, 20, 6), (5, 85, 20), runs=20, bundle_size=20)
    assert g.mse.shape == (4, 5) and np.all(g.mse >= 0)
    assert len(list(g.rows())) == 20
    assert 0.0 <= g.frac_beating_prior <= 1.0


# -- exponential families ------------------------------------------------------


def test_expfam_estimates_respect_support():
    cfg = C.preset("expfam-exponential")
    mb = E.train(cfg, 0, max_steps=30).models
    c = E.eval_expfam(mb, "exponential", grid=[0.5, 2.0], n_realizations=5)
    assert np.all(c.estimates > 0) and np.all(c.mse >= 0)


def test_expfam_grid_spacing():
    g = E.expfam_grid("gaussian-fixed-var")
    assert g[0] == -10 and g[-1] == 10 and len(g) == 201


# -- probes ------------------------------------------------------------------------


def test_probe_separable_blobs():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 400)
    X = rng.normal(size=(400, 2)) * 0.3 + np.where(y[:, None] == 1, 3.0, -3.0)
    assert E.linear_probe(X, y) == 1.0


def test_probe_permutation_null():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(2000, 5))
    y = rng.permutation(np.repeat([0, 1], 1000))
    acc = E.linear_probe(X, y, seed=2)
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / 400)


def test_probe_duplicate_columns():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 3))
    y = (X @ [1.0, -2.0, 0.5] + rng.normal(size=300) > 0).astype(int)
    assert E.linear_probe(np.hstack([X, X[:, :1]]), y) == E.linear_probe(X, y)


def test_probe_errors():
    with pytest.raises(C.ConfigError):
        E.linear_probe(np.ones((20, 2)), np.zeros(20))
    with pytest.raises(C.ConfigError):
        E.linear_probe(np.ones((5, 2)), [0, 1, 0, 1, 0])


# -- latent distances ---------------------------------------------------------------


def small_meta(seed=0, latent_dim=3):
    arch = dict(kind="meta", posterior="gaussian", latent_dim=latent_dim, obs_dim=4, summary_dim=5, summary_hidden=[6], hidden=[6])
    inf = nets.build_inference(arch, np.random.default_rng(seed))
    return E.ModelBundle("mnist-pairs", "meta", inf, {}, {"inference": arch})


def test_mean_latent_l2_properties():
    mb = small_meta()
    rng = np.random.default_rng(0)
    base = G.DatasetBundle("b", rng.normal(size=(30, 4)))
    var = G.DatasetBundle("v", rng.normal(size=(30, 4)) + 1.0)
    assert E.mean_latent_l2(mb, base, [base]) == 0.0
    d = E.mean_latent_l2(mb, base, [var])
    assert d > 0
    assert E.mean_latent_l2(mb, var, [base]) == pytest.approx(d, rel=1e-12)
    last = mb.inference.aggregator[-1]
    last.weight.data[:, :3] *= 2.5  # scale only the posterior means
    last.bias.data[:3] *= 2.5
    assert E.mean_latent_l2(mb, base, [var]) == pytest.approx(2.5 * d, rel=1e-10)


def test_mean_latent_l2_needs_matching_shapes():
    mb = small_meta()
    with pytest.raises(Exception):
        E.mean_latent_l2(mb, G.DatasetBundle("b", np.ones((5, 4))), [G.DatasetBundle("v", np.ones((6, 4)))])
    with pytest.raises(ValueError):
        E.mean_latent_l2(mb, G.DatasetBundle("b", np.ones((5, 4))), [])


# -- training runs -------------------------------------------------------------------


def test_training_is_bit_reproducible(tmp_path):
    cfg = C.preset("mog-n10")
    for d in ("a", "b"):
        E.train(cfg, 5, out_dir=tmp_path / d, max_steps=120)
    for name in ("checkpoint.mvi", "metrics.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_reload_gives_same_predictions(tmp_path):
    cfg = C.preset("mog-n10")
    res = E.train(cfg, 1, out_dir=tmp_path, max_steps=50)
    mb, ckpt = E.load_run(tmp_path / "checkpoint.mvi")
    assert ckpt.step == 50
    a = E.eval_mog(res.models, 20, seed=2)
    b = E.eval_mog(mb, 20, seed=2)
    assert a.errors.tobytes() == b.errors.tobytes()


def test_training_loss_improves():
    res = E.train(C.preset("physics"), 0, max_steps=600)
    s = E.smoothed(res.step_losses, 50)
    assert s[-1] < s[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_last_good_checkpoint(tmp_path):
    cfg = C.resolve({"kind": "physics", "optimizer": {"lr": 1e6}})
    with pytest.raises(E.DivergenceError) as err:
        E.train(cfg, 0, out_dir=tmp_path, max_steps=100)
    path = err.value.checkpoint_path
    assert path and path.endswith("last_good.mvi")
    mb, ckpt = E.load_run(path)
    assert ckpt.step == err.value.step
    for v in mb.named_parameters().values():
        assert np.all(np.isfinite(v.data))


def test_smoothed_window():
    np.testing.assert_allclose(E.smoothed(np.arange(10.0), 4), [1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5])
    assert len(E.smoothed(np.ones(3), 50)) == 3


def test_metrics_files(tmp_path):
    rec = E.MetricsRecord("r")
    rec.log_epoch(1, 10, {"total": -1.0, "recon": -0.5, "kl": 0.5})
    rec.add("x", np.float64(0.25), 3)
    paths = rec.write(tmp_path)
    assert paths["metrics"].read_text().splitlines()[0] == "epoch,step,total,recon,kl"
    assert '"seed": 3' in paths["summary"].read_text()
