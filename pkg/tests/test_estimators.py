import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit, softmax

from gdregs import tape as T
from gdregs.estimators import (
    EstimatorChoice, grad_estimate, iwae_objective, normalized_weights, surrogate_likelihood,
    surrogate_losses, surrogate_phi, surrogate_theta,
)
from gdregs.harness.measure import estimator_draws
from gdregs.harness.quadrature import quadrature_iwae_gradient
from gdregs.harness.stats import summarize, unbiasedness_test
from gdregs.model import LayerSpec, LikelihoodSpec, Model, ModelSpec, log_weights, q_sample_hierarchy
from gdregs.tape import Tape, backward

LOG_2PI = math.log(2 * math.pi)
FLOOR = 1e-6


# -- objective and weights ------------------------------------------------------------

def _const(values):
    return Tape().constant(np.asarray(values, dtype=np.float64))


def test_iwae_single_sample_is_elbo():
    assert iwae_objective(_const([-5.0])).value == pytest.approx(-5.0, abs=1e-15)


def test_iwae_mean_of_two_and_four():
    assert iwae_objective(_const([math.log(2), math.log(4)])).value == pytest.approx(math.log(3), abs=1e-15)


def test_iwae_equal_weights():
    assert iwae_objective(_const([0.7] * 5)).value == pytest.approx(0.7, abs=1e-15)


def test_iwae_rejects_empty():
    with pytest.raises(ValueError):
        iwae_objective(_const(np.zeros(0)))


def test_iwae_stable_for_large_weights():
    assert iwae_objective(_const([1000.0, 1000.0])).value == pytest.approx(1000.0)


def test_normalized_weight_examples():
    np.testing.assert_allclose(normalized_weights(_const([0.0, 0.0, 0.0])).value, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(normalized_weights(_const([0.0, math.log(3)])).value, [0.25, 0.75], atol=1e-15)


def test_normalized_weights_are_behind_a_barrier():
    t = Tape()
    lw = t.parameter(np.array([0.1, -0.3, 2.0]), "lw")
    g = backward(T.sum(normalized_weights(lw) * np.array([1.0, 2.0, 3.0])))
    np.testing.assert_array_equal(g["lw"], 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=64))
def test_normalized_weights_sum_to_one(log_w):
    w = normalized_weights(_const(log_w)).value
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_weight_derivative_identity(log_w):
    # d wbar_k / d log w_k = wbar_k - wbar_k^2, checked against central differences of softmax
    lw = np.array(log_w)
    w = softmax(lw)
    h = 1e-6
    for k in range(len(lw)):
        up, down = lw.copy(), lw.copy()
        up[k] += h
        down[k] -= h
        fd = (softmax(up)[k] - softmax(down)[k]) / (2 * h)
        assert abs(fd - (w[k] - w[k] ** 2)) < 1e-9


def test_estimator_choice_validation():
    EstimatorChoice("dregs", "gdregs")
    for bad in ({"phi": "gdregs"}, {"theta": "dregs"}, {"lam": "stl"}):
        with pytest.raises(ValueError):
            EstimatorChoice(**bad)


def test_invalid_estimator_names():
    model, x, eps = single_layer_instance(np.random.default_rng(0), k=2)
    bound = model.bind(Tape(), x)
    z = q_sample_hierarchy(bound, eps)
    with pytest.raises(ValueError):
        surrogate_phi(bound, z, "gdregs")
    with pytest.raises(ValueError):
        surrogate_theta(bound, z, "stl")


def test_empty_group_rejected():
    t = Tape()
    p = t.parameter(np.ones(1), "p")
    with pytest.raises(ValueError):
        grad_estimate(T.sum(p), [])


# -- hand-coded oracles -------------------------------------------------------------------

def sp(r):
    return np.log1p(np.exp(r)) + FLOOR


def log_n(z, m, s):
    return -0.5 * ((z - m) / s) ** 2 - np.log(s) - 0.5 * LOG_2PI


def dn_dz(z, m, s):
    return -(z - m) / s ** 2


def dn_dm(z, m, s):
    return (z - m) / s ** 2


def dn_ds(z, m, s):
    return (z - m) ** 2 / s ** 3 - 1 / s


def estimates(model, x, eps, which):
    """Our estimator draws, by (group, estimator)."""
    out = {}
    for group, est in which:
        bound = model.bind(Tape(), x)
        z = q_sample_hierarchy(bound, eps)
        if group == "phi":
            loss = surrogate_phi(bound, z, est)
        elif group == "theta":
            loss = surrogate_theta(bound, z, est)
        else:
            loss = surrogate_likelihood(bound, z)
        out[(group, est)] = grad_estimate(loss, model.groups[group])
    return out


def single_layer_instance(rng, k=4):
    spec = ModelSpec(x_dim=1, layers=[LayerSpec(1, 1, ["x"], [])],
                     likelihood=LikelihoodSpec(family="gaussian", kind="linear"))
    params = {"q1.w0": rng.normal(size=(2, 1)), "q1.b0": rng.normal(size=2) * 0.5,
              "p1.b0": rng.normal(size=2) * 0.5, "lik.w0": rng.normal(size=(1, 1)), "lik.b0": rng.normal(size=1)}
    x = rng.normal(size=(1, 1))
    return Model(spec, params), x, {1: rng.normal(size=(1, 1, k, 1))}


def single_layer_oracle(model, x, eps):
    P = model.params
    x = float(x[0, 0])
    e = eps[1][0, 0, :, 0]
    (wm,), (ws,) = P["q1.w0"]
    bm, bs = P["q1.b0"]
    mp, rp = P["p1.b0"]
    (l1,), l0 = P["lik.w0"][0], P["lik.b0"][0]
    a, r = wm * x + bm, ws * x + bs
    s = sp(r)
    z = a + s * e
    sigp = sp(rp)
    resid = x - (l1 * z + l0)
    log_w = -0.5 * resid ** 2 - 0.5 * LOG_2PI + log_n(z, mp, sigp) - log_n(z, a, s)
    wb = softmax(log_w)
    lz = resid * l1
    f = lz + dn_dz(z, mp, sigp) - dn_dz(z, a, s)  # total d log w / dz, q and p weights held fixed
    dz_dphi = {"q1.w0": np.stack([np.full_like(e, x), e * expit(r) * x])[:, None],
               "q1.b0": np.stack([np.ones_like(e), e * expit(r)])}
    et = (z - mp) / sigp
    dz_dtheta = {"p1.b0": np.stack([np.ones_like(e), et * expit(rp)])}

    def contract(coef, jac):
        return {n: (j * coef).sum(axis=-1) for n, j in jac.items()}

    return {
        ("phi", "dregs"): contract(wb ** 2 * f, dz_dphi),
        ("phi", "stl"): contract(wb * f, dz_dphi),
        ("theta", "gdregs"): contract(wb * lz - wb ** 2 * f, dz_dtheta),
        ("theta", "naive"): {"p1.b0": np.array([(wb * dn_dm(z, mp, sigp)).sum(),
                                                 (wb * dn_ds(z, mp, sigp) * expit(rp)).sum()])},
        ("lambda", "naive"): {"lik.w0": np.array([[(wb * resid * z).sum()]]), "lik.b0": np.array([(wb * resid).sum()])},
    }


@pytest.mark.parametrize("seed", range(10))
def test_single_layer_estimators_match_transcription(seed):
    model, x, eps = single_layer_instance(np.random.default_rng(seed))
    want = single_layer_oracle(model, x, eps)
    got = estimates(model, x, eps, want.keys())
    for key, grads in want.items():
        for name, g in grads.items():
            np.testing.assert_allclose(got[key][name], g, atol=1e-10, rtol=0, err_msg=f"{key} {name}")


def test_gdregs_weight_term_vanishes_at_true_posterior():
    # p(z) = N(0, 1), x | z ~ N(z, 1): the posterior N(x/2, 1/2) is in the family
    raw = lambda s: math.log(math.expm1(s - FLOOR))  # noqa: E731
    spec = ModelSpec(x_dim=1, layers=[LayerSpec(1, 1, ["x"], [])],
                     likelihood=LikelihoodSpec(family="gaussian", kind="linear"))
    params = {"q1.w0": np.array([[0.5], [0.0]]), "q1.b0": np.array([0.0, raw(math.sqrt(0.5))]),
              "p1.b0": np.array([0.0, raw(1.0)]), "lik.w0": np.ones((1, 1)), "lik.b0": np.zeros(1)}
    model = Model(spec, params)
    rng = np.random.default_rng(0)
    x, eps = np.array([[1.3]]), {1: rng.normal(size=(1, 1, 6, 1))}
    want = single_layer_oracle(model, x, eps)
    bound = model.bind(Tape(), x)
    z = q_sample_hierarchy(bound, eps)
    lw = log_weights(bound, z).log_w.value
    assert np.ptp(lw) < 1e-12
    # gdregs equals the first term alone: sum_k wbar_k dlog p(x|z')/dz' dz'/dtheta
    e = eps[1][0, 0, :, 0]
    zz = 0.5 * 1.3 + math.sqrt(0.5) * e
    first = np.array([np.mean((1.3 - zz)), np.mean((1.3 - zz) * zz * expit(raw(1.0)))])
    got = grad_estimate(surrogate_theta(bound, z, "gdregs"), ["p1.b0"])["p1.b0"]
    np.testing.assert_allclose(got, first, atol=1e-10)
    np.testing.assert_allclose(got, want[("theta", "gdregs")]["p1.b0"], atol=1e-10)


def two_layer_instance(rng, k=3):
    spec = ModelSpec(
        x_dim=1,
        layers=[LayerSpec(1, 1, q_parents=["x"], p_parents=["z2"]),
                LayerSpec(2, 1, q_parents=["x", "z1"], p_parents=[])],
        likelihood=LikelihoodSpec(family="gaussian", parents=["z1", "z2"], kind="linear"),
    )
    params = {
        "q1.w0": rng.normal(size=(2, 1)) * 0.7, "q1.b0": rng.normal(size=2) * 0.5,
        "q2.w0": rng.normal(size=(2, 2)) * 0.7, "q2.b0": rng.normal(size=2) * 0.5,
        "p1.w0": rng.normal(size=(2, 1)) * 0.7, "p1.b0": rng.normal(size=2) * 0.5,
        "p2.b0": rng.normal(size=2) * 0.5,
        "lik.w0": rng.normal(size=(1, 2)), "lik.b0": rng.normal(size=1),
    }
    x = rng.normal(size=(1, 1))
    eps = {1: rng.normal(size=(1, 1, k, 1)), 2: rng.normal(size=(1, 1, k, 1))}
    return Model(spec, params), x, eps


def two_layer_oracle(model, x, eps):
    """The 2-layer worked example, expanded by hand into pathwise and indirect score terms."""
    P = model.params
    x = float(x[0, 0])
    e1, e2 = eps[1][0, 0, :, 0], eps[2][0, 0, :, 0]
    (wm,), (ws,) = P["q1.w0"]
    bm, bs = P["q1.b0"]
    (ux, uz), (vx, vz) = P["q2.w0"]
    cm, cs = P["q2.b0"]
    mu2, r2p = P["p2.b0"]
    (gm,), (gs,) = P["p1.w0"]
    hm, hs = P["p1.b0"]
    (l1, l2), l0 = P["lik.w0"][0], P["lik.b0"][0]

    # posterior sampling
    a1, r1 = wm * x + bm, ws * x + bs
    s1 = sp(r1)
    z1 = a1 + s1 * e1
    m2, r2 = ux * x + uz * z1 + cm, vx * x + vz * z1 + cs
    s2 = sp(r2)
    z2 = m2 + s2 * e2
    # prior
    sig2 = sp(r2p)
    mu1, rho1 = gm * z2 + hm, gs * z2 + hs
    sig1 = sp(rho1)
    resid = x - (l1 * z1 + l2 * z2 + l0)

    log_w = (-0.5 * resid ** 2 - 0.5 * LOG_2PI + log_n(z2, mu2, sig2) + log_n(z1, mu1, sig1)
             - log_n(z1, a1, s1) - log_n(z2, m2, s2))
    wb = softmax(log_w)

    lz1, lz2 = resid * l1, resid * l2
    # partial of log w in z1 at fixed z2: pathwise terms plus the indirect score of q(z2 | x, z1)
    f1 = (lz1 + dn_dz(z1, mu1, sig1) - dn_dz(z1, a1, s1)
          - (dn_dm(z2, m2, s2) * uz + dn_ds(z2, m2, s2) * expit(r2) * vz))
    # partial of log w in z2 at fixed z1: pathwise terms plus the indirect score of p(z1 | z2)
    f2 = (lz2 + dn_dz(z2, mu2, sig2) - dn_dz(z2, m2, s2)
          + dn_dm(z1, mu1, sig1) * gm + dn_ds(z1, mu1, sig1) * expit(rho1) * gs)

    # DReGs: total derivative along the posterior sampling path z1 -> z2
    dz2_dz1 = uz + e2 * expit(r2) * vz
    g1 = f1 + f2 * dz2_dz1
    one = np.ones_like(e1)
    dz1_dphi1 = {"q1.w0": np.stack([one * x, e1 * expit(r1) * x])[:, None],
                 "q1.b0": np.stack([one, e1 * expit(r1)])}
    dz2_dphi2 = {"q2.w0": np.stack([np.stack([one * x, z1]), np.stack([e2 * expit(r2) * x, e2 * expit(r2) * z1])]),
                 "q2.b0": np.stack([one, e2 * expit(r2)])}

    # GDReGs: re-expression through the prior, z2' first, then z1' given z2'
    et2 = (z2 - mu2) / sig2
    et1 = (z1 - mu1) / sig1
    dz1p_dz2p = gm + expit(rho1) * gs * et1
    d2 = f2 + f1 * dz1p_dz2p
    dl2 = lz2 + lz1 * dz1p_dz2p
    dz1_dtheta1 = {"p1.w0": np.stack([z2, et1 * expit(rho1) * z2])[:, None],
                   "p1.b0": np.stack([one, et1 * expit(rho1)])}
    dz2_dtheta2 = {"p2.b0": np.stack([one, et2 * expit(r2p)])}

    def contract(coef, jac):
        return {n: (j * coef).sum(axis=-1) for n, j in jac.items()}

    return {
        ("phi", "dregs"): {**contract(wb ** 2 * g1, dz1_dphi1), **contract(wb ** 2 * f2, dz2_dphi2)},
        ("phi", "stl"): {**contract(wb * g1, dz1_dphi1), **contract(wb * f2, dz2_dphi2)},
        ("theta", "gdregs"): {**contract(wb * lz1 - wb ** 2 * f1, dz1_dtheta1),
                              **contract(wb * dl2 - wb ** 2 * d2, dz2_dtheta2)},
        ("theta", "naive"): {
            "p1.w0": np.stack([(wb * dn_dm(z1, mu1, sig1) * z2).sum(),
                               (wb * dn_ds(z1, mu1, sig1) * expit(rho1) * z2).sum()])[:, None],
            "p1.b0": np.array([(wb * dn_dm(z1, mu1, sig1)).sum(), (wb * dn_ds(z1, mu1, sig1) * expit(rho1)).sum()]),
            "p2.b0": np.array([(wb * dn_dm(z2, mu2, sig2)).sum(), (wb * dn_ds(z2, mu2, sig2) * expit(r2p)).sum()]),
        },
        ("lambda", "naive"): {"lik.w0": np.array([[(wb * resid * z1).sum(), (wb * resid * z2).sum()]]),
                              "lik.b0": np.array([(wb * resid).sum()])},
    }


@pytest.mark.parametrize("seed", range(20))
def test_two_layer_estimators_match_worked_example(seed):
    model, x, eps = two_layer_instance(np.random.default_rng(100 + seed))
    want = two_layer_oracle(model, x, eps)
    got = estimates(model, x, eps, want.keys())
    for key, grads in want.items():
        for name, g in grads.items():
            np.testing.assert_allclose(got[key][name], g, atol=1e-10, rtol=0, err_msg=f"{key} {name}")


def test_naive_phi_matches_finite_differences():
    model, x, eps = two_layer_instance(np.random.default_rng(7))
    got = estimates(model, x, eps, [("phi", "naive")])[("phi", "naive")]

    def objective():
        bound = model.bind(Tape(), x)
        return float(iwae_objective(log_weights(bound, q_sample_hierarchy(bound, eps)).log_w).value.sum())

    h = 1e-6
    for name in model.groups["phi"]:
        base = model.params[name].copy()
        for i in np.ndindex(base.shape):
            vals = []
            for s in (h, -h):
                model.params[name] = base.copy()
                model.params[name][i] += s
                vals.append(objective())
            model.params[name] = base
            assert got[name][i] == pytest.approx((vals[0] - vals[1]) / (2 * h), abs=1e-7)


# -- barrier placement -------------------------------------------------------------------

@pytest.mark.parametrize("est", ["stl", "dregs"])
def test_phi_surrogates_have_no_direct_score(est):
    # with the samples detached, nothing but the (removed) direct score could reach phi
    model, x, eps = two_layer_instance(np.random.default_rng(3))
    bound = model.bind(Tape(), x)
    z = {k: T.stop_gradient(v) for k, v in q_sample_hierarchy(bound, eps).items()}
    for g in grad_estimate(surrogate_phi(bound, z, est), model.groups["phi"]).values():
        np.testing.assert_array_equal(g, 0.0)


def test_naive_phi_keeps_direct_score():
    model, x, eps = two_layer_instance(np.random.default_rng(3))
    bound = model.bind(Tape(), x)
    z = {k: T.stop_gradient(v) for k, v in q_sample_hierarchy(bound, eps).items()}
    grads = grad_estimate(surrogate_phi(bound, z, "naive"), model.groups["phi"])
    assert any(np.any(g != 0) for g in grads.values())


def test_gdregs_has_no_direct_prior_score():
    # only the re-expressed sample paths reach theta
    model, x, eps = two_layer_instance(np.random.default_rng(4))
    bound = model.bind(Tape(), x)
    z = {k: T.stop_gradient(v) for k, v in q_sample_hierarchy(bound, eps).items()}
    terms = log_weights(bound, z, p_stopped=True)
    w = normalized_weights(terms.log_w)
    loss = -T.sum(w * terms.log_lik - T.square(w) * terms.log_w)
    for g in grad_estimate(loss, model.groups["theta"]).values():
        np.testing.assert_array_equal(g, 0.0)


def test_likelihood_group_untouched_by_posterior_barriers():
    model, x, eps = two_layer_instance(np.random.default_rng(5))
    losses = surrogate_losses(model.bind(Tape(), x), eps, EstimatorChoice("dregs", "gdregs"))
    a = grad_estimate(losses["lambda"], model.groups["lambda"])
    b = estimates(model, x, eps, [("lambda", "naive")])[("lambda", "naive")]
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_surrogates_share_one_tape_without_interference():
    model, x, eps = two_layer_instance(np.random.default_rng(6))
    losses = surrogate_losses(model.bind(Tape(), x), eps, EstimatorChoice("dregs", "gdregs"))
    want = two_layer_oracle(model, x, eps)
    for group, est in (("phi", "dregs"), ("theta", "gdregs")):
        got = grad_estimate(losses[group], model.groups[group])
        for name, g in want[(group, est)].items():
            np.testing.assert_allclose(got[name], g, atol=1e-10)


def test_grad_estimate_is_deterministic():
    model, x, eps = two_layer_instance(np.random.default_rng(8))
    a = estimates(model, x, eps, [("phi", "dregs")])[("phi", "dregs")]
    b = estimates(model, x, eps, [("phi", "dregs")])[("phi", "dregs")]
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


# -- unbiasedness against quadrature --------------------------------------------------------

def mismatched_toy():
    spec = ModelSpec(x_dim=1, layers=[LayerSpec(1, 1, ["x"], [])],
                     likelihood=LikelihoodSpec(family="gaussian", kind="linear"))
    params = {"q1.w0": np.array([[0.2], [0.1]]), "q1.b0": np.array([0.8, -0.4]),
              "p1.b0": np.array([-0.3, 0.2]), "lik.w0": np.array([[1.2]]), "lik.b0": np.array([0.1])}
    return Model(spec, params), np.array([[0.9]])


def flat(model, grads, group):
    return np.concatenate([grads[n].ravel() for n in model.groups[group]])


def test_quadrature_oracle_converged():
    model, x = mismatched_toy()
    _, a = quadrature_iwae_gradient(model, x, k=2, n_nodes=24)
    _, b = quadrature_iwae_gradient(model, x, k=2, n_nodes=40)
    for name in a:
        np.testing.assert_allclose(a[name], b[name], atol=1e-9)


@pytest.mark.parametrize("group,est", [("phi", "naive"), ("phi", "dregs"), ("theta", "naive"),
                                       ("theta", "gdregs"), ("lambda", "naive")])
def test_unbiased_against_quadrature(group, est):
    model, x = mismatched_toy()
    _, exact = quadrature_iwae_gradient(model, x, k=2, n_nodes=24)
    draws = estimator_draws(model, x, None, est, group, 40_000, seed=11, k=2)
    assert unbiasedness_test(draws, oracle=flat(model, exact, group)).passed


def test_stl_bias_detected():
    model, x = mismatched_toy()
    _, exact = quadrature_iwae_gradient(model, x, k=2, n_nodes=24)
    draws = estimator_draws(model, x, None, "stl", "phi", 40_000, seed=11, k=2)
    assert not unbiasedness_test(draws, oracle=flat(model, exact, "phi")).passed


def test_variance_ordering_on_toy():
    model, x = mismatched_toy()
    naive = summarize(estimator_draws(model, x, None, "naive", "phi", 20_000, seed=1, k=2))
    dregs = summarize(estimator_draws(model, x, None, "dregs", "phi", 20_000, seed=1, k=2))
    assert dregs.avg_variance < naive.avg_variance


def test_gdregs_variance_lower_when_prior_and_posterior_overlap():
    model, x = mismatched_toy()
    # q independent of x and equal to the prior except for a small shift
    model.params["q1.w0"][:] = 0.0
    model.params["q1.b0"][:] = model.params["p1.b0"] + np.array([0.05, 0.02])
    naive = summarize(estimator_draws(model, x, None, "naive", "theta", 20_000, seed=2, k=2))
    gdregs = summarize(estimator_draws(model, x, None, "gdregs", "theta", 20_000, seed=2, k=2))
    assert gdregs.avg_variance < naive.avg_variance
