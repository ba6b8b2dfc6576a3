import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import digamma

from conftest import small_problem
from oracles import (brute_distribution, design, enumerate_subtrees, mc_quadratic_form,
                     naive_surrogate, normal_gamma_regression, prob_from_split)
from qtdenoise.context import make_template, node_stats
from qtdenoise.denoiser import init_posterior
from qtdenoise.quadtree import build_tmax, path_of_pixel, split_prior
from qtdenoise.vb import (ModelConfig, PosteriorState, VBNumericalError, compute_ln_rho,
                          conjugate_posterior, ln_rho_matrix, softmax_rows, lower_bound, run_vb, spd_inverse,
                          surrogate_objective, tree_distribution, update_global_posterior,
                          update_responsibilities, update_tree_posterior, vb_sweep, write_posterior,
                          _kl_dirichlet, _kl_normal_gamma)


def with_ln_rho(tree, ln_rho, K):
    """Posterior stub carrying only ``ln_rho`` (and matching responsibilities)."""
    p = np.exp(ln_rho - ln_rho.max(axis=1, keepdims=True))
    return PosteriorState(alpha_prime=np.ones(K), lambda_prime=None, lambda_prime_inv=None,
                          mu_prime=None, a_prime=None, b_prime=None, ln_rho=ln_rho,
                          resp=p / p.sum(axis=1, keepdims=True))


def q_of_tree(tree, post, internal):
    return prob_from_split(tree, internal, post.g_prime)


# --- config ----------------------------------------------------------------------

def test_config_shorthand():
    cfg = ModelConfig(sigma2=4.0, K=3, D=4, lam=2.0)
    np.testing.assert_array_equal(cfg.alpha, [0.01] * 3)
    np.testing.assert_array_equal(cfg.lam, 2 * np.eye(4))
    assert cfg.template.offsets == make_template(4).offsets
    assert cfg.sigma == 2.0


@pytest.mark.parametrize("kw", [dict(sigma2=0), dict(lam=-1.0), dict(alpha=0.0), dict(a=0),
                                dict(lam=np.ones((4, 4))), dict(lam=np.triu(np.ones((4, 4))))])
def test_config_rejects(kw):
    base = dict(sigma2=1.0, K=2, D=4)
    base.update(kw)
    with pytest.raises(ValueError):
        ModelConfig(**base)


def test_digamma_at_one():
    assert abs(digamma(1.0) + 0.5772156649015329) < 1e-10


# --- ln rho and responsibilities ---------------------------------------------------

def test_ln_rho_quadratic_term_vs_residual(rng):
    noisy, tree, stats, post, cfg = small_problem()
    for s in rng.choice(tree.n_nodes, 5, replace=False):
        r = tree.region(int(s))
        X, y = design(noisy, r.top, r.left, r.height, r.width, cfg.template.offsets, 128.0)
        for k in range(cfg.K):
            st_ = stats[int(s)]
            mu = post.mu_prime[k]
            quad = st_.sqnorm - 2 * st_.cross @ mu + mu @ st_.gram @ mu
            res = y - X @ mu
            np.testing.assert_allclose(quad, res @ res, rtol=1e-9)
            expected = (digamma(post.alpha_prime[k]) - digamma(post.alpha_prime.sum())
                        + 0.5 * y.size * (-math.log(2 * math.pi) + digamma(post.a_prime[k]) - math.log(post.b_prime[k]))
                        - 0.5 * post.a_prime[k] / post.b_prime[k] * (res @ res)
                        - 0.5 * np.trace(X @ post.lambda_prime_inv[k] @ X.T))
            np.testing.assert_allclose(compute_ln_rho(st_, k, post), expected, rtol=1e-9)


def test_ln_rho_matrix_matches_scalar():
    _, tree, stats, post, _ = small_problem()
    M = ln_rho_matrix(stats, post)
    for s in (0, 3, tree.n_nodes - 1):
        for k in range(post.K):
            np.testing.assert_allclose(M[s, k], compute_ln_rho(stats[s], k, post), rtol=1e-12)


def test_identical_labels_identical_ln_rho():
    noisy, tree, stats, post, cfg = small_problem()
    same = {f: np.repeat(getattr(post, f)[:1], cfg.K, axis=0)
            for f in ("alpha_prime", "lambda_prime", "lambda_prime_inv", "mu_prime", "a_prime", "b_prime")}
    M = ln_rho_matrix(stats, post.replace(**same))
    np.testing.assert_allclose(M, M[:, :1].repeat(cfg.K, axis=1), rtol=1e-12)


def test_single_label_resp_is_one():
    _, tree, stats, post, _ = small_problem(K=1)
    np.testing.assert_array_equal(update_responsibilities(stats, post).resp, 1.0)


def test_softmax_uniform_row():
    tree = build_tmax(4, 4, 1, 1)
    p = with_ln_rho(tree, np.zeros((tree.n_nodes, 5)), 5)
    np.testing.assert_allclose(p.resp, 0.2, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e5, 1e5), min_size=2, max_size=8), st.floats(-1e4, 1e4))
def test_softmax_shift_invariance(row, shift):
    row = np.array([row])
    a = softmax_rows(row)
    np.testing.assert_allclose(softmax_rows(row + shift), a, rtol=0, atol=1e-12)
    assert abs(a.sum() - 1) < 1e-10


def test_softmax_all_minus_inf_row():
    with pytest.raises(VBNumericalError):
        softmax_rows(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))


def test_responsibility_rows_sum_to_one():
    _, tree, stats, post, _ = small_problem(K=6)
    r = update_responsibilities(stats, post).resp
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-10)


def test_nonfinite_ln_rho_raises():
    _, tree, stats, post, _ = small_problem()
    bad = post.replace(b_prime=np.full(post.K, np.inf))
    with pytest.raises(VBNumericalError):
        ln_rho_matrix(stats, bad)


# --- tree posterior --------------------------------------------------------------------

def test_split_construction_matches_enumeration(rng):
    tree = build_tmax(8, 8, 2, 2)
    trees = enumerate_subtrees(tree)
    worst = 0.0
    for _ in range(100):
        log_a = np.log(rng.uniform(0.01, 5.0, tree.n_nodes))
        log_b = np.log(rng.uniform(0.01, 5.0, tree.n_nodes))
        _, p = brute_distribution(tree, log_a, log_b)
        log_phi, log_g, log_1m_g = tree_distribution(tree, log_a, log_b)
        g = np.exp(log_g)
        ours = np.array([prob_from_split(tree, T, g) for T in trees])
        worst = max(worst, np.abs(ours - p).max())
        np.testing.assert_allclose(np.exp(log_1m_g), 1 - g, atol=1e-14)
    assert worst < 1e-10


def test_split_construction_normalizer_is_partition_function(rng):
    tree = build_tmax(8, 8, 2, 2)
    log_a = rng.normal(size=tree.n_nodes)
    log_b = rng.normal(size=tree.n_nodes)
    from oracles import unnormalized_log_weight
    Z = sum(math.exp(unnormalized_log_weight(tree, T, log_a, log_b)) for T in enumerate_subtrees(tree))
    log_phi, _, _ = tree_distribution(tree, log_a, log_b)
    assert abs(log_phi[tree.root] - math.log(Z)) < 1e-12


def test_tree_posterior_matches_enumeration(rng):
    tree = build_tmax(8, 8, 2, 2)
    trees = enumerate_subtrees(tree)
    gs = split_prior(tree, 0.75)
    for _ in range(20):
        ln_rho = rng.normal(scale=2.0, size=(tree.n_nodes, 3)) - 15.0 * tree.area[:, None]
        post = update_tree_posterior(with_ln_rho(tree, ln_rho, 3), tree, 0.75)
        lse = np.logaddexp.reduce(ln_rho, axis=1)
        with np.errstate(divide="ignore"):
            log_a = np.log(gs)
            log_b = np.where(tree.is_leaf, 0.0, np.log1p(-gs)) + lse
        _, p = brute_distribution(tree, log_a, log_b)
        q = np.array([q_of_tree(tree, post, T) for T in trees])
        assert np.abs(q - p).max() < 1e-10
        assert abs(q.sum() - 1) < 1e-10
        for i in range(8):
            for j in range(8):
                assert abs(post.leaf_prob[path_of_pixel(tree, i, j)].sum() - 1) < 1e-10
        assert np.all(post.g_prime[tree.leaves] == 0)


def test_leaf_prob_is_product_formula(rng):
    tree = build_tmax(16, 16, 3, 2)
    post = update_tree_posterior(with_ln_rho(tree, rng.normal(size=(tree.n_nodes, 2)), 2), tree, 0.6)
    for s in range(tree.n_nodes):
        # complement from the log form: 1 - g' rounds to 0 when q(leaf) is tiny
        p, a = np.exp(post.log_1m_g_prime[s]), tree.parent[s]
        while a >= 0:
            p *= post.g_prime[a]
            a = tree.parent[a]
        np.testing.assert_allclose(post.leaf_prob[s], p, rtol=1e-12, atol=1e-300)


def test_tree_posterior_no_splits(rng):
    tree = build_tmax(8, 8, 2, 2)
    post = update_tree_posterior(with_ln_rho(tree, rng.normal(size=(tree.n_nodes, 2)), 2), tree, 0.0)
    assert np.all(post.g_prime == 0)
    assert post.leaf_prob[tree.root] == 1 and np.all(post.leaf_prob[1:] == 0)


def test_tree_posterior_forced_splits(rng):
    tree = build_tmax(8, 8, 2, 2)
    post = update_tree_posterior(with_ln_rho(tree, rng.normal(size=(tree.n_nodes, 2)), 2), tree, 1.0)
    expected = np.where(tree.is_leaf, 1.0, 0.0)
    np.testing.assert_array_equal(post.leaf_prob, expected)


def test_tree_posterior_survives_huge_ln_rho(rng):
    # magnitudes typical of a 256x256 region; plain products would underflow
    tree = build_tmax(64, 64, 5, 2)
    ln_rho = -1e5 * (1 + rng.uniform(size=(tree.n_nodes, 4))) * tree.area[:, None] / tree.area[0]
    post = update_tree_posterior(with_ln_rho(tree, ln_rho, 4), tree, 0.75)
    assert np.all(np.isfinite(post.log_phi))
    paths = tree.node_at_depth.reshape(tree.node_at_depth.shape[0], -1)
    sums = np.where(paths >= 0, post.leaf_prob[np.maximum(paths, 0)], 0).sum(axis=0)
    np.testing.assert_allclose(sums, 1.0, atol=1e-10)


def test_tree_update_needs_ln_rho():
    tree = build_tmax(4, 4, 1, 1)
    stub = with_ln_rho(tree, np.zeros((tree.n_nodes, 1)), 1).replace(ln_rho=None)
    with pytest.raises(ValueError):
        update_tree_posterior(stub, tree, 0.5)


# --- global posterior ---------------------------------------------------------------

def test_zero_weights_give_prior():
    noisy, tree, stats, post, cfg = small_problem()
    out = update_global_posterior(stats, post.replace(leaf_prob=np.zeros(tree.n_nodes)), cfg)
    np.testing.assert_allclose(out.alpha_prime, cfg.alpha)
    np.testing.assert_allclose(out.lambda_prime, np.broadcast_to(cfg.lam, out.lambda_prime.shape))
    np.testing.assert_allclose(out.mu_prime, 0.0, atol=1e-12)
    np.testing.assert_allclose(out.a_prime, cfg.a)
    np.testing.assert_allclose(out.b_prime, cfg.b, rtol=1e-12)


def test_single_leaf_a_prime():
    img = np.random.default_rng(1).uniform(0, 255, (4, 4))
    cfg = ModelConfig(sigma2=1.0, K=1, D=4, d_max=0)
    tree = build_tmax(4, 4, 0, 2)
    stats = node_stats(img, tree, cfg.template)
    post = vb_sweep(tree, stats, init_posterior(img, tree, cfg), cfg)
    assert post.leaf_prob[0] == 1 and post.resp[0, 0] == 1
    assert post.a_prime[0] == cfg.a + 8


def test_conjugacy_oracle_twenty_images():
    rng = np.random.default_rng(99)
    worst = 0.0
    for n in range(20):
        img = rng.uniform(0, 255, (8, 8))
        mu = rng.normal(size=10) * 0.1
        A = rng.normal(size=(10, 10))
        lam = A @ A.T / 10 + np.eye(10)
        alpha = rng.uniform(0.01, 2)
        cfg = ModelConfig(sigma2=25.0, K=1, D=10, d_max=0, alpha=alpha, mu=mu, lam=lam,
                          a=rng.uniform(0.5, 3), b=rng.uniform(10, 200))
        tree = build_tmax(8, 8, 0, 2)
        stats = node_stats(img, tree, cfg.template)
        post = vb_sweep(tree, stats, init_posterior(img, tree, cfg), cfg)
        X, y = design(img, 0, 0, 8, 8, cfg.template.offsets, 128.0)
        lam_n, mu_n, a_n, b_n = normal_gamma_regression(X, y, mu, lam, cfg.a, cfg.b)
        for ours, ref in [(post.lambda_prime[0], lam_n), (post.mu_prime[0], mu_n),
                          (post.a_prime[0], a_n), (post.b_prime[0], b_n),
                          (post.alpha_prime[0], alpha + 1.0)]:
            err = np.max(np.abs(ours - ref) / np.maximum(np.abs(ref), 1e-300))
            worst = max(worst, err)
    assert worst < 1e-8


def test_global_invariants():
    _, tree, stats, post, cfg = small_problem(K=5, D=10, sweeps=4)
    assert np.all(post.a_prime >= cfg.a) and np.all(post.alpha_prime >= cfg.alpha)
    for L in post.lambda_prime:
        np.linalg.cholesky(L)
    np.testing.assert_allclose(np.einsum("kij,kjl->kil", post.lambda_prime, post.lambda_prime_inv),
                               np.broadcast_to(np.eye(10), post.lambda_prime.shape), atol=1e-8)


def test_spd_inverse_jitter_and_failure():
    M = np.diag([1.0, 1e-30, 2.0])
    M[1, 1] = -1e-12  # slightly indefinite, rescued by jitter
    inv = spd_inverse(M)
    assert np.all(np.isfinite(inv))
    with pytest.raises(VBNumericalError):
        spd_inverse(-np.eye(3))


def test_nonpositive_rate_raises():
    from qtdenoise.context import NodeStats
    cfg = ModelConfig(sigma2=1.0, K=1, D=2, b=1e-3)
    post = PosteriorState(alpha_prime=np.ones(1), lambda_prime=None, lambda_prime_inv=None,
                          mu_prime=None, a_prime=None, b_prime=None,
                          resp=np.ones((1, 1)), leaf_prob=np.ones(1))
    # sqnorm inconsistent with gram and cross, as corrupted statistics would be
    bad = NodeStats(np.array([4.0]), 4 * np.eye(2)[None], np.array([[100.0, 0.0]]), np.array([0.0]))
    with pytest.raises(VBNumericalError):
        update_global_posterior(bad, post, cfg)


# --- sweeps -----------------------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vb_fixed_point(seed):
    noisy, tree, stats, post, cfg = small_problem(seed=seed, K=4, D=4, d_max=3, sweeps=0)
    post, sweeps, converged = run_vb(tree, stats, post, cfg, tol=1e-8, max_sweeps=500)
    assert converged and sweeps <= 500
    again = vb_sweep(tree, stats, post, cfg)
    assert np.max(np.abs(again.resp - post.resp)) < 1e-8
    assert np.max(np.abs(again.g_prime - post.g_prime)) < 1e-8


def test_single_leaf_one_sweep_is_exact():
    img = np.random.default_rng(5).uniform(0, 255, (8, 8))
    cfg = ModelConfig(sigma2=1.0, K=1, D=4, d_max=0)
    tree = build_tmax(8, 8, 0, 2)
    stats = node_stats(img, tree, cfg.template)
    once = vb_sweep(tree, stats, init_posterior(img, tree, cfg), cfg)
    twice = vb_sweep(tree, stats, once, cfg)
    np.testing.assert_allclose(twice.mu_prime, once.mu_prime, rtol=1e-13)
    np.testing.assert_allclose(twice.b_prime, once.b_prime, rtol=1e-13)


def test_elbo_never_decreases():
    _, tree, stats, post, cfg = small_problem(seed=3, K=4, d_max=3, sweeps=0)
    from qtdenoise.vb import update_responsibilities as upd_r
    values = []
    for _ in range(15):
        post = update_tree_posterior(upd_r(stats, post), tree, cfg.g)
        values.append(lower_bound(tree, stats, post, cfg))
        post = update_global_posterior(stats, post, cfg)
        values.append(lower_bound(tree, stats, post, cfg))
    diffs = np.diff(values)
    assert np.all(diffs >= -1e-7 * np.abs(values[1:]).max())


def test_elbo_equals_log_evidence_after_tree_update():
    _, tree, stats, post, cfg = small_problem(seed=4, K=3, d_max=2, sweeps=2)
    post = update_tree_posterior(update_responsibilities(stats, post), tree, cfg.g)
    expected = (post.log_phi[tree.root] - _kl_dirichlet(post.alpha_prime, cfg.alpha)
                - _kl_normal_gamma(post, cfg).sum())
    np.testing.assert_allclose(lower_bound(tree, stats, post, cfg), expected, rtol=1e-11)


def test_kl_zero_at_prior():
    cfg = ModelConfig(sigma2=1.0, K=3, D=4)
    K, D = 3, 4
    post = PosteriorState(alpha_prime=cfg.alpha.copy(), lambda_prime=np.broadcast_to(cfg.lam, (K, D, D)).copy(),
                          lambda_prime_inv=np.broadcast_to(np.linalg.inv(cfg.lam), (K, D, D)).copy(),
                          mu_prime=np.zeros((K, D)), a_prime=np.full(K, cfg.a), b_prime=np.full(K, cfg.b))
    assert abs(_kl_dirichlet(post.alpha_prime, cfg.alpha)) < 1e-12
    np.testing.assert_allclose(_kl_normal_gamma(post, cfg), 0.0, atol=1e-12)


# --- surrogate objective -------------------------------------------------------------

def test_surrogate_zero_residual_gauss_term():
    noisy, tree, stats, post, cfg = small_problem()
    zero_post = post.replace(leaf_prob=np.zeros(tree.n_nodes))
    val = surrogate_objective(noisy, noisy, zero_post, stats, cfg)
    assert val == -(noisy.size / 2) * math.log(2 * math.pi * cfg.sigma2)


def test_surrogate_matches_pixel_loop():
    noisy, tree, stats, post, cfg = small_problem(size=12, d_max=2, K=3)
    v = noisy + np.random.default_rng(0).normal(size=noisy.shape)
    ours = surrogate_objective(v, noisy, post, node_stats(v, tree, cfg.template), cfg)
    ref = naive_surrogate(v, noisy, tree, post, cfg.template.offsets, 128.0, cfg.sigma2)
    np.testing.assert_allclose(ours, ref, rtol=1e-8)


def test_doubling_sigma_softens_penalty():
    v, vobs = np.zeros((3, 3)), np.ones((3, 3))
    term = lambda s2: -0.5 * np.sum((vobs - v) ** 2) / s2  # noqa: E731
    assert term(8.0) > term(4.0)
    noisy, tree, stats, post, cfg = small_problem()
    v = noisy + 3.0
    st_ = node_stats(v, tree, cfg.template)
    a = surrogate_objective(v, noisy, post, st_, cfg) + 0.5 * v.size * math.log(2 * math.pi * cfg.sigma2)
    cfg2 = ModelConfig(sigma2=4 * cfg.sigma2, K=cfg.K, D=cfg.D, d_max=cfg.d_max, template=cfg.template)
    b = surrogate_objective(v, noisy, post, st_, cfg2) + 0.5 * v.size * math.log(2 * math.pi * cfg2.sigma2)
    assert b > a


# --- quadratic-form identity ---------------------------------------------------------

def test_quadratic_form_identity_monte_carlo():
    rng = np.random.default_rng(7)
    for _ in range(10):
        m, d = rng.integers(2, 6), rng.integers(2, 6)
        A = rng.normal(size=(m, d))
        C = rng.normal(size=(m, m))
        B = C @ C.T + np.eye(m)
        mu = rng.normal(size=d)
        S = rng.normal(size=(d, d))
        Sigma = S @ S.T / d + 0.1 * np.eye(d)
        y = rng.normal(size=m)
        r = A @ mu - y
        exact = r @ B @ r + np.trace(A.T @ B @ A @ Sigma)
        mean, se = mc_quadratic_form(A, B, mu, Sigma, y, 10 ** 6, rng)
        assert abs(mean - exact) < 3 * se


# --- dump ---------------------------------------------------------------------------

def test_write_posterior(tmp_path):
    _, tree, stats, post, cfg = small_problem(K=2)
    write_posterior(post, tmp_path / "p.txt")
    text = (tmp_path / "p.txt").read_text()
    assert text.count("[label ") == 2 and text.count("[node ") == tree.n_nodes
    line = next(l for l in text.splitlines() if l.startswith("b_prime"))
    assert float(line.split("=")[1]) == post.b_prime[0]
