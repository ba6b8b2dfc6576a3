"""Variational-Bayes updates for the quadtree mixture-AR model.

The approximate posterior factorises as ``q(z, T) q(theta, tau, pi)``.  The
first factor is held as per-node label responsibilities plus per-node
posterior split probabilities ``g'``; the second as a Dirichlet over label
weights and one Normal-Gamma per label.  All tree quantities are kept in the
log domain because ``ln rho`` sums a log-likelihood over a whole region and
is routinely in the -1e5 range.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import digamma, gammaln, logsumexp

from .context import NeighborTemplate, NodeStats, RegionStats, make_template
from .quadtree import TreeMax, split_prior

__all__ = [
    "ModelConfig",
    "PosteriorState",
    "VBNumericalError",
    "spd_inverse",
    "conjugate_posterior",
    "compute_ln_rho",
    "ln_rho_matrix",
    "softmax_rows",
    "update_responsibilities",
    "tree_distribution",
    "leaf_probabilities",
    "update_tree_posterior",
    "update_global_posterior",
    "vb_sweep",
    "run_vb",
    "surrogate_objective",
    "lower_bound",
    "objective",
    "write_posterior",
]

_LOG_2PI = math.log(2.0 * math.pi)


class VBNumericalError(FloatingPointError):
    """A variational update produced a non-finite or invalid quantity."""


@dataclass
class ModelConfig:
    """Prior hyperparameters, noise level and model sizes.

    ``alpha``, ``mu`` and ``lam`` accept scalar shorthand: ``alpha`` and
    ``mu`` are broadcast, a scalar ``lam`` means ``lam * I``.
    """

    sigma2: float
    K: int = 100
    D: int = 10
    g: float = 0.75
    alpha: object = 0.01
    mu: object = 0.0
    lam: object = 1.0
    a: float = 1.0
    b: float = 100.0
    d_max: int = 30
    min_leaf_dim: int = 2
    template: Optional[NeighborTemplate] = None

    def __post_init__(self):
        if self.template is None:
            self.template = make_template(self.D)
        elif self.template.D != self.D:
            raise ValueError(f"template has D={self.template.D} but config says D={self.D}")
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if self.K < 1:
            raise ValueError(f"K must be >= 1, got {self.K}")
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")
        self.alpha = np.broadcast_to(np.asarray(self.alpha, dtype=np.float64), (self.K,)).copy()
        if np.any(self.alpha <= 0):
            raise ValueError("alpha entries must be positive")
        self.mu = np.broadcast_to(np.asarray(self.mu, dtype=np.float64), (self.D,)).copy()
        lam = np.asarray(self.lam, dtype=np.float64)
        self.lam = lam * np.eye(self.D) if lam.ndim == 0 else lam.copy()
        if self.lam.shape != (self.D, self.D) or not np.allclose(self.lam, self.lam.T):
            raise ValueError("lam must be a symmetric DxD matrix")
        try:
            np.linalg.cholesky(self.lam)
        except np.linalg.LinAlgError:
            raise ValueError("lam must be positive definite") from None

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma2)


@dataclass(frozen=True)
class PosteriorState:
    """Snapshot of all variational parameters.

    Per node ``s`` and label ``k``: ``ln_rho``, ``resp`` (``pi'_{s,k}``).
    Per node: ``log_phi``, ``g_prime`` with its logs ``log_g_prime`` and
    ``log_1m_g_prime`` (the latter computed directly, not as ``1 - g'``),
    and ``leaf_prob`` = ``q(s is a leaf)``.  Per label: ``alpha_prime``,
    ``lambda_prime`` (with cached inverse), ``mu_prime``, ``a_prime``,
    ``b_prime``.  Tree fields are ``None`` until the first ``q(z, T)`` update.
    """

    alpha_prime: np.ndarray
    lambda_prime: np.ndarray
    lambda_prime_inv: np.ndarray
    mu_prime: np.ndarray
    a_prime: np.ndarray
    b_prime: np.ndarray
    ln_rho: Optional[np.ndarray] = None
    resp: Optional[np.ndarray] = None
    log_phi: Optional[np.ndarray] = None
    g_prime: Optional[np.ndarray] = None
    log_g_prime: Optional[np.ndarray] = None
    log_1m_g_prime: Optional[np.ndarray] = None
    leaf_prob: Optional[np.ndarray] = field(default=None)

    @property
    def K(self) -> int:
        return self.alpha_prime.size

    def replace(self, **changes) -> "PosteriorState":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# Conjugate Normal-Gamma algebra
# --------------------------------------------------------------------------

def spd_inverse(M: np.ndarray, what: str = "matrix") -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky.

    On failure a diagonal jitter of ``1e-10 * trace / D`` is added and grown
    tenfold, at most three times.
    """
    D = M.shape[0]
    eye = np.eye(D)
    jitter = 1e-10 * np.trace(M) / D
    for attempt in range(4):
        A = M if attempt == 0 else M + jitter * 10 ** (attempt - 1) * eye
        try:
            c = linalg.cho_factor(A, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        inv = linalg.cho_solve(c, eye)
        return 0.5 * (inv + inv.T)
    raise VBNumericalError(f"{what} is not positive definite (Cholesky failed after jitter)")


def conjugate_posterior(config: ModelConfig, n, gram, cross, sqnorm):
    """Normal-Gamma posterior from (weighted) regression statistics.

    Returns ``(lambda_prime, lambda_prime_inv, mu_prime, a_prime, b_prime)``
    for one label.
    """
    lam_p = config.lam + gram
    lam_inv = spd_inverse(lam_p, "posterior precision")
    rhs = config.lam @ config.mu + cross
    mu_p = lam_inv @ rhs
    a_p = config.a + 0.5 * n
    b_p = config.b + 0.5 * (config.mu @ config.lam @ config.mu + sqnorm - mu_p @ lam_p @ mu_p)
    return lam_p, lam_inv, mu_p, a_p, b_p


# --------------------------------------------------------------------------
# q(z, T)
# --------------------------------------------------------------------------

def compute_ln_rho(stats: RegionStats, k: int, posterior: PosteriorState) -> float:
    """``ln rho_{s,k}`` for one region and label, from its statistics alone."""
    ap, bp, mu = posterior.a_prime[k], posterior.b_prime[k], posterior.mu_prime[k]
    quad = stats.sqnorm - 2.0 * stats.cross @ mu + mu @ stats.gram @ mu
    trace = np.sum(stats.gram * posterior.lambda_prime_inv[k])
    val = (digamma(posterior.alpha_prime[k]) - digamma(posterior.alpha_prime.sum())
           + 0.5 * stats.n * (-_LOG_2PI + digamma(ap) - math.log(bp))
           - 0.5 * ap / bp * quad - 0.5 * trace)
    if not np.isfinite(val):
        raise VBNumericalError(f"ln rho is not finite for label {k}")
    return float(val)


def _quad_and_trace(stats: NodeStats, posterior: PosteriorState):
    """Per (node, label): ``(v_s - V_s mu'_k)^T (...)`` and ``Tr{V_s^T V_s Lambda'_k^-1}``."""
    S = len(stats)
    mu = posterior.mu_prime
    D = mu.shape[1]
    gram_flat = stats.gram.reshape(S, D * D)
    mumu = (mu[:, :, None] * mu[:, None, :]).reshape(-1, D * D)
    quad = stats.sqnorm[:, None] - 2.0 * stats.cross @ mu.T + gram_flat @ mumu.T
    trace = gram_flat @ posterior.lambda_prime_inv.reshape(-1, D * D).T
    return quad, trace


def ln_rho_matrix(stats: NodeStats, posterior: PosteriorState) -> np.ndarray:
    """``ln rho`` for all nodes and labels, shape ``(n_nodes, K)``."""
    quad, trace = _quad_and_trace(stats, posterior)
    ap, bp = posterior.a_prime, posterior.b_prime
    log_pi = digamma(posterior.alpha_prime) - digamma(posterior.alpha_prime.sum())
    log_tau = digamma(ap) - np.log(bp)
    ln_rho = (log_pi[None, :] + 0.5 * stats.n[:, None] * (-_LOG_2PI + log_tau[None, :])
              - 0.5 * (ap / bp)[None, :] * quad - 0.5 * trace)
    bad = ~np.isfinite(ln_rho)
    if bad.any():
        s, k = np.argwhere(bad)[0]
        raise VBNumericalError(f"ln rho is not finite at node {s}, label {k}")
    return ln_rho


def softmax_rows(ln_rho: np.ndarray) -> np.ndarray:
    """Row-wise ``exp(x - logsumexp(x))``."""
    norm = logsumexp(ln_rho, axis=1, keepdims=True)
    if not np.all(np.isfinite(norm)):
        raise VBNumericalError("a ln rho row is entirely -inf")
    return np.exp(ln_rho - norm)


def update_responsibilities(stats: NodeStats, posterior: PosteriorState) -> PosteriorState:
    """Recompute ``ln rho`` and the softmax responsibilities ``pi'``."""
    ln_rho = ln_rho_matrix(stats, posterior)
    return posterior.replace(ln_rho=ln_rho, resp=softmax_rows(ln_rho))


def tree_distribution(tree: TreeMax, log_a: np.ndarray, log_b: np.ndarray):
    """Normalised tree distribution from unnormalised node weights.

    Given ``p(T)`` proportional to ``prod_{I_T} a_s prod_{L_T} b_s``, return
    ``(log_phi, log_g, log_1m_g)`` with ``p(T) = prod_{I_T} g_s prod_{L_T}
    (1 - g_s)``.  ``log_phi[root]`` is the log normaliser.  Entries of
    ``log_a`` on ``L_max`` are ignored.
    """
    S = tree.n_nodes
    log_phi = np.empty(S)
    log_g = np.full(S, -np.inf)
    log_1m_g = np.zeros(S)
    with np.errstate(invalid="ignore"):
        for level in reversed(tree.levels):
            leaf = level[tree.is_leaf[level]]
            log_phi[leaf] = log_b[leaf]
            internal = level[~tree.is_leaf[level]]
            if internal.size:
                split = log_a[internal] + log_phi[tree.children[internal]].sum(axis=1)
                stop = log_b[internal]
                lp = np.logaddexp(split, stop)
                log_phi[internal] = lp
                log_g[internal] = split - lp
                log_1m_g[internal] = stop - lp
    return log_phi, log_g, log_1m_g


def _log_reach(tree: TreeMax, log_g: np.ndarray) -> np.ndarray:
    """``sum of ln g`` over the strict ancestors of each node."""
    log_anc = np.zeros(tree.n_nodes)
    for level in tree.levels:
        internal = level[~tree.is_leaf[level]]
        if internal.size:
            log_anc[tree.children[internal]] = (log_anc[internal] + log_g[internal])[:, None]
    return log_anc


def leaf_probabilities(tree: TreeMax, log_g: np.ndarray, log_1m_g: np.ndarray) -> np.ndarray:
    """``q(s is a leaf) = (1 - g_s) prod_{ancestors} g_{s'}``, accumulated in logs."""
    return np.exp(_log_reach(tree, log_g) + log_1m_g)


def update_tree_posterior(posterior: PosteriorState, tree: TreeMax, g) -> PosteriorState:
    """Posterior split probabilities ``g'`` and leaf probabilities from ``ln rho``."""
    if posterior.ln_rho is None:
        raise ValueError("ln_rho must be populated before the tree update")
    gs = split_prior(tree, g)
    lse = logsumexp(posterior.ln_rho, axis=1)
    with np.errstate(divide="ignore"):
        log_a = np.log(gs)
        log_b = np.where(tree.is_leaf, lse, np.log1p(-gs) + lse)
    log_phi, log_g, log_1m_g = tree_distribution(tree, log_a, log_b)
    return posterior.replace(
        log_phi=log_phi, g_prime=np.exp(log_g), log_g_prime=log_g, log_1m_g_prime=log_1m_g,
        leaf_prob=leaf_probabilities(tree, log_g, log_1m_g))


# --------------------------------------------------------------------------
# q(theta, tau, pi)
# --------------------------------------------------------------------------

def update_global_posterior(stats: NodeStats, posterior: PosteriorState,
                            config: ModelConfig) -> PosteriorState:
    """Dirichlet and per-label Normal-Gamma updates, weighted by
    ``q(s is a leaf) * pi'_{s,k}``."""
    if posterior.resp is None or posterior.leaf_prob is None:
        raise ValueError("resp and leaf_prob must be populated before the global update")
    S = len(stats)
    D = config.D
    w = posterior.leaf_prob[:, None] * posterior.resp
    n_k = w.T @ stats.n
    gram_k = (w.T @ stats.gram.reshape(S, D * D)).reshape(-1, D, D)
    cross_k = w.T @ stats.cross
    sq_k = w.T @ stats.sqnorm

    K = w.shape[1]
    lam_p = np.empty((K, D, D))
    lam_inv = np.empty((K, D, D))
    mu_p = np.empty((K, D))
    a_p = np.empty(K)
    b_p = np.empty(K)
    for k in range(K):
        lam_p[k], lam_inv[k], mu_p[k], a_p[k], b_p[k] = conjugate_posterior(
            config, n_k[k], gram_k[k], cross_k[k], sq_k[k])
    if np.any(~(b_p > 0)):
        k = int(np.flatnonzero(~(b_p > 0))[0])
        raise VBNumericalError(f"b' for label {k} is not positive ({b_p[k]})")
    return posterior.replace(alpha_prime=config.alpha + w.sum(axis=0), lambda_prime=lam_p,
                             lambda_prime_inv=lam_inv, mu_prime=mu_p, a_prime=a_p, b_prime=b_p)


def vb_sweep(tree: TreeMax, stats: NodeStats, posterior: PosteriorState,
             config: ModelConfig) -> PosteriorState:
    """One cycle: responsibilities, tree posterior, then global posterior."""
    post = update_responsibilities(stats, posterior)
    post = update_tree_posterior(post, tree, config.g)
    return update_global_posterior(stats, post, config)


def run_vb(tree: TreeMax, stats: NodeStats, posterior: PosteriorState, config: ModelConfig,
           tol: float = 1e-8, max_sweeps: int = 500):
    """Iterate :func:`vb_sweep` at fixed statistics.

    Stops when the largest absolute change of ``resp`` and ``g'`` between
    consecutive sweeps falls below ``tol``.

    Returns
    -------
    posterior : PosteriorState
    sweeps : int
    converged : bool
    """
    post = vb_sweep(tree, stats, posterior, config)
    for sweep in range(2, max_sweeps + 1):
        new = vb_sweep(tree, stats, post, config)
        change = max(np.max(np.abs(new.resp - post.resp)),
                     np.max(np.abs(new.g_prime - post.g_prime)))
        post = new
        if change < tol:
            return post, sweep, True
    return post, max_sweeps, False


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------

def surrogate_objective(current, observed, posterior: PosteriorState, stats: NodeStats,
                        config: ModelConfig) -> float:
    """``ln p(v' | v)`` plus the ``v``-dependent part of the lower bound.

    Terms that do not depend on ``v`` at fixed posterior are dropped, so
    values are only comparable between images under one posterior.
    """
    v = np.asarray(current, dtype=np.float64)
    vobs = np.asarray(observed, dtype=np.float64)
    gauss = -0.5 * v.size * math.log(2.0 * math.pi * config.sigma2) \
        - 0.5 * float(np.sum((vobs - v) ** 2)) / config.sigma2
    quad, trace = _quad_and_trace(stats, posterior)
    c = posterior.a_prime / posterior.b_prime
    w = posterior.leaf_prob[:, None] * posterior.resp
    val = gauss + float(np.sum(w * (-0.5 * c[None, :] * quad - 0.5 * trace)))
    if not math.isfinite(val):
        raise VBNumericalError("surrogate objective is not finite")
    return val


def _kl_dirichlet(alpha_q, alpha_p) -> float:
    sq, sp = alpha_q.sum(), alpha_p.sum()
    return float(gammaln(sq) - gammaln(alpha_q).sum() - gammaln(sp) + gammaln(alpha_p).sum()
                 + np.sum((alpha_q - alpha_p) * (digamma(alpha_q) - digamma(sq))))


def _kl_normal_gamma(posterior: PosteriorState, config: ModelConfig) -> np.ndarray:
    """Per-label KL from ``NG(mu', Lambda', a', b')`` to the prior ``NG(mu, Lambda, a, b)``."""
    a, b, lam, mu = config.a, config.b, config.lam, config.mu
    ap, bp = posterior.a_prime, posterior.b_prime
    kl_gamma = ((ap - a) * digamma(ap) - gammaln(ap) + gammaln(a)
                + a * (np.log(bp) - np.log(b)) + ap * (b - bp) / bp)
    _, logdet_p = np.linalg.slogdet(lam)
    _, logdet_q = np.linalg.slogdet(posterior.lambda_prime)
    diff = posterior.mu_prime - mu[None, :]
    maha = np.einsum("kd,de,ke->k", diff, lam, diff)
    tr = np.einsum("de,ked->k", lam, posterior.lambda_prime_inv)
    kl_gauss = 0.5 * (tr + ap / bp * maha - config.D + logdet_q - logdet_p)
    return kl_gamma + kl_gauss


def _xlogy(x, logy):
    return np.where(x > 0, x * np.where(x > 0, logy, 0.0), 0.0)


def lower_bound(tree: TreeMax, stats: NodeStats, posterior: PosteriorState,
                config: ModelConfig) -> float:
    """Full variational lower bound ``E_q[ln p(v, z, T, theta, tau, pi)] - E_q[ln q]``
    for the current posterior and image (through ``stats``)."""
    ln_rho = ln_rho_matrix(stats, posterior)
    w = posterior.leaf_prob[:, None] * posterior.resp
    with np.errstate(divide="ignore"):
        log_resp = np.log(posterior.resp)
        gs = split_prior(tree, config.g)
        log_g, log_1m_g = np.log(gs), np.log1p(-gs)
    data = float(np.sum(w * ln_rho) - np.sum(_xlogy(w, log_resp)))

    # E_q(T)[ln p(T) - ln q(T)]; node s is in T with prob. reach_s, then internal w.p. g'_s
    reach = np.exp(_log_reach(tree, posterior.log_g_prime))
    p_int = reach * posterior.g_prime
    with np.errstate(invalid="ignore"):
        tree_term = float(
            np.sum(_xlogy(p_int, log_g - posterior.log_g_prime))
            + np.sum(_xlogy(posterior.leaf_prob, log_1m_g - posterior.log_1m_g_prime)))
    return (data + tree_term - _kl_dirichlet(posterior.alpha_prime, config.alpha)
            - float(np.sum(_kl_normal_gamma(posterior, config))))


def objective(current, observed, tree: TreeMax, stats: NodeStats, posterior: PosteriorState,
              config: ModelConfig) -> float:
    """``ln p(v' | v)`` plus the full lower bound; the quantity gradient ascent climbs."""
    v = np.asarray(current, dtype=np.float64)
    vobs = np.asarray(observed, dtype=np.float64)
    gauss = -0.5 * v.size * math.log(2.0 * math.pi * config.sigma2) \
        - 0.5 * float(np.sum((vobs - v) ** 2)) / config.sigma2
    val = gauss + lower_bound(tree, stats, posterior, config)
    if not math.isfinite(val):
        raise VBNumericalError("objective is not finite")
    return val


def write_posterior(posterior: PosteriorState, path) -> None:
    """Dump the posterior as plain text with 17 significant digits."""
    fmt = lambda a: " ".join(f"{x:.17g}" for x in np.ravel(a))  # noqa: E731
    with open(path, "w") as fh:
        K = posterior.K
        fh.write(f"# posterior labels={K}\n")
        for k in range(K):
            fh.write(f"[label {k}]\n")
            fh.write(f"alpha_prime = {posterior.alpha_prime[k]:.17g}\n")
            fh.write(f"a_prime = {posterior.a_prime[k]:.17g}\n")
            fh.write(f"b_prime = {posterior.b_prime[k]:.17g}\n")
            fh.write(f"mu_prime = {fmt(posterior.mu_prime[k])}\n")
            fh.write(f"lambda_prime = {fmt(posterior.lambda_prime[k])}\n")
        if posterior.resp is not None:
            for s in range(posterior.resp.shape[0]):
                fh.write(f"[node {s}]\n")
                fh.write(f"g_prime = {posterior.g_prime[s]:.17g}\n")
                fh.write(f"leaf_prob = {posterior.leaf_prob[s]:.17g}\n")
                fh.write(f"resp = {fmt(posterior.resp[s])}\n")
