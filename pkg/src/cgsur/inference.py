"""Stochastic variational training of the generative surrogate.

The variational family is a structured mean field: a point estimate for the
model parameters, diagonal Gaussians for every per-datum latent, and for
query points a Gaussian over the fine solution y that is never updated by
gradient steps. Linear virtual observables give q(y) in closed form through
a low-rank (Woodbury) update; energy observables give a quadratic target
handled by a randomized block-Newton scheme; learned constraint precisions
get conjugate Gamma updates. Everything else follows the reparametrized
Monte Carlo ELBO with Adam.

Gradients of the Monte Carlo objective are chained by hand through the
model's *_grads methods; the coarse solve contributes through its adjoint.
ELBO term functions accept an explicit noise bundle so common-random-number
finite differencing stays exact in tests.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import scipy.linalg

from . import fem, vobs
from .approximators import Approximator, mlp
from .errors import Divergence, IllConditioned, NonFiniteLoss
from .field import BoundaryCoeffs
from .gaussians import (
    LOG_2PI,
    entropy_diag,
    standard_logpdf_expectation,
)
from .genmodel import GenerativeModel
from .seeding import derive_rng
from .vobs import EnergyObservable, GammaPosterior, LinearConstraintSet

QY_ROW_CAP = 1024  # guard on the number of stacked constraint rows


# ---------------------------------------------------------------------------
# q(y) representations
# ---------------------------------------------------------------------------


@dataclass
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def sample(self, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal(self.mean.size)

    def var_diag(self):
        return self.var

    def entropy(self):
        return entropy_diag(self.var)


class LowRankGaussian:
    """N(mu, Sigma) with Sigma = diag(sbar) - A^T A, A = L^{-1} Gamma diag(sbar).

    The result of conditioning N(h_mean, diag(sbar)) on Gamma y = alpha
    observed with noise precision Lambda; L is the Cholesky factor of
    Xi = Gamma diag(sbar) Gamma^T + Lambda^{-1}. Exactly enforced rows
    (Lambda^{-1} = 0) leave a singular covariance whose null directions are
    pinned to the constraint manifold.
    """

    def __init__(self, mean, sbar, gamma, a_mat, exact: bool):
        self.mean = mean
        self.sbar = sbar
        self.gamma = gamma
        self._a = a_mat
        self.exact = exact
        self._sqrt_parts = None

    def var_diag(self):
        return np.maximum(self.sbar - np.sum(self._a**2, axis=0), 0.0)

    def _sqrt(self):
        if self._sqrt_parts is None:
            b = self._a / np.sqrt(self.sbar)[None, :]
            _, s, vt = np.linalg.svd(b, full_matrices=False)
            scale = np.sqrt(np.clip(1.0 - s**2, 0.0, None)) - 1.0
            self._sqrt_parts = (vt, scale)
        return self._sqrt_parts

    def sample(self, rng):
        vt, scale = self._sqrt()
        eps = rng.standard_normal(self.mean.size)
        w = eps + vt.T @ (scale * (vt @ eps))
        return self.mean + np.sqrt(self.sbar) * w

    def second_moment(self, gamma_rows, alpha_rows):
        """E || gamma_rows y - alpha_rows ||^2 under this Gaussian."""
        r = gamma_rows @ self.mean - alpha_rows
        t = self._a @ gamma_rows.T
        trace = float(np.sum(gamma_rows**2 * self.sbar[None, :]) - np.sum(t**2))
        return float(r @ r) + max(trace, 0.0)

    def entropy(self):
        if self.exact:
            return float("-inf")
        b = self._a / np.sqrt(self.sbar)[None, :]
        _, s, _ = np.linalg.svd(b, full_matrices=False)
        logdet = float(np.sum(np.log(self.sbar))) + float(
            np.sum(np.log(np.clip(1.0 - s**2, 1e-300, None)))
        )
        return 0.5 * (self.mean.size * (LOG_2PI + 1.0) + logdet)


def update_qy_closedform(
    cs, sy_var_diag, h_mean, gamma_posteriors=None
) -> LowRankGaussian:
    """Closed-form mean-field update of q(y) for linear virtual observables.

    Implements the precision-form optimum
        Sigma^{-1} = Gamma^T Lambda Gamma + diag(1/sy),
        Sigma^{-1} mu = Gamma^T Lambda alpha + diag(1/sy) h_mean
    through the Woodbury identity with Xi = Gamma S Gamma^T + Lambda^{-1};
    exactly enforced rows take the Lambda^{-1} = 0 limit.

    cs may be one LinearConstraintSet or a list to stack (hybrid bundles).
    """
    sets = cs if isinstance(cs, (list, tuple)) else [cs]
    if len(sets) == 0 or sum(s.m for s in sets) == 0:
        return DiagGaussian(mean=h_mean.copy(), var=sy_var_diag.copy())
    gamma, alpha, lam_inv = vobs.stack_sets(list(sets), gamma_posteriors)
    if gamma.shape[0] > QY_ROW_CAP:
        raise ValueError(
            f"{gamma.shape[0]} constraint rows exceed the configured cap {QY_ROW_CAP}"
        )
    sbar = np.asarray(sy_var_diag, dtype=np.float64)
    gs = gamma * sbar[None, :]
    xi = gs @ gamma.T + np.diag(lam_inv)
    try:
        low = scipy.linalg.cholesky(xi, lower=True)
    except scipy.linalg.LinAlgError:
        jitter = 1e-10 * float(np.trace(xi)) / xi.shape[0]
        try:
            low = scipy.linalg.cholesky(xi + jitter * np.eye(xi.shape[0]), lower=True)
        except scipy.linalg.LinAlgError as e:
            raise IllConditioned(f"Xi Cholesky failed: {e}") from None
    a_mat = scipy.linalg.solve_triangular(low, gs, lower=True)
    u = scipy.linalg.solve_triangular(low, alpha - gamma @ h_mean, lower=True)
    mean = h_mean + a_mat.T @ u
    return LowRankGaussian(
        mean=mean,
        sbar=sbar,
        gamma=gamma,
        a_mat=a_mat,
        exact=bool(np.any(lam_inv == 0.0)),
    )


def update_precision_gamma(
    second_moments, m: int, alpha0: float = 1e-6, beta0: float = 1e-6
) -> GammaPosterior:
    """Conjugate update for a precision shared by m rows at every query point.

    alpha = N_O m / 2 + alpha0,  beta = 0.5 sum_i E||o^(i)||^2 + beta0.
    """
    moments = np.asarray(list(second_moments), dtype=np.float64)
    if np.any(moments < 0.0):
        raise ValueError("residual second moments must be nonnegative")
    return GammaPosterior(
        alpha=0.5 * m * moments.size + alpha0,
        beta=0.5 * float(moments.sum()) + beta0,
    )


def update_qy_energy(
    obs: EnergyObservable,
    sy_inv_diag,
    h_mean,
    q_init: DiagGaussian | None = None,
    steps: int = 200,
    block: int = 64,
    rng: np.random.Generator | None = None,
    tol: float = 1e-12,
) -> DiagGaussian:
    """Mean-field q(y) for the energy observable via randomized block Newton.

    The exact stationary point solves (diag(sy_inv) + tau K) mu
    = tau f + diag(sy_inv) h_mean; each sweep visits all coordinates in
    random blocks, solving every block subsystem exactly, so the quadratic
    objective cannot increase. Variances are the mean-field fixed point
    1 / diag(Sigma^{-1}).
    """
    rng = rng or np.random.default_rng(0)
    sy_inv = np.asarray(sy_inv_diag, dtype=np.float64)
    n = sy_inv.size
    K = obs.system.K
    dense = isinstance(K, np.ndarray)
    diag_a = sy_inv + obs.tau * (np.diag(K) if dense else K.diagonal())
    rhs = obs.tau * obs.system.f_vec + sy_inv * h_mean

    def matvec(v):
        return sy_inv * v + obs.tau * (K @ v)

    mu = (q_init.mean if q_init is not None else h_mean).copy()
    residual = rhs - matvec(mu)
    obj = 0.5 * float(mu @ (matvec(mu))) - float(rhs @ mu)
    rhs_norm = max(float(np.linalg.norm(rhs)), 1e-300)
    for _ in range(steps):
        if np.linalg.norm(residual) <= tol * rhs_norm:
            break
        order = rng.permutation(n)
        for start in range(0, n, block):
            idx = order[start : start + block]
            if dense:
                a_bb = obs.tau * K[np.ix_(idx, idx)]
            else:
                a_bb = obs.tau * np.asarray(K[idx][:, idx].todense())
            a_bb[np.diag_indices_from(a_bb)] += sy_inv[idx]
            delta = np.linalg.solve(a_bb, residual[idx])
            mu[idx] += delta
            if dense:
                residual -= obs.tau * (K[:, idx] @ delta)
            else:
                residual -= obs.tau * np.asarray(K[:, idx] @ delta).ravel()
            residual[idx] -= sy_inv[idx] * delta
        new_obj = 0.5 * float(mu @ matvec(mu)) - float(rhs @ mu)
        if new_obj > obj + 1e-10 * (1.0 + abs(obj)):
            raise Divergence(
                f"energy update objective increased: {obj:.6e} -> {new_obj:.6e}"
            )
        obj = new_obj
    return DiagGaussian(mean=mu, var=1.0 / diag_a)


# ---------------------------------------------------------------------------
# datasets, configuration and state
# ---------------------------------------------------------------------------


@dataclass
class LabeledData:
    lambdas: np.ndarray
    ys: np.ndarray
    bcs: np.ndarray

    def __len__(self):
        return self.lambdas.shape[0]


@dataclass
class UnlabeledData:
    lambdas: np.ndarray
    bcs: np.ndarray | None = None

    def __len__(self):
        return self.lambdas.shape[0]


@dataclass
class VirtualData:
    """Query inputs with their observables.

    observables[i] is either a list of LinearConstraintSet or one
    EnergyObservable for query i.
    """

    lambdas: np.ndarray
    bcs: np.ndarray
    observables: list

    def __len__(self):
        return self.lambdas.shape[0]

    def is_energy(self, i: int) -> bool:
        return isinstance(self.observables[i], EnergyObservable)


@dataclass
class TrainConfig:
    iterations: int = 20000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mc_samples: int = 1
    unlabeled_batch: int = 64
    theta_prior_scale: float = 10.0
    cadence: int = 50
    plateau_window: int = 500
    plateau_tol: float = 1e-4
    tau_start: float = 1.0
    tau_end: float = 1e4
    energy_block: int = 64
    energy_sweeps: int = 50
    qy_mc: int = 8
    amortized: bool = False
    encoder_hidden: tuple = (256, 128)
    equalize_unlabeled: bool = True
    weight_labeled: float = 1.0
    weight_unlabeled: float = 1.0
    weight_virtual: float = 1.0
    seed: int = 0
    log_every: int = 25

    def __post_init__(self):
        if self.learning_rate <= 0 or self.mc_samples < 1:
            raise ValueError("learning rate must be positive and mc_samples >= 1")


class VariationalState:
    """Everything the trainer adapts: theta_MAP, factors, q(y), precisions."""

    def __init__(self, model: GenerativeModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.factors: dict[str, np.ndarray] = {}
        self.enc_mu: Approximator | None = None
        self.enc_logvar: Approximator | None = None
        self.qy: list = []
        self.gamma_posteriors: dict[str, GammaPosterior] = {}
        self.iteration = 0

    def theta_arrays(self) -> dict:
        out = self.model.params.arrays()
        if self.enc_mu is not None:
            out["enc_mu"] = self.enc_mu.params
            out["enc_logvar"] = self.enc_logvar.params
        return out

    def adam_arrays(self) -> dict:
        return {**self.theta_arrays(), **self.factors}

    def encode(self, x: np.ndarray):
        """Amortized posterior parameters (mu, log-variance) with tapes."""
        mu, tape_mu = self.enc_mu.forward(x)
        rho, tape_rho = self.enc_logvar.forward(x)
        return mu, rho, tape_mu, tape_rho


def _block_average(lam: np.ndarray, d_f: int, d_c: int) -> np.ndarray:
    r = d_f // d_c
    return lam.reshape(d_c, r, d_c, r).mean(axis=(1, 3)).ravel()


def init_state(
    model: GenerativeModel,
    config: TrainConfig,
    labeled: LabeledData | None,
    unlabeled: UnlabeledData | None,
    virtual: VirtualData | None,
) -> VariationalState:
    """Data-informed starting point for the variational parameters.

    The coarse-map bias and per-datum q(X) means start at block averages of
    the observed log-conductivity, and the output variance starts at the
    empirical variance of the labeled solutions.
    """
    state = VariationalState(model, config)
    dz, dX = model.dim_z, model.dim_X

    all_lams = [d.lambdas for d in (labeled, unlabeled, virtual) if d is not None]
    if all_lams:
        stacked = np.vstack(all_lams)
        blocks = np.array(
            [_block_average(lam, model.d_f, model.d_c) for lam in stacked]
        )
        model.params.b_g[:] = blocks.mean(axis=0)
    if labeled is not None and len(labeled) >= 2:
        var_y = labeled.ys.var(axis=0) + 1e-6
        model.params.log_S_y[:] = np.log(var_y)

    if labeled is not None:
        n = len(labeled)
        state.factors["mu_z_l"] = np.zeros((n, dz))
        state.factors["rho_z_l"] = np.full((n, dz), np.log(0.1))
        state.factors["mu_X_l"] = np.array(
            [_block_average(lam, model.d_f, model.d_c) for lam in labeled.lambdas]
        )
        state.factors["rho_X_l"] = np.full((n, dX), np.log(0.01))
    if virtual is not None:
        n = len(virtual)
        state.factors["mu_z_o"] = np.zeros((n, dz))
        state.factors["rho_z_o"] = np.full((n, dz), np.log(0.1))
        state.factors["mu_X_o"] = np.array(
            [_block_average(lam, model.d_f, model.d_c) for lam in virtual.lambdas]
        )
        state.factors["rho_X_o"] = np.full((n, dX), np.log(0.01))
        state.qy = [None] * n
        if any(
            isinstance(obs, list)
            and any(isinstance(cs.precision, vobs.Learned) for cs in obs)
            for obs in virtual.observables
        ):
            state.gamma_posteriors["flux"] = GammaPosterior(alpha=1e-6, beta=1e-6)
    if unlabeled is not None:
        if config.amortized:
            state.enc_mu = mlp(
                model.dim_x,
                hidden=config.encoder_hidden,
                output_dim=dz,
                seed=config.seed + 1,
            )
            state.enc_logvar = mlp(
                model.dim_x,
                hidden=config.encoder_hidden,
                output_dim=dz,
                seed=config.seed + 2,
            )
            # start near the prior: zero mean head, moderate variance
            state.enc_logvar.params[-dz:] = np.log(0.5)
        else:
            n = len(unlabeled)
            state.factors["mu_z_u"] = np.zeros((n, dz))
            state.factors["rho_z_u"] = np.full((n, dz), np.log(0.1))
    return state


# ---------------------------------------------------------------------------
# ELBO terms
# ---------------------------------------------------------------------------


class GradStore(dict):
    def add(self, key, value):
        if key in self:
            self[key] = self[key] + value
        else:
            self[key] = np.array(value, dtype=np.float64)


def _q_draw(mu, rho, eps):
    std = np.exp(0.5 * rho)
    return mu + std * eps, std


def _factor_grads_from_sample(g_latent, mu, rho, eps, std):
    """Gradients of (MC conditional terms + closed-form prior/entropy) for a
    diagonal Gaussian factor sampled as mu + exp(rho/2) eps."""
    var = std * std
    dmu = g_latent - mu  # -mu from E[log p(z)]
    drho = g_latent * (0.5 * std * eps) - 0.5 * var + 0.5
    return dmu, drho


def elbo_unlabeled(
    state: VariationalState,
    lambdas: np.ndarray,
    rng: np.random.Generator,
    indices=None,
    noise=None,
    scale: float = 1.0,
):
    """Monte Carlo estimate of the unlabeled ELBO block with gradients.

    Likelihood terms are reparametrized MC; the prior cross term and the
    entropy are closed forms. Returns (value, theta_grads, factor_grads).
    """
    model = state.model
    cfg = state.config
    n = lambdas.shape[0]
    amortized = state.enc_mu is not None
    theta = GradStore()
    factors = GradStore()
    if not amortized:
        idx = np.arange(n) if indices is None else np.asarray(indices)
        g_mu = np.zeros((n, model.dim_z))
        g_rho = np.zeros((n, model.dim_z))
    value = 0.0
    for i in range(n):
        x = lambdas[i]
        if amortized:
            mu, rho, tape_mu, tape_rho = state.encode(x)
        else:
            mu = state.factors["mu_z_u"][idx[i]]
            rho = state.factors["rho_z_u"][idx[i]]
        var = np.exp(rho)
        acc_gz = np.zeros(model.dim_z)
        acc_gz_eps = np.zeros(model.dim_z)
        lik = 0.0
        eps_block = (
            noise[i]
            if noise is not None
            else rng.standard_normal((cfg.mc_samples, model.dim_z))
        )
        for k in range(cfg.mc_samples):
            eps = eps_block[k]
            z, std = _q_draw(mu, rho, eps)
            lp, gz, gdec = model.logp_x_given_z_grads(x, z)
            lik += lp / cfg.mc_samples
            acc_gz += gz / cfg.mc_samples
            acc_gz_eps += gz * eps / cfg.mc_samples
            theta.add("decoder", scale * gdec["decoder"] / cfg.mc_samples)
        value += lik + standard_logpdf_expectation(mu, var) + entropy_diag(var)
        std = np.exp(0.5 * rho)
        dmu = acc_gz - mu
        drho = 0.5 * std * acc_gz_eps - 0.5 * var + 0.5
        if amortized:
            g_enc_mu, _ = state.enc_mu.backward(tape_mu, dmu)
            g_enc_rho, _ = state.enc_logvar.backward(tape_rho, drho)
            theta.add("enc_mu", scale * g_enc_mu)
            theta.add("enc_logvar", scale * g_enc_rho)
        else:
            g_mu[i] = dmu
            g_rho[i] = drho
    if not amortized and n:
        factors.add("mu_z_u", scale * g_mu)
        factors.add("rho_z_u", scale * g_rho)
    return scale * value, theta, factors


def _latent_pair_terms(model, x, z, X, theta, scale, mc):
    """Shared x|z and X|z contributions; returns (value, gz, gX)."""
    lp_x, gz_x, gdec = model.logp_x_given_z_grads(x, z)
    lp_X, gX_X, gz_X, gcm = model.logp_X_given_z_grads(X, z)
    theta.add("decoder", scale * gdec["decoder"] / mc)
    for key, val in gcm.items():
        theta.add(key, scale * val / mc)
    return lp_x + lp_X, gz_x + gz_X, gX_X


def elbo_labeled(
    state: VariationalState,
    lambdas: np.ndarray,
    ys: np.ndarray,
    bcs: np.ndarray,
    rng: np.random.Generator,
    indices=None,
    noise=None,
    scale: float = 1.0,
):
    """Labeled ELBO block: the coarse solve sits inside log p(y | X)."""
    model = state.model
    cfg = state.config
    n = lambdas.shape[0]
    idx = np.arange(n) if indices is None else np.asarray(indices)
    theta = GradStore()
    factors = GradStore()
    g = {
        "mu_z_l": np.zeros((n, model.dim_z)),
        "rho_z_l": np.zeros((n, model.dim_z)),
        "mu_X_l": np.zeros((n, model.dim_X)),
        "rho_X_l": np.zeros((n, model.dim_X)),
    }
    value = 0.0
    for i in range(n):
        x, y = lambdas[i], ys[i]
        bc = BoundaryCoeffs.from_array(bcs[i])
        mu_z = state.factors["mu_z_l"][idx[i]]
        rho_z = state.factors["rho_z_l"][idx[i]]
        mu_X = state.factors["mu_X_l"][idx[i]]
        rho_X = state.factors["rho_X_l"][idx[i]]
        eps_z_blk = (
            noise["z"][i]
            if noise is not None
            else rng.standard_normal((cfg.mc_samples, model.dim_z))
        )
        eps_X_blk = (
            noise["X"][i]
            if noise is not None
            else rng.standard_normal((cfg.mc_samples, model.dim_X))
        )
        acc_gz = np.zeros(model.dim_z)
        acc_gX = np.zeros(model.dim_X)
        acc_gz_eps = np.zeros(model.dim_z)
        acc_gX_eps = np.zeros(model.dim_X)
        lik = 0.0
        for k in range(cfg.mc_samples):
            eps_z, eps_X = eps_z_blk[k], eps_X_blk[k]
            z, std_z = _q_draw(mu_z, rho_z, eps_z)
            X, std_X = _q_draw(mu_X, rho_X, eps_X)
            lp_y, gX_y, gy_theta = model.logp_y_given_X_grads(y, X, bc)
            for key, val in gy_theta.items():
                theta.add(key, scale * val / cfg.mc_samples)
            pair_val, gz_pair, gX_pair = _latent_pair_terms(
                model, x, z, X, theta, scale, cfg.mc_samples
            )
            gX_tot = gX_y + gX_pair
            lik += (lp_y + pair_val) / cfg.mc_samples
            acc_gz += gz_pair / cfg.mc_samples
            acc_gX += gX_tot / cfg.mc_samples
            acc_gz_eps += gz_pair * eps_z / cfg.mc_samples
            acc_gX_eps += gX_tot * eps_X / cfg.mc_samples
        var_z, var_X = np.exp(rho_z), np.exp(rho_X)
        value += (
            lik
            + standard_logpdf_expectation(mu_z, var_z)
            + entropy_diag(var_z)
            + entropy_diag(var_X)
        )
        std_z, std_X = np.exp(0.5 * rho_z), np.exp(0.5 * rho_X)
        g["mu_z_l"][i] = acc_gz - mu_z
        g["rho_z_l"][i] = 0.5 * std_z * acc_gz_eps - 0.5 * var_z + 0.5
        g["mu_X_l"][i] = acc_gX
        g["rho_X_l"][i] = 0.5 * std_X * acc_gX_eps + 0.5
    for key, arr in g.items():
        factors.add(key, scale * arr)
    return scale * value, theta, factors


def expected_constraint_loglik(cs: LinearConstraintSet, qy, gamma_posteriors=None):
    """Analytic E_q(y)[log p(o-hat | y)] for one finite-precision set.

    For exactly enforced rows the term is a constant of the conditioning and
    is dropped (returns 0). For per-row precisions lambda_m the value is
    -0.5 sum_m lambda_m E[o_m^2] + 0.5 sum_m E[log lambda_m] - (M/2) log 2pi.
    """
    if isinstance(cs.precision, vobs.Exact):
        return 0.0
    if isinstance(cs.precision, vobs.Fixed):
        lam = np.asarray(cs.precision.lam, dtype=np.float64)
        elog = np.log(lam)
    else:
        post = (gamma_posteriors or {})[cs.precision.group]
        lam = np.full(cs.m, post.mean())
        elog = np.full(cs.m, post.expected_log())
    if isinstance(qy, LowRankGaussian):
        if np.all(lam == lam[0]):
            weighted_sq = lam[0] * qy.second_moment(cs.gamma, cs.alpha)
        else:
            weighted_sq = sum(
                lam[m] * qy.second_moment(cs.gamma[m : m + 1], cs.alpha[m : m + 1])
                for m in range(cs.m)
            )
    else:
        r = cs.gamma @ qy.mean - cs.alpha
        sq_rows = r * r + np.sum(cs.gamma**2 * qy.var[None, :], axis=1)
        weighted_sq = float(lam @ sq_rows)
    return -0.5 * weighted_sq + 0.5 * float(np.sum(elog)) - 0.5 * cs.m * LOG_2PI


def _constraint_likelihood_value(sets, qy, gamma_posteriors):
    """Finite-precision likelihood terms plus the q(y) entropy when finite.

    For exact rows both the likelihood and the entropy along the constrained
    directions are infinite with opposite signs and cancel; both are dropped
    from the reported value."""
    value = 0.0
    if isinstance(qy, LowRankGaussian) and not qy.exact:
        value += qy.entropy()
    elif isinstance(qy, DiagGaussian):
        value += qy.entropy()
    for cs in sets:
        value += expected_constraint_loglik(cs, qy, gamma_posteriors)
    return value


def _energy_likelihood_value(obs: EnergyObservable, qy: DiagGaussian):
    """E_q[-tau V(y)] for diagonal q plus its entropy; constants dropped."""
    K = obs.system.K
    diag_k = np.diag(K) if isinstance(K, np.ndarray) else K.diagonal()
    quad = float(qy.mean @ (K @ qy.mean)) + float(diag_k @ qy.var)
    return -obs.tau * (0.5 * quad - float(obs.system.f_vec @ qy.mean)) + qy.entropy()


def elbo_virtual(
    state: VariationalState,
    lambdas: np.ndarray,
    bcs: np.ndarray,
    observables: list,
    rng: np.random.Generator,
    indices=None,
    noise=None,
    scale: float = 1.0,
):
    """Virtual-observable ELBO block.

    q(y) is sampled, never reparametrized: its parameters are maintained by
    the closed-form / energy updates, so gradients here flow only to theta
    and the (z, X) factors.
    """
    model = state.model
    cfg = state.config
    n = lambdas.shape[0]
    idx = np.arange(n) if indices is None else np.asarray(indices)
    theta = GradStore()
    factors = GradStore()
    g = {
        "mu_z_o": np.zeros((n, model.dim_z)),
        "rho_z_o": np.zeros((n, model.dim_z)),
        "mu_X_o": np.zeros((n, model.dim_X)),
        "rho_X_o": np.zeros((n, model.dim_X)),
    }
    value = 0.0
    for i in range(n):
        x = lambdas[i]
        bc = BoundaryCoeffs.from_array(bcs[i])
        obs = observables[i]
        qy = state.qy[idx[i]]
        mu_z = state.factors["mu_z_o"][idx[i]]
        rho_z = state.factors["rho_z_o"][idx[i]]
        mu_X = state.factors["mu_X_o"][idx[i]]
        rho_X = state.factors["rho_X_o"][idx[i]]
        eps_z_blk = (
            noise["z"][i]
            if noise is not None
            else rng.standard_normal((cfg.mc_samples, model.dim_z))
        )
        eps_X_blk = (
            noise["X"][i]
            if noise is not None
            else rng.standard_normal((cfg.mc_samples, model.dim_X))
        )
        acc_gz = np.zeros(model.dim_z)
        acc_gX = np.zeros(model.dim_X)
        acc_gz_eps = np.zeros(model.dim_z)
        acc_gX_eps = np.zeros(model.dim_X)
        lik = 0.0
        for k in range(cfg.mc_samples):
            eps_z, eps_X = eps_z_blk[k], eps_X_blk[k]
            z, _ = _q_draw(mu_z, rho_z, eps_z)
            X, _ = _q_draw(mu_X, rho_X, eps_X)
            y_s = noise["y"][i][k] if noise is not None else qy.sample(rng)
            lp_y, gX_y, gy_theta = model.logp_y_given_X_grads(y_s, X, bc)
            for key, val in gy_theta.items():
                theta.add(key, scale * val / cfg.mc_samples)
            pair_val, gz_pair, gX_pair = _latent_pair_terms(
                model, x, z, X, theta, scale, cfg.mc_samples
            )
            gX_tot = gX_y + gX_pair
            lik += (lp_y + pair_val) / cfg.mc_samples
            acc_gz += gz_pair / cfg.mc_samples
            acc_gX += gX_tot / cfg.mc_samples
            acc_gz_eps += gz_pair * eps_z / cfg.mc_samples
            acc_gX_eps += gX_tot * eps_X / cfg.mc_samples
        var_z, var_X = np.exp(rho_z), np.exp(rho_X)
        value += (
            lik
            + standard_logpdf_expectation(mu_z, var_z)
            + entropy_diag(var_z)
            + entropy_diag(var_X)
        )
        if isinstance(obs, EnergyObservable):
            value += _energy_likelihood_value(obs, qy)
        else:
            value += _constraint_likelihood_value(obs, qy, state.gamma_posteriors)
        std_z, std_X = np.exp(0.5 * rho_z), np.exp(0.5 * rho_X)
        g["mu_z_o"][i] = acc_gz - mu_z
        g["rho_z_o"][i] = 0.5 * std_z * acc_gz_eps - 0.5 * var_z + 0.5
        g["mu_X_o"][i] = acc_gX
        g["rho_X_o"][i] = 0.5 * std_X * acc_gX_eps + 0.5
    for key, arr in g.items():
        factors.add(key, scale * arr)
    return scale * value, theta, factors


def prior_logpdf_theta(arrays: dict, prior_scale: float):
    """Isotropic Gaussian prior over all unconstrained parameters.

    Returns (value up to an additive constant, gradients)."""
    inv_var = 1.0 / (prior_scale * prior_scale)
    value = 0.0
    grads = GradStore()
    for key, arr in arrays.items():
        value += -0.5 * inv_var * float(np.sum(arr * arr))
        grads.add(key, -inv_var * arr)
    return value, grads


# ---------------------------------------------------------------------------
# Adam and the training loop
# ---------------------------------------------------------------------------


class Adam:
    """Ascent Adam over a dict of named arrays; supports row-subset updates."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, rows: dict | None = None):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for key, gradient in grads.items():
            arr = params[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(arr)
                self.v[key] = np.zeros_like(arr)
            sel = rows.get(key) if rows else None
            if sel is None:
                m = self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * gradient
                v = self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * (
                    gradient * gradient
                )
                arr += self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            else:
                m = self.m[key][sel] = self.beta1 * self.m[key][sel] + (
                    1 - self.beta1
                ) * gradient
                v = self.v[key][sel] = self.beta2 * self.v[key][sel] + (
                    1 - self.beta2
                ) * (gradient * gradient)
                arr[sel] += self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


@dataclass
class TrainLog:
    rows: list = dataclass_field(default_factory=list)

    COLUMNS = ("iter", "F", "F_u", "F_l", "F_O", "wallclock")

    def append(self, *row):
        self.rows.append(tuple(row))

    def column(self, name):
        j = self.COLUMNS.index(name)
        return np.array([r[j] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fh.write(",".join(f"{v}" for v in row) + "\n")


def _temper_tau(cfg: TrainConfig, iteration: int) -> float:
    frac = min(iteration / max(cfg.iterations, 1), 1.0)
    return float(cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** frac)


def _estimate_h_mean(state, i, bc, rng):
    """MC estimate of <h(Y(X))> under q(X) for query i."""
    model = state.model
    mu_X = state.factors["mu_X_o"][i]
    std_X = np.exp(0.5 * state.factors["rho_X_o"][i])
    total = np.zeros(model.dim_y)
    for _ in range(state.config.qy_mc):
        X = mu_X + std_X * rng.standard_normal(model.dim_X)
        total += model.mean_y_given_X(X, bc)
    return total / state.config.qy_mc


def refresh_qy(state: VariationalState, virtual: VirtualData, rng):
    """Closed-form / energy updates of every q(y) plus Gamma precisions."""
    model = state.model
    sy = model.var_y()
    flux_moments = {}
    for i in range(len(virtual)):
        bc = BoundaryCoeffs.from_array(virtual.bcs[i])
        h_mean = _estimate_h_mean(state, i, bc, rng)
        obs = virtual.observables[i]
        if isinstance(obs, EnergyObservable):
            obs.tau = _temper_tau(state.config, state.iteration)
            state.qy[i] = update_qy_energy(
                obs,
                1.0 / sy,
                h_mean,
                q_init=state.qy[i],
                steps=state.config.energy_sweeps,
                block=state.config.energy_block,
                rng=rng,
            )
        else:
            state.qy[i] = update_qy_closedform(
                obs, sy, h_mean, state.gamma_posteriors
            )
            for cs in obs:
                if isinstance(cs.precision, vobs.Learned):
                    flux_moments.setdefault(cs.precision.group, ([], cs.m))
                    flux_moments[cs.precision.group][0].append(
                        state.qy[i].second_moment(cs.gamma, cs.alpha)
                    )
    for group, (moments, m) in flux_moments.items():
        state.gamma_posteriors[group] = update_precision_gamma(moments, m)


def train(
    model: GenerativeModel,
    config: TrainConfig,
    labeled: LabeledData | None = None,
    unlabeled: UnlabeledData | None = None,
    virtual: VirtualData | None = None,
    state: VariationalState | None = None,
    log: TrainLog | None = None,
):
    """Run the SVI loop; returns (state, log).

    Each iteration draws fresh reparametrization noise, accumulates the
    three ELBO blocks plus the parameter prior, and takes one Adam ascent
    step; every `cadence` iterations the q(y) factors and learned precisions
    are refreshed in closed form. Stops on the iteration budget or when the
    moving average of the objective plateaus.
    """
    if labeled is None and unlabeled is None and virtual is None:
        raise ValueError("at least one dataset must be provided")
    if state is None:
        state = init_state(model, config, labeled, unlabeled, virtual)
    log = log if log is not None else TrainLog()
    rng = derive_rng(config.seed, "train")
    adam = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)

    n_l = len(labeled) if labeled is not None else 0
    n_u = len(unlabeled) if unlabeled is not None else 0
    w_u = config.weight_unlabeled
    if n_u and config.equalize_unlabeled and n_l:
        w_u *= n_l / n_u

    if virtual is not None:
        refresh_qy(state, virtual, rng)

    history = []
    start = time.monotonic()
    stop_iteration = state.iteration + config.iterations
    while state.iteration < stop_iteration:
        state.iteration += 1
        f_u = f_l = f_o = 0.0
        theta_grads = GradStore()
        factor_grads = GradStore()
        rows = {}

        if n_u:
            if n_u > config.unlabeled_batch:
                batch = rng.choice(n_u, size=config.unlabeled_batch, replace=False)
            else:
                batch = np.arange(n_u)
            scale_u = w_u * n_u / batch.size
            f_u, th, fa = elbo_unlabeled(
                state, unlabeled.lambdas[batch], rng, indices=batch, scale=scale_u
            )
            for key, val in th.items():
                theta_grads.add(key, val)
            for key, val in fa.items():
                factor_grads.add(key, val)
                rows[key] = batch
        if n_l:
            f_l, th, fa = elbo_labeled(
                state,
                labeled.lambdas,
                labeled.ys,
                labeled.bcs,
                rng,
                scale=config.weight_labeled,
            )
            for key, val in th.items():
                theta_grads.add(key, val)
            for key, val in fa.items():
                factor_grads.add(key, val)
        if virtual is not None:
            f_o, th, fa = elbo_virtual(
                state,
                virtual.lambdas,
                virtual.bcs,
                virtual.observables,
                rng,
                scale=config.weight_virtual,
            )
            for key, val in th.items():
                theta_grads.add(key, val)
            for key, val in fa.items():
                factor_grads.add(key, val)

        f_prior, prior_grads = prior_logpdf_theta(
            state.model.params.arrays(), config.theta_prior_scale
        )
        for key, val in prior_grads.items():
            theta_grads.add(key, val)
        total = f_u + f_l + f_o + f_prior
        if not np.isfinite(total):
            raise NonFiniteLoss(
                f"objective became non-finite at iteration {state.iteration}: "
                f"F_u={f_u:.3e} F_l={f_l:.3e} F_O={f_o:.3e} prior={f_prior:.3e}"
            )

        adam.step(state.adam_arrays(), {**theta_grads, **factor_grads}, rows=rows)

        if virtual is not None and state.iteration % config.cadence == 0:
            refresh_qy(state, virtual, rng)

        history.append(total)
        if state.iteration % config.log_every == 0 or state.iteration == stop_iteration:
            log.append(
                state.iteration, total, f_u, f_l, f_o, time.monotonic() - start
            )

        w = config.plateau_window
        if len(history) >= 2 * w:
            recent = float(np.mean(history[-w:]))
            before = float(np.mean(history[-2 * w : -w]))
            denom = max(abs(before), 1e-12)
            if abs(recent - before) / denom < config.plateau_tol:
                break
    return state, log


# ---------------------------------------------------------------------------
# full-state checkpoints
# ---------------------------------------------------------------------------

STATE_CHECKPOINT_VERSION = 1


def save_state(state: VariationalState, stem, extra: dict | None = None) -> None:
    """One JSON header plus one float64 blob holding theta, encoder and
    factors; q(y) is derived data and is rebuilt from the virtual dataset."""
    stem = Path(stem)
    model = state.model
    arrays = dict(model.params.arrays())
    if state.enc_mu is not None:
        arrays["enc_mu"] = state.enc_mu.params
        arrays["enc_logvar"] = state.enc_logvar.params
    arrays.update(state.factors)
    offsets = {}
    pos = 0
    chunks = []
    for key, arr in arrays.items():
        offsets[key] = {"offset": pos, "size": int(arr.size), "shape": list(arr.shape)}
        pos += arr.size
        chunks.append(np.asarray(arr, dtype=np.float64).ravel())
    cfg = dataclasses.asdict(state.config)
    cfg["encoder_hidden"] = list(cfg["encoder_hidden"])
    header = {
        "version": STATE_CHECKPOINT_VERSION,
        "model": model.metadata(),
        "decoder_descriptor": model.params.decoder.descriptor(),
        "encoder_descriptors": (
            {
                "mu": state.enc_mu.descriptor(),
                "logvar": state.enc_logvar.descriptor(),
            }
            if state.enc_mu is not None
            else None
        ),
        "factor_keys": sorted(state.factors.keys()),
        "gamma_posteriors": {
            key: {"alpha": post.alpha, "beta": post.beta}
            for key, post in state.gamma_posteriors.items()
        },
        "iteration": state.iteration,
        "config": cfg,
        "blobs": offsets,
        "extra": extra or {},
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2))
    blob = np.concatenate(chunks) if chunks else np.empty(0)
    stem.with_suffix(".bin").write_bytes(blob.astype("<f8").tobytes())


def load_state(stem) -> VariationalState:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    if header.get("version") != STATE_CHECKPOINT_VERSION:
        raise ValueError(f"unsupported state checkpoint version {header.get('version')}")
    blob = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")

    def chunk(key):
        info = header["blobs"][key]
        return (
            blob[info["offset"] : info["offset"] + info["size"]]
            .reshape(info["shape"])
            .copy()
        )

    cfg_dict = dict(header["config"])
    cfg_dict["encoder_hidden"] = tuple(cfg_dict["encoder_hidden"])
    config = TrainConfig(**cfg_dict)
    meta = header["model"]
    model = GenerativeModel(meta["d_f"], meta["d_c"], dim_z=meta["dim_z"])
    model.params.decoder = Approximator.from_descriptor(
        header["decoder_descriptor"], chunk("decoder")
    )
    for key in ("W_g", "b_g", "log_S_X", "w_h", "b_h", "log_S_y"):
        setattr(model.params, key, chunk(key))
    state = VariationalState(model, config)
    if header["encoder_descriptors"] is not None:
        state.enc_mu = Approximator.from_descriptor(
            header["encoder_descriptors"]["mu"], chunk("enc_mu")
        )
        state.enc_logvar = Approximator.from_descriptor(
            header["encoder_descriptors"]["logvar"], chunk("enc_logvar")
        )
    for key in header["factor_keys"]:
        state.factors[key] = chunk(key)
    state.gamma_posteriors = {
        key: GammaPosterior(alpha=val["alpha"], beta=val["beta"])
        for key, val in header["gamma_posteriors"].items()
    }
    state.iteration = int(header["iteration"])
    if "mu_X_o" in state.factors:
        state.qy = [None] * state.factors["mu_X_o"].shape[0]
    return state
