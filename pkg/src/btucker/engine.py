# Adaptive Gibbs sampler for Bayesian Tucker factorization with a multiway
# cumulative shrinkage prior: conjugate sweeps, truncation adaptation, a
# probit-augmented path for binary tensors, mask-aware conditioning, and
# posterior-predictive imputation.
#
# Mask discipline: every sufficient statistic is computed from zero-filled
# data and explicit mask products, so values stored at masked-out entries can
# never influence the chain (bitwise).

from __future__ import annotations

import math
import pickle
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .cusp import (
    CuspModeState,
    count_active,
    prior_draw_mode,
    sample_indicators,
    sample_sticks,
    sample_theta,
    stick_breaking,
)
from .distributions import (
    RngHandle,
    as_generator,
    sample_gamma,
    sample_gig,
    sample_gig_half,
    sample_invgamma,
    sample_truncnorm,
)
from .tensors import (
    DenseTensor,
    gram_of_design,
    matricize,
    mode_product,
    refold,
    unvectorize,
    vectorize,
)

CHECKPOINT_FORMAT = 1
_PSI_FLOOR = 1e-100   # core-scale floor when forming precision diagonals
_JITTER = 1e-8        # diagonal bump retried once on failed factorization

GAUSSIAN = "gaussian"
PROBIT = "probit"


class NumericalAbort(RuntimeError):
    """Raised when the chain reaches a non-finite or non-PD configuration."""


# ----------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------

@dataclass
class FitConfig:
    """Sampler schedule, adaptation constants, and prior hyperparameters."""

    iters: int = 6000
    burnin: int = 2000
    thin: int = 1
    likelihood: str = GAUSSIAN
    seed: int = 0

    # adaptation: at iteration t >= adapt_start, adapt with probability
    # exp(adapt_c0 + adapt_c1 * t)
    adapt_start: int = 400
    adapt_c0: float = -1.0
    adapt_c1: float = -5e-4

    # spike/slab column-variance prior
    a_theta: float = 2.0
    b_theta: float = 2.0
    theta_inf: float = 0.05
    alpha: object = 3.0          # scalar or per-mode sequence

    # core-entry scale priors
    a_tau: float = 2.0
    b_tau: float = 2.0
    a_rho: float = 10.0
    b_rho: float = 10.0

    # noise variance prior (gaussian likelihood only; probit pins 1)
    a_sigma: float = 1.0
    b_sigma: float = 0.3

    init_trunc: object = None    # explicit (R_1..R_K), else the size rule
    core_joint_max: int = 1024   # joint core draw when prod(R) <= this
    save_imputation_draws: bool = True
    slab_only: bool = False      # debug: disable the spike (fixed-rank mode)

    def validate(self) -> None:
        if self.iters < 1 or self.burnin < 0 or self.burnin >= self.iters:
            raise ValueError("need 0 <= burnin < iters")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.likelihood not in (GAUSSIAN, PROBIT):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if self.adapt_c0 > 0 or self.adapt_c1 >= 0:
            raise ValueError("adaptation requires c0 <= 0 and c1 < 0")
        for name in ("a_theta", "b_theta", "theta_inf", "a_tau", "b_tau",
                     "a_rho", "b_rho", "a_sigma", "b_sigma"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for a in np.atleast_1d(np.asarray(self.alpha, dtype=np.float64)):
            if a <= 0:
                raise ValueError("alpha must be positive")

    def alpha_for(self, k: int, kmodes: int) -> float:
        arr = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if arr.size == 1:
            return float(arr[0])
        if arr.size != kmodes:
            raise ValueError(f"alpha must be scalar or length {kmodes}")
        return float(arr[k])

    @property
    def n_saved(self) -> int:
        return (self.iters - self.burnin) // self.thin


def initial_truncation(dims) -> tuple:
    """Starting truncation per mode: ceil((max_j n_j + n_k) / 3), floored at 2."""
    top = max(dims)
    return tuple(max(2, (top + nk + 2) // 3) for nk in dims)


def adaptation_probability(t: int, cfg: FitConfig) -> float:
    return math.exp(cfg.adapt_c0 + cfg.adapt_c1 * t)


# ----------------------------------------------------------------------
# Model state
# ----------------------------------------------------------------------

@dataclass
class ModelState:
    """All latent quantities of one chain."""

    dims: tuple
    factors: list                 # list of (n_k, R_k) arrays
    core: np.ndarray              # (R_1, ..., R_K)
    tau: float
    nu: np.ndarray                # core-shaped
    rho: np.ndarray               # core-shaped
    sigma2: float
    cusp: list                    # list of CuspModeState
    latent: np.ndarray = None     # probit latent tensor, dims-shaped
    active: list = field(default_factory=list)  # last computed R* per mode

    @property
    def trunc(self) -> tuple:
        return self.core.shape

    @property
    def kmodes(self) -> int:
        return len(self.dims)

    def psi(self) -> np.ndarray:
        return self.tau * self.nu

    def reconstruct(self) -> np.ndarray:
        out = self.core
        for k, u in enumerate(self.factors):
            out = mode_product(out, u, k)
        return out

    def validate(self) -> None:
        k = self.kmodes
        if len(self.factors) != k or len(self.cusp) != k:
            raise AssertionError("factor/cusp count mismatch")
        for j in range(k):
            if self.factors[j].shape != (self.dims[j], self.trunc[j]):
                raise AssertionError(
                    f"factor {j} has shape {self.factors[j].shape}, "
                    f"expected {(self.dims[j], self.trunc[j])}"
                )
            if self.cusp[j].trunc != self.trunc[j]:
                raise AssertionError(f"cusp state {j} truncation mismatch")
            self.cusp[j].validate()
        if self.nu.shape != self.trunc or self.rho.shape != self.trunc:
            raise AssertionError("nu/rho shape mismatch with core")
        if not (self.tau > 0 and self.sigma2 > 0):
            raise AssertionError("tau and sigma2 must stay positive")
        if np.any(self.nu <= 0) or np.any(self.rho <= 0):
            raise AssertionError("nu and rho must stay positive")

    def check_finite(self, t: int) -> None:
        bad = []
        if not np.isfinite(self.core).all():
            bad.append("core")
        for j, u in enumerate(self.factors):
            if not np.isfinite(u).all():
                bad.append(f"factor[{j}]")
        for name in ("tau", "sigma2"):
            if not np.isfinite(getattr(self, name)):
                bad.append(name)
        if not np.isfinite(self.nu).all():
            bad.append("nu")
        if not np.isfinite(self.rho).all():
            bad.append("rho")
        if bad:
            raise NumericalAbort(
                f"non-finite state at iteration {t}: {', '.join(bad)}"
            )

    def copy(self) -> "ModelState":
        return ModelState(
            dims=self.dims,
            factors=[u.copy() for u in self.factors],
            core=self.core.copy(),
            tau=self.tau,
            nu=self.nu.copy(),
            rho=self.rho.copy(),
            sigma2=self.sigma2,
            cusp=[replace(c, v=c.v.copy(), omega=c.omega.copy(), pi=c.pi.copy(),
                          s=c.s.copy(), theta=c.theta.copy()) for c in self.cusp],
            latent=None if self.latent is None else self.latent.copy(),
            active=list(self.active),
        )


def init_state(data: DenseTensor, cfg: FitConfig, rng) -> ModelState:
    """Starting state at the initial truncation with every column active.

    All latents are drawn from their priors except the slab indicators,
    which start with R*_k = R_k - 1: every column but the forced-inactive
    last one begins in the slab.  Starting from a mostly-spike prior draw
    instead lets the factor/core scale split collapse (tiny factors, huge
    core) before the indicators can lock onto the structure.
    """
    gen = as_generator(rng)
    dims = data.dims
    kmodes = len(dims)
    trunc = tuple(cfg.init_trunc) if cfg.init_trunc is not None else initial_truncation(dims)
    if len(trunc) != kmodes or any(r < 1 for r in trunc):
        raise ValueError(f"invalid initial truncation {trunc}")

    factors = []
    cusp_states = []
    for k in range(kmodes):
        r_k = trunc[k]
        alpha = cfg.alpha_for(k, kmodes)
        v = gen.beta(1.0, alpha, size=r_k)
        v[-1] = 1.0
        omega, pi = stick_breaking(v)
        s = np.full(r_k, r_k - 1, dtype=np.int64)  # active: s > column index
        s[-1] = 0
        theta = np.full(r_k, cfg.theta_inf)
        if r_k > 1:
            theta[:-1] = sample_invgamma(cfg.a_theta, cfg.b_theta, rng, size=r_k - 1)
        cusp_states.append(CuspModeState(
            mode=k, alpha=alpha, spike_var=cfg.theta_inf,
            slab_shape=cfg.a_theta, slab_scale=cfg.b_theta,
            v=v, omega=omega, pi=pi, s=s, theta=theta,
        ))
        factors.append(gen.normal(size=(dims[k], r_k)) * np.sqrt(theta)[None, :])

    tau = float(sample_gamma(cfg.a_tau, cfg.b_tau, rng))
    rho = sample_gamma(cfg.a_rho, cfg.b_rho, rng, size=trunc)
    nu = np.maximum(gen.exponential(2.0 / (rho * rho)), 1e-300)
    # The core starts at zero and sigma2 at the observed variance.  A core
    # drawn from its prior at the (large) initial truncation implies a
    # signal variance far above the data's; the first factor sweep then
    # dumps the mismatch onto one mode, which collapses into the spike and
    # drags the chain into a degenerate scale split (one mode's factors at
    # zero, the others unbounded).  A zero core starts every factor column
    # at its prior scale instead.
    core = np.zeros(trunc)
    if cfg.likelihood == GAUSSIAN:
        obs = data.values[data.mask]
        sigma2 = float(obs.var()) if obs.size > 1 and obs.var() > 0 else \
            cfg.b_sigma / cfg.a_sigma
    else:
        sigma2 = 1.0

    state = ModelState(
        dims=dims,
        factors=factors,
        core=core,
        tau=tau,
        nu=nu,
        rho=rho,
        sigma2=sigma2,
        cusp=cusp_states,
        latent=None,
        active=[r - 1 for r in trunc],
    )
    if cfg.slab_only:
        for st in state.cusp:
            st.s = np.full(st.trunc, st.trunc, dtype=np.int64)
            sample_theta(st, state.factors[st.mode], rng)
    state.validate()
    return state


# ----------------------------------------------------------------------
# Linear-algebra helpers
# ----------------------------------------------------------------------

def _chol(p: np.ndarray) -> np.ndarray:
    """Cholesky with one diagonal-jitter retry; NumericalAbort on failure."""
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        eye = np.eye(p.shape[-1])
        try:
            return np.linalg.cholesky(p + _JITTER * eye)
        except np.linalg.LinAlgError as exc:
            raise NumericalAbort(
                "positive-definite solve failed even after diagonal jitter"
            ) from exc


def _mvn_from_precision(prec_chol: np.ndarray, b: np.ndarray, gen) -> np.ndarray:
    """Draw x ~ N(P^-1 b, P^-1) given the Cholesky factor of P.

    Works on a single (R, R) factor with b of shape (..., R), or on batched
    factors (m, R, R) with b of shape (m, R).
    """
    if prec_chol.ndim == 2:
        mu = np.linalg.solve(
            prec_chol.T, np.linalg.solve(prec_chol, b[..., None])
        )[..., 0]
        z = gen.standard_normal(b.shape)
        return mu + np.linalg.solve(prec_chol.T, z[..., None])[..., 0]
    lt = np.swapaxes(prec_chol, -1, -2)
    mu = np.linalg.solve(lt, np.linalg.solve(prec_chol, b[..., None]))
    z = gen.standard_normal(b.shape)[..., None]
    return (mu + np.linalg.solve(lt, z))[..., 0]


def _core_design(state: ModelState, k: int) -> np.ndarray:
    """B = G_(k) W^(-k), computed by mode products (never materializing W)."""
    t = state.core
    for j, u in enumerate(state.factors):
        if j != k:
            t = mode_product(t, u, j)
    return matricize(t, k)


def _kron_excluding(factors, k: int) -> np.ndarray:
    """Columns are the per-entry factor products for all modes but k
    (shape prod_{j!=k} n_j x prod_{j!=k} R_j, row order matching the
    matricize column order)."""
    out = None
    for j in reversed(range(len(factors))):
        if j == k:
            continue
        out = factors[j] if out is None else np.kron(out, factors[j])
    return out


# ----------------------------------------------------------------------
# Conjugate updates
# ----------------------------------------------------------------------

def factor_row_moments(state: ModelState, k: int, y_mat: np.ndarray,
                       mask_mat: np.ndarray, sigma2: float):
    """Per-row precision and scaled RHS of the mode-k factor conditional.

    y_mat is the zero-filled mode-k matricization of the data, mask_mat its
    {0,1} mask.  Returns (prec, b) with prec of shape (n_k, R_k, R_k) and
    b of shape (n_k, R_k); row i of U^(k) is N(prec_i^-1 b_i, prec_i^-1).
    With fully observed rows prec collapses to one shared matrix.
    """
    design = _core_design(state, k)                      # (R_k, ncol)
    prior_prec = 1.0 / state.cusp[k].theta
    b = (y_mat @ design.T) / sigma2
    if mask_mat.all():
        prec = design @ design.T / sigma2
        prec[np.diag_indices_from(prec)] += prior_prec
        return prec, b
    bm = design[None, :, :] * mask_mat[:, None, :]       # (n_k, R_k, ncol)
    prec = bm @ design.T / sigma2
    idx = np.arange(prec.shape[-1])
    prec[:, idx, idx] += prior_prec[None, :]
    return prec, b


def update_factor_matrix(state: ModelState, k: int, y_mat: np.ndarray,
                         mask_mat: np.ndarray, rng) -> None:
    """Gibbs update of every row of the mode-k factor matrix.

    Rows are conditionally independent; missing entries drop out of the
    cross-products, which makes the posterior precision row-specific.
    """
    gen = as_generator(rng)
    prec, b = factor_row_moments(state, k, y_mat, mask_mat, state.sigma2)
    chol = _chol(prec)
    state.factors[k] = _mvn_from_precision(chol, b, gen)


def core_posterior_moments(state: ModelState, data: DenseTensor, sigma2: float):
    """Precision and scaled RHS of the joint core conditional (vec form).

    prec = diag(psi)^-1 + W^T W / sigma2 with W^T W mask-aware; the RHS
    accumulates W^T vec(data) over observed entries only.  Quadratic in the
    core size; used when prod(R) <= core_joint_max and by the test oracles.
    """
    mask = None if data.mask.all() else data.mask
    gram = gram_of_design(state.factors, mask)
    psi_inv = 1.0 / np.maximum(vectorize(state.psi()), _PSI_FLOOR)
    prec = gram / sigma2
    prec[np.diag_indices_from(prec)] += psi_inv
    proj = data.filled_array()
    for k, u in enumerate(state.factors):
        proj = mode_product(proj, u.T, k)
    b = vectorize(proj) / sigma2
    return prec, b


def update_core_joint(state: ModelState, data: DenseTensor, rng) -> None:
    gen = as_generator(rng)
    prec, b = core_posterior_moments(state, data, state.sigma2)
    draw = _mvn_from_precision(_chol(prec), b, gen)
    state.core = unvectorize(draw, state.trunc)


def update_core_blocked(state: ModelState, data: DenseTensor, rng) -> None:
    """Exact Gibbs scan over core fibers along the widest mode.

    Each fiber g[:, J] is drawn from its full conditional given all other
    core entries, so a scan leaves the same joint conditional invariant as
    the one-shot draw while costing O(prod(R) * R_kb) instead of
    O(prod(R)^3).  Used at large truncations (the pre-adaptation regime).
    """
    gen = as_generator(rng)
    trunc = state.trunc
    kb = int(np.argmax(trunc))
    u = state.factors[kb]                                   # (n_kb, R_kb)
    r_kb = trunc[kb]
    w_exc = _kron_excluding(state.factors, kb)              # (ncol, R_exc)
    g_mat = matricize(state.core, kb).copy()                # (R_kb, R_exc)
    psi_mat = matricize(np.maximum(state.psi(), _PSI_FLOOR), kb)
    y_mat = matricize(data.filled_array(), kb)
    m_mat = matricize(data.mask_array(), kb).astype(np.float64)
    sigma2 = state.sigma2

    resid = (y_mat - u @ (g_mat @ w_exc.T)) * m_mat
    col_weight = m_mat @ (w_exc * w_exc)                    # (n_kb, R_exc)
    # per-fiber Grams for every block at once: xtx_all[j] = U^T diag(a_j) U
    pairs = (u[:, :, None] * u[:, None, :]).reshape(u.shape[0], -1)
    xtx_all = (col_weight.T @ pairs).reshape(-1, r_kb, r_kb)
    idx = np.arange(r_kb)
    for j in range(g_mat.shape[1]):
        w = w_exc[:, j]
        xtx = xtx_all[j]
        g_old = g_mat[:, j]
        b = (u.T @ (resid @ w) + xtx @ g_old) / sigma2
        prec = xtx / sigma2
        prec[idx, idx] += 1.0 / psi_mat[:, j]
        g_new = _mvn_from_precision(_chol(prec), b, gen)
        resid -= (u @ (g_new - g_old))[:, None] * w[None, :] * m_mat
        g_mat[:, j] = g_new
    state.core = refold(g_mat, kb, trunc)


def update_core(state: ModelState, data: DenseTensor, cfg: FitConfig, rng) -> None:
    if state.core.size <= cfg.core_joint_max:
        update_core_joint(state, data, rng)
    else:
        update_core_blocked(state, data, rng)


def update_sigma2(state: ModelState, data: DenseTensor, cfg: FitConfig,
                  z: np.ndarray, rng) -> None:
    """Noise-variance update; counts and sums observed entries only."""
    resid = (data.filled_array() - z) * data.mask_array()
    ss = float(np.sum(resid * resid))
    n_obs = data.n_observed
    state.sigma2 = float(sample_invgamma(
        cfg.a_sigma + 0.5 * n_obs, cfg.b_sigma + 0.5 * ss, rng
    ))


def update_tau(state: ModelState, cfg: FitConfig, rng) -> None:
    r_total = state.core.size
    chi = float(np.sum(state.core * state.core / state.nu))
    state.tau = float(sample_gig(
        cfg.a_tau - 0.5 * r_total, max(chi, 1e-300), 2.0 * cfg.b_tau, rng
    ))


def update_nu(state: ModelState, rng) -> None:
    chi = state.core * state.core / state.tau
    state.nu = np.maximum(
        sample_gig_half(chi, state.rho * state.rho, rng), 1e-300
    )


def update_rho(state: ModelState, cfg: FitConfig, rng) -> None:
    gen = as_generator(rng)
    rate = cfg.b_rho + np.abs(state.core) / math.sqrt(state.tau)
    state.rho = np.maximum(gen.gamma(cfg.a_rho + 1.0, 1.0 / rate), 1e-300)


def update_shrinkage(state: ModelState, cfg: FitConfig, rng) -> None:
    """Indicator, stick, and column-variance sweeps for every mode."""
    if cfg.slab_only:
        for k, st in enumerate(state.cusp):
            st.s = np.full(st.trunc, st.trunc, dtype=np.int64)
            sample_theta(st, state.factors[k], rng)
        state.active = [count_active(st) for st in state.cusp]
        return
    for k, st in enumerate(state.cusp):
        sample_indicators(st, state.factors[k], rng)
    for st in state.cusp:
        sample_sticks(st, rng)
    for k, st in enumerate(state.cusp):
        sample_theta(st, state.factors[k], rng)
    state.active = [count_active(st) for st in state.cusp]


# ----------------------------------------------------------------------
# Truncation adaptation
# ----------------------------------------------------------------------

def _append_core_slices(state: ModelState, k: int, keep: np.ndarray,
                        n_new: int, cfg: FitConfig, rng) -> None:
    """Slice nu/rho/core along mode k to `keep` and append prior-drawn slices."""
    gen = as_generator(rng)
    shape_new = list(state.trunc)
    shape_new[k] = n_new
    parts = {}
    for name in ("nu", "rho", "core"):
        parts[name] = np.take(getattr(state, name), keep, axis=k)
    rho_new = sample_gamma(cfg.a_rho, cfg.b_rho, rng, size=tuple(shape_new))
    nu_new = np.maximum(gen.exponential(2.0 / (rho_new * rho_new)), 1e-300)
    core_new = gen.normal(size=tuple(shape_new)) * np.sqrt(state.tau * nu_new)
    state.nu = np.concatenate([parts["nu"], nu_new], axis=k)
    state.rho = np.concatenate([parts["rho"], rho_new], axis=k)
    state.core = np.concatenate([parts["core"], core_new], axis=k)


def adapt_mode(state: ModelState, k: int, cfg: FitConfig, rng) -> bool:
    """One mode's truncation move.

    Shrink when at least one column besides the forced-inactive last one is
    in the spike: keep the active columns, set R_k = R*_k + 1 and append one
    spike component.  Otherwise grow by one spike-drawn column.  Truncation
    stays within [2, n_k + 1] during adaptation.  Returns True if the
    truncation changed.
    """
    gen = as_generator(rng)
    st = state.cusp[k]
    r_k = st.trunc
    n_k = state.dims[k]
    alpha = st.alpha
    r_star = count_active(st)

    if r_star < r_k - 1:
        target = min(max(2, r_star + 1), n_k + 1)
        keep = np.nonzero(~st.spike_mask())[0]
        if keep.size > target - 1:
            keep = keep[: target - 1]
        n_new = target - keep.size
        v_keep = st.v[keep]
    else:
        if r_k + 1 > n_k + 1:
            return False
        target = r_k + 1
        keep = np.arange(r_k)
        n_new = 1
        v_keep = st.v.copy()
        # the old last stick was the truncation device, not a draw; replace
        # it so the fresh component gets positive mixture weight
        v_keep[-1] = gen.beta(1.0, alpha)

    if target == r_k and n_new == 0:
        return False

    u_new = gen.normal(size=(n_k, n_new)) * math.sqrt(cfg.theta_inf)
    state.factors[k] = np.concatenate([state.factors[k][:, keep], u_new], axis=1)

    theta = np.concatenate([st.theta[keep], np.full(n_new, cfg.theta_inf)])
    v = np.concatenate([v_keep, gen.beta(1.0, alpha, size=n_new)])
    v[-1] = 1.0
    if r_star < r_k - 1:
        # kept columns stay active under the new indexing; appended columns
        # start in the spike
        s = np.concatenate([
            np.full(keep.size, target - 1, dtype=np.int64),
            np.zeros(n_new, dtype=np.int64),
        ])
    else:
        s = np.concatenate([st.s, np.zeros(n_new, dtype=np.int64)])
    st.v = v
    st.s = s
    st.theta = theta
    st.refresh_weights()

    _append_core_slices(state, k, keep, n_new, cfg, rng)
    state.active[k] = count_active(st)
    return True


def adapt_ranks(state: ModelState, cfg: FitConfig, rng) -> bool:
    """Apply the per-mode truncation moves; returns True if anything changed."""
    changed = False
    for k in range(state.kmodes):
        changed = adapt_mode(state, k, cfg, rng) or changed
    if changed:
        state.validate()
    return changed


# ----------------------------------------------------------------------
# Probit path and imputation
# ----------------------------------------------------------------------

def probit_update_latent(state: ModelState, data: DenseTensor,
                         z: np.ndarray, rng) -> None:
    """Truncated-normal draw of the latent tensor at observed entries.

    y = 1 entries draw from N(z, 1) conditioned to (0, inf); y = 0 entries
    to (-inf, 0).  Missing entries are not sampled and stay zero-filled
    (they are excluded from every downstream sum by the mask).
    """
    obs = data.mask
    y_obs = data.values[obs]
    z_obs = vectorize(z)[obs]
    ones = y_obs >= 0.5
    lo = np.where(ones, 0.0, -np.inf)
    hi = np.where(ones, np.inf, 0.0)
    q = np.zeros(data.size)
    q[obs] = sample_truncnorm(z_obs, 1.0, lo, hi, rng)
    state.latent = unvectorize(q, data.dims)


def probability_tensor(state: ModelState, z: np.ndarray = None) -> DenseTensor:
    """Entrywise standard-normal CDF of the reconstructed signal."""
    if z is None:
        z = state.reconstruct()
    p = np.clip(ndtr(z), 1e-12, 1.0 - 1e-12)
    return DenseTensor.from_array(p)


def impute_missing(state: ModelState, data: DenseTensor, rng,
                   mode: str = "predictive", likelihood: str = GAUSSIAN,
                   z: np.ndarray = None) -> np.ndarray:
    """Draws (or signal values) at the masked-out entries, in flat order.

    mode "signal" returns the reconstructed z there; mode "predictive"
    returns z + N(0, sigma2) for the gaussian likelihood and
    Bernoulli(Phi(z)) for probit.
    """
    if mode not in ("signal", "predictive"):
        raise ValueError(f"unknown imputation mode {mode!r}")
    gen = as_generator(rng)
    missing = ~data.mask
    if not missing.any():
        raise ValueError("tensor has no missing entries")
    if z is None:
        z = state.reconstruct()
    z_miss = vectorize(z)[missing]
    if mode == "signal":
        return z_miss
    if likelihood == PROBIT:
        p = ndtr(z_miss)
        return (gen.uniform(size=z_miss.size) < p).astype(np.float64)
    return z_miss + gen.normal(0.0, math.sqrt(state.sigma2), size=z_miss.size)


# ----------------------------------------------------------------------
# Posterior sample container
# ----------------------------------------------------------------------

class RunningMoments:
    """Welford accumulator for elementwise posterior mean and variance."""

    def __init__(self, size: int):
        self.count = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros(size)

    def push(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return self.m2 / (self.count - 1)

    def sd(self) -> np.ndarray:
        return np.sqrt(self.variance())


class PosteriorSamples:
    """Thinned post-burn-in draws: ranks, scales, signal summaries, and
    predictive draws at the missing entries."""

    def __init__(self, data: DenseTensor, cfg: FitConfig):
        n_saved = cfg.n_saved
        kmodes = len(data.dims)
        self.dims = data.dims
        self.likelihood = cfg.likelihood
        self.n_saved = n_saved
        self.active_ranks = np.zeros((n_saved, kmodes), dtype=np.int64)
        self.trunc_levels = np.zeros((n_saved, kmodes), dtype=np.int64)
        self.sigma2 = np.zeros(n_saved)
        self.tau = np.zeros(n_saved)
        self.signal = RunningMoments(data.size)
        self.prob = RunningMoments(data.size) if cfg.likelihood == PROBIT else None
        self.missing_idx = np.nonzero(~data.mask)[0]
        m = self.missing_idx.size
        keep_draws = cfg.save_imputation_draws and m > 0
        self.predictive_draws = np.zeros((n_saved, m)) if keep_draws else None
        self.prob_draws = (
            np.zeros((n_saved, m)) if keep_draws and cfg.likelihood == PROBIT else None
        )
        self._cursor = 0

    def record(self, state: ModelState, z: np.ndarray, rng) -> None:
        j = self._cursor
        if j >= self.n_saved:
            raise AssertionError("more records than allocated")
        self.active_ranks[j] = state.active
        self.trunc_levels[j] = state.trunc
        self.sigma2[j] = state.sigma2
        self.tau[j] = state.tau
        z_flat = vectorize(z)
        self.signal.push(z_flat)
        p_flat = None
        if self.prob is not None:
            p_flat = np.clip(ndtr(z_flat), 1e-12, 1.0 - 1e-12)
            self.prob.push(p_flat)
        if self.predictive_draws is not None:
            gen = as_generator(rng)
            z_miss = z_flat[self.missing_idx]
            if self.likelihood == PROBIT:
                p_miss = p_flat[self.missing_idx]
                self.prob_draws[j] = p_miss
                self.predictive_draws[j] = (
                    gen.uniform(size=z_miss.size) < p_miss
                ).astype(np.float64)
            else:
                self.predictive_draws[j] = z_miss + gen.normal(
                    0.0, math.sqrt(state.sigma2), size=z_miss.size
                )
        self._cursor += 1

    def median_ranks(self) -> tuple:
        """Posterior median multi-rank: componentwise median of the saved
        active-rank draws."""
        med = np.median(self.active_ranks[: self._cursor], axis=0)
        return tuple(int(round(v)) for v in med)

    def z_mean_array(self) -> np.ndarray:
        return unvectorize(self.signal.mean, self.dims)

    def z_sd_array(self) -> np.ndarray:
        return unvectorize(self.signal.sd(), self.dims)

    def prob_mean_array(self) -> np.ndarray:
        if self.prob is None:
            raise ValueError("probability summaries exist only in probit mode")
        return unvectorize(self.prob.mean, self.dims)

    def prob_sd_array(self) -> np.ndarray:
        if self.prob is None:
            raise ValueError("probability summaries exist only in probit mode")
        return unvectorize(self.prob.sd(), self.dims)

    def imputation_summary(self, level: float = 0.90) -> dict:
        """Per-missing-entry posterior mean, sd and equal-tailed interval.

        Gaussian runs summarize the posterior-predictive draws; probit runs
        summarize the occurrence probabilities.
        """
        if self.missing_idx.size == 0:
            raise ValueError("no missing entries to summarize")
        if self.predictive_draws is None:
            raise ValueError("imputation draws were not stored")
        draws = self.prob_draws if self.likelihood == PROBIT else self.predictive_draws
        draws = draws[: self._cursor]
        lo_q = (1.0 - level) / 2.0
        return {
            "index": self.missing_idx,
            "mean": draws.mean(axis=0),
            "sd": draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(draws.shape[1]),
            "lower": np.quantile(draws, lo_q, axis=0),
            "upper": np.quantile(draws, 1.0 - lo_q, axis=0),
        }


# ----------------------------------------------------------------------
# The chain driver
# ----------------------------------------------------------------------

class _ModeData:
    """Per-mode matricized zero-filled data and masks, computed once."""

    def __init__(self, data: DenseTensor):
        arr = data.filled_array()
        mask = data.mask_array()
        self.y_mats = [matricize(arr, k) for k in range(len(data.dims))]
        self.mask_mats = [
            matricize(mask, k).astype(np.float64) for k in range(len(data.dims))
        ]


def _sweep(state: ModelState, data: DenseTensor, cache, cfg: FitConfig,
           rng, t: int) -> np.ndarray:
    """One full Gibbs cycle; returns the reconstructed signal tensor."""
    probit = cfg.likelihood == PROBIT
    if probit:
        z = state.reconstruct()
        probit_update_latent(state, data, z, rng)
        work = DenseTensor(data.dims, vectorize(state.latent), data.mask)
        mode_data = _ModeData(work)
    else:
        work = data
        mode_data = cache

    for k in range(state.kmodes):
        # recompute this mode's design from the already-updated neighbours
        update_factor_matrix(state, k, mode_data.y_mats[k],
                             mode_data.mask_mats[k], rng)
    update_core(state, work, cfg, rng)

    z = state.reconstruct()
    if not np.isfinite(z).all():
        raise NumericalAbort(
            f"non-finite reconstructed signal at iteration {t}; "
            "check the observed data and scales"
        )
    if not probit:
        update_sigma2(state, data, cfg, z, rng)
    update_tau(state, cfg, rng)
    update_nu(state, rng)
    update_rho(state, cfg, rng)
    update_shrinkage(state, cfg, rng)
    return z


def run_chain(data: DenseTensor, cfg: FitConfig, rng=None, *,
              checkpoint_path=None, checkpoint_every: int = 0,
              progress=None) -> PosteriorSamples:
    """Run one chain: `iters` sweeps with adaptation, recording every
    `thin`-th post-burn-in draw.  Deterministic given cfg.seed.
    """
    cfg.validate()
    if cfg.likelihood == PROBIT:
        obs_vals = data.values[data.mask]
        if not np.isin(obs_vals, (0.0, 1.0)).all():
            raise ValueError("probit likelihood requires 0/1 observed values")
    handle = rng if rng is not None else RngHandle(cfg.seed)
    state = init_state(data, cfg, handle)
    samples = PosteriorSamples(data, cfg)
    cache = _ModeData(data) if cfg.likelihood == GAUSSIAN else None
    return _run_loop(data, cfg, state, handle, samples, cache, start_t=1,
                     checkpoint_path=checkpoint_path,
                     checkpoint_every=checkpoint_every, progress=progress)


def _run_loop(data, cfg, state, rng, samples, cache, start_t,
              checkpoint_path=None, checkpoint_every=0, progress=None):
    gen = as_generator(rng)
    for t in range(start_t, cfg.iters + 1):
        z = _sweep(state, data, cache, cfg, rng, t)
        adapted = False
        if t >= cfg.adapt_start and gen.uniform() < adaptation_probability(t, cfg):
            adapted = adapt_ranks(state, cfg, rng)
        state.check_finite(t)
        if not cfg.slab_only:
            state.validate()
        if t > cfg.burnin and (t - cfg.burnin) % cfg.thin == 0:
            if adapted:
                z = state.reconstruct()
            samples.record(state, z, rng)
        if checkpoint_path and checkpoint_every and t % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, data=data, cfg=cfg, state=state,
                            rng=rng, samples=samples, iteration=t)
        if progress is not None:
            progress(t, state)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, data=data, cfg=cfg, state=state,
                        rng=rng, samples=samples, iteration=cfg.iters)
    return samples


# ----------------------------------------------------------------------
# Checkpointing: versioned binary container with the full chain state,
# enabling bitwise-exact resume.
# ----------------------------------------------------------------------

def save_checkpoint(path, *, data, cfg, state, rng, samples, iteration) -> None:
    gen = as_generator(rng)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "iteration": int(iteration),
        "cfg": cfg,
        "data": data,
        "state": state,
        "rng_state": gen.bit_generator.state,
        "rng_seed": rng.seed if isinstance(rng, RngHandle) else None,
        "samples": samples,
    }
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(
            f"{path}: unsupported checkpoint format {payload.get('format')!r}"
        )
    return payload


def resume_chain(path, *, checkpoint_path=None, checkpoint_every: int = 0,
                 progress=None) -> PosteriorSamples:
    """Continue a checkpointed run to completion.

    The resumed chain consumes the identical random stream, so its outputs
    match an unbroken run bitwise.
    """
    payload = load_checkpoint(path)
    cfg: FitConfig = payload["cfg"]
    data: DenseTensor = payload["data"]
    state: ModelState = payload["state"]
    samples: PosteriorSamples = payload["samples"]
    seed = payload.get("rng_seed")
    handle = RngHandle(seed if seed is not None else 0)
    handle.generator.bit_generator.state = payload["rng_state"]
    cache = _ModeData(data) if cfg.likelihood == GAUSSIAN else None
    t0 = payload["iteration"] + 1
    if t0 > cfg.iters:
        return samples
    return _run_loop(data, cfg, state, handle, samples, cache, start_t=t0,
                     checkpoint_path=checkpoint_path,
                     checkpoint_every=checkpoint_every, progress=progress)
