# Per-mode cumulative shrinkage state: stick-breaking weights, spike/slab
# column variances, and the latent slab indicators, together with their
# Gibbs updates.
#
# Indicators are stored 0-based: column r is "active" (slab) when s[r] > r,
# which matches the 1-based convention S_r > r used in the model notation.
# The truncated representation forces the last stick to 1, so the last
# column can never be active and a truncation of R supports at most R - 1
# active components.

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .distributions import as_generator, sample_categorical_rows, sample_invgamma


def stick_breaking(v: np.ndarray):
    """Weights and cumulative weights of the stick-breaking construction.

    omega[l] = v[l] * prod_{m<l} (1 - v[m]);  pi = cumsum(omega).
    With v[-1] == 1 the weights sum to one and pi ends at 1.
    """
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0) or np.any(v > 1):
        raise ValueError("stick fractions must lie in [0, 1]")
    remaining = np.concatenate(([1.0], np.cumprod(1.0 - v[:-1])))
    omega = v * remaining
    return omega, np.cumsum(omega)


@dataclass
class CuspModeState:
    """Shrinkage state for one tensor mode at truncation R = len(v)."""

    mode: int
    alpha: float        # stick-breaking concentration for this mode
    spike_var: float    # pinned variance of shrunk columns
    slab_shape: float   # inverse-gamma shape of active-column variances
    slab_scale: float   # inverse-gamma scale of active-column variances
    v: np.ndarray       # stick fractions, last entry 1
    omega: np.ndarray   # mixture weights
    pi: np.ndarray      # cumulative weights
    s: np.ndarray       # 0-based indicators, one per column
    theta: np.ndarray   # per-column prior variance

    @property
    def trunc(self) -> int:
        return self.v.size

    def refresh_weights(self) -> None:
        self.omega, self.pi = stick_breaking(self.v)

    def spike_mask(self) -> np.ndarray:
        return self.s <= np.arange(self.trunc)

    def validate(self) -> None:
        r = self.trunc
        if not (self.omega.size == self.pi.size == self.s.size == self.theta.size == r):
            raise AssertionError(f"mode {self.mode}: inconsistent lengths")
        if abs(self.omega.sum() - 1.0) > 1e-9:
            raise AssertionError(f"mode {self.mode}: weights sum to {self.omega.sum()}")
        if np.any(np.diff(self.pi) < -1e-12):
            raise AssertionError(f"mode {self.mode}: pi not nondecreasing")
        if np.any(self.theta <= 0):
            raise AssertionError(f"mode {self.mode}: nonpositive theta")
        spike = self.spike_mask()
        if np.any(self.theta[spike] != self.spike_var):
            raise AssertionError(f"mode {self.mode}: spike column with slab variance")


def count_active(state: CuspModeState) -> int:
    """Number of columns assigned beyond their own index (slab columns)."""
    return int(np.count_nonzero(~state.spike_mask()))


def column_log_densities(state: CuspModeState, u: np.ndarray):
    """Per-column log densities of the factor columns under spike and slab.

    Spike: N(0, spike_var I); slab: multivariate t with 2*slab_shape degrees
    of freedom and scale (slab_scale/slab_shape) I (the marginal of the
    inverse-gamma mixture).  Vectorized over columns; agrees with
    logpdf_iso_normal / logpdf_iso_student_t applied per column.
    """
    n_k = u.shape[0]
    ss = np.einsum("ir,ir->r", u, u)
    spike = -0.5 * n_k * np.log(2.0 * np.pi * state.spike_var) - 0.5 * ss / state.spike_var
    dof = 2.0 * state.slab_shape
    scale2 = state.slab_scale / state.slab_shape
    slab = (
        gammaln((dof + n_k) / 2.0)
        - gammaln(dof / 2.0)
        - 0.5 * n_k * np.log(dof * np.pi * scale2)
        - 0.5 * (dof + n_k) * np.log1p(ss / (dof * scale2))
    )
    return spike, slab


def sample_indicators(state: CuspModeState, u: np.ndarray, rng) -> np.ndarray:
    """Categorical update of the slab indicators, computed in log space.

    For column r: P(s = l) is proportional to omega_l times the spike
    density of the column for l <= r and times the slab (t) density for
    l > r.
    """
    r_k = state.trunc
    if u.shape[1] != r_k:
        raise ValueError("factor matrix width does not match truncation")
    spike, slab = column_log_densities(state, u)
    with np.errstate(divide="ignore"):
        log_omega = np.log(state.omega)
    cols = np.arange(r_k)
    use_spike = cols[None, :] <= cols[:, None]        # [r, l]: l <= r
    logw = log_omega[None, :] + np.where(use_spike, spike[:, None], slab[:, None])
    state.s = sample_categorical_rows(logw, rng).astype(np.int64)
    return state.s


def sample_sticks(state: CuspModeState, rng) -> np.ndarray:
    """Beta update of the stick fractions given the indicator counts.

    v_l ~ Beta(1 + #{s == l}, alpha + #{s > l}), with the last stick then
    forced to 1; weights are recomputed.
    """
    gen = as_generator(rng)
    r_k = state.trunc
    eq = np.bincount(state.s, minlength=r_k).astype(np.float64)
    # gt[l] = #{s > l}; s takes values 0..R-1
    gt = r_k - np.cumsum(eq)
    state.v = gen.beta(1.0 + eq, state.alpha + gt)
    state.v[-1] = 1.0
    state.refresh_weights()
    return state.v


def sample_theta(state: CuspModeState, u: np.ndarray, rng) -> np.ndarray:
    """Spike columns pinned to spike_var; slab columns drawn from
    InvGamma(slab_shape + n_k/2, slab_scale + sum_i u_ir^2 / 2), the exact
    conjugate update for a N(0, theta I) column under an InvGamma prior.
    """
    n_k = u.shape[0]
    spike = state.spike_mask()
    theta = np.full(state.trunc, state.spike_var)
    slab_idx = np.nonzero(~spike)[0]
    if slab_idx.size:
        ss = np.einsum("ir,ir->r", u[:, slab_idx], u[:, slab_idx])
        theta[slab_idx] = sample_invgamma(
            state.slab_shape + 0.5 * n_k, state.slab_scale + 0.5 * ss,
            rng, size=slab_idx.size,
        )
    state.theta = theta
    return theta


def prior_draw_mode(
    n_k: int,
    trunc: int,
    alpha: float,
    spike_var: float,
    slab_shape: float,
    slab_scale: float,
    rng,
    mode: int = 0,
):
    """Full generative draw of one mode's shrinkage state and factor columns.

    v -> omega -> s -> theta -> U columns.  Used at initialization, in the
    adaptation add-component step, and by the prior Monte Carlo checks.
    Returns (CuspModeState, factor matrix of shape (n_k, trunc)).
    """
    if trunc < 1:
        raise ValueError("truncation must be >= 1")
    gen = as_generator(rng)
    v = gen.beta(1.0, alpha, size=trunc)
    v[-1] = 1.0
    omega, pi = stick_breaking(v)
    u01 = gen.uniform(size=trunc)
    s = np.searchsorted(np.cumsum(omega), u01 * omega.sum(), side="right")
    s = np.minimum(s, trunc - 1).astype(np.int64)
    spike = s <= np.arange(trunc)
    theta = np.full(trunc, spike_var)
    n_slab = int((~spike).sum())
    if n_slab:
        theta[~spike] = sample_invgamma(slab_shape, slab_scale, rng, size=n_slab)
    u = gen.normal(size=(n_k, trunc)) * np.sqrt(theta)[None, :]
    state = CuspModeState(
        mode=mode,
        alpha=float(alpha),
        spike_var=float(spike_var),
        slab_shape=float(slab_shape),
        slab_scale=float(slab_scale),
        v=v,
        omega=omega,
        pi=pi,
        s=s,
        theta=theta,
    )
    return state, u
