# Random variate generators and log-density evaluators for the Gibbs
# conditionals, on top of a seeded numpy Generator.
#
# Reproducibility contract: a given seed plus a given sequence of calls
# produces the identical sequence of draws.  Rejection samplers consume a
# data-dependent number of uniforms, which is fine: the sequence is still a
# pure function of the seed and the call arguments.

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln, ndtr, ndtri


class RngHandle:
    """Owner of one reproducible random stream (PCG64).

    One handle per chain; a handle must not be shared between concurrently
    running chains.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = np.random.Generator(np.random.PCG64(self.seed))

    def __repr__(self):
        return f"RngHandle(seed={self.seed})"


def as_generator(rng) -> np.random.Generator:
    """Accept either an RngHandle or a bare numpy Generator."""
    if isinstance(rng, RngHandle):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngHandle or numpy Generator, got {type(rng)!r}")


# ----------------------------------------------------------------------
# Elementary samplers (shape/rate conventions fixed here once)
# ----------------------------------------------------------------------

def sample_gamma(a: float, b: float, rng, size=None):
    """Gamma with shape a and rate b (mean a/b)."""
    if a <= 0 or b <= 0:
        raise ValueError("gamma requires a > 0 and b > 0")
    return as_generator(rng).gamma(a, 1.0 / b, size=size)


def sample_invgamma(a: float, b: float, rng, size=None):
    """Inverse gamma with shape a and scale b (mean b/(a-1) for a > 1)."""
    if a <= 0 or np.any(np.asarray(b) <= 0):
        raise ValueError("inverse gamma requires a > 0 and b > 0")
    return np.asarray(b) / as_generator(rng).gamma(a, 1.0, size=size)


def sample_beta(a: float, b: float, rng, size=None):
    if a <= 0 or b <= 0:
        raise ValueError("beta requires a > 0 and b > 0")
    return as_generator(rng).beta(a, b, size=size)


def sample_normal(mean: float, sd: float, rng, size=None):
    if np.any(np.asarray(sd) < 0):
        raise ValueError("normal requires sd >= 0")
    return as_generator(rng).normal(mean, sd, size=size)


def sample_exponential(rate: float, rng, size=None):
    """Exponential with the given rate (mean 1/rate)."""
    if np.any(np.asarray(rate) <= 0):
        raise ValueError("exponential requires rate > 0")
    return as_generator(rng).exponential(1.0 / np.asarray(rate), size=size)


def sample_categorical(weights, rng) -> int:
    """Index (0-based) drawn proportionally to nonnegative weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty vector")
    if np.any(w < 0) or not np.isfinite(w).all():
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights must not all be zero")
    u = as_generator(rng).uniform() * total
    return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, w.size - 1))


def sample_categorical_rows(log_weights: np.ndarray, rng) -> np.ndarray:
    """One categorical draw per row of a matrix of log weights.

    Rows are normalized with log-sum-exp; -inf entries get probability zero.
    """
    lw = np.asarray(log_weights, dtype=np.float64)
    m = np.max(lw, axis=1, keepdims=True)
    # all -inf rows are invalid; caller guarantees at least one finite weight
    p = np.exp(lw - m)
    cum = np.cumsum(p, axis=1)
    u = as_generator(rng).uniform(size=lw.shape[0]) * cum[:, -1]
    idx = (u[:, None] > cum).sum(axis=1)
    return np.minimum(idx, lw.shape[1] - 1)


# ----------------------------------------------------------------------
# Generalized inverse Gaussian
#
# Parameter order is (p, chi, psi) with density on x > 0 proportional to
#     x^(p-1) exp{ -(psi*x + chi/x) / 2 }.
# Interior draws use Devroye's uniformly fast rejection sampler for the
# two-parameter form GIG(lam, omega), omega = sqrt(chi*psi); boundary cases
# collapse exactly to Gamma (chi == 0) and inverse Gamma (psi == 0).
# ----------------------------------------------------------------------

def _gig_check(p: float, chi: float, psi: float) -> None:
    if not (math.isfinite(p) and math.isfinite(chi) and math.isfinite(psi)):
        raise ValueError("gig parameters must be finite")
    if chi < 0 or psi < 0:
        raise ValueError("gig requires chi >= 0 and psi >= 0")
    if chi == 0 and psi == 0:
        raise ValueError("gig requires chi and psi not both zero")
    if chi == 0 and p <= 0:
        raise ValueError("gig with chi == 0 requires p > 0")
    if psi == 0 and p >= 0:
        raise ValueError("gig with psi == 0 requires p < 0")


def _devroye_psi(x, alpha, lam):
    return -alpha * (np.cosh(x) - 1.0) - lam * (np.expm1(x) - x)


def _devroye_dpsi(x, alpha, lam):
    return -alpha * np.sinh(x) - lam * np.expm1(x)


def _gig_standard(lam: float, omega: float, rng, n: int) -> np.ndarray:
    """n draws from the two-parameter GIG(lam, omega), lam >= 0, omega > 0.

    Devroye (2014): rejection from a three-piece hat for the log-transformed
    and mode-centred density; uniformly bounded rejection rate over the whole
    parameter range, including very large lam.
    """
    gen = as_generator(rng)
    alpha = math.hypot(omega, lam) - lam
    if alpha <= 0.0:        # hypot rounding for lam >> omega
        alpha = omega * omega / (2.0 * lam)

    # hat construction
    x = -_devroye_psi(1.0, alpha, lam)
    if 0.5 <= x <= 2.0:
        t = 1.0
    elif x > 2.0:
        t = math.sqrt(2.0 / (alpha + lam))
    else:
        t = math.log(4.0 / (alpha + 2.0 * lam))

    x = -_devroye_psi(-1.0, alpha, lam)
    if 0.5 <= x <= 2.0:
        s = 1.0
    elif x > 2.0:
        s = math.sqrt(4.0 / (alpha * math.cosh(1.0) + lam))
    else:
        if lam == 0.0:
            s = math.log(1.0 + 1.0 / alpha + math.sqrt(1.0 / alpha**2 + 2.0 / alpha))
        else:
            s = min(1.0 / lam,
                    math.log(1.0 + 1.0 / alpha + math.sqrt(1.0 / alpha**2 + 2.0 / alpha)))

    eta = -_devroye_psi(t, alpha, lam)
    zeta = -_devroye_dpsi(t, alpha, lam)
    theta = -_devroye_psi(-s, alpha, lam)
    xi = _devroye_dpsi(-s, alpha, lam)
    pp = 1.0 / xi
    rr = 1.0 / zeta
    td = t - rr * eta
    sd = s - pp * theta
    q = td + sd

    out = np.empty(n)
    need = np.arange(n)
    while need.size:
        m = need.size
        u = gen.uniform(size=m)
        v = gen.uniform(size=m)
        w = gen.uniform(size=m)
        cand = np.where(
            u < q / (pp + q + rr),
            -sd + q * v,
            np.where(
                u < (q + rr) / (pp + q + rr),
                td - rr * np.log(v),
                -sd + pp * np.log(v),
            ),
        )
        f1 = np.exp(-eta - zeta * (cand - t))
        f2 = np.exp(-theta + xi * (cand + s))
        hat = np.where(
            (cand >= -sd) & (cand <= td),
            1.0,
            np.where(cand > td, f1, f2),
        )
        accept = w * hat <= np.exp(_devroye_psi(cand, alpha, lam))
        out[need[accept]] = cand[accept]
        need = need[~accept]

    ratio = lam / omega
    return np.exp(out) * (ratio + np.sqrt(1.0 + ratio * ratio))


def sample_gig(p: float, chi: float, psi: float, rng, size=None):
    """Draw from GIG(p, chi, psi): density prop. to x^(p-1) e^{-(psi x + chi/x)/2}.

    Boundary reductions: chi == 0 gives Gamma(p, psi/2); psi == 0 gives
    InvGamma(-p, chi/2).
    """
    p = float(p)
    chi = float(chi)
    psi = float(psi)
    _gig_check(p, chi, psi)
    scalar = size is None
    n = 1 if scalar else int(np.prod(size))

    if chi == 0.0:
        out = sample_gamma(p, psi / 2.0, rng, size=n)
    elif psi == 0.0:
        out = sample_invgamma(-p, chi / 2.0, rng, size=n)
    else:
        lam = abs(p)
        omega = math.sqrt(chi * psi)
        std = _gig_standard(lam, omega, rng, n)
        if p < 0:
            std = 1.0 / std
        out = math.sqrt(chi / psi) * std

    if scalar:
        return float(out[0]) if np.ndim(out) else float(out)
    return np.reshape(out, size)


def _invgauss(mu: np.ndarray, lam: np.ndarray, gen) -> np.ndarray:
    """Vectorized inverse-Gaussian(mu, lam) draws.

    Michael-Schucany-Haas with the smaller root computed in rationalized
    form, which stays accurate when mu*y dwarfs lam (where the textbook
    difference formula loses all precision).
    """
    y = gen.standard_normal(mu.shape) ** 2
    w = mu * y
    x1 = mu * (1.0 - 2.0 * w / (w + np.sqrt(w * (w + 4.0 * lam))))
    x1 = np.where(w == 0.0, mu, x1)
    u = gen.uniform(size=mu.shape)
    return np.where(u <= mu / (mu + x1), x1, mu * mu / x1)


def sample_gig_half(chi: np.ndarray, psi: np.ndarray, rng) -> np.ndarray:
    """Vectorized GIG(1/2, chi, psi) with elementwise parameters.

    Uses the inverse-Gaussian identity: if T ~ IG(sqrt(psi/chi), psi) then
    1/T ~ GIG(1/2, chi, psi).  Elements with chi ~ 0 relative to psi fall
    back to the exact limit Gamma(1/2, psi/2).
    """
    gen = as_generator(rng)
    chi = np.asarray(chi, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    if not (np.isfinite(chi).all() and np.isfinite(psi).all()):
        raise ValueError("gig_half parameters must be finite")
    if np.any(psi <= 0) or np.any(chi < 0):
        raise ValueError("gig_half requires psi > 0 and chi >= 0")
    out = np.empty(np.broadcast(chi, psi).shape)
    chi_b = np.broadcast_to(chi, out.shape)
    psi_b = np.broadcast_to(psi, out.shape)
    tiny = chi_b <= psi_b * 1e-24
    n_tiny = int(tiny.sum())
    if n_tiny:
        out[tiny] = gen.gamma(0.5, 1.0, size=n_tiny) * (2.0 / psi_b[tiny])
    rest = ~tiny
    n_rest = int(rest.sum())
    if n_rest:
        mu = np.sqrt(psi_b[rest] / chi_b[rest])
        out[rest] = 1.0 / _invgauss(mu, psi_b[rest], gen)
    return out


# ----------------------------------------------------------------------
# Truncated normal
# ----------------------------------------------------------------------

_TAIL = 4.0  # standardized bound beyond which inverse-CDF precision degrades


def _truncnorm_tail(a: np.ndarray, b: np.ndarray, gen) -> np.ndarray:
    """Standard normal conditioned to (a, b), all a >= _TAIL.

    Exponential-rejection (Robert 1995); stable for arbitrarily large a.
    """
    out = np.empty(a.shape)
    need = np.arange(a.size)
    lam = (a + np.sqrt(a * a + 4.0)) / 2.0
    while need.size:
        aa = a[need]
        ll = lam[need]
        z = aa + gen.exponential(size=need.size) / ll
        rho = np.exp(-0.5 * (z - ll) ** 2)
        ok = (gen.uniform(size=need.size) <= rho) & (z < b[need])
        out[need[ok]] = z[ok]
        need = need[~ok]
    return out


def _truncnorm_std(a: np.ndarray, b: np.ndarray, gen) -> np.ndarray:
    """Standard normal conditioned to (a, b) elementwise; bounds may be inf."""
    out = np.empty(a.shape)
    right = a >= _TAIL                 # entire region in the far right tail
    left = b <= -_TAIL
    mid = ~(right | left)
    if right.any():
        out[right] = _truncnorm_tail(a[right], b[right], gen)
    if left.any():
        out[left] = -_truncnorm_tail(-b[left], -a[left], gen)
    if mid.any():
        am, bm = a[mid], b[mid]
        # work on the tail side with the smaller magnitude for precision
        pos = am >= 0
        lo = np.where(pos, ndtr(-bm), ndtr(am))
        hi = np.where(pos, ndtr(-am), ndtr(bm))
        u = lo + (hi - lo) * gen.uniform(size=am.size)
        x = ndtri(u)
        out[mid] = np.where(pos, -x, x)
    return out


def sample_truncnorm(mean, sd, lo, hi, rng, size=None):
    """Normal(mean, sd^2) conditioned to the interval (lo, hi).

    lo/hi may be -inf/+inf.  Numerically stable far into the tails
    (|mean - boundary|/sd of 8 and beyond) via exponential rejection.
    Broadcasts over array arguments.
    """
    gen = as_generator(rng)
    mean = np.asarray(mean, dtype=np.float64)
    sd = np.asarray(sd, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if not (np.isfinite(mean).all() and np.isfinite(sd).all()):
        raise ValueError("truncnorm requires finite mean and sd")
    if np.any(sd <= 0):
        raise ValueError("truncnorm requires sd > 0")
    if np.any(~(lo < hi)):
        raise ValueError("truncnorm requires lo < hi")
    shape = np.broadcast(mean, sd, lo, hi).shape if size is None else size
    scalar = shape == ()
    if scalar:
        shape = (1,)
    a = np.broadcast_to((lo - mean) / sd, shape).ravel()
    b = np.broadcast_to((hi - mean) / sd, shape).ravel()
    x = _truncnorm_std(a.copy(), b.copy(), gen)
    out = (np.broadcast_to(mean, shape).ravel()
           + np.broadcast_to(sd, shape).ravel() * x).reshape(shape)
    return float(out[0]) if scalar else out


# ----------------------------------------------------------------------
# Log densities
# ----------------------------------------------------------------------

def logpdf_iso_normal(x: np.ndarray, var: float) -> float:
    """Log density of N_n(0, var * I) at the vector x."""
    if var <= 0:
        raise ValueError("var must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    return float(-0.5 * n * np.log(2.0 * np.pi * var) - 0.5 * (x @ x) / var)


def logpdf_iso_student_t(x: np.ndarray, dof: float, scale2: float) -> float:
    """Log density of the n-variate Student-t with `dof` degrees of freedom
    and scale matrix scale2 * I, evaluated at x.

    This is the joint multivariate-t density, not a product of univariate
    t margins; it is the marginal of N_n(0, theta I) with theta integrated
    against InvGamma(dof/2, scale2 * dof/2).
    """
    if dof <= 0 or scale2 <= 0:
        raise ValueError("dof and scale2 must be positive")
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    quad = (x @ x) / (dof * scale2)
    return float(
        gammaln((dof + n) / 2.0)
        - gammaln(dof / 2.0)
        - 0.5 * n * np.log(dof * np.pi * scale2)
        - 0.5 * (dof + n) * np.log1p(quad)
    )
