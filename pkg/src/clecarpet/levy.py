"""Stable Lévy processes for CLE boundary lengths.

Parameterization
----------------
The process has Lévy measure ``a_+ s^(-alpha-1) ds`` on ``s > 0`` and
``a_- |s|^(-alpha-1) ds`` on ``s < 0`` with ``a_+ + a_- = 1``, ``alpha = 4/kappa``
and ``a_+ / a_- = -cos(4 pi / kappa)``, and zero mean.  In Nolan's
1-parameterization ``X_t ~ S(alpha, beta, scale * t^(1/alpha), 0; 1)`` with
``beta = (a_+ - a_-)`` and
``scale^alpha = Gamma(2 - alpha) |cos(pi alpha / 2)| / (alpha (alpha - 1))``.
Increments are drawn with the Chambers-Mallows-Stuck transform.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from . import ConfigError
from .pool import ordered_map
from .rng import child_rng

__all__ = [
    "StableParams",
    "StablePath",
    "TauReport",
    "MomentReport",
    "params_from_kappa",
    "sample_increment",
    "sample_path_with_jumps",
    "positivity_estimate",
    "simulate_tau",
    "tau_statistics",
    "largest_jumps_sum",
    "expected_largest_jumps_sum",
    "jump_sum_means",
    "infimum_moments",
    "loglog_slope",
]


@dataclass(frozen=True)
class StableParams:
    kappa: float
    alpha: float
    u: float
    skew_beta: float
    positivity: float
    a_plus: float
    a_minus: float

    @classmethod
    def custom(cls, alpha: float, beta: float) -> "StableParams":
        """Parameters not tied to a kappa (for tests of the sampler itself)."""
        a_plus = (1 + beta) / 2
        a_minus = (1 - beta) / 2
        pos = 0.5 + math.atan(beta * math.tan(math.pi * alpha / 2)) / (math.pi * alpha)
        u = a_plus / a_minus if a_minus > 0 else math.inf
        return cls(math.nan, alpha, u, beta, pos, a_plus, a_minus)

    @property
    def scale(self) -> float:
        """Scale of X_1 implied by the Lévy measure normalization a_+ + a_- = 1."""
        a = self.alpha
        return (special.gamma(2 - a) * abs(math.cos(math.pi * a / 2)) / (a * (a - 1))) ** (1 / a)

    def jump_rate(self, s: float, sign: int = 1) -> float:
        """Mean number of jumps of size >= s (upward for sign=1) per unit time."""
        a = self.a_plus if sign > 0 else self.a_minus
        return a / self.alpha * s ** (-self.alpha)


def params_from_kappa(kappa: float) -> StableParams:
    if not 8 / 3 < kappa < 4:
        raise ConfigError(f"kappa must lie in (8/3, 4), got {kappa}")
    alpha = 4 / kappa
    u = -math.cos(4 * math.pi / kappa)
    beta = -(1 / math.tan(2 * math.pi / kappa)) ** 2
    positivity = 1 - kappa / 8
    a_minus = 1 / (1 + u)
    a_plus = u / (1 + u)
    if abs((1 + beta) / (1 - beta) - u) > 1e-12:
        raise AssertionError("skewness and jump-ratio formulas disagree")
    arctan_pos = 0.5 + math.atan(beta * math.tan(math.pi * alpha / 2)) / (math.pi * alpha)
    if abs(arctan_pos - positivity) > 1e-12:
        raise AssertionError("positivity formula disagrees with the skewness")
    return StableParams(kappa, alpha, u, beta, positivity, a_plus, a_minus)


def _cms(alpha: float, beta: float, size, rng: np.random.Generator) -> np.ndarray:
    """Standard S(alpha, beta, 1, 0; 1) variates, alpha != 1."""
    v = rng.uniform(-np.pi / 2, np.pi / 2, size)
    w = rng.standard_exponential(size)
    t = beta * math.tan(math.pi * alpha / 2)
    b = math.atan(t) / alpha
    s = (1 + t * t) ** (1 / (2 * alpha))
    a = alpha * (v + b)
    return s * np.sin(a) / np.cos(v) ** (1 / alpha) * (np.cos(v - a) / w) ** ((1 - alpha) / alpha)


def sample_increment(params: StableParams, dt: float, rng: np.random.Generator, size=None):
    """Increment of the process over a time step ``dt`` (array if ``size`` is given)."""
    if dt <= 0:
        raise ConfigError("dt must be positive")
    x = _cms(params.alpha, params.skew_beta, size, rng) * (params.scale * dt ** (1 / params.alpha))
    return float(x) if size is None else x


@dataclass
class StablePath:
    times: np.ndarray
    values: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    cutoff: float
    minor_jump_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def infimum(self) -> np.ndarray:
        return np.minimum.accumulate(self.values)

    @property
    def supremum(self) -> np.ndarray:
        return np.maximum.accumulate(self.values)

    def remainder(self) -> np.ndarray:
        """Path with the recorded (>= cutoff) jumps removed.

    Its own explicit jumps are ``minor_jump_sizes``, all below the cutoff.
    """
        step = np.searchsorted(self.times, self.jump_times, side="left")
        bumps = np.zeros(len(self.times))
        np.add.at(bumps, step, self.jump_sizes)
        return self.values - np.cumsum(bumps)


def _truncated_pareto(lo: float, hi: float, alpha: float, n: int, rng) -> np.ndarray:
    """Sizes on [lo, hi) with density proportional to s^(-alpha-1)."""
    a, b = lo ** (-alpha), (hi ** (-alpha) if np.isfinite(hi) else 0.0)
    return (a - rng.random(n) * (a - b)) ** (-1 / alpha)


def sample_path_with_jumps(
    params: StableParams,
    T: float,
    dt: float,
    cutoff: float,
    rng: np.random.Generator,
    floor_ratio: float = 0.25,
) -> StablePath:
    """Grid path on [0, T] whose jumps of size >= cutoff are recorded.

    Jumps of size >= cutoff form a compound Poisson process.  The remainder
    is the compensated truncated-stable part: jumps in
    [floor_ratio*cutoff, cutoff) are drawn explicitly, jumps below
    floor_ratio*cutoff enter through a Gaussian of matching variance, and
    a drift removes the mean of every jump above the floor.
    """
    a = params.alpha
    if cutoff <= 0:
        raise ConfigError("cutoff must be positive")
    if dt > cutoff**a / 10 * (1 + 1e-12):
        raise ConfigError(f"dt must be at most cutoff^alpha/10 = {cutoff ** a / 10}")
    if not 0 < floor_ratio < 1:
        raise ConfigError("floor_ratio must lie in (0, 1)")
    nsteps = int(math.ceil(T / dt - 1e-9))
    times = np.minimum(np.arange(nsteps + 1) * dt, T)
    floor = floor_ratio * cutoff

    def jumps(lo, hi):
        rate = (lo ** (-a) - (hi ** (-a) if np.isfinite(hi) else 0.0)) / a
        k = int(rng.poisson(rate * T))
        sizes = _truncated_pareto(lo, hi, a, k, rng)
        signs = np.where(rng.random(k) < params.a_plus, 1.0, -1.0)
        return rng.random(k) * T, signs * sizes

    big_t, big_s = jumps(cutoff, np.inf)
    mid_t, mid_s = jumps(floor, cutoff)
    drift = -(params.a_plus - params.a_minus) * floor ** (1 - a) / (a - 1)
    sigma = math.sqrt(floor ** (2 - a) / (2 - a))
    steps_dt = np.diff(times)
    inc = drift * steps_dt + sigma * np.sqrt(steps_dt) * rng.standard_normal(nsteps)
    for jt, js in ((big_t, big_s), (mid_t, mid_s)):
        idx = np.minimum(np.searchsorted(times, jt, side="left"), nsteps) - 1
        np.add.at(inc, np.maximum(idx, 0), js)
    values = np.concatenate([[0.0], np.cumsum(inc)])
    order = np.argsort(big_t)
    return StablePath(times, values, big_t[order], big_s[order], float(cutoff), mid_s)


def largest_jumps_sum(path: StablePath, n: int, horizon: float = 1.0) -> float:
    """Sum of the n largest upward recorded jumps on [0, horizon] (all of them if fewer)."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    up = path.jump_sizes[(path.jump_sizes > 0) & (path.jump_times <= horizon)]
    return float(np.sort(up)[::-1][:n].sum())


def _jump_sum_task(args):
    params, n_list, count, dt, cutoff, rng = args
    out = np.empty((count, len(n_list)))
    for i in range(count):
        path = sample_path_with_jumps(params, 1.0, dt, cutoff, child_rng(rng, i))
        up = np.sort(path.jump_sizes[path.jump_sizes > 0])[::-1]
        csum = np.cumsum(up)
        out[i] = [csum[min(n, len(up)) - 1] if len(up) else 0.0 for n in n_list]
    return out


def jump_sum_means(
    params: StableParams,
    n_list,
    paths: int,
    rng: np.random.Generator,
    cutoff: float = 0.005,
    dt: float | None = None,
    batch: int = 1000,
    workers: int = 1,
):
    """Monte Carlo E[S_n] for each n, their standard errors and the log-log slope.

    Paths use the largest admissible step ``cutoff^alpha / 10`` unless
    ``dt`` is given.
    """
    n_list = [int(n) for n in n_list]
    if min(n_list) < 1:
        raise ConfigError("n must be at least 1")
    dt = cutoff**params.alpha / 10 if dt is None else dt
    tasks = [
        (params, n_list, min(batch, paths - lo), dt, cutoff, child_rng(rng, b))
        for b, lo in enumerate(range(0, paths, batch))
    ]
    S = np.vstack(ordered_map(_jump_sum_task, tasks, workers))
    mean = S.mean(axis=0)
    se = S.std(axis=0, ddof=1) / math.sqrt(paths)
    return mean, se, loglog_slope(np.asarray(n_list, float), mean)


def expected_largest_jumps_sum(params: StableParams, n: int) -> float:
    """Exact E[S_n] on [0, 1] from the Poisson point process of upward jumps.

    The k-th largest jump is ``(alpha Gamma_k / a_+)^(-1/alpha)`` with
    ``Gamma_k`` a Gamma(k) variable, so its mean is
    ``(a_+/alpha)^(1/alpha) Gamma(k - 1/alpha) / Gamma(k)``.
    """
    a = params.alpha
    k = np.arange(1, n + 1)
    terms = np.exp(special.gammaln(k - 1 / a) - special.gammaln(k))
    return float((params.a_plus / a) ** (1 / a) * terms.sum())


def positivity_estimate(params: StableParams, draws: int, rng: np.random.Generator, chunk: int = 250_000):
    """(P-hat[X_1 > 0], standard error) from ``draws`` increments at dt = 1."""
    hits = 0
    for b, lo in enumerate(range(0, draws, chunk)):
        x = sample_increment(params, 1.0, child_rng(rng, b), size=min(chunk, draws - lo))
        hits += int(np.count_nonzero(x > 0))
    p = hits / draws
    return p, math.sqrt(max(p * (1 - p), 1e-300) / draws)


# -- hitting-time batteries -----------------------------------------------------

def simulate_tau(
    params: StableParams,
    n: int,
    dt: float,
    horizon: float,
    rng: np.random.Generator,
    eta: float | None = None,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """First grid time t >= 1 with X_t - I_t <= eta, for n independent paths.

    Returns (tau, I_1); tau is +inf when censored at the horizon.  The
    default eta is ``dt^(1/alpha)``.
    """
    step_scale = params.scale * dt ** (1 / params.alpha)
    eta = float(dt ** (1 / params.alpha) if eta is None else eta)
    nsteps = int(round(horizon / dt))
    start = int(math.ceil(1 / dt - 1e-9))
    X = np.zeros(n)
    I = np.zeros(n)
    I1 = np.zeros(n)
    tau = np.full(n, np.inf)
    active = np.arange(n)
    step = 0
    while step < nsteps and active.size:
        m = min(chunk, nsteps - step)
        inc = _cms(params.alpha, params.skew_beta, (active.size, m), rng) * step_scale
        P = X[active, None] + np.cumsum(inc, axis=1)
        R = np.minimum(I[active, None], np.minimum.accumulate(P, axis=1))
        idx = step + 1 + np.arange(m)
        if step < start <= step + m:
            I1[active] = R[:, start - step - 1]
        hit = (P - R <= eta) & (idx >= start)[None, :]
        done = hit.any(axis=1)
        tau[active[done]] = idx[hit.argmax(axis=1)[done]] * dt
        X[active] = P[:, -1]
        I[active] = R[:, -1]
        active = active[~done]
        step += m
    return tau, I1


def loglog_slope(x: np.ndarray, y: np.ndarray) -> float:
    ok = (y > 0) & np.isfinite(y)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def _survival(samples_sorted: np.ndarray, xs: np.ndarray) -> np.ndarray:
    return 1.0 - np.searchsorted(samples_sorted, xs, side="left") / len(samples_sorted)


@dataclass
class TauReport:
    kappa: float
    paths: int
    horizon: float
    dt: float
    eta: float
    xs: np.ndarray
    surv_single: np.ndarray
    surv_pair: np.ndarray
    surv_conditioned: np.ndarray
    surv_product: np.ndarray
    slope_single: float
    slope_pair: float
    slope_conditioned: float
    ci_single: tuple
    ci_pair: tuple
    ci_conditioned: tuple
    independence_z: np.ndarray
    censored_fraction: float
    eta_half_slopes: tuple | None = None

    @property
    def target_single(self) -> float:
        return -self.kappa / 8

    @property
    def target_pair(self) -> float:
        return -self.kappa / 4

    def rows(self) -> list:
        out = []
        for k, x in enumerate(self.xs):
            out.append({
                "x": float(x),
                "surv_single": float(self.surv_single[k]),
                "surv_pair": float(self.surv_pair[k]),
                "surv_conditioned": float(self.surv_conditioned[k]),
                "surv_product": float(self.surv_product[k]),
                "independence_z": float(self.independence_z[k]),
            })
        return out

    def summary(self) -> dict:
        d = {
            "kappa": self.kappa, "paths": self.paths, "horizon": self.horizon, "dt": self.dt, "eta": self.eta,
            "slope_single": self.slope_single, "slope_pair": self.slope_pair,
            "slope_conditioned": self.slope_conditioned,
            "ci_single": list(self.ci_single), "ci_pair": list(self.ci_pair),
            "ci_conditioned": list(self.ci_conditioned),
            "target_single": self.target_single, "target_pair": self.target_pair,
            "max_independence_z": float(np.max(np.abs(self.independence_z))),
            "censored_fraction": self.censored_fraction,
        }
        if self.eta_half_slopes is not None:
            d["slope_single_eta_half"], d["slope_pair_eta_half"] = self.eta_half_slopes
        return d


def _tau_task(args):
    params, n, dt, horizon, rng, eta = args
    return simulate_tau(params, n, dt, horizon, rng, eta)


def _batched_tau(params, paths, dt, horizon, rng, eta, batch, workers=1):
    tasks = [
        (params, min(batch, paths - lo), dt, horizon, child_rng(rng, b), eta)
        for b, lo in enumerate(range(0, paths, batch))
    ]
    res = ordered_map(_tau_task, tasks, workers)
    return np.concatenate([t for t, _ in res]), np.concatenate([i for _, i in res])


def tau_statistics(
    params: StableParams,
    paths: int,
    horizon: float,
    rng: np.random.Generator,
    dt: float = 0.02,
    eta: float | None = None,
    fit_range: tuple | None = None,
    n_points: int = 12,
    bootstrap: int = 200,
    eta_check: bool = False,
    batch: int = 10_000,
    workers: int = 1,
) -> TauReport:
    """Tail exponents of tau^1 and of tau = tau^1 ^ tau^2.

    ``paths`` independent pairs (X^1, X^2) are simulated on a grid of step
    ``dt`` up to ``horizon``.  Survival functions are fitted on a log grid
    over ``fit_range`` (default [10, horizon/10]); confidence intervals
    come from a path bootstrap.
    """
    if paths < 10_000 or horizon < 1000:
        raise ConfigError("tau statistics need paths >= 1e4 and horizon >= 1e3")
    lo, hi = fit_range if fit_range is not None else (10.0, horizon / 10)
    if hi > horizon / 10 * (1 + 1e-12):
        raise ConfigError("fit range must end at or below horizon/10 (censoring)")
    eta = float(dt ** (1 / params.alpha) if eta is None else eta)
    t, i1 = _batched_tau(params, 2 * paths, dt, horizon, child_rng(rng, 0), eta, batch, workers)
    t1, t2 = t[:paths], t[paths:]
    i1_1 = i1[:paths]
    pair = np.minimum(t1, t2)
    cond = np.where(i1_1 >= -1, t1, -np.inf)
    xs = np.geomspace(lo, hi, n_points)

    def survs(a, b, p, c):
        s1 = _survival(np.sort(a), xs)
        s2 = _survival(np.sort(b), xs)
        sp = _survival(np.sort(p), xs)
        sc = _survival(np.sort(c), xs)
        return s1, s2, sp, sc

    s1, s2, sp, sc = survs(t1, t2, pair, cond)
    brng = child_rng(rng, 1)
    boot = np.empty((bootstrap, 3))
    for k in range(bootstrap):
        j = brng.integers(0, paths, paths)
        b1, _, bp, bc = survs(t1[j], t2[j], pair[j], cond[j])
        boot[k] = [loglog_slope(xs, b1), loglog_slope(xs, bp), loglog_slope(xs, bc)]
    ci = [tuple(np.nanpercentile(boot[:, c], [2.5, 97.5]).tolist()) for c in range(3)]

    prod = s1 * s2
    # delta-method standard error of log(sp) - log(s1) - log(s2)
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (1 - sp) / (paths * sp) + (1 - s1) / (paths * s1) + (1 - s2) / (paths * s2)
        z = (np.log(sp) - np.log(prod)) / np.sqrt(var)

    half = None
    if eta_check:
        th, _ = _batched_tau(params, 2 * paths, dt, horizon, child_rng(rng, 2), eta / 2, batch, workers)
        h1 = _survival(np.sort(th[:paths]), xs)
        hp = _survival(np.sort(np.minimum(th[:paths], th[paths:])), xs)
        half = (loglog_slope(xs, h1), loglog_slope(xs, hp))

    return TauReport(
        kappa=params.kappa, paths=paths, horizon=horizon, dt=dt, eta=eta, xs=xs,
        surv_single=s1, surv_pair=sp, surv_conditioned=sc, surv_product=prod,
        slope_single=loglog_slope(xs, s1), slope_pair=loglog_slope(xs, sp),
        slope_conditioned=loglog_slope(xs, sc),
        ci_single=ci[0], ci_pair=ci[1], ci_conditioned=ci[2],
        independence_z=z, censored_fraction=float(np.mean(~np.isfinite(t))),
        eta_half_slopes=half,
    )


@dataclass
class MomentReport:
    kappa: float
    M: np.ndarray
    paths: int
    neg_inf_mean: np.ndarray
    neg_inf_se: np.ndarray
    top_mean: np.ndarray
    top_se: np.ndarray
    log_slope: float
    log_slope_se: float
    decade_ratio: float
    extras: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [
            {"M": float(m), "neg_inf_mean": float(a), "neg_inf_se": float(b), "top_mean": float(c), "top_se": float(d)}
            for m, a, b, c, d in zip(self.M, self.neg_inf_mean, self.neg_inf_se, self.top_mean, self.top_se)
        ]

    def summary(self) -> dict:
        return {
            "kappa": self.kappa, "paths": self.paths, "log_slope": self.log_slope,
            "log_slope_se": self.log_slope_se, "decade_ratio": self.decade_ratio,
        }


def _simulate_moments(params, n, M_steps, dt, rng, eta, chunk=256):
    """Per pair and each M (in steps): I^1 at tau ^ M, and X^1_M - I^1_M on {tau >= M} (else 0)."""
    step_scale = params.scale * dt ** (1 / params.alpha)
    start = int(math.ceil(1 / dt - 1e-9))
    last = int(M_steps[-1])
    X = np.zeros((2, n))
    I = np.zeros((2, n))
    I_at = np.zeros((len(M_steps), n))
    top = np.zeros((len(M_steps), n))
    I_tau = np.zeros(n)
    tau_step = np.full(n, np.iinfo(np.int64).max)
    active = np.arange(n)
    step = 0
    while step < last and active.size:
        m = min(chunk, last - step)
        inc = _cms(params.alpha, params.skew_beta, (2, active.size, m), rng) * step_scale
        P = X[:, active, None] + np.cumsum(inc, axis=2)
        R = np.minimum(I[:, active, None], np.minimum.accumulate(P, axis=2))
        idx = step + 1 + np.arange(m)
        hit = ((P - R <= eta).any(axis=0)) & (idx >= start)[None, :]
        done = hit.any(axis=1)
        first = np.where(done, hit.argmax(axis=1), m)
        for j, ms in enumerate(M_steps):
            if step < ms <= step + m:
                col = int(ms - step - 1)
                alive = first >= col
                sel = active[alive]
                top[j, sel] = P[0, alive, col] - R[0, alive, col]
                I_at[j, sel] = R[0, alive, col]
        I_tau[active[done]] = R[0, done, first[done]]
        tau_step[active[done]] = idx[first[done]]
        X[:, active] = P[:, :, -1]
        I[:, active] = R[:, :, -1]
        active = active[~done]
        step += m
    I_min = np.where(tau_step[None, :] < np.asarray(M_steps)[:, None], I_tau[None, :], I_at)
    return I_min, top


def _moment_task(args):
    return _simulate_moments(*args)


def infimum_moments(
    params: StableParams,
    M_list,
    paths: int,
    rng: np.random.Generator,
    dt: float = 0.02,
    eta: float | None = None,
    batch: int = 20_000,
    workers: int = 1,
) -> MomentReport:
    """Monte Carlo -E[I^1_{tau ^ M}] and E[(X^1_M - I^1_M) 1{tau >= M}] for each M."""
    M = np.asarray(sorted(M_list), dtype=float)
    if len(M) < 3 or M[-1] / M[0] < 100 * (1 - 1e-12):
        raise ConfigError("M_list needs at least 3 values spanning two decades")
    eta = float(dt ** (1 / params.alpha) if eta is None else eta)
    M_steps = np.rint(M / dt).astype(np.int64)
    tasks = [
        (params, min(batch, paths - lo), M_steps, dt, child_rng(rng, b), eta)
        for b, lo in enumerate(range(0, paths, batch))
    ]
    res = ordered_map(_moment_task, tasks, workers)
    neg_inf = [-I for I, _ in res]
    top = [t for _, t in res]
    neg_inf = np.concatenate(neg_inf, axis=1)
    top = np.concatenate(top, axis=1)
    a_mean = neg_inf.mean(axis=1)
    a_se = neg_inf.std(axis=1, ddof=1) / math.sqrt(paths)
    t_mean = top.mean(axis=1)
    t_se = top.std(axis=1, ddof=1) / math.sqrt(paths)
    res = stats.linregress(np.log(M), a_mean)
    return MomentReport(
        kappa=params.kappa, M=M, paths=paths, neg_inf_mean=a_mean, neg_inf_se=a_se,
        top_mean=t_mean, top_se=t_se, log_slope=float(res.slope), log_slope_se=float(res.stderr),
        decade_ratio=float(t_mean[-1] / t_mean[0]) if t_mean[0] > 0 else math.inf,
    )
