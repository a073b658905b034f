"""Acceptance-length model for leap decoding.

Everything here is closed-form or Monte Carlo over a single modeling
assumption: the probability that the draft at horizon ``i`` survives greedy
verification decays exponentially, ``f(i) = exp(-gamma * (i - 1))``, and
per-position accept events are independent. Under that model the expected
number of tokens accepted per round is a sum of cumulative products, and the
leap strategy (stride k > 1) trades per-position confidence for a longer
horizon ``k*(n-1)+1``. ``delta_decomposition`` splits the leap-vs-vanilla gap
into a non-positive head-to-head term and a strictly positive tail term;
``crossover_gamma`` locates the attenuation level where the trade stops
paying off.

All computation is float64 with products accumulated as sums of exponents,
so large gamma*m^2 grids underflow to 0.0 instead of losing precision.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AttenuationParams",
    "LengthReport",
    "BoundDiagnostics",
    "attenuation",
    "leap_horizon",
    "expected_length_vanilla",
    "expected_length_leap",
    "delta_decomposition",
    "crossover_gamma",
    "bound_diagnostics",
    "monte_carlo_length",
    "emit_curves",
    "fit_gamma",
]


@dataclass(frozen=True)
class AttenuationParams:
    """Attenuation coefficient plus the head-count/stride pair."""

    gamma: float
    n_heads: int
    stride: int = 1

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.n_heads < 1:
            raise ValueError(f"n_heads must be >= 1, got {self.n_heads}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")


def attenuation(i, gamma: float):
    """Confidence decay f(i) = exp(-gamma * (i - 1)) at horizon i >= 1."""
    i = np.asarray(i, dtype=np.float64)
    if np.any(i < 1):
        raise ValueError("horizon index must be >= 1")
    out = np.exp(-float(gamma) * (i - 1.0))
    return float(out) if out.ndim == 0 else out


def leap_horizon(n_heads: int, stride: int) -> int:
    """Draft length of the leap strategy: k*(n-1)+1 (equals n when k=1)."""
    return stride * (n_heads - 1) + 1


def _leap_exponents(params: AttenuationParams) -> np.ndarray:
    """Per-position decay exponents for the leap draft.

    Position i (1-based) carries factor f(i + ((i-1) mod k)), i.e. exponent
    gamma * (i + ((i-1) mod k) - 1). Returned as the cumulative sums whose
    exp gives the survival products.
    """
    horizon = leap_horizon(params.n_heads, params.stride)
    i = np.arange(1, horizon + 1, dtype=np.float64)
    shift = np.mod(i - 1, params.stride)
    return np.cumsum(params.gamma * (i + shift - 1.0))


def expected_length_vanilla(params: AttenuationParams) -> float:
    """E[L] for the vanilla strategy: sum_{m=1..n} exp(-gamma*m(m-1)/2)."""
    m = np.arange(1, params.n_heads + 1, dtype=np.float64)
    exponents = params.gamma * m * (m - 1.0) / 2.0
    return float(np.sum(np.exp(-exponents)))


def expected_length_leap(params: AttenuationParams) -> float:
    """E[L] for the leap strategy over the extended horizon k*(n-1)+1."""
    return float(np.sum(np.exp(-_leap_exponents(params))))


@dataclass(frozen=True)
class LengthReport:
    """Leap-vs-vanilla expected lengths and the gap decomposition.

    delta1 collects positions 1..n where the leap factor can only lose
    (f(i + (i-1 mod k)) <= f(i)); delta2 is the pure gain from positions
    n+1..k(n-1)+1 that the vanilla strategy never reaches.
    """

    params: AttenuationParams
    expected_vanilla: float
    expected_leap: float
    delta: float
    delta1: float
    delta2: float
    marginal_vanilla: np.ndarray = field(repr=False)
    marginal_leap: np.ndarray = field(repr=False)
    joint_vanilla: np.ndarray = field(repr=False)
    joint_leap: np.ndarray = field(repr=False)


def delta_decomposition(params: AttenuationParams) -> LengthReport:
    """Split E[L]_leap - E[L]_vanilla into delta1 + delta2.

    delta1 = sum_{m=1..n} [prod_leap(m) - prod_vanilla(m)]  (<= 0)
    delta2 = sum_{m=n+1..k(n-1)+1} prod_leap(m)             (> 0 for k >= 2)
    """
    n = params.n_heads
    horizon = leap_horizon(n, params.stride)

    i = np.arange(1, horizon + 1, dtype=np.float64)
    shift = np.mod(i - 1, params.stride)
    marginal_leap = np.exp(-params.gamma * (i + shift - 1.0))
    joint_leap = np.exp(-_leap_exponents(params))

    iv = np.arange(1, n + 1, dtype=np.float64)
    marginal_vanilla = np.exp(-params.gamma * (iv - 1.0))
    joint_vanilla = np.exp(-params.gamma * iv * (iv - 1.0) / 2.0)

    e_vanilla = float(joint_vanilla.sum())
    e_leap = float(joint_leap.sum())
    delta1 = float(np.sum(joint_leap[:n] - joint_vanilla))
    delta2 = float(np.sum(joint_leap[n:]))

    return LengthReport(
        params=params,
        expected_vanilla=e_vanilla,
        expected_leap=e_leap,
        delta=e_leap - e_vanilla,
        delta1=delta1,
        delta2=delta2,
        marginal_vanilla=marginal_vanilla,
        marginal_leap=marginal_leap,
        joint_vanilla=joint_vanilla,
        joint_leap=joint_leap,
    )


def _delta_on_grid(gammas: np.ndarray, n_heads: int, stride: int) -> np.ndarray:
    """Vectorized delta(gamma) over a gamma grid (for scans/bisection)."""
    horizon = leap_horizon(n_heads, stride)
    i = np.arange(1, horizon + 1, dtype=np.float64)
    shift = np.mod(i - 1, stride)
    leap_cum = np.cumsum(i + shift - 1.0)
    iv = np.arange(1, n_heads + 1, dtype=np.float64)
    van_cum = iv * (iv - 1.0) / 2.0
    g = np.asarray(gammas, dtype=np.float64)[:, None]
    e_leap = np.exp(-g * leap_cum[None, :]).sum(axis=1)
    e_van = np.exp(-g * van_cum[None, :]).sum(axis=1)
    return e_leap - e_van


def crossover_gamma(
    n_heads: int,
    stride: int = 2,
    tol: float = 1e-9,
    gamma_max: float = 50.0,
    scan_step: float = 1e-3,
) -> float:
    """Largest root of delta(gamma) = 0 on (0, gamma_max], by scan + bisection.

    Below the returned gamma* the leap strategy wins (delta > 0). Raises if
    the scan finds no sign change, reporting the delta sign over the bracket.
    """
    if n_heads < 2 or stride < 2:
        raise ValueError("crossover requires n_heads >= 2 and stride >= 2")
    grid = np.arange(scan_step, gamma_max + scan_step, scan_step)
    deltas = _delta_on_grid(grid, n_heads, stride)
    signs = np.sign(deltas)
    flips = np.nonzero(signs[:-1] * signs[1:] < 0)[0]
    if len(flips) == 0:
        raise ValueError(
            f"no sign change of delta on (0, {gamma_max}]: "
            f"delta({grid[0]:.3g})={deltas[0]:.3g}, "
            f"delta({grid[-1]:.3g})={deltas[-1]:.3g}"
        )
    lo, hi = float(grid[flips[-1]]), float(grid[flips[-1] + 1])

    def delta_at(g: float) -> float:
        return float(_delta_on_grid(np.array([g]), n_heads, stride)[0])

    d_lo = delta_at(lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d_mid = delta_at(mid)
        if abs(d_mid) <= tol:
            assert mid > 0.0
            return mid
        if d_mid * d_lo > 0:
            lo, d_lo = mid, d_mid
        else:
            hi = mid
    root = 0.5 * (lo + hi)
    if abs(delta_at(root)) > tol:
        raise ValueError(f"bisection did not reach |delta| <= {tol}")
    return root


@dataclass(frozen=True)
class BoundDiagnostics:
    """One grid point of the k=2 delta bounds.

    The upper bound on |delta1| is an exact inequality and is asserted by
    callers; the delta2 lower bound comes from an asymptotic step and is
    reported only.
    """

    gamma: float
    n_heads: int
    delta1_abs: float
    delta1_upper: float
    delta1_ok: bool
    delta2: float
    delta2_lower: float
    delta2_above_lower: bool


def bound_diagnostics(params: AttenuationParams) -> BoundDiagnostics:
    """Evaluate |delta1| <= (1/2)(1 - exp(-gamma (n+1)^2 / 2)) and the
    asymptotic delta2 >~ exp(-2 gamma n^2) / (2 n sqrt(gamma)) at one point.

    Only defined for stride 2: the bound derivation resolves that case.
    """
    if params.stride != 2:
        raise ValueError("bound diagnostics are derived for stride 2 only")
    rep = delta_decomposition(params)
    g, n = params.gamma, params.n_heads
    upper = 0.5 * (1.0 - math.exp(-g * (n + 1) ** 2 / 2.0))
    if g > 0:
        lower = math.exp(-2.0 * g * n * n) / (2.0 * n * math.sqrt(g))
    else:
        lower = float("inf")
    return BoundDiagnostics(
        gamma=g,
        n_heads=n,
        delta1_abs=abs(rep.delta1),
        delta1_upper=upper,
        delta1_ok=abs(rep.delta1) <= upper + 1e-15,
        delta2=rep.delta2,
        delta2_lower=lower,
        delta2_above_lower=rep.delta2 >= lower,
    )


def monte_carlo_length(
    params: AttenuationParams,
    trials: int,
    seed: int,
    strategy: str = "leap",
) -> tuple[float, float]:
    """Simulate accepted length as independent per-position Bernoulli accepts.

    Position i succeeds with probability f(i) (vanilla) or
    f(i + (i-1) mod k) (leap); L is the run of initial successes, capped at
    the horizon. Returns (sample mean, standard error).
    """
    if trials < 10_000:
        raise ValueError("need at least 1e4 trials for a meaningful estimate")
    if strategy == "leap":
        horizon = leap_horizon(params.n_heads, params.stride)
        i = np.arange(1, horizon + 1, dtype=np.float64)
        probs = np.exp(-params.gamma * (i + np.mod(i - 1, params.stride) - 1.0))
    elif strategy == "vanilla":
        horizon = params.n_heads
        i = np.arange(1, horizon + 1, dtype=np.float64)
        probs = np.exp(-params.gamma * (i - 1.0))
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    rng = np.random.default_rng(seed)
    lengths = np.empty(trials, dtype=np.int64)
    # chunked so a 1e6-trial run stays within a few tens of MB
    chunk = max(1, min(trials, 200_000))
    done = 0
    while done < trials:
        size = min(chunk, trials - done)
        fail = rng.random((size, horizon)) >= probs[None, :]
        any_fail = fail.any(axis=1)
        first_fail = np.argmax(fail, axis=1)
        lengths[done : done + size] = np.where(any_fail, first_fail, horizon)
        done += size
    mean = float(lengths.mean())
    stderr = float(lengths.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return mean, stderr


def emit_curves(gammas, strides, n_heads: int, out_path) -> None:
    """Write the marginal / joint / expected-length curves as CSV.

    Columns: panel,k,gamma,i_or_m,value. Panel a holds the per-position
    marginal, panel b the cumulative products, panel c one row per (k, gamma)
    with the expected length.
    """
    gammas = list(gammas)
    strides = list(strides)
    if not gammas or not strides:
        raise ValueError("gamma and stride grids must be non-empty")
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["panel", "k", "gamma", "i_or_m", "value"])
        for k in strides:
            for gamma in gammas:
                rep = delta_decomposition(AttenuationParams(gamma, n_heads, k))
                for i, v in enumerate(rep.marginal_leap, start=1):
                    writer.writerow(["a", k, gamma, i, f"{v:.12g}"])
                for m, v in enumerate(rep.joint_leap, start=1):
                    writer.writerow(["b", k, gamma, m, f"{v:.12g}"])
                horizon = leap_horizon(n_heads, k)
                writer.writerow(["c", k, gamma, horizon, f"{rep.expected_leap:.12g}"])


def fit_gamma(positions, top1_accuracy) -> float:
    """Least-squares attenuation fit: slope of log accuracy vs position - 1.

    Convenience for turning a measured per-position accuracy curve into a
    gamma estimate; zero/negative accuracies are floored at 1e-12.
    """
    pos = np.asarray(positions, dtype=np.float64)
    acc = np.maximum(np.asarray(top1_accuracy, dtype=np.float64), 1e-12)
    x = pos - 1.0
    y = np.log(acc)
    a = np.vstack([x, np.ones_like(x)]).T
    slope, _ = np.linalg.lstsq(a, y, rcond=None)[0]
    return float(-slope)
