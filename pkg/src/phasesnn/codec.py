"""Single-spike phase coding.

A value x in [0, 1) is represented by one spike whose phase t in {1..T}
decodes to Q**-t, or by no spike at all when x falls below the smallest
representable band. Two variants are supported:

* floor: x maps to the largest Q**-t not exceeding x.
* round: fire cutoffs sit at the midpoints between adjacent phase values,
  so x maps to the nearest phase value. A value exactly on a midpoint does
  NOT clear the cutoff (cutoff comparisons are strict) and takes the later,
  smaller-valued phase; the neuron simulator uses the same strict rule so
  encoder and simulator agree bit for bit.

External inputs use multi-spike binary coding instead: a T-bit mask whose
set bits sum to the truncated base-2 expansion of the input.

In arrays, phase 0 stands for "no spike"; the scalar API uses None.
"""

from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

NO_SPIKE = 0

_MODES = ("round", "floor")


@dataclass(frozen=True)
class CodecConfig:
    """Base, timestep and encoding variant for one spike stream.

    q = 1.0 is accepted as a degenerate analysis point (everything
    underflows); conversion paths require q > 1.
    """

    q: float
    t: int
    mode: str = "round"

    def __post_init__(self):
        if not (1.0 <= self.q <= 2.0):
            raise ValueError(f"base q must lie in [1, 2], got {self.q}")
        if self.t < 1:
            raise ValueError(f"timestep t must be >= 1, got {self.t}")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")


def midpoint_factor(q: float) -> float:
    """Ratio between a phase value and the fire cutoff just above it."""
    return (q + 1.0) / (2.0 * q)


@lru_cache(maxsize=None)
def _tables(q: float, t: int):
    """(phase values Q**-1..Q**-T, round cutoffs, both ascending copies).

    Values come from scalar libm pow; numpy's vectorised pow can differ by
    one ulp, and every consumer must compare against identical floats.
    """
    values = np.array([math.pow(q, -p) for p in range(1, t + 1)])
    cutoffs = midpoint_factor(q) * values
    values_asc = np.ascontiguousarray(values[::-1])
    cutoffs_asc = np.ascontiguousarray(cutoffs[::-1])
    for arr in (values, cutoffs, values_asc, cutoffs_asc):
        arr.setflags(write=False)
    return values, cutoffs, values_asc, cutoffs_asc


def phase_values(cfg: CodecConfig) -> np.ndarray:
    """Decoded value of each phase 1..T (descending)."""
    return _tables(cfg.q, cfg.t)[0]


def fire_cutoffs(cfg: CodecConfig) -> np.ndarray:
    """Threshold a value must clear to fire at each phase 1..T."""
    values, cutoffs, _, _ = _tables(cfg.q, cfg.t)
    return cutoffs if cfg.mode == "round" else values


def _check_domain(x):
    if not (0.0 <= x < 1.0):
        raise ValueError(f"value {x} outside [0, 1)")


def encode_round(x: float, cfg: CodecConfig):
    """Phase of the round-off single-spike code of x, or None.

    Fires at the smallest t with x strictly above the midpoint cutoff
    Q**-t * (Q+1)/(2Q); values at or below the last cutoff emit nothing.
    """
    if cfg.mode != "round":
        raise ValueError("encode_round requires a round-mode config")
    _check_domain(x)
    _, cutoffs, _, _ = _tables(cfg.q, cfg.t)
    if not x > cutoffs[-1]:
        return None
    if x > cutoffs[0]:
        return 1
    # Log seed, then nudge so that cutoffs[p-1] < x <= cutoffs[p-2].
    p = int(math.floor(math.log(midpoint_factor(cfg.q) / x) / math.log(cfg.q))) + 1
    p = min(max(p, 1), cfg.t)
    while p > 1 and x > cutoffs[p - 2]:
        p -= 1
    while p <= cfg.t and not x > cutoffs[p - 1]:
        p += 1
    return p


def encode_floor(x: float, cfg: CodecConfig):
    """Phase of the naive (floored) single-spike code of x, or None.

    Fires at the smallest t with x >= Q**-t; values below Q**-T emit
    nothing. Exactly representable values encode losslessly.
    """
    if cfg.mode != "floor":
        raise ValueError("encode_floor requires a floor-mode config")
    _check_domain(x)
    values, _, _, _ = _tables(cfg.q, cfg.t)
    if x < values[-1]:
        return None
    if x >= values[0]:
        return 1
    p = int(math.ceil(-math.log(x) / math.log(cfg.q)))
    p = min(max(p, 1), cfg.t)
    while p > 1 and x >= values[p - 2]:
        p -= 1
    while p <= cfg.t and x < values[p - 1]:
        p += 1
    return p


def encode(x: float, cfg: CodecConfig):
    return encode_round(x, cfg) if cfg.mode == "round" else encode_floor(x, cfg)


def _encode_round_raw(xs: np.ndarray, q: float, t: int) -> np.ndarray:
    _, _, _, cutoffs_asc = _tables(q, t)
    # count of cutoffs >= x; all T of them -> no spike
    count = t - np.searchsorted(cutoffs_asc, xs, side="left")
    return np.where(count < t, count + 1, NO_SPIKE)


def _encode_floor_raw(xs: np.ndarray, q: float, t: int) -> np.ndarray:
    _, _, values_asc, _ = _tables(q, t)
    count = t - np.searchsorted(values_asc, xs, side="right")
    return np.where(count < t, count + 1, NO_SPIKE)


def encode_array(xs: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    """Vectorised encode; returns int64 phases with 0 meaning no spike."""
    xs = np.asarray(xs, dtype=np.float64)
    if xs.size and (xs.min() < 0.0 or xs.max() >= 1.0):
        raise ValueError("values outside [0, 1)")
    if cfg.mode == "round":
        return _encode_round_raw(xs, cfg.q, cfg.t)
    return _encode_floor_raw(xs, cfg.q, cfg.t)


def decode(phase, cfg: CodecConfig) -> float:
    """Value carried by a spike at `phase` (None or 0 decodes to 0)."""
    if phase is None or phase == NO_SPIKE:
        return 0.0
    if not 1 <= phase <= cfg.t:
        raise ValueError(f"phase {phase} outside 1..{cfg.t}")
    return float(phase_values(cfg)[phase - 1])


def decode_array(phases: np.ndarray, cfg: CodecConfig) -> np.ndarray:
    phases = np.asarray(phases)
    values = phase_values(cfg)
    idx = np.clip(phases - 1, 0, cfg.t - 1)
    return np.where(phases > 0, values[idx], 0.0)


def encode_input(x: float, t: int) -> np.ndarray:
    """T-bit binary-coded spike mask of x in [0, 1], most significant first."""
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"input value {x} outside [0, 1]")
    return encode_input_array(np.float64(x), t)


def encode_input_array(xs: np.ndarray, t: int) -> np.ndarray:
    """Binary-coded masks for an array, shape xs.shape + (t,)."""
    if t > 52:
        raise ValueError("timestep too large for exact binary coding")
    xs = np.asarray(xs, dtype=np.float64)
    # x * 2**t is an exact scaling; truncation gives the T-bit expansion
    n = np.minimum(np.floor(xs * 2.0**t).astype(np.int64), 2**t - 1)
    shifts = np.arange(t - 1, -1, -1, dtype=np.int64)
    return ((n[..., None] >> shifts) & 1).astype(bool)


def decode_input(bits: np.ndarray) -> float:
    """Value of a binary-coded mask: sum of 2**-t over set bits."""
    return float(decode_input_array(np.asarray(bits)))


def decode_input_array(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits)
    t = bits.shape[-1]
    weights = np.power(2.0, -np.arange(1, t + 1, dtype=np.float64))
    return bits.astype(np.float64) @ weights


def mape(cfg: CodecConfig, mu: float, sigma: float, points: int = 1_000_000) -> float:
    """Mean absolute percentage error of round-off coding under a Gaussian.

    Composite trapezoid over [0, 1] with `points` uniform nodes. The density
    is not renormalised to the interval. The integrand at x -> 0+ tends to
    the density itself (the code underflows to 0 there, so |x - 0|/x = 1).
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    xs = np.linspace(0.0, 1.0, points)
    phases = _encode_round_raw(xs, cfg.q, cfg.t)
    xbar = decode_array(phases, cfg)
    ratio = np.ones_like(xs)
    pos = xs > 0
    ratio[pos] = np.abs(xs[pos] - xbar[pos]) / xs[pos]
    pdf = np.exp(-0.5 * ((xs - mu) / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    return float(np.trapezoid(ratio * pdf, xs))


def optimal_q(t: int, mu: float, sigma: float, q_grid, points: int = 1_000_000) -> float:
    """Grid argmin of the coding error; ties resolve to the smaller base."""
    grid = [float(q) for q in q_grid]
    if not grid:
        raise ValueError("empty q grid")
    best_q, best_err = None, math.inf
    for q in grid:
        err = mape(CodecConfig(q, t), mu, sigma, points=points)
        if err < best_err or (err == best_err and q < best_q):
            best_q, best_err = q, err
    return best_q
