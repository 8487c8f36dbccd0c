"""Secret carrier directions and sphere-cosine null statistics.

The detection test asks how improbable an observed cosine similarity would
be if the compared direction were uniform on the unit sphere. For a fixed
vector and a uniform random unit vector in R^d, P(cos >= c) is a regularized
incomplete-beta tail; per-class tails are combined with Fisher's method.
Both tails are also evaluated directly in log space so that verdicts stay
finite far beyond double-precision underflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

_LN10 = math.log(10.0)
_LENTZ_TINY = 1e-300
_MAX_ITER = 500


@dataclass(frozen=True)
class CarrierSet:
    """Per-class secret unit vectors in marker feature space."""

    vectors: np.ndarray  # (class_count, feature_dim) float32, unit rows
    seed: int

    def __post_init__(self):
        vecs = np.asarray(self.vectors, dtype=np.float32)
        if vecs.ndim != 2:
            raise ValueError("carrier matrix must be 2-D (classes x feature dim)")
        if vecs.shape[1] < 2:
            raise ValueError(f"feature dimension must be >= 2, got {vecs.shape[1]}")
        norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-6):
            raise ValueError("carrier rows must be unit vectors (|norm - 1| <= 1e-6)")
        object.__setattr__(self, "vectors", vecs)

    @property
    def class_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class HypothesisTestResult:
    """Per-class and combined sphere-cosine test outcome."""

    per_class_cosines: tuple[float, ...]
    per_class_log10p: tuple[float, ...]
    combined_log10p: float
    effective_dim: int

    def __post_init__(self):
        if any(lp > 1e-12 for lp in self.per_class_log10p):
            raise ValueError("per-class log10 p-values must be <= 0")
        if self.combined_log10p > 1e-12:
            raise ValueError("combined log10 p-value must be <= 0")


def generate_carriers(class_count: int, feature_dim: int, seed: int) -> CarrierSet:
    """Draw one uniform unit vector per class (Gaussian-normalize), seeded."""
    if class_count < 1:
        raise ValueError(f"class_count must be >= 1, got {class_count}")
    if feature_dim < 2:
        raise ValueError(f"feature_dim must be >= 2, got {feature_dim}")
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((class_count, feature_dim))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    return CarrierSet(vectors=vecs, seed=seed)


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _LENTZ_TINY:
        d = _LENTZ_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _LENTZ_TINY:
            d = _LENTZ_TINY
        c = 1.0 + aa / c
        if abs(c) < _LENTZ_TINY:
            c = _LENTZ_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _LENTZ_TINY:
            d = _LENTZ_TINY
        c = 1.0 + aa / c
        if abs(c) < _LENTZ_TINY:
            c = _LENTZ_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise RuntimeError(f"incomplete-beta continued fraction failed for a={a} b={b} x={x}")


def log_betainc(a: float, b: float, x: float) -> float:
    """Natural log of the regularized incomplete beta I_x(a, b).

    Evaluated in log space on the convergent side of the continued
    fraction, so tails far below double-precision underflow stay finite.
    """
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return -math.inf
    if x == 1.0:
        return 0.0
    if x < (a + 1.0) / (a + b + 2.0):
        lbeta = (
            special.gammaln(a + b)
            - special.gammaln(a)
            - special.gammaln(b)
            + a * math.log(x)
            + b * math.log1p(-x)
        )
        return lbeta + math.log(_betacf(a, b, x)) - math.log(a)
    # complement is the small side here, so 1 - I is representable
    comp = math.exp(log_betainc(b, a, 1.0 - x))
    return math.log1p(-comp)


def cosine_pvalue(c: float, d: int) -> float:
    """P(cos >= c) between a fixed vector and a uniform unit vector in R^d."""
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if not (-1.0 <= c <= 1.0):
        raise ValueError(f"cosine must lie in [-1, 1], got {c}")
    a = (d - 1) / 2.0
    if c >= 0.0:
        return 0.5 * special.betainc(a, 0.5, 1.0 - c * c)
    return 1.0 - cosine_pvalue(-c, d)


def log10_cosine_pvalue(c: float, d: int) -> float:
    """log10 of cosine_pvalue(c, d), computed in log space for deep tails."""
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if not (-1.0 <= c <= 1.0):
        raise ValueError(f"cosine must lie in [-1, 1], got {c}")
    a = (d - 1) / 2.0
    if c >= 0.0:
        lp = math.log(0.5) + log_betainc(a, 0.5, 1.0 - c * c)
        return lp / _LN10
    return math.log10(1.0 - cosine_pvalue(-c, d))


def _gamma_p_series(s: float, x: float) -> float:
    """Series for the regularized lower incomplete gamma P(s, x), x < s + 1."""
    term = 1.0 / s
    total = term
    n = s
    for _ in range(_MAX_ITER):
        n += 1.0
        term *= x / n
        total += term
        if abs(term) < abs(total) * 1e-16:
            return total * math.exp(-x + s * math.log(x) - special.gammaln(s))
    raise RuntimeError(f"incomplete-gamma series failed for s={s} x={x}")


def _gamma_q_cf(s: float, x: float) -> float:
    """Continued fraction H with Q(s, x) = exp(-x + s ln x - lnGamma(s)) * H."""
    b = x + 1.0 - s
    c = 1.0 / _LENTZ_TINY
    d = 1.0 / b if abs(b) > _LENTZ_TINY else 1.0 / _LENTZ_TINY
    h = d
    for i in range(1, _MAX_ITER + 1):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < _LENTZ_TINY:
            d = _LENTZ_TINY
        c = b + an / c
        if abs(c) < _LENTZ_TINY:
            c = _LENTZ_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            return h
    raise RuntimeError(f"incomplete-gamma continued fraction failed for s={s} x={x}")


def log_chi2_sf(x: float, dof: int) -> float:
    """Natural log of the chi-square upper tail, stable for huge statistics."""
    if dof < 1:
        raise ValueError(f"degrees of freedom must be >= 1, got {dof}")
    if x <= 0.0:
        return 0.0
    s = dof / 2.0
    t = x / 2.0
    if t < s + 1.0:
        return math.log1p(-_gamma_p_series(s, t))
    return -t + s * math.log(t) - special.gammaln(s) + math.log(_gamma_q_cf(s, t))


def combine_pvalues(per_class_p) -> float:
    """Fisher's method: chi-square upper tail of -2 sum(ln p) at 2m dof."""
    ps = np.asarray(per_class_p, dtype=np.float64)
    if ps.size == 0:
        raise ValueError("need at least one p-value to combine")
    if np.any(ps <= 0.0) or np.any(ps > 1.0):
        raise ValueError("p-values must lie in (0, 1]")
    stat = -2.0 * float(np.sum(np.log(ps)))
    return math.exp(log_chi2_sf(stat, 2 * ps.size))


def combine_log10_pvalues(per_class_log10p) -> float:
    """Fisher combination straight from log10 p-values; returns log10 of it."""
    lps = np.asarray(per_class_log10p, dtype=np.float64)
    if lps.size == 0:
        raise ValueError("need at least one p-value to combine")
    if np.any(lps > 0.0):
        raise ValueError("log10 p-values must be <= 0")
    stat = -2.0 * _LN10 * float(np.sum(lps))
    return log_chi2_sf(stat, 2 * lps.size) / _LN10


def mc_null_samples(d: int, count: int, seed: int, chunk_size: int = 200_000) -> np.ndarray:
    """Cosines between a fixed axis and `count` uniform unit vectors in R^d.

    Brute-force sampling oracle for cosine_pvalue. Deterministic in seed;
    generated in chunks to bound memory.
    """
    if d < 2:
        raise ValueError(f"dimension must be >= 2, got {d}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    out = np.empty(count, dtype=np.float64)
    done = 0
    while done < count:
        n = min(chunk_size, count - done)
        g = rng.standard_normal((n, d))
        out[done : done + n] = g[:, 0] / np.linalg.norm(g, axis=1)
        done += n
    return out
