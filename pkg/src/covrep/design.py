"""Rerandomization with the Mahalanobis balance criterion (ReM).

An assignment of ``m1`` treated out of ``m`` units is accepted when

    M = m * r1 * r0 * tau_x' S^{-1} tau_x  <=  a

where ``tau_x`` is the treated-minus-control covariate mean difference and
``S`` the sample covariance (denominator m - 1). Balance statistics are
computed on whitened covariates so large batches of candidate assignments
cost one matrix product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Rng, as_generator, chi2_cdf, chi2_inv

MAX_DRAWS = 1_000_000
RIDGE = 1e-8


class DesignError(ValueError):
    """Invalid assignment or an unattainable acceptance threshold."""


@dataclass
class Assignment:
    treat: np.ndarray

    def __post_init__(self):
        self.treat = np.asarray(self.treat, dtype=np.int64)

    @property
    def m(self) -> int:
        return self.treat.size

    @property
    def m1(self) -> int:
        return int(self.treat.sum())

    @property
    def m0(self) -> int:
        return self.m - self.m1


@dataclass
class BalanceStat:
    M: float
    tau_x: np.ndarray
    threshold: float = math.inf
    accepted: bool = True


@dataclass
class DesignExperimentReport:
    var_rem: float
    var_cr: float
    ratio: float
    reps: int
    accept_rate: float
    threshold: float
    covariates_mode: str
    q: int
    p_a: float


def _as_matrix(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    return Z[:, None] if Z.ndim == 1 else Z


class Balancer:
    """Precomputed whitening of a covariate matrix for fast Mahalanobis distances."""

    def __init__(self, Z):
        Z = _as_matrix(Z)
        m, q = Z.shape
        if m < 4:
            raise DesignError("need at least 4 units")
        self.m, self.q = m, q
        Zc = Z - Z.mean(axis=0)
        S = Zc.T @ Zc / (m - 1)
        # ridge only for singular S (q >= m or collinear covariates), so the
        # distance stays exactly affine invariant otherwise
        L = None
        if q < m:
            try:
                L = np.linalg.cholesky(S)
            except np.linalg.LinAlgError:
                L = None
            if L is not None and np.min(np.diag(L)) ** 2 <= RIDGE * np.trace(S) / q:
                L = None
        if L is None:
            L = np.linalg.cholesky(S + RIDGE * np.trace(S) / q * np.eye(q))
        # rows of W are whitened, centered covariates: W' W / (m - 1) = I
        self.W = np.linalg.solve(L, Zc.T).T
        self.Zc = Zc

    def distances(self, T: np.ndarray) -> np.ndarray:
        """Mahalanobis distance for each row of a 0/1 assignment matrix (B, m)."""
        T = np.atleast_2d(T)
        m1 = T.sum(axis=1)
        m0 = self.m - m1
        if np.any(m1 < 2) or np.any(m0 < 2):
            raise DesignError("each arm needs at least 2 units")
        # centered covariates: control mean = -(m1/m0) * treated mean
        tw = (T @ self.W) * (self.m / (m1 * m0))[:, None]
        r1, r0 = m1 / self.m, m0 / self.m
        return self.m * r1 * r0 * np.einsum("ij,ij->i", tw, tw)


def mahalanobis(Z, assignment) -> BalanceStat:
    """Balance of one assignment: (M, treated-minus-control covariate means)."""
    Z = _as_matrix(Z)
    t = np.asarray(assignment.treat if isinstance(assignment, Assignment) else assignment, dtype=np.int64)
    if t.size != Z.shape[0]:
        raise DesignError("assignment length does not match covariates")
    m1 = int(t.sum())
    if m1 < 2 or t.size - m1 < 2:
        raise DesignError("each arm needs at least 2 units")
    tau_x = Z[t == 1].mean(axis=0) - Z[t == 0].mean(axis=0)
    M = float(Balancer(Z).distances(t[None, :])[0])
    return BalanceStat(M, tau_x)


def complete_randomizations(m: int, m1: int, count: int, gen: np.random.Generator) -> np.ndarray:
    """``count`` uniform assignments with exactly m1 treated, as a (count, m) 0/1 matrix."""
    keys = gen.random((count, m))
    order = np.argpartition(keys, m1 - 1, axis=1)[:, :m1] if m1 < m else np.tile(np.arange(m), (count, 1))
    T = np.zeros((count, m), dtype=np.float64)
    np.put_along_axis(T, order, 1.0, axis=1)
    return T


def threshold(Z, m1: int, p_a: float, mode: str = "chisq", rng=0, n_mc: int = 10_000) -> float:
    """Acceptance threshold with acceptance probability ``p_a``; +inf when p_a == 1."""
    if not 0.0 < p_a <= 1.0:
        raise DesignError(f"acceptance probability must be in (0, 1], got {p_a}")
    if p_a == 1.0:
        return math.inf
    Z = _as_matrix(Z)
    if mode == "chisq":
        return chi2_inv(p_a, Z.shape[1])
    if mode == "mc":
        bal = Balancer(Z)
        gen = as_generator(rng)
        Ms = []
        left = n_mc
        while left > 0:
            k = min(left, 2000)
            Ms.append(bal.distances(complete_randomizations(bal.m, m1, k, gen)))
            left -= k
        return float(np.quantile(np.concatenate(Ms), p_a))
    raise DesignError(f"unknown threshold mode {mode!r}")


class ReMSampler:
    """Draws accepted assignments by rejection from complete randomization."""

    def __init__(self, Z, m1: int, a: float, batch: int = 1000):
        self.bal = Balancer(Z)
        self.m1 = m1
        self.a = a
        self.batch = batch
        self.draws = 0
        self.accepted = 0

    def sample(self, count: int, gen: np.random.Generator) -> tuple:
        """``count`` accepted assignments (count, m) and their distances."""
        got_T, got_M = [], []
        need = count
        budget = MAX_DRAWS * count
        while need > 0:
            if self.draws >= budget:
                raise DesignError(f"no acceptance within {MAX_DRAWS} draws per assignment; threshold too tight")
            T = complete_randomizations(self.bal.m, self.m1, self.batch, gen)
            M = self.bal.distances(T)
            self.draws += self.batch
            ok = np.flatnonzero(M <= self.a)[:need]
            self.accepted += ok.size
            got_T.append(T[ok])
            got_M.append(M[ok])
            need -= ok.size
        return np.vstack(got_T), np.concatenate(got_M)

    @property
    def accept_rate(self) -> float:
        return self.accepted / self.draws if self.draws else float("nan")


def rem_sample(Z, m1: int, p_a: float, rng, threshold_mode: str = "chisq", a: float | None = None):
    """One ReM assignment: redraw complete randomizations until M <= a."""
    Z = _as_matrix(Z)
    if a is None:
        a = threshold(Z, m1, p_a, threshold_mode, rng=Rng(0).child("threshold") if not isinstance(rng, Rng) else rng.child("threshold"))
    gen = as_generator(rng)
    bal = Balancer(Z)
    for _ in range(MAX_DRAWS):
        t = complete_randomizations(bal.m, m1, 1, gen)[0]
        M = float(bal.distances(t[None, :])[0])
        if M <= a:
            tau_x = Z[t == 1].mean(axis=0) - Z[t == 0].mean(axis=0)
            return Assignment(t.astype(np.int64)), BalanceStat(M, tau_x, a, True)
    raise DesignError(f"no acceptance within {MAX_DRAWS} draws; threshold too tight")


def diff_in_means(assignment, y) -> float:
    t = np.asarray(assignment.treat if isinstance(assignment, Assignment) else assignment)
    y = np.asarray(y, dtype=np.float64)
    if not (t == 1).any() or not (t == 0).any():
        raise DesignError("difference in means needs both arms nonempty")
    return float(y[t == 1].mean() - y[t == 0].mean())


def _estimates(T: np.ndarray, y1: np.ndarray, y0: np.ndarray) -> np.ndarray:
    """Difference-in-means for each assignment row, using the matching potential outcomes."""
    m1 = T.sum(axis=1)
    return (T @ y1) / m1 - ((1.0 - T) @ y0) / (T.shape[1] - m1)


def variance_ratio_experiment(
    task,
    covariates=None,
    p_a: float = 0.01,
    reps: int = 2000,
    rng=0,
    treated_fraction: float = 0.5,
    threshold_mode: str = "chisq",
    mode_name: str | None = None,
) -> DesignExperimentReport:
    """Monte Carlo variance of the difference in means under ReM vs complete randomization.

    ``covariates`` is the matrix balanced by ReM (raw X when None). Complete
    randomization draws come from their own stream, so two calls on the same
    task and seed share the denominator exactly.
    """
    if reps < 100:
        raise ValueError("reps must be >= 100")
    if not task.has_potential_outcomes:
        raise ValueError("variance experiments need potential outcomes")
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    Z = task.X if covariates is None else _as_matrix(covariates)
    m = Z.shape[0]
    m1 = int(round(treated_fraction * m))
    a = threshold(Z, m1, p_a, threshold_mode, rng=rng.child("design/threshold"))
    sampler = ReMSampler(Z, m1, a)
    T_rem, _ = sampler.sample(reps, rng.child("design/rem").generator())
    T_cr = complete_randomizations(m, m1, reps, rng.child("design/cr").generator())
    var_rem = float(np.var(_estimates(T_rem, task.y1, task.y0), ddof=1))
    var_cr = float(np.var(_estimates(T_cr, task.y1, task.y0), ddof=1))
    return DesignExperimentReport(
        var_rem,
        var_cr,
        var_rem / var_cr,
        reps,
        sampler.accept_rate,
        a,
        mode_name or ("raw" if covariates is None else "representation"),
        Z.shape[1],
        p_a,
    )


def _variance_factor(q: int, p: float) -> float:
    """Variance of the first coordinate of N(0, I_q) given its squared norm is below the p-quantile."""
    return chi2_cdf(chi2_inv(p, q), q + 2) / p


def theoretical_ratio(d: int, s: int, p_a: float) -> float:
    """Asymptotic ReM variance ratio of balancing s representation dims vs d raw dims."""
    if not (1 <= s <= d):
        raise ValueError(f"need 1 <= s <= d, got s={s}, d={d}")
    if s == d:
        return 1.0
    return _variance_factor(s, p_a) / _variance_factor(d, p_a)


def percent_variance_reduction(R2: float, p_a: float, dims) -> list:
    """Asymptotic percent reduction in variance from ReM on q covariates, for each q in dims."""
    if not 0.0 <= R2 <= 1.0:
        raise ValueError("R2 must lie in [0, 1]")
    return [(int(q), 100.0 * R2 * (1.0 - _variance_factor(int(q), p_a))) for q in dims]
