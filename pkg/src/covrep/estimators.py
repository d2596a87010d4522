"""Treatment-effect estimation on top of a (learned) covariate representation.

CATE: fit one outcome head per arm on ``h(X)`` and take the difference.
ATE: doubly-robust estimator whose outcome predictions are cross-fitted
over M folds within each arm.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import Task, TaskTruth, oracle_effects
from .numerics import MlpParams, Rng, as_generator, forward, forward_cache, backprop, init_mlp, make_stepper

log = logging.getLogger(__name__)

PROPENSITY_CLAMP = (0.02, 0.98)


class EstimationError(ValueError):
    pass


@dataclass
class HeadFitConfig:
    """How an outcome or propensity head is fit on fixed inputs.

    Linear identity-output heads are solved in closed form; everything else
    runs full-batch descent on the mean squared error (mean log-loss for
    sigmoid outputs).
    """

    steps: int = 2000
    rate: float = 0.01
    tol: float = 1e-10
    optimizer: str = "sgd"
    hidden: tuple = (64, 64)

    def __post_init__(self):
        self.hidden = tuple(self.hidden)


def _lstsq_head(Z: np.ndarray, y: np.ndarray, init: MlpParams | None) -> MlpParams:
    A = np.hstack([Z, np.ones((Z.shape[0], 1))])
    base = np.zeros(A.shape[1]) if init is None else np.concatenate([init.weights[0][:, 0], init.biases[0]])
    # minimum-norm move away from the starting head: the point gradient descent from there converges to
    delta, *_ = np.linalg.lstsq(A, y - A @ base, rcond=None)
    coef = base + delta
    return MlpParams((Z.shape[1], 1), [coef[:-1, None]], [coef[-1:]], "tanh", "identity")


def fit_head(
    Z: np.ndarray,
    y: np.ndarray,
    head_class: str = "linear",
    init: MlpParams | None = None,
    rng=0,
    cfg: HeadFitConfig | None = None,
    output_activation: str = "identity",
) -> MlpParams:
    """Minimize the squared loss of a head on inputs Z, from ``init`` or a random start."""
    cfg = cfg or HeadFitConfig()
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if Z.shape[0] == 0:
        raise EstimationError("cannot fit a head on zero samples")
    if head_class == "linear" and output_activation == "identity":
        return _lstsq_head(Z, y, init)
    if init is None:
        dims = (Z.shape[1], 1) if head_class == "linear" else (Z.shape[1], *cfg.hidden, 1)
        init = init_mlp(dims, as_generator(rng), activation="tanh", output_activation=output_activation)
    head = init.copy()
    step = make_stepper(cfg.optimizer, cfg.rate)
    n = Z.shape[0]
    prev = math.inf
    # sigmoid heads (propensities) use the log-loss: its logit gradient p - y
    # does not vanish when the output saturates, unlike the squared error
    logistic = output_activation == "sigmoid"
    for _ in range(cfg.steps):
        out, cache = forward_cache(head, Z)
        resid = out[:, 0] - y
        if logistic:
            p = np.clip(out[:, 0], 1e-12, 1 - 1e-12)
            loss = -float(np.mean(y * np.log(p) + (1 - y) * np.log1p(-p)))
        else:
            loss = float(resid @ resid) / n
        if prev - loss < cfg.tol and loss <= prev:
            break
        prev = loss
        scale = 1.0 / n if logistic else 2.0 / n
        g, _ = backprop(head, cache, scale * resid[:, None], grad_at_logit=logistic)
        head = step(head, g)
    return head


def _represent(encoder: MlpParams | None, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return X if encoder is None else forward(encoder, X)


@dataclass
class CateModel:
    encoder: MlpParams | None
    head1: MlpParams
    head0: MlpParams
    head_class: str = "linear"

    def predict_arm(self, X, arm: int) -> np.ndarray:
        head = self.head1 if arm == 1 else self.head0
        return forward(head, _represent(self.encoder, X))[:, 0]

    def predict(self, X) -> np.ndarray:
        Z = _represent(self.encoder, X)
        return forward(self.head1, Z)[:, 0] - forward(self.head0, Z)[:, 0]


def fit_cate(
    task: Task,
    encoder: MlpParams | None,
    head_class: str = "linear",
    fit_mode: str = "scratch",
    rng=0,
    meta_head: MlpParams | None = None,
    cfg: HeadFitConfig | None = None,
) -> CateModel:
    """Arm-wise least-squares heads on h(X); ``encoder=None`` fits on raw covariates.

    ``fit_mode='meta'`` starts both heads at ``meta_head``; ``'scratch'`` starts randomly.
    """
    if fit_mode not in ("meta", "scratch"):
        raise ValueError(f"unknown fit_mode {fit_mode!r}")
    if fit_mode == "meta" and meta_head is None:
        raise ValueError("fit_mode='meta' needs a meta head")
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    Z = _represent(encoder, task.X)
    heads = {}
    for arm in (1, 0):
        sel = task.treat == arm
        if not sel.any():
            raise EstimationError(f"target task has no units in arm {arm}")
        init = meta_head if fit_mode == "meta" else None
        heads[arm] = fit_head(Z[sel], task.y[sel], head_class, init, rng.child(f"cate/head{arm}").generator(), cfg)
    return CateModel(encoder, heads[1], heads[0], head_class)


def cate_mse(model, truth: TaskTruth, n_eval: int = 10_000, rng=0) -> float:
    """Mean squared CATE error over fresh covariate draws from the task's generator."""
    X_full = truth.sample_covariates(n_eval, as_generator(rng))
    err = model.predict(truth.observe(X_full)) - truth.cate(X_full)
    return float(np.mean(err * err))


@dataclass
class AteReport:
    tau_hat: float
    p_hat: object  # scalar for the empirical propensity, per-unit array otherwise
    influence: np.ndarray
    n0: int
    y1_hat: np.ndarray | None = None
    y0_hat: np.ndarray | None = None
    folds: np.ndarray | None = None


def dr_combine(treat, y, y1_hat, y0_hat, p_hat) -> AteReport:
    """The doubly-robust average of per-unit influence terms."""
    t = np.asarray(treat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p_hat, dtype=np.float64)
    if np.any(p <= 0) or np.any(p >= 1):
        raise EstimationError("propensity estimate must lie strictly inside (0, 1)")
    psi = t * (y - y1_hat) / p - (1.0 - t) * (y - y0_hat) / (1.0 - p) + y1_hat - y0_hat
    return AteReport(float(np.mean(psi)), p_hat, psi, t.size, np.asarray(y1_hat), np.asarray(y0_hat))


def assign_folds(treat: np.ndarray, n_folds: int, gen: np.random.Generator) -> np.ndarray:
    """Round-robin fold ids after a shuffle, separately within each arm."""
    folds = np.empty(treat.size, dtype=np.int64)
    for arm in (1, 0):
        idx = np.flatnonzero(treat == arm)
        idx = idx[gen.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


def cross_fit_outcomes(
    task: Task,
    encoder: MlpParams | None,
    n_folds: int = 5,
    rng=0,
    head_class: str = "linear",
    meta_head: MlpParams | None = None,
    cfg: HeadFitConfig | None = None,
) -> tuple:
    """Cross-fitted predictions (y1_hat, y0_hat, folds) for every unit.

    The arm-l head used for a unit in fold i is fit on arm-l units outside fold i.
    """
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    for arm in (1, 0):
        if np.sum(task.treat == arm) < 2 * n_folds:
            raise EstimationError(f"arm {arm} has fewer than {2 * n_folds} units for {n_folds} folds")
    folds = assign_folds(task.treat, n_folds, rng.child("folds").generator())
    Z = _represent(encoder, task.X)
    preds = {1: np.empty(task.n), 0: np.empty(task.n)}
    for arm in (1, 0):
        for i in range(n_folds):
            train = (task.treat == arm) & (folds != i)
            head = fit_head(
                Z[train], task.y[train], head_class, meta_head, rng.child(f"fold/{arm}/{i}").generator(), cfg
            )
            here = folds == i
            preds[arm][here] = forward(head, Z[here])[:, 0]
    return preds[1], preds[0], folds


@dataclass
class PropensityModel:
    """x -> P(I = 1 | x), clamped away from 0 and 1."""

    encoder: MlpParams | None
    head: MlpParams

    def __call__(self, X) -> np.ndarray:
        p = forward(self.head, _represent(self.encoder, X))[:, 0]
        return np.clip(p, *PROPENSITY_CLAMP)


def fit_propensity(
    task: Task,
    encoder: MlpParams | None,
    head_class: str = "tanh",
    meta_head: MlpParams | None = None,
    rng=0,
    cfg: HeadFitConfig | None = None,
) -> PropensityModel:
    """Sigmoid-output head predicting treatment from h(X); starts at ``meta_head`` if given."""
    Z = _represent(encoder, task.X)
    head = fit_head(Z, task.treat.astype(np.float64), head_class, meta_head, rng, cfg, output_activation="sigmoid")
    return PropensityModel(encoder, head)


def dr_ate(
    task: Task,
    encoder: MlpParams | None,
    n_folds: int = 5,
    propensity=None,
    rng=0,
    head_class: str = "linear",
    meta_head: MlpParams | None = None,
    cfg: HeadFitConfig | None = None,
) -> AteReport:
    """Doubly-robust ATE with cross-fitted outcome heads.

    ``propensity=None`` uses the treated fraction; otherwise a callable giving
    per-unit propensities, clamped to [0.02, 0.98].
    """
    if propensity is None:
        p_hat = float(task.treat.mean())
        if p_hat in (0.0, 1.0):
            raise EstimationError("empirical propensity is 0 or 1")
    else:
        p_hat = np.clip(np.asarray(propensity(task.X), dtype=np.float64), *PROPENSITY_CLAMP)
    y1_hat, y0_hat, folds = cross_fit_outcomes(task, encoder, n_folds, rng, head_class, meta_head, cfg)
    report = dr_combine(task.treat, task.y, y1_hat, y0_hat, p_hat)
    report.folds = folds
    return report


# --- Monte Carlo experiment over shot counts ---------------------------------


@dataclass
class AteExperimentResult:
    rows: list = field(default_factory=list)  # dicts with the raw-row CSV columns
    summary: list = field(default_factory=list)  # dicts with the aggregated CSV columns


def summarize_rows(rows: list) -> list:
    """MSE and normal-approximation 95% half-width per (protocol, method, shots)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["protocol"], r["method"], r["shots"]), []).append(r["sq_error"])
    out = []
    for (protocol, method, shots), errs in groups.items():
        e = np.asarray(errs)
        half = 1.96 * e.std(ddof=1) / math.sqrt(e.size) if e.size > 1 else float("nan")
        out.append({"protocol": protocol, "method": method, "shots": shots, "mse": float(e.mean()), "ci95_halfwidth": float(half)})
    return out


def folds_for(task: Task, n_folds: int) -> int:
    """Largest fold count <= n_folds that leaves two units per fold in each arm."""
    smallest = min(int(np.sum(task.treat == 1)), int(np.sum(task.treat == 0)))
    return max(2, min(n_folds, smallest // 2))


def ate_mse_experiment(
    protocol: str,
    target_factory,
    methods: dict,
    shots,
    repeats: int,
    rng,
    seed: int = 0,
    n_oracle: int = 100_000,
) -> AteExperimentResult:
    """Squared error of each ATE method across shot counts and repeats.

    ``target_factory(repeat, rng)`` returns a simulated target task with at
    least ``max(shots)`` units; the first ``n`` units are the n-shot sample.
    ``methods`` maps a name to ``f(task, rng) -> tau_hat``. The truth is the
    target generator's population ATE.
    """
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    result = AteExperimentResult()
    for rep in range(repeats):
        sub = rng.child(f"repeat/{rep}")
        target = target_factory(rep, sub.child("target"))
        truth = oracle_effects(target, sub.child("oracle").generator(), n_oracle).population_ate
        for n in shots:
            sample = target.subset(np.arange(n))
            for name, method in methods.items():
                est = float(method(sample, sub.child(f"{name}/{n}")))
                result.rows.append(
                    {
                        "protocol": protocol,
                        "method": name,
                        "shots": int(n),
                        "repeat": rep,
                        "estimate": est,
                        "true_value": truth,
                        "sq_error": (est - truth) ** 2,
                        "seed": seed,
                    }
                )
    result.summary = summarize_rows(result.rows)
    return result
