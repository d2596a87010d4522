"""Synthetic multi-task causal data.

Covariates are uniform on [-1, 1]^d. Each task draws its own logistic task
functions for the treated and control arms on top of a shared ground-truth
representation, so every task shares structure only through ``h*``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import MlpParams, Rng, as_generator, forward, init_mlp

log = logging.getLogger(__name__)

REP_KINDS = ("full", "selection", "linear", "neural")
PROPENSITY_KINDS = ("fixed", "neural")
LINKS = ("logistic", "linear")
PROPENSITY_CLAMP = (0.02, 0.98)


class SchemaError(ValueError):
    """Task data does not fit the expected layout."""


class UnsupportedOnRealData(ValueError):
    """Operation needs ground-truth potential outcomes."""


@dataclass
class GroundTruthRep:
    kind: str
    d: int
    r: int
    indices: np.ndarray | None = None
    matrix: np.ndarray | None = None  # (r, d)
    net: MlpParams | None = None

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.d:
            raise SchemaError(f"representation expects dim {self.d}, got {X.shape[1]}")
        if self.kind == "full":
            return X.copy()
        if self.kind == "selection":
            return X[:, self.indices]
        if self.kind == "linear":
            return X @ self.matrix.T
        return forward(self.net, X)


def gen_representation(kind: str, d: int, r: int, rng, hidden=(64, 64)) -> GroundTruthRep:
    """Draw a ground-truth representation h*: R^d -> R^r."""
    if kind not in REP_KINDS:
        raise ValueError(f"unknown representation kind {kind!r}")
    if kind == "full":
        r = d
    if not 1 <= r <= d:
        raise ValueError(f"need 1 <= r <= d, got r={r}, d={d}")
    gen = as_generator(rng)
    if kind == "full":
        return GroundTruthRep(kind, d, r)
    if kind == "selection":
        idx = np.sort(gen.choice(d, size=r, replace=False))
        return GroundTruthRep(kind, d, r, indices=idx)
    if kind == "linear":
        while True:
            mat = gen.normal(0.0, 1.0 / np.sqrt(d), size=(r, d))
            if np.linalg.matrix_rank(mat) == r:
                return GroundTruthRep(kind, d, r, matrix=mat)
    net = init_mlp((d, *hidden, r), gen, activation="tanh")
    # zero biases from init_mlp leave h*(0) = 0; give each unit an offset
    net = net.replace(net.weights, [gen.uniform(-0.5, 0.5, size=b.shape) for b in net.biases])
    return GroundTruthRep(kind, d, r, net=net)


@dataclass
class TaskFunctionParams:
    a: np.ndarray
    b: float
    noise_sd: float = 0.1
    link: str = "logistic"

    def mean(self, H: np.ndarray) -> np.ndarray:
        """Noise-free outcome given representation values H (n, r)."""
        lin = H @ self.a + self.b
        if self.link == "linear":
            return lin
        return 1.0 / (1.0 + np.exp(lin))


def gen_task_function(r: int, rng, noise_sd: float = 0.1, link: str = "logistic") -> TaskFunctionParams:
    if link not in LINKS:
        raise ValueError(f"unknown link {link!r}")
    gen = as_generator(rng)
    a = gen.uniform(-1.0, 1.0, size=r)
    b = float(gen.uniform(-1.0, 1.0))
    return TaskFunctionParams(a, b, noise_sd, link)


@dataclass
class GroundTruthPropensity:
    kind: str
    p: float | None = None
    net: MlpParams | None = None

    def __post_init__(self):
        if self.kind not in PROPENSITY_KINDS:
            raise ValueError(f"unknown propensity kind {self.kind!r}")
        if self.kind == "fixed" and not (self.p is not None and 0.0 < self.p < 1.0):
            raise ValueError(f"fixed propensity needs p in (0, 1), got {self.p}")

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if self.kind == "fixed":
            return np.full(X.shape[0], self.p)
        lo, hi = PROPENSITY_CLAMP
        return lo + (hi - lo) * forward(self.net, X)[:, 0]


def gen_propensity(kind: str, d: int, rng, p: float | None = None, p_range=(0.2, 0.8), hidden=(32, 32)):
    """Fixed probability (drawn from ``p_range`` unless given) or a random sigmoid net."""
    gen = as_generator(rng)
    if kind == "fixed":
        if p is None:
            p = float(gen.uniform(*p_range))
        return GroundTruthPropensity("fixed", p=p)
    net = init_mlp((d, *hidden, 1), gen, activation="tanh", output_activation="sigmoid")
    # widen the last layer so propensities spread over the unit interval
    net.weights[-1] *= 3.0
    return GroundTruthPropensity("neural", net=net)


@dataclass
class Sample:
    x: np.ndarray
    i: int
    y: float
    mask: np.ndarray | None = None
    y1: float | None = None
    y0: float | None = None


@dataclass
class TaskTruth:
    """Everything needed to resample a task and evaluate its oracle effects."""

    rep: GroundTruthRep
    f1: TaskFunctionParams
    f0: TaskFunctionParams
    prop: GroundTruthPropensity
    features: np.ndarray | None = None  # observed columns when covariates are partial

    @property
    def d_full(self) -> int:
        return self.rep.d

    def sample_covariates(self, n: int, rng) -> np.ndarray:
        return as_generator(rng).uniform(-1.0, 1.0, size=(n, self.d_full))

    def observe(self, X_full: np.ndarray) -> np.ndarray:
        return X_full if self.features is None else X_full[:, self.features]

    def mu1(self, X_full):
        return self.f1.mean(self.rep(X_full))

    def mu0(self, X_full):
        return self.f0.mean(self.rep(X_full))

    def cate(self, X_full) -> np.ndarray:
        H = self.rep(X_full)
        return self.f1.mean(H) - self.f0.mean(H)


@dataclass
class Task:
    id: int
    X: np.ndarray
    treat: np.ndarray
    y: np.ndarray
    y1: np.ndarray | None = None
    y0: np.ndarray | None = None
    mask: np.ndarray | None = None
    features: np.ndarray | None = None
    truth: TaskTruth | None = None
    X_full: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.treat = np.asarray(self.treat, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.X.shape[0]
        if self.treat.shape != (n,) or self.y.shape != (n,):
            raise SchemaError("X, treat and y must have matching lengths")
        if self.mask is not None and self.mask.shape != self.X.shape:
            raise SchemaError("mask must match X")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def has_potential_outcomes(self) -> bool:
        return self.y1 is not None and self.y0 is not None

    def sample(self, i: int) -> Sample:
        return Sample(
            self.X[i],
            int(self.treat[i]),
            float(self.y[i]),
            None if self.mask is None else self.mask[i],
            None if self.y1 is None else float(self.y1[i]),
            None if self.y0 is None else float(self.y0[i]),
        )

    def subset(self, idx) -> "Task":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return replace(
            self,
            X=self.X[idx],
            treat=self.treat[idx],
            y=self.y[idx],
            y1=pick(self.y1),
            y0=pick(self.y0),
            mask=pick(self.mask),
            X_full=pick(self.X_full),
        )


@dataclass
class TaskSet:
    tasks: list
    target: Task | None = None
    d_max: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tasks:
            raise SchemaError("a task set needs at least one task")
        if self.d_max is None:
            self.d_max = self.tasks[0].d


def draw_treatment(prop: GroundTruthPropensity, X_full: np.ndarray, rng) -> np.ndarray:
    """Bernoulli treatment given covariates only."""
    gen = as_generator(rng)
    return (gen.random(X_full.shape[0]) < prop(X_full)).astype(np.int64)


def gen_task(
    rep: GroundTruthRep,
    prop: GroundTruthPropensity,
    n: int,
    rng,
    noise_sd: float = 0.1,
    link: str = "logistic",
    task_id: int = 0,
    functions: tuple | None = None,
    features: np.ndarray | None = None,
) -> Task:
    """One task of ``n`` units with independent treated and control task functions.

    ``functions`` overrides the drawn (treated, control) TaskFunctionParams.
    ``features`` restricts the observed covariates to those columns.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    if functions is None:
        f1 = gen_task_function(rep.r, rng.child("f1"), noise_sd, link)
        f0 = gen_task_function(rep.r, rng.child("f0"), noise_sd, link)
    else:
        f1, f0 = functions
    truth = TaskTruth(rep, f1, f0, prop, None if features is None else np.asarray(features))
    X_full = truth.sample_covariates(n, rng.child("x"))
    H = rep(X_full)
    noise = rng.child("noise").generator()
    y1 = f1.mean(H) + f1.noise_sd * noise.standard_normal(n)
    y0 = f0.mean(H) + f0.noise_sd * noise.standard_normal(n)
    treat = draw_treatment(prop, X_full, rng.child("treat"))
    y = np.where(treat == 1, y1, y0)
    return Task(
        task_id,
        truth.observe(X_full),
        treat,
        y,
        y1,
        y0,
        features=truth.features,
        truth=truth,
        X_full=X_full if features is not None else None,
    )


def gen_taskset(
    kind: str,
    d: int,
    r: int,
    K: int,
    n: int,
    rng,
    propensity: str = "fixed",
    p: float | None = 0.5,
    n_target: int | None = None,
    noise_sd: float = 0.1,
    link: str = "logistic",
) -> TaskSet:
    """K historical tasks plus a target from one generator family.

    With ``propensity='fixed'`` and ``p=None`` each task draws its own p in [0.2, 0.8].
    """
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    rep = gen_representation(kind, d, r, rng.child("rep"))
    tasks = []
    for k in range(K + 1):
        sub = rng.child(f"gen/{k}")
        prop = gen_propensity(propensity, d, sub.child("prop"), p=p)
        size = n if (k < K or n_target is None) else n_target
        tasks.append(gen_task(rep, prop, size, sub, noise_sd, link, task_id=k))
    return TaskSet(tasks[:K], tasks[K], d, {"kind": kind, "d": d, "r": rep.r, "rep": rep})


def gen_hetero_taskset(
    kind: str,
    d_max: int,
    r: int,
    K: int,
    n: int,
    rng,
    d_range=(100, 300),
    p: float = 0.5,
    n_target: int | None = None,
    noise_sd: float = 0.1,
) -> tuple:
    """Tasks over a feature catalogue of size d_max, each observing d_k random features.

    Returns ``(tasks, target)`` with native (unpadded) covariates.
    """
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    rep = gen_representation(kind, d_max, r, rng.child("rep"))
    out = []
    for k in range(K + 1):
        sub = rng.child(f"gen/{k}")
        gen = sub.child("features").generator()
        d_k = int(gen.integers(d_range[0], d_range[1] + 1))
        feats = np.sort(gen.choice(d_max, size=d_k, replace=False))
        prop = GroundTruthPropensity("fixed", p=p)
        size = n if (k < K or n_target is None) else n_target
        out.append(gen_task(rep, prop, size, sub, noise_sd, task_id=k, features=feats))
    return out[:K], out[K]


def pad_taskset(tasks, d_max: int, fill: str = "zero", target: Task | None = None) -> TaskSet:
    """Embed tasks with partial covariates into the full d_max catalogue.

    ``fill='mean'`` uses the pooled mean of each feature over every task
    (target included) that observes it; features nobody observes get 0.
    """
    if fill not in ("zero", "mean"):
        raise ValueError(f"unknown fill {fill!r}")
    everything = list(tasks) + ([target] if target is not None else [])
    feats_of = []
    for t in everything:
        f = np.arange(t.d) if t.features is None else np.asarray(t.features)
        if f.size != t.d:
            raise SchemaError(f"task {t.id}: {f.size} feature ids for {t.d} columns")
        if f.size and (f.min() < 0 or f.max() >= d_max):
            raise SchemaError(f"task {t.id} references a feature outside the catalogue of {d_max}")
        if np.unique(f).size != f.size:
            raise SchemaError(f"task {t.id} lists a feature twice")
        feats_of.append(f)

    fill_values = np.zeros(d_max)
    if fill == "mean":
        sums = np.zeros(d_max)
        counts = np.zeros(d_max)
        for t, f in zip(everything, feats_of):
            sums[f] += t.X.sum(axis=0)
            counts[f] += t.n
        seen = counts > 0
        fill_values[seen] = sums[seen] / counts[seen]

    padded = []
    for t, f in zip(everything, feats_of):
        Xp = np.tile(fill_values, (t.n, 1))
        Xp[:, f] = t.X
        mask = np.zeros((t.n, d_max), dtype=np.int64)
        mask[:, f] = 1
        padded.append(replace(t, X=Xp, mask=mask, features=f))
    new_target = padded.pop() if target is not None else None
    return TaskSet(padded, new_target, d_max, {"fill": fill})


@dataclass
class OracleEffects:
    ate: float  # sample ATE of the task's units
    population_ate: float  # Monte Carlo over fresh covariates
    v_optimal: float
    truth: TaskTruth

    def cate(self, X_full) -> np.ndarray:
        return self.truth.cate(X_full)


def oracle_effects(task: Task, rng=0, n_mc: int = 100_000) -> OracleEffects:
    """Ground-truth ATE, CATE and the semiparametric variance bound of a simulated task."""
    if not task.has_potential_outcomes or task.truth is None:
        raise UnsupportedOnRealData("oracle effects need simulated potential outcomes")
    if n_mc < 100_000:
        log.warning("oracle Monte Carlo with only %d draws", n_mc)
    truth = task.truth
    X = truth.sample_covariates(n_mc, as_generator(rng))
    tau_x = truth.cate(X)
    tau = float(tau_x.mean())
    p = truth.prop(X)
    v = truth.f1.noise_sd**2 / p + truth.f0.noise_sd**2 / (1.0 - p) + (tau_x - tau) ** 2
    return OracleEffects(float(np.mean(task.y1 - task.y0)), tau, float(v.mean()), truth)


# --- CSV / JSON persistence -------------------------------------------------


def _task_header(task: Task) -> list:
    cols = [f"x{j}" for j in range(task.d)] + ["treat", "y"]
    if task.has_potential_outcomes:
        cols += ["y1", "y0"]
    if task.mask is not None:
        cols += [f"m{j}" for j in range(task.d)]
    return cols


def write_task_csv(task: Task, path) -> None:
    parts = [task.X, task.treat[:, None], task.y[:, None]]
    if task.has_potential_outcomes:
        parts += [task.y1[:, None], task.y0[:, None]]
    if task.mask is not None:
        parts.append(task.mask)
    data = np.hstack([np.asarray(p, dtype=np.float64) for p in parts])
    np.savetxt(path, data, delimiter=",", header=",".join(_task_header(task)), comments="", fmt="%.17g")


def read_task_csv(path, task_id: int = 0) -> Task:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    xcols = [i for i, c in enumerate(header) if c.startswith("x")]
    col = {c: i for i, c in enumerate(header)}
    if "treat" not in col or "y" not in col:
        raise SchemaError(f"{path}: missing treat/y columns")
    mcols = [i for i, c in enumerate(header) if c.startswith("m")]
    return Task(
        task_id,
        data[:, xcols],
        data[:, col["treat"]].astype(np.int64),
        data[:, col["y"]],
        data[:, col["y1"]] if "y1" in col else None,
        data[:, col["y0"]] if "y0" in col else None,
        data[:, mcols].astype(np.int64) if mcols else None,
    )


def save_taskset(ts: TaskSet, out_dir, generator: str, seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for t in ts.tasks:
        name = f"task_{t.id:03d}.csv"
        write_task_csv(t, out_dir / name)
        files.append(name)
    target = None
    if ts.target is not None:
        target = "target.csv"
        write_task_csv(ts.target, out_dir / target)
    manifest = {"tasks": files, "target": target, "d_max": ts.d_max, "generator": generator, "seed": seed}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_taskset(manifest_path) -> TaskSet:
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    tasks = [read_task_csv(base / f, k) for k, f in enumerate(man["tasks"])]
    target = read_task_csv(base / man["target"], len(tasks)) if man.get("target") else None
    return TaskSet(tasks, target, man["d_max"], {"generator": man["generator"], "seed": man["seed"]})
