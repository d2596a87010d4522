"""Meta-learning a shared covariate encoder with MAML-style task adaptation.

Each historical task is split by treatment arm into sub-tasks. The encoder
``h_theta`` is shared across all sub-tasks; a meta head ``f_phi`` is the
starting point that each sub-task adapts from with gradient steps.

Losses follow the summed (not averaged) squared error over a batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .datagen import Task, TaskSet
from .numerics import (
    GradientBundle,
    MlpParams,
    Rng,
    backprop,
    forward,
    forward_cache,
    init_mlp,
    make_stepper,
    sgd_step,
)

log = logging.getLogger(__name__)

HEAD_CLASSES = ("linear", "tanh")


class DivergenceError(RuntimeError):
    """Meta-training produced a non-finite or exploding loss."""


@dataclass
class SubTask:
    parent: int
    arm: int
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.X.shape[0] == 0:
            raise ValueError("sub-task must be nonempty")

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class MetaConfig:
    s: int = 50
    inner_rate: float = 0.01
    outer_rate: float = 0.001
    rep_rate: float = 0.001
    batch_tasks: int = 8
    inner_shots: int = 32
    meta_iters: int = 5000
    head_class: str = "linear"
    inner_steps_adapt: int = 1
    # step size for adapt(); None uses inner_rate as in the inner loop
    adapt_rate: float | None = None
    encoder_hidden: tuple = (128, 128, 128)
    head_hidden: tuple = (64, 64)
    encoder_activation: str = "relu"
    # outer-loop update rule; "sgd" is the plain method
    optimizer: str = "sgd"
    # D' size; None means every sub-task point outside D
    query_size: int | None = None
    # "first" drops the dependence of adapted heads on (theta, phi);
    # "second" differentiates through the inner step (linear heads only)
    order: str = "first"
    divergence_limit: float = 1e6

    def __post_init__(self):
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.head_hidden = tuple(self.head_hidden)
        if min(self.inner_rate, self.outer_rate, self.rep_rate, self.adapt_rate or 0.0) < 0:
            raise ValueError("learning rates must be non-negative")
        if self.s < 1 or self.batch_tasks < 1 or self.inner_shots < 1 or self.meta_iters < 0:
            raise ValueError("s, batch_tasks and inner_shots must be >= 1; meta_iters >= 0")
        if self.head_class not in HEAD_CLASSES:
            raise ValueError(f"head_class must be one of {HEAD_CLASSES}")
        if self.order not in ("first", "second"):
            raise ValueError("order must be 'first' or 'second'")
        if self.order == "second" and self.head_class != "linear":
            raise ValueError("second-order outer gradients are implemented for linear heads only")
        if self.encoder_activation not in ("relu", "tanh", "identity"):
            raise ValueError("encoder_activation must be relu, tanh or identity")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")

    @classmethod
    def from_dict(cls, d: dict) -> "MetaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown MetaConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetaModel:
    encoder: MlpParams
    head: MlpParams
    config: MetaConfig = field(default_factory=MetaConfig)
    seed: int = 0
    history: list = field(default_factory=list, repr=False)

    def represent(self, X) -> np.ndarray:
        return forward(self.encoder, X)

    def predict(self, X, head: MlpParams | None = None) -> np.ndarray:
        head = self.head if head is None else head
        return forward(head, forward(self.encoder, np.atleast_2d(X)))[:, 0]


def split_tasks(tasks) -> list:
    """Split each task into its treated (arm 1) and control (arm 0) sub-tasks.

    Tasks missing an arm are dropped with a warning.
    """
    tasks = tasks.tasks if isinstance(tasks, TaskSet) else tasks
    out = []
    for t in tasks:
        arms = [t.treat == 1, t.treat == 0]
        if not all(a.any() for a in arms):
            log.warning("task %s has a single arm; excluded from meta-training", t.id)
            continue
        for arm, sel in zip((1, 0), arms):
            out.append(SubTask(t.id, arm, t.X[sel], t.y[sel]))
    return out


def propensity_subtasks(tasks) -> list:
    """One sub-task per task with the treatment indicator as target."""
    tasks = tasks.tasks if isinstance(tasks, TaskSet) else tasks
    return [SubTask(t.id, -1, t.X, t.treat.astype(np.float64)) for t in tasks]


def init_model(d: int, config: MetaConfig, rng, output_activation: str = "identity") -> MetaModel:
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    encoder = init_mlp((d, *config.encoder_hidden, config.s), rng.child("init/encoder"), activation=config.encoder_activation)
    if config.head_class == "linear":
        dims = (config.s, 1)
    else:
        dims = (config.s, *config.head_hidden, 1)
    head = init_mlp(dims, rng.child("init/head"), activation="tanh", output_activation=output_activation)
    return MetaModel(encoder, head, config, rng.seed)


def task_loss(head: MlpParams, encoder: MlpParams, X, y) -> float:
    """Summed squared error of ``head(encoder(X))`` against ``y``."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        log.warning("task_loss on an empty batch")
        return 0.0
    pred = forward(head, forward(encoder, np.atleast_2d(X)))[:, 0]
    r = np.asarray(y, dtype=np.float64) - pred
    return float(r @ r)


def _grads(encoder, head, X, y, need_encoder=True):
    Z, enc_cache = forward_cache(encoder, X)
    out, head_cache = forward_cache(head, Z)
    resid = out[:, 0] - y
    loss = float(resid @ resid)
    g_head, gZ = backprop(head, head_cache, 2.0 * resid[:, None], need_input_grad=need_encoder)
    g_enc = backprop(encoder, enc_cache, gZ)[0] if need_encoder else None
    return loss, g_head, g_enc


def head_gradient(head: MlpParams, Z: np.ndarray, y: np.ndarray):
    """Loss and head gradient given precomputed representations Z."""
    out, cache = forward_cache(head, Z)
    resid = out[:, 0] - y
    g, _ = backprop(head, cache, 2.0 * resid[:, None])
    return float(resid @ resid), g


def adapt_head(head: MlpParams, Z: np.ndarray, y: np.ndarray, rate: float, steps: int) -> MlpParams:
    """``steps`` gradient steps of the summed loss on fixed representations."""
    h = head
    for _ in range(steps):
        if rate == 0:
            break
        _, g = head_gradient(h, Z, y)
        h = sgd_step(h, g, rate)
    return h.copy() if h is head else h


def adapt(model: MetaModel, subtask: SubTask, config: MetaConfig | None = None) -> MlpParams:
    """Adapt the meta head to one sub-task with the encoder frozen."""
    config = model.config if config is None else config
    if subtask.n == 0:
        raise ValueError("cannot adapt to an empty sub-task")
    Z = model.represent(subtask.X)
    rate = config.inner_rate if config.adapt_rate is None else config.adapt_rate
    return adapt_head(model.head, Z, subtask.y, rate, config.inner_steps_adapt)


def meta_loss(model: MetaModel, subtasks, config: MetaConfig | None = None) -> float:
    """Mean over sub-tasks of the post-adaptation loss on each sub-task's full data."""
    if not subtasks:
        raise ValueError("meta_loss needs at least one sub-task")
    losses = [task_loss(adapt(model, st, config), model.encoder, st.X, st.y) for st in subtasks]
    return float(np.mean(losses))


@dataclass
class InnerBatch:
    """One outer iteration's draws: sub-task data split into D (inner) and D' (outer)."""

    X_in: list
    y_in: list
    X_out: list
    y_out: list


def sample_batch(subtasks, config: MetaConfig, gen: np.random.Generator) -> InnerBatch:
    b = min(config.batch_tasks, len(subtasks))
    picks = gen.choice(len(subtasks), size=b, replace=False)
    batch = InnerBatch([], [], [], [])
    for j in picks:
        st = subtasks[j]
        if st.n < 2:
            continue
        shots = min(config.inner_shots, st.n // 2) if st.n <= config.inner_shots else config.inner_shots
        perm = gen.permutation(st.n)
        d_in, d_out = perm[:shots], perm[shots:]
        if config.query_size is not None and d_out.size > config.query_size:
            d_out = d_out[: config.query_size]
        batch.X_in.append(st.X[d_in])
        batch.y_in.append(st.y[d_in])
        batch.X_out.append(st.X[d_out])
        batch.y_out.append(st.y[d_out])
    return batch


def outer_gradients(encoder: MlpParams, head: MlpParams, batch: InnerBatch, inner_rate: float):
    """First-order outer gradients summed over the batch.

    The adapted heads are treated as constants of (theta, phi), so the head
    gradient is evaluated at each adapted head.
    Returns (outer loss, head gradient, encoder gradient).
    """
    total = 0.0
    g_head = GradientBundle.zeros_like(head)
    g_enc = GradientBundle.zeros_like(encoder)
    for Xi, yi, Xo, yo in zip(batch.X_in, batch.y_in, batch.X_out, batch.y_out):
        if inner_rate != 0:
            adapted = sgd_step(head, head_gradient(head, forward(encoder, Xi), yi)[1], inner_rate)
        else:
            adapted = head
        loss, gh, ge = _grads(encoder, adapted, Xo, yo)
        total += loss
        g_head = g_head + gh
        g_enc = g_enc + ge
    return total, g_head, g_enc


def _linear_second_order(encoder, head, Xi, yi, Xo, yo, alpha):
    """Exact outer gradients through one inner step of a linear head.

    With phi' = phi - alpha * grad L(D), the outer loss L(phi', D') depends on
    phi and on the representations of both D and D'; all three paths are
    differentiated here.
    """
    Zi, cache_i = forward_cache(encoder, Xi)
    Zo, cache_o = forward_cache(encoder, Xo)
    w, c = head.weights[0][:, 0], head.biases[0][0]
    r_in = Zi @ w + c - yi
    w1 = w - alpha * 2.0 * (Zi.T @ r_in)
    c1 = c - alpha * 2.0 * r_in.sum()
    r_out = Zo @ w1 + c1 - yo
    loss = float(r_out @ r_out)
    gw1 = 2.0 * (Zo.T @ r_out)
    gc1 = 2.0 * r_out.sum()
    u = Zi @ gw1 + gc1
    gw = gw1 - 2.0 * alpha * (Zi.T @ u)
    gc = gc1 - 2.0 * alpha * u.sum()
    dZo = 2.0 * np.outer(r_out, w1)
    dZi = -2.0 * alpha * (np.outer(r_in, gw1) + np.outer(u, w))
    ge = backprop(encoder, cache_o, dZo)[0] + backprop(encoder, cache_i, dZi)[0]
    return loss, GradientBundle([gw[:, None]], [np.array([gc])]), ge


def outer_gradients_second_order(encoder, head, batch: InnerBatch, inner_rate: float):
    """Exact (second-order) counterpart of :func:`outer_gradients` for linear heads."""
    total = 0.0
    g_head = GradientBundle.zeros_like(head)
    g_enc = GradientBundle.zeros_like(encoder)
    for Xi, yi, Xo, yo in zip(batch.X_in, batch.y_in, batch.X_out, batch.y_out):
        loss, gh, ge = _linear_second_order(encoder, head, Xi, yi, Xo, yo, inner_rate)
        total += loss
        g_head = g_head + gh
        g_enc = g_enc + ge
    return total, g_head, g_enc


def meta_objective(encoder: MlpParams, head: MlpParams, batch: InnerBatch, inner_rate: float) -> float:
    """Post-adaptation outer loss as a function of (theta, phi), adaptation included."""
    total = 0.0
    for Xi, yi, Xo, yo in zip(batch.X_in, batch.y_in, batch.X_out, batch.y_out):
        adapted = adapt_head(head, forward(encoder, Xi), yi, inner_rate, 1)
        total += task_loss(adapted, encoder, Xo, yo)
    return total


def exact_outer_gradients(encoder, head, batch, inner_rate, step: float = 1e-5):
    """Second-order outer gradients by central differences. Toy sizes only."""
    te, th = encoder.flat(), head.flat()

    def fd(vec, rebuild):
        g = np.zeros_like(vec)
        for i in range(vec.size):
            up, dn = vec.copy(), vec.copy()
            up[i] += step
            dn[i] -= step
            g[i] = (rebuild(up) - rebuild(dn)) / (2 * step)
        return g

    gh = fd(th, lambda v: meta_objective(encoder, head.with_flat(v), batch, inner_rate))
    ge = fd(te, lambda v: meta_objective(encoder.with_flat(v), head, batch, inner_rate))
    return head.with_flat(gh), encoder.with_flat(ge)


def maml_train(
    tasks,
    config: MetaConfig,
    rng,
    model: MetaModel | None = None,
    subtasks: list | None = None,
    output_activation: str = "identity",
    checkpoint: Callable | None = None,
    checkpoint_every: int = 500,
) -> MetaModel:
    """Meta-train encoder and meta head over arm-split sub-tasks.

    Each outer iteration samples ``batch_tasks`` sub-tasks; for each it adapts
    the head on ``inner_shots`` points and accumulates first-order gradients of
    the adapted loss on the remaining points, then applies one update to the
    head (``outer_rate``) and to the encoder (``rep_rate``).
    """
    rng = rng if isinstance(rng, Rng) else Rng(int(rng))
    if subtasks is None:
        subtasks = split_tasks(tasks)
    if not subtasks:
        raise ValueError("no usable sub-tasks")
    if model is None:
        model = init_model(subtasks[0].X.shape[1], config, rng, output_activation)
    encoder, head = model.encoder.copy(), model.head.copy()
    step_head = make_stepper(config.optimizer, config.outer_rate)
    step_enc = make_stepper(config.optimizer, config.rep_rate)
    gen = rng.child("meta/iter").generator()
    grad_fn = outer_gradients_second_order if config.order == "second" else outer_gradients
    history = []
    for it in range(config.meta_iters):
        batch = sample_batch(subtasks, config, gen)
        loss, g_head, g_enc = grad_fn(encoder, head, batch, config.inner_rate)
        if not np.isfinite(loss) or loss > config.divergence_limit:
            raise DivergenceError(f"outer loss {loss!r} at iteration {it}; lower the learning rates")
        history.append(loss)
        try:
            head = step_head(head, g_head)
            encoder = step_enc(encoder, g_enc)
        except ValueError as exc:
            raise DivergenceError(f"non-finite parameters after iteration {it}; lower the learning rates") from exc
        if checkpoint is not None and (it + 1) % checkpoint_every == 0:
            checkpoint(it + 1, MetaModel(encoder, head, config, rng.seed))
    return MetaModel(encoder, head, config, rng.seed, history)


def maml_train_propensity(tasks, config: MetaConfig, rng, **kw) -> MetaModel:
    """Same procedure with treatment indicators as targets and a sigmoid head, no arm split."""
    return maml_train(tasks, config, rng, subtasks=propensity_subtasks(tasks), output_activation="sigmoid", **kw)


# --- serialization ------------------------------------------------------------


def _params_to_dict(p: MlpParams) -> dict:
    return {
        "layer_dims": list(p.layer_dims),
        "activation": p.activation,
        "output_activation": p.output_activation,
        "values": [float(v).hex() for v in p.flat()],
    }


def _params_from_dict(d: dict) -> MlpParams:
    dims = d["layer_dims"]
    template = MlpParams(
        dims,
        [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
        [np.zeros(b) for b in dims[1:]],
        d["activation"],
        d["output_activation"],
    )
    return template.with_flat([float.fromhex(v) for v in d["values"]])


def model_to_json(model: MetaModel) -> str:
    doc = {
        "format": "covrep.MetaModel/1",
        "encoder": _params_to_dict(model.encoder),
        "head": _params_to_dict(model.head),
        "config": asdict(model.config),
        "seed": model.seed,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def model_from_json(text: str) -> MetaModel:
    doc = json.loads(text)
    cfg = doc["config"]
    cfg["encoder_hidden"] = tuple(cfg["encoder_hidden"])
    cfg["head_hidden"] = tuple(cfg["head_hidden"])
    return MetaModel(
        _params_from_dict(doc["encoder"]),
        _params_from_dict(doc["head"]),
        MetaConfig(**cfg),
        doc["seed"],
    )
