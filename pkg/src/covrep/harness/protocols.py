"""Protocol runners. Each writes its CSVs under the output directory and
returns the relative paths it produced."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np

from ..datagen import gen_hetero_taskset, gen_propensity, gen_task, gen_taskset, pad_taskset
from ..design import percent_variance_reduction, theoretical_ratio, variance_ratio_experiment
from ..estimators import (
    ate_mse_experiment,
    cate_mse,
    dr_ate,
    fit_cate,
    fit_propensity,
    folds_for,
    summarize_rows,
)
from ..metalearn import maml_train, maml_train_propensity, model_to_json
from ..numerics import Rng
from .config import ExperimentConfig

log = logging.getLogger(__name__)

DESIGN_HEADER = ["generator", "covariates_mode", "s", "p_a", "reps", "var_rem", "var_cr", "ratio", "accept_rate", "seed"]
ATE_HEADER = ["protocol", "method", "shots", "repeat", "estimate", "true_value", "sq_error", "seed"]
SUMMARY_HEADER = ["protocol", "method", "shots", "mse", "ci95_halfwidth"]
CATE_HEADER = ["protocol", "generator", "method", "shots", "repeat", "mse", "seed"]
CATE_SUMMARY_HEADER = ["protocol", "generator", "method", "shots", "mse", "ci95_halfwidth"]
ROW_NAMES = {
    "full": "Full variables",
    "selection": "Variable selection",
    "linear": "Linear combination",
    "neural": "Neural network",
}


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r[h]) for h in header])


def read_csv(path: Path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train_model(tasks, cfg: ExperimentConfig, s: int, rng: Rng, out: Path, name: str, propensity: bool = False):
    """Meta-train with a rolling checkpoint; the final model is saved as JSON."""
    model_dir = out / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    ck_path = model_dir / f"{name}.checkpoint.json"

    def checkpoint(it, model):
        ck_path.write_text(model_to_json(model))

    train = maml_train_propensity if propensity else maml_train
    model = train(tasks, cfg.meta_config(s), rng, checkpoint=checkpoint, checkpoint_every=cfg.checkpoint_every)
    (model_dir / f"{name}.json").write_text(model_to_json(model))
    if ck_path.exists():
        ck_path.unlink()
    return model


# --- variance-ratio tables ----------------------------------------------------


def _table_taskset(cfg: ExperimentConfig, kind: str, rng: Rng, padded: bool):
    if not padded:
        return gen_taskset(kind, cfg.d, cfg.r, cfg.K, cfg.n, rng, n_target=cfg.n_target, noise_sd=cfg.noise_sd)
    tasks, target = gen_hetero_taskset(
        kind, cfg.d, cfg.r, cfg.K, cfg.n, rng, d_range=tuple(cfg.d_range), n_target=cfg.n_target, noise_sd=cfg.noise_sd
    )
    return pad_taskset(tasks, cfg.d, cfg.fill, target)


def table_from_rows(rows: list, s_values: list) -> list:
    """Mean ratio over seeds per (generator, column) in the table layout."""
    cells = {}
    order = []
    for r in rows:
        gen = r["generator"]
        if gen not in order:
            order.append(gen)
        col = "Original" if r["covariates_mode"] == "raw" else f"s={int(r['s'])}"
        cells.setdefault((gen, col), []).append(float(r["ratio"]))
    out = []
    for gen in order:
        row = {"generator": ROW_NAMES.get(gen, gen)}
        for col in ["Original"] + [f"s={s}" for s in s_values]:
            vals = cells.get((gen, col), [])
            row[col] = float(np.mean(vals)) if vals else float("nan")
        out.append(row)
    return out


def run_table(cfg: ExperimentConfig, out: Path) -> list:
    padded = cfg.protocol == "table2_padding"
    rows = []
    for kind in cfg.generators:
        for k in range(cfg.n_seeds):
            seed = cfg.seed + k
            root = Rng(seed).child(f"{cfg.protocol}/{kind}")
            ts = _table_taskset(cfg, kind, root.child("data"), padded)
            target = ts.target
            # "Original" balances the covariates the target actually observes
            raw = target.X if target.mask is None else target.X[:, target.mask[0] == 1]
            design_rng = root.child("design")

            def record(mode, q, rep):
                rows.append(
                    {
                        "generator": kind,
                        "covariates_mode": mode,
                        "s": q,
                        "p_a": cfg.p_a,
                        "reps": cfg.reps,
                        "var_rem": rep.var_rem,
                        "var_cr": rep.var_cr,
                        "ratio": rep.ratio,
                        "accept_rate": rep.accept_rate,
                        "seed": seed,
                    }
                )

            rep = variance_ratio_experiment(target, raw, cfg.p_a, cfg.reps, design_rng, threshold_mode=cfg.threshold_mode, mode_name="raw")
            record("raw", raw.shape[1], rep)
            log.info("%s seed %d raw ratio %.4f", kind, seed, rep.ratio)
            for s in cfg.s:
                model = train_model(ts, cfg, s, root.child(f"meta/s{s}"), out, f"{kind}_s{s}_seed{seed}")
                Z = model.represent(target.X)
                rep = variance_ratio_experiment(
                    target, Z, cfg.p_a, cfg.reps, design_rng, threshold_mode=cfg.threshold_mode, mode_name="representation"
                )
                record("representation", s, rep)
                log.info("%s seed %d s=%d ratio %.4f", kind, seed, s, rep.ratio)
    write_csv(out / "design.csv", DESIGN_HEADER, rows)
    table = table_from_rows(rows, cfg.s)
    write_csv(out / "table.csv", ["generator", "Original"] + [f"s={s}" for s in cfg.s], table)
    for row in table:
        print("  ".join(f"{v:.3f}" if isinstance(v, float) else f"{v:<20}" for v in row.values()))
    return ["design.csv", "table.csv"]


# --- CATE -------------------------------------------------------------------


def run_cate(cfg: ExperimentConfig, out: Path) -> list:
    head_cfg = cfg.head_config()
    s = cfg.s[0]
    rows = []
    for kind in cfg.generators:
        root = Rng(cfg.seed).child(f"cate_fig/{kind}")
        ts = gen_taskset(kind, cfg.d, cfg.r, cfg.K, cfg.n, root.child("data"), noise_sd=cfg.noise_sd)
        model = train_model(ts, cfg, s, root.child("meta"), out, f"{kind}_s{s}")
        truth_rep = ts.meta["rep"]
        for rep in range(cfg.repeats):
            sub = root.child(f"repeat/{rep}")
            prop = gen_propensity("fixed", cfg.d, sub.child("prop"), p=0.5)
            target = gen_task(truth_rep, prop, max(cfg.shots), sub.child("target"), cfg.noise_sd, task_id=-1)
            for n in cfg.shots:
                sample = target.subset(np.arange(n))
                fits = {
                    "representation": fit_cate(sample, model.encoder, model.config.head_class, "meta", sub.child(f"fit/{n}"), model.head, head_cfg),
                    "baseline": fit_cate(sample, None, model.config.head_class, "scratch", sub.child(f"fit/{n}"), None, head_cfg),
                }
                for name, fitted in fits.items():
                    mse = cate_mse(fitted, target.truth, cfg.n_eval, sub.child(f"eval/{n}").generator())
                    rows.append({"protocol": "cate_fig", "generator": kind, "method": name, "shots": n, "repeat": rep, "mse": mse, "seed": cfg.seed})
    write_csv(out / "cate_rows.csv", CATE_HEADER, rows)
    summary = summarize_cate(rows)
    write_csv(out / "cate_summary.csv", CATE_SUMMARY_HEADER, summary)
    for r in summary:
        print(f"{r['generator']:<10} {r['method']:<15} shots={r['shots']:<5} mse={r['mse']:.5f} +- {r['ci95_halfwidth']:.5f}")
    return ["cate_rows.csv", "cate_summary.csv"]


def summarize_cate(rows: list) -> list:
    groups = {}
    for r in rows:
        groups.setdefault((r["protocol"], r["generator"], r["method"], int(r["shots"])), []).append(float(r["mse"]))
    out = []
    for (protocol, gen, method, shots), vals in groups.items():
        v = np.asarray(vals)
        half = 1.96 * v.std(ddof=1) / np.sqrt(v.size) if v.size > 1 else float("nan")
        out.append({"protocol": protocol, "generator": gen, "method": method, "shots": shots, "mse": float(v.mean()), "ci95_halfwidth": float(half)})
    return out


# --- ATE ----------------------------------------------------------------------


def run_ate(cfg: ExperimentConfig, out: Path) -> list:
    learned = cfg.protocol == "ate_propensity"
    propensity_kind = "neural" if learned else "fixed"
    head_cfg = cfg.head_config()
    kind = cfg.generators[0]
    s = cfg.s[0]
    root = Rng(cfg.seed).child(f"{cfg.protocol}/{kind}")
    # fixed-p tasks each draw their own p in [0.2, 0.8]
    ts = gen_taskset(kind, cfg.d, cfg.r, cfg.K, cfg.n, root.child("data"), propensity=propensity_kind, p=None, noise_sd=cfg.noise_sd)
    model = train_model(ts, cfg, s, root.child("meta"), out, f"{kind}_s{s}")
    pmodel = train_model(ts, cfg, s, root.child("meta/propensity"), out, f"{kind}_s{s}_propensity", propensity=True) if learned else None
    truth_rep = ts.meta["rep"]
    head_class = model.config.head_class

    def target_factory(rep, rng):
        prop = gen_propensity(propensity_kind, cfg.d, rng.child("prop"), p=None)
        return gen_task(truth_rep, prop, max(cfg.shots), rng, cfg.noise_sd, task_id=-1)

    def representation(task, rng):
        prop = fit_propensity(task, pmodel.encoder, pmodel.config.head_class, pmodel.head, rng.child("prop").generator(), head_cfg) if learned else None
        return dr_ate(task, model.encoder, folds_for(task, cfg.n_folds), prop, rng, head_class, model.head, head_cfg).tau_hat

    def baseline(task, rng):
        prop = fit_propensity(task, None, head_class, None, rng.child("prop").generator(), head_cfg) if learned else None
        return dr_ate(task, None, folds_for(task, cfg.n_folds), prop, rng, head_class, None, head_cfg).tau_hat

    result = ate_mse_experiment(
        cfg.protocol,
        target_factory,
        {"representation": representation, "baseline": baseline},
        cfg.shots,
        cfg.repeats,
        root.child("experiment"),
        seed=cfg.seed,
    )
    write_csv(out / "ate_rows.csv", ATE_HEADER, result.rows)
    write_csv(out / "ate_summary.csv", SUMMARY_HEADER, result.summary)
    for r in result.summary:
        print(f"{r['method']:<15} shots={r['shots']:<5} mse={r['mse']:.6f} +- {r['ci95_halfwidth']:.6f}")
    return ["ate_rows.csv", "ate_summary.csv"]


# --- closed-form curves -------------------------------------------------------


def run_rem_curves(cfg: ExperimentConfig, out: Path) -> list:
    curve = percent_variance_reduction(cfg.R2, cfg.p_a, cfg.dims)
    write_csv(out / "curve.csv", ["dim", "percent_reduction"], [{"dim": q, "percent_reduction": v} for q, v in curve])
    for q, v in curve[:: max(1, len(curve) // 10)]:
        print(f"dim={q:<4} reduction={v:.3f}%")
    return ["curve.csv"]


def run_theory_ratio(cfg: ExperimentConfig, out: Path) -> list:
    rows = [{"d": cfg.d, "s": s, "p_a": cfg.p_a, "ratio": theoretical_ratio(cfg.d, s, cfg.p_a)} for s in cfg.s]
    write_csv(out / "theory.csv", ["d", "s", "p_a", "ratio"], rows)
    for r in rows:
        print(f"d={r['d']} s={r['s']} p_a={r['p_a']} ratio={r['ratio']:.6f}")
    return ["theory.csv"]


RUNNERS = {
    "table1": run_table,
    "table2_padding": run_table,
    "cate_fig": run_cate,
    "ate_fixed_p": run_ate,
    "ate_propensity": run_ate,
    "rem_curves": run_rem_curves,
    "theory_ratio": run_theory_ratio,
}


def _same(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x.keys() != y.keys():
            return False
        for k in x:
            if _fmt_cell(x[k]) != _fmt_cell(y[k]):
                return False
    return True


def _fmt_cell(v) -> str:
    try:
        return repr(float(v))
    except (TypeError, ValueError):
        return str(v)


def verify_outputs(protocol: str, out: Path, s_values: list) -> bool:
    """Recompute aggregate files from the raw rows on disk and compare."""
    if protocol in ("table1", "table2_padding"):
        rows = read_csv(out / "design.csv")
        return _same(read_csv(out / "table.csv"), [{k: _fmt(v) for k, v in r.items()} for r in table_from_rows(rows, s_values)])
    if protocol == "cate_fig":
        rows = read_csv(out / "cate_rows.csv")
        return _same(read_csv(out / "cate_summary.csv"), [{k: _fmt(v) for k, v in r.items()} for r in summarize_cate(rows)])
    if protocol in ("ate_fixed_p", "ate_propensity"):
        rows = read_csv(out / "ate_rows.csv")
        for r in rows:
            r["shots"] = int(r["shots"])
            r["sq_error"] = float(r["sq_error"])
        return _same(read_csv(out / "ate_summary.csv"), [{k: _fmt(v) for k, v in r.items()} for r in summarize_rows(rows)])
    if protocol == "rem_curves":
        rows = read_csv(out / "curve.csv")
        return all(np.isfinite(float(r["percent_reduction"])) for r in rows)
    if protocol == "theory_ratio":
        rows = read_csv(out / "theory.csv")
        return all(
            float(r["ratio"]) == theoretical_ratio(int(r["d"]), int(r["s"]), float(r["p_a"])) for r in rows
        )
    return False
