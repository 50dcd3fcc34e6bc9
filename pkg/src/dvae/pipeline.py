"""Train/evaluate building blocks shared by the CLI subcommands and sweeps."""

from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor

from . import __version__
from .data import Dataset, load_dataset
from .metrics import build_trial_list, dci, eer_from_vectors, wsepin
from .vae import (LossWeights, TrainConfig, TrainingError, VaeModel, dataset_kl, encode,
                  reconstruct, train)

TRAIN_KEYS = ("objective", "alpha", "beta", "gamma", "beta_s", "iterations",
              "batch_size", "lr", "latent_dim", "hidden", "activation", "eval_every",
              "seed")
EVAL_KEYS = ("seed", "trials_per_class", "mi_points", "mc_samples", "regressor",
             "n_estimators", "max_depth")


def dumps(obj) -> str:
    """Canonical JSON used for every report, so equal runs give equal bytes."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(obj))


def envelope(command: str, config: dict, **body) -> dict:
    return {"toolkit": "dvae", "version": __version__, "command": command,
            "config": config, **body}


def train_from_config(ds: Dataset, cfg: dict):
    weights = LossWeights(alpha=cfg["alpha"], beta=cfg["beta"], gamma=cfg["gamma"],
                          beta_s=cfg["beta_s"])
    tc = TrainConfig(iterations=cfg["iterations"], batch_size=cfg["batch_size"],
                     learning_rate=cfg["lr"], seed=cfg["seed"],
                     eval_every=cfg["eval_every"], objective=cfg["objective"])
    init = VaeModel.init(ds.X.shape[1], cfg["latent_dim"], hidden=tuple(cfg["hidden"]),
                         activation=cfg["activation"], seed=cfg["seed"])
    return train(ds, init, tc, weights)


def evaluate(model: VaeModel | None, ds: Dataset, cfg: dict):
    """All metrics for one model (or the raw observations when ``model`` is None).

    Returns ``(body, importance)``; ``body`` holds the report sections.
    """
    notices = []
    seed = cfg["seed"]
    if model is None:
        vectors, latents = ds.X, ds.X
    else:
        vectors = reconstruct(model, ds.X)
        latents = encode(model, ds.X).mu

    eer = None
    if ds.labels is not None:
        trials = build_trial_list(ds.labels, cfg["trials_per_class"], seed)
        eer = eer_from_vectors(vectors, trials)
    else:
        notices.append("EER skipped: dataset has no labels")

    ws = kld = None
    if model is not None:
        ws = wsepin(model, ds.X, mc_samples=cfg["mc_samples"], seed=seed,
                    max_points=cfg["mi_points"]).as_dict()
        total, per_dim = dataset_kl(model, ds.X)
        kld = {"mean": total, "per_dim": per_dim.tolist()}
    else:
        notices.append("WSEPIN and KLD skipped: raw observations have no posterior")

    dci_body, importance = None, None
    if ds.F is not None:
        importance, scores = dci(latents, ds.F, split_seed=seed, regressor=cfg["regressor"],
                                 factor_names=ds.factor_names,
                                 n_estimators=cfg["n_estimators"],
                                 max_depth=cfg["max_depth"])
        dci_body = scores.as_dict()
    else:
        notices.append("DCI skipped: dataset has no factor columns")

    body = {"eer": eer, "wsepin": ws, "dci": dci_body, "kld": kld, "notices": notices}
    return body, importance


def train_and_save(ds: Dataset, cfg: dict, out_dir) -> tuple[VaeModel, dict]:
    model, log = train_from_config(ds, cfg)
    os.makedirs(out_dir, exist_ok=True)
    model.save(os.path.join(out_dir, "model.dvae"))
    log.save(os.path.join(out_dir, "train_log.jsonl"))
    total, per_dim = dataset_kl(model, ds.X)
    summary = {"final": log.records[-1], "kld": {"mean": total, "per_dim": per_dim.tolist()}}
    write_json(os.path.join(out_dir, "train_report.json"),
               envelope("train", {k: cfg[k] for k in TRAIN_KEYS} | {"data": cfg["data"]},
                        **summary))
    return model, summary


def evaluate_and_save(model, ds: Dataset, cfg: dict, out_dir, command="eval") -> dict:
    body, importance = evaluate(model, ds, cfg)
    os.makedirs(out_dir, exist_ok=True)
    if importance is not None:
        importance.to_csv(os.path.join(out_dir, "importance.csv"))
    report = envelope(command, cfg, **body)
    write_json(os.path.join(out_dir, "report.json"), report)
    return report


# -- sweeps ------------------------------------------------------------------

def grid_cells(cfg: dict) -> list[dict]:
    """Expand the weight grid into per-cell weight dicts (beta-major order)."""
    if cfg["objective"] == "beta_vae":
        return [{"alpha": 0.0, "beta": 0.0, "gamma": 0.0, "beta_s": float(b)}
                for b in cfg["beta_s"]]
    if cfg.get("tied"):
        return [{"alpha": float(b), "beta": float(b), "gamma": float(b), "beta_s": 0.0}
                for b in cfg["beta"]]
    return [{"alpha": float(a), "beta": float(b), "gamma": float(g), "beta_s": 0.0}
            for b, g, a in itertools.product(cfg["beta"], cfg["gamma"], cfg["alpha"])]


def cell_config(cfg: dict, weights: dict) -> dict:
    keys = set(TRAIN_KEYS) | set(EVAL_KEYS) | {"data"}
    return {k: cfg[k] for k in keys if k not in weights} | weights


def run_cell(args) -> dict:
    """Train and evaluate one grid cell; failures are returned, not raised."""
    index, ccfg, cell_dir = args
    report_path = os.path.join(cell_dir, "report.json")
    if os.path.exists(report_path):
        with open(report_path, encoding="utf-8") as fh:
            done = json.load(fh)
        if done.get("config") == ccfg:
            return {"index": index, "status": "ok", "report": done, "resumed": True}
    try:
        ds = load_dataset(ccfg["data"])
        model, _ = train_and_save(ds, ccfg, cell_dir)
        report = evaluate_and_save(model, ds, ccfg, cell_dir, command="sweep-cell")
        return {"index": index, "status": "ok", "report": report, "resumed": False}
    except (TrainingError, FloatingPointError, ValueError) as exc:
        return {"index": index, "status": f"failed: {exc}", "report": None, "resumed": False}


SWEEP_COLUMNS = ("cell", "objective", "alpha", "beta", "gamma", "beta_s", "eer",
                 "wsepin", "wsepin_flagged", "kld", "compactness", "modularity",
                 "explicitness", "status")


def _row(index, ccfg, result) -> dict:
    rep = result["report"] or {}
    dci_body = (rep.get("dci") or {}).get("aggregates", {})
    ws = rep.get("wsepin") or {}
    kld = rep.get("kld") or {}
    return {"cell": index, "objective": ccfg["objective"], "alpha": ccfg["alpha"],
            "beta": ccfg["beta"], "gamma": ccfg["gamma"], "beta_s": ccfg["beta_s"],
            "eer": rep.get("eer"), "wsepin": ws.get("value"),
            "wsepin_flagged": ws.get("flagged"), "kld": kld.get("mean"),
            "compactness": dci_body.get("compactness"),
            "modularity": dci_body.get("modularity"),
            "explicitness": dci_body.get("explicitness"),
            "status": result["status"]}


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _series(cfg: dict, rows: list[dict]) -> list[dict]:
    """Long-format curves: one series per fixed weight, swept along the other."""
    out = []
    for r in rows:
        if cfg["objective"] == "beta_vae":
            out.append({"series": "beta_s", "x_name": "beta_s", "x": r["beta_s"], **r})
        elif cfg.get("tied"):
            out.append({"series": "alpha=gamma=beta", "x_name": "beta", "x": r["beta"], **r})
        else:
            out.append({"series": f"alpha={r['alpha']!r},beta={r['beta']!r}",
                        "x_name": "gamma", "x": r["gamma"], **r})
            out.append({"series": f"alpha={r['alpha']!r},gamma={r['gamma']!r}",
                        "x_name": "beta", "x": r["beta"], **r})
    return out


def run_sweep(cfg: dict, out_dir, jobs: int = 1, progress=None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    cells = grid_cells(cfg)
    tasks = [(i, cell_config(cfg, w), os.path.join(out_dir, f"cell_{i:03d}"))
             for i, w in enumerate(cells)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, tasks))
    else:
        results = []
        for t in tasks:
            results.append(run_cell(t))
            if progress is not None:
                progress(results[-1])
    rows = [_row(i, ccfg, res) for (i, ccfg, _), res in zip(tasks, results)]
    _write_csv(os.path.join(out_dir, "sweep.csv"), SWEEP_COLUMNS, rows)
    _write_csv(os.path.join(out_dir, "series.csv"),
               ("series", "x_name", "x", "eer", "wsepin", "kld", "cell"),
               _series(cfg, rows))
    summary = envelope("sweep", cfg, cells=rows)
    write_json(os.path.join(out_dir, "sweep_report.json"), summary)
    return summary


def run_config_defaults(cfg: dict) -> dict:
    """Round floats/ints coming from JSON or argparse to canonical types."""
    out = dict(cfg)
    for k in ("alpha", "beta", "gamma", "beta_s", "lr"):
        if k in out and not isinstance(out[k], list):
            out[k] = float(out[k])
    if "hidden" in out:
        out["hidden"] = [int(h) for h in out["hidden"]]
    return out
