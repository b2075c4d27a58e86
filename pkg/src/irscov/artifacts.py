"""Stage-boundary files: every pipeline stage's output is a plain CSV or
JSON file that the next stage (or an external testbed/ray-tracing toolchain)
can produce or consume. Floats are written with shortest round-trip repr so
a write/read cycle reproduces the exact values.
"""

import csv
import json
import math
import os

import numpy as np

from . import geostat
from .errors import ArtifactError
from .measurement import (MeasurementRecord, profiles_from_records,
                          write_measurements, write_patterns)
from .nnest import ChannelEstimate
from .scene import save_scene

__all__ = [
    "StageWriter",
    "write_estimate",
    "read_estimate",
    "write_results_csv",
    "read_results_csv",
    "write_metrics_csv",
    "read_metrics_csv",
    "write_summary_json",
]

SCENE_FILE = "scene.json"
SELECTION_FILE = "selection.txt"
SELECTION_SUMMARY_FILE = "selection_summary.json"
VARIOGRAM_FILE = "variogram.csv"
VARIOGRAM_FIT_FILE = "variogram_fit.json"
RESULTS_FILE = "results.csv"
ESTIMATE_DIR = "estimates"


def patterns_file(tag: str) -> str:
    return f"patterns_{tag}.csv"


def measurements_file(tag: str) -> str:
    return f"measurements_{tag}.csv"


class StageWriter:
    """Writes each stage artifact into one output directory as it appears."""

    def __init__(self, out_dir):
        self.out_dir = str(out_dir)
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def scene(self, scene) -> None:
        save_scene(self.path(SCENE_FILE), scene)

    def campaign(self, tag: str, patterns, profiles, settings, q: int) -> None:
        write_patterns(self.path(patterns_file(tag)), patterns)
        records = []
        for k in sorted(profiles):
            prof = profiles[k]
            for pid, p_bar in zip(prof.pattern_ids, prof.powers):
                records.append(MeasurementRecord(
                    grid=k, pattern=pid, p_bar=float(p_bar), q=q,
                    p_tx=settings.p_tx, noise_power=settings.noise_power))
        write_measurements(self.path(measurements_file(tag)), records)

    def selection(self, selected, detail: dict) -> None:
        geostat.write_selection(self.path(SELECTION_FILE), selected)
        summary = {"mode": detail["mode"], "k2": len(selected)}
        if detail["mode"] == "geostat":
            geostat.write_variogram(self.path(VARIOGRAM_FILE), detail["variogram"])
            geostat.write_fit(self.path(VARIOGRAM_FIT_FILE), detail["fit"])
            split = detail["split"]
            sel = detail["selection"]
            summary.update({
                "c0_star": split.c0_star,
                "rho1": split.rho1,
                "rho2": split.rho2,
                "max_grids": split.max_grids,
                "subregions": [
                    {"grids": list(members), "c_star": c, "eta": eta,
                     "chosen": list(chosen)}
                    for members, c, eta, chosen in zip(
                        split.subregions, sel.c_stars, sel.etas, sel.per_subregion)
                ],
            })
        with open(self.path(SELECTION_SUMMARY_FILE), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def estimates(self, estimates: dict, truth=None) -> None:
        est_dir = self.path(ESTIMATE_DIR)
        os.makedirs(est_dir, exist_ok=True)
        for k in sorted(estimates):
            grid_nmse = None
            if truth is not None:
                est = estimates[k]
                g_hat = est.covariance
                g_true = truth.covariance(k)
                denom = float(np.sum(np.abs(g_true) ** 2))
                if denom > 0:
                    grid_nmse = float(np.sum(np.abs(g_hat - g_true) ** 2)) / denom
            write_estimate(os.path.join(est_dir, f"grid_{k}.csv"),
                           estimates[k], grid_nmse)

    def results(self, record) -> None:
        write_results_csv(self.path(RESULTS_FILE), record.methods)


def write_estimate(path, estimate: ChannelEstimate, grid_nmse=None) -> None:
    """Per-grid estimator dump: channel vector, bias, validation trace, best
    epoch, and the grid's covariance NMSE when ground truth was available."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("field,index,re,im\n")
        for i, w in enumerate(estimate.w_star):
            fh.write(f"w,{i},{float(w.real)!r},{float(w.imag)!r}\n")
        fh.write(f"w0,0,{float(estimate.w0_star)!r},0.0\n")
        fh.write(f"best_epoch,0,{float(estimate.best_epoch)!r},0.0\n")
        for z, err in enumerate(estimate.validation_trace):
            fh.write(f"val_loss,{z},{float(err)!r},0.0\n")
        if grid_nmse is not None:
            fh.write(f"nmse,0,{grid_nmse!r},0.0\n")


def read_estimate(path):
    """Inverse of write_estimate: (ChannelEstimate, nmse or None)."""
    w, trace = {}, {}
    w0 = best_epoch = grid_nmse = None
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["field", "index", "re", "im"]:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                idx = int(row["index"])
                re, im = float(row["re"]), float(row["im"])
            except (TypeError, ValueError):
                raise ArtifactError(f"{path}: malformed row {row}") from None
            kind = row["field"]
            if kind == "w":
                w[idx] = complex(re, im)
            elif kind == "w0":
                w0 = re
            elif kind == "best_epoch":
                best_epoch = int(re)
            elif kind == "val_loss":
                trace[idx] = re
            elif kind == "nmse":
                grid_nmse = re
            else:
                raise ArtifactError(f"{path}: unknown field {kind!r}")
    if w0 is None or best_epoch is None or sorted(w) != list(range(len(w))) \
            or sorted(trace) != list(range(len(trace))) or not w or not trace:
        raise ArtifactError(f"{path}: incomplete estimate file")
    grid = _grid_from_name(path)
    estimate = ChannelEstimate(
        w_star=np.array([w[i] for i in range(len(w))]),
        w0_star=w0,
        validation_trace=np.array([trace[z] for z in range(len(trace))]),
        best_epoch=best_epoch,
        grid=grid,
    )
    return estimate, grid_nmse


def _grid_from_name(path) -> int:
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem.startswith("grid_"):
        try:
            return int(stem[5:])
        except ValueError:
            pass
    return -1


def read_estimates_dir(est_dir):
    """All grid_<k>.csv estimates in a directory, keyed by grid index."""
    if not os.path.isdir(est_dir):
        raise ArtifactError(f"missing estimates directory {est_dir}")
    out = {}
    for name in sorted(os.listdir(est_dir)):
        if name.startswith("grid_") and name.endswith(".csv"):
            est, _ = read_estimate(os.path.join(est_dir, name))
            if est.grid < 0:
                raise ArtifactError(f"{name}: cannot infer grid index")
            out[est.grid] = est
    if not out:
        raise ArtifactError(f"no estimate files in {est_dir}")
    return out


def write_results_csv(path, method_metrics) -> None:
    """Optimization results: one row per method."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,theta,objective,wall_time\n")
        for m in method_metrics:
            theta = " ".join(str(i) for i in m.theta_indices)
            fh.write(f"{m.method},{theta},{float(m.objective)!r},{float(m.wall_time)!r}\n")


def read_results_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["method", "theta", "objective", "wall_time"]:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                rows.append({
                    "method": row["method"],
                    "theta_indices": tuple(int(t) for t in row["theta"].split()),
                    "objective": float(row["objective"]),
                    "wall_time": float(row["wall_time"]),
                })
            except (TypeError, ValueError, AttributeError):
                raise ArtifactError(f"{path}: malformed row {row}") from None
    if not rows:
        raise ArtifactError(f"{path}: no result rows")
    return rows


METRICS_HEADER = ["seed", "method", "digest", "k2", "nmse", "snr_db",
                  "objective", "theta", "wall_time"]


def metrics_file(digest: str) -> str:
    return f"metrics_{digest}.csv"


def summary_file(digest: str) -> str:
    return f"summary_{digest}.json"


def write_metrics_csv(out_dir, digest: str, records) -> str:
    path = os.path.join(str(out_dir), metrics_file(digest))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for rec in records:
            nm = "" if rec.nmse is None else repr(float(rec.nmse))
            for m in rec.methods:
                theta = " ".join(str(i) for i in m.theta_indices)
                fh.write(f"{rec.seed},{m.method},{rec.digest},{rec.k2},{nm},"
                         f"{float(m.snr_db)!r},{float(m.objective)!r},{theta},{float(m.wall_time)!r}\n")
    return path


def read_metrics_csv(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ArtifactError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                rows.append({
                    "seed": int(row["seed"]),
                    "method": row["method"],
                    "digest": row["digest"],
                    "k2": int(row["k2"]),
                    "nmse": float(row["nmse"]) if row["nmse"] else None,
                    "snr_db": float(row["snr_db"]),
                    "objective": float(row["objective"]),
                    "theta_indices": tuple(int(t) for t in row["theta"].split()),
                    "wall_time": float(row["wall_time"]),
                })
            except (TypeError, ValueError, AttributeError):
                raise ArtifactError(f"{path}: malformed row {row}") from None
    if not rows:
        raise ArtifactError(f"{path}: no metric rows")
    return rows


def _quantiles(values) -> dict:
    arr = np.array(values, dtype=float)
    return {
        "median": float(np.median(arr)),
        "q25": float(np.quantile(arr, 0.25)),
        "q75": float(np.quantile(arr, 0.75)),
    }


def write_summary_json(out_dir, digest: str, records) -> str:
    methods = {}
    for rec in records:
        for m in rec.methods:
            methods.setdefault(m.method, {"snr_db": [], "objective": []})
            methods[m.method]["snr_db"].append(m.snr_db)
            methods[m.method]["objective"].append(m.objective)
    nmses = [rec.nmse for rec in records if rec.nmse is not None]

    def method_block(vals):
        block = {"snr_db": _quantiles(vals["snr_db"])}
        finite = [o for o in vals["objective"] if not math.isnan(o)]
        block["objective_median"] = float(np.median(finite)) if finite else None
        return block

    summary = {
        "digest": digest,
        "seeds": [rec.seed for rec in records],
        "k2": [rec.k2 for rec in records],
        "nmse": _quantiles(nmses) if nmses else None,
        "methods": {name: method_block(vals) for name, vals in methods.items()},
    }
    path = os.path.join(str(out_dir), summary_file(digest))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path
