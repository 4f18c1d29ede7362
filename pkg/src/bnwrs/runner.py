"""Experiment runner: deterministic training loops, metrics CSVs,
snapshots, sweeps and tidy plot-data extraction.

Reproducibility contract: a config plus seed fully determines the metrics
CSV byte for byte.  Initialization, synthetic data and per-epoch shuffles
all derive from counter-style seed sequences keyed on (seed, purpose,
epoch), so no hidden global RNG state is involved.  Rows are flushed as
they are written; a killed run leaves a parseable CSV prefix.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Optional

import numpy as np

from .analysis import ema, layer_tags, record_step_metrics, sparsity_profile
from .config import ExperimentConfig, SweepSpec, config_from_dict, set_by_path
from .datasets import load_idx_dataset, make_synthetic, split_train_test
from .errors import ConfigError, DataFormatError, NumericalAbortError
from .layers import Network, build_network
from .optim import LrSchedule, Optimizer
from .regularize import RegularizerConfig, apply_regularizer_step, decay_coefficients
from .tensor import backward, no_grad

__all__ = [
    "Trainer",
    "evaluate",
    "run_experiment",
    "run_sweep",
    "emit_plotdata",
    "save_snapshot",
    "load_snapshot",
    "build_dataset",
    "read_metrics_csv",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1
SNAPSHOT_MAGIC = b"BWRS"
SNAPSHOT_VERSION = 1

BASE_COLUMNS = [
    "run_id", "epoch", "step", "train_loss", "train_acc",
    "test_loss", "test_acc", "lr", "wrs_fired", "zero_norm_warnings",
]


# ---------------------------------------------------------------------------
# Snapshots: JSON header + length-prefixed float64 arrays
# ---------------------------------------------------------------------------


def save_snapshot(path: str, arrays: dict, meta: Optional[dict] = None) -> None:
    names = sorted(arrays)
    header = {
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack(">I", SNAPSHOT_VERSION))
        fh.write(struct.pack(">Q", len(header_bytes)))
        fh.write(header_bytes)
        for name in names:
            raw = np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes()
            fh.write(struct.pack(">Q", len(raw)))
            fh.write(raw)


def load_snapshot(path: str) -> tuple:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != SNAPSHOT_MAGIC:
        raise DataFormatError(f"{path}: bad snapshot magic {buf[:4]!r} at byte 0")
    version = struct.unpack_from(">I", buf, 4)[0]
    if version != SNAPSHOT_VERSION:
        raise DataFormatError(f"{path}: unsupported snapshot version {version}")
    header_len = struct.unpack_from(">Q", buf, 8)[0]
    offset = 16
    header = json.loads(buf[offset : offset + header_len].decode("utf-8"))
    offset += header_len
    arrays = {}
    for entry in header["arrays"]:
        if offset + 8 > len(buf):
            raise DataFormatError(f"{path}: truncated at byte {offset}")
        nbytes = struct.unpack_from(">Q", buf, offset)[0]
        offset += 8
        if offset + nbytes > len(buf):
            raise DataFormatError(f"{path}: truncated array {entry['name']} at byte {offset}")
        arr = np.frombuffer(buf, dtype=np.float64, count=nbytes // 8, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    return arrays, header["meta"]


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def evaluate(network: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple:
    """Mean loss and accuracy in eval mode (running batchnorm statistics)."""
    total_loss, correct, n = 0.0, 0, x.shape[0]
    with no_grad():
        for start in range(0, n, batch_size):
            xb, yb = x[start : start + batch_size], y[start : start + batch_size]
            logits, loss = network.loss(xb, yb, mode="eval")
            total_loss += loss.item() * xb.shape[0]
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
    return total_loss / n, correct / n


class Trainer:
    """Single-threaded training loop around one network.

    The loop owns the optimizer states and the global step counter;
    regularization (decay coefficients and periodic rescaling) is applied
    per step according to ``regularizer``.  A rolling copy of the
    parameters from the last finite-loss step backs the abort path.
    """

    def __init__(self, network: Network, optimizer_kind: str, lr_schedule: LrSchedule,
                 regularizer: Optional[RegularizerConfig] = None, seed: int = 0,
                 momentum: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8,
                 decay_in_buffer: bool = True, track_slices: int = 0):
        self.network = network
        self.schedule = lr_schedule
        self.regularizer = regularizer or RegularizerConfig()
        self.seed = int(seed)
        self.track_slices = int(track_slices)
        roles = {
            f"layer{i}.weight": (layer.scale_invariant, layer.slice_kind)
            for i, layer in network.weight_layers()
        }
        self.optimizer = Optimizer(
            optimizer_kind, network.named_params(), lr=lr_schedule.initial,
            momentum=momentum, beta2=beta2, epsilon=epsilon,
            decay_in_buffer=decay_in_buffer, roles=roles,
        )
        self.global_step = 0
        self.zero_norm_warnings = 0
        self.last_good: dict = network.param_arrays()
        self.history: list = []

    def _batches(self, n: int, batch_size: int, epoch: int):
        perm = np.random.default_rng(
            np.random.SeedSequence([self.seed, 2, int(epoch)])
        ).permutation(n)
        # incomplete trailing batches are dropped: batch statistics stay
        # uniform and train-mode batchnorm never sees a single-sample batch
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start : start + batch_size]

    def train(self, x_train, y_train, x_test, y_test, epochs: int, batch_size: int,
              metrics_every: int = 10, on_row: Optional[Callable] = None,
              on_epoch_end: Optional[Callable] = None) -> list:
        network = self.network
        params = network.named_params()
        adam_family = self.optimizer.kind in ("adam", "adamw", "adamp")
        for epoch in range(epochs):
            lr = self.schedule.value(epoch)
            epoch_loss, epoch_correct, epoch_seen = 0.0, 0, 0
            fired_this_epoch = False
            last_metrics: dict = {}
            for idx in self._batches(x_train.shape[0], batch_size, epoch):
                xb, yb = x_train[idx], y_train[idx]
                logits, loss = network.loss(xb, yb, mode="train")
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise NumericalAbortError(
                        f"non-finite loss {loss_value} at step {self.global_step + 1} "
                        f"(epoch {epoch})"
                    )
                network.zero_grad()
                backward(loss)
                grads = {name: p.grad for name, p in params.items()}
                decay = decay_coefficients(network, self.regularizer, epoch)
                effective = self.optimizer.step(params, grads, lr, decay)
                self.global_step += 1
                events = apply_regularizer_step(
                    network, self.regularizer, self.global_step, epoch
                )
                self.zero_norm_warnings += events["zero_norm_skips"]
                fired_this_epoch = fired_this_epoch or events["fired"]
                self.last_good = network.param_arrays()

                batch_correct = int((np.argmax(logits.data, axis=1) == yb).sum())
                epoch_loss += loss_value * xb.shape[0]
                epoch_correct += batch_correct
                epoch_seen += xb.shape[0]

                ratio_updates = effective if adam_family else grads
                last_metrics = record_step_metrics(
                    network, grads, ratio_updates, self.track_slices
                )
                if on_row is not None and self.global_step % metrics_every == 0:
                    on_row({
                        "epoch": epoch,
                        "step": self.global_step,
                        "train_loss": loss_value,
                        "train_acc": batch_correct / xb.shape[0],
                        "test_loss": None,
                        "test_acc": None,
                        "lr": lr,
                        "wrs_fired": int(events["fired"]),
                        "zero_norm_warnings": self.zero_norm_warnings,
                        **last_metrics,
                    })
            if x_test is not None and x_test.shape[0]:
                test_loss, test_acc = evaluate(network, x_test, y_test)
            else:
                test_loss, test_acc = None, None
            record = {
                "epoch": epoch,
                "step": self.global_step,
                "train_loss": epoch_loss / max(epoch_seen, 1),
                "train_acc": epoch_correct / max(epoch_seen, 1),
                "test_loss": test_loss,
                "test_acc": test_acc,
                "lr": lr,
            }
            self.history.append(record)
            if on_row is not None:
                on_row({
                    **record,
                    "wrs_fired": int(fired_this_epoch),
                    "zero_norm_warnings": self.zero_norm_warnings,
                    **last_metrics,
                })
            if on_epoch_end is not None:
                on_epoch_end(epoch)
        return self.history


# ---------------------------------------------------------------------------
# Dataset assembly from config
# ---------------------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig) -> dict:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        data_seed = cfg.seed if ds.seed is None else ds.seed
        x, y = make_synthetic(ds.k, ds.dim, ds.n, data_seed, separation=ds.separation,
                              placement=ds.placement)
        if ds.image_shape is not None:
            x = x.reshape(x.shape[0], *ds.image_shape)
        x_train, y_train, x_test, y_test = split_train_test(
            x, y, cfg.holdout_fraction, data_seed
        )
        n_classes = ds.k
        split = f"holdout {cfg.holdout_fraction}"
    else:
        x_train, y_train = load_idx_dataset(ds.images, ds.labels)
        if ds.test_images and ds.test_labels:
            x_test, y_test = load_idx_dataset(ds.test_images, ds.test_labels)
            split = "separate test files"
        else:
            x_train, y_train, x_test, y_test = split_train_test(
                x_train, y_train, cfg.holdout_fraction, cfg.seed
            )
            split = f"holdout {cfg.holdout_fraction}"
        n_classes = int(max(y_train.max(), y_test.max())) + 1
    return {
        "x_train": x_train, "y_train": y_train,
        "x_test": x_test, "y_test": y_test,
        "input_shape": tuple(x_train.shape[1:]),
        "n_classes": n_classes,
        "split": split,
    }


# ---------------------------------------------------------------------------
# Single experiment
# ---------------------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def metric_columns(network: Network, track_slices: int) -> list:
    zeros = {
        f"layer{i}.weight": np.zeros_like(layer.weight.data)
        for i, layer in network.weight_layers()
    }
    return list(record_step_metrics(network, zeros, zeros, track_slices).keys())


def run_experiment(config: ExperimentConfig, out_dir: str,
                   seed_override: Optional[int] = None) -> dict:
    """Train per the config, writing ``metrics.csv``, ``meta.json`` and
    snapshots under ``out_dir``.  Returns a small summary dict."""
    cfg = config
    if seed_override is not None:
        cfg = dataclasses.replace(config, seed=int(seed_override))
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    run_id = f"{cfg.name}-s{cfg.seed}"

    data = build_dataset(cfg)
    network = build_network(
        cfg.architecture, data["input_shape"], data["n_classes"], seed=cfg.seed,
        bn_epsilon=cfg.bn_epsilon, bn_momentum=cfg.bn_momentum,
    )
    schedule = LrSchedule(cfg.optimizer.lr, cfg.lr_decay_epochs, cfg.lr_decay_factor)
    trainer = Trainer(
        network, cfg.optimizer.kind, schedule, cfg.regularizer, seed=cfg.seed,
        momentum=cfg.optimizer.momentum, beta2=cfg.optimizer.beta2,
        epsilon=cfg.optimizer.epsilon, decay_in_buffer=cfg.optimizer.decay_in_buffer,
        track_slices=cfg.track_slices,
    )

    columns = BASE_COLUMNS + metric_columns(network, cfg.track_slices)
    config_hash = cfg.hash()
    meta = {
        "run_id": run_id,
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": config_hash,
        "columns": columns,
        "n_train": int(data["x_train"].shape[0]),
        "n_test": int(data["x_test"].shape[0]),
        "split": data["split"],
        "status": "running",
    }
    meta_path = os.path.join(out_dir, "meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)

    csv_path = os.path.join(out_dir, "metrics.csv")
    fh = open(csv_path, "w", encoding="utf-8", newline="")
    writer = csv.writer(fh)
    writer.writerow(columns)

    def write_row(row: dict) -> None:
        writer.writerow([_format_cell(row.get(c)) if c != "run_id" else run_id
                         for c in columns])
        fh.flush()

    # initial evaluation row before any training step
    test_loss, test_acc = evaluate(network, data["x_test"], data["y_test"])
    initial_norms = record_step_metrics(network, {}, {}, cfg.track_slices)
    write_row({
        "epoch": 0, "step": 0, "train_loss": None, "train_acc": None,
        "test_loss": test_loss, "test_acc": test_acc,
        "lr": schedule.value(0), "wrs_fired": 0, "zero_norm_warnings": 0,
        **initial_norms,
    })

    def snapshot(tag: str, epoch: Optional[int] = None) -> str:
        path = os.path.join(out_dir, f"{tag}.snap")
        save_snapshot(path, network.param_arrays(), {
            "run_id": run_id, "config_hash": config_hash,
            "epoch": epoch, "tag": tag,
        })
        return path

    def on_epoch_end(epoch: int) -> None:
        if epoch in cfg.snapshot_epochs:
            snapshot(f"epoch{epoch:04d}", epoch)

    status = "complete"
    try:
        try:
            trainer.train(
                data["x_train"], data["y_train"], data["x_test"], data["y_test"],
                epochs=cfg.epochs, batch_size=cfg.batch_size,
                metrics_every=cfg.metrics_every, on_row=write_row,
                on_epoch_end=on_epoch_end,
            )
        finally:
            fh.flush()
    except NumericalAbortError as exc:
        status = "aborted"
        write_row({
            "epoch": None, "step": trainer.global_step + 1,
            "train_loss": math.nan, "train_acc": None,
            "test_loss": None, "test_acc": None, "lr": None,
            "wrs_fired": 0, "zero_norm_warnings": trainer.zero_norm_warnings,
        })
        fh.close()
        last_good = os.path.join(out_dir, "last_good.snap")
        save_snapshot(last_good, trainer.last_good, {
            "run_id": run_id, "config_hash": config_hash, "tag": "last_good",
        })
        meta["status"] = status
        with open(meta_path, "w", encoding="utf-8") as mfh:
            json.dump(meta, mfh, indent=2, sort_keys=True)
        raise NumericalAbortError(str(exc), last_good_snapshot=last_good) from exc
    fh.close()
    snapshot("final", cfg.epochs - 1 if cfg.epochs else None)

    history = trainer.history
    summary = {
        "run_id": run_id,
        "out_dir": out_dir,
        "status": status,
        "steps": trainer.global_step,
        "final_train_acc": history[-1]["train_acc"] if history else None,
        "final_test_acc": history[-1]["test_acc"] if history else test_acc,
        "best_test_acc": max((h["test_acc"] for h in history), default=test_acc),
    }
    meta["status"] = status
    meta["summary"] = summary
    with open(meta_path, "w", encoding="utf-8") as fh2:
        json.dump(meta, fh2, indent=2, sort_keys=True)
    return summary


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def _sweep_one(args: tuple) -> dict:
    raw, run_dir = args
    try:
        summary = run_experiment(config_from_dict(raw), run_dir)
        summary["ok"] = True
        return summary
    except (NumericalAbortError, ConfigError, DataFormatError) as exc:
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}", "out_dir": run_dir}


def run_sweep(spec: SweepSpec, out_dir: str, jobs: int = 1) -> dict:
    """Cartesian sweep with per-cell replicas differing only by seed.

    Writes one aggregate row per cell to ``sweep.csv`` (mean/std over the
    replicas that finished; failures are counted, not fatal).
    """
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    axis_names = list(spec.axes)
    base_seed = int(spec.base.get("seed", 0))
    jobs_list = []
    cells = list(itertools.product(*(spec.axes[a] for a in axis_names)))
    for ci, combo in enumerate(cells):
        for rep in range(spec.replicas):
            raw = json.loads(json.dumps(spec.base))  # deep copy via round-trip
            for name, value in zip(axis_names, combo):
                set_by_path(raw, name, value)
            raw["seed"] = base_seed + rep
            raw["name"] = f"cell{ci:03d}"
            run_dir = os.path.join(out_dir, f"cell{ci:03d}_rep{rep}")
            jobs_list.append((ci, rep, raw, run_dir))

    results: dict = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (ci, rep, _, _), res in zip(
                jobs_list, pool.map(_sweep_one, [(raw, d) for _, _, raw, d in jobs_list])
            ):
                results[(ci, rep)] = res
    else:
        for ci, rep, raw, run_dir in jobs_list:
            results[(ci, rep)] = _sweep_one((raw, run_dir))

    rows = []
    for ci, combo in enumerate(cells):
        cell_results = [results[(ci, rep)] for rep in range(spec.replicas)]
        oks = [r for r in cell_results if r.get("ok")]
        accs = np.array([r["final_test_acc"] for r in oks], dtype=np.float64)
        trains = np.array([r["final_train_acc"] for r in oks], dtype=np.float64)
        row = {"cell": ci}
        row.update({name: value for name, value in zip(axis_names, combo)})
        row.update({
            "mean_test_acc": float(accs.mean()) if accs.size else math.nan,
            "std_test_acc": float(accs.std()) if accs.size else math.nan,
            "mean_train_acc": float(trains.mean()) if trains.size else math.nan,
            "std_train_acc": float(trains.std()) if trains.size else math.nan,
            "n_ok": len(oks),
            "n_failed": spec.replicas - len(oks),
        })
        rows.append(row)
    best = max(
        (r for r in rows if not math.isnan(r["mean_test_acc"])),
        key=lambda r: r["mean_test_acc"],
        default=None,
    )
    for row in rows:
        row["is_best"] = int(best is not None and row["cell"] == best["cell"])

    columns = ["cell"] + axis_names + [
        "mean_test_acc", "std_test_acc", "mean_train_acc", "std_train_acc",
        "n_ok", "n_failed", "is_best",
    ]
    csv_path = os.path.join(out_dir, "sweep.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_cell(row[c]) for c in columns])
    with open(os.path.join(out_dir, "sweep_meta.json"), "w", encoding="utf-8") as fh:
        json.dump({"axes": spec.axes, "replicas": spec.replicas,
                   "base": spec.base, "columns": columns}, fh, indent=2, sort_keys=True)
    return {"cells": rows, "csv": csv_path}


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def read_metrics_csv(path: str) -> list:
    """Metrics rows as dicts; numeric fields parsed, empty fields -> None."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for record in csv.DictReader(fh):
            parsed = {}
            for key, value in record.items():
                if value == "" or value is None:
                    parsed[key] = None
                elif key == "run_id":
                    parsed[key] = value
                else:
                    parsed[key] = float(value)
            rows.append(parsed)
    return rows


def _plot_norm_traj(run_dir: str) -> list:
    rows = read_metrics_csv(os.path.join(run_dir, "metrics.csv"))
    out = []
    columns = [c for c in rows[0] if c.startswith(("w_norm.", "g_norm.", "eff_ratio."))]
    for col in columns:
        series = [(r["step"], r[col]) for r in rows if r[col] is not None]
        for x, y in series:
            out.append({"series": col, "x": x, "y": y})
        if col.startswith(("g_norm.", "eff_ratio.")) and series:
            smooth = ema([y for _, y in series])
            for (x, _), y in zip(series, smooth):
                out.append({"series": f"{col}.ema", "x": x, "y": float(y)})
    return out


def _plot_overfit_compare(parent_dir: str) -> list:
    run_dirs = sorted(
        d for d in (os.path.join(parent_dir, name) for name in os.listdir(parent_dir))
        if os.path.exists(os.path.join(d, "metrics.csv"))
    )
    if len(run_dirs) < 2:
        raise ConfigError(f"overfit_compare needs >= 2 runs under {parent_dir}")
    per_run = {}
    for d in run_dirs:
        rows = read_metrics_csv(os.path.join(d, "metrics.csv"))
        epochs = {}
        for r in rows:
            if r["test_acc"] is not None and r["step"] is not None and r["step"] > 0:
                epochs[int(r["epoch"])] = r["test_acc"]
        per_run[os.path.basename(d)] = epochs
    common = sorted(set.intersection(*(set(e) for e in per_run.values())))
    out = []
    for name, epochs in sorted(per_run.items()):
        for e in common:
            out.append({"series": name, "x": e, "y": epochs[e]})
    return out


def _plot_acc_vs_hyper(sweep_dir: str) -> list:
    path = os.path.join(sweep_dir, "sweep.csv")
    with open(os.path.join(sweep_dir, "sweep_meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    axis_names = list(meta["axes"])
    out = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for record in csv.DictReader(fh):
            for axis in axis_names:
                out.append({
                    "series": axis,
                    "x": float(record[axis]),
                    "y": float(record["mean_test_acc"]),
                })
    return out


def _plot_beta_profile(run_dir: str) -> list:
    with open(os.path.join(run_dir, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = config_from_dict(meta["config"])
    data = build_dataset(cfg)
    network = build_network(
        cfg.architecture, data["input_shape"], data["n_classes"], seed=cfg.seed,
        bn_epsilon=cfg.bn_epsilon, bn_momentum=cfg.bn_momentum,
    )
    arrays, _ = load_snapshot(os.path.join(run_dir, "final.snap"))
    network.load_param_arrays(arrays)
    out = []
    for row in sparsity_profile(network, data["x_train"]):
        out.append({"series": "beta_param", "x": row["layer"], "y": row["beta_param"]})
        out.append({"series": "beta_isp", "x": row["layer"], "y": row["beta_isp"]})
    return out


PLOT_KINDS = {
    "norm_traj": _plot_norm_traj,
    "acc_vs_hyper": _plot_acc_vs_hyper,
    "beta_profile": _plot_beta_profile,
    "overfit_compare": _plot_overfit_compare,
}


def emit_plotdata(run_dir: str, kind: str, out_path: Optional[str] = None) -> list:
    """Long-format (series, x, y) rows for one plot kind; optionally written
    to a CSV file."""
    if kind not in PLOT_KINDS:
        raise ConfigError(
            f"unknown plot kind {kind!r}; choose from {', '.join(sorted(PLOT_KINDS))}"
        )
    rows = PLOT_KINDS[kind](run_dir)
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["series", "x", "y"])
            for row in rows:
                writer.writerow([row["series"], _format_cell(row["x"]), _format_cell(row["y"])])
    return rows
