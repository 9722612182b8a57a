"""Resumable hyperparameter sweeps over (epochs, batch size, learning rate)."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import evaluate
from .modes import ModeSpec, Router, train_mode
from .tokenizer import Vocabulary
from .training import TrainPlan

log = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "model", "epochs", "learning_rate", "batch_size", "precision", "recall", "f_score",
    "accuracy", "balanced_accuracy", "train_minutes", "test_minutes", "seed", "status",
)


@dataclass(frozen=True)
class Grid:
    epochs: tuple[int, ...] = (5, 10, 15, 20, 25)
    batch_sizes: tuple[int, ...] = (4, 8, 16, 32, 64)
    learning_rates: tuple[float, ...] = (1e-6, 1e-5, 1e-4)

    @classmethod
    def from_dict(cls, d) -> "Grid":
        return cls(
            epochs=tuple(int(x) for x in d.get("epochs", cls.epochs)),
            batch_sizes=tuple(int(x) for x in d.get("batch_sizes", d.get("batch_size", cls.batch_sizes))),
            learning_rates=tuple(float(x) for x in d.get("learning_rates", d.get("lr", cls.learning_rates))),
        )

    def combinations(self) -> list[tuple[int, int, float]]:
        return list(itertools.product(self.epochs, self.batch_sizes, self.learning_rates))


def combination_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _combo_key(mode_id: int, epochs: int, batch: int, lr: float, seed: int, extra: dict) -> str:
    blob = json.dumps([mode_id, epochs, batch, repr(lr), seed, extra], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _run_one(job: dict) -> dict:
    """Train and evaluate one combination, writing its JSON result file."""
    result_path = Path(job["result_path"])
    row = {
        "model": f"mode{job['mode_id']}",
        "epochs": job["epochs"],
        "learning_rate": job["lr"],
        "batch_size": job["batch_size"],
        "seed": job["seed"],
    }
    try:
        plan = TrainPlan(
            epochs=job["epochs"],
            batch_size=job["batch_size"],
            base_lr=job["lr"],
            seed=job["seed"],
            class_weighting=job["class_weighting"],
            allow_off_grid=job["allow_off_grid"],
        )
        t0 = time.perf_counter()
        trained, _ = train_mode(
            ModeSpec.for_mode(job["mode_id"]),
            job["train"],
            plan,
            job["vocab"],
            result_path.with_suffix(""),
            max_len=job["max_len"],
            config_overrides=job.get("config_overrides"),
        )
        t1 = time.perf_counter()
        preds = Router(trained).predict_many(job["test"])
        t2 = time.perf_counter()
        rep = evaluate([r.label for r in job["test"]], [p.label for p in preds])
        row.update(
            precision=rep.macro_precision,
            recall=rep.macro_recall,
            f_score=rep.macro_f1,
            accuracy=rep.accuracy,
            balanced_accuracy=rep.balanced_accuracy,
            train_minutes=(t1 - t0) / 60,
            test_minutes=(t2 - t1) / 60,
            status="ok",
        )
    except Exception as exc:  # one bad combination must not stop the sweep
        log.warning("combination %s failed: %s", result_path.name, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", traceback=traceback.format_exc())
    result_path.write_text(json.dumps(row, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return row


def sweep(
    grid: Grid,
    mode_id: int,
    train: Sequence,
    test: Sequence,
    vocab: Vocabulary,
    out_dir: str | Path,
    base_seed: int = 0,
    class_weighting: bool = True,
    allow_off_grid: bool = False,
    max_len: int = 64,
    jobs: int = 1,
    config_overrides: dict | None = None,
) -> tuple[list[dict], int]:
    """Run every grid combination not already cached in ``out_dir``.

    Returns the rows sorted by accuracy then F-score (best first) and the
    number of combinations actually trained in this call.
    """
    out_dir = Path(out_dir)
    runs = out_dir / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    extra = {"class_weighting": class_weighting, "max_len": max_len, "overrides": config_overrides or {},
             "n_train": len(train), "n_test": len(test), "vocab": len(vocab)}
    rows: list[dict] = []
    pending: list[dict] = []
    for i, (epochs, batch, lr) in enumerate(grid.combinations()):
        seed = combination_seed(base_seed, i)
        key = _combo_key(mode_id, epochs, batch, lr, seed, extra)
        path = runs / f"combo_{i:03d}_{key}.json"
        if path.is_file():
            cached = json.loads(path.read_text(encoding="utf-8"))
            if cached.get("status") == "ok":
                rows.append(cached)
                continue
        pending.append(dict(
            result_path=str(path), mode_id=mode_id, epochs=epochs, batch_size=batch, lr=lr, seed=seed,
            class_weighting=class_weighting, allow_off_grid=allow_off_grid, max_len=max_len,
            train=list(train), test=list(test), vocab=vocab, config_overrides=config_overrides,
        ))
    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows.extend(pool.map(_run_one, pending))
    else:
        rows.extend(_run_one(job) for job in pending)
    return rank_rows(rows), len(pending)


def rank_rows(rows: Sequence[dict]) -> list[dict]:
    ok = [r for r in rows if r.get("status") == "ok"]
    failed = [r for r in rows if r.get("status") != "ok"]
    ok.sort(key=lambda r: (-r["accuracy"], -r["f_score"], r["epochs"], r["batch_size"], r["learning_rate"]))
    failed.sort(key=lambda r: (r["epochs"], r["batch_size"], r["learning_rate"]))
    return ok + failed


def write_table(rows: Sequence[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r.get(k, "")) for k in TABLE_COLUMNS})


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return v


def best_by(rows: Sequence[dict], key: str) -> list[dict]:
    """Best accuracy and best F-score for each value of ``key`` (plot-ready)."""
    groups: dict = {}
    for r in rows:
        if r.get("status") == "ok":
            groups.setdefault(r[key], []).append(r)
    out = []
    for value in sorted(groups):
        g = groups[value]
        out.append({
            key: value,
            "best_accuracy": max(r["accuracy"] for r in g),
            "best_f_score": max(r["f_score"] for r in g),
            "best_balanced_accuracy": max(r["balanced_accuracy"] for r in g),
            "runs": len(g),
        })
    return out


def write_best_by(rows: Sequence[dict], key: str, path: str | Path) -> list[dict]:
    table = best_by(rows, key)
    cols = [key, "best_accuracy", "best_f_score", "best_balanced_accuracy", "runs"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for r in table:
            writer.writerow({k: _fmt(r[k]) for k in cols})
    return table
