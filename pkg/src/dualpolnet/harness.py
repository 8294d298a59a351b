"""Training loop, evaluation metrics, and the ablation matrix.

Training runs seeded shuffled mini-batches of cross-entropy + Adam with
batch norm in train mode; evaluation runs in eval mode and produces a
confusion matrix whose trace/total accuracy is cross-checked against an
independently streamed correct-prediction counter.

The ablation suite re-trains and re-evaluates the model across one
configuration axis at a time (input channels, main branch, fusion type,
self-attention, block design, block count) and emits rows suitable for
CSV export.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import drdlf, pccaf
from .config import ModelConfig, TrainConfig
from .errors import ConfigError
from .optim import ParamStore, adam_step
from .sardata import DatasetManifest, load_triple
from .seeding import derive_seed
from .tensor import Tape, Tensor, backward, cross_entropy

ABLATION_AXES = ("inputs", "main_branch", "fusion", "sa_module", "drdlf", "n_drdb")


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------


def build_model(cfg: ModelConfig) -> ParamStore:
    cfg.validate()
    store = ParamStore(seed=cfg.seed)
    pccaf.build_pccaf(store, cfg)
    drdlf.build_drdlf(store, cfg)
    return store


def forward_logits(x: np.ndarray, store: ParamStore, cfg: ModelConfig, mode: str,
                   trace: list | None = None) -> Tensor:
    """Full forward pass from a stacked (N, 3, S, S) channel batch to logits."""
    planes = [Tensor(x[:, i:i + 1]) if on else None
              for i, on in enumerate((cfg.enable_i1, cfg.enable_i2, cfg.enable_i3))]
    z_s, z_main = pccaf.pccaf_forward(planes[0], planes[1], planes[2], store, cfg, mode, trace)
    return drdlf.drdlf_forward(z_s, z_main, store, cfg, trace)


# ---------------------------------------------------------------------------
# dataset loading
# ---------------------------------------------------------------------------


def load_dataset(manifest: DatasetManifest, cfg: ModelConfig,
                 workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Materialize every chip of a manifest as (N, 3, S, S) plus labels."""
    if not manifest.records:
        raise ConfigError("manifest is empty")
    enabled = (cfg.enable_i1, cfg.enable_i2, cfg.enable_i3)

    def one(rec):
        path, label = rec
        return load_triple(path, cfg.input_size, label=label, enabled=enabled).stacked()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            planes = list(pool.map(one, manifest.records))
    else:
        planes = [one(rec) for rec in manifest.records]
    x = np.stack(planes)
    y = np.array([label for _, label in manifest.records], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# confusion matrix
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """K x K integer counts; rows are true classes, columns predictions."""

    counts: np.ndarray
    classes: list[str]

    @classmethod
    def zeros(cls, classes: list[str]) -> "ConfusionMatrix":
        k = len(classes)
        return cls(np.zeros((k, k), dtype=np.int64), list(classes))

    def add_batch(self, true_labels: np.ndarray, pred_labels: np.ndarray) -> None:
        np.add.at(self.counts, (np.asarray(true_labels), np.asarray(pred_labels)), 1)

    def total(self) -> int:
        return int(self.counts.sum())

    def correct(self) -> int:
        return int(np.trace(self.counts))

    def accuracy(self) -> float:
        total = self.total()
        if total == 0:
            raise ValueError("confusion matrix is empty")
        return self.correct() / total

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_csv(self, path: str) -> None:
        header = ["true\\pred"] + list(self.classes)
        rows = [[name] + [int(v) for v in row] for name, row in zip(self.classes, self.counts)]
        write_csv(header, rows, path)


def evaluate_predictions(y_true, y_pred, classes: list[str]) -> tuple[ConfusionMatrix, float]:
    """Confusion matrix and accuracy from label arrays (stub/fixture path)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError(f"prediction shapes {y_true.shape} and {y_pred.shape} differ")
    if y_true.size == 0:
        raise ValueError("no predictions to evaluate")
    k = len(classes)
    for name, arr in (("true", y_true), ("pred", y_pred)):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} label outside [0, {k})")
    cm = ConfusionMatrix.zeros(classes)
    cm.add_batch(y_true, y_pred)
    return cm, cm.accuracy()


# ---------------------------------------------------------------------------
# train / evaluate
# ---------------------------------------------------------------------------


def train(store: ParamStore, manifest: DatasetManifest, tcfg: TrainConfig,
          cfg: ModelConfig, workers: int = 1) -> list[dict]:
    """Optimize in place; returns the step/epoch loss log."""
    tcfg.validate()
    cfg.validate()
    if len(manifest.classes) != cfg.classes:
        raise ConfigError(f"manifest has {len(manifest.classes)} classes, "
                          f"model is configured for {cfg.classes}")
    x, y = load_dataset(manifest, cfg, workers=workers)
    n = len(y)
    if tcfg.batch_size > n:
        raise ConfigError(f"batch_size {tcfg.batch_size} exceeds dataset size {n}")
    log: list[dict] = []
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        rng = np.random.default_rng(derive_seed(tcfg.seed, f"shuffle.epoch{epoch}"))
        perm = rng.permutation(n)
        correct = 0
        epoch_losses = []
        for start in range(0, n, tcfg.batch_size):
            idx = perm[start:start + tcfg.batch_size]
            xb, yb = x[idx], y[idx]
            with Tape() as tape:
                logits = forward_logits(xb, store, cfg, "train")
                loss = cross_entropy(logits, yb)
            backward(loss, tape)
            adam_step(store, tcfg.lr)
            store.zero_grad()
            step += 1
            correct += int((logits.data.argmax(axis=1) == yb).sum())
            loss_val = float(loss.data)
            epoch_losses.append(loss_val)
            log.append({"step": step, "epoch": epoch, "loss": loss_val})
        log.append({"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                    "accuracy": correct / n})
    return log


def evaluate(store: ParamStore, manifest: DatasetManifest, cfg: ModelConfig,
             batch_size: int = 32, workers: int = 1) -> tuple[ConfusionMatrix, float]:
    """Eval-mode forward over the manifest; accuracy is trace/total."""
    cfg.validate()
    if not manifest.records:
        raise ConfigError("cannot evaluate an empty manifest")
    if len(manifest.classes) != cfg.classes:
        raise ConfigError(f"manifest has {len(manifest.classes)} classes, "
                          f"model is configured for {cfg.classes}")
    x, y = load_dataset(manifest, cfg, workers=workers)
    cm = ConfusionMatrix.zeros(manifest.classes)
    streamed_correct = 0
    for start in range(0, len(y), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits = forward_logits(xb, store, cfg, "eval")
        _, pred = drdlf.predict(logits)
        cm.add_batch(yb, pred)
        streamed_correct += int((pred == yb).sum())
    # two independent accuracy routes must agree exactly
    if streamed_correct != cm.correct():
        raise AssertionError(f"streamed correct count {streamed_correct} "
                             f"disagrees with matrix trace {cm.correct()}")
    if not np.array_equal(cm.row_sums(), manifest.per_class_counts()):
        raise AssertionError("confusion row sums disagree with manifest per-class counts")
    return cm, cm.accuracy()


def top_k_mean_std(values, k: int = 10) -> tuple[float, float]:
    """Mean and sample std of the k best values (multi-run reporting)."""
    arr = np.sort(np.asarray(values, dtype=np.float64))[::-1]
    if k < 1 or k > arr.size:
        raise ValueError(f"k={k} out of range for {arr.size} values")
    top = arr[:k]
    return float(top.mean()), float(top.std(ddof=1)) if k > 1 else 0.0


# ---------------------------------------------------------------------------
# ablation suite
# ---------------------------------------------------------------------------


def _variant(cfg: ModelConfig, **kw) -> ModelConfig:
    v = dataclasses.replace(cfg, **kw)
    v.validate()
    return v


def ablation_configs(base: ModelConfig, axis: str) -> list[tuple[dict, ModelConfig]]:
    """Row descriptors and configs for one ablation axis."""
    if axis == "inputs":
        combos = [(True, False, False), (False, True, False), (False, False, True),
                  (True, True, False), (True, False, True), (False, True, True),
                  (True, True, True)]
        rows = []
        for e1, e2, e3 in combos:
            enabled = [b for b, on in zip(("i1", "i2", "i3"), (e1, e2, e3)) if on]
            main = base.main_branch if base.main_branch in enabled else enabled[0]
            cfg = _variant(base, enable_i1=e1, enable_i2=e2, enable_i3=e3, main_branch=main)
            rows.append(({"i1": int(e1), "i2": int(e2), "i3": int(e3)}, cfg))
        return rows
    if axis == "main_branch":
        return [({"main_branch": b},
                 _variant(base, enable_i1=True, enable_i2=True, enable_i3=True, main_branch=b))
                for b in ("i1", "i2", "i3")]
    if axis == "fusion":
        return [({"fusion": f, "zs_width": _variant(base, fusion=f).fused_width()},
                 _variant(base, fusion=f))
                for f in ("concat", "add")]
    if axis == "sa_module":
        return [({"sa_module": int(on)}, _variant(base, enable_sa_module=on))
                for on in (False, True)]
    if axis == "drdlf":
        return [({"drdb": int(d), "global_residual": int(g)},
                 _variant(base, enable_drdb=d, enable_global_residual=g))
                for d, g in ((False, False), (True, False), (False, True), (True, True))]
    if axis == "n_drdb":
        return [({"n_drdb": n}, _variant(base, n_drdb=n)) for n in (1, 2, 3, 4, 5)]
    raise ConfigError(f"unknown ablation axis {axis!r}; valid axes: {list(ABLATION_AXES)}")


def ablation_suite(base: ModelConfig, axis: str,
                   train_manifest: DatasetManifest | None = None,
                   test_manifest: DatasetManifest | None = None,
                   tcfg: TrainConfig | None = None,
                   structural_only: bool = False,
                   workers: int = 1) -> tuple[list[str], list[dict]]:
    """Train+evaluate (or just size) the model across one config axis.

    Returns (column order, rows); each row carries the axis descriptor,
    the parameter count, and the desk-scale accuracy unless running in
    structural-only mode.
    """
    rows = []
    header: list[str] = []
    for desc, cfg in ablation_configs(base, axis):
        row = dict(desc)
        row["params"] = drdlf.count_params(cfg)
        if not structural_only:
            if train_manifest is None or test_manifest is None or tcfg is None:
                raise ConfigError("ablation training needs train/test manifests and a TrainConfig")
            store = build_model(cfg)
            train(store, train_manifest, tcfg, cfg, workers=workers)
            _, acc = evaluate(store, test_manifest, cfg, workers=workers)
            row["accuracy"] = round(acc * 100.0, 2)
        if not header:
            header = list(row)
        rows.append(row)
    return header, rows


# ---------------------------------------------------------------------------
# delimited exports
# ---------------------------------------------------------------------------


def write_jsonl(rows: list[dict], path: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    os.replace(tmp, path)


def read_jsonl(path: str) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def write_csv(header: list[str], rows: list, path: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                writer.writerow([row.get(col, "") for col in header])
            else:
                writer.writerow(row)
    os.replace(tmp, path)
