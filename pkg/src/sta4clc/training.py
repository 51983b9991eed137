"""Full-batch training with stratified cross-validation, evaluation metrics
and the ablation harness.

Every fold trains from the same seeded initialization; per-epoch validation
metrics come from the same full-batch forward pass that produces the training
loss, and the parameters of the best-validation-F1 epoch are retained.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import autodiff as ad
from .data import resample_balanced
from .features import FoldScalers, apply_scalers, fit_fold_scalers
from .model import (Batch, ModelConfig, forward, init_parameters, prepare_batch,
                    total_loss, wrap_parameters)

# ablation grid: flags are (disaster bias, diffusion loss, multi-relation)
ABLATION_GRID = (
    ("M1", (False, False, False)),
    ("M2", (False, True, False)),
    ("M3", (False, False, True)),
    ("M4", (True, False, False)),
    ("M5", (False, True, True)),
    ("M6", (True, True, False)),
    ("M7", (True, False, True)),
    ("M8", (True, True, True)),
)


@dataclass(frozen=True)
class FoldPlan:
    """Stratified fold assignments plus balanced training multisets."""

    train: list          # per fold: resampled (class-balanced) train indices
    plain_train: list    # per fold: train indices before resampling
    validation: list     # per fold: validation indices, pairwise disjoint
    seed: int

    @property
    def k(self) -> int:
        return len(self.validation)


def kfold_split(n: int, k: int, labels: np.ndarray, seed: int) -> FoldPlan:
    """Stratified k-fold split; training sides are balanced by oversampling."""
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} samples")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        rng.shuffle(members)
        assignment[members] = np.arange(members.size) % k
    train, plain, val = [], [], []
    for f in range(k):
        v = np.flatnonzero(assignment == f)
        t = np.flatnonzero(assignment != f)
        val.append(v)
        plain.append(t)
        train.append(resample_balanced(t, labels[t], seed=seed + 7919 * (f + 1)))
    return FoldPlan(train=train, plain_train=plain, validation=val, seed=seed)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class MetricsReport:
    macro_f1: float
    macro_precision: float
    macro_recall: float
    accuracy: float
    confusion: np.ndarray  # (3, 3), rows true, cols predicted
    n_samples: int


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    out = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(np.asarray(y_true), np.asarray(y_pred)):
        out[int(t), int(p)] += 1
    return out


def metrics_from_confusion(conf: np.ndarray) -> MetricsReport:
    conf = np.asarray(conf, dtype=np.int64)
    n = int(conf.sum())
    f1s, precisions, recalls = [], [], []
    for c in range(3):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    accuracy = float(np.trace(conf)) / n if n else 0.0
    return MetricsReport(macro_f1=float(np.mean(f1s)),
                         macro_precision=float(np.mean(precisions)),
                         macro_recall=float(np.mean(recalls)),
                         accuracy=accuracy, confusion=conf, n_samples=n)


def evaluate(params: dict, batch: Batch, config: ModelConfig,
             idx: np.ndarray) -> MetricsReport:
    """Metrics of the classification head on the given sample indices."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("cannot evaluate an empty split")
    _, logits = forward(wrap_parameters(params), batch, config)
    pred = np.argmax(logits.value[idx], axis=1)
    return metrics_from_confusion(confusion_matrix(batch.labels[idx], pred))


# ---------------------------------------------------------------------------
# training


@dataclass
class FoldResult:
    params: dict                 # parameters at the best-validation-F1 epoch
    best_val_f1: float
    best_epoch: int
    best_train_loss: float       # minimum total loss observed
    history: list                # per epoch dicts
    scalers: FoldScalers | None = None
    val_metrics: MetricsReport | None = None
    train_metrics: MetricsReport | None = None


def train_fold(batch: Batch, config: ModelConfig, train_idx: np.ndarray,
               val_idx: np.ndarray, init: dict, fold: int = 0) -> FoldResult:
    """Full-batch Adam on one fold, retaining the best-validation snapshot."""
    params = {k: v.copy() for k, v in init.items()}
    state = ad.AdamState()
    best = {"f1": -1.0, "epoch": -1, "params": None}
    min_loss = np.inf
    history = []
    for epoch in range(config.epochs):
        nodes = wrap_parameters(params)
        delta, logits = forward(nodes, batch, config)
        loss, comps = total_loss(nodes, delta, logits, batch, config, train_idx)
        if not np.isfinite(comps["total"]):
            raise ad.NumericError(
                f"non-finite loss at fold {fold} epoch {epoch}: {comps}")
        val_pred = np.argmax(logits.value[val_idx], axis=1)
        val_f1 = metrics_from_confusion(
            confusion_matrix(batch.labels[val_idx], val_pred)).macro_f1
        history.append({"fold": fold, "epoch": epoch, "L_total": comps["total"],
                        "L_cls": comps["cls"], "L_reg": comps["reg"],
                        "L_diff": comps["diff"], "val_f1": val_f1})
        min_loss = min(min_loss, comps["total"])
        if val_f1 > best["f1"]:
            best = {"f1": val_f1, "epoch": epoch,
                    "params": {k: v.copy() for k, v in params.items()}}
        ad.backward(loss)
        grads = {k: n.grad for k, n in nodes.items()}
        ad.adam_step(params, grads, state, config.lr)
    return FoldResult(params=best["params"], best_val_f1=best["f1"],
                      best_epoch=best["epoch"], best_train_loss=float(min_loss),
                      history=history)


@dataclass
class FoldData:
    """One fold's standardized batch plus its index sets."""

    batch: Batch
    train_idx: np.ndarray
    plain_train_idx: np.ndarray
    val_idx: np.ndarray
    scalers: FoldScalers


def prepare_folds(feats, dataset, graph, plan: FoldPlan) -> list:
    """Standardize features per fold (training statistics only) and freeze
    the constant tensors once; reused across every ablation row."""
    out = []
    for f in range(plan.k):
        scalers = fit_fold_scalers(feats, plan.plain_train[f])
        X, z = apply_scalers(feats, scalers)
        batch = prepare_batch(X, z, feats, dataset, graph)
        out.append(FoldData(batch=batch, train_idx=plan.train[f],
                            plain_train_idx=plan.plain_train[f],
                            val_idx=plan.validation[f], scalers=scalers))
    return out


@dataclass
class RunResult:
    config: ModelConfig
    plan: FoldPlan
    folds: list  # FoldResult
    mean_val_f1: float = field(init=False)

    def __post_init__(self):
        self.mean_val_f1 = float(np.mean([f.best_val_f1 for f in self.folds]))

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row for f in self.folds for row in f.history])


def train(fold_data: list, config: ModelConfig) -> RunResult:
    """Train every fold from one seeded initialization and score the
    retained snapshots."""
    first = fold_data[0].batch
    init = init_parameters(config, first.z.shape[1], first.n_relations,
                           np.random.default_rng(config.seed))
    plan = FoldPlan(train=[fd.train_idx for fd in fold_data],
                    plain_train=[fd.plain_train_idx for fd in fold_data],
                    validation=[fd.val_idx for fd in fold_data], seed=config.seed)
    results = []
    for f, fd in enumerate(fold_data):
        res = train_fold(fd.batch, config, fd.train_idx, fd.val_idx, init, fold=f)
        res.scalers = fd.scalers
        res.val_metrics = evaluate(res.params, fd.batch, config, fd.val_idx)
        res.train_metrics = evaluate(res.params, fd.batch, config, fd.plain_train_idx)
        results.append(res)
    return RunResult(config=config, plan=plan, folds=results)


def out_of_fold_predictions(run: RunResult, fold_data: list) -> pd.DataFrame:
    """One row per sample, predicted by the fold that held it out."""
    rows = []
    for fd, res in zip(fold_data, run.folds):
        batch = fd.batch
        delta, logits = forward(wrap_parameters(res.params), batch, run.config)
        for s in fd.val_idx:
            node = s % batch.n_nodes
            rows.append({
                "block_id": batch.block_ids[node],
                "period_id": batch.period_ids[s // batch.n_nodes],
                "delta_y_hat": float(delta.value[s, 0]),
                "class_true": int(batch.labels[s]),
                "class_pred": int(np.argmax(logits.value[s])),
            })
    order = pd.DataFrame(rows)
    return order.sort_values(["period_id", "block_id"], kind="stable").reset_index(drop=True)


# ---------------------------------------------------------------------------
# ablation harness


def ablate(fold_data: list, base_config: ModelConfig, grid=None) -> pd.DataFrame:
    """Train the full flag grid on identical folds and seed.

    The improvement column is the ratio of each row's mean validation macro
    F1 to the first row's.
    """
    grid = list(grid) if grid is not None else [g for g in ABLATION_GRID]
    rows = []
    baseline_f1 = None
    for name, (disaster, diffusion, multi) in grid:
        config = base_config.with_flags(disaster, diffusion, multi)
        run = train(fold_data, config)
        train_loss = float(np.mean([f.best_train_loss for f in run.folds]))
        train_f1 = float(np.mean([f.train_metrics.macro_f1 for f in run.folds]))
        val_f1 = run.mean_val_f1
        if baseline_f1 is None:
            baseline_f1 = val_f1
        rows.append({
            "model": name,
            "train_loss": train_loss,
            "train_f1": train_f1,
            "val_f1": val_f1,
            "improvement": val_f1 / baseline_f1,
            "disaster_impact": "Yes" if disaster else "No",
            "diffusion_constraint": "Yes" if diffusion else "No",
            "multi_relation": "Yes" if multi else "No",
        })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# run directory serialization


PARAMS_FILE = "params.bin"
PARAMS_MANIFEST_FILE = "params.manifest.json"


def save_run(out_dir, run: RunResult, fold_data: list, predictions: pd.DataFrame,
             extra_config: dict | None = None) -> None:
    """Write config echo, binary parameters + manifest, history, metrics and
    out-of-fold predictions.  Nothing here carries a timestamp, so reruns
    with identical inputs are byte-identical."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    config_echo = asdict(run.config)
    if extra_config:
        config_echo.update(extra_config)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config_echo, fh, indent=1, sort_keys=True)

    names = list(run.folds[0].params.keys())
    blob = bytearray()
    for res in run.folds:
        for name in names:
            blob.extend(np.ascontiguousarray(res.params[name], dtype="<f8").tobytes())
        sc = res.scalers
        for arr in (sc.temporal.mean, sc.temporal.sd, sc.static.mean, sc.static.sd):
            blob.extend(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    (out / PARAMS_FILE).write_bytes(bytes(blob))
    manifest = {
        "dtype": "<f8",
        "n_folds": len(run.folds),
        "entries": [{"name": n, "shape": list(run.folds[0].params[n].shape)}
                    for n in names],
        "scaler_dims": {"temporal": int(run.folds[0].scalers.temporal.mean.size),
                        "static": int(run.folds[0].scalers.static.mean.size)},
        "validation_indices": [np.asarray(fd.val_idx).tolist() for fd in fold_data],
        "seed": run.config.seed,
        "config": asdict(run.config),
    }
    with open(out / PARAMS_MANIFEST_FILE, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)

    run.history_frame().to_csv(out / "history.csv", index=False)

    fold_metrics = []
    for f, res in enumerate(run.folds):
        m = res.val_metrics
        fold_metrics.append({
            "fold": f, "macro_f1": m.macro_f1, "macro_precision": m.macro_precision,
            "macro_recall": m.macro_recall, "accuracy": m.accuracy,
            "best_loss": res.best_train_loss, "best_epoch": res.best_epoch,
            "best_val_f1": res.best_val_f1,
            "train_macro_f1": res.train_metrics.macro_f1,
            "confusion": m.confusion.tolist(),
        })
    mean = {k: float(np.mean([fm[k] for fm in fold_metrics]))
            for k in ("macro_f1", "macro_precision", "macro_recall", "accuracy",
                      "best_loss", "best_val_f1", "train_macro_f1")}
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump({"folds": fold_metrics, "mean": mean}, fh, indent=1, sort_keys=True)

    predictions.to_csv(out / "predictions.csv", index=False)


@dataclass
class LoadedRun:
    config: ModelConfig
    fold_params: list      # per fold: dict name -> array
    fold_scalers: list     # per fold: FoldScalers
    validation_indices: list


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    with open(run_dir / PARAMS_MANIFEST_FILE, encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = np.frombuffer((run_dir / PARAMS_FILE).read_bytes(), dtype=manifest["dtype"])
    entries = manifest["entries"]
    t_dim = manifest["scaler_dims"]["temporal"]
    s_dim = manifest["scaler_dims"]["static"]
    per_fold = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in entries)
    per_fold += 2 * t_dim + 2 * s_dim
    fold_params, fold_scalers = [], []
    pos = 0
    from .data import ColumnScaler  # local import to avoid a cycle at module load

    for _ in range(manifest["n_folds"]):
        params = {}
        for e in entries:
            size = int(np.prod(e["shape"])) if e["shape"] else 1
            params[e["name"]] = raw[pos:pos + size].reshape(e["shape"]).copy()
            pos += size
        tm = raw[pos:pos + t_dim].copy(); pos += t_dim
        ts = raw[pos:pos + t_dim].copy(); pos += t_dim
        sm = raw[pos:pos + s_dim].copy(); pos += s_dim
        ss = raw[pos:pos + s_dim].copy(); pos += s_dim
        fold_params.append(params)
        fold_scalers.append(FoldScalers(temporal=ColumnScaler(tm, ts),
                                        static=ColumnScaler(sm, ss)))
    if pos != raw.size:
        raise ValueError(f"params.bin length {raw.size} does not match the manifest "
                         f"({pos} values expected)")
    cfg_raw = dict(manifest["config"])
    config = ModelConfig(**cfg_raw)
    return LoadedRun(config=config, fold_params=fold_params,
                     fold_scalers=fold_scalers,
                     validation_indices=[np.asarray(v, dtype=np.intp)
                                         for v in manifest["validation_indices"]])
