"""Downstream training, metrics, cross-architecture transfer and the streaming protocol."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .condense import CondenseConfig, CondensedDataset, condense
from .data import TimeSeriesDataset, WindowSet, make_windows, split_chronological, split_lengths, standardize
from .model import ModelParams, TsfeConfig, init_params, tsfe_forward
from .numerics import ContractError
from .training import fit
from .trajectory import train_experts

log = logging.getLogger(__name__)


@dataclass
class Metrics:
    mae: float
    mse: float
    accuracy: float | None = None
    precision: float | None = None
    train_seconds: float = field(default=0.0, compare=False)  # wall clock, not reproducible
    num_params: int = 0

    def __post_init__(self):
        if self.mae < 0 or self.mse < 0:
            raise ContractError("mae and mse must be non-negative")
        for v in (self.accuracy, self.precision):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError("accuracy/precision must lie in [0, 1]")

    def record(self, **meta) -> dict:
        out = dict(meta)
        out.update({k: v for k, v in asdict(self).items() if v is not None})
        return out


def regression_metrics(pred, truth) -> tuple[float, float]:
    p = np.asarray(pred.detach() if isinstance(pred, torch.Tensor) else pred, dtype=np.float64)
    t = np.asarray(truth.detach() if isinstance(truth, torch.Tensor) else truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {t.shape}")
    err = p - t
    mae, mse = float(np.abs(err).mean()), float((err * err).mean())
    # Jensen: mean |e| <= sqrt(mean e^2); a violation means a broken reduction
    assert mae <= np.sqrt(mse) * (1 + 1e-12) + 1e-300, (mae, mse)
    return mae, mse


def confusion_matrix(pred_labels: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, pred_labels), 1)
    return cm


def classification_metrics(logits, labels) -> tuple[float, float]:
    """Accuracy and macro-averaged precision.

    The macro average runs over classes that occur in the labels or the
    predictions; such a class that is never predicted counts as 0.
    """
    z = np.asarray(logits.detach() if isinstance(logits, torch.Tensor) else logits)
    y = np.asarray(labels, dtype=np.int64)
    if z.shape[0] == 0:
        raise ContractError("empty batch")
    k = z.shape[1]
    if y.min() < 0 or y.max() >= k:
        raise ContractError("labels out of range")
    pred = z.argmax(axis=1)
    cm = confusion_matrix(pred, y, k)
    predicted = cm.sum(axis=0)
    present = (predicted > 0) | (cm.sum(axis=1) > 0)
    per_class = np.where(predicted > 0, np.diag(cm) / np.maximum(predicted, 1), 0.0)
    return float((pred == y).mean()), float(per_class[present].mean())


def _as_training_tensors(data) -> tuple[torch.Tensor, torch.Tensor | None]:
    if isinstance(data, CondensedDataset):
        return data.windows.detach().clone(), data.labels
    w = torch.from_numpy(data.windows.copy())
    return w, None if data.labels is None else torch.from_numpy(data.labels)


@dataclass
class TrainSettings:
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 32


def train_downstream(
    data,
    cfg: TsfeConfig,
    epochs: int = 100,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 32,
    init: ModelParams | None = None,
) -> ModelParams:
    """Train a model from a seeded initialization (or from ``init``) on windows."""
    windows, labels = _as_training_tensors(data)
    if windows.shape[0] == 0:
        raise ContractError("no training data")
    if windows.shape[1] != cfg.lookback + cfg.horizon or windows.shape[2] != cfg.channels:
        raise ContractError(f"windows {tuple(windows.shape)} incompatible with config")
    torch.manual_seed(seed)
    if init is None:
        theta, state = init_params(cfg, seed), {}
    else:
        theta, state = init.theta.detach().clone(), {k: tuple(v) for k, v in init.norm_state.items()}
    t0 = time.perf_counter()
    theta, history = fit(
        theta,
        windows,
        cfg,
        epochs,
        lr,
        np.random.default_rng(seed),
        labels=labels,
        batch_size=batch_size,
        state=state,
    )
    params = ModelParams(cfg=cfg, theta=theta, norm_state=state)
    params.train_seconds = time.perf_counter() - t0
    params.history = history
    return params


def predict(params: ModelParams, inputs: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for lo in range(0, inputs.shape[0], batch_size):
            _, out = tsfe_forward(
                inputs[lo : lo + batch_size], params.theta, params.cfg, state=params.norm_state or None, train=False
            )
            outs.append(out)
    return torch.cat(outs)


def evaluate(params: ModelParams, test: WindowSet, cfg: TsfeConfig | None = None, batch_size: int = 256) -> Metrics:
    cfg = cfg or params.cfg
    if len(test) == 0:
        raise ContractError("empty test set")
    if test.lookback != cfg.lookback or test.channels != cfg.channels:
        raise ContractError("test windows incompatible with model config")
    x = torch.from_numpy(test.inputs.copy())
    out = predict(params, x, batch_size)
    seconds = float(getattr(params, "train_seconds", 0.0))
    if cfg.head_kind == "forecast":
        mae, mse = regression_metrics(out, test.targets[:, : cfg.horizon])
        return Metrics(mae=mae, mse=mse, train_seconds=seconds, num_params=params.num_params)
    acc, prec = classification_metrics(out, test.labels)
    # for classification mae/mse are reported on one-hot probabilities
    probs = torch.softmax(out, dim=1).numpy()
    onehot = np.eye(cfg.num_classes)[test.labels]
    mae, mse = regression_metrics(probs, onehot)
    return Metrics(mae=mae, mse=mse, accuracy=acc, precision=prec, train_seconds=seconds, num_params=params.num_params)


def cross_arch_transfer(
    condensed,
    variants: list[TsfeConfig],
    test: WindowSet,
    epochs: int = 100,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 32,
) -> list[Metrics]:
    windows, _ = _as_training_tensors(condensed)
    results = []
    for i, v in enumerate(variants):
        if windows.shape[1] != v.lookback + v.horizon or windows.shape[2] != v.channels:
            raise ContractError(f"variant {i} ({v.num_operators} ops, d={v.model_dim}) is incompatible with the data")
        params = train_downstream(condensed, v, epochs, lr, seed, batch_size)
        results.append(evaluate(params, test, v))
    return results


@dataclass
class StreamSetup:
    """Everything the streaming protocol needs besides the series itself."""

    model: TsfeConfig
    condense: CondenseConfig
    train: TrainSettings = field(default_factory=TrainSettings)
    experts: int = 3
    expert_epochs: int = 6
    expert_lr: float = 0.01
    stride: int = 1
    replay: bool = True


def stream_split(time_steps: int, base_ratio: float = 0.7) -> tuple[tuple[int, int], tuple[int, int]]:
    base = int(np.floor(time_steps * base_ratio + 1e-9))
    return (0, base), (base, time_steps)


def stream_eval(ds: TimeSeriesDataset, setup: StreamSetup, seed: int = 0) -> dict[str, Metrics]:
    """Base/incremental protocol.

    Stage 1 trains on base-train and scores base-test (``B0``). Stage 2 updates
    that model with incremental-train, optionally replaying a condensed
    version of base-train, then scores base-test (``B1``) and
    incremental-test (``I``).
    """
    cfg = setup.model
    need = cfg.lookback + cfg.horizon
    (b_lo, b_hi), (i_lo, i_hi) = stream_split(ds.time_steps)
    for lo, hi in ((b_lo, b_hi), (i_lo, i_hi)):
        lengths = split_lengths(hi - lo, (0.7, 0.1, 0.2))
        if min(lengths[0], lengths[2]) < need:
            raise ContractError(
                f"series too short for streaming: every train/test segment needs {need} steps, got {lengths}"
            )
    base = replace(ds, values=ds.values[b_lo:b_hi], offset=ds.offset + b_lo)
    inc = replace(ds, values=ds.values[i_lo:i_hi], offset=ds.offset + i_lo)
    b_train, _, b_test = split_chronological(base, (0.7, 0.1, 0.2))
    i_train, _, i_test = split_chronological(inc, (0.7, 0.1, 0.2))
    # one set of statistics from base-train for every segment
    b_train_z = standardize(b_train, b_train)
    b_test_z, i_train_z, i_test_z = (standardize(s, b_train) for s in (b_test, i_train, i_test))

    win = lambda s, stride=setup.stride: make_windows(s, cfg.lookback, cfg.horizon, stride)  # noqa: E731
    bw_train, bw_test, iw_train, iw_test = win(b_train_z), win(b_test_z, 1), win(i_train_z), win(i_test_z, 1)
    for w in (iw_train,):
        lo, hi = w.starts.min(), w.starts.max() + need
        if lo < i_train.offset or hi > i_train.offset + i_train.time_steps:
            raise AssertionError("incremental training windows leak outside incremental-train rows")

    tr = setup.train
    stage1 = train_downstream(bw_train, cfg, tr.epochs, tr.lr, seed, tr.batch_size)
    b0 = evaluate(stage1, bw_test)

    if setup.replay:
        buffer = train_experts(bw_train, cfg, setup.experts, setup.expert_epochs, setup.expert_lr, seed=seed * 100)
        ccfg = replace(setup.condense, seed=seed)
        condensed, _ = condense(bw_train, buffer, ccfg, cfg)
        replay = condensed.windows.detach().numpy()
        stage2_data = WindowSet(
            windows=np.concatenate([replay, iw_train.windows]), lookback=cfg.lookback, horizon=cfg.horizon
        )
    else:
        stage2_data = iw_train
    stage2 = train_downstream(stage2_data, cfg, tr.epochs, tr.lr, seed, tr.batch_size, init=stage1)
    return {"B0": b0, "B1": evaluate(stage2, bw_test), "I": evaluate(stage2, iw_test)}


def pca_projection(original: WindowSet, condensed, path=None, max_points: int = 2000, seed: int = 0) -> list[tuple]:
    """Two-component PCA of flattened windows, fitted on the original set."""
    X = original.windows.reshape(len(original), -1).astype(np.float64)
    if len(X) > max_points:
        X = X[np.sort(np.random.default_rng(seed).choice(len(X), max_points, replace=False))]
    Y, _ = _as_training_tensors(condensed) if not isinstance(condensed, np.ndarray) else (condensed, None)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    mu = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mu, full_matrices=False)
    comps = vt[:2].T
    rows = [("original", *map(float, r)) for r in (X - mu) @ comps]
    rows += [("condensed", *map(float, r)) for r in (Y - mu) @ comps]
    if path is not None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["set", "x", "y"])
            w.writerows(rows)
    return rows


def write_metrics(path, metrics: Metrics, **meta) -> dict:
    rec = metrics.record(**meta)
    Path(path).write_text(json.dumps(rec, indent=2, sort_keys=True))
    return rec
