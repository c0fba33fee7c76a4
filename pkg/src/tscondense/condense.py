"""Bi-level condensation: unrolled training on the synthetic set, matched to experts."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch

from .data import WindowSet
from .decomp import DEFAULT_KERNEL, frequency_matching_loss
from .model import TsfeConfig, tsfe_forward, window_loss
from .numerics import ContractError, NonFiniteError, differentiate
from .trajectory import (
    DegenerateMatch,
    ExpertBuffer,
    check_buffer_config,
    curriculum_rank,
    pre_update,
    trajectory_matching_loss,
)

log = logging.getLogger(__name__)

CONDENSED_MAGIC = b"TDCS"
CONDENSED_VERSION = 1


class CondensedFileError(ValueError):
    pass


@dataclass
class CondensedDataset:
    windows: torch.Tensor  # [N, lookback + horizon, C], float32 leaf
    labels: torch.Tensor | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.windows.dim() != 3 or self.windows.shape[0] < 1:
            raise ContractError(f"condensed windows must be [N>=1, len, C], got {tuple(self.windows.shape)}")

    def __len__(self) -> int:
        return self.windows.shape[0]

    def to_windowset(self, lookback: int, num_classes: int = 0) -> WindowSet:
        w = self.windows.detach().numpy().copy()
        return WindowSet(
            windows=w,
            lookback=lookback,
            horizon=w.shape[1] - lookback,
            labels=None if self.labels is None else self.labels.numpy().copy(),
            num_classes=num_classes,
        )

    def __eq__(self, other):
        if not isinstance(other, CondensedDataset):
            return NotImplemented
        same_labels = (self.labels is None and other.labels is None) or (
            self.labels is not None and other.labels is not None and torch.equal(self.labels, other.labels)
        )
        return (
            self.windows.shape == other.windows.shape
            and self.windows.detach().numpy().tobytes() == other.windows.detach().numpy().tobytes()
            and same_labels
        )


@dataclass
class CondenseConfig:
    outer_steps: int = 200
    inner_steps: int = 16
    expert_steps: int = 2
    inner_lr: float = 0.01
    condensed_lr: float = 0.05
    momentum: float = 0.5
    n: int = 500
    lambda_task: float = 1.0
    lambda_fre: float = 1.0
    lambda_tmm: float = 1.0
    kernel: int = DEFAULT_KERNEL
    seed: int = 0
    init: str = "real-sample"
    batch_size: int = 0  # 0 means the whole condensed set per inner step
    original_batch_size: int = 0  # real windows per inner step; 0 matches the condensed batch

    def __post_init__(self):
        if self.batch_size < 0 or self.original_batch_size < 0:
            raise ContractError("batch sizes must be non-negative")
        if self.outer_steps < 0 or self.inner_steps < 1 or self.expert_steps < 1 or self.n < 1:
            raise ContractError("outer_steps >= 0, inner_steps >= 1, expert_steps >= 1 and n >= 1 required")
        if self.inner_lr < 0 or self.condensed_lr < 0:
            raise ContractError("learning rates must be non-negative")
        if min(self.lambda_task, self.lambda_fre, self.lambda_tmm) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError("kernel must be odd")
        if self.init not in ("real-sample", "gaussian"):
            raise ContractError(f"unknown init mode {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def init_condensed(source: WindowSet, n: int, mode: str = "real-sample", seed: int = 0) -> CondensedDataset:
    rng = np.random.default_rng(seed)
    if source.labels is None:
        if mode == "real-sample":
            if n > len(source):
                raise ContractError(f"cannot draw {n} windows from {len(source)}")
            w = source.windows[rng.choice(len(source), size=n, replace=False)]
        else:
            w = rng.standard_normal((n, *source.windows.shape[1:]))
        return CondensedDataset(
            windows=torch.tensor(np.asarray(w, dtype=np.float32)),
            provenance={"init": mode, "seed": seed},
        )
    k = source.num_classes
    labels = np.sort(np.arange(n) % k)
    rows = []
    for c in range(k):
        want = int((labels == c).sum())
        if mode == "real-sample":
            pool = np.flatnonzero(source.labels == c)
            if want > len(pool):
                raise ContractError(f"class {c} has {len(pool)} windows, need {want}")
            rows.append(source.windows[rng.choice(pool, size=want, replace=False)])
        else:
            rows.append(rng.standard_normal((want, *source.windows.shape[1:])))
    return CondensedDataset(
        windows=torch.tensor(np.concatenate(rows).astype(np.float32)),
        labels=torch.tensor(labels, dtype=torch.int64),
        provenance={"init": mode, "seed": seed},
    )


def inner_train(
    theta_start: torch.Tensor,
    windows: torch.Tensor,
    b: int,
    alpha: float,
    original_batches: Iterator[torch.Tensor],
    cfg: TsfeConfig,
    labels: torch.Tensor | None = None,
    lambda_fre: float = 1.0,
    kernel: int = DEFAULT_KERNEL,
    batch_index: Callable[[], torch.Tensor] | None = None,
):
    """Unrolled training on the condensed windows, kept on one tape.

    Each step descends on the task loss of a condensed batch plus the weighted
    frequency-matching loss against a fresh original-data batch. Returns
    ``(theta_end, fre_losses, task_losses)``; the loss lists hold the per-step
    tensors, which stay on the tape when ``lambda_fre > 0``.
    """
    if b < 1:
        raise ContractError("b must be >= 1")
    theta = theta_start.detach().clone().requires_grad_(True)
    fre_losses, task_losses = [], []
    for step in range(b):
        idx = batch_index() if batch_index is not None else None
        w = windows if idx is None else windows[idx]
        lab = labels if (labels is None or idx is None) else labels[idx]
        loss, feats_S = window_loss(theta, w, cfg, lab)
        x_orig = next(original_batches)
        if lambda_fre > 0:
            feats_T, _ = tsfe_forward(x_orig, theta, cfg)
            fre = frequency_matching_loss(feats_T, feats_S, kernel)
            objective = loss + lambda_fre * fre
        else:
            with torch.no_grad():
                feats_T, _ = tsfe_forward(x_orig, theta.detach(), cfg)
                fre = frequency_matching_loss(feats_T, [f.detach() for f in feats_S], kernel)
            objective = loss
        if not (torch.isfinite(loss) and torch.isfinite(fre)):
            raise NonFiniteError(f"non-finite loss at inner step {step}")
        (g,) = differentiate(objective, [theta], create_graph=True)
        theta = theta - alpha * g
        fre_losses.append(fre)
        task_losses.append(loss)
    return theta, fre_losses, task_losses


@dataclass
class StepDiagnostics:
    step: int
    L_task: float
    L_Fre: float
    L_tmm: float
    L_all: float
    expert_index: int
    e0: int
    skipped: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        if not d["skipped"]:
            del d["skipped"]
        return json.dumps(d)


class Condenser:
    """Holds the optimizer and curriculum state of one condensation run."""

    def __init__(
        self,
        condensed: CondensedDataset,
        buffer: ExpertBuffer,
        cfg: CondenseConfig,
        model_cfg: TsfeConfig,
        original: WindowSet,
    ):
        check_buffer_config(buffer, model_cfg)
        if buffer.epochs <= cfg.expert_steps:
            raise ContractError(f"buffer has {buffer.epochs} epochs, need more than expert_steps={cfg.expert_steps}")
        self.S = condensed
        self.buffer = buffer
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.original = torch.from_numpy(original.inputs.copy())
        self.rng = np.random.default_rng(cfg.seed + 7919)
        self.velocity = torch.zeros_like(condensed.windows)
        self.queue: list[int] = []
        self.step_count = 0
        self.mean_snapshots = np.mean([t.snapshots for t in buffer.trajectories], axis=0)

    def _original_batches(self, size: int):
        n = self.original.shape[0]
        while True:
            idx = self.rng.choice(n, size=min(size, n), replace=False)
            yield self.original[torch.as_tensor(np.sort(idx))]

    def _batch_size(self) -> int:
        N = len(self.S)
        return N if self.cfg.batch_size <= 0 else min(self.cfg.batch_size, N)

    def _batch_index(self):
        N, bs = len(self.S), self._batch_size()
        if bs >= N:
            return None
        return lambda: torch.as_tensor(np.sort(self.rng.choice(N, size=bs, replace=False)))

    def _next_expert(self, e0: int) -> int:
        if not self.queue:
            a = self.cfg.expert_steps
            start = torch.from_numpy(self.mean_snapshots[e0].copy())
            path = pre_update(
                start, self.S.windows, a, self.cfg.inner_lr, self.model_cfg, self.S.labels, return_path=True
            )
            self.queue = curriculum_rank(self.buffer, path, e0, a)
        return self.queue.pop(0)

    def step(self) -> StepDiagnostics:
        cfg = self.cfg
        a = cfg.expert_steps
        E = self.buffer.epochs
        self.step_count += 1
        for attempt in range(2):
            e0 = int(self.rng.integers(0, E - a))
            k = self._next_expert(e0)
            traj = self.buffer.trajectories[k]
            start, target = traj.snapshot(e0), traj.snapshot(e0 + a)
            if ((start - target) ** 2).sum().item() >= 1e-12:
                break
            log.warning("degenerate expert segment (k=%d, e0=%d), resampling", k, e0)
        else:
            log.warning("skipping outer step %d: degenerate matching denominator", self.step_count)
            return StepDiagnostics(self.step_count, 0.0, 0.0, 0.0, 0.0, k, e0, skipped=True)

        S = self.S.windows.detach().clone().requires_grad_(True)
        theta_end, fre_losses, _ = inner_train(
            start,
            S,
            cfg.inner_steps,
            cfg.inner_lr,
            self._original_batches(self.cfg.original_batch_size or self._batch_size()),
            self.model_cfg,
            self.S.labels,
            cfg.lambda_fre,
            cfg.kernel,
            self._batch_index(),
        )
        try:
            l_tmm = trajectory_matching_loss(theta_end, target, start)
        except DegenerateMatch:
            return StepDiagnostics(self.step_count, 0.0, 0.0, 0.0, 0.0, k, e0, skipped=True)
        l_task, _ = window_loss(theta_end, S, self.model_cfg, self.S.labels)
        l_fre = torch.stack(fre_losses).mean()
        l_all = cfg.lambda_task * l_task + cfg.lambda_fre * l_fre + cfg.lambda_tmm * l_tmm
        if not torch.isfinite(l_all):
            raise NonFiniteError(f"non-finite overall loss at outer step {self.step_count}")
        if l_all.requires_grad:
            (g,) = differentiate(l_all, [S])
        else:
            g = torch.zeros_like(S)
        with torch.no_grad():
            self.velocity = cfg.momentum * self.velocity + g
            new = S.detach() - cfg.condensed_lr * self.velocity
        if not torch.isfinite(new).all():
            raise NonFiniteError(f"condensed windows became non-finite at outer step {self.step_count}")
        self.S = CondensedDataset(windows=new, labels=self.S.labels, provenance=self.S.provenance)
        return StepDiagnostics(
            step=self.step_count,
            L_task=float(l_task.detach()),
            L_Fre=float(l_fre.detach()),
            L_tmm=float(l_tmm.detach()),
            L_all=float(l_all.detach()),
            expert_index=k,
            e0=e0,
        )


def condense_step(condenser: Condenser) -> tuple[CondensedDataset, StepDiagnostics]:
    diag = condenser.step()
    return condenser.S, diag


def condense(
    original: WindowSet,
    buffer: ExpertBuffer,
    cfg: CondenseConfig,
    model_cfg: TsfeConfig,
    on_step: Callable[[StepDiagnostics], None] | None = None,
) -> tuple[CondensedDataset, list[StepDiagnostics]]:
    """Initialize the synthetic set and run ``outer_steps`` matching updates."""
    S = init_condensed(original, cfg.n, cfg.init, cfg.seed)
    condenser = Condenser(S, buffer, cfg, model_cfg, original)
    diags = []
    for _ in range(cfg.outer_steps):
        _, d = condense_step(condenser)
        diags.append(d)
        if on_step is not None:
            on_step(d)
    return condenser.S, diags


_CHEADER = struct.Struct("<4sIIIIB")


def condensed_to_bytes(ds: CondensedDataset) -> bytes:
    w = ds.windows.detach().numpy()
    N, length, C = w.shape
    parts = [_CHEADER.pack(CONDENSED_MAGIC, CONDENSED_VERSION, N, length, C, int(ds.labels is not None))]
    parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
    if ds.labels is not None:
        parts.append(ds.labels.numpy().astype("<i4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def condensed_from_bytes(blob: bytes) -> CondensedDataset:
    if len(blob) < _CHEADER.size + 4:
        raise CondensedFileError(f"truncated condensed file: {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CondensedFileError("condensed file checksum mismatch")
    magic, version, N, length, C, has_labels = _CHEADER.unpack_from(body)
    if magic != CONDENSED_MAGIC:
        raise CondensedFileError(f"bad magic {magic!r}")
    if version != CONDENSED_VERSION:
        raise CondensedFileError(f"condensed file version {version} not supported (expected {CONDENSED_VERSION})")
    count = N * length * C
    expect = _CHEADER.size + 4 * count + (4 * N if has_labels else 0)
    if len(body) != expect:
        raise CondensedFileError(f"payload length {len(body)} does not match header ({expect})")
    w = np.frombuffer(body, dtype="<f4", count=count, offset=_CHEADER.size).reshape(N, length, C)
    labels = None
    if has_labels:
        labels = torch.tensor(np.frombuffer(body, dtype="<i4", count=N, offset=_CHEADER.size + 4 * count).astype(np.int64))
    return CondensedDataset(windows=torch.tensor(w.astype(np.float32)), labels=labels)


def save_condensed(ds: CondensedDataset, path) -> None:
    Path(path).write_bytes(condensed_to_bytes(ds))


def load_condensed(path) -> CondensedDataset:
    return condensed_from_bytes(Path(path).read_bytes())
