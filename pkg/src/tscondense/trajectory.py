"""Expert trajectories, the on-disk expert buffer and trajectory matching."""

from __future__ import annotations

import logging
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import WindowSet
from .model import TsfeConfig, config_fingerprint, init_params, parameter_count, window_loss
from .numerics import ContractError, NonFiniteError, cosine_similarity, differentiate
from .training import fit

log = logging.getLogger(__name__)

BUFFER_MAGIC = b"TDCB"
BUFFER_VERSION = 1
DEFAULT_K = 10


class BufferError(ValueError):
    """Unreadable or incompatible expert buffer file."""


class ChecksumError(BufferError):
    pass


class VersionError(BufferError):
    pass


class FingerprintError(BufferError):
    pass


class DegenerateMatch(ArithmeticError):
    """The matching denominator vanished; the caller should skip this sample."""


@dataclass
class ExpertTrajectory:
    snapshots: np.ndarray  # [E, param_len] float32, one row per epoch
    seed: int
    config_fingerprint: bytes
    epoch_losses: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.snapshots = np.ascontiguousarray(self.snapshots, dtype=np.float32)
        if self.snapshots.ndim != 2:
            raise ContractError("snapshots must be [epochs, param_len]")

    @property
    def epochs(self) -> int:
        return self.snapshots.shape[0]

    def snapshot(self, e: int) -> torch.Tensor:
        return torch.from_numpy(self.snapshots[e].copy())

    def __eq__(self, other):
        return (
            isinstance(other, ExpertTrajectory)
            and self.seed == other.seed
            and self.config_fingerprint == other.config_fingerprint
            and self.snapshots.shape == other.snapshots.shape
            and self.snapshots.tobytes() == other.snapshots.tobytes()
        )


@dataclass
class ExpertBuffer:
    trajectories: list[ExpertTrajectory]
    config_fingerprint: bytes

    def __post_init__(self):
        if not self.trajectories:
            raise ContractError("buffer needs at least one trajectory")
        for t in self.trajectories:
            if t.config_fingerprint != self.config_fingerprint:
                raise FingerprintError("trajectories do not share one fingerprint")
        shapes = {t.snapshots.shape for t in self.trajectories}
        if len(shapes) != 1:
            raise ContractError(f"trajectories disagree on shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def epochs(self) -> int:
        return self.trajectories[0].epochs

    @property
    def param_len(self) -> int:
        return self.trajectories[0].snapshots.shape[1]

    def __eq__(self, other):
        return (
            isinstance(other, ExpertBuffer)
            and self.config_fingerprint == other.config_fingerprint
            and self.trajectories == other.trajectories
        )


def expert_fingerprint(cfg: TsfeConfig, epochs: int, lr: float, data_length: int, channels: int) -> bytes:
    return config_fingerprint(cfg, epochs=int(epochs), lr=float(lr), data_length=int(data_length), channels=int(channels))


def train_expert(
    train_windows: WindowSet,
    cfg: TsfeConfig,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
) -> ExpertTrajectory:
    """Train one model on the original windows, snapshotting after every epoch."""
    if epochs < 2:
        raise ContractError("an expert needs at least 2 epochs")
    if len(train_windows) == 0:
        raise ContractError("no training windows")
    torch.manual_seed(seed)
    windows = torch.from_numpy(train_windows.windows)
    labels = None if train_windows.labels is None else torch.from_numpy(train_windows.labels)
    snaps = []
    theta0 = init_params(cfg, seed)
    _, losses = fit(
        theta0,
        windows,
        cfg,
        epochs,
        lr,
        np.random.default_rng(seed),
        labels=labels,
        batch_size=batch_size,
        on_epoch=lambda e, th: snaps.append(th.numpy().copy()),
    )
    fp = expert_fingerprint(cfg, epochs, lr, len(train_windows), train_windows.channels)
    return ExpertTrajectory(snapshots=np.stack(snaps), seed=seed, config_fingerprint=fp, epoch_losses=losses)


def _train_expert_job(args):
    return train_expert(*args)


def train_experts(
    train_windows: WindowSet,
    cfg: TsfeConfig,
    k: int = DEFAULT_K,
    epochs: int = 10,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 64,
    workers: int = 1,
) -> ExpertBuffer:
    """Train ``k`` experts with seeds ``seed, seed+1, ...``; parallel when workers > 1."""
    jobs = [(train_windows, cfg, epochs, lr, seed + i, batch_size) for i in range(k)]
    if workers > 1:
        import multiprocessing as mp

        with ProcessPoolExecutor(max_workers=workers, mp_context=mp.get_context("spawn")) as ex:
            trajs = list(ex.map(_train_expert_job, jobs))
    else:
        trajs = [_train_expert_job(j) for j in jobs]
    for t in trajs:
        log.info("expert seed=%d losses=%s", t.seed, ["%.4f" % x for x in t.epoch_losses])
    return ExpertBuffer(trajectories=trajs, config_fingerprint=trajs[0].config_fingerprint)


_HEADER = struct.Struct("<4sI32sIIQ")


def buffer_to_bytes(buffer: ExpertBuffer) -> bytes:
    E, P = buffer.epochs, buffer.param_len
    parts = [_HEADER.pack(BUFFER_MAGIC, BUFFER_VERSION, buffer.config_fingerprint, len(buffer), E, P)]
    for t in buffer.trajectories:
        parts.append(struct.pack("<Q", t.seed))
        parts.append(t.snapshots.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def buffer_from_bytes(blob: bytes, expected_fingerprint: bytes | None = None) -> ExpertBuffer:
    if len(blob) < _HEADER.size + 4:
        raise BufferError(f"truncated buffer file: {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("buffer checksum mismatch (file corrupted or truncated)")
    magic, version, fp, K, E, P = _HEADER.unpack_from(body)
    if magic != BUFFER_MAGIC:
        raise BufferError(f"bad magic {magic!r}")
    if version != BUFFER_VERSION:
        raise VersionError(f"buffer version {version} not supported (expected {BUFFER_VERSION})")
    expect_len = _HEADER.size + K * (8 + E * P * 4)
    if len(body) != expect_len:
        raise BufferError(f"buffer payload length {len(body)} does not match header ({expect_len})")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintError(f"fingerprint mismatch: file {fp.hex()[:16]}, expected {expected_fingerprint.hex()[:16]}")
    trajs = []
    pos = _HEADER.size
    for _ in range(K):
        (seed,) = struct.unpack_from("<Q", body, pos)
        pos += 8
        snaps = np.frombuffer(body, dtype="<f4", count=E * P, offset=pos).reshape(E, P).astype(np.float32)
        pos += E * P * 4
        trajs.append(ExpertTrajectory(snapshots=snaps, seed=int(seed), config_fingerprint=fp))
    return ExpertBuffer(trajectories=trajs, config_fingerprint=fp)


def buffer_save(buffer: ExpertBuffer, path) -> None:
    Path(path).write_bytes(buffer_to_bytes(buffer))


def buffer_load(path, expected_fingerprint: bytes | None = None) -> ExpertBuffer:
    return buffer_from_bytes(Path(path).read_bytes(), expected_fingerprint)


def check_buffer_config(buffer: ExpertBuffer, cfg: TsfeConfig) -> None:
    if buffer.param_len != parameter_count(cfg):
        raise FingerprintError(
            f"buffer holds {buffer.param_len} parameters but the model config needs {parameter_count(cfg)}"
        )


def pre_update(
    theta0: torch.Tensor,
    windows: torch.Tensor,
    a: int,
    alpha: float,
    cfg: TsfeConfig,
    labels: torch.Tensor | None = None,
    return_path: bool = False,
    loss_fn=None,
):
    """Take ``a`` plain gradient steps on the condensed windows, without a tape.

    Returns the foreseen parameters, or the whole path ``[theta0, ..., theta_a]``
    when ``return_path`` is set. ``loss_fn(theta)`` replaces the model's task
    loss when given (toy objectives).
    """
    if a < 1:
        raise ContractError("a must be >= 1")
    if alpha < 0:
        raise ContractError("alpha must be non-negative")
    theta = theta0.detach().clone()
    windows = windows.detach()
    path = [theta]
    for s in range(a):
        th = theta.clone().requires_grad_(True)
        loss = loss_fn(th) if loss_fn is not None else window_loss(th, windows, cfg, labels)[0]
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite loss in pre-update step {s}")
        (g,) = differentiate(loss, [th])
        theta = (th - alpha * g).detach()
        path.append(theta)
    return path if return_path else theta


def trajectory_distance(segA, segB) -> float:
    """Cosine similarity between two concatenated parameter segments."""
    if len(segA) != len(segB):
        raise ContractError(f"segment length mismatch: {len(segA)} vs {len(segB)}")
    a = [torch.as_tensor(x).reshape(-1) for x in segA]
    b = [torch.as_tensor(x).reshape(-1) for x in segB]
    for x, y in zip(a, b):
        if x.numel() != y.numel():
            raise ContractError("parameter vector length mismatch")
    return float(cosine_similarity(torch.cat(a).double(), torch.cat(b).double()))


def rank_by_similarity(similarities) -> list[int]:
    """Indices by similarity, most similar first; ties go to the lower index."""
    return sorted(range(len(similarities)), key=lambda k: (-similarities[k], k))


def curriculum_rank(buffer: ExpertBuffer, foreseen, e0: int, a: int) -> list[int]:
    """Order the buffer's trajectories from most to least similar to ``foreseen``.

    ``foreseen`` is the pre-update path ``[theta_e0, ..., theta_e0+a]`` and is
    compared against each expert's snapshots ``e0 .. e0 + a``.
    """
    if e0 < 0 or e0 + a >= buffer.epochs:
        raise ContractError(f"e0 + a = {e0 + a} must be < E = {buffer.epochs}")
    foreseen = list(foreseen)[: a + 1]
    if len(foreseen) != a + 1:
        raise ContractError(f"foreseen path must cover {a + 1} points, got {len(foreseen)}")
    sims = [
        trajectory_distance(foreseen, [t.snapshots[e] for e in range(e0, e0 + a + 1)])
        for t in buffer.trajectories
    ]
    return rank_by_similarity(sims)


def trajectory_matching_loss(
    theta_tilde_end: torch.Tensor,
    theta_expert_end: torch.Tensor,
    theta_start: torch.Tensor,
) -> torch.Tensor:
    """Squared distance to the expert endpoint, normalized by the expert's own move."""
    if not (theta_tilde_end.shape == theta_expert_end.shape == theta_start.shape):
        raise ContractError("parameter vectors must share one shape")
    den = ((theta_start - theta_expert_end) ** 2).sum()
    if den.item() < 1e-12:
        raise DegenerateMatch("expert start and end coincide")
    num = ((theta_tilde_end - theta_expert_end) ** 2).sum()
    return num / den
