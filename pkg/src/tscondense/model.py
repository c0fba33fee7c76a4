"""Stacked-TSOperator feature extractor with forecasting and classification heads.

The network is written functionally over a single flat parameter vector so
that unrolled training on the condensed set can differentiate through every
update. ``ParamLayout`` fixes the ordering of that vector:

    embed.w [L, d], embed.b [d], pos [P, d] (when positional encoding is on)
    per operator j:
        op{j}.wq, op{j}.wk, op{j}.wv, op{j}.wo [d, d] each followed by its bias [d]
        op{j}.norm1.scale, op{j}.norm1.shift [d]   (absent when norm == "none")
        op{j}.fc1.w [d, F], op{j}.fc1.b [F], op{j}.fc2.w [F, d], op{j}.fc2.b [d]
        op{j}.norm2.scale, op{j}.norm2.shift [d]   (absent when norm == "none")
    head.w, head.b   ([P*d, PL] and [PL] for forecasting, [d, k] and [k] for classification)
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import ContractError, NonFiniteError, softmax

NORM_EPS = 1e-5
RUNNING_MOMENTUM = 0.1


@dataclass(frozen=True)
class TsfeConfig:
    lookback: int = 96
    horizon: int = 96
    channels: int = 1
    patch_len: int = 16
    patch_stride: int = 8
    num_operators: int = 3
    num_heads: int = 16
    model_dim: int = 128
    ff_dim: int = 0  # 0 means 2 * model_dim
    head_kind: str = "forecast"
    num_classes: int = 0
    norm: str = "batch"  # batch | sample | none
    pos_encoding: bool = True

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not (1 <= self.patch_stride and self.patch_len <= self.lookback):
            raise ContractError("need 1 <= patch_stride and patch_len <= lookback")
        if self.num_operators < 1:
            raise ContractError("num_operators must be >= 1")
        if self.head_kind not in ("forecast", "classify"):
            raise ContractError(f"unknown head_kind {self.head_kind!r}")
        if self.head_kind == "classify" and self.num_classes < 2:
            raise ContractError("classification needs num_classes >= 2")
        if self.norm not in ("batch", "sample", "none"):
            raise ContractError(f"unknown norm {self.norm!r}")

    @property
    def num_patches(self) -> int:
        return (self.lookback - self.patch_len) // self.patch_stride + 2

    @property
    def ffn_dim(self) -> int:
        return self.ff_dim or 2 * self.model_dim

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint_payload(self) -> dict:
        return self.to_dict()


def parameter_count(cfg: TsfeConfig) -> int:
    """Closed-form parameter count, kept independent of ``ParamLayout``."""
    d, L, P, Fd = cfg.model_dim, cfg.patch_len, cfg.num_patches, cfg.ffn_dim
    total = L * d + d + (P * d if cfg.pos_encoding else 0)
    per_op = 4 * (d * d + d) + (2 * d * Fd + Fd + d)
    if cfg.norm != "none":
        per_op += 4 * d
    total += cfg.num_operators * per_op
    if cfg.head_kind == "forecast":
        total += P * d * cfg.horizon + cfg.horizon
    else:
        total += d * cfg.num_classes + cfg.num_classes
    return total


class ParamLayout:
    """Ordered (name, shape) table mapping a flat vector onto named tensors."""

    def __init__(self, cfg: TsfeConfig):
        d, L, P, Fd = cfg.model_dim, cfg.patch_len, cfg.num_patches, cfg.ffn_dim
        entries: list[tuple[str, tuple[int, ...]]] = [("embed.w", (L, d)), ("embed.b", (d,))]
        if cfg.pos_encoding:
            entries.append(("pos", (P, d)))
        for j in range(cfg.num_operators):
            for m in ("wq", "wk", "wv", "wo"):
                entries += [(f"op{j}.{m}", (d, d)), (f"op{j}.{m}.b", (d,))]
            if cfg.norm != "none":
                entries += [(f"op{j}.norm1.scale", (d,)), (f"op{j}.norm1.shift", (d,))]
            entries += [
                (f"op{j}.fc1.w", (d, Fd)),
                (f"op{j}.fc1.b", (Fd,)),
                (f"op{j}.fc2.w", (Fd, d)),
                (f"op{j}.fc2.b", (d,)),
            ]
            if cfg.norm != "none":
                entries += [(f"op{j}.norm2.scale", (d,)), (f"op{j}.norm2.shift", (d,))]
        if cfg.head_kind == "forecast":
            entries += [("head.w", (P * d, cfg.horizon)), ("head.b", (cfg.horizon,))]
        else:
            entries += [("head.w", (d, cfg.num_classes)), ("head.b", (cfg.num_classes,))]
        self.entries = entries
        self.offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        pos = 0
        for name, shape in entries:
            self.offsets[name] = (pos, shape)
            pos += int(np.prod(shape))
        self.size = pos

    def unflatten(self, flat: torch.Tensor) -> dict[str, torch.Tensor]:
        if flat.dim() != 1 or flat.numel() != self.size:
            raise ContractError(f"flat parameter vector must have length {self.size}, got {tuple(flat.shape)}")
        out = {}
        for name, (start, shape) in self.offsets.items():
            out[name] = flat[start : start + int(np.prod(shape))].view(shape)
        return out

    def flatten(self, named: dict[str, torch.Tensor]) -> torch.Tensor:
        return torch.cat([named[name].reshape(-1) for name, _ in self.entries])


def init_params(cfg: TsfeConfig, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Seeded initialization; returns the flat parameter vector."""
    gen = torch.Generator().manual_seed(int(seed))
    layout = ParamLayout(cfg)
    named = {}
    for name, shape in layout.entries:
        if name.endswith(".scale"):
            t = torch.ones(shape)
        elif name.endswith(".shift"):
            t = torch.zeros(shape)
        elif name == "pos":
            t = torch.randn(shape, generator=gen) * 0.02
        else:
            # fan-in uniform; a bias uses the fan-in of its matrix
            if len(shape) == 2:
                fan_in = shape[0]
            else:
                stem = name[:-2]
                fan_in = layout.offsets[stem if stem in layout.offsets else stem + ".w"][1][0]
            bound = 1.0 / math.sqrt(fan_in)
            t = (torch.rand(shape, generator=gen) * 2 - 1) * bound
        named[name] = t
    return layout.flatten(named).to(dtype)


@dataclass
class ModelParams:
    """A parameter vector plus the running normalization statistics."""

    cfg: TsfeConfig
    theta: torch.Tensor
    norm_state: dict[str, torch.Tensor] = field(default_factory=dict)
    train_seconds: float = 0.0
    history: list[float] = field(default_factory=list)

    def flatten(self) -> torch.Tensor:
        return self.theta

    def named(self) -> dict[str, torch.Tensor]:
        return ParamLayout(self.cfg).unflatten(self.theta)

    @property
    def num_params(self) -> int:
        return self.theta.numel()

    @classmethod
    def unflatten(cls, cfg: TsfeConfig, flat: torch.Tensor) -> "ModelParams":
        ParamLayout(cfg).unflatten(flat)
        return cls(cfg=cfg, theta=flat)

    @classmethod
    def initial(cls, cfg: TsfeConfig, seed: int) -> "ModelParams":
        return cls(cfg=cfg, theta=init_params(cfg, seed))


def channel_separate(batch: torch.Tensor) -> list[torch.Tensor]:
    if batch.dim() != 3 or batch.shape[2] < 1:
        raise ContractError(f"expected [B, n, C] with C >= 1, got {tuple(batch.shape)}")
    return [batch[:, :, c : c + 1] for c in range(batch.shape[2])]


def padding_length(n: int, L: int, S: int) -> int:
    """Replicated tail length: S - 1, plus one when S divides n - L.

    S - 1 values are what the patch-count formula assumes; when (n - L) is a
    multiple of S the last patch needs one more value to stay in bounds.
    """
    return S - 1 + (1 if (n - L) % S == 0 else 0)


def patchify(series: torch.Tensor, L: int, S: int) -> torch.Tensor:
    """Split ``[..., n]`` or ``[B, n, 1]`` series into ``[..., P, L]`` patches."""
    x = series[..., 0] if series.dim() == 3 and series.shape[-1] == 1 else series
    n = x.shape[-1]
    if S < 1 or L < 1 or L > n:
        raise ContractError(f"patching needs 1 <= S and 1 <= L <= n, got L={L} S={S} n={n}")
    P = (n - L) // S + 2
    pad = padding_length(n, L, S)
    padded_len = n + pad
    if (P - 1) * S + L > padded_len:
        raise ContractError(f"last patch [{(P - 1) * S}, {(P - 1) * S + L}) exceeds padded length {padded_len}")
    tail = x[..., -1:].expand(*x.shape[:-1], pad)
    padded = torch.cat([x, tail], dim=-1)
    return padded.unfold(-1, L, S)[..., :P, :]


def _normalize(x, scale, shift, kind, state, key, train, update_state):
    # x: [B, C, P, d]; batch statistics are per channel over (batch, patch)
    if kind == "none":
        return x
    if kind == "sample":
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
    else:
        use_running = (not train) and state is not None and key in state
        if use_running:
            mean = state[key][0][None, :, None, :]
            var = state[key][1][None, :, None, :]
        else:
            mean = x.mean(dim=(0, 2), keepdim=True)
            var = x.var(dim=(0, 2), unbiased=False, keepdim=True)
            if update_state and state is not None:
                with torch.no_grad():
                    m, v = mean[0, :, 0, :].detach(), var[0, :, 0, :].detach()
                    if key in state:
                        om, ov = state[key]
                        m = (1 - RUNNING_MOMENTUM) * om + RUNNING_MOMENTUM * m
                        v = (1 - RUNNING_MOMENTUM) * ov + RUNNING_MOMENTUM * v
                    state[key] = (m, v)
    return (x - mean) / torch.sqrt(var + NORM_EPS) * scale + shift


def ts_operator_forward(
    h: torch.Tensor,
    p: dict[str, torch.Tensor],
    j: int,
    cfg: TsfeConfig,
    state: dict | None = None,
    train: bool = True,
    update_state: bool = False,
    attn_out: list | None = None,
) -> torch.Tensor:
    """One attention + fully-connected block on ``[B, C, P, d]`` features."""
    B, C, P, d = h.shape
    H, dk = cfg.num_heads, cfg.head_dim

    def proj(m):
        return (h @ p[f"op{j}.{m}"] + p[f"op{j}.{m}.b"]).view(B, C, P, H, dk).transpose(2, 3)

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(dk))
    if not torch.isfinite(weights).all():
        raise NonFiniteError(f"non-finite attention weights in operator {j}")
    if attn_out is not None:
        attn_out.append(weights.detach())
    a = (weights @ v).transpose(2, 3).reshape(B, C, P, d)
    a = a @ p[f"op{j}.wo"] + p[f"op{j}.wo.b"]
    kind = cfg.norm
    g = lambda name: p.get(f"op{j}.{name}")  # noqa: E731
    h1 = _normalize(h + a, g("norm1.scale"), g("norm1.shift"), kind, state, f"op{j}.norm1", train, update_state)
    ff = F.gelu(h1 @ p[f"op{j}.fc1.w"] + p[f"op{j}.fc1.b"]) @ p[f"op{j}.fc2.w"] + p[f"op{j}.fc2.b"]
    return _normalize(h1 + ff, g("norm2.scale"), g("norm2.shift"), kind, state, f"op{j}.norm2", train, update_state)


def tsfe_forward(
    batch: torch.Tensor,
    theta: torch.Tensor,
    cfg: TsfeConfig,
    state: dict | None = None,
    train: bool = True,
    update_state: bool = False,
    attn_out: list | None = None,
) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Run the extractor on ``[B, n, C]`` inputs.

    Returns the per-operator features (each ``[B, C, P, d]``) and the head
    output: ``[B, PL, C]`` for forecasting or ``[B, num_classes]`` logits.
    """
    if batch.dim() != 3 or batch.shape[1] != cfg.lookback or batch.shape[2] != cfg.channels:
        raise ContractError(
            f"batch shape {tuple(batch.shape)} does not match [B, {cfg.lookback}, {cfg.channels}]"
        )
    p = ParamLayout(cfg).unflatten(theta)
    series = torch.stack([s[..., 0] for s in channel_separate(batch)], dim=1)  # [B, C, n]
    patches = patchify(series, cfg.patch_len, cfg.patch_stride)  # [B, C, P, L]
    h = patches @ p["embed.w"] + p["embed.b"]
    if cfg.pos_encoding:
        h = h + p["pos"]
    features = []
    for j in range(cfg.num_operators):
        h = ts_operator_forward(h, p, j, cfg, state, train, update_state, attn_out)
        features.append(h)
    B, C, P, d = h.shape
    if cfg.head_kind == "forecast":
        out = (h.reshape(B, C, P * d) @ p["head.w"] + p["head.b"]).transpose(1, 2)
    else:
        out = h.mean(dim=(1, 2)) @ p["head.w"] + p["head.b"]
    return features, out


def task_loss(prediction: torch.Tensor, target: torch.Tensor, head_kind: str = "forecast") -> torch.Tensor:
    if head_kind == "forecast":
        if prediction.shape != target.shape:
            raise ContractError(f"shape mismatch {tuple(prediction.shape)} vs {tuple(target.shape)}")
        return ((prediction - target) ** 2).mean()
    labels = target.long()
    k = prediction.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ContractError("label out of range")
    return F.cross_entropy(prediction, labels)


def split_window_tensor(windows: torch.Tensor, cfg: TsfeConfig) -> tuple[torch.Tensor, torch.Tensor]:
    return windows[:, : cfg.lookback], windows[:, cfg.lookback : cfg.lookback + cfg.horizon]


def window_loss(
    theta: torch.Tensor,
    windows: torch.Tensor,
    cfg: TsfeConfig,
    labels: torch.Tensor | None = None,
    state: dict | None = None,
    update_state: bool = False,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Task loss of the model on full windows; also returns layer features."""
    x, y = split_window_tensor(windows, cfg)
    feats, out = tsfe_forward(x, theta, cfg, state=state, train=True, update_state=update_state)
    if cfg.head_kind == "forecast":
        return task_loss(out, y, "forecast"), feats
    return task_loss(out, labels, "classify"), feats


def config_fingerprint(cfg: TsfeConfig, **extra) -> bytes:
    """32-byte SHA-256 over the config fields and any extra hyperparameters."""
    payload = {"cfg": cfg.fingerprint_payload(), **extra}
    blob = json.dumps(payload, sort_keys=True, default=float).encode()
    return hashlib.sha256(blob).digest()


def with_overrides(cfg: TsfeConfig, **kw) -> TsfeConfig:
    return replace(cfg, **kw)
