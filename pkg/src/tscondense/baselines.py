"""Coreset baselines: random sampling, greedy K-Center and kernel herding."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import WindowSet
from .numerics import ContractError

METHODS = ("random", "kcenter", "herding")


@dataclass(frozen=True)
class CoresetSelection:
    indices: tuple[int, ...]  # unique, ascending
    method: str
    seed: int
    order: tuple[int, ...] = ()  # selection order, when it carries meaning

    def to_json(self) -> str:
        return json.dumps({"method": self.method, "seed": self.seed, "indices": list(self.indices)})

    @classmethod
    def from_json(cls, text: str) -> "CoresetSelection":
        d = json.loads(text)
        return cls(indices=tuple(int(i) for i in d["indices"]), method=d["method"], seed=int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CoresetSelection":
        return cls.from_json(Path(path).read_text())


def _check(windows: WindowSet | np.ndarray, n: int) -> np.ndarray:
    X = windows.windows if isinstance(windows, WindowSet) else np.asarray(windows)
    X = X.reshape(X.shape[0], -1).astype(np.float64)
    if n < 1 or n > X.shape[0]:
        raise ContractError(f"cannot select {n} of {X.shape[0]} windows")
    return X


def _selection(order, method, seed) -> CoresetSelection:
    order = tuple(int(i) for i in order)
    return CoresetSelection(indices=tuple(sorted(order)), method=method, seed=seed, order=order)


def random_coreset(windows, n: int, seed: int = 0) -> CoresetSelection:
    X = _check(windows, n)
    order = np.random.default_rng(seed).choice(X.shape[0], size=n, replace=False)
    return _selection(order, "random", seed)


def kcenter_coreset(windows, n: int, seed: int = 0, first: int | None = None) -> CoresetSelection:
    """Greedy farthest-point traversal under Euclidean distance."""
    X = _check(windows, n)
    count = X.shape[0]
    start = int(np.random.default_rng(seed).integers(count)) if first is None else int(first)
    sq = (X * X).sum(axis=1)

    def dist2(i):
        return np.maximum(sq + sq[i] - 2.0 * X @ X[i], 0.0)

    order = [start]
    chosen = np.zeros(count, dtype=bool)
    chosen[start] = True
    mind = dist2(start)
    for _ in range(n - 1):
        cand = np.where(chosen, -np.inf, mind)
        nxt = int(np.argmax(cand))  # first maximum, i.e. lowest index on ties
        order.append(nxt)
        chosen[nxt] = True
        mind = np.minimum(mind, dist2(nxt))
    return _selection(order, "kcenter", seed)


def covering_radius(windows, indices) -> float:
    X = _check(windows, max(1, len(indices)))
    # direct differences: exact zero for chosen points, unlike the expanded form
    mind = np.full(X.shape[0], np.inf)
    for i in indices:
        mind = np.minimum(mind, np.sqrt(((X - X[i]) ** 2).sum(axis=1)))
    return float(mind.max())


def herding_coreset(windows, n: int, seed: int = 0) -> CoresetSelection:
    """Kernel herding toward the dataset mean with a linear kernel."""
    X = _check(windows, n)
    mu = X.mean(axis=0)
    w = mu.copy()
    available = np.ones(X.shape[0], dtype=bool)
    order = []
    for _ in range(n):
        scores = np.where(available, X @ w, -np.inf)
        best = int(np.argmax(scores))
        order.append(best)
        available[best] = False
        w += mu - X[best]
    return _selection(order, "herding", seed)


def select(method: str, windows, n: int, seed: int = 0) -> CoresetSelection:
    if method == "random":
        return random_coreset(windows, n, seed)
    if method == "kcenter":
        return kcenter_coreset(windows, n, seed)
    if method == "herding":
        return herding_coreset(windows, n, seed)
    raise ContractError(f"unknown coreset method {method!r}; choose from {METHODS}")
