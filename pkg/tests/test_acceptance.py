"""Acceptance criteria A1-A12. Each test prints one PASS/FAIL line.

The synthetic end-to-end block (A5, A6, A9, A10) shares one expert buffer
and one set of condensed windows per seed, built lazily and cached for the
module. It dominates the runtime of the whole suite.
"""

import json
import math
import time
import zlib
from dataclasses import replace
from functools import lru_cache

import numpy as np
import pytest
import torch

from tscondense.baselines import random_coreset
from tscondense.cli import run, toy_csv_path
from tscondense.condense import (
    CondenseConfig,
    CondensedDataset,
    CondensedFileError,
    condense,
    condensed_from_bytes,
    condensed_to_bytes,
    inner_train,
)
from tscondense.data import make_windows, split_chronological, standardize, synthetic_series, two_regime_series
from tscondense.decomp import frequency_matching_loss, series_decompose
from tscondense.evaluation import StreamSetup, TrainSettings, evaluate, stream_eval, train_downstream
from tscondense.model import TsfeConfig, config_fingerprint, init_params, patchify, padding_length, tsfe_forward, window_loss
from tscondense.numerics import finite_difference_errors
from tscondense.trajectory import (
    BufferError,
    ExpertBuffer,
    ExpertTrajectory,
    buffer_from_bytes,
    buffer_to_bytes,
    curriculum_rank,
    trajectory_distance,
    trajectory_matching_loss,
    train_experts,
)

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail=""):
        with capsys.disabled():
            print(f"\n{name} {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        assert ok, f"{name}: {detail}"

    return report


def test_a1_reconstruction(verdict):
    t = time.perf_counter()
    rng = np.random.default_rng(1)
    exact = constant_clean = True
    for i in range(1000):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 30)), int(rng.integers(1, 9)))
        scale = 10.0 ** rng.uniform(-3, 3)
        h = torch.from_numpy((rng.standard_normal(shape) * scale).astype(np.float32))
        k = int(rng.choice([1, 3, 5, 25]))
        pair = series_decompose(h, k)
        exact &= torch.equal(pair.reconstruct().to(h.dtype), h)
        c = torch.full(shape, float(rng.standard_normal() * scale), dtype=torch.float32)
        constant_clean &= bool(torch.all(series_decompose(c, k).seasonality == 0))
    secs = time.perf_counter() - t
    verdict("A1", exact and constant_clean and secs < 10,
            f"bit-exact={exact} constant-seasonality-zero={constant_clean} {secs:.1f}s")


A2_CFG = TsfeConfig(lookback=8, horizon=4, channels=2, patch_len=4, patch_stride=2, num_operators=1, num_heads=2,
                    model_dim=8)


def _repeat(x):
    while True:
        yield x


def test_a2_gradient_fidelity(verdict):
    t = time.perf_counter()
    cfg, N, b = A2_CFG, 4, 2
    gen = torch.Generator().manual_seed(0)
    theta0 = init_params(cfg, 0)
    target = init_params(cfg, 1)
    orig = torch.randn(6, 12, 2, generator=gen)
    point = torch.randn(N, 12, 2, generator=gen)

    def cast(x, *ts):
        return [t.to(x.dtype) for t in ts]

    def l_task(x):
        th, o = cast(x, theta0, orig)
        end, _, _ = inner_train(th, x, b, 0.05, _repeat(o[:, :8]), cfg, kernel=3)
        return window_loss(end, x, cfg)[0]

    def l_fre(x):
        th, o = cast(x, theta0, orig)
        fT, _ = tsfe_forward(o[:, :8], th, cfg)
        fS, _ = tsfe_forward(x[:, :8], th, cfg)
        return frequency_matching_loss(fT, fS, 3)

    def l_tmm(x):
        th, tg, o = cast(x, theta0, target, orig)
        end, _, _ = inner_train(th, x, b, 0.05, _repeat(o[:, :8]), cfg, kernel=3)
        return trajectory_matching_loss(end, tg, th)

    fractions = {}
    for name, f in (("L_task", l_task), ("L_Fre", l_fre), ("L_tmm", l_tmm)):
        errs = finite_difference_errors(f, point, 1e-6)
        fractions[name] = float((errs <= 2e-3).mean())
    secs = time.perf_counter() - t
    ok = all(v >= 0.95 for v in fractions.values()) and secs < 120
    verdict("A2", ok, " ".join(f"{k}={v:.3f}" for k, v in fractions.items()) + f" {secs:.1f}s")


def test_a3_loss_identities(verdict):
    gen = torch.Generator().manual_seed(3)
    start, target = torch.randn(50, generator=gen), torch.randn(50, generator=gen)
    zero = trajectory_matching_loss(target.clone(), target, start).item()
    one = trajectory_matching_loss(start.clone(), target, start).item()
    feats = [torch.randn(4, 2, 6, 8, generator=gen) for _ in range(3)]
    minus_two = frequency_matching_loss(feats, [f.clone() for f in feats], 5).item()
    other = [torch.randn(3, 2, 6, 8, generator=gen) for _ in range(3)]
    base = frequency_matching_loss(feats, other, 5).item()
    scaled = frequency_matching_loss(feats, [3 * f for f in other], 5).item()
    errs = [abs(zero), abs(one - 1), abs(minus_two + 2), abs(scaled - base)]
    verdict("A3", max(errs) <= 1e-5, f"max deviation {max(errs):.2e}")


def _corrupt_detected(blob, decode, rng, trials=100):
    hits = 0
    for _ in range(trials):
        bad = bytearray(blob)
        i = int(rng.integers(len(bad)))
        bad[i] ^= int(rng.integers(1, 256))
        try:
            decode(bytes(bad))
        except (BufferError, CondensedFileError):
            hits += 1
    return hits


def test_a4_round_trip_and_crc(verdict):
    rng = np.random.default_rng(4)
    fp = config_fingerprint(A2_CFG)
    trajs = [ExpertTrajectory(snapshots=rng.standard_normal((5, 40)).astype(np.float32), seed=i, config_fingerprint=fp)
             for i in range(3)]
    buf = ExpertBuffer(trajectories=trajs, config_fingerprint=fp)
    blob = buffer_to_bytes(buf)
    back = buffer_from_bytes(blob)
    buf_exact = buffer_to_bytes(back) == blob and all(
        np.array_equal(a.snapshots, b.snapshots) and a.seed == b.seed for a, b in zip(trajs, back.trajectories))
    S = CondensedDataset(windows=torch.from_numpy(rng.standard_normal((7, 12, 2)).astype(np.float32)))
    cblob = condensed_to_bytes(S)
    cond_exact = condensed_to_bytes(condensed_from_bytes(cblob)) == cblob and condensed_from_bytes(cblob) == S
    buf_hits = _corrupt_detected(blob, buffer_from_bytes, rng)
    cond_hits = _corrupt_detected(cblob, condensed_from_bytes, rng)
    ok = buf_exact and cond_exact and buf_hits == 100 and cond_hits == 100
    verdict("A4", ok, f"exact={buf_exact and cond_exact} detected buffer {buf_hits}/100 condensed {cond_hits}/100")


def test_a7_curriculum(verdict):
    rng = np.random.default_rng(7)
    fp = b"f" * 32
    bad = 0
    for _ in range(1000):
        k, e, p = int(rng.integers(1, 9)), int(rng.integers(2, 7)), int(rng.integers(1, 11))
        a = int(rng.integers(1, e))
        e0 = int(rng.integers(0, e - a))
        trajs = [ExpertTrajectory(snapshots=rng.standard_normal((e, p)).astype(np.float32), seed=i,
                                  config_fingerprint=fp) for i in range(k)]
        buf = ExpertBuffer(trajectories=trajs, config_fingerprint=fp)
        foreseen = [torch.from_numpy(rng.standard_normal(p).astype(np.float32)) for _ in range(a + 1)]
        order = curriculum_rank(buf, foreseen, e0, a)
        sims = [trajectory_distance(foreseen, [trajs[i].snapshots[x] for x in range(e0, e0 + a + 1)]) for i in order]
        if sorted(order) != list(range(k)) or any(x < y for x, y in zip(sims, sims[1:])):
            bad += 1
    verdict("A7", bad == 0, f"{1000 - bad}/1000 ranked permutations non-increasing")


def test_a8_patch_count(verdict):
    rng = np.random.default_rng(8)
    bad = trials = 0
    while trials < 1000:
        n = int(rng.integers(1, 513))
        L = int(rng.integers(1, n + 1))
        S = int(rng.integers(1, L + 1))
        trials += 1
        x = torch.arange(float(n))
        p = patchify(x, L, S)
        P = (n - L) // S + 2
        padded = n + padding_length(n, L, S)
        in_bounds = (P - 1) * S + L <= padded
        expect_last = torch.clamp(torch.arange((P - 1) * S, (P - 1) * S + L), max=n - 1).float()
        if p.shape != (P, L) or not in_bounds or not torch.equal(p[-1], expect_last):
            bad += 1
    verdict("A8", bad == 0, f"{trials - bad}/{trials} fuzzed (n, L, S) cases")


# ---- synthetic end-to-end ----------------------------------------------------

SEEDS = (0, 1, 2)
SYN_MODEL = TsfeConfig(lookback=48, horizon=24, channels=3, model_dim=32, num_heads=4, num_operators=2)
EXPERTS = dict(k=5, epochs=10, lr=0.05, batch_size=128)
DOWNSTREAM = dict(epochs=200, lr=0.05, batch_size=32)
CONDENSE = CondenseConfig(outer_steps=200, inner_steps=16, expert_steps=2, inner_lr=0.05, condensed_lr=10.0,
                          n=100, lambda_task=1.0, lambda_fre=0.05, lambda_tmm=1.0, kernel=5, original_batch_size=32)


@lru_cache(maxsize=None)
def synthetic():
    torch.set_num_threads(1)
    ds = synthetic_series(20_000, 3, noise=0.1, seed=0)
    train, _, test = split_chronological(ds)
    windows = make_windows(standardize(train, train), 48, 24, 1)
    test_windows = make_windows(standardize(test, train), 48, 24, 1)
    t = time.perf_counter()
    buf = train_experts(windows, SYN_MODEL, seed=100, **EXPERTS)
    return windows, test_windows, buf, time.perf_counter() - t


@lru_cache(maxsize=None)
def condensed(seed, **overrides):
    windows, _, buf, _ = synthetic()
    t = time.perf_counter()
    S, _ = condense(windows, buf, replace(CONDENSE, seed=seed, **overrides), SYN_MODEL)
    return S, time.perf_counter() - t


def _fit(data, seed, model=SYN_MODEL):
    _, test, _, _ = synthetic()
    return evaluate(train_downstream(data, model, seed=seed, **DOWNSTREAM), test).mse


@lru_cache(maxsize=None)
def random_mse(seed, n=100, model=SYN_MODEL):
    windows = synthetic()[0]
    return _fit(windows.subset(random_coreset(windows, n, seed).indices), seed, model)


@lru_cache(maxsize=None)
def condensed_mse(seed, model=SYN_MODEL, **overrides):
    return _fit(condensed(seed, **overrides)[0], seed, model)


@pytest.mark.slow
def test_a5_end_to_end(verdict):
    t = time.perf_counter()
    cond = [condensed_mse(s) for s in SEEDS]
    rand = [random_mse(s) for s in SEEDS]
    secs = time.perf_counter() - t + synthetic()[3]
    gain = 1 - np.median(cond) / np.median(rand)
    verdict("A5", gain >= 0.10 and secs < 45 * 60,
            f"median mse condensed {np.median(cond):.4f} random {np.median(rand):.4f} "
            f"improvement {gain:.1%} {secs / 60:.1f} min")


@pytest.mark.slow
def test_a6_ablations(verdict):
    full = np.median([condensed_mse(s) for s in SEEDS])
    no_tmm = np.median([condensed_mse(s, lambda_tmm=0.0) for s in SEEDS])
    no_fre = np.median([condensed_mse(s, lambda_fre=0.0) for s in SEEDS])
    verdict("A6", no_tmm > full and no_fre > full,
            f"median mse full {full:.4f} without-tmm {no_tmm:.4f} without-fre {no_fre:.4f}")


@pytest.mark.slow
def test_a9_cross_architecture(verdict):
    parts, ok = [], True
    for name, variant in (("depth-4", replace(SYN_MODEL, num_operators=4)),
                          ("width-2x", replace(SYN_MODEL, model_dim=64))):
        c = np.median([condensed_mse(s, model=variant) for s in SEEDS])
        r = np.median([random_mse(s, model=variant) for s in SEEDS])
        ok &= c < r
        parts.append(f"{name} condensed {c:.4f} random {r:.4f}")
    verdict("A9", ok, "; ".join(parts))


@pytest.mark.slow
def test_a10_size_trend(verdict):
    med = [np.median([condensed_mse(s) if n == 100 else condensed_mse(s, n=n) for s in SEEDS]) for n in (25, 50, 100)]
    rises = [(b - a) / a for a, b in zip(med, med[1:]) if b > a]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.02)
    verdict("A10", ok, "median mse " + " ".join(f"N={n}:{m:.4f}" for n, m in zip((25, 50, 100), med)))


@pytest.mark.slow
def test_a11_streaming(verdict):
    torch.set_num_threads(1)
    model = TsfeConfig(lookback=24, horizon=12, channels=2, model_dim=16, num_heads=2, num_operators=1,
                       patch_len=8, patch_stride=4)
    setup = StreamSetup(
        model=model,
        condense=CondenseConfig(outer_steps=30, inner_steps=8, n=32, inner_lr=0.05, condensed_lr=1.0, lambda_fre=0.05,
                                kernel=3, original_batch_size=32),
        train=TrainSettings(epochs=60, lr=0.05, batch_size=32),
        experts=2,
        expert_epochs=4,
        expert_lr=0.05,
        stride=4,
    )
    replay, plain = [], []
    for s in SEEDS:
        ds = two_regime_series(4000, 2, seed=s)
        replay.append(stream_eval(ds, setup, seed=s)["B1"].mse)
        plain.append(stream_eval(ds, replace(setup, replay=False), seed=s)["B1"].mse)
    r, p = np.median(replay), np.median(plain)
    verdict("A11", r < p, f"median B1 mse replay {r:.4f} fine-tune {p:.4f}")


def _cli_run(root):
    cfg = {
        "model": {"lookback": 24, "horizon": 12, "patch_len": 8, "patch_stride": 4, "num_operators": 1,
                  "num_heads": 2, "model_dim": 8},
        "data": {"drop_first_column": True, "window_stride": 4},
        "experts": {"k": 2, "epochs": 3},
        "condense": {"kernel": 3, "inner_steps": 2, "outer_steps": 3, "n": 16},
        "train": {"epochs": 3},
    }
    root.mkdir()
    (root / "cfg.json").write_text(json.dumps(cfg))
    out = root / "run"
    common = ["--config", str(root / "cfg.json"), "--data", str(toy_csv_path()), "--seed", "0", "--out", str(out)]
    codes = [
        run(["train-experts", *common]),
        run(["condense", *common, "--buffer", str(out / "buffer.tdcb")]),
        run(["train-eval", *common, "--train-source", "tdcs", "--source", str(out / "condensed.tdcs")]),
        run(["train-eval", *common, "--train-source", "csv"]),
        run(["report", "--run-dir", str(out)]),
    ]
    return codes, out


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in ("train_seconds", "out")}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _artifacts(out):
    found = {}
    for f in sorted(out.iterdir()):
        if f.suffix == ".json":
            found[f.name] = _strip_timing(json.loads(f.read_text()))
        elif f.suffix == ".csv" and f.name == "report.csv":
            rows = f.read_text().splitlines()
            cols = rows[0].split(",")
            keep = [i for i, c in enumerate(cols) if c != "train_seconds"]
            found[f.name] = [[r.split(",")[i] for i in keep] for r in rows]
        elif f.suffix in (".csv", ".jsonl", ".tdcb", ".tdcs"):
            found[f.name] = zlib.crc32(f.read_bytes())
    return found


def test_a12_cli(verdict, tmp_path):
    codes_a, out_a = _cli_run(tmp_path / "a")
    codes_b, out_b = _cli_run(tmp_path / "b")
    arts_a, arts_b = _artifacts(out_a), _artifacts(out_b)
    rows = json.loads((out_a / "report.json").read_text())
    valid = {r["method"] for r in rows} == {"full", "condensed"} and all(math.isfinite(r["mse"]) for r in rows)
    ok = codes_a == codes_b == [0] * 5 and valid and arts_a == arts_b and "buffer.tdcb" in arts_a
    verdict("A12", ok, f"exit codes {codes_a} artifacts {len(arts_a)} deterministic={arts_a == arts_b}")
