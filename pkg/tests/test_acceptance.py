"""Acceptance criteria 1-12.

Each test prints one ``CRITERION n: PASS|FAIL  detail`` line (visible even
under captured output) and then asserts. Run directly with
``python3 tests/test_acceptance.py`` to get only the report.

The long runs (overfit, synergy, masking harness) are cached per session so
criterion 3 can audit every step they logged.
"""

from __future__ import annotations

import functools
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from prefixmm import diagnostics
from prefixmm.data.synthetic import generate_pairs
from prefixmm.model import ModelConfig
from prefixmm.objectives import Batch, ObjectiveConfig, Pair, PrefixSplit, plan_splits
from prefixmm.seeding import stream
from prefixmm.text_tokenizer import build_vocab
from prefixmm.training import (TrainConfig, Trainer, TrainingData, adamw_step, build_model, caption,
                               corpus_bleu, evaluate, lr_at, paint, restore_trainer, save_checkpoint,
                               warmup_steps)
from prefixmm.vq import VQConfig, VQTokenizer, nearest_code, train_vq

GRAD_TOL = 1e-4
GRAD_SEEDS = 20
GRAD_BUDGET_S = 120.0
OVERFIT_PAIRS, OVERFIT_STEPS, OVERFIT_LOSS, OVERFIT_BUDGET_S = 16, 2000, 0.05, 15 * 60
HELD_OUT = 64
SYNERGY_TRAIN, SYNERGY_STEPS = 128, 400
MASK_STEPS, MASK_WINDOW = 500, 100
VQ_MSE = 0.01
RATIO_SAMPLES, RATIO_MEAN, KS_MAX = 10_000, (0.48, 0.52), 0.02


def report(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    capman = _capture_manager()
    if capman is not None:
        with capman.global_and_fixture_disabled():
            print(line, flush=True)
    else:
        print(line, flush=True)


_CONFIG = None


def _capture_manager():
    return _CONFIG.pluginmanager.getplugin("capturemanager") if _CONFIG is not None else None


@pytest.fixture(scope="session", autouse=True)
def _grab_config(pytestconfig):
    global _CONFIG
    _CONFIG = pytestconfig
    yield
    _CONFIG = None


# -- shared fixtures (cached) ----------------------------------------------------------

@functools.lru_cache(maxsize=None)
def corpus(n: int, skip: int = 0):
    raw = generate_pairs(n, seed=0, skip=skip)
    return np.stack([img for img, _ in raw]).astype(np.float32), [c for _, c in raw]


@functools.lru_cache(maxsize=None)
def vq16():
    images, _ = corpus(OVERFIT_PAIRS)
    t = time.time()
    tok, log = train_vq(images, VQConfig(), seed=0)
    return tok, log, time.time() - t


@functools.lru_cache(maxsize=None)
def vocab():
    # every caption the acceptance runs can see
    _, caps = corpus(SYNERGY_TRAIN + HELD_OUT)
    return build_vocab(caps, 512)


def make_pairs(images, caps, tok):
    grids = tok.encode_image(images)
    return [Pair(i, g, np.asarray(vocab().encode(c), dtype=np.int64)) for i, g, c in zip(images, grids, caps)]


def desk_model_config(tok) -> ModelConfig:
    return ModelConfig.desk(text_vocab=len(vocab()), image_vocab=tok.config.codebook_size,
                            image_grid=tok.config.grid, image_size=tok.config.image_size)


@functools.lru_cache(maxsize=None)
def overfit_run():
    tok, _, _ = vq16()
    pairs = make_pairs(*corpus(OVERFIT_PAIRS), tok)
    model = build_model(desk_model_config(tok), 0)
    tr = Trainer(model, TrainingData.from_examples(pairs), TrainConfig.desk(steps=OVERFIT_STEPS, seed=0))
    t = time.time()
    log = tr.run()
    model.eval()
    caps = caption(model, pairs)
    grids = paint(model, [p.caption for p in pairs])
    elapsed = time.time() - t
    cap_ok = sum(np.array_equal(h, p.caption) for h, p in zip(caps, pairs))
    grid_ok = sum(np.array_equal(g, p.tokens) for g, p in zip(grids, pairs))
    return log, cap_ok, grid_ok, elapsed


@functools.lru_cache(maxsize=None)
def synergy_runs():
    tok, _, _ = vq16()
    images, caps = corpus(SYNERGY_TRAIN + HELD_OUT)
    train = make_pairs(images[:SYNERGY_TRAIN], caps[:SYNERGY_TRAIN], tok)
    held = make_pairs(images[SYNERGY_TRAIN:], caps[SYNERGY_TRAIN:], tok)
    out = {}
    for objectives in (("plm", "pim"), ("plm",), ("pim",)):
        model = build_model(desk_model_config(tok), 0)
        tr = Trainer(model, TrainingData.from_examples(train),
                     TrainConfig.desk(steps=SYNERGY_STEPS, seed=0, objectives=objectives))
        log = tr.run()
        metrics = evaluate(model, held, prefix_mode="dynamic", seed=1, bleu=False)
        out["+".join(objectives)] = (log, metrics)
    return out


class RecordingTrainer(Trainer):
    """Keeps the masked-cell count of every PIM example it trains on."""

    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.masked_counts: list[list[int]] = []

    def compute_loss(self, step):
        from prefixmm.objectives import unified_loss

        batch, pair_rngs, text_rngs = self.next_batch(step)
        plan = plan_splits(batch, self.obj, self.model.config.image_tokens, pair_rngs, text_rngs)
        self.masked_counts.append([int(m.sum()) for m in plan.pim_masks])
        self.model.dropout_rng = stream(self.cfg.seed, "dropout", step)
        return unified_loss(self.model, batch, self.obj, plan)


@functools.lru_cache(maxsize=None)
def masking_runs():
    tok, _, _ = vq16()
    pairs = make_pairs(*corpus(OVERFIT_PAIRS), tok)
    out = {}
    for strategy in ("suffix", "mim", "inpaint"):
        model = build_model(desk_model_config(tok), 0)
        tr = RecordingTrainer(model, TrainingData.from_examples(pairs),
                              TrainConfig.desk(steps=MASK_STEPS, batch_size=8, seed=0, mask_strategy=strategy))
        out[strategy] = (tr.run(), tr.masked_counts)
    return out


@functools.lru_cache(maxsize=None)
def t2t_run():
    tok, _, _ = vq16()
    pairs = make_pairs(*corpus(OVERFIT_PAIRS), tok)
    _, caps = corpus(32, skip=OVERFIT_PAIRS)
    texts = [np.asarray(vocab().encode(c), dtype=np.int64) for c in caps]
    model = build_model(desk_model_config(tok), 0)
    tr = Trainer(model, TrainingData.from_examples(pairs, texts),
                 TrainConfig.desk(steps=20, batch_size=4, seed=0, objectives=("plm", "pim", "t2t")))
    return tr.run()


# -- criteria --------------------------------------------------------------------------

def criterion_1():
    t = time.time()
    checks = diagnostics.gradient_checks(range(GRAD_SEEDS))
    elapsed = time.time() - t
    worst = max(checks, key=lambda c: float(c.detail.split()[-1]))
    failed = [c.name for c in checks if not c.passed]
    ok = not failed and elapsed < GRAD_BUDGET_S
    composed = sum(c.name.endswith("_loss") for c in checks)
    return ok, (f"{len(checks) - composed} primitives + {composed} composed losses x {GRAD_SEEDS} seeds, "
                f"worst {worst.name} {worst.detail}, {elapsed:.0f}s" + (f"; failed {failed}" if failed else ""))


def criterion_2():
    tok, _, _ = vq16()
    checks = diagnostics.degeneracy_checks(seed=0) + diagnostics.degeneracy_checks(seed=1, base=desk_model_config(tok))
    failed = [c for c in checks if not c.passed]
    return not failed, f"{len(checks)} bitwise comparisons (3 visual variants, toy + desk)" + \
        (f"; mismatches {[(c.name, c.detail) for c in failed]}" if failed else "")


def criterion_3():
    logs = {"overfit": overfit_run()[0], "t2t": t2t_run()}
    for name, (log, _) in synergy_runs().items():
        logs[f"synergy[{name}]"] = log
    for name, (log, _) in masking_runs().items():
        logs[f"masking[{name}]"] = log
    bad = []
    steps = 0
    for name, log in logs.items():
        for rec in log:
            steps += 1
            parts = np.float32(rec["plm"]) + np.float32(rec["pim"]) + np.float32(rec["t2t"])
            if np.float32(rec["total"]) - parts != 0:
                bad.append((name, rec["step"]))
    return not bad, f"{steps} logged steps over {len(logs)} runs" + (f"; non-zero residual at {bad[:5]}" if bad else "")


def criterion_4():
    tok, _, _ = vq16()
    c = diagnostics.causality_check(length=16, seed=0, cfg=desk_model_config(tok))
    return c.passed, f"desk model, {c.detail}"


def criterion_5():
    log, cap_ok, grid_ok, elapsed = overfit_run()
    final = log[-1]["total"]
    first_below = next((r["step"] for r in log if r["total"] < OVERFIT_LOSS), None)
    ok = final < OVERFIT_LOSS and cap_ok == OVERFIT_PAIRS and grid_ok == OVERFIT_PAIRS and elapsed < OVERFIT_BUDGET_S
    return ok, (f"final total {final:.4f} (first < {OVERFIT_LOSS} at step {first_below}), captions {cap_ok}/16, "
                f"grids {grid_ok}/16, {elapsed:.0f}s")


def criterion_6():
    runs = synergy_runs()
    joint = runs["plm+pim"][1]
    plm, pim = runs["plm"][1], runs["pim"][1]
    ok = joint["text_ce"] < min(plm["text_ce"], pim["text_ce"]) and \
        joint["image_ce"] < min(plm["image_ce"], pim["image_ce"])
    fmt = lambda m: f"text {m['text_ce']:.3f} / image {m['image_ce']:.3f}"  # noqa: E731
    return ok, (f"held-out {HELD_OUT} pairs, {SYNERGY_STEPS} steps each: plm+pim {fmt(joint)}; "
                f"plm {fmt(plm)}; pim {fmt(pim)}")


def criterion_7():
    runs = masking_runs()
    counts = {k: c for k, (_, c) in runs.items()}
    equal = counts["suffix"] == counts["mim"] == counts["inpaint"]
    details, ok = [], equal
    for name, (log, _) in runs.items():
        totals = np.array([r["total"] for r in log])
        finite = bool(np.all(np.isfinite(totals))) and len(totals) == MASK_STEPS
        windows = totals.reshape(-1, MASK_WINDOW).mean(axis=1)
        trend = bool(np.all(windows[1:] <= windows[:-1] * 1.05) and windows[-1] < windows[0])
        ok &= finite and trend
        details.append(f"{name} " + "->".join(f"{w:.2f}" for w in windows))
    cells = sum(map(sum, counts["suffix"]))
    return ok, f"masked cells equal across strategies: {equal} ({cells} per run); " + "; ".join(details)


def criterion_8():
    tok, _, secs = vq16()
    images, _ = corpus(OVERFIT_PAIRS)
    ids = tok.encode_image(images)
    mse = float(np.mean((tok.decode_tokens(ids) - images) ** 2))
    law = True
    for c, size in ((4, 32), (4, 16), (2, 8), (8, 64)):
        t = VQTokenizer(VQConfig(compression=c, image_size=size, hidden=8), seed=0)
        for h in (size, 2 * size):
            law &= t.encode_image(np.random.default_rng(h).uniform(size=(2, 3, h, h))).shape[1:] == ((h // c) ** 2,)
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(1000, 16))
    book = rng.normal(size=(64, 16))
    brute = np.array([min(range(64), key=lambda k: float(np.sum((f - book[k]) ** 2))) for f in feats])
    agree = int(np.sum(nearest_code(feats, book) == brute))
    ok = mse < VQ_MSE and law and agree == 1000
    return ok, f"c=4 K=64 MSE {mse:.2e} ({secs:.0f}s training), count law {law}, nearest code {agree}/1000"


def criterion_9():
    _, caps = corpus(OVERFIT_PAIRS)
    captions = [np.asarray(vocab().encode(c), dtype=np.int64) for c in caps]
    pairs = [Pair(np.zeros((3, 32, 32), np.float32), np.zeros(64, np.int64), c) for c in captions]
    texts = captions
    cfg = ObjectiveConfig(("plm", "pim", "t2t"))
    ratios, empty, splits = [], 0, 0
    step = 0
    while len(ratios) < RATIO_SAMPLES:
        step += 1
        plan = plan_splits(Batch(pairs, texts), cfg, 64, [stream(0, "split", step, i) for i in range(len(pairs))],
                           [stream(0, "split-text", step, i) for i in range(len(texts))])
        for s in plan.plm + plan.pim + plan.t2t:
            splits += 1
            empty += s.suffix_len < 1
        ratios.extend(s.ratio for s in plan.plm)
    ratios = np.array(ratios[:RATIO_SAMPLES])
    # boundary ratios on every short length
    for n in range(1, 40):
        for r in (0.0, 0.5, np.nextafter(1.0, 0.0)):
            splits += 1
            empty += PrefixSplit(r, n).suffix_len < 1
    ks = stats.kstest(ratios, "uniform").statistic
    mean = float(ratios.mean())
    ok = RATIO_MEAN[0] <= mean <= RATIO_MEAN[1] and ks < KS_MAX and empty == 0
    return ok, f"n={len(ratios)} mean {mean:.4f}, KS {ks:.4f}, empty suffixes {empty}/{splits}"


def criterion_10():
    total, peak, frac = 10_000, 2e-4, 0.02
    w = warmup_steps(total, frac)
    sched = (lr_at(0, total, peak, frac), lr_at(w, total, peak, frac), lr_at(total, total, peak, frac))
    p, g, lr, wd, b1, b2, eps = 0.7, -0.25, 3e-3, 0.01, 0.9, 0.999, 1e-8
    new, _, _ = adamw_step(np.float64(p), np.float64(g), np.float64(0), np.float64(0), 1, lr, b1, b2, eps, wd)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    want = p - lr * wd * p - lr * m_hat / (math.sqrt(v_hat) + eps)
    err = abs(float(new) - want)
    ok = sched == (0.0, peak, 0.0) and err <= 1e-12
    return ok, f"lr(0)={sched[0]}, lr({w})={sched[1]}, lr({total})={sched[2]}; AdamW |err| {err:.1e}"


def criterion_11():
    tok, _, _ = vq16()
    pairs = make_pairs(*corpus(OVERFIT_PAIRS), tok)
    data = TrainingData.from_examples(pairs)
    cfg = TrainConfig.desk(steps=6, batch_size=4, seed=5)
    ref = Trainer(build_model(desk_model_config(tok), 5), data, cfg)
    ref.run(3)
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(Path(d) / "mid.ckpt", ref)
        resumed, _ = restore_trainer(Path(d) / "mid.ckpt", data)
    a = ref.step()["total"]
    b = resumed.step()["total"]
    return a == b, f"step 4 loss uninterrupted {a!r} vs resumed {b!r}"


def criterion_12():
    refs = [c.split() for c in corpus(OVERFIT_PAIRS)[1]]
    same = corpus_bleu(refs, [[r] for r in refs])
    empty = corpus_bleu([[] for _ in refs], [[r] for r in refs])
    disjoint = corpus_bleu([[f"zz{i}" for i in range(len(r))] for r in refs], [[r] for r in refs])
    ok = same == 1.0 and empty == 0.0 and disjoint < 0.01
    return ok, f"identical {same}, empty {empty}, disjoint {disjoint:.2e}"


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 13)}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail = CRITERIA[n]()
    report(n, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for n, fn in CRITERIA.items():
        ok, detail = fn()
        report(n, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
