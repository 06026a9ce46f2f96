"""Invariant checks shared by the selftest command and the test suite.

Every check returns a :class:`Check` (name, passed, detail) rather than
raising, so a report can list all of them.
"""

from __future__ import annotations

import io
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import Tensor, finite_diff_check, ops
from .model import CrossModalModel, ModelConfig
from .objectives import (Pair, PrefixSplit, _pad, mask_cells, pim_loss, plm_loss, text2text_loss, with_eos)
from .text_tokenizer import BOS

GRAD_TOL = 1e-4


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    """Scalar test functions, one per differentiable primitive, over fresh float64 inputs."""
    x = _t(rng.normal(size=(3, 4)))
    y = _t(rng.normal(size=(3, 4)))
    pos = _t(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = rng.normal(size=(3, 4))
    g, b = _t(rng.normal(size=4)), _t(rng.normal(size=4))
    lw, lb = _t(rng.normal(size=(4, 5))), _t(rng.normal(size=5))
    table = _t(rng.normal(size=(5, 4)))
    img = _t(rng.normal(size=(1, 2, 6, 6)))
    kern = _t(rng.normal(size=(2, 2, 3, 3)))
    kb = _t(rng.normal(size=2))
    big = _t(rng.normal(size=(1, 2, 4, 4)))
    deep = _t(rng.normal(size=(1, 8, 2, 2)))
    cube = _t(rng.normal(size=(2, 3, 4)))
    targets = rng.integers(0, 4, size=3)
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    # keep relu/sqrt away from their kinks
    away = _t(np.sign(rng.normal(size=(3, 4))) * rng.uniform(0.2, 2.0, size=(3, 4)))
    drop_seed = int(rng.integers(2 ** 31))
    return {
        "add": (lambda: ((x + y) * w).sum(), [x, y]),
        "sub": (lambda: ((x - y) * w).sum(), [x, y]),
        "mul": (lambda: ((x * y) * w).sum(), [x, y]),
        "div": (lambda: ((x / pos) * w).sum(), [x, pos]),
        "neg": (lambda: ((-x) * w).sum(), [x]),
        "pow": (lambda: ((pos ** 1.5) * w).sum(), [pos]),
        "exp": (lambda: (ops.exp(x) * w).sum(), [x]),
        "log": (lambda: (ops.log(pos) * w).sum(), [pos]),
        "sqrt": (lambda: (ops.sqrt(pos) * w).sum(), [pos]),
        "tanh": (lambda: (ops.tanh(x) * w).sum(), [x]),
        "relu": (lambda: (ops.relu(away) * w).sum(), [away]),
        "gelu": (lambda: (ops.gelu(x) * w).sum(), [x]),
        "dropout": (lambda: (ops.dropout(x, 0.3, np.random.default_rng(drop_seed)) * w).sum(), [x]),
        "sum": (lambda: (x.sum(axis=1) ** 2).sum(), [x]),
        "mean": (lambda: (x.mean(axis=0) ** 2).sum(), [x]),
        "reshape": (lambda: (ops.reshape(x, (4, 3)) ** 2 * w.reshape(4, 3)).sum(), [x]),
        "transpose": (lambda: (ops.transpose(cube, (2, 0, 1)) ** 2).sum() + cube.sum(), [cube]),
        "swapaxes": (lambda: (ops.swapaxes(cube, 0, 2) * np.arange(24.0).reshape(4, 3, 2)).sum(), [cube]),
        "getitem": (lambda: (x[1:, ::2] ** 2).sum(), [x]),
        "getitem_fancy": (lambda: (x[np.array([0, 2, 2])] ** 2).sum(), [x]),
        "concat": (lambda: (ops.concat([x, y], axis=1) ** 2).sum(), [x, y]),
        "stack": (lambda: (ops.stack([x, y], axis=0) ** 3).sum(), [x, y]),
        "matmul": (lambda: (ops.matmul(x, y.transpose()) ** 2).sum(), [x, y]),
        "linear": (lambda: (ops.linear(x, lw, lb) ** 2).sum(), [x, lw, lb]),
        "layer_norm": (lambda: (ops.layer_norm(x, g, b) * w).sum(), [x, g, b]),
        "softmax": (lambda: (ops.softmax(x) * w).sum(), [x]),
        "softmax_masked": (lambda: (ops.softmax(x, mask=mask) * w).sum(), [x]),
        "log_softmax": (lambda: (ops.log_softmax(x) * w).sum(), [x]),
        "cross_entropy": (lambda: ops.softmax_cross_entropy(x, targets), [x]),
        "embedding": (lambda: (ops.embedding(table, [0, 4, 4]) * w).sum(), [table]),
        "conv2d": (lambda: (ops.conv2d(img, kern, kb, stride=1, padding=1) ** 2).sum(), [img, kern, kb]),
        "conv2d_stride2": (lambda: (ops.conv2d(img, kern, stride=2, padding=0) ** 2).sum(), [img, kern]),
        "space_to_depth": (lambda: (ops.space_to_depth(big, 2) * np.arange(32.0).reshape(1, 8, 2, 2)).sum() ** 2, [big]),
        "depth_to_space": (lambda: (ops.depth_to_space(deep, 2) * np.arange(32.0).reshape(1, 2, 4, 4)).sum() ** 2, [deep]),
    }


def tiny_config(visual_embedder: str = "conv", **kw) -> ModelConfig:
    base = dict(text_vocab=12, image_vocab=6, enc_layers=1, dec_layers=1, d_model=8, heads=2, ffn=16,
                max_len=24, image_size=8, visual_embedder=visual_embedder, patch_size=4, stem_channels=4,
                image_grid=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_pairs(cfg: ModelConfig, rng: np.random.Generator, n: int = 2) -> list[Pair]:
    out = []
    for _ in range(n):
        img = rng.uniform(0, 1, size=(3, cfg.image_size, cfg.image_size))
        tokens = rng.integers(0, cfg.image_vocab, size=cfg.image_tokens)
        cap = rng.integers(4, cfg.text_vocab, size=int(rng.integers(2, 6)))
        out.append(Pair(img, tokens, cap))
    return out


def composed_cases(seed: int, visual_embedder: str = "conv"):
    """PLM / PIM / t2t losses of a float64 toy model as functions of its parameters."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config(visual_embedder)
    model = CrossModalModel(cfg, seed=seed, dtype=np.float64)
    # the 0.02-std init leaves many gradients near 1e-7, where central
    # differences are roundoff-bound; wider weights give well-scaled gradients
    for _, p in model.named_parameters():
        if p.ndim > 1:
            p.data *= 15.0
    pairs = tiny_pairs(cfg, rng)
    plm_splits = [PrefixSplit(float(rng.random()), len(p.caption) + 1) for p in pairs]
    pim_splits = [PrefixSplit(float(rng.random()), cfg.image_tokens) for _ in pairs]
    masks = [mask_cells(cfg.image_tokens, s, "random-patch", rng) for s in pim_splits]
    texts = [rng.integers(4, cfg.text_vocab, size=4), rng.integers(4, cfg.text_vocab, size=2)]
    t2t_splits = [PrefixSplit(float(rng.random()), len(t) + 1) for t in texts]
    params = [p for _, p in model.named_parameters()]
    return {
        "plm_loss": (lambda: plm_loss(model, pairs, plm_splits), params),
        "pim_loss": (lambda: pim_loss(model, pairs, pim_splits, masks=masks), params),
        "t2t_loss": (lambda: text2text_loss(model, texts, t2t_splits), params),
    }


def gradient_checks(seeds=range(3), entries: int = 4) -> list[Check]:
    out = []
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cases = dict(primitive_cases(rng))
        cases.update(composed_cases(seed))
        for name, (f, xs) in cases.items():
            composed = name.endswith("_loss")
            # composed losses: a subset of entries per tensor, and a step large
            # enough that roundoff in the loss stays under the floor
            err = finite_diff_check(f, xs, h=1e-4 if composed else 1e-5, max_entries=entries if composed else None,
                                    rng=np.random.default_rng(seed))
            worst[name] = max(worst.get(name, 0.0), err)
    for name, err in worst.items():
        out.append(Check(f"gradcheck:{name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    return out


def causality_check(length: int = 16, seed: int = 0, cfg: ModelConfig | None = None) -> Check:
    cfg = cfg or tiny_config(max_len=32)
    model = CrossModalModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    pair = tiny_pairs(cfg, rng, 1)
    state = model.encode(model.embed_image(pair[0].image[None].astype(np.float32)),
                         model.embed_text(pair[0].caption[None]))
    dec_in = rng.integers(0, cfg.out_vocab + 1, size=(1, length))
    pos = np.arange(length)[None]
    base = model._decode(state, dec_in, pos, "text").data
    bad = []
    for t in range(length):
        alt = dec_in.copy()
        alt[0, t] = (alt[0, t] + 1) % (cfg.out_vocab + 1)
        logits = model._decode(state, alt, pos, "text").data
        if not np.array_equal(logits[:, :t], base[:, :t]):
            bad.append(t)
        if not np.any(logits[:, t:] != base[:, t:]):
            bad.append(-t - 1)
    return Check("causality", not bad, f"length {length}" + (f"; leaks at {bad}" if bad else ""))


def caption_pipeline(model: CrossModalModel, pairs: list[Pair]) -> Tensor:
    """Captioning loss assembled directly: image only in the encoder, whole caption+EOS as target."""
    vis = np.stack([p.image for p in pairs]) if model.config.visual_embedder != "token" \
        else np.stack([p.tokens for p in pairs])
    empty = np.zeros((len(pairs), 0), dtype=np.int64)
    state = model.encode(model.embed_image(vis), model.embed_text(empty), empty.astype(bool))
    targets, valid = _pad([with_eos(p.caption) for p in pairs])
    positions = np.broadcast_to(np.arange(targets.shape[1]), targets.shape)
    logits = model.decode_train(state, targets, "text", positions)
    flat = ops.reshape(logits, (-1, logits.shape[-1]))
    idx = np.flatnonzero(valid.reshape(-1))
    return ops.softmax_cross_entropy(ops.getitem(flat, idx), targets.reshape(-1)[idx])


def painting_pipeline(model: CrossModalModel, pairs: list[Pair], fill: float = 0.5) -> Tensor:
    """Text-to-image loss assembled directly: caption plus a blank canvas, every cell as target."""
    cfg = model.config
    if cfg.visual_embedder == "token":
        vis = np.full((len(pairs), cfg.image_tokens), model.mask_token, dtype=np.int64)
    else:
        vis = np.full((len(pairs), 3, cfg.image_size, cfg.image_size), fill, dtype=pairs[0].image.dtype)
    text, text_mask = _pad([p.caption for p in pairs])
    state = model.encode(model.embed_image(vis), model.embed_text(text), text_mask)
    targets = np.stack([p.tokens for p in pairs])
    positions = np.broadcast_to(np.arange(cfg.image_tokens), targets.shape)
    logits = model.decode_train(state, targets, "image", positions)
    return ops.softmax_cross_entropy(ops.reshape(logits, (-1, logits.shape[-1])), targets.reshape(-1))


def degeneracy_checks(seed: int = 0, base: ModelConfig | None = None) -> list[Check]:
    out = []
    for variant in ("conv", "patch", "token"):
        cfg = base.replace(visual_embedder=variant) if base else tiny_config(variant)
        model = CrossModalModel(cfg, seed=seed)
        pairs = [Pair(p.image.astype(np.float32), p.tokens, p.caption)
                 for p in tiny_pairs(cfg, np.random.default_rng(seed), 3)]
        zero_t = [PrefixSplit(0.0, len(p.caption) + 1) for p in pairs]
        zero_i = [PrefixSplit(0.0, cfg.image_tokens) for _ in pairs]
        a, b = float(plm_loss(model, pairs, zero_t).data), float(caption_pipeline(model, pairs).data)
        out.append(Check(f"degeneracy:plm=captioning[{variant}]", a == b, f"{a!r} vs {b!r}"))
        a, b = float(pim_loss(model, pairs, zero_i).data), float(painting_pipeline(model, pairs).data)
        out.append(Check(f"degeneracy:pim=painting[{variant}]", a == b, f"{a!r} vs {b!r}"))
    return out


def masking_budget_check(num_cells: int = 64, trials: int = 200, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        split = PrefixSplit(float(rng.random()), num_cells)
        counts = {s: int(mask_cells(num_cells, split, s, rng).sum())
                  for s in ("suffix-painting", "random-patch", "span-inpainting")}
        if len(set(counts.values())) != 1 or counts["suffix-painting"] != split.suffix_len:
            return Check("masking-budget", False, f"ratio {split.ratio}: {counts}")
    return Check("masking-budget", True, f"{trials} splits, 3 strategies")


def schedule_check() -> Check:
    from .training.optim import lr_at, warmup_steps

    total, peak, frac = 1000, 2e-4, 0.02
    w = warmup_steps(total, frac)
    lrs = np.array([lr_at(s, total, peak, frac) for s in range(total + 1)])
    ok = lrs[0] == 0.0 and lrs[w] == peak and lrs[-1] == 0.0
    ok &= int(np.sum(lrs == lrs.max())) == 1
    d = np.diff(lrs)
    ok &= bool(np.all(d[:w] > 0) and np.all(d[w:] < 0))
    ok &= bool(np.max(np.abs(np.diff(d[:w]))) < 1e-15 and np.max(np.abs(np.diff(d[w:]))) < 1e-15)
    return Check("schedule-shape", bool(ok), f"warmup {w} of {total}, peak {lrs.max():g}")


def adamw_check() -> Check:
    from .training.optim import adamw_step

    p, g, lr, wd, eps = 1.5, 0.3, 1e-2, 0.1, 1e-8
    new, _, _ = adamw_step(np.array(p), np.array(g), np.array(0.0), np.array(0.0), 1, lr, 0.9, 0.999, eps, wd)
    # first step: m_hat = g, v_hat = g^2
    want = p - lr * wd * p - lr * g / (abs(g) + eps)
    return Check("adamw-closed-form", abs(float(new) - want) <= 1e-12, f"{float(new)!r} vs {want!r}")


def bleu_check() -> Check:
    from .training.metrics import corpus_bleu

    ref = [["a", "red", "square", "above", "a", "blue", "circle"]]
    same = corpus_bleu(ref, [ref])
    empty = corpus_bleu([[]], [ref])
    disjoint = corpus_bleu([["x", "y", "z", "w"]], [[["a", "b", "c", "d"]]])
    ok = same == 1.0 and empty == 0.0 and disjoint < 0.01
    return Check("bleu", ok, f"identical {same}, empty {empty}, disjoint {disjoint}")


def checkpoint_check(seed: int = 0) -> Check:
    from .training import TrainConfig, Trainer, TrainingData, build_model, restore_trainer, save_checkpoint

    cfg = tiny_config()
    rng = np.random.default_rng(seed)
    pairs = [Pair(p.image.astype(np.float32), p.tokens, p.caption) for p in tiny_pairs(cfg, rng, 4)]
    data = TrainingData.from_examples(pairs)
    tc = TrainConfig(lr=1e-3, steps=6, batch_size=2, seed=seed, objectives=("plm", "pim"))
    ref = Trainer(build_model(cfg, seed), data, tc)
    for _ in range(3):
        ref.step()
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "mid.ckpt"
        save_checkpoint(path, ref)
        resumed, _ = restore_trainer(path, data)
    a, b = ref.step()["total"], resumed.step()["total"]
    return Check("checkpoint-roundtrip", a == b, f"{a!r} vs {b!r}")


def run_all(grad_seeds=range(3)) -> list[Check]:
    checks = gradient_checks(grad_seeds)
    checks.append(causality_check())
    checks.extend(degeneracy_checks())
    checks.append(masking_budget_check())
    checks.append(schedule_check())
    checks.append(adamw_check())
    checks.append(bleu_check())
    checks.append(checkpoint_check())
    return checks


def format_report(checks: list[Check]) -> str:
    width = max(len(c.name) for c in checks)
    buf = io.StringIO()
    for c in checks:
        buf.write(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.detail}\n")
    failed = sum(not c.passed for c in checks)
    buf.write(f"{len(checks) - failed}/{len(checks)} checks passed\n")
    return buf.getvalue()
