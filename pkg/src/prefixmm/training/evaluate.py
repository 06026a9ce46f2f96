"""Greedy captioning / painting and teacher-forced evaluation metrics."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from ..autodiff import no_grad
from ..model import CrossModalModel
from ..objectives import (Pair, PrefixSplit, _pad, plm_loss, pim_loss, sample_prefix_ratio, mask_cells,
                          visual_input)
from ..seeding import stream
from .metrics import corpus_bleu


def caption(model: CrossModalModel, pairs: Sequence[Pair], strategy: str = "greedy", top_k: int = 0,
            temperature: float = 1.0, rng: np.random.Generator | None = None,
            max_steps: int | None = None) -> list[np.ndarray]:
    """Captions from the image alone (empty text prefix)."""
    with no_grad():
        visual = model.embed_image(visual_input(model, pairs, None))
        empty = np.zeros((len(pairs), 0), dtype=np.int64)
        state = model.encode(visual, model.embed_text(empty), empty.astype(bool))
        return model.generate(state, "text", max_steps=max_steps, strategy=strategy, top_k=top_k,
                              temperature=temperature, rng=rng)


def paint(model: CrossModalModel, captions: Sequence[np.ndarray], strategy: str = "greedy", top_k: int = 0,
          temperature: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Token grids [B, image_tokens] from captions, starting from a fully masked canvas."""
    cfg = model.config
    for c in captions:
        if len(c) == 0:
            raise ValueError("caption tokenizes to an empty sequence")
    blank = np.zeros((cfg.image_tokens,), dtype=np.int64)
    canvas = Pair(np.zeros((3, cfg.image_size, cfg.image_size), dtype=np.float32), blank, blank)
    masks = [np.ones(cfg.image_tokens, dtype=bool)] * len(captions)
    with no_grad():
        visual = model.embed_image(visual_input(model, [canvas] * len(captions), masks))
        text, text_mask = _pad(list(captions))
        state = model.encode(visual, model.embed_text(text), text_mask)
        rows = model.generate(state, "image", strategy=strategy, top_k=top_k, temperature=temperature, rng=rng)
    return np.stack(rows)


def _teacher_forced(loss_fn, model, pairs, splits, **kw) -> tuple[float, float, int]:
    """(mean CE, accuracy, token count) of one teacher-forced pass."""
    with no_grad():
        loss, logits, labels = loss_fn(model, pairs, splits, return_logits=True, **kw)
    pred = np.argmax(logits.data, axis=-1)
    return float(loss.data), float(np.mean(pred == labels)), int(labels.size)


def evaluate(model: CrossModalModel, pairs: Sequence[Pair], vocab=None, prefix_mode: str = "dynamic",
             mask_strategy: str = "suffix", seed: int = 0, batch_size: int = 16, bleu: bool = True) -> dict:
    """Suffix accuracy / cross-entropy in both modalities plus BLEU@4 of greedy captions.

    Prefix ratios are drawn from a fixed evaluation stream so two models
    evaluated with the same seed see identical splits.
    """
    if not pairs:
        raise ValueError("evaluation set is empty")
    was_training = model.training
    model.eval()
    m = model.config.image_tokens
    sums = {"text_ce": 0.0, "text_acc": 0.0, "image_ce": 0.0, "image_acc": 0.0}
    counts = {"text": 0, "image": 0}
    hyps, refs = [], []
    try:
        for start in range(0, len(pairs), batch_size):
            chunk = list(pairs[start:start + batch_size])
            rngs = [stream(seed, "eval-split", start + i) for i in range(len(chunk))]
            tsplits = [PrefixSplit(sample_prefix_ratio(r, prefix_mode), len(p.caption) + 1) for p, r in zip(chunk, rngs)]
            isplits = [PrefixSplit(sample_prefix_ratio(r, prefix_mode), m) for r in rngs]
            masks = [mask_cells(m, s, mask_strategy, r) for s, r in zip(isplits, rngs)]
            for name, fn, splits, kw in (("text", plm_loss, tsplits, {}), ("image", pim_loss, isplits, {"masks": masks})):
                ce, acc, n = _teacher_forced(fn, model, chunk, splits, **kw)
                sums[f"{name}_ce"] += ce * n
                sums[f"{name}_acc"] += acc * n
                counts[name] += n
            if bleu:
                for p, h in zip(chunk, caption(model, chunk)):
                    hyps.append(_words(h, vocab))
                    refs.append([_words(p.caption, vocab)])
    finally:
        model.train(was_training)
    out = {k: v / counts[k.split("_")[0]] for k, v in sums.items()}
    out["text_perplexity"] = math.exp(out["text_ce"])
    if bleu:
        out["bleu4"] = corpus_bleu(hyps, refs)
    return out


def _words(ids: np.ndarray, vocab) -> list[str]:
    if vocab is None:
        return [str(int(i)) for i in ids]
    return vocab.decode(ids).split()
