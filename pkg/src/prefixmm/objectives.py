"""Prefix splitting, image corruption and the PLM / PIM / text-to-text losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, ops
from .model import CrossModalModel
from .text_tokenizer import EOS, PAD

FILL_VALUE = 0.5
STRATEGIES = {
    "suffix": "suffix-painting",
    "suffix-painting": "suffix-painting",
    "mim": "random-patch",
    "random-patch": "random-patch",
    "inpaint": "span-inpainting",
    "span-inpainting": "span-inpainting",
}
OBJECTIVES = ("plm", "pim", "t2t")


# -- prefix splits ------------------------------------------------------------

def parse_prefix_mode(mode) -> float | None:
    """``"dynamic"`` -> None; ``"fixed:0.15"`` or a number -> that ratio."""
    if mode is None or mode == "dynamic":
        return None
    if isinstance(mode, str):
        if not mode.startswith("fixed:"):
            raise ValueError(f"prefix mode must be 'dynamic' or 'fixed:<r>', got {mode!r}")
        mode = float(mode.split(":", 1)[1])
    r = float(mode)
    if not 0.0 <= r < 1.0:
        raise ValueError(f"fixed prefix ratio must lie in [0, 1), got {r}")
    return r


def sample_prefix_ratio(rng: np.random.Generator, mode="dynamic") -> float:
    fixed = parse_prefix_mode(mode)
    if fixed is not None:
        return fixed
    return float(rng.random())


@dataclass(frozen=True)
class PrefixSplit:
    ratio: float
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("cannot split an empty sequence")
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"ratio {self.ratio} outside [0, 1)")

    @property
    def prefix_len(self) -> int:
        # clamp keeps at least one suffix token
        return min(math.floor(self.ratio * self.length), self.length - 1)

    @property
    def suffix_len(self) -> int:
        return self.length - self.prefix_len


def split_text(ids: Sequence[int], split: PrefixSplit) -> tuple[np.ndarray, np.ndarray]:
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("cannot split an empty token sequence")
    if split.length != len(ids):
        split = PrefixSplit(split.ratio, len(ids))
    k = split.prefix_len
    return ids[:k], ids[k:]


# -- image corruption -----------------------------------------------------------

def canonical_strategy(name: str) -> str:
    try:
        return STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown masking strategy {name!r}") from None


def mask_cells(num_cells: int, split: PrefixSplit, strategy: str,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Boolean mask over raster-ordered grid cells; exactly ``num_cells - prefix_len`` are True."""
    strategy = canonical_strategy(strategy)
    if split.length != num_cells:
        split = PrefixSplit(split.ratio, num_cells)
    count = split.suffix_len
    masked = np.zeros(num_cells, dtype=bool)
    if strategy == "suffix-painting" or count == num_cells:
        masked[num_cells - count:] = True
        return masked
    if rng is None:
        raise ValueError(f"{strategy} needs an rng")
    if strategy == "random-patch":
        masked[rng.choice(num_cells, size=count, replace=False)] = True
    else:
        # span may not touch the last cell, so it never coincides with suffix-painting
        start = int(rng.integers(0, num_cells - count))
        masked[start:start + count] = True
    return masked


def corrupt_image(img: np.ndarray, masked: np.ndarray, grid: int, fill: float = FILL_VALUE) -> np.ndarray:
    """Blank the pixels of masked grid cells (raster order) with ``fill``."""
    img = np.asarray(img)
    _, h, w = img.shape
    if h % grid or w % grid:
        raise ValueError(f"image {h}x{w} not divisible into a {grid}x{grid} grid")
    if masked.shape != (grid * grid,):
        raise ValueError("mask length does not match the grid")
    ch, cw = h // grid, w // grid
    out = img.copy()
    cells = out.reshape(3, grid, ch, grid, cw)
    rows, cols = np.divmod(np.flatnonzero(masked), grid)
    cells[:, rows, :, cols, :] = fill
    return out


def corrupt_tokens(tokens: np.ndarray, masked: np.ndarray, mask_id: int) -> np.ndarray:
    out = np.array(tokens, dtype=np.int64, copy=True)
    out[masked] = mask_id
    return out


# -- batch plumbing ----------------------------------------------------------------

@dataclass
class Pair:
    image: np.ndarray         # [3, H, W] in [0, 1]
    tokens: np.ndarray        # [m] clean image token ids from the frozen tokenizer
    caption: np.ndarray       # [n] text ids without EOS


@dataclass
class Batch:
    pairs: list[Pair]
    texts: list[np.ndarray] = field(default_factory=list)


def _pad(rows: Sequence[np.ndarray], value: int = PAD) -> tuple[np.ndarray, np.ndarray]:
    width = max((len(r) for r in rows), default=0)
    out = np.full((len(rows), width), value, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
        mask[i, :len(r)] = True
    return out, mask


def _suffix_ce(model: CrossModalModel, state, targets: Sequence[np.ndarray],
               positions: Sequence[np.ndarray], modality: str, return_logits: bool = False):
    """Token-mean cross-entropy of teacher-forced suffixes.

    With ``return_logits`` also returns the [tokens, slice] logits of real
    (non-padding) suffix positions and their targets.
    """
    tgt, valid = _pad(targets)
    pos, _ = _pad(positions, 0)
    logits = model.decode_train(state, tgt, modality, pos)
    width = logits.shape[-1]
    flat = ops.reshape(logits, (-1, width))
    idx = np.flatnonzero(valid.reshape(-1))
    picked = ops.getitem(flat, idx)
    labels = tgt.reshape(-1)[idx]
    loss = ops.softmax_cross_entropy(picked, labels)
    return (loss, picked, labels) if return_logits else loss


def with_eos(ids: np.ndarray) -> np.ndarray:
    return np.append(np.asarray(ids, dtype=np.int64), EOS)


def visual_input(model: CrossModalModel, pairs: Sequence[Pair], masks: Sequence[np.ndarray] | None):
    """Pixels (conv/patch) or token ids (token projection), corrupted where masked."""
    cfg = model.config
    if cfg.visual_embedder == "token":
        rows = [p.tokens if masks is None else corrupt_tokens(p.tokens, m, model.mask_token)
                for p, m in zip(pairs, masks or [None] * len(pairs))]
        return np.stack(rows)
    imgs = [p.image if masks is None else corrupt_image(p.image, m, cfg.image_grid)
            for p, m in zip(pairs, masks or [None] * len(pairs))]
    return np.stack(imgs)


# -- losses ------------------------------------------------------------------------

def plm_loss(model: CrossModalModel, pairs: Sequence[Pair], splits: Sequence[PrefixSplit],
             return_logits: bool = False):
    """Recover caption suffixes from the full image and the caption prefix."""
    prefixes, suffixes, positions = [], [], []
    for p, s in zip(pairs, splits):
        w = with_eos(p.caption)
        pre, suf = split_text(w, s)
        prefixes.append(pre)
        suffixes.append(suf)
        positions.append(np.arange(len(pre), len(w)))
    text, text_mask = _pad(prefixes)
    visual = model.embed_image(visual_input(model, pairs, None))
    state = model.encode(visual, model.embed_text(text), text_mask)
    return _suffix_ce(model, state, suffixes, positions, "text", return_logits)


def pim_loss(model: CrossModalModel, pairs: Sequence[Pair], splits: Sequence[PrefixSplit],
             strategy: str = "suffix", rng: np.random.Generator | None = None,
             masks: Sequence[np.ndarray] | None = None, return_logits: bool = False):
    """Recover the clean tokens of masked cells from the full caption and the prefix image."""
    m = model.config.image_tokens
    if masks is None:
        masks = [mask_cells(m, s, strategy, rng) for s in splits]
    targets = [p.tokens[mk] for p, mk in zip(pairs, masks)]
    positions = [np.flatnonzero(mk) for mk in masks]
    text, text_mask = _pad([p.caption for p in pairs])
    visual = model.embed_image(visual_input(model, pairs, masks))
    state = model.encode(visual, model.embed_text(text), text_mask)
    return _suffix_ce(model, state, targets, positions, "image", return_logits)


def text2text_loss(model: CrossModalModel, texts: Sequence[np.ndarray], splits: Sequence[PrefixSplit],
                   return_logits: bool = False):
    """Prefix language modelling on text alone (no visual block)."""
    prefixes, suffixes, positions = [], [], []
    for ids, s in zip(texts, splits):
        w = with_eos(ids)
        pre, suf = split_text(w, s)
        prefixes.append(pre)
        suffixes.append(suf)
        positions.append(np.arange(len(pre), len(w)))
    text, text_mask = _pad(prefixes)
    state = model.encode(None, model.embed_text(text), text_mask)
    return _suffix_ce(model, state, suffixes, positions, "text", return_logits)


@dataclass(frozen=True)
class ObjectiveConfig:
    objectives: tuple[str, ...] = ("plm", "pim")
    prefix_mode: str = "dynamic"
    mask_strategy: str = "suffix"

    def __post_init__(self):
        bad = set(self.objectives) - set(OBJECTIVES)
        if bad or not self.objectives:
            raise ValueError(f"objectives must be a non-empty subset of {OBJECTIVES}, got {self.objectives}")
        parse_prefix_mode(self.prefix_mode)
        canonical_strategy(self.mask_strategy)


@dataclass
class BatchLoss:
    plm: Tensor | None
    pim: Tensor | None
    t2t: Tensor | None
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: (float(v.data) if v is not None else 0.0)
                for k, v in (("plm", self.plm), ("pim", self.pim), ("t2t", self.t2t), ("total", self.total))}


@dataclass
class SplitPlan:
    plm: list[PrefixSplit]
    pim: list[PrefixSplit]
    pim_masks: list[np.ndarray]
    t2t: list[PrefixSplit]


def plan_splits(batch: Batch, cfg: ObjectiveConfig, image_tokens: int,
                rngs: Sequence[np.random.Generator], text_rngs: Sequence[np.random.Generator] = ()) -> SplitPlan:
    """Independent PLM and PIM splits per pair, one rng per example."""
    plm, pim, masks = [], [], []
    for p, rng in zip(batch.pairs, rngs):
        plm.append(PrefixSplit(sample_prefix_ratio(rng, cfg.prefix_mode), len(p.caption) + 1))
        s = PrefixSplit(sample_prefix_ratio(rng, cfg.prefix_mode), image_tokens)
        pim.append(s)
        masks.append(mask_cells(image_tokens, s, cfg.mask_strategy, rng))
    t2t = [PrefixSplit(sample_prefix_ratio(rng, cfg.prefix_mode), len(ids) + 1)
           for ids, rng in zip(batch.texts, text_rngs)]
    return SplitPlan(plm, pim, masks, t2t)


def unified_loss(model: CrossModalModel, batch: Batch, cfg: ObjectiveConfig, plan: SplitPlan) -> BatchLoss:
    """total = plm + pim (+ t2t), each a token-mean over its lane."""
    if not batch.pairs and not batch.texts:
        raise ValueError("empty batch")
    plm = pim = t2t = None
    if "plm" in cfg.objectives and batch.pairs:
        plm = plm_loss(model, batch.pairs, plan.plm)
    if "pim" in cfg.objectives and batch.pairs:
        pim = pim_loss(model, batch.pairs, plan.pim, masks=plan.pim_masks)
    if "t2t" in cfg.objectives and batch.texts:
        t2t = text2text_loss(model, batch.texts, plan.t2t)
    parts = [x for x in (plm, pim, t2t) if x is not None]
    if not parts:
        raise ValueError("no enabled objective has data in this batch")
    total = parts[0]
    for x in parts[1:]:
        total = total + x
    return BatchLoss(plm, pim, t2t, total)
