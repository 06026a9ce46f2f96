"""Encoder-decoder network over concatenated visual and text embeddings."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .. import nn
from ..autodiff import Tensor, no_grad, ops
from ..text_tokenizer import BOS, EOS
from .config import ModelConfig


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype):
        self.q = nn.Linear(d, d, rng, dtype=dtype)
        self.k = nn.Linear(d, d, rng, dtype=dtype)
        self.v = nn.Linear(d, d, rng, dtype=dtype)
        self.o = nn.Linear(d, d, rng, dtype=dtype)
        self.heads = heads

    def _split(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        return ops.transpose(ops.reshape(x, (b, t, self.heads, d // self.heads)), (0, 2, 1, 3))

    def project_kv(self, memory: Tensor) -> tuple[Tensor, Tensor]:
        return self._split(self.k(memory)), self._split(self.v(memory))

    def __call__(self, x: Tensor, memory: Tensor | None = None, mask: np.ndarray | None = None,
                 kv: tuple[Tensor, Tensor] | None = None) -> Tensor:
        """``mask`` broadcasts to [B, heads, Tq, Tk]; True means attend."""
        b, t, d = x.shape
        q = self._split(self.q(x))
        k, v = kv if kv is not None else self.project_kv(x if memory is None else memory)
        scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.heads))
        probs = ops.softmax(scores, axis=-1, mask=mask)
        ctx = ops.matmul(probs, v)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return self.o(ctx)


class FeedForward(nn.Module):
    def __init__(self, d: int, f: int, rng, dtype):
        self.up = nn.Linear(d, f, rng, dtype=dtype)
        self.down = nn.Linear(f, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(ops.gelu(self.up(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.ln1 = nn.LayerNorm(cfg.d_model, cfg.ln_eps, dtype)
        self.attn = Attention(cfg.d_model, cfg.heads, rng, dtype)
        self.ln2 = nn.LayerNorm(cfg.d_model, cfg.ln_eps, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn, rng, dtype)

    def __call__(self, x: Tensor, mask, drop) -> Tensor:
        x = x + drop(self.attn(self.ln1(x), mask=mask))
        return x + drop(self.ffn(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.ln1 = nn.LayerNorm(cfg.d_model, cfg.ln_eps, dtype)
        self.self_attn = Attention(cfg.d_model, cfg.heads, rng, dtype)
        self.ln2 = nn.LayerNorm(cfg.d_model, cfg.ln_eps, dtype)
        self.cross_attn = Attention(cfg.d_model, cfg.heads, rng, dtype)
        self.ln3 = nn.LayerNorm(cfg.d_model, cfg.ln_eps, dtype)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn, rng, dtype)

    def __call__(self, x: Tensor, memory: Tensor, self_mask, mem_mask, drop, kv=None) -> Tensor:
        x = x + drop(self.self_attn(self.ln1(x), mask=self_mask))
        x = x + drop(self.cross_attn(self.ln2(x), memory=memory, mask=mem_mask, kv=kv))
        return x + drop(self.ffn(self.ln3(x)))


class ConvStem(nn.Module):
    """3x3 conv stages with ReLU between them: one stride-2 stage per factor
    of two in ``stem_stride``, padded with stride-1 stages up to three."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        chans = cfg.stem_plan()
        self.stages = [nn.Conv2d(cin, cout, 3, rng, stride=st, padding=1, dtype=dtype)
                       for cin, cout, st in chans]

    def __call__(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.stages):
            x = conv(x if i == 0 else ops.relu(x))
        return x


class EncoderState:
    """Hidden states H [B, l, d] with a key mask [B, l] (True = real position)."""

    def __init__(self, hidden: Tensor, mask: np.ndarray):
        self.hidden = hidden
        self.mask = mask

    @property
    def length(self) -> int:
        return self.hidden.shape[1]


class CrossModalModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        # text embedder: t_i = LayerNorm(e_i + p_i)
        self.tok_embed = nn.Embedding(cfg.text_vocab, d, rng, dtype=dtype)
        self.text_pos = nn.Embedding(cfg.max_len, d, rng, dtype=dtype)
        self.text_ln = nn.LayerNorm(d, cfg.ln_eps, dtype)
        # visual embedder: v_i = f_i + p_i
        if cfg.visual_embedder == "conv":
            self.stem = ConvStem(cfg, rng, dtype)
        elif cfg.visual_embedder == "patch":
            self.patch_proj = nn.Linear(3 * cfg.patch_size ** 2, d, rng, dtype=dtype)
        else:
            # last row embeds the mask id for corrupted cells
            self.code_embed = nn.Embedding(cfg.image_vocab + 1, d, rng, dtype=dtype)
        self.visual_pos = nn.Embedding(cfg.num_visual, d, rng, dtype=dtype)
        self.encoder = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.enc_layers)]
        self.enc_ln = nn.LayerNorm(d, cfg.ln_eps, dtype)
        self.dec_embed = nn.Embedding(cfg.out_vocab + 1, d, rng, dtype=dtype)
        self.dec_pos = nn.Embedding(cfg.max_len, d, rng, dtype=dtype)
        self.decoder = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.dec_layers)]
        self.dec_ln = nn.LayerNorm(d, cfg.ln_eps, dtype)
        self.head = nn.Linear(d, cfg.out_vocab, rng, dtype=dtype)
        self.dropout_rng: np.random.Generator | None = None

    @property
    def mask_token(self) -> int:
        return self.config.image_vocab

    def _drop(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.config.dropout, self.dropout_rng, self.training)

    # -- embeddings -------------------------------------------------------------
    def embed_text(self, ids: np.ndarray) -> Tensor:
        """Token ids [B, n] (or [n]) -> [B, n, d]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, n = ids.shape
        if n > self.config.max_len:
            raise ValueError(f"text length {n} exceeds max_len {self.config.max_len}")
        if n == 0:
            return Tensor(np.zeros((b, 0, self.config.d_model), dtype=self.dtype))
        e = self.tok_embed(ids)
        p = self.text_pos(np.arange(n))
        return self.text_ln(e + p)

    def embed_image(self, x: np.ndarray) -> Tensor:
        """Pixels [B,3,H,W] for conv/patch variants, token ids [B,m] for the token variant."""
        cfg = self.config
        arr = np.asarray(x)
        if cfg.visual_embedder == "token":
            if arr.ndim == 1:
                arr = arr[None]
            if arr.ndim != 2 or arr.shape[1] != cfg.num_visual:
                raise ValueError(f"token-projection expects [B,{cfg.num_visual}] ids, got {arr.shape}")
            feats = self.code_embed(arr.astype(np.int64))
        else:
            if arr.ndim == 3:
                arr = arr[None]
            if arr.ndim != 4 or arr.shape[1:] != (3, cfg.image_size, cfg.image_size):
                raise ValueError(f"expected [B,3,{cfg.image_size},{cfg.image_size}] pixels, got {arr.shape}")
            px = Tensor(arr.astype(self.dtype, copy=False))
            if cfg.visual_embedder == "conv":
                fmap = self.stem(px)
            else:
                fmap = self.patch_proj_map(px)
            b, d, h, w = fmap.shape
            # flatten along the spatial dimension, raster order
            feats = ops.transpose(ops.reshape(fmap, (b, d, h * w)), (0, 2, 1))
        return feats + self.visual_pos(np.arange(cfg.num_visual))

    def patch_proj_map(self, px: Tensor) -> Tensor:
        p = self.config.patch_size
        cols = ops.space_to_depth(px, p)  # [B, 3p^2, h, w]
        b, c, h, w = cols.shape
        flat = ops.transpose(ops.reshape(cols, (b, c, h * w)), (0, 2, 1))
        out = self.patch_proj(flat)  # [B, hw, d]
        return ops.reshape(ops.transpose(out, (0, 2, 1)), (b, -1, h, w))

    # -- encoder ------------------------------------------------------------------
    def encode(self, visual: Tensor | None, text: Tensor, text_mask: np.ndarray | None = None) -> EncoderState:
        """Fully-visible self-attention over X = [V, T]."""
        b, n, _ = text.shape
        if text_mask is None:
            text_mask = np.ones((b, n), dtype=bool)
        if visual is None or visual.shape[1] == 0:
            x, key_mask = text, np.asarray(text_mask, dtype=bool)
        else:
            x = ops.concat([visual, text], axis=1) if n else visual
            key_mask = np.concatenate([np.ones((b, visual.shape[1]), dtype=bool), text_mask], axis=1)
        if x.shape[1] > self.config.max_len:
            raise ValueError(f"encoder input length {x.shape[1]} exceeds max_len {self.config.max_len}")
        if x.shape[1] == 0:
            return EncoderState(Tensor(np.zeros((b, 0, self.config.d_model), dtype=self.dtype)), key_mask)
        mask = key_mask[:, None, None, :]
        h = self._drop(x)
        for layer in self.encoder:
            h = layer(h, mask, self._drop)
        return EncoderState(self.enc_ln(h), key_mask)

    # -- decoder ------------------------------------------------------------------
    def decoder_inputs(self, targets: np.ndarray, modality: str) -> np.ndarray:
        """Shift targets right behind the modality's BOS, in decoder-input id space."""
        cfg = self.config
        lo, hi = cfg.slice_of(modality)
        targets = np.asarray(targets, dtype=np.int64)
        if targets.size and (targets.min() < 0 or targets.max() >= hi - lo):
            raise ValueError(f"{modality} target ids outside [0, {hi - lo})")
        bos = BOS if modality == "text" else cfg.image_bos
        shifted = np.concatenate([np.full((targets.shape[0], 1), bos, dtype=np.int64),
                                  targets[:, :-1] + lo], axis=1)
        return shifted

    def _decode(self, state: EncoderState, dec_in: np.ndarray, positions: np.ndarray,
                modality: str, kv=None) -> Tensor:
        b, k = dec_in.shape
        if positions.max(initial=0) >= self.config.max_len:
            raise ValueError("decoder position exceeds max_len")
        x = self.dec_embed(dec_in) + self.dec_pos(positions)
        x = self._drop(x)
        causal = np.tril(np.ones((k, k), dtype=bool))[None, None]
        mem_mask = state.mask[:, None, None, :]
        for i, layer in enumerate(self.decoder):
            x = layer(x, state.hidden, causal, mem_mask, self._drop, kv=None if kv is None else kv[i])
        x = self.dec_ln(x)
        lo, hi = self.config.slice_of(modality)
        return ops.linear(x, self.head.weight[:, lo:hi], self.head.bias[lo:hi])

    def decode_train(self, state: EncoderState, targets: np.ndarray, modality: str,
                     positions: np.ndarray | None = None) -> Tensor:
        """Teacher-forced logits [B, k, slice] for targets [B, k] (ids local to the modality)."""
        targets = np.asarray(targets, dtype=np.int64)
        if targets.ndim == 1:
            targets = targets[None]
        dec_in = self.decoder_inputs(targets, modality)
        if positions is None:
            positions = np.broadcast_to(np.arange(targets.shape[1]), targets.shape)
        return self._decode(state, dec_in, np.asarray(positions, dtype=np.int64), modality)

    def generate(self, state: EncoderState, modality: str, max_steps: int | None = None,
                 strategy: str = "greedy", top_k: int = 0, temperature: float = 1.0,
                 rng: np.random.Generator | None = None, start_pos: int = 0) -> list[np.ndarray]:
        """Autoregressive decoding from BOS.

        Text stops at EOS (not included in the output) or ``max_steps``;
        image mode emits exactly ``image_tokens - start_pos`` codes.
        """
        cfg = self.config
        if modality == "image":
            steps = cfg.image_tokens - start_pos
        else:
            steps = max_steps if max_steps is not None else cfg.max_len - start_pos
        if steps < 1:
            raise ValueError("generation needs at least one step")
        if strategy not in ("greedy", "topk"):
            raise ValueError(f"unknown strategy {strategy!r}")
        sample = strategy == "topk" and temperature > 0
        if sample and rng is None:
            raise ValueError("sampling needs an rng")
        lo, _ = cfg.slice_of(modality)
        b = state.hidden.shape[0]
        bos = BOS if modality == "text" else cfg.image_bos
        dec_in = np.full((b, 1), bos, dtype=np.int64)
        out = np.zeros((b, 0), dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                kv = [layer.cross_attn.project_kv(state.hidden) for layer in self.decoder]
                for step in range(steps):
                    pos = np.broadcast_to(start_pos + np.arange(dec_in.shape[1]), dec_in.shape)
                    logits = self._decode(state, dec_in, pos, modality, kv=kv).data[:, -1, :].astype(np.float64)
                    if sample:
                        nxt = _sample_top_k(logits, top_k, temperature, rng)
                    else:
                        nxt = np.argmax(logits, axis=-1)
                    out = np.concatenate([out, nxt[:, None]], axis=1)
                    if modality == "text":
                        done |= nxt == EOS
                        if done.all():
                            break
                    dec_in = np.concatenate([dec_in, (nxt + lo)[:, None]], axis=1)
        finally:
            self.train(was_training)
        if modality == "image":
            return [row for row in out]
        results = []
        for row in out:
            stop = np.flatnonzero(row == EOS)
            results.append(row[: stop[0]] if stop.size else row)
        return results


def _sample_top_k(logits: np.ndarray, k: int, temperature: float, rng: np.random.Generator) -> np.ndarray:
    z = logits / temperature
    if 0 < k < z.shape[-1]:
        kth = np.sort(z, axis=-1)[:, -k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return np.array([rng.choice(p.shape[1], p=row) for row in p], dtype=np.int64)


def interpolate_positions(table: np.ndarray, new_len: int) -> np.ndarray:
    """Resample a [L, d] position table to ``new_len`` rows by 1-D linear interpolation."""
    table = np.asarray(table)
    length = table.shape[0]
    if length < 2:
        raise ValueError("need at least two rows to interpolate")
    if new_len < 1:
        raise ValueError("new_len must be >= 1")
    if new_len == length:
        return table.copy()
    src = np.linspace(0.0, length - 1, new_len) if new_len > 1 else np.array([0.0])
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, length - 1)
    frac = (src - lo)[:, None]
    return (1.0 - frac) * table[lo] + frac * table[hi]
