"""Discrete image tokenizer: conv encoder, nearest-code quantizer, sub-pixel conv decoder."""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .autodiff import Tensor, make, no_grad, ops
from .autodiff.serialize import FormatError, read_tensor, write_tensor
from .training.optim import AdamW

logger = logging.getLogger(__name__)

VQ_MAGIC = b"PMMVQ1\n"


@dataclass(frozen=True)
class VQConfig:
    codebook_size: int = 64
    compression: int = 4
    code_dim: int = 16
    beta: float = 0.25
    hidden: int = 64
    image_size: int = 32
    dead_code_patience: int = 1000

    def __post_init__(self):
        if self.codebook_size < 2:
            raise ValueError("codebook needs at least 2 codes")
        c = self.compression
        if c < 1 or c & (c - 1):
            raise ValueError(f"compression rate must be a power of two, got {c}")
        if self.beta <= 0:
            raise ValueError("commitment weight must be positive")
        if self.image_size % c:
            raise ValueError(f"image size {self.image_size} not divisible by compression {c}")

    @property
    def grid(self) -> int:
        return self.image_size // self.compression

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @classmethod
    def full(cls) -> "VQConfig":
        return cls(codebook_size=1024, compression=16, code_dim=256, image_size=256, hidden=128)


def nearest_code(features: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Index of the closest code (squared Euclidean) per row; ties go to the lowest id."""
    f = np.asarray(features)
    single = f.ndim == 1
    f = f.reshape(-1, codebook.shape[1])
    d = ((f[:, None, :] - codebook[None, :, :]) ** 2).sum(axis=-1)
    ids = np.argmin(d, axis=1)
    return ids[0] if single else ids


def straight_through(z_e: Tensor, z_q: Tensor) -> Tensor:
    """Forward value of ``z_q``; backward passes the gradient unchanged to ``z_e``."""
    return make(z_q.data.copy(), (z_e,), lambda g: (g,))


class VQTokenizer(nn.Module):
    def __init__(self, config: VQConfig = VQConfig(), seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        c, hid, dc = config.compression, config.hidden, config.code_dim
        self.enc_in = nn.Conv2d(3, hid, c, rng, stride=c, dtype=dtype)
        self.enc_mid = nn.Conv2d(hid, hid, 1, rng, dtype=dtype)
        self.enc_out = nn.Conv2d(hid, dc, 1, rng, dtype=dtype)
        k = config.codebook_size
        self.codebook = nn.parameter(rng.uniform(-1.0 / k, 1.0 / k, (k, dc)).astype(dtype))
        self.dec_in = nn.Conv2d(dc, hid, 3, rng, padding=1, dtype=dtype)
        self.dec_mid = nn.Conv2d(hid, hid, 1, rng, dtype=dtype)
        self.dec_out = nn.Conv2d(hid, 3 * c * c, 1, rng, dtype=dtype)

    # -- pieces -------------------------------------------------------------
    def encode_features(self, images: Tensor) -> Tensor:
        """[B,3,H,W] -> [B, d_c, H/c, W/c]."""
        h = ops.relu(self.enc_in(images))
        h = ops.relu(self.enc_mid(h))
        return self.enc_out(h)

    def decode_features(self, z: Tensor) -> Tensor:
        """[B, d_c, h, w] -> unclipped [B, 3, h*c, w*c]."""
        h = ops.relu(self.dec_in(z))
        h = ops.relu(self.dec_mid(h))
        return ops.depth_to_space(self.dec_out(h), self.config.compression)

    def quantize(self, z_e: Tensor) -> tuple[Tensor, np.ndarray]:
        """Nearest-code lookup; returns code vectors [B, d_c, h, w] and ids [B, h*w]."""
        b, dc, h, w = z_e.shape
        flat = z_e.data.transpose(0, 2, 3, 1).reshape(-1, dc)
        ids = nearest_code(flat, self.codebook.data).reshape(b, h * w)
        z_q = ops.embedding(self.codebook, ids)  # [B, h*w, dc]
        z_q = ops.transpose(ops.reshape(z_q, (b, h, w, dc)), (0, 3, 1, 2))
        return z_q, ids

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        arr = np.asarray(images)
        if arr.ndim == 3:
            arr = arr[None]
        c = self.config.compression
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"expected [B,3,H,W] images, got {arr.shape}")
        if arr.shape[2] % c or arr.shape[3] % c:
            raise ValueError(f"image dims {arr.shape[2:]} not divisible by compression {c}")
        return arr.astype(self.codebook.dtype, copy=False)

    # -- public API -----------------------------------------------------------
    def encode_image(self, images: np.ndarray) -> np.ndarray:
        """Token ids in raster order: [m] for one image, [B, m] for a batch."""
        single = np.asarray(images).ndim == 3
        arr = self._check_images(images)
        with no_grad():
            z_e = self.encode_features(Tensor(arr))
            _, ids = self.quantize(z_e)
        return ids[0] if single else ids

    def decode_tokens(self, ids: np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
        """Token ids [m] or [B, m] -> images clipped to [0, 1]."""
        ids = np.asarray(ids, dtype=np.int64)
        single = ids.ndim == 1
        ids2 = ids[None] if single else ids
        k = self.config.codebook_size
        if ids2.size and (ids2.min() < 0 or ids2.max() >= k):
            raise IndexError(f"image token id out of range [0, {k})")
        h, w = grid or (self.config.grid, self.config.grid)
        if ids2.shape[1] != h * w:
            raise ValueError(f"grid length {ids2.shape[1]} != {h}x{w}")
        with no_grad():
            z = self.codebook.data[ids2].reshape(ids2.shape[0], h, w, -1).transpose(0, 3, 1, 2)
            out = np.clip(self.decode_features(Tensor(np.ascontiguousarray(z))).data, 0.0, 1.0)
        return out[0] if single else out

    def losses(self, images: np.ndarray) -> dict[str, Tensor]:
        x = Tensor(self._check_images(images))
        z_e = self.encode_features(x)
        z_q, ids = self.quantize(z_e)
        x_hat = self.decode_features(straight_through(z_e, z_q))
        diff = x_hat - x
        recon = (diff * diff).mean()
        cb = z_q - ops.detach(z_e)
        codebook = (cb * cb).mean()
        cm = z_e - ops.detach(z_q)
        commit = (cm * cm).mean() * self.config.beta
        return {"recon": recon, "codebook": codebook, "commit": commit,
                "total": recon + codebook + commit, "ids": ids, "z_e": z_e}

    # -- persistence ------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        cfg = asdict(self.config)
        header = "\n".join(f"{k}={v}" for k, v in cfg.items()).encode("utf-8")
        with open(path, "wb") as f:
            f.write(VQ_MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            state = self.state_dict()
            f.write(struct.pack("<I", len(state)))
            for name, arr in state.items():
                blob = name.encode("utf-8")
                f.write(struct.pack("<I", len(blob)))
                f.write(blob)
                write_tensor(f, arr)

    @classmethod
    def load(cls, path: str | Path) -> "VQTokenizer":
        with open(path, "rb") as f:
            if f.read(len(VQ_MAGIC)) != VQ_MAGIC:
                raise FormatError(f"{path} is not a tokenizer checkpoint")
            (n,) = struct.unpack("<I", f.read(4))
            cfg = _parse_kv(f.read(n).decode("utf-8"), VQConfig)
            (count,) = struct.unpack("<I", f.read(4))
            state = {}
            for _ in range(count):
                (ln,) = struct.unpack("<I", f.read(4))
                name = f.read(ln).decode("utf-8")
                state[name] = read_tensor(f)
        tok = cls(VQConfig(**cfg))
        tok.load_state_dict(state)
        return tok


def _parse_kv(text: str, dc) -> dict:
    types = {f.name: f.type for f in fields(dc)}
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        k, _, v = line.partition("=")
        t = types.get(k)
        if t is None:
            raise FormatError(f"unknown config key {k!r}")
        out[k] = float(v) if t in ("float", float) else int(v)
    return out


@dataclass
class VQTrainLog:
    recon: list[float]
    reseeded: int = 0


def train_vq(images: Sequence[np.ndarray] | np.ndarray, config: VQConfig = VQConfig(), steps: int = 1500,
             lr: float = 2e-3, batch_size: int | None = None, seed: int = 0,
             tokenizer: VQTokenizer | None = None) -> tuple[VQTokenizer, VQTrainLog]:
    """Fit encoder, decoder and codebook by reconstruction + codebook + commitment losses.

    Codes unused for ``config.dead_code_patience`` consecutive steps are
    re-seeded to a random encoder output from the current batch.
    """
    data = np.asarray(images, dtype=np.float32)
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("train_vq needs a non-empty [N,3,H,W] image set")
    tok = tokenizer or VQTokenizer(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = AdamW(list(tok.named_parameters()), weight_decay=0.0)
    last_used = np.zeros(config.codebook_size, dtype=np.int64)
    log = VQTrainLog(recon=[])
    bs = batch_size or len(data)
    for step in range(1, steps + 1):
        batch = data if bs >= len(data) else data[rng.choice(len(data), bs, replace=False)]
        out = tok.losses(batch)
        opt.zero_grad()
        out["total"].backward()
        opt.step(lr)
        log.recon.append(out["recon"].item())
        last_used[np.unique(out["ids"])] = step
        dead = np.flatnonzero(step - last_used >= config.dead_code_patience)
        if dead.size:
            feats = out["z_e"].data.transpose(0, 2, 3, 1).reshape(-1, config.code_dim)
            picks = rng.choice(len(feats), size=dead.size, replace=dead.size > len(feats))
            tok.codebook.data[dead] = feats[picks]
            opt.reset_rows("codebook", dead)
            last_used[dead] = step
            log.reseeded += int(dead.size)
        if step % 250 == 0:
            logger.info("vq step %d recon %.5f", step, log.recon[-1])
    return tok, log
