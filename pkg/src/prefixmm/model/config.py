from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields, replace

VISUAL_VARIANTS = ("conv", "patch", "token")


@dataclass(frozen=True)
class ModelConfig:
    text_vocab: int = 512
    image_vocab: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    heads: int = 4
    ffn: int = 256
    max_len: int = 256
    image_size: int = 32
    visual_embedder: str = "conv"
    patch_size: int = 8
    stem_channels: int = 32
    stem_stride: int = 4
    image_grid: int = 8
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.visual_embedder not in VISUAL_VARIANTS:
            raise ValueError(f"visual_embedder must be one of {VISUAL_VARIANTS}")
        if self.visual_embedder == "patch" and self.image_size % self.patch_size:
            raise ValueError("image size not divisible by patch size")
        st = self.stem_stride
        if st < 2 or st & (st - 1):
            raise ValueError(f"stem stride must be a power of two >= 2, got {st}")
        if self.visual_embedder == "conv" and self.image_size % st:
            raise ValueError(f"image size {self.image_size} not divisible by the stem stride {st}")
        if self.num_visual > self.max_len:
            raise ValueError(f"{self.num_visual} visual positions exceed max_len {self.max_len}")
        if self.image_tokens > self.max_len:
            raise ValueError("image token grid longer than max_len")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def num_visual(self) -> int:
        """Number of visual embeddings m fed to the encoder."""
        if self.visual_embedder == "conv":
            return (self.image_size // self.stem_stride) ** 2
        if self.visual_embedder == "patch":
            return (self.image_size // self.patch_size) ** 2
        return self.image_grid ** 2

    def stem_plan(self) -> list[tuple[int, int, int]]:
        """(in channels, out channels, stride) of each conv stem stage."""
        halvings = self.stem_stride.bit_length() - 1
        n = max(3, halvings)
        ins = [3] + [self.stem_channels] * (n - 1)
        outs = [self.stem_channels] * (n - 1) + [self.d_model]
        return [(i, o, 2 if k < halvings else 1) for k, (i, o) in enumerate(zip(ins, outs))]

    @property
    def image_tokens(self) -> int:
        return self.image_grid ** 2

    @property
    def out_vocab(self) -> int:
        return self.text_vocab + self.image_vocab

    @property
    def image_bos(self) -> int:
        """Decoder-input id that starts an image suffix."""
        return self.text_vocab + self.image_vocab

    def slice_of(self, modality: str) -> tuple[int, int]:
        if modality == "text":
            return 0, self.text_vocab
        if modality == "image":
            return self.text_vocab, self.text_vocab + self.image_vocab
        raise ValueError(f"unknown modality {modality!r}")

    def to_kv(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in asdict(self).items())

    @classmethod
    def from_kv(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            k, _, v = line.partition("=")
            if k not in types:
                raise ValueError(f"unknown model config key {k!r}")
            t = types[k]
            kw[k] = v if t in ("str", str) else float(v) if t in ("float", float) else int(v)
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(self.to_kv().encode("utf-8")).hexdigest()[:16]

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        base = dict(enc_layers=6, dec_layers=6, d_model=768, heads=12, ffn=3072, max_len=512,
                    image_size=256, image_vocab=1024, image_grid=16, stem_channels=256, stem_stride=16,
                    patch_size=16, dropout=0.1, text_vocab=30522)
        base.update(kw)
        return cls(**base)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for :class:`~prefixmm.model.CrossModalModel`."""
    d, f, L = cfg.d_model, cfg.ffn, cfg.max_len
    m = cfg.num_visual
    ln = 2 * d
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    text_embed = cfg.text_vocab * d + L * d + ln
    if cfg.visual_embedder == "conv":
        visual = sum(i * o * 9 + o for i, o, _ in cfg.stem_plan()) + m * d
    elif cfg.visual_embedder == "patch":
        p = cfg.patch_size
        visual = 3 * p * p * d + d + m * d
    else:
        visual = (cfg.image_vocab + 1) * d + m * d
    encoder = cfg.enc_layers * (attn + 2 * ln + ffn) + ln
    decoder = cfg.dec_layers * (2 * attn + 3 * ln + ffn) + ln
    dec_embed = (cfg.out_vocab + 1) * d + L * d
    head = d * cfg.out_vocab + cfg.out_vocab
    return text_embed + visual + encoder + decoder + dec_embed + head
