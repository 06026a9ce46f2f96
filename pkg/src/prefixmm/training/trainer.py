"""Training loop: sample -> unified loss -> backward -> AdamW."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from ..autodiff import NonFiniteError
from ..data.images import preprocess_image
from ..data.manifest import DatasetManifest, MixtureSpec, PairRecord, Source, sample_batch
from ..model import CrossModalModel, ModelConfig
from ..objectives import Batch, ObjectiveConfig, Pair, plan_splits, unified_loss
from ..seeding import derive_seed, stream
from ..text_tokenizer import Vocabulary
from .optim import AdamW, NonFiniteGradientError, lr_at

if TYPE_CHECKING:
    from ..vq import VQTokenizer

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "plm", "pim", "t2t", "total")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_frac: float = 0.02
    epochs: int = 40
    batch_size: int = 16
    text_batch_size: int = 0          # 0 -> same as batch_size
    steps: int = 0                    # 0 -> epochs * pairs / batch_size
    seed: int = 0
    objectives: tuple[str, ...] = ("plm", "pim")
    prefix_mode: str = "dynamic"
    mask_strategy: str = "suffix"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup fraction must be in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        self.objectives = tuple(self.objectives)
        self.objective_config  # validates

    @property
    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.objectives, self.prefix_mode, self.mask_strategy)

    def total_steps(self, num_pairs: int) -> int:
        if self.steps:
            return self.steps
        return max(2, math.ceil(self.epochs * num_pairs / self.batch_size))

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        base = dict(lr=1e-3, epochs=2000, batch_size=16, warmup_frac=0.02)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainingData:
    """Two sampling lanes (image-text pairs, text-only documents) with prepared examples."""

    pair_manifest: DatasetManifest | None
    pair_mixture: MixtureSpec | None
    pairs: dict[PairRecord, Pair]
    text_manifest: DatasetManifest | None = None
    text_mixture: MixtureSpec | None = None
    texts: dict[PairRecord, np.ndarray] = field(default_factory=dict)

    @property
    def num_pairs(self) -> int:
        return len(self.pair_manifest) if self.pair_manifest else 0

    @classmethod
    def from_examples(cls, pairs: Sequence[Pair], texts: Sequence[np.ndarray] = ()) -> "TrainingData":
        """In-memory corpus (one source per lane, uniform weights)."""
        precs = [PairRecord(Path(f"<memory>/{i}"), "", "memory") for i in range(len(pairs))]
        pm = DatasetManifest(Path("<memory>"), [Source("memory", Path("<memory>"), precs)]) if pairs else None
        data = cls(pm, MixtureSpec(("memory",), (1.0,)) if pairs else None, dict(zip(precs, pairs)))
        if len(texts):
            trecs = [PairRecord(None, str(i), "text-only") for i in range(len(texts))]
            data.text_manifest = DatasetManifest(Path("<memory>"), [Source("text-only", Path("<memory>"), trecs)])
            data.text_mixture = MixtureSpec(("text-only",), (1.0,))
            data.texts = dict(zip(trecs, texts))
        return data


def prepare_data(manifest: DatasetManifest, vocab: Vocabulary, tokenizer: VQTokenizer,
                 mixture: MixtureSpec | None = None, image_size: int | None = None) -> TrainingData:
    """Preprocess every record once: center-crop/resize, VQ tokens, caption ids."""
    size = image_size or tokenizer.config.image_size
    pm = manifest.subset(text_only=False)
    tm = manifest.subset(text_only=True)
    weights = dict(zip(mixture.names, mixture.weights)) if mixture else {}

    def lane_mixture(sub: DatasetManifest) -> MixtureSpec | None:
        if not sub.sources:
            return None
        if weights:
            return MixtureSpec(tuple(s.name for s in sub.sources), tuple(weights.get(s.name, 0.0) for s in sub.sources))
        return MixtureSpec.from_manifest(sub)

    pairs: dict[PairRecord, Pair] = {}
    recs = pm.records
    if recs:
        images = np.stack([preprocess_image(r.image, size) for r in recs])
        tokens = tokenizer.encode_image(images)
        for r, img, tok in zip(recs, images, tokens):
            pairs[r] = Pair(img, tok, np.asarray(vocab.encode(r.caption), dtype=np.int64))
    texts = {r: np.asarray(vocab.encode(r.caption), dtype=np.int64) for r in tm.records}
    return TrainingData(pm if pm.sources else None, lane_mixture(pm), pairs,
                        tm if tm.sources else None, lane_mixture(tm), texts)


class Trainer:
    def __init__(self, model: CrossModalModel, data: TrainingData, cfg: TrainConfig):
        self.model = model
        self.data = data
        self.cfg = cfg
        self.obj = cfg.objective_config
        self.total = cfg.total_steps(max(data.num_pairs, 1))
        self.opt = AdamW(list(model.named_parameters()), cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        self.step_count = 0
        self.log: list[dict[str, float]] = []

    def next_batch(self, step: int) -> tuple[Batch, list, list]:
        seed = self.cfg.seed
        pairs: list[Pair] = []
        texts: list[np.ndarray] = []
        if self.data.pair_manifest is not None:
            recs = sample_batch(self.data.pair_manifest, self.data.pair_mixture, self.cfg.batch_size,
                                stream(seed, "pairs", step))
            pairs = [self.data.pairs[r] for r in recs]
        if "t2t" in self.obj.objectives and self.data.text_manifest is not None:
            n = self.cfg.text_batch_size or self.cfg.batch_size
            recs = sample_batch(self.data.text_manifest, self.data.text_mixture, n, stream(seed, "texts", step))
            texts = [t for t in (self.data.texts[r] for r in recs) if len(t)]
        pair_rngs = [stream(seed, "split", step, i) for i in range(len(pairs))]
        text_rngs = [stream(seed, "split-text", step, i) for i in range(len(texts))]
        return Batch(pairs, texts), pair_rngs, text_rngs

    def compute_loss(self, step: int):
        batch, pair_rngs, text_rngs = self.next_batch(step)
        plan = plan_splits(batch, self.obj, self.model.config.image_tokens, pair_rngs, text_rngs)
        for s in plan.plm + plan.pim + plan.t2t:
            assert s.suffix_len >= 1, "empty suffix"
        self.model.dropout_rng = stream(self.cfg.seed, "dropout", step)
        return unified_loss(self.model, batch, self.obj, plan)

    def step(self) -> dict[str, float]:
        s = self.step_count + 1
        if s > self.total:
            raise RuntimeError("training already finished")
        self.model.train()
        loss = self.compute_loss(s)
        self.opt.zero_grad()
        loss.total.backward()
        lr = lr_at(s, self.total, self.cfg.lr, self.cfg.warmup_frac)
        self.opt.step(lr)
        self.step_count = s
        rec = {"step": s, "lr": lr, **loss.values()}
        self.log.append(rec)
        return rec

    def run(self, steps: int | None = None, out_dir: str | Path | None = None, log_file=None) -> list[dict]:
        """Train ``steps`` more steps (default: to the end of the schedule)."""
        from .checkpoint import save_checkpoint

        end = self.total if steps is None else min(self.total, self.step_count + steps)
        out = Path(out_dir) if out_dir else None
        while self.step_count < end:
            try:
                rec = self.step()
            except (NonFiniteError, NonFiniteGradientError) as exc:
                where = f"; last good checkpoint kept in {out}" if out else ""
                raise TrainingAborted(f"non-finite value at step {self.step_count + 1}: {exc}{where}") from exc
            if log_file is not None:
                log_file.write(format_log_line(rec) + "\n")
                log_file.flush()
            if rec["step"] % 100 == 0:
                logger.info("step %d total %.4f", rec["step"], rec["total"])
            if out and self.cfg.checkpoint_every and self.step_count % self.cfg.checkpoint_every == 0:
                save_checkpoint(out / "last-good.ckpt", self)
        return self.log


def format_log_line(rec: dict[str, float]) -> str:
    return "\t".join(str(rec["step"]) if k == "step" else repr(float(rec[k])) for k in LOG_FIELDS)


def log_header() -> str:
    return "\t".join(LOG_FIELDS)


def read_log(path: str | Path) -> list[dict[str, float]]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != log_header():
        raise ValueError(f"{path} is not a metrics log")
    out = []
    for line in lines[1:]:
        vals = line.split("\t")
        out.append({k: (int(v) if k == "step" else float(v)) for k, v in zip(LOG_FIELDS, vals)})
    return out


def build_model(cfg: ModelConfig, seed: int) -> CrossModalModel:
    return CrossModalModel(cfg, seed=derive_seed(seed, "model-init"))
