"""Model/trainer checkpoints.

Layout: magic line, uint32 header length, UTF-8 header of ``[section]``
blocks with ``key=value`` lines, uint32 record count, then records of
(uint32 name length, name, tensor record). Model weights come first in
parameter order, then optimizer moments.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ..autodiff.serialize import FormatError, read_tensor, write_tensor
from ..model import CrossModalModel, ModelConfig

MAGIC = b"PMMCKPT1\n"


def _write_blob(f, text: str) -> None:
    data = text.encode("utf-8")
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_blob(f) -> str:
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def format_header(sections: dict[str, dict[str, object]]) -> str:
    out = []
    for name, kv in sections.items():
        out.append(f"[{name}]")
        out.extend(f"{k}={v}" for k, v in kv.items())
    return "\n".join(out) + "\n"


def parse_header(text: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            current = sections.setdefault(line[1:-1], {})
            continue
        if current is None or "=" not in line:
            raise FormatError(f"malformed checkpoint header line {line!r}")
        k, _, v = line.partition("=")
        current[k] = v
    return sections


def write_checkpoint(path: str | Path, cfg: ModelConfig, tensors: dict[str, np.ndarray],
                     meta: dict[str, object] | None = None, extra: dict[str, dict] | None = None) -> None:
    sections = {"model": {k: v for k, v in asdict(cfg).items()},
                "meta": {"config_hash": cfg.digest(), **(meta or {})}}
    sections.update(extra or {})
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        _write_blob(f, format_header(sections))
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            _write_blob(f, name)
            write_tensor(f, arr)
    tmp.replace(path)


def read_checkpoint(path: str | Path):
    """Returns (ModelConfig, header sections, ordered tensors)."""
    with open(path, "rb") as f:
        if f.read(len(MAGIC)) != MAGIC:
            raise FormatError(f"{path} is not a model checkpoint")
        sections = parse_header(_read_blob(f))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            name = _read_blob(f)
            tensors[name] = read_tensor(f)
    model_kv = "\n".join(f"{k}={v}" for k, v in sections.get("model", {}).items())
    cfg = ModelConfig.from_kv(model_kv)
    if sections.get("meta", {}).get("config_hash") != cfg.digest():
        raise FormatError(f"{path}: config hash mismatch (header edited or corrupt)")
    return cfg, sections, tensors


def save_model(path: str | Path, model: CrossModalModel, meta: dict | None = None, extra: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    write_checkpoint(path, model.config, tensors, meta, extra)


def load_model(path: str | Path) -> tuple[CrossModalModel, dict]:
    cfg, sections, tensors = read_checkpoint(path)
    model = CrossModalModel(cfg)
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    return model, sections


def save_checkpoint(path: str | Path, trainer, extra: dict | None = None) -> None:
    """Weights, optimizer moments, step counter and the seed the random streams derive from."""
    from .trainer import TrainConfig

    tensors = {f"model.{k}": v for k, v in trainer.model.state_dict().items()}
    tensors.update({f"opt.{k}": v for k, v in trainer.opt.state_dict().items()})
    cfg = trainer.cfg
    train_kv = {f.name: (",".join(getattr(cfg, f.name)) if f.name == "objectives" else getattr(cfg, f.name))
                for f in fields(TrainConfig)}
    meta = {"step": trainer.step_count, "total_steps": trainer.total, "rng_seed": cfg.seed}
    sections = {"train": train_kv}
    sections.update(extra or {})
    write_checkpoint(path, trainer.model.config, tensors, meta, sections)


def load_train_config(sections: dict[str, dict[str, str]]):
    from .trainer import TrainConfig

    kv = sections.get("train")
    if kv is None:
        raise FormatError("checkpoint has no [train] section")
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for k, v in kv.items():
        t = types.get(k)
        if t is None:
            raise FormatError(f"unknown train config key {k!r}")
        if k == "objectives":
            out[k] = tuple(x for x in v.split(",") if x)
        elif t in ("float", float):
            out[k] = float(v)
        elif t in ("int", int):
            out[k] = int(v)
        else:
            out[k] = v
    return TrainConfig(**out)


def restore_trainer(path: str | Path, data):
    """Rebuild a :class:`Trainer` mid-run from a checkpoint written by :func:`save_checkpoint`."""
    from .trainer import Trainer

    mcfg, sections, tensors = read_checkpoint(path)
    tcfg = load_train_config(sections)
    model = CrossModalModel(mcfg)
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    trainer = Trainer(model, data, tcfg)
    meta = sections["meta"]
    trainer.total = int(meta["total_steps"])
    trainer.opt.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")}, int(meta["step"]))
    trainer.step_count = int(meta["step"])
    return trainer, sections
