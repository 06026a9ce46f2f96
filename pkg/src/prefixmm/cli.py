"""Command-line entry points.

Each command resolves its settings from built-in defaults, then an optional
``--config`` file (INI sections of ``key = value``), then flags, and writes
the resolved values to a frozen ``config.ini`` before doing any work.

Exit codes: 0 success, 1 usage error, 2 runtime/data error, 3 numeric failure.
"""

from __future__ import annotations

import os

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads() -> None:
    # must run before numpy loads its BLAS
    n = os.environ.get("PMM_THREADS")
    if n and n.isdigit() and int(n) > 0:
        for var in _THREAD_VARS:
            os.environ[var] = n


_cap_threads()

import argparse  # noqa: E402
import configparser  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from dataclasses import dataclass, fields  # noqa: E402
from pathlib import Path  # noqa: E402
from typing import Any, Callable  # noqa: E402

import numpy as np  # noqa: E402

from .autodiff import NonFiniteError  # noqa: E402
from .autodiff.serialize import FormatError  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NUMERIC = 0, 1, 2, 3

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass(frozen=True)
class Opt:
    section: str
    key: str
    type: Callable[[str], Any]
    default: Any
    help: str = ""
    required: bool = False
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.key.replace("_", "-")


def _bool(v: str) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


SEED = Opt("run", "seed", int, 0, "single source of randomness")

COMMANDS: dict[str, list[Opt]] = {
    "gen-synthetic": [
        Opt("run", "out", str, None, "output directory", required=True),
        Opt("data", "count", int, 64, "number of image-caption pairs"),
        Opt("data", "skip", int, 0, "skip this many scenes of the shuffled order (held-out splits)"),
        Opt("data", "size", int, 32, "canvas size in pixels"),
        Opt("data", "source", str, "in-domain", "source tag"),
        Opt("data", "format", str, "png", "image format", choices=("png", "ppm")),
        SEED,
    ],
    "build-vocab": [
        Opt("data", "manifest", str, None, "dataset manifest", required=True),
        Opt("run", "out", str, None, "vocabulary file to write", required=True),
        Opt("vocab", "size", int, 512, "target vocabulary size"),
    ],
    "train-vq": [
        Opt("data", "manifest", str, None, "dataset manifest", required=True),
        Opt("run", "out", str, None, "output directory", required=True),
        Opt("vq", "codebook_size", int, 64, "number of codes"),
        Opt("vq", "compression", int, 4, "downsampling factor"),
        Opt("vq", "code_dim", int, 16, "code vector width"),
        Opt("vq", "beta", float, 0.25, "commitment weight"),
        Opt("vq", "hidden", int, 64, "conv channels"),
        Opt("vq", "image_size", int, 32, "training resolution"),
        Opt("vq", "dead_code_patience", int, 1000, "steps before an unused code is re-seeded"),
        Opt("vq", "steps", int, 1500, "optimizer steps"),
        Opt("vq", "lr", float, 2e-3, "learning rate"),
        Opt("vq", "batch_size", int, 16, "images per step"),
        SEED,
    ],
    "train": [
        Opt("data", "manifest", str, None, "dataset manifest", required=True),
        Opt("data", "vocab", str, None, "vocabulary file", required=True),
        Opt("data", "tokenizer", str, None, "image tokenizer checkpoint", required=True),
        Opt("data", "weights", str, "", "mixture weights, e.g. 'coco=2,vg=1' (default: by size)"),
        Opt("run", "out", str, None, "output directory", required=True),
        Opt("model", "enc_layers", int, 2, "encoder layers"),
        Opt("model", "dec_layers", int, 2, "decoder layers"),
        Opt("model", "d_model", int, 64, "hidden width"),
        Opt("model", "heads", int, 4, "attention heads"),
        Opt("model", "ffn", int, 256, "feed-forward width"),
        Opt("model", "max_len", int, 256, "longest sequence"),
        Opt("model", "visual_embedder", str, "conv", "visual embedding variant", choices=("conv", "patch", "token")),
        Opt("model", "patch_size", int, 8, "patch size of the patch variant"),
        Opt("model", "stem_channels", int, 32, "conv stem width"),
        Opt("model", "stem_stride", int, 4, "total stride of the conv stem"),
        Opt("model", "dropout", float, 0.0, "dropout rate"),
        Opt("train", "objectives", str, "plm,pim", "comma list from plm, pim, t2t"),
        Opt("train", "prefix_mode", str, "dynamic", "'dynamic' or 'fixed:<ratio>'"),
        Opt("train", "mask_strategy", str, "suffix", "suffix, mim or inpaint"),
        Opt("train", "lr", float, 1e-3, "peak learning rate"),
        Opt("train", "weight_decay", float, 0.01, "decoupled weight decay"),
        Opt("train", "warmup_frac", float, 0.02, "warmup fraction"),
        Opt("train", "epochs", int, 2000, "epochs (sets the step count unless --steps)"),
        Opt("train", "steps", int, 0, "explicit step count"),
        Opt("train", "batch_size", int, 16, "pairs per step"),
        Opt("train", "text_batch_size", int, 0, "text-only documents per step (0: same as batch size)"),
        Opt("train", "checkpoint_every", int, 100, "steps between last-good checkpoints"),
        SEED,
    ],
    "caption": [
        Opt("run", "checkpoint", str, None, "model checkpoint", required=True),
        Opt("run", "image", str, None, "image to caption", required=True),
        Opt("run", "out", str, "", "directory for the frozen config (optional)"),
        Opt("sample", "top_k", int, 0, "sample from the k most likely tokens (0: greedy)"),
        Opt("sample", "temperature", float, 1.0, "sampling temperature (0: greedy)"),
        Opt("sample", "max_tokens", int, 64, "longest caption"),
        SEED,
    ],
    "paint": [
        Opt("run", "checkpoint", str, None, "model checkpoint", required=True),
        Opt("run", "text", str, None, "caption to paint", required=True),
        Opt("run", "out", str, None, "image file to write (.png or .ppm)", required=True),
        Opt("sample", "top_k", int, 0, "sample from the k most likely codes (0: greedy)"),
        Opt("sample", "temperature", float, 1.0, "sampling temperature (0: greedy)"),
        SEED,
    ],
    "eval": [
        Opt("run", "checkpoint", str, None, "model checkpoint", required=True),
        Opt("data", "manifest", str, None, "evaluation manifest", required=True),
        Opt("run", "out", str, "", "directory for metrics + frozen config (optional)"),
        Opt("eval", "prefix_mode", str, "dynamic", "prefix ratios used for teacher-forced metrics"),
        Opt("eval", "mask_strategy", str, "suffix", "masking for image metrics"),
        Opt("eval", "batch_size", int, 16, "pairs per forward pass"),
        Opt("eval", "bleu", _bool, True, "also caption greedily and score BLEU@4"),
        SEED,
    ],
    "selftest": [
        Opt("run", "out", str, "", "directory for the report + frozen config (optional)"),
        Opt("selftest", "grad_seeds", int, 3, "random seeds per gradient check"),
        Opt("selftest", "inject_fault", str, "none", "deliberately break a backward rule",
            choices=("none", "gelu-sign")),
    ],
}

POSITIONALS = {"caption": "image", "paint": "text"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prefixmm", description="Prefix multi-modal modelling toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        sp = sub.add_parser(name, help=f"{name} command")
        sp.add_argument("--config", help="INI config file; flags override it")
        pos = POSITIONALS.get(name)
        if pos:
            sp.add_argument(pos, nargs="?", default=None, help=next(o.help for o in opts if o.key == pos))
        for o in opts:
            if o.key == pos:
                continue
            # flags stay as strings so a config file can be merged underneath
            sp.add_argument(o.flag, dest=o.key, default=None, help=o.help,
                            choices=o.choices)
    return p


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    """defaults < config file < flags, type-checked; UsageError on anything malformed."""
    opts = COMMANDS[command]
    raw: dict[str, Any] = {o.key: o.default for o in opts}
    if ns.config:
        cp = configparser.ConfigParser(interpolation=None)
        try:
            with open(ns.config, encoding="utf-8") as f:
                cp.read_file(f)
        except (OSError, configparser.Error) as exc:
            raise UsageError(f"cannot read config {ns.config}: {exc}") from None
        known = {(o.section, o.key) for o in opts}
        for section in cp.sections():
            for key, value in cp.items(section):
                if section == "run" and key == "command":
                    if value != command:
                        raise UsageError(f"config {ns.config} was written for {value!r}, not {command!r}")
                    continue
                if (section, key) not in known:
                    raise UsageError(f"config {ns.config}: unknown key [{section}] {key}")
                raw[key] = value
    for o in opts:
        v = getattr(ns, o.key, None)
        if v is not None:
            raw[o.key] = v
    out = {}
    for o in opts:
        v = raw[o.key]
        if v is None:
            if o.required:
                raise UsageError(f"{command}: missing required {o.flag}")
            out[o.key] = None
            continue
        try:
            out[o.key] = o.type(v) if isinstance(v, str) else v
        except ValueError:
            raise UsageError(f"{command}: bad value {v!r} for {o.flag}") from None
        if o.choices and out[o.key] not in o.choices:
            raise UsageError(f"{command}: {o.flag} must be one of {o.choices}")
        if o.key in ("manifest", "vocab", "tokenizer", "checkpoint") and not Path(out[o.key]).is_file():
            raise UsageError(f"{command}: {o.flag} {out[o.key]} does not exist")
    return out


def write_frozen(path: Path, command: str, values: dict[str, Any]) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"command": command}
    for o in COMMANDS[command]:
        v = values[o.key]
        if v is None:
            continue
        if o.key in ("manifest", "vocab", "tokenizer", "checkpoint", "image", "out") and v:
            v = str(Path(v).resolve())
        cp.setdefault(o.section, {})
        cp[o.section][o.key] = str(v)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        cp.write(f)


def _sampling(cfg: dict[str, Any]) -> dict[str, Any]:
    from .seeding import stream

    if cfg["top_k"] < 0 or cfg["temperature"] < 0:
        raise UsageError("--top-k and --temperature must be non-negative")
    if cfg["top_k"] > 0 and cfg["temperature"] > 0:
        return dict(strategy="topk", top_k=cfg["top_k"], temperature=cfg["temperature"],
                    rng=stream(cfg["seed"], "sample"))
    return dict(strategy="greedy")


# -- commands ---------------------------------------------------------------------

def cmd_gen_synthetic(cfg: dict) -> int:
    from .data.synthetic import all_scenes, write_corpus

    if cfg["count"] < 1 or cfg["skip"] < 0:
        raise UsageError("--count must be >= 1 and --skip >= 0")
    if cfg["count"] + cfg["skip"] > len(all_scenes()):
        raise UsageError(f"only {len(all_scenes())} distinct scenes exist")
    out = Path(cfg["out"])
    write_frozen(out / "config.ini", "gen-synthetic", cfg)
    manifest = write_corpus(out, cfg["count"], cfg["seed"], cfg["size"], cfg["skip"], cfg["source"], cfg["format"])
    print(manifest)
    return EXIT_OK


def _captions(manifest) -> list[str]:
    return [r.caption for r in manifest.records]


def cmd_build_vocab(cfg: dict) -> int:
    from .data import load_manifest
    from .text_tokenizer import build_vocab

    out = Path(cfg["out"])
    write_frozen(out.with_name(out.name + ".config.ini"), "build-vocab", cfg)
    manifest = load_manifest(cfg["manifest"], check_images=False)
    vocab = build_vocab(_captions(manifest), cfg["size"])
    vocab.save(out)
    print(f"{len(vocab)} pieces -> {out}")
    return EXIT_OK


def cmd_train_vq(cfg: dict) -> int:
    from .data import load_manifest, preprocess_image
    from .seeding import derive_seed
    from .vq import VQConfig, train_vq

    try:
        vcfg = VQConfig(**{f.name: cfg[f.name] for f in fields(VQConfig)})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["out"])
    write_frozen(out / "config.ini", "train-vq", cfg)
    manifest = load_manifest(cfg["manifest"]).subset(text_only=False)
    if not len(manifest):
        raise ValueError("manifest has no image records")
    images = np.stack([preprocess_image(r.image, vcfg.image_size) for r in manifest.records])
    tok, vlog = train_vq(images, vcfg, steps=cfg["steps"], lr=cfg["lr"], batch_size=cfg["batch_size"],
                         seed=derive_seed(cfg["seed"], "vq"))
    tok.save(out / "tokenizer.vq")
    with open(out / "vq_log.tsv", "w", encoding="utf-8") as f:
        f.write("step\tmse\n")
        for i, v in enumerate(vlog.recon, start=1):
            f.write(f"{i}\t{v!r}\n")
    final = vlog.recon[-1] if vlog.recon else float("nan")
    print(f"final reconstruction MSE {final:.6f} ({vlog.reseeded} codes re-seeded)")
    return EXIT_OK


def _parse_weights(text: str) -> dict[str, float]:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        name, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"bad mixture weight {item!r}; expected name=value")
        try:
            out[name.strip()] = float(val)
        except ValueError:
            raise UsageError(f"bad mixture weight {item!r}") from None
    return out


def cmd_train(cfg: dict) -> int:
    from .data import TEXT_ONLY, MixtureSpec, load_manifest
    from .model import ModelConfig
    from .text_tokenizer import Vocabulary
    from .training import TrainConfig, Trainer, build_model, log_header, prepare_data, save_checkpoint
    from .vq import VQTokenizer

    # every conflict is reported before any compute
    objectives = tuple(x.strip() for x in cfg["objectives"].split(",") if x.strip())
    try:
        tcfg = TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"], warmup_frac=cfg["warmup_frac"],
                           epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                           text_batch_size=cfg["text_batch_size"], steps=cfg["steps"], seed=cfg["seed"],
                           objectives=objectives, prefix_mode=cfg["prefix_mode"],
                           mask_strategy=cfg["mask_strategy"], checkpoint_every=cfg["checkpoint_every"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    vocab = Vocabulary.load(cfg["vocab"])
    tok = VQTokenizer.load(cfg["tokenizer"])
    try:
        mcfg = ModelConfig(text_vocab=len(vocab), image_vocab=tok.config.codebook_size, image_grid=tok.config.grid,
                           image_size=tok.config.image_size,
                           **{k: cfg[k] for k in ("enc_layers", "dec_layers", "d_model", "heads", "ffn", "max_len",
                                                  "visual_embedder", "patch_size", "stem_channels", "stem_stride",
                                                  "dropout")})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = load_manifest(cfg["manifest"])
    names = {s.name for s in manifest.sources}
    has_pairs = any(s.name != TEXT_ONLY for s in manifest.sources)
    if ({"plm", "pim"} & set(objectives)) and not has_pairs:
        raise UsageError("plm/pim objectives need image-text sources in the manifest")
    if "t2t" in objectives and TEXT_ONLY not in names:
        raise UsageError("t2t objective needs a 'text-only' source in the manifest")
    if not has_pairs:
        raise UsageError("training needs at least one image-text source")
    weights = _parse_weights(cfg["weights"])
    unknown = set(weights) - names
    if unknown:
        raise UsageError(f"mixture weights for unknown sources: {sorted(unknown)}")
    try:
        mixture = MixtureSpec.from_manifest(manifest, weights) if weights else None
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    out = Path(cfg["out"])
    write_frozen(out / "config.ini", "train", cfg)
    shutil.copyfile(cfg["vocab"], out / "vocab.txt")
    shutil.copyfile(cfg["tokenizer"], out / "tokenizer.vq")
    data = prepare_data(manifest, vocab, tok, mixture)
    model = build_model(mcfg, cfg["seed"])
    trainer = Trainer(model, data, tcfg)
    assets = {"assets": {"vocab": "vocab.txt", "tokenizer": "tokenizer.vq"}}
    with open(out / "metrics.tsv", "w", encoding="utf-8") as f:
        f.write(log_header() + "\n")
        trainer.run(out_dir=out, log_file=f)
    save_checkpoint(out / "model.ckpt", trainer, extra=assets)
    last = trainer.log[-1] if trainer.log else None
    if last:
        print(f"step {last['step']} total loss {last['total']:.5f} -> {out / 'model.ckpt'}")
    return EXIT_OK


def load_bundle(path: str | Path):
    """Model, vocabulary and tokenizer from a checkpoint written by ``train``."""
    from .text_tokenizer import Vocabulary
    from .training import load_model
    from .vq import VQTokenizer

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, sections = load_model(path)
    assets = sections.get("assets", {})
    if "vocab" not in assets or "tokenizer" not in assets:
        raise FormatError(f"{path} carries no vocabulary/tokenizer references")
    vocab = Vocabulary.load(path.parent / assets["vocab"])
    tok = VQTokenizer.load(path.parent / assets["tokenizer"])
    return model, vocab, tok


def cmd_caption(cfg: dict) -> int:
    from .data import preprocess_image
    from .objectives import Pair
    from .training import caption

    if cfg["out"]:
        write_frozen(Path(cfg["out"]) / "config.ini", "caption", cfg)
    sampling = _sampling(cfg)
    model, vocab, tok = load_bundle(cfg["checkpoint"])
    img = preprocess_image(cfg["image"], model.config.image_size)
    tokens = tok.encode_image(img[None])[0] if model.config.visual_embedder == "token" else \
        np.zeros(model.config.image_tokens, dtype=np.int64)
    ids = caption(model, [Pair(img, tokens, np.zeros(0, dtype=np.int64))], max_steps=cfg["max_tokens"], **sampling)[0]
    print(vocab.decode(ids))
    return EXIT_OK


def cmd_paint(cfg: dict) -> int:
    from .data import write_image
    from .training import paint

    out = Path(cfg["out"])
    write_frozen(out.with_name(out.name + ".config.ini"), "paint", cfg)
    sampling = _sampling(cfg)
    model, vocab, tok = load_bundle(cfg["checkpoint"])
    ids = np.asarray(vocab.encode(cfg["text"]), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("caption tokenizes to an empty sequence")
    grid = paint(model, [ids], **sampling)[0]
    img = tok.decode_tokens(grid[None])[0]
    write_image(out, img)
    g = tok.config.grid
    print(" ".join(map(str, grid.tolist())) if g * g <= 256 else f"{g}x{g} grid")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .data import load_manifest
    from .training import evaluate, prepare_data

    if cfg["out"]:
        write_frozen(Path(cfg["out"]) / "config.ini", "eval", cfg)
    model, vocab, tok = load_bundle(cfg["checkpoint"])
    manifest = load_manifest(cfg["manifest"]).subset(text_only=False)
    if not len(manifest):
        raise ValueError("evaluation manifest has no image-text records")
    data = prepare_data(manifest, vocab, tok)
    metrics = evaluate(model, [data.pairs[r] for r in manifest.records], vocab, cfg["prefix_mode"],
                       cfg["mask_strategy"], cfg["seed"], cfg["batch_size"], cfg["bleu"])
    lines = [f"{k}\t{v:.6f}" for k, v in metrics.items()]
    print("\n".join(lines))
    if cfg["out"]:
        (Path(cfg["out"]) / "metrics.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_selftest(cfg: dict) -> int:
    from . import diagnostics
    from .autodiff import ops

    if cfg["out"]:
        write_frozen(Path(cfg["out"]) / "config.ini", "selftest", cfg)
    original = ops._gelu_grad
    if cfg["inject_fault"] == "gelu-sign":
        ops._gelu_grad = lambda x, t: -original(x, t)
    try:
        checks = diagnostics.run_all(range(cfg["grad_seeds"]))
    finally:
        ops._gelu_grad = original
    report = diagnostics.format_report(checks)
    print(report, end="")
    if cfg["out"]:
        (Path(cfg["out"]) / "selftest.txt").write_text(report, encoding="utf-8")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_NUMERIC


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "build-vocab": cmd_build_vocab,
    "train-vq": cmd_train_vq,
    "train": cmd_train,
    "caption": cmd_caption,
    "paint": cmd_paint,
    "eval": cmd_eval,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    from .data import ImageReadError, ManifestError
    from .text_tokenizer import VocabError
    from .training import TrainingAborted

    parser = build_parser()
    try:
        threads = os.environ.get("PMM_THREADS")
        if threads is not None and not (threads.isdigit() and int(threads) > 0):
            raise UsageError(f"PMM_THREADS must be a positive integer, got {threads!r}")
        ns = parser.parse_args(argv)
        if not ns.command:
            raise UsageError(parser.format_usage())
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run 'prefixmm COMMAND --help' for the options of a command", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAborted, NonFiniteError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, ImageReadError, FormatError, VocabError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
