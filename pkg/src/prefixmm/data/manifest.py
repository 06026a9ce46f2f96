"""Dataset manifests, mixture weights, prompt templates and batch sampling.

A manifest is a UTF-8 file with one source per line::

    <source-tag> TAB <records-file> TAB <declared-count> [TAB <weight>]

Record files of image-text sources hold ``image-path TAB caption TAB source``
per line. A source tagged ``text-only`` points at a plain file with one
document per line. Relative paths resolve against the referring file.
Blank lines and lines starting with ``#`` are skipped.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TEXT_ONLY = "text-only"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    image: Path | None
    caption: str
    source: str


@dataclass
class Source:
    name: str
    path: Path
    records: list[PairRecord]
    weight: float | None = None

    @property
    def text_only(self) -> bool:
        return self.name == TEXT_ONLY


@dataclass
class DatasetManifest:
    path: Path
    sources: list[Source]

    def __len__(self) -> int:
        return sum(len(s.records) for s in self.sources)

    @property
    def records(self) -> list[PairRecord]:
        return [r for s in self.sources for r in s.records]

    def subset(self, text_only: bool) -> "DatasetManifest":
        return DatasetManifest(self.path, [s for s in self.sources if s.text_only == text_only])


def _lines(path: Path):
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield lineno, line


def load_manifest(path: str | Path, check_images: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    sources: list[Source] = []
    problems: list[str] = []
    for lineno, line in _lines(path):
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(fields)}")
        name, rel, count = fields[:3]
        try:
            declared = int(count)
            weight = float(fields[3]) if len(fields) == 4 else None
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: malformed count or weight") from None
        if weight is not None and weight < 0:
            raise ManifestError(f"{path}:{lineno}: negative weight")
        rpath = (path.parent / rel).resolve()
        if not rpath.is_file():
            problems.append(f"{path}:{lineno}: missing records file {rpath}")
            continue
        records = _load_records(rpath, name)
        if len(records) != declared:
            problems.append(f"{path}:{lineno}: source {name!r} declares {declared} records, found {len(records)}")
        if check_images:
            for r in records:
                if r.image is not None and not r.image.is_file():
                    problems.append(f"{rpath}: missing image {r.image}")
        sources.append(Source(name, rpath, records, weight))
    if problems:
        raise ManifestError("\n".join(problems))
    if not sources:
        raise ManifestError(f"{path}: manifest lists no sources")
    return DatasetManifest(path, sources)


def _load_records(path: Path, source: str) -> list[PairRecord]:
    out = []
    if source == TEXT_ONLY:
        for _, line in _lines(path):
            out.append(PairRecord(None, line.strip(), source))
        return out
    for lineno, line in _lines(path):
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"{path}:{lineno}: expected image-path, caption, source; got {len(fields)} fields")
        img, caption, tag = fields
        if not img:
            raise ManifestError(f"{path}:{lineno}: image path is empty")
        out.append(PairRecord((path.parent / img).resolve(), caption, tag))
    return out


@dataclass(frozen=True)
class MixtureSpec:
    names: tuple[str, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.weights):
            raise ValueError("one weight per source")
        if any(w < 0 for w in self.weights):
            raise ValueError("mixture weights must be non-negative")
        total = sum(self.weights)
        if total <= 0:
            raise ValueError("at least one mixture weight must be positive")
        object.__setattr__(self, "weights", tuple(w / total for w in self.weights))

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, overrides: dict[str, float] | None = None) -> "MixtureSpec":
        """Declared weights where given, otherwise proportional to source size."""
        names, weights = [], []
        for s in manifest.sources:
            w = s.weight if s.weight is not None else float(len(s.records))
            if overrides and s.name in overrides:
                w = overrides[s.name]
            names.append(s.name)
            weights.append(w)
        return cls(tuple(names), tuple(weights))


def sample_batch(manifest: DatasetManifest, mixture: MixtureSpec, batch_size: int,
                 rng: np.random.Generator) -> list[PairRecord]:
    """Source drawn i.i.d. by mixture weight, then a record uniformly within it."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    by_name = {s.name: s for s in manifest.sources}
    srcs = [by_name[n] for n in mixture.names]
    probs = np.asarray(mixture.weights)
    for s, p in zip(srcs, probs):
        if p > 0 and not s.records:
            raise ValueError(f"source {s.name!r} has positive weight but no records")
    picks = rng.choice(len(srcs), size=batch_size, p=probs)
    out = []
    for k in picks:
        recs = srcs[k].records
        out.append(recs[int(rng.integers(len(recs)))])
    return out


# -- prompt templates ---------------------------------------------------------------

_PLACEHOLDER = re.compile(r"\[(LABEL|OBJ_A|OBJ_B)\]")


@dataclass(frozen=True)
class PromptTemplate:
    text: str

    @property
    def placeholders(self) -> tuple[str, ...]:
        return tuple(_PLACEHOLDER.findall(self.text))


VISION_TEMPLATES = (PromptTemplate("A picture of [LABEL]"), PromptTemplate("The image contains [LABEL]"))
OBJECT_TEMPLATE = PromptTemplate("This image contains [OBJ_A] and [OBJ_B]")


def apply_prompt(template: PromptTemplate | str, label: str | Sequence[str]) -> str:
    """Fill ``[LABEL]`` from a string, or ``[OBJ_A]``/``[OBJ_B]`` from a pair of names."""
    tpl = template if isinstance(template, PromptTemplate) else PromptTemplate(template)
    holders = tpl.placeholders
    if isinstance(label, str):
        if holders != ("LABEL",):
            raise ValueError(f"template {tpl.text!r} needs exactly one [LABEL] placeholder")
        return tpl.text.replace("[LABEL]", label)
    objs = tuple(label)
    if sorted(holders) != ["OBJ_A", "OBJ_B"] or len(objs) != 2:
        raise ValueError(f"template {tpl.text!r} cannot take objects {objs}")
    return tpl.text.replace("[OBJ_A]", objs[0]).replace("[OBJ_B]", objs[1])
