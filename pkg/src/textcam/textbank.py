"""Class vocabularies, prompt templates, synonym fusion and prompt sharpness."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateInput, InvalidArgument

FUSION_MODES = ("sentence", "feature", "cam")
DEFAULT_TEMPLATE = "a clean origami of {}."
SELECTED_PROMPT = "a clean origami {}."


@dataclass(frozen=True)
class ClassEntry:
    id: int
    canonical_name: str
    synonyms: tuple = ()

    @property
    def names(self) -> tuple:
        return self.synonyms or (self.canonical_name,)


@dataclass(frozen=True)
class ClassVocabulary:
    foreground: tuple
    background: tuple = ()
    prompt_template: str = DEFAULT_TEMPLATE
    _by_name: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.foreground]
        if ids != list(range(len(ids))):
            raise InvalidArgument("foreground ids must be dense 0..C-1 in order")
        canon = {e.canonical_name for e in self.foreground}
        clash = canon.intersection(self.background)
        if clash:
            raise InvalidArgument(f"background names overlap foreground classes: {sorted(clash)}")
        if self.prompt_template.count("{}") != 1:
            raise InvalidArgument("prompt template needs exactly one {} placeholder")
        object.__setattr__(self, "_by_name", {e.canonical_name: e.id for e in self.foreground})

    @property
    def num_classes(self) -> int:
        return len(self.foreground)

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise InvalidArgument(f"unknown class name {name!r}") from None

    def with_template(self, template: str) -> "ClassVocabulary":
        return ClassVocabulary(self.foreground, self.background, template)

    def with_background(self, background: Sequence[str]) -> "ClassVocabulary":
        return ClassVocabulary(self.foreground, tuple(background), self.prompt_template)


def _read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    return [ln.rstrip("\r\n") for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]


def _data_path(name: str):
    return resources.files("textcam") / "data" / name


def parse_vocabulary_lines(lines: Sequence[str]) -> tuple:
    entries = []
    for ln in lines:
        parts = ln.split("\t")
        if len(parts) < 2:
            raise InvalidArgument(f"bad vocabulary line {ln!r}")
        syns = tuple(s.strip() for s in parts[2].split("|") if s.strip()) if len(parts) > 2 else ()
        entries.append(ClassEntry(int(parts[0]), parts[1].strip(), syns))
    return tuple(entries)


def load_vocabulary(vocab, background=None, template: str = DEFAULT_TEMPLATE) -> ClassVocabulary:
    """Load a vocabulary.

    ``vocab`` is a path to an ``id<TAB>canonical<TAB>syn1|syn2`` file or one
    of the built-in names ``voc`` / ``coco``. ``background`` is a path, a
    built-in name, ``"none"``, or ``None`` for the dataset's default set.
    """
    builtin = vocab in ("voc", "coco")
    lines = _read_lines(_data_path(f"{vocab}_classes.tsv") if builtin else vocab)
    if background is None:
        background = vocab if builtin else "none"
    if background == "none":
        bg = ()
    elif background in ("voc", "coco"):
        bg = tuple(_read_lines(_data_path(f"{background}_background.txt")))
    else:
        bg = tuple(_read_lines(background))
    return ClassVocabulary(parse_vocabulary_lines(lines), bg, template)


def load_prompts(path=None) -> list[str]:
    """One template per line; the shipped list when ``path`` is None."""
    return _read_lines(_data_path("prompts.txt") if path is None else path)


def build_sentences(vocab: ClassVocabulary, fusion: str, target_ids: Sequence[int]) -> list:
    """Text-encoder inputs per class.

    ``sentence`` fusion joins all synonyms into one sentence; ``feature`` and
    ``cam`` fusion emit one sentence per synonym.
    """
    if fusion not in FUSION_MODES:
        raise InvalidArgument(f"unknown fusion mode {fusion!r}")
    out = []
    for cid in target_ids:
        if not 0 <= cid < vocab.num_classes:
            raise InvalidArgument(f"class id {cid} not in vocabulary")
        names = vocab.foreground[cid].names
        if fusion == "sentence":
            sentences = [vocab.prompt_template.format(", ".join(names))]
        else:
            sentences = [vocab.prompt_template.format(n) for n in names]
        out.append((cid, sentences))
    return out


def background_sentences(vocab: ClassVocabulary) -> list[str]:
    return [vocab.prompt_template.format(n) for n in vocab.background]


def fuse_class_embeddings(per_synonym_embeddings) -> np.ndarray:
    emb = np.asarray(per_synonym_embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] == 0:
        raise InvalidArgument("need at least one embedding of shape (n, dim)")
    mean = emb.mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise DegenerateInput("synonym embeddings cancel out")
    return mean / norm


def fuse_class_cams(per_synonym_cams) -> np.ndarray:
    maps = [np.asarray(m, dtype=np.float64) for m in per_synonym_cams]
    if not maps:
        raise InvalidArgument("need at least one CAM")
    if any(m.shape != maps[0].shape for m in maps):
        raise InvalidArgument("CAM shapes differ")
    return np.mean(maps, axis=0)


@dataclass(frozen=True)
class SharpnessReport:
    prompt: str
    sharpness: float
    per_image_terms: list | None = None


def sharpness(prompt: str, dataset_scores) -> SharpnessReport:
    """Sum of per-image variances over sum of per-image means of the
    target-class probabilities (population variance)."""
    terms = []
    for scores in dataset_scores:
        s = np.asarray(scores, dtype=np.float64).ravel()
        if s.size == 0:
            raise InvalidArgument("each image needs at least one target score")
        # exact zero for equal scores; var() leaves rounding residue from the mean
        var = 0.0 if s.max() == s.min() else float(s.var())
        terms.append((var, float(s.mean())))
    if not terms:
        raise InvalidArgument("no images to score")
    den = sum(m for _, m in terms)
    if den <= 0:
        raise DegenerateInput("all target scores are zero")
    return SharpnessReport(prompt, sum(v for v, _ in terms) / den, terms)


def rank_prompts(prompts: Sequence[str], scorer: Callable) -> list:
    """Score every prompt and sort ascending by sharpness (stable).

    ``scorer(prompt)`` returns a SharpnessReport or a float.
    """
    if len(prompts) == 0:
        raise InvalidArgument("need at least one prompt")
    reports = []
    for p in prompts:
        r = scorer(p)
        if not isinstance(r, SharpnessReport):
            r = SharpnessReport(p, float(r))
        reports.append(r)
    return sorted(reports, key=lambda r: r.sharpness)
