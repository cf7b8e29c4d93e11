"""Flat ``key = value`` pipeline configuration and dataset manifests."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .crf import CRFParams
from .errors import InvalidArgument
from .textbank import DEFAULT_TEMPLATE, FUSION_MODES, ClassVocabulary, load_vocabulary

DEFAULTS = {
    "backbone.weights": "mock:0",
    "backbone.pooling_mode": "avg_token",
    "backbone.logit_scale": 100.0,
    "backbone.attention_block": -1,
    "backbone.device": "cpu",
    "text.vocabulary": "voc",
    "text.background": "default",
    "text.template": DEFAULT_TEMPLATE,
    "text.fusion": "sentence",
    "camgen.softmax": True,
    "caa.lambda": 0.4,
    "caa.t": 2,
    "caa.sinkhorn_tol": 1e-4,
    "caa.sinkhorn_max_iters": 100,
    "caa.class_aware": True,
    "crf.enabled": True,
    "crf.iterations": 10,
    "crf.smooth_weight": 3.0,
    "crf.smooth_sxy": 3.0,
    "crf.appearance_weight": 4.0,
    "crf.appearance_sxy": 121.0,
    "crf.appearance_srgb": 5.0,
    "mask.mu": 0.95,
    "data.root": "",
    "data.manifest": "",
    "out": "out",
}

HELP = {
    "backbone.weights": "mock:<seed>, a local CLIP directory, or a hub id",
    "backbone.pooling_mode": "avg_token or cls_token",
    "backbone.attention_block": "block whose attention feeds the affinity (-1 = last)",
    "text.background": "default (dataset set), none, voc, coco, or a file",
    "text.fusion": "synonym fusion: sentence, feature or cam",
    "caa.lambda": "CAM threshold for class-aware box masks",
    "caa.t": "affinity propagation steps",
    "mask.mu": "confidence below which pixels are ignored (255)",
    "data.root": "directory the manifest paths are relative to (default: the manifest's)",
}


def parse_value(key: str, raw):
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return type(default)(raw)
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidArgument(f"{key}: expected a boolean, got {raw!r}")
    try:
        return type(default)(raw)
    except ValueError:
        raise InvalidArgument(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


class PipelineConfig:
    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise InvalidArgument(f"unknown config key {k!r}")
            merged[k] = parse_value(k, v)
        self.values = merged
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        return PipelineConfig({**self.values, **overrides})

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "PipelineConfig":
        values = {}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidArgument(f"{path}:{n}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        values.update(overrides or {})
        return cls(values)

    def validate(self):
        v = self.values
        if not 0 <= v["caa.lambda"] <= 1:
            raise InvalidArgument("caa.lambda must lie in [0, 1]")
        if not 0.5 <= v["mask.mu"] <= 1:
            raise InvalidArgument("mask.mu must lie in [0.5, 1]")
        if v["caa.t"] < 0:
            raise InvalidArgument("caa.t must be >= 0")
        if v["text.fusion"] not in FUSION_MODES:
            raise InvalidArgument(f"text.fusion must be one of {FUSION_MODES}")
        if v["backbone.pooling_mode"] not in ("avg_token", "cls_token"):
            raise InvalidArgument("backbone.pooling_mode must be avg_token or cls_token")
        if v["text.template"].count("{}") != 1:
            raise InvalidArgument("text.template needs exactly one {} placeholder")

    def dump(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    def crf_params(self) -> CRFParams:
        v = self.values
        return CRFParams(
            iterations=v["crf.iterations"],
            smooth_weight=v["crf.smooth_weight"],
            smooth_sxy=v["crf.smooth_sxy"],
            appearance_weight=v["crf.appearance_weight"],
            appearance_sxy=v["crf.appearance_sxy"],
            appearance_srgb=v["crf.appearance_srgb"],
        )

    def vocabulary(self) -> ClassVocabulary:
        bg = self.values["text.background"]
        return load_vocabulary(self.values["text.vocabulary"], None if bg == "default" else bg,
                               self.values["text.template"])


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: Path
    class_ids: tuple
    gt_path: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    entries: tuple

    def __len__(self):
        return len(self.entries)


def load_manifest(path, vocab: ClassVocabulary, root=None, check_images: bool = True) -> DatasetManifest:
    """Read ``relative/image/path<TAB>class[,class...][<TAB>gt/mask/path]`` lines."""
    path = Path(path)
    if not path.is_file():
        raise InvalidArgument(f"manifest {path} not found")
    root = Path(root) if root is not None else path.parent
    entries, seen = [], set()
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2 or not parts[1].strip():
            raise InvalidArgument(f"{path}:{n}: image has no class labels")
        rel = parts[0].strip()
        ids = tuple(sorted({vocab.id_of(c.strip()) for c in parts[1].split(",") if c.strip()}))
        if not ids:
            raise InvalidArgument(f"{path}:{n}: image has no class labels")
        image_id = Path(rel).stem
        if image_id in seen:
            raise InvalidArgument(f"{path}:{n}: duplicate image id {image_id!r}")
        seen.add(image_id)
        img = root / rel
        if check_images and not img.is_file():
            raise InvalidArgument(f"{path}:{n}: image {img} does not exist")
        gt = root / parts[2].strip() if len(parts) > 2 and parts[2].strip() else None
        entries.append(ManifestEntry(image_id, img, ids, gt))
    if not entries:
        raise InvalidArgument(f"manifest {path} is empty")
    return DatasetManifest(root, tuple(entries))
