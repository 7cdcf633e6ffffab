"""Declarative run configuration (YAML) with line-numbered validation errors.

Example::

    seed: 0
    output_dir: runs/desk
    model: {variant: fanet, base_width: 8, input_size: 96}
    train: {preset: desk, steps: 200}
    data:
      train: {synthetic: {n: 64, seed: 1}}
      eval: {synthetic: {n: 16, seed: 2}}
    augment: {p: 0.6}

``data.train`` / ``data.eval`` may instead name a VOC-style pair
``{images_dir: ..., masks_dir: ...}``; ``data.palette`` maps class ids to
RGB triples for mask decoding.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import DEFAULT_PALETTE, AugmentConfig, SegmentationSample, load_voc_dir, synth_orange
from .errors import ConfigError
from .models import ArchitectureSpec
from .train import TrainConfig

TOP_LEVEL = {"seed", "output_dir", "model", "train", "data", "augment"}


def _line_index(text: str) -> dict[tuple, int]:
    """Map key paths (tuples) to 1-based line numbers of their YAML nodes."""
    index: dict[tuple, int] = {}

    def walk(node, path):
        index.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                sub = path + (key.value,)
                index[sub] = key.start_mark.line + 1
                walk(value, sub)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, path + (i,))

    root = yaml.compose(text)
    if root is not None:
        walk(root, ())
    return index


class _Located:
    """Raises ConfigError prefixed with ``source:line`` for a key path."""

    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source, self.lines = source, lines

    def error(self, path: tuple, message: str) -> ConfigError:
        probe = path
        while probe and probe not in self.lines:
            probe = probe[:-1]
        line = self.lines.get(probe, 1)
        return ConfigError(f"{self.source}:{line}: {message}")


@dataclass
class DataSource:
    synthetic: dict | None = None  # {n, seed, size}
    images_dir: str | None = None
    masks_dir: str | None = None

    def load(self, palette: dict, size: int) -> list[SegmentationSample]:
        if self.synthetic is not None:
            return synth_orange(int(self.synthetic.get("seed", 0)), int(self.synthetic.get("n", 0)),
                                int(self.synthetic.get("size", size)))
        return load_voc_dir(self.images_dir, self.masks_dir, palette)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class RunConfig:
    model: ArchitectureSpec
    train: TrainConfig
    augment: AugmentConfig
    train_data: DataSource
    eval_data: DataSource | None = None
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    output_dir: str = "runs/default"
    seed: int = 0
    preset: str = "desk"

    def to_dict(self) -> dict[str, Any]:
        train = self.train.to_dict()
        return {
            "seed": self.seed,
            "output_dir": str(self.output_dir),
            "model": self.model.to_dict(),
            "train": {"preset": self.preset, **train},
            "data": {
                "train": self.train_data.to_dict(),
                **({"eval": self.eval_data.to_dict()} if self.eval_data else {}),
                "palette": {int(k): list(v) for k, v in self.palette.items()},
            },
            "augment": asdict(self.augment),
        }

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path


def _set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r}: {k!r} is not a mapping")
    node[keys[-1]] = value


def parse_overrides(items) -> list[tuple[str, Any]]:
    out = []
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, raw = item.split("=", 1)
        out.append((key.strip(), yaml.safe_load(raw)))
    return out


def _section(loc: _Located, doc: dict, name: str, allowed: set[str]) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise loc.error((name,), f"'{name}' must be a mapping")
    for key in sec:
        if key not in allowed:
            raise loc.error((name, key), f"unknown field '{name}.{key}'")
    return dict(sec)


def _data_source(loc: _Located, spec: Any, path: tuple) -> DataSource:
    if not isinstance(spec, dict):
        raise loc.error(path, "data source must be a mapping")
    if "synthetic" in spec:
        syn = spec["synthetic"] or {}
        if not isinstance(syn, dict) or set(syn) - {"n", "seed", "size"}:
            raise loc.error(path + ("synthetic",), "synthetic takes only n, seed, size")
        if int(syn.get("n", 0)) < 0:
            raise loc.error(path + ("synthetic", "n"), "n must be >= 0")
        return DataSource(synthetic=dict(syn))
    if "images_dir" in spec and "masks_dir" in spec:
        return DataSource(images_dir=str(spec["images_dir"]), masks_dir=str(spec["masks_dir"]))
    raise loc.error(path, "data source needs 'synthetic' or both 'images_dir' and 'masks_dir'")


def parse_palette(raw: Any, loc: _Located | None = None, path: tuple = ("data", "palette")) -> dict:
    try:
        palette = {int(k): tuple(int(c) for c in v) for k, v in raw.items()}
        if any(len(v) != 3 or not all(0 <= c <= 255 for c in v) for v in palette.values()):
            raise ValueError
    except (AttributeError, TypeError, ValueError):
        msg = "palette must map class ids to [r, g, b] triples in 0..255"
        raise (loc.error(path, msg) if loc else ConfigError(msg)) from None
    return palette


def load_run_config(path, overrides=(), output_dir: str | None = None, seed: int | None = None) -> RunConfig:
    """Parse and validate a run config; flags override document fields."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text()
    try:
        lines = _line_index(text)
        doc = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigError(f"{path}:{line}: invalid YAML ({getattr(exc, 'problem', exc)})") from None
    loc = _Located(str(path), lines)
    if not isinstance(doc, dict):
        raise loc.error((), "config must be a mapping")
    doc = copy.deepcopy(doc)
    for key, value in parse_overrides(overrides):
        _set_path(doc, key, value)
    if output_dir is not None:
        doc["output_dir"] = output_dir
    if seed is not None:
        doc["seed"] = seed

    for key in doc:
        if key not in TOP_LEVEL:
            raise loc.error((key,), f"unknown top-level field '{key}'")
    run_seed = int(doc.get("seed", 0))

    model_sec = _section(loc, doc, "model", {f.name for f in fields(ArchitectureSpec)})
    try:
        arch = ArchitectureSpec(**{**ArchitectureSpec.desk().to_dict(), **model_sec}).validate()
    except (ConfigError, TypeError) as exc:
        bad = "variant" if "variant" in str(exc) else next(iter(model_sec), None)
        raise loc.error(("model", bad) if bad else ("model",), str(exc)) from None

    train_sec = _section(loc, doc, "train", TrainConfig.field_names() | {"preset"})
    preset = train_sec.pop("preset", "desk")
    train_sec.setdefault("seed", run_seed)
    try:
        train = TrainConfig.preset(preset, **train_sec)
    except (ConfigError, TypeError) as exc:
        raise loc.error(("train",), str(exc)) from None

    aug_sec = _section(loc, doc, "augment", {f.name for f in fields(AugmentConfig)})
    aug_sec.setdefault("seed", run_seed)
    try:
        augment = AugmentConfig(**aug_sec)
    except (ConfigError, TypeError) as exc:
        raise loc.error(("augment",), str(exc)) from None
    if augment.p > 0 and augment.crop_size > arch.input_size + 2 * augment.crop_padding:
        raise loc.error(("augment", "crop_size") if "crop_size" in aug_sec else ("model", "input_size"),
                        f"crop_size {augment.crop_size} exceeds the padded {arch.input_size}px input "
                        f"(padding {augment.crop_padding})")

    data_sec = _section(loc, doc, "data", {"train", "eval", "palette"})
    if "train" not in data_sec:
        raise loc.error(("data",), "data.train is required")
    train_data = _data_source(loc, data_sec["train"], ("data", "train"))
    eval_data = _data_source(loc, data_sec["eval"], ("data", "eval")) if data_sec.get("eval") else None
    palette = parse_palette(data_sec["palette"], loc) if "palette" in data_sec else dict(DEFAULT_PALETTE)

    return RunConfig(model=arch, train=train, augment=augment, train_data=train_data, eval_data=eval_data,
                     palette=palette, output_dir=str(doc.get("output_dir", "runs/default")), seed=run_seed,
                     preset=preset)
