"""Pipeline plumbing: validated YAML config, run manifests, resumability.

A run is a pure function of (config, seed): each stage records the content
hashes of its inputs and outputs in a manifest, and a rerun may skip any
stage whose recorded hashes still match the files on disk.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from . import __version__

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# ---------------------------------------------------------------------------
# configuration sections


@dataclass(frozen=True)
class PathsConfig:
    subject_table: str = ""
    image_root: str = "."
    output_root: str = "out"


@dataclass(frozen=True)
class PreprocessSection:
    clip_low_pct: float = 1.0
    clip_high_pct: float = 99.0
    threshold: str = "otsu"  # or a fixed numeric value as string/float
    morph_radius: int = 2


@dataclass(frozen=True)
class RegistrationSection:
    metric: str = "ssd"
    lam: float = 1e-3
    levels: int = 3
    max_iters: int = 100
    level_max_iters: tuple = (100, 60, 25)
    affine_max_iters: int = 100


@dataclass(frozen=True)
class AtlasSection:
    include_affine_in_unbiasing: bool = True
    structures: tuple = ()  # (label_id, name) pairs; empty = all labels found


@dataclass(frozen=True)
class VbmSection:
    sigma_mm: float = 4.0
    alpha: float = 0.05
    two_sided: bool = True
    correction: str = "fdr"


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessSection = field(default_factory=PreprocessSection)
    registration: RegistrationSection = field(default_factory=RegistrationSection)
    atlas: AtlasSection = field(default_factory=AtlasSection)
    vbm: VbmSection = field(default_factory=VbmSection)
    workers: int = 1
    seed: int = 0

    def to_dict(self) -> dict:
        out: dict = {"schema_version": SCHEMA_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                out[f.name] = {g.name: _plain(getattr(v, g.name)) for g in fields(v)}
            else:
                out[f.name] = _plain(v)
        return out

    def content_hash(self) -> str:
        return sha256_bytes(json.dumps(self.to_dict(), sort_keys=True).encode())


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    return v


_SECTIONS = {
    "paths": PathsConfig,
    "preprocess": PreprocessSection,
    "registration": RegistrationSection,
    "atlas": AtlasSection,
    "vbm": VbmSection,
}


def _build_section(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {', '.join(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}"
        )
    allowed = set(_SECTIONS) | {"workers", "seed"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data[name], name)
    for scalar in ("workers", "seed"):
        if scalar in data:
            v = data[scalar]
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{scalar} must be a non-negative integer")
            kwargs[scalar] = v
    cfg = PipelineConfig(**kwargs)
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def load_config(path) -> PipelineConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from e
    return config_from_dict(data if data is not None else {})


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


# ---------------------------------------------------------------------------
# hashing and manifests


def sha256_bytes(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class StageRecord:
    stage: str
    inputs: dict  # path (str, relative where possible) -> sha256
    outputs: dict
    seconds: float
    warnings: list = field(default_factory=list)


@dataclass
class RunManifest:
    """Content-hash ledger of one pipeline run."""

    config_hash: str
    version: str = __version__
    stages: list = field(default_factory=list)

    def add_stage(
        self,
        stage: str,
        inputs: dict,
        outputs: dict,
        seconds: float,
        warnings: list | None = None,
    ) -> StageRecord:
        rec = StageRecord(stage, dict(inputs), dict(outputs), seconds, list(warnings or []))
        self.stages = [s for s in self.stages if s.stage != stage] + [rec]
        return rec

    def stage(self, name: str) -> StageRecord | None:
        for s in self.stages:
            if s.stage == name:
                return s
        return None

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "version": self.version,
            "stages": [
                {
                    "stage": s.stage,
                    "inputs": s.inputs,
                    "outputs": s.outputs,
                    "seconds": s.seconds,
                    "warnings": s.warnings,
                }
                for s in self.stages
            ],
        }

    def output_hashes(self) -> dict:
        out: dict = {}
        for s in self.stages:
            out.update(s.outputs)
        return out

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        m = RunManifest(config_hash=data["config_hash"], version=data.get("version", ""))
        for s in data.get("stages", []):
            m.stages.append(
                StageRecord(s["stage"], s["inputs"], s["outputs"], s["seconds"], s.get("warnings", []))
            )
        return m


def hash_paths(paths, root=None) -> dict:
    """path -> sha256 for a list of files; keys are relative to root if given."""
    out = {}
    for p in paths:
        p = Path(p)
        key = str(p.relative_to(root)) if root is not None else str(p)
        out[key] = sha256_file(p)
    return out


def stage_is_current(
    manifest: RunManifest | None,
    stage: str,
    inputs: dict,
    root: Path,
) -> bool:
    """True when the stage's recorded inputs match and every recorded output
    still exists on disk with its recorded content hash."""
    if manifest is None:
        return False
    rec = manifest.stage(stage)
    if rec is None or rec.inputs != inputs:
        return False
    for rel, digest in rec.outputs.items():
        p = root / rel
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


class StageTimer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
        return False
