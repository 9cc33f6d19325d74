"""Pipeline configuration loaded from a TOML file.

Sections: ``[arch_fit]``, ``[flatten]``, ``[render]``, ``[backend]``,
``[eval]``, ``[variant]`` and ``[paths]``; ``seed`` is top level. Every key
is optional and defaults to the full pipeline (SSP rendering, flattening on,
knowledge base on) with the deterministic mock backend.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .arch_fit import FitConfig
from .dkb import default_ontology_path
from .flatten import DEFAULT_PADDING, DEFAULT_SAMPLES
from .render import RenderConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FlattenConfig:
    samples: int = DEFAULT_SAMPLES
    padding: float = DEFAULT_PADDING

    def __post_init__(self):
        if self.samples < 2:
            raise ValueError("flatten.samples must be >= 2")
        if self.padding < 0:
            raise ValueError("flatten.padding must be >= 0")


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    url: str = ""
    model_name: str = "mock"
    mode: str = "non-thinking"
    max_concurrency: int = 1
    timeout_s: float = 120.0
    api_key_env: str = "ARCHMAP_API_KEY"
    thinking_flag: str = ""
    attempts: int = 3
    backoff_s: float = 0.5
    # case id -> corruption kind, mock only
    corrupt: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("mock", "http"):
            raise ValueError("backend.kind must be 'mock' or 'http'")
        if self.kind == "http" and not self.url:
            raise ValueError("backend.url is required for the http backend")
        if self.mode not in ("thinking", "non-thinking"):
            raise ValueError("backend.mode must be 'thinking' or 'non-thinking'")
        if self.max_concurrency < 1 or self.attempts < 1:
            raise ValueError("backend.max_concurrency and backend.attempts must be >= 1")


@dataclass(frozen=True)
class VariantConfig:
    render_mode: str = "ssp"
    flatten_enabled: bool = True
    dkb_enabled: bool = True

    def __post_init__(self):
        if self.render_mode not in ("ssp", "uvp"):
            raise ValueError("variant.render_mode must be 'ssp' or 'uvp'")


@dataclass(frozen=True)
class EvalConfig:
    gt_dir: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    flatten: FlattenConfig = field(default_factory=FlattenConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    seed: int = 0
    input_dir: str = ""
    output_dir: str = ""
    ontology: str = ""
    save_intermediates: bool = False

    def with_variant(self, render_mode: str, flatten_enabled: bool, dkb_enabled: bool) -> "PipelineConfig":
        return replace(self, variant=VariantConfig(render_mode, flatten_enabled, dkb_enabled))

    def fingerprint(self) -> str:
        """Hash of everything that influences a case outcome (paths and
        concurrency excluded)."""
        doc = {
            "fit": asdict(self.fit),
            "flatten": asdict(self.flatten),
            "render": asdict(self.render),
            "backend": {k: v for k, v in asdict(self.backend).items() if k not in ("max_concurrency", "timeout_s")},
            "variant": asdict(self.variant),
            "seed": self.seed,
            "ontology": _ontology_digest(self.ontology),
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True, default=list).encode()).hexdigest()[:16]


def _ontology_digest(path: str) -> str:
    p = Path(path) if path else default_ontology_path()
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from exc


def config_from_dict(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    sections = {"arch_fit": FitConfig, "flatten": FlattenConfig, "render": RenderConfig,
                "backend": BackendConfig, "eval": EvalConfig, "variant": VariantConfig}
    top = {"seed", "paths", "save_intermediates"} | set(sections)
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {}
    for name, cls in sections.items():
        kwargs[name] = _section(cls, dict(data.get(name, {})), name)
    paths = dict(data.get("paths", {}))
    bad = set(paths) - {"input_dir", "output_dir", "ontology"}
    if bad:
        raise ConfigError(f"unknown keys in [paths]: {sorted(bad)}")
    base = base_dir or Path.cwd()
    resolved = {k: str((base / v).resolve()) if v else "" for k, v in paths.items()}
    if kwargs["eval"].gt_dir:
        kwargs["eval"] = EvalConfig(str((base / kwargs["eval"].gt_dir).resolve()))
    cfg = PipelineConfig(
        fit=kwargs["arch_fit"], flatten=kwargs["flatten"], render=kwargs["render"], backend=kwargs["backend"],
        eval=kwargs["eval"], variant=kwargs["variant"], seed=int(data.get("seed", 0)),
        save_intermediates=bool(data.get("save_intermediates", False)), **resolved,
    )
    check_paths(cfg)
    return cfg


def check_paths(cfg: PipelineConfig) -> None:
    """Every referenced input path must exist when the run starts."""
    for name in ("input_dir", "ontology"):
        value = getattr(cfg, name)
        if value and not Path(value).exists():
            raise ConfigError(f"{name} {value} does not exist")
    if cfg.eval.gt_dir and not Path(cfg.eval.gt_dir).is_dir():
        raise ConfigError(f"eval.gt_dir {cfg.eval.gt_dir} is not a directory")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = tomllib.loads(p.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return config_from_dict(data, p.parent)
