"""Audit configuration: a JSON file whose fields the CLI flags can override."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import DEFAULT_TEMPLATE, template_segments
from .errors import ConfigError

DEFAULT_EXPLANATION_PROMPT = "Explain why this email is {label}."
ESTIMATORS = ("mc", "exact", "auto")
BACKENDS = ("toy", "remote")
EXPLANATION_SCORERS = ("native", "classifier", "constant")


@dataclass
class AuditConfig:
    corpus_paths: list[str] = field(default_factory=list)
    corpus_format: str | None = None
    backend: str = "toy"
    checkpoint: str | None = None
    remote_url: str | None = None
    remote_model: str | None = None
    remote_timeout: float = 30.0
    remote_max_retries: int = 3
    remote_max_in_flight: int = 4
    model_name: str | None = None
    n_samples: int = 2000
    exact_limit: int = 14
    estimator: str = "mc"
    antithetic: bool = True
    seed: int = 0
    max_tokens: int = 256
    k_top: int = 10
    explain_k: int = 3
    per_class_eval_count: int = 20
    output_dir: str = "audit_out"
    explanation_prompt: str = DEFAULT_EXPLANATION_PROMPT
    explanation_scorer: str = "native"
    attribute_template: bool = False
    template: str = DEFAULT_TEMPLATE
    cache_path: str | None = None
    n_jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("n_samples", "exact_limit", "max_tokens", "k_top", "explain_k",
                     "per_class_eval_count", "remote_max_in_flight", "n_jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.remote_timeout <= 0:
            raise ConfigError("remote_timeout must be positive")
        if self.remote_max_retries < 0:
            raise ConfigError("remote_max_retries must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}, got {self.estimator!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.explanation_scorer not in EXPLANATION_SCORERS:
            raise ConfigError(
                f"explanation_scorer must be one of {EXPLANATION_SCORERS}, got {self.explanation_scorer!r}"
            )
        template_segments(self.template)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AuditConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "AuditConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "AuditConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        """Short digest of the settings that can change audit results.

        Paths to outputs and caches are excluded so relocating them keeps
        reports byte-identical.
        """
        d = self.to_dict()
        for volatile in ("output_dir", "cache_path", "n_jobs", "corpus_paths"):
            d.pop(volatile)
        blob = json.dumps(d, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]
