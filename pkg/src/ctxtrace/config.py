"""Run configuration and run identity.

One JSON document configures a whole run; every leaf field can be overridden
on the command line by a flag of the same dotted name (flags win).  The
manifest hash identifies a run: sha256 over the tool version plus the fully
resolved config (seed included), so every stage launched from the same config
stamps the same hash into its output headers, and mixed-run inputs are
detectable downstream.  Input-file digests and the start timestamp are kept
on the manifest object for logs but never written into outputs, which keeps
scripted reruns byte-identical.
"""
from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import __version__
from .analysis import AGGREGATIONS, DEFAULT_MATCH_THRESHOLD, DEFAULT_SLICES, SIM_METRICS
from .backends import BackendSpec, Bm25Params
from .errors import ValidationError
from .pipeline import (
    DEFAULT_ABSTENTIONS,
    DEFAULT_LENGTH_CANDIDATES,
    ORDERS,
    PromptSet,
)

RETRIEVER_KINDS = ("bm25", "golden", "ingest")


@dataclass
class RetrieverConfig:
    kind: str = "bm25"
    corpus_path: str | None = None
    k1: float = 1.2
    b: float = 0.75
    gold_path: str | None = None
    results_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in RETRIEVER_KINDS:
            raise ValidationError(f"retriever kind must be one of {RETRIEVER_KINDS}")
        Bm25Params(self.k1, self.b, self.corpus_path)

    def require_path(self) -> str:
        needed = {"bm25": self.corpus_path, "golden": self.gold_path,
                  "ingest": self.results_path}[self.kind]
        if not needed:
            raise ValidationError(f"{self.kind} retriever needs its input path configured")
        return needed


@dataclass
class RunConfig:
    reader: BackendSpec
    generator: BackendSpec
    retriever: RetrieverConfig
    order: str = "random"
    seed: int = 0
    workers: int = 1
    length_candidates: tuple[int, ...] = DEFAULT_LENGTH_CANDIDATES
    abstention_set: tuple[str, ...] = DEFAULT_ABSTENTIONS
    prompts: PromptSet = field(default_factory=PromptSet)
    slice_count: int = DEFAULT_SLICES
    sim_metric: str = "jaccard"
    aggregation: str = "max"
    match_threshold: float = DEFAULT_MATCH_THRESHOLD

    def __post_init__(self) -> None:
        if self.order not in ORDERS:
            raise ValidationError(f"order must be one of {ORDERS}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1: {self.workers}")
        if self.slice_count < 1:
            raise ValidationError(f"slice_count must be >= 1: {self.slice_count}")
        if self.sim_metric not in SIM_METRICS:
            raise ValidationError(f"sim_metric must be one of {SIM_METRICS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"aggregation must be one of {AGGREGATIONS}")
        if not self.length_candidates or any(n <= 0 for n in self.length_candidates):
            raise ValidationError("length_candidates must be positive integers")
        if not 0 < self.match_threshold <= 2:
            raise ValidationError(f"match_threshold out of range (0, 2]: {self.match_threshold}")


_DEFAULTS: dict[str, Any] = {
    "reader": {
        "kind": "scripted", "endpoint": None, "model_name": None,
        "temperature": 0.0, "timeout": 30.0, "max_retries": 3, "script_path": None,
    },
    "generator": {
        "kind": "scripted", "endpoint": None, "model_name": None,
        "temperature": 0.0, "timeout": 30.0, "max_retries": 3, "script_path": None,
    },
    "retriever": {
        "kind": "bm25", "corpus_path": None, "k1": 1.2, "b": 0.75,
        "gold_path": None, "results_path": None,
    },
    "prompts": {
        "generation": PromptSet.generation,
        "generation_unconstrained": PromptSet.generation_unconstrained,
        "reading": PromptSet.reading,
        "closed_book": PromptSet.closed_book,
    },
    "order": "random",
    "seed": 0,
    "workers": 1,
    "length_candidates": list(DEFAULT_LENGTH_CANDIDATES),
    "abstention_set": list(DEFAULT_ABSTENTIONS),
    "slice_count": DEFAULT_SLICES,
    "sim_metric": "jaccard",
    "aggregation": "max",
    "match_threshold": DEFAULT_MATCH_THRESHOLD,
}

# Leaf fields, their coercions from command-line strings, and help strings.
# These names double as the dotted override flags.
_LIST_OF_INT = "list_of_int"
_LIST_OF_STR = "list_of_str"
CONFIG_FIELDS: dict[str, str] = {}
for _side in ("reader", "generator"):
    CONFIG_FIELDS.update({
        f"{_side}.kind": "str",
        f"{_side}.endpoint": "str",
        f"{_side}.model_name": "str",
        f"{_side}.temperature": "float",
        f"{_side}.timeout": "float",
        f"{_side}.max_retries": "int",
        f"{_side}.script_path": "str",
    })
CONFIG_FIELDS.update({
    "retriever.kind": "str",
    "retriever.corpus_path": "str",
    "retriever.k1": "float",
    "retriever.b": "float",
    "retriever.gold_path": "str",
    "retriever.results_path": "str",
    "prompts.generation": "str",
    "prompts.generation_unconstrained": "str",
    "prompts.reading": "str",
    "prompts.closed_book": "str",
    "order": "str",
    "seed": "int",
    "workers": "int",
    "length_candidates": _LIST_OF_INT,
    "abstention_set": _LIST_OF_STR,
    "slice_count": "int",
    "sim_metric": "str",
    "aggregation": "str",
    "match_threshold": "float",
})


def coerce_override(dotted: str, raw: object) -> Any:
    if dotted not in CONFIG_FIELDS:
        raise ValidationError(f"unknown config field {dotted!r}")
    if not isinstance(raw, str):
        return raw
    kind = CONFIG_FIELDS[dotted]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == _LIST_OF_INT:
            return [int(part) for part in raw.split(",") if part.strip()]
        if kind == _LIST_OF_STR:
            return [part.strip() for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ValidationError(f"cannot parse {raw!r} for config field {dotted!r}") from None
    return raw


def _deep_merge(base: dict[str, Any], extra: dict[str, Any], path: str = "") -> None:
    for key, value in extra.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValidationError(f"unknown config field {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config field {where!r} must be an object")
            _deep_merge(base[key], value, where)
        else:
            base[key] = value


def _apply_dotted(doc: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def load_config(path: str | Path | None = None,
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the config file, then dotted overrides; later wins."""
    doc = copy.deepcopy(_DEFAULTS)
    if path is not None:
        file_path = Path(path)
        if not file_path.is_file():
            raise ValidationError(f"missing config file: {file_path}")
        try:
            loaded = json.loads(file_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{file_path}: invalid JSON: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise ValidationError(f"{file_path}: config must be a JSON object")
        _deep_merge(doc, loaded)
    for dotted, value in (overrides or {}).items():
        _apply_dotted(doc, dotted, coerce_override(dotted, value))
    return _build(doc)


def _build(doc: dict[str, Any]) -> RunConfig:
    reader = BackendSpec(**doc["reader"])
    generator = BackendSpec(**doc["generator"])
    retriever = RetrieverConfig(**doc["retriever"])
    prompts = PromptSet(**doc["prompts"])
    if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
        raise ValidationError(f"seed must be an integer: {doc['seed']!r}")
    return RunConfig(
        reader=reader,
        generator=generator,
        retriever=retriever,
        order=doc["order"],
        seed=doc["seed"],
        workers=doc["workers"],
        length_candidates=tuple(doc["length_candidates"]),
        abstention_set=tuple(doc["abstention_set"]),
        prompts=prompts,
        slice_count=doc["slice_count"],
        sim_metric=doc["sim_metric"],
        aggregation=doc["aggregation"],
        match_threshold=doc["match_threshold"],
    )


def resolved_doc(cfg: RunConfig) -> dict[str, Any]:
    """The fully resolved config as a plain JSON document."""
    return {
        "reader": {
            "kind": cfg.reader.kind, "endpoint": cfg.reader.endpoint,
            "model_name": cfg.reader.model_name, "temperature": cfg.reader.temperature,
            "timeout": cfg.reader.timeout, "max_retries": cfg.reader.max_retries,
            "script_path": cfg.reader.script_path,
        },
        "generator": {
            "kind": cfg.generator.kind, "endpoint": cfg.generator.endpoint,
            "model_name": cfg.generator.model_name, "temperature": cfg.generator.temperature,
            "timeout": cfg.generator.timeout, "max_retries": cfg.generator.max_retries,
            "script_path": cfg.generator.script_path,
        },
        "retriever": {
            "kind": cfg.retriever.kind, "corpus_path": cfg.retriever.corpus_path,
            "k1": cfg.retriever.k1, "b": cfg.retriever.b,
            "gold_path": cfg.retriever.gold_path, "results_path": cfg.retriever.results_path,
        },
        "prompts": {
            "generation": cfg.prompts.generation,
            "generation_unconstrained": cfg.prompts.generation_unconstrained,
            "reading": cfg.prompts.reading,
            "closed_book": cfg.prompts.closed_book,
        },
        "order": cfg.order,
        "seed": cfg.seed,
        "workers": cfg.workers,
        "length_candidates": list(cfg.length_candidates),
        "abstention_set": list(cfg.abstention_set),
        "slice_count": cfg.slice_count,
        "sim_metric": cfg.sim_metric,
        "aggregation": cfg.aggregation,
        "match_threshold": cfg.match_threshold,
    }


@dataclass(frozen=True)
class RunManifest:
    """Identity and provenance of one run."""

    config_hash: str
    tool_version: str
    input_digests: dict[str, str]
    started_at: str

    @property
    def run_id(self) -> str:
        return self.config_hash


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps({"tool_version": __version__, "config": resolved_doc(cfg)},
                           sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def file_digest(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


def build_manifest(cfg: RunConfig, inputs: dict[str, str | Path] | None = None) -> RunManifest:
    digests = {}
    for name, path in (inputs or {}).items():
        if Path(path).is_file():
            digests[name] = file_digest(path)
    return RunManifest(
        config_hash=config_hash(cfg),
        tool_version=__version__,
        input_digests=digests,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    )
