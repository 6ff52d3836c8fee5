"""Experiment manifests: one JSON file naming the data, generator, classifier and seeds of a run."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DataError, Schema
from .mtm import MtmConfig
from .vqvae import VqvaeConfig

MANIFEST_VERSION = 1
GENERATOR_KINDS = ("nimai-s", "nimai-c", "nimai-hybrid", "smote")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


SECTIONS: dict[str, dict] = {
    "data": {"train": None, "test": None, "months": []},
    "generator": {"kind": "nimai-s", "ratio": 0.5, "steps": None, "multiplier": 5, "k": 5},
    "classifier": {"kind": "builtin", "epochs": 500, "lr": 0.05, "l2": 1e-4, "batch_size": 128, "command": None, "timeout": None},
    "scoring": {"target_class": None, "exclusion": True, "threshold": 20},
    "drift": {
        "train_month": 0, "recovery_month": None, "probe_fraction": 0.01, "lo": 0.3, "hi": 0.7,
        "multiplier": 5, "budget": 64, "ratio": 0.5,
    },
    "hpo": {"n_trials": 9, "mtm_trials": 9, "eta": 3, "rung_scale": 1.0, "subsample": 10_000, "space": {}},
    "report": {"table": None},
}
TOP = {
    "schema_version": None, "name": "dataset", "schema": None, "normalize": True, "seed": 0,
    "seeds": list(range(10)), "valid_fraction": 0.2, "compare": None, "vqvae": {}, "mtm": {}, **SECTIONS,
}
_DERIVED_VQ = {"n_features", "n_classes"}
_DERIVED_MTM = {"latent_length", "codebook_size", "n_classes"}


def _reject_unknown(where: str, got: dict, allowed) -> None:
    unknown = sorted(set(got) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")


@dataclass
class Manifest:
    doc: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.doc[key]

    @property
    def schema(self) -> Schema:
        return Schema.from_dict(self.doc["schema"])

    @property
    def compare(self) -> list[str]:
        return list(self.doc["compare"] or [self.doc["generator"]["kind"]])

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=1, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()

    def with_seed(self, seed: int) -> Manifest:
        """Master seed replaced; trial seeds become ``seed, seed+1, ...`` (same count)."""
        doc = copy.deepcopy(self.doc)
        doc["seed"] = int(seed)
        doc["seeds"] = list(range(int(seed), int(seed) + len(doc["seeds"])))
        return Manifest(doc, self.base_dir)

    def class_index(self, name) -> int | None:
        if name is None:
            return None
        classes = self.schema.class_names
        if name in classes:
            return classes.index(name)
        if isinstance(name, int) and 0 <= name < len(classes):
            return name
        raise ConfigError(f"scoring.target_class {name!r} is not a class of the schema")


def parse_manifest(doc: dict, base_dir: str | Path = ".", check_files: bool = True) -> Manifest:
    """Validate ``doc``, fill defaults and make every data path absolute."""
    if not isinstance(doc, dict):
        raise ConfigError("manifest must be a JSON object")
    _reject_unknown("manifest", doc, TOP)
    if doc.get("schema_version") != MANIFEST_VERSION:
        raise ConfigError(f"schema_version must be {MANIFEST_VERSION}, got {doc.get('schema_version')!r}")
    if "schema" not in doc:
        raise ConfigError("manifest needs a schema")
    out = copy.deepcopy({k: v for k, v in TOP.items() if k not in SECTIONS})
    out.update({k: copy.deepcopy(v) for k, v in doc.items() if k not in SECTIONS})
    for name, defaults in SECTIONS.items():
        got = doc.get(name, {}) or {}
        if not isinstance(got, dict):
            raise ConfigError(f"{name}: expected an object")
        _reject_unknown(name, got, defaults)
        out[name] = {**copy.deepcopy(defaults), **copy.deepcopy(got)}
    try:
        schema = Schema.from_dict(out["schema"])
    except (KeyError, TypeError, DataError) as exc:
        raise ConfigError(f"schema: {exc}") from None
    out["schema"] = schema.to_dict()

    seeds = out["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    if not 0.0 < float(out["valid_fraction"]) < 1.0:
        raise ConfigError("valid_fraction must lie in (0, 1)")
    kinds = out["compare"] or [out["generator"]["kind"]]
    for k in [out["generator"]["kind"], *kinds]:
        if k not in GENERATOR_KINDS:
            raise ConfigError(f"generator kind {k!r} is not one of {list(GENERATOR_KINDS)}")
    if out["classifier"]["kind"] not in ("builtin", "external"):
        raise ConfigError("classifier.kind must be 'builtin' or 'external'")
    if out["classifier"]["kind"] == "external" and not out["classifier"]["command"]:
        raise ConfigError("an external classifier needs a command")

    _reject_unknown("vqvae", out["vqvae"], VqvaeConfig.__dataclass_fields__.keys() - _DERIVED_VQ)
    _reject_unknown("mtm", out["mtm"], MtmConfig.__dataclass_fields__.keys() - _DERIVED_MTM)
    try:
        vq = VqvaeConfig.from_dict({"n_features": schema.n_features, "n_classes": schema.n_classes, **out["vqvae"]})
        MtmConfig.from_dict({"latent_length": vq.latent_length, "codebook_size": vq.codebook_size, "n_classes": schema.n_classes, **out["mtm"]})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model configuration: {exc}") from None

    base = Path(base_dir).resolve()
    data = out["data"]
    for key in ("train", "test"):
        if data[key] is not None:
            data[key] = str((base / data[key]).resolve())
    data["months"] = [str((base / p).resolve()) for p in data["months"]]
    if out["report"]["table"] is not None:
        out["report"]["table"] = str((base / out["report"]["table"]).resolve())
    if check_files:
        for p in [data["train"], data["test"], *data["months"], out["report"]["table"]]:
            if p is not None and not Path(p).is_file():
                raise DataError(f"{p}: file not found")
    return Manifest(out, base)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"{path}: manifest not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_manifest(doc, path.parent)


def vqvae_config(m: Manifest, **override) -> VqvaeConfig:
    s = m.schema
    return VqvaeConfig.from_dict({"n_features": s.n_features, "n_classes": s.n_classes, **m["vqvae"], **override})


def mtm_config(m: Manifest, vq: VqvaeConfig, **override) -> MtmConfig:
    return MtmConfig.from_dict(
        {"latent_length": vq.latent_length, "codebook_size": vq.codebook_size, "n_classes": vq.n_classes, **m["mtm"], **override}
    )
