"""Export manifest schema and validation."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

SAMPLE_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["sample_id", "timestep", "alpha_inject", "model",
                 "feature_grid", "image_shape", "classes"],
    "properties": {
        "sample_id": {"type": "string"},
        "timestep": {"type": "integer", "minimum": 1},
        "alpha_inject": {"type": "number"},
        "seed": {"type": "integer"},
        "model": {
            "type": "object",
            "required": ["name", "version"],
            "properties": {
                "name": {"type": "string"},
                "version": {"type": "string"},
            },
        },
        "image_shape": {
            "type": "array", "items": {"type": "integer", "minimum": 1},
            "minItems": 3, "maxItems": 3,
        },
        "feature_grid": {
            "type": "array", "items": {"type": "integer", "minimum": 1},
            "minItems": 3, "maxItems": 3,
        },
        "classes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "prompt", "token_indices", "files"],
                "properties": {
                    "name": {"type": "string"},
                    "prompt": {"type": "string"},
                    "token_indices": {"type": "array",
                                      "items": {"type": "integer", "minimum": 0}},
                    "files": {
                        "type": "object",
                        "required": ["generated", "features_generated"],
                        "properties": {
                            "generated": {"type": "string"},
                            "features_generated": {"type": "string"},
                        },
                    },
                },
            },
        },
        "files": {
            "type": "object",
            "properties": {"features_original": {"type": "string"}},
        },
    },
}

RUN_MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["samples", "timesteps", "model"],
    "properties": {
        "samples": {"type": "array", "items": {"type": "string"}},
        "timesteps": {"type": "array", "items": {"type": "integer"}},
        "model": {"type": "object"},
    },
}


def validate_sample_manifest(doc: dict) -> dict:
    jsonschema.validate(doc, SAMPLE_MANIFEST_SCHEMA)
    return doc


def validate_run_manifest(doc: dict) -> dict:
    jsonschema.validate(doc, RUN_MANIFEST_SCHEMA)
    return doc


def check_sample_files(sample_dir: Path, doc: dict) -> None:
    """Every referenced file must exist; shapes are checked by readers."""
    missing = []
    rel = doc.get("files", {}).get("features_original")
    if rel and not (sample_dir / rel).is_file():
        missing.append(rel)
    for cls in doc["classes"]:
        for key in ("generated", "features_generated"):
            rel = cls["files"][key]
            if not (sample_dir / rel).is_file():
                missing.append(rel)
    if missing:
        raise FileNotFoundError(
            f"manifest references missing files in {sample_dir}: {missing}"
        )


def load_sample_manifest(sample_dir: Path) -> dict:
    doc = json.loads((sample_dir / "manifest.json").read_text())
    validate_sample_manifest(doc)
    check_sample_files(sample_dir, doc)
    return doc
