"""Export orchestration: dataset in, recorded tensor run out.

For every (sample, class) pair the adapter produces one mask-injected
one-step generation plus feature maps for the original and generated
images. Everything is written as portable tensor records with JSON
manifests the refinement engine consumes directly:

    <out>/manifest.json                         run-level index
    <out>/<sample_id>/manifest.json             per-sample manifest
    <out>/<sample_id>/gen_<class>_t<T>.g4tn     generated image (H, W, C)
    <out>/<sample_id>/feat_orig.g4tn            original features (h, w, d)
    <out>/<sample_id>/feat_gen_<class>.g4tn     generated features
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import load_sample_manifest, validate_run_manifest, \
    validate_sample_manifest
from .tensorfile import load_tensor, save_tensor

log = logging.getLogger("sdexport")

PROMPT_TEMPLATE = "a photo of {name}"


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def derive_seed(base: int, sample_id: str, class_name: str) -> int:
    digest = hashlib.sha256(f"{base}:{sample_id}:{class_name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_coarse(root: Path, sample_id: str, class_name: str,
                class_ids: dict[str, int]) -> np.ndarray:
    soft = root / "coarse_masks" / f"{sample_id}__{class_name}.g4tn"
    if soft.is_file():
        return load_tensor(soft)
    hard = root / "coarse_masks" / f"{sample_id}.png"
    if hard.is_file():
        labels = np.asarray(Image.open(hard), dtype=np.int32)
        return (labels == class_ids[class_name]).astype(np.float32)
    raise FileNotFoundError(
        f"no coarse mask for sample {sample_id!r} class {class_name!r}"
    )


def export_sample(adapter, sample_id: str, image: np.ndarray,
                  coarse_by_class: dict[str, np.ndarray], out_dir: Path,
                  t_s: int, alpha_inject: float, seed: int) -> dict:
    """Generate, embed, and write all records for one sample."""
    sample_dir = out_dir / sample_id
    sample_dir.mkdir(parents=True, exist_ok=True)

    feat_orig = adapter.extract_features(image)
    save_tensor(sample_dir / "feat_orig.g4tn", feat_orig)

    entries = []
    image_shape = None
    for class_name in sorted(coarse_by_class):
        prompt = PROMPT_TEMPLATE.format(name=class_name)
        gen = adapter.generate(
            image, coarse_by_class[class_name], class_name, prompt,
            t_s=t_s, alpha_inject=alpha_inject,
            seed=derive_seed(seed, sample_id, class_name),
        )
        image_shape = list(gen.shape)
        feat_gen = adapter.extract_features(gen)
        slug = slugify(class_name)
        gen_name = f"gen_{slug}_t{t_s}.g4tn"
        feat_name = f"feat_gen_{slug}.g4tn"
        save_tensor(sample_dir / gen_name, gen)
        save_tensor(sample_dir / feat_name, feat_gen)
        entries.append({
            "name": class_name,
            "prompt": prompt,
            "token_indices": adapter.token_indices(prompt, class_name),
            "files": {"generated": gen_name, "features_generated": feat_name},
        })

    doc = {
        "sample_id": sample_id,
        "timestep": t_s,
        "alpha_inject": alpha_inject,
        "seed": seed,
        "model": {"name": adapter.name, "version": adapter.version},
        "image_shape": image_shape,
        "feature_grid": list(feat_orig.shape),
        "classes": entries,
        "files": {"features_original": "feat_orig.g4tn"},
    }
    validate_sample_manifest(doc)
    (sample_dir / "manifest.json").write_text(json.dumps(doc, indent=2,
                                                         sort_keys=True))
    return doc


def _already_exported(sample_dir: Path, t_s: int) -> bool:
    if not (sample_dir / "manifest.json").is_file():
        return False
    try:
        doc = load_sample_manifest(sample_dir)
    except Exception:
        return False
    return doc["timestep"] == t_s


def export_batch(root: str | Path, out_dir: str | Path, adapter,
                 t_s: int = 400, alpha_inject: float = 1.0, seed: int = 0,
                 resume: bool = True) -> dict:
    """Export every sample listed in the dataset's prompts table.

    Reruns skip samples whose manifest already validates (resumable
    after interruption). Returns a summary with exported/skipped ids.
    """
    root = Path(root)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prompts = json.loads((root / "prompts.json").read_text()) \
        if (root / "prompts.json").is_file() else {}
    classes_path = root / "classes.json"
    class_ids = {k: int(v) for k, v in json.loads(classes_path.read_text()).items()} \
        if classes_path.is_file() else {}

    exported, skipped = [], []
    for sample_id in sorted(prompts):
        sample_dir = out_dir / sample_id
        if resume and _already_exported(sample_dir, t_s):
            log.info("skip %s (already exported)", sample_id)
            skipped.append(sample_id)
            continue
        image = load_image(root / "images" / f"{sample_id}.png")
        coarse = {name: load_coarse(root, sample_id, name, class_ids)
                  for name in prompts[sample_id]}
        export_sample(adapter, sample_id, image, coarse, out_dir,
                      t_s, alpha_inject, seed)
        log.info("exported %s (%d classes)", sample_id, len(coarse))
        exported.append(sample_id)

    run_doc = {
        "samples": sorted(prompts),
        "timesteps": [t_s],
        "alpha_inject": alpha_inject,
        "model": {"name": adapter.name, "version": adapter.version},
    }
    validate_run_manifest(run_doc)
    (out_dir / "manifest.json").write_text(json.dumps(run_doc, indent=2,
                                                      sort_keys=True))
    return {"exported": exported, "skipped": skipped}
