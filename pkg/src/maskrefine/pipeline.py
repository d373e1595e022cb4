"""Batch orchestration: dataset in, refined masks and reports out.

Per sample and per present class: build injection masks from the
coarse map, reconstruct the image in one denoising step, refine the
class probabilities by correspondence mixing, then assemble the final
label map. Samples are independent work units; a bounded thread pool
maps over them and all merges are order-free, so results are identical
for any worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correspondence import (
    FeatureMap,
    MixConfig,
    ToyFeatureExtractor,
    find_correspondence,
    normalize_features,
    refine_mask,
    refine_mask_from_features,
)
from .diffusion import (
    ConditionSpec,
    DenoiserBackend,
    RecordedBackend,
    ToyDenoiser,
    one_step_reconstruct,
    _slug,
)
from .evaluation import (
    DEFAULT_BANDS,
    IoUReport,
    StratifiedGainReport,
    assemble_class_mask,
    mean_iou,
    stratified_gain,
)
from .injection import prepare_injection_set
from .tensorfile import load_tensor, save_tensor
from .toydata import TOY_BG_TEXTURE, TOY_FG_TEXTURE, png_to_image
from .types import (
    ClassIndexMask,
    ImageTensor,
    NoiseSchedule,
    SoftMask,
    ValidationError,
    class_token_indices,
    tokenize_prompt,
)
from .vocpng import VOC_CLASSES, read_indexed_png, write_indexed_png

log = logging.getLogger("maskrefine")


@dataclass(frozen=True)
class RunConfig:
    """All knobs of one refinement run.

    ``alpha_inject`` is a multiplier on sqrt(d): the raw logit bias
    applied at a layer of head dim d is alpha_inject * sqrt(d), which
    keeps the bias commensurate with the logit scale at any width.
    """

    t_s: int = 400
    beta: float = 0.8
    alpha_inject: float = 1.0
    cf_low: float = 0.2
    cf_high: float = 0.6
    tau_bin: float = 0.5
    tau_bg: float = 0.5
    backend: str = "toy"          # toy | recorded
    extractor: str = "toy"        # toy | recorded
    seed: int = 0
    workers: int = 1
    num_steps: int = 1000
    attn_resolutions: tuple[int, ...] = (64, 32, 16, 8)
    pos_weight: float = 0.25
    toy_fg: tuple[float, ...] = TOY_FG_TEXTURE
    toy_bg: tuple[float, ...] = TOY_BG_TEXTURE
    prompt_template: str = "a photo of {name}"

    def mix(self) -> MixConfig:
        return MixConfig(beta=self.beta, cf_low=self.cf_low, cf_high=self.cf_high)

    @classmethod
    def from_file(cls, path: str | Path, overrides: list[str] | None = None
                  ) -> "RunConfig":
        """Parse a plain `key = value` table, then apply `k=v` overrides."""
        pairs: dict[str, str] = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            pairs[key.strip()] = value.strip()
        for item in overrides or []:
            if "=" not in item:
                raise ValidationError(f"--set needs key=value, got {item!r}")
            key, value = item.split("=", 1)
            pairs[key.strip()] = value.strip()
        return cls.from_pairs(pairs)

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in pairs.items():
            if key not in fields:
                raise ValidationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(value, fields[key].type)
        return cls(**kwargs)

    def with_overrides(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def _coerce(value: str, typ: str):
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "str":
        return value
    if typ.startswith("tuple[float"):
        return tuple(float(v) for v in value.split(",") if v.strip())
    if typ.startswith("tuple[int"):
        return tuple(int(v) for v in value.split(",") if v.strip())
    raise ValidationError(f"cannot parse config value for type {typ}")


@dataclass(frozen=True)
class DatasetLayout:
    """On-disk dataset: images, coarse masks, prompts, optional extras.

    Required: ``images/<id>.png``, ``prompts.json`` (sample id -> list
    of present class names), and a coarse mask per (sample, class) as
    either ``coarse_masks/<id>__<name>.g4tn`` (soft float map) or a
    hard indexed PNG ``coarse_masks/<id>.png``. Optional:
    ``classes.json`` (name -> positive id; VOC names by default),
    ``gt_masks/<id>.png`` for reports, ``recorded/`` for replayed
    backends. ``out/`` is the only write target.
    """

    root: Path
    prompts: dict[str, list[str]]
    class_ids: dict[str, int]

    @classmethod
    def open(cls, root: str | Path) -> "DatasetLayout":
        root = Path(root)
        prompts_path = root / "prompts.json"
        if not prompts_path.is_file():
            raise ValidationError(f"missing {prompts_path}")
        prompts = {k: list(v) for k, v in json.loads(prompts_path.read_text()).items()}
        classes_path = root / "classes.json"
        if classes_path.is_file():
            class_ids = {str(k): int(v) for k, v in
                         json.loads(classes_path.read_text()).items()}
        else:
            class_ids = {name: i for i, name in enumerate(VOC_CLASSES) if i > 0}
        bad = [c for ids in prompts.values() for c in ids if c not in class_ids]
        if bad:
            raise ValidationError(f"classes without ids: {sorted(set(bad))}")
        return cls(root=root, prompts=prompts, class_ids=class_ids)

    @property
    def samples(self) -> list[str]:
        return sorted(self.prompts)

    @property
    def num_classes(self) -> int:
        return max(self.class_ids.values()) + 1

    def image(self, sample_id: str) -> ImageTensor:
        path = self.root / "images" / f"{sample_id}.png"
        if not path.is_file():
            raise ValidationError(f"missing image {path}")
        return png_to_image(path)

    def coarse(self, sample_id: str, class_name: str) -> SoftMask:
        soft_path = self.root / "coarse_masks" / f"{sample_id}__{class_name}.g4tn"
        if soft_path.is_file():
            return SoftMask(load_tensor(soft_path))
        png_path = self.root / "coarse_masks" / f"{sample_id}.png"
        if png_path.is_file():
            labels = read_indexed_png(png_path)
            cls = self.class_ids[class_name]
            return SoftMask((labels == cls).astype(np.float32))
        raise ValidationError(
            f"no coarse mask for sample {sample_id!r} class {class_name!r}"
        )

    def gt(self, sample_id: str) -> ClassIndexMask | None:
        path = self.root / "gt_masks" / f"{sample_id}.png"
        if not path.is_file():
            return None
        return ClassIndexMask(read_indexed_png(path))

    @property
    def recorded_dir(self) -> Path:
        return self.root / "recorded"

    @property
    def out_dir(self) -> Path:
        return self.root / "out"


class RecordedFeatureStore:
    """Feature maps exported next to the recorded generations.

    ``<run>/<sample_id>/feat_orig.g4tn`` and ``feat_gen_<class>.g4tn``;
    a miss is an error.
    """

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)

    def original(self, sample_id: str) -> FeatureMap:
        return self._load(self.run_dir / sample_id / "feat_orig.g4tn")

    def generated(self, sample_id: str, class_name: str) -> FeatureMap:
        name = f"feat_gen_{_slug(class_name)}.g4tn"
        return self._load(self.run_dir / sample_id / name)

    def _load(self, path: Path) -> FeatureMap:
        if not path.is_file():
            raise ValidationError(f"no recorded features at {path}")
        arr = load_tensor(path)
        if arr.ndim != 3:
            raise ValidationError(f"feature record {path} must be rank 3")
        return FeatureMap(arr)


def derive_seed(base: int, sample_id: str, class_name: str) -> int:
    digest = hashlib.sha256(f"{base}:{sample_id}:{class_name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class SampleOutcome:
    sample_id: str
    initial: ClassIndexMask | None = None
    refined: ClassIndexMask | None = None
    refined_soft: dict[str, SoftMask] = field(default_factory=dict)
    generated: dict[str, ImageTensor] = field(default_factory=dict)
    correspondences: dict = field(default_factory=dict)
    error: str | None = None


def _clip_image(img: ImageTensor) -> ImageTensor:
    return ImageTensor(np.clip(img.array, 0.0, 1.0).astype(np.float32))


def make_backend(cfg: RunConfig, layout: DatasetLayout,
                 sched: NoiseSchedule) -> DenoiserBackend:
    if cfg.backend == "toy":
        return ToyDenoiser.from_textures(cfg.toy_fg, cfg.toy_bg, sched)
    if cfg.backend == "recorded":
        return RecordedBackend(layout.recorded_dir, sched)
    raise ValidationError(f"unknown backend {cfg.backend!r}")


def process_sample(sample_id: str, layout: DatasetLayout, cfg: RunConfig,
                   sched: NoiseSchedule, backend: DenoiserBackend,
                   keep_intermediates: bool = False) -> SampleOutcome:
    """EMI -> one-step reconstruction -> SCA -> assembly for one sample."""
    outcome = SampleOutcome(sample_id)
    image = layout.image(sample_id)
    class_names = layout.prompts[sample_id]
    if not class_names:
        raise ValidationError(f"sample {sample_id!r} lists no classes")
    extractor = ToyFeatureExtractor(pos_weight=cfg.pos_weight)
    features = (RecordedFeatureStore(layout.recorded_dir)
                if cfg.extractor == "recorded" else None)
    resolutions = [r for r in cfg.attn_resolutions
                   if r <= min(image.height, image.width)] \
        or [min(image.height, image.width)]

    initial_soft: dict[int, SoftMask] = {}
    refined_soft: dict[int, SoftMask] = {}
    for name in class_names:
        cls = layout.class_ids[name]
        coarse = layout.coarse(sample_id, name)
        prompt = cfg.prompt_template.format(name=name)
        tokens = class_token_indices(prompt, name)
        injection = prepare_injection_set(
            coarse, cfg.tau_bin, tokens, resolutions,
            key_length=len(tokenize_prompt(prompt)),
        )
        cond = ConditionSpec(
            prompt=prompt, token_set=tokens, injection=injection,
            alpha_inject=cfg.alpha_inject, sample_id=sample_id, class_name=name,
        )
        x_gen = one_step_reconstruct(
            image, cfg.t_s, cond, backend,
            seed=derive_seed(cfg.seed, sample_id, name), sched=sched,
        )
        if features is not None:
            f_orig = features.original(sample_id)
            f_gen = features.generated(sample_id, name)
            refined = refine_mask_from_features(coarse, f_orig, f_gen, cfg.mix())
        else:
            refined = refine_mask(image, _clip_image(x_gen), coarse,
                                  extractor, cfg.mix())
        initial_soft[cls] = coarse
        refined_soft[cls] = refined
        outcome.refined_soft[name] = refined
        if keep_intermediates:
            outcome.generated[name] = _clip_image(x_gen)
            if features is not None:
                fo, fg = f_orig, f_gen
            else:
                fo = extractor.embed(image)
                fg = extractor.embed(_clip_image(x_gen))
            outcome.correspondences[name] = find_correspondence(
                normalize_features(fo) if not fo.normalized else fo,
                normalize_features(fg) if not fg.normalized else fg,
            )

    outcome.initial = assemble_class_mask(initial_soft, cfg.tau_bg)
    outcome.refined = assemble_class_mask(refined_soft, cfg.tau_bg)
    return outcome


@dataclass
class RunResult:
    outcomes: list[SampleOutcome]
    initial_report: IoUReport | None
    refined_report: IoUReport | None
    gain_report: StratifiedGainReport | None
    failures: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_refinement(layout: DatasetLayout, cfg: RunConfig,
                   out_dir: Path | None = None) -> RunResult:
    """Refine every sample, write masks and reports under out/.

    Per-sample failures are logged, recorded in the report, and do not
    abort the run.
    """
    sched = NoiseSchedule.linear_beta(cfg.num_steps)
    backend = make_backend(cfg, layout, sched)
    out = Path(out_dir) if out_dir is not None else layout.out_dir
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "initial").mkdir(exist_ok=True)
    (out / "soft").mkdir(exist_ok=True)

    def work(sample_id: str) -> SampleOutcome:
        try:
            return process_sample(sample_id, layout, cfg, sched, backend)
        except Exception as exc:  # per-sample isolation
            log.warning("sample %s failed: %s", sample_id, exc)
            return SampleOutcome(sample_id, error=str(exc))

    samples = layout.samples
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(work, samples))
    else:
        outcomes = [work(s) for s in samples]

    failures = [(o.sample_id, o.error) for o in outcomes if o.error]
    succeeded = [o for o in outcomes if not o.error]
    for o in succeeded:
        write_indexed_png(out / "masks" / f"{o.sample_id}.png", o.refined)
        write_indexed_png(out / "initial" / f"{o.sample_id}.png", o.initial)
        for name, soft in sorted(o.refined_soft.items()):
            save_tensor(out / "soft" / f"{o.sample_id}__{name}.g4tn", soft.values)

    initial_report = refined_report = gain_report = None
    gts = {o.sample_id: layout.gt(o.sample_id) for o in succeeded}
    scored = [o for o in succeeded if gts[o.sample_id] is not None]
    if scored:
        gt_masks = [gts[o.sample_id] for o in scored]
        initial_report = mean_iou([o.initial for o in scored], gt_masks,
                                  layout.num_classes)
        refined_report = mean_iou([o.refined for o in scored], gt_masks,
                                  layout.num_classes)
        gain_report = stratified_gain(
            [o.initial for o in scored], [o.refined for o in scored],
            gt_masks, layout.num_classes, DEFAULT_BANDS,
        )

    result = RunResult(outcomes, initial_report, refined_report, gain_report,
                       failures)
    (out / "report.json").write_text(_report_json(result, cfg))
    return result


def _report_json(result: RunResult, cfg: RunConfig) -> str:
    # worker count is an execution detail and must not affect any output
    # byte, so it is excluded from the report.
    cfg_doc = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "workers"}
    doc = {
        "config": cfg_doc,
        "samples": [
            {"id": o.sample_id, "status": "failed" if o.error else "ok",
             **({"error": o.error} if o.error else {})}
            for o in result.outcomes
        ],
        "failure_count": len(result.failures),
        "initial": result.initial_report.to_dict() if result.initial_report else None,
        "refined": result.refined_report.to_dict() if result.refined_report else None,
        "stratified_gain": result.gain_report.to_dict() if result.gain_report else None,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def timestep_sweep(layout: DatasetLayout, cfg: RunConfig,
                   steps: list[int]) -> list[dict]:
    """One full run per timestep; returns and writes a per-step table."""
    if not steps:
        raise ValidationError("empty step list")
    rows = []
    for t in steps:
        run_cfg = cfg.with_overrides(t_s=t)
        result = run_refinement(layout, run_cfg,
                                out_dir=layout.out_dir / f"sweep_t{t}")
        rows.append({
            "t_s": t,
            "initial_miou": result.initial_report.mean_iou
            if result.initial_report else None,
            "refined_miou": result.refined_report.mean_iou
            if result.refined_report else None,
            "failures": len(result.failures),
        })
    layout.out_dir.mkdir(parents=True, exist_ok=True)
    with open(layout.out_dir / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return rows


def dump_diagnostics(layout: DatasetLayout, cfg: RunConfig, sample_id: str,
                     n_points: int = 15) -> Path:
    """Figure-ready dumps: generated image, before/after masks, and a
    side-by-side correspondence overlay with arrows for sampled points."""
    from PIL import Image, ImageDraw

    sched = NoiseSchedule.linear_beta(cfg.num_steps)
    backend = make_backend(cfg, layout, sched)
    outcome = process_sample(sample_id, layout, cfg, sched, backend,
                             keep_intermediates=True)
    out = layout.out_dir / "diag" / sample_id
    out.mkdir(parents=True, exist_ok=True)

    write_indexed_png(out / "mask_initial.png", outcome.initial)
    write_indexed_png(out / "mask_refined.png", outcome.refined)
    image = layout.image(sample_id)
    _save_rgb(out / "original.png", image.array)
    for name, gen in sorted(outcome.generated.items()):
        _save_rgb(out / f"generated_{_slug(name)}.png", gen.array)
        delta = outcome.correspondences[name]
        canvas = _pair_canvas(image.array, gen.array)
        draw = ImageDraw.Draw(canvas)
        rng = np.random.default_rng(derive_seed(cfg.seed, sample_id, name))
        total = delta.indices.size
        chosen = rng.choice(total, size=min(n_points, total), replace=False) \
            if n_points > 0 else np.empty(0, dtype=np.int64)
        h, w = delta.height, delta.width
        sy, sx = image.array.shape[0] / h, image.array.shape[1] / w
        offset = image.array.shape[1]
        for j in sorted(int(v) for v in chosen):
            gy, gx = divmod(j, w)
            oy, ox = divmod(int(delta.indices[j]), w)
            p_gen = (offset + (gx + 0.5) * sx, (gy + 0.5) * sy)
            p_orig = ((ox + 0.5) * sx, (oy + 0.5) * sy)
            draw.line([p_gen, p_orig], fill=(255, 255, 0), width=1)
            draw.ellipse(_dot(p_orig), fill=(255, 0, 255))
            draw.ellipse(_dot(p_gen), fill=(0, 255, 255))
        canvas.save(out / f"correspondence_{_slug(name)}.png")
    return out


def _dot(p, r: float = 2.0):
    return [(p[0] - r, p[1] - r), (p[0] + r, p[1] + r)]


def _save_rgb(path: Path, arr: np.ndarray) -> None:
    from PIL import Image

    a = np.clip(arr, 0.0, 1.0)
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    Image.fromarray((a[:, :, :3] * 255.0 + 0.5).astype(np.uint8), "RGB").save(path)


def _pair_canvas(orig: np.ndarray, gen: np.ndarray):
    from PIL import Image

    h = max(orig.shape[0], gen.shape[0])
    canvas = np.zeros((h, orig.shape[1] + gen.shape[1], 3), dtype=np.float64)
    canvas[: orig.shape[0], : orig.shape[1]] = orig[:, :, :3]
    canvas[: gen.shape[0], orig.shape[1]:] = np.clip(gen[:, :, :3], 0.0, 1.0)
    return Image.fromarray((canvas * 255.0 + 0.5).astype(np.uint8), "RGB")
