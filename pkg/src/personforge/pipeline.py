"""Staged pipeline: corpus -> city filter -> import+select -> refine -> emit.

A single JSON config drives a run. Stages execute in a fixed order,
each contributing one entry to the run report, and any stage error
aborts the run wrapped in StageFailure naming the stage. Optional
stages (refiner training, noise injection, evaluation, audit sampling)
appear in the report only when configured. Outputs are written through
temp-then-rename, so an interrupted run leaves ``.partial`` files and
never a truncated artifact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import corpus, detect, emit, refine
from .audit import DEFAULT_SAMPLE_SIZE, SessionStore, sample_boxes
from .corpus import CityDef, ImageRecord
from .detect import PersonBox
from .evaluation import (
    DEFAULT_IOU_THRESH,
    DEFAULT_MIN_HEIGHT,
    EvalDet,
    compute_det_curve,
    load_eval_boxes,
    write_curve_csv,
    write_curve_summary,
)
from .geometry import crop_region
from .noiselab import NoiseSpec, inject_noise, write_noise_log
from .refine import (
    DEFAULT_EPOCHS,
    DEFAULT_LAMBDA,
    BuiltinFeatureSource,
    FeatureSource,
    FileFeatureSource,
    LinearModel,
    builtin_features,
    generate_negative_crops,
    load_model,
    save_model,
    train_svm,
)

STAGE_ORDER = (
    "corpus",
    "cities",
    "import",
    "select",
    "train",
    "refine",
    "emit",
    "noise",
    "eval",
    "audit",
)


class ConfigError(ValueError):
    """Invalid pipeline configuration; names the offending field."""

    def __init__(self, config_field: str, reason: str):
        super().__init__(f"config field {config_field!r}: {reason}")
        self.field = config_field
        self.reason = reason


class StageFailure(RuntimeError):
    """A pipeline stage raised; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class TrainSpec:
    """In-run refiner training on detected crops vs. random background."""

    n_negatives: Optional[int] = None  # default: one per positive
    lam: float = DEFAULT_LAMBDA
    epochs: int = DEFAULT_EPOCHS
    seed: Optional[int] = None  # default: pipeline seed
    model_out: Optional[Path] = None

    @classmethod
    def from_json(cls, obj: dict, base_dir: Path) -> "TrainSpec":
        known = {"n_negatives", "lambda", "epochs", "seed", "model_out"}
        _reject_unknown(obj, known, "train_refiner")
        out = obj.get("model_out")
        return cls(
            n_negatives=obj.get("n_negatives"),
            lam=float(obj.get("lambda", DEFAULT_LAMBDA)),
            epochs=int(obj.get("epochs", DEFAULT_EPOCHS)),
            seed=obj.get("seed"),
            model_out=_resolve(out, base_dir) if out else None,
        )


@dataclass
class NoiseStage:
    rate: float
    out: Path
    seed: Optional[int] = None
    max_tries: int = 100
    log: Optional[Path] = None


@dataclass
class EvalStage:
    gt: Path
    det: Optional[Path] = None  # default: the emitted boxes
    iou_thresh: float = DEFAULT_IOU_THRESH
    min_height: float = DEFAULT_MIN_HEIGHT
    n_images: Optional[int] = None
    curve_out: Optional[Path] = None
    summary_out: Optional[Path] = None


@dataclass
class AuditStage:
    sessions_dir: Path
    n: int = DEFAULT_SAMPLE_SIZE
    seed: Optional[int] = None


@dataclass
class PipelineConfig:
    """Everything a `forge run` needs, typically parsed from one JSON file."""

    manifest: Path = None  # type: ignore[assignment]
    detections: Path = None  # type: ignore[assignment]
    output: Path = None  # type: ignore[assignment]
    manifest_format: str = "jsonl"
    cities: Optional[Path] = None
    min_city_count: int = corpus.DEFAULT_MIN_CITY_COUNT
    min_separation_km: float = corpus.DEFAULT_MIN_SEPARATION_KM
    score_threshold: float = detect.DEFAULT_SCORE_THRESHOLD
    feature_source: str = "builtin"
    model: Optional[Path] = None
    train_refiner: Optional[TrainSpec] = None
    images_root: Optional[Path] = None
    stats_output: Optional[Path] = None
    report_output: Optional[Path] = None
    workers: Optional[int] = None
    seed: int = 0
    noise: Optional[NoiseStage] = None
    eval: Optional[EvalStage] = None
    audit: Optional[AuditStage] = None

    @classmethod
    def from_json(cls, obj: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        """Build a config from a parsed JSON document.

        Relative paths are resolved against base_dir (the config file's
        directory). Raises ConfigError naming the bad field.
        """
        base = Path(base_dir)
        known = {
            "manifest", "manifest_format", "cities", "min_city_count",
            "min_separation_km", "detections", "score_threshold",
            "feature_source", "model", "train_refiner", "images_root",
            "output", "stats_output", "report_output", "workers", "seed",
            "noise", "eval", "audit",
        }
        _reject_unknown(obj, known, None)
        for required in ("manifest", "detections", "output"):
            if not obj.get(required):
                raise ConfigError(required, "required")

        def path_or_none(key: str) -> Optional[Path]:
            value = obj.get(key)
            return _resolve(value, base) if value else None

        feature_source = obj.get("feature_source", "builtin")
        if feature_source != "builtin":
            feature_source = str(_resolve(feature_source, base))

        noise_obj = obj.get("noise")
        noise = None
        if noise_obj is not None:
            _reject_unknown(noise_obj, {"rate", "seed", "max_tries", "out", "log"}, "noise")
            if "rate" not in noise_obj:
                raise ConfigError("noise.rate", "required")
            if "out" not in noise_obj:
                raise ConfigError("noise.out", "required")
            noise = NoiseStage(
                rate=float(noise_obj["rate"]),
                out=_resolve(noise_obj["out"], base),
                seed=noise_obj.get("seed"),
                max_tries=int(noise_obj.get("max_tries", 100)),
                log=path_or_none_in(noise_obj, "log", base),
            )

        eval_obj = obj.get("eval")
        eval_stage = None
        if eval_obj is not None:
            _reject_unknown(
                eval_obj,
                {"gt", "det", "iou_thresh", "min_height", "n_images", "curve_out", "summary_out"},
                "eval",
            )
            if "gt" not in eval_obj:
                raise ConfigError("eval.gt", "required")
            eval_stage = EvalStage(
                gt=_resolve(eval_obj["gt"], base),
                det=path_or_none_in(eval_obj, "det", base),
                iou_thresh=float(eval_obj.get("iou_thresh", DEFAULT_IOU_THRESH)),
                min_height=float(eval_obj.get("min_height", DEFAULT_MIN_HEIGHT)),
                n_images=eval_obj.get("n_images"),
                curve_out=path_or_none_in(eval_obj, "curve_out", base),
                summary_out=path_or_none_in(eval_obj, "summary_out", base),
            )

        audit_obj = obj.get("audit")
        audit_stage = None
        if audit_obj is not None:
            _reject_unknown(audit_obj, {"sessions_dir", "n", "seed"}, "audit")
            if "sessions_dir" not in audit_obj:
                raise ConfigError("audit.sessions_dir", "required")
            audit_stage = AuditStage(
                sessions_dir=_resolve(audit_obj["sessions_dir"], base),
                n=int(audit_obj.get("n", DEFAULT_SAMPLE_SIZE)),
                seed=audit_obj.get("seed"),
            )

        train_obj = obj.get("train_refiner")
        return cls(
            manifest=_resolve(obj["manifest"], base),
            manifest_format=obj.get("manifest_format", "jsonl"),
            cities=path_or_none("cities"),
            min_city_count=int(obj.get("min_city_count", corpus.DEFAULT_MIN_CITY_COUNT)),
            min_separation_km=float(
                obj.get("min_separation_km", corpus.DEFAULT_MIN_SEPARATION_KM)
            ),
            detections=_resolve(obj["detections"], base),
            score_threshold=float(obj.get("score_threshold", detect.DEFAULT_SCORE_THRESHOLD)),
            feature_source=feature_source,
            model=path_or_none("model"),
            train_refiner=(
                TrainSpec.from_json(train_obj, base) if train_obj is not None else None
            ),
            images_root=path_or_none("images_root"),
            output=_resolve(obj["output"], base),
            stats_output=path_or_none("stats_output"),
            report_output=path_or_none("report_output"),
            workers=obj.get("workers"),
            seed=int(obj.get("seed", 0)),
            noise=noise,
            eval=eval_stage,
            audit=audit_stage,
        )


def _resolve(value, base: Path) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def path_or_none_in(obj: dict, key: str, base: Path) -> Optional[Path]:
    value = obj.get(key)
    return _resolve(value, base) if value else None


def _reject_unknown(obj, known: set, section: Optional[str]) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(section or "config", "must be a JSON object")
    for key in obj:
        if key not in known:
            name = f"{section}.{key}" if section else key
            raise ConfigError(name, "unknown field")


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}")
    return PipelineConfig.from_json(obj, base_dir=path.parent)


def validate_config(cfg: PipelineConfig) -> None:
    """Check file existence and value ranges; raise ConfigError on the first problem."""
    for name, path in (("manifest", cfg.manifest), ("detections", cfg.detections)):
        if not Path(path).is_file():
            raise ConfigError(name, f"file not found: {path}")
    if cfg.manifest_format not in ("jsonl", "csv"):
        raise ConfigError("manifest_format", f"must be 'jsonl' or 'csv', got {cfg.manifest_format!r}")
    if cfg.cities is not None and not Path(cfg.cities).is_file():
        raise ConfigError("cities", f"file not found: {cfg.cities}")
    if not 0.0 <= cfg.score_threshold <= 1.0:
        raise ConfigError("score_threshold", f"must be in [0, 1], got {cfg.score_threshold}")
    if cfg.min_city_count < 0:
        raise ConfigError("min_city_count", "must be >= 0")
    if cfg.min_separation_km < 0:
        raise ConfigError("min_separation_km", "must be >= 0")
    if (cfg.model is None) == (cfg.train_refiner is None):
        raise ConfigError("model", "exactly one of 'model' and 'train_refiner' must be set")
    if cfg.model is not None and not Path(cfg.model).is_file():
        raise ConfigError("model", f"file not found: {cfg.model}")
    if cfg.feature_source != "builtin":
        if not Path(cfg.feature_source).is_file():
            raise ConfigError("feature_source", f"file not found: {cfg.feature_source}")
        if cfg.train_refiner is not None:
            raise ConfigError(
                "train_refiner",
                "in-run training needs pixel access; use feature_source 'builtin'",
            )
    if cfg.workers is not None and cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    if cfg.noise is not None and not 0.0 <= cfg.noise.rate <= 1.0:
        raise ConfigError("noise.rate", f"must be in [0, 1], got {cfg.noise.rate}")
    if cfg.eval is not None and not Path(cfg.eval.gt).is_file():
        raise ConfigError("eval.gt", f"file not found: {cfg.eval.gt}")
    if cfg.eval is not None and cfg.eval.det is not None and not Path(cfg.eval.det).is_file():
        raise ConfigError("eval.det", f"file not found: {cfg.eval.det}")
    if cfg.audit is not None and cfg.audit.n < 1:
        raise ConfigError("audit.n", "must be >= 1")


def resolve_workers(config_value: Optional[int]) -> int:
    """Worker count: config value capped by the FORGE_WORKERS env var."""
    env = os.environ.get("FORGE_WORKERS")
    cap = None
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise ConfigError("FORGE_WORKERS", f"must be an integer, got {env!r}")
    if config_value is None:
        return cap if cap is not None else 1
    return min(config_value, cap) if cap is not None else config_value


@dataclass
class StageReportEntry:
    n_in: int = 0
    n_out: int = 0
    dropped: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "in": self.n_in,
            "out": self.n_out,
            "dropped": self.dropped,
            "warnings": list(self.warnings),
        }


@dataclass
class PipelineResult:
    report: dict[str, StageReportEntry]
    stats: Optional[emit.DatasetStats]
    n_emitted: int

    def report_json(self) -> dict:
        return {stage: entry.to_json() for stage, entry in self.report.items()}


class _PixelLoader:
    """image_id -> RGB array, resolving manifest paths under images_root."""

    def __init__(self, images: dict[str, ImageRecord], images_root: Optional[Path]):
        self.images = images
        self.images_root = images_root

    def path_for(self, image_id: str) -> Path:
        record = self.images[image_id]
        path = Path(record.path)
        if not path.is_absolute() and self.images_root is not None:
            path = self.images_root / path
        return path

    def __call__(self, image_id: str) -> np.ndarray:
        with Image.open(self.path_for(image_id)) as img:
            return np.asarray(img.convert("RGB"))


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Execute the configured stages and write all outputs.

    Raises ConfigError before any stage runs, StageFailure when a stage
    breaks mid-run. The run report maps stage name to counts; it is
    also written to cfg.report_output (default: alongside the dataset
    output as ``<stem>.report.json``).
    """
    validate_config(cfg)
    report: dict[str, StageReportEntry] = {}
    workers = resolve_workers(cfg.workers)

    def run_stage(name: str, fn):
        entry = StageReportEntry()
        try:
            result = fn(entry)
        except Exception as exc:
            raise StageFailure(name, exc) from exc
        report[name] = entry
        return result

    # corpus
    def corpus_stage(entry: StageReportEntry):
        records = corpus.load_manifest(cfg.manifest, format=cfg.manifest_format)
        entry.n_in = entry.n_out = len(records)
        return records

    records = run_stage("corpus", corpus_stage)

    # cities
    def cities_stage(entry: StageReportEntry):
        table: list[CityDef] = corpus.load_city_table(cfg.cities) if cfg.cities else []
        for a, b, dist in corpus.validate_separation(table, cfg.min_separation_km):
            entry.warnings.append(
                f"cities {a!r} and {b!r} are {dist:.1f} km apart "
                f"(minimum {cfg.min_separation_km:g})"
            )
        kept, city_report = corpus.filter_cities(records, table, cfg.min_city_count)
        entry.n_in = len(records)
        entry.n_out = len(kept)
        entry.dropped = len(records) - len(kept)
        return kept

    kept_records = run_stage("cities", cities_stage)
    images: dict[str, ImageRecord] = {r.image_id: r for r in kept_records}

    # import
    def import_stage(entry: StageReportEntry):
        full_manifest = {r.image_id: r for r in records}
        result = detect.import_detections(cfg.detections, full_manifest)
        on_kept = [d for d in result.detections if d.image_id in images]
        n_excluded = len(result.detections) - len(on_kept)
        entry.n_in = len(result.detections) + result.n_clamp_dropped
        entry.n_out = len(on_kept)
        entry.dropped = result.n_clamp_dropped + n_excluded
        entry.warnings.extend(result.warnings)
        if n_excluded:
            entry.warnings.append(f"{n_excluded} detections on excluded images dropped")
        return on_kept

    detections = run_stage("import", import_stage)

    # select
    def select_stage(entry: StageReportEntry):
        selected = detect.select_person_detections(detections, cfg.score_threshold)
        entry.n_in = len(detections)
        entry.n_out = len(selected)
        entry.dropped = len(detections) - len(selected)
        return selected

    selected = run_stage("select", select_stage)

    loader = _PixelLoader(images, cfg.images_root)

    # train (optional)
    if cfg.train_refiner is not None:
        spec = cfg.train_refiner

        def train_stage(entry: StageReportEntry):
            source = BuiltinFeatureSource(loader)
            pos = [source.features_for(b) for b in selected]
            boxes_by_image: dict[str, list] = {}
            for b in selected:
                boxes_by_image.setdefault(b.image_id, []).append(b.box)
            n_neg = spec.n_negatives if spec.n_negatives is not None else len(pos)
            neg_crops = generate_negative_crops(
                kept_records, boxes_by_image, n_neg, seed=_or_seed(spec.seed, cfg.seed)
            )
            neg = [
                builtin_features(crop_region(loader(image_id), box))
                for image_id, box in neg_crops
            ]
            trained = train_svm(
                pos, neg, lam=spec.lam, epochs=spec.epochs, seed=_or_seed(spec.seed, cfg.seed)
            )
            if spec.model_out is not None:
                Path(spec.model_out).parent.mkdir(parents=True, exist_ok=True)
                save_model(trained, spec.model_out)
            entry.n_in = len(pos) + len(neg)
            entry.n_out = 1
            return trained

        model = run_stage("train", train_stage)
    else:
        model = load_model(cfg.model)

    # refine
    def refine_stage(entry: StageReportEntry):
        source: FeatureSource
        if cfg.feature_source == "builtin":
            source = BuiltinFeatureSource(loader)
        else:
            source = FileFeatureSource.from_jsonl(cfg.feature_source)
        kept, rep = refine.refine_dataset(selected, model, source, workers=workers)
        entry.n_in = rep.n_in
        entry.n_out = rep.n_kept
        entry.dropped = rep.n_dropped
        if rep.images_emptied:
            entry.warnings.append(f"{len(rep.images_emptied)} images lost all boxes")
        return kept

    refined = run_stage("refine", refine_stage)

    # emit
    def emit_stage(entry: StageReportEntry):
        Path(cfg.output).parent.mkdir(parents=True, exist_ok=True)
        stats = emit.emit_dataset(refined, images, cfg.output, cfg.stats_output)
        entry.n_in = len(refined)
        entry.n_out = stats.n_boxes
        return stats

    stats = run_stage("emit", emit_stage)

    # noise (optional)
    if cfg.noise is not None:
        noise_cfg = cfg.noise

        def noise_stage(entry: StageReportEntry):
            spec = NoiseSpec(
                rate=noise_cfg.rate,
                seed=_or_seed(noise_cfg.seed, cfg.seed),
                max_tries=noise_cfg.max_tries,
            )
            noised, log = inject_noise(refined, images, spec)
            Path(noise_cfg.out).parent.mkdir(parents=True, exist_ok=True)
            emit.emit_dataset(noised, images, noise_cfg.out)
            if noise_cfg.log is not None:
                write_noise_log(noise_cfg.log, log)
            moved = sum(1 for e in log if e.new is not None)
            failed = len(log) - moved
            entry.n_in = len(refined)
            entry.n_out = len(noised)
            entry.warnings.append(f"moved {moved} of {len(refined)} boxes")
            if failed:
                entry.warnings.append(f"{failed} placement failures")

        run_stage("noise", noise_stage)

    # eval (optional)
    if cfg.eval is not None:
        eval_cfg = cfg.eval

        def eval_stage(entry: StageReportEntry):
            gts = load_eval_boxes(eval_cfg.gt, kind="gt")
            if eval_cfg.det is not None:
                dets = load_eval_boxes(eval_cfg.det, kind="det")
            else:
                dets = {}
                for b in refined:
                    dets.setdefault(b.image_id, []).append(
                        EvalDet(score=b.detector_score, box=b.box)
                    )
            curve = compute_det_curve(
                dets,
                gts,
                iou_thresh=eval_cfg.iou_thresh,
                min_height=eval_cfg.min_height,
                n_images=eval_cfg.n_images,
            )
            curve_out = eval_cfg.curve_out or _sibling(cfg.output, ".curve.csv")
            summary_out = eval_cfg.summary_out or _sibling(cfg.output, ".eval.json")
            write_curve_csv(curve, curve_out)
            write_curve_summary(curve, summary_out)
            entry.n_in = sum(len(v) for v in dets.values())
            entry.n_out = len(curve.points)
            entry.warnings.append(f"lamr_percent={curve.lamr_percent:.6g}")

        run_stage("eval", eval_stage)

    # audit (optional)
    if cfg.audit is not None:
        audit_cfg = cfg.audit

        def audit_stage(entry: StageReportEntry):
            box_ids = [b.box_id for b in refined]
            session = sample_boxes(
                box_ids,
                n=audit_cfg.n,
                seed=_or_seed(audit_cfg.seed, cfg.seed),
                session_id=f"run-{_or_seed(audit_cfg.seed, cfg.seed)}",
            )
            SessionStore(audit_cfg.sessions_dir).save(session)
            entry.n_in = len(box_ids)
            entry.n_out = len(session.sample)

        run_stage("audit", audit_stage)

    result = PipelineResult(report=report, stats=stats, n_emitted=stats.n_boxes)
    report_out = cfg.report_output or _sibling(cfg.output, ".report.json")
    Path(report_out).parent.mkdir(parents=True, exist_ok=True)
    emit.write_json_atomic(result.report_json(), report_out)
    return result


def _or_seed(value: Optional[int], fallback: int) -> int:
    return fallback if value is None else int(value)


def _sibling(output: Path, suffix: str) -> Path:
    output = Path(output)
    return output.with_name(output.stem + suffix)
