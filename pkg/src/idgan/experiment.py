"""Experiment orchestration: configs, per-seed runs, evaluation, traversals and reports.

Layout under the output root::

    data/dataset-<hash>.idgd
    cache/predictor-<hash>-s<seed>.idgc
    runs/<config-hash>/<seed>/{config.yaml, checkpoints/, curves.csv, metrics/, figures/, manifest.json}

A run directory is add-only once its manifest says ``complete``: evaluation and
traversal write new files under ``metrics/`` and ``figures/`` and never touch
training artifacts.
"""
from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import logging
import math
import multiprocessing
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .data import (
    CANONICAL_CARDINALITIES,
    REDUCED_CARDINALITIES,
    DatasetHandle,
    FactorSpace,
    VariantConfig,
    apply_variant,
    generate_dsprites,
    ingest_image_folder,
    load_dataset,
    save_dataset,
)
from .errors import (
    DegenerateEncoderError,
    IDGANError,
    InvalidConfigError,
    InvalidInputError,
    InvalidStateError,
    TrainingDivergenceError,
    TrainingFailureError,
    UnsupportedMetricError,
)
from .metrics import (
    MetricReport,
    config_hash,
    estimate_r_id,
    extract_features,
    fid_from_features,
    fvm_score,
    gilbo,
    mig_score,
    posterior_code_source,
    sample_generator,
    split_half_noise_floor,
    train_factor_predictor,
)
from .nets import (
    DecoderGenerator,
    as_generator,
    load_checkpoint,
    load_module,
    load_network,
    save_network,
)
from .train import (
    FROZEN_ENCODER_MODES,
    GANStageConfig,
    VAEStageConfig,
    downsample,
    list_checkpoints,
    run_stage,
)

log = logging.getLogger(__name__)

HOME_ENV = "ID_DISTILL_HOME"
DEFAULT_HOME = "idgan-home"
METRICS = ("fvm", "mig", "fid", "r_id", "gilbo")
FACTOR_METRICS = ("fvm", "mig", "fid")
HIGHER_IS_BETTER = {"fvm": True, "mig": True, "fid": False, "r_id": True, "gilbo": True}
MANIFEST = "manifest.json"


# --------------------------------------------------------------------------
# Schema

@dataclass
class DatasetSpec:
    kind: str = "dsprites"
    cardinalities: list = field(default_factory=lambda: list(REDUCED_CARDINALITIES))
    resolution: int = 64
    variant: str = "plain"
    variant_seed: int = 0
    color_levels: int = 8
    folder: str | None = None
    path: str | None = None

    def __post_init__(self):
        if self.kind not in ("dsprites", "folder"):
            raise InvalidConfigError(f"unknown dataset kind {self.kind!r}", "dataset.kind")
        if isinstance(self.cardinalities, str):
            named = {"canonical": CANONICAL_CARDINALITIES, "reduced": REDUCED_CARDINALITIES}
            if self.cardinalities not in named:
                raise InvalidConfigError("expected a list, 'canonical' or 'reduced'",
                                         "dataset.cardinalities")
            self.cardinalities = list(named[self.cardinalities])
        self.cardinalities = [int(c) for c in self.cardinalities]
        if self.kind == "folder" and not self.folder:
            raise InvalidConfigError("folder datasets need a folder path", "dataset.folder")
        # constructing these validates cardinalities, resolution and variant
        if self.kind == "dsprites":
            FactorSpace.dsprites(tuple(self.cardinalities))
        VariantConfig(self.variant, self.variant_seed, self.color_levels)

    @property
    def has_factors(self):
        return self.kind == "dsprites"

    def identity(self):
        d = dataclasses.asdict(self)
        d.pop("path")
        if self.kind == "folder":
            d.pop("cardinalities")
        return d


@dataclass
class EvalSpec:
    seed: int = 0
    fid_samples: int = 10_000
    r_id_samples: int = 10_000
    gilbo_samples: int = 10_000
    gilbo_steps: int = 5000
    predictor_steps: int = 20_000
    predictor_target: float = 0.95

    def __post_init__(self):
        for name in ("fid_samples", "r_id_samples", "gilbo_samples", "gilbo_steps", "predictor_steps"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError("must be positive", f"eval.{name}")
        if not 0.0 <= self.predictor_target <= 1.0:
            raise InvalidConfigError("must lie in [0, 1]", "eval.predictor_target")


@dataclass
class TraverseSpec:
    range: float = 3.0
    steps: int = 10
    anchor_seed: int = 0
    dims: list | None = None

    def __post_init__(self):
        if self.range < 0:
            raise InvalidConfigError("must be nonnegative", "traverse.range")
        if int(self.steps) < 1:
            raise InvalidConfigError("must be positive", "traverse.steps")


_STAGE_EXCLUDED = {"seed", "encoder_path"}


@dataclass
class ExperimentConfig:
    name: str = ""
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    stage1: dict | None = field(default_factory=dict)
    stage2: dict | None = None
    metrics: list = field(default_factory=lambda: ["fvm", "mig"])
    seeds: list = field(default_factory=lambda: [0])
    output: str | None = None
    parallel: int = 1
    eval: EvalSpec = field(default_factory=EvalSpec)
    traverse: TraverseSpec = field(default_factory=TraverseSpec)

    def __post_init__(self):
        if not self.seeds:
            raise InvalidConfigError("at least one seed is required", "seeds")
        self.seeds = [_seed(s, "seeds") for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidConfigError("seeds repeat", "seeds")
        if int(self.parallel) < 1:
            raise InvalidConfigError("must be positive", "parallel")
        if self.stage1 is None and self.stage2 is None:
            raise InvalidConfigError("nothing to train", "stage1")
        s1 = self.stage1_config(0)
        s2 = self.stage2_config(0)
        if s2 is not None and s2.mode in FROZEN_ENCODER_MODES and s1 is None:
            raise InvalidConfigError(f"mode {s2.mode} needs a stage-1 encoder", "stage1")
        if s1 is not None and s2 is not None and s2.mode in FROZEN_ENCODER_MODES \
                and s2.c_dim != s1.c_dim:
            # c_dim follows the encoder; keep the recorded value consistent
            self.stage2 = dict(self.stage2, c_dim=s1.c_dim)
        for k, m in enumerate(self.metrics):
            if m not in METRICS:
                raise InvalidConfigError(f"unknown metric {m!r}", f"metrics[{k}]")
            if m in FACTOR_METRICS and not self.dataset.has_factors:
                raise UnsupportedMetricError(f"{m} needs a dataset with ground-truth factors")
            if m in ("r_id", "gilbo") and s2 is None:
                raise UnsupportedMetricError(f"{m} needs a stage-2 generator")

    def stage1_config(self, seed) -> VAEStageConfig | None:
        if self.stage1 is None:
            return None
        return _build_stage(VAEStageConfig, self.stage1, "stage1", seed, extra=("resolution",))

    def stage2_config(self, seed) -> GANStageConfig | None:
        if self.stage2 is None:
            return None
        return _build_stage(GANStageConfig, self.stage2, "stage2", seed)

    @property
    def stage1_resolution(self):
        if self.stage1 is None:
            return None
        return int(self.stage1.get("resolution") or self.dataset.resolution)

    def identity(self):
        """Fields that determine training artifacts (the run-directory hash)."""
        return {"name": self.name, "dataset": self.dataset.identity(),
                "stage1": None if self.stage1 is None else dataclasses.asdict(self.stage1_config(0)) | {
                    "resolution": self.stage1_resolution, "seed": None},
                "stage2": None if self.stage2 is None else dataclasses.asdict(self.stage2_config(0)) | {
                    "seed": None}}

    @property
    def hash(self):
        return config_hash(self.identity())

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["stage1"] = None if self.stage1 is None else dict(self.stage1)
        out["stage2"] = None if self.stage2 is None else dict(self.stage2)
        return out

    def method(self, stage):
        base = self.stage1_config(0).objective if stage == "stage1" else self.stage2_config(0).mode
        return f"{base} ({self.name})" if self.name else base


def _seed(value, path):
    if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
        raise InvalidConfigError(f"not an integer: {value!r}", path)
    try:
        v = int(value)
    except (TypeError, ValueError):
        raise InvalidConfigError(f"not an integer: {value!r}", path) from None
    if not 0 <= v < 2**64:
        raise InvalidConfigError(f"seed must lie in [0, 2^64): {value!r}", path)
    return v


def _build_stage(cls, values, path, seed, extra=()):
    allowed = {f.name for f in dataclasses.fields(cls)} - _STAGE_EXCLUDED
    values = dict(values)
    for key in values:
        if key not in allowed and key not in extra:
            raise InvalidConfigError(f"unknown key {key!r}", f"{path}.{key}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in values.items() if k in allowed}
    return cls(**kwargs, seed=seed)


def _from_mapping(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidConfigError("expected a mapping", path)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise InvalidConfigError(f"unknown key {key!r}", f"{path}.{key}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfigError(str(exc), path) from None


def config_from_dict(data) -> ExperimentConfig:
    data = dict(data or {})
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in top:
            raise InvalidConfigError(f"unknown key {key!r}", key)
    for key in ("stage1", "stage2"):
        if key in data and data[key] is not None and not isinstance(data[key], dict):
            raise InvalidConfigError("expected a mapping or null", key)
    if "lambda" in (data.get("stage2") or {}):
        stage2 = dict(data["stage2"])
        stage2["lam"] = stage2.pop("lambda")
        data["stage2"] = stage2
    data["dataset"] = _from_mapping(DatasetSpec, data.get("dataset"), "dataset")
    data["eval"] = _from_mapping(EvalSpec, data.get("eval"), "eval")
    data["traverse"] = _from_mapping(TraverseSpec, data.get("traverse"), "traverse")
    if "metrics" in data and not isinstance(data["metrics"], list):
        raise InvalidConfigError("expected a list", "metrics")
    if "seeds" in data and not isinstance(data["seeds"], list):
        raise InvalidConfigError("expected a list", "seeds")
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"not valid YAML: {exc}", str(path)) from None
    if data is not None and not isinstance(data, dict):
        raise InvalidConfigError("top level must be a mapping", str(path))
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def output_root(cfg: ExperimentConfig | None = None, override=None) -> Path:
    if override:
        return Path(override)
    if cfg is not None and cfg.output:
        return Path(cfg.output)
    return Path(os.environ.get(HOME_ENV, DEFAULT_HOME))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# --------------------------------------------------------------------------
# Data

def dataset_path(cfg: ExperimentConfig, root: Path) -> Path:
    if cfg.dataset.path:
        return Path(cfg.dataset.path)
    return root / "data" / f"dataset-{config_hash(cfg.dataset.identity())}.idgd"


def build_dataset(spec: DatasetSpec) -> DatasetHandle:
    if spec.kind == "folder":
        return ingest_image_folder(spec.folder, spec.resolution)
    d = generate_dsprites(FactorSpace.dsprites(tuple(spec.cardinalities)), spec.resolution)
    return apply_variant(d, VariantConfig(spec.variant, spec.variant_seed, spec.color_levels))


def cmd_generate_data(cfg: ExperimentConfig, root=None, echo=print) -> Path:
    root = output_root(cfg, root)
    d = build_dataset(cfg.dataset)
    path = dataset_path(cfg, root)
    path.parent.mkdir(parents=True, exist_ok=True)
    path = save_dataset(d, path)
    echo(f"wrote {path}: N={len(d)} resolution={d.resolution} variant={d.variant.kind}")
    return path


def resize_dataset(d: DatasetHandle, resolution) -> DatasetHandle:
    """Bilinear resize of every image (factors kept)."""
    if resolution == d.resolution:
        return d
    out = np.empty((len(d), resolution, resolution, d.channels), dtype=np.uint8)
    for lo in range(0, len(d), 1024):
        x = downsample(torch.from_numpy(d.as_float(np.arange(lo, min(lo + 1024, len(d))))), resolution)
        out[lo:lo + len(x)] = np.rint(x.clamp(0, 1).numpy() * 255).astype(np.uint8).transpose(0, 2, 3, 1)
    return dataclasses.replace(d, images=out, meta=dict(d.meta, resized_from=d.resolution))


def _load_dataset_for(cfg, root):
    path = dataset_path(cfg, root)
    if not path.exists():
        raise InvalidStateError(f"dataset file {path} does not exist; run generate-data first")
    return path, load_dataset(path)


# --------------------------------------------------------------------------
# Training

def run_directory(cfg: ExperimentConfig, seed, root) -> Path:
    return Path(root) / "runs" / cfg.hash / str(seed)


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        return None
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _now():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _train_seed(cfg_dict, seed, root, resume):
    """Train both stages of one seed; returns the manifest dict (never raises)."""
    cfg = config_from_dict(cfg_dict)
    root = Path(root)
    run_dir = run_directory(cfg, seed, root)
    manifest = {"config_hash": cfg.hash, "seed": seed, "toolkit_version": __version__,
                "started": _now(), "finished": None, "status": "running", "failure": None,
                "config": cfg.to_dict(), "artifacts": {}}
    where = {"stage": None, "step": 0}

    def progress(tag, step, terms):
        where["stage"], where["step"] = tag, step

    try:
        data_path, dataset = _load_dataset_for(cfg, root)
        manifest["dataset"] = {"path": str(data_path), "sha256": file_sha256(data_path)}
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "metrics").mkdir(exist_ok=True)
        (run_dir / "figures").mkdir(exist_ok=True)
        config_path = run_dir / "config.yaml"
        config_path.write_text(dump_config(cfg), encoding="utf-8")
        checkpoints = []
        encoder, s1_ckpt = None, None
        s1 = cfg.stage1_config(seed)
        if s1 is not None:
            where["stage"], where["step"] = "stage1", 0
            data1 = resize_dataset(dataset, cfg.stage1_resolution)
            r1 = run_stage(s1, data1, out_dir=run_dir, resume=resume, progress=progress)
            s1_ckpt = r1.final_checkpoint
            checkpoints += [str(p) for p in r1.checkpoints]
            manifest["stage1_checkpoint_sha256"] = file_sha256(s1_ckpt)
        s2 = cfg.stage2_config(seed)
        if s2 is not None:
            where["stage"], where["step"] = "stage2", 0
            if s1_ckpt is not None:
                # consume the stored checkpoint, not the in-memory network
                encoder = load_module(None, load_checkpoint(s1_ckpt), "encoder.")
            r2 = run_stage(s2, dataset, encoder=encoder if s2.mode in FROZEN_ENCODER_MODES else None,
                           out_dir=run_dir, resume=resume, progress=progress)
            checkpoints += [str(p) for p in r2.checkpoints]
            if s1_ckpt is not None and file_sha256(s1_ckpt) != manifest["stage1_checkpoint_sha256"]:
                raise InvalidStateError("stage-1 checkpoint changed during stage 2")
        manifest["artifacts"] = {"config": str(config_path), "checkpoints": checkpoints,
                                 "curves": str(run_dir / "curves.csv"),
                                 "metrics": str(run_dir / "metrics"),
                                 "figures": str(run_dir / "figures")}
        manifest["status"] = "complete"
    except Exception as exc:  # noqa: BLE001 - reported through the manifest
        step = exc.step if isinstance(exc, TrainingDivergenceError) and exc.step is not None else where["step"]
        manifest["status"] = "failed"
        manifest["failure"] = {"stage": where["stage"], "step": step,
                               "error": f"{type(exc).__name__}: {exc}"}
        log.error("seed %s failed at %s step %s: %s", seed, where["stage"], step, exc)
    manifest["finished"] = _now()
    return manifest


def _finalize_manifest(manifest, run_dir):
    if manifest["status"] == "complete":
        missing = [p for p in _artifact_paths(manifest) if not Path(p).exists()]
        if missing:
            manifest["status"] = "failed"
            manifest["failure"] = {"stage": None, "step": None, "error": f"missing artifacts: {missing}"}
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    _write_json(Path(run_dir) / MANIFEST, manifest)


def _artifact_paths(manifest):
    a = manifest.get("artifacts", {})
    out = [a[k] for k in ("config", "curves", "metrics", "figures") if k in a]
    return out + list(a.get("checkpoints", []))


def _worker_init():
    torch.set_num_threads(1)


def cmd_train(cfg: ExperimentConfig, seeds=None, root=None, resume=False, parallel=None) -> list:
    """Train every seed; returns their manifests.  Completed runs are left untouched."""
    root = output_root(cfg, root)
    seeds = cfg.seeds if seeds is None else [_seed(s, "seeds") for s in seeds]
    parallel = cfg.parallel if parallel is None else int(parallel)
    _load_dataset_for(cfg, root)
    results, todo = {}, []
    for seed in seeds:
        run_dir = run_directory(cfg, seed, root)
        existing = read_manifest(run_dir)
        if existing is not None and existing["status"] == "complete":
            log.info("seed %s already complete in %s", seed, run_dir)
            results[seed] = existing
        elif run_dir.exists() and any(run_dir.iterdir()) and not resume:
            raise InvalidStateError(f"{run_dir} holds an unfinished run; pass --resume to continue it")
        else:
            todo.append(seed)
    cfg_dict = cfg.to_dict()
    if parallel > 1 and len(todo) > 1:
        ctx = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(min(parallel, len(todo)), mp_context=ctx,
                                                    initializer=_worker_init) as pool:
            futures = {s: pool.submit(_train_seed, cfg_dict, s, str(root), resume) for s in todo}
            for seed, fut in futures.items():
                results[seed] = fut.result()
                _finalize_manifest(results[seed], run_directory(cfg, seed, root))
    else:
        for seed in todo:
            results[seed] = _train_seed(cfg_dict, seed, str(root), resume)
            _finalize_manifest(results[seed], run_directory(cfg, seed, root))
    return [results[s] for s in seeds]


# --------------------------------------------------------------------------
# Evaluation

@dataclass
class RunModels:
    """Networks of one finished run, keyed by the method they represent."""

    seed: int
    encoder1: object = None
    decoder1: object = None
    encoder2: object = None
    generator2: object = None
    mode: str | None = None


def load_run_models(run_dir) -> RunModels:
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    if manifest is None or manifest["status"] != "complete":
        raise InvalidStateError(f"{run_dir} is not a completed run")
    ckpt_dir = run_dir / "checkpoints"
    models = RunModels(int(manifest["seed"]))
    s1 = list_checkpoints(ckpt_dir, "stage1")
    s2 = list_checkpoints(ckpt_dir, "stage2")
    if not s1 and not s2:
        raise InvalidStateError(f"{run_dir} has no checkpoints")
    if s1:
        t = load_checkpoint(s1[-1])
        models.encoder1 = load_module(None, t, "encoder.")
        models.decoder1 = DecoderGenerator(load_module(None, t, "decoder."))
    if s2:
        t = load_checkpoint(s2[-1])
        models.mode = manifest["config"]["stage2"]["mode"]
        if models.mode == "vaegan":
            models.generator2 = DecoderGenerator(load_module(None, t, "decoder."))
        else:
            models.generator2 = load_module(None, t, "generator.")
        if models.mode in FROZEN_ENCODER_MODES:
            models.encoder2 = models.encoder1
        elif models.mode == "infogan":
            models.encoder2 = load_module(None, t, "q.")
        elif models.mode != "gan":
            models.encoder2 = load_module(None, t, "encoder.")
    for m in (models.encoder1, models.decoder1, models.encoder2, models.generator2):
        if m is not None:
            m.eval()
    return models


def factor_predictor(dataset: DatasetHandle, spec: EvalSpec, root, data_sha):
    """Trained (or cached) factor predictor used as the FID feature extractor."""
    cache = Path(root) / "cache" / f"predictor-{data_sha[:16]}-s{spec.seed}-n{spec.predictor_steps}.idgc"
    if cache.exists():
        return load_network(cache)
    net = train_factor_predictor(dataset, steps=spec.predictor_steps, seed=spec.seed,
                                 target=spec.predictor_target)
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_network(cache, net)
    _write_json(cache.with_suffix(".json"), {"accuracies": net.accuracies,
                                             "raw_accuracies": net.raw_accuracies, "trace": net.trace})
    return net


class _Evaluator:
    def __init__(self, cfg: ExperimentConfig, dataset, data_sha, root):
        self.cfg, self.dataset, self.spec, self.root, self.data_sha = cfg, dataset, cfg.eval, root, data_sha
        self._predictor = None
        self._real_features = None
        self.skipped = []

    @property
    def predictor(self):
        if self._predictor is None:
            self._predictor = factor_predictor(self.dataset, self.spec, self.root, self.data_sha)
        return self._predictor

    def real_features(self):
        if self._real_features is None:
            n = min(self.spec.fid_samples, len(self.dataset))
            idx = np.sort(np.random.default_rng([self.spec.seed, 3]).choice(len(self.dataset), n, replace=False))
            self._real_features = extract_features(self.predictor, self.dataset.as_float(idx))
        return self._real_features

    def noise_floor(self):
        return split_half_noise_floor(self.predictor, self.dataset, self.spec.fid_samples // 2,
                                      self.spec.seed).value

    def code_source(self, models):
        if models.mode == "infogan" or models.encoder2 is None:
            return None
        return posterior_code_source(models.encoder2, self.dataset)

    def fid(self, generator, code_source):
        fake = sample_generator(generator, self.spec.fid_samples, self.spec.seed, code_source)
        return fid_from_features(self.real_features(), extract_features(self.predictor, fake)).value

    def evaluate(self, models: RunModels, metrics):
        rows, methods = [], []
        if models.encoder1 is not None:
            methods.append(("stage1", models.encoder1, models.decoder1, None))
        if models.generator2 is not None:
            methods.append(("stage2", models.encoder2, models.generator2, self.code_source(models)))
        for stage, encoder, generator, codes in methods:
            name = self.cfg.method(stage)
            for metric in metrics:
                try:
                    value = self._metric(metric, stage, encoder, generator, codes, models)
                except (DegenerateEncoderError, TrainingFailureError) as exc:
                    # left as an explicit gap in reports
                    log.warning("seed %s %s/%s not computed: %s", models.seed, name, metric, exc)
                    self.skipped.append((f"{name}/{metric}", models.seed, str(exc)))
                    continue
                if value is not None:
                    rows.append((f"{name}/{metric}", models.seed, value))
        return rows

    def _metric(self, metric, stage, encoder, generator, codes, models):
        d, seed = self.dataset, self.spec.seed
        if encoder is None and metric in ("fvm", "mig", "r_id"):
            return None
        if metric == "fvm":
            return fvm_score(encoder, d, seed)
        if metric == "mig":
            return mig_score(encoder, d)
        if metric == "fid":
            source = posterior_code_source(encoder, d) if stage == "stage1" else codes
            return self.fid(generator, source)
        if stage == "stage1":
            return None
        if metric == "r_id":
            if models.mode == "infogan":
                return None
            return estimate_r_id(generator, encoder, d, self.spec.r_id_samples, seed).value
        if metric == "gilbo":
            return gilbo(generator, self.spec.gilbo_samples, self.spec.gilbo_steps, seed,
                         code_source=codes).value
        raise UnsupportedMetricError(metric)


def _metrics_path(run_dir, eval_seed):
    return Path(run_dir) / "metrics" / f"eval-s{eval_seed}.csv"


def write_rows(path, rows):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "seed", "value"])
        w.writerows((n, s, repr(float(v))) for n, s, v in rows)
    os.replace(tmp, path)


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["name", "seed", "value"]:
            raise InvalidInputError(f"{path} is not a metric row file")
        return [(n, int(s), float(v)) for n, s, v in reader]


def cmd_eval(cfg: ExperimentConfig, seeds=None, root=None, metrics=None, eval_seed=None,
             echo=print) -> Path:
    """Evaluate every completed run of ``cfg``; writes per-run rows and an aggregate report.

    Returns the path of the aggregate row file ``runs/<hash>/eval-s<seed>.csv``.
    """
    root = output_root(cfg, root)
    metrics = list(cfg.metrics if metrics is None else metrics)
    if eval_seed is not None:
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, seed=int(eval_seed)))
    for m in metrics:
        if m not in METRICS:
            raise UnsupportedMetricError(f"unknown metric {m!r}")
        if m in FACTOR_METRICS and not cfg.dataset.has_factors:
            raise UnsupportedMetricError(f"{m} needs a dataset with ground-truth factors")
        if m in ("r_id", "gilbo") and cfg.stage2 is None:
            raise UnsupportedMetricError(f"{m} needs a stage-2 generator")
    seeds = cfg.seeds if seeds is None else [_seed(s, "seeds") for s in seeds]
    data_path, dataset = _load_dataset_for(cfg, root)
    evaluator = _Evaluator(cfg, dataset, file_sha256(data_path), root)
    all_rows = []
    for seed in seeds:
        run_dir = run_directory(cfg, seed, root)
        path = _metrics_path(run_dir, cfg.eval.seed)
        rows = read_rows(path) if path.exists() else []
        have = {n for n, _, _ in rows}
        missing = [m for m in metrics if not any(n.endswith("/" + m) for n in have)]
        if missing:
            new = evaluator.evaluate(load_run_models(run_dir), missing)
            rows = rows + new
            write_rows(path, rows)
        all_rows += [r for r in rows if r[0].rsplit("/", 1)[1] in metrics]
    if "fid" in metrics:
        all_rows += [("dataset/fid_noise_floor", s, evaluator.noise_floor()) for s in seeds[:1]]
    out = Path(root) / "runs" / cfg.hash / f"eval-s{cfg.eval.seed}.csv"
    write_rows(out, all_rows)
    reports = MetricReport.from_rows(all_rows, cfg.hash)
    summary = {name: r.summary() for name, r in sorted(reports.items())}
    _write_json(out.with_suffix(".json"), summary)
    for name, seed, why in evaluator.skipped:
        echo(f"{name} seed {seed}: not computed ({why})")
    for name, r in sorted(reports.items()):
        echo(f"{name}: {r.mean:.4f} ± {r.std:.4f} (n={len(r.values)})")
    return out


# --------------------------------------------------------------------------
# Traversals

def sweep_offsets(range_, steps):
    """Offsets in [-range, +range]; a single step is the anchor itself."""
    if steps == 1:
        return np.zeros(1)
    return np.linspace(-range_, range_, steps)


@torch.no_grad()
def traverse(generator, part="c", dims=None, range_=3.0, steps=10, anchor_seed=0, anchor=None):
    """Images sweeping each requested dimension of ``part`` around one anchor sample.

    Returns a float tensor of shape (len(dims), steps, C, H, W) in [0, 1] and the anchor code.
    """
    generator = as_generator(generator)
    size = generator.c_dim if part == "c" else generator.s_dim
    if part not in ("c", "s"):
        raise InvalidInputError(f"part must be 'c' or 's', got {part!r}")
    if size == 0:
        raise InvalidInputError(f"the generator has no {part} coordinates")
    dims = list(range(size)) if dims is None else [int(k) for k in dims]
    for k in dims:
        if not 0 <= k < size:
            raise InvalidInputError(f"dimension {k} out of range [0, {size})")
    if anchor is None:
        gen = torch.Generator().manual_seed(int(anchor_seed))
        anchor = (torch.randn(1, generator.s_dim, generator=gen), torch.randn(1, generator.c_dim, generator=gen))
    s0, c0 = anchor
    offsets = torch.from_numpy(sweep_offsets(range_, steps)).float()
    was_training = generator.training
    generator.eval()
    rows = []
    for k in dims:
        s, c = s0.repeat(steps, 1), c0.repeat(steps, 1)
        target = c if part == "c" else s
        target[:, k] = target[:, k] + offsets
        rows.append(generator.to_unit(generator.generate(s, c)).clamp(0, 1))
    generator.train(was_training)
    return torch.stack(rows), anchor


def tile(grid, pad=2, fill=255) -> np.ndarray:
    """(rows, cols, C, H, W) in [0, 1] -> H' x W' x C uint8 mosaic with ``pad`` pixel gutters."""
    grid = np.asarray(grid)
    rows, cols, ch, h, w = grid.shape
    out = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, ch), fill, dtype=np.uint8)
    pix = np.rint(np.clip(grid, 0, 1) * 255).astype(np.uint8).transpose(0, 1, 3, 4, 2)
    for i in range(rows):
        for j in range(cols):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = pix[i, j]
    return out


def save_png(mosaic, path):
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = mosaic[..., 0] if mosaic.shape[-1] == 1 else mosaic
    Image.fromarray(img).save(path, format="PNG")
    return path


def _sampler_from_checkpoint(path):
    tensors = load_checkpoint(path)
    if any(k.startswith("generator.") for k in tensors):
        return load_module(None, tensors, "generator.")
    if any(k.startswith("decoder.") for k in tensors):
        return DecoderGenerator(load_module(None, tensors, "decoder."))
    raise InvalidInputError(f"{path} holds neither a generator nor a decoder")


def cmd_traverse(checkpoint, out_dir, dims=None, range_=3.0, steps=10, anchor_seed=0,
                 compare=None, echo=print) -> list:
    """Write traversal grids for a generator or decoder checkpoint.

    ``compare`` names a stage-1 checkpoint whose decoder is swept with the same c
    anchor; its rows interleave above the generator's (decoder row, generator row).
    When the generator has both s and c coordinates a separate s-grid is written.
    """
    out_dir = Path(out_dir)
    gen = _sampler_from_checkpoint(checkpoint)
    stem = Path(checkpoint).stem
    written = []
    grid, anchor = traverse(gen, "c", dims, range_, steps, anchor_seed)
    if compare is not None:
        dec = _sampler_from_checkpoint(compare)
        if dec.c_dim != gen.c_dim:
            raise InvalidInputError(f"c dimensions differ: {dec.c_dim} vs {gen.c_dim}")
        top, _ = traverse(dec, "c", dims, range_, steps, anchor=(torch.zeros(1, dec.s_dim), anchor[1]))
        if top.shape[2:] != grid.shape[2:]:
            top = torch.stack([_match(t, grid.shape[2:]) for t in top])
        grid = torch.stack([r for pair in zip(top, grid) for r in pair])
        written.append(save_png(tile(grid.numpy()), out_dir / f"{stem}_c_vs_decoder.png"))
    else:
        written.append(save_png(tile(grid.numpy()), out_dir / f"{stem}_c.png"))
    if gen.s_dim > 0 and gen.c_dim > 0:
        s_dims = None if dims is None else [k for k in dims if k < gen.s_dim]
        s_grid, _ = traverse(gen, "s", s_dims, range_, steps, anchor=anchor)
        written.append(save_png(tile(s_grid.numpy()), out_dir / f"{stem}_s.png"))
    for p in written:
        echo(f"wrote {p}")
    return written


def _match(images, shape):
    """Resize/convert a (N, C, H, W) batch to channels/resolution ``shape``."""
    ch, h, _ = shape
    x = downsample(images, h) if images.shape[-1] != h else images
    if x.shape[-1] != h:
        x = torch.nn.functional.interpolate(x, size=(h, h), mode="nearest")
    if x.shape[1] != ch:
        x = x.expand(-1, ch, -1, -1) if x.shape[1] == 1 else x.mean(1, keepdim=True)
    return x


# --------------------------------------------------------------------------
# Reports

def format_cell(mean, std):
    return f"{mean:.2f}±{std:.2f}"


def _metric_order(metrics):
    known = [m for m in METRICS if m in metrics]
    return known + sorted(m for m in metrics if m not in METRICS)


def build_table(rows):
    """(name, seed, value) rows with name ``method/metric`` -> (methods, metrics, cells).

    Cells are ``mean±std`` with 2 decimals, the best mean per column wrapped in
    ``**``; missing combinations are ``n/a``.
    """
    reports = MetricReport.from_rows(rows)
    by_cell = {}
    for name, rep in reports.items():
        method, metric = name.rsplit("/", 1)
        by_cell[(method, metric)] = rep
    methods = sorted({m for m, _ in by_cell if m != "dataset"})
    metrics = _metric_order({k for m, k in by_cell if m != "dataset"})
    if not methods:
        raise InvalidInputError("no method rows to tabulate")
    cells = {}
    for metric in metrics:
        present = [m for m in methods if (m, metric) in by_cell]
        best = None
        if present:
            key = lambda m: round(by_cell[(m, metric)].mean, 2)
            higher = HIGHER_IS_BETTER.get(metric, True)
            target = max(map(key, present)) if higher else min(map(key, present))
            best = {m for m in present if key(m) == target}
        for m in methods:
            rep = by_cell.get((m, metric))
            if rep is None:
                cells[(m, metric)] = "n/a"
                continue
            text = format_cell(rep.mean, rep.std)
            cells[(m, metric)] = f"**{text}**" if len(present) > 1 and m in best else text
    notes = {k: v for k, v in by_cell.items() if k[0] == "dataset"}
    return methods, metrics, cells, notes


def _header(metric):
    arrow = "↑" if HIGHER_IS_BETTER.get(metric, True) else "↓"
    return f"{metric.upper()} ({arrow})"


def render_markdown(methods, metrics, cells, notes=None):
    lines = ["| method | " + " | ".join(_header(m) for m in metrics) + " |",
             "|---|" + "---|" * len(metrics)]
    for m in methods:
        lines.append(f"| {m} | " + " | ".join(cells[(m, k)] for k in metrics) + " |")
    for (_, metric), rep in sorted((notes or {}).items()):
        lines.append("")
        lines.append(f"{metric}: {format_cell(rep.mean, rep.std)}")
    return "\n".join(lines) + "\n"


def render_csv_rows(methods, metrics, cells):
    return [["method"] + [_header(m) for m in metrics]] + [[m] + [cells[(m, k)] for k in metrics]
                                                             for m in methods]


def cmd_report(inputs, out_dir, name="report", echo=print):
    """Merge evaluation row files into markdown and CSV tables; returns both paths."""
    rows = []
    for path in inputs:
        rows += read_rows(path)
    if not rows:
        raise InvalidInputError("no metric rows in the given inputs")
    methods, metrics, cells, notes = build_table(rows)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md = out_dir / f"{name}.md"
    md.write_text(render_markdown(methods, metrics, cells, notes), encoding="utf-8")
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(render_csv_rows(methods, metrics, cells))
    echo(md.read_text(encoding="utf-8"))
    return md, csv_path


def pooled_standard_error(values):
    """Standard error of the mean across seeds (sample std, ddof 1)."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) < 2:
        return math.nan
    return float(values.std(ddof=1) / math.sqrt(len(values)))


__all__ = [
    "DatasetSpec", "EvalSpec", "ExperimentConfig", "IDGANError", "TraverseSpec", "build_dataset",
    "build_table", "cmd_eval", "cmd_generate_data", "cmd_report", "cmd_train", "cmd_traverse",
    "config_from_dict", "dataset_path", "dump_config", "load_config", "load_run_models",
    "output_root", "read_manifest", "read_rows", "render_csv_rows", "render_markdown",
    "resize_dataset", "run_directory", "sweep_offsets", "tile", "traverse", "write_rows",
]
