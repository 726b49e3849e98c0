"""Staged experiment runner: Direct transfer, CycleGAN adaptation, pseudo-labels.

Every stage reads its inputs from and writes its artifacts under one output
directory, appends a :class:`RunManifest` entry to ``manifest.jsonl`` and can
be re-run on its own.  ``run_pipeline`` chains all stages and writes the
comparison report.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import synthgen
from .alignednet import AlignedNet, NetConfig, load_checkpoint, save_checkpoint
from .cyclemap import CycleConfig, load_cyclegan, save_cyclegan, train_cyclegan, translate_dataset
from .evalcmc import cmc_evaluate, result_record, write_results
from .pseudolabel import (ClusterConfig, cross_view_merge, extract_features,
                          pair_metrics, per_camera_kmeans, read_pseudo_labels, write_pseudo_labels)
from .scheduler import write_trace
from .synthgen import (ImageSample, default_source_spec, default_target_spec,
                       generate_domain, ground_truth, load_dataset, save_dataset, stack_pixels,
                       stage_scope, visible_labels)
from .training import TrainConfig, train_embedding

log = logging.getLogger(__name__)

ENV_SEED = "REIDADAPT_SEED"
ENV_OUT = "REIDADAPT_OUT"
STAGES = ("generate-data", "train-source", "eval-direct", "train-cyclegan", "build-da",
          "train-da", "pseudo-label", "finetune", "evaluate")
EVAL_STAGES = ("eval-direct", "evaluate")
NOISE_SCOPE = "noise-report"
ARMS = ("without", "with")          # batch scheduler off / on
METHODS = ("Direct", "CycleGAN", "Ours")


class ConfigError(ValueError):
    pass


class StageDependencyError(RuntimeError):
    pass


class StageError(RuntimeError):
    """Any failure inside a stage, prefixed with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# configuration -----------------------------------------------------------
@dataclass
class DataSettings:
    num_identities: int = 40
    instances_per_camera: int = 4
    num_cameras: int = 2
    noise_level: float = 0.02
    target_texture_amplitude: float = 0.08
    source_path: str = ""           # load an existing dataset instead of generating
    target_path: str = ""


@dataclass
class ModelSettings:
    channels: tuple = (16, 32, 64)
    margin: float = 0.3
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4
    source_epochs: int = 30
    da_epochs: int = 15
    pseudo_epochs: int = 15
    finetune_lr: float = 0.01
    finetune_id_loss: bool = False


@dataclass
class SchedulerSettings:
    n_instances: int = 4
    max_batch_size: int = 88
    fixed_batch_size: int = 32      # batch size of the "without" arm
    arms: tuple = ("with",)


@dataclass
class ClusterSettings:
    k_per_camera: float = 0.25
    max_iters: int = 100


@dataclass
class EvalSettings:
    distance: str = "global"


@dataclass
class ExperimentConfig:
    seed: int = 1
    out_dir: str = "runs/default"
    data: DataSettings = field(default_factory=DataSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    scheduler: SchedulerSettings = field(default_factory=SchedulerSettings)
    cyclegan: CycleConfig = field(default_factory=CycleConfig)
    cluster: ClusterSettings = field(default_factory=ClusterSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def validate(self) -> None:
        for arm in self.scheduler.arms:
            if arm not in ARMS:
                raise ConfigError(f"scheduler.arms: unknown arm {arm!r} (use {ARMS})")
        if not self.scheduler.arms:
            raise ConfigError("scheduler.arms is empty")
        if self.eval.distance not in ("global", "global+dmli"):
            raise ConfigError(f"eval.distance: unknown distance {self.eval.distance!r}")
        if self.cyclegan.objective not in ("lsgan", "bce"):
            raise ConfigError(f"cyclegan.objective: unknown objective {self.cyclegan.objective!r}")
        if not 0.0 <= self.cyclegan.decay_start <= 1.0:
            raise ConfigError("cyclegan.decay_start must lie in [0, 1]")
        if self.cyclegan.lam < 0:
            raise ConfigError("cyclegan.lam must be non-negative")
        if self.model.margin <= 0:
            raise ConfigError("model.margin must be positive")
        if self.scheduler.fixed_batch_size % self.scheduler.n_instances:
            raise ConfigError("scheduler.fixed_batch_size must be a multiple of n_instances")
        for key in ("source_path", "target_path"):
            p = getattr(self.data, key)
            if p and not Path(p).is_dir():
                raise ConfigError(f"data.{key}: {p} is not a directory")
        try:
            self.source_spec().validate()
            self.target_spec().validate()
        except synthgen.SpecError as exc:
            raise ConfigError(str(exc)) from None

    def _domain_kw(self) -> dict:
        d = self.data
        return dict(num_identities=d.num_identities, instances_per_camera=d.instances_per_camera,
                    num_cameras=d.num_cameras, noise_level=d.noise_level)

    def source_spec(self):
        return default_source_spec(**self._domain_kw())

    def target_spec(self):
        spec = default_target_spec(**self._domain_kw())
        return dataclasses.replace(spec, texture=dataclasses.replace(
            spec.texture, amplitude=self.data.target_texture_amplitude))

    def train_config(self, stage: str, arm: str) -> TrainConfig:
        m, s = self.model, self.scheduler
        finetune = stage != "train-source"
        return TrainConfig(
            epochs={"train-source": m.source_epochs, "train-da": m.da_epochs,
                    "finetune": m.pseudo_epochs}[stage],
            lr=m.finetune_lr if finetune else m.lr, momentum=m.momentum,
            weight_decay=m.weight_decay, margin=m.margin, n_instances=s.n_instances,
            use_scheduler=arm == "with", max_batch_size=s.max_batch_size,
            fixed_batch_size=s.fixed_batch_size,
            use_id=m.finetune_id_loss if finetune else True)


_SECTIONS = ("data", "model", "scheduler", "cyclegan", "cluster", "eval")


def config_to_flat(cfg: ExperimentConfig) -> dict:
    """Dotted-key view, e.g. ``{"cyclegan.steps": 1500, ...}``."""
    flat = {"seed": cfg.seed, "out_dir": cfg.out_dir}
    for sec in _SECTIONS:
        for f in dataclasses.fields(getattr(cfg, sec)):
            v = getattr(getattr(cfg, sec), f.name)
            flat[f"{sec}.{f.name}"] = list(v) if isinstance(v, tuple) else v
    return flat


def _coerce(key: str, value, default):
    """Check ``value`` against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{key}: expected a number, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def config_from_flat(flat: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base else ExperimentConfig()
    sections = {sec: dataclasses.replace(getattr(cfg, sec)) for sec in _SECTIONS}
    top = {}
    for key, value in flat.items():
        if key in ("seed", "out_dir"):
            top[key] = _coerce(key, value, getattr(cfg, key))
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or not name or "." in name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = sections[sec]
        if name not in {f.name for f in dataclasses.fields(obj)}:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(key, value, getattr(obj, name)))
    k = sections["cluster"].k_per_camera
    if isinstance(k, float) and k.is_integer() and k >= 1:
        sections["cluster"].k_per_camera = int(k)
    return dataclasses.replace(cfg, **top, **sections)


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | os.PathLike | None = None, seed: int | None = None,
                out_dir: str | None = None, env: dict | None = None) -> ExperimentConfig:
    """File (TOML, flat dotted keys), then environment, then explicit arguments."""
    try:
        import tomllib
    except ModuleNotFoundError:     # python < 3.11
        import tomli as tomllib

    flat: dict = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                flat = _flatten(tomllib.load(fh))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
    env = os.environ if env is None else env
    if env.get(ENV_SEED):
        try:
            flat["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED}={env[ENV_SEED]!r} is not an integer") from None
    if env.get(ENV_OUT):
        flat["out_dir"] = env[ENV_OUT]
    if seed is not None:
        flat["seed"] = seed
    if out_dir is not None:
        flat["out_dir"] = out_dir
    cfg = config_from_flat(flat)
    cfg.validate()
    return cfg


def stage_seed(seed: int, stage: str, arm: str = "") -> int:
    """Independent, reproducible stream per (seed, stage, arm)."""
    key = [seed, STAGES.index(stage)] + ([ARMS.index(arm)] if arm else [])
    return int(np.random.SeedSequence(key).generate_state(1)[0])


# artifacts and manifests -------------------------------------------------
def file_hash(path: str | os.PathLike) -> str:
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file()):
            h.update(f.relative_to(p).as_posix().encode())
            h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    stage: str
    input_hash: dict          # artifact -> hash of every input read
    output_hash: dict         # artifact -> hash of every output written
    config: dict
    metrics: dict
    label_reads: dict         # audit scope -> hidden-label reads during the stage
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class RunDir:
    """Artifact layout of one run."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, rel: str) -> Path:
        return self.root / rel

    source = property(lambda self: self.path("data/source"))
    target = property(lambda self: self.path("data/target"))
    adapted = property(lambda self: self.path("data/adapted"))
    cyclegan = property(lambda self: self.path("models/cyclegan.ck"))
    manifest = property(lambda self: self.path("manifest.jsonl"))

    def model(self, kind: str, arm: str) -> Path:
        return self.path(f"models/{kind}-{arm}.ck")

    def pseudo(self, arm: str) -> Path:
        return self.path(f"pseudo/pseudo-{arm}.txt")

    def trace(self, kind: str, arm: str) -> Path:
        return self.path(f"traces/{kind}-{arm}.txt")

    def results(self, arm: str) -> Path:
        return self.path(f"metrics/results-{arm}.txt")

    def read_manifest(self) -> list[dict]:
        if not self.manifest.exists():
            return []
        return [json.loads(line) for line in self.manifest.read_text().splitlines() if line]

    def record(self, entry: RunManifest) -> None:
        """Append ``entry``, dropping earlier entries that wrote the same artifacts."""
        mine = set(entry.output_hash)
        kept = [e for e in self.read_manifest()
                if e["stage"] != entry.stage and not mine & set(e["output_hash"])]
        self.manifest.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(e, sort_keys=True) for e in kept] + [entry.to_json()]
        self.manifest.write_text("\n".join(lines) + "\n")


def _rel(run: RunDir, p: Path) -> str:
    return p.relative_to(run.root).as_posix()


def _require(run: RunDir, p: Path, stage: str, producer: str) -> Path:
    if not p.exists():
        raise StageDependencyError(
            f"[{stage}] missing {_rel(run, p)}; run stage '{producer}' first")
    return p


# stages ------------------------------------------------------------------
class _Ctx:
    def __init__(self, cfg: ExperimentConfig, run: RunDir, stage: str):
        self.cfg, self.run, self.stage = cfg, run, stage
        self.inputs: dict = {}
        self.outputs: list[Path] = []
        self.metrics: dict = {}

    def need(self, p: Path, producer: str) -> Path:
        _require(self.run, p, self.stage, producer)
        self.inputs[_rel(self.run, p)] = file_hash(p)
        return p

    def wrote(self, p: Path) -> Path:
        self.outputs.append(p)
        return p

    def out(self, rel_path: Path) -> Path:
        rel_path.parent.mkdir(parents=True, exist_ok=True)
        return rel_path


def _load_target(ctx: _Ctx) -> list[ImageSample]:
    return load_dataset(ctx.need(ctx.run.target, "generate-data"))


def _split(ctx: _Ctx, target: list[ImageSample]):
    return synthgen.split_query_gallery(target, ctx.cfg.seed)


def _stage_generate_data(ctx: _Ctx) -> None:
    cfg, run = ctx.cfg, ctx.run
    for name, path, spec_fn, dest in (("source", cfg.data.source_path, cfg.source_spec, run.source),
                                      ("target", cfg.data.target_path, cfg.target_spec, run.target)):
        if path:
            samples = load_dataset(path)
            ctx.inputs[path] = file_hash(path)
        else:
            samples = generate_domain(spec_fn(), cfg.seed)
        save_dataset(samples, ctx.out(dest))
        ctx.wrote(dest)
        ctx.metrics[f"{name}_images"] = len(samples)
    ctx.metrics["histogram_distance"] = round(synthgen.histogram_distance(
        load_dataset(run.source), load_dataset(run.target)), 6)


def _train(ctx: _Ctx, kind: str, arm: str, model: AlignedNet, samples, labels) -> AlignedNet:
    tcfg = ctx.cfg.train_config(ctx.stage, arm)
    if tcfg.use_id:
        n_cls = int(np.max(labels)) + 1
        if model.config.num_classes != n_cls:
            model.reset_classifier(n_cls, stage_seed(ctx.cfg.seed, ctx.stage, arm))
    res = train_embedding(model, stack_pixels(samples), labels, tcfg,
                          stage_seed(ctx.cfg.seed, ctx.stage, arm))
    write_trace(ctx.out(ctx.run.trace(kind, arm)), res.trace)
    ctx.wrote(ctx.run.trace(kind, arm))
    out = ctx.out(ctx.run.model(kind, arm))
    save_checkpoint(model, out, stage=ctx.stage, arm=arm, epochs=tcfg.epochs)
    ctx.wrote(out)
    ctx.metrics[f"{arm}.final_loss"] = round(res.trace[-1]["mean_loss"], 6)
    ctx.metrics[f"{arm}.final_batch_size"] = res.trace[-1]["batch_size"]
    return model


def _stage_train_source(ctx: _Ctx) -> None:
    src = load_dataset(ctx.need(ctx.run.source, "generate-data"))
    labels = visible_labels(src)
    for arm in ctx.cfg.scheduler.arms:
        net = AlignedNet(NetConfig(channels=tuple(ctx.cfg.model.channels),
                                   num_classes=int(labels.max()) + 1),
                         seed=stage_seed(ctx.cfg.seed, "train-source", arm))
        _train(ctx, "source", arm, net, src, labels)


def _evaluate(ctx: _Ctx, method: str, kind: str, arm: str, query, gallery) -> dict:
    model = load_checkpoint(ctx.need(ctx.run.model(kind, arm), _PRODUCER[kind]))
    curve = cmc_evaluate(model, query, gallery, ctx.cfg.eval.distance)
    return result_record(method, "source", "target", curve)


_PRODUCER = {"source": "train-source", "da": "train-da", "ours": "finetune"}


def _stage_eval_direct(ctx: _Ctx) -> None:
    query, gallery = _split(ctx, _load_target(ctx))
    for arm in ctx.cfg.scheduler.arms:
        rec = _evaluate(ctx, "Direct", "source", arm, query, gallery)
        ctx.metrics[arm] = {k: rec[k] for k in ("rank1", "rank5", "rank10")}


def _stage_train_cyclegan(ctx: _Ctx) -> None:
    src = load_dataset(ctx.need(ctx.run.source, "generate-data"))
    tgt = _load_target(ctx)
    ccfg = ctx.cfg.cyclegan
    model = train_cyclegan(stack_pixels(src), stack_pixels(tgt), ccfg,
                           stage_seed(ctx.cfg.seed, "train-cyclegan"))
    out = ctx.out(ctx.run.cyclegan)
    save_cyclegan(model, out, ccfg, steps=ccfg.steps)
    ctx.wrote(out)
    first, last = model.trace[0], model.trace[-1]
    ctx.metrics.update({"cycle_initial": round(first["cycle"], 6),
                        "cycle_final": round(last["cycle"], 6),
                        "total_final": round(last["total"], 6)})


def _stage_build_da(ctx: _Ctx) -> None:
    src = load_dataset(ctx.need(ctx.run.source, "generate-data"))
    gan = load_cyclegan(ctx.need(ctx.run.cyclegan, "train-cyclegan"))
    da = translate_dataset(gan.G, src)
    save_dataset(da, ctx.out(ctx.run.adapted))
    ctx.wrote(ctx.run.adapted)
    tgt = _load_target(ctx)
    ctx.metrics["histogram_source_target"] = round(synthgen.histogram_distance(src, tgt), 6)
    ctx.metrics["histogram_adapted_target"] = round(synthgen.histogram_distance(da, tgt), 6)


def _stage_train_da(ctx: _Ctx) -> None:
    da = load_dataset(ctx.need(ctx.run.adapted, "build-da"))
    labels = visible_labels(da)
    for arm in ctx.cfg.scheduler.arms:
        model = load_checkpoint(ctx.need(ctx.run.model("source", arm), "train-source"))
        _train(ctx, "da", arm, model, da, labels)


def _stage_pseudo_label(ctx: _Ctx) -> None:
    tgt = _load_target(ctx)
    cams = [s.camera_id for s in tgt]
    ccfg = ctx.cfg.cluster
    for arm in ctx.cfg.scheduler.arms:
        model = load_checkpoint(ctx.need(ctx.run.model("da", arm), "train-da"))
        feats = extract_features(model, tgt)
        clusters = per_camera_kmeans(feats, cams, ClusterConfig(
            ccfg.k_per_camera, ccfg.max_iters, stage_seed(ctx.cfg.seed, "pseudo-label", arm)))
        pmap = cross_view_merge(clusters)
        out = ctx.out(ctx.run.pseudo(arm))
        write_pseudo_labels(out, tgt, pmap)
        ctx.wrote(out)
        labels = pmap.labels_for(len(tgt))
        with stage_scope(NOISE_SCOPE):
            noise = pair_metrics(labels, ground_truth(tgt))
        ctx.metrics[arm] = {"num_pseudo_ids": pmap.num_identities,
                            **{k: round(v, 6) for k, v in noise.items()}}


def _stage_finetune(ctx: _Ctx) -> None:
    tgt = _load_target(ctx)
    for arm in ctx.cfg.scheduler.arms:
        pseudo = read_pseudo_labels(ctx.need(ctx.run.pseudo(arm), "pseudo-label"))
        missing = [s.sample_id for s in tgt if s.sample_id not in pseudo]
        if missing:
            raise StageError(ctx.stage, f"pseudo-label file lacks samples {missing[:5]}")
        samples = [dataclasses.replace(s, _person_id=pseudo[s.sample_id], hidden=False)
                   for s in tgt]
        model = load_checkpoint(ctx.need(ctx.run.model("da", arm), "train-da"))
        _train(ctx, "ours", arm, model, samples, visible_labels(samples))


def _stage_evaluate(ctx: _Ctx) -> None:
    query, gallery = _split(ctx, _load_target(ctx))
    for arm in ctx.cfg.scheduler.arms:
        records = [_evaluate(ctx, method, kind, arm, query, gallery)
                   for method, kind in zip(METHODS, ("source", "da", "ours"))]
        write_results(ctx.out(ctx.run.results(arm)), records)
        ctx.wrote(ctx.run.results(arm))
        ctx.metrics[arm] = {r["method"]: {k: r[k] for k in ("rank1", "rank5", "rank10")}
                            for r in records}


_STAGE_FNS = {
    "generate-data": _stage_generate_data, "train-source": _stage_train_source,
    "eval-direct": _stage_eval_direct, "train-cyclegan": _stage_train_cyclegan,
    "build-da": _stage_build_da, "train-da": _stage_train_da,
    "pseudo-label": _stage_pseudo_label, "finetune": _stage_finetune,
    "evaluate": _stage_evaluate,
}


def run_stage(stage: str, cfg: ExperimentConfig) -> RunManifest:
    """Run one stage and append its manifest entry."""
    if stage not in _STAGE_FNS:
        raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    cfg.validate()
    run = RunDir(cfg.out_dir)
    ctx = _Ctx(cfg, run, stage)
    before = Counter(synthgen.LABEL_AUDIT)
    t0 = time.perf_counter()
    with stage_scope(stage):
        try:
            _STAGE_FNS[stage](ctx)
        except (StageDependencyError, StageError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    reads = Counter(synthgen.LABEL_AUDIT)
    reads.subtract(before)
    entry = RunManifest(
        stage=stage, input_hash=ctx.inputs,
        output_hash={_rel(run, p): file_hash(p) for p in ctx.outputs},
        config=config_to_flat(cfg), metrics=ctx.metrics,
        label_reads={k: v for k, v in sorted(reads.items()) if v},
        wall_time=round(time.perf_counter() - t0, 3))
    run.record(entry)
    log.info("stage %s done in %.1fs", stage, entry.wall_time)
    return entry


# reporting ---------------------------------------------------------------
def training_label_reads(entries: Sequence[dict]) -> int:
    """Hidden-label reads attributed to anything but evaluation and noise reporting."""
    total = 0
    for e in entries:
        for scope, n in e["label_reads"].items():
            if scope not in EVAL_STAGES and scope != NOISE_SCOPE:
                total += n
    return total


def check_lineage(entries: Sequence[dict], arms: Sequence[str]) -> None:
    """Ours weights must derive from the CycleGAN weights, which derive from source."""
    by_stage = {e["stage"]: e for e in entries}
    for arm in arms:
        for stage, parent in (("train-da", "source"), ("finetune", "da")):
            rel = f"models/{parent}-{arm}.ck"
            got = by_stage.get(stage, {}).get("input_hash", {}).get(rel)
            producer = by_stage.get(_PRODUCER[parent], {}).get("output_hash", {}).get(rel)
            if got is None or got != producer:
                raise StageError(stage, f"lineage broken: {rel} hash {got} != producer {producer}")


def build_report(cfg: ExperimentConfig, entries: Sequence[dict]) -> dict:
    by_stage = {e["stage"]: e for e in entries}
    ev = by_stage["evaluate"]["metrics"]
    arms = [a for a in ARMS if a in cfg.scheduler.arms]
    rows = []
    for method in METHODS:
        row = {"method": method, "source": "source", "target": "target"}
        for r in ("rank1", "rank5", "rank10"):
            row[r] = {arm: ev[arm][method][r] for arm in arms}
        rows.append(row)
    return {"seed": cfg.seed, "arms": arms, "rows": rows,
            "pseudo_labels": by_stage.get("pseudo-label", {}).get("metrics", {}),
            "label_audit": {"training_reads": training_label_reads(entries),
                            "by_stage": {e["stage"]: e["label_reads"] for e in entries}}}


def format_report(report: dict) -> str:
    """Table with ``without/with`` cells when both scheduler arms ran."""
    arms = report["arms"]
    head = "/".join(arms)
    lines = [f"# seed {report['seed']}; cells: {head} scheduler",
             f"{'method':10s} {'rank1':>13s} {'rank5':>13s} {'rank10':>13s}"]
    for row in report["rows"]:
        cells = ["/".join(f"{row[r][a]:.2f}" for a in arms) for r in ("rank1", "rank5", "rank10")]
        lines.append(f"{row['method']:10s} " + " ".join(f"{c:>13s}" for c in cells))
    lines.append(f"# training-stage target label reads: {report['label_audit']['training_reads']}")
    return "\n".join(lines) + "\n"


def write_report(run: RunDir, report: dict) -> None:
    run.path("report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    run.path("report.txt").write_text(format_report(report))


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """All stages in order, then the comparison report (also written to disk)."""
    cfg.validate()
    run = RunDir(cfg.out_dir)
    for stage in STAGES:
        run_stage(stage, cfg)
    entries = run.read_manifest()
    check_lineage(entries, cfg.scheduler.arms)
    report = build_report(cfg, entries)
    write_report(run, report)
    return report


def aggregate_reports(reports: Sequence[dict]) -> dict:
    """Per-method, per-arm mean and sample standard deviation across seeds."""
    if not reports:
        raise ValueError("no reports to aggregate")
    arms = reports[0]["arms"]
    out = {"seeds": [r["seed"] for r in reports], "arms": arms, "rows": []}
    for i, method in enumerate(METHODS):
        row = {"method": method}
        for rank in ("rank1", "rank5", "rank10"):
            row[rank] = {}
            for arm in arms:
                vals = np.array([r["rows"][i][rank][arm] for r in reports])
                row[rank][arm] = {"values": vals.tolist(), "mean": round(float(vals.mean()), 4),
                                  "std": round(float(vals.std(ddof=1)) if len(vals) > 1 else 0.0, 4)}
        out["rows"].append(row)
    out["training_label_reads"] = sum(r["label_audit"]["training_reads"] for r in reports)
    return out


def run_seeds(cfg: ExperimentConfig, seeds: Sequence[int]) -> dict:
    """One pipeline per seed under ``out_dir/seed-<s>``, then the aggregate."""
    reports = []
    for s in seeds:
        sub = dataclasses.replace(cfg, seed=int(s), out_dir=str(Path(cfg.out_dir) / f"seed-{s}"))
        reports.append(run_pipeline(sub))
    agg = aggregate_reports(reports)
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    return agg


# command line ------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reidadapt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline-run",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML file with flat dotted keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        if name == "pipeline-run":
            sp.add_argument("--seeds", help="comma-separated seeds; runs each under OUT/seed-<s>")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        if args.command == "pipeline-run":
            if args.seeds:
                agg = run_seeds(cfg, [int(s) for s in args.seeds.split(",")])
                print(json.dumps(agg, indent=2, sort_keys=True))
            else:
                print(format_report(run_pipeline(cfg)), end="")
        else:
            entry = run_stage(args.command, cfg)
            print(json.dumps({"stage": entry.stage, "metrics": entry.metrics,
                              "outputs": entry.output_hash}, sort_keys=True))
    except (ConfigError, StageDependencyError, StageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
