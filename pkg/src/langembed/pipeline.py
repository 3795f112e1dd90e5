"""Run-directory orchestration for the full experimental procedure.

Layout of a run directory::

    config.json                      effective configuration
    dataset/                         corpus (manifest.json + utts/*.synu)
    checkpoints/encoder.ldck
    checkpoints/stage1_<cond>.ldck   cond = sat-{on,off}_proj-{on,off}
    checkpoints/stage2_<cond>_b<N>.ldck
    checkpoints/scratch_b<N>.ldck
    logs/<phase>/metrics.csv
    eval/<cond>/eval_report.json, eval/plots/*.svg, eval/summary.md
    run.json                         config snapshot, corpus hash, final metrics, checkpoint hashes
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from pathlib import Path

from . import evaluation, training
from .config import TrainConfig
from .losses import MetricsWriter
from .model import ModelGraph, load_checkpoint, save_checkpoint
from .synthdata import CorpusManifest, build_corpus

log = logging.getLogger(__name__)

DEFAULT_BUDGETS = (20, 120)


class MissingArtifactError(FileNotFoundError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def dataset(self) -> Path:
        return self.root / "dataset"

    @property
    def encoder(self) -> Path:
        return self.root / "checkpoints" / "encoder.ldck"

    def stage1(self, cond: str) -> Path:
        return self.root / "checkpoints" / f"stage1_{cond}.ldck"

    def stage2(self, cond: str, budget: int) -> Path:
        return self.root / "checkpoints" / f"stage2_{cond}_b{budget}.ldck"

    def scratch(self, budget: int) -> Path:
        return self.root / "checkpoints" / f"scratch_b{budget}.ldck"

    def metrics(self, phase: str) -> Path:
        return self.root / "logs" / phase / "metrics.csv"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    @property
    def run_json(self) -> Path:
        return self.root / "run.json"

    def require(self, path: Path, what: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing {what}: {path}")
        return path

    def load_config(self) -> TrainConfig:
        if self.config.exists():
            return TrainConfig.load(self.config)
        return TrainConfig()

    def manifest(self) -> CorpusManifest:
        self.require(self.dataset / "manifest.json", "dataset (run datagen first)")
        return CorpusManifest.load(self.dataset)

    def record(self, phase: str, **entry) -> None:
        doc = json.loads(self.run_json.read_text()) if self.run_json.exists() else {}
        doc.setdefault("phases", {})[phase] = entry
        self.run_json.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    def record_header(self, config: TrainConfig) -> None:
        doc = json.loads(self.run_json.read_text()) if self.run_json.exists() else {}
        doc["config"] = config.to_dict()
        if (self.dataset / "manifest.json").exists():
            doc["corpus_sha256"] = _sha256(self.dataset / "manifest.json")
        self.run_json.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _final(report) -> dict:
    return dataclasses.asdict(report) if report is not None else {}


def datagen(config: TrainConfig, run: RunDir) -> CorpusManifest:
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(config.to_json(), encoding="utf-8")
    manifest = build_corpus(config, run.dataset)
    run.record_header(config)
    return manifest


def pretrain_encoder(config: TrainConfig, run: RunDir, splits=None) -> dict:
    splits = splits or training.Splits.load(run.manifest())
    model = ModelGraph.from_config(config)
    with MetricsWriter(run.metrics("encoder")) as mw:
        info = training.pretrain_encoder(config, model, splits, mw)
    digest = save_checkpoint(model, run.encoder, config.digest())
    run.record("encoder", checkpoint_sha256=digest, heldout_accuracy=info["accuracy"], steps=info["steps"])
    return info


def train_stage1(config: TrainConfig, run: RunDir, splits=None) -> str:
    run.require(run.encoder, "encoder checkpoint (run pretrain-encoder first)")
    splits = splits or training.Splits.load(run.manifest())
    model, _ = load_checkpoint(run.encoder)
    cond = config.condition()
    with MetricsWriter(run.metrics(f"stage1_{cond}")) as mw:
        last = training.train_stage1(config, model, splits, mw)
    digest = save_checkpoint(model, run.stage1(cond), config.digest())
    run.record(f"stage1_{cond}", checkpoint_sha256=digest, final=_final(last), groups=model.digests())
    return digest


def train_stage2(config: TrainConfig, run: RunDir, splits=None, from_scratch: bool = False) -> str:
    config.validate()
    budget = config.low_resource_budget
    splits = splits or training.Splits.load(run.manifest())
    if from_scratch:
        with MetricsWriter(run.metrics(f"scratch_b{budget}")) as mw:
            model = training.train_scratch(config, splits, mw)
        digest = save_checkpoint(model, run.scratch(budget), config.digest())
        run.record(f"scratch_b{budget}", checkpoint_sha256=digest)
        return digest
    cond = config.condition()
    run.require(run.stage1(cond), f"stage-1 checkpoint for {cond} (run train --stage 1 first)")
    model, _ = load_checkpoint(run.stage1(cond))
    with MetricsWriter(run.metrics(f"stage2_{cond}_b{budget}")) as mw:
        last = training.train_stage2(config, model, splits, mw)
    digest = save_checkpoint(model, run.stage2(cond, budget), config.digest())
    run.record(f"stage2_{cond}_b{budget}", checkpoint_sha256=digest, final=_final(last), groups=model.digests())
    return digest


def _stage2_paths(run: RunDir, cond: str) -> dict[int, Path]:
    out = {}
    for p in sorted(run.root.glob(f"checkpoints/stage2_{cond}_b*.ldck")):
        out[int(p.stem.rsplit("_b", 1)[1])] = p
    return out


def _scratch_ters(run: RunDir, splits) -> dict[int, float]:
    out = {}
    for p in sorted(run.root.glob("checkpoints/scratch_b*.ldck")):
        out[int(p.stem.rsplit("_b", 1)[1])] = evaluation.unseen_ter(load_checkpoint(p)[0], splits)
    return out


def evaluate(config: TrainConfig, run: RunDir, splits=None) -> dict:
    """Report for the condition selected by ``config`` (sat / projection flags)."""
    cond = config.condition()
    run.require(run.stage1(cond), f"stage-1 checkpoint for {cond}")
    splits = splits or training.Splits.load(run.manifest())
    model, _ = load_checkpoint(run.stage1(cond))
    s2 = {b: load_checkpoint(p)[0] for b, p in _stage2_paths(run, cond).items()}
    tags = {"sat": model.sat_enabled, "projection": model.projection_enabled, "budgets": sorted(s2)}
    report = evaluation.evaluate_model(model, splits, config, tags, s2)
    scratch = _scratch_ters(run, splits)
    if scratch:
        report["scratch_token_error_rate"] = {str(b): v for b, v in sorted(scratch.items())}
    evaluation.write_report(report, run.eval_dir / cond / "eval_report.json")
    return report


def ablation(config: TrainConfig, run: RunDir, splits=None) -> dict[str, dict]:
    ckpts = {c: run.stage1(c) for c in evaluation.CONDITIONS}
    missing = [c for c, p in ckpts.items() if not p.exists()]
    if missing:
        raise MissingArtifactError(f"missing stage-1 checkpoints for conditions: {missing}")
    splits = splits or training.Splits.load(run.manifest())
    stage2 = {c: _stage2_paths(run, c) for c in evaluation.CONDITIONS}
    return evaluation.run_ablation_grid(
        ckpts, splits, config, run.eval_dir, stage2, _scratch_ters(run, splits)
    )


def plot(config: TrainConfig, run: RunDir) -> list[Path]:
    reports = sorted(run.eval_dir.glob("*/eval_report.json"))
    if not reports:
        raise MissingArtifactError(f"no eval reports under {run.eval_dir} (run eval or ablation first)")
    paths = []
    for p in reports:
        report = json.loads(p.read_text())
        paths += evaluation.write_plots(report, run.eval_dir / "plots", p.parent.name, config.speakers_per_language)
    return paths


def run_all(config: TrainConfig, run: RunDir, budgets=DEFAULT_BUDGETS, conditions=evaluation.CONDITIONS) -> dict:
    """datagen -> encoder -> stage 1 (each condition) -> stage 2 (+ scratch) -> ablation."""
    datagen(config, run)
    splits = training.Splits.load(run.manifest())
    pretrain_encoder(config, run, splits)
    for cond in conditions:
        c = config.replace(sat_enabled=cond.startswith("sat-on"), projection_enabled=cond.endswith("proj-on"))
        train_stage1(c, run, splits)
        if c.projection_enabled:
            for b in budgets:
                train_stage2(c.replace(low_resource_budget=b), run, splits)
    for b in budgets:
        train_stage2(config.replace(low_resource_budget=b), run, splits, from_scratch=True)
    if set(conditions) == set(evaluation.CONDITIONS):
        return ablation(config, run, splits)
    return {c: evaluate(config.replace(sat_enabled=c.startswith("sat-on"), projection_enabled=c.endswith("proj-on")), run, splits) for c in conditions}
