"""End-to-end protocol: pretrain -> finetune -> refine, plus the framework ablation grid."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from cp3.checkpoint import save_checkpoint
from cp3.config import RunConfig
from cp3.generation import GenParams
from cp3.metrics import MetricReport
from cp3.scr import ScrNet
from cp3.synthdata import Dataset
from cp3.training import PretrainVariant, evaluate, finetune_generation, pretrain_generation, train_refinement

# Budgets that finish the whole acceptance suite in minutes on one core.
DESK = dict(
    num_coarse=128,
    learning_rate=1e-3,
    refine_learning_rate=1e-2,
    pretrain_epochs=30,
    finetune_epochs=30,
    refine_epochs=15,
    channels=16,
    k_list=(8, 16),
    multipliers=(1, 1, 2),
    sgm_units=(True, True, True),
)


def desk_config(**overrides) -> RunConfig:
    return RunConfig(**{**DESK, **overrides})


@dataclass
class PipelineResult:
    generator: GenParams
    refiner: Optional[ScrNet]
    traces: Dict[str, List[float]] = field(default_factory=dict)

    def evaluate(self, dataset: Dataset, split: str = "val", label_mode: str = "correct", seed: int = 0) -> MetricReport:
        return evaluate(self.generator, self.refiner, dataset.split(split), label_mode, seed, dataset.category_names)


def _scr_config_for(cfg: RunConfig, dataset: Dataset) -> RunConfig:
    if cfg.num_categories:
        return cfg
    return dataclasses.replace(cfg, num_categories=dataset.num_categories)


def train_generator(cfg: RunConfig, dataset: Dataset, pretrain: bool = True) -> PipelineResult:
    """Finetune a generator, optionally after IOI pretraining from the same initialisation."""
    train = dataset.split("train")
    gen = cfg.init_generator()
    traces = {}
    if pretrain:
        pre = pretrain_generation(cfg.train_config("pretrain"), PretrainVariant(cfg.variant), train, gen)
        gen, traces["pretrain"] = pre.params, pre.losses
    ft = finetune_generation(cfg.train_config("finetune"), train, gen)
    traces["finetune"] = ft.losses
    return PipelineResult(ft.params, None, traces)


def add_refiner(cfg: RunConfig, dataset: Dataset, base: PipelineResult) -> PipelineResult:
    cfg = _scr_config_for(cfg, dataset)
    res = train_refinement(cfg.train_config("refine"), dataset.split("train"), base.generator, cfg.init_scr())
    return PipelineResult(base.generator, res.params, {**base.traces, "refine": res.losses})


def run_pipeline(cfg: RunConfig, dataset: Dataset, pretrain: bool = True, refine: bool = True) -> PipelineResult:
    result = train_generator(cfg, dataset, pretrain)
    return add_refiner(cfg, dataset, result) if refine else result


FRAMEWORK_ROWS = ("baseline", "pretrain_only", "refine_only", "pretrain_refine")


def framework_ablation(cfg: RunConfig, dataset: Dataset) -> Dict[str, PipelineResult]:
    """The four framework rows: with/without pretraining x with/without refinement.

    Rows sharing a generator reuse it, so the grid costs two generator runs and
    two refinement runs.
    """
    scratch = train_generator(cfg, dataset, pretrain=False)
    pretrained = train_generator(cfg, dataset, pretrain=True)
    return {
        "baseline": scratch,
        "pretrain_only": pretrained,
        "refine_only": add_refiner(cfg, dataset, scratch),
        "pretrain_refine": add_refiner(cfg, dataset, pretrained),
    }


def write_run(result: PipelineResult, dataset: Dataset, out_dir, cfg: RunConfig) -> Dict[str, Path]:
    """Checkpoints plus the validation report (text and CSV) for one pipeline run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"generator": save_checkpoint(result.generator, out / "generator.ckpt", {"traces": result.traces})}
    if result.refiner is not None:
        paths["refiner"] = save_checkpoint(result.refiner, out / "refiner.ckpt", {"traces": result.traces})
    report = result.evaluate(dataset, seed=cfg.seed)
    paths["report_txt"] = out / "report.txt"
    paths["report_csv"] = out / "report.csv"
    paths["report_txt"].write_text(report.to_text(), encoding="utf-8")
    paths["report_csv"].write_text(report.to_csv(), encoding="utf-8")
    return paths
