"""End-to-end run: data, optional text pre-training, the three stages, checkpoints."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import Dataset, gen_dataset
from .model import CuMoModel, build_model
from .train import EvalResult, evaluate, metrics_csv, pretrain_text, run_stage

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    model: CuMoModel
    rows: list[dict] = field(default_factory=list)
    stage_evals: dict[str, EvalResult] = field(default_factory=dict)

    @property
    def final_eval(self) -> EvalResult | None:
        return list(self.stage_evals.values())[-1] if self.stage_evals else None


def datasets_for(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return gen_dataset(cfg.data_seed, cfg.data.n_train, cfg.data.n_eval, cfg.model.encoder.image_size)


def init_model(cfg: RunConfig, train: Dataset) -> tuple[CuMoModel, list[dict]]:
    model = build_model(cfg.model, cfg.seed)
    rows = []
    if cfg.text_pretrain is not None and cfg.text_pretrain.steps > 0:
        rows = pretrain_text(model, cfg.text_pretrain, train, cfg.seed).rows
    return model, rows


def run_stages(model: CuMoModel, cfg: RunConfig, stages, train: Dataset, evals: Dataset,
               out_dir: Path | None = None, result: PipelineResult | None = None) -> PipelineResult:
    result = result or PipelineResult(model)
    for st in stages:
        res = run_stage(model, st, train, evals, seed=cfg.seed)
        result.rows += res.rows
        result.stage_evals[st.stage] = res.final_eval or evaluate(model, evals)
        log.info("stage %s done: eval loss %.4f acc %.4f", st.stage,
                 result.stage_evals[st.stage].loss, result.stage_evals[st.stage].accuracy)
        if out_dir is not None:
            save_checkpoint(model, out_dir / f"{st.stage}.ckpt", {"stage": st.stage, "step": st.steps, "seed": cfg.seed})
    result.model = model
    return result


def run_pipeline(cfg: RunConfig, out_dir=None, data: tuple[Dataset, Dataset] | None = None,
                 start: tuple[CuMoModel, list[dict], int] | None = None) -> PipelineResult:
    """Run every configured stage; write ``metrics.csv`` and per-stage checkpoints to ``out_dir``.

    ``start`` resumes from ``(model, rows, n_stages_done)``; the model is copied, not mutated.
    """
    train, evals = data if data is not None else datasets_for(cfg)
    if start is None:
        model, rows = init_model(cfg, train)
        done = 0
    else:
        model, rows, done = copy.deepcopy(start[0]), list(start[1]), start[2]
        # a shared prefix may come from an arm with other upcycling specs
        model.config = copy.deepcopy(cfg.model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = run_stages(model, cfg, cfg.stages[done:], train, evals, out, PipelineResult(model, rows))
    if out is not None:
        (out / "metrics.csv").write_text(metrics_csv(result.rows))
    return result
