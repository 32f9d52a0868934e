"""Three-stage training: connector pre-training, dense pre-finetuning, MoE instruction tuning."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .aux_loss import SECTIONS, AuxLossConfig, load_balance_loss, router_z_loss, total_loss
from .data import Dataset, lm_batch
from .model import CuMoModel, co_upcycle, decode_tokens, forward_lm
from .moe import ConfigError
from .rng import Rng

log = logging.getLogger(__name__)

STAGES = ("pretrain", "prefinetune", "visual_instruction_tuning")
REQUIRES = {"pretrain": None, "prefinetune": "pretrain", "visual_instruction_tuning": "prefinetune"}
METRIC_FIELDS = ("stage", "step", "lr", "l_ce", "l_b", "l_z", "total", "eval_loss", "eval_acc")


class PipelineError(RuntimeError):
    pass


@dataclass
class StageConfig:
    stage: str
    lr: float
    steps: int
    batch_size: int = 16
    trainable: frozenset = field(default_factory=lambda: frozenset(SECTIONS))
    moe_enabled: bool = False
    aux: AuxLossConfig = field(default_factory=AuxLossConfig)
    eval_interval: int = 0

    def __post_init__(self):
        self.trainable = frozenset(self.trainable)
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigError("steps >= 0, batch_size >= 1 and lr >= 0 required")
        if self.trainable - set(SECTIONS):
            raise ConfigError(f"unknown sections in trainable: {sorted(self.trainable - set(SECTIONS))}")
        if self.stage == "pretrain" and (self.trainable != {"connector"} or self.moe_enabled):
            raise ConfigError("pretrain trains the connector only, without MoE")
        if self.stage == "prefinetune" and (self.trainable != set(SECTIONS) or self.moe_enabled):
            raise ConfigError("prefinetune trains every section, without MoE")
        if self.stage == "visual_instruction_tuning" and (self.trainable != set(SECTIONS) or not self.moe_enabled):
            raise ConfigError("visual_instruction_tuning trains every section, with MoE")

    @classmethod
    def preset(cls, stage: str, **kw) -> "StageConfig":
        base = {
            "pretrain": dict(lr=1e-3, steps=100, trainable={"connector"}, moe_enabled=False),
            "prefinetune": dict(lr=2e-4, steps=600, moe_enabled=False),
            "visual_instruction_tuning": dict(lr=1e-4, steps=300, moe_enabled=True),
        }[stage]
        base.update(kw)
        return cls(stage=stage, **base)


@dataclass
class TextPretrainConfig:
    """Decoder-only language modelling on captions, before any multimodal stage."""

    steps: int = 0
    lr: float = 1e-3
    batch_size: int = 32
    aux: AuxLossConfig = field(default_factory=AuxLossConfig)


def cosine_lr(base: float, step: int, total: int) -> float:
    """Cosine decay from ``base`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class AdamW:
    """Adam with decoupled weight decay (matrices only)."""

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd and p.data.ndim >= 2:
                upd = upd + self.wd * p.data
            p.data = (p.data - lr * upd).astype(p.data.dtype, copy=False)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    sq = 0.0
    for p in params:
        sq += float(np.dot(p.grad.reshape(-1).astype(np.float64), p.grad.reshape(-1).astype(np.float64)))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


class BatchStream:
    """Epoch-shuffled minibatch indices drawn from a dedicated generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs = n, batch_size
        self.rng = Rng(seed)
        self.order: list[int] = []

    def _shuffle(self) -> list[int]:
        perm = list(range(self.n))
        for i in range(self.n - 1, 0, -1):
            j = self.rng.randint(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def next(self) -> np.ndarray:
        out = []
        while len(out) < self.bs:
            if not self.order:
                self.order = self._shuffle()
            take = min(self.bs - len(out), len(self.order))
            out += self.order[:take]
            self.order = self.order[take:]
        return np.asarray(out, dtype=np.int64)


def _stage_seed(seed: int, name: str) -> int:
    h = seed & 0xFFFFFFFFFFFFFFFF
    for ch in name.encode():
        h = (h * 0x100000001B3 ^ ch) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    tokens: int


def evaluate(model: CuMoModel, ds: Dataset, batch_size: int = 64, text_only: bool = False) -> EvalResult:
    """Teacher-forced caption loss and next-token accuracy over the caption positions."""
    nll = 0.0
    correct = 0
    count = 0
    with T.no_grad():
        for lo in range(0, len(ds), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(ds)))
            inputs, targets, mask = lm_batch(ds, idx)
            logits = decode_tokens(model, None, inputs) if text_only else forward_lm(model, ds.images[idx], inputs)
            z = logits.data.astype(np.float64)
            m = z.max(axis=-1, keepdims=True)
            lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
            picked = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
            nll += float(((lse - picked) * mask).sum())
            correct += int(((np.argmax(z, axis=-1) == targets) & mask).sum())
            count += int(mask.sum())
    return EvalResult(nll / count, correct / count, count)


def set_trainable(model: CuMoModel, sections) -> list:
    params = []
    for name, p in model.named_parameters():
        on = name.split(".", 1)[0] in sections
        if on != p.requires_grad:
            p.requires_grad = on
            p.grad = np.zeros_like(p.data) if on else None
        if on:
            params.append(p)
    return params


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


@dataclass
class StageResult:
    rows: list[dict]
    final_eval: EvalResult | None


def _train_loop(model, cfg_lr, steps, batch_size, aux, params, step_fn, seed, stage_name,
                eval_fn=None, eval_interval: int = 0, clip: float = 1.0) -> list[dict]:
    opt = AdamW(params)
    stream = BatchStream(step_fn.n, batch_size, _stage_seed(seed, stage_name))
    rows = []
    for step in range(steps):
        lr = cosine_lr(cfg_lr, step, steps)
        for p in params:
            p.grad = np.zeros_like(p.data)
        records: list = []
        l_ce = step_fn(stream.next(), records)
        l_b = load_balance_loss(records, aux)
        l_z = router_z_loss(records, aux)
        loss = total_loss(l_ce, l_b, l_z, aux)
        loss.backward()
        clip_grad_norm(params, clip)
        opt.step(lr)
        row = {"stage": stage_name, "step": step, "lr": lr, "l_ce": float(l_ce.data),
               "l_b": None if l_b is None else float(l_b.data),
               "l_z": None if l_z is None else float(l_z.data),
               "total": float(loss.data), "eval_loss": None, "eval_acc": None}
        last = step == steps - 1
        if eval_fn is not None and (last or (eval_interval and (step + 1) % eval_interval == 0)):
            ev = eval_fn()
            row["eval_loss"], row["eval_acc"] = ev.loss, ev.accuracy
            log.info("%s step %d  l_ce %.4f  eval loss %.4f acc %.4f", stage_name, step, row["l_ce"], ev.loss, ev.accuracy)
        rows.append(row)
    return rows


class _CaptionStep:
    def __init__(self, model, ds, text_only=False):
        self.model, self.ds, self.text_only = model, ds, text_only
        self.n = len(ds)

    def __call__(self, idx, records):
        inputs, targets, mask = lm_batch(self.ds, idx)
        if self.text_only:
            # captions keep the positions they occupy behind the visual prefix
            logits = decode_tokens(self.model, None, inputs, records, pos_offset=self.model.config.encoder.num_tokens)
        else:
            logits = forward_lm(self.model, self.ds.images[idx], inputs, records)
        v = logits.shape[-1]
        return T.cross_entropy(logits.reshape(-1, v), targets.reshape(-1), mask.reshape(-1))


def run_stage(model: CuMoModel, cfg: StageConfig, train: Dataset, evals: Dataset | None = None,
              seed: int = 0, enforce_order: bool = True) -> StageResult:
    """Run one stage in place on ``model``.

    Stage order is enforced through ``model.stages_done``. The instruction
    tuning stage co-upcycles every section that has an MoE spec before step 0.
    """
    need = REQUIRES[cfg.stage]
    if enforce_order and need is not None and need not in model.stages_done:
        raise PipelineError(f"{cfg.stage} requires a completed {need} stage; done: {model.stages_done}")
    if cfg.moe_enabled:
        replaced = co_upcycle(model, SECTIONS, _stage_seed(seed, "upcycle"))
        log.info("co-upcycled %d blocks: %s", len(replaced), ", ".join(replaced))
    params = set_trainable(model, cfg.trainable)
    eval_fn = (lambda: evaluate(model, evals)) if evals is not None else None
    rows = _train_loop(model, cfg.lr, cfg.steps, cfg.batch_size, cfg.aux, params,
                       _CaptionStep(model, train), seed, cfg.stage, eval_fn, cfg.eval_interval)
    set_trainable(model, SECTIONS)
    model.stages_done.append(cfg.stage)
    final = None
    if evals is not None:
        final = evaluate(model, evals) if not rows or rows[-1]["eval_acc"] is None else \
            EvalResult(rows[-1]["eval_loss"], rows[-1]["eval_acc"], 0)
    return StageResult(rows, final)


def pretrain_text(model: CuMoModel, cfg: TextPretrainConfig, train: Dataset, seed: int = 0) -> StageResult:
    """Language-model the decoder on captions alone (no visual prefix)."""
    params = set_trainable(model, {"decoder"})
    rows = _train_loop(model, cfg.lr, cfg.steps, cfg.batch_size, cfg.aux, params,
                       _CaptionStep(model, train, text_only=True), seed, "text_pretrain")
    set_trainable(model, SECTIONS)
    return StageResult(rows, None)


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (r[k] if k in ("stage", "step") else _fmt(r[k])) for k in METRIC_FIELDS})
    return buf.getvalue()
