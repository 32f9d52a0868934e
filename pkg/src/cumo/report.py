"""Expert-routing reports and multi-arm ablations."""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import shutil
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .aux_loss import AuxLossConfig
from .config import RunConfig, to_jsonable
from .data import Dataset, lm_batch
from .model import CuMoModel, ModelConfig, forward_lm
from .moe import RouterStats
from .pipeline import datasets_for, init_model, run_pipeline
from .train import TextPretrainConfig
from .upcycle import UpcycleSpec

log = logging.getLogger(__name__)


class NoMoeError(RuntimeError):
    pass


class UnknownArmError(ValueError):
    pass


# routing statistics -----------------------------------------------------------

@dataclass
class RouteReport:
    blocks: dict[str, RouterStats]

    @property
    def balance_score(self) -> float:
        """Mean over blocks of the per-block max/min dispatch ratio."""
        return float(np.mean([s.balance_score for s in self.blocks.values()]))

    def block_csv(self, name: str) -> str:
        s = self.blocks[name]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["expert", "dispatch_fraction", "mean_prob"])
        for e in range(s.num_experts):
            w.writerow([e, repr(float(s.dispatch_fraction[e])), repr(float(s.mean_prob[e]))])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["block", "tokens", "k", "balance_score"])
        for name, s in self.blocks.items():
            w.writerow([name, s.token_count, s.k, repr(s.balance_score)])
        w.writerow(["aggregate", "", "", repr(self.balance_score)])
        return buf.getvalue()

    def bar_chart(self, width: int = 40) -> str:
        lines = []
        for name, s in self.blocks.items():
            lines.append(f"{name}  (balance {s.balance_score:.3f})")
            share = s.dispatch_fraction / s.k
            for e, v in enumerate(share):
                lines.append(f"  e{e:<2d} {'#' * int(round(v * width)):<{width}s} {v:6.3f}")
        lines.append(f"aggregate balance score {self.balance_score:.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in self.blocks:
            p = out / f"route_{name}.csv"
            p.write_text(self.block_csv(name))
            paths.append(p)
        p = out / "route_summary.csv"
        p.write_text(self.summary_csv())
        return paths + [p]


def route_stats_report(model: CuMoModel, probe: Dataset, batch_size: int = 64) -> RouteReport:
    """Accumulate dispatch fractions and mean gate probabilities per MoE block over ``probe``.

    Decoder blocks see every caption position, padding included.
    """
    blocks = model.moe_blocks()
    if not blocks:
        raise NoMoeError("no MoE blocks in model")
    stats = {b.name: RouterStats.empty(b.num_experts, b.k) for b in blocks}
    with T.no_grad():
        for lo in range(0, len(probe), batch_size):
            idx = np.arange(lo, min(lo + batch_size, len(probe)))
            inputs, _, _ = lm_batch(probe, idx)
            records: list = []
            forward_lm(model, probe.images[idx], inputs, records)
            for rec in records:
                r = rec.routing
                stats[rec.name].update(RouterStats.from_routing(r.topk_idx, r.probs.data))
    return RouteReport(stats)


# ablation arms ----------------------------------------------------------------

ARMS = ("dense-baseline", "moe-scratch", "moe-upcycle", "moe-upcycle+bzloss", "top2in8", "scales-1",
        "scales-1+3", "decoder-upcycle", "decoder-pretrained-moe", "no-prefinetune")
DECODER_TEXT_PRETRAIN = TextPretrainConfig(steps=200, lr=1e-4, batch_size=32)


def _spec(base: RunConfig, **kw) -> UpcycleSpec:
    src = base.model.encoder.moe or base.model.connector.moe or UpcycleSpec()
    return dataclasses.replace(src, **kw)


def arm_config(base: RunConfig, arm: str) -> RunConfig:
    """Map an arm name onto a copy of ``base``. MoE arms co-upcycle encoder and connector."""
    if arm not in ARMS:
        raise UnknownArmError(f"unknown arm {arm!r}; choose from {', '.join(ARMS)}")
    cfg = copy.deepcopy(base)
    m = cfg.model
    last = cfg.stages[-1]
    bz = last.aux if last.aux.enabled else AuxLossConfig()
    spec = _spec(base, init_mode="upcycle")
    m.encoder.moe = m.connector.moe = spec
    m.decoder.moe, m.decoder.native_moe = None, False
    last.aux = bz
    if arm == "dense-baseline":
        m.encoder.moe = m.connector.moe = None
    elif arm == "moe-scratch":
        m.encoder.moe = m.connector.moe = _spec(base, init_mode="scratch")
        last.aux = AuxLossConfig.disabled()
    elif arm == "moe-upcycle":
        last.aux = AuxLossConfig.disabled()
    elif arm == "top2in8":
        m.encoder.moe = m.connector.moe = _spec(base, init_mode="upcycle", num_experts=8, top_k=2)
    elif arm in ("scales-1", "scales-1+3"):
        m.encoder.scales = [1] if arm == "scales-1" else [1, 3]
        m.connector.in_dim = None
    elif arm == "decoder-upcycle":
        m.decoder.moe = spec
        cfg.text_pretrain = cfg.text_pretrain or copy.deepcopy(DECODER_TEXT_PRETRAIN)
    elif arm == "decoder-pretrained-moe":
        m.decoder.moe = _spec(base, init_mode="scratch")
        m.decoder.native_moe = True
        cfg.text_pretrain = cfg.text_pretrain or copy.deepcopy(DECODER_TEXT_PRETRAIN)
    elif arm == "no-prefinetune":
        if len(cfg.stages) > 1:
            cfg.stages[1].steps = 0
    # rebuild so every config re-validates after the edits above
    r = dataclasses.replace
    cfg.model = ModelConfig(r(m.encoder), r(m.connector), r(m.decoder))
    return r(cfg)


def run_key(cfg: RunConfig) -> str:
    doc = to_jsonable(cfg)
    doc.pop("output_dir", None)
    return json.dumps(doc, sort_keys=True)


def prefix_key(cfg: RunConfig) -> str:
    """Identity of everything that happens before the last stage.

    MoE specs only matter before the last stage for a natively MoE decoder,
    so arms differing only in how they upcycle share this key.
    """
    doc = to_jsonable(cfg)
    doc["stages"] = doc["stages"][:-1]
    for sec in ("encoder", "connector", "decoder"):
        if not (sec == "decoder" and doc["model"][sec].get("native_moe")):
            doc["model"][sec]["moe"] = None
    doc.pop("output_dir", None)
    return json.dumps(doc, sort_keys=True)


@dataclass
class ArmResult:
    arm: str
    seed: int
    eval_loss: float
    eval_acc: float
    balance: float | None
    rows: list[dict] = field(default_factory=list, repr=False)
    # wall time of this arm's training, including a prefix it trained first; not part of any output file
    seconds: float = field(default=0.0, compare=False)


@dataclass
class AblationReport:
    arms: list[str]
    results: list[ArmResult]

    def by_arm(self, arm: str) -> list[ArmResult]:
        return [r for r in self.results if r.arm == arm]

    def paired(self, arm: str, metric: str) -> dict[int, float]:
        return {r.seed: getattr(r, metric) for r in self.by_arm(arm)}

    def table(self) -> str:
        def cell(vals):
            vals = [v for v in vals if v is not None]
            if not vals:
                return "-"
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            return f"{statistics.fmean(vals):.4f} ± {sd:.4f}"

        head = ["arm", "seeds", "eval_acc", "eval_loss", "balance"]
        body = [[a, str(len(self.by_arm(a))),
                 cell([r.eval_acc for r in self.by_arm(a)]),
                 cell([r.eval_loss for r in self.by_arm(a)]),
                 cell([r.balance for r in self.by_arm(a)])] for a in self.arms]
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join([fmt.format(*head), fmt.format(*("-" * w for w in widths))] + [fmt.format(*r) for r in body])

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "seed", "eval_loss", "eval_acc", "balance"])
        for r in self.results:
            w.writerow([r.arm, r.seed, repr(r.eval_loss), repr(r.eval_acc), "" if r.balance is None else repr(r.balance)])
        return buf.getvalue()


def ablate(base: RunConfig, arms, seeds=None, out_dir=None) -> AblationReport:
    """Train every arm for every seed and report final held-out metrics.

    Arms that agree on everything before the last stage reuse one trained
    prefix (deep-copied), which gives the same numbers as separate runs.
    Arms whose whole config coincides (e.g. ``scales-1`` under default
    scales) reuse the finished run.
    """
    arms = list(arms)
    for a in arms:
        if a not in ARMS:
            raise UnknownArmError(f"unknown arm {a!r}; choose from {', '.join(ARMS)}")
    seeds = [base.seed] if seeds is None else list(seeds)
    results = []
    for seed in seeds:
        seeded = dataclasses.replace(copy.deepcopy(base), seed=seed)
        data = datasets_for(seeded)
        prefixes: dict[str, tuple] = {}
        finished: dict[str, ArmResult] = {}
        for arm in arms:
            cfg = arm_config(seeded, arm)
            arm_dir = None if out_dir is None else Path(out_dir) / f"{arm}_seed{seed}"
            done = finished.get(run_key(cfg))
            if done is not None:
                results.append(dataclasses.replace(done, arm=arm, seconds=0.0))
                if arm_dir is not None:
                    shutil.copytree(Path(out_dir) / f"{done.arm}_seed{seed}", arm_dir, dirs_exist_ok=True)
                log.info("arm %s seed %d: same config as arm %s", arm, seed, done.arm)
                continue
            key = prefix_key(cfg)
            t0 = time.perf_counter()
            if key not in prefixes:
                model, rows = init_model(cfg, data[0])
                pre = run_pipeline(dataclasses.replace(cfg, stages=cfg.stages[:-1]), data=data,
                                   start=(model, rows, 0))
                prefixes[key] = (pre.model, pre.rows, len(cfg.stages) - 1)
            res = run_pipeline(cfg, arm_dir, data=data, start=prefixes[key])
            ev = res.final_eval
            balance = route_stats_report(res.model, data[1]).balance_score if res.model.moe_blocks() else None
            log.info("arm %s seed %d: acc %.4f loss %.4f balance %s", arm, seed, ev.accuracy, ev.loss, balance)
            results.append(ArmResult(arm, seed, ev.loss, ev.accuracy, balance, res.rows, time.perf_counter() - t0))
            finished[run_key(cfg)] = results[-1]
    report = AblationReport(arms, results)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.csv").write_text(report.csv())
        (Path(out_dir) / "ablation.txt").write_text(report.table() + "\n")
    return report
