"""Building MoE blocks from dense MLPs, and parameter accounting."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .moe import ConfigError, DenseMlp, MoeBlock, mlp_param_count
from .rng import Rng
from .tensor import Tensor

INIT_MODES = ("upcycle", "scratch")


@dataclass
class UpcycleSpec:
    num_experts: int = 4
    top_k: int = 2
    init_mode: str = "upcycle"
    router_init_scale: float = 0.02

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"top_k {self.top_k} outside [1, {self.num_experts}]")
        if self.router_init_scale < 0:
            raise ConfigError("router_init_scale must be >= 0")


def _router(c_in: int, s: int, rng: Rng, scale: float, truncated: bool = False) -> tuple[Tensor, Tensor]:
    draw = rng.truncated_normal if truncated else rng.normal
    w = Tensor(draw((c_in, s), scale).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(s, dtype=np.float32), requires_grad=True)
    return w, b


def upcycle_mlp(source: DenseMlp, spec: UpcycleSpec, seed: int, name: str = "") -> MoeBlock:
    """MoE block whose experts are all copies of ``source``; the router is fresh."""
    if spec.init_mode != "upcycle":
        raise ConfigError(f"upcycle_mlp needs init_mode 'upcycle', got {spec.init_mode!r}")
    rng = Rng(seed)
    rw, rb = _router(source.c_in, spec.num_experts, rng, spec.router_init_scale)
    if source.w1.dtype != np.float32:
        rw = Tensor(rw.data.astype(source.w1.dtype), requires_grad=True)
        rb = Tensor(rb.data.astype(source.w1.dtype), requires_grad=True)
    experts = [source.copy() for _ in range(spec.num_experts)]
    return MoeBlock(rw, rb, experts, spec.top_k, name=name)


def scratch_moe(dims: tuple[int, int, int], spec: UpcycleSpec, seed: int, name: str = "",
                std: float = 0.02) -> MoeBlock:
    """Freshly initialised MoE block (truncated normal), the ablation arm to upcycling."""
    if spec.init_mode != "scratch":
        raise ConfigError(f"scratch_moe needs init_mode 'scratch', got {spec.init_mode!r}")
    rng = Rng(seed)
    c_in, hidden, c_out = dims
    rw, rb = _router(c_in, spec.num_experts, rng, std, truncated=True)
    experts = [DenseMlp.init(c_in, hidden, c_out, rng, std) for _ in range(spec.num_experts)]
    return MoeBlock(rw, rb, experts, spec.top_k, name=name)


def build_moe(source: DenseMlp, spec: UpcycleSpec, seed: int, name: str = "") -> MoeBlock:
    if spec.init_mode == "upcycle":
        return upcycle_mlp(source, spec, seed, name)
    return scratch_moe(source.dims, spec, seed, name)


# parameter accounting -------------------------------------------------------

@dataclass
class SectionDims:
    """One model section: ``mlp_blocks`` identical MLPs plus ``other_params`` fixed weights."""

    name: str
    mlp_blocks: int
    c_in: int
    hidden: int
    c_out: int
    other_params: int = 0
    num_experts: int = 1
    top_k: int = 1
    moe: bool = False

    def __post_init__(self):
        if self.moe and not 1 <= self.top_k <= self.num_experts:
            raise ConfigError(f"{self.name}: top_k {self.top_k} outside [1, {self.num_experts}]")
        if min(self.mlp_blocks, self.c_in, self.hidden, self.c_out) < 0 or self.other_params < 0:
            raise ConfigError(f"{self.name}: negative dimension")


@dataclass
class SectionCount:
    total: int
    activated: int


@dataclass
class ParamReport:
    sections: dict[str, SectionCount] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(s.total for s in self.sections.values())

    @property
    def activated(self) -> int:
        return sum(s.activated for s in self.sections.values())

    def to_dict(self) -> dict:
        out = {name: asdict(c) for name, c in self.sections.items()}
        out["all"] = {"total": self.total, "activated": self.activated}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        rows = [(n, c.total, c.activated) for n, c in self.sections.items()]
        rows.append(("all", self.total, self.activated))
        w = max(len(r[0]) for r in rows + [("section",)])
        lines = [f"{'section':<{w}}  {'total':>15}  {'activated':>15}  {'total(B)':>9}  {'act.(B)':>9}"]
        for name, tot, act in rows:
            lines.append(f"{name:<{w}}  {tot:>15,d}  {act:>15,d}  {tot / 1e9:>9.3f}  {act / 1e9:>9.3f}")
        return "\n".join(lines)


def count_params(sections: list[SectionDims]) -> ParamReport:
    """Closed-form totals; MoE sections count K of S experts as activated (router always)."""
    report = ParamReport()
    for sec in sections:
        one = mlp_param_count(sec.c_in, sec.hidden, sec.c_out)
        if sec.moe and sec.num_experts > 1:
            # a single expert needs no gate, so S=1 collapses to the dense count
            router = sec.c_in * sec.num_experts + sec.num_experts
            total = sec.mlp_blocks * (sec.num_experts * one + router)
            act = sec.mlp_blocks * (sec.top_k * one + router)
        else:
            total = act = sec.mlp_blocks * one
        report.sections[sec.name] = SectionCount(total + sec.other_params, act + sec.other_params)
    return report


def sections_from_dict(doc: dict) -> list[SectionDims]:
    allowed = {"sections"}
    extra = set(doc) - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)}")
    out = []
    known = set(SectionDims.__dataclass_fields__)
    for raw in doc["sections"]:
        bad = set(raw) - known
        if bad:
            raise ConfigError(f"unknown section keys {sorted(bad)}")
        out.append(SectionDims(**raw))
    return out


# Table-scale presets: CLIP ViT-L/14 encoder, two-layer connector on 2x1024
# multi-resolution features, 7B dense decoder.
VITL_ENCODER = dict(name="encoder", mlp_blocks=24, c_in=1024, hidden=4096, c_out=1024, other_params=103_000_000)
VITL_CONNECTOR = dict(name="connector", mlp_blocks=1, c_in=2048, hidden=4096, c_out=4096)
MISTRAL_DECODER = dict(name="decoder", mlp_blocks=0, c_in=0, hidden=0, c_out=0, other_params=7_250_000_000)


def vitl_sections(encoder_moe: bool = True, connector_moe: bool = True, s: int = 4, k: int = 2) -> list[SectionDims]:
    moe = dict(num_experts=s, top_k=k)
    return [
        SectionDims(**VITL_ENCODER, **(moe if encoder_moe else {}), moe=encoder_moe),
        SectionDims(**VITL_CONNECTOR, **(moe if connector_moe else {}), moe=connector_moe),
        SectionDims(**MISTRAL_DECODER),
    ]
