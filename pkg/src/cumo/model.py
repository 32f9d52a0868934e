"""Toy multimodal model: ViT-style encoder, MLP connector, causal decoder.

Any encoder/connector/decoder MLP can be a :class:`DenseMlp` or a
:class:`MoeBlock`; the residual path around it is the same either way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import BOS, EOS
from .moe import ConfigError, DenseMlp, MoeBlock, dense_forward, moe_forward
from .rng import Rng
from .tensor import DimensionError, Tensor
from .upcycle import ParamReport, SectionCount, UpcycleSpec, build_moe, scratch_moe

INIT_STD = 0.02


class LengthError(ValueError):
    pass


@dataclass
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    depth: int = 4
    width: int = 64
    mlp_hidden: int = 256
    heads: int = 4
    scales: list[int] = field(default_factory=lambda: [1])
    moe: UpcycleSpec | None = None
    channels: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.scales or any(s < 1 for s in self.scales):
            raise ConfigError(f"scales must be positive integers, got {self.scales}")
        if any((s * self.image_size) % self.patch_size for s in self.scales):
            raise ConfigError("every scaled image size must be divisible by patch_size")
        if self.width % self.heads:
            raise ConfigError("encoder width must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def feature_dim(self) -> int:
        return self.width * len(self.scales)


@dataclass
class ConnectorConfig:
    hidden: int = 128
    moe: UpcycleSpec | None = None
    in_dim: int | None = None
    out_dim: int | None = None


@dataclass
class DecoderConfig:
    vocab: int = 512
    depth: int = 4
    width: int = 128
    heads: int = 4
    mlp_hidden: int = 256
    max_seq: int = 64
    moe: UpcycleSpec | None = None
    # build decoder MLPs as MoE blocks from the start instead of upcycling later
    native_moe: bool = False

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError("decoder width must be divisible by heads")
        if self.native_moe and self.moe is None:
            raise ConfigError("native_moe needs a decoder moe spec")


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)

    def __post_init__(self):
        c = self.connector
        if c.in_dim is not None and c.in_dim != self.encoder.feature_dim:
            raise ConfigError(f"connector in_dim {c.in_dim} != encoder width x scales {self.encoder.feature_dim}")
        if c.out_dim is not None and c.out_dim != self.decoder.width:
            raise ConfigError(f"connector out_dim {c.out_dim} != decoder width {self.decoder.width}")
        from .data import MAX_CAPTION
        if self.decoder.max_seq < self.encoder.num_tokens + MAX_CAPTION:
            raise ConfigError("decoder max_seq shorter than visual tokens plus caption")


# modules --------------------------------------------------------------------

def _w(rng: Rng, *shape) -> Tensor:
    return Tensor(rng.truncated_normal(shape, INIT_STD).astype(np.float32), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(*shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


@dataclass
class Attention:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    tensor_fields = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")

    @classmethod
    def init(cls, width: int, heads: int, rng: Rng) -> "Attention":
        return cls(_w(rng, width, width), _zeros(width), _w(rng, width, width), _zeros(width),
                   _w(rng, width, width), _zeros(width), _w(rng, width, width), _zeros(width), heads)


def attention(att: Attention, x: Tensor, mask: np.ndarray | None) -> Tensor:
    b, t, c = x.shape
    h, d = att.heads, c // att.heads

    def split(w, bias):
        return T.linear(x, w, bias).reshape(b, t, h, d).transpose(0, 2, 1, 3)

    q, k, v = split(att.wq, att.bq), split(att.wk, att.bk), split(att.wv, att.bv)
    scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    probs = T.softmax(scores, mask)
    y = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, c)
    return T.linear(y, att.wo, att.bo)


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: Attention
    ln2_g: Tensor
    ln2_b: Tensor
    mlp: DenseMlp | MoeBlock

    tensor_fields = ("ln1_g", "ln1_b", "attn", "ln2_g", "ln2_b", "mlp")

    @classmethod
    def init(cls, width: int, hidden: int, heads: int, rng: Rng) -> "Block":
        attn = Attention.init(width, heads, rng)
        mlp = DenseMlp.init(width, hidden, width, rng, INIT_STD)
        return cls(_ones(width), _zeros(width), attn, _ones(width), _zeros(width), mlp)


def mlp_forward(mlp: DenseMlp | MoeBlock, x: Tensor, records: list | None) -> Tensor:
    if isinstance(mlp, MoeBlock):
        return moe_forward(mlp, x, records=records)
    return dense_forward(mlp, x)


def block_forward(blk: Block, x: Tensor, mask, records) -> Tensor:
    x = x + attention(blk.attn, T.layernorm(x, blk.ln1_g, blk.ln1_b), mask)
    return x + mlp_forward(blk.mlp, T.layernorm(x, blk.ln2_g, blk.ln2_b), records)


@dataclass
class Encoder:
    patch_w: Tensor
    patch_b: Tensor
    pos: Tensor
    blocks: list[Block]
    ln_g: Tensor
    ln_b: Tensor

    tensor_fields = ("patch_w", "patch_b", "pos", "blocks", "ln_g", "ln_b")


@dataclass
class Decoder:
    embed: Tensor
    pos: Tensor
    blocks: list[Block]
    ln_g: Tensor
    ln_b: Tensor

    tensor_fields = ("embed", "pos", "blocks", "ln_g", "ln_b")


@dataclass
class CuMoModel:
    config: ModelConfig
    encoder: Encoder
    connector: DenseMlp | MoeBlock
    decoder: Decoder
    stages_done: list[str] = field(default_factory=list)

    tensor_fields = ("encoder", "connector", "decoder")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return T.named_tensors(self)

    def parameters(self) -> list[Tensor]:
        return T.parameters_of(self)

    def moe_blocks(self) -> list[MoeBlock]:
        mlps = [b.mlp for b in self.encoder.blocks] + [self.connector] + [b.mlp for b in self.decoder.blocks]
        return [m for m in mlps if isinstance(m, MoeBlock)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def build_model(cfg: ModelConfig, seed: int) -> CuMoModel:
    rng = Rng(seed)
    e, c, d = cfg.encoder, cfg.connector, cfg.decoder
    patch_dim = e.patch_size * e.patch_size * e.channels
    encoder = Encoder(
        _w(rng, patch_dim, e.width), _zeros(e.width), _w(rng, e.num_tokens, e.width),
        [Block.init(e.width, e.mlp_hidden, e.heads, rng) for _ in range(e.depth)],
        _ones(e.width), _zeros(e.width),
    )
    connector = DenseMlp.init(e.feature_dim, c.hidden, d.width, rng, INIT_STD)
    decoder = Decoder(
        _w(rng, d.vocab, d.width), _w(rng, d.max_seq, d.width),
        [Block.init(d.width, d.mlp_hidden, d.heads, rng) for _ in range(d.depth)],
        _ones(d.width), _zeros(d.width),
    )
    model = CuMoModel(cfg, encoder, connector, decoder)
    if d.native_moe:
        spec = UpcycleSpec(d.moe.num_experts, d.moe.top_k, "scratch", d.moe.router_init_scale)
        for i, blk in enumerate(decoder.blocks):
            blk.mlp = scratch_moe(blk.mlp.dims, spec, rng.next_u64(), name=f"decoder.{i}")
    return model


def co_upcycle(model: CuMoModel, sections, seed: int) -> list[str]:
    """Swap dense MLPs for MoE blocks in place, per each section's moe spec.

    Returns the names of the blocks that were replaced. Sections without a
    spec, and MLPs that already are MoE blocks, are left alone.
    """
    rng = Rng(seed)
    cfg = model.config
    done = []
    if "encoder" in sections and cfg.encoder.moe is not None:
        for i, blk in enumerate(model.encoder.blocks):
            s = rng.next_u64()
            if isinstance(blk.mlp, DenseMlp):
                blk.mlp = build_moe(blk.mlp, cfg.encoder.moe, s, name=f"encoder.{i}")
                done.append(blk.mlp.name)
    if "connector" in sections and cfg.connector.moe is not None:
        s = rng.next_u64()
        if isinstance(model.connector, DenseMlp):
            model.connector = build_moe(model.connector, cfg.connector.moe, s, name="connector")
            done.append("connector")
    if "decoder" in sections and cfg.decoder.moe is not None:
        for i, blk in enumerate(model.decoder.blocks):
            s = rng.next_u64()
            if isinstance(blk.mlp, DenseMlp):
                blk.mlp = build_moe(blk.mlp, cfg.decoder.moe, s, name=f"decoder.{i}")
                done.append(blk.mlp.name)
    return done


# forward --------------------------------------------------------------------

def _images(images) -> np.ndarray:
    arr = np.asarray(images.data if isinstance(images, Tensor) else images, dtype=np.float32)
    return arr[None] if arr.ndim == 3 else arr


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    b, h, w, ch = images.shape
    g = h // patch
    p = images.reshape(b, g, patch, g, patch, ch).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(b, g * g, patch * patch * ch)


def _upsampled_positions(grid: int, factor: int) -> np.ndarray:
    """Index of the base-grid position each token of the ``factor``-times grid inherits."""
    side = grid * factor
    r, c = np.divmod(np.arange(side * side), side)
    return (r // factor) * grid + (c // factor)


def encode(model: CuMoModel, images, records: list | None = None) -> Tensor:
    """Visual features ``[B, T, width * len(scales)]`` with T fixed by the base grid.

    Each scale resizes the image by nearest neighbour, runs the shared encoder
    (positional embeddings upsampled the same way) and average-pools the token
    grid back to the base grid; scales are concatenated channel-wise.
    """
    cfg = model.config.encoder
    imgs = _images(images)
    if imgs.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise DimensionError(f"image shape {imgs.shape[1:]} != {(cfg.image_size, cfg.image_size, cfg.channels)}")
    enc = model.encoder
    feats = []
    for s in cfg.scales:
        big = imgs if s == 1 else np.repeat(np.repeat(imgs, s, axis=1), s, axis=2)
        x = Tensor(patchify(big, cfg.patch_size))
        pos = enc.pos if s == 1 else T.take(enc.pos, _upsampled_positions(cfg.grid, s))
        h = T.linear(x, enc.patch_w, enc.patch_b) + pos
        for blk in enc.blocks:
            h = block_forward(blk, h, None, records)
        h = T.layernorm(h, enc.ln_g, enc.ln_b)
        if s > 1:
            h = T.pool_grid(h, cfg.grid, s)
        feats.append(h)
    return feats[0] if len(feats) == 1 else T.concat(feats, axis=-1)


def connect(model: CuMoModel, visual: Tensor, records: list | None = None) -> Tensor:
    width = model.connector.c_in
    if visual.shape[-1] != width:
        raise DimensionError(f"visual width {visual.shape[-1]} != connector input {width}")
    return mlp_forward(model.connector, visual, records)


def decode_tokens(model: CuMoModel, prefix: Tensor | None, tokens: np.ndarray, records: list | None = None,
                  pos_offset: int = 0) -> Tensor:
    """Causal decoder over ``[prefix ; embed(tokens)]``; logits for the token positions.

    ``pos_offset`` shifts position embeddings, so text-only input can sit where
    captions sit behind a visual prefix.
    """
    dec = model.decoder
    tokens = np.asarray(tokens, dtype=np.int64)
    b, length = tokens.shape
    n_pre = 0 if prefix is None else prefix.shape[1]
    total = n_pre + length
    if pos_offset + total > model.config.decoder.max_seq:
        raise LengthError(f"sequence of {total} exceeds max_seq {model.config.decoder.max_seq}")
    h = T.take(dec.embed, tokens)
    if prefix is not None:
        h = T.concat([prefix, h], axis=1)
    h = h + T.narrow(dec.pos, 0, pos_offset, total)
    mask = np.tril(np.ones((total, total), dtype=bool))
    for blk in dec.blocks:
        h = block_forward(blk, h, mask, records)
    h = T.layernorm(h, dec.ln_g, dec.ln_b)
    if n_pre:
        h = T.narrow(h, 1, n_pre, length)
    return T.matmul(h, dec.embed.T)


def forward_lm(model: CuMoModel, images, tokens, records: list | None = None) -> Tensor:
    """Next-token logits ``[B, L, V]`` for caption inputs, with visual tokens as prefix."""
    visual = connect(model, encode(model, images, records), records)
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if visual.shape[0] != tokens.shape[0]:
        raise DimensionError(f"{visual.shape[0]} images for {tokens.shape[0]} token rows")
    return decode_tokens(model, visual, tokens, records)


def generate(model: CuMoModel, image, prompt=(BOS,), max_new: int = 16, stop_at_eos: bool = True) -> list[int]:
    """Greedy decoding; ties go to the lowest token id. ``<eos>`` ends and is not returned."""
    seq = [int(t) for t in prompt]
    if not seq:
        raise LengthError("generation needs a non-empty prompt")
    limit = model.config.decoder.max_seq - model.config.encoder.num_tokens
    if len(seq) > limit:
        raise LengthError(f"prompt of {len(seq)} exceeds {limit} text positions")
    out: list[int] = []
    with T.no_grad():
        visual = connect(model, encode(model, image))
        for _ in range(max_new):
            if len(seq) > limit:
                break
            logits = decode_tokens(model, visual, np.asarray([seq]))
            nxt = int(np.argmax(logits.data[0, -1]))
            if stop_at_eos and nxt == EOS:
                break
            out.append(nxt)
            seq.append(nxt)
    return out


def param_report(model: CuMoModel) -> ParamReport:
    """Per-section totals of the live model; inactive experts subtracted for activated."""
    report = ParamReport()
    for sec in ("encoder", "connector", "decoder"):
        total = sum(t.data.size for _, t in T.named_tensors(getattr(model, sec)))
        inactive = sum((m.num_params - m.active_params) for m in model.moe_blocks() if m.name.split(".")[0] == sec)
        report.sections[sec] = SectionCount(total, total - inactive)
    return report
