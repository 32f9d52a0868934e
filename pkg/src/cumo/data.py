"""Synthetic shape scenes with captions generated from a fixed grammar.

A scene places one to three coloured shapes in distinct cells of a 4x4 grid.
Its caption is ``<count> (<color> <shape> at <cell>)+`` with objects listed in
cell order, so the caption is a function of the image and parses back to the
scene exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng

GRID = 4
MAX_OBJECTS = 3
MIN_CELL = 8  # below this some shapes rasterise identically
COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.2),
    "blue": (0.15, 0.25, 1.0),
    "yellow": (1.0, 0.9, 0.1),
    "magenta": (0.9, 0.1, 0.9),
    "cyan": (0.1, 0.9, 0.9),
}
SHAPES = ("square", "circle", "triangle", "cross")
COUNTS = ("one", "two", "three")
CELLS = tuple(f"c{i}" for i in range(GRID * GRID))

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
WORDS = SPECIALS + COUNTS + tuple(COLORS) + SHAPES + ("at",) + CELLS
TOKEN = {w: i for i, w in enumerate(WORDS)}
MAX_CAPTION = 1 + 4 * MAX_OBJECTS + 1  # count, objects, eos

# eval scene ids start here so train and eval never share a scene id
EVAL_ID_OFFSET = 1 << 40


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class SceneObject:
    cell: int
    color: str
    shape: str


Scene = tuple[SceneObject, ...]


def sample_scene(seed: int, scene_id: int) -> Scene:
    rng = Rng(seed * 0x100000001B3 + scene_id)
    n = rng.randint(1, MAX_OBJECTS + 1)
    cells = sorted(rng.choice_without_replacement(GRID * GRID, n))
    colors = tuple(COLORS)
    return tuple(
        SceneObject(c, colors[rng.randint(0, len(colors))], SHAPES[rng.randint(0, len(SHAPES))])
        for c in cells
    )


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    u, v = (xx - c) / (size / 2.0), (yy - c) / (size / 2.0)
    if shape == "square":
        m = (np.abs(u) <= 0.75) & (np.abs(v) <= 0.75)
    elif shape == "circle":
        m = u * u + v * v <= 0.8
    elif shape == "triangle":
        m = (v >= -0.8) & (v <= 0.8) & (np.abs(u) <= (v + 0.8) / 2.0)
    elif shape == "cross":
        m = (np.abs(u) <= 0.25) | (np.abs(v) <= 0.25)
        m &= (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m.astype(np.float32)


def render(scene: Scene, image_size: int = 32) -> np.ndarray:
    """Float32 ``[H, W, 3]`` image in [0, 1], black background."""
    if image_size % GRID or image_size // GRID < MIN_CELL:
        raise ValueError(f"image_size must be a multiple of {GRID} with cells of at least {MIN_CELL} px, got {image_size}")
    cell = image_size // GRID
    img = np.zeros((image_size, image_size, 3), dtype=np.float32)
    for obj in scene:
        r, c = divmod(obj.cell, GRID)
        mask = _shape_mask(obj.shape, cell)[..., None]
        img[r * cell:(r + 1) * cell, c * cell:(c + 1) * cell] = mask * np.asarray(COLORS[obj.color], dtype=np.float32)
    return img


def caption_words(scene: Scene) -> list[str]:
    words = [COUNTS[len(scene) - 1]]
    for obj in sorted(scene, key=lambda o: o.cell):
        words += [obj.color, obj.shape, "at", CELLS[obj.cell]]
    return words


def encode_caption(scene: Scene) -> list[int]:
    """Token ids of the caption followed by ``<eos>``."""
    return [TOKEN[w] for w in caption_words(scene)] + [EOS]


def decode(tokens) -> list[str]:
    return [WORDS[t] if 0 <= t < len(WORDS) else f"<unk:{t}>" for t in tokens]


def parse_caption(tokens) -> Scene:
    """Invert :func:`encode_caption`; a trailing ``<eos>`` is optional."""
    words = decode([int(t) for t in tokens])
    if words and words[-1] == "<eos>":
        words = words[:-1]
    if not words or words[0] not in COUNTS:
        raise GrammarError(f"caption must start with a count word: {words}")
    n = COUNTS.index(words[0]) + 1
    body = words[1:]
    if len(body) != 4 * n:
        raise GrammarError(f"expected {n} objects, got {len(body)} words")
    objs = []
    for i in range(n):
        color, shape, at, cell = body[4 * i:4 * i + 4]
        if color not in COLORS or shape not in SHAPES or at != "at" or cell not in CELLS:
            raise GrammarError(f"bad object phrase {body[4 * i:4 * i + 4]}")
        objs.append(SceneObject(CELLS.index(cell), color, shape))
    cells = [o.cell for o in objs]
    if cells != sorted(set(cells)):
        raise GrammarError("objects must be listed in increasing, distinct cells")
    return tuple(objs)


@dataclass
class Dataset:
    images: np.ndarray     # [n, H, W, 3] float32
    captions: np.ndarray   # [n, MAX_CAPTION] int32, eos-terminated, pad-filled
    lengths: np.ndarray    # [n] int32, caption length including eos
    scene_ids: np.ndarray  # [n] int64

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.captions[idx], self.lengths[idx], self.scene_ids[idx])

    def scenes(self) -> list[Scene]:
        return [parse_caption(c[:n]) for c, n in zip(self.captions, self.lengths)]


def build(seed: int, scene_ids, image_size: int = 32) -> Dataset:
    scene_ids = np.asarray(scene_ids, dtype=np.int64)
    n = len(scene_ids)
    images = np.zeros((n, image_size, image_size, 3), dtype=np.float32)
    captions = np.full((n, MAX_CAPTION), PAD, dtype=np.int32)
    lengths = np.zeros(n, dtype=np.int32)
    for i, sid in enumerate(scene_ids):
        scene = sample_scene(seed, int(sid))
        images[i] = render(scene, image_size)
        toks = encode_caption(scene)
        captions[i, :len(toks)] = toks
        lengths[i] = len(toks)
    return Dataset(images, captions, lengths, scene_ids)


def gen_dataset(seed: int, n_train: int, n_eval: int, image_size: int = 32) -> tuple[Dataset, Dataset]:
    """Deterministic train/eval split over disjoint scene-id ranges."""
    if n_train < 1 or n_eval < 1:
        raise ValueError("n_train and n_eval must be >= 1")
    train = build(seed, np.arange(n_train), image_size)
    evals = build(seed, EVAL_ID_OFFSET + np.arange(n_eval), image_size)
    return train, evals


def lm_batch(ds: Dataset, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays: inputs ``<bos> w1..wn``, targets ``w1..wn <eos>``, loss mask."""
    caps = ds.captions[idx]
    lens = ds.lengths[idx]
    width = int(lens.max())
    b = len(caps)
    inputs = np.full((b, width), PAD, dtype=np.int64)
    inputs[:, 0] = BOS
    inputs[:, 1:] = caps[:, :width - 1]
    targets = caps[:, :width].astype(np.int64)
    mask = np.arange(width)[None, :] < lens[:, None]
    inputs = np.where(np.arange(width)[None, :] < lens[:, None], inputs, PAD)
    return inputs, targets, mask
