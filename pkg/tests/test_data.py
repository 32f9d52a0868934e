import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cumo.data import (BOS, CELLS, COLORS, EOS, EVAL_ID_OFFSET, MAX_CAPTION, PAD, SHAPES, WORDS, GrammarError,
                       caption_words, encode_caption, gen_dataset, lm_batch, parse_caption, render, sample_scene)


def test_same_seed_bitwise_identical():
    a, b = gen_dataset(3, 50, 10), gen_dataset(3, 50, 10)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert x.captions.tobytes() == y.captions.tobytes()


def test_train_eval_disjoint_ids():
    train, evals = gen_dataset(0, 100, 20)
    assert set(train.scene_ids.tolist()).isdisjoint(evals.scene_ids.tolist())
    assert evals.scene_ids.min() >= EVAL_ID_OFFSET


@given(st.integers(0, 2**32), st.integers(0, 2**40))
def test_caption_round_trip(seed, sid):
    scene = sample_scene(seed, sid)
    toks = encode_caption(scene)
    assert toks[-1] == EOS and len(toks) <= MAX_CAPTION
    assert parse_caption(toks) == scene


def test_every_dataset_caption_parses():
    train, _ = gen_dataset(1, 300, 5)
    for scene, cap, n in zip(train.scenes(), train.captions, train.lengths):
        assert encode_caption(scene) == cap[:n].tolist()
        assert (cap[n:] == PAD).all()


def test_caption_is_function_of_image():
    # identical renders imply identical captions
    seen = {}
    for sid in range(2000):
        scene = sample_scene(0, sid)
        key = render(scene, 32).tobytes()
        words = caption_words(scene)
        assert seen.setdefault(key, words) == words


def test_label_distribution_uniform():
    colors, shapes, counts = [], [], []
    for sid in range(10_000):
        scene = sample_scene(42, sid)
        counts.append(len(scene))
        for o in scene:
            colors.append(list(COLORS).index(o.color))
            shapes.append(SHAPES.index(o.shape))
    assert stats.chisquare(np.bincount(colors, minlength=len(COLORS))).pvalue > 1e-3
    assert stats.chisquare(np.bincount(shapes, minlength=len(SHAPES))).pvalue > 1e-3
    assert stats.chisquare(np.bincount(counts)[1:]).pvalue > 1e-3


@pytest.mark.parametrize("words", [[], ["two", "red", "square", "at", "c1"], ["one", "red", "square", "on", "c1"],
                                   ["two", "red", "square", "at", "c3", "blue", "cross", "at", "c1"],
                                   ["zero"]])
def test_bad_captions_rejected(words):
    toks = [WORDS.index(w) for w in words if w in WORDS]
    if len(toks) != len(words):
        toks = [WORDS.index("one"), 999]
    with pytest.raises(GrammarError):
        parse_caption(toks)


def test_render_places_colour_in_cell():
    scene = sample_scene(0, 0)
    img = render(scene, 32)
    assert img.shape == (32, 32, 3) and img.dtype == np.float32
    for o in scene:
        r, c = divmod(o.cell, 4)
        assert img[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8].sum() > 0
    occupied = {o.cell for o in scene}
    for cell in set(range(16)) - occupied:
        r, c = divmod(cell, 4)
        assert img[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8].sum() == 0


@pytest.mark.parametrize("size", [30, 16])
def test_render_rejects_bad_size(size):
    with pytest.raises(ValueError):
        render(sample_scene(0, 0), size)


def test_shapes_distinguishable_at_minimum_cell():
    from cumo.data import MIN_CELL, _shape_mask
    assert len({_shape_mask(s, MIN_CELL).tobytes() for s in SHAPES}) == len(SHAPES)


def test_lm_batch_shifts_and_masks():
    train, _ = gen_dataset(0, 8, 1)
    inputs, targets, mask = lm_batch(train, np.arange(8))
    assert (inputs[:, 0] == BOS).all()
    for i in range(8):
        n = train.lengths[i]
        np.testing.assert_array_equal(inputs[i, 1:n], train.captions[i, :n - 1])
        np.testing.assert_array_equal(targets[i, :n], train.captions[i, :n])
        assert mask[i].sum() == n
    assert len(CELLS) == 16


def test_gen_dataset_requires_samples():
    with pytest.raises(ValueError):
        gen_dataset(0, 0, 1)
