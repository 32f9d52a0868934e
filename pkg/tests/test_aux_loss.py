import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cumo import tensor as T
from cumo.aux_loss import (AuxLossConfig, block_balance_loss, block_z_loss, load_balance_loss, router_z_loss,
                           total_loss)
from cumo.moe import ConfigError, RouteRecord, Routing
from cumo.tensor import Tensor
from oracles import grad_check


@pytest.mark.parametrize("s,k", [(2, 1), (4, 2), (8, 2), (8, 8)])
def test_balance_uniform_is_one(s, k):
    f = np.full(s, k / s)
    p = np.full(s, 1.0 / s)
    assert block_balance_loss(f, p, k) == 1.0


@pytest.mark.parametrize("s", [2, 4, 8])
def test_balance_collapse_is_s(s):
    f = np.zeros(s)
    f[0] = 1.0
    p = np.zeros(s)
    p[0] = 1.0
    assert block_balance_loss(f, p, 1) == s


@pytest.mark.parametrize("s", [2, 4, 8, 16])
def test_z_loss_at_zero_logits(s):
    assert block_z_loss(np.zeros((5, s))) == pytest.approx(math.log(s) ** 2, abs=1e-6)
    assert block_z_loss(Tensor(np.zeros((5, s)))).item() == pytest.approx(math.log(s) ** 2, abs=1e-6)


def test_total_loss_default_coefficients():
    cfg = AuxLossConfig()
    assert (cfg.alpha_b, cfg.alpha_z) == (0.1, 0.01)
    assert total_loss(1.0, 1.0, 1.0, cfg) == pytest.approx(1.11, abs=1e-12)


def test_total_loss_missing_terms_are_zero():
    assert total_loss(2.0, None, None, AuxLossConfig()) == 2.0
    assert total_loss(2.0, 5.0, 5.0, AuxLossConfig.disabled()) == 2.0


def test_config_validation():
    with pytest.raises(ConfigError):
        AuxLossConfig(alpha_b=-1)
    with pytest.raises(ConfigError):
        AuxLossConfig(applied_sections={"vision"})


@given(st.integers(0, 10_000), st.integers(2, 8), st.integers(1, 4))
def test_balance_bounds(seed, s, k):
    k = min(k, s)
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(s))
    f = rng.dirichlet(np.ones(s)) * k
    val = block_balance_loss(f, p, k)
    assert 0.0 <= val <= s + 1e-12
    # uniform dispatch makes the loss independent of the gate probabilities
    assert block_balance_loss(np.full(s, k / s), p, k) == pytest.approx(1.0, abs=1e-12)


def make_record(name, logits, k):
    lt = Tensor(logits, requires_grad=True)
    probs = T.softmax(lt)
    idx = np.argsort(-probs.data, axis=1, kind="stable")[:, :k]
    return RouteRecord(name, Routing(lt, probs, idx, T.softmax(T.take_along_rows(probs, idx))), logits.shape[1], k), lt


def test_losses_average_over_applied_blocks():
    rng = np.random.default_rng(0)
    recs = [make_record(n, rng.standard_normal((6, 4)), 2)[0] for n in ("encoder.0", "encoder.1", "connector", "decoder.0")]
    cfg = AuxLossConfig(applied_sections={"encoder", "connector"})
    each = [block_z_loss(r.routing.logits.data) for r in recs[:3]]
    assert router_z_loss(recs, cfg).item() == pytest.approx(np.mean(each), rel=1e-12)
    assert load_balance_loss([], cfg) is None
    assert router_z_loss(recs[3:], cfg) is None


def test_balance_loss_matches_closed_form():
    rng = np.random.default_rng(1)
    rec, _ = make_record("connector", rng.standard_normal((10, 4)), 2)
    f = np.bincount(rec.routing.topk_idx.reshape(-1), minlength=4) / 10 / 2
    p = rec.routing.probs.data.mean(axis=0)
    assert load_balance_loss([rec]).item() == pytest.approx(4 * np.dot(f, p), rel=1e-6)


def test_aux_gradients_float64():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((7, 4))
    lt = Tensor(logits.copy(), requires_grad=True)
    holder = {}

    def loss():
        probs = T.softmax(lt)
        idx = np.argsort(-probs.data, axis=1, kind="stable")[:, :2]
        holder["sel"] = idx.tobytes()
        rec = RouteRecord("encoder.0", Routing(lt, probs, idx, T.softmax(T.take_along_rows(probs, idx))), 4, 2)
        return total_loss(T.mul(T.sum(probs), 0.0), load_balance_loss([rec]), router_z_loss([rec]), AuxLossConfig())

    assert grad_check(loss, [lt], h=1e-6, guard=lambda: holder["sel"]) <= 1e-4
