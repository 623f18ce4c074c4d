import math

import numpy as np
import pytest
import torch
from conftest import fd_relative_error
from hypothesis import given, settings
from hypothesis import strategies as st

from gfss import IGNORE_ID
from gfss.errors import ConfigurationError, DataError
from gfss.losses import (
    auxiliary_logits,
    auxiliary_loss,
    consistency_loss,
    entropy,
    segmentation_loss,
    total_loss,
)

D64 = torch.float64


def _logits_from_probs(rows):
    """(1, C, 1, P) logits whose softmax reproduces the given per-pixel probability rows."""
    p = torch.tensor(rows, dtype=D64).t()
    return torch.log(p).unsqueeze(0).unsqueeze(2)


# -- segmentation ----------------------------------------------------------------------------

def test_seg_loss_worked_example():
    logits = _logits_from_probs([[0.5, 0.5, 0.0 + 1e-300], [0.25, 0.25, 0.5]])
    target = torch.tensor([[[0, 1]]])
    expected = (math.log(2) + math.log(4)) / 2
    assert expected == pytest.approx(1.0397, abs=1e-4)
    assert segmentation_loss(logits, target).item() == pytest.approx(expected, abs=1e-12)


def test_seg_loss_one_hot_and_uniform():
    target = torch.tensor([[[1, 0, 2]]])
    sharp = torch.nn.functional.one_hot(target, 3).permute(0, 3, 1, 2).double() * 1e4
    assert segmentation_loss(sharp, target).item() == pytest.approx(0.0, abs=1e-12)
    for c in (2, 5, 9):
        flat = torch.zeros(1, c, 2, 3, dtype=D64)
        assert segmentation_loss(flat, torch.zeros(1, 2, 3, dtype=torch.long)).item() == pytest.approx(math.log(c))


def test_seg_loss_all_ignored():
    with pytest.raises(DataError):
        segmentation_loss(torch.zeros(1, 3, 2, 2), torch.full((1, 2, 2), IGNORE_ID))


def test_seg_loss_ignored_pixels_contribute_nothing():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 3, 3, generator=g, dtype=D64)
    target = torch.randint(0, 4, (2, 3, 3), generator=g)
    target[0, 1, 1] = IGNORE_ID
    a = segmentation_loss(logits, target)
    logits2 = logits.clone()
    logits2[0, :, 1, 1] = torch.randn(4, generator=g, dtype=D64) * 100
    assert segmentation_loss(logits2, target).item() == a.item()
    # the mean runs over the remaining pixels only
    keep = target != IGNORE_ID
    lp = torch.log_softmax(logits, 1).gather(1, target.clamp(max=3).unsqueeze(1))[:, 0]
    assert a.item() == pytest.approx(-lp[keep].mean().item())


# -- auxiliary ------------------------------------------------------------------------------

def test_aux_worked_example():
    features = torch.tensor([1.0, 0.0], dtype=D64).view(1, 2, 1, 1)
    protos = torch.eye(2, dtype=D64)
    loss = auxiliary_loss(features, protos, torch.tensor([[[1]]]), tau=1.0)
    e = math.e
    assert loss.item() == pytest.approx(-math.log(e / (e + 2)), abs=1e-12)
    assert loss.item() == pytest.approx(0.5514, abs=1e-4)


def test_aux_uniform_is_log_m_plus_one():
    features = torch.tensor([0.0, 0.0, 1.0], dtype=D64).view(1, 3, 1, 1)
    protos = torch.tensor([[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0]], dtype=D64)
    assert auxiliary_loss(features, protos, torch.tensor([[[2]]])).item() == pytest.approx(math.log(4))


def test_aux_saturates_on_matching_prototype():
    protos = torch.tensor([[0.0, 3.0], [2.0, 0.0]], dtype=D64)
    features = torch.tensor([0.0, 1.0], dtype=D64).view(1, 2, 1, 1)
    loss = auxiliary_loss(features, protos, torch.tensor([[[1]]]), tau=0.01)
    assert loss.item() < 1e-20


def test_aux_background_score_channel():
    logits = auxiliary_logits(torch.ones(1, 2, 1, 1), torch.eye(2), background_score=torch.tensor(1.5))
    assert logits[0, 0, 0, 0].item() == 1.5
    assert logits.shape == (1, 3, 1, 1)


# -- consistency ----------------------------------------------------------------------------

def test_con_worked_example():
    pw = torch.tensor([0.7, 0.3], dtype=D64).view(1, 2, 1, 1)
    ps = torch.tensor([0.5, 0.5], dtype=D64).view(1, 2, 1, 1)
    expected = -0.7 * math.log(0.5) - 0.3 * math.log(0.5)
    assert expected == pytest.approx(0.6931, abs=1e-4)
    assert consistency_loss(pw, torch.log(ps)).item() == pytest.approx(expected, abs=1e-12)


def test_con_one_hot_and_uniform():
    one = torch.tensor([1.0, 0.0, 0.0], dtype=D64).view(1, 3, 1, 1)
    assert consistency_loss(one, one * 1e4).item() == pytest.approx(0.0, abs=1e-12)
    u = torch.full((1, 4, 2, 2), 0.25, dtype=D64)
    assert consistency_loss(u, torch.log(u)).item() == pytest.approx(math.log(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_con_self_equals_entropy_and_gibbs(seed, c):
    g = torch.Generator().manual_seed(seed)
    pw = torch.softmax(torch.randn(1, c, 1, 1, generator=g, dtype=D64) * 3, 1)
    s_logits = torch.randn(1, c, 1, 1, generator=g, dtype=D64) * 3
    h = entropy(pw).item()
    assert h >= 0
    assert consistency_loss(pw, torch.log(pw)).item() == pytest.approx(h, abs=1e-10)
    assert consistency_loss(pw, s_logits).item() >= h - 1e-12


def test_entropy_zero_only_for_one_hot():
    assert entropy(torch.tensor([[0.0, 1.0, 0.0]])).item() == 0.0
    assert entropy(torch.tensor([[0.01, 0.99, 0.0]])).item() > 0


def test_con_stop_gradient():
    pw = torch.tensor([0.6, 0.4], dtype=D64, requires_grad=True).view(1, 2, 1, 1)
    s = torch.tensor([0.1, -0.2], dtype=D64, requires_grad=True).view(1, 2, 1, 1)
    gw, gs = torch.autograd.grad(consistency_loss(pw, s), [pw, s], allow_unused=True)
    assert gw is None and gs.abs().sum() > 0
    gw2, = torch.autograd.grad(consistency_loss(pw, s, stop_gradient=False), [pw])
    assert gw2.abs().sum() > 0


# -- totals --------------------------------------------------------------------------------

def test_total_loss_sums():
    t = lambda v: torch.tensor(v)  # noqa: E731
    assert total_loss({"seg": t(0.5), "orth": t(0.2), "aux": t(0.3)}, "pretrain").total.item() == pytest.approx(1.0)
    b = total_loss({"seg": t(0.5), "orth": t(0.2), "con": t(0.3)}, "finetune")
    assert b.total.item() == pytest.approx(1.0)
    assert b.as_row()["aux"] != b.as_row()["aux"]  # nan for the absent term
    assert total_loss({"seg": t(0.0), "orth": t(0.0), "con": t(0.0)}, "finetune").total.item() == 0.0


def test_total_loss_errors():
    t = torch.tensor(1.0)
    with pytest.raises(ConfigurationError):
        total_loss({"seg": t, "orth": t, "con": t}, "pretrain")
    with pytest.raises(ConfigurationError):
        total_loss({"seg": t, "orth": t}, "finetune")
    with pytest.raises(ConfigurationError):
        total_loss({"seg": t, "orth": t, "aux": t}, "warmup")


# -- gradients ------------------------------------------------------------------------------

def test_seg_gradient():
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(1, 4, 2, 3, generator=g, dtype=D64, requires_grad=True)
    target = torch.tensor([[[0, 3, IGNORE_ID], [1, 2, 2]]])
    assert fd_relative_error(lambda x: segmentation_loss(x, target), [logits]) <= 1e-3


def test_aux_gradient():
    g = torch.Generator().manual_seed(4)
    f = torch.randn(1, 3, 2, 2, generator=g, dtype=D64, requires_grad=True)
    u = torch.randn(2, 3, generator=g, dtype=D64, requires_grad=True)
    bg = torch.tensor(0.3, dtype=D64, requires_grad=True)
    target = torch.tensor([[[0, 1], [2, 1]]])
    fn = lambda f, u, bg: auxiliary_loss(f, u, target, background_score=bg)  # noqa: E731
    assert fd_relative_error(fn, [f, u, bg]) <= 1e-3


def test_con_gradient():
    g = torch.Generator().manual_seed(5)
    pw = torch.softmax(torch.randn(1, 3, 2, 2, generator=g, dtype=D64), 1)
    s = torch.randn(1, 3, 2, 2, generator=g, dtype=D64, requires_grad=True)
    assert fd_relative_error(lambda s: consistency_loss(pw, s), [s]) <= 1e-3
    w = torch.randn(1, 3, 2, 2, generator=g, dtype=D64, requires_grad=True)
    fn = lambda w, s: consistency_loss(torch.softmax(w, 1), s, stop_gradient=False)  # noqa: E731
    assert fd_relative_error(fn, [w, s]) <= 1e-3
