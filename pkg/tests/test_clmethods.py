import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn
from torch.autograd import gradcheck

from cissbench import clmethods as cm
from cissbench.taskstream import SegDataset


def logits_from_probs(p):
    return torch.log(torch.tensor(p, dtype=torch.float64)).reshape(1, -1, 1, 1)


def lab(y):
    """Label map of a single pixel."""
    return torch.tensor([[[y]]], dtype=torch.long)


# ---------------------------------------------------------------------------
# hand-computed values


def test_cross_entropy_single_pixel():
    loss = cm.cross_entropy(logits_from_probs([0.25, 0.75]), lab(1))
    assert abs(loss.item() - (-math.log(0.75))) < 1e-6
    assert abs(loss.item() - 0.2877) < 1e-4


def test_cross_entropy_perfect_prediction_is_zero():
    logits = torch.tensor([-50.0, 50.0], dtype=torch.float64).reshape(1, 2, 1, 1)
    assert cm.cross_entropy(logits, lab(1)).item() < 1e-12


def test_cross_entropy_all_ignored():
    logits = torch.randn(2, 3, 4, 4, requires_grad=True)
    labels = torch.full((2, 4, 4), 255)
    loss, n = cm.cross_entropy(logits, labels, return_support=True)
    assert n == 0 and loss.item() == 0.0
    loss.backward()
    assert torch.all(logits.grad == 0)


def test_restricted_cross_entropy_hand_case():
    logits = torch.tensor([2.0, 9.0, 1.0], dtype=torch.float64).reshape(1, 3, 1, 1).requires_grad_()
    loss = cm.restricted_cross_entropy(logits, lab(2), current_classes={2})
    expect = -math.log(math.exp(1.0) / (math.exp(2.0) + math.exp(1.0)))
    assert abs(loss.item() - expect) < 1e-6
    assert abs(loss.item() - 1.3133) < 1e-4
    loss.backward()
    assert logits.grad[0, 1].abs().max().item() == 0.0


def test_restricted_cross_entropy_rejects_foreign_labels():
    with pytest.raises(ValueError):
        cm.restricted_cross_entropy(torch.zeros(1, 3, 1, 1), lab(1), current_classes={2})


def test_restricted_equals_ce_without_old_classes():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 4, 5, 5, generator=g)
    labels = torch.randint(0, 4, (2, 5, 5), generator=g)
    a = cm.restricted_cross_entropy(logits, labels, current_classes={1, 2, 3})
    b = cm.cross_entropy(logits, labels)
    assert torch.equal(a, b)


@pytest.mark.parametrize("y, expect", [(0, -math.log(0.6)), (3, -math.log(0.4))])
def test_unbiased_cross_entropy_hand_cases(y, expect):
    logits = logits_from_probs([0.1, 0.3, 0.2, 0.4])
    loss = cm.unbiased_cross_entropy(logits, lab(y), old_classes={0, 1, 2})
    assert abs(loss.item() - expect) < 1e-6


def test_unbiased_hand_values_rounded():
    logits = logits_from_probs([0.1, 0.3, 0.2, 0.4])
    assert round(cm.unbiased_cross_entropy(logits, lab(0), {0, 1, 2}).item(), 4) == 0.5108
    assert round(cm.unbiased_cross_entropy(logits, lab(3), {0, 1, 2}).item(), 4) == 0.9163


def test_masked_distillation_hand_case():
    z = torch.tensor([1.0, 0.0], dtype=torch.float64).reshape(1, 2, 1, 1)
    loss = cm.masked_distillation(z, z, lab(0), temperature=1.0)
    p = 1 / (1 + math.exp(-1))
    expect = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert abs(loss.item() - expect) < 1e-6
    assert round(loss.item(), 4) == 0.5822


def test_masked_distillation_zero_without_background():
    new = torch.randn(1, 3, 4, 4, requires_grad=True)
    old = torch.randn(1, 2, 4, 4)
    labels = torch.full((1, 4, 4), 2)
    loss, n = cm.masked_distillation(new, old, labels, return_support=True)
    assert n == 0 and loss.item() == 0.0


def test_masked_distillation_teacher_match_has_zero_gradient():
    g = torch.Generator().manual_seed(1)
    old = torch.randn(1, 3, 4, 4, generator=g, dtype=torch.float64)
    new = old.clone().requires_grad_()
    cm.masked_distillation(new, old, torch.zeros(1, 4, 4, dtype=torch.long), temperature=2.0).backward()
    assert new.grad.abs().max().item() < 1e-12


def test_quadratic_penalty_hand_case():
    w = torch.tensor(1.5, dtype=torch.float64, requires_grad=True)
    est = cm.ImportanceEstimate({"w": torch.tensor(2.0, dtype=torch.float64)}, {"w": torch.tensor(1.0, dtype=torch.float64)}, "ewc")
    pen = cm.quadratic_penalty({"w": w}, est, lam=1.0)
    assert abs(pen.item() - 0.5) < 1e-12
    pen.backward()
    assert abs(w.grad.item() - 2.0) < 1e-12
    eps = 1e-6
    fd = (cm.quadratic_penalty({"w": torch.tensor(1.5 + eps, dtype=torch.float64)}, est, 1.0)
          - cm.quadratic_penalty({"w": torch.tensor(1.5 - eps, dtype=torch.float64)}, est, 1.0)) / (2 * eps)
    assert abs(fd.item() - 2.0) < 1e-6


def test_penalty_zero_at_anchor_and_missing_key():
    est = cm.ImportanceEstimate({"w": torch.ones(3)}, {"w": torch.arange(3.0)}, "mas")
    assert cm.quadratic_penalty({"w": torch.arange(3.0)}, est, 5.0).item() == 0.0
    with pytest.raises(KeyError):
        cm.quadratic_penalty({"v": torch.zeros(3)}, est, 1.0)


def test_penalty_handles_grown_classifier():
    est = cm.ImportanceEstimate({"w": torch.ones(2, 3)}, {"w": torch.zeros(2, 3)}, "ewc")
    grown = torch.zeros(4, 3)
    grown[2:] = 7.0  # new rows are not penalised
    assert cm.quadratic_penalty({"w": grown}, est, 1.0).item() == 0.0


# ---------------------------------------------------------------------------
# importance estimates


class Scalar(nn.Module):
    """f(x) = theta * x on the first input channel."""

    def __init__(self, theta):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor([theta], dtype=torch.float64))

    def forward(self, x):
        return self.theta * x[:, :1]


def one_pixel_dataset(value, label=0):
    img = np.zeros((1, 1, 1, 3), np.float32)
    img[..., 0] = value
    return SegDataset(img, np.full((1, 1, 1), label, np.uint8))


def test_mas_scalar_model():
    est = cm.estimate_importance(Scalar(0.5), one_pixel_dataset(2.0), "mas")
    assert abs(est.importance["theta"].item() - 4.0) < 1e-9
    assert est.anchor["theta"].item() == 0.5


class Toy(nn.Module):
    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.conv = nn.Conv2d(3, 2, 1).double()  # 8 parameters

    def forward(self, x):
        return self.conv(x.double())


def toy_data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    return SegDataset(rng.random((n, 3, 3, 3)).astype(np.float32), rng.integers(0, 2, (n, 3, 3)).astype(np.uint8))


def _fd_importance(model, data, method, eps=1e-6):
    params = dict(model.named_parameters())
    out = {k: torch.zeros_like(p) for k, p in params.items()}
    for i in range(len(data)):
        x = torch.from_numpy(data.images[i : i + 1]).permute(0, 3, 1, 2)
        y = torch.from_numpy(data.labels[i : i + 1].astype(np.int64))

        def q():
            o = model(x)
            return cm.cross_entropy(o, y) if method == "ewc" else o.pow(2).sum(1).mean()

        for k, p in params.items():
            flat = p.data.view(-1)
            g = torch.zeros_like(flat)
            for j in range(flat.numel()):
                v = flat[j].item()
                flat[j] = v + eps
                hi = q().item()
                flat[j] = v - eps
                lo = q().item()
                flat[j] = v
                g[j] = (hi - lo) / (2 * eps)
            out[k] += (g.pow(2) if method == "ewc" else g.abs()).view_as(p)
    return {k: v / len(data) for k, v in out.items()}


@pytest.mark.parametrize("method", ["ewc", "mas"])
def test_importance_matches_finite_differences(method):
    model, data = Toy(), toy_data()
    est = cm.estimate_importance(model, data, method)
    fd = _fd_importance(model, data, method)
    for k in fd:
        a, b = est.importance[k], fd[k]
        rel = ((a - b).abs() / b.abs().clamp_min(1e-12)).max().item()
        assert rel < 1e-3, (k, rel)


def test_ewc_vanishes_on_perfect_fit():
    # Two channels with a huge margin for class 0 -> no gradient.
    class Wide(nn.Module):
        def __init__(self):
            super().__init__()
            self.w = nn.Parameter(torch.tensor([40.0, -40.0], dtype=torch.float64))

        def forward(self, x):
            return self.w.reshape(1, 2, 1, 1) * x[:, :1]

    est = cm.estimate_importance(Wide(), one_pixel_dataset(1.0, label=0), "ewc")
    assert est.importance["w"].max().item() < 1e-30


def test_importance_rejects_empty_and_unknown():
    with pytest.raises(ValueError):
        cm.estimate_importance(Toy(), toy_data().subset([]), "ewc")
    with pytest.raises(ValueError):
        cm.estimate_importance(Toy(), toy_data(), "si")


# ---------------------------------------------------------------------------
# finite-difference gradient checks on small inputs


def _inputs(seed, c=4, hw=3):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, c, hw, hw, generator=g, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, c, (1, hw, hw), generator=g)
    labels[0, 0, 0] = 255
    return logits, labels


GC = dict(eps=1e-6, atol=1e-9, rtol=1e-4)


def test_gradcheck_cross_entropy():
    logits, labels = _inputs(0)
    assert gradcheck(lambda z: cm.cross_entropy(z, labels), (logits,), **GC)


def test_gradcheck_restricted():
    logits, labels = _inputs(1)
    labels[labels == 1] = 0
    assert gradcheck(lambda z: cm.restricted_cross_entropy(z, labels, {2, 3}), (logits,), **GC)


def test_gradcheck_unce():
    logits, labels = _inputs(2)
    assert gradcheck(lambda z: cm.unbiased_cross_entropy(z, labels, {0, 1}), (logits,), **GC)


def test_gradcheck_distillation():
    logits, labels = _inputs(3)
    old = torch.randn(1, 3, 3, 3, dtype=torch.float64)
    labels[0, 1] = 0
    assert gradcheck(lambda z: cm.masked_distillation(z, old, labels, 2.0), (logits,), **GC)


def test_gradcheck_penalty():
    w = torch.randn(10, dtype=torch.float64, requires_grad=True)
    est = cm.ImportanceEstimate({"w": torch.rand(10, dtype=torch.float64)}, {"w": torch.randn(10, dtype=torch.float64)}, "ewc")
    assert gradcheck(lambda p: cm.quadratic_penalty({"w": p}, est, 3.0), (w,), **GC)


# ---------------------------------------------------------------------------
# properties


batch = st.tuples(st.integers(2, 6), st.integers(1, 4), st.integers(0, 10_000))


def _random(c, hw, seed):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, c, hw, hw, generator=g, dtype=torch.float64) * 3
    labels = torch.randint(0, c, (2, hw, hw), generator=g)
    return logits, labels


@settings(max_examples=40, deadline=None)
@given(batch)
def test_unce_equals_ce_with_background_only(args):
    c, hw, seed = args
    logits, labels = _random(c, hw, seed)
    diff = (cm.unbiased_cross_entropy(logits, labels, {0}) - cm.cross_entropy(logits, labels)).abs().item()
    assert diff < 1e-7


@settings(max_examples=40, deadline=None)
@given(batch)
def test_losses_non_negative(args):
    c, hw, seed = args
    logits, labels = _random(c, hw, seed)
    old = set(range(max(1, c // 2)))
    assert cm.cross_entropy(logits, labels).item() >= 0
    assert cm.unbiased_cross_entropy(logits, labels, old).item() >= 0
    cur = {k for k in range(c) if k not in old}
    rl = labels.clone()
    rl[(rl > 0) & (rl < max(old) + 1)] = 0
    if cur:
        assert cm.restricted_cross_entropy(logits, rl, cur).item() >= 0
    assert cm.masked_distillation(logits, logits[:, : len(old)], labels).item() >= -1e-12


@settings(max_examples=40, deadline=None)
@given(batch, st.randoms(use_true_random=False))
def test_ce_permutation_equivariant(args, rnd):
    c, hw, seed = args
    logits, labels = _random(c, hw, seed)
    perm = list(range(c))
    rnd.shuffle(perm)
    perm_t = torch.tensor(perm)
    inv = torch.argsort(perm_t)
    # channel k of the permuted logits holds original channel perm[k]
    a = cm.cross_entropy(logits, labels)
    b = cm.cross_entropy(logits[:, perm_t], inv[labels])
    assert abs(a.item() - b.item()) < 1e-12


@settings(max_examples=40, deadline=None)
@given(batch)
def test_unce_new_pixel_gradient_matches_ce(args):
    c, hw, seed = args
    logits, labels = _random(c, hw, seed)
    old = {0}
    if c > 2:
        old = {0, 1}
    labels = torch.where(labels < max(old) + 1, torch.full_like(labels, c - 1), labels)  # new classes only
    z1 = logits.clone().requires_grad_()
    z2 = logits.clone().requires_grad_()
    cm.unbiased_cross_entropy(z1, labels, old).backward()
    cm.cross_entropy(z2, labels).backward()
    assert torch.allclose(z1.grad, z2.grad, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 10), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.01, 5))
def test_penalty_strictly_convex(omega, anchor, theta, lam):
    est = cm.ImportanceEstimate({"w": torch.tensor(omega, dtype=torch.float64)}, {"w": torch.tensor(anchor, dtype=torch.float64)}, "ewc")

    def f(v):
        return cm.quadratic_penalty({"w": torch.tensor(v, dtype=torch.float64)}, est, lam).item()

    h = 0.5
    assert f(theta + h) + f(theta - h) - 2 * f(theta) > 0
    assert f(anchor) == 0.0


# ---------------------------------------------------------------------------
# replay buffer


def buffer_data(n_with_class=30, n_other=10):
    n = n_with_class + n_other
    labels = np.zeros((n, 4, 4), np.uint8)
    labels[:n_with_class, 0, 0] = 1
    labels[:5, 1, 1] = 2
    labels[:, 3, 3] = 3  # future class, outside the seen set
    images = np.random.default_rng(0).random((n, 4, 4, 3)).astype(np.float32)
    return SegDataset(images, labels)


def test_buffer_capacity_clamp_and_warning():
    buf = cm.ReplayBuffer(20).populate(buffer_data(), [1, 2], [0, 1, 2], np.random.default_rng(0))
    assert buf.counts() == {1: 20, 2: 5}
    assert any("class 2" in w for w in buf.warnings)
    for c, _, lab_ in buf.flat():
        assert (lab_ == c).any()
        assert set(np.unique(lab_)) <= {0, 1, 2, 255}


def test_buffer_absent_class_stores_nothing():
    buf = cm.ReplayBuffer(20).populate(buffer_data(), [4], [0, 4], np.random.default_rng(0))
    assert buf.counts() == {4: 0}
    assert buf.warnings


def test_buffer_determinism_and_roundtrip(tmp_path):
    a = cm.ReplayBuffer(20).populate(buffer_data(), [1, 2], [0, 1, 2], np.random.default_rng(3))
    b = cm.ReplayBuffer(20).populate(buffer_data(), [1, 2], [0, 1, 2], np.random.default_rng(3))
    for (ca, ia, la), (cb, ib, lb) in zip(a.flat(), b.flat()):
        assert ca == cb and np.array_equal(ia, ib) and np.array_equal(la, lb)
    a.save(tmp_path / "buf")
    c = cm.ReplayBuffer.load(tmp_path / "buf")
    assert c.counts() == a.counts()
    for (_, ia, la), (_, ic, lc) in zip(a.flat(), c.flat()):
        assert np.array_equal(la, lc)
        assert np.abs(ia - ic).max() <= 0.5 / 255 + 1e-7


def test_buffer_sampling():
    buf = cm.ReplayBuffer(20).populate(buffer_data(), [1], [0, 1], np.random.default_rng(0))
    imgs, labels = buf.sample(3, np.random.default_rng(1))
    assert imgs.shape == (3, 4, 4, 3) and labels.shape == (3, 4, 4)
    assert cm.ReplayBuffer(20).sample(3, np.random.default_rng(0)) is None


@pytest.mark.parametrize("b, k", [(1, 1), (4, 1), (5, 2), (8, 2), (16, 4)])
def test_replay_share(b, k):
    assert cm.replay_share(b) == k
