import math

import numpy as np
import pytest
import torch

from spfusion import losses
from spfusion.datamodel import DEFAULT_LOSS_WEIGHTS, IGNORE_INDEX
from spfusion.losses import (NonFiniteLossError, class_weights_from_counts, lovasz_softmax, seg_loss, total_loss,
                             weighted_cross_entropy, xm_kl_loss)

from conftest import fd_rel_error


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def _l(a):
    return torch.as_tensor(np.asarray(a, dtype=np.int64))


# --- cross-entropy --------------------------------------------------------------

def test_ce_peaked():
    logits = torch.zeros(4, 3, dtype=torch.float64)
    y = _l([0, 1, 2, 1])
    logits[torch.arange(4), y] = 20.0
    assert float(weighted_cross_entropy(logits, y, torch.ones(3))) <= 1e-8


def test_ce_uniform_two_classes():
    v = weighted_cross_entropy(torch.zeros(5, 2, dtype=torch.float64), _l([0, 1, 1, 0, 1]), torch.ones(2))
    assert float(v) == pytest.approx(math.log(2), abs=1e-15)


def test_ce_weight_scale_invariance_and_oracle(rng):
    logits = _t(rng.normal(size=(30, 4)))
    y = _l(rng.integers(0, 4, 30))
    y[::7] = IGNORE_INDEX
    w = _t(rng.uniform(0.2, 3, 4))
    a = weighted_cross_entropy(logits, y, w)
    assert float(a) == pytest.approx(float(weighted_cross_entropy(logits, y, 2 * w)), abs=1e-14)
    keep = [i for i in range(30) if int(y[i]) != IGNORE_INDEX]
    lp = torch.log_softmax(logits, 1)
    num = sum(float(w[y[i]]) * -float(lp[i, y[i]]) for i in keep)
    den = sum(float(w[y[i]]) for i in keep)
    assert float(a) == pytest.approx(num / den, abs=1e-13)


def test_ce_shift_invariance(rng):
    logits = _t(rng.normal(size=(20, 5)))
    y = _l(rng.integers(0, 5, 20))
    w = torch.ones(5)
    shift = _t(rng.normal(size=(20, 1)) * 50)
    assert abs(float(weighted_cross_entropy(logits + shift, y, w) - weighted_cross_entropy(logits, y, w))) <= 1e-9


def test_ce_all_ignored():
    losses.WARNINGS.clear()
    logits = torch.randn(3, 2, dtype=torch.float64, requires_grad=True)
    v = weighted_cross_entropy(logits, _l([IGNORE_INDEX] * 3), torch.ones(2))
    assert float(v.detach()) == 0.0 and losses.WARNINGS["all_ignored"] == 1
    v.backward()
    assert (logits.grad == 0).all()


def test_ce_bad_weights():
    with pytest.raises(ValueError):
        weighted_cross_entropy(torch.zeros(2, 2), _l([0, 1]), torch.tensor([-1.0, 1.0]))
    with pytest.raises(ValueError):
        weighted_cross_entropy(torch.zeros(2, 2), _l([0, 1]), torch.zeros(2))


# --- Lovasz -----------------------------------------------------------------------

def _lovasz_oracle(probs, labels):
    """Lovasz extension evaluated from the set definition of the Jaccard loss."""
    probs, labels = np.asarray(probs), np.asarray(labels)
    keep = labels != IGNORE_INDEX
    probs, labels = probs[keep], labels[keep]
    out = []
    for c in sorted(set(labels.tolist())):
        gt = set(np.flatnonzero(labels == c).tolist())
        err = np.where(labels == c, 1 - probs[:, c], probs[:, c])
        order = sorted(range(len(err)), key=lambda i: (-err[i], i))

        def jac(m):
            m = set(m)
            return 1 - len(gt - m) / len(gt | m)
        total, prev = 0.0, 0.0
        for k in range(1, len(order) + 1):
            cur = jac(order[:k])
            total += err[order[k - 1]] * (cur - prev)
            prev = cur
        out.append(total)
    return float(np.mean(out))


def _probs(rng, n, c):
    p = rng.dirichlet(np.ones(c), n)
    return p


def test_lovasz_perfect_is_zero():
    y = _l([0, 2, 1, 1])
    assert float(lovasz_softmax(torch.eye(3, dtype=torch.float64)[y], y)) == 0.0


def test_lovasz_single_point():
    assert float(lovasz_softmax(_t([[0.5, 0.5]]), _l([0]))) == pytest.approx(0.5, abs=1e-15)


def test_lovasz_matches_set_oracle(rng):
    for _ in range(20):
        n, c = int(rng.integers(1, 15)), int(rng.integers(2, 5))
        p = _probs(rng, n, c)
        y = rng.integers(0, c, n)
        if n > 2:
            y[0] = IGNORE_INDEX
        if (y == IGNORE_INDEX).all():
            continue
        assert float(lovasz_softmax(_t(p), _l(y))) == pytest.approx(_lovasz_oracle(p, y), abs=1e-12)


def test_lovasz_range(rng):
    for _ in range(20):
        p = _probs(rng, 10, 3)
        v = float(lovasz_softmax(_t(p), _l(rng.integers(0, 3, 10))))
        assert 0.0 <= v <= 1.0


def test_lovasz_monotone_in_true_class_probability():
    grid = [0.1, 0.3, 0.5, 0.7, 0.9]
    labels = _l([0, 1, 0])
    others = [[0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]
    for i in range(3):
        vals = []
        for g in grid:
            p = np.array(others, dtype=np.float64)
            y = int(labels[i])
            p[i, y], p[i, 1 - y] = g, 1 - g
            vals.append(float(lovasz_softmax(_t(p), labels)))
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_lovasz_rejects_non_stochastic():
    with pytest.raises(ValueError, match="row-stochastic"):
        lovasz_softmax(_t([[0.5, 0.6]]), _l([0]))


# --- seg / KL / total -------------------------------------------------------------

def test_seg_loss_composition(rng):
    logits = _t(rng.normal(size=(12, 3)))
    y = _l(rng.integers(0, 3, 12))
    w = _t([1.0, 2.0, 0.5])
    expect = weighted_cross_entropy(logits, y, w) + lovasz_softmax(torch.softmax(logits, 1), y)
    assert float(seg_loss(logits, y, w)) == float(expect)
    assert math.isfinite(float(seg_loss(logits * 100, y, w)))
    perfect = torch.full((3, 3), -100.0, dtype=torch.float64)
    perfect[torch.arange(3), torch.arange(3)] = 100.0
    assert float(seg_loss(perfect, _l([0, 1, 2]), w)) == pytest.approx(0.0, abs=1e-30)


def test_kl_worked_example():
    l2d = torch.log(_t([[0.5, 0.5]]))
    l3d = torch.log(_t([[0.25, 0.75]]))
    expect = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
    assert float(xm_kl_loss(l3d, l2d)) == pytest.approx(expect, abs=1e-12)
    assert round(expect, 5) == 0.14384
    reverse = 0.25 * math.log(0.5) + 0.75 * math.log(1.5)
    assert float(xm_kl_loss(l3d, l2d, swap=True)) == pytest.approx(reverse, abs=1e-12)
    assert float(xm_kl_loss(l3d, l2d, mode="symmetric")) == pytest.approx(0.5 * (expect + reverse), abs=1e-12)


def test_kl_identical_and_nonnegative(rng):
    x = _t(rng.normal(size=(6, 4)))
    assert abs(float(xm_kl_loss(x, x))) <= 1e-15
    assert abs(float(xm_kl_loss(x, x + 3.0, mode="symmetric"))) <= 1e-12
    for _ in range(100):
        a, b = _t(rng.normal(size=(5, 3)) * 3), _t(rng.normal(size=(5, 3)) * 3)
        assert float(xm_kl_loss(a, b)) >= 0 and float(xm_kl_loss(a, b, mode="symmetric")) >= 0


def test_kl_gradients_reach_both_branches(rng):
    a = _t(rng.normal(size=(4, 3))).requires_grad_(True)
    b = _t(rng.normal(size=(4, 3))).requires_grad_(True)
    xm_kl_loss(a, b).backward()
    assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


def test_kl_no_pairs_and_errors():
    losses.WARNINGS.clear()
    assert float(xm_kl_loss(torch.zeros(0, 3), torch.zeros(0, 3))) == 0.0
    assert losses.WARNINGS["no_pairs"] == 1
    with pytest.raises(ValueError):
        xm_kl_loss(torch.zeros(2, 3), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        xm_kl_loss(torch.zeros(2, 3), torch.zeros(2, 3), mode="other")


PARTS = ("seg3d", "seg2d", "xm", "gram", "diff")


def test_total_default_weights():
    assert DEFAULT_LOSS_WEIGHTS == {"seg2d": 1.0, "xm": 1.0, "gram": 0.05, "diff": 0.05}
    assert float(total_loss(dict.fromkeys(PARTS, _t(0.0))).total) == 0.0
    b = total_loss(dict.fromkeys(PARTS, _t(1.0)))
    assert float(b.total) == pytest.approx(3.10, abs=1e-15)
    assert b.recomputed_total() == pytest.approx(float(b.total), abs=1e-12)


def test_total_linearity(rng):
    w = {"seg2d": 0.7, "xm": 1.3, "gram": 0.05, "diff": 0.2}
    coef = {"seg3d": 1.0, **w}
    base = {k: _t(rng.uniform(0, 3)) for k in PARTS}
    t0 = float(total_loss(base, w).total)
    for k in PARTS:
        for d in (0.25, -0.25):
            t1 = float(total_loss({**base, k: base[k] + d}, w).total)
            assert t1 - t0 == pytest.approx(coef[k] * d, abs=1e-12)


def test_total_kl_only_weights(rng):
    base = {k: _t(rng.uniform(0, 3)) for k in PARTS}
    z = {"seg2d": 1.0, "xm": 1.0, "gram": 0.0, "diff": 0.0}
    expect = float(base["seg3d"] + base["seg2d"] + base["xm"])
    assert float(total_loss(base, z).total) == pytest.approx(expect, abs=1e-14)


@pytest.mark.parametrize("term", PARTS)
def test_total_names_nonfinite_term(term):
    parts = dict.fromkeys(PARTS, _t(1.0))
    parts[term] = _t(float("nan"))
    with pytest.raises(NonFiniteLossError) as exc:
        total_loss(parts)
    assert exc.value.term == term and term in str(exc.value)


def test_loss_gradients(rng):
    for i in range(10):
        n, c = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        logits = _t(rng.normal(size=(n, c)))
        other = _t(rng.normal(size=(n, c)))
        y = _l(rng.integers(0, c, n))
        w = _t(rng.uniform(0.5, 2, c))
        assert fd_rel_error(lambda x: weighted_cross_entropy(x, y, w), logits) <= 1e-4
        assert fd_rel_error(lambda x: lovasz_softmax(torch.softmax(x, 1), y), logits) <= 1e-4
        assert fd_rel_error(lambda a, b: xm_kl_loss(a, b), logits, other) <= 1e-4
        assert fd_rel_error(lambda a, b: xm_kl_loss(a, b, mode="symmetric"), logits, other) <= 1e-4
        parts = _t(rng.uniform(0, 2, 5))
        assert fd_rel_error(lambda p: total_loss(dict(zip(PARTS, p))).total, parts) <= 1e-4


def test_class_weights():
    w = class_weights_from_counts([100, 25, 0, 1])
    assert w[2] == 0 and np.mean(w[[0, 1, 3]]) == pytest.approx(1.0)
    assert w[1] / w[0] == pytest.approx(2.0) and w[3] / w[0] == pytest.approx(10.0)
    assert (class_weights_from_counts([3, 5], "uniform") == 1).all()
    with pytest.raises(ValueError):
        class_weights_from_counts([1, 2], "bogus")
