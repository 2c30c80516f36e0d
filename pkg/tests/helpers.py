"""Shared oracles for the test suite: finite-difference gradients, brute-force statistics."""
import itertools
from fractions import Fraction

import numpy as np

from m3rpd.tensor import Tensor, backward, mul, sum_


def project(out, seed=0):
    """Reduce any output to a scalar through a fixed random projection."""
    if out.data.size == 1:
        return sum_(out)
    r = np.random.default_rng(seed).normal(size=out.shape)
    return sum_(mul(out, Tensor(r)))


def numeric_grad(fn, arrays, index, h=1e-6):
    """Central differences of ``fn(*tensors)`` (a scalar) w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = old - h
        down = float(fn(*[Tensor(a) for a in arrays]).data)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def relative_error(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def grad_check(op, arrays, seed=0):
    """Largest relative error between analytic and numeric gradients over all inputs.

    ``op`` maps input tensors to an output tensor of any shape; it is reduced
    to a scalar by a random projection. Inputs must be float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def scalar(*ts):
        return project(op(*ts), seed)

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    backward(scalar(*ts), ts)
    worst = 0.0
    for i, t in enumerate(ts):
        worst = max(worst, relative_error(t.grad, numeric_grad(scalar, arrays, i)))
    return worst


def brute_rank_sum_p(a, b):
    """Two-sided exact p of the midrank sum of ``a`` by enumerating every relabelling."""
    pooled = np.concatenate([a, b]).astype(float)
    n = len(pooled)
    ranks = _midranks(pooled)
    na = len(a)
    expected = na * (n + 1) / 2.0
    observed = abs(ranks[:na].sum() - expected)
    hits = total = 0
    for idx in itertools.combinations(range(n), na):
        total += 1
        if abs(ranks[list(idx)].sum() - expected) >= observed - 1e-9:
            hits += 1
    return hits / total


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1
        i = j + 1
    return ranks


def brute_auroc(scores, labels):
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def exact_rates(tp, fp, fn, tn):
    """Textbook definitions in rational arithmetic."""
    n = tp + fp + fn + tn
    acc = Fraction(tp + tn, n)
    prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
    sens = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
    f1 = Fraction(2 * tp, 2 * tp + fp + fn) if tp else Fraction(0)
    p_yes = Fraction(tp + fp, n) * Fraction(tp + fn, n)
    p_no = Fraction(fn + tn, n) * Fraction(fp + tn, n)
    pe = p_yes + p_no
    kappa = (acc - pe) / (1 - pe) if pe != 1 else Fraction(0)
    return {"accuracy": acc, "precision": prec, "sensitivity": sens, "f1": f1, "kappa": kappa}


def random_confusions(count, seed):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        cm = tuple(int(v) for v in rng.integers(0, 40, size=4))
        if sum(cm):
            out.append(cm)
    return out


# ---------------------------------------------------------------- gradient-check catalogue

def _grad_cases():
    from types import SimpleNamespace

    from m3rpd import tensor as T
    from m3rpd.attention import AttentionOutput, cross_modality_attention, self_attention

    rng = np.random.default_rng(20240611)

    def r(*shape, away_from_zero=False):
        a = rng.normal(size=shape)
        if away_from_zero:  # keep relu / max kinks out of the finite-difference stencil
            a = np.sign(a) * (0.1 + np.abs(a))
        return a

    def distinct(*shape):
        # well-separated values so the 2x2 max never swaps under a 1e-6 nudge
        return rng.permutation(np.arange(int(np.prod(shape)), dtype=float)).reshape(shape) * 0.1 + r(*shape) * 0.01

    def sa(x, wq, wk, wv):
        p = SimpleNamespace(wq=wq, wk=wk, wv=wv, dim=wq.shape[0])
        return self_attention(x, p).distilled

    def sa_pooled(x, wq, wk, wv):
        p = SimpleNamespace(wq=wq, wk=wk, wv=wv, dim=wq.shape[0])
        return self_attention(x, p).pooled

    def xattn(a, b, wq, wk, wv, pw, pb):
        half = SimpleNamespace(wq=wq, wk=wk, wv=wv, dim=wq.shape[0])
        p = SimpleNamespace(ab=half, ba=half, proj=lambda z: T.dense(z, pw, pb), dim=wq.shape[0])
        ao = AttentionOutput(a, T.mean(a, axis=1), None)
        bo = AttentionOutput(b, T.mean(b, axis=1), None)
        return cross_modality_attention(ao, bo, p).fused

    def inception(x, w1, w3, w5, b):
        k = T.concat([T.pad_spatial(w1, 2), T.pad_spatial(w3, 1), w5], axis=-1)
        return T.max_pool2d(T.relu(T.conv2d(x, k, b, padding=2)))

    return [
        ("add_broadcast", lambda a, b: T.add(a, b), [r(3, 4), r(4)]),
        ("mul_broadcast", lambda a, b: T.mul(a, b), [r(2, 3, 4), r(3, 1)]),
        ("relu", T.relu, [r(5, 6, away_from_zero=True)]),
        ("sigmoid", T.sigmoid, [r(4, 5) * 3]),
        ("softmax_last", lambda x: T.softmax(x, axis=-1), [r(3, 7)]),
        ("softmax_axis0", lambda x: T.softmax(x, axis=0), [r(4, 3)]),
        ("reshape_transpose", lambda x: T.transpose(T.reshape(x, (2, 6, 2))), [r(4, 6)]),
        ("concat_mid", lambda a, b: T.concat([a, b], axis=1), [r(2, 3, 2), r(2, 1, 2)]),
        ("mean_axes", lambda x: T.mean(x, axis=(1, 2)), [r(2, 3, 4, 2)]),
        ("sum_keepdims", lambda x: T.sum_(x, axis=1, keepdims=True), [r(3, 4)]),
        ("matmul_batched", lambda a, b: T.matmul(a, b), [r(2, 3, 4), r(4, 5)]),
        ("dense", lambda x, w, b: T.dense(x, w, b), [r(5, 4), r(4, 3), r(3)]),
        ("conv3x3_same", lambda x, w, b: T.conv2d(x, w, b, padding=1), [r(2, 5, 5, 2), r(3, 3, 2, 3), r(3)]),
        ("conv1x1", lambda x, w, b: T.conv2d(x, w, b), [r(2, 4, 4, 3), r(1, 1, 3, 2), r(2)]),
        ("conv5x5_stride2", lambda x, w: T.conv2d(x, w, stride=2, padding=2), [r(1, 7, 7, 2), r(5, 5, 2, 2)]),
        ("conv_valid_rect", lambda x, w: T.conv2d(x, w), [r(2, 6, 5, 1), r(3, 2, 1, 2)]),
        ("max_pool", T.max_pool2d, [distinct(2, 4, 6, 2)]),
        ("max_pool_odd", T.max_pool2d, [distinct(1, 5, 5, 1)]),
        ("avg_pool", T.avg_pool2d, [r(2, 4, 4, 3)]),
        ("layer_norm", lambda x, g, b: T.layer_norm(x, g, b), [r(3, 2, 5), r(5), r(5)]),
        ("pad_spatial", lambda w: T.pad_spatial(w, 1), [r(3, 3, 2, 2)]),
        ("bce_with_logits", lambda z: T.bce_with_logits(z, np.array([[1], [0], [1], [0]])), [r(4, 1) * 4]),
        ("self_attention", sa, [r(2, 5, 4), r(4, 4) * 0.5, r(4, 4) * 0.5, r(4, 4) * 0.5]),
        ("self_attention_pooled", sa_pooled, [r(2, 6, 3), r(3, 3), r(3, 3), r(3, 3)]),
        ("cross_attention", xattn, [r(2, 4, 3), r(2, 5, 3), r(3, 3), r(3, 3), r(3, 3), r(6, 2), r(2)]),
        ("inception_fused", inception, [distinct(1, 4, 4, 2), r(1, 1, 2, 1), r(3, 3, 2, 2), r(5, 5, 2, 1), r(4)]),
    ]


def grad_cases():
    return _grad_cases()


# ---------------------------------------------------------------- tiny training data

TINY_BLOCKS = ((4, True), (8, True))


def tiny_backbone(size=16):
    from m3rpd.models import BackboneConfig

    return BackboneConfig(input_size=size, blocks=TINY_BLOCKS, head_width=8)


def tiny_split(n, seed, size=16, separation=0.6):
    """Records whose label sets the brightness of a central square (both modalities)."""
    from m3rpd.trainer import SplitData

    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    base = rng.random((n, size, size, 1)) * 0.2 + 0.2
    q = size // 4
    base[:, q:-q, q:-q] += (y * separation)[:, None, None, None]
    faf = np.clip(base, 0, 1).astype(np.float32)
    cfp = np.clip(np.concatenate([base, base * 0.8, base * 0.5], axis=-1), 0, 1).astype(np.float32)
    return SplitData(cfp, faf, y.astype(np.int64), [f"r{seed}_{i}" for i in range(n)])


def tiny_splits(n_train=48, n_val=16, n_test=16, seed=0, size=16, separation=0.6):
    from m3rpd.trainer import Splits

    return Splits(
        tiny_split(n_train, seed, size, separation),
        tiny_split(n_val, seed + 1, size, separation),
        tiny_split(n_test, seed + 2, size, separation),
    )
