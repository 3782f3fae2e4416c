"""Finite-difference gradient cases shared by the unit and acceptance suites.

Each ``case_*`` builds one random instance ``i`` of a differentiable op and
returns the worst relative error between backprop and central differences.
"""

import numpy as np

from srqh import core, enhancement
from srqh.nn import autograd as ag
from srqh.nn import layers as L
from srqh.nn.autograd import Tensor
from srqh.nn.gradcheck import check_gradients
from srqh.nn.params import ParamStore

N_INSTANCES = 20
TOL = 1e-4


def random_coords(rng, n, side):
    return core.sort_unique(rng.integers(0, side, (n, 3)))


def randomize(store, rng, scale=0.5):
    """Random weights and biases so no ReLU sits exactly at its kink."""
    for _, t in store.items():
        t.data = rng.normal(0, scale, t.shape)


def weighted_sum(out_fn, shape, rng):
    w = Tensor(rng.normal(size=shape))
    return lambda: ag.tsum(ag.mul(out_fn(), w))


def case_dense(i):
    rng = np.random.default_rng(i)
    ps = ParamStore(i)
    x = Tensor(rng.normal(size=(5, 4)))
    L.dense(ps, "d", x, 4, 3)
    randomize(ps, rng)
    loss = weighted_sum(lambda: L.dense(ps, "d", x, 4, 3), (5, 3), rng)
    return check_gradients(loss, [x, ps["d.w"], ps["d.b"]])


def _conv_case(i, stride, ksize):
    rng = np.random.default_rng(100 + i)
    c = random_coords(rng, 12, 4)
    x = Tensor(rng.normal(size=(len(c), 2)))
    ps = ParamStore(i)

    def out():
        return L.conv(ps, "c", L.STensor(c, x), 2, 3, ksize=ksize, stride=stride).feats

    randomize(ps, rng)
    loss = weighted_sum(out, out().shape, rng)
    return check_gradients(loss, [x, ps["c.w"], ps["c.b"]])


def case_sparse_conv(i):
    return _conv_case(i, 1, 3)


def case_sparse_conv_stride2(i):
    return _conv_case(i, 2, 3)


def case_sparse_conv_1x1(i):
    return _conv_case(i, 1, 1)


def case_deconv(i):
    rng = np.random.default_rng(200 + i)
    c = random_coords(rng, 5, 4)
    x = Tensor(rng.normal(size=(len(c), 3)))
    ps = ParamStore(i)

    def out():
        return L.deconv(ps, "u", L.STensor(c, x), 3, 2).feats

    randomize(ps, rng)
    loss = weighted_sum(out, out().shape, rng)
    return check_gradients(loss, [x, ps["u.w"], ps["u.b"]])


def case_vector_attention(i):
    rng = np.random.default_rng(300 + i)
    ca, cb = random_coords(rng, 7, 5), random_coords(rng, 4, 5)
    xa, xb = Tensor(rng.normal(size=(len(ca), 3))), Tensor(rng.normal(size=(len(cb), 3)))
    ps = ParamStore(i)

    def out():
        return L.vector_attention(ps, "a", L.STensor(ca, xa), L.STensor(cb, xb), width=4, k=3).feats

    out()
    randomize(ps, rng)
    loss = weighted_sum(out, out().shape, rng)
    return check_gradients(loss, [xa, xb] + [ps[n] for n in ps.names("a.")])


def case_embedding(i):
    rng = np.random.default_rng(400 + i)
    ps = ParamStore(i)
    qs, qt = int(rng.integers(1, 6)), int(rng.integers(1, 6))
    up = bool(rng.integers(0, 2))
    enhancement._embed(ps, qs, qt, up)
    randomize(ps, rng)
    loss = weighted_sum(lambda: enhancement._embed(ps, qs, qt, up), (1, enhancement.EMBED), rng)
    return check_gradients(loss, [ps[n] for n in ps.names("embed")])


def case_focal_loss(i):
    rng = np.random.default_rng(500 + i)
    p = Tensor(rng.uniform(0.05, 0.95, 30))
    lab = rng.integers(0, 2, 30)
    return check_gradients(lambda: ag.focal_loss_op(p, lab, 0.75, 2.0), [p])


def case_gaussian_nll(i):
    rng = np.random.default_rng(600 + i)
    y = Tensor(rng.normal(0, 3, 20))
    mu = Tensor(rng.normal(0, 3, 20))
    sigma = Tensor(rng.uniform(0.3, 4, 20))
    return check_gradients(lambda: ag.tsum(ag.gaussian_bits_op(y, mu, sigma)), [y, mu, sigma])


def case_misc_ops(i):
    rng = np.random.default_rng(700 + i)
    x = Tensor(rng.normal(size=(4, 3)))
    idx = rng.integers(0, 4, (5, 2))

    def f():
        a = ag.softmax(ag.take_rows(x, idx), axis=1)
        b = ag.log_softmax(ag.concat([x, ag.softplus(x)], axis=1), axis=1)
        c = ag.sigmoid(ag.slice_cols(x, 0, 2))
        return ag.add(ag.add(ag.tsum(ag.mul(a, a)), ag.mean(ag.mul(b, b))), ag.tsum(c))

    return check_gradients(f, [x])


def case_bce_bits(i):
    rng = np.random.default_rng(800 + i)
    p = Tensor(rng.uniform(0.05, 0.95, 30))
    lab = rng.integers(0, 2, 30)
    return check_gradients(lambda: ag.bce_bits_op(p, lab), [p])


CASES = {name[5:]: fn for name, fn in sorted(globals().items()) if name.startswith("case_")}
