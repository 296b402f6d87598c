"""Finite-difference gradient checks for every differentiable op.

All checks run in float64 with step 1e-5 and a 1e-4 relative-error bound
on the full gradient vector, against a random-weighted-sum loss so every
output element participates.
"""

import numpy as np
import pytest

from afinet.functional import (bilinear_sample, conv2d, cross_entropy,
                               l2_normalize, linear, maxout, maxpool2d,
                               softmax, vlad_aggregate)
from afinet.tensor import Tensor, matmul, tsum, mul, add
from conftest import fd_gradient_check

N_INSTANCES = 10


def weighted_sum(t, w):
    return tsum(mul(t, Tensor(w, dtype=np.float64)))


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_conv2d_grad(inst):
    r = np.random.default_rng(100 + inst)
    x = r.standard_normal((1, 2, 5, 6))
    k = r.standard_normal((3, 2, 3, 3))
    w = r.standard_normal((1, 3, 5, 6))
    fd_gradient_check(lambda xt, kt: weighted_sum(conv2d(xt, kt), w), [x, k])


def test_conv2d_grad_even_kernel():
    r = np.random.default_rng(7)
    x = r.standard_normal((1, 1, 6, 6))
    k = r.standard_normal((2, 1, 4, 4))
    w = r.standard_normal((1, 2, 6, 6))
    fd_gradient_check(lambda xt, kt: weighted_sum(conv2d(xt, kt), w), [x, k])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_maxpool_grad(inst):
    r = np.random.default_rng(200 + inst)
    x = r.standard_normal((1, 2, 4, 6))
    w = r.standard_normal((1, 2, 2, 3))
    fd_gradient_check(lambda xt: weighted_sum(maxpool2d(xt)[0], w), [x])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_maxout_grad(inst):
    r = np.random.default_rng(300 + inst)
    x = r.standard_normal((2, 4, 3, 3))
    w = r.standard_normal((2, 2, 3, 3))
    fd_gradient_check(lambda xt: weighted_sum(maxout(xt), w), [x])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_bilinear_sample_grad(inst):
    # fractional parts held in [0.2, 0.8]: bilinear interpolation is only
    # differentiable away from the integer lattice
    r = np.random.default_rng(400 + inst)
    x = r.standard_normal((1, 2, 5, 6))
    rows = r.integers(1, 4, size=(1, 3, 3)) + r.uniform(0.2, 0.8, (1, 3, 3))
    cols = r.integers(0, 6, size=(1, 3, 3)) + r.uniform(0.2, 0.8, (1, 3, 3))
    coords = np.stack([rows, cols], axis=1)
    w = r.standard_normal((1, 2, 3, 3))
    fd_gradient_check(
        lambda xt, ct: weighted_sum(bilinear_sample(xt, ct), w), [x, coords])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_linear_grad(inst):
    r = np.random.default_rng(500 + inst)
    x = r.standard_normal((3, 4))
    wt = r.standard_normal((4, 2))
    b = r.standard_normal(2)
    w = r.standard_normal((3, 2))
    fd_gradient_check(
        lambda xt, wt_, bt: weighted_sum(linear(xt, wt_, bt), w), [x, wt, b])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_softmax_grad(inst):
    r = np.random.default_rng(600 + inst)
    x = r.standard_normal((3, 5))
    w = r.standard_normal((3, 5))
    fd_gradient_check(lambda xt: weighted_sum(softmax(xt, axis=1), w), [x])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_l2_normalize_grad(inst):
    r = np.random.default_rng(700 + inst)
    x = r.standard_normal((3, 5)) + 0.2
    w = r.standard_normal((3, 5))
    fd_gradient_check(lambda xt: weighted_sum(l2_normalize(xt, axis=1), w),
                      [x])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_cross_entropy_grad(inst):
    r = np.random.default_rng(800 + inst)
    x = r.standard_normal((4, 3))
    labels = r.integers(0, 3, size=4)
    fd_gradient_check(lambda xt: cross_entropy(xt, labels), [x])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_vlad_aggregate_grad(inst):
    r = np.random.default_rng(900 + inst)
    a = softmax(Tensor(r.standard_normal((1, 4, 2)), dtype=np.float64),
                axis=2).data
    v = r.standard_normal((1, 4, 3))
    c = r.standard_normal((2, 3))
    w = r.standard_normal((1, 2, 3))
    fd_gradient_check(
        lambda at, vt, ct: weighted_sum(vlad_aggregate(at, vt, ct), w),
        [a, v, c])


@pytest.mark.parametrize("inst", range(N_INSTANCES))
def test_matmul_grad(inst):
    r = np.random.default_rng(1000 + inst)
    a = r.standard_normal((2, 3, 4))
    b = r.standard_normal((4, 2))
    w = r.standard_normal((2, 3, 2))
    fd_gradient_check(lambda at, bt: weighted_sum(matmul(at, bt), w), [a, b])


def test_composite_graph_grad():
    # conv -> maxout -> pool -> linear -> softmax/CE, all in one tape
    r = np.random.default_rng(42)
    x = r.standard_normal((2, 1, 4, 4))
    k = r.standard_normal((4, 1, 3, 3))
    wt = r.standard_normal((2 * 2 * 2, 3))
    labels = np.array([0, 2])

    def build(xt, kt, wt_):
        h = maxout(conv2d(xt, kt))
        p, _ = maxpool2d(h)
        flat = p.reshape((2, 8))
        return cross_entropy(linear(flat, wt_), labels)

    fd_gradient_check(build, [x, k, wt])
