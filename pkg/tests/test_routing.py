import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from decaps.routing import activation_map, average_ham, dynamic_routing_baseline, idr
from decaps.tensor import ShapeError, Tensor

from conftest import gradcheck


# -- straight-line transcriptions with explicit loops -------------------------------

def _squash(vec):
    n2 = sum(v * v for v in vec)
    n = math.sqrt(n2)
    if n == 0.0:
        return [0.0] * len(vec)
    return [v * n2 / ((1.0 + n2) * n) for v in vec]


def idr_oracle(V, n_iter):
    """V[i][j][x][y][k]; returns (P[j][k], A[i][j][x][y], R[i][j][x][y], history)."""
    I, J, H, W, D = V.shape
    R_pre = np.zeros((I, J, H, W))
    history = []
    for _ in range(n_iter):
        R = np.zeros((I, J, H, W))
        for i in range(I):
            for j in range(J):
                m = max(R_pre[i, j, x, y] for x in range(H) for y in range(W))
                z = sum(math.exp(R_pre[i, j, x, y] - m) for x in range(H) for y in range(W))
                for x in range(H):
                    for y in range(W):
                        R[i, j, x, y] = math.exp(R_pre[i, j, x, y] - m) / z
        history.append(R)
        A_t = np.zeros_like(V)
        for i in range(I):
            for j in range(J):
                for x in range(H):
                    for y in range(W):
                        for k in range(D):
                            A_t[i, j, x, y, k] = R[i, j, x, y] * V[i, j, x, y, k]
        P = np.zeros((J, D))
        for j in range(J):
            s = [0.0] * D
            for i in range(I):
                for x in range(H):
                    for y in range(W):
                        for k in range(D):
                            s[k] += A_t[i, j, x, y, k]
            P[j] = _squash(s)
        for i in range(I):
            for j in range(J):
                for x in range(H):
                    for y in range(W):
                        R_pre[i, j, x, y] += sum(P[j, k] * V[i, j, x, y, k] for k in range(D))
    A = np.zeros((I, J, H, W))
    for i in range(I):
        for j in range(J):
            for x in range(H):
                for y in range(W):
                    A[i, j, x, y] = math.sqrt(sum(A_t[i, j, x, y, k] ** 2 for k in range(D)))
    return P, A, R, history


def baseline_oracle(V, n_iter):
    """Bottom-up routing: each child (i, x, y) splits its weight over parents j."""
    I, J, H, W, D = V.shape
    b = np.zeros((I, J, H, W))
    for it in range(n_iter):
        c = np.zeros_like(b)
        for i in range(I):
            for x in range(H):
                for y in range(W):
                    m = max(b[i, j, x, y] for j in range(J))
                    z = sum(math.exp(b[i, j, x, y] - m) for j in range(J))
                    for j in range(J):
                        c[i, j, x, y] = math.exp(b[i, j, x, y] - m) / z
        P = np.zeros((J, D))
        for j in range(J):
            s = [0.0] * D
            for i in range(I):
                for x in range(H):
                    for y in range(W):
                        for k in range(D):
                            s[k] += c[i, j, x, y] * V[i, j, x, y, k]
            P[j] = _squash(s)
        for i in range(I):
            for j in range(J):
                for x in range(H):
                    for y in range(W):
                        b[i, j, x, y] += sum(P[j, k] * V[i, j, x, y, k] for k in range(D))
    return P, c


def random_votes(r):
    shape = (r.integers(1, 4), r.integers(1, 4), r.integers(1, 5), r.integers(1, 5), r.integers(1, 5))
    return r.normal(size=shape) * r.uniform(0.2, 3.0)


# -- tests --------------------------------------------------------------------------

class TestIdrOracle:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_straight_line_transcription(self, seed):
        r = np.random.default_rng(seed)
        V = random_votes(r)
        n_iter = int(r.integers(1, 5))
        P, A, R, hist = idr_oracle(V, n_iter)
        res = idr(Tensor(V), n_iter)
        np.testing.assert_allclose(res.poses.data, P, atol=1e-9, rtol=0)
        np.testing.assert_allclose(res.ham.data, A, atol=1e-9, rtol=0)
        np.testing.assert_allclose(res.coefficients, R, atol=1e-9, rtol=0)
        assert len(res.history) == n_iter
        for got, want in zip(res.history, hist):
            np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)
            np.testing.assert_allclose(got.sum(axis=(-2, -1)), 1.0, atol=1e-6)

    def test_hand_example(self):
        # one head, one parent, 2x1 grid, d = 2
        V = np.array([[[[[1.0, 0.0]], [[0.0, 1.0]]]]])
        res = idr(Tensor(V), 2)
        # iteration 1: R = 1/2 each, s = (0.5, 0.5), |s|^2 = 0.5
        p1 = np.array([0.5, 0.5]) * 0.5 / (1.5 * math.sqrt(0.5))
        # both votes agree equally with p1, so R stays uniform
        np.testing.assert_allclose(res.history[1], 0.5)
        np.testing.assert_allclose(res.poses.data[0], p1, atol=1e-12)

    def test_single_iteration_is_uniform(self, rng):
        V = rng.normal(size=(2, 3, 3, 4, 4))
        res = idr(Tensor(V), 1)
        np.testing.assert_allclose(res.coefficients, 1.0 / 12)
        s = V.sum(axis=(0, 2, 3)) / 12
        n = np.linalg.norm(s, axis=-1, keepdims=True)
        np.testing.assert_allclose(res.poses.data, s * n / (1 + n * n), atol=1e-12)

    def test_identical_votes_keep_uniform_routing(self, rng):
        v = rng.normal(size=(2, 2, 1, 1, 3))
        V = np.broadcast_to(v, (2, 2, 3, 3, 3)).copy()
        for r in idr(Tensor(V), 4).history:
            np.testing.assert_allclose(r, 1.0 / 9, atol=1e-15)

    def test_leading_batch_axes_are_independent(self, rng):
        V = rng.normal(size=(3, 2, 2, 2, 3, 4))
        batched = idr(Tensor(V), 3)
        for b in range(3):
            single = idr(Tensor(V[b]), 3)
            np.testing.assert_allclose(batched.poses.data[b], single.poses.data, atol=1e-14)
            np.testing.assert_allclose(batched.ham.data[b], single.ham.data, atol=1e-14)


class TestIdrProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 4))
    def test_ham_matches_eq1_from_returned_coefficients(self, seed, n_iter):
        V = random_votes(np.random.default_rng(seed))
        res = idr(Tensor(V), n_iter)
        again = np.sqrt(((res.coefficients[..., None] * V) ** 2).sum(axis=-1))
        np.testing.assert_allclose(res.ham.data, again, atol=1e-9, rtol=0)
        assert np.all(res.ham.data >= 0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_grid_permutation_equivariance(self, seed):
        r = np.random.default_rng(seed)
        V = r.normal(size=(2, 2, 3, 3, 4))
        perm = r.permutation(9)
        Vp = V.reshape(2, 2, 9, 4)[:, :, perm].reshape(V.shape)
        a, b = idr(Tensor(V), 3), idr(Tensor(Vp), 3)
        np.testing.assert_allclose(b.poses.data, a.poses.data, atol=1e-12)
        np.testing.assert_allclose(b.ham.data, a.ham.data.reshape(2, 2, 9)[:, :, perm].reshape(2, 2, 3, 3),
                                   atol=1e-12)
        np.testing.assert_allclose(b.coefficients,
                                   a.coefficients.reshape(2, 2, 9)[:, :, perm].reshape(2, 2, 3, 3), atol=1e-12)

    @pytest.mark.parametrize("scale", [2.0, 5.0, 20.0])
    def test_strong_vote_gains_weight_every_iteration(self, scale, rng):
        base = rng.normal(size=(1, 1, 3, 3, 4)) * 0.1
        direction = np.abs(rng.normal(size=4)) + 0.5
        base[0, 0, 1, 1] = scale * direction
        trace = [h[0, 0, 1, 1] for h in idr(Tensor(base), 6).history]
        assert all(b >= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] > trace[0]

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_through_final_sum(self, seed):
        r = np.random.default_rng(seed)
        V = r.normal(size=(2, 2, 2, 3, 4))
        # with stop-gradient the routing map is a constant of the graph
        res = idr(Tensor(V), 3)
        coeff = res.coefficients

        def fixed(v):
            from decaps.capsules import squash
            return squash((Tensor(coeff[..., None]) * v).sum(axis=(-5, -3, -2)))

        t = Tensor(V, requires_grad=True)
        w = r.normal(size=(2, 4))
        (idr(t, 3).poses * w).sum().backward()
        t2 = Tensor(V, requires_grad=True)
        (fixed(t2) * w).sum().backward()
        np.testing.assert_allclose(t.grad, t2.grad, atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_full_gradient_mode(self, seed):
        r = np.random.default_rng(seed)
        V = r.normal(size=(2, 2, 2, 2, 3))
        assert gradcheck(lambda v: idr(v, 3, stop_gradient=False).poses, [V], seed=seed) < 1e-4
        a = idr(Tensor(V), 3, stop_gradient=False)
        b = idr(Tensor(V), 3)
        np.testing.assert_allclose(a.poses.data, b.poses.data, atol=1e-12)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            idr(Tensor(np.zeros((1, 1, 2, 2, 2))), 0)
        with pytest.raises(ShapeError):
            idr(Tensor(np.zeros((2, 2, 2))), 1)


class TestBaseline:
    @pytest.mark.parametrize("seed", range(30))
    def test_matches_oracle(self, seed):
        r = np.random.default_rng(seed)
        V = random_votes(r)
        n_iter = int(r.integers(1, 5))
        P, c = baseline_oracle(V, n_iter)
        res = dynamic_routing_baseline(Tensor(V), n_iter)
        np.testing.assert_allclose(res.poses.data, P, atol=1e-9, rtol=0)
        np.testing.assert_allclose(res.coefficients, c, atol=1e-9, rtol=0)
        for h in res.history:
            np.testing.assert_allclose(h.sum(axis=-3), 1.0, atol=1e-6)
        assert res.ham is None

    def test_tiny_instance(self):
        # two children (one head, 2x1 grid), two parents, d = 2, three iterations
        V = np.array([[1.0, 0.5], [-0.2, 0.3], [0.1, -1.0], [0.7, 0.7]]).reshape(1, 2, 2, 1, 2).transpose(0, 2, 1, 3, 4)
        P, c = baseline_oracle(V, 3)
        res = dynamic_routing_baseline(Tensor(V), 3)
        np.testing.assert_allclose(res.poses.data, P, atol=1e-12)

    def test_first_iteration_splits_evenly(self, rng):
        res = dynamic_routing_baseline(Tensor(rng.normal(size=(2, 2, 2, 2, 3))), 1)
        np.testing.assert_allclose(res.coefficients, 0.5)

    def test_single_parent_coefficients_are_one(self, rng):
        res = dynamic_routing_baseline(Tensor(rng.normal(size=(3, 1, 2, 2, 4))), 4)
        for h in res.history:
            np.testing.assert_array_equal(h, 1.0)

    def test_activation_map_for_baseline(self, rng):
        V = rng.normal(size=(2, 2, 3, 3, 4))
        res = dynamic_routing_baseline(Tensor(V), 3)
        a = activation_map(Tensor(V), res.coefficients).data
        np.testing.assert_allclose(a, np.linalg.norm(res.coefficients[..., None] * V, axis=-1))


class TestAverageHam:
    def test_single_head_unchanged(self, rng):
        ham = rng.uniform(size=(1, 3, 4, 4))
        np.testing.assert_array_equal(average_ham(ham, 2), ham[0, 2])

    def test_mean_of_two_heads(self, rng):
        ham = rng.uniform(size=(2, 2, 3, 3))
        np.testing.assert_allclose(average_ham(ham, 1), (ham[0, 1] + ham[1, 1]) / 2)

    def test_identical_heads(self, rng):
        m = rng.uniform(size=(4, 4))
        ham = np.broadcast_to(m, (32, 2, 4, 4))
        np.testing.assert_allclose(average_ham(ham, 0), m)

    def test_batched_and_tensor_input(self, rng):
        ham = rng.uniform(size=(5, 3, 2, 2, 2))
        np.testing.assert_allclose(average_ham(Tensor(ham), 1), ham[:, :, 1].mean(axis=1))

    def test_bad_class(self):
        with pytest.raises(IndexError):
            average_ham(np.zeros((2, 2, 3, 3)), 2)
