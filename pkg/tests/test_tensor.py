import numpy as np
import pytest

from maskdiff import tensor as td
from maskdiff.optim import ParamSet, adamw_step
from maskdiff.tensor import Graph, NonFiniteError, finite_diff_check


def rng(seed=0):
    return np.random.Generator(np.random.PCG64(seed))


class TestForwardOps:
    def test_add_elementwise(self):
        g = Graph()
        out = g.tensor(np.full((2, 2), 1.0)) + g.tensor(np.full((2, 2), 2.0))
        assert np.array_equal(out.data, np.full((2, 2), 3.0, dtype=np.float32))

    def test_concat_shape(self):
        g = Graph()
        out = td.concat([g.tensor(np.zeros((1, 4, 4))), g.tensor(np.ones((1, 4, 4)))], axis=0)
        assert out.shape == (2, 4, 4)

    def test_conv2d_center_value(self):
        g = Graph()
        out = td.conv2d(
            g.tensor(np.ones((1, 1, 3, 3))), g.tensor(np.ones((1, 1, 3, 3))), pad=1, stride=1
        )
        assert out.data[0, 0, 1, 1] == pytest.approx(9.0)
        # corners see only a 2x2 patch
        assert out.data[0, 0, 0, 0] == pytest.approx(4.0)

    def test_conv2d_matches_brute_force(self):
        r = rng(3)
        x = r.standard_normal((2, 3, 6, 6)).astype(np.float32)
        w = r.standard_normal((4, 3, 3, 3)).astype(np.float32)
        g = Graph()
        got = td.conv2d(g.tensor(x), g.tensor(w), pad=1).data
        ref = np.zeros((2, 4, 6, 6))
        xp = np.zeros((2, 3, 8, 8))
        xp[:, :, 1:7, 1:7] = x
        for n in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(6):
                        ref[n, o, i, j] = np.sum(xp[n, :, i : i + 3, j : j + 3] * w[o])
        assert np.abs(got - ref).max() < 1e-4

    def test_shape_mismatch_names_op(self):
        g = Graph()
        with pytest.raises(ValueError, match="add.*shape"):
            g.record("add", [g.tensor(np.zeros(3)), g.tensor(np.zeros(4))])

    def test_unknown_op_tag(self):
        g = Graph()
        with pytest.raises(ValueError, match="unknown op"):
            g.record("frobnicate", [g.tensor(np.zeros(3))])

    def test_leaf_rejects_nonfinite(self):
        g = Graph()
        with pytest.raises(NonFiniteError):
            g.tensor(np.array([1.0, np.nan]))

    def test_forward_deterministic(self):
        def build():
            g = Graph()
            r = rng(5)
            x = g.tensor(r.standard_normal((2, 4, 8, 8)).astype(np.float32))
            w = g.tensor(r.standard_normal((3, 4, 3, 3)).astype(np.float32))
            return td.silu(td.conv2d(x, w, pad=1)).data
        assert np.array_equal(build(), build())


class TestBackward:
    def test_grad_of_sum_of_squares(self):
        g = Graph()
        x = g.tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        g.backward((x * x).sum())
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])

    def test_grad_zero_at_minimum(self):
        g = Graph()
        x = g.tensor(np.array([1.0, -2.0]), requires_grad=True)
        y = g.tensor(np.array([1.0, -2.0]))
        d = x - y
        g.backward((d * d).mean())
        assert np.allclose(x.grad, 0.0)

    def test_non_scalar_loss_rejected(self):
        g = Graph()
        x = g.tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            g.backward(x + x)

    def test_disconnected_nodes_absent(self):
        g = Graph()
        x = g.tensor(np.ones(3), requires_grad=True)
        y = g.tensor(np.ones(3), requires_grad=True)
        unused = y * 2.0
        grads = g.backward((x * x).sum())
        assert x.nid in grads
        assert y.nid not in grads and unused.nid not in grads

    def test_two_layer_conv_net_finite_difference(self):
        r = rng(11)
        w1 = r.standard_normal((3, 2, 3, 3)) * 0.3
        w2 = r.standard_normal((2, 3, 3, 3)) * 0.3

        def f(x):
            g = x.graph
            h = td.silu(td.conv2d(x, g.tensor(w1, dtype=np.float64), pad=1))
            h = td.conv2d(h, g.tensor(w2, dtype=np.float64), pad=1)
            return (h * h).mean()

        err = finite_diff_check(f, r.uniform(-1, 1, size=(1, 2, 6, 6)), eps=1e-3)
        assert err < 1e-4

    def test_backward_linearity_bitexact(self):
        r = rng(7)
        a = r.standard_normal(5)
        b = r.standard_normal(5)
        pt = r.standard_normal(5)

        def grad_of(build):
            g = Graph()
            x = g.tensor(pt, requires_grad=True, dtype=np.float64)
            g.backward(build(g, x))
            return x.grad

        g1 = grad_of(lambda g, x: (x * g.tensor(a, dtype=np.float64)).sum())
        g2 = grad_of(lambda g, x: (x * g.tensor(b, dtype=np.float64)).sum())
        gsum = grad_of(
            lambda g, x: (x * g.tensor(a, dtype=np.float64)).sum()
            + (x * g.tensor(b, dtype=np.float64)).sum()
        )
        assert np.array_equal(gsum, g1 + g2)


def _op_cases():
    """One scalar-valued function per op so every backward rule gets a
    finite-difference check on random inputs in [-2, 2]."""
    r = rng(99)
    w_conv = r.standard_normal((3, 2, 3, 3)) * 0.4
    w_mat = r.standard_normal((4, 3)) * 0.5
    gamma = r.uniform(0.5, 1.5, size=4)
    beta = r.uniform(-0.2, 0.2, size=4)
    bias = r.standard_normal(4) * 0.3
    vvec = r.standard_normal((2, 4)) * 0.5
    other = r.uniform(0.5, 2.0, size=(3, 4))

    def c(g, arr):
        return g.tensor(arr, dtype=np.float64)

    return [
        ("add", (3, 4), lambda g, x: (x + c(g, other)).sum()),
        ("sub", (3, 4), lambda g, x: (x - c(g, other)).sum()),
        ("mul", (3, 4), lambda g, x: (x * c(g, other) * x).sum()),
        ("div", (3, 4), lambda g, x: (x / c(g, other)).sum()),
        ("addc", (3, 4), lambda g, x: ((x + 1.7) * (x + 1.7)).sum()),
        ("mulc", (3, 4), lambda g, x: (x * -2.5).sum()),
        ("matmul", (2, 4), lambda g, x: (lambda h: (h * h).sum())(td.matmul(x, c(g, w_mat)))),
        ("conv2d", (1, 2, 6, 6), lambda g, x: td.conv2d(x, c(g, w_conv), pad=1).sum()),
        ("conv2d_strided", (1, 2, 7, 7), lambda g, x: (lambda h: (h * h).sum())(td.conv2d(x, c(g, w_conv), pad=1, stride=2))),
        ("bias_add", (2, 4, 3, 3), lambda g, x: (lambda h: (h * h).sum())(td.bias_add(x, c(g, bias)))),
        ("channel_add", (2, 4, 3, 3), lambda g, x: (lambda h: (h * h).sum())(td.channel_add(x, c(g, vvec)))),
        ("upsample2x", (1, 2, 3, 3), lambda g, x: (lambda h: (h * h).sum())(td.upsample2x(x))),
        ("avgpool2x2", (1, 2, 4, 4), lambda g, x: (lambda h: (h * h).sum())(td.avgpool2x2(x))),
        ("silu", (3, 4), lambda g, x: td.silu(x).sum()),
        ("relu", (3, 4), lambda g, x: (lambda h: (h * h).sum())(td.relu(x))),
        ("sigmoid", (3, 4), lambda g, x: (td.sigmoid(x) * c(g, other)).sum()),
        ("group_norm", (2, 4, 3, 3), lambda g, x: (lambda h: (h * h).mean())(td.group_norm(x, c(g, gamma), c(g, beta), groups=2))),
        ("reshape", (3, 4), lambda g, x: (lambda h: (h * h).sum())(x.reshape(2, 6))),
        ("permute", (3, 4), lambda g, x: (td.permute(x, (1, 0)) * td.permute(x, (1, 0))).sum()),
        ("concat", (2, 3), lambda g, x: (lambda h: (h * h).sum())(td.concat([x, x * 2.0], axis=1))),
        ("slice", (4, 5), lambda g, x: (lambda h: (h * h).sum())(x.slice([(1, 3), (0, 4)]))),
        ("take_rows", (5, 3), lambda g, x: (lambda h: (h * h).sum())(td.take_rows(x, [0, 2, 2, 4]))),
        ("sum_axes", (2, 3, 4), lambda g, x: (lambda h: (h * h).sum())(x.sum(axes=(0, 2)))),
        ("mean_axes", (2, 3, 4), lambda g, x: (lambda h: (h * h).sum())(x.mean(axes=(1,)))),
        ("mean_all", (3, 4), lambda g, x: (x * x).mean()),
        ("softmax_xent", (3, 5), lambda g, x: td.softmax_cross_entropy(x, [0, 3, 2]).mean()),
        ("vec_norm", (3, 4), lambda g, x: td.vec_norm(x)),
        ("l2_normalize_rows", (3, 4), lambda g, x: (td.l2_normalize_rows(x) * c(g, other)).sum()),
        ("sqrt", (3, 4), lambda g, x: td.sqrt(x * x + 1.0).sum()),
        ("clamp", (3, 4), lambda g, x: (lambda h: (h * h).sum())(x.clamp(-1.25, 1.25))),
    ]


@pytest.mark.parametrize("name,shape,fn", _op_cases(), ids=[c[0] for c in _op_cases()])
def test_every_op_gradient_matches_finite_differences(name, shape, fn):
    r = rng(hash(name) % 2**32)
    for trial in range(2):
        point = r.uniform(-2.0, 2.0, size=shape)
        if name == "clamp":  # keep away from the kink where the derivative jumps
            point = np.where(np.abs(np.abs(point) - 1.25) < 0.05, point * 0.5, point)
        err = finite_diff_check(lambda x: fn(x.graph, x), point, eps=1e-4)
        assert err < 1e-4, f"{name} trial {trial}: rel err {err}"


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        err = finite_diff_check(lambda x: (x * x).sum(), rng(1).standard_normal(6), eps=1e-3)
        assert err < 1e-6

    def test_silu_case(self):
        err = finite_diff_check(lambda x: td.silu(x).sum(), rng(2).standard_normal(6), eps=1e-3)
        assert err < 1e-4

    def test_constant_function_zero_error(self):
        def f(x):
            return x.graph.tensor(np.zeros(()))
        assert finite_diff_check(f, np.ones(4), eps=1e-3) == 0.0

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda x: x.sum(), np.ones(3), eps=0.0)


class TestAdamW:
    def test_zero_grad_zero_decay_unchanged(self):
        p = ParamSet({"w": np.array([1.0, -2.0], dtype=np.float32)})
        adamw_step(p, {"w": np.zeros(2, dtype=np.float32)}, lr=0.1, weight_decay=0.0)
        assert np.array_equal(p["w"], np.array([1.0, -2.0], dtype=np.float32))
        assert p.step == 1

    def test_single_step_matches_hand_formula(self):
        lr, g_val, eps = 0.01, 0.3, 1e-8
        p = ParamSet({"w": np.array([0.5], dtype=np.float32)})
        adamw_step(p, {"w": np.array([g_val], dtype=np.float32)}, lr=lr, eps=eps)
        # bias corrections cancel the (1-beta) factors on the first step
        expected = 0.5 - lr * g_val / (np.sqrt(g_val**2) + eps)
        assert p["w"][0] == pytest.approx(expected, rel=1e-5)

    def test_decoupled_decay_scaling(self):
        p = ParamSet({"w": np.array([2.0], dtype=np.float32)})
        adamw_step(p, {"w": np.zeros(1, dtype=np.float32)}, lr=0.05, weight_decay=0.1)
        assert p["w"][0] == pytest.approx(2.0 * (1 - 0.05 * 0.1))

    def test_nonfinite_gradient_names_parameter(self):
        p = ParamSet({"w": np.ones(2, dtype=np.float32), "b": np.ones(1, dtype=np.float32)})
        with pytest.raises(NonFiniteError, match="'b'"):
            adamw_step(p, {"w": np.zeros(2), "b": np.array([np.inf])}, lr=0.1)
        assert np.array_equal(p["w"], np.ones(2, dtype=np.float32))  # untouched

    def test_shape_mismatch(self):
        p = ParamSet({"w": np.ones(2, dtype=np.float32)})
        with pytest.raises(ValueError):
            adamw_step(p, {"w": np.zeros(3)}, lr=0.1)
