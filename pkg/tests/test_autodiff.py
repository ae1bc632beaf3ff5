import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reno import autodiff as ad
from reno.autodiff import Tape, Tensor, finite_diff_check
from reno.criteria import chi_norm_logpdf


def grad_of(f, x):
    with Tape() as tape:
        leaf = tape.watch(x)
        y = f(leaf)
    return tape.backward(y)[leaf.node].data


# -- forward values ----------------------------------------------------------


def test_sum_reduce():
    assert ad.total(Tensor([1.0, 2.0, 3.0])).item() == 6.0


def test_norm_of_zero_vector_and_its_gradient():
    assert ad.norm(Tensor(np.zeros(4))).item() == 0.0
    np.testing.assert_array_equal(grad_of(ad.norm, np.zeros(4)), np.zeros(4))


def test_matvec_identity():
    out = ad.matvec(np.eye(2), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [3.0, 4.0])


def test_ops_match_numpy(rng):
    a = rng.normal(size=5)
    b = rng.normal(size=5)
    m = rng.normal(size=(3, 5))
    A, B = Tensor(a), Tensor(b)
    np.testing.assert_array_equal((A + B).data, a + b)
    np.testing.assert_array_equal((A - B).data, a - b)
    np.testing.assert_array_equal((A * B).data, a * b)
    np.testing.assert_array_equal((A / B).data, a / b)
    np.testing.assert_array_equal(ad.scale(A, 2.5).data, a * 2.5)
    np.testing.assert_array_equal(ad.matvec(m, A).data, m @ a)
    np.testing.assert_array_equal(ad.tanh(A).data, np.tanh(a))
    np.testing.assert_array_equal(ad.relu(A).data, np.maximum(a, 0))
    np.testing.assert_allclose(ad.sigmoid(A).data, 1 / (1 + np.exp(-a)), rtol=1e-15)
    np.testing.assert_array_equal(ad.log(ad.exp(A)).data, np.log(np.exp(a)))
    assert ad.mean(A).item() == pytest.approx(a.mean(), rel=1e-15)
    assert ad.sq_norm(A).item() == pytest.approx(a @ a, rel=1e-15)


def test_sigmoid_of_zero_is_exactly_half():
    assert ad.sigmoid(Tensor(0.0)).item() == 0.5


def test_channel_and_reshape():
    img = np.arange(12.0).reshape(2, 2, 3)
    np.testing.assert_array_equal(ad.channel(Tensor(img), 1).data, img[:, :, 1])
    assert ad.reshape(Tensor(img), (12,)).shape == (12,)


# -- errors ------------------------------------------------------------------


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as info:
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    assert info.value.op == "add"
    assert info.value.shape_a == (3,) and info.value.shape_b == (4,)
    assert "(3,)" in str(info.value) and "(4,)" in str(info.value)


def test_matvec_shape_error():
    with pytest.raises(ad.ShapeError, match="matvec"):
        ad.matvec(np.ones((2, 3)), Tensor(np.ones(2)))


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([-1.0]))


def test_non_finite_output_is_an_error():
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))
    with pytest.raises(ad.NonFiniteError):
        Tensor([np.nan])


def test_backward_rejects_non_scalar_root():
    with Tape() as tape:
        x = tape.watch([1.0, 2.0])
        y = ad.tanh(x)
    with pytest.raises(ad.AutodiffError, match="scalar"):
        tape.backward(y)


def test_backward_rejects_root_not_on_tape():
    with Tape() as tape:
        tape.watch([1.0])
    with pytest.raises(ad.AutodiffError):
        tape.backward(Tensor(1.0))
    with Tape() as other:
        z = ad.total(other.watch([1.0]))
    with pytest.raises(ad.AutodiffError):
        tape.backward(z)


def test_mixing_tapes_is_an_error():
    with Tape() as t1:
        a = t1.watch([1.0])
    with Tape() as t2:
        b = t2.watch([1.0])
        with pytest.raises(ad.AutodiffError):
            ad.add(a, b)


# -- backward examples -------------------------------------------------------


def test_grad_sq_norm():
    np.testing.assert_array_equal(grad_of(ad.sq_norm, [1.0, -2.0, 3.0]), [2.0, -4.0, 6.0])


def test_grad_sum_tanh_at_zero():
    np.testing.assert_array_equal(grad_of(lambda x: ad.total(ad.tanh(x)), [0.0]), [1.0])


def test_grad_chi_norm_logpdf_hand_derived():
    # dK/de = e * ((d - 1) / ||e||^2 - 1); at e = 1_4, ||e|| = 2: 1 * (3/4 - 1)
    g = grad_of(chi_norm_logpdf, np.ones(4))
    np.testing.assert_allclose(g, [-0.25] * 4, atol=1e-15)
    assert finite_diff_check(chi_norm_logpdf, np.ones(4)) < 1e-8


def test_unreached_leaf_gets_zero_gradient():
    with Tape() as tape:
        x = tape.watch([1.0, 2.0])
        unused = tape.watch([5.0])
        y = ad.sq_norm(x)
    grads = tape.backward(y)
    np.testing.assert_array_equal(grads[unused.node].data, [0.0])


def test_module_level_backward():
    with Tape() as tape:
        x = tape.watch([3.0])
        y = ad.sq_norm(x)
    np.testing.assert_array_equal(ad.backward(y)[x.node].data, [6.0])


# -- finite-difference checker -----------------------------------------------


def test_fd_check_quadratic(rng):
    assert finite_diff_check(ad.sq_norm, rng.normal(size=8), 1e-5) < 1e-8


def test_fd_check_chi_norm(rng):
    assert finite_diff_check(chi_norm_logpdf, rng.normal(size=16), 1e-5) < 1e-6


def test_fd_check_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(ad.sq_norm, [1.0], 0.0)


def test_fd_check_non_finite_function():
    with pytest.raises(ad.NonFiniteError):
        # finite at x, overflows at x + h
        finite_diff_check(lambda x: ad.total(ad.exp(ad.scale(x, 1e3))), [0.7097], 1e-3)


def test_fd_check_reports_wrong_gradient():
    # relu at exactly 0 has a kink; a deliberate mismatch shows up as a large error
    assert finite_diff_check(lambda x: ad.total(ad.relu(x)), [0.0], 1e-5) > 0.4


# -- per-primitive gradient checks on random inputs --------------------------

_M = np.random.default_rng(99).normal(size=(4, 6))
_W = np.random.default_rng(98).normal(size=6)

PRIMITIVES = {
    "add": lambda x: ad.total(ad.mul(ad.add(x, _W), _W)),
    "add_scalar": lambda x: ad.sq_norm(ad.add(x, 0.3)),
    "sub": lambda x: ad.total(ad.mul(ad.sub(_W, x), _W)),
    "mul": lambda x: ad.total(ad.mul(x, x)),
    "scale": lambda x: ad.total(ad.mul(ad.scale(x, -1.7), _W)),
    "div": lambda x: ad.total(ad.div(_W, ad.add(ad.sq_norm(x), 1.0))),
    "neg": lambda x: ad.total(ad.mul(ad.neg(x), _W)),
    "matvec": lambda x: ad.sq_norm(ad.matvec(_M, x)),
    "tanh": lambda x: ad.total(ad.mul(ad.tanh(x), _W)),
    "relu": lambda x: ad.total(ad.mul(ad.relu(ad.add(x, 0.05)), _W)),
    "sigmoid": lambda x: ad.total(ad.mul(ad.sigmoid(x), _W)),
    "log": lambda x: ad.total(ad.log(ad.add(ad.mul(x, x), 0.5))),
    "exp": lambda x: ad.total(ad.mul(ad.exp(ad.scale(x, 0.5)), _W)),
    "sum": lambda x: ad.total(ad.tanh(x)),
    "mean": lambda x: ad.mean(ad.mul(x, _W)),
    "weighted_sum": lambda x: ad.weighted_sum([ad.sq_norm(x), ad.total(ad.tanh(x)), 0.5], [0.3, -2.0, 1.0]),
    "sq_norm": ad.sq_norm,
    "norm": ad.norm,
    "channel": lambda x: ad.total(ad.mul(ad.channel(ad.reshape(x, (1, 2, 3)), 2), Tensor([[1.0, -2.0]]))),
    "reshape": lambda x: ad.sq_norm(ad.matvec(_M, ad.reshape(ad.reshape(ad.tanh(x), (2, 3)), (6,)))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_on_random_inputs(name):
    f = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=6)
        if name == "relu":
            # keep clear of the kink so central differences are valid
            x = np.where(np.abs(x + 0.05) < 1e-3, x + 0.01, x)
        worst = max(worst, finite_diff_check(f, x, 1e-5))
    assert worst < 1e-5, f"{name}: {worst}"


# -- structural properties ---------------------------------------------------


@given(arrays(np.float64, 5, elements=st.floats(-3, 3)))
@settings(max_examples=50, deadline=None)
def test_fan_out_accumulates_exactly(x):
    def g(t):
        return ad.total(ad.mul(ad.tanh(t), ad.sigmoid(t)))

    np.testing.assert_array_equal(grad_of(lambda t: ad.add(g(t), g(t)), x), 2.0 * grad_of(g, x))


@given(arrays(np.float64, 6, elements=st.floats(-2, 2)))
@settings(max_examples=30, deadline=None)
def test_tape_is_deterministic(x):
    f = PRIMITIVES["matvec"]

    def run():
        with Tape() as tape:
            leaf = tape.watch(x)
            y = f(leaf)
        return y.data.tobytes(), tape.backward(y)[leaf.node].data.tobytes()

    assert run() == run()


def test_backward_visits_nodes_in_reverse_order():
    visited = []
    with Tape() as tape:
        x = tape.watch([0.5, -0.5])
        y = ad.total(ad.tanh(ad.scale(x, 2.0)))
    for i, node in enumerate(tape.nodes):
        if node.vjp is not None:
            inner = node.vjp
            object.__setattr__(node, "vjp", lambda g, i=i, inner=inner: (visited.append(i), inner(g))[1])
    tape.backward(y)
    assert visited == sorted(visited, reverse=True)
    assert len(visited) == len(set(visited))


def test_inputs_are_never_mutated(rng):
    a = rng.normal(size=6)
    snapshot = a.copy()
    with Tape() as tape:
        x = tape.watch(a)
        for f in PRIMITIVES.values():
            tape.backward(f(x))
    np.testing.assert_array_equal(a, snapshot)
    assert not x.data.flags.writeable
    with pytest.raises(ValueError):
        x.data[0] = 1.0


def test_tape_nodes_are_topologically_ordered(small_mlp, prompt):
    from reno.generators import generate

    with Tape() as tape:
        e = tape.watch(np.ones(16))
        ad.mean(generate(small_mlp, e, prompt))
    for i, node in enumerate(tape.nodes):
        assert all(j is None or j < i for j in node.inputs)


def test_tensor_usable_from_another_thread():
    import threading

    with Tape() as tape:
        x = tape.watch([1.0, 2.0])
        y = ad.sq_norm(x)
    out = {}
    th = threading.Thread(target=lambda: out.update(g=tape.backward(y)[x.node].data))
    th.start()
    th.join()
    np.testing.assert_array_equal(out["g"], [2.0, 4.0])
    assert ad.active_tape() is None
