"""Tests for the reverse-mode engine: op semantics, gradients vs central
finite differences in float64, and tape behavior."""

import numpy as np
import pytest

import hellm.autodiff as ad
from hellm.autodiff import Tape, Tensor
from hellm.errors import ContractError


def t64(rng, *shape, scale=1.0):
    return Tensor(rng.normal(size=shape, scale=scale).astype(np.float64))


def away_from_zero(arr, margin=0.05):
    return arr + margin * np.sign(arr)


def well_separated(rng, shape):
    """Values with pairwise gaps far above the FD step, so argmax-based
    ops see no tie flips under the probe."""
    n = int(np.prod(shape))
    vals = np.arange(n, dtype=np.float64) * 0.37
    return Tensor(rng.permutation(vals).reshape(shape))


def scalarize(y):
    """Project an op output to a scalar with a fixed non-uniform
    weighting; deterministic so FD probes see the same function."""
    w = np.cos(np.arange(y.data.size, dtype=np.float64) * 0.7) + 0.1
    return ad.reduce_sum(ad.mul(y, Tensor(w.reshape(y.shape))))


# ---------------------------------------------------------------------------
# Forward semantics


def test_softmax_uniform_logits():
    for k in (2, 5, 9):
        p = ad.softmax(Tensor(np.zeros((3, k))), axis=-1)
        assert np.allclose(p.data, 1.0 / k)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(0)
    p = ad.softmax(t64(rng, 6, 7), axis=-1)
    assert np.allclose(p.data.sum(axis=-1), 1.0, atol=1e-6)
    mask = np.array([True, True, True, False, True, False, False])
    pm = ad.softmax(t64(rng, 6, 7), axis=-1, mask=mask)
    assert np.allclose(pm.data.sum(axis=-1), 1.0, atol=1e-6)
    assert (pm.data[:, ~mask] == 0.0).all()


def test_softmax_fully_masked_row_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractError, match="masked everywhere"):
        ad.softmax(t64(rng, 2, 3), axis=-1, mask=np.zeros(3, dtype=bool))


def test_layer_norm_standardized_input_passes_through():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 8))
    x = (x - x.mean(axis=-1, keepdims=True)) / x.std(axis=-1, keepdims=True)
    out = ad.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.allclose(out.data, x, atol=1e-6)


def test_gelu_tanh_relu_sigmoid_at_zero():
    z = Tensor(np.zeros(3))
    assert np.all(ad.gelu(z).data == 0.0)
    assert np.all(ad.tanh(z).data == 0.0)
    assert np.all(ad.relu(z).data == 0.0)
    assert np.allclose(ad.sigmoid(z).data, 0.5)


def test_dropout_eval_mode_is_identity():
    rng = np.random.default_rng(2)
    x = t64(rng, 5, 5)
    assert np.array_equal(ad.dropout(x, 0.5, rng=None).data, x.data)
    assert np.array_equal(ad.dropout(x, 0.0, rng=rng).data, x.data)


def test_dropout_train_mode_masks_and_scales():
    rng = np.random.default_rng(3)
    x = Tensor(np.ones((40, 40)))
    y = ad.dropout(x, 0.25, rng=rng)
    kept = y.data != 0.0
    assert np.allclose(y.data[kept], 1.0 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.03


def test_cross_entropy_nonnegative_and_ignores_marked_rows():
    rng = np.random.default_rng(4)
    logits = t64(rng, 6, 5)
    targets = np.array([0, 1, 2, 3, 4, 0])
    full = ad.cross_entropy(logits, targets)
    assert full.item() >= 0.0
    # ignoring half the rows equals the loss over the kept rows alone
    masked = ad.cross_entropy(logits, np.array([0, 1, 2, -1, -1, -1]))
    kept = ad.cross_entropy(
        Tensor(logits.data[:3].copy()), np.array([0, 1, 2])
    )
    assert np.isclose(masked.item(), kept.item(), rtol=1e-6)


def test_cross_entropy_all_ignored_rejected():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ContractError, match="ignore"):
        ad.cross_entropy(logits, np.array([-1, -1]))


def test_shape_errors_name_op_and_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ContractError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ContractError, match="add"):
        ad.add(a, b)
    with pytest.raises(ContractError, match="mul"):
        ad.mul(a, b)


# ---------------------------------------------------------------------------
# Backward semantics


def test_square_gradient():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(ad.reduce_sum(ad.mul(x, x)))
    assert np.allclose(x.grad, [6.0])


def test_cross_entropy_uniform_gradient_closed_form():
    k, c = 5, 2
    logits = Tensor(np.zeros((1, k)), requires_grad=True)
    with Tape() as tape:
        loss = ad.cross_entropy(logits, np.array([c]))
        tape.backward(loss)
    expected = np.full((1, k), 1.0 / k)
    expected[0, c] -= 1.0
    assert np.allclose(logits.grad, expected, atol=1e-7)
    assert np.isclose(loss.item(), np.log(k), rtol=1e-6)


def test_non_scalar_loss_rejected():
    x = Tensor(np.zeros((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ContractError, match="scalar"):
            tape.backward(y)


def test_leaf_without_path_gets_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        _dead_end = ad.tanh(unused)
        loss = ad.reduce_sum(ad.mul(x, x))
        tape.backward(loss)
    assert np.array_equal(unused.grad, np.zeros(3))
    assert np.allclose(x.grad, 2.0)


def test_gradients_accumulate_across_tapes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            tape.backward(ad.reduce_sum(ad.mul(x, x)))
    assert np.allclose(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None


def test_embedding_duplicate_ids_accumulate():
    table = Tensor(np.zeros((4, 3)), requires_grad=True)
    with Tape() as tape:
        out = ad.embedding_lookup(table, np.array([1, 1, 2]))
        tape.backward(ad.reduce_sum(out))
    expected = np.zeros((4, 3))
    expected[1] = 2.0
    expected[2] = 1.0
    assert np.array_equal(table.grad, expected)


def test_embedding_out_of_range_rejected():
    table = Tensor(np.zeros((4, 3)))
    with pytest.raises(ContractError, match="out of range"):
        ad.embedding_lookup(table, np.array([4]))


def test_deterministic_bitwise_repeat():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor(rng.normal(size=(6, 6)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.normal(size=(6, 4)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            h = ad.gelu(ad.matmul(ad.dropout(x, 0.3, np.random.default_rng(7)), w))
            loss = ad.reduce_mean(ad.mul(h, h))
            tape.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# Finite-difference gradient suite: every op, 5 seeds, 5 random shapes


SEEDS = (11, 22, 33, 44, 55)


def rand_dims(rng, n, lo=1, hi=7):
    return tuple(int(rng.integers(lo, hi)) for _ in range(n))


def op_cases(rng):
    """Yield (name, f, x) pairs covering the whole op set; f(x) is scalar
    and deterministic with all other tensors held fixed."""
    m, k, n = rand_dims(rng, 3, 2, 7)

    a, b = t64(rng, m, k), t64(rng, k, n)
    yield "matmul/left", lambda x: scalarize(ad.matmul(x, b)), a
    yield "matmul/right", lambda x: scalarize(ad.matmul(a, x)), b

    same = t64(rng, m, n)
    yield "add/same", lambda x: scalarize(ad.add(x, same)), t64(rng, m, n)
    bias = t64(rng, n)
    yield "add/bias-lhs", lambda x: scalarize(ad.add(x, bias)), t64(rng, m, n)
    lhs = t64(rng, m, n)
    yield "add/bias-rhs", lambda x: scalarize(ad.add(lhs, x)), t64(rng, n)

    other = t64(rng, m, n)
    yield "mul", lambda x: scalarize(ad.mul(x, other)), t64(rng, m, n)
    yield "scale", lambda x: scalarize(ad.scale(x, -1.7)), t64(rng, m, n)

    left, right = t64(rng, m, k), t64(rng, m, k + 1)
    yield (
        "concat",
        lambda x: scalarize(ad.concat([left, x, right], axis=1)),
        t64(rng, m, 3),
    )
    yield (
        "slice_axis",
        lambda x: scalarize(ad.slice_axis(x, 1, 1, k + 1)),
        t64(rng, m, k + 2),
    )
    yield (
        "transpose",
        lambda x: scalarize(ad.transpose(x, (1, 0, 2))),
        t64(rng, m, k, n),
    )

    ids = rng.integers(0, m, size=(k, 3))
    yield (
        "embedding_lookup",
        lambda x: scalarize(ad.embedding_lookup(x, ids)),
        t64(rng, m, n),
    )

    yield "softmax", lambda x: scalarize(ad.softmax(x, axis=-1)), t64(rng, m, n + 1)
    sm_mask = np.ones(n + 2, dtype=bool)
    sm_mask[-2:] = False
    yield (
        "softmax/masked",
        lambda x: scalarize(ad.softmax(x, axis=-1, mask=sm_mask)),
        t64(rng, m, n + 2),
    )

    gain, bias2 = t64(rng, n), t64(rng, n)
    lx = t64(rng, m, n)
    yield (
        "layer_norm/x",
        lambda x: scalarize(ad.layer_norm(x, gain, bias2)),
        t64(rng, m, n),
    )
    yield (
        "layer_norm/gain",
        lambda x: scalarize(ad.layer_norm(lx, x, bias2)),
        t64(rng, n),
    )
    yield (
        "layer_norm/bias",
        lambda x: scalarize(ad.layer_norm(lx, gain, x)),
        t64(rng, n),
    )

    yield "gelu", lambda x: scalarize(ad.gelu(x)), t64(rng, m, n)
    yield "tanh", lambda x: scalarize(ad.tanh(x)), t64(rng, m, n)
    yield "sigmoid", lambda x: scalarize(ad.sigmoid(x)), t64(rng, m, n)
    relu_in = Tensor(away_from_zero(rng.normal(size=(m, n))))
    yield "relu", lambda x: scalarize(ad.relu(x)), relu_in

    drop_seed = int(rng.integers(1 << 30))
    yield (
        "dropout",
        lambda x: scalarize(
            ad.dropout(x, 0.4, np.random.default_rng(drop_seed))
        ),
        t64(rng, m, n),
    )

    targets = rng.integers(0, n, size=m + 1)
    targets[0] = -1
    yield (
        "cross_entropy",
        lambda x: ad.cross_entropy(x, targets),
        t64(rng, m + 1, n),
    )

    yield "reduce_sum/all", lambda x: ad.reduce_sum(x), t64(rng, m, n)
    yield (
        "reduce_sum/axis",
        lambda x: scalarize(ad.reduce_sum(x, axis=0)),
        t64(rng, m, n),
    )
    yield "reduce_mean/all", lambda x: ad.reduce_mean(x), t64(rng, m, n)
    yield (
        "reduce_mean/axis",
        lambda x: scalarize(ad.reduce_mean(x, axis=1)),
        t64(rng, m, n),
    )
    yield (
        "reduce_max",
        lambda x: scalarize(ad.reduce_max(x, axis=1)),
        well_separated(rng, (m, n)),
    )


@pytest.mark.parametrize("seed", SEEDS)
def test_every_op_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, f, x in op_cases(rng):
        report = ad.finite_difference_check(f, x, step=1e-4, tolerance=1e-4)
        assert report.passed, f"{name} (seed {seed}): {report}"


def test_linear_function_fd_is_tight():
    rng = np.random.default_rng(6)
    A = t64(rng, 5, 4)

    def f(x):
        return ad.reduce_sum(ad.matmul(A, x))

    report = ad.finite_difference_check(f, t64(rng, 4, 3), tolerance=1e-6)
    assert report.passed


def test_three_layer_mlp_fd():
    rng = np.random.default_rng(8)
    w1, w2, w3 = t64(rng, 6, 8), t64(rng, 8, 8), t64(rng, 8, 2)
    b1, b2, b3 = t64(rng, 8), t64(rng, 8), t64(rng, 2)

    def f(x):
        h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
        h = ad.tanh(ad.add(ad.matmul(h, w2), b2))
        return ad.reduce_mean(ad.add(ad.matmul(h, w3), b3))

    report = ad.finite_difference_check(f, t64(rng, 4, 6))
    assert report.passed
    assert report.max_rel_error < 1e-4


def test_corrupted_backward_rule_fails_check():
    def bad_tanh(a):
        y = np.tanh(a.data)
        out = Tensor(y)
        tape = ad.current_tape()
        if tape is not None:
            # wrong by 5 percent on purpose
            tape.record(out, (a,), lambda g: (g * (1.0 - y * y) * 1.05,))
        return out

    rng = np.random.default_rng(9)

    def f(x):
        return ad.reduce_sum(bad_tanh(x))

    report = ad.finite_difference_check(f, t64(rng, 4, 4))
    assert not report.passed
    assert report.max_rel_error > 1e-3
