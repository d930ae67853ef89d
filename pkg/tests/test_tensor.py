import math

import numpy as np
import pytest

from ctxbias import checkpoint
from ctxbias import tensor as tn
from ctxbias.tensor import DimensionError, NumericError, Tensor

from conftest import assert_grad_close, numeric_grad


def leaf(a):
    return Tensor(a, requires_grad=True)


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_column(self):
        out = tn.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            tn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    @pytest.mark.parametrize("seed", range(20))
    def test_grad_vs_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        tn.sum_all(tn.matmul(a, b)).backward()
        f = lambda: tn.matmul(Tensor(a.data), Tensor(b.data)).data.sum()
        assert_grad_close(a.grad, numeric_grad(f, a.data))
        assert_grad_close(b.grad, numeric_grad(f, b.data))


class TestSoftmax:
    def test_single_column_is_one(self, rng):
        out = tn.softmax_rows(Tensor(rng.normal(size=(5, 1)) * 100), 1.0)
        np.testing.assert_array_equal(out.data, np.ones((5, 1)))

    def test_symmetric_row(self):
        np.testing.assert_allclose(tn.softmax_rows(Tensor([[0.0, 0.0]]), 1.0).data, [[0.5, 0.5]])

    def test_against_direct_exp(self):
        out = tn.softmax_rows(Tensor([[1.0, 2.0, 3.0]]), 1.0).data[0]
        z = sum(math.exp(v) for v in (1, 2, 3))
        np.testing.assert_allclose(out, [math.exp(v) / z for v in (1, 2, 3)], rtol=0, atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = tn.softmax_rows(Tensor(rng.normal(size=(50, 7)) * 10), 2.5).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out > 0) and np.all(out <= 1)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            tn.softmax_rows(Tensor([[np.nan, 1.0]]), 1.0)

    def test_log_softmax_symmetric(self):
        np.testing.assert_allclose(tn.log_softmax_rows(Tensor([[0.0, 0.0]])).data, [[-math.log(2)] * 2])

    def test_log_softmax_no_overflow(self):
        out = tn.log_softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert abs(out[0, 0]) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_log_softmax_matches_softmax(self, seed):
        x = Tensor(np.random.default_rng(seed).normal(size=(6, 5)) * 3)
        np.testing.assert_allclose(np.exp(tn.log_softmax_rows(x).data), tn.softmax_rows(x, 1.0).data, atol=1e-12)
        np.testing.assert_allclose(np.exp(tn.log_softmax_rows(x).data).sum(axis=1), 1.0, atol=1e-12)


class TestElementwise:
    def test_identities(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        np.testing.assert_array_equal(tn.elementwise(x, Tensor(np.zeros((3, 3))), "add").data, x.data)
        np.testing.assert_array_equal(tn.elementwise(x, Tensor(np.ones((3, 3))), "mul").data, x.data)

    def test_add_values(self):
        np.testing.assert_array_equal(tn.add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            tn.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_nonlinearity_values(self):
        assert tn.nonlinearity(Tensor([0.0]), "sigmoid").data[0] == 0.5
        assert tn.nonlinearity(Tensor([0.0]), "tanh").data[0] == 0.0


# every differentiable primitive, as scalar reductions of random inputs
def _cases():
    w = np.random.default_rng(99).normal(size=(4, 3))
    return {
        "softmax": lambda x: tn.softmax_rows(x, 1.7),
        "log_softmax": lambda x: tn.log_softmax_rows(x),
        "sigmoid": tn.sigmoid,
        "tanh": tn.tanh,
        "mul_self": lambda x: tn.mul(x, x),
        "add_self": lambda x: tn.add(x, tn.tanh(x)),
        "scale": lambda x: tn.scale(x, -2.5),
        "transpose": lambda x: tn.matmul(tn.transpose(x), tn.tanh(x)),
        "affine": lambda x: tn.affine(tn.transpose(x), Tensor(w), Tensor(np.ones((1, 3)))),
        "take_rows": lambda x: tn.take_rows(x, [0, 2, 2, 3]),
        "pick": lambda x: tn.pick(x, [0, 1, 3], [2, 2, 0]),
        "slice_concat": lambda x: tn.concat_cols([tn.slice_cols(x, 2, 4), tn.slice_cols(x, 0, 1)]),
        "concat_rows": lambda x: tn.concat_rows([x, tn.sigmoid(x)]),
        "reshape": lambda x: tn.log_softmax_rows(tn.reshape(x, (2, 10))),
        "log": lambda x: tn.log(tn.sigmoid(x)),
        "add_n": lambda x: tn.add_n([x, tn.tanh(x), x]),
    }


@pytest.mark.parametrize("name", sorted(_cases()))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(name, seed):
    op = _cases()[name]
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(4, 5)))
    weights = rng.normal(size=op(Tensor(x.data)).shape)
    tn.sum_all(tn.mul(op(x), Tensor(weights))).backward()
    f = lambda: float((op(Tensor(x.data)).data * weights).sum())
    assert_grad_close(x.grad, numeric_grad(f, x.data))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.normal(size=(3, 2)))
        tn.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square(self, rng):
        x = leaf(rng.normal(size=(3, 2)))
        tn.sum_all(tn.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_accumulates_without_reset(self, rng):
        x = leaf(rng.normal(size=(2, 2)))
        tn.sum_all(x).backward()
        tn.sum_all(x).backward()
        np.testing.assert_array_equal(x.grad, 2 * np.ones((2, 2)))

    def test_non_scalar_root(self):
        with pytest.raises(DimensionError):
            tn.backward(leaf(np.zeros((2, 2))))

    def test_shared_subexpression_equals_expanded_graph(self, rng):
        data = rng.normal(size=(3, 3))
        x = leaf(data)
        s = tn.tanh(x)
        tn.sum_all(tn.mul(s, s)).backward()
        shared = x.grad.copy()
        y = leaf(data)
        tn.sum_all(tn.mul(tn.tanh(y), tn.tanh(y))).backward()
        np.testing.assert_allclose(shared, y.grad, atol=1e-14)

    def test_tape_visits_each_node_once(self, rng):
        x = leaf(rng.normal(size=(2, 2)))
        a = tn.tanh(x)
        root = tn.sum_all(tn.add(tn.mul(a, a), a))
        tape = tn.GradTape(root)
        assert len({id(n) for n in tape.nodes}) == len(tape.nodes)
        assert tape.nodes[0] is root and tape.nodes[-1] is x

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng.normal(size=(2, 2)))
        with tn.no_grad():
            y = tn.tanh(x)
        assert not y.requires_grad


class TestAdam:
    def test_minimises_quadratic(self):
        x = leaf([[3.0, -2.0]])
        opt = tn.Adam({"x": x}, lr=0.1)
        for _ in range(500):
            opt.zero_grad()
            tn.sum_all(tn.mul(x, x)).backward()
            opt.step()
        assert np.abs(x.data).max() < 1e-2


def test_uniform_init_bounds():
    p = tn.init_uniform(np.random.default_rng(0), (50, 40), fan_in=16)
    assert np.all(np.abs(p.data) <= 0.25)
    again = tn.init_uniform(np.random.default_rng(0), (50, 40), fan_in=16)
    np.testing.assert_array_equal(p.data, again.data)


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    arrays = {"a.w": rng.normal(size=(3, 4)), "b": np.array([np.pi]), "scalar": np.array(2.5),
              "tiny": np.array([[5e-324, -0.0, np.finfo(float).max]])}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, arrays)
    back = checkpoint.load(path)
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == np.asarray(arrays[k], dtype="<f8").tobytes()
    assert checkpoint.dumps(back) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"nope")
