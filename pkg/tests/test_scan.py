import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scanmpc.scan import (
    LayerCounter,
    ParallelExecutor,
    SequentialExecutor,
    inclusive_scan,
    next_pow2,
    scan_depth,
    tree_scan,
)


def test_prefix_sums():
    assert inclusive_scan([1, 2, 3, 4], lambda a, b: a + b, 0) == [1, 3, 6, 10]


def test_single_element_identity_case():
    assert inclusive_scan([7], lambda a, b: a + b, 0) == [7]
    assert inclusive_scan([np.pi], max, -np.inf) == [np.pi]


def test_reverse_matrix_scan_matches_suffix_products(rng):
    mats = [rng.standard_normal((2, 2)) for _ in range(7)]
    out = inclusive_scan(mats, lambda a, b: a @ b, np.eye(2), direction="reverse")
    suffix = [mats[-1]]
    for M in reversed(mats[:-1]):
        suffix.insert(0, M @ suffix[0])
    for got, want in zip(out, suffix):
        assert np.abs(got - want).max() <= 1e-12


def test_empty_scan_rejected():
    with pytest.raises(ValueError, match="empty scan"):
        inclusive_scan([], lambda a, b: a + b, 0)


@pytest.mark.parametrize("length,expected", [(1, 0), (2, 2), (8, 6), (1000, 20)])
def test_scan_depth_formula(length, expected):
    assert scan_depth(length) == expected


@pytest.mark.parametrize("length", [1, 2, 3, 8, 17, 1000])
def test_instrumented_layer_count_matches_formula(length):
    counter = LayerCounter()
    inclusive_scan(list(range(length)), lambda a, b: a + b, 0, counter=counter)
    assert counter.layers == scan_depth(length)
    assert counter.layers == 2 * (next_pow2(length).bit_length() - 1)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(-10**9, 10**9), min_size=1, max_size=260),
       st.sampled_from(["forward", "reverse"]))
def test_integer_scans_equal_folds_exactly(values, direction):
    out = inclusive_scan(values, lambda a, b: a + b, 0, direction=direction)
    if direction == "forward":
        expect = np.cumsum(values).tolist()
    else:
        expect = np.cumsum(values[::-1])[::-1].tolist()
    assert out == expect


def test_long_integer_scan_exact():
    rng = np.random.default_rng(5)
    values = rng.integers(-1000, 1000, size=2048).tolist()
    out = inclusive_scan(values, lambda a, b: a + b, 0)
    assert out == np.cumsum(values).tolist()


@pytest.mark.parametrize("direction", ["forward", "reverse"])
def test_sequential_parallel_bitwise_identical(rng, direction):
    batch = (rng.standard_normal((37, 3, 3)), rng.standard_normal((37, 3)))

    def kernel(left, right):
        return (right[0] @ left[0], (right[0] @ left[1][..., None])[..., 0] + right[1]), ()

    def identity(count):
        eye = np.zeros((count, 3, 3))
        eye[...] = np.eye(3)
        return (eye, np.zeros((count, 3)))

    outs = {}
    for name, ex in (("seq", SequentialExecutor()),
                     ("par", ParallelExecutor(threads=4, chunk_threshold=4))):
        out, _ = tree_scan(batch, kernel, identity, direction=direction, executor=ex)
        outs[name] = out
    for a, b in zip(outs["seq"], outs["par"]):
        assert (a == b).all()


def test_record_and_replay_same_tree(rng):
    mats = rng.standard_normal((11, 2, 2))
    vecs = rng.standard_normal((11, 2))

    def kernel(left, right):
        out_m = right[0] @ left[0]
        out_v = (right[0] @ left[1][..., None])[..., 0] + right[1]
        return (out_m, out_v), (right[0],)

    def replay(left, right, aux):
        return ((aux[0] @ left[0][..., None])[..., 0] + right[0],), ()

    def identity(count):
        eye = np.zeros((count, 2, 2))
        eye[...] = np.eye(2)
        return (eye, np.zeros((count, 2)))

    full, aux = tree_scan((mats, vecs), kernel, identity, record=True)
    rep, _ = tree_scan((vecs,), replay, lambda c: (np.zeros((c, 2)),), replay_aux=aux)
    assert (full[1] == rep[0]).all()
