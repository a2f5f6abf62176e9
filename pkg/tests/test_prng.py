import numpy as np
import pytest

from gridbench.prng import Stream, derive, mix64


def test_same_key_same_sequence():
    a = Stream(derive(1, "x", 2))
    b = Stream(derive(1, "x", 2))
    assert [a.u64() for _ in range(10)] == [b.u64() for _ in range(10)]


def test_scalar_and_vector_draws_agree():
    a = Stream(123)
    b = Stream(123)
    scalars = [a.u64() for _ in range(17)]
    assert scalars == list(b.u64s(17))


def test_scalar_and_vector_floats_agree():
    a = Stream(99)
    b = Stream(99)
    assert [a.float() for _ in range(9)] == list(b.floats(9))


def test_floats_in_unit_interval():
    vals = Stream(7).floats(10_000)
    assert vals.min() >= 0.0 and vals.max() < 1.0
    # crude uniformity check
    assert abs(vals.mean() - 0.5) < 0.02


def test_derive_field_sensitivity():
    keys = {
        derive(5, "a", 1), derive(5, "a", 2), derive(5, "b", 1),
        derive(6, "a", 1), derive(5, "a", 1, 0), derive(5, 1, "a"),
    }
    assert len(keys) == 6


def test_derive_rejects_bool_and_other_types():
    with pytest.raises(TypeError):
        derive(1, True)
    with pytest.raises(TypeError):
        derive(1, 3.5)


def test_below_range_and_determinism():
    s = Stream(11)
    vals = [Stream(derive(11, i)).below(7) for i in range(500)]
    assert set(vals) <= set(range(7))
    assert len(set(vals)) == 7
    with pytest.raises(ValueError):
        s.below(0)


def test_permutation_is_permutation():
    perm = Stream(3).permutation(50)
    assert sorted(perm) == list(range(50))
    assert list(perm) != list(range(50))
    assert list(Stream(3).permutation(50)) == list(perm)


def test_shuffled_preserves_multiset():
    items = ["a", "b", "c", "d", "e"]
    out = Stream(1).shuffled(items)
    assert sorted(out) == sorted(items)


def test_normals_moments():
    vals = Stream(21).normals(20_001)
    assert len(vals) == 20_001
    assert abs(vals.mean()) < 0.03
    assert abs(vals.std() - 1.0) < 0.03


def test_mix64_is_stable():
    # frozen reference values guard accidental constant changes
    assert mix64(0) == 0
    assert mix64(1) == 6238072747940578789
    assert mix64(0x9E3779B97F4A7C15) == 16294208416658607535


def test_splitmix_reference_vector():
    # canonical SplitMix64 outputs for seed 1234567
    s = Stream(1234567)
    assert [s.u64() for _ in range(3)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423,
    ]
