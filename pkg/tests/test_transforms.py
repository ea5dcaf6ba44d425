import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equal_seg import transforms as T
from equal_seg.numerics import IGNORE
from equal_seg.transforms import TransformKind

ALL = [TransformKind.parse(s) for s in ("hflip", "vflip", "rot90", "rot180", "translate:3,-2", "translate:0,1")]
GRID = np.array([[1, 2], [3, 4]])


def test_hflip_example():
    assert T.apply(T.HFLIP, GRID).tolist() == [[2, 1], [4, 3]]


def test_translate_wraps():
    assert T.apply(TransformKind("translate", 1, 0), GRID).tolist() == [[2, 1], [4, 3]]


def test_canonical_names_round_trip():
    for name in ("hflip", "vflip", "rot90", "rot180", "translate:2,-5"):
        assert str(TransformKind.parse(name)) == name


@pytest.mark.parametrize("bad", ["shear", "translate", "hflip:1,0"])
def test_bad_names(bad):
    with pytest.raises(ValueError):
        TransformKind.parse(bad)


def test_rot90_needs_square():
    with pytest.raises(ValueError):
        T.apply(TransformKind("rot90"), np.zeros((2, 3, 4)))


@given(seed=st.integers(0, 2**31), size=st.integers(1, 6))
def test_rot180_is_hflip_then_vflip(seed, size):
    t = np.random.default_rng(seed).normal(size=(2, size, size + 1))
    assert np.array_equal(T.apply(TransformKind("rot180"), t),
                          T.apply(TransformKind("vflip"), T.apply(T.HFLIP, t)))


@pytest.mark.parametrize("kind", ALL, ids=str)
@given(seed=st.integers(0, 2**31), size=st.integers(1, 7))
def test_invert_apply_is_identity(kind, seed, size):
    t = np.random.default_rng(seed).normal(size=(3, size, size))
    assert np.array_equal(T.invert(kind, T.apply(kind, t)), t)
    assert np.array_equal(T.apply(kind, T.invert(kind, t)), t)


@pytest.mark.parametrize("name", ["hflip", "vflip", "rot180"])
def test_involutions(name):
    t = np.random.default_rng(0).normal(size=(4, 5, 5))
    k = TransformKind.parse(name)
    assert np.array_equal(T.apply(k, T.apply(k, t)), t)


def test_rot90_exhaustive_small_grids():
    kind = TransformKind("rot90")
    for n in range(1, 6):
        t = np.arange(n * n).reshape(n, n)
        assert np.array_equal(T.invert(kind, T.apply(kind, t)), t)
        # four quarter turns come back home
        r = t
        for _ in range(4):
            r = T.apply(kind, r)
        assert np.array_equal(r, t)


def test_labels_pixel_moves_to_mirror_column():
    y = np.zeros((3, 4), dtype=np.int64)
    y[1, 0] = 2
    out = T.apply_to_labels(T.HFLIP, y)
    assert out[1, 3] == 2 and out.sum() == 2


@pytest.mark.parametrize("kind", ALL, ids=str)
@given(seed=st.integers(0, 2**31))
def test_labels_multiset_preserved(kind, seed):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, size=(5, 5))
    y[rng.random((5, 5)) < 0.3] = IGNORE
    out = T.apply_to_labels(kind, y)
    assert sorted(out.ravel().tolist()) == sorted(y.ravel().tolist())
    assert (out == IGNORE).sum() == (y == IGNORE).sum()


def test_channels_untouched():
    t = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
    out = T.apply(T.HFLIP, t)
    assert out.shape == t.shape and np.array_equal(out[:, 1], t[:, 1, :, ::-1])
