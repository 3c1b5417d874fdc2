import pytest
from hypothesis import given
from hypothesis import strategies as st

from doqlab.bench.stats import BoxStats, EmptySamples, summarize


def test_five_points():
    s = summarize([1, 2, 3, 4, 5])
    assert (s.minimum, s.q1, s.median, s.q3, s.maximum) == (1, 2, 3, 4, 5)
    assert s.mean == 3 and s.outliers == ()


def test_outlier_beyond_fence():
    # q1 = q3 = 1, so both fences sit at 1
    s = summarize([1, 1, 1, 1, 100])
    assert s.outliers == (100.0,)
    assert s.whisker_high == 1 and s.maximum == 100


def test_single_sample():
    s = summarize([7])
    assert {s.minimum, s.q1, s.median, s.q3, s.maximum, s.mean} == {7}


def test_linear_interpolation_between_ranks():
    # rank 0.25 * (4 - 1) = 0.75 between 10 and 20
    s = summarize([10, 20, 30, 40])
    assert s.q1 == pytest.approx(17.5) and s.median == 25 and s.q3 == pytest.approx(32.5)


def test_empty():
    with pytest.raises(EmptySamples):
        summarize([])


def test_dict_round_trip():
    s = summarize([3, 1, 4, 1, 5, 9, 2, 6, 50])
    assert BoxStats.from_dict(s.to_dict()) == s


@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=200))
def test_ordering_and_fences(samples):
    s = summarize(samples)
    assert s.minimum <= s.q1 <= s.median <= s.q3 <= s.maximum
    low, high = s.fences()
    assert all(v < low or v > high for v in s.outliers)
    assert s.whisker_low <= s.whisker_high
    assert len(s.outliers) + sum(low <= v <= high for v in samples) == len(samples)
