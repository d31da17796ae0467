import numpy as np
from numpy.testing import assert_array_equal

from rtdlab.rng import RngState, Stream, stream_generator


def test_same_key_same_draws():
    a = RngState(42, Stream.SAMPLING).at(7).random(5)
    b = RngState(42, Stream.SAMPLING).at(7).random(5)
    assert_array_equal(a, b)


def test_streams_and_counters_are_independent():
    base = RngState(42, Stream.SAMPLING).at(7).random(5)
    assert not np.array_equal(base, RngState(42, Stream.MASKING).at(7).random(5))
    assert not np.array_equal(base, RngState(42, Stream.SAMPLING).at(8).random(5))
    assert not np.array_equal(base, RngState(43, Stream.SAMPLING).at(7).random(5))


def test_counter_access_needs_no_replay():
    state = RngState(3, Stream.DROPOUT)
    later = state.at(1000).random(3)
    for step in range(5):
        state.at(step).random(10)
    assert_array_equal(later, state.at(1000).random(3))


def test_substream_and_helper_agree():
    state = RngState(9).substream(Stream.SHUFFLE)
    assert_array_equal(state.at(2).permutation(10), stream_generator(9, Stream.SHUFFLE, 2).permutation(10))


def test_generator_is_philox():
    assert isinstance(RngState(0).at(0).bit_generator, np.random.Philox)
