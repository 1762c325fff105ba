import numpy as np
import pytest

from metasg.seeding import STREAMS, as_rng, child_seed, seed_seq, stream


def test_streams_are_reproducible():
    a = stream(7, "sampling", 3).random(5)
    b = stream(7, "sampling", 3).random(5)
    assert np.array_equal(a, b)


def test_named_streams_are_independent():
    draws = {name: stream(7, name).random() for name in STREAMS}
    assert len(set(draws.values())) == len(STREAMS)


def test_consuming_one_stream_leaves_others_alone():
    before = stream(1, "noise").random(3)
    stream(1, "sgd").random(1000)
    assert np.array_equal(before, stream(1, "noise").random(3))


def test_child_seed_is_stable_and_fits_in_63_bits():
    s = child_seed(3, "meta", 4, "adapt")
    assert s == child_seed(3, "meta", 4, "adapt")
    assert 0 <= s < 2**63
    assert s != child_seed(3, "meta", 4, "probe")


def test_negative_inputs_rejected():
    with pytest.raises(ValueError):
        seed_seq(-1)
    with pytest.raises(ValueError):
        seed_seq(0, -2)


def test_as_rng_passes_generators_through():
    g = np.random.default_rng(0)
    assert as_rng(g) is g
