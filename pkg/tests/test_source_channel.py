import math

import numpy as np
import pytest

from timely_jscc.channel import (BUSY, IDLE, AvailabilityChain, ChannelConfigError, Codeword,
                                 DegenerateSignalError, GammaSchedule, LinkState, availability_step,
                                 power_normalize, snr_to_sigma2, transmit, tx_delay)
from timely_jscc.source import (ConfigurationError, PeriodicSource, SampleRecord, SingleSlotBuffer, sample_at,
                                synthetic_corpus)


@pytest.mark.parametrize("n, Ts, u", [(0, 2, 0.0), (3, 2, 6.0), (5, 0.5, 2.5)])
def test_sample_at(n, Ts, u):
    assert sample_at(n, Ts, ["a", "b"]).generation_time == u


def test_sample_at_cycles_dataset():
    src = PeriodicSource(["a", "b", "c"], 1.0)
    assert [src.sample_at(n).image_id for n in range(7)] == [0, 1, 2, 0, 1, 2, 0]


def test_shuffled_order_is_seeded_permutation():
    a = PeriodicSource(list(range(5)), 1.0, shuffle=True, seed=4)
    b = PeriodicSource(list(range(5)), 1.0, shuffle=True, seed=4)
    ids = [a.sample_at(n).image_id for n in range(10)]
    assert ids == [b.sample_at(n).image_id for n in range(10)]
    assert sorted(ids[:5]) == list(range(5))


def test_empty_dataset_rejected():
    with pytest.raises(ConfigurationError):
        sample_at(0, 1.0, [])


def test_buffer_keeps_only_freshest():
    buf = SingleSlotBuffer()
    s = [SampleRecord(i, float(i), 0) for i in range(5)]
    assert buf.offer(s[1]) is None
    assert buf.offer(s[2]) is s[1]
    assert buf.occupant is s[2]
    buf.offer(s[3])
    buf.offer(s[4])
    assert len(buf) == 1 and buf.occupant is s[4]
    assert buf.take() is s[4]
    assert len(buf) == 0


def test_power_normalize_examples():
    cw = power_normalize([1 + 0j, 1 + 0j])
    np.testing.assert_allclose(cw.symbols, [1, 1])
    cw = power_normalize([2 + 0j, 2j])
    np.testing.assert_allclose(cw.symbols, [1, 1j])
    assert cw.power() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(DegenerateSignalError):
        power_normalize([0, 0])


def test_power_normalize_idempotent():
    x = np.random.default_rng(0).normal(size=33) + 1j
    once = power_normalize(x).symbols
    np.testing.assert_allclose(power_normalize(once).symbols, once, atol=1e-12)


@pytest.mark.parametrize("db, s2", [(0, 1.0), (10, 0.1), (7, 0.199526)])
def test_snr_to_sigma2(db, s2):
    assert snr_to_sigma2(db) == pytest.approx(s2, abs=1e-6)


def test_transmit_noiseless_is_identity():
    x = power_normalize([1 + 1j, 2 - 1j, 0.5j])
    y = transmit(x, 0.0, np.random.default_rng(0))
    np.testing.assert_array_equal(y, x.symbols)


# Golden values recorded at first implementation (numpy PCG64, seed 11).
GOLDEN = np.array([1.02417794 - 0.21069626j, 1.96148671 - 0.37291694j,
                   1.86600858 + 0.40285737j, 0.63915841 - 0.03964355j])


def test_transmit_reproducible():
    x = Codeword(np.ones(4, dtype=complex))
    y1 = transmit(x, 1.0, np.random.default_rng(11))
    y2 = transmit(x, 1.0, np.random.default_rng(11))
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_allclose(y1, GOLDEN, atol=1e-8)


def test_transmit_noise_statistics():
    n = 1_000_000
    x = Codeword(np.ones(n, dtype=complex))
    y = transmit(x, 0.5, np.random.default_rng(3))
    noise = y - x.symbols
    assert abs(noise.mean()) < 0.005
    assert np.mean(np.abs(noise) ** 2) == pytest.approx(0.5, abs=0.01)
    assert np.var(noise.real) == pytest.approx(0.25, abs=0.005)


@pytest.mark.parametrize("K, baud, d", [(1000, 1000, 1.0), (1000, 500, 2.0), (0, 500, 0.0)])
def test_tx_delay(K, baud, d):
    assert tx_delay(K, baud) == d


def test_tx_delay_rejects_bad_baud():
    with pytest.raises(ChannelConfigError):
        tx_delay(10, 0)
    assert tx_delay(10, math.inf) == 0.0


def test_availability_always_idle():
    chain = AvailabilityChain(0.0, 0.5)
    rng = np.random.default_rng(0)
    assert all(chain.step(rng) == IDLE for _ in range(1000))


def test_availability_busy_recovers():
    link = LinkState(7.0, 1000.0, AvailabilityChain(0.2, 1.0, state=BUSY))
    assert availability_step(link, np.random.default_rng(0)) == IDLE


def test_availability_stationary_fraction():
    chain = AvailabilityChain(0.1, 0.3)
    rng = np.random.default_rng(5)
    idle = sum(chain.step(rng) == IDLE for _ in range(100_000))
    assert idle / 100_000 == pytest.approx(0.75, abs=0.02)
    assert chain.stationary_idle == pytest.approx(0.75)


def test_availability_rejects_bad_probability():
    with pytest.raises(ChannelConfigError):
        AvailabilityChain(1.2, 0.1)


def test_link_state_sigma2():
    assert LinkState(10.0, 1000.0).sigma2 == pytest.approx(0.1)


def test_gamma_schedule():
    fixed = GammaSchedule("fixed", 7.0)
    assert [fixed.next() for _ in range(3)] == [7.0, 7.0, 7.0]
    walk = GammaSchedule("random_walk", 7.0, 1.0, 13.0, 1.0, seed=2)
    vals = [walk.next() for _ in range(500)]
    assert vals[0] == 7.0
    assert min(vals) >= 1.0 and max(vals) <= 13.0
    assert len(set(vals)) > 3
    walk.reset()
    assert [walk.next() for _ in range(500)] == vals


def test_synthetic_corpus_range_and_determinism():
    a = synthetic_corpus(3, 16, 24, 3, seed=1)
    b = synthetic_corpus(3, 16, 24, 3, seed=1)
    assert a[0].shape == (16, 24, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert all(x.min() >= 0 and x.max() <= 255 for x in a)
