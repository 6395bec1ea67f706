import numpy as np
import pytest

from corep.td_detect import TdBuffer, TdBufferError, should_update_core


def filled(values, capacity=None):
    buf = TdBuffer(capacity=capacity or max(len(values), 1))
    for v in values:
        buf.push(v)
    return buf


def test_single_push_stats():
    buf = filled([1.0], capacity=10)
    assert buf.mean() == 1.0
    assert buf.std() == 0.0


def test_eviction_keeps_newest():
    buf = TdBuffer(capacity=3)
    for v in (1, 2, 3, 4):
        buf.push(v)
    assert list(buf.values()) == [2.0, 3.0, 4.0]


def test_stats_match_direct_recomputation():
    rng = np.random.default_rng(0)
    buf = TdBuffer(capacity=600)
    mirror = []
    for _ in range(1000):
        v = float(rng.normal(3.0, 2.0))
        buf.push(v)
        mirror.append(abs(v))
        mirror = mirror[-600:]
    assert abs(buf.mean() - np.mean(mirror)) < 1e-9
    assert abs(buf.std() - np.std(mirror)) < 1e-9


def test_values_stored_as_magnitudes():
    buf = filled([-2.0, 3.0])
    assert list(buf.values()) == [2.0, 3.0]


def test_push_rejects_non_finite():
    buf = TdBuffer(capacity=4)
    with pytest.raises(TdBufferError, match="non-finite"):
        buf.push(float("nan"))
    with pytest.raises(TdBufferError, match="non-finite"):
        buf.push(float("inf"))


def test_recent_mean_full_window_equals_mean():
    buf = filled([1.0, 2.0, 3.0, 4.0])
    assert buf.recent_mean(1.0) == buf.mean()


def test_recent_mean_tail_window():
    buf = filled([0.0] * 90 + [10.0] * 10)
    assert buf.recent_mean(0.1) == 10.0


def test_recent_mean_single_element():
    buf = filled([7.0], capacity=5)
    assert buf.recent_mean(0.3) == 7.0


def test_gate_constant_buffer_freezes():
    buf = filled([2.5] * 100)
    assert should_update_core(buf, alpha=0.1, eta=1.96) is False


def test_gate_worked_buffer_fires():
    # mean 1, population std 3: interval (-4.88, 6.88) misses the recent 10
    buf = filled([0.0] * 90 + [10.0] * 10)
    assert buf.mean() == 1.0
    assert buf.std() == 3.0
    assert buf.recent_mean(0.1) == 10.0
    lo, hi = 1.0 - 1.96 * 3.0, 1.0 + 1.96 * 3.0
    assert (lo, hi) == (-4.88, 6.88)
    assert should_update_core(buf, alpha=0.1, eta=1.96) is True


def test_gate_zero_eta_fires_on_any_deviation():
    buf = filled([1.0, 2.0, 3.0, 4.0])
    assert buf.recent_mean(0.25) != buf.mean()
    assert should_update_core(buf, alpha=0.25, eta=0.0) is True


def test_gate_cold_start_updates():
    buf = TdBuffer(capacity=100)
    assert should_update_core(buf, alpha=0.1, eta=1.96) is True
    for _ in range(9):
        buf.push(1.0)
    assert should_update_core(buf, alpha=0.1, eta=1.96) is True  # below 10%
    buf.push(1.0)
    assert should_update_core(buf, alpha=0.1, eta=1.96) is False


def test_gate_monotone_in_eta():
    rng = np.random.default_rng(3)
    for _ in range(50):
        buf = filled(list(rng.normal(1.0, 1.0, size=40)), capacity=40)
        etas = sorted(rng.uniform(0.0, 3.0, size=4))
        fired = [should_update_core(buf, 0.2, e) for e in etas]
        # once the gate stays quiet at some eta it stays quiet for larger ones
        for a, b in zip(fired, fired[1:]):
            assert not (not a and b)


def test_gate_quiet_on_iid_stream():
    rng = np.random.default_rng(11)
    buf = TdBuffer(capacity=2000)
    for _ in range(2000):
        buf.push(rng.normal(1.0, 1.0))
    fires = 0
    for _ in range(1000):
        buf.push(rng.normal(1.0, 1.0))
        fires += should_update_core(buf, 0.1, 1.96)
    assert fires / 1000 <= 0.05


def test_gate_detects_mean_shift():
    rng = np.random.default_rng(13)
    buf = TdBuffer(capacity=2000)
    for _ in range(2000):
        buf.push(rng.normal(1.0, 1.0))
    first = None
    for k in range(1, 401):
        buf.push(rng.normal(4.0, 1.0))  # +3 sigma shift
        if should_update_core(buf, 0.1, 1.96):
            first = k
            break
    assert first is not None and first <= 200
