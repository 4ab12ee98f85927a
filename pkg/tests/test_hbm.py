from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hbmflow.hbm import (BURST_LENGTHS, UNSATURATED_MAX_NS, HbmConfig, HbmError, PseudoChannel,
                         characterize, dump_calibration, effective_bandwidth, latency_sample,
                         latency_samples, load_calibration, read_efficiency, write_efficiency)


@pytest.fixture(scope="module")
def hbm():
    return HbmConfig()


def test_raw_bandwidth(hbm):
    assert hbm.raw_bandwidth == pytest.approx(409.6e9)
    assert 16 not in hbm.usable_pcs and len(hbm.usable_pcs) == 31


def test_effective_bandwidth(hbm):
    assert effective_bandwidth(hbm, 240, 300_000_000) == 279e9
    full = replace(hbm, usable_pcs=tuple(range(32)))
    assert effective_bandwidth(full, 256, 400_000_000) == pytest.approx(409.6e9)
    assert effective_bandwidth(replace(hbm, usable_pcs=()), 240) == 0
    with pytest.raises(HbmError):
        effective_bandwidth(hbm, 300)


def test_read_efficiency_table(hbm):
    assert read_efficiency(hbm, 8) == 0.83
    assert read_efficiency(hbm, 32) == 0.93
    # slightly more than half of the BL 8 value
    assert 0.5 < read_efficiency(hbm, 4) / read_efficiency(hbm, 8) < 0.6
    assert read_efficiency(hbm, 1, "sequential") == read_efficiency(hbm, 32)
    with pytest.raises(HbmError):
        read_efficiency(hbm, 64)


def test_write_is_fifteen_points_lower(hbm):
    for bl in (8, 16, 32):
        assert write_efficiency(hbm, bl) == pytest.approx(read_efficiency(hbm, bl) - 0.15)


def test_efficiency_nondecreasing(hbm):
    effs = [read_efficiency(hbm, bl) for bl in BURST_LENGTHS]
    assert effs == sorted(effs)


def test_config_validation():
    with pytest.raises(HbmError):
        HbmConfig(usable_pcs=(40,))
    with pytest.raises(HbmError):
        HbmConfig(efficiency_table={8: (1.2, 0.5)})
    with pytest.raises(HbmError):
        HbmConfig(latency_envelope={8: (500.0, 400.0, 900.0)})
    with pytest.raises(HbmError):
        # mean too close to the minimum for any triangle on this range
        HbmConfig(latency_envelope={8: (100.0, 110.0, 1000.0)})


def test_saturated_bl32_mean(hbm):
    x = latency_samples(hbm, 32, 10_000, np.random.default_rng(0))
    assert x.mean() == pytest.approx(400.0, rel=0.05)


def test_bl8_max_within_configured(hbm):
    assert hbm.latency_envelope[8][2] >= 1214
    x = latency_samples(hbm, 8, 10_000, np.random.default_rng(3))
    assert x.max() <= hbm.latency_envelope[8][2]


@pytest.mark.parametrize("bl", BURST_LENGTHS)
def test_unsaturated_below_450(hbm, bl):
    rng = np.random.default_rng(bl)
    assert max(latency_sample(hbm, bl, False, rng) for _ in range(500)) <= UNSATURATED_MAX_NS
    assert latency_samples(hbm, bl, 2000, rng, saturated=False).max() <= UNSATURATED_MAX_NS


@settings(max_examples=50, deadline=None)
@given(bl=st.sampled_from(BURST_LENGTHS), seed=st.integers(0, 2**32 - 1))
def test_samples_inside_envelope(bl, seed):
    cfg = HbmConfig()
    lo, _, hi = cfg.latency_envelope[bl]
    x = latency_samples(cfg, bl, 500, np.random.default_rng(seed))
    assert lo <= x.min() and x.max() <= hi


def test_sample_determinism(hbm):
    a = latency_samples(hbm, 16, 100, np.random.default_rng(5))
    b = latency_samples(hbm, 16, 100, np.random.default_rng(5))
    assert np.array_equal(a, b)


@pytest.mark.parametrize("pattern", ["random", "sequential"])
@pytest.mark.parametrize("bl", BURST_LENGTHS)
def test_characterize_self_consistent(hbm, bl, pattern):
    st_ = characterize(hbm, 10_000, bl, pattern, seed=1)
    assert st_.efficiency == pytest.approx(read_efficiency(hbm, bl, pattern), abs=0.02)
    assert st_.write_efficiency == pytest.approx(write_efficiency(hbm, bl, pattern), abs=0.02)
    assert 0 <= st_.efficiency <= 1
    assert st_.latency_min_ns <= st_.latency_avg_ns <= st_.latency_max_ns
    assert st_.transactions == 10_000


def test_characterize_random_accept(hbm):
    st_ = characterize(hbm, 10_000, 8, seed=4, random_accept=True)
    assert st_.efficiency == pytest.approx(0.83, abs=0.02)


def test_characterize_deterministic(hbm):
    assert characterize(hbm, 2000, 8, seed=9) == characterize(hbm, 2000, 8, seed=9)


def test_characterize_needs_transactions(hbm):
    with pytest.raises(HbmError):
        characterize(hbm, 0)


def test_refresh_adds_latency(hbm):
    on = replace(hbm, refresh_enabled=True)
    base = characterize(hbm, 5000, 8, seed=2)
    slow = characterize(on, 5000, 8, seed=2)
    assert slow.latency_max_ns > base.latency_max_ns
    assert slow.latency_max_ns <= hbm.latency_envelope[8][2] + hbm.refresh_stall_ns
    assert slow.efficiency < base.efficiency


def test_pseudo_channel_backpressure(hbm):
    pc = PseudoChannel(hbm, 8, 0.5)
    with pytest.raises(HbmError):
        pc.accept()
    accepted = 0
    for _ in range(1600):
        pc.tick()
        if pc.ready():
            pc.accept()
            accepted += 1
    assert accepted * 8 == 800


def test_calibration_file_round_trip(tmp_path, hbm):
    path = tmp_path / "cal.csv"
    path.write_text(dump_calibration(hbm))
    assert load_calibration(path) == hbm
    path.write_text("# override\n8,0.80,0.66,150,550,1300\n")
    cfg = load_calibration(path)
    assert read_efficiency(cfg, 8) == 0.80
    assert cfg.worst_latency_ns() == 1300
    path.write_text("8,0.8,0.6\n")
    with pytest.raises(HbmError):
        load_calibration(path)
