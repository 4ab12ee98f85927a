import csv
import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from hbmflow.randnet import random_shared_setup
from hbmflow.bounds import compute_throughput_bound
from hbmflow.design import design_hybrid
from hbmflow.hbm import HbmConfig, read_efficiency
from hbmflow.network import builtin_network, layer_traffic_bytes, parse_network
from hbmflow.planner import PlanError, assign_pseudo_channels, plan_from_offload_set
from hbmflow.sim import (FlowMode, SimConfig, SimError, edge_capacity, shared_setup, line_windows,
                         report_text, run_shared_scenario, simulate, trace_csv)

ONE = "network one\nlayer 0 kind=standard-conv kh=3 kw=3 ci=64 co=64 stride=1 in=8x8 out=8x8 pi=1 po=3\n"


def single(bl=8):
    net = parse_network(ONE)
    hbm = HbmConfig(usable_pcs=(0,))
    return net, assign_pseudo_channels(plan_from_offload_set(net, [0], hbm, bl), net, hbm), hbm


def expected_words(net, plan, n):
    return tuple(0 if pl.on_chip else n * l.output_height * l.cycles_per_row * l.parallelism
                 for pl, l in zip(plan.placements, net.layers))


# -- basic contracts --------------------------------------------------------------

def test_deterministic():
    net, plan, hbm = random_shared_setup(11)
    for extra in ({}, {"random_accept": True}):
        cfg = SimConfig(n_images=3, seed=7, **extra)
        assert simulate(net, plan, hbm, cfg) == simulate(net, plan, hbm, cfg)


def test_seed_matters():
    net, plan, hbm = single()
    a = simulate(net, plan, hbm, SimConfig(n_images=2, seed=1))
    b = simulate(net, plan, hbm, SimConfig(n_images=2, seed=2))
    assert a.total_cycles != b.total_cycles


def test_ideal_memory_single_layer_exact():
    net, plan, hbm = single()
    rep = simulate(net, plan, hbm, SimConfig(n_images=3, ideal_memory=True))
    assert rep.throughput_im_s == compute_throughput_bound(net)[0]
    assert all(l.freeze_cycles == 0 for l in rep.layers)


def test_ideal_memory_designed_network_reaches_compute_bound():
    tuned, plan = design_hybrid(builtin_network("resnet18"), HbmConfig())
    rep = simulate(tuned, plan, HbmConfig(), SimConfig(n_images=4, ideal_memory=True))
    assert rep.steady_state_im_s == pytest.approx(compute_throughput_bound(tuned)[0], rel=1e-9)
    assert sum(l.freeze_cycles for l in rep.layers) == 0
    assert rep.within_bound


@pytest.mark.parametrize("bl", [8, 16, 32])
def test_single_streamed_layer_matches_efficiency(bl):
    net, plan, hbm = single(bl)
    rep = simulate(net, plan, hbm, SimConfig(n_images=8))
    # one channel gives at most 3 weight words per cycle
    analytic = 3 * 300e6 / (layer_traffic_bytes(net.layers[0]) / 10)
    assert rep.throughput_im_s == pytest.approx(read_efficiency(hbm, bl) * analytic, rel=0.05)
    assert rep.within_bound


def test_report_invariants():
    net, plan, hbm = random_shared_setup(3)
    rep = simulate(net, plan, hbm, SimConfig(n_images=3))
    assert rep.completed and rep.deadlock is None
    assert rep.throughput_im_s == rep.n_images * 300e6 / rep.total_cycles
    for l in rep.layers:
        assert l.busy_cycles + l.freeze_cycles + l.starve_cycles <= rep.total_cycles
    for f in rep.fifos:
        assert 0 <= f.min <= f.mean <= f.max <= f.capacity
    assert list(rep.image_done_cycles) == sorted(rep.image_done_cycles)


def test_unassigned_plan_rejected():
    net = parse_network(ONE)
    hbm = HbmConfig(usable_pcs=(0,))
    with pytest.raises(PlanError):
        simulate(net, plan_from_offload_set(net, [0], hbm, 8), hbm)


def test_mismatched_plan_rejected():
    net, plan, hbm = single()
    other = parse_network(ONE.replace("po=3", "po=2"))
    with pytest.raises(PlanError):
        simulate(other, plan, hbm)


def test_config_validation():
    with pytest.raises(SimError):
        SimConfig(n_images=0)
    with pytest.raises(SimError):
        SimConfig(core_clock_hz=0)
    net, plan, hbm = single()
    with pytest.raises(SimError, match="threshold"):
        simulate(net, plan, hbm, SimConfig(freeze_threshold_words=1))


def test_timeout_is_an_error():
    net, plan, hbm = single()
    with pytest.raises(SimError, match="no completion"):
        simulate(net, plan, hbm, SimConfig(n_images=2, max_cycles=100))


# -- head-of-line scenario ----------------------------------------------------------

def test_ready_valid_deadlocks_on_shared_channel():
    rep = run_shared_scenario("ready_valid")
    assert not rep.completed
    assert rep.throughput_im_s == 0.0
    dl = rep.deadlock
    assert dl.head_of_line_owner == 2
    text = " | ".join(dl.blocked_resources)
    assert "dcfifo[pc0] head word for layer 2" in text
    assert "layer 0 frozen" in text


def test_credit_completes_on_shared_channel():
    rep = run_shared_scenario(FlowMode.CREDIT)
    assert rep.completed and rep.deadlock is None
    assert rep.within_bound


def test_ready_valid_completes_without_sharing():
    assert run_shared_scenario("ready_valid", shared=False).completed


@pytest.mark.parametrize("window", [None, 200, 3000])
def test_watchdog_fires_within_one_window(window):
    net, plan, hbm = shared_setup()
    cfg = SimConfig(flow_mode="ready_valid", deadlock_window_cycles=window, trace=True)
    rep = simulate(net, plan, hbm, cfg)
    last = max(c for c, kind, _, _ in rep.trace_rows if kind != 4)
    limit = window or 4 * 365
    assert 0 < rep.deadlock.cycle - last <= limit


def test_refresh_stall_is_not_a_deadlock():
    # stalls longer than the watchdog window while reads are outstanding
    hbm = replace(HbmConfig(), refresh_enabled=True, refresh_period_ns=9000.0,
                  refresh_stall_ns=6000.0)
    net, plan, hbm = shared_setup(shared=False, hbm=hbm)
    rep = simulate(net, plan, hbm, SimConfig(n_images=3))
    assert rep.completed
    assert rep.within_bound


def test_refresh_does_not_mask_a_real_deadlock():
    hbm = replace(HbmConfig(), refresh_enabled=True, refresh_period_ns=9000.0,
                  refresh_stall_ns=6000.0)
    net, plan, hbm = shared_setup(hbm=hbm)
    rep = simulate(net, plan, hbm, SimConfig(flow_mode="ready_valid"))
    assert not rep.completed and rep.deadlock.head_of_line_owner == 2


# -- flow-control properties ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(25))
def test_random_credit_configs(seed):
    net, plan, hbm = random_shared_setup(seed)
    for extra in ({}, {"random_accept": True}):
        rep = simulate(net, plan, hbm, SimConfig(n_images=2, seed=seed, **extra))
        assert rep.completed
        assert rep.within_bound
        # freezes delay the run but every weight word is consumed exactly once
        assert rep.weight_words_consumed == expected_words(net, plan, 2)
        for f in rep.fifos:
            assert f.max <= f.capacity


def test_ready_valid_can_deadlock_random_configs():
    outcomes = [simulate(*random_shared_setup(s), SimConfig(n_images=2, seed=s,
                                                            flow_mode="ready_valid")).completed
                for s in range(60)]
    assert not all(outcomes)


@settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10**6), bl=st.sampled_from([8, 16, 32]),
       hbm_mhz=st.sampled_from([300, 400]))
def test_liveness_under_credits(seed, bl, hbm_mhz):
    net, plan, hbm = random_shared_setup(seed, bl=bl)
    rep = simulate(net, plan, hbm, SimConfig(n_images=2, seed=seed,
                                             hbm_clock_hz=hbm_mhz * 1_000_000))
    assert rep.completed and rep.within_bound


@pytest.mark.parametrize("hbm_mhz", [300, 400])
def test_work_conservation_and_clock_crossing(hbm_mhz):
    net, plan, hbm = random_shared_setup(5)
    cfg = SimConfig(n_images=2, hbm_clock_hz=hbm_mhz * 1_000_000)
    rep = simulate(net, plan, hbm, cfg)
    assert rep.completed
    for pc in rep.pcs:
        layers = [pl.layer for pl in plan.placements if pc.pc in pl.pcs]
        consumed_bits = 80 * sum(rep.weight_words_consumed[l] for l in layers)
        assert pc.accepted * plan.burst_length * 240 >= consumed_bits
        assert pc.words_in == pc.words_out + pc.residual_words
        assert pc.accepted <= pc.requests
        assert 0 < pc.utilization <= 1


def test_idle_slots_are_lost():
    # with a single consumer the channel cannot exceed its efficiency over the run
    net, plan, hbm = single(8)
    rep = simulate(net, plan, hbm, SimConfig(n_images=4))
    assert rep.pcs[0].utilization <= read_efficiency(hbm, 8) + 1e-3


# -- activation windows ------------------------------------------------------------------

def test_line_windows_same_padding():
    net = parse_network(
        "layer 0 kind=standard-conv kh=3 kw=3 ci=3 co=8 in=8x8\n"
        "layer 1 kind=standard-conv kh=3 kw=3 ci=8 co=8 stride=2 in=8x8\n")
    need, free = line_windows(*net.layers)
    assert len(need) == len(free) == 4
    assert np.all(np.diff(need) >= 0) and np.all(np.diff(free) >= 0)
    assert need[-1] == 8 and free[0] == 0
    assert np.all(free <= need)
    assert edge_capacity(*net.layers) >= need[0]


# -- output formats ---------------------------------------------------------------------

def test_trace_and_text_report():
    net, plan, hbm = shared_setup()
    rep = simulate(net, plan, hbm, SimConfig(flow_mode="ready_valid", trace=True))
    rows = list(csv.reader(io.StringIO(trace_csv(rep))))
    assert rows[0] == ["cycle", "resource", "event"]
    assert rows[-1][1:] == ["watchdog", "deadlock"]
    cycles = [int(r[0]) for r in rows[1:]]
    assert cycles == sorted(cycles)
    text = report_text(rep)
    assert "completed            no" in text
    assert "head_of_line_owner" in text
