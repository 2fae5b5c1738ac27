"""Tests for the completion-time, network and balloon models."""

from __future__ import annotations

from dataclasses import replace

import pytest

from virm_sim.exceptions import PerfModelError, UnknownEndpointKindError, ZeroCapacityError
from virm_sim.perf_model import (
    CompletionEstimate,
    balloon_drain_rate,
    completion_estimate,
    compute_seconds,
    direct_seconds,
    dom0_throughput,
    effective_capacity,
    eq1_estimate,
    mem_slowdown,
    throughput,
    transfer_time,
)
from virm_sim.types import DomainConfig, EndpointKind, JobSpec

P, V, D = EndpointKind.PHYSICAL, EndpointKind.VIRTUAL, EndpointKind.DOM0


# =============================================================================
# Curves
# =============================================================================


class TestCurves:
    def test_mem_slowdown_at_anchors(self, params):
        assert mem_slowdown(params, 2048) == pytest.approx(1.02)
        assert mem_slowdown(params, 8192) == pytest.approx(1.0)

    def test_mem_slowdown_clamps_outside_curve(self, params):
        assert mem_slowdown(params, 128) == pytest.approx(1.035)
        assert mem_slowdown(params, 16384) == pytest.approx(1.0)

    def test_mem_slowdown_is_non_increasing(self, params):
        values = [mem_slowdown(params, m) for m in (512, 1024, 2048, 3072, 6144, 8192)]
        assert values == sorted(values, reverse=True)

    def test_mem_slowdown_rejects_zero(self, params):
        with pytest.raises(ValueError):
            mem_slowdown(params, 0)

    def test_dom0_throughput_interpolates(self, params):
        assert dom0_throughput(params, 512) == pytest.approx(20.0)
        assert dom0_throughput(params, 768) == pytest.approx(35.0)
        assert dom0_throughput(params, 2048) == pytest.approx(50.0)

    def test_dom0_throughput_never_beats_bare_metal(self, params):
        fast = replace(params, dom0_throughput_curve=((512.0, 20.0), (4096.0, 500.0)))
        assert dom0_throughput(fast, 4096) == pytest.approx(62.8)


# =============================================================================
# Completion time
# =============================================================================


class TestEffectiveCapacity:
    def test_cap_limits_capacity(self, machine):
        assert effective_capacity(DomainConfig("d", cap=50), 3, machine) == pytest.approx(0.5)

    def test_vcpus_limit_capacity(self, machine):
        assert effective_capacity(DomainConfig("d", vcpus=2), 1, machine) == 2.0

    def test_contention_limits_capacity(self, machine):
        cap = effective_capacity(DomainConfig("d", vcpus=4), 3, machine)
        assert cap == pytest.approx(4 / 3)

    def test_measured_share_overrides_estimate(self, machine):
        cap = effective_capacity(DomainConfig("d", vcpus=4), 3, machine, share=2.5)
        assert cap == pytest.approx(2.5)


class TestEq1Estimate:
    def test_two_vcpu_domain(self, params, machine, small_job):
        dom = DomainConfig("d", vcpus=2, memory=2048)
        t = eq1_estimate(params, dom, small_job, 1, machine=machine)
        assert t == pytest.approx(180 + 1.02 * 600 / 2)

    def test_non_increasing_in_cap(self, params, machine, small_job):
        times = [
            eq1_estimate(params, DomainConfig("d", cap=c), small_job, 1, machine=machine)
            for c in (25, 50, 75, 100)
        ]
        assert times == sorted(times, reverse=True)

    def test_non_increasing_in_memory(self, params, machine, small_job):
        times = [
            eq1_estimate(params, DomainConfig("d", memory=m), small_job, 1, machine=machine)
            for m in (512, 1024, 2048, 4096)
        ]
        assert times == sorted(times, reverse=True)

    def test_non_decreasing_in_vm_count(self, params, machine, small_job):
        dom = DomainConfig("d", vcpus=4)
        times = [eq1_estimate(params, dom, small_job, n, machine=machine) for n in (1, 2, 3, 4)]
        assert times == sorted(times)

    def test_contention_constant_slows_every_extra_vm(self, params, machine, small_job):
        slowed = replace(params, contention_per_vm=0.1)
        dom = DomainConfig("d")
        base = eq1_estimate(params, dom, small_job, 3, machine=machine) - 180
        t = eq1_estimate(slowed, dom, small_job, 3, machine=machine) - 180
        assert t == pytest.approx(base * 1.2)

    def test_limited_parallelism_ignores_extra_cpus(self, params, machine, small_job):
        serial = replace(params, max_parallelism=1)
        one = eq1_estimate(serial, DomainConfig("d", vcpus=1), small_job, 1, machine=machine)
        four = eq1_estimate(serial, DomainConfig("d", vcpus=4), small_job, 1, machine=machine)
        assert one == pytest.approx(four)

    def test_literal_formula(self, params, small_job):
        literal = replace(params, literal_eq1=True)
        dom = DomainConfig("d", cap=50)
        t = eq1_estimate(literal, dom, small_job, 3)
        assert t == pytest.approx(180 + 1.02 * 600 / (0.5 * 3))

    def test_zero_vms_rejected(self, params, small_job):
        with pytest.raises(ValueError):
            eq1_estimate(params, DomainConfig("d"), small_job, 0)

    def test_negative_cap_has_no_capacity(self, params, small_job):
        with pytest.raises(ZeroCapacityError):
            eq1_estimate(params, DomainConfig("d", cap=-1), small_job, 1)

    def test_zero_capacity_compute(self, params):
        with pytest.raises(ZeroCapacityError):
            compute_seconds(params, 100, 2048, 0.0, 1)

    def test_direct_uses_whole_host(self, params, machine, small_job):
        assert direct_seconds(params, small_job, machine) == pytest.approx(150.0)


class TestCompletionBreakdown:
    def test_breakdown_sums_to_total(self, params, machine, small_job):
        est = completion_estimate(
            params, DomainConfig("d", vcpus=2, memory=2048), small_job, 1, machine=machine
        )
        assert est.t_setup == 180.0
        assert est.t_compute == pytest.approx(306.0)
        assert est.t_stage_in == pytest.approx(0.5 * 8192 / 50)
        assert est.t_stage_out == pytest.approx(0.25 * 8192 / 50)
        assert est.t_total == pytest.approx(180 + 306 + 81.92 + 40.96)

    def test_bare_metal_breakdown(self, params, machine, small_job):
        est = completion_estimate(params, None, small_job, 0, machine=machine)
        assert est.t_setup == 0.0
        assert est.t_compute == pytest.approx(150.0)
        assert est.t_stage_in == pytest.approx(0.5 * 8192 / 62.8)
        assert est.t_total == pytest.approx(150.0 + 0.75 * 8192 / 62.8)

    def test_negative_component_rejected(self):
        with pytest.raises(PerfModelError):
            CompletionEstimate(180.0, -1.0, 0.0, 0.0, 1)


# =============================================================================
# Network
# =============================================================================


class TestThroughput:
    @pytest.mark.parametrize(
        ("src", "dst", "n", "trial", "expected"),
        [
            (P, P, 0, 0, 62.8),
            (P, V, 0, 0, 8.8),
            (P, V, 3, 0, 8.3),
            (V, V, 3, 0, 6.4),
            (V, V, 3, 1, 6.6),
        ],
    )
    def test_measured_rows(self, params, src, dst, n, trial, expected):
        assert throughput(params, src, dst, n, trial=trial) == pytest.approx(expected)

    def test_nearest_parallel_count(self, params):
        assert throughput(params, P, V, 1) == pytest.approx(8.8)
        assert throughput(params, P, V, 2) == pytest.approx(8.3)
        assert throughput(params, P, V, 10) == pytest.approx(8.3)

    def test_trial_beyond_repeats_uses_last(self, params):
        assert throughput(params, V, V, 3, trial=7) == pytest.approx(6.6)

    def test_reverse_direction_uses_same_row(self, params):
        assert throughput(params, V, P, 0) == pytest.approx(8.8)

    def test_dom0_endpoints_follow_dom0_memory(self, params):
        assert throughput(params, P, D, 3, dom0_memory=512) == pytest.approx(20.0)
        assert throughput(params, D, P, 3) == pytest.approx(50.0)

    def test_unknown_endpoint(self, params):
        with pytest.raises(UnknownEndpointKindError):
            throughput(params, "satellite", P, 0)


class TestTransferTime:
    def test_dataset_through_dom0(self, params):
        assert transfer_time(params, 3.0, P, D, 1) == pytest.approx(491.52)

    def test_dataset_bare_metal(self, params):
        assert transfer_time(params, 3.0, P, P, 0) == pytest.approx(3 * 8192 / 62.8)

    def test_empty_transfer(self, params):
        assert transfer_time(params, 0, P, V, 0) == 0.0

    def test_negative_size(self, params):
        with pytest.raises(ValueError):
            transfer_time(params, -1, P, P, 0)

    def test_virtual_destination_is_slowest(self, params):
        assert transfer_time(params, 3.0, V, V, 3) > transfer_time(params, 3.0, P, D, 3)


# =============================================================================
# Ballooning
# =============================================================================


class TestBalloonDrain:
    def test_uncapped_domain_drains_at_base_rate(self, params):
        assert balloon_drain_rate(params, DomainConfig("d"), 64) == pytest.approx(32.0)

    def test_cap_halves_rate(self, params):
        assert balloon_drain_rate(params, DomainConfig("d", cap=50), 64) == pytest.approx(16.0)

    def test_measured_share_fraction(self, params):
        dom = DomainConfig("d", vcpus=2)
        assert balloon_drain_rate(params, dom, 64, share=0.5) == pytest.approx(8.0)

    def test_nothing_pending(self, params):
        assert balloon_drain_rate(params, DomainConfig("d"), 0) == 0.0

    def test_negative_pending(self, params):
        with pytest.raises(ValueError):
            balloon_drain_rate(params, DomainConfig("d"), -1)
