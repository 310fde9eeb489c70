import io
import math

import numpy as np
import pytest

from conftest import MODELS, PROFILES, make_request, make_sim, make_slo
from lmmsim.core import StageKind
from lmmsim.engine import (
    InstancePlan,
    ServerSpec,
    SimulationError,
    TransferMedium,
    WorkItem,
    encode_shard,
    form_batch,
    sample_transfer_ms,
    transfer_latency_ms,
    weighted_quantile,
)
from lmmsim.policies import (
    PolicySet,
    RouterKind,
    ScalingDecision,
    SchedulerKind,
    Topology,
)

LLAMA_PROFILE = PROFILES["llama3.2-11b"]


def csv_bytes(log):
    import tempfile, os
    fd, path = tempfile.mkstemp()
    os.close(fd)
    log.to_csv(path)
    with open(path, "rb") as fh:
        data = fh.read()
    os.unlink(path)
    return data


class TestSingleRequest:
    def test_ttft_is_sum_of_stage_latencies(self):
        req = make_request(0, 0.0, text=1577, n_images=1)
        sim = make_sim([req], plan=[InstancePlan("text", 4, 1), InstancePlan("image", 4, 1)])
        log = sim.run()
        rec = log.records[0]
        prep = rec.prep_end_ms - rec.prep_start_ms
        enc = rec.encode_end_ms - rec.encode_start_ms
        pf = rec.prefill_end_ms - rec.prefill_start_ms
        assert rec.ttft_ms == pytest.approx(prep + enc + pf)
        assert rec.prep_start_ms == 0.0
        assert enc == pytest.approx(LLAMA_PROFILE.encode_latency(4, 4))
        assert pf == pytest.approx(LLAMA_PROFILE.prefill_latency(1577, 6404, 4))

    def test_transfer_included_in_ttft(self):
        req = make_request(0, 0.0, text=1577, n_images=1)
        sim = make_sim([req], transfer=TransferMedium.RDMA,
                       plan=[InstancePlan("text", 4, 1), InstancePlan("image", 4, 1)])
        log = sim.run()
        rec = log.records[0]
        transfer = rec.transfer_end_ms - rec.encode_end_ms
        assert transfer > 0
        assert rec.ttft_ms == pytest.approx(
            (rec.prep_end_ms - rec.prep_start_ms)
            + (rec.encode_end_ms - rec.encode_start_ms)
            + transfer
            + (rec.prefill_end_ms - rec.prefill_start_ms)
        )

    def test_text_only_skips_image_stages(self):
        req = make_request(0, 0.0, text=500, n_images=0)
        log = make_sim([req]).run()
        rec = log.records[0]
        assert rec.prep_start_ms is None
        assert rec.encode_start_ms is None
        assert rec.transfer_end_ms is None
        assert rec.ttft_ms == pytest.approx(LLAMA_PROFILE.prefill_latency(500, 0, 4))

    def test_decode_completion(self):
        out = 9
        req = make_request(0, 0.0, text=500, out=out)
        log = make_sim([req]).run()
        rec = log.records[0]
        tbt = LLAMA_PROFILE.tbt_latency(1, 4)
        assert rec.completion_ms == pytest.approx(rec.prefill_end_ms + (out - 1) * tbt)
        assert rec.tbt_p99_ms == pytest.approx(tbt)

    def test_single_output_token_completes_at_prefill(self):
        req = make_request(0, 0.0, text=500, out=1)
        log = make_sim([req]).run()
        rec = log.records[0]
        assert rec.completion_ms == rec.prefill_end_ms
        assert rec.tbt_p99_ms is None


class TestQueueing:
    def test_serial_encode_queueing(self):
        reqs = [make_request(0, 0.0, text=200, n_images=1),
                make_request(1, 0.0, text=200, n_images=1)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 4, 1)])
        log = sim.run()
        enc = LLAMA_PROFILE.encode_latency(4, 4)
        assert log.records[1].ttft_ms == pytest.approx(log.records[0].ttft_ms + enc)

    def test_work_conservation_no_idle_gap(self):
        reqs = [make_request(i, 0.0, text=200, n_images=1) for i in range(3)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 4, 1)])
        log = sim.run()
        recs = sorted(log.records.values(), key=lambda r: r.encode_start_ms)
        for prev, nxt in zip(recs, recs[1:]):
            assert nxt.encode_start_ms == pytest.approx(prev.encode_end_ms)

    def test_decode_batch_step_time(self):
        # Two overlapping decodes share a batch, so per-token time reflects batch 2.
        reqs = [make_request(0, 0.0, text=500, out=50),
                make_request(1, 0.0, text=500, out=50)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 1)])
        log = sim.run()
        r0, r1 = log.records[0], log.records[1]
        tbt2 = LLAMA_PROFILE.tbt_latency(2, 4)
        # The later-starting request decodes fully inside a batch of 2.
        later = max((r0, r1), key=lambda r: r.prefill_end_ms)
        assert later.tbt_p99_ms == pytest.approx(tbt2, rel=1e-6)


class TestDeterminism:
    def _run(self, seed=7):
        reqs = [make_request(i, 37.0 * i, text=100 + i, n_images=i % 3, out=5)
                for i in range(40)]
        sim = make_sim(reqs, transfer=TransferMedium.RDMA, seed=seed)
        return sim.run()

    def test_bit_identical_logs(self):
        a, b = self._run(), self._run()
        assert csv_bytes(a) == csv_bytes(b)
        assert a.allocation_log == b.allocation_log

    def test_seed_changes_transfer_samples(self):
        a, b = self._run(seed=1), self._run(seed=2)
        ta = [r.transfer_end_ms for r in a.records.values() if r.transfer_end_ms]
        tb = [r.transfer_end_ms for r in b.records.values() if r.transfer_end_ms]
        assert ta != tb


class TestCausality:
    def test_timestamps_monotone(self):
        rng = np.random.default_rng(3)
        reqs = [make_request(i, float(rng.integers(0, 5000)), text=int(rng.integers(50, 2000)),
                             n_images=int(rng.integers(0, 4)), out=int(rng.integers(1, 30)))
                for i in range(120)]
        sim = make_sim(reqs, transfer=TransferMedium.RDMA)
        log = sim.run()
        for rec in log.completed_records():
            if rec.multimodal:
                # Shards pipeline independently; each one is ordered.
                for stamps in rec.shards.values():
                    assert rec.arrival_ms <= stamps["prep_start"] <= stamps["prep_end"]
                    assert stamps["prep_end"] <= stamps["encode_start"] <= stamps["encode_end"]
                    assert stamps["encode_end"] <= rec.transfer_end_ms
                assert rec.transfer_end_ms <= rec.prefill_start_ms
            tail = [rec.arrival_ms, rec.prefill_start_ms, rec.prefill_end_ms, rec.completion_ms]
            assert all(a <= b + 1e-9 for a, b in zip(tail, tail[1:])), tail

    def test_prefill_waits_for_all_shards(self):
        req = make_request(0, 0.0, text=100, n_images=4)
        sim = make_sim([req], plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 4)])
        log = sim.run()
        rec = log.records[0]
        assert rec.prefill_start_ms >= rec.encode_end_ms


class TestEncodeShard:
    def test_even_split(self):
        images = make_request(0, 0, n_images=4).images
        shards = encode_shard(images, 4)
        assert sorted(len(s) for s in shards) == [1, 1, 1, 1]

    def test_single_image_single_shard(self):
        images = make_request(0, 0, n_images=1).images
        assert encode_shard(images, 4) == [[0]]

    def test_balanced_by_tiles(self):
        spec = MODELS["internvl-26b"]
        from lmmsim.core import ImageSpec
        images = [ImageSpec.from_dims(448, 448, spec), ImageSpec.from_dims(896, 896, spec),
                  ImageSpec.from_dims(448, 448, spec), ImageSpec.from_dims(448, 448, spec)]
        shards = encode_shard(images, 2)
        loads = [sum(images[i].tiles for i in s) for s in shards]
        assert max(loads) - min(loads) <= 2

    def test_sharded_makespan_quarter_of_unsharded(self):
        # 16 equal images over 4 idle instances vs 1: encode span shrinks 4x,
        # matching the analytic schedule of a linear encode model.
        req16 = make_request(0, 0.0, text=100, n_images=16)
        sharded = make_sim([req16], plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 4)],
                           policies=PolicySet(topology=Topology.DECOUPLED, max_fanout=4)).run()
        single = make_sim([req16], plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 1)]).run()
        span_sharded = sharded.records[0].encode_end_ms - sharded.records[0].encode_start_ms
        span_single = single.records[0].encode_end_ms - single.records[0].encode_start_ms
        assert span_sharded == pytest.approx(span_single / 4)


class TestTransferModel:
    def test_rdma_p99(self):
        rng = np.random.default_rng(0)
        samples = sorted(sample_transfer_ms(TransferMedium.RDMA, rng) for _ in range(200_000))
        p99 = samples[int(0.99 * len(samples))]
        assert p99 == pytest.approx(5.0, rel=0.05)

    def test_tcp_quantiles(self):
        rng = np.random.default_rng(0)
        samples = sorted(sample_transfer_ms(TransferMedium.TCP, rng) for _ in range(200_000))
        p50 = samples[len(samples) // 2]
        p99 = samples[int(0.99 * len(samples))]
        assert p50 == pytest.approx(100.0, rel=0.05)
        assert p99 == pytest.approx(180.0, rel=0.05)

    def test_text_only_no_transfer(self):
        rng = np.random.default_rng(0)
        req = make_request(0, 0, text=10, n_images=0)
        assert transfer_latency_ms(req, TransferMedium.TCP, rng) == 0.0


class TestFormBatch:
    def _item(self, seq, stage, size, enqueue=0.0, deps=()):
        return WorkItem(seq=seq, request_id=seq, stage=stage, size_tokens=size,
                        tiles=1, enqueue_ms=enqueue, ttft_slo_ms=1000.0,
                        deps=set(deps))

    def test_queue_of_five_max_two(self):
        queue = [self._item(i, StageKind.ENCODE, 10, enqueue=i) for i in range(5)]
        picked = form_batch(queue, 10.0, SchedulerKind.FIFO, 0.5, {"encode": 2})
        assert picked == [0, 1]

    def test_stages_never_mixed(self):
        queue = [self._item(0, StageKind.ENCODE, 10),
                 self._item(1, StageKind.PREFILL, 10),
                 self._item(2, StageKind.ENCODE, 10)]
        picked = form_batch(queue, 10.0, SchedulerKind.FIFO, 0.5, {"encode": 4, "prefill": 4})
        assert all(queue[i].stage is StageKind.ENCODE for i in picked)

    def test_unmet_deps_skipped_not_reordered(self):
        queue = [self._item(0, StageKind.ENCODE, 10, deps={99}),
                 self._item(1, StageKind.ENCODE, 10)]
        picked = form_batch(queue, 10.0, SchedulerKind.FIFO, 0.5, {"encode": 2})
        assert picked == [1]

    def test_single_item_batches_for_image_default(self):
        queue = [self._item(i, StageKind.ENCODE, 10, enqueue=i) for i in range(3)]
        picked = form_batch(queue, 10.0, SchedulerKind.FIFO, 0.5, {"encode": 1})
        assert picked == [0]


class TestScaling:
    def _scale_sim(self, decision_targets, workload=None, plan=None):
        sim = make_sim(
            workload or [],
            plan=plan or [InstancePlan("text", 4, 1), InstancePlan("image", 1, 2)],
            servers=[ServerSpec(0, 8, 16), ServerSpec(1, 8, 16)],
        )
        return sim

    def test_added_instances_start_delayed(self):
        sim = self._scale_sim(None)
        sim.apply_scaling(ScalingDecision(
            targets={"image": 4, "text": 1}, tp={"image": 1, "text": 4}))
        starting = [i for i in sim.instances.values() if i.state.value == "starting"]
        assert len(starting) == 2
        # Starting instances are not routable yet.
        assert all(i not in sim._active("image") for i in starting)

    def test_colocation_example(self):
        # One TP-4 text plus two TP-2 image instances fill one 8-GPU server.
        sim = make_sim([], plan=[InstancePlan("text", 4, 1), InstancePlan("image", 2, 2)],
                       servers=[ServerSpec(0, 8, 16)])
        servers_used = {i.server_id for i in sim.instances.values()}
        assert servers_used == {0}

    def test_drain_completes_queue_then_stops(self):
        reqs = [make_request(i, 0.0, text=200, n_images=1) for i in range(4)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 2)],
                       servers=[ServerSpec(0, 8, 16)])
        # Drain every image instance but one right after arrival events queue work.
        orig_tick = sim._on_arrival
        drained = {}

        def arrival_then_drain(idx):
            orig_tick(idx)
            if not drained:
                sim.apply_scaling(ScalingDecision(
                    targets={"image": 1, "text": 1}, tp={"image": 1, "text": 4}))
                drained["done"] = True

        sim._on_arrival = arrival_then_drain
        log = sim.run()
        assert log.completed == 4
        stopped = [i for i in sim.instances.values() if i.state.value == "stopped"]
        assert len(stopped) == 1
        assert stopped[0].idle()

    def test_scale_to_zero_text_rejected(self):
        sim = self._scale_sim(None)
        sim.apply_scaling(ScalingDecision(
            targets={"image": 2, "text": 0}, tp={"image": 1, "text": 4}))
        live_text = [i for i in sim.instances.values()
                     if i.pool == "text" and i.state.value in ("active", "starting")]
        assert len(live_text) == 1

    def test_gpu_accounting_never_oversubscribed(self):
        # validate=True asserts inventory on every event.
        reqs = [make_request(i, 100.0 * i, text=300, n_images=1) for i in range(20)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 2)],
                       servers=[ServerSpec(0, 8, 16)])
        sim.apply_scaling(ScalingDecision(
            targets={"image": 40, "text": 1}, tp={"image": 1, "text": 4}))
        log = sim.run()
        assert log.completed == 20
        assert any("unplaced" in f for e in log.scale_events for f in e["flags"])


class TestConservation:
    def test_arrived_equals_completed_plus_in_flight(self):
        rng = np.random.default_rng(5)
        reqs = [make_request(i, float(rng.uniform(0, 60_000)), text=int(rng.integers(100, 3000)),
                             n_images=int(rng.integers(0, 3)), out=int(rng.integers(1, 50)))
                for i in range(300)]
        sim = make_sim(reqs, horizon_ms=65_000.0, transfer=TransferMedium.RDMA)
        log = sim.run()
        assert log.arrived == 300
        assert log.arrived == log.completed + log.in_flight

    def test_no_loss_across_scaling_events(self):
        reqs = [make_request(i, 50.0 * i, text=200, n_images=1, out=3) for i in range(100)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 2)],
                       servers=[ServerSpec(0, 8, 16), ServerSpec(1, 8, 16)],
                       horizon_ms=300_000.0)

        fired = {}
        orig = sim._on_arrival

        def arrival_with_churn(idx):
            orig(idx)
            n = len(fired)
            if n == 0:
                sim.apply_scaling(ScalingDecision(
                    targets={"image": 4, "text": 1}, tp={"image": 1, "text": 4}))
                fired[0] = True
            elif n == 1 and sim.now > 2000:
                sim.apply_scaling(ScalingDecision(
                    targets={"image": 1, "text": 1}, tp={"image": 1, "text": 4}))
                fired[1] = True

        sim._on_arrival = arrival_with_churn
        log = sim.run()
        assert log.arrived == 100
        assert log.completed == 100


class TestStartDelay:
    def test_starting_instance_accepts_no_work(self):
        reqs = [make_request(0, 0.0, text=100, n_images=1, out=1)]
        sim = make_sim(reqs, plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 1)],
                       servers=[ServerSpec(0, 8, 16)], start_delay_ms=10_000.0)
        sim.apply_scaling(ScalingDecision(targets={"image": 2, "text": 1},
                                          tp={"image": 1, "text": 4}))
        log = sim.run()
        rec = log.records[0]
        # Work ran on the原 active instance; the new one was still starting.
        assert rec.completion_ms is not None
        assert rec.encode_start_ms < 10_000.0


class TestPDTopologies:
    def test_decoupled_pd_pipeline(self):
        req = make_request(0, 0.0, text=500, n_images=1, out=10, model="internvl-26b")
        sim = make_sim(
            [req], model="internvl-26b", topology=Topology.DECOUPLED_PD,
            plan=[InstancePlan("prefill", 4, 1), InstancePlan("decode", 4, 1),
                  InstancePlan("image", 1, 2)],
            servers=[ServerSpec(0, 16, 32)], transfer=TransferMedium.RDMA,
        )
        log = sim.run()
        rec = log.records[0]
        assert rec.completion_ms is not None
        assert rec.ttft_ms == pytest.approx(rec.prefill_end_ms - rec.arrival_ms)

    def test_monolith_pd_keeps_encode_on_prefill(self):
        req = make_request(0, 0.0, text=500, n_images=1, out=10, model="internvl-26b")
        sim = make_sim(
            [req], model="internvl-26b", topology=Topology.MONOLITH_PD,
            plan=[InstancePlan("prefill", 8, 1), InstancePlan("decode", 8, 1)],
            servers=[ServerSpec(0, 16, 32)], transfer=TransferMedium.RDMA,
        )
        log = sim.run()
        rec = log.records[0]
        assert rec.encode_end_ms is not None
        assert rec.transfer_end_ms is None  # no image-token hop, only KV transfer
        assert rec.completion_ms is not None


class TestDeadlock:
    def test_waiting_forever_raises_diagnostic(self):
        # An image request with an image pool that never activates.
        req = make_request(0, 0.0, text=100, n_images=1)
        sim = make_sim([req], plan=[InstancePlan("text", 4, 1), InstancePlan("image", 1, 1)])
        inst = next(i for i in sim.instances.values() if i.pool == "image")
        from lmmsim.engine import InstanceState
        inst.state = InstanceState.STOPPED
        with pytest.raises(SimulationError, match="deadlock"):
            sim.run()


class TestWeightedQuantile:
    def test_single_value(self):
        assert weighted_quantile([(5.0, 3.0)], 0.99) == 5.0

    def test_weighted_mass(self):
        pairs = [(1.0, 99.0), (100.0, 1.0)]
        assert weighted_quantile(pairs, 0.5) == 1.0
        assert weighted_quantile(pairs, 0.999) == 100.0
