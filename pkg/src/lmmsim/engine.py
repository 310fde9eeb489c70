"""Deterministic discrete-event simulator of a multimodal serving cluster.

Instances expose up to three lanes: a CPU lane for preprocessing, a GPU lane
for encode/prefill batches, and a decode lane running continuous batching.
Decode progress is advanced analytically between membership changes, which
keeps event counts proportional to requests rather than generated tokens
while preserving batch-dependent per-token latency.

Event ordering is total: (time, event-type rank, sequence number), so a run
is bit-reproducible for a fixed (workload, config, seed).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import ModelSpec, Request, SLOSpec, StageKind
from .profiles import LatencyProfile
from . import policies as pol
from .policies import (
    PolicySet,
    SchedulerKind,
    ServerView,
    TokenAwareAutoscaler,
    PoolState,
    Topology,
)


class SimulationError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# Transfer model
# ----------------------------------------------------------------------
class TransferMedium(str, Enum):
    NONE = "none"
    RDMA = "rdma"
    TCP = "tcp"


_Z99 = 2.3263478740408408
# Lognormal (mu, sigma) hitting the observed (P50, P99) latencies in ms.
_TRANSFER_PARAMS = {
    TransferMedium.RDMA: (math.log(2.0), math.log(5.0 / 2.0) / _Z99),
    TransferMedium.TCP: (math.log(100.0), math.log(180.0 / 100.0) / _Z99),
}


def sample_transfer_ms(medium: TransferMedium, rng: np.random.Generator) -> float:
    if medium is TransferMedium.NONE:
        return 0.0
    mu, sigma = _TRANSFER_PARAMS[medium]
    return math.exp(mu + sigma * rng.standard_normal())


def transfer_latency_ms(request: Request, medium: TransferMedium, rng: np.random.Generator) -> float:
    """Token-transfer delay for a request; text-only requests transfer nothing."""
    if not request.is_multimodal:
        return 0.0
    return sample_transfer_ms(medium, rng)


# ----------------------------------------------------------------------
# Work items and batch formation
# ----------------------------------------------------------------------
@dataclass
class WorkItem:
    seq: int
    request_id: int
    stage: StageKind
    size_tokens: int
    tiles: int
    enqueue_ms: float
    ttft_slo_ms: float
    text_tokens: int = 0
    image_tokens: int = 0
    shard_images: tuple = ()
    shard_id: int = 0
    deps: set[int] = field(default_factory=set)

    @property
    def runnable(self) -> bool:
        return not self.deps


def encode_shard(images, n_shards: int) -> list[list[int]]:
    """Partition a request's images into shards balanced by tile count."""
    if not images:
        return []
    return pol.split_by_tiles([img.tiles for img in images], n_shards)


def form_batch(queue: list[WorkItem], now: float, scheduler: SchedulerKind,
               aging_slo_fraction: float, max_batch: dict) -> list[int]:
    """Queue indices for the next batch: scheduler order, one stage, capped."""
    order = pol.schedule_order(queue, now, scheduler, aging_slo_fraction)
    if not order:
        return []
    stage = queue[order[0]].stage
    cap = max_batch.get(stage.value, 1)
    picked = []
    for idx in order:
        if queue[idx].stage is stage:
            picked.append(idx)
            if len(picked) >= cap:
                break
    return picked


# ----------------------------------------------------------------------
# Instances
# ----------------------------------------------------------------------
class InstanceState(str, Enum):
    STARTING = "starting"
    ACTIVE = "active"
    DRAINING = "draining"
    STOPPED = "stopped"


class DecodeLane:
    __slots__ = ("members", "remaining", "step_ms", "anchor_ms", "epoch", "admit_queue")

    def __init__(self):
        self.members: list[int] = []
        self.remaining: dict[int, float] = {}
        self.step_ms = 0.0
        self.anchor_ms = 0.0
        self.epoch = 0
        self.admit_queue: list[tuple[int, float, float]] = []  # (request_id, ready_ms, steps)

    def load(self) -> int:
        return len(self.members) + len(self.admit_queue)

    def empty(self) -> bool:
        return not self.members and not self.admit_queue


class Instance:
    def __init__(self, inst_id: int, pool: str, tp: int, server_id: int, cpu_cores: int):
        self.id = inst_id
        self.pool = pool  # image | text | prefill | decode | monolith
        self.tp = tp
        self.server_id = server_id
        self.cpu_cores = cpu_cores
        self.state = InstanceState.ACTIVE
        self.gpu_queue: list[WorkItem] = []
        self.cpu_queue: list[WorkItem] = []
        self.gpu_busy = False
        self.cpu_busy = False
        self.decode = DecodeLane()
        self.pending_text_tokens = 0
        self.pending_image_tokens = 0
        self.started_ms = 0.0
        self.stopped_ms: float | None = None

    def decode_load(self) -> int:
        return self.decode.load()

    def idle(self) -> bool:
        return (
            not self.gpu_busy
            and not self.cpu_busy
            and not self.gpu_queue
            and not self.cpu_queue
            and self.decode.empty()
        )

    def __repr__(self):
        return f"<Instance {self.id} {self.pool} tp={self.tp} {self.state.value}>"


@dataclass
class ServerSpec:
    server_id: int
    gpus: int
    cpu_cores: int


@dataclass
class InstancePlan:
    pool: str
    tp: int
    count: int


# ----------------------------------------------------------------------
# Per-request accounting
# ----------------------------------------------------------------------
@dataclass
class RequestRecord:
    request_id: int
    service_id: str
    multimodal: bool
    arrival_ms: float
    text_tokens: int
    image_tokens: int
    output_tokens: int
    n_images: int
    prep_start_ms: float | None = None
    prep_end_ms: float | None = None
    encode_start_ms: float | None = None
    encode_end_ms: float | None = None
    transfer_end_ms: float | None = None
    prefill_start_ms: float | None = None
    prefill_end_ms: float | None = None
    completion_ms: float | None = None
    ttft_ms: float | None = None
    # Per-shard preprocess/encode stamps; aggregate fields above hold
    # first-start / last-end across shards.
    shards: dict[int, dict] = field(default_factory=dict)
    tbt_hist: list = field(default_factory=list)  # (gap_ms, weight)
    tbt_p99_ms: float | None = None
    ttft_slo_ms: float = 0.0
    tbt_slo_ms: float = 0.0
    slo_ok: bool | None = None

    @property
    def completed(self) -> bool:
        return self.completion_ms is not None


CSV_FIELDS = [
    "request_id", "service_id", "modality", "arrival_ms", "text_tokens", "image_tokens",
    "output_tokens", "n_images", "prep_start_ms", "prep_end_ms", "encode_start_ms",
    "encode_end_ms", "transfer_end_ms", "prefill_start_ms", "prefill_end_ms",
    "ttft_ms", "completion_ms", "tbt_p99_ms", "ttft_slo_ms", "tbt_slo_ms", "slo_ok",
]


class MetricsLog:
    """Per-request stage timestamps plus cluster allocation over time."""

    def __init__(self, horizon_ms: float, seed: int):
        self.horizon_ms = horizon_ms
        self.seed = seed
        self.records: dict[int, RequestRecord] = {}
        self.allocation_log: list[tuple[float, int]] = []
        self.scale_events: list[dict] = []
        self.arrived = 0
        self.completed = 0

    @property
    def in_flight(self) -> int:
        return self.arrived - self.completed

    def completed_records(self) -> list[RequestRecord]:
        return [r for r in self.records.values() if r.completed]

    def gpu_seconds(self) -> float:
        total = 0.0
        log = self.allocation_log
        for (t0, g), (t1, _) in zip(log, log[1:]):
            total += g * (t1 - t0)
        if log:
            t_last, g_last = log[-1]
            total += g_last * max(0.0, self.horizon_ms - t_last)
        return total / 1000.0

    def peak_gpus(self) -> int:
        return max((g for _, g in self.allocation_log), default=0)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_FIELDS)
            for rec in self.records.values():
                def fmt(x):
                    if x is None:
                        return ""
                    if isinstance(x, float):
                        return f"{x:.4f}"
                    return x

                w.writerow([
                    rec.request_id, rec.service_id,
                    "image-text" if rec.multimodal else "text-only",
                    fmt(rec.arrival_ms), rec.text_tokens, rec.image_tokens,
                    rec.output_tokens, rec.n_images, fmt(rec.prep_start_ms),
                    fmt(rec.prep_end_ms), fmt(rec.encode_start_ms), fmt(rec.encode_end_ms),
                    fmt(rec.transfer_end_ms), fmt(rec.prefill_start_ms), fmt(rec.prefill_end_ms),
                    fmt(rec.ttft_ms), fmt(rec.completion_ms), fmt(rec.tbt_p99_ms),
                    fmt(rec.ttft_slo_ms), fmt(rec.tbt_slo_ms),
                    "" if rec.slo_ok is None else int(rec.slo_ok),
                ])


def weighted_quantile(pairs: list[tuple[float, float]], q: float) -> float:
    """Nearest-rank (lower) quantile over weighted samples."""
    if not pairs:
        return 0.0
    ordered = sorted(pairs)
    total = sum(w for _, w in ordered)
    target = q * total
    acc = 0.0
    for value, w in ordered:
        acc += w
        if acc >= target - 1e-12:
            return value
    return ordered[-1][0]


# ----------------------------------------------------------------------
# Event kinds (the int doubles as the tie-break rank)
# ----------------------------------------------------------------------
EV_INSTANCE_STARTED = 0
EV_CPU_FREE = 1
EV_GPU_FREE = 2
EV_DECODE_DONE = 3
EV_TRANSFER_DONE = 4
EV_DECODE_ARRIVAL = 5
EV_ARRIVAL = 6
EV_SCALE_TICK = 7

_EPS = 1e-6


class Simulation:
    def __init__(
        self,
        model: ModelSpec,
        profile: LatencyProfile,
        slo: SLOSpec,
        policies: PolicySet,
        servers: list[ServerSpec],
        instance_plan: list[InstancePlan],
        workload: list[Request],
        horizon_ms: float,
        seed: int = 0,
        transfer_medium: TransferMedium = TransferMedium.RDMA,
        max_batch: dict | None = None,
        autoscaler: TokenAwareAutoscaler | None = None,
        scale_interval_ms: float = 300_000.0,
        start_delay_ms: float = 60_000.0,
        validate: bool = False,
    ):
        self.model = model
        self.profile = profile
        self.slo = slo
        self.policies = policies
        self.topology = policies.topology
        self.servers = {s.server_id: s for s in servers}
        self.workload = sorted(workload, key=lambda r: (r.arrival_ms, r.id))
        self.horizon_ms = horizon_ms
        self.seed = seed
        self.transfer_medium = transfer_medium
        self.max_batch = {"preprocess": 8, "encode": 1, "prefill": 8, "decode": 48}
        if max_batch:
            self.max_batch.update(max_batch)
        self.autoscaler = autoscaler
        self.scale_interval_ms = scale_interval_ms
        self.start_delay_ms = start_delay_ms
        self.validate = validate

        self.now = 0.0
        self.rng = np.random.default_rng(seed)
        self.heap: list = []
        self._seq = 0
        self.instances: dict[int, Instance] = {}
        self._next_instance_id = 0
        self._next_item_seq = 0
        self.pool_waiting: dict[str, list] = {"image": [], "text": [], "prefill": [], "decode": []}
        self.rr_state: dict[str, int] = {}
        self.requests: dict[int, Request] = {}
        self.shards_pending: dict[int, int] = {}
        self.log = MetricsLog(horizon_ms, seed)
        self._reserved: dict[int, dict[int, tuple[int, int]]] = {}
        self._pool_tp: dict[str, int] = {}

        # Window accumulators for autoscaling decisions.
        self._win_reset()

        self._build_cluster(instance_plan)

    # ------------------------------------------------------------------
    # Setup
    # ------------------------------------------------------------------
    def _build_cluster(self, plan: list[InstancePlan]) -> None:
        additions = []
        for entry in plan:
            self._pool_tp[entry.pool] = entry.tp
            for _ in range(entry.count):
                additions.append((entry.pool, entry.tp))
        views = [
            ServerView(s.server_id, s.gpus, s.gpus, False) for s in self.servers.values()
        ]
        placements, unplaced, ok = pol.place(additions, views, self.policies.placement)
        if not ok:
            raise SimulationError(f"initial instances do not fit inventory: {unplaced}")
        for pool_name, tp, server_id in placements:
            self._spawn(pool_name, tp, server_id, starting=False)
        text_pools = {"text", "monolith"} if self.topology in (Topology.MONOLITH, Topology.DECOUPLED) \
            else {"prefill"}
        if not any(i.pool in text_pools for i in self.instances.values()):
            raise SimulationError("cluster needs at least one text-family instance")
        if self.topology in (Topology.DECOUPLED_PD, Topology.MONOLITH_PD):
            if not any(i.pool == "decode" for i in self.instances.values()):
                raise SimulationError("PD topology needs at least one decode instance")
        self._allocation_changed()

    def _spawn(self, pool: str, tp: int, server_id: int, starting: bool) -> Instance:
        server = self.servers[server_id]
        cores = max(1, server.cpu_cores * tp // server.gpus)
        inst = Instance(self._next_instance_id, pool, tp, server_id, cores)
        self._next_instance_id += 1
        inst.started_ms = self.now
        self.instances[inst.id] = inst
        self._reserved[inst.id] = {}
        if starting:
            inst.state = InstanceState.STARTING
            self._push(self.now + self.start_delay_ms, EV_INSTANCE_STARTED, inst.id)
        return inst

    # ------------------------------------------------------------------
    # Event plumbing
    # ------------------------------------------------------------------
    def _push(self, time_ms: float, kind: int, data=None) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (time_ms, kind, self._seq, data))

    def _allocation_changed(self) -> None:
        gpus = sum(i.tp for i in self.instances.values() if i.state is not InstanceState.STOPPED)
        log = self.log.allocation_log
        if log and log[-1][0] == self.now:
            log[-1] = (self.now, gpus)
        else:
            log.append((self.now, gpus))

    def _win_reset(self) -> None:
        self._win_text_tokens = 0
        self._win_image_tokens = 0
        self._win_output_tokens = 0
        self._win_completed = 0
        self._win_slo_ok = 0
        self._win_wait = {"encode": [0.0, 0], "prefill": [0.0, 0]}

    # ------------------------------------------------------------------
    # Pools and routing
    # ------------------------------------------------------------------
    def _active(self, pool: str) -> list[Instance]:
        return sorted(
            (i for i in self.instances.values() if i.pool == pool and i.state is InstanceState.ACTIVE),
            key=lambda i: i.id,
        )

    def _text_pool_name(self) -> str:
        if self.topology is Topology.MONOLITH:
            return "monolith"
        if self.topology in (Topology.DECOUPLED_PD, Topology.MONOLITH_PD):
            return "prefill"
        return "text"

    def _image_pool_name(self) -> str:
        if self.topology is Topology.MONOLITH:
            return "monolith"
        if self.topology is Topology.MONOLITH_PD:
            return "prefill"
        return "image"

    # ------------------------------------------------------------------
    # Run loop
    # ------------------------------------------------------------------
    def run(self) -> MetricsLog:
        for idx, req in enumerate(self.workload):
            if req.arrival_ms <= self.horizon_ms:
                self._push(req.arrival_ms, EV_ARRIVAL, idx)
        if self.autoscaler is not None:
            self._push(self.scale_interval_ms, EV_SCALE_TICK)

        handlers = {
            EV_INSTANCE_STARTED: self._on_instance_started,
            EV_CPU_FREE: self._on_cpu_free,
            EV_GPU_FREE: self._on_gpu_free,
            EV_DECODE_DONE: self._on_decode_done,
            EV_TRANSFER_DONE: self._on_transfer_done,
            EV_DECODE_ARRIVAL: self._on_decode_arrival,
            EV_ARRIVAL: self._on_arrival,
            EV_SCALE_TICK: self._on_scale_tick,
        }
        reached_horizon = False
        while self.heap:
            time_ms, kind, _seq, data = heapq.heappop(self.heap)
            if time_ms > self.horizon_ms:
                reached_horizon = True
                break
            self.now = time_ms
            handlers[kind](data)
            if self.validate:
                self._check_invariants()

        if not reached_horizon and self.log.in_flight:
            raise SimulationError(self._deadlock_dump())
        self.now = self.horizon_ms
        self._allocation_changed()
        return self.log

    def _deadlock_dump(self) -> str:
        stuck = [r.request_id for r in self.log.records.values() if not r.completed][:10]
        pools = {p: len(q) for p, q in self.pool_waiting.items() if q}
        insts = {
            i.id: (i.pool, i.state.value, len(i.gpu_queue), len(i.cpu_queue), i.decode.load())
            for i in self.instances.values()
        }
        return f"deadlock: in-flight={self.log.in_flight} stuck={stuck} waiting={pools} instances={insts}"

    # ------------------------------------------------------------------
    # Arrival and routing
    # ------------------------------------------------------------------
    def _on_arrival(self, idx: int) -> None:
        req = self.workload[idx]
        self.requests[req.id] = req
        rec = RequestRecord(
            request_id=req.id,
            service_id=req.service_id,
            multimodal=req.is_multimodal,
            arrival_ms=req.arrival_ms,
            text_tokens=req.text_tokens,
            image_tokens=req.total_image_tokens,
            output_tokens=req.output_tokens,
            n_images=len(req.images),
            ttft_slo_ms=self.slo.ttft_slo_ms(req.is_multimodal),
            tbt_slo_ms=self.slo.tbt_slo_ms,
        )
        self.log.records[req.id] = rec
        self.log.arrived += 1
        self._win_text_tokens += req.text_tokens
        self._win_image_tokens += req.total_image_tokens
        self._win_output_tokens += req.output_tokens

        if req.is_multimodal and self.topology in (Topology.DECOUPLED, Topology.DECOUPLED_PD):
            self._route_to_image_pool(req)
        elif req.is_multimodal:
            # Monolithic variants: the whole pipeline on one text-family instance.
            inst = pol.route_text(req, self._active(self._image_pool_name()),
                                  self.model.architecture, self.policies.router, self.rr_state)
            if inst is None:
                self.pool_waiting["image"].append(("mono", req.id))
                return
            self._reserve(inst, req, text=True, image=True)
            self._enqueue_shard(inst, req, list(range(len(req.images))), 0, count_pending=False)
        else:
            self._route_to_text_pool(req)

    def _route_to_image_pool(self, req: Request) -> None:
        pool = self._active("image")
        assignment = pol.route_image(req, pool, self.policies.router,
                                     self.policies.max_fanout, self.rr_state)
        if assignment is None:
            self.pool_waiting["image"].append(("img", req.id))
            return
        self.shards_pending[req.id] = len(assignment)
        for shard_id, (inst, image_idx) in enumerate(assignment):
            self._enqueue_shard(inst, req, image_idx, shard_id, count_pending=True)

    def _route_to_text_pool(self, req: Request, transfer_done: bool = False) -> None:
        pool_name = self._text_pool_name()
        pool = self._active(pool_name)
        inst = pol.route_text(req, pool, self.model.architecture,
                              self.policies.router, self.rr_state)
        if inst is None:
            self.pool_waiting["text" if pool_name != "prefill" else "prefill"].append(
                ("text", req.id, transfer_done))
            return
        self._reserve(inst, req, text=True, image=True)
        if req.is_multimodal and not transfer_done and self.topology in (
            Topology.DECOUPLED, Topology.DECOUPLED_PD,
        ):
            delay = transfer_latency_ms(req, self.transfer_medium, self.rng)
            self._push(self.now + delay, EV_TRANSFER_DONE, (req.id, inst.id))
        else:
            self._enqueue_prefill(inst, req)

    def _on_transfer_done(self, data) -> None:
        rid, inst_id = data
        req = self.requests[rid]
        self.log.records[rid].transfer_end_ms = self.now
        self._enqueue_prefill(self.instances[inst_id], req)

    # ------------------------------------------------------------------
    # Pending-token reservations
    # ------------------------------------------------------------------
    def _reserve(self, inst: Instance, req: Request, text: bool, image: bool) -> None:
        t = req.text_tokens if text else 0
        i = req.total_image_tokens if image else 0
        inst.pending_text_tokens += t
        inst.pending_image_tokens += i
        self._reserved[inst.id][req.id] = (t, i)

    def _release(self, inst: Instance, req: Request) -> None:
        t, i = self._reserved[inst.id].pop(req.id, (0, 0))
        inst.pending_text_tokens -= t
        inst.pending_image_tokens -= i

    # ------------------------------------------------------------------
    # CPU lane (preprocess)
    # ------------------------------------------------------------------
    def _new_item(self, req: Request, stage: StageKind, tiles: int, image_idx=(),
                  shard_id: int = 0) -> WorkItem:
        self._next_item_seq += 1
        img_tokens = tiles * self.model.tokens_per_tile
        return WorkItem(
            seq=self._next_item_seq,
            request_id=req.id,
            stage=stage,
            size_tokens=img_tokens if stage in (StageKind.PREPROCESS, StageKind.ENCODE)
            else req.text_tokens + req.total_image_tokens,
            tiles=tiles,
            enqueue_ms=self.now,
            ttft_slo_ms=self.slo.ttft_slo_ms(req.is_multimodal),
            text_tokens=req.text_tokens,
            image_tokens=req.total_image_tokens,
            shard_images=tuple(image_idx),
            shard_id=shard_id,
        )

    def _shard_stamp(self, rid: int, shard_id: int, key: str) -> None:
        self.log.records[rid].shards.setdefault(shard_id, {})[key] = self.now

    def _enqueue_shard(self, inst: Instance, req: Request, image_idx: list[int],
                       shard_id: int, count_pending: bool) -> None:
        tiles = sum(req.images[k].tiles for k in image_idx)
        if count_pending:
            tokens = tiles * self.model.tokens_per_tile
            inst.pending_image_tokens += tokens
            prev = self._reserved[inst.id].get(req.id, (0, 0))
            self._reserved[inst.id][req.id] = (prev[0], prev[1] + tokens)
        item = self._new_item(req, StageKind.PREPROCESS, tiles, image_idx, shard_id)
        inst.cpu_queue.append(item)
        self._cpu_dispatch(inst)

    def _cpu_dispatch(self, inst: Instance) -> None:
        if inst.cpu_busy or inst.state is InstanceState.STARTING or not inst.cpu_queue:
            return
        picked = form_batch(inst.cpu_queue, self.now, self.policies.scheduler,
                            self.policies.aging_slo_fraction, self.max_batch)
        if not picked:
            return
        batch = [inst.cpu_queue[i] for i in picked]
        for i in sorted(picked, reverse=True):
            inst.cpu_queue.pop(i)
        tiles = sum(it.tiles for it in batch)
        latency = self.profile.preprocess_latency(tiles, inst.cpu_cores)
        for it in batch:
            rec = self.log.records[it.request_id]
            if rec.prep_start_ms is None:
                rec.prep_start_ms = self.now
            self._shard_stamp(it.request_id, it.shard_id, "prep_start")
        inst.cpu_busy = True
        self._push(self.now + latency, EV_CPU_FREE, (inst.id, batch))

    def _on_cpu_free(self, data) -> None:
        inst_id, batch = data
        inst = self.instances[inst_id]
        inst.cpu_busy = False
        for it in batch:
            rec = self.log.records[it.request_id]
            rec.prep_end_ms = self.now
            self._shard_stamp(it.request_id, it.shard_id, "prep_end")
            enc = self._new_item(self.requests[it.request_id], StageKind.ENCODE,
                                 it.tiles, it.shard_images, it.shard_id)
            inst.gpu_queue.append(enc)
        self._gpu_dispatch(inst)
        self._cpu_dispatch(inst)
        self._maybe_stop_drained(inst)

    # ------------------------------------------------------------------
    # GPU lane (encode + prefill)
    # ------------------------------------------------------------------
    def _enqueue_prefill(self, inst: Instance, req: Request) -> None:
        item = self._new_item(req, StageKind.PREFILL, 0)
        inst.gpu_queue.append(item)
        self._gpu_dispatch(inst)

    def _gpu_dispatch(self, inst: Instance) -> None:
        if inst.gpu_busy or inst.state is InstanceState.STARTING or not inst.gpu_queue:
            return
        picked = form_batch(inst.gpu_queue, self.now, self.policies.scheduler,
                            self.policies.aging_slo_fraction, self.max_batch)
        if not picked:
            return
        batch = [inst.gpu_queue[i] for i in picked]
        for i in sorted(picked, reverse=True):
            inst.gpu_queue.pop(i)
        stage = batch[0].stage
        if stage is StageKind.ENCODE:
            tiles = sum(it.tiles for it in batch)
            latency = self.profile.encode_latency(tiles, inst.tp)
            for it in batch:
                rec = self.log.records[it.request_id]
                if rec.encode_start_ms is None:
                    rec.encode_start_ms = self.now
                self._shard_stamp(it.request_id, it.shard_id, "encode_start")
                w = self._win_wait["encode"]
                w[0] += self.now - it.enqueue_ms
                w[1] += 1
        else:
            latency = sum(
                self.profile.prefill_latency(it.text_tokens, it.image_tokens, inst.tp)
                for it in batch
            )
            for it in batch:
                rec = self.log.records[it.request_id]
                rec.prefill_start_ms = self.now
                w = self._win_wait["prefill"]
                w[0] += self.now - it.enqueue_ms
                w[1] += 1
        inst.gpu_busy = True
        self._push(self.now + latency, EV_GPU_FREE, (inst.id, batch))

    def _on_gpu_free(self, data) -> None:
        inst_id, batch = data
        inst = self.instances[inst_id]
        inst.gpu_busy = False
        for it in batch:
            if it.stage is StageKind.ENCODE:
                self._encode_item_done(inst, it)
            else:
                self._prefill_done(inst, it)
        self._gpu_dispatch(inst)
        self._maybe_stop_drained(inst)

    def _encode_item_done(self, inst: Instance, item: WorkItem) -> None:
        rid = item.request_id
        req = self.requests[rid]
        rec = self.log.records[rid]
        rec.encode_end_ms = self.now
        self._shard_stamp(rid, item.shard_id, "encode_end")
        if inst.pool == "image":
            tokens = item.tiles * self.model.tokens_per_tile
            inst.pending_image_tokens -= tokens
            prev = self._reserved[inst.id].get(rid)
            if prev is not None:
                left = (prev[0], prev[1] - tokens)
                if left == (0, 0):
                    self._reserved[inst.id].pop(rid)
                else:
                    self._reserved[inst.id][rid] = left
            self.shards_pending[rid] -= 1
            if self.shards_pending[rid] == 0:
                del self.shards_pending[rid]
                self._route_to_text_pool(req)
        else:
            # Colocated encoder: continue to prefill on the same instance.
            self._enqueue_prefill(inst, req)

    def _prefill_done(self, inst: Instance, item: WorkItem) -> None:
        rid = item.request_id
        req = self.requests[rid]
        rec = self.log.records[rid]
        rec.prefill_end_ms = self.now
        rec.ttft_ms = self.now - req.arrival_ms
        self._release(inst, req)
        decode_steps = req.output_tokens - 1
        if decode_steps <= 0:
            self._complete(req)
            return
        if self.topology in (Topology.DECOUPLED_PD, Topology.MONOLITH_PD):
            target = pol.route_decode(self._active("decode"), self.rr_state)
            if target is None:
                self.pool_waiting["decode"].append(("decode", rid, decode_steps))
                return
            delay = sample_transfer_ms(self.transfer_medium, self.rng)
            self._push(self.now + delay, EV_DECODE_ARRIVAL, (rid, target.id, decode_steps))
        else:
            self._decode_admit(inst, rid, decode_steps)

    # ------------------------------------------------------------------
    # Decode lane
    # ------------------------------------------------------------------
    def _on_decode_arrival(self, data) -> None:
        rid, inst_id, steps = data
        self._decode_admit(self.instances[inst_id], rid, steps)

    def _decode_advance(self, inst: Instance) -> None:
        lane = inst.decode
        if not lane.members or self.now <= lane.anchor_ms:
            lane.anchor_ms = max(lane.anchor_ms, self.now)
            return
        steps = (self.now - lane.anchor_ms) / lane.step_ms
        for rid in lane.members:
            lane.remaining[rid] -= steps
            self.log.records[rid].tbt_hist.append((lane.step_ms, steps))
        lane.anchor_ms = self.now

    def _decode_reschedule(self, inst: Instance) -> None:
        lane = inst.decode
        lane.epoch += 1
        if not lane.members:
            return
        lane.step_ms = self.profile.tbt_latency(len(lane.members), inst.tp)
        lane.anchor_ms = self.now
        next_dt = min(lane.remaining[r] for r in lane.members) * lane.step_ms
        self._push(self.now + max(next_dt, 0.0), EV_DECODE_DONE, (inst.id, lane.epoch))

    def _decode_admit(self, inst: Instance, rid: int, steps: int, ready_ms: float | None = None) -> None:
        lane = inst.decode
        ready = self.now if ready_ms is None else ready_ms
        if len(lane.members) >= self.max_batch["decode"]:
            lane.admit_queue.append((rid, ready, float(steps)))
            return
        self._decode_advance(inst)
        wait = self.now - ready
        if wait > _EPS:
            self.log.records[rid].tbt_hist.append((wait, 1.0))
        lane.members.append(rid)
        lane.remaining[rid] = float(steps)
        self._decode_reschedule(inst)

    def _on_decode_done(self, data) -> None:
        inst_id, epoch = data
        inst = self.instances[inst_id]
        lane = inst.decode
        if epoch != lane.epoch:
            return
        self._decode_advance(inst)
        finished = [rid for rid in lane.members if lane.remaining[rid] <= _EPS]
        for rid in finished:
            lane.members.remove(rid)
            del lane.remaining[rid]
            self._complete(self.requests[rid])
        while lane.admit_queue and len(lane.members) < self.max_batch["decode"]:
            rid, ready, steps = lane.admit_queue.pop(0)
            wait = self.now - ready
            if wait > _EPS:
                self.log.records[rid].tbt_hist.append((wait, 1.0))
            lane.members.append(rid)
            lane.remaining[rid] = steps
        self._decode_reschedule(inst)
        self._maybe_stop_drained(inst)

    def _complete(self, req: Request) -> None:
        rec = self.log.records[req.id]
        rec.completion_ms = self.now
        if rec.tbt_hist:
            rec.tbt_p99_ms = weighted_quantile(rec.tbt_hist, 0.99)
        ttft_ok = rec.ttft_ms is not None and rec.ttft_ms <= rec.ttft_slo_ms
        tbt_ok = rec.tbt_p99_ms is None or rec.tbt_p99_ms <= rec.tbt_slo_ms
        rec.slo_ok = bool(ttft_ok and tbt_ok)
        self.log.completed += 1
        self._win_completed += 1
        self._win_slo_ok += int(rec.slo_ok)

    # ------------------------------------------------------------------
    # Scaling
    # ------------------------------------------------------------------
    def _on_instance_started(self, inst_id: int) -> None:
        inst = self.instances[inst_id]
        if inst.state is InstanceState.STARTING:
            inst.state = InstanceState.ACTIVE
            self._flush_waiting()

    def _flush_waiting(self) -> None:
        for pool_name in ("image", "text", "prefill", "decode"):
            waiting = self.pool_waiting[pool_name]
            if not waiting:
                continue
            self.pool_waiting[pool_name] = []
            for entry in waiting:
                tag = entry[0]
                if tag == "img":
                    self._route_to_image_pool(self.requests[entry[1]])
                elif tag == "mono":
                    req = self.requests[entry[1]]
                    pool = self._active(self._image_pool_name())
                    inst = pol.route_text(req, pool, self.model.architecture,
                                          self.policies.router, self.rr_state)
                    if inst is None:
                        self.pool_waiting["image"].append(entry)
                        continue
                    self._reserve(inst, req, text=True, image=True)
                    self._enqueue_shard(inst, req, list(range(len(req.images))), count_pending=False)
                elif tag == "text":
                    self._route_to_text_pool(self.requests[entry[1]], transfer_done=entry[2])
                elif tag == "decode":
                    target = pol.route_decode(self._active("decode"), self.rr_state)
                    if target is None:
                        self.pool_waiting["decode"].append(entry)
                        continue
                    delay = sample_transfer_ms(self.transfer_medium, self.rng)
                    self._push(self.now + delay, EV_DECODE_ARRIVAL, (entry[1], target.id, entry[2]))

    def _pools_snapshot(self) -> dict[str, PoolState]:
        pools: dict[str, PoolState] = {}
        for pool_name, tp in self._pool_tp.items():
            live = [
                i for i in self.instances.values()
                if i.pool == pool_name and i.state in (InstanceState.ACTIVE, InstanceState.STARTING)
            ]
            pools[pool_name] = PoolState(count=len(live), tp=tp)
        return pools

    def _on_scale_tick(self, _data) -> None:
        interval_s = self.scale_interval_ms / 1000.0
        window = pol.LoadWindow(
            window_ms=self.scale_interval_ms,
            image_token_rate=self._win_image_tokens / interval_s,
            text_token_rate=self._win_text_tokens / interval_s,
            output_token_rate=self._win_output_tokens / interval_s,
            slo_attainment=(self._win_slo_ok / self._win_completed) if self._win_completed else 1.0,
            completed=self._win_completed,
            queue_delay_ms={
                s: (tot / n if n else 0.0) for s, (tot, n) in self._win_wait.items()
            },
        )
        decision = self.autoscaler.decide(window, self._pools_snapshot())
        self.apply_scaling(decision)
        self._win_reset()
        next_tick = self.now + self.scale_interval_ms
        if next_tick <= self.horizon_ms:
            self._push(next_tick, EV_SCALE_TICK)

    def apply_scaling(self, decision: pol.ScalingDecision) -> None:
        additions: list[tuple[str, int]] = []
        event = {"time_ms": self.now, "targets": dict(decision.targets), "flags": list(decision.flags)}
        for pool_name, target in decision.targets.items():
            tp = decision.tp[pool_name]
            live = [
                i for i in self.instances.values()
                if i.pool == pool_name and i.state in (InstanceState.ACTIVE, InstanceState.STARTING)
            ]
            delta = target - len(live)
            if delta > 0:
                additions.extend([(pool_name, tp)] * delta)
            elif delta < 0:
                active = [i for i in live if i.state is InstanceState.ACTIVE]
                floor = 1 if pool_name in ("text", "prefill", "decode", "monolith") else 0
                starting = [i for i in live if i.state is InstanceState.STARTING]
                to_remove = -delta
                # Cancel instances that never started first, newest first.
                for inst in sorted(starting, key=lambda i: -i.id):
                    if to_remove == 0:
                        break
                    inst.state = InstanceState.STOPPED
                    inst.stopped_ms = self.now
                    to_remove -= 1
                drainable = sorted(active, key=lambda i: -i.id)
                keep = max(floor, len(active) - to_remove)
                for inst in drainable[: len(active) - keep]:
                    inst.state = InstanceState.DRAINING
                    self._maybe_stop_drained(inst)
        if additions:
            views = self._server_views()
            placements, unplaced, ok = pol.place(additions, views, self.policies.placement)
            for pool_name, tp, server_id in placements:
                self._spawn(pool_name, tp, server_id, starting=True)
            if unplaced:
                event["flags"].append(f"unplaced: {unplaced}")
        self._allocation_changed()
        self.log.scale_events.append(event)

    def _server_views(self) -> list[ServerView]:
        views = []
        for s in self.servers.values():
            used = sum(
                i.tp for i in self.instances.values()
                if i.server_id == s.server_id and i.state is not InstanceState.STOPPED
            )
            hosts_text = any(
                i.pool in ("text", "prefill", "decode", "monolith")
                for i in self.instances.values()
                if i.server_id == s.server_id and i.state is not InstanceState.STOPPED
            )
            views.append(ServerView(s.server_id, s.gpus, s.gpus - used, hosts_text))
        return views

    def _maybe_stop_drained(self, inst: Instance) -> None:
        if inst.state is InstanceState.DRAINING and inst.idle():
            inst.state = InstanceState.STOPPED
            inst.stopped_ms = self.now
            self._allocation_changed()

    # ------------------------------------------------------------------
    # Invariant checks (test mode)
    # ------------------------------------------------------------------
    def _check_invariants(self) -> None:
        for inst in self.instances.values():
            if inst.state is InstanceState.STOPPED:
                continue
            t = sum(v[0] for v in self._reserved[inst.id].values())
            i = sum(v[1] for v in self._reserved[inst.id].values())
            assert inst.pending_text_tokens == t, (
                f"{inst}: pending text {inst.pending_text_tokens} != tracked {t}"
            )
            assert inst.pending_image_tokens == i, (
                f"{inst}: pending image {inst.pending_image_tokens} != tracked {i}"
            )
        for s in self.servers.values():
            used = sum(
                i.tp for i in self.instances.values()
                if i.server_id == s.server_id and i.state is not InstanceState.STOPPED
            )
            assert used <= s.gpus, f"server {s.server_id} oversubscribed: {used}/{s.gpus}"


def run_simulation(**kwargs) -> MetricsLog:
    return Simulation(**kwargs).run()
