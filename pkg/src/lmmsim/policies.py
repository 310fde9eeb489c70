"""Pluggable routing, scheduling, autoscaling, sharding, and placement policies.

Each axis ships the load-aware policy plus the baseline it is ablated
against (round-robin routing, FIFO scheduling, no autoscaling, spread
placement).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from .core import Architecture, ModelSpec, SLOSpec, StageKind
from .profiles import LatencyProfile
from .workload import WorkloadSummary


class RouterKind(str, Enum):
    ROUND_ROBIN = "round_robin"
    LEAST_PENDING = "least_pending"


class SchedulerKind(str, Enum):
    FIFO = "fifo"
    SLO_PRIORITY = "slo_priority"


class AutoscalerKind(str, Enum):
    NONE = "none"
    TOKEN_AWARE = "token_aware"


class PlacementKind(str, Enum):
    SPREAD = "spread"
    COLOCATE = "colocate"


class Topology(str, Enum):
    MONOLITH = "monolith"
    DECOUPLED = "decoupled"
    DECOUPLED_PD = "decoupled_pd"
    # Prefill/decode split with encoders still coupled to prefill instances;
    # the baseline the fully decoupled PD setup is compared against.
    MONOLITH_PD = "monolith_pd"


@dataclass(frozen=True)
class PolicySet:
    router: RouterKind = RouterKind.LEAST_PENDING
    scheduler: SchedulerKind = SchedulerKind.SLO_PRIORITY
    autoscaler: AutoscalerKind = AutoscalerKind.NONE
    placement: PlacementKind = PlacementKind.COLOCATE
    topology: Topology = Topology.DECOUPLED
    max_fanout: int = 8
    aging_slo_fraction: float = 0.5
    attainment_threshold: float = 0.99
    shrink_utilization: float = 0.7
    shrink_windows: int = 2
    # Queueing budget divisor when sizing pools: >1 targets tail latency
    # rather than mean latency inside each stage's SLO share.
    capacity_tail_factor: float = 1.0


@dataclass
class ScalingDecision:
    targets: dict[str, int]  # instance kind name -> replica count
    tp: dict[str, int]
    max_batch: dict[str, int] = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


@dataclass
class LoadWindow:
    window_ms: float
    image_token_rate: float = 0.0  # tokens/sec offered
    text_token_rate: float = 0.0
    output_token_rate: float = 0.0
    slo_attainment: float = 1.0
    completed: int = 0
    queue_delay_ms: dict[str, float] = field(default_factory=dict)  # stage -> mean wait

    @property
    def total_token_rate(self) -> float:
        return self.image_token_rate + self.text_token_rate


# ----------------------------------------------------------------------
# Routing
# ----------------------------------------------------------------------
def split_by_tiles(tile_sizes: list[int], n_shards: int) -> list[list[int]]:
    """Greedy largest-first partition of image indices balanced by tile count."""
    n_shards = max(1, min(n_shards, len(tile_sizes)))
    order = sorted(range(len(tile_sizes)), key=lambda i: (-tile_sizes[i], i))
    loads = [0] * n_shards
    shards: list[list[int]] = [[] for _ in range(n_shards)]
    for idx in order:
        best = min(range(n_shards), key=lambda s: (loads[s], s))
        shards[best].append(idx)
        loads[best] += tile_sizes[idx]
    return [sorted(s) for s in shards if s]


def route_image(request, instances, router: RouterKind, max_fanout: int, rr_state: dict):
    """Assign a request's images to image instances.

    Sharding across instances comes with the decoupled topology; the router
    only decides which instances receive the shards. Least-pending picks the
    least image-token-loaded instances, round-robin walks the pool blindly.
    Returns a list of (instance, image_indices).
    """
    if not instances:
        return None
    tile_sizes = [img.tiles for img in request.images]
    fanout = min(len(tile_sizes), len(instances), max_fanout)
    if router is RouterKind.ROUND_ROBIN:
        ordered = sorted(instances, key=lambda i: i.id)
        pos = rr_state.get("image", 0)
        rr_state["image"] = pos + fanout
        chosen = [ordered[(pos + k) % len(ordered)] for k in range(fanout)]
    else:
        chosen = sorted(instances, key=lambda i: (i.pending_image_tokens, i.id))[:fanout]
    shards = split_by_tiles(tile_sizes, len(chosen))
    return [(chosen[k], shard) for k, shard in enumerate(shards)]


def route_text(request, instances, architecture: Architecture, router: RouterKind, rr_state: dict):
    """Pick the text (or prefill) instance for a request's LLM work."""
    if not instances:
        return None
    if router is RouterKind.ROUND_ROBIN:
        ordered = sorted(instances, key=lambda i: i.id)
        pos = rr_state.get("text", 0) % len(ordered)
        rr_state["text"] = pos + 1
        return ordered[pos]
    if architecture is Architecture.CRO_ATTN:
        key = lambda i: (i.pending_text_tokens, i.id)
    else:
        key = lambda i: (i.pending_text_tokens + i.pending_image_tokens, i.id)
    return min(instances, key=key)


def route_decode(instances, rr_state: dict):
    """Decode pool routing: least active decode load, ties by id."""
    if not instances:
        return None
    return min(instances, key=lambda i: (i.decode_load(), i.id))


# ----------------------------------------------------------------------
# Instance-level scheduling
# ----------------------------------------------------------------------
def schedule_order(items, now: float, scheduler: SchedulerKind, aging_slo_fraction: float):
    """Indices of runnable items in execution order.

    SLO-priority runs the smallest runnable item first, except that items
    older than a fraction of their TTFT SLO regain FIFO priority, which
    bounds starvation.
    """
    runnable = [i for i, it in enumerate(items) if it.runnable]
    if scheduler is SchedulerKind.FIFO:
        return sorted(runnable, key=lambda i: (items[i].enqueue_ms, items[i].seq))
    aged = []
    fresh = []
    for i in runnable:
        it = items[i]
        if now - it.enqueue_ms > aging_slo_fraction * it.ttft_slo_ms:
            aged.append(i)
        else:
            fresh.append(i)
    aged.sort(key=lambda i: (items[i].enqueue_ms, items[i].seq))
    fresh.sort(key=lambda i: (items[i].size_tokens, items[i].enqueue_ms, items[i].seq))
    return aged + fresh


def schedule_next(items, now: float, scheduler: SchedulerKind, aging_slo_fraction: float = 0.5):
    """Index of the next item to run, or None if nothing is runnable."""
    order = schedule_order(items, now, scheduler, aging_slo_fraction)
    return order[0] if order else None


# ----------------------------------------------------------------------
# Autoscaling
# ----------------------------------------------------------------------
@dataclass
class PoolState:
    count: int
    tp: int


class TokenAwareAutoscaler:
    """Replica targets from offered token load over per-stage max capacity.

    Scale-downs require consecutive low-utilization windows; an SLO
    attainment shortfall adds one replica to the stage with the largest
    queueing share.
    """

    def __init__(self, profile: LatencyProfile, slo: SLOSpec, policies: PolicySet,
                 topology: Topology, gpu_budget: int, decode_max_batch: int = 48,
                 stage_max_batch: dict | None = None):
        self.profile = profile
        self.slo = slo
        self.policies = policies
        self.topology = topology
        self.gpu_budget = gpu_budget
        self.decode_max_batch = decode_max_batch
        # Configured per-stage batch caps; batching inflates completion
        # latency of compute-bound stages, which capacity planning prices in.
        self.stage_max_batch = {"encode": 1, "prefill": 1}
        if stage_max_batch:
            self.stage_max_batch.update(stage_max_batch)
        self._low_windows: dict[str, int] = {}

    def _capacity(self, kind: str, tp: int) -> float:
        from .profiles import batch_aware_capacity_tokens_per_s

        p, slo = self.profile, self.slo
        tail = max(self.policies.capacity_tail_factor, 1e-9)
        if kind == "image":
            service, job = p.stage_job(StageKind.ENCODE, tp)
            share = p.stage_slo_share_ms(StageKind.ENCODE, slo)
            slack = (share - service) / tail
            cap = self.stage_max_batch["encode"]
            return max(batch_aware_capacity_tokens_per_s(service, job, slack, cap), 1e-9)
        if kind in ("text", "prefill"):
            service, job = p.stage_job(StageKind.PREFILL, tp)
            share = p.stage_slo_share_ms(StageKind.PREFILL, slo)
            slack = (share - service) / tail
            cap = self.stage_max_batch["prefill"]
            return max(batch_aware_capacity_tokens_per_s(service, job, slack, cap), 1e-9)
        if kind == "decode":
            return max(p.decode_max_capacity(tp, slo, self.decode_max_batch), 1e-9)
        if kind == "monolith":
            from .profiles import _interp_tp

            service, job = p.monolith_job(tp)
            table = p.prefill_ms_per_token or p.prefill_self_ms_per_token
            text_service = slo.ttft_base_text_ms * _interp_tp(table, tp) / _interp_tp(
                table, p.model.default_tp_text)
            slack = min(slo.ttft_slo_ms(True) - service,
                        slo.ttft_slo_ms(False) - text_service) / tail
            cap = self.stage_max_batch["prefill"]
            return max(batch_aware_capacity_tokens_per_s(service, job, slack, cap), 1e-9)
        raise ValueError(f"unknown pool kind {kind}")

    def _load(self, kind: str, window: LoadWindow) -> float:
        arch = self.profile.model.architecture
        if kind == "image":
            return window.image_token_rate
        if kind in ("text", "prefill"):
            if arch is Architecture.CRO_ATTN:
                return window.text_token_rate
            return window.total_token_rate
        if kind == "decode":
            return window.output_token_rate
        if kind == "monolith":
            return window.total_token_rate
        raise ValueError(f"unknown pool kind {kind}")

    def _target(self, kind: str, window: LoadWindow, current: PoolState) -> int:
        mc = self._capacity(kind, current.tp)
        ml = self._load(kind, window)
        want = max(1, math.ceil(ml / mc))
        if want < current.count:
            # Hysteresis: only shrink after sustained low utilization.
            low = ml < self.policies.shrink_utilization * current.count * mc
            streak = self._low_windows.get(kind, 0) + 1 if low else 0
            self._low_windows[kind] = streak
            if streak < self.policies.shrink_windows:
                return current.count
            return want
        self._low_windows[kind] = 0
        return want

    def decide(self, window: LoadWindow, pools: dict[str, PoolState]) -> ScalingDecision:
        targets = {}
        tp = {}
        flags = []
        for kind, state in pools.items():
            targets[kind] = self._target(kind, window, state)
            tp[kind] = state.tp

        if window.completed > 0 and window.slo_attainment < self.policies.attainment_threshold:
            stage_for = {"encode": "image", "prefill": "text"}
            delays = {s: window.queue_delay_ms.get(s, 0.0) for s in stage_for}
            worst = max(delays, key=lambda s: (delays[s], s))
            pool = stage_for[worst]
            if pool not in targets:  # monolith and PD fall back to their main pool
                pool = next(iter(targets))
            targets[pool] += 1
            flags.append(f"attainment {window.slo_attainment:.3f} -> +1 {pool}")

        # Clamp to GPU inventory, trimming the largest GPU consumer first.
        def used():
            return sum(targets[k] * tp[k] for k in targets)

        if used() > self.gpu_budget:
            flags.append("clamped to inventory")
        while used() > self.gpu_budget:
            candidates = [k for k in targets if targets[k] > 1]
            if not candidates:
                break
            victim = max(candidates, key=lambda k: (targets[k] * tp[k], k))
            targets[victim] -= 1
        return ScalingDecision(targets=targets, tp=tp, flags=flags)


def initial_sizing(summary: WorkloadSummary, profile: LatencyProfile, slo: SLOSpec,
                   image_tp: int, text_tp: int,
                   overprovision: tuple[int, int] = (4, 4)) -> ScalingDecision:
    """Starting pool sizes from workload history, or overprovision without one.

    Image instances cover the median image arrival rate times the median
    per-image encode latency; text instances follow from the median number
    of images per request.
    """
    if summary.empty or summary.median_image_qps <= 0:
        img, text = overprovision
        return ScalingDecision(
            targets={"image": img, "text": text},
            tp={"image": image_tp, "text": text_tp},
            flags=["no history: overprovisioned"],
        )
    tiles = max(1, int(round(summary.median_image_tiles)))
    encode_s = profile.encode_latency(tiles, image_tp) / 1000.0
    n_image = max(1, math.ceil(summary.median_image_qps * encode_s))
    images_per_req = max(1.0, summary.median_images_per_request)
    n_text = max(1, math.ceil(n_image / images_per_req))
    return ScalingDecision(
        targets={"image": n_image, "text": n_text},
        tp={"image": image_tp, "text": text_tp},
    )


def select_sharding(kind: str, model: ModelSpec, profile: LatencyProfile, slo: SLOSpec) -> tuple[int, bool]:
    """TP degree maximizing per-GPU capacity among SLO-feasible choices.

    Returns (tp, feasible); when nothing meets the latency share, the
    largest supported TP is returned with feasible=False.
    """
    if kind == "image":
        stage = StageKind.ENCODE
        candidates = sorted(model.supported_tp_encoder)
    else:
        stage = StageKind.PREFILL
        candidates = [1, 2, 4, 8]
    share = profile.stage_slo_share_ms(stage, slo)
    best_tp = None
    best_score = -1.0
    for tp in candidates:
        service, _ = profile.stage_job(stage, tp)
        if service > share:
            continue
        score = profile.max_capacity(stage, tp, share) / tp
        if score > best_score + 1e-12:
            best_score = score
            best_tp = tp
    if best_tp is None:
        return candidates[-1], False
    return best_tp, True


def select_decode_max_batch(profile: LatencyProfile, slo: SLOSpec, tp: int, cap: int = 64) -> int:
    """Largest decode batch whose per-token latency still meets the TBT SLO."""
    best = 1
    for batch in range(1, cap + 1):
        if profile.tbt_latency(batch, tp) <= slo.tbt_slo_ms:
            best = batch
        else:
            break
    return best


# ----------------------------------------------------------------------
# Placement
# ----------------------------------------------------------------------
@dataclass
class ServerView:
    server_id: int
    gpus_total: int
    gpus_free: int
    hosts_text: bool = False


def place(additions: list[tuple[str, int]], servers: list[ServerView],
          mode: PlacementKind) -> tuple[list[tuple[str, int, int]], list[tuple[str, int]], bool]:
    """Map new instances to servers.

    Colocation puts one text-family instance per server first, then packs
    image instances into the leftover GPUs of those servers (best-fit),
    spilling onto the emptiest remaining servers. Spread round-robins all
    instances across servers. Returns (placements, unplaced, ok).
    """
    servers = sorted(servers, key=lambda s: s.server_id)
    placements: list[tuple[str, int, int]] = []
    unplaced: list[tuple[str, int]] = []

    if mode is PlacementKind.SPREAD:
        cursor = 0
        for kind, tp in additions:
            placed = False
            for off in range(len(servers)):
                srv = servers[(cursor + off) % len(servers)]
                if srv.gpus_free >= tp:
                    srv.gpus_free -= tp
                    placements.append((kind, tp, srv.server_id))
                    cursor = (cursor + off + 1) % len(servers)
                    placed = True
                    break
            if not placed:
                unplaced.append((kind, tp))
        return placements, unplaced, not unplaced

    text_like = [(k, tp) for k, tp in additions if k in ("text", "prefill", "decode", "monolith")]
    image_like = [(k, tp) for k, tp in additions if k == "image"]

    for kind, tp in sorted(text_like, key=lambda a: -a[1]):
        pool = [s for s in servers if s.gpus_free >= tp]
        if not pool:
            unplaced.append((kind, tp))
            continue
        fresh = [s for s in pool if not s.hosts_text]
        srv = min(fresh or pool, key=lambda s: (-s.gpus_free, s.server_id))
        srv.gpus_free -= tp
        srv.hosts_text = True
        placements.append((kind, tp, srv.server_id))

    for kind, tp in sorted(image_like, key=lambda a: -a[1]):
        pool = [s for s in servers if s.gpus_free >= tp]
        if not pool:
            unplaced.append((kind, tp))
            continue
        with_text = [s for s in pool if s.hosts_text]
        if with_text:
            srv = min(with_text, key=lambda s: (s.gpus_free, s.server_id))
        else:
            srv = min(pool, key=lambda s: (-s.gpus_free, s.server_id))
        srv.gpus_free -= tp
        placements.append((kind, tp, srv.server_id))

    return placements, unplaced, not unplaced
