"""Workload sources: trace replay and a bursty synthetic generator.

The generator produces Poisson arrivals with configurable burst episodes,
power-law prompt lengths per modality class, and an empirical images-per-
request distribution. Everything is deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ImageSpec, ModelSpec, Request


class TraceError(ValueError):
    """Unreadable or badly malformed trace file."""


TRACE_COLUMNS = ["arrival_ms", "service_id", "text_tokens", "num_images", "image_dims", "output_tokens"]


@dataclass
class TraceRecord:
    arrival_ms: float
    service_id: str
    text_tokens: int
    image_dims: list[tuple[int, int]]
    output_tokens: int


@dataclass
class TraceLoadResult:
    requests: list[Request]
    malformed_rows: int
    total_rows: int


def _parse_dims(cell: str) -> list[tuple[int, int]]:
    cell = cell.strip()
    if not cell:
        return []
    dims = []
    for part in cell.split(";"):
        w, h = part.lower().split("x")
        dims.append((int(w), int(h)))
    return dims


def load_trace(path: str | Path, model: ModelSpec, max_malformed_frac: float = 0.01) -> TraceLoadResult:
    """Parse a trace CSV into Requests sorted by arrival time.

    Malformed rows are counted and skipped; more than `max_malformed_frac`
    of them is a hard error.
    """
    path = Path(path)
    if not path.exists():
        raise TraceError(f"trace file not found: {path}")
    records: list[TraceRecord] = []
    malformed = 0
    total = 0
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return TraceLoadResult([], 0, 0)
        missing = [c for c in TRACE_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise TraceError(f"trace {path} missing columns: {missing}")
        for row in reader:
            total += 1
            try:
                dims = _parse_dims(row["image_dims"] or "")
                num_images = int(row["num_images"])
                if num_images != len(dims):
                    raise ValueError("num_images does not match image_dims")
                rec = TraceRecord(
                    arrival_ms=float(row["arrival_ms"]),
                    service_id=row["service_id"] or "default",
                    text_tokens=int(row["text_tokens"]),
                    image_dims=dims,
                    output_tokens=int(row["output_tokens"]),
                )
                if rec.arrival_ms < 0 or rec.text_tokens < 0 or rec.output_tokens < 1:
                    raise ValueError("negative counts")
                records.append(rec)
            except (ValueError, KeyError):
                malformed += 1
    if total > 0 and malformed / total > max_malformed_frac:
        raise TraceError(f"{malformed}/{total} malformed rows in {path} exceeds {max_malformed_frac:.0%}")
    records.sort(key=lambda r: r.arrival_ms)
    requests = []
    for i, rec in enumerate(records):
        images = tuple(ImageSpec.from_dims(w, h, model) for w, h in rec.image_dims)
        requests.append(
            Request(
                id=i,
                arrival_ms=rec.arrival_ms,
                text_tokens=rec.text_tokens,
                images=images,
                output_tokens=rec.output_tokens,
                service_id=rec.service_id,
            )
        )
    return TraceLoadResult(requests, malformed, total)


def write_trace(path: str | Path, requests: list[Request]) -> None:
    """Write requests in the trace CSV schema (inverse of load_trace)."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for r in requests:
            dims = ";".join(f"{img.width_px}x{img.height_px}" for img in r.images)
            writer.writerow(
                [f"{r.arrival_ms:.3f}", r.service_id, r.text_tokens, len(r.images), dims, r.output_tokens]
            )


# ----------------------------------------------------------------------
# Synthetic generation
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class BurstEpisode:
    start_ms: float
    duration_ms: float
    rate_multiplier: float = 1.0
    image_multiplier: float = 1.0

    @property
    def end_ms(self) -> float:
        return self.start_ms + self.duration_ms


# Images-per-request distribution for image-bearing requests; heavy tail up
# to 16 covers multi-image and video-style traffic.
DEFAULT_IMAGES_PER_REQUEST = {1: 0.55, 2: 0.20, 3: 0.08, 4: 0.06, 5: 0.04, 6: 0.03, 8: 0.02, 12: 0.01, 16: 0.01}


@dataclass
class GeneratorConfig:
    model: ModelSpec
    base_rate: float = 5.0  # requests/sec
    burst_episodes: tuple[BurstEpisode, ...] = ()
    text_len_alpha: float = 2.9
    image_req_len_alpha: float = 4.4
    text_len_min: int = 16
    text_len_max: int = 32768
    image_req_len_min: int = 16
    image_req_len_max: int = 32768
    image_request_fraction: float = 0.3
    images_per_request: dict[int, float] = field(
        default_factory=lambda: dict(DEFAULT_IMAGES_PER_REQUEST)
    )
    image_dim_median_px: float = 500.0
    image_dim_sigma: float = 0.55
    image_dim_min_px: int = 64
    image_dim_max_px: int = 4096
    output_len_median: int = 128
    output_len_sigma: float = 0.7
    output_len_max: int = 2048
    seed: int = 0

    def validate(self) -> None:
        if self.base_rate <= 0:
            raise ValueError("base_rate must be > 0")
        if not 0.0 <= self.image_request_fraction <= 1.0:
            raise ValueError("image_request_fraction must be in [0, 1]")
        if self.text_len_alpha <= 1 or self.image_req_len_alpha <= 1:
            raise ValueError("power-law exponents must be > 1")
        total = sum(self.images_per_request.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"images_per_request probabilities sum to {total}, expected 1")
        if any(k < 1 or k > 16 for k in self.images_per_request):
            raise ValueError("images_per_request keys must be in 1..16")


def sample_power_law(rng: np.random.Generator, alpha: float, lo: int, hi: int, size: int | None = None):
    """Pareto samples with density exponent alpha, clamped to [lo, hi]."""
    u = rng.random(size)
    x = lo * u ** (-1.0 / (alpha - 1.0))
    return np.clip(x, lo, hi)


def fit_tail_exponent(samples, tail_fraction: float = 0.1) -> float:
    """Hill estimator of the power-law density exponent on the upper tail."""
    xs = np.sort(np.asarray(samples, dtype=float))
    n = len(xs)
    k = max(10, int(n * tail_fraction))
    if k >= n:
        raise ValueError("not enough samples for a tail fit")
    xmin = xs[n - k - 1]
    tail = xs[n - k :]
    return 1.0 + k / float(np.sum(np.log(tail / xmin)))


def _rate_segments(cfg: GeneratorConfig, horizon_ms: float) -> list[tuple[float, float, float, float]]:
    """Piecewise-constant (start, end, rate_mult, image_mult) covering the horizon."""
    edges = {0.0, horizon_ms}
    for ep in cfg.burst_episodes:
        edges.add(min(max(ep.start_ms, 0.0), horizon_ms))
        edges.add(min(max(ep.end_ms, 0.0), horizon_ms))
    points = sorted(edges)
    segments = []
    for lo, hi in zip(points, points[1:]):
        if hi <= lo:
            continue
        mid = (lo + hi) / 2.0
        rate_mult = 1.0
        img_mult = 1.0
        for ep in cfg.burst_episodes:
            if ep.start_ms <= mid < ep.end_ms:
                rate_mult *= ep.rate_multiplier
                img_mult *= ep.image_multiplier
        segments.append((lo, hi, rate_mult, img_mult))
    return segments


def generate(cfg: GeneratorConfig, horizon_ms: float) -> list[Request]:
    """Synthesize a request stream over [0, horizon_ms)."""
    if horizon_ms <= 0:
        raise ValueError("horizon_ms must be > 0")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    img_counts = sorted(cfg.images_per_request)
    img_probs = np.array([cfg.images_per_request[k] for k in img_counts])
    img_probs = img_probs / img_probs.sum()

    requests: list[Request] = []
    rid = 0
    for seg_start, seg_end, rate_mult, img_mult in _rate_segments(cfg, horizon_ms):
        rate_per_ms = cfg.base_rate * rate_mult / 1000.0
        t = seg_start
        while True:
            t += rng.exponential(1.0 / rate_per_ms)
            if t >= seg_end:
                break
            is_image = rng.random() < cfg.image_request_fraction
            if is_image:
                n_images = int(img_counts[rng.choice(len(img_counts), p=img_probs)])
                if img_mult != 1.0:
                    n_images = min(16, max(1, int(round(n_images * img_mult))))
                images = []
                for _ in range(n_images):
                    w = int(np.clip(cfg.image_dim_median_px * math.exp(rng.normal(0.0, cfg.image_dim_sigma)),
                                    cfg.image_dim_min_px, cfg.image_dim_max_px))
                    h = int(np.clip(cfg.image_dim_median_px * math.exp(rng.normal(0.0, cfg.image_dim_sigma)),
                                    cfg.image_dim_min_px, cfg.image_dim_max_px))
                    images.append(ImageSpec.from_dims(w, h, cfg.model))
                img_tokens = sum(i.image_tokens for i in images)
                # Total prompt length follows its own power law; text absorbs
                # whatever the images do not account for.
                target_total = float(sample_power_law(rng, cfg.image_req_len_alpha,
                                                      cfg.image_req_len_min, cfg.image_req_len_max))
                text_tokens = max(cfg.text_len_min, int(round(target_total)) - img_tokens)
                service = "video" if n_images >= 8 else "vision"
            else:
                images = []
                text_tokens = int(round(float(sample_power_law(rng, cfg.text_len_alpha,
                                                               cfg.text_len_min, cfg.text_len_max))))
                service = "chat"
            out = int(np.clip(cfg.output_len_median * math.exp(rng.normal(0.0, cfg.output_len_sigma)),
                              1, cfg.output_len_max))
            requests.append(
                Request(
                    id=rid,
                    arrival_ms=t,
                    text_tokens=text_tokens,
                    images=tuple(images),
                    output_tokens=out,
                    service_id=service,
                )
            )
            rid += 1
    return requests


# ----------------------------------------------------------------------
# Stream summary
# ----------------------------------------------------------------------
@dataclass
class WorkloadSummary:
    empty: bool
    n_requests: int = 0
    duration_s: float = 0.0
    median_prompt_tokens: float = 0.0
    p95_prompt_tokens: float = 0.0
    median_images_per_request: float = 0.0
    p95_images_per_request: float = 0.0
    median_image_tiles: float = 0.0
    median_image_qps: float = 0.0
    image_request_fraction: float = 0.0
    per_service: dict[str, int] = field(default_factory=dict)


def summarize(requests: list[Request], window_s: float = 60.0) -> WorkloadSummary:
    """Aggregate prompt/image statistics used by initial pool sizing."""
    if not requests:
        return WorkloadSummary(empty=True)
    prompts = np.array([r.text_tokens + r.total_image_tokens for r in requests])
    image_reqs = [r for r in requests if r.is_multimodal]
    images = np.array([len(r.images) for r in image_reqs]) if image_reqs else np.array([0.0])
    duration_ms = max(r.arrival_ms for r in requests) - min(r.arrival_ms for r in requests)
    duration_s = max(duration_ms / 1000.0, 1e-9)
    per_service: dict[str, int] = {}
    for r in requests:
        per_service[r.service_id] = per_service.get(r.service_id, 0) + 1
    if image_reqs:
        # Median over fixed windows of the image arrival rate.
        t0 = min(r.arrival_ms for r in requests)
        n_windows = max(1, int(math.ceil(duration_s / window_s)))
        counts = np.zeros(n_windows)
        for r in image_reqs:
            w = min(n_windows - 1, int((r.arrival_ms - t0) / 1000.0 / window_s))
            counts[w] += len(r.images)
        median_qps = float(np.median(counts) / window_s)
    else:
        median_qps = 0.0
    return WorkloadSummary(
        empty=False,
        n_requests=len(requests),
        duration_s=duration_s,
        median_prompt_tokens=float(np.median(prompts)),
        p95_prompt_tokens=float(np.percentile(prompts, 95)),
        median_images_per_request=float(np.median(images)) if image_reqs else 0.0,
        p95_images_per_request=float(np.percentile(images, 95)) if image_reqs else 0.0,
        median_image_tiles=(
            float(np.median([img.tiles for r in image_reqs for img in r.images]))
            if image_reqs
            else 0.0
        ),
        median_image_qps=median_qps,
        image_request_fraction=len(image_reqs) / len(requests),
        per_service=per_service,
    )
