import numpy as np
import pytest

from lmmsim.core import get_model_spec
from lmmsim.workload import (
    BurstEpisode,
    GeneratorConfig,
    TraceError,
    fit_tail_exponent,
    generate,
    load_trace,
    summarize,
    write_trace,
)

INTERNVL = get_model_spec("internvl-26b")
LLAMA = get_model_spec("llama3.2-11b")


def make_trace(tmp_path, rows, header="arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens"):
    path = tmp_path / "trace.csv"
    path.write_text("\n".join([header] + rows) + ("\n" if rows else "\n"))
    return path


class TestLoadTrace:
    def test_image_tokens_derived(self, tmp_path):
        path = make_trace(tmp_path, ["0,vision,100,1,896x896,64"])
        result = load_trace(path, INTERNVL)
        assert result.malformed_rows == 0
        req = result.requests[0]
        assert req.text_tokens == 100
        assert req.total_image_tokens == 1280
        assert req.output_tokens == 64

    def test_empty_file(self, tmp_path):
        path = make_trace(tmp_path, [])
        result = load_trace(path, INTERNVL)
        assert result.requests == []
        assert result.malformed_rows == 0

    def test_rows_sorted_by_arrival(self, tmp_path):
        path = make_trace(tmp_path, [
            "500,chat,10,0,,1",
            "100,chat,20,0,,1",
            "300,chat,30,0,,1",
        ])
        result = load_trace(path, INTERNVL)
        arrivals = [r.arrival_ms for r in result.requests]
        assert arrivals == sorted(arrivals)

    def test_malformed_rows_counted(self, tmp_path):
        rows = [f"{i},chat,10,0,,1" for i in range(200)]
        rows.append("bad,chat,x,0,,1")
        path = make_trace(tmp_path, rows)
        result = load_trace(path, INTERNVL)
        assert result.malformed_rows == 1
        assert len(result.requests) == 200

    def test_too_many_malformed_is_hard_error(self, tmp_path):
        rows = ["0,chat,10,0,,1", "bad,chat,x,0,,1"]
        path = make_trace(tmp_path, rows)
        with pytest.raises(TraceError):
            load_trace(path, INTERNVL)

    def test_missing_file(self, tmp_path):
        with pytest.raises(TraceError):
            load_trace(tmp_path / "nope.csv", INTERNVL)

    def test_missing_columns(self, tmp_path):
        path = make_trace(tmp_path, ["1,2"], header="arrival_ms,text_tokens")
        with pytest.raises(TraceError):
            load_trace(path, INTERNVL)

    def test_round_trip(self, tmp_path):
        cfg = GeneratorConfig(model=INTERNVL, base_rate=20, seed=3)
        reqs = generate(cfg, 20_000)
        path = tmp_path / "rt.csv"
        write_trace(path, reqs)
        back = load_trace(path, INTERNVL)
        assert len(back.requests) == len(reqs)
        assert [r.total_image_tokens for r in back.requests] == [
            r.total_image_tokens for r in reqs
        ]


class TestGenerator:
    def test_deterministic_under_seed(self):
        cfg = GeneratorConfig(model=INTERNVL, base_rate=50, seed=11)
        a = generate(cfg, 60_000)
        b = generate(cfg, 60_000)
        assert [(r.arrival_ms, r.text_tokens, r.total_image_tokens) for r in a] == [
            (r.arrival_ms, r.text_tokens, r.total_image_tokens) for r in b
        ]

    def test_seed_changes_stream(self):
        a = generate(GeneratorConfig(model=INTERNVL, base_rate=50, seed=1), 60_000)
        b = generate(GeneratorConfig(model=INTERNVL, base_rate=50, seed=2), 60_000)
        assert [r.arrival_ms for r in a] != [r.arrival_ms for r in b]

    def test_image_counts_bounded(self):
        cfg = GeneratorConfig(
            model=INTERNVL, base_rate=100, seed=5, image_request_fraction=1.0,
            burst_episodes=(BurstEpisode(0, 30_000, 1.0, image_multiplier=4.0),),
        )
        reqs = generate(cfg, 60_000)
        assert all(0 <= len(r.images) <= 16 for r in reqs)
        assert all(img.width_px > 0 and img.height_px > 0 for r in reqs for img in r.images)

    def test_invalid_config(self):
        cfg = GeneratorConfig(model=INTERNVL, base_rate=0)
        with pytest.raises(ValueError):
            generate(cfg, 1000)
        cfg = GeneratorConfig(model=INTERNVL, images_per_request={1: 0.5})
        with pytest.raises(ValueError):
            generate(cfg, 1000)

    def test_image_prompt_tail_exponent(self):
        # Image-text totals above the image-token atoms follow the configured
        # power law; fitted exponent recovers it.
        cfg = GeneratorConfig(
            model=INTERNVL,
            base_rate=240,
            seed=42,
            image_request_fraction=1.0,
            images_per_request={1: 0.7, 2: 0.3},
            image_req_len_alpha=4.4,
            image_req_len_min=4096,
        )
        reqs = generate(cfg, 500_000)
        assert len(reqs) >= 100_000
        totals = [r.text_tokens + r.total_image_tokens for r in reqs]
        alpha = fit_tail_exponent(totals, tail_fraction=0.3)
        assert alpha == pytest.approx(4.4, abs=0.3)

    def test_text_tail_exponent(self):
        cfg = GeneratorConfig(
            model=INTERNVL, base_rate=240, seed=9, image_request_fraction=0.0,
            text_len_alpha=2.9, text_len_min=256,
        )
        reqs = generate(cfg, 500_000)
        alpha = fit_tail_exponent([r.text_tokens for r in reqs], tail_fraction=0.3)
        assert alpha == pytest.approx(2.9, abs=0.3)

    def test_burst_rate_multiplier(self):
        mult = 3.0
        ratios = []
        for seed in range(10):
            cfg = GeneratorConfig(
                model=INTERNVL, base_rate=40, seed=seed,
                burst_episodes=(BurstEpisode(100_000, 100_000, rate_multiplier=mult),),
            )
            reqs = generate(cfg, 300_000)
            burst = sum(1 for r in reqs if 100_000 <= r.arrival_ms < 200_000)
            base = sum(1 for r in reqs if r.arrival_ms < 100_000 or r.arrival_ms >= 200_000)
            ratios.append((burst / 100.0) / (base / 200.0))
        mean_ratio = sum(ratios) / len(ratios)
        assert mean_ratio == pytest.approx(mult, rel=0.10)


class TestSummarize:
    def test_all_text_stream(self):
        cfg = GeneratorConfig(model=INTERNVL, base_rate=50, seed=1, image_request_fraction=0.0)
        s = summarize(generate(cfg, 60_000))
        assert s.median_image_qps == 0.0
        assert s.image_request_fraction == 0.0

    def test_identical_requests(self, tmp_path):
        rows = [f"{i * 1000},chat,77,0,,5" for i in range(20)]
        path = tmp_path / "t.csv"
        path.write_text("arrival_ms,service_id,text_tokens,num_images,image_dims,output_tokens\n"
                        + "\n".join(rows) + "\n")
        result = load_trace(path, INTERNVL)
        s = summarize(result.requests)
        assert s.median_prompt_tokens == 77
        assert s.p95_prompt_tokens == 77

    def test_empty_stream(self):
        s = summarize([])
        assert s.empty

    def test_image_qps_counted(self):
        cfg = GeneratorConfig(model=INTERNVL, base_rate=50, seed=1, image_request_fraction=1.0)
        s = summarize(generate(cfg, 120_000))
        assert s.median_image_qps > 0
        assert s.median_images_per_request >= 1
