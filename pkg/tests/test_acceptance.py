"""Acceptance gate: ten end-to-end guarantees, one test and one line each.

Run with ``pytest tests/test_acceptance.py -v`` for the per-criterion
pass/fail lines, or add ``-s`` to see the ACCEPTANCE summary prints.
"""

import math
import random
import threading
import time

import numpy as np
import pytest

from incrtts.domain import MelChunk, PipelineConfig
from incrtts.frontend import default_lexicon, run_frontend
from incrtts.harness import (
    LoadProfile,
    TimedRequest,
    drive_trace,
    exclude_warmup,
    make_trace,
    replay_admission_scenario,
    run_pressure_test,
)
from incrtts.scheduler import (
    CostModel,
    ModuleCost,
    RequestPool,
    SchedulerLoop,
    build_modules,
    run_iteration,
)
from incrtts.server import TtsServer, request_audio, run_client
from incrtts.synthesis import synthesize_chunks
from incrtts.vocoder import VocoderState, crossfade_curve, generate, vocode_chunk

PCM_TOLERANCE = 1.0 / 32768.0


def report(number, description):
    print(f"ACCEPTANCE {number:02d} PASS {description}")


def random_texts(count, seed):
    """Texts of 2..12 characters drawn from the bundled lexicon."""
    lexicon = default_lexicon()
    singles = sorted(c for c in lexicon.phrase_to_pinyin if len(c) == 1)
    rng = random.Random(seed)
    return ["".join(rng.choice(singles) for _ in range(rng.randint(2, 12))) for _ in range(count)]


def test_criterion_01_batch_transparency(cfg, lexicon):
    started = time.perf_counter()
    texts = random_texts(100, seed=101)
    reference = [synthesize_chunks(text, lexicon, cfg) for text in texts]

    modules = build_modules(lexicon, cfg)
    pool = RequestPool()
    streams = [pool.submit(text)[1] for text in texts]
    step = 0
    run_iteration(pool, modules, CostModel.zero(), cfg, step)
    while pool.pending():
        step += 1
        run_iteration(pool, modules, CostModel.zero(), cfg, step)

    for stream, expected in zip(streams, reference):
        chunks = list(stream)
        assert len(chunks) == len(expected.chunks)
        for got, want in zip(chunks, expected.chunks):
            assert got.sample_offset == want.sample_offset  # integer-derived: bitwise
            assert got.samples.shape == want.samples.shape
            assert np.max(np.abs(got.samples - want.samples)) <= 1e-12

    elapsed = time.perf_counter() - started
    assert elapsed < 10.0, f"criterion 1 took {elapsed:.1f}s"
    report(1, "batched execution equals sequential for 100 randomized requests")


def test_criterion_02_admission_replay():
    started = time.perf_counter()
    reports = replay_admission_scenario()
    table = [(r.frontend_ids, r.decoder_ids, r.completed_ids) for r in reports]
    assert table == [
        ((1,), (1,), ()),
        ((), (1,), ()),
        ((2, 3), (1, 2, 3), ()),
        ((), (1, 2, 3), (1,)),
        ((), (2, 3), ()),
        ((), (2, 3), (2,)),
        ((4,), (3, 4), (3,)),
        ((), (4,), ()),
        ((), (4,), ()),
        ((), (4,), (4,)),
    ]
    assert table == [
        (r.frontend_ids, r.decoder_ids, r.completed_ids) for r in replay_admission_scenario()
    ]
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"criterion 2 took {elapsed:.1f}s"
    report(2, "scripted admission replay reproduces the per-step batch membership")


def test_criterion_03_latency_bound_law(cfg, lexicon):
    started = time.perf_counter()
    iteration_seconds = 0.02
    poll = 0.003
    costs = CostModel(
        frontend=ModuleCost(0.0, 0.0),
        encoder=ModuleCost(0.0, 0.0),
        decoder=ModuleCost(iteration_seconds, 0.0),
        vocoder=ModuleCost(0.0, 0.0),
    )
    text = "欢迎大家收听今天下午新闻播报"
    low = iteration_seconds - poll
    high = 2.0 * iteration_seconds + poll

    def measure(seed):
        # Long texts keep the pool busy so iterations run back to back; the
        # jitter spreads arrival phases uniformly over one iteration period.
        rng = random.Random(seed)
        trace = [
            TimedRequest(i * 0.04 + rng.uniform(0.0, iteration_seconds), text, "long")
            for i in range(220)
        ]
        loop = SchedulerLoop(build_modules(lexicon, cfg), costs, cfg, poll_interval=poll)
        with loop:
            records = drive_trace(trace, loop.submit, cfg.sample_rate, max_clients=32)
        assert len(records) == 220
        fcls = [record.fcl for record in records]
        return fcls, [f for f in fcls if not low <= f <= high]

    fcls, violations = measure(303)
    if violations:
        # A law violation is systematic: it shifts whole iterations and
        # reproduces on a fresh trace.  A stray multi-ms stall on this
        # single-core host hits at most a request or two and does not
        # recur, so one clean re-measure distinguishes the cases.
        assert len(violations) <= 2, (
            f"{len(violations)} of {len(fcls)} FCLs outside "
            f"[{low * 1e3:.1f}, {high * 1e3:.1f}] ms: systematic, not noise"
        )
        fcls, violations = measure(404)
        assert not violations, (
            f"violations persisted on re-measure: {[f'{f * 1e3:.2f}ms' for f in violations]}"
        )

    mean = sum(fcls) / len(fcls)
    assert abs(mean - 1.5 * iteration_seconds) <= 0.1 * 1.5 * iteration_seconds, (
        f"mean FCL {mean * 1e3:.2f} ms is not within 10% of 30 ms"
    )
    elapsed = time.perf_counter() - started
    assert elapsed < 30.0, f"criterion 3 took {elapsed:.1f}s"
    report(3, "FCL lies in [T, 2T] with mean near 1.5T under a constant iteration time")


def check_crossfade_fidelity(cfg):
    """Fused overlap equals a direct fade_in*head + fade_out*tail evaluation."""
    overlap_samples = cfg.overlap_frames * cfg.hop_samples
    curve = crossfade_curve(overlap_samples)
    power = curve.fade_in**2 + curve.fade_out**2
    assert np.max(np.abs(power - 1.0)) <= 1e-9

    rng = np.random.default_rng(404 + cfg.overlap_frames)
    for _ in range(50):
        first = MelChunk(rng.uniform(-1, 1, size=(cfg.chunk_frames, cfg.feature_dim)))
        second = MelChunk(rng.uniform(-1, 1, size=(cfg.chunk_frames, cfg.feature_dim)))
        state = VocoderState.initial()
        head_audio, state = vocode_chunk(state, first, False, cfg)
        tail_audio, state = vocode_chunk(state, second, True, cfg)
        fused = tail_audio.samples[:overlap_samples]

        # Direct evaluation from scratch, outside the vocoder state machine.
        held = generate(first, cfg)[-overlap_samples:]
        tail_frames = first.frames[-cfg.overlap_frames :]
        respliced = generate(MelChunk(np.vstack([tail_frames, second.frames])), cfg)
        direct = curve.fade_in * respliced[:overlap_samples] + curve.fade_out * held
        assert np.max(np.abs(fused - direct)) <= 1e-12
        assert head_audio.sample_count + tail_audio.sample_count == 2 * cfg.chunk_frames * cfg.hop_samples


def test_criterion_04_crossfade_fidelity(cfg):
    started = time.perf_counter()
    check_crossfade_fidelity(cfg)
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"criterion 4 took {elapsed:.1f}s"
    report(4, "fused overlaps match the direct equal-power evaluation on 50 fixtures")


def check_stream_conservation(cfg, lexicon, request_count, seed):
    """Every request's emitted samples exactly cover its target frames."""
    texts_pool = random_texts(60, seed=seed)
    rng = random.Random(seed)
    texts = [rng.choice(texts_pool) for _ in range(request_count)]
    modules = build_modules(lexicon, cfg)
    pool = RequestPool()
    streams = [(text, pool.submit(text)[1]) for text in texts]
    step = 0
    run_iteration(pool, modules, CostModel.zero(), cfg, step)
    while pool.pending():
        step += 1
        run_iteration(pool, modules, CostModel.zero(), cfg, step)

    for text, stream in streams:
        target_frames = cfg.frames_per_phoneme * run_frontend(text, lexicon).seq_len
        chunks = list(stream)
        assert chunks, text
        offset = 0
        for chunk in chunks:
            assert chunk.sample_offset == offset
            offset += chunk.sample_count
        assert offset == target_frames * cfg.hop_samples
        assert len(chunks) == math.ceil(target_frames / cfg.chunk_frames)
        # The stream is closed: iterating consumed the terminal marker, so
        # nothing can follow the final chunk.
        assert stream.get(timeout=0.1) is None


def test_criterion_05_stream_conservation(cfg, lexicon):
    started = time.perf_counter()
    check_stream_conservation(cfg, lexicon, request_count=1000, seed=505)
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"criterion 5 took {elapsed:.1f}s"
    report(5, "all 1000 soak requests conserve samples with contiguous offsets")


def test_criterion_06_incremental_beats_baseline(cfg):
    started = time.perf_counter()
    profile = LoadProfile(qps=20, duration_seconds=12.0, text_class="mixed", seed=606)
    results = {}
    for pipeline in ("incremental", "baseline"):
        records = run_pressure_test(profile, pipeline, cfg=cfg, cost_model=CostModel.default())
        kept = exclude_warmup(records, 2.0)
        assert len(kept) >= 150
        results[pipeline] = kept

    incr_fcl = sum(r.fcl for r in results["incremental"]) / len(results["incremental"])
    incr_lcl = sum(r.lcl for r in results["incremental"]) / len(results["incremental"])
    base_lat = sum(r.lcl for r in results["baseline"]) / len(results["baseline"])
    assert incr_fcl < 0.5 * base_lat, (
        f"incremental mean FCL {incr_fcl * 1e3:.1f} ms vs baseline {base_lat * 1e3:.1f} ms"
    )
    assert incr_lcl < base_lat, (
        f"incremental mean LCL {incr_lcl * 1e3:.1f} ms vs baseline {base_lat * 1e3:.1f} ms"
    )
    elapsed = time.perf_counter() - started
    assert elapsed < 120.0, f"criterion 6 took {elapsed:.1f}s"
    report(6, "incremental halves first-chunk latency and finishes sooner than the baseline")


def test_criterion_07_padding_penalty(cfg):
    started = time.perf_counter()
    means = {}
    for pipeline in ("incremental", "baseline"):
        for text_class in ("mixed", "medium"):
            profile = LoadProfile(qps=30, duration_seconds=10.0, text_class=text_class, seed=707)
            records = run_pressure_test(profile, pipeline, cfg=cfg, cost_model=CostModel.default())
            kept = exclude_warmup(records, 2.0)
            assert len(kept) >= 200
            means[pipeline, text_class] = sum(r.lcl for r in kept) / len(kept)

    baseline_ratio = means["baseline", "mixed"] / means["baseline", "medium"]
    incremental_ratio = means["incremental", "mixed"] / means["incremental", "medium"]
    assert baseline_ratio >= 1.2, f"baseline mixed/medium ratio {baseline_ratio:.2f}"
    assert incremental_ratio <= 1.1, f"incremental mixed/medium ratio {incremental_ratio:.2f}"
    elapsed = time.perf_counter() - started
    assert elapsed < 120.0, f"criterion 7 took {elapsed:.1f}s"
    report(7, "padding drags baseline mixed latency toward long; incremental stays flat")


def test_criterion_08_rtf_definition(cfg):
    started = time.perf_counter()
    profile = LoadProfile(qps=10, duration_seconds=1.0, text_class="mixed", seed=808)
    records = run_pressure_test(profile, "incremental", cfg=cfg, cost_model=CostModel.zero())
    assert records
    for record in records:
        independent = (record.last_chunk_time - record.send_time) / record.audio_seconds
        assert record.rtf == independent  # exact, same arithmetic
        assert record.audio_seconds == record.total_samples / cfg.sample_rate
    elapsed = time.perf_counter() - started
    report(8, "rtf is exactly last-chunk latency over audio duration for every record")
    assert elapsed < 30.0, f"criterion 8 took {elapsed:.1f}s"


def test_criterion_09_server_loopback(cfg, lexicon):
    started = time.perf_counter()
    loop = SchedulerLoop(build_modules(lexicon, cfg), CostModel.zero(), cfg)
    texts = random_texts(50, seed=909)
    with TtsServer(loop, cfg) as server:
        single = request_audio(server.address, "欢迎收听今天新闻。")
        reference = synthesize_chunks("欢迎收听今天新闻。", lexicon, cfg)
        assert single.error is None
        assert np.max(np.abs(single.samples - reference.samples)) < PCM_TOLERANCE

        outcomes = [None] * len(texts)

        def client(index):
            tag = f"client-{index}"
            outcomes[index] = run_client(server.address, {tag: texts[index]}, timeout=30)[tag]

        threads = [threading.Thread(target=client, args=(i,)) for i in range(len(texts))]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join(timeout=30)
            assert not thread.is_alive()

    for index, text in enumerate(texts):
        result = outcomes[index]
        expected = synthesize_chunks(text, lexicon, cfg)
        assert result.error is None, text
        assert result.contiguous, text
        assert result.total_samples == expected.sample_count, text
        assert result.samples.shape == expected.samples.shape, text
        # Any cross-tag leakage would corrupt the per-client waveform.
        assert np.max(np.abs(result.samples - expected.samples)) < PCM_TOLERANCE, text
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"criterion 9 took {elapsed:.1f}s"
    report(9, "networked synthesis matches in-process audio for 50 concurrent clients")


def test_criterion_10_overlap_variants(lexicon):
    started = time.perf_counter()
    for overlap in (4, 8):
        cfg = PipelineConfig(overlap_frames=overlap)
        check_crossfade_fidelity(cfg)
        check_stream_conservation(cfg, lexicon, request_count=1000, seed=1010 + overlap)
    elapsed = time.perf_counter() - started
    assert elapsed < 130.0, f"criterion 10 took {elapsed:.1f}s"
    report(10, "crossfade fidelity and stream conservation hold at overlaps 4 and 8")
