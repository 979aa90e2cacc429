"""Request pool admission, iteration mechanics, failure isolation, shutdown."""

import io
import json
import threading
import time

import numpy as np
import pytest

from incrtts.domain import PipelineConfig
from incrtts.scheduler import (
    ChunkStream,
    CostModel,
    ModuleCost,
    PipelineModules,
    PoolClosed,
    RequestCancelled,
    RequestFailed,
    RequestPool,
    SchedulerLoop,
    _wait_until,
    build_modules,
    latency_bounds,
    run_iteration,
    run_loop,
    write_iteration_log,
)
from incrtts.synthesis import synthesize_chunks

SHORT = "你们好"  # 2 chunks
MEDIUM = "欢迎收听今天新闻。"  # 5 chunks
LONG = "欢迎大家收听今天下午新闻播报"  # 8 chunks


@pytest.fixture(scope="module")
def modules(lexicon, cfg):
    return build_modules(lexicon, cfg)


def drain_pool(pool, modules, cfg, max_iterations=100):
    reports = []
    cost = CostModel.zero()
    while pool.pending():
        reports.append(run_iteration(pool, modules, cost, cfg, step_index=len(reports)))
        assert len(reports) <= max_iterations, "pool failed to drain"
    return reports


class TestPoolAdmission:
    def test_submit_returns_immediately_with_stream(self, lexicon, cfg):
        pool = RequestPool()
        request_id, stream = pool.submit(SHORT)
        assert request_id == 1
        assert isinstance(stream, ChunkStream)
        assert pool.pending()

    def test_everything_submitted_joins_next_iteration(self, modules, cfg):
        pool = RequestPool()
        for _ in range(100):
            pool.submit(SHORT)
        report = run_iteration(pool, modules, CostModel.zero(), cfg)
        assert len(report.frontend_ids) == 100
        assert len(report.decoder_ids) == 100

    def test_empty_text_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            RequestPool().submit("")

    def test_submit_after_shutdown_rejected(self):
        pool = RequestPool()
        pool.shutdown()
        with pytest.raises(PoolClosed):
            pool.submit(SHORT)

    def test_shutdown_cancels_queued_requests(self):
        pool = RequestPool()
        _, stream = pool.submit(SHORT)
        pool.shutdown()
        with pytest.raises(RequestCancelled):
            stream.get()

    def test_ids_are_unique_under_concurrent_submits(self):
        pool = RequestPool()
        ids = []
        lock = threading.Lock()

        def worker():
            for _ in range(50):
                request_id, _ = pool.submit(SHORT)
                with lock:
                    ids.append(request_id)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(set(ids)) == 400


class TestRunIteration:
    def test_first_iteration_runs_all_four_modules(self, modules, cfg):
        pool = RequestPool()
        request_id, stream = pool.submit(SHORT)
        report = run_iteration(pool, modules, CostModel.zero(), cfg)
        assert report.frontend_ids == (request_id,)
        assert report.encoder_ids == (request_id,)
        assert report.decoder_ids == (request_id,)
        assert report.vocoder_ids == (request_id,)
        # The first audio chunk is already available.
        chunk = stream.get(timeout=1.0)
        assert chunk.sample_offset == 0
        assert chunk.sample_count > 0

    def test_indicator_flips_after_first_iteration(self, modules, cfg):
        pool = RequestPool()
        request_id, _ = pool.submit(MEDIUM)
        run_iteration(pool, modules, CostModel.zero(), cfg)
        item = pool.items[request_id]
        assert item.module_indicator == 1
        assert item.frontend_out is not None
        assert item.enc is not None
        assert item.dec_state is not None
        report = run_iteration(pool, modules, CostModel.zero(), cfg)
        assert report.frontend_ids == ()
        assert report.decoder_ids == (request_id,)

    def test_completion_removes_item_immediately(self, modules, cfg):
        pool = RequestPool()
        request_id, stream = pool.submit(SHORT)
        reports = drain_pool(pool, modules, cfg)
        assert len(reports) == 2
        assert reports[-1].completed_ids == (request_id,)
        assert request_id not in pool.items
        chunks = list(stream)
        assert len(chunks) == 2

    def test_batch_sizes_paired_without_failures(self, modules, cfg):
        pool = RequestPool()
        for text in (SHORT, MEDIUM, LONG):
            pool.submit(text)
        for report in drain_pool(pool, modules, cfg):
            sizes = report.batch_sizes
            assert sizes["frontend"] == sizes["encoder"]
            assert sizes["decoder"] == sizes["vocoder"]

    def test_empty_pool_yields_empty_report(self, modules, cfg):
        report = run_iteration(RequestPool(), modules, CostModel.zero(), cfg)
        assert report.batch_sizes == {"frontend": 0, "encoder": 0, "decoder": 0, "vocoder": 0}
        assert report.completed_ids == ()

    def test_interleaved_output_matches_reference(self, modules, lexicon, cfg):
        # Three different-length requests sharing batches must each produce
        # exactly what a lone synchronous synthesis produces.
        pool = RequestPool()
        streams = {}
        for text in (LONG, SHORT, MEDIUM):
            _, stream = pool.submit(text)
            streams[text] = stream
        drain_pool(pool, modules, cfg)
        for text, stream in streams.items():
            got = np.concatenate([c.samples for c in stream])
            want = synthesize_chunks(text, lexicon, cfg).samples
            assert np.array_equal(got, want), text

    def test_chunk_offsets_contiguous_under_load(self, modules, cfg):
        pool = RequestPool()
        streams = [pool.submit(MEDIUM)[1] for _ in range(8)]
        drain_pool(pool, modules, cfg)
        for stream in streams:
            offset = 0
            for chunk in stream:
                assert chunk.sample_offset == offset
                offset += chunk.sample_count


class TestFailureIsolation:
    @pytest.fixture()
    def poisoned_modules(self, modules):
        """Frontend raises on a marker text; everything else passes through."""

        def frontend(texts):
            if any(text == "毒" for text in texts):
                raise RuntimeError("poisoned batch")
            return modules.frontend_batch(texts)

        return PipelineModules(
            frontend_batch=frontend,
            encoder_batch=modules.encoder_batch,
            decoder_batch=modules.decoder_batch,
            vocoder_batch=modules.vocoder_batch,
        )

    def test_poisoned_item_fails_alone(self, poisoned_modules, lexicon, cfg):
        pool = RequestPool()
        _, good1 = pool.submit(SHORT)
        bad_id, bad = pool.submit("毒")
        _, good2 = pool.submit(MEDIUM)
        reports = drain_pool(pool, poisoned_modules, cfg)
        assert reports[0].failed_ids == (bad_id,)
        with pytest.raises(RequestFailed):
            bad.get()
        for text, stream in ((SHORT, good1), (MEDIUM, good2)):
            got = np.concatenate([c.samples for c in stream])
            want = synthesize_chunks(text, lexicon, cfg).samples
            assert np.array_equal(got, want)

    def test_failed_request_leaves_pool(self, poisoned_modules, cfg):
        pool = RequestPool()
        bad_id, _ = pool.submit("毒")
        run_iteration(pool, poisoned_modules, CostModel.zero(), cfg)
        assert bad_id not in pool.items

    def test_decoder_failure_mid_stream(self, modules, cfg):
        # Fail one request after it has already emitted chunks.
        target = {"id": None}

        def decoder(pairs):
            for state, _ in pairs:
                if state.frames_emitted >= 64 and target["id"] is not None:
                    raise RuntimeError("decoder fault")
            return modules.decoder_batch(pairs)

        def decoder_single_aware(pairs):
            results = []
            for state, enc in pairs:
                if target["id"] is not None and state.frames_emitted >= 64:
                    raise RuntimeError("decoder fault")
                results.extend(modules.decoder_batch([(state, enc)]))
            return results

        faulty = PipelineModules(
            frontend_batch=modules.frontend_batch,
            encoder_batch=modules.encoder_batch,
            decoder_batch=decoder_single_aware,
            vocoder_batch=modules.vocoder_batch,
        )
        pool = RequestPool()
        long_id, long_stream = pool.submit(LONG)
        _, short_stream = pool.submit(SHORT)
        target["id"] = long_id
        drain_pool(pool, faulty, cfg)
        chunks = []
        with pytest.raises(RequestFailed):
            for chunk in long_stream:
                chunks.append(chunk)
        assert len(chunks) == 2  # two chunks of 64 frames landed before the fault
        assert len(list(short_stream)) == 2  # bystander unaffected


class TestChunkStream:
    def test_terminal_marker_persists(self, modules, cfg):
        pool = RequestPool()
        _, stream = pool.submit(SHORT)
        drain_pool(pool, modules, cfg)
        assert len(list(stream)) == 2
        assert stream.get() is None
        assert stream.get() is None  # still closed on repeated polls

    def test_get_timeout_raises_empty(self):
        import queue

        stream = ChunkStream(1)
        with pytest.raises(queue.Empty):
            stream.get(timeout=0.01)


class TestCostModel:
    def test_duration_is_affine(self):
        cost = ModuleCost(0.004, 0.0005)
        assert cost.duration(0) == pytest.approx(0.004)
        assert cost.duration(10) == pytest.approx(0.009)

    def test_negative_parameters_rejected(self):
        with pytest.raises(ValueError):
            ModuleCost(-0.001, 0.0)

    def test_from_mapping_defaults_to_zero(self):
        model = CostModel.from_mapping({"cost_decoder_base": "0.01"})
        assert model.decoder.base_seconds == 0.01
        assert model.frontend.base_seconds == 0.0

    def test_wait_until_accuracy(self):
        start = time.perf_counter()
        _wait_until(start + 0.02)
        elapsed = time.perf_counter() - start
        assert 0.0195 <= elapsed <= 0.025

    def test_iteration_duration_honors_cost_model(self, modules, cfg):
        cost = CostModel(
            frontend=ModuleCost(0.002, 0.0),
            encoder=ModuleCost(0.003, 0.0),
            decoder=ModuleCost(0.008, 0.0),
            vocoder=ModuleCost(0.005, 0.0),
        )
        pool = RequestPool()
        pool.submit(SHORT)
        report = run_iteration(pool, modules, cost, cfg)
        assert report.step_seconds == pytest.approx(0.018, abs=0.004)

    def test_empty_phases_charge_nothing(self, modules, cfg):
        # A decode-stage-only pool must not pay frontend/encoder base costs.
        cost = CostModel(
            frontend=ModuleCost(0.05, 0.0),
            encoder=ModuleCost(0.05, 0.0),
            decoder=ModuleCost(0.001, 0.0),
            vocoder=ModuleCost(0.001, 0.0),
        )
        pool = RequestPool()
        pool.submit(MEDIUM)
        run_iteration(pool, modules, cost, cfg)  # pays all four once
        report = run_iteration(pool, modules, cost, cfg)
        assert report.step_seconds < 0.02


class TestRunLoop:
    def test_loop_serves_and_cancels_on_stop(self, modules, cfg):
        loop = SchedulerLoop(modules, CostModel.zero(), cfg).start()
        _, stream = loop.submit(MEDIUM)
        chunks = list(stream)
        assert len(chunks) == 5
        _, late_stream = loop.submit(LONG)
        time.sleep(0)  # let it enter the pool; the loop may or may not finish it
        reports = loop.stop()
        assert reports, "loop recorded no iterations"
        with pytest.raises(PoolClosed):
            loop.submit(SHORT)
        # The late stream either completed or was cancelled, never left open.
        outcome = []
        try:
            for chunk in late_stream:
                outcome.append(chunk)
        except RequestCancelled:
            pass
        else:
            assert len(outcome) == 8

    def test_stop_signal_halts_promptly(self, modules, cfg):
        pool = RequestPool()
        stop = threading.Event()
        results = {}

        def body():
            results["reports"] = run_loop(pool, modules, CostModel.zero(), cfg, stop)

        thread = threading.Thread(target=body)
        thread.start()
        time.sleep(0.05)
        stop.set()
        thread.join(timeout=2.0)
        assert not thread.is_alive()
        assert results["reports"] == []  # nothing was ever submitted

    def test_step_indices_increase(self, modules, cfg):
        loop = SchedulerLoop(modules, CostModel.zero(), cfg).start()
        _, stream = loop.submit(MEDIUM)
        list(stream)
        reports = loop.stop()
        indices = [r.step_index for r in reports]
        assert indices == sorted(indices)
        assert len(set(indices)) == len(indices)


class TestLatencyBounds:
    def test_constant_step_times(self):
        low, high, expected = latency_bounds(0.02, 0.02)
        assert low == pytest.approx(0.02)
        assert high == pytest.approx(0.04)
        assert expected == pytest.approx(0.03)

    def test_asymmetric_step_times(self):
        low, high, expected = latency_bounds(0.03, 0.01)
        assert low == pytest.approx(0.01)
        assert high == pytest.approx(0.04)
        assert expected == pytest.approx(0.025)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            latency_bounds(-0.01, 0.02)


class TestIterationLog:
    def test_ndjson_round_trip(self, modules, cfg):
        pool = RequestPool()
        pool.submit(SHORT)
        pool.submit(MEDIUM)
        reports = drain_pool(pool, modules, cfg)
        sink = io.StringIO()
        write_iteration_log(reports, sink)
        lines = sink.getvalue().strip().split("\n")
        assert len(lines) == len(reports)
        parsed = [json.loads(line) for line in lines]
        assert parsed[0]["step"] == 0
        assert parsed[0]["batch_sizes"]["frontend"] == 2
        assert parsed[-1]["completed"] == [2]
