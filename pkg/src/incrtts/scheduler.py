"""Instant request pool and the module-wise dynamic batching loop.

One loop thread serves every in-flight request.  Each iteration drains the
ingress queue (so a request waits at most one iteration before joining),
then runs the four pipeline modules in order, gathering a batch for each
module from whatever the pool currently needs: new items pass through
frontend and encoder, everything then decodes and vocodes one chunk.  A
request's first iteration runs all four modules, so its first audio chunk
leaves the very iteration it was admitted.

Module execution time is emulated with an affine cost model (a per-module
base price plus a per-item price) realized as a wait on the loop thread.
This reproduces the economics of batched inference on an accelerator: a
batch of B costs far less than B sequential calls.
"""

import itertools
import json
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .acoustic import (
    DecodeChunkResult,
    DecoderState,
    EncodedFeatures,
    decode_chunk_batch,
    encode_batch,
    init_decoder_state,
)
from .domain import AudioChunk, MelChunk, PipelineConfig
from .frontend import FrontendOutput, Lexicon, run_frontend
from .vocoder import VocoderState, vocode_batch


class PoolClosed(RuntimeError):
    """Submit was called on a pool that has been shut down."""


class RequestFailed(RuntimeError):
    """A pipeline module raised while processing this request."""

    def __init__(self, request_id: int, message: str):
        super().__init__(f"request {request_id}: {message}")
        self.request_id = request_id


class RequestCancelled(RuntimeError):
    """The serving loop shut down while this request was in flight."""

    def __init__(self, request_id: int):
        super().__init__(f"request {request_id} cancelled by shutdown")
        self.request_id = request_id


@dataclass(frozen=True)
class _Close:
    """Terminal stream marker: normal end, failure, or cancellation."""

    error: str | None = None
    cancelled: bool = False


class ChunkStream:
    """Ordered single-producer channel carrying one request's audio chunks.

    The scheduler pushes from its loop thread; any other thread may consume.
    Iteration yields AudioChunks and ends at normal completion; failure and
    cancellation surface as exceptions.  The terminal marker is re-queued on
    read so repeated polls after the end remain well-defined.
    """

    def __init__(self, request_id: int):
        self.request_id = request_id
        self._queue: queue.SimpleQueue = queue.SimpleQueue()

    def _push(self, chunk: AudioChunk) -> None:
        self._queue.put(chunk)

    def _finish(self) -> None:
        self._queue.put(_Close())

    def _fail(self, message: str) -> None:
        self._queue.put(_Close(error=message))

    def _cancel(self) -> None:
        self._queue.put(_Close(cancelled=True))

    def get(self, timeout: float | None = None) -> AudioChunk | None:
        """Next chunk, or None once the stream has completed.

        Raises queue.Empty on timeout, RequestFailed / RequestCancelled on
        the corresponding terminal markers.
        """
        item = self._queue.get(timeout=timeout)
        if isinstance(item, _Close):
            self._queue.put(item)
            if item.cancelled:
                raise RequestCancelled(self.request_id)
            if item.error is not None:
                raise RequestFailed(self.request_id, item.error)
            return None
        return item

    def __iter__(self):
        while (chunk := self.get()) is not None:
            yield chunk


@dataclass
class PoolItem:
    """One in-flight request and every piece of its per-module state.

    ``module_indicator`` is 0 while the item still needs frontend+encoder
    and 1 once it only needs decoder+vocoder; the flip happens the moment
    the encoder scatter completes.
    """

    request_id: int
    text: str
    arrival_time: float
    chunk_sink: ChunkStream
    module_indicator: int = 0
    frontend_out: FrontendOutput | None = None
    enc: EncodedFeatures | None = None
    dec_state: DecoderState | None = None
    voc_state: VocoderState | None = None
    chunks_emitted: int = 0


class RequestPool:
    """Holds every in-flight request; ``submit`` is safe from any thread.

    Submissions land on an ingress queue and join the working set at the
    start of the next iteration, so admission never blocks on a running
    batch.
    """

    def __init__(self):
        self.items: dict[int, PoolItem] = {}
        self._ingress: queue.SimpleQueue = queue.SimpleQueue()
        self._next_id = itertools.count(1)
        self._closed = threading.Event()

    def submit(self, text: str) -> tuple[int, ChunkStream]:
        """Registers a request; returns immediately with its chunk stream."""
        if self._closed.is_set():
            raise PoolClosed("pool is shut down")
        if not text:
            raise ValueError("empty input")
        request_id = next(self._next_id)
        stream = ChunkStream(request_id)
        self._ingress.put(PoolItem(request_id, text, time.perf_counter(), stream))
        return request_id, stream

    def drain_ingress(self) -> list[PoolItem]:
        """Moves everything queued so far into the working set."""
        admitted: list[PoolItem] = []
        while True:
            try:
                item = self._ingress.get_nowait()
            except queue.Empty:
                break
            self.items[item.request_id] = item
            admitted.append(item)
        return admitted

    def pending(self) -> bool:
        return bool(self.items) or not self._ingress.empty()

    def shutdown(self) -> list[int]:
        """Refuses new submits and cancels everything in flight.

        The ingress queue is drained twice because a submit may race the
        closed flag; anything that slips through the first drain is caught
        by the second.  Returns the cancelled request ids.
        """
        self._closed.set()
        cancelled: list[int] = []
        for _ in range(2):
            self.drain_ingress()
            for item in self.items.values():
                item.chunk_sink._cancel()
                cancelled.append(item.request_id)
            self.items.clear()
        return cancelled


@dataclass(frozen=True)
class ModuleCost:
    """Affine time model for one module: ``base + per_item * batch_size``."""

    base_seconds: float = 0.0
    per_item_seconds: float = 0.0

    def __post_init__(self) -> None:
        if self.base_seconds < 0 or self.per_item_seconds < 0:
            raise ValueError("cost parameters must be >= 0")

    def duration(self, batch_size: int) -> float:
        return self.base_seconds + self.per_item_seconds * batch_size


@dataclass(frozen=True)
class CostModel:
    """Per-module time prices; an empty batch costs nothing."""

    frontend: ModuleCost
    encoder: ModuleCost
    decoder: ModuleCost
    vocoder: ModuleCost

    @classmethod
    def zero(cls) -> "CostModel":
        return cls(ModuleCost(), ModuleCost(), ModuleCost(), ModuleCost())

    @classmethod
    def default(cls) -> "CostModel":
        """Desk-scale defaults: a full iteration lands near 20 ms."""
        return cls(
            frontend=ModuleCost(0.002, 0.0001),
            encoder=ModuleCost(0.003, 0.0002),
            decoder=ModuleCost(0.008, 0.0003),
            vocoder=ModuleCost(0.005, 0.0002),
        )

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "CostModel":
        """Reads ``cost_<module>_{base,per_item}`` keys, defaulting to zero."""
        parts = {}
        for module in ("frontend", "encoder", "decoder", "vocoder"):
            base = float(mapping.get(f"cost_{module}_base", 0.0))
            per_item = float(mapping.get(f"cost_{module}_per_item", 0.0))
            parts[module] = ModuleCost(base, per_item)
        return cls(**parts)


def cost_model_keys() -> frozenset[str]:
    """Names of the keys :meth:`CostModel.from_mapping` understands."""
    return frozenset(
        f"cost_{module}_{suffix}"
        for module in ("frontend", "encoder", "decoder", "vocoder")
        for suffix in ("base", "per_item")
    )


@dataclass(frozen=True)
class PipelineModules:
    """The four batched module entry points the scheduler drives.

    Each callable takes a list of per-item inputs and returns a list of
    per-item outputs in the same order.  Keeping these as plain callables
    lets tests substitute failing or instrumented modules.
    """

    frontend_batch: Callable[[list[str]], list[FrontendOutput]]
    encoder_batch: Callable[[list[FrontendOutput]], list[tuple[EncodedFeatures, DecoderState]]]
    decoder_batch: Callable[[list[tuple[DecoderState, EncodedFeatures]]], list[DecodeChunkResult]]
    vocoder_batch: Callable[
        [list[tuple[VocoderState, MelChunk, bool]]], list[tuple[AudioChunk, VocoderState]]
    ]


def build_modules(lexicon: Lexicon, cfg: PipelineConfig) -> PipelineModules:
    """Standard modules over a lexicon and config."""

    def frontend(texts: list[str]) -> list[FrontendOutput]:
        return [run_frontend(text, lexicon) for text in texts]

    def encoder(fos: list[FrontendOutput]) -> list[tuple[EncodedFeatures, DecoderState]]:
        encs = encode_batch(fos, cfg)
        return [(enc, init_decoder_state(enc, cfg)) for enc in encs]

    def decoder(pairs):
        return decode_chunk_batch(pairs, cfg)

    def vocoder(triples):
        return vocode_batch(triples, cfg)

    return PipelineModules(frontend, encoder, decoder, vocoder)


def _wait_until(deadline: float) -> None:
    """Sleeps to an absolute perf_counter deadline with sub-ms accuracy.

    A single sleep to the deadline can overshoot by milliseconds under
    load, so the approach narrows in stages: one coarse sleep that stops
    a millisecond short (any overshoot lands inside the next stage), then
    short naps, then a yield loop that nails the deadline while keeping
    the GIL available to consumer threads.
    """
    while True:
        remaining = deadline - time.perf_counter()
        if remaining <= 0.0:
            return
        if remaining > 0.002:
            time.sleep(remaining - 0.001)
        elif remaining > 0.0002:
            time.sleep(0.0001)
        else:
            time.sleep(0.0)


@dataclass(frozen=True)
class _ItemError:
    message: str


def _run_module(
    batch_fn: Callable, inputs: list, cost: ModuleCost, deadline: float | None = None
) -> list:
    """Runs one module's batch, charging its cost and isolating failures.

    If the whole batch raises, it is retried one item at a time so a single
    poisoned item cannot sink its batchmates; per-item failures come back as
    _ItemError entries aligned with the inputs.  The module's time cost is
    charged for the full gathered batch either way, measured from the call
    unless an absolute deadline is given; cumulative deadlines let a caller
    absorb its own gather/scatter overhead into the charged budget.
    """
    started = time.perf_counter()
    try:
        results = list(batch_fn(list(inputs)))
        if len(results) != len(inputs):
            raise RuntimeError(
                f"module returned {len(results)} results for {len(inputs)} inputs"
            )
    except Exception:
        results = []
        for item in inputs:
            try:
                results.append(batch_fn([item])[0])
            except Exception as exc:
                results.append(_ItemError(str(exc) or type(exc).__name__))
    _wait_until(deadline if deadline is not None else started + cost.duration(len(inputs)))
    return results


@dataclass(frozen=True)
class IterationReport:
    """What one iteration did: batch composition, timing, completions."""

    step_index: int
    frontend_ids: tuple[int, ...]
    encoder_ids: tuple[int, ...]
    decoder_ids: tuple[int, ...]
    vocoder_ids: tuple[int, ...]
    completed_ids: tuple[int, ...]
    failed_ids: tuple[int, ...]
    step_seconds: float
    charged_seconds: float = 0.0

    @property
    def batch_sizes(self) -> dict[str, int]:
        return {
            "frontend": len(self.frontend_ids),
            "encoder": len(self.encoder_ids),
            "decoder": len(self.decoder_ids),
            "vocoder": len(self.vocoder_ids),
        }

    def as_json(self) -> str:
        return json.dumps(
            {
                "step": self.step_index,
                "batch_sizes": self.batch_sizes,
                "decoder_ids": list(self.decoder_ids),
                "completed": list(self.completed_ids),
                "failed": list(self.failed_ids),
                "seconds": round(self.step_seconds, 6),
            },
            sort_keys=True,
        )


def run_iteration(
    pool: RequestPool,
    modules: PipelineModules,
    cost_model: CostModel,
    cfg: PipelineConfig,
    step_index: int = 0,
    budget_start: float | None = None,
) -> IterationReport:
    """One full pass: admit, then frontend, encoder, decoder, vocoder.

    Admission happens first, so everything submitted before this call
    participates.  Batches are gathered per module from the pool's current
    needs; results scatter back to the items, and audio chunks become
    visible on their sinks only after the vocoder's cost has been paid.
    Completed and failed items leave the pool immediately.

    Module deadlines accumulate from ``budget_start`` (a perf_counter
    value, defaulting to now), so gather, scatter, and admission overhead
    are absorbed into the charged budget and the iteration's wall time
    tracks the summed module costs.  A saturated loop passes the previous
    iteration's budget end here, which cancels any single iteration's
    overshoot against its successor's budget.
    """
    iteration_start = time.perf_counter()
    if budget_start is None or budget_start > iteration_start:
        budget_start = iteration_start
    deadline = budget_start
    pool.drain_ingress()
    failed_ids: list[int] = []

    def fail(item: PoolItem, message: str) -> None:
        item.chunk_sink._fail(message)
        pool.items.pop(item.request_id, None)
        failed_ids.append(item.request_id)

    # Frontend over fresh items.
    front_items = [item for item in pool.items.values() if item.module_indicator == 0]
    frontend_ids = tuple(item.request_id for item in front_items)
    if front_items:
        deadline += cost_model.frontend.duration(len(front_items))
        outs = _run_module(
            modules.frontend_batch,
            [item.text for item in front_items],
            cost_model.frontend,
            deadline,
        )
        survivors = []
        for item, out in zip(front_items, outs):
            if isinstance(out, _ItemError):
                fail(item, out.message)
            else:
                item.frontend_out = out
                survivors.append(item)
        front_items = survivors

    # Encoder over the same fresh items; flips them to the decode stage.
    encoder_ids = tuple(item.request_id for item in front_items)
    if front_items:
        deadline += cost_model.encoder.duration(len(front_items))
        outs = _run_module(
            modules.encoder_batch,
            [item.frontend_out for item in front_items],
            cost_model.encoder,
            deadline,
        )
        for item, out in zip(front_items, outs):
            if isinstance(out, _ItemError):
                fail(item, out.message)
            else:
                item.enc, item.dec_state = out
                item.voc_state = VocoderState.initial()
                item.module_indicator = 1

    # Decoder over every item needing mel, including those admitted above.
    dec_items = [item for item in pool.items.values() if item.module_indicator == 1]
    decoder_ids = tuple(item.request_id for item in dec_items)
    dec_results: list[tuple[PoolItem, DecodeChunkResult]] = []
    if dec_items:
        deadline += cost_model.decoder.duration(len(dec_items))
        outs = _run_module(
            modules.decoder_batch,
            [(item.dec_state, item.enc) for item in dec_items],
            cost_model.decoder,
            deadline,
        )
        for item, out in zip(dec_items, outs):
            if isinstance(out, _ItemError):
                fail(item, out.message)
            else:
                item.dec_state = out.state
                dec_results.append((item, out))

    # Vocoder over everything that just produced mel; chunks go out here.
    vocoder_ids = tuple(item.request_id for item, _ in dec_results)
    completed_ids: list[int] = []
    if dec_results:
        deadline += cost_model.vocoder.duration(len(dec_results))
        outs = _run_module(
            modules.vocoder_batch,
            [(item.voc_state, res.mel, res.stop) for item, res in dec_results],
            cost_model.vocoder,
            deadline,
        )
        for (item, res), out in zip(dec_results, outs):
            if isinstance(out, _ItemError):
                fail(item, out.message)
                continue
            audio, item.voc_state = out
            item.chunks_emitted += 1
            item.chunk_sink._push(audio)
            if res.stop:
                item.chunk_sink._finish()
                pool.items.pop(item.request_id, None)
                completed_ids.append(item.request_id)
    # Give consumer threads an immediate shot at the chunks just pushed.
    time.sleep(0)

    return IterationReport(
        step_index=step_index,
        frontend_ids=frontend_ids,
        encoder_ids=encoder_ids,
        decoder_ids=decoder_ids,
        vocoder_ids=vocoder_ids,
        completed_ids=tuple(completed_ids),
        failed_ids=tuple(failed_ids),
        step_seconds=time.perf_counter() - iteration_start,
        charged_seconds=deadline - budget_start,
    )


def run_loop(
    pool: RequestPool,
    modules: PipelineModules,
    cost_model: CostModel,
    cfg: PipelineConfig,
    stop_signal: threading.Event,
    poll_interval: float = 0.001,
    report_sink: Callable[[IterationReport], Any] | None = None,
) -> list[IterationReport]:
    """Runs iterations until told to stop; idles on an empty pool.

    On shutdown every in-flight request's stream is closed with a
    cancellation marker and the pool refuses further submits.
    """
    reports: list[IterationReport] = []
    step_index = 0
    # While the pool stays busy, each iteration's budget starts where the
    # previous budget ended, which keeps the realized iteration period
    # equal to the charged costs; an idle stretch resets the carry.
    carry: float | None = None
    try:
        while not stop_signal.is_set():
            if not pool.pending():
                carry = None
                time.sleep(poll_interval)
                continue
            entered = time.perf_counter()
            report = run_iteration(
                pool, modules, cost_model, cfg, step_index=step_index, budget_start=carry
            )
            carry = (carry if carry is not None else entered) + report.charged_seconds
            reports.append(report)
            if report_sink is not None:
                report_sink(report)
            step_index += 1
    finally:
        pool.shutdown()
    return reports


class SchedulerLoop:
    """Background-thread wrapper around a pool plus the iteration loop."""

    def __init__(
        self,
        modules: PipelineModules,
        cost_model: CostModel,
        cfg: PipelineConfig,
        poll_interval: float = 0.001,
        report_sink: Callable[[IterationReport], Any] | None = None,
    ):
        self.pool = RequestPool()
        self._modules = modules
        self._cost_model = cost_model
        self._cfg = cfg
        self._poll_interval = poll_interval
        self._report_sink = report_sink
        self._stop = threading.Event()
        self._reports: list[IterationReport] = []
        self._thread = threading.Thread(target=self._run, name="scheduler-loop", daemon=True)

    def _run(self) -> None:
        self._reports = run_loop(
            self.pool,
            self._modules,
            self._cost_model,
            self._cfg,
            self._stop,
            poll_interval=self._poll_interval,
            report_sink=self._report_sink,
        )

    def start(self) -> "SchedulerLoop":
        self._thread.start()
        return self

    def submit(self, text: str) -> tuple[int, ChunkStream]:
        return self.pool.submit(text)

    def stop(self) -> list[IterationReport]:
        """Stops the loop, cancels in-flight requests, returns the reports."""
        self._stop.set()
        self._thread.join()
        return self._reports

    def __enter__(self) -> "SchedulerLoop":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()


def latency_bounds(step_seconds: float, next_step_seconds: float) -> tuple[float, float, float]:
    """First-chunk latency bounds for a request arriving during one iteration.

    A request that arrives at a uniformly random point inside an iteration of
    length ``step_seconds`` waits for the remainder of it and then for the
    full next iteration, so its first-chunk latency spans
    ``[min(T, T'), T + T']`` with expectation ``T/2 + T'``.
    Returns ``(minimum, maximum, expected)``.
    """
    if step_seconds < 0 or next_step_seconds < 0:
        raise ValueError("step times must be non-negative")
    return (
        min(step_seconds, next_step_seconds),
        step_seconds + next_step_seconds,
        step_seconds / 2.0 + next_step_seconds,
    )


def write_iteration_log(reports: list[IterationReport], stream) -> None:
    """Writes one JSON object per iteration (NDJSON) to a text stream."""
    for report in reports:
        stream.write(report.as_json() + "\n")
