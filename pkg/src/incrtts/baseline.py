"""Round-based non-incremental twin of the serving loop.

Requests queue up and are served in fixed batches: a round drains up to
``max_batch`` waiting requests, runs the full pipeline on all of them to
completion, and only then delivers each request's entire waveform in one
message.  Requests arriving during a round wait for the next one.

The decoder keeps the whole batch in lockstep, so short utterances are
padded to the longest one in their round and pay for decode steps they do
not need.  Costs are charged per decoder step at the round's full batch
size, scaled so one frame costs the same as it does through the incremental
loop's chunked decoder calls; the vocoder likewise charges one chunk-sized
invocation per started chunk of the longest item.
"""

import math
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .acoustic import decoder_step
from .domain import AudioChunk, MelChunk, PipelineConfig
from .scheduler import (
    ChunkStream,
    CostModel,
    PipelineModules,
    PoolClosed,
    _run_module,
    _wait_until,
    _ItemError,
)
from .vocoder import generate

DEFAULT_MAX_BATCH = 64


@dataclass
class BaselineRequest:
    """One queued request and its single-response stream."""

    request_id: int
    text: str
    arrival_time: float
    chunk_sink: ChunkStream


@dataclass(frozen=True)
class RoundReport:
    """What one round did: who was in it and how long everything decoded."""

    round_index: int
    request_ids: tuple[int, ...]
    target_frames: tuple[int, ...]
    decoder_steps: int
    round_seconds: float


def run_round(
    requests: list[BaselineRequest],
    modules: PipelineModules,
    cost_model: CostModel,
    cfg: PipelineConfig,
    round_index: int = 0,
) -> RoundReport:
    """Serves one drained batch to completion and delivers whole waveforms.

    Every request's response lands on its stream as a single AudioChunk at
    offset 0, followed by the completion marker, after the entire round's
    cost has been paid.
    """
    if not requests:
        raise ValueError("a round needs at least one request")
    batch_size = len(requests)
    round_start = time.perf_counter()

    fronts = _run_module(
        modules.frontend_batch, [r.text for r in requests], cost_model.frontend
    )
    live = []
    for request, out in zip(requests, fronts):
        if isinstance(out, _ItemError):
            request.chunk_sink._fail(out.message)
        else:
            live.append((request, out))

    encoded = []
    if live:
        encoded = _run_module(
            modules.encoder_batch, [fo for _, fo in live], cost_model.encoder
        )
    survivors = []
    for (request, _), out in zip(live, encoded):
        if isinstance(out, _ItemError):
            request.chunk_sink._fail(out.message)
        else:
            survivors.append((request, out))

    if not survivors:
        return RoundReport(
            round_index=round_index,
            request_ids=tuple(r.request_id for r in requests),
            target_frames=(),
            decoder_steps=0,
            round_seconds=time.perf_counter() - round_start,
        )

    # Lockstep decode: everyone runs until the longest item stops; finished
    # items are padding but the full batch price is still charged per step.
    states = [dec_state for _, (_, dec_state) in survivors]
    features = [enc for _, (enc, _) in survivors]
    targets = [state.target_frames for state in states]
    steps = max(targets)
    mels: list[list[np.ndarray]] = [[] for _ in survivors]
    decode_start = time.perf_counter()
    for _ in range(steps):
        for i in range(len(survivors)):
            if states[i].frames_emitted < targets[i]:
                frame, _, states[i] = decoder_step(states[i], features[i], cfg)
                mels[i].append(frame)
    per_step = cost_model.decoder.duration(batch_size) / cfg.chunk_frames
    _wait_until(decode_start + steps * per_step)

    vocode_start = time.perf_counter()
    waveforms = [generate(MelChunk(np.stack(rows)), cfg) for rows in mels]
    invocations = math.ceil(steps / cfg.chunk_frames)
    _wait_until(vocode_start + invocations * cost_model.vocoder.duration(batch_size))

    for (request, _), samples in zip(survivors, waveforms):
        request.chunk_sink._push(AudioChunk(samples, 0))
        request.chunk_sink._finish()

    return RoundReport(
        round_index=round_index,
        request_ids=tuple(r.request_id for r in requests),
        target_frames=tuple(targets),
        decoder_steps=steps,
        round_seconds=time.perf_counter() - round_start,
    )


class BaselineServer:
    """Queue-and-round server with the same submit surface as the scheduler."""

    def __init__(
        self,
        modules: PipelineModules,
        cost_model: CostModel,
        cfg: PipelineConfig,
        max_batch: int = DEFAULT_MAX_BATCH,
        poll_interval: float = 0.001,
    ):
        if max_batch < 1:
            raise ValueError("max_batch must be >= 1")
        self._modules = modules
        self._cost_model = cost_model
        self._cfg = cfg
        self._max_batch = max_batch
        self._poll_interval = poll_interval
        self._ingress: queue.SimpleQueue = queue.SimpleQueue()
        self._next_id = 0
        self._id_lock = threading.Lock()
        self._stop = threading.Event()
        self._closed = threading.Event()
        self._reports: list[RoundReport] = []
        self._thread = threading.Thread(target=self._run, name="baseline-loop", daemon=True)

    def submit(self, text: str) -> tuple[int, ChunkStream]:
        if self._closed.is_set():
            raise PoolClosed("baseline server is shut down")
        if not text:
            raise ValueError("empty input")
        with self._id_lock:
            self._next_id += 1
            request_id = self._next_id
        stream = ChunkStream(request_id)
        self._ingress.put(BaselineRequest(request_id, text, time.perf_counter(), stream))
        return request_id, stream

    def _drain(self) -> list[BaselineRequest]:
        batch: list[BaselineRequest] = []
        while len(batch) < self._max_batch:
            try:
                batch.append(self._ingress.get_nowait())
            except queue.Empty:
                break
        return batch

    def _run(self) -> None:
        round_index = 0
        try:
            while not self._stop.is_set():
                batch = self._drain()
                if not batch:
                    time.sleep(self._poll_interval)
                    continue
                self._reports.append(
                    run_round(batch, self._modules, self._cost_model, self._cfg, round_index)
                )
                round_index += 1
        finally:
            self._closed.set()
            for _ in range(2):
                for request in self._drain():
                    request.chunk_sink._cancel()

    def start(self) -> "BaselineServer":
        self._thread.start()
        return self

    def stop(self) -> list[RoundReport]:
        self._stop.set()
        self._thread.join()
        return self._reports

    def __enter__(self) -> "BaselineServer":
        return self.start()

    def __exit__(self, *exc_info) -> None:
        self.stop()
