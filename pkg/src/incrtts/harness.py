"""Load-test harness: paced request traces, latency records, aggregation.

The harness plays a timed trace of texts against a serving pipeline (the
incremental loop or the round-based twin), timestamps every request's first
and last audio chunk at the client boundary, and aggregates first-chunk
latency (FCL), last-chunk latency (LCL), and the real-time factor
RTF = LCL / audio duration.
"""

import csv
import json
import math
import random
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from importlib import resources

from .baseline import BaselineServer
from .domain import PipelineConfig, validate_config
from .frontend import Lexicon, default_lexicon
from .scheduler import (
    ChunkStream,
    CostModel,
    IterationReport,
    RequestPool,
    SchedulerLoop,
    _wait_until,
    build_modules,
    run_iteration,
)

TEXT_CLASSES = ("short", "medium", "long")
PIPELINES = ("incremental", "baseline")


class HarnessError(RuntimeError):
    """A driven request failed, was cancelled, or misbehaved."""


def parse_texts(text: str) -> dict[str, list[str]]:
    """Parses ``class<TAB>text`` fixture lines grouped by class."""
    fixtures: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"line {lineno}: expected 'class<TAB>text'")
        cls, body = line.split("\t", 1)
        cls, body = cls.strip(), body.strip()
        if not cls or not body:
            raise ValueError(f"line {lineno}: empty class or text")
        fixtures.setdefault(cls, []).append(body)
    return fixtures


def load_texts(path: str) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_texts(fh.read())


def default_texts() -> dict[str, list[str]]:
    """Loads the calibrated text fixtures bundled with the package."""
    raw = resources.files("incrtts").joinpath("data/texts.tsv").read_text("utf-8")
    return parse_texts(raw)


@dataclass(frozen=True)
class LoadProfile:
    """One benchmark scenario: request rate, length, and text mix."""

    qps: int
    duration_seconds: float = 200.0
    text_class: str = "mixed"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.qps < 1:
            raise ValueError("qps must be >= 1")
        if self.duration_seconds <= 0:
            raise ValueError("duration_seconds must be > 0")
        if self.text_class != "mixed" and self.text_class not in TEXT_CLASSES:
            raise ValueError(f"unknown text class {self.text_class!r}")


@dataclass(frozen=True)
class TimedRequest:
    """One trace entry: what to send and when (seconds from trace start)."""

    send_at: float
    text: str
    text_class: str


def make_trace(
    profile: LoadProfile, fixtures: dict[str, list[str]] | None = None
) -> list[TimedRequest]:
    """Builds an evenly spaced trace: request i departs at ``i / qps``.

    A fixed class cycles through its texts; ``mixed`` draws the class
    uniformly per request from a seeded generator, so traces are
    reproducible.
    """
    fixtures = default_texts() if fixtures is None else fixtures
    classes = TEXT_CLASSES if profile.text_class == "mixed" else (profile.text_class,)
    for cls in classes:
        if not fixtures.get(cls):
            raise ValueError(f"no texts for class {cls!r}")
    rng = random.Random(profile.seed)
    count = int(profile.qps * profile.duration_seconds)
    trace: list[TimedRequest] = []
    for i in range(count):
        cls = rng.choice(classes) if profile.text_class == "mixed" else profile.text_class
        texts = fixtures[cls]
        trace.append(TimedRequest(send_at=i / profile.qps, text=texts[i % len(texts)], text_class=cls))
    return trace


@dataclass(frozen=True)
class LatencyRecord:
    """Client-side timing of one request; times are trace-relative seconds."""

    request_id: int
    text_class: str
    text: str
    send_time: float
    first_chunk_time: float
    last_chunk_time: float
    chunk_count: int
    total_samples: int
    contiguous: bool
    audio_seconds: float

    def __post_init__(self) -> None:
        if not self.send_time <= self.first_chunk_time <= self.last_chunk_time:
            raise ValueError("timestamps out of order")
        if self.audio_seconds <= 0:
            raise ValueError("audio_seconds must be > 0")

    @property
    def fcl(self) -> float:
        return self.first_chunk_time - self.send_time

    @property
    def lcl(self) -> float:
        return self.last_chunk_time - self.send_time

    @property
    def rtf(self) -> float:
        return self.lcl / self.audio_seconds


def _consume(
    stream: ChunkStream,
    request: TimedRequest,
    request_id: int,
    send_time: float,
    origin: float,
    sample_rate: int,
) -> LatencyRecord:
    """Client thread body: drain one stream, timestamping at receipt."""
    first = last = None
    total = 0
    chunks = 0
    contiguous = True
    for chunk in stream:
        now = time.perf_counter() - origin
        if first is None:
            first = now
        last = now
        if chunk.sample_offset != total:
            contiguous = False
        total += chunk.sample_count
        chunks += 1
    if first is None:
        raise HarnessError(f"request {request_id}: stream completed without audio")
    return LatencyRecord(
        request_id=request_id,
        text_class=request.text_class,
        text=request.text,
        send_time=send_time,
        first_chunk_time=first,
        last_chunk_time=last,
        chunk_count=chunks,
        total_samples=total,
        contiguous=contiguous,
        audio_seconds=total / sample_rate,
    )


def drive_trace(
    trace: list[TimedRequest],
    submit,
    sample_rate: int,
    max_clients: int = 64,
) -> list[LatencyRecord]:
    """Paces a trace against ``submit(text) -> (id, stream)`` and collects.

    The dispatcher sleeps to each entry's send time, submits, and hands the
    stream to a client thread; submission itself is non-blocking.  A short
    interpreter switch interval keeps client timestamps from lagging the
    producer.  Any failed request raises HarnessError naming the culprit.
    """
    if not trace:
        return []
    # Fine-grained thread preemption keeps chunk receive timestamps honest
    # when several consumers wake at once against a busy scheduler thread.
    previous_switch = sys.getswitchinterval()
    sys.setswitchinterval(0.0002)
    try:
        with ThreadPoolExecutor(max_workers=max_clients, thread_name_prefix="client") as pool:
            origin = time.perf_counter()
            futures = []
            for request in trace:
                _wait_until(origin + request.send_at)
                send_time = time.perf_counter() - origin
                request_id, stream = submit(request.text)
                futures.append(
                    pool.submit(_consume, stream, request, request_id, send_time, origin, sample_rate)
                )
            records: list[LatencyRecord] = []
            errors: list[str] = []
            for future in futures:
                try:
                    records.append(future.result())
                except Exception as exc:
                    errors.append(str(exc))
            if errors:
                raise HarnessError(f"{len(errors)} request(s) failed: {errors[:3]}")
            return records
    finally:
        sys.setswitchinterval(previous_switch)


def run_pressure_test(
    profile: LoadProfile,
    pipeline: str,
    cfg: PipelineConfig | None = None,
    cost_model: CostModel | None = None,
    lexicon: Lexicon | None = None,
    fixtures: dict[str, list[str]] | None = None,
    max_clients: int = 64,
) -> list[LatencyRecord]:
    """Runs one profile against a freshly built pipeline and tears it down."""
    if pipeline not in PIPELINES:
        raise ValueError(f"unknown pipeline {pipeline!r}; expected one of {PIPELINES}")
    cfg = validate_config(cfg if cfg is not None else PipelineConfig())
    cost_model = cost_model if cost_model is not None else CostModel.default()
    lexicon = lexicon if lexicon is not None else default_lexicon()
    modules = build_modules(lexicon, cfg)
    trace = make_trace(profile, fixtures)
    if pipeline == "incremental":
        server = SchedulerLoop(modules, cost_model, cfg)
    else:
        server = BaselineServer(modules, cost_model, cfg)
    with server:
        return drive_trace(trace, server.submit, cfg.sample_rate, max_clients=max_clients)


def exclude_warmup(records: list[LatencyRecord], warmup_seconds: float) -> list[LatencyRecord]:
    """Drops requests sent during the warm-up window at the trace start."""
    return [r for r in records if r.send_time >= warmup_seconds]


def nearest_rank(values: list[float], percentile: float) -> float:
    """Nearest-rank percentile: smallest value covering ``percentile`` %."""
    if not values:
        raise ValueError("no values")
    if not 0 < percentile <= 100:
        raise ValueError("percentile must be in (0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class AggregateStats:
    """Distribution summary of one batch of latency records."""

    requests: int
    fcl_mean: float
    fcl_p50: float
    fcl_p95: float
    fcl_p99: float
    fcl_max: float
    lcl_mean: float
    lcl_p50: float
    lcl_p95: float
    lcl_p99: float
    lcl_max: float
    rtf_mean: float
    rtf_p95: float
    audio_seconds_mean: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def aggregate(records: list[LatencyRecord]) -> AggregateStats:
    """Means, nearest-rank percentiles, and maxima over a record batch."""
    if not records:
        raise ValueError("cannot aggregate zero records")
    fcls = [r.fcl for r in records]
    lcls = [r.lcl for r in records]
    rtfs = [r.rtf for r in records]
    return AggregateStats(
        requests=len(records),
        fcl_mean=sum(fcls) / len(fcls),
        fcl_p50=nearest_rank(fcls, 50),
        fcl_p95=nearest_rank(fcls, 95),
        fcl_p99=nearest_rank(fcls, 99),
        fcl_max=max(fcls),
        lcl_mean=sum(lcls) / len(lcls),
        lcl_p50=nearest_rank(lcls, 50),
        lcl_p95=nearest_rank(lcls, 95),
        lcl_p99=nearest_rank(lcls, 99),
        lcl_max=max(lcls),
        rtf_mean=sum(rtfs) / len(rtfs),
        rtf_p95=nearest_rank(rtfs, 95),
        audio_seconds_mean=sum(r.audio_seconds for r in records) / len(records),
    )


ROW_TAGS = ("pipeline", "qps", "text_class", "overlap_frames", "warmup_seconds")


def bench_row(
    pipeline: str,
    profile: LoadProfile,
    cfg: PipelineConfig,
    cost_model: CostModel,
    warmup_seconds: float = 5.0,
    fixtures: dict[str, list[str]] | None = None,
    max_clients: int = 64,
) -> dict[str, float | int | str]:
    """Runs one profile and returns a tagged, flat result row."""
    records = run_pressure_test(
        profile, pipeline, cfg=cfg, cost_model=cost_model, fixtures=fixtures, max_clients=max_clients
    )
    kept = exclude_warmup(records, warmup_seconds)
    if not kept:
        raise HarnessError("warm-up window swallowed every request; lower warmup_seconds")
    stats = aggregate(kept)
    row: dict[str, float | int | str] = {
        "pipeline": pipeline,
        "qps": profile.qps,
        "text_class": profile.text_class,
        "overlap_frames": cfg.overlap_frames,
        "warmup_seconds": warmup_seconds,
    }
    row.update(stats.as_dict())
    return row


def write_csv(rows: list[dict], path: str) -> None:
    """Writes result rows as CSV with a header; all rows share one schema."""
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_json(rows: list[dict], path: str) -> None:
    """Mirrors the CSV rows as a JSON array."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
        fh.write("\n")


# Scripted admission scenario: four requests with staggered arrivals over a
# zero-cost pipeline, checking batch membership step by step.
REPLAY_TEXT_4CHUNK = "欢迎收听新闻播报"
REPLAY_TEXT_5CHUNK = "欢迎收听今天新闻。"


def replay_admission_scenario(
    cfg: PipelineConfig | None = None, lexicon: Lexicon | None = None
) -> list[IterationReport]:
    """Replays the canonical four-request admission timeline synchronously.

    Request 1 arrives alone; requests 2 and 3 arrive while iteration 1 is
    running and join iteration 2; request 4 arrives while iteration 5 is
    running, joins iteration 6, and shares it with request 3's final chunk.
    Returns the per-iteration reports (driven with a zero cost model, so the
    timeline is deterministic and instant).
    """
    cfg = validate_config(cfg if cfg is not None else PipelineConfig())
    lexicon = lexicon if lexicon is not None else default_lexicon()
    modules = build_modules(lexicon, cfg)
    cost = CostModel.zero()
    pool = RequestPool()
    reports: list[IterationReport] = []

    def step() -> None:
        reports.append(run_iteration(pool, modules, cost, cfg, step_index=len(reports)))

    pool.submit(REPLAY_TEXT_4CHUNK)  # request 1
    step()  # 0
    step()  # 1
    pool.submit(REPLAY_TEXT_4CHUNK)  # request 2, arrives during iteration 1
    pool.submit(REPLAY_TEXT_5CHUNK)  # request 3, arrives during iteration 1
    step()  # 2
    step()  # 3: request 1 completes
    step()  # 4
    step()  # 5: request 2 completes
    pool.submit(REPLAY_TEXT_4CHUNK)  # request 4, arrives during iteration 5
    step()  # 6: request 3 completes alongside request 4's first chunk
    while pool.pending():
        step()
    return reports
