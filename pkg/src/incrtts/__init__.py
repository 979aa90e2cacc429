"""Incremental TTS serving engine with deterministic model stand-ins.

The package splits a text-to-speech pipeline into four modules (frontend,
encoder, decoder, vocoder) and serves many concurrent requests through a
single iteration loop: new requests join the running batch at the next
iteration, each request produces audio chunk by chunk, and chunk boundaries
are spliced with an equal-power cross-fade.  A round-based non-incremental
twin and a load-test harness make the latency trade-offs measurable.
"""

from .acoustic import (
    DecodeChunkResult,
    DecoderState,
    EncodedFeatures,
    decode_chunk,
    decoder_step,
    encode,
    init_decoder_state,
)
from .baseline import BaselineServer, RoundReport, run_round
from .domain import (
    AudioChunk,
    ConfigError,
    MelChunk,
    PipelineConfig,
    load_config,
    seeded_vector,
    validate_config,
)
from .frontend import (
    FrontendOutput,
    Lexicon,
    default_lexicon,
    g2p,
    load_lexicon,
    predict_prosody,
    regulate,
    run_frontend,
)
from .harness import (
    AggregateStats,
    HarnessError,
    LatencyRecord,
    LoadProfile,
    aggregate,
    drive_trace,
    make_trace,
    replay_admission_scenario,
    run_pressure_test,
)
from .scheduler import (
    ChunkStream,
    CostModel,
    IterationReport,
    ModuleCost,
    PipelineModules,
    PoolClosed,
    RequestCancelled,
    RequestFailed,
    RequestPool,
    SchedulerLoop,
    build_modules,
    latency_bounds,
    run_iteration,
    run_loop,
)
from .server import TtsServer, request_audio, run_client, serve
from .synthesis import synthesize_chunks, synthesize_full
from .vocoder import (
    CrossfadeCurve,
    VocoderState,
    crossfade_curve,
    generate,
    vocode_chunk,
    write_wav,
)

__version__ = "0.1.0"
