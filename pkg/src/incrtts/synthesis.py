"""Single-request synthesis paths, without any scheduling.

These are the reference implementations the scheduler and the round-based
twin are checked against: one request, one thread, no batching, no costs.
"""

from dataclasses import dataclass

import numpy as np

from .acoustic import decode_chunk, encode, init_decoder_state
from .domain import AudioChunk, MelChunk, PipelineConfig
from .frontend import Lexicon, run_frontend
from .vocoder import VocoderState, generate, vocode_chunk


@dataclass(frozen=True)
class SynthesisResult:
    """Chunked synthesis output for one text."""

    chunks: tuple[AudioChunk, ...]
    mel_frames: int

    @property
    def samples(self) -> np.ndarray:
        return np.concatenate([c.samples for c in self.chunks])

    @property
    def sample_count(self) -> int:
        return sum(c.sample_count for c in self.chunks)


def synthesize_chunks(text: str, lexicon: Lexicon, cfg: PipelineConfig) -> SynthesisResult:
    """Incremental path: frontend, encode, then decode/vocode chunk by chunk."""
    frontend_out = run_frontend(text, lexicon)
    enc = encode(frontend_out, cfg)
    dec_state = init_decoder_state(enc, cfg)
    voc_state = VocoderState.initial()
    chunks: list[AudioChunk] = []
    mel_frames = 0
    while True:
        result = decode_chunk(dec_state, enc, cfg)
        dec_state = result.state
        mel_frames += result.mel.frame_count
        audio, voc_state = vocode_chunk(voc_state, result.mel, result.stop, cfg)
        chunks.append(audio)
        if result.stop:
            return SynthesisResult(chunks=tuple(chunks), mel_frames=mel_frames)


def synthesize_full(text: str, lexicon: Lexicon, cfg: PipelineConfig) -> np.ndarray:
    """Whole-utterance path: decode everything, then vocode once.

    No overlap machinery is involved; this is what the non-incremental twin
    computes per request.
    """
    frontend_out = run_frontend(text, lexicon)
    enc = encode(frontend_out, cfg)
    state = init_decoder_state(enc, cfg)
    frames: list[np.ndarray] = []
    while state.frames_emitted < state.target_frames:
        result = decode_chunk(state, enc, cfg)
        state = result.state
        frames.append(result.mel.frames)
    return generate(MelChunk(np.concatenate(frames)), cfg)
