"""Acoustic model stand-ins: context-mixing encoder and stateful mel decoder.

The encoder consumes the whole phoneme sequence at once; the decoder then
emits mel frames one at a time, carrying its recurrence state across chunk
boundaries so that decoding in chunks is arithmetically identical to decoding
the utterance in one go.  Stopping is a deterministic frame counter, which
makes every request's audio length an exact function of its text.
"""

from dataclasses import dataclass

import numpy as np

from .domain import MelChunk, PipelineConfig, _frozen_array, seeded_vector
from .frontend import FrontendOutput

# Seeded-vector table ids for the four per-position embeddings.
_TABLE_PHONEME = 0
_TABLE_PW = 1
_TABLE_PPH = 2
_TABLE_IPH = 3


@dataclass(frozen=True)
class EncodedFeatures:
    """Encoder output, shape ``(seq_len, feature_dim)``, read-only."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.rows, ndim=2)
        if arr.shape[0] < 1:
            raise ValueError("encoded features need at least one row")
        object.__setattr__(self, "rows", arr)

    @property
    def seq_len(self) -> int:
        return int(self.rows.shape[0])


def encode(frontend_out: FrontendOutput, cfg: PipelineConfig) -> EncodedFeatures:
    """Embeds tokens and mixes each position with its full context.

    Position t sums four seeded embeddings (phoneme, prosodic word, prosodic
    phrase, intonation phrase), then is averaged with the mean of all earlier
    positions and the mean of all later ones.  Every output row therefore
    depends on the entire sequence, which is what forces encoding to happen
    once per request rather than per chunk.
    """
    dim = cfg.feature_dim
    n = frontend_out.seq_len
    summed = np.empty((n, dim), dtype=np.float64)
    for t in range(n):
        summed[t] = (
            seeded_vector(_TABLE_PHONEME, frontend_out.phonemes[t], dim)
            + seeded_vector(_TABLE_PW, frontend_out.pw[t], dim)
            + seeded_vector(_TABLE_PPH, frontend_out.pph[t], dim)
            + seeded_vector(_TABLE_IPH, frontend_out.iph[t], dim)
        )
    rows = np.empty_like(summed)
    for t in range(n):
        prefix = summed[: t + 1].mean(axis=0)
        suffix = summed[t:].mean(axis=0)
        rows[t] = (summed[t] + prefix + suffix) / 3.0
    return EncodedFeatures(rows)


@dataclass(frozen=True)
class DecoderState:
    """Everything the decoder carries from one frame to the next.

    Holding this state per request is what lets the scheduler interleave many
    requests on one decoder: a chunk can resume exactly where the previous
    chunk stopped.

    Attributes:
        last_frame: Most recently emitted mel frame, ``(feature_dim,)``.
        attn_context: Attention-weighted sum over encoder rows.
        attn_weights: Attention distribution of the latest frame,
            ``(seq_len,)``.
        attn_weights_sum: Accumulated attention mass per text position; the
            score penalty on this sum is what moves attention forward.
        attn_hidden / attn_cell: Recurrent state of the attention cell.
        dec_hidden / dec_cell: Recurrent state of the output cell.
        frames_emitted: Frames produced so far.
        target_frames: Total frames this request will produce.
    """

    last_frame: np.ndarray
    attn_context: np.ndarray
    attn_weights: np.ndarray
    attn_weights_sum: np.ndarray
    attn_hidden: np.ndarray
    attn_cell: np.ndarray
    dec_hidden: np.ndarray
    dec_cell: np.ndarray
    frames_emitted: int
    target_frames: int

    def __post_init__(self) -> None:
        for name in (
            "last_frame",
            "attn_context",
            "attn_weights",
            "attn_weights_sum",
            "attn_hidden",
            "attn_cell",
            "dec_hidden",
            "dec_cell",
        ):
            object.__setattr__(self, name, _frozen_array(getattr(self, name), ndim=1))
        if self.attn_weights.shape != self.attn_weights_sum.shape:
            raise ValueError("attention weight vectors disagree on sequence length")
        if not 0 <= self.frames_emitted <= self.target_frames:
            raise ValueError("frames_emitted out of range")


def init_decoder_state(enc: EncodedFeatures, cfg: PipelineConfig) -> DecoderState:
    """All-zero recurrence state with the deterministic frame target."""
    dim = int(enc.rows.shape[1])
    zeros = np.zeros(dim)
    return DecoderState(
        last_frame=zeros,
        attn_context=zeros,
        attn_weights=np.zeros(enc.seq_len),
        attn_weights_sum=np.zeros(enc.seq_len),
        attn_hidden=zeros,
        attn_cell=zeros,
        dec_hidden=zeros,
        dec_cell=zeros,
        frames_emitted=0,
        target_frames=cfg.frames_per_phoneme * enc.seq_len,
    )


def _cell(x: np.ndarray, hidden: np.ndarray, cell: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimal recurrent cell: fold the doubled input, squash, recurse.

    ``x`` is the concatenation of two width-``dim`` vectors; folding adds the
    halves element-wise so the cell sees a fixed-width summary.
    """
    dim = hidden.shape[0]
    folded = x.reshape(-1, dim).sum(axis=0)
    cell_new = np.tanh(0.5 * cell + 0.5 * folded + 0.25 * hidden)
    hidden_new = np.tanh(cell_new)
    return hidden_new, cell_new


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = np.exp(scores - scores.max())
    return shifted / shifted.sum()


def decoder_step(
    state: DecoderState, enc: EncodedFeatures, cfg: PipelineConfig
) -> tuple[np.ndarray, float, DecoderState]:
    """One autoregressive frame: attend, recurse, emit.

    Returns ``(mel_frame, stop_value, new_state)``.  ``stop_value`` is 1.0
    exactly when the frame just emitted reaches the request's target length.
    """
    rows = enc.rows
    if state.attn_weights.shape[0] != rows.shape[0]:
        raise ValueError("decoder state does not match encoded features")
    prenet = np.concatenate([np.tanh(state.last_frame), state.attn_context])
    attn_hidden, attn_cell = _cell(prenet, state.attn_hidden, state.attn_cell)
    scores = rows @ attn_hidden - cfg.attention_penalty * state.attn_weights_sum
    weights = _softmax(scores)
    context = weights @ rows
    dec_hidden, dec_cell = _cell(
        np.concatenate([attn_hidden, context]), state.dec_hidden, state.dec_cell
    )
    frame = np.tanh(dec_hidden + context)
    frames_emitted = state.frames_emitted + 1
    stop_value = 1.0 if frames_emitted >= state.target_frames else 0.0
    new_state = DecoderState(
        last_frame=frame,
        attn_context=context,
        attn_weights=weights,
        attn_weights_sum=state.attn_weights_sum + weights,
        attn_hidden=attn_hidden,
        attn_cell=attn_cell,
        dec_hidden=dec_hidden,
        dec_cell=dec_cell,
        frames_emitted=frames_emitted,
        target_frames=state.target_frames,
    )
    return frame, stop_value, new_state


@dataclass(frozen=True)
class DecodeChunkResult:
    """One chunk of mel output plus the state to resume from.

    ``stop`` is true exactly when the request's mel stream is complete; the
    final chunk may be shorter than ``chunk_frames``.
    """

    mel: MelChunk
    stop: bool
    state: DecoderState


def decode_chunk(
    state: DecoderState, enc: EncodedFeatures, cfg: PipelineConfig
) -> DecodeChunkResult:
    """Runs up to ``chunk_frames`` decoder steps, truncating at the stop gate."""
    if state.frames_emitted >= state.target_frames:
        raise ValueError("decode past stop")
    frames: list[np.ndarray] = []
    current = state
    stopped = False
    for _ in range(cfg.chunk_frames):
        frame, stop_value, current = decoder_step(current, enc, cfg)
        frames.append(frame)
        if stop_value > cfg.stop_threshold:
            stopped = True
            break
    return DecodeChunkResult(mel=MelChunk(np.stack(frames)), stop=stopped, state=current)


def encode_batch(
    frontend_outs: list[FrontendOutput], cfg: PipelineConfig
) -> list[EncodedFeatures]:
    """Batched encoding; items are independent, so this is a plain loop.

    Batching buys scheduling efficiency, not a different computation: the
    per-item arithmetic is identical to the sequential call, which the
    gather/scatter scheduler relies on.
    """
    return [encode(fo, cfg) for fo in frontend_outs]


def decode_chunk_batch(
    pairs: list[tuple[DecoderState, EncodedFeatures]], cfg: PipelineConfig
) -> list[DecodeChunkResult]:
    """Batched chunk decoding over (state, features) pairs; order-preserving."""
    return [decode_chunk(state, enc, cfg) for state, enc in pairs]
