"""Vocoder stand-in: mel chunks to waveform with cross-fade splicing.

Generating each chunk in isolation would click at the seams, so the vocoder
re-synthesizes the last ``overlap_frames`` of the previous chunk in front of
the current one and fuses the overlapping audio with an equal-power
cross-fade.  To do that it must hold back the final overlap window of every
chunk until the next chunk arrives; the last chunk flushes everything.
"""

import wave
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .domain import AudioChunk, MelChunk, PipelineConfig, _frozen_array

PCM_SCALE = 32767


@dataclass(frozen=True)
class CrossfadeCurve:
    """Equal-power fade ramps: ``fade_in[k]^2 + fade_out[k]^2 == 1``."""

    fade_in: np.ndarray
    fade_out: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "fade_in", _frozen_array(self.fade_in, ndim=1))
        object.__setattr__(self, "fade_out", _frozen_array(self.fade_out, ndim=1))
        if self.fade_in.shape != self.fade_out.shape:
            raise ValueError("fade ramps must have equal length")


def crossfade_curve(length: int) -> CrossfadeCurve:
    """Sine/cosine ramps sampled at window-centered points.

    ``fade_in[k] = sin(pi/2 * (k + 0.5) / length)`` and ``fade_out`` is the
    matching cosine, so summed energy is constant across the window.
    """
    if length < 1:
        raise ValueError("crossfade length must be >= 1")
    theta = (np.pi / 2.0) * ((np.arange(length, dtype=np.float64) + 0.5) / length)
    return CrossfadeCurve(fade_in=np.sin(theta), fade_out=np.cos(theta))


@lru_cache(maxsize=None)
def _curve(length: int) -> CrossfadeCurve:
    return crossfade_curve(length)


def generate(mel: MelChunk, cfg: PipelineConfig) -> np.ndarray:
    """Expands each mel frame to ``hop_samples`` samples of its row mean.

    Piecewise-constant synthesis makes splice points exactly checkable: the
    audio for a frame is the same whether the frame was vocoded alone or as
    part of a longer block.
    """
    means = mel.frames.mean(axis=1)
    return np.repeat(means, cfg.hop_samples)


@dataclass(frozen=True)
class VocoderState:
    """Carry-over between a request's consecutive chunks.

    ``mel_tail`` is the last ``overlap_frames`` mel frames of the previous
    chunk (re-synthesized in front of the next one) and ``held_tail`` is the
    corresponding audio withheld from emission until it can be fused.  Both
    are None before the first chunk and after the last.
    """

    mel_tail: np.ndarray | None
    held_tail: np.ndarray | None
    emitted_samples: int = 0

    def __post_init__(self) -> None:
        if self.mel_tail is not None:
            object.__setattr__(self, "mel_tail", _frozen_array(self.mel_tail, ndim=2))
        if self.held_tail is not None:
            object.__setattr__(self, "held_tail", _frozen_array(self.held_tail, ndim=1))
        if (self.mel_tail is None) != (self.held_tail is None):
            raise ValueError("mel_tail and held_tail must be set together")
        if self.emitted_samples < 0:
            raise ValueError("emitted_samples must be >= 0")

    @classmethod
    def initial(cls) -> "VocoderState":
        return cls(mel_tail=None, held_tail=None, emitted_samples=0)


def vocode_chunk(
    state: VocoderState, mel: MelChunk, is_last: bool, cfg: PipelineConfig
) -> tuple[AudioChunk, VocoderState]:
    """Vocodes one chunk, splicing it onto the previous one.

    Non-final chunks emit everything except the trailing overlap window,
    which is held back for fusion; the final chunk emits the fused overlap
    plus all remaining samples, so per-request totals are conserved exactly.
    Returns the emitted chunk (with its stream offset) and the next state.
    """
    overlap_len = cfg.overlap_samples
    if not is_last and mel.frame_count < cfg.overlap_frames:
        raise ValueError("non-final chunk shorter than the overlap window")

    if state.mel_tail is None:
        samples = generate(mel, cfg)
        if is_last:
            emitted = samples
            new_state = VocoderState(None, None, state.emitted_samples + emitted.size)
        else:
            if samples.size <= overlap_len:
                raise ValueError("non-final chunk shorter than the overlap window")
            emitted = samples[:-overlap_len]
            new_state = VocoderState(
                mel_tail=mel.frames[-cfg.overlap_frames :],
                held_tail=samples[-overlap_len:],
                emitted_samples=state.emitted_samples + emitted.size,
            )
        return AudioChunk(emitted, state.emitted_samples), new_state

    curve = _curve(overlap_len)
    spliced = MelChunk(np.concatenate([state.mel_tail, mel.frames]))
    samples = generate(spliced, cfg)
    fused = curve.fade_in * samples[:overlap_len] + curve.fade_out * state.held_tail
    if is_last:
        emitted = np.concatenate([fused, samples[overlap_len:]])
        new_state = VocoderState(None, None, state.emitted_samples + emitted.size)
    else:
        emitted = np.concatenate([fused, samples[overlap_len:-overlap_len]])
        new_state = VocoderState(
            mel_tail=mel.frames[-cfg.overlap_frames :],
            held_tail=samples[-overlap_len:],
            emitted_samples=state.emitted_samples + emitted.size,
        )
    return AudioChunk(emitted, state.emitted_samples), new_state


def vocode_batch(
    triples: list[tuple[VocoderState, MelChunk, bool]], cfg: PipelineConfig
) -> list[tuple[AudioChunk, VocoderState]]:
    """Batched vocoding over (state, mel, is_last) triples; order-preserving."""
    return [vocode_chunk(state, mel, is_last, cfg) for state, mel, is_last in triples]


def pcm16_encode(samples: np.ndarray) -> bytes:
    """Float samples to 16-bit little-endian PCM, clamping to [-1, 1]."""
    clipped = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return (np.round(clipped * PCM_SCALE).astype("<i2")).tobytes()


def pcm16_decode(data: bytes) -> np.ndarray:
    """Inverse of :func:`pcm16_encode` up to quantization error."""
    if len(data) % 2 != 0:
        raise ValueError("PCM payload has odd byte length")
    return np.frombuffer(data, dtype="<i2").astype(np.float64) / PCM_SCALE


def write_wav(path: str, samples: np.ndarray, sample_rate: int) -> None:
    """Writes mono 16-bit PCM WAV."""
    with wave.open(path, "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm16_encode(samples))
