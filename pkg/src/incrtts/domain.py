"""Core value types, pipeline configuration, and seeded deterministic vectors.

Every tensor flowing through the synthesis pipeline is a small float64 array
whose entries ultimately come from :func:`seeded_vector`, a pure integer-hash
expansion.  There are no learned parameters anywhere, which keeps every stage
reproducible bit-for-bit across runs and platforms and makes end-to-end
equality checks meaningful.
"""

from dataclasses import dataclass, fields

import numpy as np


class ConfigError(ValueError):
    """Raised when configuration values violate an invariant."""


_MASK64 = (1 << 64) - 1


def _splitmix64(key: int) -> int:
    """SplitMix64 finalizer: avalanches a 64-bit key into a 64-bit hash."""
    z = key & _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def seeded_vector(table_id: int, token_id: int, dim: int) -> np.ndarray:
    """Deterministic embedding stand-in: ``dim`` floats in [-1, 1).

    Component ``d`` packs ``(table_id, token_id, d)`` into a single 64-bit key
    (table in the top byte, token in the middle 40 bits, component in the low
    16), runs it through the SplitMix64 finalizer, and maps the top 53 bits of
    the hash uniformly onto [-1, 1).  Distinct tables therefore give unrelated
    vectors for the same token id.

    The result is read-only so callers can share it safely across threads.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    base = ((table_id & 0xFF) << 56) | ((token_id & 0xFFFFFFFFFF) << 16)
    out = np.empty(dim, dtype=np.float64)
    for d in range(dim):
        h = _splitmix64(base | (d & 0xFFFF))
        out[d] = (h >> 11) / float(1 << 53) * 2.0 - 1.0
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs shared by every pipeline stage.

    Attributes:
        chunk_frames: Mel frames decoded per request per iteration.
        overlap_frames: Frames of context re-synthesized at each chunk
            boundary; also the length of the cross-fade window.
        hop_samples: Audio samples generated per mel frame.
        sample_rate: Output audio sample rate in Hz.
        feature_dim: Width of every mel frame and hidden state vector.
        frames_per_phoneme: Deterministic duration model; a request's total
            mel length is ``frames_per_phoneme * len(phonemes)``.
        stop_threshold: Decoder stop gate; a stop value above this ends the
            request's mel stream.
        attention_penalty: Weight of the cumulative-attention penalty that
            pushes the attention forward through the text.
    """

    chunk_frames: int = 32
    overlap_frames: int = 4
    hop_samples: int = 256
    sample_rate: int = 22050
    feature_dim: int = 8
    frames_per_phoneme: int = 8
    stop_threshold: float = 0.5
    attention_penalty: float = 0.1

    @property
    def overlap_samples(self) -> int:
        """Length of the cross-fade window in audio samples."""
        return self.overlap_frames * self.hop_samples

    @property
    def chunk_seconds(self) -> float:
        """Audio seconds covered by one full chunk."""
        return self.chunk_frames * self.hop_samples / self.sample_rate


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Checks every config invariant; returns ``cfg`` unchanged if valid."""
    if cfg.chunk_frames < 1:
        raise ConfigError("chunk_frames must be >= 1")
    if cfg.overlap_frames < 1:
        raise ConfigError("overlap_frames must be >= 1")
    if cfg.overlap_frames >= cfg.chunk_frames:
        raise ConfigError("overlap must be < chunk")
    if cfg.hop_samples < 1:
        raise ConfigError("hop_samples must be >= 1")
    if cfg.sample_rate < 1:
        raise ConfigError("sample_rate must be >= 1")
    if cfg.feature_dim < 1:
        raise ConfigError("feature_dim must be >= 1")
    if cfg.frames_per_phoneme < 1:
        raise ConfigError("frames_per_phoneme must be >= 1")
    if not 0.0 < cfg.stop_threshold < 1.0:
        raise ConfigError("stop_threshold must lie strictly between 0 and 1")
    if cfg.attention_penalty < 0.0:
        raise ConfigError("attention_penalty must be >= 0")
    return cfg


def parse_kv(text: str) -> dict[str, str]:
    """Parses ``key = value`` lines into a dict.

    Blank lines are skipped and ``#`` starts a comment anywhere on a line.
    Raises ConfigError on a non-empty line without ``=``.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value.strip()
    return out


_CONFIG_FIELDS = {f.name: f.type for f in fields(PipelineConfig)}


def config_from_mapping(mapping: dict[str, str]) -> PipelineConfig:
    """Builds a validated PipelineConfig from string key-value pairs.

    Keys that are not config fields are ignored so the same file can carry
    settings for other components (for example module cost parameters).
    """
    kwargs: dict[str, int | float] = {}
    for name, ftype in _CONFIG_FIELDS.items():
        if name not in mapping:
            continue
        raw = mapping[name]
        try:
            kwargs[name] = int(raw) if ftype is int else float(raw)
        except ValueError:
            raise ConfigError(f"config key {name}: cannot parse {raw!r}") from None
    return validate_config(PipelineConfig(**kwargs))


def config_keys() -> frozenset[str]:
    """Names of the keys :func:`config_from_mapping` understands."""
    return frozenset(_CONFIG_FIELDS)


def load_config(path: str) -> PipelineConfig:
    """Reads a ``key = value`` settings file into a validated config."""
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_mapping(parse_kv(fh.read()))


def _frozen_array(values, dtype=np.float64, ndim: int | None = None) -> np.ndarray:
    """Copies ``values`` into a read-only float array, checking finiteness."""
    arr = np.array(values, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("array contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class MelChunk:
    """A block of consecutive mel frames, shape ``(frame_count, feature_dim)``.

    Construction copies the data and marks it read-only, so chunks are safe
    to hand across threads.  A chunk always holds at least one frame.
    """

    frames: np.ndarray

    def __post_init__(self) -> None:
        arr = _frozen_array(self.frames, ndim=2)
        if arr.shape[0] < 1:
            raise ValueError("mel chunk needs at least one frame")
        object.__setattr__(self, "frames", arr)

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class AudioChunk:
    """A run of audio samples plus its offset within the request's stream.

    ``sample_offset`` is the index of the first sample relative to the start
    of the utterance, so consumers can verify the stream is contiguous.
    """

    samples: np.ndarray
    sample_offset: int

    def __post_init__(self) -> None:
        arr = _frozen_array(self.samples, ndim=1)
        object.__setattr__(self, "samples", arr)
        if self.sample_offset < 0:
            raise ValueError("sample_offset must be >= 0")

    @property
    def sample_count(self) -> int:
        return int(self.samples.shape[0])
