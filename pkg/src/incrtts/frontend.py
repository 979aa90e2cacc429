"""Text frontend: lexicon-driven G2P, rule prosody, and length regulation.

The frontend turns a raw text string into phoneme ids plus per-phoneme
prosody tokens.  It is deliberately rule-based and table-driven so its output
is a pure function of the text and the lexicon file.
"""

from dataclasses import dataclass
from importlib import resources

UNK_SYMBOL = "<unk>"
UNK_PHONEME_ID = 0

# Characters treated as phrase/sentence boundaries by the prosody rules.
PUNCTUATION = frozenset("。，、；：？！…—·“”‘’《》〈〉（）,.;:?!()\"'")

PHONES_HEADER = "[phones]"


class LexiconError(ValueError):
    """Raised when a lexicon file violates its invariants."""


@dataclass(frozen=True)
class Lexicon:
    """Pronunciation tables driving forward-maximum-matching G2P.

    Attributes:
        phrase_to_pinyin: Phrase (1..max_phrase_len chars) to one pinyin
            syllable per character.
        pinyin_to_phonemes: Pinyin syllable to 1..3 phoneme token ids.
        phoneme_symbols: Token id to symbol; index 0 is the unknown phoneme.
        max_phrase_len: Length in characters of the longest phrase.
    """

    phrase_to_pinyin: dict[str, tuple[str, ...]]
    pinyin_to_phonemes: dict[str, tuple[int, ...]]
    phoneme_symbols: tuple[str, ...]
    max_phrase_len: int

    @property
    def vocab_size(self) -> int:
        return len(self.phoneme_symbols)


def build_lexicon(
    phrase_pinyin: dict[str, list[str]], pinyin_phones: dict[str, list[str]]
) -> Lexicon:
    """Assigns phoneme ids and validates the cross-references.

    Phoneme ids are assigned by first appearance across the pinyin entries,
    starting at 1; id 0 is reserved for the unknown phoneme.
    """
    symbols: list[str] = [UNK_SYMBOL]
    symbol_ids: dict[str, int] = {UNK_SYMBOL: UNK_PHONEME_ID}
    pinyin_to_phonemes: dict[str, tuple[int, ...]] = {}
    for syllable, phones in pinyin_phones.items():
        if not 1 <= len(phones) <= 3:
            raise LexiconError(f"pinyin {syllable!r} must map to 1..3 phonemes, got {len(phones)}")
        ids = []
        for symbol in phones:
            if symbol not in symbol_ids:
                symbol_ids[symbol] = len(symbols)
                symbols.append(symbol)
            ids.append(symbol_ids[symbol])
        pinyin_to_phonemes[syllable] = tuple(ids)

    phrase_to_pinyin: dict[str, tuple[str, ...]] = {}
    for phrase, syllables in phrase_pinyin.items():
        if not phrase:
            raise LexiconError("empty phrase")
        if len(syllables) != len(phrase):
            raise LexiconError(
                f"phrase {phrase!r} has {len(phrase)} characters but {len(syllables)} syllables"
            )
        for syllable in syllables:
            if syllable not in pinyin_to_phonemes:
                raise LexiconError(f"phrase {phrase!r} uses unknown pinyin {syllable!r}")
        phrase_to_pinyin[phrase] = tuple(syllables)

    for phrase in phrase_to_pinyin:
        for ch in phrase:
            if ch not in phrase_to_pinyin:
                raise LexiconError(f"character {ch!r} of {phrase!r} has no single-character entry")

    return Lexicon(
        phrase_to_pinyin=phrase_to_pinyin,
        pinyin_to_phonemes=pinyin_to_phonemes,
        phoneme_symbols=tuple(symbols),
        max_phrase_len=max(len(p) for p in phrase_to_pinyin),
    )


def parse_lexicon(text: str) -> Lexicon:
    """Parses the two-section tab-separated lexicon format.

    The first section lists ``phrase<TAB>pinyin pinyin ...`` lines, then a
    ``[phones]`` header, then ``pinyin<TAB>phoneme phoneme ...`` lines.
    Comments start with ``#``; blank lines are ignored.
    """
    phrase_pinyin: dict[str, list[str]] = {}
    pinyin_phones: dict[str, list[str]] = {}
    in_phones = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        if line.strip() == PHONES_HEADER:
            if in_phones:
                raise LexiconError(f"line {lineno}: duplicate {PHONES_HEADER} header")
            in_phones = True
            continue
        if "\t" not in line:
            raise LexiconError(f"line {lineno}: expected 'entry<TAB>values', got {raw!r}")
        head, tail = line.split("\t", 1)
        head = head.strip()
        values = tail.split()
        if not head or not values:
            raise LexiconError(f"line {lineno}: empty entry or value list")
        target = pinyin_phones if in_phones else phrase_pinyin
        if head in target:
            raise LexiconError(f"line {lineno}: duplicate entry {head!r}")
        target[head] = values
    if not in_phones:
        raise LexiconError(f"missing {PHONES_HEADER} section")
    return build_lexicon(phrase_pinyin, pinyin_phones)


def load_lexicon(path: str) -> Lexicon:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_lexicon(fh.read())


def default_lexicon() -> Lexicon:
    """Loads the Mandarin mini-lexicon bundled with the package."""
    text = resources.files("incrtts").joinpath("data/lexicon.tsv").read_text("utf-8")
    return parse_lexicon(text)


def g2p(text: str, lexicon: Lexicon) -> tuple[list[int], list[int]]:
    """Greedy longest-prefix phrase matching, left to right.

    Returns ``(phonemes, char_counts)`` where ``char_counts`` has one entry
    per input character giving how many phonemes that character produced.
    Characters not covered by any phrase map to the unknown phoneme with a
    count of 1.
    """
    if not text:
        raise ValueError("empty input")
    phonemes: list[int] = []
    char_counts: list[int] = []
    i = 0
    while i < len(text):
        limit = min(lexicon.max_phrase_len, len(text) - i)
        match = None
        for width in range(limit, 0, -1):
            candidate = text[i : i + width]
            if candidate in lexicon.phrase_to_pinyin:
                match = candidate
                break
        if match is None:
            phonemes.append(UNK_PHONEME_ID)
            char_counts.append(1)
            i += 1
            continue
        for syllable in lexicon.phrase_to_pinyin[match]:
            ids = lexicon.pinyin_to_phonemes[syllable]
            phonemes.extend(ids)
            char_counts.append(len(ids))
        i += len(match)
    return phonemes, char_counts


def predict_prosody(text: str) -> tuple[list[int], list[int], list[int]]:
    """Deterministic rule prosody over characters.

    Prosodic-word boundaries fall after every 2nd character, prosodic-phrase
    boundaries after every 4th, and intonation-phrase boundaries at the final
    character and at punctuation.  Returns ``(pw, pph, iph)`` as 0/1 lists,
    one entry per character.
    """
    if not text:
        raise ValueError("empty input")
    n = len(text)
    pw = [1 if (i + 1) % 2 == 0 else 0 for i in range(n)]
    pph = [1 if (i + 1) % 4 == 0 else 0 for i in range(n)]
    iph = [1 if (i == n - 1 or ch in PUNCTUATION) else 0 for i, ch in enumerate(text)]
    return pw, pph, iph


def regulate(tokens: list[int], counts: list[int]) -> list[int]:
    """Expands per-character tokens to per-phoneme by repeat counts."""
    if len(tokens) != len(counts):
        raise ValueError(f"got {len(tokens)} tokens but {len(counts)} counts")
    out: list[int] = []
    for token, count in zip(tokens, counts):
        if count < 0:
            raise ValueError("negative repeat count")
        out.extend([token] * count)
    return out


@dataclass(frozen=True)
class FrontendOutput:
    """Per-phoneme token sequences produced from one text.

    All four prosody/phoneme sequences have equal length, and ``char_counts``
    keeps the per-character phoneme counts for traceability.
    """

    phonemes: tuple[int, ...]
    char_counts: tuple[int, ...]
    pw: tuple[int, ...]
    pph: tuple[int, ...]
    iph: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.phonemes)
        if n < 1:
            raise ValueError("frontend output needs at least one phoneme")
        if sum(self.char_counts) != n:
            raise ValueError("char_counts do not sum to the phoneme count")
        for name in ("pw", "pph", "iph"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match phonemes")

    @property
    def seq_len(self) -> int:
        return len(self.phonemes)


def run_frontend(text: str, lexicon: Lexicon) -> FrontendOutput:
    """Full frontend pass: G2P, prosody prediction, length regulation."""
    phonemes, counts = g2p(text, lexicon)
    pw, pph, iph = predict_prosody(text)
    return FrontendOutput(
        phonemes=tuple(phonemes),
        char_counts=tuple(counts),
        pw=tuple(regulate(pw, counts)),
        pph=tuple(regulate(pph, counts)),
        iph=tuple(regulate(iph, counts)),
    )
