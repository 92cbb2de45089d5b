"""Bitmap text rendering, corpus construction and attack target selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .ctc import best_alignment
from .glyphs import GLYPHS, GRID_HEIGHT

if TYPE_CHECKING:
    from .model import CTCRecognizer

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
IMAGE_HEIGHT = 32
VARIANTS = ("regular", "bold", "thin")
LETTER_KINDS = ("replace-easy", "replace-random", "replace-hard", "insert", "delete")
TARGET_KINDS = LETTER_KINDS + ("word",)

_CROSS = np.ones((3, 3), dtype=bool)


class MissingGlyphError(KeyError):
    pass


class NoValidTargetError(ValueError):
    pass


@dataclass(frozen=True)
class GlyphFont:
    """Scaled bitmap glyphs plus layout constants.

    ``variant`` is applied to the whole rendered line: ``bold`` dilates the
    ink by one pixel, ``thin`` erodes it by one pixel.
    """

    variant: str = "regular"
    scale: int = 3
    spacing: int = 4
    margin: int = 4
    glyphs: dict = field(default_factory=lambda: GLYPHS, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown font variant {self.variant!r}; choose from {VARIANTS}")

    @property
    def glyph_height(self) -> int:
        return GRID_HEIGHT * self.scale

    def glyph(self, ch: str) -> np.ndarray:
        try:
            g = self.glyphs[ch]
        except KeyError:
            raise MissingGlyphError(f"no glyph for character {ch!r}") from None
        return np.kron(g, np.ones((self.scale, self.scale), dtype=bool))


@dataclass(frozen=True)
class TargetSpec:
    original: str
    target: str
    kind: str
    position: int | None = None


def _layout(text: str, font: GlyphFont, height: int) -> tuple[np.ndarray, list[tuple[int, int]]]:
    glyphs = [font.glyph(ch) for ch in text]
    gh = font.glyph_height
    if height < gh + 2:
        raise ValueError(f"height {height} too small for {gh}-pixel glyphs")
    width = 2 * font.margin + sum(g.shape[1] for g in glyphs) + font.spacing * max(len(glyphs) - 1, 0)
    ink = np.zeros((height, width), dtype=bool)
    top = (height - gh) // 2
    spans = []
    x = font.margin
    for g in glyphs:
        ink[top : top + gh, x : x + g.shape[1]] = g
        spans.append((x, x + g.shape[1]))
        x += g.shape[1] + font.spacing
    if font.variant == "bold":
        ink = ndimage.binary_dilation(ink, structure=_CROSS)
    elif font.variant == "thin":
        ink = ndimage.binary_erosion(ink, structure=_CROSS, border_value=0)
    return ink, spans


def render_text(text: str, font: GlyphFont | None = None, height: int = IMAGE_HEIGHT) -> np.ndarray:
    """Black ink (0.0) on white (1.0), binary, one line."""
    ink, _ = _layout(text, font or GlyphFont(), height)
    return np.where(ink, 0.0, 1.0)


def glyph_columns(text: str, font: GlyphFont | None = None) -> list[tuple[int, int]]:
    """Half-open column span ``[start, stop)`` of every character as rendered."""
    font = font or GlyphFont()
    _, spans = _layout(text, font, IMAGE_HEIGHT)
    if font.variant == "bold":
        spans = [(a - 1, b + 1) for a, b in spans]
    return spans


def load_wordlist(path=None) -> list[str]:
    """Read one lowercase word per line; defaults to the bundled dictionary."""
    if path is None:
        text = resources.files("fawa").joinpath("data/wordlist.txt").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return [w.strip() for w in text.splitlines() if w.strip()]


def desk_words(n: int = 200, seed: int = 0, dictionary: Sequence[str] | None = None) -> list[str]:
    """Seeded sample of dictionary words with 3 to 6 letters.

    A few words used throughout the examples are always included.
    """
    dictionary = list(dictionary) if dictionary is not None else load_wordlist()
    anchors = [w for w in ("parts", "pants", "ports", "sort") if w in dictionary]
    pool = sorted({w for w in dictionary if 3 <= len(w) <= 6 and w not in anchors})
    rng = np.random.default_rng(seed)
    k = max(n - len(anchors), 0)
    picked = [pool[i] for i in rng.choice(len(pool), size=min(k, len(pool)), replace=False)]
    return sorted(anchors[:n] + picked)


def build_corpus(
    wordlist: Iterable[str], fonts: Sequence[GlyphFont], seed: int = 0
) -> list[tuple[np.ndarray, str]]:
    """Render every distinct word in every font, in a seeded order."""
    words = list(dict.fromkeys(wordlist))
    if not words:
        raise ValueError("wordlist is empty")
    samples = [(render_text(w, f), w) for w in words for f in fonts]
    order = np.random.default_rng(seed).permutation(len(samples))
    return [samples[i] for i in order]


# --------------------------------------------------------------------------
# targets


def edit_candidates(word: str, dictionary: Iterable[str], alphabet: str = ALPHABET) -> dict[str, list]:
    """Dictionary words at edit distance one, grouped by edit type.

    Entries are ``(position, letter, new_word)``; ``letter`` is ``None`` for
    deletions.
    """
    vocab = set(dictionary)
    letters = [c for c in alphabet if c != " "]
    out: dict[str, list] = {"replace": [], "insert": [], "delete": []}
    seen: dict[str, set] = {k: set() for k in out}

    def keep(kind, pos, letter, cand):
        if cand != word and cand in vocab and cand not in seen[kind]:
            seen[kind].add(cand)
            out[kind].append((pos, letter, cand))

    for i in range(len(word)):
        for c in letters:
            if c != word[i]:
                keep("replace", i, c, word[:i] + c + word[i + 1 :])
    for i in range(len(word) + 1):
        for c in letters:
            keep("insert", i, c, word[:i] + c + word[i:])
    for i in range(len(word)):
        keep("delete", i, None, word[:i] + word[i + 1 :])
    return out


def letter_peak_frames(logits: np.ndarray, word: str, alphabet: str = ALPHABET) -> list[int]:
    """Frame where each letter of ``word`` scores highest along its best alignment."""
    labels = [alphabet.index(c) for c in word]
    path = best_alignment(logits, labels)
    peaks = []
    for k, lab in enumerate(labels):
        frames = np.flatnonzero(path == k)
        peaks.append(int(frames[np.argmax(logits[frames, lab])]))
    return peaks


def gen_letter_target(
    word: str,
    model: "CTCRecognizer | None",
    kind: str,
    dictionary: Iterable[str],
    seed: int = 0,
    image: np.ndarray | None = None,
    font: GlyphFont | None = None,
) -> TargetSpec:
    """Pick an edit-distance-one dictionary target for ``word``.

    Easy and hard replacements rank candidates by the model's logit for
    the substituted letter at the frame where the original letter peaks.
    """
    if kind not in LETTER_KINDS:
        raise ValueError(f"unknown letter-level kind {kind!r}")
    alphabet = model.alphabet if model is not None else ALPHABET
    cands = edit_candidates(word, dictionary, alphabet)
    group = cands[kind.split("-")[0]]
    if not group:
        raise NoValidTargetError(f"no valid {kind} target for {word!r}")
    rng = np.random.default_rng(seed)
    if kind in ("replace-easy", "replace-hard"):
        if model is None:
            raise ValueError(f"{kind} targets need a model to score letter similarity")
        if image is None:
            image = render_text(word, font)
        logits = model.forward(image)
        peaks = letter_peak_frames(logits, word, alphabet)
        sign = -1.0 if kind == "replace-easy" else 1.0
        _, cand, pos = min(
            (sign * float(logits[peaks[pos], alphabet.index(c)]), cand, pos)
            for pos, c, cand in group
        )
        return TargetSpec(word, cand, kind, pos)
    pos, _, cand = group[int(rng.integers(len(group)))]
    return TargetSpec(word, cand, kind, pos)


def gen_word_target(word: str, dictionary: Iterable[str], seed: int = 0) -> TargetSpec:
    """Uniformly random dictionary word of the same length."""
    pool = sorted({w for w in dictionary if len(w) == len(word) and w != word})
    if not pool:
        raise NoValidTargetError(f"no dictionary word of length {len(word)} besides {word!r}")
    rng = np.random.default_rng(seed)
    return TargetSpec(word, pool[int(rng.integers(len(pool)))], "word")
