"""Joint token space for the grid micro-world.

Ids are laid out in three contiguous ranges: special tokens first, then
text words, then the image codebook (``EMPTY`` followed by every
object x color cell). Inside each range ids follow lexical order so the
assignment depends only on the name lists.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

MANIFEST_VERSION = 1

SPECIAL_TOKENS = ("BOS", "EOS", "PAD", "SEP", "MASK", "TASK_T2I", "TASK_MMU")
NUMBER_WORDS = ("two", "three", "four")
RELATION_WORDS = ("above", "below", "left-of", "right-of")
EMPTY = None

# Template words used by prompts, questions and answers.
TEMPLATE_WORDS = (
    "a", "an", "and", "are", "between", "color", "colors", "how", "image",
    "in", "is", "items", "main", "many", "object", "objects", "of", "photo",
    "position", "relationship", "the", "this", "what",
)

DEFAULT_OBJECTS = (
    "apple", "bench", "chair", "clock", "cup", "elephant",
    "fork", "soccer", "table", "train", "umbrella", "vase",
)
DEFAULT_COLORS = ("black", "blue", "brown", "green", "orange", "purple", "red", "white")

_IRREGULAR_PLURALS = {"bench": "benches", "glass": "glasses", "bus": "buses"}


class VocabularyError(ValueError):
    pass


def plural(word: str) -> str:
    if word in _IRREGULAR_PLURALS:
        return _IRREGULAR_PLURALS[word]
    if word.endswith(("s", "x", "z", "ch", "sh")):
        return word + "es"
    return word + "s"


@dataclass(frozen=True)
class GridImage:
    """A ``side x side`` scene. Each cell is ``None`` (empty) or ``(object, color)`` indices."""

    side: int
    cells: tuple

    def __post_init__(self):
        if len(self.cells) != self.side * self.side:
            raise VocabularyError(
                f"grid of side {self.side} needs {self.side * self.side} cells, got {len(self.cells)}"
            )

    @classmethod
    def empty(cls, side: int) -> "GridImage":
        return cls(side, (None,) * (side * side))

    @classmethod
    def from_dict(cls, side: int, filled: dict) -> "GridImage":
        """Build from ``{(row, col): (object, color)}``."""
        cells = [None] * (side * side)
        for (r, c), cell in filled.items():
            cells[r * side + c] = tuple(cell)
        return cls(side, tuple(cells))

    def at(self, row: int, col: int):
        return self.cells[row * self.side + col]

    def filled(self) -> list:
        """``[(row, col, object, color), ...]`` in raster order."""
        out = []
        for pos, cell in enumerate(self.cells):
            if cell is not None:
                out.append((pos // self.side, pos % self.side, cell[0], cell[1]))
        return out


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    stream: str = "text"

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)


@dataclass(frozen=True)
class Vocabulary:
    object_names: tuple
    color_names: tuple
    grid_side: int
    special_tokens: tuple
    text_words: tuple
    _index: dict = field(repr=False, compare=False)

    number_words = NUMBER_WORDS
    relation_words = RELATION_WORDS

    # --- ranges -------------------------------------------------------
    @property
    def n_special(self) -> int:
        return len(self.special_tokens)

    @property
    def n_text(self) -> int:
        return len(self.text_words)

    @property
    def image_codebook_size(self) -> int:
        return 1 + len(self.object_names) * len(self.color_names)

    @property
    def special_range(self) -> range:
        return range(0, self.n_special)

    @property
    def text_range(self) -> range:
        return range(self.n_special, self.n_special + self.n_text)

    @property
    def image_range(self) -> range:
        start = self.n_special + self.n_text
        return range(start, start + self.image_codebook_size)

    @property
    def size(self) -> int:
        return self.n_special + self.n_text + self.image_codebook_size

    @property
    def n_cells(self) -> int:
        return self.grid_side * self.grid_side

    def is_special(self, token_id: int) -> bool:
        return token_id in self.special_range

    def is_text(self, token_id: int) -> bool:
        return token_id in self.text_range

    def is_image(self, token_id: int) -> bool:
        return token_id in self.image_range

    # --- lookups ------------------------------------------------------
    def special(self, name: str) -> int:
        return self.special_tokens.index(name)

    @property
    def empty_id(self) -> int:
        return self.image_range.start

    def word_id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise VocabularyError(f"unknown word {word!r}") from None

    def word(self, token_id: int) -> str:
        if self.is_text(token_id):
            return self.text_words[token_id - self.n_special]
        if self.is_special(token_id):
            return self.special_tokens[token_id]
        if self.is_image(token_id):
            return self.image_token_name(token_id)
        raise VocabularyError(f"token id {token_id} outside vocabulary of size {self.size}")

    def cell_id(self, obj: int, color: int) -> int:
        if not (0 <= obj < len(self.object_names)) or not (0 <= color < len(self.color_names)):
            raise VocabularyError(f"cell ({obj}, {color}) out of range")
        return self.image_range.start + 1 + obj * len(self.color_names) + color

    def id_cell(self, token_id: int):
        """Inverse of ``cell_id``; ``None`` for the EMPTY token."""
        if not self.is_image(token_id):
            raise VocabularyError(f"token id {token_id} is not an image token")
        offset = token_id - self.image_range.start
        if offset == 0:
            return None
        return divmod(offset - 1, len(self.color_names))

    def image_token_name(self, token_id: int) -> str:
        cell = self.id_cell(token_id)
        if cell is None:
            return "<empty>"
        return f"<{self.object_names[cell[0]]}:{self.color_names[cell[1]]}>"

    def object_word_ids(self, obj: int) -> frozenset:
        """Singular and plural ids of an object name."""
        name = self.object_names[obj]
        return frozenset({self.word_id(name), self.word_id(plural(name))})

    # --- serialization ------------------------------------------------
    def manifest(self) -> str:
        lines = [
            f"# vocabulary manifest v{MANIFEST_VERSION}",
            f"# grid_side {self.grid_side}",
            f"# objects {' '.join(self.object_names)}",
            f"# colors {' '.join(self.color_names)}",
        ]
        for i in range(self.size):
            tag = "special" if self.is_special(i) else "text" if self.is_text(i) else "image"
            lines.append(f"{i}\t{tag}\t{self.word(i)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "Vocabulary":
        header = {}
        for line in text.splitlines():
            if line.startswith("# ") and not line.startswith("# vocabulary"):
                key, _, rest = line[2:].partition(" ")
                header[key] = rest
        v = build_vocabulary(header["objects"].split(), header["colors"].split(), int(header["grid_side"]))
        if v.manifest() != text:
            raise VocabularyError("manifest does not match a rebuilt vocabulary")
        return v


def build_vocabulary(objects: Sequence[str], colors: Sequence[str], grid_side: int = 4) -> Vocabulary:
    """Assign ids to specials, words and image cells.

    >>> build_vocabulary(DEFAULT_OBJECTS, DEFAULT_COLORS, 4).image_codebook_size
    97
    """
    if not objects or not colors:
        raise VocabularyError("objects and colors must be non-empty")
    if grid_side < 1:
        raise VocabularyError("grid_side must be positive")
    for names in (objects, colors):
        seen = set()
        for name in names:
            if name in seen:
                raise VocabularyError(f"duplicate name {name!r}")
            seen.add(name)
    objects = tuple(sorted(objects))
    colors = tuple(sorted(colors))
    words = set(TEMPLATE_WORDS) | set(NUMBER_WORDS) | set(RELATION_WORDS) | set(colors)
    for obj in objects:
        words.add(obj)
        words.add(plural(obj))
    clash = set(objects) & set(colors)
    if clash:
        raise VocabularyError(f"duplicate name {sorted(clash)[0]!r}")
    specials = tuple(sorted(SPECIAL_TOKENS))
    text_words = tuple(sorted(words))
    index = {w: len(specials) + i for i, w in enumerate(text_words)}
    return Vocabulary(objects, colors, grid_side, specials, text_words, index)


def default_vocabulary(grid_side: int = 4) -> Vocabulary:
    return build_vocabulary(DEFAULT_OBJECTS, DEFAULT_COLORS, grid_side)


def encode_image(img: GridImage, v: Vocabulary) -> TokenSeq:
    if img.side != v.grid_side:
        raise VocabularyError(f"grid side {img.side} does not match vocabulary side {v.grid_side}")
    ids = []
    for cell in img.cells:
        ids.append(v.empty_id if cell is None else v.cell_id(*cell))
    return TokenSeq(tuple(ids), "image")


def decode_image(seq: TokenSeq | Sequence[int], v: Vocabulary) -> GridImage:
    ids = tuple(seq)
    if len(ids) != v.n_cells:
        raise VocabularyError(f"image sequence must have {v.n_cells} tokens, got {len(ids)}")
    cells = []
    for pos, token_id in enumerate(ids):
        if not v.is_image(token_id):
            raise VocabularyError(f"non-image token {token_id} at position {pos}")
        cells.append(v.id_cell(token_id))
    return GridImage(v.grid_side, tuple(cells))


def encode_text(words: Iterable[str], v: Vocabulary) -> TokenSeq:
    return TokenSeq(tuple(v.word_id(w) for w in words), "text")


def decode_text(seq: TokenSeq | Sequence[int], v: Vocabulary) -> list[str]:
    out = []
    for token_id in seq:
        if not v.is_text(token_id):
            raise VocabularyError(f"token id {token_id} is not a text token")
        out.append(v.word(token_id))
    return out
