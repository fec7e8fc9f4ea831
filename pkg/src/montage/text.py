"""Prompt templating and a closed-vocabulary toy tokenizer.

The tokenizer stands in for a frozen language-model text encoder. Its
vocabulary is the synthetic instruction grammar plus ``<image_k>``
placeholders; ids 0 and 1 are reserved for padding and the null caption.
"""
from __future__ import annotations

import re

import numpy as np

from .errors import UnknownToken

PAD_ID = 0
NULL_ID = 1
UNK_ID = 2
MAX_IMAGES = 8

PREAMBLE = "Please output {n} images according to the instruction: "

SHAPES = ("circle", "square", "triangle")
COLORS = (
    "red", "green", "blue", "yellow", "cyan", "magenta",
    "orange", "purple", "white", "black", "gray", "pink",
)
BACKGROUNDS = ("solid", "gradient", "stripes", "checker")

_GRAMMAR_WORDS = (
    "please output images according to the instruction "
    "recolor move rotate scale shift turn make put place combine apply keep show "
    "by degrees left right up down larger smaller then and with of on in into at a an "
    "background style pose mask shape object subject scene scenes story panel panels "
    "view views camera around same new different each frame frames first second third "
    "next after edit edits from its it given location colors color stay while "
    "bigger orbit cut over"
).split()

_PUNCT = tuple(":,.;-")
_SPECIALS = ("<pad>", "<null>", "<unk>") + tuple(f"<image_{k}>" for k in range(1, MAX_IMAGES + 1))


def _build_vocab() -> list[str]:
    words = set(_GRAMMAR_WORDS) | set(SHAPES) | set(COLORS) | set(BACKGROUNDS)
    words |= {str(d) for d in range(10)}
    return list(_SPECIALS) + sorted(words) + list(_PUNCT)


VOCAB: list[str] = _build_vocab()
TOKEN_TO_ID: dict[str, int] = {w: i for i, w in enumerate(VOCAB)}
VOCAB_SIZE = len(VOCAB)

_TOKEN_RE = re.compile(r"<image_\d+>|[a-z]+|\d|[^\sa-z0-9]")
_BARE_PLACEHOLDER = re.compile(r"<image>")


def render_prompt(instruction: str, n_in: int, n_out: int) -> str:
    """Prefix the output-count preamble and number bare ``<image>`` mentions in order.

    Already numbered ``<image_k>`` placeholders are left as they are.
    """
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    counter = iter(range(1, n_in + 1))

    def number(_m):
        k = next(counter, None)
        return f"<image_{k}>" if k is not None else "<image>"

    return PREAMBLE.format(n=n_out) + _BARE_PLACEHOLDER.sub(number, instruction)


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def tokenize_text(prompt: str, length: int = 32, strict: bool = False) -> np.ndarray:
    """Map a prompt to exactly ``length`` ids. The empty string is the null caption."""
    if length < 1:
        raise ValueError("length must be >= 1")
    ids = np.full(length, PAD_ID, dtype=np.int64)
    if prompt == "":
        ids[0] = NULL_ID
        return ids
    out = []
    for tok in split_tokens(prompt):
        tid = TOKEN_TO_ID.get(tok)
        if tid is None:
            if strict:
                raise UnknownToken(tok)
            tid = UNK_ID
        out.append(tid)
    out = out[:length]
    ids[: len(out)] = out
    return ids


def detokenize(ids) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == PAD_ID:
            continue
        if i == NULL_ID:
            return ""
        words.append(VOCAB[i])
    return " ".join(words)
