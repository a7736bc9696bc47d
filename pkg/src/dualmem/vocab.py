"""Closed vocabularies for instructions/questions (input) and model outputs."""

from __future__ import annotations

from .errors import VocabularyError
from .worldgen.layout import OBJECT_CLASSES, ROOM_TYPES

DIGITS = tuple(str(i) for i in range(10))
LETTERS = ("a", "b", "c", "d")
ACTION_WORDS = ("forward", "left", "right", "stop")

_TEMPLATE_WORDS = (
    "go", "to", "the", "then", "back", "you", "passed", "behind",
    "how", "many", "are", "there", "what", "is", "distance", "between", "and",
    "size", "of", "which", "closest", "standing", "at", "end", "facing", "where",
    "front", "route", "reaches", "in", "order", "do", "these", "appear", "supporting",
)

INPUT_TOKENS = ("<pad>",) + _TEMPLATE_WORDS + OBJECT_CLASSES + ROOM_TYPES + DIGITS + LETTERS + (
    "forward", "stop")
# "left"/"right" appear both as directions and action words; one token each
INPUT_TOKENS = tuple(dict.fromkeys(INPUT_TOKENS + ACTION_WORDS))
INPUT_INDEX = {w: i for i, w in enumerate(INPUT_TOKENS)}

ACTION_TOKENS = ("FORWARD", "LEFT", "RIGHT", "STOP")
OUTPUT_TOKENS = ACTION_TOKENS + DIGITS + tuple(s.upper() for s in LETTERS) + OBJECT_CLASSES + ROOM_TYPES + ("EOS",)
OUTPUT_INDEX = {w: i for i, w in enumerate(OUTPUT_TOKENS)}
EOS = OUTPUT_INDEX["EOS"]
BOS = len(OUTPUT_TOKENS)  # input-only start symbol for the generated stream


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.split():
        if word not in INPUT_INDEX:
            raise VocabularyError(f"unknown instruction token {word!r}")
        ids.append(INPUT_INDEX[word])
    if not ids:
        raise VocabularyError("empty instruction")
    return ids


def answer_tokens(answer: str) -> list[int]:
    """Output token ids for an answer string, terminated by EOS."""
    if answer.isdigit():
        ids = [OUTPUT_INDEX[ch] for ch in answer]
    elif answer.upper() in OUTPUT_INDEX and len(answer) == 1:
        ids = [OUTPUT_INDEX[answer.upper()]]
    elif answer in OUTPUT_INDEX:
        ids = [OUTPUT_INDEX[answer]]
    else:
        raise VocabularyError(f"answer {answer!r} is not expressible in the output vocabulary")
    return ids + [EOS]


def detokenize(ids) -> str:
    words = []
    for i in ids:
        if i == EOS:
            break
        words.append(OUTPUT_TOKENS[i])
    if words and all(w in DIGITS for w in words):
        return "".join(words)
    return " ".join(w.lower() if len(w) == 1 else w for w in words)
