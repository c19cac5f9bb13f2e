"""Prompt template, tokenization and vocabulary files."""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

ACTIONS = ("lift", "pass", "place", "inspect")
HAND_PHRASES = {"left": "left hand", "right": "right hand", "both": "both hands"}
_TEMPLATE = re.compile(r"^(\w+) (.+) with (left hand|right hand|both hands)$", re.IGNORECASE)

UNK = "<unk>"


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class ParsedPrompt:
    action: str
    obj: str
    hand: str   # left | right | both


def format_prompt(action: str, obj: str, hand: str) -> str:
    return f"{action} {obj} with {HAND_PHRASES[hand]}"


def parse_prompt(prompt: str) -> ParsedPrompt:
    m = _TEMPLATE.match(" ".join(prompt.split()))
    if m is None:
        raise AnnotationError(f"prompt does not match '{{action}} {{object}} with {{hand type}}': {prompt!r}")
    hand = m.group(3).lower().split()[0]
    return ParsedPrompt(m.group(1).lower(), m.group(2).lower(), hand)


def tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


class Vocab:
    """Token table; index 0 is the shared unknown token."""

    def __init__(self, tokens=()):
        self.tokens = [UNK]
        self.index = {UNK: 0}
        for t in tokens:
            self.add(t)

    def add(self, tok: str) -> int:
        tok = tok.lower()
        if tok not in self.index:
            self.index[tok] = len(self.tokens)
            self.tokens.append(tok)
        return self.index[tok]

    def __len__(self) -> int:
        return len(self.tokens)

    def ids(self, prompt: str) -> list[int]:
        return [self.index.get(t, 0) for t in tokenize(prompt)]

    @classmethod
    def from_prompts(cls, prompts) -> "Vocab":
        v = cls()
        for p in prompts:
            for t in tokenize(p):
                v.add(t)
        return v

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
        v = cls()
        for t in lines:
            if t != UNK:
                v.add(t)
        return v
