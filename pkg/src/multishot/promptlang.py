"""Structured prompt mini-language.

Grammar:
    prompt := clause (";" clause)*
    clause := ("char"|"bg"|"action"|"shot") "(" key "=" value ("," key "=" value)* ")"

Whitespace-insensitive, case-insensitive. All values come from closed
vocabularies; attribute keys other than ids/subjects may be omitted, in
which case the attribute is left unspecified and downstream consumers
(embedder, generator) treat it as a free choice.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZES = ("small", "large")
PATTERNS = ("solid", "stripes", "checker", "gradient")
MOVES = ("left", "right", "up", "down", "none")
SPEEDS = ("slow", "fast")
FRAMINGS = ("wide", "close")

MAX_CHARACTERS = 3

_ID_RE = re.compile(r"^[a-z][a-z0-9_]*$")


class PromptSyntaxError(ValueError):
    """Malformed prompt text; carries the offset and what was expected."""

    def __init__(self, message: str, position: int, expected: str):
        super().__init__(f"{message} at position {position} (expected {expected})")
        self.position = position
        self.expected = expected


class PromptSemanticError(ValueError):
    """Grammatical prompt that violates a vocabulary or reference rule."""


@dataclass(frozen=True)
class CharacterSpec:
    id: str
    shape: str | None = None
    color: str | None = None
    size: str | None = None


@dataclass(frozen=True)
class BackgroundSpec:
    pattern: str | None = None
    color: str | None = None


@dataclass(frozen=True)
class ActionSpec:
    subject: str
    move: str = "none"
    speed: str = "slow"


@dataclass(frozen=True)
class AttributeSet:
    characters: tuple[CharacterSpec, ...] = ()
    background: BackgroundSpec = field(default_factory=BackgroundSpec)
    action: ActionSpec | None = None
    framing: str = "wide"

    def __post_init__(self):
        if len(self.characters) > MAX_CHARACTERS:
            raise PromptSemanticError(
                f"at most {MAX_CHARACTERS} characters allowed, got {len(self.characters)}"
            )
        ids = [c.id for c in self.characters]
        if len(set(ids)) != len(ids):
            raise PromptSemanticError(f"duplicate character ids: {ids}")
        if self.action is not None and self.action.subject not in ids:
            raise PromptSemanticError(f"dangling action subject {self.action.subject!r}")

    def character(self, cid: str) -> CharacterSpec:
        for c in self.characters:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def without_action(self) -> "AttributeSet":
        return replace(self, action=None)


_CLAUSE_KEYS = {
    "char": ("id", "shape", "color", "size"),
    "bg": ("pattern", "color"),
    "action": ("subject", "move", "speed"),
    "shot": ("framing",),
}

_ENUMS = {
    ("char", "shape"): SHAPES,
    ("char", "color"): COLORS,
    ("char", "size"): SIZES,
    ("bg", "pattern"): PATTERNS,
    ("bg", "color"): COLORS,
    ("action", "move"): MOVES,
    ("action", "speed"): SPEEDS,
    ("shot", "framing"): FRAMINGS,
}

_TOKEN_RE = re.compile(r"[a-z0-9_]+|[();=,]")


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens = []
    i = 0
    lowered = text.lower()
    while i < len(lowered):
        ch = lowered[i]
        if ch.isspace():
            i += 1
            continue
        m = _TOKEN_RE.match(lowered, i)
        if not m:
            raise PromptSyntaxError(f"unexpected character {text[i]!r}", i, "identifier or punctuation")
        tokens.append((m.group(), i))
        i = m.end()
    return tokens


def parse_prompt(text: str) -> AttributeSet:
    """Parse prompt text into an AttributeSet; raises on malformed input."""
    tokens = _tokenize(text)
    if not tokens:
        raise PromptSyntaxError("empty prompt", 0, "clause")
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else (None, len(text))

    def take(expected: str | None = None, kind: str = "") -> tuple[str, int]:
        nonlocal pos
        tok, at = peek()
        if tok is None:
            raise PromptSyntaxError("unexpected end of prompt", at, expected or kind)
        if expected is not None and tok != expected:
            raise PromptSyntaxError(f"unexpected token {tok!r}", at, expected)
        pos += 1
        return tok, at

    clauses: list[tuple[str, dict[str, str], int]] = []
    while True:
        name, at = take(kind="clause name")
        if name not in _CLAUSE_KEYS:
            raise PromptSyntaxError(f"unknown clause {name!r}", at, "char|bg|action|shot")
        take("(")
        pairs: dict[str, str] = {}
        while True:
            key, kat = take(kind="key")
            if key not in _CLAUSE_KEYS[name]:
                raise PromptSyntaxError(
                    f"unknown key {key!r} in {name} clause", kat,
                    "|".join(_CLAUSE_KEYS[name]))
            take("=")
            value, vat = take(kind="value")
            if key in pairs:
                raise PromptSemanticError(f"duplicate key {key!r} in {name} clause")
            enum = _ENUMS.get((name, key))
            if enum is not None and value not in enum:
                raise PromptSemanticError(
                    f"unknown {name}.{key} value {value!r} (allowed: {', '.join(enum)})")
            if (name, key) in (("char", "id"), ("action", "subject")) and not _ID_RE.match(value):
                raise PromptSemanticError(f"bad identifier {value!r}")
            pairs[key] = value
            tok, _ = peek()
            if tok == ",":
                take(",")
                continue
            break
        take(")")
        clauses.append((name, pairs, at))
        tok, _ = peek()
        if tok is None:
            break
        take(";")

    characters: list[CharacterSpec] = []
    background: BackgroundSpec | None = None
    action: ActionSpec | None = None
    framing: str | None = None
    for name, pairs, at in clauses:
        if name == "char":
            if "id" not in pairs:
                raise PromptSemanticError("char clause requires an id")
            characters.append(CharacterSpec(
                id=pairs["id"], shape=pairs.get("shape"),
                color=pairs.get("color"), size=pairs.get("size")))
        elif name == "bg":
            if background is not None:
                raise PromptSemanticError("multiple bg clauses")
            background = BackgroundSpec(pattern=pairs.get("pattern"), color=pairs.get("color"))
        elif name == "action":
            if action is not None:
                raise PromptSemanticError("multiple action clauses")
            if "subject" not in pairs:
                raise PromptSemanticError("action clause requires a subject")
            action = ActionSpec(subject=pairs["subject"],
                                move=pairs.get("move", "none"),
                                speed=pairs.get("speed", "slow"))
        else:  # shot
            if framing is not None:
                raise PromptSemanticError("multiple shot clauses")
            framing = pairs.get("framing", "wide")

    return AttributeSet(
        characters=tuple(characters),
        background=background or BackgroundSpec(),
        action=action,
        framing=framing or "wide",
    )


def render_prompt(attrs: AttributeSet) -> str:
    """Canonical string form: char* then bg, action, shot; fixed key order;
    unspecified keys and wide-framing/empty clauses are omitted."""
    clauses = []
    for c in attrs.characters:
        pairs = [f"id={c.id}"]
        if c.shape is not None:
            pairs.append(f"shape={c.shape}")
        if c.color is not None:
            pairs.append(f"color={c.color}")
        if c.size is not None:
            pairs.append(f"size={c.size}")
        clauses.append(f"char({','.join(pairs)})")
    bg = attrs.background
    if bg.pattern is not None or bg.color is not None:
        pairs = []
        if bg.pattern is not None:
            pairs.append(f"pattern={bg.pattern}")
        if bg.color is not None:
            pairs.append(f"color={bg.color}")
        clauses.append(f"bg({','.join(pairs)})")
    if attrs.action is not None:
        a = attrs.action
        clauses.append(f"action(subject={a.subject},move={a.move},speed={a.speed})")
    if attrs.framing != "wide":
        clauses.append(f"shot(framing={attrs.framing})")
    if not clauses:
        raise PromptSemanticError("cannot render a fully-unspecified AttributeSet")
    return "; ".join(clauses)
