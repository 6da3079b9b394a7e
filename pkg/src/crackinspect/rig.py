"""Line-oriented ASCII protocol for the LED controller, with a pure state machine.

Grammar (one command per line, verbs case-insensitive)::

    LEVEL <1-4> <ON|OFF>
    LED <level> <index> <ON|OFF>      index is 1-based within the level
    PATTERN <id>                      1=AllLights, 2..5=OnlyLevel1..4
    ALL <ON|OFF>
    STATUS

Replies are ``OK ...`` or ``ERR <message>``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

from .illumsim import LightingConfig, RigGeometry


class RigParseError(ValueError):
    def __init__(self, message: str, column: int):
        super().__init__(f"{message} at column {column}")
        self.message = message
        self.column = column


@dataclass(frozen=True)
class SetLevel:
    level: int
    on: bool


@dataclass(frozen=True)
class SetLed:
    level: int
    index: int
    on: bool


@dataclass(frozen=True)
class Pattern:
    id: int


@dataclass(frozen=True)
class SetAll:
    on: bool


@dataclass(frozen=True)
class Status:
    pass


RigCommand = Union[SetLevel, SetLed, Pattern, SetAll, Status]

_ARITY = {"LEVEL": 2, "LED": 3, "PATTERN": 1, "ALL": 1, "STATUS": 0}


def _tokens(line: str) -> list[tuple[str, int]]:
    out, i, n = [], 0, len(line)
    while i < n:
        if line[i].isspace():
            i += 1
            continue
        j = i
        while j < n and not line[j].isspace():
            j += 1
        out.append((line[i:j], i + 1))
        i = j
    return out


def _int(tok: tuple[str, int], lo: int, hi: int, what: str) -> int:
    text, col = tok
    try:
        value = int(text, 10)
    except ValueError:
        raise RigParseError(f"malformed integer {text!r}", col) from None
    if not lo <= value <= hi:
        raise RigParseError(f"{what} index out of range ({value} not in {lo}..{hi})", col)
    return value


def _switch(tok: tuple[str, int]) -> bool:
    text, col = tok
    word = text.upper()
    if word not in ("ON", "OFF"):
        raise RigParseError(f"expected ON or OFF, got {text!r}", col)
    return word == "ON"


def parse_rig_command(line: str, geom: RigGeometry | None = None) -> RigCommand:
    geom = geom or RigGeometry()
    toks = _tokens(line.rstrip("\r\n"))
    if not toks:
        raise RigParseError("empty command", 1)
    verb, col = toks[0][0].upper(), toks[0][1]
    if verb not in _ARITY:
        raise RigParseError("unknown verb", col)
    args = toks[1:]
    if len(args) != _ARITY[verb]:
        where = args[_ARITY[verb]][1] if len(args) > _ARITY[verb] else len(line.rstrip("\r\n")) + 1
        raise RigParseError(f"{verb} takes {_ARITY[verb]} argument(s), got {len(args)}", where)
    if verb == "LEVEL":
        return SetLevel(_int(args[0], 1, 4, "level"), _switch(args[1]))
    if verb == "LED":
        level = _int(args[0], 1, 4, "level")
        index = _int(args[1], 1, geom.leds_per_level[level - 1], "LED")
        return SetLed(level, index, _switch(args[2]))
    if verb == "PATTERN":
        return Pattern(_int(args[0], 1, len(LightingConfig), "pattern"))
    if verb == "ALL":
        return SetAll(_switch(args[0]))
    return Status()


@dataclass(frozen=True)
class LedState:
    levels: tuple[tuple[bool, ...], ...]
    pattern: int = 0

    @classmethod
    def initial(cls, geom: RigGeometry | None = None) -> "LedState":
        geom = geom or RigGeometry()
        return cls(tuple((False,) * n for n in geom.leds_per_level), 0)

    def on_counts(self) -> tuple[int, ...]:
        return tuple(sum(lvl) for lvl in self.levels)

    @property
    def total_on(self) -> int:
        return sum(self.on_counts())

    def lighting(self) -> LightingConfig | None:
        """The lighting configuration this state realises, if any."""
        full = [all(lvl) for lvl in self.levels]
        dark = [not any(lvl) for lvl in self.levels]
        if all(full):
            return LightingConfig.ALL_LIGHTS
        for k in range(4):
            if full[k] and all(dark[j] for j in range(4) if j != k):
                return list(LightingConfig)[k + 1]
        return None


def _level_fill(state: LedState, pick) -> tuple[tuple[bool, ...], ...]:
    return tuple(tuple(pick(k, i, v) for i, v in enumerate(lvl)) for k, lvl in enumerate(state.levels))


def apply_rig_command(state: LedState, cmd: RigCommand) -> tuple[LedState, str]:
    if isinstance(cmd, Status):
        return state, "OK " + " ".join(str(n) for n in state.on_counts())
    if isinstance(cmd, SetAll):
        new = LedState(_level_fill(state, lambda k, i, v: cmd.on), 0)
    elif isinstance(cmd, SetLevel):
        new = LedState(_level_fill(state, lambda k, i, v: cmd.on if k == cmd.level - 1 else v), 0)
    elif isinstance(cmd, SetLed):
        new = LedState(_level_fill(
            state, lambda k, i, v: cmd.on if (k == cmd.level - 1 and i == cmd.index - 1) else v), 0)
    elif isinstance(cmd, Pattern):
        cfg = list(LightingConfig)[cmd.id - 1]
        new = LedState(_level_fill(state, lambda k, i, v: cfg.level is None or cfg.level == k + 1), cmd.id)
    else:
        raise TypeError(f"not a rig command: {cmd!r}")
    return new, f"OK {new.total_on}"


class RigSession:
    """Feeds protocol lines through the state machine and collects replies."""

    def __init__(self, geom: RigGeometry | None = None):
        self.geom = geom or RigGeometry()
        self.state = LedState.initial(self.geom)

    def handle(self, line: str) -> str:
        try:
            cmd = parse_rig_command(line, self.geom)
        except RigParseError as exc:
            return f"ERR {exc}"
        self.state, reply = apply_rig_command(self.state, cmd)
        return reply


def replay(lines: Iterable[str], geom: RigGeometry | None = None) -> tuple[LedState, list[tuple[str, str]]]:
    """Run a command log from the initial state; blank lines and '#' comments are skipped."""
    session = RigSession(geom)
    transcript = []
    for raw in lines:
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        transcript.append((line, session.handle(line)))
    return session.state, transcript
