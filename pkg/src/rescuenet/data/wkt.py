"""Parser for WKT ``POLYGON`` strings as used by xBD label files."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

_NUMBER = re.compile(rb"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_KEYWORD = b"POLYGON"

Ring = list[tuple[float, float]]


class WKTError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


@dataclass
class PolygonLabel:
    """Building polygon in pixel coordinates; damage_class None means unclassified."""

    exterior: Ring
    holes: list[Ring] = field(default_factory=list)
    damage_class: int | None = 1

    @property
    def rings(self) -> list[Ring]:
        return [self.exterior, *self.holes]

    def to_wkt(self) -> str:
        return format_wkt(self.rings)


def format_wkt(rings: list[Ring]) -> str:
    # repr keeps every float exactly round-trippable
    body = ", ".join("(" + ", ".join(f"{x!r} {y!r}" for x, y in ring) + ")" for ring in rings)
    return f"POLYGON ({body})"


class _Parser:
    def __init__(self, text: bytes):
        self.s = text
        self.i = 0

    def ws(self) -> None:
        while self.i < len(self.s) and self.s[self.i] in b" \t\r\n":
            self.i += 1

    def expect(self, ch: bytes) -> None:
        self.ws()
        if self.s[self.i : self.i + 1] != ch:
            found = self.s[self.i : self.i + 1] or b"end of input"
            raise WKTError(f"expected {ch.decode()!r}, found {found!r}", self.i)
        self.i += 1

    def peek(self) -> bytes:
        self.ws()
        return self.s[self.i : self.i + 1]

    def number(self) -> float:
        self.ws()
        m = _NUMBER.match(self.s, self.i)
        if not m:
            raise WKTError("expected a number", self.i)
        self.i = m.end()
        return float(m.group())

    def coord(self) -> tuple[float, float]:
        x = self.number()
        if self.i < len(self.s) and self.s[self.i] not in b" \t\r\n":
            raise WKTError("expected whitespace between coordinates", self.i)
        y = self.number()
        return (x, y)

    def ring(self) -> Ring:
        self.expect(b"(")
        start = self.i
        pts = [self.coord()]
        while self.peek() == b",":
            self.i += 1
            pts.append(self.coord())
        self.expect(b")")
        if pts[0] != pts[-1]:
            raise WKTError("ring is not closed (first vertex differs from last)", start)
        if len(pts) < 4:
            raise WKTError(f"ring has {len(pts)} vertices, at least 4 are required", start)
        return pts

    def polygon(self) -> list[Ring]:
        self.ws()
        kw = self.s[self.i : self.i + len(_KEYWORD)]
        if kw.upper() != _KEYWORD:
            raise WKTError("expected 'POLYGON'", self.i)
        self.i += len(_KEYWORD)
        self.expect(b"(")
        rings = [self.ring()]
        while self.peek() == b",":
            self.i += 1
            rings.append(self.ring())
        self.expect(b")")
        self.ws()
        if self.i != len(self.s):
            raise WKTError("unexpected trailing input", self.i)
        return rings


def parse_wkt_polygon(text: str | bytes, damage_class: int | None = 1) -> PolygonLabel:
    """Parse ``POLYGON ((x y, ...), (hole...))``.

    Raises :class:`WKTError` (carrying the byte offset) for any malformed input.
    """
    data = text.encode("utf-8", "surrogatepass") if isinstance(text, str) else bytes(text)
    rings = _Parser(data).polygon()
    return PolygonLabel(rings[0], rings[1:], damage_class)
