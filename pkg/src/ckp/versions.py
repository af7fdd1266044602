"""Version parsing, total ordering and version constraints."""
from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from typing import Any, Union

from ckp.errors import InvalidVersion

Component = Union[int, str]

_SPLIT = re.compile(r"[.\-]")


@functools.total_ordering
class Version:
    """Dotted version such as ``3.3`` or ``8.1-rc1``.

    Components compare pairwise: integers numerically, strings
    lexicographically, and an integer outranks a string in the same
    position. When one version is a prefix of the other the longer one
    is greater, so ``3.3 < 3.3.1`` and ``8.1-rc1 < 8.1.0``.
    """

    __slots__ = ("components",)

    def __init__(self, components: tuple[Component, ...] | list[Component]) -> None:
        comps = tuple(components)
        if not comps:
            raise InvalidVersion("version has no components")
        for c in comps:
            if isinstance(c, bool) or not isinstance(c, (int, str)):
                raise InvalidVersion(f"bad version component {c!r}")
            if isinstance(c, int) and c < 0:
                raise InvalidVersion(f"negative version component {c!r}")
            if isinstance(c, str) and (not c or c != c.lower()):
                raise InvalidVersion(f"bad version component {c!r}")
        self.components = comps

    @classmethod
    def parse(cls, text: str) -> "Version":
        return parse_version(text)

    def _key(self) -> tuple[tuple[int, Any], ...]:
        return tuple((1, c) if isinstance(c, int) else (0, c) for c in self.components)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Version):
            return NotImplemented
        return self.components == other.components

    def __lt__(self, other: "Version") -> bool:
        if not isinstance(other, Version):
            return NotImplemented
        return self._key() < other._key()

    def __hash__(self) -> int:
        return hash(self.components)

    def __str__(self) -> str:
        return ".".join(str(c) for c in self.components)

    def __repr__(self) -> str:
        return f"Version({str(self)!r})"

    def to_json(self) -> str:
        return str(self)


def parse_version(text: str) -> Version:
    """Split on ``.`` and ``-``; all-digit parts become ints, the rest lowercase strings."""
    if text is None:
        raise InvalidVersion("empty version")
    text = str(text).strip()
    if not text:
        raise InvalidVersion("empty version")
    parts = _SPLIT.split(text)
    comps: list[Component] = []
    for part in parts:
        if not part or any(ch.isspace() for ch in part):
            raise InvalidVersion(f"malformed version {text!r}", text=text)
        comps.append(int(part) if part.isascii() and part.isdigit() else part.lower())
    return Version(comps)


def as_version(value: Version | str | int | float) -> Version:
    if isinstance(value, Version):
        return value
    return parse_version(str(value))


@dataclass(frozen=True)
class VersionConstraint:
    min: Version | None = None
    max: Version | None = None
    exact: Version | None = None

    def __post_init__(self) -> None:
        if self.exact is not None and (self.min is not None or self.max is not None):
            raise InvalidVersion("exact is mutually exclusive with min/max")
        if self.min is not None and self.max is not None and self.max < self.min:
            raise InvalidVersion(f"min {self.min} exceeds max {self.max}")

    @classmethod
    def from_json(cls, doc: dict[str, Any] | None) -> "VersionConstraint":
        doc = doc or {}
        return cls(**{k: as_version(doc[k]) for k in ("min", "max", "exact")
                      if doc.get(k) not in (None, "")})

    def to_json(self) -> dict[str, str]:
        return {k: str(v) for k in ("min", "max", "exact")
                if (v := getattr(self, k)) is not None}

    def satisfied_by(self, v: Version) -> bool:
        if self.exact is not None:
            return v == self.exact
        if self.min is not None and v < self.min:
            return False
        if self.max is not None and v > self.max:
            return False
        return True

    def __str__(self) -> str:
        if self.exact is not None:
            return f"=={self.exact}"
        parts = []
        if self.min is not None:
            parts.append(f">={self.min}")
        if self.max is not None:
            parts.append(f"<={self.max}")
        return ",".join(parts) or "any"
