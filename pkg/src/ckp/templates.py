"""``${name}`` placeholder substitution shared by recipes, descriptors and pipelines."""
from __future__ import annotations

import re
from typing import Mapping

PLACEHOLDER = re.compile(r"\$\{([^{}]+)\}")


class UnresolvedPlaceholder(KeyError):
    def __init__(self, names: list[str], template: str) -> None:
        super().__init__(names)
        self.names = names
        self.template = template

    def __str__(self) -> str:
        return f"unresolved placeholder(s) {', '.join(self.names)} in {self.template!r}"


def placeholders(template: str) -> list[str]:
    return PLACEHOLDER.findall(template)


def render(template: str, values: Mapping[str, object]) -> str:
    """Substitute every ``${key}``; raise UnresolvedPlaceholder naming all unknown keys."""
    missing = [name for name in placeholders(template) if name not in values]
    if missing:
        raise UnresolvedPlaceholder(sorted(set(missing)), template)
    return PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), template)
