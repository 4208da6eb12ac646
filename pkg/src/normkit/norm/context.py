from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any


class ContextConsumedError(RuntimeError):
    pass


@dataclass
class NormCtx:
    """Forward-pass saves for one normalization call.

    A backward pass reads it exactly once through :meth:`take`.
    """

    kind: str
    saved: dict[str, Any] = field(default_factory=dict)
    consumed: bool = False

    def __getitem__(self, key):
        return self.saved[key]

    def take(self, kind: str) -> dict[str, Any]:
        if self.kind != kind:
            raise ValueError(f"context from {self.kind!r} passed to {kind!r} backward")
        if self.consumed:
            raise ContextConsumedError(f"{kind} context already consumed")
        self.consumed = True
        return self.saved
