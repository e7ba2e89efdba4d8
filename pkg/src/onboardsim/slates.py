"""Linear slate examination shared by every session rollout.

Users examine artists one at a time in display order and never revisit;
artists inserted after a selection are examined immediately after the
selection that produced them.
"""

from __future__ import annotations

from collections import deque
from typing import Protocol, Sequence


class PolicyViolation(RuntimeError):
    """A policy proposed an artist already shown in this session."""


class SlatePolicy(Protocol):
    """Per-session policy instance (single-owner mutable state)."""

    policy_id: str

    def initial_slate(self) -> Sequence[int]: ...

    def on_select(self, artist: int) -> Sequence[int]: ...

    def on_skip(self, artist: int) -> Sequence[int]: ...


class SlateWalk:
    """Cursor over a policy's slate implementing the cascade walk."""

    def __init__(self, policy: SlatePolicy):
        self.policy = policy
        self._queue = deque(policy.initial_slate())
        self._shown: set[int] = set()

    @property
    def shown(self) -> set[int]:
        return self._shown

    def next(self) -> int | None:
        """Next unexamined artist, or None when the policy is exhausted."""
        while self._queue:
            artist = self._queue.popleft()
            if artist not in self._shown:
                self._shown.add(artist)
                return artist
        return None

    def upcoming(self) -> list[int]:
        """Read-only view of what remains to examine, deduplicated."""
        seen = set(self._shown)
        out = []
        for artist in self._queue:
            if artist not in seen:
                seen.add(artist)
                out.append(artist)
        return out

    def feed(self, artist: int, selected: bool) -> list[int]:
        """Report the response for `artist`; returns inserted artists."""
        inserted = list(self.policy.on_select(artist) if selected else self.policy.on_skip(artist))
        for ins in inserted:
            if ins in self._shown:
                raise PolicyViolation(
                    f"policy {self.policy.policy_id!r} re-proposed artist {ins}"
                )
        self._queue.extendleft(reversed(inserted))
        return inserted
