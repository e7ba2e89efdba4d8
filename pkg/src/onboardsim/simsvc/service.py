"""Request-level onboarding service with simulated-data isolation.

The same serving code path handles real and test accounts; only the
data-access layer distinguishes them. Simulated user data flows through
the overlay write path and is folded into reads for simulator traffic,
so production records and aggregate counters never observe a simulated
interaction.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from ..slates import SlateWalk
from ..world import ObservableContext, UserState
from .stores import (
    USER_DATA_TEMPLATE, OverlayStore, ProductionStore, is_test_account,
    TEST_ACCOUNT_PREFIX,
)

OPERATIONS = ("navigate", "preseed", "select", "dynamic-update", "submit", "homepage")


class ServiceError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


@dataclass
class TestAccount:
    account_id: str
    seed: int
    simulated: bool = True


class _AccountSession:
    """Server-side onboarding state for one account."""

    def __init__(self, walk: SlateWalk, context: ObservableContext, slate_size: int):
        self.walk = walk
        self.context = context
        self.slate_size = slate_size
        self.current: int | None = None
        self.responded = True
        self.selections: list[int] = []
        self.impressions = 0
        self.closed = False
        self.exhausted = False


class OnboardingService:
    """Front-end-equivalent API over stores, policy, and state generator."""

    def __init__(self, corpus, policy_factory, state_sampler,
                 production: ProductionStore | None = None,
                 overlay: OverlayStore | None = None,
                 read_mode: str = "merge", n_recommend: int = 10,
                 slate_sizes: tuple = (3, 6)):
        if read_mode not in ("merge", "replace"):
            raise ServiceError("config", f"unknown read mode {read_mode!r}")
        self.corpus = corpus
        self.policy_factory = policy_factory
        self.state_sampler = state_sampler
        self.production = production if production is not None else ProductionStore()
        self.overlay = overlay if overlay is not None else OverlayStore()
        self.read_mode = read_mode
        self.n_recommend = n_recommend
        self.slate_sizes = slate_sizes
        self.accounts: dict[str, TestAccount] = {}
        self._sessions: dict[str, _AccountSession] = {}
        self._next_account = 0

    # -- account + data paths ---------------------------------------------

    def create_account(self, seed: int, account_id: str | None = None) -> TestAccount:
        """Fresh test account whose simulated user data is initialized from
        the state generator and stored through the overlay write path."""
        if account_id is None:
            account_id = f"{TEST_ACCOUNT_PREFIX}{self._next_account:08d}"
            self._next_account += 1
        if account_id in self.accounts:
            raise ServiceError("duplicate-account", f"{account_id} already exists")
        if not is_test_account(account_id):
            raise ServiceError("bad-account", "test account ids need the sim namespace")
        account = TestAccount(account_id=account_id, seed=seed)
        self.accounts[account_id] = account
        state = self.state_sampler(seed)
        self.dos_write(account_id, {
            "geo": state.context.geo,
            "device": state.context.device,
            "interests": list(state.interests),
        })
        return account

    def dos_write(self, account_id: str, user_spec: dict) -> dict:
        """Create simulated user data from a user specification; the record
        always satisfies the downstream schema."""
        if not is_test_account(account_id):
            raise ServiceError("isolation", "overlay writes require a test account")
        unknown = set(user_spec) - set(USER_DATA_TEMPLATE)
        if unknown:
            raise ServiceError("bad-spec", f"unknown user-spec fields: {sorted(unknown)}")
        record = dict(USER_DATA_TEMPLATE)
        existing = self.overlay.read(account_id)
        if existing:
            record.update(existing)
        record.update(user_spec)
        self.overlay.write(account_id, record)
        return record

    def udss_read(self, account_id: str) -> dict:
        """Single read gateway: real accounts see production data only; test
        accounts see their overlay, merged over the default template or
        standalone depending on the configured mode."""
        if is_test_account(account_id):
            overlay = self.overlay.read(account_id)
            if self.read_mode == "replace":
                if overlay is None:
                    raise ServiceError("not-found", f"no overlay data for {account_id}")
                return overlay
            merged = dict(USER_DATA_TEMPLATE)
            if overlay:
                merged.update(overlay)
            return merged
        record = self.production.read(account_id)
        if record is None:
            raise ServiceError("not-found", f"unknown account {account_id}")
        return record

    def _persist_user_data(self, account_id: str, update: dict) -> None:
        # the single point where simulated and real writes diverge
        if is_test_account(account_id):
            self.dos_write(account_id, update)
        else:
            record = self.production.read(account_id) or dict(USER_DATA_TEMPLATE)
            record.update(update)
            self.production.write(account_id, record)
            segment = f"geo{record['geo']}-device{record['device']}"
            self.production.increment_counter(segment, len(update.get("selections", [])))

    # -- onboarding operations ----------------------------------------------

    def serve_onboarding(self, request: dict) -> dict:
        account_id = request.get("account_id")
        op = request.get("op")
        payload = request.get("payload") or {}
        if op not in OPERATIONS:
            raise ServiceError("bad-op", f"unknown operation {op!r}")
        if account_id is None:
            raise ServiceError("bad-request", "missing account_id")
        response = {
            "request_id": request.get("request_id"),
            "account_id": account_id,
            "op": op,
        }
        handler = getattr(self, f"_op_{op.replace('-', '_')}")
        response.update(handler(account_id, payload))
        return response

    def _session_for(self, account_id: str, create: bool = True) -> _AccountSession:
        session = self._sessions.get(account_id)
        if session is None:
            if not create:
                raise ServiceError("no-session", f"no onboarding session for {account_id}")
            data = self.udss_read(account_id)
            context = ObservableContext(data["geo"], data["device"])
            policy = self.policy_factory(context)
            session = _AccountSession(
                SlateWalk(policy), context,
                slate_size=self.slate_sizes[min(context.device, len(self.slate_sizes) - 1)],
            )
            self._sessions[account_id] = session
        if session.closed:
            raise ServiceError("session-closed", f"onboarding already submitted for {account_id}")
        return session

    def _skip_pending(self, session: _AccountSession) -> None:
        if session.current is not None and not session.responded:
            session.walk.feed(session.current, False)
            session.responded = True

    def _op_preseed(self, account_id: str, payload: dict) -> dict:
        if account_id in self._sessions:
            raise ServiceError("session-started", "preseed must precede navigation")
        record = self.dos_write(account_id, payload)
        return {"user_data": record}

    def _op_navigate(self, account_id: str, payload: dict) -> dict:
        session = self._session_for(account_id)
        self._skip_pending(session)
        artist = session.walk.next()
        if artist is None:
            session.exhausted = True
            return {"done": True, "exhausted": True, "artist_id": None,
                    "position": session.impressions, "visible": []}
        session.current = artist
        session.responded = False
        session.impressions += 1
        visible = [artist] + session.walk.upcoming()[:session.slate_size - 1]
        return {"done": False, "exhausted": False, "artist_id": artist,
                "position": session.impressions - 1, "visible": visible}

    def _op_select(self, account_id: str, payload: dict) -> dict:
        session = self._session_for(account_id)
        artist = payload.get("artist_id")
        if artist is None or not (0 <= artist < self.corpus.n_artists):
            raise ServiceError("bad-artist", f"unknown artist {artist!r}")
        if session.current != artist or session.responded:
            raise ServiceError("bad-select", "can only select the artist under examination")
        inserted = session.walk.feed(artist, True)
        session.responded = True
        session.selections.append(artist)
        return {"inserted": inserted, "n_selections": len(session.selections)}

    def _op_dynamic_update(self, account_id: str, payload: dict) -> dict:
        session = self._session_for(account_id)
        return {"upcoming": session.walk.upcoming()[:session.slate_size]}

    def _op_submit(self, account_id: str, payload: dict) -> dict:
        session = self._session_for(account_id)
        self._skip_pending(session)
        self._persist_user_data(account_id, {
            "selections": list(session.selections),
            "onboarding_complete": True,
        })
        session.closed = True
        return {"submitted": True, "n_selections": len(session.selections),
                "n_impressions": session.impressions}

    def _op_homepage(self, account_id: str, payload: dict) -> dict:
        data = self.udss_read(account_id)
        recs = self._recommend(data)
        return {"recommendations": recs, "based_on_selections": len(data["selections"])}

    def _recommend(self, data: dict) -> list[int]:
        """Toy production recommender: nearest neighbours of the persisted
        selections (popularity order before any selections exist)."""
        selections = data.get("selections") or []
        if not selections:
            order = np.lexsort((np.arange(self.corpus.n_artists), -self.corpus.popularity))
            return [int(a) for a in order[:self.n_recommend]]
        centroid = self.corpus.embeddings[selections].mean(axis=0)
        centroid /= max(np.linalg.norm(centroid), 1e-12)
        scores = self.corpus.embeddings @ centroid
        order = np.lexsort((np.arange(scores.size), -scores))
        return [int(a) for a in order if int(a) not in set(selections)][:self.n_recommend]

    # -- batching middleware ---------------------------------------------------

    def batch_gateway(self, requests: list[dict],
                      max_per_account_per_wave: int | None = None) -> list[dict]:
        """Process a batch: per-account order preserved, accounts interleaved
        round-robin, failures isolated per request. The optional per-wave cap
        is a stand-in for real throttling middleware."""
        queues: dict[str, deque] = {}
        order: list[str] = []
        for pos, request in enumerate(requests):
            account = request.get("account_id", "")
            if account not in queues:
                queues[account] = deque()
                order.append(account)
            queues[account].append((pos, request))
        responses: list[dict | None] = [None] * len(requests)
        while any(queues[a] for a in order):
            for account in order:
                budget = max_per_account_per_wave or 1
                for _ in range(budget):
                    if not queues[account]:
                        break
                    pos, request = queues[account].popleft()
                    try:
                        responses[pos] = {"status": "ok",
                                          "response": self.serve_onboarding(request)}
                    except ServiceError as exc:
                        responses[pos] = {
                            "status": "error", "code": exc.code, "error": str(exc),
                            "request_id": request.get("request_id"),
                        }
        return responses  # type: ignore[return-value]

    # -- audits -------------------------------------------------------------------

    def isolation_report(self) -> dict:
        production = self.production.snapshot()
        overlay_keys = set(self.overlay.records)
        return {
            "production_hash": self.production.content_hash(),
            "overlay_hash": self.overlay.content_hash(),
            "overlay_keys_in_production": sorted(
                overlay_keys & set(production["records"])),
            "n_test_accounts": len(self.accounts),
            "n_production_records": len(production["records"]),
        }


def state_sampler_from_model(model) -> callable:
    """Adapt a trained state generator to the service's sampler interface."""

    def sample(seed: int) -> UserState:
        return model.sample_state(seed)

    return sample
