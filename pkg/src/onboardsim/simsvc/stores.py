"""Backing stores for the simulation service.

The production store stands in for live user data and aggregate serving
state; the overlay store holds simulated user data under test accounts
and is the only place the simulator ever writes.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from ..rng import rng_for

TEST_ACCOUNT_PREFIX = "sim-"

# every user-data record served upstream carries exactly these fields
USER_DATA_TEMPLATE = {
    "geo": 0,
    "device": 0,
    "interests": [],
    "selections": [],
    "onboarding_complete": False,
}


def canonical_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def is_test_account(account_id: str) -> bool:
    return account_id.startswith(TEST_ACCOUNT_PREFIX)


class ProductionStore:
    """Live-user records plus aggregate per-segment selection counters."""

    def __init__(self):
        self.records: dict[str, dict] = {}
        self.counters: dict[str, int] = {}

    def write(self, account_id: str, record: dict) -> None:
        if is_test_account(account_id):
            raise ValueError("test accounts may never reach production storage")
        self.records[account_id] = dict(record)

    def read(self, account_id: str) -> dict | None:
        rec = self.records.get(account_id)
        return dict(rec) if rec is not None else None

    def increment_counter(self, segment: str, amount: int) -> None:
        self.counters[segment] = self.counters.get(segment, 0) + amount

    def snapshot(self) -> dict:
        return {"records": self.records, "counters": self.counters}

    def content_hash(self) -> str:
        return canonical_hash(self.snapshot())

    def seed_demo_accounts(self, corpus, n: int, seed: int) -> list[str]:
        """Populate deterministic stand-in real users."""
        rng = rng_for(seed, "production-demo")
        ids = []
        for i in range(n):
            account_id = f"user-{i:06d}"
            geo = int(rng.integers(corpus.n_geo))
            device = int(rng.integers(corpus.n_device))
            interests = sorted(int(a) for a in rng.choice(
                corpus.n_artists, size=min(5, corpus.n_artists), replace=False))
            record = dict(USER_DATA_TEMPLATE)
            record.update({
                "geo": geo, "device": device, "interests": interests,
                "selections": interests[:2], "onboarding_complete": True,
            })
            self.write(account_id, record)
            self.increment_counter(f"geo{geo}-device{device}", len(record["selections"]))
            ids.append(account_id)
        return ids


class OverlayStore:
    """Simulated user data, keyed by test account; disjoint keyspace from
    production by the account-id namespace."""

    def __init__(self):
        self.records: dict[str, dict] = {}

    def write(self, account_id: str, record: dict) -> None:
        if not is_test_account(account_id):
            raise ValueError("overlay accepts only test accounts")
        self.records[account_id] = dict(record)

    def read(self, account_id: str) -> dict | None:
        rec = self.records.get(account_id)
        return dict(rec) if rec is not None else None

    def delete(self, account_id: str) -> None:
        self.records.pop(account_id, None)

    def content_hash(self) -> str:
        return canonical_hash(self.records)
