"""Campaign driver: runs synthetic users against the onboarding service.

The driver is the client side of the simulator: it owns the trained user
models and per-session RNG streams, talks to the service purely through
requests (batched through the gateway middleware), and assembles the
resulting sessions. Model inference is batched across accounts per wave.
"""

from __future__ import annotations

import numpy as np

from ..rng import rng_for
from ..sessiongen import SessionGenModel, _make_rollout
from ..world import MAX_SESSION_TURNS, LogDataset, LogRecord, Session, UserState, ObservableContext
from .service import OnboardingService


def derive_account_seed(seed: int, index: int) -> int:
    """Stable per-account seed for state initialization."""
    return int(rng_for(seed, "account", index).integers(0, 2 ** 31 - 1))


def run_campaign(service: OnboardingService, model: SessionGenModel,
                 n_users: int, seed: int, policy_id: str = "service",
                 max_turns: int = MAX_SESSION_TURNS,
                 fetch_homepage: bool = True) -> LogDataset:
    """Simulate n_users full onboarding journeys through the service API
    (capabilities: navigate, select, dynamic updates, submit, homepage)."""
    account_ids: list[str] = []
    states: list[UserState] = []
    for i in range(n_users):
        account = service.create_account(derive_account_seed(seed, i))
        account_ids.append(account.account_id)
        data = service.udss_read(account.account_id)
        states.append(UserState(
            ObservableContext(data["geo"], data["device"]), list(data["interests"])))

    rngs = [rng_for(seed, "sim", i) for i in range(n_users)]
    sessions = [Session([], [], []) for _ in range(n_users)]
    rollout = _make_rollout(model, states)
    active = np.ones(n_users, dtype=bool)
    y_prev = np.zeros(n_users, dtype=np.int64)
    closing: list[int] = []

    def send(requests: list[dict]) -> list[dict]:
        if not requests:
            return []
        return service.batch_gateway(requests)

    from ..nn import no_grad

    with no_grad():
        for t in range(1, max_turns + 1):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            nav = send([
                {"account_id": account_ids[i], "op": "navigate",
                 "request_id": f"nav-{t}-{i}"}
                for i in idx
            ])
            queries = np.zeros(idx.size, dtype=np.int64)
            alive = np.ones(idx.size, dtype=bool)
            for j, reply in enumerate(nav):
                i = idx[j]
                body = reply["response"]
                if body["done"]:
                    if sessions[i].continuations:
                        sessions[i].continuations[-1] = 0
                    sessions[i].exhausted = True
                    active[i] = False
                    alive[j] = False
                    closing.append(int(i))
                else:
                    queries[j] = body["artist_id"]
            idx = idx[alive]
            queries = queries[alive]
            if idx.size == 0:
                continue
            p_sel, p_cont = rollout.predict(
                idx, queries, y_prev[idx], np.full(idx.size, t - 1))
            draws_r = np.array([rngs[i].random() for i in idx])
            responses = (draws_r < p_sel).astype(np.int64)
            draws_s = np.array([rngs[i].random() for i in idx])
            continues = (draws_s < p_cont).astype(np.int64)
            send([
                {"account_id": account_ids[i], "op": "select",
                 "payload": {"artist_id": int(queries[j])},
                 "request_id": f"sel-{t}-{i}"}
                for j, i in enumerate(idx) if responses[j]
            ])
            for j, i in enumerate(idx):
                sessions[i].artists.append(int(queries[j]))
                sessions[i].responses.append(int(responses[j]))
                sessions[i].continuations.append(int(continues[j]))
                if continues[j] == 0:
                    active[i] = False
                    closing.append(int(i))
            y_prev[idx] += responses
            still = continues == 1
            if t < max_turns and still.any():
                rollout.advance(idx[still], queries[still], responses[still],
                                y_prev[idx[still]], np.full(int(still.sum()), t))
        closing.extend(int(i) for i in np.nonzero(active)[0])

    finish = []
    for i in closing:
        finish.append({"account_id": account_ids[i], "op": "submit",
                       "request_id": f"submit-{i}"})
        if fetch_homepage:
            finish.append({"account_id": account_ids[i], "op": "homepage",
                           "request_id": f"home-{i}"})
    send(finish)

    dataset = LogDataset(seed, meta={"campaign": policy_id, "n_users": n_users})
    for i in range(n_users):
        if len(sessions[i]) == max_turns and sessions[i].continuations[-1] == 1:
            sessions[i].truncated = True
        dataset.append(LogRecord(
            user_id=i, policy_id=policy_id, state=states[i],
            session=sessions[i], seed=seed, simulated=True,
        ))
    return dataset
