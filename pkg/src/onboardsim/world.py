"""Synthetic ground-truth environment: artist corpus, true users, the
behavioral oracle, post-onboarding consumption, and log collection."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .rng import rng_for
from .slates import SlateWalk

MAX_SESSION_TURNS = 300

CORPUS_FORMAT = "onboardsim-corpus-v1"
LOGS_FORMAT = "onboardsim-logs-v1"
POPULATION_FORMAT = "onboardsim-population-v1"


class WorldError(ValueError):
    pass


# ---------------------------------------------------------------------------
# corpus


@dataclass
class EmbeddingSpace:
    """Artist corpus: unit-norm embeddings, genre labels, popularity weights,
    a fixed null-artist embedding, and coarse geo listening affinities."""

    dim: int
    embeddings: np.ndarray          # (m, dim), rows unit-norm
    null_embedding: np.ndarray      # (dim,), fixed at creation
    genres: np.ndarray              # (m,) int genre label
    popularity: np.ndarray          # (m,) positive, sums to 1
    genre_centroids: np.ndarray     # (n_genres, dim)
    geo_genre_affinity: np.ndarray  # (n_geo, n_genres) positive multipliers
    n_geo: int = 4
    n_device: int = 2
    _similarity: np.ndarray | None = field(default=None, repr=False, compare=False)
    _neighbor_order: np.ndarray | None = field(default=None, repr=False, compare=False)
    _log_pop: np.ndarray | None = field(default=None, repr=False, compare=False)
    _empty_gains: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n_artists(self) -> int:
        return self.embeddings.shape[0]

    @property
    def n_genres(self) -> int:
        return self.genre_centroids.shape[0]

    def similarity(self) -> np.ndarray:
        """Cached full cosine-similarity matrix (unit rows make this a Gram matrix)."""
        if self._similarity is None:
            self._similarity = self.embeddings @ self.embeddings.T
        return self._similarity

    def neighbor_order(self) -> np.ndarray:
        """Cached per-artist neighbour ranking by similarity, ties by id."""
        if self._neighbor_order is None:
            # stable sort on -sim keeps ascending-id order within ties
            self._neighbor_order = np.argsort(-self.similarity(), axis=1, kind="stable")
        return self._neighbor_order

    def log_pop_feature(self, geo: int | None = None) -> np.ndarray:
        """Cached standardized log-popularity, geo-affinity weighted when a
        geo is given (the signal the production ranker exposes)."""
        if self._log_pop is None:
            rows = [np.log(self.popularity)]
            for g in range(self.n_geo):
                rows.append(np.log(self.popularity
                                   * self.geo_genre_affinity[g][self.genres]))
            table = np.stack(rows)
            table -= table.mean(axis=1, keepdims=True)
            table /= table.std(axis=1, keepdims=True)
            self._log_pop = table
        return self._log_pop[0 if geo is None else geo + 1]

    def empty_set_coverage_gains(self) -> np.ndarray:
        """Cached coverage gain of each artist against the empty shown set."""
        if self._empty_gains is None:
            self._empty_gains = np.maximum(self.similarity(), 0.0).mean(axis=1)
        return self._empty_gains

    def cosines_to(self, vector: np.ndarray) -> np.ndarray:
        return self.embeddings @ (vector / np.linalg.norm(vector))

    def save(self, path, meta: dict | None = None) -> None:
        payload = {
            "format": CORPUS_FORMAT,
            "meta": meta or {},
            "dim": self.dim,
            "n_geo": self.n_geo,
            "n_device": self.n_device,
            "embeddings": self.embeddings.tolist(),
            "null_embedding": self.null_embedding.tolist(),
            "genres": self.genres.tolist(),
            "popularity": self.popularity.tolist(),
            "genre_centroids": self.genre_centroids.tolist(),
            "geo_genre_affinity": self.geo_genre_affinity.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EmbeddingSpace":
        with open(path) as fh:
            payload = json.load(fh)
        if payload.get("format") != CORPUS_FORMAT:
            raise WorldError(f"not a corpus file: {path}")
        return cls(
            dim=payload["dim"],
            embeddings=np.array(payload["embeddings"]),
            null_embedding=np.array(payload["null_embedding"]),
            genres=np.array(payload["genres"], dtype=np.int64),
            popularity=np.array(payload["popularity"]),
            genre_centroids=np.array(payload["genre_centroids"]),
            geo_genre_affinity=np.array(payload["geo_genre_affinity"]),
            n_geo=payload["n_geo"],
            n_device=payload["n_device"],
        )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def sample_corpus(seed: int, m: int, d: int, n_genres: int,
                  genre_noise: float = 0.32, popularity_exponent: float = 0.8,
                  max_centroid_cosine: float = 0.5, n_geo: int = 4,
                  n_device: int = 2, max_attempts: int = 200) -> EmbeddingSpace:
    """Build a clustered artist corpus with power-law popularity.

    Genre centroids are resampled until all pairwise cosines fall below
    `max_centroid_cosine`; in low dimensions this can be infeasible, in
    which case a WorldError is raised.
    """
    if not (m >= n_genres >= 1):
        raise WorldError("need m >= n_genres >= 1")
    if d < 2:
        raise WorldError("need d >= 2")
    rng = rng_for(seed, "corpus")
    # the null direction owns one axis; artists live in its orthogonal
    # complement so that end-of-list affinity never competes with artist
    # affinity (requires d >= 3 to leave room for separated genres)
    null_embedding = _unit(rng.normal(size=d))

    def drop_null(vectors: np.ndarray) -> np.ndarray:
        return vectors - np.outer(vectors @ null_embedding, null_embedding)

    centroids = None
    for _ in range(max_attempts):
        cand = drop_null(rng.normal(size=(n_genres, d)))
        norms = np.linalg.norm(cand, axis=1, keepdims=True)
        if norms.min() < 1e-9:
            continue
        cand /= norms
        gram = cand @ cand.T
        np.fill_diagonal(gram, 0.0)
        if n_genres == 1 or gram.max() < max_centroid_cosine:
            centroids = cand
            break
    if centroids is None:
        raise WorldError(
            f"could not separate {n_genres} genre centroids below cosine "
            f"{max_centroid_cosine} in {d} dimensions"
        )
    genres = np.arange(m, dtype=np.int64) % n_genres
    noise = genre_noise if m > n_genres else genre_noise * 0.1
    emb = drop_null(centroids[genres] + noise * rng.normal(size=(m, d)))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    ranks = rng.permutation(m)
    popularity = (ranks + 1.0) ** (-popularity_exponent)
    popularity /= popularity.sum()
    # each geo leans toward two adjacent genres
    affinity = np.ones((n_geo, n_genres))
    for geo in range(n_geo):
        affinity[geo, geo % n_genres] += 1.5
        affinity[geo, (geo + 1) % n_genres] += 0.75
    return EmbeddingSpace(
        dim=d, embeddings=emb, null_embedding=null_embedding, genres=genres,
        popularity=popularity, genre_centroids=centroids,
        geo_genre_affinity=affinity, n_geo=n_geo, n_device=n_device,
    )


# ---------------------------------------------------------------------------
# users and sessions


@dataclass(frozen=True)
class ObservableContext:
    geo: int
    device: int


@dataclass
class UserState:
    """Observable context plus ordered latent interests."""

    context: ObservableContext
    interests: list[int]

    def __post_init__(self):
        if len(set(self.interests)) != len(self.interests):
            raise WorldError("interest lists may not contain duplicates")


@dataclass
class OracleUser:
    """Ground-truth user: the hidden quantities behind observed behavior."""

    user_id: int
    context: ObservableContext
    genre_mixture: np.ndarray
    taste: np.ndarray           # unit-norm
    patience: float
    select_gain: float          # slope on cosine similarity
    select_bias: float
    n_interests: int


@dataclass
class Session:
    """Ordered onboarding turns: queried artist, response, continuation."""

    artists: list[int]
    responses: list[int]
    continuations: list[int]
    truncated: bool = False
    exhausted: bool = False

    def __len__(self) -> int:
        return len(self.artists)

    @property
    def n_selections(self) -> int:
        return int(sum(self.responses))

    def turns(self) -> list[tuple[int, int, int]]:
        return list(zip(self.artists, self.responses, self.continuations))

    def validate(self) -> None:
        n = len(self)
        if n > MAX_SESSION_TURNS:
            raise WorldError("session exceeds the turn cap")
        if len(set(self.artists)) != n:
            raise WorldError("queried artists must be distinct within a session")
        if any(s != 1 for s in self.continuations[:-1]):
            raise WorldError("continuation must be 1 on every non-final turn")
        if n and self.continuations[-1] != (1 if self.truncated else 0):
            raise WorldError(
                "final continuation must be 0 unless the session was cut at the cap")


@dataclass
class LogRecord:
    user_id: int
    policy_id: str
    state: UserState
    session: Session
    seed: int
    simulated: bool = False

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "policy_id": self.policy_id,
            "geo": self.state.context.geo,
            "device": self.state.context.device,
            "interests": list(self.state.interests),
            "turns": [list(t) for t in self.session.turns()],
            "truncated": self.session.truncated,
            "exhausted": self.session.exhausted,
            "seed": self.seed,
            "simulated": self.simulated,
        }

    @classmethod
    def from_json(cls, row: dict) -> "LogRecord":
        turns = row["turns"]
        return cls(
            user_id=row["user_id"],
            policy_id=row["policy_id"],
            state=UserState(
                ObservableContext(row["geo"], row["device"]), list(row["interests"])
            ),
            session=Session(
                artists=[t[0] for t in turns],
                responses=[t[1] for t in turns],
                continuations=[t[2] for t in turns],
                truncated=row["truncated"],
                exhausted=row["exhausted"],
            ),
            seed=row["seed"],
            simulated=row.get("simulated", False),
        )


class LogDataset:
    """Append-only collection of onboarding log records."""

    def __init__(self, seed: int, meta: dict | None = None):
        self.seed = seed
        self.meta = meta or {}
        self.records: list[LogRecord] = []

    def append(self, record: LogRecord) -> None:
        record.session.validate()
        self.records.append(record)

    def extend(self, records) -> None:
        for r in records:
            self.append(r)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def by_policy(self, policy_id: str) -> list[LogRecord]:
        return [r for r in self.records if r.policy_id == policy_id]

    def session_lengths(self) -> np.ndarray:
        return np.array([len(r.session) for r in self.records])

    def selection_counts(self) -> np.ndarray:
        return np.array([r.session.n_selections for r in self.records])

    def save(self, path) -> None:
        header = {
            "format": LOGS_FORMAT,
            "seed": self.seed,
            "meta": self.meta,
            "n_records": len(self.records),
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for record in self.records:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "LogDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != LOGS_FORMAT:
                raise WorldError(f"not a log file: {path}")
            ds = cls(header["seed"], header.get("meta", {}))
            for line in fh:
                ds.append(LogRecord.from_json(json.loads(line)))
        return ds


# ---------------------------------------------------------------------------
# the behavioral oracle


@dataclass
class WorldConfig:
    """Ground-truth behavior knobs (the stand-in for real-user behavior)."""

    # selection: p = sigmoid(gain * cosine + bias), jittered per user
    select_gain_range: tuple[float, float] = (3.4, 4.6)
    select_bias_range: tuple[float, float] = (-2.4, -1.6)
    # continuation: exp(-t / patience) * boost(decayed recent selections)
    patience_log_mean: float = math.log(125.0)
    patience_log_sigma: float = 0.65
    patience_clip: tuple[float, float] = (8.0, 2500.0)
    continue_ceiling: float = 0.98
    boost_rate: float = 1.2
    recency_decay: float = 0.8
    # post-onboarding consumption mixture
    taste_weight: float = 1.0
    selection_seed_weight: float = 0.35
    exploration_weight: float = 0.3
    # population shape
    mixture_alpha_base: float = 0.38
    mixture_alpha_boost: float = 0.15
    taste_noise: float = 0.18
    interests_poisson_base: float = 3.0
    interests_poisson_geo: float = 0.8
    k_max: int = 20
    geo_weights: tuple = (0.4, 0.3, 0.2, 0.1)
    device_weights: tuple = (0.65, 0.35)


def sample_user(corpus: EmbeddingSpace, user_id: int, seed: int,
                config: WorldConfig) -> OracleUser:
    """Deterministically draw one ground-truth user from (seed, user_id)."""
    rng = rng_for(seed, "user", user_id)
    geo = int(rng.choice(corpus.n_geo, p=np.asarray(config.geo_weights) / sum(config.geo_weights)))
    device = int(rng.choice(corpus.n_device, p=np.asarray(config.device_weights) / sum(config.device_weights)))
    alpha = np.full(corpus.n_genres, config.mixture_alpha_base)
    alpha[geo % corpus.n_genres] += config.mixture_alpha_boost
    alpha[(geo + 1) % corpus.n_genres] += config.mixture_alpha_boost * 0.5
    mixture = rng.dirichlet(alpha)
    taste = _unit(corpus.genre_centroids.T @ mixture
                  + config.taste_noise * rng.normal(size=corpus.dim))
    patience = float(np.clip(
        rng.lognormal(config.patience_log_mean, config.patience_log_sigma),
        *config.patience_clip,
    ))
    gain = float(rng.uniform(*config.select_gain_range))
    bias = float(rng.uniform(*config.select_bias_range))
    n_interests = int(min(
        config.k_max,
        1 + rng.poisson(config.interests_poisson_base + config.interests_poisson_geo * geo),
    ))
    return OracleUser(
        user_id=user_id, context=ObservableContext(geo, device),
        genre_mixture=mixture, taste=taste, patience=patience,
        select_gain=gain, select_bias=bias, n_interests=n_interests,
    )


def _oracle_probabilities(user: OracleUser, turn: int, recent: float,
                          cosine: float, config: WorldConfig) -> tuple[float, float]:
    """Shared formula for both the public oracle and the fast rollout path."""
    p_select = 1.0 / (1.0 + math.exp(-(user.select_gain * cosine + user.select_bias)))
    boost = 1.0 - (1.0 - config.continue_ceiling) * math.exp(-config.boost_rate * recent)
    p_continue = math.exp(-turn / user.patience) * boost
    return p_select, min(p_continue, 1.0)


def oracle_respond(user: OracleUser, history: Session, query: int,
                   corpus: EmbeddingSpace, config: WorldConfig) -> tuple[float, float]:
    """Selection and continuation probabilities for `query` given the
    session prefix. Selection is logistic in cosine similarity to the
    user's taste; continuation decays with turn index and is lifted by
    recently selected artists."""
    if query in history.artists:
        raise WorldError("query already asked in this session")
    t = len(history)
    recent = 0.0
    for r in history.responses:
        recent = recent * config.recency_decay + r
    cosine = float(corpus.embeddings[query] @ user.taste)
    return _oracle_probabilities(user, t, recent, cosine, config)


def post_onboarding_topk(user: OracleUser, selections: list[int], k: int,
                         corpus: EmbeddingSpace, config: WorldConfig,
                         rng: np.random.Generator) -> UserState:
    """Simulate post-onboarding consumption and keep the top-k artists.

    Consumption affinity mixes taste similarity, similarity to the
    centroid of onboarding selections, and exploration noise; ties break
    toward lower artist ids.
    """
    if k > config.k_max:
        raise WorldError("k exceeds the configured interest cap")
    affinity = config.taste_weight * corpus.cosines_to(user.taste)
    if selections and config.selection_seed_weight:
        centroid = _unit(corpus.embeddings[selections].mean(axis=0))
        affinity = affinity + config.selection_seed_weight * (corpus.embeddings @ centroid)
    if config.exploration_weight:
        affinity = affinity + config.exploration_weight * rng.normal(size=corpus.n_artists)
    order = np.lexsort((np.arange(corpus.n_artists), -affinity))
    return UserState(user.context, [int(a) for a in order[:k]])


def rollout_oracle_session(user: OracleUser, walk: SlateWalk, corpus: EmbeddingSpace,
                           config: WorldConfig, rng: np.random.Generator,
                           max_turns: int = MAX_SESSION_TURNS) -> Session:
    """Play one full onboarding session of `user` against a policy walk."""
    cosines = corpus.embeddings @ user.taste
    artists: list[int] = []
    responses: list[int] = []
    continuations: list[int] = []
    recent = 0.0
    exhausted = False
    for t in range(max_turns):
        artist = walk.next()
        if artist is None:
            if t == 0:
                raise WorldError(f"policy {walk.policy.policy_id!r} produced an empty slate")
            exhausted = True
            continuations[-1] = 0
            break
        p_select, p_continue = _oracle_probabilities(
            user, t, recent, float(cosines[artist]), config
        )
        r = int(rng.random() < p_select)
        walk.feed(artist, bool(r))
        s = int(rng.random() < p_continue)
        artists.append(artist)
        responses.append(r)
        continuations.append(s)
        recent = recent * config.recency_decay + r
        if s == 0:
            break
    truncated = (
        not exhausted and len(artists) == max_turns and continuations
        and continuations[-1] == 1
    )
    return Session(artists, responses, continuations,
                   truncated=truncated, exhausted=exhausted)


def collect_logs(corpus: EmbeddingSpace, policy_factories: list, n_users: int,
                 seed: int, config: WorldConfig | None = None,
                 simulated: bool = False) -> LogDataset:
    """Sample users, roll out full onboarding sessions under behavior
    policies (round-robin assignment), attach post-onboarding interests,
    and return the tagged dataset."""
    if not policy_factories:
        raise WorldError("need at least one behavior policy")
    config = config or WorldConfig()
    dataset = LogDataset(seed, meta={"n_users": n_users})
    for u in range(n_users):
        user = sample_user(corpus, u, seed, config)
        factory = policy_factories[u % len(policy_factories)]
        policy = factory(user.context)
        rng = rng_for(seed, "rollout", u)
        session = rollout_oracle_session(user, SlateWalk(policy), corpus, config, rng)
        selections = [a for a, r in zip(session.artists, session.responses) if r]
        state = post_onboarding_topk(
            user, selections, user.n_interests, corpus, config,
            rng_for(seed, "consumption", u),
        )
        dataset.append(LogRecord(
            user_id=u, policy_id=policy.policy_id, state=state,
            session=session, seed=seed, simulated=simulated,
        ))
    return dataset


def save_population(users: list[OracleUser], path, meta: dict | None = None) -> None:
    header = {"format": POPULATION_FORMAT, "meta": meta or {}, "n_users": len(users)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for u in users:
            row = asdict(u)
            row["context"] = [u.context.geo, u.context.device]
            row["genre_mixture"] = u.genre_mixture.tolist()
            row["taste"] = u.taste.tolist()
            fh.write(json.dumps(row, sort_keys=True) + "\n")
