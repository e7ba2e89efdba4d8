"""Preference-elicitation policy zoo.

Behavior policies (baseline popularity ranker, genre-diversity ranker)
generate training logs; the predicted-CTR re-ranker and the
pCTR-plus-coverage trade-off family are the unseen policies evaluated
counterfactually. All of them sit behind the same per-session slate
interface with dynamic insertion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .world import EmbeddingSpace, ObservableContext, LogDataset


class PolicyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# predicted-CTR model

PCTR_FEATURES = (
    "cos_selected_centroid",
    "cos_skipped_centroid",
    "log_geo_popularity",
    "turn_index",
    "selections_so_far",
)


def pctr_feature_matrix(corpus: EmbeddingSpace, candidates: np.ndarray,
                        selected: list[int], skipped: list[int],
                        turn: int, n_selected: int, geo: int | None = None) -> np.ndarray:
    """Feature rows for each candidate artist at one exposure point."""
    candidates = np.asarray(candidates, dtype=np.int64)
    feats = np.zeros((candidates.size, len(PCTR_FEATURES)))
    if selected:
        centroid = corpus.embeddings[selected].mean(axis=0)
        centroid /= max(np.linalg.norm(centroid), 1e-12)
        feats[:, 0] = corpus.embeddings[candidates] @ centroid
    if skipped:
        centroid = corpus.embeddings[skipped].mean(axis=0)
        centroid /= max(np.linalg.norm(centroid), 1e-12)
        feats[:, 1] = corpus.embeddings[candidates] @ centroid
    feats[:, 2] = corpus.log_pop_feature(geo)[candidates]
    feats[:, 3] = turn / 300.0
    feats[:, 4] = n_selected / 20.0
    return feats


@dataclass
class PctrModel:
    """Logistic selection-probability model over exposure-point features."""

    weights: np.ndarray          # (n_features,)
    intercept: float
    filter_tag: str
    heldout_aucloss: float | None = None

    def predict(self, features: np.ndarray) -> np.ndarray:
        z = features @ self.weights + self.intercept
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out


@dataclass
class TurnFilter:
    """Training-data filter for pCTR variants."""

    max_turn: int | None = None
    min_turn: int | None = None
    device: int | None = None
    policy_ids: tuple | None = None
    drop_features: tuple = ()

    @property
    def tag(self) -> str:
        parts = []
        if self.max_turn is not None:
            parts.append(f"turn<={self.max_turn}")
        if self.min_turn is not None:
            parts.append(f"turn>={self.min_turn}")
        if self.device is not None:
            parts.append(f"device={self.device}")
        if self.policy_ids:
            parts.append("policies=" + "|".join(self.policy_ids))
        if self.drop_features:
            parts.append("drop=" + "|".join(self.drop_features))
        return ",".join(parts) or "all"

    def keeps_record(self, record) -> bool:
        if self.device is not None and record.state.context.device != self.device:
            return False
        if self.policy_ids and record.policy_id not in self.policy_ids:
            return False
        return True

    def keeps_turn(self, turn: int) -> bool:
        if self.max_turn is not None and turn > self.max_turn:
            return False
        if self.min_turn is not None and turn < self.min_turn:
            return False
        return True


def pctr_training_rows(logs: LogDataset, corpus: EmbeddingSpace,
                       data_filter: TurnFilter | None = None):
    """Replay sessions into per-turn (features, label) rows."""
    data_filter = data_filter or TurnFilter()
    rows, labels = [], []
    for record in logs:
        if not data_filter.keeps_record(record):
            continue
        selected: list[int] = []
        skipped: list[int] = []
        geo = record.state.context.geo
        for t, (artist, r, _s) in enumerate(record.session.turns()):
            if data_filter.keeps_turn(t):
                feats = pctr_feature_matrix(
                    corpus, np.array([artist]), selected, skipped, t,
                    len(selected), geo=geo,
                )[0]
                rows.append(feats)
                labels.append(r)
            (selected if r else skipped).append(artist)
    if not rows:
        raise PolicyError("filter left no training rows")
    x = np.asarray(rows)
    if data_filter.drop_features:
        drop = [PCTR_FEATURES.index(f) for f in data_filter.drop_features]
        x[:, drop] = 0.0
    return x, np.asarray(labels, dtype=np.float64)


def _fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-4,
                  n_iter: int = 30, tol: float = 1e-10):
    """Ridge-stabilized iteratively reweighted least squares."""
    n, k = x.shape
    xa = np.concatenate([x, np.ones((n, 1))], axis=1)
    w = np.zeros(k + 1)
    reg = l2 * np.eye(k + 1)
    reg[-1, -1] = 0.0  # intercept unpenalized
    for _ in range(n_iter):
        z = xa @ w
        p = 1.0 / (1.0 + np.exp(-np.clip(z, -35, 35)))
        s = np.maximum(p * (1.0 - p), 1e-9)
        grad = xa.T @ (y - p) - reg @ w
        hess = (xa * s[:, None]).T @ xa + reg
        step = np.linalg.solve(hess, grad)
        w = w + step
        if np.abs(step).max() < tol:
            break
    return w[:k], float(w[k])


def auc_loss_from_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    """1 - AUC via the rank-sum formulation (tie-aware)."""
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise PolicyError("AUC needs both classes present")
    ranks = rankdata(scores)
    auc = (ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return float(1.0 - auc)


def fit_pctr(logs: LogDataset, corpus: EmbeddingSpace,
             data_filter: TurnFilter | None = None,
             heldout_fraction: float = 0.2, l2: float = 1e-4) -> PctrModel:
    """Fit the logistic pCTR model by MLE with a per-user holdout split."""
    data_filter = data_filter or TurnFilter()
    n_records = len(logs)
    cut = max(int(n_records * (1.0 - heldout_fraction)), 1)
    train = LogDataset(logs.seed)
    hold = LogDataset(logs.seed)
    for i, record in enumerate(logs):
        (train if i < cut else hold).append(record)
    x, y = pctr_training_rows(train, corpus, data_filter)
    if y.min() == y.max():
        raise PolicyError("training rows are single-class; cannot fit pCTR")
    weights, intercept = _fit_logistic(x, y, l2=l2)
    model = PctrModel(weights, intercept, data_filter.tag)
    if len(hold):
        hx, hy = pctr_training_rows(hold, corpus, data_filter)
        if hy.min() != hy.max():
            model.heldout_aucloss = auc_loss_from_scores(model.predict(hx), hy)
    return model


# ---------------------------------------------------------------------------
# coverage


def coverage_gain(q: int, shown, corpus: EmbeddingSpace) -> float:
    """Marginal facility-location gain of adding artist q to the shown set:
    mean over corpus points of max(0, sim(q, i) - best shown sim to i),
    with a zero baseline per point when nothing is shown yet."""
    shown = list(shown)
    if q in shown:
        raise PolicyError("q is already shown")
    sims = corpus.similarity()
    cover = sims[shown].max(axis=0) if shown else np.zeros(corpus.n_artists)
    return float(np.maximum(sims[q] - cover, 0.0).mean())


def coverage_value(shown, corpus: EmbeddingSpace) -> float:
    """Facility-location value of a shown set (0 for the empty set)."""
    shown = list(shown)
    if not shown:
        return 0.0
    sims = corpus.similarity()
    return float(np.maximum(sims[shown].max(axis=0), 0.0).mean())


class _CoverageGains:
    """Coverage gains maintained as lazily refreshed upper bounds.

    From the second shown artist on, cover only grows and gains only
    shrink, so any previously computed gain stays a valid upper bound.
    The first add can push cover below the empty-set zero baseline; that
    is absorbed by a one-off additive slack, valid because
    relu(s - c) <= relu(s) + relu(-c). Bounds tighten to exact values as
    `fresh_many` touches them.
    """

    def __init__(self, corpus: EmbeddingSpace):
        self.sims = corpus.similarity()
        self.m = corpus.n_artists
        self.cover: np.ndarray | None = None  # None = empty-shown baseline
        self.upper = corpus.empty_set_coverage_gains().copy()

    def fresh(self, artist: int) -> float:
        if self.cover is not None:
            self.upper[artist] = np.maximum(self.sims[artist] - self.cover, 0.0).mean()
        return float(self.upper[artist])

    def fresh_many(self, artists: np.ndarray) -> np.ndarray:
        if self.cover is not None:
            self.upper[artists] = np.maximum(
                self.sims[artists] - self.cover, 0.0).mean(axis=1)
        return self.upper[artists]

    def add(self, artist: int) -> None:
        if self.cover is None:
            self.cover = self.sims[artist].copy()
            self.upper += np.maximum(-self.cover, 0.0).mean()
        else:
            np.maximum(self.cover, self.sims[artist], out=self.cover)


# ---------------------------------------------------------------------------
# policies


class _StaticInsertPolicy:
    """Shared implementation for the two behavior policies."""

    def __init__(self, policy_id: str, corpus: EmbeddingSpace, order, n_insert: int):
        self.policy_id = policy_id
        self.corpus = corpus
        self.n_insert = n_insert
        self._order = [int(a) for a in order]
        self._examined: set[int] = set()

    def initial_slate(self) -> list[int]:
        return list(self._order)

    def on_select(self, artist: int) -> list[int]:
        self._examined.add(artist)
        order = self.corpus.neighbor_order()[artist]
        picks: list[int] = []
        for cand in order:
            cand = int(cand)
            if cand == artist or cand in self._examined:
                continue
            picks.append(cand)
            if len(picks) == self.n_insert:
                break
        return picks

    def on_skip(self, artist: int) -> list[int]:
        self._examined.add(artist)
        return []


class BaselinePolicyFactory:
    """Deployed heuristic: popularity ranking weighted by geo affinity,
    nearest-neighbour insertions on selection."""

    def __init__(self, corpus: EmbeddingSpace, n_insert: int = 2,
                 policy_id: str = "baseline"):
        self.corpus = corpus
        self.n_insert = n_insert
        self.policy_id = policy_id

    def __call__(self, context: ObservableContext) -> _StaticInsertPolicy:
        affinity = self.corpus.geo_genre_affinity[context.geo][self.corpus.genres]
        score = self.corpus.popularity * affinity
        order = np.lexsort((np.arange(score.size), -score))
        return _StaticInsertPolicy(self.policy_id, self.corpus, order, self.n_insert)


class DiversityPolicyFactory:
    """Second behavior policy: round-robin across genres, popularity-ordered
    within each genre, same insertion rule."""

    def __init__(self, corpus: EmbeddingSpace, n_insert: int = 2,
                 policy_id: str = "diversity"):
        self.corpus = corpus
        self.n_insert = n_insert
        self.policy_id = policy_id

    def __call__(self, context: ObservableContext) -> _StaticInsertPolicy:
        corpus = self.corpus
        per_genre: list[list[int]] = []
        for g in range(corpus.n_genres):
            members = np.nonzero(corpus.genres == g)[0]
            pop = corpus.popularity[members]
            per_genre.append([int(a) for a in members[np.lexsort((members, -pop))]])
        order: list[int] = []
        for i in range(max(len(lst) for lst in per_genre)):
            for g in range(corpus.n_genres):
                if i < len(per_genre[g]):
                    order.append(per_genre[g][i])
        return _StaticInsertPolicy(self.policy_id, self.corpus, order, self.n_insert)


class _ScoredPolicy:
    """Greedy exposure-time re-ranker: argmax of pCTR + lambda * coverage gain
    over the remaining candidate pool, ties broken by ascending artist id."""

    def __init__(self, policy_id: str, corpus: EmbeddingSpace, pctr: PctrModel,
                 lam: float, context: ObservableContext, pool: np.ndarray):
        self.policy_id = policy_id
        self.corpus = corpus
        self.pctr = pctr
        self.lam = lam
        self.context = context
        self._available = np.zeros(corpus.n_artists, dtype=bool)
        self._available[pool] = True
        self._coverage = _CoverageGains(corpus) if lam > 0 else None
        self._selected: list[int] = []
        self._skipped: list[int] = []
        self._sel_sum = np.zeros(corpus.dim)
        self._skip_sum = np.zeros(corpus.dim)
        self._turn = 0

    def _pctr_scores(self) -> np.ndarray:
        """Predicted CTR for every artist (identical to predict() on
        pctr_feature_matrix rows, vectorized over the corpus)."""
        corpus = self.corpus
        w = self.pctr.weights
        z = np.full(corpus.n_artists, self.pctr.intercept)
        if self._selected:
            centroid = self._sel_sum / len(self._selected)
            centroid = centroid / max(np.linalg.norm(centroid), 1e-12)
            z += w[0] * (corpus.embeddings @ centroid)
        if self._skipped:
            centroid = self._skip_sum / len(self._skipped)
            centroid = centroid / max(np.linalg.norm(centroid), 1e-12)
            z += w[1] * (corpus.embeddings @ centroid)
        z += w[2] * corpus.log_pop_feature(self.context.geo)
        z += w[3] * (self._turn / 300.0) + w[4] * (len(self._selected) / 20.0)
        return 1.0 / (1.0 + np.exp(-z))

    def _pick(self) -> list[int]:
        if not self._available.any():
            return []
        scores = self._pctr_scores()
        scores[~self._available] = -np.inf
        if self._coverage is None:
            best = int(np.argmax(scores))  # first max = lowest artist id
        else:
            # lazy exact argmax: refresh stale gain bounds in chunks until
            # the maximizer is a freshly evaluated candidate
            upper = scores + self.lam * np.where(
                self._available, self._coverage.upper, 0.0)
            exact = ~self._available  # -inf entries never win
            chunk = 24
            while True:
                q = int(np.argmax(upper))
                if exact[q]:
                    best = q
                    break
                stale = np.nonzero(~exact)[0]
                top = stale[np.argpartition(-upper[stale], min(chunk, stale.size) - 1)[:chunk]]
                upper[top] = scores[top] + self.lam * self._coverage.fresh_many(top)
                exact[top] = True
        self._available[best] = False
        return [best]

    def initial_slate(self) -> list[int]:
        return self._pick()

    def on_select(self, artist: int) -> list[int]:
        self._selected.append(artist)
        self._sel_sum += self.corpus.embeddings[artist]
        return self._after(artist)

    def on_skip(self, artist: int) -> list[int]:
        self._skipped.append(artist)
        self._skip_sum += self.corpus.embeddings[artist]
        return self._after(artist)

    def _after(self, artist: int) -> list[int]:
        self._turn += 1
        if self._coverage is not None:
            self._coverage.add(artist)
        return self._pick()

    def shown_coverage(self) -> float:
        return coverage_value(self._selected + self._skipped, self.corpus)


class ScoredPolicyFactory:
    """pCTR + lambda * coverage trade-off family (lambda = 0 is the pure
    predicted-CTR policy)."""

    def __init__(self, corpus: EmbeddingSpace, pctr: PctrModel, lam: float,
                 policy_id: str | None = None, candidate_pool: np.ndarray | None = None):
        if lam < 0:
            raise PolicyError("lambda must be non-negative")
        self.corpus = corpus
        self.pctr = pctr
        self.lam = lam
        self.policy_id = policy_id or (f"score-{lam:g}" if lam > 0 else "pctr")
        self.pool = (np.arange(corpus.n_artists) if candidate_pool is None
                     else np.asarray(candidate_pool, dtype=np.int64))

    def __call__(self, context: ObservableContext) -> _ScoredPolicy:
        return _ScoredPolicy(self.policy_id, self.corpus, self.pctr, self.lam,
                             context, self.pool)


def pctr_policy(corpus: EmbeddingSpace, pctr: PctrModel,
                policy_id: str = "pctr") -> ScoredPolicyFactory:
    return ScoredPolicyFactory(corpus, pctr, 0.0, policy_id=policy_id)
