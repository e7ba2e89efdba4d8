"""User session generator: per-turn selection and continuation prediction
conditioned on encoded user state and session history, with recurrent and
transformer backends, plus the rollout loop that drives a policy through
the linear slate walk."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .nn import (
    Adam, LstmCell, Mlp, ParamStore, Tensor, TrainingDiverged,
    TransformerLayer, concat, no_grad, one_hot, rows,
)
from .rng import rng_for
from .slates import SlateWalk
from .world import (
    MAX_SESSION_TURNS, EmbeddingSpace, LogDataset, Session, UserState,
)

# rows of the response/marker embedding table
R_SKIP, R_SELECT, R_PENDING, R_CONTEXT = 0, 1, 2, 3


class SessionGenError(ValueError):
    pass


@dataclass
class SessionGenConfig:
    hidden: int = 64
    response_dim: int = 8
    backend: str = "recurrent"        # "recurrent" | "transformer"
    n_layers: int = 2
    n_heads: int = 2
    lr: float = 3e-3
    lr_decay: float = 1.0
    epochs: int = 6
    batch_size: int = 256
    seed: int = 0
    heldout_fraction: float = 0.05
    count_bucket: int = 10
    max_turns: int = MAX_SESSION_TURNS
    max_tokens: int = 660             # transformer cap: interests + 2 tokens/turn
    k_max: int = 20


FINE_BUCKETS = 24  # unit-width one-hot cells before coarse bucketing starts


def _count_features(values: np.ndarray, max_turns: int, bucket: int) -> np.ndarray:
    """Scalar scaled by the turn cap plus a bucketized one-hot.

    Early counts get unit-width cells (the hazard moves fastest there);
    later counts share cells of the configured width.
    """
    values = np.asarray(values, dtype=np.int64)
    n_coarse = max((max_turns - FINE_BUCKETS) // bucket + 1, 1)
    n_buckets = FINE_BUCKETS + n_coarse
    feats = np.zeros(values.shape + (1 + n_buckets,))
    feats[..., 0] = values / max_turns
    idx = np.where(
        values < FINE_BUCKETS, values,
        FINE_BUCKETS + np.minimum((values - FINE_BUCKETS) // bucket, n_coarse - 1),
    )
    np.put_along_axis(feats[..., 1:], idx[..., None], 1.0, axis=-1)
    return feats


def _count_cell(values: np.ndarray, max_turns: int, bucket: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    n_coarse = max((max_turns - FINE_BUCKETS) // bucket + 1, 1)
    return np.where(
        values < FINE_BUCKETS, values,
        FINE_BUCKETS + np.minimum((values - FINE_BUCKETS) // bucket, n_coarse - 1),
    )


class SessionGenModel:
    """Two-headed contextual sequence model of (select, continue) per turn."""

    def __init__(self, corpus: EmbeddingSpace, config: SessionGenConfig):
        self.corpus = corpus
        self.config = config
        self.store = ParamStore(config.seed)
        rng = rng_for(config.seed, "sessiongen-init")
        d = corpus.dim
        n_coarse = max((config.max_turns - FINE_BUCKETS) // config.count_bucket + 1, 1)
        self._count_width = 1 + FINE_BUCKETS + n_coarse
        enc_in = d + 1 + corpus.n_geo + corpus.n_device
        self.encoder = Mlp(self.store, "encoder",
                           (enc_in, config.hidden, config.hidden), rng)
        self.response_emb = self.store.add(
            "response_emb", 0.1 * rng.normal(size=(4, config.response_dim)))
        self._xbar_width = config.hidden + 2 * self._count_width + d
        head_in = config.hidden + self._xbar_width
        self.head_select = Mlp(self.store, "head_select",
                               (head_in, config.hidden, 1), rng)
        self.head_continue = Mlp(self.store, "head_continue",
                                 (head_in, config.hidden, 1), rng)
        # direct per-turn-cell paths onto each head's logit; the epoch-end
        # calibration re-solves these exactly against the labels
        self.select_skip = self.store.add(
            "head_select.turn_skip", np.zeros((self._count_width - 1, 1)))
        self.continue_skip = self.store.add(
            "head_continue.turn_skip", np.zeros((self._count_width - 1, 1)))
        step_in = config.hidden + d + config.response_dim + 2 * self._count_width
        if config.backend == "recurrent":
            self.core = LstmCell(self.store, "core", step_in, config.hidden, rng)
        elif config.backend == "transformer":
            self.tok_proj = Mlp(self.store, "tok_proj",
                                (d + config.response_dim, config.hidden), rng,
                                head_activation="linear")
            self.positions = self.store.add(
                "positions", 0.02 * rng.normal(size=(config.max_tokens, config.hidden)))
            self.layers = [
                TransformerLayer(self.store, f"layer{i}", config.hidden,
                                 config.n_heads, rng, ffn_width=2 * config.hidden)
                for i in range(config.n_layers)
            ]
        else:
            raise SessionGenError(f"unknown backend {config.backend!r}")

    # -- context encoding ---------------------------------------------------

    def pooled_interests(self, states: list[UserState]) -> np.ndarray:
        """Position-decayed mean of interest embeddings plus a length feature."""
        d = self.corpus.dim
        out = np.zeros((len(states), d + 1))
        for i, state in enumerate(states):
            ints = state.interests
            if any(a < 0 or a >= self.corpus.n_artists for a in ints):
                raise SessionGenError("unknown artist in interests")
            if ints:
                w = 1.0 / (1.0 + np.arange(len(ints)))
                w /= w.sum()
                out[i, :d] = w @ self.corpus.embeddings[ints]
            out[i, d] = len(ints) / self.config.k_max
        return out

    def encode_context(self, states: list[UserState]) -> Tensor:
        """E(C): pooled interests and one-hot observable context through the MLP."""
        pooled = self.pooled_interests(states)
        geo = one_hot(np.array([s.context.geo for s in states]), self.corpus.n_geo)
        dev = one_hot(np.array([s.context.device for s in states]), self.corpus.n_device)
        return self.encoder(Tensor(np.concatenate([pooled, geo, dev], axis=1)))

    # -- per-turn pieces ------------------------------------------------------

    def _counts(self, values: np.ndarray) -> np.ndarray:
        return _count_features(values, self.config.max_turns, self.config.count_bucket)

    def head_features(self, encoded: Tensor, y_prev: np.ndarray, t_prev: np.ndarray,
                      query: np.ndarray) -> Tensor:
        """The extra conditioning passed to both heads alongside the step
        output: (E, selections so far, previous turn index, current query)."""
        return concat([
            encoded,
            Tensor(self._counts(y_prev)),
            Tensor(self._counts(t_prev)),
            Tensor(self.corpus.embeddings[query]),
        ], axis=-1)

    def predict_turn(self, output_prev: Tensor, head_feats: Tensor,
                     s_prev: np.ndarray, t_prev: np.ndarray):
        """Selection and continuation probabilities for the current turn;
        both are gated by the previous continuation flag."""
        logit_r, logit_s = self.head_logits(output_prev, head_feats, t_prev)
        gate = np.asarray(s_prev, dtype=np.float64).reshape(-1)
        p_sel = logit_r.sigmoid() * Tensor(gate[:, None])
        p_cont = logit_s.sigmoid() * Tensor(gate[:, None])
        return p_sel, p_cont

    def head_logits(self, output_prev: Tensor, head_feats: Tensor,
                    t_prev: np.ndarray):
        x = concat([output_prev, head_feats], axis=-1)
        cells = _count_cell(t_prev, self.config.max_turns, self.config.count_bucket)
        return (self.head_select(x) + rows(self.select_skip, cells),
                self.head_continue(x) + rows(self.continue_skip, cells))

    def step_input(self, encoded: Tensor, query: np.ndarray, response: np.ndarray,
                   y_incl: np.ndarray, t: np.ndarray) -> Tensor:
        resp = rows(self.response_emb, np.where(np.asarray(response) > 0, R_SELECT, R_SKIP))
        return concat([
            encoded,
            Tensor(self.corpus.embeddings[query]),
            resp,
            Tensor(self._counts(y_incl)),
            Tensor(self._counts(t)),
        ], axis=-1)

    def session_step(self, h, c, x: Tensor):
        """One recurrent-core update (recurrent backend only)."""
        return self.core.step(h, c, x)

    # -- persistence ----------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "sessiongen", "config": asdict(self.config)}
        meta.update(extra_meta or {})
        self.store.save(path, meta)

    @classmethod
    def load(cls, path, corpus: EmbeddingSpace) -> "SessionGenModel":
        store, meta = ParamStore.load(path)
        if meta.get("kind") != "sessiongen":
            raise SessionGenError(f"not a session-generator checkpoint: {path}")
        model = cls(corpus, SessionGenConfig(**meta["config"]))
        model.store.load_values_from(store)
        return model


# ---------------------------------------------------------------------------
# transformer token plumbing


def _transformer_outputs(model: SessionGenModel, states: list[UserState],
                         queries: np.ndarray, responses: np.ndarray,
                         lengths: np.ndarray) -> Tensor:
    """Teacher-forced forward: for each turn t the output is read at a
    query token that sees interests, answered turns < t, and the current
    query only. Returns outputs at every query token, (B, T, hidden)."""
    cfg = model.config
    b, t_max = queries.shape
    k_int = max(len(s.interests) for s in states)
    n_tokens = k_int + 2 * t_max
    if n_tokens > cfg.max_tokens:
        raise SessionGenError(
            f"sequence needs {n_tokens} tokens, cap is {cfg.max_tokens}")
    d = model.corpus.dim
    tok_emb = np.zeros((b, n_tokens, d))
    tok_marker = np.full((b, n_tokens), R_PENDING, dtype=np.int64)
    key_mask = np.ones((b, n_tokens))
    for i, state in enumerate(states):
        ints = state.interests
        if ints:
            tok_emb[i, :len(ints)] = model.corpus.embeddings[ints]
        tok_marker[i, :k_int] = R_CONTEXT
        key_mask[i, len(ints):k_int] = 0.0  # interest padding is invisible
    for t in range(t_max):
        q_tok = k_int + 2 * t
        tok_emb[:, q_tok] = model.corpus.embeddings[queries[:, t]]
        tok_marker[:, q_tok] = R_PENDING
        tok_emb[:, q_tok + 1] = model.corpus.embeddings[queries[:, t]]
        tok_marker[:, q_tok + 1] = np.where(responses[:, t] > 0, R_SELECT, R_SKIP)
        key_mask[:, q_tok] = (lengths > t).astype(np.float64)
        key_mask[:, q_tok + 1] = (lengths > t).astype(np.float64)
    marker = rows(model.response_emb, tok_marker)
    flat = concat([Tensor(tok_emb.reshape(b * n_tokens, d)),
                   marker.reshape(b * n_tokens, cfg.response_dim)], axis=-1)
    seq = model.tok_proj(flat).reshape(b, n_tokens, cfg.hidden)
    seq = seq + model.positions[np.arange(n_tokens)].reshape(1, n_tokens, cfg.hidden)
    for layer in model.layers:
        seq = layer(seq, causal=True, key_mask=key_mask)
    query_positions = k_int + 2 * np.arange(t_max)
    return seq[:, query_positions, :]


# ---------------------------------------------------------------------------
# training


def _session_batch_loss(model: SessionGenModel, records) -> Tensor:
    """Teacher-forced two-head binary cross-entropy, per-user mean.

    Continuation targets are 1 on every non-final turn and 0 at the final
    turn; turn-cap truncation censors the final continuation label.
    """
    b = len(records)
    lengths = np.array([len(r.session) for r in records])
    t_max = int(lengths.max())
    queries = np.zeros((b, t_max), dtype=np.int64)
    resp = np.zeros((b, t_max), dtype=np.int64)
    for i, r in enumerate(records):
        n = lengths[i]
        queries[i, :n] = r.session.artists
        resp[i, :n] = r.session.responses
    y_incl = np.cumsum(resp, axis=1)
    y_prev = y_incl - resp
    truncated = np.array([r.session.truncated for r in records])

    encoded = model.encode_context([r.state for r in records])
    loss = Tensor(np.zeros(()))
    if model.config.backend == "recurrent":
        h, c, out = encoded, Tensor(np.zeros(encoded.shape)), encoded
    else:
        # output for turn t is read at turn t's own query token
        outputs = _transformer_outputs(
            model, [r.state for r in records], queries, resp, lengths)

    for t in range(1, t_max + 1):
        idx = t - 1
        if model.config.backend == "transformer":
            out = outputs[:, idx, :]
        feats = model.head_features(
            encoded, y_prev[:, idx], np.full(b, t - 1), queries[:, idx])
        logit_r, logit_s = model.head_logits(out, feats, np.full(b, t - 1))
        r_targets = resp[:, idx:idx + 1].astype(np.float64)
        r_mask = (lengths >= t).astype(np.float64)[:, None]
        s_targets = (lengths > t).astype(np.float64)[:, None]
        s_mask = ((lengths > t) | ((lengths == t) & ~truncated)).astype(np.float64)[:, None]
        bce_r = logit_r.softplus() - logit_r * Tensor(r_targets)
        bce_s = logit_s.softplus() - logit_s * Tensor(s_targets)
        loss = loss + (bce_r * Tensor(r_mask)).sum() + (bce_s * Tensor(s_mask)).sum()
        if t < t_max and model.config.backend == "recurrent":
            x = model.step_input(encoded, queries[:, idx], resp[:, idx],
                                 y_incl[:, idx], np.full(b, t))
            h, c, out = model.session_step(h, c, x)
    return loss / float(b)


def _head_rows(model: SessionGenModel, records):
    """Teacher-forced per-turn logits and labels for both heads."""
    rows_out: list[tuple] = []  # (cell, logit_r, r, logit_s, s_target, s_mask)
    with no_grad():
        for start in range(0, len(records), 512):
            chunk = records[start:start + 512]
            b = len(chunk)
            lengths = np.array([len(r.session) for r in chunk])
            t_max = int(lengths.max())
            queries = np.zeros((b, t_max), dtype=np.int64)
            resp = np.zeros((b, t_max), dtype=np.int64)
            for i, r in enumerate(chunk):
                queries[i, :lengths[i]] = r.session.artists
                resp[i, :lengths[i]] = r.session.responses
            y_incl = np.cumsum(resp, axis=1)
            y_prev = y_incl - resp
            truncated = np.array([r.session.truncated for r in chunk])
            encoded = model.encode_context([r.state for r in chunk])
            if model.config.backend == "recurrent":
                h, c, out = encoded, Tensor(np.zeros(encoded.shape)), encoded
            else:
                outputs = _transformer_outputs(
                    model, [r.state for r in chunk], queries, resp, lengths)
            for t in range(1, t_max + 1):
                idx = t - 1
                if model.config.backend == "transformer":
                    out = outputs[:, idx, :]
                feats = model.head_features(
                    encoded, y_prev[:, idx], np.full(b, t - 1), queries[:, idx])
                logit_r, logit_s = model.head_logits(out, feats, np.full(b, t - 1))
                cell = _count_cell(np.array([t - 1]), model.config.max_turns,
                                   model.config.count_bucket)[0]
                for i in range(b):
                    if lengths[i] < t:
                        continue
                    s_mask = 1.0 if (lengths[i] > t or not truncated[i]) else 0.0
                    rows_out.append((
                        cell, logit_r.data[i, 0], float(resp[i, idx]),
                        logit_s.data[i, 0], float(lengths[i] > t), s_mask,
                    ))
                if t < t_max and model.config.backend == "recurrent":
                    x = model.step_input(encoded, queries[:, idx], resp[:, idx],
                                         y_incl[:, idx], np.full(b, t))
                    h, c, out = model.session_step(h, c, x)
    return rows_out


def _calibrate_heads(model: SessionGenModel, records, max_records: int = 4000) -> None:
    """Exact per-turn-cell recalibration of both head logits.

    For each turn cell, bisection solves the additive offset that matches
    the mean predicted probability to the empirical rate — a coordinate
    M-step of the same binary cross-entropy (shared-weight SGD alone
    leaves a few points of per-turn bias, which compounds over a rollout).
    """
    rows_data = _head_rows(model, records[:max_records])
    if not rows_data:
        return
    arr = np.array(rows_data)
    cells = arr[:, 0].astype(int)
    for head_skip, logit_col, label_col, mask_col in (
        (model.select_skip, 1, 2, None),
        (model.continue_skip, 3, 4, 5),
    ):
        for cell in np.unique(cells):
            pick = cells == cell
            if mask_col is not None:
                pick = pick & (arr[:, mask_col] > 0)
            if pick.sum() < 20:
                continue
            logits = arr[pick, logit_col]
            target = float(np.clip(arr[pick, label_col].mean(), 1e-4, 1 - 1e-4))
            lo, hi = -15.0, 15.0
            for _ in range(50):
                mid = 0.5 * (lo + hi)
                z = np.clip(logits + mid, -35.0, 35.0)
                if (1.0 / (1.0 + np.exp(-z))).mean() < target:
                    lo = mid
                else:
                    hi = mid
            head_skip.data[cell, 0] += 0.5 * (lo + hi)


def train_sessiongen(logs: LogDataset, corpus: EmbeddingSpace,
                     config: SessionGenConfig | None = None):
    """MLE training with length-bucketed minibatches; returns (model, history)."""
    config = config or SessionGenConfig()
    model = SessionGenModel(corpus, config)
    records = list(logs)
    n_hold = int(len(records) * config.heldout_fraction)
    train_recs = records[:len(records) - n_hold]
    hold_recs = records[len(records) - n_hold:]
    if not train_recs:
        raise SessionGenError("no training records")
    # batches of similar length cut padding waste; batch order reshuffles
    by_length = sorted(range(len(train_recs)), key=lambda i: (len(train_recs[i].session), i))
    batches = [by_length[i:i + config.batch_size]
               for i in range(0, len(by_length), config.batch_size)]
    optimizer = Adam(model.store, lr=config.lr)
    order_rng = rng_for(config.seed, "sessiongen-batches")
    history: list[dict] = []

    def heldout_nll() -> float | None:
        if not hold_recs:
            return None
        total = 0.0
        with no_grad():
            for i in range(0, len(hold_recs), config.batch_size):
                chunk = hold_recs[i:i + config.batch_size]
                total += _session_batch_loss(model, chunk).item() * len(chunk)
        return total / len(hold_recs)

    for epoch in range(1, config.epochs + 1):
        optimizer.lr = config.lr * config.lr_decay ** (epoch - 1)
        total = 0.0
        for bi in order_rng.permutation(len(batches)):
            batch = [train_recs[j] for j in batches[bi]]
            optimizer.zero_grad()
            loss = _session_batch_loss(model, batch)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"session-generator loss diverged at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        _calibrate_heads(model, train_recs)
        history.append({
            "epoch": epoch,
            "train_nll": total / len(train_recs),
            "heldout_nll": heldout_nll(),
        })
    return model, history


def auc_loss(model: SessionGenModel, logs: LogDataset) -> float:
    """1 - AUC of predicted selection probability on non-terminal turns."""
    from .policies import auc_loss_from_scores

    if len(logs) == 0:
        raise SessionGenError("empty dataset")
    scores, labels = predicted_selection_scores(model, logs)
    if labels.min() == labels.max():
        raise SessionGenError("AUC undefined on a single-class dataset")
    return auc_loss_from_scores(scores, labels)


def predicted_selection_scores(model: SessionGenModel, logs: LogDataset,
                               batch_size: int = 512):
    """Predicted p(select) and observed labels over non-terminal turns."""
    scores, labels = [], []
    records = list(logs)
    with no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i:i + batch_size]
            s, l = _selection_scores_batch(model, chunk)
            scores.append(s)
            labels.append(l)
    return np.concatenate(scores), np.concatenate(labels)


def _selection_scores_batch(model: SessionGenModel, records):
    b = len(records)
    lengths = np.array([len(r.session) for r in records])
    t_max = int(lengths.max())
    queries = np.zeros((b, t_max), dtype=np.int64)
    resp = np.zeros((b, t_max), dtype=np.int64)
    for i, r in enumerate(records):
        queries[i, :lengths[i]] = r.session.artists
        resp[i, :lengths[i]] = r.session.responses
    y_incl = np.cumsum(resp, axis=1)
    y_prev = y_incl - resp
    truncated = np.array([r.session.truncated for r in records])
    encoded = model.encode_context([r.state for r in records])
    scores = np.zeros((b, t_max))
    if model.config.backend == "recurrent":
        h, c, out = encoded, Tensor(np.zeros(encoded.shape)), encoded
    else:
        outputs = _transformer_outputs(
            model, [r.state for r in records], queries, resp, lengths)
    for t in range(1, t_max + 1):
        idx = t - 1
        if model.config.backend == "transformer":
            out = outputs[:, idx, :]
        feats = model.head_features(encoded, y_prev[:, idx], np.full(b, t - 1),
                                    queries[:, idx])
        logit_r, _ = model.head_logits(out, feats, np.full(b, t - 1))
        scores[:, idx] = 1.0 / (1.0 + np.exp(-logit_r.data[:, 0]))
        if t < t_max and model.config.backend == "recurrent":
            x = model.step_input(encoded, queries[:, idx], resp[:, idx],
                                 y_incl[:, idx], np.full(b, t))
            h, c, out = model.session_step(h, c, x)
    # non-terminal: every turn before the last, plus a truncated final turn
    keep = np.zeros((b, t_max), dtype=bool)
    for i in range(b):
        keep[i, :max(lengths[i] - (0 if truncated[i] else 1), 0)] = True
    return scores[keep], resp[keep].astype(np.float64)


# ---------------------------------------------------------------------------
# rollouts


class _RecurrentRollout:
    def __init__(self, model: SessionGenModel, states: list[UserState]):
        self.model = model
        self.encoded = model.encode_context(states)
        # copies: per-row state is updated in place as sessions advance
        self.h = Tensor(self.encoded.data.copy())
        self.c = Tensor(np.zeros(self.encoded.shape))
        self.out = Tensor(self.encoded.data.copy())

    def predict(self, idx: np.ndarray, queries: np.ndarray, y_prev: np.ndarray,
                t_prev: np.ndarray):
        enc = Tensor(self.encoded.data[idx])
        feats = self.model.head_features(enc, y_prev, t_prev, queries)
        out = Tensor(self.out.data[idx])
        p_sel, p_cont = self.model.predict_turn(out, feats, np.ones(idx.size), t_prev)
        return p_sel.data[:, 0], p_cont.data[:, 0]

    def advance(self, idx: np.ndarray, queries: np.ndarray, responses: np.ndarray,
                y_incl: np.ndarray, t: np.ndarray):
        enc = Tensor(self.encoded.data[idx])
        x = self.model.step_input(enc, queries, responses, y_incl, t)
        h, c, out = self.model.session_step(
            Tensor(self.h.data[idx]), Tensor(self.c.data[idx]), x)
        self.h.data[idx] = h.data
        self.c.data[idx] = c.data
        self.out.data[idx] = out.data


class _TransformerRollout:
    """Token-history rollout; re-encodes the prefix at every turn."""

    def __init__(self, model: SessionGenModel, states: list[UserState]):
        self.model = model
        self.states = states
        self.encoded = model.encode_context(states)
        self.queries: list[list[int]] = [[] for _ in states]
        self.responses: list[list[int]] = [[] for _ in states]

    def predict(self, idx: np.ndarray, queries: np.ndarray, y_prev: np.ndarray,
                t_prev: np.ndarray):
        outs = np.zeros((idx.size, self.model.config.hidden))
        for j, i in enumerate(idx):
            outs[j] = self._output_for(int(i), int(queries[j]))
        enc = Tensor(self.encoded.data[idx])
        feats = self.model.head_features(enc, y_prev, t_prev, queries)
        p_sel, p_cont = self.model.predict_turn(Tensor(outs), feats,
                                                np.ones(idx.size), t_prev)
        return p_sel.data[:, 0], p_cont.data[:, 0]

    def _output_for(self, i: int, query: int) -> np.ndarray:
        past_q = np.array(self.queries[i] + [query], dtype=np.int64).reshape(1, -1)
        past_r = np.array(self.responses[i] + [0], dtype=np.int64).reshape(1, -1)
        outputs = _transformer_outputs(
            self.model, [self.states[i]], past_q, past_r,
            np.array([past_q.shape[1]]))
        return outputs.data[0, -1, :]

    def advance(self, idx: np.ndarray, queries: np.ndarray, responses: np.ndarray,
                y_incl: np.ndarray, t: np.ndarray):
        for j, i in enumerate(idx):
            self.queries[int(i)].append(int(queries[j]))
            self.responses[int(i)].append(int(responses[j]))


def _make_rollout(model: SessionGenModel, states):
    if model.config.backend == "recurrent":
        return _RecurrentRollout(model, states)
    return _TransformerRollout(model, states)


def rollout_sessions(model: SessionGenModel, states: list[UserState],
                     policy_factory, seed: int,
                     max_turns: int = MAX_SESSION_TURNS) -> list[Session]:
    """Simulate one session per state against the policy, lockstep-batched.

    Each session owns the RNG stream (seed, "sim", index), so results are
    identical whether sessions run batched or one at a time.
    """
    n = len(states)
    walks = [SlateWalk(policy_factory(s.context)) for s in states]
    rngs = [rng_for(seed, "sim", i) for i in range(n)]
    sessions = [Session([], [], []) for _ in range(n)]
    active = np.ones(n, dtype=bool)
    y_prev = np.zeros(n, dtype=np.int64)
    rollout = None
    with no_grad():
        rollout = _make_rollout(model, states)
        for t in range(1, max_turns + 1):
            idx = np.nonzero(active)[0]
            if idx.size == 0:
                break
            queries = np.zeros(idx.size, dtype=np.int64)
            alive = np.ones(idx.size, dtype=bool)
            for j, i in enumerate(idx):
                artist = walks[i].next()
                if artist is None:
                    # policy ran out of artists: force termination, flag it
                    if sessions[i].continuations:
                        sessions[i].continuations[-1] = 0
                    sessions[i].exhausted = True
                    active[i] = False
                    alive[j] = False
                else:
                    queries[j] = artist
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
            for j, i in enumerate(idx):
                walks[i].feed(int(queries[j]), bool(responses[j]))
                sessions[i].artists.append(int(queries[j]))
                sessions[i].responses.append(int(responses[j]))
                sessions[i].continuations.append(int(continues[j]))
                if continues[j] == 0:
                    active[i] = False
            y_prev[idx] += responses
            still = continues == 1
            if t < max_turns and still.any():
                rollout.advance(idx[still], queries[still], responses[still],
                                y_prev[idx[still]], np.full(int(still.sum()), t))
    for i in range(n):
        if len(sessions[i]) == max_turns and sessions[i].continuations[-1] == 1:
            sessions[i].truncated = True
        sessions[i].validate()
    return sessions


def simulate_session(model: SessionGenModel, state: UserState, policy_factory,
                     seed: int, max_turns: int = MAX_SESSION_TURNS) -> Session:
    """Single-session rollout (the policy sees only observable context)."""
    return rollout_sessions(model, [state], policy_factory, seed, max_turns)[0]
