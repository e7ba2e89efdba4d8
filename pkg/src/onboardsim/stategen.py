"""User state generator: a categorical context prior times an
autoregressive interest model with recurrent or transformer backends.

Interest lists are generated without replacement from a multinomial
logit over artist embeddings plus a null artist whose selection ends the
list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace

import numpy as np

from .nn import (
    Adam, LstmCell, Mlp, ParamStore, Tensor, TrainingDiverged,
    TransformerLayer, gather, log_softmax, no_grad, one_hot,
)
from .rng import rng_for
from .world import EmbeddingSpace, LogDataset, ObservableContext, UserState

NEG = -1e30


class StateGenError(ValueError):
    pass


@dataclass
class StateGenConfig:
    hidden: int = 64
    k_max: int = 20
    backend: str = "recurrent"        # "recurrent" | "transformer"
    n_layers: int = 2                 # transformer depth
    n_heads: int = 2
    lr: float = 5e-3
    lr_decay: float = 1.0
    epochs: int = 10
    batch_size: int = 256
    seed: int = 0
    heldout_fraction: float = 0.05
    eval_samples: int = 4096


def fit_context_prior(logs: LogDataset, n_geo: int, n_device: int) -> np.ndarray:
    """Maximum-likelihood categorical over (geo, device) cells with
    add-one smoothing on every cell."""
    if len(logs) == 0:
        raise StateGenError("cannot fit a prior on empty logs")
    counts = np.zeros((n_geo, n_device))
    for record in logs:
        counts[record.state.context.geo, record.state.context.device] += 1
    counts += 1.0
    return counts / counts.sum()


class StateGenModel:
    """Trained generator of (observable context, latent interests)."""

    def __init__(self, corpus: EmbeddingSpace, config: StateGenConfig,
                 prior: np.ndarray | None = None):
        self.corpus = corpus
        self.config = config
        self.n_cells = corpus.n_geo * corpus.n_device
        self.prior = prior if prior is not None else np.full(
            (corpus.n_geo, corpus.n_device), 1.0 / self.n_cells
        )
        self.store = ParamStore(config.seed)
        rng = rng_for(config.seed, "stategen-init")
        d = corpus.dim
        count_width = config.k_max + 1
        self.step_width = d + count_width
        if config.backend == "recurrent":
            self.adapter = Mlp(self.store, "adapter",
                               (self.n_cells, config.hidden, config.hidden), rng)
            self.core = LstmCell(self.store, "core", self.step_width,
                                 config.hidden, rng)
            # the count one-hot skips straight into the readout so the
            # termination affinity can track list length directly
            self.readout = Mlp(self.store, "readout",
                               (config.hidden + count_width, d), rng,
                               head_activation="linear")
        elif config.backend == "transformer":
            width = config.hidden
            self.adapter = Mlp(self.store, "adapter",
                               (self.n_cells, width, width), rng)
            self.in_proj = Mlp(self.store, "in_proj", (self.step_width, width), rng,
                               head_activation="linear")
            self.positions = self.store.add(
                "positions", 0.02 * rng.normal(size=(count_width, width)))
            self.layers = [
                TransformerLayer(self.store, f"layer{i}", width, config.n_heads, rng,
                                 ffn_width=2 * width)
                for i in range(config.n_layers)
            ]
            self.readout = Mlp(self.store, "readout", (width + count_width, d), rng,
                               head_activation="linear")
        else:
            raise StateGenError(f"unknown backend {config.backend!r}")
        # artist embeddings plus the null artist, frozen
        self._emb_all = np.vstack([corpus.embeddings, corpus.null_embedding])

    # -- contract surface --------------------------------------------------

    @property
    def null_index(self) -> int:
        return self.corpus.n_artists

    def context_cell(self, context: ObservableContext) -> int:
        return context.geo * self.corpus.n_device + context.device

    def _read_out(self, h, counts: np.ndarray):
        from .nn import concat
        count_feat = Tensor(one_hot(counts, self.config.k_max + 1))
        return self.readout(concat([h, count_feat], axis=-1))

    def initial_state(self, cells: np.ndarray):
        """Seed the recurrent state from one-hot observable context."""
        h = self.adapter(Tensor(one_hot(cells, self.n_cells)))
        c = Tensor(np.zeros(h.shape))
        return h, c, self._read_out(h, np.zeros(cells.size, dtype=np.int64))

    def step(self, h, c, artists: np.ndarray, counts: np.ndarray):
        """One recurrent step on [artist embedding; count one-hot]."""
        artists = np.asarray(artists)
        if artists.min() < 0 or artists.max() >= self.corpus.n_artists:
            raise StateGenError("unknown artist id")
        if counts.max() > self.config.k_max:
            raise StateGenError("count exceeds k_max")
        x = np.concatenate(
            [self.corpus.embeddings[artists], one_hot(counts, self.config.k_max + 1)],
            axis=-1,
        )
        h2, c2, _ = self.core.step(h, c, Tensor(x))
        return h2, c2, self._read_out(h2, counts)

    def logits(self, output) -> Tensor:
        """Affinity of a step output to every artist and the null artist."""
        out = output if isinstance(output, Tensor) else Tensor(output)
        return out @ Tensor(self._emb_all.T)

    def next_interest_dist(self, output: np.ndarray, excluded) -> np.ndarray:
        """Exact multinomial-logit distribution over eligible artists plus
        null, with excluded artists carrying zero probability."""
        excluded = set(int(a) for a in excluded)
        if not excluded <= set(range(self.corpus.n_artists)):
            raise StateGenError("excluded set contains unknown artists")
        logits = self._emb_all @ np.asarray(output, dtype=np.float64)
        if len(excluded) == self.corpus.n_artists:
            dist = np.zeros(self.corpus.n_artists + 1)
            dist[self.null_index] = 1.0
            return dist
        if excluded:
            logits[np.fromiter(excluded, dtype=np.int64)] = NEG
        logits -= logits.max()
        e = np.exp(logits)
        return e / e.sum()

    # -- sampling -----------------------------------------------------------

    def sample_state(self, seed: int) -> UserState:
        return self.sample_states(1, seed)[0]

    def sample_states(self, n: int, seed: int) -> list[UserState]:
        """Draw synthetic user states; lockstep-batched and deterministic."""
        rng = rng_for(seed, "stategen-sample")
        cells = rng.choice(self.n_cells, size=n, p=self.prior.reshape(-1))
        with no_grad():
            if self.config.backend == "recurrent":
                interests = self._sample_recurrent(cells, rng)
            else:
                interests = self._sample_transformer(cells, rng)
        states = []
        for i in range(n):
            geo, device = divmod(int(cells[i]), self.corpus.n_device)
            states.append(UserState(ObservableContext(geo, device), interests[i]))
        return states

    def _draw(self, probs: np.ndarray, rng) -> np.ndarray:
        c = probs.cumsum(axis=1)
        u = rng.random(probs.shape[0]) * c[:, -1]
        return np.minimum((c < u[:, None]).sum(axis=1), probs.shape[1] - 1)

    def _masked_probs(self, out_data: np.ndarray, excluded_mask: np.ndarray) -> np.ndarray:
        logits = out_data @ self._emb_all.T
        logits = np.where(excluded_mask, NEG, logits)
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def _sample_recurrent(self, cells, rng) -> list[list[int]]:
        n = cells.size
        h, c, out = self.initial_state(cells)
        excluded = np.zeros((n, self.corpus.n_artists + 1), dtype=bool)
        done = np.zeros(n, dtype=bool)
        interests: list[list[int]] = [[] for _ in range(n)]
        for k in range(self.config.k_max):
            picks = self._draw(self._masked_probs(out.data, excluded), rng)
            newly_done = picks == self.null_index
            for i in range(n):
                if done[i] or newly_done[i]:
                    continue
                interests[i].append(int(picks[i]))
            done |= newly_done
            if done.all():
                break
            # keep stepping the full batch; finished rows feed a frozen input
            step_artists = np.where(picks == self.null_index, 0, picks)
            excluded[np.arange(n)[~done], picks[~done]] = True
            counts = np.array([len(x) for x in interests])
            h, c, out = self.step(h, c, step_artists, np.minimum(counts, self.config.k_max))
        return interests

    def _sample_transformer(self, cells, rng) -> list[list[int]]:
        n = cells.size
        excluded = np.zeros((n, self.corpus.n_artists + 1), dtype=bool)
        done = np.zeros(n, dtype=bool)
        interests: list[list[int]] = [[] for _ in range(n)]
        artists_so_far: list[np.ndarray] = []
        for k in range(self.config.k_max):
            out = self._transformer_outputs(cells, artists_so_far)[:, -1, :]
            picks = self._draw(self._masked_probs(out.data, excluded), rng)
            newly_done = picks == self.null_index
            for i in range(n):
                if done[i] or newly_done[i]:
                    continue
                interests[i].append(int(picks[i]))
            done |= newly_done
            if done.all():
                break
            excluded[np.arange(n)[~done], picks[~done]] = True
            artists_so_far.append(np.where(picks == self.null_index, 0, picks))
        return interests

    def _transformer_outputs(self, cells: np.ndarray, steps: list[np.ndarray]) -> Tensor:
        """Causal transformer over [context token, consumed-artist tokens];
        returns readout outputs at every position."""
        n = cells.size
        width = self.config.hidden
        ctx = self.adapter(Tensor(one_hot(cells, self.n_cells)))
        toks = [ctx.reshape(n, 1, width)]
        for k, artists in enumerate(steps, start=1):
            x = np.concatenate(
                [self.corpus.embeddings[artists],
                 one_hot(np.full(n, min(k, self.config.k_max)), self.config.k_max + 1)],
                axis=-1,
            )
            toks.append(self.in_proj(Tensor(x)).reshape(n, 1, width))
        from .nn import concat
        seq = toks[0] if len(toks) == 1 else concat(toks, axis=1)
        pos = self.positions[np.arange(len(toks))]
        seq = seq + pos.reshape(1, len(toks), width)
        for layer in self.layers:
            seq = layer(seq, causal=True)
        flat = seq.reshape(n * len(toks), width)
        counts = np.tile(
            np.minimum(np.arange(len(toks)), self.config.k_max), n)
        return self._read_out(flat, counts).reshape(n, len(toks), self.corpus.dim)

    # -- persistence ---------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"kind": "stategen", "config": asdict(self.config),
                "prior": self.prior.tolist()}
        meta.update(extra_meta or {})
        self.store.save(path, meta)

    @classmethod
    def load(cls, path, corpus: EmbeddingSpace) -> "StateGenModel":
        store, meta = ParamStore.load(path)
        if meta.get("kind") != "stategen":
            raise StateGenError(f"not a state-generator checkpoint: {path}")
        config = StateGenConfig(**meta["config"])
        model = cls(corpus, config, prior=np.array(meta["prior"]))
        model.store.load_values_from(store)
        return model


# ---------------------------------------------------------------------------
# training


def _interest_batch(model: StateGenModel, records, reduce: bool = True):
    """Teacher-forced negative log-likelihood of a batch of interest lists;
    per-user sums when reduce is False."""
    k_max = model.config.k_max
    m = model.corpus.n_artists
    lengths = [min(len(r.state.interests), k_max) for r in records]
    n = len(records)
    t_steps = max(lengths) + 1
    cells = np.array([model.context_cell(r.state.context) for r in records])

    per_user = Tensor(np.zeros(n))
    if model.config.backend == "recurrent":
        h, c, out = model.initial_state(cells)
    else:
        steps = []
        for k in range(1, t_steps):
            steps.append(np.array([
                r.state.interests[k - 1] if k - 1 < lengths[i] else 0
                for i, r in enumerate(records)
            ]))
        outputs = model._transformer_outputs(cells, steps)

    excluded = np.zeros((n, m + 1), dtype=bool)
    for k in range(t_steps):
        targets = np.zeros(n, dtype=np.int64)
        valid = np.zeros(n)
        for i, r in enumerate(records):
            if k < lengths[i]:
                targets[i] = r.state.interests[k]
                valid[i] = 1.0
            elif k == lengths[i]:
                targets[i] = model.null_index
                valid[i] = 1.0
        if model.config.backend == "transformer":
            out = outputs[:, k, :]
        logits = model.logits(out) + Tensor(np.where(excluded, NEG, 0.0))
        logp = gather(log_softmax(logits, axis=-1), targets)
        per_user = per_user - logp * Tensor(valid)
        if k + 1 < t_steps:
            consumed = targets.copy()
            step_valid = valid == 1.0
            consumed[consumed == model.null_index] = 0
            excluded[np.arange(n)[step_valid & (targets != model.null_index)],
                     targets[step_valid & (targets != model.null_index)]] = True
            if model.config.backend == "recurrent":
                counts = np.minimum(np.array([min(k + 1, l) for l in lengths]), k_max)
                h, c, out = model.step(h, c, consumed, counts)
    if not reduce:
        return per_user
    return per_user.sum() / float(n)


def per_user_nll(model: StateGenModel, records, batch_size: int = 512) -> np.ndarray:
    """Per-user interest NLL (prior excluded)."""
    out = []
    with no_grad():
        for i in range(0, len(records), batch_size):
            out.append(_interest_batch(model, records[i:i + batch_size],
                                       reduce=False).data)
    return np.concatenate(out) if out else np.zeros(0)


def dataset_nll(model: StateGenModel, records, batch_size: int = 512) -> float:
    """Mean per-user interest NLL (prior excluded)."""
    if not records:
        return 0.0
    return float(per_user_nll(model, records, batch_size).mean())


def _calibrate_termination(model: StateGenModel, records, sweeps: int = 2,
                           max_records: int = 4000) -> None:
    """Exact coordinate ascent on the count-skip null scales.

    Gradient steps on the shared readout cannot keep the null logit in
    step with the artist logsumexp, which keeps sharpening throughout
    training, so the end-of-list hazard lags the data. Re-solving the
    per-count null scale c_k against the current artist logits is a
    partial M-step of the same likelihood and pins the teacher-forced
    hazard to its empirical (conditional) rate.
    """
    if model.config.backend != "recurrent":
        return
    records = records[:max_records]
    hidden = model.config.hidden
    k_max = model.config.k_max
    null = model.corpus.null_embedding
    for _ in range(sweeps):
        per_count: dict[int, list] = {k: [] for k in range(k_max + 1)}
        with no_grad():
            for start in range(0, len(records), 512):
                chunk = records[start:start + 512]
                lengths = [min(len(r.state.interests), k_max) for r in chunk]
                cells = np.array([model.context_cell(r.state.context) for r in chunk])
                h, c, out = model.initial_state(cells)
                excluded = np.zeros((len(chunk), model.corpus.n_artists), dtype=bool)
                for k in range(max(lengths) + 1):
                    logits = out.data @ model._emb_all.T
                    logits_a = np.where(excluded, NEG, logits[:, :-1])
                    lse = _row_logsumexp(logits_a)
                    c_k = model.readout.weights[0].data[hidden + k] @ null
                    for i, r in enumerate(chunk):
                        if k > lengths[i]:
                            continue
                        y = 1.0 if k == lengths[i] else 0.0
                        per_count[k].append((logits[i, -1] - c_k, lse[i], y))
                    consumed = np.array([
                        r.state.interests[k] if k < lengths[i] else 0
                        for i, r in enumerate(chunk)
                    ])
                    live = np.array([k < lengths[i] for i in range(len(chunk))])
                    excluded[np.arange(len(chunk))[live], consumed[live]] = True
                    if k < max(lengths):
                        h, c, out = model.step(
                            h, c, consumed,
                            np.minimum(np.array([min(k + 1, l) for l in lengths]), k_max))
        for k, rows_k in per_count.items():
            if not rows_k:
                continue
            base, lse, y = (np.array(v) for v in zip(*rows_k))
            target = float(np.clip(y.mean(), 1e-4, 1 - 1e-4))
            margin = base - lse

            def mean_hazard(c):
                z = np.clip(c + margin, -35.0, 35.0)
                return (1.0 / (1.0 + np.exp(-z))).mean()

            lo, hi = -40.0, 40.0
            for _ in range(60):  # bisection on the monotone mean-hazard curve
                mid = 0.5 * (lo + hi)
                if mean_hazard(mid) < target:
                    lo = mid
                else:
                    hi = mid
            model.readout.weights[0].data[hidden + k] = 0.5 * (lo + hi) * null


def _row_logsumexp(x: np.ndarray) -> np.ndarray:
    mx = x.max(axis=1, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=1, keepdims=True))).reshape(-1)


def train_stategen(logs: LogDataset, corpus: EmbeddingSpace,
                   config: StateGenConfig | None = None,
                   eval_lengths: np.ndarray | None = None):
    """Fit prior and interest model by MLE (teacher forcing); returns
    (model, history). History rows carry per-epoch train/held-out NLL and,
    when `eval_lengths` is given, the Wasserstein distance between
    generated and reference interest-length distributions."""
    from .metrics import wasserstein_1d

    config = config or StateGenConfig()
    prior = fit_context_prior(logs, corpus.n_geo, corpus.n_device)
    model = StateGenModel(corpus, config, prior=prior)
    records = list(logs)
    n_hold = int(len(records) * config.heldout_fraction)
    train_recs = records[:len(records) - n_hold]
    hold_recs = records[len(records) - n_hold:]
    if not train_recs:
        raise StateGenError("no training records")
    optimizer = Adam(model.store, lr=config.lr)
    order_rng = rng_for(config.seed, "stategen-batches")
    history: list[dict] = []

    def evaluate(epoch: int, train_nll: float):
        row = {"epoch": epoch, "train_nll": train_nll}
        if hold_recs:
            nlls = per_user_nll(model, hold_recs)
            row["heldout_nll"] = float(nlls.mean())
            # histogram summary of per-user log-probabilities
            row["heldout_logprob_quantiles"] = [
                float(-q) for q in np.percentile(nlls, [90, 50, 10])]
        if eval_lengths is not None:
            states = model.sample_states(config.eval_samples, config.seed + 7000 + epoch)
            gen_lengths = np.array([len(s.interests) for s in states])
            row["wasserstein_interest_count"] = wasserstein_1d(
                gen_lengths, eval_lengths, seed=config.seed)
        history.append(row)

    evaluate(0, dataset_nll(model, train_recs))
    for epoch in range(1, config.epochs + 1):
        optimizer.lr = config.lr * config.lr_decay ** (epoch - 1)
        perm = order_rng.permutation(len(train_recs))
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            batch = [train_recs[j] for j in perm[start:start + config.batch_size]]
            optimizer.zero_grad()
            loss = _interest_batch(model, batch)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"state-generator loss diverged at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
        _calibrate_termination(model, train_recs)
        evaluate(epoch, total / len(train_recs))
    return model, history
