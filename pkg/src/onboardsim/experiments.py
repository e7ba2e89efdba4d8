"""Reproducible experiment pipelines: world generation, log collection,
model training, counterfactual simulation, trade-off sweeps, ordering
studies, and the isolation audit."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig
from .metrics import Cdf, CiEstimate, PolicyResult, percent_change_ci, policy_ordering
from .policies import (
    BaselinePolicyFactory, DiversityPolicyFactory, PctrModel,
    ScoredPolicyFactory, TurnFilter, coverage_value, fit_pctr,
)
from .rng import derive_seed
from .sessiongen import SessionGenConfig, SessionGenModel, rollout_sessions, train_sessiongen
from .simsvc import (
    OnboardingService, OverlayStore, ProductionStore, run_campaign,
    state_sampler_from_model,
)
from .stategen import StateGenConfig, StateGenModel, train_stategen
from .world import (
    EmbeddingSpace, LogDataset, WorldConfig, collect_logs, sample_corpus,
    sample_user, save_population,
)


class DataError(RuntimeError):
    """A pipeline stage is missing its upstream artifact."""


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def corpus(self): return self.root / "corpus.json"
    @property
    def population(self): return self.root / "population.jsonl"
    @property
    def train_logs(self): return self.root / "logs" / "train.jsonl"
    @property
    def heldout_logs(self): return self.root / "logs" / "heldout.jsonl"
    @property
    def stategen_ckpt(self): return self.root / "models" / "stategen.ckpt"
    @property
    def sessiongen_ckpt(self): return self.root / "models" / "sessiongen.ckpt"
    @property
    def pctr_ckpt(self): return self.root / "models" / "pctr.json"
    @property
    def sweep_pctr_ckpt(self): return self.root / "models" / "pctr_sweep.json"
    @property
    def history(self): return self.root / "models" / "history.json"
    @property
    def reports(self): return self.root / "reports"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise DataError(f"missing {path.name}; run `{producer}` first")
        return path


def workspace_for(config: ExperimentConfig) -> Workspace:
    ws = Workspace(Path(config.out_dir))
    for sub in ("logs", "models", "reports"):
        (ws.root / sub).mkdir(parents=True, exist_ok=True)
    return ws


# ---------------------------------------------------------------------------
# config adapters


def world_config(config: ExperimentConfig) -> WorldConfig:
    try:
        return WorldConfig(**config.world)
    except TypeError as exc:
        raise ConfigError(f"bad world overrides: {exc}") from None


def stategen_config(config: ExperimentConfig) -> StateGenConfig:
    base = {"seed": derive_seed(config.seed, "stategen")}
    base.update(config.stategen)
    try:
        return StateGenConfig(**base)
    except TypeError as exc:
        raise ConfigError(f"bad stategen overrides: {exc}") from None


def sessiongen_config(config: ExperimentConfig) -> SessionGenConfig:
    base = {"seed": derive_seed(config.seed, "sessiongen")}
    base.update(config.sessiongen)
    try:
        return SessionGenConfig(**base)
    except TypeError as exc:
        raise ConfigError(f"bad sessiongen overrides: {exc}") from None


def policy_spec_id(spec) -> str:
    if isinstance(spec, str):
        return spec
    if spec.get("type") == "scored":
        return spec.get("id") or f"score-{spec.get('lam', 0):g}"
    return spec.get("id") or spec["type"]


def build_policy(config: ExperimentConfig, spec, corpus: EmbeddingSpace,
                 pctr: PctrModel | None = None):
    """Policy factory from a config entry: a name or a {type, ...} block."""
    if isinstance(spec, str):
        spec = {"type": spec}
    kind = spec.get("type")
    n_insert = spec.get("n_insert", config.n_insert)
    if kind == "baseline":
        return BaselinePolicyFactory(corpus, n_insert=n_insert)
    if kind == "diversity":
        return DiversityPolicyFactory(corpus, n_insert=n_insert)
    if kind in ("pctr", "scored"):
        if pctr is None:
            raise DataError(f"policy {kind!r} needs a fitted pCTR model; run `train` first")
        lam = float(spec.get("lam", 0.0)) if kind == "scored" else 0.0
        return ScoredPolicyFactory(corpus, pctr, lam, policy_id=policy_spec_id(spec))
    raise ConfigError(f"unknown policy type {kind!r}")


# ---------------------------------------------------------------------------
# output helpers


def write_csv(path: Path, columns: list[str], rows: list[list], stamp: dict) -> None:
    lines = ["# " + " ".join(f"{k}={v}" for k, v in sorted(stamp.items()))]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_json(path: Path, payload: dict, stamp: dict) -> None:
    path.write_text(json.dumps({**stamp, **payload}, sort_keys=True, indent=1) + "\n")


def save_pctr(path: Path, model: PctrModel, stamp: dict) -> None:
    save_json(path, {
        "kind": "pctr",
        "weights": model.weights.tolist(),
        "intercept": model.intercept,
        "filter_tag": model.filter_tag,
        "heldout_aucloss": model.heldout_aucloss,
    }, stamp)


def load_pctr(path: Path) -> PctrModel:
    payload = json.loads(path.read_text())
    if payload.get("kind") != "pctr":
        raise DataError(f"not a pCTR checkpoint: {path}")
    return PctrModel(np.array(payload["weights"]), payload["intercept"],
                     payload["filter_tag"], payload["heldout_aucloss"])


# ---------------------------------------------------------------------------
# arm summaries


def arm_arrays(dataset: LogDataset) -> dict:
    return {
        "selections": dataset.selection_counts().astype(np.float64),
        "impressions": dataset.session_lengths().astype(np.float64),
    }


def compare_arms(policy_id: str, treatment: dict, control: dict,
                 n_boot: int, seed: int) -> PolicyResult:
    return PolicyResult(
        policy_id=policy_id,
        selections=percent_change_ci(
            treatment["selections"], control["selections"], n_boot,
            derive_seed(seed, "ci-sel", policy_id)),
        impressions=percent_change_ci(
            treatment["impressions"], control["impressions"], n_boot,
            derive_seed(seed, "ci-imp", policy_id)),
    )


# ---------------------------------------------------------------------------
# pipeline stages


def cmd_gen_world(config: ExperimentConfig) -> EmbeddingSpace:
    ws = workspace_for(config)
    corpus = sample_corpus(
        derive_seed(config.seed, "corpus"), config.n_artists, config.dim,
        config.n_genres)
    corpus.save(ws.corpus, meta=config.stamp())
    wc = world_config(config)
    pop_seed = derive_seed(config.seed, "population")
    users = [sample_user(corpus, i, pop_seed, wc)
             for i in range(min(config.n_train_users, 1000))]
    save_population(users, ws.population, meta=config.stamp())
    config.to_file(ws.root / "config.json")
    return corpus


def _load_corpus(ws: Workspace) -> EmbeddingSpace:
    ws.require(ws.corpus, "gen-world")
    return EmbeddingSpace.load(ws.corpus)


def cmd_collect(config: ExperimentConfig):
    ws = workspace_for(config)
    corpus = _load_corpus(ws)
    wc = world_config(config)
    factories = [build_policy(config, name, corpus) for name in config.behavior_policies]
    train = collect_logs(corpus, factories, config.n_train_users,
                         derive_seed(config.seed, "collect-train"), wc)
    train.meta.update(config.stamp())
    train.save(ws.train_logs)
    heldout = collect_logs(corpus, factories, config.n_heldout_users,
                           derive_seed(config.seed, "collect-heldout"), wc)
    heldout.meta.update(config.stamp())
    heldout.save(ws.heldout_logs)
    return train, heldout


def cmd_train(config: ExperimentConfig) -> dict:
    ws = workspace_for(config)
    corpus = _load_corpus(ws)
    train = LogDataset.load(ws.require(ws.train_logs, "collect"))
    heldout = LogDataset.load(ws.require(ws.heldout_logs, "collect"))
    eval_lengths = np.array([len(r.state.interests) for r in heldout])
    state_model, state_history = train_stategen(
        train, corpus, stategen_config(config), eval_lengths=eval_lengths)
    state_model.save(ws.stategen_ckpt, extra_meta=config.stamp())
    session_model, session_history = train_sessiongen(
        train, corpus, sessiongen_config(config))
    session_model.save(ws.sessiongen_ckpt, extra_meta=config.stamp())
    pctr = fit_pctr(train, corpus, TurnFilter(**config.pctr_filter))
    save_pctr(ws.pctr_ckpt, pctr, config.stamp())
    sweep_pctr = fit_pctr(
        train, corpus, TurnFilter(**{**config.pctr_filter, **config.sweep_pctr_filter}))
    save_pctr(ws.sweep_pctr_ckpt, sweep_pctr, config.stamp())
    history = {"stategen": state_history, "sessiongen": session_history,
               "pctr_heldout_aucloss": pctr.heldout_aucloss,
               "sweep_pctr_heldout_aucloss": sweep_pctr.heldout_aucloss}
    save_json(ws.history, history, config.stamp())
    return history


def load_models(config: ExperimentConfig):
    ws = workspace_for(config)
    corpus = _load_corpus(ws)
    state_model = StateGenModel.load(ws.require(ws.stategen_ckpt, "train"), corpus)
    session_model = SessionGenModel.load(ws.require(ws.sessiongen_ckpt, "train"), corpus)
    pctr = load_pctr(ws.require(ws.pctr_ckpt, "train"))
    return corpus, state_model, session_model, pctr


def load_sweep_pctr(config: ExperimentConfig) -> PctrModel:
    ws = workspace_for(config)
    return load_pctr(ws.require(ws.sweep_pctr_ckpt, "train"))


def build_service(config: ExperimentConfig, corpus: EmbeddingSpace,
                  state_model: StateGenModel, policy_factory) -> OnboardingService:
    production = ProductionStore()
    production.seed_demo_accounts(corpus, config.n_demo_accounts,
                                  derive_seed(config.seed, "demo-accounts"))
    return OnboardingService(
        corpus, policy_factory, state_sampler_from_model(state_model),
        production=production, overlay=OverlayStore(), read_mode=config.read_mode)


def cmd_simulate(config: ExperimentConfig, policy_spec) -> dict:
    """Replay one test policy and the control against the trained models
    through the full service layer; emits the per-policy report."""
    ws = workspace_for(config)
    corpus, state_model, session_model, pctr = load_models(config)
    policy_id = policy_spec_id(policy_spec)
    arms = {}
    for label, spec in (("treatment", policy_spec), ("control", config.control_policy)):
        factory = build_policy(config, spec, corpus, pctr)
        service = build_service(config, corpus, state_model, factory)
        before = service.production.content_hash()
        sim_logs = run_campaign(
            service, session_model, config.n_simulate_users,
            derive_seed(config.seed, "simulate", policy_id),
            policy_id=policy_spec_id(spec) if label == "treatment" else "control",
        )
        after = service.production.content_hash()
        if before != after:
            raise DataError("production store mutated during simulation")
        arms[label] = sim_logs
    treatment = arms["treatment"]
    result = compare_arms(policy_id, arm_arrays(treatment), arm_arrays(arms["control"]),
                          config.n_bootstrap, config.seed)
    treatment.meta.update(config.stamp())
    treatment.save(ws.root / "logs" / f"sim_{policy_id}.jsonl")
    lengths = treatment.session_lengths()
    selections = treatment.selection_counts()
    report = {
        "policy": policy_id,
        "n_users": len(treatment),
        "mean_selections": float(selections.mean()),
        "mean_impressions": float(lengths.mean()),
        "ctr": float(selections.sum() / max(lengths.sum(), 1)),
        "selections_change_pct": result.selections.point,
        "selections_ci": [result.selections.lower, result.selections.upper],
        "impressions_change_pct": result.impressions.point,
        "impressions_ci": [result.impressions.lower, result.impressions.upper],
    }
    write_csv(
        ws.reports / f"simulate_{policy_id}.csv",
        ["policy", "users", "mean_selections", "mean_impressions", "ctr",
         "selections_change_pct", "sel_ci_lo", "sel_ci_hi",
         "impressions_change_pct", "imp_ci_lo", "imp_ci_hi"],
        [[policy_id, len(treatment), report["mean_selections"],
          report["mean_impressions"], report["ctr"],
          result.selections.point, result.selections.lower, result.selections.upper,
          result.impressions.point, result.impressions.lower, result.impressions.upper]],
        config.stamp(),
    )
    for metric, values in (("session_length", lengths), ("selections", selections)):
        cdf = Cdf.from_samples(values)
        write_csv(ws.reports / f"cdf_{policy_id}_{metric}.csv",
                  ["rank", "value"], [list(r) for r in cdf.dump()], config.stamp())
    return report


def _simulate_arm(corpus, state_model, session_model, factory, n_users: int,
                  states=None, seed: int = 0) -> LogDataset:
    """Fast-path model rollout (no service layer) used by sweeps/studies."""
    if states is None:
        states = state_model.sample_states(n_users, derive_seed(seed, "arm-states"))
    sessions = rollout_sessions(session_model, states, factory, seed)
    ds = LogDataset(seed, meta={"policy": factory.policy_id})
    from .world import LogRecord
    for i, (state, session) in enumerate(zip(states, sessions)):
        ds.append(LogRecord(user_id=i, policy_id=factory.policy_id, state=state,
                            session=session, seed=seed, simulated=True))
    return ds


def cmd_sweep(config: ExperimentConfig, lambdas=None) -> list[dict]:
    """Trade-off sweep: each lambda candidate against the production-style
    control (lambda = sweep_control_lambda), common users across arms."""
    ws = workspace_for(config)
    corpus, state_model, session_model, _ = load_models(config)
    sweep_pctr = load_sweep_pctr(config)
    lambdas = list(lambdas if lambdas is not None else config.sweep_lambdas)
    seed = derive_seed(config.seed, "sweep")
    states = state_model.sample_states(config.sweep_users, derive_seed(seed, "states"))
    control_factory = ScoredPolicyFactory(
        corpus, sweep_pctr, config.sweep_control_lambda,
        policy_id=f"control-{config.sweep_control_lambda:g}")
    control = _simulate_arm(corpus, state_model, session_model, control_factory,
                            config.sweep_users, states=states, seed=seed)
    control_arrays = arm_arrays(control)
    rows, out = [], []
    for lam in lambdas:
        factory = ScoredPolicyFactory(corpus, sweep_pctr, lam)
        arm = _simulate_arm(corpus, state_model, session_model, factory,
                            config.sweep_users, states=states, seed=seed)
        result = compare_arms(factory.policy_id, arm_arrays(arm), control_arrays,
                              config.n_bootstrap, derive_seed(seed, "ci", lam))
        coverage = float(np.mean([
            coverage_value(r.session.artists, corpus) for r in arm]))
        row = {
            "lambda": lam,
            "selections_change_pct": result.selections.point,
            "sel_ci": [result.selections.lower, result.selections.upper],
            "impressions_change_pct": result.impressions.point,
            "imp_ci": [result.impressions.lower, result.impressions.upper],
            "mean_shown_coverage": coverage,
        }
        out.append(row)
        rows.append([lam, result.selections.point, result.selections.lower,
                     result.selections.upper, result.impressions.point,
                     result.impressions.lower, result.impressions.upper, coverage])
    write_csv(ws.reports / "sweep.csv",
              ["lambda", "selections_change_pct", "sel_ci_lo", "sel_ci_hi",
               "impressions_change_pct", "imp_ci_lo", "imp_ci_hi",
               "mean_shown_coverage"],
              rows, config.stamp())
    return out


def oracle_arm(config: ExperimentConfig, corpus: EmbeddingSpace, factory,
               n_users: int, seed: int) -> LogDataset:
    return collect_logs(corpus, [factory], n_users, seed, world_config(config))


def _ordering_from_points(points: dict[str, float]) -> str:
    ranked = sorted(points, key=lambda pid: (-points[pid], pid))
    return " > ".join(ranked)


def cmd_ordering_study(config: ExperimentConfig) -> dict:
    """Small-experiment instability study: three launch-data partitions vs
    the full launch vs common-users simulation, replicated with fresh seeds."""
    ws = workspace_for(config)
    corpus, state_model, session_model, pctr = load_models(config)
    sweep_pctr = load_sweep_pctr(config)
    lambdas = list(config.ordering_lambdas)
    arm_ids = [f"score-{lam:g}" for lam in lambdas]
    n_sim = config.ordering_sim_users
    sel_rows, imp_rows, per_rep = [], [], []

    # one "launch" run: all arms plus control share the launch population
    # round-robin, exactly like ordinary log collection
    arm_factories = [
        ScoredPolicyFactory(corpus, sweep_pctr, lam, policy_id=arm_id)
        for lam, arm_id in zip(lambdas, arm_ids)
    ]
    control_factory = build_policy(config, config.control_policy, corpus, pctr)

    for rep in range(config.ordering_reps):
        rep_seed = derive_seed(config.seed, "ordering", rep)
        launch_logs = collect_logs(
            corpus, arm_factories + [control_factory], config.n_launch_users,
            derive_seed(rep_seed, "launch"), world_config(config))
        launch: dict[str, dict] = {}
        launch_parts: dict[str, list[dict]] = {}
        user_thirds = np.array_split(np.arange(config.n_launch_users), 3)
        bounds = [(part[0], part[-1]) for part in user_thirds]
        for arm_id in arm_ids + [control_factory.policy_id]:
            records = launch_logs.by_policy(arm_id)
            arrays = {
                "selections": np.array([r.session.n_selections for r in records], dtype=float),
                "impressions": np.array([len(r.session) for r in records], dtype=float),
                "user_ids": np.array([r.user_id for r in records]),
            }
            launch[arm_id] = arrays
            launch_parts[arm_id] = []
            for lo, hi in bounds:
                part = (arrays["user_ids"] >= lo) & (arrays["user_ids"] <= hi)
                launch_parts[arm_id].append(
                    {k: v[part] for k, v in arrays.items() if k != "user_ids"})

        # simulation arms share users and RNG streams (common random numbers)
        sim_states = state_model.sample_states(n_sim, derive_seed(rep_seed, "sim-states"))
        sim: dict[str, dict] = {}
        for factory, arm_id in zip(arm_factories, arm_ids):
            sim[arm_id] = arm_arrays(_simulate_arm(
                corpus, state_model, session_model, factory, n_sim,
                states=sim_states, seed=derive_seed(rep_seed, "sim-rollout")))
        sim[control_factory.policy_id] = arm_arrays(_simulate_arm(
            corpus, state_model, session_model,
            build_policy(config, config.control_policy, corpus, pctr), n_sim,
            states=sim_states, seed=derive_seed(rep_seed, "sim-rollout")))
        control_id = control_factory.policy_id
        sources: dict[str, dict[str, dict]] = {}
        for j in range(3):
            sources[f"LE{j + 1}"] = {arm: launch_parts[arm][j] for arm in launch_parts}
        sources["launch"] = launch
        sources["sim"] = sim

        orderings: dict[str, dict[str, str]] = {}
        for source, arms in sources.items():
            for metric, rows in (("selections", sel_rows), ("impressions", imp_rows)):
                points = {}
                for arm_id in arm_ids:
                    ci = percent_change_ci(
                        arms[arm_id][metric], arms[control_id][metric],
                        config.n_bootstrap,
                        derive_seed(rep_seed, "ci", source, arm_id, metric))
                    points[arm_id] = ci.point
                    rows.append([rep, source, arm_id, float(np.mean(arms[arm_id][metric])),
                                 ci.point, ci.lower, ci.upper])
                orderings.setdefault(metric, {})[source] = _ordering_from_points(points)

        launch_sel_order = orderings["selections"]["launch"]
        sim_matches = orderings["selections"]["sim"] == launch_sel_order
        le_disagreements = sum(
            orderings["selections"][f"LE{j + 1}"] != launch_sel_order for j in range(3))
        per_rep.append({
            "rep": rep,
            "launch_ordering": launch_sel_order,
            "sim_ordering": orderings["selections"]["sim"],
            "le_orderings": [orderings["selections"][f"LE{j + 1}"] for j in range(3)],
            "sim_matches_launch": bool(sim_matches),
            "n_partitions_disagreeing": int(le_disagreements),
        })

    for name, rows in (("ordering_selections", sel_rows), ("ordering_impressions", imp_rows)):
        write_csv(ws.reports / f"{name}.csv",
                  ["rep", "source", "policy", "mean", "change_pct", "ci_lo", "ci_hi"],
                  rows, config.stamp())
    summary = {
        "per_rep": per_rep,
        "n_sim_matches_launch": sum(r["sim_matches_launch"] for r in per_rep),
        "n_reps_with_partition_disagreement": sum(
            1 for r in per_rep if r["n_partitions_disagreeing"] >= 1),
        "n_reps": config.ordering_reps,
    }
    save_json(ws.reports / "ordering_summary.json", summary, config.stamp())
    return summary


def cmd_audit_isolation(config: ExperimentConfig, n_sessions: int = 1000) -> dict:
    """Run a campaign and verify the isolation requirements hold."""
    ws = workspace_for(config)
    corpus, state_model, session_model, pctr = load_models(config)
    factory = build_policy(config, config.test_policies[0], corpus, pctr)
    service = build_service(config, corpus, state_model, factory)
    before = service.production.content_hash()
    run_campaign(service, session_model, n_sessions,
                 derive_seed(config.seed, "audit"), policy_id="audit")
    report = service.isolation_report()
    audit = {
        "production_hash_before": before,
        "production_hash_after": report["production_hash"],
        "production_unchanged": before == report["production_hash"],
        "overlay_keys_in_production": report["overlay_keys_in_production"],
        "keyspaces_disjoint": not report["overlay_keys_in_production"],
        "n_test_accounts": report["n_test_accounts"],
        "n_sessions": n_sessions,
    }
    audit["passed"] = audit["production_unchanged"] and audit["keyspaces_disjoint"]
    save_json(ws.reports / "isolation_audit.json", audit, config.stamp())
    return audit


def run_pipeline(config: ExperimentConfig) -> dict:
    """gen-world -> collect -> train -> simulate each test policy -> report."""
    cmd_gen_world(config)
    cmd_collect(config)
    history = cmd_train(config)
    reports = [cmd_simulate(config, spec) for spec in config.test_policies]
    results = [
        PolicyResult(
            r["policy"],
            CiEstimate(r["selections_change_pct"], *r["selections_ci"],
                       r["n_users"], r["n_users"]),
            CiEstimate(r["impressions_change_pct"], *r["impressions_ci"],
                       r["n_users"], r["n_users"]),
        )
        for r in reports
    ]
    ws = workspace_for(config)
    ordering = policy_ordering(results) if results else {}
    save_json(ws.reports / "summary.json",
              {"reports": reports, "ordering": ordering}, config.stamp())
    return {"history": history, "reports": reports, "ordering": ordering}
