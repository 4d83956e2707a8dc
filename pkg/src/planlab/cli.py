"""Experiment orchestration: generate artifacts, train, evaluate, report.

One command is one process. Configs are JSON; flags override config fields
via dotted paths. Every output file embeds the format version and the digest
of the resolved config, and reruns with identical configs produce
byte-identical metrics.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import os
import random
import statistics
import sys
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import agent as agent_mod
from . import catalog as catalog_mod
from . import costmodel, expert, report, trainers
from .agent import ValueAgent, env_fingerprint, load_checkpoint, save_checkpoint
from .catalog import CatalogConfig, WorkloadConfig
from .costmodel import LatencyModelConfig, latency_from_true_cost
from .env import Env, EnvConfig, RewardSpec, REWARD_COST, REWARD_LATENCY
from .errors import ConfigError, ContractError, PlanLabError
from .metrics import write_metrics_csv
from .serialize import digest, dump_versioned, file_digest
from .trainers import EpsilonSchedule, SlipDetector

TRAINER_KINDS = ("vanilla", "naive-latency", "lfd", "bootstrap",
                 "curriculum:pipeline", "curriculum:relations",
                 "curriculum:hybrid")

CORPUS_SEED_OFFSET = 1_000_000  # keeps corpus execution seeds off episode seeds


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


# --- configuration -----------------------------------------------------------


@dataclass
class ExperimentConfig:
    raw: dict
    output_dir: str
    catalog: CatalogConfig
    workload: WorkloadConfig
    latency_model: LatencyModelConfig
    env_stages: int
    env_max_relations: int
    agent_hidden: list[int]
    agent_learning_rate: float
    agent_momentum: float
    agent_normalizer_warmup: int
    epsilon: EpsilonSchedule
    trainer_kind: str
    trainer: dict
    seeds: dict[str, int]

    @property
    def config_digest(self) -> str:
        return digest(self.raw)


def _fetch(section: dict, path: str, key: str, kind, default=None,
           required: bool = False):
    if key not in section:
        if required:
            raise ConfigError(f"missing required field {path}.{key}")
        return default
    value = section[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise ConfigError(
            f"field {path}.{key} must be {kind.__name__}, got {type(value).__name__}")
    return value


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name)
    if not isinstance(value, dict):
        raise ConfigError(f"missing or invalid section {name!r}")
    return value


def parse_experiment_config(doc: dict) -> ExperimentConfig:
    output_dir = _fetch(doc, "", "output_dir", str, required=True)

    cat = _section(doc, "catalog")
    catalog_cfg = CatalogConfig(
        relation_count=_fetch(cat, "catalog", "relation_count", int, required=True),
        min_cardinality=_fetch(cat, "catalog", "min_cardinality", int, 100),
        max_cardinality=_fetch(cat, "catalog", "max_cardinality", int, 1_000_000),
        attributes_per_relation=_fetch(cat, "catalog", "attributes_per_relation", int, 3),
        index_density=_fetch(cat, "catalog", "index_density", float, 0.5),
        edge_density=_fetch(cat, "catalog", "edge_density", float, 0.25),
    )
    try:
        catalog_cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"catalog: {exc}") from exc

    wl = _section(doc, "workload")
    workload_cfg = WorkloadConfig(
        query_count=_fetch(wl, "workload", "query_count", int, required=True),
        min_relations=_fetch(wl, "workload", "min_relations", int, 1),
        max_relations=_fetch(wl, "workload", "max_relations", int, 4),
        selection_density=_fetch(wl, "workload", "selection_density", float, 0.5),
        aggregate_probability=_fetch(wl, "workload", "aggregate_probability", float, 0.25),
    )

    lm = doc.get("latency_model", {})
    if not isinstance(lm, dict):
        raise ConfigError("section latency_model must be an object")
    model_cfg = LatencyModelConfig(
        alpha=_fetch(lm, "latency_model", "alpha", float, 0.001),
        gamma=_fetch(lm, "latency_model", "gamma", float, 1.1),
        noise_sigma=_fetch(lm, "latency_model", "noise_sigma", float, 0.05),
        error_sigma=_fetch(lm, "latency_model", "error_sigma", float, 0.5),
        heavy_error_probability=_fetch(lm, "latency_model",
                                       "heavy_error_probability", float, 0.1),
        heavy_error_sigma=_fetch(lm, "latency_model", "heavy_error_sigma", float, 2.0),
    )
    try:
        model_cfg.validate()
    except ContractError as exc:
        raise ConfigError(f"latency_model: {exc}") from exc

    env_sec = _section(doc, "env")
    env_stages = _fetch(env_sec, "env", "enabled_stages", int, required=True)
    env_max_relations = _fetch(env_sec, "env", "max_relations", int, required=True)
    if not 1 <= env_stages <= 4:
        raise ConfigError("field env.enabled_stages must be in 1..4")
    if env_max_relations < workload_cfg.max_relations:
        raise ConfigError("field env.max_relations must cover the workload's "
                          "max_relations")

    ag = doc.get("agent", {})
    if not isinstance(ag, dict):
        raise ConfigError("section agent must be an object")
    hidden = _fetch(ag, "agent", "hidden", list, [128, 64])
    if not hidden or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError("field agent.hidden must be a list of positive integers")
    epsilon = EpsilonSchedule(
        start=_fetch(ag, "agent", "epsilon_start", float, 0.2),
        end=_fetch(ag, "agent", "epsilon_end", float, 0.01),
        fraction=_fetch(ag, "agent", "epsilon_fraction", float, 0.5),
    )

    tr = _section(doc, "trainer")
    trainer_kind = _fetch(tr, "trainer", "kind", str, required=True)
    if trainer_kind not in TRAINER_KINDS:
        raise ConfigError(f"field trainer.kind must be one of {TRAINER_KINDS}")

    seeds_sec = _section(doc, "seeds")
    seeds = {}
    for name in ("catalog", "workload", "model", "agent", "execution"):
        seeds[name] = _fetch(seeds_sec, "seeds", name, int, required=True)

    return ExperimentConfig(
        raw=doc,
        output_dir=output_dir,
        catalog=catalog_cfg,
        workload=workload_cfg,
        latency_model=model_cfg,
        env_stages=env_stages,
        env_max_relations=env_max_relations,
        agent_hidden=list(hidden),
        agent_learning_rate=_fetch(ag, "agent", "learning_rate", float, 1e-3),
        agent_momentum=_fetch(ag, "agent", "momentum", float, 0.9),
        agent_normalizer_warmup=_fetch(ag, "agent", "normalizer_warmup", int, 64),
        epsilon=epsilon,
        trainer_kind=trainer_kind,
        trainer=tr,
        seeds=seeds,
    )


def load_experiment_config(path: str, overrides: list[str],
                           output_dir: Optional[str] = None) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for item in overrides:
        _apply_override(doc, item)
    if output_dir is not None:
        doc["output_dir"] = output_dir
    return parse_experiment_config(doc)


def _apply_override(doc: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    dotted, raw_value = item.split("=", 1)
    try:
        value = json.loads(raw_value)
    except json.JSONDecodeError:
        value = raw_value
    node = doc
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path {dotted!r} crosses a non-object")
    node[parts[-1]] = value


# --- artifact plumbing ---------------------------------------------------------


def _artifact_paths(output_dir: str) -> dict[str, str]:
    return {
        "catalog": os.path.join(output_dir, "catalog.json"),
        "workload": os.path.join(output_dir, "workload.json"),
        "latency_model": os.path.join(output_dir, "latency_model.json"),
    }


def cmd_generate(config: ExperimentConfig) -> dict:
    """Write catalog, workload and latency-model files plus a digest manifest."""
    os.makedirs(config.output_dir, exist_ok=True)
    catalog = catalog_mod.generate_catalog(config.catalog, config.seeds["catalog"])
    workload = catalog_mod.generate_workload(catalog, config.workload,
                                             config.seeds["workload"])
    model = costmodel.build_latency_model(catalog, config.latency_model,
                                          config.seeds["model"])
    paths = _artifact_paths(config.output_dir)
    catalog_mod.save_catalog(catalog, paths["catalog"])
    catalog_mod.save_workload(workload, paths["workload"])
    costmodel.save_latency_model(model, paths["latency_model"])

    manifest = {
        "config_digest": config.config_digest,
        "artifacts": {name: {"path": os.path.basename(path),
                             "sha256": file_digest(path)}
                      for name, path in paths.items()},
    }
    dump_versioned(os.path.join(config.output_dir, "manifest.json"),
                   "manifest", manifest)
    return manifest


def _load_artifacts(config: ExperimentConfig):
    paths = _artifact_paths(config.output_dir)
    missing = [p for p in paths.values() if not os.path.exists(p)]
    if missing:
        raise ConfigError(
            f"missing generated artifacts: {', '.join(sorted(missing))} "
            f"(run `planlab generate` first)")
    catalog = catalog_mod.load_catalog(paths["catalog"])
    workload = catalog_mod.load_workload(paths["workload"])
    model = costmodel.load_latency_model(paths["latency_model"])
    return catalog, workload, model


def _reward_for_trainer(kind: str) -> RewardSpec:
    if kind in ("naive-latency", "lfd"):
        return RewardSpec(kind=REWARD_LATENCY)
    return RewardSpec(kind=REWARD_COST)


def _make_agent(config: ExperimentConfig, env_config: EnvConfig) -> ValueAgent:
    return ValueAgent.create(
        input_size=env_config.feature_length,
        hidden=config.agent_hidden,
        seed=config.seeds["agent"],
        learning_rate=config.agent_learning_rate,
        momentum=config.agent_momentum,
        normalizer_warmup=config.agent_normalizer_warmup,
    )


def cmd_train(config: ExperimentConfig) -> dict:
    """Run the configured trainer; write metrics, checkpoint(s) and manifest."""
    catalog, workload, model = _load_artifacts(config)
    cat_digest = catalog_mod.catalog_digest(catalog)
    env_config = EnvConfig(enabled_stages=config.env_stages,
                           max_relations=config.env_max_relations,
                           reward=_reward_for_trainer(config.trainer_kind))
    env = Env(env_config, catalog, model)
    agent = _make_agent(config, env_config)
    queries = workload.queries
    tr = config.trainer
    kind = config.trainer_kind
    exploration_seed = config.seeds["agent"]
    execution_base = config.seeds["execution"]
    info: dict[str, Any] = {}
    phase_checkpoints: list[str] = []
    fingerprint = env_fingerprint(env_config, cat_digest)

    if kind == "vanilla":
        episodes = _fetch(tr, "trainer", "episodes", int, required=True)
        metrics = trainers.train_vanilla_cost(
            env, queries, agent, episodes,
            exploration_seed=exploration_seed,
            execution_seed_base=execution_base,
            epsilon_schedule=config.epsilon)
    elif kind == "naive-latency":
        episodes = _fetch(tr, "trainer", "episodes", int, required=True)
        metrics = trainers.train_naive_latency(
            env, queries, agent, episodes,
            exploration_seed=exploration_seed,
            execution_seed_base=execution_base,
            timeout_multiplier=_fetch(tr, "trainer", "timeout_multiplier", float, 20.0),
            epsilon_schedule=config.epsilon)
    elif kind == "lfd":
        metrics, info = _train_lfd(config, env, queries, agent, catalog, model)
    elif kind == "bootstrap":
        metrics = trainers.train_bootstrap(
            env, queries, agent,
            phase1_cap=_fetch(tr, "trainer", "phase1_cap", int, required=True),
            phase2_episodes=_fetch(tr, "trainer", "phase2_episodes", int, required=True),
            exploration_seed=exploration_seed,
            execution_seed_base=execution_base,
            convergence_window=_fetch(tr, "trainer", "convergence_window", int, 200),
            convergence_epsilon=_fetch(tr, "trainer", "convergence_epsilon", float, 0.01),
            calibration_tail=_fetch(tr, "trainer", "calibration_tail", int, 200),
            epsilon_schedule=config.epsilon)
    else:
        metrics, phase_checkpoints = _train_curriculum(
            config, env_config, catalog, model, queries, agent, cat_digest)

    os.makedirs(config.output_dir, exist_ok=True)
    metrics_path = os.path.join(config.output_dir, "metrics.csv")
    write_metrics_csv(metrics, metrics_path, config_digest=config.config_digest)

    checkpoint_path = os.path.join(config.output_dir, "checkpoint.json")
    save_checkpoint(agent, checkpoint_path, fingerprint,
                    metadata={"trainer": kind,
                              "seeds": config.seeds,
                              "config_digest": config.config_digest})

    run_manifest = {
        "config_digest": config.config_digest,
        "resolved_config": config.raw,
        "trainer": kind,
        "episodes_recorded": len(metrics.records),
        "metrics": {"path": "metrics.csv", "sha256": file_digest(metrics_path)},
        "checkpoint": {"path": "checkpoint.json",
                       "sha256": file_digest(checkpoint_path)},
        "phase_checkpoints": phase_checkpoints,
        "info": {**metrics.info, **info},
    }
    dump_versioned(os.path.join(config.output_dir, "run_manifest.json"),
                   "run_manifest", run_manifest)
    return run_manifest


def _train_lfd(config: ExperimentConfig, env: Env, queries, agent: ValueAgent,
               catalog, model):
    """Record the expert corpus, pretrain on it, then latency fine-tune."""
    tr = config.trainer
    expert_kind = _fetch(tr, "trainer", "expert", str, expert.EXPERT_DP)
    passes = _fetch(tr, "trainer", "pretrain_passes", int, 20)
    episodes = _fetch(tr, "trainer", "episodes", int, required=True)
    execution_base = config.seeds["execution"]

    histories = []
    corpus_path = os.path.join(config.output_dir, "histories.jsonl")
    os.makedirs(config.output_dir, exist_ok=True)
    if os.path.exists(corpus_path):
        os.remove(corpus_path)
    for query in queries:
        history = expert.record_episode(env.config, catalog, query, expert_kind)
        sample = costmodel.simulate_latency(
            model, catalog, query, history.terminal_plan,
            execution_base + CORPUS_SEED_OFFSET + query.id)
        history.latency_seconds = sample.seconds
        expert.append_history(corpus_path, history)
        histories.append(history)

    queries_by_id = {q.id: q for q in queries}
    pretrain = trainers.pretrain_from_demonstration(
        env, queries_by_id, histories, agent, passes,
        shuffle_seed=config.seeds["agent"])
    expert_samples = [
        (feats, agent.normalizer.normalize(target))
        for feats, target in trainers.demonstration_samples(env, queries_by_id,
                                                            histories)
    ]
    detector = SlipDetector(
        window=_fetch(tr, "trainer", "slip_window", int, 50),
        slip_threshold=_fetch(tr, "trainer", "slip_threshold", float, 1.2),
        recovery_threshold=_fetch(tr, "trainer", "recovery_threshold", float, 1.05),
    )
    metrics = trainers.finetune_lfd(
        env, queries, agent, episodes,
        exploration_seed=config.seeds["agent"],
        execution_seed_base=execution_base,
        expert_samples=expert_samples,
        slip_detector=detector,
        expert_mix_fraction=_fetch(tr, "trainer", "mix_fraction", float, 0.25),
        epsilon=_fetch(tr, "trainer", "epsilon", float, 0.01))
    info = {
        "expert": expert_kind,
        "pretrain_passes": passes,
        "pretrain_final_loss": pretrain.final_loss,
        "pretrain_samples": pretrain.sample_count,
        "corpus": "histories.jsonl",
    }
    return metrics, info


def _train_curriculum(config: ExperimentConfig, env_config: EnvConfig, catalog,
                      model, queries, agent: ValueAgent, cat_digest: str):
    tr = config.trainer
    kind = config.trainer_kind.split(":", 1)[1]
    schedule_kwargs = {
        "advance_ratio": _fetch(tr, "trainer", "advance_ratio", float, 1.1),
        "advance_window": _fetch(tr, "trainer", "advance_window", int, 100),
    }
    if kind == "pipeline":
        schedule = trainers.make_pipeline_schedule(config.env_max_relations,
                                                   **schedule_kwargs)
    elif kind == "relations":
        schedule = trainers.make_relations_schedule(config.env_max_relations,
                                                    **schedule_kwargs)
    else:
        schedule = trainers.make_hybrid_schedule(config.env_max_relations,
                                                 **schedule_kwargs)

    base_env = Env(env_config, catalog, model)

    def env_factory(stage_count: int) -> Env:
        cfg = EnvConfig(enabled_stages=stage_count,
                        max_relations=config.env_max_relations,
                        reward=RewardSpec(kind=REWARD_COST))
        sibling = Env(cfg, catalog, model)
        sibling._contexts = base_env._contexts
        return sibling

    os.makedirs(config.output_dir, exist_ok=True)
    phase_checkpoints: list[str] = []

    def on_phase_end(phase_index: int, phase_label: str, current: ValueAgent):
        name = f"checkpoint_{phase_label}.json"
        stage_count = schedule.phases[phase_index][0]
        phase_cfg = EnvConfig(enabled_stages=stage_count,
                              max_relations=config.env_max_relations,
                              reward=RewardSpec(kind=REWARD_COST))
        save_checkpoint(current, os.path.join(config.output_dir, name),
                        env_fingerprint(phase_cfg, cat_digest),
                        metadata={"phase": phase_label})
        phase_checkpoints.append(name)

    metrics = trainers.train_curriculum(
        env_factory, queries, agent, schedule,
        episodes_per_phase=_fetch(tr, "trainer", "episodes_per_phase", int,
                                  required=True),
        exploration_seed=config.seeds["agent"],
        execution_seed_base=config.seeds["execution"],
        epsilon_schedule=config.epsilon,
        phase_callback=on_phase_end)
    return metrics, phase_checkpoints


# --- evaluation ------------------------------------------------------------------


EVAL_HEADER = ("scope,query_id,relations,agent_cost,expert_cost,cost_ratio,"
               "agent_latency_s,expert_latency_s,latency_ratio")


def cmd_eval(config: ExperimentConfig, checkpoint: str, expert_kind: str,
             execution_seeds: int, out_path: str) -> dict:
    """Compare a policy (checkpoint or the expert itself) against the expert.

    Latencies are medians over ``execution_seeds`` simulated executions;
    exploration is forced off.
    """
    catalog, workload, model = _load_artifacts(config)
    cat_digest = catalog_mod.catalog_digest(catalog)
    env_config = EnvConfig(enabled_stages=config.env_stages,
                           max_relations=config.env_max_relations)
    env = Env(env_config, catalog, model)
    execution_base = config.seeds["execution"]

    policy = _make_policy(checkpoint, env, env_config, cat_digest)

    rows = []
    for query in workload.queries:
        expert_plan = expert.expert_plan(catalog, query, expert_kind)
        agent_plan = policy(query)
        agent_cost = costmodel.cost_plan(catalog, query, agent_plan)
        expert_cost = costmodel.cost_plan(catalog, query, expert_plan)
        agent_tc = costmodel.true_cost(model, catalog, query, agent_plan)
        expert_tc = costmodel.true_cost(model, catalog, query, expert_plan)
        agent_lat = statistics.median(
            latency_from_true_cost(model, agent_tc, execution_base + k)
            for k in range(execution_seeds))
        expert_lat = statistics.median(
            latency_from_true_cost(model, expert_tc, execution_base + k)
            for k in range(execution_seeds))
        rows.append({
            "query_id": query.id,
            "relations": len(query.relation_ids),
            "agent_cost": agent_cost,
            "expert_cost": expert_cost,
            "cost_ratio": agent_cost / expert_cost,
            "agent_latency_s": agent_lat,
            "expert_latency_s": expert_lat,
            "latency_ratio": agent_lat / expert_lat,
        })

    summary = {
        "median_cost_ratio": statistics.median(r["cost_ratio"] for r in rows),
        "median_latency_ratio": statistics.median(r["latency_ratio"] for r in rows),
    }
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# planlab_eval format_version=1 "
                 f"config_digest={config.config_digest}\n")
        fh.write(EVAL_HEADER + "\n")
        for r in rows:
            fh.write(",".join([
                "query", str(r["query_id"]), str(r["relations"]),
                repr(r["agent_cost"]), repr(r["expert_cost"]),
                repr(r["cost_ratio"]), repr(r["agent_latency_s"]),
                repr(r["expert_latency_s"]), repr(r["latency_ratio"]),
            ]) + "\n")
        fh.write(",".join([
            "aggregate", "-1", "0", "0.0", "0.0",
            repr(summary["median_cost_ratio"]), "0.0", "0.0",
            repr(summary["median_latency_ratio"]),
        ]) + "\n")
    return summary


def _make_policy(checkpoint: str, env: Env, env_config: EnvConfig,
                 cat_digest: str) -> Callable:
    """A query -> plan function, from a checkpoint or an expert name."""
    if checkpoint.startswith("expert:"):
        kind = checkpoint.split(":", 1)[1]

        def expert_policy(query):
            return expert.expert_plan(env.catalog, query, kind)

        return expert_policy

    agent = load_checkpoint(checkpoint, env_fingerprint(env_config, cat_digest))
    rng = random.Random(0)  # epsilon 0: never consulted for choices

    def greedy_policy(query):
        state, legal = env.reset(query)
        while not state.terminal:
            action = agent_mod.select_action(agent.params, state, legal,
                                             env.featurize, 0.0, rng)
            state, terminal = env.step(state, action)
            legal = [] if terminal else env.legal_actions(state)
        return env.extract_plan(state)

    return greedy_policy


# --- entry point -------------------------------------------------------------------


def _replica_config(doc: dict, replica: int) -> dict:
    out = json.loads(json.dumps(doc))
    for name in out["seeds"]:
        out["seeds"][name] = out["seeds"][name] + replica
    out["output_dir"] = os.path.join(doc["output_dir"], f"replica{replica}")
    return out


def _run_replica(doc: dict, replica: int) -> str:
    config = parse_experiment_config(_replica_config(doc, replica))
    cmd_generate(config)
    cmd_train(config)
    return config.output_dir


def main(argv: Optional[list[str]] = None) -> int:
    parser = _Parser(prog="planlab",
                     description="simulated-DBMS lab for learned query planning")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config JSON")
    common.add_argument("--output-dir", default=None,
                        help="override the config's output_dir")
    common.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="dotted-path config override, e.g. trainer.episodes=50")

    sub.add_parser("generate", parents=[common],
                   help="write catalog/workload/latency-model artifacts")

    p_train = sub.add_parser("train", parents=[common],
                             help="run the configured trainer")
    p_train.add_argument("--parallel-seeds", type=int, default=0, metavar="K",
                         help="run K isolated replicas with shifted seed blocks")

    p_eval = sub.add_parser("eval", parents=[common],
                            help="evaluate a checkpoint against the expert")
    p_eval.add_argument("--checkpoint", default=None,
                        help="checkpoint path, or expert:dp / expert:greedy")
    p_eval.add_argument("--expert", default="dp", choices=["dp", "greedy"])
    p_eval.add_argument("--execution-seeds", type=int, default=9)
    p_eval.add_argument("--out", default=None, help="report path (default "
                        "<output_dir>/eval.csv)")

    p_report = sub.add_parser("report", help="aggregate metrics files into "
                              "learning curves (CSV + PNG)")
    p_report.add_argument("metrics", nargs="+", help="metrics.csv files")
    p_report.add_argument("--out", required=True, help="aggregated CSV path")
    p_report.add_argument("--window", type=int, default=100)
    p_report.add_argument("--figure", default=None,
                          help="figure path (default: next to --out)")

    try:
        args = parser.parse_args(argv)
        if args.command == "report":
            for path in args.metrics:
                if not os.path.exists(path):
                    raise ConfigError(f"metrics file not found: {path}")
            rows = report.build_report(args.metrics, args.out,
                                       window=args.window,
                                       figure_path=args.figure)
            print(f"wrote {args.out} ({len(rows)} rows)")
            return 0

        config = load_experiment_config(args.config, args.override,
                                        args.output_dir)
        if args.command == "generate":
            manifest = cmd_generate(config)
            for name, entry in sorted(manifest["artifacts"].items()):
                print(f"{name}: {entry['path']} sha256={entry['sha256'][:12]}")
            return 0
        if args.command == "train":
            if args.parallel_seeds > 0:
                with concurrent.futures.ProcessPoolExecutor(
                        max_workers=args.parallel_seeds) as pool:
                    futures = [pool.submit(_run_replica, config.raw, k)
                               for k in range(args.parallel_seeds)]
                    for future in futures:
                        print(f"replica done: {future.result()}")
                return 0
            manifest = cmd_train(config)
            print(f"metrics: {manifest['metrics']['path']} "
                  f"({manifest['episodes_recorded']} episodes)")
            print(f"checkpoint: {manifest['checkpoint']['path']}")
            return 0
        if args.command == "eval":
            checkpoint = args.checkpoint or os.path.join(config.output_dir,
                                                         "checkpoint.json")
            out_path = args.out or os.path.join(config.output_dir, "eval.csv")
            summary = cmd_eval(config, checkpoint, args.expert,
                               args.execution_seeds, out_path)
            print(f"median cost ratio: {summary['median_cost_ratio']:.4f}")
            print(f"median latency ratio: {summary['median_latency_ratio']:.4f}")
            return 0
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PlanLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
