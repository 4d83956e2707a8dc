"""Training regimes for the value-prediction agent.

Four regimes share one episode loop so that reductions between them are exact
(the pipeline curriculum's first phase is literally the vanilla cost trainer):

  * vanilla cost reward (the baseline join enumerator's setting)
  * naive latency reward, with per-episode timeout accounting
  * learning from demonstration: pretrain on expert episode histories, then
    fine-tune on observed latency with slip-triggered expert re-mixing
  * cost-model bootstrapping: cost reward until convergence, then scaled
    latency

plus the curriculum schedulers that grow the pipeline-stage and
relation-count axes.

Every (state, action) of an episode is regressed toward the episode's
terminal outcome magnitude (cost, latency or scaled latency); there is no
temporal-difference bootstrapping.
"""

from __future__ import annotations

import random
import statistics
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .agent import ValueAgent, select_action, train_batch
from .catalog import Query
from .costmodel import cost_plan, latency_from_true_cost, true_cost
from .env import Env, RewardSpec, REWARD_COST, REWARD_LATENCY, \
    REWARD_SCALED_LATENCY
from .errors import CalibrationError, ConfigError, ContractError
from .expert import EpisodeHistory, optimize_dp
from .metrics import EpisodeRecord, Metrics

ADVANCE = "advance"
STAY = "stay"
DONE = "done"

SCHEDULE_PIPELINE = "pipeline"
SCHEDULE_RELATIONS = "relations"
SCHEDULE_HYBRID = "hybrid"

PIPELINE_STAGES = 4


# --- reward scaling (cost-model bootstrapping) -------------------------------


@dataclass(frozen=True)
class BootstrapCalibration:
    c_min: float
    c_max: float
    l_min: float
    l_max: float

    def validate(self) -> None:
        values = (self.c_min, self.c_max, self.l_min, self.l_max)
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise CalibrationError("calibration bounds must be finite and positive")
        if not (self.c_min < self.c_max and self.l_min < self.l_max):
            raise CalibrationError("calibration ranges must be non-degenerate")


def scale_latency_reward(cal: BootstrapCalibration, seconds: float) -> float:
    """Map a latency onto the observed cost range; linear, extrapolating.

    Out-of-range latencies stay on the same line: clamping would flatten the
    signal exactly where very bad plans need to be distinguished. A monotone
    nonlinear map would also satisfy the contract; only the linear one is
    implemented.
    """
    return cal.c_min + (seconds - cal.l_min) / (cal.l_max - cal.l_min) \
        * (cal.c_max - cal.c_min)


def calibrate_bootstrap(tail_records: Sequence[EpisodeRecord]) -> BootstrapCalibration:
    """Extrema of observed costs and latencies over a phase-1 tail window."""
    costs = {r.agent_cost for r in tail_records}
    latencies = {r.latency_s for r in tail_records}
    if len(costs) < 2 or len(latencies) < 2:
        raise CalibrationError(
            "calibration window needs at least two distinct costs and latencies")
    cal = BootstrapCalibration(c_min=min(costs), c_max=max(costs),
                               l_min=min(latencies), l_max=max(latencies))
    cal.validate()
    return cal


def detect_convergence(reward_history: Sequence[float], window: int = 200,
                       rel_epsilon: float = 0.01) -> bool:
    """True when the last two windows' means agree within rel_epsilon."""
    if len(reward_history) < 2 * window:
        return False
    recent = statistics.fmean(reward_history[-window:])
    previous = statistics.fmean(reward_history[-2 * window:-window])
    return abs(recent - previous) <= rel_epsilon * abs(previous)


# --- slip detection ----------------------------------------------------------


@dataclass
class SlipDetector:
    """Latched detector over a ring buffer of latency ratios.

    Fires when the window median exceeds slip_threshold; stays active until
    the median falls back to recovery_threshold.
    """

    window: int = 50
    slip_threshold: float = 1.2
    recovery_threshold: float = 1.05
    active: bool = False
    _buffer: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.window < 1:
            raise ContractError("window must be >= 1")
        if not self.slip_threshold > self.recovery_threshold >= 1.0:
            raise ContractError(
                "need slip_threshold > recovery_threshold >= 1.0")
        self._buffer = deque(self._buffer, maxlen=self.window)

    def update(self, latency_ratio: float) -> bool:
        self._buffer.append(latency_ratio)
        median = statistics.median(self._buffer)
        if not self.active and median > self.slip_threshold:
            self.active = True
        elif self.active and median <= self.recovery_threshold:
            self.active = False
        return self.active


def detect_slip(detector: SlipDetector, latency_ratios: Sequence[float]) -> list[bool]:
    return [detector.update(r) for r in latency_ratios]


# --- shared episode loop ------------------------------------------------------


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.2
    end: float = 0.01
    fraction: float = 0.5  # decay over this leading fraction of the run

    def value(self, episode: int, total: int) -> float:
        cut = total * self.fraction
        if cut <= 0 or episode >= cut:
            return self.end
        return self.start + (self.end - self.start) * (episode / cut)


class _ExpertBaseline:
    """Caches the comparison expert's cost and true cost per query."""

    def __init__(self, catalog, latency_model):
        self.catalog = catalog
        self.latency_model = latency_model
        self._cache: dict[int, tuple[float, float]] = {}

    def costs(self, query: Query) -> tuple[float, float]:
        hit = self._cache.get(query.id)
        if hit is None:
            plan = optimize_dp(self.catalog, query)
            cost = cost_plan(self.catalog, query, plan)
            tc = true_cost(self.latency_model, self.catalog, query, plan)
            hit = (cost, tc)
            self._cache[query.id] = hit
        return hit


@dataclass
class _LoopState:
    """Mutable bookkeeping shared across phases of one training run."""

    exploration_rng: random.Random
    mixing_rng: random.Random
    baseline: _ExpertBaseline
    global_episode: int = 0
    reward_history: list[float] = field(default_factory=list)


def _run_episodes(env: Env, queries: Sequence[Query], agent: ValueAgent,
                  episodes: int, loop: _LoopState, *,
                  phase_label: str,
                  epsilon_schedule: EpsilonSchedule,
                  epsilon_total: int,
                  execution_seed_base: int,
                  metrics: Metrics,
                  timeout_multiplier: Optional[float] = None,
                  slip_detector: Optional[SlipDetector] = None,
                  expert_samples: Optional[list] = None,
                  expert_mix_fraction: float = 0.25,
                  stop_check: Optional[Callable[[], bool]] = None,
                  on_episode_end: Optional[Callable[[int, ValueAgent], None]] = None,
                  phase_episode_base: int = 0) -> int:
    """Run up to ``episodes`` episodes; returns the number actually run.

    ``stop_check`` is consulted after each episode (used for convergence and
    curriculum advancement). Queries are sampled round-robin; exploration,
    execution noise and expert-sample mixing each draw from their own seeded
    streams so runs are reproducible end to end.
    """
    if not queries:
        raise ConfigError("cannot train on an empty workload")
    reward_kind = env.config.reward.kind
    baseline = loop.baseline
    ran = 0
    for phase_episode in range(phase_episode_base, phase_episode_base + episodes):
        started = time.perf_counter()
        episode = loop.global_episode
        query = queries[phase_episode % len(queries)]
        epsilon = epsilon_schedule.value(phase_episode, epsilon_total)

        state, legal = env.reset(query)
        features = []
        while not state.terminal:
            action = select_action(agent.params, state, legal, env.featurize,
                                   epsilon, loop.exploration_rng)
            features.append(env.featurize(state, action))
            state, terminal = env.step(state, action)
            legal = [] if terminal else env.legal_actions(state)
        plan = env.extract_plan(state)

        # Equivalent to env.episode_reward, inlined so the true-cost and
        # latency computations are shared with the metrics columns. The
        # expert's latency uses the same execution seed, so the ratio is free
        # of execution noise.
        agent_cost = cost_plan(env.catalog, query, plan)
        agent_tc = true_cost(env.latency_model, env.catalog, query, plan)
        exec_seed = execution_seed_base + episode
        latency = latency_from_true_cost(env.latency_model, agent_tc, exec_seed)
        expert_cost, expert_tc = baseline.costs(query)
        expert_latency = latency_from_true_cost(env.latency_model, expert_tc,
                                                exec_seed)

        timeout_flag = 0
        target_latency = latency
        if timeout_multiplier is not None:
            budget = timeout_multiplier * expert_latency
            if latency > budget:
                timeout_flag = 1
                target_latency = budget

        if reward_kind == REWARD_COST:
            target = agent_cost
            reward = -agent_cost
        elif reward_kind == REWARD_LATENCY:
            target = target_latency
            reward = -target_latency
        else:
            target = scale_latency_reward(env.config.reward.calibration,
                                          target_latency)
            reward = -target

        slip_active = bool(slip_detector.active) if slip_detector else False
        loss = 0.0
        if agent.normalizer.frozen:
            normalized = agent.normalizer.normalize(target)
            batch = [(f, normalized) for f in features]
            if slip_active and expert_samples:
                mix = max(1, round(len(batch) * expert_mix_fraction
                                   / (1.0 - expert_mix_fraction)))
                for _ in range(mix):
                    batch.append(expert_samples[
                        loop.mixing_rng.randrange(len(expert_samples))])
            loss = train_batch(agent.params, agent.trainer, batch)
        else:
            agent.normalizer.observe([target])

        latency_ratio = latency / expert_latency
        metrics.records.append(EpisodeRecord(
            episode=episode, phase=phase_label, query_id=query.id,
            agent_cost=agent_cost, expert_cost=expert_cost,
            cost_ratio=agent_cost / expert_cost,
            latency_s=latency, expert_latency_s=expert_latency,
            latency_ratio=latency_ratio, loss=loss, epsilon=epsilon,
            timeout_flag=timeout_flag,
            wall_clock=time.perf_counter() - started,
            slip_active=slip_active))

        if slip_detector is not None:
            slip_detector.update(latency_ratio)
        loop.reward_history.append(reward)
        loop.global_episode += 1
        agent.episodes_seen += 1
        ran += 1
        if on_episode_end is not None:
            on_episode_end(episode, agent)
        if stop_check is not None and stop_check():
            break
    return ran


def _new_loop(env: Env, exploration_seed: int) -> _LoopState:
    return _LoopState(exploration_rng=random.Random(exploration_seed),
                      mixing_rng=random.Random(exploration_seed ^ 0x5EED),
                      baseline=_ExpertBaseline(env.catalog, env.latency_model))


# --- the four regimes ---------------------------------------------------------


def train_vanilla_cost(env: Env, queries: Sequence[Query], agent: ValueAgent,
                       episodes: int, *, exploration_seed: int,
                       execution_seed_base: int,
                       epsilon_schedule: EpsilonSchedule = EpsilonSchedule(),
                       phase_label: str = "phase1") -> Metrics:
    """Cost-model reward from scratch (the baseline setting)."""
    if env.config.reward.kind != REWARD_COST:
        raise ContractError("train_vanilla_cost requires the cost reward")
    metrics = Metrics()
    if episodes == 0:
        return metrics
    loop = _new_loop(env, exploration_seed)
    _run_episodes(env, queries, agent, episodes, loop, phase_label=phase_label,
                  epsilon_schedule=epsilon_schedule, epsilon_total=episodes,
                  execution_seed_base=execution_seed_base, metrics=metrics)
    return metrics


def train_naive_latency(env: Env, queries: Sequence[Query], agent: ValueAgent,
                        episodes: int, *, exploration_seed: int,
                        execution_seed_base: int,
                        timeout_multiplier: float = 20.0,
                        epsilon_schedule: EpsilonSchedule = EpsilonSchedule()) -> Metrics:
    """Latency reward from scratch; counts episodes that blow the time budget.

    A timed-out episode still trains (its latency is clamped to the budget),
    which is exactly the pathology being measured: the reward for a bad plan
    costs wall-clock proportional to how bad the plan is.
    """
    if env.config.reward.kind != REWARD_LATENCY:
        raise ContractError("train_naive_latency requires the latency reward")
    if not timeout_multiplier > 0:
        raise ContractError("timeout_multiplier must be positive")
    metrics = Metrics()
    if episodes == 0:
        metrics.info["timeout_count"] = 0
        return metrics
    loop = _new_loop(env, exploration_seed)
    _run_episodes(env, queries, agent, episodes, loop, phase_label="phase1",
                  epsilon_schedule=epsilon_schedule, epsilon_total=episodes,
                  execution_seed_base=execution_seed_base, metrics=metrics,
                  timeout_multiplier=timeout_multiplier)
    metrics.info["timeout_count"] = metrics.timeout_count()
    return metrics


@dataclass
class PretrainResult:
    pass_losses: list[float]
    final_loss: float
    sample_count: int
    holdout_losses: list[float] = field(default_factory=list)


def demonstration_samples(env: Env, queries_by_id: dict[int, Query],
                          histories: Sequence[EpisodeHistory]) -> list:
    """(features, normalized latency) pairs for every recorded (action, state).

    The agent's normalizer must already be frozen.
    """
    samples = []
    for history in histories:
        if history.latency_seconds is None:
            raise ContractError(
                f"history for query {history.query_id} has no observed latency")
        env.bind_query(queries_by_id[history.query_id])
        for step in history.steps:
            samples.append((env.featurize(step.state, step.action),
                            history.latency_seconds))
    return samples


def pretrain_from_demonstration(env: Env, queries_by_id: dict[int, Query],
                                histories: Sequence[EpisodeHistory],
                                agent: ValueAgent, passes: int, *,
                                batch_size: int = 64,
                                shuffle_seed: int = 0,
                                holdout_fraction: float = 0.0) -> PretrainResult:
    """Regress every recorded (state, action) toward its episode latency.

    With a nonzero ``holdout_fraction`` the trailing share of histories is
    withheld from training and its squared error is recorded after every
    pass, so convergence can be judged out of sample.
    """
    if not histories:
        raise ContractError("cannot pretrain on an empty history log")
    if not 0.0 <= holdout_fraction < 1.0:
        raise ContractError("holdout_fraction must be in [0, 1)")
    if not agent.normalizer.frozen:
        agent.normalizer.observe([h.latency_seconds for h in histories
                                  if h.latency_seconds is not None])
        agent.normalizer.freeze()

    cut = len(histories) - int(len(histories) * holdout_fraction)
    train_hist, held_hist = histories[:cut], histories[cut:]
    samples = [(f, agent.normalizer.normalize(t))
               for f, t in demonstration_samples(env, queries_by_id, train_hist)]
    held = [(f, agent.normalizer.normalize(t))
            for f, t in demonstration_samples(env, queries_by_id, held_hist)]

    def holdout_loss() -> float:
        from .agent import predict_batch
        features = np.stack([f for f, _ in held])
        targets = np.asarray([t for _, t in held])
        return float(np.mean((predict_batch(agent.params, features) - targets) ** 2))

    rng = random.Random(shuffle_seed)
    pass_losses: list[float] = []
    holdout_losses: list[float] = []
    order = list(range(len(samples)))
    for _ in range(passes):
        rng.shuffle(order)
        losses = []
        for lo in range(0, len(order), batch_size):
            batch = [samples[i] for i in order[lo:lo + batch_size]]
            losses.append(train_batch(agent.params, agent.trainer, batch))
        pass_losses.append(statistics.fmean(losses))
        if held:
            holdout_losses.append(holdout_loss())
    final = pass_losses[-1] if pass_losses else 0.0
    return PretrainResult(pass_losses=pass_losses, final_loss=final,
                          sample_count=len(samples),
                          holdout_losses=holdout_losses)


def expert_action_agreement(env: Env, queries_by_id: dict[int, Query],
                            histories: Sequence[EpisodeHistory],
                            agent: ValueAgent) -> float:
    """Fraction of recorded states where argmin prediction picks the expert
    action."""
    from .agent import predict_batch

    hits = 0
    total = 0
    for history in histories:
        env.bind_query(queries_by_id[history.query_id])
        for step in history.steps:
            legal = env.legal_actions(step.state)
            feats = np.stack([env.featurize(step.state, a) for a in legal])
            best = int(np.argmin(predict_batch(agent.params, feats)))
            hits += legal[best].signature() == step.action.signature()
            total += 1
    return hits / total if total else 0.0


def finetune_lfd(env: Env, queries: Sequence[Query], agent: ValueAgent,
                 episodes: int, *, exploration_seed: int,
                 execution_seed_base: int,
                 expert_samples: Optional[list] = None,
                 slip_detector: Optional[SlipDetector] = None,
                 expert_mix_fraction: float = 0.25,
                 epsilon: float = 0.01,
                 on_episode_end: Optional[Callable[[int, ValueAgent], None]] = None) -> Metrics:
    """Fine-tune a pretrained agent on observed latency.

    The slip detector watches the per-episode latency ratio; while it is
    active, training batches mix in expert-corpus samples at the configured
    fraction until the ratio recovers.
    """
    if env.config.reward.kind != REWARD_LATENCY:
        raise ContractError("finetune_lfd requires the latency reward")
    if not agent.normalizer.frozen:
        raise ContractError("finetune_lfd requires a pretrained agent")
    metrics = Metrics()
    if episodes == 0:
        return metrics
    loop = _new_loop(env, exploration_seed)
    detector = slip_detector if slip_detector is not None else SlipDetector()
    _run_episodes(env, queries, agent, episodes, loop, phase_label="phase1",
                  epsilon_schedule=EpsilonSchedule(epsilon, epsilon, 0.0),
                  epsilon_total=episodes,
                  execution_seed_base=execution_seed_base, metrics=metrics,
                  slip_detector=detector, expert_samples=expert_samples,
                  expert_mix_fraction=expert_mix_fraction,
                  on_episode_end=on_episode_end)
    metrics.info["slip_episodes"] = sum(r.slip_active for r in metrics.records)
    return metrics


def train_bootstrap(env: Env, queries: Sequence[Query], agent: ValueAgent,
                    phase1_cap: int, phase2_episodes: int, *,
                    exploration_seed: int, execution_seed_base: int,
                    convergence_window: int = 200,
                    convergence_epsilon: float = 0.01,
                    calibration_tail: int = 200,
                    epsilon_schedule: EpsilonSchedule = EpsilonSchedule()) -> Metrics:
    """Cost reward until convergence (phase 1), then scaled latency (phase 2).

    If phase 1 hits its cap without converging, calibration proceeds on the
    cap tail and the miss is flagged in the metrics info.
    """
    if env.config.reward.kind != REWARD_COST:
        raise ContractError("train_bootstrap starts from the cost reward")
    metrics = Metrics()
    loop = _new_loop(env, exploration_seed)

    def converged() -> bool:
        return detect_convergence(loop.reward_history, convergence_window,
                                  convergence_epsilon)

    ran = _run_episodes(env, queries, agent, phase1_cap, loop,
                        phase_label="phase1",
                        epsilon_schedule=epsilon_schedule,
                        epsilon_total=phase1_cap,
                        execution_seed_base=execution_seed_base,
                        metrics=metrics, stop_check=converged)
    metrics.info["phase1_episodes"] = ran
    metrics.info["phase1_converged"] = converged()

    if phase2_episodes == 0:
        return metrics

    calibration = calibrate_bootstrap(metrics.records[-calibration_tail:])
    metrics.info["calibration"] = {
        "c_min": calibration.c_min, "c_max": calibration.c_max,
        "l_min": calibration.l_min, "l_max": calibration.l_max,
    }
    env2 = env.with_reward(RewardSpec(kind=REWARD_SCALED_LATENCY,
                                      calibration=calibration))
    _run_episodes(env2, queries, agent, phase2_episodes, loop,
                  phase_label="phase2",
                  epsilon_schedule=epsilon_schedule, epsilon_total=phase1_cap,
                  execution_seed_base=execution_seed_base, metrics=metrics,
                  phase_episode_base=ran)
    return metrics


# --- curricula -----------------------------------------------------------------


@dataclass
class CurriculumSchedule:
    kind: str
    phases: list[tuple[int, int]]  # (enabled stage count, max relation count)
    advance_ratio: float = 1.1
    advance_window: int = 100

    def validate(self) -> None:
        if not self.phases:
            raise ConfigError("schedule has no phases")
        for stages, max_rel in self.phases:
            if not 1 <= stages <= PIPELINE_STAGES or max_rel < 1:
                raise ConfigError(f"invalid phase ({stages}, {max_rel})")
        pairs = self.phases
        if self.kind == SCHEDULE_PIPELINE:
            if any(b[0] <= a[0] for a, b in zip(pairs, pairs[1:])):
                raise ConfigError("pipeline stages must strictly increase")
            if len({p[1] for p in pairs}) != 1:
                raise ConfigError("pipeline relation bound must stay constant")
        elif self.kind == SCHEDULE_RELATIONS:
            if len({p[0] for p in pairs}) != 1:
                raise ConfigError("relations schedule must keep stages constant")
            if any(b[1] <= a[1] for a, b in zip(pairs, pairs[1:])):
                raise ConfigError("relation bound must strictly increase")
        elif self.kind == SCHEDULE_HYBRID:
            top = max(p[0] for p in pairs)
            for a, b in zip(pairs, pairs[1:]):
                if b[0] < a[0] or b[1] < a[1]:
                    raise ConfigError("hybrid phases must weakly increase")
                if b[0] == a[0] and b[1] == a[1]:
                    raise ConfigError("hybrid phases must strictly increase one axis")
                if b[0] == a[0] and a[0] != top:
                    raise ConfigError(
                        "hybrid stages must saturate before relations grow alone")
        else:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")


def make_pipeline_schedule(max_relations: int, **kwargs) -> CurriculumSchedule:
    phases = [(s, max_relations) for s in range(1, PIPELINE_STAGES + 1)]
    schedule = CurriculumSchedule(SCHEDULE_PIPELINE, phases, **kwargs)
    schedule.validate()
    return schedule


def make_relations_schedule(max_relations: int, stages: int = PIPELINE_STAGES,
                            start: int = 1, **kwargs) -> CurriculumSchedule:
    phases = [(stages, r) for r in range(start, max_relations + 1)]
    schedule = CurriculumSchedule(SCHEDULE_RELATIONS, phases, **kwargs)
    schedule.validate()
    return schedule


def make_hybrid_schedule(max_relations: int, **kwargs) -> CurriculumSchedule:
    """Both axes together, then relations alone: (1,2),(2,3),(3,4),(4,5),(4,6),..."""
    phases = []
    stages, rels = 1, min(2, max_relations)
    while True:
        phases.append((stages, rels))
        if stages == PIPELINE_STAGES and rels == max_relations:
            break
        stages = min(stages + 1, PIPELINE_STAGES)
        rels = min(rels + 1, max_relations) if rels < max_relations else rels
        if phases[-1] == (stages, rels):
            break
    schedule = CurriculumSchedule(SCHEDULE_HYBRID, phases, **kwargs)
    schedule.validate()
    return schedule


def next_phase(schedule: CurriculumSchedule, phase_index: int,
               phase_records: Sequence[EpisodeRecord],
               phase_budget: int) -> tuple[str, bool]:
    """Phase transition decision: (advance|stay|done, advanced-by-budget flag).

    Advances when the window median cost ratio reaches the target, or when
    the phase's episode budget is exhausted, whichever happens first.
    """
    if not 0 <= phase_index < len(schedule.phases):
        raise ContractError(f"phase index {phase_index} out of range")
    window = schedule.advance_window
    ratio_ok = False
    if len(phase_records) >= window:
        recent = [r.cost_ratio for r in phase_records[-window:]]
        ratio_ok = statistics.median(recent) <= schedule.advance_ratio
    by_budget = len(phase_records) >= phase_budget
    if not (ratio_ok or by_budget):
        return STAY, False
    decision = DONE if phase_index == len(schedule.phases) - 1 else ADVANCE
    return decision, by_budget and not ratio_ok


def train_curriculum(env_factory: Callable[[int], Env], queries: Sequence[Query],
                     agent: ValueAgent, schedule: CurriculumSchedule,
                     episodes_per_phase: int, *, exploration_seed: int,
                     execution_seed_base: int,
                     epsilon_schedule: EpsilonSchedule = EpsilonSchedule(),
                     phase_callback: Optional[Callable[[int, str, ValueAgent], None]] = None) -> Metrics:
    """Run the schedule's phases sequentially over one persistent network.

    ``env_factory(stage_count)`` supplies the phase environment; the feature
    length depends only on the maximum relation bound, so the same network
    serves every phase. The workload is filtered to each phase's relation
    bound and stages the phase does not enable are expert-completed.
    """
    schedule.validate()
    metrics = Metrics()
    loop: Optional[_LoopState] = None
    budget_exhausted: list[str] = []

    for phase_index, (stage_count, max_rel) in enumerate(schedule.phases):
        phase_label = f"phase{phase_index + 1}"
        env = env_factory(stage_count)
        if loop is None:
            loop = _new_loop(env, exploration_seed)
        filtered = [q for q in queries if len(q.relation_ids) <= max_rel]
        if not filtered:
            raise ConfigError(
                f"{phase_label}: no workload queries with <= {max_rel} relations")

        phase_start = len(metrics.records)

        def should_stop() -> bool:
            decision, _ = next_phase(schedule, phase_index,
                                     metrics.records[phase_start:],
                                     episodes_per_phase)
            return decision != STAY

        _run_episodes(env, filtered, agent, episodes_per_phase, loop,
                      phase_label=phase_label,
                      epsilon_schedule=epsilon_schedule,
                      epsilon_total=episodes_per_phase,
                      execution_seed_base=execution_seed_base,
                      metrics=metrics, stop_check=should_stop)

        decision, by_budget = next_phase(schedule, phase_index,
                                         metrics.records[phase_start:],
                                         episodes_per_phase)
        if by_budget:
            budget_exhausted.append(phase_label)
        if phase_callback is not None:
            phase_callback(phase_index, phase_label, agent)

    metrics.info["budget_exhausted_phases"] = budget_exhausted
    metrics.info["phases"] = [list(p) for p in schedule.phases]
    return metrics
