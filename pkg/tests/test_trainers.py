import math
import random
import statistics

import numpy as np
import pytest

from planlab.agent import ValueAgent
from planlab.catalog import WorkloadConfig, generate_workload
from planlab.env import Env, EnvConfig, RewardSpec, REWARD_COST, REWARD_LATENCY
from planlab.errors import CalibrationError, ConfigError, ContractError
from planlab.expert import record_episode
from planlab.metrics import EpisodeRecord
from planlab.trainers import (
    ADVANCE,
    BootstrapCalibration,
    CurriculumSchedule,
    DONE,
    EpsilonSchedule,
    SCHEDULE_HYBRID,
    SCHEDULE_PIPELINE,
    SCHEDULE_RELATIONS,
    STAY,
    SlipDetector,
    calibrate_bootstrap,
    detect_convergence,
    detect_slip,
    expert_action_agreement,
    finetune_lfd,
    make_hybrid_schedule,
    make_pipeline_schedule,
    make_relations_schedule,
    next_phase,
    pretrain_from_demonstration,
    demonstration_samples,
    scale_latency_reward,
    train_bootstrap,
    train_curriculum,
    train_naive_latency,
    train_vanilla_cost,
)


def make_env(catalog, model, stages=1, max_relations=6, reward=REWARD_COST):
    return Env(EnvConfig(enabled_stages=stages, max_relations=max_relations,
                         reward=RewardSpec(kind=reward)), catalog, model)


def make_agent(env, seed=4, hidden=(32, 16), warmup=16, learning_rate=0.01):
    # Test-scale runs are short; a larger step size than the production
    # default keeps them cheap.
    return ValueAgent.create(env.config.feature_length, list(hidden), seed=seed,
                             normalizer_warmup=warmup,
                             learning_rate=learning_rate)


def record(episode, cost_ratio=1.0, latency=1.0, cost=10.0):
    return EpisodeRecord(episode=episode, phase="phase1", query_id=0,
                         agent_cost=cost, expert_cost=cost / cost_ratio,
                         cost_ratio=cost_ratio, latency_s=latency,
                         expert_latency_s=1.0, latency_ratio=latency,
                         loss=0.0, epsilon=0.0, timeout_flag=0)


# --- reward scaling -----------------------------------------------------------


def test_scaling_boundary_identities():
    cal = BootstrapCalibration(10.0, 50.0, 100.0, 200.0)
    assert scale_latency_reward(cal, 100.0) == 10.0
    assert scale_latency_reward(cal, 200.0) == 50.0


def test_scaling_worked_example():
    cal = BootstrapCalibration(10.0, 50.0, 100.0, 200.0)
    assert scale_latency_reward(cal, 150.0) == 30.0


def test_scaling_extrapolates_beyond_the_window():
    cal = BootstrapCalibration(10.0, 50.0, 100.0, 200.0)
    assert scale_latency_reward(cal, 250.0) == 70.0
    assert scale_latency_reward(cal, 50.0) == -10.0


def test_scaling_is_exactly_linear():
    rng = random.Random(17)
    cal = BootstrapCalibration(3.0, 47.0, 0.5, 123.0)
    for _ in range(1000):
        l1 = rng.uniform(0.01, 500.0)
        l2 = rng.uniform(0.01, 500.0)
        lam = rng.random()
        mixed = scale_latency_reward(cal, lam * l1 + (1 - lam) * l2)
        combo = lam * scale_latency_reward(cal, l1) \
            + (1 - lam) * scale_latency_reward(cal, l2)
        assert mixed == pytest.approx(combo, abs=1e-9)


def test_calibrate_from_tail_window():
    tail = [record(i, cost=c, latency=l)
            for i, (c, l) in enumerate([(10.0, 100.0), (50.0, 200.0),
                                        (30.0, 150.0)])]
    cal = calibrate_bootstrap(tail)
    assert (cal.c_min, cal.c_max, cal.l_min, cal.l_max) == (10.0, 50.0, 100.0, 200.0)


def test_calibrate_degenerate_windows():
    with pytest.raises(CalibrationError):
        calibrate_bootstrap([record(0)])
    same_latency = [record(0, cost=10.0, latency=5.0),
                    record(1, cost=20.0, latency=5.0)]
    with pytest.raises(CalibrationError):
        calibrate_bootstrap(same_latency)


def test_detect_convergence_cases():
    assert detect_convergence([1.0] * 400, window=200) is True
    improving = [-(1.1 ** (i / 200)) for i in range(400)]
    assert detect_convergence(improving, window=200) is False
    assert detect_convergence([1.0] * 399, window=200) is False


# --- slip detection -------------------------------------------------------------


def test_slip_never_fires_on_unit_ratios():
    detector = SlipDetector(window=50)
    assert not any(detect_slip(detector, [1.0] * 500))


def test_slip_fires_after_step_change():
    detector = SlipDetector(window=50)
    flags = detect_slip(detector, [1.0] * 100 + [2.0] * 50)
    assert not any(flags[:100])
    fired_at = flags.index(True)
    assert 100 <= fired_at < 150


def test_slip_ignores_oscillation():
    detector = SlipDetector(window=50)
    stream = [0.9, 1.1] * 200
    assert not any(detect_slip(detector, stream))


def test_slip_recovers():
    detector = SlipDetector(window=10)
    detect_slip(detector, [2.0] * 20)
    assert detector.active
    detect_slip(detector, [1.0] * 20)
    assert not detector.active


def test_slip_detector_validation():
    with pytest.raises(ContractError):
        SlipDetector(window=0)
    with pytest.raises(ContractError):
        SlipDetector(slip_threshold=1.0, recovery_threshold=1.05)


# --- schedules -------------------------------------------------------------------


def test_pipeline_schedule_shape():
    schedule = make_pipeline_schedule(6)
    assert schedule.phases == [(1, 6), (2, 6), (3, 6), (4, 6)]
    schedule.validate()


def test_relations_schedule_shape():
    schedule = make_relations_schedule(4)
    assert schedule.phases == [(4, 1), (4, 2), (4, 3), (4, 4)]
    schedule.validate()


def test_hybrid_schedule_shape():
    schedule = make_hybrid_schedule(6)
    assert schedule.phases == [(1, 2), (2, 3), (3, 4), (4, 5), (4, 6)]
    schedule.validate()
    assert make_hybrid_schedule(3).phases == [(1, 2), (2, 3), (3, 3), (4, 3)]


def test_schedule_invariants_rejected():
    with pytest.raises(ConfigError):
        CurriculumSchedule(SCHEDULE_PIPELINE, [(1, 6), (1, 6)]).validate()
    with pytest.raises(ConfigError):
        CurriculumSchedule(SCHEDULE_PIPELINE, [(1, 6), (2, 5)]).validate()
    with pytest.raises(ConfigError):
        CurriculumSchedule(SCHEDULE_RELATIONS, [(4, 2), (3, 3)]).validate()
    with pytest.raises(ConfigError):
        CurriculumSchedule(SCHEDULE_HYBRID, [(1, 2), (1, 3), (2, 4)]).validate()
    with pytest.raises(ConfigError):
        CurriculumSchedule("mystery", [(1, 2)]).validate()


def test_next_phase_advances_on_ratio_window():
    schedule = make_pipeline_schedule(6, advance_window=100)
    records = [record(i, cost_ratio=1.0) for i in range(100)]
    decision, by_budget = next_phase(schedule, 0, records, phase_budget=10_000)
    assert decision == ADVANCE and not by_budget
    assert next_phase(schedule, 0, records[:99], 10_000) == (STAY, False)


def test_next_phase_budget_exhaustion_flagged():
    schedule = make_pipeline_schedule(6, advance_window=100)
    records = [record(i, cost_ratio=5.0) for i in range(100)]
    decision, by_budget = next_phase(schedule, 0, records, phase_budget=100)
    assert decision == ADVANCE and by_budget


def test_next_phase_done_after_last():
    schedule = make_pipeline_schedule(6)
    records = [record(i, cost_ratio=1.0) for i in range(100)]
    decision, _ = next_phase(schedule, 3, records, phase_budget=100)
    assert decision == DONE


# --- training loops ------------------------------------------------------------


def test_vanilla_zero_episodes_changes_nothing(catalog6, workload6, model6):
    env = make_env(catalog6, model6)
    agent = make_agent(env)
    before = [w.copy() for w in agent.params.weights]
    metrics = train_vanilla_cost(env, workload6.queries, agent, 0,
                                 exploration_seed=1, execution_seed_base=2)
    assert metrics.records == []
    for w, prev in zip(agent.params.weights, before):
        assert np.array_equal(w, prev)


def test_vanilla_metrics_are_ordered_and_consistent(catalog6, workload6, model6):
    env = make_env(catalog6, model6)
    agent = make_agent(env)
    metrics = train_vanilla_cost(env, workload6.queries, agent, 30,
                                 exploration_seed=1, execution_seed_base=2)
    assert [r.episode for r in metrics.records] == list(range(30))
    for r in metrics.records:
        assert r.cost_ratio >= 1.0  # expert is the exact optimum
        assert r.cost_ratio == pytest.approx(r.agent_cost / r.expert_cost)
        assert r.timeout_flag == 0


def test_vanilla_determinism(catalog6, workload6, model6):
    runs = []
    for _ in range(2):
        env = make_env(catalog6, model6)
        agent = make_agent(env)
        metrics = train_vanilla_cost(env, workload6.queries, agent, 40,
                                     exploration_seed=3, execution_seed_base=9)
        runs.append([r.csv_row() for r in metrics.records])
    assert runs[0] == runs[1]


def test_vanilla_two_relation_workload_reaches_expert(catalog6, model6):
    # Tiny action space (one join, a handful of physical choices): the agent
    # should match the expert exactly well within 500 episodes.
    workload = generate_workload(
        catalog6, WorkloadConfig(query_count=10, min_relations=2,
                                 max_relations=2, selection_density=0.6),
        seed=21)
    env = make_env(catalog6, model6, stages=4)
    agent = make_agent(env, warmup=16)
    metrics = train_vanilla_cost(env, workload.queries, agent, 500,
                                 exploration_seed=7, execution_seed_base=8)
    tail = [r.cost_ratio for r in metrics.records[-50:]]
    assert statistics.median(tail) == pytest.approx(1.0)


def test_naive_latency_infinite_budget_has_no_timeouts(catalog6, workload6, model6):
    env = make_env(catalog6, model6, reward=REWARD_LATENCY)
    agent = make_agent(env)
    metrics = train_naive_latency(env, workload6.queries, agent, 40,
                                  exploration_seed=1, execution_seed_base=2,
                                  timeout_multiplier=math.inf)
    assert metrics.info["timeout_count"] == 0


def test_naive_latency_counts_timeouts(catalog6, workload6, model6):
    env = make_env(catalog6, model6, reward=REWARD_LATENCY)
    agent = make_agent(env)
    metrics = train_naive_latency(env, workload6.queries, agent, 60,
                                  exploration_seed=1, execution_seed_base=2,
                                  timeout_multiplier=1.0)
    # A unit budget times expert latency: anything above the expert times out.
    assert metrics.info["timeout_count"] == \
        sum(r.latency_ratio > 1.0 for r in metrics.records)


def corpus_for(catalog, model, queries, stages=1, max_relations=6):
    from planlab.costmodel import simulate_latency
    config = EnvConfig(enabled_stages=stages, max_relations=max_relations)
    histories = []
    for q in queries:
        h = record_episode(config, catalog, q)
        h.latency_seconds = simulate_latency(model, catalog, q,
                                             h.terminal_plan, 10_000 + q.id).seconds
        histories.append(h)
    return histories


def test_pretrain_single_history_memorizes(catalog6, workload6, model6):
    q = next(q for q in workload6.queries if len(q.relation_ids) == 3)
    histories = corpus_for(catalog6, model6, [q])
    env = make_env(catalog6, model6)
    agent = make_agent(env, hidden=(32,), warmup=1)
    result = pretrain_from_demonstration(env, {q.id: q}, histories, agent,
                                         passes=300)
    assert result.final_loss < 1e-4
    assert result.sample_count == len(histories[0].steps)


def test_pretrain_zero_passes_keeps_network(catalog6, workload6, model6):
    histories = corpus_for(catalog6, model6, workload6.queries[:4])
    env = make_env(catalog6, model6)
    agent = make_agent(env)
    before = [w.copy() for w in agent.params.weights]
    result = pretrain_from_demonstration(
        env, {q.id: q for q in workload6.queries}, histories, agent, passes=0)
    assert result.pass_losses == []
    for w, prev in zip(agent.params.weights, before):
        assert np.array_equal(w, prev)


def test_pretrain_empty_log_rejected(catalog6, model6):
    env = make_env(catalog6, model6)
    agent = make_agent(env)
    with pytest.raises(ContractError):
        pretrain_from_demonstration(env, {}, [], agent, passes=1)


def test_pretrain_requires_latencies(catalog6, workload6, model6):
    config = EnvConfig(enabled_stages=1, max_relations=6)
    history = record_episode(config, catalog6, workload6.queries[0])
    env = make_env(catalog6, model6)
    agent = make_agent(env)
    with pytest.raises(ContractError):
        pretrain_from_demonstration(env, {workload6.queries[0].id: workload6.queries[0]},
                                    [history], agent, passes=1)


def test_pretrain_loss_trend_and_agreement(catalog6, model6):
    workload = generate_workload(
        catalog6, WorkloadConfig(query_count=30, min_relations=2,
                                 max_relations=4), seed=33)
    histories = corpus_for(catalog6, model6, workload.queries)
    env = make_env(catalog6, model6)
    agent = make_agent(env, warmup=1)
    queries_by_id = {q.id: q for q in workload.queries}
    result = pretrain_from_demonstration(env, queries_by_id, histories, agent,
                                         passes=25)
    # Training loss should come down substantially over the passes.
    assert result.pass_losses[-1] < result.pass_losses[0]
    agreement = expert_action_agreement(env, queries_by_id, histories, agent)
    assert 0.0 <= agreement <= 1.0
    assert agreement >= 0.5  # mimicry on the training corpus itself


def test_pretrain_holdout_loss_non_increasing(catalog6, model6):
    workload = generate_workload(
        catalog6, WorkloadConfig(query_count=60, min_relations=2,
                                 max_relations=4), seed=34)
    histories = corpus_for(catalog6, model6, workload.queries)
    env = make_env(catalog6, model6)
    agent = make_agent(env, warmup=1, learning_rate=0.003)
    queries_by_id = {q.id: q for q in workload.queries}
    result = pretrain_from_demonstration(env, queries_by_id, histories, agent,
                                         passes=20, holdout_fraction=0.2)
    held = result.holdout_losses
    assert len(held) == 20
    # Momentum SGD wobbles pass to pass; the smoothed trend must not.
    halves = statistics.fmean(held[10:]) <= statistics.fmean(held[:10])
    assert halves
    assert held[-1] <= 0.25 * held[0]


def test_finetune_requires_pretraining(catalog6, workload6, model6):
    env = make_env(catalog6, model6, reward=REWARD_LATENCY)
    agent = make_agent(env)
    with pytest.raises(ContractError):
        finetune_lfd(env, workload6.queries, agent, 5, exploration_seed=1,
                     execution_seed_base=2)


def test_finetune_disabled_slip_never_mixes(catalog6, workload6, model6):
    histories = corpus_for(catalog6, model6, workload6.queries[:10])
    env = make_env(catalog6, model6, reward=REWARD_LATENCY)
    agent = make_agent(env, warmup=1)
    queries_by_id = {q.id: q for q in workload6.queries}
    pretrain_from_demonstration(env, queries_by_id, histories, agent, passes=3)
    detector = SlipDetector(slip_threshold=math.inf, recovery_threshold=1.05)
    metrics = finetune_lfd(env, workload6.queries[:10], agent, 60,
                           exploration_seed=1, execution_seed_base=2,
                           expert_samples=demonstration_samples(
                               env, queries_by_id, histories),
                           slip_detector=detector)
    assert metrics.info["slip_episodes"] == 0


def test_finetune_forced_slip_triggers_mixing(catalog6, model6):
    # Homogeneous five-relation queries: a scrambled network reliably
    # produces bad join orders, so the ratio stream jumps at the scramble.
    workload = generate_workload(
        catalog6, WorkloadConfig(query_count=12, min_relations=5,
                                 max_relations=5), seed=61)
    histories = corpus_for(catalog6, model6, workload.queries)
    env = make_env(catalog6, model6, reward=REWARD_LATENCY)
    agent = make_agent(env, warmup=1)
    queries_by_id = {q.id: q for q in workload.queries}
    pretrain_from_demonstration(env, queries_by_id, histories, agent, passes=40)
    raw = demonstration_samples(env, queries_by_id, histories)
    samples = [(f, agent.normalizer.normalize(t)) for f, t in raw]
    detector = SlipDetector(window=10, slip_threshold=2.0,
                            recovery_threshold=1.1)
    scramble_at = 60

    def scramble(episode, current):
        if episode == scramble_at:
            # Flip the value ordering so argmin picks the worst-looking
            # action, and stop learning so the damage is sustained rather
            # than bursty: the detector watches medians, not spikes.
            current.params.weights[-1] *= -1.0
            current.trainer.learning_rate = 0.0

    metrics = finetune_lfd(env, workload.queries, agent, 100,
                           exploration_seed=1, execution_seed_base=2,
                           expert_samples=samples, slip_detector=detector,
                           on_episode_end=scramble, epsilon=0.0)
    flagged = [r.episode for r in metrics.records if r.slip_active]
    steady = range(scramble_at - 10, scramble_at + 1)
    assert not any(e in steady for e in flagged), "slipped before the scramble"
    after = [e for e in flagged if e > scramble_at]
    assert after, "slip mixing never activated after the scramble"
    assert min(after) <= scramble_at + detector.window + 1


def test_bootstrap_phase2_zero_reduces_to_vanilla(catalog6, workload6, model6):
    env_v = make_env(catalog6, model6)
    agent_v = make_agent(env_v)
    vanilla = train_vanilla_cost(env_v, workload6.queries, agent_v, 120,
                                 exploration_seed=5, execution_seed_base=6)

    env_b = make_env(catalog6, model6)
    agent_b = make_agent(env_b)
    boot = train_bootstrap(env_b, workload6.queries, agent_b,
                           phase1_cap=120, phase2_episodes=0,
                           exploration_seed=5, execution_seed_base=6,
                           convergence_window=30)
    assert len(boot.records) <= len(vanilla.records)
    want = [r.csv_row() for r in vanilla.records[:len(boot.records)]]
    assert [r.csv_row() for r in boot.records] == want


def test_bootstrap_runs_both_phases(catalog6, workload6, model6):
    env = make_env(catalog6, model6)
    agent = make_agent(env)
    metrics = train_bootstrap(env, workload6.queries, agent,
                              phase1_cap=80, phase2_episodes=40,
                              exploration_seed=5, execution_seed_base=6,
                              convergence_window=20, calibration_tail=40)
    phases = {r.phase for r in metrics.records}
    assert phases == {"phase1", "phase2"}
    assert len(metrics.phase_records("phase2")) == 40
    assert "calibration" in metrics.info
    cal = metrics.info["calibration"]
    assert cal["c_min"] < cal["c_max"] and cal["l_min"] < cal["l_max"]


def test_curriculum_pipeline_phase1_identical_to_vanilla(catalog6, workload6, model6):
    episodes = 40
    env_v = make_env(catalog6, model6, stages=1)
    agent_v = make_agent(env_v)
    vanilla = train_vanilla_cost(env_v, workload6.queries, agent_v, episodes,
                                 exploration_seed=4, execution_seed_base=5)

    def factory(stages):
        return make_env(catalog6, model6, stages=stages)

    agent_c = make_agent(factory(1))
    schedule = make_pipeline_schedule(6)
    metrics = train_curriculum(factory, workload6.queries, agent_c, schedule,
                               episodes_per_phase=episodes,
                               exploration_seed=4, execution_seed_base=5)
    phase1 = [r.csv_row() for r in metrics.phase_records("phase1")]
    assert phase1 == [r.csv_row() for r in vanilla.records]
    assert len({r.phase for r in metrics.records}) == 4


def test_curriculum_relations_phase1_has_single_relation_queries(catalog6, model6):
    workload = generate_workload(
        catalog6, WorkloadConfig(query_count=30, min_relations=1,
                                 max_relations=3), seed=51)

    def factory(stages):
        return make_env(catalog6, model6, stages=stages, max_relations=3)

    agent = make_agent(factory(4))
    schedule = make_relations_schedule(3)
    metrics = train_curriculum(factory, workload.queries, agent, schedule,
                               episodes_per_phase=15,
                               exploration_seed=4, execution_seed_base=5)
    singles = {q.id for q in workload.queries if len(q.relation_ids) == 1}
    for r in metrics.phase_records("phase1"):
        assert r.query_id in singles
        assert r.cost_ratio == 1.0  # no join decisions to get wrong


def test_curriculum_empty_phase_workload_rejected(catalog6, workload6, model6):
    def factory(stages):
        return make_env(catalog6, model6, stages=stages)

    agent = make_agent(factory(1))
    schedule = make_relations_schedule(6)  # phase 1 wants 1-relation queries
    with pytest.raises(ConfigError):
        train_curriculum(factory, workload6.queries, agent, schedule,
                         episodes_per_phase=10,
                         exploration_seed=1, execution_seed_base=2)


def test_epsilon_schedule_shape():
    sched = EpsilonSchedule(start=0.2, end=0.01, fraction=0.5)
    assert sched.value(0, 100) == pytest.approx(0.2)
    assert sched.value(25, 100) == pytest.approx(0.105)
    assert sched.value(50, 100) == 0.01
    assert sched.value(99, 100) == 0.01
