import math

import pytest

from planlab.catalog import (
    AttributeInfo,
    Catalog,
    CatalogConfig,
    JoinEdge,
    Query,
    RelationInfo,
    SelectionPredicate,
    WorkloadConfig,
    generate_catalog,
    generate_workload,
)
from planlab.costmodel import cost_plan
from planlab.env import ACTION_JOIN, Env, EnvConfig
from planlab.errors import ContractError, FormatError, GuardError
from planlab.expert import (
    EXPERT_GREEDY,
    PartialDecisions,
    append_history,
    complete_partial,
    load_histories,
    optimize_dp,
    optimize_greedy,
    record_episode,
)
from planlab.plans import (
    INDEX_SCAN,
    ScanNode,
    SEQ_SCAN,
    enumerate_join_trees,
    join_tree_of,
    validate_plan,
)

import oracle


def test_dp_single_relation_seq_scan():
    rel = RelationInfo(0, "solo", 1000, (AttributeInfo(0, "a", 10, None),))
    cat = Catalog(relations=[rel], join_edges=[])
    q = Query(0, frozenset({0}), [], [], aggregate=False)
    plan = optimize_dp(cat, q)
    assert plan == ScanNode(0, SEQ_SCAN)


def test_dp_guard():
    rels = [RelationInfo(i, f"r{i}", 10, (AttributeInfo(0, "a", 5, None),))
            for i in range(15)]
    edges = [JoinEdge(i, 0, i + 1, 0, 0.5) for i in range(14)]
    cat = Catalog(relations=rels, join_edges=edges)
    q = Query(0, frozenset(range(15)), edges, [], aggregate=False)
    with pytest.raises(GuardError):
        optimize_dp(cat, q)


def test_oracle_per_node_optimization_is_exact(catalog6, workload6):
    # Validates the tree oracle itself against the full cross product.
    checked = 0
    for q in workload6.queries:
        if len(q.relation_ids) > 4:
            continue
        assert oracle.best_cost(catalog6, q) == oracle.best_cost_exhaustive(catalog6, q)
        checked += 1
        if checked >= 6:
            break
    assert checked >= 3


def test_dp_matches_bruteforce_minimum(catalog6, workload6):
    for q in workload6.queries:
        if len(q.relation_ids) > 5:
            continue
        plan = optimize_dp(catalog6, q)
        assert validate_plan(plan, q, catalog6).ok
        assert cost_plan(catalog6, q, plan) == oracle.best_cost(catalog6, q)


def test_dp_picks_index_scan_for_tiny_selectivity():
    rel = RelationInfo(0, "t", 100000,
                       (AttributeInfo(0, "a", 50000, "btree"),))
    cat = Catalog(relations=[rel], join_edges=[])
    q = Query(0, frozenset({0}), [],
              [SelectionPredicate(0, 0, 0.0001)], aggregate=False)
    # seq: 100000; index: log2(1e5) + 4 * 10 = ~56.6
    plan = optimize_dp(cat, q)
    assert plan == ScanNode(0, INDEX_SCAN, 0)
    assert cost_plan(cat, q, plan) == pytest.approx(math.log2(100000) + 40.0)


def test_greedy_equals_dp_for_two_relations(catalog6):
    wl = generate_workload(catalog6, WorkloadConfig(query_count=10, min_relations=2,
                                                    max_relations=2), seed=44)
    for q in wl.queries:
        dp_cost = cost_plan(catalog6, q, optimize_dp(catalog6, q))
        greedy_cost = cost_plan(catalog6, q, optimize_greedy(catalog6, q))
        assert greedy_cost == dp_cost


def test_greedy_never_beats_dp(catalog6, workload6):
    for q in workload6.queries:
        dp_cost = cost_plan(catalog6, q, optimize_dp(catalog6, q))
        greedy_cost = cost_plan(catalog6, q, optimize_greedy(catalog6, q))
        assert greedy_cost >= dp_cost


def test_greedy_strictly_worse_somewhere_on_six_relations():
    cat = generate_catalog(CatalogConfig(relation_count=9, edge_density=0.4), seed=31)
    wl = generate_workload(cat, WorkloadConfig(query_count=50, min_relations=6,
                                               max_relations=6), seed=32)
    gaps = 0
    for q in wl.queries:
        dp_cost = cost_plan(cat, q, optimize_dp(cat, q))
        greedy_cost = cost_plan(cat, q, optimize_greedy(cat, q))
        assert greedy_cost >= dp_cost
        gaps += greedy_cost > dp_cost
    assert gaps >= 1


def four_relation_query(catalog6, workload6):
    for q in workload6.queries:
        if len(q.relation_ids) == 4:
            return q
    raise AssertionError("fixture workload should contain a 4-relation query")


def test_record_episode_join_only_three_actions(catalog6, workload6):
    q = four_relation_query(catalog6, workload6)
    config = EnvConfig(enabled_stages=1, max_relations=6)
    history = record_episode(config, catalog6, q)
    assert len(history.steps) == 3
    assert all(s.action.kind == ACTION_JOIN for s in history.steps)


def test_record_episode_replay_identity(catalog6, workload6):
    config = EnvConfig(enabled_stages=4, max_relations=6)
    env = Env(config, catalog6)
    for q in workload6.queries[:12]:
        history = record_episode(config, catalog6, q)
        state, _ = env.reset(q)
        for step in history.steps:
            state, _ = env.step(state, step.action)
        assert state.terminal
        assert env.extract_plan(state) == history.terminal_plan
        # Replay reproduces the expert's cost exactly.
        assert cost_plan(catalog6, q, history.terminal_plan) == \
            cost_plan(catalog6, q, optimize_dp(catalog6, q))


def test_record_episode_greedy_expert(catalog6, workload6):
    config = EnvConfig(enabled_stages=1, max_relations=6)
    q = four_relation_query(catalog6, workload6)
    history = record_episode(config, catalog6, q, expert=EXPERT_GREEDY)
    # Same join shape as the greedy plan (left/right order is canonical).
    greedy_nodes = {n.leaves for n in _internal(join_tree_of(optimize_greedy(catalog6, q)))}
    replay_nodes = {n.leaves for n in _internal(join_tree_of(history.terminal_plan))}
    assert replay_nodes == greedy_nodes


def _internal(tree):
    if tree.is_leaf:
        return []
    return [tree] + _internal(tree.left) + _internal(tree.right)


def test_record_episode_single_relation_all_stages(catalog6):
    wl = generate_workload(catalog6, WorkloadConfig(query_count=5, min_relations=1,
                                                    max_relations=1), seed=9)
    config = EnvConfig(enabled_stages=4, max_relations=6)
    for q in wl.queries:
        history = record_episode(config, catalog6, q)
        kinds = [s.action.kind for s in history.steps]
        assert ACTION_JOIN not in kinds
        expected = 1 + (1 if q.aggregate else 0)
        assert len(kinds) == expected


def test_complete_partial_empty_equals_dp(catalog6, workload6):
    for q in workload6.queries[:8]:
        assert complete_partial(catalog6, q, PartialDecisions()) == \
            optimize_dp(catalog6, q)


def test_complete_partial_fully_decided_is_identity(catalog6, workload6):
    from planlab.expert import _plan_decisions
    for q in workload6.queries[:8]:
        plan = optimize_dp(catalog6, q)
        scans, operators, agg = _plan_decisions(plan)
        partial = PartialDecisions(
            join_tree=join_tree_of(plan),
            access_paths=scans,
            join_operators=operators,
            aggregate_operator=agg,
            aggregate_decided=True,
        )
        assert complete_partial(catalog6, q, partial) == plan


def test_complete_partial_bad_order_costs_more(catalog6, workload6):
    # Fixing the worst enumerated join order can never beat the optimum.
    q = next(q for q in workload6.queries if len(q.relation_ids) == 4)
    dp_cost = cost_plan(catalog6, q, optimize_dp(catalog6, q))
    worst_tree = max(enumerate_join_trees(q),
                     key=lambda t: cost_plan(
                         catalog6, q,
                         complete_partial(catalog6, q, PartialDecisions(join_tree=t))))
    fixed = complete_partial(catalog6, q, PartialDecisions(join_tree=worst_tree))
    assert cost_plan(catalog6, q, fixed) >= dp_cost


def test_completion_monotone_in_constraints(catalog6, workload6):
    # Fixing more stages (with arbitrary choices) never lowers the cost.
    from planlab.plans import SEQ_SCAN as SEQ, HASH_JOIN as HJ, HASH_AGGREGATE
    for q in workload6.queries[:10]:
        if len(q.relation_ids) < 2:
            continue
        tree = next(enumerate_join_trees(q))
        nodes = [t.leaves for t in _internal(tree)]
        partials = [
            PartialDecisions(),
            PartialDecisions(join_tree=tree),
            PartialDecisions(join_tree=tree,
                             access_paths={r: (SEQ, None) for r in q.relation_ids}),
            PartialDecisions(join_tree=tree,
                             access_paths={r: (SEQ, None) for r in q.relation_ids},
                             join_operators={n: HJ for n in nodes}),
            PartialDecisions(join_tree=tree,
                             access_paths={r: (SEQ, None) for r in q.relation_ids},
                             join_operators={n: HJ for n in nodes},
                             aggregate_operator=HASH_AGGREGATE if q.aggregate else None,
                             aggregate_decided=True),
        ]
        costs = [cost_plan(catalog6, q, complete_partial(catalog6, q, p))
                 for p in partials]
        assert all(a <= b for a, b in zip(costs, costs[1:]))


def test_complete_partial_prefix_violations(catalog6, workload6):
    q = workload6.queries[0]
    plan = optimize_dp(catalog6, q)
    with pytest.raises(ContractError):
        complete_partial(catalog6, q, PartialDecisions(
            join_tree=None,
            access_paths={rid: (SEQ_SCAN, None) for rid in q.relation_ids}))
    with pytest.raises(ContractError):
        complete_partial(catalog6, q, PartialDecisions(
            join_tree=join_tree_of(plan),
            access_paths={rid: (SEQ_SCAN, None) for rid in list(q.relation_ids)[:1]}))


def test_history_log_roundtrip(catalog6, workload6, tmp_path):
    config = EnvConfig(enabled_stages=2, max_relations=6)
    path = tmp_path / "histories.jsonl"
    originals = []
    for q in workload6.queries[:5]:
        h = record_episode(config, catalog6, q)
        h.latency_seconds = 1.5 + q.id
        append_history(path, h)
        originals.append(h)
    loaded = load_histories(path)
    assert len(loaded) == len(originals)
    for a, b in zip(loaded, originals):
        assert a.query_id == b.query_id
        assert a.terminal_plan == b.terminal_plan
        assert a.latency_seconds == b.latency_seconds
        assert [s.action.signature() for s in a.steps] == \
            [s.action.signature() for s in b.steps]


def test_history_log_malformed_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"query_id": 1, "steps": [}\n')
    with pytest.raises(FormatError):
        load_histories(path)
