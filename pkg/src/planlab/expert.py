"""Classical optimizers: the demonstration expert, evaluation baseline and
completion mechanism for stages the learned policy does not control.

optimize_dp is exact over the full plan space (all ordered bushy trees,
including cross-product joins, times all access paths, join operators and the
aggregate operator). Keeping one best plan per relation subset is sound here
because a subset's output cardinality does not depend on the join shape, so a
parent's cost is monotone in its children's costs.

The cost arithmetic below deliberately mirrors costmodel._evaluate expression
for expression so that incrementally computed costs equal cost_plan() of the
assembled plan bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

from .catalog import Catalog, Query
from .costmodel import (
    C_HASH_AGG,
    C_HASH_BUILD,
    C_HASH_PROBE,
    C_IDX_LOOKUP,
    C_NL,
    C_RANDOM,
    C_SEQ,
    C_SORT_AGG,
    join_selectivity_between,
)
from .env import (
    Action,
    Env,
    EnvConfig,
    EnvState,
    action_from_dict,
    action_to_dict,
    state_from_dict,
    state_to_dict,
)
from .errors import ContractError, EncodingError, FormatError, GuardError
from .plans import (
    AggregateNode,
    HASH_AGGREGATE,
    HASH_JOIN,
    INDEX_SCAN,
    JoinNode,
    JoinTree,
    NESTED_LOOP,
    PhysicalPlan,
    PlanNode,
    ScanNode,
    SEQ_SCAN,
    SORT_AGGREGATE,
    indexable_attributes,
    plan_from_dict,
    plan_to_dict,
)

DP_GUARD = 14

EXPERT_DP = "dp"
EXPERT_GREEDY = "greedy"


@dataclass
class HistoryStep:
    action: Action
    state: EnvState  # snapshot in which the action was taken


@dataclass
class EpisodeHistory:
    query_id: int
    steps: list[HistoryStep]
    terminal_plan: PhysicalPlan
    latency_seconds: Optional[float] = None


@dataclass
class PartialDecisions:
    """Decisions for a prefix of the pipeline; later stages are left open.

    ``aggregate_decided`` distinguishes "the aggregate stage was performed and
    chose nothing because the query has no aggregate" from "not yet decided".
    """

    join_tree: Optional[JoinTree] = None
    access_paths: Optional[dict[int, tuple[str, Optional[int]]]] = None
    join_operators: Optional[dict[frozenset[int], str]] = None
    aggregate_operator: Optional[str] = None
    aggregate_decided: bool = False


@dataclass
class _Best:
    cost: float
    out: float
    plan: PlanNode


def _scan_candidates(catalog: Catalog, query: Query, rid: int) -> list[_Best]:
    rel = catalog.relation(rid)
    rows = float(rel.cardinality)
    out = rows
    for pred in query.selection_predicates:
        if pred.relation_id == rid:
            out *= pred.selectivity
    candidates = [_Best(C_SEQ * rows, out, ScanNode(rid, SEQ_SCAN))]
    for attr in indexable_attributes(catalog, query, rid):
        cost = C_IDX_LOOKUP * math.log2(rows) + C_RANDOM * out
        candidates.append(_Best(cost, out, ScanNode(rid, INDEX_SCAN, attr)))
    return candidates


def _best_scan(catalog: Catalog, query: Query, rid: int) -> _Best:
    best = None
    for cand in _scan_candidates(catalog, query, rid):
        if best is None or cand.cost < best.cost:
            best = cand
    return best


def _join_cost(op: str, left: _Best, right: _Best) -> float:
    if op == NESTED_LOOP:
        return left.cost + right.cost + C_NL * left.out * right.out
    return left.cost + right.cost + C_HASH_BUILD * left.out + C_HASH_PROBE * right.out


def _aggregate_choice(out_rows: float, fixed: Optional[str]) -> tuple[str, float]:
    hash_cost = C_HASH_AGG * out_rows
    sort_cost = C_SORT_AGG * out_rows * math.log2(out_rows + 2)
    if fixed == HASH_AGGREGATE:
        return HASH_AGGREGATE, hash_cost
    if fixed == SORT_AGGREGATE:
        return SORT_AGGREGATE, sort_cost
    if sort_cost < hash_cost:
        return SORT_AGGREGATE, sort_cost
    return HASH_AGGREGATE, hash_cost


def optimize_dp(catalog: Catalog, query: Query) -> PhysicalPlan:
    """Exact cost-minimal plan by dynamic programming over relation subsets."""
    rels = sorted(query.relation_ids)
    n = len(rels)
    if n > DP_GUARD:
        raise GuardError(f"refusing subset DP over {n} relations (guard {DP_GUARD})")

    best: list[Optional[_Best]] = [None] * (1 << n)
    leafsets: list[frozenset[int]] = [frozenset()] * (1 << n)
    for i, rid in enumerate(rels):
        mask = 1 << i
        best[mask] = _best_scan(catalog, query, rid)
        leafsets[mask] = frozenset((rid,))

    for mask in range(1, 1 << n):
        if mask & (mask - 1) == 0:  # singleton, already done
            continue
        leafsets[mask] = frozenset(rels[i] for i in range(n) if mask >> i & 1)
        sub = (mask - 1) & mask
        while sub:
            rest = mask ^ sub
            left, right = best[sub], best[rest]
            sel = join_selectivity_between(query, leafsets[sub], leafsets[rest])
            out = left.out * right.out * sel
            for op in (NESTED_LOOP, HASH_JOIN):
                cost = _join_cost(op, left, right)
                if best[mask] is None or cost < best[mask].cost:
                    best[mask] = _Best(cost, out, JoinNode(op, left.plan, right.plan))
            sub = (sub - 1) & mask

    top = best[(1 << n) - 1]
    if not query.aggregate:
        return top.plan
    op, agg_cost = _aggregate_choice(top.out, None)
    return AggregateNode(op, top.plan)


def optimize_greedy(catalog: Catalog, query: Query) -> PhysicalPlan:
    """PostgreSQL-flavoured greedy bottom-up join search.

    At each step every pair of current subtrees is costed (with its best
    operator and operand order) and the cheapest joined subtree wins; ties go
    to the earliest pair in canonical order.
    """
    rels = sorted(query.relation_ids)
    subtrees: list[tuple[frozenset[int], _Best]] = []
    for rid in rels:
        subtrees.append((frozenset((rid,)), _best_scan(catalog, query, rid)))

    while len(subtrees) > 1:
        chosen = None
        for i in range(len(subtrees)):
            for j in range(i + 1, len(subtrees)):
                leaves_i, best_i = subtrees[i]
                leaves_j, best_j = subtrees[j]
                sel = join_selectivity_between(query, leaves_i, leaves_j)
                out = best_i.out * best_j.out * sel
                for left, right in ((best_i, best_j), (best_j, best_i)):
                    for op in (NESTED_LOOP, HASH_JOIN):
                        cost = _join_cost(op, left, right)
                        if chosen is None or cost < chosen[0].cost:
                            joined = _Best(cost, out, JoinNode(op, left.plan, right.plan))
                            chosen = (joined, i, j, leaves_i | leaves_j)
        joined, i, j, leaves = chosen
        subtrees = [entry for k, entry in enumerate(subtrees) if k not in (i, j)]
        subtrees.append((leaves, joined))
        subtrees.sort(key=lambda entry: min(entry[0]))

    top = subtrees[0][1]
    if not query.aggregate:
        return top.plan
    op, _ = _aggregate_choice(top.out, None)
    return AggregateNode(op, top.plan)


def complete_partial(catalog: Catalog, query: Query,
                     partial: PartialDecisions) -> PhysicalPlan:
    """Fill undecided pipeline stages with cost-optimal choices.

    Decided stages must form a pipeline prefix (join order, then access paths,
    then join operators, then the aggregate operator). With a fixed join tree
    the remaining choices decompose per node, which is exact because operator
    and access-path choices never change output cardinalities.
    """
    _check_prefix(partial, query)
    if partial.join_tree is None:
        return optimize_dp(catalog, query)

    tree = partial.join_tree
    if tree.leaves != query.relation_ids:
        raise ContractError("join tree leaves do not match the query")

    def build(t: JoinTree) -> _Best:
        if t.is_leaf:
            rid = t.relation_id
            if partial.access_paths is not None:
                path, attr = partial.access_paths[rid]
                for cand in _scan_candidates(catalog, query, rid):
                    node = cand.plan
                    if node.access_path == path and node.index_attribute_id == attr:
                        return cand
                raise ContractError(
                    f"access path {path!r} on attribute {attr!r} is not valid "
                    f"for relation {rid}")
            return _best_scan(catalog, query, rid)
        left = build(t.left)
        right = build(t.right)
        sel = join_selectivity_between(query, t.left.leaves, t.right.leaves)
        out = left.out * right.out * sel
        fixed_op = None
        if partial.join_operators is not None:
            fixed_op = partial.join_operators.get(t.leaves)
            if fixed_op is None:
                raise ContractError(
                    f"join operators decided but node {sorted(t.leaves)} missing")
        best = None
        for op in (NESTED_LOOP, HASH_JOIN):
            if fixed_op is not None and op != fixed_op:
                continue
            cost = _join_cost(op, left, right)
            if best is None or cost < best.cost:
                best = _Best(cost, out, JoinNode(op, left.plan, right.plan))
        return best

    top = build(tree)
    if not query.aggregate:
        if partial.aggregate_operator is not None:
            raise ContractError("aggregate operator decided for a query without one")
        return top.plan
    fixed = partial.aggregate_operator if partial.aggregate_decided else None
    if partial.aggregate_decided and partial.aggregate_operator is None:
        raise ContractError("aggregate stage decided but no operator chosen")
    op, _ = _aggregate_choice(top.out, fixed)
    return AggregateNode(op, top.plan)


def _check_prefix(partial: PartialDecisions, query: Query) -> None:
    stages = [partial.join_tree is not None,
              partial.access_paths is not None,
              partial.join_operators is not None,
              partial.aggregate_decided]
    seen_gap = False
    for decided in stages:
        if decided and seen_gap:
            raise ContractError("decided stages must form a pipeline prefix")
        if not decided:
            seen_gap = True
    if partial.access_paths is not None:
        if set(partial.access_paths) != set(query.relation_ids):
            raise ContractError("access paths must cover exactly the query relations")


def expert_plan(catalog: Catalog, query: Query, expert: str) -> PhysicalPlan:
    if expert == EXPERT_DP:
        return optimize_dp(catalog, query)
    if expert == EXPERT_GREEDY:
        return optimize_greedy(catalog, query)
    raise ContractError(f"unknown expert {expert!r}")


def record_episode(env_config: EnvConfig, catalog: Catalog, query: Query,
                   expert: str = EXPERT_DP) -> EpisodeHistory:
    """Decompose the expert's plan into environment actions and replay them.

    The history is produced by actually driving an environment, so replaying
    its actions from reset reproduces the terminal plan by construction. When
    several expert joins are simultaneously available the smallest canonical
    action index is emitted.
    """
    plan = expert_plan(catalog, query, expert)
    env = Env(env_config, catalog)
    state, legal = env.reset(query)

    scans, operators, aggregate_op = _plan_decisions(plan)
    join_nodes = set(_internal_nodes(plan))

    steps: list[HistoryStep] = []
    while not state.terminal:
        action = _expert_action(state, legal, scans, operators, aggregate_op,
                                join_nodes)
        steps.append(HistoryStep(action=action, state=state))
        state, _ = env.step(state, action)
        legal = env.legal_actions(state) if not state.terminal else []

    terminal_plan = env.extract_plan(state)
    return EpisodeHistory(query_id=query.id, steps=steps,
                          terminal_plan=terminal_plan)


def _plan_decisions(plan: PhysicalPlan):
    scans: dict[int, tuple[str, Optional[int]]] = {}
    operators: dict[frozenset[int], str] = {}
    aggregate_op: Optional[str] = None

    def walk(node: PlanNode) -> frozenset[int]:
        nonlocal aggregate_op
        if isinstance(node, AggregateNode):
            aggregate_op = node.operator
            return walk(node.child)
        if isinstance(node, ScanNode):
            scans[node.relation_id] = (node.access_path, node.index_attribute_id)
            return frozenset((node.relation_id,))
        leaves = walk(node.left) | walk(node.right)
        operators[leaves] = node.operator
        return leaves

    walk(plan)
    return scans, operators, aggregate_op


def _internal_nodes(plan: PhysicalPlan) -> list[frozenset[int]]:
    nodes: list[frozenset[int]] = []

    def walk(node: PlanNode) -> frozenset[int]:
        if isinstance(node, AggregateNode):
            return walk(node.child)
        if isinstance(node, ScanNode):
            return frozenset((node.relation_id,))
        leaves = walk(node.left) | walk(node.right)
        nodes.append(leaves)
        return leaves

    walk(plan)
    return nodes


def _expert_action(state: EnvState, legal: list[Action],
                   scans: dict, operators: dict, aggregate_op: Optional[str],
                   join_nodes: set[frozenset[int]]) -> Action:
    from .env import ACTION_ACCESS, ACTION_AGGREGATE, ACTION_JOIN, ACTION_OPERATOR

    for action in legal:  # legal is in canonical index order
        if action.kind == ACTION_JOIN:
            i, j = action.pair
            merged = state.forest[i].leaves | state.forest[j].leaves
            if merged in join_nodes:
                return action
        elif action.kind == ACTION_ACCESS:
            path, attr = scans[action.relation_id]
            if action.access_path == path and action.index_attribute_id == attr:
                return action
        elif action.kind == ACTION_OPERATOR:
            if operators[action.node_leaves] == action.operator:
                return action
        elif action.kind == ACTION_AGGREGATE:
            if action.operator == aggregate_op:
                return action
    raise EncodingError("expert plan is not expressible in the current action space")


# --- episode history persistence (one JSON record per line) ----------------


def history_to_dict(history: EpisodeHistory) -> dict:
    return {
        "query_id": history.query_id,
        "steps": [{"action": action_to_dict(s.action),
                   "state": state_to_dict(s.state)} for s in history.steps],
        "terminal_plan": plan_to_dict(history.terminal_plan),
        "latency_seconds": history.latency_seconds,
    }


def history_from_dict(doc: dict) -> EpisodeHistory:
    return EpisodeHistory(
        query_id=doc["query_id"],
        steps=[HistoryStep(action=action_from_dict(s["action"]),
                           state=state_from_dict(s["state"]))
               for s in doc["steps"]],
        terminal_plan=plan_from_dict(doc["terminal_plan"]),
        latency_seconds=doc["latency_seconds"],
    )


def append_history(path: str, history: EpisodeHistory) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(history_to_dict(history), sort_keys=True))
        fh.write("\n")


def load_histories(path: str) -> list[EpisodeHistory]:
    histories = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                histories.append(history_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed history ({exc})") from exc
    return histories
