"""Bottom-up plan-construction environment with a configurable stage pipeline.

An episode builds a physical plan for one query. Every relation starts as its
own subtree; join actions merge subtree pairs until one tree remains, after
which (depending on how many pipeline stages are enabled) access paths, join
operators and the aggregate operator are decided one action at a time. Stages
the agent does not control are filled in by a classical optimizer when the
terminal plan is extracted.

States are immutable values and transitions are pure functions of
(state, action), which makes expert-episode replay and testing exact. An Env
instance owns the per-query caches, so states must be used with the Env that
produced them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .catalog import Catalog, Query
from .costmodel import (
    C_HASH_AGG,
    C_IDX_LOOKUP,
    C_RANDOM,
    C_SEQ,
    C_SORT_AGG,
    LatencyModel,
    cost_plan,
    join_selectivity_between,
    simulate_latency,
)
from .errors import ContractError
from .plans import (
    AGGREGATE_OPERATORS,
    HASH_AGGREGATE,
    INDEX_SCAN,
    JOIN_OPERATORS,
    JoinTree,
    NESTED_LOOP,
    PhysicalPlan,
    SEQ_SCAN,
    indexable_attributes,
    join,
    leaf,
    tree_from_list,
    tree_to_list,
)

STAGE_JOIN = 0
STAGE_ACCESS = 1
STAGE_OPERATOR = 2
STAGE_AGGREGATE = 3
STAGE_NAMES = ("join_order", "access_path", "join_operator", "aggregate_operator")

REWARD_COST = "cost"
REWARD_LATENCY = "latency"
REWARD_SCALED_LATENCY = "scaled_latency"
REWARD_KINDS = (REWARD_COST, REWARD_LATENCY, REWARD_SCALED_LATENCY)

ACTION_JOIN = "join_pair"
ACTION_ACCESS = "access_path"
ACTION_OPERATOR = "join_operator"
ACTION_AGGREGATE = "aggregate_operator"

N_SCALARS = 8


def feature_length(max_relations: int) -> int:
    """Fixed encoding length: incidence block + two operand one-hots + scalars."""
    return max_relations * max_relations + 2 * max_relations + N_SCALARS


@dataclass(frozen=True)
class RewardSpec:
    kind: str = REWARD_COST
    calibration: Optional[object] = None  # trainers.BootstrapCalibration when scaled

    def validate(self) -> None:
        if self.kind not in REWARD_KINDS:
            raise ContractError(f"unknown reward kind {self.kind!r}")


@dataclass(frozen=True)
class EnvConfig:
    enabled_stages: int            # pipeline prefix length, 1..4
    max_relations: int             # N_max; bounds feature encoding
    reward: RewardSpec = RewardSpec()

    def validate(self) -> None:
        if not 1 <= self.enabled_stages <= 4:
            raise ContractError("enabled_stages must be in 1..4")
        if self.max_relations < 1:
            raise ContractError("max_relations must be >= 1")
        self.reward.validate()

    @property
    def feature_length(self) -> int:
        return feature_length(self.max_relations)


@dataclass(frozen=True)
class Subtree:
    tree: JoinTree
    out_rows: float  # estimated output rows

    @property
    def leaves(self) -> frozenset[int]:
        return self.tree.leaves

    @property
    def min_leaf(self) -> int:
        return min(self.tree.leaves)


@dataclass(frozen=True)
class Action:
    kind: str
    pair: Optional[tuple[int, int]] = None          # forest indices, i < j
    relation_id: Optional[int] = None
    access_path: Optional[str] = None
    index_attribute_id: Optional[int] = None
    node_leaves: Optional[frozenset[int]] = None
    operator: Optional[str] = None
    index: int = 0  # canonical position among the state's legal actions

    def signature(self) -> tuple:
        """Identity of the action, independent of its list position."""
        return (self.kind, self.pair, self.relation_id, self.access_path,
                self.index_attribute_id, self.node_leaves, self.operator)


@dataclass(frozen=True)
class EnvState:
    query_id: int
    forest: tuple[Subtree, ...]  # sorted by smallest contained relation id
    stage: int
    access_paths: tuple[tuple[int, str, Optional[int]], ...]
    join_operators: tuple[tuple[tuple[int, ...], str], ...]
    aggregate_operator: Optional[str]
    terminal: bool

    def access_path_map(self) -> dict[int, tuple[str, Optional[int]]]:
        return {rid: (path, attr) for rid, path, attr in self.access_paths}

    def join_operator_map(self) -> dict[frozenset[int], str]:
        return {frozenset(leaves): op for leaves, op in self.join_operators}


class _QueryContext:
    """Per-query caches shared by transitions and the feature encoder."""

    def __init__(self, catalog: Catalog, query: Query):
        self.query = query
        self.relations = sorted(query.relation_ids)
        self.column = {rid: i for i, rid in enumerate(self.relations)}
        self.scan_out: dict[int, float] = {}
        for rid in self.relations:
            out = float(catalog.relation(rid).cardinality)
            for pred in query.selection_predicates:
                if pred.relation_id == rid:
                    out *= pred.selectivity
            self.scan_out[rid] = out
        self.subtree_out: dict[frozenset[int], float] = {}
        self.indexable = {rid: indexable_attributes(catalog, query, rid)
                          for rid in self.relations}


class Env:
    """Plan-construction environment bound to one catalog and latency model."""

    def __init__(self, config: EnvConfig, catalog: Catalog,
                 latency_model: Optional[LatencyModel] = None,
                 completer: Optional[Callable] = None):
        config.validate()
        self.config = config
        self.catalog = catalog
        self.latency_model = latency_model
        self._completer = completer
        self._norm_div = math.log1p(catalog.max_cardinality())
        self._ctx: Optional[_QueryContext] = None
        self._contexts: dict[int, _QueryContext] = {}

    def with_reward(self, reward: RewardSpec) -> "Env":
        """A sibling environment sharing catalog, model and caches."""
        other = Env(replace(self.config, reward=reward), self.catalog,
                    self.latency_model, self._completer)
        other._contexts = self._contexts
        return other

    # -- episode lifecycle ------------------------------------------------

    def bind_query(self, query: Query) -> None:
        """Make ``query`` current, e.g. to featurize recorded states."""
        ctx = self._contexts.get(query.id)
        if ctx is None or ctx.query is not query:
            # Ids are only unique within one workload; rebuild on collisions.
            ctx = _QueryContext(self.catalog, query)
            self._contexts[query.id] = ctx
        self._ctx = ctx

    @property
    def query(self) -> Query:
        if self._ctx is None:
            raise ContractError("no query bound; call reset() first")
        return self._ctx.query

    def reset(self, query: Query) -> tuple[EnvState, list[Action]]:
        if len(query.relation_ids) > self.config.max_relations:
            raise ContractError(
                f"query {query.id} has {len(query.relation_ids)} relations, "
                f"env allows {self.config.max_relations}")
        self.bind_query(query)
        forest = tuple(sorted(
            (Subtree(leaf(rid), self._ctx.scan_out[rid]) for rid in query.relation_ids),
            key=lambda s: s.min_leaf))
        state = EnvState(query_id=query.id, forest=forest, stage=STAGE_JOIN,
                         access_paths=(), join_operators=(),
                         aggregate_operator=None, terminal=False)
        state = self._advance(state)
        return state, (self.legal_actions(state) if not state.terminal else [])

    def _remaining(self, state: EnvState, stage: int) -> bool:
        n = len(self._ctx.relations)
        if stage == STAGE_JOIN:
            return len(state.forest) > 1
        if stage == STAGE_ACCESS:
            return len(state.access_paths) < n
        if stage == STAGE_OPERATOR:
            return len(state.join_operators) < n - 1
        if stage == STAGE_AGGREGATE:
            return self._ctx.query.aggregate and state.aggregate_operator is None
        return False

    def _advance(self, state: EnvState) -> EnvState:
        stage = state.stage
        while stage < self.config.enabled_stages and not self._remaining(state, stage):
            stage += 1
        if stage >= self.config.enabled_stages:
            return replace(state, stage=stage, terminal=True)
        return replace(state, stage=stage)

    # -- actions -----------------------------------------------------------

    def legal_actions(self, state: EnvState) -> list[Action]:
        if state.terminal:
            raise ContractError("no legal actions in a terminal state")
        self._check_state(state)
        actions: list[Action] = []
        if state.stage == STAGE_JOIN:
            k = len(state.forest)
            for i in range(k):
                for j in range(i + 1, k):
                    actions.append(Action(kind=ACTION_JOIN, pair=(i, j),
                                          index=len(actions)))
        elif state.stage == STAGE_ACCESS:
            decided = state.access_path_map()
            for rid in self._ctx.relations:
                if rid in decided:
                    continue
                actions.append(Action(kind=ACTION_ACCESS, relation_id=rid,
                                      access_path=SEQ_SCAN, index=len(actions)))
                for attr in self._ctx.indexable[rid]:
                    actions.append(Action(kind=ACTION_ACCESS, relation_id=rid,
                                          access_path=INDEX_SCAN,
                                          index_attribute_id=attr,
                                          index=len(actions)))
        elif state.stage == STAGE_OPERATOR:
            decided = state.join_operator_map()
            for leaves in self._join_nodes(state.forest[0].tree):
                if leaves in decided:
                    continue
                for op in JOIN_OPERATORS:
                    actions.append(Action(kind=ACTION_OPERATOR, node_leaves=leaves,
                                          operator=op, index=len(actions)))
        else:  # STAGE_AGGREGATE
            for op in AGGREGATE_OPERATORS:
                actions.append(Action(kind=ACTION_AGGREGATE, operator=op,
                                      index=len(actions)))
        return actions

    @staticmethod
    def _join_nodes(tree: JoinTree) -> list[frozenset[int]]:
        """Internal node leaf sets in canonical (sorted leaf tuple) order."""
        nodes: list[frozenset[int]] = []

        def walk(t: JoinTree) -> None:
            if t.is_leaf:
                return
            nodes.append(t.leaves)
            walk(t.left)
            walk(t.right)

        walk(tree)
        nodes.sort(key=lambda ls: tuple(sorted(ls)))
        return nodes

    def step(self, state: EnvState, action: Action) -> tuple[EnvState, bool]:
        if state.terminal:
            raise ContractError("cannot step a terminal state")
        legal = {a.signature() for a in self.legal_actions(state)}
        if action.signature() not in legal:
            raise ContractError(f"illegal action {action} in stage "
                                f"{STAGE_NAMES[state.stage]}")

        if action.kind == ACTION_JOIN:
            i, j = action.pair
            state = replace(state, forest=self._merge(state.forest, i, j))
        elif action.kind == ACTION_ACCESS:
            decided = state.access_paths + ((action.relation_id, action.access_path,
                                             action.index_attribute_id),)
            state = replace(state, access_paths=tuple(sorted(decided)))
        elif action.kind == ACTION_OPERATOR:
            decided = state.join_operators + ((tuple(sorted(action.node_leaves)),
                                               action.operator),)
            state = replace(state, join_operators=tuple(sorted(decided)))
        else:
            state = replace(state, aggregate_operator=action.operator)

        state = self._advance(state)
        return state, state.terminal

    def _merge(self, forest: tuple[Subtree, ...], i: int, j: int) -> tuple[Subtree, ...]:
        a, b = forest[i], forest[j]
        sel = join_selectivity_between(self._ctx.query, a.leaves, b.leaves)
        out = a.out_rows * b.out_rows * sel
        # Canonical operand order: smaller estimated side becomes the left
        # (build) side; ties go to the subtree with the smaller relation id.
        if b.out_rows < a.out_rows:
            left, right = b, a
        else:
            left, right = a, b
        merged = Subtree(join(left.tree, right.tree), out)
        rest = [s for k, s in enumerate(forest) if k not in (i, j)]
        rest.append(merged)
        rest.sort(key=lambda s: s.min_leaf)
        return tuple(rest)

    def _check_state(self, state: EnvState) -> None:
        if self._ctx is None or state.query_id != self._ctx.query.id:
            raise ContractError(
                f"state belongs to query {state.query_id}, bound query is "
                f"{None if self._ctx is None else self._ctx.query.id}")

    # -- terminal plan and reward ------------------------------------------

    def extract_plan(self, state: EnvState) -> PhysicalPlan:
        """Complete the agent's decisions into a full physical plan."""
        if not state.terminal:
            raise ContractError("extract_plan requires a terminal state")
        self._check_state(state)
        from .expert import PartialDecisions, complete_partial

        stages = self.config.enabled_stages
        partial = PartialDecisions(
            join_tree=state.forest[0].tree,
            access_paths=state.access_path_map() if stages >= 2 else None,
            join_operators=state.join_operator_map() if stages >= 3 else None,
            aggregate_operator=state.aggregate_operator if stages >= 4 else None,
            aggregate_decided=stages >= 4,
        )
        completer = self._completer or complete_partial
        return completer(self.catalog, self._ctx.query, partial)

    def episode_reward(self, plan: PhysicalPlan, execution_seed: int) -> float:
        """Terminal reward for the finished plan (the episode's only reward)."""
        spec = self.config.reward
        if spec.kind == REWARD_COST:
            return -cost_plan(self.catalog, self._ctx.query, plan)
        if self.latency_model is None:
            raise ContractError("latency reward requires a latency model")
        sample = simulate_latency(self.latency_model, self.catalog,
                                  self._ctx.query, plan, execution_seed)
        if spec.kind == REWARD_LATENCY:
            return -sample.seconds
        if spec.calibration is None:
            raise ContractError("scaled latency reward requires a calibration")
        from .trainers import scale_latency_reward
        return -scale_latency_reward(spec.calibration, sample.seconds)

    # -- feature encoding ----------------------------------------------------

    def subtree_out(self, tree: JoinTree) -> float:
        """Estimated output rows of a (partial) join tree, cached per leaf set."""
        cached = self._ctx.subtree_out.get(tree.leaves)
        if cached is not None:
            return cached
        if tree.is_leaf:
            out = self._ctx.scan_out[tree.relation_id]
        else:
            sel = join_selectivity_between(self._ctx.query, tree.left.leaves,
                                           tree.right.leaves)
            out = self.subtree_out(tree.left) * self.subtree_out(tree.right) * sel
        self._ctx.subtree_out[tree.leaves] = out
        return out

    def _norm(self, rows: float) -> float:
        return math.log1p(rows) / self._norm_div

    def featurize(self, state: EnvState, action: Action) -> np.ndarray:
        """Deterministic fixed-length encoding of a (state, action) pair.

        Layout (N = max_relations):
          [0, N*N)            subtree-membership incidence, row-major, padded
          [N*N, N*N + 2N)     relation one-hots of the action's operands
                              (join: the two subtrees; operator: the node's
                              children; access path: the relation; aggregate:
                              zeros)
          last 8              log-scaled cardinalities of the operands and the
                              action's output, a stage-dependent discriminator
                              scalar, and a one-hot of the current stage
        Log terms are log1p(rows) / log1p(max catalog cardinality).
        """
        self._check_state(state)
        n_max = self.config.max_relations
        vec = np.zeros(self.config.feature_length, dtype=np.float64)
        col = self._ctx.column

        for row, sub in enumerate(state.forest):
            base = row * n_max
            for rid in sub.leaves:
                vec[base + col[rid]] = 1.0

        blocks = n_max * n_max
        scalars = blocks + 2 * n_max

        if action.kind == ACTION_JOIN:
            a, b = (state.forest[k] for k in action.pair)
            for rid in a.leaves:
                vec[blocks + col[rid]] = 1.0
            for rid in b.leaves:
                vec[blocks + n_max + col[rid]] = 1.0
            sel = join_selectivity_between(self._ctx.query, a.leaves, b.leaves)
            vec[scalars + 0] = self._norm(a.out_rows)
            vec[scalars + 1] = self._norm(b.out_rows)
            vec[scalars + 2] = self._norm(a.out_rows * b.out_rows * sel)
            vec[scalars + 3] = sel
        elif action.kind == ACTION_ACCESS:
            rid = action.relation_id
            vec[blocks + col[rid]] = 1.0
            rel = self.catalog.relation(rid)
            rows = float(rel.cardinality)
            out = self._ctx.scan_out[rid]
            if action.access_path == SEQ_SCAN:
                scan_cost = C_SEQ * rows
                discriminator = 0.0
            else:
                scan_cost = C_IDX_LOOKUP * math.log2(rows) + C_RANDOM * out
                attr_pos = [a.id for a in rel.attributes].index(action.index_attribute_id)
                discriminator = (1.0 + attr_pos) / (1.0 + len(rel.attributes))
            vec[scalars + 0] = self._norm(rows)
            vec[scalars + 1] = self._norm(scan_cost)
            vec[scalars + 2] = self._norm(out)
            vec[scalars + 3] = discriminator
        elif action.kind == ACTION_OPERATOR:
            node = self._find_node(state.forest[0].tree, action.node_leaves)
            left_out = self.subtree_out(node.left)
            right_out = self.subtree_out(node.right)
            for rid in node.left.leaves:
                vec[blocks + col[rid]] = 1.0
            for rid in node.right.leaves:
                vec[blocks + n_max + col[rid]] = 1.0
            vec[scalars + 0] = self._norm(left_out)
            vec[scalars + 1] = self._norm(right_out)
            vec[scalars + 2] = self._norm(self.subtree_out(node))
            vec[scalars + 3] = 0.0 if action.operator == NESTED_LOOP else 1.0
        else:  # ACTION_AGGREGATE
            rows = self.subtree_out(state.forest[0].tree)
            if action.operator == HASH_AGGREGATE:
                agg_cost = C_HASH_AGG * rows
                discriminator = 0.0
            else:
                agg_cost = C_SORT_AGG * rows * math.log2(rows + 2)
                discriminator = 1.0
            vec[scalars + 0] = self._norm(rows)
            vec[scalars + 1] = self._norm(agg_cost)
            vec[scalars + 2] = self._norm(rows)
            vec[scalars + 3] = discriminator

        vec[scalars + 4 + state.stage] = 1.0
        return vec

    @staticmethod
    def _find_node(tree: JoinTree, leaves: frozenset[int]) -> JoinTree:
        if tree.leaves == leaves and not tree.is_leaf:
            return tree
        if tree.is_leaf:
            raise ContractError(f"no join node with leaves {sorted(leaves)}")
        if leaves <= tree.left.leaves:
            return Env._find_node(tree.left, leaves)
        return Env._find_node(tree.right, leaves)


# --- state / action serialization ------------------------------------------


def action_to_dict(action: Action) -> dict:
    return {
        "kind": action.kind,
        "pair": list(action.pair) if action.pair is not None else None,
        "relation_id": action.relation_id,
        "access_path": action.access_path,
        "index_attribute_id": action.index_attribute_id,
        "node_leaves": sorted(action.node_leaves) if action.node_leaves is not None else None,
        "operator": action.operator,
        "index": action.index,
    }


def action_from_dict(doc: dict) -> Action:
    return Action(
        kind=doc["kind"],
        pair=tuple(doc["pair"]) if doc["pair"] is not None else None,
        relation_id=doc["relation_id"],
        access_path=doc["access_path"],
        index_attribute_id=doc["index_attribute_id"],
        node_leaves=frozenset(doc["node_leaves"]) if doc["node_leaves"] is not None else None,
        operator=doc["operator"],
        index=doc["index"],
    )


def state_to_dict(state: EnvState) -> dict:
    return {
        "query_id": state.query_id,
        "forest": [{"tree": tree_to_list(s.tree), "out_rows": s.out_rows}
                   for s in state.forest],
        "stage": state.stage,
        "access_paths": [list(entry) for entry in state.access_paths],
        "join_operators": [[list(leaves), op] for leaves, op in state.join_operators],
        "aggregate_operator": state.aggregate_operator,
        "terminal": state.terminal,
    }


def state_from_dict(doc: dict) -> EnvState:
    return EnvState(
        query_id=doc["query_id"],
        forest=tuple(Subtree(tree_from_list(s["tree"]), s["out_rows"])
                     for s in doc["forest"]),
        stage=doc["stage"],
        access_paths=tuple((rid, path, attr)
                           for rid, path, attr in doc["access_paths"]),
        join_operators=tuple((tuple(leaves), op)
                             for leaves, op in doc["join_operators"]),
        aggregate_operator=doc["aggregate_operator"],
        terminal=doc["terminal"],
    )
