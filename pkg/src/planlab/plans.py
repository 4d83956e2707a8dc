"""Logical join trees, physical plans, enumeration and plan-space counting.

The canonical plan space is bushy join trees with ordered children (left and
right are distinguished because join cost formulas are asymmetric), one access
path per leaf, one operator per join node, and an optional aggregate operator
at the root.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional, Union

from .catalog import Catalog, Query
from .errors import GuardError

ENUMERATION_GUARD = 7

SEQ_SCAN = "seq"
INDEX_SCAN = "index"
NESTED_LOOP = "nested_loop"
HASH_JOIN = "hash_join"
HASH_AGGREGATE = "hash_aggregate"
SORT_AGGREGATE = "sort_aggregate"

JOIN_OPERATORS = (NESTED_LOOP, HASH_JOIN)
AGGREGATE_OPERATORS = (HASH_AGGREGATE, SORT_AGGREGATE)


@dataclass(frozen=True)
class JoinTree:
    """A leaf (relation_id set) or an internal node (left, right set)."""

    relation_id: Optional[int]
    left: Optional["JoinTree"]
    right: Optional["JoinTree"]
    leaves: frozenset[int]

    @property
    def is_leaf(self) -> bool:
        return self.relation_id is not None


def leaf(relation_id: int) -> JoinTree:
    return JoinTree(relation_id, None, None, frozenset((relation_id,)))


def join(left: JoinTree, right: JoinTree) -> JoinTree:
    if left.leaves & right.leaves:
        raise ValueError("join operands share relations")
    return JoinTree(None, left, right, left.leaves | right.leaves)


@dataclass(frozen=True)
class ScanNode:
    relation_id: int
    access_path: str  # SEQ_SCAN or INDEX_SCAN
    index_attribute_id: Optional[int] = None


@dataclass(frozen=True)
class JoinNode:
    operator: str  # NESTED_LOOP or HASH_JOIN
    left: "PlanNode"
    right: "PlanNode"


@dataclass(frozen=True)
class AggregateNode:
    operator: str  # HASH_AGGREGATE or SORT_AGGREGATE
    child: "PlanNode"


PlanNode = Union[ScanNode, JoinNode, AggregateNode]
PhysicalPlan = PlanNode  # a plan is its root node


@dataclass
class PlanValidationReport:
    ok: bool
    violations: list[str]


def plan_leaves(node: PlanNode) -> frozenset[int]:
    if isinstance(node, ScanNode):
        return frozenset((node.relation_id,))
    if isinstance(node, AggregateNode):
        return plan_leaves(node.child)
    return plan_leaves(node.left) | plan_leaves(node.right)


def join_tree_of(node: PlanNode) -> JoinTree:
    """Strip physical detail, leaving the logical join shape."""
    if isinstance(node, AggregateNode):
        return join_tree_of(node.child)
    if isinstance(node, ScanNode):
        return leaf(node.relation_id)
    return join(join_tree_of(node.left), join_tree_of(node.right))


def enumerate_join_trees(query: Query) -> Iterator[JoinTree]:
    """Exhaustively yield every bushy join tree over the query's relations.

    Left/right order is distinguished and cross products are included, so the
    count is relations! * Catalan(relations - 1). Guarded because the space
    explodes factorially.
    """
    n = len(query.relation_ids)
    if n > ENUMERATION_GUARD:
        raise GuardError(
            f"refusing to enumerate join trees for {n} relations "
            f"(guard is {ENUMERATION_GUARD})")
    return _trees_over(tuple(sorted(query.relation_ids)))


def _trees_over(relation_ids: tuple[int, ...]) -> Iterator[JoinTree]:
    if len(relation_ids) == 1:
        yield leaf(relation_ids[0])
        return
    n = len(relation_ids)
    # Every ordered split into nonempty (left, right); bitmask proper subsets.
    for mask in range(1, (1 << n) - 1):
        left_ids = tuple(relation_ids[i] for i in range(n) if mask >> i & 1)
        right_ids = tuple(relation_ids[i] for i in range(n) if not mask >> i & 1)
        for lt in _trees_over(left_ids):
            for rt in _trees_over(right_ids):
                yield join(lt, rt)


def count_join_orderings(n: int) -> int:
    """Closed-form size of the ordered bushy tree space: n! * Catalan(n-1)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    catalan = math.comb(2 * (n - 1), n - 1) // n
    return math.factorial(n) * catalan


def validate_plan(plan: PhysicalPlan, query: Query, catalog: Catalog) -> PlanValidationReport:
    """Check the plan's structural invariants for this query and catalog.

    Violations are returned as diagnostics rather than raised: an invalid plan
    is data (e.g. produced by a buggy policy), not a caller bug.
    """
    violations: list[str] = []

    root = plan
    if isinstance(root, AggregateNode):
        if not query.aggregate:
            violations.append("aggregate node present but query has no aggregate")
        root = root.child
    elif query.aggregate:
        violations.append("query has an aggregate but plan has no aggregate node")

    leaves: list[int] = []

    def walk(node: PlanNode) -> None:
        if isinstance(node, AggregateNode):
            violations.append("aggregate node below the root")
            walk(node.child)
        elif isinstance(node, JoinNode):
            if node.operator not in JOIN_OPERATORS:
                violations.append(f"unknown join operator {node.operator!r}")
            walk(node.left)
            walk(node.right)
        else:
            leaves.append(node.relation_id)
            _check_scan(node)

    def _check_scan(node: ScanNode) -> None:
        if node.relation_id not in query.relation_ids:
            violations.append(f"scan of relation {node.relation_id} not in query")
            return
        if node.access_path == SEQ_SCAN:
            return
        if node.access_path != INDEX_SCAN:
            violations.append(f"unknown access path {node.access_path!r}")
            return
        try:
            attr = catalog.relation(node.relation_id).attribute(node.index_attribute_id)
        except KeyError:
            violations.append(
                f"index scan on missing attribute {node.relation_id}."
                f"{node.index_attribute_id}")
            return
        if attr.index_kind is None:
            violations.append(
                f"no such index: {node.relation_id}.{node.index_attribute_id}")
        if not _has_applicable_predicate(query, node.relation_id, node.index_attribute_id):
            violations.append(
                f"index scan on {node.relation_id}.{node.index_attribute_id} "
                f"without a matching predicate")

    walk(root)

    if len(leaves) != len(set(leaves)):
        violations.append("duplicate relation leaves")
    if frozenset(leaves) != query.relation_ids:
        violations.append("leaf set mismatch")

    return PlanValidationReport(ok=not violations, violations=violations)


def _has_applicable_predicate(query: Query, relation_id: int, attribute_id: int) -> bool:
    for pred in query.selection_predicates:
        if pred.relation_id == relation_id and pred.attribute_id == attribute_id:
            return True
    for edge in query.join_predicates:
        if edge.touches(relation_id, attribute_id):
            return True
    return False


def indexable_attributes(catalog: Catalog, query: Query, relation_id: int) -> list[int]:
    """Attribute ids of ``relation_id`` usable for an index scan in ``query``."""
    rel = catalog.relation(relation_id)
    return [a.id for a in rel.attributes
            if a.index_kind is not None
            and _has_applicable_predicate(query, relation_id, a.id)]


# --- persistence ---------------------------------------------------------


def save_plan(plan: PhysicalPlan, path: str) -> None:
    from .serialize import dump_versioned
    dump_versioned(path, "plan", {"root": plan_to_dict(plan)})


def load_plan(path: str) -> PhysicalPlan:
    from .serialize import load_versioned
    return plan_from_dict(load_versioned(path, "plan")["root"])


def plan_to_dict(node: PlanNode) -> dict:
    if isinstance(node, ScanNode):
        return {"node": "scan", "relation_id": node.relation_id,
                "access_path": node.access_path,
                "index_attribute_id": node.index_attribute_id}
    if isinstance(node, JoinNode):
        return {"node": "join", "operator": node.operator,
                "left": plan_to_dict(node.left), "right": plan_to_dict(node.right)}
    return {"node": "aggregate", "operator": node.operator,
            "child": plan_to_dict(node.child)}


def plan_from_dict(doc: dict) -> PlanNode:
    kind = doc["node"]
    if kind == "scan":
        return ScanNode(doc["relation_id"], doc["access_path"],
                        doc["index_attribute_id"])
    if kind == "join":
        return JoinNode(doc["operator"], plan_from_dict(doc["left"]),
                        plan_from_dict(doc["right"]))
    if kind == "aggregate":
        return AggregateNode(doc["operator"], plan_from_dict(doc["child"]))
    raise ValueError(f"unknown plan node kind {kind!r}")


def tree_to_list(tree: JoinTree):
    """Nested-list form: a leaf is its relation id, a join is [left, right]."""
    if tree.is_leaf:
        return tree.relation_id
    return [tree_to_list(tree.left), tree_to_list(tree.right)]


def tree_from_list(doc) -> JoinTree:
    if isinstance(doc, int):
        return leaf(doc)
    left_doc, right_doc = doc
    return join(tree_from_list(left_doc), tree_from_list(right_doc))
