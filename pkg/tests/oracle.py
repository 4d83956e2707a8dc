"""Independent cost oracles for the optimizer tests.

Everything here re-implements the cost formulas from first principles instead
of calling the library's evaluator, so a bug in the production recursion
cannot hide in the tests. Formula constants are spelled out locally on
purpose.
"""

from __future__ import annotations

import itertools
import math

from planlab.catalog import Catalog, Query
from planlab.plans import (
    AggregateNode,
    HASH_AGGREGATE,
    HASH_JOIN,
    INDEX_SCAN,
    JoinNode,
    JoinTree,
    NESTED_LOOP,
    ScanNode,
    SEQ_SCAN,
    SORT_AGGREGATE,
    enumerate_join_trees,
    indexable_attributes,
)


def scan_output(catalog: Catalog, query: Query, rid: int) -> float:
    out = float(catalog.relation(rid).cardinality)
    for pred in query.selection_predicates:
        if pred.relation_id == rid:
            out *= pred.selectivity
    return out


def cut_selectivity(query: Query, left: frozenset[int], right: frozenset[int],
                    overrides=None) -> float:
    sel = 1.0
    for edge in query.join_predicates:
        crosses = ((edge.relation_a in left and edge.relation_b in right)
                   or (edge.relation_a in right and edge.relation_b in left))
        if crosses:
            if overrides is not None:
                sel *= overrides[edge.key]
            else:
                sel *= edge.selectivity
    return sel


def evaluate_plan(catalog: Catalog, query: Query, node, overrides=None):
    """(cost, output_rows) of a physical plan, computed independently."""
    if isinstance(node, ScanNode):
        rows = float(catalog.relation(node.relation_id).cardinality)
        out = scan_output(catalog, query, node.relation_id)
        if node.access_path == SEQ_SCAN:
            return 1.0 * rows, out
        return 1.0 * math.log2(rows) + 4.0 * out, out
    if isinstance(node, JoinNode):
        lc, lo = evaluate_plan(catalog, query, node.left, overrides)
        rc, ro = evaluate_plan(catalog, query, node.right, overrides)
        left_set = plan_leafset(node.left)
        right_set = plan_leafset(node.right)
        out = lo * ro * cut_selectivity(query, left_set, right_set, overrides)
        if node.operator == NESTED_LOOP:
            return lc + rc + 0.01 * lo * ro, out
        return lc + rc + 1.5 * lo + 1.0 * ro, out
    # aggregate
    cc, co = evaluate_plan(catalog, query, node.child, overrides)
    if node.operator == HASH_AGGREGATE:
        return cc + 1.0 * co, co
    return cc + 0.5 * co * math.log2(co + 2), co


def plan_leafset(node) -> frozenset[int]:
    if isinstance(node, ScanNode):
        return frozenset((node.relation_id,))
    if isinstance(node, AggregateNode):
        return plan_leafset(node.child)
    return plan_leafset(node.left) | plan_leafset(node.right)


def scan_options(catalog: Catalog, query: Query, rid: int) -> list[ScanNode]:
    options = [ScanNode(rid, SEQ_SCAN)]
    for attr in indexable_attributes(catalog, query, rid):
        options.append(ScanNode(rid, INDEX_SCAN, attr))
    return options


def best_cost_for_tree(catalog: Catalog, query: Query, tree: JoinTree) -> float:
    """Cheapest physical cost of one join shape.

    Access-path and operator choices are optimized per node, which is exact
    because neither changes output cardinalities (verified at small sizes by
    best_cost_exhaustive below).
    """

    def best(t: JoinTree):
        if t.is_leaf:
            choices = [(evaluate_plan(catalog, query, s)[0], s)
                       for s in scan_options(catalog, query, t.relation_id)]
            cost, node = min(choices, key=lambda c: c[0])
            return cost, scan_output(catalog, query, t.relation_id), node
        lc, lo, ln = best(t.left)
        rc, ro, rn = best(t.right)
        out = lo * ro * cut_selectivity(query, t.left.leaves, t.right.leaves)
        nl = lc + rc + 0.01 * lo * ro
        hj = lc + rc + 1.5 * lo + 1.0 * ro
        if nl < hj:
            return nl, out, JoinNode(NESTED_LOOP, ln, rn)
        return hj, out, JoinNode(HASH_JOIN, ln, rn)

    cost, out, _ = best(tree)
    if query.aggregate:
        cost += min(1.0 * out, 0.5 * out * math.log2(out + 2))
    return cost


def best_cost(catalog: Catalog, query: Query) -> float:
    """Brute-force minimum over every bushy tree and its physical choices.

    Every ordered shape's (cost, output) pair is enumerated explicitly;
    identical sub-shapes are shared across trees via per-mask lists, which
    changes the bookkeeping but not the per-shape arithmetic. Operators and
    access paths are optimized per node as in best_cost_for_tree.
    """
    rels = sorted(query.relation_ids)
    n = len(rels)
    pos = {r: i for i, r in enumerate(rels)}
    scans = []
    for rid in rels:
        choices = [(evaluate_plan(catalog, query, s)[0], s)
                   for s in scan_options(catalog, query, rid)]
        cost = min(c for c, _ in choices)
        scans.append((cost, scan_output(catalog, query, rid)))
    edges = [(1 << pos[e.relation_a], 1 << pos[e.relation_b], e.selectivity)
             for e in query.join_predicates]

    def cut_sel(mask_a: int, mask_b: int) -> float:
        sel = 1.0
        for bit_a, bit_b, s in edges:
            if (bit_a & mask_a and bit_b & mask_b) \
                    or (bit_a & mask_b and bit_b & mask_a):
                sel *= s
        return sel

    # shapes[mask] lists (cost, out) for every ordered tree over mask.
    shapes: dict[int, list[tuple[float, float]]] = {
        1 << i: [scans[i]] for i in range(n)}

    full = (1 << n) - 1
    for mask in range(1, full + 1):
        if mask & (mask - 1) == 0:  # singleton, already seeded
            continue
        entries: list[tuple[float, float]] = []
        sub = (mask - 1) & mask
        while sub:
            rest = mask ^ sub
            sel = cut_sel(sub, rest)
            for lc, lo in shapes[sub]:
                for rc, ro in shapes[rest]:
                    out = lo * ro * sel
                    nl = lc + rc + 0.01 * lo * ro
                    hj = lc + rc + 1.5 * lo + 1.0 * ro
                    entries.append((nl if nl < hj else hj, out))
            sub = (sub - 1) & mask
        shapes[mask] = entries

    if query.aggregate:
        return min(c + min(1.0 * o, 0.5 * o * math.log2(o + 2))
                   for c, o in shapes[full])
    return min(c for c, _ in shapes[full])


def best_cost_exhaustive(catalog: Catalog, query: Query) -> float:
    """Full cross product over trees x paths x operators x aggregate.

    Exponential in everything; use only for <= 4 relations. Exists to
    validate the per-node optimization in best_cost_for_tree.
    """
    rels = sorted(query.relation_ids)
    best = math.inf
    per_leaf = [scan_options(catalog, query, rid) for rid in rels]
    for tree in enumerate_join_trees(query):
        n_joins = len(rels) - 1
        for leaf_combo in itertools.product(*per_leaf):
            scans = {node.relation_id: node for node in leaf_combo}
            for op_combo in itertools.product((NESTED_LOOP, HASH_JOIN),
                                              repeat=n_joins):
                ops = iter(op_combo)

                def build(t: JoinTree):
                    if t.is_leaf:
                        return scans[t.relation_id]
                    left = build(t.left)
                    right = build(t.right)
                    return JoinNode(next(ops), left, right)

                plan = build(tree)
                if query.aggregate:
                    for agg in (HASH_AGGREGATE, SORT_AGGREGATE):
                        cost, _ = evaluate_plan(catalog, query,
                                                AggregateNode(agg, plan))
                        best = min(best, cost)
                else:
                    cost, _ = evaluate_plan(catalog, query, plan)
                    best = min(best, cost)
    return best
