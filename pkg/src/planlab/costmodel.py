"""Optimizer cost model and the hidden ground-truth latency simulator.

The cost model deliberately embodies the textbook independence assumption:
output cardinalities are products of base cardinalities and predicate
selectivities. The latency simulator recomputes the same recursion with
perturbed ("true") join selectivities and a superlinear time exponent, which
is what makes estimated cost and simulated latency disagree on plan rankings.

Cost formula constants (unitless):
  sequential scan      C_SEQ * rows
  index scan           C_IDX_LOOKUP * log2(rows) + C_RANDOM * output_rows
  nested-loop join     cost(L) + cost(R) + C_NL * out(L) * out(R)
  hash join            cost(L) + cost(R) + 1.5 * out(L) + 1.0 * out(R)
  hash aggregate       1.0 * input_rows
  sort aggregate       0.5 * input_rows * log2(input_rows + 2)
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Callable, Iterable, Union

from .catalog import Catalog, JoinEdge, Query, SelectionPredicate
from .errors import ContractError
from .plans import (
    AggregateNode,
    HASH_AGGREGATE,
    HASH_JOIN,
    INDEX_SCAN,
    JoinNode,
    NESTED_LOOP,
    PhysicalPlan,
    PlanNode,
    ScanNode,
    SEQ_SCAN,
    SORT_AGGREGATE,
)
from .serialize import dump_versioned, load_versioned

C_SEQ = 1.0
C_IDX_LOOKUP = 1.0
C_RANDOM = 4.0
C_NL = 0.01
C_HASH_BUILD = 1.5
C_HASH_PROBE = 1.0
C_HASH_AGG = 1.0
C_SORT_AGG = 0.5

Predicate = Union[JoinEdge, SelectionPredicate]
SelectivityResolver = Callable[[JoinEdge], float]


@dataclass(frozen=True)
class LatencyModelConfig:
    alpha: float = 0.001                 # seconds per cost unit
    gamma: float = 1.1                   # superlinearity exponent
    noise_sigma: float = 0.05            # lognormal execution noise
    error_sigma: float = 0.5             # lognormal estimation error
    heavy_error_probability: float = 0.1
    heavy_error_sigma: float = 2.0

    def validate(self) -> None:
        if self.alpha <= 0:
            raise ContractError("alpha must be > 0")
        if self.gamma < 1:
            raise ContractError("gamma must be >= 1")
        for name in ("noise_sigma", "error_sigma", "heavy_error_sigma"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")
        if not 0.0 <= self.heavy_error_probability <= 1.0:
            raise ContractError("heavy_error_probability must be in [0, 1]")


@dataclass
class LatencyModel:
    true_selectivity: dict[str, float]   # join-edge key -> selectivity in (0, 1]
    config: LatencyModelConfig
    build_seed: int

    @property
    def alpha(self) -> float:
        return self.config.alpha

    @property
    def gamma(self) -> float:
        return self.config.gamma


@dataclass(frozen=True)
class LatencySample:
    seconds: float
    query_id: int
    execution_seed: int


def estimate_cardinality(catalog: Catalog, relation_ids: frozenset[int],
                         predicates: Iterable[Predicate]) -> float:
    """Estimated output rows: product of base cardinalities and selectivities."""
    if not relation_ids:
        raise ContractError("relation set must be nonempty")
    rows = 1.0
    for rid in relation_ids:
        rows *= catalog.relation(rid).cardinality
    for pred in predicates:
        if isinstance(pred, JoinEdge):
            if pred.relation_a not in relation_ids or pred.relation_b not in relation_ids:
                raise ContractError(
                    f"join predicate {pred.key} references a relation outside the set")
        elif pred.relation_id not in relation_ids:
            raise ContractError(
                f"selection on relation {pred.relation_id} outside the set")
        rows *= pred.selectivity
    return rows


def estimated_selectivity(edge: JoinEdge) -> float:
    return edge.selectivity


def cost_plan(catalog: Catalog, query: Query, plan: PhysicalPlan) -> float:
    """Estimated cost of a plan; deterministic and strictly positive."""
    cost, _ = _evaluate(catalog, query, plan, estimated_selectivity)
    return cost


def true_cost(model: LatencyModel, catalog: Catalog, query: Query,
              plan: PhysicalPlan) -> float:
    """Same recursion as cost_plan with true join selectivities substituted."""
    def resolve(edge: JoinEdge) -> float:
        return model.true_selectivity[edge.key]
    cost, _ = _evaluate(catalog, query, plan, resolve)
    return cost


def _evaluate(catalog: Catalog, query: Query, node: PlanNode,
              resolve: SelectivityResolver) -> tuple[float, float]:
    """Return (cost, output_rows) of ``node``. Selections apply at scans."""
    if isinstance(node, ScanNode):
        rel = catalog.relation(node.relation_id)
        rows = float(rel.cardinality)
        out = rows
        for pred in query.selection_predicates:
            if pred.relation_id == node.relation_id:
                out *= pred.selectivity
        if node.access_path == SEQ_SCAN:
            return C_SEQ * rows, out
        if node.access_path == INDEX_SCAN:
            return C_IDX_LOOKUP * math.log2(rows) + C_RANDOM * out, out
        raise ContractError(f"unknown access path {node.access_path!r}")

    if isinstance(node, JoinNode):
        left_cost, left_out = _evaluate(catalog, query, node.left, resolve)
        right_cost, right_out = _evaluate(catalog, query, node.right, resolve)
        sel = join_selectivity_between(query, _leafset(node.left),
                                       _leafset(node.right), resolve)
        out = left_out * right_out * sel
        if node.operator == NESTED_LOOP:
            cost = left_cost + right_cost + C_NL * left_out * right_out
        elif node.operator == HASH_JOIN:
            cost = left_cost + right_cost + C_HASH_BUILD * left_out + C_HASH_PROBE * right_out
        else:
            raise ContractError(f"unknown join operator {node.operator!r}")
        return cost, out

    if isinstance(node, AggregateNode):
        child_cost, child_out = _evaluate(catalog, query, node.child, resolve)
        if node.operator == HASH_AGGREGATE:
            return child_cost + C_HASH_AGG * child_out, child_out
        if node.operator == SORT_AGGREGATE:
            return child_cost + C_SORT_AGG * child_out * math.log2(child_out + 2), child_out
        raise ContractError(f"unknown aggregate operator {node.operator!r}")

    raise ContractError(f"unknown plan node {node!r}")


def _leafset(node: PlanNode) -> frozenset[int]:
    if isinstance(node, ScanNode):
        return frozenset((node.relation_id,))
    if isinstance(node, AggregateNode):
        return _leafset(node.child)
    return _leafset(node.left) | _leafset(node.right)


def join_selectivity_between(query: Query, left: frozenset[int],
                             right: frozenset[int],
                             resolve: SelectivityResolver = estimated_selectivity) -> float:
    """Product of the query's join selectivities crossing the (left, right) cut.

    1.0 when no predicate crosses, i.e. the join is a cross product.
    """
    sel = 1.0
    for edge in query.join_predicates:
        if ((edge.relation_a in left and edge.relation_b in right)
                or (edge.relation_a in right and edge.relation_b in left)):
            sel *= resolve(edge)
    return sel


def build_latency_model(catalog: Catalog, config: LatencyModelConfig,
                        seed: int) -> LatencyModel:
    """Draw one true selectivity per catalog join edge.

    Each edge's estimate is multiplied by exp(eps) with eps ~ N(0, error_sigma),
    except that with heavy_error_probability the draw uses heavy_error_sigma
    instead; the result is clamped into (0, 1]. Deterministic per seed.
    """
    config.validate()
    rng = random.Random(seed)
    true_sel: dict[str, float] = {}
    for edge in catalog.join_edges:
        heavy = rng.random() < config.heavy_error_probability
        sigma = config.heavy_error_sigma if heavy else config.error_sigma
        eps = rng.gauss(0.0, sigma) if sigma > 0 else 0.0
        true_sel[edge.key] = min(edge.selectivity * math.exp(eps), 1.0)
    return LatencyModel(true_selectivity=true_sel, config=config, build_seed=seed)


def latency_from_true_cost(model: LatencyModel, cost: float,
                           execution_seed: int) -> float:
    """seconds = alpha * cost^gamma * exp(eta), eta ~ N(0, noise_sigma)."""
    rng = random.Random(execution_seed)
    eta = rng.gauss(0.0, model.config.noise_sigma) if model.config.noise_sigma > 0 else 0.0
    return model.alpha * cost ** model.gamma * math.exp(eta)


def simulate_latency(model: LatencyModel, catalog: Catalog, query: Query,
                     plan: PhysicalPlan, execution_seed: int) -> LatencySample:
    tc = true_cost(model, catalog, query, plan)
    seconds = latency_from_true_cost(model, tc, execution_seed)
    return LatencySample(seconds=seconds, query_id=query.id,
                         execution_seed=execution_seed)


# --- persistence ---------------------------------------------------------


def save_latency_model(model: LatencyModel, path: str) -> None:
    dump_versioned(path, "latency_model", {
        "build_seed": model.build_seed,
        "config": {
            "alpha": model.config.alpha,
            "gamma": model.config.gamma,
            "noise_sigma": model.config.noise_sigma,
            "error_sigma": model.config.error_sigma,
            "heavy_error_probability": model.config.heavy_error_probability,
            "heavy_error_sigma": model.config.heavy_error_sigma,
        },
        "true_selectivity": model.true_selectivity,
    })


def load_latency_model(path: str) -> LatencyModel:
    doc = load_versioned(path, "latency_model")
    return LatencyModel(
        true_selectivity=dict(doc["true_selectivity"]),
        config=LatencyModelConfig(**doc["config"]),
        build_seed=doc["build_seed"],
    )
