"""Synthetic schemas, statistics and join-query workloads.

Only statistics are generated, never data tuples. Queries exist in graph
form: a relation set, the join edges induced on it, per-relation selection
predicates and an optional grouped-aggregate flag. Selectivities are stored
directly on predicates so the estimation error injected by the latency model
stays fully controllable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError, GenerationError
from .serialize import digest, dump_versioned, load_versioned

INDEX_BTREE = "btree"

MAX_CARDINALITY = 10 ** 9


@dataclass(frozen=True)
class AttributeInfo:
    id: int
    name: str
    distinct_values: int
    index_kind: Optional[str] = None  # None means no secondary index


@dataclass(frozen=True)
class RelationInfo:
    id: int
    name: str
    cardinality: int
    attributes: tuple[AttributeInfo, ...]

    def attribute(self, attribute_id: int) -> AttributeInfo:
        for attr in self.attributes:
            if attr.id == attribute_id:
                return attr
        raise KeyError(f"relation {self.id} has no attribute {attribute_id}")


@dataclass(frozen=True)
class JoinEdge:
    """An equi-join edge between two relation attributes.

    Stored with relation_a < relation_b so each edge has one canonical key.
    """

    relation_a: int
    attribute_a: int
    relation_b: int
    attribute_b: int
    selectivity: float

    @property
    def key(self) -> str:
        return f"{self.relation_a}.{self.attribute_a}|{self.relation_b}.{self.attribute_b}"

    def touches(self, relation_id: int, attribute_id: int) -> bool:
        return ((self.relation_a == relation_id and self.attribute_a == attribute_id)
                or (self.relation_b == relation_id and self.attribute_b == attribute_id))


@dataclass(frozen=True)
class SelectionPredicate:
    relation_id: int
    attribute_id: int
    selectivity: float


@dataclass
class Catalog:
    relations: list[RelationInfo]
    join_edges: list[JoinEdge]

    def relation(self, relation_id: int) -> RelationInfo:
        for rel in self.relations:
            if rel.id == relation_id:
                return rel
        raise KeyError(f"no relation with id {relation_id}")

    def edges_within(self, relation_ids: frozenset[int]) -> list[JoinEdge]:
        return [e for e in self.join_edges
                if e.relation_a in relation_ids and e.relation_b in relation_ids]

    def max_cardinality(self) -> int:
        return max(rel.cardinality for rel in self.relations)


@dataclass
class Query:
    id: int
    relation_ids: frozenset[int]
    join_predicates: list[JoinEdge]
    selection_predicates: list[SelectionPredicate]
    aggregate: bool = False


@dataclass
class Workload:
    queries: list[Query]
    generator_seed: int


@dataclass(frozen=True)
class CatalogConfig:
    relation_count: int
    min_cardinality: int = 100
    max_cardinality: int = 1_000_000
    attributes_per_relation: int = 3
    index_density: float = 0.5
    edge_density: float = 0.25

    def validate(self) -> None:
        if self.relation_count < 1:
            raise ConfigError("relation_count must be >= 1")
        if not (1 <= self.min_cardinality <= self.max_cardinality <= MAX_CARDINALITY):
            raise ConfigError(
                f"cardinality range [{self.min_cardinality}, {self.max_cardinality}] "
                f"must lie within [1, {MAX_CARDINALITY}]")
        if self.attributes_per_relation < 1:
            raise ConfigError("attributes_per_relation must be >= 1")
        if not 0.0 <= self.index_density <= 1.0:
            raise ConfigError("index_density must be in [0, 1]")
        if not 0.0 <= self.edge_density <= 1.0:
            raise ConfigError("edge_density must be in [0, 1]")


@dataclass(frozen=True)
class WorkloadConfig:
    query_count: int
    min_relations: int = 1
    max_relations: int = 4
    selection_density: float = 0.5
    aggregate_probability: float = 0.25

    def validate(self, catalog: Catalog) -> None:
        if self.query_count < 0:
            raise ConfigError("query_count must be >= 0")
        if self.min_relations < 1:
            raise ConfigError("min_relations must be >= 1")
        if self.min_relations > self.max_relations:
            raise ConfigError("min_relations must not exceed max_relations")
        if self.max_relations > len(catalog.relations):
            raise ConfigError(
                f"max_relations {self.max_relations} exceeds catalog size "
                f"{len(catalog.relations)}")
        if not 0.0 <= self.selection_density <= 1.0:
            raise ConfigError("selection_density must be in [0, 1]")
        if not 0.0 <= self.aggregate_probability <= 1.0:
            raise ConfigError("aggregate_probability must be in [0, 1]")


def generate_catalog(config: CatalogConfig, seed: int) -> Catalog:
    """Generate a schema whose join graph is connected by construction.

    Edges are a random spanning tree over the relations plus every remaining
    relation pair independently kept with probability ``edge_density``.
    Deterministic for a fixed (config, seed).
    """
    config.validate()
    rng = random.Random(seed)

    relations = []
    for rid in range(config.relation_count):
        cardinality = rng.randint(config.min_cardinality, config.max_cardinality)
        attributes = []
        indexed_attr = rng.randrange(config.attributes_per_relation) \
            if rng.random() < config.index_density else None
        for aid in range(config.attributes_per_relation):
            attributes.append(AttributeInfo(
                id=aid,
                name=f"r{rid}_a{aid}",
                distinct_values=rng.randint(1, cardinality),
                index_kind=INDEX_BTREE if aid == indexed_attr else None,
            ))
        relations.append(RelationInfo(
            id=rid, name=f"rel{rid}", cardinality=cardinality,
            attributes=tuple(attributes)))

    def make_edge(a: int, b: int) -> JoinEdge:
        a, b = (a, b) if a < b else (b, a)
        attr_a = rng.randrange(config.attributes_per_relation)
        attr_b = rng.randrange(config.attributes_per_relation)
        # Classic equi-join estimate: one over the larger distinct count.
        distinct = max(relations[a].attributes[attr_a].distinct_values,
                       relations[b].attributes[attr_b].distinct_values)
        return JoinEdge(a, attr_a, b, attr_b, selectivity=1.0 / distinct)

    edges: list[JoinEdge] = []
    seen_pairs: set[tuple[int, int]] = set()
    # Random spanning tree: attach each relation to an already-connected one.
    order = list(range(config.relation_count))
    rng.shuffle(order)
    for i in range(1, len(order)):
        a = order[i]
        b = order[rng.randrange(i)]
        edges.append(make_edge(a, b))
        seen_pairs.add((min(a, b), max(a, b)))
    for a in range(config.relation_count):
        for b in range(a + 1, config.relation_count):
            if (a, b) in seen_pairs:
                continue
            if rng.random() < config.edge_density:
                edges.append(make_edge(a, b))
                seen_pairs.add((a, b))
    edges.sort(key=lambda e: (e.relation_a, e.relation_b, e.attribute_a, e.attribute_b))

    return Catalog(relations=relations, join_edges=edges)


def generate_workload(catalog: Catalog, config: WorkloadConfig, seed: int) -> Workload:
    """Generate queries whose relation sets induce connected join subgraphs.

    Relation counts are drawn uniformly from [min_relations, max_relations];
    each query's join predicates are the catalog edges induced on its
    relation set, so connectivity follows from the frontier-growth sampling.
    """
    config.validate(catalog)
    rng = random.Random(seed)

    adjacency: dict[int, set[int]] = {rel.id: set() for rel in catalog.relations}
    for edge in catalog.join_edges:
        adjacency[edge.relation_a].add(edge.relation_b)
        adjacency[edge.relation_b].add(edge.relation_a)

    queries = []
    for qid in range(config.query_count):
        target = rng.randint(config.min_relations, config.max_relations)
        relation_ids = _grow_connected_subset(adjacency, target, rng)
        rel_set = frozenset(relation_ids)
        join_predicates = catalog.edges_within(rel_set)
        selections = []
        for rid in sorted(rel_set):
            if rng.random() < config.selection_density:
                attr = rng.randrange(len(catalog.relation(rid).attributes))
                # Log-uniform selectivity in [1e-4, 1].
                selectivity = 10.0 ** rng.uniform(-4.0, 0.0)
                selections.append(SelectionPredicate(rid, attr, selectivity))
        queries.append(Query(
            id=qid,
            relation_ids=rel_set,
            join_predicates=join_predicates,
            selection_predicates=selections,
            aggregate=rng.random() < config.aggregate_probability,
        ))
    return Workload(queries=queries, generator_seed=seed)


def _grow_connected_subset(adjacency: dict[int, set[int]], size: int,
                           rng: random.Random, retries: int = 32) -> list[int]:
    for _ in range(retries):
        start = rng.choice(sorted(adjacency))
        chosen = {start}
        frontier = set(adjacency[start])
        while len(chosen) < size and frontier:
            nxt = rng.choice(sorted(frontier))
            chosen.add(nxt)
            frontier |= adjacency[nxt]
            frontier -= chosen
        if len(chosen) == size:
            return sorted(chosen)
    raise GenerationError(
        f"could not sample a connected subset of {size} relations")


# --- persistence ---------------------------------------------------------


def catalog_to_dict(catalog: Catalog) -> dict:
    return {
        "relations": [
            {
                "id": rel.id,
                "name": rel.name,
                "cardinality": rel.cardinality,
                "attributes": [
                    {"id": a.id, "name": a.name,
                     "distinct_values": a.distinct_values,
                     "index_kind": a.index_kind}
                    for a in rel.attributes
                ],
            }
            for rel in catalog.relations
        ],
        "join_edges": [
            {"relation_a": e.relation_a, "attribute_a": e.attribute_a,
             "relation_b": e.relation_b, "attribute_b": e.attribute_b,
             "selectivity": e.selectivity}
            for e in catalog.join_edges
        ],
    }


def catalog_from_dict(doc: dict) -> Catalog:
    relations = [
        RelationInfo(
            id=rel["id"], name=rel["name"], cardinality=rel["cardinality"],
            attributes=tuple(AttributeInfo(
                id=a["id"], name=a["name"],
                distinct_values=a["distinct_values"],
                index_kind=a["index_kind"]) for a in rel["attributes"]))
        for rel in doc["relations"]
    ]
    edges = [
        JoinEdge(e["relation_a"], e["attribute_a"], e["relation_b"],
                 e["attribute_b"], e["selectivity"])
        for e in doc["join_edges"]
    ]
    return Catalog(relations=relations, join_edges=edges)


def catalog_digest(catalog: Catalog) -> str:
    return digest(catalog_to_dict(catalog))


def save_catalog(catalog: Catalog, path: str) -> None:
    dump_versioned(path, "catalog", catalog_to_dict(catalog))


def load_catalog(path: str) -> Catalog:
    return catalog_from_dict(load_versioned(path, "catalog"))


def query_to_dict(query: Query) -> dict:
    return {
        "id": query.id,
        "relation_ids": sorted(query.relation_ids),
        "join_predicates": [
            {"relation_a": e.relation_a, "attribute_a": e.attribute_a,
             "relation_b": e.relation_b, "attribute_b": e.attribute_b,
             "selectivity": e.selectivity}
            for e in query.join_predicates
        ],
        "selection_predicates": [
            {"relation_id": p.relation_id, "attribute_id": p.attribute_id,
             "selectivity": p.selectivity}
            for p in query.selection_predicates
        ],
        "aggregate": query.aggregate,
    }


def query_from_dict(doc: dict) -> Query:
    return Query(
        id=doc["id"],
        relation_ids=frozenset(doc["relation_ids"]),
        join_predicates=[
            JoinEdge(e["relation_a"], e["attribute_a"], e["relation_b"],
                     e["attribute_b"], e["selectivity"])
            for e in doc["join_predicates"]
        ],
        selection_predicates=[
            SelectionPredicate(p["relation_id"], p["attribute_id"],
                               p["selectivity"])
            for p in doc["selection_predicates"]
        ],
        aggregate=doc["aggregate"],
    )


def save_workload(workload: Workload, path: str) -> None:
    dump_versioned(path, "workload", {
        "generator_seed": workload.generator_seed,
        "queries": [query_to_dict(q) for q in workload.queries],
    })


def load_workload(path: str) -> Workload:
    doc = load_versioned(path, "workload")
    return Workload(
        queries=[query_from_dict(q) for q in doc["queries"]],
        generator_seed=doc["generator_seed"],
    )
