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
from planlab.costmodel import LatencyModelConfig, build_latency_model


@pytest.fixture(scope="session")
def catalog6():
    return generate_catalog(CatalogConfig(relation_count=6, edge_density=0.5), seed=11)


@pytest.fixture(scope="session")
def workload6(catalog6):
    cfg = WorkloadConfig(query_count=40, min_relations=2, max_relations=5,
                         selection_density=0.6, aggregate_probability=0.4)
    return generate_workload(catalog6, cfg, seed=12)


@pytest.fixture(scope="session")
def model6(catalog6):
    return build_latency_model(catalog6, LatencyModelConfig(), seed=13)


@pytest.fixture(scope="session")
def quiet_model6(catalog6):
    cfg = LatencyModelConfig(noise_sigma=0.0, error_sigma=0.0,
                             heavy_error_probability=0.0)
    return build_latency_model(catalog6, cfg, seed=13)


def two_relation_catalog(card_a=1000, card_b=500, selectivity=0.01,
                         index_on_a=False):
    """Minimal hand-built catalog: two relations joined on attribute 0."""
    attrs_a = (AttributeInfo(0, "a0", max(card_a // 2, 1),
                             "btree" if index_on_a else None),)
    attrs_b = (AttributeInfo(0, "b0", max(card_b // 2, 1), None),)
    relations = [RelationInfo(0, "A", card_a, attrs_a),
                 RelationInfo(1, "B", card_b, attrs_b)]
    edges = [JoinEdge(0, 0, 1, 0, selectivity)]
    return Catalog(relations=relations, join_edges=edges)


def two_relation_query(catalog, selections=(), aggregate=False):
    return Query(id=0, relation_ids=frozenset({0, 1}),
                 join_predicates=list(catalog.join_edges),
                 selection_predicates=[SelectionPredicate(*s) for s in selections],
                 aggregate=aggregate)
