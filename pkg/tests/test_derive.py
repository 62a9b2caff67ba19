"""Derivation rules against hand values and an exhaustive per-node enumerator."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msrnas.derive import (
    CELL_TYPES,
    Genotype,
    RankTable,
    SelectionMode,
    best_operator,
    cell_edges,
    derive_genotype,
    edge_strength,
    intermediate_nodes,
    rank_table_from_text,
    rank_table_to_text,
    select_predecessors,
)
from msrnas.errors import ArgumentError, DerivationError, FormatError, GenotypeError
from msrnas.operators import OPERATOR_NAMES

MIN = SelectionMode.MIN_STABLE_RANK
MAX = SelectionMode.MAX_STABLE_RANK


def table_for(nodes, fill):
    """Build a complete table; fill(cell_type, edge, op) -> value."""
    table = RankTable(nodes=nodes)
    for t in CELL_TYPES:
        for edge in cell_edges(nodes):
            for op in OPERATOR_NAMES:
                table.set(t, edge, op, fill(t, edge, op))
    return table


def random_table(nodes, seed, integer_values=False):
    rng = np.random.Generator(np.random.PCG64(seed))
    if integer_values:
        return table_for(nodes, lambda t, e, o: float(rng.integers(1, 12)))
    return table_for(nodes, lambda t, e, o: float(1.0 + 99.0 * rng.random()))


def enumerate_node_assignment(table, cell_type, node, mode):
    """Exhaustive oracle: score every legal (predecessor-pair, operator-pair)
    assignment for one intermediate node and return the best one."""
    sign = -1.0 if mode is MIN else 1.0

    def score(i, op):
        v = table.get(cell_type, (i, node), op)
        if v is None:
            return -math.inf
        return sign * v

    best = None
    for i1, i2 in itertools.combinations(range(node), 2):
        for op1 in OPERATOR_NAMES:
            for op2 in OPERATOR_NAMES:
                total = score(i1, op1) + score(i2, op2)
                key = (
                    -total,
                    i1, i2,
                    OPERATOR_NAMES.index(op1),
                    OPERATOR_NAMES.index(op2),
                )
                if best is None or key < best[0]:
                    best = (key, [(op1, i1), (op2, i2)])
    return best[1]


def oracle_genotype(table, mode):
    per_type = {}
    for cell_type in CELL_TYPES:
        per_type[cell_type] = [
            enumerate_node_assignment(table, cell_type, node, mode)
            for node in intermediate_nodes(table.nodes)
        ]
    return Genotype(mode=mode.value, nodes=table.nodes,
                    operators=OPERATOR_NAMES,
                    normal=per_type["normal"], reduce=per_type["reduce"])


EXAMPLE = {"sep3": 3.2, "sep5": 2.1, "dil3": 4.0, "dil5": 2.5}


def test_best_operator_min_and_max():
    table = table_for(5, lambda t, e, o: EXAMPLE[o])
    assert best_operator(table, "normal", (0, 2), MIN) == "sep5"
    assert best_operator(table, "normal", (0, 2), MAX) == "dil3"


def test_best_operator_tie_break():
    table = table_for(5, lambda t, e, o: 2.0)
    assert best_operator(table, "normal", (0, 2), MIN) == "sep3"
    assert best_operator(table, "normal", (0, 2), MAX) == "sep3"


def test_best_operator_flagged_entries():
    def fill(t, e, o):
        return None if o == "sep3" else EXAMPLE[o]

    table = table_for(5, fill)
    assert best_operator(table, "normal", (0, 2), MIN) == "sep5"
    assert best_operator(table, "normal", (0, 2), MAX) == "dil3"


def test_best_operator_all_flagged_raises():
    table = table_for(5, lambda t, e, o: None)
    with pytest.raises(DerivationError):
        best_operator(table, "normal", (0, 2), MIN)


def test_edge_strength_values():
    table = table_for(5, lambda t, e, o: EXAMPLE[o])
    assert edge_strength(table, "normal", (0, 2), MIN) == pytest.approx(-2.1)
    constant = table_for(5, lambda t, e, o: 7.0)
    assert edge_strength(constant, "reduce", (1, 3), MIN) == pytest.approx(-7.0)


def test_edge_strength_orders_edges_by_min_rank(rng):
    table = random_table(7, seed=5)
    edges = [(i, 5) for i in range(5)]
    strengths = [edge_strength(table, "normal", e, MIN) for e in edges]
    min_ranks = [
        min(table.get("normal", e, op) for op in OPERATOR_NAMES) for e in edges
    ]
    assert np.argsort(strengths).tolist() == np.argsort(min_ranks)[::-1].tolist()


def test_select_predecessors_example():
    by_source = {0: 2.0, 1: 3.0, 2: 1.5, 3: 2.5}

    def fill(t, e, o):
        return by_source[e[0]] if e[1] == 4 else 1.0

    table = table_for(7, fill)
    assert select_predecessors(table, "normal", 4, MIN) == (2, 0)


def test_select_predecessors_forced_pair():
    table = random_table(5, seed=1)
    assert set(select_predecessors(table, "normal", 2, MIN)) == {0, 1}


def test_select_predecessors_tie_break():
    table = table_for(7, lambda t, e, o: 3.0)
    assert select_predecessors(table, "reduce", 4, MIN) == (0, 1)


def test_select_predecessors_bad_node():
    table = random_table(5, seed=2)
    with pytest.raises(ArgumentError):
        select_predecessors(table, "normal", 1, MIN)


def test_uniform_best_operator_appears_everywhere():
    def fill(t, e, o):
        return 1.5 if o == "dil5" else 5.0 + OPERATOR_NAMES.index(o)

    table = table_for(6, fill)
    geno = derive_genotype(table, mode=MIN)
    for rows in (geno.normal, geno.reduce):
        for pairs in rows:
            assert all(op == "dil5" for op, _ in pairs)


def test_min_max_modes_differ_on_distinct_tables():
    table = random_table(6, seed=3)
    g_min = derive_genotype(table, mode=MIN)
    g_max = derive_genotype(table, mode=MAX)
    for row_min, row_max in zip(g_min.normal, g_max.normal):
        for (op_a, i_a), (op_b, i_b) in zip(row_min, row_max):
            if i_a == i_b:
                assert op_a != op_b


def test_derive_matches_exhaustive_oracle_corpus():
    for seed in range(300):
        nodes = 5 + (seed % 3)
        table = random_table(nodes, seed=seed)
        for mode in (MIN, MAX):
            got = derive_genotype(table, mode=mode)
            expected = oracle_genotype(table, mode)
            assert got.normal == expected.normal, f"seed {seed} mode {mode}"
            assert got.reduce == expected.reduce, f"seed {seed} mode {mode}"


def test_derive_matches_oracle_with_ties():
    for seed in range(60):
        table = random_table(6, seed=seed + 10_000, integer_values=True)
        for mode in (MIN, MAX):
            got = derive_genotype(table, mode=mode)
            expected = oracle_genotype(table, mode)
            assert got.normal == expected.normal
            assert got.reduce == expected.reduce


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 7))
def test_monotone_transform_invariance(seed, nodes):
    table = random_table(nodes, seed=seed)
    transformed = RankTable(nodes=nodes, entries={
        key: math.exp(0.3 * value) + 2.0 for key, value in table.entries.items()
    })
    assert derive_genotype(table, mode=MIN) == derive_genotype(
        RankTable(nodes=nodes, entries={
            key: math.exp(0.3 * v) + 2.0 for key, v in table.entries.items()
        }), mode=MIN)
    assert derive_genotype(transformed, mode=MIN).normal == \
        derive_genotype(table, mode=MIN).normal


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(5, 7))
def test_derived_genotype_always_valid(seed, nodes):
    geno = derive_genotype(random_table(nodes, seed=seed), mode=MIN)
    geno.validate()
    for rows in (geno.normal, geno.reduce):
        for node, pairs in zip(intermediate_nodes(nodes), rows):
            preds = [p for _, p in pairs]
            assert len(set(preds)) == 2
            assert all(p < node for p in preds)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mode_duality_on_negated_table(seed):
    table = random_table(6, seed=seed)
    negated = RankTable(nodes=6, entries={
        key: -value for key, value in table.entries.items()
    })
    assert derive_genotype(table, mode=MAX).normal == \
        derive_genotype(negated, mode=MIN).normal


def test_incomplete_table_rejected():
    table = random_table(5, seed=4)
    del table.entries[("normal", (0, 2), "sep3")]
    with pytest.raises(DerivationError, match="incomplete"):
        derive_genotype(table, mode=MIN)


def test_rank_table_text_roundtrip():
    table = random_table(6, seed=7)
    table.entries[("reduce", (0, 2), "dil3")] = None
    table.epoch, table.seed, table.rank_iterations = 12, 3, 50
    text = rank_table_to_text(table)
    back = rank_table_from_text(text)
    assert back.nodes == table.nodes
    assert back.epoch == 12 and back.seed == 3 and back.rank_iterations == 50
    assert back.entries == table.entries
    assert rank_table_to_text(back) == text


def test_rank_table_bad_header():
    with pytest.raises(FormatError):
        rank_table_from_text("nonsense\n")


def test_genotype_json_roundtrip_and_canonical_order():
    geno = derive_genotype(random_table(7, seed=8), mode=MIN)
    text = geno.to_json_str()
    assert text.index('"mode"') < text.index('"nodes"') < text.index('"operators"')
    assert text.index('"operators"') < text.index('"normal"') < text.index('"reduce"')
    back = Genotype.from_json_str(text)
    assert back == geno
    assert back.to_json_str() == text


def test_genotype_validation_rejects_bad_structures():
    geno = derive_genotype(random_table(5, seed=9), mode=MIN)
    broken = Genotype(mode="min", nodes=5, operators=OPERATOR_NAMES,
                      normal=[[("sep3", 0)], geno.normal[1]],
                      reduce=geno.reduce)
    with pytest.raises(GenotypeError):
        broken.validate()
    dup = Genotype(mode="min", nodes=5, operators=OPERATOR_NAMES,
                   normal=[[("sep3", 0), ("sep5", 0)], geno.normal[1]],
                   reduce=geno.reduce)
    with pytest.raises(GenotypeError):
        dup.validate()


def test_genotype_from_bad_json():
    with pytest.raises(FormatError):
        Genotype.from_json_str("{not json")
    with pytest.raises(FormatError):
        Genotype.from_json_str("{}")
