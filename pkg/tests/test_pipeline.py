"""Bias estimation and LWR dataset construction tests."""

import numpy as np
import pytest

from masm_lwr.clicksim import ImpressionLog, WorldConfig, generate_world, simulate_logs
from masm_lwr.pipeline import (
    CtrStat, EstimationError, PipelineConfig, PositionBiasTable, RelevanceType,
    bucket_positives, build_lwr, calibrated_ctr, compute_ctr_stats, estimate_bias,
    estimate_position_ctr, estimate_real_ctr, gen_strong_irrelevant,
    gen_weak_irrelevant, load_lwr,
)


def make_log(rows, query_ids, product_ids):
    """rows: (query_idx, product_idx, position, clicked, bucket) tuples."""
    q, p, pos, clk, b = zip(*rows)
    return ImpressionLog(q, p, pos, [1] * len(rows), clk, b, query_ids, product_ids)


def test_relevance_type_thresholds():
    assert [t.threshold for t in RelevanceType] == [0.9, 0.8, 0.6, 0.3, 0.1]
    assert [t.is_positive for t in RelevanceType] == [True, True, True, False, False]


def test_estimate_real_and_position_ctr():
    rows = [(0, 0, 1, True, 1), (0, 0, 1, False, 1), (0, 1, 2, False, 1),
            (0, 1, 2, False, 1), (0, 0, 1, True, 0)]
    log = make_log(rows, ["q0"], ["p0", "p1"])
    assert estimate_real_ctr(log) == pytest.approx(0.25)
    assert estimate_position_ctr(log, 1) == pytest.approx(0.5)
    assert estimate_position_ctr(log, 2) == pytest.approx(0.0)
    with pytest.raises(EstimationError):
        estimate_position_ctr(log, 3)


def test_estimate_bias_flat_log_gives_unit_bias():
    # every position same CTR: bias must be exactly 1 everywhere
    rows = []
    for pos in (1, 2):
        rows += [(0, 0, pos, True, 1)] * 5 + [(0, 0, pos, False, 1)] * 5
    log = make_log(rows, ["q0"], ["p0"])
    cfg = PipelineConfig(min_exposures_per_position=5)
    table = estimate_bias(log, cfg, page_size=2)
    assert table.bias == pytest.approx([1.0, 1.0])
    assert table.relative == pytest.approx([1.0, 1.0])
    assert table.queries_used == 1


def test_estimate_bias_two_to_one():
    # position 1 CTR 0.2, position 2 CTR 0.0, overall 0.1 -> bias (2.0, 0.0)
    rows = [(0, 0, 1, True, 1)] * 2 + [(0, 0, 1, False, 1)] * 8 \
        + [(0, 0, 2, False, 1)] * 10
    log = make_log(rows, ["q0"], ["p0"])
    table = estimate_bias(log, PipelineConfig(min_exposures_per_position=10), 2)
    assert table.bias == pytest.approx([2.0, 0.0])


def test_estimate_bias_requires_qualifying_query():
    rows = [(0, 0, 1, True, 1)] * 3  # position 2 never exposed
    log = make_log(rows, ["q0"], ["p0"])
    with pytest.raises(EstimationError):
        estimate_bias(log, PipelineConfig(min_exposures_per_position=2), 2)


def test_estimate_bias_recovers_generator_curve():
    config = WorldConfig(randomized_fraction=1.0)
    world = generate_world(config)
    log = simulate_logs(world, 6000, seed=11)
    table = estimate_bias(log, PipelineConfig(), config.page_size)
    true_rel = np.array(config.bias_curve) / config.bias_curve[0]
    err = np.abs(np.array(table.relative) - true_rel) / true_rel
    assert err.max() < 0.10
    # monotone decay, allowing small sampling wiggle
    rel = table.relative
    assert all(rel[i + 1] < rel[i] * 1.05 for i in range(len(rel) - 1))


def test_position_ctr_ratio_matches_curve():
    config = WorldConfig(randomized_fraction=1.0)
    world = generate_world(config)
    log = simulate_logs(world, 6000, seed=12)
    r = estimate_position_ctr(log, 1) / estimate_position_ctr(log, 10)
    expected = config.bias_curve[0] / config.bias_curve[9]
    assert abs(r - expected) / expected < 0.10


def test_bias_table_round_trip(tmp_path):
    table = PositionBiasTable([1.0, 0.5], [1.0, 0.5], 3, 50)
    path = tmp_path / "bias.json"
    table.save(path)
    assert PositionBiasTable.load(path) == table


def test_compute_ctr_stats_counts():
    rows = [(0, 0, 1, True, 0), (0, 0, 2, False, 1), (0, 1, 2, True, 0),
            (1, 0, 1, False, 0)]
    log = make_log(rows, ["q0", "q1"], ["p0", "p1"])
    stats = compute_ctr_stats(log, page_size=2)
    s00 = next(s for s in stats["q0"] if s.product_id == "p0")
    assert s00.first_page_exposures == 2
    assert s00.clicks == 1
    assert s00.pos_exposures.tolist() == [1, 1]


def test_calibrated_ctr():
    table = PositionBiasTable([1.0, 0.5], [1.0, 0.5], 1, 1)
    stat = CtrStat("q", "p", 4, 2, np.array([2, 2]))
    # 2 clicks / (2*1.0 + 2*0.5)
    assert calibrated_ctr(stat, table) == pytest.approx(2 / 3)
    with pytest.raises(EstimationError):
        calibrated_ctr(CtrStat("q", "p", 0, 0, np.array([0, 0])), table)


def _stat(pid, clicks, exposures, page_size=2):
    pos = np.zeros(page_size, dtype=int)
    pos[0] = exposures
    return CtrStat("q0", pid, exposures, clicks, pos)


def test_bucket_positives_edges_and_ties():
    table = PositionBiasTable([1.0, 0.5], [1.0, 0.5], 1, 1)
    cfg = PipelineConfig(min_pair_exposures=10, min_products_per_query=5)
    stats = [_stat(f"p{i}", clicks, 20) for i, clicks in
             enumerate([10, 8, 6, 4, 2, 1])]
    pairs = bucket_positives("q0", stats, table, cfg)
    # k=6, ceil(0.2*6)=2 at each edge
    types = {p.product_id: p.rtype for p in pairs}
    assert types["p0"] is RelevanceType.STRONG_RELEVANT
    assert types["p1"] is RelevanceType.STRONG_RELEVANT
    assert types["p2"] is RelevanceType.RELEVANT
    assert types["p3"] is RelevanceType.RELEVANT
    assert types["p4"] is RelevanceType.WEAK_RELEVANT
    assert types["p5"] is RelevanceType.WEAK_RELEVANT


def test_bucket_positives_filters():
    table = PositionBiasTable([1.0, 0.5], [1.0, 0.5], 1, 1)
    cfg = PipelineConfig(min_pair_exposures=10, min_products_per_query=5)
    # too few qualifying products: nothing emitted
    stats = [_stat(f"p{i}", 5, 20) for i in range(4)]
    assert bucket_positives("q0", stats, table, cfg) == []
    # unclicked and under-exposed products never qualify
    stats = [_stat(f"p{i}", 5, 20) for i in range(5)]
    stats.append(_stat("p9", 0, 20))
    stats.append(_stat("p8", 5, 5))
    pairs = bucket_positives("q0", stats, table, cfg)
    assert {p.product_id for p in pairs} == {f"p{i}" for i in range(5)}


def test_gen_weak_irrelevant_threshold_and_exclusion():
    from masm_lwr.clicksim import RewriteEntry

    rewrites = [RewriteEntry("q0", "q1", 0.1), RewriteEntry("q0", "q2", 0.9)]
    clicked = {"q1": {"a", "b"}, "q2": {"z"}}
    pairs = gen_weak_irrelevant("q0", rewrites, clicked, 0.35, exclude={"b"})
    assert [(p.product_id, p.rtype) for p in pairs] == \
        [("a", RelevanceType.WEAK_IRRELEVANT)]


def test_gen_strong_irrelevant_exclusion_and_shortfall():
    rng = np.random.default_rng(0)
    pool = [f"p{i}" for i in range(10)]
    pairs, short = gen_strong_irrelevant("q0", pool, {"p0", "p1"}, 5, rng)
    assert short == 0
    assert len(pairs) == 5
    assert all(p.product_id not in {"p0", "p1"} for p in pairs)
    pairs, short = gen_strong_irrelevant("q0", pool[:3], {"p0"}, 5, rng)
    assert len(pairs) == 2 and short == 3


def test_gen_strong_irrelevant_deterministic():
    pool = [f"p{i}" for i in range(30)]
    a, _ = gen_strong_irrelevant("q", pool, set(), 5, np.random.default_rng(7))
    b, _ = gen_strong_irrelevant("q", pool, set(), 5, np.random.default_rng(7))
    assert a == b


@pytest.fixture(scope="module")
def built_dataset(tmp_path_factory):
    config = WorldConfig(seed=42)
    world = generate_world(config)
    log = simulate_logs(world, 12000, seed=21)
    cfg = PipelineConfig()
    table = estimate_bias(log, cfg, config.page_size)
    out = tmp_path_factory.mktemp("lwr") / "lwr.ndjson"
    report = build_lwr(log, table, world, cfg, out)
    return world, report, load_lwr(out)


def test_build_lwr_report_consistency(built_dataset):
    world, report, records = built_dataset
    assert report.total == len(records)
    assert sum(v["n_sample"] for v in report.per_type.values()) == report.total
    for v in report.per_type.values():
        assert v["share"] == pytest.approx(v["n_sample"] / report.total)


def test_build_lwr_mixture_near_target(built_dataset):
    _, report, _ = built_dataset
    from masm_lwr.pipeline import DEFAULT_MIXTURE

    for t, target in DEFAULT_MIXTURE.items():
        share = report.per_type[t.value]["share"]
        assert abs(share - target) < 0.02, (t, share, target)


def test_build_lwr_sorted_and_typed(built_dataset):
    _, _, records = built_dataset
    keys = [(r["query_id"], r["product_id"], r["type"]) for r in records]
    assert keys == sorted(keys)
    valid = {t.value for t in RelevanceType}
    assert all(r["type"] in valid for r in records)


def test_build_lwr_ground_truth_quality(built_dataset):
    world, _, records = built_dataset
    strong_rel = [r for r in records if r["type"] == "strong_relevant"]
    good = sum(world.grade(r["query_id"], r["product_id"]) >= 1 for r in strong_rel)
    assert good / len(strong_rel) >= 0.95
    weak_irr = [r for r in records if r["type"] == "weak_irrelevant"]
    bad = sum(world.grade(r["query_id"], r["product_id"]) == 0 for r in weak_irr)
    assert bad / len(weak_irr) >= 0.90
    strong_irr = [r for r in records if r["type"] == "strong_irrelevant"]
    bad = sum(world.grade(r["query_id"], r["product_id"]) == 0 for r in strong_irr)
    assert bad / len(strong_irr) >= 0.95


def test_build_lwr_deterministic(tmp_path):
    config = WorldConfig(n_categories=3, products_per_category=15,
                         queries_per_category=3, seed=9)
    world = generate_world(config)
    log = simulate_logs(world, 6000, seed=10)
    cfg = PipelineConfig(min_exposures_per_position=20)
    table = estimate_bias(log, cfg, config.page_size)
    p1, p2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    build_lwr(log, table, world, cfg, p1)
    build_lwr(log, table, world, cfg, p2)
    assert p1.read_bytes() == p2.read_bytes()
