"""Position-bias estimation and level-wise relevance dataset construction.

From randomized-bucket page-1 logs we estimate a per-position bias table
(per query: position CTR over overall CTR, averaged over queries). The
bias table then calibrates pair-level CTRs, and clicked products are
bucketed into three positive confidence levels by calibrated-CTR rank.
Two negative levels come from low-confidence query rewrites (hard) and
random sampling from the product pool (easy). Each level carries the loss
threshold used during training.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np

from .clicksim import ImpressionLog, RANDOMIZED, World


class EstimationError(RuntimeError):
    """Bias estimation had no qualifying data."""


class RelevanceType(Enum):
    STRONG_RELEVANT = "strong_relevant"
    RELEVANT = "relevant"
    WEAK_RELEVANT = "weak_relevant"
    WEAK_IRRELEVANT = "weak_irrelevant"
    STRONG_IRRELEVANT = "strong_irrelevant"

    @property
    def threshold(self) -> float:
        return _THRESHOLDS[self]

    @property
    def is_positive(self) -> bool:
        return _THRESHOLDS[self] > 0.5


_THRESHOLDS = {
    RelevanceType.STRONG_RELEVANT: 0.9,
    RelevanceType.RELEVANT: 0.8,
    RelevanceType.WEAK_RELEVANT: 0.6,
    RelevanceType.WEAK_IRRELEVANT: 0.3,
    RelevanceType.STRONG_IRRELEVANT: 0.1,
}

# Default mixture of the five levels in the built dataset, by share of samples.
DEFAULT_MIXTURE = {
    RelevanceType.STRONG_RELEVANT: 0.088,
    RelevanceType.RELEVANT: 0.105,
    RelevanceType.WEAK_RELEVANT: 0.013,
    RelevanceType.WEAK_IRRELEVANT: 0.588,
    RelevanceType.STRONG_IRRELEVANT: 0.206,
}


@dataclass
class PipelineConfig:
    min_exposures_per_position: int = 50
    min_pair_exposures: int = 25
    min_products_per_query: int = 5
    rewrite_conf_threshold: float = 0.35
    mixture: dict = field(default_factory=lambda: dict(DEFAULT_MIXTURE))
    seed: int = 42

    def validate(self) -> None:
        if not 0 < self.rewrite_conf_threshold < 1:
            raise ValueError("rewrite_conf_threshold must lie in (0, 1)")
        if self.min_pair_exposures < 1 or self.min_exposures_per_position < 1:
            raise ValueError("exposure floors must be >= 1")


@dataclass
class PositionBiasTable:
    bias: list[float]
    relative: list[float]
    queries_used: int
    min_exposures_per_position: int

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "PositionBiasTable":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


@dataclass
class CtrStat:
    """Per (query, product) first-page exposure/click counts."""

    query_id: str
    product_id: str
    first_page_exposures: int
    clicks: int
    pos_exposures: np.ndarray  # exposures per position, length page_size

    def exposure_bias_sum(self, table: PositionBiasTable) -> float:
        return float(np.dot(self.pos_exposures, table.bias))


def estimate_real_ctr(events: ImpressionLog) -> float:
    """Overall clicks / exposures over randomized first-page events (one query)."""
    mask = (events.bucket == RANDOMIZED) & (events.page == 1)
    exposures = int(mask.sum())
    if exposures == 0:
        raise EstimationError("no randomized first-page exposures for query")
    return float(events.clicked[mask].sum()) / exposures


def estimate_position_ctr(events: ImpressionLog, position: int,
                          min_exposures: int = 1) -> float:
    """Clicks / exposures at one position over randomized first-page events."""
    mask = (events.bucket == RANDOMIZED) & (events.page == 1) & (events.position == position)
    exposures = int(mask.sum())
    if exposures < min_exposures:
        raise EstimationError(f"position {position}: {exposures} exposures < {min_exposures}")
    return float(events.clicked[mask].sum()) / exposures


def estimate_bias(log: ImpressionLog, config: PipelineConfig,
                  page_size: int) -> PositionBiasTable:
    """Average per-query (position CTR / overall CTR) over qualifying queries.

    A query qualifies when every position clears the per-position exposure
    floor in the randomized bucket; positive overall CTR is also required
    (the ratio is undefined otherwise).
    """
    mask = (log.bucket == RANDOMIZED) & (log.page == 1)
    if not mask.any():
        raise EstimationError("log has no randomized first-page events")
    qidx = log.query_idx[mask]
    pos = log.position[mask].astype(np.int64)
    clicked = log.clicked[mask]
    n_q = len(log.query_ids)
    flat = qidx.astype(np.int64) * page_size + (pos - 1)
    exp_qp = np.bincount(flat, minlength=n_q * page_size).reshape(n_q, page_size)
    clk_qp = np.bincount(flat[clicked], minlength=n_q * page_size).reshape(n_q, page_size)

    qualifying = (exp_qp >= config.min_exposures_per_position).all(axis=1)
    qualifying &= clk_qp.sum(axis=1) > 0
    if not qualifying.any():
        raise EstimationError(
            f"no qualifying query: {n_q} queries, per-position floor "
            f"{config.min_exposures_per_position}, "
            f"{int(mask.sum())} randomized exposures total"
        )
    ctr_real = clk_qp[qualifying].sum(axis=1) / exp_qp[qualifying].sum(axis=1)
    with np.errstate(invalid="ignore"):
        ctr_stat = clk_qp[qualifying] / exp_qp[qualifying]
    per_query_bias = ctr_stat / ctr_real[:, None]
    bias = per_query_bias.mean(axis=0)
    return PositionBiasTable(
        bias=[float(b) for b in bias],
        relative=[float(b / bias[0]) for b in bias],
        queries_used=int(qualifying.sum()),
        min_exposures_per_position=config.min_exposures_per_position,
    )


def compute_ctr_stats(log: ImpressionLog, page_size: int) -> dict[str, list[CtrStat]]:
    """Aggregate all first-page events (both buckets) into per-pair stats."""
    mask = log.page == 1
    qidx = log.query_idx[mask].astype(np.int64)
    pidx = log.product_idx[mask].astype(np.int64)
    pos = log.position[mask].astype(np.int64)
    clicked = log.clicked[mask]
    n_p = len(log.product_ids)
    key = (qidx * n_p + pidx) * page_size + (pos - 1)
    order = np.argsort(key, kind="stable")
    key, clicked = key[order], clicked[order]
    uniq, start, counts = np.unique(key, return_index=True, return_counts=True)
    clicks_per_key = np.add.reduceat(clicked.astype(np.int64), start)

    stats: dict[str, list[CtrStat]] = defaultdict(list)
    acc: dict[tuple[int, int], tuple[np.ndarray, int]] = {}
    for k, n_exp, n_clk in zip(uniq, counts, clicks_per_key):
        pair = (int(k // (n_p * page_size)), int((k // page_size) % n_p))
        position = int(k % page_size)
        if pair not in acc:
            acc[pair] = (np.zeros(page_size, dtype=np.int64), 0)
        acc[pair][0][position] += int(n_exp)
        acc[pair] = (acc[pair][0], acc[pair][1] + int(n_clk))
    for (qi, pi), (pos_exp, clk) in acc.items():
        stats[log.query_ids[qi]].append(
            CtrStat(
                query_id=log.query_ids[qi],
                product_id=log.product_ids[pi],
                first_page_exposures=int(pos_exp.sum()),
                clicks=clk,
                pos_exposures=pos_exp,
            )
        )
    return dict(stats)


def calibrated_ctr(stat: CtrStat, table: PositionBiasTable) -> float:
    """Clicks over the bias-weighted exposure count (inverse-propensity form)."""
    denom = stat.exposure_bias_sum(table)
    if denom <= 0:
        raise EstimationError(f"pair ({stat.query_id}, {stat.product_id}) has zero bias sum")
    return stat.clicks / denom


@dataclass(frozen=True)
class LwrPair:
    query_id: str
    product_id: str
    rtype: RelevanceType


def bucket_positives(query_id: str, stats: list[CtrStat], table: PositionBiasTable,
                     config: PipelineConfig) -> list[LwrPair]:
    """Split a query's reliable clicked pairs into the three positive levels.

    Pairs need min_pair_exposures first-page exposures and at least one
    click. Sorted by calibrated CTR descending (ties by product id), the
    top 20% are strong relevant, the bottom 20% weak relevant, the rest
    relevant. Queries with too few qualifying products yield nothing.
    """
    qualified = [
        s for s in stats
        if s.first_page_exposures >= config.min_pair_exposures and s.clicks >= 1
    ]
    if len(qualified) < config.min_products_per_query:
        return []
    qualified.sort(key=lambda s: (-calibrated_ctr(s, table), s.product_id))
    k = len(qualified)
    n_edge = math.ceil(0.2 * k)
    out = []
    for rank, s in enumerate(qualified):
        if rank < n_edge:
            rtype = RelevanceType.STRONG_RELEVANT
        elif rank >= k - n_edge:
            rtype = RelevanceType.WEAK_RELEVANT
        else:
            rtype = RelevanceType.RELEVANT
        out.append(LwrPair(query_id, s.product_id, rtype))
    return out


def gen_weak_irrelevant(query_id: str, rewrite_table, clicked_products: dict[str, set],
                        conf_threshold: float, exclude: set | None = None) -> list[LwrPair]:
    """Clicked products of low-confidence rewrites become hard negatives.

    Products already emitted as positives of the original query are
    excluded: direct click evidence outweighs the indirect rewrite path.
    """
    exclude = exclude or set()
    seen: set[str] = set()
    out = []
    for entry in rewrite_table:
        if entry.original_query_id != query_id or entry.confidence >= conf_threshold:
            continue
        for pid in sorted(clicked_products.get(entry.rewritten_query_id, ())):
            if pid in exclude or pid in seen:
                continue
            seen.add(pid)
            out.append(LwrPair(query_id, pid, RelevanceType.WEAK_IRRELEVANT))
    return out


def gen_strong_irrelevant(query_id: str, product_pool: list[str], exclude: set,
                          k: int, rng) -> tuple[list[LwrPair], int]:
    """Uniform sample (without replacement) of never-exposed products.

    Returns the pairs plus a shortfall count when the pool runs out.
    """
    available = sorted(set(product_pool) - exclude)
    take = min(k, len(available))
    shortfall = k - take
    if take == 0:
        return [], shortfall
    chosen = rng.choice(len(available), size=take, replace=False)
    pairs = [LwrPair(query_id, available[i], RelevanceType.STRONG_IRRELEVANT)
             for i in sorted(chosen)]
    return pairs, shortfall


@dataclass
class StatsReport:
    per_type: dict  # type value -> {"n_sample", "n_query", "n_product", "share"}
    total: int
    shortfall_strong_irrelevant: int
    queries_skipped_for_positives: int

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, sort_keys=True, separators=(",", ":"), indent=None)


def build_lwr(log: ImpressionLog, table: PositionBiasTable, world: World,
              config: PipelineConfig, out_path) -> StatsReport:
    """Construct the five-level dataset and write it as line-delimited JSON.

    Per-level pools are first materialized, then capped so the final level
    shares approximate the configured mixture; the binding level is the one
    whose pool is smallest relative to its target share. Output order is
    (query_id, product_id, type) so identical inputs give identical files.
    """
    config.validate()
    page_size = world.config.page_size
    stats = compute_ctr_stats(log, page_size)

    clicked_products: dict[str, set] = defaultdict(set)
    exposed_products: dict[str, set] = defaultdict(set)
    for qid, stat_list in stats.items():
        for s in stat_list:
            exposed_products[qid].add(s.product_id)
            if s.clicks > 0:
                clicked_products[qid].add(s.product_id)

    pools: dict[RelevanceType, list[LwrPair]] = {t: [] for t in RelevanceType}
    skipped = 0
    for q in world.queries:
        positives = bucket_positives(q.query_id, stats.get(q.query_id, []), table, config)
        if not positives and stats.get(q.query_id):
            skipped += 1
        for pair in positives:
            pools[pair.rtype].append(pair)
        positive_ids = {p.product_id for p in positives}
        for pair in gen_weak_irrelevant(q.query_id, world.rewrite_table, clicked_products,
                                        config.rewrite_conf_threshold, exclude=positive_ids):
            pools[pair.rtype].append(pair)

    # strong irrelevant is generated on demand up to its mixture share
    rng = np.random.default_rng(config.seed)
    mixture = {RelevanceType(k) if not isinstance(k, RelevanceType) else k: v
               for k, v in config.mixture.items()}
    sampled_types = [t for t in RelevanceType if t is not RelevanceType.STRONG_IRRELEVANT]
    scale = min(
        len(pools[t]) / mixture[t] for t in sampled_types if mixture[t] > 0
    )
    targets = {t: int(round(scale * mixture[t])) for t in RelevanceType}

    si_total = targets[RelevanceType.STRONG_IRRELEVANT]
    n_queries = len(world.queries)
    product_pool = [p.product_id for p in world.products]
    shortfall = 0
    for i, q in enumerate(world.queries):
        # spread the strong-irrelevant budget evenly over queries
        k = si_total // n_queries + (1 if i < si_total % n_queries else 0)
        if k == 0:
            continue
        exclude = set(exposed_products.get(q.query_id, set()))
        exclude |= {p.product_id for p in pools[RelevanceType.WEAK_IRRELEVANT]
                    if p.query_id == q.query_id}
        pairs, short = gen_strong_irrelevant(q.query_id, product_pool, exclude, k, rng)
        shortfall += short
        pools[RelevanceType.STRONG_IRRELEVANT].extend(pairs)

    # cap each sampled pool down to its target, deterministically
    dataset: list[LwrPair] = []
    for t in RelevanceType:
        pool = sorted(pools[t], key=lambda p: (p.query_id, p.product_id))
        target = targets[t]
        if len(pool) > target:
            keep = rng.choice(len(pool), size=target, replace=False)
            pool = [pool[i] for i in sorted(keep)]
        dataset.extend(pool)
    dataset.sort(key=lambda p: (p.query_id, p.product_id, p.rtype.value))

    per_type = {}
    for t in RelevanceType:
        rows = [p for p in dataset if p.rtype is t]
        per_type[t.value] = {
            "n_sample": len(rows),
            "n_query": len({p.query_id for p in rows}),
            "n_product": len({p.product_id for p in rows}),
            "share": len(rows) / len(dataset) if dataset else 0.0,
        }

    with open(out_path, "w", encoding="utf-8") as f:
        for pair in dataset:
            rec = {
                "query_tokens": list(world.query(pair.query_id).tokens),
                "title_tokens": list(world.product(pair.product_id).title_tokens),
                "type": pair.rtype.value,
                "query_id": pair.query_id,
                "product_id": pair.product_id,
            }
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    return StatsReport(
        per_type=per_type,
        total=len(dataset),
        shortfall_strong_irrelevant=shortfall,
        queries_skipped_for_positives=skipped,
    )


def load_lwr(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f]
