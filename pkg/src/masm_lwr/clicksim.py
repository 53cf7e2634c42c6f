"""Synthetic e-commerce world and click-log simulator.

Generates a world of categorized products and attribute-constrained queries
with known ground-truth relevance grades, then simulates impression logs
under an examination-hypothesis click model:

    P(click) = position_bias[rank] * attractiveness(product) * rate[grade]

A configurable fraction of sessions belongs to a "randomized" traffic
bucket whose first page is uniformly shuffled, which makes per-position
CTR statistics identifiable for bias estimation downstream.

Relevance grades: 2 = category and all required attributes match,
1 = category matches only, 0 = different category.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

DEFAULT_BIAS_CURVE = (1.00, 0.85, 0.72, 0.61, 0.52, 0.44, 0.37, 0.32, 0.27, 0.23)

ORGANIC = 0
RANDOMIZED = 1
BUCKET_NAMES = {ORGANIC: "organic", RANDOMIZED: "randomized"}


class ConfigError(ValueError):
    """A world/simulation config field is out of range."""


class LookupError_(KeyError):
    """Unknown query or product id."""


@dataclass
class WorldConfig:
    n_categories: int = 6
    products_per_category: int = 40
    queries_per_category: int = 5
    attribute_vocab_size: int = 30
    attrs_per_product: int = 3
    filler_vocab_size: int = 50
    fillers_per_title: int = 2
    bias_curve: tuple = DEFAULT_BIAS_CURVE
    attractiveness_spread: float = 0.3
    # attractiveness is clipped so bias * attractiveness * click_rate never
    # saturates at 1; saturation would flatten the measured bias curve at
    # the top positions
    attractiveness_max: float = 1.4
    relevance_click_rates: dict = field(default_factory=lambda: {0: 0.08, 1: 0.35, 2: 0.7})
    randomized_fraction: float = 0.3
    page_size: int = 10
    # retrieval score = grade_weight*grade + attract_weight*log(attractiveness) + Gumbel noise
    retrieval_grade_weight: float = 2.0
    retrieval_attract_weight: float = 0.5
    # the noise scale is small against the grade weight so that products in
    # other categories effectively never reach the page; the never-exposed
    # pool backing strong-irrelevant sampling must survive heavy traffic
    retrieval_noise_scale: float = 0.25
    # low-confidence rewrites switch category; with probability
    # rewrite_share_attr_prob the target shares a required attribute word
    # (a hard, intent-changing neighbor), otherwise it is a plain
    # cross-category query; a small fraction instead changes an attribute
    # within the category
    rewrites_low_per_query: int = 2
    rewrite_attr_change_prob: float = 0.05
    rewrite_share_attr_prob: float = 0.5
    seed: int = 42

    def validate(self) -> None:
        if self.n_categories < 1:
            raise ConfigError("n_categories must be >= 1")
        if self.products_per_category < self.page_size:
            raise ConfigError("products_per_category must be >= page_size")
        if self.queries_per_category < 2:
            raise ConfigError("queries_per_category must be >= 2")
        if len(self.bias_curve) != self.page_size:
            raise ConfigError("bias_curve length must equal page_size")
        if not all(0 < b <= 1 for b in self.bias_curve):
            raise ConfigError("bias_curve entries must lie in (0, 1]")
        if not 0 <= self.randomized_fraction <= 1:
            raise ConfigError("randomized_fraction must lie in [0, 1]")
        if not 0 <= self.rewrite_share_attr_prob <= 1:
            raise ConfigError("rewrite_share_attr_prob must lie in [0, 1]")
        if self.attractiveness_spread < 0:
            raise ConfigError("attractiveness_spread must be >= 0")
        if self.attractiveness_max <= 0:
            raise ConfigError("attractiveness_max must be > 0")
        rate_cap = max(self.relevance_click_rates.values()) * self.attractiveness_max
        if rate_cap * max(self.bias_curve) > 1.0:
            raise ConfigError(
                "click probabilities can exceed 1: lower attractiveness_max "
                "or the click rates"
            )
        if self.attrs_per_product < 1 or self.attrs_per_product > self.attribute_vocab_size:
            raise ConfigError("attrs_per_product out of range for attribute_vocab_size")


@dataclass(frozen=True)
class Query:
    query_id: str
    tokens: tuple
    category: int
    required_attrs: frozenset


@dataclass(frozen=True)
class Product:
    product_id: str
    title_tokens: tuple
    category: int
    attrs: frozenset
    attractiveness: float


@dataclass(frozen=True)
class RewriteEntry:
    original_query_id: str
    rewritten_query_id: str
    confidence: float


class World:
    """Generated queries, products, rewrite table, and the grade oracle."""

    def __init__(self, queries, products, rewrite_table, config: WorldConfig):
        self.queries: list[Query] = queries
        self.products: list[Product] = products
        self.rewrite_table: list[RewriteEntry] = rewrite_table
        self.config = config
        self._qindex = {q.query_id: i for i, q in enumerate(queries)}
        self._pindex = {p.product_id: i for i, p in enumerate(products)}

    def query(self, query_id: str) -> Query:
        if query_id not in self._qindex:
            raise LookupError_(f"unknown query id {query_id!r}")
        return self.queries[self._qindex[query_id]]

    def product(self, product_id: str) -> Product:
        if product_id not in self._pindex:
            raise LookupError_(f"unknown product id {product_id!r}")
        return self.products[self._pindex[product_id]]

    def grade(self, query_id: str, product_id: str) -> int:
        q = self.query(query_id)
        p = self.product(product_id)
        if q.category != p.category:
            return 0
        return 2 if q.required_attrs <= p.attrs else 1

    def grade_matrix(self) -> np.ndarray:
        """(n_queries, n_products) grade table; used by the vectorized simulator."""
        g = np.zeros((len(self.queries), len(self.products)), dtype=np.int8)
        for qi, q in enumerate(self.queries):
            for pi, p in enumerate(self.products):
                if q.category == p.category:
                    g[qi, pi] = 2 if q.required_attrs <= p.attrs else 1
        return g

    def save(self, path) -> None:
        doc = {
            "config": _config_doc(self.config),
            "queries": [
                {
                    "query_id": q.query_id,
                    "tokens": list(q.tokens),
                    "category": q.category,
                    "required_attrs": sorted(q.required_attrs),
                }
                for q in self.queries
            ],
            "products": [
                {
                    "product_id": p.product_id,
                    "title_tokens": list(p.title_tokens),
                    "category": p.category,
                    "attrs": sorted(p.attrs),
                    "attractiveness": p.attractiveness,
                }
                for p in self.products
            ],
            "rewrite_table": [
                {
                    "original_query_id": r.original_query_id,
                    "rewritten_query_id": r.rewritten_query_id,
                    "confidence": r.confidence,
                }
                for r in self.rewrite_table
            ],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "World":
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
        cfg_doc = doc["config"]
        cfg_doc["bias_curve"] = tuple(cfg_doc["bias_curve"])
        cfg_doc["relevance_click_rates"] = {
            int(k): v for k, v in cfg_doc["relevance_click_rates"].items()
        }
        config = WorldConfig(**cfg_doc)
        queries = [
            Query(d["query_id"], tuple(d["tokens"]), d["category"], frozenset(d["required_attrs"]))
            for d in doc["queries"]
        ]
        products = [
            Product(
                d["product_id"],
                tuple(d["title_tokens"]),
                d["category"],
                frozenset(d["attrs"]),
                d["attractiveness"],
            )
            for d in doc["products"]
        ]
        rewrites = [
            RewriteEntry(d["original_query_id"], d["rewritten_query_id"], d["confidence"])
            for d in doc["rewrite_table"]
        ]
        return cls(queries, products, rewrites, config)


def _config_doc(config: WorldConfig) -> dict:
    doc = asdict(config)
    doc["bias_curve"] = list(config.bias_curve)
    return doc


def generate_world(config: WorldConfig) -> World:
    """Deterministically build a world from the config seed."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    attr_pool = [f"attr{i}" for i in range(config.attribute_vocab_size)]
    filler_pool = [f"w{i}" for i in range(config.filler_vocab_size)]

    products: list[Product] = []
    for c in range(config.n_categories):
        for j in range(config.products_per_category):
            attrs = rng.choice(config.attribute_vocab_size, size=config.attrs_per_product,
                               replace=False)
            attrs = frozenset(attr_pool[a] for a in attrs)
            fillers = [filler_pool[i] for i in
                       rng.choice(config.filler_vocab_size, size=config.fillers_per_title,
                                  replace=False)]
            title = [f"cat{c}"] + sorted(attrs) + fillers
            attractiveness = float(np.clip(
                np.exp(rng.normal(0.0, config.attractiveness_spread)),
                1.0 / config.attractiveness_max, config.attractiveness_max,
            ))
            products.append(
                Product(f"p{len(products)}", tuple(title), c, attrs, attractiveness)
            )

    queries: list[Query] = []
    for c in range(config.n_categories):
        cat_products = [p for p in products if p.category == c]
        for j in range(config.queries_per_category):
            seed_product = cat_products[rng.integers(0, len(cat_products))]
            n_req = int(rng.integers(1, min(2, len(seed_product.attrs)) + 1))
            req = frozenset(
                sorted(seed_product.attrs)[i]
                for i in rng.choice(len(seed_product.attrs), size=n_req, replace=False)
            )
            tokens = [f"cat{c}"] + sorted(req)
            queries.append(Query(f"q{len(queries)}", tuple(tokens), c, req))

    rewrite_table = _build_rewrite_table(queries, config, rng)
    return World(queries, products, rewrite_table, config)


def _build_rewrite_table(queries, config: WorldConfig, rng) -> list[RewriteEntry]:
    table: list[RewriteEntry] = []
    for q in queries:
        same_cat = [o for o in queries if o.category == q.category and o.query_id != q.query_id]
        other_cat = [o for o in queries if o.category != q.category]
        # one high-confidence rewrite: same intent (same category)
        if same_cat:
            target = same_cat[rng.integers(0, len(same_cat))]
            table.append(
                RewriteEntry(q.query_id, target.query_id, float(rng.uniform(0.7, 1.0)))
            )
        for _ in range(config.rewrites_low_per_query):
            attr_change = (
                rng.random() < config.rewrite_attr_change_prob
                and any(o.required_attrs != q.required_attrs for o in same_cat)
            )
            if attr_change:
                pool = [o for o in same_cat if o.required_attrs != q.required_attrs]
            else:
                # mix hard neighbors (keep an attribute word, switch category)
                # with plain cross-category rewrites
                sharing = [o for o in other_cat if o.required_attrs & q.required_attrs]
                if sharing and rng.random() < config.rewrite_share_attr_prob:
                    pool = sharing
                else:
                    pool = other_cat
            if not pool:
                continue
            target = pool[rng.integers(0, len(pool))]
            table.append(
                RewriteEntry(q.query_id, target.query_id, float(rng.uniform(0.05, 0.3)))
            )
    return table


class ImpressionLog:
    """Column-oriented page-1 impression events."""

    FIELDS = ("query_idx", "product_idx", "position", "page", "clicked", "bucket")

    def __init__(self, query_idx, product_idx, position, page, clicked, bucket,
                 query_ids: list[str], product_ids: list[str], n_skipped: int = 0):
        self.query_idx = np.asarray(query_idx, dtype=np.int32)
        self.product_idx = np.asarray(product_idx, dtype=np.int32)
        self.position = np.asarray(position, dtype=np.int16)
        self.page = np.asarray(page, dtype=np.int16)
        self.clicked = np.asarray(clicked, dtype=bool)
        self.bucket = np.asarray(bucket, dtype=np.int8)
        self.query_ids = list(query_ids)
        self.product_ids = list(product_ids)
        self.n_skipped = n_skipped

    def __len__(self) -> int:
        return len(self.query_idx)

    def select(self, mask) -> "ImpressionLog":
        return ImpressionLog(
            self.query_idx[mask], self.product_idx[mask], self.position[mask],
            self.page[mask], self.clicked[mask], self.bucket[mask],
            self.query_ids, self.product_ids, self.n_skipped,
        )

    def save(self, path) -> None:
        """Line-delimited JSON, one impression per line."""
        qids = self.query_ids
        pids = self.product_ids
        with open(path, "w", encoding="utf-8") as f:
            for i in range(len(self)):
                rec = {
                    "query_id": qids[self.query_idx[i]],
                    "product_id": pids[self.product_idx[i]],
                    "position": int(self.position[i]),
                    "page": int(self.page[i]),
                    "clicked": bool(self.clicked[i]),
                    "bucket": BUCKET_NAMES[int(self.bucket[i])],
                }
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path, query_ids: list[str], product_ids: list[str]) -> "ImpressionLog":
        qindex = {qid: i for i, qid in enumerate(query_ids)}
        pindex = {pid: i for i, pid in enumerate(product_ids)}
        bucket_codes = {v: k for k, v in BUCKET_NAMES.items()}
        cols: list[list] = [[] for _ in range(6)]
        with open(path, encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                cols[0].append(qindex[rec["query_id"]])
                cols[1].append(pindex[rec["product_id"]])
                cols[2].append(rec["position"])
                cols[3].append(rec["page"])
                cols[4].append(rec["clicked"])
                cols[5].append(bucket_codes[rec["bucket"]])
        return cls(*cols, query_ids=query_ids, product_ids=product_ids)


def simulate_logs(world: World, n_sessions: int, config: WorldConfig | None = None,
                  seed: int | None = None, chunk: int = 4096) -> ImpressionLog:
    """Simulate page-1 impressions for `n_sessions` query sessions.

    Each session draws a query, ranks all products by a noisy
    relevance-correlated retrieval score, and exposes the top `page_size`.
    Randomized-bucket sessions shuffle the page uniformly. Deterministic
    given seed; sessions whose query has fewer than page_size candidates
    are skipped and counted.
    """
    if n_sessions < 1:
        raise ConfigError("n_sessions must be >= 1")
    config = config or world.config
    rng = np.random.default_rng(world.config.seed + 1 if seed is None else seed)
    P = config.page_size
    n_q, n_p = len(world.queries), len(world.products)
    grades = world.grade_matrix()
    attract = np.array([p.attractiveness for p in world.products])
    rates = np.array([config.relevance_click_rates[g] for g in range(3)])
    bias = np.asarray(config.bias_curve)
    base = (config.retrieval_grade_weight * grades
            + config.retrieval_attract_weight * np.log(attract)[None, :])

    session_q = rng.integers(0, n_q, size=n_sessions)
    counts = np.bincount(session_q, minlength=n_q)
    n_skipped = 0
    out_q, out_p, out_pos, out_clicked, out_bucket = [], [], [], [], []

    for qi in range(n_q):
        remaining = int(counts[qi])
        if n_p < P:
            n_skipped += remaining
            continue
        while remaining > 0:
            s = min(chunk, remaining)
            remaining -= s
            noise = rng.gumbel(0.0, config.retrieval_noise_scale, size=(s, n_p))
            scores = base[qi][None, :] + noise
            top = np.argpartition(-scores, P - 1, axis=1)[:, :P]
            order = np.take_along_axis(scores, top, axis=1).argsort(axis=1)[:, ::-1]
            page = np.take_along_axis(top, order, axis=1)  # (s, P) product idx by rank
            randomized = rng.random(s) < config.randomized_fraction
            if randomized.any():
                perm = rng.random((s, P)).argsort(axis=1)
                shuffled = np.take_along_axis(page, perm, axis=1)
                page = np.where(randomized[:, None], shuffled, page)
            p_click = bias[None, :] * attract[page] * rates[grades[qi][page]]
            clicked = rng.random((s, P)) < np.clip(p_click, 0.0, 1.0)
            out_q.append(np.full(s * P, qi, dtype=np.int32))
            out_p.append(page.ravel())
            out_pos.append(np.tile(np.arange(1, P + 1, dtype=np.int16), s))
            out_clicked.append(clicked.ravel())
            out_bucket.append(np.repeat(randomized.astype(np.int8), P))

    if not out_q:
        raise ConfigError("all sessions were skipped; world has too few products")
    n_events = sum(len(a) for a in out_q)
    return ImpressionLog(
        np.concatenate(out_q), np.concatenate(out_p), np.concatenate(out_pos),
        np.ones(n_events, dtype=np.int16), np.concatenate(out_clicked),
        np.concatenate(out_bucket),
        query_ids=[q.query_id for q in world.queries],
        product_ids=[p.product_id for p in world.products],
        n_skipped=n_skipped,
    )


def ground_truth_label(world: World, query_id: str, product_id: str,
                       grade_threshold: int = 1) -> int:
    """1 if grade >= grade_threshold (Good), else 0 (Bad)."""
    return int(world.grade(query_id, product_id) >= grade_threshold)


def sample_eval_set(world: World, pairs_per_query: int = 40, positive_share: float = 0.8,
                    hard_negative_share: float = 0.5, seed: int = 7,
                    grade_threshold: int = 1) -> list[dict]:
    """Draw a labeled evaluation set skewed toward Good pairs.

    Negatives mix "hard" cases (different category but sharing a required
    attribute word with the query) with uniform random irrelevant products,
    mirroring the skew and difficulty of production annotation sets.
    """
    rng = np.random.default_rng(seed)
    out = []
    n_pos = int(round(pairs_per_query * positive_share))
    n_neg = pairs_per_query - n_pos
    for q in world.queries:
        positives = [p for p in world.products
                     if world.grade(q.query_id, p.product_id) >= grade_threshold]
        negatives = [p for p in world.products
                     if world.grade(q.query_id, p.product_id) < grade_threshold]
        hard = [p for p in negatives if p.attrs & q.required_attrs]
        easy = [p for p in negatives if not (p.attrs & q.required_attrs)]
        chosen_pos = [positives[i] for i in rng.choice(len(positives), size=n_pos)]
        n_hard = int(round(n_neg * hard_negative_share)) if hard else 0
        chosen_neg = [hard[i] for i in rng.choice(len(hard), size=n_hard)] if n_hard else []
        pool = easy if easy else negatives
        chosen_neg += [pool[i] for i in rng.choice(len(pool), size=n_neg - n_hard)]
        for p in chosen_pos + chosen_neg:
            out.append({
                "query_id": q.query_id,
                "product_id": p.product_id,
                "query_tokens": list(q.tokens),
                "title_tokens": list(p.title_tokens),
                "label": ground_truth_label(world, q.query_id, p.product_id, grade_threshold),
            })
    return out


def save_eval_set(pairs: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in pairs:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_eval_set(path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f]
