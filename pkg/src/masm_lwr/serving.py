"""Two-path model serving: precomputed per-side vectors plus a light head.

The head's first layer is linear in the interaction concatenation
[q, p, q+p, q-p], so it folds into one linear map per tower side:

    z1 = q Wq + p Wp + b1,  Wq = W1[:d] + W1[2d:3d] + W1[3d:4d],
                            Wp = W1[d:2d] + W1[2d:3d] - W1[3d:4d].

Exported stores hold these already-projected vectors (float32), keyed by
the checkpoint fingerprint. Id-based score requests then cost one add, a
tanh, and two small dot products; free-text requests fall back to the
full forward pass. An HTTP JSON endpoint exposes single and batch
scoring, and `bench` measures the speedup of the precomputed path.
"""

from __future__ import annotations

import json
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from . import model as M
from . import tensorio
from .corpus import Vocabulary, encode, tokenize

STORE_MAGIC = b"MAVS"
DEFAULT_BATCH_LIMIT = 1024


class FingerprintMismatch(RuntimeError):
    """Store and checkpoint belong to different models."""


def head_projections(params: M.MasmParameters) -> tuple[np.ndarray, np.ndarray]:
    """Per-side (d, d) linear maps folding interaction + first head layer."""
    w1 = params["head.w1"]
    d = params.config.d
    wq = w1[0:d] + w1[2 * d:3 * d] + w1[3 * d:4 * d]
    wp = w1[d:2 * d] + w1[2 * d:3 * d] - w1[3 * d:4 * d]
    return wq, wp


def _score_projected(qz: np.ndarray, pz: np.ndarray,
                     params: M.MasmParameters) -> np.ndarray:
    """Head over already-projected (B, h, d) vectors: z1 is just qz + pz + b1.

    Runs in the input dtype (float32 straight from the store) to keep the
    per-pair cost down; the small head parameters are cast to match.
    """
    dt = qz.dtype
    z = qz + pz
    z += params["head.b1"].astype(dt, copy=False)
    np.tanh(z, out=z)
    s_aspects = z @ params["head.w2"].astype(dt, copy=False) + params["head.b2"]
    logits = s_aspects @ params["head.pool_w"].astype(dt, copy=False) \
        + params["head.pool_b"]
    return M._sigmoid(logits)


class VectorStore:
    """Immutable id -> (h, d) float32 projected-vector map for one tower side."""

    def __init__(self, ids: list[str], vectors: np.ndarray, fingerprint: str, side: str):
        if vectors.ndim != 3 or len(ids) != vectors.shape[0]:
            raise ValueError("vectors must be (n_ids, h, d)")
        self.ids = list(ids)
        self.vectors = vectors.astype(np.float32)
        self.fingerprint = fingerprint
        self.side = side
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def get(self, key: str) -> np.ndarray:
        return self.vectors[self._index[key]]

    def save(self, path) -> None:
        meta = {"ids": self.ids, "fingerprint": self.fingerprint, "side": self.side}
        tensorio.write_container(path, STORE_MAGIC, meta, {"vectors": self.vectors})

    @classmethod
    def load(cls, path) -> "VectorStore":
        meta, tensors = tensorio.read_container(path, STORE_MAGIC)
        return cls(meta["ids"], tensors["vectors"], meta["fingerprint"], meta["side"])


def export_vectors(checkpoint_path, items: list[tuple[str, list[str]]], side: str,
                   vocab: Vocabulary) -> VectorStore:
    """Precompute float32 head-projected tower vectors for (id, tokens) items.

    The store records the checkpoint file fingerprint so stale stores are
    rejected at scoring time.
    """
    params, meta = M.MasmParameters.load(checkpoint_path)
    if meta.get("vocab_hash") and meta["vocab_hash"] != vocab.content_hash():
        raise FingerprintMismatch("checkpoint was trained with a different vocabulary")
    fingerprint = tensorio.file_fingerprint(checkpoint_path)
    params32 = params.astype(np.float32)
    tower = "query" if side == "query" else "product"
    max_len = params.config.query_max_len if side == "query" else params.config.title_max_len
    cfg = params.config
    wq, wp = head_projections(params)
    proj = wq if side == "query" else wp
    vectors = np.zeros((len(items), cfg.h, cfg.d), dtype=np.float32)
    if items:
        ids = np.zeros((len(items), max_len), dtype=np.int64)
        valid = np.zeros(len(items), dtype=np.int64)
        for i, (_, tokens) in enumerate(items):
            seq = encode(tokens, vocab, max_len)
            ids[i] = seq.ids
            valid[i] = seq.valid_len
        aspects, _ = M.tower_forward(params32, tower, ids, valid)
        vectors = (aspects.astype(np.float64) @ proj).astype(np.float32)
    return VectorStore([k for k, _ in items], vectors, fingerprint, side)


def score_from_vectors(q_vecs: np.ndarray, p_vecs: np.ndarray,
                       params: M.MasmParameters) -> np.ndarray:
    """Fast path: light head over stored head-projected vectors."""
    q = np.asarray(q_vecs)
    p = np.asarray(p_vecs)
    single = q.ndim == 2
    if single:
        q, p = q[None], p[None]
    scores = _score_projected(q, p, params)
    return float(scores[0]) if single else np.asarray(scores, dtype=np.float64)


class ScoringEngine:
    """Checkpoint + vocab + optional stores behind one scoring interface."""

    def __init__(self, checkpoint_path, vocab: Vocabulary,
                 query_store: VectorStore | None = None,
                 product_store: VectorStore | None = None):
        self.params, self.meta = M.MasmParameters.load(checkpoint_path)
        self.vocab = vocab
        self.fingerprint = tensorio.file_fingerprint(checkpoint_path)
        for store in (query_store, product_store):
            if store is not None and store.fingerprint != self.fingerprint:
                raise FingerprintMismatch(
                    f"{store.side} store fingerprint {store.fingerprint[:12]}... "
                    f"does not match checkpoint {self.fingerprint[:12]}..."
                )
        self.query_store = query_store
        self.product_store = product_store

    def score_text(self, query: str, title: str) -> float:
        cfg = self.params.config
        q = encode(tokenize(query), self.vocab, cfg.query_max_len)
        t = encode(tokenize(title), self.vocab, cfg.title_max_len)
        return M.forward(q, t, self.params)

    def score_ids(self, query_id: str, product_id: str) -> float:
        if self.query_store is None or self.product_store is None:
            raise KeyError("no vector stores loaded")
        if query_id not in self.query_store:
            raise KeyError(query_id)
        if product_id not in self.product_store:
            raise KeyError(product_id)
        return score_from_vectors(self.query_store.get(query_id),
                                  self.product_store.get(product_id), self.params)

    def handle(self, req: dict) -> dict:
        if "query_id" in req or "product_id" in req:
            score = self.score_ids(req["query_id"], req["product_id"])
            return {"score": score, "path": "precomputed"}
        return {"score": self.score_text(req["query"], req["title"]), "path": "full"}


class _Handler(BaseHTTPRequestHandler):
    engine: ScoringEngine = None
    batch_limit: int = DEFAULT_BATCH_LIMIT

    def log_message(self, *args):  # quiet by default
        pass

    def _reply(self, code: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path == "/healthz":
            cfg = self.engine.params.config
            self._reply(200, {"fingerprint": self.engine.fingerprint,
                              "h": cfg.h, "d": cfg.d})
        else:
            self._reply(404, {"error": "not found"})

    def do_POST(self):
        try:
            length = int(self.headers.get("Content-Length", 0))
            req = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            self._reply(400, {"error": "malformed JSON"})
            return
        if self.path == "/score":
            self._score_one(req)
        elif self.path == "/score_batch":
            self._score_many(req)
        else:
            self._reply(404, {"error": "not found"})

    def _score_one(self, req):
        if not isinstance(req, dict):
            self._reply(400, {"error": "expected a JSON object"})
            return
        try:
            self._reply(200, self.engine.handle(req))
        except KeyError as exc:
            self._reply(404, {"error": "unknown id", "id": str(exc.args[0])})

    def _score_many(self, req):
        if not isinstance(req, list):
            self._reply(400, {"error": "expected a JSON array"})
            return
        if len(req) > self.batch_limit:
            self._reply(413, {"error": f"batch exceeds limit {self.batch_limit}"})
            return
        out = []
        try:
            for item in req:
                out.append(self.engine.handle(item))
        except KeyError as exc:
            self._reply(404, {"error": "unknown id", "id": str(exc.args[0])})
            return
        self._reply(200, out)


def make_server(engine: ScoringEngine, host: str = "127.0.0.1", port: int = 8080,
                batch_limit: int = DEFAULT_BATCH_LIMIT) -> ThreadingHTTPServer:
    """Build (but do not start) the HTTP server; call serve_forever() to run."""
    handler = type("Handler", (_Handler,), {"engine": engine, "batch_limit": batch_limit})
    return ThreadingHTTPServer((host, port), handler)


def bench(params: M.MasmParameters, vocab: Vocabulary, pairs: list[tuple[list, list]],
          n_repetitions: int = 5) -> dict:
    """Median wall-clock per-pair cost, full forward vs precomputed path.

    The same pairs go through both paths after a warm-up round; the
    precomputed path reuses tower outputs computed once up front, which is
    exactly what the vector store amortizes.
    """
    cfg = params.config
    from .corpus import encode_batch
    q_ids, q_valid = encode_batch([q for q, _ in pairs], vocab, cfg.query_max_len)
    t_ids, t_valid = encode_batch([t for _, t in pairs], vocab, cfg.title_max_len)
    q_aspects, _ = M.tower_forward(params, "query", q_ids, q_valid)
    p_aspects, _ = M.tower_forward(params, "product", t_ids, t_valid)
    wq, wp = head_projections(params)
    q32 = (q_aspects @ wq).astype(np.float32)
    p32 = (p_aspects @ wp).astype(np.float32)

    def run_full():
        return M.score_batch(params, q_ids, q_valid, t_ids, t_valid)

    def run_fast():
        return _score_projected(q32, p32, params)

    run_full(), run_fast()  # warm-up
    full_times, fast_times = [], []
    for _ in range(n_repetitions):
        t0 = time.perf_counter(); run_full(); full_times.append(time.perf_counter() - t0)
        t0 = time.perf_counter(); run_fast(); fast_times.append(time.perf_counter() - t0)
    full_s = float(np.median(full_times))
    fast_s = float(np.median(fast_times))
    n = len(pairs)
    return {
        "n_pairs": n,
        "full_seconds_per_pair": full_s / n,
        "precomputed_seconds_per_pair": fast_s / n,
        "speedup": full_s / fast_s,
        "repetitions": n_repetitions,
    }
