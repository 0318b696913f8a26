"""Dot-product retrieval evaluation and the two-stream vs pairwise-fusion benchmark."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from . import tensor as T
from .data import PairedSample, VideoSample
from .encoders import EncoderConfig, TwoStreamModel, encode_batch, init_model, pad_batch
from .errors import EvaluationError, PreconditionError

DEFAULT_KS = (1, 5, 10)


@dataclass
class RetrievalIndex:
    embeddings: np.ndarray
    ids: list
    modality: str

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.ids):
            raise EvaluationError("row count and id count differ")

    def __len__(self) -> int:
        return len(self.ids)

    def position(self, true_id) -> int:
        try:
            return self.ids.index(true_id)
        except ValueError:
            raise EvaluationError(f"id {true_id!r} not in index") from None


@dataclass
class MetricsReport:
    direction: str
    r_at: dict[int, float]
    median_rank: float
    n_queries: int
    wall_times: dict[str, float] = field(default_factory=dict)
    ranks: list[int] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        d["r_at"] = {str(k): v for k, v in self.r_at.items()}
        del d["ranks"]
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricsReport:
        d = json.loads(text)
        d["r_at"] = {int(k): v for k, v in d["r_at"].items()}
        return cls(**d)


def embed(model: TwoStreamModel, stream: str, seqs: Sequence[Sequence[int]], batch_size: int = 256) -> np.ndarray:
    """Online-encoder global embeddings ``[N, d_out]``; never recorded on a graph."""
    cfg = model.config
    out = np.zeros((len(seqs), cfg.d_out))
    with T.no_grad():
        for lo in range(0, len(seqs), batch_size):
            toks, lens = pad_batch(seqs[lo : lo + batch_size], cfg.max_len)
            glob, _ = encode_batch(model.stream(stream), cfg, toks, lens)
            out[lo : lo + batch_size] = glob.data
    return out


def build_index(model: TwoStreamModel, samples: Sequence, modality: str, ids: Sequence | None = None) -> RetrievalIndex:
    """Precompute candidate embeddings with the online encoder.

    ``samples`` are PairedSample (encoded on the ``modality`` side) or raw token
    sequences. Videos go through :func:`video_index` instead.
    """
    if modality not in ("image", "text"):
        raise ValueError("modality must be 'image' or 'text'")
    seqs = [_tokens(s, modality) for s in samples]
    stream = "vision" if modality == "image" else "text"
    emb = embed(model, stream, seqs) if seqs else np.zeros((0, model.config.d_out))
    return RetrievalIndex(emb, list(range(len(seqs)) if ids is None else ids), modality)


def _tokens(s, modality: str):
    if isinstance(s, PairedSample):
        return s.image_tokens if modality == "image" else s.text_tokens
    return s


def rank_of_match(query: np.ndarray, index: RetrievalIndex, true_id) -> int:
    """1 + number of candidates scoring strictly higher than the true one (optimistic ties)."""
    pos = index.position(true_id)
    scores = index.embeddings @ np.asarray(query, dtype=np.float64).reshape(-1)
    return 1 + int(np.sum(scores > scores[pos]))


def report_from_ranks(direction: str, ranks: np.ndarray, ks: Sequence[int] = DEFAULT_KS) -> MetricsReport:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        raise EvaluationError("no queries")
    r_at = {int(k): float(np.mean(ranks <= k)) for k in ks}
    median = float(np.sort(ranks)[(ranks.size - 1) // 2])
    return MetricsReport(direction, r_at, median, int(ranks.size), ranks=ranks.tolist())


def rank_matrix(scores: np.ndarray, true_cols: Sequence[int]) -> np.ndarray:
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    return 1 + kernels.rank_counts(scores, np.asarray(true_cols, dtype=np.int64))


def evaluate_retrieval(
    queries: np.ndarray,
    true_ids: Sequence,
    index: RetrievalIndex,
    ks: Sequence[int] = DEFAULT_KS,
    direction: str = "I2T",
) -> MetricsReport:
    """R@k (fraction with rank <= k) and lower median rank over all queries."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if len(index) == 0 or len(true_ids) == 0:
        raise EvaluationError("empty query set or index")
    if queries.shape[0] != len(true_ids):
        raise EvaluationError("one true id per query required")
    cols = [index.position(t) for t in true_ids]
    t0 = time.perf_counter()
    scores = queries @ index.embeddings.T
    ranks = rank_matrix(scores, cols)
    report = report_from_ranks(direction, ranks, ks)
    report.wall_times["score_and_rank"] = time.perf_counter() - t0
    return report


def video_embedding(model: TwoStreamModel, video: VideoSample, renormalize: bool = True) -> np.ndarray:
    """Mean of per-frame image embeddings, optionally rescaled to unit length."""
    if not video.frames:
        raise PreconditionError("video has no frames")
    return _pool(embed(model, "vision", video.frames), renormalize)[None, :]


def _pool(frames: np.ndarray, renormalize: bool) -> np.ndarray:
    v = frames.mean(axis=0)
    return v / np.linalg.norm(v) if renormalize else v


def evaluate_model(model: TwoStreamModel, samples: Sequence[PairedSample], ks: Sequence[int] = DEFAULT_KS) -> dict[str, MetricsReport]:
    """I2T and T2I reports on 1:1 pairs (sample i's match is candidate i)."""
    if not samples:
        raise EvaluationError("no samples to evaluate")
    t0 = time.perf_counter()
    img = embed(model, "vision", [s.image_tokens for s in samples])
    txt = embed(model, "text", [s.text_tokens for s in samples])
    t_embed = time.perf_counter() - t0
    ids = list(range(len(samples)))
    i2t = evaluate_retrieval(img, ids, RetrievalIndex(txt, ids, "text"), ks, "I2T")
    t2i = evaluate_retrieval(txt, ids, RetrievalIndex(img, ids, "image"), ks, "T2I")
    for r in (i2t, t2i):
        r.wall_times["embed"] = t_embed
    return {"I2T": i2t, "T2I": t2i}


def evaluate_video(
    model: TwoStreamModel, videos: Sequence[VideoSample], ks: Sequence[int] = DEFAULT_KS, renormalize: bool = True
) -> MetricsReport:
    """Text-to-video retrieval: captions query an index of pooled frame embeddings."""
    if not videos:
        raise EvaluationError("no videos to evaluate")
    if any(not v.frames for v in videos):
        raise PreconditionError("video has no frames")
    # all frames in one pass, then pooled per video
    frames = embed(model, "vision", [f for v in videos for f in v.frames])
    bounds = np.cumsum([0] + [len(v.frames) for v in videos])
    vids = np.stack([_pool(frames[a:b], renormalize) for a, b in zip(bounds[:-1], bounds[1:])])
    caps = embed(model, "text", [v.caption for v in videos])
    ids = list(range(len(videos)))
    return evaluate_retrieval(caps, ids, RetrievalIndex(vids, ids, "video"), ks, "T2V")


# ---------------------------------------------------------------- efficiency benchmark


@dataclass
class BenchRow:
    n: int
    precompute_s: float
    query_s: float
    fusion_s: float

    @property
    def ratio(self) -> float:
        return self.fusion_s / self.query_s


@dataclass
class BenchTable:
    rows: list[BenchRow]
    query_slope: float
    fusion_slope: float
    backend: str = kernels.BACKEND

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "precompute_s", "query_s", "fusion_s", "ratio"])
        for r in self.rows:
            w.writerow([r.n, repr(r.precompute_s), repr(r.query_s), repr(r.fusion_s), repr(r.ratio)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, backend: str = kernels.BACKEND) -> BenchTable:
        rows = [
            BenchRow(int(r["n"]), float(r["precompute_s"]), float(r["query_s"]), float(r["fusion_s"]))
            for r in csv.DictReader(io.StringIO(text))
        ]
        return cls(rows, *fit_slopes(rows), backend=backend)

    def format(self) -> str:
        lines = [f"{'N':>6} {'precompute_s':>13} {'query_s':>10} {'fusion_s':>10} {'ratio':>8}"]
        for r in self.rows:
            lines.append(f"{r.n:>6} {r.precompute_s:>13.4f} {r.query_s:>10.4f} {r.fusion_s:>10.4f} {r.ratio:>8.1f}")
        lines.append(f"slope two-stream query: {self.query_slope:.3f}")
        lines.append(f"slope pairwise fusion:  {self.fusion_slope:.3f}")
        return "\n".join(lines)


def fit_slopes(rows: Sequence[BenchRow]) -> tuple[float, float]:
    logn = np.log([r.n for r in rows])
    q = np.polyfit(logn, np.log([r.query_s for r in rows]), 1)[0]
    f = np.polyfit(logn, np.log([r.fusion_s for r in rows]), 1)[0]
    return float(q), float(f)


@dataclass
class FusionStub:
    """Fixed per-pair dense computation standing in for a cross-attention scorer."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray

    @classmethod
    def create(cls, d: int, hidden: int = 32, seed: int = 0) -> FusionStub:
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0, d**-0.5, (d, hidden)), np.zeros(hidden), rng.normal(0, hidden**-0.5, hidden))

    def score(self, queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
        return kernels.pair_fusion_scores(
            np.ascontiguousarray(queries), np.ascontiguousarray(candidates), self.w1, self.b1, self.w2
        )


def _best_time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark_efficiency(
    sizes: Sequence[int] = (500, 1000, 2000),
    d_out: int = 32,
    fusion_hidden: int = 32,
    model: TwoStreamModel | None = None,
    seq_len: int = 16,
    repeats: int = 3,
    seed: int = 0,
) -> BenchTable:
    """Time two-stream retrieval against an all-pairs fusion scorer.

    Two-stream: candidates are encoded once (precompute); the query phase
    encodes N queries and ranks each against the index by dot product.
    Fusion: the stub scores all N^2 query-candidate pairs.
    """
    if len(sizes) < 2:
        raise ValueError("need at least two sizes to fit a slope")
    if model is None:
        model, _ = init_model(EncoderConfig(d_out=d_out, max_len=seq_len), seed)
    rng = np.random.default_rng(seed)
    vocab = model.config.vocab_text
    stub = FusionStub.create(model.config.d_out, fusion_hidden, seed)
    rows = []
    for n in sizes:
        img = rng.integers(0, model.config.vocab_image, size=(n, seq_len)).tolist()
        txt = rng.integers(0, vocab, size=(n, seq_len)).tolist()
        index_box = {}

        def precompute():
            index_box["emb"] = embed(model, "vision", img)

        def query():
            q = embed(model, "text", txt)
            rank_matrix(q @ index_box["emb"].T, np.arange(n))

        precompute_s = _best_time(precompute, repeats)
        query_s = _best_time(query, repeats)
        q_emb = embed(model, "text", txt)
        fusion_s = _best_time(lambda: rank_matrix(stub.score(q_emb, index_box["emb"]), np.arange(n)), repeats)
        rows.append(BenchRow(n, precompute_s, query_s, fusion_s))
    return BenchTable(rows, *fit_slopes(rows))
