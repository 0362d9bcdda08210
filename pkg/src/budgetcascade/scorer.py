"""Reliability scorer g(query, answer) -> (0, 1).

Hashed character n-gram and word features, logistic regression trained by
mini-batch gradient descent to predict whether an LLM's answer is correct.
"""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from . import _kernels
from .errors import DataError
from .trace import Dataset, TraceRecord, as_records

logger = logging.getLogger(__name__)

DEFAULT_DIMS = 1 << 16
NGRAM_SIZES = (2, 3, 4)
MODEL_FORMAT = "budgetcascade-scorer/1"
_LOGIT_CLIP = 35.0  # keeps sigmoid strictly inside (0, 1) in float64
META_FEATURES = ("answer_len", "answer_tokens", "single_token")


class Scorer(Protocol):
    def score(self, q: str, a_hat: str, llm_id: str | None = None) -> float: ...


def _slot(namespace: str, token: str, dims: int) -> int:
    return zlib.crc32(f"{namespace}\x1f{token}".encode("utf-8")) % dims


def meta_slots(dims: int = DEFAULT_DIMS) -> dict[str, int]:
    return {name: _slot("meta", name, dims) for name in META_FEATURES}


def _text_counts(text: str, namespace: str, dims: int) -> dict[int, float]:
    counts: dict[int, float] = {}
    s = text.casefold()
    for n in NGRAM_SIZES:
        for i in range(len(s) - n + 1):
            k = _slot(namespace, s[i:i + n], dims)
            counts[k] = counts.get(k, 0.0) + 1.0
    for word in s.split():
        k = _slot(namespace + "w", word, dims)
        counts[k] = counts.get(k, 0.0) + 1.0
    return counts


@lru_cache(maxsize=65536)
def _cached_counts(text: str, namespace: str, dims: int) -> tuple[tuple[int, float], ...]:
    return tuple(_text_counts(text, namespace, dims).items())


@dataclass(frozen=True)
class FeatureVector:
    dims: int
    indices: np.ndarray  # int64, sorted, unique
    values: np.ndarray   # float64

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.indices.tolist(), self.values.tolist()))

    def dot(self, other: "FeatureVector") -> float:
        common, ia, ib = np.intersect1d(self.indices, other.indices, assume_unique=True,
                                        return_indices=True)
        return float(np.dot(self.values[ia], other.values[ib]))


def _finish(counts: dict[int, float], dims: int) -> FeatureVector:
    idx = np.fromiter(counts.keys(), dtype=np.int64, count=len(counts))
    val = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    order = np.argsort(idx, kind="stable")
    idx, val = idx[order], val[order]
    norm = math.sqrt(float(np.dot(val, val)))
    if norm > 0:
        val = val / norm
    return FeatureVector(dims, idx, val)


def featurize(q: str, a_hat: str, dims: int = DEFAULT_DIMS) -> FeatureVector:
    """Hashed features of a (query, answer) pair, L2-normalized.

    Query and answer n-grams live in separate namespaces. Three meta-features
    (log answer length, log answer token count, single-token flag) are always
    present, possibly with value zero.
    """
    counts = dict(_cached_counts(q, "q", dims))
    for k, v in _cached_counts(a_hat, "a", dims):
        counts[k] = counts.get(k, 0.0) + v
    tokens = a_hat.split()
    slots = meta_slots(dims)
    for name, value in (("answer_len", math.log1p(len(a_hat))),
                        ("answer_tokens", math.log1p(len(tokens))),
                        ("single_token", 1.0 if len(tokens) == 1 else 0.0)):
        counts[slots[name]] = counts.get(slots[name], 0.0) + value
    return _finish(counts, dims)


def text_features(text: str, dims: int = DEFAULT_DIMS) -> FeatureVector:
    """Query-namespace features of a single text, L2-normalized (used for cache similarity)."""
    return _finish(dict(_cached_counts(text, "q", dims)), dims)


def to_csr(vectors: Sequence[FeatureVector]):
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    for i, v in enumerate(vectors):
        indptr[i + 1] = indptr[i] + len(v.indices)
    if vectors:
        indices = np.concatenate([v.indices for v in vectors]).astype(np.int64)
        data = np.concatenate([v.values for v in vectors]).astype(np.float64)
    else:
        indices = np.zeros(0, dtype=np.int64)
        data = np.zeros(0)
    return indptr, indices, data


def _sigmoid(z: float) -> float:
    z = min(max(z, -_LOGIT_CLIP), _LOGIT_CLIP)
    return 1.0 / (1.0 + math.exp(-z))


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 2.0  # features are unit-norm, so the loss is 1/4-smooth
    l2: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    per_llm: bool = True
    dims: int = DEFAULT_DIMS


@dataclass
class ScorerModel:
    dims: int
    weights: np.ndarray
    bias: float = 0.0
    per_llm: dict[str, tuple[np.ndarray, float]] = field(default_factory=dict)
    training_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.weights.shape != (self.dims,):
            raise DataError(f"weight vector has shape {self.weights.shape}, expected ({self.dims},)")
        for llm_id, (w, _) in self.per_llm.items():
            if w.shape != (self.dims,):
                raise DataError(f"head {llm_id!r} has shape {w.shape}, expected ({self.dims},)")

    @classmethod
    def zeros(cls, dims: int = DEFAULT_DIMS) -> "ScorerModel":
        return cls(dims, np.zeros(dims))

    def head(self, llm_id: str | None) -> tuple[np.ndarray, float]:
        if llm_id is not None and llm_id in self.per_llm:
            return self.per_llm[llm_id]
        return self.weights, self.bias

    def score(self, q: str, a_hat: str, llm_id: str | None = None) -> float:
        return score(self, q, a_hat, llm_id)

    def save(self, path: str | os.PathLike) -> None:
        save_model(self, path)


def score(model: ScorerModel, q: str, a_hat: str, llm_id: str | None = None) -> float:
    w, b = model.head(llm_id)
    x = featurize(q, a_hat, model.dims)
    return _sigmoid(b + float(np.dot(w[x.indices], x.values)))


def _pairs(records: Iterable[TraceRecord]):
    for rec in records:
        for llm_id, resp in rec.responses.items():
            yield rec.query_text, resp.answer_text, llm_id, 1.0 if resp.reward == 1 else 0.0


def _fit_head(indptr, indices, data, y, cfg: TrainConfig, rng: np.random.Generator):
    w = np.zeros(cfg.dims)
    b = 0.0
    losses = [_kernels.logistic_loss(indptr, indices, data, y, w, b, cfg.l2)]
    for _ in range(cfg.epochs):
        order = rng.permutation(len(y)).astype(np.int64)
        b = _kernels.sgd_epoch(indptr, indices, data, y, order, w, b, cfg.learning_rate,
                               cfg.l2, cfg.batch_size)
        losses.append(_kernels.logistic_loss(indptr, indices, data, y, w, b, cfg.l2))
    return w, float(b), losses


def train_scorer(train: Dataset | Sequence[TraceRecord], config: TrainConfig | None = None
                 ) -> ScorerModel:
    """Fit the shared head on every (query, answer) pair, plus one head per LLM if asked."""
    cfg = config or TrainConfig()
    records = as_records(train)
    if not records:
        raise DataError("cannot train a scorer on an empty training set")
    pairs = list(_pairs(records))
    if not pairs:
        raise DataError("training records carry no responses")
    feats = [featurize(q, a, cfg.dims) for q, a, _, _ in pairs]
    y_all = np.array([p[3] for p in pairs])
    llm_of = np.array([p[2] for p in pairs], dtype=object)
    warnings: list[str] = []

    def fit(mask, tag, stream):
        y = y_all[mask]
        if y.min() == y.max():
            msg = f"{tag}: all {len(y)} labels are {int(y[0])}; scorer is degenerate"
            logger.warning(msg)
            warnings.append(msg)
        idx = np.flatnonzero(mask)
        indptr, indices, data = to_csr([feats[i] for i in idx])
        w, b, losses = _fit_head(indptr, indices, data, y, cfg,
                                 np.random.default_rng([cfg.seed, stream]))
        if losses[-1] > losses[0]:
            msg = f"{tag}: final loss {losses[-1]:.6g} exceeds initial {losses[0]:.6g}"
            logger.warning(msg)
            warnings.append(msg)
        return w, b, losses

    w, b, shared_losses = fit(np.ones(len(pairs), dtype=bool), "shared", 0)
    heads = {}
    head_losses = {}
    if cfg.per_llm:
        for stream, llm_id in enumerate(sorted(set(llm_of.tolist())), start=1):
            hw, hb, hl = fit(llm_of == llm_id, llm_id, stream)
            heads[llm_id] = (hw, hb)
            head_losses[llm_id] = hl
    meta = {
        "epochs": cfg.epochs,
        "learning_rate": cfg.learning_rate,
        "l2": cfg.l2,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "per_llm": cfg.per_llm,
        "n_pairs": len(pairs),
        "backend": _kernels.BACKEND,
        "loss_history": shared_losses,
        "head_loss_history": head_losses,
        "warnings": warnings,
    }
    return ScorerModel(cfg.dims, w, b, heads, meta)


def save_model(model: ScorerModel, path: str | os.PathLike) -> None:
    """npz container: dense weights, biases and a JSON header; float64 round-trips exactly."""
    ids = sorted(model.per_llm)
    head_w = np.stack([model.per_llm[i][0] for i in ids]) if ids else np.zeros((0, model.dims))
    head_b = np.array([model.per_llm[i][1] for i in ids], dtype=np.float64)
    header = json.dumps({"format": MODEL_FORMAT, "dims": model.dims, "llm_ids": ids,
                         "training_meta": model.training_meta}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.array(header), weights=model.weights,
                            bias=np.array(model.bias, dtype=np.float64),
                            head_weights=head_w, head_biases=head_b)


def load_model(path: str | os.PathLike) -> ScorerModel:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != MODEL_FORMAT:
            raise DataError(f"{path}: unsupported scorer format {header.get('format')!r}")
        dims = int(header["dims"])
        heads = {llm_id: (z["head_weights"][i].copy(), float(z["head_biases"][i]))
                 for i, llm_id in enumerate(header["llm_ids"])}
        return ScorerModel(dims, z["weights"].copy(), float(z["bias"]), heads,
                           header.get("training_meta", {}))


def gradient_check(model: ScorerModel, sample: Sequence[tuple[str, str, float]],
                   llm_id: str | None = None, n_coords: int = 20, seed: int = 0,
                   step: float = 1e-5, coords: Sequence[int] | None = None,
                   abs_floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference loss gradients.

    ``coords`` are weight indices; -1 denotes the bias. When both gradients are
    below ``abs_floor`` in magnitude the absolute difference is used instead.
    """
    if not sample:
        raise DataError("gradient check needs a non-empty sample")
    l2 = float(model.training_meta.get("l2", 0.0))
    w0, b0 = model.head(llm_id)
    w0 = w0.astype(np.float64, copy=True)
    indptr, indices, data = to_csr([featurize(q, a, model.dims) for q, a, _ in sample])
    y = np.array([float(t[2]) for t in sample])

    z = _kernels.margins(indptr, indices, data, w0, b0, "numpy")
    p = 1.0 / (1.0 + np.exp(-z))
    resid = (p - y) / len(y)
    row = np.repeat(np.arange(len(y)), np.diff(indptr))
    grad_w = np.bincount(indices, weights=resid[row] * data, minlength=model.dims) + l2 * w0
    grad_b = float(resid.sum())

    if coords is None:
        rng = np.random.default_rng(seed)
        active = np.unique(indices)
        pick = rng.choice(active, size=min(n_coords - 1, len(active)), replace=False)
        coords = [-1] + sorted(int(c) for c in pick)

    def loss(w, b):
        return _kernels.logistic_loss(indptr, indices, data, y, w, b, l2, "numpy")

    worst = 0.0
    for c in coords:
        if c == -1:
            analytic = grad_b
            numeric = (loss(w0, b0 + step) - loss(w0, b0 - step)) / (2 * step)
        else:
            analytic = float(grad_w[c])
            saved = w0[c]
            w0[c] = saved + step
            up = loss(w0, b0)
            w0[c] = saved - step
            down = loss(w0, b0)
            w0[c] = saved
            numeric = (up - down) / (2 * step)
        scale = max(abs(analytic), abs(numeric))
        err = abs(analytic - numeric) / scale if scale > abs_floor else abs(analytic - numeric)
        worst = max(worst, err)
    return worst


def weight_norm_bound(l2: float, initial_loss: float = math.log(2.0)) -> float:
    """Upper bound on ||w|| for any iterate whose objective is <= the zero-weight objective."""
    return math.sqrt(2.0 * initial_loss / l2)


def isotonic(values: Sequence[float], weights: Sequence[float] | None = None) -> np.ndarray:
    """Pool-adjacent-violators fit of a non-decreasing sequence."""
    v = [float(x) for x in values]
    wts = [1.0] * len(v) if weights is None else [float(x) for x in weights]
    blocks: list[list[float]] = []  # [mean, weight, count]
    for x, wt in zip(v, wts):
        blocks.append([x, wt, 1])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2, c2 = blocks.pop()
            m1, w1, c1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2])
    out: list[float] = []
    for mean, _, count in blocks:
        out.extend([mean] * count)
    return np.array(out)


def calibration_curve(scores: Sequence[float], labels: Sequence[float], n_buckets: int = 10,
                      smooth: bool = True) -> np.ndarray:
    """Per-bucket empirical accuracy after sorting by score (equal-count buckets)."""
    order = np.argsort(np.asarray(scores), kind="stable")
    lab = np.asarray(labels, dtype=float)[order]
    buckets = [b for b in np.array_split(lab, n_buckets) if len(b)]
    acc = np.array([b.mean() for b in buckets])
    if smooth:
        return isotonic(acc, [len(b) for b in buckets])
    return acc


def score_table(scorer: Scorer, records: Sequence[TraceRecord], llm_ids: Sequence[str]) -> np.ndarray:
    """scores[i, j] = scorer.score(query_i, answer of llm_j, llm_j)."""
    out = np.zeros((len(records), len(llm_ids)))
    for i, rec in enumerate(records):
        for j, llm_id in enumerate(llm_ids):
            out[i, j] = scorer.score(rec.query_text, rec.responses[llm_id].answer_text, llm_id)
    return out


class MemoScorer:
    """Wraps a scorer and remembers every (query, answer, llm) score it has produced.

    Budget sweeps and repeated replays score the same pairs many times; scores
    are pure functions of their inputs, so caching them changes nothing else.
    """

    def __init__(self, inner: Scorer):
        self.inner = inner
        self._memo: dict[tuple[str, str, str | None], float] = {}

    def score(self, q: str, a_hat: str, llm_id: str | None = None) -> float:
        key = (q, a_hat, llm_id)
        s = self._memo.get(key)
        if s is None:
            s = self._memo[key] = self.inner.score(q, a_hat, llm_id)
        return s

    def __len__(self) -> int:
        return len(self._memo)


class ConstantScorer:
    """Scores every answer the same; handy baseline and zero-threshold stand-in."""

    def __init__(self, value: float = 0.5):
        self.value = float(value)

    def score(self, q: str, a_hat: str, llm_id: str | None = None) -> float:
        return self.value


class TableScorer:
    """Scores looked up from a mapping (query, llm_id) -> score; replays recorded scores."""

    def __init__(self, table: Mapping[tuple[str, str], float], default: float | None = None):
        self.table = dict(table)
        self.default = default

    def score(self, q: str, a_hat: str, llm_id: str | None = None) -> float:
        try:
            return self.table[(q, llm_id)]
        except KeyError:
            if self.default is None:
                raise KeyError(f"no recorded score for ({q!r}, {llm_id!r})") from None
            return self.default
