"""Matryoshka multi-vector training on a toy encoder.

The encoder maps an F-dim feature vector to R unit vectors of size D::

    encode(x) = normalize_rows(reshape(W @ x, (R, D)) + M)

``M`` stands in for the learnable meta tokens. Every ladder group g gets its
own InfoNCE loss over in-batch candidates plus one hard negative, scored
with MaxSim on the first (r_q, r_c) vectors only; the groups are combined
with weights w_g and optimized together by plain SGD.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core import (
    DEFAULT_LADDER,
    ZERO_NORM,
    Budget,
    BudgetLadder,
    MetaEmbeddingSet,
    Side,
    _check_increasing,
    l2_normalize_rows,
)
from .errors import (
    DimensionMismatch,
    Divergence,
    NonFinite,
    NonPositiveTemperature,
    TieNearMax,
    UsageError,
    ZeroRow,
)
from .evaluation import Qrels, SweepPoint, budget_sweep
from .index import build_index
from .lateint import _sum_ascending, group_score

log = logging.getLogger(__name__)

TIE_EPS = 1e-4


# -- parameters and data --------------------------------------------------

@dataclass
class ToyEncoderParams:
    W: np.ndarray       # (R*D, F)
    M: np.ndarray       # (R, D)
    side: Side = Side.QUERY

    def __post_init__(self):
        self.W = np.asarray(self.W)
        self.M = np.asarray(self.M, dtype=self.W.dtype)
        if self.W.ndim != 2 or self.M.ndim != 2 or self.W.shape[0] != self.M.size:
            raise DimensionMismatch(f"W {self.W.shape} incompatible with M {self.M.shape}")
        if not (np.all(np.isfinite(self.W)) and np.all(np.isfinite(self.M))):
            raise NonFinite("encoder parameters must be finite")

    @property
    def R(self) -> int:
        return self.M.shape[0]

    @property
    def D(self) -> int:
        return self.M.shape[1]

    @property
    def F(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, R: int, D: int, F: int,
             side: Side = Side.QUERY, dtype=np.float32) -> "ToyEncoderParams":
        W = rng.uniform(-0.1, 0.1, size=(R * D, F)).astype(dtype)
        M = rng.uniform(-0.1, 0.1, size=(R, D)).astype(dtype)
        return cls(W, M, side)

    def copy(self) -> "ToyEncoderParams":
        return ToyEncoderParams(self.W.copy(), self.M.copy(), self.side)

    def astype(self, dtype) -> "ToyEncoderParams":
        return ToyEncoderParams(self.W.astype(dtype), self.M.astype(dtype), self.side)


@dataclass(frozen=True)
class TrainingBatch:
    queries: np.ndarray         # (B, F)
    positives: np.ndarray       # (B, F)
    hard_negatives: np.ndarray  # (B, F)

    def __post_init__(self):
        shapes = {np.shape(a) for a in (self.queries, self.positives, self.hard_negatives)}
        if len(shapes) != 1:
            raise DimensionMismatch(f"batch parts disagree on shape: {sorted(shapes)}")
        shape = shapes.pop()
        if len(shape) != 2 or shape[0] < 1:
            raise DimensionMismatch(f"batch parts must be B x F with B >= 1, got {shape}")
        for a in (self.queries, self.positives, self.hard_negatives):
            if not np.all(np.isfinite(a)):
                raise NonFinite("batch features must be finite")

    def __len__(self):
        return len(self.queries)

    def take(self, rows) -> "TrainingBatch":
        return TrainingBatch(self.queries[rows], self.positives[rows], self.hard_negatives[rows])


class BatchEmbeddings(NamedTuple):
    """Encoded batch: queries (B, R_q, D), positives and negatives (B, R_c, D)."""

    queries: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    per_group: tuple[float, ...]
    total: float
    tau: float
    weights: tuple[float, ...]


@dataclass
class ParamGradients:
    dW_q: np.ndarray
    dM_q: np.ndarray
    dW_c: np.ndarray
    dM_c: np.ndarray
    loss: LossBreakdown

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (self.dW_q, self.dM_q, self.dW_c, self.dM_c)])


# -- encoder --------------------------------------------------------------

def _preactivations(p: ToyEncoderParams, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=p.W.dtype)
    if X.ndim != 2 or X.shape[1] != p.F:
        raise DimensionMismatch(f"features must be B x {p.F}, got {X.shape}")
    return (X @ p.W.T).reshape(len(X), p.R, p.D) + p.M


def _normalize(V: np.ndarray):
    norms = np.sqrt(np.einsum("brd,brd->br", V, V))[..., None]
    if np.any(norms < ZERO_NORM):
        raise ZeroRow("encoder produced a zero pre-normalization row")
    return V / norms, norms


def encode_batch(p: ToyEncoderParams, X) -> np.ndarray:
    """Encode B feature vectors to (B, R, D) unit rows, in the parameter dtype."""
    return _normalize(_preactivations(p, X))[0]


def encode(p: ToyEncoderParams, x) -> MetaEmbeddingSet:
    x = np.asarray(x, dtype=p.W.dtype)
    if x.shape != (p.F,):
        raise DimensionMismatch(f"expected a feature vector of length {p.F}, got {x.shape}")
    v = (p.W @ x).reshape(p.R, p.D) + p.M
    return MetaEmbeddingSet(l2_normalize_rows(v), p.side)


# -- objective ------------------------------------------------------------

def similarity_matrix(query_sets: Sequence[MetaEmbeddingSet], cand_sets: Sequence[MetaEmbeddingSet],
                      g: Budget, tau: float) -> np.ndarray:
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    S = np.empty((len(query_sets), len(cand_sets)))
    for u, q in enumerate(query_sets):
        for v, c in enumerate(cand_sets):
            S[u, v] = group_score(q, c, g) / tau
    return S


def _softmax_terms(S: np.ndarray, hard_neg: np.ndarray):
    logits = np.concatenate([S, hard_neg[:, None]], axis=1)
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    denom = expd.sum(axis=1)
    return shifted, expd, denom


def infonce_group_loss(S, hard_neg_scores) -> float:
    """InfoNCE over each row's in-batch candidates plus its own hard negative.

    ``S[u, u]`` is the positive; inputs are already divided by the temperature.
    """
    S = np.asarray(S, dtype=np.float64)
    hn = np.asarray(hard_neg_scores, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or hn.shape != (S.shape[0],):
        raise DimensionMismatch(f"need a square S and one hard negative per row, got {S.shape}, {hn.shape}")
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(hn))):
        raise NonFinite("scores must be finite")
    logits = np.concatenate([S, hn[:, None]], axis=1)
    top = logits.argmax(axis=1)
    rows = np.arange(len(S))
    shifted = logits - logits[rows, top][:, None]
    shifted[rows, top] = -np.inf
    # log-sum-exp as max + log1p(rest): keeps precision when the positive dominates
    lse = logits[rows, top] + np.log1p(np.exp(shifted).sum(axis=1))
    per_row = lse - np.diagonal(S)
    return float(per_row.mean())


def _pair_similarities(EQ, EC, b: Budget):
    """(B, B, r_q, r_c) dot products between every query and candidate prefix."""
    q = EQ[:, : b.r_q]
    c = EC[:, : b.r_c]
    B, Bc, d = q.shape[0], c.shape[0], q.shape[2]
    sim = q.reshape(-1, d) @ c.reshape(-1, d).T
    return sim.reshape(B, b.r_q, Bc, b.r_c).transpose(0, 2, 1, 3)


def _negative_similarities(EQ, EN, b: Budget):
    """(B, r_q, r_c) dot products between each query and its own hard negative."""
    return np.matmul(EQ[:, : b.r_q], EN[:, : b.r_c].transpose(0, 2, 1))


def _check_ties(sim: np.ndarray, eps: float):
    if sim.shape[-1] < 2:
        return
    top2 = np.partition(sim, -2, axis=-1)[..., -2:]
    gap = top2[..., 1] - top2[..., 0]
    if np.any(gap < eps):
        raise TieNearMax(f"MaxSim runner-up within {eps:g} of the maximum (min gap {gap.min():.3g})")


def _resolve_weights(ladder: BudgetLadder, weights) -> np.ndarray:
    w = np.ones(len(ladder)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(ladder),):
        raise DimensionMismatch(f"need {len(ladder)} weights, got {w.shape}")
    return w


def _objective(emb: BatchEmbeddings, ladder: BudgetLadder, tau: float, weights,
               want_grad: bool = False, tie_eps: float = 0.0):
    if not tau > 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    EQ, EP, EN = emb
    B = EQ.shape[0]
    w = _resolve_weights(ladder, weights)
    if ladder.last.r_q > EQ.shape[1] or ladder.last.r_c > EP.shape[1]:
        raise DimensionMismatch("ladder exceeds the encoded vector counts")
    losses = []
    if want_grad:
        gQ, gP, gN = np.zeros_like(EQ), np.zeros_like(EP), np.zeros_like(EN)
    for g, b in enumerate(ladder):
        simP = _pair_similarities(EQ, EP, b)
        simN = _negative_similarities(EQ, EN, b)
        if tie_eps > 0:
            _check_ties(simP, tie_eps)
            _check_ties(simN, tie_eps)
        S = _sum_ascending(simP.max(axis=3)).astype(np.float64) / tau
        H = _sum_ascending(simN.max(axis=2)).astype(np.float64) / tau
        losses.append(infonce_group_loss(S, H))
        if not want_grad:
            continue
        _, expd, denom = _softmax_terms(S, H)
        prob = expd / denom[:, None]
        coef = w[g] / (tau * B)
        A = (prob[:, :B] - np.eye(B)) * coef       # dL / d s(q_u, c_v)
        a = prob[:, B] * coef                       # dL / d s(q_u, n_u)
        # argmax takes the first maximum, so ties route to the lowest index j
        hotP = simP.argmax(axis=3)[..., None] == np.arange(b.r_c)
        WP = (A[:, :, None, None] * hotP).astype(EQ.dtype)          # (u, v, i, j)
        hotN = simN.argmax(axis=2)[..., None] == np.arange(b.r_c)
        WN = (a[:, None, None] * hotN).astype(EQ.dtype)             # (u, i, j)
        qs, ps, ns = EQ[:, : b.r_q], EP[:, : b.r_c], EN[:, : b.r_c]
        d = EQ.shape[2]
        gQ[:, : b.r_q] += (WP.transpose(0, 2, 1, 3).reshape(B, b.r_q, -1) @ ps.reshape(-1, d))
        gQ[:, : b.r_q] += np.matmul(WN, ns)
        gP[:, : b.r_c] += (WP.transpose(1, 3, 0, 2).reshape(B, b.r_c, -1) @ qs.reshape(-1, d))
        gN[:, : b.r_c] += np.matmul(WN.transpose(0, 2, 1), qs)
    total = float(np.dot(w, losses))
    lb = LossBreakdown(tuple(losses), total, float(tau), tuple(float(x) for x in w))
    if not want_grad:
        return lb
    return lb, (gQ, gP, gN)


def mmr_loss(batch_embeddings: BatchEmbeddings, ladder: BudgetLadder = DEFAULT_LADDER,
             tau: float = 0.03, weights=None) -> LossBreakdown:
    """Weighted sum of per-group InfoNCE losses on an encoded batch."""
    emb = BatchEmbeddings(*(np.asarray(a) for a in batch_embeddings))
    return _objective(emb, ladder, tau, weights)


def _encode_triples(pq: ToyEncoderParams, pc: ToyEncoderParams, batch: TrainingBatch):
    Vq = _preactivations(pq, batch.queries)
    Vp = _preactivations(pc, batch.positives)
    Vn = _preactivations(pc, batch.hard_negatives)
    return [_normalize(V) for V in (Vq, Vp, Vn)]


def batch_loss(params_q: ToyEncoderParams, params_c: ToyEncoderParams, batch: TrainingBatch,
               ladder: BudgetLadder = DEFAULT_LADDER, tau: float = 0.03, weights=None) -> LossBreakdown:
    (EQ, _), (EP, _), (EN, _) = _encode_triples(params_q, params_c, batch)
    return _objective(BatchEmbeddings(EQ, EP, EN), ladder, tau, weights)


def loss_gradient(params_q: ToyEncoderParams, params_c: ToyEncoderParams, batch: TrainingBatch,
                  ladder: BudgetLadder = DEFAULT_LADDER, tau: float = 0.03, weights=None,
                  tie_eps: float = TIE_EPS) -> ParamGradients:
    """Analytic gradient of the total loss w.r.t. W and M on both sides.

    The max over candidate vectors is differentiated through its argmax.
    With ``tie_eps > 0`` a runner-up within ``tie_eps`` of any maximum raises
    TieNearMax; pass 0 to accept the lowest-index subgradient silently.
    """
    enc = _encode_triples(params_q, params_c, batch)
    (EQ, nq), (EP, np_), (EN, nn) = enc
    lb, (gQ, gP, gN) = _objective(BatchEmbeddings(EQ, EP, EN), ladder, tau, weights,
                                  want_grad=True, tie_eps=tie_eps)

    def through_norm(E, norms, gE):
        return (gE - E * np.sum(E * gE, axis=-1, keepdims=True)) / norms

    dVq = through_norm(EQ, nq, gQ)
    dVp = through_norm(EP, np_, gP)
    dVn = through_norm(EN, nn, gN)
    B = len(batch)
    Xq = np.asarray(batch.queries, dtype=params_q.W.dtype)
    Xp = np.asarray(batch.positives, dtype=params_c.W.dtype)
    Xn = np.asarray(batch.hard_negatives, dtype=params_c.W.dtype)
    dW_q = dVq.reshape(B, -1).T @ Xq
    dW_c = dVp.reshape(B, -1).T @ Xp + dVn.reshape(B, -1).T @ Xn
    return ParamGradients(dW_q, dVq.sum(axis=0), dW_c, dVp.sum(axis=0) + dVn.sum(axis=0), lb)


# -- synthetic data -------------------------------------------------------

@dataclass
class SyntheticDataset:
    centroids: np.ndarray           # (C, F)
    train: TrainingBatch
    train_labels: np.ndarray
    eval_queries: np.ndarray        # (n_eval, F)
    eval_corpus: np.ndarray         # (n_eval, F), doc id = row position
    eval_labels: np.ndarray
    qrels: Qrels


def _balanced_labels(rng, n, C):
    return rng.permutation(np.arange(n) % C)


def make_synthetic_dataset(seed, n_classes: int = 16, features: int = 32, n_train: int = 1024,
                           n_eval: int = 256, noise_sigma: float = 0.1) -> SyntheticDataset:
    """Clustered features: C unit centroids, Gaussian noise around them.

    Queries and positives share a class. Hard negatives come from the class
    whose centroid is closest to the query's own. Eval documents are judged
    relevant to every eval query of the same class. ``seed`` may be an int
    or a numpy Generator (which is then advanced).
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cent = rng.standard_normal((n_classes, features))
    cent /= np.linalg.norm(cent, axis=1, keepdims=True)
    cos = cent @ cent.T
    np.fill_diagonal(cos, -np.inf)
    nearest = cos.argmax(axis=1)

    def noisy(labels):
        return cent[labels] + noise_sigma * rng.standard_normal((len(labels), features))

    y = _balanced_labels(rng, n_train, n_classes)
    train = TrainingBatch(noisy(y), noisy(y), noisy(nearest[y]))
    ye = _balanced_labels(rng, n_eval, n_classes)
    eq, ec = noisy(ye), noisy(ye)
    qrels = Qrels({
        u: {v: 1 for v in np.flatnonzero(ye == ye[u]).tolist()} for u in range(n_eval)
    })
    return SyntheticDataset(cent, train, y, eq, ec, ye, qrels)


# -- training loop --------------------------------------------------------

_CONFIG_KEYS = {
    "n_classes": int, "features": int, "dim": int, "ladder": BudgetLadder.parse,
    "tau": float, "weights": None, "lr": float, "steps": int, "batch_size": int,
    "seed": int, "noise_sigma": float, "n_train": int, "n_eval": int,
}


@dataclass
class ToyConfig:
    n_classes: int = 16
    features: int = 32
    dim: int = 16
    ladder: BudgetLadder = DEFAULT_LADDER
    tau: float = 0.03
    weights: tuple[float, ...] | None = None
    lr: float = 0.05
    steps: int = 500
    batch_size: int = 32
    seed: int = 7
    noise_sigma: float = 0.1
    n_train: int = 1024
    n_eval: int = 256

    @property
    def r_q(self) -> int:
        return self.ladder.last.r_q

    @property
    def r_c(self) -> int:
        return self.ladder.last.r_c

    def resolved_weights(self) -> tuple[float, ...]:
        return tuple(_resolve_weights(self.ladder, self.weights).tolist())

    @classmethod
    def parse(cls, text: str) -> "ToyConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                key, sep, val = line.partition(":")
            key, val = key.strip(), val.strip()
            if not sep or key not in _CONFIG_KEYS:
                raise UsageError(f"config line {lineno}: unrecognised entry {raw!r}")
            try:
                if key == "weights":
                    values[key] = tuple(float(t) for t in val.split(","))
                else:
                    values[key] = _CONFIG_KEYS[key](val)
            except ValueError as exc:
                raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "ToyConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.parse(fh.read())

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)}" for k in _CONFIG_KEYS if k not in ("weights", "ladder")]
        lines.insert(3, f"ladder = {self.ladder}")
        lines.insert(5, "weights = " + ",".join(repr(w) for w in self.resolved_weights()))
        return "\n".join(lines) + "\n"


@dataclass
class ToyRun:
    config: ToyConfig
    params_q: ToyEncoderParams
    params_c: ToyEncoderParams
    initial_params: tuple[ToyEncoderParams, ToyEncoderParams]
    loss_history: list[LossBreakdown]
    metrics: list[SweepPoint] = field(default_factory=list)
    dataset: SyntheticDataset | None = None

    @property
    def initial_loss(self) -> float:
        return self.loss_history[0].total

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1].total

    def metric(self, name: str, budget: Budget) -> float:
        for p in self.metrics:
            if p.metric_name == name and p.budget == budget:
                return p.value
        raise KeyError((name, budget))


def loss_history_csv(history: Sequence[LossBreakdown]) -> str:
    """``step,total,g0,...`` with shortest round-trip float formatting."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    G = len(history[0].per_group) if history else 0
    wr.writerow(["step", "total"] + [f"g{g}" for g in range(G)])
    for step, lb in enumerate(history):
        wr.writerow([step, repr(lb.total)] + [repr(x) for x in lb.per_group])
    return buf.getvalue()


def encode_sets(p: ToyEncoderParams, X) -> list[MetaEmbeddingSet]:
    E = encode_batch(p.astype(np.float32), X)
    return [MetaEmbeddingSet(l2_normalize_rows(e), p.side) for e in E]


def evaluate_toy(params_q: ToyEncoderParams, params_c: ToyEncoderParams, data: SyntheticDataset,
                 ladder: BudgetLadder, metrics=("precision@1", "ndcg@5")) -> list[SweepPoint]:
    queries = encode_sets(params_q, data.eval_queries)
    docs = encode_sets(params_c, data.eval_corpus)
    idx = build_index(enumerate(docs), ladder.last.r_c, "bf16")
    points = []
    for m in metrics:
        points.extend(budget_sweep(idx, queries, data.qrels, ladder, m))
    return points


def train_toy(config: ToyConfig = ToyConfig(), evaluate: bool = True) -> ToyRun:
    """SGD on the grouped objective; deterministic for a given ``config.seed``.

    The recorded loss history is measured on a fixed monitoring batch (the
    first ``batch_size`` training triples) before every update and once after
    the last, so it has ``steps + 1`` entries.
    """
    _check_increasing(config.ladder.groups)
    weights = config.resolved_weights()
    rng = np.random.default_rng(config.seed)
    data = make_synthetic_dataset(rng, config.n_classes, config.features, config.n_train,
                                  config.n_eval, config.noise_sigma)
    pq = ToyEncoderParams.init(rng, config.r_q, config.dim, config.features, Side.QUERY)
    pc = ToyEncoderParams.init(rng, config.r_c, config.dim, config.features, Side.CANDIDATE)
    initial = (pq.copy(), pc.copy())
    monitor = data.train.take(slice(0, config.batch_size))
    history = []

    def record():
        lb = batch_loss(pq, pc, monitor, config.ladder, config.tau, weights)
        if not np.isfinite(lb.total):
            raise Divergence(f"total loss became {lb.total} at step {len(history)}")
        history.append(lb)

    for step in range(config.steps):
        record()
        rows = rng.choice(config.n_train, size=config.batch_size, replace=False)
        grads = loss_gradient(pq, pc, data.train.take(rows), config.ladder, config.tau,
                              weights, tie_eps=0.0)
        if not np.all(np.isfinite(grads.flat())):
            raise Divergence(f"non-finite gradient at step {step}")
        pq.W -= config.lr * grads.dW_q
        pq.M -= config.lr * grads.dM_q
        pc.W -= config.lr * grads.dW_c
        pc.M -= config.lr * grads.dM_c
        if step % 100 == 0:
            log.debug("step %d total %.5f", step, history[-1].total)
    record()

    run = ToyRun(config, pq, pc, initial, history, dataset=data)
    if evaluate:
        run.metrics = evaluate_toy(pq, pc, data, config.ladder)
    return run
