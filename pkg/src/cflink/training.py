"""Training: stable BCE on factual and counterfactual existence, a
distribution-balancing discrepancy penalty, Adam, a cyclical learning
rate, and decoder-only fine-tuning on a frozen encoder.

Total objective: L = L_F + alpha * L_CF + beta * L_disc. Negatives are
resampled every epoch with seed = base_seed + epoch and are disconnected
in the full graph, never colliding with the held-out negative sets.
Checkpoint selection is by validation Hits@20.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError
from .graph import EdgeSplit, Graph, TrainBatch, sample_negatives
from .matching import CounterfactualTable
from .metrics import hits_at_k
from .nn import (
    ARCHS,
    GraphOperators,
    ModelParams,
    decoder_backward,
    decoder_forward,
    encoder_backward,
    encoder_forward,
    init_params,
    pair_rows,
    pair_rows_backward,
    re_init_decoder,
)
from .treatments import TreatmentAssignment

log = logging.getLogger("cflink")

LR_PERIOD = 70
LR_FLOOR = 1e-4
_WARM = 50


@dataclass
class TrainConfig:
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 0.05
    epochs: int = 210
    ft_epochs: int = 70
    seed: int = 0
    gamma_pct: float = 20.0
    arch: str = "jknet"
    hidden: int = 256
    repr_dim: int = 256
    disc: str = "matched"  # "literal" restores the parameter-free printed form

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.epochs < 1 or self.ft_epochs < 0:
            raise ConfigError("epochs must be >= 1 and ft_epochs >= 0")
        if not 0 <= self.gamma_pct <= 100:
            raise ConfigError("gamma_pct must lie in [0, 100]")
        if min(self.hidden, self.repr_dim) < 1:
            raise ConfigError("widths must be >= 1")
        if self.disc not in ("matched", "literal"):
            raise ConfigError("disc must be 'matched' or 'literal'")


@dataclass
class LossReport:
    """Per-epoch loss trace; total must equal f + alpha*cf + beta*disc."""

    epochs: list = field(default_factory=list)
    loss_f: list = field(default_factory=list)
    loss_cf: list = field(default_factory=list)
    loss_disc: list = field(default_factory=list)
    total: list = field(default_factory=list)

    def add(self, epoch, lf, lcf, ldisc, tot):
        self.epochs.append(int(epoch))
        self.loss_f.append(float(lf))
        self.loss_cf.append(float(lcf))
        self.loss_disc.append(float(ldisc))
        self.total.append(float(tot))

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("epoch,loss_f,loss_cf,loss_disc,total\n")
            for row in zip(self.epochs, self.loss_f, self.loss_cf, self.loss_disc, self.total):
                fh.write("%d,%.17g,%.17g,%.17g,%.17g\n" % row)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray):
    """Mean binary cross-entropy on logits, numerically stable.

    Returns (loss, dloss/dlogits). softplus(x) - y*x per element; the
    gradient is (sigmoid(x) - y) / M.
    """
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if logits.shape != labels.shape:
        raise ShapeError("logits and labels disagree in length")
    m = logits.shape[0]
    if m == 0:
        raise DegenerateInputError("empty batch has no BCE")
    loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits))
    sig = np.empty_like(logits)
    pos = logits >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-logits[pos]))
    ex = np.exp(logits[~pos])
    sig[~pos] = ex / (1.0 + ex)
    return loss, (sig - labels) / m


def disc_loss(p: np.ndarray, q: np.ndarray):
    """||P - Q||_F / sqrt(M) over aligned representation rows.

    Zero rows mean nothing matched: loss 0 with zero gradients.
    """
    if p.shape != q.shape:
        raise ShapeError(f"discrepancy inputs disagree: {p.shape} vs {q.shape}")
    m = p.shape[0]
    if m == 0:
        return 0.0, np.zeros_like(p), np.zeros_like(q)
    d = p - q
    nrm = float(np.sqrt((d * d).sum()))
    loss = nrm / np.sqrt(m)
    if nrm == 0.0:
        return 0.0, np.zeros_like(p), np.zeros_like(q)
    dp = d / (nrm * np.sqrt(m))
    return loss, dp, -dp


class AdamState:
    """Adam with bias correction (0.9, 0.999, 1e-8) over named blocks."""

    def __init__(self, blocks):
        self.names = [name for name, _, _ in blocks]
        self.m = [np.zeros_like(w) for _, w, _ in blocks]
        self.v = [np.zeros_like(w) for _, w, _ in blocks]
        self.t = 0

    def step(self, blocks, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if len(blocks) != len(self.m):
            raise ShapeError("optimizer state does not match parameter blocks")
        self.t += 1
        bc1 = 1.0 - beta1**self.t
        bc2 = 1.0 - beta2**self.t
        for k, (name, w, g) in enumerate(blocks):
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in block {name}")
            self.m[k] = beta1 * self.m[k] + (1.0 - beta1) * g
            self.v[k] = beta2 * self.v[k] + (1.0 - beta2) * (g * g)
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            w -= lr * mhat / (np.sqrt(vhat) + eps)


def cyclical_lr(epoch: int, base_lr: float) -> float:
    """Period-70 triangle: 1e-4 -> base over epochs 0..49, back down to
    1e-4 at epoch 69, then repeat."""
    if base_lr <= LR_FLOOR:
        return base_lr
    e = epoch % LR_PERIOD
    if e < _WARM:
        return LR_FLOOR + (base_lr - LR_FLOOR) * (e / (_WARM - 1.0))
    return base_lr - (base_lr - LR_FLOOR) * ((e - (_WARM - 1.0)) / (LR_PERIOD - _WARM))


def make_factual_batch(
    split: EdgeSplit,
    treatment: TreatmentAssignment,
    epoch_seed: int,
    full_graph: Graph | None = None,
) -> TrainBatch:
    """Train edges plus an equal count of fresh negatives.

    Negatives are disconnected in the full graph and avoid the held-out
    negative sets; the draw is fully determined by epoch_seed.
    """
    full = full_graph or Graph(split.train_graph.num_nodes, split.full_edges())
    excl = np.concatenate([split.valid_neg, split.test_neg])
    negs = sample_negatives(full, split.train_edges.shape[0], exclude=excl, seed=epoch_seed)
    pairs = np.concatenate([split.train_edges, negs])
    labels = np.concatenate(
        [np.ones(split.train_edges.shape[0]), np.zeros(negs.shape[0])]
    )
    tbits = treatment.pair_treatments(pairs).astype(np.float64)
    return TrainBatch(pairs=pairs, labels=labels, treatments=tbits)


@dataclass
class LossParts:
    f: float
    cf: float
    disc: float

    def total(self, alpha, beta) -> float:
        return self.f + alpha * self.cf + beta * self.disc


def compute_losses(
    params: ModelParams,
    ops: GraphOperators,
    x: np.ndarray,
    batch: TrainBatch,
    cf=None,
    alpha: float = 0.0,
    beta: float = 0.0,
    disc_mode: str = "matched",
    want_grads: bool = True,
    z_cache=None,
) -> LossParts:
    """One full forward (and optional backward) pass of the objective.

    cf is (t_cf, a_cf, matched_mask, matched_pairs) aligned with the
    batch, or None to run the factual term only. Gradients accumulate
    into params after a zero_grads.
    """
    if z_cache is None:
        z, ecache = encoder_forward(params, ops, x)
    else:
        z, ecache = z_cache
    rows_f = pair_rows(z, batch.pairs, batch.treatments)
    logits_f, dcache_f = decoder_forward(params, rows_f)
    l_f, dlog_f = bce_with_logits(logits_f, batch.labels)

    l_cf = 0.0
    l_disc = 0.0
    rows_cf = dcache_cf = dlog_cf = None
    dp = dq = None
    matched = mpairs = None
    if cf is not None:
        tcf, acf, matched, mpairs = cf
        rows_cf = pair_rows(z, batch.pairs, tcf)
        logits_cf, dcache_cf = decoder_forward(params, rows_cf)
        l_cf, dlog_cf = bce_with_logits(logits_cf, acf)
        if disc_mode == "matched":
            pm = rows_f[matched]
            qm = pair_rows(z, mpairs[matched], 1.0 - batch.treatments[matched])
            l_disc, dp, dq = disc_loss(pm, qm)
            if pm.shape[0] == 0:
                log.debug("no matched pairs in batch; discrepancy term is 0")
        else:
            l_disc, dp, dq = disc_loss(rows_f, rows_cf)

    if not want_grads:
        return LossParts(l_f, l_cf, l_disc)

    params.zero_grads()
    drows_f = decoder_backward(params, dcache_f, dlog_f)
    dz = None
    if cf is not None:
        drows_cf = decoder_backward(params, dcache_cf, alpha * dlog_cf)
        if disc_mode == "matched":
            if dp.shape[0]:
                drows_f[matched] += beta * dp
                dz = pair_rows_backward(beta * dq, z, mpairs[matched])
        else:
            drows_f += beta * dp
            drows_cf += beta * dq
        dzc = pair_rows_backward(drows_cf, z, batch.pairs)
        dz = dzc if dz is None else dz + dzc
    dzf = pair_rows_backward(drows_f, z, batch.pairs)
    dz = dzf if dz is None else dz + dzf
    encoder_backward(params, ops, ecache, dz)
    return LossParts(l_f, l_cf, l_disc)


def predict_rows(params: ModelParams, z: np.ndarray, pairs, tbits) -> np.ndarray:
    """Probabilities for pairs given a precomputed embedding."""
    logits, _ = decoder_forward(params, pair_rows(z, pairs, np.asarray(tbits, dtype=np.float64)))
    from scipy.special import expit

    return expit(logits)


def predict(params: ModelParams, graph: Graph, pairs, tbits) -> np.ndarray:
    """End-to-end probabilities: encode graph, decode pair rows."""
    if graph.features is None:
        raise ConfigError("prediction needs node features")
    ops = GraphOperators(graph, params.arch)
    z, _ = encoder_forward(params, ops, graph.features)
    return predict_rows(params, z, pairs, tbits)


def _val_hits(params, z, split, treatment, k=20):
    tp = treatment.pair_treatments(split.valid_pos).astype(np.float64)
    tn = treatment.pair_treatments(split.valid_neg).astype(np.float64)
    pos = predict_rows(params, z, split.valid_pos, tp)
    neg = predict_rows(params, z, split.valid_neg, tn)
    return hits_at_k(pos, neg, min(k, neg.shape[0]))


@dataclass
class TrainResult:
    params: ModelParams
    report: LossReport
    best_epoch: int
    best_val_hits: float


def train_model(
    split: EdgeSplit,
    treatment: TreatmentAssignment,
    cf_table: CounterfactualTable | None,
    cfg: TrainConfig,
    use_counterfactual: bool | None = None,
) -> TrainResult:
    """Full-batch training loop with per-epoch negative resampling.

    use_counterfactual defaults to (alpha > 0 or beta > 0); forcing it
    True with alpha = beta = 0 must reproduce the disabled trajectory
    bit for bit.
    """
    graph = split.train_graph
    if graph.features is None:
        raise ConfigError("training needs node features on the graph")
    use_cf = (cfg.alpha > 0 or cfg.beta > 0) if use_counterfactual is None else use_counterfactual
    if use_cf and cf_table is None:
        raise ConfigError("counterfactual terms need a counterfactual table")

    ops = GraphOperators(graph, cfg.arch)
    rng = np.random.default_rng((cfg.seed, 0))
    params = init_params(cfg.arch, graph.feature_dim, cfg.hidden, cfg.repr_dim, rng)
    adam = AdamState(params.param_blocks())
    report = LossReport()
    best = (-1.0, -1, params.copy())
    full_graph = Graph(graph.num_nodes, split.full_edges())

    for epoch in range(cfg.epochs):
        batch = make_factual_batch(split, treatment, cfg.seed + epoch, full_graph)
        cf = None
        if use_cf:
            cf_table.extend(batch.pairs, batch.treatments, batch.labels)
            cf = cf_table.lookup(batch.pairs)
        z, ecache = encoder_forward(params, ops, graph.features)
        val = _val_hits(params, z, split, treatment)
        if val > best[0]:
            best = (val, epoch - 1, params.copy())
        parts = compute_losses(
            params,
            ops,
            graph.features,
            batch,
            cf=cf,
            alpha=cfg.alpha,
            beta=cfg.beta,
            disc_mode=cfg.disc,
            z_cache=(z, ecache),
        )
        adam.step(params.param_blocks(), cyclical_lr(epoch, cfg.lr))
        report.add(epoch, parts.f, parts.cf, parts.disc, parts.total(cfg.alpha, cfg.beta))

    z, _ = encoder_forward(params, ops, graph.features)
    val = _val_hits(params, z, split, treatment)
    if val > best[0]:
        best = (val, cfg.epochs - 1, params.copy())
    return TrainResult(params=best[2], report=report, best_epoch=best[1], best_val_hits=best[0])


def finetune_decoder(
    params: ModelParams,
    split: EdgeSplit,
    treatment: TreatmentAssignment,
    cfg: TrainConfig,
) -> TrainResult:
    """Re-initialize and retrain the decoder on the factual term only.

    The encoder is frozen: Z is computed once and encoder weights come
    back bit-identical. Negative seeds continue the main schedule.
    """
    graph = split.train_graph
    if graph.features is None:
        raise ConfigError("fine-tuning needs node features on the graph")
    work = params.copy()
    re_init_decoder(work, np.random.default_rng((cfg.seed, 1)))
    ops = GraphOperators(graph, cfg.arch)
    z, _ = encoder_forward(work, ops, graph.features)

    dec_blocks = [b for b in work.param_blocks() if b[0].startswith("dec_")]
    adam = AdamState(dec_blocks)
    report = LossReport()
    best = (_val_hits(work, z, split, treatment), -1, work.copy())
    full_graph = Graph(graph.num_nodes, split.full_edges())
    for ep in range(cfg.ft_epochs):
        batch = make_factual_batch(split, treatment, cfg.seed + cfg.epochs + ep, full_graph)
        rows = pair_rows(z, batch.pairs, batch.treatments)
        logits, dcache = decoder_forward(work, rows)
        l_f, dlog = bce_with_logits(logits, batch.labels)
        work.zero_grads()
        decoder_backward(work, dcache, dlog)
        adam.step(
            [b for b in work.param_blocks() if b[0].startswith("dec_")],
            cyclical_lr(ep, cfg.lr),
        )
        report.add(ep, l_f, 0.0, 0.0, l_f)
        val = _val_hits(work, z, split, treatment)
        if val > best[0]:
            best = (val, ep, work.copy())
    return TrainResult(params=best[2], report=report, best_epoch=best[1], best_val_hits=best[0])
