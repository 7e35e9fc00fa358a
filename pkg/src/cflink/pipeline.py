"""End-to-end runs: load -> split -> treatment -> embed -> gamma ->
match -> train -> finetune -> predict -> metrics.

One split per run configuration; treatments, embeddings, and the
matched table are shared across run seeds. Per-seed randomness is
confined to weight init and negative resampling. Reports are
byte-identical across reruns of the same configuration and independent
of the worker count.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._accel import set_threads
from .embed import laplacian_eigenmap, load_embeddings, save_embeddings
from .errors import ConfigError
from .graph import Graph, load_edge_list, load_features, save_split, split_edges
from .matching import MatchConfig, build_counterfactual_table, gamma_from_percentile
from .metrics import (
    MetricsReport,
    aggregate_reports,
    ate_estimated,
    ate_observed,
    evaluate_split,
    kendall_tau,
)
from .nn import save_params
from .training import (
    TrainConfig,
    finetune_decoder,
    make_factual_batch,
    predict,
    train_model,
)
from .treatments import TREATMENT_KEYS, make_treatment, save_labels

log = logging.getLogger("cflink")

STAGES = (
    "load",
    "split",
    "treatment",
    "embed",
    "gamma",
    "match",
    "train",
    "finetune",
    "predict",
    "metrics",
)


@dataclass
class RunConfig:
    edges: str
    features: str | None = None
    treatment: str = "kcore"
    embed: str = "eigenmap:64"
    valid_frac: float = 0.1
    test_frac: float = 0.2
    split_seed: int = 42
    seeds: tuple = (0,)
    out: str = "runs/out"
    workers: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.treatment not in TREATMENT_KEYS:
            raise ConfigError(
                f"unknown treatment {self.treatment!r}; choose from {TREATMENT_KEYS}"
            )
        if not (
            self.embed.startswith("eigenmap:") or self.embed.startswith("file:")
        ):
            raise ConfigError("embed must be 'eigenmap:<dim>' or 'file:<path>'")


@contextmanager
def _stage(name: str):
    t0 = time.perf_counter()
    yield
    log.info("stage=%s elapsed=%.3fs", name, time.perf_counter() - t0)


def _attach_file_log(path: Path):
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def _embedding_for(cfg: RunConfig, train_graph: Graph, full_graph: Graph):
    kind, _, arg = cfg.embed.partition(":")
    if kind == "eigenmap":
        dim = int(arg) if arg else 64
        return laplacian_eigenmap(train_graph, dim)
    return load_embeddings(arg, full_graph)


def _prepare(cfg: RunConfig, out: Path):
    """Shared front half of every verb: through the matched table."""
    with _stage("load"):
        graph = load_edge_list(cfg.edges)
        if cfg.features:
            graph = load_features(cfg.features, graph)
        log.info("loaded graph: %d nodes, %d edges", graph.num_nodes, graph.num_edges)
    with _stage("split"):
        split = split_edges(graph, cfg.valid_frac, cfg.test_frac, cfg.split_seed)
        save_split(split, out / "split.bin")
        log.info(
            "split: train=%d valid=%d test=%d",
            split.train_edges.shape[0],
            split.valid_pos.shape[0],
            split.test_pos.shape[0],
        )
    with _stage("treatment"):
        treatment = make_treatment(cfg.treatment, split.train_graph, seed=cfg.split_seed)
        if treatment.kind == "cluster":
            save_labels(treatment, out / "treatment_labels.txt")
        else:
            (out / "treatment_threshold.txt").write_text(f"{treatment.threshold:.17g}\n")
    with _stage("embed"):
        emb = _embedding_for(cfg, split.train_graph, graph)
        save_embeddings(emb, out / "embeddings.txt.gz")
    with _stage("gamma"):
        gamma = gamma_from_percentile(emb, cfg.train.gamma_pct, seed=cfg.split_seed)
        mcfg = MatchConfig(gamma=gamma, gamma_pct=cfg.train.gamma_pct, seed=cfg.split_seed)
        log.info("gamma=%.6g (pct %.1f)", gamma, cfg.train.gamma_pct)
    with _stage("match"):
        tbits = treatment.pair_treatments(split.train_edges).astype(np.float64)
        table = build_counterfactual_table(
            split.train_edges,
            tbits,
            np.ones(split.train_edges.shape[0]),
            emb,
            treatment,
            mcfg,
            split.train_graph,
        )
        log.info("matched fraction on train edges: %.4f", table.matched_fraction())
    return graph, split, treatment, emb, mcfg, table


def _ate_for_seed(split, treatment, table, params, seed):
    """Treatment effects over the canonical epoch-0 factual batch."""
    batch = make_factual_batch(split, treatment, seed)
    table.extend(batch.pairs, batch.treatments, batch.labels)
    tcf, acf, _, _ = table.lookup(batch.pairs)
    obs = ate_observed(batch.treatments, batch.labels, acf)
    probs_f = predict(params, split.train_graph, batch.pairs, batch.treatments)
    probs_cf = predict(params, split.train_graph, batch.pairs, tcf)
    est = ate_estimated(batch.treatments, probs_f, probs_cf)
    return obs, est


def run_pipeline(cfg: RunConfig) -> dict:
    """Train and evaluate over every seed; returns the aggregate dict."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_file_log(out / "run.log")
    try:
        if cfg.workers > 0:
            set_threads(cfg.workers)
        graph, split, treatment, emb, mcfg, table = _prepare(cfg, out)
        reports = []
        for seed in cfg.seeds:
            tcfg = replace(cfg.train, seed=int(seed))
            sdir = out / f"seed_{seed}"
            sdir.mkdir(exist_ok=True)
            with _stage("train"):
                result = train_model(split, treatment, table, tcfg)
                result.report.to_csv(sdir / "loss_trace.csv")
                log.info(
                    "seed %d: best val hits@20 %.4f at epoch %d",
                    seed,
                    result.best_val_hits,
                    result.best_epoch,
                )
            with _stage("finetune"):
                if tcfg.ft_epochs > 0:
                    ft = finetune_decoder(result.params, split, treatment, tcfg)
                    ft.report.to_csv(sdir / "finetune_trace.csv")
                    final = ft.params
                else:
                    final = result.params
                save_params(final, sdir / "model.ckpt")
            with _stage("predict"):
                hits, auc_v, ap_v = evaluate_split(
                    final,
                    split.train_graph,
                    split.test_pos,
                    split.test_neg,
                    treatment,
                )
            with _stage("metrics"):
                obs, est = _ate_for_seed(split, treatment, table, final, int(seed))
                rep = MetricsReport(
                    seed=int(seed),
                    hits=hits,
                    auc=auc_v,
                    ap=ap_v,
                    ate_obs=obs,
                    ate_est=est,
                )
                (sdir / "report.json").write_text(rep.to_json())
                reports.append(rep)
                log.info(
                    "seed %d: test hits@20=%.4f auc=%.4f ap=%.4f",
                    seed,
                    hits.get(20, float("nan")),
                    auc_v,
                    ap_v,
                )
        table.to_csv(out / "cf_table.csv")
        agg = aggregate_reports(reports)
        (out / "aggregate.json").write_text(
            json.dumps(agg, indent=2, sort_keys=True) + "\n"
        )
        return agg
    finally:
        log.removeHandler(handler)
        handler.close()


def run_match_only(cfg: RunConfig) -> dict:
    """Stop after matching: persists the table and observed effects."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_file_log(out / "run.log")
    try:
        _, split, treatment, emb, mcfg, table = _prepare(cfg, out)
        batch = make_factual_batch(split, treatment, int(cfg.seeds[0]))
        table.extend(batch.pairs, batch.treatments, batch.labels)
        tcf, acf, matched, _ = table.lookup(batch.pairs)
        table.to_csv(out / "cf_table.csv")
        summary = {
            "gamma": mcfg.gamma,
            "gamma_pct": mcfg.gamma_pct,
            "matched_fraction": float(np.mean(matched)),
            "ate_obs": ate_observed(batch.treatments, batch.labels, acf),
            "num_rows": table.num_rows,
        }
        (out / "match_summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
        return summary
    finally:
        log.removeHandler(handler)
        handler.close()


def run_eval_only(cfg: RunConfig, checkpoint: str) -> dict:
    """Score a saved checkpoint on the recomputed test split."""
    from .nn import load_params

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_file_log(out / "run.log")
    try:
        with _stage("load"):
            graph = load_edge_list(cfg.edges)
            if cfg.features:
                graph = load_features(cfg.features, graph)
        with _stage("split"):
            split = split_edges(graph, cfg.valid_frac, cfg.test_frac, cfg.split_seed)
        with _stage("treatment"):
            treatment = make_treatment(cfg.treatment, split.train_graph, seed=cfg.split_seed)
        params = load_params(checkpoint)
        with _stage("predict"):
            hits, auc_v, ap_v = evaluate_split(
                params, split.train_graph, split.test_pos, split.test_neg, treatment
            )
        with _stage("metrics"):
            rep = MetricsReport(
                seed=int(cfg.seeds[0]), hits=hits, auc=auc_v, ap=ap_v
            )
            (out / "report.json").write_text(rep.to_json())
        return rep.to_dict()
    finally:
        log.removeHandler(handler)
        handler.close()


def compare_treatments(cfg: RunConfig, treatments=None) -> dict:
    """Run the pipeline per treatment, rank by test Hits@20, and report
    the tau between observed and estimated effect orderings."""
    treatments = list(treatments) if treatments else list(TREATMENT_KEYS)
    for t in treatments:
        if t not in TREATMENT_KEYS:
            raise ConfigError(f"unknown treatment {t!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for tname in treatments:
        sub = replace(cfg, treatment=tname, out=str(out / tname))
        agg = run_pipeline(sub)
        rows.append(
            {
                "treatment": tname,
                "hits20_mean": agg["hits_at_k"].get("20", {}).get("mean")
                if agg["hits_at_k"].get("20")
                else None,
                "auc_mean": agg["auc"]["mean"],
                "ate_obs_mean": agg["ate_obs"]["mean"],
                "ate_est_mean": agg["ate_est"]["mean"],
            }
        )
    rows.sort(key=lambda r: -(r["hits20_mean"] if r["hits20_mean"] is not None else -1))
    tau = None
    if len(rows) >= 2:
        tau = kendall_tau(
            [r["ate_obs_mean"] for r in rows], [r["ate_est_mean"] for r in rows]
        )
    ranking = {"rows": rows, "kendall_tau_ate": tau}
    (out / "ranking.json").write_text(json.dumps(ranking, indent=2, sort_keys=True) + "\n")
    with open(out / "ranking.csv", "w") as fh:
        fh.write("treatment,hits20_mean,auc_mean,ate_obs_mean,ate_est_mean\n")
        for r in rows:
            fh.write(
                "%s,%r,%r,%r,%r\n"
                % (
                    r["treatment"],
                    r["hits20_mean"],
                    r["auc_mean"],
                    r["ate_obs_mean"],
                    r["ate_est_mean"],
                )
            )
    return ranking
