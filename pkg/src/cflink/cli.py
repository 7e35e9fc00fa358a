"""Command line front end.

Verbs: run, compare-treatments, match-only, eval-only. Every TrainConfig
field is settable from a `key = value` config file; explicit CLI flags
win over the file, the file wins over defaults.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import CflinkError, ConfigError, ParseError
from .pipeline import (
    RunConfig,
    compare_treatments,
    run_eval_only,
    run_match_only,
    run_pipeline,
)
from .training import TrainConfig
from .treatments import TREATMENT_KEYS

_STR_KEYS = ("dataset", "edges", "features", "treatment", "embed", "arch", "out", "disc", "data_root", "treatments", "checkpoint")
_INT_KEYS = ("epochs", "ft_epochs", "hidden", "repr_dim", "split_seed", "workers")
_FLOAT_KEYS = ("alpha", "beta", "lr", "gamma_pct", "valid_frac", "test_frac")
_ALL_KEYS = _STR_KEYS + _INT_KEYS + _FLOAT_KEYS + ("seeds",)


def parse_config_file(path) -> dict:
    """`key = value` lines; blank lines and # comments are skipped."""
    out = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{path}:{ln}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        try:
            if key in _INT_KEYS:
                out[key] = int(val)
            elif key in _FLOAT_KEYS:
                out[key] = float(val)
            else:
                out[key] = val
        except ValueError:
            raise ParseError(f"{path}:{ln}: bad value for {key}") from None
    return out


def parse_seeds(text) -> tuple:
    """'5' means seeds 0..4; '0,3,7' means exactly those."""
    text = str(text).strip()
    if "," in text:
        return tuple(int(t) for t in text.split(",") if t.strip() != "")
    n = int(text)
    if n <= 0:
        raise ConfigError("seed count must be positive")
    return tuple(range(n))


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--dataset", help="dataset name under --data-root, or a directory")
    p.add_argument("--data-root", dest="data_root", help="where named datasets live (default data)")
    p.add_argument("--edges", help="edge list file (overrides --dataset)")
    p.add_argument("--features", help="feature matrix file")
    p.add_argument("--treatment", choices=TREATMENT_KEYS)
    p.add_argument("--embed", help="eigenmap:<dim> or file:<path>")
    p.add_argument("--gamma-pct", dest="gamma_pct", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ft-epochs", dest="ft_epochs", type=int)
    p.add_argument("--arch", choices=("gcn", "sage", "jknet"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--repr-dim", dest="repr_dim", type=int)
    p.add_argument("--disc", choices=("matched", "literal"))
    p.add_argument("--seeds", help="count ('5' = seeds 0..4) or comma list")
    p.add_argument("--valid-frac", dest="valid_frac", type=float)
    p.add_argument("--test-frac", dest="test_frac", type=float)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cflink", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("run", "match-only"):
        _add_common(sub.add_parser(verb))
    pc = sub.add_parser("compare-treatments")
    _add_common(pc)
    pc.add_argument("--treatments", help="comma list (default: all six)")
    pe = sub.add_parser("eval-only")
    _add_common(pe)
    pe.add_argument("--checkpoint", required=True)
    return ap


def _merged(args: argparse.Namespace) -> dict:
    conf = parse_config_file(args.config) if args.config else {}
    merged = dict(conf)
    for key in _ALL_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _resolve_dataset(merged: dict):
    edges = merged.get("edges")
    features = merged.get("features")
    if edges:
        return edges, features
    name = merged.get("dataset")
    if not name:
        raise ConfigError("need --edges or --dataset")
    base = Path(name)
    if not base.is_dir():
        base = Path(merged.get("data_root", "data")) / name
    if not base.is_dir():
        raise ConfigError(f"dataset directory {base} not found")
    edges = base / "edges.txt"
    if not edges.exists():
        raise ConfigError(f"{edges} not found")
    if features is None:
        for cand in ("features.txt", "features.txt.gz"):
            if (base / cand).exists():
                features = str(base / cand)
                break
    return str(edges), features


def build_run_config(merged: dict) -> RunConfig:
    edges, features = _resolve_dataset(merged)
    tkw = {}
    for key in ("alpha", "beta", "lr", "epochs", "ft_epochs", "gamma_pct", "arch", "hidden", "repr_dim", "disc"):
        if key in merged:
            tkw[key] = merged[key]
    seeds = parse_seeds(merged["seeds"]) if "seeds" in merged else (0,)
    kw = {}
    for key in ("treatment", "embed", "valid_frac", "test_frac", "split_seed", "workers", "out"):
        if key in merged:
            kw[key] = merged[key]
    return RunConfig(edges=edges, features=features, seeds=seeds, train=TrainConfig(**tkw), **kw)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        merged = _merged(args)
        cfg = build_run_config(merged)
        if args.verb == "run":
            run_pipeline(cfg)
        elif args.verb == "match-only":
            run_match_only(cfg)
        elif args.verb == "compare-treatments":
            tnames = None
            if merged.get("treatments"):
                tnames = [t.strip() for t in merged["treatments"].split(",") if t.strip()]
            compare_treatments(cfg, tnames)
        else:
            run_eval_only(cfg, args.checkpoint)
    except (ConfigError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CflinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
