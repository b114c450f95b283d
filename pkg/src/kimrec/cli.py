"""Command line: ``kimrec {generate,train,evaluate,predict,precompute,ttest}``.

Exit codes: 0 ok, 2 invalid config, 3 data error, 4 checkpoint mismatch,
5 stale cache.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import Config, ConfigError, apply_overrides, dump_config, load_config
from .evaluation import MetricsReport, evaluate, score_impressions
from .ingest import DataError, load_mind_dataset, parse_behaviors_file
from .matcher import KIM, NewsCache, precompute_cache
from .numerics import CheckpointError, load_arrays, load_checkpoint, save_arrays
from .synthetic import SyntheticSpec, generate_synthetic_corpus, read_synthetic_spec
from .training import train

log = logging.getLogger("kimrec")

EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_CACHE = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_cfg(args) -> Config:
    try:
        cfg = load_config(args.config)
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"config: cannot read {args.config}: {exc}") from None
    cfg = apply_overrides(cfg, args.set or [])
    if getattr(args, "threads", None) is not None:
        cfg.train.threads = args.threads
    if cfg.train.threads:
        torch.set_num_threads(cfg.train.threads)
    return cfg


def _require(cfg: Config, *names: str) -> None:
    for n in names:
        if not getattr(cfg.data, n):
            raise ConfigError(f"data.{n}", "required path is missing")


def _dataset(cfg: Config):
    _require(cfg, "news")
    return load_mind_dataset(cfg.data, cfg.model, cfg.train.seed)


def _model(cfg: Config, ds, checkpoint=None) -> KIM:
    model = KIM.create(cfg.model, ds.word_vectors, ds.kg, seed=cfg.train.seed)
    if checkpoint:
        try:
            load_checkpoint(checkpoint, model.params)
        except CheckpointError as exc:
            names = ", ".join(exc.names)
            raise CliError(EXIT_CHECKPOINT, f"{exc}{': ' + names if names else ''}") from None
    return model


def _load_cache(path, news) -> NewsCache:
    try:
        manifest, arrays = load_arrays(path)
    except CheckpointError as exc:
        raise CliError(EXIT_CACHE, f"cache: {exc}") from None
    if manifest["meta"].get("news_hash") != news.content_hash():
        raise CliError(EXIT_CACHE, "cache was built for a different news set")
    return NewsCache(arrays["H"].transpose(1, 2).contiguous(), arrays["M"].transpose(1, 2).contiguous(), manifest["meta"]["news_hash"])


def cmd_generate(args) -> int:
    try:
        spec = read_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
        spec.validate()
    except ValueError as exc:
        raise ConfigError("synthetic", str(exc)) from None
    corpus = generate_synthetic_corpus(spec, args.seed)
    paths = corpus.write(args.out)
    cfg = Config()
    for k, v in paths.items():
        setattr(cfg.data, k, str(Path(v).resolve()))
    cfg.model.word_dim, cfg.model.entity_dim = spec.word_dim, spec.entity_dim
    cfg.model.title_len, cfg.model.num_entities = spec.title_len, spec.num_entities
    cfg.model.history_len, cfg.model.num_neighbors = spec.history_len, spec.num_neighbors
    cfg.train.seed = args.seed
    (Path(args.out) / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(Path(args.out) / "config.ini")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    _require(cfg, "news", "train_behaviors")
    ds = _dataset(cfg)
    model = _model(cfg, ds)
    if args.cache:
        # parameters move during training, so a cache can only be checked, not used
        _load_cache(args.cache, ds.news)
        log.warning("cache %s matches the news set but is not used while parameters change", args.cache)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg.train
    report = train(
        model, ds.news, ds.train, ds.val or None,
        negatives=t.negatives, lr=t.lr, batch_size=t.batch_size, epochs=t.epochs,
        patience=t.patience, seed=t.seed,
        log_path=out / "metrics.tsv", checkpoint_path=out / "model.ckpt",
    )
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    print(f"trained {len(report.losses)} epochs; best epoch {report.best_epoch}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    ds = _dataset(cfg)
    impressions = getattr(ds, args.split)
    if not impressions:
        raise ConfigError(f"data.{args.split}_behaviors", "required path is missing")
    # a stale cache is reported before any checkpoint shape complaint
    cache = _load_cache(args.cache, ds.news) if args.cache else None
    model = _model(cfg, ds, args.checkpoint)
    report = evaluate(model, ds.news, impressions, cache=cache)
    sys.stdout.write(report.block())
    return 0


def submission_line(impression_id: str, scores) -> str:
    """``impid [i1,i2,...]``: 1-based candidate indices by descending score, ties in file order."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable") + 1
    return f"{impression_id} [{','.join(str(int(i)) for i in order)}]"


def cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    ds = _dataset(cfg)
    cache = _load_cache(args.cache, ds.news) if args.cache else None
    model = _model(cfg, ds, args.checkpoint)
    index = {r.news_id: r for r in ds.news.records}
    impressions = parse_behaviors_file(args.behaviors, index, cfg.model.history_len, require_labels=False)
    missing = {n for imp in impressions for n in imp.candidate_ids if n not in ds.news.index}
    if missing:
        raise DataError(f"{len(missing)} candidate ids are not in the news file, e.g. {sorted(missing)[0]}")
    scores = score_impressions(model, ds.news, impressions, cache=cache)
    with open(args.output, "w", encoding="utf-8") as fh:
        for imp, s in zip(impressions, scores):
            fh.write(submission_line(imp.impression_id, s) + "\n")
    return 0


def cmd_precompute(args) -> int:
    cfg = _load_cfg(args)
    ds = _dataset(cfg)
    model = _model(cfg, ds, args.checkpoint)
    cache = precompute_cache(model, ds.news)
    save_arrays(
        args.output,
        [("H", cache.H.transpose(1, 2), False), ("M", cache.M.transpose(1, 2), False)],
        {"news_hash": cache.news_hash, "layout": "H [news, d_t, M], M [news, d_k, D]"},
    )
    return 0


def cmd_ttest(args) -> int:
    from scipy.stats import ttest_ind

    def read(paths):
        out = []
        for p in paths:
            try:
                out.append(MetricsReport.parse_block(Path(p).read_text(encoding="utf-8")))
            except (OSError, KeyError, ValueError) as exc:
                raise DataError(f"{p}: not a metrics report ({exc})") from None
        return out

    a, b = read(args.a), read(args.b)
    for metric in ("auc", "mrr", "ndcg5", "ndcg10"):
        xa = [getattr(r, metric) for r in a]
        xb = [getattr(r, metric) for r in b]
        res = ttest_ind(xa, xb)
        print(f"{metric}\t{np.mean(xa):.6f}\t{np.mean(xb):.6f}\tt={res.statistic:.4f}\tp={res.pvalue:.4g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kimrec", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--threads", type=int, help="cap torch worker threads")
        return sp

    g = sub.add_parser("generate", help="write a synthetic MIND-format corpus and config")
    g.add_argument("out")
    g.add_argument("--spec", help="INI file with a [synthetic] section")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = with_config(sub.add_parser("train", help="train and checkpoint the best validation model"))
    t.add_argument("--out", required=True, help="output directory for metrics.tsv and model.ckpt")
    t.add_argument("--cache", help="precomputed H/M archive (validated against the news set)")
    t.set_defaults(func=cmd_train)

    e = with_config(sub.add_parser("evaluate", help="print metrics for a split"))
    e.add_argument("checkpoint")
    e.add_argument("--split", choices=("train", "val", "test"), default="val")
    e.add_argument("--cache", help="precomputed H/M archive")
    e.set_defaults(func=cmd_evaluate)

    pr = with_config(sub.add_parser("predict", help="write ranked candidate lists"))
    pr.add_argument("checkpoint")
    pr.add_argument("behaviors")
    pr.add_argument("output")
    pr.add_argument("--cache")
    pr.set_defaults(func=cmd_predict)

    pc = with_config(sub.add_parser("precompute", help="cache per-news H and M"))
    pc.add_argument("checkpoint")
    pc.add_argument("output")
    pc.set_defaults(func=cmd_precompute)

    tt = sub.add_parser("ttest", help="two-sample t-test over saved report blocks")
    tt.add_argument("--a", nargs="+", required=True)
    tt.add_argument("--b", nargs="+", required=True)
    tt.set_defaults(func=cmd_ttest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        if "empty news" in str(exc):
            print(f"error: data: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


if __name__ == "__main__":
    sys.exit(main())
