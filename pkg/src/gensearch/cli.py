"""Command-line entry point: gen-data, pretrain, spo, eval, serve, export-plots."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, format_config, load_config
from .decoding import Retriever
from .metrics import build_splits, evaluate, metric_rows, write_metrics_csv, write_plot_data
from .models import init_params, load_checkpoint, model_config_from_meta, model_config_to_meta, save_checkpoint
from .pretrain import Pretrainer, TrainingDivergedError, item_paths
from .service import SearchServer, SearchService, parse_listen
from .sim import Corpus, SearchSimulator, generate_corpus, read_corpus, write_corpus
from .spo import SpoTrainer
from .trie import SidTrie

log = logging.getLogger("gensearch")

COMMANDS = ("gen-data", "pretrain", "spo", "eval", "serve", "export-plots")


class CommandError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gensearch", description="Generative search on a simulated search log.")
    parser.add_argument("--print-config", action="store_true", help="print every setting with its value and exit")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--workdir", help="override paths.workdir")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic corpus")
    p = sub.add_parser("pretrain", parents=[common], help="unified pre-training; resumes from --checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--checkpoint", help="checkpoint to resume from and overwrite")
    p = sub.add_parser("spo", parents=[common], help="preference optimization rounds")
    p.add_argument("--steps", type=int, help="number of rounds")
    p.add_argument("--checkpoint", help="pre-trained checkpoint (also the reference policy)")
    p = sub.add_parser("eval", parents=[common], help="Recall@K / MRR / valid rate on held-out RK and CK")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="metrics CSV (default paths.eval_metrics)")
    p = sub.add_parser("serve", parents=[common], help="serve search requests")
    p.add_argument("--checkpoint")
    p.add_argument("--listen", default="127.0.0.1:7000", help="host:port")
    p = sub.add_parser("export-plots", parents=[common], help="metric CSVs to plot-data")
    p.add_argument("inputs", nargs="*", help="metrics CSVs, optionally label=path")
    p.add_argument("--out", help="plot-data file (default paths.plot_data)")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if args.workdir:
        cfg.paths.workdir = args.workdir
    if getattr(args, "steps", None) is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be >= 0")
        if args.command == "pretrain":
            cfg.pretrain.steps = args.steps
        else:
            cfg.spo.rounds = args.steps
    return cfg


def echo_config(cfg: RunConfig, command: str) -> None:
    print(f"# gensearch {command} seed={cfg.seed}")
    sys.stdout.write(format_config(cfg))
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# helpers


def _load_corpus(cfg: RunConfig) -> Corpus:
    path = cfg.paths.resolve("corpus")
    if not path.exists():
        raise CommandError(f"{path}: corpus not found; run gen-data first")
    return read_corpus(path)


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else cfg.paths.resolve("checkpoint")


def _load_model(path: Path):
    if not path.exists():
        raise CommandError(f"{path}: checkpoint not found")
    try:
        return load_checkpoint(path)
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def build_trie(params, corpus: Corpus, k: int) -> SidTrie:
    """Quantize every item and load (path, item) pairs into a fresh trie."""
    paths = item_paths(params, corpus)
    return SidTrie.from_pairs(k, ((p, i) for i, p in enumerate(paths.tolist())))


def _load_trie(cfg: RunConfig, params, corpus: Corpus, k: int) -> SidTrie:
    path = cfg.paths.resolve("trie")
    if path.exists():
        return SidTrie.load(path, k)
    log.info("no trie snapshot at %s; quantizing all items", path)
    return build_trie(params, corpus, k)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> None:
    t0 = time.time()
    corpus = generate_corpus(cfg.corpus)
    out = cfg.paths.resolve("corpus")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, out)
    log.info("wrote %s (%d items, %d queries, %d records) in %.1fs", out, len(corpus.items), len(corpus.queries),
             len(corpus.records), time.time() - t0)


def cmd_pretrain(cfg: RunConfig, args) -> None:
    corpus = _load_corpus(cfg)
    ckpt = _checkpoint_path(cfg, args)
    if args.checkpoint and ckpt.exists():
        params, meta, version = _load_model(ckpt)
        mcfg = model_config_from_meta(meta)
        log.info("resuming from %s (version %s, step %d)", ckpt, version, params.step)
    elif args.checkpoint:
        raise CommandError(f"{ckpt}: checkpoint not found")
    else:
        mcfg = cfg.model
        params = init_params(mcfg)
    trainer = Pretrainer(corpus, params, cfg.pretrain, mcfg.k)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    trainer.run(cfg.pretrain.steps, metrics_path=cfg.paths.resolve("pretrain_metrics"))
    meta = {**model_config_to_meta(mcfg), "kind": "pretrain", "seed": str(cfg.seed)}
    version = save_checkpoint(ckpt, params, meta)
    trie = build_trie(params, corpus, mcfg.k)
    trie.save(cfg.paths.resolve("trie"))
    log.info("pretrained %d steps in %.1fs; checkpoint %s version %s; perplexity %s; %d distinct paths",
             cfg.pretrain.steps, time.time() - t0, ckpt, version,
             " ".join(f"{p:.2f}" for p in trainer.perplexity), sum(1 for _ in _leaves(trie)))


def _leaves(trie: SidTrie):
    seen = set()
    for path, _ in trie.entries():
        if path not in seen:
            seen.add(path)
            yield path


def cmd_spo(cfg: RunConfig, args) -> None:
    corpus = _load_corpus(cfg)
    params, meta, version = _load_model(_checkpoint_path(cfg, args))
    mcfg = model_config_from_meta(meta)
    trie = _load_trie(cfg, params, corpus, mcfg.k)
    if len(trie) == 0:
        raise CommandError("trie is empty; nothing to optimize against")
    simulator = SearchSimulator(corpus)
    cfg.spo.reference = version
    test = corpus.split("test")
    probe = test[: cfg.spo.probe_size]
    _, ck = build_splits(corpus, simulator, probe, cfg.eval.rk_top_m, cfg.seed)
    trainer = SpoTrainer(params, params.copy(), trie, simulator, corpus.split("train"), cfg.spo, probe, ck)
    out_csv = cfg.paths.resolve("spo_rounds")
    trainer.run(cfg.spo.rounds, out_csv)
    out = cfg.paths.resolve("spo_checkpoint")
    new_version = save_checkpoint(out, params, {**meta, "kind": "spo", "reference": version,
                                                "spo_rounds": str(cfg.spo.rounds)})
    log.info("wrote %s version %s (reference %s); rounds in %s", out, new_version, version, out_csv)


def cmd_eval(cfg: RunConfig, args) -> None:
    corpus = _load_corpus(cfg)
    params, meta, version = _load_model(_checkpoint_path(cfg, args))
    mcfg = model_config_from_meta(meta)
    trie = _load_trie(cfg, params, corpus, mcfg.k)
    rk, ck = build_splits(corpus, SearchSimulator(corpus), rk_top_m=cfg.eval.rk_top_m, seed=cfg.seed)
    retriever = Retriever(params, trie, cfg.eval.beam_size, cfg.eval.top_n)
    rows = []
    for name, split in (("RK", rk), ("CK", ck)):
        cache: dict = {}
        res = evaluate(retriever, split, cfg.eval.K, cfg.eval.slices, constrained=True, cache=cache)
        rows += metric_rows(name, "constrained", cfg.eval.K, res)
        res = evaluate(retriever, split, cfg.eval.K, ("all",), constrained=False, cache=cache)
        rows += metric_rows(name, "unconstrained", cfg.eval.K, res)
    out = Path(args.out) if args.out else cfg.paths.resolve("eval_metrics")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out, rows)
    for row in rows:
        if row["slice"] == "all":
            print(f"{row['split']} {row['decoding']}: recall@{row['K']}={row['recall_at_k']:.4f} "
                  f"mrr={row['mrr']:.4f} valid_rate={row['valid_rate']:.4f} (n={row['n_records']})")
    log.info("model %s; metrics written to %s", version, out)


def cmd_serve(cfg: RunConfig, args) -> None:
    corpus = _load_corpus(cfg)
    params, meta, version = _load_model(_checkpoint_path(cfg, args))
    trie = _load_trie(cfg, params, corpus, model_config_from_meta(meta).k)
    service = SearchService(params, trie, version, beam_size=cfg.eval.beam_size)
    try:
        address = parse_listen(args.listen)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    with SearchServer(address, service) as server:
        host, port = server.server_address[:2]
        print(f"listening on {host}:{port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass


def cmd_export_plots(cfg: RunConfig, args) -> None:
    inputs = args.inputs or [str(cfg.paths.resolve("eval_metrics"))]
    rows = []
    for entry in inputs:
        label, sep, path = entry.partition("=")
        if not sep:
            label, path = (Path(entry).stem if len(inputs) > 1 else ""), entry
        if not Path(path).exists():
            raise CommandError(f"{path}: metrics CSV not found")
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if label:
                    row["split"] = f"{label}.{row['split']}"
                rows.append(row)
    out = Path(args.out) if args.out else cfg.paths.resolve("plot_data")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_plot_data(out, rows)
    log.info("wrote %d plot rows to %s", 3 * len(rows), out)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "spo": cmd_spo,
    "eval": cmd_eval,
    "serve": cmd_serve,
    "export-plots": cmd_export_plots,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if argv and argv[0] == "--print-config":
        sys.stdout.write(format_config(load_config(None)))
        return 0
    if argv and argv[0] in ("-h", "--help"):
        parser.print_help()
        return 0
    if not argv or argv[0] not in HANDLERS:
        parser.print_usage(sys.stderr)
        bad = argv[0] if argv else "(none)"
        print(f"gensearch: error: unknown or missing command {bad!r}; choose from {', '.join(COMMANDS)}",
              file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        echo_config(cfg, args.command)
        if args.print_config:
            return 0
        HANDLERS[args.command](cfg, args)
    except (ConfigError, CommandError, TrainingDivergedError) as exc:
        print(f"gensearch: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
