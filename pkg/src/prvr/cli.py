"""Command-line entry point: ``prvr <command> [flags]``.

Every command prints JSON-lines records on stdout and exactly one run
manifest, written next to ``--out`` when given (``<out>.manifest.json``)
and always echoed as the last stderr line. Errors exit nonzero.
"""
import argparse
import json
import logging
import resource
import statistics
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import datagen, fileio
from .config import ConfigError, config_hash, merge, train_config_from_dict

log = logging.getLogger("prvr")


class CommandError(Exception):
    pass


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise CommandError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc})") from None


def _need(path, what: str) -> Path:
    if path is None:
        raise CommandError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} file not found: {p}")
    return p


def _train_config(args):
    data = _read_json(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    return train_config_from_dict(data)


def _load_corpus(args):
    return datagen.load_corpus(_need(args.corpus, "corpus"))


# --- commands ------------------------------------------------------------

def cmd_gen_data(args, manifest):
    data = _read_json(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    spec = datagen.spec_from_dict(data)
    manifest["config_hash"] = config_hash(datagen.spec_dict(spec))
    manifest["seed"] = spec.seed
    if args.out is None:
        raise CommandError("--out is required")
    corpus = datagen.generate(spec)
    size = datagen.save_corpus(corpus, args.out)
    _emit({"event": "corpus", "path": str(args.out), "bytes": size, "videos": len(corpus.videos),
           "queries": len(corpus.queries)})


def cmd_train(args, manifest):
    from .trainer import load_checkpoint, train

    config = _train_config(args)
    manifest["config_hash"] = config_hash(config)
    manifest["seed"] = config.seed
    corpus = _load_corpus(args)
    if args.out is None:
        raise CommandError("--out is required")
    resume = load_checkpoint(args.resume) if args.resume else None

    def on_epoch(record, seconds):
        _emit({"event": "epoch", "seconds": round(seconds, 3), **record})

    try:
        result = train(config, corpus, out_path=args.out, resume=resume, stop_after=args.stop_after,
                       on_epoch=on_epoch)
    except Exception:
        if Path(args.out).exists():
            manifest["partial_outputs"] = [str(args.out)]
        raise
    ck = result.checkpoint
    _emit({"event": "trained", "epochs": ck.epoch, "best_epoch": ck.best_epoch, "best_val_sumr": ck.best_sumr})


def _model(args):
    from .trainer import load_checkpoint, model_from_checkpoint

    ck = load_checkpoint(_need(args.checkpoint, "checkpoint"))
    return ck, model_from_checkpoint(ck, best=not args.last)


def cmd_eval(args, manifest):
    from .retrieval import (build_index, encode_query_batch, load_index, metrics_from_ranks, model_fingerprint,
                            score_matrix, truth_ranks)

    ck, model = _model(args)
    manifest["config_hash"] = ck.config_hash
    manifest["seed"] = ck.config.seed
    corpus = _load_corpus(args)
    ids = set(corpus.video_ids(args.split))
    if args.index:
        index = load_index(args.index, expected_fingerprint=model_fingerprint(model))
    else:
        index = build_index(model, [v for v in corpus.videos if v.source_id in ids])
    queries = [q for q in corpus.queries if corpus.truth[q.source_id][0] in set(index.ids)]
    scores = score_matrix(encode_query_batch(model, queries), index, model.cfg.alpha_frame, model.cfg.alpha_clip)
    ranks = truth_ranks(scores, index.ids, [corpus.truth[q.source_id][0] for q in queries])
    report = metrics_from_ranks(ranks)
    _emit({"event": "metrics", "split": args.split, **report.as_dict()})


def cmd_index(args, manifest):
    from .retrieval import build_index, save_index

    ck, model = _model(args)
    manifest["config_hash"] = ck.config_hash
    corpus = _load_corpus(args)
    if args.out is None:
        raise CommandError("--out is required")
    ids = set(corpus.video_ids(args.split))
    index = build_index(model, [v for v in corpus.videos if v.source_id in ids])
    size = save_index(index, args.out)
    _emit({"event": "index", "path": str(args.out), "videos": len(index), "bytes": size,
           "fingerprint": index.fingerprint})


def cmd_query(args, manifest):
    from .retrieval import encode_query_batch, load_index, model_fingerprint, rank_videos

    ck, model = _model(args)
    manifest["config_hash"] = ck.config_hash
    corpus = _load_corpus(args)
    index = load_index(_need(args.index, "index"), expected_fingerprint=model_fingerprint(model))
    by_id = {q.source_id: q for q in corpus.queries}
    wanted = args.queries.split(",") if args.queries else []
    missing = [q for q in wanted if q not in by_id]
    if not wanted or missing:
        raise CommandError(f"unknown or missing query ids: {missing or '(none given)'}")
    emb = encode_query_batch(model, [by_id[q] for q in wanted])
    for qid, q in zip(wanted, emb):
        ranked = rank_videos(q, index, model.cfg.alpha_frame, model.cfg.alpha_clip)[:args.top]
        _emit({"event": "ranking", "query": qid, "results": [[v, s] for v, s in ranked]})


def cmd_bench(args, manifest):
    from .retrieval import INDEX_MAGIC, INDEX_VERSION, load_index, score_matrix

    path = _need(args.index, "index")
    try:
        index = load_index(path)
    except (fileio.CorruptFileError, fileio.VersionMismatchError) as exc:
        raise CommandError(f"unloadable index: {exc}") from exc
    n_queries = int(args.queries or 100)
    if n_queries < 1:
        raise CommandError("--queries must be >= 1")
    seed = 0 if args.seed is None else args.seed
    manifest["seed"] = seed
    rng = np.random.default_rng(seed)
    queries = rng.normal(size=(n_queries, index.d))
    score_matrix(queries[:1], index)  # warm-up
    times = []
    for q in queries:
        t0 = time.perf_counter()
        score_matrix(q[None], index)
        times.append(time.perf_counter() - t0)
    mf = 0 if index.frame is None else index.frame.shape[1]
    mc = 0 if index.clip is None else index.clip.shape[1]
    data = path.read_bytes()
    header, payload = fileio.unpack(data, INDEX_MAGIC, INDEX_VERSION)
    _emit({
        "event": "bench",
        "videos": len(index),
        "queries": n_queries,
        "p50_ms": 1e3 * float(np.percentile(times, 50)),
        "p95_ms": 1e3 * float(np.percentile(times, 95)),
        "mean_ms": 1e3 * float(np.mean(times)),
        "index_nbytes": index.nbytes,
        "predicted_nbytes": len(index) * (mf + mc) * index.d * 4,
        "payload_bytes": len(payload),
        "file_bytes": len(data),
    })


def _diagnose_model(model, corpus, split, label):
    from .diagnostics import collapse_report
    from .retrieval import build_index

    ids = set(corpus.video_ids(split))
    index = build_index(model, [v for v in corpus.videos if v.source_id in ids], fingerprint="")
    return collapse_report(index, corpus, model, label=label)


def cmd_diagnose(args, manifest):
    ck, model = _model(args)
    manifest["config_hash"] = ck.config_hash
    corpus = _load_corpus(args)
    report = _diagnose_model(model, corpus, args.split, args.label or ck.config_hash[:12])
    for r in report.records:
        _emit({"event": "positioning", **r.as_dict()})
    _emit({"event": "collapse_summary", **report.summary()})
    if args.out:
        Path(args.out).write_text(json.dumps({"summary": report.summary(),
                                              "records": [r.as_dict() for r in report.records]}, indent=1))


def run_cell(base: dict, overrides: dict, seed: int, corpus, split: str = "test") -> dict:
    """Train one grid cell at one seed; returns its test metrics and collapse summary."""
    from .retrieval import evaluate
    from .trainer import model_from_checkpoint, train

    config = train_config_from_dict(merge(merge(base, overrides), {"seed": seed}))
    result = train(config, corpus)
    model = model_from_checkpoint(result.checkpoint)
    report = evaluate(model, corpus, split)
    out = {"seed": seed, "config_hash": config_hash(config), **report.as_dict()}
    if config.model.clip_branch:
        out["mean_positioning_variance"] = _diagnose_model(model, corpus, split, "").mean
    return out


def run_grid(grid: dict, corpus, seeds=(0, 1, 2), emit=_emit) -> list[dict]:
    base = grid.get("base", {})
    cells = grid.get("cells")
    if not cells:
        raise CommandError("grid needs a nonempty 'cells' mapping")
    seeds = tuple(grid.get("seeds", seeds))
    rows = []
    for name, overrides in cells.items():
        runs, errors = [], []
        for seed in seeds:
            try:
                runs.append(run_cell(base, overrides, seed, corpus))
                emit({"event": "cell_run", "cell": name, **runs[-1]})
            except Exception as exc:  # a failed cell must not stop the grid
                errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
                emit({"event": "cell_error", "cell": name, "seed": seed, "error": errors[-1]})
        row = {"cell": name, "n_runs": len(runs), "errors": errors}
        if runs:
            for key in ("R1", "R5", "R10", "R100", "SumR", "mean_positioning_variance"):
                vals = [r[key] for r in runs if key in r]
                if vals:
                    row[f"median_{key}"] = statistics.median(vals)
        rows.append(row)
        emit({"event": "cell", **row})
    return rows


def cmd_ablate(args, manifest):
    grid = _read_json(_need(args.grid, "grid"))
    manifest["config_hash"] = config_hash(grid)
    corpus = _load_corpus(args)
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (0, 1, 2)
    rows = run_grid(grid, corpus, seeds)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=1, sort_keys=True))
    if not any(r["n_runs"] for r in rows):
        raise CommandError("every grid cell failed")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "index": cmd_index,
    "query": cmd_query,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prvr", description="Partially relevant video retrieval toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config")
        s.add_argument("--corpus")
        s.add_argument("--out")
        s.add_argument("--seed", type=int)
        s.add_argument("--checkpoint")
        s.add_argument("--grid")
        s.add_argument("--queries", help="query count (bench) or comma-separated query ids (query)")
        s.add_argument("--index")
        s.add_argument("--split", default="test")
        s.add_argument("--manifest", help="manifest path; defaults to <out>.manifest.json")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "train":
            s.add_argument("--resume")
            s.add_argument("--stop-after", type=int)
        if name in ("eval", "index", "query", "diagnose"):
            s.add_argument("--last", action="store_true", help="use last-epoch instead of best parameters")
        if name == "query":
            s.add_argument("--top", type=int, default=10)
        if name == "diagnose":
            s.add_argument("--label")
        if name == "ablate":
            s.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config_path": args.config,
        "config_hash": None,
        "inputs": {k: getattr(args, k) for k in ("corpus", "checkpoint", "grid", "index") if getattr(args, k)},
        "outputs": [args.out] if args.out else [],
        "seed": args.seed,
    }
    t0 = time.perf_counter()
    code = 0
    try:
        COMMANDS[args.command](args, manifest)
    except (CommandError, ConfigError, datagen.InfeasibleSpecError, fileio.CorruptFileError,
            fileio.VersionMismatchError, FileNotFoundError, ValueError, KeyError, RuntimeError) as exc:
        print(f"prvr {args.command}: error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        code = 2 if isinstance(exc, CommandError) else 1
    manifest["exit_code"] = code
    manifest["wall_seconds"] = time.perf_counter() - t0
    manifest["peak_rss_bytes"] = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    target = args.manifest or (f"{args.out}.manifest.json" if args.out else None)
    if target:
        try:
            fileio.atomic_write(target, json.dumps(manifest, indent=1, sort_keys=True).encode())
        except OSError as exc:
            print(f"prvr: could not write manifest: {exc}", file=sys.stderr)
    print(json.dumps({"manifest": manifest}, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
