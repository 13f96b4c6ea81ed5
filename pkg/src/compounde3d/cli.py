"""Command-line entry point: prepare, train, eval, search, ensemble, report.

Every flag mirrors a :class:`RunConfig` key (``--learning-rate`` sets
``learning_rate``). Precedence: built-in defaults < ``--preset`` <
``--config`` file < environment overrides < explicit flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import PRESETS, ConfigError, RunConfig
from .data import DataError, build_filter_index, classify_relations, format_summary, load_dataset
from .ensemble import EnsembleError, Manifest, WdsConfig, ensemble_evaluate, format_ensemble_table, load_members, wds_weights
from .evaluation import evaluate
from .model import init_model
from .search import DefaultTrainer, SearchError, beam_search, read_search_log, select_best
from .training import NumericError, train
from .variant import parse_variant

logger = logging.getLogger("compounde3d")

ENV_OUTPUT_DIR = "COMPOUNDE3D_OUTPUT_DIR"
ENV_THREADS = "COMPOUNDE3D_THREADS"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("prepare", "train", "eval", "search", "ensemble", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="compounde3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("dataset_pos", nargs="?", metavar="DATASET", help="dataset directory (same as --dataset)")
        p.add_argument("--config", dest="config_file", help="JSON run config")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "report":
            p.add_argument("--search-log", action="append", default=[], help="search log (repeatable)")
            p.add_argument("--eval-report", action="append", default=[], help="eval report.txt (repeatable)")
        for f in fields(RunConfig):
            kind = type(f.default)
            if kind is bool:
                p.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
            else:
                p.add_argument(_flag(f.name), dest=f.name, type=kind, default=None)
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    data = RunConfig().to_dict()
    if args.preset:
        data.update(PRESETS[args.preset])
    if args.config_file:
        try:
            text = Path(args.config_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
        data.update(RunConfig.from_json(text).to_dict())
    if environ.get(ENV_OUTPUT_DIR):
        data["output_dir"] = environ[ENV_OUTPUT_DIR]
    if environ.get(ENV_THREADS):
        try:
            data["threads"] = int(environ[ENV_THREADS])
        except ValueError:
            raise UsageError(f"{ENV_THREADS} must be an integer") from None
    if args.dataset_pos:
        data["dataset"] = args.dataset_pos
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# artifact helpers


def _write(path: Path, text: str) -> Path:
    """Write via ``<name>.partial`` and rename, so an interrupted run leaves a marked file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_text(text, encoding="utf-8")
    os.replace(partial, path)
    return path


def _header(cfg: RunConfig, **extra) -> dict:
    return {"code_version": __version__, "config_hash": cfg.hash(), **extra}


def _load(cfg: RunConfig):
    if not cfg.dataset:
        raise UsageError("a dataset directory is required")
    return load_dataset(cfg.dataset)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prepare(cfg: RunConfig, out: Path, args) -> None:
    vocab, store = _load(cfg)
    types = classify_relations(store, vocab.num_relations)
    header = "".join(f"{k}={v}\n" for k, v in _header(cfg).items())
    _write(out / "summary.txt", header + format_summary(vocab, store))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["relation", "type"])
    for r, name in enumerate(vocab.relations):
        writer.writerow([name, types[r]])
    _write(out / "relation_types.csv", buf.getvalue())
    sys.stdout.write(format_summary(vocab, store))


def cmd_train(cfg: RunConfig, out: Path, args) -> None:
    vocab, store = _load(cfg)
    variant = parse_variant(cfg.variant)
    model = init_model(vocab.num_entities, vocab.num_relations, cfg.dim, variant,
                       seed=cfg.seed, margin=cfg.margin, norm_order=cfg.norm_order)
    fi = build_filter_index(store)
    log_path = out / "train_log.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    log_path.write_text(json.dumps({"kind": "header", **_header(cfg, vocab_hash=vocab.hash())}) + "\n", encoding="utf-8")
    result = train(model, store, cfg.loss_config(), cfg.train_config(), fi, log_path=log_path)
    ckpt = out / "model.npz"
    partial = out / "model.npz.partial"
    save_checkpoint(partial, result.model, vocab.hash(), cfg.to_dict(),
                    {"best_valid_mrr": result.best_valid_mrr, "best_step": result.best_step})
    os.replace(partial, ckpt)
    cfg.save(out / "config.json")
    valid = "" if result.best_valid_mrr is None else f" best_valid_mrr={result.best_valid_mrr:.6f}"
    print(f"checkpoint={ckpt}{valid}")


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    vocab, store = _load(cfg)
    path = Path(cfg.checkpoint) if cfg.checkpoint else out / "model.npz"
    model, meta = load_checkpoint(path, expected_vocab_hash=vocab.hash())
    fi = build_filter_index(store)
    types = classify_relations(store, vocab.num_relations)
    report = evaluate(model, store.split(cfg.split), fi, vocab.relations, types)
    header = _header(cfg, vocab_hash=vocab.hash(), checkpoint=str(path), checkpoint_config_hash=meta["config_hash"],
                     variant=meta["variant"], dim=model.dim, split=cfg.split)
    text = report.to_text(header)
    _write(out / "report.txt", text)
    _write(out / "relations.csv", report.relation_table_csv())
    sys.stdout.write(text)


def cmd_search(cfg: RunConfig, out: Path, args) -> None:
    vocab, store = _load(cfg)
    trainer = DefaultTrainer(vocab.num_entities, vocab.num_relations, cfg.dim, cfg.loss_config(),
                             cfg.train_config(), cfg.norm_order)
    log_path = out / "search_log.jsonl"
    out.mkdir(parents=True, exist_ok=True)
    log_path.write_text(json.dumps({"kind": "header", **_header(cfg, vocab_hash=vocab.hash())}) + "\n", encoding="utf-8")
    result = beam_search(store, cfg.search_config(), trainer, vocab.num_entities, vocab.num_relations, cfg.dim,
                         log_path=log_path, checkpoint_dir=out / "candidates", vocab_hash=vocab.hash())
    lines = [f"{k}={v}" for k, v in _header(cfg).items()]
    lines += [f"best_variant={result.best.variant}", f"best_valid_mrr={result.best.mrr:.6f}",
              f"best_checkpoint={result.best.checkpoint}", f"final_frontier={'|'.join(result.final_frontier)}",
              f"stop_reason={result.stop_reason}", f"trained={len(result.records)}"]
    text = "\n".join(lines) + "\n"
    _write(out / "best_variant.txt", text)
    sys.stdout.write(text)


def cmd_ensemble(cfg: RunConfig, out: Path, args) -> None:
    vocab, store = _load(cfg)
    if not cfg.manifest:
        raise UsageError("--manifest is required")
    manifest = Manifest.read(cfg.manifest)
    members, entries = load_members(manifest, expected_vocab_hash=vocab.hash())
    fi = build_filter_index(store)
    wds = {}
    for scheme in cfg.scheme_list():
        wcfg = WdsConfig(scheme=scheme, ratio=cfg.geometric_ratio, learning_rate=cfg.learning_rate,
                         steps=cfg.wds_steps, batch_size=cfg.batch_size, per_relation=cfg.wds_per_relation,
                         seed=cfg.seed)
        wds[scheme] = wds_weights(members, wcfg, store, cfg.loss_config())
    triples = store.split(cfg.split)
    reports = {}
    for i, (model, entry) in enumerate(zip(members, entries)):
        reports[f"member{i}:{entry.name or model.variant.render()}"] = evaluate(model, triples, fi)
    reports.update(ensemble_evaluate(members, triples, fi, cfg.method_list(), wds, cfg.k_rrf, cfg.phi))
    table = format_ensemble_table(reports)
    header = "".join(f"# {k}={v}\n" for k, v in _header(cfg, vocab_hash=vocab.hash()).items())
    _write(out / "ensemble_report.csv", header + table)
    weights = {k: np.asarray(v).tolist() for k, v in wds.items()}
    _write(out / "wds_weights.json", json.dumps(weights, indent=2) + "\n")
    sys.stdout.write(table)


def operator_count_table(records) -> str:
    """Distribution of validation MRR per operator count (box-plot ready)."""
    groups: dict[int, list[float]] = {}
    for rec in records:
        if rec.ok and rec.mrr is not None:
            groups.setdefault(rec.op_count, []).append(rec.mrr)
    lines = ["op_count,count,min,q1,median,q3,max,mean"]
    for ops in sorted(groups):
        v = np.asarray(groups[ops])
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        lines.append(f"{ops},{v.size},{v.min():.6f},{q1:.6f},{med:.6f},{q3:.6f},{v.max():.6f},{v.mean():.6f}")
    return "\n".join(lines) + "\n"


def _read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            out[key] = value
    return out


def dimension_table(report_paths) -> str:
    rows = []
    for path in report_paths:
        rep = _read_report(path)
        try:
            rows.append((rep.get("variant", ""), int(rep["dim"]), float(rep["mrr"]), rep.get("hits@10", "")))
        except (KeyError, ValueError):
            raise DataError(f"{path}: not an eval report (needs dim and mrr)") from None
    lines = ["variant,dim,mrr,hits@10"]
    for variant, dim, mrr, h10 in sorted(rows):
        lines.append(f"{variant},{dim},{mrr:.6f},{h10}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: RunConfig, out: Path, args) -> None:
    if not args.search_log and not args.eval_report:
        raise UsageError("report needs --search-log and/or --eval-report")
    if args.search_log:
        records = []
        for path in args.search_log:
            try:
                records += read_search_log(path)
            except OSError as exc:
                raise DataError(f"cannot read search log: {exc}") from None
        table = operator_count_table(records)
        _write(out / "mrr_by_operator_count.csv", table)
        sys.stdout.write(table)
        best = select_best(records)
        if best is not None:
            print(f"best_variant={best.variant} best_valid_mrr={best.mrr:.6f}")
    if args.eval_report:
        table = dimension_table(args.eval_report)
        _write(out / "mrr_by_dimension.csv", table)
        sys.stdout.write(table)


HANDLERS = {
    "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval,
    "search": cmd_search, "ensemble": cmd_ensemble, "report": cmd_report,
}


def run(argv=None, environ=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, environ)
        out = Path(cfg.output_dir)
        limits = contextlib.nullcontext()
        if cfg.threads:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(cfg.threads)
        with limits:
            HANDLERS[args.command](cfg, out, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, EnsembleError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError, SearchError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
