"""Command line: ``descdet train``, ``descdet ablate`` and ``descdet inspect``.

Exit codes: 0 success, 1 unexpected failure, 2 bad config or unreadable
dictionary, 3 the LLM backend could not be reached.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from descdet import descriptors as ds
from descdet import prompt
from descdet.config import MODES, ExperimentConfig
from descdet.errors import ConfigError, FormatError, InvalidSpecError, LlmUnavailable, UnknownCategoryError
from descdet.sim import ExperimentResult, run_experiment

log = logging.getLogger("descdet")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_LLM = 0, 1, 2, 3


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def _load_config(path: str | None, out: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig().validate()
    if out:
        cfg.io.out_dir = out
    return cfg


def _csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def write_run_artifacts(result: ExperimentResult, cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = result.report
    paths = {
        "config": out / "config.json",
        "dict": Path(cfg.io.dict_path) if cfg.io.dict_path else out / "dict.json",
        "checkpoint": Path(cfg.io.checkpoint_path) if cfg.io.checkpoint_path else out / "meta.json",
        "eval": out / "eval.csv",
        "loss": out / "loss.csv",
        "updates": out / "updates.jsonl",
        "summary": out / "summary.md",
    }
    cfg.save(paths["config"])
    ds.save(result.dictionary, paths["dict"])
    prompt.save_checkpoint(result.theta, paths["checkpoint"], step=cfg.train.n_iters, lr=cfg.train.lr, tau=cfg.train.tau)

    rows = [
        [c, v["split"], v["n"], v["correct"], _fmt(v["accuracy"]), v["n_descriptors"]]
        for c, v in rep.per_category.items()
    ]
    paths["eval"].write_text(
        _csv_text(["category", "split", "n", "correct", "accuracy", "n_descriptors"], rows), encoding="utf-8"
    )
    paths["loss"].write_text(
        _csv_text(["step", "loss"], [[i + 1, _fmt(x)] for i, x in enumerate(rep.loss_curve)]), encoding="utf-8"
    )
    paths["updates"].write_text("".join(u.to_json() + "\n" for u in result.updates), encoding="utf-8")
    paths["summary"].write_text(
        "\n".join(
            [
                f"# run: mode={rep.mode} seed={rep.seed}",
                "",
                "| split | top-1 |",
                "|---|---|",
                f"| base | {rep.base_top1:.4f} |",
                f"| novel | {rep.novel_top1:.4f} |",
                f"| overall | {rep.overall_top1:.4f} |",
                f"| novel, label embeddings only | {rep.label_baseline_novel_top1:.4f} |",
                "",
                f"descriptors: {rep.dict_size['total']:.0f} total, "
                f"{rep.dict_size['base_mean']:.2f} per base category, {rep.dict_size['novel_mean']:.2f} per novel category",
                f"dictionary updates: {len(result.updates)}",
                "",
            ]
        ),
        encoding="utf-8",
    )
    return paths


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.out)
    result = run_experiment(cfg)
    paths = write_run_artifacts(result, cfg)
    rep = result.report
    print(f"mode={rep.mode} seed={rep.seed} base={rep.base_top1:.4f} novel={rep.novel_top1:.4f} overall={rep.overall_top1:.4f}")
    print(f"artifacts in {paths['eval'].parent}")
    return EXIT_OK


def ablation_configs(cfg: ExperimentConfig) -> list[ExperimentConfig]:
    """One config per (mode, seed). Seed ``s`` shifts the world seed by ``s`` and sets the training seed to ``s``."""
    out = []
    for mode in MODES:
        for s in cfg.train.seeds:
            run = copy.deepcopy(cfg)
            run.train.mode = mode
            run.train.seed = s
            run.world.seed = cfg.world.seed + s
            out.append(run)
    return out


def _run_one(cfg: ExperimentConfig) -> list:
    rep = run_experiment(cfg).report
    return [
        rep.mode,
        rep.seed,
        cfg.world.seed,
        _fmt(rep.base_top1),
        _fmt(rep.novel_top1),
        _fmt(rep.overall_top1),
        _fmt(rep.label_baseline_novel_top1),
        f"{rep.dict_size['total']:.0f}",
    ]


RUN_HEADER = ["mode", "seed", "world_seed", "base_top1", "novel_top1", "overall_top1", "label_novel_top1", "n_descriptors"]
SUMMARY_HEADER = ["mode", "runs", "base_mean", "base_std", "novel_mean", "novel_std"]


def _stdev(xs: list[float]) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def summarize_runs(rows: list[list]) -> list[list]:
    out = []
    for mode in MODES:
        mine = [r for r in rows if r[0] == mode]
        if not mine:
            continue
        base = [float(r[3]) for r in mine]
        novel = [float(r[4]) for r in mine]
        out.append(
            [mode, len(mine), _fmt(statistics.mean(base)), _fmt(_stdev(base)), _fmt(statistics.mean(novel)), _fmt(_stdev(novel))]
        )
    return out


def markdown_table(summary: list[list]) -> str:
    lines = ["| mode | runs | base top-1 | novel top-1 |", "|---|---|---|---|"]
    for mode, n, bm, bs, nm, ns in summary:
        lines.append(f"| {mode} | {n} | {100 * float(bm):.2f} ± {100 * float(bs):.2f} | {100 * float(nm):.2f} ± {100 * float(ns):.2f} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.out)
    runs = ablation_configs(cfg)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_one, runs))
    else:
        rows = []
        for run in runs:
            rows.append(_run_one(run))
            log.info("done mode=%s seed=%s novel=%s", rows[-1][0], rows[-1][1], rows[-1][4])
    summary = summarize_runs(rows)
    out = Path(cfg.io.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_runs.csv").write_text(_csv_text(RUN_HEADER, rows), encoding="utf-8")
    (out / "ablation_summary.csv").write_text(_csv_text(SUMMARY_HEADER, summary), encoding="utf-8")
    table = markdown_table(summary)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    d = ds.load(args.dict_path)
    if args.category is not None and args.category not in d:
        raise UnknownCategoryError(args.category, d.categories)
    if args.top is not None and args.top < 1:
        raise ConfigError("--top must be positive")
    for c in [args.category] if args.category else d.categories:
        entry = d.entries[c]
        confusers = ds.confusing_categories(d, c, k=3, min_count=1)
        print(f"== {c}  ({len(entry.descriptors)} descriptors; confused with: {', '.join(confusers) or '-'})")
        order = sorted(range(len(entry.descriptors)), key=lambda i: (-entry.descriptors[i].usage_count, i))
        if args.top is not None:
            order = order[: args.top]
        width = max([len("text")] + [len(entry.descriptors[i].text) for i in order])
        print(f"  {'text':<{width}}  {'usage':>6}  {'cycle':>5}")
        for i in order:
            desc = entry.descriptors[i]
            print(f"  {desc.text:<{width}}  {desc.usage_count:>6}  {desc.created_at_cycle:>5}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="descdet", description="Descriptor-dictionary detection experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train once and write artifacts")
    p.add_argument("--config", help="JSON config; defaults are used when omitted")
    p.add_argument("--out", help="override io.out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run every mode over the configured seeds")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="print a saved dictionary")
    p.add_argument("dict_path")
    p.add_argument("--category")
    p.add_argument("--top", type=int)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, UnknownCategoryError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LlmUnavailable as exc:
        print(f"LLM unavailable: {exc}", file=sys.stderr)
        return EXIT_LLM
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
