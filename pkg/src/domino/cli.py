"""Command-line front end: generate-data, train, eval, extract-domain, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, default_data_root, load_config, variant_of, variant_overrides
from .errors import DominoError, NonFiniteLossError

log = logging.getLogger("domino")

BASE_SPLITS = ("train_source", "val_source", "val_target")
REPORT_COLUMNS = ("variant", "source_miou", "target_miou", "miou_percent")


class CLIError(DominoError):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "variant", None):
        cfg = cfg.with_overrides(model=variant_overrides(args.variant))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(train={"seed": args.seed})
    return cfg


def _data_root(arg):
    root = arg or default_data_root()
    return Path(root) if root else None


def cmd_generate_data(args) -> int:
    from .data import build_dataset, save_dataset

    cfg = _config(args)
    root = _data_root(args.out)
    if root is None:
        raise CLIError("no output directory: pass --out or set DOMINO_DATA_ROOT")
    base_seed = cfg.data.base_seed if args.seed is None else args.seed
    splits = list(BASE_SPLITS)
    if args.synthetic or cfg.data.real_fraction < 1:
        splits.append("train_synthetic")
    datasets = {s: build_dataset(s, cfg, base_seed=base_seed) for s in splits}
    try:
        written = save_dataset(root, datasets, cfg, base_seed)
    except OSError as exc:
        raise CLIError(f"cannot write dataset to {str(root)!r}: {exc.strerror or exc}") from exc
    counts = {s: len(d) for s, d in datasets.items()}
    print(json.dumps({"root": str(root), "scenes": counts, "files_written": written}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .training import train_loop

    cfg = _config(args)
    seed = cfg.train.seed
    out = Path(args.out) if args.out else Path("runs") / f"{variant_of(cfg.model)}-seed{seed}"
    try:
        result = train_loop(cfg, seed=seed, out_dir=out)
    except NonFiniteLossError as exc:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failure.json").write_text(json.dumps(exc.state, indent=2, sort_keys=True) + "\n")
        raise CLIError(f"{exc}; diagnostic state written to {str(out / 'failure.json')!r}") from exc
    summary = {"out": str(out), "variant": variant_of(cfg.model), "seed": seed}
    if result.report is not None:
        summary.update(source_miou=result.report.source_miou, target_miou=result.report.target_miou,
                       miou_percent=result.report.miou_percent)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import build_dataset, load_split
    from .evaluation import evaluate_cross_domain
    from .training import make_embedder

    model, cfg, _ = load_checkpoint(args.checkpoint)
    if args.catalog:
        cfg.domain.catalog_path = args.catalog
    embedder = make_embedder(cfg)
    root = _data_root(args.data)
    if root is not None:
        source, target = load_split(root, "val_source"), load_split(root, "val_target")
    else:
        source, target = build_dataset("val_source", cfg), build_dataset("val_target", cfg)
    report = evaluate_cross_domain(model, source, target, embedder.catalog, embedder.enc, cfg.domain.temperature)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_extract_domain(args) -> int:
    from .data import read_image_file
    from .domain_embedding import DEFAULT_CATALOG, StatisticalEncoder, extract_domain_embedding, load_catalog

    cfg = _config(args)
    image = read_image_file(args.image)
    catalog_path = args.catalog or cfg.domain.catalog_path
    catalog = load_catalog(catalog_path) if catalog_path else list(DEFAULT_CATALOG)
    temperature = cfg.domain.temperature if args.temperature is None else args.temperature
    enc = StatisticalEncoder(d_emb=cfg.domain.d_emb, seed=cfg.domain.encoder_seed,
                             height=image.shape[0], width=image.shape[1])
    alpha, w = extract_domain_embedding(image, catalog, enc, temperature)
    payload = {"ids": [d.id for d in catalog], "alpha": [float(a) for a in alpha], "W": [float(x) for x in w]}
    print(json.dumps(payload))
    return 0


def _run_row_key(cfg, table):
    if table == "mix":
        real = round(cfg.data.real_fraction * 100)
        return f"{real}/{100 - real}"
    return variant_of(cfg.model)


def report_rows(run_dirs, table="variants"):
    """Aggregate run directories into report rows, averaging runs that share a row key.

    mIoU columns are percentage points rounded to 2 decimals; miou_percent is
    recomputed from the rounded columns.
    """
    from .evaluation import miou_percent, round2

    missing = [str(d) for d in run_dirs if not (Path(d) / "report.json").is_file()]
    if missing:
        raise CLIError(f"missing run directory or report.json: {', '.join(missing)}")
    groups = defaultdict(list)
    for d in run_dirs:
        d = Path(d)
        cfg = ExperimentConfig.from_dict(_without_catalog(json.loads((d / "config.json").read_text())))
        rep = json.loads((d / "report.json").read_text())
        groups[_run_row_key(cfg, table)].append((rep["source_miou"], rep["target_miou"]))
    rows = []
    for key, vals in groups.items():
        src = round2(100 * float(np.mean([v[0] for v in vals])))
        tgt = round2(100 * float(np.mean([v[1] for v in vals])))
        rows.append({"variant": key, "source_miou": src, "target_miou": tgt,
                     "miou_percent": miou_percent(src, tgt), "runs": len(vals)})
    if table == "mix":
        rows.sort(key=lambda r: -int(r["variant"].split("/")[0]))
    else:
        rows.sort(key=lambda r: r["variant"])
    return rows


def _without_catalog(raw):
    # a run's catalog file may have moved since training; it does not affect the row key
    raw = dict(raw)
    raw["domain"] = {**raw.get("domain", {}), "catalog_path": None}
    return raw


def render_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r["variant"]] + [f"{r[c]:.2f}" for c in REPORT_COLUMNS[1:]])
    return buf.getvalue()


def cmd_report(args) -> int:
    text = render_csv(report_rows(args.runs, args.table))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domino", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--out", help=out_help)
        p.add_argument("--seed", type=int, help="overrides the config seed")

    p = sub.add_parser("generate-data", help="write the procedural dataset to disk")
    common(p, "dataset root (default: $DOMINO_DATA_ROOT)")
    p.add_argument("--synthetic", action="store_true", help="also write the synthetic training pool")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model and write its run directory")
    common(p, "run directory (default: runs/<variant>-seed<seed>)")
    p.add_argument("--variant", choices=["baseline", "frozen", "domino-add", "domino-sub"],
                   help="apply a variant preset on top of the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the source and target validation splits")
    p.add_argument("checkpoint")
    p.add_argument("--data", help="dataset root (default: $DOMINO_DATA_ROOT, else regenerate)")
    p.add_argument("--catalog", help="domain catalog JSON (default: the one used in training)")
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-domain", help="print alpha and W for one image as JSON")
    p.add_argument("image", help=".npy or raw .img file")
    p.add_argument("--config", help="experiment config (JSON); supplies the encoder settings")
    p.add_argument("--catalog", help="domain catalog JSON")
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_extract_domain)

    p = sub.add_parser("report", help="CSV table from run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--table", choices=["variants", "mix"], default="variants")
    p.add_argument("--out", help="also write the CSV here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DominoError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"domino {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
