"""Command-line entry point for reproducible runs.

Subcommands: synth | train | eval | stats | gradcheck | cooccur.
Settings resolve flag > config-file key > built-in default; every
report embeds the resolved settings and seed. Reports and datasets are
written atomically, logs go to standard error only.

Heavy imports happen inside the command handlers so the --threads cap
can reach the numerics backend before it loads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from .errors import ConfigError, MulComError
from .ioutil import atomic_write_text, canonical_json

log = logging.getLogger("mulcom.cli")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

THREAD_ENV_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def _resolve(args, file_cfg: dict, keys: Sequence[tuple[str, object]]) -> dict:
    """Merge flag > file > default for this command's known keys."""
    known = {k for k, _ in keys}
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigError(
            f"unknown config keys {sorted(unknown)}; expected among {sorted(known)}"
        )
    out = {}
    for key, default in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _require(cfg: dict, key: str, command: str):
    if cfg[key] is None:
        raise ConfigError(f"{command} needs --{key.replace('_', '-')}")
    return cfg[key]


def _set_thread_caps(threads: int) -> None:
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    for var in THREAD_ENV_VARS:
        os.environ[var] = str(threads)
    if "numpy" in sys.modules:
        log.debug("numpy already loaded; thread caps may not take effect")


def _normalize_streams(value) -> tuple[str, ...]:
    if isinstance(value, str):
        parts = [s.strip() for s in value.split(",")]
        return tuple(s for s in parts if s)
    return tuple(value)


def _write_report(out_dir: str, fname: str, report: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, fname)
    atomic_write_text(path, canonical_json(report) + "\n")
    log.info("wrote %s", path)
    return path


COMMON_KEYS = (("out", None), ("seed", 0), ("threads", 1))

SYNTH_KEYS = COMMON_KEYS + (
    ("docs", 2000),
    ("token_tropes", 4),
    ("motif_tropes", 4),
    ("vocab", 64),
    ("d_w", 16),
    ("d_s", 16),
    ("trigger_prob", 0.4),
    ("filler_sents", 2),
    ("filler_sent_len", 4),
    ("val_frac", 0.2),
)


def cmd_synth(args, file_cfg: dict) -> int:
    cfg = _resolve(args, file_cfg, SYNTH_KEYS)
    out_dir = _require(cfg, "out", "synth")
    from .data import SynthSpec, save_dataset, synth_generate

    spec = SynthSpec(
        **{k: v for k, v in cfg.items() if k not in ("out", "seed", "threads")}
    )
    ds = synth_generate(cfg["seed"], spec)
    manifest = save_dataset(ds, out_dir)
    counts = {name: len(docs) for name, docs in ds.splits.items()}
    log.info("wrote %s (%s docs, %d tropes)", manifest, counts, ds.num_tropes)
    return EXIT_OK


TRAIN_KEYS = COMMON_KEYS + (
    ("data", None),
    ("d_f", 64),
    ("d_a", 64),
    ("d_h", 64),
    ("reasoner_steps", 3),
    ("reasoner_heads", 4),
    ("relation_reasoner", "msrrn"),
    ("streams", "word,sentence,relation"),
    ("epochs", 30),
    ("batch_size", 16),
    ("learning_rate", 1e-3),
    ("pos_weight", None),
    ("threshold", 0.5),
    ("early_stop_f1", None),
)


def cmd_train(args, file_cfg: dict) -> int:
    cfg = _resolve(args, file_cfg, TRAIN_KEYS)
    out_dir = _require(cfg, "out", "train")
    manifest = _require(cfg, "data", "train")
    from .data import load_dataset
    from .errors import ValidationError
    from .model import ModelConfig, TrainConfig, build_model, save_checkpoint, train

    ds = load_dataset(manifest)
    train_docs = ds.split("train")
    if not train_docs:
        raise ValidationError(f"{manifest}: training split is empty")
    val_docs = ds.splits.get("val") or None
    mcfg = ModelConfig(
        num_tropes=ds.num_tropes,
        d_w=train_docs[0].word_feats.shape[1],
        d_s=train_docs[0].sent_feats.shape[1],
        d_f=cfg["d_f"],
        d_a=cfg["d_a"],
        d_h=cfg["d_h"],
        reasoner_steps=cfg["reasoner_steps"],
        reasoner_heads=cfg["reasoner_heads"],
        relation_reasoner=cfg["relation_reasoner"],
        streams=_normalize_streams(cfg["streams"]),
    )
    tcfg = TrainConfig(
        learning_rate=cfg["learning_rate"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        seed=cfg["seed"],
        pos_weight=cfg["pos_weight"],
        threshold=cfg["threshold"],
        early_stop_f1=cfg["early_stop_f1"],
    )
    model = build_model(mcfg, seed=cfg["seed"])
    result = train(model, train_docs, tcfg, val_docs=val_docs)
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    save_checkpoint(model, ckpt_path)
    log.info("wrote %s", ckpt_path)
    report = {
        "command": "train",
        "seed": cfg["seed"],
        "config": {**cfg, "streams": list(mcfg.streams)},
        "model_config": mcfg.to_dict(),
        "dataset": {
            "manifest": manifest,
            "train_docs": len(train_docs),
            "val_docs": 0 if val_docs is None else len(val_docs),
        },
        "result": {
            "epochs_run": result.epochs_run,
            "epoch_losses": result.epoch_losses,
            "val_micro_f1": result.val_micro_f1,
            "pos_weight": result.pos_weight,
            "stopped_early": result.stopped_early,
        },
    }
    _write_report(out_dir, "train_report.json", report)
    return EXIT_OK


EVAL_KEYS = COMMON_KEYS + (
    ("data", None),
    ("checkpoint", None),
    ("split", "val"),
    ("threshold", 0.5),
)


def cmd_eval(args, file_cfg: dict) -> int:
    cfg = _resolve(args, file_cfg, EVAL_KEYS)
    out_dir = _require(cfg, "out", "eval")
    manifest = _require(cfg, "data", "eval")
    ckpt = _require(cfg, "checkpoint", "eval")
    from .data import load_dataset
    from .errors import ValidationError
    from .graph import label_matrix
    from .metrics import evaluate
    from .model import load_checkpoint, score_dataset

    ds = load_dataset(manifest)
    docs = ds.split(cfg["split"])
    if not docs:
        raise ValidationError(f"{manifest}: split {cfg['split']!r} is empty")
    model = load_checkpoint(ckpt)
    if model.cfg.num_tropes != ds.num_tropes:
        raise ValidationError(
            f"checkpoint has {model.cfg.num_tropes} tropes, "
            f"dataset has {ds.num_tropes}"
        )
    scores = score_dataset(model, docs)
    labels = label_matrix(docs, ds.num_tropes)
    rep = evaluate(
        scores, labels, threshold=cfg["threshold"], trope_names=ds.trope_names
    )
    log.info(
        "%s split: micro-F1 %.2f macro-F1 %.2f mAP %.2f",
        cfg["split"], rep.micro_f1, rep.macro_f1, rep.mAP,
    )
    report = {
        "command": "eval",
        "seed": cfg["seed"],
        "config": cfg,
        "model_config": model.cfg.to_dict(),
        "report": rep.to_dict(),
    }
    _write_report(out_dir, "eval_report.json", report)
    return EXIT_OK


STATS_KEYS = COMMON_KEYS + (("data", None),)


def cmd_stats(args, file_cfg: dict) -> int:
    cfg = _resolve(args, file_cfg, STATS_KEYS)
    out_dir = _require(cfg, "out", "stats")
    manifest = _require(cfg, "data", "stats")
    from .data import corpus_stats, load_dataset, trope_prevalence

    ds = load_dataset(manifest)
    stats = corpus_stats(ds)
    prevalence = {}
    summary = {}
    for split, docs in ds.splits.items():
        if not docs:
            continue
        prev = trope_prevalence(docs, ds.num_tropes)
        prevalence[split] = {
            name: p for name, p in zip(ds.trope_names, prev)
        }
        ordered = sorted(prev)
        mid = len(ordered) // 2
        median = (
            ordered[mid]
            if len(ordered) % 2
            else (ordered[mid - 1] + ordered[mid]) / 2.0
        )
        summary[split] = {"median": median, "max": max(prev), "min": min(prev)}
        log.info(
            "%s: %d docs, prevalence median %.2f%% max %.2f%%",
            split, len(docs), median, max(prev),
        )
    report = {
        "command": "stats",
        "seed": cfg["seed"],
        "config": cfg,
        "trope_names": ds.trope_names,
        "stats": stats,
        "prevalence": prevalence,
        "prevalence_summary": summary,
    }
    _write_report(out_dir, "stats_report.json", report)
    return EXIT_OK


COOCCUR_KEYS = COMMON_KEYS + (("data", None), ("split", "train"), ("top", 15))


def cmd_cooccur(args, file_cfg: dict) -> int:
    cfg = _resolve(args, file_cfg, COOCCUR_KEYS)
    out_dir = _require(cfg, "out", "cooccur")
    manifest = _require(cfg, "data", "cooccur")
    from .data import cooccurrence_iou, load_dataset

    ds = load_dataset(manifest)
    docs = ds.split(cfg["split"])
    pairs = cooccurrence_iou(docs, ds.num_tropes)
    if cfg["top"] > 0:
        pairs = pairs[: cfg["top"]]
    ranked = [
        {"a": ds.trope_names[a], "b": ds.trope_names[b], "iou": v}
        for a, b, v in pairs
    ]
    for row in ranked[:5]:
        log.info("%.4f  %s / %s", row["iou"], row["a"], row["b"])
    report = {
        "command": "cooccur",
        "seed": cfg["seed"],
        "config": cfg,
        "pairs": ranked,
    }
    _write_report(out_dir, "cooccur_report.json", report)
    return EXIT_OK


GRADCHECK_KEYS = COMMON_KEYS + (
    ("eps", 1e-5),
    ("max_coords", 8),
    ("tolerance", 1e-4),
)


def cmd_gradcheck(args, file_cfg: dict) -> int:
    cfg = _resolve(args, file_cfg, GRADCHECK_KEYS)
    from .gradcheck import run_gradcheck

    results = run_gradcheck(
        seed=cfg["seed"], eps=cfg["eps"], max_coords=cfg["max_coords"]
    )
    tol = cfg["tolerance"]
    all_ok = True
    for r in results:
        ok = r.ok(tol)
        all_ok = all_ok and ok
        log.info(
            "%-22s max rel err %.3e  %-4s (%.2fs)",
            r.name, r.max_err, "ok" if ok else "FAIL", r.seconds,
        )
    if cfg["out"] is not None:
        report = {
            "command": "gradcheck",
            "seed": cfg["seed"],
            "config": cfg,
            "tolerance": tol,
            "checks": [
                {"name": r.name, "max_err": r.max_err, "ok": r.ok(tol)}
                for r in results
            ],
        }
        _write_report(cfg["out"], "gradcheck_report.json", report)
    return EXIT_OK if all_ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="mulcom",
        description="Multi-level trope detection over movie-synopsis features.",
    )
    ap.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", metavar="PATH",
        help="JSON file with the same keys as the flags; flags win",
    )
    common.add_argument("--seed", type=int, metavar="U64")
    common.add_argument("--out", metavar="DIR", help="artifact directory")
    common.add_argument(
        "--threads", type=int, metavar="N",
        help="numeric-backend thread cap (default 1, keeps runs byte-reproducible)",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a planted synthetic dataset")
    p.add_argument("--docs", type=int)
    p.add_argument("--token-tropes", type=int)
    p.add_argument("--motif-tropes", type=int)
    p.add_argument("--vocab", type=int)
    p.add_argument("--d-w", type=int)
    p.add_argument("--d-s", type=int)
    p.add_argument("--trigger-prob", type=float)
    p.add_argument("--filler-sents", type=int)
    p.add_argument("--filler-sent-len", type=int)
    p.add_argument("--val-frac", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train a model and write checkpoint + report")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--d-f", type=int)
    p.add_argument("--d-a", type=int)
    p.add_argument("--d-h", type=int)
    p.add_argument("--reasoner-steps", type=int)
    p.add_argument("--reasoner-heads", type=int)
    p.add_argument("--relation-reasoner", choices=("msrrn", "rrn"))
    p.add_argument("--streams", metavar="LIST",
                   help="comma-separated subset of word,sentence,relation")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--pos-weight", type=float,
                   help="positive-class loss multiplier (default: auto)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--early-stop-f1", type=float,
                   help="stop once val micro-F1 reaches this percentage")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on one split")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--split")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", parents=[common],
                       help="corpus statistics and trope prevalence")
    p.add_argument("--data", metavar="MANIFEST")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("cooccur", parents=[common],
                       help="trope co-occurrence ranking by overlap")
    p.add_argument("--data", metavar="MANIFEST")
    p.add_argument("--split")
    p.add_argument("--top", type=int, help="rows to keep (<= 0 keeps all)")
    p.set_defaults(func=cmd_cooccur)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference audit of every component")
    p.add_argument("--eps", type=float)
    p.add_argument("--max-coords", type=int)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        file_cfg = _load_config_file(args.config)
        threads = args.threads if args.threads is not None else file_cfg.get("threads", 1)
        if not isinstance(threads, int):
            raise ConfigError(f"threads must be an integer, got {threads!r}")
        _set_thread_caps(threads)
        return args.func(args, file_cfg)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MulComError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
