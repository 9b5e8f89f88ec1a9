"""Command-line entry point: ``aseg gen | train | eval | ablate | offset | score``.

Exit codes: 0 success, 1 I/O failure, 2 usage or config error, 3 numeric
abort during training, 4 incompatible checkpoint.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, dump_config, load_config, parse_grid
from .metrics import dsc, evaluate_batch, nsd
from .phantoms import export, generate, load_dataset, read_pgm, split

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4

log = logging.getLogger("aseg")


class UsageError(Exception):
    pass


class Incompatible(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def threads_from_env() -> int:
    raw = os.environ.get("ASEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ASEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ASEG_THREADS must be a positive integer, got {raw!r}")
    return n


# -- run manifest ---------------------------------------------------------------------


def code_hash() -> str:
    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*")):
        if p.suffix in (".py", ".json") and "__pycache__" not in p.parts:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def input_hash(paths) -> str:
    """Hash of input files (a dataset index or checkpoint manifest is enough to pin content)."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p]
        for f in files:
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, args: dict, config: dict | None, config_path, inputs=()) -> dict:
    snapshot = {"command": command, "args": args, "config": config}
    h = hashlib.sha256()
    h.update(code_hash().encode())
    h.update(json.dumps(snapshot, sort_keys=True, default=str).encode())
    h.update(input_hash(inputs).encode())
    manifest = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "resolved": snapshot,
        "hash": h.hexdigest(),
        "out_dir": str(out),
        "version": __version__,
        "started": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return manifest


def finish_manifest(out: Path) -> None:
    path = out / "manifest.json"
    m = json.loads(path.read_text())
    m["finished"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    path.write_text(json.dumps(m, indent=1, sort_keys=True))


# -- helpers ----------------------------------------------------------------------------


def _config(args, **extra):
    overrides = dict(extra)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _data(path) -> list:
    p = Path(path)
    if not (p / "index.json").is_file():
        raise UsageError(f"no dataset index at {p / 'index.json'}")
    return load_dataset(p)


def _select(samples, which: str, train_frac: float):
    if which == "all":
        return samples
    tr, ev = split(samples, train_frac)
    return tr if which == "train" else ev


def _check_compat(cfg, samples) -> None:
    K = samples[0].masks.shape[0]
    H, W = samples[0].masks.shape[1:]
    if K != cfg.num_classes or (H, W) != (cfg.H, cfg.W):
        raise Incompatible(f"checkpoint expects K={cfg.num_classes}, {cfg.H}x{cfg.W}; data has K={K}, {H}x{W}")


def _load_ckpt(path):
    from .train import CheckpointError, load_model

    try:
        return load_model(path)
    except (CheckpointError, KeyError, ValueError, FileNotFoundError) as exc:
        raise Incompatible(f"cannot load checkpoint {path}: {exc}") from None


def _write_table(out: Path, stem: str, table) -> None:
    (out / f"{stem}.json").write_text(json.dumps(table.to_dict(), indent=1, sort_keys=True))
    (out / f"{stem}.txt").write_text(table.to_text() + "\n")
    print(table.to_text())


# -- commands ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    extra = {"num_samples": args.n} if args.n is not None else {}
    if args.seed is not None:
        extra["data_seed"] = args.seed
    cfg = load_config(args.config, extra)
    out = Path(args.out)
    write_manifest(out, "gen", {"n": cfg.num_samples}, cfg.to_dict(), args.config)
    samples = generate(cfg.phantom_config(), cfg.num_samples)
    export(samples, out, cfg.phantom_config())
    finish_manifest(out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainingAborted, train

    extra = {"epochs": args.epochs} if args.epochs is not None else {}
    cfg = _config(args, **extra)
    samples = _data(args.data)
    _check_compat(cfg, samples)
    out = Path(args.out)
    write_manifest(out, "train", {"data": args.data, "resume": args.resume}, cfg.to_dict(), args.config,
                   [Path(args.data) / "index.json"])
    (out / "config.txt").write_text(dump_config(cfg))
    if args.resume is not None:
        from .train import CheckpointError, read_manifest

        try:
            read_manifest(args.resume)
        except CheckpointError as exc:
            raise Incompatible(str(exc)) from None
    try:
        res = train(cfg, samples, out_dir=out, resume=args.resume, threads=threads_from_env(),
                    on_epoch=lambda r: print(f"epoch {r.epoch:3d}  loss {r.mean_loss:.4f}  "
                                             f"DSC {r.metrics.mean_dsc:.3f}  NSD {r.metrics.mean_nsd:.3f}  "
                                             f"lr {r.lr:.3g}", flush=True))
    except TrainingAborted as exc:
        print(f"error: {exc}; batch dump at {exc.dump}", file=sys.stderr)
        return EXIT_NUMERIC
    if res.history:
        (out / "metrics.json").write_text(json.dumps(res.final.to_dict(), indent=1, sort_keys=True))
    finish_manifest(out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import PreparedData, evaluate

    model, cfg, _ = _load_ckpt(args.checkpoint)
    samples = _data(args.data)
    _check_compat(cfg, samples)
    out = Path(args.out)
    write_manifest(out, "eval", {"checkpoint": args.checkpoint, "data": args.data, "split": args.split,
                                 "classes": args.classes}, cfg.to_dict(), None,
                   [Path(args.checkpoint), Path(args.data) / "index.json"])
    classes = None
    if args.classes:
        classes = [int(c) for c in args.classes.split(",")]
        bad = [c for c in classes if not 0 <= c < cfg.num_classes]
        if bad:
            raise UsageError(f"classes {bad} outside [0, {cfg.num_classes})")
    data = PreparedData(_select(samples, args.split, cfg.train_frac), model, need_dmaps=False)
    report = evaluate(model, data, args.tau if args.tau is not None else cfg.tau, classes=classes)
    text = json.dumps(report.to_dict(), indent=1, sort_keys=True)
    (out / "metrics.json").write_text(text + "\n")
    finish_manifest(out)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import TrainingAborted, run_ablation

    cfg = _config(args)
    gp = Path(args.grid)
    if not gp.is_file():
        raise UsageError(f"grid file not found: {gp}")
    labels, deltas = parse_grid(gp.read_text(), str(gp))
    for d in deltas:
        try:
            cfg.replace(**d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    samples = _data(args.data) if args.data else None
    out = Path(args.out)
    write_manifest(out, "ablate", {"grid": [dict(zip(("label", "delta"), (lab, {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()})))
                                            for lab, d in zip(labels, deltas)], "data": args.data},
                   cfg.to_dict(), args.config, [gp] + ([Path(args.data) / "index.json"] if args.data else []))
    try:
        table = run_ablation(cfg, deltas, samples, title=args.title, labels=labels, threads=threads_from_env())
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_table(out, "ablation", table)
    finish_manifest(out)
    return EXIT_OK


def cmd_offset(args) -> int:
    from .train import PreparedData, box_offset_study, parse_offsets

    try:
        offsets = parse_offsets(args.offsets)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model, cfg, _ = _load_ckpt(args.checkpoint)
    if cfg.prompt_mode != "box":
        raise Incompatible("the offset study needs a checkpoint trained with prompt_mode = box")
    samples = _data(args.data)
    _check_compat(cfg, samples)
    out = Path(args.out)
    write_manifest(out, "offset", {"checkpoint": args.checkpoint, "data": args.data, "offsets": offsets,
                                   "split": args.split}, cfg.to_dict(), None,
                   [Path(args.checkpoint), Path(args.data) / "index.json"])
    data = PreparedData(_select(samples, args.split, cfg.train_frac), model, need_dmaps=False)
    _write_table(out, "offset", box_offset_study(model, data, offsets, cfg.tau))
    finish_manifest(out)
    return EXIT_OK


def _read_mask(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"mask file not found: {p}")
    return (read_pgm(p) > 127).astype(np.uint8)


def cmd_score(args) -> int:
    if args.pairs:
        index_path = Path(args.pairs)
        if not index_path.is_file():
            raise UsageError(f"pairs index not found: {index_path}")
        entries = json.loads(index_path.read_text())
        base = index_path.parent
        gts = [_read_mask(base / e["gt"]) for e in entries]
        preds = [_read_mask(base / e["pred"]) for e in entries]
        classes = [int(e.get("class", 0)) for e in entries]
        report = evaluate_batch(preds, gts, classes, args.tau).to_dict()
        text = json.dumps(report, indent=1, sort_keys=True)
    else:
        if not (args.gt and args.pred):
            raise UsageError("score needs GT and PRED masks, or --pairs")
        g, s = _read_mask(args.gt), _read_mask(args.pred)
        if g.shape != s.shape:
            raise UsageError(f"mask shapes differ: {g.shape} vs {s.shape}")
        report = evaluate_batch([s], [g], [0], args.tau).to_dict()
        text = json.dumps(report, indent=1, sort_keys=True) if args.json else \
            f"DSC {100.0 * dsc(g, s):.3f} NSD {100.0 * nsd(g, s, args.tau):.3f}"
    if args.out:
        out = Path(args.out)
        write_manifest(out, "score", {"gt": args.gt, "pred": args.pred, "pairs": args.pairs, "tau": args.tau},
                       None, None, [p for p in (args.gt, args.pred, args.pairs) if p])
        (out / "score.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        finish_manifest(out)
    print(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aseg", description="Class-prompted segmentation on synthetic phantoms.")
    p.add_argument("--version", action="version", version=f"aseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=out_required, help="output directory; nothing is written elsewhere")

    g = sub.add_parser("gen", help="generate a phantom dataset")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--n", type=int, help="number of samples (overrides num_samples)")
    common(g)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("eval", "train", "all"), default="eval",
                   help="part of the dataset to score (default: the held-out part)")
    e.add_argument("--classes", help="comma-separated class ids to report")
    e.add_argument("--tau", type=float)
    common(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train a grid of config variants")
    a.add_argument("--config")
    a.add_argument("--grid", required=True, help="one variant per line: 'label: key=value ...'")
    a.add_argument("--data", help="dataset directory (default: generate from the config)")
    a.add_argument("--title", default="Ablation")
    common(a)
    a.set_defaults(func=cmd_ablate)

    o = sub.add_parser("offset", help="box-offset study for a box-prompted checkpoint")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--data", required=True)
    o.add_argument("--offsets", default="0,5,15,30,50,IB")
    o.add_argument("--split", choices=("eval", "train", "all"), default="eval")
    common(o)
    o.set_defaults(func=cmd_offset)

    s = sub.add_parser("score", help="DSC and NSD of PGM mask pairs")
    s.add_argument("gt", nargs="?")
    s.add_argument("pred", nargs="?")
    s.add_argument("--pairs", help="JSON list of {gt, pred, class} entries, paths relative to the file")
    s.add_argument("--tau", type=float, default=2.0)
    s.add_argument("--json", action="store_true", help="print the full report as JSON")
    common(s, out_required=False)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        threads_from_env()
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Incompatible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
