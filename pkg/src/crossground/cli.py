"""Command-line driver: ``crossground {align,synth,train,eval,stats}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import shutil
import sys
from pathlib import Path

from crossground import __version__
from crossground.config import ConfigError, RunConfig, load_config
from crossground.evalbench import (
    THRESHOLDS,
    EvalError,
    evaluate,
    render_report,
    run_method,
    write_predictions,
    _threads,
)
from crossground.geometry import GeometryError, axis_align
from crossground.groundnet.training import TrainingError, load_checkpoint, new_model, save_checkpoint, train
from crossground.scenedata import SPLITS, Corpus, DataError, compute_stats, load_corpus, load_scene, save_corpus, save_scene
from crossground.synth import generate_synthetic

log = logging.getLogger("crossground")

USAGE, FAILURE = 2, 1


class UsageError(Exception):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


# -- align ------------------------------------------------------------------------------

def cmd_align(args) -> int:
    src, dst = Path(args.input), Path(args.out)
    if not src.is_dir():
        raise UsageError(f"input directory {src} does not exist")
    scene_dir = src / "scenes" if (src / "scenes").is_dir() else src
    out_dir = dst / "scenes" if scene_dir != src else dst
    out_dir.mkdir(parents=True, exist_ok=True)
    if scene_dir != src:
        # corpus layout: carry the refer files and corpus metadata along
        for extra in sorted(src.iterdir()):
            if extra.is_file():
                shutil.copyfile(extra, dst / extra.name)
    failures, records = [], []
    for path in sorted(scene_dir.glob("*.json")):
        try:
            scene = load_scene(path)
            t, aligned = axis_align(scene)
            save_scene(aligned, out_dir / path.name)
        except (GeometryError, DataError, OSError) as exc:
            log.error("scene %s: %s", path.stem, exc)
            failures.append(path.stem)
            continue
        records.append({
            "scene_id": scene.scene_id,
            "yaw_deg": math.degrees(t.yaw),
            "translation": t.translation.tolist(),
            "matrix": t.as_matrix().tolist(),
        })
    with open(dst / "transforms.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    print(f"aligned {len(records)} scenes, {len(failures)} failed")
    if failures:
        print("failed scenes: " + ", ".join(failures), file=sys.stderr)
        return FAILURE
    return 0


# -- synth ------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    source, target = generate_synthetic(cfg.synth, cfg.shift, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tag, corpus in (("source", source), ("target", target)):
        meta = dict(corpus.config or {}, run_config=cfg.to_dict())
        save_corpus(Corpus(corpus.name, corpus.splits, meta), out / tag)
    _dump_json(out / "config.json", cfg.to_dict())
    for tag, corpus in (("source", source), ("target", target)):
        sizes = ", ".join(f"{s}={len(corpus[s].expressions)}" for s in SPLITS)
        print(f"{tag}: {corpus.name} ({sizes})")
    return 0


# -- train ------------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = load_corpus(args.source)
    dataset = corpus["train"]
    model = new_model(cfg.model, dataset)
    ckpt = Path(args.ckpt)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else ckpt.with_name(ckpt.name + ".loss.csv")
    result = train(
        model, dataset, cfg.train, cfg.providers(), cfg.retrieval, cfg.proposals,
        log_path=log_path, max_steps=args.max_steps,
    )
    meta = {"config": cfg.to_dict(), "source": corpus.name, "steps": result.steps}
    save_checkpoint(ckpt, model, meta)
    final = result.log[-1]["total"] if result.log else float("nan")
    print(f"trained {result.steps} steps on {corpus.name}; final loss {final:.4f}; checkpoint {ckpt}")
    return 0


# -- eval -------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, run_meta = load_checkpoint(args.ckpt)
    if args.config is not None or args.set:
        cfg = _config(args)
    else:
        cfg = RunConfig.from_dict(run_meta.get("config"))
    if cfg.model.m != model.config.m or cfg.model.c != model.config.c:
        raise ConfigError("config model.m / model.c disagree with the checkpoint")
    corpus = load_corpus(args.target, threads=_threads())
    dataset = corpus[args.split]
    method = args.baseline or "model"
    providers = cfg.providers()

    def run(name):
        preds = run_method(name, dataset, model, providers, cfg.retrieval, cfg.proposals, cfg.seed, model.config.m)
        meta = {"dataset": dataset.name, "split": args.split, "method": name, "config": cfg.to_dict()}
        return preds, evaluate(preds, dataset, meta)

    preds, report = run(method)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_report(report, "json"), encoding="utf-8")
    text = render_report(report, "text", title=f"{method} on {dataset.name}/{args.split}")
    out.with_name(out.name + ".txt").write_text(text, encoding="utf-8")
    write_predictions(out.with_name(out.name + ".predictions.jsonl"), preds)
    print(text, end="")

    if method == "objdetbest":
        _, model_report = run("model")
        ok = True
        for t in THRESHOLDS:
            bound, got = report.acc("overall", t), model_report.acc("overall", t)
            holds = bound >= got
            ok &= holds
            print(f"upper bound Acc@{t:g}: objdetbest {bound:.4f} >= model {got:.4f}: {'ok' if holds else 'VIOLATED'}")
        if not ok:
            return FAILURE
    return 0


# -- stats ------------------------------------------------------------------------------

def cmd_stats(args) -> int:
    root = Path(args.dataset)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} does not exist")
    corpus = load_corpus(root)
    table = {}
    everything = []
    for split in SPLITS:
        exprs = list(corpus.splits[split].expressions) if split in corpus.splits else []
        everything.extend(exprs)
        table[split] = compute_stats(exprs).to_json()
    table["all"] = compute_stats(everything).to_json()
    if args.format == "json":
        sys.stdout.write(json.dumps({"dataset": corpus.name, "stats": table}, indent=1, sort_keys=True) + "\n")
        return 0
    fields = list(table["all"])
    cols = list(table)
    lines = [f"dataset {corpus.name}", f"{'':18s}" + "".join(f"{c:>12s}" for c in cols)]
    for f in fields:
        cells = []
        for c in cols:
            v = table[c][f]
            cells.append(f"{v:12d}" if isinstance(v, int) else f"{v:12.2f}")
        lines.append(f"{f:18s}" + "".join(cells))
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossground", description="Cross-dataset 3D visual grounding toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required):
        sp.add_argument("--config", required=required, help="YAML or JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")

    a = sub.add_parser("align", help="axis-align every scene in a directory")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_align)

    s = sub.add_parser("synth", help="generate a synthetic source/target corpus pair")
    with_config(s, True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a grounding model on a source corpus")
    with_config(t, True)
    t.add_argument("--source", required=True)
    t.add_argument("--ckpt", required=True)
    t.add_argument("--log", help="loss log CSV (default: <ckpt>.loss.csv)")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or baseline on a corpus split")
    with_config(e, False)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", default="val", choices=SPLITS)
    e.add_argument("--baseline", choices=("random", "objdetbest", "objoracle"))
    e.set_defaults(func=cmd_eval)

    st = sub.add_parser("stats", help="corpus statistics")
    st.add_argument("--dataset", required=True)
    st.add_argument("--format", default="text", choices=("text", "json"))
    st.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"crossground: usage error: {exc}", file=sys.stderr)
        return USAGE
    except (TrainingError, EvalError, DataError, GeometryError, OSError, ValueError) as exc:
        print(f"crossground: error: {exc}", file=sys.stderr)
        return FAILURE


if __name__ == "__main__":
    sys.exit(main())
