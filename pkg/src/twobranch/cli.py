"""Command-line interface: gen-data, train, eval, localize, retrieve, benchmark.

Exit status is 0 on success, 2 for usage errors, and otherwise a code per
failure category (see ``EXIT_CODES``); the category is also printed to
standard error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace

from . import benchmark as B
from . import config as C
from .branches import EmbeddingModel
from .checkpoint import CheckpointError, load_checkpoint
from .dataset import DatasetError
from .evaluation import localization_ranking, rank_candidates, pairwise_distances, score_matrix
from .geometry import iou
from .optim import ConfigError
from .pipeline import as_task, combined_reports, ensure_parent, evaluate, fit
from .report import (
    format_table,
    plot_comparison,
    plot_losses,
    recall_rows,
    write_jsonl,
    write_report,
)
from .storage import load_dataset, save_dataset
from .synthetic import SyntheticSpec, generate_synthetic

logger = logging.getLogger("twobranch")

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "dataset": 4,
    "dangling-id": 4,
    "dimension": 4,
    "checksum": 5,
    "missing-file": 6,
    "checkpoint": 7,
}


class UsageError(Exception):
    category = "usage"


def _ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or any(k < 1 for k in ks):
        raise argparse.ArgumentTypeError("K values must be positive integers")
    return ks


# -- gen-data ----------------------------------------------------------------


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    for f in fields(SyntheticSpec):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, action="store_true", default=None)
        elif f.name == "task":
            p.add_argument(flag, choices=("localization", "retrieval"), default=None)
        else:
            kind = int if f.type in ("int", int) else float
            p.add_argument(flag, type=kind, default=None, help=f"default {f.default}")


def cmd_gen_data(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(SyntheticSpec)
                 if getattr(args, f.name, None) is not None}
    try:
        spec = SyntheticSpec(**overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ds = generate_synthetic(spec)
    path = save_dataset(ds, args.out)
    with open(os.path.join(args.out, "synthetic-spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1, sort_keys=True)
    print(path)
    return 0


# -- train -------------------------------------------------------------------


def _run_config(args) -> C.RunConfig:
    if args.config and args.preset:
        raise UsageError("--config and --preset are mutually exclusive")
    cfg = C.load_preset(args.preset) if args.preset else C.load_config(args.config)
    if args.task:
        cfg = replace(cfg, task=args.task)
    if args.network:
        cfg = replace(cfg, model=replace(cfg.model, network=args.network))
    if args.preset and cfg.model.network == "similarity":
        # presets carry embedding-network neighborhood settings; a similarity run drops them
        cfg = replace(cfg, loss=replace(cfg.loss, lambdas_after=None),
                      sampling=replace(cfg.sampling, neighborhood=False))
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    if args.epochs is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    cfg = C.resolve(cfg)  # configuration errors surface before any data is read
    ds = load_dataset(args.manifest)
    for path in (args.out, args.metrics):
        if path:
            ensure_parent(path)
    model, records, cfg = fit(cfg, ds, args.split, metrics_path=args.metrics,
                              checkpoint_dir=args.checkpoint_dir, out=args.out)
    for r in records:
        print(f"epoch {r['epoch']:3d}  loss {r['loss']:.6f}  steps {r['steps']}")
    if args.report_dir and records:
        os.makedirs(args.report_dir, exist_ok=True)
        plot_losses(records, os.path.join(args.report_dir, "loss.png"), f"{cfg.task} training")
    print(f"wrote {args.out} (config {cfg.hash()[:12]})")
    return 0


# -- eval / localize / retrieve -------------------------------------------------


def _load(args):
    model, header = load_checkpoint(args.checkpoint)
    extra = header.get("extra", {})
    task = getattr(args, "task", None) or extra.get("task")
    if task is None:
        raise CheckpointError("checkpoint header does not record a task; pass --task")
    ds = as_task(load_dataset(args.manifest), task)
    if args.split:
        ds = ds.split(args.split)
    return model, header, task, ds


def cmd_eval(args) -> int:
    model, header, task, ds = _load(args)
    cfg = C.from_dict(header.get("extra", {}).get("config"))
    results = evaluate(model, ds, task, args.ks, args.direction and [args.direction],
                       args.max_proposals or cfg.eval.max_proposals, C.labeling(cfg))
    if args.alpha is not None:
        if task != "retrieval":
            raise UsageError("--alpha combines image-sentence and region-phrase distances (retrieval only)")
        if not args.region_checkpoint:
            raise UsageError("--alpha needs --region-checkpoint (a region-phrase embedding network)")
        region_model, _ = load_checkpoint(args.region_checkpoint)
        results += combined_reports(model, region_model, ds, args.alpha, args.ks,
                                    args.max_proposals or cfg.eval.max_proposals)
    rows = recall_rows(task, results)
    print(format_table(rows))
    if args.report_dir:
        write_report(args.report_dir, task, results)
    if args.records:
        ensure_parent(args.records)
        write_jsonl(args.records, rows)
    return 0


def cmd_localize(args) -> int:
    args.task = "localization"
    model, _, _, ds = _load(args)
    index = {p.phrase_id: k for k, p in enumerate(ds.phrases)}
    if args.phrase_id not in index:
        raise DatasetError(f"unknown phrase id {args.phrase_id!r}")
    k = index[args.phrase_id]
    ranked = localization_ranking(model, ds, k, args.max_proposals)
    gt = ds.gt_box(k)
    props = ds.images[ds.phrase_image(k)].proposals
    print(f"phrase {args.phrase_id}  image {ds.phrases[k].image_id}  gt {list(gt.as_tuple())}")
    print("rank  proposal  score        iou     box")
    for r, (j, s) in enumerate(zip(ranked.candidate_ids[:args.top], ranked.scores), start=1):
        box = props[j].box
        coords = ", ".join(f"{c:.1f}" for c in box.as_tuple())
        print(f"{r:4d}  {j:8d}  {s: .6f}  {iou(gt, box):.3f}   ({coords})")
    return 0


def cmd_retrieve(args) -> int:
    args.task = "retrieval"
    model, _, _, ds = _load(args)
    if args.query is None:
        results = evaluate(model, ds, "retrieval", args.ks, [args.direction])
        print(format_table(recall_rows("retrieval", results)))
        return 0
    if args.direction == "i2s":
        ids = [im.image_id for im in ds.images]
        if args.query not in ids:
            raise DatasetError(f"unknown image id {args.query!r}")
        q = ids.index(args.query)
        scores = score_matrix(model, ds.image_features[q:q + 1], ds.sentence_features)[0]
        cands = [s.sentence_id for s in ds.sentences]
    else:
        ids = [s.sentence_id for s in ds.sentences]
        if args.query not in ids:
            raise DatasetError(f"unknown sentence id {args.query!r}")
        q = ids.index(args.query)
        if args.direction == "s2i":
            scores = score_matrix(model, ds.image_features, ds.sentence_features[q:q + 1])[:, 0]
            cands = [im.image_id for im in ds.images]
        else:
            if not isinstance(model, EmbeddingModel):
                raise ConfigError("sentence-to-sentence retrieval needs an embedding network")
            emb = model.embed_texts(ds.sentence_features).data
            keep = [j for j in range(len(ids)) if j != q]
            scores = -pairwise_distances(emb[q:q + 1], emb[keep])[0]
            cands = [ids[j] for j in keep]
    order = rank_candidates(args.query, list(range(len(cands))), scores)
    print("rank  candidate          score")
    for r, (j, s) in enumerate(zip(order.candidate_ids[:args.top], order.scores), start=1):
        print(f"{r:4d}  {cands[j]:<16s}  {s: .6f}")
    return 0


# -- benchmark ------------------------------------------------------------------


def _bench_dirs(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_benchmark(args) -> int:
    out = _bench_dirs(args)
    rows, lines = [], []
    chosen = args.experiment or ["directions", "augmentation", "neighborhood", "networks"]
    if "directions" in chosen:
        r = B.retrieval_directions(args.seed)
        rows += B.summary_rows("directions", r)
        bi, single = r["bi-directional"]["recall"]["s2i"][1], r["single-directional"]["recall"]["s2i"][1]
        lines.append(f"directions: text-to-image R@1 bi-directional {bi:.3f} vs single-directional {single:.3f}")
        plot_comparison({"bi s2i": bi, "single s2i": single,
                         "bi i2s": r["bi-directional"]["recall"]["i2s"][1],
                         "single i2s": r["single-directional"]["recall"]["i2s"][1]},
                        os.path.join(out, "directions.png"), "R@1", "ranking loss directions")
    if "augmentation" in chosen:
        r = B.localization_augmentation(args.seed)
        rows += B.summary_rows("augmentation", r)
        a, s = r["augmented"]["recall"]["localization"][1], r["single-positive"]["recall"]["localization"][1]
        lines.append(f"augmentation: localization R@1 augmented {a:.3f} vs single positive {s:.3f}")
        plot_comparison({"augmented": a, "single positive": s}, os.path.join(out, "augmentation.png"),
                        "R@1", "positive augmentation (similarity network)")
    if "neighborhood" in chosen:
        r = B.neighborhood_constraints(tuple(range(args.seed, args.seed + 3)))
        wins = 0
        for seed, runs in r["seeds"].items():
            w, wo = runs["with-constraint"]["recall"]["s2s"][1], runs["without-constraint"]["recall"]["s2s"][1]
            wins += w >= wo
            rows += [dict(row, seed=seed) for row in B.summary_rows("neighborhood", runs)]
            lines.append(f"neighborhood seed {seed}: sentence-to-sentence R@1 with {w:.3f} vs without {wo:.3f}")
        lines.append(f"neighborhood: constraint run >= baseline on {wins}/3 seeds")
    if "networks" in chosen:
        for label, spec in (("default", SyntheticSpec(seed=args.seed)),
                            ("clustered", SyntheticSpec(seed=args.seed, **B.CLUSTERED_SPEC))):
            r = B.network_comparison(args.seed, spec)
            rows += [dict(row, data=label) for row in B.summary_rows("networks", r)]
            for d in ("i2s", "s2i"):
                e, s = r["embedding"]["recall"][d][1], r["similarity"]["recall"][d][1]
                verdict = "lower" if s < e else "not lower"
                lines.append(f"networks ({label} data) {d} R@1: embedding {e:.3f}, similarity {s:.3f} ({verdict})")
    write_jsonl(os.path.join(out, "benchmark.jsonl"), rows)
    with open(os.path.join(out, "benchmark.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twobranch", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset (manifest + feature files)")
    p.add_argument("--out", required=True, help="output directory")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an embedding or similarity network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=("localization", "retrieval"))
    p.add_argument("--network", choices=("embedding", "similarity"))
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", help="bundled config, e.g. desk-retrieval or desk-localization")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--split", default="train", help="split to train on (default: train)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch JSON-lines metrics file")
    p.add_argument("--checkpoint-dir", help="also write a checkpoint after every epoch")
    p.add_argument("--report-dir", help="write a loss-curve figure here")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Recall@K table for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ks", type=_ks, default=[1, 5, 10])
    p.add_argument("--direction", choices=("i2s", "s2i", "s2s"), help="retrieval direction (default: all)")
    p.add_argument("--alpha", type=float, help="also rank by the weighted global + region-phrase distance")
    p.add_argument("--region-checkpoint", help="region-phrase embedding network for --alpha")
    p.add_argument("--max-proposals", type=int)
    p.add_argument("--report-dir", help="write recall.txt, recall.jsonl and figures here")
    p.add_argument("--records", help="write JSON-lines recall records here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("localize", help="rank the proposals of one phrase's image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--phrase-id", required=True)
    p.add_argument("--split")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--max-proposals", type=int, default=200)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("retrieve", help="rank candidates for one query, or report recall for a direction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--direction", choices=("i2s", "s2i", "s2s"), required=True)
    p.add_argument("--query", help="image id (i2s) or sentence id (s2i, s2s)")
    p.add_argument("--split", default="test")
    p.add_argument("--ks", type=_ks, default=[1, 5, 10])
    p.add_argument("--top", type=int, default=10)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("benchmark", help="synthetic end-to-end comparisons of training variants")
    p.add_argument("--out", required=True, help="output directory for records and figures")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--experiment", action="append",
                   choices=("directions", "augmentation", "neighborhood", "networks"))
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError) as exc:
        category = getattr(exc, "category", "config" if isinstance(exc, ConfigError) else "usage")
        print(f"error [{category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(category, 1)


if __name__ == "__main__":
    sys.exit(main())
