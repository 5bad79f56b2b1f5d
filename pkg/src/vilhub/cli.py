"""Command-line entry point: ``vilhub <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 numeric failure,
4 gradient check failure. ``--config FILE`` supplies any flag as a JSON
key (dashes become underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import report
from .data import (SPLIT_NAMES, Dataset, GeneratorConfig, InvalidPixelError,
                   export_vocabularies, generate_synthetic_dataset, load_dataset,
                   pack_mask_pixel, save_dataset, split_dataset, unpack_mask_pixel)
from .embed import load_embeddings, synth_embeddings
from .encoder import EncoderParams, load_checkpoint, save_checkpoint
from .gradcheck import GAMMAS, TAUS, TOLERANCE, run_grad_check
from .metrics import (ConfusionAccumulator, ShapePrediction, class_average_accuracy,
                      gcr_evaluate, hubness_stats, miou, pointwise_accuracy)
from .retrieval import (CAPTION_PARTS, MAX_CLAUSES, ColorMap, RetrievalGallery,
                        RetrievalTrainConfig, caption_tables, embed_caption, embed_shapes,
                        evaluate_retrieval, generate_caption, save_gallery,
                        train_retrieval_head, write_captions)
from .trainer import TrainConfig, TrainingDiverged, ablate_gamma, predict, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4

log = logging.getLogger("vilhub")


class UsageError(Exception):
    pass


def _float_list(text: str) -> list:
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    p.add_argument("--config", help="JSON file of flag values; explicit flags override it")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _dataset_flag(p) -> None:
    p.add_argument("--data", help="dataset file written by gen-data")


def _embedding_flags(p) -> None:
    p.add_argument("--embed-dim", type=int, default=64, help="dimension of synthetic embeddings")
    p.add_argument("--embed-seed", type=int, default=0, help="seed of synthetic embeddings")
    p.add_argument("--part-embeddings", help="JSON or C3EM part-name embeddings")
    p.add_argument("--material-embeddings", help="JSON or C3EM material-name embeddings")


def _train_flags(p) -> None:
    d = TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-shapes", type=int, default=d.batch_shapes)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--lr-decay-factor", type=float, default=d.lr_decay_factor)
    p.add_argument("--lr-decay-every", type=int, default=d.lr_decay_every)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--use-prior", action="store_true", help="condition heads on the shape class")
    p.add_argument("--precision", choices=["train32", "check64"], default=d.precision)


def _eval_flags(p) -> None:
    _dataset_flag(p)
    p.add_argument("--checkpoint", help="checkpoint written by train")
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--use-prior", action="store_true",
                   help="the checkpoint was trained with the shape prior")
    p.add_argument("--tau", type=float, default=TrainConfig().tau)
    p.add_argument("--oracle", action="store_true", help="replace predictions with ground truth")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--timestamp", action="store_true", help="add a UTC timestamp to the report")
    _embedding_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vilhub", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = GeneratorConfig()
    p = sub.add_parser("gen-data", help="generate and split a synthetic dataset")
    _common(p)
    p.add_argument("--classes", type=int, default=g.n_shape_classes)
    p.add_argument("--parts", type=int, default=g.n_part_classes)
    p.add_argument("--materials", type=int, default=g.n_material_classes)
    p.add_argument("--shapes", type=int, default=g.shapes_total)
    p.add_argument("--points", type=int, default=g.points_per_shape)
    p.add_argument("--zipf", type=float, default=g.zipf_exponent)
    p.add_argument("--compositions", type=int, default=g.compositions_per_shape,
                   help="material assignments sharing one geometry")
    p.add_argument("--split-fractions", type=_float_list, default=[0.75, 0.1, 0.15],
                   help="train,valid,test fractions")
    p.add_argument("--vocab-dir", help="also export parts/materials/classes JSON here")
    p.add_argument("--out", help="dataset output path")

    p = sub.add_parser("train", help="train the encoder and write a checkpoint")
    _common(p)
    _dataset_flag(p)
    _train_flags(p)
    _embedding_flags(p)
    r = RetrievalTrainConfig()
    p.add_argument("--retrieval-epochs", type=int, default=r.epochs,
                   help="epochs for the retrieval head (0 skips it)")
    p.add_argument("--retrieval-lr", type=float, default=r.learning_rate)
    p.add_argument("--out", help="checkpoint output path")
    p.add_argument("--history", help="history JSONL path (default: <out>.history.jsonl)")

    for name, helptext in (("eval-seg", "segmentation accuracy and mIoU"),
                           ("eval-gcr", "grounded compositional recognition"),
                           ("eval-retrieval", "caption retrieval and shape classification")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _eval_flags(p)
        if name == "eval-gcr":
            p.add_argument("--iou-threshold", type=float, default=0.5)
        if name == "eval-retrieval":
            p.add_argument("--caption-parts", type=int, action="append", choices=CAPTION_PARTS,
                           help="caption length to evaluate (repeatable; default 1, 3 and 6)")
            p.add_argument("--gallery-out", help="write the gallery (C3GL) here")
            p.add_argument("--captions-out", help="write query captions (JSONL) here")

    p = sub.add_parser("ablate-gamma", help="train once per gamma and compare head/tail mIoU")
    _common(p)
    _dataset_flag(p)
    _train_flags(p)
    _embedding_flags(p)
    p.add_argument("--gammas", type=_float_list, default=[0.0, 1.0])
    p.add_argument("--split", choices=SPLIT_NAMES, default="test")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--timestamp", action="store_true")

    p = sub.add_parser("grad-check", help="finite-difference check of all analytic gradients")
    _common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--gamma", type=float, action="append",
                   help="gamma to cover (repeatable; default 0, 0.5 and 5)")
    p.add_argument("--tau", type=float, action="append",
                   help="tau to cover (repeatable; default 0.07 and 1)")
    p.add_argument("--coords-per-group", type=int, default=4)
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("pack-mask", help="pack (part, coarse, fine) ids into an RGB pixel")
    _common(p)
    p.add_argument("values", type=int, nargs=3, metavar="N")
    p.add_argument("--unpack", action="store_true", help="read R G B and print the three ids")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        try:
            values = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            sub.error(f"config file not found: {args.config}")
        except json.JSONDecodeError as exc:
            sub.error(f"config file {args.config} is not JSON: {exc}")
        if not isinstance(values, dict):
            sub.error("config file must hold a JSON object")
        known = {a.dest for a in sub._actions}
        values = {str(k).replace("-", "_"): v for k, v in values.items()}
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            sub.error(f"unknown config key {unknown[0]!r} for {args.command}")
        values.pop("config", None)
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _need(args, *names) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")


def _read_dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise UsageError(f"dataset not found: {path}")
    return load_dataset(path)


def _embeddings(args, ds: Dataset) -> dict:
    out = {}
    for key, vocab, path in (("part", ds.part_vocab, args.part_embeddings),
                             ("mat", ds.material_vocab, args.material_embeddings)):
        if path is None:
            out[key] = synth_embeddings(vocab, args.embed_dim, args.embed_seed)
        elif not Path(path).is_file():
            raise UsageError(f"embeddings not found: {path}")
        else:
            out[key] = load_embeddings(path, vocab)
    return out


def _train_config(args, seed: int) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_shapes=args.batch_shapes,
                       learning_rate=args.lr, lr_decay_factor=args.lr_decay_factor,
                       lr_decay_every=args.lr_decay_every, tau=args.tau, gamma=args.gamma,
                       use_prior=args.use_prior, seed=seed, precision=args.precision)


def _vocabs(ds: Dataset) -> dict:
    return {"shape": ds.shape_vocab, "part": ds.part_vocab, "material": ds.material_vocab}


def _emit(obj, args) -> None:
    if getattr(args, "timestamp", False):
        obj = dict(obj, timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat())
    if getattr(args, "out", None):
        report.write(obj, args.out)
    else:
        print(report.dumps(obj, indent=2))


def cmd_gen_data(args) -> int:
    _need(args, "out")
    cfg = GeneratorConfig(n_shape_classes=args.classes, n_part_classes=args.parts,
                          n_material_classes=args.materials, shapes_total=args.shapes,
                          points_per_shape=args.points, zipf_exponent=args.zipf, seed=args.seed,
                          compositions_per_shape=args.compositions)
    cfg.validate()
    ds = split_dataset(generate_synthetic_dataset(cfg), args.split_fractions, args.seed)
    save_dataset(ds, args.out)
    if args.vocab_dir:
        export_vocabularies(ds, args.vocab_dir)
    counts = ds.class_counts()
    splits = np.bincount(ds.split_of, minlength=3)
    print(f"wrote {len(ds)} shapes to {args.out} "
          f"(train {splits[0]}, valid {splits[1]}, test {splits[2]})")
    width = max(len(n) for n in ds.shape_vocab.names)
    for name, c in zip(ds.shape_vocab.names, counts):
        print(f"  {name:<{width}} {c:5d} {'#' * int(np.ceil(40 * c / counts.max()))}")
    return EXIT_OK


def cmd_train(args) -> int:
    _need(args, "data", "out")
    ds = _read_dataset(args.data)
    emb = _embeddings(args, ds)
    cfg = _train_config(args, args.seed)
    params, history = train(ds, emb, cfg)
    if args.retrieval_epochs > 0:
        vocabs, colors = _vocabs(ds), ColorMap.for_vocab(ds.material_vocab)
        tables = caption_tables(vocabs, colors, emb["part"], emb["mat"], args.embed_seed)
        shapes = ds.subset("train")
        targets = [embed_caption(generate_caption(s, vocabs, colors, MAX_CLAUSES), tables)
                   for s in shapes]
        rcfg = RetrievalTrainConfig(epochs=args.retrieval_epochs, learning_rate=args.retrieval_lr,
                                    tau=args.tau, seed=args.seed)
        params, _ = train_retrieval_head(params, shapes, np.array(targets), rcfg)
    save_checkpoint(params, args.out)
    history_path = args.history or f"{args.out}.history.jsonl"
    history.save(history_path)
    last = history.epochs[-1]
    print(f"trained {cfg.epochs} epochs; final total loss {last.total:.6f}; "
          f"checkpoint {args.out}; history {history_path}")
    return EXIT_OK


def _load_for_eval(args):
    _need(args, "data", "checkpoint")
    ds = _read_dataset(args.data)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    params = load_checkpoint(args.checkpoint)
    emb = _embeddings(args, ds)
    d = params.dims
    mismatch = [(what, a, b) for what, a, b in (
        ("part classes", d.n_part, len(ds.part_vocab)),
        ("material classes", d.n_mat, len(ds.material_vocab)),
        ("shape classes", d.n_shape, len(ds.shape_vocab)),
        ("embedding dimension", d.d, emb["part"].dim)) if a != b]
    if mismatch:
        what, a, b = mismatch[0]
        raise UsageError(f"checkpoint has {a} {what}, dataset/embeddings have {b}")
    shapes = ds.subset(args.split)
    if not shapes:
        raise UsageError(f"split {args.split!r} is empty")
    return ds, params, emb, shapes


def _predictions(args, params: EncoderParams, emb: dict, shapes):
    """Per-shape predictions and the class preference of each head.

    In oracle mode predictions are the ground truth and the preference is
    the (one-hot) label frequency.
    """
    if args.oracle:
        preds = [ShapePrediction(s.shape_class, s.part_labels, s.material_labels) for s in shapes]
        prefs = {}
        for key, attr in (("part", "part_labels"), ("mat", "material_labels")):
            labels = np.concatenate([getattr(s, attr) for s in shapes])
            prefs[key] = np.bincount(labels, minlength=len(emb[key])) / len(labels)
        return preds, prefs
    tables = {k: v.vectors.astype(params.dtype) for k, v in emb.items()}
    return predict(params, shapes, tables, args.tau, args.use_prior)


def _seg_block(pred_labels, gt_labels, n_classes, pref) -> dict:
    acc = ConfusionAccumulator(n_classes)
    for p, g in zip(pred_labels, gt_labels):
        acc.add(p, g)
    p, g = np.concatenate(pred_labels), np.concatenate(gt_labels)
    per_class, mean = miou(acc)
    var, top, entropy = hubness_stats(pref)
    return {"instance_acc": pointwise_accuracy(p, g),
            "class_avg_acc": class_average_accuracy(p, g, n_classes),
            "miou": mean, "per_class_iou": per_class,
            "pref_variance": var, "pref_max": top, "pref_entropy": entropy}


def cmd_eval_seg(args) -> int:
    ds, params, emb, shapes = _load_for_eval(args)
    preds, prefs = _predictions(args, params, emb, shapes)
    out = {"split": args.split, "n_shapes": len(shapes), "oracle": bool(args.oracle),
           "part": _seg_block([p.part_labels for p in preds], [s.part_labels for s in shapes],
                              len(ds.part_vocab), prefs["part"]),
           "material": _seg_block([p.material_labels for p in preds],
                                  [s.material_labels for s in shapes], len(ds.material_vocab),
                                  prefs["mat"])}
    _emit(out, args)
    return EXIT_OK


def cmd_eval_gcr(args) -> int:
    if not 0 < args.iou_threshold <= 1:
        raise UsageError("--iou-threshold must lie in (0, 1]")
    ds, params, emb, shapes = _load_for_eval(args)
    preds, _ = _predictions(args, params, emb, shapes)
    res = gcr_evaluate(preds, shapes, args.iou_threshold)
    out = dict(res.as_dict(), split=args.split, n_shapes=len(shapes), oracle=bool(args.oracle),
               iou_threshold=args.iou_threshold)
    _emit(out, args)
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    ds, params, emb, shapes = _load_for_eval(args)
    vocabs, colors = _vocabs(ds), ColorMap.for_vocab(ds.material_vocab)
    tables = caption_tables(vocabs, colors, emb["part"], emb["mat"], args.embed_seed)
    ids = ds.indices(args.split)
    parts = tuple(sorted(set(args.caption_parts))) if args.caption_parts else CAPTION_PARTS
    shape_embs = embed_shapes(params, shapes)
    if args.oracle:
        gallery_embs = np.array([embed_caption(generate_caption(s, vocabs, colors, MAX_CLAUSES),
                                               tables) for s in shapes])
    else:
        gallery_embs = shape_embs
    gallery = RetrievalGallery(gallery_embs, ids)
    out = evaluate_retrieval(gallery, shapes, vocabs, colors, tables, parts, shape_embs)
    out.update(split=args.split, n_shapes=len(shapes), oracle=bool(args.oracle))
    if args.gallery_out:
        save_gallery(gallery, args.gallery_out)
    if args.captions_out:
        write_captions([(int(i), k, generate_caption(s, vocabs, colors, k))
                        for k in parts for i, s in zip(ids, shapes)], args.captions_out)
    _emit(out, args)
    return EXIT_OK


def cmd_ablate_gamma(args) -> int:
    _need(args, "data")
    ds = _read_dataset(args.data)
    emb = _embeddings(args, ds)
    cfg = _train_config(args, args.seed)
    out = ablate_gamma(ds, emb, cfg, args.gammas, SPLIT_NAMES.index(args.split))
    _emit(out, args)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    rep = run_grad_check(seed=args.seed, instances=args.instances,
                         gammas=tuple(args.gamma or GAMMAS), taus=tuple(args.tau or TAUS),
                         coords_per_group=args.coords_per_group, corrupt=args.corrupt_gradient)
    width = max(len(k) for k in rep.worst)
    for name in sorted(rep.worst):
        err = rep.worst[name]
        print(f"{name:<{width}}  max_rel_err {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    print(f"{rep.instances} instances, {rep.checked} coordinates checked, "
          f"{rep.skipped} skipped at ReLU/max-pool switches, tolerance {TOLERANCE:g}")
    bad = rep.failures()
    if bad:
        print(f"gradient check failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_pack_mask(args) -> int:
    if args.unpack:
        print(*unpack_mask_pixel(*args.values))
    else:
        print(*pack_mask_pixel(*args.values))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval-seg": cmd_eval_seg,
    "eval-gcr": cmd_eval_gcr, "eval-retrieval": cmd_eval_retrieval,
    "ablate-gamma": cmd_ablate_gamma, "grad-check": cmd_grad_check, "pack-mask": cmd_pack_mask,
}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: training diverged at epoch {exc.epoch}, batch {exc.batch}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, InvalidPixelError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"vilhub {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
