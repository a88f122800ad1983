"""Command line: ``nbnlkit {extract,train,eval,da,bench}``."""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (Dataset, FeatureBag, FormatError, InvalidInputError,
                   InvalidParameterError, NumericalFailureError,
                   StandardizationStats, worker_count)
from .evaluation import (METHODS, ML3Model, NbnnClassifier, da_run, evaluate,
                         fit_model)
from .formats import (BAG_MAGIC, MODEL_MAGIC, read_bags, read_model,
                      read_stats_json, write_bags, write_model,
                      write_stats_json)
from .i2c import NbnnModel
from .ml3 import class_scores, parse_q
from .patchgrid import (ExtractionError, PatchPlanConfig, PatchSpec,
                        finish_bag, make_extractor, raw_descriptors,
                        read_image)
from .stoml3 import PatchArray, init_trainer, train
from .synthetic import example_stream, xor_clusters

log = logging.getLogger("nbnlkit")

IMAGE_SUFFIXES = {".png", ".pgm", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _q_arg(text: str) -> float:
    try:
        return parse_q(text)
    except (ValueError, InvalidParameterError) as exc:
        raise argparse.ArgumentTypeError(str(exc))


# ---------------------------------------------------------------------------
# extract


def _list_images(root: Path) -> list[tuple[str, Path, Optional[int]]]:
    """(image_id, path, label) for a single image, a flat folder, or one subfolder per class."""
    if root.is_file():
        return [(root.name, root, None)]
    if not root.is_dir():
        raise InvalidInputError(f"{root} does not exist")
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    items = []
    if classes:
        for y, cls in enumerate(classes):
            for p in sorted(cls.iterdir()):
                if p.suffix.lower() in IMAGE_SUFFIXES:
                    items.append((f"{cls.name}/{p.name}", p, y))
            log.info("class %d = %s", y + 1, cls.name)
    else:
        items = [(p.name, p, None) for p in sorted(root.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    if not items:
        raise InvalidInputError(f"no images found under {root}")
    return items


def _resolve_stats(args, fit_on: np.ndarray) -> Optional[StandardizationStats]:
    if args.stats and Path(args.stats).exists():
        return read_stats_json(args.stats)
    if not args.standardize:
        return None
    stats = StandardizationStats(fit_on.mean(axis=0), fit_on.std(axis=0))
    out = args.stats or f"{args.out}.stats.json"
    write_stats_json(out, stats)
    log.info("standardization statistics written to %s", out)
    return stats


def cmd_extract(args) -> int:
    config = PatchPlanConfig(args.min_patch, args.levels, args.target_patches,
                             args.level0, args.position_weight)
    if args.extractor == "precomputed":
        raw = read_bags(args.input)
        stats = _resolve_stats(args, np.concatenate([b.patches for b in raw.bags]))
        bags = []
        for b in raw.bags:
            specs = [PatchSpec(0, 0, 0, 0, 0, float(cx), float(cy))
                     for cx, cy in (b.positions if b.positions is not None else np.full((b.n, 2), 0.5))]
            bag = finish_bag(b.image_id, specs, b.patches, config, stats, b.label, args.unit_norm)
            if b.positions is None:
                bag = FeatureBag(bag.image_id, bag.patches, bag.label, None)
            bags.append(bag)
        dataset = Dataset(tuple(bags), bags[0].d, raw.c)
    else:
        extractor = make_extractor(args.extractor, args.dim, args.seed)
        items = _list_images(Path(args.input))

        def describe(item):
            image_id, path, _ = item
            try:
                return raw_descriptors(read_image(path), config, extractor)
            except ExtractionError as exc:
                raise ExtractionError(f"{image_id}: {exc}")

        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            raw = list(pool.map(describe, items))
        stats = _resolve_stats(args, np.concatenate([X for _, X in raw]))
        if stats is not None and stats.d != extractor.dim:
            raise InvalidInputError(f"statistics dimension {stats.d} != extractor dimension {extractor.dim}")
        bags = [finish_bag(image_id, specs, X, config, stats, label, args.unit_norm)
                for (image_id, _, label), (specs, X) in zip(items, raw)]
        labels = [b.label for b in bags if b.label is not None]
        dataset = Dataset(tuple(bags), bags[0].d, max(labels) + 1 if labels else 0)
    write_bags(args.out, dataset, args.format)
    print(f"bags={dataset.m} patches={sum(b.n for b in dataset.bags)} dim={dataset.d} classes={dataset.c}")
    return 0


# ---------------------------------------------------------------------------
# train / eval / da


def _hyperparams(args) -> dict:
    return dict(k=args.k, lam=args.lam, q=args.q, epochs=args.epochs, batch=args.batch,
                init_scale=args.init_scale, standardize_inputs=args.standardize)


def _save_model(model, path: str, fmt: str) -> None:
    if isinstance(model, ML3Model):
        write_model(path, model.W, model.stats)
        return
    sup = model.model
    bags = tuple(FeatureBag(f"class:{y + 1}", s, y) for y, s in enumerate(sup.supports))
    write_bags(path, Dataset(bags, sup.d, sup.c), fmt)
    sidecar = Path(f"{path}.stats.json")
    if model.stats is not None:
        write_stats_json(sidecar, model.stats)
    elif sidecar.exists():
        sidecar.unlink()


def _load_model(path: str, use_kdtree: bool = False):
    with open(path, "rb") as f:
        head = f.read(4)
    if head == MODEL_MAGIC:
        W, stats = read_model(path)
        return ML3Model(W, stats)
    if head == BAG_MAGIC or head[:1] == b"{":
        ds = read_bags(path)
        supports = [None] * ds.c
        for b in ds.bags:
            if b.label is None:
                raise FormatError(f"support bag {b.image_id!r} has no class label")
            supports[b.label] = b.patches if supports[b.label] is None else np.vstack([supports[b.label], b.patches])
        sidecar = Path(f"{path}.stats.json")
        stats = read_stats_json(sidecar) if sidecar.exists() else None
        return NbnnClassifier(NbnnModel(tuple(supports), ds.d, ds.c, use_kdtree), stats)
    raise FormatError(f"{path}: unrecognized model file", 0)


def cmd_train(args) -> int:
    data = read_bags(args.input)
    t0 = time.perf_counter()
    model = fit_model(data, args.method, seed=args.seed, use_kdtree=False, **_hyperparams(args))
    _save_model(model, args.out, args.format)
    print(f"method={args.method} bags={data.m} seconds={time.perf_counter() - t0:.3f} out={args.out}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.model, args.kdtree)
    predictor = args.predictor or ("nbnl" if isinstance(model, ML3Model) else "nbnn")
    if (predictor == "nbnl") != isinstance(model, ML3Model):
        raise InvalidInputError(f"predictor {predictor!r} does not match the model in {args.model}")
    test = read_bags(args.input)
    report = evaluate(model.predictor(args.q), test)
    print(report.format())
    return 0


def cmd_da(args) -> int:
    source = read_bags(args.source)
    target = read_bags(args.target)
    params = _hyperparams(args)
    params["use_kdtree"] = args.kdtree
    report, train_set, test = da_run(source, target, args.labeled_target, args.method, params,
                                     args.seed, args.predict_q)
    print(f"train_bags={train_set.m} test_bags={test.m}")
    print(report.format())
    return 0


# ---------------------------------------------------------------------------
# bench


def _xor_accuracy(k: int, seed: int) -> tuple[float, float, list]:
    from .core import cap_norm

    X, y = xor_clusters(2000, 0.2, seed)
    Xt, yt = xor_clusters(2000, 0.2, seed + 1)
    X, Xt = cap_norm(X), cap_norm(Xt)
    state = init_trainer(2, k, 2, lam=1e-3, q=2.0, seed=seed)
    rep = train(PatchArray(X, y), epochs=20, batch_size=50, shuffle_seed=seed, state=state)
    W = rep.W.W
    acc = float((class_scores(W, X, 2.0).argmax(axis=1) == y).mean())
    acc_t = float((class_scores(W, Xt, 2.0).argmax(axis=1) == yt).mean())
    return acc, acc_t, rep.epoch_loss


def throughput(n: int, d: int, k: int, c: int, batch: int, seed: int = 0) -> float:
    """Mean seconds per minibatch update over one streamed epoch of ``n`` examples."""
    state = init_trainer(d, k, c, lam=1.0, q=2.0, seed=seed)
    rep = train(example_stream(n, d, c, seed=seed), epochs=1, batch_size=batch, state=state)
    return rep.seconds_per_update


def cmd_bench(args) -> int:
    for k in (4, 1):
        acc, acc_t, losses = _xor_accuracy(k, args.seed)
        print(f"xor k={k} train_acc={acc:.4f} heldout_acc={acc_t:.4f} "
              f"loss_epoch1={losses[0]:.4f} loss_epoch20={losses[-1]:.4f}")
    times = {}
    for k in (args.k, 2 * args.k):
        t0 = time.perf_counter()
        times[k] = throughput(args.examples, 64, k, 20, args.batch, args.seed)
        print(f"stream examples={args.examples} d=64 k={k} c=20 batch={args.batch} "
              f"seconds={time.perf_counter() - t0:.2f} per_update_ms={1e3 * times[k]:.3f}")
    print(f"per_update_ratio_k{2 * args.k}_over_k{args.k}={times[2 * args.k] / times[args.k]:.3f}")
    return 0


# ---------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, default="stoml3")
    p.add_argument("--k", type=int, default=10, help="prototypes per class")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--q", type=_q_arg, default=2.0, help="training smoothness (default 2)")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-scale", type=float, default=0.01)
    p.add_argument("--standardize", action="store_true",
                   help="fit per-dimension standardization on the training bags and store it in the model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nbnlkit", description="NBNN / sNBNL image classification over feature bags")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="images (or precomputed features) to a bag file")
    p.add_argument("--in", dest="input", required=True,
                   help="image, folder of images, folder of class subfolders, or a bag file for --extractor precomputed")
    p.add_argument("--out", required=True)
    p.add_argument("--min-patch", type=int, choices=(16, 32, 64), default=32)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--target-patches", type=int, choices=(100, 400), default=100)
    p.add_argument("--level0", action="store_true", help="add the whole image as one extra patch")
    p.add_argument("--extractor", choices=("downsample", "randproj", "precomputed"), default="downsample")
    p.add_argument("--dim", type=int, default=64, help="randproj output dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--position-weight", type=float, default=1.0)
    p.add_argument("--unit-norm", action="store_true", help="normalize descriptors to unit norm instead of capping")
    p.add_argument("--standardize", action="store_true", help="standardize raw descriptors before capping")
    p.add_argument("--stats", help="standardization JSON to apply (if it exists) or write")
    p.add_argument("--format", choices=("bin", "jsonl"), default="bin")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="fit NBNN supports or STOML3 prototypes")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("bin", "jsonl"), default="bin", help="support file format for nbnn")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a model on a bag file")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--predictor", choices=("nbnn", "nbnl"))
    p.add_argument("--q", type=_q_arg, default=math.inf, help="prediction smoothness (default inf)")
    p.add_argument("--kdtree", action="store_true", help="exact k-d tree search for nbnn")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("da", help="source-only / few-labeled-target domain adaptation run")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--labeled-target", type=int, default=0)
    p.add_argument("--predict-q", type=_q_arg, default=math.inf)
    p.add_argument("--kdtree", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_da)

    p = sub.add_parser("bench", help="XOR benchmark and streaming throughput")
    p.add_argument("--examples", type=int, default=100_000)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--batch", type=int, default=2500)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (InvalidInputError, InvalidParameterError, FormatError, NumericalFailureError,
            ExtractionError, OSError) as exc:
        print(f"nbnlkit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
