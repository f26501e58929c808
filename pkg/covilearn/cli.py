"""`covilearn` command line: train, eval, predict, serve, inspect, compare, synthesize."""

import argparse
from collections.abc import Sequence
import logging
from pathlib import Path
import sys

import numpy as np
from pydantic import ValidationError

from covilearn.architectures import (
    DNN_TAGS,
    HEAD_KINDS,
    PUBLISHED_TOTALS,
    assemble_model,
    parameter_table,
    total_parameters,
    trainable_parameters,
)
from covilearn.config import AugmentPolicy, ServiceConfig, TrainConfig, configure_logging
from covilearn.dataset import load_samples, read_manifest, split_80_20, write_manifest
from covilearn.errors import CovilearnError
from covilearn.evaluation import evaluate, write_report, write_roc_csv
from covilearn.imaging import dataset_mean, load_image, preprocess
from covilearn.service import serve
from covilearn.synthetic import write_synthetic_dataset
from covilearn.training import predict, train, write_history
from covilearn.weights import initialize_parameters, load_weights, save_weights

logger = logging.getLogger(__name__)

DEFAULT_VARIANT = "densenet121-gapdense"


def _mean(text: str) -> tuple[float, float, float]:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got '{text}'")
    return (parts[0], parts[1], parts[2])


def _add_model_args(parser: argparse.ArgumentParser, *, weights_required: bool = True) -> None:
    parser.add_argument("--variant", default=DEFAULT_VARIANT, help="backbone[-gapdense|-alg1conv] or DNN-I..DNN-IV")
    parser.add_argument("--conv-method", choices=("direct", "gemm"), default="direct")
    if weights_required:
        parser.add_argument("--weights", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covilearn", description="Transfer-learning chest X-ray screening.")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    verbs = parser.add_subparsers(dest="verb", required=True, metavar="verb")

    p = verbs.add_parser("train", help="train the head on a manifest's train split")
    p.add_argument("--manifest", type=Path, required=True)
    _add_model_args(p, weights_required=False)
    p.add_argument("--head", choices=HEAD_KINDS, default=None, help="override the head encoded in --variant")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--subtract-mean", action="store_true")
    p.add_argument("--mean", type=_mean, default=None, help="per-channel mean override, e.g. 0.5,0.5,0.5")
    p.add_argument("--init-weights", type=Path, default=None, help="start from an existing weights container")
    p.add_argument("--out-weights", type=Path, required=True)
    p.add_argument("--out-history", type=Path, required=True)
    p.add_argument("--out-manifest", type=Path, default=None, help="write the manifest with its split column")

    p = verbs.add_parser("eval", help="evaluate on a manifest's test split")
    p.add_argument("--manifest", type=Path, required=True)
    _add_model_args(p)
    p.add_argument("--subtract-mean", action="store_true")
    p.add_argument("--mean", type=_mean, default=None)
    p.add_argument("--out-report", type=Path, required=True)
    p.add_argument("--out-roc", type=Path, default=None)

    p = verbs.add_parser("predict", help="screen a single image")
    p.add_argument("--image", type=Path, required=True)
    _add_model_args(p)
    p.add_argument("--mean", type=_mean, default=None, help="subtract this per-channel mean")

    p = verbs.add_parser("serve", help="run the HTTP screening service")
    p.add_argument("--addr", default=None, help="host:port (env CVL_ADDR)")
    p.add_argument("--weights", type=Path, default=None, help="weights container (env CVL_WEIGHTS)")
    p.add_argument("--variant", default=None)
    p.add_argument("--audit-log", type=Path, default=None, help="JSON-lines audit log (env CVL_LOG)")
    p.add_argument("--webhook", default=None)
    p.add_argument("--max-body-bytes", type=int, default=None)
    p.add_argument("--conv-method", choices=("direct", "gemm"), default=None)
    p.add_argument("--mean", type=_mean, default=None)

    p = verbs.add_parser("inspect", help="print the per-layer parameter table")
    p.add_argument("--variant", default=DEFAULT_VARIANT)

    verbs.add_parser("compare", help="parameter totals for DNN-I..DNN-IV")

    p = verbs.add_parser("synthesize", help="write a separable synthetic image set")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _train(args: argparse.Namespace) -> int:
    manifest = read_manifest(args.manifest)
    if not manifest.is_split:
        manifest = split_80_20(manifest, args.seed)
    if args.out_manifest is not None:
        write_manifest(manifest, args.out_manifest)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        dropout_rate=args.dropout,
        seed=args.seed,
        head_kind=args.head or assemble_model(args.variant).head_kind,
        augment=args.augment,
        augment_policy=AugmentPolicy(),
        subtract_mean=args.subtract_mean,
        mean_override=args.mean,
        conv_method=args.conv_method,
    )
    graph = assemble_model(args.variant, config.head_kind)
    if args.init_weights is not None:
        params, _ = load_weights(args.init_weights, graph)
    else:
        params = initialize_parameters(graph, config.seed)
    result = train(graph, params, manifest, config)
    digest = save_weights(args.out_weights, result.params, graph)
    provenance = {
        "variant": graph.variant,
        "tag": graph.tag,
        "config": config.model_dump(mode="json"),
        "mean": None if result.mean is None else list(result.mean),
        "split_counts": manifest.counts(),
        "weights_sha256": digest,
    }
    write_history(args.out_history, result.history, provenance)
    if result.history.records:
        last = result.history.records[-1]
        print(f"epoch {last.epoch}: train_loss {last.train_loss:.4f} train_acc {last.train_acc:.4f}")
    print(f"weights: {args.out_weights} (sha256 {digest})")
    return 0


def _eval(args: argparse.Namespace) -> int:
    graph = assemble_model(args.variant)
    params, digest = load_weights(args.weights, graph)
    manifest = read_manifest(args.manifest)
    mean = args.mean
    if args.subtract_mean and mean is None:
        if not manifest.is_split:
            raise CovilearnError("--subtract-mean without --mean needs a split manifest to compute the train mean")
        train_samples = load_samples(manifest.of_split("train"), size=graph.input_shape[-1])
        mean = dataset_mean(s.pixels for s in train_samples)
    report = evaluate(
        graph,
        params,
        manifest,
        conv_method=args.conv_method,
        mean=mean,
        provenance={"weights_sha256": digest, "head_kind": graph.head_kind},
    )
    write_report(args.out_report, report)
    if args.out_roc is not None and report.roc is not None:
        write_roc_csv(args.out_roc, report.roc)
    print(report.summary())
    return 0


def _predict(args: argparse.Namespace) -> int:
    graph = assemble_model(args.variant)
    params, _ = load_weights(args.weights, graph)
    raw = load_image(args.image)
    image = preprocess(
        raw.pixels, args.mean is not None, max_value=raw.max_value, size=graph.input_shape[-1], mean=args.mean
    )
    (prediction,) = predict(graph, params, image.numpy()[np.newaxis], conv_method=args.conv_method)
    probabilities = prediction.probabilities.tolist()
    print(f"label: {prediction.label}")
    print(f"confidence: {prediction.confidence:.4f}")
    print(f"probabilities: covid={probabilities[0]:.6f} normal={probabilities[1]:.6f}")
    return 0


def _serve(args: argparse.Namespace) -> int:
    config = ServiceConfig.from_env(
        address=args.addr,
        weights_path=args.weights,
        variant=args.variant,
        audit_log=args.audit_log,
        webhook_url=args.webhook,
        max_body_bytes=args.max_body_bytes,
        conv_method=args.conv_method,
        subtract_mean=True if args.mean is not None else None,
        mean=args.mean,
    )
    serve(config)
    return 0


def _inspect(args: argparse.Namespace) -> int:
    print(parameter_table(assemble_model(args.variant)))
    return 0


def compare_table() -> str:
    rows = [("tag", "variant", "total parameters", "trainable", "published total", "match")]
    for backbone, tag in DNN_TAGS.items():
        if tag not in PUBLISHED_TOTALS:
            continue
        graph = assemble_model(backbone)
        total = total_parameters(graph)
        published = PUBLISHED_TOTALS[tag]
        match = "yes" if total == published else f"no ({total - published:+,})"
        rows.append((tag, graph.variant, f"{total:,}", f"{trainable_parameters(graph):,}", f"{published:,}", match))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip() for row in rows)


def _compare(args: argparse.Namespace) -> int:
    print(compare_table())
    return 0


def _synthesize(args: argparse.Namespace) -> int:
    path = write_synthetic_dataset(args.out, args.per_class, args.size, args.seed)
    print(f"manifest: {path}")
    return 0


VERBS = {
    "train": _train,
    "eval": _eval,
    "predict": _predict,
    "serve": _serve,
    "inspect": _inspect,
    "compare": _compare,
    "synthesize": _synthesize,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return VERBS[args.verb](args)
    except (CovilearnError, ValidationError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
