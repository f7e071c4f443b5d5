"""Command-line interface.

Subcommands: synth, train, eval, infer, ablate, inspect-prompt,
export-features. Exit codes: 0 success, 2 usage/config error, 3 corrupt or
missing data/checkpoint, 4 numeric failure during training.

Training is configured by a flat-key JSON file; every config key is also a
``--key value`` flag (dashes for underscores) that overrides the file.
Tables (eval, ablate, inspect-prompt) are printed as CSV on stdout and
optionally written to ``--out``.
"""

# Small GEMMs dominate this workload; a shared-thread BLAS pool slows it
# down, so default to single-threaded BLAS unless the caller overrides.
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import argparse
import csv
import io
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, dataio
from .errors import ConfigError, DataError, NumericError
from .segmodel import SegModel
from .styleaug import AugConfig
from .trainer import TrainConfig, evaluate, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_AUG_KEYS = {f.name for f in fields(AugConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"aug"}


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2sdg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="materialize the synthetic benchmark")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--spec", default=None, help="benchmark spec JSON (default: built in)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default=None, help="flat-key JSON config file")
    for key in sorted(_TRAIN_KEYS | _AUG_KEYS):
        p.add_argument(_flag(key), dest=f"cfg_{key}", default=None, metavar="V")

    p = sub.add_parser("eval", help="per-domain Dice of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--domains", default=None, help="comma-separated domain filter")
    p.add_argument("--out", default=None, help="also write the CSV here")

    p = sub.add_parser("infer", help="segment one image, write masks beside it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="input PPM")

    p = sub.add_parser("ablate", help="per-channel drop/add analysis")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("drop", "add"), default="drop")
    p.add_argument("--stage", choices=("pre", "post"), default="pre",
                   help="drop before or after the channel masks")
    p.add_argument("--domains", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("inspect-prompt", help="channel prompt logits and masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("export-features", help="stem feature maps as PGMs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--block", choices=("stem", "style", "structure"), default="stem")
    return parser


def _load_model(path) -> SegModel:
    return SegModel.from_state(checkpoint.load_checkpoint(path))


def _groups(root, domains_arg):
    groups = dataio.load_dataset(root).groups
    if domains_arg:
        wanted = [d for d in domains_arg.split(",") if d]
        missing = [d for d in wanted if d not in groups]
        if missing:
            raise ConfigError(f"domains not in dataset: {missing}")
        groups = {d: groups[d] for d in wanted}
    return groups


def _emit_csv(header, rows, out_path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in row])
    sys.stdout.write(buf.getvalue())
    if out_path:
        Path(out_path).write_text(buf.getvalue())


def _parse_override(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare strings (paths, domain names) need no quoting


def _build_train_config(args) -> TrainConfig:
    doc = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        unknown = set(doc) - _TRAIN_KEYS - _AUG_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in _TRAIN_KEYS | _AUG_KEYS:
        raw = getattr(args, f"cfg_{key}", None)
        if raw is not None:
            doc[key] = _parse_override(raw)
    aug_kwargs = {k: tuple(v) if isinstance(v, list) else v
                  for k, v in doc.items() if k in _AUG_KEYS}
    train_kwargs = {k: tuple(v) if isinstance(v, list) else v
                    for k, v in doc.items() if k in _TRAIN_KEYS}
    try:
        cfg = TrainConfig(aug=AugConfig(**aug_kwargs), **train_kwargs)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad configuration: {exc}") from exc
    return cfg


def cmd_synth(args) -> int:
    spec = (dataio.load_benchmark_spec(args.spec) if args.spec
            else dataio.default_benchmark_spec())
    bench = dataio.synth_benchmark(spec, args.seed)
    out = Path(args.out)
    n_img = 0
    for splits in bench.values():
        dataio.save_samples(out / "train", splits["train"])
        dataio.save_samples(out / "test", splits["test"])
        n_img += len(splits["train"]) + len(splits["test"])
    print(f"wrote {n_img} images ({len(bench)} domains) under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_train_config(args)
    if not cfg.train_root or not cfg.test_root or not cfg.source_domain or not cfg.out_dir:
        raise ConfigError("train needs train_root, test_root, source_domain and out_dir")
    result = train(cfg)
    print(f"finished {result.steps} steps; best epoch {result.best_epoch} "
          f"(target mean Dice {result.best_target_score:.2f})")
    print(f"checkpoints: {result.best_checkpoint} {result.final_checkpoint}")
    print(f"metrics: {result.metrics_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    groups = _groups(args.data, args.domains)
    scores = evaluate(model, groups)
    rows = [(dom, scores[dom][0], scores[dom][1]) for dom in sorted(scores)]
    _emit_csv(("domain", "dice_od", "dice_oc"), rows, args.out)
    return EXIT_OK


def cmd_infer(args) -> int:
    model = _load_model(args.checkpoint)
    img_path = Path(args.image)
    image = dataio.read_ppm(img_path)
    probs = analysis.predict_modified(model, [image])[0]
    od = (probs[0] >= 0.5).astype(np.uint8)
    oc = (probs[1] >= 0.5).astype(np.uint8)
    od_path = img_path.with_name(img_path.stem + "_pred_od.pgm")
    oc_path = img_path.with_name(img_path.stem + "_pred_oc.pgm")
    dataio.write_pgm(od_path, od)
    dataio.write_pgm(oc_path, oc)
    print(f"wrote {od_path} and {oc_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    model = _load_model(args.checkpoint)
    groups = _groups(args.data, args.domains)
    rows = analysis.channel_ablation(model, groups, mode=args.mode, stage=args.stage)
    _emit_csv(("channel", "dice_od", "dice_oc"), rows, args.out)
    return EXIT_OK


def cmd_inspect_prompt(args) -> int:
    model = _load_model(args.checkpoint)
    rows = analysis.prompt_table(model)
    _emit_csv(("channel", "logit_sty", "logit_str", "mask_sty", "mask_str"),
              rows, args.out)
    return EXIT_OK


def cmd_export_features(args) -> int:
    model = _load_model(args.checkpoint)
    image = dataio.read_ppm(args.image)
    rows = analysis.export_feature_maps(model, image, args.out_dir, args.block)
    sidecar = Path(args.out_dir) / "channels.csv"
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("channel", "vmin", "vmax", "file"))
        writer.writerows(rows)
    print(f"wrote {len(rows)} feature maps and {sidecar}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "inspect-prompt": cmd_inspect_prompt,
    "export-features": cmd_export_features,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
