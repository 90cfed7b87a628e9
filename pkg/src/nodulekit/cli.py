"""Command-line interface: generate, train, evaluate, bench, render.

Exit codes are a stable contract: 0 success, 1 usage or configuration
error, 2 runtime failure. Every command that produces an output directory
writes the fully-resolved config.toml next to its results.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import config as config_mod
from . import data as data_mod
from .config import ConfigError, RunConfig, load_run_config, read_toml, run_config_from_dict, to_toml
from .inference import benchmark_inference, detect, evaluate_model, render_slices, write_detections_csv, write_froc_report, write_sweep_csv
from .network import config_mismatch_fields, count_parameters, load_checkpoint
from .trainer import TrainingDiverged, train

FULL_SCALE_REFERENCE = (
    "full-scale reference: 15,903,490 params duplicated vs 9,618,523 shared; "
    "10.2 s/scan two-pass vs 2.8 s/scan shared (ratio 3.64)"
)


class UsageError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="override the generation and training seeds")
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="force deterministic torch kernels (default: on)",
    )
    parser.add_argument("--workers", type=int, default=1, help="parallel worker processes where supported")
    parser.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nodulekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[], help="write a synthetic dataset")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, required=True)

    p = sub.add_parser("train", help="train a detector on a dataset directory")
    _common_flags(p)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None, help="override total epochs")
    p.add_argument("--phase1-epochs", type=int, default=None, help="override warmup epochs")
    p.add_argument("--lr-schedule", type=str, default=None, help='e.g. "0:0.01,80:0.001,120:0.0001"')
    p.add_argument("--split", choices=["trainval", "all"], default="trainval", help="which samples to train on")
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")

    p = sub.add_parser("evaluate", help="run detection and report the operating curve")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["holdout", "trainval", "all"], default="holdout")
    p.add_argument("--render", action="store_true", help="also write annotated slice images")

    p = sub.add_parser("bench", help="compare shared-extractor inference with the two-pass baseline")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--count", type=int, default=None, help="benchmark on the first N volumes")
    p.add_argument("--out", type=Path, default=None, help="also write the report to a directory")

    p = sub.add_parser("render", help="write annotated detection slices")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--samples", type=str, default=None, help="comma-separated sample ids (default: first --limit)")
    p.add_argument("--limit", type=int, default=4)

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.synthetic = dataclasses.replace(cfg.synthetic, seed=args.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=args.seed)
    if args.deterministic is not None:
        cfg.train = dataclasses.replace(cfg.train, deterministic=args.deterministic)
    return cfg


def _parse_lr_schedule(text: str) -> tuple[tuple[int, float], ...]:
    try:
        pairs = []
        for chunk in text.split(","):
            epoch, lr = chunk.split(":")
            pairs.append((int(epoch), float(lr)))
        return tuple(pairs)
    except ValueError as exc:
        raise UsageError(f"bad --lr-schedule {text!r}: expected 'epoch:lr,epoch:lr,...'") from exc


def _prepare_out_dir(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)


def _persist_config(cfg: RunConfig, out_dir: Path, **paths) -> None:
    cfg.paths = {k: str(v) for k, v in paths.items() if v is not None}
    (out_dir / "config.toml").write_text(to_toml(cfg))


def _split_samples(samples, cfg: RunConfig, which: str):
    if which == "all":
        return samples
    trainval_ids, holdout_ids = data_mod.split_dataset(
        [s.sample_id for s in samples], cfg.train.seed, cfg.holdout_fraction
    )
    wanted = set(trainval_ids if which == "trainval" else holdout_ids)
    return [s for s in samples if s.sample_id in wanted]


def cmd_generate(args) -> int:
    cfg = _resolve_config(args)
    _prepare_out_dir(args.out, args.force)
    (args.out / "volumes").mkdir(exist_ok=True)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    indices = range(args.count)
    if args.workers > 1 and args.count > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(data_mod.save_dataset_sample, [cfg.synthetic] * args.count, indices, [args.out] * args.count))
    else:
        results = [data_mod.save_dataset_sample(cfg.synthetic, i, args.out) for i in indices]
    data_mod.write_manifest(args.out / "manifest.csv", [(sid, rel) for sid, rel, _ in results])
    data_mod.write_annotations(args.out / "annotations.csv", {sid: nodules for sid, _, nodules in results})
    _persist_config(cfg, args.out, out=args.out)
    total = sum(len(nodules) for _, _, nodules in results)
    print(f"wrote {args.count} volumes ({total} nodules) to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.epochs is not None or args.phase1_epochs is not None or args.lr_schedule is not None or args.no_augment:
        updates = {}
        if args.epochs is not None:
            updates["total_epochs"] = args.epochs
        if args.phase1_epochs is not None:
            updates["phase1_epochs"] = args.phase1_epochs
        if args.lr_schedule is not None:
            updates["lr_schedule"] = _parse_lr_schedule(args.lr_schedule)
        if args.no_augment:
            updates["augment"] = False
        try:
            cfg.train = dataclasses.replace(cfg.train, **updates)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc

    samples = data_mod.load_dataset(args.dataset)
    train_samples = _split_samples(samples, cfg, args.split)
    if not train_samples:
        raise ConfigError(f"no training samples in split {args.split!r} of {args.dataset}")

    if args.resume:
        if not (args.out / "trainstate.json").exists():
            raise ConfigError(f"--resume given but {args.out} has no trainstate.json")
    else:
        _prepare_out_dir(args.out, args.force)
    _persist_config(cfg, args.out, dataset=args.dataset, out=args.out)

    state = train(
        train_samples,
        config=cfg.train,
        net_config=cfg.network,
        loss_config=cfg.loss,
        inference_config=cfg.inference,
        out_dir=args.out,
        resume_from=args.out if args.resume else None,
    )
    best = "n/a" if state.best_epoch < 0 else f"{state.best_cpm:.4f} (epoch {state.best_epoch})"
    print(f"trained {state.epoch} epochs, {state.step} steps; best validation CPM {best}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    if args.config is not None:
        raw = read_toml(args.config)
        if "network" in raw:
            requested = run_config_from_dict(raw).network
            mismatched = config_mismatch_fields(requested, model.config)
            if mismatched:
                raise ConfigError(
                    f"checkpoint {args.checkpoint} disagrees with [network] in {args.config} "
                    f"on: {', '.join(mismatched)}"
                )
    cfg.network = model.config

    samples = _split_samples(data_mod.load_dataset(args.dataset), cfg, args.split)
    if not samples:
        raise ConfigError(f"no samples in split {args.split!r} of {args.dataset}")
    _prepare_out_dir(args.out, args.force)
    curve, results = evaluate_model(model, samples, cfg.inference)
    write_froc_report(args.out / "froc_report.txt", curve)
    write_sweep_csv(args.out / "froc_sweep.csv", curve)
    write_detections_csv(args.out / "detections.csv", results)
    if args.render:
        by_id = {s.sample_id: s for s in samples}
        for result in results:
            render_slices(result, by_id[result.sample_id], args.out / "slices")
    _persist_config(cfg, args.out, checkpoint=args.checkpoint, dataset=args.dataset, out=args.out)
    print((args.out / "froc_report.txt").read_text().rstrip())
    print(f"CPM {curve.cpm:.4f} over {len(samples)} scans ({args.split} split)")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    volumes = data_mod.load_dataset(args.dataset)
    if args.count is not None:
        volumes = volumes[: args.count]
    if len(volumes) < 10:
        raise ConfigError(f"bench needs at least 10 volumes, dataset gave {len(volumes)}")

    shared_params = count_parameters(model.config, "shared")
    dup_params = count_parameters(model.config, "duplicated")
    shared_sec, shared_passes = benchmark_inference(model, volumes, "shared", cfg.inference)
    two_sec, two_passes = benchmark_inference(model, volumes, "two_pass", cfg.inference)
    lines = [
        f"parameters: shared {shared_params:,} / duplicated {dup_params:,} "
        f"(reduction {(dup_params - shared_params) / dup_params:.1%})",
        f"seconds per scan: shared {shared_sec:.3f} / two-pass {two_sec:.3f} "
        f"(ratio {two_sec / shared_sec:.2f})",
        f"extractor passes over {len(volumes)} scans: shared {shared_passes} / two-pass {two_passes}",
        FULL_SCALE_REFERENCE,
    ]
    report = "\n".join(lines)
    print(report)
    if args.out is not None:
        _prepare_out_dir(args.out, args.force)
        (args.out / "bench.txt").write_text(report + "\n")
        _persist_config(cfg, args.out, checkpoint=args.checkpoint, dataset=args.dataset, out=args.out)
    return 0


def cmd_render(args) -> int:
    cfg = _resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    samples = data_mod.load_dataset(args.dataset)
    if args.samples:
        wanted = args.samples.split(",")
        by_id = {s.sample_id: s for s in samples}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise ConfigError(f"sample ids not in dataset: {', '.join(missing)}")
        samples = [by_id[w] for w in wanted]
    else:
        samples = samples[: args.limit]
    _prepare_out_dir(args.out, args.force)
    written = 0
    for sample in samples:
        result = detect(sample, model, cfg.inference)
        written += len(render_slices(result, sample, args.out))
    _persist_config(cfg, args.out, checkpoint=args.checkpoint, dataset=args.dataset, out=args.out)
    print(f"wrote {written} slice images to {args.out}")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError, data_mod.DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
