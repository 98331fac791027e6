"""Command line for batch experimentation.

Subcommands: gen-synth, flow, apex, train, eval, params, report.
Diagnostics go to stderr; machine-readable output goes to stdout or files.
Exit codes: 0 success, 1 usage error, 2 data/validation error.
The FR_THREADS environment variable caps the trainer's fold worker pool.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from .dataset import (SCHEMES, SynthSpec, generate_synthetic, label_samples,
                      load_frames, load_manifest)
from .errors import (ConfigError, DataError, ProtocolError, ShapeError,
                     UsageError)
from .flow import TVL1Params, spot_apex
from .ioutil import write_json
from .model import ModelConfig, VARIANTS, count_parameters, load_checkpoint
from .protocols import compute_metrics, confusion_from_csv
from .trainer import (DEFAULT_SCHEME, FlowCache, TrainConfig, evaluate_fold,
                      export_features, run_protocol)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--variant", choices=VARIANTS)
    g.add_argument("--k", type=int, dest="n_classes", help="number of classes")
    g.add_argument("--shared-dim", type=int)
    g.add_argument("--detector-hidden", type=int)
    g.add_argument("--classifier-hidden", type=int)
    g.add_argument("--dropout-p", type=float)
    g.add_argument("--lambda", type=float, dest="proposal_weight",
                   help="proposal loss weight")
    g.add_argument("--filters-layer1", type=int)
    g.add_argument("--filters-layer2", type=int)
    g.add_argument("--input-gain", type=float)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--protocol", choices=("cde", "single", "cdmer"))
    g.add_argument("--batch-size", type=int)
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--rounds", type=int)
    g.add_argument("--workers", type=int)
    g.add_argument("--loss-reduction", choices=("mean", "sum"))


def _add_tvl1_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("optical flow")
    g.add_argument("--tvl1-data-weight", type=float, dest="tvl1_data_weight")
    g.add_argument("--tvl1-theta", type=float, dest="tvl1_theta")
    g.add_argument("--tvl1-tau", type=float, dest="tvl1_tau")
    g.add_argument("--tvl1-levels", type=int, dest="tvl1_levels")
    g.add_argument("--tvl1-scale", type=float, dest="tvl1_scale")
    g.add_argument("--tvl1-warps", type=int, dest="tvl1_warps")
    g.add_argument("--tvl1-max-iters", type=int, dest="tvl1_max_iters")
    g.add_argument("--tvl1-tol", type=float, dest="tvl1_tol")
    g.add_argument("--tvl1-no-median", action="store_true", dest="tvl1_no_median")


def _merge_section(cls, file_section: dict, args):
    """Dataclass from config-file section plus flag overrides (flags win)."""
    values = dict(file_section)
    names = {f.name for f in dataclass_fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys in config file: {sorted(unknown)}")
    for name in names:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val
    return cls(**values)


def _load_config_file(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    with open(args.config, "r", encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{args.config}: config root must be an object")
    return cfg


def _model_config(args) -> ModelConfig:
    return _merge_section(ModelConfig, _load_config_file(args).get("model", {}), args)


def _train_config(args) -> TrainConfig:
    return _merge_section(TrainConfig, _load_config_file(args).get("train", {}), args)


def _tvl1_params(args) -> TVL1Params:
    section = dict(_load_config_file(args).get("tvl1", {}))
    mapping = {
        "data_weight": "tvl1_data_weight", "theta": "tvl1_theta", "tau": "tvl1_tau",
        "levels": "tvl1_levels", "scale": "tvl1_scale", "warps": "tvl1_warps",
        "max_iters": "tvl1_max_iters", "tol": "tvl1_tol",
    }
    for field, attr in mapping.items():
        v = getattr(args, attr, None)
        if v is not None:
            section[field] = v
    if getattr(args, "tvl1_no_median", False):
        section["median_filter"] = False
    unknown = set(section) - {f.name for f in dataclass_fields(TVL1Params)}
    if unknown:
        raise ConfigError(f"unknown TVL1Params keys: {sorted(unknown)}")
    return TVL1Params(**section)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_synth(args) -> int:
    spec = SynthSpec(n_subjects=args.subjects, clips_per_subject=args.clips_per_subject,
                     n_classes=args.classes, frame_size=args.frame_size,
                     frames_per_clip=args.frames_per_clip, noise_sigma=args.noise_sigma,
                     seed=args.seed)
    samples = generate_synthetic(spec, args.out)
    _info(f"wrote {len(samples)} clips under {args.out}")
    print(str(Path(args.out) / "manifest.jsonl"))
    return 0


def _cmd_flow(args) -> int:
    samples = load_manifest(args.manifest)
    cache = FlowCache(args.cache)
    n = cache.ensure(samples, _tvl1_params(args))
    _info(f"computed {n} flows ({len(samples) - n} already cached) in {args.cache}")
    return 0


def _cmd_apex(args) -> int:
    samples = load_manifest(args.manifest)
    for s in samples:
        idx = spot_apex(load_frames(s))
        print(f"{s.clip_id}\t{idx}")
    return 0


def _cmd_params(args) -> int:
    print(count_parameters(_model_config(args)))
    return 0


def _cmd_train(args) -> int:
    model_config = _model_config(args)
    train_config = _train_config(args)
    samples = load_manifest(args.manifest)
    cache = FlowCache(args.cache)
    if args.compute_flows:
        n = cache.ensure(samples, _tvl1_params(args))
        if n:
            _info(f"computed {n} flows")
    run = run_protocol(model_config, train_config, samples, cache,
                       scheme=args.scheme, experiment=args.experiment,
                       run_dir=args.out)
    rep = run.report
    _info(f"{train_config.protocol}: {len(run.plan.folds)} folds, "
          f"acc={rep.acc:.4f} uf1={rep.uf1:.4f} uar={rep.uar:.4f}")
    print(str(Path(args.out) / "report.json"))
    return 0


def _cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    samples = load_manifest(args.manifest)
    cache = FlowCache(args.cache)
    scheme_name = args.scheme or DEFAULT_SCHEME["single"]
    scheme = SCHEMES[scheme_name]
    kept, labels, dropped = label_samples(samples, scheme)
    if dropped:
        _info(f"dropped {dropped} excluded samples")
    if len(scheme.classes) != params.config.n_classes:
        raise ConfigError(
            f"checkpoint has {params.config.n_classes} classes, scheme "
            f"'{scheme.name}' has {len(scheme.classes)}")
    confusion = evaluate_fold(params, kept, labels, cache)
    report = compute_metrics([confusion], classes=scheme.classes)
    payload = report.to_dict()
    payload["confusion"] = confusion.tolist()
    if args.out:
        write_json(args.out, payload)
        print(str(args.out))
    else:
        print(json.dumps(payload, sort_keys=True, indent=2))
    if args.export_features:
        export_features(params, kept, labels, cache, args.export_features)
        _info(f"features written to {args.export_features}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run)
    folds_dir = run_dir / "folds"
    if not folds_dir.is_dir():
        raise DataError(f"{run_dir}: no folds/ directory to re-aggregate")
    confusions, classes = [], None
    fold_keys = sorted(p.name for p in folds_dir.iterdir() if p.is_dir())
    for key in fold_keys:
        csv_path = folds_dir / key / "confusion.csv"
        if not csv_path.is_file():
            raise DataError(f"missing {csv_path}")
        m, names = confusion_from_csv(csv_path.read_text())
        confusions.append(m)
        classes = names
    report = compute_metrics(confusions, classes=classes)
    payload = report.to_dict()
    payload["folds"] = {k: {"confusion": m.tolist()}
                        for k, m in zip(fold_keys, confusions)}
    write_json(run_dir / "report.json", payload)
    _info(f"re-aggregated {len(confusions)} folds")
    print(str(run_dir / "report.json"))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="featref", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset + manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--clips-per-subject", type=int, default=15)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--frame-size", type=int, default=64)
    p.add_argument("--frames-per-clip", type=int, default=12)
    p.add_argument("--noise-sigma", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("flow", help="compute and cache flow fields for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--config")
    _add_tvl1_flags(p)
    p.set_defaults(func=_cmd_flow)

    p = sub.add_parser("apex", help="report spotted apex indices")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=_cmd_apex)

    p = sub.add_parser("params", help="print the learnable parameter count")
    p.add_argument("--config")
    _add_model_flags(p)
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("train", help="run a full protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scheme", choices=sorted(SCHEMES))
    p.add_argument("--experiment", type=int, help="cross-database experiment 1..12")
    p.add_argument("--compute-flows", action="store_true",
                   help="fill the flow cache before training")
    p.add_argument("--config")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_tvl1_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--scheme", choices=sorted(SCHEMES))
    p.add_argument("--out")
    p.add_argument("--export-features")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", help="re-aggregate fold confusions into report.json")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ProtocolError, ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
