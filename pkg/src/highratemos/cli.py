"""Command-line entry point: extract | train | cv | predict | evaluate | ensemble | ablate."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ensemble as ens
from .config import RunConfig, parse_text
from .data import kfold_split, load_manifest, read_predictions, write_predictions
from .errors import ConfigError, HRMError
from .metrics import full_report
from .model import COMPONENTS, Checkpoint
from .training import cross_validate, predict, train

log = logging.getLogger("highratemos")

RESOLVED_CONFIG = "config.resolved"


def _load_config(args, **extra) -> RunConfig:
    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return RunConfig.from_file(args.config, overrides)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit_config(cfg: RunConfig, out: Path) -> None:
    (out / RESOLVED_CONFIG).write_text(cfg.to_text())


def _split(records, cfg: RunConfig):
    if any(r.fold is None for r in records):
        records = kfold_split(records, cfg.values["cv.k"], cfg.seed)
    return records


def cmd_extract(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    extractor = cfg.make_extractor(cache_dir=out)
    records = load_manifest(args.manifest)
    extractor.bundles(records)
    _emit_config(cfg, out)
    print(f"cached {len(records)} utterances under {out / extractor.config_hash}")
    return 0


def _train_run(cfg: RunConfig, args, out: Path) -> int:
    records = load_manifest(args.manifest)
    if args.dev_manifest:
        tr, dev = records, load_manifest(args.dev_manifest)
    else:
        records = _split(records, cfg)
        tr = [r for r in records if r.fold != 0]
        dev = [r for r in records if r.fold == 0]
    extractor = cfg.make_extractor()
    ckpt, history = train(tr, dev, cfg.train_config(), extractor, meta={"config": cfg.to_text()})
    _emit_config(cfg, out)
    ckpt.save(out / "best.ckpt")
    history.write_csv(out / "history.csv")
    preds = predict(ckpt, dev, extractor)
    write_predictions(preds, out / "dev_predictions.tsv")
    report = full_report(preds, dev)
    (out / "dev_report.txt").write_text(report.to_text())
    print(f"best step {ckpt.step}, stopped at {history.stop_step}")
    print(report.to_text(), end="")
    return 0


def cmd_train(args) -> int:
    return _train_run(_load_config(args), args, _out_dir(args))


def cmd_ablate(args) -> int:
    cfg = _load_config(args).ablate(args.component)
    return _train_run(cfg, args, _out_dir(args))


def cmd_cv(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(args)
    k = cfg.values["cv.k"]
    records = _split(load_manifest(args.manifest), cfg)
    extractor = cfg.make_extractor()
    meta = {"config": cfg.to_text()}
    result = cross_validate(records, cfg.train_config(), extractor, k=k, meta=meta)
    _emit_config(cfg, out)
    for i, (ckpt, hist) in enumerate(zip(result.checkpoints, result.histories)):
        ckpt.save(out / f"fold{i}.ckpt")
        hist.write_csv(out / f"fold{i}_history.csv")
    write_predictions(result.pooled, out / "pooled_dev.tsv")
    lines = [full_report(result.pooled, records).to_text()]
    for i, (rep, score) in enumerate(zip(result.fold_metrics, result.dev_scores)):
        lines.append(f"fold{i}.dev_criterion={round(score, 9)!r}\n")
        lines.append("".join(f"fold{i}.{key}={round(v, 9)!r}\n" for key, v in rep.items()))
    lines.append(f"best_fold={result.best_fold}\n")
    report = "".join(lines)
    (out / "report.txt").write_text(report)
    if args.eval_manifest:
        targets = load_manifest(args.eval_manifest)
        sets = [predict(c, targets, extractor) for c in result.checkpoints]
        for i, s in enumerate(sets):
            write_predictions(s, out / f"eval_fold{i}.tsv")
        folds = ens.FoldOutputs(sets, result.dev_scores)
        write_predictions(folds.average(), out / f"eval_{ens.FIVE_FOLD_AVERAGE}.tsv")
        write_predictions(folds.best(), out / f"eval_{ens.BEST_OF_FIVE_FOLD}.tsv")
    print(report, end="")
    return 0


def cmd_predict(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    if "config" not in ckpt.meta:
        raise ConfigError(f"{args.checkpoint}: no run config stored in checkpoint")
    cfg = RunConfig.resolve(parse_text(ckpt.meta["config"]))
    extractor = cfg.make_extractor()
    preds = predict(ckpt, load_manifest(args.manifest), extractor)
    write_predictions(preds, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    report = full_report(read_predictions(args.predictions), load_manifest(args.manifest), clamp=args.clamp)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_ensemble(args) -> int:
    spec = ens.SETTINGS.get(args.spec_name)
    if spec is None:
        raise ConfigError(f"unknown ensemble {args.spec_name!r}; choose from {', '.join(ens.SETTINGS)}")
    if len(args.members) != len(spec.members):
        order = ", ".join(f"{v}:{s}" for v, s in spec.members)
        raise ConfigError(f"{spec.name} takes {len(spec.members)} member files in order: {order}")
    result = ens.average([read_predictions(p) for p in args.members])
    write_predictions(result, args.out)
    print(f"wrote {len(result)} averaged predictions to {args.out}")
    return 0


def cmd_make_synthetic(args) -> int:
    from .synthetic import make_synthetic
    manifest, records = make_synthetic(args.out, n_systems=args.systems, per_system=args.per_system,
                                       seed=args.seed or 0, prefix=args.prefix, manifest_name=args.manifest_name)
    print(f"wrote {len(records)} utterances; manifest {manifest}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="highratemos", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, manifest=True, config=True):
        if manifest:
            sp.add_argument("--manifest", required=True)
        if config:
            sp.add_argument("--config", default=None, help="flat key=value run config")
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("extract", help="build the feature cache")
    common(sp)
    sp.add_argument("--out", required=True, help="cache directory")
    sp.set_defaults(func=cmd_extract)

    for name, func in (("train", cmd_train), ("ablate", cmd_ablate)):
        sp = sub.add_parser(name, help="train one model" if name == "train" else "train with one component removed")
        common(sp)
        sp.add_argument("--out", required=True)
        sp.add_argument("--dev-manifest", default=None, help="dev set (default: fold 0 of the manifest)")
        if name == "ablate":
            sp.add_argument("--component", required=True, choices=COMPONENTS)
        sp.set_defaults(func=func)

    sp = sub.add_parser("cv", help="k-fold cross-validation")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--eval-manifest", default=None, help="also score every fold model on this set")
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("predict", help="score a manifest with a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="print utterance/system metrics")
    common(sp, config=False)
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--clamp", action="store_true", help="clamp scores to [1, 5] first")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ensemble", help="average member prediction files",
                        epilog="members, in order: " + "; ".join(
                            f"{s.name}: " + ", ".join(f"{v}:{src}" for v, src in s.members)
                            for s in ens.SETTINGS.values()))
    sp.add_argument("spec_name", choices=list(ens.SETTINGS))
    sp.add_argument("members", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ensemble)

    sp = sub.add_parser("make-synthetic", help="write a planted-feature demo corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--systems", type=int, default=6)
    sp.add_argument("--per-system", type=int, default=10)
    sp.add_argument("--prefix", default="utt")
    sp.add_argument("--manifest-name", default="manifest.csv")
    sp.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 2
    except HRMError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: io: {exc.filename}: {exc.strerror}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {json.dumps(str(exc))[1:-1]}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
