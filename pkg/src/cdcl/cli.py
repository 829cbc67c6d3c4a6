"""Command-line entry point: ``cdcl <subcommand> [options]``.

Exit codes: 0 success, 2 usage/config/contract error, 3 I/O error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path


from . import data as data_mod
from .data import Dataset, ShiftConfig, generate_shifted_pair, load_dataset, load_labels, save_dataset, save_labels
from .errors import CDCLError, FormatError, InvalidConfigError, NumericalError
from .losses import PairMode
from .model import Domain, EncoderConfig, Mode, Model, encode, init_model, load_checkpoint, save_checkpoint
from .pseudolabel import generate_pseudo_labels
from .trainer import HyperParams, evaluate, pretrain_source, train_sdf, train_uda

log = logging.getLogger("cdcl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# -- configuration ---------------------------------------------------------

def _field_defaults():
    out = {}
    for cls, skip in ((ShiftConfig, {"seed"}), (EncoderConfig, {"input_dim"}), (HyperParams, set())):
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            out[f.name] = f.default
    return out


DEFAULTS = _field_defaults()


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace(" ", "").split(",") if p]
            cast = int if key == "hidden_dims" else float
            return tuple(cast(p) for p in parts)
        return raw
    except ValueError:
        raise InvalidConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{origin}:{lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    """Built-in defaults < config file < ``--set`` overrides < ``--seed``."""
    raw: dict[str, str] = {}
    if config_path is not None:
        raw.update(parse_config_text(Path(config_path).read_text(), str(config_path)))
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    if seed is not None:
        raw["seed"] = str(seed)
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise InvalidConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = dict(DEFAULTS)
    for k, v in raw.items():
        cfg[k] = _coerce(k, v)
    return cfg


def _pick(cls, cfg: dict, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k: v for k, v in cfg.items() if k in names}, **extra)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def write_resolved(cfg: dict, out_dir: Path, extra: dict | None = None) -> None:
    items = dict(cfg)
    lines = [f"{k} = {_format_value(items[k])}" for k in sorted(items)]
    if extra:
        lines += [f"# {k} = {v}" for k, v in sorted(extra.items())]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _json_config(cfg: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(cfg.items())}


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- helpers ---------------------------------------------------------------

def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {p}")
    return p


def _encoder_config(cfg: dict, input_dim: int) -> EncoderConfig:
    return _pick(EncoderConfig, cfg, input_dim=input_dim)


def _attach_labels(ds: Dataset, labels_path) -> Dataset:
    if labels_path is None:
        return ds
    labels = load_labels(labels_path)
    if labels.size != len(ds):
        raise InvalidConfigError(f"{labels_path} has {labels.size} labels for {len(ds)} rows")
    return ds.with_labels(labels)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def write_embeddings(path: Path, model: Model, target: Dataset, target_labels=None, pseudo=None,
                     source: Dataset | None = None) -> None:
    """TSV of normalized features; source rows carry pseudo_label -1 and confidence nan."""
    d = model.cfg.feature_dim
    header = ["id", "domain", "label", "pseudo_label", "confidence"] + [f"z_{i + 1}" for i in range(d)]
    rows = ["\t".join(header)]
    if source is not None:
        zs = encode(model, source.features, Domain.SOURCE, Mode.EVAL).z
        for i, (y, z) in enumerate(zip(source.labels, zs)):
            rows.append("\t".join([str(i), "source", str(int(y)), "-1", "nan"] + [_fmt(v) for v in z]))
    zt = encode(model, target.features, Domain.TARGET, Mode.EVAL).z
    labels = target.labels if target_labels is None else target_labels
    for i, z in enumerate(zt):
        pl = int(pseudo.labels[i]) if pseudo is not None else -1
        conf = _fmt(pseudo.confidences[i]) if pseudo is not None else "nan"
        rows.append("\t".join([str(i), "target", str(int(labels[i])), str(pl), conf] + [_fmt(v) for v in z]))
    path.write_text("\n".join(rows) + "\n")


def _pseudo_for_export(model: Model, target: Dataset, source: Dataset | None, cfg: dict):
    kw = dict(threshold=cfg["threshold"], max_iters=cfg["kmeans_max_iters"], tol=cfg["kmeans_tol"])
    if model.source_free_prepared:
        return generate_pseudo_labels(model, target.features, "source-free", **kw)
    if source is not None:
        return generate_pseudo_labels(model, target.features, "standard", source, **kw)
    return None


# -- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg: dict) -> int:
    out = _out_dir(args.out)
    shift = _pick(ShiftConfig, cfg)
    pair = generate_shifted_pair(shift)
    save_dataset(pair.source, out / "source.ds")
    save_dataset(pair.target, out / "target.ds")
    save_labels(pair.target_labels, shift.num_classes, out / "target.labels")
    write_resolved(cfg, out, {"command": "gen-data"})
    print(f"wrote {out / 'source.ds'}, {out / 'target.ds'}, {out / 'target.labels'}")
    return EXIT_OK


def cmd_pretrain(args, cfg: dict) -> int:
    out = _out_dir(args.out)
    source = load_dataset(args.source)
    if not source.is_labeled:
        raise InvalidConfigError("pretraining needs a labelled source dataset")
    hyper = _pick(HyperParams, cfg)
    model, val_acc = pretrain_source(source, _encoder_config(cfg, source.dim), hyper)
    _, val = data_mod.split_train_val(source, hyper.val_ratio, hyper.seed)
    save_checkpoint(model, out / "source_model.ckpt")
    save_dataset(val, out / "source_val.ds")
    _write_json(out / "pretrain_report.json",
                {"val_accuracy": val_acc, "seed": hyper.seed, "config": _json_config(cfg)})
    write_resolved(cfg, out, {"command": "pretrain"})
    print(f"val_accuracy {val_acc:.6f}")
    return EXIT_OK


def _parse_mode(mode: str) -> tuple[str, PairMode | None]:
    if mode in ("standard", "source-free"):
        return mode, PairMode.CROSS_DOMAIN if mode == "standard" else None
    if mode.startswith("ablation:"):
        try:
            return "standard", PairMode.parse(mode.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"unknown ablation mode {mode!r}") from None
    raise UsageError(f"unknown adapt mode {mode!r}")


def cmd_adapt(args, cfg: dict) -> int:
    procedure, pair_mode = _parse_mode(args.mode)
    if procedure == "source-free" and args.source is not None:
        raise UsageError("source data forbidden in source-free mode")
    if procedure == "source-free" and args.model is None:
        raise UsageError("source-free mode needs --model (a source-trained checkpoint)")
    if procedure == "standard" and args.source is None:
        raise UsageError("standard mode needs --source")
    out = _out_dir(args.out)
    if pair_mode is not None:
        cfg = {**cfg, "pair_mode": pair_mode.value}
    hyper = _pick(HyperParams, cfg)
    target = load_dataset(args.target)
    labelled_target = None
    if args.target_labels is not None:
        labelled_target = _attach_labels(target, args.target_labels)
    elif target.is_labeled:
        labelled_target = target
    unlabeled = target.unlabeled()

    source = None
    if procedure == "standard":
        source = load_dataset(args.source)
        if args.model is not None:
            model = load_checkpoint(args.model)
        else:
            # stands in for a pre-trained backbone
            model, _ = pretrain_source(source, _encoder_config(cfg, source.dim), hyper)
        model, report = train_uda(model, source, unlabeled, hyper, eval_target=labelled_target)
    else:
        model, report = train_sdf(load_checkpoint(args.model), unlabeled, hyper,
                                  eval_target=labelled_target)
    report.config = {"mode": args.mode, **_json_config(cfg)}
    save_checkpoint(model, out / "adapted_model.ckpt")
    (out / "train_report.json").write_text(report.to_json() + "\n")
    _write_json(out / "timing.json", {"wall_clock_seconds": report.wall_clock_seconds})
    pseudo = _pseudo_for_export(model, unlabeled, source, cfg)
    tl = labelled_target.labels if labelled_target is not None else None
    write_embeddings(out / "embeddings.tsv", model, unlabeled, tl, pseudo, source)
    write_resolved(cfg, out, {"command": "adapt", "mode": args.mode})
    if report.target_accuracy is not None:
        print(f"target_accuracy {report.target_accuracy:.6f}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    model = load_checkpoint(args.model)
    ds = _attach_labels(load_dataset(args.data), args.labels)
    if not ds.is_labeled:
        raise UsageError("labels required")
    domain = Domain.parse(args.domain) if args.domain else ds.domain
    res = evaluate(model, ds, domain)
    payload = {"accuracy": res.accuracy, "mean_class_accuracy": res.mean_class_accuracy,
               "per_class_accuracy": res.per_class, "domain": domain.key}
    print(f"accuracy {res.accuracy:.6f}")
    print(f"mean_class_accuracy {res.mean_class_accuracy:.6f}")
    print(json.dumps(payload, sort_keys=True))
    if args.out is not None:
        _write_json(_out_dir(args.out) / "eval_report.json", payload)
    return EXIT_OK


def cmd_export_embeddings(args, cfg: dict) -> int:
    out = _out_dir(args.out)
    model = load_checkpoint(args.model)
    target = load_dataset(args.target)
    labels = load_labels(args.target_labels) if args.target_labels else None
    source = load_dataset(args.source) if args.source else None
    pseudo = _pseudo_for_export(model, target.unlabeled(), source, cfg)
    write_embeddings(out / "embeddings.tsv", model, target, labels, pseudo, source)
    print(f"wrote {out / 'embeddings.tsv'}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="existing output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cdcl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic source/target pair")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="train a source model")
    p.add_argument("--source", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", parents=[common], help="adapt to the target domain")
    p.add_argument("--mode", required=True,
                   help="standard | source-free | ablation:<in-domain|combined-domain|"
                        "cross-source-only|cross-target-only>")
    p.add_argument("--source")
    p.add_argument("--target", required=True)
    p.add_argument("--model", help="checkpoint to start from")
    p.add_argument("--target-labels", help="ground-truth sidecar, used for the final report only")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--labels", help="label sidecar for an unlabeled dataset file")
    p.add_argument("--domain", choices=["source", "target"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", parents=[common], help="write normalized features as TSV")
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source")
    p.add_argument("--target-labels")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.set, args.seed)
        return args.func(args, cfg)
    except (UsageError, InvalidConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        name = getattr(exc, "filename", None)
        msg = f"{exc.strerror}: {name}" if name and exc.strerror else str(exc)
        print(f"I/O error: {msg}", file=sys.stderr)
        return EXIT_IO
    except CDCLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
