"""Command-line entry point: ``irispad {train,eval,cross-eval,cam,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
A flat ``key = value`` config file (``--config``) supplies defaults; flags
given on the command line win. Every command writes the effective
configuration to ``<out>/effective_config.ini``.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import PreprocessConfig, load_manifest, preprocess, synth_dataset
from .errors import ConfigError, ManifestError, PADError, ShapeError
from .evaluation import DEFAULT_FDR, DEFAULT_THRESHOLD, write_report
from .explain import render_heatmap, score_cam
from .heads import VARIANTS
from .backbone import LEVELS
from .protocol import ProtocolSpec, cross_database_grid, evaluate_scores, run_protocol
from .training import TrainConfig, load_checkpoint, predict, train

log = logging.getLogger("irispad")

USAGE_ERRORS = (ConfigError, ManifestError, ShapeError)
CONFIG_SECTION = "irispad"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# option name -> (type, default); None default means "required somewhere"
TRAIN_OPTIONS = {
    "variant": (str, "apbs"),
    "manifest": (str, None),
    "seed": (int, None),
    "out": (str, None),
    "lambda": (float, 0.2),
    "epochs": (int, 20),
    "lr": (float, 1e-4),
    "weight_decay": (float, 1e-6),
    "lr_halving_period": (int, 6),
    "batch_size": (int, 64),
    "resolution": (int, 224),
    "arch": (str, "densenet121"),
    "pretrained": (str, "random"),
    "augment": (str, "true"),
}
EVAL_OPTIONS = {
    "checkpoint": (str, None),
    "manifest": (str, None),
    "out": (str, None),
    "threshold": (float, DEFAULT_THRESHOLD),
    "fdr": (float, DEFAULT_FDR),
    "bins": (int, 20),
}


def read_config_file(path) -> dict[str, str]:
    """Flat INI: keys either at top level or under ``[irispad]``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    if not text.lstrip().startswith("["):
        text = f"[{CONFIG_SECTION}]\n" + text
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        for k, v in cp.items(section):
            out[k.replace("-", "_")] = v
    return out


def write_effective_config(values: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cp = configparser.ConfigParser(interpolation=None)
    cp[CONFIG_SECTION] = {k: _as_text(v) for k, v in sorted(values.items()) if v is not None}
    path = out_dir / "effective_config.ini"
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)
    return path


def _as_text(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def _as_bool(v) -> bool:
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


def merge(args: argparse.Namespace, options: dict, list_keys=()) -> dict:
    """Resolve each option: flag > config file > default."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    merged = {}
    for key, (typ, default) in options.items():
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
        elif key in file_values:
            raw = file_values[key]
            try:
                merged[key] = [typ(x.strip()) for x in raw.split(",") if x.strip()] if key in list_keys else typ(raw)
            except ValueError:
                raise ConfigError(f"config value {key} = {raw!r} is not a valid {typ.__name__}") from None
        else:
            merged[key] = default
    return merged


def _require(values: dict, *keys):
    for k in keys:
        if values.get(k) in (None, [], ""):
            raise UsageError(f"missing required option --{k.replace('_', '-')}")


def _train_config(v: dict, out: Path) -> TrainConfig:
    return TrainConfig(
        variant=v["variant"],
        initial_lr=v["lr"],
        weight_decay=v["weight_decay"],
        max_epochs=v["epochs"],
        lr_halving_period=v["lr_halving_period"],
        batch_size=v["batch_size"],
        lam=v["lambda"],
        seed=v["seed"],
        checkpoint_dir=str(out / "checkpoints"),
        input_resolution=v["resolution"],
        arch=v["arch"],
        pretrained_source=v["pretrained"],
        augment=_as_bool(v["augment"]),
    )


def _load_manifest_arg(path, name: str | None = None):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    m = load_manifest(path)
    if name:
        m.name = name
    return m


def display_names(paths) -> dict[str, str]:
    """Manifest file stem, prefixed by its directory when stems collide."""
    paths = list(dict.fromkeys(str(p) for p in paths))
    stems = [Path(p).stem for p in paths]
    out = {}
    for p, stem in zip(paths, stems):
        if stems.count(stem) > 1:
            stem = f"{Path(p).resolve().parent.name}_{stem}"
        out[p] = stem
    return out


def cmd_train(args) -> int:
    v = merge(args, TRAIN_OPTIONS)
    _require(v, "manifest", "seed", "out")
    if v["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {v['variant']!r}")
    out = Path(v["out"])
    cfg = _train_config(v, out)
    manifest = _load_manifest_arg(v["manifest"])
    write_effective_config(v, out)
    ckpt = train(cfg, manifest, log_path=out / "train_log.jsonl")
    last = ckpt.history[-1]
    print(f"trained {cfg.variant} for {len(ckpt.history)} epochs; final loss {last['mean_overall']:.4f}")
    print(f"checkpoint: {out / 'checkpoints' / 'final.pt'}")
    return 0


def cmd_eval(args) -> int:
    v = merge(args, EVAL_OPTIONS, list_keys=("manifest",))
    _require(v, "checkpoint", "manifest", "out")
    manifests = v["manifest"] if isinstance(v["manifest"], list) else [v["manifest"]]
    out = Path(v["out"])
    ckpt = load_checkpoint(v["checkpoint"])
    model = ckpt.build_model()
    names = display_names(manifests)
    loaded = [_load_manifest_arg(p, names[str(p)]) for p in manifests]
    write_effective_config(v, out)
    rows = []
    for m in loaded:
        ss = predict(model, m)
        if len(ss) < len(m):
            log.warning("%s: %d sample(s) excluded (missing files)", m.name, len(m) - len(ss))
        rows.extend(evaluate_scores(ss, m.name, out, v["threshold"], v["fdr"], v["bins"]))
    txt, _ = write_report(rows, out)
    print(txt.read_text(encoding="utf-8"), end="")
    return 0


def cmd_cross_eval(args) -> int:
    opts = dict(TRAIN_OPTIONS)
    opts.pop("manifest")
    opts.update({"train": (str, None), "test": (str, None), "checkpoint": (str, None), "include_self": (str, "false")})
    opts.update({k: EVAL_OPTIONS[k] for k in ("threshold", "fdr", "bins")})
    v = merge(args, opts, list_keys=("train", "test", "checkpoint"))
    if not v.get("test"):
        raise UsageError("cross-eval needs at least one --test manifest")
    _require(v, "train", "seed", "out")
    out = Path(v["out"])
    names = display_names(v["train"] + v["test"])
    trains = [_load_manifest_arg(p, names[str(p)]) for p in v["train"]]
    tests = [_load_manifest_arg(p, names[str(p)]) for p in v["test"]]
    ckpts = v.get("checkpoint") or []
    if ckpts and len(ckpts) != len(trains):
        raise UsageError("give either no --checkpoint or one per --train manifest")
    write_effective_config(v, out)
    include_self = _as_bool(v["include_self"])
    cells = {}
    all_rows = []
    for i, tr in enumerate(trains):
        has_splits = {e.split for e in tr} == {"train", "test"}
        targets = [(t.name, t) for t in tests if t.name != tr.name]
        if include_self:
            targets.insert(0, (tr.name, tr.split("test") if has_splits else tr))
        if not targets:
            continue
        cell_dir = out / tr.name
        spec = ProtocolSpec(
            train_manifest=tr.split("train") if has_splits else tr,
            test_manifests=[t for _, t in targets],
            variant=v["variant"],
            seed=v["seed"],
            train_config=_train_config(v, cell_dir),
            checkpoint=load_checkpoint(ckpts[i]) if ckpts else None,
            threshold=v["threshold"],
            fdr=v["fdr"],
            bins=v["bins"],
            names=[name for name, _ in targets],
        )
        rows = run_protocol(spec, cell_dir)
        all_rows.extend(rows)
        by_name = {r.name: r for r in rows}
        for name, _ in targets:
            cells[(tr.name, name)] = by_name[name]
    grid = cross_database_grid(cells, out)
    write_report(all_rows, out, stem="report")
    print((out / "cross_db.txt").read_text(encoding="utf-8"), end="")
    return 0 if grid else 1


def cmd_cam(args) -> int:
    if args.layer not in LEVELS:
        raise UsageError(f"--layer must be one of {LEVELS}, got {args.layer!r}")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    image_path = Path(args.image)
    x = preprocess(image_path, PreprocessConfig.from_backbone(model.config))
    hm = score_cam(model, x, args.layer, sample_ref=str(image_path))
    out = Path(args.out) if args.out else image_path.with_name(f"{image_path.stem}_cam_{args.layer}.png")
    render_heatmap(hm, image_path, out, alpha=args.alpha)
    if args.csv:
        hm.to_csv(args.csv)
    print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    types = tuple(t.strip() for t in args.attack_types.split(",") if t.strip())
    m = synth_dataset(
        args.seed,
        args.n,
        args.out,
        size=args.size,
        attack_types=types,
        split=args.split,
        subject_prefix=args.subject_prefix,
    )
    labels = np.array([e.label for e in m])
    print(f"wrote {len(m)} images ({int((labels == 0).sum())} bona fide, {int(labels.sum())} attack) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="irispad", description="Iris presentation attack detection: PBS / A-PBS toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add_train_flags(sp, with_manifest=True):
        sp.add_argument("--config", help="flat key=value config file; flags override it")
        sp.add_argument("--variant", choices=VARIANTS)
        if with_manifest:
            sp.add_argument("--manifest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--lambda", dest="lambda", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--weight-decay", type=float)
        sp.add_argument("--lr-halving-period", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--resolution", type=int)
        sp.add_argument("--arch")
        sp.add_argument("--pretrained", help="'random', 'imagenet' or a path to DenseNet weights")
        sp.add_argument("--augment", choices=("true", "false"))

    t = sub.add_parser("train", help="train a model on a manifest")
    add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score manifests with a checkpoint and write reports")
    e.add_argument("--config")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", action="append")
    e.add_argument("--out")
    e.add_argument("--threshold", type=float)
    e.add_argument("--fdr", type=float, help="FDR operating point as a fraction (0.002 = 0.2%%)")
    e.add_argument("--bins", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cross-eval", help="train on each --train manifest and test on the others")
    add_train_flags(c, with_manifest=False)
    c.add_argument("--train", action="append")
    c.add_argument("--test", action="append")
    c.add_argument("--checkpoint", action="append", help="pre-trained checkpoint per --train, in order")
    c.add_argument("--include-self", choices=("true", "false"))
    c.add_argument("--threshold", type=float)
    c.add_argument("--fdr", type=float)
    c.add_argument("--bins", type=int)
    c.set_defaults(func=cmd_cross_eval)

    m = sub.add_parser("cam", help="Score-CAM overlay for one image")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--image", required=True)
    m.add_argument("--layer", default="high")
    m.add_argument("--out")
    m.add_argument("--csv", help="also write the raw heatmap as CSV")
    m.add_argument("--alpha", type=float, default=0.5)
    m.set_defaults(func=cmd_cam)

    s = sub.add_parser("synth", help="generate the synthetic stand-in dataset")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n", type=int, required=True, help="images per class")
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=224)
    s.add_argument("--attack-types", default="textured_lens")
    s.add_argument("--split", default="train", choices=("train", "test"))
    s.add_argument("--subject-prefix", default="s")
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (PADError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
