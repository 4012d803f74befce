"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage errors, 3 data or I/O errors.
Every command validates its inputs before it writes anything.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import complexity as cx
from .config import RunConfig, dump_config, load_config
from .dataset import DatasetManifest, TaggingDataset, read_manifest
from .distillation import (TeacherLogitsStore, average_ensemble, read_store, store_from_csv,
                           store_to_csv, write_store)
from .errors import AudioKDError, ConfigError, TooShortError
from .frontend import MelConfig, frame_count
from .network import NetworkConfig, build_network, load_checkpoint
from .toy import ToyConfig, make_toy
from .trainer import evaluate, init_state, predict, save_state, train_epoch

log = logging.getLogger("audiokd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class UsageError(ConfigError):
    pass


class DataError(AudioKDError):
    pass


def _data(fn, *args, what: str, **kwargs):
    """Call a loader and turn any failure into a ``DataError`` naming ``what``."""
    try:
        return fn(*args, **kwargs)
    except (OSError, AudioKDError, KeyError, ValueError, UnicodeDecodeError) as exc:
        detail = exc.strerror if isinstance(exc, OSError) and exc.strerror else exc
        raise DataError(f"{what}: {detail}") from None


# ---------------------------------------------------------------- train

def _datasets(cfg: RunConfig):
    p = cfg.paths
    if p.train_manifest is None:
        raise ConfigError("paths.train_manifest is required")
    n = cfg.network.n_classes
    clip = None if p.clip_seconds is None else int(round(p.clip_seconds * cfg.mel.sample_rate))
    train_m = _data(read_manifest, p.train_manifest, n, "train", p.data_root, what=p.train_manifest)
    train = TaggingDataset(train_m, cfg.mel, cfg.augment, clip)
    _data(train.features, what=f"audio listed in {p.train_manifest}")
    ev = None
    if p.eval_manifest is not None:
        eval_m = _data(read_manifest, p.eval_manifest, n, "eval", p.data_root, what=p.eval_manifest)
        ev = TaggingDataset(eval_m, cfg.mel, cfg.augment, clip)
        _data(ev.features, what=f"audio listed in {p.eval_manifest}")
    return train, ev


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.epochs is not None and not 1 <= args.epochs <= cfg.schedule.total_epochs:
        raise UsageError(f"--epochs must lie in [1, {cfg.schedule.total_epochs}]")
    train, ev = _datasets(cfg)
    store = None
    if cfg.kd.uses_teacher:
        if cfg.paths.teacher_store is None:
            raise ConfigError(f"kd.lam={cfg.kd.lam} < 1 needs paths.teacher_store")
        store = _data(read_store, cfg.paths.teacher_store, what=cfg.paths.teacher_store)
        if store.class_count != cfg.network.n_classes:
            raise DataError(f"{cfg.paths.teacher_store}: {store.class_count} classes, "
                            f"network expects {cfg.network.n_classes}")
        _data(store.matrix, train.clip_ids, what=cfg.paths.teacher_store)

    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(dump_config(cfg))
    net_cfg = dataclasses.replace(cfg.network, n_frames=train.features().shape[-1])
    state = init_state(net_cfg, cfg.seed, cfg.adam)
    epochs = args.epochs or cfg.schedule.total_epochs
    extra = {"mel": dataclasses.asdict(cfg.mel)}
    best = -math.inf
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "train_loss", "eval_map"])
        for _ in range(epochs):
            train_epoch(state, train, store, cfg.kd, cfg.schedule, cfg.epoch_size)
            h = state.history[-1]
            score = evaluate(state.model, ev).map if ev is not None else None
            w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"]),
                        "" if score is None else repr(score)])
            fh.flush()
            log.info("epoch %d lr %.3g loss %.4f mAP %s", h["epoch"], h["lr"], h["train_loss"],
                     "-" if score is None else f"{score:.4f}")
            save_state(state, out / "last.npz", extra)
            if score is not None and score > best:
                best = score
                save_state(state, out / "best.npz", extra)
    print(f"trained {epochs} epochs; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"{args.checkpoint}: no such checkpoint")
    net, extra = _data(load_checkpoint, args.checkpoint, what=args.checkpoint)
    mel = MelConfig(**extra["mel"]) if "mel" in extra else MelConfig(n_mels=net.cfg.n_mels)
    n = net.cfg.n_classes
    if args.classes is not None and args.classes != n:
        raise ConfigError(f"checkpoint predicts {n} classes, --classes is {args.classes}")
    # read without a class bound first so a label beyond the network counts as a mismatch
    loose = _data(read_manifest, args.manifest, 2**31 - 1, "eval", what=args.manifest)
    top = max((l for r in loose.rows for l in r.labels), default=-1)
    if top >= n:
        raise ConfigError(f"{args.manifest} uses class {top}, checkpoint predicts only {n} classes")
    manifest = DatasetManifest(loose.rows, n, "eval", loose.root)
    clip = None if args.clip_seconds is None else int(round(args.clip_seconds * mel.sample_rate))
    ds = TaggingDataset(manifest, mel, clip_samples=clip)
    _data(ds.features, what=f"audio listed in {args.manifest}")
    result = _data(evaluate, net, ds, what=args.manifest)
    print(f"mAP {result.map:.6f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "ap"])
            for c, ap in enumerate(result.ap):
                w.writerow([c, "" if np.isnan(ap) else repr(float(ap))])
    return EXIT_OK


# ---------------------------------------------------------------- analyze / frontier

def _analysis(alpha, se, head, mels, hop, duration, classes):
    mel = MelConfig(hop_ms=hop, n_mels=mels)
    try:
        frames = frame_count(int(round(duration * mel.sample_rate)), mel)
    except TooShortError as exc:
        raise UsageError(f"--duration {duration}: {exc}") from None
    cfg = NetworkConfig(alpha=alpha, se_mode=se, head=head, n_mels=mels, n_classes=classes,
                        n_frames=frames)
    return cx.analyze(build_network(cfg).describe(frames))


def _add_net_flags(p):
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--se", default="channel", choices=["none", "channel", "frequency"])
    p.add_argument("--head", default="mlp")
    p.add_argument("--mels", type=int, default=128)
    p.add_argument("--hop", type=float, default=10.0, help="hop length in ms")
    p.add_argument("--duration", type=float, default=10.0, help="clip length in seconds")
    p.add_argument("--classes", type=int, default=527)


def cmd_analyze(args) -> int:
    rep = _analysis(args.alpha, args.se, args.head, args.mels, args.hop, args.duration, args.classes)
    if args.csv:
        label = args.label or f"mn{args.alpha:g}_{args.se}_{args.head}"
        sys.stdout.write(cx.write_frontier_csv([cx.FrontierRow(label, rep.total_params, rep.total_macs,
                                                               float("nan"))]))
    else:
        print(rep.table())
    return EXIT_OK


_SPEC_KEYS = {"alpha": float, "se": str, "head": str, "mels": int, "hop": float, "duration": float,
              "classes": int}


def parse_spec(text: str) -> tuple[str, dict]:
    """``label:alpha=0.5,se=channel`` (label optional) into keyword arguments."""
    label, sep, body = text.partition(":")
    if not sep:
        label, body = "", text
    kw = {"alpha": 1.0, "se": "channel", "head": "mlp", "mels": 128, "hop": 10.0, "duration": 10.0,
          "classes": 527}
    for item in filter(None, body.split(",")):
        key, eq, value = item.partition("=")
        if not eq or key not in _SPEC_KEYS:
            raise UsageError(f"bad spec item {item!r} (keys: {', '.join(_SPEC_KEYS)})")
        try:
            kw[key] = _SPEC_KEYS[key](value)
        except ValueError:
            raise UsageError(f"spec {text!r}: {key} must be {_SPEC_KEYS[key].__name__}") from None
    return label or f"mn{kw['alpha']:g}", kw


def _read_scores(path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    scores = {}
    for lineno, row in enumerate(rows, 1):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: expected label,score")
        try:
            scores[row[0]] = float(row[1])
        except ValueError:
            if lineno != 1:
                raise DataError(f"{path}:{lineno}: score {row[1]!r} is not a number") from None
    return scores


def cmd_frontier(args) -> int:
    specs = [parse_spec(s) for s in args.specs]
    if len({label for label, _ in specs}) != len(specs):
        raise UsageError("spec labels must be unique")
    scores = _data(_read_scores, args.scores, what=args.scores) if args.scores else {}
    points = [(label, _analysis(**kw), scores.get(label, float("nan"))) for label, kw in specs]
    text = cx.write_frontier_csv(cx.frontier(points))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- teacher

def cmd_teacher_import(args) -> int:
    store = _data(store_from_csv, args.csv, args.classes, what=args.csv)
    if args.name:
        store.teacher = args.name
    write_store(store, args.out)
    print(f"wrote {len(store)} records x {store.class_count} classes to {args.out}")
    return EXIT_OK


def cmd_teacher_export(args) -> int:
    """Run a trained checkpoint over a manifest and write ``clip_id,z_0..`` rows for import-csv."""
    if not Path(args.checkpoint).is_file():
        raise DataError(f"{args.checkpoint}: no such checkpoint")
    net, extra = _data(load_checkpoint, args.checkpoint, what=args.checkpoint)
    mel = MelConfig(**extra["mel"]) if "mel" in extra else MelConfig(n_mels=net.cfg.n_mels)
    manifest = _data(read_manifest, args.manifest, net.cfg.n_classes, "eval", what=args.manifest)
    ds = TaggingDataset(manifest, mel)
    feats = _data(ds.features, what=f"audio listed in {args.manifest}")
    store = TeacherLogitsStore(dict(zip(ds.clip_ids, predict(net, feats))), net.cfg.n_classes,
                               Path(args.checkpoint).stem)
    store_to_csv(store, args.out)
    print(f"wrote logits for {len(store)} clips to {args.out}")
    return EXIT_OK


def cmd_teacher_average(args) -> int:
    stores = [_data(read_store, p, what=p) for p in args.inputs]
    merged = _data(average_ensemble, stores, what="average")
    write_store(merged, args.out)
    print(f"averaged {len(stores)} stores into {args.out}")
    return EXIT_OK


def cmd_teacher_inspect(args) -> int:
    store = _data(read_store, args.store, what=args.store)
    print(f"file {args.store}")
    print(f"records {len(store)}")
    print(f"classes {store.class_count}")
    m = store.matrix(store.ids())
    if len(m):
        print("class,mean,std,min,max")
        for c in range(store.class_count):
            col = m[:, c].astype(np.float64)
            print(f"{c},{col.mean():.6g},{col.std():.6g},{col.min():.6g},{col.max():.6g}")
    return EXIT_OK


# ---------------------------------------------------------------- make-toy

TOY_CONFIG = """\
# synthetic 10-class task; edit freely
mel.n_mels=64
network.n_classes=10
network.alpha=0.25
paths.train_manifest={root}/train.csv
paths.eval_manifest={root}/eval.csv
paths.output_dir={root}/run
schedule.max_lr=2e-3
schedule.warmup_epochs=1
schedule.decay_start=12
schedule.decay_end=26
schedule.total_epochs=30
schedule.batch_size=64
kd.lam=1.0
"""


def cmd_make_toy(args) -> int:
    cfg = ToyConfig(n_train=args.n_train, n_eval=args.n_eval, seed=args.seed)
    if cfg.n_train < 1 or cfg.n_eval < 1:
        raise UsageError("--n-train and --n-eval must be positive")
    paths = make_toy(args.out, cfg)
    root = Path(args.out).resolve()
    (root / "toy.cfg").write_text(TOY_CONFIG.format(root=root))
    print(f"wrote {paths['train']} and {paths['eval']}; config {root / 'toy.cfg'}")
    return EXIT_OK


# ---------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="audiokd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a config file")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--epochs", type=int, help="stop after this many epochs of the schedule")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="mAP of a checkpoint on a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--classes", type=int, help="class count of the manifest (default: the network's)")
    p.add_argument("--clip-seconds", type=float)
    p.add_argument("--out", help="per-class AP CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="parameter and MAC count per layer")
    _add_net_flags(p)
    p.add_argument("--csv", action="store_true", help="emit a frontier CSV row instead of the table")
    p.add_argument("--label")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("frontier", help="frontier CSV for several network specs")
    p.add_argument("specs", nargs="+", help="label:alpha=0.5,se=channel,head=mlp,mels=128,hop=10")
    p.add_argument("--scores", help="CSV of label,score")
    p.add_argument("--out")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("teacher", help="teacher logit stores")
    tsub = p.add_subparsers(dest="teacher_command", required=True)
    q = tsub.add_parser("import-csv", help="convert clip_id,z_0..z_C-1 rows to a store")
    q.add_argument("csv")
    q.add_argument("out")
    q.add_argument("--classes", type=int)
    q.add_argument("--name")
    q.set_defaults(func=cmd_teacher_import)
    q = tsub.add_parser("export", help="write a checkpoint's logits on a manifest as CSV")
    q.add_argument("checkpoint")
    q.add_argument("manifest")
    q.add_argument("out")
    q.set_defaults(func=cmd_teacher_export)
    q = tsub.add_parser("average", help="ensemble stores by averaging logits")
    q.add_argument("out")
    q.add_argument("inputs", nargs="+")
    q.set_defaults(func=cmd_teacher_average)
    q = tsub.add_parser("inspect", help="print store metadata and per-class statistics")
    q.add_argument("store")
    q.set_defaults(func=cmd_teacher_inspect)

    p = sub.add_parser("make-toy", help="write the synthetic tagging task")
    p.add_argument("out")
    p.add_argument("--n-train", type=int, default=ToyConfig.n_train)
    p.add_argument("--n-eval", type=int, default=ToyConfig.n_eval)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, AudioKDError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
