"""Command-line entry point: gen, train, sweep, eval, report.

Every option can also come from a ``key = value`` config file (``--config``);
flags win over the file, which wins over built-in defaults. Each run prints
its resolved configuration before doing any work and writes the same text
(minus the timestamped first line) to ``run_config.txt`` in the output
directory.

Exit codes: 0 success, 2 usage, 3 protocol violation, 4 I/O, 5 numeric.
"""

import argparse
import logging
import shutil
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import checkpoint, dataio, metrics
from . import network as nw
from . import training as tr
from .errors import DegenerateInputError, ProtocolError, UsageError
from .tensor import NumericError

log = logging.getLogger("livepad")

EXIT_OK, EXIT_USAGE, EXIT_PROTOCOL, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5

DEFAULTS = {
    "gen": {
        "subjects": 26,
        "per_subject": 20,
        "synthetic": None,
        "attacks_per_species": 40,
        "species": ",".join(dataio.PSEUDO_SPECIES),
    },
    "train": {
        "data": None,
        "lambda": 0.0411,
        "activation": "leaky_relu",
        "negative_slope": 0.01,
        "epochs": 20,
        "lr": 0.001,
        "batch_size": 32,
        "s": 30.0,
        "m": 0.3,
        "alpha": 0.5,
        "preset": "desk",
    },
    "eval": {
        "data": None,
        "checkpoint": None,
        "threshold": "val",
        "bpcer_at": [],
        "aggregation": "unweighted",
    },
    "report": {
        "scores": None,
        "threshold": "0.5",
        "bpcer_at": [],
        "aggregation": "unweighted",
    },
}
DEFAULTS["sweep"] = {
    **DEFAULTS["train"],
    "grid": ",".join(repr(v) for v in tr.DEFAULT_GRID),
    "workers": 1,
}
NOT_CONFIGURABLE = {"command", "config", "force", "verbose"}


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _rate(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a fraction in [0, 1], got {text}")
    return v


def _common(parser, top=False):
    # accepted before or after the subcommand; SUPPRESS keeps the subparser
    # from resetting a value given before it
    dflt = None if top else argparse.SUPPRESS
    flag = False if top else argparse.SUPPRESS
    g = parser.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=dflt, help="master seed (default 0)")
    g.add_argument("--config", default=dflt, help="key = value file; flags override it")
    g.add_argument("--out", default=dflt, help="output directory")
    g.add_argument("--force", action="store_true", default=flag,
                   help="overwrite a non-empty output directory")
    g.add_argument("-v", "--verbose", action="store_true", default=flag)


def _train_options(p):
    p.add_argument("--data", default=None, help="corpus directory written by gen")
    p.add_argument("--lambda", type=float, default=None, help="center-loss weight (default 0.0411)")
    p.add_argument("--activation", choices=("relu", "leaky_relu"), default=None)
    p.add_argument("--negative-slope", type=float, default=None)
    p.add_argument("--epochs", type=_positive_int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=None)
    p.add_argument("--s", type=float, default=None, help="ArcFace scale (default 30)")
    p.add_argument("--m", type=float, default=None, help="ArcFace margin in radians (default 0.3)")
    p.add_argument("--alpha", type=float, default=None, help="center update rate (default 0.5)")
    p.add_argument("--preset", choices=sorted(nw.PRESETS), default=None)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="livepad", description="Fingerprint presentation attack detection toolkit"
    )
    _common(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the procedural corpus")
    _common(p)
    p.add_argument("--subjects", type=_positive_int, default=None)
    p.add_argument("--per-subject", type=_positive_int, default=None)
    p.add_argument("--synthetic", type=int, default=None, help="default: same as live count")
    p.add_argument("--attacks-per-species", type=int, default=None)
    p.add_argument("--species", default=None, help="comma-separated attack species")

    p = sub.add_parser("train", help="train on the live + synthetic train split")
    _common(p)
    _train_options(p)

    p = sub.add_parser("sweep", help="train one model per lambda and select by validation AUC")
    _common(p)
    _train_options(p)
    p.add_argument("--grid", default=None, help="comma-separated lambda values")
    p.add_argument("--workers", type=_positive_int, default=None)

    p = sub.add_parser("eval", help="score the test split and report APCER/BPCER/ACER")
    _common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--threshold", default=None, help="'val' (ACER-optimal on val) or a number")
    p.add_argument("--bpcer-at", type=_rate, action="append", default=None,
                   help="also report BPCER at this APCER (repeatable)")
    p.add_argument("--aggregation", choices=metrics.AGGREGATIONS, default=None,
                   help="overall APCER: mean over species or pooled over samples")

    p = sub.add_parser("report", help="render a report table from a score CSV")
    _common(p)
    p.add_argument("scores", nargs="?", default=None)
    p.add_argument("--threshold", default=None)
    p.add_argument("--bpcer-at", type=_rate, action="append", default=None)
    p.add_argument("--aggregation", choices=metrics.AGGREGATIONS, default=None)
    return parser


# ---------------------------------------------------------------------------
# configuration resolution


def _sub_actions(parser, command):
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return {a.dest: a for a in action.choices[command]._actions}
    return {}


def _coerce(action, value):
    if isinstance(action, argparse._AppendAction):
        items = value if isinstance(value, list) else str(value).split(",")
        return [action.type(str(v).strip()) if action.type else v for v in items if str(v).strip()]
    if action.type is None or value is None:
        return value
    try:
        return action.type(str(value))
    except (argparse.ArgumentTypeError, ValueError) as exc:
        raise UsageError(f"config value for {action.dest!r}: {exc}") from None


def resolve(parser, args):
    """Merge built-in defaults, the config file and command-line flags."""
    given = vars(args)
    cmd = given["command"]
    actions = _sub_actions(parser, cmd)
    resolved = {"seed": 0, "out": None, **DEFAULTS[cmd]}
    if given.get("config"):
        try:
            text = Path(given["config"]).read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {given['config']}: {exc.strerror}") from exc
        try:
            from_file = checkpoint.load_kv(text)
        except ValueError as exc:
            raise UsageError(f"{given['config']}: {exc}") from None
        unknown = sorted(set(from_file) - set(resolved))
        if unknown:
            raise UsageError(f"{given['config']}: unknown keys for '{cmd}': {', '.join(unknown)}")
        for key, value in from_file.items():
            resolved[key] = _coerce(actions[key], value) if key in actions else value
    for key, value in given.items():
        if key in NOT_CONFIGURABLE or value is None:
            continue
        resolved[key] = value
    resolved["command"] = cmd
    return resolved


def header_text(resolved):
    shown = {}
    for k, v in resolved.items():
        if v is None:
            continue
        shown[k] = ",".join(repr(x) for x in v) if isinstance(v, list) else v
    return checkpoint.dump_kv(shown)


def start_run(resolved, force, check_empty=True):
    """Prepare the output directory and write the reproducibility header."""
    if not resolved.get("out"):
        raise UsageError(f"'{resolved['command']}' needs --out")
    out = Path(resolved["out"])
    if check_empty and out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    text = header_text(resolved)
    stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    sys.stdout.write(f"# livepad {resolved['command']} started {stamp}\n{text}")
    sys.stdout.flush()
    (out / "run_config.txt").write_text(text, encoding="utf-8")
    return out


def _need(resolved, key):
    if resolved.get(key) in (None, ""):
        raise UsageError(f"'{resolved['command']}' needs --{key.replace('_', '-')}")
    return resolved[key]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(resolved, force):
    species = tuple(s.strip() for s in str(resolved["species"]).split(",") if s.strip())
    cfg = dataio.GeneratorConfig(
        subjects=resolved["subjects"],
        per_subject=resolved["per_subject"],
        synthetic=resolved["synthetic"],
        attacks_per_species=resolved["attacks_per_species"],
        species=species,
    )
    if cfg.subjects < 1 or cfg.per_subject < 1:
        raise UsageError("--subjects and --per-subject must be >= 1")
    out = Path(_need(resolved, "out"))
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        # only remove what gen itself writes
        shutil.rmtree(out / "tensors", ignore_errors=True)
        (out / "manifest.jsonl").unlink(missing_ok=True)
    start_run(resolved, force=True, check_empty=False)
    manifest, images = dataio.generate_synthetic(cfg, resolved["seed"])
    manifest = dataio.write_corpus(out, manifest, images)
    print(f"wrote {len(manifest)} records for {len(manifest.subjects())} subjects to {out}")
    for split in dataio.SPLITS:
        recs = manifest.select(split=split)
        kinds = {}
        for r in recs:
            key = f"attack:{r.pai_species}" if r.cls == "attack" else r.cls
            kinds[key] = kinds.get(key, 0) + 1
        print(f"  {split:<5}  " + "  ".join(f"{k}={v}" for k, v in sorted(kinds.items())))
    return EXIT_OK


def _load_corpus(resolved):
    root = Path(_need(resolved, "data"))
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.exists():
        raise OSError(f"no manifest.jsonl in {root}")
    return root, dataio.read_manifest(manifest_path)


def _configs(resolved):
    net_cfg = nw.PRESETS[resolved["preset"]](
        activation=resolved["activation"], negative_slope=resolved["negative_slope"]
    )
    train_cfg = tr.TrainConfig(
        epochs=resolved["epochs"],
        lr=resolved["lr"],
        batch_size=resolved["batch_size"],
        lam=resolved["lambda"],
        seed=resolved["seed"],
        s=resolved["s"],
        m=resolved["m"],
        alpha=resolved["alpha"],
    )
    return net_cfg, train_cfg


def cmd_train(resolved, force):
    out = start_run(resolved, force)
    root, manifest = _load_corpus(resolved)
    net_cfg, train_cfg = _configs(resolved)
    data = dataio.load_split(root, manifest, "train")
    net = nw.build(net_cfg, seed=train_cfg.seed, s=train_cfg.s, m=train_cfg.m)
    result = tr.train(net, data, train_cfg)
    (out / "loss_log.tsv").write_text(tr.format_loss_log(result.log), encoding="utf-8")
    extra = {**train_cfg.to_dict(), "train.samples": len(data)}
    nw.save(out / "model.ckpt", net, extra)
    last = result.log[-1]
    print(f"trained {len(data)} samples for {train_cfg.epochs} epochs; "
          f"final joint {last[1]:.6f} (arcface {last[2]:.6f}, center {last[3]:.6f})")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return EXIT_OK


def _parse_grid(text):
    try:
        grid = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse lambda grid {text!r}") from None
    if not grid:
        raise UsageError("lambda grid is empty")
    return grid


def cmd_sweep(resolved, force):
    grid = _parse_grid(resolved["grid"])
    out = start_run(resolved, force)
    root, manifest = _load_corpus(resolved)
    net_cfg, train_cfg = _configs(resolved)
    train_data = dataio.load_split(root, manifest, "train")
    val_data = dataio.load_split(root, manifest, "val")
    result = tr.sweep_lambda(grid, net_cfg, train_cfg, train_data, val_data, resolved["workers"])
    for i, e in enumerate(result.entries):
        (out / f"roc_{i:02d}.csv").write_text(e.roc.to_csv(), encoding="utf-8")
        (out / f"loss_log_{i:02d}.tsv").write_text(tr.format_loss_log(e.log), encoding="utf-8")
    (out / "sweep_summary.csv").write_text(result.summary_csv(), encoding="utf-8")
    for e in result.entries:
        mark = "  <- selected" if e.lam == result.selected else ""
        print(f"  lambda {e.lam!r:<10} auc {e.auc:.6f}{mark}")
    return EXIT_OK


def _scoreset_rows(net, data, bona_class="live"):
    scores = nw.score(net, data.images)
    rows = []
    for sid, cls, species, s in zip(data.ids, data.classes, data.species, scores):
        label = "bona_fide" if cls == bona_class else "attack"
        rows.append((sid, label, species if label == "attack" else None, s))
    return rows


def _rows_to_scoreset(rows):
    bona = [s for _, label, _, s in rows if label == "bona_fide"]
    attacks = {}
    for _, label, species, s in rows:
        if label == "attack":
            attacks.setdefault(species, []).append(s)
    return metrics.ScoreSet(bona, attacks)


def _threshold(resolved, net=None, root=None, manifest=None):
    value = str(resolved["threshold"])
    if value != "val":
        try:
            return float(value)
        except ValueError:
            raise UsageError(f"--threshold must be 'val' or a number, got {value!r}") from None
    if net is None:
        raise UsageError("--threshold val needs a checkpoint and corpus")
    val = dataio.load_split(root, manifest, "val")
    return metrics.select_threshold(tr.validation_scoreset(net, val))


def cmd_eval(resolved, force):
    out = start_run(resolved, force)
    root, manifest = _load_corpus(resolved)
    test = manifest.select(split="test")
    if not any(r.cls != "live" for r in test):
        raise UsageError("test split has no attack samples")
    if not any(r.cls == "live" for r in test):
        raise UsageError("test split has no bona fide samples")
    net, _ = nw.load(_need(resolved, "checkpoint"))
    threshold = _threshold(resolved, net, root, manifest)
    rows = _scoreset_rows(net, dataio.load_split(root, manifest, "test"))
    metrics.write_scores(out / "scores.csv", rows)
    scoreset = _rows_to_scoreset(rows)
    report = metrics.evaluate(scoreset, threshold, resolved["bpcer_at"], resolved["aggregation"])
    (out / "roc.csv").write_text(metrics.roc(scoreset).to_csv(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_kv(), encoding="utf-8")
    sys.stdout.write(report.render())
    return EXIT_OK


def cmd_report(resolved, force):
    path = _need(resolved, "scores")
    if resolved.get("out"):
        out = start_run(resolved, force)
    else:
        out = None
        sys.stdout.write(header_text(resolved))
    scoreset = metrics.read_scores(path)
    report = metrics.evaluate(
        scoreset, _threshold(resolved), resolved["bpcer_at"], resolved["aggregation"]
    )
    if out is not None:
        (out / "report.txt").write_text(report.to_kv(), encoding="utf-8")
    sys.stdout.write(report.render())
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or bad usage; return rather than exit
        return exc.code
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        resolved = resolve(parser, args)
        return COMMANDS[resolved["command"]](resolved, args.force)
    except ProtocolError as exc:
        print(f"livepad: protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (NumericError, FloatingPointError, DegenerateInputError) as exc:
        print(f"livepad: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"livepad: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # UsageError, ManifestError, ConfigurationError, DimensionError
        print(f"livepad: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
