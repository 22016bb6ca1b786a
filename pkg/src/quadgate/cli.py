"""Command-line driver: synth, train, eval, gradcheck, mixdemo.

Exit codes: 0 success, 2 configuration or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError, QuadgateError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

THREADS_ENV = "QUADGATE_THREADS"

log = logging.getLogger("quadgate")


# ----------------------------------------------------------------------
# config files
# ----------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from None
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigurationError(f"{path}:{lineno}: key {key!r} given twice")
        out[key] = value
    return out


def _parse_bool(key: str, text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"{key}: expected a boolean, got {text!r}")


def coerce(key: str, text: str, current):
    """Parse ``text`` into the type of ``current``, the value it replaces."""
    from .data import Modality

    try:
        if isinstance(current, bool):
            return _parse_bool(key, text)
        if isinstance(current, Modality):
            return Modality.parse(text)
        if isinstance(current, tuple):
            parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
            kind = type(current[0]) if current else int
            return tuple(kind(p.strip()) for p in parts)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if current is None:
            return None if text.strip().lower() == "none" else int(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {text!r}") from None


def _apply(obj, overrides: dict, used: set):
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in overrides.items():
        if key in names:
            changes[key] = coerce(key, text, getattr(obj, key))
            used.add(key)
    return dataclasses.replace(obj, **changes) if changes else obj


# ----------------------------------------------------------------------
# resolved run configuration
# ----------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    seed: int
    model: object = None
    train: object = None
    synth: object = None
    options: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def plain(obj):
            if obj is None:
                return None
            d = obj.to_dict() if hasattr(obj, "to_dict") else dataclasses.asdict(obj)
            return {k: (v.value if hasattr(v, "value") else list(v) if isinstance(v, tuple) else v)
                    for k, v in d.items()}

        return {"command": self.command, "seed": self.seed, "model": plain(self.model),
                "train": plain(self.train), "synth": plain(self.synth), "options": self.options}

    def echo(self, stream=None) -> None:
        print("config " + json.dumps(self.to_dict(), sort_keys=True), file=stream or sys.stdout, flush=True)


RUN_KEYS = ("preset", "holdout")


def resolve_train(args) -> RunConfig:
    from .model import desk_config, paper_config
    from .training import desk_training, paper_training

    file_values = read_config_file(args.config) if args.config else {}
    preset = file_values.get("preset", "desk")
    if preset not in ("desk", "paper"):
        raise ConfigurationError(f"preset must be 'desk' or 'paper', got {preset!r}")
    model = desk_config() if preset == "desk" else paper_config()
    train = desk_training() if preset == "desk" else paper_training()
    used: set = set(RUN_KEYS)
    model = _apply(model, file_values, used)
    train = _apply(train, file_values, used)
    unknown = sorted(set(file_values) - used)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    holdout = int(file_values.get("holdout", 0))

    flags = {}
    if args.epochs is not None:
        flags["epochs"] = args.epochs
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.no_transmix:
        flags["transmix"] = False
    if args.modality is not None:
        flags["modality"] = args.modality
    train = dataclasses.replace(train, **flags)
    if args.regions is not None:
        model = model.replace(num_regions=args.regions)
    if args.aggregator is not None:
        model = model.replace(aggregator_kind=args.aggregator)
    if args.holdout is not None:
        holdout = args.holdout
    model.validate()
    if train.epochs < 1 or train.batch_size < 1:
        raise ConfigurationError("epochs and batch_size must be positive")
    if holdout < 0:
        raise ConfigurationError("holdout must be non-negative")
    options = {"preset": preset, "holdout": holdout, "data": str(args.data), "out": str(args.out),
               "test_data": None if args.test_data is None else str(args.test_data)}
    return RunConfig("train", train.seed, model=model, train=train, options=options)


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def report_paths(out) -> dict[str, Path]:
    """Files written next to a checkpoint (or a report prefix)."""
    out = Path(out)
    base = out.with_suffix("") if out.suffix else out
    return {
        "csv": base.with_name(base.name + ".metrics.csv"),
        "dat": base.with_name(base.name + ".metrics.dat"),
        "png": base.with_name(base.name + ".history.png"),
    }


def _table_line(cells, widths) -> str:
    return "  ".join(str(c).rjust(w) for c, w in zip(cells, widths))


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}" if abs(v) >= 1e-3 or v == 0 else f"{v:.3e}"
    return str(v)


def cmd_synth(args) -> int:
    from .data import SyntheticSpec, generate_synthetic, write_dataset

    if args.n < 1 or args.side < 8:
        raise ConfigurationError("need --n >= 1 and --side >= 8")
    spec = SyntheticSpec(size=args.n, side=args.side, modality=args.modality, seed=args.seed)
    RunConfig("synth", args.seed, synth=spec, options={"out": str(args.out)}).echo()
    samples = generate_synthetic(spec)
    try:
        write_dataset(samples, args.out)
    except OSError as exc:
        raise ConfigurationError(f"cannot write to {args.out}: {exc.strerror or exc}") from None
    scores = np.array([s.score for s in samples])
    print(f"wrote {len(samples)} images to {args.out}; score mean {scores.mean():.3f}, "
          f"min {scores.min():.3f}, max {scores.max():.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset, train_test_split
    from .model import QCrossAttPVT
    from .plotting import plot_history, write_gnuplot_dat
    from .training import METRICS_HEADER, train

    run = resolve_train(args)
    run.echo()
    model_cfg, train_cfg = run.model, run.train
    size = model_cfg.input_size
    samples = load_dataset(args.data, modality=train_cfg.modality, size=size)
    samples = [_to_channels(s, model_cfg.channels) for s in samples]
    holdout = run.options["holdout"]
    if args.test_data is not None:
        test = [_to_channels(s, model_cfg.channels)
                for s in load_dataset(args.test_data, modality=train_cfg.modality, size=size)]
        train_set = samples
    elif holdout:
        if holdout >= len(samples):
            raise ConfigurationError(f"holdout {holdout} leaves no training samples out of {len(samples)}")
        train_set, test = train_test_split(samples, holdout)
    else:
        train_set, test = samples, None

    paths = report_paths(args.out)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    widths = (5, 5, 9, 9, 9, 10, 9)
    print(_table_line(METRICS_HEADER, widths))

    def show(row):
        print(_table_line([_fmt(row[k]) for k in METRICS_HEADER], widths), flush=True)

    model = QCrossAttPVT(model_cfg, seed=run.seed)
    # on a non-finite loss, train() saves the last finite parameters to args.out and raises
    result = train(model, train_set, train_cfg, test_set=test, metrics_path=paths["csv"],
                   checkpoint_path=args.out, on_epoch=show)
    write_gnuplot_dat(result.rows, paths["dat"])
    plot_history(result.rows, paths["png"])
    print(f"checkpoint {args.out}")
    print(f"metrics {paths['csv']} {paths['dat']} {paths['png']}")
    if train_cfg.transmix:
        print(f"transmix replaced {result.mixed_count} samples")
    return EXIT_OK


def _to_channels(sample, channels: int):
    """Grayscale loaders give one channel; tile it when the model expects more."""
    if sample.image.shape[0] == channels:
        return sample
    if sample.image.shape[0] != 1:
        raise DataError(f"{sample.id}: cannot map {sample.image.shape[0]} channels to {channels}")
    return dataclasses.replace(sample, image=np.repeat(sample.image, channels, axis=0))


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset, stack
    from .model import EnsembleSpec, ensemble_predict
    from .plotting import plot_predictions
    from .training import evaluate

    models = [load_checkpoint(p) for p in args.ckpt]
    first = models[0].config
    RunConfig("eval", 0, model=first,
              options={"ckpt": [str(p) for p in args.ckpt], "data": str(args.data),
                       "modality": args.modality, "out": None if args.out is None else str(args.out)}).echo()
    for path, m in zip(args.ckpt, models):
        if (m.config.input_size, m.config.channels) != (first.input_size, first.channels):
            raise ConfigurationError(f"{path}: input {m.config.input_size}x{m.config.channels}ch differs from "
                                     f"{args.ckpt[0]}: {first.input_size}x{first.channels}ch")
    samples = load_dataset(args.data, modality=args.modality)
    shapes = {s.image.shape[1:] for s in samples}
    if shapes != {tuple(first.input_size)}:
        raise ConfigurationError(f"data images are {sorted(shapes)}, checkpoints expect {tuple(first.input_size)}")
    samples = [_to_channels(s, first.channels) for s in samples]
    images, scores = stack(samples)

    rows = []
    series = {}
    for path, m in zip(args.ckpt, models):
        preds = m.predict(images)
        series[Path(path).name] = preds
        rows.append((str(path), evaluate(preds, scores)))
    if len(models) > 1:
        preds = ensemble_predict(EnsembleSpec(models), images)
        series["ensemble"] = preds
        rows.append(("ensemble", evaluate(preds, scores)))

    name_w = max(len("model"), *(len(r[0]) for r in rows))
    widths = (name_w, 5, 9, 9, 9)
    print(_table_line(("model", "n", "mae", "pc", "ae_sd"), widths))
    for name, met in rows:
        print(_table_line((name, len(scores), _fmt(met.mae), _fmt(met.pc), _fmt(met.ae_sd)), widths))
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(("model", "n", "mae", "pc", "ae_sd"))
            for name, met in rows:
                wr.writerow((name, len(scores), repr(met.mae), "NA" if met.pc is None else repr(met.pc),
                             repr(met.ae_sd)))
        with open(out / "predictions.dat", "w") as fh:
            fh.write("# id score " + " ".join(series) + "\n")
            for i, s in enumerate(samples):
                fh.write(" ".join([s.id, repr(float(scores[i]))] + [repr(float(p[i])) for p in series.values()]))
                fh.write("\n")
        from .data import Modality

        plot_predictions(series, scores, out / "predictions.png", Modality.parse(args.modality).range_max)
        print(f"report {out / 'eval.csv'} {out / 'predictions.dat'} {out / 'predictions.png'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    if args.size < 16 or args.size % 16:
        raise ConfigurationError("--size must be a positive multiple of 16 (two regions of four 2x stages)")
    RunConfig("gradcheck", args.seed, options={"size": args.size, "layers_only": args.layers_only,
                                                "tolerance": TOLERANCE}).echo()

    def show(name, err):
        flag = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<60s} {err:.3e} {flag}", flush=True)

    report = run_gradcheck(args.size, args.seed, end_to_end=not args.layers_only, on_entry=show)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: {len(report.entries)} blocks, max relative error {report.worst:.3e} (tolerance {TOLERANCE:g})")
    for name, err in report.failures():
        print(f"  failed {name} {err:.3e}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_mixdemo(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_dataset, write_pgm
    from .plotting import plot_mix_panel
    from .transmix import EligibilityRule, apply_cutmix, compute_lambda, mixed_score, sample_cut_mask

    model = load_checkpoint(args.ckpt)
    cfg = model.config
    RunConfig("mixdemo", args.seed, model=cfg,
              options={"ckpt": str(args.ckpt), "data": str(args.data), "pairs": args.pairs,
                       "modality": args.modality, "out": str(args.out)}).echo()
    if args.pairs < 1:
        raise ConfigurationError("--pairs must be at least 1")
    samples = [_to_channels(s, cfg.channels)
               for s in load_dataset(args.data, modality=args.modality, size=cfg.input_size)]
    if len(samples) < 2:
        raise DataError("mixing needs at least two samples")
    rule = EligibilityRule.for_modality(args.modality)
    anchors = [i for i, s in enumerate(samples) if rule(s.score)]
    if not anchors:
        raise DataError(f"no sample is eligible for mixing under modality {args.modality}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    h, w = cfg.input_size
    lines, panel = [], []
    for k in range(args.pairs):
        i = anchors[int(rng.integers(len(anchors)))]
        j = int(rng.integers(len(samples) - 1))
        j += j >= i
        a, b = samples[i], samples[j]
        cut = sample_cut_mask(h, w, rng)
        mixed = apply_cutmix(a.image, b.image, cut)
        att = model.attention_maps(mixed[None])[0]
        lam = compute_lambda(att, cut, att.shape)
        ybar = mixed_score(a.score, b.score, lam)
        write_pgm(out / f"mix{k:03d}_{a.id}_{b.id}.pgm", mixed)
        lines.append((a.id, b.id, repr(float(a.score)), repr(float(b.score)), repr(lam), repr(ybar)))
        panel.append((a.image, b.image, mixed, f"yA={a.score:.2f} yB={b.score:.2f} lam={lam:.3f} ybar={ybar:.2f}"))
    with open(out / "mixdemo.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("idA", "idB", "yA", "yB", "lambda", "ybar"))
        wr.writerows(lines)
    for line in lines:
        print(",".join(line))
    plot_mix_panel(panel[:8], out / "mixdemo.png")
    return EXIT_OK


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadgate", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic P5 dataset with known scores")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--side", type=int, default=64)
    s.add_argument("--modality", choices=("ge", "lo", "cip"), default="cip")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint plus metrics")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--test-data", type=Path, default=None, help="separate evaluation set")
    t.add_argument("--holdout", type=int, default=None, help="evaluate on the last N samples of --data")
    t.add_argument("--config", type=Path, default=None, help="flat key = value overrides")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--modality", choices=("ge", "lo", "cip"), default=None)
    t.add_argument("--no-transmix", action="store_true")
    t.add_argument("--regions", type=int, choices=(2, 4, 6), default=None)
    t.add_argument("--aggregator", choices=("vit", "gap", "pvt"), default=None)
    t.add_argument("--out", type=Path, default=Path("model.ckpt"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score checkpoints, and their mean when several are given")
    e.add_argument("--ckpt", required=True, nargs="+", type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--modality", choices=("ge", "lo", "cip"), default="cip")
    e.add_argument("--out", type=Path, default=None, help="directory for CSV, data file and figure")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference checks of every backward rule")
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layers-only", action="store_true", help="skip the whole-model check")
    g.set_defaults(func=cmd_gradcheck)

    m = sub.add_parser("mixdemo", help="mix image pairs and report attention-weighted labels")
    m.add_argument("--data", required=True, type=Path)
    m.add_argument("--ckpt", required=True, type=Path)
    m.add_argument("--pairs", type=int, default=8)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--modality", choices=("ge", "lo", "cip"), default="cip")
    m.add_argument("--out", required=True, type=Path)
    m.set_defaults(func=cmd_mixdemo)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError(f"{THREADS_ENV} must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QuadgateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
