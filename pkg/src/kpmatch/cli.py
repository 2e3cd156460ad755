"""``kpm`` command line: synth, train, eval, gradcheck, match.

Every RunConfig field is a flag (``--tau-kpm 0.05``, ``--attention false``).
Values merge as defaults < config file < ``KPM_SEED`` < flags.  When no
``--config`` is given, ``eval`` and ``match`` pick up the ``config.cfg``
written next to the checkpoint so the architecture matches.

Failures print one line ``kpm: error: <Kind>: <message>`` to stderr and
exit nonzero (2 for configuration problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evalkit, gradsuite, trainkit
from .checkpoint import checkpoint_load
from .config import RunConfig, load_config_file, parse_value, resolve
from .errors import ConfigError, KPMError
from .model import INPUT_SHAPE, SCALE_SIZES, check_params, forward_pair
from .pnm import read_image, write_pgm
from .tensor import corrupted_backward

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _config_type(key):
    def convert(text):
        try:
            return parse_value(key, text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    convert.__name__ = key
    return convert


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")
    group = p.add_argument_group("run configuration")
    for f in fields(RunConfig):
        if f.name == "force":
            group.add_argument("--force", action="store_const", const=True, default=None,
                               help="overwrite an existing checkpoint")
            continue
        group.add_argument(_flag(f.name), dest=f.name, type=_config_type(f.name), default=None,
                           metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kpm", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic identity dataset")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train a verifier on a dataset")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="query/gallery retrieval metrics on held-out identities")
    p.add_argument("--scores", metavar="FILE", help="also dump the full score matrix as CSV")
    _add_config_flags(p)

    p = sub.add_parser("gradcheck", help="central-difference checks of every differentiable op")
    p.add_argument("--suite", action="append", choices=sorted(gradsuite.SUITES), help="run only these suites")
    p.add_argument("--corrupt", action="append", default=[], help=argparse.SUPPRESS)
    _add_config_flags(p)

    p = sub.add_parser("match", help="export matching and attention maps for one image pair")
    p.add_argument("image_a", help="reference image (PPM, 3x64x32)")
    p.add_argument("image_b", help="second image (PPM, 3x64x32)")
    p.add_argument("--at", action="append", metavar="ROW,COL", default=[],
                   help="reference location in input pixels whose matching row is exported (repeatable)")
    p.add_argument("--outdir", metavar="DIR", help="output directory (default <out>/match)")
    _add_config_flags(p)
    return parser


def load_run_config(args: argparse.Namespace, environ=None) -> RunConfig:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    if args.config:
        file_values = load_config_file(args.config)
    else:
        file_values = {}
        if args.command in ("eval", "match"):
            probe = resolve({}, overrides, environ)
            echoed = probe.checkpoint_path.parent / "config.cfg"
            if echoed.exists():
                file_values = load_config_file(echoed)
                file_values.pop("force", None)
    return resolve(file_values, overrides, environ)


def _load_model(cfg: RunConfig):
    params = checkpoint_load(cfg.checkpoint_path)
    model_cfg = cfg.model_config()
    check_params(params, model_cfg)
    return params, model_cfg


# ----------------------------------------------------------------------------
# commands

def cmd_synth(cfg: RunConfig, args, out=print) -> int:
    ds = trainkit.synth_dataset(cfg.ids, cfg.per_id, cfg.seed, cfg.dataset)
    out(f"wrote {len(ds)} images of {cfg.ids} identities to {cfg.dataset}")
    return 0


def cmd_train(cfg: RunConfig, args, out=print) -> int:
    result = trainkit.train(cfg, log=out)
    out(f"checkpoint {result.checkpoint}")
    out(f"metrics {result.metrics_path}")
    return 0


def cmd_eval(cfg: RunConfig, args, out=print) -> int:
    params, model_cfg = _load_model(cfg)
    ds = trainkit.Dataset.load(cfg.dataset)
    pool = trainkit.split_identities(ds.ids, cfg.val_ids)[1] if cfg.val_ids else np.arange(len(ds))
    q, g = evalkit.query_gallery_split(ds.ids, pool)
    images = ds.images()
    scores = evalkit.score_all(params, model_cfg, images[q], images[g], symmetric=cfg.symmetric)
    rows = evalkit.metrics_rows(evalkit.rank(scores, ds.ids[q], ds.ids[g]))
    dest = Path(cfg.out)
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "eval.csv").write_text(evalkit.metrics_csv(rows))
    if args.scores:
        Path(args.scores).write_text(evalkit.scores_csv(scores))
    for name, value in rows:
        out(f"{name} {value:.4f}")
    out(f"metrics {dest / 'eval.csv'}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args, out=print) -> int:
    names = args.suite or list(gradsuite.SUITES)
    failed = 0
    with corrupted_backward(*args.corrupt):
        for name in names:
            report = gradsuite.run_suite(name, cfg.seed, cfg.model_config())
            failed += not report.passed
            out(f"{name} {report}")
    out(f"{len(names) - failed}/{len(names)} suites passed")
    return 1 if failed else 0


def parse_location(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"location {text!r} is not ROW,COL") from exc
    h, w = INPUT_SHAPE[1:]
    if not (0 <= r < h and 0 <= c < w):
        raise ConfigError(f"location {text!r} outside the {h}x{w} image")
    return r, c


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    return np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)


def grid_csv(values: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.atleast_2d(values))


def _export(dest: Path, stem: str, grid: np.ndarray) -> list[Path]:
    write_pgm(dest / f"{stem}.pgm", minmax(grid))
    (dest / f"{stem}.csv").write_text(grid_csv(grid))
    return [dest / f"{stem}.pgm", dest / f"{stem}.csv"]


def cmd_match(cfg: RunConfig, args, out=print) -> int:
    params, model_cfg = _load_model(cfg)
    locations = [parse_location(t) for t in args.at] or [(INPUT_SHAPE[1] // 2, INPUT_SHAPE[2] // 2)]
    a, b = read_image(args.image_a), read_image(args.image_b)
    v = forward_pair(a, b, params, model_cfg, diagnostics=True, symmetric=cfg.symmetric)
    dest = Path(args.outdir) if args.outdir else Path(cfg.out) / "match"
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for s, diag in v.diagnostics.items():
        h, w = SCALE_SIZES[s]
        if diag["attention"] is not None:
            written += _export(dest, f"attention_s{s}", diag["attention"])
        if diag["match"] is None:
            continue
        written += _export(dest, f"entropy_s{s}", diag["entropy"].reshape(h, w))
        for r, c in locations:
            rs, cs = r * h // INPUT_SHAPE[1], c * w // INPUT_SHAPE[2]
            row = diag["match"][rs * w + cs].reshape(h, w)
            written += _export(dest, f"match_s{s}_r{rs}_c{cs}", row)
    (dest / "probability.txt").write_text(f"probability {v.probability!r}\nlogit {v.logit!r}\n")
    out(f"probability {v.probability:.6f}")
    out(f"wrote {len(written) + 1} files to {dest}")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "match": cmd_match}


def _fail(kind: str, message: str, code: int) -> int:
    print(f"kpm: error: {kind}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def _warn_line(message, category, filename, lineno, file=None, line=None):
    print(f"kpm: warning: {message}", file=sys.stderr)


def main(argv=None, environ=None) -> int:
    args = build_parser().parse_args(argv)
    with warnings.catch_warnings():
        warnings.showwarning = _warn_line
        return _run(args, environ)


def _run(args, environ) -> int:
    try:
        cfg = load_run_config(args, environ)
        return HANDLERS[args.command](cfg, args)
    except ConfigError as exc:
        return _fail("ConfigError", exc, 2)
    except FileExistsError as exc:
        return _fail("FileExistsError", exc, 1)
    except (KPMError, OSError) as exc:
        kind = type(exc).__name__
        msg = f"{exc.strerror}: {exc.filename}" if isinstance(exc, OSError) and exc.strerror else exc
        return _fail(kind, msg, 1)


if __name__ == "__main__":
    sys.exit(main())
