"""Command line: ``maskcon train | eval | sweep``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as dat
from . import evaluation as ev
from . import model as mdl
from . import training
from .errors import BadConfig, ChecksumMismatch, DimMismatch, IncompleteCoarseMap, MalformedRecord, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

log = logging.getLogger("maskcon")


def _overrides(extra):
    """Turn leftover ``--key value`` / ``--key=value`` pairs into a dict."""
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise BadConfig(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise BadConfig(f"missing value for --{key}") from None
        out[key] = value
    return out


def _list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def cmd_train(config_path=None, overrides=None):
    cfg = training.load_config(config_path, overrides)
    out = Path(cfg.out or "runs/train")
    result = training.train(cfg, out_dir=out)
    print(f"checkpoint: {out / training.CHECKPOINT_NAME}")
    print(f"metrics:    {out / training.METRICS_NAME}")
    for k, s in zip(result.report.ks, result.report.scores):
        print(f"recall@{k} {s:.4f}")
    return result


def cmd_eval(checkpoint_path, data_path, ks=ev.DEFAULT_KS, space=ev.FEATURES, out_csv=None, dz_sample=200, seed=0):
    params = mdl.load_checkpoint(checkpoint_path)
    ds = dat.load_vds(data_path)
    if ds.input_dim != params.input_dim:
        raise DimMismatch(f"dataset dim {ds.input_dim} != checkpoint input dim {params.input_dim}")
    report = ev.evaluate(params, ds, ks, space)
    print("k,score")
    for k, s in zip(report.ks, report.scores):
        print(f"{k},{s!r}")
    for row in ev.dz_report(params, ds, (0.05,), dz_sample, seed):
        tau = "" if row.tau is None else training.format_tau(row.tau)
        print(f"# d_z {row.kind} {tau} {row.value:.6f}")
    report.to_csv(out_csv or Path(checkpoint_path).with_name("recall.csv"))
    return report


def cmd_sweep(config_path, w_list, tau_list, overrides=None):
    cfg = training.load_config(config_path, overrides)
    out = Path(cfg.out or "runs/sweep")
    results = training.sweep(cfg, [float(w) for w in w_list], [training.parse_tau(t) for t in tau_list], out_dir=out)
    print((out / "sweep.csv").read_text(), end="")
    return results


def build_parser():
    p = argparse.ArgumentParser(prog="maskcon", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model; extra --key value pairs override the config")
    t.add_argument("--config")
    t.add_argument("--seed")
    t.add_argument("--out")

    e = sub.add_parser("eval", help="Recall@K and d_z for a checkpoint on a VDS1 dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--ks", default="1,2,5,10")
    e.add_argument("--space", choices=(ev.FEATURES, ev.PROJECTIONS), default=ev.FEATURES)
    e.add_argument("--out")

    s = sub.add_parser("sweep", help="MaskCon over a (w, tau) grid")
    s.add_argument("--config")
    s.add_argument("--w", required=True)
    s.add_argument("--tau", required=True)
    s.add_argument("--seed")
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command in ("train", "sweep"):
            overrides = _overrides(extra)
            for key in ("seed", "out"):
                if getattr(args, key) is not None:
                    overrides[key] = getattr(args, key)
            if args.command == "train":
                cmd_train(args.config, overrides)
            else:
                cmd_sweep(args.config, _list(args.w), _list(args.tau), overrides)
        else:
            if extra:
                raise BadConfig(f"unexpected arguments {extra}")
            ks = [int(k) for k in _list(args.ks)]
            cmd_eval(args.checkpoint, args.data, ks, args.space, args.out)
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, MalformedRecord, IncompleteCoarseMap, ChecksumMismatch, DimMismatch) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
