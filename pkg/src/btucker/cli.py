# Command-line surface: fit / simulate / impute / benchmark / summarize.
#
# Configuration is a flat key=value text file ('#' starts a comment); any
# flag given on the command line overrides the config value.  Every run
# writes a manifest that is itself a valid config file, so a run can be
# reproduced bit-for-bit from its output directory.
#
# Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (
    GAUSSIAN,
    PROBIT,
    FitConfig,
    NumericalAbort,
    load_checkpoint,
    run_chain,
    resume_chain,
)
from .experiments import (
    Scenario,
    run_benchmark,
    simulate,
    write_report,
    write_summary,
)
from .distributions import RngHandle
from .tensors import (
    DenseTensor,
    TensorFormatError,
    multi_index,
    read_tensor_text,
    write_tensor_text,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ----------------------------------------------------------------------
# Config files
# ----------------------------------------------------------------------

# keys accepted in config files, with parsers
_FIT_KEYS = {
    "iters": int, "burnin": int, "thin": int, "seed": int,
    "likelihood": str, "adapt_start": int, "adapt_c0": float, "adapt_c1": float,
    "a_theta": float, "b_theta": float, "theta_inf": float,
    "a_tau": float, "b_tau": float, "a_rho": float, "b_rho": float,
    "a_sigma": float, "b_sigma": float,
    "alpha": str, "init_trunc": str, "core_joint_max": int,
    "credible_level": float,
}
_SCENARIO_KEYS = {
    "dims": str, "ranks": str, "core_sparsity": float, "noise_var": float,
    "missing_frac": float, "replicates": int,
}
_PATH_KEYS = {"input": str, "output_dir": str, "checkpoint": str, "jobs": int}
_CONFIG_KEYS = {**_FIT_KEYS, **_SCENARIO_KEYS, **_PATH_KEYS}


def parse_config_file(path) -> dict:
    """Flat key=value config; unknown keys are rejected."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (tok.strip() for tok in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def _parse_int_tuple(text: str, what: str) -> tuple:
    try:
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    except ValueError as exc:
        raise UsageError(f"cannot parse {what} from {text!r}") from exc


def _parse_alpha(text: str):
    toks = text.replace(",", " ").split()
    vals = [float(t) for t in toks]
    return vals[0] if len(vals) == 1 else tuple(vals)


def _merge_settings(args, config: dict) -> dict:
    """Precedence: defaults < config file < explicit command-line flags."""
    merged = dict(config)
    for key, value in vars(args).items():
        if key in ("command", "config", "func"):
            continue
        if value is not None:
            merged[key] = value
    return merged


def _fit_config(settings: dict) -> FitConfig:
    kwargs = {}
    names = {f.name for f in dataclass_fields(FitConfig)}
    for key, value in settings.items():
        if key not in names:
            continue
        if key == "alpha" and isinstance(value, str):
            value = _parse_alpha(value)
        if key == "init_trunc" and isinstance(value, str):
            value = _parse_int_tuple(value, "init_trunc")
        kwargs[key] = value
    cfg = FitConfig(**kwargs)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _out_dir(settings: dict) -> Path:
    out = Path(settings.get("output_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(path: Path, settings: dict, command: str) -> None:
    """Manifest doubling as a reusable config file: config keys as
    key=value lines, everything else as comments."""
    lines = [
        f"# btucker {__version__} manifest",
        f"# command: {command}",
        f"# written: {time.strftime('%Y-%m-%dT%H:%M:%S')}",
        f"# numpy: {np.__version__}",
    ]
    for key in sorted(settings):
        value = settings[key]
        if value is None:
            continue
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        if key in _CONFIG_KEYS:
            lines.append(f"{key} = {value}")
        else:
            lines.append(f"# {key} = {value}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# Output writers
# ----------------------------------------------------------------------

def _write_rank_trace(path: Path, samples) -> None:
    kmodes = samples.active_ranks.shape[1]
    cols = (["draw"] + [f"rank_mode_{j + 1}" for j in range(kmodes)]
            + [f"trunc_mode_{j + 1}" for j in range(kmodes)] + ["sigma2", "tau"])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for j in range(samples.n_saved):
            row = ([str(j)] + [str(v) for v in samples.active_ranks[j]]
                   + [str(v) for v in samples.trunc_levels[j]]
                   + [repr(float(samples.sigma2[j])), repr(float(samples.tau[j]))])
            fh.write("\t".join(row) + "\n")


def _write_imputations(path: Path, samples, dims, level: float) -> int:
    summary = samples.imputation_summary(level)
    kmodes = len(dims)
    cols = [f"i{j + 1}" for j in range(kmodes)] + ["mean", "sd", "lower", "upper"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for pos, off in enumerate(summary["index"]):
            idx = multi_index(int(off), dims)
            row = [str(i) for i in idx] + [
                f"{summary[key][pos]:.8g}" for key in ("mean", "sd", "lower", "upper")
            ]
            fh.write("\t".join(row) + "\n")
    return summary["index"].size


def _write_fit_outputs(out: Path, samples, data, level: float) -> None:
    _write_rank_trace(out / "rank_trace.tsv", samples)
    med = samples.median_ranks()
    (out / "median_rank.txt").write_text(
        " ".join(str(v) for v in med) + "\n", encoding="utf-8"
    )
    write_tensor_text(DenseTensor.from_array(samples.z_mean_array()),
                      out / "signal_mean.txt")
    write_tensor_text(DenseTensor.from_array(samples.z_sd_array()),
                      out / "signal_sd.txt")
    if samples.likelihood == PROBIT:
        write_tensor_text(DenseTensor.from_array(samples.prob_mean_array()),
                          out / "prob_mean.txt")
        write_tensor_text(DenseTensor.from_array(samples.prob_sd_array()),
                          out / "prob_sd.txt")
    if data.n_missing and samples.predictive_draws is not None:
        _write_imputations(out / "imputed.tsv", samples, data.dims, level)


# ----------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------

def cmd_fit(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    settings = _merge_settings(args, config)
    if not settings.get("input"):
        raise UsageError("fit requires --input TENSOR_FILE")
    cfg = _fit_config(settings)
    level = float(settings.get("credible_level", 0.90))
    if not 0 < level < 1:
        raise UsageError("credible_level must lie in (0, 1)")
    try:
        data = read_tensor_text(settings["input"])
    except (TensorFormatError, OSError) as exc:
        raise DataError(str(exc)) from exc

    out = _out_dir(settings)
    checkpoint = settings.get("checkpoint") or str(out / "checkpoint.bin")
    try:
        samples = run_chain(data, cfg, checkpoint_path=checkpoint)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    _write_fit_outputs(out, samples, data, level)
    _write_manifest(out / "manifest.txt", settings, "fit")
    print(f"fit: median multi-rank {samples.median_ranks()}, "
          f"{samples.n_saved} saved draws, outputs in {out}")
    return EXIT_OK


def _scenario_from_settings(settings: dict, name: str = "scenario") -> Scenario:
    if not settings.get("dims") or not settings.get("ranks"):
        raise UsageError("need --dims and --ranks (or a config providing them)")
    scen = Scenario(
        name=name,
        dims=_parse_int_tuple(str(settings["dims"]), "dims"),
        true_ranks=_parse_int_tuple(str(settings["ranks"]), "ranks"),
        core_sparsity=float(settings.get("core_sparsity", 0.4)),
        noise_var=float(settings.get("noise_var", 0.1)),
        missing_frac=float(settings.get("missing_frac", 0.3)),
        replicates=int(settings.get("replicates", 5)),
        likelihood=str(settings.get("likelihood", GAUSSIAN)),
        seed=int(settings.get("seed", 0)),
    )
    try:
        scen.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return scen


def cmd_simulate(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    settings = _merge_settings(args, config)
    scen = _scenario_from_settings(settings)
    out = _out_dir(settings)
    sim = simulate(scen, RngHandle(scen.seed))
    write_tensor_text(sim.full, out / "full.txt")
    write_tensor_text(sim.masked, out / "masked.txt")
    write_tensor_text(DenseTensor.from_array(sim.signal), out / "signal.txt")
    truth = {
        "dims": scen.dims, "ranks": scen.true_ranks,
        "core_sparsity": scen.core_sparsity, "noise_var": scen.noise_var,
        "missing_frac": scen.missing_frac, "likelihood": scen.likelihood,
        "seed": scen.seed,
    }
    _write_manifest(out / "truth.txt", truth, "simulate")
    _write_manifest(out / "manifest.txt", settings, "simulate")
    print(f"simulate: wrote full/masked/signal tensors for dims {scen.dims} "
          f"({sim.masked.n_missing} missing) to {out}")
    return EXIT_OK


def cmd_impute(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    settings = _merge_settings(args, config)
    level = float(settings.get("credible_level", 0.90))
    out = _out_dir(settings)

    if settings.get("checkpoint") and Path(settings["checkpoint"]).exists() \
            and not settings.get("input"):
        payload = load_checkpoint(settings["checkpoint"])
        if payload["iteration"] < payload["cfg"].iters:
            samples = resume_chain(settings["checkpoint"])
        else:
            samples = payload["samples"]
        data = payload["data"]
    else:
        if not settings.get("input"):
            raise UsageError("impute requires --checkpoint or --input")
        cfg = _fit_config(settings)
        try:
            data = read_tensor_text(settings["input"])
        except (TensorFormatError, OSError) as exc:
            raise DataError(str(exc)) from exc
        try:
            samples = run_chain(data, cfg)
        except ValueError as exc:
            raise DataError(str(exc)) from exc

    path = out / "imputed.tsv"
    if data.n_missing == 0:
        print("impute: input has no missing entries; writing empty table",
              file=sys.stderr)
        path.write_text("", encoding="utf-8")
        return EXIT_OK
    count = _write_imputations(path, samples, data.dims, level)
    _write_manifest(out / "manifest.txt", settings, "impute")
    print(f"impute: wrote {count} entries to {path}")
    return EXIT_OK


_PRESETS = {
    # the two synthetic designs at both holdout fractions
    "table1": [
        ("B30", (30, 30, 10), (5, 5, 5), 0.3),
        ("B50", (30, 30, 10), (5, 5, 5), 0.5),
        ("A30", (50, 40, 6), (10, 7, 3), 0.3),
        ("A50", (50, 40, 6), (10, 7, 3), 0.5),
    ],
    "quick": [
        ("quick", (12, 10, 8), (2, 2, 2), 0.3),
    ],
}


def cmd_benchmark(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    settings = _merge_settings(args, config)
    out = _out_dir(settings)
    seed = int(settings.get("seed", 0))
    replicates = int(settings.get("replicates", 5))

    if args.preset:
        if args.preset not in _PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}")
        scenarios = [
            Scenario(name=name, dims=dims, true_ranks=ranks,
                     missing_frac=frac, replicates=replicates,
                     likelihood=str(settings.get("likelihood", GAUSSIAN)),
                     seed=seed)
            for name, dims, ranks, frac in _PRESETS[args.preset]
        ]
    else:
        scenarios = [_scenario_from_settings(settings)]

    cfg = _fit_config(settings)
    jobs = int(settings.get("jobs", 1))
    results = run_benchmark(
        scenarios, cfg, jobs=jobs,
        baseline_er_gr=bool(args.baseline == "er-gr"),
        progress=lambda r: print(
            f"  {r.scenario} rep {r.replicate}: ranks {r.ranks}, "
            f"mse_pred {r.mse_predictive:.3f} ({r.seconds:.1f}s)",
            flush=True),
    )
    write_report(results, out / "report.tsv")
    write_summary(results, out / "summary.tsv")
    _write_manifest(out / "manifest.txt", settings, "benchmark")
    print(f"benchmark: {len(results)} replicate rows in {out / 'report.tsv'}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    config = parse_config_file(args.config) if args.config else {}
    settings = _merge_settings(args, config)
    src = Path(settings.get("input") or settings.get("output_dir") or ".")
    trace = src / "rank_trace.tsv" if src.is_dir() else src
    if not trace.exists():
        raise DataError(f"no rank trace found at {trace}")
    rows = trace.read_text(encoding="utf-8").strip().splitlines()
    header = rows[0].split("\t")
    body = np.array([r.split("\t") for r in rows[1:]], dtype=object)
    if body.size == 0:
        raise DataError(f"{trace}: empty trace")
    rank_cols = [j for j, name in enumerate(header) if name.startswith("rank_mode_")]
    ranks = body[:, rank_cols].astype(np.int64)
    med = np.median(ranks, axis=0).astype(np.int64)
    sigma2 = body[:, header.index("sigma2")].astype(np.float64) \
        if "sigma2" in header else None
    print(f"draws: {ranks.shape[0]}")
    print("median multi-rank: " + " ".join(str(v) for v in med))
    for j in range(ranks.shape[1]):
        lo, hi = np.quantile(ranks[:, j], [0.05, 0.95])
        print(f"  mode {j + 1}: median {med[j]}, 90% interval [{int(lo)}, {int(hi)}]")
    if sigma2 is not None:
        print(f"sigma2 posterior mean: {sigma2.mean():.6g}")
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser and entry point
# ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel worker processes (benchmark)")
    p.add_argument("--output-dir", dest="output_dir", default=None)


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--burnin", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)
    p.add_argument("--likelihood", choices=(GAUSSIAN, PROBIT), default=None)
    p.add_argument("--adapt-start", dest="adapt_start", type=int, default=None)
    p.add_argument("--alpha", default=None,
                   help="shrinkage concentration, scalar or comma-separated per mode")
    p.add_argument("--init-trunc", dest="init_trunc", default=None,
                   help="explicit starting truncation, comma-separated")
    p.add_argument("--credible-level", dest="credible_level", type=float,
                   default=None)


def build_parser() -> _Parser:
    parser = _Parser(prog="btucker",
                     description="Bayesian Tucker factorization with adaptive multi-rank")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="run the sampler on a tensor file")
    _add_common(p)
    _add_fit_flags(p)
    p.add_argument("--input", default=None, help="tensor text file")
    p.add_argument("--checkpoint", default=None, help="checkpoint file path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="generate a synthetic tensor")
    _add_common(p)
    p.add_argument("--dims", default=None, help="comma-separated dimensions")
    p.add_argument("--ranks", default=None, help="comma-separated true ranks")
    p.add_argument("--core-sparsity", dest="core_sparsity", type=float, default=None)
    p.add_argument("--noise-var", dest="noise_var", type=float, default=None)
    p.add_argument("--missing-frac", dest="missing_frac", type=float, default=None)
    p.add_argument("--likelihood", choices=(GAUSSIAN, PROBIT), default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("impute", help="posterior summaries at missing entries")
    _add_common(p)
    _add_fit_flags(p)
    p.add_argument("--input", default=None, help="tensor text file (fresh fit)")
    p.add_argument("--checkpoint", default=None, help="checkpoint of a finished fit")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("benchmark", help="replicate studies over scenarios")
    _add_common(p)
    _add_fit_flags(p)
    p.add_argument("--preset", default=None, choices=sorted(_PRESETS))
    p.add_argument("--dims", default=None)
    p.add_argument("--ranks", default=None)
    p.add_argument("--core-sparsity", dest="core_sparsity", type=float, default=None)
    p.add_argument("--noise-var", dest="noise_var", type=float, default=None)
    p.add_argument("--missing-frac", dest="missing_frac", type=float, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--baseline", choices=("er-gr",), default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("summarize", help="summarize a fit output directory")
    _add_common(p)
    p.add_argument("--input", default=None, help="fit output dir or rank trace")
    p.set_defaults(func=cmd_summarize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
