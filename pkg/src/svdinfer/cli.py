"""Command line front end.

Four subcommands cover the package's workflows: ``simulate`` runs a Monte
Carlo study from a JSON config and writes coverage/length tables plus the
standardized-statistic samples and their density grids; ``fit`` reads
headerless ``X.csv``/``Y.csv`` matrices and serializes the sparse SVD fit;
``infer`` combines such a fit with the data to produce confidence intervals;
``report`` merges summary tables from several runs into a Markdown table.

Every output directory receives a ``manifest.json`` describing the exact
inputs, so a run can be reproduced byte-identically: manifests carry no
timestamps, floats are written with 17 significant digits, and CSV files
start with a ``#schema=1`` comment line.

Exit codes: 0 success, 2 usage or config error, 3 I/O error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import FactorModelError
from .estimator import infer_layers
from .inference import confidence_interval
from .initfit import residual_noise_cov, select_rank, sparse_svd_fit
from .linmodel import RegressionData, SvdFit, gram, scaled_factors
from .simlab import PRESETS, SimConfig, kde, monte_carlo, preset

__all__ = ["RunManifest", "main", "cmd_simulate", "cmd_fit", "cmd_infer", "cmd_report"]

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

KDE_GRID = np.linspace(-4.0, 4.0, 161)


class CliError(Exception):
    """Error with a designated process exit code."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _f17(x: float) -> str:
    return format(float(x), ".17g")


def _jsonify(obj):
    """Recursive JSON text with floats at 17 significant digits."""
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError(f"non-finite float {x} has no JSON form")
        return _f17(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _jsonify(obj.tolist())
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_jsonify(v) for v in obj) + "]"
    if isinstance(obj, dict):
        items = ", ".join(f"{json.dumps(str(k))}: {_jsonify(v)}" for k, v in obj.items())
        return "{" + items + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@dataclass(frozen=True)
class RunManifest:
    """What a run consumed: subcommand, config, inputs, output dir, and the
    inference knobs.  ``options`` holds subcommand-specific extras such as
    --jobs or --rank, plus input checksums."""

    subcommand: str
    out: str
    config: Optional[str] = None
    inputs: Tuple[str, ...] = ()
    seed: Optional[int] = None
    mode: Optional[str] = None
    alpha: Optional[float] = None
    options: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "schema": 1,
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs": list(self.inputs),
            "out": self.out,
            "seed": self.seed,
            "mode": self.mode,
            "alpha": self.alpha,
            "options": self.options or {},
        }


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _out_dir(raw: str) -> Path:
    out = Path(raw)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CliError(EXIT_IO, f"output directory {raw!r} is not writable: {exc}")
    return out


def _load_matrix(path: str) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"input file not found: {path}")
    try:
        mat = np.loadtxt(p, delimiter=",", ndmin=2, dtype=float)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"{path} is not a numeric CSV matrix: {exc}")
    if mat.size == 0:
        raise CliError(EXIT_USAGE, f"{path} holds an empty matrix")
    return mat


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}")


def _write_json(path: Path, payload: dict) -> None:
    _write_text(path, _jsonify(payload) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    cells = []
    for row in rows:
        cells.append(
            [
                _f17(v) if isinstance(v, (float, np.floating)) else str(v)
                for v in row
            ]
        )
    lines = ["#schema=1", ",".join(header)]
    lines.extend(",".join(row) for row in cells)
    _write_text(path, "\n".join(lines) + "\n")


def _load_config(path: str, args: argparse.Namespace) -> SimConfig:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"config file not found: {path}")
    try:
        text = p.read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}")
    try:
        payload = json.loads(text)
        if not isinstance(payload, dict):
            raise ValueError("config JSON must be an object")
        if "preset" in payload:
            name = payload.pop("preset")
            cfg = preset(name, **payload)
        else:
            cfg = SimConfig.from_json(text)
    except (ValueError, TypeError) as exc:
        raise CliError(EXIT_USAGE, f"bad config {path!r}: {exc}")
    overrides = {}
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    if args.fix_design:
        overrides["fix_design"] = True
    if overrides:
        try:
            cfg = replace(cfg, **overrides)
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"bad flag value: {exc}")
    return cfg


def _truth_label(cfg: SimConfig, k: int, j: int) -> str:
    # layer k's right support is the k-th block of s2 coordinates (1-based)
    return "nonzero" if cfg.s2 * (k - 1) < j <= cfg.s2 * k else "zero"


def cmd_simulate(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    cfg = _load_config(args.config, args)
    if args.jobs < 1:
        raise CliError(EXIT_USAGE, f"--jobs must be at least 1, got {args.jobs}")
    summary = monte_carlo(cfg, jobs=args.jobs)

    pairs = summary.pairs
    cp = summary.cp()
    mean_len = summary.mean_len()
    rows = []
    for i, (k, j) in enumerate(pairs):
        rows.append(
            [
                k,
                j,
                _truth_label(cfg, k, j),
                float(cp[i]),
                float(mean_len[i]),
                int(summary.n_used[i]),
                int(summary.n_covered[i]),
                float(summary.len_sum[i]),
            ]
        )
    _write_csv(
        out / "summary.csv",
        ["k", "j", "truth_label", "cp", "mean_len", "n_used", "n_covered", "len_sum"],
        rows,
    )

    t_rows = []
    for i, (k, j) in enumerate(pairs):
        for draw, t in enumerate(summary.t_samples[i]):
            t_rows.append([k, j, draw, float(t)])
    _write_csv(out / "tstats.csv", ["k", "j", "draw", "t"], t_rows)

    k_rows = []
    for i, (k, j) in enumerate(pairs):
        if summary.t_samples[i].size < 2:
            continue
        dens = kde(summary.t_samples[i], KDE_GRID)
        for x, y in zip(KDE_GRID, dens):
            k_rows.append([k, j, float(x), float(y)])
    _write_csv(out / "kde.csv", ["k", "j", "x", "density"], k_rows)

    manifest = RunManifest(
        subcommand="simulate",
        out=str(out),
        config=args.config,
        seed=cfg.base_seed,
        mode=cfg.mode,
        alpha=cfg.alpha,
        options={"jobs": args.jobs, "config_sha256": _sha256(Path(args.config))},
    )
    _write_json(
        out / "manifest.json",
        {
            "manifest": manifest.to_dict(),
            "resolved_config": json.loads(cfg.to_json()),
            "outcome": {
                "rank_counts": {str(r): c for r, c in sorted(summary.rank_counts.items())},
                "n_failed": summary.n_failed,
                "failures": [[rep, msg] for rep, msg in summary.failures],
            },
        },
    )
    return EXIT_OK


def _fit_payload(fit: SvdFit, S, rank_override: Optional[int], n: int) -> dict:
    # how close the fitted left factors are to Sigma-hat orthogonality
    cross = fit.L.T @ S.matrix @ fit.L
    lsl = np.diag(cross).copy()
    off = np.abs(cross - np.diag(lsl)).max() if fit.rank > 1 else 0.0
    diag = {
        "n": n,
        "p": fit.L.shape[0],
        "q": fit.R.shape[0],
        "factor_gram_diag": lsl,
        "factor_cross_scale": float(off),
    }
    return {
        "schema": 1,
        "rank": fit.rank,
        "rank_override": rank_override,
        "d": fit.d,
        "L": fit.L,
        "R": fit.R,
        "diagnostics": diag,
    }


def cmd_fit(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    X = _load_matrix(args.x_csv)
    Y = _load_matrix(args.y_csv)
    if X.shape[0] != Y.shape[0]:
        raise CliError(
            EXIT_USAGE,
            f"X has {X.shape[0]} rows but Y has {Y.shape[0]}; they must match",
        )
    try:
        data = RegressionData(X=X, Y=Y)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid data: {exc}")
    S = gram(data)
    r_max = min(data.X.shape[1], data.Y.shape[1])
    if args.rank is not None:
        if not 1 <= args.rank <= r_max:
            raise CliError(EXIT_USAGE, f"--rank must be in [1, {r_max}], got {args.rank}")
        rank = args.rank
    else:
        rank = select_rank(data, S, r_max=r_max)
    fit = sparse_svd_fit(data, S, rank)
    _write_json(out / "fit.json", _fit_payload(fit, S, args.rank, data.X.shape[0]))

    manifest = RunManifest(
        subcommand="fit",
        out=str(out),
        inputs=(args.x_csv, args.y_csv),
        options={
            "rank": args.rank,
            "x_sha256": _sha256(Path(args.x_csv)),
            "y_sha256": _sha256(Path(args.y_csv)),
        },
    )
    _write_json(out / "manifest.json", {"manifest": manifest.to_dict()})
    return EXIT_OK


def _load_fit(path: str) -> Tuple[SvdFit, dict]:
    p = Path(path)
    if not p.is_file():
        # a missing fit is a usage error: run `fit` first
        raise CliError(EXIT_USAGE, f"fit file not found: {path} (run the fit subcommand first)")
    try:
        payload = json.loads(p.read_text())
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}")
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"{path} is not valid JSON: {exc}")
    try:
        fit = SvdFit(
            d=np.asarray(payload["d"], dtype=float),
            L=np.asarray(payload["L"], dtype=float),
            R=np.asarray(payload["R"], dtype=float),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"{path} does not hold a valid fit: {exc}")
    return fit, payload


def cmd_infer(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    if not 0.0 < args.alpha < 1.0:
        raise CliError(EXIT_USAGE, f"--alpha must lie in (0, 1), got {args.alpha}")
    fit, _ = _load_fit(args.fit)
    X = _load_matrix(args.x_csv)
    Y = _load_matrix(args.y_csv)
    if X.shape[0] != Y.shape[0]:
        raise CliError(
            EXIT_USAGE,
            f"X has {X.shape[0]} rows but Y has {Y.shape[0]}; they must match",
        )
    if X.shape[1] != fit.L.shape[0] or Y.shape[1] != fit.R.shape[0]:
        raise CliError(
            EXIT_USAGE,
            f"fit was built for p={fit.L.shape[0]}, q={fit.R.shape[0]} but data has "
            f"p={X.shape[1]}, q={Y.shape[1]}",
        )
    try:
        data = RegressionData(X=X, Y=Y)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, f"invalid data: {exc}")
    S = gram(data)
    n = data.X.shape[0]
    factors = scaled_factors(data, S, fit)
    sigma_e = residual_noise_cov(data, fit).sigma
    layers = infer_layers(args.mode, data, S, fit, factors, sigma_e)

    rows = []
    for res in layers:
        for j in range(res.v_hat.size):
            rep = confidence_interval(res.v_hat[j], res.variances[j], n, args.alpha)
            rows.append(
                [
                    args.mode,
                    res.k + 1,
                    j + 1,
                    float(rep.estimate),
                    float(rep.std_err),
                    float(rep.lo),
                    float(rep.hi),
                    "true" if rep.significant else "false",
                ]
            )
    _write_csv(
        out / "intervals.csv",
        ["mode", "k", "j", "estimate", "std_err", "ci_lo", "ci_hi", "significant"],
        rows,
    )

    manifest = RunManifest(
        subcommand="infer",
        out=str(out),
        inputs=(args.x_csv, args.y_csv, args.fit),
        mode=args.mode,
        alpha=args.alpha,
        options={
            "x_sha256": _sha256(Path(args.x_csv)),
            "y_sha256": _sha256(Path(args.y_csv)),
            "fit_sha256": _sha256(Path(args.fit)),
        },
    )
    _write_json(out / "manifest.json", {"manifest": manifest.to_dict()})
    return EXIT_OK


_SUMMARY_COLS = ("k", "j", "truth_label", "cp", "mean_len", "n_used", "n_covered", "len_sum")


def _read_summary(path: str) -> List[dict]:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_IO, f"summary file not found: {path}")
    try:
        lines = [ln for ln in p.read_text().splitlines() if not ln.startswith("#")]
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read {path}: {exc}")
    reader = csv.DictReader(lines)
    missing = set(_SUMMARY_COLS) - set(reader.fieldnames or ())
    if missing:
        raise CliError(EXIT_USAGE, f"{path} lacks summary columns {sorted(missing)}")
    rows = []
    try:
        for raw in reader:
            rows.append(
                {
                    "k": int(raw["k"]),
                    "j": int(raw["j"]),
                    "truth_label": raw["truth_label"],
                    "n_used": int(raw["n_used"]),
                    "n_covered": int(raw["n_covered"]),
                    "len_sum": float(raw["len_sum"]),
                }
            )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, f"{path} holds malformed summary rows: {exc}")
    return rows


def cmd_report(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    merged: Dict[Tuple[int, int], dict] = {}
    for path in args.summaries:
        for row in _read_summary(path):
            key = (row["k"], row["j"])
            slot = merged.setdefault(
                key,
                {"truth_label": row["truth_label"], "n_used": 0, "n_covered": 0, "len_sum": 0.0},
            )
            if slot["truth_label"] != row["truth_label"]:
                raise CliError(
                    EXIT_USAGE,
                    f"component ({key[0]}, {key[1]}) labeled {slot['truth_label']!r} "
                    f"and {row['truth_label']!r} across inputs",
                )
            slot["n_used"] += row["n_used"]
            slot["n_covered"] += row["n_covered"]
            slot["len_sum"] += row["len_sum"]

    rows = []
    md = [
        "# Coverage and interval length",
        "",
        f"Aggregated from {len(args.summaries)} summary file(s).",
        "",
        "| k | j | truth | CP | Len | reps |",
        "|--:|--:|:------|---:|----:|-----:|",
    ]
    for (k, j), slot in sorted(merged.items()):
        used = slot["n_used"]
        cp = slot["n_covered"] / used if used else float("nan")
        mean_len = slot["len_sum"] / used if used else float("nan")
        rows.append(
            [k, j, slot["truth_label"], cp, mean_len, used, slot["n_covered"], slot["len_sum"]]
        )
        md.append(f"| {k} | {j} | {slot['truth_label']} | {cp:.3f} | {mean_len:.3f} | {used} |")
    _write_csv(out / "combined.csv", _SUMMARY_COLS, rows)
    _write_text(out / "report.md", "\n".join(md) + "\n")

    manifest = RunManifest(
        subcommand="report",
        out=str(out),
        inputs=tuple(args.summaries),
        options={"sha256": {p: _sha256(Path(p)) for p in args.summaries}},
    )
    _write_json(out / "manifest.json", {"manifest": manifest.to_dict()})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svdinfer",
        description="Debiased inference on the latent right factors of a sparse SVD "
        "in multi-response regression.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo coverage study")
    sim.add_argument("--config", required=True, help="JSON config: SimConfig fields, or "
                     f"{{'preset': name, ...overrides}} with name in {', '.join(PRESETS)}")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--seed", type=int, default=None, help="override the config base seed")
    sim.add_argument("--mode", choices=("strong", "weak"), default=None)
    sim.add_argument("--alpha", type=float, default=None)
    sim.add_argument("--jobs", type=int, default=1, help="parallel workers")
    sim.add_argument("--fix-design", action="store_true",
                     help="hold coefficients and design fixed across replications")
    sim.set_defaults(func=cmd_simulate)

    fit = sub.add_parser("fit", help="fit the sparse SVD on CSV data")
    fit.add_argument("x_csv", help="headerless n x p design matrix")
    fit.add_argument("y_csv", help="headerless n x q response matrix")
    fit.add_argument("--out", required=True)
    fit.add_argument("--rank", type=int, default=None, help="force the rank instead of selecting it")
    fit.set_defaults(func=cmd_fit)

    inf = sub.add_parser("infer", help="confidence intervals from a saved fit")
    inf.add_argument("x_csv")
    inf.add_argument("y_csv")
    inf.add_argument("--fit", required=True, help="fit.json produced by the fit subcommand")
    inf.add_argument("--out", required=True)
    inf.add_argument("--mode", choices=("strong", "weak"), default="weak")
    inf.add_argument("--alpha", type=float, default=0.05)
    inf.set_defaults(func=cmd_infer)

    rep = sub.add_parser("report", help="merge summary.csv files into a Markdown table")
    rep.add_argument("summaries", nargs="+", help="summary.csv paths")
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"svdinfer {args.subcommand}: {exc}", file=sys.stderr)
        return exc.code
    except (FactorModelError, np.linalg.LinAlgError) as exc:
        print(f"svdinfer {args.subcommand}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"svdinfer {args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
