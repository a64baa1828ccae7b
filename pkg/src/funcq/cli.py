"""Command line: ingest, simulate, fqe, fqi, tune, transform, report.

Every command writes its outputs plus a ``manifest.json`` recording the
content hashes of all inputs, the resolved configuration, package versions
and the produced files, so identical manifests imply byte-identical
outputs. Heavy imports happen after thread caps are applied: ``--threads``
(or FUNCQ_THREADS) pins the BLAS pool before numpy loads, keeping runs
reproducible.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

__all__ = ["main", "build_parser", "InputError", "NumericalError"]

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2

THREAD_ENV_VAR = "FUNCQ_THREADS"
_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class InputError(Exception):
    """Bad or missing inputs; exit code 1."""


class NumericalError(Exception):
    """Numerical failure (singular solve, divergence, non-finite); exit code 2."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors by default; the contract is exit 1
    # for any input/validation problem.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INPUT)


def _apply_thread_cap(argv: list[str]) -> int:
    """Pin BLAS pools before numpy is imported; defaults to 1 thread.

    An explicit --threads flag or FUNCQ_THREADS value overrides ambient
    BLAS settings; the default of 1 only fills unset variables.
    """
    threads = os.environ.get(THREAD_ENV_VAR)
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    explicit = threads is not None
    try:
        n = max(1, int(threads)) if explicit else 1
    except ValueError:
        explicit = False
        n = 1
    for var in _BLAS_VARS:
        if explicit:
            os.environ[var] = str(n)
        else:
            os.environ.setdefault(var, str(n))
    return n


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import numpy
    import pandas
    import scipy

    from . import __version__

    return {
        "funcq": __version__,
        "python": f"{sys.version_info.major}.{sys.version_info.minor}",
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
    }


def _plain_arguments(arguments: dict) -> dict:
    out = {}
    for key, value in arguments.items():
        if key == "func":
            continue
        if isinstance(value, Path):
            value = str(value)
        out[key] = value
    return out


def write_manifest(
    outdir: Path,
    command: str,
    arguments: dict,
    inputs: list[Path],
    outputs: list[Path],
) -> Path:
    manifest = {
        "command": command,
        "arguments": _plain_arguments(arguments),
        "inputs": [
            {"path": str(p), "sha256": _sha256(p)} for p in sorted(set(inputs))
        ],
        "outputs": sorted(str(p.relative_to(outdir)) for p in outputs),
        "versions": _versions(),
    }
    path = outdir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def _load_config(args) -> "RunConfig":
    from .core import RunConfig

    data = {}
    if getattr(args, "config", None):
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise InputError(f"config file not found: {cfg_path}")
        data = json.loads(cfg_path.read_text())
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "gamma", None) is not None:
        data["gamma"] = args.gamma
    if getattr(args, "iterations", None) is not None:
        data["iterations"] = args.iterations
    data["threads"] = getattr(args, "threads", 1)
    try:
        return RunConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise InputError(f"invalid config: {exc}") from exc


def _require(path: str | Path, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"{kind} not found: {p}")
    return p


def _dataset_inputs(directory: Path, stem: str = "dataset") -> list[Path]:
    paths = [
        directory / f"{stem}_transitions.csv",
        directory / f"{stem}_actions.csv",
        directory / f"{stem}_grid.csv",
    ]
    for p in paths:
        _require(p, "dataset file")
    anchors = directory / f"{stem}_anchors.csv"
    if anchors.exists():
        paths.append(anchors)
    return paths


def _cmd_ingest(args) -> int:
    from .core import Grid, save_dataset
    from .ingest import ingest_pipeline
    from .reward import RiskTables

    steps = _require(args.steps, "steps CSV")
    biomarkers = _require(args.biomarkers, "biomarkers CSV")
    demographics = _require(args.demographics, "demographics CSV")
    inputs = [steps, biomarkers, demographics]
    tables = None
    if args.risk_tables:
        tables_path = _require(args.risk_tables, "risk tables JSON")
        tables = RiskTables.from_json(tables_path)
        inputs.append(tables_path)

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = Grid.uniform(args.grid_points)
    dataset, report = ingest_pipeline(
        steps, biomarkers, demographics, grid=grid,
        min_days=args.min_days, tables=tables,
    )
    outputs = save_dataset(dataset, outdir)
    report_path = outdir / "ingest_report.json"
    report.to_json(report_path)
    outputs.append(report_path)
    write_manifest(outdir, "ingest", vars(args), inputs, outputs)
    print(
        f"ingested {len(dataset)} transitions from "
        f"{len(report.subjects_retained)} subjects -> {outdir}"
    )
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .core import save_dataset
    from .env import SyntheticEnv, TabularEmbedEnv, generate_dataset

    inputs: list[Path] = []
    if args.env_spec:
        spec_path = _require(args.env_spec, "environment spec")
        env = SyntheticEnv.from_json(spec_path)
        inputs.append(spec_path)
    elif args.env == "tabular":
        env = TabularEmbedEnv.default(grid_size=args.grid_points)
    else:
        env = SyntheticEnv.default(grid_size=args.grid_points, seed=args.seed or 0)

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    if isinstance(env, TabularEmbedEnv):
        import numpy as np

        behavior = np.full((2, 2), 0.5)
    else:
        behavior = env.behavior_policy()
    dataset = generate_dataset(
        env, behavior, args.subjects, args.steps, args.seed or 0
    )
    outputs = save_dataset(dataset, outdir)
    if not isinstance(env, TabularEmbedEnv):
        env_path = outdir / "env_spec.json"
        env.to_json(env_path)
        outputs.append(env_path)
    write_manifest(outdir, "simulate", vars(args), inputs, outputs)
    print(f"simulated {len(dataset)} transitions -> {outdir}")
    return EXIT_OK


def _cmd_fqe(args) -> int:
    from .core import load_dataset
    from .fqe import fqe_run
    from .fqi import FunctionalLinearPolicy

    dataset_dir = _require(args.dataset_dir, "dataset directory")
    inputs = _dataset_inputs(dataset_dir)
    policy_path = _require(args.policy, "policy JSON")
    inputs.append(policy_path)
    config = _load_config(args)
    if args.config:
        inputs.append(Path(args.config))

    dataset = load_dataset(dataset_dir)
    policy = FunctionalLinearPolicy.from_json(policy_path)
    result = fqe_run(dataset, policy.as_policy_handle(), config)

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / "fqe_result.json"
    out.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    q_path = outdir / "q_function.json"
    result.q_hat.to_json(q_path)
    write_manifest(outdir, "fqe", vars(args), inputs, [out, q_path])
    print(f"estimated policy value: {result.value_estimate:.6f}")
    return EXIT_OK


def _cmd_fqi(args) -> int:
    from .core import format_float, load_dataset
    from .fqi import fqi_run

    dataset_dir = _require(args.dataset_dir, "dataset directory")
    inputs = _dataset_inputs(dataset_dir)
    config = _load_config(args)
    if args.config:
        inputs.append(Path(args.config))

    dataset = load_dataset(dataset_dir)
    result = fqi_run(dataset, config)
    if result.diverged:
        raise NumericalError(
            "policy objective decreased for 5 consecutive iterations"
        )

    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    policy_path = outdir / "policy.json"
    result.policy.to_json(policy_path)
    diag_path = outdir / "fqi_diagnostics.csv"
    with diag_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "policy_change", "fit_rmse"])
        for i in range(len(result.objectives)):
            writer.writerow(
                [
                    str(i + 1),
                    format_float(result.objectives[i]),
                    format_float(result.policy_changes[i]),
                    format_float(result.residuals[i]),
                ]
            )
    q_path = outdir / "q_function.json"
    result.q_hat.to_json(q_path)
    write_manifest(
        outdir, "fqi", vars(args), inputs, [policy_path, diag_path, q_path]
    )
    print(f"final policy objective: {result.objectives[-1]:.6f} -> {policy_path}")
    return EXIT_OK


def _cmd_tune(args) -> int:
    from .core import load_dataset
    from .fqi import select_hyperparams

    dataset_dir = _require(args.dataset_dir, "dataset directory")
    inputs = _dataset_inputs(dataset_dir)
    config = _load_config(args)
    if args.config:
        inputs.append(Path(args.config))

    def parse_grid(text: str, name: str) -> list[float]:
        try:
            values = [float(x) for x in text.split(",") if x.strip()]
        except ValueError as exc:
            raise InputError(f"bad {name} grid: {text!r}") from exc
        if not values:
            raise InputError(f"empty {name} grid")
        return values

    dataset = load_dataset(dataset_dir)
    selection = select_hyperparams(
        dataset,
        parse_grid(args.ridge_grid, "ridge"),
        parse_grid(args.roughness_grid, "roughness"),
        parse_grid(args.bandwidth_grid, "bandwidth"),
        config,
    )
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    out = outdir / "tune_result.json"
    out.write_text(json.dumps(selection.to_dict(), indent=2, sort_keys=True))
    write_manifest(outdir, "tune", vars(args), inputs, [out])
    print(
        f"selected ridge={selection.ridge:g} "
        f"roughness_weight={selection.roughness_weight:g} "
        f"bandwidth_scale={selection.bandwidth_scale:g}"
    )
    return EXIT_OK


def _cmd_transform(args) -> int:
    import numpy as np

    from .core import Grid, GridFunction, format_float
    from .density import LqdFunction, StepSample, kde, lqd_forward, lqd_inverse

    input_path = _require(args.input, "input CSV")
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    grid = Grid.uniform(args.grid_points)
    outputs: list[Path] = []

    def write_pairs(path: Path, header: tuple[str, str], x, y) -> None:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for a, b in zip(x, y):
                writer.writerow([format_float(a), format_float(b)])
        outputs.append(path)

    if args.mode == "steps-to-lqd":
        rows = _read_column_csv(input_path, "steps")
        sample = StepSample(np.array(rows), min_days=args.min_days)
        lqd = lqd_forward(kde(sample), grid)
        write_pairs(outdir / "lqd.csv", ("p", "value"), grid.points, lqd.values)
        quantile, density = lqd_inverse(lqd)
        write_pairs(
            outdir / "quantile.csv", ("p", "value"), grid.points, quantile.values
        )
        write_pairs(
            outdir / "density.csv", ("x", "value"), density.support, density.values
        )
        meta = outdir / "meta.json"
        meta.write_text(json.dumps({"q0": lqd.q0}, indent=2, sort_keys=True))
        outputs.append(meta)
    else:  # lqd-to-quantile
        with input_path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["p", "value"]:
                raise InputError(
                    f"expected columns p,value in {input_path}, got {header}"
                )
            data = np.array([[float(a), float(b)] for a, b in reader])
        lqd_grid = Grid.from_points(data[:, 0])
        lqd = LqdFunction(GridFunction(lqd_grid, data[:, 1]), q0=args.q0)
        quantile, density = lqd_inverse(lqd)
        write_pairs(
            outdir / "quantile.csv", ("p", "value"), lqd_grid.points, quantile.values
        )
        write_pairs(
            outdir / "density.csv", ("x", "value"), density.support, density.values
        )

    write_manifest(outdir, "transform", vars(args), [input_path], outputs)
    print(f"transform {args.mode} -> {outdir}")
    return EXIT_OK


def _read_column_csv(path: Path, column: str) -> list[float]:
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if column not in (reader.fieldnames or []):
            raise InputError(f"column {column!r} missing from {path}")
        try:
            return [float(row[column]) for row in reader]
        except ValueError as exc:
            raise InputError(f"non-numeric {column!r} value in {path}") from exc


def _cmd_report(args) -> int:
    from .core import load_dataset
    from .fqi import FunctionalLinearPolicy
    from .report import policy_provider, report_bundle

    dataset_dir = _require(args.dataset_dir, "dataset directory")
    inputs = _dataset_inputs(dataset_dir)
    policy_path = _require(args.policy, "policy JSON")
    inputs.append(policy_path)

    dataset = load_dataset(dataset_dir)
    if dataset.action_anchors is None:
        raise InputError(
            f"dataset in {dataset_dir} lacks action anchors; run `funcq ingest`"
        )
    policy = FunctionalLinearPolicy.from_json(policy_path)
    outdir = Path(args.output_dir)
    outputs = report_bundle(
        dataset, policy_provider(policy, dataset, neighbors=args.neighbors), outdir
    )
    write_manifest(outdir, "report", vars(args), inputs, outputs)
    print(f"report bundle ({len(outputs)} files) -> {outdir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="funcq",
        description="Offline reinforcement learning with function-valued actions.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.add_argument("--threads", type=int, default=1, help="worker thread cap")
        p.add_argument("--output-dir", required=True, help="output directory")

    p = sub.add_parser("ingest", help="raw CSVs to a transition dataset")
    common(p)
    p.add_argument("--steps", required=True, help="steps CSV (subject_id,date,steps)")
    p.add_argument(
        "--biomarkers", required=True,
        help="biomarkers CSV (subject_id,date,name,value)",
    )
    p.add_argument(
        "--demographics", required=True,
        help="demographics CSV (subject_id,sex,birth_date)",
    )
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--min-days", type=int, default=30)
    p.add_argument("--risk-tables", default=None, help="risk tables JSON override")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--env", choices=("synthetic", "tabular"), default="synthetic")
    p.add_argument("--env-spec", default=None, help="environment spec JSON")
    p.add_argument("--subjects", type=int, default=50)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--grid-points", type=int, default=101)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fqe", help="fitted-Q evaluation of a policy")
    common(p)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--policy", required=True, help="policy JSON")
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=_cmd_fqe)

    p = sub.add_parser("fqi", help="functional policy optimization")
    common(p)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.set_defaults(func=_cmd_fqi)

    p = sub.add_parser("tune", help="validation-split hyper-parameter selection")
    common(p)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--config", default=None, help="RunConfig JSON")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--ridge-grid", default="1e-4,1e-3,1e-2")
    p.add_argument("--roughness-grid", default="1e-5,1e-4,1e-3")
    p.add_argument("--bandwidth-grid", default="1.0")
    p.set_defaults(func=_cmd_tune)

    p = sub.add_parser("transform", help="LQD <-> quantile/PDF transforms")
    common(p)
    p.add_argument(
        "--mode", choices=("steps-to-lqd", "lqd-to-quantile"), required=True
    )
    p.add_argument("--input", required=True, help="input CSV")
    p.add_argument("--q0", type=float, default=0.0, help="anchor for inversion")
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--min-days", type=int, default=30)
    p.set_defaults(func=_cmd_transform)

    p = sub.add_parser("report", help="learned vs behavior comparison bundle")
    common(p)
    p.add_argument("--dataset-dir", required=True)
    p.add_argument("--policy", required=True, help="policy JSON")
    p.add_argument("--neighbors", type=int, default=10, help="anchor neighbors")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit:
        raise
    except InputError as exc:
        print(f"funcq: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"funcq: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"funcq: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, ArithmeticError) as exc:
        # Numeric-layer failures (singular systems, non-finite values) land
        # here; anything argument-shaped was already raised as InputError.
        print(f"funcq: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
