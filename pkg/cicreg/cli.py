"""
Batch command-line interface.

    cicreg register --moving M.mvol --fixed F.mvol --out run/
    cicreg warp --moving M.mvol --field run/u_MF.mvol --out warped.mvol
    cicreg evaluate --warped W.mvol --fixed F.mvol --out metrics.rec
    cicreg jacobian --field run/u_MF.mvol --out audit/
    cicreg report 'runs/**/pair.rec' --out summary.rec
    cicreg slices --volume V.mvol --out figures/v

Exit codes: 0 success, 1 usage, 2 I/O or malformed file, 3 invalid input or configuration.
"""

import argparse
import concurrent.futures
import logging
import math
import os
import pathlib
import sys
import time
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from cicreg import __version__
from cicreg.config import config_to_values, fit_levels, load_config
from cicreg.errors import ConfigError, FormatError, InvalidInputError, UndefinedMetricError
from cicreg.jacobian_analysis import JACOBIAN_FIELDS, jacobian_determinant_field, jacobian_report, log_jd_map
from cicreg.ledger import RunCommand, RunManifest, list_runs, open_ledger, record_run
from cicreg.losses import cycle_residuals, mean_residual_norm
from cicreg.metrics import METRIC_FIELDS, evaluate_all
from cicreg.optimizer import RegistrationConfig, register
from cicreg.records import atomic_write_bytes, expand_record_paths, format_record, read_records
from cicreg.timestamps import utc_now
from cicreg.volume import Volume, encode_channels, is_nifti, load_volume
from cicreg.warp import field_magnitude, load_field, warp_volume

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_INPUT = 3

DEFAULT_METHOD = "cicreg"
FIELD_EXTENSIONS = {"mvol": ".mvol", "nifti": ".nii.gz"}
TIMING_COLUMNS = ("mean", "median", "min", "max")
# Fields aggregated by ``report`` besides the metric and Jacobian fields.
EXTRA_SUMMARY_FIELDS = ("cycle_residual_mean",)


class UsageError(Exception):
    """Command-line arguments that parse but cannot be used together."""


class CicregArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- Diagnostics ---


def _use_color(stream) -> bool:
    if os.environ.get("CICREG_NO_COLOR"):
        return False
    return hasattr(stream, "isatty") and stream.isatty()


def print_error(message: str) -> None:
    """Single-line diagnostic on stderr, red on a terminal unless CICREG_NO_COLOR is set."""
    line = "error: " + " ".join(str(message).split())
    if _use_color(sys.stderr):
        line = f"\033[31m{line}\033[0m"
    print(line, file=sys.stderr)


# --- Output helpers ---


def _record_bytes(records: Iterable[dict[str, Any]]) -> bytes:
    return ("\n".join(format_record(r) for r in records) + "\n").encode("utf-8")


def _write_all(outputs: dict[pathlib.Path, bytes]) -> None:
    """Write fully computed outputs, each atomically."""
    for path, payload in outputs.items():
        atomic_write_bytes(path, payload)


def _manifest(
    command: RunCommand,
    inputs: Sequence[str],
    output: str,
    started,
    elapsed: float,
    method: str = DEFAULT_METHOD,
    overrides: str = "",
    seed: Optional[int] = None,
) -> RunManifest:
    return RunManifest(
        command=command,
        method=method,
        inputs=",".join(str(p) for p in inputs),
        output=str(output),
        config_overrides=overrides,
        tool_version=__version__,
        seed=seed,
        timestamp=started,
        elapsed_seconds=max(0.0, elapsed),
    )


def _sidecar(path: str) -> pathlib.Path:
    return pathlib.Path(f"{path}.manifest.rec")


def _ledger_insert(ledger_dir: Optional[str], manifests: Iterable[RunManifest]) -> None:
    if not ledger_dir:
        return
    engine = open_ledger(ledger_dir)
    for manifest in manifests:
        record_run(engine, manifest)


def _overrides_text(cfg: RegistrationConfig) -> str:
    defaults = config_to_values(RegistrationConfig())
    values = config_to_values(cfg)
    return " ".join(f"{k}={v}" for k, v in values.items() if defaults.get(k) != v)


# --- register ---


@dataclass(frozen=True)
class PairJob:
    """One registration in a batch; picklable for the process pool."""

    moving: str
    fixed: str
    out_dir: str
    cfg: RegistrationConfig
    method: str
    field_format: str


def register_pair(job: PairJob) -> dict[str, Any]:
    """
    Register one pair and write its outputs into ``job.out_dir``.

    Every output is computed before the first file is written. Returns the manifest fields
    as a plain dict so that results cross process boundaries.

    Raises:
        FormatError, OSError: If an input cannot be read.
        InvalidInputError: If the pair is unusable (dims differ, pyramid infeasible).
    """
    started = utc_now()
    moving = load_volume(job.moving)
    fixed = load_volume(job.fixed)
    if moving.dims != fixed.dims:
        raise InvalidInputError(f"Moving dims {moving.dims} differ from fixed dims {fixed.dims}")
    cfg = fit_levels(job.cfg, fixed.dims)

    clock = time.perf_counter()
    result = register(moving, fixed, cfg)
    elapsed = time.perf_counter() - clock

    jac = jacobian_report(result.u_MF)
    metrics = evaluate_all(result.warped_MF, fixed)
    r_M, _ = cycle_residuals(result.u_MF, result.u_FM)
    pair_record = {
        "method": job.method,
        "moving": job.moving,
        "fixed": job.fixed,
        **metrics.as_record(),
        **jac.as_record(),
        "cycle_residual_mean": mean_residual_norm(r_M),
        "elapsed_seconds": elapsed,
    }

    out = pathlib.Path(job.out_dir)
    ext = FIELD_EXTENSIONS[job.field_format]
    manifest = _manifest(
        RunCommand.REGISTER,
        [job.moving, job.fixed],
        job.out_dir,
        started,
        elapsed,
        method=job.method,
        overrides=_overrides_text(cfg),
        seed=cfg.seed,
    )
    outputs = {
        out / f"u_MF{ext}": encode_channels(f"u_MF{ext}", result.u_MF.data, result.u_MF.spacing),
        out / f"u_FM{ext}": encode_channels(f"u_FM{ext}", result.u_FM.data, result.u_FM.spacing),
        out / f"warped_MF{ext}": encode_channels(
            f"warped_MF{ext}", result.warped_MF.data[None], result.warped_MF.spacing, fixed.affine
        ),
        out / "trace.rec": _record_bytes(result.trace_records()),
        out / "jacobian.rec": _record_bytes([jac.as_record()]),
        out / "metrics.rec": _record_bytes([{"method": job.method, **metrics.as_record()}]),
        out / "pair.rec": _record_bytes([pair_record]),
        out / "manifest.rec": _record_bytes([manifest.as_record()]),
    }
    _write_all(outputs)
    logger.info("Registered %s -> %s in %.3fs", job.moving, job.fixed, elapsed)
    return manifest.model_dump(exclude={"id"})


def cmd_register(args: argparse.Namespace) -> int:
    if len(args.moving) != len(args.fixed):
        raise UsageError(f"--moving given {len(args.moving)} time(s) but --fixed {len(args.fixed)} time(s)")
    if args.jobs < 1:
        raise UsageError(f"--jobs must be at least 1, got {args.jobs}")
    cfg = load_config(args.config, args.set or (), seed=args.seed)
    pairs = list(zip(args.moving, args.fixed))
    jobs = []
    for index, (moving, fixed) in enumerate(pairs):
        out_dir = args.out if len(pairs) == 1 else os.path.join(args.out, f"pair_{index:03d}")
        jobs.append(PairJob(moving, fixed, out_dir, cfg, args.method, args.field_format))

    if args.jobs > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(register_pair, jobs))
    else:
        outcomes = [register_pair(job) for job in jobs]
    _ledger_insert(args.ledger, [RunManifest(**fields) for fields in outcomes])
    return EXIT_OK


# --- warp / evaluate ---


def cmd_warp(args: argparse.Namespace) -> int:
    started = utc_now()
    moving = load_volume(args.moving)
    u = load_field(args.field)
    clock = time.perf_counter()
    warped = warp_volume(moving, u)
    elapsed = time.perf_counter() - clock
    manifest = _manifest(RunCommand.WARP, [args.moving, args.field], args.out, started, elapsed)
    affine = moving.affine if moving.dims == u.dims else None
    _write_all(
        {
            pathlib.Path(args.out): encode_channels(args.out, warped.data[None], warped.spacing, affine),
            _sidecar(args.out): _record_bytes([manifest.as_record()]),
        }
    )
    _ledger_insert(args.ledger, [manifest])
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    started = utc_now()
    warped = load_volume(args.warped)
    fixed = load_volume(args.fixed)
    clock = time.perf_counter()
    report = evaluate_all(warped, fixed)
    elapsed = time.perf_counter() - clock
    record = {"method": args.method, "warped": args.warped, "fixed": args.fixed, **report.as_record()}
    manifest = _manifest(RunCommand.EVALUATE, [args.warped, args.fixed], args.out, started, elapsed, args.method)
    _write_all(
        {
            pathlib.Path(args.out): _record_bytes([record]),
            _sidecar(args.out): _record_bytes([manifest.as_record()]),
        }
    )
    _ledger_insert(args.ledger, [manifest])
    return EXIT_OK


# --- slices / jacobian ---


def slice_to_pgm(plane: np.ndarray) -> bytes:
    """
    Binary PGM (P5, maxval 255) of a 2D slice, min-max scaled; a constant slice is all 0.

    Image column i, row j holds ``plane[i, j]``.
    """
    data = np.asarray(plane, dtype=np.float64)
    low, high = data.min(), data.max()
    scaled = np.zeros_like(data) if high == low else (data - low) / (high - low)
    pixels = np.rint(scaled * 255.0).astype(np.uint8)
    width, height = data.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(pixels.T).tobytes()


def center_slices(v: Volume) -> dict[str, np.ndarray]:
    """Center planes normal to x (sagittal), y (coronal) and z (axial)."""
    nx, ny, nz = v.dims
    return {
        "sagittal": v.data[nx // 2, :, :],
        "coronal": v.data[:, ny // 2, :],
        "axial": v.data[:, :, nz // 2],
    }


def _slice_outputs(v: Volume, prefix: str) -> dict[pathlib.Path, bytes]:
    return {pathlib.Path(f"{prefix}_{view}.pgm"): slice_to_pgm(plane) for view, plane in center_slices(v).items()}


def export_slices(args: argparse.Namespace) -> int:
    started = utc_now()
    volume = load_volume(args.volume)
    outputs = _slice_outputs(volume, args.out)
    manifest = _manifest(RunCommand.SLICES, [args.volume], args.out, started, 0.0)
    outputs[_sidecar(args.out)] = _record_bytes([manifest.as_record()])
    _write_all(outputs)
    _ledger_insert(args.ledger, [manifest])
    return EXIT_OK


def cmd_jacobian(args: argparse.Namespace) -> int:
    started = utc_now()
    u = load_field(args.field)
    clock = time.perf_counter()
    det = jacobian_determinant_field(u)
    log_jd = log_jd_map(u)
    magnitude = field_magnitude(u)
    report = jacobian_report(u)
    elapsed = time.perf_counter() - clock

    out = pathlib.Path(args.out)
    ext = FIELD_EXTENSIONS["nifti" if is_nifti(args.field) else "mvol"]
    outputs = {
        out / f"det{ext}": encode_channels(f"det{ext}", det.data[None], det.spacing),
        out / f"logjd{ext}": encode_channels(f"logjd{ext}", log_jd.data[None], log_jd.spacing),
        out / f"magnitude{ext}": encode_channels(f"magnitude{ext}", magnitude.data[None], magnitude.spacing),
        out / "jacobian.rec": _record_bytes([{"field": args.field, **report.as_record()}]),
    }
    outputs.update(_slice_outputs(log_jd, str(out / "logjd")))
    outputs.update(_slice_outputs(magnitude, str(out / "magnitude")))
    manifest = _manifest(RunCommand.JACOBIAN, [args.field], args.out, started, elapsed)
    outputs[out / "manifest.rec"] = _record_bytes([manifest.as_record()])
    _write_all(outputs)
    _ledger_insert(args.ledger, [manifest])
    return EXIT_OK


# --- report ---


def _usable(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def summary_fields(records: Sequence[dict[str, Any]]) -> list[str]:
    """Aggregated fields present in ``records``, in report order."""
    candidates = METRIC_FIELDS + JACOBIAN_FIELDS + EXTRA_SUMMARY_FIELDS
    return [name for name in candidates if any(name in r for r in records)]


def aggregate_records(records: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """
    Mean and population standard deviation per method per field.

    Non-finite values and nulls are left out and counted in ``n_excluded``.

    Raises:
        InvalidInputError: If no record carries any aggregated field.
    """
    fields = summary_fields(records)
    if not fields:
        raise InvalidInputError("No per-pair metric records to aggregate")
    methods: dict[str, list[dict[str, Any]]] = {}
    for record in records:
        methods.setdefault(str(record.get("method", DEFAULT_METHOD)), []).append(record)

    rows = []
    for method, group in methods.items():
        for name in fields:
            present = [r[name] for r in group if name in r]
            values = np.array([v for v in present if _usable(v)], dtype=np.float64)
            rows.append(
                {
                    "method": method,
                    "metric": name,
                    "mean": float(values.mean()) if values.size else None,
                    "std": float(values.std()) if values.size else None,
                    "n": int(values.size),
                    "n_excluded": len(present) - int(values.size),
                }
            )
    return rows


def timing_summary(seconds: Sequence[float]) -> dict[str, Any]:
    """Mean, median, minimum and maximum run time."""
    values = np.array([s for s in seconds if _usable(s)], dtype=np.float64)
    if not values.size:
        return {"n": 0, "mean": None, "median": None, "min": None, "max": None}
    return {
        "n": int(values.size),
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "min": float(values.min()),
        "max": float(values.max()),
    }


def timings_by_method(records: Sequence[dict[str, Any]]) -> dict[str, list[float]]:
    timings: dict[str, list[float]] = {}
    for record in records:
        if "elapsed_seconds" in record:
            timings.setdefault(str(record.get("method", DEFAULT_METHOD)), []).append(record["elapsed_seconds"])
    return timings


def format_table(rows: Sequence[dict[str, Any]], timings: dict[str, dict[str, Any]]) -> str:
    """Plain-text summary: one row per method, ``mean ± std`` per field, then the timing table."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    fields = list(dict.fromkeys(r["metric"] for r in rows))
    cells = {(r["method"], r["metric"]): r for r in rows}

    def cell(row: Optional[dict[str, Any]]) -> str:
        if row is None or row["mean"] is None:
            return "n/a"
        return f"{row['mean']:.4f} ± {row['std']:.4f}"

    width = max(len("method"), *(len(m) for m in methods), *(len(m) for m in timings))
    columns = [max(len(f), 17) for f in fields]
    lines = ["  ".join(["method".ljust(width)] + [f.ljust(c) for f, c in zip(fields, columns)])]
    for method in methods:
        values = [cell(cells.get((method, f))).ljust(c) for f, c in zip(fields, columns)]
        lines.append("  ".join([method.ljust(width)] + values).rstrip())
    if timings:
        lines.append("")
        lines.append("  ".join(["method".ljust(width), "n".rjust(4)] + [h.rjust(10) for h in TIMING_COLUMNS]))
        for method, summary in timings.items():
            stats = ["n/a".rjust(10) if summary[k] is None else f"{summary[k]:10.3f}" for k in TIMING_COLUMNS]
            lines.append("  ".join([method.ljust(width), str(summary["n"]).rjust(4)] + stats))
    return "\n".join(lines)


def cmd_report(args: argparse.Namespace) -> int:
    started = utc_now()
    paths: list[str] = []
    for pattern in args.records:
        paths.extend(expand_record_paths(pattern))
    records = read_records(dict.fromkeys(paths))
    if not records:
        raise InvalidInputError(f"No records found for {', '.join(args.records)}")

    rows = aggregate_records(records)
    if args.ledger:
        runs = list_runs(open_ledger(args.ledger), RunCommand.REGISTER)
        seconds: dict[str, list[float]] = {}
        for run in runs:
            seconds.setdefault(run.method, []).append(run.elapsed_seconds)
    else:
        seconds = timings_by_method(records)
    timings = {method: timing_summary(values) for method, values in seconds.items()}

    summary = list(rows)
    for method, stats in timings.items():
        summary.append({"method": method, "metric": "elapsed_seconds", **stats})
    manifest = _manifest(RunCommand.REPORT, paths, args.out, started, 0.0)
    _write_all(
        {
            pathlib.Path(args.out): _record_bytes(summary),
            _sidecar(args.out): _record_bytes([manifest.as_record()]),
        }
    )
    _ledger_insert(args.ledger, [manifest])
    print(format_table(rows, timings))
    return EXIT_OK


# --- Parser and entry point ---


def build_parser() -> argparse.ArgumentParser:
    common = CicregArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="Log progress at DEBUG level.")
    common.add_argument("--ledger", metavar="DIR", help="Also record the run in the SQLite ledger in DIR.")

    parser = CicregArgumentParser(
        prog="cicreg", description="Cycle inverse-consistent deformable registration and evaluation."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = commands.add_parser("register", parents=[common], help="Register moving/fixed pairs.")
    p.add_argument("--moving", action="append", required=True, help="Moving volume (repeatable).")
    p.add_argument("--fixed", action="append", required=True, help="Fixed volume (repeatable, paired in order).")
    p.add_argument("--out", required=True, help="Output directory.")
    p.add_argument("--config", help="Flat key = value configuration file.")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Configuration override (repeatable).")
    p.add_argument("--seed", type=int, help="Seed recorded with the run.")
    p.add_argument("--jobs", type=int, default=1, help="Pairs registered in parallel.")
    p.add_argument("--method", default=DEFAULT_METHOD, help="Method label stored in the records.")
    p.add_argument("--field-format", choices=sorted(FIELD_EXTENSIONS), default="mvol", help="Output file format.")
    p.set_defaults(handler=cmd_register)

    p = commands.add_parser("warp", parents=[common], help="Warp a volume by a displacement field.")
    p.add_argument("--moving", required=True, help="Volume to warp.")
    p.add_argument("--field", required=True, help="3-channel displacement field on the output grid.")
    p.add_argument("--out", required=True, help="Output volume path.")
    p.set_defaults(handler=cmd_warp)

    p = commands.add_parser("evaluate", parents=[common], help="Compute every metric for one pair.")
    p.add_argument("--warped", "--moving", dest="warped", required=True, help="Warped (or moving) volume.")
    p.add_argument("--fixed", required=True, help="Fixed volume.")
    p.add_argument("--out", required=True, help="Output record file.")
    p.add_argument("--method", default=DEFAULT_METHOD, help="Method label stored in the record.")
    p.set_defaults(handler=cmd_evaluate)

    p = commands.add_parser("jacobian", parents=[common], help="Audit a displacement field.")
    p.add_argument("--field", required=True, help="3-channel displacement field.")
    p.add_argument("--out", required=True, help="Output directory.")
    p.set_defaults(handler=cmd_jacobian)

    p = commands.add_parser("report", parents=[common], help="Aggregate per-pair records.")
    p.add_argument("records", nargs="+", help="Record files or glob patterns ('**' allowed).")
    p.add_argument("--out", required=True, help="Output summary record file.")
    p.set_defaults(handler=cmd_report)

    p = commands.add_parser("slices", parents=[common], help="Export center slices as PGM images.")
    p.add_argument("--volume", required=True, help="Volume to slice.")
    p.add_argument("--out", required=True, help="Output prefix; writes PREFIX_{sagittal,coronal,axial}.pgm.")
    p.set_defaults(handler=export_slices)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point for the cicreg command line."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.handler(args)
    except UsageError as e:
        print_error(e)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print_error(e)
        return EXIT_IO
    except (InvalidInputError, ConfigError, UndefinedMetricError) as e:
        print_error(e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
