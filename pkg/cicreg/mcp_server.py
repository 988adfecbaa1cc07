"""
MCP tool surface over the registration library.

Every tool returns a JSON-compatible dict. Library errors come back as ``{"error": message}``;
non-finite floats are returned as the strings "inf", "-inf" and "nan".
"""

import logging
import math
import pathlib
from typing import Any, Optional

from fastmcp import FastMCP

from cicreg.cli import (
    DEFAULT_METHOD,
    PairJob,
    aggregate_records,
    timing_summary,
    timings_by_method,
)
from cicreg.cli import register_pair as run_pair  # the tool below reuses the name
from cicreg.config import load_config
from cicreg.errors import CicregError
from cicreg.jacobian_analysis import jacobian_report
from cicreg.metrics import evaluate_all
from cicreg.records import expand_record_paths, read_records
from cicreg.volume import load_volume, save_volume
from cicreg.warp import load_field, warp_volume

mcp_server = FastMCP("CicReg")


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def register_pair(
    moving_path: str,
    fixed_path: str,
    out_dir: str,
    overrides: Optional[list[str]] = None,
    method: str = DEFAULT_METHOD,
    field_format: str = "mvol",
) -> dict[str, Any]:
    """
    Register a moving volume to a fixed volume and write fields, warped image and records to out_dir.

    Args:
        moving_path (str): Moving volume (.mvol, .nii or .nii.gz).
        fixed_path (str): Fixed volume with the same dimensions.
        out_dir (str): Directory receiving u_MF, u_FM, warped_MF and the record files.
        overrides (list[str], optional): Configuration items such as "lambda_jac=0" or "levels=2".
        method (str, optional): Method label stored in the records. Defaults to "cicreg".
        field_format (str, optional): "mvol" or "nifti". Defaults to "mvol".

    Returns:
        dict: The per-pair record (metrics, Jacobian statistics, cycle residual, timing), or an error message.
    """
    if field_format not in ("mvol", "nifti"):
        return {"error": f"Invalid field_format: '{field_format}'. Valid: ['mvol', 'nifti']"}
    try:
        cfg = load_config(None, overrides or ())
        run_pair(PairJob(moving_path, fixed_path, out_dir, cfg, method, field_format))
        records = read_records([pathlib.Path(out_dir) / "pair.rec"])
    except (CicregError, OSError) as e:
        return {"error": str(e)}
    return _jsonable({"out_dir": out_dir, **records[0]})


def warp_image(moving_path: str, field_path: str, out_path: str) -> dict[str, Any]:
    """
    Warp a volume by a 3-channel displacement field (pull-back, trilinear, clamped borders).

    Args:
        moving_path (str): Volume to warp.
        field_path (str): Displacement field defining the output grid.
        out_path (str): Output volume path; the format follows the extension.

    Returns:
        dict: Output path and dimensions, or an error message.
    """
    try:
        warped = warp_volume(load_volume(moving_path), load_field(field_path))
        save_volume(warped, out_path)
    except (CicregError, OSError) as e:
        return {"error": str(e)}
    return {"output": out_path, "dims": list(warped.dims)}


def evaluate_pair(warped_path: str, fixed_path: str) -> dict[str, Any]:
    """
    Compute SSIM, NCC, MI, PSNR, MSE, MAE, Dice and gradient similarity for one pair.

    Returns:
        dict: One value per metric (null when undefined), or an error message.
    """
    try:
        report = evaluate_all(load_volume(warped_path), load_volume(fixed_path))
    except (CicregError, OSError) as e:
        return {"error": str(e)}
    return _jsonable(report.as_record())


def audit_field(field_path: str) -> dict[str, Any]:
    """
    Folding and regularity statistics of a displacement field.

    Returns:
        dict: Non-positive Jacobian percentage, determinant range, log-Jacobian statistics and
        displacement magnitudes, or an error message.
    """
    try:
        report = jacobian_report(load_field(field_path))
    except (CicregError, OSError) as e:
        return {"error": str(e)}
    return _jsonable(report.as_record())


def summarize_records(patterns: list[str]) -> dict[str, Any]:
    """
    Aggregate per-pair records into mean and population standard deviation per method and metric.

    Args:
        patterns (list[str]): Record files or glob patterns ('**' allowed).

    Returns:
        dict: {"rows": [...], "timing": {method: {...}}}, or an error message.
    """
    paths: list[str] = []
    for pattern in patterns:
        paths.extend(expand_record_paths(pattern))
    if not paths:
        return {"error": f"No record files match {patterns}"}
    try:
        records = read_records(dict.fromkeys(paths))
        rows = aggregate_records(records)
    except (CicregError, OSError) as e:
        return {"error": str(e)}
    timings = {method: timing_summary(v) for method, v in timings_by_method(records).items()}
    return _jsonable({"rows": rows, "timing": timings})


# --- Register tools with MCP server (explicit registration keeps functions callable) ---
mcp_server.tool()(register_pair)
mcp_server.tool()(warp_image)
mcp_server.tool()(evaluate_pair)
mcp_server.tool()(audit_field)
mcp_server.tool()(summarize_records)


def main():
    """Entry point for the cicreg MCP server (stdio transport)."""
    logging.basicConfig(level=logging.WARNING)
    mcp_server.run()


if __name__ == "__main__":
    main()
