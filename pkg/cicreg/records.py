"""
Line-delimited flat key/value records and atomic file writes.

One record per line, fields separated by tabs, each field written as ``key=value``.
Floats use the shortest repr that round-trips, non-finite floats are written as
``inf``, ``-inf`` or ``nan`` and missing values as ``null``.
"""

import glob
import math
import os
import pathlib
import tempfile
from typing import Any, Iterable, Mapping, Union
from urllib.parse import quote, unquote

from cicreg.errors import FormatError

PathLike = Union[str, os.PathLike]

# Characters left readable in string values; everything else is percent-encoded.
_SAFE_CHARS = "/:._-+,@()[]"
_SENTINELS = {"null": None, "true": True, "false": False, "inf": math.inf, "-inf": -math.inf, "nan": math.nan}


def format_value(value: Any) -> str:
    """Encode one value for a record field."""
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    if hasattr(value, "item") and not isinstance(value, str):
        # numpy scalars
        return format_value(value.item())
    text = str(value.value if hasattr(value, "value") else value)
    encoded = quote(text, safe=_SAFE_CHARS)
    if encoded in _SENTINELS or _looks_numeric(encoded):
        # keep strings such as "inf" or "12" distinguishable from numbers
        encoded = f"%{ord(encoded[0]):02X}{encoded[1:]}"
    return encoded


def parse_value(text: str) -> Any:
    """Decode one record field value."""
    if text in _SENTINELS:
        return _SENTINELS[text]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return unquote(text)


def _looks_numeric(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def format_record(record: Mapping[str, Any]) -> str:
    """
    Encode a mapping as a single record line (no trailing newline).

    Raises:
        ValueError: If a key is empty or contains a tab, newline or '='.
    """
    fields = []
    for key, value in record.items():
        if not key or any(ch in key for ch in "\t\n=\r"):
            raise ValueError(f"Invalid record key: {key!r}")
        fields.append(f"{key}={format_value(value)}")
    return "\t".join(fields)


def parse_record(line: str, source: str = "") -> dict[str, Any]:
    """
    Decode a record line back into an ordered dictionary.

    Raises:
        FormatError: If a field lacks the '=' separator.
    """
    record: dict[str, Any] = {}
    stripped = line.rstrip("\r\n")
    if not stripped:
        return record
    for field in stripped.split("\t"):
        key, sep, value = field.partition("=")
        if not sep or not key:
            raise FormatError(f"malformed record field {field!r}", path=source)
        record[key] = parse_value(value)
    return record


def read_records(paths: Iterable[PathLike]) -> list[dict[str, Any]]:
    """Read every non-empty record line from the given files, in order."""
    records = []
    for path in paths:
        text = pathlib.Path(path).read_text(encoding="utf-8")
        for line in text.splitlines():
            if line.strip():
                records.append(parse_record(line, source=str(path)))
    return records


def expand_record_paths(pattern: str) -> list[str]:
    """Sorted matches for a (recursive) glob pattern, or the path itself if it exists."""
    matches = sorted(glob.glob(pattern, recursive=True))
    if not matches and pathlib.Path(pattern).is_file():
        matches = [pattern]
    return matches


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write ``payload`` to ``path`` via a sibling temporary file and an atomic rename."""
    target = pathlib.Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, target)
    except BaseException:
        try:
            os.unlink(tmp_name)
        except OSError:
            pass
        raise


def write_records(path: PathLike, records: Iterable[Mapping[str, Any]]) -> None:
    """Atomically write records, one per line."""
    lines = [format_record(record) for record in records]
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))
