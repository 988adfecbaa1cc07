from datetime import datetime, timezone


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(tzinfo=None)


def utc_stamp(moment: datetime | None = None) -> str:
    """Naive-UTC ISO-8601 text with second resolution, as written into run manifests."""
    return (moment or utc_now()).replace(microsecond=0).isoformat()
