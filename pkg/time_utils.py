from __future__ import annotations

import logging
from datetime import date, datetime, timezone
from typing import Union

import pytz

logger = logging.getLogger(__name__)


def parse_date(value: Union[str, date, datetime]) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value

    raw = str(value).strip()
    if not raw:
        raise ValueError("empty date string")

    # Accept YYYY-MM-DD or a datetime-like string.
    if len(raw) == 10 and raw[4] == "-" and raw[7] == "-":
        return date.fromisoformat(raw)

    normalized = raw.replace("Z", "+00:00")
    if "T" in normalized and " " not in normalized:
        normalized = normalized.replace("T", " ")
    return datetime.fromisoformat(normalized).date()


def format_date(value: Union[str, date, datetime]) -> str:
    return parse_date(value).isoformat()


def _get_timezone(name: str):
    try:
        return pytz.timezone(name)
    except pytz.UnknownTimeZoneError:
        logger.warning(f"Invalid TZ={name!r}; defaulting to UTC")
        return pytz.utc


def audit_timestamp(tz_name: str = "UTC") -> str:
    """Current time in the named zone, ISO-8601 with offset."""
    now = datetime.now(timezone.utc)
    return now.astimezone(_get_timezone(tz_name)).isoformat(timespec="seconds")
