"""Model time is float seconds since an anchor instant.

CSV interfaces carry ISO-8601 timestamps; internal code works in seconds.
All schedule instants (cycle bounds, observation times, output cadence)
are whole seconds, so the round trip is exact.
"""

from datetime import datetime, timedelta, timezone

DEFAULT_ANCHOR = "2000-01-01T00:00:00Z"


def parse_anchor(text):
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def to_iso(t_seconds, anchor=DEFAULT_ANCHOR):
    """Format model time (seconds since anchor) as ISO-8601, UTC, second resolution."""
    dt = parse_anchor(anchor) + timedelta(seconds=round(float(t_seconds)))
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def from_iso(text, anchor=DEFAULT_ANCHOR):
    """Parse an ISO-8601 timestamp to model seconds since the anchor."""
    dt = parse_anchor(text)
    return (dt - parse_anchor(anchor)).total_seconds()


HOUR = 3600.0
DAY = 86400.0
