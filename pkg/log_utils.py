"""
Timestamped console logging and structured metric lines shared by every stage.
"""

import json
import logging
from datetime import datetime, timezone

_quiet = False

# Keep third-party chatter out of the pipeline output
logging.getLogger("numpy").setLevel(logging.WARNING)


def set_quiet(quiet):
    """Silence log output (used by tests and library callers)"""
    global _quiet
    _quiet = bool(quiet)


def is_quiet():
    return _quiet


def log_with_timestamp(message):
    """Print message with timestamp"""
    if _quiet:
        return
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S.%f")[:-3]  # milliseconds
    print(f"[{timestamp}] {message}")


def log_metric(event_type, **data):
    """Emit structured metrics for downstream analysis"""
    if _quiet:
        return
    entry = {
        "event": event_type,
        "ts": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
    }
    entry.update(data)
    print(f"[METRIC] {json.dumps(entry, sort_keys=True, default=str)}")
