from __future__ import annotations

import logging
import sys

from app.settings import Settings

# LogRecord attributes that are not user-supplied `extra` fields
_RESERVED = set(vars(logging.makeLogRecord({}))) | {"message", "asctime"}


class KeyValueFormatter(logging.Formatter):
    """Renders `extra=` fields after the event name as key=value pairs."""

    def format(self, record: logging.LogRecord) -> str:
        base = super().format(record)
        fields = {k: v for k, v in vars(record).items() if k not in _RESERVED}
        if not fields:
            return base
        return base + " " + " ".join(f"{k}={_fmt(v)}" for k, v in sorted(fields.items()))


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def configure_logging(env: Settings | None = None, level: str | None = None, log_file: str | None = None) -> logging.Logger:
    """Route the shapereg logger to log_file or SHAPEREG_LOG_FILE, else stderr; explicit arguments win over env."""
    env = env if env is not None else Settings()
    log = logging.getLogger("shapereg")
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    target = log_file or env.SHAPEREG_LOG_FILE
    handler = logging.FileHandler(target, encoding="utf-8") if target else logging.StreamHandler(sys.stderr)
    handler.setFormatter(KeyValueFormatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    log.addHandler(handler)
    log.setLevel((level or env.SHAPEREG_LOG).upper())
    log.propagate = False
    return log
