import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict

import orjson

_RESERVED = set(vars(logging.makeLogRecord({})).keys()) | {"message", "asctime"}

LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class JsonLineFormatter(logging.Formatter):
    """Renders each record as one JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        payload: Dict[str, Any] = {
            "ts": datetime.fromtimestamp(record.created, tz=timezone.utc).isoformat(),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        for key, value in record.__dict__.items():
            if key not in _RESERVED and not key.startswith("_"):
                payload[key] = value
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return orjson.dumps(payload, default=str).decode()


def configure_logging(level: str = "info") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(LEVELS.get(level, logging.INFO))


def dumps_line(record: Dict[str, Any]) -> bytes:
    return orjson.dumps(record, option=orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY) + b"\n"


def append_jsonl(path: Path, record: Dict[str, Any]) -> None:
    with open(path, "ab") as fh:
        fh.write(dumps_line(record))


def read_jsonl(path: Path) -> list:
    with open(path, "rb") as fh:
        return [orjson.loads(line) for line in fh if line.strip()]


def write_json(path: Path, payload: Any) -> None:
    Path(path).write_bytes(
        orjson.dumps(payload, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)
        + b"\n"
    )


def read_json(path: Path) -> Any:
    return orjson.loads(Path(path).read_bytes())
