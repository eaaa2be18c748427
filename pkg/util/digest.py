import hashlib
from pathlib import Path
from typing import Any, Dict

import orjson


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def combined_digest(file_digests: Dict[str, str]) -> str:
    """SHA-256 over the per-file digests concatenated in lexicographic filename order."""
    h = hashlib.sha256()
    for name in sorted(file_digests):
        h.update(file_digests[name].encode("ascii"))
    return h.hexdigest()


def canonical_json(payload: Any) -> bytes:
    return orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)


def payload_digest(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload)).hexdigest()
