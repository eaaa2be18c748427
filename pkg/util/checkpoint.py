"""
Named-array archive: a text header followed by little-endian raw bytes.

    ofdiff-checkpoint 1
    <name> <dtype> <shape> <offset> <nbytes>      one line per array, sorted by name
    meta <canonical json>
    end
    <raw bytes>

Shapes are written as dims joined by 'x', or '-' for a scalar.
"""
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import orjson
import torch

from exceptions import CheckpointError
from util.digest import canonical_json

MAGIC = "ofdiff-checkpoint 1"

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
}
_NAMES = {torch_dtype: name for name, (torch_dtype, _) in _DTYPES.items()}


def _shape_text(shape) -> str:
    return "x".join(str(d) for d in shape) if len(shape) else "-"


def _parse_shape(text: str) -> Tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def encode_checkpoint(arrays: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> bytes:
    lines = [MAGIC]
    blobs = []
    offset = 0
    for name in sorted(arrays):
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"array name {name!r} contains whitespace")
        tensor = arrays[name].detach().cpu()
        if tensor.dtype not in _NAMES:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        dtype = _NAMES[tensor.dtype]
        blob = tensor.contiguous().numpy().astype(_DTYPES[dtype][1], copy=False).tobytes()
        lines.append(f"{name} {dtype} {_shape_text(tuple(tensor.shape))} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines.append("meta " + canonical_json(meta).decode())
    lines.append("end")
    return ("\n".join(lines) + "\n").encode() + b"".join(blobs)


def decode_checkpoint(data: bytes) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    marker = b"\nend\n"
    cut = data.find(marker)
    if not data.startswith(MAGIC.encode() + b"\n") or cut < 0:
        raise CheckpointError("not an ofdiff checkpoint")
    header = data[:cut].decode().split("\n")[1:]
    body = data[cut + len(marker):]
    arrays: Dict[str, torch.Tensor] = {}
    meta: Dict[str, Any] = {}
    for line in header:
        if line.startswith("meta "):
            meta = orjson.loads(line[5:])
            continue
        try:
            name, dtype, shape, offset, nbytes = line.split(" ")
            torch_dtype, np_dtype = _DTYPES[dtype]
            start, size = int(offset), int(nbytes)
        except (ValueError, KeyError):
            raise CheckpointError(f"malformed checkpoint header line: {line!r}")
        if start + size > len(body):
            raise CheckpointError(f"array {name} runs past the end of the file")
        values = np.frombuffer(body[start:start + size], dtype=np_dtype).reshape(_parse_shape(shape))
        arrays[name] = torch.from_numpy(values.astype(values.dtype.newbyteorder("="), copy=True)).to(torch_dtype)
    return arrays, meta


def save_checkpoint(path: Path, arrays: Dict[str, torch.Tensor], meta: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(arrays, meta))


def load_checkpoint(path: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path} ({e})")
    return decode_checkpoint(data)
