"""Single-file checkpoint container.

Layout: a zip archive holding ``header.json`` (shapes, dims, seed, step
count, arbitrary metadata) plus one ``arrays/<name>.npy`` entry per named
weight array. Entries are written with a fixed timestamp so identical
contents produce byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any, Dict, Mapping

import numpy as np

FORMAT = "timeweaver-checkpoint-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)  # zip format's minimum datetime


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, payload)


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray],
                    header: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    full_header = dict(header)
    full_header["format"] = FORMAT
    full_header["arrays"] = {
        name: {"shape": list(arr.shape), "dtype": str(arr.dtype)}
        for name, arr in sorted(arrays.items())
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _write_entry(zf, "header.json",
                     json.dumps(full_header, indent=2, sort_keys=True).encode())
        for name in sorted(arrays):
            arr_buf = io.BytesIO()
            np.save(arr_buf, np.ascontiguousarray(arrays[name]))
            _write_entry(zf, f"arrays/{name}.npy", arr_buf.getvalue())
    path.write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json").decode())
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: not a {FORMAT} file")
        arrays = {}
        for name in header["arrays"]:
            with zf.open(f"arrays/{name}.npy") as fh:
                arrays[name] = np.load(io.BytesIO(fh.read()))
    return arrays, header


def read_header(path: str | Path) -> Dict[str, Any]:
    with zipfile.ZipFile(Path(path), "r") as zf:
        return json.loads(zf.read("header.json").decode())
