"""Reproducible zip archives: a JSON header plus named ``.npy`` arrays."""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(Path(path), "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, indent=1, sort_keys=True))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    arrays = {}
    try:
        zf = zipfile.ZipFile(Path(path))
    except zipfile.BadZipFile as exc:
        raise ValueError(f"{path} is not a checkpoint archive") from exc
    with zf:
        if "header.json" not in zf.namelist():
            raise ValueError(f"{path} has no header.json")
        header = json.loads(zf.read("header.json"))
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/") : -len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False
                )
    return header, arrays
