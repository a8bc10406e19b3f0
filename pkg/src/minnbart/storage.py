"""
Deterministic archive format shared by chain outputs and checkpoints.

An archive is a zip file holding ``meta.json`` plus one ``.npy`` entry per
array. Entry order, timestamps and JSON key order are fixed so identical
contents always produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, meta, arrays):
    """Write `meta` (JSON-serializable) and the name -> array mapping `arrays`."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(_entry(name + ".npy"), buf.getvalue())
    tmp.replace(path)
    return path


def read_archive(path):
    """Inverse of `write_archive`: returns ``(meta, arrays)``."""
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                with zf.open(name) as fh:
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    return meta, arrays
