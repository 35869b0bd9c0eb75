"""Checkpoints: a JSON manifest plus a blob of little-endian float64 tensors.

``<dir>/manifest.json`` holds the format version, backbone config, T, d,
gamma, one phi table per tree (or null before hierarchy learning), any
run configuration, and an index of ``{name, offset, shape}`` entries into
``<dir>/tensors.bin``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .backbone import BackboneConfig, ModelParams
from .errors import CorruptManifestError, FormatVersionError, TruncatedBlobError
from .tree import TreeTopology

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_F8 = np.dtype("<f8")


def save_checkpoint(params, topologies, config, path):
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name, arr in params.named_tensors().items():
        data = np.ascontiguousarray(arr, dtype=_F8).tobytes()
        index.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        chunks.append(data)
        offset += len(data)
    config = dict(config or {})
    manifest = {
        "format_version": FORMAT_VERSION,
        "backbone": params.config.to_dict(),
        "T": params.num_trees,
        "d": params.depth,
        "gamma": config.get("gamma"),
        "tsm_normalization": params.tsm_normalization,
        "phi": None if topologies is None else [t.phi.tolist() for t in topologies],
        "config": config,
        "blob": BLOB,
        "blob_bytes": offset,
        "tensors": index,
    }
    atomic_write(path / BLOB, b"".join(chunks))
    atomic_write(path / MANIFEST, json.dumps(manifest, indent=1))
    return path


def read_manifest(path):
    try:
        m = json.loads((Path(path) / MANIFEST).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(m, dict) or "format_version" not in m:
        raise CorruptManifestError("manifest lacks format_version")
    if m["format_version"] != FORMAT_VERSION:
        raise FormatVersionError(
            f"checkpoint format_version {m['format_version']!r}; this build reads {FORMAT_VERSION}")
    for key in ("backbone", "T", "d", "tensors", "phi"):
        if key not in m:
            raise CorruptManifestError(f"manifest lacks {key!r}")
    return m


def load_checkpoint(path):
    """Returns (params, topologies or None, config dict)."""
    path = Path(path)
    m = read_manifest(path)
    blob = (path / m.get("blob", BLOB)).read_bytes()
    try:
        cfg = BackboneConfig.from_dict(m["backbone"])
        dt = np.dtype(cfg.dtype)
        tensors = {}
        for entry in m["tensors"]:
            shape = tuple(int(s) for s in entry["shape"])
            off = int(entry["offset"])
            n = int(np.prod(shape))
            if off + 8 * n > len(blob):
                raise TruncatedBlobError(
                    f"tensor {entry['name']} needs bytes {off}..{off + 8 * n}, blob has {len(blob)}")
            arr = np.frombuffer(blob, dtype=_F8, count=n, offset=off).reshape(shape)
            tensors[entry["name"]] = arr.astype(dt)
        theta = {k[len("theta/"):]: v for k, v in tensors.items() if k.startswith("theta/")}
        tsm = {k[len("tsm/"):]: v for k, v in tensors.items() if k.startswith("tsm/")}
        params = ModelParams(
            config=cfg, theta=theta, omega=tensors["omega"], omega_bias=tensors["omega_bias"],
            heads=tensors["heads"], head_bias=tensors["head_bias"], tsm=tsm,
            leaf_dists=tensors["leaf_dists"],
            tsm_normalization=m.get("tsm_normalization", "softmax"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptManifestError(f"manifest does not match tensor layout: {exc}") from exc
    topologies = None if m["phi"] is None else [TreeTopology(int(m["d"]), phi) for phi in m["phi"]]
    return params, topologies, m.get("config", {})
