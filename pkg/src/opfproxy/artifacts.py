"""Stage artifacts: plain files with the producing config's hash.

Every file written here carries the short config digest so a pipeline
stage can refuse inputs produced under a different configuration.
Formats: demands as CSV, labels and branch sets as JSON, model
checkpoints as a small versioned binary with a JSON sidecar.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .trainer import Fcnn

CHECKPOINT_MAGIC = b"OPFW"
CHECKPOINT_VERSION = 1
SCHEMA_VERSION = 1


class ArtifactError(ValueError):
    """Missing, malformed, or mismatched stage artifact."""


def _require(path: Path, stage: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(
            f"{path} not found; run the {stage!r} stage first")
    return path


def check_digest(found: str, expected: str, path) -> None:
    if expected is not None and found != expected:
        raise ArtifactError(
            f"{path} was produced under config {found}, current config is "
            f"{expected}; regenerate the artifact or restore the config")


## ---------------------------------------------------------------------------
## demand CSV


def write_demands(path, demands: np.ndarray, n_bus: int, digest: str,
                  seed: int) -> None:
    demands = np.asarray(demands, dtype=float).reshape(-1, 2 * n_bus)
    cols = [f"pd_{i}" for i in range(n_bus)] + [f"qd_{i}" for i in range(n_bus)]
    header = (f"config={digest}\nseed={seed}\nschema={SCHEMA_VERSION}\n"
              + ",".join(cols))
    np.savetxt(path, demands, fmt="%.17g", delimiter=",", header=header)


def read_demands(path, digest: str = None):
    """(demands, meta) from a demand CSV; checks the config hash."""
    path = _require(path, "gen-demands")
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
    check_digest(meta.get("config"), digest, path)
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.size == 0:
        data = data.reshape(0, data.shape[1] if data.ndim == 2 else 0)
    return data, meta


## ---------------------------------------------------------------------------
## labeled solutions and branch sets (JSON)


def write_labels(path, indices, ys, z1s, z2s, objectives, failures,
                 digest: str, provenance: str) -> None:
    doc = {"config": digest, "schema": SCHEMA_VERSION,
           "provenance": provenance,
           "failures": [int(i) for i in failures],
           "samples": [
               {"index": int(i), "y": np.asarray(y).tolist(),
                "z1": np.asarray(z1).tolist(), "z2": np.asarray(z2).tolist(),
                "objective": float(obj)}
               for i, y, z1, z2, obj in zip(indices, ys, z1s, z2s, objectives)]}
    Path(path).write_text(json.dumps(doc))


def read_labels(path, digest: str = None):
    path = _require(path, "solve-ref")
    doc = json.loads(path.read_text())
    check_digest(doc.get("config"), digest, path)
    samples = doc["samples"]
    return {"indices": np.array([s["index"] for s in samples], dtype=int),
            "y": np.array([s["y"] for s in samples]),
            "z1": np.array([s["z1"] for s in samples]),
            "z2": np.array([s["z2"] for s in samples]),
            "objective": np.array([s["objective"] for s in samples]),
            "failures": doc.get("failures", []),
            "provenance": doc.get("provenance", "")}


def write_branch_set(path, beta: float, members: np.ndarray,
                     scores: np.ndarray, n_branch: int, digest: str) -> None:
    doc = {"config": digest, "schema": SCHEMA_VERSION, "beta": float(beta),
           "n_branch": int(n_branch),
           "members": np.asarray(members, dtype=int).tolist(),
           "scores": np.asarray(scores, dtype=float).tolist()}
    Path(path).write_text(json.dumps(doc))


def read_branch_set(path, digest: str = None):
    path = _require(path, "branch-set")
    doc = json.loads(path.read_text())
    check_digest(doc.get("config"), digest, path)
    return {"beta": doc["beta"], "n_branch": doc["n_branch"],
            "members": np.asarray(doc["members"], dtype=np.intp),
            "scores": np.asarray(doc["scores"], dtype=float)}


## ---------------------------------------------------------------------------
## model checkpoints


def write_checkpoint(path, fcnn: Fcnn, digest: str, mode: str,
                     epoch: int, extra: dict = None) -> None:
    """Magic + version + JSON header + row-major float64 payload."""
    path = Path(path)
    header = {"sizes": [int(s) for s in fcnn.sizes], "dtype": "float64",
              "mode": mode, "epoch": int(epoch), "config": digest}
    if extra:
        header.update(extra)
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for arr in fcnn.weights + fcnn.biases:
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    sidecar = path.parent / (path.stem + ".meta.json")
    sidecar.write_text(json.dumps(header, indent=2))


def read_checkpoint(path, digest: str = None):
    """(Fcnn, header) from a checkpoint file; checks magic and hash."""
    path = _require(path, "train")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ArtifactError(f"{path} is not a model checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ArtifactError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode())
    check_digest(header.get("config"), digest, path)
    sizes = header["sizes"]
    at = 12 + hlen
    weights, biases = [], []
    for a, b in zip(sizes[1:], sizes[:-1]):
        weights.append(np.frombuffer(raw, dtype=np.float64, count=a * b,
                                     offset=at).reshape(a, b).copy())
        at += 8 * a * b
    for a in sizes[1:]:
        biases.append(np.frombuffer(raw, dtype=np.float64, count=a,
                                    offset=at).copy())
        at += 8 * a
    if at != len(raw):
        raise ArtifactError(f"{path}: payload size mismatch")
    return Fcnn(sizes=tuple(sizes), weights=weights, biases=biases), header


## ---------------------------------------------------------------------------
## training log


LOG_COLUMNS = ("epoch", "phase", "total", "l_o", "l_s", "l_c_z2", "l_c_vd",
               "l_wp", "seconds", "factor_seconds", "solve_seconds",
               "pf_seconds", "fdpf_failures", "lr")


def write_training_log(path, history, digest: str) -> None:
    lines = [f"# config={digest}", ",".join(LOG_COLUMNS)]
    for row in history:
        lines.append(",".join(
            f"{row[c]:.9g}" if isinstance(row[c], float) else str(row[c])
            for c in LOG_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")
