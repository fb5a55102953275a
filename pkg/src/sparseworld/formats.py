"""Persistent file formats: dataset JSONL, checkpoint binary, fingerprints.

Dataset (one JSON object per line):
  line 0   header: format, version, token_dim, n_objects, T, episode_count,
           envs, episodes_per_env, seed, world (WorldConfig dict), specs of
           the base scene, env_catalogue.
  line k   episode: env_id, specs, targets, states (T x N x 4 floats, stored
           at float32 precision), graphs (T-1 lists of off-diagonal [i, j]
           edges meaning "j is a parent of i"; the diagonal is implicit).

Checkpoint (little-endian binary):
  magic "SPTN", u32 version, fingerprint (u16 length + utf8), u32 tensor
  count, then per tensor: name (u16 length + utf8), u8 ndim, u32 dims,
  float32 row-major payload. Saving and loading round-trips bit-exactly.

All JSON written here is canonical (sorted keys, compact separators) so
same-seed runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterable

import numpy as np

from .sim.world import ObjectSpec, WorldConfig

DATASET_FORMAT = "sparseworld-dataset"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"SPTN"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed or mismatched persistent file."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fingerprint(obj) -> str:
    """Stable 16-hex-digit digest of a JSON-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def file_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _round_states(states: np.ndarray) -> list:
    # float32 precision keeps lines short; consumers cast to float32 anyway
    return [[[float(v) for v in np.asarray(row, dtype=np.float32)] for row in frame] for frame in states]


def _edges_from_graph(g: np.ndarray) -> list:
    out = []
    n = g.shape[0]
    for i in range(n):
        for j in range(n):
            if i != j and g[i, j]:
                out.append([i, j])
    return out


def graph_from_edges(edges, n: int) -> np.ndarray:
    g = np.eye(n, dtype=np.uint8)
    for i, j in edges:
        g[i, j] = 1
    return g


def write_dataset(path, header: dict, episodes: Iterable) -> int:
    """Write header + episode lines; returns the number of episodes written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(header) + "\n")
        for ep in episodes:
            line = {
                "env_id": ep.env_id,
                "specs": [s.to_dict() for s in ep.specs],
                "targets": sorted(ep.targets),
                "states": _round_states(ep.states),
                "graphs": [_edges_from_graph(g) for g in ep.graphs],
            }
            fh.write(canonical_json(line) + "\n")
            count += 1
    return count


def read_dataset(path):
    """Parse a dataset file; returns (header, list of EpisodeRecord)."""
    from .sim.dataset import EpisodeRecord  # local import avoids a cycle

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty dataset file")
    header = json.loads(lines[0])
    if header.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a {DATASET_FORMAT} file")
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {header.get('version')}")
    episodes = []
    for ln, raw in enumerate(lines[1:], start=1):
        d = json.loads(raw)
        specs = [ObjectSpec.from_dict(s) for s in d["specs"]]
        n = len(specs)
        states = np.asarray(d["states"], dtype=np.float64)
        if states.ndim != 3 or states.shape[1] != n or states.shape[2] != 4:
            raise FormatError(f"{path}:{ln}: states shape {states.shape} inconsistent with {n} objects")
        if states.shape[0] != header["T"]:
            raise FormatError(f"{path}:{ln}: episode length {states.shape[0]} != header T {header['T']}")
        graphs = np.stack([graph_from_edges(e, n) for e in d["graphs"]]) if d["graphs"] else np.zeros((0, n, n), np.uint8)
        if graphs.shape[0] != states.shape[0] - 1:
            raise FormatError(f"{path}:{ln}: {graphs.shape[0]} graphs for {states.shape[0]} states")
        episodes.append(
            EpisodeRecord(
                env_id=int(d["env_id"]),
                specs=specs,
                states=states,
                graphs=graphs,
                targets=frozenset(int(t) for t in d["targets"]),
            )
        )
    if header.get("episode_count") != len(episodes):
        raise FormatError(
            f"{path}: header claims {header.get('episode_count')} episodes, found {len(episodes)}"
        )
    return header, episodes


def make_header(world: WorldConfig, base_specs, T: int, envs, episodes_per_env: int, seed: int, catalogue: dict) -> dict:
    from .sim.tokens import TOKEN_DIM

    return {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "token_dim": TOKEN_DIM,
        "n_objects": len(base_specs),
        "T": T,
        "envs": list(envs),
        "episodes_per_env": episodes_per_env,
        "episode_count": len(list(envs)) * episodes_per_env,
        "seed": seed,
        "world": world.to_dict(),
        "specs": [s.to_dict() for s in base_specs],
        "env_catalogue": catalogue,
    }


# -- checkpoints ----------------------------------------------------------


def save_checkpoint(path, tensors: dict[str, np.ndarray], config_fingerprint: str = "") -> None:
    fp = config_fingerprint.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float32)
            if arr.ndim:
                arr = np.ascontiguousarray(arr)  # note: would promote 0-d to 1-d
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.astype("<f4", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Returns ({name: float32 array}, config fingerprint)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise FormatError(f"{path}: truncated while reading {what}")
        out = blob[off : off + n]
        off += n
        return out

    if need(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", need(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version} unsupported (want {CHECKPOINT_VERSION})")
    (fplen,) = struct.unpack("<H", need(2, "fingerprint"))
    fp = need(fplen, "fingerprint").decode("utf-8")
    (count,) = struct.unpack("<I", need(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for k in range(count):
        (nlen,) = struct.unpack("<H", need(2, f"tensor {k} name"))
        name = need(nlen, f"tensor {k} name").decode("utf-8")
        (ndim,) = struct.unpack("<B", need(1, f"tensor '{name}' ndim"))
        dims = struct.unpack(f"<{ndim}I", need(4 * ndim, f"tensor '{name}' dims"))
        nbytes = int(np.prod(dims, dtype=np.int64)) * 4 if ndim else 4
        payload = need(nbytes, f"tensor '{name}' payload")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims if ndim else ())
        tensors[name] = arr.astype(np.float32)
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last tensor")
    return tensors, fp


def save_model(path, params, meta: dict | None = None) -> None:
    """Checkpoint a ModelParams plus a JSON sidecar carrying its config.

    The binary file embeds the model-config fingerprint; the sidecar
    (<path>.meta.json) holds the config itself and any extra metadata (tau,
    training step, ...), so a checkpoint is loadable standalone.
    """
    cfg_dict = params.config.to_dict()
    fp = fingerprint(cfg_dict)
    save_checkpoint(path, params.arrays(), config_fingerprint=fp)
    sidecar = {"model": cfg_dict, "fingerprint": fp}
    if meta:
        sidecar.update(meta)
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as fh:
        fh.write(canonical_json(sidecar) + "\n")


def load_model(path):
    """Load a checkpoint + sidecar; returns (ModelParams, sidecar dict)."""
    from .model import ModelConfig, ModelParams

    tensors, fp = load_checkpoint(path)
    try:
        with open(str(path) + ".meta.json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{path}: missing sidecar {path}.meta.json (needed for the model config)")
    if fingerprint(sidecar["model"]) != fp:
        raise FormatError(f"{path}: sidecar config does not match embedded fingerprint {fp}")
    cfg = ModelConfig.from_dict(sidecar["model"])
    return ModelParams.from_arrays(cfg, tensors), sidecar
