"""Bit-exact binary file formats for sequences, datapoints, and checkpoints.

Every format is a one-line ASCII magic, one line of canonical JSON metadata
(sorted keys, no whitespace), then a little-endian binary payload. JSON
serializes float64 values through their shortest round-trip representation,
so write -> read -> write produces identical bytes. All writes go through a
temp file in the target directory followed by an atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import DataError
from .network import NetworkConfig, NetworkWeights
from .recover import NormMeta

MAGIC_SEQUENCE = b"VNDM1"
MAGIC_SPAMM = b"VNDMS1"
MAGIC_CHECKPOINT = b"VNDMW1"


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def atomic_write(path, data: bytes):
    """Write bytes to ``path`` via temp file + rename, so readers never see
    a partial file and reruns replace outputs atomically."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_blob(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def _read_lines(blob: bytes, magic: bytes, path):
    """Split (magic line, header line, payload); validate the magic."""
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise DataError(f"{path}: truncated header")
    if blob[:first] != magic:
        raise DataError(
            f"{path}: bad magic {blob[:first]!r}, expected {magic!r}")
    try:
        header = json.loads(blob[first + 1:second])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed header JSON ({e})") from None
    return header, blob[second + 1:]


# ---------------------------------------------------------------------------
# motion sequences


def sequence_bytes(seq) -> bytes:
    """Serialize a MotionSequence; frames as float64 (t, u, v, w, xyz)."""
    n_u, n_v, n_w = seq.dims
    norm = None
    if seq.norm_meta is not None:
        norm = {"center": list(seq.norm_meta.center),
                "max_abs": list(seq.norm_meta.max_abs)}
    header = {"dims": [n_u, n_v, n_w], "t_frames": seq.t_frames,
              "es_index": seq.es_index, "subject_id": seq.subject_id,
              "norm": norm}
    payload = np.ascontiguousarray(seq.frames, dtype="<f8").tobytes()
    return MAGIC_SEQUENCE + b"\n" + _canonical_json(header) + b"\n" + payload


def write_sequence(path, seq):
    atomic_write(path, sequence_bytes(seq))


def read_sequence(path):
    from .simulate import MotionSequence
    blob = _read_blob(path)
    header, payload = _read_lines(blob, MAGIC_SEQUENCE, path)
    n_u, n_v, n_w = header["dims"]
    t_frames = header["t_frames"]
    expected = t_frames * n_u * n_v * n_w * 3 * 8
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, "
                        f"expected {expected}")
    frames = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(
        t_frames, n_u, n_v, n_w, 3)
    norm = None
    if header.get("norm") is not None:
        norm = NormMeta(center=np.array(header["norm"]["center"]),
                        max_abs=np.array(header["norm"]["max_abs"]))
    return MotionSequence(frames=frames, es_index=header["es_index"],
                          subject_id=header.get("subject_id", ""),
                          norm_meta=norm)


# ---------------------------------------------------------------------------
# tracked datapoints


def spamm_bytes(spamm) -> bytes:
    """Serialize a SpammSequence.

    Per record: six little-endian int64 key fields, then per frame one
    presence byte and three float64 coordinates.
    """
    planes = [{"plane_id": p.plane_id, "view": p.view,
               "z_offset": p.z_offset, "azimuth": p.azimuth}
              for p in spamm.planes]
    header = {"t_frames": spamm.t_frames, "n_records": spamm.n_records,
              "planes": planes}
    parts = [MAGIC_SPAMM, b"\n", _canonical_json(header), b"\n"]
    keys = np.stack([spamm.plane_id, spamm.view, spamm.w, spamm.line_type,
                     spamm.line_index, spamm.ordinal], axis=1).astype("<i8")
    for r in range(spamm.n_records):
        parts.append(keys[r].tobytes())
        for t in range(spamm.t_frames):
            parts.append(b"\x01" if spamm.presence[r, t] else b"\x00")
            parts.append(spamm.pos[r, t].astype("<f8").tobytes())
    return b"".join(parts)


def write_spamm(path, spamm):
    atomic_write(path, spamm_bytes(spamm))


def read_spamm(path):
    from .simulate import ImagingPlane, SpammSequence
    blob = _read_blob(path)
    header, payload = _read_lines(blob, MAGIC_SPAMM, path)
    t_frames = header["t_frames"]
    n_records = header["n_records"]
    rec_size = 6 * 8 + t_frames * (1 + 24)
    if len(payload) != n_records * rec_size:
        raise DataError(f"{path}: payload is {len(payload)} bytes, "
                        f"expected {n_records * rec_size}")
    keys = np.zeros((n_records, 6), dtype=np.int64)
    presence = np.zeros((n_records, t_frames), dtype=bool)
    pos = np.zeros((n_records, t_frames, 3))
    off = 0
    for r in range(n_records):
        keys[r] = np.frombuffer(payload, dtype="<i8", count=6, offset=off)
        off += 48
        for t in range(t_frames):
            presence[r, t] = payload[off] != 0
            off += 1
            pos[r, t] = np.frombuffer(payload, dtype="<f8", count=3,
                                      offset=off)
            off += 24
    planes = [ImagingPlane(plane_id=p["plane_id"], view=p["view"],
                           z_offset=p["z_offset"], azimuth=p["azimuth"])
              for p in header["planes"]]
    return SpammSequence(plane_id=keys[:, 0], view=keys[:, 1], w=keys[:, 2],
                         line_type=keys[:, 3], line_index=keys[:, 4],
                         ordinal=keys[:, 5], presence=presence, pos=pos,
                         planes=planes)


# ---------------------------------------------------------------------------
# checkpoints


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode()
    a = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
    return head + a.tobytes()


def checkpoint_bytes(weights: NetworkWeights, adam_state: dict | None = None,
                     meta: dict | None = None) -> bytes:
    """Serialize weights (and optionally optimizer state) for exact resume.

    The tensor section stores each parameter under ``param/<name>``; Adam
    moment buffers and step counters go under ``adam.m/``, ``adam.v/`` and
    ``adam.t/`` so a restored run continues bit-identically.
    """
    cfg = weights.config
    entries = {f"param/{k}": v for k, v in weights.tensors.items()}
    if adam_state:
        for k, (m, v, t) in adam_state.items():
            entries[f"adam.m/{k}"] = m
            entries[f"adam.v/{k}"] = v
            entries[f"adam.t/{k}"] = np.array(float(t))
    names = sorted(entries)
    header = {
        "config": {
            "c_h": cfg.c_h, "c_z": cfg.c_z, "widths": list(cfg.widths),
            "down_ratio": cfg.down_ratio, "k_cross": cfg.k_cross,
            "k_self": cfg.k_self, "n_up_neighbors": cfg.n_up_neighbors,
            "head_hidden": cfg.head_hidden,
            "vel_hidden": list(cfg.vel_hidden), "flow_steps": cfg.flow_steps,
            "mode": cfg.mode, "cue_mode": cfg.cue_mode,
            "value_displacement": cfg.value_displacement,
            "value_gain": cfg.value_gain},
        "meta": meta or {},
        "n_tensors": len(names)}
    parts = [MAGIC_CHECKPOINT, b"\n", _canonical_json(header), b"\n"]
    parts += [_tensor_record(n, entries[n]) for n in names]
    return b"".join(parts)


def write_checkpoint(path, weights, adam_state=None, meta=None):
    atomic_write(path, checkpoint_bytes(weights, adam_state, meta))


def read_checkpoint(path):
    """Returns (weights, adam_state, meta)."""
    from .network import _group_of
    blob = _read_blob(path)
    header, payload = _read_lines(blob, MAGIC_CHECKPOINT, path)
    c = header["config"]
    cfg = NetworkConfig(
        c_h=c["c_h"], c_z=c["c_z"], widths=tuple(c["widths"]),
        down_ratio=c["down_ratio"], k_cross=c["k_cross"],
        k_self=c["k_self"], n_up_neighbors=c["n_up_neighbors"],
        head_hidden=c["head_hidden"], vel_hidden=tuple(c["vel_hidden"]),
        flow_steps=c["flow_steps"], mode=c["mode"], cue_mode=c["cue_mode"],
        value_displacement=c["value_displacement"],
        value_gain=c["value_gain"])
    entries = {}
    off = 0
    for _ in range(header["n_tensors"]):
        if off + 4 > len(payload):
            raise DataError(f"{path}: truncated tensor section")
        (nlen,) = struct.unpack_from("<I", payload, off)
        off += 4
        name = payload[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", payload, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", payload, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=off).astype(np.float64).reshape(shape)
        off += count * 8
        entries[name] = arr
    if off != len(payload):
        raise DataError(f"{path}: {len(payload) - off} trailing bytes")

    tensors, groups = {}, {}
    adam: dict = {}
    for name, arr in entries.items():
        kind, _, base = name.partition("/")
        if kind == "param":
            tensors[base] = arr
            groups[base] = _group_of(base)
        elif kind in ("adam.m", "adam.v", "adam.t"):
            m, v, t = adam.get(base, (None, None, 0))
            if kind == "adam.m":
                adam[base] = (arr, v, t)
            elif kind == "adam.v":
                adam[base] = (m, arr, t)
            else:
                adam[base] = (m, v, int(arr.reshape(-1)[0]))
        else:
            raise DataError(f"{path}: unknown tensor section '{name}'")
    weights = NetworkWeights(tensors=tensors, groups=groups, config=cfg)
    return weights, adam, header.get("meta", {})


# ---------------------------------------------------------------------------
# mesh export


def mesh_obj_text(mesh) -> str:
    """Wavefront OBJ text of a quad mesh (1-based face indices)."""
    lines = [f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}" for p in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1} {d + 1}"
              for a, b, c, d in mesh.faces]
    return "\n".join(lines) + "\n"


def write_mesh_obj(path, mesh):
    atomic_write(path, mesh_obj_text(mesh).encode())
