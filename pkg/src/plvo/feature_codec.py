"""File formats: feature files, PGM masks, trajectory/match/APE/loss CSVs, weights.

Feature file (``plvo-features/1``) is line-delimited JSON. The first line is a
header object::

    {"format": "plvo-features/1", "frame_id": int, "descriptor_dim": D,
     "width": int, "height": int,
     "counts": {"ppoints": n, "lpoints": q, "lines": m},
     "optional": [names of per-feature arrays present]}

followed by ``n`` P-point records, ``q`` L-point records, then ``m`` line
records, in that order::

    {"kind": "ppoint", "u": .., "v": .., "c": .., "d": [D floats],
     "depth": .., "disparity": .., "gt": ..}           # optional keys per header
    {"kind": "lpoint", ...same keys...}
    {"kind": "line", "id": int, "a": [u, v], "b": [u, v], "lpoints": [int, ...], "gt": ..}

Floats are written with ``repr`` so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core_types import FrameFeatures, Keypoint, LineSegment, SE3Pose
from .encoder_gnn import EncoderConfig, EncoderWeights
from .errors import DimensionMismatch, FormatError, VersionMismatch

FEATURE_FORMAT = "plvo-features/1"
WEIGHTS_FORMAT = "plvo-weights/1"

_OPTIONAL = {
    "ppoint_depth": ("ppoint", "depth"),
    "ppoint_disparity": ("ppoint", "disparity"),
    "gt_point_ids": ("ppoint", "gt"),
    "lpoint_depth": ("lpoint", "depth"),
    "lpoint_disparity": ("lpoint", "disparity"),
    "gt_lpoint_ids": ("lpoint", "gt"),
    "gt_line_ids": ("line", "gt"),
}


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


# -- feature files ----------------------------------------------------------------

def dumps_features(frame: FrameFeatures) -> str:
    present = [name for name in _OPTIONAL if getattr(frame, name) is not None]
    header = {
        "format": FEATURE_FORMAT,
        "frame_id": frame.frame_id,
        "descriptor_dim": frame.descriptor_dim,
        "width": frame.width,
        "height": frame.height,
        "counts": {"ppoints": len(frame.ppoints), "lpoints": len(frame.lpoints),
                   "lines": len(frame.lines)},
        "optional": present,
    }
    out = [_dumps(header)]

    def extras(kind, k):
        rec = {}
        for name in present:
            owner, key = _OPTIONAL[name]
            if owner == kind:
                rec[key] = getattr(frame, name)[k]
        return rec

    for kind, kps in (("ppoint", frame.ppoints), ("lpoint", frame.lpoints)):
        for k, kp in enumerate(kps):
            rec = {"kind": kind, "u": kp.u, "v": kp.v, "c": kp.c,
                   "d": [float(x) for x in kp.descriptor]}
            rec.update(extras(kind, k))
            out.append(_dumps(rec))
    for k, line in enumerate(frame.lines):
        rec = {"kind": "line", "id": line.id, "a": [float(x) for x in line.a],
               "b": [float(x) for x in line.b], "lpoints": list(line.lpoint_indices)}
        rec.update(extras("line", k))
        out.append(_dumps(rec))
    return "\n".join(out) + "\n"


def save_features(frame: FrameFeatures, path) -> None:
    atomic_write_text(path, dumps_features(frame))


def loads_features(text: str) -> FrameFeatures:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise FormatError("missing header record", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"header is not valid JSON: {exc.msg}", line=1) from None
    fmt = header.get("format")
    if fmt != FEATURE_FORMAT:
        raise VersionMismatch(f"unsupported feature format {fmt!r}, expected {FEATURE_FORMAT!r}", line=1)
    try:
        D = int(header["descriptor_dim"])
        counts = header["counts"]
        sections = [("ppoint", int(counts["ppoints"])), ("lpoint", int(counts["lpoints"])),
                    ("line", int(counts["lines"]))]
        present = list(header.get("optional", []))
        frame_id, width, height = int(header["frame_id"]), int(header["width"]), int(header["height"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"header is missing or has a malformed field: {exc}", line=1) from None
    unknown = set(present) - set(_OPTIONAL)
    if unknown:
        raise FormatError(f"unknown optional fields {sorted(unknown)}", line=1)

    records = {"ppoint": [], "lpoint": [], "line": []}
    pos = 1
    for kind, n in sections:
        for k in range(n):
            if pos >= len(lines) or not lines[pos].strip():
                raise FormatError(f"truncated file: section '{kind}s' expects {n} records, "
                                  f"found {k}", line=pos + 1)
            try:
                rec = json.loads(lines[pos])
            except json.JSONDecodeError as exc:
                raise FormatError(f"malformed record: {exc.msg}", line=pos + 1) from None
            if rec.get("kind") != kind:
                raise FormatError(f"expected a '{kind}' record, got {rec.get('kind')!r}", line=pos + 1)
            records[kind].append((pos + 1, rec))
            pos += 1
    if any(l.strip() for l in lines[pos:]):
        raise FormatError("unexpected records after the declared counts", line=pos + 1)

    def keypoints(kind):
        out = []
        for lineno, rec in records[kind]:
            try:
                d = rec["d"]
                if len(d) != D:
                    raise FormatError(f"descriptor has {len(d)} entries, header says {D}", line=lineno)
                out.append(Keypoint(rec["u"], rec["v"], rec["c"], np.array(d, dtype=float)))
            except (KeyError, TypeError, ValueError) as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"bad {kind} record: {exc}", line=lineno) from None
        return out

    ppoints = keypoints("ppoint")
    lpoints = keypoints("lpoint")
    segs = []
    for lineno, rec in records["line"]:
        try:
            segs.append(LineSegment(rec["id"], rec["a"], rec["b"], tuple(rec["lpoints"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad line record: {exc}", line=lineno) from None
    optional = {}
    for name in present:
        owner, key = _OPTIONAL[name]
        try:
            optional[name] = [rec[key] for _, rec in records[owner]]
        except KeyError:
            raise FormatError(f"field '{key}' declared but missing from a {owner} record") from None
    try:
        return FrameFeatures(frame_id, width, height, D, ppoints, segs, lpoints, **optional)
    except ValueError as exc:
        raise FormatError(f"inconsistent frame: {exc}") from None


def load_features(path) -> FrameFeatures:
    with open(path, "r") as fh:
        return loads_features(fh.read())


# -- masks --------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskImage:
    """Binary keep-mask; ``keep[v, u]`` is True for static pixels."""
    keep: np.ndarray

    @property
    def width(self) -> int:
        return self.keep.shape[1]

    @property
    def height(self) -> int:
        return self.keep.shape[0]

    @classmethod
    def full(cls, width, height, value=True):
        return cls(np.full((height, width), bool(value)))


def write_pgm(mask: MaskImage, path) -> None:
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + (mask.keep.astype(np.uint8) * 255).tobytes())


def read_pgm(path) -> MaskImage:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError("16-bit PGM masks are not supported")
    pixels = data[pos + 1:pos + 1 + width * height]
    if len(pixels) != width * height:
        raise FormatError(f"PGM body holds {len(pixels)} bytes, expected {width * height}")
    return MaskImage(np.frombuffer(pixels, dtype=np.uint8).reshape(height, width) > 0)


def _mask_keep(mask: MaskImage, positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(pos) == 0:
        return np.zeros(0, dtype=bool)
    cols = np.floor(pos[:, 0]).astype(int)
    rows = np.floor(pos[:, 1]).astype(int)
    inside = (cols >= 0) & (cols < mask.width) & (rows >= 0) & (rows < mask.height)
    keep = np.zeros(len(pos), dtype=bool)
    keep[inside] = mask.keep[rows[inside], cols[inside]]
    return keep


def apply_mask(frame: FrameFeatures, mask: MaskImage) -> FrameFeatures:
    """Drop features on masked-out pixels; lines need two surviving L-points."""
    if (mask.width, mask.height) != (frame.width, frame.height):
        raise DimensionMismatch(f"mask is {mask.width}x{mask.height}, "
                                f"frame is {frame.width}x{frame.height}")
    keep_p = np.flatnonzero(_mask_keep(mask, frame.ppoint_positions))
    keep_q = _mask_keep(mask, frame.lpoint_positions)
    new_index = np.cumsum(keep_q) - 1

    def pick(values, idx):
        return None if values is None else [values[i] for i in idx]

    lines, line_keep = [], []
    for k, line in enumerate(frame.lines):
        survivors = [int(new_index[q]) for q in line.lpoint_indices if keep_q[q]]
        if len(survivors) >= 2:
            lines.append(LineSegment(line.id, line.a, line.b, tuple(survivors)))
            line_keep.append(k)
    idx_q = np.flatnonzero(keep_q)
    return FrameFeatures(
        frame.frame_id, frame.width, frame.height, frame.descriptor_dim,
        [frame.ppoints[i] for i in keep_p], lines, [frame.lpoints[i] for i in idx_q],
        ppoint_depth=pick(frame.ppoint_depth, keep_p), lpoint_depth=pick(frame.lpoint_depth, idx_q),
        ppoint_disparity=pick(frame.ppoint_disparity, keep_p),
        lpoint_disparity=pick(frame.lpoint_disparity, idx_q),
        gt_point_ids=pick(frame.gt_point_ids, keep_p), gt_lpoint_ids=pick(frame.gt_lpoint_ids, idx_q),
        gt_line_ids=pick(frame.gt_line_ids, line_keep))


# -- CSV formats -------------------------------------------------------------------

TRAJECTORY_HEADER = ["frame_id", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]
MATCH_HEADER = ["frame_a", "frame_b", "kind", "idx_a", "idx_b", "score"]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


def _read_csv(path, header):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if first != header:
            raise FormatError(f"{path}: expected header {','.join(header)}", line=1)
        rows = []
        for n, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: expected {len(header)} fields", line=n)
            rows.append(row)
        return rows


def pose_to_row(frame_id, pose: SE3Pose):
    q = Rotation.from_matrix(pose.rotation).as_quat()
    return [int(frame_id), *map(float, pose.translation), *map(float, q)]


def save_trajectory(traj, path) -> None:
    """``traj`` is a sequence of ``(frame_id, SE3Pose)``."""
    atomic_write_text(path, _csv_text(TRAJECTORY_HEADER, [pose_to_row(f, p) for f, p in traj]))


def load_trajectory(path) -> list:
    out = []
    for n, row in enumerate(_read_csv(path, TRAJECTORY_HEADER), start=2):
        try:
            vals = [float(x) for x in row[1:]]
            R = Rotation.from_quat(vals[3:]).as_matrix()
            out.append((int(row[0]), SE3Pose(R, vals[:3])))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}", line=n) from None
    return out


def save_matches(rows, path) -> None:
    """Rows of ``(frame_a, frame_b, kind, idx_a, idx_b, score)``."""
    atomic_write_text(path, _csv_text(MATCH_HEADER, rows))


def load_matches(path) -> list:
    out = []
    for n, row in enumerate(_read_csv(path, MATCH_HEADER), start=2):
        if row[2] not in ("point", "line"):
            raise FormatError(f"{path}: kind must be point or line", line=n)
        out.append((int(row[0]), int(row[1]), row[2], int(row[3]), int(row[4]), float(row[5])))
    return out


def save_series(path, header, rows) -> None:
    atomic_write_text(path, _csv_text(header, rows))


def load_series(path, header) -> list:
    return [[float(x) for x in row] for row in _read_csv(path, header)]


# -- weight checkpoints ------------------------------------------------------------

def dumps_weights(networks: dict) -> str:
    """Serialise named :class:`EncoderWeights` (e.g. ``{"point": w, "line": w}``)."""
    header = {"format": WEIGHTS_FORMAT,
              "networks": {name: {"descriptor_dim": w.config.descriptor_dim,
                                  "layers": w.config.layers, "hidden": list(w.config.hidden),
                                  "delta": w.config.delta, "dustbin_init": w.config.dustbin_init}
                           for name, w in networks.items()}}
    out = [_dumps(header)]
    for name, w in networks.items():
        for key in sorted(w.params):
            arr = np.asarray(w.params[key], dtype=float)
            out.append(_dumps({"name": f"{name}/{key}", "shape": list(arr.shape),
                               "data": [float(x) for x in arr.ravel()]}))
    return "\n".join(out) + "\n"


def save_weights(networks: dict, path) -> None:
    atomic_write_text(path, dumps_weights(networks))


def load_weights(path) -> dict:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty weights file")
    header = json.loads(lines[0])
    if header.get("format") != WEIGHTS_FORMAT:
        raise VersionMismatch(f"unsupported weights format {header.get('format')!r}", line=1)
    nets = {name: EncoderWeights(EncoderConfig(**cfg), {})
            for name, cfg in header["networks"].items()}
    for n, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = json.loads(text)
        net, key = rec["name"].split("/", 1)
        if net not in nets:
            raise FormatError(f"tensor for undeclared network {net!r}", line=n)
        arr = np.array(rec["data"], dtype=float)
        if arr.size != int(np.prod(rec["shape"])):
            raise FormatError(f"tensor {rec['name']} has {arr.size} values for shape {rec['shape']}",
                              line=n)
        nets[net].params[key] = arr.reshape(rec["shape"])
    return nets
