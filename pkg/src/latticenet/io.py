"""Point-cloud files: whitespace-separated ``xyz`` text and a PLY vertex subset.

Text files hold one point per line with columns in the fixed order
``x y z [r g b] [nx ny nz] [label]``.  Which optional groups are present is
inferred from the column count; 6 and 7 columns are ambiguous and need either
an explicit ``columns`` argument or a ``# columns: ...`` header comment.
Colours in text files are 0-255 and are normalised to [0, 1].
"""
from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .lattice import PointCloud

GROUPS = {"xyz": ("x", "y", "z"), "rgb": ("r", "g", "b"), "normal": ("nx", "ny", "nz"), "label": ("label",)}
GROUP_ORDER = ("xyz", "rgb", "normal", "label")
_BY_COUNT = {3: ("xyz",), 4: ("xyz", "label"), 9: ("xyz", "rgb", "normal"), 10: ("xyz", "rgb", "normal", "label")}
_AMBIGUOUS = {6: "xyz+rgb or xyz+normal", 7: "xyz+rgb+label or xyz+normal+label"}


class CloudFormatError(ValueError):
    """A point-cloud file is malformed.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"line {line}: " if path is None else f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


def _normalize_columns(columns) -> tuple[str, ...]:
    if isinstance(columns, str):
        tokens = [t for t in re.split(r"[\s,+]+", columns.strip()) if t]
    else:
        tokens = list(columns)
    groups = []
    for tok in tokens:
        tok = {"normals": "normal", "labels": "label", "color": "rgb", "colour": "rgb"}.get(tok, tok)
        if tok not in GROUPS:
            flat = {name: g for g, names in GROUPS.items() for name in names}
            if tok in flat:
                tok = flat[tok]
            else:
                raise CloudFormatError(f"unknown column group {tok!r}; expected a subset of {GROUP_ORDER}")
        if tok not in groups:
            groups.append(tok)
    if "xyz" not in groups:
        groups.insert(0, "xyz")
    return tuple(g for g in GROUP_ORDER if g in groups)


def _width(groups: Sequence[str]) -> int:
    return sum(len(GROUPS[g]) for g in groups)


def _assemble(data: np.ndarray, groups: Sequence[str], rgb_scale: float, path=None) -> PointCloud:
    col = 0
    parts = {}
    for g in groups:
        w = len(GROUPS[g])
        parts[g] = data[:, col : col + w]
        col += w
    feats, names = [], []
    if "rgb" in parts:
        feats.append(parts["rgb"] / rgb_scale)
        names += GROUPS["rgb"]
    if "normal" in parts:
        feats.append(parts["normal"])
        names += GROUPS["normal"]
    labels = None
    if "label" in parts:
        lab = parts["label"][:, 0]
        if not np.all(lab == np.round(lab)):
            raise CloudFormatError("label column contains non-integer values", path=path)
        if np.any(np.abs(lab) > 2**31):
            raise CloudFormatError("label value out of range", path=path)
        labels = lab.astype(np.int64)
    features = np.concatenate(feats, axis=1) if feats else None
    return PointCloud(parts["xyz"], features=features, labels=labels, channels=tuple(names))


def parse_xyz_text(text: str, columns=None, path=None) -> PointCloud:
    groups = _normalize_columns(columns) if columns is not None else None
    rows: list[list[float]] = []
    width = None
    first_line = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*columns\s*:\s*(.*)$", line)
            if m and groups is None and not rows:
                try:
                    groups = _normalize_columns(m.group(1))
                except CloudFormatError as exc:
                    raise CloudFormatError(str(exc), line=lineno, path=path) from None
            continue
        tokens = line.split()
        try:
            values = [float(t) for t in tokens]
        except ValueError:
            raise CloudFormatError(f"cannot parse numbers from {line[:40]!r}", line=lineno, path=path) from None
        if not all(np.isfinite(values)):
            raise CloudFormatError("non-finite value", line=lineno, path=path)
        if width is None:
            width, first_line = len(values), lineno
        elif len(values) != width:
            raise CloudFormatError(
                f"expected {width} columns (as on line {first_line}), found {len(values)}", line=lineno, path=path
            )
        rows.append(values)
    if not rows:
        raise CloudFormatError("file contains no points", path=path)
    if groups is None:
        if width in _AMBIGUOUS:
            raise CloudFormatError(
                f"{width} columns could be {_AMBIGUOUS[width]}; pass columns explicitly", line=first_line, path=path
            )
        if width not in _BY_COUNT:
            raise CloudFormatError(f"unsupported column count {width}", line=first_line, path=path)
        groups = _BY_COUNT[width]
    elif _width(groups) != width:
        raise CloudFormatError(
            f"columns {'+'.join(groups)} need {_width(groups)} values per line, found {width}",
            line=first_line,
            path=path,
        )
    return _assemble(np.asarray(rows, dtype=np.float64), groups, 255.0, path)


# --------------------------------------------------------------------------- ply

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_PLY_NAMES = {
    "x": "x", "y": "y", "z": "z",
    "red": "r", "green": "g", "blue": "b", "r": "r", "g": "g", "b": "b",
    "nx": "nx", "ny": "ny", "nz": "nz",
    "label": "label", "class": "label",
}


def parse_ply_bytes(data: bytes, path=None) -> PointCloud:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise CloudFormatError("not a ply file (missing 'ply' magic or 'end_header')", line=1, path=path)
    nl = data.find(b"\n", end)
    if nl < 0:
        raise CloudFormatError("header not terminated by a newline", path=path)
    try:
        header = data[:nl].decode("ascii")
    except UnicodeDecodeError:
        raise CloudFormatError("ply header is not ascii", path=path) from None
    body = data[nl + 1 :]

    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    lines = header.splitlines()
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        key = tok[0]
        if lineno == 1:
            if line.strip() != "ply":
                raise CloudFormatError("first line must be 'ply'", line=1, path=path)
            continue
        if key == "format":
            if len(tok) != 3 or tok[1] not in ("ascii", "binary_little_endian", "binary_big_endian"):
                raise CloudFormatError(f"unsupported format line {line.strip()!r}", line=lineno, path=path)
            fmt = tok[1]
        elif key == "element":
            if len(tok) != 3:
                raise CloudFormatError("malformed element line", line=lineno, path=path)
            if tok[1] != "vertex" or count is not None:
                raise CloudFormatError(f"unsupported element {tok[1]!r}; only one vertex element is read", line=lineno, path=path)
            try:
                count = int(tok[2])
            except ValueError:
                raise CloudFormatError(f"bad vertex count {tok[2]!r}", line=lineno, path=path) from None
            if count < 0:
                raise CloudFormatError("negative vertex count", line=lineno, path=path)
            in_vertex = True
        elif key == "property":
            if not in_vertex:
                raise CloudFormatError("property before any element", line=lineno, path=path)
            if len(tok) >= 2 and tok[1] == "list":
                raise CloudFormatError("list properties are not supported", line=lineno, path=path)
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise CloudFormatError(f"malformed property line {line.strip()!r}", line=lineno, path=path)
            if tok[2] not in _PLY_NAMES:
                raise CloudFormatError(f"unknown ply property {tok[2]!r}", line=lineno, path=path)
            props.append((tok[2], tok[1]))
        elif key == "end_header":
            break
        else:
            raise CloudFormatError(f"unknown header keyword {key!r}", line=lineno, path=path)
    if fmt is None:
        raise CloudFormatError("missing format line", path=path)
    if count is None:
        raise CloudFormatError("missing vertex element", path=path)
    names = [_PLY_NAMES[p] for p, _ in props]
    if len(set(names)) != len(names):
        raise CloudFormatError("duplicate vertex property", path=path)
    for req in ("x", "y", "z"):
        if req not in names:
            raise CloudFormatError(f"missing vertex property {req!r}", path=path)
    if count == 0:
        raise CloudFormatError("file contains no points", path=path)

    if fmt == "ascii":
        try:
            text = body.decode("ascii")
        except UnicodeDecodeError:
            raise CloudFormatError("ascii ply body contains non-ascii bytes", path=path) from None
        body_lines = [ln for ln in text.splitlines() if ln.strip()]
        if len(body_lines) < count:
            raise CloudFormatError(f"header declares {count} vertices, body has {len(body_lines)}", path=path)
        if len(body_lines) > count:
            raise CloudFormatError(f"body has {len(body_lines)} lines, header declares {count} vertices", path=path)
        table = np.empty((count, len(props)))
        first = len(lines) + 1
        for i, ln in enumerate(body_lines):
            tok = ln.split()
            if len(tok) != len(props):
                raise CloudFormatError(f"expected {len(props)} values, found {len(tok)}", line=first + i, path=path)
            try:
                table[i] = [float(t) for t in tok]
            except ValueError:
                raise CloudFormatError("cannot parse number", line=first + i, path=path) from None
        cols = {n: table[:, j] for j, n in enumerate(names)}
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        dtype = np.dtype([(n, order + _PLY_TYPES[t]) for n, (_, t) in zip(names, props)])
        expected = count * dtype.itemsize
        if len(body) != expected:
            raise CloudFormatError(
                f"binary body has {len(body)} bytes, header implies {expected} for {count} vertices", path=path
            )
        rec = np.frombuffer(body, dtype=dtype, count=count)
        cols = {n: rec[n].astype(np.float64) for n in names}

    types = dict(zip(names, (t for _, t in props)))
    stacked = np.column_stack([cols[n] for n in ("x", "y", "z")])
    if not np.all(np.isfinite(stacked)):
        raise CloudFormatError("non-finite coordinates", path=path)
    groups = ["xyz"]
    blocks = [stacked]
    rgb_scale = 1.0
    for g in ("rgb", "normal", "label"):
        members = GROUPS[g]
        present = [m for m in members if m in cols]
        if not present:
            continue
        if len(present) != len(members):
            raise CloudFormatError(f"incomplete property group {g}: has {present}", path=path)
        block = np.column_stack([cols[m] for m in members])
        if not np.all(np.isfinite(block)):
            raise CloudFormatError(f"non-finite {g} values", path=path)
        if g == "rgb":
            kind = np.dtype(_PLY_TYPES[types["r"]])
            rgb_scale = float(np.iinfo(kind).max) if kind.kind in "iu" else 1.0
        groups.append(g)
        blocks.append(block)
    return _assemble(np.concatenate(blocks, axis=1), groups, rgb_scale, path)


# --------------------------------------------------------------------------- entry points


def detect_format(path) -> str:
    return "ply" if str(path).lower().endswith(".ply") else "xyz"


def parse_cloud_bytes(data: bytes, fmt: str = "xyz", columns=None, path=None) -> PointCloud:
    """Parse an in-memory cloud; every failure surfaces as :class:`CloudFormatError`."""
    try:
        if fmt == "ply":
            return parse_ply_bytes(data, path=path)
        if fmt != "xyz":
            raise CloudFormatError(f"unknown cloud format {fmt!r}", path=path)
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CloudFormatError(f"not utf-8 text (byte {exc.start})", path=path) from None
        if "\x00" in text:
            raise CloudFormatError("text contains NUL bytes", path=path)
        return parse_xyz_text(text, columns=columns, path=path)
    except CloudFormatError:
        raise
    except ValueError as exc:
        raise CloudFormatError(str(exc), path=path) from None


def parse_cloud(path, fmt: str | None = None, columns=None, sigma=1.0) -> PointCloud:
    path = Path(path)
    data = path.read_bytes()
    cloud = parse_cloud_bytes(data, fmt or detect_format(path), columns=columns, path=path)
    return cloud.replace(sigma=sigma) if np.any(np.asarray(sigma) != 1.0) else cloud


def _fmt_row(values: Iterable[float]) -> str:
    return " ".join("%.17g" % v for v in values)


def write_cloud(path, cloud: PointCloud, fmt: str | None = None, binary: bool = True) -> None:
    """Write ``cloud`` as xyz text (columns header included) or PLY."""
    fmt = fmt or detect_format(path)
    names = list(cloud.channels)
    has_rgb = all(c in names for c in GROUPS["rgb"])
    has_nrm = all(c in names for c in GROUPS["normal"])
    cols = [cloud.positions]
    groups = ["xyz"]
    if has_rgb:
        cols.append(cloud.features[:, [names.index(c) for c in GROUPS["rgb"]]])
        groups.append("rgb")
    if has_nrm:
        cols.append(cloud.features[:, [names.index(c) for c in GROUPS["normal"]]])
        groups.append("normal")
    if fmt == "ply":
        _write_ply(path, cloud, groups, cols, binary)
        return
    if has_rgb:
        cols[1] = cols[1] * 255.0
    if cloud.labels is not None:
        cols.append(cloud.labels[:, None].astype(np.float64))
        groups.append("label")
    table = np.concatenate(cols, axis=1)
    with open(path, "w") as fh:
        fh.write(f"# columns: {' '.join(groups)}\n")
        for row in table:
            fh.write(_fmt_row(row) + "\n")


def _write_ply(path, cloud, groups, cols, binary):
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    fields = [cols[0]]
    if "rgb" in groups:
        props += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        fields.append(np.clip(np.round(cols[1] * 255), 0, 255))
    if "normal" in groups:
        props += [("nx", "f8"), ("ny", "f8"), ("nz", "f8")]
        fields.append(cols[groups.index("normal")])
    if cloud.labels is not None:
        props.append(("label", "i4"))
        fields.append(cloud.labels[:, None])
    table = np.concatenate([np.asarray(f, dtype=np.float64) for f in fields], axis=1)
    ply_type = {"f8": "double", "u1": "uchar", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {cloud.num_points}"]
    header += [f"property {ply_type[t]} {n}" for n, t in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(cloud.num_points, dtype=[(n, "<" + t) for n, t in props])
            for j, (n, _) in enumerate(props):
                rec[n] = table[:, j]
            fh.write(rec.tobytes())
        else:
            for row, in zip(table):
                vals = [str(int(v)) if t != "f8" else "%.17g" % v for v, (_, t) in zip(row, props)]
                fh.write((" ".join(vals) + "\n").encode("ascii"))


def write_labels(path, cloud: PointCloud, predictions) -> None:
    """One ``x y z pred`` line per point, in input order."""
    pred = np.asarray(predictions)
    if pred.shape != (cloud.num_points,):
        raise ValueError(f"expected {cloud.num_points} predictions, got shape {pred.shape}")
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        for p, lab in zip(cloud.positions, pred.astype(np.int64)):
            fh.write(f"{_fmt_row(p)} {lab}\n")
    os.replace(tmp, path)


def read_labels(path) -> np.ndarray:
    cloud = parse_cloud(path, fmt="xyz", columns="xyz,label")
    return cloud.labels
