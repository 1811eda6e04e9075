"""Text artifact formats and flat key=value configuration files.

Every artifact starts with one header line::

    STATPOD <version> <kind> <dims> [key=value ...]

followed by whitespace-separated decimal values written with 17 significant
digits, which is enough to reproduce any binary64 number exactly.  Writes go
to a temporary file in the target directory that is then renamed.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import StatPodError

MAGIC = "STATPOD"
VERSION = 1
KINDS = ("matrix", "reduced-model", "tt-function", "report")
FLOAT_FMT = "%.16e"


class ArtifactFormatError(StatPodError, ValueError):
    """An artifact or config file could not be parsed."""


class ConfigError(ArtifactFormatError):
    pass


# ---------------------------------------------------------------------------
# low-level helpers


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
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


def format_values(values, per_line=8):
    flat = np.asarray(values, dtype=float).ravel()
    lines = []
    for start in range(0, flat.size, per_line):
        lines.append(" ".join(FLOAT_FMT % v for v in flat[start:start + per_line]))
    return "\n".join(lines)


def _meta_token(value):
    text = str(value)
    if not text or any(c.isspace() for c in text) or "=" in text:
        raise ArtifactFormatError(f"metadata value {text!r} must be a non-empty word without '='")
    return text


def make_header(kind, dims, meta=None):
    if kind not in KINDS:
        raise ArtifactFormatError(f"unknown artifact kind {kind!r}")
    parts = [MAGIC, str(VERSION), kind, ",".join(str(int(d)) for d in dims) or "-"]
    for key, value in (meta or {}).items():
        parts.append(f"{_meta_token(key)}={_meta_token(value)}")
    return " ".join(parts)


def parse_header(line):
    """``(kind, dims, meta)`` from a header line."""
    parts = line.split()
    if len(parts) < 4 or parts[0] != MAGIC:
        raise ArtifactFormatError("missing STATPOD header")
    try:
        version = int(parts[1])
    except ValueError:
        raise ArtifactFormatError(f"bad format version {parts[1]!r}") from None
    if version != VERSION:
        raise ArtifactFormatError(f"unsupported format version {version}")
    kind = parts[2]
    if kind not in KINDS:
        raise ArtifactFormatError(f"unknown artifact kind {kind!r}")
    try:
        dims = [] if parts[3] == "-" else [int(d) for d in parts[3].split(",")]
    except ValueError:
        raise ArtifactFormatError(f"bad dimension list {parts[3]!r}") from None
    meta = {}
    for tok in parts[4:]:
        key, sep, value = tok.partition("=")
        if not sep:
            raise ArtifactFormatError(f"bad metadata token {tok!r}")
        meta[key] = value
    return kind, dims, meta


def _read(path, kind):
    path = Path(path)
    text = path.read_text()
    head, _, body = text.partition("\n")
    got, dims, meta = parse_header(head)
    if got != kind:
        raise ArtifactFormatError(f"{path} holds a {got!r} artifact, expected {kind!r}")
    try:
        values = np.array(body.split(), dtype=float)
    except ValueError as exc:
        raise ArtifactFormatError(f"{path}: {exc}") from None
    return dims, meta, values


class _Reader:
    """Consumes a flat value array block by block."""

    def __init__(self, values):
        self.values = values
        self.pos = 0

    def take(self, shape):
        size = int(np.prod(shape))
        if self.pos + size > self.values.size:
            raise ArtifactFormatError("artifact body is shorter than its header declares")
        out = self.values[self.pos:self.pos + size].reshape(shape)
        self.pos += size
        return out

    def done(self):
        if self.pos != self.values.size:
            raise ArtifactFormatError("artifact body is longer than its header declares")


# ---------------------------------------------------------------------------
# matrices


def write_matrix(path, M, meta=None):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise ArtifactFormatError("only 2-D arrays can be written as matrices")
    atomic_write(path, make_header("matrix", M.shape, meta) + "\n" + format_values(M) + "\n")


def read_matrix(path):
    """Return ``(M, meta)``."""
    dims, meta, values = _read(path, "matrix")
    if len(dims) != 2:
        raise ArtifactFormatError("matrix header needs two dimensions")
    r = _Reader(values)
    M = r.take(dims)
    r.done()
    return M, meta


# ---------------------------------------------------------------------------
# reduced models


def write_reduced_model(path, model, R, box=None, meta=None):
    """Store basis, projected operators, state and control weights and the snapshot box.

    Blocks in order: basis ``(d, l)``, ``E``, ``A`` ``(l, l)``, ``F`` as
    ``(l, l * l)``, ``B`` ``(l, m)``, ``Q`` ``(l, l)``, ``R`` ``(m, m)``,
    singular values ``(s,)`` and the box ``(l, 2)`` (zeros when absent).
    Header dims are ``d, l, m, s``.
    """
    d, ell = model.basis.shape
    m = model.B.shape[1]
    s = np.asarray(model.singular_values, dtype=float).ravel()
    box = np.zeros((ell, 2)) if box is None else np.asarray(box, dtype=float).reshape(ell, 2)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    meta = dict(meta or {})
    meta.setdefault("alpha", repr(float(model.alpha)))
    if model.source:
        meta.setdefault("source", model.source)
    blocks = [model.basis, model.E, model.A, model.F.to_dense().reshape(ell, ell * ell),
              model.B, model.Q, R, s, box]
    body = "\n".join(format_values(b) for b in blocks if np.size(b))
    atomic_write(path, make_header("reduced-model", (d, ell, m, s.size), meta) + "\n" + body + "\n")


def read_reduced_model(path):
    """Return ``(model, R, box, meta)``."""
    from .qbsys import QuadraticTensor
    from .spod import ReducedModel

    dims, meta, values = _read(path, "reduced-model")
    if len(dims) != 4:
        raise ArtifactFormatError("reduced-model header needs d,l,m,s")
    d, ell, m, ns = dims
    r = _Reader(values)
    basis = r.take((d, ell))
    E, A = r.take((ell, ell)), r.take((ell, ell))
    F = QuadraticTensor.from_dense(r.take((ell, ell, ell)))
    B, Q, R = r.take((ell, m)), r.take((ell, ell)), r.take((m, m))
    s = r.take((ns,))
    box = r.take((ell, 2))
    r.done()
    model = ReducedModel(basis=basis, E=E, A=A, F=F, B=B, Q=Q, singular_values=s,
                         source=meta.get("source", ""), alpha=float(meta.get("alpha", 0.0)))
    return model, R, box, meta


# ---------------------------------------------------------------------------
# TT functions


def write_tt(path, tt, meta=None):
    """Header dims ``l``; body: ``n_k``, box ``a_k b_k``, rank chain, then the cores.

    Cores are flattened one after the other in (left rank, basis index,
    right rank) order.
    """
    meta = dict(meta or {})
    meta.setdefault("converged", int(bool(tt.converged)))
    if "validation_error" in tt.info:
        meta.setdefault("validation_error", repr(float(tt.info["validation_error"])))
    parts = [format_values(tt.basis_sizes), format_values(tt.domain), format_values(tt.ranks)]
    parts += [format_values(c) for c in tt.cores]
    atomic_write(path, make_header("tt-function", (tt.dim,), meta) + "\n" + "\n".join(parts) + "\n")


def read_tt(path):
    """Return ``(TTFunction, meta)``."""
    from .ftt import TTFunction

    dims, meta, values = _read(path, "tt-function")
    if len(dims) != 1:
        raise ArtifactFormatError("tt-function header needs one dimension")
    ell = dims[0]
    r = _Reader(values)
    ns = r.take((ell,)).astype(int)
    box = r.take((ell, 2))
    ranks = r.take((ell + 1,)).astype(int)
    cores = [r.take((ranks[k], ns[k], ranks[k + 1])) for k in range(ell)]
    r.done()
    converged = meta.get("converged", "1") != "0"
    info = {"ranks": list(ranks)}
    if "validation_error" in meta:
        info["validation_error"] = float(meta["validation_error"])
    return TTFunction(cores, box, converged=converged, info=info), meta


# ---------------------------------------------------------------------------
# reports


def report_text(rows, columns, meta=None):
    """Header line, then CSV with a column row; floats use 17 significant digits."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([FLOAT_FMT % v if isinstance(v, (float, np.floating)) else v
                         for v in (row.get(c, "") for c in columns)])
    return make_header("report", (len(rows), len(columns)), meta) + "\n" + buf.getvalue()


def write_report(path, rows, columns, meta=None):
    atomic_write(path, report_text(rows, columns, meta))


def read_report(path):
    """Return ``(rows, meta)``; numeric cells are converted to float."""
    text = Path(path).read_text()
    head, _, body = text.partition("\n")
    kind, dims, meta = parse_header(head)
    if kind != "report":
        raise ArtifactFormatError(f"{path} holds a {kind!r} artifact, expected 'report'")
    rows = []
    for rec in csv.DictReader(io.StringIO(body)):
        row = {}
        for key, value in rec.items():
            try:
                row[key] = float(value)
            except (TypeError, ValueError):
                row[key] = value
        rows.append(row)
    return rows, meta


# ---------------------------------------------------------------------------
# configs


def parse_config(text, source="<config>"):
    """Flat ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or any(c.isspace() for c in key):
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path):
    return parse_config(Path(path).read_text(), str(path))


class Config:
    """Typed access to a parsed config; unknown keys are reported by :meth:`check_used`."""

    def __init__(self, values, source="<config>"):
        self.values = dict(values)
        self.source = source
        self._used = set()

    def _raw(self, key, default):
        self._used.add(key)
        if key not in self.values:
            if default is _REQUIRED:
                raise ConfigError(f"{self.source}: missing key {key!r}")
            return None
        return self.values[key]

    def _typed(self, key, default, cast, what):
        raw = self._raw(key, default)
        if raw is None:
            return default
        try:
            return cast(raw)
        except ValueError:
            raise ConfigError(f"{self.source}: {key}={raw!r} is not {what}") from None

    def get_str(self, key, default=None):
        raw = self._raw(key, default)
        return default if raw is None else raw

    def get_int(self, key, default=None):
        return self._typed(key, default, int, "an integer")

    def get_float(self, key, default=None):
        return self._typed(key, default, float, "a number")

    def get_int_list(self, key, default=None):
        return self._typed(key, default,
                           lambda s: [int(v) for v in s.replace(",", " ").split()],
                           "a list of integers")

    def __contains__(self, key):
        return key in self.values

    def check_used(self):
        unknown = sorted(set(self.values) - self._used)
        if unknown:
            raise ConfigError(f"{self.source}: unknown keys {', '.join(unknown)}")


_REQUIRED = object()
REQUIRED = _REQUIRED
