"""CSV, config-file and binary model serialization.

Model file layout (all integers and floats little-endian)::

    magic            8 bytes   b"RATIOCOP"
    version          uint32    1
    kind             uint8     1 = MLP, 2 = polynomial
    input_dim        uint32
    -- MLP spec --
    n_hidden         uint32
    widths           uint32 x n_hidden
    leak             float64
    residual         uint8
    -- polynomial spec --
    degree           uint32
    interactions     uint8
    -- parameters --
    n_weights        uint64
    weights          float64 x n_weights   (model theta order, log_z excluded)
    log_z            float64
    log_norm         float64
    has_guide        uint8
    guide            float64 x d*d         (row-major, only if has_guide)
    has_marginals    uint8
    n_samples        uint64                (only if has_marginals)
    sorted values    float64 x n*d         (column by column)
"""

import csv
import io
import struct

import numpy as np

from .classifier import MlpSpec, MLPRatio, PolyLogisticSpec, PolyRatio
from .exceptions import ModelFormatError, ValidationError
from .gaussian import CorrelationMatrix
from .marginals import EmpiricalMarginals

__all__ = [
    "read_csv",
    "write_csv",
    "write_metrics",
    "format_float",
    "read_config",
    "save_model",
    "load_model",
    "dump_model",
    "parse_model",
    "MAGIC",
    "FORMAT_VERSION",
]

MAGIC = b"RATIOCOP"
FORMAT_VERSION = 1
_KIND_MLP = 1
_KIND_POLY = 2


def format_float(x):
    """17 significant digits, enough to round-trip any double."""
    return format(float(x), ".17g")


def _parse_row(row, lineno):
    values = []
    for field in row:
        text = field.strip()
        if not text:
            raise ValidationError(f"line {lineno}: missing field")
        try:
            values.append(float(text))
        except ValueError:
            raise ValidationError(f"line {lineno}: {text!r} is not a number") from None
    return values


def read_csv(source):
    """Read a numeric CSV with an optional header row.

    Parameters
    ----------
    source : str, path or file object

    Returns
    -------
    values : ndarray of shape (n_rows, n_columns)
    column_names : list of str
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, newline="") as fh:
            text = fh.read()
    rows = [(i + 1, r) for i, r in enumerate(csv.reader(io.StringIO(text))) if r and any(f.strip() for f in r)]
    if not rows:
        raise ValidationError("CSV file has no rows")
    first_line, first = rows[0]
    try:
        _parse_row(first, first_line)
        names = [f"x{j + 1}" for j in range(len(first))]
    except ValidationError:
        names = [f.strip() for f in first]
        rows = rows[1:]
    if not rows:
        raise ValidationError("CSV file has a header but no data")
    width = len(names)
    out = np.empty((len(rows), width))
    for k, (lineno, row) in enumerate(rows):
        if len(row) != width:
            raise ValidationError(f"line {lineno}: expected {width} fields, got {len(row)}")
        out[k] = _parse_row(row, lineno)
    return out, names


def write_csv(target, values, column_names=None):
    """Write a numeric matrix as CSV with a header row."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if column_names is None:
        column_names = [f"x{j + 1}" for j in range(values.shape[1])]
    lines = [",".join(column_names)]
    lines += [",".join(format_float(v) for v in row) for row in values]
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
    else:
        with open(target, "w", newline="") as fh:
            fh.write(text)


def write_metrics(target, rows):
    """Write ``metric,value`` rows."""
    lines = ["metric,value"]
    for key, value in rows:
        if isinstance(value, (int, np.integer)):
            lines.append(f"{key},{int(value)}")
        else:
            lines.append(f"{key},{format_float(value)}")
    target.write("\n".join(lines) + "\n")


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    config = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ValidationError(f"{path}:{lineno}: empty key")
            config[key.replace("-", "_")] = value
    return config


def dump_model(copula):
    """Serialize a fitted :class:`~ratiocopula.estimator.RatioCopula` to bytes."""
    model = copula.model_
    spec = model.spec
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", FORMAT_VERSION)
    if isinstance(model, MLPRatio):
        buf += struct.pack("<BI", _KIND_MLP, spec.input_dim)
        buf += struct.pack("<I", len(spec.hidden_widths))
        buf += struct.pack(f"<{len(spec.hidden_widths)}I", *spec.hidden_widths)
        buf += struct.pack("<dB", spec.leak, int(spec.residual))
    elif isinstance(model, PolyRatio):
        buf += struct.pack("<BI", _KIND_POLY, spec.input_dim)
        buf += struct.pack("<IB", spec.degree, int(spec.include_interactions))
    else:
        raise ValidationError(f"cannot serialize model of type {type(model).__name__}")
    weights = model.theta[:-1]
    buf += struct.pack("<Q", len(weights))
    buf += weights.astype("<f8").tobytes()
    buf += struct.pack("<dd", model.log_z, model.log_norm)
    guide = copula.guide_
    buf += struct.pack("<B", guide is not None)
    if guide is not None:
        buf += np.ascontiguousarray(guide.sigma).astype("<f8").tobytes()
    marginals = getattr(copula, "marginals_", None)
    buf += struct.pack("<B", marginals is not None)
    if marginals is not None:
        buf += struct.pack("<Q", marginals.n_samples_)
        buf += np.asfortranarray(marginals.sorted_values_).T.astype("<f8").tobytes()
    return bytes(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise ModelFormatError("model file is truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def floats(self, n):
        size = 8 * n
        if self.pos + size > len(self.data):
            raise ModelFormatError("model file is truncated")
        out = np.frombuffer(self.data, dtype="<f8", count=n, offset=self.pos).astype(np.float64)
        self.pos += size
        return out


def parse_model(data):
    """Inverse of :func:`dump_model`."""
    from .estimator import RatioCopula

    if data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError("not a ratio copula model file (bad magic)")
    r = _Reader(data)
    r.pos = len(MAGIC)
    (version,) = r.take("<I")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    kind, d = r.take("<BI")
    try:
        if kind == _KIND_MLP:
            (n_hidden,) = r.take("<I")
            if n_hidden > 10_000:
                raise ModelFormatError("implausible number of hidden layers")
            widths = r.take(f"<{n_hidden}I")
            leak, residual = r.take("<dB")
            spec = MlpSpec(d, widths, leak=leak, residual=bool(residual))
            cls = MLPRatio
        elif kind == _KIND_POLY:
            degree, inter = r.take("<IB")
            spec = PolyLogisticSpec(d, degree, bool(inter))
            cls = PolyRatio
        else:
            raise ModelFormatError(f"unknown model kind {kind}")
        (n_weights,) = r.take("<Q")
        if n_weights > len(data):
            raise ModelFormatError("model file is truncated")
        weights = r.floats(n_weights)
        log_z, log_norm = r.take("<dd")
        model = cls(spec, np.append(weights, log_z), log_norm)
        guide = None
        (has_guide,) = r.take("<B")
        if has_guide:
            guide = CorrelationMatrix.from_array(r.floats(d * d).reshape(d, d), rescale=False)
        marginals = None
        (has_marginals,) = r.take("<B")
        if has_marginals:
            (n,) = r.take("<Q")
            if n * d > len(data):
                raise ModelFormatError("model file is truncated")
            marginals = EmpiricalMarginals.from_sorted(r.floats(n * d).reshape(d, n).T)
    except ValidationError as exc:
        raise ModelFormatError(f"invalid model file: {exc}") from exc
    if r.pos != len(data):
        raise ModelFormatError("model file has trailing bytes")
    return RatioCopula.from_parts(model, guide=guide, marginals=marginals)


def save_model(path, copula):
    with open(path, "wb") as fh:
        fh.write(dump_model(copula))


def load_model(path):
    with open(path, "rb") as fh:
        return parse_model(fh.read())
