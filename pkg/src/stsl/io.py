"""File formats: PGM, headered raw float64, JSON reports, metrics CSV, INI configs."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import re
import struct
from pathlib import Path

import numpy as np

F64_MAGIC = b"STSLF64\x00"
CSV_COLUMNS = ("run_id", "task", "variant", "seed", "mse", "psnr", "ssim", "nfe_guidance", "nfe_raw", "wall_ms")


class ConfigError(ValueError):
    """Malformed configuration, with the offending line when known."""

    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
        self.line = line
        self.path = path


# --- images -----------------------------------------------------------------


def write_pgm(path, img, value_range=(0.0, 1.0)):
    """8-bit binary PGM (P5, maxval 255); values are clipped to ``value_range``."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM expects a 2-D image")
    lo, hi = value_range
    q = np.rint(np.clip((img - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)
    rows, cols = q.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    cols, rows, maxval = map(int, m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    body = np.frombuffer(data[m.end():], dtype=np.uint8)
    if body.size != rows * cols:
        raise ValueError(f"{path}: truncated pixel data")
    return body.reshape(rows, cols)


def write_f64(path, arr):
    """Little-endian float64 with a 16-byte header: magic, u32 rows, u32 cols."""
    arr = np.atleast_2d(np.asarray(arr, dtype="<f8"))
    if arr.ndim != 2:
        raise ValueError("raw float output expects at most two dimensions")
    rows, cols = arr.shape
    Path(path).write_bytes(F64_MAGIC + struct.pack("<II", rows, cols) + arr.tobytes(order="C"))


def read_f64(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != F64_MAGIC:
        raise ValueError(f"{path}: missing STSLF64 header")
    rows, cols = struct.unpack("<II", data[8:16])
    body = np.frombuffer(data[16:], dtype="<f8")
    if body.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {body.size}")
    return body.reshape(rows, cols).astype(np.float64)


# --- reports ----------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj), encoding="utf-8")


def content_hash(*parts, length: int = 16) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(dumps_json(p).encode("utf-8"))
    return h.hexdigest()[:length]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if v == float("inf") else repr(v)
    return str(v)


def csv_text(rows, columns=CSV_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def read_csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --- configs ----------------------------------------------------------------

_KEY_LINE = re.compile(r"^\s*([^=#;\[\s][^=]*?)\s*=")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` to its 1-based line number."""
    index, section = {}, None
    for n, line in enumerate(text.splitlines(), 1):
        m = _SECTION_LINE.match(line)
        if m:
            section = m.group(1).strip()
            index[(section, None)] = n
            continue
        m = _KEY_LINE.match(line)
        if m and section is not None:
            index[(section, m.group(1).strip().lower())] = n
    return index


class ConfigFile:
    """Sections of ``key = value`` pairs with ``#`` comments and line-aware errors."""

    def __init__(self, text: str, path=None):
        self.path = path
        parser = configparser.ConfigParser(
            interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",), strict=True
        )
        try:
            parser.read_string(text, source=str(path or "<config>"))
        except configparser.MissingSectionHeaderError as exc:
            raise ConfigError("key outside any [section]", exc.lineno, path) from None
        except configparser.DuplicateSectionError as exc:
            raise ConfigError(f"duplicate section [{exc.section}]", exc.lineno, path) from None
        except configparser.DuplicateOptionError as exc:
            raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", exc.lineno, path) from None
        except configparser.ParsingError as exc:
            line = exc.errors[0][0] if exc.errors else None
            raise ConfigError("expected 'key = value'", line, path) from None
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], None, path) from None
        self.parser = parser
        self.lines = _line_index(text)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError:
            raise ConfigError("file is not valid UTF-8", None, path) from None
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
        return cls(text, path)

    def sections(self):
        return self.parser.sections()

    def has(self, section, key=None):
        if key is None:
            return self.parser.has_section(section)
        return self.parser.has_option(section, key)

    def keys(self, section):
        return list(self.parser[section].keys()) if self.parser.has_section(section) else []

    def error(self, message, section, key=None):
        return ConfigError(message, self.lines.get((section, key and key.lower())), self.path)

    def get(self, section, key, kind=str, default=None, required=False):
        if not self.parser.has_option(section, key):
            if required:
                raise self.error(f"missing required key {key!r} in [{section}]", section)
            return default
        raw = self.parser.get(section, key).strip()
        try:
            return _convert(raw, kind)
        except (ValueError, TypeError):
            name = getattr(kind, "__name__", str(kind))
            raise self.error(f"[{section}] {key} = {raw!r} is not a valid {name}", section, key) from None


def _convert(raw, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind is int:
        return int(raw, 0)
    if kind is float:
        v = float(raw)
        if not math.isfinite(v):
            raise ValueError(raw)
        return v
    if kind == "ints":
        return [int(v, 0) for v in raw.replace(",", " ").split()]
    if kind == "floats":
        return [float(v) for v in raw.replace(",", " ").split()]
    if kind == "words":
        return [v for v in raw.replace(",", " ").split()]
    return raw
