"""File formats: binary PGM/PPM images, TOML run configs, CSV traces, JSON manifests."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import os
import platform
import re
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .engine import SimConfig, TraceRecord
from .policy import PpoConfig

TRACE_COLUMNS = ["decision", "u", "t_start", "t_recv", "eta", "K", "delay", "aoi", "voi", "psnr", "reward", "lambda"]
SUMMARY_COLUMNS = ["d_min", "avg_voi", "avg_psnr", "policy"]


# --- images --------------------------------------------------------------------------------

class ImageFormatError(ValueError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedDepthError(ImageFormatError):
    pass


@dataclass
class PnmImage:
    pixels: np.ndarray      # H x W x C, uint8
    max_val: int

    @property
    def shape(self):
        return self.pixels.shape


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pnm(data: bytes) -> PnmImage:
    if data[:2] not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"unsupported magic {data[:2]!r}; expected P5 or P6")
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    values = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m:
            raise MalformedHeaderError("header ends before width, height and maxval")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise MalformedHeaderError(f"non-numeric header field {m.group(1)!r}") from None
        pos = m.end()
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise MalformedHeaderError(f"bad dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise MalformedHeaderError(f"bad maxval {maxval}")
    if maxval > 255:
        raise UnsupportedDepthError(f"maxval {maxval} needs 16-bit samples; only 8-bit is supported")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    need = width * height * channels
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {need}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels).copy()
    return PnmImage(pixels, maxval)


def load_image(path) -> PnmImage:
    with open(path, "rb") as fh:
        return parse_pnm(fh.read())


def save_image(path, pixels: np.ndarray, max_val: int = 255):
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    if c not in (1, 3):
        raise ValueError(f"cannot write {c}-channel image as PGM/PPM")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n{max_val}\n".encode())
        fh.write(np.clip(np.rint(arr), 0, max_val).astype(np.uint8).tobytes())


def load_image_dir(path) -> list[tuple[np.ndarray, str]]:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise FileNotFoundError(f"no .pgm/.ppm files in {path}")
    return [(load_image(p).pixels.astype(np.float64), p.name) for p in files]


# --- configs -------------------------------------------------------------------------------

class ConfigError(ValueError):
    pass


def _key_line(text: str, section: str, key: str) -> int:
    current = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s.strip("[] ")
        elif current == section and re.match(rf"{re.escape(key)}\s*=", s):
            return lineno
    return 0


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    return value


def _build(cls, table: dict, text: str, section: str, path):
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        where = f"{path}:{_key_line(text, section, key)}: [{section}] {key}"
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        kwargs[key] = _coerce(value, getattr(defaults, key), where)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        lines = [f"{_key_line(text, section, k)}" for k in kwargs if k in str(exc)]
        loc = lines[0] if lines else "?"
        raise ConfigError(f"{path}:{loc}: [{section}] {exc}") from None


def load_config(path) -> tuple[SimConfig, PpoConfig]:
    """Read ``[sim]`` and ``[ppo]`` sections; absent keys take defaults, unknown keys fail."""
    text = Path(path).read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    extra = set(doc) - {"sim", "ppo"}
    if extra:
        name = sorted(extra)[0]
        raise ConfigError(f"{path}:{_key_line(text, '', name) or '?'}: unknown section or key {name!r}")
    sim = _build(SimConfig, doc.get("sim", {}), text, "sim", path)
    ppo = _build(PpoConfig, doc.get("ppo", {}), text, "ppo", path)
    return sim, ppo


def config_dict(sim: SimConfig, ppo: PpoConfig) -> dict:
    s = dataclasses.asdict(sim)
    s["levels"] = list(s["levels"])
    return {"sim": s, "ppo": dataclasses.asdict(ppo)}


# --- CSV -----------------------------------------------------------------------------------

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


def trace_row(r: TraceRecord) -> list:
    return [r.decision, r.u, r.t_start, r.t_recv, r.eta, r.K, r.delay, r.aoi, r.voi, r.psnr, r.reward, r.lam]


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def export_trace(trace: Sequence[TraceRecord], path):
    write_csv(path, TRACE_COLUMNS, (trace_row(r) for r in trace))


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {reader.fieldnames}")
        return [{k: (int(v) if k in ("decision", "K") else float(v)) for k, v in row.items()} for row in reader]


def export_sweep(rows: Sequence[dict], out_dir) -> list[Path]:
    """One CSV per d_min plus ``sweep_summary.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for d in sorted({r["d_min"] for r in rows}):
        sub = [r for r in rows if r["d_min"] == d]
        detail = [[r["policy"], r["avg_voi"], r["avg_voi_time"], r["avg_psnr"], r["constraint_ok"]] for r in sub]
        for r in sub:
            for f in r.get("fixed", []):
                detail.append([f"fixed{f['level']}", f["avg_voi"], f.get("avg_voi_time", float("nan")),
                               f["avg_psnr"], f["avg_psnr"] >= d])
        p = out_dir / f"sweep_dmin_{fmt(d)}.csv"
        write_csv(p, ["policy", "avg_voi", "avg_voi_time", "avg_psnr", "constraint_ok"], detail)
        paths.append(p)
    p = out_dir / "sweep_summary.csv"
    write_csv(p, SUMMARY_COLUMNS, ([r["d_min"], r["avg_voi"], r["avg_psnr"], r["policy"]] for r in rows))
    paths.append(p)
    return paths


# --- manifests -----------------------------------------------------------------------------

def run_id(config: dict, seed: int, command: str) -> str:
    blob = json.dumps({"config": config, "seed": seed, "command": command}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def write_manifest(out_dir, command: str, config: dict, seed: int, outputs: Sequence, started: float,
                   extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    manifest = {
        "run_id": run_id(config, seed, command),
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": [os.path.basename(str(p)) for p in outputs],
        "timing": {"started": started, "elapsed_s": time.time() - started},
    }
    manifest.update(extra or {})
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path
