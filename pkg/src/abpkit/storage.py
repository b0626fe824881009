"""On-disk formats: raw subject directories and windowed datasets.

Raw layout: one directory per subject. Each channel is either
``<name>.csv`` with header ``t_seconds,value`` or a raw little-endian
float64 file ``<name>.f64`` plus a sidecar ``<name>.json`` giving
``rate``, ``label``, ``units``. The loader picks by extension.

Windowed layout: per subject, ``windows.bin`` holds length-prefixed
float64 arrays (per window: flattened inputs, target, aux, beat feet,
beat SBP, beat DBP) and ``windows.idx`` is a text index (one line per
window: ordinal, byte offset, source span). ``meta.json`` carries shapes
and labels.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .signals import Waveform, WindowedSubject

__all__ = [
    "save_waveform_csv",
    "save_waveform_raw",
    "save_subject_dir",
    "load_subject_dir",
    "save_windowed",
    "load_windowed",
    "is_windowed_dir",
    "list_subject_dirs",
    "sha256_file",
    "tree_digest",
]


def save_waveform_csv(path: Path, w: Waveform) -> None:
    with open(path, "w") as fh:
        fh.write("t_seconds,value\n")
        for i, v in enumerate(w.samples):
            fh.write(f"{i / w.rate!r},{float(v)!r}\n")


def load_waveform_csv(path: Path, label: str) -> Waveform:
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    if data.ndim != 2 or data.shape[1] != 2 or len(data) < 2:
        raise ValueError(f"{path}: expected two columns t_seconds,value")
    t, v = data[:, 0], data[:, 1]
    dt = np.diff(t)
    if not np.allclose(dt, dt[0], rtol=1e-6):
        raise ValueError(f"{path}: non-uniform sampling")
    return Waveform(v, rate=1.0 / float(dt[0]), label=label)


def save_waveform_raw(dirpath: Path, name: str, w: Waveform, units: str = "") -> None:
    arr = np.ascontiguousarray(w.samples, dtype="<f8")
    (dirpath / f"{name}.f64").write_bytes(arr.tobytes())
    meta = {"rate": w.rate, "label": w.label or name, "units": units}
    (dirpath / f"{name}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def load_waveform_raw(path: Path) -> Waveform:
    meta_path = path.with_suffix(".json")
    if not meta_path.exists():
        raise ValueError(f"{path}: missing sidecar {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    samples = np.frombuffer(path.read_bytes(), dtype="<f8")
    return Waveform(samples.copy(), rate=float(meta["rate"]), label=str(meta["label"]))


def save_subject_dir(dirpath: Path, abp: Waveform, channels: list[Waveform]) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    save_waveform_raw(dirpath, "abp", abp, units="mmHg")
    for ch in channels:
        save_waveform_raw(dirpath, ch.label, ch, units="au")


def load_subject_dir(dirpath: Path) -> tuple[Waveform, list[Waveform]]:
    """Returns (abp, pulsatile channels); channels sorted by file name."""
    dirpath = Path(dirpath)
    abp = None
    channels = []
    for path in sorted(dirpath.iterdir()):
        if path.suffix == ".f64":
            w = load_waveform_raw(path)
        elif path.suffix == ".csv":
            w = load_waveform_csv(path, label=path.stem)
        else:
            continue
        if path.stem == "abp" or w.label == "abp":
            abp = w
        else:
            channels.append(w)
    if abp is None:
        raise ValueError(f"{dirpath}: no abp channel found")
    if not channels:
        raise ValueError(f"{dirpath}: no pulsatile channels found")
    return abp, channels


def list_subject_dirs(root: Path) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir())


def _write_array(fh, arr: np.ndarray) -> int:
    arr = np.ascontiguousarray(arr, dtype="<f8").ravel()
    fh.write(struct.pack("<I", arr.size))
    fh.write(arr.tobytes())
    return 4 + 8 * arr.size


def _read_array(fh) -> np.ndarray:
    raw = fh.read(4)
    if len(raw) < 4:
        raise ValueError("windows.bin: truncated record")
    (n,) = struct.unpack("<I", raw)
    return np.frombuffer(fh.read(8 * n), dtype="<f8").copy()


def save_windowed(dirpath: Path, ws: WindowedSubject) -> None:
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": ws.subject_id,
        "n_windows": ws.n_windows,
        "n_channels": ws.inputs.shape[1],
        "window_len": ws.window_len,
        "channel_labels": list(ws.channel_labels),
        "source_rate": ws.source_rate,
    }
    (dirpath / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    index_lines = []
    offset = 0
    with open(dirpath / "windows.bin", "wb") as fh:
        for wi in range(ws.n_windows):
            start, end = int(ws.window_ranges[wi, 0]), int(ws.window_ranges[wi, 1])
            index_lines.append(
                f"{wi},{offset},{start},{end},{float(ws.window_rates[wi])!r}"
            )
            offset += _write_array(fh, ws.inputs[wi])
            offset += _write_array(fh, ws.targets[wi])
            offset += _write_array(fh, ws.aux[wi])
            offset += _write_array(fh, ws.beat_feet[wi])
            offset += _write_array(fh, ws.beat_sbp[wi])
            offset += _write_array(fh, ws.beat_dbp[wi])
    (dirpath / "windows.idx").write_text("\n".join(index_lines) + "\n")


def load_windowed(dirpath: Path) -> WindowedSubject:
    dirpath = Path(dirpath)
    meta = json.loads((dirpath / "meta.json").read_text())
    lines = (dirpath / "windows.idx").read_text().strip().splitlines()
    n = meta["n_windows"]
    if len(lines) != n:
        raise ValueError(f"{dirpath}: index lists {len(lines)} windows, meta says {n}")
    c, l = meta["n_channels"], meta["window_len"]
    inputs = np.zeros((n, c, l))
    targets = np.zeros((n, l))
    aux = np.zeros((n, 12))
    ranges = np.zeros((n, 2), dtype=np.int64)
    rates = np.zeros(n)
    feet, sbp, dbp = [], [], []
    with open(dirpath / "windows.bin", "rb") as fh:
        for line in lines:
            cells = line.split(",")
            wi = int(cells[0])
            fh.seek(int(cells[1]))
            ranges[wi] = (int(cells[2]), int(cells[3]))
            rates[wi] = float(cells[4])
            inputs[wi] = _read_array(fh).reshape(c, l)
            targets[wi] = _read_array(fh)
            aux[wi] = _read_array(fh)
            feet.append(_read_array(fh))
            sbp.append(_read_array(fh))
            dbp.append(_read_array(fh))
    return WindowedSubject(
        subject_id=meta["subject_id"],
        inputs=inputs,
        targets=targets,
        aux=aux,
        window_ranges=ranges,
        window_rates=rates,
        beat_feet=feet,
        beat_sbp=sbp,
        beat_dbp=dbp,
        channel_labels=tuple(meta["channel_labels"]),
        source_rate=float(meta["source_rate"]),
    )


def is_windowed_dir(dirpath: Path) -> bool:
    dirpath = Path(dirpath)
    return (dirpath / "windows.idx").exists()


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            block = fh.read(1 << 20)
            if not block:
                break
            digest.update(block)
    return digest.hexdigest()


def tree_digest(root: Path) -> dict[str, str]:
    """Relative path -> sha256 for every file under root (sorted)."""
    root = Path(root)
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = sha256_file(path)
    return out
