"""Bit-exact artifact writers: binary PPM images, trajectory CSV, JSON summaries."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..optimizer import RunRecord

__all__ = ["ppm_bytes", "write_ppm", "read_ppm", "trajectory_header", "trajectory_csv",
           "write_trajectory_csv", "write_json", "write_table_csv"]


def ppm_bytes(image) -> bytes:
    """Binary P6 encoding of an (H, W, 3) image with values in [0, 1].

    Each sample is ``floor(v * 255 + 0.5)`` clamped to [0, 255] (round half up).
    """
    if isinstance(image, Tensor):
        image = image.data
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) image, got shape {a.shape}")
    h, w, _ = a.shape
    q = np.clip(np.floor(a * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes(order="C")


def write_ppm(image, path) -> None:
    Path(path).write_bytes(ppm_bytes(image))


def read_ppm(path) -> np.ndarray:
    """Read a P6 file written by :func:`write_ppm` back as uint8 (H, W, 3)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise ValueError("not a P6 file with maxval 255")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def trajectory_header(term_names) -> list:
    return ["t", "R_t", *term_names, "K", "grad_pre", "grad_post", "eps_norm", "is_new_best"]


def _num(x: float) -> str:
    # repr round-trips float64 exactly
    return repr(float(x))


def trajectory_csv(record: RunRecord) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(trajectory_header(record.term_names))
    for r in record.rows:
        w.writerow([r.t, _num(r.reward), *(_num(v) for v in r.per_term), _num(r.k),
                    _num(r.grad_pre), _num(r.grad_post), _num(r.eps_norm), int(r.is_new_best)])
    return buf.getvalue()


def write_trajectory_csv(record: RunRecord, path) -> None:
    Path(path).write_bytes(trajectory_csv(record).encode("utf-8"))


def write_table_csv(header, rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) if isinstance(v, float) else v for v in row])
    Path(path).write_bytes(buf.getvalue().encode("utf-8"))


def write_json(obj, path) -> None:
    Path(path).write_bytes((json.dumps(obj, indent=2, allow_nan=False) + "\n").encode("utf-8"))
