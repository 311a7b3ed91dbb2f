"""Functional dataset containers and their csv / bin file formats.

A dataset holds S simulator runs observed at the same n index points:

* ``locations``     n x d index points
* ``local_attrs``   n x q per-location covariates (shared by every run)
* ``global_attrs``  S x p per-run inputs
* ``responses``     n x S, column s is run s

CSV layout: one row per location with header ``u1..ud,x1..xq,y1..yS``; the
global attributes live in a sidecar ``<stem>.global.csv`` with header
``z1..zp`` and S rows.

Bin layout: 64-byte header (magic ``SKGPDATA``, then version, n, S, d, q, p
as little-endian int64, one zero pad slot), followed by row-major float64
matrices in the order locations, local_attrs, global_attrs, responses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .binio import HEADER_SIZE, FormatError, pack_header, read_matrix, unpack_header, write_matrix

DATA_MAGIC = b"SKGPDATA"
DATA_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset content (shapes, non-finite values, duplicates)."""


def _check_finite(name: str, a: np.ndarray) -> None:
    bad = ~np.isfinite(a)
    if bad.any():
        row = int(np.argwhere(bad)[0][0])
        raise DatasetError(f"non-finite value in {name} at row {row}")


def _first_duplicate_row(locations: np.ndarray) -> tuple[int, int] | None:
    if locations.shape[0] < 2:
        return None
    order = np.lexsort(locations.T[::-1])
    srt = locations[order]
    same = np.all(srt[1:] == srt[:-1], axis=1)
    if not same.any():
        return None
    k = int(np.argmax(same))
    a, b = sorted((int(order[k]), int(order[k + 1])))
    return a, b


@dataclass(frozen=True)
class FunctionalDataset:
    locations: np.ndarray
    local_attrs: np.ndarray
    global_attrs: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("locations", "local_attrs", "global_attrs", "responses"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.ndim == 1:
                a = a[:, None]
            if a.ndim != 2:
                raise DatasetError(f"{name} must be a matrix, got ndim={a.ndim}")
            a.setflags(write=False)
            arrays[name] = a
            object.__setattr__(self, name, a)

        n, S = arrays["responses"].shape
        if n < 1 or S < 1:
            raise DatasetError(f"need n >= 1 and S >= 1, got n={n}, S={S}")
        if arrays["locations"].shape[0] != n:
            raise DatasetError(
                f"locations has {arrays['locations'].shape[0]} rows but responses has {n}"
            )
        if arrays["local_attrs"].shape[0] != n:
            raise DatasetError(
                f"local_attrs has {arrays['local_attrs'].shape[0]} rows but responses has {n}"
            )
        if arrays["global_attrs"].shape[0] != S:
            raise DatasetError(
                f"global_attrs has {arrays['global_attrs'].shape[0]} rows but there are {S} simulations"
            )
        for name, a in arrays.items():
            _check_finite(name, a)
        dup = _first_duplicate_row(arrays["locations"])
        if dup is not None:
            raise DatasetError(f"duplicate location at rows {dup[0]} and {dup[1]}")

    @property
    def n(self) -> int:
        return self.responses.shape[0]

    @property
    def S(self) -> int:
        return self.responses.shape[1]

    @property
    def d(self) -> int:
        return self.locations.shape[1]

    @property
    def q(self) -> int:
        return self.local_attrs.shape[1]

    @property
    def p(self) -> int:
        return self.global_attrs.shape[1]

    def subset_rows(self, idx) -> "FunctionalDataset":
        idx = np.asarray(idx)
        return FunctionalDataset(
            self.locations[idx], self.local_attrs[idx], self.global_attrs, self.responses[idx]
        )

    def equals(self, other: "FunctionalDataset") -> bool:
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("locations", "local_attrs", "global_attrs", "responses")
        )


@dataclass(frozen=True)
class PredictionRequest:
    """Where and for which runs to predict.

    ``mode`` is ``"new"`` for a fresh simulator run (w* independent of the
    training runs) or ``"within"`` to krige against training run
    ``within_run``.
    """

    new_locations: np.ndarray
    new_local_attrs: np.ndarray
    new_global_attrs: np.ndarray
    mode: Literal["new", "within"] = "new"
    within_run: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("new_locations", "new_local_attrs", "new_global_attrs"):
            a = np.array(getattr(self, name), dtype=np.float64)
            if a.ndim == 1:
                a = a[None, :] if name == "new_global_attrs" else a[:, None]
            object.__setattr__(self, name, a)
        if self.new_locations.shape[0] != self.new_local_attrs.shape[0]:
            raise DatasetError("new_locations and new_local_attrs row counts differ")
        if self.mode not in ("new", "within"):
            raise DatasetError(f"unknown prediction mode {self.mode!r}")
        if self.mode == "within" and self.within_run is None:
            raise DatasetError("within mode needs within_run")

    @property
    def n_star(self) -> int:
        return self.new_locations.shape[0]

    @property
    def S_star(self) -> int:
        return self.new_global_attrs.shape[0]

    def check_against(self, ds: FunctionalDataset) -> None:
        if self.new_locations.shape[1] != ds.d:
            raise DatasetError(f"request has d={self.new_locations.shape[1]}, training d={ds.d}")
        if self.new_local_attrs.shape[1] != ds.q:
            raise DatasetError(f"request has q={self.new_local_attrs.shape[1]}, training q={ds.q}")
        if self.new_global_attrs.shape[1] != ds.p:
            raise DatasetError(f"request has p={self.new_global_attrs.shape[1]}, training p={ds.p}")
        if self.mode == "within" and not 0 <= self.within_run < ds.S:
            raise DatasetError(f"within_run {self.within_run} outside [0, {ds.S})")

    @classmethod
    def from_dataset(cls, test: FunctionalDataset, mode="new", within_run=None):
        return cls(test.locations, test.local_attrs, test.global_attrs, mode, within_run)


# ---------------------------------------------------------------- csv


def global_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".global.csv")


def _fmt(v: float) -> str:
    return repr(float(v))


def _save_csv(ds: FunctionalDataset, path: Path) -> None:
    header = (
        [f"u{i + 1}" for i in range(ds.d)]
        + [f"x{i + 1}" for i in range(ds.q)]
        + [f"y{i + 1}" for i in range(ds.S)]
    )
    body = np.hstack([ds.locations, ds.local_attrs, ds.responses])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in body:
            w.writerow([_fmt(v) for v in row])
    with open(global_sidecar(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z{i + 1}" for i in range(ds.p)])
        for row in ds.global_attrs:
            w.writerow([_fmt(v) for v in row])


def _parse_header(header: list[str], path) -> dict[str, int]:
    counts = {"u": 0, "x": 0, "y": 0}
    expected_prefix = "u"
    for col, name in enumerate(header):
        name = name.strip()
        prefix, num = name[:1], name[1:]
        if prefix not in counts or not num.isdigit():
            raise DatasetError(f"{path}: unrecognized column {name!r} at position {col}")
        if "uxy".index(prefix) < "uxy".index(expected_prefix):
            raise DatasetError(f"{path}: column {name!r} out of order")
        expected_prefix = prefix
        counts[prefix] += 1
        if int(num) != counts[prefix]:
            raise DatasetError(f"{path}: column {name!r} breaks numbering")
    return counts


def _read_rows(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise DatasetError(f"{path}: empty file")
    return rows[0], rows[1:]


def _to_float_matrix(rows: list[list[str]], width: int, path) -> np.ndarray:
    out = np.empty((len(rows), width))
    for i, r in enumerate(rows):
        if len(r) != width:
            raise DatasetError(f"{path}: row {i} has {len(r)} fields, expected {width}")
        try:
            out[i] = [float(v) for v in r]
        except ValueError as exc:
            raise DatasetError(f"{path}: unparsable value in row {i}: {exc}") from None
    return out


def _load_csv(path: Path) -> FunctionalDataset:
    header, rows = _read_rows(path)
    counts = _parse_header(header, path)
    body = _to_float_matrix(rows, len(header), path)
    d, q = counts["u"], counts["x"]
    side = global_sidecar(path)
    if not side.exists():
        raise DatasetError(f"missing global-attribute sidecar {side}")
    gheader, grows = _read_rows(side)
    z = _to_float_matrix(grows, len(gheader), side)
    return FunctionalDataset(body[:, :d], body[:, d : d + q], z, body[:, d + q :])


# ---------------------------------------------------------------- bin


def _save_bin(ds: FunctionalDataset, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_header(DATA_MAGIC, DATA_VERSION, ds.n, ds.S, ds.d, ds.q, ds.p))
        for a in (ds.locations, ds.local_attrs, ds.global_attrs, ds.responses):
            write_matrix(fh, a)


def _load_bin(path: Path) -> FunctionalDataset:
    with open(path, "rb") as fh:
        version, n, S, d, q, p, _ = unpack_header(fh.read(HEADER_SIZE), DATA_MAGIC)
        if version != DATA_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if min(n, S, d) < 1 or min(q, p) < 0:
            raise DatasetError(f"{path}: bad dimensions n={n} S={S} d={d} q={q} p={p}")
        locations = read_matrix(fh, (n, d))
        local = read_matrix(fh, (n, q))
        glob = read_matrix(fh, (S, p))
        resp = read_matrix(fh, (n, S))
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return FunctionalDataset(locations, local, glob, resp)


def save_dataset(ds: FunctionalDataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "csv":
        _save_csv(ds, path)
    elif fmt == "bin":
        _save_bin(ds, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_dataset(path, format: str | None = None) -> FunctionalDataset:
    path = Path(path)
    fmt = format or _infer_format(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "bin":
        return _load_bin(path)
    raise ValueError(f"unknown format {fmt!r}")


def _infer_format(path: Path) -> str:
    return "csv" if path.suffix.lower() == ".csv" else "bin"
