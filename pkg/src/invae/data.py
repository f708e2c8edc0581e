"""In-memory dataset and the CSV dataset-directory format.

A dataset directory holds

* ``counts.csv``: ``cell_id,<gene...>`` with integer counts,
* ``obs.csv``: ``cell_id,<d-columns...>,env[,label]``,
* ``latents_true.csv`` (optional): ``cell_id,zI_1..,zS_1..``.

Cell ids must agree, in order, across the files.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

FLOAT_FMT = "%.17g"


class DataFormatError(OSError):
    """A dataset directory is missing, unreadable or inconsistent."""


@dataclass
class Dataset:
    cell_ids: list[str]
    genes: list[str]
    counts: np.ndarray
    covariates: dict[str, list] = field(default_factory=dict)
    env: list[str] = field(default_factory=list)
    labels: list[str] | None = None
    true_latents: np.ndarray | None = None
    latent_names: list[str] | None = None

    def __post_init__(self):
        n = len(self.cell_ids)
        self.counts = np.asarray(self.counts)
        if self.counts.shape != (n, len(self.genes)):
            raise DataFormatError(f"counts shape {self.counts.shape} != ({n}, {len(self.genes)})")
        if len(self.env) != n or any(len(v) != n for v in self.covariates.values()):
            raise DataFormatError("obs columns do not match the number of cells")
        if self.labels is not None and len(self.labels) != n:
            raise DataFormatError("label column does not match the number of cells")

    def __len__(self) -> int:
        return len(self.cell_ids)

    @property
    def n_true_invariant(self) -> int:
        return sum(1 for c in self.latent_names or [] if c.startswith("zI_"))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        pick = lambda seq: [seq[k] for k in idx]  # noqa: E731
        return Dataset(
            cell_ids=pick(self.cell_ids), genes=list(self.genes), counts=self.counts[idx],
            covariates={k: pick(v) for k, v in self.covariates.items()}, env=pick(self.env),
            labels=None if self.labels is None else pick(self.labels),
            true_latents=None if self.true_latents is None else self.true_latents[idx],
            latent_names=self.latent_names,
        )


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_table(path) -> tuple[list[str], list[list[str]]]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as err:
        raise DataFormatError(f"cannot read {path}: {err.strerror or err}") from err
    if not rows:
        raise DataFormatError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    for k, r in enumerate(body):
        if len(r) != len(header):
            raise DataFormatError(f"{path}: row {k + 2} has {len(r)} fields, expected {len(header)}")
    return header, body


def write_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "counts.csv", ["cell_id", *ds.genes],
                ([cid, *map(int, row)] for cid, row in zip(ds.cell_ids, ds.counts)))
    d_cols = list(ds.covariates)
    header = ["cell_id", *d_cols, "env"] + (["label"] if ds.labels is not None else [])
    rows = []
    for k, cid in enumerate(ds.cell_ids):
        row = [cid, *(ds.covariates[c][k] for c in d_cols), ds.env[k]]
        if ds.labels is not None:
            row.append(ds.labels[k])
        rows.append(row)
    write_table(out / "obs.csv", header, rows)
    if ds.true_latents is not None:
        write_table(out / "latents_true.csv", ["cell_id", *ds.latent_names],
                    ([cid, *map(float, z)] for cid, z in zip(ds.cell_ids, ds.true_latents)))


def read_obs(path) -> tuple[list[str], dict[str, list], list[str], list[str] | None]:
    header, body = read_table(path)
    if header[0] != "cell_id" or "env" not in header:
        raise DataFormatError(f"{path}: header must start with cell_id and contain env")
    cols = {h: [r[k] for r in body] for k, h in enumerate(header)}
    cell_ids = cols.pop("cell_id")
    env = cols.pop("env")
    labels = cols.pop("label", None)
    covariates = {k: [_maybe_float(v) for v in vals] for k, vals in cols.items()}
    return cell_ids, covariates, env, labels


def _maybe_float(v: str):
    try:
        return float(v)
    except ValueError:
        return v


def read_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataFormatError(f"dataset directory {d} does not exist")
    header, body = read_table(d / "counts.csv")
    if header[0] != "cell_id":
        raise DataFormatError("counts.csv header must start with cell_id")
    cell_ids = [r[0] for r in body]
    try:
        counts = np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int64).reshape(len(body), len(header) - 1)
    except ValueError as err:
        raise DataFormatError(f"counts.csv: non-integer count ({err})") from err
    if (counts < 0).any():
        raise DataFormatError("counts.csv: negative count")
    obs_ids, covariates, env, labels = read_obs(d / "obs.csv")
    if obs_ids != cell_ids:
        raise DataFormatError("cell_id columns of counts.csv and obs.csv differ")
    true_latents, names = None, None
    if (d / "latents_true.csv").exists():
        lh, lb = read_table(d / "latents_true.csv")
        if [r[0] for r in lb] != cell_ids:
            raise DataFormatError("cell_id column of latents_true.csv differs")
        names = lh[1:]
        true_latents = np.array([[float(v) for v in r[1:]] for r in lb]).reshape(len(lb), len(names))
    return Dataset(cell_ids, header[1:], counts, covariates, env, labels, true_latents, names)


def write_embedding(path, cell_ids: Sequence[str], blocks: dict[str, np.ndarray]) -> None:
    """Write ``cell_id`` plus the given column blocks (``{"zI": Z_I, "zS": Z_S}``)."""
    header = ["cell_id"]
    mats = []
    for prefix, mat in blocks.items():
        header += [f"{prefix}_{j + 1}" for j in range(mat.shape[1])]
        mats.append(mat)
    full = np.concatenate(mats, axis=1) if mats else np.zeros((len(cell_ids), 0))
    write_table(path, header, ([cid, *map(float, row)] for cid, row in zip(cell_ids, full)))


def read_embedding(path) -> tuple[list[str], dict[str, np.ndarray]]:
    header, body = read_table(path)
    if header[0] != "cell_id":
        raise DataFormatError(f"{path}: header must start with cell_id")
    ids = [r[0] for r in body]
    mat = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), len(header) - 1)
    blocks = {}
    for prefix in ("zI", "zS"):
        cols = [k for k, h in enumerate(header[1:]) if h.startswith(prefix + "_")]
        if cols:
            blocks[prefix] = mat[:, cols]
    return ids, blocks

