"""Impression-log tables and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Tuple

import numpy as np

PROVENANCES = ("synthetic", "ingested")


class DatasetError(ValueError):
    """A dataset violates one of its invariants."""


@dataclass
class Dataset:
    """Rows of ``(pair_id, feature_ids, o, r)``.

    ``feature_ids`` is a ``(n_rows, k)`` integer array: every row carries the
    same number of categorical features.
    """

    pair_id: np.ndarray
    feature_ids: np.ndarray
    click: np.ndarray
    conversion: np.ndarray
    provenance: str = "synthetic"

    def __post_init__(self):
        self.pair_id = np.asarray(self.pair_id, dtype=np.int64).reshape(-1)
        n = self.pair_id.size
        feats = np.asarray(self.feature_ids, dtype=np.int64)
        if n == 0:
            self.feature_ids = feats.reshape(0, feats.shape[1] if feats.ndim == 2 else 0)
        else:
            self.feature_ids = feats.reshape(n, -1)
        self.click = np.asarray(self.click, dtype=np.int8).reshape(-1)
        self.conversion = np.asarray(self.conversion, dtype=np.int8).reshape(-1)
        if self.provenance not in PROVENANCES:
            raise DatasetError(f"provenance must be one of {PROVENANCES}")
        if not (self.click.size == self.conversion.size == n):
            raise DatasetError("column lengths differ")
        if np.any((self.click != 0) & (self.click != 1)) or np.any(
            (self.conversion != 0) & (self.conversion != 1)
        ):
            raise DatasetError("click and conversion labels must be binary")
        if np.any((self.conversion == 1) & (self.click == 0)):
            raise DatasetError("conversion without click")
        if np.unique(self.pair_id).size != n:
            raise DatasetError("pair ids are not unique")

    def __len__(self) -> int:
        return self.pair_id.size

    @property
    def num_features(self) -> int:
        return self.feature_ids.shape[1]

    def rows(self) -> Iterator[Tuple[int, Tuple[int, ...], int, int]]:
        for pid, feats, o, r in zip(self.pair_id, self.feature_ids, self.click, self.conversion):
            yield int(pid), tuple(int(f) for f in feats), int(o), int(r)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            pair_id=self.pair_id[index],
            feature_ids=self.feature_ids[index],
            click=self.click[index],
            conversion=self.conversion[index],
            provenance=self.provenance,
        )

    def click_rate(self) -> float:
        return float(self.click.mean()) if len(self) else float("nan")

    def clicked_conversion_rate(self) -> float:
        """Mean conversion label over clicked rows."""
        clicked = self.click == 1
        return float(self.conversion[clicked].mean()) if clicked.any() else float("nan")

    def equals(self, other: "Dataset") -> bool:
        return (
            self.provenance == other.provenance
            and np.array_equal(self.pair_id, other.pair_id)
            and self.feature_ids.shape == other.feature_ids.shape
            and np.array_equal(self.feature_ids, other.feature_ids)
            and np.array_equal(self.click, other.click)
            and np.array_equal(self.conversion, other.conversion)
        )


def write_dataset_csv(dataset: Dataset, path) -> None:
    """``pair_id,feature_ids,o,r`` with feature ids joined by ``;``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "feature_ids", "o", "r"])
        for pid, feats, o, r in dataset.rows():
            w.writerow([pid, ";".join(map(str, feats)), o, r])


def read_dataset_csv(path, provenance: str = "synthetic") -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["pair_id", "feature_ids", "o", "r"]:
            raise DatasetError(f"{path}: unexpected header {header}")
        pid, feats, o, r = [], [], [], []
        for line in reader:
            if not line:
                continue
            pid.append(int(line[0]))
            feats.append([int(x) for x in line[1].split(";")] if line[1] else [])
            o.append(int(line[2]))
            r.append(int(line[3]))
    k = len(feats[0]) if feats else 0
    return Dataset(
        pair_id=np.asarray(pid, dtype=np.int64),
        feature_ids=np.asarray(feats, dtype=np.int64).reshape(len(pid), k),
        click=np.asarray(o),
        conversion=np.asarray(r),
        provenance=provenance,
    )


def split(dataset: Dataset, validation_fraction: float = 0.1, seed: int = 0) -> Tuple[Dataset, Dataset]:
    """Seeded uniform split into disjoint ``(train, validation)`` parts."""
    if not 0 < validation_fraction < 1:
        raise ValueError(f"validation_fraction must lie in (0, 1), got {validation_fraction}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * validation_fraction))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
