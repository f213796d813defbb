"""Sequences, dataset splits, normalization and the on-disk dataset layout."""
import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from sklearn.preprocessing import MinMaxScaler

from ._utils import substream


@dataclass(eq=False)
class Sequence:
    """One input/output record: ``u`` is (T, n_u), ``y`` is (T, n_y)."""

    u: np.ndarray
    y: np.ndarray
    id: int = 0

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.u.ndim != 2 or self.y.ndim != 2:
            raise ValueError("u and y must be 2-D (time, channel) arrays")
        if self.u.shape[0] != self.y.shape[0]:
            raise ValueError(f"sequence {self.id}: u has {self.u.shape[0]} steps, y has {self.y.shape[0]}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.y))):
            raise ValueError(f"sequence {self.id} has non-finite entries")

    def __len__(self):
        return self.u.shape[0]


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    T_s: int
    T_w: int

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("training, validation and test ids must be disjoint")
        if not 0 <= self.T_w < self.T_s:
            raise ValueError(f"washout T_w={self.T_w} must be smaller than T_s={self.T_s}")

    @classmethod
    def random(cls, ids, n_train, n_val, n_test, T_s, T_w, seed=0):
        ids = list(ids)
        if n_train + n_val + n_test > len(ids):
            raise ValueError("split sizes exceed the number of sequences")
        perm = substream(seed, "split").permutation(len(ids))
        pick = [ids[i] for i in perm]
        return cls(
            train=sorted(pick[:n_train]),
            val=sorted(pick[n_train: n_train + n_val]),
            test=sorted(pick[n_train + n_val: n_train + n_val + n_test]),
            T_s=T_s,
            T_w=T_w,
        )

    def to_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test),
                "T_s": self.T_s, "T_w": self.T_w}


def make_subsequences(raw, T_s, T_w=0, stride=1):
    """Cut windows ``[j*stride, j*stride + T_s)`` out of one long record."""
    T = len(raw)
    if T_s > T:
        raise ValueError(f"subsequence length {T_s} exceeds record length {T}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not 0 <= T_w < T_s:
        raise ValueError("washout must be shorter than the subsequence")
    starts = range(0, T - T_s + 1, stride)
    return [Sequence(raw.u[s: s + T_s], raw.y[s: s + T_s], id=i) for i, s in enumerate(starts)]


def stack(sequences):
    """(B, T, n_u), (B, T, n_y) arrays from equal-length sequences."""
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError(f"sequences must share one length, got {sorted(lengths)}")
    return np.stack([s.u for s in sequences]), np.stack([s.y for s in sequences])


class Normalizer(MinMaxScaler):
    """Per-channel affine map of the observed [min, max] onto [-1, 1]."""

    def __init__(self, feature_range=(-1, 1), *, copy=True, clip=False):
        super().__init__(feature_range=feature_range, copy=copy, clip=clip)

    def apply(self, values):
        values = np.asarray(values, dtype=float)
        return self.transform(values.reshape(-1, values.shape[-1])).reshape(values.shape)

    def invert(self, values):
        values = np.asarray(values, dtype=float)
        return self.inverse_transform(values.reshape(-1, values.shape[-1])).reshape(values.shape)

    def to_dict(self):
        return {"min": [float(v) for v in self.data_min_], "max": [float(v) for v in self.data_max_]}

    @classmethod
    def from_dict(cls, d):
        return cls().fit(np.array([d["min"], d["max"]], dtype=float))


@dataclass
class Dataset:
    """Normalized sequences plus the normalizers that produced them."""

    sequences: list
    u_norm: Normalizer
    y_norm: Normalizer
    split: DatasetSplit | None = None
    dt: float = 0.1

    def by_id(self, ids):
        index = {s.id: s for s in self.sequences}
        return [index[i] for i in ids]

    @property
    def train(self):
        return self.by_id(self.split.train)

    @property
    def val(self):
        return self.by_id(self.split.val)

    @property
    def test(self):
        return self.by_id(self.split.test)


def write_dataset(dataset, directory):
    """One CSV per sequence in physical units, plus normalizer and split sidecars."""
    os.makedirs(directory, exist_ok=True)
    written = []
    for s in dataset.sequences:
        u = dataset.u_norm.invert(s.u)
        y = dataset.y_norm.invert(s.y)
        path = os.path.join(directory, f"seq_{s.id:04d}.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"u{j + 1}" for j in range(u.shape[1])] + [f"y{j + 1}" for j in range(y.shape[1])])
            for k in range(len(s)):
                w.writerow([repr(k * dataset.dt)] + [repr(float(v)) for v in u[k]] + [repr(float(v)) for v in y[k]])
        written.append(path)
    side = {"u": dataset.u_norm.to_dict(), "y": dataset.y_norm.to_dict(), "dt": dataset.dt}
    path = os.path.join(directory, "normalizer.json")
    with open(path, "w") as fh:
        json.dump(side, fh, indent=1)
        fh.write("\n")
    written.append(path)
    if dataset.split is not None:
        path = os.path.join(directory, "split.json")
        with open(path, "w") as fh:
            json.dump(dataset.split.to_dict(), fh, indent=1)
            fh.write("\n")
        written.append(path)
    return written


def read_dataset(directory):
    with open(os.path.join(directory, "normalizer.json")) as fh:
        side = json.load(fh)
    u_norm, y_norm = Normalizer.from_dict(side["u"]), Normalizer.from_dict(side["y"])
    sequences = []
    for name in sorted(os.listdir(directory)):
        if not (name.startswith("seq_") and name.endswith(".csv")):
            continue
        with open(os.path.join(directory, name), newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        n_u = sum(1 for h in header if h.startswith("u"))
        u, y = body[:, 1: 1 + n_u], body[:, 1 + n_u:]
        sequences.append(Sequence(u_norm.apply(u), y_norm.apply(y), id=int(name[4:8])))
    split = None
    split_path = os.path.join(directory, "split.json")
    if os.path.exists(split_path):
        with open(split_path) as fh:
            split = DatasetSplit(**json.load(fh))
    return Dataset(sequences, u_norm, y_norm, split, side.get("dt", 0.1))
