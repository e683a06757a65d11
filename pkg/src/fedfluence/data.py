"""Synthetic federations and file ingestion.

File format (CSV or JSON lines), one record per sample::

    client_id,split,label,f0,f1,...

``split`` is ``train`` or ``test``. Test records keep whatever client id they
were written with but are pooled into a single held-out set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .model import LabeledSample


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int64))
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def samples(self) -> list[LabeledSample]:
        return [LabeledSample(x, int(label)) for x, label in zip(self.X, self.y)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])

    def __eq__(self, other) -> bool:
        return (isinstance(other, Dataset) and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y))


@dataclass(frozen=True, eq=False)
class ClientDataset(Dataset):
    client_id: int = 0

    def __post_init__(self):
        super().__post_init__()
        if len(self.y) < 1:
            raise ConfigError(f"client {self.client_id} has no samples")

    def __eq__(self, other) -> bool:
        return (isinstance(other, ClientDataset) and self.client_id == other.client_id
                and super().__eq__(other))


@dataclass(frozen=True)
class FederationData:
    clients: tuple[ClientDataset, ...]
    test: Dataset

    def __post_init__(self):
        object.__setattr__(self, "clients", tuple(sorted(self.clients, key=lambda c: c.client_id)))
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise ConfigError("client ids must be unique")
        if len(ids) < 2:
            raise ConfigError(f"a federation needs at least 2 clients, got {len(ids)}")

    @property
    def client_ids(self) -> tuple[int, ...]:
        return tuple(c.client_id for c in self.clients)

    @property
    def sizes(self) -> dict[int, int]:
        return {c.client_id: c.n for c in self.clients}

    @property
    def total_size(self) -> int:
        return sum(c.n for c in self.clients)

    @property
    def input_dim(self) -> int:
        return self.clients[0].X.shape[1]

    def client(self, cid: int) -> ClientDataset:
        for c in self.clients:
            if c.client_id == cid:
                return c
        raise KeyError(cid)


def synth_generate(num_clients: int, input_dim: int, classes: int, seed: int,
                   skew: str = "noniid-unbalanced", *, median_size: int = 20,
                   size_sigma: float = 1.0, min_size: int = 5, test_fraction: float = 0.2,
                   class_sep: float = 1.5, client_shift: float = 1.0,
                   label_concentration: float = 0.5) -> FederationData:
    """Generate a seeded Gaussian-mixture classification federation.

    ``noniid-unbalanced``: client sizes are log-normal around ``median_size``
    (clamped below at ``min_size``), each client draws its own class means
    around the global ones and its own Dirichlet label mix.
    ``iid-balanced``: every client holds ``median_size`` samples from the
    shared distribution.

    The test set is ``test_fraction`` of all generated samples, drawn from the
    size-weighted mixture of the client distributions.
    """
    if num_clients < 2:
        raise ConfigError("num_clients must be >= 2")
    if classes < 2:
        raise ConfigError("classes must be >= 2")
    if input_dim < 1 or median_size < 1 or min_size < 1:
        raise ConfigError("input_dim, median_size and min_size must be positive")
    if not 0 < test_fraction < 1:
        raise ConfigError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    global_means = class_sep * rng.standard_normal((classes, input_dim))

    if skew == "iid-balanced":
        sizes = np.full(num_clients, median_size)
        means = np.broadcast_to(global_means, (num_clients, classes, input_dim))
        label_probs = np.full((num_clients, classes), 1.0 / classes)
    elif skew == "noniid-unbalanced":
        raw = rng.lognormal(np.log(median_size), size_sigma, num_clients)
        sizes = np.maximum(np.rint(raw).astype(np.int64), min_size)
        shifts = client_shift * rng.standard_normal((num_clients, 1, input_dim))
        jitter = 0.5 * rng.standard_normal((num_clients, classes, input_dim))
        means = global_means[None] + shifts + jitter
        label_probs = rng.dirichlet(np.full(classes, label_concentration), num_clients)
    else:
        raise ConfigError(f"unknown skew {skew!r}")

    clients = []
    for k in range(num_clients):
        y = rng.choice(classes, size=int(sizes[k]), p=label_probs[k])
        X = means[k][y] + rng.standard_normal((int(sizes[k]), input_dim))
        clients.append(ClientDataset(X, y, client_id=k))

    n_train = int(sizes.sum())
    n_test = max(1, int(round(n_train * test_fraction / (1 - test_fraction))))
    owner = rng.choice(num_clients, size=n_test, p=sizes / n_train)
    y_test = np.array([rng.choice(classes, p=label_probs[k]) for k in owner], dtype=np.int64)
    X_test = means[owner, y_test] + rng.standard_normal((n_test, input_dim))
    return FederationData(tuple(clients), Dataset(X_test, y_test))


def _records(data: FederationData):
    for c in data.clients:
        for x, label in zip(c.X, c.y):
            yield c.client_id, "train", int(label), x
    for x, label in zip(data.test.X, data.test.y):
        yield -1, "test", int(label), x


def save_federation(data: FederationData, path, format: str = "csv") -> None:
    """Write ``data`` in the interchange format; floats use ``repr`` so reloads are exact."""
    path = Path(path)
    d = data.input_dim
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        if format == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["client_id", "split", "label", *(f"f{i}" for i in range(d))])
            for cid, split, label, x in _records(data):
                writer.writerow([cid, split, label, *(repr(float(v)) for v in x)])
        elif format in ("jsonl", "json-lines"):
            for cid, split, label, x in _records(data):
                obj = {"client_id": cid, "split": split, "label": label}
                obj.update({f"f{i}": float(v) for i, v in enumerate(x)})
                fh.write(json.dumps(obj) + "\n")
        else:
            raise ConfigError(f"unknown format {format!r}")


def _parse_row(row: dict, line: int, feature_keys: Sequence[str]):
    try:
        cid = int(row["client_id"])
        label = int(row["label"])
        split = str(row["split"]).strip()
        x = [float(row[k]) for k in feature_keys]
    except KeyError as exc:
        raise FormatError(f"missing field {exc.args[0]!r}", line) from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad value: {exc}", line) from None
    if split not in ("train", "test"):
        raise FormatError(f"split must be 'train' or 'test', got {split!r}", line)
    if label < 0:
        raise FormatError("negative label", line)
    return cid, split, label, x


def _feature_keys(keys) -> list[str]:
    feats = sorted((k for k in keys if k.startswith("f") and k[1:].isdigit()), key=lambda k: int(k[1:]))
    if not feats or [int(k[1:]) for k in feats] != list(range(len(feats))):
        raise FormatError("feature columns must be f0, f1, ... without gaps", 1)
    return feats


def load_federation(path, format: str = "csv") -> FederationData:
    """Read a federation written by :func:`save_federation` (or by hand)."""
    path = Path(path)
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        if format == "csv":
            reader = csv.DictReader(fh)
            header = reader.fieldnames
            if not header:
                raise FormatError("empty file", 1)
            for col in ("client_id", "split", "label"):
                if col not in header:
                    raise FormatError(f"missing {col!r} column", 1)
            feats = _feature_keys(header)
            for row in reader:
                if None in row or any(v is None for v in row.values()):
                    raise FormatError("wrong number of fields", reader.line_num)
                rows.append(_parse_row(row, reader.line_num, feats))
        elif format in ("jsonl", "json-lines"):
            feats = None
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"invalid JSON: {exc.msg}", line_no) from None
                if not isinstance(obj, dict):
                    raise FormatError("record is not an object", line_no)
                if "split" not in obj:
                    raise FormatError("missing 'split' field", line_no)
                if feats is None:
                    feats = _feature_keys(obj.keys())
                rows.append(_parse_row(obj, line_no, feats))
        else:
            raise ConfigError(f"unknown format {format!r}")
    if not rows:
        raise FormatError("no records", 1)

    train: dict[int, tuple[list, list]] = {}
    test_X, test_y = [], []
    for cid, split, label, x in rows:
        if split == "test":
            test_X.append(x)
            test_y.append(label)
        else:
            xs, ys = train.setdefault(cid, ([], []))
            xs.append(x)
            ys.append(label)
    if len(train) < 2:
        raise ConfigError(f"a federation needs at least 2 clients, got {len(train)}")
    if not test_y:
        raise FormatError("no test records", 1)
    clients = tuple(ClientDataset(np.array(xs), np.array(ys), client_id=cid)
                    for cid, (xs, ys) in sorted(train.items()))
    return FederationData(clients, Dataset(np.array(test_X), np.array(test_y)))
