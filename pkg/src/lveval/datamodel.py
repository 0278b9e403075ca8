"""Dataset tensors, trial/neuron partitioning, k-shot plans, disk formats.

A dataset is a [trial x time x neuron] tensor plus a train/test trial
split and a held-in / held-out / k-out channel partition.  Spike counts
are stored as unsigned 32-bit integers; the same container carries
real-valued observations (Gaussian emitters) behind a ``real_valued``
flag.  All objects are immutable after construction; arrays are marked
read-only.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    FormatError,
    PartitionSizeError,
    PlanError,
    SplitError,
    UnusableNeuronError,
)
from .rng import substream

SCHEMA_VERSION = 1

MANIFEST_NAME = "manifest.json"
COUNTS_NAME = "counts.bin"
OBS_NAME = "obs.bin"
CSV_NAME = "counts.csv"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write a file via temp-file + rename so readers never see partial content."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class NeuronPartition:
    """Channel index sets for encoding (held-in), scoring (held-out) and
    few-shot scoring (k-out).

    ``k_out`` either aliases a subset of ``held_out`` (``alias_kout``
    true) or is a third set disjoint from both.
    """

    held_in: np.ndarray
    held_out: np.ndarray
    k_out: np.ndarray
    alias_kout: bool

    def __post_init__(self):
        object.__setattr__(self, "held_in", _frozen(np.asarray(self.held_in, dtype=np.int64)))
        object.__setattr__(self, "held_out", _frozen(np.asarray(self.held_out, dtype=np.int64)))
        object.__setattr__(self, "k_out", _frozen(np.asarray(self.k_out, dtype=np.int64)))
        hi, ho, ko = set(self.held_in.tolist()), set(self.held_out.tolist()), set(self.k_out.tolist())
        if hi & ho:
            raise PartitionSizeError("held_in and held_out overlap")
        if len(hi) != self.held_in.size or len(ho) != self.held_out.size or len(ko) != self.k_out.size:
            raise PartitionSizeError("partition sets contain duplicate indices")
        if self.alias_kout:
            if not ko <= ho:
                raise PartitionSizeError("alias_kout set but k_out is not a subset of held_out")
        elif ko & (hi | ho):
            raise PartitionSizeError("disjoint k_out overlaps held_in or held_out")

    @property
    def covered(self) -> np.ndarray:
        """All channel indices referenced by the partition, ascending."""
        return np.unique(np.concatenate([self.held_in, self.held_out, self.k_out]))


@dataclass(frozen=True)
class SpikeDataset:
    """Trial-aligned observation tensor with its partitions.

    ``counts`` has shape (S, T, N).  For spike data the dtype is uint32;
    with ``real_valued`` set it is float64 (Gaussian observations reuse
    the same container and disk layout).
    """

    counts: np.ndarray
    train_indices: np.ndarray
    test_indices: np.ndarray
    partition: NeuronPartition
    seed: int
    real_valued: bool = False

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 3 or min(c.shape) < 1:
            raise FormatError(f"counts must be S x T x N with all dims >= 1, got {c.shape}")
        if self.real_valued:
            c = c.astype(np.float64, copy=False)
        else:
            if not np.issubdtype(c.dtype, np.integer):
                raise FormatError("spike counts must be integers")
            if c.min() < 0:
                raise FormatError("spike counts must be non-negative")
            c = c.astype(np.uint32, copy=False)
        object.__setattr__(self, "counts", _frozen(c))
        tr = _frozen(np.sort(np.asarray(self.train_indices, dtype=np.int64)))
        te = _frozen(np.sort(np.asarray(self.test_indices, dtype=np.int64)))
        object.__setattr__(self, "train_indices", tr)
        object.__setattr__(self, "test_indices", te)
        s = self.counts.shape[0]
        both = np.concatenate([tr, te])
        if len(set(both.tolist())) != both.size or not np.array_equal(np.sort(both), np.arange(s)):
            raise SplitError("train/test indices must disjointly cover 0..S-1")
        cov = self.partition.covered
        if cov.size and (cov.min() < 0 or cov.max() >= self.counts.shape[2]):
            raise PartitionSizeError("partition references channels outside the dataset")

    @property
    def n_trials(self) -> int:
        return self.counts.shape[0]

    @property
    def n_time(self) -> int:
        return self.counts.shape[1]

    @property
    def n_channels(self) -> int:
        return self.counts.shape[2]

    def train_counts(self) -> np.ndarray:
        return self.counts[self.train_indices]

    def test_counts(self) -> np.ndarray:
        return self.counts[self.test_indices]


@dataclass(frozen=True)
class KShotPlan:
    """Resampled k-trial subsets of the train split.

    Subsets are drawn without replacement within a subset and
    independently across subsets, so two subsets may overlap.
    """

    k: int
    s: int
    subsets: np.ndarray  # (s, k) train-trial indices
    seed: int

    def __post_init__(self):
        sub = _frozen(np.asarray(self.subsets, dtype=np.int64))
        object.__setattr__(self, "subsets", sub)
        if sub.shape != (self.s, self.k):
            raise PlanError(f"subsets shape {sub.shape} != (s={self.s}, k={self.k})")
        for row in sub:
            if len(set(row.tolist())) != self.k:
                raise PlanError("subset contains repeated trials")


def partition_neurons(
    n_channels: int,
    sizes: tuple[int, int, int],
    alias_kout: bool,
    seed: int,
) -> NeuronPartition:
    """Uniformly random held-in / held-out / k-out channel partition.

    With ``alias_kout`` the k-out set is a random subset of held-out
    (equal to it when the sizes match); otherwise it is a third disjoint
    set.  Deterministic given ``seed``.
    """
    n_in, n_out, n_kout = (int(x) for x in sizes)
    if min(n_in, n_out, n_kout) < 1:
        raise PartitionSizeError("all partition sizes must be >= 1")
    if n_in + n_out > n_channels:
        raise PartitionSizeError(f"held_in + held_out = {n_in + n_out} exceeds {n_channels} channels")
    if alias_kout:
        if n_kout > n_out:
            raise PartitionSizeError("aliased k_out cannot exceed held_out size")
    elif n_in + n_out + n_kout > n_channels:
        raise PartitionSizeError(f"disjoint partition needs {n_in + n_out + n_kout} > {n_channels} channels")
    rng = substream(seed, "partition-neurons")
    perm = rng.permutation(n_channels)
    held_in = np.sort(perm[:n_in])
    held_out = np.sort(perm[n_in : n_in + n_out])
    if alias_kout:
        k_out = np.sort(rng.choice(held_out, size=n_kout, replace=False))
    else:
        k_out = np.sort(perm[n_in + n_out : n_in + n_out + n_kout])
    return NeuronPartition(held_in, held_out, k_out, alias_kout)


def split_trials(n_trials: int, n_train: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random disjoint train/test trial index sets with |train| = n_train."""
    if not 0 < n_train < n_trials:
        raise SplitError(f"need 0 < n_train < n_trials, got {n_train} of {n_trials}")
    rng = substream(seed, "split-trials")
    perm = rng.permutation(n_trials)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def default_n_subsets(n_train: int, k: int) -> int:
    return (5 * n_train) // k


def build_kshot_plan(dataset: SpikeDataset, k: int, seed: int, s: int | None = None) -> KShotPlan:
    """Plan of s k-trial subsets of the train split.

    By default s = floor(5 * S_train / k).  Each subset is drawn without
    replacement; subsets are independent of each other.
    """
    train = dataset.train_indices
    if not 1 <= k <= train.size:
        raise PlanError(f"k={k} outside 1..S_train={train.size}")
    if s is None:
        s = default_n_subsets(train.size, k)
    if s < 1:
        raise PlanError(f"plan would have s={s} subsets")
    subsets = np.empty((s, k), dtype=np.int64)
    for j in range(s):
        rng = substream(seed, "kshot-subset", j)
        subsets[j] = rng.choice(train, size=k, replace=False)
    return KShotPlan(k=k, s=s, subsets=subsets, seed=seed)


def min_viable_k(dataset: SpikeDataset, n_probe: int = 1000, seed: int = 0) -> int:
    """Smallest k with no silent k-out neuron in any of n_probe sampled subsets.

    Returns S_train when no smaller k qualifies.  A k-out neuron with no
    spikes in any train trial can never qualify and raises
    UnusableNeuronError.
    """
    train = dataset.train_indices
    kout = dataset.partition.k_out
    # per-trial spike totals per k-out neuron, shape (S_train, n_kout)
    totals = dataset.counts[train][:, :, kout].sum(axis=1).astype(np.int64)
    dead = np.flatnonzero(totals.sum(axis=0) == 0)
    if dead.size:
        raise UnusableNeuronError(
            f"k-out neurons {kout[dead].tolist()} have zero spikes across all train trials"
        )
    s_train = train.size
    for k in range(1, s_train):
        rng = substream(seed, "min-viable-k", k)
        # k smallest random keys per row = a uniform k-subset without replacement
        keys = rng.random((n_probe, s_train))
        idx = np.argpartition(keys, k - 1, axis=1)[:, :k]
        subset_totals = totals[idx].sum(axis=1)  # (n_probe, n_kout)
        if (subset_totals > 0).all():
            return k
    return s_train


def export_counts_csv(dataset: SpikeDataset, path: str) -> None:
    """Flat (trial, time, neuron, count) CSV for the plotting component."""
    s, t, n = dataset.counts.shape
    lines = ["trial,time,neuron,count"]
    flat = dataset.counts.reshape(-1)
    ti, tt, tn = np.meshgrid(np.arange(s), np.arange(t), np.arange(n), indexing="ij")
    for a, b, c, v in zip(ti.reshape(-1), tt.reshape(-1), tn.reshape(-1), flat):
        lines.append(f"{a},{b},{c},{v}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_dataset(dataset: SpikeDataset, path: str, with_csv: bool = False) -> None:
    """Write manifest.json plus counts.bin (or obs.bin for real data)."""
    os.makedirs(path, exist_ok=True)
    part = dataset.partition
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "S": dataset.n_trials,
        "T": dataset.n_time,
        "N": dataset.n_channels,
        "train_indices": dataset.train_indices.tolist(),
        "test_indices": dataset.test_indices.tolist(),
        "held_in": part.held_in.tolist(),
        "held_out": part.held_out.tolist(),
        "k_out": part.k_out.tolist(),
        "alias_kout": bool(part.alias_kout),
        "seed": int(dataset.seed),
        "real_valued": bool(dataset.real_valued),
    }
    dump_json(os.path.join(path, MANIFEST_NAME), manifest)
    if dataset.real_valued:
        payload = dataset.counts.astype("<f8").tobytes(order="C")
        atomic_write_bytes(os.path.join(path, OBS_NAME), payload)
    else:
        payload = dataset.counts.astype("<u4").tobytes(order="C")
        atomic_write_bytes(os.path.join(path, COUNTS_NAME), payload)
    if with_csv:
        export_counts_csv(dataset, os.path.join(path, CSV_NAME))


def load_dataset(path: str) -> SpikeDataset:
    """Inverse of save_dataset; bit-exact round trip."""
    mpath = os.path.join(path, MANIFEST_NAME)
    try:
        with open(mpath, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest at {mpath}: {exc}") from exc
    try:
        version = manifest["schema_version"]
        s, t, n = int(manifest["S"]), int(manifest["T"]), int(manifest["N"])
        real = bool(manifest.get("real_valued", False))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest missing required fields: {exc}") from exc
    if version != SCHEMA_VERSION:
        raise FormatError(f"unsupported schema_version {version}")
    binname = OBS_NAME if real else COUNTS_NAME
    dtype = "<f8" if real else "<u4"
    try:
        raw = np.fromfile(os.path.join(path, binname), dtype=dtype)
    except OSError as exc:
        raise FormatError(f"cannot read {binname}: {exc}") from exc
    if raw.size != s * t * n:
        raise FormatError(f"{binname} holds {raw.size} values, manifest declares {s * t * n}")
    counts = raw.reshape(s, t, n)
    part = NeuronPartition(
        held_in=np.asarray(manifest["held_in"]),
        held_out=np.asarray(manifest["held_out"]),
        k_out=np.asarray(manifest["k_out"]),
        alias_kout=bool(manifest["alias_kout"]),
    )
    return SpikeDataset(
        counts=counts,
        train_indices=np.asarray(manifest["train_indices"]),
        test_indices=np.asarray(manifest["test_indices"]),
        partition=part,
        seed=int(manifest["seed"]),
        real_valued=real,
    )
