"""Seeded synthetic multi-camera person datasets.

Each identity k has a latent center ``mu_k``; each camera c applies a fixed
affine distortion ``x = A_c mu_k + b_c + noise`` with ``A_c = I + s R_c`` and
``b_c = s beta_c``.  The distortions of all cameras live in one shared
low-rank "nuisance" subspace, so a camera-invariant linear read-out exists
but has to be learned.

Text format (one row per sample, tab separated, with a header row)::

    split  person_id  camera_id  x0  x1  ...  x{D-1}

``split`` is one of ``train``, ``query``, ``gallery``; floats are written
with ``repr`` so files round-trip exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class SynthConfig:
    n_identities_train: int = 30
    n_identities_test: int = 30
    samples_per_identity_per_camera: int = 4
    n_cameras: int = 6
    input_dim: int = 32
    camera_shift_scale: float = 1.0
    noise_sigma: float = 0.3
    shift_rank: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_identities_train", "n_identities_test", "samples_per_identity_per_camera", "input_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.n_cameras < 2:
            raise ValueError("n_cameras must be >= 2 so a camera split exists")
        if self.camera_shift_scale < 0 or self.noise_sigma < 0:
            raise ValueError("camera_shift_scale and noise_sigma must be nonnegative")
        if not 1 <= self.shift_rank <= self.input_dim:
            raise ValueError("shift_rank must lie in [1, input_dim]")

    @property
    def n_train(self) -> int:
        return self.n_identities_train * self.samples_per_identity_per_camera * self.n_cameras

    @property
    def n_test_per_split(self) -> int:
        return self.n_identities_test * self.n_cameras


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    person_id: int
    camera_id: int


@dataclass(frozen=True, eq=False)
class Split:
    """Array-backed list of samples."""

    X: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64).reshape(len(self.person_ids), -1))
        object.__setattr__(self, "person_ids", np.asarray(self.person_ids, dtype=np.int64))
        object.__setattr__(self, "camera_ids", np.asarray(self.camera_ids, dtype=np.int64))
        if not np.isfinite(self.X).all():
            raise ValueError("sample inputs must be finite")

    def __len__(self) -> int:
        return len(self.person_ids)

    def __iter__(self) -> Iterator[Sample]:
        for x, p, c in zip(self.X, self.person_ids, self.camera_ids):
            yield Sample(x, int(p), int(c))

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, Split)
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.person_ids, other.person_ids)
            and np.array_equal(self.camera_ids, other.camera_ids)
        )

    def subset(self, idx) -> Split:
        return Split(self.X[idx], self.person_ids[idx], self.camera_ids[idx])


@dataclass(frozen=True, eq=False)
class SynthDataset:
    train: Split
    query: Split
    gallery: Split
    n_cameras: int

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, SynthDataset)
            and self.n_cameras == other.n_cameras
            and all(getattr(self, s) == getattr(other, s) for s in SPLITS)
        )

    @property
    def input_dim(self) -> int:
        return self.train.X.shape[1]


# Distortion magnitude at camera_shift_scale=1.0; picked so that the unit
# scale gives inter-camera positive distances about 3x intra-camera ones
# while clustering still recovers most identities.
SHIFT_UNIT = 0.75


def _camera_maps(cfg: SynthConfig, rng: np.random.Generator):
    d, r, s = cfg.input_dim, cfg.shift_rank, SHIFT_UNIT * cfg.camera_shift_scale
    basis, _ = np.linalg.qr(rng.normal(size=(d, r)))
    maps = []
    for _ in range(cfg.n_cameras):
        mix = rng.normal(size=(d, r)) / np.sqrt(r)
        bias = rng.normal(size=r)
        A = np.eye(d) + s * basis @ mix.T
        b = s * basis @ bias
        maps.append((A, b))
    return maps


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    maps = _camera_maps(cfg, rng)
    n_ids = cfg.n_identities_train + cfg.n_identities_test
    centers = rng.normal(size=(n_ids, cfg.input_dim))

    def draw(person_ids, camera_ids):
        X = np.empty((len(person_ids), cfg.input_dim))
        for row, (p, c) in enumerate(zip(person_ids, camera_ids)):
            A, b = maps[c]
            X[row] = A @ centers[p] + b
        if cfg.noise_sigma > 0:
            X += rng.normal(scale=cfg.noise_sigma, size=X.shape)
        return Split(X, person_ids, camera_ids)

    m = cfg.samples_per_identity_per_camera
    cams = np.arange(cfg.n_cameras)
    train_ids = np.repeat(np.arange(cfg.n_identities_train), cfg.n_cameras * m)
    train_cams = np.tile(np.repeat(cams, m), cfg.n_identities_train)
    train = draw(train_ids, train_cams)

    test_ids = np.repeat(np.arange(cfg.n_identities_train, n_ids), cfg.n_cameras)
    test_cams = np.tile(cams, cfg.n_identities_test)
    gallery = draw(test_ids, test_cams)
    query = draw(test_ids, test_cams)
    return SynthDataset(train, query, gallery, cfg.n_cameras)


def camera_histogram(ds: SynthDataset) -> np.ndarray:
    return np.bincount(ds.train.camera_ids, minlength=ds.n_cameras)


def positive_pair_gap(split: Split) -> tuple[float, float]:
    """Mean raw-input distance over same-identity pairs: (intra-camera, inter-camera)."""
    intra, inter = [], []
    for pid in np.unique(split.person_ids):
        idx = np.flatnonzero(split.person_ids == pid)
        X, cams = split.X[idx], split.camera_ids[idx]
        iu, ju = np.triu_indices(len(idx), k=1)
        dist = np.sqrt(((X[iu] - X[ju]) ** 2).sum(axis=1))
        same = cams[iu] == cams[ju]
        intra.append(dist[same])
        inter.append(dist[~same])
    return float(np.concatenate(intra).mean()), float(np.concatenate(inter).mean())


# --- text format ------------------------------------------------------------


def dumps(ds: SynthDataset) -> str:
    buf = io.StringIO()
    d = ds.input_dim
    buf.write("\t".join(["split", "person_id", "camera_id", *(f"x{i}" for i in range(d))]) + "\n")
    buf.write(f"# n_cameras={ds.n_cameras}\n")
    for name in SPLITS:
        split = getattr(ds, name)
        for x, p, c in zip(split.X, split.person_ids, split.camera_ids):
            buf.write("\t".join([name, str(int(p)), str(int(c)), *(repr(float(v)) for v in x)]) + "\n")
    return buf.getvalue()


def loads(text: str) -> SynthDataset:
    lines = text.splitlines()
    header = lines[0].split("\t")
    if header[:3] != ["split", "person_id", "camera_id"]:
        raise ValueError("not a dataset file: bad header")
    n_cameras = None
    rows: dict[str, list] = {s: [] for s in SPLITS}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key == "n_cameras":
                n_cameras = int(val)
            continue
        parts = line.split("\t")
        if parts[0] not in rows or len(parts) != len(header):
            raise ValueError(f"malformed dataset row at line {lineno}")
        rows[parts[0]].append((int(parts[1]), int(parts[2]), [float(v) for v in parts[3:]]))
    splits = {}
    for name, items in rows.items():
        d = len(header) - 3
        splits[name] = Split(
            np.array([r[2] for r in items], dtype=np.float64).reshape(len(items), d),
            np.array([r[0] for r in items], dtype=np.int64),
            np.array([r[1] for r in items], dtype=np.int64),
        )
    if n_cameras is None:
        n_cameras = int(max(int(s.camera_ids.max(initial=-1)) for s in splits.values())) + 1
    return SynthDataset(splits["train"], splits["query"], splits["gallery"], n_cameras)


def save(ds: SynthDataset, path: str | Path) -> None:
    Path(path).write_text(dumps(ds))


def load(path: str | Path) -> SynthDataset:
    return loads(Path(path).read_text())
