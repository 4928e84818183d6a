"""Camera-aware meta-optimization and the full mining/training loop.

One epoch: encode every training sample, mine pseudo-labels, split the
cameras into meta-train and meta-test sides, then walk paired mini-batches.
Each step takes an inner SGD step on the meta-train batch, evaluates the
meta-test batch at the temporary parameters, and updates the encoder with
the gradient of the summed loss.  Memory rows of both batches are refreshed
with the features from those forward passes.

Randomness is drawn from generators keyed on ``(seed, phase, epoch)`` so a
run resumed from a checkpoint replays exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .clustering import MiningParams, NoInliersError, PseudoLabeling, inject_label_noise, mine_labels
from .datagen import SynthDataset
from .diffcore import Layout, ParamVector
from .encoder import EncoderConfig, encode_batch, forward, init_params
from .evaluation import clustering_quality, evaluate_features
from .memloss import FeatureMemory, LossConfig, build_centroids, combined_loss

META_MODES = ("full", "first_order", "off")
_WARMUP, _EPOCH = 1, 2


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 3.5e-4  # outer learning rate
    inner_lr: float | None = None  # inner SGD step; None: same as gamma
    batch_size: int = 64  # n_b, capped at |train| // 8
    tau: float = 0.05
    alpha: float = 0.2  # memory momentum
    n_mtr: int | None = None  # meta-train cameras; None: half of the cameras
    epochs: int = 40
    warmup_epochs: int = 5
    meta_mode: str = "full"  # full | first_order | off
    dsce_on: bool = True
    outliers_on: bool = True
    label_noise: float = 0.0  # symmetric noise injected into mined labels
    dce_weight: float = 1.0
    dsce_weight: float = 1.0
    optimizer: str = "adam"  # adam | sgd
    reencode_memory: bool = False  # refresh memory from re-encoded features after the update
    eval_each_epoch: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.inner_lr is not None and self.inner_lr < 0:
            raise ValueError("inner_lr must be nonnegative")
        if self.meta_mode not in META_MODES:
            raise ValueError(f"meta_mode must be one of {META_MODES}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be adam or sgd")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("batch_size must be >= 1 and epoch counts nonnegative")
        if not 0 <= self.label_noise < 1:
            raise ValueError("label_noise must lie in [0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        LossConfig(self.tau)

    @property
    def inner_rate(self) -> float:
        return self.gamma if self.inner_lr is None else self.inner_lr

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.dce_weight, self.dsce_weight if self.dsce_on else 0.0)

    def resolve_n_mtr(self, n_cameras: int) -> int:
        n = self.n_mtr if self.n_mtr is not None else max(1, n_cameras // 2)
        if self.meta_mode != "off" and not 1 <= n <= n_cameras - 1:
            raise ValueError(f"n_mtr must lie in [1, {n_cameras - 1}], got {n}")
        return min(max(n, 1), n_cameras - 1)

    def resolve_batch_size(self, n_train: int) -> int:
        return max(1, min(self.batch_size, n_train // 8))


# --- optimizers ---------------------------------------------------------------


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: ParamVector, g: ParamVector) -> ParamVector:
        return theta.with_values(theta.values - self.lr * g.values)

    def state_dict(self) -> dict:
        return {"kind": "sgd", "lr": self.lr}


class Adam:
    def __init__(self, lr: float, size: int, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, tuple(betas), eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: ParamVector, g: ParamVector) -> ParamVector:
        b1, b2 = self.betas
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * g.values
        self.v = b2 * self.v + (1 - b2) * g.values * g.values
        m_hat = self.m / (1 - b1**self.t)
        v_hat = self.v / (1 - b2**self.t)
        return theta.with_values(theta.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}


def make_optimizer(cfg: TrainConfig, size: int):
    return Adam(cfg.gamma, size) if cfg.optimizer == "adam" else SGD(cfg.gamma)


def optimizer_from_state(d: dict):
    if d["kind"] == "sgd":
        return SGD(d["lr"])
    opt = Adam(d["lr"], len(d["m"]), d["betas"], d["eps"])
    opt.t, opt.m, opt.v = int(d["t"]), np.array(d["m"]), np.array(d["v"])
    return opt


# --- state --------------------------------------------------------------------


@dataclass
class TrainState:
    theta: ParamVector
    memory: FeatureMemory
    optimizer: object
    epoch: int = 0
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class MetaSplit:
    meta_train_cams: tuple[int, ...]
    meta_test_cams: tuple[int, ...]
    meta_train_idx: np.ndarray
    meta_test_idx: np.ndarray


def split_by_camera(camera_ids, n_cameras: int, n_mtr: int, rng: np.random.Generator,
                    indices=None) -> MetaSplit:
    """Uniformly choose ``n_mtr`` meta-train cameras; the rest are meta-test.

    ``indices`` restricts which samples are routed (default: all)."""
    if not 1 <= n_mtr <= n_cameras - 1:
        raise ValueError(f"n_mtr must lie in [1, {n_cameras - 1}], got {n_mtr}")
    camera_ids = np.asarray(camera_ids)
    idx = np.arange(len(camera_ids)) if indices is None else np.asarray(indices, dtype=np.int64)
    train_cams = np.sort(rng.choice(n_cameras, size=n_mtr, replace=False))
    on_train = np.isin(camera_ids[idx], train_cams)
    test_cams = np.setdiff1d(np.arange(n_cameras), train_cams)
    return MetaSplit(tuple(int(c) for c in train_cams), tuple(int(c) for c in test_cams),
                     idx[on_train], idx[~on_train])


def pair_batches(tr_idx, te_idx, nb: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Mini-batch pairs until both sides are enumerated.

    The larger side is shuffled once and chunked; the smaller side is
    reshuffled and cycled to match each chunk's size."""
    tr_idx, te_idx = np.asarray(tr_idx), np.asarray(te_idx)
    if len(tr_idx) == 0 or len(te_idx) == 0:
        only = rng.permutation(tr_idx if len(tr_idx) else te_idx)
        empty = np.zeros(0, dtype=np.int64)
        chunks = [only[s : s + nb] for s in range(0, len(only), nb)]
        return [(c, empty) if len(tr_idx) else (empty, c) for c in chunks]
    swap = len(te_idx) > len(tr_idx)
    big, small = (te_idx, tr_idx) if swap else (tr_idx, te_idx)
    big = rng.permutation(big)
    steps = math.ceil(len(big) / nb)
    stream = np.concatenate([rng.permutation(small) for _ in range(math.ceil(len(big) / len(small)))])
    pairs = []
    for s in range(steps):
        b = big[s * nb : (s + 1) * nb]
        o = stream[s * nb : s * nb + len(b)]
        pairs.append((o, b) if swap else (b, o))
    return pairs


# --- steps --------------------------------------------------------------------


def meta_update(theta: ParamVector, mtr_fn, mte_fn, cfg: TrainConfig, optimizer, *, has_aux=False):
    """One meta-update of ``theta`` from two loss closures.  Returns
    ``(new_theta, GradResult)``."""
    mode = "exact" if cfg.meta_mode == "full" else "first_order"
    res = dc.grad_through_update(mtr_fn, mte_fn, theta, cfg.inner_rate, mode, has_aux=has_aux)
    return optimizer.step(theta, res.gradient), res


def _batch_loss(X, labels, C, loss_cfg: LossConfig, enc: EncoderConfig):
    def fn(blocks):
        F = forward(blocks, X, enc)
        terms = combined_loss(F, labels, C, loss_cfg)
        return dc.mean(terms), (F.value, terms.value)
    return fn


def meta_step(state: TrainState, X: np.ndarray, m_tr, m_te, labeling: PseudoLabeling,
              cfg: TrainConfig, enc: EncoderConfig, members=None) -> tuple[float, float]:
    """Apply one step in place; returns (meta-train loss, meta-test loss)."""
    C = build_centroids(state.memory, labeling, members)
    loss_cfg = cfg.loss_config()
    labels = labeling.labels
    m_tr, m_te = np.asarray(m_tr, dtype=np.int64), np.asarray(m_te, dtype=np.int64)
    if cfg.meta_mode == "off" or len(m_tr) == 0 or len(m_te) == 0:
        idx = np.concatenate([m_tr, m_te])
        res = dc.grad(_batch_loss(X[idx], labels[idx], C, loss_cfg, enc), state.theta, has_aux=True)
        theta = state.optimizer.step(state.theta, res.gradient)
        feats, terms = res.aux
        n = len(m_tr)
        f_tr, f_te = feats[:n], feats[n:]
        l_tr = float(terms[:n].mean()) if n else math.nan
        l_te = float(terms[n:].mean()) if len(m_te) else math.nan
    else:
        theta, res = meta_update(
            state.theta,
            _batch_loss(X[m_tr], labels[m_tr], C, loss_cfg, enc),
            _batch_loss(X[m_te], labels[m_te], C, loss_cfg, enc),
            cfg, state.optimizer, has_aux=True,
        )
        (f_tr, _), (f_te, _) = res.aux
        l_tr, l_te = res.parts["mtr"], res.parts["mte"]
    if not np.isfinite(theta.values).all():
        raise dc.NonFiniteError("parameters became non-finite after the update", phase="update")
    state.theta = theta
    if cfg.reencode_memory:
        f_tr, f_te = encode_batch(theta, X[m_tr], enc), encode_batch(theta, X[m_te], enc)
    state.memory.update_rows(m_tr, f_tr)
    state.memory.update_rows(m_te, f_te)
    return l_tr, l_te


def warmup_init(dataset: SynthDataset, cfg: TrainConfig, enc: EncoderConfig) -> TrainState:
    """Seeded init, then exemplar-level training (every sample its own class,
    the memory as classifier), then fill the memory with current features."""
    X = dataset.train.X
    n = len(X)
    theta = init_params(enc, cfg.seed)
    memory = FeatureMemory(encode_batch(theta, X, enc), cfg.alpha)
    state = TrainState(theta, memory, make_optimizer(cfg, len(theta)))
    if cfg.warmup_epochs:
        nb = cfg.resolve_batch_size(n)
        exemplars = PseudoLabeling.exemplars(n)
        plain = replace(cfg, meta_mode="off")
        for e in range(cfg.warmup_epochs):
            order = np.random.default_rng((cfg.seed, _WARMUP, e)).permutation(n)
            for s in range(0, n, nb):
                try:
                    meta_step(state, X, order[s : s + nb], [], exemplars, plain, enc)
                except dc.NonFiniteError as exc:
                    raise TrainingDiverged(f"warm-up: {exc}", -1) from exc
    state.memory = FeatureMemory(encode_batch(state.theta, X, enc), cfg.alpha)
    state.optimizer = make_optimizer(cfg, len(state.theta))
    return state


def run_epoch(state: TrainState, dataset: SynthDataset, cfg: TrainConfig, enc: EncoderConfig,
              mining: MiningParams) -> dict:
    X = dataset.train.X
    e = state.epoch
    fallback = False
    try:
        labeling = mine_labels(encode_batch(state.theta, X, enc), mining)
    except NoInliersError:
        labeling = PseudoLabeling.exemplars(len(X))
        fallback = True
    rng = np.random.default_rng((cfg.seed, _EPOCH, e))
    labeling = inject_label_noise(labeling, cfg.label_noise, rng)
    members = None if cfg.outliers_on else labeling.inlier_mask
    included = np.arange(len(X)) if cfg.outliers_on else np.flatnonzero(labeling.inlier_mask)
    split = split_by_camera(dataset.train.camera_ids, dataset.n_cameras,
                            cfg.resolve_n_mtr(dataset.n_cameras), rng, included)
    nb = cfg.resolve_batch_size(len(X))
    l_tr, l_te = [], []
    for m_tr, m_te in pair_batches(split.meta_train_idx, split.meta_test_idx, nb, rng):
        try:
            a, b = meta_step(state, X, m_tr, m_te, labeling, cfg, enc, members)
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(str(exc), e) from exc
        l_tr.append(a)
        l_te.append(b)
    record = {
        "epoch": e,
        "loss_mtr": _nanmean(l_tr),
        "loss_mte": _nanmean(l_te),
        "n_clusters": int(labeling.n_clusters),
        "inlier_fraction": labeling.inlier_fraction,
        "n_steps": len(l_tr),
        "fallback_exemplar": fallback,
        "meta_train_cams": list(split.meta_train_cams),
    }
    if cfg.eval_each_epoch:
        record.update(evaluate_state(state.theta, dataset, enc))
        record["ari"], record["nmi"] = clustering_quality(labeling, dataset.train.person_ids)
    return record


def _nanmean(xs) -> float | None:
    vals = [x for x in xs if x is not None and not math.isnan(x)]
    return float(np.mean(vals)) if vals else None


def evaluate_state(theta: ParamVector, dataset: SynthDataset, enc: EncoderConfig) -> dict:
    report = evaluate_features(encode_batch(theta, dataset.query.X, enc),
                               encode_batch(theta, dataset.gallery.X, enc), dataset)
    return {"mAP": report.mAP, "rank1": report.cmc[1], "rank5": report.cmc[5]}


def train(dataset: SynthDataset, cfg: TrainConfig, enc: EncoderConfig | None = None,
          mining: MiningParams | None = None, *, state: TrainState | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> tuple[ParamVector, TrainState]:
    enc = enc or EncoderConfig(input_dim=dataset.input_dim)
    mining = mining or MiningParams()
    if enc.input_dim != dataset.input_dim:
        raise ValueError("encoder input_dim does not match the dataset")
    cfg.resolve_n_mtr(dataset.n_cameras)
    if state is None:
        state = warmup_init(dataset, cfg, enc)
    while state.epoch < cfg.epochs:
        state.history.append(run_epoch(state, dataset, cfg, enc, mining))
        state.epoch += 1
        if on_epoch is not None:
            on_epoch(state)
    return state.theta, state


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_FORMAT = "metacam-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_dict(state: TrainState) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": [[s.name, list(s.shape)] for s in state.theta.layout.segments],
        "theta": state.theta.values.tolist(),
        "memory": {"alpha": state.memory.alpha, "rows": state.memory.W.tolist()},
        "epoch": state.epoch,
        "optimizer": state.optimizer.state_dict(),
        "history": state.history,
    }


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(state)) + "\n")


def load_checkpoint(path: str | Path) -> TrainState:
    d = json.loads(Path(path).read_text())
    if d.get("format") != CHECKPOINT_FORMAT or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    layout = Layout.from_shapes((name, tuple(shape)) for name, shape in d["layout"])
    theta = ParamVector(np.array(d["theta"], dtype=np.float64), layout)
    memory = FeatureMemory(np.array(d["memory"]["rows"], dtype=np.float64), d["memory"]["alpha"])
    return TrainState(theta, memory, optimizer_from_state(d["optimizer"]), int(d["epoch"]), d["history"])


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
