"""CNN regressor mapping a microstructure to (n_F, K11), used in place of LBM for fast evaluation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffcore import tensor as T
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .diffcore.nn import Conv, Dense, MaxPool, Module
from .diffcore.optim import Adam, ReduceLROnPlateau
from .diffcore.tensor import Tensor, no_grad
from .errors import DivergenceError, ModelStateError, ShapeError
from .grid import GrayVolume, VoxelGrid
from .metrics import MinMaxScaler
from .pvae import split_indices

EVAL_COLUMNS = ["sample_id", "true_nF", "pred_nF", "true_K11", "pred_K11"]
MIN_SAMPLES = 100


@dataclass
class SurrogateConfig:
    input_shape: tuple = (32, 32)
    base_channels: int = 8
    kernels: tuple = (3, 3, 5, 7)
    dense: tuple = (64, 32)
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.kernels = tuple(int(k) for k in self.kernels)
        self.dense = tuple(int(d) for d in self.dense)
        if len(self.input_shape) not in (2, 3):
            raise ValueError("input_shape must be 2D or 3D")

    @property
    def mode(self) -> str:
        return f"{len(self.input_shape)}d"


class Network(Module):
    def __init__(self, cfg: SurrogateConfig, rng):
        nd = len(cfg.input_shape)
        self.blocks = []
        c_in, size = 1, cfg.input_shape
        for i, k in enumerate(cfg.kernels):
            c = cfg.base_channels * 2**i
            self.blocks.append(Conv(c_in, c, k, rng, padding="same", nd=nd))
            c_in = c
            size = tuple(n // 2 for n in size)
        if min(size) < 1:
            raise ValueError(f"input {cfg.input_shape} is too small for {len(cfg.kernels)} pooling stages")
        self.pool = MaxPool(2)
        widths = (c_in * math.prod(size),) + cfg.dense
        self.hidden = [Dense(a, b, rng, activation="relu") for a, b in zip(widths[:-1], widths[1:])]
        self.out = Dense(widths[-1], 2, rng)

    def forward(self, x):
        for conv in self.blocks:
            x = self.pool(conv(x))
        x = T.flatten(x)
        for layer in self.hidden:
            x = layer(x)
        return self.out(x)


class SurrogateModel:
    def __init__(self, cfg: SurrogateConfig | None = None):
        self.cfg = cfg or SurrogateConfig()
        self.net = Network(self.cfg, np.random.default_rng(self.cfg.seed))
        self.scaler = MinMaxScaler()
        self.epoch = 0
        self.meta = {}

    def as_input(self, x) -> np.ndarray:
        shape = self.cfg.input_shape
        if isinstance(x, (VoxelGrid, GrayVolume)):
            arr = x.voxels.astype(np.float64) if isinstance(x, VoxelGrid) else x.values
            if len(shape) == 2:
                # 2D mode reads the first (y, z) slice of an x-extruded volume
                if arr.shape[1:] != shape:
                    raise ShapeError(f"expected (y, z) = {shape}, got grid {arr.shape}")
                return arr[:1]
            if arr.shape != shape:
                raise ShapeError(f"expected grid {shape}, got {arr.shape}")
            return arr[None]
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape == shape:
            return arr[None]
        if arr.shape[1:] != shape:
            raise ShapeError(f"expected (B, {shape}), got {arr.shape}")
        return arr

    def forward_normalized(self, xb: np.ndarray, batch: int = 128) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(xb), batch):
                out.append(self.net(Tensor(xb[i : i + batch, None])).data)
        return np.concatenate(out)

    def predict_batch(self, x) -> np.ndarray:
        """(n, 2) de-normalized (n_F, K11) predictions."""
        if not self.scaler.fitted:
            raise ModelStateError("surrogate has no normalization bounds; train or load it first")
        return self.scaler.inverse(self.forward_normalized(self.as_input(x)))

    def save(self, path) -> None:
        header = {
            "kind": "surrogate",
            "mode": self.cfg.mode,
            "config": asdict(self.cfg),
            "input_dims": list(self.cfg.input_shape),
            "bounds": self.scaler.to_dict() if self.scaler.fitted else None,
            "epoch": self.epoch,
            "meta": self.meta,
        }
        save_checkpoint(path, self.net.state_dict(), header)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        header, params = load_checkpoint(path)
        if header.get("kind") != "surrogate":
            raise ModelStateError(f"{path} is not a surrogate checkpoint")
        model = cls(SurrogateConfig(**header["config"]))
        model.net.load_state_dict(params)
        model.scaler = MinMaxScaler.from_dict(header.get("bounds"))
        model.epoch = header.get("epoch", 0)
        model.meta = header.get("meta", {})
        return model


def predict(model: SurrogateModel, grid) -> tuple[float, float]:
    p = model.predict_batch(grid)[0]
    return float(p[0]), float(p[1])


@dataclass
class SurrogateTrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    epochs: int = 100
    early_stop_patience: int = 20
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    min_samples: int = MIN_SAMPLES


@dataclass
class SurrogateHistory:
    rows: list = field(default_factory=list)
    best_val: float = math.inf
    split: tuple = ()


def _mse(model: SurrogateModel, xb, yb) -> Tensor:
    d = model.net(Tensor(xb[:, None])) - yb
    return T.mean(d * d)


def train_surrogate(model: SurrogateModel, x, targets, cfg: SurrogateTrainConfig | None = None, split=None):
    """Minimize the mean squared error on min-max normalized (n_F, K11).

    Keeps the best-validation weights; halves the learning rate on plateau
    and stops early when validation stalls.
    """
    cfg = cfg or SurrogateTrainConfig()
    x = model.as_input(x)
    y = np.asarray(targets, dtype=np.float64).reshape(len(x), 2)
    if len(x) < cfg.min_samples:
        raise ValueError(f"need at least {cfg.min_samples} labeled samples, got {len(x)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("labels must be finite")
    split = split or split_indices(len(x), cfg.split, cfg.seed)
    tr, va = split[0], split[1]
    model.scaler = MinMaxScaler().fit(y[tr])
    yn = model.scaler.transform(y)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.net.parameters(), lr=cfg.lr)
    sched = ReduceLROnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience)
    hist = SurrogateHistory(split=split)
    best_state, bad = model.net.state_dict(), 0

    def val_loss():
        pred = model.forward_normalized(x[va])
        return float(np.mean((pred - yn[va]) ** 2))

    hist.best_val = val_loss()
    hist.rows.append({"epoch": 0, "train_mse": math.nan, "val_mse": hist.best_val, "lr": opt.lr})
    for ep in range(1, cfg.epochs + 1):
        order = rng.permutation(tr)
        total = 0.0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            loss = _mse(model, x[idx], yn[idx])
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite surrogate loss at epoch {ep}", step=ep)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        v = val_loss()
        model.epoch = ep
        hist.rows.append({"epoch": ep, "train_mse": total / len(order), "val_mse": v, "lr": opt.lr})
        if v < hist.best_val:
            hist.best_val, best_state, bad = v, model.net.state_dict(), 0
        else:
            bad += 1
            if bad > cfg.early_stop_patience:
                break
        sched.step(v)
    model.net.load_state_dict(best_state)
    return model, hist


def evaluation_csv(ids, truth, pred) -> str:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for sid, t, p in zip(ids, truth, pred):
        w.writerow([sid, repr(float(t[0])), repr(float(p[0])), repr(float(t[1])), repr(float(p[1]))])
    return buf.getvalue()
