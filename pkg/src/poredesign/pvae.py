"""Property-variational autoencoder: model, loss, staged training and latent analytics.

In 2D mode the network sees one (y, z) slice of an x-extruded volume and
decodes back to a volume by repeating the slice along x.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import tensor as T
from .diffcore.checkpoint import load_checkpoint, save_checkpoint
from .diffcore.nn import Conv, ConvTranspose, Dense, Module
from .diffcore.optim import Adam, ReduceLROnPlateau
from .diffcore.tensor import Tensor, no_grad
from .errors import DivergenceError, ModelStateError, ShapeError
from .fileio import atomic_write_text
from .grid import GrayVolume, VoxelGrid
from .metrics import MinMaxScaler

LOGVAR_CLAMP = 10.0
LOG_COLUMNS = ["epoch", "split", "recon", "kl", "prop", "total", "lr"]
STAGES = ("vae", "regressor", "joint")


@dataclass
class PVAEConfig:
    input_shape: tuple = (32, 32)
    latent_dim: int = 32
    steepness: float = 5.0
    beta: float = 1.0
    lam: float = 10.0
    # (channels, kernel, stride, padding) per encoder stage; the decoder mirrors them
    stages: tuple = ((6, 3, 2, "same"), (6, 3, 2, "same"), (24, 3, 1, "valid"), (16, 2, 2, "valid"))
    regressor_hidden: tuple = (16, 16, 4)
    property_names: tuple = ("n_F", "K11")
    depth: int | None = None
    zero_heads: bool = False
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.stages = tuple((int(c), int(k), int(s), p) for c, k, s, p in self.stages)
        self.regressor_hidden = tuple(int(h) for h in self.regressor_hidden)
        self.property_names = tuple(self.property_names)
        if len(self.input_shape) not in (2, 3):
            raise ValueError("input_shape must be 2D or 3D")
        if self.latent_dim < 1 or self.steepness <= 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("latent_dim must be positive, steepness > 0, beta and lam >= 0")

    @property
    def nd(self) -> int:
        return len(self.input_shape)

    @property
    def n_props(self) -> int:
        return len(self.property_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        return d


@dataclass
class LatentCode:
    mu: np.ndarray
    sigma: np.ndarray
    z: np.ndarray | None = None
    eps: np.ndarray | None = None

    @property
    def logvar(self) -> np.ndarray:
        return 2.0 * np.log(self.sigma)


def _stage_sizes(shape, stages):
    sizes = [tuple(shape)]
    for _, k, s, p in stages:
        nxt = []
        for n in sizes[-1]:
            lo, hi = T.resolve_padding(n, k, s, p)
            m = T.conv_output_size(n, k, s, lo, hi)
            if m < 1:
                raise ValueError(f"input {shape} is too small for the encoder stages")
            nxt.append(m)
        sizes.append(tuple(nxt))
    return sizes


class Encoder(Module):
    def __init__(self, cfg: PVAEConfig, rng):
        nd = cfg.nd
        self.convs = []
        c_in = 1
        for c, k, s, p in cfg.stages:
            self.convs.append(Conv(c_in, c, k, rng, stride=s, padding=p, nd=nd))
            c_in = c
        flat = c_in * math.prod(_stage_sizes(cfg.input_shape, cfg.stages)[-1])
        self.head = Dense(flat, 2 * cfg.latent_dim, rng)
        if cfg.zero_heads:
            self.head.w.data[:] = 0.0

    def forward(self, x):
        for conv in self.convs:
            x = conv(x)
        return self.head(T.flatten(x))


class Decoder(Module):
    def __init__(self, cfg: PVAEConfig, rng):
        nd = cfg.nd
        sizes = _stage_sizes(cfg.input_shape, cfg.stages)
        chans = [c for c, *_ in cfg.stages]
        self.top = (chans[-1],) + sizes[-1]
        self.dense = Dense(cfg.latent_dim, math.prod(self.top), rng, activation="relu")
        self.deconvs = []
        for i in range(len(cfg.stages) - 1, -1, -1):
            _, k, s, p = cfg.stages[i]
            c_in = chans[i] if i == len(cfg.stages) - 1 else chans[i + 1]
            self.deconvs.append(
                ConvTranspose(c_in, chans[i], k, rng, stride=s, padding=p, nd=nd, output_size=sizes[i])
            )
        self.out = ConvTranspose(chans[0], 1, 3, rng, stride=1, padding="same", activation=None, nd=nd)

    def forward(self, z):
        h = T.reshape(self.dense(z), (z.shape[0],) + self.top)
        for layer in self.deconvs:
            h = layer(h)
        # logits; the output activation is SteepSigmoid(a; k)
        return T.reshape(self.out(h), (z.shape[0],) + h.shape[2:])


class Regressor(Module):
    def __init__(self, cfg: PVAEConfig, rng):
        widths = (cfg.latent_dim,) + cfg.regressor_hidden + (cfg.n_props,)
        self.layers = [Dense(a, b, rng, activation="relu") for a, b in zip(widths[:-1], widths[1:])]
        # start the ReLU output head inside the normalized target range
        self.layers[-1].b.data[:] = 0.5

    def forward(self, mu):
        for layer in self.layers:
            mu = layer(mu)
        return mu


class PVAE:
    def __init__(self, cfg: PVAEConfig | None = None):
        self.cfg = cfg or PVAEConfig()
        rng = np.random.default_rng(self.cfg.seed)
        self.encoder = Encoder(self.cfg, rng)
        self.decoder = Decoder(self.cfg, rng)
        self.regressor = Regressor(self.cfg, rng)
        self.scaler = MinMaxScaler()
        self.stage = None
        self.epoch = 0
        self.meta = {}

    # input handling

    def as_input(self, x) -> np.ndarray:
        """Batch array (B, *input_shape) from a grid, gray volume or array."""
        if isinstance(x, VoxelGrid):
            arr = x.voxels.astype(np.float64)
        elif isinstance(x, GrayVolume):
            arr = x.values
        else:
            arr = np.asarray(x, dtype=np.float64)
        shape = self.cfg.input_shape
        if isinstance(x, (VoxelGrid, GrayVolume)):
            if self.cfg.nd == 2:
                if arr.shape[1:] != shape:
                    raise ShapeError(f"expected (y, z) = {shape}, got grid {arr.shape}")
                arr = arr[0]
            elif arr.shape != shape:
                raise ShapeError(f"expected grid {shape}, got {arr.shape}")
            return arr[None]
        if arr.shape == shape:
            return arr[None]
        if arr.shape[1:] != shape:
            raise ShapeError(f"expected (B, {shape}), got {arr.shape}")
        return arr

    def _mu_logvar(self, xb: np.ndarray):
        h = self.encoder(Tensor(xb[:, None]))
        n = self.cfg.latent_dim
        return h[:, :n], T.clip(h[:, n:], -LOGVAR_CLAMP, LOGVAR_CLAMP)

    def _check_z(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        z2 = z[None] if z.ndim == 1 else z
        if z2.ndim != 2 or z2.shape[1] != self.cfg.latent_dim:
            raise ShapeError(f"latent vectors must have length {self.cfg.latent_dim}, got shape {z.shape}")
        return z2

    # public evaluation API

    def encode_batch(self, x, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
        xb = self.as_input(x)
        mus, lvs = [], []
        with no_grad():
            for i in range(0, len(xb), batch):
                mu, lv = self._mu_logvar(xb[i : i + batch])
                mus.append(mu.data)
                lvs.append(lv.data)
        return np.concatenate(mus), np.exp(0.5 * np.concatenate(lvs))

    def encode(self, x) -> LatentCode:
        mu, sigma = self.encode_batch(x)
        return LatentCode(mu[0], sigma[0])

    def decode_batch(self, z, batch: int = 64) -> np.ndarray:
        z2 = self._check_z(z)
        out = []
        with no_grad():
            for i in range(0, len(z2), batch):
                a = self.decoder(Tensor(z2[i : i + batch]))
                out.append(T._sigmoid(self.cfg.steepness * a.data))
        return np.concatenate(out)

    def decode(self, z) -> GrayVolume:
        img = self.decode_batch(z)[0]
        if self.cfg.nd == 2:
            depth = self.cfg.depth or self.cfg.input_shape[0]
            img = np.broadcast_to(img[None], (depth,) + img.shape)
        return GrayVolume(np.array(img))

    def regress_normalized(self, mu) -> np.ndarray:
        with no_grad():
            return self.regressor(Tensor(self._check_z(mu))).data

    def regress(self, mu) -> np.ndarray:
        """De-normalized properties from latent means; 1D in, 1D out."""
        if not self.scaler.fitted:
            raise ModelStateError("model has no property normalization bounds")
        mu = np.asarray(mu, dtype=np.float64)
        p = self.scaler.inverse(self.regress_normalized(mu))
        return p[0] if mu.ndim == 1 else p

    # parameters and persistence

    def modules(self) -> dict[str, Module]:
        return {"encoder": self.encoder, "decoder": self.decoder, "regressor": self.regressor}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, m in self.modules().items():
            for name, arr in m.state_dict().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for prefix, m in self.modules().items():
            sub = {k[len(prefix) + 1 :]: v for k, v in state.items() if k.startswith(prefix + ".")}
            m.load_state_dict(sub)

    def header(self) -> dict:
        cfg = self.cfg
        return {
            "kind": "pvae",
            "config": cfg.to_dict(),
            "latent_dim": cfg.latent_dim,
            "k": cfg.steepness,
            "beta": cfg.beta,
            "lambda": cfg.lam,
            "input_dims": list(cfg.input_shape),
            "property_names": list(cfg.property_names),
            "bounds": self.scaler.to_dict() if self.scaler.fitted else None,
            "stage": self.stage,
            "epoch": self.epoch,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict(), self.header())

    @classmethod
    def load(cls, path) -> "PVAE":
        header, params = load_checkpoint(path)
        if header.get("kind") != "pvae":
            raise ModelStateError(f"{path} is not a pVAE checkpoint")
        c = header["config"]
        c["stages"] = tuple(tuple(s) for s in c["stages"])
        model = cls(PVAEConfig(**c))
        model.load_state_dict(params)
        model.scaler = MinMaxScaler.from_dict(header.get("bounds"))
        model.stage, model.epoch = header.get("stage"), header.get("epoch", 0)
        model.meta = header.get("meta", {})
        return model


def reparameterize(code: LatentCode, eps) -> np.ndarray:
    """z = mu + sigma * eps for a recorded standard-normal draw."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != np.shape(code.mu):
        raise ShapeError(f"eps shape {eps.shape} does not match latent {np.shape(code.mu)}")
    code.eps = eps
    code.z = code.mu + code.sigma * eps
    return code.z


def kl_divergence(mu, sigma) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) = -1/2 sum(1 + log sigma^2 - sigma^2 - mu^2)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    s2 = sigma**2
    return float(0.5 * np.sum(s2 + mu**2 - 1.0 - np.log(s2)))


def _kl_tensor(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-sample KL summed over latent dims, averaged over the batch."""
    inner = 1.0 + logvar - T.exp(logvar) - mu * mu
    return T.tsum(inner) * (-0.5 / mu.shape[0])


def _prop_tensor(p_pred: Tensor, p_true: np.ndarray) -> Tensor:
    d = p_pred - p_true
    return T.tsum(d * d) * (1.0 / p_true.shape[0])


@dataclass
class LossParts:
    total: float
    recon: float
    kl: float
    prop: float


def pvae_loss(x, x_hat, code: LatentCode, p_true, p_pred, beta: float = 1.0, lam: float = 10.0) -> LossParts:
    """recon + beta * KL + lam * ||P - f(mu)||^2 for a batch or single sample.

    Reconstruction is binary cross-entropy summed over voxels; all terms are
    averaged over the batch.
    """
    if beta < 0 or lam < 0:
        raise ValueError("beta and lam must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"pvae_loss: x {x.shape} vs x_hat {x_hat.shape}")
    p_true = np.atleast_2d(np.asarray(p_true, dtype=np.float64))
    p_pred = np.atleast_2d(np.asarray(p_pred, dtype=np.float64))
    if p_true.shape != p_pred.shape:
        raise ShapeError(f"pvae_loss: properties {p_true.shape} vs {p_pred.shape}")
    mu = np.atleast_2d(code.mu)
    sigma = np.atleast_2d(code.sigma)
    b = mu.shape[0]
    recon = float(np.sum(T.binary_cross_entropy(x_hat, x).data)) / b
    kl = kl_divergence(mu, sigma) / b
    prop = float(np.sum((p_true - p_pred) ** 2)) / b
    return LossParts(recon + beta * kl + lam * prop, recon, kl, prop)


# training


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_vae: float = 1.2e-4
    lr_regressor: float = 1e-3
    lr_joint: float = 1.2e-4
    epochs_vae: int = 100
    epochs_regressor: int = 200
    epochs_joint: int = 50
    kl_warmup: int = 0
    early_stop_patience: int = 20
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    split: tuple = (0.8, 0.1, 0.1)
    stages: tuple = STAGES
    seed: int = 0


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffled train/val/test index sets; every split is non-empty."""
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    n_train = min(n_train, n - 2)
    n_val = min(n_val, n - n_train - 1)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    split: tuple = ()

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.history:
            w.writerow([row["epoch"], row["split"]] + [repr(float(row[c])) for c in LOG_COLUMNS[2:]])
        return buf.getvalue()


def _set_trainable(modules: Sequence[Module], flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad = flag
            p.grad = None


class _Trainer:
    def __init__(self, model: PVAE, x: np.ndarray, p_norm: np.ndarray, cfg: TrainConfig, split):
        self.model, self.x, self.p, self.cfg = model, x, p_norm, cfg
        self.tr, self.va, _ = split
        self.rng = np.random.default_rng(cfg.seed)
        self.result = TrainResult(split=split)

    def _batch_terms(self, idx, stage: str, sample: bool):
        m = self.model
        xb = self.x[idx]
        zero = Tensor(0.0)
        if stage == "regressor":
            mu = Tensor(self.mu_cache[idx])
            recon = kl = zero
        else:
            mu, lv = m._mu_logvar(xb)
            if sample:
                eps = self.rng.standard_normal(mu.shape)
                z = mu + T.exp(lv * 0.5) * eps
            else:
                z = mu
            logits = m.decoder(z)
            recon = T.tsum(T.bce_with_logits(logits * m.cfg.steepness, xb)) * (1.0 / len(idx))
            kl = _kl_tensor(mu, lv)
        prop = _prop_tensor(m.regressor(mu), self.p[idx]) if stage != "vae" else zero
        return recon, kl, prop

    def _objective(self, recon, kl, prop, stage, warm: float = 1.0):
        c = self.model.cfg
        if stage == "vae":
            return recon + kl * (c.beta * warm)
        if stage == "regressor":
            return prop * c.lam
        return recon + kl * c.beta + prop * c.lam

    def _evaluate(self, idx, stage):
        sums = np.zeros(3)
        with no_grad():
            for i in range(0, len(idx), 64):
                part = idx[i : i + 64]
                terms = self._batch_terms(part, stage, sample=False)
                sums += np.array([t.item() for t in terms]) * len(part)
        return sums / len(idx)

    def run_stage(self, stage: str, epochs: int, lr: float, trainable: Sequence[Module]):
        m, cfg = self.model, self.cfg
        _set_trainable(m.modules().values(), False)
        _set_trainable(trainable, True)
        params = [p for mod in trainable for p in mod.parameters()]
        if stage == "regressor":
            # the encoder is frozen, so the latent means are fixed for the stage
            self.mu_cache = m.encode_batch(self.x)[0]
        opt = Adam(params, lr=lr)
        sched = ReduceLROnPlateau(opt, cfg.plateau_factor, cfg.plateau_patience)
        best_val, best_state, bad = np.inf, m.state_dict(), 0
        for ep in range(epochs + 1):
            warming = stage == "vae" and ep < cfg.kl_warmup
            train_terms = None
            if ep > 0:
                # linear KL warm-up keeps the decoder from ignoring z early on
                warm = min(1.0, ep / cfg.kl_warmup) if stage == "vae" and cfg.kl_warmup > 0 else 1.0
                order = self.rng.permutation(self.tr)
                sums = np.zeros(3)
                for i in range(0, len(order), cfg.batch_size):
                    idx = order[i : i + cfg.batch_size]
                    recon, kl, prop = self._batch_terms(idx, stage, sample=True)
                    loss = self._objective(recon, kl, prop, stage, warm)
                    if not np.isfinite(loss.item()):
                        raise DivergenceError(f"non-finite loss in {stage} stage at epoch {ep}", step=ep)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    sums += np.array([recon.item(), kl.item(), prop.item()]) * len(idx)
                train_terms = sums / len(order)
            val_terms = self._evaluate(self.va, stage)
            val_total = float(self._objective(*(Tensor(v) for v in val_terms), stage).item())
            if not np.isfinite(val_total):
                raise DivergenceError(f"non-finite validation loss in {stage} stage at epoch {ep}", step=ep)
            m.epoch += 1 if ep > 0 else 0
            for split, terms in (("train", train_terms), ("val", val_terms)):
                if terms is None:
                    continue
                total = float(self._objective(*(Tensor(v) for v in terms), stage).item())
                self.result.history.append(
                    {"epoch": m.epoch, "stage": stage, "split": split, "recon": terms[0], "kl": terms[1],
                     "prop": terms[2], "total": total, "lr": opt.lr}
                )
            if val_total < best_val:
                best_val, best_state, bad = val_total, m.state_dict(), 0
            elif not warming:
                bad += 1
                if bad > cfg.early_stop_patience:
                    break
            if ep > 0 and not warming:
                sched.step(val_total)
        m.load_state_dict(best_state)
        _set_trainable(m.modules().values(), True)
        m.stage = stage
        self.result.best[stage] = best_val


def train(model: PVAE, x, props, cfg: TrainConfig | None = None, split=None) -> TrainResult:
    """Staged training: VAE, then the regressor on frozen latent means, then joint fine-tuning.

    ``x`` is (n, *input_shape) in {0, 1}; ``props`` is (n, N_P) in physical
    units.  Property bounds are fitted on the training split and stored on
    the model.
    """
    cfg = cfg or TrainConfig()
    x = model.as_input(x)
    props = np.asarray(props, dtype=np.float64).reshape(len(x), -1)
    if props.shape[1] != model.cfg.n_props:
        raise ShapeError(f"expected {model.cfg.n_props} properties per sample, got {props.shape[1]}")
    if not np.all(np.isfinite(props)):
        raise ValueError("property labels must be finite")
    split = split or split_indices(len(x), cfg.split, cfg.seed)
    if any(len(s) == 0 for s in split[:2]):
        raise ValueError("train and validation splits must be non-empty")
    model.scaler = MinMaxScaler().fit(props[split[0]])
    trainer = _Trainer(model, x, model.scaler.transform(props), cfg, split)
    for stage in cfg.stages:
        if stage == "vae":
            trainer.run_stage(stage, cfg.epochs_vae, cfg.lr_vae, [model.encoder, model.decoder])
        elif stage == "regressor":
            trainer.run_stage(stage, cfg.epochs_regressor, cfg.lr_regressor, [model.regressor])
        elif stage == "joint":
            trainer.run_stage(stage, cfg.epochs_joint, cfg.lr_joint, [model.encoder, model.regressor])
        else:
            raise ValueError(f"unknown stage {stage!r}")
    return trainer.result


def reconstruction_accuracy(model: PVAE, x, threshold: float = 0.5) -> np.ndarray:
    """Per-sample fraction of voxels recovered by decode(encode(x).mu), binarized."""
    xb = model.as_input(x)
    mu, _ = model.encode_batch(xb)
    rec = model.decode_batch(mu) >= threshold
    return np.mean(rec == (xb >= 0.5), axis=tuple(range(1, xb.ndim)))


# latent analytics


def slerp(z0, z1, t: float) -> np.ndarray:
    """Great-circle interpolation at constant angular speed.

    Directions follow [sin((1-t)W) a + sin(tW) b] / sin W for the unit
    endpoints a, b; the norm moves linearly between |z0| and |z1|.  With
    equal norms this is the textbook formula applied to z0, z1 directly.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    n0, n1 = np.linalg.norm(z0), np.linalg.norm(z1)
    if n0 == 0 or n1 == 0:
        raise ValueError("slerp endpoints must be non-zero")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    omega = angle_between(z0, z1)
    if omega < 1e-6:
        return (1.0 - t) * z0 + t * z1
    a, b = z0 / n0, z1 / n1
    direction = (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)
    return ((1.0 - t) * n0 + t * n1) * direction


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    # atan2 form stays accurate near 0 and pi
    return float(np.arctan2(np.linalg.norm(np.linalg.norm(b) * a - np.linalg.norm(a) * b),
                            np.linalg.norm(np.linalg.norm(b) * a + np.linalg.norm(a) * b)) * 2.0)


def slerp_path(z0, z1, steps: int = 100) -> np.ndarray:
    if steps < 2:
        raise ValueError("need at least two path points")
    return np.stack([slerp(z0, z1, t) for t in np.linspace(0.0, 1.0, steps)])


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # (k, N_l), orthonormal rows
    explained_variance: np.ndarray
    explained_ratio: np.ndarray
    projections: np.ndarray
    correlations: np.ndarray | None = None  # (k, N_P)


def pca_project(latents, k: int | None = None, properties=None) -> PCAResult:
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("latents must be (n, N_l)")
    n, d = z.shape
    k = d if k is None else k
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}]")
    if n < k + 1:
        raise ValueError(f"need at least k + 1 = {k + 1} samples, got {n}")
    mean = z.mean(axis=0)
    zc = z - mean
    cov = zc.T @ zc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(d)])
    vecs = vecs * np.where(signs == 0, 1.0, signs)
    total = vals.sum()
    ratio = vals / total if total > 0 else np.zeros_like(vals)
    comps = vecs[:, :k].T
    proj = zc @ comps.T
    corr = None
    if properties is not None:
        p = np.asarray(properties, dtype=np.float64).reshape(n, -1)
        corr = np.array([[_pearson(proj[:, i], p[:, j]) for j in range(p.shape[1])] for i in range(k)])
    return PCAResult(mean, comps, vals[:k], ratio[:k], proj, corr)


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    sd = v.std(ddof=1)
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * len(v) ** -0.2


def kde_density(values, bandwidth="auto", points: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE sampled on a grid spanning [min - 3h, max + 3h]; returns (grid, density).

    The curve is scaled to unit trapezoid integral over the grid.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two values")
    if bandwidth == "auto":
        h = silverman_bandwidth(v)
        if not h > 0:
            h = 1e-3 * (1.0 + abs(float(v[0])))
    else:
        h = float(bandwidth)
        if not h > 0:
            raise ValueError("bandwidth must be positive")
    grid = np.linspace(v.min() - 3 * h, v.max() + 3 * h, points)
    dens = np.zeros(points)
    for chunk in np.array_split(v, max(1, v.size // 4096)):
        u = (grid[:, None] - chunk[None, :]) / h
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    dens /= v.size * h * math.sqrt(2.0 * math.pi)
    # the +-3h window drops ~0.27% of each edge kernel; renormalize on the grid
    dens /= np.trapezoid(dens, grid)
    return grid, dens


def save_training_log(result: TrainResult, path) -> None:
    atomic_write_text(Path(path), result.log_csv())
