"""Latent-space inverse design: pick nearby training codes, then descend on the regressor."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .diffcore import tensor as T
from .diffcore.tensor import Tensor
from .errors import DivergenceError, PoreDesignError, ShapeError
from .grid import VoxelGrid
from .pvae import PVAE

RESULT_COLUMNS = [
    "target_id", "status", "stop_reason", "steps", "log_mse", "grid_path", "verified_nF", "verified_K11",
    "target_nF", "target_K11", "pred_nF", "pred_K11", "lbm_nF", "lbm_K11",
]
TARGET_COLUMNS = ["target_id", "n_F", "K11", "w_nF", "w_K"]


@dataclass
class DesignTarget:
    values: np.ndarray
    weights: np.ndarray | None = None
    target_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        w = np.ones_like(self.values) if self.weights is None else np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape != self.values.shape:
            raise ValueError("one weight per target property is required")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("target values must be finite")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("weights must be non-negative and not all zero")
        self.weights = w


@dataclass
class OptConfig:
    lr: float = 0.05
    max_steps: int = 2000
    reproject_every: int = 50
    tol: float = 1e-5
    patience: int = 400
    threshold: float = 0.5


@dataclass
class DesignResult:
    z: np.ndarray
    grid: VoxelGrid
    predicted: np.ndarray
    trace: list = field(default_factory=list)
    best_trace: list = field(default_factory=list)
    stop_reason: str = ""
    steps: int = 0
    verified: np.ndarray | None = None
    lbm: np.ndarray | None = None
    log_mse: float = math.nan
    status: str = "ok"


def nearest_initializers(target: DesignTarget, latents, props, k: int, scaler=None) -> tuple[np.ndarray, np.ndarray]:
    """Indices and latents of the ``k`` items closest to the target in normalized property space.

    Distance is weighted Euclidean; ties go to the lower index.
    """
    props = np.asarray(props, dtype=np.float64)
    if props.ndim == 1:
        props = props[:, None]
    latents = np.asarray(latents, dtype=np.float64)
    if len(props) == 0:
        raise ValueError("empty initializer dataset")
    if len(latents) != len(props):
        raise ShapeError(f"{len(latents)} latents but {len(props)} property rows")
    if not 1 <= k <= len(props):
        raise ValueError(f"k must lie in [1, {len(props)}], got {k}")
    if props.shape[1] != target.values.size:
        raise ShapeError(f"target has {target.values.size} properties, dataset has {props.shape[1]}")
    if scaler is None:
        lo, hi = props.min(axis=0), props.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        pn, tn = (props - lo) / span, (target.values - lo) / span
    else:
        pn, tn = scaler.transform(props), scaler.transform(target.values)
    dist = np.sqrt(np.sum(target.weights * (pn - tn) ** 2, axis=1))
    order = np.lexsort((np.arange(len(dist)), dist))[:k]
    return order, latents[order]


def _regress(model: PVAE, z: Tensor) -> Tensor:
    # functional forward with detached weights so optimization never touches model state
    h = z
    for layer in model.regressor.layers:
        h = T.relu(T.matmul(h, Tensor(layer.w.data)) + layer.b.data)
    return h


def _objective(model: PVAE, z: np.ndarray, t_norm: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    zt = Tensor(z[None], requires_grad=True)
    d = _regress(model, zt) - t_norm[None]
    loss = T.tsum(d * d * w[None])
    loss.backward()
    return loss.item(), zt.grad[0]


def _project(model: PVAE, z: np.ndarray, threshold: float) -> np.ndarray:
    img = model.decode_batch(z[None])
    mu, _ = model.encode_batch((img >= threshold).astype(np.float64))
    return mu[0]


def optimize_latent(z0, target: DesignTarget, model: PVAE, cfg: OptConfig | None = None) -> DesignResult:
    """Gradient descent on z against the weighted normalized property residual.

    Every ``reproject_every`` steps the iterate is pulled back onto the data
    manifold by decode, binarize, encode.  The best iterate seen is returned.
    """
    cfg = cfg or OptConfig()
    z = np.array(z0, dtype=np.float64).ravel()
    if z.size != model.cfg.latent_dim:
        raise ShapeError(f"z0 must have length {model.cfg.latent_dim}, got {z.size}")
    t_norm = model.scaler.transform(target.values)
    w = target.weights
    best_z, best = z.copy(), math.inf
    trace, best_trace = [], []
    since, reason, step = 0, "max_steps", 0
    for step in range(cfg.max_steps + 1):
        if step > 0 and cfg.reproject_every and step % cfg.reproject_every == 0:
            z = _project(model, z, cfg.threshold)
            if not np.all(np.isfinite(z)):
                raise DivergenceError(f"re-projection produced a non-finite latent at step {step}", step=step)
        loss, grad = _objective(model, z, t_norm, w)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite design objective at step {step}", step=step)
        trace.append(loss)
        if loss < best:
            best, best_z, since = loss, z.copy(), 0
        else:
            since += 1
        best_trace.append(best)
        if best < cfg.tol:
            reason = "converged"
            break
        if since >= cfg.patience:
            reason = "stalled"
            break
        if step == cfg.max_steps:
            break
        lr = cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(cfg.max_steps, 1)))
        z = z - lr * grad
    img = model.decode_batch(best_z[None])[0]
    grid = _to_grid(model, img >= cfg.threshold)
    predicted = model.regress(best_z)
    return DesignResult(best_z, grid, predicted, trace, best_trace, reason, step)


def _to_grid(model: PVAE, img: np.ndarray) -> VoxelGrid:
    vox = img.astype(np.uint8)
    if model.cfg.nd == 2:
        depth = model.cfg.depth or model.cfg.input_shape[0]
        vox = np.broadcast_to(vox[None], (depth,) + vox.shape)
    return VoxelGrid(vox)


def log_mse(verified, target: DesignTarget, scaler) -> float:
    """log10 of the summed squared porosity and permeability errors (normalized units)."""
    err = np.sum((scaler.transform(verified) - scaler.transform(target.values)) ** 2)
    return float(np.log10(max(err, 1e-300)))


@dataclass
class BatchConfig:
    k_init: int = 100
    triage_steps: int = 50
    mode: str = "best_of_k"  # or "all"
    opt: OptConfig = field(default_factory=OptConfig)


def design_one(
    target: DesignTarget,
    model: PVAE,
    surrogate,
    latents,
    props,
    cfg: BatchConfig | None = None,
    lbm_verify: Callable[[VoxelGrid], np.ndarray] | None = None,
) -> DesignResult:
    cfg = cfg or BatchConfig()
    k = min(cfg.k_init, len(props))
    _, inits = nearest_initializers(target, latents, props, k, model.scaler)
    triage = OptConfig(**{**cfg.opt.__dict__, "max_steps": cfg.triage_steps})
    if cfg.mode == "all":
        candidates = [optimize_latent(z0, target, model, cfg.opt) for z0 in inits]
    elif cfg.mode == "best_of_k":
        candidates = [optimize_latent(z0, target, model, triage) for z0 in inits]
    else:
        raise ValueError(f"unknown design mode {cfg.mode!r}")
    _verify(candidates, model, surrogate, target)
    best = min(candidates, key=lambda r: (r.log_mse, r.trace[-1] if r.trace else math.inf))
    if cfg.mode == "best_of_k":
        full = optimize_latent(best.z, target, model, cfg.opt)
        full.steps += best.steps
        _verify([full], model, surrogate, target)
        if full.log_mse <= best.log_mse:
            best = full
    if lbm_verify is not None:
        best.lbm = np.asarray(lbm_verify(best.grid), dtype=np.float64)
    return best


def _verify(results: Sequence[DesignResult], model: PVAE, surrogate, target: DesignTarget) -> None:
    if surrogate is None:
        raise ValueError("a surrogate is required to verify designs")
    imgs = np.stack([surrogate.as_input(r.grid)[0] for r in results])
    pred = surrogate.predict_batch(imgs)
    for r, p in zip(results, pred):
        r.verified = p
        r.log_mse = log_mse(p, target, model.scaler)


def design_batch(
    targets: Sequence[DesignTarget],
    model: PVAE,
    surrogate,
    latents,
    props,
    cfg: BatchConfig | None = None,
    lbm_verify=None,
) -> list[DesignResult]:
    """Design every target in order; a failed target yields a result with status "error" instead of raising."""
    results = []
    for target in targets:
        try:
            results.append(design_one(target, model, surrogate, latents, props, cfg, lbm_verify))
        except PoreDesignError as exc:
            results.append(_failed(exc))
    return results


def _failed(exc: Exception) -> DesignResult:
    r = DesignResult(np.zeros(0), None, np.full(2, math.nan), status="error")
    r.stop_reason = type(exc).__name__
    return r


def read_targets(text: str) -> list[DesignTarget]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and not {"target_id", "n_F", "K11"} <= set(rows[0]):
        raise ValueError("targets CSV needs target_id, n_F and K11 columns")
    out = []
    for row in rows:
        w = [float(row.get("w_nF") or 1.0), float(row.get("w_K") or 1.0)]
        out.append(DesignTarget([float(row["n_F"]), float(row["K11"])], w, row["target_id"]))
    return out


def format_targets(targets: Sequence[DesignTarget]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TARGET_COLUMNS)
    for t in targets:
        w.writerow([t.target_id, repr(float(t.values[0])), repr(float(t.values[1])),
                    repr(float(t.weights[0])), repr(float(t.weights[1]))])
    return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def result_row(target: DesignTarget, r: DesignResult, grid_path: str = "") -> list:
    ver = r.verified if r.verified is not None else [None, None]
    lbm = r.lbm if r.lbm is not None else [None, None]
    return [
        target.target_id, r.status, r.stop_reason, r.steps, _fmt(r.log_mse), grid_path, _fmt(ver[0]), _fmt(ver[1]),
        _fmt(target.values[0]), _fmt(target.values[1]), _fmt(r.predicted[0]), _fmt(r.predicted[1]),
        _fmt(lbm[0]), _fmt(lbm[1]),
    ]


def format_results(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()
