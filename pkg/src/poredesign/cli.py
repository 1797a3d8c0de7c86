"""Command-line front end.

Every subcommand reads flags (optionally seeded from a flat ``key = value``
config file), writes its products under ``--out`` atomically, and exits 0 on
success, 1 on a domain error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import label_k11
from .errors import ConfigError, PoreDesignError
from .fileio import atomic_write_text
from .grid import GeneratorConfig, VoxelGrid, porosity, read_grid, subsample, synthetic_samples, write_grid
from .lbm import AXIS_NAMES, FlowConfig
from .manifest import Manifest
from .metrics import r2_score

SUBCOMMANDS = ("gen", "subsample", "perm", "train-surrogate", "train-pvae", "interp", "analyze", "invert", "eval")
PROPS = ("n_F", "K11")


def default_jobs() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


def pmap(fn, items, jobs: int):
    """Ordered map, in a process pool when ``jobs > 1``."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def fmt(v) -> str:
    return repr(float(v))


def rel_to(path, root) -> str:
    """``path`` relative to ``root`` so that records do not depend on where a run lives."""
    return Path(os.path.relpath(Path(path).resolve(), Path(root).resolve())).as_posix()


def recorded_manifest(override, model_path, meta: dict) -> Manifest:
    """The manifest given on the command line, else the one a model recorded (relative to the model file)."""
    if override:
        return Manifest.load(override)
    rec = meta.get("manifest")
    if not rec:
        raise ConfigError("the model records no manifest; pass --manifest")
    return Manifest.load(Path(model_path).parent / rec)


# gen


def _gen_one(job):
    cfg, index, root = job
    s = next(synthetic_samples(cfg, start=index))
    rel = f"grids/s{s.index:05d}.vxg"
    write_grid(s.grid, Path(root) / rel)
    return {
        "id": f"s{s.index:05d}",
        "grid": rel,
        "seed": s.seed,
        "n_pores": s.n_pores,
        "n_F": porosity(s.grid),
        "provenance": "generated",
        "status": "generated",
    }


def cmd_gen(args) -> None:
    cfg = GeneratorConfig(
        image_size=args.image_size, depth=args.depth, pore_size=args.pore_size,
        n_pores_min=args.pores_min, n_pores_max=args.pores_max, seed=args.seed, count=args.count,
    )
    cfg.validate()
    out = Path(args.out)
    conf = {"command": "gen", **asdict(cfg)}
    conf["spacing"] = list(cfg.spacing)
    man = Manifest.open_or_create(out / "manifest.json", conf)
    done = {e["id"]: e for e in man.samples if e.get("status") == "generated" and man.grid_path(e).is_file()}
    todo = [i for i in range(cfg.count) if f"s{i:05d}" not in done]
    chunk = max(1, 8 * args.jobs)
    for lo in range(0, len(todo), chunk):
        for e in pmap(_gen_one, [(cfg, i, str(out)) for i in todo[lo : lo + chunk]], args.jobs):
            done[e["id"]] = e
        man.samples = [done[k] for k in sorted(done)]
        man.save()
    man.samples = [done[k] for k in sorted(done)]
    man.save()
    print(f"gen: {cfg.count} samples in {man.path} ({len(todo)} new)")


# subsample


def _parse_triple(text: str, name: str) -> tuple[int, int, int]:
    parts = [int(p) for p in str(text).split(",")]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ConfigError(f"{name} needs one or three comma-separated integers")
    return tuple(parts)


def cmd_subsample(args) -> None:
    size = _parse_triple(args.size, "--size")
    stride = _parse_triple(args.stride, "--stride") if args.stride else None
    out = Path(args.out)
    if args.input:
        sources = [(Path(args.input).stem, read_grid(args.input))]
    else:
        src = Manifest.load(args.manifest)
        sources = [(e["id"], read_grid(src.grid_path(e))) for e in src.samples]
    conf = {"command": "subsample", "size": list(size), "stride": list(stride or size)}
    man = Manifest.open_or_create(out / "manifest.json", conf)
    entries = []
    for sid, g in sources:
        for j, sub in enumerate(subsample(g, size, stride)):
            rel = f"grids/{sid}_{j:04d}.vxg"
            write_grid(sub, out / rel)
            entries.append({"id": f"{sid}_{j:04d}", "grid": rel, "parent": sid, "n_F": porosity(sub),
                            "provenance": "subsampled", "status": "generated"})
    man.samples = entries
    man.save()
    print(f"subsample: {len(entries)} sub-volumes in {man.path}")


# perm


def _flow_config(args) -> FlowConfig:
    cfg = FlowConfig.from_delta(delta_rho=args.delta_rho, nu_l=args.nu_l, tol=args.tol, max_steps=args.max_steps)
    cfg.validate()
    return cfg


def _axes(name: str) -> tuple:
    return (0, 1, 2) if name == "all" else (AXIS_NAMES.index(name),)


def _perm_one(job):
    from .perm import csv_row, homogenize

    sid, path, flow, axes, full = job
    try:
        g = read_grid(path)
        h = homogenize(g, flow, full_tensor=full, axes=axes)
        k = h.tensor.lattice
        rec = {f"K{i + 1}{j + 1}": float(k[i, j]) for i in range(3) for j in range(i, 3)}
        return csv_row(sid, h), rec, [int(s) for s in h.steps], h.status
    except PoreDesignError as exc:
        return csv_row(sid, None, "error"), {"error": str(exc)}, [0, 0, 0], "error"


def cmd_perm(args) -> None:
    from .perm import CSV_COLUMNS

    flow = _flow_config(args)
    axes = _axes(args.axis)
    if args.full_tensor and axes != (0, 1, 2):
        raise ConfigError("--full-tensor needs --axis all")
    out = Path(args.out)
    if args.input:
        path = Path(args.input)
        if not path.is_file():
            raise FileNotFoundError(f"{path} does not exist")
        row, rec, steps, status = _perm_one((path.stem, path, flow, axes, args.full_tensor))
        write_csv(out / "perm.csv", CSV_COLUMNS, [row])
        print(f"perm: {path.stem} status={status} " + " ".join(f"{k}={v:.6g}" for k, v in rec.items() if k != "error"))
        if status == "error":
            raise PoreDesignError(rec["error"])
        return
    man = Manifest.load(args.manifest)
    pconf = {"flow": asdict(flow), "axes": list(axes), "full_tensor": args.full_tensor}
    todo = [e for e in man.samples if not (e.get("status") in ("ok", "impermeable") and e.get("perm_config") == pconf)]
    chunk = max(1, 4 * args.jobs)
    for lo in range(0, len(todo), chunk):
        part = todo[lo : lo + chunk]
        jobs = [(e["id"], man.grid_path(e), flow, axes, args.full_tensor) for e in part]
        for e, (row, rec, steps, status) in zip(part, pmap(_perm_one, jobs, args.jobs)):
            e.update({"K_lu": rec, "steps": steps, "status": status, "perm_config": pconf, "perm_row": row})
        man.save()
    man.save()
    write_csv(out / "perm.csv", CSV_COLUMNS, [e["perm_row"] for e in man.samples])
    counts = {s: sum(e["status"] == s for e in man.samples) for s in ("ok", "impermeable", "error")}
    print(f"perm: {len(man.samples)} samples ({len(todo)} computed) " + " ".join(f"{k}={v}" for k, v in counts.items()))


# dataset loading for the learning commands


def _labeled(man: Manifest, nd: int = 2):
    entries = [e for e in man.samples if e.get("status") == "ok"]
    if not entries:
        raise PoreDesignError(f"{man.path} has no samples with computed permeability; run perm first")
    imgs = []
    for e in entries:
        v = read_grid(man.grid_path(e)).voxels.astype(np.float64)
        imgs.append(v[0] if nd == 2 else v)
    props = np.array([[e["n_F"], e["K_lu"]["K11"]] for e in entries])
    return [e["id"] for e in entries], np.stack(imgs), props


def _split_meta(ids, split) -> dict:
    return {name: [ids[i] for i in idx] for name, idx in zip(("train", "val", "test"), split)}


def _select(ids, meta: dict, which: str):
    if which == "all":
        return list(range(len(ids)))
    wanted = set(meta.get("split", {}).get(which, []))
    if not wanted:
        raise PoreDesignError(f"model records no {which!r} split")
    return [i for i, sid in enumerate(ids) if sid in wanted]


# train-surrogate


def cmd_train_surrogate(args) -> None:
    from .surrogate import SurrogateConfig, SurrogateModel, SurrogateTrainConfig, evaluation_csv, train_surrogate
    from .pvae import split_indices

    man = Manifest.load(args.manifest)
    nd = 2 if args.mode == "2d" else 3
    ids, x, y = _labeled(man, nd)
    model = SurrogateModel(SurrogateConfig(input_shape=x.shape[1:], base_channels=args.base_channels, seed=args.seed))
    tcfg = SurrogateTrainConfig(batch_size=args.batch_size, lr=args.lr, epochs=args.epochs, seed=args.seed,
                                min_samples=args.min_samples)
    split = split_indices(len(ids), tcfg.split, args.seed)
    train_surrogate(model, x, y, tcfg, split)
    out = Path(args.out)
    model.meta = {"split": _split_meta(ids, split), "manifest": rel_to(man.path, out)}
    model.save(out / "surrogate.pvk")
    test = split[2]
    pred = model.predict_batch(x[test])
    atomic_write_text(out / "surrogate_eval.csv", evaluation_csv([ids[i] for i in test], y[test], pred))
    r2 = r2_score(y[test], pred) if len(test) > 1 else np.full(2, np.nan)
    print(f"train-surrogate: epochs={model.epoch} test R2 n_F={r2[0]:.4f} K11={r2[1]:.4f}")


# train-pvae


def _pvae_train_config(args, stages):
    from .pvae import TrainConfig

    ep = args.epochs
    return TrainConfig(
        batch_size=args.batch_size,
        lr_vae=args.lr_vae, lr_regressor=args.lr_regressor, lr_joint=args.lr_joint,
        epochs_vae=args.epochs_vae if args.epochs_vae is not None else ep,
        epochs_regressor=args.epochs_regressor if args.epochs_regressor is not None else ep,
        epochs_joint=args.epochs_joint if args.epochs_joint is not None else ep,
        kl_warmup=args.kl_warmup, stages=stages, seed=args.seed,
    )


def _fit_pvae(args, ids, x, y, latent_dim, split):
    from .pvae import PVAE, STAGES, PVAEConfig, train

    stages = STAGES if args.stage == "all" else (args.stage,)
    if args.init:
        model = PVAE.load(args.init)
        if model.cfg.input_shape != tuple(x.shape[1:]):
            raise PoreDesignError(f"{args.init} expects inputs {model.cfg.input_shape}, data are {x.shape[1:]}")
    else:
        if args.stage not in ("all", "vae"):
            raise ConfigError(f"--stage {args.stage} continues a trained model; pass --init")
        model = PVAE(PVAEConfig(input_shape=x.shape[1:], latent_dim=latent_dim, beta=args.beta, lam=args.lam,
                                depth=args.depth, seed=args.seed))
    result = train(model, x, y, _pvae_train_config(args, stages), split)
    model.meta = {"split": _split_meta(ids, split), "manifest": rel_to(args.manifest, args.out)}
    return model, result


def cmd_train_pvae(args) -> None:
    from .pvae import save_training_log, split_indices

    man = Manifest.load(args.manifest)
    ids, x, y = _labeled(man, 2 if args.mode == "2d" else 3)
    if args.depth is None and args.mode == "2d":
        args.depth = read_grid(man.grid_path(man.by_id(ids[0]))).dims[0]
    split = split_indices(len(ids), (0.8, 0.1, 0.1), args.seed)
    out = Path(args.out)
    dims = [int(d) for d in args.sweep_latent_dims.split(",")] if args.sweep_latent_dims else [args.latent_dim]
    best = None
    rows = []
    for d in dims:
        model, result = _fit_pvae(args, ids, x, y, d, split)
        score = result.best[model.stage]
        rows.append([d, fmt(score)])
        if best is None or score < best[0]:
            best = (score, model, result)
    if len(dims) > 1:
        write_csv(out / "sweep.csv", ["latent_dim", "best_val_total"], rows)
    _, model, result = best
    model.save(out / "pvae.pvk")
    save_training_log(result, out / "pvae_log.csv")
    print(f"train-pvae: latent_dim={model.cfg.latent_dim} stage={model.stage} epochs={model.epoch}")


# interp


def _verify_fn(kind: str, args, depth: int):
    if kind == "surrogate":
        from .surrogate import SurrogateModel

        if not args.surrogate:
            raise ConfigError("--verify surrogate needs --surrogate")
        sur = SurrogateModel.load(args.surrogate)
        return lambda imgs: sur.predict_batch(imgs.astype(np.float64))
    if kind == "lbm":
        flow = FlowConfig()

        def lbm(imgs):
            return np.array([label_k11(VoxelGrid(np.broadcast_to(im[None], (depth,) + im.shape).astype(np.uint8)), flow)[:2]
                             for im in imgs])

        return lbm
    return None


def cmd_interp(args) -> None:
    from .pvae import PVAE, slerp_path

    model = PVAE.load(args.model)
    man = Manifest.load(args.manifest)
    g0 = read_grid(man.grid_path(man.by_id(args.from_id)))
    g1 = read_grid(man.grid_path(man.by_id(args.to_id)))
    z0, z1 = model.encode(g0).mu, model.encode(g1).mu
    path = slerp_path(z0, z1, args.steps)
    imgs = (model.decode_batch(path) >= 0.5).astype(np.uint8)
    pred = model.regress(path)
    depth = model.cfg.depth or g0.dims[0]
    verify = _verify_fn(args.verify, args, depth)
    ver = pred if verify is None else verify(imgs)
    out = Path(args.out)
    rows = []
    for i, (im, p, v) in enumerate(zip(imgs, pred, ver)):
        vox = np.broadcast_to(im[None], (depth,) + im.shape) if model.cfg.nd == 2 else im
        write_grid(VoxelGrid(vox), out / "interp" / f"step_{i:03d}.vxg")
        t = i / (args.steps - 1)
        rows.append([i, fmt(t), fmt(1.0 - im.mean()), fmt(p[0]), fmt(p[1]), fmt(v[0]), fmt(v[1])])
    header = ["step", "t", "count_nF", "pred_nF", "pred_K11", "verified_nF", "verified_K11"]
    write_csv(out / "interp.csv", header, rows)
    print(f"interp: {args.steps} steps from {args.from_id} to {args.to_id}, verified by {args.verify}")


# analyze


def cmd_analyze(args) -> None:
    from .pvae import PVAE, kde_density, pca_project

    model = PVAE.load(args.model)
    man = Manifest.load(args.manifest)
    ids, x, y = _labeled(man, model.cfg.nd)
    mu, _ = model.encode_batch(x)
    k = min(args.components, model.cfg.latent_dim, len(ids) - 1)
    pca = pca_project(mu, k, y)
    out = Path(args.out)
    write_csv(out / "pca_variance.csv", ["component", "variance", "ratio"],
              [[i + 1, fmt(v), fmt(r)] for i, (v, r) in enumerate(zip(pca.explained_variance, pca.explained_ratio))])
    write_csv(out / "pca_projections.csv", ["sample_id"] + [f"pc{i + 1}" for i in range(k)] + list(PROPS),
              [[sid] + [fmt(v) for v in row] + [fmt(p) for p in props]
               for sid, row, props in zip(ids, pca.projections, y)])
    write_csv(out / "pca_correlations.csv", ["component", "corr_nF", "corr_K11"],
              [[i + 1] + [fmt(c) for c in row] for i, row in enumerate(pca.correlations)])
    rows = []
    for j in range(mu.shape[1]):
        grid, dens = kde_density(mu[:, j])
        rows += [[j, fmt(g), fmt(d)] for g, d in zip(grid, dens)]
    write_csv(out / "latent_kde.csv", ["dim", "value", "density"], rows)
    print(f"analyze: {len(ids)} samples, PC1 explains {pca.explained_ratio[0]:.3f}")


# invert


_WORKER = {}


def _invert_init(model_path, surrogate_path, latents, props, bcfg, lbm, depth):
    from .pvae import PVAE
    from .surrogate import SurrogateModel

    _WORKER.update(model=PVAE.load(model_path), surrogate=SurrogateModel.load(surrogate_path),
                   latents=latents, props=props, bcfg=bcfg, lbm=lbm, depth=depth)


def _lbm_props(grid: VoxelGrid) -> np.ndarray:
    return np.array(label_k11(grid, FlowConfig())[:2])


def _invert_one(target):
    from .inverse import _failed, design_one

    w = _WORKER
    try:
        return design_one(target, w["model"], w["surrogate"], w["latents"], w["props"], w["bcfg"],
                          _lbm_props if w["lbm"] else None)
    except PoreDesignError as exc:
        return _failed(exc)


def cmd_invert(args) -> None:
    from .inverse import BatchConfig, OptConfig, format_results, read_targets, result_row
    from .pvae import PVAE

    tpath = Path(args.targets)
    if not tpath.is_file():
        raise FileNotFoundError(f"targets file {tpath} does not exist")
    targets = read_targets(tpath.read_text())
    model = PVAE.load(args.model)
    man = recorded_manifest(args.manifest, args.model, model.meta)
    ids, x, y = _labeled(man, model.cfg.nd)
    train_idx = _select(ids, model.meta, "train")
    mu, _ = model.encode_batch(x[train_idx])
    bcfg = BatchConfig(k_init=args.k_init, triage_steps=args.triage_steps, mode=args.design_mode,
                       opt=OptConfig(lr=args.design_lr, max_steps=args.max_design_steps))
    init = (args.model, args.surrogate, mu, y[train_idx], bcfg, args.verify == "lbm", model.cfg.depth)
    if args.jobs > 1 and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs, initializer=_invert_init, initargs=init) as ex:
            results = list(ex.map(_invert_one, targets))
    else:
        _invert_init(*init)
        results = [_invert_one(t) for t in targets]
    out = Path(args.out)
    rows, designed = [], []
    for t, r in zip(targets, results):
        rel = ""
        if r.grid is not None:
            rel = f"designs/{t.target_id}.vxg"
            write_grid(r.grid, out / rel)
            designed.append({"id": t.target_id, "grid": rel, "n_F": porosity(r.grid), "provenance": "designed",
                             "status": r.status})
        rows.append(result_row(t, r, rel))
    atomic_write_text(out / "invert.csv", format_results(rows))
    dm = Manifest(out / "designs_manifest.json", designed, {"command": "invert", "targets": rel_to(tpath, out)})
    dm.save()
    ok = sum(r.status == "ok" for r in results)
    print(f"invert: {ok}/{len(targets)} targets designed, verified by {args.verify}")


# eval


def cmd_eval(args) -> None:
    if not args.model and not args.surrogate:
        raise ConfigError("eval needs --model and/or --surrogate")
    out = Path(args.out)
    r2_rows = []
    if args.surrogate:
        from .surrogate import SurrogateModel, evaluation_csv

        sur = SurrogateModel.load(args.surrogate)
        man = recorded_manifest(args.manifest, args.surrogate, sur.meta)
        ids, x, y = _labeled(man, len(sur.cfg.input_shape))
        idx = _select(ids, sur.meta, args.split)
        pred = sur.predict_batch(x[idx])
        atomic_write_text(out / "eval_surrogate.csv", evaluation_csv([ids[i] for i in idx], y[idx], pred))
        r2 = r2_score(y[idx], pred)
        r2_rows += [["surrogate", p, fmt(v), len(idx)] for p, v in zip(PROPS, r2)]
    if args.model:
        from .pvae import PVAE

        model = PVAE.load(args.model)
        man = recorded_manifest(args.manifest, args.model, model.meta)
        ids, x, y = _labeled(man, model.cfg.nd)
        idx = _select(ids, model.meta, args.split)
        mu, _ = model.encode_batch(x[idx])
        pred = model.regress(mu)
        rec = (model.decode_batch(mu) >= 0.5) == (x[idx] >= 0.5)
        acc = rec.reshape(len(idx), -1).mean(axis=1)
        rows = [[ids[i], fmt(t[0]), fmt(p[0]), fmt(t[1]), fmt(p[1]), fmt(a)]
                for i, t, p, a in zip(idx, y[idx], pred, acc)]
        write_csv(out / "eval_pvae.csv", ["sample_id", "true_nF", "pred_nF", "true_K11", "pred_K11", "recon_acc"], rows)
        r2 = r2_score(y[idx], pred)
        r2_rows += [["pvae", p, fmt(v), len(idx)] for p, v in zip(PROPS, r2)]
        r2_rows.append(["pvae", "recon_acc", fmt(acc.mean()), len(idx)])
    write_csv(out / "r2.csv", ["model", "property", "value", "n"], r2_rows)
    for row in r2_rows:
        print(f"eval: {row[0]} {row[1]} = {float(row[2]):.4f} (n={row[3]})")


# parser


def _shared() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="flat key = value file; flags override it")
    p.add_argument("--seed", type=int, default=0, help="global seed (unsigned 64-bit)")
    p.add_argument("--jobs", type=int, default=default_jobs(), help="worker processes")
    p.add_argument("--out", default=".", metavar="DIR", help="output directory")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poredesign", description="Porous microstructure design toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    shared = [_shared()]

    p = sub.add_parser("gen", parents=shared, help="generate synthetic extruded microstructures")
    p.add_argument("--image-size", type=int, default=100)
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--pore-size", type=int, default=10)
    p.add_argument("--pores-min", type=int, default=10)
    p.add_argument("--pores-max", type=int, default=40)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("subsample", parents=shared, help="cut sub-volumes from grids")
    p.add_argument("--in", dest="input", metavar="GRID")
    p.add_argument("--manifest")
    p.add_argument("--size", help="edge length, or x,y,z")
    p.add_argument("--stride", help="defaults to --size")
    p.set_defaults(func=cmd_subsample, required=("size",), one_of=("input", "manifest"))

    p = sub.add_parser("perm", parents=shared, help="LBM permeability of one grid or a manifest")
    p.add_argument("--in", dest="input", metavar="GRID")
    p.add_argument("--manifest")
    p.add_argument("--nu-l", type=float, default=1.0 / 6.0)
    p.add_argument("--delta-rho", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-steps", type=int, default=200_000)
    p.add_argument("--full-tensor", action="store_true")
    p.add_argument("--axis", choices=("x", "y", "z", "all"), default="all")
    p.set_defaults(func=cmd_perm, one_of=("input", "manifest"))

    p = sub.add_parser("train-surrogate", parents=shared, help="train the CNN surrogate")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("2d", "3d"), default="2d")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--min-samples", type=int, default=100)
    p.set_defaults(func=cmd_train_surrogate, required=("manifest",))

    p = sub.add_parser("train-pvae", parents=shared, help="staged pVAE training")
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=("2d", "3d"), default="2d")
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--lambda", dest="lam", type=float, default=10.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--epochs-vae", type=int)
    p.add_argument("--epochs-regressor", type=int)
    p.add_argument("--epochs-joint", type=int)
    p.add_argument("--stage", choices=("vae", "regressor", "joint", "all"), default="all")
    p.add_argument("--init", metavar="PVK", help="continue from this checkpoint")
    p.add_argument("--lr-vae", type=float, default=1.2e-4)
    p.add_argument("--lr-regressor", type=float, default=1e-3)
    p.add_argument("--lr-joint", type=float, default=1.2e-4)
    p.add_argument("--kl-warmup", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--depth", type=int, help="extrusion depth of decoded volumes (2d mode)")
    p.add_argument("--sweep-latent-dims", metavar="LIST", help="comma-separated latent sizes; keeps the best")
    p.set_defaults(func=cmd_train_pvae, required=("manifest",))

    p = sub.add_parser("interp", parents=shared, help="slerp sweep between two samples")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--surrogate")
    p.add_argument("--from", dest="from_id", metavar="ID")
    p.add_argument("--to", dest="to_id", metavar="ID")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--verify", choices=("regressor", "surrogate", "lbm"), default="regressor")
    p.set_defaults(func=cmd_interp, required=("model", "manifest", "from_id", "to_id"))

    p = sub.add_parser("analyze", parents=shared, help="latent PCA, correlations and KDE tables")
    p.add_argument("--model")
    p.add_argument("--manifest")
    p.add_argument("--components", type=int, default=10)
    p.set_defaults(func=cmd_analyze, required=("model", "manifest"))

    p = sub.add_parser("invert", parents=shared, help="inverse design for a targets CSV")
    p.add_argument("--model")
    p.add_argument("--surrogate")
    p.add_argument("--manifest", help="training manifest (default: the one recorded in the model)")
    p.add_argument("--targets", metavar="CSV")
    p.add_argument("--k-init", type=int, default=100)
    p.add_argument("--triage-steps", type=int, default=50)
    p.add_argument("--design-mode", choices=("best_of_k", "all"), default="best_of_k")
    p.add_argument("--design-lr", type=float, default=0.05)
    p.add_argument("--max-design-steps", type=int, default=2000)
    p.add_argument("--verify", choices=("surrogate", "lbm"), default="surrogate")
    p.set_defaults(func=cmd_invert, required=("model", "surrogate", "targets"))

    p = sub.add_parser("eval", parents=shared, help="R2 and reconstruction reports")
    p.add_argument("--model")
    p.add_argument("--surrogate")
    p.add_argument("--manifest")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _config_path(argv) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def read_config(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _typed(action, raw: str):
    if isinstance(action, argparse._StoreTrueAction):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{action.dest}: expected a boolean, got {raw!r}")
    value = action.type(raw) if action.type else raw
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"{action.dest}: {value!r} is not one of {sorted(action.choices)}")
    return value


def apply_config(sub: argparse.ArgumentParser, path: str) -> None:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} does not exist")
    actions = {a.dest: a for a in sub._actions if a.option_strings and a.dest not in ("help", "config")}
    values = {}
    for key, raw in read_config(p.read_text()).items():
        if key not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _typed(actions[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    sub.set_defaults(**values)


def parse_args(argv):
    parser = build_parser()
    cmd = argv[0] if argv and argv[0] in SUBCOMMANDS else None
    cfg_path = _config_path(argv)
    if cmd and cfg_path:
        try:
            apply_config(_subparser(parser, cmd), cfg_path)
        except ConfigError as exc:
            _subparser(parser, cmd).error(str(exc))
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        parser.exit(2)
    sub = _subparser(parser, args.command)
    missing = [name for name in getattr(args, "required", ()) if getattr(args, name) in (None, "")]
    if missing:
        flags = ", ".join("--" + {"input": "in", "from_id": "from", "to_id": "to"}.get(m, m).replace("_", "-")
                          for m in missing)
        sub.error(f"missing required option(s): {flags}")
    one_of = getattr(args, "one_of", ())
    if one_of and sum(getattr(args, name) is not None for name in one_of) != 1:
        sub.error("pass exactly one of --in or --manifest")
    if args.jobs < 1:
        sub.error("--jobs must be positive")
    if not 0 <= args.seed < 2**64:
        sub.error("--seed must be an unsigned 64-bit integer")
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        args.func(args)
    except ConfigError as exc:
        print(f"poredesign {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (PoreDesignError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"poredesign {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
