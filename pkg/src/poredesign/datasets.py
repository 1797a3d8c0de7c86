"""Labeled desk-scale datasets: generated grids with LBM porosity and K11."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GeneratorConfig, VoxelGrid, porosity, synthetic_samples
from .lbm import FlowConfig
from .perm import homogenize

# 32^2 slices extruded along x; 8-voxel pores keep held-out reconstruction tractable
DESK_GENERATOR = GeneratorConfig(image_size=32, depth=8, pore_size=8, n_pores_min=2, n_pores_max=6)


@dataclass
class LabeledSet:
    ids: list
    images: np.ndarray  # (n, ny, nz) first (y, z) slice, 1 = solid
    props: np.ndarray  # (n, 2): n_F, K11 in lattice units
    n_pores: np.ndarray
    steps: np.ndarray

    def __len__(self):
        return len(self.ids)

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet([self.ids[i] for i in idx], self.images[idx], self.props[idx], self.n_pores[idx], self.steps[idx])


def label_k11(g: VoxelGrid, flow: FlowConfig | None = None) -> tuple[float, float, int]:
    """(n_F, K11, LBM steps) from a no-slip run along x."""
    h = homogenize(g, flow or FlowConfig(), axes=(0,))
    return porosity(g), float(h.tensor.lattice[0, 0]), int(h.steps[0])


def build_labeled_set(gen: GeneratorConfig, flow: FlowConfig | None = None) -> LabeledSet:
    ids, imgs, props, npores, steps = [], [], [], [], []
    for s in synthetic_samples(gen):
        nf, k, st = label_k11(s.grid, flow)
        ids.append(f"s{s.index:05d}")
        imgs.append(s.grid.voxels[0])
        props.append((nf, k))
        npores.append(s.n_pores)
        steps.append(st)
    return LabeledSet(ids, np.stack(imgs).astype(np.float64), np.array(props), np.array(npores), np.array(steps))


def save_labeled_set(ds: LabeledSet, path) -> None:
    np.savez_compressed(path, ids=np.array(ds.ids), images=ds.images.astype(np.uint8), props=ds.props,
                        n_pores=ds.n_pores, steps=ds.steps)


def load_labeled_set(path) -> LabeledSet:
    with np.load(path) as d:
        return LabeledSet(list(d["ids"]), d["images"].astype(np.float64), d["props"], d["n_pores"], d["steps"])
