import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from poredesign.errors import ConfigError, FormatError
from poredesign.grid import (
    MAGIC,
    GeneratorConfig,
    GrayVolume,
    VoxelGrid,
    binarize,
    decode_grid,
    encode_grid,
    generate_synthetic,
    porosity,
    read_grid,
    solidity,
    subsample,
    subsample_origins,
    synthetic_samples,
    write_grid,
)


def test_forced_pore_count_gives_exact_porosity():
    cfg = GeneratorConfig(image_size=100, depth=100, pore_size=10, n_pores_min=25, n_pores_max=25)
    (g,) = generate_synthetic(cfg)
    assert g.dims == (100, 100, 100)
    assert np.count_nonzero(g.voxels[0] == 0) == 2500
    assert porosity(g) == 0.25


def test_porosity_extremes():
    assert porosity(VoxelGrid(np.zeros((3, 4, 5), np.uint8))) == 1.0
    assert porosity(VoxelGrid(np.ones((3, 4, 5), np.uint8))) == 0.0


def test_same_seed_is_bit_identical():
    cfg = GeneratorConfig(image_size=32, depth=4, pore_size=4, n_pores_min=5, n_pores_max=20, seed=7, count=5)
    a = generate_synthetic(cfg)
    b = generate_synthetic(cfg)
    assert all(np.array_equal(x.voxels, y.voxels) for x, y in zip(a, b))
    c = generate_synthetic(GeneratorConfig(**{**cfg.__dict__, "seed": 8}))
    assert not all(np.array_equal(x.voxels, y.voxels) for x, y in zip(a, c))


def test_resumed_generation_matches():
    cfg = GeneratorConfig(image_size=32, depth=2, pore_size=4, n_pores_min=5, n_pores_max=20, seed=3, count=6)
    full = [s.grid for s in synthetic_samples(cfg)]
    tail = [s.grid for s in synthetic_samples(cfg, start=4)]
    assert full[4:] == tail


@pytest.mark.parametrize(
    "kw",
    [
        {"pore_size": 40, "image_size": 32},
        {"n_pores_min": 5, "n_pores_max": 4},
        {"n_pores_max": 11, "pore_size": 10, "image_size": 32},
        {"count": 0},
        {"seed": -1},
    ],
)
def test_invalid_generator_config(kw):
    with pytest.raises(ConfigError):
        GeneratorConfig(**kw).validate()


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**64 - 1),
    pore=st.integers(1, 6),
    n=st.integers(0, 12),
)
def test_generated_sample_invariants(seed, pore, n):
    size = 24
    n = min(n, (size // pore) ** 2 // 2)
    cfg = GeneratorConfig(image_size=size, depth=3, pore_size=pore, n_pores_min=n, n_pores_max=n, seed=seed)
    (s,) = list(synthetic_samples(cfg))
    v = s.grid.voxels
    # extrusion
    assert (v == v[:1]).all()
    # pores never overlap: each pore covers pore^2 fresh pixels
    cover = np.zeros((size, size), int)
    for r, c in s.corners:
        assert 0 <= r <= size - pore and 0 <= c <= size - pore
        cover[r : r + pore, c : c + pore] += 1
    assert cover.max() <= 1
    assert np.array_equal(cover == 1, v[0] == 0)
    assert porosity(s.grid) == n * pore**2 / size**2
    assert porosity(s.grid) + solidity(s.grid) == 1.0


def test_voxelgrid_rejects_bad_input():
    with pytest.raises(ValueError):
        VoxelGrid(np.full((2, 2, 2), 2))
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        VoxelGrid(np.zeros((2, 2, 2)), spacing=(1e-6, 0.0, 1e-6))


def test_voxelgrid_is_immutable():
    g = VoxelGrid(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ValueError):
        g.voxels[0, 0, 0] = 1


def test_subsample_counts():
    assert len(subsample_origins((1100, 1100, 300), (100, 100, 100), (50, 50, 100))) == 21 * 21 * 3
    with pytest.raises(ValueError):
        subsample_origins((10, 10, 10), (11, 5, 5), (1, 1, 1))
    with pytest.raises(ValueError):
        subsample_origins((10, 10, 10), (5, 5, 5), (0, 1, 1))


@settings(max_examples=30, deadline=None)
@given(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)), st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)), st.integers(0, 2**32 - 1))
def test_tiling_reassembles_parent(size, reps, seed):
    dims = tuple(s * r for s, r in zip(size, reps))
    g = VoxelGrid(np.random.default_rng(seed).integers(0, 2, dims).astype(np.uint8))
    tiles = subsample(g, size)
    assert len(tiles) == np.prod(reps)
    out = np.full(dims, 9, np.uint8)
    for (i, j, k), t in zip(subsample_origins(dims, size, size), tiles):
        out[i : i + size[0], j : j + size[1], k : k + size[2]] = t.voxels
    assert np.array_equal(out, g.voxels)


def test_binarize():
    assert binarize(GrayVolume(np.full((2, 2, 2), 0.7)), 0.5).voxels.all()
    assert not binarize(GrayVolume(np.full((2, 2, 2), 0.3)), 0.5).voxels.any()
    assert binarize(GrayVolume(np.full((1, 1, 1), 0.5))).voxels.all()
    for t in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            binarize(GrayVolume(np.full((1, 1, 1), 0.5)), t)
    with pytest.raises(ValueError):
        GrayVolume(np.full((1, 1, 1), 1.5))


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 1)),
    st.tuples(*[st.floats(1e-9, 1e-3)] * 3),
)
def test_encode_decode_roundtrip(vox, spacing):
    g = VoxelGrid(vox, spacing)
    assert decode_grid(encode_grid(g)) == g


def test_many_random_grids_roundtrip():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        dims = tuple(rng.integers(1, 5, 3))
        g = VoxelGrid(rng.integers(0, 2, dims).astype(np.uint8), tuple(rng.uniform(1e-7, 1e-5, 3)))
        assert decode_grid(encode_grid(g)) == g


def test_file_roundtrip_and_layout(tmp_path):
    vox = np.zeros((3, 2, 1), np.uint8)
    vox[1, 0, 0] = 1
    g = VoxelGrid(vox, (1e-6, 2e-6, 3e-6))
    p = tmp_path / "g.vxg"
    write_grid(g, p)
    data = p.read_bytes()
    assert data[:4] == MAGIC
    assert data[40] == 1
    # x-fastest body
    assert list(data[41:]) == [0, 1, 0, 0, 0, 0]
    assert read_grid(p) == g


def test_malformed_files():
    data = encode_grid(VoxelGrid(np.ones((2, 2, 2), np.uint8)))
    with pytest.raises(FormatError):
        decode_grid(data[:-1])
    with pytest.raises(FormatError):
        decode_grid(data[:10])
    with pytest.raises(FormatError):
        decode_grid(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        decode_grid(data[:-1] + b"\x02")


def test_polarity_zero_is_inverted():
    data = bytearray(encode_grid(VoxelGrid(np.ones((1, 1, 2), np.uint8))))
    data[40] = 0
    assert not decode_grid(bytes(data)).voxels.any()


def test_rotate90_z_moves_axes():
    vox = np.zeros((4, 3, 2), np.uint8)
    vox[0, 0, :] = 1
    r = VoxelGrid(vox, (1e-6, 2e-6, 3e-6)).rotate90_z()
    assert r.dims == (3, 4, 2)
    assert r.spacing == (2e-6, 1e-6, 3e-6)
    assert r.voxels.sum() == vox.sum()
