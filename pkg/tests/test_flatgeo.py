import struct

import numpy as np
import pytest
from oracles import oracle_grid, random_mesh

from flatmae.errors import DimensionError, EmptyMeshError, FormatError, ValidationError
from flatmae.flatgeo import (
    FlatMapResampler,
    FlatMesh,
    build_grid,
    load_grid,
    load_mesh,
    resample_frame,
    resample_frames,
    save_grid,
    save_mesh,
)


# ---------------------------------------------------------------- mesh I/O


def test_minimal_mesh_round_trip(tmp_path):
    mesh = FlatMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]), np.ones(3, bool))
    save_mesh(mesh, tmp_path / "m.fmesh")
    back = load_mesh(tmp_path / "m.fmesh")
    assert back.n_vertices == 3 and back.n_triangles == 1
    np.testing.assert_array_equal(back.vertex_xyz, mesh.vertex_xyz)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)


def _raw_mesh(xyz, tri, valid):
    return (
        b"FMESH1\0"
        + struct.pack("<II", len(xyz), len(tri))
        + np.asarray(xyz, "<f4").tobytes()
        + np.asarray(tri, "<u4").tobytes()
        + np.asarray(valid, "u1").tobytes()
    )


def test_out_of_range_triangle_index(tmp_path):
    p = tmp_path / "bad.fmesh"
    p.write_bytes(_raw_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 999]], [1, 1, 1]))
    with pytest.raises(ValidationError, match="999"):
        load_mesh(p)


def test_bad_magic_and_truncation(tmp_path):
    good = _raw_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]], [1, 1, 1])
    (tmp_path / "a").write_bytes(b"XMESH1\0" + good[7:])
    (tmp_path / "b").write_bytes(good[:-2])
    for name in "ab":
        with pytest.raises(FormatError):
            load_mesh(tmp_path / name)


def test_valid_vertex_must_be_planar():
    with pytest.raises(ValidationError):
        FlatMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.5]]), np.array([[0, 1, 2]]), np.ones(3, bool))


def test_degenerate_triangle_rejected():
    with pytest.raises(ValidationError):
        FlatMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float), np.array([[0, 1, 2]]), np.ones(3, bool))


def test_58212_valid_vertices(tmp_path):
    # 242 x 241 lattice = 58322 vertices; lift 110 of them off the plane
    ny, nx = 242, 241
    yy, xx = np.mgrid[0:ny, 0:nx]
    xyz = np.column_stack([xx.ravel() * 1.0, yy.ravel() * 1.0, np.zeros(nx * ny)])
    lifted = np.zeros(nx * ny, dtype=bool)
    lifted[np.arange(110) * 530 + 7] = True
    xyz[lifted, 2] = 1.0
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    tri = np.concatenate([np.stack([a, b, c], 1), np.stack([b, d, c], 1)])
    mesh = FlatMesh(xyz, tri, xyz[:, 2] == 0)
    save_mesh(mesh, tmp_path / "big.fmesh")
    assert load_mesh(tmp_path / "big.fmesh").n_valid == 58212


# ---------------------------------------------------------------- grid build


def test_centroid_weights():
    # centroid and bounding-box centre coincide at the origin
    mesh = FlatMesh(np.array([[-1, -1, 0], [1, 0, 0], [0, 1, 0]], float), np.array([[0, 1, 2]]), np.ones(3, bool))
    grid = build_grid(mesh, 1, 1, 0.1)
    assert grid.valid_pixel.all()
    w = dict(grid.pixel_weights(0))
    np.testing.assert_allclose([w[0], w[1], w[2]], [1 / 3] * 3, atol=1e-12)


def test_pixel_on_vertex_gets_unit_weight():
    xyz = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0], [0, 0, 0]], float)
    tri = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    grid = build_grid(FlatMesh(xyz, tri, np.ones(5, bool)), 1, 1, 0.5)
    w = {v: x for v, x in grid.pixel_weights(0) if x > 0}
    assert w == pytest.approx({4: 1.0})


def test_no_valid_triangles():
    xyz = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 1.0]])
    with pytest.raises(EmptyMeshError):
        build_grid(FlatMesh(xyz, np.array([[0, 1, 2]]), np.array([1, 1, 0], bool)), 4, 4, 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_grid_matches_brute_force(seed):
    mesh = random_mesh(seed, n=120)
    grid = build_grid(mesh, 24, 24, 2.0)
    valid, weights, _ = oracle_grid(mesh, 24, 24, 2.0)
    np.testing.assert_array_equal(grid.valid_pixel, valid)
    for k, (i, j) in enumerate(np.argwhere(valid)):
        got = {v: w for v, w in grid.pixel_weights(k) if w > 0}
        want = {v: w for v, w in weights[(i, j)].items() if w > 0}
        assert got.keys() == want.keys()
        for v in got:
            assert abs(got[v] - want[v]) < 1e-9


def test_pixel_centres_centred_on_valid_bbox():
    mesh = random_mesh(7)
    grid = build_grid(mesh, 10, 16, 3.0)
    x, y = grid.pixel_centers()
    xy = mesh.vertex_xyz[mesh.valid_vertex, :2]
    assert x.mean() == pytest.approx((xy[:, 0].min() + xy[:, 0].max()) / 2, abs=1e-9)
    assert y.mean() == pytest.approx((xy[:, 1].min() + xy[:, 1].max()) / 2, abs=1e-9)
    assert np.all(np.diff(y[:, 0]) < 0)  # row 0 at the top


def test_partition_of_unity(synth_grid):
    sums = np.asarray(synth_grid.weights.sum(axis=1)).ravel()
    assert np.abs(sums - 1).max() < 1e-9
    assert synth_grid.weights.data.min() >= 0


def test_background_is_complement_of_covered(synth_mesh, synth_grid):
    valid, _, _ = oracle_grid(synth_mesh, 32, 48, 1.2)
    np.testing.assert_array_equal(~synth_grid.valid_pixel, ~valid)


def test_build_is_deterministic(synth_mesh, synth_grid):
    again = build_grid(synth_mesh, 32, 48, 1.2)
    assert again.digest() == synth_grid.digest()


def test_grid_file_round_trip(tmp_path, synth_grid):
    save_grid(synth_grid, tmp_path / "g.fgrid")
    back = load_grid(tmp_path / "g.fgrid")
    assert back.digest() == synth_grid.digest()
    assert (tmp_path / "g.fgrid").read_bytes() == _bytes_of(back, tmp_path)
    np.testing.assert_array_equal(back.weights.toarray(), synth_grid.weights.toarray())
    (tmp_path / "bad.fgrid").write_bytes(b"FGRID2\0" + (tmp_path / "g.fgrid").read_bytes()[7:])
    with pytest.raises(FormatError):
        load_grid(tmp_path / "bad.fgrid")


def _bytes_of(grid, tmp_path):
    save_grid(grid, tmp_path / "again.fgrid")
    return (tmp_path / "again.fgrid").read_bytes()


# ---------------------------------------------------------------- resampling


def test_constant_field(synth_mesh, synth_grid):
    frame = resample_frame(synth_grid, np.full(synth_mesh.n_vertices, 3.25))
    assert np.abs(frame.pixels[frame.valid] - 3.25).max() < 1e-12
    assert np.all(frame.pixels[~frame.valid] == 0)


@pytest.mark.parametrize("seed", range(4))
def test_affine_field_reproduced(seed):
    rng = np.random.default_rng(seed)
    mesh = random_mesh(100 + seed, n=200)
    grid = build_grid(mesh, 32, 32, 1.3)
    a, b, c = rng.normal(size=3)
    vals = a * mesh.vertex_xyz[:, 0] + b * mesh.vertex_xyz[:, 1] + c
    frame = resample_frame(grid, vals)
    x, y = grid.pixel_centers()
    expect = a * x + b * y + c
    assert np.abs(frame.pixels - expect)[grid.valid_pixel].max() < 1e-6


def test_random_field_matches_oracle():
    mesh = random_mesh(42, n=100)
    grid = build_grid(mesh, 20, 20, 2.2)
    valid, weights, _ = oracle_grid(mesh, 20, 20, 2.2)
    vals = np.random.default_rng(0).normal(size=mesh.n_vertices)
    frame = resample_frame(grid, vals)
    expect = np.zeros((20, 20))
    for (i, j), w in weights.items():
        expect[i, j] = sum(vals[v] * x for v, x in w.items())
    assert np.abs(frame.pixels - expect).max() < 1e-6


def test_multi_frame_and_length_check(synth_mesh, synth_grid):
    vals = np.random.default_rng(1).normal(size=(synth_mesh.n_vertices, 5))
    frames = resample_frames(synth_grid, vals)
    assert frames.shape == (5, 32, 48)
    np.testing.assert_allclose(frames[3], resample_frame(synth_grid, vals[:, 3]).pixels, atol=1e-12)
    with pytest.raises(DimensionError):
        resample_frame(synth_grid, np.zeros(synth_mesh.n_vertices + 1))


def test_resampler_estimator(synth_mesh, synth_grid):
    est = FlatMapResampler(height=32, width=48, pixel_mm=1.2)
    assert est.get_params() == {"height": 32, "width": 48, "pixel_mm": 1.2}
    out = est.fit(synth_mesh).transform(np.ones(synth_mesh.n_vertices))
    assert est.grid_.digest() == synth_grid.digest()
    assert np.allclose(out[synth_grid.valid_pixel], 1.0)
