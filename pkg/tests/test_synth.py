import numpy as np
import pytest
from sklearn.svm import LinearSVC

from flatmae.flatgeo import build_grid
from flatmae.synth import SynthSpec, make_clip_dataset, make_mesh, make_parcels, make_run, task_clip_starts


def test_mesh_determinism_and_invariants():
    spec = SynthSpec(n_vertices=300, cut_frac=0.1, seed=11)
    a, b = make_mesh(spec), make_mesh(spec)
    assert a.n_vertices == 300
    assert np.array_equal(a.vertex_xyz, b.vertex_xyz) and np.array_equal(a.triangles, b.triangles)
    assert np.all(a.vertex_xyz[a.valid_vertex, 2] == 0)
    assert 0 < a.valid_vertex.sum() < 300
    other = make_mesh(SynthSpec(n_vertices=300, cut_frac=0.1, seed=12))
    assert not np.array_equal(a.vertex_xyz, other.vertex_xyz)


def test_spec_validation():
    for bad in [dict(n_components=0), dict(snr=0.0), dict(n_classes=0), dict(n_vertices=2)]:
        with pytest.raises(ValueError):
            SynthSpec(**bad)
    spec = SynthSpec()
    with pytest.raises(ValueError):
        make_run(spec, 2, make_mesh(spec))


def test_run_determinism(synth_spec, synth_mesh):
    a, la = make_run(synth_spec, 1, synth_mesh, 3)
    b, lb = make_run(synth_spec, 1, synth_mesh, 3)
    assert a.values.tobytes() == b.values.tobytes()
    assert np.array_equal(la["clean"], lb["clean"])
    c, _ = make_run(synth_spec, 1, synth_mesh, 4)
    assert not np.array_equal(a.values, c.values)


def test_values_are_latent_sum_plus_noise(synth_spec, synth_mesh):
    run, lat = make_run(synth_spec, 0, synth_mesh)
    total = np.einsum("k,kv,kt->vt", lat["amplitude"], lat["spatial"], lat["temporal"])
    scale = total.std()
    np.testing.assert_allclose(lat["clean"], total / scale, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(run.values, lat["clean"] + lat["noise"], atol=1e-12)


def test_high_snr_limit(synth_mesh):
    spec = SynthSpec(n_vertices=400, n_frames=64, cut_frac=0.05, seed=3, snr=1e12)
    run, lat = make_run(spec, 1, synth_mesh)
    assert np.abs(run.values - lat["clean"]).max() < 1e-9


@pytest.mark.parametrize("snr", [0.5, 1.0, 3.0])
def test_clean_signal_retrievability(snr, synth_mesh):
    """Regressing a run on its stored component terms explains snr^2 / (1 + snr^2) of the variance."""
    r2s = []
    for seed in range(20):
        spec = SynthSpec(n_vertices=400, n_frames=64, cut_frac=0.05, seed=seed, snr=snr)
        run, lat = make_run(spec, seed % 2, synth_mesh, seed)
        terms = np.einsum("k,kv,kt->kvt", lat["amplitude"], lat["spatial"], lat["temporal"])
        A = terms.reshape(len(terms), -1).T
        y = run.values.ravel()
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        r2s.append(1 - ((y - A @ coef) ** 2).sum() / ((y - y.mean()) ** 2).sum())
    target = snr**2 / (1 + snr**2)
    assert np.mean(r2s) >= target * 0.95
    assert abs(np.mean(r2s) - target) <= 0.05 * target


def test_orthogonal_profiles_parcel_means_separable():
    spec = SynthSpec(n_vertices=500, n_frames=120, snr=1.0, seed=2, profiles=np.array([[1, 0, 1, 0], [0, 1, 0, 1]]))
    mesh = make_mesh(spec)
    grid = build_grid(mesh, 32, 48, 1.2)
    X, y = make_clip_dataset(spec, mesh, grid, runs_per_class=10, clips_per_run=3)
    labels = make_parcels(grid, 24, seed=0)
    feats = np.stack([X[:, :, labels == k].mean(axis=(1, 2)) for k in range(1, 25)], axis=1)
    svm = LinearSVC(C=1e4, max_iter=200000).fit(feats, y)
    assert svm.score(feats, y) == 1.0


def test_task_clip_starts_inside_blocks(synth_spec, synth_mesh):
    _, lat = make_run(synth_spec, 0, synth_mesh, 1)
    starts = task_clip_starts(lat, 16)
    assert len(starts) > 0
    for s in starts:
        assert lat["task_on"][s : s + 16].all()


def test_clip_dataset_shapes(synth_spec, synth_mesh, synth_grid):
    X, y, clean = make_clip_dataset(synth_spec, synth_mesh, synth_grid, runs_per_class=2, with_clean=True)
    assert X.shape == (8, 16) + synth_grid.valid_pixel.shape and X.dtype == np.float32
    assert clean.shape == X.shape
    assert y.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]
