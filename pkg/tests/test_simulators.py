import json

import numpy as np
import pytest

from smnet.cloud_io import read_cloud
from smnet.simulators import (SimulationError, SurrogateSpec, default_split, draw_control,
                              generate_dataset, least_squares_control, linearity_probe, load_manifest,
                              make_layout, manifest_spec, response_matrix, sample_seed, simulate,
                              smoothing_matrix, spec_hash)

PLATE = make_layout("plate")
THERMAL = SurrogateSpec.for_mechanism("thermal", "plate")


def test_layout_sizes():
    assert PLATE.control_dim == 36
    assert make_layout("cube", shared_cells=False).control_dim == 216
    assert make_layout("cube").control_dim == 152   # 6^3 - 4^3 surface voxels


def test_cube_shared_cells_are_surface_voxels():
    cube = make_layout("cube")
    counts = np.bincount(cube.control_index, minlength=cube.control_dim)
    # face interiors 6*16, edges 12*4 (two faces), corners 8 (three faces)
    assert sorted(np.unique(counts, return_counts=True)[1].tolist()) == [8, 48, 96]
    assert np.all(np.abs(cube.control_positions).max(axis=1) == 2.5)


def test_zero_control_is_undeformed():
    cloud = simulate(np.zeros(36), THERMAL, PLATE, seed=3)
    np.testing.assert_array_equal(cloud.points, cloud.reference_points)


def test_single_cell_displacement_at_its_centre():
    # a bump of radius 0.5 centred on a unit cell reaches no other cell centre
    pts = PLATE.cell_centers
    r = response_matrix(THERMAL, PLATE, pts, np.zeros(len(pts), dtype=int))
    d2 = (pts ** 2).sum(axis=1)
    want = THERMAL.amplitude * (1 - np.exp(-d2 / (2 * THERMAL.anchor_width ** 2)))
    np.testing.assert_allclose(r, np.diag(want), atol=1e-12)


def test_anchor_is_fixed():
    spec = SurrogateSpec.for_mechanism("ionic", "cube")
    cube = make_layout("cube")
    cloud = simulate(draw_control(0, cube.control_dim), spec, cube, density=8, seed=0)
    corners = np.abs(np.abs(cloud.reference_points) - 3.0).max(axis=1) < 1e-12
    assert corners.sum() == 8
    np.testing.assert_array_equal(cloud.points[corners], cloud.reference_points[corners])


@pytest.mark.parametrize("mech,topo", [("thermal", "plate"), ("ionic", "plate"),
                                       ("ionic", "cube"), ("pneumatic", "cube")])
def test_linearity(mech, topo):
    probe = linearity_probe(SurrogateSpec.for_mechanism(mech, topo), make_layout(topo), density=6)
    assert probe["superposition_ok"] and probe["stencil_ok"]


def test_pneumatic_smoothing_rows_sum_to_one_and_couple_neighbours():
    cube = make_layout("cube")
    s = smoothing_matrix(SurrogateSpec.for_mechanism("pneumatic", "cube"), cube)
    np.testing.assert_allclose(s.sum(axis=1), 1.0)
    assert (s > 0).sum(axis=1).min() > 1


def test_control_range_checked():
    with pytest.raises(SimulationError, match=r"control\[2\]"):
        simulate([0, 0, 1.5] + [0] * 33, THERMAL, PLATE)
    with pytest.raises(SimulationError, match="35 entries"):
        simulate(np.zeros(35), THERMAL, PLATE)


def test_simulation_deterministic_per_seed():
    u = draw_control(7, 36)
    a = simulate(u, THERMAL, PLATE, seed=7).points
    np.testing.assert_array_equal(a, simulate(u, THERMAL, PLATE, seed=7).points)
    assert not np.array_equal(a, simulate(u, THERMAL, PLATE, seed=8).points)


def test_least_squares_inverts_the_surrogate():
    u = draw_control(9, 36)
    pts = simulate(u, THERMAL, PLATE, seed=9).points
    np.testing.assert_allclose(least_squares_control(pts, THERMAL, PLATE), u, atol=1e-8)


def test_seeds_and_split():
    assert sample_seed(42, 0) == sample_seed(42, 0) != sample_seed(42, 1)
    assert default_split(100) == (list(range(98)), [98, 99])
    assert default_split(1) == ([0], [])
    with pytest.raises(SimulationError):
        default_split(5, 6)
    u = draw_control(1, 36)
    assert u.min() >= -1 and u.max() <= 1


def test_spec_hash_tracks_parameters():
    assert spec_hash(THERMAL, PLATE) == spec_hash(SurrogateSpec.for_mechanism("thermal"), make_layout())
    assert spec_hash(THERMAL, PLATE) != spec_hash(SurrogateSpec(amplitude=0.5), PLATE)


def test_generate_dataset(tmp_path):
    m = generate_dataset(5, THERMAL, PLATE, 6, 42, tmp_path, n_test=2)
    assert m["split"] == {"train": [0, 1, 2], "test": [3, 4]}
    loaded = load_manifest(tmp_path)
    spec, layout = manifest_spec(loaded)
    assert spec == THERMAL and layout.control_dim == 36
    s = loaded["samples"][3]
    cloud = read_cloud(tmp_path / s["file"])
    want = simulate(s["control"], THERMAL, PLATE, 6, s["seed"]).points
    np.testing.assert_allclose(cloud.points, want, atol=1e-6)
    again = tmp_path / "again"
    generate_dataset(5, THERMAL, PLATE, 6, 42, again, n_test=2)
    assert (again / "manifest.json").read_bytes() == (tmp_path / "manifest.json").read_bytes()
    for i in range(5):
        name = f"clouds/{i:06d}.pcd"
        assert (again / name).read_bytes() == (tmp_path / name).read_bytes()


def test_threads_do_not_change_output(tmp_path):
    generate_dataset(4, THERMAL, PLATE, 6, 1, tmp_path / "a", threads=1)
    generate_dataset(4, THERMAL, PLATE, 6, 1, tmp_path / "b", threads=3)
    for name in ["manifest.json"] + [f"clouds/{i:06d}.pcd" for i in range(4)]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_validation(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format": "other"}))
    with pytest.raises(SimulationError):
        load_manifest(tmp_path)


def _off_cell_energy(mech):
    spec = SurrogateSpec.for_mechanism(mech, "cube")
    cube = make_layout("cube")
    j = int(cube.control_index[14])  # an interior cell of the first face
    u = np.zeros(cube.control_dim)
    u[j] = 1.0
    cloud = simulate(u, spec, cube, density=24, seed=0)
    disp = np.linalg.norm(cloud.points - cloud.reference_points, axis=1)
    centre = cube.cell_centers[14]
    outside = np.abs(cloud.reference_points - centre).max(axis=1) > 0.5
    return float((disp[outside] ** 2).sum())


def test_coupling_ordering():
    e = [_off_cell_energy(m) for m in ("thermal", "ionic", "pneumatic")]
    assert e[0] < e[1] < e[2]


def test_one_hot_thermal_support_and_peak():
    u = np.zeros(36)
    u[7] = 1.0
    pts = np.vstack([PLATE.cell_centers, np.random.default_rng(0).uniform(-3, 3, (400, 3)) * [1, 1, 0]])
    disp = response_matrix(THERMAL, PLATE, pts, np.zeros(len(pts), dtype=int)) @ u
    c = PLATE.cell_centers[7]
    far = np.linalg.norm(pts - c, axis=1) >= THERMAL.kernel_radius
    assert np.all(disp[far] == 0)
    w = 1 - np.exp(-(c ** 2).sum() / (2 * THERMAL.anchor_width ** 2))
    assert disp[7] == pytest.approx(THERMAL.amplitude * w, rel=1e-12)
    assert np.abs(disp).max() <= THERMAL.amplitude * w + 1e-12


def test_lipschitz_in_control():
    for mech, topo in (("thermal", "plate"), ("pneumatic", "cube")):
        spec, lay = SurrogateSpec.for_mechanism(mech, topo), make_layout(topo)
        rows = smoothing_matrix(spec, lay).sum(axis=1).max()
        u, v = draw_control(1, lay.control_dim), draw_control(2, lay.control_dim)
        a = simulate(u, spec, lay, 8, 0).points
        b = simulate(v, spec, lay, 8, 0).points
        assert np.abs(a - b).max() <= spec.amplitude * np.abs(u - v).max() * rows + 1e-12


def test_controls_are_uniform():
    from scipy import stats
    u = np.array([draw_control(sample_seed(42, i), 36) for i in range(1000)])
    z = u.mean(axis=0) / np.sqrt(1 / 3 / 1000)
    # 3 sigma per dimension, Sidak-corrected for 36 simultaneous dimensions
    bound = stats.norm.isf((1 - (1 - 0.0027) ** (1 / 36)) / 2)
    assert np.all(np.abs(z) < bound)
    assert u.min() >= -1 and u.max() <= 1
    # and the per-dimension z-scores over many master seeds look standard normal
    zs = [np.array([draw_control(sample_seed(m, i), 36) for i in range(200)]).mean(axis=0)
          / np.sqrt(1 / 3 / 200) for m in range(30)]
    assert stats.kstest(np.concatenate(zs), "norm").pvalue > 0.01
