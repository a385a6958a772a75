import numpy as np
import pytest

from scenediff.lidar import SensorModel, default_sensor, read_cloud, simulate, write_cloud
from scenediff.scenes import GridSpec, VoxelScene

from conftest import random_scene


def single_beam(elev=0.0, azim_step=90.0, origin=(0.05, 0.05, 0.05), max_range=50.0):
    return SensorModel(
        elevations_deg=(elev,),
        azimuth_step_deg=azim_step,
        origin=origin,
        min_range=0.05,
        max_range=max_range,
    )


def centered_grid(half=16, res=1.0, height=8):
    return GridSpec((-half * res, -half * res, 0.0), (half * res, half * res, height * res), res)


# ------------------------------ sensor model ------------------------------

def test_default_profiles_have_expected_beam_counts():
    assert len(default_sensor("64-beam").elevations_deg) == 64
    assert len(default_sensor("128-beam").elevations_deg) == 128
    with pytest.raises(ValueError):
        default_sensor("32-beam")


def test_elevations_strictly_increasing():
    for profile in ("64-beam", "128-beam"):
        elev = default_sensor(profile).elevations_deg
        assert all(b > a for a, b in zip(elev, elev[1:]))


def test_sensor_validation():
    with pytest.raises(ValueError):
        SensorModel(elevations_deg=(0.0, 0.0))
    with pytest.raises(ValueError):
        SensorModel(elevations_deg=(0.0,), min_range=0.0)
    with pytest.raises(ValueError):
        SensorModel(elevations_deg=(0.0,), min_range=5.0, max_range=1.0)
    with pytest.raises(ValueError):
        SensorModel(elevations_deg=(0.0,), azimuth_step_deg=0.7)  # does not divide 360


def test_ray_count():
    sensor = SensorModel(elevations_deg=(-1.0, 1.0), azimuth_step_deg=45.0)
    assert sensor.ray_directions().shape == (2 * 8, 3)


# ------------------------------- simulate -------------------------------

def test_empty_scene_returns_empty_cloud():
    grid = centered_grid()
    scene = VoxelScene(grid, np.zeros((0, 3)), np.zeros((0,)), 3)
    pts, labels = simulate(scene, single_beam(origin=(0.0, 0.0, 0.5)))
    assert pts.shape == (0, 3)
    assert labels.shape == (0,)


def test_single_voxel_on_axis_ray():
    grid = centered_grid(half=16, res=1.0, height=8)
    # voxel whose center sits exactly on the 0/0 ray at 10 m: index x = 16 + 10
    scene = VoxelScene(grid, [[26, 16, 0]], [3], class_count=3)
    sensor = single_beam(origin=(0.0, 0.5, 0.5), azim_step=90.0)
    pts, labels = simulate(scene, sensor)
    assert pts.shape == (1, 3)
    assert np.allclose(pts[0], [10.5, 0.5, 0.5])
    assert labels[0] == 3
    assert np.isclose(np.linalg.norm(pts[0] - np.array(sensor.origin)), 10.5)


def test_occlusion_keeps_nearer_voxel():
    grid = centered_grid()
    near, far = [20, 16, 0], [26, 16, 0]
    scene = VoxelScene(grid, [near, far], [1, 2], class_count=2)
    pts, labels = simulate(scene, single_beam(origin=(0.0, 0.5, 0.5)))
    assert pts.shape[0] == 1
    assert labels[0] == 1
    assert np.allclose(pts[0], [4.5, 0.5, 0.5])


def test_hit_beyond_max_range_is_dropped():
    grid = centered_grid()
    scene = VoxelScene(grid, [[26, 16, 0]], [1], class_count=1)
    sensor = single_beam(origin=(0.0, 0.5, 0.5), max_range=5.0)
    pts, _ = simulate(scene, sensor)
    assert pts.shape[0] == 0


def test_too_close_hit_blocks_the_beam():
    grid = centered_grid()
    # first voxel center ~0.5 m away with min_range 2: blocked, nothing behind shows
    scene = VoxelScene(grid, [[17, 16, 0], [26, 16, 0]], [1, 2], class_count=2)
    sensor = SensorModel(
        elevations_deg=(0.0,), azimuth_step_deg=90.0, origin=(0.0, 0.5, 0.5),
        min_range=2.0, max_range=50.0,
    )
    pts, _ = simulate(scene, sensor)
    assert pts.shape[0] == 0


def test_origin_outside_grid_rejected():
    grid = centered_grid()
    scene = VoxelScene(grid, [[0, 0, 0]], [1], class_count=1)
    with pytest.raises(ValueError):
        simulate(scene, single_beam(origin=(100.0, 0.0, 0.0)))


def test_every_point_lies_inside_an_occupied_voxel(rng):
    sensor = SensorModel(
        elevations_deg=tuple(np.linspace(-20, 10, 8)),
        azimuth_step_deg=10.0,
        origin=(0.5, 0.5, 0.5),
        min_range=0.05,
        max_range=60.0,
    )
    for _ in range(25):
        grid = GridSpec((-8.0, -8.0, -4.0), (8.0, 8.0, 4.0), 1.0)
        occ = rng.random(grid.dims) < 0.08
        occ[8, 8, 4] = False  # keep the origin cell free
        coords = np.argwhere(occ)
        if coords.shape[0] == 0:
            continue
        scene = VoxelScene(grid, coords, rng.integers(1, 4, size=coords.shape[0]), 3)
        pts, labels = simulate(scene, sensor)
        occupied = {tuple(c) for c in scene.coords}
        idx = grid.point_to_index(pts)
        assert all(tuple(i) in occupied for i in idx)
        truth = scene.label_grid()
        assert np.array_equal(labels, truth[idx[:, 0], idx[:, 1], idx[:, 2]])
        assert pts.shape[0] <= sensor.ray_directions().shape[0]


def test_simulation_is_deterministic(rng):
    scene = random_scene(rng, (16, 16, 8), class_count=3, density=0.1)
    sensor = SensorModel(
        elevations_deg=tuple(np.linspace(-15, 5, 4)),
        azimuth_step_deg=30.0,
        origin=(8.0, 8.0, 4.0),
        min_range=0.1,
        max_range=40.0,
    )
    a_pts, a_lab = simulate(scene, sensor)
    b_pts, b_lab = simulate(scene, sensor)
    assert np.array_equal(a_pts, b_pts)
    assert np.array_equal(a_lab, b_lab)


def test_output_sorted_by_beam_then_azimuth():
    grid = centered_grid()
    # a full ring of wall voxels around the origin at radius ~6
    coords = []
    for ang in range(0, 360, 5):
        x = int(16 + round(6 * np.cos(np.deg2rad(ang))))
        y = int(16 + round(6 * np.sin(np.deg2rad(ang))))
        coords.append((x, y, 0))
    coords = sorted(set(coords))
    scene = VoxelScene(grid, coords, np.ones(len(coords), dtype=int), 1)
    sensor = SensorModel(
        elevations_deg=(0.0,), azimuth_step_deg=45.0, origin=(0.5, 0.5, 0.5),
        min_range=0.1, max_range=20.0,
    )
    pts, _ = simulate(scene, sensor)
    # azimuth of consecutive returns must be non-decreasing within the beam
    azim = np.degrees(np.arctan2(pts[:, 1] - 0.5, pts[:, 0] - 0.5)) % 360
    assert pts.shape[0] >= 6
    assert np.all(np.diff(azim) > -1e-9)


def test_jitter_requires_rng():
    grid = centered_grid()
    scene = VoxelScene(grid, [[20, 16, 0]], [1], class_count=1)
    sensor = SensorModel(
        elevations_deg=(0.0,), azimuth_step_deg=90.0, origin=(0.0, 0.5, 0.5),
        min_range=0.1, max_range=50.0, range_jitter_sigma=0.05,
    )
    with pytest.raises(ValueError):
        simulate(scene, sensor)
    pts, _ = simulate(scene, sensor, jitter_rng=np.random.default_rng(0))
    assert pts.shape[0] == 1


# ------------------------------ cloud files ------------------------------

def test_cloud_round_trip(tmp_path, rng):
    pts = rng.normal(size=(10, 3)).astype(np.float32)
    labels = rng.integers(1, 20, size=10)
    path = tmp_path / "cloud.bin"
    write_cloud(path, pts, labels)
    assert path.stat().st_size == 13 * 10
    back_pts, back_labels = read_cloud(path)
    assert np.array_equal(back_pts, pts)
    assert np.array_equal(back_labels, labels.astype(np.uint8))
