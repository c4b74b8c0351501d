import numpy as np
import pytest
from scipy.special import ndtr

from spdcforge import coincidence as co
from spdcforge import detector as det
from spdcforge import imaging as im
from spdcforge import kinematics as kin
from spdcforge import pipeline as pl
from spdcforge import simulator as sim
from spdcforge.errors import DegenerateGeometry, DomainError

# radii from an independent root solve of the phase-matching condition
ORACLE_CONTOURS = {6.0: 14.2031086709, 7.5: 11.5962325364, 9.0: 9.46798098249}


def _image(grid, arm=det.SIGNAL, rebin=1):
    return im.CorrelationImage(np.asarray(grid), arm, rebin=rebin)


# --------------------------------------------------------------------------- accumulation

def test_empty_pairs():
    s, i = im.accumulate(np.zeros(0, co.PAIR_DTYPE))
    assert s.total == 0 and i.total == 0
    assert s.grid.shape == (det.N_PHYSICAL, det.N_PHYSICAL)


def test_count_conservation_and_merge(quiet_run, geom):
    p = pl.reconstruct_pairs(quiet_run.hits, geom, quiet_run.config.layout, quiet_run.config.calib)
    s, i = im.accumulate(p, rebin=4)
    n = int(p["passed"].sum())
    assert s.total == i.total == n
    # partial images over a split add up to the whole
    a, b = im.accumulate(p[: p.size // 2], rebin=4), im.accumulate(p[p.size // 2:], rebin=4)
    assert np.array_equal((a[0] + b[0]).grid, s.grid)
    assert np.array_equal((a[1] + b[1]).grid, i.grid)
    with pytest.raises(ValueError):
        s + i


def test_rebin_shape_and_gaps():
    assert im.n_bins(1) == 514 and im.n_bins(4) == 129
    img = _image(np.zeros((129, 129)), rebin=4)
    assert img.gap_bins().tolist() == [63, 64]
    with pytest.raises(ValueError):
        im.n_bins(0)


def test_singles_image(busy_run):
    o = np.argsort(busy_run.hits["toa"], kind="stable")
    c = pl.cluster(busy_run.hits[o], busy_run.config.layout, busy_run.config.calib)
    ref = im.singles_image(c)
    assert ref.total == c.size
    assert im.singles_image(c, det.IDLER).total == int((c["arm"] == 1).sum())


def test_display_transform():
    g = np.arange(6).reshape(2, 3)
    assert np.array_equal(im.display_transform(g), np.rot90(g, 2)[:, ::-1])
    # rotate + mirror is a vertical flip
    assert np.array_equal(im.display_transform(g), g[::-1, :])
    assert np.array_equal(im.display_transform(g, rotate=False, mirror=False), g)


def test_disk_mask_mirrored_and_warped(geom):
    c = det.ring_center_mm(geom)
    r_s, phi_s = 10.0, np.pi / 4
    disk = sim.disk_mask((c[0] + r_s * np.cos(phi_s), c[1] + r_s * np.sin(phi_s)), 1.0)
    cfg = sim.ideal(sim.SimulationConfig(seed=31, pair_rate=1.5e5, background_ratio=0, duration=0.5, masks=[disk], geom=geom))
    r = sim.simulate(cfg)
    p = pl.reconstruct_pairs(r.hits, geom, cfg.layout, cfg.calib)
    p = p[p["passed"]]

    def count(x, y, rad, phi, probe):
        at = (c[0] + rad * np.cos(phi), c[1] + rad * np.sin(phi))
        return int(np.count_nonzero(np.hypot(x - at[0], y - at[1]) <= probe))

    # signal: nothing through the disk, normal density beside it
    assert count(p["xs"], p["ys"], r_s, phi_s, 0.8) == 0
    assert count(p["xs"], p["ys"], r_s, phi_s + 0.4, 0.8) > 50

    # idler: deficit at the conjugate radius, opposite azimuth
    r_i = float(kin.conjugate_radius(r_s, geom))
    phi_i = phi_s - np.pi
    ghost = count(p["xi"], p["yi"], r_i, phi_i, 0.5)
    ctrl = count(p["xi"], p["yi"], r_i, phi_i - 0.4, 0.5)
    assert ctrl > 30
    assert ghost < 0.2 * ctrl
    # not a plain point reflection: the unwarped mirror spot is populated
    plain = count(p["xi"], p["yi"], r_s, phi_i, 0.5)
    assert plain > 0.7 * count(p["xi"], p["yi"], r_s, phi_i - 0.4, 0.5)


# --------------------------------------------------------------------------- correction

def _pairs_at(geom, b_s, b_i, phi=0.3):
    c = det.ring_center_mm(geom)
    L = geom.crystal_to_detector
    p = np.zeros(1, co.PAIR_DTYPE)
    rs = L * np.tan(kin.emission_angle(b_s, geom, mode=kin.APPROXIMATE))
    ri = L * np.tan(kin.emission_angle(b_i, geom, mode=kin.APPROXIMATE))
    p["xs"], p["ys"] = c[0] + rs * np.cos(phi), c[1] + rs * np.sin(phi)
    p["xi"], p["yi"] = c[0] - ri * np.cos(phi), c[1] - ri * np.sin(phi)
    p["passed"] = True
    return co.pair_geometry(p, geom)


def test_correction_fixed_point(geom):
    p = _pairs_at(geom, 0.4, 0.6)
    assert p["detuning"][0] == pytest.approx(geom.detuning, rel=1e-12)
    q = im.correct_idler(p, geom)
    assert q["xi"][0] == pytest.approx(p["xi"][0], abs=1e-12)
    assert q["yi"][0] == pytest.approx(p["yi"][0], abs=1e-12)


def test_correction_keeps_azimuth_and_count(geom):
    p = _pairs_at(geom, 0.4, 0.55)  # idler too far in: calculated detuning off nominal
    q = im.correct_idler(p, geom)
    c = det.ring_center_mm(geom)
    phi = lambda x, y: np.arctan2(y - c[1], x - c[0])  # noqa: E731
    assert phi(q["xi"], q["yi"])[0] == pytest.approx(phi(p["xi"], p["yi"])[0], abs=1e-12)
    assert q["r_i"][0] != pytest.approx(p["r_i"][0])
    assert q.size == p.size
    assert im.correct_idler(np.zeros(0, co.PAIR_DTYPE), geom).size == 0


def test_correction_rejects_nonpositive_detuning(geom):
    p = _pairs_at(geom, 0.4, 0.6)
    p["detuning"] = -1e-6
    with pytest.raises(DegenerateGeometry):
        im.correct_idler(p, geom)


def test_correction_sigma_zero_changes_nothing_beyond_quantization(geom):
    g0 = kin.ExperimentGeometry(detuning_sigma=0.0)
    cfg = sim.ideal(sim.SimulationConfig(seed=8, pair_rate=2e4, background_ratio=0, duration=0.5, geom=g0))
    r = sim.simulate(cfg)
    p = pl.reconstruct_pairs(r.hits, g0, cfg.layout, cfg.calib)
    p = p[p["passed"]]
    q = im.correct_idler(p, g0)
    # centroids sit on pixel centers, so each radius is off by up to half a
    # pixel diagonal; through r_new = r_i * nominal / calc that becomes
    # d_i + d_s * r_i / r_s to first order
    shift = np.abs(q["r_i"] - p["r_i"])
    bound = (1 + p["r_i"] / p["r_s"]) * det.PIXEL_PITCH / np.sqrt(2)
    assert p.size > 1000
    assert np.all(shift <= bound)


# --------------------------------------------------------------------------- contours and grid

def test_energy_contours_oracle(geom):
    e = list(ORACLE_CONTOURS)
    r = im.energy_contours(geom, e)
    assert r == pytest.approx(list(ORACLE_CONTOURS.values()), rel=5e-3)
    grid = np.linspace(0.5, 14.5, 200)
    assert np.all(np.diff(im.energy_contours(geom, grid)) < 0)
    for bad in (0.0, 15.0, 16.0, -1.0):
        with pytest.raises(DomainError):
            im.energy_contours(geom, [bad])


def test_contours_csv(tmp_path, geom):
    path = tmp_path / "contours.csv"
    im.write_contours(path, geom, [6.0, 7.5], meta="# m")
    lines = path.read_text().splitlines()
    assert lines[:2] == ["# m", "energy_keV,r_mm"]
    assert float(lines[3].split(",")[1]) == pytest.approx(ORACLE_CONTOURS[7.5], rel=5e-3)


def test_mapping_involution(geom):
    c = det.ring_center_mm(geom)
    rng = np.random.default_rng(2)
    r = rng.uniform(4, 20, 500)
    phi = rng.uniform(0, np.pi, 500)
    x, y = c[0] + r * np.cos(phi), c[1] + r * np.sin(phi)
    x2, y2 = im.map_points(*im.map_points(x, y, geom, c), geom, c)
    assert np.hypot(x2 - c[0], y2 - c[1]) == pytest.approx(r, rel=1e-3)
    assert np.allclose(x2, x, atol=1e-3 * r.max()) and np.allclose(y2, y, atol=1e-3 * r.max())


def test_degenerate_ring_maps_opposite(geom):
    c = det.ring_center_mm(geom)
    r0 = float(kin.radius_from_b(0.5, geom, mode=kin.APPROXIMATE))
    xi, yi = im.map_points(c[0] + r0 * np.cos(0.8), c[1] + r0 * np.sin(0.8), geom, c)
    assert xi == pytest.approx(c[0] - r0 * np.cos(0.8), rel=1e-4)
    assert yi == pytest.approx(c[1] - r0 * np.sin(0.8), rel=1e-4)


def test_straight_line_maps_to_circle(geom):
    """Small-angle mapping is an inversion: line at distance d -> circle of radius K L^2 / 2d."""
    c = det.ring_center_mm(geom)
    L = geom.crystal_to_detector
    r_deg = float(kin.radius_from_b(0.5, geom, mode=kin.APPROXIMATE))
    radii, line_rms = [], []
    for d in (3.0, 6.0, 9.0, 14.0, 17.0, 20.0):
        x = c[0] + np.linspace(-4, 4, 41)
        y = np.full_like(x, c[1] + d)
        xi, yi = im.map_points(x, y, geom, c)
        xc, yc, R, rms = im.circle_fit(xi, yi)
        assert R == pytest.approx(geom.K * L * L / (2 * d), rel=5e-3)
        assert im.line_fit_rms(xi, yi) > 3 * rms
        radii.append(R)
        line_rms.append(im.line_fit_rms(xi, yi))
    # outside the degenerate ring the ghost bends harder the further out the line sits
    curv = 1 / np.array(radii)
    outside = np.array([3.0, 6.0, 9.0, 14.0, 17.0, 20.0]) > r_deg
    assert np.all(np.diff(curv[outside]) > 0)
    # inside, moving toward the center spreads the ghost more: larger departure from a line
    assert np.all(np.diff(np.array(line_rms)[~outside]) < 0)


def test_grid_mapping_table(tmp_path, geom):
    t = im.grid_mapping(geom, {"spacing": 3.0, "extent": 9.0, "n_line": 11})
    c = det.ring_center_mm(geom)
    rs = np.hypot(t[:, 1] - c[0], t[:, 2] - c[1])
    ri = np.hypot(t[:, 3] - c[0], t[:, 4] - c[1])
    assert np.all(rs >= 1.0) and np.all(t[:, 2] >= c[1])
    assert ri == pytest.approx(kin.conjugate_radius(rs, geom))
    path = tmp_path / "g.csv"
    im.write_gridmap(path, t)
    assert path.read_text().splitlines()[0] == "line_id,xs_mm,ys_mm,xi_mm,yi_mm"
    # each mapped grid line lies on a circle
    for lid in np.unique(t[:, 0])[:4]:
        rows = t[t[:, 0] == lid]
        if len(rows) >= 5:
            assert im.circle_fit_rms(rows[:, 3], rows[:, 4]) < 1e-2


# --------------------------------------------------------------------------- sharpness

def _step_grid(sigma_bins, x0_bin=200.3, amp=1000.0, floor=100.0, n=514):
    x = np.arange(n) + 0.5
    if sigma_bins == 0:
        prof = floor + amp * (x > x0_bin)
    else:
        prof = floor + amp * ndtr((x - x0_bin) / sigma_bins)
    return np.tile(prof, (n, 1))


def test_sharpness_zero_blur():
    img = _image(_step_grid(0))
    spec = im.EdgeSpec("linear", 170 * img.bin_size, 230 * img.bin_size, axis="x", band=(5.0, 10.0))
    assert im.sharpness_metric(img, spec) <= img.bin_size


def test_sharpness_recovers_three_bins():
    img = _image(_step_grid(3.0))
    spec = im.EdgeSpec("linear", 170 * img.bin_size, 230 * img.bin_size, axis="x", band=(5.0, 10.0))
    assert im.sharpness_metric(img, spec) / img.bin_size == pytest.approx(3.0, abs=0.3)


def test_sharpness_radial_edge():
    c = (14.0, 14.0)
    n = 514
    xc = (np.arange(n) + 0.5) * det.PIXEL_PITCH
    X, Y = np.meshgrid(xc, xc)
    R = np.hypot(X - c[0], Y - c[1])
    sig = 0.2
    img = _image(200 * ndtr((R - 6.0) / sig) + 20)
    spec = im.EdgeSpec("radial", 4.0, 8.0, center=c, azimuth=(0.2, 1.2), bins=60)
    assert im.sharpness_metric(img, spec) == pytest.approx(sig, rel=0.1)
    with pytest.raises(ValueError):
        im.edge_profile(img, im.EdgeSpec("radial", 4.0, 8.0))


def test_points_edge_sigma(rng):
    r = np.r_[rng.uniform(0, 10, 200000)]
    r = r[r > 5.0] + rng.normal(0, 0.3, np.count_nonzero(r > 5.0))
    assert im.points_edge_sigma(r, 3.0, 8.0) == pytest.approx(0.3, rel=0.1)


def test_sharpness_increases_with_detuning_spread():
    sigmas = []
    for sd in (0.0, 0.0014, 0.0028):
        geom = kin.ExperimentGeometry(detuning_sigma=sd)
        c = det.ring_center_mm(geom)
        knife = sim.knife_edge_mask(c, 12.5, opaque_inside=True, azimuth_range=(np.pi / 4 - 0.5, np.pi / 4 + 0.5))
        cfg = sim.ideal(sim.SimulationConfig(geom=geom, seed=5, pair_rate=1.5e5, background_ratio=0, duration=0.5, masks=[knife]))
        r = sim.simulate(cfg)
        p = pl.reconstruct_pairs(r.hits, geom, cfg.layout, cfg.calib)
        spec = im.EdgeSpec("radial", 8.5, 13.5, center=c, azimuth=(np.pi / 4 + np.pi - 0.4, np.pi / 4 + np.pi + 0.4), bins=40)
        sigmas.append(im.sharpness_metric(im.accumulate(p)[1], spec))
    assert sigmas[0] < sigmas[1] < sigmas[2]


# --------------------------------------------------------------------------- export

def test_pgm_round_trip(tmp_path):
    g = np.zeros((5, 7), dtype=np.int64)
    g[2, 3] = 10
    g[0, 0] = 5
    path = tmp_path / "a.pgm"
    im.write_pgm(path, g, comment="# seed=1\nsecond")
    back = im.read_pgm(path)
    assert back.shape == (5, 7)
    assert back[2, 3] == 65535 and back[0, 0] == round(65535 / 2)
    assert path.read_bytes().startswith(b"P5\n# seed=1\n# second\n7 5\n65535\n")
    blank = tmp_path / "b.pgm"
    im.write_pgm(blank, np.zeros((3, 3)))
    assert not im.read_pgm(blank).any()


def test_image_csv_round_trip(tmp_path):
    g = np.random.default_rng(3).integers(0, 9, (129, 129))
    img = _image(g, rebin=4)
    im.write_image(tmp_path / "run_signal", img, meta="# spdcforge seed=1")
    assert np.array_equal(im.read_image_csv(tmp_path / "run_signal.csv"), g)
    text = (tmp_path / "run_signal.csv").read_text().splitlines()
    assert text[0] == "# spdcforge seed=1" and text[1] == "# gap_bins=63;64"
    im.write_image(tmp_path / "t", img, transform=True)
    assert np.array_equal(im.read_image_csv(tmp_path / "t.csv"), im.display_transform(g))
