import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr
from scipy.stats import poisson

from spdcforge import detector as det
from spdcforge import pipeline as pl
from spdcforge import simulator as sim
from spdcforge.errors import OrderError, ParseError

P = det.PIXEL_PITCH
LAYOUT = det.DetectorLayout()
CALIB = det.default_calibration()
HEADER = "chip,col,row,toa_ns,tot_ns\n"


def _write(tmp_path, body, name="ev.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def _sorted_run(result):
    o = np.argsort(result.hits["toa"], kind="stable")
    return result.hits[o], result.hit_photon[o]


# --------------------------------------------------------------------------- reading

def test_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert pl.read_events(p).size == 0
    assert list(pl.iter_events(p)) == []
    assert pl.read_events(_write(tmp_path, "")).size == 0


def test_reorder_buffer(tmp_path):
    p = _write(tmp_path, "1,10,10,100.0,250.0\n1,20,20,50.0,250.0\n")
    assert [h.toa for h in pl.iter_events(p, reorder_buffer=2)] == [50.0, 100.0]
    assert pl.read_events(p, reorder_buffer=2)["toa"].tolist() == [50.0, 100.0]


def test_order_error(tmp_path):
    toas = [1000.0 + 1.5625 * k for k in range(10)] + [50.0]
    body = "".join(f"1,{k},0,{t},250.0\n" for k, t in enumerate(toas))
    p = _write(tmp_path, body)
    with pytest.raises(OrderError):
        list(pl.iter_events(p, reorder_buffer=3))
    with pytest.raises(OrderError):
        pl.read_events(p, reorder_buffer=3)
    # a deep enough buffer repairs it
    assert pl.read_events(p, reorder_buffer=11)["toa"][0] == 50.0


@pytest.mark.parametrize(
    "bad",
    [
        "1,10,10,100.0\n",  # field count
        "1,10,10,abc,250.0\n",
        "2,10,10,100.0,250.0\n",  # chip does not own the pixel
        "1,600,10,100.0,250.0\n",
        "1,10,10,100.1,250.0\n",  # off the toa quantum
        "1,10,10,100.0,260.0\n",
        "1,10,10,100.0,-25.0\n",
    ],
)
def test_parse_error_line_number(tmp_path, bad):
    p = _write(tmp_path, "# comment\n1,1,1,0.0,25.0\n" + bad)
    with pytest.raises(ParseError, match="line 4"):
        pl.read_events(p)


def test_bad_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(ParseError, match="line 1"):
        pl.read_events(p)


def test_fast_and_streaming_readers_agree(tmp_path, quiet_run):
    path = tmp_path / "ev.csv"
    sim.write_events(path, quiet_run.hits, meta="# meta")
    fast = pl.read_events(path)
    slow = pl._collect(pl.iter_events(path))
    assert np.array_equal(fast, slow)
    assert np.all(np.diff(fast["toa"]) >= 0)


def test_million_hit_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    n = 1_000_000
    hits = np.empty(n, det.HIT_DTYPE)
    hits["col"] = rng.integers(0, 512, n)
    hits["row"] = rng.integers(0, 512, n)
    hits["chip"] = det.chip_of(hits["col"], hits["row"])
    hits["toa"] = np.sort(rng.integers(0, 10**9, n)) * det.TOA_QUANTUM
    hits["tot"] = rng.integers(1, 40, n) * det.TOT_QUANTUM
    path = tmp_path / "big.csv"
    sim.write_events(path, hits)
    back = pl.read_events(path)
    assert back.size == n
    assert np.array_equal(back, hits)


# --------------------------------------------------------------------------- clustering

def _hits(rows):
    return det.hits_from_records([(int(det.chip_of(c, r)), c, r, t, tot) for c, r, t, tot in rows])


def test_isolated_hit():
    c = pl.cluster(_hits([(100, 40, 0.0, 350.0)]), LAYOUT, CALIB)
    assert c.size == 1 and c["n_pixels"][0] == 1
    x, y = det.logical_to_physical(100, 40)
    assert (c["x"][0], c["y"][0]) == (pytest.approx(x), pytest.approx(y))
    assert c["energy"][0] == pytest.approx(350.0 / CALIB.gain)


def test_equal_tot_midpoint():
    c = pl.cluster(_hits([(100, 40, 0.0, 200.0), (101, 40, 50.0, 200.0)]), LAYOUT, CALIB)
    assert c.size == 1 and c["n_pixels"][0] == 2
    assert c["x"][0] == pytest.approx(101.0 * P)
    assert c["toa"][0] == 0.0


def test_time_window_and_diagonal():
    h = _hits([(100, 40, 0.0, 200.0), (101, 41, 100.0, 200.0), (102, 42, 203.125, 200.0)])
    # the third hit is 103 ns after the second: split off
    c = pl.cluster(h, LAYOUT, CALIB)
    assert sorted(c["n_pixels"].tolist()) == [1, 2]
    # two pixels apart: separate clusters
    c = pl.cluster(_hits([(100, 40, 0.0, 200.0), (102, 40, 0.0, 200.0)]), LAYOUT, CALIB)
    assert c.size == 2


def test_transitive_grouping():
    chain = [(100 + k, 40, 90.0 * k, 100.0) for k in range(5)]
    c = pl.cluster(_hits(chain), LAYOUT, CALIB)
    assert c.size == 1 and c["n_pixels"][0] == 5


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False))
def test_permutation_invariance(rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    n = 60
    col = rng.integers(200, 215, n)
    row = rng.integers(200, 215, n)
    # coarse times so that many hits share a toa
    toa = rng.integers(0, 6, n) * 62.5
    tot = rng.integers(1, 12, n) * 25.0
    h = _hits(list(zip(col.tolist(), row.tolist(), toa.tolist(), tot.tolist())))
    ref = pl.cluster(h, LAYOUT, CALIB)
    perm = rng.permutation(n)
    assert np.array_equal(pl.cluster(h[perm], LAYOUT, CALIB), ref)


def test_energy_bookkeeping(quiet_run):
    h, _ = _sorted_run(quiet_run)
    c, lab = pl.cluster(h, LAYOUT, CALIB, return_labels=True)
    e = det.tot_to_energy(h["tot"], (h["col"].astype(int), h["row"].astype(int)), CALIB)
    kept = lab >= 0
    esum = np.bincount(lab[kept], weights=e[kept], minlength=c.size)
    assert np.array_equal(esum, c["energy"])
    assert np.all(c["energy"] > 0) and np.all(c["n_pixels"] >= 1)
    assert np.all(det.inside_active_area(c["x"], c["y"], LAYOUT))


def test_threads_identical(busy_run):
    h, _ = _sorted_run(busy_run)
    a, la = pl.cluster(h, LAYOUT, CALIB, return_labels=True)
    b, lb = pl.cluster(h, LAYOUT, CALIB, return_labels=True, threads=4)
    assert np.array_equal(a, b) and np.array_equal(la, lb)


def test_truth_linkage(quiet_run):
    h, hp = _sorted_run(quiet_run)
    c, lab = pl.cluster(h, LAYOUT, CALIB, return_labels=True)
    link = pl.link_clusters(lab, hp, c.size)
    truth = quiet_run.truth

    # centroid error against the true impact point
    pid = link[link >= 0]
    sig = pid % 2 == 0
    tx = np.where(sig, truth["xs"][pid // 2], truth["xi"][pid // 2])
    ty = np.where(sig, truth["ys"][pid // 2], truth["yi"][pid // 2])
    err = np.hypot(c["x"][link >= 0] - tx, c["y"][link >= 0] - ty)
    assert np.sqrt(np.mean(err**2)) <= P

    # multi-pixel photons reconstructed as a single cluster
    ok = lab >= 0
    pairs = np.unique(np.stack([hp[ok], lab[ok]]), axis=1)
    n_clusters = np.bincount(pairs[0], minlength=2 * truth.size)
    n_hits = np.bincount(hp[ok], minlength=2 * truth.size)
    multi = n_hits >= 2
    assert multi.sum() > 100
    assert np.mean(n_clusters[multi] == 1) >= 0.99


def test_link_clusters_majority():
    labels = np.array([0, 0, 0, 1, 1, -1])
    photon = np.array([5, 7, 7, -3, 4, 9])
    # cluster 1 is a tie; the smaller id wins
    assert pl.link_clusters(labels, photon, 3).tolist() == [7, -3, -(10**12)]


# --------------------------------------------------------------------------- selection

def test_select_band():
    c = np.zeros(3, pl.CLUSTER_DTYPE)
    c["energy"] = [15.0, 7.5, 3.0]
    c["tot_frac"] = [15 / 12, 7.5 / 12, 3 / 12]
    assert pl.select_spdc_singles(c)["energy"].tolist() == [7.5]
    assert pl.select_spdc_singles(c, mode="tot")["energy"].tolist() == [7.5, 3.0]
    with pytest.raises(ValueError):
        pl.select_spdc_singles(c, mode="nope")


def test_background_rejection_at_beta_100():
    cfg = sim.SimulationConfig(seed=3, background_ratio=100.0, duration=0.05)
    h, hp = _sorted_run(sim.simulate(cfg))
    c, lab = pl.cluster(h, cfg.layout, cfg.calib, return_labels=True)
    link = pl.link_clusters(lab, hp, c.size)
    bg = link < 0
    keep = (c["energy"] >= 4.0) & (c["energy"] <= 11.0)
    n_bg = bg.sum()
    assert n_bg > 5e4

    # 15 keV line smeared by the resolution plus the ToT rounding of ~3 pixels;
    # the last 0.5 keV quantum below the cut still rounds into the band
    sigma = np.hypot(cfg.calib.sigma_energy, np.sqrt(3 / 12) * 0.5)
    tail = ndtr((11.25 - 15.0) / sigma)
    survivors = int((bg & keep).sum())
    assert poisson.sf(survivors - 1, tail * n_bg) > 1e-3

    frac_before = n_bg / c.size
    frac_after = survivors / max(keep.sum(), 1)
    assert frac_before > 0.98
    assert frac_after < 0.02
    # SPDC photons survive
    assert (~bg & keep).sum() / (~bg).sum() > 0.75
