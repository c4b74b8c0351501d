"""Monte Carlo generator for down-converted pairs, pump background, and detector hits.

A run is split into fixed-length time slices.  Each slice draws from its own
random stream derived from ``(seed, slice_index)`` so slices can run in any
order or in parallel and still merge into identical output.
"""
from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import detector as det
from . import kinematics as kin
from .errors import ConfigError, SpdcIOError

log = logging.getLogger(__name__)

NS_PER_HOUR = 3.6e12

TRUTH_DTYPE = np.dtype(
    [
        ("pair_id", "i8"),
        ("b", "f8"),
        ("detuning", "f8"),
        ("azimuth", "f8"),
        ("emission", "f8"),
        ("e_s", "f8"),
        ("e_i", "f8"),
        ("alpha_s", "f8"),
        ("alpha_i", "f8"),
        ("xs", "f8"),
        ("ys", "f8"),
        ("xi", "f8"),
        ("yi", "f8"),
        ("absorbed", "?"),
    ]
)

BACKGROUND_DTYPE = np.dtype([("x", "f8"), ("y", "f8"), ("energy", "f8"), ("time", "f8")])


@dataclass(frozen=True)
class PhotonTruth:
    energy: float
    alpha: float
    position: tuple[float, float]
    absorbed: bool = False


@dataclass(frozen=True)
class BiphotonTruth:
    b: float
    detuning: float
    azimuth: float
    signal: PhotonTruth
    idler: PhotonTruth
    emission_time: float

    @classmethod
    def from_record(cls, rec) -> "BiphotonTruth":
        return cls(
            b=float(rec["b"]),
            detuning=float(rec["detuning"]),
            azimuth=float(rec["azimuth"]),
            signal=PhotonTruth(float(rec["e_s"]), float(rec["alpha_s"]), (float(rec["xs"]), float(rec["ys"])), bool(rec["absorbed"])),
            idler=PhotonTruth(float(rec["e_i"]), float(rec["alpha_i"]), (float(rec["xi"]), float(rec["yi"]))),
            emission_time=float(rec["emission"]),
        )


# --------------------------------------------------------------------------- masks

@dataclass
class TransmissionMask:
    """Transmission map t(x, y) on a regular grid placed in detector mm coordinates.

    ``grid[iy, ix]`` covers ``x in [x0 + ix*cell, x0 + (ix+1)*cell)`` and likewise
    for y.  Points outside the grid transmit fully.
    """

    grid: np.ndarray
    origin: tuple[float, float] = (0.0, 0.0)
    cell: float = 0.02
    target_arm: str = det.SIGNAL

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 2:
            raise ConfigError("mask grid must be 2-D")
        if np.any((self.grid < 0) | (self.grid > 1)) or np.any(np.isnan(self.grid)):
            raise ConfigError("mask transmission values must lie in [0, 1]")
        if not self.cell > 0:
            raise ConfigError("mask cell size must be positive")
        if self.target_arm != det.SIGNAL:
            raise ConfigError("masks can only target the signal arm")

    def transmission(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ix = np.floor((x - self.origin[0]) / self.cell).astype(int)
        iy = np.floor((y - self.origin[1]) / self.cell).astype(int)
        ny, nx = self.grid.shape
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        t = np.ones(x.shape)
        t[inside] = self.grid[iy[inside], ix[inside]]
        return t


def _mask_canvas(center, extent, cell):
    """Cell-center coordinates of a canvas covering the signal half below ``center``."""
    cx, cy = center
    x0 = cx - extent
    y0 = cy
    n_x = int(np.ceil(2 * extent / cell))
    n_y = int(np.ceil(extent / cell))
    xs = x0 + (np.arange(n_x) + 0.5) * cell
    ys = y0 + (np.arange(n_y) + 0.5) * cell
    return (x0, y0), np.meshgrid(xs, ys)


def knife_edge_mask(center, radius, opaque_inside=False, extent=22.0, cell=0.01, azimuth_range=None):
    """Edge concentric with the ring: opaque outside (or inside) ``radius`` on the signal half.

    ``azimuth_range=(lo, hi)`` in radians limits the opaque part to a wedge.
    """
    origin, (X, Y) = _mask_canvas(center, extent, cell)
    R = np.hypot(X - center[0], Y - center[1])
    opaque = R < radius if opaque_inside else R >= radius
    if azimuth_range is not None:
        phi = np.arctan2(Y - center[1], X - center[0])
        opaque &= (phi >= azimuth_range[0]) & (phi <= azimuth_range[1])
    return TransmissionMask(np.where(opaque, 0.0, 1.0), origin, cell)


def slit_mask(center, y_offset, width, x_range, extent=22.0, cell=0.01):
    """Opaque signal half except a horizontal transmitting slit at ``y = cy + y_offset``."""
    origin, (X, Y) = _mask_canvas(center, extent, cell)
    open_ = (np.abs(Y - (center[1] + y_offset)) <= width / 2) & (X >= center[0] + x_range[0]) & (X <= center[0] + x_range[1])
    return TransmissionMask(np.where(open_, 1.0, 0.0), origin, cell)


def bar_mask(center, y_offset, width, x_range, transmission=0.0, extent=22.0, cell=0.01):
    """Horizontal opaque bar on an otherwise clear signal half."""
    origin, (X, Y) = _mask_canvas(center, extent, cell)
    bar = (np.abs(Y - (center[1] + y_offset)) <= width / 2) & (X >= center[0] + x_range[0]) & (X <= center[0] + x_range[1])
    return TransmissionMask(np.where(bar, transmission, 1.0), origin, cell)


def disk_mask(disk_center, radius, transmission=0.0, cell=0.01):
    x0 = disk_center[0] - radius
    y0 = disk_center[1] - radius
    n = int(np.ceil(2 * radius / cell))
    xs = x0 + (np.arange(n) + 0.5) * cell
    X, Y = np.meshgrid(xs, y0 + (np.arange(n) + 0.5) * cell)
    inside = np.hypot(X - disk_center[0], Y - disk_center[1]) <= radius
    return TransmissionMask(np.where(inside, transmission, 1.0), (x0, y0), cell)


def uniform_mask(transmission, origin, size, cell=0.1):
    n_x = int(np.ceil(size[0] / cell))
    n_y = int(np.ceil(size[1] / cell))
    return TransmissionMask(np.full((n_y, n_x), float(transmission)), origin, cell)


def mask_from_spec(spec: dict, geom: kin.ExperimentGeometry, layout: det.DetectorLayout) -> TransmissionMask:
    """Build a mask from a JSON config entry.  Offsets are relative to the ring center."""
    spec = dict(spec)
    kind = spec.pop("kind", None)
    center = det.ring_center_mm(geom, layout)
    try:
        if kind == "knife_edge":
            return knife_edge_mask(center, **spec)
        if kind == "slit":
            return slit_mask(center, **spec)
        if kind == "bar":
            return bar_mask(center, **spec)
        if kind == "disk":
            dx, dy = spec.pop("offset")
            return disk_mask((center[0] + dx, center[1] + dy), **spec)
        if kind == "grid":
            return TransmissionMask(np.asarray(spec["grid"]), tuple(spec.get("origin", (0, 0))), spec.get("cell", 0.02))
    except TypeError as exc:
        raise ConfigError(f"bad {kind} mask parameters: {exc}") from None
    raise ConfigError(f"unknown mask kind {kind!r}")


# --------------------------------------------------------------------------- config

@dataclass
class SimulationConfig:
    geom: kin.ExperimentGeometry = field(default_factory=kin.ExperimentGeometry)
    layout: det.DetectorLayout = field(default_factory=det.DetectorLayout)
    calib: det.ToTCalibration = field(default_factory=det.ToTCalibration)
    response: det.PixelResponse = field(default_factory=det.PixelResponse)
    timing: det.TimingModel = field(default_factory=det.TimingModel)
    pair_rate: float = 6300.0  # pairs / hour
    background_ratio: float = 10.0  # background photons per SPDC photon
    duration: float = 1.0  # hours
    masks: list = field(default_factory=list)
    mask_specs: list = field(default_factory=list)
    seed: int = 0
    background_law: str = "uniform"
    slice_seconds: float = 60.0
    mode: str = kin.EXACT
    b_window: tuple[float, float] = kin.B_WINDOW

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.pair_rate >= 0:
            raise ConfigError("pair_rate must be non-negative")
        if not self.background_ratio >= 0:
            raise ConfigError("background_ratio must be non-negative")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if not self.slice_seconds > 0:
            raise ConfigError("slice_seconds must be positive")
        if self.background_law not in ("uniform", "inverse_r"):
            raise ConfigError(f"unknown background law {self.background_law!r}")
        if self.mode not in (kin.EXACT, kin.APPROXIMATE):
            raise ConfigError(f"unknown kinematics mode {self.mode!r}")
        lo, hi = self.b_window
        if not 0 < lo < 0.5 < hi < 1:
            raise ConfigError("b_window must satisfy 0 < lo < 0.5 < hi < 1")

    def all_masks(self) -> list[TransmissionMask]:
        return list(self.masks) + [mask_from_spec(s, self.geom, self.layout) for s in self.mask_specs]

    def to_dict(self) -> dict:
        c = self.calib
        return {
            "geometry": self.geom.to_dict(),
            "detector": {
                "hot_pixels": sorted([list(p) for p in self.layout.hot_pixels]),
                "gain_ns_per_keV": c.gain,
                "offset_ns": c.offset,
                "energy_resolution_fwhm": c.energy_resolution_fwhm,
                "sharing_radius_mm": self.response.sharing_radius,
                "threshold_keV": self.response.threshold,
                "energy_noise": self.response.energy_noise,
            },
            "timing": {
                "toa_quantum": self.timing.toa_quantum,
                "tot_quantum": self.timing.tot_quantum,
                "jitter_rms": self.timing.jitter_rms,
                "timewalk_max": self.timing.timewalk_max,
                "tot_ref": self.timing.tot_ref,
            },
            "simulation": {
                "pair_rate": self.pair_rate,
                "background_ratio": self.background_ratio,
                "duration": self.duration,
                "background_law": self.background_law,
                "slice_seconds": self.slice_seconds,
                "mode": self.mode,
                "b_window": list(self.b_window),
                "masks": self.mask_specs,
            },
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        try:
            geom = kin.ExperimentGeometry.from_dict(d.get("geometry", {}))
            dd = d.get("detector", {})
            layout = det.DetectorLayout(hot_pixels=frozenset(tuple(p) for p in dd.get("hot_pixels", [])))
            calib = det.ToTCalibration(
                gain=dd.get("gain_ns_per_keV", 50.0),
                offset=dd.get("offset_ns", 0.0),
                energy_resolution_fwhm=dd.get("energy_resolution_fwhm", 2.0),
                tot_quantum=d.get("timing", {}).get("tot_quantum", det.TOT_QUANTUM),
            )
            response = det.PixelResponse(
                sharing_radius=dd.get("sharing_radius_mm", 0.010),
                threshold=dd.get("threshold_keV", 0.5),
                energy_noise=dd.get("energy_noise", True),
            )
            timing = det.TimingModel(**d.get("timing", {}))
            sd = dict(d.get("simulation", {}))
            masks = sd.pop("masks", [])
            if "b_window" in sd:
                sd["b_window"] = tuple(sd["b_window"])
            return cls(
                geom=geom, layout=layout, calib=calib, response=response, timing=timing,
                mask_specs=list(masks), seed=int(d.get("seed", 0)), **sd,
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def ideal(config: SimulationConfig) -> SimulationConfig:
    """Copy of ``config`` with a perfect detector: no sharing, noise, jitter or walk."""
    return replace(config, response=det.IDEAL_RESPONSE, timing=det.IDEAL_TIMING, layout=det.DetectorLayout())


# --------------------------------------------------------------------------- sampling

def sample_b(rng, n, window=kin.B_WINDOW):
    """Draw ``n`` energy fractions with density proportional to b(1-b) on ``window``."""
    lo, hi = window
    out = np.empty(0)
    while out.size < n:
        m = max(int(1.6 * (n - out.size)) + 16, 64)
        b = rng.uniform(lo, hi, m)
        acc = rng.random(m) * 0.25 < b * (1 - b)
        out = np.concatenate([out, b[acc]])
    return out[:n]


def sample_detuning(rng, n, nominal, sigma):
    """Gaussian detuning spread, redrawn until every value is positive."""
    if sigma == 0:
        return np.full(n, float(nominal))
    d = rng.normal(nominal, sigma, n)
    bad = d <= 0
    while np.any(bad):
        d[bad] = rng.normal(nominal, sigma, int(bad.sum()))
        bad = d <= 0
    return d


def sample_pairs(rng, config: SimulationConfig, emission_times) -> np.ndarray:
    """Ground-truth pairs for the given emission times (ns).

    The signal photon is the one travelling towards the signal chips (+y); its
    azimuth is uniform on [0, pi) and the idler sits at azimuth + pi.  Because the
    energy spectrum is symmetric, this labels a pair whose axis is uniform on
    [0, 2 pi).
    """
    geom = config.geom
    t = np.asarray(emission_times, dtype=float)
    n = t.size
    out = np.zeros(n, TRUTH_DTYPE)
    if n == 0:
        return out
    b = sample_b(rng, n, config.b_window)
    dth = sample_detuning(rng, n, geom.detuning, geom.sigma)
    phi = rng.uniform(0.0, np.pi, n)
    a_s = kin.emission_angle_rad(b, geom.theta, dth, config.mode, config.b_window)
    a_i = kin.emission_angle_rad(1 - b, geom.theta, dth, config.mode, config.b_window)
    L = geom.crystal_to_detector
    cx, cy = det.ring_center_mm(geom, config.layout)
    r_s = L * np.tan(a_s)
    r_i = L * np.tan(a_i)
    out["b"] = b
    out["detuning"] = dth
    out["azimuth"] = phi
    out["emission"] = t
    out["e_s"] = b * geom.pump_energy
    out["e_i"] = geom.pump_energy - out["e_s"]
    out["alpha_s"] = a_s
    out["alpha_i"] = a_i
    out["xs"] = cx + r_s * np.cos(phi)
    out["ys"] = cy + r_s * np.sin(phi)
    out["xi"] = cx - r_i * np.cos(phi)
    out["yi"] = cy - r_i * np.sin(phi)
    return out


def sample_pair(rng, config: SimulationConfig, emission_time: float | None = None) -> BiphotonTruth:
    if emission_time is None:
        rate = config.pair_rate / NS_PER_HOUR
        emission_time = rng.exponential(1.0 / rate) if rate > 0 else 0.0
    rec = sample_pairs(rng, config, [emission_time])[0]
    return BiphotonTruth.from_record(rec)


def poisson_times(rng, rate_per_ns, t0, t1):
    n = rng.poisson(rate_per_ns * (t1 - t0))
    return np.sort(rng.uniform(t0, t1, n))


def sample_background(rng, config: SimulationConfig, t0=0.0, t1=None) -> np.ndarray:
    """Scattered pump photons at the pump energy over [t0, t1) ns."""
    if t1 is None:
        t1 = config.duration * NS_PER_HOUR
    beta = config.background_ratio
    rate = beta * 2.0 * config.pair_rate / NS_PER_HOUR
    if beta == 0 or rate == 0:
        return np.zeros(0, BACKGROUND_DTYPE)
    times = poisson_times(rng, rate, t0, t1)
    n = times.size
    w = config.layout.width
    if config.background_law == "uniform":
        x = rng.uniform(0, w, n)
        y = rng.uniform(0, w, n)
    else:
        # density ~ 1/r around the ring center: r uniform, azimuth uniform, clipped to the sensor
        cx, cy = det.ring_center_mm(config.geom, config.layout)
        r_max = np.hypot(max(cx, w - cx), max(cy, w - cy))
        x = np.empty(0)
        y = np.empty(0)
        while x.size < n:
            m = 2 * (n - x.size) + 16
            r = rng.uniform(0, r_max, m)
            p = rng.uniform(0, 2 * np.pi, m)
            xx, yy = cx + r * np.cos(p), cy + r * np.sin(p)
            ok = det.inside_active_area(xx, yy, config.layout)
            x = np.concatenate([x, xx[ok]])
            y = np.concatenate([y, yy[ok]])
        x, y = x[:n], y[:n]
    out = np.empty(n, BACKGROUND_DTYPE)
    out["x"] = x
    out["y"] = y
    out["energy"] = config.geom.pump_energy
    out["time"] = times
    return out


def apply_masks(truth: np.ndarray, masks, rng) -> np.ndarray:
    """Mark signal photons absorbed with probability 1 - t(x, y).  Returns a copy."""
    out = truth.copy()
    if out.size == 0 or not masks:
        return out
    t = np.ones(out.size)
    for m in masks:
        t *= m.transmission(out["xs"], out["ys"])
    u = rng.random(out.size)
    out["absorbed"] |= u >= t
    return out


# --------------------------------------------------------------------------- detection

def photon_table(truth: np.ndarray, background: np.ndarray):
    """Flatten pairs and background into (x, y, energy, time, photon_id) arrays.

    ``photon_id`` is ``2*pair_id`` for signal, ``2*pair_id + 1`` for idler and
    ``-(k + 1)`` for background photon ``k``.  Absorbed signal photons are omitted.
    """
    keep_s = ~truth["absorbed"]
    x = np.concatenate([truth["xs"][keep_s], truth["xi"], background["x"]])
    y = np.concatenate([truth["ys"][keep_s], truth["yi"], background["y"]])
    e = np.concatenate([truth["e_s"][keep_s], truth["e_i"], background["energy"]])
    t = np.concatenate([truth["emission"][keep_s], truth["emission"], background["time"]])
    pid = np.concatenate(
        [
            2 * truth["pair_id"][keep_s],
            2 * truth["pair_id"] + 1,
            -(np.arange(background.size, dtype=np.int64) + 1),
        ]
    )
    return x, y, e, t, pid


def detect(truth, background, config: SimulationConfig, rng):
    """Hits (time-sorted) and the photon id that produced each hit."""
    x, y, e, t, pid = photon_table(truth, background)
    geom, layout = config.geom, config.layout
    bx, by = det.beamstop_center_mm(geom, layout)
    ok = det.inside_active_area(x, y, layout) & (np.hypot(x - bx, y - by) > geom.beamstop_radius)
    hits, idx = det.synthesize_hits_batch(
        x[ok], y[ok], e[ok], t[ok], layout, config.calib, rng, config.response, config.timing
    )
    link = pid[ok][idx]
    order = sort_hits_order(hits)
    return hits[order], link[order]


def sort_hits_order(hits):
    return np.lexsort((hits["tot"], hits["row"], hits["col"], hits["toa"]))


@dataclass
class SimulationResult:
    config: SimulationConfig
    truth: np.ndarray
    background: np.ndarray
    hits: np.ndarray
    hit_photon: np.ndarray

    @property
    def n_pairs(self) -> int:
        return int(self.truth.size)

    def detected_photons(self) -> set:
        return set(np.unique(self.hit_photon[self.hit_photon >= 0]).tolist())

    def detected_pairs(self, layout: det.DetectorLayout | None = None, band=None, calib=None) -> np.ndarray:
        """Pair ids with both photons producing hits on their own arm's chips.

        With ``band=(lo, hi)`` a photon additionally needs its measured energy
        (calibrated energy summed over its own hits, from truth linkage) inside
        the band, i.e. the pair is one the SPDC selection could accept.
        """
        layout = layout or self.config.layout
        if self.hits.size == 0:
            return np.zeros(0, dtype=np.int64)
        arm = layout.arm_code(self.hits["chip"])
        pid = self.hit_photon
        good = (pid >= 0) & (arm == (pid % 2))
        if band is not None:
            calib = calib or self.config.calib
            h = self.hits[good]
            e = np.asarray(det.tot_to_energy(h["tot"], (h["col"].astype(np.int64), h["row"].astype(np.int64)), calib), dtype=float).reshape(-1)
            esum = np.bincount(pid[good], weights=e, minlength=2 * self.n_pairs)
            lo, hi = band
            good &= (esum[np.maximum(pid, 0)] >= lo) & (esum[np.maximum(pid, 0)] <= hi)
        s = np.unique(pid[good & (pid % 2 == 0)] // 2)
        i = np.unique(pid[good & (pid % 2 == 1)] // 2)
        return np.intersect1d(s, i)

    def summary(self) -> dict:
        hours = self.config.duration
        det_pairs = self.detected_pairs().size
        return {
            "pairs_emitted": self.n_pairs,
            "pairs_per_hour": self.n_pairs / hours,
            "pairs_detected": int(det_pairs),
            "background_photons": int(self.background.size),
            "signal_absorbed": int(self.truth["absorbed"].sum()),
            "hits": int(self.hits.size),
        }


def stream_rng(seed, k):
    """Independent generator for stream ``k`` of run ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))


def _run_slice(config: SimulationConfig, masks, k, t0, t1):
    rng = stream_rng(config.seed, k)
    times = poisson_times(rng, config.pair_rate / NS_PER_HOUR, t0, t1)
    truth = sample_pairs(rng, config, times)
    truth = apply_masks(truth, masks, rng)
    bg = sample_background(rng, config, t0, t1)
    return truth, bg, rng


def simulate(config: SimulationConfig, threads: int = 1) -> SimulationResult:
    """Run the full generator and detector model; output is independent of ``threads``."""
    config.validate()
    masks = config.all_masks()
    total = config.duration * NS_PER_HOUR
    step = config.slice_seconds * 1e9
    n_slices = max(1, int(np.ceil(total / step)))
    bounds = [(k, k * step, min((k + 1) * step, total)) for k in range(n_slices)]

    def work(b):
        k, t0, t1 = b
        truth, bg, rng = _run_slice(config, masks, k, t0, t1)
        truth["pair_id"] = np.arange(truth.size)
        hits, link = detect(truth, bg, config, rng)
        return truth, bg, hits, link

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(work, bounds))
    else:
        parts = [work(b) for b in bounds]

    # slice-local ids are shifted afterwards so they do not depend on execution order
    pair_off = 0
    bg_off = 0
    truths, bgs, hit_parts, link_parts = [], [], [], []
    for truth, bg, hits, link in parts:
        truth["pair_id"] += pair_off
        link = np.where(link < 0, link - bg_off, link + 2 * pair_off)
        truths.append(truth)
        bgs.append(bg)
        hit_parts.append(hits)
        link_parts.append(link)
        pair_off += truth.size
        bg_off += bg.size

    truth = np.concatenate(truths) if truths else np.zeros(0, TRUTH_DTYPE)
    bg = np.concatenate(bgs) if bgs else np.zeros(0, BACKGROUND_DTYPE)
    hits = np.concatenate(hit_parts)
    link = np.concatenate(link_parts)
    order = sort_hits_order(hits)
    log.info("simulated %d pairs, %d background photons, %d hits", truth.size, bg.size, hits.size)
    return SimulationResult(config, truth, bg, hits[order], link[order])


# --------------------------------------------------------------------------- output

EVENT_HEADER = "chip,col,row,toa_ns,tot_ns"
TRUTH_HEADER = "pair_id,arm,b,detuning_rad,azimuth_rad,x_mm,y_mm,energy_keV,emission_ns,absorbed"
LINK_HEADER = "photon_id"


def metadata_line(config_digest: str, seed: int) -> str:
    return f"# spdcforge seed={seed} config_sha256={config_digest}"


def format_hits(hits: np.ndarray) -> list[str]:
    return [
        f"{c},{col},{row},{toa:.4f},{int(tot)}"
        for c, col, row, toa, tot in zip(
            hits["chip"].tolist(), hits["col"].tolist(), hits["row"].tolist(), hits["toa"].tolist(), hits["tot"].tolist()
        )
    ]


def write_events(path, hits: np.ndarray, meta: str | None = None):
    lines = ([meta] if meta else []) + [EVENT_HEADER] + format_hits(hits)
    Path(path).write_text("\n".join(lines) + "\n")


def write_truth(path, truth: np.ndarray, meta: str | None = None):
    lines = ([meta] if meta else []) + [TRUTH_HEADER]
    for r in truth:
        pid = int(r["pair_id"])
        absorbed = int(bool(r["absorbed"]))
        phi = float(r["azimuth"])
        lines.append(
            f"{pid},signal,{float(r['b'])!r},{float(r['detuning'])!r},{float(phi)!r},{float(r['xs'])!r},{float(r['ys'])!r},{float(r['e_s'])!r},{float(r['emission'])!r},{absorbed}"
        )
        lines.append(
            f"{pid},idler,{float(r['b'])!r},{float(r['detuning'])!r},{float(phi + np.pi)!r},{float(r['xi'])!r},{float(r['yi'])!r},{float(r['e_i'])!r},{float(r['emission'])!r},0"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_linkage(path, link: np.ndarray, meta: str | None = None):
    lines = ([meta] if meta else []) + [LINK_HEADER] + [str(v) for v in link.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_linkage(path) -> np.ndarray:
    with open(path) as fh:
        vals = [ln for ln in fh if not ln.startswith("#")]
    return np.array([int(v) for v in vals[1:]], dtype=np.int64)


def read_truth(path) -> np.ndarray:
    """Rebuild the pair table from a truth CSV."""
    rows = {}
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    for ln in lines[1:]:
        f = ln.split(",")
        pid = int(f[0])
        rec = rows.setdefault(pid, {"pair_id": pid})
        rec["b"], rec["detuning"], rec["emission"] = float(f[2]), float(f[3]), float(f[8])
        if f[1] == "signal":
            rec.update(azimuth=float(f[4]), xs=float(f[5]), ys=float(f[6]), e_s=float(f[7]), absorbed=f[9] == "1")
        else:
            rec.update(xi=float(f[5]), yi=float(f[6]), e_i=float(f[7]))
    out = np.zeros(len(rows), TRUTH_DTYPE)
    for k, pid in enumerate(sorted(rows)):
        for name, v in rows[pid].items():
            out[k][name] = v
    return out


def detect_and_write(truths, backgrounds, config: SimulationConfig, out_dir, run="run", rng=None):
    """Detect the given photons and write the event, truth and linkage files.

    Returns the three paths.
    """
    rng = rng if rng is not None else stream_rng(config.seed, 10**6)
    hits, link = detect(truths, backgrounds, config, rng)
    return write_run(SimulationResult(config, truths, backgrounds, hits, link), out_dir, run)


def write_run(result: SimulationResult, out_dir, run="run"):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        meta = metadata_line(result.config.digest(), result.config.seed)
        paths = (out / f"{run}_events.csv", out / f"{run}_truth.csv", out / f"{run}_linkage.csv")
        write_events(paths[0], result.hits, meta)
        write_truth(paths[1], result.truth, meta)
        write_linkage(paths[2], result.hit_photon, meta)
    except OSError as exc:
        raise SpdcIOError(str(exc)) from exc
    return paths

