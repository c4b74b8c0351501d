"""Quad-chip Timepix3-style detector model.

Four 256x256 chips form a 512x512 logical pixel grid.  The two central rows and
columns (logical 255 and 256) are double width, so the physical grid is
514x514 slots of 55 um.  Chips are numbered::

    chip 1: cols   0-255, rows   0-255   (idler)
    chip 2: cols 256-511, rows   0-255   (idler)
    chip 3: cols   0-255, rows 256-511   (signal)
    chip 4: cols 256-511, rows 256-511   (signal)

Rows increase towards the signal chips, so +y in physical coordinates points
at the signal half.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from .errors import CalibrationMissing, ConfigError, OutOfActiveArea, ParseError

N_LOGICAL = 512
N_CHIP = 256
N_PHYSICAL = 514
PIXEL_PITCH = 0.055  # mm
TOA_QUANTUM = 1.5625  # ns
TOT_QUANTUM = 25.0  # ns
FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

SIGNAL = "signal"
IDLER = "idler"
ARM_CODE = {SIGNAL: 0, IDLER: 1}
ARM_NAME = {0: SIGNAL, 1: IDLER}

HIT_DTYPE = np.dtype(
    [("chip", "i1"), ("col", "i2"), ("row", "i2"), ("toa", "f8"), ("tot", "f8")]
)


class RawHit(NamedTuple):
    chip: int
    col: int
    row: int
    toa: float
    tot: float


def chip_of(col, row):
    col = np.asarray(col)
    row = np.asarray(row)
    return 1 + (col >= N_CHIP).astype(int) + 2 * (row >= N_CHIP).astype(int)


@dataclass(frozen=True)
class DetectorLayout:
    pixel_pitch: float = PIXEL_PITCH
    hot_pixels: frozenset = frozenset()
    chip_roles: tuple = ((1, IDLER), (2, IDLER), (3, SIGNAL), (4, SIGNAL))

    def __post_init__(self):
        if len(self.hot_pixels) > 0.01 * N_LOGICAL * N_LOGICAL:
            raise ConfigError("hot pixel mask covers more than 1% of the detector")
        for c, r in self.hot_pixels:
            if not (0 <= c < N_LOGICAL and 0 <= r < N_LOGICAL):
                raise ConfigError(f"hot pixel ({c}, {r}) out of range")
        roles = dict(self.chip_roles)
        if sorted(roles) != [1, 2, 3, 4] or not set(roles.values()) <= {SIGNAL, IDLER}:
            raise ConfigError("chip_roles must map chips 1-4 to signal/idler")
        hot = np.zeros((N_LOGICAL, N_LOGICAL), dtype=bool)  # [col, row]
        for c, r in self.hot_pixels:
            hot[c, r] = True
        object.__setattr__(self, "_hot_map", hot)
        object.__setattr__(
            self, "_role_code", np.array([0] + [ARM_CODE[roles[k]] for k in (1, 2, 3, 4)])
        )

    @property
    def hot_map(self) -> np.ndarray:
        return self._hot_map

    @property
    def width(self) -> float:
        """Physical side length of the active area in mm."""
        return N_PHYSICAL * self.pixel_pitch

    def arm_code(self, chip):
        """0 for signal, 1 for idler."""
        return self._role_code[np.asarray(chip, dtype=int)]

    def with_hot_pixels(self, pixels: Iterable) -> "DetectorLayout":
        return DetectorLayout(self.pixel_pitch, frozenset(map(tuple, pixels)), self.chip_roles)


def _axis_to_physical(i, pitch):
    i = np.asarray(i, dtype=float)
    x = (i + 0.5) * pitch
    x = np.where(i == 255, 256 * pitch, x)
    x = np.where(i == 256, 258 * pitch, x)
    return np.where(i > 256, (i + 2.5) * pitch, x)


def pixel_edges(i, pitch=PIXEL_PITCH):
    """Lower and upper physical edge (mm) of logical pixel index ``i`` along one axis."""
    i = np.asarray(i)
    lo = np.where(i < 255, i, np.where(i == 255, 255, np.where(i == 256, 257, i + 2))) * pitch
    width = np.where((i == 255) | (i == 256), 2 * pitch, pitch)
    return lo, lo + width


def logical_to_physical(col, row, layout: DetectorLayout | None = None):
    """Physical pixel-center coordinates (mm) of logical pixel(s) (col, row)."""
    pitch = layout.pixel_pitch if layout else PIXEL_PITCH
    col = np.asarray(col)
    row = np.asarray(row)
    if np.any((col < 0) | (col >= N_LOGICAL) | (row < 0) | (row >= N_LOGICAL)):
        raise IndexError("logical pixel index out of range")
    x = _axis_to_physical(col, pitch)
    y = _axis_to_physical(row, pitch)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def _axis_to_logical(x, pitch):
    slot = np.floor(np.asarray(x, dtype=float) / pitch).astype(int)
    i = np.where(slot < 255, slot, np.where(slot <= 256, 255, np.where(slot <= 258, 256, slot - 2)))
    return i


def physical_to_logical(x, y, layout: DetectorLayout | None = None):
    pitch = layout.pixel_pitch if layout else PIXEL_PITCH
    w = N_PHYSICAL * pitch
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any((x < 0) | (x >= w) | (y < 0) | (y >= w)):
        raise OutOfActiveArea("position outside the active area")
    return _axis_to_logical(x, pitch), _axis_to_logical(y, pitch)


def inside_active_area(x, y, layout: DetectorLayout):
    w = layout.width
    x = np.asarray(x)
    y = np.asarray(y)
    return (x >= 0) & (x < w) & (y >= 0) & (y < w)


def ring_center_mm(geom, layout: DetectorLayout | None = None):
    """Physical position of the diffracted-pump spot.

    The configured ring center is a logical pixel coordinate; fractional values
    interpolate linearly between neighbouring pixel centers.
    """
    pitch = layout.pixel_pitch if layout else PIXEL_PITCH
    out = []
    for v in geom.ring_center:
        i0 = int(np.floor(v))
        f = v - i0
        p0 = _axis_to_physical(i0, pitch)
        p1 = _axis_to_physical(min(i0 + 1, N_LOGICAL - 1), pitch)
        out.append(float(p0 + f * (p1 - p0)))
    return tuple(out)


def beamstop_center_mm(geom, layout: DetectorLayout | None = None):
    if geom.beamstop_center is not None:
        return tuple(geom.beamstop_center)
    return ring_center_mm(geom, layout)


# --------------------------------------------------------------------------- calibration

@dataclass
class ToTCalibration:
    """Linear ToT(E) model with per-pixel multiplicative gain variation.

    Per-pixel maps are indexed ``[col, row]``.  A pixel is calibrated when
    ``defined[col, row]`` is true; otherwise the global ``gain``/``offset`` are
    used if ``allow_fallback`` is set.
    """

    gain: float = 50.0  # ns / keV
    offset: float = 0.0  # ns
    energy_resolution_fwhm: float = 2.0  # keV
    tot_quantum: float = TOT_QUANTUM
    gain_map: np.ndarray | None = None
    offset_map: np.ndarray | None = None
    variation: np.ndarray | None = None
    cutoff_map: np.ndarray | None = None
    defined: np.ndarray | None = None
    allow_fallback: bool = True

    def __post_init__(self):
        if not self.gain > 0:
            raise ConfigError("gain must be positive")
        if self.energy_resolution_fwhm < 0:
            raise ConfigError("energy resolution must be non-negative")
        if not self.tot_quantum > 0:
            raise ConfigError("tot_quantum must be positive")
        if self.gain_map is not None and np.any(self.gain_map <= 0):
            raise ConfigError("per-pixel gains must be positive")
        if self.variation is not None and np.any(self.variation <= 0):
            raise ConfigError("gain variation must be positive")

    @property
    def sigma_energy(self) -> float:
        return self.energy_resolution_fwhm * FWHM_TO_SIGMA

    def _lookup(self, col, row):
        col = np.asarray(col, dtype=int)
        row = np.asarray(row, dtype=int)
        if self.defined is not None and not self.allow_fallback:
            ok = self.defined[col, row]
            if not np.all(ok):
                bad = np.argwhere(~np.atleast_1d(ok))[0][0]
                c = np.atleast_1d(col)[bad]
                r = np.atleast_1d(row)[bad]
                raise CalibrationMissing(f"no calibration for pixel ({c}, {r})")
        gain = self.gain if self.gain_map is None else self.gain_map[col, row]
        offset = self.offset if self.offset_map is None else self.offset_map[col, row]
        var = 1.0 if self.variation is None else self.variation[col, row]
        return gain, offset, var

    def expected_tot(self, energy, col, row):
        gain, offset, var = self._lookup(col, row)
        return offset + gain * var * np.asarray(energy, dtype=float)

    def cutoff(self, col, row):
        """Per-pixel ToT cutoff between the SPDC band and the pump band."""
        if self.cutoff_map is not None:
            return self.cutoff_map[np.asarray(col, dtype=int), np.asarray(row, dtype=int)]
        return self.expected_tot(12.0, col, row)  # midpoint of 9 and 15 keV

    def quantize(self, tot):
        q = self.tot_quantum
        return np.round(np.asarray(tot, dtype=float) / q) * q


def energy_to_tot(energy, pixel, calib: ToTCalibration):
    """Expected (noise-free) quantized ToT for ``energy`` keV at ``pixel=(col, row)``."""
    col, row = pixel
    return calib.quantize(calib.expected_tot(energy, col, row))


def tot_to_energy(tot, pixel, calib: ToTCalibration):
    tot = np.asarray(tot, dtype=float)
    if np.any(tot < 0):
        raise ValueError("tot must be non-negative")
    col, row = pixel
    gain, offset, var = calib._lookup(col, row)
    e = (tot - offset) / (gain * var)
    e = np.maximum(e, 0.0)
    return float(e) if e.ndim == 0 else e


def default_calibration(seed: int | None = None, variation_rms: float = 0.0, **kw) -> ToTCalibration:
    """Global calibration, optionally with a seeded random per-pixel gain map (mean 1)."""
    variation = None
    if variation_rms > 0:
        rng = np.random.default_rng(seed)
        variation = np.clip(rng.normal(1.0, variation_rms, (N_LOGICAL, N_LOGICAL)), 0.5, 1.5)
        variation /= variation.mean()
    return ToTCalibration(variation=variation, **kw)


CALIBRATION_HEADER = ("col", "row", "gain_ns_per_keV", "offset_ns", "variation", "cutoff_ns")


def read_calibration(path, allow_fallback: bool = True, **kw) -> ToTCalibration:
    shape = (N_LOGICAL, N_LOGICAL)
    base = ToTCalibration(**kw)
    gain = np.full(shape, base.gain)
    offset = np.full(shape, base.offset)
    var = np.ones(shape)
    defined = np.zeros(shape, dtype=bool)
    cutoff = None
    with open(path, newline="") as fh:
        rows = (ln for ln in fh if not ln.startswith("#"))
        reader = csv.reader(rows)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CALIBRATION_HEADER:
            raise ParseError(f"calibration header must be {','.join(CALIBRATION_HEADER)}")
        for n, rec in enumerate(reader, start=2):
            try:
                c, r = int(rec[0]), int(rec[1])
                g, o, v, co = (float(x) for x in rec[2:6])
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), n) from None
            if not (0 <= c < N_LOGICAL and 0 <= r < N_LOGICAL):
                raise ParseError(f"pixel ({c}, {r}) out of range", n)
            gain[c, r], offset[c, r], var[c, r] = g, o, v
            if not np.isnan(co):
                if cutoff is None:
                    cutoff = np.full(shape, np.nan)
                cutoff[c, r] = co
            defined[c, r] = True
    if cutoff is not None:
        fallback = offset + gain * var * 12.0
        cutoff = np.where(np.isnan(cutoff), fallback, cutoff)
    return ToTCalibration(
        gain=base.gain,
        offset=base.offset,
        energy_resolution_fwhm=base.energy_resolution_fwhm,
        tot_quantum=base.tot_quantum,
        gain_map=gain,
        offset_map=offset,
        variation=var,
        cutoff_map=cutoff,
        defined=defined,
        allow_fallback=allow_fallback,
    )


def write_calibration(path, calib: ToTCalibration, pixels: Iterable | None = None):
    if pixels is None:
        pixels = ((c, r) for c in range(N_LOGICAL) for r in range(N_LOGICAL))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CALIBRATION_HEADER)
        for c, r in pixels:
            g, o, v = calib._lookup(c, r)
            w.writerow([c, r, repr(float(g)), repr(float(o)), repr(float(v)), repr(float(calib.cutoff(c, r)))])


def read_hot_mask(path) -> frozenset:
    out = set()
    with open(path, newline="") as fh:
        reader = csv.reader(ln for ln in fh if not ln.startswith("#"))
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["col", "row"]:
            raise ParseError("hot-pixel mask header must be col,row")
        for n, rec in enumerate(reader, start=2):
            try:
                out.add((int(rec[0]), int(rec[1])))
            except (ValueError, IndexError) as exc:
                raise ParseError(str(exc), n) from None
    return frozenset(out)


def write_hot_mask(path, pixels: Iterable):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["col", "row"])
        for c, r in sorted(pixels):
            w.writerow([c, r])


def random_hot_pixels(fraction: float, rng) -> frozenset:
    n = int(round(fraction * N_LOGICAL * N_LOGICAL))
    idx = rng.choice(N_LOGICAL * N_LOGICAL, size=n, replace=False)
    return frozenset((int(i // N_LOGICAL), int(i % N_LOGICAL)) for i in np.sort(idx))


def apply_hot_mask(hits, layout: DetectorLayout):
    """Drop hits on masked pixels, preserving order.

    Accepts a structured hit array (returns an array) or any iterable of
    :class:`RawHit` (returns a list).
    """
    if isinstance(hits, np.ndarray):
        if not layout.hot_pixels or hits.size == 0:
            return hits
        keep = ~layout.hot_map[hits["col"].astype(int), hits["row"].astype(int)]
        return hits[keep]
    hot = layout.hot_pixels
    return [h for h in hits if (h.col, h.row) not in hot]


# --------------------------------------------------------------------------- response

@dataclass(frozen=True)
class PixelResponse:
    """Charge sharing and threshold applied when converting deposits to hits.

    ``sharing_radius`` is the half-width (mm) of a uniform square charge cloud;
    deposits closer than that to a pixel boundary spill charge into the neighbour.
    """

    sharing_radius: float = 0.010
    threshold: float = 0.5  # keV
    energy_noise: bool = True

    def __post_init__(self):
        if not 0 <= self.sharing_radius <= PIXEL_PITCH / 2:
            raise ConfigError("sharing_radius must lie in [0, pitch/2]")
        if self.threshold < 0:
            raise ConfigError("threshold must be non-negative")


IDEAL_RESPONSE = PixelResponse(sharing_radius=0.0, threshold=0.0, energy_noise=False)


@dataclass(frozen=True)
class TimingModel:
    """Arrival-time model: per-photon Gaussian jitter plus a ToT-dependent walk.

    The walk for a hit with ToT ``t`` is ``timewalk_max * (1 - t / tot_ref)``
    clamped to ``[0, timewalk_max]``.  ``tot_ref=None`` uses the expected ToT
    of a ``TIMEWALK_REF_ENERGY`` deposit, so the walk acts on sub-band charge
    (shared fragments, near-threshold hits) and full photons in the band are
    left with the jitter alone.
    """

    toa_quantum: float = TOA_QUANTUM
    tot_quantum: float = TOT_QUANTUM
    jitter_rms: float = 18.0
    timewalk_max: float = 100.0
    tot_ref: float | None = None

    def __post_init__(self):
        if not self.toa_quantum > 0 or not self.tot_quantum > 0:
            raise ConfigError("time quanta must be positive")
        if self.jitter_rms < 0 or self.timewalk_max < 0:
            raise ConfigError("jitter and timewalk must be non-negative")
        if self.tot_ref is not None and not self.tot_ref > 0:
            raise ConfigError("tot_ref must be positive")

    def timewalk(self, tot, tot_ref):
        if self.timewalk_max == 0:
            return np.zeros_like(np.asarray(tot, dtype=float))
        tw = self.timewalk_max * (1.0 - np.asarray(tot, dtype=float) / tot_ref)
        return np.clip(tw, 0.0, self.timewalk_max)

    def quantize_toa(self, t):
        q = self.toa_quantum
        return np.floor(np.asarray(t, dtype=float) / q) * q


TIMEWALK_REF_ENERGY = 4.0  # keV, lower edge of the down-converted band

IDEAL_TIMING = TimingModel(jitter_rms=0.0, timewalk_max=0.0)


def _axis_sharing(x, pitch, radius):
    """Primary/secondary pixel indices and primary weight along one axis."""
    i = _axis_to_logical(x, pitch)
    lo, hi = pixel_edges(i, pitch)
    j = i.copy()
    w = np.ones_like(x)
    if radius > 0:
        dl = x - lo
        du = hi - x
        left = (dl < radius) & (i > 0)
        right = ~left & (du < radius) & (i < N_LOGICAL - 1)
        w = np.where(left, 1.0 - (radius - dl) / (2 * radius), w)
        w = np.where(right, 1.0 - (radius - du) / (2 * radius), w)
        j = np.where(left, i - 1, np.where(right, i + 1, i))
    return i, j, w


def synthesize_hits_batch(
    x,
    y,
    energy,
    time,
    layout: DetectorLayout,
    calib: ToTCalibration,
    rng: np.random.Generator,
    response: PixelResponse = PixelResponse(),
    timing: TimingModel = IDEAL_TIMING,
    tot_ref: float | None = None,
):
    """Convert photon deposits to pixel hits.

    Returns ``(hits, photon_index)`` where ``photon_index[k]`` is the index of the
    deposit that produced hit ``k``.  Hits are in deposit order, not time order.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    energy = np.asarray(energy, dtype=float)
    time = np.asarray(time, dtype=float)
    n = x.size
    if n == 0:
        return np.zeros(0, HIT_DTYPE), np.zeros(0, dtype=np.int64)
    if not np.all(inside_active_area(x, y, layout)):
        raise OutOfActiveArea("deposit outside the active area")
    pitch = layout.pixel_pitch
    ix, jx, wx = _axis_sharing(x, pitch, response.sharing_radius)
    iy, jy, wy = _axis_sharing(y, pitch, response.sharing_radius)

    # four candidate pixels per deposit; zero-weight ones are dropped below
    cols = np.stack([ix, jx, ix, jx], axis=1).ravel()
    rows = np.stack([iy, iy, jy, jy], axis=1).ravel()
    w = np.stack([wx * wy, (1 - wx) * wy, wx * (1 - wy), (1 - wx) * (1 - wy)], axis=1).ravel()
    photon = np.repeat(np.arange(n), 4)
    keep = w > 0
    cols, rows, w, photon = cols[keep], rows[keep], w[keep], photon[keep]

    e_pix = energy[photon] * w
    if response.energy_noise and calib.sigma_energy > 0:
        e_pix = e_pix + rng.normal(0.0, 1.0, e_pix.size) * calib.sigma_energy * np.sqrt(w)
    # per-photon drift/conversion-depth jitter, common to all pixels of a photon
    jitter = rng.normal(0.0, timing.jitter_rms, n) if timing.jitter_rms > 0 else np.zeros(n)

    tot = calib.quantize(calib.expected_tot(np.maximum(e_pix, 0.0), cols, rows))
    keep = (e_pix > response.threshold) & (tot > 0) & ~layout.hot_map[cols, rows]
    cols, rows, tot, photon = cols[keep], rows[keep], tot[keep], photon[keep]

    if tot_ref is None:
        tot_ref = timing.tot_ref if timing.tot_ref is not None else calib.offset + calib.gain * TIMEWALK_REF_ENERGY
    t = time[photon] + jitter[photon] + timing.timewalk(tot, tot_ref)

    hits = np.empty(cols.size, HIT_DTYPE)
    hits["chip"] = chip_of(cols, rows)
    hits["col"] = cols
    hits["row"] = rows
    hits["toa"] = timing.quantize_toa(t)
    hits["tot"] = tot
    return hits, photon


def synthesize_hits(
    deposit,
    layout: DetectorLayout,
    calib: ToTCalibration,
    rng: np.random.Generator,
    response: PixelResponse = PixelResponse(),
    timing: TimingModel = IDEAL_TIMING,
) -> list[RawHit]:
    """Hits produced by one deposit ``(x_mm, y_mm, energy_keV, time_ns)``."""
    x, y, e, t = deposit
    hits, _ = synthesize_hits_batch([x], [y], [e], [t], layout, calib, rng, response, timing)
    return [RawHit(int(h["chip"]), int(h["col"]), int(h["row"]), float(h["toa"]), float(h["tot"])) for h in hits]


def hits_from_records(records: Iterable) -> np.ndarray:
    recs = list(records)
    arr = np.empty(len(recs), HIT_DTYPE)
    for k, h in enumerate(recs):
        arr[k] = tuple(h)
    return arr
