"""Signal/idler pairing by smallest time difference and kinematic pair filters."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit

from . import detector as det
from . import kinematics as kin
from .errors import ConfigError, DegenerateGeometry, FitError, ParseError

PAIR_DTYPE = np.dtype(
    [
        ("sig", "i8"),
        ("idl", "i8"),
        ("dt", "f8"),  # signal toa - idler toa
        ("xs", "f8"),
        ("ys", "f8"),
        ("xi", "f8"),
        ("yi", "f8"),
        ("es", "f8"),  # calibrated cluster energies
        ("ei", "f8"),
        ("tot_s", "f8"),
        ("tot_i", "f8"),
        ("r_s", "f8"),
        ("r_i", "f8"),
        ("phi_s", "f8"),
        ("phi_i", "f8"),
        ("es_pos", "f8"),  # energies reconstructed from radius
        ("ei_pos", "f8"),
        ("detuning", "f8"),
        ("pass_azimuth", "?"),
        ("pass_energy", "?"),
        ("pass_tot", "?"),
        ("passed", "?"),
    ]
)

PAIR_HEADER = "dt_ns,xs_mm,ys_mm,xi_mm,yi_mm,es_keV,ei_keV,detuning_rad,passed"


@dataclass(frozen=True)
class PairFilterConfig:
    time_window: float = 200.0  # ns, symmetric
    azimuth_tolerance: float = 0.05  # rad
    energy_tolerance: float = 1.5  # keV
    tot_box: tuple | None = None  # ((sig_lo, sig_hi), (idl_lo, idl_hi)) summed ToT, ns

    def __post_init__(self):
        if not (self.time_window > 0 and self.azimuth_tolerance > 0 and self.energy_tolerance > 0):
            raise ConfigError("pair filter tolerances must be positive")


@dataclass
class MatchResult:
    pairs: np.ndarray
    signal_singles: np.ndarray  # indices into the signal cluster array
    idler_singles: np.ndarray


def match_pairs(signal: np.ndarray, idler: np.ndarray, cfg: PairFilterConfig = PairFilterConfig()) -> MatchResult:
    """Greedy one-to-one matching in signal time order.

    Each signal event takes the unconsumed idler closest in time within
    ``cfg.time_window``; equal distances go to the earlier idler.
    """
    st = signal["toa"]
    it = idler["toa"]
    if np.any(np.diff(st) < 0) or np.any(np.diff(it) < 0):
        raise ValueError("inputs must be time-ordered")
    w = cfg.time_window
    lo = np.searchsorted(it, st - w, side="left")
    hi = np.searchsorted(it, st + w, side="right")
    used = np.zeros(it.size, dtype=bool)
    s_idx, i_idx = [], []
    for s in np.nonzero(hi > lo)[0]:
        a, b = lo[s], hi[s]
        free = ~used[a:b]
        if not free.any():
            continue
        d = np.abs(it[a:b] - st[s])
        d[~free] = np.inf
        k = a + int(np.argmin(d))
        used[k] = True
        s_idx.append(s)
        i_idx.append(k)
    s_idx = np.asarray(s_idx, dtype=np.int64)
    i_idx = np.asarray(i_idx, dtype=np.int64)

    pairs = np.zeros(s_idx.size, PAIR_DTYPE)
    pairs["sig"] = s_idx
    pairs["idl"] = i_idx
    if s_idx.size:
        pairs["dt"] = st[s_idx] - it[i_idx]
        for f_pair, f_cl, src, idx in (
            ("xs", "x", signal, s_idx), ("ys", "y", signal, s_idx), ("es", "energy", signal, s_idx),
            ("xi", "x", idler, i_idx), ("yi", "y", idler, i_idx), ("ei", "energy", idler, i_idx),
        ):
            pairs[f_pair] = src[f_cl][idx]
        if "tot_sum" in signal.dtype.names:
            pairs["tot_s"] = signal["tot_sum"][s_idx]
            pairs["tot_i"] = idler["tot_sum"][i_idx]
    matched_s = np.zeros(st.size, dtype=bool)
    matched_s[s_idx] = True
    return MatchResult(pairs, np.nonzero(~matched_s)[0], np.nonzero(~used)[0])


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2 * np.pi)


def pair_geometry(pairs: np.ndarray, geom: kin.ExperimentGeometry, layout: det.DetectorLayout | None = None, center=None):
    """Fill radii, azimuths, position energies and calculated detuning in place."""
    cx, cy = center if center is not None else det.ring_center_mm(geom, layout)
    dxs, dys = pairs["xs"] - cx, pairs["ys"] - cy
    dxi, dyi = pairs["xi"] - cx, pairs["yi"] - cy
    r_s = np.hypot(dxs, dys)
    r_i = np.hypot(dxi, dyi)
    if np.any(r_s == 0) or np.any(r_i == 0):
        raise DegenerateGeometry("event coincides with the ring center")
    pairs["r_s"] = r_s
    pairs["r_i"] = r_i
    pairs["phi_s"] = np.arctan2(dys, dxs)
    pairs["phi_i"] = np.arctan2(dyi, dxi)
    pairs["es_pos"] = kin.energy_from_radius(r_s, geom)
    pairs["ei_pos"] = kin.energy_from_radius(r_i, geom)
    L = geom.crystal_to_detector
    if pairs.size:
        pairs["detuning"] = kin.detuning_from_angles(np.arctan(r_s / L), np.arctan(r_i / L), geom.bragg_angle)
    return pairs


def spatial_filter(pairs: np.ndarray, geom: kin.ExperimentGeometry, cfg: PairFilterConfig = PairFilterConfig(), layout=None, center=None):
    """Flag pairs that are anti-collinear about the ring center and conserve pump energy.

    Returns a copy with geometry fields and ``pass_*``/``passed`` flags set.
    """
    out = pair_geometry(pairs.copy(), geom, layout, center)
    resid = wrap_angle(out["phi_s"] - out["phi_i"] - np.pi)
    out["pass_azimuth"] = np.abs(resid) <= cfg.azimuth_tolerance
    out["pass_energy"] = np.abs(out["es_pos"] + out["ei_pos"] - geom.pump_energy) <= cfg.energy_tolerance
    if cfg.tot_box is not None:
        (s_lo, s_hi), (i_lo, i_hi) = cfg.tot_box
        out["pass_tot"] = (out["tot_s"] >= s_lo) & (out["tot_s"] <= s_hi) & (out["tot_i"] >= i_lo) & (out["tot_i"] <= i_hi)
    else:
        out["pass_tot"] = True
    out["passed"] = out["pass_azimuth"] & out["pass_energy"] & out["pass_tot"]
    return out


def passed(pairs: np.ndarray) -> np.ndarray:
    return pairs[pairs["passed"]]


# --------------------------------------------------------------------------- observables

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    center: float = float("nan")
    rms: float = float("nan")
    n: int = 0

    def rows(self):
        return list(zip(self.edges[:-1].tolist(), self.counts.tolist()))


def dt_histogram(pairs: np.ndarray, bin_ns: float = 6.25, window: float | None = None, only_passed: bool = True) -> Histogram:
    """Histogram of signal-minus-idler time differences with mean and rms."""
    p = pairs[pairs["passed"]] if only_passed else pairs
    dt = p["dt"]
    if window is None:
        window = float(np.max(np.abs(dt))) if dt.size else bin_ns
    n_half = int(np.ceil(window / bin_ns))
    edges = (np.arange(-n_half, n_half + 2) - 0.5) * bin_ns  # bins centred on k * bin_ns
    counts, _ = np.histogram(dt, edges)
    h = Histogram(edges, counts, n=int(dt.size))
    if dt.size:
        h.center = float(np.mean(dt))
        h.rms = float(np.std(dt))
    return h


def signal_to_accidental(pairs: np.ndarray, peak_halfwidth: float, window: float) -> float:
    """Ratio of coincidences in the dt peak to the flat accidental level under it.

    The accidental density is estimated from the side bands
    ``peak_halfwidth < |dt| <= window``.
    """
    dt = np.abs(pairs["dt"])
    peak = np.count_nonzero(dt <= peak_halfwidth)
    side = np.count_nonzero((dt > peak_halfwidth) & (dt <= window))
    side_width = 2 * (window - peak_halfwidth)
    if side_width <= 0:
        raise ValueError("window must exceed the peak half-width")
    acc = side / side_width * 2 * peak_halfwidth
    return float("inf") if acc == 0 else float((peak - acc) / acc)


def _gauss(x, a, mu, s):
    return a * np.exp(-0.5 * ((x - mu) / s) ** 2)


@dataclass
class DetuningFit:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    sigma: float
    n: int


def gaussian_fit(values, bins: int | None = None, min_entries: int = 100):
    """Least-squares Gaussian fit to a histogram of ``values``.  Returns (edges, counts, mean, sigma)."""
    v = np.asarray(values, dtype=float)
    if v.size < min_entries:
        raise FitError(f"need at least {min_entries} entries, got {v.size}")
    med = np.median(v)
    mad = 1.4826 * np.median(np.abs(v - med))
    spread = mad if mad > 0 else (np.std(v) or abs(med) * 1e-6 or 1e-12)
    lo, hi = med - 6 * spread, med + 6 * spread
    if bins is None:
        bins = int(np.clip(np.sqrt(v.size), 20, 200))
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    x = 0.5 * (edges[1:] + edges[:-1])
    if mad == 0:
        return edges, counts, float(med), 0.0
    try:
        popt, _ = curve_fit(_gauss, x, counts, p0=(counts.max(), med, spread), maxfev=5000)
    except RuntimeError as exc:
        raise FitError(str(exc)) from None
    return edges, counts, float(popt[1]), float(abs(popt[2]))


def detuning_histogram(pairs: np.ndarray, geom: kin.ExperimentGeometry, bins: int | None = None, layout=None) -> DetuningFit:
    """Per-pair detuning of passed pairs with a Gaussian fit (radians)."""
    p = pairs[pairs["passed"]]
    if p.size and np.all(p["detuning"] == 0):
        p = pair_geometry(p.copy(), geom, layout)
    edges, counts, mu, sigma = gaussian_fit(p["detuning"], bins)
    return DetuningFit(edges, counts, mu, sigma, int(p.size))


def emission_scatter(pairs: np.ndarray, geom: kin.ExperimentGeometry, n_curve: int = 200):
    """Per-pair (alpha_s, alpha_i, es_pos, ei_pos) for passed pairs and the nominal hyperbola.

    Returns ``(table, curve)`` where ``curve`` holds (alpha_s, alpha_i) on
    ``alpha_s * alpha_i = 2 dtheta sin 2theta``.
    """
    p = pairs[pairs["passed"]]
    L = geom.crystal_to_detector
    table = np.column_stack([np.arctan(p["r_s"] / L), np.arctan(p["r_i"] / L), p["es_pos"], p["ei_pos"]])
    a = np.linspace(*np.sqrt(geom.K * np.array([0.05 / 0.95, 0.95 / 0.05])), n_curve)
    curve = np.column_stack([a, geom.K / a])
    return table, curve


def energy_histogram_2d(pairs: np.ndarray, bins=60, e_range=(0.0, 20.0)):
    """2D histogram of calibrated signal vs idler cluster energies (ToT-space analog)."""
    h, xe, ye = np.histogram2d(pairs["es"], pairs["ei"], bins=bins, range=[e_range, e_range])
    return h, xe, ye


# --------------------------------------------------------------------------- I/O

def write_pairs(path, pairs: np.ndarray, meta: str | None = None):
    lines = ([meta] if meta else []) + [PAIR_HEADER]
    for p in pairs:
        lines.append(
            f"{float(p['dt'])!r},{float(p['xs'])!r},{float(p['ys'])!r},{float(p['xi'])!r},{float(p['yi'])!r},{float(p['es'])!r},{float(p['ei'])!r},{float(p['detuning'])!r},{int(bool(p['passed']))}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_pairs(path) -> np.ndarray:
    with open(path) as fh:
        lines = [(n, ln.strip()) for n, ln in enumerate(fh, start=1) if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0][1] != PAIR_HEADER:
        raise ParseError(f"pair header must be {PAIR_HEADER}")
    out = np.zeros(len(lines) - 1, PAIR_DTYPE)
    for k, (n, ln) in enumerate(lines[1:]):
        f = ln.split(",")
        if len(f) != 9:
            raise ParseError(f"expected 9 fields, got {len(f)}", n)
        try:
            vals = [float(v) for v in f[:8]]
            ok = f[8] in ("0", "1")
        except ValueError as exc:
            raise ParseError(str(exc), n) from None
        if not ok:
            raise ParseError("passed must be 0 or 1", n)
        rec = out[k]
        rec["dt"], rec["xs"], rec["ys"], rec["xi"], rec["yi"], rec["es"], rec["ei"], rec["detuning"] = vals
        rec["sig"] = rec["idl"] = -1
        rec["passed"] = f[8] == "1"
    return out


def write_histogram(path, hist: Histogram, meta: str | None = None):
    lines = ([meta] if meta else []) + ["bin_low,count"]
    lines += [f"{float(lo)!r},{int(c)}" for lo, c in hist.rows()]
    Path(path).write_text("\n".join(lines) + "\n")
