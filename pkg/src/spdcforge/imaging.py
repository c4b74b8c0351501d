"""Correlation images, detuning-blur correction, energy contours and ghost mapping."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import curve_fit
from scipy.special import erf

from . import detector as det
from . import kinematics as kin
from .coincidence import pair_geometry
from .errors import DegenerateGeometry, DomainError, FitError

GAP_SLOTS = (255, 256, 257, 258)  # physical slots covered by the wide central pixels


@dataclass
class CorrelationImage:
    """Counts on the physical detector grid, ``grid[iy, ix]``, optionally rebinned."""

    grid: np.ndarray
    arm: str
    exposure: float = 0.0  # hours
    rebin: int = 1
    pitch: float = det.PIXEL_PITCH
    metadata: dict = field(default_factory=dict)

    @property
    def bin_size(self) -> float:
        return self.pitch * self.rebin

    @property
    def total(self) -> int:
        return int(self.grid.sum())

    def centers(self):
        ny, nx = self.grid.shape
        return (np.arange(nx) + 0.5) * self.bin_size, (np.arange(ny) + 0.5) * self.bin_size

    def gap_bins(self) -> np.ndarray:
        """Indices of bins (per axis) that overlap the central wide-pixel slots."""
        return np.unique(np.asarray(GAP_SLOTS) // self.rebin)

    def __add__(self, other: "CorrelationImage") -> "CorrelationImage":
        if self.grid.shape != other.grid.shape or self.arm != other.arm:
            raise ValueError("images are not compatible")
        return CorrelationImage(self.grid + other.grid, self.arm, self.exposure + other.exposure, self.rebin, self.pitch, dict(self.metadata))


def n_bins(rebin: int = 1) -> int:
    if rebin < 1:
        raise ValueError("rebin must be >= 1")
    return -(-det.N_PHYSICAL // rebin)


def bin_points(x, y, rebin: int = 1, pitch: float = det.PIXEL_PITCH) -> np.ndarray:
    n = n_bins(rebin)
    size = pitch * rebin
    ix = np.clip(np.floor(np.asarray(x) / size).astype(int), 0, n - 1)
    iy = np.clip(np.floor(np.asarray(y) / size).astype(int), 0, n - 1)
    grid = np.zeros((n, n), dtype=np.int64)
    np.add.at(grid, (iy, ix), 1)
    return grid


def accumulate(pairs: np.ndarray, rebin: int = 1, exposure: float = 0.0, pitch: float = det.PIXEL_PITCH, metadata=None):
    """Signal and idler correlation images of the passed pairs."""
    p = pairs[pairs["passed"]]
    meta = dict(metadata or {})
    sig = CorrelationImage(bin_points(p["xs"], p["ys"], rebin, pitch), det.SIGNAL, exposure, rebin, pitch, meta)
    idl = CorrelationImage(bin_points(p["xi"], p["yi"], rebin, pitch), det.IDLER, exposure, rebin, pitch, meta)
    return sig, idl


def singles_image(clusters: np.ndarray, arm: str | None = None, rebin: int = 1, pitch: float = det.PIXEL_PITCH):
    """Map of all clusters regardless of coincidence (classical reference image)."""
    c = clusters if arm is None else clusters[clusters["arm"] == det.ARM_CODE[arm]]
    return CorrelationImage(bin_points(c["x"], c["y"], rebin, pitch), arm or "all", rebin=rebin, pitch=pitch)


def display_transform(grid: np.ndarray, rotate: bool = True, mirror: bool = True) -> np.ndarray:
    """Optional view transform for idler images: rotate 180 degrees, then mirror left-right."""
    out = np.rot90(grid, 2) if rotate else grid
    return out[:, ::-1] if mirror else out


# --------------------------------------------------------------------------- correction

def correct_idler(pairs: np.ndarray, geom: kin.ExperimentGeometry, layout=None, center=None) -> np.ndarray:
    """Rescale each idler's emission angle by nominal/calculated detuning.

    Returns a copy of ``pairs`` with idler positions replaced; the azimuth about
    the ring center is kept.
    """
    cx, cy = center if center is not None else det.ring_center_mm(geom, layout)
    out = pairs.copy()
    if out.size == 0:
        return out
    if np.all(out["detuning"] == 0):
        out = pair_geometry(out, geom, layout, center)
    dcalc = out["detuning"]
    if np.any(~(dcalc > 0)):
        raise DegenerateGeometry("calculated detuning must be positive")
    L = geom.crystal_to_detector
    alpha_i = np.arctan(out["r_i"] / L)
    r_new = L * np.tan(geom.detuning / dcalc * alpha_i)
    phi = np.arctan2(out["yi"] - cy, out["xi"] - cx)
    out["xi"] = cx + r_new * np.cos(phi)
    out["yi"] = cy + r_new * np.sin(phi)
    out["r_i"] = r_new
    out["ei_pos"] = kin.energy_from_radius(r_new, geom)
    return out


# --------------------------------------------------------------------------- contours and mapping

def energy_contours(geom: kin.ExperimentGeometry, energies) -> np.ndarray:
    """Radius (mm) on which photons of each energy land at nominal detuning."""
    e = np.asarray(energies, dtype=float)
    if np.any((e <= 0) | (e >= geom.pump_energy)):
        raise DomainError("contour energies must lie in (0, pump_energy)")
    return geom.crystal_to_detector * np.tan(np.sqrt(geom.K * (geom.pump_energy - e) / e))


def write_contours(path, geom: kin.ExperimentGeometry, energies, meta: str | None = None):
    r = energy_contours(geom, energies)
    lines = ([meta] if meta else []) + ["energy_keV,r_mm"]
    lines += [f"{float(e)!r},{float(v)!r}" for e, v in zip(np.atleast_1d(energies), np.atleast_1d(r))]
    Path(path).write_text("\n".join(lines) + "\n")


def map_points(x, y, geom: kin.ExperimentGeometry, center) -> tuple[np.ndarray, np.ndarray]:
    """Partner position of each point: conjugate radius, azimuth rotated by pi."""
    cx, cy = center
    dx = np.asarray(x, dtype=float) - cx
    dy = np.asarray(y, dtype=float) - cy
    r = np.hypot(dx, dy)
    rc = kin.conjugate_radius(r, geom)
    phi = np.arctan2(dy, dx) + np.pi
    return cx + rc * np.cos(phi), cy + rc * np.sin(phi)


def square_grid(center, spacing=2.0, extent=12.0, half=det.SIGNAL, n_line=41):
    """Polyline points of a square grid on one detector half, offsets relative to ``center``.

    Returns an array of rows ``(line_id, x, y)``.
    """
    cx, cy = center
    offs = np.arange(-extent, extent + 1e-9, spacing)
    t = np.linspace(-extent, extent, n_line)
    sign = 1.0 if half == det.SIGNAL else -1.0
    rows = []
    lid = 0
    for o in offs:
        if o > 0:  # horizontal line at y offset o inside the chosen half
            rows += [(lid, cx + u, cy + sign * o) for u in t]
            lid += 1
    for o in offs:
        ts = t[t > 0]
        rows += [(lid, cx + o, cy + sign * u) for u in ts]
        lid += 1
    return np.asarray(rows)


def grid_mapping(geom: kin.ExperimentGeometry, grid_spec: dict | None = None, layout=None, r_min: float = 1.0):
    """Map a square grid on the signal half onto the idler half.

    Returns rows ``(line_id, xs, ys, xi, yi)``; points closer than ``r_min`` mm
    to the ring center are dropped (their partners leave the detector).
    """
    spec = dict(grid_spec or {})
    center = det.ring_center_mm(geom, layout)
    pts = square_grid(center, spec.get("spacing", 2.0), spec.get("extent", 12.0), det.SIGNAL, spec.get("n_line", 41))
    r = np.hypot(pts[:, 1] - center[0], pts[:, 2] - center[1])
    pts = pts[r >= r_min]
    xi, yi = map_points(pts[:, 1], pts[:, 2], geom, center)
    return np.column_stack([pts, xi, yi])


def write_gridmap(path, table: np.ndarray, meta: str | None = None):
    lines = ([meta] if meta else []) + ["line_id,xs_mm,ys_mm,xi_mm,yi_mm"]
    lines += [f"{int(r[0])},{float(r[1])!r},{float(r[2])!r},{float(r[3])!r},{float(r[4])!r}" for r in table]
    Path(path).write_text("\n".join(lines) + "\n")


def line_fit_rms(x, y) -> float:
    """Rms orthogonal residual of the total-least-squares line."""
    pts = np.column_stack([x, y]).astype(float)
    pts -= pts.mean(axis=0)
    s = np.linalg.svd(pts, compute_uv=False)
    return float(s[-1] / np.sqrt(len(pts)))


def circle_fit(x, y):
    """Algebraic (Kasa) circle fit.  Returns (xc, yc, radius, rms radial residual)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 3:
        raise FitError("circle fit needs at least 3 points")
    A = np.column_stack([x, y, np.ones_like(x)])
    sol, *_ = np.linalg.lstsq(A, x * x + y * y, rcond=None)
    xc, yc = sol[0] / 2, sol[1] / 2
    R = np.sqrt(sol[2] + xc * xc + yc * yc)
    resid = np.hypot(x - xc, y - yc) - R
    return float(xc), float(yc), float(R), float(np.sqrt(np.mean(resid**2)))


def circle_fit_rms(x, y) -> float:
    return circle_fit(x, y)[3]


# --------------------------------------------------------------------------- sharpness

@dataclass(frozen=True)
class EdgeSpec:
    """Region across which an edge profile is measured.

    ``kind="radial"``: profile in radius about ``center`` over ``(lo, hi)`` mm,
    limited to azimuths in ``azimuth`` (rad, may wrap).  ``kind="linear"``:
    profile along ``axis`` ("x" or "y") over ``(lo, hi)`` mm, averaged over the
    ``band`` range of the other axis.
    """

    kind: str = "radial"
    lo: float = 0.0
    hi: float = 1.0
    center: tuple | None = None
    azimuth: tuple | None = None
    axis: str = "x"
    band: tuple | None = None
    bins: int | None = None


def _edge_model(u, a, b, u0, s, k):
    return a + b * 0.5 * (1.0 + erf((u - u0) / (np.sqrt(2.0) * s))) + k * (u - u0)


def _in_azimuth(phi, rng):
    lo, hi = rng
    return np.mod(phi - lo, 2 * np.pi) <= np.mod(hi - lo, 2 * np.pi)


def edge_profile(image: CorrelationImage, spec: EdgeSpec):
    """Mean counts per image bin versus the edge coordinate.  Returns (u, density)."""
    xc, yc = image.centers()
    X, Y = np.meshgrid(xc, yc)
    sel = np.ones(image.grid.shape, dtype=bool)
    gaps = image.gap_bins()
    sel[gaps, :] = False
    sel[:, gaps] = False
    if spec.kind == "radial":
        if spec.center is None:
            raise ValueError("radial edge needs a center")
        dx, dy = X - spec.center[0], Y - spec.center[1]
        u = np.hypot(dx, dy)
        if spec.azimuth is not None:
            sel &= _in_azimuth(np.arctan2(dy, dx), spec.azimuth)
    elif spec.kind == "linear":
        u, v = (X, Y) if spec.axis == "x" else (Y, X)
        if spec.band is not None:
            sel &= (v >= spec.band[0]) & (v <= spec.band[1])
    else:
        raise ValueError(f"unknown edge kind {spec.kind!r}")
    sel &= (u >= spec.lo) & (u <= spec.hi)
    nb = spec.bins or max(int(round((spec.hi - spec.lo) / image.bin_size)), 4)
    edges = np.linspace(spec.lo, spec.hi, nb + 1)
    cnt, _ = np.histogram(u[sel], edges, weights=image.grid[sel])
    area, _ = np.histogram(u[sel], edges)
    ok = area > 0
    centers = 0.5 * (edges[1:] + edges[:-1])
    return centers[ok], cnt[ok] / area[ok]


def fit_edge(u, f, min_sigma: float | None = None):
    """Fit an error-function step (with linear slope) to profile ``f(u)``.

    Returns ``(sigma, u0)``.
    """
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    if u.size < 5:
        raise FitError("edge profile too short")
    du = np.min(np.diff(u)) if u.size > 1 else 1.0
    n = max(u.size // 5, 1)
    left, right = f[:n].mean(), f[-n:].mean()
    half = 0.5 * (left + right)
    # edge guess: first crossing of the half level
    cross = np.nonzero(np.diff(np.sign(f - half)))[0]
    u0 = u[cross[0]] if cross.size else u.mean()
    span = u[-1] - u[0]
    lo_s = min_sigma if min_sigma is not None else 1e-3 * du
    p0 = (left, right - left, u0, max(2 * du, lo_s * 1.01), 0.0)
    bounds = ([-np.inf, -np.inf, u[0], lo_s, -np.inf], [np.inf, np.inf, u[-1], span, np.inf])
    try:
        popt, _ = curve_fit(_edge_model, u, f, p0=p0, bounds=bounds, maxfev=20000)
    except (RuntimeError, ValueError) as exc:
        raise FitError(str(exc)) from None
    return float(popt[3]), float(popt[2])


def sharpness_metric(image: CorrelationImage, edge_spec: EdgeSpec) -> float:
    """Edge-spread sigma (mm) of an error-function fit across the specified edge."""
    u, f = edge_profile(image, edge_spec)
    return fit_edge(u, f)[0]


def points_edge_sigma(r, lo, hi, bins=80):
    """Edge sigma from a 1-D sample of edge coordinates (e.g. idler radii), no imaging grid."""
    cnt, edges = np.histogram(r, bins=bins, range=(lo, hi))
    u = 0.5 * (edges[1:] + edges[:-1])
    return fit_edge(u, cnt.astype(float))[0]


# --------------------------------------------------------------------------- export

def write_pgm(path, grid: np.ndarray, comment: str | None = None):
    """16-bit binary PGM scaled so the maximum maps to 65535."""
    g = np.asarray(grid, dtype=float)
    m = g.max() if g.size else 0.0
    scaled = np.zeros(g.shape, dtype=">u2") if m <= 0 else np.round(g / m * 65535).astype(">u2")
    ny, nx = g.shape
    head = "P5\n"
    if comment:
        head += "".join(f"{ln if ln.startswith('#') else '# ' + ln}\n" for ln in comment.splitlines())
    head += f"{nx} {ny}\n65535\n"
    with open(path, "wb") as fh:
        fh.write(head.encode("ascii"))
        fh.write(scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    pos += 1
    nx, ny = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data[pos:pos + 2 * nx * ny], dtype=">u2").reshape(ny, nx)


def write_image_csv(path, image: CorrelationImage, meta: str | None = None):
    """Counts matrix, one image row per line; gap bin indices listed in a comment."""
    lines = [meta] if meta else []
    lines.append("# gap_bins=" + ";".join(str(int(i)) for i in image.gap_bins()))
    lines += [",".join(str(int(v)) for v in row) for row in image.grid]
    Path(path).write_text("\n".join(lines) + "\n")


def read_image_csv(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    return np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64)


def write_image(stem, image: CorrelationImage, meta: str | None = None, transform: bool = False):
    grid = display_transform(image.grid) if transform else image.grid
    shown = CorrelationImage(grid, image.arm, image.exposure, image.rebin, image.pitch, image.metadata)
    write_pgm(f"{stem}.pgm", grid, meta)
    write_image_csv(f"{stem}.csv", shown, meta)
