"""SPDC-vs-background identification from ToT spectra, and the heralded transmission experiment."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from . import detector as det
from .errors import ConfigError, IntegrationError

_SQRT2PI = np.sqrt(2.0 * np.pi)


def _phi(z):
    return np.exp(-0.5 * z * z) / _SQRT2PI


@dataclass(frozen=True)
class SpectrumModel:
    """Normalized ToT density.

    ``kind="gaussian"``: a mixture of Gaussians with ``means``/``weights`` and
    a common resolution ``sigma`` (ns); if ``band=(lo, hi)`` is given the
    means instead run continuously over the band with density proportional
    to ``(t - lo') (hi' - t)`` where ``band_support`` are the roots (the b(1-b)
    pair spectrum in ToT units).  ``kind="empirical"``: piecewise-constant
    density from histogram ``edges``/``counts``.

    ``zeta`` divides the spread: Gaussian sigmas directly, empirical shapes
    by compressing about their mean.
    """

    kind: str = "gaussian"
    means: tuple = ()
    weights: tuple = ()
    sigma: float = 0.0
    band: tuple | None = None
    band_support: tuple | None = None
    edges: tuple = ()
    counts: tuple = ()
    zeta: float = 1.0

    def __post_init__(self):
        if not self.zeta > 0:
            raise ConfigError("resolution factor zeta must be positive")
        if self.kind == "gaussian":
            if not self.sigma > 0:
                raise ConfigError("gaussian spectrum needs sigma > 0")
            if self.band is None and not self.means:
                raise ConfigError("gaussian spectrum needs means or a band")
            if self.weights and len(self.weights) != len(self.means):
                raise ConfigError("weights and means differ in length")
            if self.band is not None and not self.band[0] < self.band[1]:
                raise ConfigError("band must be increasing")
        elif self.kind == "empirical":
            e = np.asarray(self.edges, dtype=float)
            c = np.asarray(self.counts, dtype=float)
            if e.size != c.size + 1 or c.size == 0 or np.any(np.diff(e) <= 0):
                raise ConfigError("empirical spectrum needs increasing edges and len(edges) == len(counts) + 1")
            if np.any(c < 0) or c.sum() <= 0:
                raise ConfigError("empirical counts must be non-negative with positive total")
        else:
            raise ConfigError(f"unknown spectrum kind {self.kind!r}")

    def with_zeta(self, zeta: float) -> "SpectrumModel":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["zeta"] = float(zeta)
        return SpectrumModel(**d)

    # ---------------------------------------------------------------- gaussian pieces
    @property
    def sigma_eff(self) -> float:
        if self.kind == "gaussian":
            return self.sigma / self.zeta
        w = np.diff(self.edges)
        return float(np.min(w)) / self.zeta

    def _w(self):
        m = np.asarray(self.means, dtype=float)
        w = np.asarray(self.weights, dtype=float) if self.weights else np.ones(m.size)
        return m, w / w.sum()

    def _band_density(self, t):
        lo, hi = self.band
        r0, r1 = self.band_support if self.band_support is not None else self.band
        s = self.sigma_eff
        # quadratic weight q(m) = (m - r0)(r1 - m) on [lo, hi]; density = int q(m) N(t; m, s) dm / Z
        a = (lo - t) / s
        b = (hi - t) / s
        m0 = ndtr(b) - ndtr(a)
        m1 = s * (_phi(a) - _phi(b))
        m2 = s * s * (m0 + a * _phi(a) - b * _phi(b))
        # q(t + u) = -(u^2) + u (r0 + r1 - 2t) + (t - r0)(r1 - t)
        val = -m2 + (r0 + r1 - 2 * t) * m1 + (t - r0) * (r1 - t) * m0
        Z = _quad_mass(lo, hi, r0, r1)
        return np.maximum(val, 0.0) / Z

    def density(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.kind == "gaussian":
            if self.band is not None:
                return self._band_density(t)
            m, w = self._w()
            s = self.sigma_eff
            z = (t[..., None] - m) / s
            return (w * _phi(z)).sum(axis=-1) / s
        e = np.asarray(self.edges, dtype=float)
        c = np.asarray(self.counts, dtype=float)
        dens = c / (c.sum() * np.diff(e))
        mu = float(np.sum(0.5 * (e[1:] + e[:-1]) * c) / c.sum())
        u = mu + (t - mu) * self.zeta
        k = np.searchsorted(e, u, side="right") - 1
        inside = (k >= 0) & (k < c.size)
        out = np.zeros(t.shape)
        out[inside] = dens[k[inside]] * self.zeta
        return out

    def support(self, n_sigma: float = 12.0) -> tuple[float, float]:
        if self.kind == "gaussian":
            s = self.sigma_eff
            if self.band is not None:
                return self.band[0] - n_sigma * s, self.band[1] + n_sigma * s
            m, _ = self._w()
            return float(m.min() - n_sigma * s), float(m.max() + n_sigma * s)
        e = np.asarray(self.edges, dtype=float)
        c = np.asarray(self.counts, dtype=float)
        mu = float(np.sum(0.5 * (e[1:] + e[:-1]) * c) / c.sum())
        return mu + (e[0] - mu) / self.zeta, mu + (e[-1] - mu) / self.zeta

    def breakpoints(self) -> np.ndarray:
        """Abscissae where the density has kinks (empirical bin edges)."""
        if self.kind != "empirical":
            return np.zeros(0)
        lo, hi = self.support()
        e = np.asarray(self.edges, dtype=float)
        return lo + (e - e[0]) * (hi - lo) / (e[-1] - e[0])


def _quad_mass(lo, hi, r0, r1):
    # int_lo^hi (m - r0)(r1 - m) dm
    F = lambda m: -(m**3) / 3 + (r0 + r1) * m * m / 2 - r0 * r1 * m
    return F(hi) - F(lo)


def gaussian_spectrum(energy_kev, calib: det.ToTCalibration | None = None, fwhm_kev: float | None = None, zeta=1.0):
    """Single-band Gaussian ToT spectrum at ``energy_kev`` from the linear calibration."""
    calib = calib or det.ToTCalibration()
    fwhm = calib.energy_resolution_fwhm if fwhm_kev is None else fwhm_kev
    return SpectrumModel(
        "gaussian", means=(calib.offset + calib.gain * float(energy_kev),), sigma=calib.gain * fwhm * det.FWHM_TO_SIGMA, zeta=zeta
    )


def spdc_spectrum(calib: det.ToTCalibration | None = None, pump_energy=15.0, b_window=(0.05, 0.95),
                  fwhm_kev: float | None = None, degenerate_only=False, zeta=1.0):
    """ToT spectrum of down-converted photons.

    Default: energies spread over ``b_window`` with weight b(1-b), each
    smeared by the detector resolution.  ``degenerate_only`` puts all weight
    at half the pump energy.
    """
    calib = calib or det.ToTCalibration()
    if degenerate_only:
        return gaussian_spectrum(pump_energy / 2, calib, fwhm_kev, zeta)
    fwhm = calib.energy_resolution_fwhm if fwhm_kev is None else fwhm_kev
    to_tot = lambda e: calib.offset + calib.gain * e
    return SpectrumModel(
        "gaussian",
        sigma=calib.gain * fwhm * det.FWHM_TO_SIGMA,
        band=(to_tot(b_window[0] * pump_energy), to_tot(b_window[1] * pump_energy)),
        band_support=(to_tot(0.0), to_tot(pump_energy)),
        zeta=zeta,
    )


def background_spectrum(calib: det.ToTCalibration | None = None, pump_energy=15.0, fwhm_kev: float | None = None, zeta=1.0):
    return gaussian_spectrum(pump_energy, calib, fwhm_kev, zeta)


def empirical_spectrum(samples, bins=100, range=None, zeta=1.0) -> SpectrumModel:
    counts, edges = np.histogram(np.asarray(samples, dtype=float), bins=bins, range=range)
    return SpectrumModel("empirical", edges=tuple(edges.tolist()), counts=tuple(counts.tolist()), zeta=zeta)


# --------------------------------------------------------------------------- posterior

def _posterior_from_densities(h, g, beta):
    num = np.asarray(h, dtype=float)
    den = num + beta * np.asarray(g, dtype=float)
    out = np.zeros(np.broadcast(num, den).shape)
    ok = den > 0
    out[ok] = (num * np.ones_like(den))[ok] / den[ok]
    return out


def posterior(tot, h: SpectrumModel, g: SpectrumModel, beta: float):
    """P(SPDC | t) = h / (h + beta g); 0 where both densities vanish."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    p = _posterior_from_densities(h.density(tot), g.density(tot), beta)
    return p if p.ndim else float(p)


def _grid(h: SpectrumModel, g: SpectrumModel, per_sigma: int):
    lo, hi = h.support()
    step = min(h.sigma_eff, g.sigma_eff) / per_sigma
    n = int(np.ceil((hi - lo) / step)) + 1
    t = np.linspace(lo, hi, n)
    bp = h.breakpoints()
    if bp.size:
        t = np.union1d(t, bp)
    return t


def aggregate_probability(h: SpectrumModel, g: SpectrumModel, beta: float, zeta: float | None = None,
                          tol: float = 1e-10, max_level: int = 10) -> float:
    """Expected posterior of true SPDC photons: integral of h(t) P(SPDC | t) dt.

    ``zeta`` (if given) replaces the resolution factor of both spectra.  The
    trapezoid grid is refined by doubling until successive results agree to
    ``tol``; the result is normalized by the quadrature mass of ``h``.
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if zeta is not None:
        h, g = h.with_zeta(zeta), g.with_zeta(zeta)
    prev = None
    per_sigma = 8
    for _ in range(max_level):
        t = _grid(h, g, per_sigma)
        hd = h.density(t)
        mass = np.trapezoid(hd, t)
        if abs(mass - 1.0) > 1e-6 and prev is not None:
            raise IntegrationError(f"grid captures {mass:.9f} of the SPDC spectrum")
        val = np.trapezoid(hd * _posterior_from_densities(hd, g.density(t), beta), t) / mass
        if prev is not None and abs(val - prev) < tol:
            if abs(mass - 1.0) > 1e-6:
                raise IntegrationError(f"grid captures {mass:.9f} of the SPDC spectrum")
            return float(min(max(val, 0.0), 1.0))
        prev = val
        per_sigma *= 2
    raise IntegrationError("aggregate probability did not converge")


@dataclass
class ProbabilitySurface:
    betas: np.ndarray
    zetas: np.ndarray
    values: np.ndarray  # [i_zeta, j_beta]
    contour: np.ndarray  # rows (beta, zeta) on the iso-level
    level: float = 0.95
    reference: tuple = (1e5, 1.0)
    reference_value: float = float("nan")


def iso_contour(x, y, z, level):
    """Crossings of ``level`` along the edges of the grid ``z[iy, ix]``.

    Values are interpolated linearly along each cell edge, which is the
    bilinear interpolant restricted to the edge.  Returns rows ``(x, y)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float) - level
    pts = []
    # horizontal edges
    a, b = z[:, :-1], z[:, 1:]
    iy, ix = np.nonzero((a * b < 0) | ((a == 0) & (b != 0)))
    f = a[iy, ix] / (a[iy, ix] - b[iy, ix])
    pts += list(zip(x[ix] + f * (x[ix + 1] - x[ix]), y[iy]))
    a, b = z[:-1, :], z[1:, :]
    iy, ix = np.nonzero((a * b < 0) | ((a == 0) & (b != 0)))
    f = a[iy, ix] / (a[iy, ix] - b[iy, ix])
    pts += list(zip(x[ix], y[iy] + f * (y[iy + 1] - y[iy])))
    if not pts:
        return np.zeros((0, 2))
    out = np.unique(np.asarray(pts), axis=0)
    return out[np.lexsort((out[:, 0], out[:, 1]))]


def probability_surface(h: SpectrumModel, g: SpectrumModel, beta_grid, zeta_grid, level=0.95, reference=(1e5, 1.0)):
    betas = np.asarray(beta_grid, dtype=float)
    zetas = np.asarray(zeta_grid, dtype=float)
    vals = np.empty((zetas.size, betas.size))
    for i, z in enumerate(zetas):
        hz, gz = h.with_zeta(z), g.with_zeta(z)
        for j, b in enumerate(betas):
            vals[i, j] = aggregate_probability(hz, gz, b)
    # interpolate in log10(beta) where possible so the contour follows the plotted axis
    pos = betas > 0
    xb = np.where(pos, np.log10(np.where(pos, betas, 1.0)), -np.inf)
    if np.all(pos):
        c = iso_contour(xb, zetas, vals, level)
        c[:, 0] = 10 ** c[:, 0]
    else:
        c = iso_contour(betas, zetas, vals, level)
    ref = aggregate_probability(h, g, reference[0], reference[1])
    return ProbabilitySurface(betas, zetas, vals, c, level, tuple(reference), ref)


def write_surface(path, surf: ProbabilitySurface, meta: str | None = None):
    lines = ([meta] if meta else []) + ["zeta\\beta," + ",".join(repr(float(b)) for b in surf.betas)]
    for z, row in zip(surf.zetas, surf.values):
        lines.append(repr(float(z)) + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_contour(path, surf: ProbabilitySurface, meta: str | None = None):
    lines = ([meta] if meta else []) + ["beta,zeta"]
    lines += [f"{float(b)!r},{float(z)!r}" for b, z in surf.contour]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- sub-shot-noise

@dataclass(frozen=True)
class SsnConfig:
    mean_flux: float = 100.0  # photons per pixel per frame
    transmission_truth: float = 0.5
    n_frames: int = 100_000
    heralding_efficiency: float = 1.0

    def __post_init__(self):
        if not self.mean_flux > 0:
            raise ConfigError("mean_flux must be positive")
        if not 0 <= self.transmission_truth <= 1:
            raise ConfigError("transmission_truth must lie in [0, 1]")
        if int(self.n_frames) != self.n_frames or self.n_frames < 1:
            raise ConfigError("n_frames must be a positive integer")
        if not 0 <= self.heralding_efficiency <= 1:
            raise ConfigError("heralding_efficiency must lie in [0, 1]")


def _var_stderr(x):
    n = x.size
    v = float(np.var(x, ddof=1)) if n > 1 else 0.0
    m4 = float(np.mean((x - x.mean()) ** 4)) if n else 0.0
    se = float(np.sqrt(max(m4 - v * v, 0.0) / n)) if n else 0.0
    return v, se


def ssn_experiment(cfg: SsnConfig, rng: np.random.Generator) -> dict:
    """Transmission-estimator variances without and with heralding.

    Classical: ``N ~ Poisson(t lam)``, estimate ``N / lam``.  Heralded: incident
    ``N_inc ~ Poisson(lam)``, transmitted ``N ~ Binomial(N_inc, t)``; each
    incident photon is heralded with probability ``eta`` and the incident
    count is estimated as ``N_herald + (1 - eta) lam``, so ``eta = 1`` gives
    ``N / N_inc`` and ``eta = 0`` falls back to the classical estimator.
    Frames whose incident estimate is 0 are skipped.
    """
    lam, t, n, eta = cfg.mean_flux, cfg.transmission_truth, int(cfg.n_frames), cfg.heralding_efficiency
    t_cl = rng.poisson(t * lam, n) / lam
    n_inc = rng.poisson(lam, n)
    n_meas = rng.binomial(n_inc, t)
    n_her = rng.binomial(n_inc, eta)
    denom = n_her + (1.0 - eta) * lam
    ok = denom > 0
    t_her = n_meas[ok] / denom[ok]
    v_cl, se_cl = _var_stderr(t_cl)
    v_her, se_her = _var_stderr(t_her)
    if v_cl > 0:
        ratio = v_her / v_cl
        rel = np.sqrt((se_cl / v_cl) ** 2 + ((se_her / v_her) ** 2 if v_her > 0 else 0.0))
        stderr = float(ratio * rel)
    else:
        ratio, stderr = float("nan"), float("nan")
    return {
        "var_classical": v_cl,
        "var_heralded": v_her,
        "ratio": float(ratio),
        "stderr": stderr,
        "mean_classical": float(t_cl.mean()),
        "mean_heralded": float(t_her.mean()) if t_her.size else float("nan"),
        "frames_used": int(ok.sum()),
        "config": asdict(cfg),
    }


def write_report(path, report: dict, meta: dict | None = None):
    out = dict(report)
    if meta:
        out["metadata"] = meta
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
