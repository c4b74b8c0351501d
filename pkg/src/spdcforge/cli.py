"""``spdcforge`` command line: simulate, process, image, identify.

Exit codes: 0 success, 2 configuration error, 3 I/O or parse error.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import coincidence as co
from . import detector as det
from . import identification as idf
from . import imaging as im
from . import pipeline as pl
from . import simulator as sim
from .errors import ConfigError, FitError, OrderError, ParseError, SpdcIOError

log = logging.getLogger("spdcforge")

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

DEFAULTS = {
    "pipeline": {"time_window": pl.DEFAULT_TIME_WINDOW, "band": list(pl.DEFAULT_BAND), "mode": "energy", "reorder_buffer": 4096},
    "coincidence": {"time_window": 200.0, "azimuth_tolerance": 0.05, "energy_tolerance": 1.5, "tot_box": None, "dt_bin": 6.25},
    "imaging": {
        "rebin": 1,
        "contour_energies": [6.0, 7.5, 9.0],
        "grid": {"spacing": 2.0, "extent": 12.0, "n_line": 41},
        "display_transform": False,
    },
    "identification": {
        "beta": {"start": 0.0, "stop": 7.0, "num": 20},  # log10 range
        "zeta": {"start": 0.5, "stop": 5.0, "num": 20},
        "spectrum": "band",
        "fwhm_keV": None,
        "reference": [1e5, 1.0],
        "ssn": {"mean_flux": 100.0, "transmission_truth": 0.5, "n_frames": 100000, "heralding_efficiency": 1.0},
    },
}


class RunConfig:
    """Merged JSON configuration plus seed; digest covers everything that shapes outputs."""

    def __init__(self, raw: dict | None = None, seed: int | None = None):
        raw = copy.deepcopy(raw or {})
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        known = {"geometry", "detector", "timing", "simulation", "seed", "input", "run", *DEFAULTS}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for sec, d in DEFAULTS.items():
            merged = copy.deepcopy(d)
            user = raw.get(sec, {})
            if not isinstance(user, dict):
                raise ConfigError(f"section {sec!r} must be an object")
            bad = set(user) - set(d)
            if bad:
                raise ConfigError(f"unknown keys in {sec!r}: {sorted(bad)}")
            merged.update(user)
            raw[sec] = merged
        if seed is not None:
            raw["seed"] = int(seed)
        raw.setdefault("seed", 0)
        self.raw = raw

    @classmethod
    def load(cls, path, seed=None) -> "RunConfig":
        if path is None:
            return cls({}, seed)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise SpdcIOError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        return cls(raw, seed)

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name) -> dict:
        return self.raw[name]

    def simulation(self) -> sim.SimulationConfig:
        d = {k: self.raw[k] for k in ("geometry", "detector", "timing", "simulation") if k in self.raw}
        d["seed"] = self.seed
        return sim.SimulationConfig.from_dict(d)

    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def meta(self) -> str:
        return sim.metadata_line(self.digest(), self.seed)

    def filter_config(self) -> co.PairFilterConfig:
        c = self.raw["coincidence"]
        box = c["tot_box"]
        return co.PairFilterConfig(
            time_window=float(c["time_window"]),
            azimuth_tolerance=float(c["azimuth_tolerance"]),
            energy_tolerance=float(c["energy_tolerance"]),
            tot_box=None if box is None else tuple(tuple(map(float, b)) for b in box),
        )


def _write_json(path, obj, meta_line: str):
    seed, digest = meta_line.split("seed=")[1].split(" config_sha256=")
    out = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in obj.items()}
    out["metadata"] = {"seed": int(seed), "config_sha256": digest}
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True, default=float) + "\n")


def _write_rows(path, header, rows, meta):
    lines = [meta, header] + [",".join(repr(float(v)) if not isinstance(v, (int, np.integer)) else str(int(v)) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- commands

def cmd_simulate(cfg: RunConfig, out: Path, threads: int = 1, run: str = "run") -> dict:
    scfg = cfg.simulation()
    res = sim.simulate(scfg, threads=threads)
    out.mkdir(parents=True, exist_ok=True)
    meta = cfg.meta()
    sim.write_events(out / f"{run}_events.csv", res.hits, meta)
    sim.write_truth(out / f"{run}_truth.csv", res.truth, meta)
    sim.write_linkage(out / f"{run}_linkage.csv", res.hit_photon, meta)
    summary = res.summary()
    _write_json(out / f"{run}_summary.json", summary, meta)
    return summary


def _run_stem(path: Path) -> str:
    name = path.stem
    return name[: -len("_events")] if name.endswith("_events") else name


def cmd_process(cfg: RunConfig, events: Path, out: Path, run: str | None = None, threads: int = 1) -> dict:
    pcfg = cfg.section("pipeline")
    ccfg = cfg.section("coincidence")
    scfg = cfg.simulation()
    geom, layout, calib = scfg.geom, scfg.layout, scfg.calib
    run = run or _run_stem(events)
    meta = cfg.meta()

    hits = pl.read_events(events, int(pcfg["reorder_buffer"]))
    hits = det.apply_hot_mask(hits, layout)
    clusters = pl.cluster(hits, layout, calib, float(pcfg["time_window"]), threads=threads)
    sel = pl.select_spdc_singles(clusters, calib, tuple(pcfg["band"]), pcfg["mode"])
    sig, idl = pl.split_arms(sel)
    fcfg = cfg.filter_config()
    match = co.match_pairs(sig, idl, fcfg)
    pairs = co.spatial_filter(match.pairs, geom, fcfg, layout=layout)
    good = pairs[pairs["passed"]]

    # energy map of every time-matched pair before any band cut (ToT-space view)
    s_all, i_all = pl.split_arms(clusters)
    raw_pairs = co.match_pairs(s_all, i_all, fcfg).pairs

    out.mkdir(parents=True, exist_ok=True)
    pl.write_clusters(out / f"{run}_clusters.csv", clusters, meta)
    co.write_pairs(out / f"{run}_pairs.csv", pairs, meta)
    dth = co.dt_histogram(pairs, float(ccfg["dt_bin"]), fcfg.time_window)
    co.write_histogram(out / f"{run}_dt_hist.csv", dth, meta)
    h2, xe, ye = co.energy_histogram_2d(raw_pairs)
    rows = [(xe[i], ye[j], int(h2[i, j])) for i in range(h2.shape[0]) for j in range(h2.shape[1])]
    _write_rows(out / f"{run}_energy2d.csv", "es_bin_low,ei_bin_low,count", rows, meta)
    table, curve = co.emission_scatter(pairs, geom)
    _write_rows(out / f"{run}_emission.csv", "alpha_s_rad,alpha_i_rad,es_pos_keV,ei_pos_keV", table, meta)
    _write_rows(out / f"{run}_emission_curve.csv", "alpha_s_rad,alpha_i_rad", curve, meta)

    summary = {
        "hits": int(hits.size),
        "clusters": int(clusters.size),
        "selected": int(sel.size),
        "signal_singles": int(match.signal_singles.size),
        "idler_singles": int(match.idler_singles.size),
        "time_matched": int(pairs.size),
        "passed": int(good.size),
        "dt_center_ns": dth.center,
        "dt_rms_ns": dth.rms,
    }
    duration = float(cfg.raw.get("simulation", {}).get("duration", 0) or 0)
    if duration > 0:
        summary["passed_per_hour"] = good.size / duration
    try:
        dfit = co.detuning_histogram(pairs, geom)
        co.write_histogram(out / f"{run}_detuning_hist.csv", co.Histogram(dfit.edges, dfit.counts), meta)
        summary["detuning_mean_deg"] = float(np.degrees(dfit.mean))
        summary["detuning_sigma_deg"] = float(np.degrees(dfit.sigma))
    except FitError as exc:
        Path(out / f"{run}_detuning_hist.csv").write_text(f"{meta}\nbin_low,count\n")
        summary["detuning_fit"] = f"not fitted: {exc}"
    if pairs.size:
        hw = 3 * dth.rms if np.isfinite(dth.rms) and dth.rms > 0 else fcfg.time_window / 4
        try:
            summary["signal_to_accidental"] = co.signal_to_accidental(pairs, min(hw, fcfg.time_window / 2), fcfg.time_window)
        except ValueError:
            pass
    _write_json(out / f"{run}_process.json", summary, meta)
    return summary


def cmd_image(cfg: RunConfig, pairs_path: Path, out: Path, run: str | None = None) -> dict:
    icfg = cfg.section("imaging")
    scfg = cfg.simulation()
    geom, layout = scfg.geom, scfg.layout
    run = run or (pairs_path.stem[: -len("_pairs")] if pairs_path.stem.endswith("_pairs") else pairs_path.stem)
    meta = cfg.meta()
    pairs = co.read_pairs(pairs_path)
    good = pairs[pairs["passed"]]
    if good.size:
        good = co.pair_geometry(good.copy(), geom, layout)
    rebin = int(icfg["rebin"])
    if rebin < 1:
        raise ConfigError("rebin must be >= 1")
    sig, idl = im.accumulate(good, rebin)
    corr = im.correct_idler(good, geom, layout) if good.size else good
    _, idl_c = im.accumulate(corr, rebin)
    out.mkdir(parents=True, exist_ok=True)
    tf = bool(icfg["display_transform"])
    im.write_image(out / f"{run}_signal", sig, meta)
    im.write_image(out / f"{run}_idler", idl, meta, transform=tf)
    im.write_image(out / f"{run}_idler_corrected", idl_c, meta, transform=tf)
    im.write_contours(out / "contours.csv", geom, icfg["contour_energies"], meta)
    im.write_gridmap(out / "gridmap.csv", im.grid_mapping(geom, icfg["grid"], layout), meta)
    return {"pairs": int(good.size), "signal_total": sig.total, "idler_total": idl.total}


def _axis(spec, log_scale):
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    v = np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"]))
    return 10**v if log_scale else v


def cmd_identify(cfg: RunConfig, out: Path) -> dict:
    c = cfg.section("identification")
    scfg = cfg.simulation()
    if c["spectrum"] not in ("band", "degenerate"):
        raise ConfigError("identification.spectrum must be 'band' or 'degenerate'")
    fwhm = c["fwhm_keV"]
    E = scfg.geom.pump_energy
    h = idf.spdc_spectrum(scfg.calib, E, scfg.b_window, fwhm, degenerate_only=c["spectrum"] == "degenerate")
    g = idf.background_spectrum(scfg.calib, E, fwhm)
    betas = _axis(c["beta"], True)
    zetas = _axis(c["zeta"], False)
    surf = idf.probability_surface(h, g, betas, zetas, reference=tuple(c["reference"]))
    try:
        ssn_cfg = idf.SsnConfig(**c["ssn"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    report = idf.ssn_experiment(ssn_cfg, sim.stream_rng(cfg.seed, 0))
    meta = cfg.meta()
    out.mkdir(parents=True, exist_ok=True)
    idf.write_surface(out / "surface.csv", surf, meta)
    idf.write_contour(out / "contour95.csv", surf, meta)
    _write_json(out / "ssn_report.json", report, meta)
    summary = {
        "p_beta0": idf.aggregate_probability(h, g, 0.0),
        "reference_beta": surf.reference[0],
        "reference_zeta": surf.reference[1],
        "reference_probability": surf.reference_value,
        "ssn_ratio": report["ratio"],
    }
    _write_json(out / "identify.json", summary, meta)
    return summary


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spdcforge", description="X-ray down-conversion correlation imaging toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="JSON configuration file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=Path("."))
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--run", default=None, help="output file stem")
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", help="generate synthetic event, truth and linkage files")
    common(s)
    s.add_argument("--duration", type=float, default=None, help="hours")
    s.add_argument("--pair-rate", type=float, default=None, help="pairs per hour")
    s.add_argument("--background-ratio", type=float, default=None)

    s = sub.add_parser("process", help="cluster, select, match and filter an event file")
    common(s)
    s.add_argument("events", type=Path, nargs="?")

    s = sub.add_parser("image", help="correlation images, corrected idler, contours and grid map")
    common(s)
    s.add_argument("pairs", type=Path, nargs="?")

    s = sub.add_parser("identify", help="identification probability surface and sub-shot-noise report")
    common(s)
    return p


def _input_path(args_value, cfg: RunConfig, what: str) -> Path:
    v = args_value or cfg.raw.get("input")
    if v is None:
        raise ConfigError(f"no {what} file given")
    return Path(v)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = RunConfig.load(args.config, args.seed)
        if args.command == "simulate":
            simsec = cfg.raw.setdefault("simulation", {})
            for key, val in (("duration", args.duration), ("pair_rate", args.pair_rate), ("background_ratio", args.background_ratio)):
                if val is not None:
                    simsec[key] = val
            cfg.simulation()  # validate before doing any work
            summary = cmd_simulate(cfg, args.out, args.threads, args.run or cfg.raw.get("run", "run"))
        elif args.command == "process":
            summary = cmd_process(cfg, _input_path(args.events, cfg, "event"), args.out, args.run, args.threads)
        elif args.command == "image":
            summary = cmd_image(cfg, _input_path(args.pairs, cfg, "pair"), args.out, args.run)
        else:
            summary = cmd_identify(cfg, args.out)
    except ConfigError as exc:
        print(f"spdcforge: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, OrderError) as exc:
        print(f"spdcforge: input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"spdcforge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    for k, v in summary.items():
        print(f"{k}: {v}")
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
