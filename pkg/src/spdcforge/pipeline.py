"""Raw hit stream -> calibrated, centroided photon candidates."""
from __future__ import annotations

import heapq
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import detector as det
from .errors import OrderError, ParseError

CLUSTER_DTYPE = np.dtype(
    [
        ("arm", "i1"),
        ("x", "f8"),
        ("y", "f8"),
        ("energy", "f8"),
        ("toa", "f8"),
        ("n_pixels", "i4"),
        ("tot_sum", "f8"),
        ("tot_frac", "f8"),  # max over members of tot / per-pixel cutoff
    ]
)

CLUSTER_HEADER = "arm,x_mm,y_mm,energy_keV,toa_ns,n_pixels"
DEFAULT_TIME_WINDOW = 100.0  # ns
DEFAULT_BAND = (4.0, 11.0)  # keV


class ClusterEvent(NamedTuple):
    arm: str
    x: float
    y: float
    energy: float
    toa: float
    n_pixels: int


def cluster_events(clusters: np.ndarray) -> list[ClusterEvent]:
    return [
        ClusterEvent(det.ARM_NAME[int(c["arm"])], float(c["x"]), float(c["y"]), float(c["energy"]), float(c["toa"]), int(c["n_pixels"]))
        for c in clusters
    ]


# --------------------------------------------------------------------------- reading

def _on_quantum(v, q):
    k = v / q
    return abs(k - round(k)) < 1e-6


def parse_hit_line(line: str, lineno: int) -> tuple:
    f = line.split(",")
    if len(f) != 5:
        raise ParseError(f"expected 5 fields, got {len(f)}", lineno)
    try:
        chip, col, row = int(f[0]), int(f[1]), int(f[2])
        toa, tot = float(f[3]), float(f[4])
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    if not (0 <= col < det.N_LOGICAL and 0 <= row < det.N_LOGICAL):
        raise ParseError(f"pixel ({col}, {row}) out of range", lineno)
    if chip != int(det.chip_of(col, row)):
        raise ParseError(f"chip {chip} inconsistent with pixel ({col}, {row})", lineno)
    if not np.isfinite(toa) or not _on_quantum(toa, det.TOA_QUANTUM):
        raise ParseError(f"toa {toa} not a multiple of {det.TOA_QUANTUM} ns", lineno)
    if tot < 0 or not _on_quantum(tot, det.TOT_QUANTUM):
        raise ParseError(f"tot {tot} not a non-negative multiple of {det.TOT_QUANTUM} ns", lineno)
    return chip, col, row, toa, tot


def iter_events(path, reorder_buffer: int = 4096):
    """Yield :class:`RawHit` records in nondecreasing toa.

    Up to ``reorder_buffer`` hits are held back to repair local disorder; a hit
    earlier than one already emitted raises :class:`OrderError`.
    """
    if reorder_buffer < 1:
        raise ValueError("reorder_buffer must be >= 1")
    heap: list = []
    last = -np.inf
    seq = 0
    header_seen = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                header_seen = True
                if line.replace(" ", "") != det_header():
                    raise ParseError(f"header must be {det_header()}", lineno)
                continue
            rec = parse_hit_line(line, lineno)
            heapq.heappush(heap, (rec[3], seq, lineno, rec))
            seq += 1
            if len(heap) > reorder_buffer:
                toa, _, ln, out = heapq.heappop(heap)
                if toa < last:
                    raise OrderError(f"line {ln}: toa {toa} precedes already emitted {last}")
                last = toa
                yield det.RawHit(*out)
    while heap:
        toa, _, ln, out = heapq.heappop(heap)
        if toa < last:
            raise OrderError(f"line {ln}: toa {toa} precedes already emitted {last}")
        last = toa
        yield det.RawHit(*out)


def det_header() -> str:
    return "chip,col,row,toa_ns,tot_ns"


def _fast_parse(path):
    """Vectorized parse of a well-formed event file; None if anything looks off."""
    with open(path) as fh:
        text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        return np.zeros(0, det.HIT_DTYPE)
    if lines[0].replace(" ", "") != det_header():
        return None
    body = lines[1:]
    if not body:
        return np.zeros(0, det.HIT_DTYPE)
    fields = ",".join(body).split(",")
    if len(fields) != 5 * len(body):
        return None
    try:
        a = np.array(fields).reshape(-1, 5)
        ints = a[:, :3].astype(np.int64)
        toa = a[:, 3].astype(float)
        tot = a[:, 4].astype(float)
    except ValueError:
        return None
    chip, col, row = ints.T
    ok = (col >= 0) & (col < det.N_LOGICAL) & (row >= 0) & (row < det.N_LOGICAL)
    if not ok.all() or np.any(chip != det.chip_of(col, row)):
        return None
    k = toa / det.TOA_QUANTUM
    m = tot / det.TOT_QUANTUM
    if not np.all(np.isfinite(toa)) or np.any(np.abs(k - np.round(k)) >= 1e-6):
        return None
    if np.any(tot < 0) or np.any(np.abs(m - np.round(m)) >= 1e-6):
        return None
    out = np.empty(len(body), det.HIT_DTYPE)
    out["chip"], out["col"], out["row"], out["toa"], out["tot"] = chip, col, row, toa, tot
    return out


def read_events(path, reorder_buffer: int = 4096) -> np.ndarray:
    """Read an event CSV into a time-ordered structured hit array.

    Same result and errors as draining :func:`iter_events`: a hit may arrive
    up to ``reorder_buffer`` places late; anything later raises OrderError.
    """
    if reorder_buffer < 1:
        raise ValueError("reorder_buffer must be >= 1")
    hits = _fast_parse(path)
    if hits is None:
        # malformed somewhere: the streaming reader reports the line
        return _collect(iter_events(path, reorder_buffer))
    toa = hits["toa"]
    if np.all(np.diff(toa) >= 0):
        return hits
    order = np.argsort(toa, kind="stable")
    pos = np.empty(order.size, dtype=np.int64)
    pos[order] = np.arange(order.size)
    late = np.nonzero(pos < np.arange(order.size) - reorder_buffer)[0]
    if late.size:
        return _collect(iter_events(path, reorder_buffer))
    return hits[order]


def _collect(records) -> np.ndarray:
    recs = list(records)
    out = np.empty(len(recs), det.HIT_DTYPE)
    if recs:
        arr = np.array(recs, dtype=float)
        out["chip"] = arr[:, 0]
        out["col"] = arr[:, 1]
        out["row"] = arr[:, 2]
        out["toa"] = arr[:, 3]
        out["tot"] = arr[:, 4]
    return out


# --------------------------------------------------------------------------- clustering

def canonical_order(hits: np.ndarray) -> np.ndarray:
    return np.lexsort((hits["tot"], hits["chip"], hits["row"], hits["col"], hits["toa"]))


def _neighbour_edges(col, row, toa, time_window):
    """Index pairs (i, j), i < j, of hits that are 8-connected and within the window.

    ``toa`` must be sorted.
    """
    n = toa.size
    src, dst = [], []
    k = 1
    while k < n:
        near = (toa[k:] - toa[:-k]) <= time_window
        if not near.any():
            break
        i = np.nonzero(near)[0]
        j = i + k
        adj = (np.abs(col[i] - col[j]) <= 1) & (np.abs(row[i] - row[j]) <= 1)
        src.append(i[adj])
        dst.append(j[adj])
        k += 1
    if not src:
        return np.zeros(0, int), np.zeros(0, int)
    return np.concatenate(src), np.concatenate(dst)


def _partition(toa, time_window, parts):
    """Split points in sorted ``toa`` at gaps wider than the window.

    No link can cross such a gap, so the pieces cluster independently and the
    union of their edges equals the edges of the whole stream.
    """
    n = toa.size
    if parts <= 1 or n < 2:
        return [0, n]
    gaps = np.nonzero(np.diff(toa) > time_window)[0] + 1
    if gaps.size == 0:
        return [0, n]
    want = np.linspace(0, n, parts + 1)[1:-1]
    k = np.searchsorted(gaps, want)
    cuts = np.unique(gaps[np.minimum(k, gaps.size - 1)])
    return [0, *cuts.tolist(), n]


def _edges_parallel(col, row, toa, time_window, threads):
    bounds = _partition(toa, time_window, threads)
    if len(bounds) == 2:
        return _neighbour_edges(col, row, toa, time_window)

    def work(a, b):
        i, j = _neighbour_edges(col[a:b], row[a:b], toa[a:b], time_window)
        return i + a, j + a

    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(work, bounds[:-1], bounds[1:]))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def cluster(
    hits: np.ndarray,
    layout: det.DetectorLayout,
    calib: det.ToTCalibration,
    time_window: float = DEFAULT_TIME_WINDOW,
    return_labels: bool = False,
    threads: int = 1,
):
    """Group hits into photon clusters.

    Two hits are linked when they are 8-connected in logical pixel space and
    their toa differ by at most ``time_window``; clusters are the connected
    components of that graph.  The result does not depend on input order.

    With ``threads > 1`` the stream is cut at toa gaps wider than the window
    and the pieces are searched for links concurrently; the output is the same.

    Returns the cluster array (ordered by toa) and, with ``return_labels``, the
    cluster index of each input hit.
    """
    n = hits.size
    if n == 0:
        empty = np.zeros(0, CLUSTER_DTYPE)
        return (empty, np.zeros(0, int)) if return_labels else empty
    order = canonical_order(hits)
    h = hits[order]
    col = h["col"].astype(np.int64)
    row = h["row"].astype(np.int64)
    toa = h["toa"]
    tot = h["tot"]
    i, j = _edges_parallel(col, row, toa, time_window, threads)
    graph = coo_matrix((np.ones(i.size, dtype=np.int8), (i, j)), shape=(n, n))
    n_clusters, lab = connected_components(graph, directed=False)

    energy = np.asarray(det.tot_to_energy(tot, (col, row), calib), dtype=float).reshape(-1)
    _, offset, _ = calib._lookup(col, row)
    weight = np.maximum(tot - offset, 0.0)
    px, py = det.logical_to_physical(col, row, layout)

    size = np.bincount(lab, minlength=n_clusters)
    wsum = np.bincount(lab, weights=weight, minlength=n_clusters)
    flat = wsum <= 0
    # clusters with no charge above pedestal fall back to an unweighted centroid
    w = np.where(flat[lab], 1.0, weight)
    wsum = np.bincount(lab, weights=w, minlength=n_clusters)
    cx = np.bincount(lab, weights=w * px, minlength=n_clusters) / wsum
    cy = np.bincount(lab, weights=w * py, minlength=n_clusters) / wsum
    esum = np.bincount(lab, weights=energy, minlength=n_clusters)
    tmin = np.full(n_clusters, np.inf)
    np.minimum.at(tmin, lab, toa)
    frac = tot / calib.cutoff(col, row)
    fmax = np.full(n_clusters, -np.inf)
    np.maximum.at(fmax, lab, frac)

    # arm from the chip of the brightest member; ties go to the earliest in canonical order
    brightest = np.lexsort((np.arange(n), -tot, lab))
    first = np.ones(n, dtype=bool)
    first[1:] = lab[brightest][1:] != lab[brightest][:-1]
    lead = brightest[first]
    arm = np.empty(n_clusters, dtype=np.int8)
    arm[lab[lead]] = layout.arm_code(h["chip"][lead])

    out = np.empty(n_clusters, CLUSTER_DTYPE)
    out["arm"] = arm
    out["x"] = cx
    out["y"] = cy
    out["energy"] = esum
    out["toa"] = tmin
    out["n_pixels"] = size
    out["tot_sum"] = np.bincount(lab, weights=tot, minlength=n_clusters)
    out["tot_frac"] = fmax

    keep = out["energy"] > 0
    rank = np.lexsort((out["y"], out["x"], out["arm"], out["toa"]))
    rank = rank[keep[rank]]
    out = out[rank]
    if not return_labels:
        return out
    remap = np.full(n_clusters, -1)
    remap[rank] = np.arange(rank.size)
    labels = np.empty(n, dtype=np.int64)
    labels[order] = remap[lab]
    return out, labels


def select_spdc_singles(clusters: np.ndarray, calib: det.ToTCalibration | None = None, band=DEFAULT_BAND, mode="energy"):
    """Keep clusters in the down-converted band, rejecting the pump band.

    ``mode="energy"`` cuts on calibrated cluster energy; ``mode="tot"`` applies
    the per-pixel raw ToT cutoffs instead (every member below its pixel's cutoff).
    """
    if mode == "energy":
        lo, hi = band
        keep = (clusters["energy"] >= lo) & (clusters["energy"] <= hi)
    elif mode == "tot":
        keep = clusters["tot_frac"] < 1.0
    else:
        raise ValueError(f"unknown selection mode {mode!r}")
    return clusters[keep]


def split_arms(clusters: np.ndarray):
    sig = clusters[clusters["arm"] == det.ARM_CODE[det.SIGNAL]]
    idl = clusters[clusters["arm"] == det.ARM_CODE[det.IDLER]]
    return sig, idl


def write_clusters(path, clusters: np.ndarray, meta: str | None = None):
    lines = ([meta] if meta else []) + [CLUSTER_HEADER]
    for c in clusters:
        lines.append(
            f"{det.ARM_NAME[int(c['arm'])]},{float(c['x'])!r},{float(c['y'])!r},{float(c['energy'])!r},{float(c['toa'])!r},{int(c['n_pixels'])}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_clusters(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != CLUSTER_HEADER:
        raise ParseError(f"cluster header must be {CLUSTER_HEADER}")
    for n, ln in enumerate(lines[1:], start=2):
        f = ln.split(",")
        try:
            rows.append((det.ARM_CODE[f[0]], float(f[1]), float(f[2]), float(f[3]), float(f[4]), int(f[5]), np.nan, np.nan))
        except (KeyError, ValueError, IndexError) as exc:
            raise ParseError(str(exc), n) from None
    return np.array(rows, dtype=CLUSTER_DTYPE)


def link_clusters(labels: np.ndarray, hit_photon: np.ndarray, n_clusters: int) -> np.ndarray:
    """Truth photon id of each cluster: the id contributing most hits, -1 for background."""
    out = np.full(n_clusters, -(10**12), dtype=np.int64)
    ok = labels >= 0
    lab = labels[ok]
    pid = hit_photon[ok]
    if lab.size == 0:
        return out
    order = np.lexsort((pid, lab))
    lab, pid = lab[order], pid[order]
    key_change = np.ones(lab.size, dtype=bool)
    key_change[1:] = (lab[1:] != lab[:-1]) | (pid[1:] != pid[:-1])
    starts = np.nonzero(key_change)[0]
    counts = np.diff(np.append(starts, lab.size))
    slab, spid = lab[starts], pid[starts]
    # per cluster: highest count, ties to the smaller photon id
    pick = np.lexsort((spid, -counts, slab))
    first = np.ones(pick.size, dtype=bool)
    first[1:] = slab[pick][1:] != slab[pick][:-1]
    out[slab[pick[first]]] = spid[pick[first]]
    return out


def reconstruct_pairs(hits, geom, layout, calib, filter_cfg=None, band=DEFAULT_BAND, mode="energy",
                      time_window=DEFAULT_TIME_WINDOW, return_clusters=False):
    """hits -> clusters -> SPDC selection -> matching -> spatial filter.

    Returns the filtered pair array (all time-matched candidates, with flags),
    plus ``(clusters, selected, match)`` when ``return_clusters`` is set.
    """
    from . import coincidence as co

    cfg = filter_cfg or co.PairFilterConfig()
    clusters = cluster(hits, layout, calib, time_window)
    sel = select_spdc_singles(clusters, calib, band, mode)
    sig, idl = split_arms(sel)
    match = co.match_pairs(sig, idl, cfg)
    pairs = co.spatial_filter(match.pairs, geom, cfg, layout=layout)
    if return_clusters:
        return pairs, (clusters, sel, match)
    return pairs
