"""Mobility fidelity metrics, commuter-flow overlap, and an EPR baseline.

Five per-dataset statistics (travel distance, radius of gyration, unique
location count, global region rank, per-origin destination rank) are compared
between real and generated trajectory sets with the Jensen-Shannon divergence
in base 2, whose range is [0, 1]. OD (origin-destination) matrices from
consecutive stay pairs are compared with the standard "common part of
commuters" overlap. A density-weighted exploration-and-preferential-return
generator serves as the comparative baseline.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import StayPoint, TimeSlotting, Trajectory
from .geo import CityMap, centroid_matrix


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Jensen-Shannon divergence (base-2)

def _validate_dist(name: str, p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise MetricError(f"{name} must be a 1-d distribution")
    if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
        raise MetricError(f"{name} is not a probability distribution")
    return np.clip(p, 0.0, None)


def _kl_bits(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits; symmetric, bounded by [0, 1].

    Zero entries are allowed (0*log 0 := 0); the supports must have equal
    size and are interpreted index-aligned.
    """
    p = _validate_dist("p", p)
    q = _validate_dist("q", q)
    if p.shape != q.shape:
        raise MetricError(f"support mismatch: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    val = 0.5 * _kl_bits(p, m) + 0.5 * _kl_bits(q, m)
    return float(min(max(val, 0.0), 1.0))


# ---------------------------------------------------------------------------
# Histograms

@dataclass
class MetricHistogram:
    edges: np.ndarray   # (n_bins + 1,), strictly increasing
    mass: np.ndarray    # (n_bins,), sums to 1

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if np.any(np.diff(self.edges) <= 0):
            raise MetricError("histogram edges must be strictly increasing")
        if len(self.mass) != len(self.edges) - 1:
            raise MetricError("mass/edges length mismatch")
        if abs(self.mass.sum() - 1.0) > 1e-9:
            raise MetricError(f"histogram mass sums to {self.mass.sum()}")

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_left", "bin_right", "mass"])
            for left, right, m in zip(self.edges[:-1], self.edges[1:], self.mass):
                w.writerow([f"{left:.10g}", f"{right:.10g}", f"{m:.10g}"])


def shared_edges(real_values, bins: int = 50, upper_quantile: float = 99.5
                 ) -> np.ndarray:
    """Fixed bin edges [0, p99.5-of-real] shared by both comparison sides."""
    vals = np.asarray(real_values, dtype=np.float64)
    if vals.size == 0:
        raise MetricError("cannot derive bin edges from an empty value set")
    upper = float(np.percentile(vals, upper_quantile))
    if upper <= 0.0:
        upper = 1.0
    return np.linspace(0.0, upper, bins + 1)


def build_histogram(values, edges) -> MetricHistogram:
    """Histogram with values above the top edge clipped into the last bin."""
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise MetricError("cannot histogram an empty value set")
    clipped = np.clip(vals, edges[0], np.nextafter(edges[-1], -np.inf))
    counts, _ = np.histogram(clipped, bins=edges)
    return MetricHistogram(edges=np.asarray(edges), mass=counts / counts.sum())


# ---------------------------------------------------------------------------
# Per-trajectory statistics

def _check_nonempty(trajs: list[Trajectory]):
    if not trajs:
        raise MetricError("empty trajectory set")


def _centroid_lookup(city: CityMap) -> tuple[dict[int, int], np.ndarray]:
    idx = {rid: k for k, rid in enumerate(city.region_ids)}
    return idx, centroid_matrix(city)


def trajectory_distances(trajs: list[Trajectory], city: CityMap) -> np.ndarray:
    """Mean centroid distance over consecutive stay pairs, per trajectory.

    Single-stay trajectories contribute 0.
    """
    _check_nonempty(trajs)
    idx, cm = _centroid_lookup(city)
    fn = city._distance_fn()
    out = []
    for tr in trajs:
        pts = cm[[idx[s.region_id] for s in tr.stays]]
        if len(pts) < 2:
            out.append(0.0)
            continue
        d = fn(pts[:-1, 0], pts[:-1, 1], pts[1:, 0], pts[1:, 1])
        out.append(float(np.mean(d)))
    return np.array(out)


def trajectory_radii(trajs: list[Trajectory], city: CityMap) -> np.ndarray:
    """Radius of gyration about the mean visited centroid, per trajectory."""
    _check_nonempty(trajs)
    idx, cm = _centroid_lookup(city)
    fn = city._distance_fn()
    out = []
    for tr in trajs:
        pts = cm[[idx[s.region_id] for s in tr.stays]]
        center = pts.mean(axis=0)
        d = fn(pts[:, 0], pts[:, 1], center[0], center[1])
        out.append(float(np.sqrt(np.mean(np.square(d)))))
    return np.array(out)


def trajectory_locnums(trajs: list[Trajectory]) -> np.ndarray:
    """Distinct visited region count per trajectory."""
    _check_nonempty(trajs)
    return np.array([len({s.region_id for s in tr.stays}) for tr in trajs])


def metric_distance(real: list[Trajectory], gen: list[Trajectory],
                    city: CityMap, bins: int = 50
                    ) -> tuple[MetricHistogram, MetricHistogram]:
    edges = shared_edges(trajectory_distances(real, city), bins)
    return (build_histogram(trajectory_distances(real, city), edges),
            build_histogram(trajectory_distances(gen, city), edges))


def metric_radius(real: list[Trajectory], gen: list[Trajectory],
                  city: CityMap, bins: int = 50
                  ) -> tuple[MetricHistogram, MetricHistogram]:
    edges = shared_edges(trajectory_radii(real, city), bins)
    return (build_histogram(trajectory_radii(real, city), edges),
            build_histogram(trajectory_radii(gen, city), edges))


def metric_locnum(real: list[Trajectory], gen: list[Trajectory]
                  ) -> tuple[MetricHistogram, MetricHistogram]:
    """Integer bins 1 .. max observed stay count."""
    top = max(int(max(len(tr.stays) for tr in real)),
              int(max(len(tr.stays) for tr in gen)))
    edges = np.arange(0.5, top + 1.5)
    return (build_histogram(trajectory_locnums(real), edges),
            build_histogram(trajectory_locnums(gen), edges))


# ---------------------------------------------------------------------------
# Rank distributions

def _visit_counts(trajs: list[Trajectory]) -> dict[int, int]:
    counts: dict[int, int] = {}
    for tr in trajs:
        for s in tr.stays:
            counts[s.region_id] = counts.get(s.region_id, 0) + 1
    return counts


def metric_grank(real: list[Trajectory], gen: list[Trajectory],
                 top: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Region-visit frequencies on the real side's top regions plus 'other'.

    Both returned distributions share the support (top regions in real-count
    order, followed by a bucket for everything else).
    """
    _check_nonempty(real)
    _check_nonempty(gen)
    rc = _visit_counts(real)
    support = sorted(rc, key=lambda r: (-rc[r], r))[:top]
    sidx = {r: i for i, r in enumerate(support)}

    def dist(counts):
        v = np.zeros(len(support) + 1)
        for r, c in counts.items():
            v[sidx.get(r, len(support))] += c
        return v / v.sum()

    return dist(rc), dist(_visit_counts(gen))


def metric_rrank(real: list[Trajectory], gen: list[Trajectory],
                 top: int = 50, min_support: int = 20) -> float:
    """Visit-weighted mean JSD of per-origin destination-rank distributions.

    A trajectory's origin is its first stay; destinations are its later
    stays. Origins with fewer than ``min_support`` real trajectories are
    excluded. Returns 0 when no origin qualifies on both sides.
    """
    _check_nonempty(real)
    _check_nonempty(gen)

    def by_origin(trajs):
        groups: dict[int, dict[int, int]] = {}
        sizes: dict[int, int] = {}
        for tr in trajs:
            o = tr.stays[0].region_id
            g = groups.setdefault(o, {})
            sizes[o] = sizes.get(o, 0) + 1
            for s in tr.stays[1:]:
                g[s.region_id] = g.get(s.region_id, 0) + 1
        return groups, sizes

    r_groups, r_sizes = by_origin(real)
    g_groups, _ = by_origin(gen)
    total_w = 0.0
    acc = 0.0
    for o, rcounts in r_groups.items():
        if r_sizes[o] < min_support or o not in g_groups or not rcounts:
            continue
        support = sorted(rcounts, key=lambda r: (-rcounts[r], r))[:top]
        sidx = {r: i for i, r in enumerate(support)}

        def dist(counts):
            v = np.zeros(len(support) + 1)
            for r, c in counts.items():
                v[sidx.get(r, len(support))] += c
            return v / v.sum()

        w = sum(rcounts.values())
        acc += w * jsd(dist(rcounts), dist(g_groups[o]))
        total_w += w
    return acc / total_w if total_w > 0 else 0.0


# ---------------------------------------------------------------------------
# OD matrices & CPC

def build_od(trajs: list[Trajectory], city: CityMap) -> np.ndarray:
    """Integer flow counts over consecutive stay pairs, region_id order."""
    idx = {rid: k for k, rid in enumerate(city.region_ids)}
    od = np.zeros((city.n_regions, city.n_regions), dtype=np.int64)
    for tr in trajs:
        for a, b in zip(tr.stays[:-1], tr.stays[1:]):
            od[idx[a.region_id], idx[b.region_id]] += 1
    return od


def cpc(od_a: np.ndarray, od_b: np.ndarray) -> float:
    """Common part of commuters: 2*sum(min(a,b)) / (sum(a)+sum(b))."""
    a = np.asarray(od_a)
    b = np.asarray(od_b)
    if a.shape != b.shape:
        raise MetricError(f"OD shape mismatch: {a.shape} vs {b.shape}")
    if np.any(a < 0) or np.any(b < 0):
        raise MetricError("OD matrices must be non-negative")
    denom = a.sum() + b.sum()
    if denom == 0:
        raise MetricError("both OD matrices are empty")
    return float(2.0 * np.minimum(a, b).sum() / denom)


# ---------------------------------------------------------------------------
# Report

@dataclass
class MetricReport:
    distance_jsd: float
    radius_jsd: float
    locnum_jsd: float
    grank_jsd: float
    rrank_jsd: float
    cpc: float
    n_real: int
    n_generated: int
    config_hash: str = ""
    histograms: dict[str, tuple[MetricHistogram, MetricHistogram]] = \
        field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("distance_jsd", "radius_jsd", "locnum_jsd",
                     "grank_jsd", "rrank_jsd"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise MetricError(f"{name}={v} outside [0, 1]")

    def to_json(self) -> str:
        body = {k: getattr(self, k) for k in
                ("distance_jsd", "radius_jsd", "locnum_jsd", "grank_jsd",
                 "rrank_jsd", "cpc", "n_real", "n_generated", "config_hash")}
        return json.dumps(body, indent=2, sort_keys=True)

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(self.to_json() + "\n")
        for name, (h_real, h_gen) in self.histograms.items():
            h_real.to_csv(out / f"{name}_real.csv")
            h_gen.to_csv(out / f"{name}_generated.csv")


def evaluate(real: list[Trajectory], gen: list[Trajectory], city: CityMap,
             bins: int = 50, config_hash: str = "") -> MetricReport:
    _check_nonempty(real)
    _check_nonempty(gen)
    hd = metric_distance(real, gen, city, bins)
    hr = metric_radius(real, gen, city, bins)
    hl = metric_locnum(real, gen)
    gp, gq = metric_grank(real, gen)
    return MetricReport(
        distance_jsd=jsd(hd[0].mass, hd[1].mass),
        radius_jsd=jsd(hr[0].mass, hr[1].mass),
        locnum_jsd=jsd(hl[0].mass, hl[1].mass),
        grank_jsd=jsd(gp, gq),
        rrank_jsd=metric_rrank(real, gen),
        cpc=cpc(build_od(real, city), build_od(gen, city)),
        n_real=len(real),
        n_generated=len(gen),
        config_hash=config_hash,
        histograms={"distance": hd, "radius": hr, "locnum": hl},
    )


def dataset_hash(trajs: list[Trajectory]) -> str:
    h = hashlib.sha256()
    for tr in trajs:
        h.update(tr.agent_id.encode())
        for s in tr.stays:
            h.update(f"{s.region_id},{s.timestamp};".encode())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Density-EPR baseline

def explore_probability(rho: float, gamma: float, visited: int) -> float:
    """rho * S^(-gamma) clamped to [0, 1]; S is the distinct-region count."""
    if visited < 1:
        return 1.0
    return float(min(max(rho * visited ** (-gamma), 0.0), 1.0))


def epr_generate(city: CityMap, n_agents: int, k: int, rho: float = 0.6,
                 gamma: float = 0.21, seed: int = 0,
                 slotting: TimeSlotting | None = None,
                 base_day: int = 19000) -> list[Trajectory]:
    """Exploration-and-preferential-return baseline.

    With probability rho*S^(-gamma) the agent explores a new region sampled
    proportionally to POI mass (total semantic weight as a density proxy);
    otherwise it returns to a past region proportionally to visit counts.
    Each trajectory has k+1 stays spaced one time slot apart.
    """
    if city.n_regions == 0:
        raise MetricError("empty city map")
    slotting = slotting or TimeSlotting()
    rng = np.random.default_rng(seed)
    ids = np.array(city.region_ids)
    density = np.array([city.semantics_of(int(r)).sum() for r in ids])
    density = density / density.sum()
    slot_s = slotting.slot_minutes * 60
    base_ts = base_day * 86400 + 14 * slot_s
    out = []
    for a in range(n_agents):
        visits: dict[int, int] = {}
        cur = int(rng.choice(ids, p=density))
        visits[cur] = 1
        stays = [StayPoint(cur, base_ts)]
        for step in range(1, k + 1):
            p_new = explore_probability(rho, gamma, len(visits))
            unvisited = [i for i, r in enumerate(ids) if int(r) not in visits]
            if unvisited and rng.random() < p_new:
                w = density[unvisited]
                cur = int(ids[rng.choice(unvisited, p=w / w.sum())])
            else:
                past = list(visits)
                w = np.array([visits[r] for r in past], dtype=np.float64)
                cur = int(past[rng.choice(len(past), p=w / w.sum())])
            visits[cur] = visits.get(cur, 0) + 1
            stays.append(StayPoint(cur, base_ts + step * slot_s))
        out.append(Trajectory(agent_id=f"epr-{a}", city_id=city.city_id,
                              stays=stays))
    return out
