"""Trajectory data model, CSV I/O, time slotting, splits, and synthetic cities.

The synthetic-city generator plants semantic structure (clusters of regions
with peaked POI profiles) and role archetypes with scheduled cluster visits,
so downstream learning stages have known ground truth to recover.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import geo
from .geo import CityMap, GeoError, N_CATEGORIES

SECONDS_PER_DAY = 86400


class DataError(ValueError):
    """Malformed trajectory data or infeasible synthesis config."""


@dataclass(frozen=True)
class StayPoint:
    region_id: int
    timestamp: int  # epoch seconds, UTC

    def __post_init__(self):
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass
class Trajectory:
    agent_id: str
    city_id: str
    stays: list[StayPoint]
    role: str | None = None

    def __post_init__(self):
        ts = [s.timestamp for s in self.stays]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DataError(f"agent {self.agent_id}: timestamps not strictly increasing")

    def region_sequence(self) -> list[int]:
        return [s.region_id for s in self.stays]

    def __len__(self):
        return len(self.stays)


@dataclass(frozen=True)
class TimeSlotting:
    slot_minutes: int = 30

    def __post_init__(self):
        if 1440 % self.slot_minutes != 0:
            raise DataError(f"slot_minutes {self.slot_minutes} does not divide 1440")

    @property
    def slots_per_day(self) -> int:
        return 1440 // self.slot_minutes

    def slot_of(self, timestamp: int) -> int:
        return (int(timestamp) % SECONDS_PER_DAY) // (self.slot_minutes * 60)


def discretize_time(timestamp: int, slotting: TimeSlotting) -> int:
    """Within-day slot index, day boundary at 00:00 UTC."""
    return slotting.slot_of(timestamp)


@dataclass
class DatasetSplit:
    train: list[Trajectory]
    val: list[Trajectory]
    test: list[Trajectory]
    seed: int


def split_dataset(trajs: list[Trajectory], seed: int) -> DatasetSplit:
    """Deterministic 80/10/10 split."""
    if len(trajs) < 10:
        raise DataError(f"need at least 10 trajectories to split, got {len(trajs)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(trajs))
    n = len(trajs)
    n_train = round(0.8 * n)
    n_val = round(0.1 * n)
    shuffled = [trajs[i] for i in order]
    return DatasetSplit(train=shuffled[:n_train],
                        val=shuffled[n_train:n_train + n_val],
                        test=shuffled[n_train + n_val:],
                        seed=seed)


TRAJ_HEADER = ["agent_id", "city_id", "timestamp", "region_id"]


def load_trajectories(path, city: CityMap | None = None) -> list[Trajectory]:
    """Load trajectories from CSV, grouping by agent and sorting by time.

    Exact-duplicate (agent, timestamp) rows collapse to one; distinct rows at
    the same timestamp for one agent are an inversion and rejected.
    """
    rows: dict[str, list[tuple[int, int, str]]] = {}
    bad: list[str] = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != TRAJ_HEADER:
            raise DataError(f"{path}: expected header {','.join(TRAJ_HEADER)}, "
                            f"got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                ts = int(row["timestamp"])
                rid = int(row["region_id"])
                agent = row["agent_id"]
                city_id = row["city_id"]
                if ts < 0:
                    raise ValueError("negative timestamp")
            except (ValueError, TypeError, KeyError) as e:
                bad.append(f"line {lineno}: {e}")
                continue
            rows.setdefault(agent, []).append((ts, rid, city_id))
    if bad:
        raise DataError(f"{path}: malformed rows: " + "; ".join(bad))

    if city is not None:
        known = set(city.region_ids)
        offenders = sorted({rid for recs in rows.values() for _, rid, _ in recs}
                           - known)
        if offenders:
            raise DataError(f"{path}: unknown region ids {offenders} "
                            f"for city {city.city_id!r}")

    trajs = []
    for agent in sorted(rows):
        recs = sorted(set(rows[agent]))
        for (t1, r1, _), (t2, r2, _) in zip(recs, recs[1:]):
            if t2 == t1:
                raise DataError(f"{path}: agent {agent}: conflicting rows at timestamp {t1}")
        trajs.append(Trajectory(agent_id=agent, city_id=recs[0][2],
                                stays=[StayPoint(r, t) for t, r, _ in recs]))
    return trajs


def save_trajectories(trajs: list[Trajectory], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJ_HEADER)
        for tr in trajs:
            for s in tr.stays:
                writer.writerow([tr.agent_id, tr.city_id, s.timestamp, s.region_id])


def trajectory_to_poi_sequence(traj: Trajectory, city: CityMap) -> list[np.ndarray]:
    """Per-stay POI distribution lookup; length equals the stay count."""
    return [city.semantics_of(s.region_id) for s in traj.stays]


def normalize_length(traj: Trajectory, k_plus_1: int) -> tuple[Trajectory, np.ndarray]:
    """Pad (repeat final stay at later slots) or truncate to a fixed length.

    Returns (trajectory, mask) where mask[i] is 1.0 for real stays and 0.0
    for padding, for loss masking.
    """
    stays = list(traj.stays[:k_plus_1])
    mask = np.ones(k_plus_1)
    mask[len(stays):] = 0.0
    step = 1800
    while len(stays) < k_plus_1:
        last = stays[-1]
        stays.append(StayPoint(last.region_id, last.timestamp + step))
    return Trajectory(traj.agent_id, traj.city_id, stays, role=traj.role), mask


# ---------------------------------------------------------------------------
# Synthetic cities

#: cluster name -> dominant POI category label
CLUSTER_SIGNATURE = {
    "home": "Commercial & Residential",
    "work": "Companies & Enterprises",
    "dining": "Dining & Cuisine",
    "leisure": "Leisure & Entertainment",
}


@dataclass(frozen=True)
class Archetype:
    """A role with a fixed within-day schedule of cluster visits.

    schedule entries are (slot, cluster); the first entry anchors the home
    location at the start slot.
    """
    name: str
    schedule: tuple[tuple[int, str], ...]


def commuter_archetype(k: int, start_slot: int = 14, step: int = 2) -> Archetype:
    """home -> work (morning) -> dining (midday) -> work -> home (evening)."""
    pattern = ["home", "work", "work", "dining", "work", "work", "home", "home"]
    sched = []
    for i in range(k + 1):
        sched.append((start_slot + i * step, pattern[i % len(pattern)]))
    return Archetype("commuter", tuple(sched))


def wanderer_archetype(k: int, start_slot: int = 18, step: int = 2) -> Archetype:
    """leisure-heavy day: home -> leisure -> dining -> leisure -> home."""
    pattern = ["home", "leisure", "leisure", "dining", "leisure", "dining", "home", "home"]
    sched = []
    for i in range(k + 1):
        sched.append((start_slot + i * step, pattern[i % len(pattern)]))
    return Archetype("wanderer", tuple(sched))


@dataclass
class SynthConfig:
    city_id: str = "synth"
    n_regions: int = 50
    n_agents: int = 500
    k: int = 8  # trajectory has k+1 stays
    deviation: float = 0.0
    seed: int = 0
    archetypes: tuple[str, ...] = ("commuter",)
    slot_minutes: int = 30
    mix: tuple[float, ...] | None = None  # archetype share; uniform when None
    base_day: int = 19_000  # days since epoch for the generated timestamps

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        cfg = cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth config keys {sorted(unknown)}")
        return cfg


_ARCHETYPE_BUILDERS = {
    "commuter": commuter_archetype,
    "wanderer": wanderer_archetype,
}


def _planted_semantics(signature_cat: int, rng: np.random.Generator) -> np.ndarray:
    """Distribution peaked on the cluster's signature category.

    The off-peak noise is large enough that every region gets a
    distinguishable fingerprint (needed so latent-space decoders can separate
    same-cluster regions), while the signature still dominates.
    """
    w = rng.uniform(0.0, 0.3, size=N_CATEGORIES)
    w[signature_cat] += 1.5
    return w / w.sum()


def synth_city(config: SynthConfig) -> tuple[CityMap, list[Trajectory]]:
    """Generate a planar synthetic city and archetype-driven trajectories.

    Regions are laid out on a jittered grid (planar km coordinates) and
    partitioned round-robin into the four semantic clusters. Each agent
    follows one archetype's schedule; with probability ``deviation`` a step
    jumps to a uniformly random region instead of the scheduled cluster.
    """
    if config.n_regions < 4:
        raise DataError(f"n_regions must be >= 4, got {config.n_regions}")
    if config.k < 1:
        raise DataError(f"k must be >= 1, got {config.k}")
    if not (0.0 <= config.deviation <= 1.0):
        raise DataError(f"deviation must be in [0,1], got {config.deviation}")
    for name in config.archetypes:
        if name not in _ARCHETYPE_BUILDERS:
            raise DataError(f"unknown archetype {name!r}; "
                            f"known: {sorted(_ARCHETYPE_BUILDERS)}")
    if not config.archetypes:
        raise DataError("at least one archetype required")

    rng = np.random.default_rng(config.seed)
    slotting = TimeSlotting(config.slot_minutes)

    # jittered grid of seeds in planar km
    side = math.ceil(math.sqrt(config.n_regions))
    seeds = []
    for i in range(config.n_regions):
        gx, gy = i % side, i // side
        seeds.append((gx * 2.0 + rng.uniform(-0.5, 0.5),
                      gy * 2.0 + rng.uniform(-0.5, 0.5)))
    city = geo.build_partition(config.city_id, seeds, distance_mode="planar")

    cluster_names = list(CLUSTER_SIGNATURE)
    clusters: dict[str, list[int]] = {c: [] for c in cluster_names}
    semantics = {}
    for rid in city.region_ids:
        cname = cluster_names[rid % len(cluster_names)]
        clusters[cname].append(rid)
        semantics[rid] = _planted_semantics(
            geo.category_index(CLUSTER_SIGNATURE[cname]), rng)
    city = CityMap(city_id=city.city_id, regions=city.regions,
                   semantics=semantics, distance_mode="planar")

    archetypes = [_ARCHETYPE_BUILDERS[n](config.k) for n in config.archetypes]
    for a in archetypes:
        if any(s >= slotting.slots_per_day * 4 for s, _ in a.schedule):
            raise DataError(f"archetype {a.name}: schedule slot out of range")
    mix = config.mix
    if mix is None:
        mix = tuple(1.0 / len(archetypes) for _ in archetypes)
    if len(mix) != len(archetypes) or abs(sum(mix) - 1.0) > 1e-9:
        raise DataError("mix must match archetypes and sum to 1")

    base_ts = config.base_day * SECONDS_PER_DAY
    slot_s = config.slot_minutes * 60
    trajs = []
    for a_idx in range(config.n_agents):
        arch = archetypes[int(rng.choice(len(archetypes), p=mix))]
        # stable per-agent home/work/... region choices
        anchors = {c: int(rng.choice(clusters[c])) for c in cluster_names}
        stays = []
        for slot, cname in arch.schedule:
            if stays and rng.random() < config.deviation:
                # deviations leave the scheduled cluster so they are observable
                outside = [r for r in city.region_ids if r not in set(clusters[cname])]
                rid = int(rng.choice(outside))
            else:
                rid = anchors[cname]
            ts = base_ts + slot * slot_s
            stays.append(StayPoint(rid, ts))
        trajs.append(Trajectory(agent_id=f"a{a_idx:06d}", city_id=config.city_id,
                                stays=stays, role=arch.name))
    return city, trajs


def planted_clusters(city: CityMap) -> dict[str, list[int]]:
    """Recover the cluster partition of a synthetic city from region ids."""
    cluster_names = list(CLUSTER_SIGNATURE)
    out: dict[str, list[int]] = {c: [] for c in cluster_names}
    for rid in city.region_ids:
        out[cluster_names[rid % len(cluster_names)]].append(rid)
    return out
