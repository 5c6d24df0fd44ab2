"""Discrete-Voronoi city maps with per-region POI semantics.

A city is a set of seed points; every coordinate belongs to the region whose
seed is nearest (haversine by default, planar-km optionally). Each region
carries a 14-dimensional distribution over POI categories which is the
city-agnostic vocabulary used throughout the pipeline.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0

POI_CATEGORIES: tuple[str, ...] = (
    "Transportation Facilities",
    "Companies & Enterprises",
    "Commercial & Residential",
    "Automotive",
    "Science & Education & Culture",
    "Sports & Fitness",
    "Financial Institutions",
    "Leisure & Entertainment",
    "Healthcare",
    "Tourist Attractions",
    "Life Services",
    "Shopping & Consumer Goods",
    "Hotels & Accommodations",
    "Dining & Cuisine",
)

N_CATEGORIES = len(POI_CATEGORIES)
_CATEGORY_INDEX = {label: i for i, label in enumerate(POI_CATEGORIES)}


class GeoError(ValueError):
    """Invalid geographic input (duplicate seeds, unknown ids, bad vectors)."""


def category_index(label: str) -> int:
    try:
        return _CATEGORY_INDEX[label]
    except KeyError:
        raise GeoError(f"unknown POI category {label!r}") from None


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km; accepts scalars or numpy arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64))
                              for v in (lon1, lat1, lon2, lat2))
    dlon = lon2 - lon1
    dlat = lat2 - lat1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.minimum(1.0, np.sqrt(a)))


def planar_km(lon1, lat1, lon2, lat2):
    """Euclidean distance treating (lon, lat) as km coordinates on a plane."""
    dx = np.asarray(lon2, dtype=np.float64) - np.asarray(lon1, dtype=np.float64)
    dy = np.asarray(lat2, dtype=np.float64) - np.asarray(lat1, dtype=np.float64)
    return np.sqrt(dx * dx + dy * dy)


@dataclass(frozen=True)
class PoiRecord:
    lon: float
    lat: float
    category: int  # index into POI_CATEGORIES

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise GeoError(f"coordinates out of range: ({self.lon}, {self.lat})")
        if not (0 <= self.category < N_CATEGORIES):
            raise GeoError(f"category index {self.category} out of range")


@dataclass(frozen=True)
class Region:
    region_id: int
    city_id: str
    seed_lon: float
    seed_lat: float
    centroid_lon: float
    centroid_lat: float


def poi_distribution(weights) -> np.ndarray:
    """Validate and return a 14-dim simplex vector as float64."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (N_CATEGORIES,):
        raise GeoError(f"POI distribution must have {N_CATEGORIES} entries, got shape {w.shape}")
    if np.any(w < 0):
        raise GeoError("POI distribution has negative entries")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise GeoError(f"POI distribution sums to {w.sum()!r}, not 1")
    return w


def uniform_distribution() -> np.ndarray:
    return np.full(N_CATEGORIES, 1.0 / N_CATEGORIES)


@dataclass
class CityMap:
    """Immutable-after-construction partition of a city into seed-nearest regions."""

    city_id: str
    regions: list[Region]
    semantics: dict[int, np.ndarray] = field(default_factory=dict)
    distance_mode: str = "haversine"  # or "planar"

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise GeoError("duplicate region ids")
        self._seed_lon = np.array([r.seed_lon for r in self.regions])
        self._seed_lat = np.array([r.seed_lat for r in self.regions])
        self._ids = np.array(ids)
        order = np.argsort(self._ids, kind="stable")
        self._seed_lon = self._seed_lon[order]
        self._seed_lat = self._seed_lat[order]
        self._ids = self._ids[order]
        self._by_id = {r.region_id: r for r in self.regions}

    @property
    def n_regions(self) -> int:
        return len(self.regions)

    @property
    def region_ids(self) -> list[int]:
        return [int(i) for i in self._ids]

    def region(self, region_id: int) -> Region:
        try:
            return self._by_id[region_id]
        except KeyError:
            raise GeoError(f"unknown region id {region_id} in city {self.city_id!r}") from None

    def _distance_fn(self):
        return planar_km if self.distance_mode == "planar" else haversine_km

    def semantics_of(self, region_id: int) -> np.ndarray:
        self.region(region_id)
        return self.semantics.get(region_id, uniform_distribution())

    def semantics_matrix(self) -> np.ndarray:
        """Per-region semantics stacked in region_id order, shape (n_regions, 14)."""
        return np.stack([self.semantics_of(i) for i in self.region_ids])


def build_partition(city_id: str, seeds: list[tuple[float, float]],
                    distance_mode: str = "haversine") -> CityMap:
    """Build a discrete Voronoi partition from seed points.

    One region per seed, ids in input order; duplicate seeds are rejected with
    the offending index pairs.
    """
    if len(seeds) < 1:
        raise GeoError("at least one seed required")
    seen: dict[tuple[float, float], int] = {}
    dupes = []
    for i, s in enumerate(seeds):
        key = (float(s[0]), float(s[1]))
        if key in seen:
            dupes.append((seen[key], i))
        else:
            seen[key] = i
    if dupes:
        raise GeoError(f"duplicate seeds at index pairs {dupes}")
    regions = [Region(region_id=i, city_id=city_id,
                      seed_lon=float(lon), seed_lat=float(lat),
                      centroid_lon=float(lon), centroid_lat=float(lat))
               for i, (lon, lat) in enumerate(seeds)]
    semantics = {r.region_id: uniform_distribution() for r in regions}
    return CityMap(city_id=city_id, regions=regions, semantics=semantics,
                   distance_mode=distance_mode)


def assign_region(point: tuple[float, float], city: CityMap) -> int:
    """Nearest-seed region id; exact distance ties go to the lower region id."""
    lon, lat = point
    dist = city._distance_fn()(city._seed_lon, city._seed_lat, lon, lat)
    # ids are sorted ascending, argmin keeps the first (lowest-id) minimum
    return int(city._ids[int(np.argmin(dist))])


def assign_regions(lons, lats, city: CityMap) -> np.ndarray:
    """Vectorized nearest-seed assignment for arrays of points."""
    fn = city._distance_fn()
    lons = np.asarray(lons, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    d = fn(city._seed_lon[None, :], city._seed_lat[None, :], lons[:, None], lats[:, None])
    return city._ids[np.argmin(d, axis=1)]


def aggregate_semantics(pois: list[PoiRecord], city: CityMap) -> CityMap:
    """Attach per-region POI distributions; returns a new CityMap.

    Regions with no POIs keep the uniform distribution so every semantics
    vector stays a valid simplex. Centroids move to the mean POI coordinate
    where at least one POI landed.
    """
    counts = {rid: np.zeros(N_CATEGORIES) for rid in city.region_ids}
    coord_sum = {rid: np.zeros(2) for rid in city.region_ids}
    coord_n = {rid: 0 for rid in city.region_ids}
    if pois:
        rids = assign_regions([p.lon for p in pois], [p.lat for p in pois], city)
        for p, rid in zip(pois, rids):
            rid = int(rid)
            counts[rid][p.category] += 1
            coord_sum[rid] += (p.lon, p.lat)
            coord_n[rid] += 1
    semantics = {}
    regions = []
    for r in city.regions:
        c = counts[r.region_id]
        total = c.sum()
        semantics[r.region_id] = c / total if total > 0 else uniform_distribution()
        if coord_n[r.region_id] > 0:
            mean = coord_sum[r.region_id] / coord_n[r.region_id]
            r = Region(r.region_id, r.city_id, r.seed_lon, r.seed_lat,
                       float(mean[0]), float(mean[1]))
        regions.append(r)
    return CityMap(city_id=city.city_id, regions=regions, semantics=semantics,
                   distance_mode=city.distance_mode)


def region_distance(a: int, b: int, city: CityMap) -> float:
    """Centroid-to-centroid distance in km."""
    ra, rb = city.region(a), city.region(b)
    if a == b:
        return 0.0
    return float(city._distance_fn()(ra.centroid_lon, ra.centroid_lat,
                                     rb.centroid_lon, rb.centroid_lat))


def centroid_matrix(city: CityMap) -> np.ndarray:
    """(n_regions, 2) centroid lon/lat in region_id order."""
    return np.array([[city.region(i).centroid_lon, city.region(i).centroid_lat]
                     for i in city.region_ids])


def pairwise_region_distances(city: CityMap) -> dict[int, np.ndarray]:
    """region_id -> distances to all regions in region_id order."""
    cm = centroid_matrix(city)
    fn = city._distance_fn()
    out = {}
    for k, rid in enumerate(city.region_ids):
        out[rid] = fn(cm[k, 0], cm[k, 1], cm[:, 0], cm[:, 1])
    return out


# ---------------------------------------------------------------------------
# File formats

def load_seeds_csv(path) -> list[tuple[float, float]]:
    """CSV with header lon,lat."""
    seeds = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != ["lon", "lat"]:
            raise GeoError(f"{path}: expected header 'lon,lat', got {reader.fieldnames}")
        for row in reader:
            seeds.append((float(row["lon"]), float(row["lat"])))
    return seeds


def load_pois_csv(path) -> list[PoiRecord]:
    """CSV with header lon,lat,category (category = exact label)."""
    pois = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        expected = ["lon", "lat", "category"]
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != expected:
            raise GeoError(f"{path}: expected header 'lon,lat,category', got {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                pois.append(PoiRecord(float(row["lon"]), float(row["lat"]),
                                      category_index(row["category"])))
            except (GeoError, ValueError) as e:
                raise GeoError(f"{path}:{lineno}: {e}") from None
    return pois


def save_city_json(city: CityMap, path) -> None:
    doc = {
        "city_id": city.city_id,
        "distance_mode": city.distance_mode,
        "regions": [
            {"region_id": r.region_id,
             "seed": [r.seed_lon, r.seed_lat],
             "centroid": [r.centroid_lon, r.centroid_lat]}
            for r in city.regions
        ],
        "semantics": {str(rid): [float(x) for x in city.semantics_of(rid)]
                      for rid in city.region_ids},
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def load_city_json(path) -> CityMap:
    with open(path) as f:
        doc = json.load(f)
    regions = [Region(region_id=int(r["region_id"]), city_id=doc["city_id"],
                      seed_lon=r["seed"][0], seed_lat=r["seed"][1],
                      centroid_lon=r["centroid"][0], centroid_lat=r["centroid"][1])
               for r in doc["regions"]]
    semantics = {int(k): poi_distribution(v) for k, v in doc["semantics"].items()}
    return CityMap(city_id=doc["city_id"], regions=regions, semantics=semantics,
                   distance_mode=doc.get("distance_mode", "haversine"))
