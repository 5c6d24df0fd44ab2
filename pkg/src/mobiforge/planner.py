"""Recursive travel planning over pluggable inference backends.

A backend maps (current slot, current POI profile, role) to logits over next
arrival slots and destination POI categories. The planning loop queries the
backend recursively, collecting per-step time and POI distributions until the
time budget of K slots is exhausted. Two backends ship here: a trainable
two-layer network optimized with the dual-KL objective, and an HTTP client
for an external planner service.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import requests

from . import nn
from .data import TimeSlotting, Trajectory
from .geo import CityMap, N_CATEGORIES, POI_CATEGORIES


class PlannerError(RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class RemoteBackendError(PlannerError):
    pass


@dataclass(frozen=True)
class RoleProfile:
    name: str
    instruction: str

    def __post_init__(self):
        if not self.instruction:
            raise ValueError("role instruction must be non-empty")


DEFAULT_ROLES: dict[str, RoleProfile] = {
    "commuter": RoleProfile("commuter", "You are an office commuter who travels "
                            "from a residential area to a workplace in the morning, "
                            "takes a midday meal break, and returns home in the evening."),
    "wanderer": RoleProfile("wanderer", "You spend the day on leisure: visiting "
                            "entertainment venues and restaurants before returning home."),
    "retiree": RoleProfile("retiree", "You are a retiree running daily errands, "
                           "favoring dining spots and life services near home."),
    "visitor": RoleProfile("visitor", "You are a visitor touring the city, drawn "
                           "to tourist attractions and hotels."),
    "teacher": RoleProfile("teacher", "You are a teacher commuting to an "
                           "education campus in the morning and home in the evening."),
    "office worker": RoleProfile("office worker", "You are an office worker "
                                 "commuting to a business district."),
}


@dataclass(frozen=True)
class PlannerQuery:
    current_slot: int
    current_semantics: np.ndarray
    slots_per_day: int
    role: RoleProfile | None = None
    day_offset: int = 0
    dataset_tag: str = ""

    def __post_init__(self):
        if not (0 <= self.current_slot < self.slots_per_day):
            raise ValueError(f"slot {self.current_slot} out of range")
        s = np.asarray(self.current_semantics, dtype=np.float64)
        if s.shape != (N_CATEGORIES,) or abs(s.sum() - 1.0) > 1e-6 or np.any(s < 0):
            raise ValueError("current_semantics is not a valid POI simplex")


@dataclass(frozen=True)
class PlannerResponse:
    time_logits: np.ndarray
    poi_logits: np.ndarray

    def validate(self, slots_per_day: int) -> "PlannerResponse":
        t = np.asarray(self.time_logits, dtype=np.float64)
        p = np.asarray(self.poi_logits, dtype=np.float64)
        if t.shape != (slots_per_day,):
            raise PlannerError(f"time_logits has shape {t.shape}, "
                               f"expected ({slots_per_day},)")
        if p.shape != (N_CATEGORIES,):
            raise PlannerError(f"poi_logits has shape {p.shape}, "
                               f"expected ({N_CATEGORIES},)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise PlannerError("non-finite planner logits")
        return self


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    e = np.exp(z)
    return e / e.sum()


@dataclass
class TravelPlan:
    """Per-step arrival-slot distributions and destination POI distributions."""

    temporal: list[np.ndarray]
    semantic: list[np.ndarray]
    day_offsets: list[int]
    start_slot: int
    slots_per_day: int
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.temporal) != len(self.semantic) or \
                len(self.temporal) != len(self.day_offsets):
            raise ValueError("temporal/semantic/day_offsets lengths differ")
        prev = self.start_slot
        for i, (dist, day) in enumerate(zip(self.temporal, self.day_offsets)):
            g = day * self.slots_per_day + int(np.argmax(dist))
            if g <= prev:
                raise ValueError(f"step {i}: slot {g} not after {prev}")
            prev = g

    @property
    def steps(self) -> int:
        return len(self.temporal)

    def argmax_slots(self) -> list[int]:
        """Global (day*slots_per_day + slot) argmax arrival slots per step."""
        return [d * self.slots_per_day + int(np.argmax(t))
                for t, d in zip(self.temporal, self.day_offsets)]


def plan(start_slot: int, start_region: int, city: CityMap, k: int,
         slotting: TimeSlotting, backend, role: RoleProfile | None = None) -> TravelPlan:
    """Recursive planning loop: at most ``k`` backend calls, strictly
    advancing arrival slots (non-advancing predictions are forced one slot
    forward and recorded as a warning)."""
    if k < 1:
        raise PlannerError(f"k must be >= 1, got {k}")
    spd = slotting.slots_per_day
    t_global = start_slot
    p = city.semantics_of(start_region)
    temporal, semantic, days, warns = [], [], [], []
    # exactly k backend calls: the forced-advance rule makes the arrival slot
    # strictly increase, so the k-step cap is the termination guarantee
    for step in range(k):
        query = PlannerQuery(current_slot=t_global % spd, current_semantics=p,
                             slots_per_day=spd, role=role,
                             day_offset=t_global // spd)
        try:
            resp = backend.infer(query).validate(spd)
        except Exception as e:
            raise PlannerError(f"backend failure: {e}", step=step) from e
        time_dist = _softmax(np.asarray(resp.time_logits, dtype=np.float64))
        poi_dist = _softmax(np.asarray(resp.poi_logits, dtype=np.float64))
        arg = int(np.argmax(time_dist))
        delta = (arg - t_global % spd) % spd
        if delta == 0:
            delta = 1
            warns.append(f"step {step}: non-advancing time prediction, forced +1 slot")
            # shift the stored distribution so its argmax matches the slot used
            time_dist = np.roll(time_dist, 1)
        t_global += delta
        temporal.append(time_dist)
        semantic.append(poi_dist)
        days.append(t_global // spd)
        p = poi_dist
    return TravelPlan(temporal=temporal, semantic=semantic, day_offsets=days,
                      start_slot=start_slot, slots_per_day=spd, warnings=warns)


# ---------------------------------------------------------------------------
# Loss

@dataclass
class PlannerLossConfig:
    time_weight: float = 1.0  # the weighting of the arrival-time KL term
    label_smoothing: float = 0.0

    def __post_init__(self):
        if self.time_weight < 0:
            raise ValueError("time_weight must be >= 0")


@dataclass
class PlannerTarget:
    y_time: np.ndarray  # simplex over slots (one-hot unless smoothed)
    y_poi: np.ndarray   # simplex over POI categories


def smooth_one_hot(index: int, size: int, smoothing: float) -> np.ndarray:
    v = np.full(size, smoothing / size)
    v[index] += 1.0 - smoothing
    return v


def planner_loss(time_logits, poi_logits, target: PlannerTarget,
                 cfg: PlannerLossConfig) -> nn.Tensor:
    """Dual-KL objective: POI term plus weighted arrival-time term.

    Logits may be Tensors (training) or arrays (evaluation); batched inputs
    use leading batch axes on logits and targets alike.
    """
    tl = time_logits if isinstance(time_logits, nn.Tensor) else nn.Tensor(time_logits)
    pl = poi_logits if isinstance(poi_logits, nn.Tensor) else nn.Tensor(poi_logits)
    l_poi = nn.kl_div(nn.log_softmax(pl, axis=-1), target.y_poi)
    l_time = nn.kl_div(nn.log_softmax(tl, axis=-1), target.y_time)
    return nn.add(l_poi, nn.scale(l_time, cfg.time_weight))


# ---------------------------------------------------------------------------
# Neural backend

class NeuralPlannerBackend:
    """Two-layer feed-forward planner over slot one-hot + POI profile + role."""

    ROLE_DIM = 8
    HIDDEN = 64

    def __init__(self, slots_per_day: int, roles: list[str], seed: int = 0):
        self.slots_per_day = slots_per_day
        self.roles = [""] + sorted(set(roles) - {""})
        self._role_index = {r: i for i, r in enumerate(self.roles)}
        rng = np.random.default_rng(seed)
        in_dim = slots_per_day + N_CATEGORIES + self.ROLE_DIM
        self.params = {
            "role_table": nn.Parameter(
                (rng.normal(size=(len(self.roles), self.ROLE_DIM)) * 0.1), "role_table"),
            "w1": nn.Parameter(nn.xavier_init((in_dim, self.HIDDEN), rng), "w1"),
            "b1": nn.Parameter(np.zeros(self.HIDDEN), "b1"),
            "w_time": nn.Parameter(nn.xavier_init((self.HIDDEN, slots_per_day), rng), "w_time"),
            "b_time": nn.Parameter(np.zeros(slots_per_day), "b_time"),
            "w_poi": nn.Parameter(nn.xavier_init((self.HIDDEN, N_CATEGORIES), rng), "w_poi"),
            "b_poi": nn.Parameter(np.zeros(N_CATEGORIES), "b_poi"),
        }

    def role_id(self, role: str | None) -> int:
        return self._role_index.get(role or "", 0)

    def features(self, slots: np.ndarray, semantics: np.ndarray) -> np.ndarray:
        """(batch,) slots and (batch, 14) semantics -> (batch, slots+14) one-hot part."""
        b = len(slots)
        oh = np.zeros((b, self.slots_per_day))
        oh[np.arange(b), slots] = 1.0
        return np.concatenate([oh, semantics], axis=1)

    def forward(self, slots: np.ndarray, semantics: np.ndarray,
                role_ids: np.ndarray) -> tuple[nn.Tensor, nn.Tensor]:
        x = nn.Tensor(self.features(slots, semantics))
        role_emb = nn.embedding_lookup(self.params["role_table"], role_ids)
        h = nn.concat([x, role_emb], axis=1)
        h = nn.gelu(nn.add(nn.matmul(h, self.params["w1"]), self.params["b1"]))
        time_logits = nn.add(nn.matmul(h, self.params["w_time"]), self.params["b_time"])
        poi_logits = nn.add(nn.matmul(h, self.params["w_poi"]), self.params["b_poi"])
        return time_logits, poi_logits

    def infer(self, query: PlannerQuery) -> PlannerResponse:
        tl, pl = self.forward(np.array([query.current_slot]),
                              np.asarray(query.current_semantics)[None, :],
                              np.array([self.role_id(query.role.name if query.role else None)]))
        return PlannerResponse(time_logits=tl.data[0].astype(np.float64),
                               poi_logits=pl.data[0].astype(np.float64))


@dataclass
class PlannerTrainReport:
    losses: list[float]
    n_samples: int


def build_training_pairs(trajs: list[Trajectory], city: CityMap,
                         slotting: TimeSlotting):
    """Consecutive-stay supervision: (slot, semantics, role) -> next slot/POI."""
    slots, sems, roles, next_slots, next_sems = [], [], [], [], []
    for tr in trajs:
        for a, b in zip(tr.stays, tr.stays[1:]):
            slots.append(slotting.slot_of(a.timestamp))
            sems.append(city.semantics_of(a.region_id))
            roles.append(tr.role or "")
            next_slots.append(slotting.slot_of(b.timestamp))
            next_sems.append(city.semantics_of(b.region_id))
    return (np.array(slots), np.stack(sems), roles,
            np.array(next_slots), np.stack(next_sems))


def train_neural_backend(trajs: list[Trajectory], city: CityMap,
                         slotting: TimeSlotting, cfg: PlannerLossConfig,
                         epochs: int = 30, seed: int = 0, lr: float = 1e-3,
                         batch_size: int = 128
                         ) -> tuple[NeuralPlannerBackend, PlannerTrainReport]:
    """Fit the neural backend with the dual-KL loss over consecutive stays."""
    if not trajs:
        raise PlannerError("empty training dataset")
    slots, sems, roles, nslots, nsems = build_training_pairs(trajs, city, slotting)
    backend = NeuralPlannerBackend(slotting.slots_per_day,
                                   roles=sorted({r for r in roles}), seed=seed)
    role_ids = np.array([backend.role_id(r) for r in roles])
    n = len(slots)
    y_time = np.zeros((n, slotting.slots_per_day))
    if cfg.label_smoothing > 0:
        y_time[:] = cfg.label_smoothing / slotting.slots_per_day
        y_time[np.arange(n), nslots] += 1.0 - cfg.label_smoothing
    else:
        y_time[np.arange(n), nslots] = 1.0

    opt = nn.Adam(list(backend.params.values()), lr=lr)
    rng = np.random.default_rng(seed + 1)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            tl, pl = backend.forward(slots[idx], sems[idx], role_ids[idx])
            target = PlannerTarget(y_time=y_time[idx], y_poi=nsems[idx])
            loss = planner_loss(tl, pl, target, cfg)
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            losses.append(loss.item())
    return backend, PlannerTrainReport(losses=losses, n_samples=n)


# ---------------------------------------------------------------------------
# Prompt rendering and remote backend

PROMPT_TEMPLATE = """\
Task: you are planning the next stop of a day's travel itinerary.
{instruction}Current time: {hhmm} (day offset {day})
Neighborhood profile (share of points of interest):
{profile}
Respond with the next arrival time slot and the destination profile over the
same categories.
"""


def render_prompt(query: PlannerQuery, slot_minutes: int | None = None) -> str:
    """Deterministic prompt text for the remote planner protocol."""
    minutes_per_slot = slot_minutes or 1440 // query.slots_per_day
    total_min = query.current_slot * minutes_per_slot
    hhmm = f"{total_min // 60:02d}:{total_min % 60:02d}"
    instruction = ""
    if query.role is not None:
        instruction = f"Role: {query.role.instruction}\n"
    pct = np.asarray(query.current_semantics) * 100.0
    lines = [f"  {label}: {pct[i]:.1f}%" for i, label in enumerate(POI_CATEGORIES)]
    return PROMPT_TEMPLATE.format(instruction=instruction, hhmm=hhmm,
                                  day=query.day_offset, profile="\n".join(lines))


class RemotePlannerBackend:
    """HTTP client for the POST /v1/plan wire protocol, with bounded retries."""

    def __init__(self, endpoint: str, timeout: float = 10.0, retries: int = 3,
                 fallback=None, slot_minutes: int | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.fallback = fallback
        self.slot_minutes = slot_minutes

    def infer(self, query: PlannerQuery) -> PlannerResponse:
        minutes_per_slot = self.slot_minutes or 1440 // query.slots_per_day
        total_min = query.current_slot * minutes_per_slot
        payload = {
            "instruction": render_prompt(query, self.slot_minutes),
            "current_time": f"{total_min // 60:02d}:{total_min % 60:02d}",
            "day_offset": query.day_offset,
            "poi_distribution": [float(x) for x in query.current_semantics],
            "role": query.role.name if query.role else None,
        }
        last_err: Exception | None = None
        for _ in range(self.retries):
            try:
                r = requests.post(self.endpoint + "/v1/plan", json=payload,
                                  timeout=self.timeout)
                r.raise_for_status()
                doc = r.json()
                resp = PlannerResponse(
                    time_logits=np.asarray(doc["time_logits"], dtype=np.float64),
                    poi_logits=np.asarray(doc["poi_logits"], dtype=np.float64))
                return resp.validate(query.slots_per_day)
            except (requests.RequestException, json.JSONDecodeError,
                    KeyError, TypeError, ValueError) as e:
                if isinstance(e, PlannerError):
                    raise
                last_err = e
        if self.fallback is not None:
            warnings.warn(f"remote planner failed ({last_err}); using fallback")
            return self.fallback.infer(query)
        raise RemoteBackendError(f"remote planner failed after "
                                 f"{self.retries} attempts: {last_err}")


def plan_from_trajectory(traj: Trajectory, city: CityMap,
                         slotting: TimeSlotting) -> TravelPlan:
    """Teacher plan from ground truth: one-hot arrival slots, true POI vectors.

    Used to train the generator independently of planner quality.
    """
    spd = slotting.slots_per_day
    start_slot = slotting.slot_of(traj.stays[0].timestamp)
    base_day = traj.stays[0].timestamp // 86400
    temporal, semantic, days = [], [], []
    prev_global = start_slot
    for s in traj.stays[1:]:
        g = int((s.timestamp // 86400 - base_day) * spd + slotting.slot_of(s.timestamp))
        if g <= prev_global:
            g = prev_global + 1
        oh = np.zeros(spd)
        oh[g % spd] = 1.0
        temporal.append(oh)
        semantic.append(city.semantics_of(s.region_id))
        days.append(g // spd)
        prev_global = g
    return TravelPlan(temporal=temporal, semantic=semantic, day_offsets=days,
                      start_slot=start_slot, slots_per_day=spd)
