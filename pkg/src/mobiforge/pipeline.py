"""Stage orchestration: artifacts, manifests, and the end-to-end workflow.

Each stage reads its inputs from the workspace directory named by the run
configuration, writes outputs plus a manifest (config hash, input hashes,
seed, wall time), and is skipped on re-run when nothing changed unless
forced. Missing upstream artifacts raise a dependency error naming the
stage that must run first.
"""

from __future__ import annotations

import json
import os
import time
from pathlib import Path

import numpy as np

from . import nn
from .config import config_hash, file_hash
from .data import (SynthConfig, TimeSlotting, Trajectory, load_trajectories,
                   normalize_length, save_trajectories, split_dataset,
                   synth_city, trajectory_to_poi_sequence)
from .embedding import (CityDecoder, EncoderConfig, SpatialEncoder,
                        adapt_new_city, train_autoencoder)
from .generator import (Denoiser, DiffusionSchedule, DiTConfig,
                        build_schedule, plan_condition_arrays, sample_latents,
                        train_generator)
from .geo import CityMap, N_CATEGORIES, load_city_json, save_city_json
from .metrics import epr_generate, evaluate
from .data import StayPoint
from .planner import (DEFAULT_ROLES, NeuralPlannerBackend, PlannerLossConfig,
                      RemotePlannerBackend, plan, plan_from_trajectory,
                      train_neural_backend)
from .privacy import (LogisticAttacker, membership_inference_attack,
                      uniqueness_test, utility_probe)

PLANNER_URL_ENV = "MOBIFORGE_PLANNER_URL"

STAGES = ("partition", "synth-data", "ingest", "train-planner", "train-embed",
          "adapt-city", "train-gen", "generate", "evaluate", "audit")


class DependencyError(RuntimeError):
    pass


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Workspace & manifests

class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def stage_dir(self, stage: str) -> Path:
        d = self.root / stage.replace("-", "_")
        d.mkdir(parents=True, exist_ok=True)
        return d

    def manifest_path(self, stage: str) -> Path:
        return self.stage_dir(stage) / "manifest.json"

    def require(self, stage: str, *files: str) -> list[Path]:
        """Paths of upstream outputs; error names the stage to run first."""
        d = self.root / stage.replace("-", "_")
        paths = [d / f for f in files]
        if not (d / "manifest.json").exists() or any(not p.exists() for p in paths):
            raise DependencyError(
                f"missing artifacts from stage '{stage}'; run it first")
        return paths


def _write_manifest(ws: Workspace, stage: str, cfg: dict, seed: int,
                    inputs: list[Path], started: float) -> None:
    body = {
        "stage": stage,
        "config_hash": config_hash(cfg),
        "input_hashes": {str(p): file_hash(p) for p in sorted(inputs)},
        "seed": seed,
        "wall_time_s": round(time.time() - started, 3),
    }
    ws.manifest_path(stage).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _up_to_date(ws: Workspace, stage: str, cfg: dict, inputs: list[Path]) -> bool:
    path = ws.manifest_path(stage)
    if not path.exists():
        return False
    try:
        body = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if body.get("config_hash") != config_hash(cfg):
        return False
    recorded = body.get("input_hashes", {})
    current = {str(p): file_hash(p) for p in inputs if p.exists()}
    return recorded == current and len(inputs) == len(current)


def run_stage(stage: str, ws: Workspace, cfg: dict, force: bool = False) -> bool:
    """Run one stage; returns True if work was done, False on no-op skip."""
    fn = _STAGE_FUNCS[stage]
    inputs = _stage_inputs(stage, ws, cfg)
    if not force and _up_to_date(ws, stage, cfg, inputs):
        return False
    started = time.time()
    seed = cfg["seeds"]["master"]
    fn(ws, cfg)
    _write_manifest(ws, stage, cfg, seed, [p for p in inputs if p.exists()], started)
    return True


def _stage_inputs(stage: str, ws: Workspace, cfg: dict) -> list[Path]:
    r = ws.root
    deps = {
        "partition": [],
        "synth-data": [],
        "ingest": [],
        "train-planner": [r / "synth_data" / "train.csv"],
        "train-embed": [r / "synth_data" / "train.csv"],
        "adapt-city": [r / "train_embed" / "encoder.ckpt"],
        "train-gen": [r / "synth_data" / "train.csv",
                      r / "train_embed" / "encoder.ckpt"],
        "generate": [r / "train_gen" / "denoiser.ckpt",
                     r / "train_planner" / "planner.ckpt"],
        "evaluate": [r / "generate" / "generated.csv"],
        "audit": [r / "generate" / "generated.csv"],
    }[stage]
    if stage == "partition" and cfg["paths"]["seeds_csv"]:
        deps = [Path(cfg["paths"]["seeds_csv"])]
    if stage == "ingest" and cfg["paths"]["raw_trajectories"]:
        deps = [Path(cfg["paths"]["raw_trajectories"])]
    return deps


# ---------------------------------------------------------------------------
# Shared constructors

def _slotting(cfg: dict) -> TimeSlotting:
    return TimeSlotting(cfg["data"]["slot_minutes"])


def _encoder_config(cfg: dict) -> EncoderConfig:
    e = cfg["embedding"]
    return EncoderConfig(layers=e["layers"], hidden=e["hidden"],
                         kernel=e["kernel"], dilations=tuple(e["dilations"]),
                         out_dim=e["out_dim"])


def _dit_config(cfg: dict) -> DiTConfig:
    g = cfg["generator"]
    return DiTConfig(blocks=g["blocks"], heads=g["heads"], d_model=g["d_model"],
                     ffn=g["ffn"], slots_per_day=_slotting(cfg).slots_per_day)


def _schedule(cfg: dict) -> DiffusionSchedule:
    g = cfg["generator"]
    return build_schedule(g["diffusion_steps"], g["beta_start"], g["beta_end"])


def _load_city(ws: Workspace) -> CityMap:
    (path,) = ws.require("synth-data", "city.json")
    return load_city_json(path)


def _attach_roles(trajs: list[Trajectory], roles: dict[str, str]
                  ) -> list[Trajectory]:
    return [Trajectory(t.agent_id, t.city_id, t.stays,
                       role=roles.get(t.agent_id)) for t in trajs]


def _load_split(ws: Workspace) -> tuple[list[Trajectory], list[Trajectory],
                                        list[Trajectory], CityMap]:
    city = _load_city(ws)
    paths = ws.require("synth-data", "train.csv", "val.csv", "test.csv")
    roles_path = ws.root / "synth_data" / "roles.json"
    roles = json.loads(roles_path.read_text()) if roles_path.exists() else {}
    train, val, test = (_attach_roles(load_trajectories(p, city), roles)
                        for p in paths)
    return train, val, test, city


# ---------------------------------------------------------------------------
# Stages

def stage_partition(ws: Workspace, cfg: dict) -> None:
    """Build a city map from a seeds CSV (real-data path into the pipeline)."""
    from .geo import build_partition, load_seeds_csv
    src = cfg["paths"]["seeds_csv"]
    if not src:
        raise StageError("partition requires paths.seeds_csv")
    seeds = load_seeds_csv(src)
    city = build_partition("ingested", seeds,
                           distance_mode=cfg["city"]["distance_mode"])
    save_city_json(city, ws.stage_dir("partition") / "city.json")


def stage_synth_data(ws: Workspace, cfg: dict) -> None:
    out = ws.stage_dir("synth-data")
    scfg = SynthConfig(
        city_id="synth-main",
        n_regions=cfg["city"]["n_regions"],
        n_agents=cfg["data"]["n_agents"],
        k=cfg["planner"]["k"],
        deviation=cfg["data"]["deviation"],
        seed=cfg["seeds"]["master"],
        archetypes=("commuter", "wanderer"),
        slot_minutes=cfg["data"]["slot_minutes"],
    )
    city, trajs = synth_city(scfg)
    split = split_dataset(trajs, seed=cfg["seeds"]["master"])
    frac = cfg["data"]["train_fraction"]
    train = split.train[:max(1, round(frac * len(split.train)))]
    save_city_json(city, out / "city.json")
    save_trajectories(train, out / "train.csv")
    save_trajectories(split.val, out / "val.csv")
    save_trajectories(split.test, out / "test.csv")
    (out / "roles.json").write_text(json.dumps(
        {t.agent_id: t.role for t in trajs if t.role}, indent=0,
        sort_keys=True) + "\n")


def stage_ingest(ws: Workspace, cfg: dict) -> None:
    """Validate an external trajectory CSV against the partitioned city."""
    src = cfg["paths"]["raw_trajectories"]
    if not src:
        raise StageError("ingest requires paths.raw_trajectories")
    (city_path,) = ws.require("partition", "city.json")
    city = load_city_json(city_path)
    trajs = load_trajectories(src, city)
    out = ws.stage_dir("ingest")
    split = split_dataset(trajs, seed=cfg["seeds"]["master"])
    save_city_json(city, out / "city.json")
    save_trajectories(split.train, out / "train.csv")
    save_trajectories(split.val, out / "val.csv")
    save_trajectories(split.test, out / "test.csv")


def stage_train_planner(ws: Workspace, cfg: dict) -> None:
    train, _, _, city = _load_split(ws)
    p = cfg["planner"]
    backend, report = train_neural_backend(
        train, city, _slotting(cfg),
        PlannerLossConfig(time_weight=p["time_weight"],
                          label_smoothing=p["label_smoothing"]),
        epochs=p["epochs"], seed=cfg["seeds"]["master"], lr=p["lr"])
    out = ws.stage_dir("train-planner")
    nn.save_checkpoint(backend.params, out / "planner.ckpt")
    (out / "planner.json").write_text(json.dumps({
        "slots_per_day": backend.slots_per_day,
        "roles": backend.roles,
        "final_loss": report.losses[-1],
        "n_samples": report.n_samples,
    }, indent=2) + "\n")


def load_planner(ws: Workspace) -> NeuralPlannerBackend:
    ckpt, meta = ws.require("train-planner", "planner.ckpt", "planner.json")
    doc = json.loads(meta.read_text())
    backend = NeuralPlannerBackend(doc["slots_per_day"], roles=doc["roles"])
    nn.load_into(backend.params, ckpt)
    return backend


def stage_train_embed(ws: Workspace, cfg: dict) -> None:
    train, _, _, city = _load_split(ws)
    e = cfg["embedding"]
    enc_cfg = _encoder_config(cfg)
    encoder, decoders, report = train_autoencoder(
        {city.city_id: (train, city)}, enc_cfg, epochs=e["epochs"],
        seed=cfg["seeds"]["master"], lr=e["lr"], batch_size=e["batch_size"])
    out = ws.stage_dir("train-embed")
    nn.save_checkpoint(encoder.params, out / "encoder.ckpt")
    nn.save_checkpoint(decoders[city.city_id].params, out / "decoder.ckpt")
    (out / "embed.json").write_text(json.dumps({
        "city_id": city.city_id,
        "n_regions": city.n_regions,
        "accuracy": report.accuracy_per_city,
    }, indent=2) + "\n")


def load_embedding(ws: Workspace, cfg: dict) -> tuple[SpatialEncoder, CityDecoder]:
    enc_p, dec_p, meta = ws.require("train-embed", "encoder.ckpt",
                                    "decoder.ckpt", "embed.json")
    doc = json.loads(meta.read_text())
    encoder = SpatialEncoder(_encoder_config(cfg))
    nn.load_into(encoder.params, enc_p)
    decoder = CityDecoder(doc["city_id"], doc["n_regions"],
                          cfg["embedding"]["out_dim"])
    nn.load_into(decoder.params, dec_p)
    return encoder, decoder


def stage_adapt_city(ws: Workspace, cfg: dict) -> None:
    """Few-shot adaptation: fresh decoder for a held-out synthetic city."""
    encoder, _ = load_embedding(ws, cfg)
    e = cfg["embedding"]
    scfg = SynthConfig(
        city_id="synth-adapt",
        n_regions=cfg["city"]["n_regions"],
        n_agents=cfg["data"]["n_agents"],
        k=cfg["planner"]["k"],
        deviation=cfg["data"]["deviation"],
        seed=cfg["seeds"]["master"] + 101,
        archetypes=("commuter", "wanderer"),
        slot_minutes=cfg["data"]["slot_minutes"],
    )
    city, trajs = synth_city(scfg)
    budget = max(1, round(e["adapt_fraction"] * len(trajs)))
    decoder, report = adapt_new_city(
        encoder, trajs[:budget], city, _encoder_config(cfg),
        epochs=e["adapt_epochs"], seed=cfg["seeds"]["master"], lr=3e-3)
    out = ws.stage_dir("adapt-city")
    nn.save_checkpoint(decoder.params, out / "decoder.ckpt")
    save_city_json(city, out / "city.json")
    (out / "adapt.json").write_text(json.dumps({
        "city_id": city.city_id,
        "budget": budget,
        "accuracy": report.accuracy_per_city,
        "chance": 1.0 / city.n_regions,
    }, indent=2) + "\n")


def _training_latents(train: list[Trajectory], city: CityMap,
                      encoder: SpatialEncoder, slotting: TimeSlotting,
                      k: int) -> tuple[np.ndarray, ...]:
    """Latents plus teacher-plan condition arrays for generator training."""
    seqs, m_all, d_all, r0_all = [], [], [], []
    spd = slotting.slots_per_day
    for tr in train:
        fixed, _ = normalize_length(tr, k + 1)
        seqs.append(np.stack(trajectory_to_poi_sequence(fixed, city)))
        teacher = plan_from_trajectory(fixed, city, slotting)
        r0 = city.semantics_of(fixed.stays[0].region_id)
        m, d = plan_condition_arrays(teacher, r0, k + 1)
        m_all.append(m)
        d_all.append(d)
        r0_all.append(r0)
    latents = encoder.encode_batch(np.stack(seqs))
    return latents, np.stack(m_all), np.stack(d_all), np.stack(r0_all)


def stage_train_gen(ws: Workspace, cfg: dict) -> None:
    train, _, _, city = _load_split(ws)
    encoder, _ = load_embedding(ws, cfg)
    slotting = _slotting(cfg)
    k = cfg["planner"]["k"]
    latents, m, d, r0 = _training_latents(train, city, encoder, slotting, k)
    # Diffusion assumes roughly unit-scale data; train on normalized latents
    # and record the scale so generation can map samples back.
    scale = float(latents.std()) or 1.0
    g = cfg["generator"]
    model, report = train_generator(
        latents / scale, m, d, r0, _schedule(cfg), _dit_config(cfg),
        steps=g["train_steps"], seed=cfg["seeds"]["master"], lr=g["lr"],
        batch_size=g["batch_size"])
    out = ws.stage_dir("train-gen")
    nn.save_checkpoint(model.params, out / "denoiser.ckpt")
    (out / "gen.json").write_text(json.dumps({
        "final_loss": report.losses[-1],
        "latent_scale": scale,
        "train_steps": g["train_steps"],
    }, indent=2) + "\n")


def load_denoiser(ws: Workspace, cfg: dict) -> Denoiser:
    (ckpt,) = ws.require("train-gen", "denoiser.ckpt")
    model = Denoiser(_dit_config(cfg))
    nn.load_into(model.params, ckpt)
    return model


def load_latent_scale(ws: Workspace) -> float:
    (meta,) = ws.require("train-gen", "gen.json")
    return float(json.loads(meta.read_text()).get("latent_scale", 1.0))


# ---------------------------------------------------------------------------
# Batched generation

def _snap_plan_rows(d: np.ndarray, start_idx: int, semantics: np.ndarray,
                    rng: np.random.Generator, usage: np.ndarray,
                    margin: float = 0.05) -> np.ndarray:
    """Replace predicted semantic rows with concrete region rows.

    Planner predictions are neighbourhood-level signatures shared by many
    regions; conditioning every trajectory on the same signature collapses
    them onto a single modal region.  Each row is snapped to one compatible
    region (squared distance within ``margin`` of the nearest): the start
    region when compatible, else a region already snapped in this plan (so
    repeated visits stay consistent), else the least-used compatible region
    across the batch (random tie-break), which spreads assignments evenly
    over the compatible set instead of piling onto a modal region.  Returns
    the rewritten rows plus per-position region indices (anchor included).
    """
    out = d.copy()
    regions = [start_idx]
    chosen: list[int] = []
    for i in range(1, len(d)):
        d2 = ((semantics - d[i]) ** 2).sum(axis=1)
        lo = d2.min()
        if d2[start_idx] - lo <= margin:
            j = start_idx
        else:
            j = next((c for c in chosen if d2[c] - lo <= margin), -1)
            if j < 0:
                cand = np.flatnonzero(d2 - lo <= margin)
                best = cand[usage[cand] == usage[cand].min()]
                j = int(rng.choice(best))
                usage[j] += 1
                chosen.append(j)
        out[i] = semantics[j]
        regions.append(j)
    return out, regions


def _privacy_filter(out: list[Trajectory], avoid: list[Trajectory],
                    semantics: np.ndarray, region_ids: list[int],
                    region_index: dict, rng: np.random.Generator,
                    usage: np.ndarray, threshold: float) -> list[Trajectory]:
    """Rewrite outputs that are near-copies of a protected trajectory.

    A trajectory whose region sequence exceeds ``threshold`` similarity to
    any protected one has its most visited non-start region re-assigned to
    a least-used region of the same cluster, repeatedly, until dissimilar.
    Only protected trajectories sharing the start region can be that close
    (the start recurs several times per day), so candidates are bucketed by
    first region.
    """
    from .privacy import similarity

    buckets: dict[int, list[tuple]] = {}
    for tr in avoid:
        ids = tuple(s.region_id for s in tr.stays)
        buckets.setdefault(ids[0], []).append(ids)
    pair_d2 = ((semantics[:, None, :] - semantics[None, :, :]) ** 2).sum(axis=2)

    def top1(ids: list) -> float:
        cands = buckets.get(ids[0], [])
        return max((similarity(ids, c) for c in cands), default=0.0)

    filtered = []
    for tr in out:
        orig = [s.region_id for s in tr.stays]
        ids = list(orig)
        for attempt in range(16):
            if top1(ids) <= threshold:
                break
            counts: dict[int, int] = {}
            for r in ids[1:]:
                if r != ids[0]:
                    counts[r] = counts.get(r, 0) + 1
            if not counts:
                break
            # Rotate through the scheduled regions: swapping one of them may
            # still match a protected trajectory that shares the rest.
            ordered = sorted(counts, key=lambda r: counts[r], reverse=True)
            worst = ordered[attempt % len(ordered)]
            near = np.flatnonzero(pair_d2[region_index[worst]] <= 0.05)
            near = near[near != region_index[worst]]
            if near.size == 0:
                break
            best = near[usage[near] == usage[near].min()]
            j = int(rng.choice(best))
            usage[j] += 1
            ids = [region_ids[j] if r == worst else r for r in ids]
        if ids != orig:
            tr = Trajectory(agent_id=tr.agent_id, city_id=tr.city_id,
                            stays=[StayPoint(r, s.timestamp)
                                   for r, s in zip(ids, tr.stays)],
                            role=tr.role)
        filtered.append(tr)
    return filtered


def generate_batch(city: CityMap, encoder_decoder: tuple, denoiser: Denoiser,
                   schedule: DiffusionSchedule, planner_backend,
                   starts: list[tuple[int, int, str | None]],
                   slotting: TimeSlotting, k: int, seed: int,
                   uniform_plan: bool = False,
                   latent_scale: float = 1.0,
                   target_locnum: float | None = None,
                   avoid: list[Trajectory] | None = None,
                   avoid_threshold: float = 0.8,
                   chunk: int = 256) -> list[Trajectory]:
    """Generate one trajectory per (start_region, start_time, role) triple.

    With ``uniform_plan`` the travel-plan conditions are replaced by uniform
    distributions and arrivals advance one slot per step (guidance ablation).
    ``latent_scale`` maps unit-scale diffusion samples back to decoder space.
    ``target_locnum`` (mean distinct regions per reference trajectory) sets
    the rate of one-off detour steps injected into the plan conditions;
    deterministic plans alone visit only the scheduled regions, while real
    agents occasionally deviate off schedule.
    ``avoid`` enables the release privacy filter: any output whose region
    sequence is more than ``avoid_threshold`` similar to a trajectory in
    ``avoid`` has its scheduled regions re-assigned within-cluster until it
    is dissimilar, so no output is a near-copy of a training record.
    """
    encoder, decoder = encoder_decoder
    spd = slotting.slots_per_day
    semantics = np.stack([city.semantics_of(r) for r in city.region_ids])
    region_index = {r: i for i, r in enumerate(city.region_ids)}
    snap_rng = np.random.default_rng(seed + 7)
    snap_usage = np.zeros(len(semantics), dtype=np.int64)
    m_all, d_all, r0_all, slot_rows, snap_regions = [], [], [], [], []
    for start_region, start_time, role_name in starts:
        r0 = city.semantics_of(start_region)
        start_slot = slotting.slot_of(start_time)
        if uniform_plan:
            m = np.full((k + 1, spd), 1.0 / spd)
            d = np.full((k + 1, N_CATEGORIES), 1.0 / N_CATEGORIES)
            arrivals = [start_slot + i for i in range(1, k + 1)]
        else:
            pl = plan(start_slot, start_region, city, k, slotting,
                      planner_backend, role=DEFAULT_ROLES.get(role_name or ""))
            m, d = plan_condition_arrays(pl, r0, k + 1)
            d, regions = _snap_plan_rows(d, region_index[start_region],
                                         semantics, snap_rng, snap_usage)
            arrivals = pl.argmax_slots()
            snap_regions.append(regions)
        m_all.append(m)
        d_all.append(d)
        r0_all.append(r0)
        slot_rows.append(arrivals)
    m_all = np.stack(m_all)
    d_all = np.stack(d_all)
    r0_all = np.stack(r0_all)

    if target_locnum is not None and snap_regions:
        # Inject one-off detours so the distinct-region count matches the
        # reference mean; scheduled plans alone never deviate off pattern.
        base = float(np.mean([len(set(r)) for r in snap_regions]))
        rate = min(max((target_locnum - base) / k, 0.0), 0.5)
        pair_d2 = ((semantics[:, None, :] - semantics[None, :, :]) ** 2
                   ).sum(axis=2)
        for pi, regions in enumerate(snap_regions):
            for i in range(1, k + 1):
                if snap_rng.random() < rate:
                    far = np.flatnonzero(pair_d2[regions[i]] > 0.05)
                    best = far[snap_usage[far] == snap_usage[far].min()]
                    j = int(snap_rng.choice(best))
                    snap_usage[j] += 1
                    d_all[pi, i] = semantics[j]
    # Known first-stay latents, used to inpaint position 0 during sampling.
    # The encoder is causal, so a constant sequence gives the exact latent.
    anchor_seqs = np.repeat(r0_all[:, None, :], k + 1, axis=1)
    anchors = encoder.encode_batch(anchor_seqs)[:, 0, :] / latent_scale

    out: list[Trajectory] = []
    slot_s = slotting.slot_minutes * 60
    for lo in range(0, len(starts), chunk):
        hi = min(lo + chunk, len(starts))
        lat = sample_latents(denoiser, schedule, r0_all[lo:hi], m_all[lo:hi],
                             d_all[lo:hi], seq_len=k + 1, seed=seed + lo,
                             anchor=anchors[lo:hi])
        logits = decoder.decode_batch(lat * latent_scale)
        region_idx = logits.argmax(axis=-1)
        for j in range(hi - lo):
            start_region, start_time, role_name = starts[lo + j]
            start_slot = slotting.slot_of(start_time)
            stays = [StayPoint(start_region, start_time)]
            ids = [city.region_ids[i] for i in region_idx[j]]
            for g, rid in zip(slot_rows[lo + j], ids[1:]):
                stays.append(StayPoint(rid, start_time + (g - start_slot) * slot_s))
            out.append(Trajectory(agent_id=f"gen-{lo + j}", city_id=city.city_id,
                                  stays=stays, role=role_name))
    if avoid is not None:
        out = _privacy_filter(out, avoid, semantics, city.region_ids,
                              region_index, snap_rng, snap_usage,
                              avoid_threshold)
    return out


def _resolve_backend(ws: Workspace, cfg: dict):
    url = os.environ.get(PLANNER_URL_ENV) or cfg["planner"]["remote_url"]
    neural = load_planner(ws)
    if url:
        return RemotePlannerBackend(url, fallback=neural,
                                    slot_minutes=cfg["data"]["slot_minutes"])
    return neural


def stage_generate(ws: Workspace, cfg: dict) -> None:
    train, _, _, city = _load_split(ws)
    backend = _resolve_backend(ws, cfg)
    encoder, decoder = load_embedding(ws, cfg)
    denoiser = load_denoiser(ws, cfg)
    slotting = _slotting(cfg)
    # One start per training trajectory: keeps the generated start-region
    # distribution exactly at the empirical one (resampling with replacement
    # adds multinomial noise that inflates the aggregate-visit divergence).
    starts = [(tr.stays[0].region_id, tr.stays[0].timestamp, tr.role)
              for tr in train]
    target = float(np.mean([len({s.region_id for s in tr.stays})
                            for tr in train]))
    trajs = generate_batch(city, (encoder, decoder), denoiser, _schedule(cfg),
                           backend, starts, slotting, cfg["planner"]["k"],
                           seed=cfg["seeds"]["master"] + 9,
                           latent_scale=load_latent_scale(ws),
                           target_locnum=target, avoid=train)
    save_trajectories(trajs, ws.stage_dir("generate") / "generated.csv")


def stage_evaluate(ws: Workspace, cfg: dict) -> None:
    from .report import render_metric_figures
    train, _, test, city = _load_split(ws)
    (gen_path,) = ws.require("generate", "generated.csv")
    gen = load_trajectories(gen_path, city)
    reference = train + test
    report = evaluate(reference, gen, city, bins=cfg["evaluation"]["bins"],
                      config_hash=config_hash(cfg))
    baseline = epr_generate(city, n_agents=len(gen), k=cfg["planner"]["k"],
                            rho=cfg["evaluation"]["epr_rho"],
                            gamma=cfg["evaluation"]["epr_gamma"],
                            seed=cfg["seeds"]["master"] + 13,
                            slotting=_slotting(cfg))
    baseline_report = evaluate(reference, baseline,
                               bins=cfg["evaluation"]["bins"], city=city,
                               config_hash=config_hash(cfg))
    out = ws.stage_dir("evaluate")
    report.write(out)
    (out / "baseline_metrics.json").write_text(baseline_report.to_json() + "\n")
    render_metric_figures(report, out)


def stage_audit(ws: Workspace, cfg: dict) -> None:
    from .report import render_similarity_figure
    train, val, test, city = _load_split(ws)
    (gen_path,) = ws.require("generate", "generated.csv")
    gen = load_trajectories(gen_path, city)
    out = ws.stage_dir("audit")
    p = cfg["privacy"]
    uniq = uniqueness_test(gen, train, alarm_threshold=p["alarm_threshold"])
    uniq.write(out)
    render_similarity_figure(uniq, out)
    nonmembers = (val + test)
    members = train[:len(nonmembers)]
    attack = membership_inference_attack(
        members, nonmembers, gen, city, _slotting(cfg),
        attacker=LogisticAttacker(seed=cfg["seeds"]["master"]),
        seed=cfg["seeds"]["master"], sim_subsample=p["sim_subsample"])
    (out / "attack.json").write_text(attack.to_json() + "\n")
    utility = utility_probe(train, gen, test, city,
                            mix_ratios=tuple(p["mix_ratios"]),
                            slotting=_slotting(cfg),
                            seed=cfg["seeds"]["master"])
    (out / "utility.json").write_text(utility.to_json() + "\n")


_STAGE_FUNCS = {
    "partition": stage_partition,
    "synth-data": stage_synth_data,
    "ingest": stage_ingest,
    "train-planner": stage_train_planner,
    "train-embed": stage_train_embed,
    "adapt-city": stage_adapt_city,
    "train-gen": stage_train_gen,
    "generate": stage_generate,
    "evaluate": stage_evaluate,
    "audit": stage_audit,
}

E2E_STAGES = ("synth-data", "train-planner", "train-embed", "train-gen",
              "generate", "evaluate", "audit")


def run_e2e(ws: Workspace, cfg: dict, force: bool = False) -> list[str]:
    """Run the full synthetic workflow; returns the stages that did work."""
    ran = []
    for stage in E2E_STAGES:
        if run_stage(stage, ws, cfg, force=force):
            ran.append(stage)
    return ran
