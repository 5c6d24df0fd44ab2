"""Acceptance gate: ten end-to-end criteria at stated tolerances.

Each test prints a single summary line on success; a failed assertion is the
fail line. The heavyweight pipeline run is shared between the fidelity and
privacy criteria through a module-scoped fixture.
"""

import json
import math
import time

import numpy as np
import pytest

from mobiforge import nn
from mobiforge.config import load_config
from mobiforge.data import (StayPoint, SynthConfig, TimeSlotting, Trajectory,
                            split_dataset, synth_city)
from mobiforge.embedding import (EncoderConfig, _dataset_arrays, adapt_new_city,
                                 reconstruction_accuracy, train_autoencoder)
from mobiforge.generator import (DiTConfig, build_schedule, forward_noise,
                                 sample_latents, train_generator)
from mobiforge.geo import N_CATEGORIES, build_partition, centroid_matrix
from mobiforge.metrics import build_od, cpc, epr_generate, evaluate, jsd
from mobiforge.pipeline import (Workspace, generate_batch, load_denoiser,
                                load_embedding, run_e2e, _load_split,
                                _schedule, _slotting, _training_latents)
from mobiforge.planner import (PlannerLossConfig, PlannerResponse, TravelPlan,
                               build_training_pairs, plan, train_neural_backend)
from mobiforge.privacy import (LogisticAttacker, levenshtein,
                               membership_inference_attack, uniqueness_test)

SLOTTING = TimeSlotting(30)


# ---------------------------------------------------------------------------
# Criterion 1: autodiff numeric core

def test_acceptance_1_autodiff_finite_difference():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(6, 5))
    cot = rng.normal(size=(4, 5))
    cot46 = rng.normal(size=(4, 6))
    conv_x = rng.normal(size=(2, 8, 3))
    conv_cot = rng.normal(size=(2, 8, 2))
    attn_cot = rng.normal(size=(1, 6, 6))
    table_idx = np.array([0, 2, 1, 2])

    def proj(t, c):
        return nn.reduce_sum(nn.mul(t, nn.Tensor(c)))

    cases = {
        "add": lambda p: proj(nn.add(p, 1.5), cot46),
        "sub": lambda p: proj(nn.sub(p, 0.5), cot46),
        "mul": lambda p: proj(nn.mul(p, p), cot46),
        "scale": lambda p: proj(nn.scale(p, 1.7), cot46),
        "matmul": lambda p: proj(nn.matmul(p, nn.Tensor(w)), cot),
        "sigmoid": lambda p: proj(nn.sigmoid(p), cot46),
        "gelu": lambda p: proj(nn.gelu(p), cot46),
        "softmax": lambda p: proj(nn.softmax(p), cot46),
        "log_softmax": lambda p: proj(nn.log_softmax(p), cot46),
        "layer_norm": lambda p: proj(nn.layer_norm(p), cot46),
        "reshape": lambda p: proj(nn.reshape(p, (2, 12)), cot46.reshape(2, 12)),
        "transpose": lambda p: proj(nn.transpose(p, (1, 0)), cot46.T),
        "slice": lambda p: proj(p[1:3, :4], cot46[1:3, :4]),
        "concat": lambda p: proj(nn.concat([p, nn.scale(p, 2.0)], axis=1),
                                 np.hstack([cot46, cot46])),
        "sum": lambda p: nn.reduce_sum(nn.mul(p, p)),
        "mean": lambda p: nn.reduce_mean(nn.mul(p, p)),
        "embedding": lambda p: proj(nn.embedding_lookup(p, table_idx),
                                    cot46[:, :6][: len(table_idx)]),
        "conv": lambda p: proj(
            nn.dilated_causal_conv1d(nn.Tensor(conv_x), p,
                                     nn.Tensor(np.zeros(2)), dilation=2),
            conv_cot),
        "attention": lambda p: proj(
            nn.multi_head_attention(p, p, p, nn.Tensor(np.eye(6)),
                                    nn.Tensor(np.eye(6)), nn.Tensor(np.eye(6)),
                                    nn.Tensor(np.eye(6)), n_heads=2),
            attn_cot),
        "mse": lambda p: nn.mse(p, nn.Tensor(np.zeros((4, 6)))),
        "cross_entropy": lambda p: nn.cross_entropy(p, np.array([1, 3, 0, 5])),
        "kl_div": lambda p: nn.kl_div(nn.log_softmax(p),
                                      np.full((4, 6), 1.0 / 6)),
    }
    started = time.time()
    for name, build in cases.items():
        if name == "conv":
            x0 = rng.normal(size=(3, 3, 2))
        elif name == "embedding":
            x0 = rng.normal(size=(3, 6))
        elif name == "attention":
            x0 = rng.normal(size=(1, 6, 6))
        else:
            x0 = rng.normal(size=(4, 6))
        err = nn.check_gradient(build, x0)
        assert err < 1e-3, f"{name}: relative error {err}"
    elapsed = time.time() - started
    assert elapsed < 60.0
    print(f"\nACCEPTANCE 1 PASS: {len(cases)} primitives < 1e-3 "
          f"in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# Criterion 2: metric oracles on >= 1e3 random instances

def test_acceptance_2_metric_oracles():
    rng = np.random.default_rng(1)
    n_inst = 1000

    # jsd vs direct summation
    for _ in range(n_inst):
        k = int(rng.integers(2, 9))
        p = rng.dirichlet(np.ones(k))
        q = rng.dirichlet(np.ones(k))
        m = (p + q) / 2
        direct = sum(0.5 * pi * math.log2(pi / mi) for pi, mi in zip(p, m) if pi > 0) + \
                 sum(0.5 * qi * math.log2(qi / mi) for qi, mi in zip(q, m) if qi > 0)
        assert abs(jsd(p, q) - direct) < 1e-9
        assert jsd(p, p) == 0.0

    # levenshtein vs full-table DP (exact)
    def full_table(a, b):
        dp = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
        for i in range(len(a) + 1):
            dp[i][0] = i
        for j in range(len(b) + 1):
            dp[0][j] = j
        for i in range(1, len(a) + 1):
            for j in range(1, len(b) + 1):
                dp[i][j] = min(dp[i - 1][j] + 1, dp[i][j - 1] + 1,
                               dp[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
        return dp[-1][-1]

    for _ in range(n_inst):
        a = rng.integers(0, 5, size=rng.integers(0, 9)).tolist()
        b = rng.integers(0, 5, size=rng.integers(0, 9)).tolist()
        assert levenshtein(a, b) == full_table(a, b)

    # cpc vs direct formula
    for _ in range(n_inst):
        a = rng.integers(0, 5, size=(3, 3))
        b = rng.integers(0, 5, size=(3, 3))
        if a.sum() + b.sum() == 0:
            continue
        direct = 2.0 * np.minimum(a, b).sum() / (a.sum() + b.sum())
        assert abs(cpc(a, b) - direct) < 1e-9

    # radius of gyration vs two-pass oracle
    city = build_partition("acc", [(j * 0.1, i * 0.1) for i in range(4)
                                   for j in range(4)], distance_mode="planar")
    cm = centroid_matrix(city)
    fn = city._distance_fn()
    from mobiforge.metrics import trajectory_radii
    for _ in range(n_inst):
        regions = rng.integers(0, 16, size=rng.integers(2, 8)).tolist()
        tr = Trajectory("a", "acc", [StayPoint(r, i * 1800)
                                     for i, r in enumerate(regions)])
        pts = cm[regions]
        com = pts.mean(axis=0)
        oracle = math.sqrt(np.mean([fn(p[0], p[1], com[0], com[1]) ** 2
                                    for p in pts]))
        assert abs(trajectory_radii([tr], city)[0] - oracle) < 1e-9
    print(f"\nACCEPTANCE 2 PASS: jsd/levenshtein/cpc/radius oracles on "
          f"{n_inst} instances each")


# ---------------------------------------------------------------------------
# Criterion 3: planning loop termination under adversarial backends

class _CountingBackend:
    def __init__(self, mode, seed):
        self.mode = mode
        self.rng = np.random.default_rng(seed)
        self.calls = 0

    def infer(self, query):
        self.calls += 1
        spd = query.slots_per_day
        if self.mode == "stall":       # always predicts the current slot
            tl = np.full(spd, -9.0)
            tl[query.current_slot] = 9.0
        elif self.mode == "backward":  # always predicts one slot earlier
            tl = np.full(spd, -9.0)
            tl[(query.current_slot - 1) % spd] = 9.0
        else:                          # random logits
            tl = self.rng.normal(size=spd) * 5
        return PlannerResponse(time_logits=tl,
                               poi_logits=self.rng.normal(size=N_CATEGORIES))


def test_acceptance_3_planner_termination():
    city, _ = synth_city(SynthConfig(n_regions=9, n_agents=1, seed=2))
    runs = 10_000
    k = 5
    import warnings
    for i in range(runs):
        mode = ("stall", "backward", "random")[i % 3]
        backend = _CountingBackend(mode, seed=i)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pl = plan(start_slot=int(i % 48), start_region=int(i % 9),
                      city=city, k=k, slotting=SLOTTING, backend=backend)
        assert backend.calls == k
        slots = pl.argmax_slots()
        assert all(b > a for a, b in zip([pl.start_slot] + slots, slots))
    print(f"\nACCEPTANCE 3 PASS: {runs} adversarial runs, all exactly "
          f"{k} calls with monotone slots")


# ---------------------------------------------------------------------------
# Criterion 4: planner learning on planted transitions

def test_acceptance_4_planner_learning():
    cfg = SynthConfig(n_regions=16, n_agents=150, deviation=0.0, seed=3,
                      archetypes=("commuter", "wanderer"))
    city, trajs = synth_city(cfg)
    backend, report = train_neural_backend(
        trajs[:120], city, SLOTTING, PlannerLossConfig(), epochs=40, seed=0)
    slots, sems, roles, nslots, nsems = build_training_pairs(
        trajs[120:], city, SLOTTING)
    role_ids = np.array([backend.role_id(r) for r in roles])
    tl, pl = backend.forward(slots, sems, role_ids)
    time_ok = float((tl.data.argmax(axis=1) == nslots).mean())
    poi_ok = float((pl.data.argmax(axis=1) == nsems.argmax(axis=1)).mean())
    assert time_ok >= 0.95
    assert poi_ok >= 0.95
    smooth = np.convolve(report.losses, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-3)
    print(f"\nACCEPTANCE 4 PASS: held-out argmax time {time_ok:.3f}, "
          f"POI {poi_ok:.3f}; smoothed loss monotone")


# ---------------------------------------------------------------------------
# Criterion 5: frozen-encoder transfer

def test_acceptance_5_embedding_transfer():
    enc_cfg = EncoderConfig(layers=2, hidden=16, kernel=3, dilations=(1, 2),
                            out_dim=32)

    def make(name, seed):
        city, trajs = synth_city(SynthConfig(
            city_id=name, n_regions=16, n_agents=200, seed=seed,
            archetypes=("commuter", "wanderer")))
        return trajs, city

    trajs_a, city_a = make("accA", 14)
    trajs_b, city_b = make("accB", 15)
    enc, _, _ = train_autoencoder(
        {"accA": (trajs_a, city_a), "accB": (trajs_b, city_b)},
        enc_cfg, epochs=30, seed=0)
    trajs_c, city_c = make("accC", 16)
    budget = max(1, int(0.05 * (len(trajs_a) + len(trajs_b))))
    before = {k: v.data.copy() for k, v in enc.params.items()}
    dec_c, _ = adapt_new_city(enc, trajs_c[:budget], city_c, enc_cfg,
                              epochs=200, lr=3e-3, seed=1)
    for key, val in enc.params.items():
        np.testing.assert_array_equal(before[key], val.data,
                                      err_msg=f"encoder {key} changed")
    seqs, targets = _dataset_arrays(trajs_c[budget:], city_c)
    acc = reconstruction_accuracy(enc, dec_c, seqs, targets)
    chance = 1.0 / city_c.n_regions
    assert acc >= 5.0 * chance
    print(f"\nACCEPTANCE 5 PASS: adapted accuracy {acc:.3f} "
          f">= 5x chance ({5 * chance:.3f}); encoder bitwise frozen")


# ---------------------------------------------------------------------------
# Criterion 6: generator sanity

def test_acceptance_6_generator_sanity():
    cfg = DiTConfig(blocks=2, heads=4, d_model=16, ffn=32, slots_per_day=8)
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(1, 3, cfg.d_model))
    m = rng.dirichlet(np.ones(cfg.slots_per_day), size=(1, 3))
    d = rng.dirichlet(np.ones(N_CATEGORIES), size=(1, 3))
    r0 = rng.dirichlet(np.ones(N_CATEGORIES), size=1)
    sched = build_schedule(25, 0.001, 0.1)

    # memorization
    model, _ = train_generator(x0, m, d, r0, sched, cfg, steps=1500, seed=1,
                               lr=3e-3, batch_size=16)
    sample = sample_latents(model, sched, r0, m, d, seq_len=3, seed=2)
    l2 = float(np.linalg.norm(sample - x0))
    bound = 0.1 * float(np.linalg.norm(x0))
    assert l2 < bound

    # forward-noise Monte Carlo moments within 3%
    sched100 = build_schedule(100, 0.001, 0.1)
    t = 60
    draws = np.array([forward_noise(np.full(1, 2.0), t,
                                    rng.normal(size=1), sched100)[0]
                      for _ in range(40000)])
    ab = sched100.alpha_bars[t - 1]
    assert draws.mean() == pytest.approx(math.sqrt(ab) * 2.0, rel=0.03)
    assert draws.var() == pytest.approx(1.0 - ab, rel=0.03)

    # zero-gate initialization: blocks are exact identities
    from mobiforge.generator import Denoiser
    fresh = Denoiser(cfg, seed=5)
    x = rng.normal(size=(2, 3, cfg.d_model))
    cond, m_emb = fresh.embed_conditions(np.array([3, 7]),
                                         rng.dirichlet(np.ones(N_CATEGORIES), 2),
                                         rng.dirichlet(np.ones(8), (2, 3)),
                                         rng.dirichlet(np.ones(N_CATEGORIES), (2, 3)))
    h = nn.Tensor(x)
    for b in range(cfg.blocks):
        h = fresh.dit_block(h, cond, m_emb, b)
    np.testing.assert_array_equal(h.data, nn.Tensor(x).data)
    print(f"\nACCEPTANCE 6 PASS: memorization L2 {l2:.3f} < {bound:.3f}; "
          f"moments within 3%; init blocks exact identity")


# ---------------------------------------------------------------------------
# Criteria 7 & 9: shared full-scale pipeline run

ACCEPT_OVERRIDES = [
    "city.n_regions=144",
    "data.n_agents=2300",
    "planner.epochs=20",
    "embedding.epochs=25",
    "generator.train_steps=2400",
]


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    cfg = load_config(None, ACCEPT_OVERRIDES)
    ws = Workspace(tmp_path_factory.mktemp("acceptance"))
    started = time.time()
    run_e2e(ws, cfg)
    return ws, cfg, time.time() - started


def test_acceptance_7_fidelity_ordering(full_run):
    ws, cfg, elapsed = full_run
    assert elapsed < 30 * 60, f"pipeline took {elapsed:.0f}s"
    train, _, test, city = _load_split(ws)
    assert city.n_regions >= 50 and len(train) + len(test) >= 1800
    report = json.loads((ws.root / "evaluate" / "metrics.json").read_text())
    baseline = json.loads(
        (ws.root / "evaluate" / "baseline_metrics.json").read_text())

    # uniform-plan ablation at equal sampling budget
    from mobiforge.data import load_trajectories
    gen = load_trajectories(ws.root / "generate" / "generated.csv", city)
    encoder, decoder = load_embedding(ws, cfg)
    denoiser = load_denoiser(ws, cfg)
    starts = [(t.stays[0].region_id, t.stays[0].timestamp, t.role)
              for t in gen]
    from mobiforge.pipeline import load_latent_scale
    ablation = generate_batch(city, (encoder, decoder), denoiser,
                              _schedule(cfg), None, starts, _slotting(cfg),
                              cfg["planner"]["k"],
                              seed=cfg["seeds"]["master"] + 9,
                              uniform_plan=True,
                              latent_scale=load_latent_scale(ws))
    abl_report = evaluate(train + test, ablation, city,
                          bins=cfg["evaluation"]["bins"])
    abl = {"distance_jsd": abl_report.distance_jsd,
           "radius_jsd": abl_report.radius_jsd,
           "locnum_jsd": abl_report.locnum_jsd,
           "grank_jsd": abl_report.grank_jsd}
    lines = []
    for key in ("distance_jsd", "radius_jsd", "locnum_jsd", "grank_jsd"):
        assert report[key] < baseline[key], \
            f"{key}: pipeline {report[key]:.4f} !< baseline {baseline[key]:.4f}"
        assert report[key] < abl[key], \
            f"{key}: pipeline {report[key]:.4f} !< ablation {abl[key]:.4f}"
        lines.append(f"{key} {report[key]:.4f} < epr {baseline[key]:.4f} "
                     f"/ ablation {abl[key]:.4f}")
    print(f"\nACCEPTANCE 7 PASS: {'; '.join(lines)}; "
          f"runtime {elapsed / 60:.1f} min")


def test_acceptance_9_privacy(full_run):
    ws, cfg, _ = full_run
    train, val, test, city = _load_split(ws)
    from mobiforge.data import load_trajectories
    gen = load_trajectories(ws.root / "generate" / "generated.csv", city)
    attack = json.loads((ws.root / "audit" / "attack.json").read_text())
    assert attack["success_rate"] < 0.65
    nonmembers = val + test
    members = train[:len(nonmembers)]
    leak = membership_inference_attack(
        members, nonmembers, generated=members, city=city,
        attacker=LogisticAttacker(seed=0), seed=0, sim_subsample=0)
    assert leak.success_rate > 0.9
    uniq = json.loads((ws.root / "audit" / "uniqueness.json").read_text())
    assert uniq["alarm_fraction"] < 0.05
    print(f"\nACCEPTANCE 9 PASS: MIA {attack['success_rate']:.3f} < 0.65; "
          f"leak control {leak.success_rate:.3f} > 0.9; "
          f"alarm {uniq['alarm_fraction']:.3f} < 0.05")


# ---------------------------------------------------------------------------
# Criterion 8: data-efficiency ordering

def test_acceptance_8_data_efficiency(tmp_path):
    cfg = load_config(None, [
        "city.n_regions=50",
        "data.n_agents=900",
        "planner.epochs=8",
        "embedding.epochs=3",
        "generator.train_steps=500",
    ])
    city, trajs = synth_city(SynthConfig(
        city_id="synth-main", n_regions=50, n_agents=900, k=8,
        deviation=0.1, seed=0, archetypes=("commuter", "wanderer")))
    split = split_dataset(trajs, seed=0)
    slotting = _slotting(cfg)
    reference = split.train + split.test

    enc_cfg = EncoderConfig(layers=3, hidden=32, kernel=3, dilations=(1, 2, 4),
                            out_dim=128)
    encoder, decoders, _ = train_autoencoder(
        {city.city_id: (split.train, city)}, enc_cfg, epochs=20, seed=0)
    decoder = decoders[city.city_id]
    backend, _ = train_neural_backend(split.train, city, slotting,
                                     PlannerLossConfig(), epochs=8, seed=0)
    sched = _schedule(cfg)
    dit = DiTConfig(blocks=4, heads=8, d_model=128, ffn=512, slots_per_day=48)

    scores = []
    for frac in (0.25, 0.5, 1.0):
        subset = split.train[:max(1, round(frac * len(split.train)))]
        latents, m, d, r0 = _training_latents(subset, city, encoder,
                                              slotting, k=8)
        scale = float(latents.std()) or 1.0
        model, _ = train_generator(latents / scale, m, d, r0, sched, dit,
                                   steps=500, seed=0, lr=1e-3, batch_size=64)
        starts = [(t.stays[0].region_id, t.stays[0].timestamp, t.role)
                  for t in split.train]
        gen = generate_batch(city, (encoder, decoder), model, sched, backend,
                             starts, slotting, k=8, seed=11,
                             latent_scale=scale)
        scores.append(evaluate(reference, gen, city).distance_jsd)
    assert all(b <= a + 0.01 for a, b in zip(scores, scores[1:])), scores
    print(f"\nACCEPTANCE 8 PASS: distance divergence at 25/50/100% data = "
          f"{', '.join(f'{s:.4f}' for s in scores)} (non-increasing +-0.01)")


# ---------------------------------------------------------------------------
# Criterion 10: byte-identical determinism

def test_acceptance_10_determinism(tmp_path):
    from mobiforge.cli import main
    tiny = ["--set", "city.n_regions=25", "--set", "data.n_agents=60",
            "--set", "planner.epochs=5", "--set", "embedding.epochs=2",
            "--set", "embedding.out_dim=32", "--set", "generator.d_model=32",
            "--set", "generator.heads=4", "--set", "generator.ffn=64",
            "--set", "generator.blocks=2", "--set", "generator.train_steps=60",
            "--set", "generator.diffusion_steps=20"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["e2e", "--out", str(a), *tiny]) == 0
    assert main(["e2e", "--out", str(b), *tiny]) == 0
    ma = (a / "evaluate" / "metrics.json").read_bytes()
    mb = (b / "evaluate" / "metrics.json").read_bytes()
    assert ma == mb
    print("\nACCEPTANCE 10 PASS: byte-identical metric reports across runs")
