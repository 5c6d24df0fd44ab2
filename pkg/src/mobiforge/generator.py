"""Conditional diffusion over unified latent sequences.

Transformer denoiser predicting the clean latent directly, with adaptive
layer-norm modulation from a fused condition vector (diffusion step, start
region profile, pooled travel-plan embeddings) and cross-attention from the
latent sequence onto the per-step temporal-plan embedding. Sampling is
ancestral DDPM with the posterior mean of the clean-latent prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import StayPoint, TimeSlotting, Trajectory
from .embedding import CityDecoder, SpatialEncoder, UnifiedRepresentation
from .geo import CityMap, N_CATEGORIES
from .planner import TravelPlan


class GeneratorError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Schedule

@dataclass
class DiffusionSchedule:
    betas: np.ndarray        # (T,), index 0 is diffusion step 1
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def alpha_bar_prev(self, t: int) -> float:
        """alpha-bar at step t-1, defined as 1 for t=1."""
        return 1.0 if t <= 1 else float(self.alpha_bars[t - 2])


def build_schedule(steps: int = 1000, beta_start: float = 0.001,
                   beta_end: float = 0.1) -> DiffusionSchedule:
    if not (0.0 < beta_start < beta_end < 1.0):
        raise GeneratorError(f"invalid beta bounds ({beta_start}, {beta_end})")
    if steps < 2:
        raise GeneratorError(f"need at least 2 steps, got {steps}")
    betas = beta_start + np.arange(steps) / (steps - 1) * (beta_end - beta_start)
    alphas = 1.0 - betas
    return DiffusionSchedule(betas=betas, alphas=alphas,
                             alpha_bars=np.cumprod(alphas))


def forward_noise(x0: np.ndarray, t: int, noise: np.ndarray,
                  sched: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) noise, t in [1, T]."""
    if not (1 <= t <= sched.steps):
        raise GeneratorError(f"diffusion step {t} outside [1, {sched.steps}]")
    if x0.shape != noise.shape:
        raise GeneratorError(f"noise shape {noise.shape} != x0 {x0.shape}")
    ab = sched.alpha_bars[t - 1]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


# ---------------------------------------------------------------------------
# Model

@dataclass
class DiTConfig:
    blocks: int = 4
    heads: int = 8
    d_model: int = 128
    ffn: int = 2048
    slots_per_day: int = 48

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise GeneratorError(f"d_model {self.d_model} not divisible by "
                                 f"{self.heads} heads")


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """(batch,) integer steps -> (batch, dim) sin/cos features."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Stack of modulated transformer blocks predicting the clean latent."""

    def __init__(self, cfg: DiTConfig, seed: int = 0):
        self.cfg = cfg
        d = cfg.d_model
        rng = np.random.default_rng(seed)
        p: dict[str, nn.Parameter] = {}

        def lin(name, shape, zero=False):
            p[name] = nn.Parameter(np.zeros(shape) if zero else nn.xavier_init(shape, rng),
                                   name)

        # condition embedders
        lin("t_mlp/w1", (d, d)); lin("t_mlp/b1", (d,), zero=True)
        lin("t_mlp/w2", (d, d)); lin("t_mlp/b2", (d,), zero=True)
        lin("r0_proj", (N_CATEGORIES, d))
        lin("m_proj", (cfg.slots_per_day, d))
        lin("d_proj", (N_CATEGORIES, d))
        lin("in_proj", (d, d)); lin("in_bias", (d,), zero=True)
        p["pos_table"] = nn.Parameter(rng.normal(size=(64, d)) * 0.02, "pos_table")
        for b in range(cfg.blocks):
            pre = f"block{b}/"
            # modulation MLP: zero-init output so blocks start as identity
            lin(pre + "mod/w1", (d, d)); lin(pre + "mod/b1", (d,), zero=True)
            lin(pre + "mod/w2", (d, 6 * d), zero=True)
            lin(pre + "mod/b2", (6 * d,), zero=True)
            for w in ("wq", "wk", "wv", "wo"):
                lin(pre + "mhsa/" + w, (d, d))
            for w in ("wq", "wk", "wv"):
                lin(pre + "mhca/" + w, (d, d))
            # zero output projection keeps cross-attention silent at init
            lin(pre + "mhca/wo", (d, d), zero=True)
            lin(pre + "ffn/w1", (d, cfg.ffn)); lin(pre + "ffn/b1", (cfg.ffn,), zero=True)
            lin(pre + "ffn/w2", (cfg.ffn, d)); lin(pre + "ffn/b2", (d,), zero=True)
        lin("head/w", (d, d)); lin("head/b", (d,), zero=True)
        self.params = p

    # -- conditions ---------------------------------------------------------

    def embed_conditions(self, t: np.ndarray, r0_sem: np.ndarray,
                         m_seq: np.ndarray, d_seq: np.ndarray
                         ) -> tuple[nn.Tensor, nn.Tensor]:
        """Returns (cond vector (B, d), plan-step sequence (B, S, d)).

        t: (B,) diffusion steps; r0_sem: (B, 14); m_seq: (B, S, slots);
        d_seq: (B, S, 14).  Each plan-step embedding combines the temporal
        row, the semantic row, and a positional embedding so cross-attention
        can address individual steps.
        """
        p = self.params
        t_emb = nn.Tensor(sinusoidal_embedding(t, self.cfg.d_model))
        t_emb = nn.add(nn.matmul(t_emb, p["t_mlp/w1"]), p["t_mlp/b1"])
        t_emb = nn.add(nn.matmul(nn.gelu(t_emb), p["t_mlp/w2"]), p["t_mlp/b2"])
        r0 = nn.matmul(nn.Tensor(r0_sem), p["r0_proj"])
        m_emb = nn.matmul(nn.Tensor(m_seq), p["m_proj"])          # (B, S, d)
        d_emb = nn.matmul(nn.Tensor(d_seq), p["d_proj"])          # (B, S, d)
        m_pool = nn.reduce_mean(m_emb, axis=1)
        d_pool = nn.reduce_mean(d_emb, axis=1)
        cond = nn.add(nn.add(r0, m_pool), nn.add(d_pool, t_emb))
        pos = nn.embedding_lookup(p["pos_table"], np.arange(m_seq.shape[1]))
        steps = nn.add(nn.add(m_emb, d_emb), pos)
        return cond, steps

    def modulation_params(self, cond: nn.Tensor, block: int) -> list[nn.Tensor]:
        """Six (B, 1, d) modulation vectors from the fused condition."""
        p = self.params
        pre = f"block{block}/"
        h = nn.gelu(nn.add(nn.matmul(cond, p[pre + "mod/w1"]), p[pre + "mod/b1"]))
        mod = nn.add(nn.matmul(h, p[pre + "mod/w2"]), p[pre + "mod/b2"])
        d = self.cfg.d_model
        b = cond.shape[0]
        mod = nn.reshape(mod, (b, 6, d))
        return [nn.reshape(mod[:, i, :], (b, 1, d)) for i in range(6)]

    # -- blocks -------------------------------------------------------------

    @staticmethod
    def _adaln(x: nn.Tensor, gamma: nn.Tensor, beta: nn.Tensor) -> nn.Tensor:
        return nn.add(nn.mul(nn.layer_norm(x), nn.add(gamma, 1.0)), beta)

    def dit_block(self, x: nn.Tensor, cond: nn.Tensor, m_emb: nn.Tensor,
                  block: int) -> nn.Tensor:
        if x.shape[1] != m_emb.shape[1]:
            raise GeneratorError(f"latent length {x.shape[1]} != temporal plan "
                                 f"length {m_emb.shape[1]}")
        p = self.params
        pre = f"block{block}/"
        g1, b1, a1, g2, b2, a2 = self.modulation_params(cond, block)
        xn = self._adaln(x, g1, b1)
        attn = nn.multi_head_attention(
            xn, xn, xn,
            p[pre + "mhsa/wq"], p[pre + "mhsa/wk"], p[pre + "mhsa/wv"],
            p[pre + "mhsa/wo"], n_heads=self.cfg.heads)
        x1 = nn.add(nn.mul(a1, attn), x)
        ln1 = nn.layer_norm(x1)
        cross = nn.multi_head_attention(
            ln1, m_emb, m_emb,
            p[pre + "mhca/wq"], p[pre + "mhca/wk"], p[pre + "mhca/wv"],
            p[pre + "mhca/wo"], n_heads=self.cfg.heads)
        x2 = nn.add(cross, x1)
        h = self._adaln(x2, g2, b2)
        h = nn.gelu(nn.add(nn.matmul(h, p[pre + "ffn/w1"]), p[pre + "ffn/b1"]))
        h = nn.add(nn.matmul(h, p[pre + "ffn/w2"]), p[pre + "ffn/b2"])
        return nn.add(nn.mul(a2, h), x2)

    def forward(self, x_t: np.ndarray | nn.Tensor, t: np.ndarray,
                r0_sem: np.ndarray, m_seq: np.ndarray, d_seq: np.ndarray
                ) -> nn.Tensor:
        """Predict clean latents; all inputs batched on axis 0."""
        x = x_t if isinstance(x_t, nn.Tensor) else nn.Tensor(x_t)
        if x.shape[1] > self.params["pos_table"].shape[0]:
            raise GeneratorError(f"sequence length {x.shape[1]} exceeds "
                                 f"positional table")
        cond, m_emb = self.embed_conditions(t, r0_sem, m_seq, d_seq)
        pos = nn.embedding_lookup(self.params["pos_table"], np.arange(x.shape[1]))
        h = nn.add(nn.add(nn.matmul(x, self.params["in_proj"]),
                          self.params["in_bias"]), pos)
        for b in range(self.cfg.blocks):
            h = self.dit_block(h, cond, m_emb, b)
        return nn.add(nn.matmul(h, self.params["head/w"]), self.params["head/b"])


# ---------------------------------------------------------------------------
# Plan conditioning arrays

def plan_condition_arrays(plan: TravelPlan, r0_sem: np.ndarray,
                          seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-step plan matrices aligned with a latent sequence of ``seq_len``.

    Position 0 is the anchor stay (one-hot start slot, start-region profile);
    positions 1.. come from the plan, padded by repetition or truncated.
    """
    spd = plan.slots_per_day
    m = np.zeros((seq_len, spd))
    d = np.zeros((seq_len, N_CATEGORIES))
    m[0, plan.start_slot % spd] = 1.0
    d[0] = r0_sem
    for i in range(1, seq_len):
        j = min(i - 1, plan.steps - 1)
        if j < 0:
            raise GeneratorError("empty travel plan")
        m[i] = plan.temporal[j]
        d[i] = plan.semantic[j]
    return m, d


# ---------------------------------------------------------------------------
# Training

@dataclass
class GeneratorTrainReport:
    losses: list[float] = field(default_factory=list)


def train_generator(latents: np.ndarray, m_seqs: np.ndarray, d_seqs: np.ndarray,
                    r0_sems: np.ndarray, sched: DiffusionSchedule, cfg: DiTConfig,
                    steps: int = 2000, seed: int = 0, lr: float = 1e-3,
                    batch_size: int = 64) -> tuple[Denoiser, GeneratorTrainReport]:
    """Train the denoiser with clean-latent MSE under uniformly sampled steps.

    latents: (N, S, d); m_seqs: (N, S, slots); d_seqs: (N, S, 14);
    r0_sems: (N, 14).
    """
    n = len(latents)
    if not (len(m_seqs) == len(d_seqs) == len(r0_sems) == n):
        raise GeneratorError("latents and plan conditions must align 1:1")
    if n == 0:
        raise GeneratorError("empty latent dataset")
    model = Denoiser(cfg, seed=seed)
    opt = nn.Adam(list(model.params.values()), lr=lr)
    rng = np.random.default_rng(seed + 11)
    report = GeneratorTrainReport()
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        t = rng.integers(1, sched.steps + 1, size=len(idx))
        x0 = latents[idx]
        eps = rng.standard_normal(x0.shape)
        ab = sched.alpha_bars[t - 1][:, None, None]
        x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
        pred = model.forward(x_t, t, r0_sems[idx], m_seqs[idx], d_seqs[idx])
        loss = nn.mse(pred, nn.Tensor(x0))
        opt.zero_grad()
        nn.backward(loss)
        opt.step()
        report.losses.append(loss.item())
    return model, report


# ---------------------------------------------------------------------------
# Sampling

def sample_latents(model: Denoiser, sched: DiffusionSchedule,
                   r0_sems: np.ndarray, m_seqs: np.ndarray, d_seqs: np.ndarray,
                   seq_len: int, seed: int = 0,
                   anchor: np.ndarray | None = None) -> np.ndarray:
    """Ancestral sampling for a batch; deterministic per seed.

    When ``anchor`` (B, d_model) is given, position 0 is inpainted: at every
    step it is replaced by the known first-stay latent noised to the current
    level, so the remaining positions are denoised consistently with it.

    Returns (B, seq_len, d_model) latents.
    """
    b = len(r0_sems)
    rng = np.random.default_rng(seed)
    d = model.cfg.d_model
    x = rng.standard_normal((b, seq_len, d))
    for t in range(sched.steps, 0, -1):
        if anchor is not None:
            ab_t = sched.alpha_bars[t - 1]
            x[:, 0, :] = math.sqrt(ab_t) * anchor + \
                math.sqrt(1.0 - ab_t) * rng.standard_normal((b, d))
        ts = np.full(b, t)
        x0_hat = model.forward(x, ts, r0_sems, m_seqs, d_seqs).data.astype(np.float64)
        beta_t = sched.betas[t - 1]
        alpha_t = sched.alphas[t - 1]
        ab_t = sched.alpha_bars[t - 1]
        ab_prev = sched.alpha_bar_prev(t)
        mu = (math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)) * x0_hat + \
             (math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)) * x
        if t > 1:
            sigma = math.sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t))
            x = mu + sigma * rng.standard_normal(x.shape)
        else:
            x = mu
    if anchor is not None:
        x[:, 0, :] = anchor
    return x


def posterior_coefficients(t: int, sched: DiffusionSchedule) -> tuple[float, float, float]:
    """(coef on x0_hat, coef on x_t, sigma) of the reverse update at step t."""
    beta_t = sched.betas[t - 1]
    alpha_t = sched.alphas[t - 1]
    ab_t = sched.alpha_bars[t - 1]
    ab_prev = sched.alpha_bar_prev(t)
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    c1 = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    sigma = math.sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t)) if t > 1 else 0.0
    return c0, c1, sigma


# ---------------------------------------------------------------------------
# End-to-end generation

@dataclass
class GenerationModels:
    planner_backend: object
    encoder: SpatialEncoder
    decoder: CityDecoder
    denoiser: Denoiser
    schedule: DiffusionSchedule
    slotting: TimeSlotting
    k: int = 8


def generate_trajectory(start_region: int, start_time: int, role, city: CityMap,
                        models: GenerationModels, seed: int,
                        agent_id: str = "gen") -> Trajectory:
    """Plan, sample a latent sequence, decode regions, assign plan timestamps."""
    from . import planner as planner_mod

    slotting = models.slotting
    k = models.k
    start_slot = slotting.slot_of(start_time)
    try:
        pl = planner_mod.plan(start_slot, start_region, city, k, slotting,
                              models.planner_backend, role=role)
    except Exception as e:
        raise GeneratorError(f"planning stage failed: {e}") from e
    r0_sem = city.semantics_of(start_region)
    m, d = plan_condition_arrays(pl, r0_sem, k + 1)
    lat = sample_latents(models.denoiser, models.schedule, r0_sem[None],
                         m[None], d[None], seq_len=k + 1, seed=seed)[0]
    try:
        logits = models.decoder.decode(UnifiedRepresentation(lat, city.city_id))
    except Exception as e:
        raise GeneratorError(f"decoding stage failed: {e}") from e
    ids = [city.region_ids[i] for i in logits.argmax(axis=-1)]
    slot_s = slotting.slot_minutes * 60
    stays = [StayPoint(start_region, start_time)]
    for g, rid in zip(pl.argmax_slots(), ids[1:]):
        stays.append(StayPoint(rid, start_time + (g - start_slot) * slot_s))
    return Trajectory(agent_id=agent_id, city_id=city.city_id, stays=stays,
                      role=role.name if role is not None else None)
