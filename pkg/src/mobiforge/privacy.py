"""Privacy auditing: sequence uniqueness, membership inference, utility.

Uniqueness compares generated region sequences to real ones with normalized
Levenshtein similarity and flags near-duplicates. The membership-inference
harness trains a from-scratch logistic-regression attacker on trajectory
statistics plus similarity-to-generated features, scoring balanced accuracy
on held-out members and non-members. The utility probe is a shallow
next-region classifier trained on real/synthetic mixes and evaluated on
held-out real data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TimeSlotting, Trajectory
from .geo import CityMap
from .metrics import (MetricError, trajectory_distances, trajectory_locnums,
                      trajectory_radii)


class PrivacyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Edit distance & similarity

def levenshtein(a, b) -> int:
    """Unit-cost insert/delete/substitute edit distance (two-row DP)."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def similarity(a, b) -> float:
    """1 - edit_distance / max(len); 1 for identical sequences."""
    a, b = list(a), list(b)
    n = max(len(a), len(b))
    if n == 0:
        raise PrivacyError("similarity of two empty sequences is undefined")
    return 1.0 - levenshtein(a, b) / n


def _region_seq(tr: Trajectory) -> list[int]:
    return [s.region_id for s in tr.stays]


# ---------------------------------------------------------------------------
# Uniqueness test

@dataclass
class SimilarityReport:
    top1: np.ndarray          # per generated trajectory
    top3_mean: np.ndarray
    top5_mean: np.ndarray
    alarm_threshold: float
    alarm_fraction: float
    histogram_edges: np.ndarray
    histogram_mass: np.ndarray

    def summary(self) -> dict:
        return {
            "top1_mean": float(self.top1.mean()),
            "top3_mean": float(self.top3_mean.mean()),
            "top5_mean": float(self.top5_mean.mean()),
            "alarm_threshold": self.alarm_threshold,
            "alarm_fraction": self.alarm_fraction,
            "n_generated": int(len(self.top1)),
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "uniqueness.json").write_text(
            json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        import csv
        with open(out / "similarity_hist.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["bin_left", "bin_right", "mass"])
            for left, right, m in zip(self.histogram_edges[:-1],
                                      self.histogram_edges[1:],
                                      self.histogram_mass):
                w.writerow([f"{left:.10g}", f"{right:.10g}", f"{m:.10g}"])


def uniqueness_test(generated: list[Trajectory], real: list[Trajectory],
                    k: int = 5, alarm_threshold: float = 0.8,
                    bins: int = 20) -> SimilarityReport:
    """Top-k nearest-real similarity statistics per generated trajectory."""
    if not generated or not real:
        raise PrivacyError("uniqueness test needs non-empty datasets")
    real_seqs = [_region_seq(t) for t in real]
    top1, top3, top5 = [], [], []
    all_scores = []
    for g in generated:
        gs = _region_seq(g)
        scores = np.sort([similarity(gs, rs) for rs in real_seqs])[::-1]
        top1.append(scores[0])
        top3.append(scores[:min(3, k, len(scores))].mean())
        top5.append(scores[:min(5, k, len(scores))].mean())
        all_scores.append(scores[0])
    top1 = np.array(top1)
    counts, edges = np.histogram(all_scores, bins=bins, range=(0.0, 1.0))
    return SimilarityReport(
        top1=top1,
        top3_mean=np.array(top3),
        top5_mean=np.array(top5),
        alarm_threshold=alarm_threshold,
        alarm_fraction=float(np.mean(top1 > alarm_threshold)),
        histogram_edges=edges,
        histogram_mass=counts / counts.sum(),
    )


# ---------------------------------------------------------------------------
# Attack features

def mia_features(tr: Trajectory, city: CityMap,
                 slotting: TimeSlotting | None = None) -> np.ndarray:
    """[length, distinct regions, mean step km, radius km, start slot,
    end slot, top-region visit share]."""
    slotting = slotting or TimeSlotting()
    seq = _region_seq(tr)
    counts = {}
    for r in seq:
        counts[r] = counts.get(r, 0) + 1
    return np.array([
        float(len(seq)),
        float(trajectory_locnums([tr])[0]),
        float(trajectory_distances([tr], city)[0]),
        float(trajectory_radii([tr], city)[0]),
        float(slotting.slot_of(tr.stays[0].timestamp)),
        float(slotting.slot_of(tr.stays[-1].timestamp)),
        max(counts.values()) / len(seq),
    ])


# ---------------------------------------------------------------------------
# Logistic-regression attacker

class LogisticAttacker:
    """Batch-gradient logistic regression over standardized features."""

    def __init__(self, lr: float = 0.5, epochs: int = 300, seed: int = 0):
        self.lr = lr
        self.epochs = epochs
        self.seed = seed
        self.w = None
        self.b = 0.0
        self._mean = None
        self._std = None

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        return (x - self._mean) / self._std

    def train(self, x: np.ndarray, y: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if set(np.unique(y)) != {0.0, 1.0}:
            raise PrivacyError("attacker needs both classes in the training set")
        self._mean = x.mean(axis=0)
        self._std = np.where(x.std(axis=0) > 1e-12, x.std(axis=0), 1.0)
        xs = self._standardize(x)
        rng = np.random.default_rng(self.seed)
        self.w = rng.normal(scale=0.01, size=x.shape[1])
        self.b = 0.0
        for _ in range(self.epochs):
            p = 1.0 / (1.0 + np.exp(-(xs @ self.w + self.b)))
            g = p - y
            self.w -= self.lr * (xs.T @ g) / len(y)
            self.b -= self.lr * float(g.mean())
        if not np.all(np.isfinite(self.w)):
            raise PrivacyError("attacker weights diverged")

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.w is None:
            raise PrivacyError("attacker is not trained")
        xs = self._standardize(np.asarray(x, dtype=np.float64))
        return 1.0 / (1.0 + np.exp(-(xs @ self.w + self.b)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.predict_proba(x) >= 0.5).astype(int)


# ---------------------------------------------------------------------------
# Membership inference

@dataclass
class AttackReport:
    classifier: str
    success_rate: float
    n_samples: int

    def __post_init__(self):
        if not (0.0 <= self.success_rate <= 1.0):
            raise PrivacyError(f"success_rate {self.success_rate} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"classifier": self.classifier,
                           "success_rate": self.success_rate,
                           "n_samples": self.n_samples},
                          indent=2, sort_keys=True)


def _attack_features(trajs: list[Trajectory], generated: list[Trajectory],
                     city: CityMap, slotting: TimeSlotting,
                     sim_subsample: int, rng: np.random.Generator) -> np.ndarray:
    gen_seqs = [_region_seq(g) for g in generated]
    if sim_subsample and len(gen_seqs) > sim_subsample:
        pick = rng.choice(len(gen_seqs), size=sim_subsample, replace=False)
        gen_seqs = [gen_seqs[i] for i in pick]
    rows = []
    for tr in trajs:
        seq = _region_seq(tr)
        sims = np.sort([similarity(seq, g) for g in gen_seqs])[::-1]
        extra = [sims[0], sims[:3].mean(), sims.mean()]
        rows.append(np.concatenate([mia_features(tr, city, slotting), extra]))
    return np.array(rows)


def membership_inference_attack(members: list[Trajectory],
                                nonmembers: list[Trajectory],
                                generated: list[Trajectory],
                                city: CityMap,
                                slotting: TimeSlotting | None = None,
                                attacker: LogisticAttacker | None = None,
                                seed: int = 0,
                                sim_subsample: int = 200) -> AttackReport:
    """Balanced-accuracy membership attack against a generator's output.

    Half of each class trains the attacker; the other half is scored.
    Features are per-trajectory statistics plus similarity to the generated
    set (optionally subsampled for tractability).
    """
    if not members or not nonmembers or not generated:
        raise PrivacyError("attack needs non-empty member/non-member/generated sets")
    n_m, n_n = len(members), len(nonmembers)
    if abs(n_m - n_n) / max(n_m, n_n) > 0.10:
        raise PrivacyError(f"class imbalance {n_m} vs {n_n} exceeds 10%")
    slotting = slotting or TimeSlotting()
    attacker = attacker or LogisticAttacker(seed=seed)
    rng = np.random.default_rng(seed)
    xm = _attack_features(members, generated, city, slotting, sim_subsample, rng)
    xn = _attack_features(nonmembers, generated, city, slotting, sim_subsample, rng)
    pm, pn = rng.permutation(n_m), rng.permutation(n_n)
    hm, hn = n_m // 2, n_n // 2
    x_tr = np.vstack([xm[pm[:hm]], xn[pn[:hn]]])
    y_tr = np.concatenate([np.ones(hm), np.zeros(hn)])
    attacker.train(x_tr, y_tr)
    acc_m = float(np.mean(attacker.predict(xm[pm[hm:]]) == 1))
    acc_n = float(np.mean(attacker.predict(xn[pn[hn:]]) == 0))
    return AttackReport(classifier="logistic_regression",
                        success_rate=0.5 * (acc_m + acc_n),
                        n_samples=(n_m - hm) + (n_n - hn))


# ---------------------------------------------------------------------------
# Downstream utility probe

@dataclass
class UtilityReport:
    mix_ratios: list[float]
    accuracies: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"mix_ratios": self.mix_ratios,
                           "accuracies": self.accuracies},
                          indent=2, sort_keys=True)


def _transition_examples(trajs: list[Trajectory], city: CityMap,
                         slotting: TimeSlotting) -> tuple[np.ndarray, np.ndarray]:
    idx = {rid: k for k, rid in enumerate(city.region_ids)}
    n, spd = city.n_regions, slotting.slots_per_day
    xs, ys = [], []
    for tr in trajs:
        for a, b in zip(tr.stays[:-1], tr.stays[1:]):
            row = np.zeros(n + spd)
            row[idx[a.region_id]] = 1.0
            row[n + slotting.slot_of(b.timestamp)] = 1.0
            xs.append(row)
            ys.append(idx[b.region_id])
    if not xs:
        raise PrivacyError("no transitions available for the utility probe")
    return np.array(xs), np.array(ys)


def _train_softmax_probe(x: np.ndarray, y: np.ndarray, n_classes: int,
                         epochs: int = 150, lr: float = 1.0,
                         seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.01, size=(x.shape[1], n_classes))
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        z = x @ w
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * x.T @ (p - onehot) / len(y)
    return w


def utility_probe(real_train: list[Trajectory], synthetic: list[Trajectory],
                  real_test: list[Trajectory], city: CityMap,
                  mix_ratios=(0.0, 0.5, 1.0),
                  slotting: TimeSlotting | None = None,
                  seed: int = 0) -> UtilityReport:
    """Next-region accuracy of a shallow probe per synthetic mix ratio.

    A ratio r trains on a pool the size of real_train with round(r*n)
    synthetic transitions substituted in; accuracy is top-1 on real_test.
    """
    slotting = slotting or TimeSlotting()
    x_real, y_real = _transition_examples(real_train, city, slotting)
    x_syn, y_syn = _transition_examples(synthetic, city, slotting)
    x_test, y_test = _transition_examples(real_test, city, slotting)
    rng = np.random.default_rng(seed)
    n = len(x_real)
    report = UtilityReport(mix_ratios=list(mix_ratios))
    for r in mix_ratios:
        if not (0.0 <= r <= 1.0):
            raise PrivacyError(f"mix ratio {r} outside [0, 1]")
        k = round(r * n)
        si = rng.choice(len(x_syn), size=k, replace=k > len(x_syn))
        ri = rng.permutation(n)[:n - len(si)]
        x = np.vstack([x_real[ri], x_syn[si]]) if len(si) else x_real[ri]
        y = np.concatenate([y_real[ri], y_syn[si]]) if len(si) else y_real[ri]
        w = _train_softmax_probe(x, y, city.n_regions, seed=seed)
        acc = float(np.mean((x_test @ w).argmax(axis=1) == y_test))
        report.accuracies.append(acc)
    return report
