"""Unified spatial embedding: shared gated-TCN encoder, per-city decoders.

The encoder reads a sequence of POI distributions and produces a city-agnostic
latent sequence (one 128-dim vector per stay). Per layer the representation is
a gated dilated causal convolution with a residual path, and each layer's
activation is additionally injected (via a 1x1 projection) into the next
layer's input so coarse and fine temporal scales mix. Lightweight feed-forward
decoders map latents back to region logits of one specific city; adapting to a
new city trains only a fresh decoder against a frozen encoder.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Trajectory, trajectory_to_poi_sequence
from .geo import CityMap, N_CATEGORIES


class EmbeddingError(RuntimeError):
    pass


@dataclass
class EncoderConfig:
    layers: int = 3
    hidden: int = 32
    kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    out_dim: int = 128

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise EmbeddingError(f"kernel must be odd, got {self.kernel}")
        if len(self.dilations) != self.layers:
            raise EmbeddingError("need one dilation per layer")


@dataclass
class UnifiedRepresentation:
    latents: np.ndarray  # (seq_len, out_dim)
    source_city: str


class SpatialEncoder:
    """Gated dilated-TCN encoder with cross-layer correlation injection."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p: dict[str, nn.Parameter] = {}
        in_ch = N_CATEGORIES
        for l in range(cfg.layers):
            p[f"l{l}/w_ker"] = nn.Parameter(
                nn.xavier_init((cfg.kernel, in_ch, cfg.hidden), rng), f"l{l}/w_ker")
            p[f"l{l}/b_ker"] = nn.Parameter(np.zeros(cfg.hidden), f"l{l}/b_ker")
            p[f"l{l}/w_g"] = nn.Parameter(
                nn.xavier_init((cfg.kernel, in_ch, cfg.hidden), rng), f"l{l}/w_g")
            p[f"l{l}/b_g"] = nn.Parameter(np.zeros(cfg.hidden), f"l{l}/b_g")
            if in_ch != cfg.hidden:
                # 1x1 projection for the residual path on channel mismatch
                p[f"l{l}/w_res"] = nn.Parameter(
                    nn.xavier_init((in_ch, cfg.hidden), rng), f"l{l}/w_res")
            if l + 1 < cfg.layers:
                p[f"l{l}/w_inject"] = nn.Parameter(
                    nn.xavier_init((cfg.hidden, cfg.hidden), rng), f"l{l}/w_inject")
            in_ch = cfg.hidden
        p["w_out"] = nn.Parameter(nn.xavier_init((cfg.hidden, cfg.out_dim), rng), "w_out")
        p["b_out"] = nn.Parameter(np.zeros(cfg.out_dim), "b_out")
        self.params = p

    def forward(self, poi_seq: nn.Tensor) -> nn.Tensor:
        """(batch, seq, 14) POI sequences -> (batch, seq, out_dim) latents."""
        if poi_seq.shape[-1] != N_CATEGORIES:
            raise EmbeddingError(f"expected {N_CATEGORIES}-dim POI vectors, "
                                 f"got {poi_seq.shape}")
        cfg = self.cfg
        x = poi_seq
        inject = None
        for l in range(cfg.layers):
            conv = nn.dilated_causal_conv1d(x, self.params[f"l{l}/w_ker"],
                                            self.params[f"l{l}/b_ker"],
                                            dilation=cfg.dilations[l])
            gate = nn.sigmoid(nn.dilated_causal_conv1d(
                x, self.params[f"l{l}/w_g"], self.params[f"l{l}/b_g"],
                dilation=cfg.dilations[l]))
            res = x
            if f"l{l}/w_res" in self.params:
                res = nn.matmul(x, self.params[f"l{l}/w_res"])
            out = nn.add(nn.mul(conv, gate), res)
            if inject is not None:
                out = nn.add(out, inject)
            if l + 1 < cfg.layers:
                inject = nn.matmul(out, self.params[f"l{l}/w_inject"])
            x = out
        return nn.add(nn.matmul(x, self.params["w_out"]), self.params["b_out"])

    def encode(self, poi_seq: list[np.ndarray], source_city: str = "synthetic"
               ) -> UnifiedRepresentation:
        batch = nn.Tensor(np.stack(poi_seq)[None, :, :])
        out = self.forward(batch)
        return UnifiedRepresentation(latents=out.data[0].copy(),
                                     source_city=source_city)

    def encode_batch(self, sequences: np.ndarray) -> np.ndarray:
        """(n, seq, 14) -> (n, seq, out_dim), no gradient bookkeeping needed."""
        return self.forward(nn.Tensor(sequences)).data.copy()

    def state(self) -> dict[str, nn.Parameter]:
        return self.params


class CityDecoder:
    """Two-layer feed-forward head mapping latents to region logits."""

    HIDDEN = 256

    def __init__(self, city_id: str, n_regions: int, latent_dim: int = 128,
                 seed: int = 0):
        self.city_id = city_id
        self.n_regions = n_regions
        rng = np.random.default_rng(seed)
        self.params = {
            f"decoder/{city_id}/w1": nn.Parameter(
                nn.xavier_init((latent_dim, self.HIDDEN), rng), f"decoder/{city_id}/w1"),
            f"decoder/{city_id}/b1": nn.Parameter(
                np.zeros(self.HIDDEN), f"decoder/{city_id}/b1"),
            f"decoder/{city_id}/w2": nn.Parameter(
                nn.xavier_init((self.HIDDEN, n_regions), rng), f"decoder/{city_id}/w2"),
            f"decoder/{city_id}/b2": nn.Parameter(
                np.zeros(n_regions), f"decoder/{city_id}/b2"),
        }
        self._w1, self._b1, self._w2, self._b2 = (
            self.params[f"decoder/{city_id}/{k}"] for k in ("w1", "b1", "w2", "b2"))

    def forward(self, latents: nn.Tensor) -> nn.Tensor:
        h = nn.gelu(nn.add(nn.matmul(latents, self._w1), self._b1))
        return nn.add(nn.matmul(h, self._w2), self._b2)

    def decode(self, rep: UnifiedRepresentation) -> np.ndarray:
        """Per-step region logits, shape (seq, n_regions)."""
        if rep.latents.shape[-1] != self._w1.shape[0]:
            raise EmbeddingError(f"latent dim {rep.latents.shape[-1]} != "
                                 f"decoder input {self._w1.shape[0]}")
        return self.forward(nn.Tensor(rep.latents)).data.copy()

    def decode_batch(self, latents: np.ndarray) -> np.ndarray:
        return self.forward(nn.Tensor(latents)).data.copy()


def decode_regions(rep: UnifiedRepresentation, dec: CityDecoder,
                   region_ids: list[int]) -> list[int]:
    """Argmax region ids (decoder logits index into region_id order)."""
    logits = dec.decode(rep)
    return [region_ids[i] for i in logits.argmax(axis=-1)]


# ---------------------------------------------------------------------------
# Training

@dataclass
class AutoencoderReport:
    losses: list[float] = field(default_factory=list)
    accuracy_per_city: dict[str, float] = field(default_factory=dict)


def _dataset_arrays(trajs: list[Trajectory], city: CityMap):
    """POI sequences and per-step region-index targets for one city."""
    index_of = {rid: i for i, rid in enumerate(city.region_ids)}
    seqs, targets = [], []
    for tr in trajs:
        seqs.append(np.stack(trajectory_to_poi_sequence(tr, city)))
        targets.append([index_of[s.region_id] for s in tr.stays])
    return np.stack(seqs), np.array(targets)


def train_autoencoder(datasets: dict[str, tuple[list[Trajectory], CityMap]],
                      cfg: EncoderConfig, epochs: int = 30, seed: int = 0,
                      lr: float = 1e-3, batch_size: int = 64,
                      ) -> tuple[SpatialEncoder, dict[str, CityDecoder], AutoencoderReport]:
    """Jointly train a shared encoder and one decoder head per city.

    Objective: per-step cross-entropy of decode(encode(poi_seq)) against the
    true region indices.
    """
    if not datasets:
        raise EmbeddingError("no training datasets")
    encoder = SpatialEncoder(cfg, seed=seed)
    decoders = {cid: CityDecoder(cid, city.n_regions, cfg.out_dim, seed=seed + 1 + i)
                for i, (cid, (_, city)) in enumerate(sorted(datasets.items()))}
    arrays = {cid: _dataset_arrays(trajs, city)
              for cid, (trajs, city) in datasets.items()}

    params = list(encoder.params.values())
    for dec in decoders.values():
        params += list(dec.params.values())
    opt = nn.Adam(params, lr=lr)
    rng = np.random.default_rng(seed + 7)
    report = AutoencoderReport()
    for _ in range(epochs):
        for cid in sorted(arrays):
            seqs, targets = arrays[cid]
            order = rng.permutation(len(seqs))
            for lo in range(0, len(seqs), batch_size):
                idx = order[lo:lo + batch_size]
                latents = encoder.forward(nn.Tensor(seqs[idx]))
                logits = decoders[cid].forward(latents)
                b, s, r = logits.shape
                flat = nn.reshape(logits, (b * s, r))
                loss = nn.cross_entropy(flat, targets[idx].reshape(-1))
                opt.zero_grad()
                nn.backward(loss)
                opt.step()
                report.losses.append(loss.item())
    for cid in sorted(arrays):
        seqs, targets = arrays[cid]
        report.accuracy_per_city[cid] = reconstruction_accuracy(
            encoder, decoders[cid], seqs, targets)
    return encoder, decoders, report


def reconstruction_accuracy(encoder: SpatialEncoder, decoder: CityDecoder,
                            seqs: np.ndarray, targets: np.ndarray) -> float:
    logits = decoder.decode_batch(encoder.encode_batch(seqs))
    return float((logits.argmax(axis=-1) == targets).mean())


def adapt_new_city(encoder: SpatialEncoder, trajs: list[Trajectory],
                   city: CityMap, cfg: EncoderConfig, epochs: int = 30,
                   seed: int = 0, lr: float = 1e-3, batch_size: int = 64,
                   ) -> tuple[CityDecoder, AutoencoderReport]:
    """Train only a fresh decoder for an unseen city; the encoder is frozen.

    Encoder parameters are asserted bitwise unchanged afterwards.
    """
    if not trajs:
        raise EmbeddingError("empty adaptation set")
    before = {k: v.data.copy() for k, v in encoder.params.items()}
    seqs, targets = _dataset_arrays(trajs, city)
    latents = encoder.encode_batch(seqs)  # frozen: computed outside the graph
    decoder = CityDecoder(city.city_id, city.n_regions, cfg.out_dim, seed=seed)
    opt = nn.Adam(list(decoder.params.values()), lr=lr)
    rng = np.random.default_rng(seed + 3)
    report = AutoencoderReport()
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        for lo in range(0, len(seqs), batch_size):
            idx = order[lo:lo + batch_size]
            logits = decoder.forward(nn.Tensor(latents[idx]))
            b, s, r = logits.shape
            loss = nn.cross_entropy(nn.reshape(logits, (b * s, r)),
                                    targets[idx].reshape(-1))
            opt.zero_grad()
            nn.backward(loss)
            opt.step()
            report.losses.append(loss.item())
    for k, v in encoder.params.items():
        if not np.array_equal(before[k], v.data):
            raise EmbeddingError(f"encoder parameter {k} changed during adaptation")
    report.accuracy_per_city[city.city_id] = reconstruction_accuracy(
        encoder, decoder, seqs, targets)
    return decoder, report
