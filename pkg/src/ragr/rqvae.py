"""Residual-quantization autoencoder over item-text embeddings.

Trains multi-level codebooks, assigns semantic IDs (SIDs) to items and
reviews, resolves SID collisions with an appended disambiguation index,
and reports collision statistics.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .embedding import EmbeddingMatrix
from .errors import (
    ConfigError,
    EmptyDatasetError,
    NumericError,
    ShapeError,
    TrainingError,
)


@dataclass(frozen=True)
class SemanticId:
    codes: tuple[int, ...]
    disambig: int | None = None

    @property
    def levels(self) -> int:
        return len(self.codes)


@dataclass
class QuantizeResult:
    codes: list[int]
    residuals: list[np.ndarray]  # r^(0) .. r^(M)
    quantized: np.ndarray


@dataclass
class RqVaeConfig:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [2048, 1024, 512, 256, 128, 64])
    code_dim: int = 32
    num_levels: int = 4
    codebook_size: int = 256
    beta_commit: float = 0.25
    rec_target: str = "input"  # "input" (decoder reconstruction) or "latent"

    def __post_init__(self) -> None:
        if self.num_levels < 1:
            raise ConfigError("num_levels must be >= 1")
        if self.codebook_size < 1:
            raise ConfigError("codebook_size must be >= 1")
        if self.rec_target not in ("input", "latent"):
            raise ConfigError(f"unknown rec_target {self.rec_target!r}")


def _mlp(dims: list[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _stable_argmin(dists: torch.Tensor) -> torch.Tensor:
    """Row-wise argmin with ties broken by the smallest index."""
    k = dists.shape[-1]
    min_vals = dists.min(dim=-1, keepdim=True).values
    idx = torch.arange(k, device=dists.device)
    candidates = torch.where(dists == min_vals, idx, torch.full_like(idx, k))
    return candidates.min(dim=-1).values


class RqVaeModel(nn.Module):
    def __init__(self, config: RqVaeConfig):
        super().__init__()
        self.config = config
        c = config
        self.encoder = _mlp([c.input_dim] + list(c.hidden_dims) + [c.code_dim])
        self.decoder = _mlp([c.code_dim] + list(reversed(c.hidden_dims)) + [c.input_dim])
        self.codebooks = nn.ParameterList(
            nn.Parameter(torch.zeros(c.codebook_size, c.code_dim))
            for _ in range(c.num_levels)
        )

    def encode(self, e: torch.Tensor) -> torch.Tensor:
        if e.shape[-1] != self.config.input_dim:
            raise ShapeError(
                f"embedding dim {e.shape[-1]} != encoder input dim {self.config.input_dim}"
            )
        return self.encoder(e)

    def decode(self, h: torch.Tensor) -> torch.Tensor:
        return self.decoder(h)

    def quantize_batch(
        self, h: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        """Greedy per-level nearest-codeword quantization with the loss
        bookkeeping of the tokenizer objective.

        Returns (codes, quantized_sum, code_loss, commit_loss, residuals)
        where the losses are per-sample sums over levels and residuals is
        [r^(0) .. r^(M)] (graph-carrying).
        """
        r = h
        qsum = torch.zeros_like(h)
        code_loss = torch.zeros(h.shape[0], dtype=h.dtype, device=h.device)
        commit_loss = torch.zeros_like(code_loss)
        codes = []
        residuals = [r]
        for cb in self.codebooks:
            if cb.shape[0] == 0:
                raise ConfigError("empty codebook")
            dists = (r.unsqueeze(1) - cb.unsqueeze(0)).pow(2).sum(-1)
            idx = _stable_argmin(dists)
            selected = cb[idx]
            code_loss = code_loss + (r.detach() - selected).pow(2).sum(-1)
            commit_loss = commit_loss + (r - selected.detach()).pow(2).sum(-1)
            qsum = qsum + selected
            r = r - selected
            residuals.append(r)
            codes.append(idx)
        return torch.stack(codes, dim=1), qsum, code_loss, commit_loss, residuals

    def loss_batch(
        self, e: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, list[torch.Tensor]]:
        """Per-sample (rec, code, commit) loss terms plus the selected
        codes and per-level residuals.

        rec uses the straight-through estimator through the decoder by
        default; with rec_target="latent" it is the plain latent-space
        quantization error.
        """
        h = self.encode(e)
        codes, qsum, code_loss, commit_loss, residuals = self.quantize_batch(h)
        if self.config.rec_target == "input":
            h_st = h + (qsum - h).detach()
            rec = (e - self.decode(h_st)).pow(2).sum(-1)
        else:
            rec = (h - qsum).pow(2).sum(-1)
        return rec, code_loss, commit_loss, codes, residuals


def encode(model: RqVaeModel, e: np.ndarray) -> np.ndarray:
    """Encode a single embedding vector to its latent."""
    with torch.no_grad():
        h = model.encode(torch.as_tensor(e, dtype=next(model.parameters()).dtype))
    return h.numpy()


def quantize(codebooks: list[np.ndarray], h: np.ndarray) -> QuantizeResult:
    """Greedy per-level quantization of a single latent vector.

    Ties are broken toward the smallest codeword index; computation runs
    in float64 so the telescoping identity r^(0) = quantized + r^(M)
    holds tightly.
    """
    r = np.asarray(h, dtype=np.float64)
    quantized = np.zeros_like(r)
    codes: list[int] = []
    residuals = [r.copy()]
    for cb in codebooks:
        cb = np.asarray(cb, dtype=np.float64)
        if cb.size == 0:
            raise ConfigError("empty codebook")
        if cb.shape[1] != r.shape[0]:
            raise ShapeError(f"codebook dim {cb.shape[1]} != latent dim {r.shape[0]}")
        dists = ((cb - r) ** 2).sum(axis=1)
        k = int(np.argmin(dists))  # np.argmin takes the first minimum
        codes.append(k)
        quantized = quantized + cb[k]
        r = r - cb[k]
        residuals.append(r.copy())
    return QuantizeResult(codes=codes, residuals=residuals, quantized=quantized)


def tokenizer_loss(model: RqVaeModel, e: np.ndarray) -> tuple[float, float, float, float]:
    """Evaluate (total, rec, code, commit) of the tokenizer objective on a
    single embedding vector."""
    dtype = next(model.parameters()).dtype
    batch = torch.as_tensor(e, dtype=dtype).unsqueeze(0)
    with torch.no_grad():
        rec, code, commit, _, _ = model.loss_batch(batch)
    for name, value in (("rec", rec), ("code", code), ("commit", commit)):
        if not torch.isfinite(value).all():
            raise NumericError(f"non-finite value in loss stage {name!r}")
    rec_f, code_f, commit_f = float(rec[0]), float(code[0]), float(commit[0])
    total = rec_f + code_f + model.config.beta_commit * commit_f
    return total, rec_f, code_f, commit_f


def kmeans_init(vectors: np.ndarray, k: int, iters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm from a seeded distinct-row initialization.

    Empty clusters are re-seeded to the point farthest from its assigned
    centroid. iters=0 returns the initial selection unchanged.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if n < k:
        raise ConfigError(f"k-means needs at least k={k} rows, got {n}")
    rng = np.random.default_rng(seed)
    centroids = vectors[rng.choice(n, size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = (
            (vectors**2).sum(1, keepdims=True)
            - 2.0 * vectors @ centroids.T
            + (centroids**2).sum(1)
        )
        assign = d2.argmin(axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = vectors[assign == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
        empty = [c for c in range(k) if not (assign == c).any()]
        if empty:
            point_dist = d2[np.arange(n), assign]
            order = np.argsort(-point_dist)
            for j, c in enumerate(empty):
                new_centroids[c] = vectors[order[j]]
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    return centroids


@dataclass
class TokenizerTrainConfig:
    lr: float = 1e-3
    batch_size: int = 2048
    epochs: int = 100
    weight_decay: float = 1e-4
    seed: int = 0
    kmeans_iters: int = 100


def _init_codebooks_kmeans(
    model: RqVaeModel, first_batch: torch.Tensor, cfg: TokenizerTrainConfig
) -> None:
    with torch.no_grad():
        r = model.encode(first_batch).double().numpy()
    for m, cb in enumerate(model.codebooks):
        centroids = kmeans_init(r, model.config.codebook_size, cfg.kmeans_iters, cfg.seed + m)
        with torch.no_grad():
            cb.copy_(torch.as_tensor(centroids, dtype=cb.dtype))
        d2 = ((r[:, None, :] - centroids[None]) ** 2).sum(-1)
        r = r - centroids[d2.argmin(axis=1)]


def train_tokenizer(
    model: RqVaeModel, embeddings: EmbeddingMatrix, config: TokenizerTrainConfig
) -> list[dict[str, float]]:
    """Train the tokenizer with AdamW on the quantization objective.

    Codebooks are k-means-initialized per level over the first batch's
    residuals. A codeword unselected for a full epoch is re-seeded to a
    random residual from that epoch. Returns the per-epoch loss history.
    """
    if len(embeddings) == 0:
        raise EmptyDatasetError("no embeddings to train on")
    cfg = config
    data = torch.as_tensor(embeddings.data, dtype=torch.float32)
    n = data.shape[0]
    gen = torch.Generator().manual_seed(cfg.seed)
    reseed_rng = np.random.default_rng(cfg.seed + 0x5EED)

    first_perm = torch.randperm(n, generator=gen)
    _init_codebooks_kmeans(model, data[first_perm[: min(cfg.batch_size, n)]], cfg)

    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    beta = model.config.beta_commit
    history: list[dict[str, float]] = []
    perm = first_perm
    for epoch in range(cfg.epochs):
        if epoch > 0:
            perm = torch.randperm(n, generator=gen)
        used = [
            np.zeros(model.config.codebook_size, dtype=bool)
            for _ in range(model.config.num_levels)
        ]
        residual_pool: list[list[np.ndarray]] = [[] for _ in range(model.config.num_levels)]
        sums = {"rec": 0.0, "code": 0.0, "commit": 0.0}
        for start in range(0, n, cfg.batch_size):
            batch = data[perm[start : start + cfg.batch_size]]
            rec, code, commit, codes, residuals = model.loss_batch(batch)
            loss = (rec + code + beta * commit).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["rec"] += float(rec.detach().double().sum())
            sums["code"] += float(code.detach().double().sum())
            sums["commit"] += float(commit.detach().double().sum())
            for m in range(model.config.num_levels):
                used[m][codes[:, m].numpy()] = True
                residual_pool[m].append(residuals[m].detach().numpy())
        rec_m, code_m, commit_m = (sums[k] / n for k in ("rec", "code", "commit"))
        history.append(
            {
                "epoch": float(epoch),
                "rec": rec_m,
                "code": code_m,
                "commit": commit_m,
                "total": rec_m + code_m + beta * commit_m,
            }
        )
        # revive codewords that went unselected for the whole epoch
        for m, cb in enumerate(model.codebooks):
            dead = np.flatnonzero(~used[m])
            if len(dead):
                pool = np.concatenate(residual_pool[m], axis=0)
                picks = reseed_rng.integers(0, pool.shape[0], size=len(dead))
                with torch.no_grad():
                    cb[torch.as_tensor(dead)] = torch.as_tensor(
                        pool[picks], dtype=cb.dtype
                    )
    return history


def assign_sids(model: RqVaeModel, embeddings: EmbeddingMatrix) -> dict[str, SemanticId]:
    """Map every key through encode + quantize; no disambiguation yet."""
    codebooks = [cb.detach().double().numpy() for cb in model.codebooks]
    out: dict[str, SemanticId] = {}
    with torch.no_grad():
        data = torch.as_tensor(embeddings.data, dtype=torch.float32)
        latents = model.encode(data).double().numpy()
    for key, h in zip(embeddings.keys, latents):
        result = quantize(codebooks, h)
        out[key] = SemanticId(codes=tuple(result.codes))
    return out


def disambiguate_collisions(sids: dict[str, SemanticId]) -> dict[str, SemanticId]:
    """Assign disambig = 0,1,2,... within each colliding code tuple, in
    lexicographic key order; unique tuples get disambig 0."""
    groups: dict[tuple[int, ...], list[str]] = {}
    for key, sid in sids.items():
        groups.setdefault(sid.codes, []).append(key)
    out: dict[str, SemanticId] = {}
    for codes, keys in groups.items():
        for d, key in enumerate(sorted(keys)):
            out[key] = SemanticId(codes=codes, disambig=d)
    return out


def collision_rate(sids: dict[str, SemanticId]) -> float:
    """Fraction of keys whose base code tuple is shared by >= 2 keys."""
    if not sids:
        raise EmptyDatasetError("collision rate undefined on an empty SID map")
    counts: dict[tuple[int, ...], int] = {}
    for sid in sids.values():
        counts[sid.codes] = counts.get(sid.codes, 0) + 1
    colliding = sum(c for c in counts.values() if c >= 2)
    return colliding / len(sids)


def save_sid_map(sids: dict[str, SemanticId], path: str | Path) -> None:
    levels = next(iter(sids.values())).levels if sids else 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, delimiter="\t", lineterminator="\n")
        writer.writerow(["key"] + [f"code_{m + 1}" for m in range(levels)] + ["disambig"])
        for key in sorted(sids):
            sid = sids[key]
            disambig = "" if sid.disambig is None else str(sid.disambig)
            writer.writerow([key, *map(str, sid.codes), disambig])


def load_sid_map(path: str | Path) -> dict[str, SemanticId]:
    out: dict[str, SemanticId] = {}
    with open(path, encoding="utf-8") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader)
        levels = len(header) - 2
        for row in reader:
            codes = tuple(int(c) for c in row[1 : 1 + levels])
            disambig = int(row[-1]) if row[-1] != "" else None
            out[row[0]] = SemanticId(codes=codes, disambig=disambig)
    return out


def save_rqvae(model: RqVaeModel, path: str | Path) -> None:
    c = model.config
    tensors: dict[str, np.ndarray] = {
        "meta/geometry": np.array(
            [c.input_dim, c.code_dim, c.num_levels, c.codebook_size], dtype=np.float32
        ),
        "meta/hidden_dims": np.array(c.hidden_dims, dtype=np.float32),
        "meta/beta_commit": np.array([c.beta_commit], dtype=np.float32),
        "meta/rec_target": np.array([0.0 if c.rec_target == "input" else 1.0], dtype=np.float32),
    }
    for name, param in model.state_dict().items():
        tensors[f"param/{name}"] = param.detach().numpy()
    checkpoint.save_tensors(path, tensors)


def load_rqvae(path: str | Path) -> RqVaeModel:
    tensors = checkpoint.load_tensors(path)
    input_dim, code_dim, num_levels, codebook_size = (
        int(v) for v in tensors["meta/geometry"]
    )
    config = RqVaeConfig(
        input_dim=input_dim,
        hidden_dims=[int(v) for v in tensors["meta/hidden_dims"]],
        code_dim=code_dim,
        num_levels=num_levels,
        codebook_size=codebook_size,
        beta_commit=float(tensors["meta/beta_commit"][0]),
        rec_target="input" if tensors["meta/rec_target"][0] == 0.0 else "latent",
    )
    model = RqVaeModel(config)
    state = {
        name[len("param/") :]: torch.as_tensor(arr)
        for name, arr in tensors.items()
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    return model
