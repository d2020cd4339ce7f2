"""Small encoder-decoder transformer over the SID token vocabulary.

Trained with teacher forcing on the unified next-item / next-review
generation objective; scores arbitrary target sequences by summed token
log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import ShapeError, TrainingError
from .sequence import BOS, PAD, TrainingInstance

NEG_INF = torch.finfo(torch.float32).min / 2


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_ff: int | None = None  # defaults to 4 * d_model
    max_positions: int = 256
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ShapeError("d_model must be divisible by n_heads")


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key_value, attn_mask):
        # attn_mask: additive, broadcastable to (B, heads, Tq, Tk)
        b, tq, _ = query.shape
        tk = key_value.shape[1]
        q = self.q_proj(query).view(b, tq, self.n_heads, self.d_head).transpose(1, 2)
        k = self.k_proj(key_value).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        v = self.v_proj(key_value).view(b, tk, self.n_heads, self.d_head).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if attn_mask is not None:
            scores = scores + attn_mask
        weights = self.dropout(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(b, tq, -1)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, d_ff), nn.ReLU(), nn.Dropout(dropout), nn.Linear(d_ff, d_model)
        )

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask):
        h = self.ln1(x)
        x = x + self.dropout(self.attn(h, h, pad_mask))
        x = x + self.dropout(self.ff(self.ln2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, causal_mask, mem_mask):
        h = self.ln1(x)
        x = x + self.dropout(self.self_attn(h, h, causal_mask))
        x = x + self.dropout(self.cross_attn(self.ln2(x), memory, mem_mask))
        x = x + self.dropout(self.ff(self.ln3(x)))
        return x


def _pad_key_mask(tokens: torch.Tensor) -> torch.Tensor:
    """Additive mask hiding PAD keys: shape (B, 1, 1, T)."""
    mask = torch.zeros(tokens.shape, dtype=torch.float32, device=tokens.device)
    mask[tokens == PAD] = NEG_INF
    return mask[:, None, None, :]


class GenRecModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        cfg = config
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_positions, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers_enc))
        self.enc_ln = nn.LayerNorm(cfg.d_model)
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers_dec))
        self.dec_ln = nn.LayerNorm(cfg.d_model)
        self.out_proj = nn.Linear(cfg.d_model, cfg.vocab_size)

    def _check_len(self, t: int) -> None:
        if t > self.config.max_positions:
            raise ShapeError(f"sequence length {t} exceeds max_positions {self.config.max_positions}")

    def _embed(self, tokens: torch.Tensor) -> torch.Tensor:
        self._check_len(tokens.shape[1])
        pos = torch.arange(tokens.shape[1], device=tokens.device)
        return self.drop(self.tok_emb(tokens) + self.pos_emb(pos))

    def encode_memory(self, input_tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Run the encoder; returns (memory, pad key mask over memory)."""
        pad_mask = _pad_key_mask(input_tokens)
        x = self._embed(input_tokens)
        for layer in self.enc_layers:
            x = layer(x, pad_mask)
        return self.enc_ln(x), pad_mask

    def decode_logits(
        self, memory: torch.Tensor, mem_mask: torch.Tensor, prefix_tokens: torch.Tensor
    ) -> torch.Tensor:
        """Teacher-forced decoder pass; row j of the output gives
        next-token logits after consuming prefix_tokens[:, : j + 1]."""
        t = prefix_tokens.shape[1]
        self._check_len(t)
        causal = torch.triu(
            torch.full((t, t), NEG_INF, device=prefix_tokens.device), diagonal=1
        )[None, None]
        causal = causal + _pad_key_mask(prefix_tokens)
        x = self._embed(prefix_tokens)
        for layer in self.dec_layers:
            x = layer(x, memory, causal, mem_mask)
        return self.out_proj(self.dec_ln(x))

    def forward(self, input_tokens: torch.Tensor, prefix_tokens: torch.Tensor) -> torch.Tensor:
        memory, mem_mask = self.encode_memory(input_tokens)
        return self.decode_logits(memory, mem_mask, prefix_tokens)


def _as_batch(tokens: list[int]) -> torch.Tensor:
    return torch.as_tensor(tokens, dtype=torch.long)[None, :]


def forward_logits(
    model: GenRecModel, input_tokens: list[int], target_prefix_tokens: list[int]
) -> np.ndarray:
    """Next-token logits for each prefix position, evaluation mode."""
    for t in input_tokens + target_prefix_tokens:
        if not 0 <= t < model.config.vocab_size:
            raise ShapeError(f"token id {t} outside vocabulary")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            logits = model(_as_batch(input_tokens), _as_batch(target_prefix_tokens))
    finally:
        model.train(was_training)
    return logits[0].numpy()


def sequence_log_prob(
    model: GenRecModel, input_tokens: list[int], target_tokens: list[int]
) -> float:
    """Sum of per-token log-probabilities of the target (incl. its final
    EOS position), conditioning each step on BOS + preceding targets."""
    prefix = [BOS] + list(target_tokens[:-1])
    logits = torch.as_tensor(forward_logits(model, input_tokens, prefix), dtype=torch.float64)
    logp = torch.log_softmax(logits, dim=-1)
    idx = torch.as_tensor(target_tokens, dtype=torch.long)
    return float(logp[torch.arange(len(target_tokens)), idx].sum())


def pad_batch(sequences: list[list[int]], pad: int = PAD) -> torch.Tensor:
    width = max(len(s) for s in sequences)
    out = torch.full((len(sequences), width), pad, dtype=torch.long)
    for i, s in enumerate(sequences):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def batch_log_probs(
    model: GenRecModel, inputs: list[list[int]], targets: list[list[int]]
) -> torch.Tensor:
    """Summed target log-probabilities for a batch, keeping the autograd
    graph (used by preference alignment)."""
    enc = pad_batch(inputs)
    prefixes = pad_batch([[BOS] + t[:-1] for t in targets])
    tgt = pad_batch(targets)
    logits = model(enc, prefixes)
    logp = torch.log_softmax(logits, dim=-1)
    token_logp = logp.gather(-1, tgt.clamp(min=0)[..., None])[..., 0]
    mask = (tgt != PAD).float()
    return (token_logp * mask).sum(dim=1)


@dataclass
class SftConfig:
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 20
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    label_smoothing: float = 0.0
    seed: int = 0


def train_sft(
    model: GenRecModel, instances: list[TrainingInstance], config: SftConfig
) -> list[dict[str, float]]:
    """Teacher-forced cross-entropy training with AdamW, linear warmup and
    cosine decay. Returns the per-epoch loss history."""
    if not instances:
        raise TrainingError("no training instances")
    cfg = config
    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(instances)
    batches_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(1, cfg.epochs * batches_per_epoch)
    warmup_steps = max(1, int(round(cfg.warmup_ratio * total_steps)))

    def lr_lambda(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_lambda)
    gen = torch.Generator().manual_seed(cfg.seed)
    history: list[dict[str, float]] = []
    model.train()
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen).tolist()
        loss_sum, token_count = 0.0, 0
        for b in range(batches_per_epoch):
            batch = [instances[i] for i in perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            enc = pad_batch([inst.input_tokens for inst in batch])
            prefixes = pad_batch([[BOS] + inst.target_tokens[:-1] for inst in batch])
            targets = pad_batch([inst.target_tokens for inst in batch])
            logits = model(enc, prefixes)
            loss = F.cross_entropy(
                logits.reshape(-1, logits.shape[-1]),
                targets.reshape(-1),
                ignore_index=PAD,
                label_smoothing=cfg.label_smoothing,
            )
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            tokens = int((targets != PAD).sum())
            loss_sum += float(loss.detach().double()) * tokens
            token_count += tokens
        history.append({"epoch": float(epoch), "loss": loss_sum / token_count})
    model.eval()
    return history


def gradient_check(config: ModelConfig, n_instances: int = 3, step: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences
    of the teacher-forced cross-entropy loss, in float64."""
    model = GenRecModel(config).double()
    rng = np.random.default_rng(config.seed)
    inputs, targets = [], []
    for _ in range(n_instances):
        li = int(rng.integers(2, 6))
        lt = int(rng.integers(1, 5))
        inputs.append([BOS] + rng.integers(3, config.vocab_size, size=li).tolist())
        targets.append(rng.integers(3, config.vocab_size, size=lt).tolist())

    def loss_fn() -> torch.Tensor:
        model.eval()  # dropout off so the loss is deterministic
        enc = pad_batch(inputs)
        prefixes = pad_batch([[BOS] + t[:-1] for t in targets])
        tgt = pad_batch(targets)
        logits = model(enc, prefixes)
        return F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), tgt.reshape(-1), ignore_index=PAD
        )

    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    max_err = 0.0
    for param in model.parameters():
        grad = param.grad.detach().clone().reshape(-1)
        flat = param.data.reshape(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            f_plus = float(loss_fn().detach())
            flat[i] = orig - step
            f_minus = float(loss_fn().detach())
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * step)
            err = abs(fd - float(grad[i])) / max(1.0, abs(fd), abs(float(grad[i])))
            max_err = max(max_err, err)
    return max_err


def save_genrec(model: GenRecModel, path) -> None:
    c = model.config
    tensors: dict[str, np.ndarray] = {
        "meta/config": np.array(
            [
                c.vocab_size,
                c.d_model,
                c.n_heads,
                c.n_layers_enc,
                c.n_layers_dec,
                c.d_ff,
                c.max_positions,
                c.dropout,
                c.seed,
            ],
            dtype=np.float32,
        )
    }
    for name, param in model.state_dict().items():
        tensors[f"param/{name}"] = param.detach().numpy()
    checkpoint.save_tensors(path, tensors)


def load_genrec(path) -> GenRecModel:
    tensors = checkpoint.load_tensors(path)
    meta = tensors["meta/config"]
    config = ModelConfig(
        vocab_size=int(meta[0]),
        d_model=int(meta[1]),
        n_heads=int(meta[2]),
        n_layers_enc=int(meta[3]),
        n_layers_dec=int(meta[4]),
        d_ff=int(meta[5]),
        max_positions=int(meta[6]),
        dropout=float(meta[7]),
        seed=int(meta[8]),
    )
    model = GenRecModel(config)
    state = {
        name[len("param/") :]: torch.as_tensor(arr)
        for name, arr in tensors.items()
        if name.startswith("param/")
    }
    model.load_state_dict(state)
    model.eval()
    return model
