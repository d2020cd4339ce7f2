"""Independent reference implementations used to check the package.

Everything here is deliberately written as straight-line numpy/python,
separate from the library code paths it validates.
"""

from __future__ import annotations

import numpy as np
import torch

from ragr.rqvae import RqVaeModel


def mlp_weights(seq) -> list[tuple[np.ndarray, np.ndarray]]:
    """Extract (weight, bias) pairs from an nn.Sequential of Linear/ReLU."""
    out = []
    for layer in seq:
        if hasattr(layer, "weight"):
            out.append(
                (layer.weight.detach().double().numpy(), layer.bias.detach().double().numpy())
            )
    return out


def mlp_forward(weights: list[tuple[np.ndarray, np.ndarray]], x: np.ndarray) -> np.ndarray:
    """Forward through Linear/ReLU/.../Linear with ReLU between layers."""
    for i, (w, b) in enumerate(weights):
        x = x @ w.T + b
        if i < len(weights) - 1:
            x = np.maximum(x, 0.0)
    return x


def exhaustive_quantize(codebooks: list[np.ndarray], h: np.ndarray):
    """Per-level argmin by explicit loop over every codeword (float64)."""
    r = np.asarray(h, np.float64).copy()
    codes, quantized = [], np.zeros_like(r)
    for cb in codebooks:
        best_k, best_d = -1, np.inf
        for k in range(cb.shape[0]):
            d = float(((r - cb[k]) ** 2).sum())
            if d < best_d:
                best_k, best_d = k, d
        codes.append(best_k)
        quantized += cb[best_k]
        r = r - cb[best_k]
    return codes, quantized, r


def snapshot_quantization(model: RqVaeModel, e: np.ndarray):
    """Record, at the current parameters, everything the stop-gradient
    freezes: code selections, per-level residuals, and the
    straight-through offset."""
    enc = mlp_weights(model.encoder)
    h = mlp_forward(enc, np.asarray(e, np.float64))
    codebooks = [cb.detach().double().numpy() for cb in model.codebooks]
    codes, quantized, _ = exhaustive_quantize(codebooks, h)
    residuals = [h.copy()]
    r = h.copy()
    selected = []
    for m, cb in enumerate(codebooks):
        c = cb[codes[m]]
        selected.append(c.copy())
        r = r - c
        residuals.append(r.copy())
    return {
        "codes": codes,
        "residuals": residuals,  # r^(0) .. r^(M) at the snapshot
        "selected": selected,  # frozen codewords per level
        "st_offset": quantized - h,  # frozen (q - h) of the straight-through pass
    }


def surrogate_tokenizer_loss(model: RqVaeModel, e: np.ndarray, frozen: dict) -> float:
    """Tokenizer objective evaluated at the model's *current* parameters
    with every stop-gradient argument (and the code selection) frozen at
    the snapshot. Finite differences of this function equal the analytic
    gradients of the training loss.
    """
    e = np.asarray(e, np.float64)
    enc = mlp_weights(model.encoder)
    dec = mlp_weights(model.decoder)
    codebooks = [cb.detach().double().numpy() for cb in model.codebooks]
    beta = model.config.beta_commit

    h = mlp_forward(enc, e)
    r = h.copy()
    code_loss = 0.0
    commit_loss = 0.0
    qsum = np.zeros_like(h)
    for m, cb in enumerate(codebooks):
        c = cb[frozen["codes"][m]]  # live codeword at the frozen index
        code_loss += float(((frozen["residuals"][m] - c) ** 2).sum())
        commit_loss += float(((r - frozen["selected"][m]) ** 2).sum())
        qsum = qsum + c
        r = r - c
    if model.config.rec_target == "input":
        h_st = h + frozen["st_offset"]
        rec = float(((e - mlp_forward(dec, h_st)) ** 2).sum())
    else:
        rec = float(((h - qsum) ** 2).sum())
    return rec + code_loss + beta * commit_loss


def fd_gradients(model: torch.nn.Module, loss_fn, step: float = 1e-4) -> list[np.ndarray]:
    """Central finite differences of loss_fn() w.r.t. every parameter."""
    grads = []
    with torch.no_grad():
        for param in model.parameters():
            flat = param.data.reshape(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                f_plus = loss_fn()
                flat[i] = orig - step
                f_minus = loss_fn()
                flat[i] = orig
                g[i] = (f_plus - f_minus) / (2 * step)
            grads.append(g.reshape(tuple(param.shape)))
    return grads


def max_relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, f in zip(analytic, numeric):
        a, f = np.asarray(a, np.float64), np.asarray(f, np.float64)
        err = np.abs(a - f) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(f)))
        worst = max(worst, float(err.max()))
    return worst


def dpo_gradient_max_error(policy, reference, pairs, beta: float, step: float = 1e-5) -> float:
    """Autograd vs central finite differences of the preference loss on a
    float64 policy (the reference stays fixed)."""
    from ragr.genrec import batch_log_probs

    contexts = [p.context_tokens for p in pairs]
    preferred = [p.preferred_tokens for p in pairs]
    rejected = [p.rejected_tokens for p in pairs]
    with torch.no_grad():
        ref_pos = batch_log_probs(reference, contexts, preferred)
        ref_neg = batch_log_probs(reference, contexts, rejected)

    def loss_value(keep_graph=False):
        policy.eval()
        pos = batch_log_probs(policy, contexts, preferred)
        neg = batch_log_probs(policy, contexts, rejected)
        delta = (pos - ref_pos) - (neg - ref_neg)
        loss = torch.nn.functional.softplus(-beta * delta).mean()
        return loss if keep_graph else float(loss.detach())

    loss = loss_value(keep_graph=True)
    policy.zero_grad()
    loss.backward()
    analytic = [p.grad.detach().numpy().copy() for p in policy.parameters()]
    numeric = fd_gradients(policy, loss_value, step)
    return max_relative_error(analytic, numeric)


def rqvae_gradient_max_error(model: RqVaeModel, e: np.ndarray, step: float = 1e-4) -> float:
    """Compare autograd gradients of the tokenizer loss against central
    finite differences of the stop-gradient-honoring surrogate."""
    model = model.double()
    batch = torch.as_tensor(np.asarray(e, np.float64)).unsqueeze(0)
    rec, code, commit, _, _ = model.loss_batch(batch)
    loss = (rec + code + model.config.beta_commit * commit).sum()
    model.zero_grad()
    loss.backward()
    analytic = [
        (p.grad.detach().numpy().copy() if p.grad is not None else np.zeros(tuple(p.shape)))
        for p in model.parameters()
    ]
    frozen = snapshot_quantization(model, e)
    numeric = fd_gradients(model, lambda: surrogate_tokenizer_loss(model, e, frozen), step)
    return max_relative_error(analytic, numeric)
