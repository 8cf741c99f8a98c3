"""Differentiable building blocks sized to this architecture.

Convolution, affine maps, and sliding-window local attention as pure
functions over torch tensors, plus an independent central-difference
gradient oracle.  Reverse-mode gradients come from torch autograd; the
finite-difference check never touches autograd and serves as its oracle.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def conv1d(input: torch.Tensor, kernel: torch.Tensor, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> torch.Tensor:
    """Cross-correlation of a [C_in, L] signal with a [C_out, C_in, K] kernel."""
    if input.ndim != 2:
        raise ShapeError(f"conv1d input must be [C_in, L], got shape {tuple(input.shape)}")
    if kernel.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [C_out, C_in, K], got shape {tuple(kernel.shape)}")
    if input.shape[0] != kernel.shape[1]:
        raise ShapeError(f"input channels {input.shape[0]} != kernel channels {kernel.shape[1]}")
    if kernel.shape[2] < 1 or stride < 1:
        raise ShapeError(f"kernel size and stride must be >= 1, got K={kernel.shape[2]} stride={stride}")
    span = dilation * (kernel.shape[2] - 1) + 1
    if input.shape[1] + 2 * padding < span:
        raise ShapeError(f"padded length {input.shape[1] + 2 * padding} shorter than "
                         f"dilated kernel span {span}")
    out = F.conv1d(input.unsqueeze(0), kernel, stride=stride,
                   padding=padding, dilation=dilation)
    return out.squeeze(0)


def conv1d_output_length(length: int, kernel_size: int, stride: int = 1,
                         padding: int = 0, dilation: int = 1) -> int:
    return (length + 2 * padding - dilation * (kernel_size - 1) - 1) // stride + 1


def same_coverage_padding(kernel_size: int, stride: int) -> int:
    """Padding so a strided conv maps length L to exactly L/stride.

    Valid for kernel_size = 2*stride + 1 with even stride (the shapes used by
    the downsampling trunk); asserts the resulting length arithmetic.
    """
    pad = (kernel_size - stride + 1) // 2
    if (2 * pad - kernel_size + stride) not in range(0, stride):
        raise ShapeError(f"no same-coverage padding for K={kernel_size} stride={stride}")
    return pad


def linear(input: torch.Tensor, weight: torch.Tensor,
           bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map along the trailing dimension: input @ weight.T + bias."""
    if weight.ndim != 2:
        raise ShapeError(f"weight must be [D_out, D_in], got shape {tuple(weight.shape)}")
    if input.shape[-1] != weight.shape[1]:
        raise ShapeError(f"trailing dim {input.shape[-1]} != D_in {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(input, weight, bias)


def local_self_attention(x: torch.Tensor, wq: torch.Tensor, wk: torch.Tensor,
                         wv: torch.Tensor, wo: torch.Tensor,
                         window: int, heads: int) -> torch.Tensor:
    """Sliding-window multi-head self-attention over a [L, D] sequence.

    Each position attends to positions within +-window.  The banded gather
    keeps arithmetic cost linear in L at fixed window.
    """
    if x.ndim != 2:
        raise ShapeError(f"attention input must be [L, D], got shape {tuple(x.shape)}")
    L, D = x.shape
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if D % heads != 0:
        raise ShapeError(f"model dim {D} not divisible by heads {heads}")
    for name, w in (("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)):
        if w.shape != (D, D):
            raise ShapeError(f"{name} must be [{D}, {D}], got {tuple(w.shape)}")
    dh = D // heads
    w = min(window, L - 1) if L > 1 else 1
    band = 2 * w + 1

    q = (x @ wq.T).reshape(L, heads, dh)
    k = (x @ wk.T).reshape(L, heads, dh)
    v = (x @ wv.T).reshape(L, heads, dh)

    # Banded keys/values: [L, band, heads, dh] via padding + unfold.
    k_pad = F.pad(k, (0, 0, 0, 0, w, w))
    v_pad = F.pad(v, (0, 0, 0, 0, w, w))
    k_win = k_pad.unfold(0, band, 1).permute(0, 3, 1, 2)
    v_win = v_pad.unfold(0, band, 1).permute(0, 3, 1, 2)

    scores = torch.einsum("lhd,lbhd->lhb", q, k_win) / math.sqrt(dh)
    offs = torch.arange(-w, w + 1, device=x.device)
    pos = torch.arange(L, device=x.device)[:, None] + offs[None, :]
    valid = (pos >= 0) & (pos < L)
    scores = scores.masked_fill(~valid[:, None, :], float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    out = torch.einsum("lhb,lbhd->lhd", attn, v_win).reshape(L, D)
    return out @ wo.T


def attention_mac_count(L: int, D: int, window: int, heads: int) -> int:
    """Multiply-accumulate count of the banded attention algorithm."""
    dh = D // heads
    w = min(window, L - 1) if L > 1 else 1
    band = 2 * w + 1
    proj = 4 * L * D * D
    scores = L * heads * band * dh
    values = L * heads * band * dh
    return proj + scores + values


def gradients(loss: torch.Tensor, tensors) -> list:
    """Reverse-mode gradients of a scalar loss; zeros for unused tensors."""
    if loss.ndim != 0:
        raise ShapeError(f"loss must be scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=False)
    return [g if g is not None else torch.zeros_like(t)
            for g, t in zip(grads, tensors)]


def finite_difference_check(fn, inputs, epsilon: float = 1e-5,
                            max_coords_per_tensor: int | None = None,
                            rng: np.random.Generator | None = None) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` maps the input tensors to a scalar.  Inputs must be double
    precision leaf tensors.  ``max_coords_per_tensor`` subsamples coordinates
    for large tensors; None checks every coordinate.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError(f"epsilon {epsilon} outside [1e-7, 1e-3]")
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    loss = fn(*inputs)
    analytic = gradients(loss, inputs)
    if rng is None:
        rng = np.random.default_rng(0)

    max_rel = 0.0
    for ti, (t, g) in enumerate(zip(inputs, analytic)):
        flat = t.detach().reshape(-1)
        gflat = g.reshape(-1)
        n = flat.numel()
        coords = range(n)
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        for c in coords:
            orig = flat[c].item()
            flat[c] = orig + epsilon
            with torch.no_grad():
                up = fn(*inputs).item()
            flat[c] = orig - epsilon
            with torch.no_grad():
                down = fn(*inputs).item()
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(
                    f"non-finite value perturbing input {ti} coordinate {c}")
            numeric = (up - down) / (2.0 * epsilon)
            a = gflat[c].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            max_rel = max(max_rel, rel)
    return max_rel
