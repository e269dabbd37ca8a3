"""Gradient-derived channel and spatial attention.

Given stage features F of shape (C, u, v) and the pre-softmax score y of a
target class, channel importances are the spatially averaged gradients
dy/dF, the attention map is the softmax(importance)-weighted channel sum of
F, and the enhanced features are F * A * importance (raw, not softmaxed).
All attention quantities are constants w.r.t. training gradients: they are
computed on a detached leaf copy of F so nothing flows back through the
attention path.

Functions accept an optional leading batch dimension; the channel axis is
always third from the end.
"""

from __future__ import annotations

import torch


def channel_importance(grad: torch.Tensor) -> torch.Tensor:
    """Spatial mean of dy/dF per channel: (..., C, u, v) -> (..., C)."""
    if grad.dim() < 3:
        raise ValueError(f"expected (..., C, u, v) gradient, got shape {tuple(grad.shape)}")
    return grad.mean(dim=(-2, -1))


def attention_map(
    alpha: torch.Tensor, features: torch.Tensor, rectify: bool = False
) -> torch.Tensor:
    """Softmax-weighted channel sum: (..., C) x (..., C, u, v) -> (..., u, v).

    The softmax weights form a convex combination, so the map is bounded
    per-position by the channel min and max of the features. `rectify`
    clamps negatives (off by default).
    """
    if alpha.shape[-1] != features.shape[-3]:
        raise ValueError(
            f"channel mismatch: {alpha.shape[-1]} importances vs {features.shape[-3]} channels"
        )
    weights = torch.softmax(alpha, dim=-1)
    out = (weights[..., None, None] * features).sum(dim=-3)
    if rectify:
        out = out.clamp_min(0)
    return out


def attention_enhance(
    features: torch.Tensor,
    attn: torch.Tensor,
    alpha: torch.Tensor,
    residual: bool = False,
) -> torch.Tensor:
    """Rescale features by the attention map and raw channel importances.

    out[ch, i, j] = F[ch, i, j] * A[i, j] * alpha[ch]; `residual` adds F back
    (off by default). attn and alpha are detached so training gradients see
    them as constants.
    """
    if attn.shape[-2:] != features.shape[-2:]:
        raise ValueError(
            f"spatial mismatch: attention {tuple(attn.shape[-2:])} vs features {tuple(features.shape[-2:])}"
        )
    if alpha.shape[-1] != features.shape[-3]:
        raise ValueError(
            f"channel mismatch: {alpha.shape[-1]} importances vs {features.shape[-3]} channels"
        )
    out = features * attn.detach().unsqueeze(-3) * alpha.detach()[..., None, None]
    if residual:
        out = out + features
    return out


def ia_forward(
    features: torch.Tensor,
    score_fn,
    class_index,
    rectify: bool = False,
    residual: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Full attention pass for one feature map or a batch of them.

    score_fn maps features to per-class scores (pre-softmax): (C, u, v) ->
    (num_classes,) or (B, C, u, v) -> (B, num_classes). class_index is an int
    for the unbatched case or a (B,) long tensor. Gradients are taken against
    a detached leaf copy, so the model's .grad accumulators are untouched and
    the returned alpha / attention map carry no history.

    Returns (enhanced, attention_map, alpha). Only `enhanced` stays connected
    to `features` for training gradients, with d(enhanced)/d(features) =
    A * alpha.
    """
    batched = features.dim() == 4
    leaf = features.detach().clone().requires_grad_(True)
    with torch.enable_grad():  # the attention pass differentiates even under no_grad eval
        scores = score_fn(leaf)
        if batched:
            idx = torch.as_tensor(class_index, dtype=torch.long, device=scores.device)
            if idx.dim() == 0:
                idx = idx.expand(scores.shape[0])
            if idx.max() >= scores.shape[-1] or idx.min() < 0:
                raise ValueError(f"class index out of range for {scores.shape[-1]} classes")
            picked = scores.gather(1, idx.unsqueeze(1)).sum()
        else:
            if not (0 <= int(class_index) < scores.shape[-1]):
                raise ValueError(
                    f"class index {class_index} out of range for {scores.shape[-1]} classes"
                )
            picked = scores[int(class_index)]
        (grad,) = torch.autograd.grad(picked, leaf)
    alpha = channel_importance(grad)
    attn = attention_map(alpha, features.detach(), rectify=rectify)
    enhanced = attention_enhance(features, attn, alpha, residual=residual)
    return enhanced, attn, alpha
