"""Training objectives for mask prediction, inpainting and the critic."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, TrainingFault

DELTA = 1e-6


@dataclass(frozen=True)
class LossWeights:
    recon: float = 1.4
    semantic: float = 1e-4
    mrf: float = 1e-3
    adv: float = 1e-3
    gp: float = 10.0
    mask: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be >= 0")


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class RandomFeaturePyramid(nn.Module):
    """Frozen random-weight conv pyramid standing in for a pretrained classifier.

    Three 3x3 conv + ReLU layers with strides (1, 2, 2) and widths
    (16, 32, 64).  ``forward`` returns every layer's activation; ``layer``
    selects the one used by the semantic term and ``mrf_layers`` those used
    by the texture term.
    """

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64), strides: Sequence[int] = (1, 2, 2),
                 layer: int = 2, mrf_layers: Sequence[int] = (2,), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = in_channels
        for cout, stride in zip(widths, strides):
            conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / (cin * 9)) ** 0.5)
                conv.bias.zero_()
            self.convs.append(conv)
            cin = cout
        self.layer = layer
        self.mrf_layers = tuple(mrf_layers)
        self.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


class IdentityExtractor(nn.Module):
    """``V(x) = [x]``; reduces the semantic term to plain L1."""

    layer = 0
    mrf_layers = (0,)

    def forward(self, x: Tensor) -> list[Tensor]:
        return [x]


# ---------------------------------------------------------------------------
# Mask loss
# ---------------------------------------------------------------------------


def _check_binary(mask: Tensor) -> None:
    if not torch.all((mask == 0) | (mask == 1)):
        raise ValueError("target mask must be binary {0, 1}")


def self_adaptive_bce(pred: Tensor, mask: Tensor, delta: float = DELTA, normalize: bool = False) -> Tensor:
    """Class-balanced BCE summed over pixels, averaged over the batch.

    ``tau`` is the clean-pixel fraction of each target; damaged pixels are
    weighted by ``tau`` and clean ones by ``1 - tau``.  Inputs are
    ``(N, 1, H, W)`` (or any shape whose first axis is the batch).
    ``normalize`` divides each image's sum by its pixel count.
    """
    if pred.shape != mask.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(mask.shape)} differ")
    _check_binary(mask)
    if pred.dim() < 3:
        pred, mask = pred[None], mask[None]
    p = pred.clamp(delta, 1 - delta)
    dims = tuple(range(1, p.dim()))
    n_pix = mask[0].numel()
    tau = (1 - mask).sum(dim=dims, keepdim=True) / n_pix
    per_pixel = -tau * mask * torch.log(p) - (1 - tau) * (1 - mask) * torch.log(1 - p)
    per_image = per_pixel.sum(dim=dims)
    if normalize:
        per_image = per_image / n_pix
    return per_image.mean()


# ---------------------------------------------------------------------------
# Generator terms
# ---------------------------------------------------------------------------


def recon_l1(fake: Tensor, real: Tensor, reduction: str = "mean") -> Tensor:
    """L1 reconstruction; ``mean`` over all elements (default) or ``sum``."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    diff = (fake - real).abs()
    return diff.mean() if reduction == "mean" else diff.sum()


def semantic_loss(fake: Tensor, real: Tensor, extractor: nn.Module) -> Tensor:
    l = extractor.layer
    return (extractor(fake)[l] - extractor(real)[l]).abs().mean()


def _patches(feat: Tensor, k: int) -> Tensor:
    """(C, H, W) -> (P, C*k*k), stride-1 valid patches."""
    c, h, w = feat.shape
    if k > h or k > w:
        raise ConfigError(f"patch size {k} larger than {h}x{w} feature map")
    return F.unfold(feat[None], k).squeeze(0).t()


def relative_similarity_loss(gen_feat: Tensor, real_feat: Tensor, patch: int = 3, band: float = 0.5,
                             eps: float = 1e-5) -> Tensor:
    """Contextual/relative-similarity patch loss for one ``(C, H, W)`` feature pair.

    Features are centered by the real map's channel mean, cut into ``k x k``
    patches and L2-normalized.  With cosine distances ``d[p, q]`` between
    generated patch ``p`` and real patch ``q``::

        d~[p, q] = d[p, q] / (min_q d[p, q] + eps)
        RS[p, q] = exp((1 - d~[p, q]) / band)
        CX[p, q] = RS[p, q] / sum_q RS[p, q]
        loss     = -log(mean_p max_q CX[p, q])
    """
    center = real_feat.mean(dim=(1, 2), keepdim=True)
    p = F.normalize(_patches(gen_feat - center, patch), dim=1)
    q = F.normalize(_patches(real_feat - center, patch), dim=1)
    dist = 1 - p @ q.t()
    rel = dist / (dist.min(dim=1, keepdim=True).values + eps)
    cx = torch.softmax((1 - rel) / band, dim=1)
    return -torch.log(cx.max(dim=1).values.mean())


def idmrf_loss(fake: Tensor, real: Tensor, extractor: nn.Module, patch: int = 3, band: float = 0.5,
               eps: float = 1e-5) -> Tensor:
    """Texture term: relative-similarity loss summed over the extractor's MRF layers, batch-averaged."""
    ff, rf = extractor(fake), extractor(real)
    total = fake.new_zeros(())
    for l in extractor.mrf_layers:
        per_image = [relative_similarity_loss(g, r, patch, band, eps) for g, r in zip(ff[l], rf[l])]
        total = total + torch.stack(per_image).mean()
    return total


def adv_gen_loss(disc: nn.Module, fake: Tensor) -> Tensor:
    return -disc(fake).mean()


class DiscLoss(NamedTuple):
    total: Tensor
    critic: Tensor
    gp: Tensor


def gradient_penalty(disc: nn.Module, fake: Tensor, real: Tensor, t: Tensor) -> Tensor:
    """``mean((||grad_x D(x)||_2 - 1)**2)`` at ``x = t * fake + (1 - t) * real``; differentiable in D's params."""
    interp = (t * fake.detach() + (1 - t) * real.detach()).requires_grad_(True)
    (grad,) = torch.autograd.grad(disc(interp).sum(), interp, create_graph=True)
    if not torch.isfinite(grad).all():
        raise TrainingFault("non-finite critic gradient in gradient penalty")
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1) ** 2).mean()


def disc_loss_gp(disc: nn.Module, fake: Tensor, real: Tensor, gp_weight: float = 10.0,
                 generator: torch.Generator | None = None, t: Tensor | None = None) -> DiscLoss:
    """Critic objective ``E[D(fake)] - E[D(real)] + gp_weight * penalty``.

    ``t`` is drawn uniformly from [0, 1] per sample from ``generator`` unless given.
    """
    if t is None:
        t = torch.rand(real.shape[0], generator=generator, dtype=real.dtype).to(real.device)
    t = t.reshape(-1, *([1] * (real.dim() - 1)))
    critic = disc(fake.detach()).mean() - disc(real).mean()
    gp = gradient_penalty(disc, fake, real, t)
    return DiscLoss(critic + gp_weight * gp, critic, gp)


def total_gen_loss(fake: Tensor, real: Tensor, weights: LossWeights, disc: nn.Module | None,
                   extractor: nn.Module | None) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted generator objective and its unweighted terms.

    Terms whose weight is zero (or whose network is missing) are not
    evaluated and reported as 0.
    """
    zero = fake.new_zeros(())
    terms = {
        "recon": recon_l1(fake, real) if weights.recon else zero,
        "semantic": semantic_loss(fake, real, extractor) if weights.semantic and extractor is not None else zero,
        "mrf": idmrf_loss(fake, real, extractor) if weights.mrf and extractor is not None else zero,
        "adv": adv_gen_loss(disc, fake) if weights.adv and disc is not None else zero,
    }
    total = (weights.recon * terms["recon"] + weights.semantic * terms["semantic"]
             + weights.mrf * terms["mrf"] + weights.adv * terms["adv"])
    return total, terms


def joint_objective(pred_mask: Tensor, mask: Tensor, fake: Tensor, real: Tensor, weights: LossWeights,
                    disc: nn.Module | None, extractor: nn.Module | None) -> tuple[Tensor, dict[str, Tensor]]:
    gen_total, terms = total_gen_loss(fake, real, weights, disc, extractor)
    terms["mask"] = self_adaptive_bce(pred_mask, mask)
    return weights.mask * terms["mask"] + gen_total, terms
