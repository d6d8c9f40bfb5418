"""Discriminator, perceptual features and the training objectives.

Generator objective::

    L_total = L_rec + L_per + lambda_adv * L_adv
    L_adv   = -E[D(emb(I_SR), F_T)] - alpha * E[cos(emb(I_SR), F_T)]

The discriminator side is a hinge loss (logistic available) on detached
fakes. ``emb`` is the frozen ViT's unit-norm image embedding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .encoders import MiniViT
from .errors import DimensionError, InputError, ValidationError
from .generator import Generator, TextFeatures, encode_captions
from .nn import Conv2d, MLP, Module
from .optim import Adam
from .tensor import Tensor, backward, concat, no_grad, relu, softplus, tabs


@dataclass
class LossWeights:
    lambda_adv: float = 0.01
    alpha: float = 4.0
    sigma: tuple[float, ...] = field(default_factory=lambda: (0.2,) * 5)

    def __post_init__(self):
        if self.lambda_adv < 0 or self.alpha < 0 or any(s < 0 for s in self.sigma):
            raise ValidationError(f"loss weights must be non-negative: {self}")


# ---------------------------------------------------------------------------
# perceptual network
# ---------------------------------------------------------------------------

class PerceptualNet(Module):
    """Frozen random conv stack with a tap after each of its 5 stages."""

    def __init__(self, rng: np.random.Generator, widths=(8, 16, 16, 32, 32), strides=(1, 2, 1, 2, 1)):
        chans = (3,) + tuple(widths)
        self.stages = [
            Conv2d(chans[i], chans[i + 1], 3, rng, stride=1) for i in range(len(widths))
        ]
        self.strides = tuple(strides)
        self.freeze()

    def forward(self, x: Tensor) -> list[Tensor]:
        taps = []
        h = x - 0.5
        for conv, s in zip(self.stages, self.strides):
            h = relu(conv(h))
            if s > 1:
                h = F.avg_pool2d(h, s)
            taps.append(h)
        return taps


def rec_loss(i_sr: Tensor, i_gt) -> Tensor:
    """Pixel-wise mean absolute error."""
    i_gt = i_gt if isinstance(i_gt, Tensor) else Tensor(np.asarray(i_gt, dtype=i_sr.dtype))
    if i_sr.shape != i_gt.shape:
        raise DimensionError(f"rec_loss: shapes differ {i_sr.shape} vs {i_gt.shape}")
    return tabs(i_sr - i_gt).mean()


def perceptual_loss(i_sr: Tensor, i_gt, phi: Callable[[Tensor], Sequence[Tensor]],
                    sigma: Sequence[float]) -> Tensor:
    """``sum_i sigma_i * mean|phi_i(sr) - phi_i(gt)|`` over the taps of ``phi``."""
    i_gt = i_gt if isinstance(i_gt, Tensor) else Tensor(np.asarray(i_gt, dtype=i_sr.dtype))
    if i_sr.shape != i_gt.shape:
        raise DimensionError(f"perceptual_loss: shapes differ {i_sr.shape} vs {i_gt.shape}")
    if all(s == 0 for s in sigma):
        return Tensor(np.zeros((), dtype=i_sr.dtype))
    if i_sr.ndim == 3:
        i_sr = i_sr.reshape((1,) + i_sr.shape)
        i_gt = i_gt.reshape((1,) + i_gt.shape)
    taps_sr = phi(i_sr)
    with no_grad():
        taps_gt = phi(i_gt)
    if len(taps_sr) != len(sigma):
        raise ValidationError(f"{len(sigma)} layer weights for {len(taps_sr)} feature taps")
    total = None
    for s, a, b in zip(sigma, taps_sr, taps_gt):
        if s == 0:
            continue
        term = tabs(a - b).mean() * float(s)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class DiscriminatorHead(Module):
    """Two-layer MLP on ``[image embedding, text embedding]`` → realism score."""

    def __init__(self, d_joint: int, rng: np.random.Generator, hidden: int = 64):
        self.mlp = MLP(2 * d_joint, hidden, 1, rng)

    def forward(self, img_emb: Tensor, txt_emb: Tensor) -> Tensor:
        return self.mlp(concat([img_emb, txt_emb], axis=-1)).reshape(-1)


def text_joint(f_t: Tensor) -> Tensor:
    return F.l2_normalize(f_t, axis=-1)


def disc_forward(image: Tensor, f_t: Tensor, head: DiscriminatorHead, vit: MiniViT) -> Tensor:
    """Realism score(s) for images conditioned on the text vector(s)."""
    single = image.ndim == 3
    if single:
        image = image.reshape((1,) + image.shape)
        f_t = f_t.reshape(1, -1)
    scores = head(vit.embed_images(image), text_joint(f_t))
    return scores[0] if single else scores


def text_constrained_adv_loss(scores: Tensor, sims: Tensor, alpha: float) -> Tensor:
    return -scores.mean() - sims.mean() * float(alpha)


def adv_loss_generator(i_sr: Tensor, f_t: Tensor, head: DiscriminatorHead, vit: MiniViT, alpha: float) -> Tensor:
    if i_sr.ndim == 3:
        i_sr = i_sr.reshape((1,) + i_sr.shape)
        f_t = f_t.reshape(1, -1)
    emb = vit.embed_images(i_sr)
    t = text_joint(f_t)
    scores = head(emb, t)
    sims = (emb * t).sum(axis=-1)
    return text_constrained_adv_loss(scores, sims, alpha)


def hinge_disc_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return relu(1.0 - real_scores).mean() + relu(1.0 + fake_scores).mean()


def logistic_disc_loss(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    return softplus(-real_scores).mean() + softplus(fake_scores).mean()


def disc_loss(real: Tensor, fake: Tensor, f_t: Tensor, head: DiscriminatorHead, vit: MiniViT,
              kind: str = "hinge") -> Tensor:
    """Discriminator objective; ``fake`` is detached so no gradient reaches G."""
    if real.shape[0] == 0 or fake.shape[0] == 0:
        raise InputError("discriminator loss needs non-empty real and fake batches")
    t = text_joint(f_t.detach())
    with no_grad():
        real_emb = vit.embed_images(real.detach())
        fake_emb = vit.embed_images(fake.detach())
    real_scores = head(real_emb, t)
    fake_scores = head(fake_emb, t)
    if kind == "hinge":
        return hinge_disc_loss(real_scores, fake_scores)
    if kind == "logistic":
        return logistic_disc_loss(real_scores, fake_scores)
    raise ValidationError(f"unknown discriminator loss {kind!r}")


def total_loss(rec, per, adv, w: LossWeights):
    return rec + per + adv * w.lambda_adv


# ---------------------------------------------------------------------------
# one training step
# ---------------------------------------------------------------------------

def train_step(batch: dict, generator: Generator, head: DiscriminatorHead | None, *,
               text_encoder, vit: MiniViT | None, phi: PerceptualNet, opt_g: Adam,
               opt_d: Adam | None, weights: LossWeights, use_text: bool = True,
               use_discriminator: bool = True, disc_kind: str = "hinge") -> dict[str, float]:
    """One discriminator update followed by one generator update.

    ``batch`` holds numpy arrays ``lr``, ``hr`` and (when the text path is on)
    ``ids``. Optional ``edit_ids`` hold recoloured captions for the first
    ``len(edit_ids)`` images and ``edit_hr`` the matching re-rendered targets;
    their outputs join the reconstruction, perceptual and adversarial terms.
    Returns the scalar loss components.
    """
    dtype = generator.encoder.stem.weight.dtype
    lr = Tensor(batch["lr"].astype(dtype))
    hr = Tensor(batch["hr"].astype(dtype))
    text: TextFeatures | None = None
    if use_text:
        text = encode_captions(text_encoder, batch["ids"])

    sr = generator(lr, text, vit if generator.use_vit else None)
    fakes, targets, f_t = sr, hr, text.pooled if text is not None else None
    if use_text and batch.get("edit_ids") is not None and len(batch["edit_ids"]):
        # counterfactual captions: same LR input, target re-rendered in the named colour
        k = len(batch["edit_ids"])
        edit = encode_captions(text_encoder, batch["edit_ids"])
        sr_edit = generator(lr[:k], edit, vit if generator.use_vit else None)
        fakes = concat([sr, sr_edit], axis=0)
        targets = concat([hr, Tensor(batch["edit_hr"].astype(dtype))], axis=0)
        f_t = concat([text.pooled, edit.pooled], axis=0)

    d_value = 0.0
    adversarial = use_discriminator and use_text and head is not None
    if adversarial:
        opt_d.zero_grad()
        d = disc_loss(targets, fakes, f_t, head, vit, disc_kind)
        backward(d)
        opt_d.step()
        d_value = d.item()

    opt_g.zero_grad()
    rec = rec_loss(fakes, targets)
    per = perceptual_loss(fakes, targets, phi, weights.sigma)
    if adversarial:
        adv = adv_loss_generator(fakes, f_t, head, vit, weights.alpha)
    else:
        adv = Tensor(np.zeros((), dtype=dtype))
    total = total_loss(rec, per, adv, weights)
    backward(total)
    opt_g.step()
    if head is not None:
        head.zero_grad()
    return {"rec": rec.item(), "per": per.item(), "adv": adv.item(), "disc": d_value, "total": total.item()}
