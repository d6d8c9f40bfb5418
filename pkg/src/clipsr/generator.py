"""Text-conditioned super-resolution generator.

Data flow for one batch:

1. ``E_I`` maps the LR image to an 8x8 feature map ``F_I``; the frozen text
   encoder gives ``F_T`` (pooled) and per-token features.
2. A TIFBlock fuses ``F_I`` with ``F_T``; the result is flattened into ViT
   tokens and run through the frozen ViT together with prompts predicted
   from the token features.
3. The ViT patch tokens are projected back onto the 8x8 grid and added to
   ``F_I``; four residual Conv-TIFBlock stages refine the sum.
4. A decoder lifts the map back to LR size (reusing encoder skips) and the
   upsampler ``G`` applies ``log2(scale)`` conv + pixel-shuffle blocks; its
   output corrects the bicubic upsample of the input in logit space.

Ablation switches turn off the text path (which also disables the ViT path)
or just the ViT path.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .encoders import ImageEncoder, MiniViT, SelfAttention, TextEncoder, padding_mask
from .errors import ConfigurationError, DimensionError
from .imaging import resample_array
from .nn import Conv2d, LayerNorm, Linear, MLP, Module, full_param, normal_param, zeros_param
from .tensor import Tensor, concat, no_grad

SUPPORTED_SCALES = (4, 8, 16)

# call counters for instrumentation (ablation wiring, stage counts)
COUNTERS: Counter = Counter()


def reset_counters() -> None:
    COUNTERS.clear()


@dataclass
class TextFeatures:
    """Frozen text-encoder outputs for a batch of captions."""

    pooled: Tensor          # (N, d_t), F_T
    tokens: Tensor          # (N, L, d_t)
    ids: np.ndarray         # (N, L)

    @property
    def key_mask(self) -> np.ndarray:
        return padding_mask(self.ids, self.pooled.dtype)


def encode_captions(text_encoder: TextEncoder, ids: np.ndarray) -> TextFeatures:
    COUNTERS["text_encoder"] += 1
    with no_grad():
        pooled, tokens = text_encoder(ids)
    return TextFeatures(pooled, tokens, np.asarray(ids))


# ---------------------------------------------------------------------------
# affine fusion
# ---------------------------------------------------------------------------

class AffineStage(Module):
    """Channel-wise scale/shift predicted from the softmax-reweighted text vector.

    The MLP inputs sum to one, so the first layer is scaled up by the text
    width to keep unit-scale pre-activations. The scale head starts at 1 and
    the shift head at 0. ``static_gamma``/``static_beta`` are only used when
    no text is supplied.
    """

    def __init__(self, d_text: int, channels: int, rng: np.random.Generator, hidden: int = 64):
        self.mlp_gamma = MLP(d_text, hidden, channels, rng, in_gain=math.sqrt(2.0) * d_text, out_gain=0.1)
        self.mlp_beta = MLP(d_text, hidden, channels, rng, in_gain=math.sqrt(2.0) * d_text, out_gain=0.1)
        self.mlp_gamma.fc2.bias = full_param((channels,), 1.0)
        self.static_gamma = full_param((channels,), 1.0)
        self.static_beta = zeros_param((channels,))

    @property
    def channels(self) -> int:
        return self.static_gamma.shape[0]

    def modulation(self, f_t: Tensor | None) -> tuple[Tensor, Tensor]:
        if f_t is None:
            return self.static_gamma.reshape(1, -1), self.static_beta.reshape(1, -1)
        COUNTERS["text_affine"] += 1
        w = F.softmax(f_t, axis=-1)
        return self.mlp_gamma(w), self.mlp_beta(w)


def affine_modulate(f: Tensor, f_t: Tensor | None, stage: AffineStage,
                    gamma: Tensor | None = None, beta: Tensor | None = None) -> Tensor:
    """``gamma[n] * f[n] + beta[n]`` per channel (no ReLU).

    ``f`` is ``(c, h, w)`` with ``f_t`` of shape ``(d_t,)``, or batched
    ``(N, c, h, w)`` with ``(N, d_t)``. Passing ``gamma``/``beta`` bypasses
    the MLPs.
    """
    single = f.ndim == 3
    if single:
        f = f.reshape((1,) + f.shape)
        if f_t is not None:
            f_t = f_t.reshape(1, -1)
    if gamma is None or beta is None:
        g_hat, b_hat = stage.modulation(f_t)
        gamma = g_hat if gamma is None else gamma
        beta = b_hat if beta is None else beta
    gamma = gamma if isinstance(gamma, Tensor) else Tensor(np.asarray(gamma, dtype=f.dtype))
    beta = beta if isinstance(beta, Tensor) else Tensor(np.asarray(beta, dtype=f.dtype))
    c = f.shape[1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise DimensionError(f"affine: feature map has {c} channels, scale/shift widths {gamma.shape}, {beta.shape}")
    gamma = gamma.reshape(-1, c, 1, 1)
    beta = beta.reshape(-1, c, 1, 1)
    out = gamma * f + beta
    return out[0] if single else out


class TIFBlock(Module):
    """Two affine+ReLU stages followed by a 3x3 convolution (shape preserving)."""

    def __init__(self, channels: int, d_text: int, rng: np.random.Generator):
        self.aff1 = AffineStage(d_text, channels, rng)
        self.aff2 = AffineStage(d_text, channels, rng)
        self.conv = Conv2d(channels, channels, 3, rng)

    def forward(self, f: Tensor, f_t: Tensor | None) -> Tensor:
        h = F.relu(affine_modulate(f, f_t, self.aff1))
        h = F.relu(affine_modulate(h, f_t, self.aff2))
        return self.conv(h)


def tifblock_forward(f: Tensor, f_t: Tensor | None, params: TIFBlock) -> Tensor:
    if f.ndim == 3:
        f_t = None if f_t is None else f_t.reshape(1, -1)
        return params(f.reshape((1,) + f.shape), f_t)[0]
    return params(f, f_t)


# ---------------------------------------------------------------------------
# prompt predictor
# ---------------------------------------------------------------------------

class PromptPredictor(Module):
    """FC lift of the token features, one self-attention layer, output projection.

    ``K`` learned query slots are prepended to the lifted text tokens; after
    the attention layer the slots carry the text-conditioned prompts.
    """

    def __init__(self, d_text: int, d_vit: int, n_prompts: int, rng: np.random.Generator):
        if n_prompts < 1:
            raise ConfigurationError("prompt count must be >= 1")
        self.fc = Linear(d_text, d_vit, rng)
        self.queries = normal_param(rng, (n_prompts, d_vit), 0.02)
        self.ln = LayerNorm(d_vit)
        self.attn = SelfAttention(d_vit, rng)
        self.out = Linear(d_vit, d_vit, rng)

    @property
    def n_prompts(self) -> int:
        return self.queries.shape[0]

    def forward(self, tokens: Tensor, ids: np.ndarray | None = None) -> Tensor:
        if tokens.shape[-1] != self.fc.weight.shape[0]:
            raise DimensionError(f"prompt predictor expects width {self.fc.weight.shape[0]}, got {tokens.shape}")
        COUNTERS["prompt_predictor"] += 1
        n = tokens.shape[0]
        k = self.n_prompts
        h = self.fc(tokens)
        q = self.queries.reshape(1, k, -1) + Tensor(np.zeros((n, k, h.shape[-1]), dtype=h.dtype))
        z = concat([q, h], axis=1)
        mask = padding_mask(ids, h.dtype, n_prefix=k) if ids is not None else None
        z = z + self.attn(self.ln(z), mask)
        return self.out(z[:, :k])


def predict_prompts(text_token_features: Tensor, params: PromptPredictor, ids: np.ndarray | None = None) -> Tensor:
    if text_token_features.ndim == 2:
        if text_token_features.shape[0] < 1:
            raise DimensionError("prompt predictor needs at least one token")
        ids = None if ids is None else np.asarray(ids).reshape(1, -1)
        return params(text_token_features.reshape((1,) + text_token_features.shape), ids)[0]
    return params(text_token_features, ids)


# ---------------------------------------------------------------------------
# refinement, decoder, upsampler
# ---------------------------------------------------------------------------

class RefineStage(Module):
    def __init__(self, channels: int, d_text: int, rng: np.random.Generator):
        self.tif = TIFBlock(channels, d_text, rng)
        self.conv = Conv2d(channels, channels, 3, rng, gain=0.5)

    def forward(self, f: Tensor, f_t: Tensor | None) -> Tensor:
        return f + self.conv(self.tif(f, f_t))


class Refinement(Module):
    def __init__(self, channels: int, d_text: int, d_vit: int, depth: int, rng: np.random.Generator):
        self.vit_proj = Conv2d(d_vit, channels, 1, rng, gain=0.5)
        self.stages = [RefineStage(channels, d_text, rng) for _ in range(depth)]

    def project_tokens(self, vit_tokens: Tensor) -> Tensor:
        """``(N, P, d_vit)`` patch tokens → ``(N, c, g, g)`` map."""
        n, p, d = vit_tokens.shape
        g = int(round(math.sqrt(p)))
        if g * g != p:
            raise DimensionError(f"{p} ViT tokens do not form a square grid")
        grid = vit_tokens.reshape(n, g, g, d).transpose(0, 3, 1, 2)
        return self.vit_proj(grid)

    def forward(self, f0: Tensor, f_t: Tensor | None, vit_tokens: Tensor | None = None,
                trace: list | None = None) -> Tensor:
        f = f0
        if vit_tokens is not None:
            proj = self.project_tokens(vit_tokens)
            if proj.shape != f0.shape:
                raise DimensionError(f"ViT projection {proj.shape} does not match feature map {f0.shape}")
            f = f + proj
        for stage in self.stages:
            COUNTERS["refine_stage"] += 1
            f = stage(f, f_t)
            if trace is not None:
                trace.append(np.abs(f.data).mean(axis=1))
        return f


def refine(f0: Tensor, f_t: Tensor | None, vit_tokens: Tensor | None, params: Refinement,
           trace: list | None = None) -> Tensor:
    if f0.ndim == 3:
        f_t = None if f_t is None else f_t.reshape(1, -1)
        vit_tokens = None if vit_tokens is None else vit_tokens.reshape((1,) + vit_tokens.shape)
        return params(f0.reshape((1,) + f0.shape), f_t, vit_tokens, trace)[0]
    return params(f0, f_t, vit_tokens, trace)


class ShuffleBlock(Module):
    """3x3 conv to ``4c`` channels, pixel shuffle by 2, ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, 4 * channels, 3, rng, stride=1, pad=1)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(F.pixel_shuffle(self.conv(x), 2))


class Decoder(Module):
    """Mirror of the LR encoder: 8x8 back to the LR size, adding encoder skips."""

    def __init__(self, channels: int, depth: int, rng: np.random.Generator):
        self.blocks = [ShuffleBlock(channels, rng) for _ in range(depth)]

    def forward(self, f: Tensor, skips: list[Tensor]) -> Tensor:
        for blk, skip in zip(self.blocks, reversed(skips)):
            f = blk(f) + skip
        return f


class Upsampler(Module):
    """``log2(scale)`` conv+shuffle blocks, then a 3x3 conv to RGB and a sigmoid.

    When the LR image is supplied the RGB conv predicts a correction in logit
    space on top of the bicubic upsample of the input, so an all-zero
    correction reproduces the bicubic baseline.
    """

    def __init__(self, channels: int, scale: int, rng: np.random.Generator):
        if scale not in SUPPORTED_SCALES:
            raise ConfigurationError(f"unsupported scale {scale}; expected one of {SUPPORTED_SCALES}")
        self.scale = scale
        self.blocks = [ShuffleBlock(channels, rng) for _ in range(int(math.log2(scale)))]
        self.to_rgb = Conv2d(channels, 3, 3, rng, gain=1.0)

    def forward(self, f: Tensor, lr: np.ndarray | None = None) -> Tensor:
        for blk in self.blocks:
            COUNTERS["upsample_block"] += 1
            f = blk(f)
        out = self.to_rgb(f)
        if lr is not None:
            out = out + bicubic_logits(lr, self.scale).astype(out.dtype)
        return F.sigmoid(out)


def bicubic_logits(lr: np.ndarray, scale: int, eps: float = 1e-3) -> np.ndarray:
    """``logit`` of the clipped bicubic upsample of ``(N, 3, h, w)`` pixels."""
    h, w = lr.shape[-2:]
    base = np.clip(resample_array(lr, h * scale, w * scale), eps, 1.0 - eps).astype(np.float64)
    return np.log(base) - np.log1p(-base)


def upsample(f: Tensor, params: Upsampler, scale: int) -> Tensor:
    if scale != params.scale:
        raise ConfigurationError(f"upsampler built for scale {params.scale}, asked for {scale}")
    if f.ndim == 3:
        return params(f.reshape((1,) + f.shape))[0]
    return params(f)


# ---------------------------------------------------------------------------
# full generator
# ---------------------------------------------------------------------------

class Generator(Module):
    """All trainable state of the SR network.

    The frozen text encoder and ViT are passed in at call time so the
    generator's parameter registry holds only what the SR trainer updates.
    """

    def __init__(self, rng: np.random.Generator, *, lr_size: int, scale: int, channels: int = 32,
                 d_text: int = 64, d_vit: int = 128, n_prompts: int = 4, depth: int = 4,
                 use_text: bool = True, use_vit: bool = True):
        if scale not in SUPPORTED_SCALES:
            raise ConfigurationError(f"unsupported scale {scale}; expected one of {SUPPORTED_SCALES}")
        self.use_text = use_text
        self.use_vit = use_vit and use_text
        self.encoder = ImageEncoder(lr_size, channels, rng)
        if self.use_vit:
            self.fuse = TIFBlock(channels, d_text, rng)
            self.to_tokens = Linear(channels, d_vit, rng)
            self.prompts = PromptPredictor(d_text, d_vit, n_prompts, rng)
        self.refinement = Refinement(channels, d_text, d_vit, depth, rng)
        self.decoder = Decoder(channels, self.encoder.depth, rng)
        self.upsampler = Upsampler(channels, scale, rng)

    @property
    def scale(self) -> int:
        return self.upsampler.scale

    def forward(self, lr: Tensor, text: TextFeatures | None = None, vit: MiniViT | None = None,
                trace: list | None = None) -> Tensor:
        f_i, skips = self.encoder(lr)
        f_t = text.pooled if (self.use_text and text is not None) else None
        if self.use_text and f_t is None:
            raise ConfigurationError("generator built with the text path needs caption features")
        vit_tokens = None
        if self.use_vit:
            if vit is None:
                raise ConfigurationError("generator built with the ViT path needs the frozen ViT")
            fused = self.fuse(f_i, f_t)
            n, c, g, _ = fused.shape
            tokens = self.to_tokens(fused.reshape(n, c, g * g).transpose(0, 2, 1))
            prompts = self.prompts(text.tokens, text.ids)
            COUNTERS["vit"] += 1
            feats, _ = vit(tokens, prompts)
            vit_tokens = feats[:, 1 + prompts.shape[1]:]
        f = self.refinement(f_i, f_t, vit_tokens, trace)
        f = self.decoder(f, skips)
        return self.upsampler(f, lr.data)


def generate(i_lr: Tensor, text: TextFeatures | None, params: Generator, vit: MiniViT | None = None) -> Tensor:
    """``I_SR`` for one ``(3, h, w)`` image or a batch."""
    if i_lr.ndim == 3:
        return params(i_lr.reshape((1,) + i_lr.shape), text, vit)[0]
    return params(i_lr, text, vit)
