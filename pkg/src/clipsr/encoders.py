"""Tokenizer, text encoder, LR image encoder and the miniature ViT.

The text encoder and the ViT form a CLIP-style pair trained with a symmetric
contrastive objective (:func:`contrastive_pretrain_step`) and then frozen;
the generator and the discriminator consume them read-only.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DimensionError, InputError
from .nn import Conv2d, LayerNorm, Linear, MLP, Module, normal_param
from .optim import Adam
from .tensor import Tensor, backward, concat, no_grad

PAD, EOS, UNK = "<pad>", "<eos>", "<unk>"
PAD_ID, EOS_ID, UNK_ID = 0, 1, 2
MASK_VALUE = -1e9


# ---------------------------------------------------------------------------
# tokenization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:3] != (PAD, EOS, UNK):
            raise ValueError("vocabulary must start with PAD, EOS, UNK")

    @property
    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        return self.index.get(word, UNK_ID)


def _words(caption: str) -> list[str]:
    return caption.lower().split()


def build_vocab(corpus: Sequence[str]) -> Vocabulary:
    """Vocabulary over lowercase whitespace tokens.

    Words are ordered by descending frequency with lexicographic tie-break,
    so any corpus with the same word multiset yields the same ids.
    """
    if not corpus:
        raise InputError("cannot build a vocabulary from an empty corpus")
    counts = Counter(w for c in corpus for w in _words(c))
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocabulary((PAD, EOS, UNK) + tuple(ordered))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    caption: str

    @property
    def eos_index(self) -> int:
        return self.ids.index(EOS_ID)


def tokenize(caption: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    index = vocab.index
    ids = [index.get(w, UNK_ID) for w in _words(caption)][: max_len - 1]
    ids.append(EOS_ID)
    ids.extend([PAD_ID] * (max_len - len(ids)))
    return TokenSequence(tuple(ids), caption)


def token_batch(seqs: Sequence[TokenSequence]) -> np.ndarray:
    return np.array([s.ids for s in seqs], dtype=np.int64)


def padding_mask(ids: np.ndarray, dtype=np.float32, n_prefix: int = 0) -> np.ndarray:
    """Additive key mask ``(N, 1, n_prefix + L)`` hiding PAD positions."""
    mask = np.where(ids == PAD_ID, MASK_VALUE, 0.0).astype(dtype)
    if n_prefix:
        mask = np.concatenate([np.zeros((ids.shape[0], n_prefix), dtype=dtype), mask], axis=1)
    return mask[:, None, :]


# ---------------------------------------------------------------------------
# transformer pieces
# ---------------------------------------------------------------------------

class SelfAttention(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def forward(self, x: Tensor, mask=None, return_weights: bool = False):
        h, w = F.scaled_dot_attention(self.q(x), self.k(x), self.v(x), mask, return_weights=True)
        out = self.out(h)
        return (out, w) if return_weights else out


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, d: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, rng)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng)

    def forward(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


# ---------------------------------------------------------------------------
# text encoder
# ---------------------------------------------------------------------------

class TextEncoder(Module):
    def __init__(self, vocab_size: int, max_len: int, rng: np.random.Generator,
                 d_model: int = 64, d_out: int = 64, n_blocks: int = 2):
        self.max_len = max_len
        self.tok_emb = normal_param(rng, (vocab_size, d_model), 0.5)
        self.pos_emb = normal_param(rng, (max_len, d_model), 0.1)
        self.blocks = [TransformerBlock(d_model, rng) for _ in range(n_blocks)]
        self.ln_final = LayerNorm(d_model)
        self.proj = Linear(d_model, d_out, rng)

    @property
    def d_out(self) -> int:
        return self.proj.weight.shape[1]

    def forward(self, ids: np.ndarray) -> tuple[Tensor, Tensor]:
        """Encode ``(N, L)`` token ids into pooled ``(N, d_out)`` and per-token ``(N, L, d_out)``.

        The pooled vector is read at each row's EOS position; PAD keys are
        masked out of attention so padding never leaks into real tokens.
        """
        ids = np.asarray(ids, dtype=np.int64)
        n, length = ids.shape
        if length > self.max_len:
            raise DimensionError(f"sequence length {length} exceeds encoder max_len {self.max_len}")
        x = self.tok_emb[ids] + self.pos_emb[:length]
        mask = padding_mask(ids, x.dtype)
        for blk in self.blocks:
            x = blk(x, mask)
        seq = self.proj(self.ln_final(x))
        eos = np.argmax(ids == EOS_ID, axis=1)
        pooled = seq[np.arange(n), eos]
        return pooled, seq


def encode_text(tokens: TokenSequence | Sequence[TokenSequence], params: TextEncoder) -> tuple[Tensor, Tensor]:
    """``F_T`` for one sequence (``[d_t]``, ``[L, d_t]``) or a batch."""
    if isinstance(tokens, TokenSequence):
        pooled, seq = params(np.array([tokens.ids]))
        return pooled[0], seq[0]
    return params(token_batch(tokens))


# ---------------------------------------------------------------------------
# LR image encoder
# ---------------------------------------------------------------------------

SUPPORTED_LR_SIZES = (16, 32, 64)


class ImageEncoder(Module):
    """Stem conv then ``log2(size / 8)`` stride-2 stages down to an 8x8 map.

    ``forward`` also returns the intermediate maps (finest first) so a
    decoder can reuse them as skips.
    """

    def __init__(self, lr_size: int, channels: int, rng: np.random.Generator):
        if lr_size not in SUPPORTED_LR_SIZES:
            raise ConfigurationError(f"unsupported LR size {lr_size}; expected one of {SUPPORTED_LR_SIZES}")
        self.lr_size = lr_size
        self.depth = int(math.log2(lr_size // 8))
        self.stem = Conv2d(3, channels, 3, rng)
        self.down = [Conv2d(channels, channels, 4, rng, stride=2, pad=1) for _ in range(self.depth)]

    def forward(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"image encoder expects (N, 3, H, W), got {x.shape}")
        if x.shape[2] != self.lr_size or x.shape[3] != self.lr_size:
            raise ConfigurationError(f"image encoder built for {self.lr_size}px input, got {x.shape[2:]}")
        h = F.relu(self.stem(x))
        skips = [h]
        for conv in self.down:
            h = F.relu(conv(h))
            skips.append(h)
        return h, skips[:-1]


def encode_image_lr(i_lr: Tensor, params: ImageEncoder) -> Tensor:
    """``F_I`` for a single ``(3, h, w)`` image or a batch."""
    if i_lr.ndim == 3:
        return params(i_lr.reshape((1,) + i_lr.shape))[0][0]
    return params(i_lr)[0]


# ---------------------------------------------------------------------------
# miniature vision transformer
# ---------------------------------------------------------------------------

class MiniViT(Module):
    """Patch-token ViT with optional prompt tokens after the class token."""

    def __init__(self, rng: np.random.Generator, image_size: int = 64, patch: int = 8, d: int = 128,
                 n_blocks: int = 2, d_out: int = 64, max_prompts: int = 8):
        if image_size % patch:
            raise ConfigurationError(f"image size {image_size} not divisible by patch {patch}")
        self.image_size = image_size
        self.patch = patch
        self.grid = image_size // patch
        n_patches = self.grid * self.grid
        self.patch_embed = Linear(3 * patch * patch, d, rng)
        self.cls = normal_param(rng, (d,), 0.02)
        self.pos_emb = normal_param(rng, (1 + n_patches, d), 0.02)
        self.prompt_pos = normal_param(rng, (max_prompts, d), 0.02)
        self.blocks = [TransformerBlock(d, rng) for _ in range(n_blocks)]
        self.ln_final = LayerNorm(d)
        self.proj = Linear(d, d_out, rng, bias=False)

    @property
    def width(self) -> int:
        return self.cls.shape[0]

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    def patchify(self, images: Tensor) -> Tensor:
        n, c, h, w = images.shape
        if h != w:
            raise DimensionError(f"ViT expects square images, got {images.shape}")
        if h != self.image_size:
            if h % self.image_size:
                raise ConfigurationError(f"cannot pool {h}px image to ViT size {self.image_size}")
            images = F.avg_pool2d(images, h // self.image_size)
        g, p = self.grid, self.patch
        x = images.reshape(n, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(n, g * g, c * p * p)

    def forward(self, patch_tokens: Tensor, prompts: Tensor | None = None,
                return_attention: bool = False):
        """Run the blocks on ``[cls, prompts..., patches...]``.

        Returns token features ``(N, 1 + K + P, d)`` and the pooled class-token
        projection ``(N, d_out)``.
        """
        n, p, d = patch_tokens.shape
        if d != self.width:
            raise DimensionError(f"patch tokens have width {d}, ViT expects {self.width}")
        if p != self.n_patches:
            raise DimensionError(f"expected {self.n_patches} patch tokens, got {p}")
        cls = (self.cls + self.pos_emb[0]).reshape(1, 1, d) + Tensor(np.zeros((n, 1, d), dtype=patch_tokens.dtype))
        parts = [cls]
        if prompts is not None and prompts.shape[1] > 0:
            k = prompts.shape[1]
            if prompts.shape[2] != d:
                raise DimensionError(f"prompt width {prompts.shape[2]} differs from ViT width {d}")
            if k > self.prompt_pos.shape[0]:
                raise DimensionError(f"{k} prompts exceed ViT capacity {self.prompt_pos.shape[0]}")
            parts.append(prompts + self.prompt_pos[:k])
        parts.append(patch_tokens + self.pos_emb[1:])
        x = concat(parts, axis=1)
        maps = []
        for blk in self.blocks:
            if return_attention:
                a, w = blk.attn(blk.ln1(x), None, return_weights=True)
                maps.append(w.data)
                x = x + a
                x = x + blk.mlp(blk.ln2(x))
            else:
                x = blk(x)
        x = self.ln_final(x)
        pooled = self.proj(x[:, 0])
        if return_attention:
            return x, pooled, maps
        return x, pooled

    def embed_images(self, images: Tensor) -> Tensor:
        """Unit-norm joint-space embeddings for ``(N, 3, H, W)`` images."""
        tokens = self.patch_embed(self.patchify(images))
        _, pooled = self(tokens)
        return F.l2_normalize(pooled, axis=-1)


def vit_forward(patch_tokens: Tensor, prompts: Tensor | None, params: MiniViT):
    """Single-sample convenience wrapper around :meth:`MiniViT.forward`."""
    if patch_tokens.ndim == 2:
        patch_tokens = patch_tokens.reshape((1,) + patch_tokens.shape)
        if prompts is not None:
            prompts = prompts.reshape((1,) + prompts.shape)
        tokens, pooled = params(patch_tokens, prompts)
        return tokens[0], pooled[0]
    return params(patch_tokens, prompts)


def embed_image_for_clip(image: Tensor, params: MiniViT) -> Tensor:
    if image.ndim == 3:
        return params.embed_images(image.reshape((1,) + image.shape))[0]
    return params.embed_images(image)


# ---------------------------------------------------------------------------
# contrastive pretraining
# ---------------------------------------------------------------------------

TEMPERATURE = 0.07


def clip_loss_from_similarity(sim: Tensor, tau: float = TEMPERATURE) -> Tensor:
    """Symmetric cross-entropy over ``sim / tau`` with matches on the diagonal."""
    n = sim.shape[0]
    if n < 2:
        raise InputError("contrastive loss needs a batch of at least 2 pairs")
    logits = sim * (1.0 / tau)
    target = np.arange(n)
    return (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) * 0.5


def text_embeddings(text_encoder: TextEncoder, ids: np.ndarray) -> Tensor:
    pooled, _ = text_encoder(ids)
    return F.l2_normalize(pooled, axis=-1)


def contrastive_loss(images: Tensor, ids: np.ndarray, text_encoder: TextEncoder, vit: MiniViT,
                     tau: float = TEMPERATURE) -> Tensor:
    img = vit.embed_images(images)
    txt = text_embeddings(text_encoder, ids)
    return clip_loss_from_similarity(txt @ img.T, tau)


def contrastive_pretrain_step(images: Tensor, ids: np.ndarray, text_encoder: TextEncoder, vit: MiniViT,
                              opt: Adam, tau: float = TEMPERATURE) -> float:
    """One optimizer update of both towers; returns the loss before the update."""
    if images.shape[0] < 2:
        raise InputError("contrastive pretraining needs a batch of at least 2 pairs")
    opt.zero_grad()
    loss = contrastive_loss(images, ids, text_encoder, vit, tau)
    backward(loss)
    opt.step()
    return loss.item()


def retrieval_top1(images: Tensor, ids: np.ndarray, text_encoder: TextEncoder, vit: MiniViT) -> float:
    """Fraction of captions whose most similar in-batch image is their own."""
    with no_grad():
        img = vit.embed_images(images).data
        txt = text_embeddings(text_encoder, ids).data
    sim = txt @ img.T
    return float(np.mean(sim.argmax(axis=1) == np.arange(len(sim))))
