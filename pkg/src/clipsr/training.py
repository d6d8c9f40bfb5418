"""Model assembly, training loops, evaluation and the editability probe.

Everything here is deterministic given the run config: parameter
initialisation and data order are drawn from keyed PCG64 streams, so a run
that is interrupted and resumed from a checkpoint visits the same batches.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, TextIO

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, prefixed, read_manifest, save_checkpoint
from .config import CLIP_ARCH_KEYS, RunConfig, config_from_dict
from .data import COLORS, PALETTE, SceneSpec, SplitData, render_scene
from .encoders import (
    MiniViT,
    TextEncoder,
    Vocabulary,
    build_vocab,
    contrastive_loss,
    contrastive_pretrain_step,
    retrieval_top1,
    token_batch,
    tokenize,
)
from .errors import InputError, ValidationError
from .generator import Generator, TextFeatures, encode_captions
from .imaging import resample_array
from .losses import DiscriminatorHead, LossWeights, PerceptualNet, rec_loss, train_step
from .metrics import psnr, region_mean_color, ssim
from .optim import Adam
from .rng import make_rng
from .tensor import Tensor, no_grad

MAX_PROMPTS = 8
LOG_FIELDS = ("step", "rec", "per", "adv", "disc", "total")


# ---------------------------------------------------------------------------
# frozen text/image encoders
# ---------------------------------------------------------------------------

@dataclass
class ClipBundle:
    """Vocabulary plus the two contrastive towers."""

    vocab: Vocabulary
    text_encoder: TextEncoder
    vit: MiniViT
    max_len: int

    def ids(self, captions) -> np.ndarray:
        return token_batch([tokenize(c, self.vocab, self.max_len) for c in captions])

    def arrays(self) -> dict[str, np.ndarray]:
        return {**prefixed("text_encoder", self.text_encoder.state_dict()), **prefixed("vit", self.vit.state_dict())}

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self.arrays().items()}

    def load_arrays(self, ckpt: Checkpoint) -> None:
        self.text_encoder.load_state_dict(ckpt.subset("text_encoder"))
        self.vit.load_state_dict(ckpt.subset("vit"))

    def freeze(self) -> "ClipBundle":
        self.text_encoder.freeze()
        self.vit.freeze()
        return self


def build_clip(cfg: RunConfig, vocab: Vocabulary) -> ClipBundle:
    rng = make_rng(cfg.seed, "clip-init")
    text = TextEncoder(len(vocab), cfg.max_len, rng, d_model=cfg.d_text, d_out=cfg.d_text, n_blocks=cfg.text_blocks)
    vit = MiniViT(rng, image_size=cfg.clip_size, patch=cfg.patch, d=cfg.d_vit, n_blocks=cfg.vit_blocks,
                  d_out=cfg.d_text, max_prompts=MAX_PROMPTS)
    return ClipBundle(vocab, text, vit, cfg.max_len)


def epoch_batches(n: int, batch: int, seed: int, stream: str, step: int, drop_last: bool = False) -> np.ndarray:
    """Indices for global ``step``: a fresh permutation per epoch."""
    per_epoch = n // batch if drop_last else -(-n // batch)
    if per_epoch < 1:
        raise InputError(f"{n} samples cannot fill a batch of {batch}")
    epoch, k = divmod(step, per_epoch)
    order = make_rng(seed, stream, epoch).permutation(n)
    return order[k * batch:(k + 1) * batch]


def pretrain_clip(train: SplitData, cfg: RunConfig, steps: int | None = None,
                  log: Callable[[int, float], None] | None = None) -> tuple[ClipBundle, list[float]]:
    """Contrastive pretraining from scratch; returns the bundle and the loss curve."""
    if len(train) < 2:
        raise InputError("contrastive pretraining needs at least 2 pairs")
    bundle = build_clip(cfg, build_vocab(train.captions))
    ids = bundle.ids(train.captions)
    params = bundle.text_encoder.parameters() + bundle.vit.parameters()
    opt = Adam(params, lr=cfg.clip_lr, betas=(cfg.clip_beta1, cfg.clip_beta2), eps=cfg.eps)
    batch = min(cfg.clip_batch, len(train))
    steps = cfg.clip_steps if steps is None else steps
    losses = []
    for step in range(steps):
        idx = epoch_batches(len(train), batch, cfg.seed, "clip-order", step, drop_last=True)
        loss = contrastive_pretrain_step(Tensor(train.hr[idx]), ids[idx], bundle.text_encoder, bundle.vit, opt, cfg.tau)
        losses.append(loss)
        if log is not None:
            log(step, loss)
    return bundle.freeze(), losses


def clip_retrieval(bundle: ClipBundle, data: SplitData, batch: int = 16) -> float:
    """Mean within-batch text-to-image top-1 accuracy over consecutive batches."""
    ids = bundle.ids(data.captions)
    scores = []
    for s in range(0, len(data) - batch + 1, batch):
        scores.append(retrieval_top1(Tensor(data.hr[s:s + batch]), ids[s:s + batch], bundle.text_encoder, bundle.vit))
    if not scores:
        raise InputError(f"need at least {batch} pairs for retrieval")
    return float(np.mean(scores))


def clip_loss_on(bundle: ClipBundle, data: SplitData, batch: int = 16, tau: float = 0.07) -> float:
    ids = bundle.ids(data.captions)
    vals = []
    with no_grad():
        for s in range(0, len(data) - batch + 1, batch):
            vals.append(contrastive_loss(Tensor(data.hr[s:s + batch]), ids[s:s + batch],
                                         bundle.text_encoder, bundle.vit, tau).item())
    return float(np.mean(vals))


def save_clip(path, bundle: ClipBundle, cfg: RunConfig, step: int = 0) -> None:
    meta = {"kind": "clip", "frozen": True, "vocab": list(bundle.vocab.tokens)}
    save_checkpoint(path, bundle.arrays(), cfg.to_dict(), step, meta)


def load_clip(path, cfg: RunConfig | None = None) -> tuple[ClipBundle, RunConfig]:
    """Load encoders; ``cfg`` (if given) must agree on the encoder architecture."""
    header = read_manifest(path)
    meta = header.get("meta", {})
    if meta.get("kind") != "clip":
        raise ValidationError(f"{path} is not an encoder checkpoint (kind={meta.get('kind')!r})")
    saved = config_from_dict(header["config"])
    use = cfg if cfg is not None else saved
    bundle = build_clip(use, Vocabulary(tuple(meta["vocab"])))
    ckpt = load_checkpoint(path, bundle.shapes(), use.to_dict() if cfg is not None else None, CLIP_ARCH_KEYS)
    bundle.load_arrays(ckpt)
    return bundle.freeze(), saved


# ---------------------------------------------------------------------------
# super-resolution model
# ---------------------------------------------------------------------------

@dataclass
class SRModel:
    cfg: RunConfig
    generator: Generator
    head: DiscriminatorHead | None
    clip: ClipBundle | None

    def text(self, captions) -> TextFeatures | None:
        if not self.cfg.text_on:
            return None
        return encode_captions(self.clip.text_encoder, self.clip.ids(captions))

    def super_resolve(self, lr: np.ndarray, captions, chunk: int = 16, trace: list | None = None) -> np.ndarray:
        """SR output for ``(N, 3, h, w)`` LR arrays, computed without a graph."""
        lr = np.asarray(lr, dtype=np.float32)
        if lr.ndim != 4 or lr.shape[-1] != self.cfg.lr_size or lr.shape[-2] != self.cfg.lr_size:
            raise ValidationError(f"model expects LR inputs of {self.cfg.lr_size}x{self.cfg.lr_size}, got {lr.shape}")
        captions = list(captions)
        if self.cfg.text_on and len(captions) != len(lr):
            raise InputError(f"{len(lr)} images but {len(captions)} captions")
        vit = self.clip.vit if self.cfg.vit_on else None
        outs = []
        with no_grad():
            for s in range(0, len(lr), chunk):
                text = self.text(captions[s:s + chunk])
                outs.append(self.generator(Tensor(lr[s:s + chunk]), text, vit, trace).data)
        return np.concatenate(outs)

    def arrays(self) -> dict[str, np.ndarray]:
        out = prefixed("generator", self.generator.state_dict())
        if self.head is not None:
            out.update(prefixed("head", self.head.state_dict()))
        if self.clip is not None:
            out.update(self.clip.arrays())
        return out

    def meta(self) -> dict:
        meta = {"kind": "sr", "variant": self.cfg.variant}
        if self.clip is not None:
            meta["vocab"] = list(self.clip.vocab.tokens)
        return meta


def build_sr(cfg: RunConfig, clip: ClipBundle | None) -> SRModel:
    cfg.validate()
    if cfg.text_on and clip is None:
        raise ValidationError("the text path needs pretrained encoders")
    if cfg.n_prompts > MAX_PROMPTS:
        raise ValidationError(f"n_prompts {cfg.n_prompts} exceeds {MAX_PROMPTS}")
    rng = make_rng(cfg.seed, "sr-init")
    gen = Generator(rng, lr_size=cfg.lr_size, scale=cfg.scale, channels=cfg.channels, d_text=cfg.d_text,
                    d_vit=cfg.d_vit, n_prompts=cfg.n_prompts, depth=cfg.depth,
                    use_text=cfg.text_on, use_vit=cfg.vit_on)
    head = DiscriminatorHead(cfg.d_text, make_rng(cfg.seed, "disc-init")) if cfg.disc_on else None
    return SRModel(cfg, gen, head, clip if cfg.text_on else None)


def perceptual_net() -> PerceptualNet:
    """The fixed feature network; its weights come from a constant stream."""
    return PerceptualNet(make_rng(0, "perceptual"))


@dataclass
class SRTrainer:
    """Owns the optimizers and the step counter for one SR run."""

    model: SRModel
    train: SplitData
    step: int = 0
    phi: PerceptualNet = field(default_factory=perceptual_net)

    def __post_init__(self):
        cfg = self.model.cfg
        if len(self.train) == 0:
            raise InputError("training split is empty")
        betas = (cfg.beta1, cfg.beta2)
        self.opt_g = Adam(self.model.generator.parameters(), lr=cfg.lr, betas=betas, eps=cfg.eps)
        self.opt_d = Adam(self.model.head.parameters(), lr=cfg.lr, betas=betas, eps=cfg.eps) if self.model.head else None
        self.weights = LossWeights(cfg.lambda_adv, cfg.alpha, tuple(cfg.sigma))
        self.ids = self.model.clip.ids(self.train.captions) if cfg.text_on else None
        self.probe = np.arange(min(cfg.probe_size, len(self.train)))

    def batch(self, step: int) -> dict:
        cfg = self.model.cfg
        idx = epoch_batches(len(self.train), cfg.batch_size, cfg.seed, "sr-order", step)
        b = {"lr": self.train.lr[idx], "hr": self.train.hr[idx]}
        if self.ids is not None:
            b["ids"] = self.ids[idx]
        k = int(round(cfg.edit_fraction * len(idx)))
        if cfg.text_on and k > 0:
            r = make_rng(cfg.seed, "edit-captions", step)
            known = set(self.model.clip.vocab.tokens)
            size = self.train.hr.shape[-1]
            edits, targets = [], []
            for i in idx[:k]:
                spec = self.train.specs[i]
                options = [c for c in COLORS if c not in (spec.color, spec.background) and c in known]
                if not options:
                    break
                color = options[r.integers(len(options))]
                edits.append(swap_color(self.train.captions[i], color))
                targets.append(render_scene(replace(spec, color=color), size).quantized().to_chw())
            if edits:
                b["edit_ids"] = self.model.clip.ids(edits)
                b["edit_hr"] = np.stack(targets).astype(np.float32)
        return b

    def train_step(self) -> dict[str, float]:
        cfg = self.model.cfg
        clip = self.model.clip
        out = train_step(self.batch(self.step), self.model.generator, self.model.head,
                         text_encoder=clip.text_encoder if clip else None,
                         vit=clip.vit if clip else None, phi=self.phi, opt_g=self.opt_g, opt_d=self.opt_d,
                         weights=self.weights, use_text=cfg.text_on, use_discriminator=cfg.disc_on,
                         disc_kind=cfg.disc_loss)
        out = {"step": self.step, **out}
        self.step += 1
        return out

    def run(self, steps: int, log: TextIO | None = None, progress: Callable[[dict], None] | None = None) -> list[dict]:
        rows = []
        for _ in range(steps):
            row = self.train_step()
            rows.append(row)
            if log is not None:
                log.write(format_log_row(row) + "\n")
            if progress is not None:
                progress(row)
        if log is not None:
            log.flush()
        return rows

    def probe_rec(self) -> float:
        """Reconstruction loss on the fixed probe batch (first training pairs)."""
        idx = self.probe
        captions = [self.train.captions[i] for i in idx]
        sr = self.model.super_resolve(self.train.lr[idx], captions)
        return float(rec_loss(Tensor(sr), self.train.hr[idx]).item())

    def arrays(self) -> dict[str, np.ndarray]:
        out = self.model.arrays()
        out.update(prefixed("opt_g", self.opt_g.state_arrays()))
        if self.opt_d is not None:
            out.update(prefixed("opt_d", self.opt_d.state_arrays()))
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays(), self.model.cfg.to_dict(), self.step, self.model.meta())

    def restore(self, ckpt: Checkpoint) -> None:
        load_sr_arrays(self.model, ckpt)
        self.opt_g.load_state_arrays(ckpt.subset("opt_g"))
        if self.opt_d is not None:
            self.opt_d.load_state_arrays(ckpt.subset("opt_d"))
        self.step = ckpt.step


def format_log_row(row: dict) -> str:
    return ",".join(str(row["step"]) if k == "step" else f"{row[k]:.8g}" for k in LOG_FIELDS)


def _opt_shapes(prefix: str, params, with_moments: bool) -> dict[str, tuple]:
    out = {f"{prefix}.step": (1,)}
    if with_moments:
        for i, p in enumerate(params):
            out[f"{prefix}.m.{i}"] = p.shape
            out[f"{prefix}.v.{i}"] = p.shape
    return out


def sr_expected_shapes(model: SRModel, header: dict) -> dict[str, tuple]:
    shapes = {k: v.shape for k, v in model.arrays().items()}
    names = {e["name"] for e in header["entries"]}
    if "opt_g.step" in names:
        shapes.update(_opt_shapes("opt_g", model.generator.parameters(), "opt_g.m.0" in names))
        if model.head is not None:
            shapes.update(_opt_shapes("opt_d", model.head.parameters(), "opt_d.m.0" in names))
    return shapes


def load_sr_arrays(model: SRModel, ckpt: Checkpoint) -> None:
    model.generator.load_state_dict(ckpt.subset("generator"))
    if model.head is not None:
        model.head.load_state_dict(ckpt.subset("head"))
    if model.clip is not None:
        model.clip.load_arrays(ckpt)


def load_sr(path, cfg: RunConfig | None = None) -> tuple[SRModel, Checkpoint]:
    """Rebuild an SR model from its checkpoint; ``cfg`` must match on architecture keys."""
    header = read_manifest(path)
    meta = header.get("meta", {})
    if meta.get("kind") != "sr":
        raise ValidationError(f"{path} is not an SR checkpoint (kind={meta.get('kind')!r})")
    saved = config_from_dict(header["config"])
    use = saved if cfg is None else cfg
    clip = None
    if use.text_on:
        clip = build_clip(use, Vocabulary(tuple(meta.get("vocab", ()))))
    model = build_sr(use, clip)
    ckpt = load_checkpoint(path, sr_expected_shapes(model, header), use.to_dict())
    load_sr_arrays(model, ckpt)
    if clip is not None:
        clip.freeze()
    return model, ckpt


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def hwc(chw: np.ndarray) -> np.ndarray:
    return np.asarray(chw).transpose(1, 2, 0)


def bicubic_upsample(lr: np.ndarray, scale: int) -> np.ndarray:
    h, w = lr.shape[-2:]
    return resample_array(lr, h * scale, w * scale)


def evaluate(model: SRModel, split: SplitData, name: str = "test") -> dict:
    """Mean PSNR/SSIM of the model and of bicubic upsampling against HR."""
    if len(split) == 0:
        raise InputError(f"split {name!r} is empty")
    sr = model.super_resolve(split.lr, split.captions)
    base = bicubic_upsample(split.lr, model.cfg.scale)
    rows = {}
    for method, imgs in (("model", sr), ("bicubic", base)):
        pairs = [(hwc(a), hwc(b)) for a, b in zip(imgs, split.hr)]
        p = [psnr(a, b) for a, b in pairs]
        s = [ssim(a, b) for a, b in pairs]
        rows[method] = {"psnr": float(np.mean(p)), "ssim": float(np.mean(s))}
    return {"split": name, "count": len(split), "scale": model.cfg.scale, "variant": model.cfg.variant, **rows}


def format_report(report: dict) -> str:
    lines = [
        "[eval]",
        f"split = {report['split']}",
        f"count = {report['count']}",
        f"scale = {report['scale']}",
        f"variant = {report['variant']}",
    ]
    for method in ("model", "bicubic"):
        lines += ["", f"[{method}]", f"psnr = {report[method]['psnr']:.6f}", f"ssim = {report[method]['ssim']:.6f}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# editability probe
# ---------------------------------------------------------------------------

def swap_color(caption: str, new_color: str) -> str:
    """Replace the object colour word (the second word of a scene caption)."""
    words = caption.split()
    if len(words) < 2 or words[1] not in PALETTE:
        raise InputError(f"caption has no object colour word: {caption!r}")
    words[1] = new_color
    return " ".join(words)


def edit_target(spec: SceneSpec, index: int) -> str:
    """A palette colour different from both the object and the background."""
    options = [c for c in COLORS if c not in (spec.color, spec.background)]
    return options[index % len(options)]


def edit_probe(model: SRModel, split: SplitData, n: int = 10) -> list[dict]:
    """Swap each caption's colour word and measure the bbox colour shift.

    A scene counts as shifted when the edited output's bbox mean colour is
    strictly closer to the named colour than the original output's.
    """
    if not model.cfg.text_on:
        raise ValidationError("editability needs the text path")
    n = min(n, len(split))
    results = []
    for i in range(n):
        spec = split.specs[i]
        target = edit_target(spec, i)
        lr = split.lr[i:i + 1]
        orig = model.super_resolve(lr, [split.captions[i]])[0]
        edited = model.super_resolve(lr, [swap_color(split.captions[i], target)])[0]
        goal = np.asarray(PALETTE[target])
        m0 = region_mean_color(hwc(orig), split.bboxes[i])
        m1 = region_mean_color(hwc(edited), split.bboxes[i])
        d0 = float(np.linalg.norm(m0 - goal))
        d1 = float(np.linalg.norm(m1 - goal))
        results.append({"index": i, "target": target, "before": d0, "after": d1, "shifted": d1 < d0})
    return results


def refinement_heatmaps(model: SRModel, lr: np.ndarray, caption: str) -> list[np.ndarray]:
    """Per-stage mean |activation| maps of the refinement module for one image."""
    trace: list = []
    model.super_resolve(lr[None] if lr.ndim == 3 else lr, [caption], trace=trace)
    return [t[0] for t in trace]


class Timer:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start
