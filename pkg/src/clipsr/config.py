"""Run configuration: INI-style ``key = value`` sections, flags override file.

Example::

    [model]
    scale = 4
    hr_size = 64

    [loss]
    lambda_adv = 0.01
    alpha = 4

    [ablation]
    use_text = true
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .errors import ValidationError

SECTIONS = {
    "model": ("scale", "hr_size", "channels", "depth", "n_prompts", "d_text", "d_vit", "max_len",
              "text_blocks", "vit_blocks", "patch", "clip_size"),
    "loss": ("lambda_adv", "alpha", "sigma", "disc_loss"),
    "optim": ("lr", "beta1", "beta2", "eps"),
    "train": ("batch_size", "epochs", "steps", "seed", "probe_size", "log_every", "edit_fraction"),
    "clip": ("clip_steps", "clip_batch", "clip_lr", "clip_beta1", "clip_beta2", "tau"),
    "ablation": ("use_text", "use_vit", "use_discriminator"),
}

# keys that change parameter shapes or wiring; checkpoints must agree on them
ARCH_KEYS = ("scale", "hr_size", "channels", "depth", "n_prompts", "d_text", "d_vit", "max_len",
             "text_blocks", "vit_blocks", "patch", "clip_size", "use_text", "use_vit")
CLIP_ARCH_KEYS = ("d_text", "d_vit", "max_len", "text_blocks", "vit_blocks", "patch", "clip_size")

VARIANTS = {
    (False, False, False): "1",
    (True, False, False): "2",
    (True, True, False): "3",
    (True, False, True): "4",
    (True, True, True): "ours",
}


@dataclass
class RunConfig:
    # model
    scale: int = 4
    hr_size: int = 64
    channels: int = 32
    depth: int = 4
    n_prompts: int = 4
    d_text: int = 64
    d_vit: int = 128
    max_len: int = 12
    text_blocks: int = 2
    vit_blocks: int = 2
    patch: int = 8
    clip_size: int = 64
    # loss
    lambda_adv: float = 0.01
    alpha: float = 4.0
    sigma: tuple[float, ...] = (0.2, 0.2, 0.2, 0.2, 0.2)
    disc_loss: str = "hinge"
    # optim
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    # train
    batch_size: int = 8
    epochs: int = 1
    steps: int = 0
    seed: int = 0
    probe_size: int = 8
    log_every: int = 50
    edit_fraction: float = 0.125
    # clip pretraining
    clip_steps: int = 1500
    clip_batch: int = 16
    clip_lr: float = 5e-4
    clip_beta1: float = 0.9
    clip_beta2: float = 0.999
    tau: float = 0.07
    # ablation
    use_text: bool = True
    use_vit: bool = True
    use_discriminator: bool = True

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.scale

    @property
    def text_on(self) -> bool:
        return self.use_text

    @property
    def vit_on(self) -> bool:
        return self.use_text and self.use_vit

    @property
    def disc_on(self) -> bool:
        return self.use_text and self.use_discriminator

    @property
    def variant(self) -> str:
        """Ablation variant name; text off collapses to variant 1."""
        return VARIANTS[(self.text_on, self.vit_on, self.disc_on)]

    def validate(self) -> "RunConfig":
        errs = []
        if self.scale not in (4, 8, 16):
            errs.append(f"scale must be 4, 8 or 16 (got {self.scale})")
        if self.hr_size % self.scale or self.lr_size not in (16, 32, 64):
            errs.append(f"hr_size {self.hr_size} / scale {self.scale} must give an LR size of 16, 32 or 64")
        if self.hr_size % self.clip_size:
            errs.append(f"hr_size {self.hr_size} must be a multiple of clip_size {self.clip_size}")
        if self.clip_size % self.patch or (self.clip_size // self.patch) != 8:
            errs.append("clip_size / patch must be 8 so ViT tokens tile the 8x8 feature grid")
        if self.depth < 0 or self.n_prompts < 1 or self.max_len < 2:
            errs.append("depth >= 0, n_prompts >= 1 and max_len >= 2 are required")
        if self.lambda_adv < 0 or self.alpha < 0 or any(s < 0 for s in self.sigma):
            errs.append("loss weights must be non-negative")
        if len(self.sigma) != 5:
            errs.append(f"sigma needs 5 entries, got {len(self.sigma)}")
        if self.disc_loss not in ("hinge", "logistic"):
            errs.append(f"disc_loss must be hinge or logistic (got {self.disc_loss})")
        if not 0.0 <= self.edit_fraction <= 1.0:
            errs.append(f"edit_fraction must lie in [0, 1] (got {self.edit_fraction})")
        if self.batch_size < 1 or self.clip_batch < 2:
            errs.append("batch_size >= 1 and clip_batch >= 2 are required")
        if errs:
            raise ValidationError("; ".join(errs))
        return self

    def total_steps(self, n_train: int) -> int:
        if self.steps > 0:
            return self.steps
        per_epoch = -(-n_train // self.batch_size)
        return self.epochs * per_epoch

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sigma"] = list(self.sigma)
        return d

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        values = self.to_dict()
        for section, keys in SECTIONS.items():
            cp[section] = {k: _format(values[k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(repr(float(x)) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("tuple"):
            return tuple(float(x) for x in raw.replace(",", " ").split())
        return raw
    except ValueError:
        raise ValidationError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    kw = {}
    for key, raw in overrides.items():
        key = key.split(".")[-1].replace("-", "_")
        if key not in known:
            raise ValidationError(f"unknown config key {key!r}")
        kw[key] = _parse_value(key, raw) if isinstance(raw, str) else raw
    return cfg.replace(**kw)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"config parse error: {exc}") from None
    overrides = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ValidationError(f"unknown config section [{section}]")
        for key, raw in cp[section].items():
            if key not in SECTIONS[section]:
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            overrides[key] = raw
    return apply_overrides(base or RunConfig(), overrides)


def load_config(path: str | None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read(), cfg)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate()


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    if "sigma" in d:
        d["sigma"] = tuple(d["sigma"])
    known = {f.name for f in fields(RunConfig)}
    return RunConfig(**{k: v for k, v in d.items() if k in known})


def arch_mismatches(a: dict, b: dict, keys=ARCH_KEYS) -> list[str]:
    return [f"{k}: {a.get(k)!r} != {b.get(k)!r}" for k in keys if a.get(k) != b.get(k)]
