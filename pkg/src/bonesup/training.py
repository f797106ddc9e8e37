"""Paired (conditional GAN + L1) and unpaired (two-way GAN + cycle) training."""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ConfigError, DivergenceError, NumericError
from .losses import adv_loss_discriminator, adv_loss_generator, l1_loss
from .metrics import ssim
from .networks import NORM_MODES, Discriminator, Generator, check_image_size, default_depth
from .optim import Adam
from .seeding import derive_seed
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

MODES = ("paired", "unpaired")
ROLES = {"paired": ("G", "D"), "unpaired": ("G_ST", "G_TS", "D_S", "D_T")}
MAX_IMAGE_SIZE = 512


@dataclass
class TrainConfig:
    mode: str = "paired"
    image_size: int = 64
    depth: int | None = None  # None: 3 at 64 px, one more per doubling
    gen_channels: int = 16
    disc_levels: int = 3
    disc_channels: int = 16
    norm_mode: str | None = None  # None: batch for paired, instance for unpaired
    batch_size: int = 1
    epochs: int = 10
    max_steps: int | None = None
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    seed: int = 0
    lambda_l1: float = 100.0
    lambda_cycle: float = 10.0
    adversarial_variant: str | None = None  # None: bce for paired, least_squares for unpaired
    checkpoint_every: int = 0
    probe_size: int = 16

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.depth is None:
            self.depth = default_depth(self.image_size)
        if self.norm_mode is None:
            self.norm_mode = "batch" if self.mode == "paired" else "instance"
        if self.adversarial_variant is None:
            self.adversarial_variant = "bce" if self.mode == "paired" else "least_squares"
        if not 1 <= self.image_size <= MAX_IMAGE_SIZE:
            raise ConfigError(f"image_size must be in [1, {MAX_IMAGE_SIZE}]")
        check_image_size(self.image_size, self.depth)
        if self.image_size % 2**self.disc_levels:
            raise ConfigError("image_size not divisible by 2^disc_levels")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        for name in ("learning_rate", "batch_size", "epochs", "gen_channels", "disc_channels"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        for name in ("lambda_l1", "lambda_cycle"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0")
        if self.adversarial_variant not in ("bce", "least_squares"):
            raise ConfigError("adversarial_variant must be bce or least_squares")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class TranslationModel:
    """Networks (keyed by role) and their optimizer states.

    Roles are ``G``/``D`` for paired mode and ``G_ST``, ``G_TS``, ``D_S``,
    ``D_T`` for unpaired mode; ``G_ST`` maps standard to bone-suppressed.
    """

    mode: str
    nets: dict
    optimizers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if tuple(self.nets) != ROLES[self.mode]:
            raise ConfigError(f"{self.mode} model needs roles {ROLES[self.mode]}, got {tuple(self.nets)}")

    def generator(self, direction="forward"):
        if self.mode == "paired":
            if direction != "forward":
                raise ConfigError("a paired model only translates forward")
            return self.nets["G"]
        return self.nets["G_ST" if direction == "forward" else "G_TS"]

    def translate(self, images, direction="forward"):
        """Map (N, H, W) images in [0, 1] through a generator, one image at a time.

        Single-image batches keep each output independent of its neighbours
        (batch normalization uses the statistics of the batch it sees).
        """
        gen = self.generator(direction)
        images = np.asarray(images, dtype=np.float32)
        out = np.empty_like(images)
        with no_grad():
            for i, img in enumerate(images):
                x = Tensor(img[None, None] * 2.0 - 1.0)
                out[i] = (gen(x).data[0, 0] + 1.0) * 0.5
        return out


def build_model(config: TrainConfig) -> TranslationModel:
    c = config
    nets = {}
    for role in ROLES[c.mode]:
        s = derive_seed(c.seed, role)
        if role.startswith("G"):
            nets[role] = Generator(c.depth, c.gen_channels, c.norm_mode, s, image_size=c.image_size)
        else:
            nets[role] = Discriminator(c.disc_levels, c.disc_channels, c.mode == "paired", s, norm_mode=c.norm_mode)
    model = TranslationModel(c.mode, nets)
    for role, net in nets.items():
        model.optimizers[role] = Adam(net.named_parameters(), c.learning_rate, c.adam_beta1, c.adam_beta2)
    return model


def _to_batch(images):
    """(N, H, W) or (N, 1, H, W) array in [-1, 1] -> float32 (N, 1, H, W)."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ConfigError(f"expected (N, H, W) images, got shape {arr.shape}")
    return arr


def to_signed(images):
    """[0, 1] -> [-1, 1]."""
    return np.asarray(images, dtype=np.float32) * 2.0 - 1.0


def _epoch_orders(rng, n, length):
    """Index sequence of ``length`` built from fresh permutations of range(n)."""
    reps = -(-length // n)
    return np.concatenate([rng.permutation(n) for _ in range(reps)])[:length]


def _check_finite(values, where):
    for name, v in values.items():
        if not math.isfinite(v):
            raise DivergenceError(f"{where}: loss {name} is {v}")


def _mean_ssim(gen, sources, targets):
    scores = []
    with no_grad():
        for x, y in zip(sources, targets):
            out = gen(Tensor(x[None]))
            scores.append(ssim((out.data[0, 0] + 1) / 2, (y[0] + 1) / 2))
    return float(np.mean(scores))


class History:
    """Per-epoch training record; written as TSV."""

    def __init__(self, columns):
        self.columns = list(columns)
        self.rows = []

    def append(self, **values):
        self.rows.append({c: values.get(c) for c in self.columns})

    def column(self, name):
        return [r[name] for r in self.rows]

    def __len__(self):
        return len(self.rows)

    def to_tsv(self):
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.6g}"
            return str(v)

        lines = ["\t".join(self.columns)]
        lines += ["\t".join(fmt(r[c]) for c in self.columns) for r in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_tsv())


def _maybe_checkpoint(model, config, step, checkpoint_dir):
    if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
        from .checkpoint import save_checkpoint

        save_checkpoint(model, os.path.join(checkpoint_dir, f"step_{step:07d}.bsgc"))


def _steps_per_epoch(n, batch_size):
    return max(1, n // batch_size)


def train_paired(pairs, config: TrainConfig, validation=None, checkpoint_dir=None):
    """Train G and a conditional D on aligned (source, target) images in [-1, 1].

    Each step first updates D on the real pair (x_s, x_t) against the fake
    pair (x_s, G(x_s)) with G's output detached, then updates G on the
    non-saturating adversarial loss plus ``lambda_l1`` times the L1 distance
    to x_t.  Returns ``(model, history)``.
    """
    if config.mode != "paired":
        raise ConfigError("train_paired needs mode='paired'")
    sources, targets = (_to_batch(a) for a in pairs)
    if len(sources) == 0:
        raise ConfigError("empty dataset")
    if sources.shape != targets.shape:
        raise ConfigError(f"sources {sources.shape} and targets {targets.shape} differ")
    if validation is not None:
        validation = tuple(_to_batch(a) for a in validation)

    model = build_model(config)
    G, D = model.nets["G"], model.nets["D"]
    opt_g, opt_d = model.optimizers["G"], model.optimizers["D"]
    variant = config.adversarial_variant
    rng = np.random.default_rng(derive_seed(config.seed, "order"))
    history = History(["epoch", "step", "d_loss", "g_adv", "g_l1", "val_ssim"])
    bs = config.batch_size
    n_steps = _steps_per_epoch(len(sources), bs)
    step = 0
    for epoch in range(1, config.epochs + 1):
        if config.max_steps is not None and step >= config.max_steps:
            break
        order = _epoch_orders(rng, len(sources), n_steps * bs)
        sums = {"d_loss": 0.0, "g_adv": 0.0, "g_l1": 0.0}
        done = 0
        for k in range(n_steps):
            if config.max_steps is not None and step >= config.max_steps:
                break
            idx = order[k * bs : (k + 1) * bs]
            xs, xt = Tensor(sources[idx]), Tensor(targets[idx])
            try:
                with no_grad():
                    fake = G(xs)
                d_loss = adv_loss_discriminator(D(xs, xt), D(xs, fake), variant)
                opt_d.zero_grad()
                backward(d_loss)
                opt_d.step()

                D.set_requires_grad(False)
                try:
                    fake = G(xs)
                    g_adv = adv_loss_generator(D(xs, fake), variant)
                    g_l1 = l1_loss(fake, xt)
                    g_loss = g_adv + g_l1 * config.lambda_l1
                    opt_g.zero_grad()
                    backward(g_loss)
                    opt_g.step()
                finally:
                    D.set_requires_grad(True)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch} step {step + 1}: {exc}") from exc
            values = {"d_loss": d_loss.item(), "g_adv": g_adv.item(), "g_l1": g_l1.item()}
            _check_finite(values, f"epoch {epoch} step {step + 1}")
            for key, v in values.items():
                sums[key] += v
            done += 1
            step += 1
            _maybe_checkpoint(model, config, step, checkpoint_dir)
        if done == 0:
            break
        val = _mean_ssim(G, *validation) if validation is not None else None
        history.append(epoch=epoch, step=step, val_ssim=val, **{k: v / done for k, v in sums.items()})
        log.info("paired epoch %d: %s", epoch, history.rows[-1])
    return model, history


def canonical_order(images):
    """Content-derived ordering, so a pool's input order does not matter."""
    keys = [hashlib.sha256(np.ascontiguousarray(img).tobytes()).digest() for img in images]
    return sorted(range(len(images)), key=lambda i: keys[i])


def _mean_cycle(G_ST, G_TS, xs, xt):
    with no_grad():
        vals = []
        for a in xs:
            a = Tensor(a[None])
            vals.append(l1_loss(G_TS(G_ST(a)), a).item())
        fwd = float(np.mean(vals))
        vals = []
        for b in xt:
            b = Tensor(b[None])
            vals.append(l1_loss(G_ST(G_TS(b)), b).item())
    return fwd + float(np.mean(vals))


def train_unpaired(source_set, target_set, config: TrainConfig, validation=None, checkpoint_dir=None):
    """Train two generators and two discriminators on unaligned image pools.

    Per step: D_T learns target vs G_ST(source) and D_S learns source vs
    G_TS(target) (generator outputs detached); then both generators are
    updated on their adversarial terms plus ``lambda_cycle`` times the
    forward and backward cycle reconstruction L1.  History column
    ``cycle_eval`` is the mean cycle loss on a fixed probe subset, with the
    epoch-0 row recorded before any update.
    """
    if config.mode != "unpaired":
        raise ConfigError("train_unpaired needs mode='unpaired'")
    src, tgt = _to_batch(source_set), _to_batch(target_set)
    if len(src) == 0 or len(tgt) == 0:
        raise ConfigError("empty dataset")
    if src.shape[1:] != tgt.shape[1:]:
        raise ConfigError("source and target images differ in size")
    src = src[canonical_order(src)]
    tgt = tgt[canonical_order(tgt)]
    if validation is not None:
        validation = tuple(_to_batch(a) for a in validation)

    model = build_model(config)
    G_ST, G_TS = model.nets["G_ST"], model.nets["G_TS"]
    D_S, D_T = model.nets["D_S"], model.nets["D_T"]
    opt = model.optimizers
    variant = config.adversarial_variant
    rng_s = np.random.default_rng(derive_seed(config.seed, "order_source"))
    rng_t = np.random.default_rng(derive_seed(config.seed, "order_target"))
    probe = config.probe_size
    probe_s, probe_t = src[:probe], tgt[:probe]

    columns = ["epoch", "step", "d_s", "d_t", "g_adv_st", "g_adv_ts", "cycle", "cycle_eval", "val_ssim"]
    history = History(columns)
    history.append(epoch=0, step=0, cycle_eval=_mean_cycle(G_ST, G_TS, probe_s, probe_t))

    bs = config.batch_size
    n_steps = _steps_per_epoch(max(len(src), len(tgt)), bs)
    step = 0
    for epoch in range(1, config.epochs + 1):
        if config.max_steps is not None and step >= config.max_steps:
            break
        order_s = _epoch_orders(rng_s, len(src), n_steps * bs)
        order_t = _epoch_orders(rng_t, len(tgt), n_steps * bs)
        sums = dict.fromkeys(("d_s", "d_t", "g_adv_st", "g_adv_ts", "cycle"), 0.0)
        done = 0
        for k in range(n_steps):
            if config.max_steps is not None and step >= config.max_steps:
                break
            xs = Tensor(src[order_s[k * bs : (k + 1) * bs]])
            xt = Tensor(tgt[order_t[k * bs : (k + 1) * bs]])
            try:
                with no_grad():
                    fake_t = G_ST(xs)
                    fake_s = G_TS(xt)
                d_t = adv_loss_discriminator(D_T(xt), D_T(fake_t), variant)
                d_s = adv_loss_discriminator(D_S(xs), D_S(fake_s), variant)
                opt["D_T"].zero_grad()
                opt["D_S"].zero_grad()
                backward(d_t + d_s)
                opt["D_T"].step()
                opt["D_S"].step()

                D_S.set_requires_grad(False)
                D_T.set_requires_grad(False)
                try:
                    fake_t = G_ST(xs)
                    fake_s = G_TS(xt)
                    g_adv_st = adv_loss_generator(D_T(fake_t), variant)
                    g_adv_ts = adv_loss_generator(D_S(fake_s), variant)
                    cyc = l1_loss(G_TS(fake_t), xs) + l1_loss(G_ST(fake_s), xt)
                    g_loss = g_adv_st + g_adv_ts + cyc * config.lambda_cycle
                    opt["G_ST"].zero_grad()
                    opt["G_TS"].zero_grad()
                    backward(g_loss)
                    opt["G_ST"].step()
                    opt["G_TS"].step()
                finally:
                    D_S.set_requires_grad(True)
                    D_T.set_requires_grad(True)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch} step {step + 1}: {exc}") from exc
            values = {
                "d_s": d_s.item(),
                "d_t": d_t.item(),
                "g_adv_st": g_adv_st.item(),
                "g_adv_ts": g_adv_ts.item(),
                "cycle": cyc.item(),
            }
            _check_finite(values, f"epoch {epoch} step {step + 1}")
            for key, v in values.items():
                sums[key] += v
            done += 1
            step += 1
            _maybe_checkpoint(model, config, step, checkpoint_dir)
        if done == 0:
            break
        val = _mean_ssim(G_ST, *validation) if validation is not None else None
        history.append(
            epoch=epoch,
            step=step,
            cycle_eval=_mean_cycle(G_ST, G_TS, probe_s, probe_t),
            val_ssim=val,
            **{k: v / done for k, v in sums.items()},
        )
        log.info("unpaired epoch %d: %s", epoch, history.rows[-1])
    return model, history
