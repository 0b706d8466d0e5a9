"""Toy joint training: codec and decoder head optimized through the separator.

One training item runs embed -> splice -> loudness-normalize -> mix -> attack ->
separate -> extract -> decode. The codec, decoder head and separator are all
small enough that every gradient is written out by hand:

* the codec's trainable part is a per-bit gain ``g`` on the pattern signs and a
  per-bin weight ``w`` shared by the embedding mask and the decoder; the host
  compensation of the informed embedder is recomputed per item and treated as
  a constant;
* loudness normalization gains are computed, then held constant;
* attacks pass the gradient straight through;
* the separator loss compares estimates with detached targets and sees a
  detached mixture, so it never reaches the codec.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import KINDS, AttackSpec, apply_attack, sample_attack_spec
from .audio import AudioBuffer, SegmentLocator, istft_adjoint, istft_frames, stft_frames
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import (DEFAULT_CODEC, N_BITS, CodecConfig, Payload, WatermarkKey, band_mask, derive_pattern_bank,
                    detector_backward, detector_forward, detector_scores, informed_coefficients)
from .config import from_dict, to_jsonable
from .loudness import DEFAULT_TARGET_LUFS, loudness_gain
from .metrics import mel_l1_loss_grad, multi_res_stft_loss_grad, nmr_ratio_grad
from .separator import AdamState, SeparatorConfig, SeparatorModel, separator_backward, separator_forward
from .synth import SyntheticStemSet, synth_two_stem_batch

log = logging.getLogger(__name__)

WIRINGS = ("sep_loss_only", "sep_loss_plus_bce")
# Straight-through needs the attacked mixture to line up with the clean one.
TRAIN_ATTACK_KINDS = tuple(k for k in KINDS if k not in ("SPD", "SPCH"))
COMPONENTS = ("bce", "stft", "mel", "nmr")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class LossWeights:
    """Weights of the multi-task objective; each schedule is ``(phase 1, phase 2)``."""

    w_bce: float = 100.0
    lambda_stft: tuple = (0.01, 1.0)
    lambda_spec: tuple = (0.01, 1.0)
    w_perc: tuple = (0.0, 0.1)
    phase2_step: int = 500

    def __post_init__(self):
        for v in (self.w_bce, *self.lambda_stft, *self.lambda_spec, *self.w_perc, self.phase2_step):
            if v < 0:
                raise ValueError("loss weights must be >= 0")
        if self.w_perc[0] != 0.0:
            raise ValueError("the perceptual term is off in phase 1")

    def at(self, step: int) -> dict:
        i = int(step >= self.phase2_step)
        return {"bce": self.w_bce, "stft": self.lambda_stft[i], "mel": self.lambda_spec[i], "nmr": self.w_perc[i]}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    learning_rate: float = 1e-4
    codec_learning_rate: float = 1e-2
    pretrain_steps: int = 400
    pretrain_learning_rate: float = 1e-3
    attack_start_step: int = 500
    seed: int = 0
    wiring: str = "sep_loss_only"
    weights: LossWeights = LossWeights()
    codec: CodecConfig = DEFAULT_CODEC
    separator: SeparatorConfig = SeparatorConfig()
    stems: SyntheticStemSet = SyntheticStemSet()
    pool_size: int = 32
    comp_refine_iterations: int = 2
    probe_every: int = 250
    probe_items: int = 4
    checkpoint_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.pool_size < 1:
            raise ValueError("steps >= 0, batch_size >= 1 and pool_size >= 1 are required")
        if self.attack_start_step > self.steps:
            raise ValueError("attack_start_step must not exceed steps")
        if self.wiring not in WIRINGS:
            raise ValueError(f"wiring must be one of {WIRINGS}")
        if self.learning_rate <= 0 or self.codec_learning_rate <= 0 or self.pretrain_learning_rate <= 0:
            raise ValueError("learning rates must be positive")

    def to_dict(self) -> dict:
        return to_jsonable(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return from_dict(cls, d)


# codec

@dataclass
class TrainableCodec:
    """Reference codec with learnable strength shaping and decoder score affine."""

    gains: np.ndarray
    band_weights: np.ndarray
    score_scale: np.ndarray
    score_bias: np.ndarray
    config: CodecConfig = DEFAULT_CODEC
    name: str = "trained"

    @classmethod
    def initial(cls, config: CodecConfig = DEFAULT_CODEC) -> "TrainableCodec":
        """Identical to the reference codec: unit gains, band mask, identity score map."""
        return cls(np.ones(N_BITS), band_mask(config), np.ones(N_BITS), np.zeros(N_BITS), config)

    @property
    def n_params(self) -> int:
        return 3 * N_BITS + len(self.band_weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.gains, self.band_weights, self.score_scale, self.score_bias])

    def with_flat(self, v: np.ndarray, project: bool = True) -> "TrainableCodec":
        nb = len(self.band_weights)
        g, w = v[:N_BITS], v[N_BITS:N_BITS + nb]
        if project:
            g, w = np.maximum(g, 0.0), np.clip(w, 0.0, 1.0)
        return replace(self, gains=np.array(g), band_weights=np.array(w),
                       score_scale=np.array(v[N_BITS + nb:2 * N_BITS + nb]), score_bias=np.array(v[2 * N_BITS + nb:]))

    def compensation(self, x, bank, signs, refine_iterations=None) -> np.ndarray:
        cfg = self.config if refine_iterations is None else replace(self.config, refine_iterations=refine_iterations)
        return informed_coefficients(x, bank, signs, cfg) - signs

    def embed(self, segment: AudioBuffer, key: WatermarkKey, payload: Payload) -> AudioBuffer:
        bank = derive_pattern_bank(key, self.config)
        x = segment.samples
        y, _ = embed_forward(self, x, bank, payload.signs, self.compensation(x, bank, payload.signs))
        return segment.with_samples(y)

    def logits(self, x: np.ndarray, bank) -> np.ndarray:
        z = detector_scores(detector_forward(x, self.config, self.band_weights), bank.dense)
        return self.score_scale * z + self.score_bias

    def decode(self, segment: AudioBuffer, key: WatermarkKey):
        logits = self.logits(segment.samples, derive_pattern_bank(key, self.config))
        return Payload(tuple((logits > 0).astype(int))), logits

    def save(self, path) -> None:
        save_checkpoint(path, {"type": "codec", "config": to_jsonable(self.config)}, {"codec": self.flat()})

    @classmethod
    def load(cls, path) -> "TrainableCodec":
        meta, arrays = load_checkpoint(path)
        if meta.get("type") != "codec":
            raise CheckpointError(f"{path}: not a codec checkpoint")
        return cls.initial(from_dict(CodecConfig, meta["config"])).with_flat(arrays["codec"], project=False)


@dataclass
class EmbedCache:
    spec: np.ndarray
    mraw: np.ndarray
    pre: np.ndarray
    signs: np.ndarray
    bank: object


def embed_forward(codec: TrainableCodec, x: np.ndarray, bank, signs: np.ndarray, comp: np.ndarray):
    cfg = codec.config
    spec = stft_frames(x, cfg.fft_size, cfg.hop)
    coef = codec.gains * signs + comp
    mraw = np.tensordot(coef, bank.dense, axes=1)
    pre = 1.0 + cfg.gamma * mraw * (codec.band_weights / N_BITS)
    y = istft_frames(spec * np.maximum(pre, 0.0), len(x), cfg.fft_size, cfg.hop)
    return y, EmbedCache(spec, mraw, pre, signs, bank)


def embed_backward(codec: TrainableCodec, cache: EmbedCache, grad_y: np.ndarray):
    """Return gradients w.r.t. ``gains`` and ``band_weights``."""
    cfg = codec.config
    g = istft_adjoint(grad_y, cache.spec.shape[0], cfg.fft_size, cfg.hop)
    g_m = cfg.gamma * np.real(g * np.conj(cache.spec)) * (cache.pre > 0) / N_BITS
    g_coef = np.tensordot(cache.bank.dense, g_m * codec.band_weights, axes=([1, 2], [0, 1]))
    g_w = np.sum(g_m * cache.mraw, axis=0)
    return g_coef * cache.signs, g_w


# losses

def bce_with_logits(logits: np.ndarray, bits: np.ndarray):
    """Mean binary cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    bits = np.asarray(bits, dtype=np.float64)
    loss = np.mean(np.logaddexp(0.0, logits) - bits * logits)
    grad = (0.5 * (1.0 + np.tanh(0.5 * logits)) - bits) / logits.size
    return float(loss), grad


def total_loss(components: dict, weights: dict):
    """Weighted sum of the loss components; returns ``(total, breakdown)``.

    The breakdown holds the raw components and their weighted values.
    """
    breakdown = {}
    total = 0.0
    for name in COMPONENTS:
        value = float(components[name])
        if not np.isfinite(value):
            raise FloatingPointError(f"loss component {name!r} is not finite")
        breakdown[name] = value
        breakdown[f"{name}_weighted"] = weights[name] * value
        total += weights[name] * value
    return total, breakdown


def separator_loss_grad(estimates, targets):
    """``mean|e1 - sg(t1)| + mean|e2 - sg(t2)|`` and the gradients w.r.t. the estimates."""
    if len(estimates) != 2 or len(targets) != 2:
        raise ValueError("two estimates and two targets are required")
    value = 0.0
    grads = []
    for e, t in zip(estimates, targets):
        e = getattr(e, "samples", e)
        t = getattr(t, "samples", t)
        if len(e) != len(t):
            raise ValueError(f"length mismatch: {len(e)} vs {len(t)}")
        d = e - t
        value += float(np.mean(np.abs(d)))
        grads.append(np.sign(d) / len(d))
    return value, grads


def separator_loss(estimates, targets) -> float:
    return separator_loss_grad(estimates, targets)[0]


# one training step

@dataclass
class TrainItem:
    stem_a: np.ndarray
    stem_b: np.ndarray
    locator: SegmentLocator
    keys: tuple
    payloads: tuple
    attack: AttackSpec | None = None
    comp: tuple | None = None

    def banks(self, cfg):
        return tuple(derive_pattern_bank(k, cfg) for k in self.keys)


@dataclass
class ItemForward:
    segments: list
    watermarked: list
    embed_caches: list
    gains: list
    targets: list
    mixture: np.ndarray
    separated: tuple
    sep_cache: object
    det_states: list
    scores: list
    logits: list
    banks: tuple


@dataclass
class StepResult:
    loss: float
    breakdown: dict
    sep_loss: float
    ber: float
    grad_codec: np.ndarray | None = None
    grad_sep_total: np.ndarray | None = None
    grad_sep_sep: np.ndarray | None = None
    gains: list = field(default_factory=list)


def prepare_comp(codec: TrainableCodec, item: TrainItem, refine_iterations: int) -> TrainItem:
    if item.comp is not None:
        return item
    banks = item.banks(codec.config)
    comps = []
    for stem, bank, payload in zip((item.stem_a, item.stem_b), banks, item.payloads):
        seg = stem[item.locator.start:item.locator.stop]
        comps.append(codec.compensation(seg, bank, payload.signs, refine_iterations))
    return replace(item, comp=tuple(comps))


def item_forward(codec: TrainableCodec, sep: SeparatorModel, item: TrainItem, gains=None) -> ItemForward:
    cfg = codec.config
    loc = item.locator
    banks = item.banks(cfg)
    segments, watermarked, caches, carriers = [], [], [], []
    for stem, bank, payload, comp in zip((item.stem_a, item.stem_b), banks, item.payloads, item.comp):
        seg = stem[loc.start:loc.stop]
        y, cache = embed_forward(codec, seg, bank, payload.signs, comp)
        carrier = stem.copy()
        carrier[loc.start:loc.stop] = y
        segments.append(seg)
        watermarked.append(y)
        caches.append(cache)
        carriers.append(carrier)
    if gains is None:
        gains = [loudness_gain(AudioBuffer(c, cfg.sample_rate), DEFAULT_TARGET_LUFS) for c in carriers]
    targets = [g * c for g, c in zip(gains, carriers)]
    mixture = targets[0] + targets[1]
    attacked = mixture
    if item.attack is not None:
        attacked = apply_attack(AudioBuffer(mixture, cfg.sample_rate), item.attack).samples
    s1, s2, sep_cache = separator_forward(sep, attacked)
    det_states, scores, logits = [], [], []
    for s, bank in zip((s1, s2), banks):
        st = detector_forward(s[loc.start:loc.stop], cfg, codec.band_weights)
        z = detector_scores(st, bank.dense)
        det_states.append(st)
        scores.append(z)
        logits.append(codec.score_scale * z + codec.score_bias)
    return ItemForward(segments, watermarked, caches, gains, targets, mixture, (s1, s2), sep_cache,
                       det_states, scores, logits, banks)


def _perceptual(seg, wm, weights, need_grad):
    stft_v, stft_g = multi_res_stft_loss_grad(seg, wm)
    mel_v, mel_g = mel_l1_loss_grad(seg, wm)
    nmr_v, nmr_g = nmr_ratio_grad(seg, wm)
    grad = None
    if need_grad:
        grad = weights["stft"] * stft_g + weights["mel"] * mel_g + weights["nmr"] * nmr_g
    return {"stft": stft_v, "mel": mel_v, "nmr": nmr_v}, grad


def step_losses(codec: TrainableCodec, sep: SeparatorModel, items, weights: dict, gains=None,
                need_grad: bool = True) -> StepResult:
    """Losses (and gradients) averaged over ``items``.

    ``gains`` optionally fixes the per-item loudness gains, which the gradient
    treats as constants anyway.
    """
    n = len(items)
    comps = {k: 0.0 for k in COMPONENTS}
    sep_total = 0.0
    ber = 0.0
    nb = len(codec.band_weights)
    g_gain = np.zeros(N_BITS)
    g_w = np.zeros(nb)
    g_scale = np.zeros(N_BITS)
    g_bias = np.zeros(N_BITS)
    g_sep_total = np.zeros(sep.config.n_params) if need_grad else None
    g_sep_sep = np.zeros(sep.config.n_params) if need_grad else None
    used_gains = []
    for i, item in enumerate(items):
        fw = item_forward(codec, sep, item, None if gains is None else gains[i])
        used_gains.append(fw.gains)
        bits = np.concatenate([p.array for p in item.payloads])
        logits = np.concatenate(fw.logits)
        bce_v, bce_g = bce_with_logits(logits, bits)
        comps["bce"] += bce_v / n
        ber += float(np.mean((logits > 0) != bits)) / n
        pgrads = []
        for seg, wm in zip(fw.segments, fw.watermarked):
            vals, pg = _perceptual(seg, wm, weights, need_grad)
            for k, v in vals.items():
                comps[k] += v / (2 * n)
            pgrads.append(pg)
        sv, sg = separator_loss_grad(fw.separated, fw.targets)
        sep_total += sv / n
        if not need_grad:
            continue
        loc = item.locator
        g_logits = weights["bce"] * bce_g / n
        stem_grads = []
        for j in range(2):
            gl = g_logits[j * N_BITS:(j + 1) * N_BITS]
            g_scale += gl * fw.scores[j]
            g_bias += gl
            gx, gb = detector_backward(fw.det_states[j], gl * codec.score_scale, fw.banks[j].dense,
                                       codec.config, codec.band_weights, loc.length)
            g_w += gb
            full = np.zeros(len(fw.mixture))
            full[loc.start:loc.stop] = gx
            stem_grads.append(full)
        gw_sep, g_mix = separator_backward(sep, fw.sep_cache, stem_grads[0], stem_grads[1])
        g_sep_total += gw_sep
        # attack: straight-through; normalization: constant gain
        for j in range(2):
            g_wm = fw.gains[j] * g_mix[loc.start:loc.stop] + pgrads[j] / (2 * n)
            gg, gwb = embed_backward(codec, fw.embed_caches[j], g_wm)
            g_gain += gg
            g_w += gwb
        # separator loss: detached targets and detached mixture, so only the separator sees it
        gw_sep2, _ = separator_backward(sep, fw.sep_cache, sg[0] / n, sg[1] / n, need_input_grad=False)
        g_sep_sep += gw_sep2
    loss, breakdown = total_loss(comps, weights)
    res = StepResult(loss, breakdown, sep_total, ber, gains=used_gains)
    if need_grad:
        res.grad_codec = np.concatenate([g_gain, g_w, g_scale, g_bias])
        res.grad_sep_total = g_sep_total
        res.grad_sep_sep = g_sep_sep
    return res


def separator_loss_codec_grad(codec: TrainableCodec, sep: SeparatorModel, item: TrainItem,
                              detach: bool = True) -> np.ndarray:
    """Gradient of the separator loss w.r.t. the codec parameters for one item.

    The loss reaches the codec along two edges: the watermarked targets and the
    mixture fed to the separator. ``detach=True`` applies the stop-gradient on
    both, as training does; ``detach=False`` returns the full gradient (attacks
    straight-through, loudness gains constant), which is what the stop-gradient
    removes.
    """
    fw = item_forward(codec, sep, item)
    loc = item.locator
    _, sg = separator_loss_grad(fw.separated, fw.targets)
    _, g_mix = separator_backward(sep, fw.sep_cache, sg[0], sg[1])
    keep = 0.0 if detach else 1.0
    g_gain = np.zeros(N_BITS)
    g_w = np.zeros(len(codec.band_weights))
    for j in range(2):
        # d/d(target_j) of mean|est_j - target_j| is -sg[j]
        g_target = keep * -sg[j][loc.start:loc.stop]
        g_input = keep * g_mix[loc.start:loc.stop]
        gg, gwb = embed_backward(codec, fw.embed_caches[j], fw.gains[j] * (g_target + g_input))
        g_gain += gg
        g_w += gwb
    return np.concatenate([g_gain, g_w, np.zeros(N_BITS), np.zeros(N_BITS)])


# data

def _rng(*words) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(w) for w in words])))


def stem_pool(cfg: TrainConfig) -> list:
    return [(it.stem_a.samples, it.stem_b.samples)
            for it in synth_two_stem_batch(cfg.stems, cfg.pool_size, cfg.seed)]


def draw_item(pool, cfg: TrainConfig, rng: np.random.Generator, attack: bool) -> TrainItem:
    a, b = pool[int(rng.integers(len(pool)))]
    L = cfg.stems.segment_length
    loc = SegmentLocator(int(rng.integers(0, len(a) - L + 1)), L)
    keys = (WatermarkKey.random(rng), WatermarkKey.random(rng))
    payloads = (Payload.random(rng), Payload.random(rng))
    spec = None
    if attack:
        kind = TRAIN_ATTACK_KINDS[int(rng.integers(len(TRAIN_ATTACK_KINDS)))]
        spec = sample_attack_spec(kind, int(rng.integers(0, 2**63)))
    return TrainItem(a, b, loc, keys, payloads, spec)


def training_items(pool, cfg: TrainConfig, step: int, codec: TrainableCodec) -> list:
    attack = step >= cfg.attack_start_step
    items = [draw_item(pool, cfg, _rng(cfg.seed, 1, step, i), attack) for i in range(cfg.batch_size)]
    return [prepare_comp(codec, it, cfg.comp_refine_iterations) for it in items]


def probe_items(cfg: TrainConfig, count: int, seed_offset: int = 1_000_003) -> list:
    """Held-out, unattacked items drawn from stems the training pool never contains."""
    held = replace(cfg, seed=cfg.seed + seed_offset, pool_size=count)
    pool = stem_pool(held)
    return [draw_item([pool[i]], held, _rng(held.seed, 2, i), False) for i in range(count)]


def probe_ber(codec: TrainableCodec, sep: SeparatorModel, items, refine_iterations=None) -> float:
    """Mean post-separation BER over both stems of ``items`` (no attack)."""
    total = 0.0
    for it in items:
        it = prepare_comp(codec, replace(it, comp=None), codec.config.refine_iterations
                          if refine_iterations is None else refine_iterations)
        fw = item_forward(codec, sep, it)
        bits = np.concatenate([p.array for p in it.payloads])
        total += float(np.mean((np.concatenate(fw.logits) > 0) != bits))
    return total / len(items)


# separator pretraining

def pretrain_separator(cfg: TrainConfig, pool=None, log_every: int = 100) -> SeparatorModel:
    """Fit the separator with the L1 separation loss on unwatermarked, normalized stems."""
    pool = stem_pool(cfg) if pool is None else pool
    sr = cfg.stems.sample_rate
    normed = []
    for a, b in pool:
        normed.append((a * loudness_gain(AudioBuffer(a, sr)), b * loudness_gain(AudioBuffer(b, sr))))
    model = SeparatorModel.init_learnable(cfg.separator, seed=cfg.seed)
    adam = AdamState(model.config.n_params, lr=cfg.pretrain_learning_rate)
    for step in range(cfg.pretrain_steps):
        a, b = normed[int(_rng(cfg.seed, 3, step).integers(len(normed)))]
        s1, s2, cache = separator_forward(model, a + b)
        value, grads = separator_loss_grad((s1, s2), (a, b))
        gw, _ = separator_backward(model, cache, grads[0], grads[1], need_input_grad=False)
        model = model.with_weights(adam.update(model.weights, gw))
        if log_every and (step + 1) % log_every == 0:
            log.info("pretrain step %d: L_sep %.5f", step + 1, value)
    return model


# training loop

@dataclass
class JointState:
    step: int
    codec: TrainableCodec
    separator: SeparatorModel
    codec_adam: AdamState
    sep_adam: AdamState


def save_joint_checkpoint(path, state: JointState, cfg: TrainConfig) -> None:
    meta = {"type": "joint", "step": state.step, "train_config": cfg.to_dict(),
            "separator_config": to_jsonable(state.separator.config),
            "codec_adam": state.codec_adam.meta(), "sep_adam": state.sep_adam.meta()}
    arrays = {"codec": state.codec.flat(), "separator": state.separator.weights}
    arrays.update(state.codec_adam.arrays("codec_adam"))
    arrays.update(state.sep_adam.arrays("sep_adam"))
    save_checkpoint(path, meta, arrays)


def load_joint_checkpoint(path):
    """Return ``(state, train_config)``."""
    meta, arrays = load_checkpoint(path)
    if meta.get("type") != "joint":
        raise CheckpointError(f"{path}: not a joint-training checkpoint")
    cfg = TrainConfig.from_dict(meta["train_config"])
    codec = TrainableCodec.initial(cfg.codec).with_flat(arrays["codec"], project=False)
    sep = SeparatorModel("learnable", from_dict(SeparatorConfig, meta["separator_config"]), arrays["separator"])
    state = JointState(meta["step"], codec, sep,
                       AdamState.restore(meta["codec_adam"], arrays, "codec_adam"),
                       AdamState.restore(meta["sep_adam"], arrays, "sep_adam"))
    return state, cfg


@dataclass
class TrainResult:
    codec: TrainableCodec
    separator: SeparatorModel
    pretrained_separator: SeparatorModel | None
    curves: list
    checkpoints: list


CURVE_FIELDS = ("step", "loss", "bce", "stft", "mel", "nmr", "w_perc", "sep_loss", "train_ber", "probe_ber",
                "attack")


def write_curves(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in CURVE_FIELDS})


def train_step(state: JointState, items, cfg: TrainConfig) -> StepResult:
    """One optimizer step; mutates ``state`` and returns the pre-update losses."""
    weights = cfg.weights.at(state.step)
    res = step_losses(state.codec, state.separator, items, weights)
    if not (np.isfinite(res.loss) and np.isfinite(res.sep_loss)):
        raise FloatingPointError("non-finite loss")
    state.codec = state.codec.with_flat(state.codec_adam.update(state.codec.flat(), res.grad_codec))
    g_sep = res.grad_sep_sep
    if cfg.wiring == "sep_loss_plus_bce":
        g_sep = g_sep + res.grad_sep_total
    state.separator = state.separator.with_weights(state.sep_adam.update(state.separator.weights, g_sep))
    state.step += 1
    return res


def train_joint(cfg: TrainConfig, separator: SeparatorModel | None = None, resume: str | None = None,
                max_steps: int | None = None) -> TrainResult:
    """Pretrain (unless given) a separator, then co-train codec and separator.

    ``max_steps`` stops early, which together with ``resume`` allows a run to be
    split across invocations without changing its trajectory.
    """
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    pool = stem_pool(cfg)
    pretrained = None
    if resume:
        state, _ = load_joint_checkpoint(resume)
    else:
        if separator is None:
            t0 = time.time()
            separator = pretrain_separator(cfg, pool)
            log.info("separator pretraining took %.1f s", time.time() - t0)
        pretrained = separator
        codec = TrainableCodec.initial(cfg.codec)
        state = JointState(0, codec, separator, AdamState(codec.n_params, lr=cfg.codec_learning_rate),
                           AdamState(separator.config.n_params, lr=cfg.learning_rate))
    probes = probe_items(cfg, cfg.probe_items) if cfg.probe_items and cfg.probe_every else []
    curves, checkpoints = [], []
    last_good = JointState(state.step, state.codec, state.separator,
                           _copy_adam(state.codec_adam), _copy_adam(state.sep_adam))
    end = cfg.steps if max_steps is None else min(cfg.steps, max_steps)
    while state.step < end:
        step = state.step
        items = training_items(pool, cfg, step, state.codec)
        row = {"step": step, "w_perc": cfg.weights.at(step)["nmr"],
               "attack": items[0].attack.kind if items[0].attack else ""}
        if probes and step % cfg.probe_every == 0:
            row["probe_ber"] = probe_ber(state.codec, state.separator, probes, cfg.comp_refine_iterations)
        try:
            res = train_step(state, items, cfg)
        except FloatingPointError as exc:
            path = None
            if out:
                path = str(out / "last_good.ckpt")
                save_joint_checkpoint(path, last_good, cfg)
            raise TrainingDiverged(f"training diverged at step {step}: {exc}", path) from exc
        row.update(loss=res.loss, sep_loss=res.sep_loss, train_ber=res.ber,
                   **{k: res.breakdown[k] for k in COMPONENTS})
        curves.append(row)
        if step % 50 == 0:
            log.info("step %d loss %.4f bce %.4f sep %.5f ber %.3f", step, res.loss, res.breakdown["bce"],
                     res.sep_loss, res.ber)
        last_good = JointState(state.step, state.codec, state.separator,
                               _copy_adam(state.codec_adam), _copy_adam(state.sep_adam))
        if out and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            path = str(out / f"step{state.step:06d}.ckpt")
            save_joint_checkpoint(path, state, cfg)
            checkpoints.append(path)
    if probes and state.step == cfg.steps:
        curves.append({"step": state.step, "probe_ber": probe_ber(state.codec, state.separator, probes,
                                                                  cfg.comp_refine_iterations)})
    if out:
        write_curves(curves, out / "curves.csv")
        path = str(out / "final.ckpt")
        save_joint_checkpoint(path, state, cfg)
        checkpoints.append(path)
        state.codec.save(out / "codec.ckpt")
        state.separator.save(out / "separator.ckpt")
        if pretrained is not None:
            pretrained.save(out / "separator_pretrained.ckpt")
    return TrainResult(state.codec, state.separator, pretrained, curves, checkpoints)


def _copy_adam(a: AdamState) -> AdamState:
    return AdamState(**a.meta(), m=a.m.copy(), v=a.v.copy())
