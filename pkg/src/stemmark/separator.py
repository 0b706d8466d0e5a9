"""Two-stem mask separators.

Both separators predict a real mask for stem 1 on the mixture STFT, use
``1 - mask`` for stem 2, and resynthesize with the mixture phase. The oracle
computes an ideal ratio mask from known references; the learnable model is a
one-hidden-layer MLP over log-magnitude frames with a few frames of context.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, STFTGeometry, istft_adjoint, istft_frames, stft_adjoint, stft_frames
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint

N_STEMS = 2
ORACLE_EPS = 1e-8
FEATURE_FLOOR = 1e-3
FEATURE_SCALE = 0.25


@dataclass(frozen=True)
class SeparatorConfig:
    fft_size: int = 2048
    hop: int = 512
    hidden: int = 128
    context: int = 2
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not STFTGeometry(self.fft_size, self.hop).is_cola:
            raise ValueError("separator geometry must be COLA")
        if self.hidden < 1 or self.context < 0:
            raise ValueError("hidden must be >= 1 and context >= 0")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def n_inputs(self) -> int:
        return (2 * self.context + 1) * self.n_bins

    @property
    def shapes(self) -> dict:
        return {"w1": (self.hidden, self.n_inputs), "b1": (self.hidden,),
                "w2": (self.n_bins, self.hidden), "b2": (self.n_bins,)}

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())


@dataclass
class SeparatorModel:
    kind: str
    config: SeparatorConfig = field(default_factory=SeparatorConfig)
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("oracle", "learnable"):
            raise ValueError(f"unknown separator kind {self.kind!r}")
        if self.kind == "learnable":
            if self.weights is None or self.weights.shape != (self.config.n_params,):
                raise ValueError(f"learnable separator needs {self.config.n_params} weights")
            if not np.all(np.isfinite(self.weights)):
                raise ValueError("non-finite separator weights")

    @classmethod
    def oracle(cls) -> "SeparatorModel":
        return cls("oracle")

    @classmethod
    def init_learnable(cls, config: SeparatorConfig = SeparatorConfig(), seed: int = 0) -> "SeparatorModel":
        rng = np.random.default_rng(seed)
        parts = {
            "w1": rng.standard_normal(config.shapes["w1"]) / np.sqrt(config.n_inputs),
            "b1": np.zeros(config.hidden),
            "w2": rng.standard_normal(config.shapes["w2"]) / np.sqrt(config.hidden),
            "b2": np.zeros(config.n_bins),
        }
        return cls("learnable", config, np.concatenate([parts[k].ravel() for k in config.shapes]))

    def params(self) -> dict:
        """Named views into ``weights``."""
        out, pos = {}, 0
        for name, shape in self.config.shapes.items():
            size = int(np.prod(shape))
            out[name] = self.weights[pos:pos + size].reshape(shape)
            pos += size
        return out

    def with_weights(self, weights: np.ndarray) -> "SeparatorModel":
        return SeparatorModel(self.kind, self.config, np.asarray(weights, dtype=np.float64))

    def save(self, path) -> None:
        if self.kind != "learnable":
            raise ValueError("only learnable separators have checkpoints")
        save_checkpoint(path, {"type": "separator", "kind": self.kind, "config": asdict(self.config)},
                        {"weights": self.weights})

    @classmethod
    def load(cls, path) -> "SeparatorModel":
        meta, arrays = load_checkpoint(path)
        if meta.get("type") != "separator":
            raise CheckpointError(f"{path}: not a separator checkpoint")
        return cls(meta["kind"], SeparatorConfig(**meta["config"]), arrays["weights"])


@dataclass(frozen=True)
class SeparationOutput:
    stems: tuple
    masks: tuple


def oracle_masks(references, fft_size=2048, hop=512, eps=ORACLE_EPS):
    powers = [np.abs(stft_frames(_samples(r), fft_size, hop)) ** 2 for r in references]
    total = sum(powers) + eps
    return [p / total for p in powers]


def _samples(x):
    return x.samples if isinstance(x, AudioBuffer) else np.asarray(x, dtype=np.float64)


def oracle_mask_separate(mixture: AudioBuffer, references, fft_size: int = 2048, hop: int = 512) -> SeparationOutput:
    """Ideal ratio masks from ``references`` applied to the mixture."""
    if len(references) != N_STEMS:
        raise ValueError("exactly two references are required")
    for r in references:
        if len(r) != len(mixture):
            raise ValueError(f"length mismatch: reference {len(r)} vs mixture {len(mixture)}")
        if r.sample_rate != mixture.sample_rate:
            raise ValueError("sample-rate mismatch")
    z = stft_frames(mixture.samples, fft_size, hop)
    masks = oracle_masks(references, fft_size, hop)
    stems = tuple(AudioBuffer(istft_frames(m * z, len(mixture), fft_size, hop), mixture.sample_rate) for m in masks)
    return SeparationOutput(stems, tuple(masks))


# learnable model

def _context_stack(feat: np.ndarray, context: int) -> np.ndarray:
    """``[T, B] -> [T, (2c+1)B]`` with edge-replicated frames."""
    if context == 0:
        return feat
    t = feat.shape[0]
    padded = np.pad(feat, ((context, context), (0, 0)), mode="edge")
    return np.concatenate([padded[i:i + t] for i in range(2 * context + 1)], axis=1)


def _context_adjoint(grad: np.ndarray, context: int, n_bins: int) -> np.ndarray:
    if context == 0:
        return grad
    t = grad.shape[0]
    acc = np.zeros((t + 2 * context, n_bins))
    for i in range(2 * context + 1):
        acc[i:i + t] += grad[:, i * n_bins:(i + 1) * n_bins]
    acc[context] += acc[:context].sum(axis=0)
    acc[t + context - 1] += acc[t + context:].sum(axis=0)
    return acc[context:t + context]


@dataclass
class SeparatorCache:
    z: np.ndarray
    mag: np.ndarray
    inputs: np.ndarray
    hidden: np.ndarray
    mask: np.ndarray
    length: int


def separator_forward(model: SeparatorModel, x: np.ndarray):
    """Return ``(stem1, stem2, cache)`` for a mixture array."""
    cfg = model.config
    p = model.params()
    z = stft_frames(x, cfg.fft_size, cfg.hop)
    mag = np.abs(z)
    inputs = _context_stack(FEATURE_SCALE * np.log(mag + FEATURE_FLOOR), cfg.context)
    hidden = np.tanh(inputs @ p["w1"].T + p["b1"])
    logits = hidden @ p["w2"].T + p["b2"]
    mask = 0.5 * (1.0 + np.tanh(0.5 * logits))  # overflow-free logistic
    s1 = istft_frames(mask * z, len(x), cfg.fft_size, cfg.hop)
    s2 = istft_frames((1.0 - mask) * z, len(x), cfg.fft_size, cfg.hop)
    return s1, s2, SeparatorCache(z, mag, inputs, hidden, mask, len(x))


def separator_backward(model: SeparatorModel, cache: SeparatorCache, grad1: np.ndarray, grad2: np.ndarray,
                       need_input_grad: bool = True):
    """Gradients of a loss w.r.t. the weights and (optionally) the mixture.

    ``grad1``/``grad2`` are d(loss)/d(stem) arrays.
    """
    cfg = model.config
    p = model.params()
    n_frames = cache.z.shape[0]
    g1 = istft_adjoint(grad1, n_frames, cfg.fft_size, cfg.hop)
    g2 = istft_adjoint(grad2, n_frames, cfg.fft_size, cfg.hop)
    g_mask = np.real((g1 - g2) * np.conj(cache.z))
    g_logit = g_mask * cache.mask * (1.0 - cache.mask)
    g_w2 = g_logit.T @ cache.hidden
    g_b2 = g_logit.sum(axis=0)
    g_pre = (g_logit @ p["w2"]) * (1.0 - cache.hidden**2)
    g_w1 = g_pre.T @ cache.inputs
    g_b1 = g_pre.sum(axis=0)
    grad_w = np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])
    if not need_input_grad:
        return grad_w, None
    g_feat = _context_adjoint(g_pre @ p["w1"], cfg.context, cfg.n_bins)
    g_mag = FEATURE_SCALE * g_feat / (cache.mag + FEATURE_FLOOR)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(cache.mag > 0, cache.z / cache.mag, 0.0)
    g_z = cache.mask * g1 + (1.0 - cache.mask) * g2 + g_mag * unit
    return grad_w, stft_adjoint(g_z, cache.length, cfg.fft_size, cfg.hop)


def learnable_separate(model: SeparatorModel, mixture: AudioBuffer) -> SeparationOutput:
    if model.kind != "learnable":
        raise ValueError("learnable_separate needs a learnable model")
    if mixture.sample_rate != model.config.sample_rate:
        raise ValueError(f"model expects {model.config.sample_rate} Hz, got {mixture.sample_rate} Hz")
    s1, s2, cache = separator_forward(model, mixture.samples)
    sr = mixture.sample_rate
    return SeparationOutput((AudioBuffer(s1, sr), AudioBuffer(s2, sr)), (cache.mask, 1.0 - cache.mask))


def separate(model: SeparatorModel, mixture: AudioBuffer, references=None) -> SeparationOutput:
    """Dispatch on model kind; the oracle needs ``references``."""
    if model.kind == "oracle":
        if references is None:
            raise ValueError("oracle separation needs reference stems")
        return oracle_mask_separate(mixture, references)
    return learnable_separate(model, mixture)


# optimizer

@dataclass
class AdamState:
    """Adam moments for one flat parameter vector.

    With fresh (zero) moments a zero gradient leaves the weights unchanged;
    afterwards a zero gradient only decays the moments, though the bias-corrected
    first moment can still move the weights.
    """

    size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def update(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.shape or grad.shape != (self.size,):
            raise ValueError(f"gradient shape {grad.shape} does not match {params.shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite gradient rejected")
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        m_hat = self.m / (1 - self.beta1**self.step)
        v_hat = self.v / (1 - self.beta2**self.step)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def arrays(self, prefix: str) -> dict:
        return {f"{prefix}.m": self.m, f"{prefix}.v": self.v}

    def meta(self) -> dict:
        return {"size": self.size, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, meta: dict, arrays: dict, prefix: str) -> "AdamState":
        return cls(**meta, m=arrays[f"{prefix}.m"], v=arrays[f"{prefix}.v"])


def update_separator(model: SeparatorModel, grad: np.ndarray, state: AdamState) -> SeparatorModel:
    if model.kind != "learnable":
        raise ValueError("only learnable separators can be updated")
    return model.with_weights(state.update(model.weights, grad))
