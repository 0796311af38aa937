"""Masked waveform autoencoder and its frozen-encoder ghost classifier.

Parameters live in a flat ``dict[str, Tensor]`` whose insertion order is the
canonical order used by the optimizer and the checkpoint writer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from . import autograd as ag
from .autograd import Tensor

N_CLASSES = 4


@dataclass(frozen=True)
class MaeConfig:
    patch: tuple = (8, 8, 64)
    input_hw: tuple = (32, 32)
    input_T: int = 64
    d_enc: int = 96
    d_dec: int = 48
    blocks_enc: int = 6
    blocks_dec: int = 6
    heads: int = 6
    mlp_ratio: int = 4
    mask_ratio: float = 0.7
    K: int = 4
    lambda_p: float = 1.0
    lambda_a: float = 1.0
    lambda_w: float = 0.5
    dropout: float = 0.1
    classes: int = N_CLASSES
    peak_threshold: float = 0.5
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "patch", tuple(int(p) for p in self.patch))
        object.__setattr__(self, "input_hw", tuple(int(p) for p in self.input_hw))
        if self.d_enc % self.heads or self.d_dec % self.heads:
            raise ValueError(f"d_enc={self.d_enc} and d_dec={self.d_dec} must be divisible by heads={self.heads}")
        if self.d_enc % 2:
            raise ValueError("d_enc must be even (classification head halves it)")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio={self.mask_ratio} must lie in (0, 1)")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        H, W = self.input_hw
        ph, pw, pt = self.patch
        if H % ph or W % pw or self.input_T % pt:
            raise ValueError(f"input {(H, W, self.input_T)} not divisible by patch {self.patch}")
        if self.classes != N_CLASSES:
            raise ValueError("the classifier predicts exactly 4 classes")

    @classmethod
    def paper_scale(cls) -> "MaeConfig":
        return cls(patch=(16, 16, 256), input_hw=(128, 128), input_T=256, d_enc=768, d_dec=384)

    @property
    def grid(self) -> tuple:
        H, W = self.input_hw
        ph, pw, pt = self.patch
        return H // ph, W // pw, self.input_T // pt

    @property
    def n_patch(self) -> int:
        g = self.grid
        return g[0] * g[1] * g[2]

    @property
    def patch_size(self) -> int:
        return self.patch[0] * self.patch[1] * self.patch[2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch"], d["input_hw"] = list(self.patch), list(self.input_hw)
        return d


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    batch: int = 8
    epochs: int = 20
    seed: int = 0
    focal_alpha: tuple = (0.05, 0.25, 0.7, 0.0001)   # Object, Glass, Ghost, Noise
    focal_gamma: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "focal_alpha", tuple(float(a) for a in self.focal_alpha))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be positive and weight_decay non-negative")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")
        if len(self.focal_alpha) != N_CLASSES or self.focal_gamma < 0:
            raise ValueError("focal_alpha needs 4 entries and focal_gamma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["focal_alpha"] = list(self.focal_alpha)
        return d


# -- parameters --------------------------------------------------------------

def _xavier(rng, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, (fan_in, fan_out))


def _linear(params, rng, name, fan_in, fan_out):
    params[f"{name}.w"] = Tensor(_xavier(rng, fan_in, fan_out), True, f"{name}.w")
    params[f"{name}.b"] = Tensor(np.zeros(fan_out), True, f"{name}.b")


def _norm(params, name, d):
    params[f"{name}.g"] = Tensor(np.ones(d), True, f"{name}.g")
    params[f"{name}.b"] = Tensor(np.zeros(d), True, f"{name}.b")


def _block(params, rng, name, d, mlp_ratio):
    _norm(params, f"{name}.ln1", d)
    _linear(params, rng, f"{name}.attn.qkv", d, 3 * d)
    _linear(params, rng, f"{name}.attn.out", d, d)
    _norm(params, f"{name}.ln2", d)
    _linear(params, rng, f"{name}.mlp.fc1", d, mlp_ratio * d)
    _linear(params, rng, f"{name}.mlp.fc2", mlp_ratio * d, d)


def init_params(cfg: MaeConfig, seed: int = 0) -> dict:
    """Fresh autoencoder parameters (encoder, decoder, peak heads)."""
    rng = np.random.default_rng([int(seed), 1])
    p: dict = {}
    _linear(p, rng, "embed", cfg.patch_size, cfg.d_enc)
    for i in range(cfg.blocks_enc):
        _block(p, rng, f"enc.{i}", cfg.d_enc, cfg.mlp_ratio)
    _norm(p, "enc.norm", cfg.d_enc)
    _linear(p, rng, "proj", cfg.d_enc, cfg.d_dec)
    p["mask_token"] = Tensor(rng.normal(0.0, 0.02, cfg.d_dec), True, "mask_token")
    for h in ("pos", "amp", "wid"):
        _linear(p, rng, f"peak.{h}", cfg.d_dec, cfg.K)
    for i in range(cfg.blocks_dec):
        _block(p, rng, f"dec.{i}", cfg.d_dec, cfg.mlp_ratio)
    _norm(p, "dec.norm", cfg.d_dec)
    _linear(p, rng, "recon", cfg.d_dec, cfg.patch_size)
    return p


def init_head(cfg: MaeConfig, seed: int = 0) -> dict:
    """Fresh classification-head parameters."""
    rng = np.random.default_rng([int(seed), 2])
    p: dict = {}
    _linear(p, rng, "head.fc1", cfg.d_enc, cfg.d_enc // 2)
    _linear(p, rng, "head.fc2", cfg.d_enc // 2, cfg.patch_size * cfg.classes)
    return p


ENCODER_PREFIXES = ("embed.", "enc.")


def is_encoder_param(name: str) -> bool:
    return name.startswith(ENCODER_PREFIXES)


# -- building blocks ---------------------------------------------------------

def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Fixed sin/cos table, rows = positions."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / d)
    return np.where(np.arange(d) % 2 == 0, np.sin(angle), np.cos(angle))


def _ln(p, name, x):
    return ag.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"])


def _lin(p, name, x):
    return ag.linear(x, p[f"{name}.w"], p[f"{name}.b"])


def attention(p, name, x, heads):
    B, n, d = x.shape
    dh = d // heads
    qkv = ag.reshape(_lin(p, f"{name}.qkv", x), (B, n, 3, heads, dh))
    qkv = ag.transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = (ag.index(qkv, i) for i in range(3))
    o = ag.softmax_attention(q, k, v)
    o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (B, n, d))
    return _lin(p, f"{name}.out", o)


def block(p, name, x, heads):
    """Pre-norm transformer block."""
    x = ag.add(x, attention(p, f"{name}.attn", _ln(p, f"{name}.ln1", x), heads))
    h = ag.gelu(_lin(p, f"{name}.mlp.fc1", _ln(p, f"{name}.ln2", x)))
    return ag.add(x, _lin(p, f"{name}.mlp.fc2", h))


def patch_embed(p, volume, cfg: MaeConfig) -> Tensor:
    """``(B, H, W, T)`` volume -> ``(B, N, d_enc)`` tube tokens (no positional encoding)."""
    v = volume if isinstance(volume, Tensor) else Tensor(volume)
    if v.ndim == 3:
        v = ag.reshape(v, (1,) + v.shape)
    if tuple(v.shape[1:3]) != cfg.input_hw or v.shape[3] != cfg.input_T:
        raise ValueError(f"volume {v.shape[1:]} does not match model input {cfg.input_hw + (cfg.input_T,)}")
    x = ag.patchify(ag.mul(v, cfg.input_scale), cfg.patch)
    return _lin(p, "embed", x)


def n_masked(n_patch: int, ratio: float) -> int:
    """floor(ratio * n_patch), evaluated exactly on the decimal form of ``ratio``.

    Binary rounding would otherwise turn e.g. 0.7 * 10 into 6.
    """
    return math.floor(Fraction(repr(float(ratio))) * n_patch)


def mask_indices(n_patch: int, ratio: float, rng: np.random.Generator):
    """Uniform masked subset; returns ``(visible, masked)`` index arrays, both ascending."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio {ratio} must lie in (0, 1)")
    m = n_masked(n_patch, ratio)
    masked = np.sort(rng.permutation(n_patch)[:m])
    visible = np.setdiff1d(np.arange(n_patch), masked)
    return visible, masked


def mask_spatial(tokens: Tensor, ratio: float, rng: np.random.Generator):
    """Tube masking of ``(B, N, d)`` tokens; one independent mask per batch element.

    Returns ``(visible tokens, visible index (B, n_vis), masked index (B, n_mask))``.
    """
    B, N = tokens.shape[:2]
    vis, msk = zip(*(mask_indices(N, ratio, rng) for _ in range(B)))
    vis, msk = np.stack(vis), np.stack(msk)
    return ag.gather_rows(tokens, vis), vis, msk


def encode(p, tokens: Tensor, pe: np.ndarray, cfg: MaeConfig) -> Tensor:
    """Encoder on ``tokens`` with their positional rows ``pe`` (same leading shape)."""
    x = ag.add(tokens, pe)
    for i in range(cfg.blocks_enc):
        x = block(p, f"enc.{i}", x, cfg.heads)
    return _ln(p, "enc.norm", x)


def assemble_decoder_tokens(p, features: Tensor, visible_idx, masked_idx, cfg: MaeConfig) -> Tensor:
    """Project visible features, insert mask tokens at masked slots, add positional table."""
    visible_idx = np.atleast_2d(np.asarray(visible_idx, dtype=np.int64))
    masked_idx = np.atleast_2d(np.asarray(masked_idx, dtype=np.int64)).reshape(visible_idx.shape[0], -1)
    B = features.shape[0]
    N = cfg.n_patch
    if visible_idx.shape[1] + masked_idx.shape[1] != N:
        raise ValueError(f"{visible_idx.shape[1]} visible + {masked_idx.shape[1]} masked != {N} patches")
    both = np.concatenate([visible_idx, masked_idx], axis=1)
    if np.any(np.sort(both, axis=1) != np.arange(N)):
        raise ValueError("visible and masked indices overlap or leave gaps")
    x = ag.scatter_rows(_lin(p, "proj", features), visible_idx, N)
    if masked_idx.shape[1]:
        mt = ag.mul(p["mask_token"], np.ones((B, masked_idx.shape[1], 1)))
        x = ag.add(x, ag.scatter_rows(mt, masked_idx, N))
    return ag.add(x, sinusoidal_table(N, cfg.d_dec))


def peak_heads(p, tokens: Tensor, cfg: MaeConfig):
    pos = ag.mul(ag.sigmoid(_lin(p, "peak.pos", tokens)), float(cfg.input_T - 1))
    amp = ag.softplus(_lin(p, "peak.amp", tokens))
    wid = ag.softplus(_lin(p, "peak.wid", tokens))
    return pos, amp, wid


def decode_reconstruct(p, tokens: Tensor, masked_idx, cfg: MaeConfig) -> Tensor:
    """Decoder blocks then per-patch voxel prediction for the masked slots ``(B, n_mask, P)``."""
    x = tokens
    for i in range(cfg.blocks_dec):
        x = block(p, f"dec.{i}", x, cfg.heads)
    x = _ln(p, "dec.norm", x)
    return _lin(p, "recon", ag.gather_rows(x, masked_idx))


@dataclass
class MaeOutput:
    recon: Tensor
    target: np.ndarray
    pos: Tensor
    amp: Tensor
    wid: Tensor
    visible: np.ndarray
    masked: np.ndarray


def mae_forward(p, volume: np.ndarray, cfg: MaeConfig, rng: np.random.Generator) -> MaeOutput:
    vol = np.asarray(volume, dtype=np.float64)
    if vol.ndim == 3:
        vol = vol[None]
    tokens = patch_embed(p, vol, cfg)
    B = vol.shape[0]
    pe = sinusoidal_table(cfg.n_patch, cfg.d_enc)
    vis_tok, vis, msk = mask_spatial(tokens, cfg.mask_ratio, rng)
    feats = encode(p, vis_tok, pe[vis], cfg)
    dec_in = assemble_decoder_tokens(p, feats, vis, msk, cfg)
    pos, amp, wid = peak_heads(p, dec_in, cfg)
    recon = decode_reconstruct(p, dec_in, msk, cfg)
    target_all = ag.patchify(Tensor(vol * cfg.input_scale), cfg.patch).data
    target = target_all[np.arange(B)[:, None], msk]
    return MaeOutput(recon, target, pos, amp, wid, vis, msk)


def encode_full(p, volume: np.ndarray, cfg: MaeConfig) -> Tensor:
    """Unmasked encoder features ``(B, N, d_enc)``."""
    tokens = patch_embed(p, np.asarray(volume, dtype=np.float64), cfg)
    return encode(p, tokens, sinusoidal_table(cfg.n_patch, cfg.d_enc), cfg)


def classify_head(p, features: Tensor, cfg: MaeConfig, rng=None, training: bool = False) -> Tensor:
    """Per-voxel class probabilities ``(B, H, W, T, C)`` from encoder features."""
    h = ag.relu(_lin(p, "head.fc1", features))
    h = ag.dropout(h, cfg.dropout, rng, training)
    logits = _lin(p, "head.fc2", h)
    vox = ag.unpatchify(logits, cfg.patch, cfg.input_hw + (cfg.input_T,), channels=cfg.classes)
    return ag.softmax(vox, axis=-1)
