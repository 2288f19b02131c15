"""Binarizers, closed-form scales, elastic binarization and low-bit quantizers.

Activations use one of two codomains: ``{-1, +1}`` for signed inputs and
``{0, 1}`` for non-negative ones (softmax and ReLU outputs).  Every site owns
a single learnable ``(alpha, beta)`` pair.

The numpy-level functions (``binarize_sign``, ``elastic_forward``, ...)
accept arrays or :class:`~bitformer.autodiff.Tensor` and return arrays; the
``*_op`` functions wrap them as recorded autodiff ops with STE gradients.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DTYPE, Tensor, custom_grad
from .errors import ParameterError

ALPHA_MIN = 1e-4
VALID_BITS = (1, 2, 4, 8, 32)


class BinarizerKind(str, enum.Enum):
    SIGNED = "signed"        # codomain {-1, +1}
    UNSIGNED = "unsigned"    # codomain {0, 1}


@dataclass(frozen=True, order=False)
class QuantSpec:
    """Embedding / weight / activation bit-widths, written ``e-w-a``."""

    e_bits: int = 32
    w_bits: int = 32
    a_bits: int = 32

    def __post_init__(self):
        for name in ("e_bits", "w_bits", "a_bits"):
            v = getattr(self, name)
            if v not in VALID_BITS:
                raise ParameterError(f"{name}={v} not in {VALID_BITS}")

    @classmethod
    def parse(cls, text: str) -> "QuantSpec":
        parts = re.split(r"[-_/]", text.strip())
        if len(parts) != 3:
            raise ParameterError(f"quant spec {text!r} is not of the form e-w-a")
        try:
            return cls(*(int(p) for p in parts))
        except ValueError as exc:
            raise ParameterError(f"quant spec {text!r}: {exc}") from exc

    @classmethod
    def full_precision(cls) -> "QuantSpec":
        return cls(32, 32, 32)

    @property
    def is_full_precision(self) -> bool:
        return self.e_bits == self.w_bits == self.a_bits == 32

    def dominates(self, other: "QuantSpec") -> bool:
        """Strict order on (weight bits, activation bits); embeddings may not grow."""
        a, b = self.w_bits, self.a_bits
        c, d = other.w_bits, other.a_bits
        pair = (a > c and b >= d) or (a >= c and b > d)
        return pair and self.e_bits >= other.e_bits

    def __str__(self):
        return f"{self.e_bits}-{self.w_bits}-{self.a_bits}"

    @property
    def label(self) -> str:
        return f"W{self.w_bits}A{self.a_bits}"


@dataclass
class ElasticParams:
    """Learnable scale ``alpha > 0`` and threshold ``beta`` of one quantization site."""

    kind: BinarizerKind
    bits: int = 1
    name: str = ""
    learnable: bool = True
    alpha: Tensor = field(default=None)
    beta: Tensor = field(default=None)
    initialized: bool = False

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = Tensor(1.0, requires_grad=self.learnable, name=f"{self.name}.alpha")
        if self.beta is None:
            self.beta = Tensor(0.0, requires_grad=self.learnable, name=f"{self.name}.beta")

    @property
    def alpha_value(self) -> float:
        return self.alpha.item()

    @property
    def beta_value(self) -> float:
        return self.beta.item()

    def set(self, alpha: float, beta: float = 0.0):
        self.alpha.data = np.asarray(alpha, dtype=DTYPE)
        self.beta.data = np.asarray(beta, dtype=DTYPE)
        self.initialized = True

    def set_learnable(self, flag: bool):
        self.learnable = flag
        self.alpha.requires_grad = flag
        self.beta.requires_grad = flag

    def clamp_(self):
        if self.alpha.data < ALPHA_MIN:
            self.alpha.data = np.asarray(ALPHA_MIN, dtype=DTYPE)

    def init_from(self, x):
        self.set(init_alpha(x, self.kind, self.bits), 0.0)


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _round_half_up(v):
    return np.floor(v + DTYPE(0.5))


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + DTYPE(0.5))


# ------------------------------------------------------------- fixed binarizers

def binarize_sign(x) -> np.ndarray:
    """Elementwise sign with sign(0) = +1."""
    out = (_arr(x) >= 0).astype(DTYPE)
    out *= 2
    out -= 1
    return out


def binarize_round01(x) -> np.ndarray:
    """Round of clip(x, 0, 1): 1 where x >= 0.5, else 0."""
    return (_arr(x) >= 0.5).astype(DTYPE)


def optimal_scale_sign(x) -> float:
    """Mean absolute value, the minimizer of ||x - a*sign(x)||^2 over a >= 0."""
    x = _arr(x)
    if x.size == 0:
        raise ParameterError("optimal_scale_sign: empty input")
    return float(np.abs(x.astype(np.float64)).mean())


def optimal_scale_01(x) -> float:
    """Mean of entries >= 0.5; 1.0 if there are none."""
    x = _arr(x)
    if x.size == 0:
        raise ParameterError("optimal_scale_01: empty input")
    sel = x[x >= 0.5]
    if sel.size == 0:
        return 1.0
    return float(sel.astype(np.float64).mean())


def binarization_error(x, alpha: float, kind: BinarizerKind) -> float:
    """Squared l2 error ||x - alpha * code(x)||^2 for the fixed binarizer of ``kind``."""
    if alpha < 0:
        raise ParameterError("binarization_error: alpha must be >= 0")
    x = _arr(x).astype(np.float64)
    code = binarize_sign(x) if BinarizerKind(kind) is BinarizerKind.SIGNED else binarize_round01(x)
    r = x - alpha * code.astype(np.float64)
    return float((r * r).sum())


def weight_scale(w, centered: bool = False) -> float:
    w = _arr(w).astype(np.float64)
    if centered:
        w = w - w.mean()
    return float(np.abs(w).mean())


def binarize_weights(w, scale_from_centered: bool = False) -> np.ndarray:
    """mean|W| * sign(W - mean(W)).

    The scale uses the uncentered weights unless ``scale_from_centered``.
    """
    w = _arr(w)
    if w.size == 0:
        raise ParameterError("binarize_weights: empty input")
    s = DTYPE(weight_scale(w, scale_from_centered))
    return s * binarize_sign(w - w.mean(dtype=DTYPE))


def exact_scale_01(x) -> float:
    """Global minimizer of ||x - a*round01(x/a)||^2 over a > 0; 1.0 if max(x) <= 0.

    For a fixed support the best scale is the support mean, and the support of
    round01(x/a) is always a top-k set, so it suffices to scan the k whose mean
    reproduces that same top-k set.
    """
    x = np.sort(_arr(x).astype(np.float64).ravel())[::-1]
    if x.size == 0 or x[0] <= 0:
        return 1.0
    k = np.arange(1, x.size + 1)
    a = np.cumsum(x) / k
    nxt = np.append(x[1:], -np.inf)
    ok = (x >= a / 2) & (nxt < a / 2) & (a > 0)
    gain = np.where(ok, a * a * k, -np.inf)
    return float(a[int(np.argmax(gain))])


def init_alpha(x, kind: BinarizerKind, bits: int = 1) -> float:
    """First-batch initialization of alpha for a site.

    A {0,1} site whose batch has no entry >= 0.5 would binarize to all zeros
    under the closed-form fallback and pass no gradient downstream, so it uses
    the exact J minimizer instead. Other degenerate cases fall back to 1.0.
    """
    x = _arr(x)
    if bits == 1 and kind is BinarizerKind.UNSIGNED and not np.any(x >= 0.5):
        a = exact_scale_01(x)
    elif bits == 1:
        a = optimal_scale_sign(x) if kind is BinarizerKind.SIGNED else optimal_scale_01(x)
    else:
        v = np.abs(x) if kind is BinarizerKind.SIGNED else np.maximum(x, 0)
        a = float(np.percentile(v, 99.0)) if v.size else 0.0
    if not np.isfinite(a) or a <= ALPHA_MIN:
        a = 1.0
    return a


# ------------------------------------------------------------- elastic binarizer

def _check(alpha):
    alpha = float(alpha)
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    return DTYPE(alpha)


def _params(p):
    return _check(p.alpha_value), DTYPE(p.beta_value), BinarizerKind(p.kind)


def elastic_code(x, alpha, beta, kind) -> np.ndarray:
    x = _arr(x)
    alpha = _check(alpha)
    beta = DTYPE(beta)
    if BinarizerKind(kind) is BinarizerKind.SIGNED:
        return binarize_sign(x - beta)
    u = np.clip((x - beta) / alpha, 0, 1)
    return _round_half_up(u)


def elastic_forward(x, p: ElasticParams) -> np.ndarray:
    """alpha * round(clip((x - beta)/alpha, 0, 1)), or alpha * sign(x - beta) when signed."""
    alpha, beta, kind = _params(p)
    return alpha * elastic_code(x, alpha, beta, kind)


def elastic_grads(x, alpha, beta, kind):
    """Per-element STE derivatives (d/dx, d/dalpha, d/dbeta) of the elastic binarizer."""
    x = _arr(x)
    alpha = _check(alpha)
    beta = DTYPE(beta)
    one, zero = DTYPE(1), DTYPE(0)
    if BinarizerKind(kind) is BinarizerKind.SIGNED:
        inside = np.abs(x - beta) <= alpha
        dx = np.where(inside, one, zero)
        da = binarize_sign(x - beta)
        db = np.where(inside, -one, zero)
        return dx, da, db
    lo = x < beta
    hi = x >= alpha + beta
    mid_low = ~lo & (x < alpha / DTYPE(2) + beta)
    inside = ~lo & ~hi
    da = np.where(hi, one, zero)
    da = np.where(mid_low, (beta - x) / alpha, da)
    da = np.where(inside & ~mid_low, one - (x - beta) / alpha, da)
    dx = np.where(inside, one, zero)
    db = np.where(inside, -one, zero)
    return dx, da, db


def elastic_backward(x, p: ElasticParams, upstream):
    """(grad_x, grad_alpha, grad_beta); alpha/beta gradients are summed over the site."""
    alpha, beta, kind = _params(p)
    g = _arr(upstream)
    dx, da, db = elastic_grads(x, alpha, beta, kind)
    return g * dx, float((g * da).sum(dtype=np.float64)), float((g * db).sum(dtype=np.float64))


# ------------------------------------------------------------- multi-bit

def _levels(bits: int, kind: BinarizerKind) -> int:
    if BinarizerKind(kind) is BinarizerKind.SIGNED:
        return 2 ** (bits - 1) - 1
    return 2 ** bits - 1


def uniform_code(x, alpha, beta, n: int, kind) -> np.ndarray:
    """Integer codes of the uniform quantizer with ``n`` positive steps."""
    x = _arr(x)
    alpha = _check(alpha)
    u = (x - DTYPE(beta)) / alpha
    if BinarizerKind(kind) is BinarizerKind.SIGNED:
        return _round_half_away(np.clip(u, -1, 1) * DTYPE(n))
    return _round_half_up(np.clip(u, 0, 1) * DTYPE(n))


def uniform_grads(x, alpha, beta, n: int, kind):
    x = _arr(x)
    alpha = _check(alpha)
    beta = DTYPE(beta)
    code = uniform_code(x, alpha, beta, n, kind) / DTYPE(n)
    u = (x - beta) / alpha
    if BinarizerKind(kind) is BinarizerKind.SIGNED:
        inside = np.abs(u) <= 1
    else:
        inside = (x >= beta) & (x < alpha + beta)
    one, zero = DTYPE(1), DTYPE(0)
    dx = np.where(inside, one, zero)
    da = np.where(inside, code - u, code)
    db = np.where(inside, -one, zero)
    return dx, da, db


def quantize_multibit(x, p: ElasticParams, bits: int) -> np.ndarray:
    """alpha * round(clip((x-beta)/alpha) * n) / n with n = 2^b - 1 (unsigned) or 2^(b-1) - 1 (signed)."""
    if bits < 2:
        raise ParameterError("quantize_multibit needs bits >= 2; use elastic_forward for 1 bit")
    alpha, beta, kind = _params(p)
    n = _levels(bits, kind)
    return uniform_code(x, alpha, beta, n, kind) * (alpha / DTYPE(n))


# ------------------------------------------------------------- autodiff ops

def activation_quant_op(x: Tensor, p: ElasticParams) -> Tensor:
    """Fake-quantize an activation tensor at site ``p`` with STE gradients.

    The output carries integer ``qcode`` and scalar ``qscale``.
    """
    if p.bits == 32:
        return x
    if not p.initialized:
        p.init_from(x.data)
    alpha, beta, kind = _params(p)
    xd = x.data
    signed = kind is BinarizerKind.SIGNED
    if p.bits == 1 and signed:
        centered = xd - beta
        code = binarize_sign(centered)
        scale = alpha
        inside = np.abs(centered) <= alpha
        u = None
    else:
        n = 1 if p.bits == 1 else _levels(p.bits, kind)
        u = (xd - beta) / alpha
        if signed:
            code = _round_half_away(np.clip(u, -1, 1) * DTYPE(n))
            inside = np.abs(u) <= 1
        else:
            code = _round_half_up(np.clip(u, 0, 1) * DTYPE(n))
            inside = (xd >= beta) & (xd < alpha + beta)
        scale = alpha / DTYPE(n)
        if n != 1:
            u = u * DTYPE(n)   # da = (code - n*u*inside) / n
    scale = DTYPE(scale)
    n_steps = DTYPE(1) if p.bits == 1 else DTYPE(_levels(p.bits, kind))

    def bw(g, _x, _a, _b):
        gi = g * inside
        gsum = gi.sum(dtype=np.float64)
        ga = float((g * code).sum(dtype=np.float64))
        if u is not None:
            ga -= float((gi * u).sum(dtype=np.float64))
        ga /= float(n_steps)
        return gi, np.asarray(ga, DTYPE), np.asarray(-gsum, DTYPE)

    out = custom_grad(lambda *_: code * scale, bw, x, p.alpha, p.beta, op=f"quant[{p.name}]")
    out.qcode = code
    out.qscale = scale
    return out


def weight_quant_codes(w: np.ndarray, bits: int, scale_from_centered: bool = False,
                       per_row: bool = False):
    """(codes, scale) for a weight tensor; scale is a scalar or a column vector when ``per_row``."""
    w = _arr(w)
    if per_row:
        centered = w - w.mean(axis=1, keepdims=True, dtype=DTYPE)
    else:
        centered = w - w.mean(dtype=DTYPE)
    if bits == 1:
        code = binarize_sign(centered)
        src = centered if scale_from_centered else w
        if per_row:
            scale = np.abs(src).mean(axis=1, keepdims=True, dtype=DTYPE)
        else:
            scale = DTYPE(weight_scale(w, scale_from_centered))
        return code, scale
    n = 2 ** (bits - 1) - 1
    if per_row:
        amax = np.abs(centered).max(axis=1, keepdims=True)
        amax = np.where(amax > 0, amax, DTYPE(1))
    else:
        amax = DTYPE(np.abs(centered).max()) or DTYPE(1)
    code = _round_half_away(np.clip(centered / amax, -1, 1) * DTYPE(n))
    return code, (amax / DTYPE(n)).astype(DTYPE)


def weight_quant_op(w: Tensor, bits: int, scale_from_centered: bool = False,
                    per_row: bool = False) -> Tensor:
    """Fake-quantize latent weights; the gradient passes straight through, unclipped."""
    if bits == 32:
        return w
    code, scale = weight_quant_codes(w.data, bits, scale_from_centered, per_row)
    out = custom_grad(lambda wd: code * scale, lambda g, wd: (g,), w, op="wquant")
    if not per_row:
        out.qcode = code
        out.qscale = DTYPE(scale)
    return out
