"""Transformer encoder with per-site binarization (scaled-down BERT shape).

Block layout (post-LN, ReLU feed-forward)::

    x -> aq[qkv_in] -> Q, K, V linears -> aq[q], aq[k], aq[v]
      -> softmax(QK^T / sqrt(d_k) + mask) -> aq[probs] -> probs @ V
      -> aq[ctx] -> output linear -> LN(x + .) = h
    h -> aq[ffn_in] -> W1 -> ReLU -> aq[ffn_hidden] -> W2 -> LN(h + .)

``aq[probs]`` and ``aq[ffn_hidden]`` use the {0, 1} codomain, every other
activation site the {-1, +1} codomain.  Weights of all block linears and the
embedding tables are quantized; biases, LayerNorm and the classifier stay
full precision.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import binkernel
from .autodiff import (DTYPE, Tensor, add, embedding_lookup, layer_norm, matmul,
                       mul, no_grad, relu, reshape, select, softmax, transpose)
from .errors import InputError, ScheduleError
from .quantizers import (BinarizerKind, ElasticParams, QuantSpec, activation_quant_op,
                         weight_quant_codes, weight_quant_op)

PAD_ID = 0
MASK_NEG = -1e9

SITE_NAMES = ("qkv_in", "q", "k", "v", "probs", "ctx", "ffn_in", "ffn_hidden")
UNSIGNED_SITES = ("probs", "ffn_hidden")   # outputs of softmax / ReLU
LINEARS = ("attn.q", "attn.k", "attn.v", "attn.o", "ffn.w1", "ffn.w2")


@dataclass
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    vocab_size: int = 1000
    max_seq_len: int = 64
    num_classes: int = 2
    quant: QuantSpec = field(default_factory=QuantSpec.full_precision)
    two_set: bool = True
    elastic: bool = True
    quantize_classifier: bool = False
    scale_from_centered: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if isinstance(self.quant, str):
            self.quant = QuantSpec.parse(self.quant)
        elif isinstance(self.quant, dict):
            self.quant = QuantSpec(**self.quant)
        for name in ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size",
                     "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("d_model must be divisible by num_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.num_heads

    def to_dict(self) -> dict:
        d = asdict(self)
        d["quant"] = str(self.quant)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


PRESETS = {
    "desk": dict(num_layers=4, num_heads=4, d_model=128, d_ff=512, max_seq_len=64),
    "bert-base": dict(num_layers=12, num_heads=12, d_model=768, d_ff=3072,
                      vocab_size=30522, max_seq_len=512, num_classes=2),
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ModelConfig(**kw)


def site_kind(site: str, two_set: bool = True) -> BinarizerKind:
    short = site.rsplit(".", 1)[-1]
    if two_set and short in UNSIGNED_SITES:
        return BinarizerKind.UNSIGNED
    return BinarizerKind.SIGNED


def build_site_map(config: ModelConfig) -> dict:
    """Quantization-site map: one ElasticParams per activation site, in forward order."""
    sites = {}
    for i in range(config.num_layers):
        for s in SITE_NAMES:
            name = f"L{i}.{s}"
            sites[name] = ElasticParams(kind=site_kind(s, config.two_set),
                                        bits=config.quant.a_bits, name=name,
                                        learnable=config.elastic)
    return sites


class Encoder:
    """Latent full-precision parameters plus quantization sites."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        std = c.init_std

        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def const(v, n):
            return Tensor(np.full(n, v), requires_grad=True)

        p = {}
        p["emb.word"] = normal(c.vocab_size, c.d_model)
        p["emb.pos"] = normal(c.max_seq_len, c.d_model)
        p["emb.ln.g"] = const(1.0, c.d_model)
        p["emb.ln.b"] = const(0.0, c.d_model)
        for i in range(c.num_layers):
            pre = f"L{i}."
            for lin in ("attn.q", "attn.k", "attn.v", "attn.o"):
                p[pre + lin + ".w"] = normal(c.d_model, c.d_model)
                p[pre + lin + ".b"] = const(0.0, c.d_model)
            p[pre + "ln1.g"] = const(1.0, c.d_model)
            p[pre + "ln1.b"] = const(0.0, c.d_model)
            p[pre + "ffn.w1.w"] = normal(c.d_model, c.d_ff)
            p[pre + "ffn.w1.b"] = const(0.0, c.d_ff)
            p[pre + "ffn.w2.w"] = normal(c.d_ff, c.d_model)
            p[pre + "ffn.w2.b"] = const(0.0, c.d_model)
            p[pre + "ln2.g"] = const(1.0, c.d_model)
            p[pre + "ln2.b"] = const(0.0, c.d_model)
        p["cls.w"] = normal(c.d_model, c.num_classes)
        p["cls.b"] = const(0.0, c.num_classes)
        for name, t in p.items():
            t.name = name
        self.params = p
        self.sites = build_site_map(config)

    # ------------------------------------------------------------------ state

    @property
    def quant(self) -> QuantSpec:
        return self.config.quant

    def quantized_weight_names(self):
        names = [f"L{i}.{lin}.w" for i in range(self.config.num_layers) for lin in LINEARS]
        if self.config.quantize_classifier:
            names.append("cls.w")
        return names

    def weight_bits(self, name: str) -> int:
        if name.startswith("emb.") and name in ("emb.word", "emb.pos"):
            return self.quant.e_bits
        if name in self.quantized_weight_names():
            return self.quant.w_bits
        return 32

    def trainable(self) -> dict:
        out = dict(self.params)
        if self.quant.a_bits != 32 and self.config.elastic:
            for name, s in self.sites.items():
                out[f"site.{name}.alpha"] = s.alpha
                out[f"site.{name}.beta"] = s.beta
        return out

    def no_decay_names(self):
        return [n for n in self.trainable() if not n.endswith(".w") and n not in ("emb.word", "emb.pos")]

    def latent_state(self) -> dict:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_latent(self, state: dict):
        for n, arr in state.items():
            self.params[n].data = np.array(arr, dtype=DTYPE)

    def site_state(self) -> dict:
        return {n: (s.alpha_value, s.beta_value, s.initialized) for n, s in self.sites.items()}

    def load_site_state(self, state: dict):
        for n, (a, b, init) in state.items():
            self.sites[n].set(a, b)
            self.sites[n].initialized = init

    def zero_grad(self):
        for t in self.trainable().values():
            t.grad = None

    def clamp_sites(self):
        for s in self.sites.values():
            s.clamp_()

    def clone(self) -> "Encoder":
        return copy.deepcopy(self)

    # ---------------------------------------------------------------- forward

    def forward(self, ids, mode: str = "train"):
        """Return ``(logits, block_outputs)`` for token ids ``[batch, seq]``."""
        if mode == "train":
            return _encode(self, np.asarray(ids), _TrainOps(self))
        if mode == "deploy":
            return self.deployed().forward(ids)
        raise ValueError(f"unknown mode {mode!r}")

    __call__ = forward

    def predict(self, ids, mode: str = "train", batch_size: int = 256) -> np.ndarray:
        ids = np.asarray(ids)
        out = []
        with no_grad():
            for i in range(0, len(ids), batch_size):
                logits, _ = self.forward(ids[i:i + batch_size], mode=mode)
                out.append(logits.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes), DTYPE)

    def deployed(self) -> "DeployedModel":
        return DeployedModel.from_encoder(self)


def _check_ids(config: ModelConfig, ids: np.ndarray):
    if ids.ndim != 2:
        raise InputError(f"token ids must be [batch, seq], got shape {ids.shape}")
    if ids.shape[1] > config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InputError(f"token id out of range [0, {config.vocab_size})")


class _TrainOps:
    """Fake-quantized float path; weight quantization recomputed from latent weights."""

    def __init__(self, enc: Encoder):
        self.enc = enc
        self.cfg = enc.config

    def site(self, x, name):
        return activation_quant_op(x, self.enc.sites[name])

    def embedding(self, name, ids):
        w = self.enc.params[name]
        bits = self.enc.weight_bits(name)
        wq = weight_quant_op(w, bits, self.cfg.scale_from_centered, per_row=True)
        return embedding_lookup(wq, ids)

    def param(self, name):
        return self.enc.params[name]

    def linear(self, x2d, name):
        w = self.enc.params[name + ".w"]
        wq = weight_quant_op(w, self.enc.weight_bits(name + ".w"), self.cfg.scale_from_centered)
        return add(matmul(x2d, wq), self.enc.params[name + ".b"])

    def bmm(self, a, b_t):
        return matmul(a, transpose(b_t, (0, 1, 3, 2)))


def _encode(model, ids, ops):
    c = model.config
    _check_ids(c, ids)
    B, S = ids.shape
    H, dk, d = c.num_heads, c.d_head, c.d_model
    pos = reshape(ops.embedding("emb.pos", np.arange(S)), (1, S, d))
    x = add(ops.embedding("emb.word", ids), pos)
    x = layer_norm(x, ops.param("emb.ln.g"), ops.param("emb.ln.b"))
    key_pad = (ids == PAD_ID)
    mask = np.where(key_pad, DTYPE(MASK_NEG), DTYPE(0))[:, None, None, :]
    inv_sqrt = 1.0 / math.sqrt(dk)
    blocks = []
    for i in range(c.num_layers):
        pre = f"L{i}."
        x2 = reshape(x, (B * S, d))
        xin = ops.site(x2, pre + "qkv_in")

        def heads(t):
            return transpose(reshape(t, (B, S, H, dk)), (0, 2, 1, 3))

        q = ops.site(heads(ops.linear(xin, pre + "attn.q")), pre + "q")
        k = ops.site(heads(ops.linear(xin, pre + "attn.k")), pre + "k")
        v = ops.site(heads(ops.linear(xin, pre + "attn.v")), pre + "v")
        scores = add(mul(ops.bmm(q, k), inv_sqrt), mask)
        probs = ops.site(softmax(scores, axis=-1), pre + "probs")
        ctx = ops.bmm(probs, transpose(v, (0, 1, 3, 2)))
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B * S, d))
        ctx = ops.site(ctx, pre + "ctx")
        attn = ops.linear(ctx, pre + "attn.o")
        h = layer_norm(add(x2, attn), ops.param(pre + "ln1.g"), ops.param(pre + "ln1.b"))
        fin = ops.site(h, pre + "ffn_in")
        hid = relu(ops.linear(fin, pre + "ffn.w1"))
        hid = ops.site(hid, pre + "ffn_hidden")
        f = ops.linear(hid, pre + "ffn.w2")
        out = layer_norm(add(h, f), ops.param(pre + "ln2.g"), ops.param(pre + "ln2.b"))
        x = reshape(out, (B, S, d))
        blocks.append(x)
    cls = select(x, 0, axis=1)
    logits = ops.linear(cls, "cls")
    return logits, blocks


# ------------------------------------------------------------------ deployment

class DeployedModel:
    """Inference-only model: 1-bit weights bit-packed, products through binkernel."""

    def __init__(self, config: ModelConfig, fp: dict, packed: dict, sites: dict):
        self.config = config
        self.fp = fp          # name -> float32 array (LN, biases, FP weights, embeddings)
        self.packed = packed  # name -> (PackedBits of W.T codes, scale) or (codes, scale) for multibit
        self.sites = sites    # name -> ElasticParams (frozen)

    @classmethod
    def from_encoder(cls, enc: Encoder) -> "DeployedModel":
        c = enc.config
        fp, packed = {}, {}
        for name, t in enc.params.items():
            bits = enc.weight_bits(name)
            if name in ("emb.word", "emb.pos") and bits != 32:
                code, scale = weight_quant_codes(t.data, bits, c.scale_from_centered, per_row=True)
                if bits == 1:
                    packed[name] = (binkernel.pack(code, binkernel.SIGN), scale)
                else:
                    packed[name] = (code, scale)
            elif name.endswith(".w") and bits != 32:
                code, scale = weight_quant_codes(t.data, bits, c.scale_from_centered)
                if bits == 1:
                    packed[name] = (binkernel.pack_columns(code, binkernel.SIGN), DTYPE(scale))
                else:
                    packed[name] = (code, DTYPE(scale))
            else:
                fp[name] = t.data.copy()
        sites = {}
        for n, s in enc.sites.items():
            ns = ElasticParams(kind=s.kind, bits=s.bits, name=n, learnable=False)
            ns.set(s.alpha_value, s.beta_value)
            ns.initialized = s.initialized
            sites[n] = ns
        return cls(c, fp, packed, sites)

    def forward(self, ids):
        with no_grad():
            return _encode(self, np.asarray(ids), _DeployOps(self))

    __call__ = forward

    def predict(self, ids, batch_size: int = 256) -> np.ndarray:
        ids = np.asarray(ids)
        out = [self.forward(ids[i:i + batch_size])[0].data for i in range(0, len(ids), batch_size)]
        return np.concatenate(out, axis=0)


class _DeployOps:
    def __init__(self, dep: DeployedModel):
        self.dep = dep

    def site(self, x, name):
        return activation_quant_op(x, self.dep.sites[name])

    def param(self, name):
        return Tensor(self.dep.fp[name])

    def embedding(self, name, ids):
        if name in self.dep.packed:
            store, scale = self.dep.packed[name]
            codes = binkernel.unpack(store) if isinstance(store, binkernel.PackedBits) else store
            table = codes * scale
            return Tensor(table[np.asarray(ids)])
        return Tensor(self.dep.fp[name][np.asarray(ids)])

    def linear(self, x2d, name):
        wname = name + ".w"
        bias = Tensor(self.dep.fp[name + ".b"])
        if wname not in self.dep.packed:
            return add(matmul(x2d, Tensor(self.dep.fp[wname])), bias)
        store, wscale = self.dep.packed[wname]
        if isinstance(store, binkernel.PackedBits) and x2d.qcode is not None and _is_binary(x2d):
            out = _packed_product(x2d.qcode, x2d.qscale, store, wscale)
            return add(Tensor(out), bias)
        wcode = binkernel.unpack(store).T if isinstance(store, binkernel.PackedBits) else store
        wt = Tensor(wcode * wscale)
        wt.qcode, wt.qscale = wcode, DTYPE(wscale)
        return add(matmul(x2d, wt), bias)

    def bmm(self, a, b_t):
        """a[B,H,S,X] @ b_t[B,H,T,X]^T through the packed kernels when both are binary."""
        if a.qcode is None or b_t.qcode is None or not (_is_binary(a) and _is_binary(b_t)):
            return matmul(a, transpose(b_t, (0, 1, 3, 2)))
        if _is_signed(b_t) is False:
            return matmul(a, transpose(b_t, (0, 1, 3, 2)))
        B, H = a.shape[:2]
        out = np.empty(a.shape[:3] + (b_t.shape[2],), dtype=DTYPE)
        for bi in range(B):
            for hi in range(H):
                pb = binkernel.pack(b_t.qcode[bi, hi], binkernel.SIGN)
                out[bi, hi] = _packed_product(a.qcode[bi, hi], a.qscale, pb, b_t.qscale)
        return Tensor(out)


def _is_binary(t) -> bool:
    c = t.qcode
    return bool(np.all((c == 0) | (c == 1))) or bool(np.all(np.abs(c) == 1))


def _is_signed(t) -> bool:
    return bool(np.all(np.abs(t.qcode) == 1))


def _packed_product(codes, scale_a, packed_b, scale_b):
    if np.all(np.abs(codes) == 1):
        pa = binkernel.pack(codes, binkernel.SIGN)
        return binkernel.xnor_matmul(pa, packed_b, scale_a, scale_b)
    pa = binkernel.pack(codes, binkernel.MASK)
    return binkernel.mask_sign_matmul(pa, packed_b, scale_a, scale_b)


# ------------------------------------------------------------------ Quantize()

def quantize_model(teacher: Encoder, spec: QuantSpec, carry_alpha: bool = True,
                   two_set: bool | None = None, elastic: bool | None = None) -> Encoder:
    """Student with the teacher's latent weights and sites reconfigured to ``spec``.

    A trained site's (alpha, beta) seed the student's site of the same kind
    when the bit-width is unchanged or ``carry_alpha`` is set; every other
    site is re-initialized from the first batch seen.  Frozen (non-elastic)
    students always start from the closed-form scale.
    """
    if isinstance(spec, str):
        spec = QuantSpec.parse(spec)
    if not teacher.quant.dominates(spec):
        raise ScheduleError(f"student spec {spec} is not strictly below teacher spec {teacher.quant}")
    cfg = replace(teacher.config, quant=spec)
    if two_set is not None:
        cfg.two_set = two_set
    if elastic is not None:
        cfg.elastic = elastic
    student = Encoder.__new__(Encoder)
    student.config = cfg
    student.params = {}
    for n, t in teacher.params.items():
        nt = Tensor(t.data.copy(), requires_grad=True, name=n)
        student.params[n] = nt
    student.sites = build_site_map(cfg)
    if teacher.quant.a_bits != 32 and cfg.elastic:
        for n, s in student.sites.items():
            old = teacher.sites.get(n)
            if old is None or not old.initialized or old.kind != s.kind:
                continue
            if old.bits == s.bits or carry_alpha:
                s.set(old.alpha_value, old.beta_value)
    return student


# ------------------------------------------------------------------ cost model

@dataclass
class Cost:
    size_mb: float
    flops_g: float
    params: int


def count_cost(config: ModelConfig, spec: QuantSpec | None = None, seq_len: int = 128) -> Cost:
    """Model size in MiB and forward FLOPs (2 per MAC) for one sequence.

    A quantized product with operand bit-widths (p, q) counts p*q/64 of its
    full-precision FLOPs.
    """
    c = config
    spec = spec or c.quant
    if isinstance(spec, str):
        spec = QuantSpec.parse(spec)
    d, f, L = c.d_model, c.d_ff, c.num_layers
    emb_params = (c.vocab_size + c.max_seq_len) * d
    lin_params = L * (4 * d * d + 2 * d * f)
    fp_params = L * (4 * d + f + d) + L * 4 * d + 2 * d
    cls_params = d * c.num_classes
    fp_params += c.num_classes
    cls_bits = spec.w_bits if c.quantize_classifier else 32
    bits = (emb_params * spec.e_bits + lin_params * spec.w_bits + fp_params * 32
            + cls_params * cls_bits)
    size_mb = bits / 8 / 2 ** 20

    def factor(p, q):
        return 1.0 if p == 32 or q == 32 else p * q / 64.0

    lin_flops = 2 * seq_len * lin_params
    attn_flops = L * 2 * 2 * seq_len * seq_len * d
    cls_flops = 2 * cls_params
    other = L * seq_len * (5 * c.num_heads * seq_len + 10 * d + f)
    flops = (lin_flops * factor(spec.w_bits, spec.a_bits)
             + attn_flops * factor(spec.a_bits, spec.a_bits)
             + cls_flops * (factor(spec.w_bits, spec.a_bits) if c.quantize_classifier else 1.0)
             + other)
    return Cost(size_mb=size_mb, flops_g=flops / 1e9,
                params=emb_params + lin_params + fp_params + cls_params)
