"""Versioned little-endian checkpoint files.

Layout::

    magic  b"BITFMR\\x00\\x01"
    u32    format version
    u32    metadata length, then UTF-8 JSON (model config, site kinds/bits)
    u32    section count; per section:
        u8   section id (0 latent, 1 deployed)
        u32  record count; per record:
            u16 name length, name (UTF-8)
            u8  dtype (0 f32, 1 packed-sign, 2 packed-mask)
            u8  ndim, u32 * ndim shape
            u32 scale count, f32 * count scales
            u64 payload length, payload

Packed payloads are the row-major uint64 words of :class:`PackedBits`;
their shape is the logical (rows, cols).
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from . import binkernel
from .errors import FormatError
from .model import DeployedModel, Encoder, ModelConfig
from .quantizers import BinarizerKind, ElasticParams

MAGIC = b"BITFMR\x00\x01"
VERSION = 1
LATENT, DEPLOYED = 0, 1
F32, PACKED_SIGN, PACKED_MASK = 0, 1, 2
_DTYPE_NAMES = {F32: "f32", PACKED_SIGN: "packed-sign", PACKED_MASK: "packed-mask"}


class Record:
    __slots__ = ("name", "dtype", "shape", "scales", "payload")

    def __init__(self, name, dtype, shape, scales, payload):
        self.name = name
        self.dtype = dtype
        self.shape = tuple(shape)
        self.scales = np.asarray(scales, dtype="<f4").reshape(-1)
        self.payload = payload

    def array(self) -> np.ndarray:
        if self.dtype == F32:
            return np.frombuffer(self.payload, dtype="<f4").reshape(self.shape).astype(np.float32)
        rows, cols = self.shape
        words = np.frombuffer(self.payload, dtype="<u8").reshape(rows, -1).astype(np.uint64)
        sem = binkernel.SIGN if self.dtype == PACKED_SIGN else binkernel.MASK
        return binkernel.PackedBits(rows, cols, words, sem)


def f32_record(name, arr, scales=()):
    arr = np.asarray(arr, dtype="<f4")
    return Record(name, F32, arr.shape, scales, arr.tobytes())


def packed_record(name, p: binkernel.PackedBits, scales):
    dt = PACKED_SIGN if p.semantics == binkernel.SIGN else PACKED_MASK
    return Record(name, dt, (p.rows, p.cols), scales, p.words.astype("<u8").tobytes())


# ------------------------------------------------------------------ raw io

def write_file(path, meta: dict, sections: dict):
    if not sections:
        raise FormatError("a checkpoint needs at least one section")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    mj = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(mj)))
    buf.write(mj)
    buf.write(struct.pack("<I", len(sections)))
    for sid in sorted(sections):
        recs = sections[sid]
        buf.write(struct.pack("<BI", sid, len(recs)))
        for r in recs:
            nb = r.name.encode("utf-8")
            buf.write(struct.pack("<H", len(nb)))
            buf.write(nb)
            buf.write(struct.pack("<BB", r.dtype, len(r.shape)))
            buf.write(struct.pack(f"<{len(r.shape)}I", *r.shape))
            buf.write(struct.pack("<I", r.scales.size))
            buf.write(r.scales.astype("<f4").tobytes())
            buf.write(struct.pack("<Q", len(r.payload)))
            buf.write(r.payload)
    Path(path).write_bytes(buf.getvalue())


def read_file(path):
    """(meta, {section_id: {name: Record}})."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError(f"{path}: bad magic header, not a checkpoint")
    (version,) = unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = unpack("<I")
    try:
        meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt metadata") from exc
    (nsec,) = unpack("<I")
    if nsec < 1:
        raise FormatError(f"{path}: no sections")
    sections = {}
    for _ in range(nsec):
        sid, nrec = unpack("<BI")
        if sid not in (LATENT, DEPLOYED):
            raise FormatError(f"{path}: unknown section id {sid}")
        recs = {}
        for _ in range(nrec):
            (nl,) = unpack("<H")
            name = bytes(take(nl)).decode("utf-8")
            dt, nd = unpack("<BB")
            if dt not in _DTYPE_NAMES:
                raise FormatError(f"{path}: record {name!r} has unknown dtype {dt}")
            shape = unpack(f"<{nd}I")
            (ns,) = unpack("<I")
            scales = np.frombuffer(bytes(take(4 * ns)), dtype="<f4")
            (plen,) = unpack("<Q")
            recs[name] = Record(name, dt, shape, scales, bytes(take(plen)))
        sections[sid] = recs
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after last section")
    return meta, sections


# ------------------------------------------------------------------ model io

def _site_records(sites):
    out = []
    for n, s in sites.items():
        out.append(f32_record(f"site.{n}.alpha", np.float32(s.alpha_value)))
        out.append(f32_record(f"site.{n}.beta", np.float32(s.beta_value)))
    return out


def _meta(enc_or_dep, extra=None):
    sites = {n: {"kind": s.kind.value, "bits": s.bits, "initialized": bool(s.initialized)}
             for n, s in enc_or_dep.sites.items()}
    meta = {"config": enc_or_dep.config.to_dict(), "sites": sites}
    if extra:
        meta["extra"] = extra
    return meta


def save(path, model: Encoder, latent: bool = True, deployed: bool = False, extra: dict | None = None):
    """Write ``model``; either or both sections may be included."""
    if not (latent or deployed):
        raise FormatError("choose at least one of latent / deployed")
    sections = {}
    if latent:
        recs = [f32_record(n, t.data) for n, t in model.params.items()]
        sections[LATENT] = recs + _site_records(model.sites)
    if deployed:
        dep = model.deployed()
        recs = [f32_record(n, a) for n, a in dep.fp.items()]
        for n, (store, scale) in dep.packed.items():
            scale = np.asarray(scale, dtype=np.float32).reshape(-1)
            if isinstance(store, binkernel.PackedBits):
                recs.append(packed_record(n, store, scale))
            else:
                recs.append(f32_record(n, store, scale))
        sections[DEPLOYED] = recs + _site_records(dep.sites)
    write_file(path, _meta(model, extra), sections)


def _sites_from(meta, recs, learnable):
    sites = {}
    for n, info in meta["sites"].items():
        s = ElasticParams(kind=BinarizerKind(info["kind"]), bits=int(info["bits"]), name=n,
                          learnable=learnable)
        try:
            a = float(recs[f"site.{n}.alpha"].array())
            b = float(recs[f"site.{n}.beta"].array())
        except KeyError as exc:
            raise FormatError(f"missing site record {exc}") from None
        s.set(a, b)
        s.initialized = bool(info.get("initialized", True))
        sites[n] = s
    return sites


def load(path) -> Encoder:
    """Latent (trainable) model from a checkpoint's latent section."""
    meta, sections = read_file(path)
    if LATENT not in sections:
        raise FormatError(f"{path}: no latent section (deploy-only checkpoint)")
    cfg = ModelConfig.from_dict(meta["config"])
    enc = Encoder(cfg, seed=0)
    recs = sections[LATENT]
    for n, t in enc.params.items():
        if n not in recs:
            raise FormatError(f"{path}: missing tensor {n!r}")
        arr = recs[n].array()
        if arr.shape != t.shape:
            raise FormatError(f"{path}: tensor {n!r} has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    enc.sites = _sites_from(meta, recs, cfg.elastic)
    return enc


def load_deployed(path) -> DeployedModel:
    meta, sections = read_file(path)
    if DEPLOYED not in sections:
        raise FormatError(f"{path}: no deployed section")
    cfg = ModelConfig.from_dict(meta["config"])
    recs = sections[DEPLOYED]
    fp, packed = {}, {}
    for n, r in recs.items():
        if n.startswith("site."):
            continue
        if r.dtype != F32:
            scales = r.scales if n.startswith("emb.") else np.float32(r.scales[0])
            if n.startswith("emb."):
                scales = scales.reshape(-1, 1).astype(np.float32)
            packed[n] = (r.array(), scales)
        elif r.scales.size:
            scales = r.scales.reshape(-1, 1) if n.startswith("emb.") else np.float32(r.scales[0])
            packed[n] = (r.array(), scales)
        else:
            fp[n] = r.array()
    return DeployedModel(cfg, fp, packed, _sites_from(meta, recs, False))


def read_meta(path) -> dict:
    return read_file(path)[0]
