"""Synthetic paired audio-view / text-feature / caption data.

A latent sequence ``Z (T, latent_dim)`` drives everything:

* symbol_t = argmax(Z_t @ codebook); caption = BOS + symbol tokens + EOS
* view_k   = tanh(Z @ P_k + b_k) + sigma * noise, for three fixed projections
* text     = Z @ Q, a linear lift to ``(T, D)``

File layout (all little-endian)::

    magic  b"TWCAPDS\\0"   8 bytes
    version  uint32        4 bytes
    manifest length uint32 4 bytes
    manifest  UTF-8 JSON (sorted keys)
    records   float32, one per sample, fields in manifest["fields"] order
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from twincap.captioner import CaptionBatch

MAGIC = b"TWCAPDS\0"
VERSION = 1
_HEADER = struct.Struct("<8sII")


class DatasetFormatError(ValueError):
    pass


@dataclass
class LatentSpec:
    latent_dim: int = 16
    T: int = 8
    D: int = 64
    num_symbols: int = 8
    seed: int = 7
    sigma: float = 0.05
    vocab_size: int = 64
    identical_views: bool = False

    def validate(self):
        if self.num_symbols < 2:
            raise ValueError("num_symbols must be >= 2")
        if self.num_symbols > self.vocab_size - 3:
            raise ValueError("num_symbols must be <= vocab_size - 3")
        if min(self.latent_dim, self.T, self.D) < 1:
            raise ValueError("dimensions must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class Projections:
    codebook: np.ndarray  # (latent, num_symbols)
    view_proj: np.ndarray  # (3, latent, D)
    view_bias: np.ndarray  # (3, D)
    text_proj: np.ndarray  # (latent, D)


def make_projections(spec: LatentSpec) -> Projections:
    rng = np.random.default_rng([spec.seed, 0])
    L, D = spec.latent_dim, spec.D
    codebook = rng.standard_normal((L, spec.num_symbols))
    view_proj = rng.standard_normal((3, L, D)) / np.sqrt(L)
    view_bias = 0.1 * rng.standard_normal((3, D))
    if spec.identical_views:
        view_proj[1:] = view_proj[0]
        view_bias[1:] = view_bias[0]
    text_proj = rng.standard_normal((L, D)) / np.sqrt(L)
    return Projections(codebook, view_proj, view_bias, text_proj)


def symbols_from_latent(Z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    return np.argmax(Z @ codebook, axis=-1)


def caption_from_symbols(symbols, bos_id=1, eos_id=2) -> np.ndarray:
    return np.concatenate([[bos_id], np.asarray(symbols) + 3, [eos_id]]).astype(np.int64)


def _fields(spec: LatentSpec):
    S = spec.T + 2
    return [
        ("views", [3, spec.T, spec.D]),
        ("text_feat", [spec.T, spec.D]),
        ("latent", [spec.T, spec.latent_dim]),
        ("caption", [S]),
    ]


def generate_arrays(spec: LatentSpec, count: int) -> dict:
    spec.validate()
    if count < 1:
        raise ValueError("count must be >= 1")
    proj = make_projections(spec)
    rng = np.random.default_rng([spec.seed, 1])
    Z = rng.standard_normal((count, spec.T, spec.latent_dim))
    noise = rng.standard_normal((count, 3, spec.T, spec.D))
    views = np.tanh(np.einsum("ntl,kld->nktd", Z, proj.view_proj) + proj.view_bias[None, :, None, :])
    views = views + spec.sigma * noise
    text = Z @ proj.text_proj
    symbols = symbols_from_latent(Z, proj.codebook)
    captions = np.stack([caption_from_symbols(s) for s in symbols])
    return {
        "views": views.astype(np.float32),
        "text_feat": text.astype(np.float32),
        "latent": Z.astype(np.float32),
        "caption": captions,
        "projections": proj,
    }


def generate_dataset(spec: LatentSpec, count: int, path) -> Path:
    arrays = generate_arrays(spec, count)
    proj = arrays["projections"]
    manifest = {
        "count": count,
        "spec": asdict(spec),
        "fields": _fields(spec),
        "dtype": "<f4",
        "codebook": np.asarray(proj.codebook, dtype="<f4").tolist(),
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [
        arrays["views"].reshape(count, -1),
        arrays["text_feat"].reshape(count, -1),
        arrays["latent"].reshape(count, -1),
        arrays["caption"].astype(np.float32).reshape(count, -1),
    ]
    records = np.concatenate(parts, axis=1).astype("<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(records.tobytes())
    return path


@dataclass
class Dataset:
    spec: LatentSpec
    manifest: dict
    views: np.ndarray  # (n, 3, T, D)
    text_feat: np.ndarray  # (n, T, D)
    latent: np.ndarray  # (n, T, latent)
    captions: np.ndarray  # (n, S) int

    def __len__(self):
        return self.views.shape[0]

    @property
    def codebook(self) -> np.ndarray:
        return np.asarray(self.manifest["codebook"], dtype=np.float32)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.spec, self.manifest, self.views[idx], self.text_feat[idx],
            self.latent[idx], self.captions[idx],
        )


def read_header(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DatasetFormatError("truncated header")
        magic, version, mlen = _HEADER.unpack(head)
        if magic != MAGIC:
            raise DatasetFormatError("bad magic")
        if version != VERSION:
            raise DatasetFormatError(f"unsupported version {version}")
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
    return manifest, _HEADER.size + mlen


def load_dataset(path) -> Dataset:
    manifest, offset = read_header(path)
    fields = manifest["fields"]
    widths = [int(np.prod(shape)) for _, shape in fields]
    rec = sum(widths)
    raw = np.fromfile(path, dtype="<f4", offset=offset)
    count = manifest["count"]
    if raw.size != rec * count:
        bad = raw.size // rec
        raise DatasetFormatError(f"malformed record {bad}: expected {count} records of {rec} floats")
    raw = raw.reshape(count, rec)
    out, start = {}, 0
    for (name, shape), w in zip(fields, widths):
        out[name] = raw[:, start:start + w].reshape([count] + list(shape))
        start += w
    caps = out["caption"]
    if not np.all(caps == np.round(caps)):
        bad = int(np.argmax(np.any(caps != np.round(caps), axis=1)))
        raise DatasetFormatError(f"malformed record {bad}: non-integer caption token")
    spec = LatentSpec(**manifest["spec"])
    return Dataset(
        spec, manifest, np.ascontiguousarray(out["views"]), np.ascontiguousarray(out["text_feat"]),
        np.ascontiguousarray(out["latent"]), caps.astype(np.int64),
    )


def read_record(path, index: int) -> dict:
    """Read one sample straight from the file (used as an independent check on batching)."""
    manifest, offset = read_header(path)
    fields = manifest["fields"]
    widths = [int(np.prod(shape)) for _, shape in fields]
    rec = sum(widths)
    raw = np.fromfile(path, dtype="<f4", count=rec, offset=offset + 4 * rec * index)
    out, start = {}, 0
    for (name, shape), w in zip(fields, widths):
        out[name] = raw[start:start + w].reshape(shape)
        start += w
    return out


@dataclass
class Batch:
    views: tuple  # 3 x (B, T, D) float arrays
    text_feat: np.ndarray
    captions: CaptionBatch
    indices: np.ndarray


def make_batch(ds: Dataset, idx) -> Batch:
    idx = np.asarray(idx)
    v = ds.views[idx]
    caps = ds.captions[idx]
    return Batch(
        (v[:, 0], v[:, 1], v[:, 2]),
        ds.text_feat[idx],
        CaptionBatch(caps, np.ones(caps.shape, dtype=bool)),
        idx,
    )


def load_batch(ds: Dataset, batch_size: int, shuffle_seed=None, epoch: int = 0, drop_last=False):
    """Yield batches in a permutation fixed by ``(shuffle_seed, epoch)``; no shuffle if seed is None."""
    n = len(ds)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        order = np.random.default_rng([int(shuffle_seed), int(epoch)]).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield make_batch(ds, idx)


def spec_augment(view: np.ndarray, num_t_masks: int, num_f_masks: int, max_width_t: int,
                 max_width_f: int | None, rng: np.random.Generator) -> np.ndarray:
    """Zero random time bands and feature bands of ``view (B, T, D)`` per sample.

    Widths are uniform on ``0..max_width``; band starts uniform on the valid
    range.  Returns a new array.
    """
    if max_width_f is None:
        max_width_f = max_width_t
    out = np.array(view, copy=True)
    B, T, D = out.shape
    if max_width_t > T or max_width_f > D:
        raise ValueError("mask width exceeds axis length")
    for b in range(B):
        for _ in range(num_t_masks):
            w = int(rng.integers(0, max_width_t + 1))
            s = int(rng.integers(0, T - w + 1))
            out[b, s:s + w, :] = 0
        for _ in range(num_f_masks):
            w = int(rng.integers(0, max_width_f + 1))
            s = int(rng.integers(0, D - w + 1))
            out[b, :, s:s + w] = 0
    return out
