"""The two networks: a BLSTM masking enhancer and a TDNN speaker embedder.

The enhancer stacks bidirectional LSTM layers and one sigmoid-activated
linear layer producing a [0, 1] mask the same shape as its input.  The
embedder is an x-vector-style stack: five dilated time-delay layers,
global average pooling over time, then fully connected layers; the first
fully connected output is the speaker embedding.  The five TDNN outputs
plus the post-activation first FC output form the six perceptual tap
points.

LSTM layers run as one fused graph node per direction: the forward pass
loops over time in plain numpy and the backward pass is hand-derived
backpropagation through time, which keeps graphs small enough to train on
a laptop while every gradient stays finite-difference checkable.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .dsp import EPS_GUARD, MEL_BINS, ChannelStats, Mask, Spectrogram
from .tensor import Tensor


# -- initialization -----------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape if shape is not None else (fan_in, fan_out))


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # fix the sign ambiguity so the draw is canonical
    return q[:rows, :cols] if q.shape[0] >= rows else q.T[:rows, :cols]


# -- fused LSTM ----------------------------------------------------------------------


def lstm_sequence(x: Tensor, wx: Tensor, wh: Tensor, b: Tensor, reverse: bool = False) -> Tensor:
    """Run one LSTM direction over a (T, F) sequence; returns (T, H).

    Gate layout along the 4H axis is input, forget, cell, output.  The
    backward rule is classic BPTT and produces gradients for the input
    sequence and all three parameters.
    """
    hidden = wh.shape[0]
    seq = np.ascontiguousarray(x.data[::-1]) if reverse else x.data
    steps = seq.shape[0]
    z_in = seq @ wx.data + b.data  # input contribution for every step at once

    gates_i = np.empty((steps, hidden))
    gates_f = np.empty((steps, hidden))
    gates_g = np.empty((steps, hidden))
    gates_o = np.empty((steps, hidden))
    cells = np.empty((steps, hidden))
    cells_tanh = np.empty((steps, hidden))
    hidden_prev = np.empty((steps, hidden))

    wh_data = wh.data
    h = np.zeros(hidden)
    c = np.zeros(hidden)
    for t in range(steps):
        hidden_prev[t] = h
        z = z_in[t] + h @ wh_data
        i = _sigmoid(z[:hidden])
        f = _sigmoid(z[hidden:2 * hidden])
        g = np.tanh(z[2 * hidden:3 * hidden])
        o = _sigmoid(z[3 * hidden:])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        gates_i[t], gates_f[t], gates_g[t], gates_o[t] = i, f, g, o
        cells[t], cells_tanh[t] = c, tc
    out = np.vstack([hidden_prev[1:], h[None, :]]) if steps > 1 else h[None, :].copy()

    def vjp(grad_out):
        g_seq = grad_out[::-1] if reverse else grad_out
        dz = np.empty((steps, 4 * hidden))
        dh = np.zeros(hidden)
        dc = np.zeros(hidden)
        wh_t = wh_data.T
        for t in range(steps - 1, -1, -1):
            dh_total = g_seq[t] + dh
            tc = cells_tanh[t]
            i, f, g, o = gates_i[t], gates_f[t], gates_g[t], gates_o[t]
            do = dh_total * tc
            dc_total = dh_total * o * (1.0 - tc * tc) + dc
            c_prev = cells[t - 1] if t > 0 else 0.0
            dz_t = dz[t]
            dz_t[:hidden] = dc_total * g * i * (1.0 - i)
            dz_t[hidden:2 * hidden] = dc_total * c_prev * f * (1.0 - f)
            dz_t[2 * hidden:3 * hidden] = dc_total * i * (1.0 - g * g)
            dz_t[3 * hidden:] = do * o * (1.0 - o)
            dh = dz_t @ wh_t
            dc = dc_total * f
        d_x = dz @ wx.data.T
        if reverse:
            d_x = d_x[::-1]
        d_wx = seq.T @ dz
        d_wh = hidden_prev.T @ dz
        d_b = dz.sum(axis=0)
        return np.ascontiguousarray(d_x), d_wx, d_wh, d_b

    result = out[::-1] if reverse else out
    return Tensor._from_op(np.ascontiguousarray(result), (x, wx, wh, b), vjp)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# -- enhancer --------------------------------------------------------------------------


class Enhancer:
    """Stacked BLSTM + linear + sigmoid producing a time-frequency mask."""

    def __init__(self, feat_dim: int = MEL_BINS, hidden: int = 128, layers: int = 3,
                 seed: int = 0):
        self.feat_dim = feat_dim
        self.hidden = hidden
        self.num_layers = layers
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.params: dict[str, Tensor] = {}
        in_dim = feat_dim
        for layer in range(layers):
            for direction in ("fwd", "bwd"):
                prefix = f"enhancer/blstm{layer}/{direction}"
                wx = xavier_uniform(rng, in_dim, 4 * hidden)
                wh = np.concatenate(
                    [orthogonal(rng, hidden, hidden) for _ in range(4)], axis=1)
                b = np.zeros(4 * hidden)
                b[hidden:2 * hidden] = 1.0  # forget-gate bias
                self._add(f"{prefix}/wx", wx)
                self._add(f"{prefix}/wh", wh)
                self._add(f"{prefix}/b", b)
            in_dim = 2 * hidden
        self._add("enhancer/out/w", xavier_uniform(rng, in_dim, feat_dim))
        # Positive bias opens the initial mask (sigmoid(2) ~ 0.88) so the
        # untrained enhancer starts near transparent instead of halving
        # every bin, which would wreck the frozen embedder's input.
        self._add("enhancer/out/b", np.full((1, feat_dim), 2.0))

    def _add(self, path: str, value: np.ndarray):
        self.params[path] = Tensor(value, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Mask and masked spectrogram for a channel-normalized input."""
        if x.shape[1] != self.feat_dim:
            raise ValueError(f"enhancer expects {self.feat_dim} features, got {x.shape[1]}")
        h = x
        for layer in range(self.num_layers):
            parts = []
            for direction, rev in (("fwd", False), ("bwd", True)):
                prefix = f"enhancer/blstm{layer}/{direction}"
                parts.append(lstm_sequence(
                    h, self.params[f"{prefix}/wx"], self.params[f"{prefix}/wh"],
                    self.params[f"{prefix}/b"], reverse=rev))
            h = T.concat(parts, axis=1)
        logits = T.matmul(h, self.params["enhancer/out/w"])
        logits = logits + T.repeat_rows(self.params["enhancer/out/b"], logits.shape[0])
        mask = T.sigmoid(logits)
        return mask, x * mask

    def enhance(self, x_norm: Spectrogram) -> tuple[Mask, Spectrogram]:
        """Inference wrapper over numpy spectrograms (no graph)."""
        with T.no_grad():
            mask, enhanced = self.forward(Tensor(x_norm.frames))
        return Mask(mask.data), Spectrogram(enhanced.data, x_norm.hop, x_norm.win)


# -- embedder ---------------------------------------------------------------------------


@dataclass
class TapSet:
    """Ordered activations feeding the perceptual distance (always six)."""

    activations: list

    def __post_init__(self):
        if len(self.activations) != 6:
            raise ValueError(f"a tap set has exactly 6 entries, got {len(self.activations)}")

    def __iter__(self):
        return iter(self.activations)

    def __len__(self):
        return len(self.activations)


DEFAULT_CONTEXTS = [[-2, -1, 0, 1, 2], [-2, 0, 2], [-3, 0, 3], [0], [0]]


class Embedder:
    """x-vector style TDNN with global average pooling and FC head."""

    def __init__(self, feat_dim: int = MEL_BINS, channels: int = 64,
                 contexts: Optional[list[list[int]]] = None, embed_dim: int = 128,
                 fc2_dim: int = 128, n_speakers: int = 20, seed: int = 0):
        self.feat_dim = feat_dim
        self.channels = channels
        self.contexts = [list(c) for c in (contexts or DEFAULT_CONTEXTS)]
        if len(self.contexts) != 5:
            raise ValueError(f"the embedder has 5 TDNN layers, got {len(self.contexts)} contexts")
        self.embed_dim = embed_dim
        self.fc2_dim = fc2_dim
        self.n_speakers = n_speakers
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
        self.params: dict[str, Tensor] = {}
        in_dim = feat_dim
        for layer, offsets in enumerate(self.contexts):
            stacked = in_dim * len(offsets)
            self._add(f"embedder/tdnn{layer}/w", xavier_uniform(rng, stacked, channels))
            self._add(f"embedder/tdnn{layer}/b", np.zeros((1, channels)))
            in_dim = channels
        self._add("embedder/fc1/w", xavier_uniform(rng, channels, embed_dim))
        self._add("embedder/fc1/b", np.zeros((1, embed_dim)))
        self._add("embedder/fc2/w", xavier_uniform(rng, embed_dim, fc2_dim))
        self._add("embedder/fc2/b", np.zeros((1, fc2_dim)))
        self._add("embedder/cls/w", xavier_uniform(rng, fc2_dim, n_speakers))
        self._add("embedder/cls/b", np.zeros((1, n_speakers)))

    def _add(self, path: str, value: np.ndarray):
        self.params[path] = Tensor(value, requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def min_frames(self) -> int:
        return 1 + sum(max(c) - min(c) for c in self.contexts)

    def forward(self, s: Tensor) -> tuple[Tensor, Tensor, TapSet]:
        """Embedding, speaker logits and the six tap activations."""
        if s.shape[1] != self.feat_dim:
            raise ValueError(f"embedder expects {self.feat_dim} features, got {s.shape[1]}")
        if s.shape[0] < self.min_frames:
            raise ValueError(
                f"embedder needs at least {self.min_frames} frames "
                f"(receptive field), got {s.shape[0]}")
        taps = []
        h = s
        for layer, offsets in enumerate(self.contexts):
            t_out = h.shape[0] - (max(offsets) - min(offsets))
            if len(offsets) == 1:
                stacked = h
            else:
                lo = min(offsets)
                stacked = T.concat(
                    [T.narrow(h, 0, off - lo, t_out) for off in offsets], axis=1)
            pre = T.matmul(stacked, self.params[f"embedder/tdnn{layer}/w"])
            pre = pre + T.repeat_rows(self.params[f"embedder/tdnn{layer}/b"], t_out)
            h = T.relu(pre)
            taps.append(h)
        pooled = T.mean_(h, axis=0, keepdims=True)
        embedding = T.matmul(pooled, self.params["embedder/fc1/w"]) + self.params["embedder/fc1/b"]
        fc1_act = T.relu(embedding)
        taps.append(fc1_act)
        h2 = T.relu(T.matmul(fc1_act, self.params["embedder/fc2/w"]) + self.params["embedder/fc2/b"])
        logits = T.matmul(h2, self.params["embedder/cls/w"]) + self.params["embedder/cls/b"]
        return embedding, logits, TapSet(taps)

    def embed(self, s: Spectrogram) -> tuple[np.ndarray, np.ndarray, TapSet]:
        """Inference wrapper: numpy in, numpy out (instance-normalized input)."""
        with T.no_grad():
            embedding, logits, taps = self.forward(Tensor(s.frames))
        return (embedding.data[0].copy(), logits.data[0].copy(),
                TapSet([t.data for t in taps]))


# -- tensor-domain normalizations (the differentiable halves of the pipeline) -----------


def _denominator_row(sigma: np.ndarray, exponent: int) -> np.ndarray:
    return ((sigma + EPS_GUARD) ** exponent).reshape(1, -1)


def channel_normalize_graph(x: Tensor, stats: ChannelStats, exponent: int = 1) -> Tensor:
    mu = Tensor(np.broadcast_to(stats.mu.reshape(1, -1), x.shape).copy())
    denom = Tensor(np.broadcast_to(_denominator_row(stats.sigma, exponent), x.shape).copy())
    return (x - mu) / denom


def channel_inverse_graph(x: Tensor, stats: ChannelStats, exponent: int = 1) -> Tensor:
    mu = Tensor(np.broadcast_to(stats.mu.reshape(1, -1), x.shape).copy())
    denom = Tensor(np.broadcast_to(_denominator_row(stats.sigma, exponent), x.shape).copy())
    return x * denom + mu


def instance_normalize_graph(x: Tensor, exponent: int = 1) -> Tensor:
    """Differentiable per-utterance per-bin standardization.

    Mirrors dsp.instance_normalize, including the second centering pass
    that keeps near-constant bins' output means at roundoff level.
    """
    rows = x.shape[0]
    if rows < 2:
        raise ValueError(f"instance normalization needs at least 2 frames, got {rows}")
    once = x - T.repeat_rows(T.mean_(x, axis=0, keepdims=True), rows)
    centered = once - T.repeat_rows(T.mean_(once, axis=0, keepdims=True), rows)
    sigma = T.sqrt(T.mean_(T.square(centered), axis=0, keepdims=True))
    denom = sigma + EPS_GUARD
    if exponent == 2:
        denom = T.square(denom)
    elif exponent != 1:
        raise ValueError(f"deviation exponent must be 1 or 2, got {exponent}")
    return centered / T.repeat_rows(denom, rows)


# -- checkpoints ---------------------------------------------------------------------------


CHECKPOINT_MAGIC = b"NVLCKPT1"
STAGES = ("pretrain1", "pretrain2", "finetune")


class IntegrityError(RuntimeError):
    """Checkpoint bytes fail their checksum or structural checks."""


@dataclass
class Checkpoint:
    stage: str
    config_hash: str
    step: int
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")


def save_checkpoint(path, ckpt: Checkpoint):
    """Length-prefixed (path, shape, float64 blob) entries behind a CRC32."""
    chunks = [CHECKPOINT_MAGIC]
    for text in (ckpt.config_hash, ckpt.stage):
        raw = text.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
    chunks.append(struct.pack("<Q", ckpt.step))
    chunks.append(struct.pack("<I", len(ckpt.arrays)))
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name], dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:8] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint container")
    body, crc_raw = blob[:-4], blob[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_raw)[0]:
        raise IntegrityError(f"{path}: checksum mismatch (file damaged or truncated)")
    view = memoryview(body)
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(body):
            raise IntegrityError(f"{path}: truncated container")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<I", take(4))
        return bytes(take(n)).decode("utf-8")

    config_hash = take_str()
    stage = take_str()
    (step,) = struct.unpack("<Q", take(8))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        name = take_str()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        arrays[name] = np.array(data)
    if pos != len(body):
        raise IntegrityError(f"{path}: trailing bytes after last entry")
    return Checkpoint(stage, config_hash, step, arrays)


def params_checksum(params: dict[str, Tensor]) -> str:
    digest = zlib.crc32(b"")
    for name in sorted(params):
        digest = zlib.crc32(name.encode(), digest)
        digest = zlib.crc32(params[name].data.astype("<f8").tobytes(), digest)
    return f"{digest:08x}"


def load_params_into(model, arrays: dict[str, np.ndarray], prefix: str):
    """Copy checkpoint arrays into a model's parameter tensors, by path."""
    for name, param in model.parameters().items():
        key = name if name.startswith(prefix) else f"{prefix}{name}"
        if key not in arrays:
            raise KeyError(f"checkpoint is missing parameter {key!r}")
        value = arrays[key]
        if value.shape != param.data.shape:
            raise ValueError(
                f"checkpoint parameter {key!r} has shape {value.shape}, "
                f"model expects {param.data.shape}")
        param.data = np.ascontiguousarray(value)
