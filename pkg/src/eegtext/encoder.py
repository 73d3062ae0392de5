"""CNN + LSTM feature extractor for (N, 5, T, 1) EEG epochs.

Stage shapes for the default configuration (T = 384)::

    (N, 5, 384, 1)   input
    (N, 5, 384, 56)  three conv blocks (8 + 16 + 32 filters), concatenated
    (N, 5, 384, 112) depthwise conv, multiplier 2
    (N, 384, 112)    electrodes merged (mean), one feature vector per step
    (N, 384, 64)     two stacked LSTM layers, full hidden-state sequence
    (N, 96, 64)      average pooling, window 4 / stride 4 over time
    (N, 96, 112)     separable conv (depthwise k=16, pointwise 64 -> 112)
    (N, 112)         global average over time -> embedding

``spatial_merge="flatten"`` feeds the LSTM with all 5 x 112 values per step
and ``final_pool="none"`` flattens the separable output instead of averaging
it; both variants are kept for ablations.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import fft as sp_fft

from .classifier import elu
from .tensor import Tensor, concat

N_CHANNELS = 5


@dataclass
class EncoderConfig:
    block_filters: list[int] = field(default_factory=lambda: [8, 16, 32])
    kernel_time: int = 64
    depth_multiplier: int = 2
    lstm_units: int = 64
    lstm_layers: int = 2
    dropout_p: float = 0.5
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    sep_kernel: int = 16
    sep_filters: int = 112
    spatial_merge: str = "mean"
    final_pool: str = "global"
    n_channels: int = N_CHANNELS

    def __post_init__(self):
        self.block_filters = [int(f) for f in self.block_filters]
        if self.kernel_time < 1 or self.sep_kernel < 1:
            raise ValueError("kernel sizes must be >= 1")
        if self.depth_multiplier < 1:
            raise ValueError("depth_multiplier must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        if self.lstm_layers < 1 or self.lstm_units < 1:
            raise ValueError("need at least one LSTM layer with one unit")
        if self.spatial_merge not in ("mean", "flatten"):
            raise ValueError(f"unknown spatial_merge {self.spatial_merge!r}")
        if self.final_pool not in ("global", "none"):
            raise ValueError(f"unknown final_pool {self.final_pool!r}")

    @property
    def concat_channels(self) -> int:
        return sum(self.block_filters)

    @property
    def depth_channels(self) -> int:
        return self.concat_channels * self.depth_multiplier

    @property
    def lstm_input(self) -> int:
        if self.spatial_merge == "flatten":
            return self.n_channels * self.depth_channels
        return self.depth_channels

    def embedding_dim(self, timesteps: int = 384) -> int:
        if self.final_pool == "global":
            return self.sep_filters
        return (timesteps // 4) * self.sep_filters

    def stage_shapes(self, n: int, timesteps: int = 384) -> dict[str, tuple[int, ...]]:
        """Output shape of every stage, from the configuration alone."""
        c, t = self.n_channels, timesteps
        shapes = {
            "input": (n, c, t, 1),
            "concat": (n, c, t, self.concat_channels),
            "depthwise": (n, c, t, self.depth_channels),
            "sequence": (n, t, self.lstm_input),
            "lstm": (n, t, self.lstm_units),
            "pooled": (n, t // 4, self.lstm_units),
            "separable": (n, t // 4, self.sep_filters),
            "embedding": (n, self.embedding_dim(t)),
        }
        for i, f in enumerate(self.block_filters):
            shapes[f"block{i + 1}"] = (n, c, t, f)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def desk(cls, **overrides) -> "EncoderConfig":
        """A narrow variant of the architecture that trains in seconds on a CPU."""
        base = dict(block_filters=[4, 4, 8], kernel_time=32, lstm_units=16,
                    sep_filters=16)
        base.update(overrides)
        return cls(**base)


# ----------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------

def _same_pad(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def time_conv(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel cross-correlation along time with "same" padding.

    ``x`` is (B, T, C) and ``w`` is (K, C, D); the result is (B, T, C, D) with
    ``out[b, t, c, d] = sum_k xpad[b, t + k, c] * w[k, c, d]`` where ``xpad``
    carries ``(K - 1) // 2`` zeros in front and the rest behind.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[2] != wd.shape[1]:
        raise ValueError(f"time_conv shape mismatch: x{xd.shape} w{wd.shape}")
    b, t, c = xd.shape
    k, _, d = wd.shape
    left, _ = _same_pad(k)
    # no circular wrap-around for any of the three products once L >= T + K - 1
    n_fft = sp_fft.next_fast_len(t + k - 1, real=True)
    xf = sp_fft.rfft(xd, n_fft, axis=1)                     # (B, F, C)
    # shift so that frequency-domain products index the zero-padded input
    shift = np.exp(-2j * np.pi * np.fft.rfftfreq(n_fft) * left).astype(xf.dtype)
    xf = xf * shift[None, :, None]
    wf = sp_fft.rfft(wd, n_fft, axis=0)                     # (F, C, D)
    out = sp_fft.irfft(xf[..., None] * wf.conj()[None], n_fft, axis=1)[:, :t]

    def bw(g):
        gf = sp_fft.rfft(g, n_fft, axis=1)                  # (B, F, C, D)
        gx = gw = None
        if x.requires_grad:
            full = sp_fft.irfft((gf * wf[None]).sum(axis=-1), n_fft, axis=1)
            gx = full[:, left:left + t]
        if w.requires_grad:
            gw = sp_fft.irfft((xf[..., None] * gf.conj()).sum(axis=0), n_fft, axis=0)[:k]
        return gx, gw

    return Tensor.from_op(out.astype(xd.dtype, copy=False), (x, w), bw, "time_conv")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, mode: str, eps: float = 1e-3,
               momentum: float = 0.99):
    """Normalise the last axis of ``x``.

    Returns ``(out, (new_mean, new_var))``. In ``infer`` mode the running
    statistics are used and returned unchanged.
    """
    axes = tuple(range(x.ndim - 1))
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        xhat = xc / (var + eps) ** 0.5
        bm = mu.data.reshape(-1)
        bv = var.data.reshape(-1)
        new_mean = momentum * running_mean + (1.0 - momentum) * bm
        new_var = momentum * running_var + (1.0 - momentum) * bv
        stats = (new_mean.astype(running_mean.dtype), new_var.astype(running_var.dtype))
    elif mode == "infer":
        scale = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean.astype(x.dtype)) * scale.astype(x.dtype)
        stats = (running_mean, running_var)
    else:
        raise ValueError(f"mode must be 'train' or 'infer', not {mode!r}")
    return xhat * gamma + beta, stats


def conv_block(x: Tensor, w: Tensor, b: Tensor, gamma: Tensor, beta: Tensor,
               running_mean, running_var, mode: str, cfg: EncoderConfig):
    """ELU(BN(conv_time(x) + b)) for one parallel block; x is (N, C, T, 1)."""
    n, c, t, one = x.shape
    if one != 1:
        raise ValueError(f"conv_block expects one input feature, got {x.shape}")
    f = w.shape[-1]
    z = time_conv(x.reshape(n * c, t, 1), w).reshape(n, c, t, f) + b
    z, stats = batch_norm(z, gamma, beta, running_mean, running_var, mode,
                          cfg.bn_epsilon, cfg.bn_momentum)
    return elu(z), stats


def concat_blocks(*blocks: Tensor) -> Tensor:
    return concat(blocks, axis=-1)


def depthwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """(N, C, T, M) -> (N, C, T, M*D); output channel m*D + j uses w[:, m, j]."""
    n, c, t, m = x.shape
    if w.shape[1] != m:
        raise ValueError(f"depthwise kernel for {w.shape[1]} channels, input has {m}")
    d = w.shape[2]
    return time_conv(x.reshape(n * c, t, m), w).reshape(n, c, t, m * d)


def lstm_step(x_t, h_prev, c_prev, p: dict):
    """One LSTM cell update built from tape primitives.

    ``p`` holds ``W_f W_i W_C W_o`` of shape (units + inputs, units), acting
    on ``[h_prev, x_t]``, and biases ``b_f b_i b_C b_o``.
    """
    z = concat([h_prev, x_t], axis=-1)
    f = (z @ p["W_f"] + p["b_f"]).sigmoid()
    i = (z @ p["W_i"] + p["b_i"]).sigmoid()
    c_tilde = (z @ p["W_C"] + p["b_C"]).tanh()
    o = (z @ p["W_o"] + p["b_o"]).sigmoid()
    c = f * c_prev + i * c_tilde
    h = o * c.tanh()
    return h, c


GATES = ("f", "i", "C", "o")


# sigmoid gates first so one contiguous slice covers them
_FUSED = ("f", "i", "o", "C")


def lstm_layer(x: Tensor, p: dict) -> Tensor:
    """Run one LSTM layer over (N, T, I) from zero state; returns all h (N, T, U).

    Same arithmetic as chaining :func:`lstm_step`, fused into one tape node
    with an explicit backward-through-time pass.
    """
    xd = x.data
    n, t, ni = xd.shape
    ws = [p[f"W_{g}"] for g in _FUSED]
    bs = [p[f"b_{g}"] for g in _FUSED]
    u = ws[0].shape[1]
    if ws[0].shape[0] != u + ni:
        raise ValueError(f"LSTM weights expect {ws[0].shape[0] - u} inputs, got {ni}")
    W = np.concatenate([w.data for w in ws], axis=1)      # (U+I, 4U)
    bias = np.concatenate([b.data for b in bs])           # (4U,)
    Wh, Wx = W[:u], W[u:]
    dtype = xd.dtype
    xt = np.ascontiguousarray(xd.transpose(1, 0, 2))      # time-major (T, N, I)
    xw = (xt.reshape(-1, ni) @ Wx).reshape(t, n, 4 * u) + bias

    hs = np.zeros((t + 1, n, u), dtype=dtype)
    cs = np.zeros((t + 1, n, u), dtype=dtype)
    acts = np.empty((t, n, 4 * u), dtype=dtype)
    tanh_c = np.empty((t, n, u), dtype=dtype)
    s3 = 3 * u
    for s in range(t):
        a = acts[s]
        np.matmul(hs[s], Wh, out=a)
        a += xw[s]
        sg = a[:, :s3]
        sg *= 0.5
        np.tanh(sg, out=sg)
        sg += 1.0
        sg *= 0.5
        np.tanh(a[:, s3:], out=a[:, s3:])
        c = cs[s + 1]
        np.multiply(a[:, :u], cs[s], out=c)
        c += a[:, u:2 * u] * a[:, s3:]
        np.tanh(c, out=tanh_c[s])
        np.multiply(a[:, 2 * u:s3], tanh_c[s], out=hs[s + 1])

    def bw(g):
        gt = g.transpose(1, 0, 2)
        da = np.empty((t, n, 4 * u), dtype=dtype)
        dh_next = np.zeros((n, u), dtype=dtype)
        dc_next = np.zeros((n, u), dtype=dtype)
        WhT = np.ascontiguousarray(Wh.T)
        for s in range(t - 1, -1, -1):
            a = acts[s]
            tc = tanh_c[s]
            dh = gt[s] + dh_next
            dc = dh * a[:, 2 * u:s3] * (1.0 - tc * tc) + dc_next
            d = da[s]
            np.multiply(dc, cs[s], out=d[:, :u])
            np.multiply(dc, a[:, s3:], out=d[:, u:2 * u])
            np.multiply(dh, tc, out=d[:, 2 * u:s3])
            np.multiply(dc, a[:, u:2 * u], out=d[:, s3:])
            dc_next = dc * a[:, :u]
            sg = a[:, :s3]
            d[:, :s3] *= sg * (1.0 - sg)
            ct = a[:, s3:]
            d[:, s3:] *= 1.0 - ct * ct
            dh_next = d @ WhT
        da_flat = da.reshape(-1, 4 * u)
        dWx = xt.reshape(-1, ni).T @ da_flat
        dWh = hs[:-1].reshape(-1, u).T @ da_flat
        dW = np.concatenate([dWh, dWx], axis=0)
        db = da_flat.sum(axis=0)
        dx = (da_flat @ Wx.T).reshape(t, n, ni).transpose(1, 0, 2)
        return (dx, *np.split(dW, 4, axis=1), *np.split(db, 4))

    out = np.ascontiguousarray(hs[1:].transpose(1, 0, 2))
    return Tensor.from_op(out, (x, *ws, *bs), bw, "lstm_layer")


def lstm_sequence(x: Tensor, layers: list[dict]) -> list[Tensor]:
    """Stacked LSTM: layer k+1 reads layer k's hidden sequence. Returns per-layer h."""
    if x.shape[1] < 1:
        raise ValueError("empty sequence")
    outs = []
    h = x
    for p in layers:
        h = lstm_layer(h, p)
        outs.append(h)
    return outs


def avg_pool4(x: Tensor, axis: int = 1) -> Tensor:
    """Non-overlapping mean over windows of 4 along ``axis``; a remainder is dropped."""
    xd = x.data
    ax = axis % xd.ndim
    t = xd.shape[ax]
    keep = (t // 4) * 4
    if keep == 0:
        raise ValueError("pooling axis shorter than the window")
    sl = [slice(None)] * xd.ndim
    sl[ax] = slice(0, keep)
    trimmed = xd[tuple(sl)]
    shape = list(trimmed.shape)
    shape[ax:ax + 1] = [keep // 4, 4]
    out = trimmed.reshape(shape).mean(axis=ax + 1)

    def bw(g):
        full = np.zeros_like(xd)
        full[tuple(sl)] = np.repeat(g, 4, axis=ax) * 0.25
        return (full,)

    return Tensor.from_op(out, (x,), bw, "avg_pool4")


def dropout(x: Tensor, p: float, mode: str, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: in train mode survivors are scaled by 1 / (1 - p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if mode == "infer" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return x * mask


def separable_conv(x: Tensor, w_depth: Tensor, w_point: Tensor) -> Tensor:
    """Depthwise time conv (multiplier 1) then 1x1 channel mixing; x is (N, T, C)."""
    n, t, c = x.shape
    y = time_conv(x, w_depth).reshape(n, t, c)
    return y @ w_point


# ----------------------------------------------------------------------
# parameters and forward pass
# ----------------------------------------------------------------------

def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator,
                        dtype=np.float32) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    k = cfg.kernel_time
    for i, f in enumerate(cfg.block_filters, start=1):
        p[f"block{i}.W"] = _glorot(rng, (k, 1, f), k, k * f, dtype)
        p[f"block{i}.b"] = np.zeros(f, dtype)
        p[f"block{i}.gamma"] = np.ones(f, dtype)
        p[f"block{i}.beta"] = np.zeros(f, dtype)
        p[f"block{i}.mean"] = np.zeros(f, dtype)
        p[f"block{i}.var"] = np.ones(f, dtype)
    m, d = cfg.concat_channels, cfg.depth_multiplier
    p["depthwise.W"] = _glorot(rng, (k, m, d), k, k * d, dtype)
    u = cfg.lstm_units
    n_in = cfg.lstm_input
    for layer in range(1, cfg.lstm_layers + 1):
        scale = 1.0 / np.sqrt(u)
        for g in GATES:
            p[f"lstm{layer}.W_{g}"] = rng.uniform(-scale, scale, (u + n_in, u)).astype(dtype)
            p[f"lstm{layer}.b_{g}"] = np.full(u, 1.0 if g == "f" else 0.0, dtype)
        n_in = u
    ks = cfg.sep_kernel
    p["sep.depthwise"] = _glorot(rng, (ks, u, 1), ks, ks, dtype)
    p["sep.pointwise"] = _glorot(rng, (u, cfg.sep_filters), u, cfg.sep_filters, dtype)
    return p


def encoder_forward(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig,
                    mode: str = "infer", rng: np.random.Generator | None = None):
    """Map (N, C, T, 1) epochs to (N, E) embeddings.

    ``params`` maps names to tensors (running BN statistics may be plain
    arrays). Returns ``(embedding, bn_updates)`` where ``bn_updates`` holds the
    new running statistics computed in train mode.
    """
    expected = cfg.stage_shapes(x.shape[0], x.shape[2])
    if x.shape != expected["input"]:
        raise ValueError(f"encoder input {x.shape}, expected {expected['input']}")

    updates: dict[str, np.ndarray] = {}
    blocks = []
    for i in range(1, len(cfg.block_filters) + 1):
        rm, rv = params[f"block{i}.mean"], params[f"block{i}.var"]
        rm = rm.data if isinstance(rm, Tensor) else rm
        rv = rv.data if isinstance(rv, Tensor) else rv
        out, (nm, nv) = conv_block(x, params[f"block{i}.W"], params[f"block{i}.b"],
                                   params[f"block{i}.gamma"], params[f"block{i}.beta"],
                                   rm, rv, mode, cfg)
        if mode == "train":
            updates[f"block{i}.mean"], updates[f"block{i}.var"] = nm, nv
        blocks.append(out)
    h = concat_blocks(*blocks)
    assert h.shape == expected["concat"]
    h = depthwise_conv(h, params["depthwise.W"])
    assert h.shape == expected["depthwise"]

    n, c, t, ch = h.shape
    if cfg.spatial_merge == "mean":
        seq = h.mean(axis=1)
    else:
        seq = h.transpose(0, 2, 1, 3).reshape(n, t, c * ch)
    assert seq.shape == expected["sequence"]

    layers = []
    for layer in range(1, cfg.lstm_layers + 1):
        layers.append({f"{kind}_{g}": params[f"lstm{layer}.{kind}_{g}"]
                       for kind in ("W", "b") for g in GATES})
    hseq = lstm_sequence(seq, layers)[-1]
    pooled = avg_pool4(hseq, axis=1)
    assert pooled.shape == expected["pooled"]
    pooled = dropout(pooled, cfg.dropout_p, mode, rng)
    feats = separable_conv(pooled, params["sep.depthwise"], params["sep.pointwise"])
    assert feats.shape == expected["separable"]
    if cfg.final_pool == "global":
        emb = feats.mean(axis=1)
    else:
        emb = feats.reshape(n, -1)
    assert emb.shape == expected["embedding"]
    return emb, updates
