"""Recurrent convolutional building blocks.

Sequences are carried as single tensors shaped ``(N, T, H, W, C)``; states
are ``(N, H, W, C)``.  Input-side convolutions do not depend on the
recurrence, so each layer applies them to the whole sequence in one call and
only the state-side convolutions run per step.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import ops
from .dropout import DropoutSampler
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Parameter, Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform with variance 1 / fan_in, so stacked maps keep activations O(1)."""
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def orthogonal_kernel(rng: np.random.Generator, filters: int, kh: int, kw: int) -> np.ndarray:
    """(F, Kh, Kw, F) kernel whose F flattened filters are orthonormal."""
    m = rng.standard_normal((kh * kw * filters, filters))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    return q.T.reshape(filters, kh, kw, filters)


def _mask(drop: Optional[DropoutSampler], kind: str, shape: tuple, dtype) -> Optional[np.ndarray]:
    return None if drop is None else drop.mask(kind, shape, dtype)


def _apply(x: Tensor, mask: Optional[np.ndarray]) -> Tensor:
    return x if mask is None else ops.mul(x, Tensor(mask))


class Module:
    """Minimal parameter container; children are discovered from attributes."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for value in vars(self).values():
            if isinstance(value, Parameter):
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.parameters())
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Parameter):
                        out.append(item)
                    elif isinstance(item, Module):
                        out.extend(item.parameters())
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        params = self.parameters()
        named = {p.name: p for p in params}
        if len(named) != len(params):
            raise ConfigError("parameter names are not unique")
        return named


class ConvGRUCell(Module):
    """One ConvGRU unit with tied weights.

    z = sigmoid(B*W_z + A*U_z + b_z)
    r = sigmoid(B*W_r + A*U_r + b_r)
    cand = tanh(B*W_a + (r . A)*U_a + b_a)
    A' = z . A + (1 - z) . cand
    """

    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), *,
                 rng: np.random.Generator, dtype=np.float32, name: str = "cell"):
        kh, kw = kernel
        self.in_channels = in_channels
        self.filters = filters
        self.kernel = (kh, kw)
        fan_x = kh * kw * in_channels

        def w(tag):
            return Parameter(fan_in_uniform(rng, (filters, kh, kw, in_channels), fan_x),
                             name=f"{name}.W_{tag}", dtype=dtype)

        def u(tag):
            return Parameter(orthogonal_kernel(rng, filters, kh, kw), name=f"{name}.U_{tag}", dtype=dtype)

        def b(tag):
            return Parameter(np.zeros(filters), name=f"{name}.b_{tag}", dtype=dtype)

        self.W_z, self.W_r, self.W_a = w("z"), w("r"), w("a")
        self.U_z, self.U_r, self.U_a = u("z"), u("r"), u("a")
        self.b_z, self.b_r, self.b_a = b("z"), b("r"), b("a")

    def input_projection(self, x: Tensor) -> Tensor:
        """Input-side gate pre-activations ``(..., H, W, 3F)`` for any number of steps."""
        if x.shape[-1] != self.in_channels:
            raise ShapeError(f"cell expects {self.in_channels} input channels, got {x.shape[-1]}")
        kernel = ops.concat([self.W_z, self.W_r, self.W_a], axis=0)
        bias = ops.concat([self.b_z, self.b_r, self.b_a], axis=0)
        return ops.conv2d(x, kernel, bias)

    def recurrent_kernel(self) -> Tensor:
        """U_z and U_r fused along output channels; build once per sequence."""
        return ops.concat([self.U_z, self.U_r], axis=0)

    def step(self, prev: Tensor, xproj: Tensor, rec_mask: Optional[np.ndarray] = None,
             z_override: Optional[Tensor] = None, u_zr: Optional[Tensor] = None) -> Tensor:
        """Advance one unit from ``prev`` given a precomputed input projection.

        ``rec_mask`` is the per-sequence recurrent dropout mask applied to the
        state inside the gate computations.  ``z_override`` replaces the update
        gate (used to test the state-combination formula in isolation).
        """
        return self.gates(prev, xproj, rec_mask, z_override, u_zr)["A"]

    def gates(self, prev: Tensor, xproj: Tensor, rec_mask: Optional[np.ndarray] = None,
              z_override: Optional[Tensor] = None, u_zr: Optional[Tensor] = None) -> dict[str, Tensor]:
        f = self.filters
        if prev.shape[-1] != f or prev.shape[-3:-1] != xproj.shape[-3:-1]:
            raise ShapeError(f"state {prev.shape} does not match filters {f} / input {xproj.shape}")
        a_in = _apply(prev, rec_mask)
        hzr = ops.conv2d(a_in, u_zr if u_zr is not None else self.recurrent_kernel())
        z = ops.sigmoid(ops.add(xproj[..., :f], hzr[..., :f]))
        if z_override is not None:
            z = z_override
        r = ops.sigmoid(ops.add(xproj[..., f:2 * f], hzr[..., f:]))
        cand = ops.tanh(ops.add(xproj[..., 2 * f:], ops.conv2d(ops.mul(r, a_in), self.U_a)))
        a = ops.add(ops.mul(z, prev), ops.mul(ops.sub(1.0, z), cand))
        return {"z": z, "r": r, "cand": cand, "A": a}

    def __call__(self, prev: Tensor, x: Tensor) -> Tensor:
        return self.step(prev, self.input_projection(x))


def zero_state(batch: int, spatial: tuple, filters: int, dtype) -> Tensor:
    return Tensor(np.zeros((batch,) + tuple(spatial) + (filters,), dtype=dtype))


def _check_sequence(x: Tensor, what: str) -> None:
    if x.ndim != 5:
        raise ShapeError(f"{what} expects a (N, T, H, W, C) sequence, got {x.shape}")


class ConvGRULayer(Module):
    """A (optionally bidirectional) ConvGRU layer over a whole sequence.

    Each direction owns its cell.  Backward-direction states are stored at the
    time index they summarise, and the two directions are concatenated along
    channels, so a bidirectional layer emits ``2 * filters`` channels.
    """

    def __init__(self, in_channels: int, filters: int, kernel=(3, 3), bidirectional: bool = False, *,
                 rng: np.random.Generator, dtype=np.float32, name: str = "convgru"):
        self.filters = filters
        self.bidirectional = bidirectional
        self.fw = ConvGRUCell(in_channels, filters, kernel, rng=rng, dtype=dtype, name=f"{name}.fw")
        self.bw = (ConvGRUCell(in_channels, filters, kernel, rng=rng, dtype=dtype, name=f"{name}.bw")
                   if bidirectional else None)

    @property
    def out_channels(self) -> int:
        return self.filters * (2 if self.bidirectional else 1)

    def __call__(self, x: Tensor, drop: Optional[DropoutSampler] = None) -> Tensor:
        _check_sequence(x, "ConvGRULayer")
        outs = [self._run(self.fw, x, False, drop)]
        if self.bw is not None:
            outs.append(self._run(self.bw, x, True, drop))
        return outs[0] if len(outs) == 1 else ops.concat(outs, axis=-1)

    def _run(self, cell: ConvGRUCell, x: Tensor, reverse: bool, drop) -> Tensor:
        n, t, h, w, _ = x.shape
        x = _apply(x, _mask(drop, "input", x.shape, x.dtype))
        xproj = cell.input_projection(x)
        rec_mask = _mask(drop, "recurrent", (n, h, w, cell.filters), x.dtype)
        prev = zero_state(n, (h, w), cell.filters, x.dtype)
        u_zr = cell.recurrent_kernel()
        states: list = [None] * t
        for i in (range(t - 1, -1, -1) if reverse else range(t)):
            prev = cell.step(prev, xproj[:, i], rec_mask, u_zr=u_zr)
            states[i] = prev
        return ops.stack(states, axis=1)


def convgru_layer(inputs: Tensor, layer: ConvGRULayer, drop: Optional[DropoutSampler] = None) -> Tensor:
    if inputs.ndim != 5 or inputs.shape[1] == 0:
        raise ContractError("convgru_layer needs a non-empty (N, T, H, W, C) sequence")
    return layer(inputs, drop)


class FTCA(Module):
    """Fused temporal cross attention.

    Aggregates a window of ``window`` finer-scale tensors into one coarser
    input, using the pooled previous state of the receiving layer as the
    query.  Per head ``h``::

        Q = pool(A_prev) @ W_Q[h]            (1, d_o)
        K = pool(window) @ W_K[h]            (T_b, d_o)
        S = softmax(Q (K + a_K)^T / sqrt(d_o))
        V = window * W_V1[h]                 (T_b, H, W, c_f)
        head = sum_b S_b (V_b + a_V[b])

    Heads are concatenated along channels and passed through the shared
    ``W_V2`` convolution.  ``a_K`` and ``a_V`` are shared by all heads and
    start at zero.
    """

    def __init__(self, state_channels: int, window_channels: int, spatial: tuple, *, window: int,
                 heads: int = 1, pool: int = 2, key_dim: int = 8, value_filters: int = 8,
                 out_channels: Optional[int] = None, rng: np.random.Generator, dtype=np.float32,
                 name: str = "ftca"):
        h, w = spatial
        if h % pool or w % pool:
            raise ConfigError(f"spatial extents {spatial} not divisible by pool size {pool}")
        if window < 1 or heads < 1:
            raise ConfigError("window and heads must be positive")
        self.spatial = (h, w)
        self.window = window
        self.heads = heads
        self.pool = pool
        self.key_dim = key_dim
        self.value_filters = value_filters
        self.state_channels = state_channels
        self.window_channels = window_channels
        self.out_channels = out_channels or value_filters
        self.d_a = h * w * state_channels // (pool * pool)
        self.d_b = h * w * window_channels // (pool * pool)

        self.W_Q = [Parameter(fan_in_uniform(rng, (self.d_a, key_dim), self.d_a),
                              name=f"{name}.W_Q{i}", dtype=dtype) for i in range(heads)]
        self.W_K = [Parameter(fan_in_uniform(rng, (self.d_b, key_dim), self.d_b),
                              name=f"{name}.W_K{i}", dtype=dtype) for i in range(heads)]
        self.W_V1 = [Parameter(fan_in_uniform(rng, (value_filters, 4, 4, window_channels), 16 * window_channels),
                               name=f"{name}.W_V1{i}", dtype=dtype) for i in range(heads)]
        fan_v2 = 9 * heads * value_filters
        self.W_V2 = Parameter(fan_in_uniform(rng, (self.out_channels, 3, 3, heads * value_filters), fan_v2),
                              name=f"{name}.W_V2", dtype=dtype)
        self.a_K = Parameter(np.zeros((window, key_dim)), name=f"{name}.a_K", dtype=dtype)
        self.a_V = Parameter(np.zeros((window, value_filters)), name=f"{name}.a_V", dtype=dtype)

    def pooled(self, x: Tensor) -> Tensor:
        """3-D average pool and flatten: (..., H, W, C) -> (..., H*W*C/M^2)."""
        p = ops.avg_pool3d(x, self.pool)
        return ops.reshape(p, x.shape[:-3] + (-1,))

    def keys(self, seq: Tensor) -> Tensor:
        """Key projections for every step of ``seq``: (N, T, heads * d_o)."""
        return ops.matmul(self.pooled(seq), ops.concat(self.W_K, axis=1))

    def values(self, seq: Tensor) -> Tensor:
        """Value convolutions for every step of ``seq``: (N, T, H, W, heads * c_f)."""
        return ops.conv2d(seq, ops.concat(self.W_V1, axis=0))

    def query_kernel(self) -> Tensor:
        """All heads' W_Q side by side, (d_a, heads * d_o)."""
        return self.W_Q[0] if self.heads == 1 else ops.concat(self.W_Q, axis=1)

    def attend(self, prev: Tensor, keys: Tensor, values: Tensor,
               drop: Optional[DropoutSampler] = None,
               w_q: Optional[Tensor] = None) -> tuple[Tensor, list[Tensor]]:
        """Aggregate one window given its precomputed keys and values.

        Returns the aggregated input ``(N, H, W, out_channels)`` and the list
        of per-head attention weights, each ``(N, 1, T_b)``.
        """
        n = prev.shape[0]
        tb = keys.shape[1]
        if tb != self.window:
            raise ContractError(f"window length {tb} != configured {self.window}")
        h, w = self.spatial
        d_o, c_f = self.key_dim, self.value_filters
        w_q = w_q if w_q is not None else self.query_kernel()
        q = ops.matmul(ops.reshape(self.pooled(prev), (n, 1, self.d_a)), w_q)
        inv = 1.0 / math.sqrt(d_o)
        heads, weights = [], []
        for i in range(self.heads):
            qh = q if self.heads == 1 else q[..., i * d_o:(i + 1) * d_o]
            kh = ops.add(keys[..., i * d_o:(i + 1) * d_o], self.a_K)
            # order-free reductions over the window: scores and mixing are
            # bit-equivariant when the window steps are permuted
            qb = ops.broadcast_to(qh, (n, tb, d_o))
            score = ops.ordered_sum(ops.mul(qb, kh), axis=-1)
            s = ops.softmax(ops.scale(ops.reshape(score, (n, 1, tb)), inv))
            weights.append(s)
            s = _apply(s, _mask(drop, "attention", s.shape, s.dtype))
            vh = values[..., i * c_f:(i + 1) * c_f] if self.heads > 1 else values
            vh = ops.reshape(vh, (n, tb, h * w * c_f))
            sb = ops.broadcast_to(ops.reshape(s, (n, tb, 1)), (n, tb, h * w * c_f))
            mixed = ops.reshape(ops.ordered_sum(ops.mul(sb, vh), axis=1), (n, h, w, c_f))
            pos = ops.reshape(ops.matmul(s, self.a_V), (n, 1, 1, c_f))
            heads.append(ops.add(mixed, ops.broadcast_to(pos, (n, h, w, c_f))))
        fused = heads[0] if len(heads) == 1 else ops.concat(heads, axis=-1)
        return ops.conv2d(fused, self.W_V2), weights

    def __call__(self, prev: Tensor, window: Tensor, drop: Optional[DropoutSampler] = None) -> Tensor:
        return self.attend(prev, self.keys(window), self.values(window), drop)[0]


def ftca_aggregate(prev_state: Tensor, window: Tensor, ftca: FTCA,
                   drop: Optional[DropoutSampler] = None) -> Tensor:
    """Aggregate a ``(N, T_b, H, W, C)`` window queried by ``prev_state``."""
    if window.ndim != 5 or window.shape[1] != ftca.window:
        raise ContractError(f"expected a window of {ftca.window} steps, got shape {window.shape}")
    return ftca(prev_state, window, drop)


class ConvGRUFTCALayer(Module):
    """ConvGRU layer whose unit ``i`` consumes window ``i`` of ``contraction`` steps.

    The aggregated window (FTCA output) replaces the ConvGRU input, so the
    output sequence is ``contraction`` times shorter than the input.  In the
    bidirectional case each direction has its own FTCA queried by its own
    previous state; the backward direction visits windows in reverse order.
    """

    def __init__(self, in_channels: int, filters: int, contraction: int, spatial: tuple, *,
                 heads: int = 1, pool: int = 2, key_dim: int = 8, value_filters: Optional[int] = None,
                 kernel=(3, 3), bidirectional: bool = False, rng: np.random.Generator,
                 dtype=np.float32, name: str = "convgru_ftca"):
        self.filters = filters
        self.contraction = contraction
        self.bidirectional = bidirectional
        c_f = value_filters or filters

        def direction(tag):
            ftca = FTCA(filters, in_channels, spatial, window=contraction, heads=heads, pool=pool,
                        key_dim=key_dim, value_filters=c_f, rng=rng, dtype=dtype, name=f"{name}.{tag}.ftca")
            cell = ConvGRUCell(ftca.out_channels, filters, kernel, rng=rng, dtype=dtype, name=f"{name}.{tag}")
            return ftca, cell

        self.fw_ftca, self.fw = direction("fw")
        self.bw_ftca, self.bw = direction("bw") if bidirectional else (None, None)
        self.last_weights: list = []

    @property
    def out_channels(self) -> int:
        return self.filters * (2 if self.bidirectional else 1)

    def __call__(self, x: Tensor, drop: Optional[DropoutSampler] = None,
                 keep_weights: bool = False) -> Tensor:
        _check_sequence(x, "ConvGRUFTCALayer")
        if x.shape[1] % self.contraction:
            raise ContractError(f"sequence length {x.shape[1]} not divisible by {self.contraction}")
        self.last_weights = []
        outs = [self._run(self.fw_ftca, self.fw, x, False, drop, keep_weights)]
        if self.bw is not None:
            outs.append(self._run(self.bw_ftca, self.bw, x, True, drop, keep_weights))
        return outs[0] if len(outs) == 1 else ops.concat(outs, axis=-1)

    def _run(self, ftca: FTCA, cell: ConvGRUCell, x: Tensor, reverse: bool, drop, keep_weights) -> Tensor:
        n, t, h, w, _ = x.shape
        tb = self.contraction
        units = t // tb
        keys = ftca.keys(x)
        values = ftca.values(x)
        in_mask = _mask(drop, "input", (n, units, h, w, ftca.out_channels), x.dtype)
        rec_mask = _mask(drop, "recurrent", (n, h, w, cell.filters), x.dtype)
        prev = zero_state(n, (h, w), cell.filters, x.dtype)
        u_zr = cell.recurrent_kernel()
        w_q = ftca.query_kernel()
        states: list = [None] * units
        for i in (range(units - 1, -1, -1) if reverse else range(units)):
            window = slice(i * tb, (i + 1) * tb)
            bhat, weights = ftca.attend(prev, keys[:, window], values[:, window], drop, w_q)
            if keep_weights:
                self.last_weights.append(weights)
            if in_mask is not None:
                bhat = ops.mul(bhat, Tensor(in_mask[:, i]))
            prev = cell.step(prev, cell.input_projection(bhat), rec_mask, u_zr=u_zr)
            states[i] = prev
        return ops.stack(states, axis=1)


class DSConvGRULayer(Module):
    """Dual-state ConvGRU: two input streams share one previous state.

    Each stream has its own cell; unit ``i`` computes a candidate next state
    from each stream against ``A_{i-1}`` and keeps their average.
    """

    def __init__(self, in_channels1: int, in_channels2: int, filters: int, kernel=(3, 3), *,
                 rng: np.random.Generator, dtype=np.float32, name: str = "dsconvgru"):
        self.filters = filters
        self.branch1 = ConvGRUCell(in_channels1, filters, kernel, rng=rng, dtype=dtype, name=f"{name}.b1")
        self.branch2 = ConvGRUCell(in_channels2, filters, kernel, rng=rng, dtype=dtype, name=f"{name}.b2")

    def __call__(self, x1: Tensor, x2: Tensor, drop: Optional[DropoutSampler] = None) -> Tensor:
        _check_sequence(x1, "DSConvGRULayer")
        _check_sequence(x2, "DSConvGRULayer")
        if x1.shape[:4] != x2.shape[:4]:
            raise ContractError(f"input streams disagree: {x1.shape} vs {x2.shape}")
        n, t, h, w, _ = x1.shape
        x1 = _apply(x1, _mask(drop, "input", x1.shape, x1.dtype))
        x2 = _apply(x2, _mask(drop, "input", x2.shape, x2.dtype))
        p1 = self.branch1.input_projection(x1)
        p2 = self.branch2.input_projection(x2)
        rec_mask = _mask(drop, "recurrent", (n, h, w, self.filters), x1.dtype)
        prev = zero_state(n, (h, w), self.filters, x1.dtype)
        u1, u2 = self.branch1.recurrent_kernel(), self.branch2.recurrent_kernel()
        states = []
        for i in range(t):
            a1 = self.branch1.step(prev, p1[:, i], rec_mask, u_zr=u1)
            a2 = self.branch2.step(prev, p2[:, i], rec_mask, u_zr=u2)
            prev = ops.scale(ops.add(a1, a2), 0.5)
            states.append(prev)
        return ops.stack(states, axis=1)


class OutputHead(Module):
    """conv(hidden, 3x3) -> relu -> conv(1, 3x3) -> final activation.

    ``activation="logistic"`` yields rain probabilities in (0, 1);
    ``activation="nonneg"`` applies softplus for non-negative intensities.
    """

    def __init__(self, in_channels: int, hidden: int = 32, kernel=(3, 3), activation: str = "nonneg", *,
                 rng: np.random.Generator, dtype=np.float32, name: str = "head"):
        if activation not in ("logistic", "nonneg"):
            raise ConfigError(f"unknown head activation {activation!r}")
        kh, kw = kernel
        self.in_channels = in_channels
        self.activation = activation
        self.k1 = Parameter(fan_in_uniform(rng, (hidden, kh, kw, in_channels), kh * kw * in_channels),
                            name=f"{name}.k1", dtype=dtype)
        self.b1 = Parameter(np.zeros(hidden), name=f"{name}.b1", dtype=dtype)
        self.k2 = Parameter(fan_in_uniform(rng, (1, kh, kw, hidden), kh * kw * hidden),
                            name=f"{name}.k2", dtype=dtype)
        self.b2 = Parameter(np.zeros(1), name=f"{name}.b2", dtype=dtype)

    def preactivation(self, latents: Tensor) -> Tensor:
        """Hidden layer input, before the rectifier."""
        if latents.shape[-1] != self.in_channels:
            raise ShapeError(f"head expects {self.in_channels} channels, got {latents.shape[-1]}")
        return ops.conv2d(latents, self.k1, self.b1)

    def __call__(self, latents: Tensor) -> Tensor:
        hidden = ops.relu(self.preactivation(latents))
        out = ops.conv2d(hidden, self.k2, self.b2)
        out = ops.sigmoid(out) if self.activation == "logistic" else ops.softplus(out)
        return ops.reshape(out, out.shape[:-1])
