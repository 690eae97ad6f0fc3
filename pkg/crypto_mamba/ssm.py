"""
Selective state-space core

Zero-order-hold discretization of a diagonal negative A, the linear
recurrence scan, input-dependent (B, C, delta) projections and the gated
Mamba block built from them.

Shapes follow (..., L, channels) for sequences, with d_state N as the
trailing axis of state-sized arrays.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .autograd import (
    ParamStore,
    Tensor,
    as_tensor,
    concat,
    expm1_ratio,
    expm1_ratio_grad,
    expm1_ratio_values,
    exp,
    record,
    register_op,
    scan,
    silu,
    softplus,
    unbroadcast,
)
from .errors import ComputeError, LengthMismatch, NonPositiveDelta, ShapeMismatch
from .nn import Linear, uniform

logger = logging.getLogger(__name__)


@dataclass
class SsmParams:
    """
    Selective SSM parameters for `channels` independent channels.

    A = -exp(A_log) is diagonal per channel; B_t, C_t and delta_t are
    projected from the input at every step.
    """

    A_log: Tensor      # (channels, d_state)
    D_skip: Tensor     # (channels,)
    B_proj: Tensor     # (channels, d_state)
    C_proj: Tensor     # (channels, d_state)
    dt_proj: Tensor    # (channels, channels)
    dt_bias: Tensor    # (channels,)

    @property
    def channels(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    @classmethod
    def create(cls, store: ParamStore, path: str, channels: int, d_state: int,
               rng: np.random.Generator, dt_min: float = 1e-3, dt_max: float = 1e-1) -> "SsmParams":
        bound = 1.0 / math.sqrt(channels)
        a_log = np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (channels, 1))
        # Initial step sizes log-uniform in [dt_min, dt_max], stored through inverse softplus.
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=channels))
        dt_bias = dt + np.log(-np.expm1(-dt))
        return cls(
            A_log=store.add(f"{path}.A_log", a_log),
            D_skip=store.add(f"{path}.D", np.ones(channels)),
            B_proj=store.add(f"{path}.B_proj", uniform(rng, (channels, d_state), bound)),
            C_proj=store.add(f"{path}.C_proj", uniform(rng, (channels, d_state), bound)),
            dt_proj=store.add(f"{path}.dt_proj", uniform(rng, (channels, channels), bound)),
            dt_bias=store.add(f"{path}.dt_bias", dt_bias),
        )

    def A(self) -> Tensor:
        return exp(self.A_log) * -1.0


@dataclass
class MambaBlockParams:
    """Gated Mamba mixer; in_proj/conv are None for the bare SSM variant"""

    in_proj: Optional[Linear]
    conv_weight: Optional[Tensor]   # (channels, width)
    conv_bias: Optional[Tensor]     # (channels,)
    ssm: SsmParams
    out_proj: Linear

    @property
    def bare(self) -> bool:
        return self.in_proj is None

    @classmethod
    def create(cls, store: ParamStore, path: str, model_dim: int, d_state: int,
               rng: np.random.Generator, expand: int = 2, d_conv: int = 4, bare: bool = False,
               dt_min: float = 1e-3, dt_max: float = 1e-1) -> "MambaBlockParams":
        if bare:
            ssm = SsmParams.create(store, f"{path}.ssm", model_dim, d_state, rng, dt_min, dt_max)
            out_proj = Linear.create(store, f"{path}.out_proj", model_dim, model_dim, rng, bias=False)
            return cls(None, None, None, ssm, out_proj)

        inner = expand * model_dim
        in_proj = Linear.create(store, f"{path}.in_proj", model_dim, 2 * inner, rng, bias=False)
        conv_bound = 1.0 / math.sqrt(d_conv)
        conv_weight = store.add(f"{path}.conv.weight", uniform(rng, (inner, d_conv), conv_bound))
        conv_bias = store.add(f"{path}.conv.bias", uniform(rng, (inner,), conv_bound))
        ssm = SsmParams.create(store, f"{path}.ssm", inner, d_state, rng, dt_min, dt_max)
        out_proj = Linear.create(store, f"{path}.out_proj", inner, model_dim, rng, bias=False)
        return cls(in_proj, conv_weight, conv_bias, ssm, out_proj)


def zoh_discretize(A_diag, B, delta) -> Tuple[Tensor, Tensor]:
    """
    Zero-order hold for a diagonal A, elementwise with broadcasting.

    Args:
        A_diag: continuous decay rates, all negative
        B: continuous input matrix entries
        delta: step sizes, all positive

    Returns:
        (A_bar, B_bar) with A_bar = exp(delta A) and
        B_bar = (exp(delta A) - 1) / A * B, written as delta * expm1_ratio(delta A) * B
        so that |delta A| < 1e-8 yields exactly delta * B
    """
    A_diag, B, delta = as_tensor(A_diag), as_tensor(B), as_tensor(delta)
    if np.any(delta.values <= 0):
        raise NonPositiveDelta(f"delta must be positive, min is {delta.values.min()}")
    if np.any(A_diag.values >= 0):
        raise ComputeError(f"A must be strictly negative, max is {A_diag.values.max()}")
    z = delta * A_diag
    return exp(z), delta * expm1_ratio(z) * B


def ssm_scan(A_bar, B_bar, C, u, D_skip) -> Tensor:
    """
    Run the discrete recurrence from a zero state.

    Args:
        A_bar, B_bar: (..., L, D, N)
        C: (..., L, N)
        u: (..., L, D)
        D_skip: (D,)

    Returns:
        y: (..., L, D), y_k = <C_k, x_k> + D_skip * u_k
    """
    A_bar, B_bar, C, u, D_skip = (as_tensor(t) for t in (A_bar, B_bar, C, u, D_skip))
    lengths = {A_bar.shape[-3], B_bar.shape[-3], C.shape[-2], u.shape[-2]}
    if len(lengths) != 1:
        raise LengthMismatch(
            f"sequence lengths differ: A_bar {A_bar.shape}, B_bar {B_bar.shape}, C {C.shape}, u {u.shape}"
        )
    bu = B_bar * u.reshape(u.shape + (1,))
    return scan(A_bar, bu, C) + u * D_skip


def selective_params(u, params: SsmParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Input-dependent B_t, C_t (..., L, N) and delta_t (..., L, channels)"""
    u = as_tensor(u)
    if u.shape[-1] != params.channels:
        raise ShapeMismatch(f"selective_params: input width {u.shape[-1]} != {params.channels}")
    delta = softplus(u @ params.dt_proj + params.dt_bias)
    return u @ params.B_proj, u @ params.C_proj, delta


@register_op("selective_scan")
def selective_scan(delta, A, B, C, u) -> Tensor:
    """
    Zero-order hold discretization fused into the recurrence.

    Equivalent to zoh_discretize on every step followed by the scan readout,
    but keeps only the hidden states, not the discretized (L, D, N) tensors.

    Args:
        delta: (..., L, D) positive step sizes
        A: (D, N) negative decay rates
        B, C: (..., L, N)
        u: (..., L, D)

    Returns:
        (..., L, D) readout without the skip term
    """
    delta, A, B, C, u = (as_tensor(t) for t in (delta, A, B, C, u))
    dv, Av, Bv, Cv, uv = delta.values, A.values, B.values, C.values, u.values
    length = uv.shape[-2]
    if dv.shape != uv.shape or Bv.shape[-2] != length or Cv.shape != Bv.shape:
        raise LengthMismatch(f"selective_scan: delta {dv.shape}, B {Bv.shape}, C {Cv.shape}, u {uv.shape}")
    if Av.shape != (uv.shape[-1], Bv.shape[-1]):
        raise ShapeMismatch(f"selective_scan: A {Av.shape} for input {uv.shape} and B {Bv.shape}")
    if np.any(dv <= 0):
        raise NonPositiveDelta(f"delta must be positive, min is {dv.min()}")

    lead = uv.shape[:-2]
    xs = np.empty(lead + (length,) + Av.shape)
    y = np.empty(uv.shape)
    x = np.zeros(lead + Av.shape)
    for k in range(length):
        dk = dv[..., k, :, None]
        z = dk * Av
        b_bar = dk * expm1_ratio_values(z) * Bv[..., k, None, :]
        x = np.exp(z) * x + b_bar * uv[..., k, :, None]
        xs[..., k, :, :] = x
        y[..., k, :] = np.sum(x * Cv[..., k, None, :], axis=-1)

    def backward(g):
        g_delta = np.empty_like(dv)
        g_A = np.zeros_like(Av)
        g_B = np.empty_like(Bv)
        g_C = np.empty_like(Cv)
        g_u = np.empty_like(uv)
        gx = np.zeros(lead + Av.shape)
        for k in reversed(range(length)):
            dk = dv[..., k, :, None]
            bk = Bv[..., k, None, :]
            uk = uv[..., k, :, None]
            z = dk * Av
            a_bar = np.exp(z)
            phi = expm1_ratio_values(z)
            gk = g[..., k, :, None]
            g_C[..., k, :] = np.sum(gk * xs[..., k, :, :], axis=-2)
            gx = gx + gk * Cv[..., k, None, :]
            g_bbar = gx * uk
            g_u[..., k, :] = np.sum(gx * (dk * phi * bk), axis=-1)
            g_z = (gx * xs[..., k - 1, :, :] * a_bar if k > 0 else 0.0) \
                + g_bbar * dk * bk * expm1_ratio_grad(z)
            g_delta[..., k, :] = np.sum(g_bbar * phi * bk + g_z * Av, axis=-1)
            g_B[..., k, :] = np.sum(g_bbar * dk * phi, axis=-2)
            g_A += unbroadcast(g_z * dk, Av.shape)
            gx = gx * a_bar
        return g_delta, g_A, g_B, g_C, g_u

    return record("selective_scan", (delta, A, B, C, u), y, backward)


def causal_depthwise_conv(x, weight, bias) -> Tensor:
    """
    Per-channel causal convolution along the time axis.

    out[t] = bias + sum_j weight[:, j] * x[t - (width - 1) + j], zero history.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    width = weight.shape[1]
    length = x.shape[-2]
    if weight.shape[0] != x.shape[-1]:
        raise ShapeMismatch(f"conv: weight {weight.shape} for input {x.shape}")
    history = Tensor(np.zeros(x.shape[:-2] + (width - 1, x.shape[-1])))
    padded = concat([history, x], axis=-2)
    out = bias
    for j in range(width):
        out = out + padded[..., j:j + length, :] * weight[:, j]
    return out


def mamba_block_forward(x, params: MambaBlockParams, fused: bool = True) -> Tensor:
    """
    Mamba mixer over a (..., L, model_dim) sequence.

    in_proj -> causal depthwise conv -> SiLU -> selective (B, C, delta) ->
    ZOH + scan -> gate with SiLU(z) -> out_proj. The bare variant feeds x
    straight into the selective SSM and skips the gate. Output at step t
    depends only on inputs at steps <= t.
    """
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeMismatch(f"mamba block needs a (..., L, dim) sequence, got {x.shape}")

    gate = None
    if params.bare:
        u = x
    else:
        inner = params.ssm.channels
        projected = params.in_proj(x)
        stream, gate = projected[..., :inner], projected[..., inner:]
        u = silu(causal_depthwise_conv(stream, params.conv_weight, params.conv_bias))

    ssm = params.ssm
    B_t, C_t, delta = selective_params(u, ssm)
    A = ssm.A()
    if fused:
        y = selective_scan(delta, A, B_t, C_t, u) + u * ssm.D_skip
    else:
        A_bar, B_bar = zoh_discretize(
            A,
            B_t.reshape(B_t.shape[:-1] + (1, ssm.d_state)),
            delta.reshape(delta.shape + (1,)),
        )
        y = ssm_scan(A_bar, B_bar, C_t, u, ssm.D_skip)

    if gate is not None:
        y = y * silu(gate)
    return params.out_proj(y)
