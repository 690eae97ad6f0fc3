"""Straight-line reference implementations used as test oracles."""

import numpy as np

from crypto_mamba.model import CryptoMamba
from crypto_mamba.ssm import MambaBlockParams


def sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def naive_layer_norm(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def naive_block(x, p: MambaBlockParams):
    """Step-by-step gated Mamba block on one (L, dim) sequence"""
    L = x.shape[0]
    A = -np.exp(p.ssm.A_log.values)
    if p.bare:
        u = x
        gate = None
    else:
        inner = p.ssm.channels
        projected = np.array([x[t] @ p.in_proj.weight.values for t in range(L)])
        stream, gate = projected[:, :inner], projected[:, inner:]
        conv_w, conv_b = p.conv_weight.values, p.conv_bias.values
        width = conv_w.shape[1]
        u = np.zeros((L, inner))
        for t in range(L):
            acc = conv_b.copy()
            for j in range(width):
                s = t - (width - 1) + j
                if s >= 0:
                    acc = acc + conv_w[:, j] * stream[s]
            u[t] = acc * sigmoid(acc)

    channels = u.shape[1]
    state = np.zeros((channels, p.ssm.d_state))
    y = np.zeros((L, channels))
    for t in range(L):
        b = u[t] @ p.ssm.B_proj.values
        c = u[t] @ p.ssm.C_proj.values
        delta = np.log1p(np.exp(u[t] @ p.ssm.dt_proj.values + p.ssm.dt_bias.values))
        for d in range(channels):
            z = delta[d] * A[d]
            state[d] = np.exp(z) * state[d] + np.expm1(z) / A[d] * b * u[t, d]
            y[t, d] = state[d] @ c + p.ssm.D_skip.values[d] * u[t, d]
    if gate is not None:
        y = y * (gate * sigmoid(gate))
    return y @ p.out_proj.weight.values


def naive_forward(window, model: CryptoMamba) -> float:
    """Forecast for one (L, F) window, computed without the autodiff engine"""
    w = model.weights
    h = window @ w.embed.weight.values + w.embed.bias.values
    outputs = []
    for cblock in w.cblocks:
        for block in cblock.cmblocks:
            normed = naive_layer_norm(h, block.norm.gamma.values, block.norm.beta.values, block.norm.eps)
            out = naive_block(normed, block.mamba)
            h = h + out if model.config.residual else out
        h = cblock.time_weight.values @ h + cblock.time_bias.values
        outputs.append(h)
    flat = np.concatenate(outputs, axis=0).reshape(-1)
    return float(flat @ w.merge.weight.values[:, 0] + w.merge.bias.values[0])
