"""
CryptoMamba forecaster

Input embedding -> C-Blocks (chained CMBlocks, then a linear map along the
time axis that changes the sequence length) -> Merge head over the
concatenated outputs of every C-Block -> one normalized next-day close.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator

from .autograd import ParamStore, Tensor, as_tensor, concat, matmul, no_grad
from .data import Dataset, Normalizer
from .errors import NonFiniteActivation, SegmentTooShort, ShapeMismatch
from .nn import LayerNorm, Linear, make_rng, uniform
from .ssm import MambaBlockParams, mamba_block_forward

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters.

    The C-Block lengths, CMBlock count and d_state follow the reference
    configuration. model_dim is the width knob: 19 puts the default
    volume-inclusive model at 137,995 parameters.
    """

    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    cblock_seq_lens: List[PositiveInt] = Field(default_factory=lambda: [14, 16, 32])
    final_seq_len: Optional[PositiveInt] = Field(
        default=None, description="Output length of the last C-Block; defaults to its input length"
    )
    cmblocks_per_cblock: PositiveInt = 4
    d_state: PositiveInt = 64
    model_dim: PositiveInt = 19
    expand: PositiveInt = 2
    d_conv: PositiveInt = 4
    use_volume: bool = True
    lookback: PositiveInt = 14
    residual: bool = True
    bare_ssm: bool = False
    fused_scan: bool = True
    dt_min: float = Field(default=1e-3, gt=0)
    dt_max: float = Field(default=1e-1, gt=0)
    layer_norm_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def _check_lengths(self) -> "ModelConfig":
        if not self.cblock_seq_lens:
            raise ValueError("cblock_seq_lens must name at least one C-Block")
        if self.cblock_seq_lens[0] != self.lookback:
            raise ValueError(
                f"first C-Block length {self.cblock_seq_lens[0]} must equal lookback {self.lookback}"
            )
        if self.dt_min > self.dt_max:
            raise ValueError("dt_min must not exceed dt_max")
        return self

    @property
    def num_features(self) -> int:
        return 5 if self.use_volume else 4

    def length_pipeline(self) -> List[Tuple[int, int]]:
        """(input length, output length) for each C-Block"""
        lens = list(self.cblock_seq_lens)
        final = self.final_seq_len or lens[-1]
        return list(zip(lens, lens[1:] + [final]))

    @property
    def merge_length(self) -> int:
        return sum(out for _, out in self.length_pipeline())


@dataclass
class CMBlockParams:
    norm: LayerNorm
    mamba: MambaBlockParams


@dataclass
class CBlockParams:
    cmblocks: List[CMBlockParams]
    time_weight: Tensor   # (L_out, L_in)
    time_bias: Tensor     # (L_out, 1)

    @property
    def input_length(self) -> int:
        return self.time_weight.shape[1]

    @property
    def output_length(self) -> int:
        return self.time_weight.shape[0]


@dataclass
class CryptoMambaParams:
    embed: Linear
    cblocks: List[CBlockParams]
    merge: Linear

    @classmethod
    def create(cls, store: ParamStore, config: ModelConfig, rng: np.random.Generator) -> "CryptoMambaParams":
        d = config.model_dim
        embed = Linear.create(store, "embed", config.num_features, d, rng)
        cblocks = []
        for i, (l_in, l_out) in enumerate(config.length_pipeline()):
            cmblocks = [
                CMBlockParams(
                    norm=LayerNorm.create(store, f"cblock{i}.cmblock{j}.norm", d, config.layer_norm_eps),
                    mamba=MambaBlockParams.create(
                        store, f"cblock{i}.cmblock{j}.mamba", d, config.d_state, rng,
                        expand=config.expand, d_conv=config.d_conv, bare=config.bare_ssm,
                        dt_min=config.dt_min, dt_max=config.dt_max,
                    ),
                )
                for j in range(config.cmblocks_per_cblock)
            ]
            bound = 1.0 / math.sqrt(l_in)
            cblocks.append(CBlockParams(
                cmblocks=cmblocks,
                time_weight=store.add(f"cblock{i}.time_mlp.weight", uniform(rng, (l_out, l_in), bound)),
                time_bias=store.add(f"cblock{i}.time_mlp.bias", uniform(rng, (l_out, 1), bound)),
            ))
        merge = Linear.create(store, "merge", config.merge_length * d, 1, rng)
        return cls(embed, cblocks, merge)


def cmblock_forward(x, params: CMBlockParams, residual: bool = True, fused: bool = True) -> Tensor:
    """Layer norm over channels, Mamba mixer, residual add"""
    x = as_tensor(x)
    out = mamba_block_forward(params.norm(x), params.mamba, fused=fused)
    return x + out if residual else out


def cblock_forward(x, params: CBlockParams, residual: bool = True, fused: bool = True) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != params.input_length:
        raise ShapeMismatch(f"C-Block expects length {params.input_length}, got shape {x.shape}")
    for block in params.cmblocks:
        x = cmblock_forward(x, block, residual, fused)
    # Time-axis linear map; channels untouched.
    return matmul(params.time_weight, x) + params.time_bias


def forward(inputs, params: CryptoMambaParams, config: ModelConfig) -> Tensor:
    """
    Normalized next-day close for one window (L, F) or a batch (B, L, F).

    Returns a scalar-shaped tensor for a single window and shape (B,) for a batch.
    """
    x = as_tensor(inputs)
    expected = (config.lookback, config.num_features)
    if x.ndim not in (2, 3) or x.shape[-2:] != expected:
        raise ShapeMismatch(f"forward expects (..., {expected[0]}, {expected[1]}), got {x.shape}")
    single = x.ndim == 2
    if single:
        x = x.reshape((1,) + x.shape)

    h = params.embed(x)
    outputs = []
    for cblock in params.cblocks:
        h = cblock_forward(h, cblock, config.residual, config.fused_scan)
        outputs.append(h)
    merged = concat(outputs, axis=-2)
    batch = merged.shape[0]
    y = params.merge(merged.reshape((batch, merged.shape[1] * merged.shape[2])))
    if not np.all(np.isfinite(y.values)):
        raise NonFiniteActivation("forward produced a non-finite prediction")
    return y.reshape(()) if single else y.reshape((batch,))


class CryptoMamba:
    """Forecaster owning its parameter store"""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params = ParamStore()
        self.weights = CryptoMambaParams.create(self.params, config, make_rng(seed))
        logger.debug(f"Built CryptoMamba with {self.params.count()} parameters")

    def forward(self, inputs) -> Tensor:
        return forward(inputs, self.weights, self.config)

    def predict(self, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Normalized predictions for a (B, L, F) array, without recording"""
        chunks = []
        with no_grad():
            for start in range(0, len(inputs), batch_size):
                chunks.append(self.forward(inputs[start:start + batch_size]).values)
        return np.concatenate(chunks) if chunks else np.empty(0)


def predict_next_close(model: CryptoMamba, last_lookback_bars: Dataset, normalizer: Normalizer) -> float:
    """Next-day close in USD from exactly `lookback` bars"""
    lookback = model.config.lookback
    if len(last_lookback_bars) != lookback:
        raise SegmentTooShort(f"need exactly {lookback} bars, got {len(last_lookback_bars)}")
    features = normalizer.apply_features(last_lookback_bars.feature_matrix(model.config.use_volume))
    with no_grad():
        z = model.forward(features).item()
    return float(normalizer.invert_target(z))


def count_parameters(params: Union[ParamStore, CryptoMamba]) -> int:
    store = params.params if isinstance(params, CryptoMamba) else params
    return store.count()
