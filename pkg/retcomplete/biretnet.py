"""
Bidirectional retentive network.

Two towers of N pre-LayerNorm blocks (MSR + GELU FFN, both residual) share one
input embedding. The forward tower reads the raster sequence left to right; the
backward tower reads it reversed and its output is reversed back. The fusion
head predicts a color distribution per position from LN(X_forward + X_backward).
"""

from collections import OrderedDict
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from retcomplete.checkpoint import Checkpoint
from retcomplete.config import ModelConfig, Paradigm
from retcomplete.errors import CheckpointError, DimensionError
from retcomplete.palette import Palette
from retcomplete.retention import (
    MSRParams,
    RetentionHeadParams,
    RetentionState,
    decay_gammas,
    msr,
    msr_step,
    msr_with_state,
    rotation_frequencies,
)
from retcomplete.rng import stream
from retcomplete.sequencer import EmbeddingTable, PixelSequence, embed
from retcomplete.tensor_core import (
    Tensor,
    add,
    flip,
    gelu,
    layer_norm,
    matmul,
    softmax,
)

LayerStates = List[RetentionState]
TowerStates = List[LayerStates]
ParamFactory = Callable[[str, Tuple[int, ...], str], Tensor]


class LayerParams:
    """One block: LN -> MSR -> residual, LN -> FFN -> residual."""

    __slots__ = ("ln1_gamma", "ln1_beta", "msr", "ln2_gamma", "ln2_beta", "w1", "b1", "w2", "b2")

    def __init__(
        self,
        ln1_gamma: Tensor,
        ln1_beta: Tensor,
        msr: MSRParams,
        ln2_gamma: Tensor,
        ln2_beta: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    ) -> None:
        self.ln1_gamma, self.ln1_beta = ln1_gamma, ln1_beta
        self.msr = msr
        self.ln2_gamma, self.ln2_beta = ln2_gamma, ln2_beta
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2


class TowerParams:
    __slots__ = ("layers",)

    def __init__(self, layers: List[LayerParams]) -> None:
        self.layers = list(layers)

    def empty_states(self) -> TowerStates:
        return [layer.msr.empty_states() for layer in self.layers]


class ModelParams:
    """
    All trainable weights of a Bi-RetNet.

    Parameters are addressed by stable dotted names (`fwd.0.msr.head1.w_q`,
    `head.fc.weight`, ...) which are also the checkpoint array names.
    """

    def __init__(
        self,
        config: ModelConfig,
        embedding: EmbeddingTable,
        forward: TowerParams,
        backward: TowerParams,
        head_ln_gamma: Tensor,
        head_ln_beta: Tensor,
        fc_weight: Tensor,
        fc_bias: Tensor,
        named: "OrderedDict[str, Tensor]",
    ) -> None:
        self.config = config
        self.embedding = embedding
        self.forward = forward
        self.backward = backward
        self.head_ln_gamma, self.head_ln_beta = head_ln_gamma, head_ln_beta
        self.fc_weight, self.fc_bias = fc_weight, fc_bias
        self._named = named

    def __repr__(self) -> str:
        return f"ModelParams({self.config!r}, parameters={self.parameter_count()})"

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self._named

    def parameters(self) -> List[Tensor]:
        return list(self._named.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self._named.values())

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._named.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: Dict[str, np.ndarray]) -> "ModelParams":
        """
        Rebuild parameters from named arrays.

        Raises:
            CheckpointError: If an array is missing or has the wrong shape
        """

        def lookup(name: str, shape: Tuple[int, ...], kind: str) -> Tensor:
            if name not in arrays:
                raise CheckpointError(f"checkpoint is missing parameter '{name}'")
            value = np.asarray(arrays[name])
            if value.shape != shape:
                raise CheckpointError(
                    f"parameter '{name}' has shape {value.shape}, expected {shape}"
                )
            return Tensor(np.array(value), requires_grad=True, name=name)

        return _build(config, lookup)

    def clone(self) -> "ModelParams":
        return ModelParams.from_arrays(self.config, self.to_arrays())


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


def _build(config: ModelConfig, factory: ParamFactory) -> ModelParams:
    named: "OrderedDict[str, Tensor]" = OrderedDict()
    d, d_head, k = config.d_model, config.d_head, config.palette_size
    hidden = config.ffn_mult * d
    theta = rotation_frequencies(d_head, config.rope_base)
    gammas = decay_gammas(config.heads)

    def param(name: str, shape: Tuple[int, ...], kind: str) -> Tensor:
        tensor = factory(name, shape, kind)
        named[name] = tensor
        return tensor

    fe = param("embed.fe", (k + 1, d), "embedding")
    pe = param("embed.pe", (config.seq_len, d), "embedding")

    def tower(prefix: str) -> TowerParams:
        layers = []
        for n in range(config.layers):
            p = f"{prefix}.{n}"
            ln1_gamma = param(f"{p}.ln1.gamma", (d,), "gain")
            ln1_beta = param(f"{p}.ln1.beta", (d,), "bias")
            heads = [
                RetentionHeadParams(
                    param(f"{p}.msr.head{i}.w_q", (d_head, d_head), "matrix"),
                    param(f"{p}.msr.head{i}.w_k", (d_head, d_head), "matrix"),
                    param(f"{p}.msr.head{i}.w_v", (d_head, d_head), "matrix"),
                    gammas[i],
                    theta,
                )
                for i in range(config.heads)
            ]
            retention = MSRParams(
                heads,
                param(f"{p}.msr.gn.gamma", (d,), "gain"),
                param(f"{p}.msr.gn.beta", (d,), "bias"),
                param(f"{p}.msr.w_g", (d, d), "matrix"),
                param(f"{p}.msr.w_o", (d, d), "output"),
            )
            layers.append(
                LayerParams(
                    ln1_gamma,
                    ln1_beta,
                    retention,
                    param(f"{p}.ln2.gamma", (d,), "gain"),
                    param(f"{p}.ln2.beta", (d,), "bias"),
                    param(f"{p}.ffn.w1", (d, hidden), "matrix"),
                    param(f"{p}.ffn.b1", (hidden,), "bias"),
                    param(f"{p}.ffn.w2", (hidden, d), "output"),
                    param(f"{p}.ffn.b2", (d,), "bias"),
                )
            )
        return TowerParams(layers)

    forward = tower("fwd")
    backward = tower("bwd")
    return ModelParams(
        config,
        EmbeddingTable(fe, pe),
        forward,
        backward,
        param("head.ln.gamma", (d,), "gain"),
        param("head.ln.beta", (d,), "bias"),
        param("head.fc.weight", (d, k), "matrix"),
        param("head.fc.bias", (k,), "bias"),
        named,
    )


def init_params(config: ModelConfig, seed: int = 0, zero_residual: bool = False) -> ModelParams:
    """
    Randomly initialise a model.

    Matrices and embeddings draw from a normal truncated at 2 std, biases are
    zero and norm gains one. With `zero_residual` the MSR and FFN output
    projections start at zero, which makes every block the identity.
    """
    rng = stream(seed, "init")

    def draw(name: str, shape: Tuple[int, ...], kind: str) -> Tensor:
        if kind == "gain":
            value = np.ones(shape)
        elif kind == "bias":
            value = np.zeros(shape)
        elif kind == "output" and zero_residual:
            value = np.zeros(shape)
        else:
            value = _truncated_normal(rng, shape, config.init_std)
        return Tensor(value, requires_grad=True, name=name)

    return _build(config, draw)


def expected_parameter_count(config: ModelConfig) -> int:
    """Parameter count from the config alone."""
    d, k, h = config.d_model, config.palette_size, config.heads
    hidden = config.ffn_mult * d
    msr_count = h * 3 * config.d_head**2 + 2 * d + 2 * d * d
    ffn_count = d * hidden + hidden + hidden * d + d
    block = 4 * d + msr_count + ffn_count
    embeddings = (k + 1) * d + config.seq_len * d
    head = 2 * d + d * k + k
    return embeddings + 2 * config.layers * block + head


def _ffn(y: Tensor, layer: LayerParams) -> Tensor:
    hidden = gelu(add(matmul(y, layer.w1), layer.b1))
    return add(matmul(hidden, layer.w2), layer.b2)


def _block(X: Tensor, layer: LayerParams, paradigm: Paradigm, chunk: Optional[int]) -> Tensor:
    Y = msr(layer_norm(X, layer.ln1_gamma, layer.ln1_beta), layer.msr, paradigm, chunk) + X
    return _ffn(layer_norm(Y, layer.ln2_gamma, layer.ln2_beta), layer) + Y


def _check_tower_input(X: Tensor, tower: TowerParams) -> None:
    if X.ndim != 2:
        raise DimensionError(f"tower input must be [L^2, d], got {X.shape}")
    if tower.layers and X.shape[1] != tower.layers[0].msr.d_model:
        raise DimensionError(f"tower input width {X.shape[1]} differs from d_model")


def forward_tower(
    X: Tensor,
    tower: TowerParams,
    paradigm: Paradigm = Paradigm.PARALLEL,
    chunk: Optional[int] = None,
) -> Tensor:
    """Apply the N blocks of a tower left to right, [L^2, d] -> [L^2, d]."""
    _check_tower_input(X, tower)
    for layer in tower.layers:
        X = _block(X, layer, paradigm, chunk)
    return X


def backward_tower(
    X: Tensor,
    tower: TowerParams,
    paradigm: Paradigm = Paradigm.PARALLEL,
    chunk: Optional[int] = None,
) -> Tensor:
    """reverse . forward_tower . reverse, applied with the backward tower's weights."""
    return flip(forward_tower(flip(X, 0), tower, paradigm, chunk), 0)


def forward_tower_with_state(
    X: Tensor, tower: TowerParams, states: Optional[TowerStates] = None
) -> Tuple[Tensor, TowerStates]:
    """
    Run X as one chunk that continues after `states` (positions state.step onward).

    Returns the block outputs and the per-layer, per-head states after X.
    """
    _check_tower_input(X, tower)
    states = states if states is not None else tower.empty_states()
    advanced: TowerStates = []
    for layer, layer_states in zip(tower.layers, states):
        normed = layer_norm(X, layer.ln1_gamma, layer.ln1_beta)
        h, new_states = msr_with_state(normed, layer.msr, layer_states)
        Y = h + X
        X = _ffn(layer_norm(Y, layer.ln2_gamma, layer.ln2_beta), layer) + Y
        advanced.append(new_states)
    return X, advanced


def block_step(x: Tensor, layer: LayerParams, states: LayerStates) -> Tuple[Tensor, LayerStates]:
    """One block for a single position [d] in recurrent form."""
    h, new_states = msr_step(layer_norm(x, layer.ln1_gamma, layer.ln1_beta), layer.msr, states)
    y = h + x
    return _ffn(layer_norm(y, layer.ln2_gamma, layer.ln2_beta), layer) + y, new_states


def tower_step(x: Tensor, tower: TowerParams, states: TowerStates) -> Tuple[Tensor, TowerStates]:
    """Push one position through every block of a tower."""
    advanced: TowerStates = []
    for layer, layer_states in zip(tower.layers, states):
        x, new_states = block_step(x, layer, layer_states)
        advanced.append(new_states)
    return x, advanced


def fuse_logits(Xf: Tensor, Xb: Tensor, params: ModelParams) -> Tensor:
    """FC(LN(Xf + Xb)), [n, d] -> [n, k]."""
    if Xf.shape != Xb.shape:
        raise DimensionError(f"tower outputs differ in shape: {Xf.shape} vs {Xb.shape}")
    fused = layer_norm(Xf + Xb, params.head_ln_gamma, params.head_ln_beta)
    return add(matmul(fused, params.fc_weight), params.fc_bias)


def fuse_predict(Xf: Tensor, Xb: Tensor, params: ModelParams) -> Tensor:
    """Per-position color distributions softmax(FC(LN(Xf + Xb)))."""
    return softmax(fuse_logits(Xf, Xb, params), axis=-1)


def predict_logits(
    seq: PixelSequence,
    params: ModelParams,
    paradigm: Paradigm = Paradigm.PARALLEL,
    chunk: Optional[int] = None,
) -> Tensor:
    """Logits of every position predicted from the masked sequence in one pass."""
    X = embed(seq, params.embedding)
    Xf = forward_tower(X, params.forward, paradigm, chunk)
    Xb = backward_tower(X, params.backward, paradigm, chunk)
    return fuse_logits(Xf, Xb, params)


PALETTE_ARRAY = "palette.centroids"


def model_to_checkpoint(
    params: ModelParams,
    palette: Optional[Palette] = None,
    extra_arrays: Optional[Dict[str, np.ndarray]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    """Pack parameters, the palette and optional optimizer arrays into a checkpoint."""
    arrays = params.to_arrays()
    if palette is not None:
        if palette.k != params.config.palette_size:
            raise CheckpointError(
                f"palette has k={palette.k}, model expects {params.config.palette_size}"
            )
        arrays[PALETTE_ARRAY] = palette.centroids.copy()
    arrays.update(extra_arrays or {})
    return Checkpoint(
        kind="biretnet",
        config=params.config.model_dump(mode="json"),
        arrays=arrays,
        meta=meta or {},
        palette_sha256=palette.digest() if palette is not None else None,
    )


def model_from_checkpoint(checkpoint: Checkpoint) -> Tuple[ModelParams, Optional[Palette]]:
    """
    Unpack a Bi-RetNet checkpoint.

    Raises:
        CheckpointError: On a wrong kind, invalid config, or a palette digest mismatch
    """
    if checkpoint.kind != "biretnet":
        raise CheckpointError(f"expected a biretnet checkpoint, got '{checkpoint.kind}'")
    try:
        config = ModelConfig.model_validate(checkpoint.config)
    except ValueError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from exc
    params = ModelParams.from_arrays(config, checkpoint.arrays)
    palette = None
    if PALETTE_ARRAY in checkpoint.arrays:
        palette = Palette(checkpoint.arrays[PALETTE_ARRAY])
        if checkpoint.palette_sha256 and palette.digest() != checkpoint.palette_sha256:
            raise CheckpointError("embedded palette does not match the recorded digest")
    return params, palette
