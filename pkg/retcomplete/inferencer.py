"""
Pixel-wise recurrent completion.

A session first runs the whole masked sequence through both towers: the forward
tower leaves per-layer retention states after position L^2 - 1, the backward
tower leaves one cached output row per position. Masked pixels are then filled in
raster order. Step n queries the forward tower with PE[j_n] at position
L^2 + n - 1 without committing it, fuses the result with the cached backward row
j_n, samples a color, and commits FE(color) + PE[j_n] at the same position.
Only forward states change after initialisation, so every step costs the same.

`complete_recompute` is the reference that re-runs the forward tower over the
whole generated context for every pixel; it gives the same distributions and
doubles as the linear-cost baseline of the benchmark.
"""

import copy
import time
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict

from retcomplete.biretnet import (
    ModelParams,
    TowerStates,
    backward_tower,
    forward_tower,
    forward_tower_with_state,
    fuse_predict,
    predict_logits,
    tower_step,
)
from retcomplete.config import CompletionMode, Paradigm, SamplingMode, SamplingPolicy
from retcomplete.errors import DimensionError, UsageError
from retcomplete.rng import stream
from retcomplete.sequencer import PixelSequence, embed
from retcomplete.tensor_core import Tensor, no_grad, reshape, softmax


def sample_color(probs: np.ndarray, policy: SamplingPolicy, rng: np.random.Generator) -> int:
    """
    Draw a palette index from a distribution.

    top1 takes the argmax (lowest index on ties). topk keeps the k most likely
    colors, sharpens them by 1/temperature and samples.
    """
    if SamplingMode(policy.mode) == SamplingMode.TOP1:
        return int(np.argmax(probs))
    keep = np.argsort(-probs, kind="stable")[: min(policy.top_k, len(probs))]
    weights = np.power(np.clip(probs[keep], 0.0, None), 1.0 / policy.temperature)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        return int(keep[0])
    return int(rng.choice(keep, p=weights / total))


def entropy(distributions: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row."""
    p = np.clip(np.asarray(distributions, dtype=np.float64), 1e-300, 1.0)
    return -(p * np.log(p)).sum(axis=-1)


class CompletionResult(BaseModel):
    """
    Filled token grid with the distribution each masked pixel was drawn from.

    Attributes:
        tokens: [L, L] completed palette indices
        positions: Masked positions in the order they were filled
        distributions: [n_masked, k] predicted distributions
        mode: pixelwise, simultaneous or recompute
        step_seconds: Wall-clock of every step (pixel-wise modes only)
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    tokens: np.ndarray
    positions: np.ndarray
    distributions: np.ndarray
    mode: str
    step_seconds: List[float] = []

    def entropy_map(self) -> np.ndarray:
        """[L, L] entropy per pixel, zero where nothing was predicted."""
        side = self.tokens.shape[0]
        grid = np.zeros(side * side)
        if len(self.positions):
            grid[self.positions] = entropy(self.distributions)
        return grid.reshape(side, side)


class InferenceSession:
    """
    State of one pixel-wise completion.

    Attributes:
        forward_states: Per-layer, per-head retention states of the forward tower
        backward_cache: [L^2, d] backward tower outputs of the initial sequence
        tokens: Current token sequence; masked entries are filled as steps run
        queue: Masked positions in raster order
        cursor: Number of steps taken
    """

    def __init__(
        self,
        params: ModelParams,
        seq: PixelSequence,
        forward_states: TowerStates,
        backward_cache: np.ndarray,
        policy: SamplingPolicy,
    ) -> None:
        self.params = params
        self.side = seq.side
        self.mask = seq.mask.copy()
        self.tokens = seq.tokens.copy()
        self.queue = seq.masked_positions()
        self.cursor = 0
        self.forward_states = forward_states
        self.backward_cache = backward_cache
        self.backward_cache.setflags(write=False)
        self.policy = policy
        self.rng = stream(policy.seed, "sampling")
        self.distributions: List[np.ndarray] = []
        self.step_seconds: List[float] = []

    def __repr__(self) -> str:
        return f"InferenceSession(side={self.side}, done={self.cursor}/{len(self.queue)})"

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.queue)

    @property
    def next_position(self) -> Optional[int]:
        return None if self.done else int(self.queue[self.cursor])

    @property
    def consumed(self) -> int:
        """Positions the forward states have absorbed (L^2 plus committed pixels)."""
        if not self.forward_states:
            return self.side * self.side + self.cursor
        return self.forward_states[0][0].step

    def clone(self) -> "InferenceSession":
        twin = copy.copy(self)
        twin.mask = self.mask.copy()
        twin.tokens = self.tokens.copy()
        twin.forward_states = [[s.clone() for s in layer] for layer in self.forward_states]
        twin.rng = copy.deepcopy(self.rng)
        twin.distributions = list(self.distributions)
        twin.step_seconds = list(self.step_seconds)
        return twin

    def result(self, mode: str = "pixelwise") -> CompletionResult:
        k = self.params.config.palette_size
        return CompletionResult(
            tokens=self.tokens.reshape(self.side, self.side).copy(),
            positions=self.queue[: self.cursor].copy(),
            distributions=np.array(self.distributions).reshape(-1, k),
            mode=mode,
            step_seconds=list(self.step_seconds),
        )


def _check_sequence(seq: PixelSequence, params: ModelParams) -> None:
    if seq.side != params.config.side:
        raise DimensionError(
            f"sequence side {seq.side} differs from model side {params.config.side}"
        )


def init_session(
    seq: PixelSequence, params: ModelParams, policy: Optional[SamplingPolicy] = None
) -> InferenceSession:
    """
    Build the forward states and the backward cache from the masked sequence.

    Raises:
        DimensionError: If the sequence does not fit the model
        VocabularyError: If a token is outside the palette
    """
    _check_sequence(seq, params)
    policy = policy or SamplingPolicy()
    started = time.perf_counter()
    with no_grad():
        X0 = embed(seq, params.embedding)
        _, states = forward_tower_with_state(X0, params.forward)
        cache = backward_tower(X0, params.backward, Paradigm.PARALLEL).data.copy()
    logger.debug(
        "Session initialised",
        side=seq.side,
        masked=seq.n_masked,
        ms=round((time.perf_counter() - started) * 1000.0, 2),
    )
    return InferenceSession(params, seq, states, cache, policy)


def _fused_distribution(xf: Tensor, backward_row: np.ndarray, params: ModelParams) -> np.ndarray:
    d = params.config.d_model
    return fuse_predict(reshape(xf, (1, d)), Tensor(backward_row.reshape(1, d)), params).data[0]


def step(session: InferenceSession, position: int) -> Tuple[int, InferenceSession]:
    """
    Predict, sample and commit the next masked pixel.

    Returns:
        The sampled palette index and the session, which is advanced in place

    Raises:
        UsageError: If `position` is not the next masked position in raster order
    """
    expected = session.next_position
    if expected is None or int(position) != expected:
        raise UsageError(f"step expected position {expected}, got {position}")
    started = time.perf_counter()
    params = session.params
    fe, pe = params.embedding.fe.data, params.embedding.pe.data
    with no_grad():
        query, _ = tower_step(Tensor(pe[position]), params.forward, session.forward_states)
        probs = _fused_distribution(query, session.backward_cache[position], params)
        color = sample_color(probs, session.policy, session.rng)
        _, session.forward_states = tower_step(
            Tensor(fe[color] + pe[position]), params.forward, session.forward_states
        )
    session.tokens[position] = color
    session.distributions.append(probs)
    session.cursor += 1
    session.step_seconds.append(time.perf_counter() - started)
    return color, session


def complete(
    seq: PixelSequence, params: ModelParams, policy: Optional[SamplingPolicy] = None
) -> CompletionResult:
    """Fill every masked pixel in raster order; unmasked tokens are returned untouched."""
    session = init_session(seq, params, policy)
    while not session.done:
        step(session, session.next_position)  # type: ignore[arg-type]
    logger.info("Completion finished", pixels=session.cursor, mode="pixelwise")
    return session.result("pixelwise")


def complete_simultaneous(
    seq: PixelSequence, params: ModelParams, policy: Optional[SamplingPolicy] = None
) -> CompletionResult:
    """Predict all masked pixels from one pass over the masked sequence."""
    _check_sequence(seq, params)
    policy = policy or SamplingPolicy()
    rng = stream(policy.seed, "sampling")
    positions = seq.masked_positions()
    with no_grad():
        probs = softmax(predict_logits(seq, params, Paradigm.PARALLEL), axis=-1).data
    tokens = seq.tokens.copy()
    for position in positions:
        tokens[position] = sample_color(probs[position], policy, rng)
    return CompletionResult(
        tokens=tokens.reshape(seq.side, seq.side),
        positions=positions,
        distributions=probs[positions].reshape(-1, params.config.palette_size),
        mode=CompletionMode.SIMULTANEOUS.value,
    )


class RecomputeSession:
    """
    Reference decoder that re-runs the forward tower over the generated context.

    With `reuse_prefix` the initial sequence enters as cached retention states and
    each step runs the parallel form over [committed pixels..., query]; otherwise
    the initial sequence is re-run as well.
    """

    def __init__(
        self,
        params: ModelParams,
        seq: PixelSequence,
        policy: SamplingPolicy,
        reuse_prefix: bool = True,
    ) -> None:
        _check_sequence(seq, params)
        self.params = params
        self.side = seq.side
        self.tokens = seq.tokens.copy()
        self.queue = seq.masked_positions()
        self.cursor = 0
        self.policy = policy
        self.rng = stream(policy.seed, "sampling")
        self.reuse_prefix = reuse_prefix
        self.committed: List[np.ndarray] = []
        self.distributions: List[np.ndarray] = []
        self.step_seconds: List[float] = []
        with no_grad():
            self.initial = embed(seq, params.embedding).data.copy()
            self.backward_cache = backward_tower(Tensor(self.initial), params.backward).data.copy()
            self.prefix_states: Optional[TowerStates] = None
            if reuse_prefix:
                _, self.prefix_states = forward_tower_with_state(
                    Tensor(self.initial), params.forward
                )

    @property
    def done(self) -> bool:
        return self.cursor >= len(self.queue)

    def step(self, forced: Optional[int] = None) -> int:
        """Predict the next masked pixel; `forced` replaces the sampled color."""
        if self.done:
            raise UsageError("recompute session has no masked pixels left")
        started = time.perf_counter()
        position = int(self.queue[self.cursor])
        params = self.params
        fe, pe = params.embedding.fe.data, params.embedding.pe.data
        context = np.stack(self.committed + [pe[position]])
        with no_grad():
            if self.reuse_prefix:
                out, _ = forward_tower_with_state(
                    Tensor(context), params.forward, self.prefix_states
                )
            else:
                out = forward_tower(Tensor(np.concatenate([self.initial, context])), params.forward)
            probs = _fused_distribution(out[-1], self.backward_cache[position], params)
        color = sample_color(probs, self.policy, self.rng) if forced is None else int(forced)
        self.committed.append(fe[color] + pe[position])
        self.tokens[position] = color
        self.distributions.append(probs)
        self.cursor += 1
        self.step_seconds.append(time.perf_counter() - started)
        return color

    def result(self) -> CompletionResult:
        return CompletionResult(
            tokens=self.tokens.reshape(self.side, self.side).copy(),
            positions=self.queue[: self.cursor].copy(),
            distributions=np.array(self.distributions).reshape(-1, self.params.config.palette_size),
            mode="recompute",
            step_seconds=list(self.step_seconds),
        )


def complete_recompute(
    seq: PixelSequence,
    params: ModelParams,
    policy: Optional[SamplingPolicy] = None,
    forced: Optional[Sequence[int]] = None,
    reuse_prefix: bool = True,
) -> CompletionResult:
    """
    Complete with a full forward-tower recompute per pixel.

    Args:
        forced: Colors to commit instead of sampling, one per masked pixel

    Raises:
        UsageError: If `forced` does not have one color per masked pixel
    """
    session = RecomputeSession(params, seq, policy or SamplingPolicy(), reuse_prefix)
    if forced is not None and len(forced) != len(session.queue):
        raise UsageError(
            f"forced colors cover {len(forced)} pixels, {len(session.queue)} are masked"
        )
    while not session.done:
        session.step(None if forced is None else forced[session.cursor])
    return session.result()
