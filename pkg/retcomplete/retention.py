"""
Multi-scale retention in its parallel, recurrent and chunkwise forms.

All three forms compute, for one head,

    o_n = sum_{m <= n} gamma^(n-m) (q_n . k_m) v_m

with q and k rotated by their absolute position. The recurrent form carries the
d_head x d_head state S_n = gamma S_{n-1} + k_n^T v_n, which makes decoding cost
independent of n.
"""

from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

from retcomplete.config import Paradigm
from retcomplete.errors import DimensionError, UsageError
from retcomplete.tensor_core import (
    NORM_EPS,
    Tensor,
    concat,
    get_dtype,
    getitem,
    group_norm,
    matmul,
    mul,
    outer,
    reshape,
    swish,
    transpose,
)


def decay_gammas(heads: int) -> List[float]:
    """Per-head decay rates 1 - 2^(-5-i)."""
    return [1.0 - 2.0 ** (-5 - i) for i in range(heads)]


def rotation_frequencies(d_head: int, base: float = 10000.0) -> np.ndarray:
    """theta_j = base^(-2j / d_head) for each of the d_head // 2 rotated pairs."""
    return base ** (-2.0 * np.arange(d_head // 2) / d_head)


def decay_matrix(length: int, gamma: float) -> np.ndarray:
    """Causal decay D[n, m] = gamma^(n-m) for n >= m, else 0."""
    if not 0.0 < gamma <= 1.0:
        raise UsageError(f"decay must be in (0, 1], got {gamma}")
    idx = np.arange(length)
    diff = idx[:, None] - idx[None, :]
    return np.where(diff >= 0, gamma ** np.maximum(diff, 0), 0.0).astype(get_dtype())


@lru_cache(maxsize=64)
def _pair_swap(d_head: int, dtype: str) -> np.ndarray:
    swap = np.zeros((d_head, d_head), dtype=dtype)
    for j in range(d_head // 2):
        swap[2 * j + 1, 2 * j] = 1.0
        swap[2 * j, 2 * j + 1] = 1.0
    swap.setflags(write=False)
    return swap


def _rotation_tables(
    positions: np.ndarray, theta: np.ndarray, d_head: int
) -> Tuple[np.ndarray, np.ndarray]:
    angles = positions[:, None].astype(np.float64) * theta[None, :]
    pairs = 2 * len(theta)
    cos = np.ones((len(positions), d_head))
    sin = np.zeros((len(positions), d_head))
    cos[:, 0:pairs:2] = np.cos(angles)
    cos[:, 1:pairs:2] = np.cos(angles)
    sin[:, 0:pairs:2] = -np.sin(angles)
    sin[:, 1:pairs:2] = np.sin(angles)
    return cos.astype(get_dtype()), sin.astype(get_dtype())


def rotate(x: Tensor, positions: np.ndarray, theta: np.ndarray) -> Tensor:
    """
    Rotate consecutive feature pairs of x by position * theta.

    x is [n, d_head] with one row per entry of `positions`, or [d_head] with a
    single position. An odd trailing feature is left unrotated.
    """
    d_head = x.shape[-1]
    positions = np.atleast_1d(np.asarray(positions))
    cos, sin = _rotation_tables(positions, theta, d_head)
    if x.ndim == 1:
        cos, sin = cos[0], sin[0]
    swapped = matmul(x, _pair_swap(d_head, get_dtype().name))
    return x * cos + swapped * sin


class RetentionHeadParams:
    """
    Projections and positional constants of one retention head.

    Attributes:
        w_q, w_k, w_v: [d_head, d_head] projections
        gamma: Decay rate in (0, 1)
        theta: Rotation frequencies, d_head // 2 entries
    """

    __slots__ = ("w_q", "w_k", "w_v", "gamma", "theta")

    def __init__(
        self, w_q: Tensor, w_k: Tensor, w_v: Tensor, gamma: float, theta: np.ndarray
    ) -> None:
        d_head = w_q.shape[0]
        for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
            if w.shape != (d_head, d_head):
                raise DimensionError(f"{name} must be {d_head}x{d_head}, got {w.shape}")
        if not 0.0 < gamma < 1.0:
            raise UsageError(f"gamma must be in (0, 1), got {gamma}")
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (d_head // 2,):
            raise DimensionError(f"theta must have {d_head // 2} entries, got {theta.shape}")
        self.w_q, self.w_k, self.w_v = w_q, w_k, w_v
        self.gamma = float(gamma)
        self.theta = theta

    @property
    def d_head(self) -> int:
        return self.w_q.shape[0]


class RetentionState:
    """
    Recurrent state of one head: S after `step` positions.

    The state size is d_head x d_head whatever the number of positions consumed.
    """

    __slots__ = ("S", "step")

    def __init__(self, S: Tensor, step: int) -> None:
        self.S = S
        self.step = int(step)

    def __repr__(self) -> str:
        return f"RetentionState(d_head={self.S.shape[0]}, step={self.step})"

    @classmethod
    def empty(cls, d_head: int) -> "RetentionState":
        return cls(Tensor(np.zeros((d_head, d_head))), 0)

    def clone(self) -> "RetentionState":
        return RetentionState(Tensor(self.S.data.copy()), self.step)

    @property
    def nbytes(self) -> int:
        return int(self.S.data.nbytes)


def _check_input(X: Tensor, params: RetentionHeadParams) -> None:
    if X.ndim != 2 or X.shape[1] != params.d_head:
        raise DimensionError(f"retention input must be [L, {params.d_head}], got {X.shape}")
    if X.shape[0] < 1:
        raise DimensionError("retention input must hold at least one position")


def _project(
    X: Tensor, params: RetentionHeadParams, positions: np.ndarray
) -> Tuple[Tensor, Tensor, Tensor]:
    q = rotate(matmul(X, params.w_q), positions, params.theta)
    k = rotate(matmul(X, params.w_k), positions, params.theta)
    v = matmul(X, params.w_v)
    return q, k, v


def retain(q: Tensor, k: Tensor, v: Tensor, decay: np.ndarray) -> Tensor:
    """((q k^T) * D) v for already projected and rotated inputs."""
    return matmul(mul(matmul(q, transpose(k)), decay), v)


def retention_parallel(X: Tensor, params: RetentionHeadParams, offset: int = 0) -> Tensor:
    """
    Parallel form over a whole sequence, [L, d_head] -> [L, d_head].

    Args:
        X: Head input
        params: Head parameters
        offset: Absolute position of the first row
    """
    _check_input(X, params)
    length = X.shape[0]
    q, k, v = _project(X, params, offset + np.arange(length))
    return retain(q, k, v, decay_matrix(length, params.gamma))


def retention_recurrent_step(
    x_n: Tensor, state: RetentionState, params: RetentionHeadParams
) -> Tuple[Tensor, RetentionState]:
    """
    Consume one position: S' = gamma S + k^T v, o = q S'.

    The input state is left untouched.
    """
    if x_n.shape != (params.d_head,):
        raise DimensionError(f"recurrent input must be [{params.d_head}], got {x_n.shape}")
    position = state.step
    q = rotate(matmul(x_n, params.w_q), position, params.theta)
    k = rotate(matmul(x_n, params.w_k), position, params.theta)
    v = matmul(x_n, params.w_v)
    S = state.S * params.gamma + outer(k, v)
    return matmul(q, S), RetentionState(S, position + 1)


def retention_recurrent(
    X: Tensor, params: RetentionHeadParams, state: Optional[RetentionState] = None
) -> Tuple[Tensor, RetentionState]:
    """Step through every row of X; returns the stacked outputs and the final state."""
    _check_input(X, params)
    state = state or RetentionState.empty(params.d_head)
    rows = []
    for n in range(X.shape[0]):
        o, state = retention_recurrent_step(getitem(X, n), state, params)
        rows.append(reshape(o, (1, params.d_head)))
    return concat(rows, axis=0), state


def retention_chunk(
    X: Tensor, params: RetentionHeadParams, state: RetentionState
) -> Tuple[Tensor, RetentionState]:
    """
    Process one chunk with a carried state.

    Inside the chunk the parallel form runs; the carried state contributes
    gamma^(i+1) q_i S, and the new state is gamma^b S + sum_j gamma^(b-1-j) k_j^T v_j.
    """
    _check_input(X, params)
    size = X.shape[0]
    gamma = params.gamma
    q, k, v = _project(X, params, state.step + np.arange(size))
    inner = retain(q, k, v, decay_matrix(size, gamma))
    i = np.arange(size)
    carried_in = (gamma ** (i + 1.0))[:, None].astype(get_dtype())
    carried_out = (gamma ** (size - 1.0 - i))[:, None].astype(get_dtype())
    cross = matmul(q * carried_in, state.S)
    S = state.S * gamma**size + matmul(transpose(k * carried_out), v)
    return inner + cross, RetentionState(S, state.step + size)


def retention_chunkwise(
    X: Tensor,
    chunk: int,
    params: RetentionHeadParams,
    state: Optional[RetentionState] = None,
) -> Tensor:
    """
    Chunkwise recurrent form; equals `retention_parallel` for any chunk size.

    Raises:
        UsageError: If chunk is outside [1, L]
    """
    out, _ = _chunkwise(X, chunk, params, state)
    return out


def _chunkwise(
    X: Tensor, chunk: int, params: RetentionHeadParams, state: Optional[RetentionState]
) -> Tuple[Tensor, RetentionState]:
    _check_input(X, params)
    length = X.shape[0]
    if not 1 <= chunk <= length:
        raise UsageError(f"chunk size must be in [1, {length}], got {chunk}")
    state = state or RetentionState.empty(params.d_head)
    outputs = []
    for start in range(0, length, chunk):
        out, state = retention_chunk(getitem(X, slice(start, start + chunk)), params, state)
        outputs.append(out)
    return (outputs[0] if len(outputs) == 1 else concat(outputs, axis=0)), state


class MSRParams:
    """
    One multi-scale retention layer.

    Attributes:
        heads: Per-head parameters; head i reads feature slice i of the input
        gn_gamma, gn_beta: [d] GroupNorm affine
        w_g: [d, d] gate projection
        w_o: [d, d] output projection
    """

    __slots__ = ("heads", "gn_gamma", "gn_beta", "w_g", "w_o")

    def __init__(
        self,
        heads: Sequence[RetentionHeadParams],
        gn_gamma: Tensor,
        gn_beta: Tensor,
        w_g: Tensor,
        w_o: Tensor,
    ) -> None:
        if not heads:
            raise DimensionError("MSR needs at least one head")
        d_model = sum(h.d_head for h in heads)
        if len({h.d_head for h in heads}) != 1:
            raise DimensionError("all heads must share d_head")
        for name, w in (("w_g", w_g), ("w_o", w_o)):
            if w.shape != (d_model, d_model):
                raise DimensionError(f"{name} must be {d_model}x{d_model}, got {w.shape}")
        self.heads = list(heads)
        self.gn_gamma, self.gn_beta = gn_gamma, gn_beta
        self.w_g, self.w_o = w_g, w_o

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def d_head(self) -> int:
        return self.heads[0].d_head

    @property
    def d_model(self) -> int:
        return self.n_heads * self.d_head

    def empty_states(self) -> List[RetentionState]:
        return [RetentionState.empty(self.d_head) for _ in self.heads]


def _head_slice(X: Tensor, i: int, d_head: int) -> Tensor:
    return getitem(X, (Ellipsis, slice(i * d_head, (i + 1) * d_head)))


def _msr_output(X: Tensor, heads_out: List[Tensor], params: MSRParams) -> Tensor:
    joined = concat(heads_out, axis=-1)
    y = group_norm(joined, params.n_heads, params.gn_gamma, params.gn_beta, NORM_EPS)
    return matmul(swish(matmul(X, params.w_g)) * y, params.w_o)


def _check_msr_input(X: Tensor, params: MSRParams) -> None:
    if X.shape[-1] != params.d_model:
        raise DimensionError(f"MSR input width {X.shape[-1]} differs from d_model {params.d_model}")


def msr(
    X: Tensor,
    params: MSRParams,
    paradigm: Paradigm = Paradigm.PARALLEL,
    chunk: Optional[int] = None,
) -> Tensor:
    """
    Multi-scale retention over [L, d] starting at position 0.

    Heads run in the selected paradigm, are concatenated and group-normalised,
    then gated by swish(X W_G) and projected by W_O.
    """
    _check_msr_input(X, params)
    paradigm = Paradigm(paradigm)
    length = X.shape[0]
    outputs = []
    for i, head in enumerate(params.heads):
        Xi = _head_slice(X, i, params.d_head)
        if paradigm == Paradigm.PARALLEL:
            outputs.append(retention_parallel(Xi, head))
        elif paradigm == Paradigm.CHUNKWISE:
            outputs.append(retention_chunkwise(Xi, min(chunk or length, length), head))
        else:
            outputs.append(retention_recurrent(Xi, head)[0])
    return _msr_output(X, outputs, params)


def msr_with_state(
    X: Tensor, params: MSRParams, states: Optional[List[RetentionState]] = None
) -> Tuple[Tensor, List[RetentionState]]:
    """Run [L, d] as one chunk after the given per-head states; returns the advanced states."""
    _check_msr_input(X, params)
    states = states if states is not None else params.empty_states()
    outputs, advanced = [], []
    for i, (head, state) in enumerate(zip(params.heads, states)):
        out, new_state = retention_chunk(_head_slice(X, i, params.d_head), head, state)
        outputs.append(out)
        advanced.append(new_state)
    return _msr_output(X, outputs, params), advanced


def msr_step(
    x: Tensor, params: MSRParams, states: List[RetentionState]
) -> Tuple[Tensor, List[RetentionState]]:
    """Recurrent MSR for a single position [d]."""
    _check_msr_input(x, params)
    outputs, advanced = [], []
    for i, (head, state) in enumerate(zip(params.heads, states)):
        out, new_state = retention_recurrent_step(_head_slice(x, i, params.d_head), state, head)
        outputs.append(out)
        advanced.append(new_state)
    return _msr_output(x, outputs, params), advanced
