"""
Latency of pixel-wise completion against the mask ratio.

Two decoders are timed on the same deterministic workload:
- recurrent: the session API, one retention-state update per pixel
- recompute: the forward tower re-run over the whole generated context per pixel

Before any timing, both decoders must agree when fed the same colors. Only the
per-pixel step loop is timed; session set-up is logged separately.
Native BLAS pools are capped at one thread for the whole run.
"""

import csv
import time
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field
from threadpoolctl import threadpool_limits

from retcomplete.biretnet import ModelParams, init_params
from retcomplete.config import BenchConfig, MaskKind, MaskSpec, ModelConfig, SamplingPolicy
from retcomplete.errors import BenchError
from retcomplete.inferencer import (
    RecomputeSession,
    complete,
    complete_recompute,
    init_session,
    step,
)
from retcomplete.masks import gen_mask
from retcomplete.rng import stream
from retcomplete.sequencer import PixelSequence

METHODS = ("recurrent", "recompute")
CSV_COLUMNS = ("method", "mask_ratio", "median_ms", "p25_ms", "p75_ms")
AGREEMENT_ATOL = 1e-4
MIN_TICKS = 100


class BenchResult(BaseModel):
    """Per-pixel step latency of one method at one mask ratio."""

    model_config = ConfigDict(frozen=True)

    method: str
    mask_ratio: float = Field(ge=0.0, lt=1.0)
    pixels: int = Field(ge=0)
    median_ms: float = Field(ge=0.0)
    p25_ms: float = Field(ge=0.0)
    p75_ms: float = Field(ge=0.0)
    init_ms: float = Field(default=0.0, ge=0.0)


class BenchRun(BaseModel):
    """A complete benchmark: workload description plus one result per (method, ratio)."""

    model_config = ConfigDict(frozen=True)

    model: ModelConfig
    ratios: List[float]
    reps: int = Field(ge=5)
    warmup: int = Field(ge=0)
    timer_resolution_ms: float = Field(ge=0.0)
    results: List[BenchResult] = Field(default_factory=list)

    def result(self, method: str, ratio: float) -> BenchResult:
        for item in self.results:
            if item.method == method and item.mask_ratio == ratio:
                return item
        raise KeyError((method, ratio))


def timer_resolution() -> float:
    """Resolution of the monotonic clock, in seconds."""
    return float(time.get_clock_info("perf_counter").resolution)


def bench_sequence(cfg: BenchConfig, model: ModelConfig, ratio: float) -> PixelSequence:
    """Random tokens with a mask of the requested ratio; ratio 0 masks nothing."""
    rng = stream(cfg.seed, "masks", int(round(ratio * 1e6)))
    tokens = rng.integers(0, model.palette_size, size=(model.side, model.side))
    if ratio == 0.0:
        mask = np.zeros((model.side, model.side), dtype=np.uint8)
    else:
        spec = MaskSpec(kind=MaskKind(cfg.mask_kind), ratio=ratio, seed=cfg.seed)
        mask = gen_mask(spec, model.side)
    return PixelSequence.from_grids(tokens, mask)


def check_agreement(seq: PixelSequence, params: ModelParams, atol: float = AGREEMENT_ATOL) -> None:
    """
    Run both decoders with top-1 sampling, forcing the recompute decoder to the
    recurrent colors, and compare colors and distributions.

    Raises:
        BenchError: If colors differ or any probability differs by more than `atol`
    """
    policy = SamplingPolicy()
    recurrent = complete(seq, params, policy)
    forced = recurrent.tokens.reshape(-1)[recurrent.positions]
    oracle = complete_recompute(seq, params, policy, forced=[int(c) for c in forced])
    if not np.array_equal(recurrent.tokens, oracle.tokens):
        raise BenchError("recurrent and recompute decoders disagree on colors")
    if recurrent.distributions.size:
        gap = float(np.max(np.abs(recurrent.distributions - oracle.distributions)))
        if gap > atol:
            raise BenchError(f"recurrent and recompute distributions differ by {gap:.3g}")


def _time_once(method: str, seq: PixelSequence, params: ModelParams) -> Tuple[float, float]:
    """(set-up seconds, step-loop seconds) of one completion."""
    policy = SamplingPolicy()
    if method == "recurrent":
        started = time.perf_counter()
        session = init_session(seq, params, policy)
        ready = time.perf_counter()
        while not session.done:
            step(session, session.next_position)  # type: ignore[arg-type]
    else:
        started = time.perf_counter()
        baseline = RecomputeSession(params, seq, policy)
        ready = time.perf_counter()
        while not baseline.done:
            baseline.step()
    return ready - started, time.perf_counter() - ready


def _measure(
    method: str, seq: PixelSequence, params: ModelParams, cfg: BenchConfig, ratio: float
) -> BenchResult:
    for _ in range(cfg.warmup):
        _time_once(method, seq, params)
    init_times, per_pixel = [], []
    pixels = seq.n_masked
    for _ in range(cfg.reps):
        init_s, loop_s = _time_once(method, seq, params)
        init_times.append(init_s)
        per_pixel.append(loop_s * 1000.0 / max(pixels, 1))
    p25, median, p75 = np.percentile(per_pixel, [25, 50, 75])
    return BenchResult(
        method=method,
        mask_ratio=ratio,
        pixels=pixels,
        median_ms=float(median),
        p25_ms=float(p25),
        p75_ms=float(p75),
        init_ms=float(np.median(init_times)) * 1000.0,
    )


def _bench_ratio(
    ratio: float, cfg: BenchConfig, params: ModelParams, resolution: float
) -> List[BenchResult]:
    seq = bench_sequence(cfg, params.config, ratio)
    check_agreement(seq, params)
    results = []
    for method in METHODS:
        result = _measure(method, seq, params, cfg, ratio)
        if result.pixels and result.median_ms * result.pixels < MIN_TICKS * resolution * 1000.0:
            raise BenchError(
                f"timer resolution {resolution:.3g}s is too coarse for {result.pixels} pixels; "
                "use a larger side"
            )
        logger.info(
            "Bench result",
            method=method,
            ratio=ratio,
            pixels=result.pixels,
            median_ms=round(result.median_ms, 4),
            init_ms=round(result.init_ms, 2),
        )
        results.append(result)
    return results


def run_bench(cfg: BenchConfig, params: Optional[ModelParams] = None) -> BenchRun:
    """
    Time both decoders at every mask ratio of `cfg`.

    Args:
        cfg: Workload, repetitions and seed
        params: Model to time; a freshly initialised `cfg.model` when omitted

    Raises:
        BenchError: If the decoders disagree or the clock is too coarse for the workload
    """
    params = params or init_params(cfg.model, seed=cfg.seed)
    model = params.config
    resolution = timer_resolution()
    results = []
    with threadpool_limits(limits=1):
        for ratio in cfg.ratios:
            results.extend(_bench_ratio(ratio, cfg, params, resolution))
    return BenchRun(
        model=model,
        ratios=list(cfg.ratios),
        reps=cfg.reps,
        warmup=cfg.warmup,
        timer_resolution_ms=resolution * 1000.0,
        results=results,
    )


def emit_report(run: BenchRun, out_dir: Union[str, Path]) -> Tuple[Path, Path]:
    """
    Write `bench.csv` (one row per method and ratio) and `bench.dat`
    (one gnuplot row per ratio with every method's median and quartiles).

    Raises:
        BenchError: If the files cannot be written
    """
    out_dir = Path(out_dir)
    csv_path, dat_path = out_dir / "bench.csv", out_dir / "bench.dat"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with csv_path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for item in run.results:
                writer.writerow(
                    [
                        item.method,
                        f"{item.mask_ratio:.6f}",
                        f"{item.median_ms:.6f}",
                        f"{item.p25_ms:.6f}",
                        f"{item.p75_ms:.6f}",
                    ]
                )
        methods = [m for m in METHODS if any(r.method == m for r in run.results)]
        columns = [f"{m}_{q}" for m in methods for q in ("median", "p25", "p75")]
        lines = ["# mask_ratio " + " ".join(columns)]
        for ratio in run.ratios:
            values = []
            for method in methods:
                item = run.result(method, ratio)
                values += [item.median_ms, item.p25_ms, item.p75_ms]
            lines.append(" ".join([f"{ratio:.6f}"] + [f"{v:.6f}" for v in values]))
        dat_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise BenchError(f"cannot write bench report to {out_dir}: {exc}") from exc
    return csv_path, dat_path
