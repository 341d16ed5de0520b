"""
Command-line entry point.

    retcomplete build-palette --corpus DIR --k 32 --out palette.bin
    retcomplete train --data DIR --palette palette.bin --out runs/a
    retcomplete complete --ckpt runs/a/final.rckpt --image img.png --mask-kind center --out out.png
    retcomplete upsample --ckpt up.rckpt --low out.png --orig img.png --mask mask.png --out full.png
    retcomplete bench --ratios 0.1,0.25,0.5,0.75 --reps 9 --out bench/

Exit codes: 0 ok, 1 runtime error, 2 usage error. Failures print one line on
stderr: `error: <ErrorClass>: <message>`.
"""

import os
import sys
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
import numpy as np
import typer
from loguru import logger
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from retcomplete.bench import emit_report, run_bench
from retcomplete.biretnet import ModelParams, model_from_checkpoint
from retcomplete.checkpoint import load_checkpoint, save_checkpoint
from retcomplete.config import (
    BenchConfig,
    CompletionMode,
    MaskKind,
    MaskSpec,
    PipelineConfig,
    SamplingPolicy,
    parse_config,
)
from retcomplete.errors import CheckpointError, ImageIOError, RetCompletionError, UsageError
from retcomplete.imageio import SUFFIXES, load_image, load_mask, save_gray, save_image
from retcomplete.inferencer import CompletionResult, complete, complete_simultaneous
from retcomplete.log import configure_logging
from retcomplete.masks import gen_mask, reduce_mask
from retcomplete.palette import Palette, fit_kmeans
from retcomplete.rng import stream
from retcomplete.sequencer import downsample, to_sequence
from retcomplete.tensor_core import set_precision
from retcomplete.trainer import build_token_dataset, train_loop
from retcomplete.upsampler import (
    UpsampleExample,
    UpsamplerParams,
    bilinear_upscale,
    refine,
    train_upsampler,
)

THREADS_ENV = "RETCOMPLETE_THREADS"

app = typer.Typer(
    name="retcomplete",
    help="Pixel-wise image completion with a bidirectional retention network.",
    add_completion=False,
    no_args_is_help=True,
)
console = Console()


class Stage(str, Enum):
    BIRETNET = "biretnet"
    UPSAMPLER = "upsampler"


LogLevelOption = typer.Option("WARNING", "--log-level", help="Log level (DEBUG, INFO, ...)")
PrecisionOption = typer.Option(None, "--precision", help="Float width: 32 or 64 [default: 64]")


def _setup(
    log_level: str, precision: Optional[int], pipeline: Optional[PipelineConfig] = None
) -> None:
    configure_logging(log_level)
    if precision is None:
        precision = pipeline.precision if pipeline is not None else 64
    if precision not in (32, 64):
        raise UsageError(f"--precision must be 32 or 64, got {precision}")
    set_precision(precision)


def _image_files(path: Path) -> List[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in SUFFIXES)
        if not files:
            raise UsageError(f"no .png/.ppm/.pgm images in {path}")
        return files
    if not path.exists():
        raise ImageIOError("image not found", path)
    return [path]


def _load_config(config: Optional[Path]) -> PipelineConfig:
    if config is None:
        return PipelineConfig()
    pipeline = parse_config(config)
    pipeline.check_paths()
    return pipeline


def _load_model(ckpt: Path) -> Tuple[ModelParams, Palette]:
    params, palette = model_from_checkpoint(load_checkpoint(ckpt, kind="biretnet"))
    if palette is None:
        raise CheckpointError(f"checkpoint {ckpt} carries no palette")
    return params, palette


@app.callback()
def main_callback() -> None:
    """Pixel-wise image completion with a bidirectional retention network."""


@app.command("build-palette")
def build_palette(
    corpus: Path = typer.Option(..., "--corpus", help="Image file or directory of images"),
    k: int = typer.Option(32, "--k", min=1, help="Number of palette colors"),
    out: Path = typer.Option(..., "--out", help="Palette file to write"),
    max_iters: int = typer.Option(100, "--max-iters", min=1, help="K-Means iteration cap"),
    side: Optional[int] = typer.Option(
        None, "--side", min=1, help="Downsample images to side x side before clustering"
    ),
    seed: int = typer.Option(0, "--seed", help="Invocation seed"),
    log_level: str = LogLevelOption,
    precision: Optional[int] = PrecisionOption,
) -> None:
    """Cluster the colors of a corpus into a K-Means palette."""
    _setup(log_level, precision)
    images = [load_image(p) for p in _image_files(corpus)]
    if side is not None:
        images = [downsample(img, side) for img in images]
    pixels = np.concatenate([img.reshape(-1, 3) for img in images])
    palette = fit_kmeans(pixels, k, max_iters=max_iters, seed=seed)
    palette.save(out)
    typer.echo(f"{out} {palette.digest()}")


def _upsampler_examples(
    images: Sequence[np.ndarray], pipeline: PipelineConfig, palette: Optional[Palette], seed: int
) -> List[UpsampleExample]:
    side = pipeline.model.side
    examples = []
    for index, img in enumerate(images):
        spec = MaskSpec(
            kind=MaskKind(pipeline.mask.kind),
            ratio=pipeline.mask.ratio,
            seed=int(stream(seed, "masks", index).integers(2**31)),
        )
        grid = gen_mask(spec, side)
        rows = np.arange(img.shape[0]) * side // img.shape[0]
        cols = np.arange(img.shape[1]) * side // img.shape[1]
        examples.append(UpsampleExample.simulate(img, side, grid[np.ix_(rows, cols)], palette))
    return examples


@app.command("train")
def train(
    config: Optional[Path] = typer.Option(None, "--config", help="key = value config file"),
    data: Optional[Path] = typer.Option(None, "--data", help="Training image directory"),
    palette_path: Optional[Path] = typer.Option(None, "--palette", help="Palette file"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
    stage: Stage = typer.Option(Stage.BIRETNET, "--stage", help="Which network to train"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Checkpoint to resume from"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Invocation seed"),
    log_level: str = LogLevelOption,
    precision: Optional[int] = PrecisionOption,
) -> None:
    """Train the Bi-RetNet (masked-pixel objective) or the guided upsampler."""
    pipeline = _load_config(config)
    _setup(log_level, precision, pipeline)
    data = data or pipeline.paths.data
    palette_path = palette_path or pipeline.paths.palette
    out = out or pipeline.paths.out
    seed = pipeline.seed if seed is None else seed
    if data is None or out is None:
        raise UsageError("train needs --data and --out (or paths.data / paths.out in --config)")
    images = [load_image(p) for p in _image_files(data)]
    palette = Palette.load(palette_path) if palette_path is not None else None

    if stage == Stage.UPSAMPLER:
        train_cfg = pipeline.upsampler_train.model_copy(update={"seed": seed})
        params = train_upsampler(
            _upsampler_examples(images, pipeline, palette, seed), train_cfg, pipeline.upsampler
        )
        checkpoint = params.to_checkpoint({"steps": train_cfg.steps})
        target = save_checkpoint(checkpoint, out / "upsampler.rckpt")
        typer.echo(str(target))
        return

    if palette is None:
        raise UsageError("training the Bi-RetNet needs --palette")
    model = pipeline.model
    if model.palette_size != palette.k:
        model = model.model_copy(update={"palette_size": palette.k})
        logger.info("Palette size taken from the palette file", k=palette.k)
    dataset = build_token_dataset(images, palette, model.side)
    train_cfg = pipeline.train.model_copy(update={"seed": seed})
    final = train_loop(dataset, train_cfg, model, out, palette=palette, resume=resume)
    typer.echo(str(final))


def _complete_one(
    image_path: Path,
    out_path: Path,
    params: ModelParams,
    palette: Palette,
    mask_path: Optional[Path],
    spec: MaskSpec,
    policy: SamplingPolicy,
    mode: CompletionMode,
    entropy_path: Optional[Path],
) -> Path:
    img = load_image(image_path)
    side = params.config.side
    if mask_path is not None:
        grid = reduce_mask(load_mask(mask_path, img.shape[:2]), side)
    else:
        grid = gen_mask(spec, side)
    seq = to_sequence(downsample(img, side), palette, grid)
    result: CompletionResult
    if mode == CompletionMode.SIMULTANEOUS:
        result = complete_simultaneous(seq, params, policy)
    else:
        result = complete(seq, params, policy)
    save_image(palette.dequantize(result.tokens), out_path)
    if entropy_path is not None:
        save_gray(result.entropy_map(), entropy_path)
    logger.info(
        "Image completed", image=str(image_path), out=str(out_path), pixels=len(result.positions)
    )
    return out_path


def _worker_count(jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    try:
        limit = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV} must be an integer, got '{raw}'") from exc
    return max(1, min(limit, jobs))


@app.command("complete")
def complete_cmd(
    ckpt: Path = typer.Option(..., "--ckpt", help="Bi-RetNet checkpoint"),
    image: Path = typer.Option(..., "--image", help="Image file or directory"),
    out: Path = typer.Option(..., "--out", help="Output image (or directory for --image DIR)"),
    mask: Optional[Path] = typer.Option(None, "--mask", help="Mask image; white = missing"),
    mask_kind: MaskKind = typer.Option(MaskKind.CENTER, "--mask-kind", help="Generated mask kind"),
    mask_ratio: float = typer.Option(0.5, "--mask-ratio", help="Generated mask coverage"),
    mask_seed: Optional[int] = typer.Option(None, "--mask-seed", help="Seed of the generated mask"),
    policy_text: str = typer.Option("top1", "--policy", help="top1 or topk:K:T"),
    seed: int = typer.Option(0, "--seed", help="Invocation seed"),
    mode: CompletionMode = typer.Option(
        CompletionMode.PIXELWISE, "--mode", help="Inference strategy"
    ),
    entropy_path: Optional[Path] = typer.Option(
        None, "--entropy", help="Write a per-pixel entropy map"
    ),
    log_level: str = LogLevelOption,
    precision: Optional[int] = PrecisionOption,
) -> None:
    """Fill the masked pixels of one image or of every image in a directory."""
    _setup(log_level, precision)
    params, palette = _load_model(ckpt)
    policy = SamplingPolicy.parse(policy_text, seed=seed)
    spec = MaskSpec(kind=mask_kind, ratio=mask_ratio, seed=seed if mask_seed is None else mask_seed)
    images = _image_files(image)
    if not image.is_dir():
        _complete_one(image, out, params, palette, mask, spec, policy, mode, entropy_path)
        typer.echo(str(out))
        return

    if entropy_path is not None:
        entropy_path.mkdir(parents=True, exist_ok=True)
    jobs = [
        (
            path,
            out / f"{path.stem}.png",
            None if entropy_path is None else entropy_path / f"{path.stem}.pgm",
        )
        for path in images
    ]
    with ThreadPoolExecutor(max_workers=_worker_count(len(jobs))) as pool:
        futures = [
            pool.submit(_complete_one, src, dst, params, palette, mask, spec, policy, mode, ent)
            for src, dst, ent in jobs
        ]
        written = [future.result() for future in futures]
    for path in written:
        typer.echo(str(path))


@app.command("upsample")
def upsample(
    ckpt: Path = typer.Option(..., "--ckpt", help="Upsampler checkpoint"),
    low: Path = typer.Option(..., "--low", help="Completed low-resolution image"),
    orig: Path = typer.Option(..., "--orig", help="Original full-resolution image"),
    mask: Path = typer.Option(..., "--mask", help="Full-resolution mask; white = missing"),
    out: Path = typer.Option(..., "--out", help="Output image"),
    log_level: str = LogLevelOption,
    precision: Optional[int] = PrecisionOption,
) -> None:
    """Upscale a completed image and refine it against the known pixels."""
    _setup(log_level, precision)
    params = UpsamplerParams.from_checkpoint(load_checkpoint(ckpt, kind="upsampler"))
    original = load_image(orig)
    full_mask = load_mask(mask, original.shape[:2])
    upscaled = bilinear_upscale(load_image(low), original.shape[0], original.shape[1])
    save_image(refine(upscaled, original, full_mask, params), out)
    typer.echo(str(out))


@app.command("bench")
def bench(
    ckpt: Optional[Path] = typer.Option(
        None, "--ckpt", help="Checkpoint to time; random init if omitted"
    ),
    ratios: str = typer.Option("0.1,0.25,0.5,0.75", "--ratios", help="Comma-separated mask ratios"),
    reps: int = typer.Option(9, "--reps", help="Timed repetitions (at least 5)"),
    warmup: int = typer.Option(1, "--warmup", help="Untimed repetitions"),
    out: Path = typer.Option(..., "--out", help="Directory for bench.csv and bench.dat"),
    side: int = typer.Option(32, "--side", help="Image side of the random model"),
    seed: int = typer.Option(0, "--seed", help="Invocation seed"),
    log_level: str = LogLevelOption,
    precision: Optional[int] = PrecisionOption,
) -> None:
    """Time recurrent decoding against the full-recompute baseline."""
    _setup(log_level, precision)
    params = _load_model(ckpt)[0] if ckpt is not None else None
    defaults = BenchConfig()
    cfg = BenchConfig.model_validate(
        {
            "model": defaults.model.model_copy(update={"side": side}).model_dump(),
            "ratios": ratios,
            "reps": reps,
            "warmup": warmup,
            "seed": seed,
        }
    )
    run = run_bench(cfg, params)
    csv_path, _ = emit_report(run, out)

    table = Table(title=f"Per-pixel latency (ms), L={run.model.side}")
    for column in ("method", "ratio", "pixels", "median", "p25", "p75"):
        table.add_column(column, justify="right")
    for item in run.results:
        table.add_row(
            item.method,
            f"{item.mask_ratio:.2f}",
            str(item.pixels),
            f"{item.median_ms:.3f}",
            f"{item.p25_ms:.3f}",
            f"{item.p75_ms:.3f}",
        )
    console.print(table)
    typer.echo(str(csv_path))


def _one_line(exc: BaseException) -> str:
    message = " ".join(str(exc).split())
    return f"error: {type(exc).__name__}: {message}"


def dispatch(argv: Sequence[str]) -> int:
    """Run the CLI on `argv` and return the exit code instead of exiting."""
    command = typer.main.get_command(app)
    try:
        result = command.main(args=list(argv), prog_name="retcomplete", standalone_mode=False)
    except click.exceptions.UsageError as exc:
        typer.echo(_one_line(exc), err=True)
        return 2
    except click.exceptions.Abort:
        typer.echo("error: Abort: interrupted", err=True)
        return 1
    except (UsageError, ValidationError) as exc:
        typer.echo(_one_line(exc), err=True)
        return 2
    except (RetCompletionError, OSError) as exc:
        typer.echo(_one_line(exc), err=True)
        return 1
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
