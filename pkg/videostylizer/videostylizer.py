"""Main entry point of VideoStylizer."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import dataclasses
import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
from loguru import logger

from videostylizer.checkpoint import META_FILE, Checkpoint
from videostylizer.errors import CompatibilityError, ConfigurationError, StylizerError
from videostylizer.infer import StylizationPipeline, stylize_video
from videostylizer.metrics import benchmark_latency, compare_outputs, evaluate, report_params
from videostylizer.nets import (
    NetConfig,
    SequentialRefiner,
    UNetTranslator,
    freeze,
    load_generator,
    load_refiner,
    load_translator,
)
from videostylizer.stylizer_config import Config
from videostylizer.synthdata import SceneTruth, VideoSequence, render_video, sample_scene
from videostylizer.train import (
    PairMode,
    TrainingLog,
    build_pseudo_pairs,
    finetune_target_generator,
    train_refiner,
    train_source_generator,
    train_translator,
)
from videostylizer.utils import (
    CompatibilityStatus,
    checkpoints_work_together,
    generate_dataset,
    list_scenes,
    read_frames,
    read_truth,
    seed_everything,
    write_frames,
)

# VERSION number
VERSION = "0.1.0"

TRAIN_LOG = "train_log.csv"
BENCH_FRAMES = 16

cfg_option = click.option(
    "--cfg", type=str, default=None, help="Config file, or the name of a bundled config."
)
seed_option = click.option("--seed", type=int, default=None, help="Override the `seed` key.")


def _load_config(cfg: Optional[str], **overrides) -> Config:
    config = Config.load(cfg, overrides)
    seed_everything(config["seed"])
    return config


def _checkpoint_dir(path: Path, stage_dir: str) -> Path:
    """A checkpoint directory, or the stage subdirectory of a training output root."""
    if not (path / META_FILE).is_file() and (path / stage_dir / META_FILE).is_file():
        return path / stage_dir
    return path


def _load_deploy_stack(
    translator_path: Path, refiner_path: Optional[Path], no_refiner: bool
) -> Tuple[UNetTranslator, Optional[SequentialRefiner]]:
    translator_ckpt = Checkpoint.load(_checkpoint_dir(translator_path, "translator"))
    translator = freeze(load_translator(translator_ckpt))
    if no_refiner:
        return translator, None
    if refiner_path is None:
        raise ConfigurationError("--refiner is required unless --no-refiner is given.")
    refiner_ckpt = Checkpoint.load(_checkpoint_dir(refiner_path, "refiner"))
    check = checkpoints_work_together(translator_ckpt, refiner_ckpt)
    if check.status is CompatibilityStatus.INCOMPATIBLE:
        raise CompatibilityError(check.message)
    if check.status is CompatibilityStatus.UNKNOWN:
        logger.warning(check.message)
    return translator, freeze(load_refiner(refiner_ckpt))


def _read_videos(root: Path) -> List[Tuple[str, VideoSequence]]:
    return [(scene.name, read_frames(scene)) for scene in list_scenes(root)]


def _matching_scene(root: Path, name: str, single: bool) -> Path:
    return root if single else root / name


@click.group()
@click.version_option(VERSION, prog_name="videostylizer")
@click.option(
    "-l",
    "--logging_path",
    type=str,
    default=None,
    help="Path where to store the log file.",
)
def cli(logging_path: Optional[str]):
    "Context-preserving two-stage video stylization on synthetic portrait videos."
    if logging_path:
        logger.add(f"{logging_path}/videostylizer.log")
    logger.info(f"Running VideoStylizer version '{VERSION}' on '{sys.platform}'.")


@cli.command("gen-data")
@cfg_option
@seed_option
@click.option("--num-scenes", type=int, default=None, help="Number of scenes.")
@click.option("--frames", type=int, default=None, help="Frames per scene.")
@click.option("--size", type=int, default=None, help="Frame side length (32, 64 or 128).")
@click.option("--jobs", type=int, default=None, help="Worker threads.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Dataset root.")
def gen_data(cfg, seed, num_scenes, frames, size, jobs, out: Path):
    "Render a synthetic portrait video dataset with ground truth."
    config = _load_config(
        cfg,
        seed=seed,
        jobs=jobs,
        **{"data.num_scenes": num_scenes, "data.frames": frames, "data.size": size},
    )
    generate_dataset(
        out,
        num_scenes=config["data.num_scenes"],
        frames=config["data.frames"],
        size=config["data.size"],
        seed=config["seed"],
        fps=config["data.fps"],
        jobs=config["jobs"],
    )
    config.write_resolved(out)


@cli.group()
def train():
    "Train the translator (stage1) or the sequential refiner (stage2)."


@train.command("stage1")
@click.option("--data", type=click.Path(path_type=Path), required=True, help="Source videos.")
@click.option(
    "--style",
    type=str,
    default="oracle",
    show_default=True,
    help="'oracle' for oracle pseudo-pairs, or a directory of style frames.",
)
@cfg_option
@seed_option
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output root.")
def stage1(data: Path, style: str, cfg, seed, out: Path):
    "Stage I: generators, pseudo-pairs and the frame translator."
    pair_mode = "oracle" if style == "oracle" else "gan"
    config = _load_config(cfg, seed=seed, **{"pairs.mode": pair_mode})
    config.write_resolved(out)
    frames = [frame for _, video in _read_videos(data) for frame in video.frames]
    net_config = config.net_config(image_size=frames[0].shape[0])
    train_cfg = config.train_config()
    log = TrainingLog(out / TRAIN_LOG, log_every=train_cfg.log_every)

    source_ckpt = train_source_generator(frames, net_config=net_config, cfg=train_cfg, log=log)
    source_ckpt.save(out / "source")
    target = None
    if train_cfg.pair_mode is PairMode.GAN:
        style_frames = [frame for _, video in _read_videos(Path(style)) for frame in video.frames]
        target_ckpt = finetune_target_generator(
            source_ckpt, style_frames, cfg=train_cfg, net_config=net_config, log=log
        )
        target_ckpt.save(out / "target")
        target = load_generator(target_ckpt)

    pairs = build_pseudo_pairs(
        load_generator(source_ckpt),
        target,
        n=train_cfg.num_pairs,
        seed=train_cfg.seed,
        mode=train_cfg.pair_mode,
    )
    translator_ckpt = train_translator(
        pairs,
        net_config=net_config,
        cfg=train_cfg,
        extractor=config.feature_extractor(),
        log=log,
    )
    translator_ckpt.save(out / "translator")


@train.command("stage2")
@click.option("--data", type=click.Path(path_type=Path), required=True, help="Training videos.")
@click.option(
    "--translator",
    type=click.Path(path_type=Path),
    required=True,
    help="Translator checkpoint or stage-1 output root.",
)
@cfg_option
@seed_option
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output root.")
def stage2(data: Path, translator: Path, cfg, seed, out: Path):
    "Stage II: the sequential refiner on top of the frozen translator."
    config = _load_config(cfg, seed=seed)
    config.write_resolved(out)
    translator_ckpt = Checkpoint.load(_checkpoint_dir(translator, "translator"))
    translator_net = freeze(load_translator(translator_ckpt))
    net_config = dataclasses.replace(
        NetConfig.from_dict(translator_ckpt.config),
        refiner_window=config["net.refiner_window"],
        refiner_residual=config["net.refiner_residual"],
        refiner_channels=config["net.refiner_channels"],
        seed=config["seed"],
    )
    videos = []
    for scene in list_scenes(data):
        truth: Optional[SceneTruth] = None
        if (scene / "truth.json").is_file():
            truth = read_truth(scene)
        videos.append((read_frames(scene), truth))
    train_cfg = config.train_config()
    refiner_ckpt = train_refiner(
        videos,
        translator_net,
        config.flow_provider(),
        config.parse_provider(),
        net_config=net_config,
        cfg=train_cfg,
        extractor=config.feature_extractor(),
        log=TrainingLog(out / TRAIN_LOG, log_every=train_cfg.log_every),
    )
    refiner_ckpt.save(out / "refiner")


@cli.command()
@click.option("--in", "in_dir", type=click.Path(path_type=Path), required=True, help="Videos.")
@click.option("--translator", type=click.Path(path_type=Path), required=True)
@click.option("--refiner", type=click.Path(path_type=Path), default=None)
@click.option("--no-refiner", is_flag=True, default=False, help="Write intermediate frames.")
@cfg_option
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Output root.")
def stylize(in_dir: Path, translator: Path, refiner: Optional[Path], no_refiner: bool, cfg, out):
    "Stylize videos causally, frame by frame."
    config = _load_config(cfg)
    translator_net, refiner_net = _load_deploy_stack(translator, refiner, no_refiner)
    window = refiner_net.config.refiner_window if refiner_net is not None else 1
    single = (in_dir / "frames").is_dir()
    for name, video in _read_videos(in_dir):
        result = stylize_video(
            video, translator_net, refiner_net, window=window, use_refiner=not no_refiner
        )
        write_frames(_matching_scene(out, name, single), result.frames, result.fps)
    config.write_resolved(out)
    logger.success(f"Stylized videos written to {out}.")


@cli.command("eval")
@click.option("--src", type=click.Path(path_type=Path), required=True, help="Source videos.")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Stylized videos.")
@click.option("--truth", type=click.Path(path_type=Path), default=None, help="Scene truth.")
@click.option("--baseline", type=click.Path(path_type=Path), default=None)
@click.option("--report", type=click.Path(path_type=Path), required=True, help="JSON report.")
@cfg_option
def eval_command(src: Path, out: Path, truth, baseline, report: Path, cfg):
    "Evaluate stylized videos against their sources."
    _load_config(cfg)
    single = (src / "frames").is_dir()
    sources = _read_videos(src)
    names = [name for name, _ in sources]
    outputs = [read_frames(_matching_scene(out, name, single)) for name in names]
    truths: Sequence[Optional[SceneTruth]] = [None] * len(names)
    if truth is not None:
        truths = [read_truth(_matching_scene(truth, name, single)) for name in names]
    result = evaluate([video for _, video in sources], outputs, truths)
    if baseline is not None:
        baselines = [read_frames(_matching_scene(baseline, name, single)) for name in names]
        result["comparison"] = compare_outputs(
            [video for _, video in sources], outputs, baselines, truths
        )
    _write_report(report, result)


@cli.command()
@click.option("--translator", type=click.Path(path_type=Path), required=True)
@click.option("--refiner", type=click.Path(path_type=Path), default=None)
@click.option("--no-refiner", is_flag=True, default=False, help="Time the translator only.")
@click.option("--size", type=int, default=64, show_default=True, help="Frame side length.")
@click.option("--parallel/--single-thread", default=None, help="Override `bench.parallel`.")
@click.option("--reps", type=int, default=None, help="Override `bench.reps`.")
@cfg_option
@seed_option
@click.option("--report", type=click.Path(path_type=Path), required=True, help="JSON report.")
def bench(translator, refiner, no_refiner, size, parallel, reps, cfg, seed, report: Path):
    "Benchmark the per-frame latency of the deploy stack."
    config = _load_config(cfg, seed=seed, **{"bench.parallel": parallel, "bench.reps": reps})
    translator_net, refiner_net = _load_deploy_stack(translator, refiner, no_refiner)
    if translator_net.config.image_size != size:
        raise CompatibilityError(
            f"--size {size} does not match the {translator_net.config.image_size}px checkpoints."
        )
    video, _ = render_video(sample_scene(config["seed"], BENCH_FRAMES, size))
    params = report_params(translator_net, refiner_net)
    latency = benchmark_latency(
        StylizationPipeline(translator_net, refiner_net, use_refiner=not no_refiner),
        video,
        warmup=config["bench.warmup"],
        reps=config["bench.reps"],
        parallel=config["bench.parallel"],
    )
    _write_report(report, {**latency.as_dict(), "params": params, "refiner": not no_refiner})


def _write_report(path: Path, payload: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.success(f"Report written to {path}.")


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and map the outcome to an exit code.

    Returns:
        0 on success, 1 on usage, validation and config errors, 2 on runtime failures.
    """
    try:
        cli.main(args=list(argv) if argv is not None else None, standalone_mode=False)
    except click.exceptions.Abort:
        logger.error("Aborted.")
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except StylizerError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except OSError as exc:
        logger.error(f"I/O failed: {exc}")
        return 2
    return 0


def main():
    "Main entrypoint to the command line."
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
