"""Stage-I and Stage-II trainers.

Stage I pretrains the source generator, optionally fine-tunes it into the target
generator, builds pseudo-pairs and trains the translator on them. Stage II trains
the sequential refiner on rollouts over the frozen translator.
"""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import copy
import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger

from videostylizer.checkpoint import Checkpoint, Stage, parameter_fingerprint
from videostylizer.errors import (
    CompatibilityError,
    ConfigurationError,
    ContractViolationError,
    DataError,
    NumericError,
)
from videostylizer.flowwarp import FlowProvider, ParseProvider
from videostylizer.infer import StreamState, assemble_window, commit, frame_to_tensor
from videostylizer.losses import (
    PERCEPTUAL_LEVELS,
    TEMPORAL_LEVELS,
    AdversarialSide,
    LossWeights,
    WarpOperand,
    adv_loss,
    perceptual_loss,
    recon_loss,
    refiner_objective,
    temporal_loss,
    warp_loss,
)
from videostylizer.nets import (
    Discriminator,
    FeatureExtractor,
    LatentCode,
    NetConfig,
    SequentialRefiner,
    StyleGenerator,
    UNetTranslator,
    load_generator,
)
from videostylizer.synthdata import SceneTruth, VideoSequence, oracle_stylize
from videostylizer.utils import log_phase, seed_everything

MIN_SOURCE_FRAMES = 200
MIN_STYLE_FRAMES = 100
MIN_PAIRS = 200


class PairMode(Enum):
    """Where the stylized half of a pseudo-pair comes from."""

    ORACLE = "oracle"
    GAN = "gan"


@dataclass
class PseudoPair:
    """Source frame G_X(z), stylized frame and the shared latent code."""

    x_hat: torch.Tensor
    y_hat: torch.Tensor
    z: LatentCode


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    batch_size: int = 16
    lr: float = 2e-4
    finetune_lr_factor: float = 0.1
    beta1: float = 0.0
    beta2: float = 0.99
    source_steps: int = 2000
    finetune_steps: int = 500
    translator_steps: int = 3000
    refiner_steps: int = 1500
    rollout: int = 4
    eval_every: int = 250
    log_every: int = 50
    num_pairs: int = 1000
    heldout_fraction: float = 0.1
    pair_mode: PairMode = PairMode.ORACLE
    warp_operand: WarpOperand = WarpOperand.SOURCE_PREV
    perceptual_levels: Tuple[int, ...] = PERCEPTUAL_LEVELS
    temporal_levels: Tuple[int, ...] = TEMPORAL_LEVELS
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        for name in ("source_steps", "translator_steps", "refiner_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"train.{name} must be >= 1, got {getattr(self, name)}.")
        if self.finetune_steps < 0:
            raise ConfigurationError("train.finetune_steps must be >= 0.")
        if self.eval_every < 1 or self.log_every < 1:
            raise ConfigurationError("train.eval_every and train.log_every must be >= 1.")
        if not 0.0 < self.heldout_fraction < 1.0:
            raise ConfigurationError("train.heldout_fraction must lie in (0, 1).")
        if self.lr <= 0 or self.finetune_lr_factor <= 0:
            raise ConfigurationError("Learning rates must be positive.")

    def optimizer(self, params, lr: Optional[float] = None) -> torch.optim.Adam:
        return torch.optim.Adam(params, lr=lr or self.lr, betas=(self.beta1, self.beta2))


class TrainingLog:
    """Per-step loss values, appended to a `step,term,value` CSV file when a path is set."""

    HEADER = ("step", "term", "value")

    def __init__(self, path: Optional[Path] = None, log_every: int = 50):
        self.path = Path(path) if path else None
        self.log_every = log_every
        self.rows: List[Tuple[int, str, float]] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="", encoding="utf-8") as handle:
                csv.writer(handle).writerow(self.HEADER)

    def record(self, phase: str, step: int, values: Mapping[str, float]):
        rows = [(step, f"{phase}/{term}", float(value)) for term, value in values.items()]
        self.rows.extend(rows)
        if self.path:
            with self.path.open("a", newline="", encoding="utf-8") as handle:
                csv.writer(handle).writerows(rows)
        if step == 1 or step % self.log_every == 0:
            summary = ", ".join(f"{term}={value:.4f}" for term, value in values.items())
            logger.info(f"[{phase}] step {step}: {summary}")

    def values(self, phase: str, term: str) -> List[float]:
        key = f"{phase}/{term}"
        return [value for _, name, value in self.rows if name == key]


def _check_finite_loss(phase: str, step: int, **losses: torch.Tensor):
    for name, value in losses.items():
        if not math.isfinite(float(value)):
            raise NumericError(f"[{phase}] {name} became non-finite at step {step}.")


def frames_to_batch(frames: Union[torch.Tensor, np.ndarray, Sequence[np.ndarray]]) -> torch.Tensor:
    """Stack H x W x 3 frames into an N x 3 x H x W tensor."""
    if isinstance(frames, torch.Tensor):
        return frames.float()
    if len(frames) == 0:
        return torch.zeros(0, 3, 0, 0)
    return torch.cat([frame_to_tensor(frame) for frame in frames])


def _adversarial_training(
    phase: str,
    generator: StyleGenerator,
    discriminator: Discriminator,
    data: torch.Tensor,
    cfg: TrainConfig,
    steps: int,
    lr: float,
    log: TrainingLog,
    rng: torch.Generator,
) -> List[dict]:
    opt_g = cfg.optimizer(generator.parameters(), lr)
    opt_d = cfg.optimizer(discriminator.parameters(), lr)
    gamma = cfg.weights.r1_gamma
    latent_dim = generator.config.latent_dim
    history = []
    for step in range(1, steps + 1):
        index = torch.randint(len(data), (cfg.batch_size,), generator=rng)
        real = data[index].requires_grad_(gamma > 0)
        z = torch.randn(cfg.batch_size, latent_dim, generator=rng)
        fake = generator(z)

        d_loss = adv_loss(
            discriminator(real),
            discriminator(fake.detach()),
            AdversarialSide.DISCRIMINATOR,
            r1_gamma=gamma,
            real_input=real,
        )
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        g_loss = adv_loss(None, discriminator(fake), AdversarialSide.GENERATOR)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        _check_finite_loss(phase, step, d_loss=d_loss, g_loss=g_loss)
        log.record(phase, step, {"d_adv": d_loss.item(), "g_adv": g_loss.item()})
        if step % cfg.eval_every == 0 or step == steps:
            history.append({"step": step, "d_adv": d_loss.item(), "g_adv": g_loss.item()})
    return history


@log_phase("Training the source generator")
def train_source_generator(
    frames,
    net_config: NetConfig,
    cfg: TrainConfig,
    log: Optional[TrainingLog] = None,
) -> Checkpoint:
    """Adversarially train G_X and D on source frames.

    Args:
        frames: At least 200 source frames (H x W x 3 arrays or an N x 3 x H x W tensor).
        net_config: Network configuration.
        cfg: Training configuration.
        log: Optional shared training log.

    Returns:
        'source' checkpoint with 'generator' and 'discriminator' parameters.
    """
    data = frames_to_batch(frames)
    if len(data) < MIN_SOURCE_FRAMES:
        raise DataError(f"Need at least {MIN_SOURCE_FRAMES} source frames, got {len(data)}.")
    _check_frame_size(data, net_config)
    rng = seed_everything(cfg.seed)
    generator = StyleGenerator(net_config)
    discriminator = Discriminator(net_config)
    history = _adversarial_training(
        "source", generator, discriminator, data, cfg, cfg.source_steps, cfg.lr,
        log or TrainingLog(log_every=cfg.log_every), rng,
    )
    return Checkpoint.from_modules(
        Stage.SOURCE,
        net_config.as_dict(),
        cfg.source_steps,
        {"generator": generator, "discriminator": discriminator},
        history,
    )


def _check_frame_size(data: torch.Tensor, net_config: NetConfig):
    size = net_config.image_size
    if tuple(data.shape[1:]) != (3, size, size):
        raise CompatibilityError(
            f"Frames are {tuple(data.shape[1:])}, the networks expect 3 x {size} x {size}."
        )


@log_phase("Fine-tuning the target generator")
def finetune_target_generator(
    checkpoint: Checkpoint,
    style_frames,
    cfg: TrainConfig,
    net_config: Optional[NetConfig] = None,
    log: Optional[TrainingLog] = None,
) -> Checkpoint:
    """Copy G_X and D and continue adversarial training on the style set at a reduced lr.

    Returns:
        'target' checkpoint holding G_Y and its discriminator.
    """
    if checkpoint.stage is not Stage.SOURCE:
        raise CompatibilityError(
            f"Fine-tuning starts from a 'source' checkpoint, got '{checkpoint.stage.value}'."
        )
    stored = NetConfig.from_dict(checkpoint.config)
    if net_config is not None and net_config != stored:
        raise CompatibilityError(f"Checkpoint config {stored} does not match {net_config}.")
    data = frames_to_batch(style_frames)
    if len(data) < MIN_STYLE_FRAMES:
        raise DataError(f"Need at least {MIN_STYLE_FRAMES} style frames, got {len(data)}.")
    _check_frame_size(data, stored)
    rng = seed_everything(cfg.seed + 1)
    generator = load_generator(checkpoint)
    discriminator = checkpoint.load_into(Discriminator(stored), "discriminator")
    history = _adversarial_training(
        "target", generator, discriminator, data, cfg, cfg.finetune_steps,
        cfg.lr * cfg.finetune_lr_factor, log or TrainingLog(log_every=cfg.log_every), rng,
    )
    return Checkpoint.from_modules(
        Stage.TARGET,
        stored.as_dict(),
        cfg.finetune_steps,
        {"generator": generator, "discriminator": discriminator},
        history,
    )


def regenerate_pair(
    source: StyleGenerator,
    target: Optional[StyleGenerator],
    z: LatentCode,
    mode: PairMode = PairMode.ORACLE,
) -> PseudoPair:
    """Produce the pseudo-pair of one latent code."""
    with torch.no_grad():
        x_hat = source(z.unsqueeze(0))[0]
        if mode is PairMode.ORACLE:
            stylized = oracle_stylize(x_hat.numpy().transpose(1, 2, 0))
            y_hat = frame_to_tensor(stylized)[0]
        else:
            y_hat = target(z.unsqueeze(0))[0]
    return PseudoPair(x_hat=x_hat, y_hat=y_hat, z=z.clone())


@log_phase("Building pseudo-pairs")
def build_pseudo_pairs(
    source: StyleGenerator,
    target: Optional[StyleGenerator],
    n: int,
    seed: int,
    mode: Union[str, PairMode] = PairMode.ORACLE,
) -> List[PseudoPair]:
    """Sample n latent codes and render (G_X(z), G_Y(z)) or (G_X(z), oracle(G_X(z))).

    Args:
        source: G_X.
        target: G_Y; only needed in GAN mode.
        n: Number of pairs.
        seed: Seed of the latent codes.
        mode: 'oracle' or 'gan'.

    Returns:
        List of PseudoPair in sampling order.
    """
    mode = PairMode(mode)
    if n <= 0:
        raise ConfigurationError(f"Number of pseudo-pairs must be positive, got {n}.")
    if mode is PairMode.GAN:
        if target is None:
            raise ConfigurationError("GAN pair mode needs a target generator.")
        if target.config != source.config:
            raise CompatibilityError("Source and target generators have different configs.")
    source.eval()
    if target is not None:
        target.eval()
    generator = torch.Generator().manual_seed(seed)
    codes = torch.randn(n, source.config.latent_dim, generator=generator)
    pairs = [regenerate_pair(source, target, z, mode) for z in codes]
    logger.info(f"Built {len(pairs)} pseudo-pairs in {mode.value} mode.")
    return pairs


def _heldout_l1(translator: UNetTranslator, x: torch.Tensor, y: torch.Tensor) -> float:
    with torch.no_grad():
        return float(recon_loss(translator(x), y))


@log_phase("Training the translator")
def train_translator(
    pairs: Sequence[PseudoPair],
    net_config: NetConfig,
    cfg: TrainConfig,
    extractor: Optional[FeatureExtractor] = None,
    log: Optional[TrainingLog] = None,
) -> Checkpoint:
    """Train G_X->Y (and D) on pseudo-pairs, keeping the best held-out checkpoint.

    The objective is lambda_adv * L_adv + lambda_recon * L_recon + lambda_perc * L_perc.
    The last `heldout_fraction` of the pairs is held out and evaluated every
    `eval_every` steps (and at step 0); the history is stored in the checkpoint.
    """
    if len(pairs) < MIN_PAIRS:
        raise DataError(f"Need at least {MIN_PAIRS} pseudo-pairs, got {len(pairs)}.")
    xs = torch.stack([pair.x_hat for pair in pairs])
    ys = torch.stack([pair.y_hat for pair in pairs])
    _check_frame_size(xs, net_config)
    heldout = max(1, int(round(len(pairs) * cfg.heldout_fraction)))
    train_x, train_y = xs[:-heldout], ys[:-heldout]
    held_x, held_y = xs[-heldout:], ys[-heldout:]

    rng = seed_everything(cfg.seed + 2)
    translator = UNetTranslator(net_config)
    discriminator = Discriminator(net_config)
    extractor = extractor or FeatureExtractor(net_config.seed)
    weights = cfg.weights
    opt_t = cfg.optimizer(translator.parameters())
    opt_d = cfg.optimizer(discriminator.parameters())
    log = log or TrainingLog(log_every=cfg.log_every)

    best_l1 = _heldout_l1(translator, held_x, held_y)
    best_step, best_state = 0, copy.deepcopy(translator.state_dict())
    history = [{"step": 0, "heldout_l1": best_l1}]
    logger.info(f"Held-out L1 before training: {best_l1:.4f}")

    for step in range(1, cfg.translator_steps + 1):
        index = torch.randint(len(train_x), (cfg.batch_size,), generator=rng)
        x, y = train_x[index], train_y[index]
        pred = translator(x)
        terms: Dict[str, torch.Tensor] = {}

        if weights.lambda_adv > 0:
            real = y.clone().requires_grad_(weights.r1_gamma > 0)
            d_loss = adv_loss(
                discriminator(real),
                discriminator(pred.detach()),
                AdversarialSide.DISCRIMINATOR,
                r1_gamma=weights.r1_gamma,
                real_input=real,
            )
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            terms["d_adv"] = d_loss
            terms["adv"] = adv_loss(None, discriminator(pred), AdversarialSide.GENERATOR)
        terms["recon"] = recon_loss(pred, y)
        if weights.lambda_perc > 0:
            terms["perc"] = perceptual_loss(pred, y, extractor, cfg.perceptual_levels)

        total = weights.lambda_recon * terms["recon"]
        if "adv" in terms:
            total = total + weights.lambda_adv * terms["adv"]
        if "perc" in terms:
            total = total + weights.lambda_perc * terms["perc"]
        opt_t.zero_grad()
        total.backward()
        opt_t.step()

        terms["total"] = total
        _check_finite_loss("translator", step, **terms)
        log.record("translator", step, {name: value.item() for name, value in terms.items()})

        if step % cfg.eval_every == 0 or step == cfg.translator_steps:
            l1 = _heldout_l1(translator, held_x, held_y)
            history.append({"step": step, "heldout_l1": l1})
            logger.info(f"Held-out L1 at step {step}: {l1:.4f}")
            if l1 < best_l1:
                best_l1, best_step = l1, step
                best_state = copy.deepcopy(translator.state_dict())

    translator.load_state_dict(best_state)
    logger.success(f"Best translator at step {best_step} with held-out L1 {best_l1:.4f}.")
    return Checkpoint.from_modules(
        Stage.TRANSLATOR,
        net_config.as_dict(),
        best_step,
        {"translator": translator, "discriminator": discriminator},
        history,
    )


@dataclass
class _PreparedVideo:
    """Per-video tensors of a Stage-II training video."""

    frames: torch.Tensor
    intermediates: torch.Tensor
    flows: torch.Tensor
    masks: torch.Tensor


def _prepare_video(
    video: VideoSequence,
    truth: Optional[SceneTruth],
    translator: UNetTranslator,
    flow_provider: FlowProvider,
    parse_provider: ParseProvider,
) -> _PreparedVideo:
    frames = frames_to_batch(video.frames)
    with torch.no_grad():
        intermediates = torch.cat([translator(frame.unsqueeze(0)) for frame in frames])
    height, width = frames.shape[-2:]
    flows = torch.zeros(len(frames), 2, height, width)
    masks = torch.zeros(len(frames), height, width)
    for t in range(1, len(frames)):
        truth_t = truth.frame(t) if truth is not None else None
        truth_prev = truth.frame(t - 1) if truth is not None else None
        flow = flow_provider.provide(video.frames[t - 1], video.frames[t], truth_t)
        flows[t] = flow.to_tensor()
        # the parsing map is computed on the previous frame
        masks[t] = torch.from_numpy(parse_provider.provide(video.frames[t - 1], truth_prev).data)
    return _PreparedVideo(frames, intermediates, flows, masks)


def refiner_rollout(
    refiner: SequentialRefiner,
    frames: torch.Tensor,
    intermediates: torch.Tensor,
    flows: torch.Tensor,
    masks: torch.Tensor,
    cfg: TrainConfig,
    extractor: FeatureExtractor,
) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Roll the refiner over B windows of W frames, feeding back its own outputs.

    All tensors are B x W x ... ; the window start is treated as the start of a stream.

    Returns:
        Mean refiner objective over the W-1 transitions and the mean term values.
    """
    window = refiner.config.refiner_window
    rollout = frames.shape[1]
    state = StreamState(window)
    outputs = []
    total = 0.0
    sums = {"warp": 0.0, "temp": 0.0, "total": 0.0}
    for k in range(rollout):
        refined = refiner(assemble_window(state, frames[:, k], intermediates[:, k], window))
        commit(state, refined)
        if k > 0:
            previous = (
                frames[:, k - 1] if cfg.warp_operand is WarpOperand.SOURCE_PREV else outputs[k - 1]
            )
            terms = {
                "warp": warp_loss(previous, flows[:, k], masks[:, k], intermediates[:, k], refined)
            }
            if cfg.weights.lambda_temp > 0:
                terms["temp"] = temporal_loss(
                    outputs[k - 1], refined, extractor, cfg.temporal_levels
                )
            objective, values = refiner_objective(terms, cfg.weights)
            total = total + objective
            for name, value in values.items():
                sums[name] += value
        outputs.append(refined)
    transitions = rollout - 1
    return total / transitions, {name: value / transitions for name, value in sums.items()}


@log_phase("Training the refiner")
def train_refiner(
    videos: Sequence[Tuple[VideoSequence, Optional[SceneTruth]]],
    translator: UNetTranslator,
    flow_provider: FlowProvider,
    parse_provider: ParseProvider,
    net_config: NetConfig,
    cfg: TrainConfig,
    extractor: Optional[FeatureExtractor] = None,
    log: Optional[TrainingLog] = None,
) -> Checkpoint:
    """Train the sequential refiner with rollouts over the frozen translator.

    Args:
        videos: Training videos with their scene truth (None if the providers need none).
        translator: Frozen Stage-I translator.
        flow_provider: Supplies the backward flow f_t.
        parse_provider: Supplies the background map M of x_{t-1}.
        net_config: Network configuration of the refiner.
        cfg: Training configuration; `rollout` is the window length W.
        extractor: Feature extractor of the temporal loss.
        log: Optional shared training log.

    Returns:
        'refiner' checkpoint; its config records the translator fingerprint.
    """
    if any(param.requires_grad for param in translator.parameters()):
        raise ContractViolationError("The translator must be frozen before Stage-II training.")
    if translator.config.image_size != net_config.image_size:
        raise CompatibilityError("Translator and refiner configs use different image sizes.")
    window = net_config.refiner_window
    if cfg.rollout < window + 1:
        raise ConfigurationError(
            f"train.rollout must be >= refiner window + 1 = {window + 1}, got {cfg.rollout}."
        )
    if not videos:
        raise DataError("No training videos given.")
    for video, _ in videos:
        if video.num_frames < cfg.rollout + window:
            raise DataError(
                f"Videos need at least {cfg.rollout + window} frames, got {video.num_frames}."
            )
    fingerprint = parameter_fingerprint(translator, "translator")

    prepared = [
        _prepare_video(video, truth, translator, flow_provider, parse_provider)
        for video, truth in videos
    ]
    starts = [
        (v, start)
        for v, item in enumerate(prepared)
        for start in range(len(item.frames) - cfg.rollout + 1)
    ]
    logger.info(f"Stage-II training on {len(prepared)} videos, {len(starts)} windows.")

    rng = seed_everything(cfg.seed + 3)
    refiner = SequentialRefiner(net_config)
    extractor = extractor or FeatureExtractor(net_config.seed)
    optimizer = cfg.optimizer(refiner.parameters())
    log = log or TrainingLog(log_every=cfg.log_every)
    history = []

    for step in range(1, cfg.refiner_steps + 1):
        picks = torch.randint(len(starts), (cfg.batch_size,), generator=rng).tolist()
        batch = [starts[i] for i in picks]

        def gather(name: str) -> torch.Tensor:
            return torch.stack(
                [getattr(prepared[v], name)[s : s + cfg.rollout] for v, s in batch]
            )

        loss, values = refiner_rollout(
            refiner,
            gather("frames"),
            gather("intermediates"),
            gather("flows"),
            gather("masks"),
            cfg,
            extractor,
        )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        _check_finite_loss("refiner", step, total=loss)
        log.record("refiner", step, values)
        if step % cfg.eval_every == 0 or step == cfg.refiner_steps:
            history.append({"step": step, **values})

    if parameter_fingerprint(translator, "translator") != fingerprint:
        raise ContractViolationError("The translator weights changed during Stage-II training.")
    config = {**net_config.as_dict(), "translator_fingerprint": fingerprint}
    return Checkpoint.from_modules(
        Stage.REFINER, config, cfg.refiner_steps, {"refiner": refiner}, history
    )
