"""Staged training: low-res pretraining, a resolution bump, high-res
pretraining, then instruction finetuning.

Stage configuration files are YAML mappings whose keys mirror StageConfig::

    name: finetune
    total_steps: 400
    peak_lr: 2.0e-4
    warmup_rate: 0.05
    floor_lr: 2.0e-5
    batch_size: 8
    resolution: 420
    loss_mask_policy: response_only

Training logs are newline-delimited JSON ``{step, lr, loss, tokens_seen}``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import autodiff as ad
from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .data import InstructionSample
from .errors import ConfigError
from .model import ConfigMismatchError, ModelConfig, MultimodalModel, write_model_card
from .optim import OptimizerState, adamw_step, clip_grad_norm
from .tokenizer import ByteTokenizer
from .vision import PATCH, ImageTensor, ResolutionError, VideoClip, interpolate_pos_embed, load_media, resize_image

log = logging.getLogger(__name__)

STAGE_NAMES = ("pretrain224", "pretrain420", "finetune")
LOSS_POLICIES = ("all_tokens", "response_only")


class StageOrderError(ConfigError):
    pass


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class Schedule:
    """Linear warmup from ``start_lr`` to ``peak_lr``, then linear decay to ``floor_lr``."""

    total_steps: int
    warmup_steps: int
    peak_lr: float
    floor_lr: float
    start_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps < 1 or not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError(f"bad schedule knots: warmup {self.warmup_steps}, total {self.total_steps}")


def lr_at_step(s: Schedule, step: int) -> float:
    if not 0 <= step <= s.total_steps:
        raise IndexError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.start_lr + (s.peak_lr - s.start_lr) * step / s.warmup_steps
    decay = s.total_steps - s.warmup_steps
    if decay == 0:
        return s.peak_lr
    return s.peak_lr + (s.floor_lr - s.peak_lr) * (step - s.warmup_steps) / decay


# ---------------------------------------------------------------- stage config

@dataclass
class StageConfig:
    name: str
    total_steps: int
    peak_lr: float
    warmup_rate: float = 0.05
    floor_lr: float = 0.0
    batch_size: int = 8
    resolution: int = 224
    loss_mask_policy: str = "all_tokens"
    # "floor": the table's "warmup lr end" is the decay target; "warmup_start": it is lr(0)
    lr_end_reading: str = "floor"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip: float = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.name not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {self.name!r}; expected one of {STAGE_NAMES}")
        if not 0 < self.warmup_rate < 1:
            raise ConfigError("warmup_rate must lie in (0, 1)")
        if self.floor_lr > self.peak_lr:
            raise ConfigError("floor_lr must not exceed peak_lr")
        if self.loss_mask_policy not in LOSS_POLICIES:
            raise ConfigError(f"loss_mask_policy must be one of {LOSS_POLICIES}")
        if self.resolution % PATCH:
            raise ConfigError(f"resolution {self.resolution} is not a multiple of {PATCH}")
        if self.lr_end_reading not in ("floor", "warmup_start"):
            raise ConfigError("lr_end_reading must be 'floor' or 'warmup_start'")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_rate * self.total_steps))

    @property
    def schedule(self) -> Schedule:
        if self.lr_end_reading == "floor":
            return Schedule(self.total_steps, self.warmup_steps, self.peak_lr, self.floor_lr)
        return Schedule(self.total_steps, self.warmup_steps, self.peak_lr, 0.0, start_lr=self.floor_lr)

    def scaled(self, total_steps: int) -> "StageConfig":
        return replace(self, total_steps=total_steps)

    @classmethod
    def from_file(cls, path) -> "StageConfig":
        doc = yaml.safe_load(Path(path).read_text()) or {}
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc


# Full-size schedules (100k / 10k / 20k steps).
PAPER_STAGES = {
    "pretrain224": StageConfig("pretrain224", 100_000, 1e-4, 0.05, 1e-5, resolution=224),
    "pretrain420": StageConfig("pretrain420", 10_000, 1e-5, 0.05, 1e-6, resolution=420),
    "finetune": StageConfig("finetune", 20_000, 2e-5, 0.05, 2e-6, resolution=420,
                            loss_mask_policy="response_only"),
}

# Desk-scale defaults: fewer steps and a 10x learning rate for the small model.
DESK_STAGES = {
    "pretrain224": StageConfig("pretrain224", 2000, 1e-3, 0.05, 1e-4, resolution=224),
    "pretrain420": StageConfig("pretrain420", 200, 1e-4, 0.05, 1e-5, resolution=420),
    "finetune": StageConfig("finetune", 400, 2e-4, 0.05, 2e-5, resolution=420,
                            loss_mask_policy="response_only"),
}


# ---------------------------------------------------------------- media

class MediaCache:
    """Resolves media references to pixels at a stage resolution, and caches
    frozen-tower outputs (raw tokens) per (reference, resolution)."""

    def __init__(self, store: dict | None = None):
        self.store = dict(store or {})
        self._pixels: dict = {}
        self._raw: dict = {}

    def pixels(self, ref: str, resolution: int | None):
        key = (ref, resolution)
        if key not in self._pixels:
            media = self.store[ref] if ref in self.store else load_media(ref)
            if resolution is not None:
                media = resize_media(media, resolution)
            self._pixels[key] = media
        return self._pixels[key]

    def condensed(self, model: MultimodalModel, ref: str, resolution: int | None):
        media = self.pixels(ref, resolution)
        if model.cfg.train_vision:
            return model.resampler(model.vision.encode(media))
        key = (ref, resolution, model.vision.grid)
        raw = self._raw.get(key)
        if raw is None:
            with ad.no_grad():
                raw = model.vision.encode(media)
            self._raw[key] = raw
        return model.resampler(raw)

    def clear_tokens(self) -> None:
        self._raw.clear()


def resize_media(media, resolution: int):
    if isinstance(media, VideoClip):
        return VideoClip([resize_media(f, resolution) for f in media.frames])
    if media.height == resolution and media.width == resolution:
        return media
    return resize_image(media, resolution, resolution)


# ---------------------------------------------------------------- batches

@dataclass
class PackedBatch:
    visions: list
    texts: list[list[int]]
    prompt_lens: list[int]
    truncated: int = 0


def encode_sample(sample: InstructionSample, tok: ByteTokenizer) -> tuple[list[int], list[int]]:
    return tok.encode(sample.prompt, bos=True), tok.encode(sample.response, eos=True)


def fit_to_context(prompt: list[int], response: list[int], budget: int) -> tuple[list[int], list[int], bool]:
    """Trim the prompt from the left (keeping BOS), then the response tail, to fit ``budget`` text ids."""
    if len(prompt) + len(response) <= budget:
        return prompt, response, False
    keep_prompt = max(1, budget - len(response))
    prompt = prompt[:1] + prompt[len(prompt) - keep_prompt + 1:] if keep_prompt > 1 else prompt[:1]
    response = response[:max(1, budget - len(prompt))]
    return prompt, response, True


def pack_batch(model: MultimodalModel, samples: Sequence[InstructionSample], media: MediaCache,
               resolution: int | None, tok: ByteTokenizer | None = None) -> PackedBatch:
    tok = tok or ByteTokenizer()
    visions, texts, plens, truncated = [], [], [], 0
    for s in samples:
        v = media.condensed(model, s.media, resolution) if s.media is not None else None
        nv = 0 if v is None else v.shape[0]
        budget = model.cfg.max_seq_len - model.sequence_length(nv, 0)
        prompt, response = encode_sample(s, tok)
        prompt, response, cut = fit_to_context(prompt, response, budget)
        truncated += cut
        visions.append(v)
        texts.append(prompt + response)
        plens.append(len(prompt))
    return PackedBatch(visions, texts, plens, truncated)


def loss_targets(packed, batch: PackedBatch, policy: str) -> tuple[np.ndarray, np.ndarray]:
    """Targets/mask aligned with logits: logits at position p predict the token at p + 1."""
    B, S = packed.logits.shape[:2]
    tgt = np.zeros((B, S), dtype=np.int64)
    mask = np.zeros((B, S), dtype=bool)
    for b, ids in enumerate(batch.texts):
        start = packed.text_start[b]
        first = batch.prompt_lens[b] if policy == "response_only" else 0
        for j in range(first, len(ids)):
            p = start + j - 1
            if p < 0:
                continue
            tgt[b, p] = ids[j]
            mask[b, p] = True
    return tgt, mask


def compute_loss(model: MultimodalModel, batch: PackedBatch, policy: str):
    packed = model.forward(batch.visions, batch.texts)
    tgt, mask = loss_targets(packed, batch, policy)
    return ad.softmax_cross_entropy(packed.logits, tgt, mask), int(mask.sum())


def new_optimizer(stage: StageConfig) -> OptimizerState:
    return OptimizerState(stage.beta1, stage.beta2, stage.epsilon, stage.weight_decay)


def training_step(model: MultimodalModel, samples: Sequence[InstructionSample], stage: StageConfig,
                  opt: OptimizerState, media: MediaCache | None = None, step: int | None = None) -> float:
    """Forward, masked cross-entropy, backward, clip, AdamW. Returns the pre-update loss."""
    if not samples:
        raise ValueError("empty batch")
    media = media or MediaCache()
    batch = pack_batch(model, samples, media, stage.resolution)
    if batch.truncated:
        log.warning("%d sample(s) truncated to fit max_seq_len", batch.truncated)
    loss, _ = compute_loss(model, batch, stage.loss_mask_policy)
    loss.backward()
    params = model.trainable_parameters()
    clip_grad_norm(params, stage.grad_clip)
    step = opt.step if step is None else step
    adamw_step(params, opt, lr_at_step(stage.schedule, min(step, stage.total_steps)))
    model.zero_grad()
    return float(loss.item())


# ---------------------------------------------------------------- checkpoints

def make_checkpoint(model: MultimodalModel, stage: str, step: int, resolution: int,
                    opt: OptimizerState | None = None, extra: dict | None = None) -> Checkpoint:
    meta = {"stage": stage, "step": step, "resolution": resolution, "config": model.cfg.to_dict()}
    meta.update(extra or {})
    return Checkpoint.from_model(model, opt, meta)


def model_from_checkpoint(ckpt: Checkpoint, cfg: ModelConfig | None = None) -> MultimodalModel:
    stored = ModelConfig(**ckpt.meta["config"])
    if cfg is not None and cfg != stored:
        diff = {k: (v, getattr(stored, k)) for k, v in cfg.to_dict().items()
                if getattr(stored, k) != getattr(cfg, k)}
        raise ConfigMismatchError(f"checkpoint was written with a different config: {diff}")
    model = MultimodalModel(stored)
    model.load_state_dict(ckpt.params)
    for name, p in model.named_parameters():
        p.frozen = ckpt.frozen.get(name, p.frozen)
    return model


def load_into(model: MultimodalModel, ckpt: Checkpoint) -> None:
    stored = ModelConfig(**ckpt.meta["config"])
    if stored != model.cfg:
        raise ConfigMismatchError("checkpoint config does not match the model config")
    model.load_state_dict(ckpt.params)


def resolution_bump(ckpt: Checkpoint, new_resolution: int) -> Checkpoint:
    """Interpolate the vision positional grid to ``new_resolution``; copy everything else."""
    if new_resolution % PATCH:
        raise ResolutionError(f"resolution {new_resolution} is not a multiple of {PATCH}")
    grid = (new_resolution // PATCH, new_resolution // PATCH)
    key = "vision.pos_embed"
    params = dict(ckpt.params)
    params[key] = interpolate_pos_embed(ckpt.params[key], grid)
    opt = ckpt.optimizer
    if opt is not None and key in opt.m:
        opt = OptimizerState(opt.beta1, opt.beta2, opt.epsilon, opt.weight_decay, opt.step,
                             dict(opt.m), dict(opt.v))
        opt.m[key] = interpolate_pos_embed(opt.m[key], grid)
        opt.v[key] = interpolate_pos_embed(opt.v[key], grid)
    meta = json.loads(json.dumps(ckpt.meta))
    meta["config"]["vision_grid"] = list(grid)
    meta["resolution"] = new_resolution
    return Checkpoint(params, dict(ckpt.frozen), opt, meta)


class DirectorySink:
    """Writes ``<stage>-step<N>.ckpt`` periodically and ``<stage>.ckpt`` at the end,
    plus a model card next to them."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, ckpt: Checkpoint, final: bool) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        stage = ckpt.meta["stage"]
        name = f"{stage}.ckpt" if final else f"{stage}-step{ckpt.meta['step']}.ckpt"
        path = ckpt_io.save(ckpt, self.directory / name)
        write_model_card(ModelConfig(**ckpt.meta["config"]), self.directory / f"{stage}.model_card.txt")
        return path


# ---------------------------------------------------------------- stages

@dataclass
class StageResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    truncated: int = 0


def run_stage(model: MultimodalModel, mixer, stage: StageConfig,
              sink: Callable[[Checkpoint, bool], object] | None = None,
              init: Checkpoint | None = None, media: MediaCache | None = None,
              log_file=None, stop: Callable[[int, float], bool] | None = None) -> StageResult:
    """Train ``model`` for ``stage.total_steps`` batches drawn from ``mixer``.

    ``init`` is loaded first (config must match). pretrain420 requires a
    pretrain224 checkpoint. ``stop(step, loss)`` may end the stage early.
    """
    if stage.name == "pretrain420":
        if init is None or init.meta.get("stage") != "pretrain224":
            raise StageOrderError("pretrain420 must start from a pretrain224 checkpoint")
    if init is not None:
        load_into(model, init)
    media = media or MediaCache()
    media.clear_tokens()
    opt = new_optimizer(stage)
    tok = ByteTokenizer()
    sched = stage.schedule
    result = StageResult(checkpoint=None)
    tokens_seen = 0
    fh = open(log_file, "a") if isinstance(log_file, (str, Path)) else log_file
    try:
        for step in range(stage.total_steps):
            samples = mixer.next_batch(stage.batch_size)
            batch = pack_batch(model, samples, media, stage.resolution, tok)
            result.truncated += batch.truncated
            loss, _ = compute_loss(model, batch, stage.loss_mask_policy)
            loss.backward()
            params = model.trainable_parameters()
            clip_grad_norm(params, stage.grad_clip)
            lr = lr_at_step(sched, step)
            adamw_step(params, opt, lr)
            model.zero_grad()
            value = float(loss.item())
            result.losses.append(value)
            tokens_seen += sum(len(t) for t in batch.texts)
            if fh is not None:
                fh.write(json.dumps({"step": step, "lr": lr, "loss": value, "tokens_seen": tokens_seen}) + "\n")
            if sink is not None and stage.checkpoint_every and (step + 1) % stage.checkpoint_every == 0:
                sink(make_checkpoint(model, stage.name, step + 1, stage.resolution, opt), False)
            if stop is not None and stop(step, value):
                break
    finally:
        if fh is not None and fh is not log_file:
            fh.close()
    if result.truncated:
        log.warning("%s: %d sample(s) truncated to fit the context", stage.name, result.truncated)
    result.checkpoint = make_checkpoint(model, stage.name, len(result.losses), stage.resolution, opt)
    if sink is not None:
        sink(result.checkpoint, True)
    return result


def run_pipeline(cfg: ModelConfig, mixers: dict, stages: dict[str, StageConfig],
                 media: MediaCache | None = None, sink=None, log_file=None) -> dict[str, StageResult]:
    """pretrain224 -> resolution bump -> pretrain420 -> finetune."""
    media = media or MediaCache()
    model = MultimodalModel(cfg)
    out = {}
    out["pretrain224"] = run_stage(model, mixers["pretrain"], stages["pretrain224"], sink, media=media,
                                   log_file=log_file)
    bumped = resolution_bump(out["pretrain224"].checkpoint, stages["pretrain420"].resolution)
    model = model_from_checkpoint(bumped)
    out["pretrain420"] = run_stage(model, mixers["pretrain"], stages["pretrain420"], sink, init=bumped,
                                   media=media, log_file=log_file)
    out["finetune"] = run_stage(model, mixers["finetune"], stages["finetune"], sink,
                                init=out["pretrain420"].checkpoint, media=media, log_file=log_file)
    return out


def stage_dict(stage: StageConfig) -> dict:
    return asdict(stage)


# ---------------------------------------------------------------- fixed sample sets

def dataset_loss(model: MultimodalModel, samples: Sequence[InstructionSample], stage: StageConfig,
                 media: MediaCache | None = None, batch_size: int | None = None) -> float:
    """Token-weighted mean loss over ``samples`` under the stage's mask policy (no update)."""
    media = media or MediaCache()
    bs = batch_size or stage.batch_size
    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(samples), bs):
            batch = pack_batch(model, samples[i:i + bs], media, stage.resolution)
            loss, n = compute_loss(model, batch, stage.loss_mask_policy)
            total += float(loss.item()) * n
            count += n
    return total / count


@dataclass
class FitResult:
    steps: int
    losses: list[float]
    eval_losses: list[tuple[int, float]]

    @property
    def final_eval(self) -> float:
        return self.eval_losses[-1][1]


def fit_samples(model: MultimodalModel, samples: Sequence[InstructionSample], stage: StageConfig,
                media: MediaCache | None = None, seed: int = 0, target: float | None = None,
                eval_every: int = 50) -> FitResult:
    """Train on a fixed sample list in seeded shuffled epochs.

    Every ``eval_every`` steps the full-set loss is measured; training stops
    once it drops below ``target``.
    """
    media = media or MediaCache()
    rng = np.random.default_rng(seed)
    opt = new_optimizer(stage)
    order: list[int] = []
    losses, evals = [], []
    step = 0
    while step < stage.total_steps:
        if len(order) < stage.batch_size:
            order += list(rng.permutation(len(samples)))
        idx, order = order[:stage.batch_size], order[stage.batch_size:]
        losses.append(training_step(model, [samples[i] for i in idx], stage, opt, media, step))
        step += 1
        if step % eval_every == 0 or step == stage.total_steps:
            evals.append((step, dataset_loss(model, samples, stage, media)))
            if target is not None and evals[-1][1] < target:
                break
    return FitResult(step, losses, evals)
