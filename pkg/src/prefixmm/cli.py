"""Command-line entry point: ``prefixmm {train,generate,eval,mix,expand-prompts}``.

Exit codes: 0 success, 2 usage, 3 configuration error, 4 data error, 5 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .clients import ChatCompletionClient, StubClient
from .data import (MixtureSpec, build_meta_prompt, expand_prompts, load_manifest, load_records,
                   mixture_from_manifest, write_records)
from .errors import ConfigError, DataError, TransportError
from .evaluation import aggregate, judge_all, load_items, write_jsonl, write_report
from .generation import ChatSession, GenerationPreset, describe_first, generate, load_presets
from .model import ContextLengthError, ModelConfig, MultimodalModel
from .tokenizer import ByteTokenizer
from .trainer import (DESK_STAGES, STAGE_NAMES, DirectorySink, MediaCache, StageConfig, StageOrderError,
                      model_from_checkpoint, resize_media, resolution_bump, run_stage)
from .vision import EmptyInputError, ResolutionError, VideoClip, load_media

log = logging.getLogger("prefixmm")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4, 5


@dataclass
class JudgeSettings:
    client: str = "stub"
    model: str = "gpt-4"
    base_url: str | None = None
    max_workers: int = 4
    max_retries: int = 3
    timeout: float = 60.0

    def make(self):
        if self.client == "stub":
            return StubClient()
        if self.client == "remote":
            return ChatCompletionClient(self.model, self.base_url, timeout=self.timeout,
                                        max_retries=self.max_retries)
        raise ConfigError(f"judge client must be 'stub' or 'remote', got {self.client!r}")


@dataclass
class RunConfig:
    manifest: Path | None = None
    checkpoint_dir: Path = Path("checkpoints")
    presets: Path | None = None
    log_file: Path | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[str, StageConfig] = field(default_factory=lambda: dict(DESK_STAGES))
    judge: JudgeSettings = field(default_factory=JudgeSettings)
    seed: int = 0

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{p}: unknown keys {sorted(unknown)}")
        base = p.parent

        def rel(v):
            return None if v is None else (base / v if not Path(v).is_absolute() else Path(v))

        try:
            model = ModelConfig(**(doc.get("model") or {}))
            stages = dict(DESK_STAGES)
            for name, over in (doc.get("stages") or {}).items():
                if name not in STAGE_NAMES:
                    raise ConfigError(f"unknown stage {name!r}")
                stages[name] = replace(stages[name], **(over or {}))
            judge = JudgeSettings(**(doc.get("judge") or {}))
        except TypeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        cfg = cls(manifest=rel(doc.get("manifest")), checkpoint_dir=rel(doc.get("checkpoint_dir")) or Path("checkpoints"),
                  presets=rel(doc.get("presets")), log_file=rel(doc.get("log_file")), model=model,
                  stages=stages, judge=judge, seed=int(doc.get("seed", 0)))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for name in ("manifest", "presets"):
            v = getattr(self, name)
            if v is not None and not Path(v).is_file():
                raise ConfigError(f"{name} path {v} does not exist")


# ---------------------------------------------------------------- helpers

def _manifest(cfg: RunConfig, override: str | None):
    path = override or cfg.manifest
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"manifest {path} does not exist")
    return load_manifest(path)


def _presets(cfg: RunConfig) -> dict[str, GenerationPreset]:
    return load_presets(cfg.presets)


def _preset(cfg: RunConfig, name: str, args) -> GenerationPreset:
    presets = _presets(cfg)
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; known: {sorted(presets)}")
    return presets[name].with_overrides(
        max_new_tokens=args.max_new_tokens, beam_size=args.beam_size, top_p=args.top_p,
        top_k=args.top_k, length_penalty=args.length_penalty, no_repeat_ngram=args.no_repeat_ngram,
        do_sample=args.do_sample)


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint {p} does not exist")
    ckpt = ckpt_io.load(p)
    return model_from_checkpoint(ckpt), ckpt


def _media(path, ckpt):
    # inputs are resized to the resolution the checkpoint was trained at
    media = load_media(path)
    res = ckpt.meta.get("resolution")
    return resize_media(media, res) if res else media


def _stage_mixture(stage: str) -> str:
    return "finetune" if stage == "finetune" else "pretrain"


# ---------------------------------------------------------------- commands

def cmd_train(args, cfg: RunConfig) -> int:
    manifest = _manifest(cfg, args.manifest)
    names = list(STAGE_NAMES) if args.stage == "all" else [args.stage]
    model_cfg = replace(cfg.model, seed=args.seed)
    sink = DirectorySink(cfg.checkpoint_dir)
    media = MediaCache()
    init = ckpt_io.load(args.init) if args.init else None
    model = None
    for name in names:
        stage = cfg.stages[name]
        if args.steps is not None:
            stage = stage.scaled(args.steps)
        if init is None and name != "pretrain224":
            prev = cfg.checkpoint_dir / f"{STAGE_NAMES[STAGE_NAMES.index(name) - 1]}.ckpt"
            if prev.is_file():
                init = ckpt_io.load(prev)
        if name == "pretrain420" and (init is None or init.meta.get("stage") != "pretrain224"):
            raise StageOrderError("pretrain420 must start from a pretrain224 checkpoint "
                                  f"(pass --init or train pretrain224 into {cfg.checkpoint_dir})")
        if name == "pretrain420":
            init = resolution_bump(init, stage.resolution)
        if init is not None:
            model = model_from_checkpoint(init)
        elif model is None:
            model = MultimodalModel(model_cfg)
        mixer = mixture_from_manifest(manifest, _stage_mixture(name), args.seed)
        log.info("training %s for %d steps", name, stage.total_steps)
        result = run_stage(model, mixer, stage, sink, init=init, media=media, log_file=cfg.log_file)
        log.info("%s finished: final loss %.4f", name, result.losses[-1])
        print(f"{name}: {len(result.losses)} steps, final loss {result.losses[-1]:.4f}, "
              f"checkpoint {cfg.checkpoint_dir / (name + '.ckpt')}")
        init = result.checkpoint
    return EXIT_OK


def cmd_generate(args, cfg: RunConfig) -> int:
    model, ckpt = _load_model(args.checkpoint)
    media = _media(args.media, ckpt) if args.media else None
    preset = _preset(cfg, args.preset, args)
    if args.interactive or args.describe_first:
        session = ChatSession(model, media)
        if args.describe_first:
            kind = "Video Description" if isinstance(media, VideoClip) else "Image Description"
            desc = _presets(cfg)[kind].with_overrides(max_new_tokens=args.max_new_tokens)
            describe_first(session, None, desc, enabled=media is not None, seed=args.seed)
            print(f"Assistant: {session.history[-1][1]}" if session.history else "", flush=True)
        turns = [args.prompt] if args.prompt else []
        if args.interactive:
            turns = _stdin_turns(turns)
        for user in turns:
            print(f"Assistant: {session.reply(user, preset, args.seed)}", flush=True)
        return EXIT_OK
    if not args.prompt:
        raise ConfigError("--prompt is required unless --interactive is given")
    tok = ByteTokenizer()
    vision = model.encode_media(media) if media is not None else None
    print(generate(model, vision, tok.encode(args.prompt, bos=True), preset, args.seed, tok).text)
    return EXIT_OK


def _stdin_turns(first):
    yield from first
    for line in sys.stdin:
        line = line.strip()
        if line in ("exit", "quit"):
            return
        if line:
            yield line


def cmd_eval(args, cfg: RunConfig) -> int:
    items_path = Path(args.items)
    if not items_path.is_file():
        raise ConfigError(f"items file {items_path} does not exist")
    items = load_items(items_path)
    if args.limit:
        items = items[:args.limit]
    out = Path(args.out)
    if args.predictions:
        preds = {str(r["id"]): r["prediction"] for r in load_records(args.predictions)}
        missing = [it.id for it in items if it.id not in preds]
        if missing:
            raise DataError(f"no prediction for items {missing[:5]}")
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint or --predictions is required")
        model, ckpt = _load_model(args.checkpoint)
        presets = _presets(cfg)
        tok = ByteTokenizer()
        preds = {}
        for it in items:
            preset = presets["Open-VQA video" if it.media_kind == "video" else "Open-VQA image"]
            media = _media(items_path.parent / it.media, ckpt) if it.media else None
            vision = model.encode_media(media) if media is not None else None
            prompt = tok.encode(f"{it.question} Give a short answer.", bos=True)
            preds[it.id] = generate(model, vision, prompt, preset, args.seed, tok).text
            log.info("%s: %r", it.id, preds[it.id])
    judge_cfg = replace(cfg.judge, client=args.judge or cfg.judge.client)
    verdicts = judge_all(judge_cfg.make(), items, preds, judge_cfg.max_workers)
    report = aggregate(verdicts, items)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(({"id": it.id, "prediction": preds[it.id]} for it in items), out / "predictions.jsonl")
    write_jsonl((v.__dict__ for v in verdicts), out / "verdicts.jsonl")
    txt, _ = write_report(report, out, args.label)
    print(txt.read_text(), end="")
    return EXIT_OK


def cmd_mix(args, cfg: RunConfig) -> int:
    manifest = _manifest(cfg, args.manifest)
    spec = MixtureSpec.from_manifest(manifest, args.stage, args.seed)
    if args.dry_run:
        print(f"{'dataset':<28} {'weight':>8} {'expected':>10}")
        for name, w in sorted(zip(spec.datasets, spec.weights), key=lambda t: -t[1]):
            print(f"{name:<28} {w:8.5f} {w * args.n:10.1f}")
        return EXIT_OK
    if not args.out:
        raise ConfigError("--out is required unless --dry-run is given")
    stream = mixture_from_manifest(manifest, args.stage, args.seed)
    rows = ({"dataset": s.dataset, "media": s.media, "media_kind": s.media_kind, "prompt": s.prompt,
             "response": s.response} for s in stream.next_batch(args.n))
    write_records(rows, args.out)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def cmd_expand_prompts(args, cfg: RunConfig) -> int:
    seeds_path = Path(args.seeds)
    if not seeds_path.is_file():
        raise ConfigError(f"seeds file {seeds_path} does not exist")
    seeds = [ln.strip() for ln in seeds_path.read_text().splitlines() if ln.strip()]
    client = StubClient() if args.client == "stub" else replace(cfg.judge, client="remote").make()
    log.info("meta prompt: %s", build_meta_prompt(seeds))
    prompts = expand_prompts(seeds, client)
    stem = args.id_prefix or seeds_path.stem
    doc = {"templates": {f"{stem}_{i}": {"task_type": args.task_type, "text": t}
                         for i, t in enumerate(prompts)}}
    text = yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(prompts)} templates to {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_preset_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--beam-size", type=int)
    p.add_argument("--top-p", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--length-penalty", type=float)
    p.add_argument("--no-repeat-ngram", type=int)
    p.add_argument("--do-sample", type=lambda s: s.lower() in ("1", "true", "yes"), metavar="BOOL")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="prefixmm", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="run configuration YAML")
    ap.add_argument("--seed", type=int, help="seed for every random choice (default: config seed, else 0)")
    ap.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage or the whole pipeline")
    p.add_argument("--stage", required=True, choices=list(STAGE_NAMES) + ["all"])
    p.add_argument("--manifest")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--steps", type=int, help="override the stage's total steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="answer a prompt, optionally about an image or clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--media", help="image file (.rpf/.ppm) or clip directory")
    p.add_argument("--prompt")
    p.add_argument("--preset", default="demo")
    p.add_argument("--describe-first", action="store_true",
                   help="open the dialog with a detailed description of the media")
    p.add_argument("--interactive", action="store_true", help="multi-turn dialog on stdin")
    _add_preset_overrides(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="Open-VQA generation, judging and category report")
    p.add_argument("--checkpoint")
    p.add_argument("--items", required=True)
    p.add_argument("--predictions", help="JSONL of {id, prediction}; skips generation")
    p.add_argument("--judge", choices=["stub", "remote"])
    p.add_argument("--out", required=True)
    p.add_argument("--label", default="Model")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mix", help="mixture statistics or a materialized sample stream")
    p.add_argument("--manifest")
    p.add_argument("--stage", required=True, choices=["pretrain", "finetune"])
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("-n", type=int, default=10000, help="number of draws")
    p.add_argument("--out")
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("expand-prompts", help="grow a seed prompt list with a text-generation client")
    p.add_argument("--seeds", required=True, help="one seed prompt per line")
    p.add_argument("--client", choices=["stub", "remote"], default="stub")
    p.add_argument("--task-type", default="vqa")
    p.add_argument("--id-prefix")
    p.add_argument("--out")
    p.set_defaults(func=cmd_expand_prompts)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.seed is None:
            args.seed = cfg.seed
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError, ResolutionError, EmptyInputError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TransportError, ContextLengthError, RuntimeError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
