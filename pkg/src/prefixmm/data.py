"""Instruction-format data: prompt templates, prompt-set expansion, and a
seeded weighted mixture over datasets.

File formats
------------
Records: one JSON object per line, ``{"id", "media", "fields", "response"}``.
``media`` is a path (relative to the record file) or null; ``fields`` maps
lower-case placeholder names (``question``, ``hypothesis``, ``options``,
``meme``, ``instruction``) to text. Dialog records carry
``fields.turns = [{"user": ..., "assistant": ...}, ...]`` and no response;
they expand into one sample per round.

Manifest (YAML)::

    templates: templates.yaml          # optional; defaults to the bundled set
    datasets:
      - name: VQAv2
        task_type: vqa
        source: records/vqav2.jsonl    # relative to the manifest
        pretrain_weight: 2.761
        finetune_weight: 3.449
        templates: [vqa_short]

Templates (YAML): ``templates: {id: {task_type: ..., text: ...}}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DataError
from .tokenizer import ByteTokenizer

TASK_TYPES = (
    "image-text pair", "image caption", "vqa", "classification",
    "video vqa", "video caption", "dialog", "text instructions",
)
IMAGE_TASKS = {"image-text pair", "image caption", "vqa", "classification", "dialog"}
VIDEO_TASKS = {"video vqa", "video caption"}
PLACEHOLDERS = ("QUESTION", "HYPOTHESIS", "OPTIONS", "MEME", "DIALOG", "INSTRUCTION")
_PLACEHOLDER_RE = re.compile(r"\[(" + "|".join(PLACEHOLDERS) + r")\]")

STAGES = ("pretrain", "finetune")


class TemplateError(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


def media_kind(task_type: str) -> str | None:
    if task_type in VIDEO_TASKS:
        return "video"
    if task_type in IMAGE_TASKS:
        return "image"
    return None


# ---------------------------------------------------------------- templates

@dataclass(frozen=True)
class PromptTemplate:
    id: str
    text: str
    task_type: str

    @property
    def placeholders(self) -> list[str]:
        return _PLACEHOLDER_RE.findall(self.text)


def normalize_question(q: str) -> str:
    q = q.strip()
    return q if q.endswith("?") else q + "?"


def render_prompt(tmpl: PromptTemplate, record: dict) -> str:
    """Fill every placeholder from ``record`` (keys are lower-case placeholder names)."""

    def fill(match: re.Match) -> str:
        key = match.group(1).lower()
        if key not in record or record[key] is None:
            raise TemplateError(f"template {tmpl.id!r} needs [{match.group(1)}] but the record has no {key!r}")
        value = str(record[key])
        return normalize_question(value) if key == "question" else value

    return _PLACEHOLDER_RE.sub(fill, tmpl.text)


def load_templates(path=None) -> dict[str, PromptTemplate]:
    if path is None:
        raw = resources.files("prefixmm.resources").joinpath("templates.yaml").read_text()
    else:
        raw = Path(path).read_text()
    doc = yaml.safe_load(raw) or {}
    out = {}
    for tid, spec in (doc.get("templates") or {}).items():
        if spec.get("task_type") not in TASK_TYPES:
            raise ConfigError(f"template {tid!r}: unknown task type {spec.get('task_type')!r}")
        out[tid] = PromptTemplate(tid, spec["text"], spec["task_type"])
    return out


def format_dialog(history: Sequence[tuple[str, str]], user: str) -> str:
    lines = []
    for u, a in history:
        lines.append(f"User: {u}")
        lines.append(f"Assistant: {a}")
    lines.append(f"User: {user}")
    lines.append("Assistant:")
    return "\n".join(lines)


# ---------------------------------------------------------------- prompt expansion

META_PROMPT = ("Here are some instructions that define a visual-language task. "
               "Continue to write 15 instructions with the same meaning: {seeds}")

_ITEM_RE = re.compile(r"(?:^|\s)(\d+)(?:\)|\.(?=\s))\s*")


def build_meta_prompt(seeds: Sequence[str]) -> str:
    return META_PROMPT.format(seeds=" ".join(f"{i}) {s};" for i, s in enumerate(seeds, 1)))


def parse_numbered_list(reply: str) -> list[str]:
    """Split ``"1) a; 2) b ..."`` (inline or one per line) into items."""
    marks = list(_ITEM_RE.finditer(reply))
    if not marks:
        raise ParseError("reply contains no numbered items", reply)
    items = []
    for i, m in enumerate(marks):
        end = marks[i + 1].start() if i + 1 < len(marks) else len(reply)
        text = reply[m.end():end].strip().rstrip(";").strip()
        if text:
            items.append(text)
    if not items:
        raise ParseError("numbered items are all empty", reply)
    return items


def expand_prompts(seeds: Sequence[str], client) -> list[str]:
    """Ask ``client`` for paraphrases of ``seeds``; return seeds plus novel prompts."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("prompt expansion needs at least 3 seed prompts")
    reply = client.complete(build_meta_prompt(seeds))
    out, seen = [], set()
    for p in seeds + parse_numbered_list(reply):
        key = p.strip().casefold()
        if key not in seen:
            seen.add(key)
            out.append(p.strip())
    return out


# ---------------------------------------------------------------- manifests & mixtures

@dataclass
class TaskManifest:
    name: str
    task_type: str
    source: str | None = None
    pretrain_weight: float = 0.0
    finetune_weight: float = 0.0
    templates: list[str] = field(default_factory=list)

    def weight(self, stage: str) -> float:
        if stage not in STAGES:
            raise ConfigError(f"unknown mixture stage {stage!r}")
        return self.pretrain_weight if stage == "pretrain" else self.finetune_weight


@dataclass
class Manifest:
    datasets: list[TaskManifest]
    templates: dict[str, PromptTemplate]
    root: Path = Path(".")

    def by_name(self, name: str) -> TaskManifest:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)


def _parse_manifest(doc: dict, root: Path) -> Manifest:
    tpath = doc.get("templates")
    templates = load_templates(root / tpath if tpath else None)
    datasets = []
    for entry in doc.get("datasets") or []:
        tm = TaskManifest(
            name=entry["name"], task_type=entry["task_type"], source=entry.get("source"),
            pretrain_weight=float(entry.get("pretrain_weight") or 0.0),
            finetune_weight=float(entry.get("finetune_weight") or 0.0),
            templates=list(entry.get("templates") or []),
        )
        if tm.task_type not in TASK_TYPES:
            raise ConfigError(f"{tm.name}: unknown task type {tm.task_type!r}")
        if tm.pretrain_weight < 0 or tm.finetune_weight < 0:
            raise ConfigError(f"{tm.name}: weights must be non-negative")
        for tid in tm.templates:
            if tid not in templates:
                raise ConfigError(f"{tm.name}: unknown template id {tid!r}")
        datasets.append(tm)
    return Manifest(datasets, templates, root)


def load_manifest(path=None) -> Manifest:
    """Load a manifest file; with no path, the bundled 50-dataset mixture."""
    if path is None:
        raw = resources.files("prefixmm.resources").joinpath("mixture.yaml").read_text()
        return _parse_manifest(yaml.safe_load(raw), Path("."))
    path = Path(path)
    return _parse_manifest(yaml.safe_load(path.read_text()) or {}, path.parent)


@dataclass
class MixtureSpec:
    stage: str
    datasets: list[str]
    weights: np.ndarray
    seed: int = 0

    @classmethod
    def from_manifest(cls, manifest: Manifest, stage: str, seed: int = 0) -> "MixtureSpec":
        chosen = [d for d in manifest.datasets if d.weight(stage) > 0]
        raw = np.array([d.weight(stage) for d in chosen], dtype=np.float64)
        if raw.size == 0 or raw.sum() <= 0:
            raise ConfigError(f"no dataset has a positive {stage} weight")
        return cls(stage, [d.name for d in chosen], raw / raw.sum(), seed)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or len(w) != len(self.datasets):
            raise ConfigError("one weight per dataset is required")
        if (w < 0).any() or w.sum() <= 0:
            raise ConfigError("mixture weights must be non-negative and not all zero")
        self.weights = w / w.sum()


def weighted_sample(spec: MixtureSpec, rng: np.random.Generator) -> int:
    """Draw a dataset index with probability equal to its weight."""
    cdf = np.cumsum(spec.weights)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


# ---------------------------------------------------------------- samples

@dataclass
class InstructionSample:
    media: str | None
    prompt: str
    response: str
    dataset: str
    media_kind: str | None = None

    def __post_init__(self):
        if not self.response:
            raise DataError(f"{self.dataset}: empty response")


def load_records(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
    return out


def write_records(records: Iterable[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def record_to_samples(record: dict, task: TaskManifest, templates: dict[str, PromptTemplate],
                      rng: np.random.Generator | None = None, media_root: Path | None = None
                      ) -> list[InstructionSample]:
    kind = media_kind(task.task_type)
    media = record.get("media")
    if (media is not None) != (kind is not None):
        raise DataError(f"{task.name} record {record.get('id')}: media presence does not match "
                        f"task type {task.task_type!r}")
    if media is not None and media_root is not None:
        media = str(media_root / media)
    if not task.templates:
        raise ConfigError(f"{task.name}: no templates configured")
    tid = task.templates[0] if rng is None or len(task.templates) == 1 else \
        task.templates[int(rng.integers(len(task.templates)))]
    tmpl = templates[tid]
    fields = dict(record.get("fields") or {})
    if task.task_type == "dialog":
        turns = fields.get("turns") or []
        samples, history = [], []
        for turn in turns:
            prompt = render_prompt(tmpl, {"dialog": format_dialog(history, turn["user"])})
            samples.append(InstructionSample(media, prompt, turn["assistant"], task.name, kind))
            history.append((turn["user"], turn["assistant"]))
        if not samples:
            raise DataError(f"{task.name} record {record.get('id')}: dialog has no turns")
        return samples
    prompt = render_prompt(tmpl, fields)
    return [InstructionSample(media, prompt, record.get("response") or "", task.name, kind)]


def load_dataset_samples(manifest: Manifest, task: TaskManifest, rng=None) -> list[InstructionSample]:
    if task.source is None:
        raise ConfigError(f"{task.name}: no record source configured")
    path = manifest.root / task.source
    out = []
    for rec in load_records(path):
        out.extend(record_to_samples(rec, task, manifest.templates, rng, media_root=path.parent))
    return out


class MixtureStream:
    """Per-example sampling with replacement: pick a dataset by weight, then a
    sample uniformly within it. One seeded generator drives both choices."""

    def __init__(self, spec: MixtureSpec, samples: dict[str, list[InstructionSample]], seed: int | None = None):
        missing = [n for n in spec.datasets if not samples.get(n)]
        if missing:
            raise DataError(f"no samples for datasets {missing}")
        self.spec = spec
        self.samples = samples
        self.rng = np.random.default_rng(spec.seed if seed is None else seed)

    def __iter__(self) -> Iterator[InstructionSample]:
        while True:
            yield self.next()

    def next(self) -> InstructionSample:
        name = self.spec.datasets[weighted_sample(self.spec, self.rng)]
        pool = self.samples[name]
        return pool[int(self.rng.integers(len(pool)))]

    def next_batch(self, n: int) -> list[InstructionSample]:
        return [self.next() for _ in range(n)]


def mixture_from_manifest(manifest: Manifest, stage: str, seed: int = 0) -> MixtureStream:
    spec = MixtureSpec.from_manifest(manifest, stage, seed)
    rng = np.random.default_rng(seed)
    samples = {name: load_dataset_samples(manifest, manifest.by_name(name), rng) for name in spec.datasets}
    return MixtureStream(spec, samples, seed)


@dataclass
class TokenCounts:
    per_dataset: dict[str, int]
    total: int


def count_tokens(samples: Iterable[InstructionSample], tokenizer: ByteTokenizer | None = None,
                 vision_tokens: int = 0) -> TokenCounts:
    """Exact token totals: BOS + prompt + response + EOS, plus ``vision_tokens``
    (and one media-boundary token) for samples that carry media."""
    tokenizer = tokenizer or ByteTokenizer()
    per: dict[str, int] = {}
    for s in samples:
        n = len(tokenizer.encode(s.prompt, bos=True)) + len(tokenizer.encode(s.response, eos=True))
        if s.media is not None and vision_tokens:
            n += vision_tokens + 1
        per[s.dataset] = per.get(s.dataset, 0) + n
    return TokenCounts(per, sum(per.values()))
