"""Open-VQA judging and aggregation, human-score sheet validation, fairness padding."""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError
from .vision import PATCH, ImageTensor

log = logging.getLogger(__name__)

IMAGE_CATEGORIES = ("OCR", "Counting", "Reasoning", "Place", "Color", "Spatial", "Action", "Others")
VIDEO_CATEGORIES = ("Action(Y/N)", "Others")
CATEGORIES = IMAGE_CATEGORIES + tuple(c for c in VIDEO_CATEGORIES if c not in IMAGE_CATEGORIES)

JUDGE_TEMPLATE = 'Given the question "{question}", does the answer "{prediction}" imply the answer "{ground_truth}"? Answer with Yes or No.'
VERDICTS = ("yes", "no", "error")


@dataclass(frozen=True)
class OpenVQAItem:
    id: str
    media: str | None
    question: str
    answer: str
    category: str
    media_kind: str = "image"

    def __post_init__(self):
        if not self.answer.strip():
            raise DataError(f"item {self.id}: empty ground-truth answer")
        allowed = VIDEO_CATEGORIES if self.media_kind == "video" else IMAGE_CATEGORIES
        if self.category not in allowed:
            raise DataError(f"item {self.id}: category {self.category!r} not in {allowed}")

    @classmethod
    def from_record(cls, rec: dict) -> "OpenVQAItem":
        try:
            return cls(id=str(rec["id"]), media=rec.get("media"), question=rec["question"],
                       answer=rec["answer"], category=rec["category"],
                       media_kind=rec.get("media_kind", "image"))
        except KeyError as exc:
            raise DataError(f"item record missing field {exc}") from exc


@dataclass(frozen=True)
class JudgeVerdict:
    item_id: str
    prediction: str
    verdict: str
    source: str
    raw: str

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValueError(f"verdict must be one of {VERDICTS}")


def load_items(path) -> list[OpenVQAItem]:
    items = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                items.append(OpenVQAItem.from_record(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
    ids = [it.id for it in items]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate item ids")
    return items


def write_jsonl(rows: Iterable[dict], path) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------- judging

def build_judge_prompt(question: str, prediction: str, ground_truth: str) -> str:
    for name, value in (("question", question), ("prediction", prediction), ("ground_truth", ground_truth)):
        if not value:
            raise ValueError(f"{name} must be non-empty")
    return JUDGE_TEMPLATE.format(question=question, prediction=prediction, ground_truth=ground_truth)


_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> str:
    return " ".join(text.lower().translate(_PUNCT).split())


def stub_verdict(ground_truth: str, prediction: str) -> bool:
    gt, pred = normalize_answer(ground_truth), normalize_answer(prediction)
    return bool(gt) and f" {gt} " in f" {pred} "


_LEADING = re.compile(r"^\W*(yes|no)\b", re.IGNORECASE)


def parse_judge_reply(reply: str) -> str:
    m = _LEADING.match(reply)
    return m.group(1).lower() if m else "error"


def judge(client, item: OpenVQAItem, prediction: str) -> JudgeVerdict:
    """A yes/no verdict on whether ``prediction`` implies the item's answer.

    Stub clients apply a whole-word containment rule locally; remote clients
    receive the judge prompt and their reply must start with Yes or No.
    Transport failures propagate after the client's own retries.
    """
    source = getattr(client, "source", "remote")
    if source == "stub":
        v = "yes" if stub_verdict(item.answer, prediction) else "no"
        return JudgeVerdict(item.id, prediction, v, "stub", v.capitalize())
    if not prediction.strip():
        return JudgeVerdict(item.id, prediction, "no", "remote", "")
    reply = client.complete(build_judge_prompt(item.question, prediction, item.answer))
    return JudgeVerdict(item.id, prediction, parse_judge_reply(reply), "remote", reply)


def judge_all(client, items: Sequence[OpenVQAItem], predictions: dict[str, str],
              max_workers: int = 4) -> list[JudgeVerdict]:
    """Judge every item, with at most ``max_workers`` requests in flight; order follows ``items``."""
    def one(it):
        return judge(client, it, predictions[it.id])

    if getattr(client, "source", "remote") == "stub" or max_workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(one, items))


# ---------------------------------------------------------------- aggregation

@dataclass
class CategoryReport:
    counts: dict[str, tuple[int, int]]
    errors: int = 0

    @property
    def correct(self) -> int:
        return sum(c for c, _ in self.counts.values())

    @property
    def total(self) -> int:
        return sum(t for _, t in self.counts.values())

    @property
    def overall(self) -> float:
        return round(100.0 * self.correct / self.total, 2) if self.total else 0.0

    def table(self, label: str = "Model") -> str:
        cats = list(self.counts)
        header = [""] + cats + ["Overall"]
        row = [label] + [f"{c}/{t}" for c, t in self.counts.values()] + [f"{self.overall:.2f}"]
        widths = [max(len(h), len(r)) for h, r in zip(header, row)]
        fmt = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
        lines = [fmt(header), "-+-".join("-" * w for w in widths), fmt(row)]
        if self.errors:
            lines.append(f"({self.errors} unparseable verdicts excluded)")
        return "\n".join(lines)

    def records(self) -> list[dict]:
        rows = [{"category": k, "correct": c, "total": t} for k, (c, t) in self.counts.items()]
        rows.append({"category": "Overall", "correct": self.correct, "total": self.total,
                     "accuracy": self.overall, "errors": self.errors})
        return rows


def report_from_counts(counts: dict[str, tuple[int, int]]) -> CategoryReport:
    return CategoryReport({k: (int(c), int(t)) for k, (c, t) in counts.items()})


def aggregate(verdicts: Iterable[JudgeVerdict], items: Sequence[OpenVQAItem]) -> CategoryReport:
    by_id = {it.id: it for it in items}
    seen: set[str] = set()
    tally: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    errors = 0
    for v in verdicts:
        if v.item_id not in by_id:
            raise DataError(f"verdict for unknown item {v.item_id!r}")
        if v.item_id in seen:
            raise DataError(f"duplicate verdict for item {v.item_id!r}")
        seen.add(v.item_id)
        if v.verdict == "error":
            errors += 1
            continue
        cell = tally[by_id[v.item_id].category]
        cell[0] += v.verdict == "yes"
        cell[1] += 1
    if errors:
        log.warning("%d verdicts were unparseable and excluded", errors)
    order = [c for c in CATEGORIES if c in tally]
    return CategoryReport({c: tuple(tally[c]) for c in order}, errors)


def write_report(report: CategoryReport, out_dir, label: str = "Model") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, jsonl = out / "report.txt", out / "report.jsonl"
    txt.write_text(report.table(label) + "\n")
    write_jsonl(report.records(), jsonl)
    return txt, jsonl


# ---------------------------------------------------------------- human evaluation

@dataclass
class HumanEvalSheet:
    annotator: str
    scores: dict[str, dict[str, int]]  # question id -> model -> score

    @classmethod
    def from_dict(cls, d: dict) -> "HumanEvalSheet":
        return cls(str(d["annotator"]), {str(q): dict(m) for q, m in d["scores"].items()})


@dataclass
class SheetReport:
    violations: list[str] = field(default_factory=list)
    ties: int = 0
    means: dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.violations


MAX_TIES = 10


def validate_human_sheet(sheet: HumanEvalSheet) -> SheetReport:
    """Check score range, per-question tie width and the per-annotator tie budget.

    A tie is a group of models sharing one score on one question; groups of
    more than two models are violations.
    """
    rep = SheetReport()
    for q, per_model in sheet.scores.items():
        for model, s in per_model.items():
            if not isinstance(s, (int, np.integer)) or isinstance(s, bool) or not 1 <= s <= 5:
                rep.violations.append(f"question {q}, model {model}: score {s!r} outside 1..5")
        for score, n in Counter(per_model.values()).items():
            if n >= 2:
                rep.ties += 1
            if n > 2:
                tied = sorted(m for m, s in per_model.items() if s == score)
                rep.violations.append(f"question {q}: {n} models tied at {score} ({', '.join(tied)})")
    if rep.ties > MAX_TIES:
        rep.violations.append(f"annotator {sheet.annotator}: {rep.ties} ties exceeds {MAX_TIES}")
    totals: dict[str, list[float]] = defaultdict(list)
    for per_model in sheet.scores.values():
        for model, s in per_model.items():
            totals[model].append(float(s))
    rep.means = {m: float(np.mean(v)) for m, v in totals.items()}
    return rep


def load_sheet(path) -> HumanEvalSheet:
    import yaml
    return HumanEvalSheet.from_dict(yaml.safe_load(Path(path).read_text()))


# ---------------------------------------------------------------- padding

def pad_image(img: ImageTensor, pixels: int = 8, snap: int = PATCH) -> ImageTensor:
    """Zero-pad every side by ``pixels``, then pad further so both sides are multiples of ``snap``.

    The snap padding is split evenly; an odd remainder goes to the bottom/right.
    """
    if pixels < 0:
        raise ValueError("pixels must be >= 0")
    if pixels == 0:
        return img
    c, h, w = img.data.shape
    h1, w1 = h + 2 * pixels, w + 2 * pixels
    hh = -(-h1 // snap) * snap if snap else h1
    ww = -(-w1 // snap) * snap if snap else w1
    top = pixels + (hh - h1) // 2
    left = pixels + (ww - w1) // 2
    out = np.zeros((c, hh, ww), dtype=img.data.dtype)
    out[:, top:top + h, left:left + w] = img.data
    return ImageTensor(out)

