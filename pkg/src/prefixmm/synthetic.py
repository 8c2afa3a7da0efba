"""Procedural stand-in data: shape images, a memorization set, a small corpus
for every manifest dataset, and an Open-VQA fixture with the benchmark's
category schema."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
import yaml

from .data import InstructionSample, load_manifest, media_kind
from .evaluation import IMAGE_CATEGORIES, VIDEO_CATEGORIES
from .vision import ImageTensor, VideoClip, save_rpf, save_video

COLORS = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "white": (1.0, 1.0, 1.0), "pink": (1.0, 0.5, 0.8),
    "cyan": (0.0, 1.0, 1.0), "gray": (0.5, 0.5, 0.5),
}
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
SHAPES = ("square", "circle")
BACKGROUNDS = ("dark", "light")

MEMO_QUESTIONS = (
    ("What color is the shape?", "color"),
    ("Where is the shape?", "position"),
    ("What shape is it?", "shape"),
    ("Is the background dark or light?", "background"),
)
MEMO_TEMPLATE = "{question} Give a short answer."


def shape_image(color: str, position: str, shape: str, background: str = "dark",
                resolution: int = 112) -> ImageTensor:
    bg = 0.1 if background == "dark" else 0.8
    img = np.full((3, resolution, resolution), bg, dtype=np.float32)
    h = resolution // 2
    r0 = 0 if position.startswith("top") else h
    c0 = 0 if position.endswith("left") else h
    yy, xx = np.mgrid[0:h, 0:h]
    if shape == "square":
        mask = np.zeros((h, h), dtype=bool)
        mask[h // 8:h - h // 8, h // 8:h - h // 8] = True
    else:
        mask = (yy - h / 2) ** 2 + (xx - h / 2) ** 2 < (h / 2.5) ** 2
    for ch in range(3):
        img[ch, r0:r0 + h, c0:c0 + h][mask] = COLORS[color][ch]
    return ImageTensor(img)


def repeated_bigrams(text: str) -> list[bytes]:
    """Byte bigrams occurring more than once; a 2-gram blocking decoder cannot emit such text."""
    b = text.encode("utf-8")
    seen, dup = set(), []
    for i in range(len(b) - 1):
        g = b[i:i + 2]
        if g in seen:
            dup.append(g)
        seen.add(g)
    return dup


def memorization_set(n_images: int = 8, resolution: int = 112, questions=MEMO_QUESTIONS
                     ) -> tuple[dict[str, ImageTensor], list[InstructionSample]]:
    """``n_images`` shape images times len(questions) single-answer samples.

    Returns (media store, samples); sample media fields are keys into the store.
    """
    names = list(COLORS)
    if not 1 <= n_images <= len(names):
        raise ValueError(f"n_images must lie in 1..{len(names)}")
    store, samples = {}, []
    for i in range(n_images):
        attrs = {"color": names[i], "position": POSITIONS[i % 4],
                 "shape": SHAPES[(i // 4) % 2], "background": BACKGROUNDS[(i // 2) % 2]}
        ref = f"shape-{i}"
        store[ref] = shape_image(attrs["color"], attrs["position"], attrs["shape"],
                                 attrs["background"], resolution)
        for q, key in questions:
            samples.append(InstructionSample(ref, MEMO_TEMPLATE.format(question=q), attrs[key],
                                             "shapes", "image"))
    return store, samples


# ---------------------------------------------------------------- stand-in corpus

def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


_FIELD_VALUES = {
    "question": lambda a: f"What color is the {a['shape']}",
    "hypothesis": lambda a: f"There is a {a['color']} {a['shape']}.",
    "options": lambda a: f"1. {a['color']} 2. {'blue' if a['color'] != 'blue' else 'red'}",
    "meme": lambda a: f"a {a['color']} {a['shape']}",
    "instruction": lambda a: f"Name a color similar to {a['color']}.",
}


def _record(task_type: str, placeholders: set[str], attrs: dict, media: str | None, idx: int) -> dict:
    fields = {k: fn(attrs) for k, fn in _FIELD_VALUES.items() if k in placeholders}
    if task_type == "dialog":
        fields["turns"] = [
            {"user": "What is in the image?", "assistant": f"A {attrs['color']} {attrs['shape']}."},
            {"user": "Where is it?", "assistant": f"In the {attrs['position']}."},
        ]
        return {"id": idx, "media": media, "fields": fields}
    if task_type == "text instructions":
        response = f"{attrs['color']} is close to {list(COLORS)[(idx + 1) % len(COLORS)]}."
    elif task_type in ("vqa", "video vqa"):
        response = attrs["color"]
    elif task_type == "classification":
        response = attrs["shape"]
    else:
        response = f"A {attrs['color']} {attrs['shape']} in the {attrs['position']}."
    return {"id": idx, "media": media, "fields": fields, "response": response}


def write_standin_corpus(root, per_dataset: int = 4, resolution: int = 56, n_frames: int = 2,
                         seed: int = 0, manifest=None) -> Path:
    """Write tiny records for every dataset of ``manifest`` (default: the bundled mixture).

    Produces ``root/manifest.yaml`` with a ``source`` per dataset, JSONL record
    files under ``root/data`` and shared media under ``root/data/media``.
    Returns the manifest path.
    """
    root = Path(root)
    data_dir = root / "data"
    media_dir = data_dir / "media"
    media_dir.mkdir(parents=True, exist_ok=True)
    manifest = manifest or load_manifest()
    rng = np.random.default_rng(seed)
    names = list(COLORS)
    n_media = max(per_dataset, 4)
    attrs_list = []
    for i in range(n_media):
        a = {"color": names[int(rng.integers(len(names)))], "position": POSITIONS[i % 4],
             "shape": SHAPES[int(rng.integers(2))]}
        attrs_list.append(a)
        img = shape_image(a["color"], a["position"], a["shape"], resolution=resolution)
        save_rpf(img, media_dir / f"img_{i}.rpf")
        frames = [shape_image(a["color"], POSITIONS[(i + f) % 4], a["shape"], resolution=resolution)
                  for f in range(n_frames)]
        save_video(VideoClip(frames), media_dir / f"clip_{i}")
    entries = []
    for task in manifest.datasets:
        placeholders = set()
        for tid in task.templates:
            placeholders |= {p.lower() for p in manifest.templates[tid].placeholders}
        kind = media_kind(task.task_type)
        recs = []
        for j in range(per_dataset):
            k = j % n_media
            media = None if kind is None else (f"media/img_{k}.rpf" if kind == "image" else f"media/clip_{k}")
            recs.append(_record(task.task_type, placeholders, attrs_list[k], media, j))
        fname = f"{_slug(task.name)}.jsonl"
        with open(data_dir / fname, "w") as fh:
            for r in recs:
                fh.write(json.dumps(r) + "\n")
        entries.append({"name": task.name, "task_type": task.task_type, "source": f"data/{fname}",
                        "pretrain_weight": task.pretrain_weight, "finetune_weight": task.finetune_weight,
                        "templates": list(task.templates)})
    templates = {tid: {"task_type": t.task_type, "text": t.text} for tid, t in manifest.templates.items()}
    (root / "templates.yaml").write_text(yaml.safe_dump({"templates": templates}, sort_keys=False))
    path = root / "manifest.yaml"
    path.write_text(yaml.safe_dump({"templates": "templates.yaml", "datasets": entries}, sort_keys=False))
    return path


# ---------------------------------------------------------------- Open-VQA fixture

def _vqa_items(attrs: dict, i: int) -> dict[str, tuple[str, str]]:
    return {
        "OCR": ("What word is written next to the shape?", attrs["color"]),
        "Counting": ("How many shapes are there?", "one"),
        "Reasoning": ("Could the shape roll?", "yes" if attrs["shape"] == "circle" else "no"),
        "Place": ("Which corner is the shape in?", attrs["position"]),
        "Color": ("What color is the shape?", attrs["color"]),
        "Spatial": ("Is the shape on the left or the right?",
                    "left" if attrs["position"].endswith("left") else "right"),
        "Action": ("Is the shape moving?", "no"),
        "Others": ("What shape is shown?", attrs["shape"]),
    }


def write_openvqa_fixture(root, n_images: int = 4, n_videos: int = 4, resolution: int = 112,
                          n_frames: int = 2, seed: int = 0) -> Path:
    """About 40 judged-QA items across every image and video category.

    Writes media under ``root/media`` and items to ``root/items.jsonl``; returns the items path.
    """
    root = Path(root)
    media_dir = root / "media"
    media_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = list(COLORS)
    items = []
    for i in range(n_images):
        a = {"color": names[int(rng.integers(len(names)))], "position": POSITIONS[i % 4],
             "shape": SHAPES[i % 2]}
        ref = f"media/img_{i}.rpf"
        save_rpf(shape_image(a["color"], a["position"], a["shape"], resolution=resolution), root / ref)
        for cat in IMAGE_CATEGORIES:
            q, ans = _vqa_items(a, i)[cat]
            items.append({"id": f"img{i}-{cat.lower()}", "media": ref, "question": q, "answer": ans,
                          "category": cat, "media_kind": "image"})
    for i in range(n_videos):
        a = {"color": names[int(rng.integers(len(names)))], "shape": SHAPES[i % 2]}
        moving = i % 2 == 0
        frames = [shape_image(a["color"], POSITIONS[(i + (f if moving else 0)) % 4], a["shape"],
                              resolution=resolution) for f in range(n_frames)]
        ref = f"media/clip_{i}"
        save_video(VideoClip(frames), root / ref)
        pairs = {"Action(Y/N)": ("Is the shape moving?", "yes" if moving else "no"),
                 "Others": ("What shape is in the video?", a["shape"])}
        for cat in VIDEO_CATEGORIES:
            q, ans = pairs[cat]
            items.append({"id": f"vid{i}-{_slug(cat)}", "media": ref, "question": q, "answer": ans,
                          "category": cat, "media_kind": "video"})
    path = root / "items.jsonl"
    with open(path, "w") as fh:
        for it in items:
            fh.write(json.dumps(it) + "\n")
    return path
