import io
import json
import urllib.error
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from prefixmm.clients import ChatCompletionClient, StubClient
from prefixmm.errors import DataError, TransportError
from prefixmm.evaluation import (JUDGE_TEMPLATE, JudgeVerdict, OpenVQAItem, aggregate, build_judge_prompt,
                                 judge, judge_all, load_items, load_sheet, pad_image, parse_judge_reply,
                                 report_from_counts, stub_verdict, validate_human_sheet, write_report)
from prefixmm.synthetic import write_openvqa_fixture
from prefixmm.vision import ImageTensor

HERE = Path(__file__).parent
FIX = HERE / "fixtures"


def counts(name):
    return {k: tuple(v) for k, v in yaml.safe_load((FIX / name).read_text()).items()}


# ---------------------------------------------------------------- judge prompt

def test_judge_prompt_golden():
    got = build_judge_prompt("What color is the car?", "It is red.", "red")
    assert (got + "\n").encode("utf-8") == (HERE / "golden" / "judge_prompt.txt").read_bytes()


def test_judge_prompt_substitution_sites():
    out = build_judge_prompt("QQ", "PP", "GG")
    assert out.index("QQ") < out.index("PP") < out.index("GG")
    assert out.count('"') == 6
    assert out.endswith("? Answer with Yes or No.")


def test_embedded_quotes_survive():
    out = build_judge_prompt('Is it "big"?', 'He said "yes"', "yes")
    assert 'question "Is it "big"?"' in out and 'answer "He said "yes""' in out


@pytest.mark.parametrize("args", [("", "p", "g"), ("q", "", "g"), ("q", "p", "")])
def test_judge_prompt_rejects_empty(args):
    with pytest.raises(ValueError):
        build_judge_prompt(*args)


@given(st.text(min_size=1), st.text(min_size=1), st.text(min_size=1))
def test_judge_prompt_is_plain_substitution(q, p, g):
    out = build_judge_prompt(q, p, g)
    head = 'Given the question "' + q + '", does the answer "' + p + '" imply the answer "'
    assert out == head + g + '"? Answer with Yes or No.'
    assert JUDGE_TEMPLATE.count("{") == 3


# ---------------------------------------------------------------- verdicts

@pytest.mark.parametrize("gt,pred,ok", [
    ("red", "The car is red.", True), ("red", "bored", False), ("Red", "RED!", True),
    ("top left", "It is in the top-left.", True), ("top left", "left top", False),
    ("one", "", False), ("3", "there are 3 cats", True),
])
def test_stub_rule(gt, pred, ok):
    assert stub_verdict(gt, pred) is ok


@pytest.mark.parametrize("reply,verdict", [
    ("Yes", "yes"), ("Yes, it does.", "yes"), ("no.", "no"), ("  NO", "no"), ('"Yes"', "yes"),
    ("Yesterday", "error"), ("I think yes", "error"), ("", "error"), ("Nope", "error"),
])
def test_parse_reply(reply, verdict):
    assert parse_judge_reply(reply) == verdict


ITEM = OpenVQAItem("i1", None, "What color?", "red", "Color")


def test_judge_with_remote_style_stub():
    client = StubClient("Yes, it does.")
    client.source = "remote"
    v = judge(client, ITEM, "It is red.")
    assert (v.verdict, v.source, v.raw) == ("yes", "remote", "Yes, it does.")
    assert client.prompts == [build_judge_prompt("What color?", "It is red.", "red")]
    assert judge(client, ITEM, "  ").verdict == "no"
    assert len(client.prompts) == 1


def test_judge_stub_is_local():
    client = StubClient()
    assert judge(client, ITEM, "a red car").verdict == "yes"
    assert client.prompts == []


def test_judge_all_keeps_order_with_workers():
    client = StubClient(lambda p: "Yes" if '"red"?' in p else "No")
    client.source = "remote"
    items = [OpenVQAItem(f"i{k}", None, "q", "red" if k % 2 else "blue", "Color") for k in range(12)]
    out = judge_all(client, items, {it.id: "x" for it in items}, max_workers=4)
    assert [v.item_id for v in out] == [it.id for it in items]
    assert [v.verdict for v in out] == ["yes" if k % 2 else "no" for k in range(12)]


def test_item_validation():
    with pytest.raises(DataError):
        OpenVQAItem("x", None, "q", " ", "Color")
    with pytest.raises(DataError):
        OpenVQAItem("x", None, "q", "a", "Action(Y/N)", "image")
    with pytest.raises(DataError):
        OpenVQAItem.from_record({"id": 1, "question": "q"})
    with pytest.raises(ValueError):
        JudgeVerdict("x", "p", "maybe", "stub", "")


# ---------------------------------------------------------------- aggregation

def _encode(counts_):
    items, verdicts = [], []
    kind = "video" if "Action(Y/N)" in counts_ else "image"
    for cat, (c, t) in counts_.items():
        for k in range(t):
            iid = f"{cat}-{k}"
            items.append(OpenVQAItem(iid, None, "q", "a", cat, kind))
            verdicts.append(JudgeVerdict(iid, "p", "yes" if k < c else "no", "stub", ""))
    return items, verdicts


@pytest.mark.parametrize("name,overall", [("image_category_counts.yaml", 76.16), ("video_category_counts.yaml", 66.22)])
def test_aggregation_reproduces_reported_overall(name, overall):
    c = counts(name)
    assert report_from_counts(c).overall == overall
    items, verdicts = _encode(c)
    rep = aggregate(verdicts, items)
    assert rep.counts == c and rep.overall == overall


def test_aggregation_permutation_invariant():
    items, verdicts = _encode(counts("image_category_counts.yaml"))
    rng = np.random.default_rng(0)
    shuffled = [verdicts[i] for i in rng.permutation(len(verdicts))]
    assert aggregate(shuffled, items).counts == aggregate(verdicts, items).counts


def test_aggregation_rejects_duplicates_and_unknown():
    items, verdicts = _encode({"Color": (1, 2)})
    with pytest.raises(DataError, match="duplicate"):
        aggregate(verdicts + verdicts[:1], items)
    with pytest.raises(DataError, match="unknown"):
        aggregate([JudgeVerdict("zzz", "p", "yes", "stub", "")], items)


def test_error_verdicts_excluded():
    items, verdicts = _encode({"Color": (1, 3)})
    verdicts[2] = JudgeVerdict(verdicts[2].item_id, "p", "error", "remote", "hmm")
    rep = aggregate(verdicts, items)
    assert rep.counts == {"Color": (1, 2)} and rep.errors == 1
    assert "1 unparseable" in rep.table()


def test_report_files(tmp_path):
    rep = report_from_counts(counts("video_category_counts.yaml"))
    txt, jsonl = write_report(rep, tmp_path, "Ours")
    assert "69/108" in txt.read_text() and "66.22" in txt.read_text()
    rows = [json.loads(x) for x in jsonl.read_text().splitlines()]
    assert rows[-1] == {"category": "Overall", "correct": 98, "total": 148, "accuracy": 66.22, "errors": 0}


def test_openvqa_fixture_covers_all_categories(tmp_path):
    items = load_items(write_openvqa_fixture(tmp_path, resolution=28))
    assert len(items) == 40
    assert {it.category for it in items if it.media_kind == "image"} == \
        {"OCR", "Counting", "Reasoning", "Place", "Color", "Spatial", "Action", "Others"}
    assert {it.category for it in items if it.media_kind == "video"} == {"Action(Y/N)", "Others"}
    p = tmp_path / "items.jsonl"
    p.write_text(p.read_text() + p.read_text().splitlines()[0] + "\n")
    with pytest.raises(DataError):
        load_items(p)


# ---------------------------------------------------------------- human sheets

def test_clean_sheet_passes():
    rep = validate_human_sheet(load_sheet(FIX / "sheet_clean.yaml"))
    assert rep.ok and rep.ties == 3
    assert rep.means["m1"] == pytest.approx(20 / 6)


def test_three_way_tie_flagged():
    rep = validate_human_sheet(load_sheet(FIX / "sheet_three_way_tie.yaml"))
    assert not rep.ok
    assert any("3 models tied" in v for v in rep.violations)


def test_eleven_ties_flagged():
    rep = validate_human_sheet(load_sheet(FIX / "sheet_eleven_ties.yaml"))
    assert rep.ties == 11
    assert rep.violations == ["annotator ann-c: 11 ties exceeds 10"]


def test_ten_ties_allowed_and_bad_scores():
    from prefixmm.evaluation import HumanEvalSheet
    sheet = HumanEvalSheet("a", {f"q{i}": {"m1": 4, "m2": 4, "m3": 1} for i in range(10)})
    assert validate_human_sheet(sheet).ok
    all_fives = HumanEvalSheet("b", {"q1": {"m1": 5, "m2": 5, "m3": 5, "m4": 5}})
    assert not validate_human_sheet(all_fives).ok
    bad = HumanEvalSheet("c", {"q1": {"m1": 6, "m2": 0, "m3": 2.5}})
    assert len(validate_human_sheet(bad).violations) == 3


# ---------------------------------------------------------------- padding

def test_pad_224_to_252():
    img = ImageTensor(np.ones((3, 224, 224), np.float32))
    out = pad_image(img).data
    assert out.shape == (3, 252, 252)
    # 224 + 16 = 240 -> 252: 12 extra split 6/6
    assert out[:, 14:238, 14:238].all()
    assert out[:, :14].sum() == 0 and out[:, 238:].sum() == 0


def test_pad_odd_remainder_goes_bottom_right():
    img = ImageTensor(np.ones((3, 25, 30), np.float32))
    out = pad_image(img).data
    # 41 -> 42 (1 extra: bottom), 46 -> 56 (10 extra: 5/5)
    assert out.shape == (3, 42, 56)
    rows = np.flatnonzero(out[0].any(axis=1))
    cols = np.flatnonzero(out[0].any(axis=0))
    assert (rows[0], 42 - rows[-1] - 1) == (8, 9)
    assert (cols[0], 56 - cols[-1] - 1) == (13, 13)


def test_pad_zero_is_identity():
    img = ImageTensor(np.ones((3, 5, 5), np.float32))
    assert pad_image(img, 0) is img
    with pytest.raises(ValueError):
        pad_image(img, -1)


# ---------------------------------------------------------------- HTTP client

class _Resp(io.BytesIO):
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


def _payload(text):
    return _Resp(json.dumps({"choices": [{"message": {"content": text}}]}).encode())


def test_chat_client_request_and_retry(monkeypatch):
    monkeypatch.delenv("PREFIXMM_BASE_URL", raising=False)
    calls = []

    def opener(req, timeout):
        calls.append(req)
        if len(calls) < 3:
            raise urllib.error.URLError("down")
        return _payload("Yes")

    c = ChatCompletionClient(model="judge-1", base_url="http://x/v1/", api_key="k", backoff=0, opener=opener)
    assert c.complete("hello") == "Yes"
    assert len(calls) == 3
    req = calls[-1]
    assert req.full_url == "http://x/v1/chat/completions"
    assert req.get_header("Authorization") == "Bearer k"
    body = json.loads(req.data)
    assert body["model"] == "judge-1" and body["messages"] == [{"role": "user", "content": "hello"}]


def test_chat_client_gives_up():
    def opener(req, timeout):
        raise urllib.error.URLError("down")
    c = ChatCompletionClient(base_url="http://x", backoff=0, max_retries=2, opener=opener)
    with pytest.raises(TransportError, match="3 attempts"):
        c.complete("hi")


def test_chat_client_malformed_payload():
    c = ChatCompletionClient(base_url="http://x", backoff=0, opener=lambda r, timeout: _Resp(b"{}"))
    with pytest.raises(TransportError, match="malformed"):
        c.complete("hi")
