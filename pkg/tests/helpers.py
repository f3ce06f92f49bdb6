"""Shared fixtures: synthetic images and scripted-backend scenarios."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ttsp.backend import ScriptedBackend
from ttsp.core import RunConfig
from ttsp.orchestrator import Task
from ttsp.vistool import ImageAsset


def make_image(width=64, height=48, seed=0) -> ImageAsset:
    rng = np.random.default_rng(seed)
    return ImageAsset(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def write_png(path: Path, width=64, height=48, seed=0) -> Path:
    Image.fromarray(make_image(width, height, seed).pixels).save(path, format="PNG")
    return path


def make_task(task_id="t1", options=True) -> Task:
    opts = (("A", "red"), ("B", "blue"), ("C", "green")) if options else None
    return Task(task_id, "What colour is the sign?", make_image(), opts)


def extraction_text(statement="the sign is blue", region=(0.1, 0.1, 0.4, 0.4)) -> str:
    payload = {"version": 1, "confirmed": [{"statement": statement, "region": list(region)}], "conflicts": []}
    return "Updated knowledge:\n```json\n" + json.dumps(payload) + "\n```"


def trace_turns(answer: str, entropy: float, zoom=True) -> list[dict]:
    turns = []
    if zoom:
        turns.append({"text": "Zooming on the sign.", "entropy": entropy,
                      "tool_call": {"bbox_2d": [0.1, 0.1, 0.4, 0.4], "label": "sign", "image_index": 0}})
    turns.append({"text": "The sign looks like this.", "answer": answer, "entropy": entropy})
    return turns


def audit_records(task_id="t1", rounds=4, traces=8, correct="B") -> list[dict]:
    """A full multi-round scenario: distinct entropies per sample, extraction each round.

    Fresh samples alternate between the correct answer and "A"; guided
    samples all answer correctly with lower entropy.
    """
    recs = []
    for n in range(1, rounds + 1):
        for k in range(traces):
            answer = correct if k % 2 == 0 else "A"
            recs.append({"task": task_id, "round": n, "mode": "fresh", "sample": k, "memory": "*",
                         "turns": trace_turns(answer, 0.2 + 0.1 * k)})
            recs.append({"task": task_id, "round": n, "mode": "guided", "sample": k, "memory": "*",
                         "turns": trace_turns(correct, 0.05 + 0.02 * k)})
        recs.append({"task": task_id, "round": n, "mode": "extract", "sample": 0, "memory": "*",
                     "turns": [{"text": extraction_text(), "entropy": 0.0}]})
    return recs


def audit_backend(task_ids=("t1",), **kw) -> ScriptedBackend:
    recs = []
    for t in task_ids:
        recs.extend(audit_records(t, **kw))
    return ScriptedBackend.from_records(recs)


REFERENCE_SETTINGS = RunConfig(rounds=4, traces_per_round=8, fresh_ratio=0.4, filter_ratio=0.4, vote_temperature=1.0)


STATEMENTS = tuple(f"claim {c}" for c in "abcdefgh")


def random_payload(rng) -> tuple[str, bool]:
    """Random extraction output over a small statement pool; (text, well_formed).

    Roughly one in four outputs is corrupted in a way the parser must reject.
    """
    pool = list(STATEMENTS)
    rng.shuffle(pool)
    n_fact = rng.randint(0, 3)
    facts = [{"statement": s} for s in pool[:n_fact]]
    for f in facts:
        if rng.random() < 0.5:
            x, y = rng.uniform(0, 0.5), rng.uniform(0, 0.5)
            f["region"] = [x, y, x + rng.uniform(0.01, 0.5), y + rng.uniform(0.01, 0.5)]
    conflicts = []
    rest = pool[n_fact:]
    while len(rest) >= 2 and rng.random() < 0.5:
        k = rng.randint(2, min(3, len(rest)))
        conflicts.append({"claims": rest[:k], "directive_text": "look closer"})
        rest = rest[k:]
    # occasionally name a fact in a conflict too; the parser keeps it as a claim
    if facts and conflicts and rng.random() < 0.2:
        conflicts[0]["claims"].append(facts[0]["statement"])
    payload = {"version": 1, "confirmed": facts, "conflicts": conflicts}
    text = "notes\n```json\n" + json.dumps(payload) + "\n```"
    corruption = rng.random()
    if corruption < 0.07:
        return text.replace("```json", "``` json").replace("{", "{{", 1), False
    if corruption < 0.14:
        payload["extra"] = 1
        return "```json\n" + json.dumps(payload) + "\n```", False
    if corruption < 0.2:
        return json.dumps(payload), False
    if corruption < 0.25:
        payload["confirmed"] = {"statement": "x"}
        return "```\n" + json.dumps(payload) + "\n```", False
    return text, True


def sc_instance(task_id: str, rng, samples=32, letters="ABC") -> tuple[list[dict], list[str], list[float]]:
    """Single-round scripted instance: sample k answers answers[k] with entropy entropies[k]."""
    weights = [rng.random() for _ in letters]
    answers = rng.choices(letters, weights=weights, k=samples)
    entropies = [round(rng.uniform(0.05, 1.5), 6) for _ in range(samples)]
    recs = [{"task": task_id, "round": 1, "mode": "fresh", "sample": k, "memory": "*",
             "turns": trace_turns(answers[k], entropies[k], zoom=rng.random() < 0.5)}
            for k in range(samples)]
    return recs, answers, entropies


def write_eval_fixture(root: Path, n=20, failing=("q19",), wrong=("q20",)) -> tuple[Path, Path]:
    """Dataset + script for ``n`` instances; all answer B except the failing/wrong ids.

    Returns (dataset path, script path).
    """
    (root / "img").mkdir(parents=True, exist_ok=True)
    data_lines, script = [], []
    for i in range(1, n + 1):
        qid = f"q{i}"
        write_png(root / "img" / f"{qid}.png", seed=i)
        gold = "C" if qid in wrong else "B"
        data_lines.append(json.dumps({"id": qid, "image": f"img/{qid}.png", "question": "What colour is the sign?",
                                      "options": {"A": "red", "B": "blue", "C": "green"}, "answer": gold,
                                      "split": "even" if i % 2 == 0 else "odd"}))
        if qid in failing:
            script.append({"task": qid, "turns": [{"error": "EndpointUnavailable"}]})
        else:
            script.extend(audit_records(qid))
    ds = root / "data.jsonl"
    ds.write_text("\n".join(data_lines) + "\n", encoding="utf-8")
    sp = root / "script.jsonl"
    sp.write_text("\n".join(json.dumps(r) for r in script) + "\n", encoding="utf-8")
    return ds, sp
