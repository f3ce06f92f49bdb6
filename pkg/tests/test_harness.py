import json
import math

import pytest
from helpers import REFERENCE_SETTINGS, write_eval_fixture, write_png

from ttsp.backend import ScriptedBackend
from ttsp.core import RunConfig
from ttsp.errors import MissingImage, ParseError
from ttsp.harness import evaluate, load_dataset, load_report
from ttsp.harness.cli import CONFIG_FLAGS, build_parser, config_from_args, config_to_argv, main
from ttsp.harness.evaluate import RECORDS, read_records


@pytest.fixture
def fixture(tmp_path):
    ds, sp = write_eval_fixture(tmp_path)
    return tmp_path, ds, sp


def test_load_dataset(tmp_path):
    write_png(tmp_path / "a.png")
    lines = [
        {"id": "1", "image": "a.png", "question": "q", "options": {"a": "x", "b": "y"}, "answer": "b"},
        {"id": "2", "image": "a.png", "question": "q", "options": ["x", "y", "z"]},
        {"id": "3", "image": str(tmp_path / "a.png"), "question": "how many?", "answer": "Seven"},
    ]
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(json.dumps(x) for x in lines) + "\n\n")
    items = load_dataset(p)
    assert [i.id for i in items] == ["1", "2", "3"]
    assert items[0].options == (("A", "x"), ("B", "y")) and items[0].gold() == "B"
    assert [l for l, _ in items[1].options] == ["A", "B", "C"] and items[1].gold() is None
    assert items[2].options is None and items[2].gold() == "seven"


@pytest.mark.parametrize("line", [
    '{"id": "1", "image": "a.png", "question": "q", "options": {"A": "x", "A": "y"}}',
    '{"id": "1", "image": "a.png", "question": "q", "options": [["a", "x"], ["A", "y"]]}',
    '{"id": "1", "image": "a.png"}',
    '{"id": "1", "image": "a.png", "question": "q", "colour": "red"}',
    '{not json',
])
def test_dataset_errors_carry_line(tmp_path, line):
    write_png(tmp_path / "a.png")
    good = '{"id": "0", "image": "a.png", "question": "q"}'
    p = tmp_path / "d.jsonl"
    p.write_text(good + "\n" + line + "\n")
    with pytest.raises(ParseError) as err:
        load_dataset(p)
    assert err.value.line == 2


def test_dataset_missing_image(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "0", "image": "nope.png", "question": "q"}\n')
    with pytest.raises(MissingImage):
        load_dataset(p)


def test_evaluate_accuracy(fixture):
    root, ds, sp = fixture
    report = evaluate(load_dataset(ds), REFERENCE_SETTINGS, ScriptedBackend.from_jsonl(sp), concurrency=4,
                      out_dir=root / "runs")
    assert report.accuracy == 0.9 and (report.correct, report.scored, report.failed) == (18, 20, 1)
    assert [r.id for r in report.records] == [f"q{i}" for i in range(1, 21)]
    assert report.split_accuracy == {"even": 0.9, "odd": 0.9}
    assert report.round_tool_calls == (1.0, 1.0, 1.0, 1.0)
    # accuracy recomputed from the persisted records is identical
    recs = read_records(report.run_dir)
    scored = [r for r in recs if r.correct is not None]
    assert sum(r.correct for r in scored) / len(scored) == report.accuracy
    assert load_report(report.run_dir).summary() == report.summary()


def test_variant_snapshot(fixture):
    root, ds, sp = fixture
    report = evaluate(load_dataset(ds)[:2], REFERENCE_SETTINGS, ScriptedBackend.from_jsonl(sp), variant="no_wa")
    assert math.isinf(report.config.vote_temperature) and report.variant == "no_wa"
    assert report.summary()["config"]["vote_temperature"] == "inf"


class Interrupt(Exception):
    pass


class CountingBackend(ScriptedBackend):
    def __init__(self, *a, stop_at=None, **kw):
        super().__init__(*a, **kw)
        self.tasks = set()
        self.stop_at = stop_at

    async def chat(self, request):
        if request.key.task_id == self.stop_at:
            raise Interrupt
        self.tasks.add(request.key.task_id)
        return await super().chat(request)


def counting(sp, stop_at=None):
    b = CountingBackend(stop_at=stop_at)
    b._scripts = ScriptedBackend.from_jsonl(sp)._scripts
    return b


def test_resume_skips_finished_instances(fixture):
    root, ds, sp = fixture
    data = load_dataset(ds)
    with pytest.raises(Interrupt):
        evaluate(data, REFERENCE_SETTINGS, counting(sp, stop_at="q11"), concurrency=1, out_dir=root / "runs")
    run_dirs = list((root / "runs").iterdir())
    assert len(read_records(run_dirs[0])) == 10

    b = counting(sp)
    resumed = evaluate(data, REFERENCE_SETTINGS, b, concurrency=1, out_dir=root / "runs")
    assert resumed.checkpoint_hits == 10
    assert b.tasks == {f"q{i}" for i in range(11, 21)}

    clean = evaluate(data, REFERENCE_SETTINGS, ScriptedBackend.from_jsonl(sp), concurrency=3, out_dir=root / "fresh")
    assert resumed.summary() == clean.summary()
    strip = lambda r: {**r.to_dict(), "elapsed": 0}  # noqa: E731
    assert [strip(r) for r in resumed.records] == [strip(r) for r in clean.records]


def test_torn_checkpoint_line_is_redone(fixture):
    root, ds, sp = fixture
    data = load_dataset(ds)[:3]
    report = evaluate(data, REFERENCE_SETTINGS, ScriptedBackend.from_jsonl(sp), out_dir=root / "runs")
    path = root / "runs" / report.run_dir.split("/")[-1] / RECORDS
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:2]) + "\n" + lines[2][:20])
    again = evaluate(data, REFERENCE_SETTINGS, ScriptedBackend.from_jsonl(sp), out_dir=root / "runs")
    assert again.checkpoint_hits == 2 and again.accuracy == report.accuracy


def test_flag_mapping_is_total():
    fields = {f.name for f in __import__("dataclasses").fields(RunConfig)}
    assert {f.field for f in CONFIG_FLAGS} == fields
    cfg = RunConfig(rounds=3, traces_per_round=5, fresh_ratio=0.2, filter_ratio=0.6, vote_temperature=math.inf,
                    logprob_depth=7, entropy_window=12, max_turns=4, decode_temperature=0.7, top_p=0.9, top_k=40,
                    max_tokens=999, structured_knowledge=False, extraction_max_tokens=512, digest_budget=800,
                    turn_char_budget=90, trace_timeout=12.5)
    args = build_parser().parse_args(["simulate", "--scenario", "coverage", *config_to_argv(cfg)])
    assert config_from_args(args) == cfg
    args = build_parser().parse_args(["simulate", "--scenario", "coverage", *config_to_argv(RunConfig())])
    assert config_from_args(args) == RunConfig()


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("rounds: 2\ntraces: 6\ngamma: inf\nentropy_window: 0.2\n")
    args = build_parser().parse_args(["simulate", "--scenario", "coverage", "--config", str(cfg), "--traces", "9"])
    c = config_from_args(args)
    assert (c.rounds, c.traces_per_round, c.entropy_window) == (2, 9, 0.2) and math.isinf(c.vote_temperature)


def test_cli_exit_codes(fixture, capsys, tmp_path):
    root, ds, sp = fixture
    assert main(["bogus"]) == 1
    assert main(["run", "--dataset", str(ds), "--rho", "1.5", "--script", str(sp)]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: blue\n")
    assert main(["simulate", "--scenario", "coverage", "--config", str(bad)]) == 1
    out_root = root / "cli-runs"
    code = main(["run", "--dataset", str(ds), "--script", str(sp), "--out", str(out_root), "--rounds", "4",
                 "--traces", "8", "--alpha", "0.4", "--rho", "0.4"])
    assert code == 2  # q19 fails by construction
    assert "accuracy: 0.9000 (18/20)" in capsys.readouterr().out
    run_dir = next(out_root.iterdir())
    assert {"records.jsonl", "summary.json", "summary.txt", "manifest.json", "traces.jsonl"} <= \
        {p.name for p in run_dir.iterdir()}
    assert main(["report", str(run_dir)]) == 0
    assert "accuracy: 0.9000" in capsys.readouterr().out


def test_cli_single_and_simulate(fixture, capsys, tmp_path):
    root, ds, sp = fixture
    assert main(["single", "--dataset", str(ds), "--id", "q3", "--script", str(sp)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("answer: B") and "round 4: fresh 4, guided 4, kept 5/8" in out
    assert "confirmed: the sign is blue" in out
    assert main(["single", "--dataset", str(ds), "--id", "q19", "--script", str(sp)]) == 2

    assert main(["simulate", "--scenario", "coverage", "--k", "8", "--p", "0.3", "--trials", "20000"]) == 0
    assert "0.94" in capsys.readouterr().out
    csv_path = tmp_path / "sweep.csv"
    assert main(["sweep", "--parameter", "gamma", "--grid", "0.5,inf", "--trials", "50", "--rounds", "2",
                 "--out", str(csv_path)]) == 0
    assert csv_path.read_text().splitlines()[2].startswith("gamma,inf,")
