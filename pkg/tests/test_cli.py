"""CLI surface: subcommand behavior and exit-code contract."""

from __future__ import annotations

import json

import pytest

from conftest import GOLDEN_DIR, make_doc
from reag.cli import main


@pytest.fixture
def data_files(tmp_path):
    kb_path = tmp_path / "kb.jsonl"
    qa_path = tmp_path / "qa.jsonl"
    docs = [make_doc(f"d{i}", n_passages=2, image_ref=f"img://{i}").to_dict() for i in range(6)]
    kb_path.write_text("\n".join(json.dumps(d) for d in docs) + "\n")
    records = [
        {
            "query": {"question": f"What is the name of this thing? [q{i}]", "image_ref": f"img://{i}"},
            "ground_truth": {"alternatives": [f"entity{i}"]},
            "task": {"dataset": "infoseek", "kind": "entity"},
            "split_tags": ["unseen_q"],
            "oracle_doc": f"d{i}",
        }
        for i in range(3)
    ]
    qa_path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return kb_path, qa_path


def run_cli(capsys, *argv) -> tuple[int, str, str]:
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestExitCodes:
    def test_usage_error_is_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["no-such-command"])
        assert exc.value.code == 1

    def test_missing_required_flag_is_one(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval"])
        assert exc.value.code == 1

    def test_search_without_query_source_is_one(self, capsys, tmp_path, data_files):
        kb, _ = data_files
        index_path = tmp_path / "kb.index"
        run_cli(capsys, "index", "build", "--kb", str(kb), "--out", str(index_path))
        code, _, err = run_cli(capsys, "index", "search", "--index", str(index_path))
        assert code == 1
        assert "required" in err

    def test_data_error_is_two(self, capsys, tmp_path):
        qa = tmp_path / "qa.jsonl"
        qa.write_text("{not json\n")
        kb = tmp_path / "kb.jsonl"
        kb.write_text(json.dumps(make_doc("d0").to_dict()) + "\n")
        code, _, err = run_cli(capsys, "eval", "--kb", str(kb), "--qa", str(qa))
        assert code == 2
        assert "data error" in err

    def test_missing_file_is_two(self, capsys):
        code, _, _ = run_cli(capsys, "eval", "--kb", "/does/not/exist", "--qa", "/nor/this")
        assert code == 2

    def test_backend_error_is_three(self, capsys, data_files, tmp_path):
        kb, qa = data_files
        config = tmp_path / "backend.toml"
        config.write_text('[backend]\nkind = "http"\nendpoint = "http://127.0.0.1:1"\ntimeout_ms = 200\n')
        code, _, err = run_cli(capsys, "eval", "--kb", str(kb), "--qa", str(qa),
                               "--backend", str(config))
        assert code == 3
        assert "backend error" in err


class TestPromptsRender:
    def test_generator_system_matches_golden(self, capsys):
        code, out, _ = run_cli(capsys, "prompts", "render", "--template", "generator-system")
        assert code == 0
        assert out == (GOLDEN_DIR / "generator_system_prompt.txt").read_text()

    def test_critic_user_with_values(self, capsys):
        code, out, _ = run_cli(capsys, "prompts", "render", "--template", "critic-user",
                               "--question", "Q?", "--passage", "P.")
        assert code == 0
        assert "Q?" in out and "P." in out


class TestScore:
    def test_scores_jsonl(self, capsys, tmp_path):
        rows = [
            {"output": "<think>t</think><answer>Paris</answer>",
             "ground_truth": {"alternatives": ["paris"]},
             "task": {"dataset": "evqa", "kind": "single"}},
            {"output": "no tags",
             "ground_truth": {"alternatives": ["something else"]},
             "task": {"dataset": "infoseek", "kind": "entity"}},
        ]
        path = tmp_path / "in.jsonl"
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        code, out, _ = run_cli(capsys, "score", "--in", str(path))
        assert code == 0
        lines = [json.loads(line) for line in out.strip().splitlines()]
        assert lines[0]["task"] == 1 and lines[0]["format"] == 1
        assert lines[0]["total"] == pytest.approx(1.2)
        assert lines[1]["task"] == 0 and lines[1]["total"] == 0.0

    def test_malformed_record_is_data_error(self, capsys, tmp_path):
        path = tmp_path / "in.jsonl"
        path.write_text(json.dumps({"output": "x"}) + "\n")
        code, _, err = run_cli(capsys, "score", "--in", str(path))
        assert code == 2


class TestIndexCommands:
    def test_build_then_search(self, capsys, tmp_path, data_files):
        kb, _ = data_files
        index_path = tmp_path / "kb.index"
        code, _, err = run_cli(capsys, "index", "build", "--kb", str(kb), "--out", str(index_path))
        assert code == 0
        assert index_path.exists()
        code, out, _ = run_cli(capsys, "index", "search", "--index", str(index_path),
                               "--text", "title of d2", "-k", "3")
        assert code == 0
        hits = [json.loads(line) for line in out.strip().splitlines()]
        assert len(hits) == 3
        assert hits[0]["doc_id"] == "d2"  # exact metadata match ranks first
        assert hits[0]["score"] == pytest.approx(1.0)

    def test_search_with_raw_vector(self, capsys, tmp_path, data_files):
        kb, _ = data_files
        index_path = tmp_path / "kb.index"
        run_cli(capsys, "index", "build", "--kb", str(kb), "--out", str(index_path))
        from reag.backends import MockEmbedder
        vector = list(MockEmbedder(seed=0).embed("title of d1", "text").values)
        code, out, _ = run_cli(capsys, "index", "search", "--index", str(index_path),
                               "--vector", json.dumps(vector), "-k", "1")
        assert code == 0
        assert json.loads(out.strip())["doc_id"] == "d1"


class TestPipelineCommands:
    def test_retrieve_emits_per_record_lines(self, capsys, data_files):
        kb, qa = data_files
        code, out, _ = run_cli(capsys, "retrieve", "--kb", str(kb), "--qa", str(qa), "-k", "2")
        assert code == 0
        rows = [json.loads(line) for line in out.strip().splitlines()]
        assert len(rows) == 3
        assert all(len(r["doc_ids"]) == 2 for r in rows)

    def test_filter_emits_verdicts(self, capsys, data_files):
        kb, qa = data_files
        code, out, _ = run_cli(capsys, "filter", "--kb", str(kb), "--qa", str(qa), "-k", "2")
        assert code == 0
        rows = [json.loads(line) for line in out.strip().splitlines()]
        assert all(len(r["verdicts"]) == 4 for r in rows)  # 2 docs x 2 passages

    def test_answer_writes_results(self, capsys, data_files, tmp_path):
        kb, qa = data_files
        out_path = tmp_path / "answers.jsonl"
        code, _, _ = run_cli(capsys, "answer", "--kb", str(kb), "--qa", str(qa),
                             "--out", str(out_path))
        assert code == 0
        rows = [json.loads(line) for line in out_path.read_text().strip().splitlines()]
        assert len(rows) == 3
        assert all("reward" in r and "trace" in r for r in rows)

    def test_eval_deterministic_across_runs(self, capsys, data_files):
        kb, qa = data_files
        outputs = []
        for _ in range(2):
            code, out, _ = run_cli(capsys, "eval", "--kb", str(kb), "--qa", str(qa))
            assert code == 0
            outputs.append(out)
        assert outputs[0] == outputs[1]
        report = json.loads(outputs[0])
        assert "accuracy" in report and "config_fingerprint" in report

    def test_eval_oracle_mode(self, capsys, data_files):
        kb, qa = data_files
        code, out, _ = run_cli(capsys, "eval", "--kb", str(kb), "--qa", str(qa), "--oracle")
        assert code == 0
        json.loads(out)

    def test_sweep_csv(self, capsys, data_files):
        kb, qa = data_files
        code, out, _ = run_cli(capsys, "sweep", "--kb", str(kb), "--qa", str(qa),
                               "--axis", "threshold", "--values", "0.0,0.5,1.0")
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0].startswith("threshold,")
        assert len(lines) == 4
        post = [float(line.split(",")[3]) for line in lines[1:]]
        assert post == sorted(post, reverse=True)


class TestGrpoDemo:
    def test_emits_csv_curve(self, capsys):
        code, out, err = run_cli(capsys, "grpo-demo", "--iterations", "5", "--seed", "1")
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == "iteration,mean_task_reward,mean_format_reward,objective"
        assert len(lines) == 6
        assert "best mean task reward" in err
