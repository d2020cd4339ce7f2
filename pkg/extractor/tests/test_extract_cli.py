import json
import struct

import numpy as np

from embed_extractor.cli import main


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")


class TestCli:
    def test_happy_path(self, tmp_path, capsys):
        p = tmp_path / "in.jsonl"
        write_jsonl(p, [{"key": f"k{i}", "text": f"text {i}"} for i in range(5)])
        out = tmp_path / "emb"
        rc = main(["--input", str(p), "--model", "hash:8", "--batch", "2", "--out", str(out)])
        assert rc == 0
        raw = (tmp_path / "emb.rgem").read_bytes()
        version, count, dim = struct.unpack("<IQI", raw[4:20])
        assert (count, dim) == (5, 8)
        assert len((tmp_path / "emb.keys").read_text().splitlines()) == 5
        assert "emb.rgem" in capsys.readouterr().out

    def test_max_tokens_flag(self, tmp_path):
        p = tmp_path / "in.jsonl"
        write_jsonl(p, [{"key": "a", "text": "one two three"}])
        main(["--input", str(p), "--model", "hash:8", "--out", str(tmp_path / "full")])
        main(["--input", str(p), "--model", "hash:8", "--out", str(tmp_path / "cut"), "--max-tokens", "1"])
        a = np.frombuffer((tmp_path / "full.rgem").read_bytes()[20:], dtype="<f4")
        b = np.frombuffer((tmp_path / "cut.rgem").read_bytes()[20:], dtype="<f4")
        assert not np.array_equal(a, b)

    def test_input_error_exit_code(self, tmp_path, capsys):
        p = tmp_path / "in.jsonl"
        write_jsonl(p, [{"key": "a", "text": "1"}, {"key": "a", "text": "2"}])
        rc = main(["--input", str(p), "--model", "hash:8", "--out", str(tmp_path / "x")])
        assert rc == 2
        assert "input error" in capsys.readouterr().err

    def test_encoder_error_exit_code(self, tmp_path, capsys):
        p = tmp_path / "in.jsonl"
        write_jsonl(p, [{"key": "a", "text": "x"}])
        rc = main(["--input", str(p), "--model", "hash:nope", "--out", str(tmp_path / "x")])
        assert rc == 3
        assert "environment error" in capsys.readouterr().err

    def test_missing_input_exit_code(self, tmp_path, capsys):
        rc = main(["--input", str(tmp_path / "absent.jsonl"), "--model", "hash:8", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "io error" in capsys.readouterr().err
