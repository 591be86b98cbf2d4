import json

import pytest

from tabdet.cli import _parse_thresholds, main
from tabdet.io import load_checkpoint, read_detections, read_pages
from tabdet.model import ModelConfig, param_count


@pytest.fixture
def corpus(tmp_path):
    out = tmp_path / "corpus"
    code = main(["gen", "--style", "dense-scientific", "--count", "10",
                 "--seed", "0", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "hidden_size": 8, "num_layers": 1, "num_heads": 2, "attention_out": 8,
        "epochs": 2, "batch_size": 4, "seed": 0,
    }))
    return path


class TestGen:
    def test_writes_corpus_and_prints_paths(self, tmp_path, capsys):
        out = tmp_path / "fresh"
        code = main(["gen", "--style", "dense-scientific", "--count", "10",
                     "--seed", "0", "--out", str(out)])
        assert code == 0
        printed = json.loads(capsys.readouterr().out)
        assert set(printed) == {"train", "val", "test", "manifest"}
        assert len(read_pages(out / "train.jsonl")) == 8
        assert len(read_pages(out / "val.jsonl")) == 1
        assert (out / "manifest.json").exists()

    def test_style_from_json_file(self, tmp_path, capsys):
        from tabdet.datagen import DENSE_SCIENTIFIC
        import dataclasses

        style_path = tmp_path / "style.json"
        style_path.write_text(json.dumps(dataclasses.asdict(
            dataclasses.replace(DENSE_SCIENTIFIC, name="custom")
        )))
        code = main(["gen", "--style", str(style_path), "--count", "2",
                     "--seed", "1", "--out", str(tmp_path / "c")])
        assert code == 0
        pages = read_pages(tmp_path / "c" / "train.jsonl")
        assert pages[0].page_id.startswith("custom-")

    def test_unknown_style_fails_with_json_error(self, tmp_path, capsys):
        code = main(["gen", "--style", "no-such.json", "--count", "1",
                     "--seed", "0", "--out", str(tmp_path)])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["kind"] == "FileNotFoundError"


class TestTrainPredictEval:
    def test_full_chain(self, corpus, tiny_config, tmp_path, capsys):
        ckpt = tmp_path / "model.ckpt"
        log = tmp_path / "log.jsonl"
        code = main(["train", "--train", str(corpus / "train.jsonl"),
                     "--val", str(corpus / "val.jsonl"),
                     "--config", str(tiny_config),
                     "--out", str(ckpt), "--log", str(log)])
        assert code == 0
        _, config = load_checkpoint(ckpt)
        assert config.hidden_size == 8
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 2
        assert {"epoch", "train_loss", "val_loss", "val_acc", "lr"} == set(records[0])

        preds = tmp_path / "preds.jsonl"
        code = main(["predict", "--ckpt", str(ckpt),
                     "--pages", str(corpus / "train.jsonl"), "--out", str(preds)])
        assert code == 0
        assert len(read_detections(preds)) == 8

        capsys.readouterr()
        report_path = tmp_path / "report.json"
        code = main(["eval", "--pred", str(preds), "--gt", str(corpus / "train.jsonl"),
                     "--out", str(report_path)])
        assert code == 0
        table = capsys.readouterr().out
        assert "IoU" in table and "Avg" in table
        report = json.loads(report_path.read_text())
        assert len(report["thresholds"]) == 10

    def test_predict_dump_attention(self, corpus, tiny_config, tmp_path):
        ckpt = tmp_path / "model.ckpt"
        main(["train", "--train", str(corpus / "train.jsonl"),
              "--val", str(corpus / "val.jsonl"), "--config", str(tiny_config),
              "--out", str(ckpt), "--log", str(tmp_path / "log.jsonl")])
        preds = tmp_path / "preds.jsonl"
        code = main(["predict", "--ckpt", str(ckpt),
                     "--pages", str(corpus / "val.jsonl"), "--out", str(preds),
                     "--dump-attention"])
        assert code == 0
        record = read_detections(preds)[0]
        n = len(record["block_labels"])
        attn = record["attention"]
        assert len(attn) == 2  # heads
        assert len(attn[0]) == n and len(attn[0][0]) == n


class TestEvalOracle:
    def test_oracle_labels_without_pred(self, corpus, capsys):
        code = main(["eval", "--gt", str(corpus / "train.jsonl"), "--oracle-labels"])
        assert code == 0
        out = capsys.readouterr().out
        # gold labels drive the pipeline, so detection is essentially perfect
        assert "1.0000" in out

    def test_pred_required_without_oracle(self, corpus, capsys):
        code = main(["eval", "--gt", str(corpus / "train.jsonl")])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert "--pred" in err["error"]["message"]

    def test_custom_threshold_grid(self, corpus, capsys):
        code = main(["eval", "--gt", str(corpus / "train.jsonl"), "--oracle-labels",
                     "--thresholds", "0.5:0.25:0.95"])
        assert code == 0
        out = capsys.readouterr().out
        rows = [l for l in out.splitlines()[1:] if not l.lstrip().startswith("Avg")]
        assert len(rows) == 2  # 0.5 and 0.75

    def test_stray_prediction_rejected(self, corpus, tmp_path, capsys):
        preds = tmp_path / "preds.jsonl"
        preds.write_text('{"page_id": "ghost", "detections": [], "block_labels": []}\n')
        code = main(["eval", "--pred", str(preds), "--gt", str(corpus / "train.jsonl")])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert "ghost" in err["error"]["message"]

    def test_missing_prediction_counts_as_empty(self, corpus, tmp_path, capsys):
        preds = tmp_path / "preds.jsonl"
        preds.write_text("")  # no predictions for any page
        code = main(["eval", "--pred", str(preds), "--gt", str(corpus / "train.jsonl")])
        assert code == 0
        out = capsys.readouterr().out
        assert " 0 " in out or out.count("0.0000") > 0


class TestGradcheckAndParams:
    def test_gradcheck_passes(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "hidden_size": 3, "num_layers": 2, "num_heads": 1, "attention_out": 4,
        }))
        code = main(["gradcheck", "--config", str(cfg), "--seed", "0"])
        assert code == 0
        out = json.loads(capsys.readouterr().out)
        assert out["passed"] is True
        assert out["tolerance"] == 1e-4
        assert "cls.w" in out["max_relative_error"]

    def test_params_prints_count(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text("{}")
        code = main(["params", "--config", str(cfg)])
        assert code == 0
        assert int(capsys.readouterr().out.strip()) == param_count(ModelConfig())

    def test_params_tiny(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({
            "hidden_size": 16, "num_layers": 1, "num_heads": 4, "attention_out": 16,
        }))
        main(["params", "--config", str(cfg)])
        assert int(capsys.readouterr().out.strip()) == 6292


class TestErrorSurface:
    def test_missing_file_yields_json_error(self, tmp_path, capsys):
        code = main(["predict", "--ckpt", str(tmp_path / "no.ckpt"),
                     "--pages", str(tmp_path / "no.jsonl"), "--out", str(tmp_path / "o")])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert set(err["error"]) == {"kind", "message"}

    def test_bad_config_yields_json_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"volume": 11}')
        code = main(["params", "--config", str(cfg)])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"]["kind"] == "ValueError"
        assert "volume" in err["error"]["message"]


class TestParseThresholds:
    def test_inclusive_grid(self):
        assert _parse_thresholds("0.5:0.05:0.95") == pytest.approx(
            tuple(0.5 + 0.05 * i for i in range(10))
        )

    def test_single_point(self):
        assert _parse_thresholds("0.5:0.1:0.5") == (0.5,)

    def test_rejects_bad_shapes(self):
        for text in ("0.5", "0.5:0.1", "0.9:0.1:0.5", "0.5:0:0.9"):
            with pytest.raises(ValueError):
                _parse_thresholds(text)
