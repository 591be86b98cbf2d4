import json
import struct

import numpy as np
import pytest

from tabdet.datagen import DENSE_SCIENTIFIC, generate_page
from tabdet.geometry import BlockLabel, Page, TextBlock
from tabdet.io import (
    BadMagicError,
    CheckpointError,
    ChecksumError,
    DatasetFormatError,
    LengthMismatchError,
    VersionMismatchError,
    checkpoint_num_bytes,
    load_checkpoint,
    page_from_dict,
    page_to_dict,
    parse_config,
    read_detections,
    read_pages,
    save_checkpoint,
    write_detections,
    write_pages,
)
from tabdet.model import ModelConfig, init_weights, param_count
from tabdet.postprocess import Detection, DetectionResult

TINY = ModelConfig(hidden_size=5, num_layers=2, num_heads=2, attention_out=6)


class TestCheckpoint:
    def test_size_is_exactly_header_plus_tensors_plus_crc(self, tmp_path):
        w = init_weights(TINY, 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(w, TINY, path)
        assert path.stat().st_size == checkpoint_num_bytes(TINY)
        assert checkpoint_num_bytes(TINY) == 4 + 4 + 7 * 4 + 4 * param_count(TINY) + 4

    def test_roundtrip_is_float32_exact(self, tmp_path):
        w = init_weights(TINY, 3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(w, TINY, path)
        loaded, config = load_checkpoint(path)
        assert config == TINY
        for name in w.keys():
            want = w[name].astype(np.float32).astype(np.float64)
            assert np.array_equal(loaded[name], want), name

    def test_magic_bytes(self, tmp_path):
        w = init_weights(TINY, 0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(w, TINY, path)
        assert path.read_bytes()[:4] == b"TDLT"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_weights(TINY, 0), TINY, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"WHAT"
        path.write_bytes(bytes(raw))
        with pytest.raises(BadMagicError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_weights(TINY, 0), TINY, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 999)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_weights(TINY, 0), TINY, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(LengthMismatchError):
            load_checkpoint(path)

    def test_nearly_empty_file(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"TDLT")
        with pytest.raises(LengthMismatchError):
            load_checkpoint(path)

    def test_flipped_payload_bit_fails_crc(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_weights(TINY, 0), TINY, path)
        raw = bytearray(path.read_bytes())
        raw[60] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_invalid_stored_config(self, tmp_path):
        # num_heads that does not divide attention_out
        path = tmp_path / "m.ckpt"
        save_checkpoint(init_weights(TINY, 0), TINY, path)
        raw = bytearray(path.read_bytes())
        raw[16:20] = struct.pack("<I", 4)  # heads: 6 % 4 != 0
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_error_hierarchy(self):
        for exc in (BadMagicError, VersionMismatchError, LengthMismatchError, ChecksumError):
            assert issubclass(exc, CheckpointError)
        assert issubclass(CheckpointError, ValueError)
        assert issubclass(DatasetFormatError, ValueError)


class TestPageSerialization:
    def page(self):
        return Page(
            "pg-1", 612.0, 792.0,
            (
                TextBlock(10.0, 20.0, 110.0, 32.0, label=BlockLabel.COLUMN_HEADER),
                TextBlock(10.0, 40.0, 80.0, 52.0),
            ),
            ((5.0, 15.0, 115.0, 55.0),),
        )

    def test_roundtrip(self):
        page = self.page()
        assert page_from_dict(page_to_dict(page)) == page

    def test_unlabeled_block_stays_unlabeled(self):
        data = page_to_dict(self.page())
        assert "label" not in data["blocks"][1]
        assert page_from_dict(data).blocks[1].label is None

    def test_unknown_page_key_rejected(self):
        data = page_to_dict(self.page())
        data["rotation"] = 90
        with pytest.raises(ValueError, match="rotation"):
            page_from_dict(data)

    def test_missing_page_key_rejected(self):
        data = page_to_dict(self.page())
        del data["width"]
        with pytest.raises(ValueError, match="width"):
            page_from_dict(data)

    def test_unknown_block_key_rejected(self):
        data = page_to_dict(self.page())
        data["blocks"][0]["font"] = "mono"
        with pytest.raises(ValueError, match="font"):
            page_from_dict(data)

    def test_bad_label_lists_valid_ones(self):
        data = page_to_dict(self.page())
        data["blocks"][0]["label"] = "Banner"
        with pytest.raises(ValueError, match="Banner"):
            page_from_dict(data)

    def test_non_finite_coordinate_rejected(self):
        data = page_to_dict(self.page())
        data["blocks"][0]["x2"] = float("inf")
        with pytest.raises(ValueError, match="finite"):
            page_from_dict(data)

    def test_short_table_rejected(self):
        data = page_to_dict(self.page())
        data["tables"] = [[1.0, 2.0, 3.0]]
        with pytest.raises(ValueError, match="4 coordinates"):
            page_from_dict(data)

    def test_blocks_must_be_list(self):
        data = page_to_dict(self.page())
        data["blocks"] = {"0": data["blocks"][0]}
        with pytest.raises(ValueError, match="array"):
            page_from_dict(data)


class TestPagesFile:
    def test_jsonl_roundtrip(self, tmp_path):
        pages = [generate_page(DENSE_SCIENTIFIC, seed=i) for i in range(3)]
        path = tmp_path / "pages.jsonl"
        write_pages(pages, path)
        assert read_pages(path) == pages

    def test_one_compact_line_per_page(self, tmp_path):
        pages = [generate_page(DENSE_SCIENTIFIC, seed=0)]
        path = tmp_path / "pages.jsonl"
        write_pages(pages, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1
        assert ": " not in lines[0]  # compact separators

    def test_empty_file_gives_empty_list(self, tmp_path):
        path = tmp_path / "pages.jsonl"
        path.write_text("")
        assert read_pages(path) == []

    def test_error_names_line_number(self, tmp_path):
        path = tmp_path / "pages.jsonl"
        good = json.dumps(page_to_dict(generate_page(DENSE_SCIENTIFIC, seed=0)))
        path.write_text(good + "\n{not json}\n")
        with pytest.raises(DatasetFormatError, match=r":2:"):
            read_pages(path)

    def test_blank_line_rejected(self, tmp_path):
        path = tmp_path / "pages.jsonl"
        good = json.dumps(page_to_dict(generate_page(DENSE_SCIENTIFIC, seed=0)))
        path.write_text(good + "\n\n" + good + "\n")
        with pytest.raises(DatasetFormatError, match=r":2:"):
            read_pages(path)

    def test_semantic_error_names_line_number(self, tmp_path):
        path = tmp_path / "pages.jsonl"
        data = page_to_dict(generate_page(DENSE_SCIENTIFIC, seed=0))
        data["extra"] = 1
        path.write_text(json.dumps(data) + "\n")
        with pytest.raises(DatasetFormatError, match=r":1:"):
            read_pages(path)


class TestParseConfig:
    def test_routes_fields(self):
        model, train = parse_config(
            '{"hidden_size": 16, "num_layers": 2, "epochs": 5, "base_lr": 0.01}'
        )
        assert model.hidden_size == 16
        assert model.num_layers == 2
        assert train.epochs == 5
        assert train.base_lr == 0.01

    def test_defaults_fill_missing(self):
        model, train = parse_config("{}")
        assert model == ModelConfig()
        assert train.epochs == 300

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="dropout"):
            parse_config('{"dropout": 0.5}')

    def test_non_object_rejected(self):
        with pytest.raises(ValueError):
            parse_config("[1, 2]")


class TestDetectionsFile:
    def test_roundtrip(self, tmp_path):
        results = [
            DetectionResult(
                "a", (Detection((1.0, 2.0, 3.0, 4.0), 0.9),), (BlockLabel.CONTENT_CELL,)
            ),
            DetectionResult("b", (), ()),
        ]
        path = tmp_path / "dets.jsonl"
        write_detections(results, path)
        records = read_detections(path)
        assert [r["page_id"] for r in records] == ["a", "b"]
        assert records[0]["detections"] == [{"box": [1.0, 2.0, 3.0, 4.0], "confidence": 0.9}]

    def test_error_names_line_number(self, tmp_path):
        path = tmp_path / "dets.jsonl"
        path.write_text('{"page_id": "a", "detections": [], "block_labels": []}\nnope\n')
        with pytest.raises(DatasetFormatError, match=r":2:"):
            read_detections(path)
