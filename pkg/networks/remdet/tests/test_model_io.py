"""Tests for architecture documents and the RMDT weights format."""

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import pytest

from networks.remdet.src.blocks import Model, build_backbone
from networks.remdet.src.errors import (
    BadMagicError,
    ConfigSyntaxError,
    InvalidConfigError,
    ShapeMismatchError,
    TruncatedFileError,
    UnknownBlockKindError,
    VersionUnsupportedError,
    WidthMismatchError,
)
from networks.remdet.src.gradcheck import randomize_batchnorm
from networks.remdet.src.model_io import (
    decode_weights,
    dump_config,
    encode_weights,
    load_config,
    load_weights,
    parse_config,
    save_weights,
)
from networks.remdet.src.reparam import fuse_model
from networks.remdet.src.tensor import Tensor
from shared.models import BlockKind, C2fCfg, DType, ModelCfg, RepMode


def _document(**overrides: Any) -> dict[str, Any]:
    document: dict[str, Any] = {
        "name": "tiny",
        "in_channels": 1,
        "stem": {"width": 8},
        "stages": [{"width": 8, "block_count": 1, "block_kind": "convffn", "downsample": "none"}],
    }
    document.update(overrides)
    return document


@pytest.fixture
def toy_model() -> Model:
    """Seeded toy classifier with non-trivial batch-norm statistics."""
    model = build_backbone(ModelCfg.toy_classifier(BlockKind.GATEDFFN, 3.0, width=8), seed=3)
    randomize_batchnorm(model.params, np.random.default_rng(3))
    return model


class TestParseConfig:
    """Tests for parsing and validating architecture documents."""

    def test_minimal_document(self) -> None:
        """Test that defaults fill in everything a minimal document omits."""
        cfg = parse_config(json.dumps(_document()))
        assert cfg.name == "tiny"
        assert cfg.dtype is DType.F32
        assert cfg.mode is RepMode.TRAIN
        assert cfg.head.kind == "none"
        assert cfg.stages[0].expansion == 3.0

    def test_bundled_desk_config(self) -> None:
        """Test the bundled desk document equals the programmatic desk layout."""
        assert load_config("remdet-tiny-desk") == ModelCfg.desk()
        assert load_config("remdet-tiny-desk.cfg") == ModelCfg.desk()

    def test_bundled_toy_config(self) -> None:
        """Test the channel_c2f shorthand expands to the (1.0, 0.25) C2f point."""
        cfg = load_config("remdet-toy-classifier")
        blocks = cfg.stages[0].blocks
        assert blocks is not None
        assert blocks[1] == C2fCfg.channel_c2f(16, 16, n=1)
        assert cfg.head.kind == "classifier"

    def test_missing_config(self) -> None:
        """Test that an unknown name is a missing file."""
        with pytest.raises(FileNotFoundError):
            load_config("no-such-model")

    def test_syntax_error(self) -> None:
        """Test that malformed JSON is reported as a syntax error."""
        with pytest.raises(ConfigSyntaxError):
            parse_config('{"name": "tiny",')
        with pytest.raises(ConfigSyntaxError):
            parse_config("[1, 2]")

    def test_unknown_stage_block_kind(self) -> None:
        """Test a misspelled stage block kind names its path."""
        document = _document()
        document["stages"][0]["block_kind"] = "gatedfnn"
        with pytest.raises(UnknownBlockKindError) as excinfo:
            parse_config(json.dumps(document))
        assert excinfo.value.path == "stages.0.block_kind"

    def test_unknown_explicit_block_kind(self) -> None:
        """Test a misspelled explicit block kind names its path."""
        document = _document()
        document["stages"][0]["blocks"] = [{"kind": "gatedfnn", "c1": 8, "c2": 8}]
        with pytest.raises(UnknownBlockKindError) as excinfo:
            parse_config(json.dumps(document))
        assert excinfo.value.path == "stages.0.blocks.0.kind"

    def test_schema_violation_path(self) -> None:
        """Test pydantic errors are reported with their document path."""
        with pytest.raises(InvalidConfigError) as excinfo:
            parse_config(json.dumps(_document(stem={"width": 0})))
        assert excinfo.value.path == "stem.width"

        document = _document()
        document["stages"][0]["blocks"] = [{"kind": "convffn", "c1": 0, "c2": 8}]
        with pytest.raises(InvalidConfigError) as excinfo:
            parse_config(json.dumps(document))
        assert excinfo.value.path == "stages.0.blocks.0.c1"

    def test_width_mismatch_path(self) -> None:
        """Test that explicit blocks which do not chain are located."""
        document = _document()
        document["stages"][0]["blocks"] = [{"kind": "convffn", "c1": 4, "c2": 8}]
        with pytest.raises(WidthMismatchError) as excinfo:
            parse_config(json.dumps(document))
        assert excinfo.value.path == "stages.0.blocks.0"

    def test_dump_parses_back(self) -> None:
        """Test the canonical dump parses to an equal config."""
        cfg = load_config("remdet-toy-classifier")
        assert parse_config(dump_config(cfg)) == cfg
        assert parse_config(dump_config(ModelCfg.desk())) == ModelCfg.desk()


class TestWeightsFormat:
    """Tests for encoding and decoding RMDT bytes."""

    def test_record_layout(self) -> None:
        """Test the exact byte layout of a single f32 record."""
        values = np.arange(6, dtype=np.float32).reshape(2, 3)
        data = encode_weights([("w", Tensor(values))])
        assert data[:4] == b"RMDT"
        assert struct.unpack("<II", data[4:12]) == (1, 1)
        assert struct.unpack("<H", data[12:14]) == (1,)
        assert data[14:15] == b"w"
        assert data[15:17] == bytes([0, 2])
        assert struct.unpack("<II", data[17:25]) == (2, 3)
        assert data[25:] == values.astype("<f4").tobytes()
        assert len(data) == 49

    def test_f64_code(self) -> None:
        """Test that f64 tensors carry dtype code 1 and decode as f64."""
        data = encode_weights([("v", Tensor(np.array([0.1, 0.2])))])
        assert data[15] == 1
        decoded = decode_weights(data)["v"]
        assert decoded.dtype is DType.F64
        assert decoded.numpy().tolist() == [0.1, 0.2]

    def test_bad_magic(self) -> None:
        """Test that a foreign file is rejected by its magic."""
        with pytest.raises(BadMagicError):
            decode_weights(b"XXXX" + bytes(8))

    def test_unsupported_version(self) -> None:
        """Test that versions other than 1 are refused."""
        data = encode_weights([("w", Tensor(np.ones(2, dtype=np.float32)))])
        with pytest.raises(VersionUnsupportedError):
            decode_weights(data[:4] + struct.pack("<I", 2) + data[8:])

    def test_truncated(self) -> None:
        """Test that files ending early are truncated, at any cut point."""
        data = encode_weights([("w", Tensor(np.ones(4, dtype=np.float32)))])
        for cut in (2, 10, 14, 20, len(data) - 1):
            with pytest.raises(TruncatedFileError):
                decode_weights(data[:cut])

    def test_trailing_bytes(self) -> None:
        """Test that bytes after the last record are rejected."""
        data = encode_weights([("w", Tensor(np.ones(4, dtype=np.float32)))])
        with pytest.raises(TruncatedFileError):
            decode_weights(data + b"\x00")

    def test_duplicate_names(self) -> None:
        """Test that a name may appear only once."""
        tensor = Tensor(np.ones(2, dtype=np.float32))
        with pytest.raises(ShapeMismatchError):
            encode_weights([("w", tensor), ("w", tensor)])


class TestModelWeights:
    """Tests for saving and loading whole models."""

    def test_roundtrip_bit_exact(self, toy_model: Model, tmp_path: Path) -> None:
        """Test every tensor, running statistics included, survives a save and load."""
        path = tmp_path / "toy.rmdt"
        save_weights(toy_model, path)
        loaded = load_weights(path, toy_model.cfg)
        original = dict(toy_model.named_tensors())
        restored = dict(loaded.named_tensors())
        assert list(restored) == list(original)
        assert any(name.endswith("running_var") for name in original)
        for name, tensor in original.items():
            np.testing.assert_array_equal(restored[name].numpy(), tensor.numpy())

    def test_canonical_bytes(self, toy_model: Model, tmp_path: Path) -> None:
        """Test that saving the same model twice yields identical files."""
        first, second = tmp_path / "a.rmdt", tmp_path / "b.rmdt"
        save_weights(toy_model, first)
        save_weights(toy_model, second)
        assert first.read_bytes() == second.read_bytes()

    def test_shape_mismatch(self, toy_model: Model, tmp_path: Path) -> None:
        """Test that weights of a wider model do not load into a narrower one."""
        path = tmp_path / "toy.rmdt"
        save_weights(toy_model, path)
        narrow = ModelCfg.toy_classifier(BlockKind.GATEDFFN, 3.0, width=4)
        with pytest.raises(ShapeMismatchError):
            load_weights(path, narrow)

    def test_name_mismatch(self, toy_model: Model, tmp_path: Path) -> None:
        """Test that weights of another architecture are refused."""
        path = tmp_path / "toy.rmdt"
        save_weights(toy_model, path)
        with pytest.raises(ShapeMismatchError):
            load_weights(path, ModelCfg.toy_classifier(BlockKind.CONVFFN, 1.0, width=8))

    def test_fused_roundtrip(self, toy_model: Model, tmp_path: Path) -> None:
        """Test a fused model reloads with identical outputs."""
        fused = fuse_model(toy_model)
        path = tmp_path / "fused.rmdt"
        save_weights(fused, path)
        loaded = load_weights(path, fused.cfg)
        x = Tensor.randn((2, 1, 16, 16), np.random.default_rng(0), DType.F32)
        np.testing.assert_array_equal(loaded.classify(x).numpy(), fused.classify(x).numpy())
