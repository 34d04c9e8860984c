"""Tests for the `remdet` command-line entry point."""

import io
import json
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from networks.remdet.src.blocks import assign_tensor
from networks.remdet.src.cli import EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE, extent, ratio, run
from networks.remdet.src.model_io import load_config, load_weights, save_weights
from networks.remdet.src.tensor import Tensor
from shared.models import FusionReport

pytestmark = pytest.mark.integration

TOY = "remdet-toy-classifier"


def _csv(text: str) -> tuple[str, pd.DataFrame]:
    """Split CSV output into its schema line and the table."""
    schema, _, body = text.partition("\n")
    return schema, pd.read_csv(io.StringIO(body))


def _records(text: str) -> list[dict[str, object]]:
    return [json.loads(line) for line in text.splitlines() if line]


class TestArgumentTypes:
    """Tests for the extent and ratio argument parsers."""

    def test_extent(self) -> None:
        """Test HxW and square shorthand."""
        assert extent("64x32") == (64, 32)
        assert extent("16") == (16, 16)

    def test_ratio(self) -> None:
        """Test colon-separated block counts."""
        assert ratio("3:3:6:3") == (3, 3, 6, 3)


class TestCommands:
    """Tests that each subcommand runs and reports through stdout."""

    def test_rank(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the rank experiment passes and prints a versioned CSV."""
        assert run(["rank", "--dim", "4", "--samples", "30", "--format", "csv"]) == EXIT_OK
        schema, frame = _csv(capsys.readouterr().out)
        assert schema == "# schema=rank.v1"
        assert frame.loc[0, "estimated_rank"] == 10
        assert frame.loc[0, "monomials"] == 10

    def test_flops_per_layer(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test per-layer rows add up to the total row."""
        code = run(
            [
                "flops",
                "--config",
                "remdet-tiny-desk",
                "--input",
                "64x64",
                "--per-layer",
                "--format",
                "csv",
            ]
        )
        assert code == EXIT_OK
        schema, frame = _csv(capsys.readouterr().out)
        assert schema == "# schema=flops.v1"
        body, total = frame.iloc[:-1], frame.iloc[-1]
        assert total["node"] == "total"
        assert body["macs"].sum() == total["macs"]
        assert body["params"].sum() == total["params"]

    def test_describe(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the description lists stem, stage, head and total."""
        assert run(["describe", "--config", TOY, "--format", "jsonl"]) == EXIT_OK
        parts = [record["part"] for record in _records(capsys.readouterr().out)]
        assert parts == ["stem", "stages.0", "head", "total"]

    def test_gradcheck(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a ConvFFN gradcheck passes for every entry."""
        code = run(
            [
                "gradcheck",
                "--block",
                "convffn",
                "--c1",
                "4",
                "--c2",
                "4",
                "--e",
                "2",
                "--input",
                "6x6",
                "--format",
                "jsonl",
            ]
        )
        assert code == EXIT_OK
        records = _records(capsys.readouterr().out)
        assert records[0]["name"] == "input"
        assert all(record["passed"] for record in records)

    def test_sweep_with_oracle(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the sweep agrees with the counting oracle."""
        argv = ["sweep", "--c", "8", "--input", "4x4", "--e", "1", "--e", "2", "--oracle"]
        assert run([*argv, "--format", "csv"]) == EXIT_OK
        _, frame = _csv(capsys.readouterr().out)
        assert frame["e"].tolist() == [1.0, 2.0]
        assert (frame["oracle_convffn"] == frame["macs_convffn"]).all()
        assert set(frame["cross_ratio"]) == {"27/28"}

    def test_ratios(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test both the stage-ratio and CED tables are printed."""
        argv = ["ratios", "--config", "remdet-tiny-desk", "--ratio", "3:3:6:3", "--format", "csv"]
        assert run(argv) == EXIT_OK
        out = capsys.readouterr().out
        assert "# schema=ratios.v1" in out
        assert "# schema=ced_expansion.v1" in out

    def test_fuse_verify(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test fusing the toy classifier passes verification and writes both files."""
        out = tmp_path / "toy-deploy.rmdt"
        argv = ["fuse", "--config", TOY, "--out", str(out), "--verify", "--samples", "3"]
        assert run([*argv, "--format", "jsonl"]) == EXIT_OK
        (record,) = _records(capsys.readouterr().out)
        assert record["passed"] is True
        assert record["macs_after"] < record["macs_before"]
        assert out.is_file()
        assert (tmp_path / "toy-deploy.rmdt.json").is_file()

    def test_init_then_fuse_weights(self, tmp_path: Path) -> None:
        """Test fusing weights saved by init."""
        weights = tmp_path / "toy.rmdt"
        assert run(["init", "--config", TOY, "--out", str(weights), "--seed", "4"]) == EXIT_OK
        fused = tmp_path / "fused.rmdt"
        argv = ["fuse", "--config", TOY, "--weights", str(weights), "--out", str(fused)]
        assert run(argv) == EXIT_OK
        assert fused.read_bytes()[:4] == b"RMDT"

    def test_train_toy_curve(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the CSV output is the per-step loss curve."""
        argv = ["train-toy", "--block", "mult", "--expansion", "2", "--steps", "3"]
        assert run([*argv, "--samples", "64", "--format", "csv"]) == EXIT_OK
        schema, frame = _csv(capsys.readouterr().out)
        assert schema == "# schema=loss_curve.v1"
        assert frame["step"].tolist() == [0, 1, 2]

    def test_bench_fused(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a fused benchmark reports fewer MACs than the unfused model."""
        argv = ["bench", "--config", TOY, "--input", "16x16", "--iters", "2", "--warmup", "0"]
        assert run([*argv, "--fused", "--format", "jsonl"]) == EXIT_OK
        (record,) = _records(capsys.readouterr().out)
        assert record["fused"] is True
        assert record["mac_delta"] < 0


class TestExitCodes:
    """Tests for usage errors and failed checks."""

    @pytest.mark.parametrize(
        "argv",
        [
            [],
            ["flops", "--config", TOY],
            ["flops", "--config", TOY, "--input", "64y64"],
            ["rank", "--dim", "4", "--samples", "30", "--threads", "0"],
            ["gradcheck", "--block", "unknown", "--c1", "4", "--c2", "4"],
        ],
    )
    def test_usage_errors(self, argv: list[str]) -> None:
        """Test malformed command lines exit with 2."""
        assert run(argv) == EXIT_USAGE

    def test_missing_config(self, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a missing config is a usage error reported on stderr."""
        assert run(["flops", "--config", "no-such-model", "--input", "64x64"]) == EXIT_USAGE
        captured = capsys.readouterr()
        assert captured.out == ""
        assert "remdet: error:" in captured.err

    def test_insufficient_samples(self) -> None:
        """Test an inconclusive rank test is refused as a usage error."""
        assert run(["rank", "--dim", "4", "--samples", "5"]) == EXIT_USAGE

    def test_fuse_prediction_disagreement(self, tmp_path: Path) -> None:
        """Test that fused predictions disagreeing on any input exit with 1."""
        report = FusionReport(
            max_abs_diff=1e-6,
            tol=1e-4,
            n_samples=100,
            passed=True,
            dtype="f32",
            fused_blocks=2,
            macs_before=10,
            macs_after=8,
            params_before=10,
            params_after=8,
            argmax_agreement=0.99,
        )
        argv = ["fuse", "--config", TOY, "--out", str(tmp_path / "toy.rmdt"), "--verify"]
        with patch("networks.remdet.src.cli.verify_fusion", return_value=report):
            assert run(argv) == EXIT_CHECK_FAILED

    def test_fuse_nan_weights(self, tmp_path: Path) -> None:
        """Test that fusing weights holding a NaN fails verification with 1."""
        weights = tmp_path / "toy.rmdt"
        assert run(["init", "--config", TOY, "--out", str(weights)]) == EXIT_OK
        cfg = load_config(TOY)
        model = load_weights(weights, cfg)
        tensors = dict(model.named_tensors())
        name = next(name for name in tensors if name.endswith("repdw.dw3.bn.beta"))
        beta = tensors[name].numpy().copy()
        beta[0] = np.nan
        assign_tensor(model.params, name, Tensor(beta))
        save_weights(model, weights)
        argv = ["fuse", "--config", TOY, "--weights", str(weights), "--verify", "--samples", "3"]
        assert run([*argv, "--out", str(tmp_path / "fused.rmdt")]) == EXIT_CHECK_FAILED

    def test_failed_check(self) -> None:
        """Test that a rank below the expected count exits with 1."""
        assert run(["rank", "--dim", "4", "--samples", "30", "--tol", "0.9"]) == EXIT_CHECK_FAILED
