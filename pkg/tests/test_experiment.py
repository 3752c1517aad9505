"""Tests for the experiment matrix runner."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import pytest
import yaml

from parallel_cpt import experiment
from parallel_cpt.exceptions import ConfigFileError, ConfigurationError
from parallel_cpt.experiment import (
    CellSpec,
    CptStage,
    ExperimentMatrix,
    ExperimentSpec,
    UnitResult,
    load_experiment_spec,
    run_experiment_matrix,
    unit_key,
)

from .conftest import tiny_spec_data


def fake_unit(perfect: set[str], calls: list[tuple[str, int]]) -> Any:
    """An ``execute_unit`` stand-in writing perfect or empty hypotheses."""
    refs = [f"w{i} ka mo ri su" for i in range(20)]

    def run(spec: ExperimentSpec, cell: CellSpec, seed: int, directory: Path) -> UnitResult:
        calls.append((cell.name, seed))
        directory.mkdir(parents=True, exist_ok=True)
        hyps = refs if cell.name in perfect else ["zz"] * len(refs)
        for key in cell.directions:
            (directory / f"{key}.hyp.txt").write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
            (directory / f"{key}.ref.txt").write_text("".join(r + "\n" for r in refs), encoding="utf-8")
        score = 100.0 if cell.name in perfect else 0.0
        return UnitResult(
            cell=cell.name,
            seed=seed,
            status="ok",
            bleu={key: score for key in cell.directions},
            directory=str(directory),
        )

    return run


class TestExperimentSpec:
    """Tests for spec validation."""

    def test_presets_expand(self) -> None:
        """Test that preset dicts become train configs with overrides."""
        spec = ExperimentSpec(**tiny_spec_data())
        assert spec.cpt_train.phase == "cpt"
        assert spec.cpt_train.epochs == 0
        assert spec.sft_lora.adapter is not None

    def test_cell_sft_train_preset(self) -> None:
        """Test that a cell-level SFT preset is expanded too."""
        cell = CellSpec(name="direct", sft_train={"preset": "desk_direct_sft", "epochs": 2})
        assert cell.sft_train is not None
        assert cell.sft_train.epochs == 2

    def test_duplicate_cell_names(self) -> None:
        """Test that cell names must be unique."""
        data = tiny_spec_data(cells=[{"name": "a"}, {"name": "a"}])
        with pytest.raises(ValueError, match="unique"):
            ExperimentSpec(**data)

    def test_unknown_baseline(self) -> None:
        """Test that the baseline must name a cell."""
        data = tiny_spec_data(evaluation={"baseline": "missing"})
        with pytest.raises(ValueError, match="baseline"):
            ExperimentSpec(**data)

    def test_pack_context_bounded_by_model(self) -> None:
        """Test that packing cannot exceed the model context."""
        with pytest.raises(ValueError, match="pack_context"):
            ExperimentSpec(**tiny_spec_data(pack_context=256))

    def test_prompt_must_fit_context(self) -> None:
        """Test that a one-shot byte prompt that overflows a 64-token model is rejected."""
        model = {"context_len": 64, "embed_dim": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32}
        data = tiny_spec_data(model=model)
        with pytest.raises(ValueError, match="'base': a 1-shot prompt plus its target needs 109 tokens"):
            ExperimentSpec(**data)

    def test_decode_tokens_needed(self) -> None:
        """Test the worst-case prompt size per cell under the byte tokenizer."""
        spec = ExperimentSpec(**tiny_spec_data())
        base, tagged = spec.cells

        assert (spec.shots_for(base), spec.shots_for(tagged)) == (1, 0)
        assert spec.decode_tokens_needed(base) == 109
        assert spec.decode_tokens_needed(tagged) == 54

    def test_task_tokenizer_shortens_prompts(self) -> None:
        """Test that five word-level shots fit where byte prompts cannot."""
        model = {"context_len": 64, "embed_dim": 16, "n_layers": 1, "n_heads": 2, "ffn_dim": 32}
        data = tiny_spec_data(tokenizer="task", model=model, decode={"max_new": 6, "shots": 5})

        spec = ExperimentSpec(**data)

        assert spec.decode_tokens_needed(spec.cells[0]) == 54
        with pytest.raises(ValueError, match="context"):
            ExperimentSpec(**{**data, "tokenizer": "byte"})

    def test_unknown_tokenizer(self) -> None:
        """Test that experiment tokenizers are byte, task or vocab files."""
        with pytest.raises(ValueError, match="tokenizer"):
            ExperimentSpec(**tiny_spec_data(tokenizer="sentencepiece"))

    def test_phase_mismatch(self) -> None:
        """Test that an SFT preset cannot serve as the CPT config."""
        with pytest.raises(ValueError, match="phase"):
            ExperimentSpec(**tiny_spec_data(cpt_train={"preset": "desk_sft_full"}))

    def test_mono_takes_no_marker(self) -> None:
        """Test that mono stages reject a marker."""
        with pytest.raises(ValueError, match="mono"):
            CptStage(ordering="mono", marker="tagged")

    def test_stage_label(self) -> None:
        """Test stage labels."""
        assert CptStage(ordering="mono").label() == "mono"
        stage = CptStage(ordering="ab", marker="tagged", data_fraction=0.5, replay_fraction=0.2)
        assert stage.label() == "ab/tagged@0.5+replay0.2"

    def test_load_yaml(self, tmp_path: Path) -> None:
        """Test loading a YAML spec file."""
        path = tmp_path / "spec.yaml"
        path.write_text(yaml.safe_dump(tiny_spec_data()), encoding="utf-8")
        spec = load_experiment_spec(path)
        assert [cell.name for cell in spec.cells] == ["base", "tagged"]

    def test_bundled_replication_spec(self) -> None:
        """Test that the shipped replication spec validates."""
        path = Path(__file__).resolve().parents[1] / "experiments" / "desk_replication.yaml"
        spec = load_experiment_spec(path)
        assert spec.seeds == (0, 1, 2)
        assert spec.evaluation.baseline == "direct_sft"
        assert spec.cell("direct_sft").sft_train is not None
        assert spec.tokenizer == "task"
        assert max(spec.decode_tokens_needed(cell) for cell in spec.cells) == 90

    def test_load_invalid(self, tmp_path: Path) -> None:
        """Test that an invalid spec raises ConfigurationError with details."""
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"cells": []}), encoding="utf-8")
        with pytest.raises(ConfigurationError) as exc_info:
            load_experiment_spec(path)
        assert exc_info.value.details["errors"]

    def test_load_missing(self, tmp_path: Path) -> None:
        """Test that a missing file raises ConfigFileError."""
        with pytest.raises(ConfigFileError):
            load_experiment_spec(tmp_path / "nope.yaml")


class TestUnitKey:
    """Tests for content-addressed unit keys."""

    def test_stable(self) -> None:
        """Test that equal inputs give equal keys."""
        spec = ExperimentSpec(**tiny_spec_data())
        again = ExperimentSpec(**tiny_spec_data())
        assert unit_key(spec, spec.cells[0], 0) == unit_key(again, again.cells[0], 0)

    def test_changes_with_seed_and_cell(self) -> None:
        """Test that seed and pipeline changes give new keys."""
        spec = ExperimentSpec(**tiny_spec_data())
        base, tagged = spec.cells
        assert unit_key(spec, base, 0) != unit_key(spec, base, 1)
        assert unit_key(spec, base, 0) != unit_key(spec, tagged, 0)

    def test_ignores_cell_name(self) -> None:
        """Test that renaming a cell keeps its key."""
        spec = ExperimentSpec(**tiny_spec_data())
        renamed = spec.cells[1].model_copy(update={"name": "other"})
        assert unit_key(spec, spec.cells[1], 0) == unit_key(spec, renamed, 0)

    def test_cpt_settings_only_key_cpt_cells(self) -> None:
        """Test that editing cpt_train re-keys CPT cells and leaves the others cached."""
        spec = ExperimentSpec(**tiny_spec_data())
        edited = ExperimentSpec(**tiny_spec_data(cpt_train={"preset": "desk_cpt", "epochs": 3}))
        base, tagged = spec.cells

        assert unit_key(spec, base, 0) == unit_key(edited, edited.cells[0], 0)
        assert unit_key(spec, tagged, 0) != unit_key(edited, edited.cells[1], 0)


class TestMatrix:
    """Tests for running and resuming the matrix with a stand-in pipeline."""

    @pytest.fixture
    def spec(self) -> ExperimentSpec:
        return ExperimentSpec(
            **tiny_spec_data(
                seeds=[0, 1],
                cells=[{"name": "base", "sft": "none"}, {"name": "good"}],
            )
        )

    def test_significance_counts(
        self, spec: ExperimentSpec, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test that a perfect system beats the baseline on every seed."""
        calls: list[tuple[str, int]] = []
        monkeypatch.setattr(experiment, "execute_unit", fake_unit({"good"}, calls))

        matrix = run_experiment_matrix(spec, tmp_path / "run")

        good = next(cell for cell in matrix.cells if cell.name == "good")
        base = next(cell for cell in matrix.cells if cell.name == "base")
        assert good.status == "ok"
        assert good.mean == {"ab": 100.0, "ba": 100.0}
        assert good.significant == {"ab": 2, "ba": 2}
        assert base.significant == {}
        assert len(calls) == 4

    def test_outputs_written(
        self, spec: ExperimentSpec, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test that the matrix files and per-unit results exist."""
        monkeypatch.setattr(experiment, "execute_unit", fake_unit({"good"}, []))
        out = tmp_path / "run"
        run_experiment_matrix(spec, out)

        assert (out / "spec.json").is_file()
        data = json.loads((out / "matrix.json").read_text(encoding="utf-8"))
        assert [cell["name"] for cell in data["cells"]] == ["base", "good"]
        text = (out / "matrix.txt").read_text(encoding="utf-8")
        assert "# Sig." in text
        assert "srcl-tgtl BLEU" in text
        assert len(list(out.glob("*/seed-*/result.json"))) == 4

    def test_resume_skips_finished_units(
        self, spec: ExperimentSpec, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test that a second run loads every unit from disk."""
        monkeypatch.setattr(experiment, "execute_unit", fake_unit({"good"}, []))
        out = tmp_path / "run"
        first = run_experiment_matrix(spec, out)

        def explode(*args: Any) -> UnitResult:
            raise AssertionError("unit should have been cached")

        monkeypatch.setattr(experiment, "execute_unit", explode)
        second = run_experiment_matrix(spec, out)
        assert [c.model_dump() for c in second.cells] == [c.model_dump() for c in first.cells]

    def test_moved_output_root_resumes(
        self, spec: ExperimentSpec, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test that unit records hold relative paths, so a moved root still resumes."""
        monkeypatch.setattr(experiment, "execute_unit", fake_unit({"good"}, []))
        first = run_experiment_matrix(spec, tmp_path / "run")
        (tmp_path / "run").rename(tmp_path / "moved")

        def explode(*args: Any) -> UnitResult:
            raise AssertionError("unit should have been cached")

        monkeypatch.setattr(experiment, "execute_unit", explode)
        second = run_experiment_matrix(spec, tmp_path / "moved")

        assert [c.model_dump() for c in second.cells] == [c.model_dump() for c in first.cells]
        for path in (tmp_path / "moved").glob("*/seed-*/result.json"):
            record = json.loads(path.read_text(encoding="utf-8"))
            assert "seconds" not in record
            assert record["directory"] == path.parent.relative_to(tmp_path / "moved").as_posix()

    def test_failure_is_recorded(
        self, spec: ExperimentSpec, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test that a failing unit marks its cell without stopping others."""
        calls: list[tuple[str, int]] = []
        healthy = fake_unit({"good"}, calls)

        def flaky(s: ExperimentSpec, cell: CellSpec, seed: int, directory: Path) -> UnitResult:
            if cell.name == "good" and seed == 1:
                raise RuntimeError("out of memory")
            return healthy(s, cell, seed, directory)

        monkeypatch.setattr(experiment, "execute_unit", flaky)
        out = tmp_path / "run"
        matrix = run_experiment_matrix(spec, out)

        good = next(cell for cell in matrix.cells if cell.name == "good")
        assert good.status == "partial"
        assert good.per_seed["1"] == {"ab": None, "ba": None}
        assert good.mean["ab"] == 100.0
        assert good.significant == {"ab": 1, "ba": 1}
        assert "out of memory" in good.errors[0]
        assert " x" in (out / "matrix.txt").read_text(encoding="utf-8")

        calls.clear()
        monkeypatch.setattr(experiment, "execute_unit", healthy)
        matrix = run_experiment_matrix(spec, out)
        assert calls == [("good", 1)]
        assert all(cell.status == "ok" for cell in matrix.cells)

    def test_all_seeds_failed(
        self, spec: ExperimentSpec, tmp_path: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test that a cell failing every seed is marked failed."""
        healthy = fake_unit(set(), [])

        def broken(s: ExperimentSpec, cell: CellSpec, seed: int, directory: Path) -> UnitResult:
            if cell.name == "good":
                raise ValueError("bad data")
            return healthy(s, cell, seed, directory)

        monkeypatch.setattr(experiment, "execute_unit", broken)
        matrix = run_experiment_matrix(spec, tmp_path / "run")
        good = next(cell for cell in matrix.cells if cell.name == "good")
        assert good.status == "failed"
        assert good.mean == {"ab": None, "ba": None}
        assert good.significant == {"ab": None, "ba": None}


class TestExecuteUnit:
    """End-to-end runs of the real pipeline on a tiny task."""

    def test_real_pipeline(self, tmp_path: Path) -> None:
        """Test that both cells run and produce scored hypotheses."""
        spec = ExperimentSpec(**tiny_spec_data())
        out = tmp_path / "run"
        matrix = run_experiment_matrix(spec, out)

        assert [cell.status for cell in matrix.cells] == ["ok", "ok"], [c.errors for c in matrix.cells]
        for cell in matrix.cells:
            for value in cell.mean.values():
                assert value is not None
                assert 0.0 <= value <= 100.0
        tagged_dir = next(out.glob("tagged-*/seed-0"))
        assert (tagged_dir / "model.bfck").is_file()
        assert (tagged_dir / "cpt-0.docs.jsonl").is_file()
        hyps = (tagged_dir / "ab.hyp.txt").read_text(encoding="utf-8").split("\n")[:-1]
        assert len(hyps) == 4
        base_dir = next(out.glob("base-*/seed-0"))
        assert not (base_dir / "model.bfck").exists()

    def test_identical_runs_write_identical_files(self, tmp_path: Path) -> None:
        """Test that two runs of one trained spec produce byte-identical outputs."""
        spec = ExperimentSpec(
            **tiny_spec_data(
                cpt_train={"preset": "desk_cpt", "epochs": 1, "batch_size": 4},
                sft_lora={"preset": "desk_sft_lora", "epochs": 1, "batch_size": 4},
            )
        )

        def outputs(root: Path) -> dict[str, bytes]:
            run_experiment_matrix(spec, root)
            return {
                path.relative_to(root).as_posix(): path.read_bytes()
                for path in sorted(root.rglob("*"))
                if path.is_file()
            }

        first, second = outputs(tmp_path / "a"), outputs(tmp_path / "b")

        assert sorted(first) == sorted(second)
        assert {"spec.json", "matrix.json", "matrix.txt"} <= set(first)
        assert sum(name.endswith("result.json") for name in first) == 2
        for name, content in first.items():
            assert second[name] == content, name

    @pytest.mark.slow
    def test_training_run_in_processes(self, tmp_path: Path) -> None:
        """Test a trained two-seed matrix with a process pool."""
        data = tiny_spec_data(
            seeds=[0, 1],
            cpt_train={"preset": "desk_cpt", "epochs": 1, "batch_size": 4},
            sft_lora={"preset": "desk_sft_lora", "epochs": 1, "batch_size": 4},
            cells=[
                {"name": "base", "sft": "none"},
                {"name": "tagged", "cpt": [{"ordering": "mix", "marker": "tagged"}]},
                {
                    "name": "staged",
                    "cpt": [
                        {"ordering": "mono"},
                        {"ordering": "ab", "marker": "json", "replay_fraction": 0.2},
                    ],
                    "sft": "full",
                },
            ],
        )
        matrix = run_experiment_matrix(ExperimentSpec(**data), tmp_path / "run", workers=2, torch_threads=1)
        assert all(cell.status == "ok" for cell in matrix.cells), [c.errors for c in matrix.cells]


BUNDLED_SPEC = Path(__file__).resolve().parents[1] / "experiments" / "desk_replication.yaml"


@pytest.mark.slow
class TestReplication:
    """Qualitative orderings on the bundled cipher+reversal matrix (three seeds)."""

    @pytest.fixture(scope="class")
    def matrix(self, tmp_path_factory: pytest.TempPathFactory) -> ExperimentMatrix:
        out = tmp_path_factory.mktemp("replication")
        workers = min(4, os.cpu_count() or 1)
        matrix = run_experiment_matrix(BUNDLED_SPEC, out, workers=workers, torch_threads=1)
        assert all(cell.status == "ok" for cell in matrix.cells), [c.errors for c in matrix.cells]
        return matrix

    @staticmethod
    def mean(matrix: ExperimentMatrix, name: str, key: str) -> float:
        value = next(cell for cell in matrix.cells if cell.name == name).mean[key]
        assert value is not None
        return value

    @staticmethod
    def seed_score(matrix: ExperimentMatrix, name: str, seed: int, key: str) -> float:
        value = next(cell for cell in matrix.cells if cell.name == name).per_seed[str(seed)][key]
        assert value is not None
        return value

    def test_directionality(self, matrix: ExperimentMatrix) -> None:
        """Test that A->B CPT helps A->B by 10 points over B->A and over mono CPT, per seed."""
        for seed in matrix.seeds:
            ab = self.seed_score(matrix, "ab_sft", seed, "ab")
            assert ab >= self.seed_score(matrix, "ab_sft", seed, "ba") + 10
            assert ab >= self.seed_score(matrix, "mono_sft", seed, "ab") + 10

    def test_mix_beats_direct_sft(self, matrix: ExperimentMatrix) -> None:
        """Test that mix CPT plus SFT beats SFT alone by 5 points in both directions."""
        for key in ("ab", "ba"):
            assert self.mean(matrix, "cpt_sft", key) >= self.mean(matrix, "direct_sft", key) + 5

    def test_ablation_ranking(self, matrix: ExperimentMatrix) -> None:
        """Test that CPT+SFT ranks first and neither phase last in both directions."""
        for key in ("ab", "ba"):
            names = ("neither", "direct_sft", "cpt_only", "cpt_sft")
            scores = {name: self.mean(matrix, name, key) for name in names}
            assert all(scores["cpt_sft"] > v for name, v in scores.items() if name != "cpt_sft")
            assert all(scores["neither"] < v for name, v in scores.items() if name != "neither")

    def test_tagged_not_worse_than_interleaved(self, matrix: ExperimentMatrix) -> None:
        """Test that target tags cost at most one point against plain interleaving."""
        for key in ("ab", "ba"):
            assert self.mean(matrix, "mix_tagged_sft", key) >= self.mean(matrix, "cpt_sft", key) - 1

    def test_replay_retention(self, matrix: ExperimentMatrix) -> None:
        """Test that 1% replay recovers at least half of the A->B drop after B->A CPT."""
        forgotten = self.mean(matrix, "ab_then_ba_sft", "ab")
        drop = self.mean(matrix, "ab_sft", "ab") - forgotten
        recovered = self.mean(matrix, "ab_then_ba_replay_sft", "ab") - forgotten
        if drop > 0:
            assert recovered >= 0.5 * drop

    def test_data_curve(self, matrix: ExperimentMatrix) -> None:
        """Test that A->B BLEU grows with the CPT data fraction."""
        curve = [self.mean(matrix, name, "ab") for name in ("ab_10pct_sft", "ab_30pct_sft", "ab_sft")]
        assert curve[0] < curve[2]
        assert curve[0] <= curve[1] <= curve[2]
