#!/usr/bin/env python3
# -*- coding: utf-8 -*-

import json

import pytest

from diversifier import TYPE_M_CAVEAT
from errors import StageError
from main import main
from pipeline import Pipeline, PipelineConfig, run_pipeline, stage
from storage_manager import ArtifactStore
from utils.settings_config import SettingsConfig

SMALL_RUN = {
    ("Pipeline", "n_variants"): 2,
    ("Pipeline", "seed"): 11,
    ("Testgen", "suite_size"): 8,
    ("Testgen", "fuzz_budget"): 300,
    ("Synthesis", "n_rewrites"): 2,
    ("Synthesis", "iterations"): 400,
    ("Synthesis", "restarts"): 2,
    ("Synthesis", "patience"): 300,
}

TOY_SELECTION = [0, 6, 8, 10, 11, 12]


@pytest.fixture
def settings_file(tmp_path):
    settings = SettingsConfig(use_env=False)
    for (section, key), value in SMALL_RUN.items():
        settings.set(section, key, value)
    path = str(tmp_path / "settings.ini")
    settings.save_config(path)
    return path


@pytest.fixture
def pipeline(toy_path, settings_file, tmp_path):
    out = str(tmp_path / "out")
    config = PipelineConfig(toy_path, SettingsConfig(settings_file, use_env=False), out)
    return Pipeline(config, ArtifactStore(out))


def test_stage_tags_errors():
    with pytest.raises(StageError) as info:
        with stage("testgen"):
            raise ValueError("bad suite")
    assert info.value.stage == "testgen"
    assert str(info.value) == "[testgen] bad suite"


def test_select_runs_the_scan_it_needs(pipeline):
    assert pipeline.select() == TOY_SELECTION
    store = pipeline.store
    for name in ("cfg.json", "gadgets.json", "census.json", "typer.json", "typem.json", "selection.json"):
        assert store.exists(name)
    selection = {item["block"]: item["reasons"] for item in store.read_json("selection.json")["blocks"]}
    assert selection[0] == ["TypeM"]
    assert selection[10] == ["TypeR"]
    assert store.read_json("census.json")["seed"] == 11
    assert [item["block"] for item in store.read_json("typem.json")["blocks"]] == [0]


def test_liveness_and_testgen_artifacts(pipeline):
    live_sets = pipeline.liveness()
    assert sorted(live_sets) == TOY_SELECTION
    suites = pipeline.testgen()
    assert all(1 <= len(suite) <= 8 for suite in suites.values())
    reloaded = pipeline.suites()
    assert [case.input for case in reloaded[10]] == [case.input for case in suites[10]]
    assert pipeline.store.list("suites") == sorted(f"block_{bid}.json" for bid in TOY_SELECTION)


@pytest.mark.slow
def test_full_run(toy_path, payload_path, settings_file, tmp_path):
    out = str(tmp_path / "out")
    config = PipelineConfig(toy_path, SettingsConfig(settings_file, use_env=False), out)
    store = ArtifactStore(out)
    summary = run_pipeline(config, store, payload_path=payload_path)
    assert summary["seed"] == 11
    assert summary["selected"] == len(TOY_SELECTION)
    assert summary["variants"] == 2
    for name in ("settings.ini", "plan.json", "manifest.json", "survival.json", "payload_report.json"):
        assert store.exists(name)
    assert store.list("rewrites") == sorted(f"block_{bid}.json" for bid in TOY_SELECTION)
    survival = store.read_json("survival.json")
    assert survival["notes"] == [TYPE_M_CAVEAT]
    assert sorted(survival["variants"]) == ["variant_0.s", "variant_1.s"]
    report = store.read_json("payload_report.json")
    assert report["original"]["feasible"]
    assert report["fleet"]["total"] == 2
    for item in store.read_json("rewrites/block_10.json")["rewrites"]:
        assert item["validated"] and item["cost_zero"]
        assert item["asm"][-1] == "ret"

    status = main(["--out", out, "--config", settings_file, "--json", "verify", toy_path])
    failures = store.read_json("verify.json")["failures"]
    assert status == (1 if failures else 0)


@pytest.mark.slow
def test_runs_with_the_same_seed_are_identical(toy_path, settings_file, tmp_path):
    stores = []
    for name in ("first", "second"):
        out = str(tmp_path / name)
        config = PipelineConfig(toy_path, SettingsConfig(settings_file, use_env=False), out)
        store = ArtifactStore(out)
        run_pipeline(config, store)
        stores.append(store)
    first, second = stores
    assert first.read_text("manifest.json") == second.read_text("manifest.json")
    files = [item["file"] for item in first.read_json("manifest.json")["variants"]]
    assert files == ["variant_0.s", "variant_1.s"]
    for name in files:
        assert first.read_text(name) == second.read_text(name)


def test_dry_run_from_the_command_line(toy_path, settings_file, tmp_path, capsys):
    out = str(tmp_path / "out")
    status = main(["--out", out, "--config", settings_file, "--json", "run", toy_path, "--dry-run"])
    assert status == 0
    assert json.loads(capsys.readouterr().out) == {"seed": 11, "selected": len(TOY_SELECTION)}
    store = ArtifactStore(out)
    assert store.exists("census.json")
    assert not store.exists("plan.json")


def test_command_line_overrides_reach_the_settings(toy_path, settings_file, tmp_path, capsys):
    out = str(tmp_path / "out")
    assert main(["--out", out, "--config", settings_file, "--seed", "0x5", "--json", "select", toy_path]) == 0
    assert json.loads(capsys.readouterr().out) == {"selected": TOY_SELECTION}
    saved = SettingsConfig(str(tmp_path / "out" / "settings.ini"), use_env=False)
    assert saved.get_seed() == 5


def test_unparseable_input_fails_in_the_parse_stage(tmp_path, capsys):
    source = tmp_path / "bad.s"
    source.write_text("main:\n\tmov (%rax,%rbx,3),%rcx\n\tret\n", encoding="utf-8")
    status = main(["--out", str(tmp_path / "out"), "scan", str(source)])
    assert status == 1
    assert "[parse]" in capsys.readouterr().err


def test_missing_input_fails(tmp_path, capsys):
    status = main(["--out", str(tmp_path / "out"), "scan", str(tmp_path / "missing.s")])
    assert status == 1
    assert "[parse]" in capsys.readouterr().err


def test_unknown_entry_fails_in_the_scan_stage(toy_path, tmp_path, capsys):
    status = main(["--out", str(tmp_path / "out"), "scan", toy_path, "--entry", "nowhere"])
    assert status == 1
    assert "[scan]" in capsys.readouterr().err
