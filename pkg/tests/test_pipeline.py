import csv
import json

import pytest

import main
from src.exceptions.base import ArtifactMismatchError, ConfigError, PrerequisiteError
from src.repositories.artifact_repository import read_json, read_sid_map
from src.services.corpus_service import read_examples
from src.services.pipeline_service import (ABLATION_COLUMNS, STAGES, PipelineService, init_variants, run_ablation,
                                           run_synth, summarize_ablation)
from src.services.sid_service import parse_sid


def _overrides(cfg):
    return [f"{key}={value}" for key, value in cfg.source.items()]


@pytest.fixture
def synthetic(tiny_pipeline_config):
    cfg = tiny_pipeline_config()
    run_synth(cfg)
    return cfg


def test_synth_writes_inputs_and_config(synthetic, tmp_path):
    data = tmp_path / "data"
    for name in ("catalog.jsonl", "interactions.jsonl", "embeddings.txt", "word_vectors.txt", "pipeline.env"):
        assert (data / name).exists()
    env = (data / "pipeline.env").read_text()
    assert "QUANTIZER_CODES_PER_LEVEL=8,16,16" in env
    header = (data / "word_vectors.txt").read_text().splitlines()[0].split()
    assert int(header[1]) == synthetic.model.dim


def test_full_chain_produces_every_artifact(synthetic):
    service = PipelineService(synthetic, progress=False)
    service.ensure(STAGES)
    work = synthetic.workdir

    quantize = read_json(work / "quantize" / "report.json")
    assert quantize["items"] > 16
    sids = read_sid_map(work / "mint" / "sid_map.tsv")
    assert len(sids) == quantize["items"]
    assert len(set(sids.values())) == len(sids)
    for text in sids.values():
        parse_sid(text, synthetic.quantizer.codes_per_level)

    stats = read_json(work / "corpus" / "stats.json")
    assert stats["counts"]["seq_rec"] > 0 and stats["counts"]["tsalign_s2t"] > 0
    assert stats["test"] == stats["valid"]
    for example in read_examples(work / "corpus" / "test.jsonl"):
        assert example.task == "seq_rec"

    summary = read_json(work / "train" / "summary.json")
    assert summary["final_step"] <= synthetic.train.steps
    with open(work / "train" / "train_report.csv", newline="") as f:
        assert next(csv.reader(f)) == ["step", "train_loss", "eval_loss", "hr5"]

    report = read_json(work / "eval" / "report.json")
    assert set(report["hr"]) == {"3", "5", "10"}
    assert report["users_evaluated"] == stats["test"]
    assert 0.0 <= report["acc1"] <= 1.0
    assert (work / "eval" / "ranked.csv").exists()

    probe = read_json(work / "probe" / "report.json")
    assert probe["items"] == synthetic.eval.probe_items

    # A second pass finds everything fresh
    assert all(service.is_fresh(stage) for stage in STAGES)


def test_pipeline_artifacts_are_byte_identical_across_runs(tiny_pipeline_config, tmp_path):
    outputs = []
    for run in ("a", "b"):
        cfg = tiny_pipeline_config(PATHS_WORKDIR=str(tmp_path / f"work-{run}"))
        if run == "a":
            run_synth(cfg)
        PipelineService(cfg, progress=False).ensure(STAGES[:-2])
        work = cfg.workdir
        outputs.append({name: (work / name).read_bytes() for name in (
            "quantize/codebook.bin", "quantize/codes.tsv", "mint/sid_map.tsv", "extract/semantics.jsonl",
            "init/init_matrix.bin", "corpus/train.jsonl", "corpus/vocab.txt", "train/model.ckpt",
            "train/train_report.csv")})
    assert outputs[0] == outputs[1]


def test_stage_before_its_prerequisite_fails(synthetic):
    service = PipelineService(synthetic, progress=False)
    with pytest.raises(PrerequisiteError) as info:
        service.train()
    assert info.value.prerequisite == "corpus"

    code = main.run("train", overrides=_overrides(synthetic))
    assert code == 3


def test_stale_upstream_is_a_mismatch(synthetic):
    PipelineService(synthetic, progress=False).quantize()
    changed = synthetic.with_overrides(QUANTIZER_MAX_ITERS=3)
    with pytest.raises(ArtifactMismatchError):
        PipelineService(changed, progress=False).mint()
    assert main.run("mint", overrides=_overrides(changed)) == 3


def test_table_dim_must_match_model_dim(synthetic):
    service = PipelineService(synthetic.with_overrides(MODEL_DIM=32), progress=False)
    service.ensure(("quantize", "mint", "extract"))
    with pytest.raises(ConfigError) as info:
        service.init()
    assert info.value.key == "MODEL_DIM"


def test_exit_codes(synthetic, tmp_path):
    assert main.run("quantize", overrides=_overrides(synthetic) + ["MODEL_HEADS=3"]) == 2
    assert main.run("quantize", overrides=_overrides(synthetic) + [f"PATHS_CATALOG={tmp_path / 'nope.jsonl'}"]) == 2

    broken = tmp_path / "broken.jsonl"
    broken.write_text("{not json\n", encoding="utf-8")
    assert main.run("quantize", overrides=_overrides(synthetic) + [f"PATHS_CATALOG={broken}"]) == 4

    assert main.run("quantize", overrides=_overrides(synthetic)) == 0
    assert main.run("mint", overrides=_overrides(synthetic)) == 0


def test_config_file_and_cli_parser(synthetic, tmp_path):
    path = tmp_path / "run.env"
    path.write_text("\n".join(_overrides(synthetic)) + "\n", encoding="utf-8")
    args = main.build_parser().parse_args(["quantize", "-c", str(path), "--set", "QUANTIZER_MAX_ITERS=5"])
    assert args.command == "quantize" and args.overrides == ["QUANTIZER_MAX_ITERS=5"]
    assert main.run(args.command, args.config, args.overrides) == 0
    with pytest.raises(SystemExit):
        main.build_parser().parse_args(["dance"])


def test_summarize_ablation_checks_directions():
    rows = []
    for seed, losses, acc in ((1, (3.0, 2.5, 2.0, 1.5), (0.5, 0.25)), (2, (3.0, 2.5, 2.6, 2.0), (0.25, 0.5))):
        for (name, _), loss in zip(init_variants(3), losses):
            for tsalign in (True, False):
                rows.append({"seed": seed, "init": name, "tsalign": tsalign, "early_eval_loss": loss,
                             "acc1": acc[0] if tsalign else acc[1]})
    summary = summarize_ablation(rows, 3)
    assert summary["per_seed"]["1"]["init_depth_ordered"] is True
    assert summary["per_seed"]["2"]["init_depth_ordered"] is True
    assert summary["init_depth_ordered_all_seeds"] is True
    assert summary["acc1_with_tsalign_mean"] == pytest.approx(0.375)
    assert summary["tsalign_helps_acc1"] is True

    rows[0]["early_eval_loss"] = 1.0
    assert summarize_ablation(rows, 3)["per_seed"]["1"]["init_depth_ordered"] is False


def test_ablation_grid_runs_every_variant(synthetic):
    cfg = synthetic.with_overrides(EVAL_MAX_USERS=5, TRAIN_STEPS=3)
    summary = run_ablation(cfg, progress=False)
    root = cfg.workdir / "ablate"
    with open(root / "ablation.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert tuple(rows[0]) == ABLATION_COLUMNS
    assert [(r["init"], r["tsalign"]) for r in rows] == [
        (name, flag) for name, _ in init_variants(3) for flag in ("True", "False")]
    assert summary["seeds"] == [7]
    assert json.loads((root / "summary.json").read_text())["seeds"] == [7]
    # Upstream stages are shared across the grid
    assert sorted(p.name for p in (root / "seed7").iterdir() if p.name.startswith("init-")) == [
        "init-random", "init-sa1", "init-sa2", "init-sa3"]
