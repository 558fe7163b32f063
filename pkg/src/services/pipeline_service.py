"""
Pipeline Service.
Runs the stages in a workdir, one directory per stage with a manifest that
records the config hash, and drives the init-depth x TS-Align ablation grid.
"""
import csv
import dataclasses
import json
import logging
import math
import os
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from src.config.settings import Config, InitPlan, PipelineConfig
from src.exceptions.base import ConfigError, ConfigPathError, ContractViolation
from src.repositories.artifact_repository import (
    MANIFEST, Workspace, read_blocks, read_codes, read_json, read_sid_map, read_tokens, require_stage,
    write_blocks, write_codes, write_json, write_manifest, write_sid_map, write_tokens,
)
from src.repositories.catalog_repository import (
    ItemCatalog, load_catalog, load_embeddings, load_filtered_catalog, load_interactions, write_catalog,
    write_sequences,
)
from src.services.catalog_service import filter_and_sequence
from src.services.corpus_service import (
    Corpus, assemble_corpus, make_asymmetric_examples, make_item_alignment_examples, make_seq_rec_eval_examples,
    make_seq_rec_examples, make_tsalign_examples, read_examples, split_leave_last_out, write_examples,
)
from src.services.decode_service import CUTOFFS, comprehension_eval, rank_examples, write_ranked_csv
from src.services.extractor_service import SemanticExtractor, build_token_clusters, read_semantics, write_semantics
from src.services.init_service import build_init_matrix, load_embedding_table, pre_token_matrix
from src.services.model_service import build_model, load_model, save_model
from src.services.quantizer_service import EncodeResult, Projection, collision_free_ratio, fit_projection, rq_encode, rq_fit
from src.services.sid_service import (
    SPECIAL_TOKENS, Vocabulary, assign_sids, build_trie, collision_stats, format_sid, mint_tokens, parse_sid,
)
from src.services.synth_service import write_synthetic
from src.services.training_service import train, write_train_report
from src.utils.error_handling import correlation_context, log_errors
from src.utils.string_utils import split_words

logger = logging.getLogger(__name__)

STAGES = ("quantize", "mint", "extract", "init", "corpus", "train", "eval", "probe")


def _projection_record(projection: Projection) -> dict:
    return {
        "normalize": projection.normalize,
        "mean": None if projection.mean is None else [float(v) for v in projection.mean],
        "components": None if projection.components is None else [[float(v) for v in row]
                                                                  for row in projection.components],
    }


class PipelineService:
    """Stage runner bound to one config and one workspace."""

    def __init__(self, cfg: PipelineConfig, workspace: Optional[Workspace] = None, progress: bool = True):
        self.cfg = cfg
        self.workspace = workspace or Workspace(cfg.workdir)
        self.progress = progress and not Config.LOG_JSON
        correlation_context.set_correlation_id(cfg.run_id())

    # -- helpers -----------------------------------------------------------

    def _require(self, stage: str) -> dict:
        return require_stage(self.workspace, stage, self.cfg.stage_hash(stage))

    def _dir(self, stage: str) -> Path:
        return self.workspace.stage_dir(stage, create=True)

    def is_fresh(self, stage: str) -> bool:
        """True when the stage's manifest exists and matches the current config."""
        path = self.workspace.stage_dir(stage) / MANIFEST
        if not path.exists():
            return False
        return read_json(path).get("config_hash") == self.cfg.stage_hash(stage)

    def _check_inputs(self, keys: Sequence[Tuple[str, str]]) -> None:
        for key, path in keys:
            if not path or not os.path.exists(path):
                raise ConfigPathError(f"{key} points to a missing file: {path!r}", path=path, key=key)

    def _catalog(self) -> ItemCatalog:
        quantize = self.workspace.stage_dir("quantize")
        return load_filtered_catalog(str(quantize / "catalog.jsonl"), str(quantize / "sequences.jsonl"))

    def _sids(self) -> Dict[str, Tuple[int, ...]]:
        codes = self.cfg.quantizer.codes_per_level
        return {item_id: parse_sid(text, codes)
                for item_id, text in read_sid_map(self.workspace.path("mint", "sid_map.tsv")).items()}

    def _sid_tokens(self) -> List[str]:
        return read_tokens(self.workspace.path("mint", "sid_tokens.txt"))

    def _vocab(self) -> Vocabulary:
        return Vocabulary.from_tokens(read_tokens(self.workspace.path("corpus", "vocab.txt")))

    # -- stages ------------------------------------------------------------

    @log_errors
    def quantize(self) -> dict:
        paths = self.cfg.paths
        self._check_inputs([("PATHS_CATALOG", paths.catalog), ("PATHS_INTERACTIONS", paths.interactions),
                            ("PATHS_EMBEDDINGS", paths.embeddings)])
        catalog = load_catalog(paths.catalog)
        filtered = filter_and_sequence(load_interactions(paths.interactions, catalog), catalog, self.cfg.min_count)
        embeddings = load_embeddings(paths.embeddings, catalog).subset(filtered.item_ids())

        projection = fit_projection(embeddings.rows, self.cfg.quantizer)
        embeddings = dataclasses.replace(embeddings, rows=projection.transform(embeddings.rows))
        codebook = rq_fit(embeddings, self.cfg.quantizer)
        encoded = rq_encode(embeddings, codebook, self.cfg.quantizer.workers, self.cfg.quantizer.chunk_size)

        out = self._dir("quantize")
        write_catalog(str(out / "catalog.jsonl"), filtered)
        write_sequences(str(out / "sequences.jsonl"), filtered)
        write_blocks(out / "codebook.bin", codebook.levels, codebook.seed)
        write_json(out / "projection.json", _projection_record(projection))
        write_codes(out / "codes.tsv", encoded.item_order, encoded.codes)
        report = {
            "items": len(filtered),
            "users": len(filtered.sequences),
            "dim": codebook.dim,
            "levels": codebook.report,
            "collision_free_ratio": collision_free_ratio(encoded.codes),
        }
        write_json(out / "report.json", report)
        write_manifest(self.workspace, "quantize", self.cfg.stage_hash("quantize"),
                       ["catalog.jsonl", "sequences.jsonl", "codebook.bin", "projection.json", "codes.tsv",
                        "report.json"])
        return report

    @log_errors
    def mint(self) -> dict:
        self._require("quantize")
        catalog = self._catalog()
        order, codes = read_codes(self.workspace.path("quantize", "codes.tsv"))
        encoded = EncodeResult(codes=codes, final_residuals=codes[:, :0].astype(float), item_order=order)
        sids = assign_sids(encoded, catalog, self.cfg.seed, self.cfg.quantizer.codes_per_level)
        tokens = mint_tokens(self.cfg.quantizer)

        out = self._dir("mint")
        write_sid_map(out / "sid_map.tsv", {item_id: format_sid(sid) for item_id, sid in sids.items()})
        write_tokens(out / "sid_tokens.txt", tokens)
        report = {**collision_stats(encoded, sids), "tokens": len(tokens)}
        write_json(out / "report.json", report)
        write_manifest(self.workspace, "mint", self.cfg.stage_hash("mint"),
                       ["sid_map.tsv", "sid_tokens.txt", "report.json"])
        return report

    @log_errors
    def extract(self, client=None) -> dict:
        self._require("mint")
        self._require("quantize")
        catalog = self._catalog()
        vocab = Vocabulary(pre_tokens=list(SPECIAL_TOKENS), sid_tokens=self._sid_tokens())
        clusters = build_token_clusters(self._sids(), vocab)

        cache_dir = self.cfg.extractor.cache_dir or Config.EXTRACTOR_CACHE_DIR or str(self.cfg.workdir / "cache")
        extractor = SemanticExtractor(catalog, self.cfg.extractor, cache_dir=cache_dir, client=client)
        semantics = extractor.extract_all(clusters)

        out = self._dir("extract")
        write_semantics(out / "semantics.jsonl", semantics)
        report = {**extractor.report(), "tokens": len(clusters), "with_semantics": len(semantics)}
        write_json(out / "report.json", report)
        write_manifest(self.workspace, "extract", self.cfg.stage_hash("extract"), ["semantics.jsonl", "report.json"])
        return report

    @log_errors
    def init(self) -> dict:
        self._require("mint")
        self._require("extract")
        self._check_inputs([("PATHS_EMBEDDING_TABLE", self.cfg.paths.embedding_table)])
        table = load_embedding_table(self.cfg.paths.embedding_table)
        if table.dim != self.cfg.model.dim:
            raise ConfigError(f"embedding table dim {table.dim} != MODEL_DIM {self.cfg.model.dim}", key="MODEL_DIM")
        vocab = Vocabulary(pre_tokens=list(SPECIAL_TOKENS), sid_tokens=self._sid_tokens())
        semantics = read_semantics(self.workspace.path("extract", "semantics.jsonl"))
        result = build_init_matrix(semantics, vocab, table, self.cfg.init)

        out = self._dir("init")
        write_blocks(out / "init_matrix.bin", [result.matrix], self.cfg.init.seed)
        write_json(out / "report.json", result.report)
        write_manifest(self.workspace, "init", self.cfg.stage_hash("init"), ["init_matrix.bin", "report.json"])
        return result.report

    @log_errors
    def corpus(self) -> dict:
        self._require("mint")
        self._require("extract")
        catalog = self._catalog()
        sids = self._sids()
        cfg = self.cfg.corpus
        splits = split_leave_last_out(catalog)

        parts = {
            "seq_rec": make_seq_rec_examples(catalog, sids, cfg.max_hist, splits, cfg.sliding),
            "item_alignment": make_item_alignment_examples(catalog, sids),
            "asymmetric": make_asymmetric_examples(catalog, sids, cfg.max_hist, splits, cfg.sliding),
        }
        if cfg.tsalign:
            parts["tsalign"] = make_tsalign_examples(read_semantics(self.workspace.path("extract", "semantics.jsonl")))
        corpus = assemble_corpus(
            parts, cfg.weights, cfg.seed, self.cfg.quantizer.codes_per_level,
            valid=make_seq_rec_eval_examples(splits, sids, cfg.max_hist, "valid"),
            test=make_seq_rec_eval_examples(splits, sids, cfg.max_hist, "test"),
        )

        words = set()
        for example in corpus.train + corpus.valid + corpus.test:
            words.update(split_words(example.instruction))
            words.update(split_words(example.response))
        vocab = Vocabulary.build(words, self._sid_tokens())

        out = self._dir("corpus")
        write_examples(out / "train.jsonl", corpus.train)
        write_examples(out / "valid.jsonl", corpus.valid)
        write_examples(out / "test.jsonl", corpus.test)
        write_tokens(out / "vocab.txt", vocab.tokens())
        stats = {
            "counts": corpus.counts(),
            "mix_weights": corpus.mix_weights,
            "train": len(corpus.train),
            "valid": len(corpus.valid),
            "test": len(corpus.test),
            "vocab_size": len(vocab),
            "tsalign": cfg.tsalign,
        }
        write_json(out / "stats.json", stats)
        write_manifest(self.workspace, "corpus", self.cfg.stage_hash("corpus"),
                       ["train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "stats.json"])
        return stats

    @log_errors
    def train(self) -> dict:
        self._require("corpus")
        self._require("init")
        stats = read_json(self.workspace.path("corpus", "stats.json"))
        corpus = Corpus(
            train=read_examples(self.workspace.path("corpus", "train.jsonl")),
            valid=read_examples(self.workspace.path("corpus", "valid.jsonl")),
            mix_weights=stats["mix_weights"],
        )
        vocab = self._vocab()
        blocks, _ = read_blocks(self.workspace.path("init", "init_matrix.bin"))
        table = load_embedding_table(self.cfg.paths.embedding_table)

        model_cfg = dataclasses.replace(self.cfg.model, vocab_size=len(vocab))
        model = build_model(model_cfg)
        pre_rows = pre_token_matrix(vocab, table, self.cfg.init.seed, self.cfg.init.full_covariance)
        model.inject_embeddings(pre_rows, blocks[0], vocab.sid_offset)

        report = train(model, corpus, self.cfg.train, vocab, trie=build_trie(self._sids()), progress=self.progress)

        out = self._dir("train")
        save_model(out / "model.ckpt", model, {"best_step": report.best_step})
        write_train_report(out / "train_report.csv", report)
        summary = {
            "best_step": report.best_step,
            "best_eval_loss": report.best_eval_loss,
            "early_eval_loss": report.early_eval_loss(),
            "final_step": report.final_step,
            "stopped_early": report.stopped_early,
            "dropped_examples": report.dropped_examples,
            "parameters": model.parameter_count(),
        }
        write_json(out / "summary.json", summary)
        write_manifest(self.workspace, "train", self.cfg.stage_hash("train"),
                       ["model.ckpt", "train_report.csv", "summary.json"])
        return summary

    def _probe(self, model, vocab) -> Tuple[float, float, int]:
        catalog = self._catalog()
        items = catalog.item_ids()
        if self.cfg.eval.probe_items:
            items = items[:self.cfg.eval.probe_items]
        sids = self._sids()
        acc1, acc2 = comprehension_eval(model, catalog, sids, build_trie(sids), vocab, self.cfg.eval.probe_width,
                                        self.cfg.eval.max_title_tokens, items)
        return acc1, acc2, len(items)

    @log_errors
    def evaluate(self) -> dict:
        for stage in ("quantize", "mint", "corpus", "train"):
            self._require(stage)
        model, _ = load_model(self.workspace.path("train", "model.ckpt"))
        vocab = self._vocab()
        examples = read_examples(self.workspace.path("corpus", "test.jsonl"))
        if self.cfg.eval.max_users:
            examples = examples[:self.cfg.eval.max_users]
        workers = Config.get_optimal_workers()["workers"] if Config.MAX_WORKERS else 1
        ranking = rank_examples(model, examples, build_trie(self._sids()), vocab, self.cfg.eval.beam_width, workers)
        logger.info(", ".join(f"HR@{k}={ranking.hr[k]:.4f} NDCG@{k}={ranking.ndcg[k]:.4f}" for k in CUTOFFS))

        acc1 = acc2 = None
        if self.cfg.eval.probes:
            acc1, acc2, _ = self._probe(model, vocab)

        out = self._dir("eval")
        report = {**ranking.to_record(), "acc1": acc1, "acc2": acc2, "beam_width": self.cfg.eval.beam_width,
                  "misses": ranking.misses}
        write_json(out / "report.json", report)
        files = ["report.json"]
        if self.cfg.eval.per_user_csv:
            write_ranked_csv(out / "ranked.csv", ranking)
            files.append("ranked.csv")
        write_manifest(self.workspace, "eval", self.cfg.stage_hash("eval"), files)
        return report

    @log_errors
    def probe(self) -> dict:
        for stage in ("quantize", "mint", "corpus", "train"):
            self._require(stage)
        model, _ = load_model(self.workspace.path("train", "model.ckpt"))
        acc1, acc2, items = self._probe(model, self._vocab())
        report = {"acc1": acc1, "acc2": acc2, "items": items, "probe_width": self.cfg.eval.probe_width}
        write_json(self._dir("probe") / "report.json", report)
        write_manifest(self.workspace, "probe", self.cfg.stage_hash("probe"), ["report.json"])
        return report

    def run_stage(self, stage: str, **kwargs) -> dict:
        if stage not in STAGES:
            raise ContractViolation(f"unknown stage {stage!r}")
        runner = self.evaluate if stage == "eval" else getattr(self, stage)
        return runner(**kwargs)

    def ensure(self, stages: Sequence[str] = STAGES[:-2]) -> None:
        """Run each stage whose artifacts are missing or stale, in order."""
        for stage in stages:
            if self.is_fresh(stage):
                logger.info(f"{stage} is up to date in {self.workspace.stage_dir(stage)}")
                continue
            self.run_stage(stage)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

ABLATION_COLUMNS = ("seed", "init", "tsalign", "early_eval_loss", "best_eval_loss", "hr@5", "hr@10", "ndcg@10",
                    "acc1", "acc2")


def init_variants(levels: int) -> List[Tuple[str, int]]:
    """(name, semantic levels): Random first, then SA-Init at increasing depth."""
    return [("random", 0)] + [(f"sa{depth}", depth) for depth in range(1, levels + 1)]


def _mean(values: Sequence[float]) -> Optional[float]:
    values = [v for v in values if v is not None and not math.isnan(v)]
    return math.fsum(values) / len(values) if values else None


def summarize_ablation(rows: Sequence[dict], levels: int) -> dict:
    """Direction checks per seed and averaged over seeds."""
    names = [name for name, _ in init_variants(levels)]
    deepest, shallowest = names[-1], names[1] if len(names) > 1 else names[0]
    by_key = {(r["seed"], r["init"], r["tsalign"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})

    per_seed = {}
    for seed in seeds:
        loss = {name: by_key[(seed, name, True)]["early_eval_loss"] for name in names if (seed, name, True) in by_key}
        with_ts = by_key.get((seed, deepest, True), {}).get("acc1")
        without_ts = by_key.get((seed, deepest, False), {}).get("acc1")
        per_seed[str(seed)] = {
            "early_eval_loss": loss,
            "init_depth_ordered": (len(loss) == len(names)
                                   and loss[deepest] <= loss[shallowest] <= loss["random"]),
            "acc1_with_tsalign": with_ts,
            "acc1_without_tsalign": without_ts,
        }

    mean_with = _mean([s["acc1_with_tsalign"] for s in per_seed.values()])
    mean_without = _mean([s["acc1_without_tsalign"] for s in per_seed.values()])
    return {
        "seeds": seeds,
        "per_seed": per_seed,
        "init_depth_ordered_all_seeds": all(s["init_depth_ordered"] for s in per_seed.values()),
        "acc1_with_tsalign_mean": mean_with,
        "acc1_without_tsalign_mean": mean_without,
        "tsalign_helps_acc1": (mean_with is not None and mean_without is not None and mean_with >= mean_without),
    }


@log_errors
def run_ablation(cfg: PipelineConfig, progress: bool = True) -> dict:
    """
    Train and evaluate every init variant with and without TS-Align for each
    seed in ABLATE_SEEDS; upstream stages are shared between runs that agree.
    """
    root = cfg.workdir / "ablate"
    levels = cfg.quantizer.levels
    rows: List[dict] = []

    for seed in cfg.ablate.seeds:
        base = root / f"seed{seed}"
        for name, depth in init_variants(levels):
            for tsalign in (True, False):
                plan = InitPlan.depth(depth, levels, seed)
                run_cfg = cfg.with_overrides(SEED=seed, INIT_PLAN=",".join(plan.strategies),
                                             CORPUS_TSALIGN=str(tsalign).lower(), EVAL_PROBES="true")
                shared = {
                    "quantize": base / "quantize",
                    "mint": base / "mint",
                    "extract": base / "extract",
                    "init": base / f"init-{name}",
                    "corpus": base / ("corpus-tsalign" if tsalign else "corpus-plain"),
                }
                run_dir = base / f"{name}-{'tsalign' if tsalign else 'plain'}"
                service = PipelineService(run_cfg, Workspace(run_dir, shared=shared), progress=progress)
                service.ensure(STAGES[:-1])
                summary = read_json(service.workspace.path("train", "summary.json"))
                report = read_json(service.workspace.path("eval", "report.json"))
                rows.append({
                    "seed": seed,
                    "init": name,
                    "tsalign": tsalign,
                    "early_eval_loss": summary["early_eval_loss"],
                    "best_eval_loss": summary["best_eval_loss"],
                    "hr@5": report["hr"]["5"],
                    "hr@10": report["hr"]["10"],
                    "ndcg@10": report["ndcg"]["10"],
                    "acc1": report["acc1"],
                    "acc2": report["acc2"],
                })

    root.mkdir(parents=True, exist_ok=True)
    with open(root / "ablation.csv", "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in ABLATION_COLUMNS])
    summary = summarize_ablation(rows, levels)
    write_json(root / "summary.json", summary)
    if not summary["init_depth_ordered_all_seeds"]:
        logger.warning("Early eval loss does not follow SA-Init depth ordering for every seed")
    if not summary["tsalign_helps_acc1"]:
        logger.warning("TS-Align did not raise mean ACC1 over the ablation seeds")
    logger.info(f"Ablation: {len(rows)} runs; summary in {root / 'summary.json'}")
    return summary


@log_errors
def run_synth(cfg: PipelineConfig) -> dict:
    return write_synthetic(cfg)


def describe(result) -> str:
    """Compact one-line rendering of a stage result for the console."""
    return json.dumps(result, sort_keys=True, default=str)[:2000]
