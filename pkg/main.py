"""
Main Application Runner
Command-line entry point for the semantic-ID recommendation pipeline.
"""
import argparse
import logging
import sys

from pythonjsonlogger.json import JsonFormatter

from src.config.settings import Config, PipelineConfig, config_keys
from src.services.pipeline_service import STAGES, PipelineService, describe, run_ablation, run_synth
from src.utils.error_handling import correlation_context
from src.utils.error_responses import ErrorResponse, ExitCode, exit_code_for

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "quantize": "Filter the log, fit the residual codebooks and encode every item",
    "mint": "Resolve collisions into unique SIDs and mint the SID tokens",
    "extract": "Describe every SID token's item cluster (local TF-IDF or remote LLM)",
    "init": "Build the initial SID-token embedding matrix",
    "corpus": "Generate the multi-task instruction corpus and vocabulary",
    "train": "Train the decoder on the corpus",
    "eval": "Full-ranking HR/NDCG on the test split (plus probes when EVAL_PROBES is on)",
    "probe": "Title2SID / SID2Title comprehension probes",
    "ablate": "Init-depth x TS-Align ablation grid over ABLATE_SEEDS",
    "synth": "Write a seeded synthetic catalog, log, embeddings and pipeline.env",
}


class RunIdFilter(logging.Filter):
    """Stamps every record with the run's correlation id."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = correlation_context.get_correlation_id()
        return True


def setup_logging(level: str, json_lines: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_lines:
        handler.setFormatter(JsonFormatter(
            "%(asctime)s %(levelname)s %(name)s %(message)s",
            rename_fields={"asctime": "ts", "levelname": "level", "name": "logger"},
        ))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler.addFilter(RunIdFilter())
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), handlers=[handler], force=True)

    # Reduce HTTP client logging verbosity
    logging.getLogger('urllib3').setLevel(logging.WARNING)
    logging.getLogger('requests').setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="main.py",
        description="Semantic-ID generative recommendation pipeline",
        epilog="Config keys: " + ", ".join(config_keys()),
    )
    parser.add_argument("command", choices=list(SUBCOMMANDS), help="; ".join(f"{k}: {v}" for k, v in SUBCOMMANDS.items()))
    parser.add_argument("--config", "-c", help="Flat KEY=VALUE pipeline config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override one config key (repeatable)")
    parser.add_argument("--json-progress", action="store_true", help="Log JSON lines to stderr")
    parser.add_argument("--log-level", default=Config.LOG_LEVEL)
    return parser


def run(command: str, config_path: str = None, overrides=None, json_progress: bool = False) -> int:
    """Run one subcommand; returns the process exit status."""
    cfg = None
    try:
        cfg = PipelineConfig.load(config_path, overrides)
        correlation_context.set_correlation_id(cfg.run_id())
        progress = not json_progress

        if command == "synth":
            result = run_synth(cfg)
        elif command == "ablate":
            result = run_ablation(cfg, progress=progress)
        elif command in STAGES:
            result = PipelineService(cfg, progress=progress).run_stage(command)
        else:
            raise ValueError(f"unknown command {command}")

        logger.info(f"{command} finished: {describe(result)}")
        return ExitCode.SUCCESS.value
    except Exception as e:
        payload = ErrorResponse.from_exception(e, run_id=cfg.run_id() if cfg else None)
        logger.error(f"{command} failed: {e}", extra={"event": payload["error"]})
        if exit_code_for(e) is ExitCode.RUNTIME_FAILURE and not hasattr(e, "details"):
            logger.exception("Unexpected error")
        return exit_code_for(e).value


def main(argv=None) -> int:
    """Main application entry point."""
    args = build_parser().parse_args(argv)
    json_lines = args.json_progress or Config.LOG_JSON
    setup_logging(args.log_level, json_lines)
    return run(args.command, args.config, args.overrides, json_lines)


if __name__ == "__main__":
    sys.exit(main())
