"""Shared plumbing for the commands that execute an experiment config."""

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from ..experiment_config import apply_overrides, load_config
from ..harness import run_experiment
from ..lab.exceptions import WorkbenchError

INVALID_CONFIG = 2
PARTIAL_FAILURE = 3


def validation_message(error):
    if hasattr(error, "error_dict"):
        return "; ".join(
            f"{field}: {' '.join(messages)}" for field, messages in sorted(error.message_dict.items())
        )
    return " ".join(error.messages)


def parse_field_overrides(overrides):
    """``--set key=value`` pairs for a flat dataclass (no dotted paths)."""
    try:
        return apply_overrides({}, overrides)
    except ValueError as e:
        raise CommandError(str(e), returncode=INVALID_CONFIG)


class ExperimentCommand(BaseCommand):
    """Base for commands that load a config file and run it through the harness"""

    def add_arguments(self, parser):
        parser.add_argument("config", help="Experiment config file (JSON)")
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY.PATH=VALUE",
            help="Override a config field; the value is parsed as JSON when possible",
        )
        parser.add_argument(
            "--force",
            action="store_true",
            help="Re-run even when a complete run with the same config hash exists",
        )
        parser.add_argument(
            "--workers",
            type=int,
            help="Worker processes (default: settings.WORKBENCH['MAX_WORKERS'])",
        )

    def read_config(self, options, game=None):
        try:
            config = apply_overrides(load_config(options["config"]), options["overrides"])
        except (OSError, ValueError) as e:
            raise CommandError(f"Invalid config: {e}", returncode=INVALID_CONFIG)
        if game is not None:
            config["game"] = game
        return config

    def execute_config(self, config, options):
        try:
            result = run_experiment(
                config, force=options["force"], max_workers=options["workers"]
            )
        except ValidationError as e:
            raise CommandError(
                f"Invalid config: {validation_message(e)}", returncode=INVALID_CONFIG
            )
        except WorkbenchError as e:
            raise CommandError(str(e))

        run = result.run
        if result.cached:
            self.stdout.write(f"cached: {run.output_dir}")
            return result

        for failure in result.failures:
            self.stdout.write(self.style.ERROR(f"✗ {failure}"))
        if result.failures:
            raise CommandError(
                f"{len(result.failures)} job(s) failed; partial results in {run.output_dir}",
                returncode=PARTIAL_FAILURE,
            )
        rows = run.summary.get("row_count", 0)
        self.stdout.write(
            self.style.SUCCESS(
                f"Complete: {run.game} run {run.config_hash[:12]}, {rows} summary row(s) "
                f"in {run.wall_clock_seconds:.1f}s"
            )
        )
        self.stdout.write(run.output_dir)
        return result
