from django.core.management.base import CommandError

from ..base import INVALID_CONFIG, ExperimentCommand

SWEEP_GAMES = ("robustness", "detectability", "data-efficiency")


class Command(ExperimentCommand):
    help = "Run the config's sweep over m, r and delta (robustness, detectability or data-efficiency)"

    def handle(self, *args, **options):
        config = self.read_config(options)
        game = config.get("game", "robustness")
        if game not in SWEEP_GAMES:
            raise CommandError(
                f"sweep runs one of {', '.join(SWEEP_GAMES)}, not {game!r}",
                returncode=INVALID_CONFIG,
            )
        self.execute_config(config, options)
