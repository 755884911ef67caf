from ..base import ExperimentCommand

GAMES = {
    "robustness": "robustness",
    "detectability": "detectability-game",
}


class Command(ExperimentCommand):
    help = "Play the robustness or detectability game for every cell of a config"

    def add_arguments(self, parser):
        parser.add_argument("game", choices=sorted(GAMES))
        super().add_arguments(parser)

    def handle(self, *args, **options):
        config = self.read_config(options, game=GAMES[options["game"]])
        self.execute_config(config, options)
