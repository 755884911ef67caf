from ..base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Run the experiment described by a config file"

    def handle(self, *args, **options):
        self.execute_config(self.read_config(options), options)
