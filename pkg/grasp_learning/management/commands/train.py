from django.core.management.base import BaseCommand, CommandError

from grasp_learning.conf import PRESETS
from grasp_learning.exceptions import GraspLearningError
from grasp_learning.experiment import RunConfig, load_run_config, run_training
from grasp_learning.variants import variant_names


class Command(BaseCommand):
    help = "Train one agent variant on the grasping simulator, writing checkpoints and metrics to its run directory."

    def add_arguments(self, parser):
        parser.add_argument('--config', help="YAML run configuration; command-line options override it.")
        parser.add_argument('--variant', choices=variant_names())
        parser.add_argument('--seed', type=int)
        parser.add_argument('--output', help="Run directory (default: OUTPUT_DIR/<variant>-seed<seed>).")
        parser.add_argument('--preset', choices=PRESETS)
        parser.add_argument('--resume', action='store_true', help="Continue from the newest checkpoint.")

    def handle(self, *args, **options):
        overrides = {
            'variant': options['variant'],
            'seed': options['seed'],
            'output_dir': options['output'],
            'preset': options['preset'],
        }
        try:
            if options['config']:
                config = load_run_config(options['config'], **overrides)
            else:
                config = RunConfig.from_settings(**{k: v for k, v in overrides.items() if v is not None})
            self.stdout.write(f"Training {config.variant} (seed {config.seed}) in {config.run_dir}")
            final = run_training(config, resume=options['resume'])
        except GraspLearningError as exc:
            raise CommandError(str(exc))
        self.stdout.write(self.style.SUCCESS(f"Finished {config.variant}: running success {final:.3f}"))
