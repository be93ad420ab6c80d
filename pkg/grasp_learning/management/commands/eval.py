from django.core.management.base import BaseCommand, CommandError

from grasp_learning.exceptions import GraspLearningError
from grasp_learning.experiment import run_eval


class Command(BaseCommand):
    help = "Evaluate a checkpoint greedily on held-out scenes and append the result to eval.csv."

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--grasps', type=int, help="Number of evaluation grasps (default from the run config).")
        parser.add_argument('--tau', type=float, help="Evaluation temperature override.")
        parser.add_argument('--seed', type=int)

    def handle(self, *args, **options):
        if options['grasps'] is not None and options['grasps'] <= 0:
            raise CommandError("--grasps must be positive")
        try:
            result = run_eval(options['checkpoint'], n_grasps=options['grasps'], tau_test=options['tau'],
                              seed=options['seed'])
        except GraspLearningError as exc:
            raise CommandError(str(exc))
        self.stdout.write(self.style.SUCCESS(
            f"Success rate {result.success_rate:.3f} +/- {result.standard_error:.3f} over {result.n_grasps} grasps"
        ))
