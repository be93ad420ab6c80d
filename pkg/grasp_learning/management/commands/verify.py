from django.core.management.base import BaseCommand, CommandError

from grasp_learning.exceptions import GraspLearningError
from grasp_learning.verification import CHECKS, verify_checkpoint, verify_suite


class Command(BaseCommand):
    help = "Run the equivariance, gradient, loss and simulator property checks."

    def add_arguments(self, parser):
        parser.add_argument('--only', nargs='+', choices=sorted(CHECKS), help="Run only these checks.")
        parser.add_argument('--checkpoint', help="Also check the kernels and equivariance of a stored model.")

    def handle(self, *args, **options):
        report = verify_suite(options['only'])
        self.stdout.write(str(report))
        passed = report.passed
        if options['checkpoint']:
            try:
                checkpoint_report = verify_checkpoint(options['checkpoint'])
            except GraspLearningError as exc:
                raise CommandError(str(exc))
            self.stdout.write(str(checkpoint_report))
            passed = passed and checkpoint_report.passed
        if not passed:
            raise CommandError("Verification failed")
        self.stdout.write(self.style.SUCCESS("All checks passed"))
