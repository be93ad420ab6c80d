from django.db import models


class TrainingRun(models.Model):
    STATUS_CHOICES = [
        ('pending', 'Pending'),
        ('running', 'Running'),
        ('finished', 'Finished'),
        ('failed', 'Failed'),
    ]

    variant = models.CharField(max_length=50)
    seed = models.IntegerField()
    status = models.CharField(max_length=20, choices=STATUS_CHOICES, default='pending')
    output_dir = models.CharField(max_length=500, unique=True)
    grasp_budget = models.PositiveIntegerField()
    grasps_completed = models.PositiveIntegerField(default=0)
    final_success = models.FloatField(null=True, blank=True)
    created_at = models.DateTimeField(auto_now_add=True)
    updated_at = models.DateTimeField(auto_now=True)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.variant} seed {self.seed} ({self.status})"

    @property
    def latest_evaluation(self):
        return self.evaluations.order_by('-grasp_index').first()


class EvaluationRecord(models.Model):
    """Periodic near-greedy evaluation of a run's checkpoint."""
    run = models.ForeignKey(TrainingRun, on_delete=models.CASCADE, related_name='evaluations')
    grasp_index = models.PositiveIntegerField()
    success_rate = models.FloatField()
    standard_error = models.FloatField()
    n_grasps = models.PositiveIntegerField()
    created_at = models.DateTimeField(auto_now_add=True)

    class Meta:
        ordering = ['run', 'grasp_index']
        constraints = [
            models.UniqueConstraint(fields=['run', 'grasp_index'], name='unique_evaluation_per_grasp'),
        ]

    def __str__(self):
        return f"{self.run} @ {self.grasp_index}: {self.success_rate:.3f}"
