from django.apps import AppConfig


class GraspLearningConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'grasp_learning'
    verbose_name = 'Grasp learning'
