from django.contrib import admin
from .models import TrainingRun, EvaluationRecord


class EvaluationRecordInline(admin.TabularInline):
    model = EvaluationRecord
    extra = 0
    readonly_fields = ['grasp_index', 'success_rate', 'standard_error', 'n_grasps', 'created_at']


@admin.register(TrainingRun)
class TrainingRunAdmin(admin.ModelAdmin):
    list_display = ['variant', 'seed', 'status', 'grasps_completed', 'grasp_budget', 'final_success', 'created_at']
    list_filter = ['status', 'variant', 'created_at']
    search_fields = ['variant', 'output_dir']
    readonly_fields = ['created_at', 'updated_at']
    inlines = [EvaluationRecordInline]


@admin.register(EvaluationRecord)
class EvaluationRecordAdmin(admin.ModelAdmin):
    list_display = ['run', 'grasp_index', 'success_rate', 'standard_error', 'n_grasps']
    list_filter = ['run__variant']
