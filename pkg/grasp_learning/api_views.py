import math

import numpy as np
from drf_spectacular.types import OpenApiTypes
from drf_spectacular.utils import OpenApiParameter, extend_schema, extend_schema_view
from rest_framework import mixins, viewsets
from rest_framework.decorators import action
from rest_framework.response import Response

from .models import TrainingRun
from .permissions import IsStaffOrReadOnly
from .serializers import EvaluationRecordSerializer, TrainingRunSerializer, VariantStatsSerializer


def variant_stats(runs):
    """Per-variant summary of finished runs: count, mean final running success and its standard error."""
    grouped = {}
    for run in runs:
        grouped.setdefault(run.variant, []).append(run)
    rows = []
    for variant, members in sorted(grouped.items()):
        finals = np.array([run.final_success for run in members if run.final_success is not None])
        last_evals = [run.latest_evaluation for run in members]
        last_evals = np.array([record.success_rate for record in last_evals if record is not None])
        rows.append({
            'variant': variant,
            'finished_runs': len(members),
            'mean_final_success': float(finals.mean()) if finals.size else None,
            'standard_error': float(finals.std(ddof=1) / math.sqrt(finals.size)) if finals.size > 1 else None,
            'mean_last_evaluation': float(last_evals.mean()) if last_evals.size else None,
        })
    return rows


@extend_schema_view(
    list=extend_schema(
        summary="List training runs",
        description="Retrieve training runs with optional filtering",
        parameters=[
            OpenApiParameter('variant', OpenApiTypes.STR, description='Filter by variant name'),
            OpenApiParameter('status', OpenApiTypes.STR, description='Filter by status'),
            OpenApiParameter('seed', OpenApiTypes.INT, description='Filter by seed'),
        ],
        tags=['Runs']
    ),
    retrieve=extend_schema(
        summary="Get training run details",
        description="Retrieve one training run with its latest evaluation",
        tags=['Runs']
    ),
    destroy=extend_schema(
        summary="Delete training run",
        description="Remove a run and its evaluations from the registry (staff only); files are kept",
        tags=['Runs']
    ),
)
class TrainingRunViewSet(mixins.ListModelMixin, mixins.RetrieveModelMixin, mixins.DestroyModelMixin,
                         viewsets.GenericViewSet):
    """
    Read-only view of the run registry.
    READ: Authenticated users
    DELETE: Staff users
    """
    queryset = TrainingRun.objects.all().order_by('-created_at')
    serializer_class = TrainingRunSerializer
    permission_classes = [IsStaffOrReadOnly]

    def get_queryset(self):
        queryset = self.queryset

        variant = self.request.query_params.get('variant')
        if variant:
            queryset = queryset.filter(variant=variant)

        status_filter = self.request.query_params.get('status')
        if status_filter:
            queryset = queryset.filter(status=status_filter)

        seed = self.request.query_params.get('seed')
        if seed is not None and seed.lstrip('-').isdigit():
            queryset = queryset.filter(seed=int(seed))

        return queryset

    @extend_schema(
        summary="List evaluations of a run",
        description="Periodic evaluation records of one run, in grasp order",
        responses={200: EvaluationRecordSerializer(many=True)},
        tags=['Evaluations']
    )
    @action(detail=True, methods=['get'])
    def evaluations(self, request, pk=None):
        run = self.get_object()
        records = run.evaluations.order_by('grasp_index')
        return Response(EvaluationRecordSerializer(records, many=True).data)

    @extend_schema(
        summary="Compare variants",
        description="Per-variant statistics over finished runs",
        responses={200: VariantStatsSerializer(many=True)},
        tags=['Runs']
    )
    @action(detail=False, methods=['get'])
    def stats(self, request):
        runs = TrainingRun.objects.filter(status='finished').prefetch_related('evaluations')
        return Response(VariantStatsSerializer(variant_stats(runs), many=True).data)
