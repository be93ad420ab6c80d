from django.urls import path, include
from rest_framework.routers import DefaultRouter
from .api_views import TrainingRunViewSet

router = DefaultRouter()
router.register(r'runs', TrainingRunViewSet, basename='api-run')

api_urlpatterns = [
    path('', include(router.urls)),

    # DRF auth endpoints
    path('auth/', include('rest_framework.urls')),
]

urlpatterns = [
    path('api/', include(api_urlpatterns)),
]
