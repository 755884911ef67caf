from django.urls import path

from . import views

urlpatterns = [
    path("api/run/<int:pk>/", views.run_data_api, name="run_api"),
    path("api/run/<int:pk>/summary.csv", views.run_summary_csv, name="run_summary_csv"),
]
