"""Tests for the workbench admin interface."""

from django.contrib.auth.models import User
from django.test import Client

from .base import BaseTestCase


class AdminInterfaceTests(BaseTestCase):
    """Test cases for the run and stage admin pages"""

    def setUp(self):
        super().setUp()
        User.objects.create_superuser(
            username="admin", email="admin@test.com", password="testpass123"
        )
        self.client = Client()
        self.client.login(username="admin", password="testpass123")
        self.stage = self.create_test_stage()

    def test_run_changelist_shows_short_hash(self):
        response = self.client.get("/admin/workbench/experimentrun/")
        self.assertEqual(response.status_code, 200)
        self.assertContains(response, "aaaaaaaa...")
        self.assertContains(response, "Test Run")

    def test_run_search_by_hash(self):
        self.create_test_run(name="Unrelated Run")
        response = self.client.get("/admin/workbench/experimentrun/?q=aaaaaaaa")
        self.assertEqual(response.status_code, 200)
        self.assertContains(response, "Test Run")
        self.assertNotContains(response, "Unrelated Run")

    def test_run_fieldsets_organization(self):
        response = self.client.get(f"/admin/workbench/experimentrun/{self.run.pk}/change/")
        self.assertEqual(response.status_code, 200)
        self.assertContains(response, "Reproducibility")
        self.assertContains(response, self.run.config_hash)

    def test_stage_changelist(self):
        response = self.client.get("/admin/workbench/stagerecord/")
        self.assertEqual(response.status_code, 200)
        self.assertContains(response, "badnets")

    def test_stage_records_cannot_be_changed(self):
        url = f"/admin/workbench/stagerecord/{self.stage.pk}/change/"
        response = self.client.post(url, {"kind": "metric"})
        self.assertEqual(response.status_code, 403)
        self.stage.refresh_from_db()
        self.assertEqual(self.stage.kind, "game")
