"""Tests for experiment orchestration: worker pool, record store, grid search and runs."""

import json
from types import SimpleNamespace
from unittest.mock import patch

import numpy as np
from django.test import SimpleTestCase, tag

from .. import harness
from ..harness import (
    RecordStore,
    dataset_for,
    grid_search,
    jsonable,
    oracle_for,
    read_records,
    run_experiment,
    run_jobs,
)
from ..models import ExperimentRun, StageRecord
from .base import BaseTestCase, TemporaryCacheMixin, tiny_config


def reciprocal(x):
    return 1 / x


class JsonableTests(SimpleTestCase):
    def test_numpy_values_become_plain(self):
        value = jsonable({"a": np.float32(0.5), "b": np.arange(3), "c": [np.int64(2)]})
        self.assertEqual(value, {"a": 0.5, "b": [0, 1, 2], "c": [2]})
        self.assertIsInstance(value["c"][0], int)

    def test_unknown_objects_raise(self):
        with self.assertRaises(TypeError):
            jsonable({"a": object()})


class RunJobsTests(SimpleTestCase):
    def test_results_keep_job_order_and_capture_errors(self):
        with self.assertLogs("workbench.harness", "ERROR"):
            results = run_jobs(reciprocal, [{"x": 2}, {"x": 0}, {"x": 4}], max_workers=1)
        self.assertEqual([r.value for r in results], [0.5, None, 0.25])
        self.assertEqual([r.ok for r in results], [True, False, True])
        self.assertTrue(results[1].error.startswith("ZeroDivisionError"))
        self.assertEqual(results[1].job, {"x": 0})

    def test_no_jobs(self):
        self.assertEqual(run_jobs(reciprocal, [], max_workers=4), [])


class RecordStoreTests(BaseTestCase):
    def test_append_writes_database_and_jsonl(self):
        store = RecordStore(self.run, self.cache_root / "run")
        store.append("game", {"cda": np.float64(0.75)}, m=4, r=None, attack="badnets")
        store.append("repair", {"trace": {"method": "none"}}, m=4)
        store.append("game", {"cda": 0.5}, m=8)

        stages = list(self.run.stages.all())
        self.assertEqual([s.sequence for s in stages], [0, 1, 2])
        self.assertIsNone(stages[0].r)
        self.assertEqual(stages[0].payload, {"cda": 0.75})

        lines = (self.cache_root / "run" / "records" / "game.jsonl").read_text().splitlines()
        self.assertEqual(len(lines), 2)
        self.assertEqual(json.loads(lines[0])["attack"], "badnets")

    def test_read_records_in_sequence_order(self):
        store = RecordStore(self.run, self.cache_root / "run")
        store.append("repair", {"trace": {}})
        store.append("game", {"cda": 0.5})
        store.append("repair", {"trace": {}})
        records = read_records(self.cache_root / "run")
        self.assertEqual([r["sequence"] for r in records], [0, 1, 2])
        self.assertEqual([r["kind"] for r in records], ["repair", "game", "repair"])
        repairs = read_records(self.cache_root / "run", kinds={"repair"})
        self.assertEqual([r["sequence"] for r in repairs], [0, 2])


class DatasetCacheTests(TemporaryCacheMixin, SimpleTestCase):
    def test_dataset_is_generated_once(self):
        config = tiny_config()
        pool, oracle = dataset_for(config)
        self.assertEqual(len(pool), 120)
        again, again_oracle = dataset_for(config)
        np.testing.assert_array_equal(pool.images, again.images)
        np.testing.assert_array_equal(oracle.table, again_oracle.table)

    def test_oracle_for_reproduces_labels(self):
        pool, oracle = dataset_for(tiny_config())
        np.testing.assert_array_equal(oracle_for(pool).predict(pool), pool.labels)


class FakeEvaluation:
    def __init__(self, clean=None, probe=None, report=None):
        self.probe = probe

    def cda(self, model):
        return model.cda

    def probe_asr(self, model):
        return model.asr


class GridSearchTests(SimpleTestCase):
    """Grid search with the repair step replaced by a lookup of (cda, asr) outcomes."""

    trust = SimpleNamespace(class_count=3)

    def search(self, outcomes, space, delta=0.05, clean="held", seen=None):
        def fake_defense(name, poisoned, trust, cfg, evaluation, pre_cda):
            if seen is not None:
                seen.append((trust, evaluation.probe))
            cda, asr = outcomes[cfg.slol_lambda]
            return SimpleNamespace(cda=cda, asr=asr), SimpleNamespace(fallback=False, selected_step=3)

        def fake_probe(images, trigger, target):
            return ("triggered", images)

        suspect = SimpleNamespace(cda=0.9, asr=1.0)
        with patch.object(harness, "self_poison", return_value=(suspect, None, None)), \
                patch.object(harness, "self_poison_probe", fake_probe), \
                patch.object(harness, "holdout_split", return_value=(["fit"], ["held"])), \
                patch.object(harness, "run_defense", fake_defense), \
                patch.object(harness, "RepairEvaluation", FakeEvaluation):
            return grid_search("pivotal-tuning", space, suspect, self.trust, delta, seed=1, clean=clean)

    def test_scores_on_held_out_images_without_an_evaluation_set(self):
        seen = []
        self.search({0.1: (0.88, 0.1)}, {"slol_lambda": [0.1]}, clean=None, seen=seen)
        self.assertEqual(seen, [(["fit"], ("triggered", ["held"]))])

    def test_given_evaluation_set_carries_the_triggered_images(self):
        seen = []
        self.search({0.1: (0.88, 0.1)}, {"slol_lambda": [0.1]}, seen=seen)
        self.assertEqual(seen, [(self.trust, ("triggered", "held"))])

    def test_lowest_asr_within_budget_wins(self):
        outcomes = {0.1: (0.86, 0.3), 0.05: (0.88, 0.1), 0.01: (0.5, 0.0)}
        result = self.search(outcomes, {"slol_lambda": [0.1, 0.05, 0.01]})
        self.assertEqual(result.best.slol_lambda, 0.05)
        self.assertEqual(result.best.method, "pivotal-tuning")
        self.assertEqual(result.best.delta, 0.05)
        self.assertFalse(result.infeasible)
        self.assertEqual([cell["feasible"] for cell in result.cells], [True, True, False])
        self.assertEqual(result.self_poison_asr, 1.0)

    def test_ties_go_to_smaller_cda_loss(self):
        outcomes = {0.1: (0.86, 0.2), 0.05: (0.88, 0.2)}
        result = self.search(outcomes, {"slol_lambda": [0.1, 0.05]})
        self.assertEqual(result.best.slol_lambda, 0.05)

    def test_full_ties_go_to_smaller_config(self):
        outcomes = {0.1: (0.88, 0.2), 0.05: (0.88, 0.2)}
        result = self.search(outcomes, {"slol_lambda": [0.1, 0.05]})
        self.assertEqual(result.best.slol_lambda, 0.05)

    def test_infeasible_space_returns_smallest_cda_loss(self):
        outcomes = {0.1: (0.5, 0.0), 0.05: (0.6, 0.3)}
        with self.assertLogs("workbench.harness", "WARNING"):
            result = self.search(outcomes, {"slol_lambda": [0.1, 0.05]})
        self.assertTrue(result.infeasible)
        self.assertEqual(result.best.slol_lambda, 0.05)

    def test_empty_space(self):
        with self.assertRaises(ValueError):
            grid_search("nad", {}, None, self.trust, 0.05)


class RunExperimentTests(BaseTestCase):
    """End-to-end runs on a tiny synthetic pool"""

    def test_robustness_run(self):
        result = run_experiment(tiny_config())
        run = result.run
        self.assertFalse(result.cached)
        self.assertEqual(run.status, ExperimentRun.STATUS_COMPLETE)
        self.assertEqual(run.summary["row_count"], 2)
        self.assertEqual(run.summary["failures"], [])
        self.assertEqual(len(run.code_hash), 40)

        directory = self.cache_root / run.config_hash
        self.assertEqual(run.output_dir, str(directory))
        self.assertTrue((directory / "config").exists())
        lines = (directory / "summary.csv").read_text().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertTrue(lines[1].startswith("badnets,none,0,1,"))
        self.assertEqual(
            run.stages.filter(kind=StageRecord.KIND_GAME).count(), 2
        )
        self.assertEqual(len(list((directory / "checkpoints").glob("*.pt"))), 4)

        game = run.stages.filter(kind=StageRecord.KIND_GAME).last()
        payload = game.payload
        self.assertAlmostEqual(payload["asr"], payload["model_asr"] - payload["oracle_asr"])
        self.assertEqual(game.r, 6)

    def test_rerun_is_cached_unless_forced(self):
        first = run_experiment(tiny_config())
        stage_count = first.run.stages.count()
        second = run_experiment(tiny_config())
        self.assertTrue(second.cached)
        self.assertEqual(second.run.pk, first.run.pk)

        forced = run_experiment(tiny_config(), force=True)
        self.assertFalse(forced.cached)
        self.assertEqual(ExperimentRun.objects.filter(config_hash=first.run.config_hash).count(), 1)
        self.assertEqual(forced.run.stages.count(), stage_count)

    def test_identical_runs_have_identical_rows(self):
        first = run_experiment(tiny_config())
        first_csv = (self.cache_root / first.run.config_hash / "summary.csv").read_text()
        run_experiment(tiny_config(), force=True)
        second_csv = (self.cache_root / first.run.config_hash / "summary.csv").read_text()
        self.assertEqual(first_csv, second_csv)

    def test_failed_job_marks_run_incomplete(self):
        original = harness.robustness_job

        def flaky(**job):
            if job["m"] == 4:
                raise RuntimeError("boom")
            return original(**job)

        with patch.object(harness, "robustness_job", flaky), self.assertLogs("workbench", "WARNING"):
            result = run_experiment(tiny_config())
        self.assertEqual(result.run.status, ExperimentRun.STATUS_INCOMPLETE)
        self.assertEqual(result.run.summary["row_count"], 1)
        self.assertEqual(len(result.failures), 1)
        self.assertEqual(result.failures[0]["error"], "RuntimeError: boom")

        retried = run_experiment(tiny_config())
        self.assertFalse(retried.cached)
        self.assertEqual(retried.run.status, ExperimentRun.STATUS_COMPLETE)

    def test_data_efficiency_run(self):
        config = tiny_config(
            game="data-efficiency", sweep={"m": [4], "r": [0.1, 6], "delta": [0.5]}
        )
        run = run_experiment(config).run
        self.assertEqual(run.status, ExperimentRun.STATUS_COMPLETE)
        self.assertEqual(run.summary["row_count"], 2)
        lines = (self.cache_root / run.config_hash / "summary.csv").read_text().splitlines()
        r_column = lines[0].split(",").index("r")
        # a fraction of n = 30 is written as the trusted-set size it resolves to
        self.assertEqual(sorted(line.split(",")[r_column] for line in lines[1:]), ["3", "6"])
        self.assertEqual(run.summary["stage_counts"], {"metric": 2, "repair": 2})
        for report in run.summary["metrics"]:
            self.assertGreaterEqual(report["data_efficiency"], 0.0)
            self.assertLessEqual(report["data_efficiency"], 1.0)

    @tag("slow")
    def test_detectability_run(self):
        config = tiny_config(
            game="detectability",
            sweep={"m": [0, 4], "r": [6], "delta": [0.5]},
            detector={
                "method": "cnc",
                "steps_per_class": 3,
                "self_poison_steps": 5,
                "repair": {"steps": 2, "eval_every": 1},
            },
        )
        run = run_experiment(config).run
        self.assertEqual(run.status, ExperimentRun.STATUS_COMPLETE)
        self.assertEqual(run.summary["stage_counts"], {"detectability": 2, "metric": 2})
        for report in run.summary["metrics"]:
            self.assertGreaterEqual(report["detectability"], 0.0)
            self.assertLessEqual(report["detectability"], 1.0)

    @tag("slow")
    def test_detectability_game_run(self):
        config = tiny_config(
            game="detectability-game",
            detector={
                "method": "cnc",
                "steps_per_class": 3,
                "self_poison_steps": 3,
                "repair": {"steps": 2, "eval_every": 1},
            },
        )
        run = run_experiment(config).run
        self.assertEqual(run.status, ExperimentRun.STATUS_COMPLETE)
        self.assertEqual(
            run.summary["stage_counts"], {"anomaly": 2, "detectability": 2, "metric": 2}
        )
        for stage in run.stages.filter(kind=StageRecord.KIND_DETECTABILITY):
            self.assertIn(stage.payload["prediction"], (0, 1))
            payload = stage.payload
            self.assertEqual(payload["correct"], int(payload["prediction"] == payload["coin"]))
