"""
Test suite for the workbench application.

This package organizes tests into logical modules:
- test_data.py: Synthetic pools, labeled sets and disjoint draws
- test_triggers.py: Trigger construction and stamping
- test_attacks.py: Poisoning, test-time triggers and code poisoning
- test_training.py: Trainer, presets and checkpoints
- test_repair.py: Budgeted repair and the post-training defenses
- test_detection.py: Trigger inversion detectors and calibration
- test_metrics.py: ROC AUC and aggregation helpers
- test_games.py: Robustness and detectability games and sweeps
- test_models.py: Run and stage record models
- test_forms.py: Experiment config validation
- test_experiment_config.py: Config loading, overrides and hashing
- test_statistics.py: Run summary calculation
- test_harness.py: Worker pool, record store, grid search and runs
- test_rendering.py: Figures and tables from stored records
- test_api.py: API endpoints and JSON responses
- test_admin.py: Django admin interface
- test_commands.py: Management commands
- test_acceptance.py: Desk-scale end-to-end runs

Slow tests are tagged ``slow``; skip them with ``--exclude-tag slow``.
"""

# Import all test classes for test discovery
from .test_acceptance import *  # noqa: F403
from .test_admin import *  # noqa: F403
from .test_api import *  # noqa: F403
from .test_attacks import *  # noqa: F403
from .test_commands import *  # noqa: F403
from .test_data import *  # noqa: F403
from .test_detection import *  # noqa: F403
from .test_experiment_config import *  # noqa: F403
from .test_forms import *  # noqa: F403
from .test_games import *  # noqa: F403
from .test_harness import *  # noqa: F403
from .test_metrics import *  # noqa: F403
from .test_models import *  # noqa: F403
from .test_rendering import *  # noqa: F403
from .test_repair import *  # noqa: F403
from .test_statistics import *  # noqa: F403
from .test_training import *  # noqa: F403
from .test_triggers import *  # noqa: F403
