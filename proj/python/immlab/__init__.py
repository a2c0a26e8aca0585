"""Checkpoint merging, layer analysis and a toy self-improvement lab."""

import json

from ._immlab import *  # noqa: F401,F403
from ._immlab import default_lab_config as _default_lab_config
from ._immlab import evaluate as _evaluate


def lab_config(**overrides):
    """Default lab config as a dict, with top-level keys replaced by overrides."""
    cfg = json.loads(_default_lab_config())
    cfg.update(overrides)
    return cfg


def evaluate_model(model, config):
    """pass@k report (dict) for a Checkpoint under a lab config dict."""
    return json.loads(_evaluate(model, json.dumps(config)))
