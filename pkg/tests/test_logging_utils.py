from __future__ import annotations

import logging

from core.logging_utils import setup_logging


def test_levels_apply_to_the_flowlab_namespace():
    setup_logging("debug")
    assert logging.getLogger("flowlab").level == logging.DEBUG
    assert logging.getLogger().level == logging.WARNING
    assert len(logging.getLogger().handlers) == 1


def test_unknown_level_falls_back_to_info(capsys):
    setup_logging("chatty")
    assert logging.getLogger("flowlab").level == logging.INFO
    assert "Unknown log level" in capsys.readouterr().err
