"""
Tests for the experiment monitor:
- layout and config panel
- verify, prepare/train/eval stages run from key bindings
- error reporting in the status line
"""

from textual.widgets import DataTable, Log, ProgressBar

from src.weightdiff.app import ExperimentMonitor
from src.weightdiff.config import parse_config
from src.weightdiff.harness import METRICS_NAME

from .test_harness import TINY_CONFIG


def _make_app(tmp_path, extra=""):
    return ExperimentMonitor(parse_config(TINY_CONFIG + extra), tmp_path / "out")


async def _press_and_wait(app, pilot, key):
    await pilot.press(key)
    await app.workers.wait_for_complete()
    await pilot.pause()


# ──────────────────────────────────────────────────────────────────────────────
# Layout
# ──────────────────────────────────────────────────────────────────────────────

async def test_monitor_composes(tmp_path):
    app = _make_app(tmp_path)
    async with app.run_test():
        table = app.query_one("#metrics-table", DataTable)
        assert len(table.columns) == 6
        assert app.query_one("#epoch-bar", ProgressBar).total == 4
        assert app.status_message.startswith("Output:")


# ──────────────────────────────────────────────────────────────────────────────
# Stages
# ──────────────────────────────────────────────────────────────────────────────

async def test_verify_stage(tmp_path):
    app = _make_app(tmp_path)
    async with app.run_test() as pilot:
        await _press_and_wait(app, pilot, "v")
        assert app.status_message.startswith("verify finished ✓")
        assert app.query_one("#log-view", Log).line_count > 0
    assert (tmp_path / "out" / "verify.csv").exists()


async def test_failed_verification_shown(tmp_path):
    app = _make_app(tmp_path, "verify.rhs_scale=0.001\n")
    async with app.run_test() as pilot:
        await _press_and_wait(app, pilot, "v")
        assert app.status_message.startswith("verify:")
        assert "failed" in app.status_message


async def test_full_pipeline_fills_metrics_table(tmp_path):
    app = _make_app(tmp_path)
    async with app.run_test() as pilot:
        for key in ("p", "t", "e"):
            await _press_and_wait(app, pilot, key)
        assert app.query_one("#epoch-bar", ProgressBar).progress == 4
        assert [r.variant for r in app.records] == ["Mc-Di", "oracle", "random"]
        assert app.query_one("#metrics-table", DataTable).row_count == 3
        assert app.status_message.startswith("eval finished ✓")
    assert (tmp_path / "out" / METRICS_NAME).exists()


async def test_eval_without_checkpoint_reports_error(tmp_path):
    app = _make_app(tmp_path)
    async with app.run_test() as pilot:
        await _press_and_wait(app, pilot, "e")
        assert app.status_message.startswith("eval error:")
        assert app.records == []
