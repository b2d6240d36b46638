"""
Experiment monitor, a Textual application.

Layout:
┌─────────────────────────────────────────────────────┐
│  Header                                             │
├──────────────────────┬──────────────────────────────┤
│  Resolved config     │  Log                         │
├──────────────────────┴──────────────────────────────┤
│  Meta-training progress                             │
├─────────────────────────────────────────────────────┤
│  Metrics table                                      │
└─────────────────────────────────────────────────────┘
"""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from textual import work
from textual.app import App, ComposeResult
from textual.binding import Binding
from textual.containers import Horizontal, Vertical
from textual.widgets import DataTable, Footer, Header, Label, Log, ProgressBar, Static

from .config import ExperimentConfig, config_lines
from .harness import (
    CHECKPOINT_NAME,
    METRICS_NAME,
    MetricsRecord,
    VerificationFailed,
    run_eval,
    run_prepare,
    run_train,
    run_verify,
)
from .meta import EpochRecord


class _PanelLogHandler(logging.Handler):
    """Forwards log records from worker threads into the monitor's log panel."""

    def __init__(self, app: ExperimentMonitor):
        super().__init__(level=logging.INFO)
        self._app = app
        self.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))

    def emit(self, record: logging.LogRecord) -> None:
        try:
            self._app.post_log_line(self.format(record))
        except Exception:
            self.handleError(record)


class ExperimentMonitor(App):
    """Runs pipeline stages in the background and shows their progress."""

    TITLE = "weightdiff monitor"
    CSS = """
    Screen {
        layout: vertical;
    }

    #panels {
        height: 1fr;
        layout: horizontal;
    }

    #config-panel {
        width: 40;
        border: solid $panel-lighten-1;
        padding: 0 1;
    }

    #log-panel {
        width: 1fr;
        border: solid $panel-lighten-1;
        padding: 0 1;
    }

    #config-panel Label, #log-panel Label {
        background: $panel;
        color: $text;
        width: 100%;
        text-align: center;
        margin-bottom: 1;
    }

    #epoch-bar {
        height: 1;
        padding: 0 1;
    }

    #metrics-table {
        height: 10;
    }

    #status-label {
        height: 1;
        background: $panel-darken-1;
        color: $text;
        padding: 0 1;
        display: none;
    }
    #status-label.visible {
        display: block;
    }
    """

    BINDINGS = [
        Binding("p", "prepare", "Prepare"),
        Binding("t", "train", "Train"),
        Binding("e", "evaluate", "Eval"),
        Binding("v", "verify", "Verify"),
        Binding("q", "quit", "Quit"),
    ]

    def __init__(self, cfg: ExperimentConfig, out_dir: str | Path):
        super().__init__()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.records: list[MetricsRecord] = []
        self.status_message = ""
        self._busy_lock = threading.Lock()
        self._log_handler = _PanelLogHandler(self)
        self._package_logger = logging.getLogger(__package__)
        self._saved_level = self._package_logger.level

    # ------------------------------------------------------------------
    # Layout
    # ------------------------------------------------------------------

    def compose(self) -> ComposeResult:
        yield Header()
        with Horizontal(id="panels"):
            with Vertical(id="config-panel"):
                yield Label("[ Config ]")
                yield Static("\n".join(config_lines(self.cfg)), id="config-view", markup=False)
            with Vertical(id="log-panel"):
                yield Label("[ Log ]")
                yield Log(id="log-view", max_lines=2000)
        yield ProgressBar(total=max(1, self.cfg.meta.epochs), id="epoch-bar", show_eta=False)
        yield DataTable(id="metrics-table", zebra_stripes=True)
        yield Label(id="status-label")
        yield Footer()

    def on_mount(self) -> None:
        table = self.query_one("#metrics-table", DataTable)
        table.add_columns("Variant", "k", "T", "Recon MSE", "Query", "Denoiser evals")
        self._package_logger.addHandler(self._log_handler)
        if self._package_logger.getEffectiveLevel() > logging.INFO:
            self._package_logger.setLevel(logging.INFO)
        self._set_status(f"Output: {self.out_dir}  (p prepare, t train, e eval, v verify)")

    def on_unmount(self) -> None:
        self._package_logger.removeHandler(self._log_handler)
        self._package_logger.setLevel(self._saved_level)

    # ------------------------------------------------------------------
    # Actions
    # ------------------------------------------------------------------

    def action_prepare(self) -> None:
        self._run_stage("prepare")

    def action_train(self) -> None:
        self._run_stage("train")

    def action_evaluate(self) -> None:
        self._run_stage("eval")

    def action_verify(self) -> None:
        self._run_stage("verify")

    @work(thread=True, group="pipeline")
    def _run_stage(self, stage: str) -> None:
        if not self._busy_lock.acquire(blocking=False):
            self._set_status("A stage is already running")
            return
        try:
            self._set_status(f"Running {stage}…")
            summary = self._execute_stage(stage)
            self._set_status(f"{stage} finished ✓" + (f" ({summary})" if summary else ""))
        except VerificationFailed as e:
            self._set_status(f"verify: {e}")
        except Exception as e:
            self._set_status(f"{stage} error: {e}")
        finally:
            self._busy_lock.release()

    def _execute_stage(self, stage: str) -> str | None:
        checkpoint = self.out_dir / CHECKPOINT_NAME
        if stage == "prepare":
            run_prepare(self.cfg, self.out_dir)
        elif stage == "train":
            run_train(self.cfg, self.out_dir, checkpoint, on_epoch=self._on_epoch)
        elif stage == "eval":
            self.out_dir.mkdir(parents=True, exist_ok=True)
            records = run_eval(self.cfg, checkpoint, self.out_dir, self.out_dir / METRICS_NAME)
            self._call_ui(self._show_records, records)
            return f"{len(records)} rows in {METRICS_NAME}"
        elif stage == "verify":
            report = run_verify(self.cfg, self.out_dir)
            return f"{len(report.rows)} checks passed"
        else:
            raise ValueError(f"Unknown stage {stage!r}")
        return None

    # ------------------------------------------------------------------
    # Callbacks (from worker threads)
    # ------------------------------------------------------------------

    def _on_epoch(self, record: EpochRecord) -> None:
        self._call_ui(self._apply_epoch, record)

    def _apply_epoch(self, record: EpochRecord) -> None:
        self.query_one("#epoch-bar", ProgressBar).update(progress=record.epoch, total=max(1, self.cfg.meta.epochs))

    def _show_records(self, records: list[MetricsRecord]) -> None:
        self.records = list(records)
        table = self.query_one("#metrics-table", DataTable)
        table.clear()
        for r in records:
            table.add_row(r.variant, str(r.k), str(r.T), f"{r.recon_mse:.5f}", f"{r.query_metric:.4f}", str(r.denoiser_evals))

    def post_log_line(self, line: str) -> None:
        self._call_ui(self._append_log, line)

    def _append_log(self, line: str) -> None:
        self.query_one("#log-view", Log).write_line(line)

    def _call_ui(self, fn, *args) -> None:
        if threading.current_thread() is threading.main_thread():
            fn(*args)
        else:
            self.call_from_thread(fn, *args)

    # ------------------------------------------------------------------
    # Status messages
    # ------------------------------------------------------------------

    def _set_status(self, msg: str) -> None:
        self._call_ui(self._show_status, msg)

    def _show_status(self, msg: str) -> None:
        self.status_message = msg
        label = self.query_one("#status-label", Label)
        if msg:
            label.update(f" {msg}")
            label.add_class("visible")
        else:
            label.update("")
            label.remove_class("visible")

