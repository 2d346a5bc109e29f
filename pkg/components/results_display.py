import json
from datetime import datetime
from typing import Dict, List, Optional

from rich.console import Console
from rich.table import Table

from utils.evaluation_engine import DetectionCounts, EvalReport
from utils.transfer_evaluation import TransferReport


class ResultsDisplay:
    def __init__(self, console: Optional[Console] = None, quiet: bool = False):
        self.console = console or Console()
        self.quiet = quiet

    def display_eval_report(self, report: EvalReport, show_slides: bool = False):
        """Headline metrics, the per-scanner breakdown and optionally every slide"""
        if self.quiet:
            return
        self.console.print(self._metrics_table("Detection results", {"all": report.counts}))
        if report.per_scanner:
            rows = {f"scanner {k}": v for k, v in sorted(report.per_scanner.items())}
            self.console.print(self._metrics_table("By scanner", rows))
        if show_slides and report.per_slide:
            self.console.print(self._metrics_table("By slide", dict(sorted(report.per_slide.items()))))

    def display_corpus_summary(self, summary: Dict[int, Dict[str, int]], root: Optional[str] = None):
        if self.quiet:
            return
        table = Table(title=f"Corpus {root}" if root else "Corpus")
        table.add_column("Scanner", justify="right")
        table.add_column("Slides", justify="right")
        table.add_column("Mitoses", justify="right")
        for scanner, row in sorted(summary.items()):
            table.add_row(str(scanner), str(row['slides']), str(row['mitoses']))
        table.add_row("total", str(sum(r['slides'] for r in summary.values())),
                      str(sum(r['mitoses'] for r in summary.values())), style="bold")
        self.console.print(table)

    def display_transfer_report(self, report: TransferReport):
        if self.quiet:
            return
        table = Table(title="Style transfer evaluation")
        table.add_column("Metric")
        table.add_column("Value", justify="right")
        table.add_row("held-out cycle L1", f"{report.cycle_l1:.4f}")
        table.add_row("target-scanner accuracy", f"{report.target_accuracy:.3f}")
        table.add_row("classifier accuracy on real patches", f"{report.real_accuracy:.3f}")
        table.add_row("patches", str(report.num_patches))
        self.console.print(table)

    def display_training_summary(self, kind: str, history: List[Dict[str, float]], checkpoint: str):
        if self.quiet or not history:
            return
        last = history[-1]
        table = Table(title=f"{kind} training")
        table.add_column("Key")
        table.add_column("Value", justify="right")
        for key, value in last.items():
            table.add_row(key, f"{value:.4g}" if isinstance(value, float) else str(value))
        table.add_row("checkpoint", checkpoint)
        self.console.print(table)

    def _metrics_table(self, title: str, rows: Dict[str, DetectionCounts]) -> Table:
        table = Table(title=title)
        for name in ("", "TP", "FP", "FN", "Precision", "Recall", "F1"):
            table.add_column(name, justify="right" if name else "left")
        for name, counts in rows.items():
            table.add_row(name, str(counts.tp), str(counts.fp), str(counts.fn),
                          f"{counts.precision:.4f}", f"{counts.recall:.4f}", f"{counts.f1:.4f}")
        return table

    def generate_text_report(self, report: EvalReport) -> str:
        """Plain-text report for logs and files"""
        report_lines = [
            "=" * 60,
            "MITOSIS DETECTION EVALUATION REPORT",
            "=" * 60,
            "",
            f"Generated: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}",
            f"Score threshold: {report.score_threshold}",
            f"Match radius: {report.match_radius} px",
            "",
            f"TP {report.tp}  FP {report.fp}  FN {report.fn}",
            f"Precision: {report.precision:.4f}",
            f"Recall:    {report.recall:.4f}",
            f"F1:        {report.f1:.4f}",
        ]

        if report.per_scanner:
            report_lines.extend(["", "BY SCANNER:", "-" * 11])
            for scanner, counts in sorted(report.per_scanner.items()):
                report_lines.append(f"  scanner {scanner}: P {counts.precision:.4f}  R {counts.recall:.4f}  "
                                    f"F1 {counts.f1:.4f}  ({counts.tp}/{counts.fp}/{counts.fn})")

        report_lines.extend(["", "=" * 60])
        return "\n".join(report_lines)

    def generate_json_export(self, report: EvalReport) -> str:
        export_data = {"generated": datetime.now().isoformat(timespec='seconds'), **report.to_dict()}
        return json.dumps(export_data, indent=2)
