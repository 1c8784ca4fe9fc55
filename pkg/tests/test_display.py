import arrow
import numpy as np
from rich.console import Console

from gsplat_distill.display import (
    ablation_table,
    consistency_view,
    error_style,
    format_timestamp,
    gradcheck_view,
    summary_table,
    verdict,
)
from gsplat_distill.harness import ConsistencyReport, GradCheckReport


def as_text(renderable) -> str:
    console = Console(record=True, width=120)
    console.print(renderable)
    return console.export_text()


# ------------------------ styles ------------------------


def test__error_style():
    assert error_style(1e-6, 1e-4).style == "green"
    assert error_style(1e-3, 1e-4).style == "red"
    assert error_style(1.5e-5, 1e-4).plain == "1.500e-05"


def test__verdict():
    assert verdict(True).plain == "PASS"
    assert verdict(False).plain == "FAIL"


def test__format_timestamp():
    timestamp = arrow.get("2024-03-01T10:20:30+00:00")
    local = timestamp.to("local").format("YYYY-MM-DD HH:mm:ss")
    assert format_timestamp(timestamp) == local
    assert format_timestamp(timestamp.isoformat()) == local


# ------------------------ reports ------------------------


def test__summary_table():
    text = as_text(summary_table({"steps": 3, "error": 0.123456789, "cell": None}, title="run"))
    assert "run" in text
    assert "0.123457" in text
    assert "None" in text


def test__gradcheck_view():
    report = GradCheckReport(tolerance=1e-4, scenes=2)
    report.merge({"positions": 2e-6, "colors": 3e-4}, {"positions": 1e-6, "colors": 1e-7})
    text = as_text(gradcheck_view(report))
    assert "gradient check, 2 scenes" in text
    assert "3.000e-04" in text
    assert "FAIL" in text


def test__consistency_view__worst_pair():
    errors = np.array([0.1, 0.0, 0.3, 0.2])
    report = ConsistencyReport(
        poses=4, elevation=30.0, radius=1.0, pairing="circular", errors=errors
    )
    text = as_text(consistency_view(report))
    assert "2 -> 3" in text
    assert "view consistency" in text


def test__ablation_table__missing_values():
    rows = [
        {
            "cell": "noise-on_vgs-on",
            "steps": 10,
            "gaussians": 64,
            "heldout_error": None,
            "consistency_variance": 1.5e-3,
        }
    ]
    text = as_text(ablation_table(rows))
    assert "noise-on_vgs-on" in text
    assert "-" in text
    assert "1.5000e-03" in text
