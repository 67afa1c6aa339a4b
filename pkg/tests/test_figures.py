"""Figure rendering checks: files appear, are valid PNGs, and the same
inputs always produce the same bytes."""

import numpy as np
import pytest

from multimimic.figures import (render_comparison, render_distill_curves,
                                render_report, render_training_curves)
from multimimic.metrics import METRICS, TrackingReport, compare_report

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def small_report(scale=1.0):
    vals = {m: (1.0 if m == "survival" else 10.0 * scale) for m in METRICS}
    rows = [{"clip": n, "episodes": 1, "frames": 40, **vals}
            for n in ("stand", "walk")]
    return TrackingReport(clips=rows, summary=dict(vals))


def ppo_records(n=6):
    return [{"step": 100 * (i + 1), "reward": 0.1 * i,
             "tracking_error": 0.5 / (i + 1), "survival": min(1.0, 0.2 * i),
             "ppo/approx_kl": 0.01} for i in range(n)]


def dagger_records(n=5):
    keys = ("upper_kinematic", "upper_joint", "lower_kinematic",
            "lower_joint", "lower_root")
    return [{"iteration": i + 1, "loss": 1.0 / (i + 1) ** 2,
             "loss_final": 0.5 / (i + 1) ** 2,
             **{f"mask/{k}": 0.5 for k in keys}} for i in range(n)]


@pytest.mark.parametrize("render,arg", [
    (render_report, small_report()),
    (render_comparison, compare_report([("a", small_report()),
                                        ("b", small_report(0.5))])),
    (render_training_curves, ppo_records()),
    (render_distill_curves, dagger_records()),
])
def test_renders_valid_png(render, arg, tmp_path):
    out = render(arg, tmp_path / "fig.png")
    data = out.read_bytes()
    assert data[:8] == PNG_MAGIC
    assert len(data) > 1000


def test_same_input_same_bytes(tmp_path):
    report = small_report()
    a = render_report(report, tmp_path / "a.png").read_bytes()
    b = render_report(report, tmp_path / "b.png").read_bytes()
    assert a == b
    recs = ppo_records()
    c = render_training_curves(recs, tmp_path / "c.png").read_bytes()
    d = render_training_curves(recs, tmp_path / "d.png").read_bytes()
    assert c == d


def test_single_clip_and_many_methods(tmp_path):
    one = TrackingReport(
        clips=[{"clip": "only", "episodes": 1, "frames": 3,
                **{m: 0.0 for m in METRICS}}],
        summary={m: 0.0 for m in METRICS})
    render_report(one, tmp_path / "one.png")
    reports = [(f"m{i}", small_report(1.0 + 0.1 * i)) for i in range(5)]
    cmp = compare_report(reports)
    out = render_comparison(cmp, tmp_path / "cmp.png")
    assert out.read_bytes()[:8] == PNG_MAGIC
