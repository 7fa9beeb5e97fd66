import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from rmdp.plots import (PlotError, padded_limits, plot_assignment_histogram, plot_file, plot_learning_curve,
                        plot_sw_vs_k)

SVG = "{http://www.w3.org/2000/svg}"


def _records(algo="em", k=3, seeds=(0, 1)):
    return [{"algo": algo, "k": k, "seed": s, "transitions_per_policy": t, "social_welfare": 50.0 + t / 100 + s}
            for s in seeds for t in (0, 2048, 4096)]


def _path_points(svg_path, gid):
    root = ET.parse(svg_path).getroot()
    group = next(el for el in root.iter() if el.get("id") == gid)
    d = next(el for el in group.iter(f"{SVG}path")).get("d")
    nums = [float(x) for x in re.findall(r"-?\d+(?:\.\d+)?(?:e-?\d+)?", d)]
    return np.array(nums).reshape(-1, 2)


def test_learning_curve_points_land_at_affine_svg_coordinates(tmp_path):
    info = plot_learning_curve(_records(), tmp_path / "lc.svg")
    pts = _path_points(info.path, "series-em-k3")
    x = np.array([0.0, 2048.0, 4096.0])
    y = 50.5 + x / 100  # mean of seeds 0 and 1
    sx, sy = info.to_svg(x, y)
    np.testing.assert_allclose(pts[:, 0], sx, atol=1e-3)
    np.testing.assert_allclose(pts[:, 1], sy, atol=1e-3)


def test_oracle_line_sits_at_the_oracle_value(tmp_path):
    rows = [{"algo": "em", "k": k, "mean_sw": 80.0 + k, "se_sw": 1.0, "oracle_sw": 93.52} for k in (1, 3, 25)]
    info = plot_sw_vs_k(rows, tmp_path / "sw.svg")
    pts = _path_points(info.path, "oracle")
    _, sy = info.to_svg(0.0, 93.52)
    np.testing.assert_allclose(pts[:, 1], sy, atol=1e-3)
    # the series points are at the categorical positions 0, 1, 2
    root = ET.parse(info.path).getroot()
    assert any(el.get("id") == "series-em" for el in root.iter())


def test_svg_output_is_byte_deterministic(tmp_path):
    a = plot_learning_curve(_records(), tmp_path / "a.svg").path.read_bytes()
    b = plot_learning_curve(_records(), tmp_path / "b.svg").path.read_bytes()
    assert a == b


def test_empty_inputs_raise_before_writing(tmp_path):
    with pytest.raises(PlotError):
        plot_learning_curve([], tmp_path / "x.svg")
    with pytest.raises(PlotError):
        plot_sw_vs_k([{"algo": "em", "k": 1, "mean_sw": float("nan"), "se_sw": 0.0, "oracle_sw": 1.0}],
                     tmp_path / "x.svg")
    with pytest.raises(PlotError):
        plot_assignment_histogram(np.zeros((0, 2)), tmp_path / "x.svg")
    assert not (tmp_path / "x.svg").exists()


def test_assignment_histograms(tmp_path):
    alpha = np.eye(3)[np.arange(25) % 3]
    info = plot_assignment_histogram(alpha, tmp_path / "grid.svg")
    root = ET.parse(info.path).getroot()
    assert sum(1 for el in root.iter() if (el.get("id") or "").startswith("tile-")) == 25
    targets = np.linspace(0, 4, 25)
    info = plot_assignment_histogram(alpha, tmp_path / "vel.svg", targets)
    ids = {el.get("id") for el in root.iter()} | {el.get("id") for el in ET.parse(info.path).getroot().iter()}
    assert {"rep-0", "rep-1", "rep-2"} <= ids
    with pytest.raises(PlotError):
        plot_assignment_histogram(np.eye(2), tmp_path / "bad.svg")


def test_plot_file_reports_csv_line_numbers(tmp_path):
    bad = tmp_path / "aggregate.csv"
    bad.write_text("# config_hash=x seed=0\nalgo,env,n,k,seeds,mean_sw,se_sw,oracle_sw,failures\n"
                   "em,resource_gathering,25,3,10,oops,0.1,93.52,0\n")
    with pytest.raises(Exception, match=r"aggregate\.csv:3:"):
        plot_file("sw_vs_k", [bad], tmp_path / "out.svg")
    with pytest.raises(PlotError):
        plot_file("nope", [bad], tmp_path / "out.svg")


def test_padded_limits():
    assert padded_limits([1.0, 1.0]) == (0.0, 2.0)
    lo, hi = padded_limits([0.0, 10.0, np.nan])
    assert lo == pytest.approx(-0.5) and hi == pytest.approx(10.5)
