import numpy as np
import pytest

from spikedepth import autodiff as ad
from spikedepth.evalx import (DensityReport, density, density_report, mde,
                              spike_mass, write_depth_f32, write_depth_pgm)
from spikedepth.model import DepthMap
from spikedepth.snn import SpikeTensor
from spikedepth.synthdata import read_depth_raster

from conftest import random_chunk, tiny_net


def test_mde_hand_oracle():
    pred = DepthMap(depth=np.array([[1.0, 2.0], [3.0, 4.0]]),
                    valid=np.ones((2, 2), dtype=bool))
    gt = DepthMap(depth=np.array([[1.5, 2.0], [2.0, 9.0]]),
                  valid=np.array([[True, True], [True, False]]))
    # |1-1.5| + |2-2| + |3-2| over 3 valid pixels = 0.5 m mean, in cm
    assert mde(pred, gt) == pytest.approx(50.0)


def test_mde_validation():
    full = DepthMap(depth=np.zeros((2, 2)), valid=np.ones((2, 2), dtype=bool))
    with pytest.raises(ValueError, match="shape"):
        mde(full, DepthMap(depth=np.zeros((3, 3)),
                           valid=np.ones((3, 3), dtype=bool)))
    with pytest.raises(ValueError, match="valid"):
        mde(full, DepthMap(depth=np.zeros((2, 2)),
                           valid=np.zeros((2, 2), dtype=bool)))


def test_density_and_spike_mass():
    st = SpikeTensor(ad.constant(np.array([0.0, 0.0, 2.0, 1.0])), max_count=2)
    assert density(st) == 0.5
    assert spike_mass(st) == pytest.approx(0.75)
    assert density(np.zeros((3, 3))) == 0.0
    assert density(np.zeros(0)) == 0.0


def trace_pair():
    net = tiny_net(seed=0)
    rng = np.random.default_rng(0)
    traces = []
    for _ in range(2):
        _, tr = net.forward(random_chunk(net.cfg, rng),
                            random_chunk(net.cfg, rng))
        traces.append(tr)
    return traces


def test_density_report_layout():
    traces = trace_pair()
    report = density_report(traces, mde_cm=33.3, mode="binocular")
    assert isinstance(report, DensityReport)
    names = [r[0] for r in report.rows]
    assert names[0] == "out_bottomL"
    assert names[-1] == "out_add1"
    assert set(report.group_means) == {"Left Encoder", "Right Encoder",
                                       "Bottleneck", "Decoder"}
    # group means really average the member rows
    dec_rows = [d for (n, d, _) in report.rows
                if n.startswith(("out_deconv", "out_add"))]
    assert report.group_means["Decoder"] == pytest.approx(np.mean(dec_rows))
    text = report.as_text()
    for needle in ("Left Encoder Mean", "Bottleneck Mean", "Decoder Mean",
                   "Model MDE [cm]", "out_rconv"):
        assert needle in text
    csv = report.as_csv().splitlines()
    assert csv[0] == "layer,density_pct,spike_mass"
    assert len(csv) == 1 + len(report.rows) + len(report.group_means) + 1


def test_density_report_mono_layout():
    net = tiny_net(seed=1, mode="monocular")
    rng = np.random.default_rng(1)
    _, tr = net.forward(random_chunk(net.cfg, rng))
    report = density_report([tr], mde_cm=1.0, mode="monocular")
    assert "Right Encoder" not in report.group_means
    with pytest.raises(ValueError):
        density_report([], 0.0, "monocular")


def test_write_depth_pgm(tmp_path):
    dm = DepthMap(depth=np.array([[0.0, 5.0], [10.0, 20.0]]),
                  valid=np.ones((2, 2), dtype=bool))
    path = tmp_path / "d.pgm"
    write_depth_pgm(dm, path, d_max=10.0)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n65535\n")
    pixels = np.frombuffer(raw.split(b"65535\n", 1)[1], dtype=">u2")
    assert pixels.tolist() == [0, 32767, 65535, 65535]   # clipped at d_max


def test_write_depth_f32_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    depth = rng.uniform(1, 9, size=(4, 6)).astype(np.float32)
    valid = rng.random((4, 6)) > 0.3
    path = tmp_path / "d.f32"
    write_depth_f32(DepthMap(depth=depth, valid=valid), path)
    back = read_depth_raster(path)   # same raster format as the dataset GT
    assert np.array_equal(back.valid, valid)
    assert np.array_equal(back.depth[valid], depth[valid])
