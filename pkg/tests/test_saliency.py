import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from m3rpd import saliency as S
from m3rpd.models import build_m3, build_non_m3
from m3rpd.tensor import Tensor, add, backward, conv2d, mean, mul, sum_

from helpers import tiny_backbone

BB = tiny_backbone()


class ConvProbe:
    """logit = w * mean(conv1x1(x)) + c on the FAF image; the conv output is the 'last conv map'."""

    def __init__(self, kernel, w, c=0.0):
        self.k = Tensor(np.asarray(kernel, dtype=np.float64).reshape(1, 1, -1, 1), requires_grad=True)
        self.w, self.c = w, c
        self.last = None

    def parameters(self):
        return [self.k]

    def forward(self, scenario, cfp, faf):
        act = conv2d(faf, self.k)
        self.last = act
        logit = add(mul(mean(act, axis=(1, 2, 3)), self.w), self.c)
        return logit, {"faf": act}


def test_zero_gradient_probe_gives_all_zero_map():
    probe = ConvProbe([1.0], w=0.0, c=3.0)
    img = np.random.default_rng(0).random((8, 8, 1))
    smap = S.saliency_map(probe, "faf", faf=img)["faf"]
    assert smap.values.shape == (8, 8) and not np.any(smap.values)
    assert smap.raw_min == smap.raw_max == 0.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3), st.floats(-2, 2).filter(lambda v: abs(v) > 1e-3), st.integers(0, 10_000))
def test_one_by_one_conv_probe_sign_pattern(w, k, seed):
    img = np.random.default_rng(seed).normal(size=(6, 7, 1))
    probe = ConvProbe([k], w=w)
    smap = S.saliency_map(probe, "faf", faf=img)["faf"]
    act = k * img[..., 0]
    assert np.array_equal(np.sign(smap.values), np.sign(w * act))


def test_map_uses_the_backward_gradient():
    img = np.random.default_rng(1).random((5, 5, 2))
    probe = ConvProbe([0.7, -1.3], w=2.0)
    smap = S.saliency_map(probe, "faf", faf=img)["faf"]
    act = Tensor(conv2d(Tensor(img[None]), probe.k).data, requires_grad=True)
    backward(sum_(mul(mean(act, axis=(1, 2, 3)), 2.0)), [act])
    raw = (act.grad[0] * act.data[0]).sum(-1)
    np.testing.assert_allclose(smap.values, raw / np.abs(raw).max(), rtol=1e-12)
    assert smap.raw_max == pytest.approx(raw.max()) and smap.argmax == np.unravel_index(np.argmax(np.abs(raw)), raw.shape)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_real_model_maps_are_normalised(seed):
    m = build_m3(BB, seed=seed % 5)
    rng = np.random.default_rng(seed)
    c, f = rng.random((16, 16, 3)).astype(np.float32), rng.random((16, 16, 1)).astype(np.float32)
    maps = S.saliency_map(m, "fused", c, f, "r")
    assert set(maps) == {"cfp", "faf"}
    for smap in maps.values():
        v = smap.values
        assert v.shape == (16, 16) and v.min() >= -1 and v.max() <= 1
        if np.ptp(v) > 0:
            assert np.abs(v).max() == 1.0
    # saliency leaves no gradients behind on the model
    assert all(p.grad is None for p in m.parameters())


def test_scenario_image_mismatch():
    m = build_non_m3("cfp", BB)
    with pytest.raises(ValueError, match="requires a CFP image"):
        S.saliency_map(m, "cfp", faf=np.zeros((16, 16, 1)))
    with pytest.raises(ValueError, match="unknown scenario"):
        S.saliency_map(m, "oct", cfp=np.zeros((16, 16, 3)))
    with pytest.raises(ValueError, match="one image"):
        S.saliency_map(m, "cfp", cfp=np.zeros((2, 16, 16, 3)))


# ---------------------------------------------------------------- rendering


def test_palette_endpoints_are_exact():
    assert tuple(S.colormap(1.0)) == S.POSITIVE_RGB
    assert tuple(S.colormap(-1.0)) == S.NEGATIVE_RGB
    assert tuple(S.colormap(0.0)) == S.NEUTRAL_RGB


def test_zero_map_overlay_is_the_dimmed_base():
    base = np.random.default_rng(2).random((6, 6, 3))
    out = S.overlay(np.zeros((6, 6)), base, alpha=0.5)
    gray = base.mean(-1) * 255
    expected = np.rint(0.5 * np.array(S.NEUTRAL_RGB) + 0.5 * gray[..., None])
    assert np.array_equal(out, expected.astype(np.uint8))
    with pytest.raises(ValueError, match="differ in size"):
        S.overlay(np.zeros((5, 6)), base)


def test_export_writes_named_pngs_colorbar_and_stats(tmp_path):
    m = build_m3(BB, seed=0)
    rng = np.random.default_rng(3)
    items = [(f"r{i}", rng.random((16, 16, 3)), rng.random((16, 16, 1))) for i in range(2)]
    written = S.export(m, "fused", items, str(tmp_path))
    assert sorted(p.split("/")[-1] for p in written) == ["r0_fused_cfp.png", "r0_fused_faf.png", "r1_fused_cfp.png", "r1_fused_faf.png"]
    with Image.open(written[0]) as im:
        assert im.size == (16, 16) and im.mode == "RGB"
    assert (tmp_path / "colorbar.png").exists()
    with open(tmp_path / "saliency_stats.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and all(float(r["raw_min"]) <= float(r["raw_max"]) for r in rows)


def test_export_to_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        S.export(build_non_m3("faf", BB), "faf", [("r", None, np.zeros((16, 16, 1)))], str(blocker / "out"))
