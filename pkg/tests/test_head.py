import math

import numpy as np
import pytest
import torch

from latrack.errors import DataError, NumericError, ShapeError
from latrack.head import (
    BBox, CenterHead, ScoreMaps, boxes_at_cells, decode_box, focal_loss, giou,
    giou_loss, hanning_window, l1_loss, make_gaussian_target, total_loss,
)
from latrack.selfcheck import check_loss_gradients


@pytest.fixture(scope="module")
def head():
    torch.manual_seed(0)
    return CenterHead(c_in=32, width=16)


def test_head_output_shapes_and_ranges(head):
    x = torch.randn(2, 32, 16, 16)
    maps = head(x)
    assert tuple(maps.cls.shape) == (2, 16, 16)
    assert tuple(maps.offset.shape) == (2, 2, 16, 16)
    assert tuple(maps.size.shape) == (2, 2, 16, 16)
    for m in (maps.cls, maps.offset, maps.size):
        assert float(m.min()) > 0.0 and float(m.max()) < 1.0


def test_head_deterministic_and_shape_checked(head):
    x = torch.randn(1, 32, 16, 16)
    a, b = head(x), head(x)
    assert torch.equal(a.cls, b.cls)
    with pytest.raises(ShapeError):
        head(torch.randn(1, 16, 16, 16))


def test_gaussian_target_offset_at_cell_center():
    t = make_gaussian_target(BBox(cx=(5 + 0.5) / 16, cy=(3 + 0.5) / 16, w=0.2, h=0.2), 16, 16)
    assert t.cell == (3, 5)
    assert torch.allclose(t.offset, torch.tensor([0.5, 0.5], dtype=torch.float64))
    assert torch.allclose(t.size, torch.tensor([0.2, 0.2], dtype=torch.float64))


def test_gaussian_target_sigma_floor():
    t = make_gaussian_target(BBox(cx=0.53, cy=0.53, w=0.01, h=0.01), 16, 16)
    r, c = t.cell
    # sigma clamps at 1 cell: a neighbour at distance 1 must be exp(-1/2)
    assert float(t.y[r, c + 1]) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_gaussian_target_peak_and_tails():
    t = make_gaussian_target(BBox(cx=0.5, cy=0.5, w=0.3, h=0.3), 16, 16)
    assert float(t.y.max()) == 1.0
    assert int((t.y == 1.0).sum()) == 1
    assert float(t.y.sum()) > 1.0


def test_gaussian_target_rejects_bad_boxes():
    with pytest.raises(DataError):
        make_gaussian_target(BBox(cx=0.5, cy=0.5, w=0.0, h=0.1), 16, 16)
    with pytest.raises(DataError):
        make_gaussian_target(BBox(cx=1.2, cy=0.5, w=0.1, h=0.1), 16, 16)


def test_focal_loss_hand_values():
    one = torch.tensor([[0.5]], dtype=torch.float64)
    assert float(focal_loss(one, torch.tensor([[1.0]], dtype=torch.float64))) == \
        pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert float(focal_loss(one, torch.tensor([[0.0]], dtype=torch.float64))) == \
        pytest.approx(0.25 * math.log(2), abs=1e-12)


def test_focal_loss_perfect_prediction_negligible():
    y = torch.zeros(8, 8, dtype=torch.float64)
    y[4, 4] = 1.0
    p = y.clone()
    assert float(focal_loss(p, y)) <= 1e-4


def test_focal_loss_nonnegative_random(rng):
    for _ in range(20):
        p = torch.tensor(rng.uniform(0.01, 0.99, (8, 8)))
        t = make_gaussian_target(BBox(0.4, 0.6, 0.2, 0.3), 8, 8)
        assert float(focal_loss(p, t.y)) >= 0.0


def test_giou_loss_hand_values():
    a = BBox(cx=0.5, cy=0.5, w=1.0, h=1.0)
    assert float(giou_loss(a, a)) == pytest.approx(0.0, abs=1e-12)
    b = BBox(cx=2.5, cy=2.5, w=1.0, h=1.0)
    assert float(giou_loss(a, b)) == pytest.approx(16.0 / 9.0, abs=1e-12)
    outer = BBox(cx=1.0, cy=1.0, w=2.0, h=2.0)
    inner = BBox(cx=0.5, cy=0.5, w=1.0, h=1.0)
    assert float(giou_loss(outer, inner)) == pytest.approx(0.75, abs=1e-12)


def test_giou_bounds_random(rng):
    for _ in range(200):
        a = torch.tensor([*rng.uniform(0, 1, 2), *rng.uniform(0.05, 1, 2)], dtype=torch.float64)
        b = torch.tensor([*rng.uniform(0, 1, 2), *rng.uniform(0.05, 1, 2)], dtype=torch.float64)
        g = float(giou(a, b))
        assert -1.0 < g <= 1.0
        loss = float(giou_loss(a, b))
        assert 0.0 <= loss < 2.0


def test_giou_rejects_degenerate():
    with pytest.raises(DataError):
        giou_loss(BBox(0.5, 0.5, 0.0, 0.1), BBox(0.5, 0.5, 0.1, 0.1))


def test_l1_loss_values_and_symmetry(rng):
    a = BBox(cx=0.5, cy=0.5, w=0.2, h=0.2)
    assert float(l1_loss(a, a)) == 0.0
    shifted = BBox(cx=0.6, cy=0.5, w=0.2, h=0.2)
    assert float(l1_loss(shifted, a)) == pytest.approx(0.025, abs=1e-12)
    for _ in range(10):
        x = torch.tensor(rng.uniform(0, 1, 4))
        y = torch.tensor(rng.uniform(0, 1, 4))
        assert float(l1_loss(x, y)) == pytest.approx(float(l1_loss(y, x)), abs=1e-15)


def test_total_loss_weights():
    assert float(total_loss(0.1, 0.2, 0.04)) == pytest.approx(0.7, abs=1e-12)
    assert float(total_loss(0.0, 0.0, 0.0)) == 0.0
    assert float(total_loss(0.37, 9.0, 9.0, 0.0, 0.0)) == pytest.approx(0.37)
    with pytest.raises(NumericError):
        total_loss(float("nan"), 0.0, 0.0)


def test_loss_gradients_match_finite_differences():
    check_loss_gradients(n_instances=10, seed=1)


def test_decode_box_arithmetic_example():
    cls = torch.zeros(1, 16, 16)
    cls[0, 4, 5] = 0.9
    offset = torch.full((1, 2, 16, 16), 0.5)
    size = torch.full((1, 2, 16, 16), 0.25)
    box = decode_box(ScoreMaps(cls=cls, offset=offset, size=size).single(0))
    assert box.cx == pytest.approx(0.34375, abs=1e-9)
    assert box.cy == pytest.approx(0.28125, abs=1e-9)
    assert box.w == pytest.approx(0.25) and box.h == pytest.approx(0.25)
    assert box.confidence == pytest.approx(0.9, abs=1e-7)


def test_decode_box_uniform_ties_break_row_major():
    maps = ScoreMaps(cls=torch.full((1, 16, 16), 0.3),
                     offset=torch.rand(1, 2, 16, 16),
                     size=torch.rand(1, 2, 16, 16))
    box = decode_box(maps.single(0))
    assert box.cx == (0 + float(maps.offset[0, 0, 0, 0])) / 16
    assert box.cy == (0 + float(maps.offset[0, 1, 0, 0])) / 16


def test_decode_box_window_weight_zero_is_identity():
    torch.manual_seed(3)
    maps = ScoreMaps(cls=torch.rand(1, 16, 16), offset=torch.rand(1, 2, 16, 16),
                     size=torch.rand(1, 2, 16, 16))
    win = hanning_window(16, 16)
    a = decode_box(maps.single(0))
    b = decode_box(maps.single(0), window=win, window_weight=0.0)
    assert (a.cx, a.cy, a.w, a.h, a.confidence) == (b.cx, b.cy, b.w, b.h, b.confidence)


def test_decode_box_monotone_transform_invariance():
    torch.manual_seed(4)
    cls = torch.rand(1, 16, 16)
    offset, size = torch.rand(1, 2, 16, 16), torch.rand(1, 2, 16, 16)
    base = decode_box(ScoreMaps(cls=cls, offset=offset, size=size).single(0))
    for scale, shift in ((0.5, 0.1), (0.2, 0.7), (0.9, 0.05)):
        warped = decode_box(ScoreMaps(cls=cls * scale + shift, offset=offset, size=size).single(0))
        assert (warped.cx, warped.cy, warped.w, warped.h) == (base.cx, base.cy, base.w, base.h)


def test_decode_confidence_is_pre_window_cls():
    cls = torch.zeros(1, 16, 16)
    cls[0, 0, 0] = 0.6   # strong corner peak, crushed by the window
    cls[0, 8, 8] = 0.55  # centre peak favoured by the window
    maps = ScoreMaps(cls=cls, offset=torch.zeros(1, 2, 16, 16), size=torch.rand(1, 2, 16, 16))
    win = hanning_window(16, 16)
    box = decode_box(maps.single(0), window=win, window_weight=0.49)
    assert box.confidence == pytest.approx(0.55, abs=1e-7)


def test_encode_decode_consistency_through_targets(rng):
    for _ in range(25):
        gt = BBox(cx=float(rng.uniform(0.1, 0.9)), cy=float(rng.uniform(0.1, 0.9)),
                  w=float(rng.uniform(0.05, 0.4)), h=float(rng.uniform(0.05, 0.4)))
        t = make_gaussian_target(gt, 16, 16)
        maps = ScoreMaps(
            cls=t.y.unsqueeze(0).float(),
            offset=t.offset.float().view(1, 2, 1, 1).expand(1, 2, 16, 16).contiguous(),
            size=t.size.float().view(1, 2, 1, 1).expand(1, 2, 16, 16).contiguous(),
        )
        decoded = decode_box(maps.single(0))
        again = boxes_at_cells(maps, [t.cell])[0]
        assert decoded.cx == pytest.approx(float(again[0]), abs=1e-6)
        assert decoded.cy == pytest.approx(float(again[1]), abs=1e-6)
        # the decoded box re-quantizes to the same crop geometry
        assert decoded.cx == pytest.approx(gt.cx, abs=1e-6)
        assert decoded.cy == pytest.approx(gt.cy, abs=1e-6)
        assert decoded.w == pytest.approx(gt.w, abs=1e-6)
        assert decoded.h == pytest.approx(gt.h, abs=1e-6)


def test_boxes_at_cells_gathers_per_sample():
    offset = torch.zeros(2, 2, 4, 4)
    size = torch.zeros(2, 2, 4, 4)
    offset[0, :, 1, 2] = torch.tensor([0.5, 0.25])
    size[0, :, 1, 2] = torch.tensor([0.3, 0.4])
    offset[1, :, 3, 0] = torch.tensor([0.1, 0.9])
    size[1, :, 3, 0] = torch.tensor([0.2, 0.1])
    maps = ScoreMaps(cls=torch.zeros(2, 4, 4), offset=offset, size=size)
    boxes = boxes_at_cells(maps, [(1, 2), (3, 0)])
    assert torch.allclose(boxes[0], torch.tensor([(2 + 0.5) / 4, (1 + 0.25) / 4, 0.3, 0.4]))
    assert torch.allclose(boxes[1], torch.tensor([(0 + 0.1) / 4, (3 + 0.9) / 4, 0.2, 0.1]))
