import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossframe.ditcore import AttentionRecord, TokenLayout
from crossframe.matching import PointSet, TrackSet
from crossframe.metrics import (
    aggregate_pck,
    attention_decomposition,
    attention_score,
    confidence_score,
    harmonic_grid,
    harmonic_mean,
    normalize_grid,
    pck,
    positional_bias,
)
from oracles import attention_score_oracle, confidence_oracle, pck_oracle


def _record(layout: TokenLayout, data: np.ndarray, t: int = 1, layer: int = 0):
    return AttentionRecord(t, layer, data.astype(np.float32), layout)


def _uniform_record(layout: TokenLayout):
    n = layout.total
    return _record(layout, np.full((n, n), 1.0 / n))


def _grid_starts(layout: TokenLayout) -> PointSet:
    pts = np.stack([np.arange(layout.spatial) % layout.width,
                    np.arange(layout.spatial) // layout.width], axis=1)
    return PointSet(pts.astype(np.float64))


def _tracks(points_per_frame: np.ndarray, height: int, width: int,
            visibility=None) -> TrackSet:
    vis = (np.ones(points_per_frame.shape[:2], dtype=bool)
           if visibility is None else visibility)
    return TrackSet(points_per_frame, vis, height, width)


# ---------------------------------------------------------------------------
# PCK
# ---------------------------------------------------------------------------


def test_pck_identity_is_one():
    rng = np.random.default_rng(0)
    pts = rng.uniform(10, 200, (4, 7, 2))
    gt = _tracks(pts, 256, 256)
    result = pck(_tracks(pts.copy(), 256, 256), gt)
    np.testing.assert_array_equal(result.per_delta, 1.0)
    assert result.average == 1.0


def test_pck_five_pixel_offset_gives_point_four():
    gt_pts = np.array([[[100.0, 100.0]], [[120.0, 100.0]]])
    est_pts = gt_pts.copy()
    est_pts[1, 0, 0] += 5.0  # exactly 5 px at the 256x256 evaluation scale
    gt = _tracks(gt_pts, 256, 256)
    result = pck(_tracks(est_pts, 256, 256), gt)
    np.testing.assert_array_equal(result.per_delta, [0, 0, 0, 1, 1])
    assert result.average == pytest.approx(0.4)
    oracle = pck_oracle(est_pts, gt_pts, gt.visibility, 256, 256, (1, 2, 4, 8, 16))
    np.testing.assert_array_equal(result.per_delta, oracle[0])


def test_pck_far_offset_is_zero():
    gt_pts = np.array([[[50.0, 50.0]], [[60.0, 50.0]]])
    est_pts = gt_pts + 100.0
    result = pck(_tracks(est_pts, 256, 256), _tracks(gt_pts, 256, 256))
    np.testing.assert_array_equal(result.per_delta, 0.0)


def test_pck_rescales_to_eval_resolution():
    # a 2-px error in a 64-px video is 8 px at 256x256: outside delta^2=4,
    # inside delta^4=16, and exactly on the delta^3=8 boundary (strict <)
    gt_pts = np.array([[[10.0, 10.0]], [[12.0, 10.0]]])
    est_pts = gt_pts.copy()
    est_pts[1, 0, 0] += 2.0
    result = pck(_tracks(est_pts, 64, 64), _tracks(gt_pts, 64, 64))
    np.testing.assert_array_equal(result.per_delta, [0, 0, 0, 0, 1])


def test_pck_counts_only_visible_points():
    gt_pts = np.array([[[10.0, 10.0], [20.0, 20.0]],
                       [[12.0, 10.0], [22.0, 20.0]]])
    est_pts = gt_pts.copy()
    est_pts[1, 1] += 200.0  # the wrong point is invisible, so it never counts
    vis = np.array([[True, True], [True, False]])
    result = pck(_tracks(est_pts, 256, 256), _tracks(gt_pts, 256, 256, vis))
    np.testing.assert_array_equal(result.per_delta, 1.0)
    assert result.n_points == 1


def test_pck_empty_visibility_returns_none_not_zero():
    gt_pts = np.array([[[10.0, 10.0]], [[12.0, 10.0]]])
    vis = np.array([[True], [False]])
    assert pck(_tracks(gt_pts, 256, 256), _tracks(gt_pts, 256, 256, vis)) is None
    assert aggregate_pck([None, None]) is None


def test_pck_mismatched_shapes_rejected():
    a = _tracks(np.zeros((2, 1, 2)), 256, 256)
    b = _tracks(np.zeros((3, 1, 2)), 256, 256)
    with pytest.raises(ValueError):
        pck(a, b)


@given(seed=st.integers(0, 500))
@settings(max_examples=25, deadline=None)
def test_pck_monotone_in_threshold(seed):
    rng = np.random.default_rng(seed)
    gt_pts = rng.uniform(0, 250, (3, 5, 2))
    est_pts = gt_pts + rng.normal(0, 6, gt_pts.shape)
    result = pck(_tracks(est_pts, 256, 256), _tracks(gt_pts, 256, 256))
    assert (np.diff(result.per_delta) >= 0).all()


# ---------------------------------------------------------------------------
# Confidence and attention scores
# ---------------------------------------------------------------------------


def test_confidence_one_hot_rows_is_one():
    layout = TokenLayout(2, 2, 2, 2)
    data = np.zeros((layout.total, layout.total))
    for i in range(layout.spatial):  # frame-0 queries: all mass on one target
        data[i, layout.spatial + i] = 1.0
    record = _record(layout, data)
    assert confidence_score(record, _grid_starts(layout)) == 1.0


def test_confidence_uniform_closed_form():
    layout = TokenLayout(2, 2, 2, 2)  # (1+f)hw + S = 10
    record = _uniform_record(layout)
    assert confidence_score(record, _grid_starts(layout)) == pytest.approx(0.1)


def test_confidence_matches_bruteforce_oracle():
    layout = TokenLayout(3, 2, 2, 2)
    rng = np.random.default_rng(1)
    data = rng.random((layout.total, layout.total))
    data /= data.sum(axis=1, keepdims=True)
    record = _record(layout, data)
    starts = _grid_starts(layout)
    expected = confidence_oracle(record.data.astype(np.float64), 3, 2, 2,
                                 starts.points)
    assert confidence_score(record, starts) == pytest.approx(expected, abs=1e-7)


def test_attention_score_uniform_closed_form():
    layout = TokenLayout(2, 2, 2, 2)
    record = _uniform_record(layout)
    assert attention_score(record, _grid_starts(layout)) == pytest.approx(0.4)


def test_attention_score_zero_when_mass_on_text():
    layout = TokenLayout(2, 2, 2, 2)
    data = np.zeros((layout.total, layout.total))
    data[:, layout.frame_tokens] = 1.0
    record = _record(layout, data)
    assert attention_score(record, _grid_starts(layout)) == 0.0


def test_attention_score_matches_summation_oracle():
    layout = TokenLayout(3, 2, 2, 1)
    rng = np.random.default_rng(2)
    data = rng.random((layout.total, layout.total))
    data /= data.sum(axis=1, keepdims=True)
    record = _record(layout, data)
    starts = _grid_starts(layout)
    expected = attention_score_oracle(record.data.astype(np.float64), 3, 2, 2,
                                      starts.points)
    assert attention_score(record, starts) == pytest.approx(expected, abs=1e-6)


@given(seed=st.integers(0, 200))
@settings(max_examples=25, deadline=None)
def test_confidence_bounded_below_by_mean_mass(seed):
    # max >= mean per block, so confidence >= attention_score / (f * hw);
    # both scores stay inside their stated ranges
    layout = TokenLayout(3, 2, 2, 2)
    rng = np.random.default_rng(seed)
    data = rng.random((layout.total, layout.total))
    data /= data.sum(axis=1, keepdims=True)
    record = _record(layout, data)
    starts = _grid_starts(layout)
    conf = confidence_score(record, starts)
    attn = attention_score(record, starts)
    f = layout.frames - 1
    assert conf >= attn / (f * layout.spatial) - 1e-12
    assert 0 < conf <= 1
    assert 0 <= attn <= 1


def test_scores_respect_per_frame_visibility():
    layout = TokenLayout(3, 2, 2, 1)
    rng = np.random.default_rng(3)
    data = rng.random((layout.total, layout.total))
    data /= data.sum(axis=1, keepdims=True)
    record = _record(layout, data)
    starts = PointSet(np.array([[0.0, 0.0], [1.0, 1.0]]))
    vis = np.ones((3, 2), dtype=bool)
    vis[2, 1] = False
    full = confidence_score(record, starts)
    masked = confidence_score(record, starts, vis)
    assert masked != pytest.approx(full)
    none_vis = np.zeros((3, 2), dtype=bool)
    assert confidence_score(record, starts, none_vis) is None


# ---------------------------------------------------------------------------
# Decomposition and positional bias
# ---------------------------------------------------------------------------


def test_decomposition_uniform_closed_form():
    layout = TokenLayout(2, 2, 2, 2)
    record = _uniform_record(layout)
    masses = attention_decomposition(record, _grid_starts(layout))
    assert masses == pytest.approx((0.4, 0.4, 0.2))


def test_decomposition_self_only():
    layout = TokenLayout(2, 2, 2, 2)
    data = np.zeros((layout.total, layout.total))
    for i in range(layout.total):
        data[i, i % layout.spatial] = 1.0  # all mass inside frame 0 columns
    record = _record(layout, data)
    masses = attention_decomposition(record, _grid_starts(layout))
    assert masses == pytest.approx((1.0, 0.0, 0.0))


@given(seed=st.integers(0, 300))
@settings(max_examples=25, deadline=None)
def test_decomposition_partitions_row_mass(seed):
    layout = TokenLayout(3, 2, 3, 2)
    rng = np.random.default_rng(seed)
    data = rng.random((layout.total, layout.total))
    data /= data.sum(axis=1, keepdims=True)
    masses = attention_decomposition(_record(layout, data), _grid_starts(layout))
    assert sum(masses) == pytest.approx(1.0, abs=1e-5)


def test_positional_bias_extremes():
    layout = TokenLayout(2, 2, 2, 1)
    starts = _grid_starts(layout)
    one_hot = np.zeros((layout.total, layout.total))
    for i in range(layout.spatial):
        one_hot[i, layout.spatial + i] = 1.0  # argmax at the same spatial cell
    assert positional_bias(_record(layout, one_hot), starts) == 1.0
    uniform = _uniform_record(layout)  # ties resolve to cell 0
    assert positional_bias(uniform, starts) == pytest.approx(1.0 / layout.spatial)


# ---------------------------------------------------------------------------
# Harmonic ranking
# ---------------------------------------------------------------------------


def test_harmonic_closed_forms():
    assert harmonic_mean(1.0, 1.0, 1.0) == pytest.approx(1.0, abs=1e-9)
    assert harmonic_mean(0.5, 1.0, 1.0) == pytest.approx(0.75, abs=1e-9)


def test_harmonic_zero_floored_metric_ranks_last():
    value = harmonic_mean(0.0, 1.0, 1.0)
    assert value < 3.1e-6
    assert value > 0


def test_harmonic_bounded_by_min_and_three_min():
    # the harmonic mean of three positives sits between the smallest input
    # and three times the smallest input
    rng = np.random.default_rng(4)
    vals = rng.random((50, 3))
    harm = harmonic_grid(vals[:, 0], vals[:, 1], vals[:, 2])
    mins = vals.min(axis=1)
    assert (harm >= mins - 1e-5).all()
    assert (harm <= 3 * mins + 1e-5).all()


def test_normalize_grid_minmax_and_degenerate():
    normed, degenerate = normalize_grid(np.array([2.0, 4.0, 6.0]))
    np.testing.assert_allclose(normed, [0.0, 0.5, 1.0])
    assert not degenerate
    ones, flag = normalize_grid(np.array([3.0, 3.0, 3.0]))
    np.testing.assert_array_equal(ones, 1.0)
    assert flag
    with_nan, _ = normalize_grid(np.array([1.0, np.nan, 3.0]))
    assert np.isnan(with_nan[1]) and with_nan[2] == 1.0
