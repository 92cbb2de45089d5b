import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fawa.attack import (
    ARCTANH_CLAMP,
    AttackResult,
    GradAttackConfig,
    OptAttackConfig,
    batch_attack,
    binary_search_c,
    grad_attack,
    line_span,
    locate,
    opt_attack,
    parse_norm,
    plan_watermark,
    protect,
    protect_batch,
    quantize_within,
    watermark_attack_batch,
)
from fawa.ctc import InfeasibleTargetError
from fawa.model import CTCRecognizer
from fawa.textgen import render_text
from fawa.watermark import MAX_COLOR_GRAY, MIN_COLOR_GRAY, Rect, WatermarkSpec, colorize, text_mask, to_gray

# "bad" -> "bab" is reachable for the small model within a few hundred steps
SRC, TGT = "bad", "bab"
QUICK = GradAttackConfig(max_iter=300)
# the arctanh clamp moves pure black/white pixels by exactly the clamp; allow float rounding on top
ROUND_TRIP = ARCTANH_CLAMP + 1e-12


def ones(x):
    return np.ones(x.shape, dtype=bool)


def test_config_defaults_and_validation():
    assert GradAttackConfig().alpha == 0.05
    assert GradAttackConfig(norm="Linf").alpha == 0.01
    assert parse_norm("L_inf") == "linf" and parse_norm("2") == "l2"
    for bad in (dict(eps=0), dict(alpha=-1), dict(mu=-0.1), dict(max_iter=0), dict(norm="l1")):
        with pytest.raises(ValueError):
            GradAttackConfig(**bad)
    with pytest.raises(ValueError):
        OptAttackConfig(c=0)
    with pytest.raises(ValueError):
        OptAttackConfig(c_range=(5, 1))


def test_grad_attack_succeeds_and_is_verified(small_model):
    x = render_text(SRC)
    r = grad_attack(x, ones(x), TGT, small_model, QUICK)
    assert r.success and r.predicted == TGT
    assert small_model.predict([r.adversarial]) == [TGT]
    assert r.iterations_used % 10 == 0
    assert np.max(np.abs(r.adversarial - x)) <= 0.2 + 1e-9
    assert r.metrics.mse > 0


def test_grad_attack_linf(small_model):
    x = render_text(SRC)
    r = grad_attack(x, ones(x), TGT, small_model, GradAttackConfig(norm="linf", max_iter=200))
    assert np.max(np.abs(r.adversarial - x)) <= 0.2 + 1e-9
    assert r.adversarial.min() >= 0 and r.adversarial.max() <= 1


def test_empty_mask_leaves_image_untouched(small_model):
    x = render_text(SRC)
    none = np.zeros(x.shape, dtype=bool)
    r = grad_attack(x, none, TGT, small_model, GradAttackConfig(max_iter=20))
    assert not r.success and r.iterations_used == 20
    np.testing.assert_array_equal(r.adversarial, x)
    o = opt_attack(x, none, TGT, small_model, OptAttackConfig(steps=20))
    assert not o.success
    assert np.max(np.abs(o.adversarial - x)) <= ROUND_TRIP


def test_already_correct_target_stops_at_zero(small_model):
    x = render_text(SRC)
    r = grad_attack(x, ones(x), SRC, small_model, QUICK)
    assert r.success and r.iterations_used == 0
    np.testing.assert_array_equal(r.adversarial, x)
    o = opt_attack(x, ones(x), SRC, small_model, OptAttackConfig(steps=30, early_stop=True))
    assert o.success and o.iterations_used == 0
    assert np.max(np.abs(o.adversarial - x)) <= ROUND_TRIP


def test_confinement_with_random_mask(small_model):
    x = render_text(SRC)
    mask = np.random.default_rng(0).random(x.shape) < 0.3
    for r in (
        grad_attack(x, mask, TGT, small_model, GradAttackConfig(max_iter=40)),
        opt_attack(x, mask, TGT, small_model, OptAttackConfig(steps=40)),
    ):
        np.testing.assert_array_equal(r.adversarial[~mask], x[~mask])


def test_infeasible_target(small_model):
    x = render_text("ab")
    with pytest.raises(InfeasibleTargetError):
        grad_attack(x, ones(x), "abababababab", small_model)
    with pytest.raises(InfeasibleTargetError):
        opt_attack(x, ones(x), "aaaaaaaa", small_model)


def test_infeasible_item_in_batch_fails_alone(small_model):
    x = render_text("ab")
    out = batch_attack([(x, ones(x), "abababababab"), (x, ones(x), "ab")], small_model, QUICK)
    assert out[0].failure == "infeasible target" and not out[0].success
    assert out[1].success


def test_zero_gradient_failure():
    m = CTCRecognizer(conv1_channels=2, conv2_channels=2, hidden=2)
    m.set_weights({k: np.zeros_like(v) for k, v in m.init_params().items()})
    x = render_text("ab")
    # all-zero logits decode to "a"; the input gradient vanishes
    r = grad_attack(x, ones(x), "b", m, GradAttackConfig(max_iter=20))
    assert r.failure == "zero gradient" and not r.success


def test_opt_attack_best_success(small_model):
    x = render_text(SRC)
    full = opt_attack(x, ones(x), TGT, small_model, OptAttackConfig(steps=400))
    early = opt_attack(x, ones(x), TGT, small_model, OptAttackConfig(steps=400, early_stop=True))
    assert full.success and early.success
    assert full.iterations_used == early.iterations_used
    assert full.metrics.mse <= early.metrics.mse + 1e-15
    assert full.c == 10.0


def test_binary_search_records_history(small_model):
    x = render_text(SRC)
    cfg = OptAttackConfig(steps=400, binary_search_steps=3, early_stop=True)
    c, r = binary_search_c(x, ones(x), TGT, small_model, cfg)
    assert len(r.c_history) == 3 and r.c_history[0]["c"] == 10.0
    assert r.success and c == r.c
    first_ok = next(h["mse"] for h in r.c_history if h["success"])
    assert r.metrics.mse <= first_ok
    # success lowers c, failure raises it
    for a, b in zip(r.c_history, r.c_history[1:]):
        assert (b["c"] < a["c"]) == a["success"]


def test_binary_search_all_fail(small_model):
    x = render_text(SRC)
    none = np.zeros(x.shape, dtype=bool)
    c, r = binary_search_c(x, none, TGT, small_model, OptAttackConfig(steps=10))
    assert c is None and not r.success and len(r.c_history) == 5
    assert [h["c"] for h in r.c_history][:2] == [10.0, pytest.approx(np.sqrt(10 * 100))]


def test_batch_pads_and_strips(small_model):
    a, b = render_text("bad"), render_text("ab")
    assert a.shape[1] != b.shape[1]
    out = batch_attack([(a, ones(a), TGT), (b, ones(b), "ab")], small_model, QUICK)
    assert out[0].adversarial.shape == a.shape and out[1].adversarial.shape == b.shape
    assert out[0].success


def test_batch_of_one_equals_single(small_model):
    x = render_text(SRC)
    single = grad_attack(x, ones(x), TGT, small_model, QUICK)
    [batched] = batch_attack([(x, ones(x), TGT)], small_model, QUICK)
    np.testing.assert_array_equal(single.adversarial, batched.adversarial)
    assert single.iterations_used == batched.iterations_used


def test_batch_items_match_solo_runs(small_model):
    a, b = render_text("bad"), render_text("cab")
    cfg = GradAttackConfig(max_iter=60)
    both = batch_attack([(a, ones(a), TGT), (b, ones(b), "dab")], small_model, cfg)
    solo = [grad_attack(a, ones(a), TGT, small_model, cfg), grad_attack(b, ones(b), "dab", small_model, cfg)]
    for r, s in zip(both, solo):
        np.testing.assert_allclose(r.adversarial, s.adversarial, atol=1e-9)


def test_workers_do_not_change_results(small_model):
    imgs = [render_text(w) for w in ["bad", "cab", "ab"]]
    items = [(x, ones(x), t) for x, t in zip(imgs, [TGT, "dab", "bb"])]
    cfg = GradAttackConfig(max_iter=40)
    one = batch_attack(items, small_model, cfg, workers=1, chunk_size=2)
    many = batch_attack(items, small_model, cfg, workers=3, chunk_size=2)
    for r, s in zip(one, many):
        np.testing.assert_array_equal(r.adversarial, s.adversarial)
        assert r.success == s.success and r.iterations_used == s.iterations_used


def test_quantized_attack_output_is_8bit(small_model):
    x = render_text(SRC)
    r = grad_attack(x, ones(x), TGT, small_model, QUICK, quantize=True)
    assert r.success
    np.testing.assert_allclose(r.adversarial * 255, np.rint(r.adversarial * 255), atol=1e-9)
    assert np.max(np.abs(r.adversarial - x)) <= 0.2 + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.2, None]))
def test_quantize_within_properties(seed, eps):
    rng = np.random.default_rng(seed)
    x0 = rng.integers(0, 256, (6, 7)) / 255.0
    mask = rng.random((6, 7)) < 0.5
    bound = eps if eps is not None else 1.0
    x = np.clip(x0 + rng.uniform(-bound, bound, x0.shape), 0, 1)
    q = quantize_within(x, x0, mask, eps)
    np.testing.assert_allclose(q * 255, np.rint(q * 255), atol=1e-9)
    np.testing.assert_array_equal(q[~mask], x0[~mask])
    if eps is not None:
        assert np.max(np.abs(q - x0)) <= eps + 1e-9
    assert np.max(np.abs(q - x)[mask]) <= 1 / 255 + 1e-12


def test_result_row():
    from fawa.metrics import image_metrics

    x = np.ones((32, 12))
    r = AttackResult(x, True, 30, "ab", "ab", image_metrics(x, x))
    row = r.as_row()
    assert row["success"] and row["iterations"] == 30 and row["mse"] == 0.0


def test_line_span_and_plan():
    x = render_text("bad")
    rows = np.flatnonzero((x <= 0.5).any(axis=1))
    span = line_span(Rect(14, 10, 16, 20), x)
    assert (span.top, span.bottom) == (rows[0], rows[-1] + 1)
    assert (span.left, span.right) == (10, 20)
    plan = plan_watermark(x, Rect(14, 10, 16, 20), WatermarkSpec())
    assert plan.wm_mask.any()
    np.testing.assert_array_equal(plan.txt_mask, text_mask(x))
    assert np.all(plan.x0[plan.color_mask] == 0.682)
    np.testing.assert_array_equal(plan.x0[~plan.wm_mask], x[~plan.wm_mask])


def test_locate_falls_back_to_faint_changes():
    x = np.ones((32, 40))
    adv = x.copy()
    adv[10:20, 5:15] -= 0.01
    adv[2, 30] -= 0.2  # a single strong pixel that opening removes
    assert locate(x, adv) == Rect(10, 5, 20, 15)
    assert locate(x, x) is None


def test_watermark_attack_batch_confinement(small_model):
    x = render_text(SRC)
    res, plans = watermark_attack_batch([x, x], [TGT, SRC], small_model, GradAttackConfig(max_iter=300), probe_iter=100)
    for r, p in zip(res, plans):
        if p is None:
            assert r.failure == "no perturbed region"
            continue
        np.testing.assert_array_equal(r.adversarial[~p.wm_mask], p.x0[~p.wm_mask])
        assert np.max(np.abs(r.adversarial - p.x0)) <= 0.2 + 1e-9
    # the second item already reads correctly: the probe leaves no trace
    assert plans[1] is None and not res[1].success


def test_color_checked_pixels_stay_colorable(small_model):
    # a strong, unbounded optimization attack inside a watermark over the whole word
    x = render_text(SRC)
    plan = plan_watermark(x, Rect(0, 0, x.shape[0], x.shape[1]), WatermarkSpec())
    color = plan.color_mask
    cfg = OptAttackConfig(c=100.0, steps=200, lr=0.1)
    r = batch_attack([(plan.x0, plan.wm_mask, TGT)], small_model, cfg, quantize=True, color_masks=[color])[0]
    vals = r.adversarial[color]
    assert vals.min() >= MIN_COLOR_GRAY and vals.max() <= MAX_COLOR_GRAY
    colorize(r.adversarial, color)  # would raise a gamut error otherwise
    if r.success:
        assert small_model.predict([to_gray(colorize(r.adversarial, color))])[0] == TGT


def test_protect_restores_reading(small_model):
    x = render_text(SRC)
    wm = np.zeros(x.shape, dtype=bool)
    wm[:, : x.shape[1] // 2] = True
    tm = text_mask(x)
    r = protect(x, wm, tm, 0.682, small_model, QUICK)
    assert r.target == SRC
    if small_model.predict([np.where(wm & tm, 0.682, x)])[0] == SRC:
        assert r.success and r.iterations_used == 0
    with pytest.raises(ValueError):
        protect(x, wm, tm, 0.682, small_model, QUICK, ground_truth="dab")
    plan = plan_watermark(x, Rect(10, 4, 20, 14))
    [rb] = protect_batch([x], [plan], [SRC], small_model, QUICK)
    assert rb.target == SRC
    with pytest.raises(ValueError):
        protect_batch([x], [plan], ["dab"], small_model, QUICK)
