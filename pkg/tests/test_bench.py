import numpy as np
import pytest

from msmlp.bench import (
    ScalingRecord,
    fit_scaling,
    parse_sizes,
    records_from_csv,
    records_to_csv,
    run_scaling_sweep,
)
from msmlp.flops import ComplexityQuery, complexity_formula

SIDES = [28, 56, 112, 224]


def synthetic(power, k=3e-9):
    return [ScalingRecord("x", s, s, 96, 3, k * (s * s) ** power, 1) for s in SIDES]


def test_fit_linear():
    fit = fit_scaling(synthetic(1.0))
    assert abs(fit.slope - 1.0) <= 1e-9
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)
    assert fit.intercept == pytest.approx(np.log(3e-9))


def test_fit_quadratic():
    assert abs(fit_scaling(synthetic(2.0)).slope - 2.0) <= 1e-9


def test_fit_needs_four_records():
    with pytest.raises(ValueError):
        fit_scaling(synthetic(1.0)[:3])


def test_fit_degenerate_sizes():
    recs = [ScalingRecord("x", 8, 8, 4, 3, t, 1) for t in (1.0, 2.0, 3.0, 4.0)]
    with pytest.raises(ValueError):
        fit_scaling(recs)


def test_record_invariants():
    with pytest.raises(ValueError):
        ScalingRecord("x", 8, 8, 4, 2, 1.0, 1)
    with pytest.raises(ValueError):
        ScalingRecord("x", 8, 8, 4, 3, 0.0, 1)


def test_parse_sizes():
    assert parse_sizes("28x28, 56X56,112x64") == [(28, 28), (56, 56), (112, 64)]
    with pytest.raises(ValueError):
        parse_sizes("28")
    with pytest.raises(ValueError):
        parse_sizes("")


def test_csv_round_trip():
    recs = [ScalingRecord("mix-shift", 28, 28, 96, 5, 1.2345678901234567e-3, 2_533_888),
            ScalingRecord("global-mix", 56, 56, 96, 3, 0.1 + 0.2, 944_111_616)]
    text = records_to_csv(recs)
    assert text.splitlines()[0] == "op,h,w,c,reps,median_s,macs"
    assert records_from_csv(text) == recs


def test_csv_bad_header():
    with pytest.raises(ValueError):
        records_from_csv("a,b\n1,2\n")


def test_unknown_operator():
    with pytest.raises(ValueError):
        run_scaling_sweep("attention", [(8, 8)], 4, 3)


def test_sweep_rejects_few_reps_and_duplicates():
    with pytest.raises(ValueError):
        run_scaling_sweep("mix-shift", [(8, 8)], 8, 2)
    with pytest.raises(ValueError):
        run_scaling_sweep("mix-shift", [(8, 8), (8, 8)], 8, 3)


def test_small_mix_shift_sweep():
    recs = run_scaling_sweep("mix-shift", [(14, 14), (28, 28)], channels=10, reps=3)
    assert [(r.h, r.w) for r in recs] == [(14, 14), (28, 28)]
    assert all(r.median_s > 0 and r.reps == 3 and r.c == 10 for r in recs)
    assert recs[1].macs == 4 * recs[0].macs


def test_global_mix_macs_follow_formula():
    recs = run_scaling_sweep("global-mix", [(8, 8), (16, 16), (40, 40)], channels=6, reps=3)
    for r in recs:
        assert r.macs == complexity_formula(ComplexityQuery("global-mix", H=r.h, W=r.w, C=6))


def test_global_mix_tiling_is_a_dense_product():
    # with a tile covering all rows the runner is exactly W @ x
    from msmlp.bench import _global_mix_runner

    run, _ = _global_mix_runner(4, 5, 3, np.random.default_rng(0), np.float64, tile=7)
    out = run().copy()
    gen = np.random.default_rng(0)
    w = gen.standard_normal((7, 20)) / np.sqrt(20)
    x = gen.standard_normal((20, 3))
    full_w = np.vstack([w, w, w[:6]])
    np.testing.assert_allclose(out, full_w @ x, atol=1e-12)
