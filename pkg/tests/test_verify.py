import csv
import math

import numpy as np
import pytest

from sageselect import fd_sketch, verify
from sageselect.data import synth_lowrank
from sageselect.errors import ScaleGuardError
from sageselect.numerics import frobenius_norm_sq
from sageselect.pipeline import ArraySource, SageConfig, run_sage
from sageselect.scoring import ScoreTable


def test_exact_gram_examples(rng):
    assert np.array_equal(verify.exact_gram(np.eye(4)), np.eye(4))
    r = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(verify.exact_gram(r), np.outer(r[0], r[0]))
    g = rng.standard_normal((50, 20))
    assert np.trace(verify.exact_gram(g)) == pytest.approx(frobenius_norm_sq(g), rel=1e-10)


def test_scale_guard():
    with pytest.raises(ScaleGuardError):
        verify.exact_gram(np.zeros((3, 513)))
    with pytest.raises(ScaleGuardError):
        verify.naive_scores(np.zeros((5001, 4)), fd_sketch.FrozenSketch(np.eye(2, 4), 1))


def test_tail_energy_examples():
    g = synth_lowrank(120, 15, 3, 0.0, seed=2)
    energy = frobenius_norm_sq(g)
    assert verify.tail_energy(g, 3) <= 1e-9 * energy
    assert verify.tail_energy(g, 0) == pytest.approx(energy, rel=1e-10)
    noisy = synth_lowrank(120, 15, 3, 0.3, seed=2)
    assert 0.0 < verify.tail_energy(noisy, 3) <= frobenius_norm_sq(noisy)


def test_tail_energy_matches_svd(rng):
    g = rng.standard_normal((40, 12))
    s = np.linalg.svd(g, compute_uv=False)
    for k in (0, 2, 5, 12):
        assert verify.tail_energy(g, k) == pytest.approx(float(np.sum(s[k:] ** 2)), rel=1e-10, abs=1e-10)


def test_sandwich_exact_for_short_stream(rng):
    g = rng.standard_normal((5, 20))
    report = verify.check_psd_sandwich(g, fd_sketch.sketch_matrix(g, 8), 8)
    assert abs(report.min_eig_diff) <= report.tol
    assert abs(report.max_eig_diff) <= report.tol
    assert report.pass_ and report.k_max == 4


def test_sandwich_orthogonal_case():
    g = np.eye(4, 6)
    report = verify.check_psd_sandwich(g, fd_sketch.sketch_matrix(g, 2), 2)
    assert report.max_eig_diff == pytest.approx(1.0, abs=1e-12)
    assert report.bounds[1] == pytest.approx(3.0)
    assert report.pass_


def test_sandwich_detects_a_bad_sketch(rng):
    g = rng.standard_normal((60, 10))
    too_big = fd_sketch.FrozenSketch(2.0 * g[:4], 60)
    assert not verify.check_psd_sandwich(g, too_big, 4).pass_
    # For a rank-one stream the k=1 bound is zero, so dropping it all fails.
    rank_one = np.outer(rng.standard_normal(60), rng.standard_normal(10))
    lossy = fd_sketch.FrozenSketch(np.zeros((1, 10)), 60)
    assert not verify.check_psd_sandwich(rank_one, lossy, 4).pass_


def test_sandwich_reports_larger_k_without_asserting(rng):
    g = rng.standard_normal((300, 20))
    report = verify.check_psd_sandwich(g, fd_sketch.sketch_matrix(g, 8), 8)
    assert sorted(report.bounds) == list(range(5))
    assert sorted(report.extra_bounds) == list(range(5, 9))


def test_naive_single_and_zero():
    fs = fd_sketch.FrozenSketch(np.eye(2, 3), 1)
    one = verify.naive_scores(np.array([[1.0, 2.0, 5.0]]), fs)
    assert one.scores.alpha[0] == pytest.approx(1.0)
    zero = verify.naive_scores(np.zeros((4, 3)), fs)
    assert np.array_equal(zero.scores.alpha, np.zeros(4))
    assert zero.degenerate


def test_naive_top_k_order():
    assert verify.naive_top_k([0.1, 0.9, 0.9, -1.0], 2).tolist() == [1, 2]
    assert verify.naive_top_k([0.5, 0.5], 5).tolist() == [0, 1]


def _table(z_norm, alpha):
    n = len(alpha)
    return ScoreTable(np.arange(n), np.asarray(z_norm, float), np.asarray(alpha, float))


def test_lemma_single_and_equal():
    one = verify.check_lemma1(_table([2.0], [0.7]), [0])
    assert one.pass_ and one.xi == 0.7 and one.lhs == pytest.approx(one.rhs, rel=1e-15)
    same = verify.check_lemma1(_table([1.0, 3.0, 0.5], [0.4, 0.4, 0.4]), [0, 1, 2])
    assert same.pass_ and abs(same.lhs - same.rhs) <= 1e-10 * same.rhs


def test_lemma_not_applicable_with_nonpositive_alpha():
    check = verify.check_lemma1(_table([1.0, 1.0], [0.5, -0.1]), [0, 1])
    assert not check.applicable and check.pass_
    assert not verify.check_corollary(_table([1.0], [0.0]), [0], np.ones((1, 2))).applicable


def test_lemma_identity_catches_inconsistent_scores():
    z = np.array([[3.0, 4.0]])
    u = np.array([1.0, 0.0])
    good = verify.check_lemma1(_table([5.0], [0.6]), [0], z, u)
    bad = verify.check_lemma1(_table([5.0], [0.7]), [0], z, u)
    assert good.pass_ and good.identity_error <= 1e-15
    assert not bad.pass_


def test_corollary_examples():
    z = np.tile([1.0, 2.0, 2.0], (4, 1))
    check = verify.check_corollary(_table([3.0] * 4, [1.0] * 4), [0, 1, 2, 3], z)
    assert check.pass_ and check.lhs == pytest.approx(check.rhs, rel=1e-15)
    single = verify.check_corollary(_table([3.0], [0.25]), [0], z[:1])
    assert single.pass_ and single.xi == 0.25


def test_lemma_and_corollary_on_sage_run(rng):
    g = synth_lowrank(800, 40, 5, 0.2, seed=21) + 0.3
    report = run_sage(ArraySource(g), SageConfig(ell=8, budget_fraction=0.1))
    naive = verify.naive_scores(g, report.sketch)
    lemma = verify.check_lemma1(report.scores, report.selection.indices, naive.z, naive.u)
    corollary = verify.check_corollary(report.scores, report.selection.indices, naive.z)
    assert lemma.applicable and lemma.pass_
    assert corollary.applicable and corollary.pass_


def test_write_verdicts(tmp_path):
    path = tmp_path / "v.csv"
    verify.write_verdicts(path, [("psd_lower", "", -1e-12, -1e-8, True), ("fd_upper", "k=1", 2.0, 1.0, False)])
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["check", "param", "value", "bound", "pass"]
    assert rows[2] == ["fd_upper", "k=1", "2.0", "1.0", "false"]


def test_suite_cases_cover_the_ranges():
    cases = verify.suite_cases(100, seed=0)
    assert len(cases) == 100
    assert all(100 <= c.n <= 5000 and 16 <= c.d <= 128 and c.ell <= c.d for c in cases)
    assert {c.ell for c in cases} == {4, 8, 16, 32}
    assert {c.kind for c in cases} == {"lowrank", "gaussian"}
    assert cases == verify.suite_cases(100, seed=0)
    assert np.array_equal(cases[0].matrix(), cases[0].matrix())


def test_small_suite_passes():
    for case in verify.suite_cases(8, seed=5):
        g = case.matrix()
        report = verify.check_psd_sandwich(g, fd_sketch.sketch_matrix(g, case.ell), case.ell)
        assert report.pass_, case
        assert report.k_max == min(math.ceil(case.ell / 2), min(g.shape))
