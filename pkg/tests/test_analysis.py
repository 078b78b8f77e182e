import math

import numpy as np
import pytest
from scipy import stats

from cvplab import analysis
from cvplab.analysis import (
    MEASURES,
    InterpolationPath,
    UndefinedCorrelation,
    correlate,
    correlation_of,
    count_changes,
    mcd_predict,
    n_pairs,
    oscillation,
    oscillation_suite,
    pearson,
    sigma_trajectory,
)
from cvplab.datagen import DataError, ShiftSpec, generate
from cvplab.model import ModelConfig, classify, extract_features, init_model
from cvplab.trainer import MetricsRecord, write_metrics


def line_model(W0, b0, W1, b1):
    """1-d feature, hand-set classifier; the extractor is irrelevant here."""
    W0 = np.asarray(W0, float)
    p = init_model(ModelConfig(input_dim=1, feature_dim=1, extractor_hidden=(), classifier_hidden=len(W0)))
    p.arrays.update({"cl.0.W": W0, "cl.0.b": np.asarray(b0, float),
                     "cl.1.W": np.asarray(W1, float), "cl.1.b": np.asarray(b1, float)})
    return p


def test_path_endpoints_exact():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=16), rng.normal(size=16)
    pts = InterpolationPath(a, b, 1000).points()
    assert pts.shape == (1000, 16)
    assert np.max(np.abs(pts[0] - a)) <= 1e-12 and np.max(np.abs(pts[-1] - b)) <= 1e-12
    with pytest.raises(ValueError):
        InterpolationPath(a, b, 1).points()
    with pytest.raises(ValueError):
        InterpolationPath(a, b[:3], 10).points()


def test_oscillation_k6_example():
    # class-0 logit |t - 0.5| - 0.2 gives A,A,B,B,A,A at t = 0, .2, ..., 1
    p = line_model([[1.0], [-1.0]], [-0.5, 0.5], [[1.0, 1.0], [0.0, 0.0]], [-0.2, 0.0])
    cls = classify(p.arrays, InterpolationPath(np.zeros(1), np.ones(1), 6).points()).data.argmax(1)
    assert cls.tolist() == [0, 0, 1, 1, 0, 0]
    assert oscillation(p, [0.0], [1.0], K=6) == pytest.approx(2 / 6, abs=1e-15)


def test_oscillation_upper_bound():
    # sawtooth 1 - 6t + 12 relu(t - 1/3) - 12 relu(t - 2/3) alternates at K = 4
    p = line_model([[1.0], [1.0], [1.0]], [0.0, -1 / 3, -2 / 3], [[-6.0, 12.0, -12.0], [0.0, 0.0, 0.0]], [1.0, 0.0])
    assert oscillation(p, [0.0], [1.0], K=4) == pytest.approx(3 / 4, abs=1e-15)


def test_oscillation_zero_inside_one_region():
    p = line_model([[1.0]], [0.0], [[1.0], [-1.0]], [5.0, 0.0])
    assert oscillation(p, [2.0], [9.0], K=1000) == 0.0


def test_oscillation_shape_error():
    p = init_model(ModelConfig())
    with pytest.raises(ValueError):
        oscillation(p, np.zeros(3), np.zeros(16))


def test_count_changes():
    assert count_changes(np.array([0, 0, 1, 1, 0, 0])) == 2
    assert count_changes(np.array([[0, 1], [1, 1]])) == 1


@pytest.fixture(scope="module")
def random_setup():
    p = init_model(ModelConfig(n_classes=3, seed=11))
    # make the classifier busy enough to produce boundaries along paths
    rng = np.random.default_rng(5)
    for k in ("cl.0.W", "cl.1.W"):
        p.arrays[k] *= 0.0
        p.arrays[k] += rng.normal(scale=2.0, size=p.arrays[k].shape)
    _, tgt = generate(ShiftSpec(base="blobs", n_classes=3, samples_per_class=20, noise=0.5), 2)
    return p, tgt


def test_oscillation_is_symmetric(random_setup):
    p, _ = random_setup
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(scale=3, size=(2, 16))
        assert oscillation(p, a, b, K=257) == oscillation(p, b, a, K=257)


def test_suite_matches_pairwise_sum(random_setup):
    p, tgt = random_setup
    suite = oscillation_suite(p, tgt, per_class=3, K=300, seed=4)
    idx = analysis.select_per_class(tgt.eval_labels(), 3, 3, 4)
    mu = extract_features(p.arrays, tgt.features[idx]).data
    pairwise = sum(oscillation(p, mu[i], mu[j], K=300) for i in range(9) for j in range(i + 1, 9))
    assert suite == pytest.approx(pairwise, abs=1e-12)
    assert suite > 0


def test_suite_invariant_under_temperature(random_setup):
    p, tgt = random_setup
    base = oscillation_suite(p, tgt, per_class=4, K=200)
    for T in (0.25, 3.7):
        q = p.copy()
        q.arrays["cl.1.W"] *= T
        q.arrays["cl.1.b"] *= T
        assert oscillation_suite(q, tgt, per_class=4, K=200) == base


def test_suite_chunking_does_not_matter(random_setup):
    p, tgt = random_setup
    assert (oscillation_suite(p, tgt, per_class=3, K=100, chunk_rows=100)
            == oscillation_suite(p, tgt, per_class=3, K=100))


def test_suite_combinatorics_and_errors(random_setup):
    p, tgt = random_setup
    assert n_pairs(3, 5) == 105
    assert n_pairs(1, 1) == 0
    assert n_pairs(2, 1) == 1
    with pytest.raises(DataError):
        oscillation_suite(p, tgt, per_class=21)
    with pytest.raises(DataError):
        oscillation_suite(p, tgt.with_labels(None))


def test_mcd_rate_zero_is_deterministic(random_setup):
    p, tgt = random_setup
    X = tgt.features[:10]
    mu, sd = mcd_predict(p, X, T=5, dropout_rate=0.0)
    logits = classify(p.arrays, extract_features(p.arrays, X).data).data
    probs = np.exp(logits - logits.max(1, keepdims=True))
    probs /= probs.sum(1, keepdims=True)
    assert np.array_equal(sd, np.zeros(10))
    assert np.max(np.abs(mu - probs.max(1))) < 1e-15


def test_mcd_reproducible_and_convergent(random_setup):
    p, tgt = random_setup
    x = tgt.features[0]
    a = mcd_predict(p, x, T=20, rng=np.random.default_rng(3))
    b = mcd_predict(p, x, T=20, rng=np.random.default_rng(3))
    assert a == b
    fresh = init_model(ModelConfig(n_classes=3, seed=1))
    reps = [mcd_predict(fresh, x, T=100, rng=np.random.default_rng(s))[0] for s in range(20)]
    assert np.std(reps) < 0.01


def test_mcd_spread_shrinks_like_inverse_sqrt_t(random_setup):
    # the busy classifier has large per-pass spread; quadrupling T should halve it
    p, tgt = random_setup
    x = tgt.features[0]
    spread = {T: np.std([mcd_predict(p, x, T=T, rng=np.random.default_rng(s))[0] for s in range(60)])
              for T in (25, 400)}
    assert 0.15 < spread[400] / spread[25] < 0.4


@pytest.mark.parametrize("kw", [dict(T=1), dict(dropout_rate=1.0), dict(dropout_rate=-0.1)])
def test_mcd_errors(random_setup, kw):
    p, tgt = random_setup
    with pytest.raises(ValueError):
        mcd_predict(p, tgt.features[:3], **kw)


def textbook_pearson(x, y):
    mx, my = math.fsum(x) / len(x), math.fsum(y) / len(y)
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pearson_matches_textbook():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(3, 400))
        x = rng.normal(size=n)
        y = 0.3 * x + rng.normal(size=n) * rng.uniform(0.1, 3)
        assert abs(pearson(x, y) - textbook_pearson(list(x), list(y))) < 1e-12
        assert abs(pearson(x, y) - stats.pearsonr(x, y)[0]) < 1e-12


def test_pearson_edge_cases():
    x = np.random.default_rng(0).normal(size=30)
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-15)
    assert pearson(x, -2 * x) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(UndefinedCorrelation):
        pearson(x, np.full(30, 4.0))
    c = correlation_of(x, np.full(30, 4.0))
    assert c.r is None and c.status.startswith("undefined")
    with pytest.raises(ValueError):
        pearson(x, x[:5])


def test_correlate_report(random_setup):
    p, tgt = random_setup
    rep = correlate(p, tgt, T=10, rng=np.random.default_rng(0))
    assert tuple(rep.correlations) == MEASURES
    assert all(c.r is not None and -1 <= c.r <= 1 for c in rep.correlations.values())
    unlabeled = correlate(p, tgt.with_labels(None), T=10, rng=np.random.default_rng(0))
    assert unlabeled.correlations["L_GT"].status == "labels unavailable"
    for name in MEASURES:
        if name != "L_GT":
            assert unlabeled.correlations[name].r == rep.correlations[name].r


def test_report_csv(random_setup, tmp_path):
    p, tgt = random_setup
    rep = correlate(p, tgt.with_labels(None), T=4, rng=np.random.default_rng(0))
    lines = rep.write_csv(tmp_path / "u.csv").read_text().splitlines()
    assert lines[0] == "index,sigma,L,L_GT,L_diff,MCD_mu,MCD_sigma"
    assert len(lines) == len(tgt) + 1
    assert lines[1].split(",")[3] == ""


def records(src, tgt):
    out = []
    for c, (s, t) in enumerate(zip(src, tgt)):
        out.append(MetricsRecord(c, 10 * c, 0.1, 0.1, 0.1, 0.3, s, t, 1.0, 0.5, 0.01))
    return out


def test_trajectory_constant_has_no_drop():
    nan = math.nan
    tr = sigma_trajectory(records([0.5] * 8, [nan] * 3 + [0.5] * 5))
    assert not tr.drop_detected and tr.drop_cycle is None
    assert tr.adapt_start == 3 and tr.pre_level == 0.5
    assert tr.final_gap == 0.0


def test_trajectory_step_drop():
    nan = math.nan
    src = [0.6, 0.6, 0.6, 0.6, 0.6, 0.3, 0.3, 0.6, 0.6, 0.6, 0.6, 0.6]
    tgt = [nan] * 4 + [0.6, 0.2, 0.25, 0.4, 0.5, 0.5, 0.5, 0.5]
    tr = sigma_trajectory(records(src, tgt))
    assert tr.drop_detected and tr.drop_cycle == 5
    assert tr.target_min_cycle == 5 and tr.target_min_fraction == pytest.approx(1 / 8)
    assert tr.recovery_detected
    assert tr.final_gap == pytest.approx(0.1)


def test_trajectory_from_csv_and_errors(tmp_path):
    nan = math.nan
    path = write_metrics(tmp_path / "m.csv", records([0.5, 0.5, 0.5], [nan, 0.3, 0.4]))
    tr = sigma_trajectory(path)
    assert tr.drop_cycle == 1
    with pytest.raises(DataError):
        sigma_trajectory([])
    with pytest.raises(DataError):
        sigma_trajectory(records([0.5, 0.5, 0.5], [nan, 0.3, nan]))
