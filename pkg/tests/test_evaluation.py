import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ivae.data import DataBatch, synth_trimodal
from ivae.evaluation import (LogisticProbe, MetricReport, aggregate_error, coherence, corrected_ttest,
                             error_rate, latent_classification, modality_probe_input, nrmse,
                             reconstruction_errors, train_probes)
from ivae.models import MixtureVAE


def test_nrmse_examples():
    assert nrmse([0.0, 2.0], [1.0, 1.0]) == pytest.approx(0.5 * math.sqrt(2) / 2, abs=1e-15)
    assert nrmse([0.0, 2.0], [1.0, 1.0]) == pytest.approx(0.35355, abs=1e-5)
    assert nrmse([1.0, 4.0, 2.0], [1.0, 4.0, 2.0]) == 0.0
    with pytest.raises(ValueError, match="error_rate"):
        nrmse([3.0, 3.0], [1.0, 2.0])
    assert nrmse([0.0, 2.0, 9.0], [1.0, 1.0, 0.0], mask=[True, True, False]) == pytest.approx(0.35355, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.01, 1e3))
def test_nrmse_scale_and_permutation_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    x, xh = rng.standard_normal(20), rng.standard_normal(20)
    base = nrmse(x, xh)
    assert nrmse(scale * x, scale * xh) == pytest.approx(base, rel=1e-10)
    p = rng.permutation(20)
    assert nrmse(x[p], xh[p]) == pytest.approx(base, rel=1e-12)


def test_error_rate_and_aggregate():
    assert error_rate([1, 2, 3], [1, 2, 3]) == 0.0
    assert error_rate([0, 1, 2, 3], [0, 1, 2, 0]) == 0.25
    assert aggregate_error([0.2, 0.0, 0.1]) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        error_rate([1], [1], mask=[False])


def test_reconstruction_errors_on_original_scale():
    from ivae.data import Preprocessor, tabular_schema
    schema = tabular_schema(["r", "c"], ["normal", "categorical"], [None, 3])
    raw = np.array([[0.0, 5.0], [2.0, 7.0], [4.0, 9.0]])
    pre = Preprocessor(["normal", "categorical"]).fit(raw)
    truth = DataBatch.from_table(pre.transform(raw))
    recon = [pre.transform(np.array([[1.0, 5.0], [1.0, 7.0], [4.0, 5.0]]))[:, [0]],
             np.array([[0.0], [1.0], [0.0]])]
    err = reconstruction_errors(schema, truth, recon, pre)
    assert err["r"] == pytest.approx(math.sqrt(2) / (3 * 4))
    assert err["c"] == pytest.approx(1 / 3)


# ---------------------------------------------------------------------------
# corrected t-test


def t4_sf(t):
    """Upper tail of Student's t with 4 degrees of freedom (closed form)."""
    u = t / math.sqrt(4 + t * t)
    return 0.5 - 0.5 * u * (1.5 - 0.5 * u * u)


def test_corrected_ttest_hand_example():
    d = [0.02, 0.03, 0.01, 0.04, 0.02]
    mean = sum(d) / 5
    var = sum((x - mean) ** 2 for x in d) / 4
    t_ref = mean / math.sqrt(var * (1 / 5 + 2 / 7))
    assert t_ref == pytest.approx(3.0203, abs=1e-4)
    t, p = corrected_ttest(d, n_train=7, n_test=2)
    assert abs(t - t_ref) < 1e-9
    assert abs(p - t4_sf(t_ref)) < 1e-9


def test_corrected_ttest_degenerate():
    assert corrected_ttest([0.0] * 4, 70, 20) == (0.0, 0.5)
    assert corrected_ttest([1.0] * 5, 7, 2) == (math.inf, 0.0)
    assert corrected_ttest([-1.0] * 3, 7, 2) == (-math.inf, 1.0)
    with pytest.raises(ValueError):
        corrected_ttest([1.0], 7, 2)


def test_corrected_ttest_reduces_to_paired_t():
    from scipy import stats
    d = np.random.default_rng(0).normal(0.1, 1, 12)
    t, p = corrected_ttest(d, n_train=10 ** 12, n_test=1)
    ref = stats.ttest_1samp(d, 0.0, alternative="greater")
    assert t == pytest.approx(ref.statistic, rel=1e-6)
    assert p == pytest.approx(ref.pvalue, rel=1e-5)


# ---------------------------------------------------------------------------
# probes, coherence, latent classification


@pytest.fixture(scope="module")
def trimodal():
    train, schema = synth_trimodal(0, 3000, 10)
    test, _ = synth_trimodal(1, 2000, 10)
    return train, test, schema


def test_probe_sanity_gate(trimodal):
    train, test, schema = trimodal
    probes = train_probes(schema, train, 10)
    acc = [p.score(modality_probe_input(schema, d, test.values[d]), test.labels) for d, p in enumerate(probes)]
    assert acc[0] >= 0.95 and acc[1] >= 0.95
    # T carries 5% label noise, so the best possible probe matches the label agreement exactly
    assert acc[2] == pytest.approx(np.mean(test.values[2][:, 0] == test.labels))


def test_probe_errors_and_state_round_trip(trimodal):
    train, test, schema = trimodal
    with pytest.raises(RuntimeError):
        LogisticProbe(10).predict(np.zeros((1, 3)))
    p = LogisticProbe(10, epochs=20).fit(train.values[0], train.labels)
    q = LogisticProbe.from_state(10, p.state())
    np.testing.assert_array_equal(p.predict(test.values[0]), q.predict(test.values[0]))
    with pytest.raises(ValueError):
        train_probes(schema, DataBatch(train.values, train.masks), 10)


def test_chance_level_for_shuffled_labels(trimodal):
    train, test, schema = trimodal
    rng = np.random.default_rng(0)
    # predictions carry no information about the shuffled labels
    p = LogisticProbe(10).fit(train.values[0], train.labels)
    acc = p.score(test.values[0], rng.permutation(test.labels))
    assert abs(acc - 0.1) < 3 * math.sqrt(0.1 * 0.9 / test.n)


def test_coherence_table_rows(trimodal):
    train, test, schema = trimodal
    probes = train_probes(schema, train, 10, epochs=30)
    m = MixtureVAE(schema, "mmvae", hidden=8)
    table = coherence(m, test.subset(np.arange(300)), probes)
    assert len(table.rows) == 4 * 3
    kinds = [r["kind"] for r in table.rows]
    assert kinds.count("self") == 3 and kinds.count("cross") == 6 and kinds.count("reconstruction") == 3
    assert set(table.summary()) == {"self", "cross", "reconstruction"}
    assert all(0 <= r["accuracy"] <= 1 for r in table.rows)
    assert table.value("M", "S") == next(r["accuracy"] for r in table.rows
                                         if r["evidence"] == "M" and r["target"] == "S")
    with pytest.raises(RuntimeError):
        coherence(m, test, [LogisticProbe(10)] * 3)


class TiedModel:
    """Three experts sharing one deterministic encoder."""

    experts = [(0,), (1,), (2,)]

    def label(self, a):
        return "ABC"[a[0]]

    def latents(self, batch, expert, rng=None):
        return batch.values[0][:, :4]


def test_weight_tied_latents_self_equals_cross(trimodal):
    train, test, _ = trimodal
    out = latent_classification(TiedModel(), train, test, 10, epochs=50)
    assert out["self"] == out["cross"]
    assert len(out["table"]) == 9


def test_metric_report_files(tmp_path):
    r = MetricReport()
    r.add("error", 0.25, modality="a")
    r.add("coherence", 0.5, evidence="M", target="S")
    r.summary = {"aggregate": 0.1}
    c, j = r.write(tmp_path)
    rows = list(csv.DictReader(c.open()))
    assert rows[0]["metric"] == "error" and float(rows[0]["value"]) == 0.25
    assert rows[1]["evidence"] == "M" and rows[0]["evidence"] == ""
    assert json.loads(j.read_text()) == {"aggregate": 0.1}
