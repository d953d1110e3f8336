import dataclasses

import numpy as np
import pytest
import scipy.special
import scipy.stats

from ordinalrd.balance import Interval, WeightScheme
from ordinalrd.dataset import Dataset
from ordinalrd.errors import DataError, ManifestError
from ordinalrd.estimate import augmented_ato, augmented_att, fit_outcome_model
from ordinalrd.pipeline import run_pipeline
from ordinalrd.probit import fit
from ordinalrd.simlab import (
    DgpConfig,
    OutcomeFunction,
    bootstrap_se,
    generate,
    monte_carlo,
    monte_carlo_sweep,
    true_estimand,
    truth_population,
)
from ordinalrd.tests.conftest import reference_config

# Wide enough to keep every unit once propensities are clamped.
EVERYONE = Interval(1e-12, 1 - 1e-12)


def single_covariate(**changes) -> DgpConfig:
    settings = dict(
        n=1000,
        beta=(1.0,),
        cutoffs=(0.0,),
        threshold_index=2,
        mu0=OutcomeFunction(terms=("x1",), coefficients=(0.0, 0.0)),
        mu1=OutcomeFunction(terms=("x1",), coefficients=(0.0, 1.0)),
        seed=3,
    )
    settings.update(changes)
    return DgpConfig(**settings)


def test_generate_is_deterministic(config):
    first, second = generate(config), generate(config)
    np.testing.assert_array_equal(first.dataset.covariates, second.dataset.covariates)
    np.testing.assert_array_equal(first.dataset.outcome, second.dataset.outcome)
    assert not np.array_equal(generate(config, seed=8).dataset.outcome, first.dataset.outcome)


def test_generated_outcomes_follow_treatment(config):
    sample = generate(config)
    treated = sample.dataset.treatment == 1
    np.testing.assert_array_equal(sample.dataset.outcome, np.where(treated, sample.truth.y1, sample.truth.y0))
    assert sample.dataset.ids[0] == "u0001"


def test_truth_is_not_part_of_the_dataset():
    names = {field.name for field in dataclasses.fields(Dataset)}
    assert not names & {"y0", "y1", "e", "truth"}


def test_categories_follow_the_cutoffs_under_a_null_index():
    config = reference_config(n=100_000, beta=(0.0, 0.0), seed=9)
    counts = generate(config).dataset.category_counts()
    expected = np.diff(np.concatenate([[0.0], scipy.special.ndtr(config.cutoffs), [1.0]])) * config.n
    assert scipy.stats.chisquare(counts, expected).pvalue > 1e-3


def test_empty_category_is_reported():
    config = single_covariate(n=10, beta=(0.0,), cutoffs=(-8.0, -7.999, 8.0), threshold_index=2)
    with pytest.raises(DataError, match="category frequencies"):
        generate(config)


def test_invalid_configurations():
    with pytest.raises(ManifestError):
        single_covariate(cutoffs=(1.0, 0.0))
    with pytest.raises(ManifestError):
        single_covariate(omit_from_propensity=("x9",))
    with pytest.raises(ManifestError):
        OutcomeFunction(terms=("x1",), coefficients=(1.0,))


def test_constant_effect_is_recovered_without_noise():
    config = reference_config(
        n=1000,
        noise_sd=0.0,
        mu1=OutcomeFunction(terms=("x1", "x2"), coefficients=(3.0, 2.0, -1.0)),
    )
    dataset = generate(config).dataset
    e_hat = fit(dataset).propensity(dataset).e_hat
    inside = Interval(0.1, 0.9).contains(e_hat)
    subsample, e = dataset.subset(inside), e_hat[inside]
    mu0 = fit_outcome_model(subsample, 0, ("x1", "x2")).fitted
    mu1 = fit_outcome_model(subsample, 1, ("x1", "x2")).fitted

    assert augmented_att(subsample.outcome, subsample.treatment, e, mu0) == pytest.approx(2.0, abs=1e-10)
    assert augmented_ato(subsample.outcome, subsample.treatment, e, mu0, mu1) == pytest.approx(2.0, abs=1e-10)


def test_true_estimands_of_a_linear_effect():
    config = single_covariate()
    assert true_estimand(config, WeightScheme.ATT) == pytest.approx(1 / np.sqrt(np.pi), abs=5e-3)
    assert true_estimand(config, WeightScheme.ATO) == pytest.approx(0.0, abs=5e-3)
    assert true_estimand(config, WeightScheme.NONE) == pytest.approx(0.0, abs=5e-3)
    assert true_estimand(config, WeightScheme.ATO, Interval(0.5, 0.99)) > 0.3


def test_true_estimand_is_deterministic():
    config = single_covariate()
    assert true_estimand(config, WeightScheme.ATT, draws=10_000) == true_estimand(config, WeightScheme.ATT, draws=10_000)


def test_monte_carlo_needs_two_replications(config):
    with pytest.raises(ManifestError):
        monte_carlo(config, config.pipeline_settings(), WeightScheme.ATT, 1)


def test_replications_can_be_split_and_concatenated():
    config = reference_config(n=500)
    settings = config.pipeline_settings(interval=Interval(0.1, 0.9))
    whole = monte_carlo(config, settings, WeightScheme.ATO, 4)
    head = monte_carlo(config, settings, WeightScheme.ATO, 2)
    tail = monte_carlo(config, settings, WeightScheme.ATO, 2, start=2)

    assert whole.records["index"].tolist() == [0, 1, 2, 3]
    np.testing.assert_array_equal(whole.records["tau"], np.concatenate([head.records["tau"], tail.records["tau"]]))
    assert whole.failures == 0
    assert whole.truth == head.truth


def test_results_do_not_depend_on_worker_count():
    config = reference_config(n=500)
    settings = config.pipeline_settings(interval=Interval(0.1, 0.9))
    serial = monte_carlo(config, settings, WeightScheme.ATT, 4, workers=1)
    parallel = monte_carlo(config, settings, WeightScheme.ATT, 4, workers=2)
    np.testing.assert_array_equal(serial.records["tau"], parallel.records["tau"])
    np.testing.assert_array_equal(serial.records["se"], parallel.records["se"])


def test_track_sees_every_replication():
    config = reference_config(n=500)
    seen = []

    def track(items):
        for item in items:
            seen.append(item.index)
            yield item

    monte_carlo(config, config.pipeline_settings(interval=Interval(0.1, 0.9)), WeightScheme.ATT, 3, track=track)
    assert seen == [0, 1, 2]


def test_summary():
    config = reference_config(n=500)
    report = monte_carlo(config, config.pipeline_settings(interval=Interval(0.1, 0.9)), WeightScheme.ATO, 3)
    summary = report.summary()
    assert summary["replications"] == 3
    assert summary["estimand"] == "ATO"
    assert 0.0 <= summary["coverage"] <= 1.0
    assert 0.0 <= report.pass_rate(0.10) <= 1.0


def test_sweep_runs_each_sample_size():
    config = reference_config()
    reports = monte_carlo_sweep(config, config.pipeline_settings(interval=Interval(0.1, 0.9)), WeightScheme.ATT, 2, [400, 600])
    assert list(reports) == [400, 600]
    assert reports[600].succeeded["n0"].sum() > reports[400].succeeded["n0"].sum()


def test_searched_intervals_are_compared_with_their_own_truth():
    # The effect 2 + 0.5 * x1 varies with the covariates, so the estimand depends on the interval.
    config = reference_config(n=2000)
    report = monte_carlo(config, config.pipeline_settings(), WeightScheme.ATT, 4)
    population = truth_population(config)

    for record in report.succeeded.itertuples():
        assert record.truth == population.estimand(WeightScheme.ATT, Interval(record.e_min, record.e_max))
    assert report.mean_bias == pytest.approx(float(np.mean(report.succeeded["tau"] - report.succeeded["truth"])))
    narrow = population.estimand(WeightScheme.ATT, Interval(0.2, 0.8))
    assert narrow != pytest.approx(population.estimand(WeightScheme.ATT), abs=0.02)


def test_fixed_interval_and_level_reach_the_report():
    config = reference_config(n=500)
    settings = config.pipeline_settings(interval=Interval(0.1, 0.9), level=0.80)
    report = monte_carlo(config, settings, WeightScheme.ATO, 3)

    assert (report.records["e_min"] == 0.1).all() and (report.records["e_max"] == 0.9).all()
    assert report.records["truth"].nunique() == 1
    assert report.truth == true_estimand(config, WeightScheme.ATO, Interval(0.1, 0.9))
    assert report.level == 0.80 and report.summary()["level"] == 0.80


def test_bootstrap_preconditions(config):
    dataset = generate(config).dataset
    with pytest.raises(ManifestError, match="100"):
        bootstrap_se(dataset, config.pipeline_settings(interval=Interval(0.1, 0.9)), WeightScheme.ATT, 99)
    with pytest.raises(ManifestError, match="fixed interval"):
        bootstrap_se(dataset, config.pipeline_settings(), WeightScheme.ATT, 100)


@pytest.mark.slow
def test_bootstrap_is_reproducible():
    config = reference_config(n=400)
    dataset = generate(config).dataset
    settings = config.pipeline_settings(interval=Interval(0.1, 0.9))
    first = bootstrap_se(dataset, settings, WeightScheme.ATT, 100, seed=5)
    second = bootstrap_se(dataset, settings, WeightScheme.ATT, 100, seed=5, workers=2)
    assert first.resamples == 100
    np.testing.assert_array_equal(first.estimates, second.estimates)
    assert first.se > 0


@pytest.mark.slow
@pytest.mark.parametrize("estimand", [WeightScheme.ATT, WeightScheme.ATO])
def test_sandwich_coverage_under_a_correct_design(estimand):
    config = reference_config(n=2000)
    report = monte_carlo(config, config.pipeline_settings(interval=Interval(0.1, 0.9)), estimand, 1000, workers=4)
    assert abs(report.mean_bias) < 0.1 * report.mc_sd
    assert report.mean_se == pytest.approx(report.mc_sd, rel=0.15)
    assert 0.92 <= report.coverage <= 0.975


@pytest.mark.slow
@pytest.mark.parametrize(
    "changes",
    [
        {"outcome_terms": ()},
        {"omit_from_propensity": ("x2",)},
    ],
)
def test_augmented_att_is_doubly_robust(changes):
    config = reference_config(n=2000, **changes)
    report = monte_carlo(config, config.pipeline_settings(interval=EVERYONE), WeightScheme.ATT, 500, workers=4)
    assert abs(report.mean_bias) < 0.1 * report.mc_sd


X1_SQUARED = OutcomeFunction(terms=("x1", "x2", "I(x1**2)"), coefficients=(3.0, 2.5, -1.0, 1.0))


@pytest.mark.slow
def test_augmented_ato_bias_vanishes_with_a_correct_propensity_model():
    # The outcome models leave out x1**2, the propensity model is correct.
    config = reference_config(mu1=X1_SQUARED, outcome_terms=("x1", "x2"))
    settings = config.pipeline_settings(interval=EVERYONE)
    reports = monte_carlo_sweep(config, settings, WeightScheme.ATO, 500, [500, 4000], workers=4)
    small, large = reports[500], reports[4000]
    assert abs(large.mean_bias) < 0.1 * large.mc_sd
    assert abs(large.mean_bias) < max(abs(small.mean_bias), 2 * small.mc_standard_error)


@pytest.mark.slow
def test_augmented_ato_needs_the_propensity_model():
    # Correct outcome models, x1 left out of the propensity model.
    config = reference_config(n=4000, mu1=X1_SQUARED, omit_from_propensity=("x1",))
    report = monte_carlo(config, config.pipeline_settings(interval=EVERYONE), WeightScheme.ATO, 500, workers=4)
    assert abs(report.mean_bias) > 2 * report.mc_standard_error


@pytest.mark.slow
def test_bootstrap_agrees_with_the_sandwich():
    config = reference_config(n=2000)
    settings = config.pipeline_settings(interval=Interval(0.1, 0.9))
    dataset = generate(config).dataset
    sandwich = run_pipeline(dataset, WeightScheme.ATO, settings).estimate.se
    bootstrap = bootstrap_se(dataset, settings, WeightScheme.ATO, 2000, workers=4)
    assert bootstrap.se == pytest.approx(sandwich, rel=0.15)


NO_EFFECT = OutcomeFunction(terms=("x1", "x2"), coefficients=(1.0, 2.0, -1.0))


@pytest.mark.slow
def test_falsification_rates():
    settings = reference_config().pipeline_settings(interval=Interval(0.1, 0.9))
    null = monte_carlo(reference_config(n=2000, mu1=NO_EFFECT), settings, WeightScheme.ATO, 200, workers=4)
    assert null.truth == pytest.approx(0.0, abs=1e-12)
    assert null.pass_rate(0.10) >= 0.85

    # A constant effect of 3.5 standard errors; the test has about 97% power at the 10% level.
    shift = 3.5 * null.mean_se
    effect = OutcomeFunction(terms=("x1", "x2"), coefficients=(1.0 + shift, 2.0, -1.0))
    injected = monte_carlo(reference_config(n=2000, mu1=effect), settings, WeightScheme.ATO, 200, workers=4)
    assert 1.0 - injected.pass_rate(0.10) >= 0.9
