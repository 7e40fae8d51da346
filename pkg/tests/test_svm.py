import math

import numpy as np
import pytest

from mtbo.errors import NonConvergence
from mtbo.svm import (
    CVConfig, Dataset, SVMHyperparams, cross_validate, cv_loss, dual_objective, fold_assignment, inverse_transform,
    predict, rbf_kernel, read_dataset_csv, standardize, train_svm, transform_loss, write_dataset_csv,
)
from oracles import kkt_violation, qp_oracle


def noise_dataset(seed, n=60, d=5):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, d)), np.tile([-1, 1], n // 2), tuple(f"c{t:03d}" for t in range(n)))


def separable_dataset(seed, n=40):
    rng = np.random.default_rng(seed)
    y = np.tile([-1, 1], n // 2)
    X = rng.normal(size=(n, 3))
    X[:, 0] += 6.0 * y
    return Dataset(X, y, tuple(f"s{t:03d}" for t in range(n)))


XOR = Dataset([[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]], [-1, -1, 1, 1])


def test_two_point_separated():
    data = Dataset([[0.0], [1.0]], [-1, 1])
    model = train_svm(data, SVMHyperparams(1e3, 1.0))
    np.testing.assert_array_equal(predict(model, data.features), [-1, 1])


def test_two_point_bias_zero_and_midpoint_tie():
    model = train_svm(Dataset([[0.0], [1.0]], [-1, 1]), SVMHyperparams(1e3, 1.0))
    assert model.bias == 0.0
    assert model.decision_function([[0.5]])[0] == 0.0
    assert predict(model, [[0.5]])[0] == 1


def test_two_point_alpha_matches_closed_form():
    # equal alphas, margin condition a (1 - k) = 1 with k = exp(-gamma)
    model = train_svm(Dataset([[0.0], [1.0]], [-1, 1]), SVMHyperparams(1e3, 1.0))
    np.testing.assert_allclose(model.alpha, 1 / (1 - math.exp(-1.0)), rtol=1e-3)


def test_xor_nearly_linear_kernel_has_no_margin():
    # a linear kernel cannot fit XOR; at gamma=1e-3 every alpha sits at C and
    # the decision values are of order C * gamma^2
    for C in (1e-3, 1.0, 1e3):
        model = train_svm(XOR, SVMHyperparams(C, 1e-3))
        np.testing.assert_allclose(model.alpha, C, rtol=1e-9)
        f = model.decision_function(XOR.features)
        assert np.abs(f).max() <= 2 * C * 1e-6
        oracle_alpha, _ = qp_oracle(rbf_kernel(XOR.features, XOR.features, 1e-3), XOR.labels.astype(float), C)
        np.testing.assert_allclose(model.alpha, oracle_alpha, rtol=1e-6)


def test_duplicated_dataset_same_decision_function():
    data = separable_dataset(1, 20)
    doubled = Dataset(np.vstack([data.features] * 2), np.concatenate([data.labels] * 2))
    hp = SVMHyperparams(1.0, 0.5)
    a, b = train_svm(data, hp), train_svm(doubled, hp)
    grid = np.random.default_rng(0).normal(size=(200, 3)) * 3
    np.testing.assert_allclose(a.decision_function(grid), b.decision_function(grid), atol=5e-3)
    np.testing.assert_array_equal(predict(a, data.features), predict(b, data.features))


def test_free_support_vector_predicts_own_label():
    data = noise_dataset(2, 30, 2)
    model = train_svm(data, SVMHyperparams(10.0, 1.0))
    free = (model.alpha > 1e-8) & (model.alpha < 10.0 - 1e-8)
    assert free.any()
    np.testing.assert_array_equal(predict(model, data.features[free]), data.labels[free])


def test_far_point_gets_sign_of_bias():
    data = noise_dataset(3, 20, 2)
    model = train_svm(data, SVMHyperparams(1.0, 1.0))
    far = np.array([[1e3, -1e3]])
    assert model.decision_function(far)[0] == model.bias
    assert predict(model, far)[0] == (1 if model.bias >= 0 else -1)


def test_dual_feasibility_and_kkt():
    for seed in range(5):
        data = noise_dataset(seed, 20, 3)
        C = 2.0
        model = train_svm(data, SVMHyperparams(C, 0.7))
        a = model.alpha
        assert a.min() >= 0 and a.max() <= C
        assert abs(a @ data.labels) < 1e-9
        K = rbf_kernel(data.features, data.features, 0.7)
        assert kkt_violation(a, K, data.labels.astype(float), C) < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_dual_objective_matches_qp_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    data = noise_dataset(100 + seed, 16, 2)
    C, gamma = 10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-1, 0.5)
    model = train_svm(data, SVMHyperparams(C, gamma))
    K = rbf_kernel(data.features, data.features, gamma)
    _, best = qp_oracle(K, data.labels.astype(float), C)
    assert dual_objective(model.alpha, K, data.labels.astype(float)) == pytest.approx(best, rel=1e-6)


def test_training_is_deterministic():
    data = noise_dataset(4, 40, 3)
    a, b = (train_svm(data, SVMHyperparams(3.0, 0.2)) for _ in range(2))
    np.testing.assert_array_equal(a.alpha, b.alpha)
    assert a.bias == b.bias


def test_iteration_cap_raises():
    with pytest.raises(NonConvergence):
        train_svm(noise_dataset(5, 40, 3), SVMHyperparams(1e3, 1e-3), max_iter=3)


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_svm(Dataset([[0.0], [1.0]], [1, 1]), SVMHyperparams(1.0, 1.0))


@pytest.mark.parametrize("C, gamma", [(1e-4, 1.0), (1.0, 2e3)])
def test_hyperparams_box(C, gamma):
    with pytest.raises(ValueError):
        SVMHyperparams(C, gamma)


def test_from_log10_corners():
    hp = SVMHyperparams.from_log10((-3.0, 3.0))
    assert hp.C == pytest.approx(1e-3) and hp.gamma == pytest.approx(1e3)


# ---------------------------------------------------------------- folds and CV


def test_folds_stratified_and_balanced():
    data = noise_dataset(6, 60)
    folds = fold_assignment(data, CVConfig(10, 3))
    for f in range(10):
        labs = data.labels[folds == f]
        assert labs.size == 6 and set(labs) == {-1, 1}


def test_folds_independent_of_row_order():
    data = noise_dataset(7, 40)
    perm = np.random.default_rng(0).permutation(40)
    shuffled = data.subset(perm)
    cv = CVConfig(5, 11)
    np.testing.assert_array_equal(fold_assignment(shuffled, cv), fold_assignment(data, cv)[perm])
    hp = SVMHyperparams(1.0, 0.1)
    assert cv_loss(shuffled, hp, cv) == cv_loss(data, hp, cv)


def test_folds_depend_on_seed():
    data = noise_dataset(8, 40)
    assert not np.array_equal(fold_assignment(data, CVConfig(5, 0)), fold_assignment(data, CVConfig(5, 1)))


def test_standardize_uses_training_statistics():
    train = np.array([[0.0, 5.0], [2.0, 5.0]])
    tr, other = standardize(train, np.array([[4.0, 6.0]]))
    np.testing.assert_allclose(tr, [[-1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(other, [[3.0, 1.0]])


def test_perfect_classifier_loss_zero():
    assert cv_loss(separable_dataset(9), SVMHyperparams(1.0, 0.1), CVConfig(5, 0)) == 0.0


def test_memorizing_kernel_near_prior_golden():
    data = noise_dataset(0)
    loss = cv_loss(data, SVMHyperparams(1e-2, 1e3), CVConfig(10, 7))
    assert abs(loss - 0.5) <= 0.15
    assert loss == 29 / 60  # golden
    assert cv_loss(data, SVMHyperparams(1e-2, 1e3), CVConfig(10, 7)) == loss


def test_nonconvergence_is_worst_case_loss(monkeypatch):
    import mtbo.svm as svm

    def failing(*args, **kwargs):
        raise NonConvergence("cap")

    monkeypatch.setattr(svm, "train_svm", failing)
    res = cross_validate(noise_dataset(0, 20), SVMHyperparams(1.0, 1.0), CVConfig(5, 0))
    assert res.loss == 1.0 and res.flags == ("NonConvergence",)


def test_dataset_csv_round_trip(tmp_path):
    data = noise_dataset(10, 10, 4)
    path = tmp_path / "d.csv"
    write_dataset_csv(path, data)
    back = read_dataset_csv(path)
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.case_ids == data.case_ids
    assert path.read_text().splitlines()[0] == "case_id,label,f0,f1,f2,f3"


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset([[0.0]], [0])
    with pytest.raises(ValueError):
        Dataset([[np.nan]], [1])
    with pytest.raises(ValueError):
        Dataset([[0.0], [1.0]], [1])


# ---------------------------------------------------------------- loss transform


@pytest.mark.parametrize("L, f", [(0.5, 0.0), (0.25, -1.0)])
def test_transform_examples(L, f):
    assert transform_loss(L) == pytest.approx(f, abs=1e-15)
    assert inverse_transform(f) == pytest.approx(L, abs=1e-15)


def test_transform_clamps_at_zero():
    # tan(pi * 0.001 - pi / 2) to 40 digits: -318.3088389855504...
    assert transform_loss(0.0) == pytest.approx(-318.30883898555044, rel=1e-12)
    assert transform_loss(1.0) == pytest.approx(318.30883898555044, rel=1e-12)
    assert inverse_transform(-1e300) == 1e-3 and inverse_transform(1e300) == 1 - 1e-3


def test_transform_round_trip_and_monotone():
    L = np.concatenate([np.linspace(1e-3, 1 - 1e-3, 10_000), [0.1804, 0.1884, 0.1984]])
    np.testing.assert_allclose(inverse_transform(transform_loss(L)), L, rtol=0, atol=1e-12)
    assert inverse_transform(transform_loss(0.1884)) == pytest.approx(0.1884, abs=1e-12)
    f = transform_loss(np.sort(L))
    assert np.all(np.diff(f) >= 0)
    assert np.all(np.diff(transform_loss(np.linspace(1e-3, 1 - 1e-3, 10_000))) > 0)
