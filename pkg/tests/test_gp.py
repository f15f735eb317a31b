"""GP regression of transitions and the Jacobian law at an operating point."""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayeslqr.distributions import unvec, vec
from bayeslqr.gp import (
    DatasetParseError,
    GpPosterior,
    SeKernel,
    TransitionDataset,
    fit,
    linearize,
    predict,
    process_noise_estimate,
)


def _dense_se(x1, x2, sf2, ls):
    # explicit double loop, independent of the vectorized kernel
    out = np.empty((len(x1), len(x2)))
    for a, p in enumerate(x1):
        for b, q in enumerate(x2):
            out[a, b] = sf2 * np.exp(-0.5 * np.sum(((p - q) / ls) ** 2))
    return out


def _dense_posterior(x, y, sf2, ls, s2):
    """Posterior mean and covariance functions via an explicit Gram inverse."""
    k_inv = np.linalg.inv(_dense_se(x, x, sf2, ls) + s2 * np.eye(len(x)))

    def mean(q):
        return (_dense_se(np.atleast_2d(q), x, sf2, ls) @ k_inv @ y)[0]

    def cov(p, q):
        kp = _dense_se(np.atleast_2d(p), x, sf2, ls)
        kq = _dense_se(np.atleast_2d(q), x, sf2, ls)
        return (_dense_se(np.atleast_2d(p), np.atleast_2d(q), sf2, ls) - kp @ k_inv @ kq.T)[0, 0]

    return mean, cov


def _random_posterior(rng, d_x=2, d_u=1, n=15, noise=None):
    d = d_x + d_u
    x = rng.uniform(-1, 1, (n, d))
    y = np.sin(x @ rng.standard_normal((d, d_x)))
    kernel = SeKernel(rng.uniform(0.5, 2.0), rng.uniform(0.5, 1.5, d))
    noise = rng.uniform(1e-3, 1e-2, d_x) if noise is None else noise
    return fit(TransitionDataset(x, y), kernel, noise)


# --- kernel ----------------------------------------------------------------------

def test_kernel_diagonal_and_symmetry():
    rng = np.random.default_rng(0)
    k = SeKernel(1.7, [0.5, 2.0, 1.0])
    x = rng.standard_normal((30, 3))
    gram = k(x, x)
    np.testing.assert_allclose(np.diag(gram), 1.7)
    np.testing.assert_allclose(gram, gram.T, atol=1e-15)
    assert np.linalg.eigvalsh(gram)[0] >= -1e-10 * np.trace(gram)
    np.testing.assert_allclose(gram, _dense_se(x, x, 1.7, k.lengthscales), rtol=1e-12)


def test_kernel_rejects_bad_hyperparameters():
    with pytest.raises(ValueError):
        SeKernel(0.0, [1.0])
    with pytest.raises(ValueError):
        SeKernel(1.0, [1.0, -1.0])


def test_kernel_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    k = SeKernel(1.3, [0.7, 1.1])
    q, x = rng.standard_normal(2), rng.standard_normal((5, 2))
    h = 1e-6
    fd = np.stack([(k(q + h * e, x) - k(q - h * e, x))[0] / (2 * h) for e in np.eye(2)])
    np.testing.assert_allclose(k.grad(q, x), fd, atol=1e-8)


# --- fitting and prediction ------------------------------------------------------

def test_single_point_interpolation():
    q0, y0 = np.array([[0.3, -0.2]]), np.array([[1.5]])
    post = fit(TransitionDataset(q0, y0), SeKernel(1.0, [1.0, 1.0]), [1e-12])
    mean, _ = predict(post, q0[0])
    assert mean[0] == pytest.approx(1.5, abs=1e-6)


def test_empty_data_is_prior():
    post = fit(TransitionDataset.empty(2, 1), SeKernel(2.5, [1.0, 1.0, 1.0]), [1e-3, 1e-3])
    mean, var = predict(post, [0.1, 0.2, 0.3])
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(var, 2.5)


def test_predict_matches_dense_inverse_oracle():
    rng = np.random.default_rng(2)
    x = rng.uniform(-2, 2, (20, 2))
    y = np.column_stack([np.sin(x[:, 0]) + 0.1 * rng.standard_normal(20)])
    post = fit(TransitionDataset(x, y), SeKernel(1.2, [0.8, 1.3]), [0.01])
    mean_fn, cov_fn = _dense_posterior(x, y, 1.2, np.array([0.8, 1.3]), 0.01)
    for q in rng.uniform(-2, 2, (10, 2)):
        m, v = predict(post, q)
        assert m[0] == pytest.approx(mean_fn(q)[0], abs=1e-8)
        assert v[0] == pytest.approx(cov_fn(q, q), abs=1e-8)


def test_variance_smaller_at_data_than_far_away():
    post = _random_posterior(np.random.default_rng(3))
    _, v_near = predict(post, post.dataset.inputs[0])
    _, v_far = predict(post, np.full(3, 10.0))
    assert np.all(v_near <= v_far)


def test_predict_rejects_wrong_dimension():
    post = _random_posterior(np.random.default_rng(3))
    with pytest.raises(ValueError):
        predict(post, [0.0, 0.0])


def test_noise_validation():
    data = TransitionDataset(np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        fit(data, SeKernel(1.0, [1.0, 1.0]), [0.0])
    with pytest.raises(ValueError):
        fit(data, SeKernel(1.0, [1.0, 1.0]), [1e-3, 1e-3])


def test_jitter_retry_on_duplicate_inputs():
    x = np.zeros((4, 2))
    post = fit(TransitionDataset(x, np.ones((4, 1))), SeKernel(1.0, [1.0, 1.0]), [1e-300])
    assert post.jittered


# --- Jacobian law ------------------------------------------------------------------

def test_linearize_prior_closed_form():
    kernel = SeKernel(2.0, [0.5, 1.0, 2.0])
    law = linearize(fit(TransitionDataset.empty(2, 1), kernel, [1e-3, 1e-3]), np.zeros(3))
    np.testing.assert_array_equal(law.mean, np.zeros((2, 3)))
    prior = 2.0 * np.diag(1 / np.array([0.5, 1.0, 2.0]) ** 2)
    np.testing.assert_array_equal(law.covariance[0::2, 0::2], prior)
    np.testing.assert_array_equal(law.covariance[1::2, 1::2], prior)
    np.testing.assert_array_equal(law.covariance[0::2, 1::2], 0.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_jacobian_mean_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    post = _random_posterior(rng)
    q_star = rng.uniform(-0.5, 0.5, 3)
    h = 1e-4
    fd = np.column_stack([(predict(post, q_star + h * e)[0] - predict(post, q_star - h * e)[0]) / (2 * h)
                          for e in np.eye(3)])
    assert np.max(np.abs(linearize(post, q_star).mean - fd)) <= 1e-5


def test_jacobian_covariance_matches_dense_oracle():
    # Cov(df/dq_a, df/dq_b) is the mixed second derivative of the posterior covariance
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (12, 2))
    y = np.sin(x[:, :1])
    ls = np.array([0.9, 1.2])
    post = fit(TransitionDataset(x, y), SeKernel(1.1, ls), [1e-2])
    _, cov_fn = _dense_posterior(x, y, 1.1, ls, 1e-2)
    q = np.array([0.2, -0.1])
    h = 1e-3
    e = np.eye(2) * h
    oracle = np.empty((2, 2))
    for a in range(2):
        for b in range(2):
            oracle[a, b] = (cov_fn(q + e[a], q + e[b]) - cov_fn(q + e[a], q - e[b])
                            - cov_fn(q - e[a], q + e[b]) + cov_fn(q - e[a], q - e[b])) / (4 * h * h)
    np.testing.assert_allclose(linearize(post, q).covariance, oracle, atol=1e-5)


def test_row_blocks_are_psd_and_interleaved():
    post = _random_posterior(np.random.default_rng(5), noise=np.array([1e-3, 5e-3]))
    law = linearize(post, np.zeros(3))
    _, covs = post.jacobian_moments(np.zeros(3))
    for i, c in enumerate(covs):
        assert np.linalg.eigvalsh(c)[0] >= -1e-10 * np.trace(c)
        # entries of row i of S sit at vec positions i, i + d_x, ...
        np.testing.assert_array_equal(law.covariance[i::2, i::2], c)
    assert law.kron_row_cov is None


def test_equal_noise_gives_kronecker_factors():
    post = _random_posterior(np.random.default_rng(6), noise=np.array([1e-3, 1e-3]))
    law = linearize(post, np.zeros(3))
    np.testing.assert_array_equal(law.kron_row_cov, np.eye(2))
    np.testing.assert_allclose(np.kron(law.kron_col_cov, law.kron_row_cov), law.covariance)


def test_sampled_jacobian_rows_follow_vec_convention():
    post = _random_posterior(np.random.default_rng(7), noise=np.array([1e-3, 5e-3]))
    law = linearize(post, np.zeros(3))
    draws = law.sample(np.random.default_rng(0), 40_000)
    _, covs = post.jacobian_moments(np.zeros(3))
    emp_row1 = np.cov((draws[:, 1, :] - law.mean[1]).T)
    assert np.linalg.norm(emp_row1 - covs[1]) / np.linalg.norm(covs[1]) < 0.05
    np.testing.assert_array_equal(unvec(vec(law.mean), 2), law.mean)


def test_jacobian_covariance_contracts_with_nested_data():
    rng = np.random.default_rng(8)
    a_true, b_true = np.array([[0.9, 0.1], [0.0, 0.8]]), np.array([[0.0], [1.0]])
    x = rng.normal(0, 0.3, (40, 2))
    u = rng.normal(0, 0.3, (40, 1))
    y = x @ a_true.T + u @ b_true.T
    q = np.hstack([x, u])
    kernel = SeKernel(1.0, [1.0, 1.0, 1.0])
    traces = [np.trace(linearize(fit(TransitionDataset(q[:n], y[:n]), kernel, [1e-3, 1e-3]), np.zeros(3)).covariance)
              for n in (0, 5, 10, 20, 40)]
    assert np.all(np.diff(traces) <= 1e-12)


def test_delta_target_adds_identity():
    post = _random_posterior(np.random.default_rng(9))
    delta = GpPosterior(TransitionDataset(post.dataset.inputs, post.dataset.targets + post.dataset.inputs[:, :2]),
                        post.kernel, post.noise_variances, target="delta")
    np.testing.assert_allclose(linearize(delta, np.zeros(3)).mean,
                               linearize(post, np.zeros(3)).mean + np.eye(2, 3), atol=1e-10)


def test_process_noise_estimate():
    post = fit(TransitionDataset.empty(3, 1), SeKernel(1.0, np.ones(4)), [1e-3] * 3)
    np.testing.assert_array_equal(process_noise_estimate(post), 1e-3 * np.eye(3))
    post = fit(TransitionDataset.empty(1, 1), SeKernel(1.0, np.ones(2)), [0.25])
    np.testing.assert_array_equal(process_noise_estimate(post), [[0.25]])


# --- persistence and parsing --------------------------------------------------------

def test_posterior_round_trip(tmp_path):
    post = _random_posterior(np.random.default_rng(10))
    back = GpPosterior.from_dict(post.to_dict())
    np.testing.assert_array_equal(back.process_noise_estimate(), post.process_noise_estimate())
    np.testing.assert_array_equal(linearize(back, np.zeros(3)).covariance, linearize(post, np.zeros(3)).covariance)
    (tmp_path / "data.csv").write_text(post.dataset.to_csv())
    ref = GpPosterior.from_dict(post.to_dict(dataset_ref="data.csv"), base_dir=tmp_path)
    np.testing.assert_array_equal(ref.dataset.inputs, post.dataset.inputs)


def test_dataset_csv_round_trip():
    data = _random_posterior(np.random.default_rng(11)).dataset
    text = data.to_csv()
    assert text.splitlines()[0] == "q_1,q_2,q_3,y_1,y_2"
    back = TransitionDataset.from_csv(text)
    np.testing.assert_array_equal(back.inputs, data.inputs)
    np.testing.assert_array_equal(back.targets, data.targets)


@pytest.mark.parametrize(
    "text,line",
    [
        ("", 1),
        ("a,b\n1,2\n", 1),
        ("q_1,y_1\n1,2\n", 1),
        ("q_1,q_2,y_1\n1,2,3\n4,5\n", 3),
        ("q_1,q_2,y_1\n1,2,3\n4,x,6\n", 3),
        ("q_1,q_2,y_1\nnan,2,3\n", 2),
    ],
)
def test_dataset_csv_errors_report_line(text, line):
    with pytest.raises(DatasetParseError) as info:
        TransitionDataset.from_csv(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_dataset_load_json(tmp_path):
    data = TransitionDataset(np.ones((2, 3)), np.zeros((2, 2)))
    path = tmp_path / "d.json"
    path.write_text(json.dumps(data.to_dict()))
    back = TransitionDataset.load(path)
    np.testing.assert_array_equal(back.inputs, data.inputs)
    path.write_text("{\n  bad")
    with pytest.raises(DatasetParseError):
        TransitionDataset.load(path)
