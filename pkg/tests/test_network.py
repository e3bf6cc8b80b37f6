import numpy as np
import pytest

from splitnn.clustering import FeatureClustering, trivial_clustering
from splitnn.data import CLASSIFICATION, REGRESSION
from splitnn.errors import AllocationError, DivergenceError, ShapeMismatchError
from splitnn.kernels import numpy_backend
from splitnn.network import (
    FUSED,
    IDENTITY,
    PER_BRANCH,
    TrainConfig,
    allocate_hidden,
    backward_and_step,
    build_split_network,
    build_vanilla_network,
    evaluate,
    forward,
    gradient_check,
    joint_loss,
    load_checkpoint,
    network_loss,
    predict,
    random_gradient_check_suite,
    save_checkpoint,
    train_network,
)

from conftest import make_dataset


def clustering_of(sizes):
    sizes = np.asarray(sizes, dtype=np.int64)
    return FeatureClustering(
        assignment=np.repeat(np.arange(len(sizes)), sizes),
        k=len(sizes),
        cluster_sizes=sizes,
        threshold_fraction=0.5,
    )


# ---- hidden-unit apportionment ----------------------------------------------

def test_allocate_symmetric():
    assert list(allocate_hidden([4, 4], 50)) == [25, 25]


def test_allocate_three_singletons():
    # quotas 16.67 each; two leftover units go to the smallest ids
    assert list(allocate_hidden([1, 1, 1], 50)) == [17, 17, 16]


def test_allocate_largest_remainder():
    # quotas (43.75, 6.25): leftover unit goes to the larger remainder
    assert list(allocate_hidden([7, 1], 50)) == [44, 6]


def test_allocate_floor_one_overshoot():
    # floors (0, 0, 2) clamp to (1, 1, 2) overshooting total=3; the unit
    # comes back from the only branch above 1
    assert list(allocate_hidden([1, 1, 98], 3)) == [1, 1, 1]


def test_allocate_sum_invariant():
    rng = np.random.default_rng(0)
    for _ in range(200):
        k = int(rng.integers(1, 12))
        sizes = rng.integers(1, 30, size=k)
        total = int(rng.integers(k, 80))
        widths = allocate_hidden(sizes, total)
        assert widths.sum() == total and widths.min() >= 1


def test_allocate_infeasible():
    with pytest.raises(AllocationError):
        allocate_hidden([1, 1, 1], 2)


# ---- construction ----------------------------------------------------

def test_build_k1_matches_vanilla():
    a = build_split_network(trivial_clustering(6), CLASSIFICATION, 2, 50, seed=5)
    b = build_vanilla_network(6, CLASSIFICATION, 2, 50, seed=5)
    assert a.hidden_widths == b.hidden_widths == [50]
    for x, y in zip(a.parameter_arrays(), b.parameter_arrays()):
        assert np.array_equal(x, y)


def test_build_deterministic():
    cl = clustering_of([2, 3])
    a = build_split_network(cl, CLASSIFICATION, 3, 20, seed=9)
    b = build_split_network(cl, CLASSIFICATION, 3, 20, seed=9)
    for x, y in zip(a.parameter_arrays(), b.parameter_arrays()):
        assert np.array_equal(x, y)


def test_build_glorot_bounds_and_zero_biases():
    cl = clustering_of([3, 4])
    net = build_split_network(cl, REGRESSION, 1, 30, seed=0)
    for layer in net.hidden + net.heads:
        n_out, n_in = layer.weights.shape
        bound = np.sqrt(6.0 / (n_in + n_out))
        assert np.abs(layer.weights).max() <= bound
        assert (layer.biases == 0).all()


def test_build_widths_sum(data_dir):
    cl = clustering_of([2, 2, 1, 2, 1])
    net = build_split_network(cl, CLASSIFICATION, 2, 50, seed=1)
    assert sum(net.hidden_widths) == 50 and net.k == 5


# ---- forward / loss ----------------------------------------------------

def test_forward_zero_weights_uniform_softmax():
    net = build_split_network(clustering_of([2, 2]), CLASSIFICATION, 3, 10, seed=0)
    for layer in net.hidden + net.heads:
        layer.weights[:] = 0.0
    outputs, fused = forward(net, np.random.default_rng(0).standard_normal((5, 4)))
    assert np.allclose(fused, 1.0 / 3.0)
    assert outputs.shape == (2, 5, 3)


def test_forward_k1_fusion_is_identity():
    net = build_vanilla_network(4, REGRESSION, 1, 10, seed=3)
    x = np.random.default_rng(1).standard_normal((6, 4))
    outputs, fused = forward(net, x)
    assert np.array_equal(outputs[0], fused)


def test_forward_two_branch_hand_average():
    net = build_split_network(clustering_of([1, 1]), REGRESSION, 1, 4, seed=2)
    x = np.random.default_rng(2).standard_normal((3, 2))
    _, fused = forward(net, x)
    by_hand = []
    for i in range(2):
        h = np.maximum(x[:, [i]] @ net.hidden[i].weights.T + net.hidden[i].biases, 0.0)
        by_hand.append(h @ net.heads[i].weights.T + net.heads[i].biases)
    assert np.allclose(fused, (by_hand[0] + by_hand[1]) / 2.0)


def test_forward_shape_error():
    net = build_vanilla_network(4, REGRESSION, 1, 10, seed=0)
    with pytest.raises(ShapeMismatchError):
        forward(net, np.zeros((3, 5)))


def test_joint_loss_uniform_logits():
    labels = np.array([0, 1, 2])
    outputs = [np.zeros((3, 4))]
    assert joint_loss(outputs, labels, CLASSIFICATION) == pytest.approx(np.log(4))


def test_joint_loss_perfect_regression():
    y = np.array([1.0, -2.0])
    outputs = [y[:, None], y[:, None]]
    assert joint_loss(outputs, y, REGRESSION) == 0.0


def test_joint_loss_averages_branches():
    # losses 0.4 and 0.8 -> 0.6: single-output regression with crafted errors
    y = np.zeros(1)
    out_a = np.array([[np.sqrt(0.4)]])
    out_b = np.array([[np.sqrt(0.8)]])
    assert joint_loss([out_a, out_b], y, REGRESSION) == pytest.approx(0.6)


def test_joint_loss_k1_equals_vanilla_loss():
    net = build_vanilla_network(4, CLASSIFICATION, 2, 8, seed=0)
    x = np.random.default_rng(3).standard_normal((7, 4))
    y = np.random.default_rng(4).integers(0, 2, 7)
    outputs, _ = forward(net, x)
    assert joint_loss(list(outputs), y, CLASSIFICATION) == network_loss(net, x, y)


def test_softmax_rows_sum_to_one():
    net = build_split_network(clustering_of([2, 3]), CLASSIFICATION, 4, 12, seed=8)
    x = np.random.default_rng(5).standard_normal((9, 5)) * 3
    outputs, fused = forward(net, x)
    assert np.allclose(fused.sum(axis=1), 1.0, atol=1e-9)


# ---- SGD step ----------------------------------------------------

def test_zero_learning_rate_null_step():
    net = build_split_network(clustering_of([2, 2]), CLASSIFICATION, 2, 8, seed=1)
    x = np.random.default_rng(0).standard_normal((5, 4))
    y = np.array([0, 1, 0, 1, 0])
    before = [a.copy() for a in net.parameter_arrays()]
    xcs = [np.ascontiguousarray(x[:, cols]) for cols in net.branch_cols]
    w1s, b1s, w2s, b2s, act, task, head = net._kernel_args()
    numpy_backend.sgd_batch(xcs, y, w1s, b1s, w2s, b2s, act, task, head, lr=0.0)
    for a, b in zip(before, net.parameter_arrays()):
        assert np.array_equal(a, b)


def test_single_weight_linear_regression_step():
    # identity hidden fixed at 1.0, head weight w=0: one step on (x=1, y=1)
    # with lr=0.1 must move w to 0.2 (gradient of (y - wx)^2 is -2)
    net = build_split_network(
        trivial_clustering(2), REGRESSION, 1, 1, seed=0, hidden_activation=IDENTITY
    )
    net.hidden[0].weights[:] = np.array([[1.0, 0.0]])
    net.hidden[0].biases[:] = 0.0
    net.heads[0].weights[:] = 0.0
    net.heads[0].biases[:] = 0.0
    x = np.array([[1.0, 0.0]])
    y = np.array([1.0])
    loss = backward_and_step(net, x, y, TrainConfig(learning_rate=0.1, seed=0))
    assert loss == pytest.approx(1.0)  # pre-update loss (0 - 1)^2
    assert net.heads[0].weights[0, 0] == pytest.approx(0.2)
    assert net.hidden[0].weights[0, 0] == pytest.approx(1.0)  # dW1 = 0 since w was 0


def test_smooth_network_loss_decreases():
    rng = np.random.default_rng(11)
    for trial in range(5):
        net = build_split_network(
            clustering_of([2, 2]), REGRESSION, 1, 8, seed=trial, hidden_activation=IDENTITY
        )
        x = rng.standard_normal((16, 4))
        y = rng.standard_normal(16)
        before = network_loss(net, x, y)
        backward_and_step(net, x, y, TrainConfig(learning_rate=1e-4, seed=0))
        assert network_loss(net, x, y) < before


def test_branch_isolation():
    net = build_split_network(clustering_of([2, 3]), CLASSIFICATION, 2, 10, seed=4)
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 5))
    base, _ = forward(net, x)
    x2 = x.copy()
    x2[:, :2] += 10.0  # cluster 0 columns only
    perturbed, _ = forward(net, x2)
    assert not np.allclose(base[0], perturbed[0])
    assert np.array_equal(base[1], perturbed[1])


def test_training_determinism_bit_identical(small_classification):
    from splitnn.data import fit_column_stats, impute_and_normalize

    stats = fit_column_stats(small_classification, np.arange(80))
    z = impute_and_normalize(small_classification, stats)
    params = []
    curves = []
    for run in range(2):
        net = build_split_network(clustering_of([3, 3]), CLASSIFICATION, 2, 16, seed=21)
        c = train_network(net, z, small_classification.labels,
                          TrainConfig(epochs=40, batch_size=32, seed=21))
        params.append([a.copy() for a in net.parameter_arrays()])
        curves.append(c.train_loss)
    assert curves[0] == curves[1]
    for a, b in zip(*params):
        assert np.array_equal(a, b)


def test_divergence_error_carries_context(small_regression):
    from splitnn.data import fit_column_stats, impute_and_normalize

    stats = fit_column_stats(small_regression, np.arange(80))
    z = impute_and_normalize(small_regression, stats)
    net = build_split_network(clustering_of([3, 3]), REGRESSION, 1, 10, seed=0)
    with pytest.raises(DivergenceError) as err:
        train_network(net, z, small_regression.labels,
                      TrainConfig(learning_rate=1e6, epochs=5, batch_size=16, seed=0))
    assert err.value.epoch is not None


# ---- gradient checking ----------------------------------------------------

def test_gradient_check_linear_mse_nearly_exact():
    net = build_split_network(
        clustering_of([2, 2]), REGRESSION, 1, 6, seed=13, hidden_activation=IDENTITY
    )
    rng = np.random.default_rng(13)
    err = gradient_check(net, rng.standard_normal((6, 4)), rng.standard_normal(6))
    assert err < 1e-9  # quadratic loss: central differences are exact


def test_gradient_check_relu_network():
    net = build_split_network(clustering_of([2, 3]), CLASSIFICATION, 3, 10, seed=17)
    rng = np.random.default_rng(17)
    x = rng.standard_normal((6, 5))
    y = rng.integers(0, 3, 6)
    assert gradient_check(net, x, y) < 1e-4


def test_gradient_check_detects_corruption():
    # a gradient off by 10% must be flagged well above the pass threshold
    net = build_split_network(clustering_of([2, 2]), REGRESSION, 1, 8, seed=19)
    rng = np.random.default_rng(19)
    x = rng.standard_normal((5, 4))
    y = rng.standard_normal(5)
    xcs = [np.ascontiguousarray(x[:, cols]) for cols in net.branch_cols]
    w1s, b1s, w2s, b2s, act, task, head = net._kernel_args()
    _, gw1s, _, _, _ = numpy_backend.batch_gradients(xcs, y, w1s, b1s, w2s, b2s, act, task, head)
    target = net.hidden[0].weights
    grad = gw1s[0] * 1.10
    eps = 1e-5
    worst = 0.0
    for idx in np.ndindex(target.shape):
        keep = target[idx]
        target[idx] = keep + eps
        up = network_loss(net, x, y)
        target[idx] = keep - eps
        down = network_loss(net, x, y)
        target[idx] = keep
        numeric = (up - down) / (2 * eps)
        worst = max(worst, abs(grad[idx] - numeric) / max(abs(grad[idx]), abs(numeric), 1e-8))
    assert worst > 0.05


def test_gradient_suite_both_losses_and_heads():
    assert random_gradient_check_suite(count=12, seed=5) < 1e-4


def test_gradient_check_rejects_big_networks():
    net = build_vanilla_network(100, CLASSIFICATION, 10, 120, seed=0)
    with pytest.raises(ValueError, match="small networks"):
        gradient_check(net, np.zeros((2, 100)), np.zeros(2, dtype=np.int64))


# ---- fused head mode ----------------------------------------------------

def test_fused_head_forward_shapes():
    net = build_split_network(clustering_of([2, 2]), CLASSIFICATION, 2, 10, seed=3, head_mode=FUSED)
    assert len(net.heads) == 1
    x = np.random.default_rng(0).standard_normal((4, 4))
    outputs, fused = forward(net, x)
    assert outputs.shape == (1, 4, 2)
    assert np.allclose(fused.sum(axis=1), 1.0)


def test_fused_gradients():
    net = build_split_network(clustering_of([2, 3]), REGRESSION, 1, 9, seed=23, head_mode=FUSED)
    rng = np.random.default_rng(23)
    assert gradient_check(net, rng.standard_normal((5, 5)), rng.standard_normal(5)) < 1e-4


# ---- checkpoints ----------------------------------------------------

@pytest.mark.parametrize("head_mode", [PER_BRANCH, FUSED])
def test_checkpoint_round_trip_bit_exact(tmp_path, head_mode):
    net = build_split_network(
        clustering_of([2, 1, 3]), CLASSIFICATION, 3, 14, seed=31, head_mode=head_mode
    )
    x = np.random.default_rng(1).standard_normal((20, 6))
    y = np.random.default_rng(2).integers(0, 3, 20)
    train_network(net, x, y, TrainConfig(epochs=5, batch_size=8, seed=1))
    path = tmp_path / "model.npz"
    save_checkpoint(net, path)
    loaded = load_checkpoint(path)
    assert loaded.task == net.task and loaded.head_mode == net.head_mode
    assert np.array_equal(loaded.clustering.assignment, net.clustering.assignment)
    for a, b in zip(net.parameter_arrays(), loaded.parameter_arrays()):
        assert np.array_equal(a, b) and a.dtype == b.dtype
    xq = np.random.default_rng(3).standard_normal((4, 6))
    assert np.array_equal(predict(net, xq), predict(loaded, xq))


def test_evaluate_metrics():
    net = build_vanilla_network(4, REGRESSION, 1, 6, seed=0)
    x = np.zeros((3, 4))
    preds = predict(net, x)
    rmse = evaluate(net, x, preds)  # perfect targets -> rmse 0
    assert rmse == 0.0
