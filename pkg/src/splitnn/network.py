"""Split-architecture dense networks: build, run, train, checkpoint.

A SplitNetwork routes each feature cluster into its own single-hidden-layer
branch. Hidden widths are apportioned proportionally to cluster sizes by
largest remainder. Two head layouts exist: one small head per branch (the
default; training averages the per-head losses and inference averages the
per-head predictions) and a single fused head over the concatenated hidden
layer. A clustering with k=1 reproduces the plain vanilla network exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, seeding
from .clustering import FeatureClustering, trivial_clustering
from .data import CLASSIFICATION, REGRESSION
from .errors import AllocationError, DivergenceError, ShapeMismatchError

RELU = "relu"
IDENTITY = "identity"
PER_BRANCH = "per_branch"
FUSED = "fused"

_ACT_CODE = {RELU: kernels.numpy_backend.ACT_RELU, IDENTITY: kernels.numpy_backend.ACT_IDENTITY}
_TASK_CODE = {
    CLASSIFICATION: kernels.numpy_backend.TASK_CLASSIFICATION,
    REGRESSION: kernels.numpy_backend.TASK_REGRESSION,
}
_HEAD_CODE = {PER_BRANCH: kernels.numpy_backend.HEAD_PER_BRANCH, FUSED: kernels.numpy_backend.HEAD_FUSED}


@dataclass
class DenseLayer:
    """Affine map plus activation; parameters must stay finite."""

    weights: np.ndarray  # out x in
    biases: np.ndarray  # out
    activation: str  # relu | identity

    def __call__(self, x):
        z = x @ self.weights.T + self.biases
        if self.activation == RELU:
            np.maximum(z, 0.0, out=z)
        return z


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 100
    epochs: int = 1000
    seed: int = 0
    total_hidden: int = 50
    curve_every: int = 1  # 0 = record only the final validation metric

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("invalid training configuration")


@dataclass
class SplitNetwork:
    """k branches (hidden layer each) plus per-branch or fused heads."""

    clustering: FeatureClustering
    branch_cols: tuple  # per-branch feature index arrays
    hidden: list  # k DenseLayers
    heads: list  # k DenseLayers (per_branch) or 1 (fused)
    task: str
    output_dim: int
    total_hidden: int
    head_mode: str = PER_BRANCH

    @property
    def k(self):
        return len(self.hidden)

    @property
    def hidden_widths(self):
        return [layer.weights.shape[0] for layer in self.hidden]

    def parameter_arrays(self):
        """All parameter arrays in a fixed traversal order."""
        out = []
        for layer in list(self.hidden) + list(self.heads):
            out.extend([layer.weights, layer.biases])
        return out

    def num_parameters(self):
        return sum(a.size for a in self.parameter_arrays())

    def copy(self):
        return SplitNetwork(
            clustering=self.clustering,
            branch_cols=tuple(c.copy() for c in self.branch_cols),
            hidden=[DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.hidden],
            heads=[DenseLayer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.heads],
            task=self.task,
            output_dim=self.output_dim,
            total_hidden=self.total_hidden,
            head_mode=self.head_mode,
        )

    def _kernel_args(self):
        w1s = [l.weights for l in self.hidden]
        b1s = [l.biases for l in self.hidden]
        w2s = [l.weights for l in self.heads]
        b2s = [l.biases for l in self.heads]
        act = _ACT_CODE[self.hidden[0].activation]
        return w1s, b1s, w2s, b2s, act, _TASK_CODE[self.task], _HEAD_CODE[self.head_mode]


def allocate_hidden(cluster_sizes, total_hidden):
    """Largest-remainder apportionment of hidden units, floor 1 per branch.

    Quotas are total_hidden * m_i / d; each branch starts at max(1,
    floor(quota)) and the remaining units go to branches in descending
    fractional-remainder order (ties to the smaller id). When the floor-1
    clamp overshoots the total, units are taken back in the reverse order
    from branches still above 1.
    """
    sizes = np.asarray(cluster_sizes, dtype=np.int64)
    k = len(sizes)
    total_hidden = int(total_hidden)
    if total_hidden < k:
        raise AllocationError(f"total_hidden={total_hidden} cannot cover {k} branches")
    d = int(sizes.sum())
    quotas = total_hidden * sizes / d
    floors = np.floor(quotas).astype(np.int64)
    widths = np.maximum(floors, 1)
    remainders = quotas - floors
    # descending remainder, ties by smaller id
    order = sorted(range(k), key=lambda i: (-remainders[i], i))
    leftover = total_hidden - int(widths.sum())
    pos = 0
    while leftover > 0:
        widths[order[pos % k]] += 1
        leftover -= 1
        pos += 1
    pos = k - 1
    while leftover < 0:
        i = order[pos % k]
        if widths[i] > 1:
            widths[i] -= 1
            leftover += 1
        pos -= 1
    return widths


def build_split_network(
    clustering: FeatureClustering,
    task,
    output_dim,
    total_hidden=50,
    seed=0,
    head_mode=PER_BRANCH,
    hidden_activation=RELU,
) -> SplitNetwork:
    """Construct a split network with Glorot-uniform weights, zero biases.

    Weight matrices are drawn from one seeded generator in a fixed order
    (branch 0 hidden, branch 0 head, branch 1 hidden, ...; fused mode
    draws all hiddens first, then the single head), so equal seeds give
    bit-identical parameters.
    """
    if task not in (CLASSIFICATION, REGRESSION):
        raise ValueError(f"unknown task {task!r}")
    widths = allocate_hidden(clustering.cluster_sizes, total_hidden)
    groups = clustering.feature_groups()
    rng = seeding.generator(seed, seeding.WEIGHT_INIT)

    def glorot(n_out, n_in):
        bound = math.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-bound, bound, size=(n_out, n_in))

    hidden, heads = [], []
    for i in range(clustering.k):
        m_i, h_i = len(groups[i]), int(widths[i])
        hidden.append(DenseLayer(glorot(h_i, m_i), np.zeros(h_i), hidden_activation))
        if head_mode == PER_BRANCH:
            heads.append(DenseLayer(glorot(output_dim, h_i), np.zeros(output_dim), IDENTITY))
    if head_mode == FUSED:
        heads.append(DenseLayer(glorot(output_dim, int(widths.sum())), np.zeros(output_dim), IDENTITY))
    elif head_mode != PER_BRANCH:
        raise ValueError(f"unknown head mode {head_mode!r}")
    return SplitNetwork(
        clustering=clustering,
        branch_cols=tuple(np.asarray(g, dtype=np.int64) for g in groups),
        hidden=hidden,
        heads=heads,
        task=task,
        output_dim=int(output_dim),
        total_hidden=int(total_hidden),
        head_mode=head_mode,
    )


def build_vanilla_network(d, task, output_dim, total_hidden=50, seed=0, hidden_activation=RELU):
    """Single 50-unit hidden layer, single head: a split of one."""
    return build_split_network(
        trivial_clustering(d), task, output_dim, total_hidden, seed,
        head_mode=PER_BRANCH, hidden_activation=hidden_activation,
    )


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def forward(net: SplitNetwork, batch):
    """Per-head outputs (#heads x B x output_dim) and the fused prediction.

    Classification fuses by averaging the per-branch softmax probability
    vectors (fused-head mode: the softmax of the single head); regression
    averages the per-branch outputs.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != len(net.clustering.assignment):
        raise ShapeMismatchError(
            f"batch has {batch.shape[-1]} columns, network expects {len(net.clustering.assignment)}"
        )
    hs = [net.hidden[i](batch[:, net.branch_cols[i]]) for i in range(net.k)]
    if net.head_mode == FUSED:
        outputs = [net.heads[0](np.concatenate(hs, axis=1))]
    else:
        outputs = [net.heads[i](hs[i]) for i in range(net.k)]
    stacked = np.stack(outputs)
    if net.task == CLASSIFICATION:
        fused = np.mean([_softmax(o) for o in outputs], axis=0)
    else:
        fused = stacked.mean(axis=0)
    return stacked, fused


def predict(net: SplitNetwork, batch):
    """Class indices (classification) or scalar targets (regression)."""
    _, fused = forward(net, batch)
    if net.task == CLASSIFICATION:
        return fused.argmax(axis=1)
    return fused[:, 0]


def joint_loss(head_outputs, labels, task):
    """Average per-head loss, every head supervised by the same labels.

    Cross-entropy (natural log) for classification, mean squared error
    for regression. With a single head this is exactly the vanilla loss.
    """
    losses = []
    for out in head_outputs:
        if task == CLASSIFICATION:
            p = out - out.max(axis=1, keepdims=True)
            lse = np.log(np.exp(p).sum(axis=1))
            losses.append(float(np.mean(lse - p[np.arange(len(labels)), labels])))
        else:
            err = out[:, 0] - labels
            losses.append(float(np.mean(err * err)))
    return float(np.mean(losses))


def network_loss(net: SplitNetwork, batch, labels):
    outputs, _ = forward(net, batch)
    return joint_loss(outputs, labels, net.task)


def backward_and_step(net: SplitNetwork, batch, labels, config: TrainConfig):
    """One in-place SGD step on a batch; returns the pre-update loss."""
    xcs = [np.ascontiguousarray(batch[:, cols]) for cols in net.branch_cols]
    y = _kernel_labels(net, labels)
    w1s, b1s, w2s, b2s, act, task, head = net._kernel_args()
    backend = kernels.get_backend()
    loss = backend.sgd_batch(xcs, y, w1s, b1s, w2s, b2s, act, task, head, config.learning_rate)
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}", epoch=None, batch=0)
    return loss


def _kernel_labels(net, labels):
    if net.task == CLASSIFICATION:
        return np.ascontiguousarray(labels, dtype=np.int64)
    return np.ascontiguousarray(labels, dtype=np.float64)


def gradient_check(net: SplitNetwork, batch, labels, epsilon=1e-5):
    """Worst relative error of analytic vs central-difference gradients."""
    if net.num_parameters() > 10_000:
        raise ValueError("gradient_check is for small networks (<= 1e4 parameters)")
    batch = np.asarray(batch, dtype=np.float64)
    xcs = [np.ascontiguousarray(batch[:, cols]) for cols in net.branch_cols]
    y = _kernel_labels(net, labels)
    w1s, b1s, w2s, b2s, act, task, head = net._kernel_args()
    _, gw1s, gb1s, gw2s, gb2s = kernels.numpy_backend.batch_gradients(
        xcs, y, w1s, b1s, w2s, b2s, act, task, head
    )
    analytic = gw1s + gb1s + gw2s + gb2s
    arrays = w1s + b1s + w2s + b2s

    worst = 0.0
    for arr, grad in zip(arrays, analytic):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.size):
            keep = flat[idx]
            flat[idx] = keep + epsilon
            up = network_loss(net, batch, labels)
            flat[idx] = keep - epsilon
            down = network_loss(net, batch, labels)
            flat[idx] = keep
            numeric = (up - down) / (2.0 * epsilon)
            err = abs(gflat[idx] - numeric) / max(abs(gflat[idx]), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


def random_gradient_check_suite(count=50, epsilon=1e-5, seed=0, max_width=16, max_batch=8):
    """Worst finite-difference error over random small split networks.

    Covers k in {1, 2, 4}, per-branch widths <= max_width, batches up to
    max_batch rows, both losses and both head layouts.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(count):
        k = int(rng.choice([1, 2, 4]))
        sizes = rng.integers(1, 4, size=k)
        d = int(sizes.sum())
        total_hidden = int(rng.integers(k, max_width + 1))
        assignment = np.repeat(np.arange(k), sizes)
        clustering = FeatureClustering(
            assignment=assignment,
            k=k,
            cluster_sizes=np.asarray(sizes, dtype=np.int64),
            threshold_fraction=0.5,
        )
        task = CLASSIFICATION if trial % 2 == 0 else REGRESSION
        output_dim = int(rng.integers(2, 5)) if task == CLASSIFICATION else 1
        head_mode = FUSED if trial % 4 == 3 else PER_BRANCH
        net = build_split_network(
            clustering, task, output_dim, total_hidden,
            seed=int(rng.integers(0, 2**31)), head_mode=head_mode,
        )
        b = int(rng.integers(1, max_batch + 1))
        batch = rng.standard_normal((b, d))
        if task == CLASSIFICATION:
            labels = rng.integers(0, output_dim, size=b)
        else:
            labels = rng.standard_normal(b)
        worst = max(worst, gradient_check(net, batch, labels, epsilon))
    return worst


@dataclass
class TrainingCurves:
    train_loss: list = field(default_factory=list)  # per-epoch mean batch loss
    val_metric: list = field(default_factory=list)  # (epoch, metric) samples


def evaluate(net: SplitNetwork, x, labels):
    """Accuracy for classification, RMSE for regression."""
    if net.task == CLASSIFICATION:
        return float(np.mean(predict(net, x) == labels))
    err = predict(net, x) - labels
    return float(np.sqrt(np.mean(err * err)))


def train_network(net: SplitNetwork, x, labels, config: TrainConfig, x_val=None, val_labels=None):
    """Run the full epoch loop in place; returns TrainingCurves.

    Each epoch shuffles rows with the config-seeded stream and sweeps
    batches of config.batch_size (final partial batch kept). Non-finite
    losses or parameters raise DivergenceError with epoch/batch context.
    """
    x = np.asarray(x, dtype=np.float64)
    xcs = [np.ascontiguousarray(x[:, cols]) for cols in net.branch_cols]
    y = _kernel_labels(net, labels)
    w1s, b1s, w2s, b2s, act, task, head = net._kernel_args()
    backend = kernels.get_backend()
    shuffle = seeding.generator(config.seed, seeding.EPOCH_SHUFFLE)
    curves = TrainingCurves()
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = np.ascontiguousarray(shuffle.permutation(n), dtype=np.int64)
        loss, bad_batch = backend.sgd_epoch(
            xcs, y, w1s, b1s, w2s, b2s, act, task, head,
            order, config.batch_size, config.learning_rate,
        )
        if bad_batch >= 0:
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}, batch {bad_batch}",
                epoch=epoch, batch=bad_batch,
            )
        if not all(np.isfinite(a).all() for a in w1s + b1s + w2s + b2s):
            raise DivergenceError(f"non-finite parameter after epoch {epoch}", epoch=epoch)
        curves.train_loss.append(loss)
        if (
            x_val is not None
            and config.curve_every > 0
            and (epoch % config.curve_every == 0 or epoch == config.epochs - 1)
        ):
            curves.val_metric.append((epoch, evaluate(net, x_val, val_labels)))
    return curves


def save_checkpoint(net: SplitNetwork, path):
    """Portable npz checkpoint; round-trips parameters bit-exactly."""
    meta = {
        "task": net.task,
        "output_dim": net.output_dim,
        "total_hidden": net.total_hidden,
        "head_mode": net.head_mode,
        "hidden_activation": net.hidden[0].activation,
        "k": net.k,
        "threshold_fraction": net.clustering.threshold_fraction,
    }
    arrays = {
        "assignment": net.clustering.assignment,
        "meta_json": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    }
    for i, layer in enumerate(net.hidden):
        arrays[f"hidden_w_{i}"] = layer.weights
        arrays[f"hidden_b_{i}"] = layer.biases
    for i, layer in enumerate(net.heads):
        arrays[f"head_w_{i}"] = layer.weights
        arrays[f"head_b_{i}"] = layer.biases
    np.savez(path, **arrays)


def load_checkpoint(path) -> SplitNetwork:
    with np.load(path) as bundle:
        meta = json.loads(bytes(bundle["meta_json"]).decode())
        assignment = bundle["assignment"]
        clustering = FeatureClustering(
            assignment=assignment,
            k=int(meta["k"]),
            cluster_sizes=np.bincount(assignment, minlength=int(meta["k"])),
            threshold_fraction=float(meta["threshold_fraction"]),
        )
        hidden = []
        heads = []
        for i in range(meta["k"]):
            hidden.append(
                DenseLayer(bundle[f"hidden_w_{i}"], bundle[f"hidden_b_{i}"], meta["hidden_activation"])
            )
        n_heads = 1 if meta["head_mode"] == FUSED else meta["k"]
        for i in range(n_heads):
            heads.append(DenseLayer(bundle[f"head_w_{i}"], bundle[f"head_b_{i}"], IDENTITY))
    groups = clustering.feature_groups()
    return SplitNetwork(
        clustering=clustering,
        branch_cols=tuple(np.asarray(g, dtype=np.int64) for g in groups),
        hidden=hidden,
        heads=heads,
        task=meta["task"],
        output_dim=int(meta["output_dim"]),
        total_hidden=int(meta["total_hidden"]),
        head_mode=meta["head_mode"],
    )
