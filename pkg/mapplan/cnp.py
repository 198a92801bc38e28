"""Conditional Neural Process for occupancy prediction, written directly against numpy."""

import logging
import math
import struct

import numpy as np
import toml
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from mapplan.exceptions import ModelError, TrainingDivergedError
from mapplan.models import Cell, TrainConfig
from mapplan.worldmap import (
    OccupancyGrid,
    QuerySet,
    build_query,
    extract_frontiers,
    sample_free_poses,
    simulate_lidar,
)

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"CNPW1\n"
PROB_CLAMP = 1e-7
CONTEXT_CAP = 4096


class MlpParams(BaseModel):
    """Weights (out x in) and biases of a ReLU multilayer perceptron.

    Args:
        weights: one matrix per layer.
        biases: one vector per layer.
        output_activation: "linear" or "sigmoid", applied after the last layer.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_activation: str = "linear"

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """(out, in) shape of every layer."""
        return [(int(w.shape[0]), int(w.shape[1])) for w in self.weights]

    @property
    def activations(self) -> list[str]:
        """Activation tag of every layer."""
        return ["relu"] * (len(self.weights) - 1) + [self.output_activation]

    def check(self) -> None:
        """Raise `ModelError` unless layers chain and every value is finite."""
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ModelError("weights and biases must pair up")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ModelError(f"layer {layer} has weight {w.shape} and bias {b.shape}")
            if layer and w.shape[1] != self.weights[layer - 1].shape[0]:
                raise ModelError(f"layer {layer} input {w.shape[1]} does not match previous output")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ModelError(f"layer {layer} holds non-finite values")


class CnpModel(BaseModel):
    """Encoder, mean aggregation and decoder.

    Args:
        encoder: maps (x, y, occupancy) to an `embed_dim` representation.
        decoder: maps (x, y, r) to an occupancy logit.
        embed_dim: size of the aggregated representation r.
        max_context: context rows used at inference before uniform subsampling.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    encoder: MlpParams
    decoder: MlpParams
    embed_dim: int
    max_context: int = Field(default=CONTEXT_CAP, ge=1)

    @classmethod
    def create(
        cls,
        embed_dim: int = 256,
        hidden: int = 256,
        n_layers: int = 4,
        seed: int = 0,
        dtype: type = np.float32,
    ) -> "CnpModel":
        """Build a model with He-style uniform initialization.

        Args:
            embed_dim: representation size.
            hidden: width of hidden layers.
            n_layers: weight layers in each network.
            seed: initialization seed.
            dtype: parameter dtype.
        """
        rng = np.random.default_rng(seed)

        def mlp(sizes: list[int], output_activation: str) -> MlpParams:
            weights, biases = [], []
            for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
                limit = np.sqrt(6.0 / fan_in)
                weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(dtype))
                biases.append(np.zeros(fan_out, dtype=dtype))
            return MlpParams(weights=weights, biases=biases, output_activation=output_activation)

        encoder = mlp([3] + [hidden] * (n_layers - 1) + [embed_dim], "linear")
        decoder = mlp([2 + embed_dim] + [hidden] * (n_layers - 1) + [1], "sigmoid")
        model = cls(encoder=encoder, decoder=decoder, embed_dim=embed_dim)
        model.check()
        return model

    @property
    def dtype(self) -> np.dtype:
        """Parameter dtype."""
        return self.encoder.weights[0].dtype

    def parameters(self) -> list[NDArray]:
        """All parameter arrays in declaration order: encoder then decoder, weight before bias per layer."""
        params = []
        for mlp in (self.encoder, self.decoder):
            for w, b in zip(mlp.weights, mlp.biases):
                params.extend([w, b])
        return params

    def with_parameters(self, params: list[NDArray]) -> "CnpModel":
        """Return a model of the same architecture holding `params`."""
        n_enc = len(self.encoder.weights)
        enc, dec = params[: 2 * n_enc], params[2 * n_enc :]
        return CnpModel(
            encoder=MlpParams(weights=enc[0::2], biases=enc[1::2], output_activation=self.encoder.output_activation),
            decoder=MlpParams(weights=dec[0::2], biases=dec[1::2], output_activation=self.decoder.output_activation),
            embed_dim=self.embed_dim,
            max_context=self.max_context,
        )

    def check(self) -> None:
        """Raise `ModelError` unless the encoder and decoder fit together."""
        self.encoder.check()
        self.decoder.check()
        if self.encoder.shapes[0][1] != 3:
            raise ModelError(f"encoder expects 3 inputs, has {self.encoder.shapes[0][1]}")
        if self.encoder.shapes[-1][0] != self.embed_dim:
            raise ModelError(f"encoder output {self.encoder.shapes[-1][0]} != embed_dim {self.embed_dim}")
        if self.decoder.shapes[0][1] != 2 + self.embed_dim:
            raise ModelError(f"decoder expects {self.decoder.shapes[0][1]} inputs, not {2 + self.embed_dim}")
        if self.decoder.shapes[-1][0] != 1:
            raise ModelError("decoder must emit one value")


class TrainingExample(BaseModel):
    """One (context, targets, labels) triple.

    Args:
        context: (c, 3) relative x, relative y, occupancy.
        targets: (t, 2) relative coordinates.
        labels: (t,) true occupancy in {0, 1}.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    context: np.ndarray
    targets: np.ndarray
    labels: np.ndarray


class AdamState(BaseModel):
    """First and second moment estimates for adaptive-moment gradient descent."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = Field(default=0)

    @classmethod
    def zeros_like(cls, params: list[NDArray]) -> "AdamState":
        """Start from zero moments."""
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])

    def update(self, params: list[NDArray], grads: list[NDArray], cfg: TrainConfig) -> None:
        """Apply one bias-corrected step to `params` in place.

        Args:
            params: parameter arrays, modified in place.
            grads: gradients matching `params`.
            cfg: learning rate and moment decays.
        """
        self.step += 1
        correction1 = 1.0 - cfg.beta1**self.step
        correction2 = 1.0 - cfg.beta2**self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p -= cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_epsilon)


def _forward(mlp: MlpParams, x: NDArray) -> tuple[NDArray, tuple[list[NDArray], list[NDArray]]]:
    """Run the MLP up to the last linear layer, keeping what backprop needs."""
    inputs, pre = [], []
    h = x
    last = len(mlp.weights) - 1
    for layer, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0) if layer < last else z
    return h, (inputs, pre)


def _backward(
    mlp: MlpParams, cache: tuple[list[NDArray], list[NDArray]], grad_out: NDArray
) -> tuple[list[NDArray], list[NDArray], NDArray]:
    """Backpropagate a gradient of the last linear output to parameters and inputs."""
    inputs, pre = cache
    last = len(mlp.weights) - 1
    grad_w: list[NDArray] = [np.empty(0)] * len(mlp.weights)
    grad_b: list[NDArray] = [np.empty(0)] * len(mlp.weights)
    g = grad_out
    for layer in range(last, -1, -1):
        if layer < last:
            g = g * (pre[layer] > 0)
        grad_w[layer] = g.T @ inputs[layer]
        grad_b[layer] = g.sum(axis=0)
        g = g @ mlp.weights[layer]
    return grad_w, grad_b, g


def mean_representation(representations: NDArray, embed_dim: int, dtype: np.dtype) -> NDArray:
    """Mean over context rows; the zero vector for an empty context.

    Columns are summed exactly with `math.fsum`, so the mean is bit-identical under any reordering of the rows
    and when every row is duplicated.
    """
    if len(representations) == 0:
        return np.zeros(embed_dim, dtype=dtype)
    sums = [math.fsum(column) for column in representations.astype(np.float64).T.tolist()]
    return (np.array(sums) / len(representations)).astype(dtype)


def _logits(model: CnpModel, context: NDArray, targets: NDArray) -> NDArray:
    representations, _ = _forward(model.encoder, context.astype(model.dtype).reshape(-1, 3))
    r = mean_representation(representations, model.embed_dim, model.dtype)
    targets = targets.astype(model.dtype).reshape(-1, 2)
    decoder_in = np.concatenate([targets, np.broadcast_to(r, (len(targets), model.embed_dim))], axis=1)
    out, _ = _forward(model.decoder, decoder_in)
    return out[:, 0]


def predict_arrays(model: CnpModel, context: NDArray, targets: NDArray) -> NDArray:
    """Occupancy probabilities for `targets` given `context` rows of (x, y, occupancy)."""
    if len(targets) == 0:
        return np.zeros(0)
    if context.ndim != 2 or (len(context) and context.shape[1] != 3):
        raise ModelError(f"context must have 3 columns, got shape {context.shape}")
    if targets.ndim != 2 or targets.shape[1] != 2:
        raise ModelError(f"targets must have 2 columns, got shape {targets.shape}")
    return expit(_logits(model, context, targets).astype(np.float64))


def predict(model: CnpModel, query: QuerySet) -> NDArray:
    """Predict occupancy for every target of a query; an empty context aggregates to the zero vector.

    Context beyond `model.max_context` rows is uniformly subsampled with a seed derived from its size.
    """
    model.check()
    context = query.context
    if len(context) > model.max_context:
        keep = np.random.default_rng(len(context)).choice(len(context), size=model.max_context, replace=False)
        context = context[np.sort(keep)]
    return predict_arrays(model, context, query.targets)


def nll_loss(phi: NDArray, y: NDArray) -> float:
    """Mean Bernoulli negative log-likelihood with probabilities clamped to [1e-7, 1 - 1e-7]."""
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if phi.shape != y.shape:
        raise ValueError(f"phi has shape {phi.shape} but labels have shape {y.shape}")
    if phi.size == 0:
        raise ValueError("nll_loss needs at least one target")
    p = np.clip(phi, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def loss_and_grads(model: CnpModel, batch: list[TrainingExample]) -> tuple[float, list[NDArray]]:
    """Mean batch NLL and its gradient with respect to `model.parameters()`.

    Args:
        model: current parameters.
        batch: examples whose losses are averaged.

    Returns:
        loss and gradients in parameter declaration order
    """
    n_enc = len(model.encoder.weights)
    grads = [np.zeros_like(p) for p in model.parameters()]
    total = 0.0
    scale = 1.0 / len(batch)
    for example in batch:
        context = example.context.astype(model.dtype).reshape(-1, 3)
        targets = example.targets.astype(model.dtype).reshape(-1, 2)
        labels = example.labels.astype(model.dtype)

        representations, enc_cache = _forward(model.encoder, context)
        r = mean_representation(representations, model.embed_dim, model.dtype)
        decoder_in = np.concatenate([targets, np.broadcast_to(r, (len(targets), model.embed_dim))], axis=1)
        logits, dec_cache = _forward(model.decoder, decoder_in)
        phi = expit(logits[:, 0])
        total += nll_loss(phi, labels) * scale

        grad_logits = ((phi - labels) * (scale / len(labels)))[:, None].astype(model.dtype)
        dec_w, dec_b, grad_in = _backward(model.decoder, dec_cache, grad_logits)
        for layer in range(len(dec_w)):
            grads[2 * (n_enc + layer)] += dec_w[layer]
            grads[2 * (n_enc + layer) + 1] += dec_b[layer]

        if len(context):
            grad_r = grad_in[:, 2:].sum(axis=0) / len(context)
            grad_rep = np.broadcast_to(grad_r, representations.shape)
            enc_w, enc_b, _ = _backward(model.encoder, enc_cache, grad_rep)
            for layer in range(n_enc):
                grads[2 * layer] += enc_w[layer]
                grads[2 * layer + 1] += enc_b[layer]
    return total, grads


def _subsample(example: TrainingExample, cfg: TrainConfig, rng: np.random.Generator) -> TrainingExample:
    context, targets, labels = example.context, example.targets, example.labels
    if cfg.max_context is not None and len(context) > cfg.max_context:
        context = context[np.sort(rng.choice(len(context), size=cfg.max_context, replace=False))]
    if cfg.max_targets is not None and len(targets) > cfg.max_targets:
        keep = np.sort(rng.choice(len(targets), size=cfg.max_targets, replace=False))
        targets, labels = targets[keep], labels[keep]
    return TrainingExample(context=context, targets=targets, labels=labels)


def train(model: CnpModel, dataset: list[TrainingExample], cfg: TrainConfig) -> tuple[CnpModel, list[float]]:
    """Fit a CNP with Adam on seeded minibatches; the input model is left untouched.

    Args:
        model: starting parameters.
        dataset: training examples.
        cfg: optimizer settings.

    Returns:
        trained model and the mean batch NLL of every iteration
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    model.check()
    params = [p.copy() for p in model.parameters()]
    working = model.with_parameters(params)
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []

    for iteration in range(cfg.iterations):
        picks = rng.choice(len(dataset), size=cfg.batch_size, replace=len(dataset) < cfg.batch_size)
        batch = [_subsample(dataset[i], cfg, rng) for i in picks]
        loss, grads = loss_and_grads(working, batch)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            diagnostics = {
                "iteration": iteration,
                "loss": loss,
                "param_norms": [float(np.linalg.norm(p)) for p in params],
                "grad_norms": [float(np.linalg.norm(g)) for g in grads],
            }
            logger.error(f"Training diverged at iteration {iteration} with loss {loss}")
            raise TrainingDivergedError(f"non-finite loss or gradient at iteration {iteration}", diagnostics)
        adam.update(params, grads, cfg)
        history.append(loss)
        if (iteration + 1) % cfg.log_every == 0:
            recent = float(np.mean(history[-cfg.log_every :]))
            logger.info(f"Iteration {iteration + 1}/{cfg.iterations}: mean NLL {recent:.4f}")
    return working, history


def make_dataset(
    maps: list[OccupancyGrid],
    samples_per_map: int,
    sensor_range: float,
    prediction_radius: float,
    seed: int,
    n_beams: int = 720,
) -> list[TrainingExample]:
    """Simulate single scans at random free poses and label context plus near-frontier cells from truth.

    Args:
        maps: ground-truth grids.
        samples_per_map: poses per map.
        sensor_range: lidar range.
        prediction_radius: target radius about each frontier centroid.
        seed: pose sampling seed.
        n_beams: lidar beams per scan.

    Returns:
        examples ordered by map, then by pose
    """
    if not maps:
        raise ValueError("make_dataset needs at least one map")
    if samples_per_map < 1:
        raise ValueError(f"samples_per_map must be at least 1, got {samples_per_map}")
    rng = np.random.default_rng(seed)
    examples = []
    for index, truth in enumerate(maps):
        for pose in sample_free_poses(truth, samples_per_map, rng):
            belief = simulate_lidar(truth, OccupancyGrid.unknown_like(truth), pose, sensor_range, n_beams)
            query = build_query(belief, pose, extract_frontiers(belief), sensor_range, prediction_radius)
            unknown_labels = truth.cells[query.target_cells[:, 0], query.target_cells[:, 1]] == Cell.OCCUPIED
            examples.append(
                TrainingExample(
                    context=query.context.astype(np.float32),
                    targets=np.concatenate([query.context[:, :2], query.targets]).astype(np.float32),
                    labels=np.concatenate([query.context[:, 2], unknown_labels]).astype(np.float32),
                )
            )
        logger.info(f"Sampled {samples_per_map} scans from map {index + 1}/{len(maps)}")
    return examples


def split_heldout(
    examples: list[TrainingExample], samples_per_map: int, heldout_maps: int
) -> tuple[list[TrainingExample], list[TrainingExample]]:
    """Split a `make_dataset` result so the last `heldout_maps` maps are held out."""
    cut = len(examples) - heldout_maps * samples_per_map
    if cut <= 0:
        raise ValueError("held-out maps would leave nothing to train on")
    return examples[:cut], examples[cut:]


def evaluate_nll(model: CnpModel, examples: list[TrainingExample]) -> float:
    """NLL pooled over every target of every example."""
    phi = np.concatenate([predict_arrays(model, ex.context, ex.targets) for ex in examples])
    labels = np.concatenate([ex.labels for ex in examples])
    return nll_loss(phi, labels)


def constant_baseline_nll(examples: list[TrainingExample]) -> float:
    """NLL of predicting the pooled occupied fraction everywhere."""
    labels = np.concatenate([ex.labels for ex in examples]).astype(np.float64)
    return nll_loss(np.full_like(labels, labels.mean()), labels)


def save_weights(model: CnpModel, path: str) -> None:
    """Write the magic, a length-prefixed toml metadata block and little-endian float32 parameters."""
    model.check()
    metadata = {
        "embed_dim": model.embed_dim,
        "max_context": model.max_context,
        "encoder_shapes": [list(s) for s in model.encoder.shapes],
        "decoder_shapes": [list(s) for s in model.decoder.shapes],
        "encoder_activations": model.encoder.activations,
        "decoder_activations": model.decoder.activations,
    }
    block = toml.dumps(metadata).encode("utf-8")
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", len(block)))
        f.write(block)
        for param in model.parameters():
            f.write(np.ascontiguousarray(param, dtype="<f4").tobytes())


def load_weights(path: str) -> CnpModel:
    """Read a weight file written by `save_weights`."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(WEIGHTS_MAGIC):
        raise ModelError(f"{path} is not a CNP weight file")
    offset = len(WEIGHTS_MAGIC)
    (block_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    metadata = toml.loads(data[offset : offset + block_len].decode("utf-8"))
    offset += block_len

    def read_mlp(shapes: list[list[int]], activations: list[str]) -> MlpParams:
        nonlocal offset
        weights, biases = [], []
        for out_dim, in_dim in shapes:
            for shape in ((out_dim, in_dim), (out_dim,)):
                count = int(np.prod(shape))
                if offset + 4 * count > len(data):
                    raise ModelError(f"{path} is truncated")
                array = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
                offset += 4 * count
                (weights if len(shape) == 2 else biases).append(array.astype(np.float32))
        return MlpParams(weights=weights, biases=biases, output_activation=activations[-1])

    encoder = read_mlp(metadata["encoder_shapes"], metadata["encoder_activations"])
    decoder = read_mlp(metadata["decoder_shapes"], metadata["decoder_activations"])
    if offset != len(data):
        raise ModelError(f"{path} has {len(data) - offset} trailing bytes")
    model = CnpModel(
        encoder=encoder,
        decoder=decoder,
        embed_dim=metadata["embed_dim"],
        max_context=metadata.get("max_context", CONTEXT_CAP),
    )
    model.check()
    return model


def save_dataset(examples: list[TrainingExample], path: str) -> None:
    """Write a record count, then per record its context and target counts and float32 rows."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(examples)))
        for ex in examples:
            f.write(struct.pack("<II", len(ex.context), len(ex.targets)))
            f.write(np.ascontiguousarray(ex.context, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(ex.targets, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(ex.labels, dtype="<f4").tobytes())


def load_dataset(path: str) -> list[TrainingExample]:
    """Read a dataset file written by `save_dataset`."""
    with open(path, "rb") as f:
        data = f.read()
    (count,) = struct.unpack_from("<I", data, 0)
    offset = 4
    examples = []

    def take(n: int, cols: int) -> NDArray:
        nonlocal offset
        if offset + 4 * n * cols > len(data):
            raise ModelError(f"{path} is truncated")
        array = np.frombuffer(data, dtype="<f4", count=n * cols, offset=offset).astype(np.float32)
        offset += 4 * n * cols
        return array.reshape(n, cols) if cols > 1 else array

    for _ in range(count):
        n_context, n_targets = struct.unpack_from("<II", data, offset)
        offset += 8
        context, targets, labels = take(n_context, 3), take(n_targets, 2), take(n_targets, 1)
        examples.append(TrainingExample(context=context, targets=targets, labels=labels))
    return examples
