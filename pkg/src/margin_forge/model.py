"""Dense softmax classifiers: init, training, margins, serialization.

A model is an extractor (zero or more affine layers, relu on hidden layers,
identity on the final feature layer) followed by a linear head. Parameters
flatten layer by layer as [W row-major, b], extractor first, head last; the
flat vector plus the layer tables from ``layer_tables`` are what the numeric
kernels consume.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import RandomStream, TrainingDiverged, as_matrix, as_vector, spectral_norm

ACTIVATIONS = ("identity", "relu")


@dataclass(frozen=True)
class ArchSpec:
    """Shape of a classifier: hidden widths, feature width, head classes.

    ``feature_dim=None`` drops the extractor entirely (features are the raw
    inputs), which gives plain multinomial logistic regression.
    """

    input_dim: int
    class_count: int
    hidden: tuple = (16,)
    feature_dim: int = 8

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be >= 1")
        if self.feature_dim is None:
            if self.hidden:
                raise ValueError("hidden layers require a feature layer")
        elif self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")

    def layer_shapes(self):
        """(in, out, activation) triples for the extractor layers."""
        shapes = []
        prev = self.input_dim
        for width in self.hidden:
            shapes.append((prev, width, "relu"))
            prev = width
        if self.feature_dim is not None:
            shapes.append((prev, self.feature_dim, "identity"))
        return shapes

    @property
    def feature_width(self):
        return self.input_dim if self.feature_dim is None else self.feature_dim


@dataclass(frozen=True)
class Layer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str

    def __post_init__(self):
        object.__setattr__(self, "weights", as_matrix(self.weights, "layer weights"))
        object.__setattr__(self, "bias", as_vector(self.bias, "layer bias"))
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ValueError("layer bias length does not match weight rows")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelParams:
    layers: tuple
    head_weights: np.ndarray
    head_bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "head_weights", as_matrix(self.head_weights, "head weights"))
        object.__setattr__(self, "head_bias", as_vector(self.head_bias, "head bias"))
        if self.head_weights.shape[0] != self.head_bias.shape[0]:
            raise ValueError("head bias length does not match weight rows")
        prev = None
        for layer in self.layers:
            if prev is not None and layer.weights.shape[1] != prev:
                raise ValueError("consecutive layer shapes do not chain")
            prev = layer.weights.shape[0]
        if prev is not None and self.head_weights.shape[1] != prev:
            raise ValueError("head width does not match the feature layer")

    @property
    def input_dim(self):
        if self.layers:
            return self.layers[0].weights.shape[1]
        return self.head_weights.shape[1]

    @property
    def feature_dim(self):
        return self.head_weights.shape[1]

    @property
    def class_count(self):
        return self.head_weights.shape[0]

    @property
    def param_count(self):
        total = self.head_weights.size + self.head_bias.size
        for layer in self.layers:
            total += layer.weights.size + layer.bias.size
        return int(total)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    learning_rate: float
    seed: int
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def init_params(arch, seed):
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    stream = RandomStream(seed)
    layers = []
    for nin, nout, act in arch.layer_shapes():
        bound = 1.0 / np.sqrt(nin)
        layers.append(Layer(stream.uniform(-bound, bound, (nout, nin)),
                            np.zeros(nout), act))
    nin = arch.feature_width
    bound = 1.0 / np.sqrt(nin)
    head_w = stream.uniform(-bound, bound, (arch.class_count, nin))
    return ModelParams(tuple(layers), head_w, np.zeros(arch.class_count))


def flatten_params(params):
    """Concatenate every layer as [W row-major, b], head last."""
    chunks = []
    for layer in params.layers:
        chunks.append(layer.weights.ravel())
        chunks.append(layer.bias)
    chunks.append(params.head_weights.ravel())
    chunks.append(params.head_bias)
    return np.concatenate(chunks)


def unflatten_params(flat, template):
    """Inverse of ``flatten_params`` for the shapes of ``template``."""
    flat = as_vector(flat, "flat parameters")
    if flat.shape[0] != template.param_count:
        raise ValueError(
            f"expected {template.param_count} parameters, got {flat.shape[0]}")
    pos = 0
    layers = []
    for layer in template.layers:
        size = layer.weights.size
        w = flat[pos:pos + size].reshape(layer.weights.shape)
        pos += size
        b = flat[pos:pos + layer.bias.size]
        pos += layer.bias.size
        layers.append(Layer(w.copy(), b.copy(), layer.activation))
    size = template.head_weights.size
    head_w = flat[pos:pos + size].reshape(template.head_weights.shape).copy()
    pos += size
    head_b = flat[pos:pos + template.head_bias.size].copy()
    return ModelParams(tuple(layers), head_w, head_b)


def layer_tables(params):
    """(feature_table, full_table) describing the flat layout for kernels."""
    rows = []
    offset = 0
    for layer in params.layers:
        nout, nin = layer.weights.shape
        rows.append((nin, nout, 1 if layer.activation == "relu" else 0, offset))
        offset += nin * nout + nout
    feat_tab = np.array(rows, dtype=np.int64).reshape(len(rows), 4)
    nout, nin = params.head_weights.shape
    rows.append((nin, nout, 0, offset))
    full_tab = np.array(rows, dtype=np.int64)
    return feat_tab, full_tab


def head_slice(params):
    """Slice of the head parameters inside the flat vector."""
    start = sum(l.weights.size + l.bias.size for l in params.layers)
    return slice(start, start + params.head_weights.size + params.head_bias.size)


def features_batch(params, x):
    x = as_matrix(x, "inputs")
    feat_tab, _ = layer_tables(params)
    return _kernels.forward_batch(flatten_params(params), feat_tab, x)


def features(params, x):
    return features_batch(params, as_vector(x, "input")[None, :])[0]


def logits_batch(params, x):
    x = as_matrix(x, "inputs")
    _, full_tab = layer_tables(params)
    return _kernels.forward_batch(flatten_params(params), full_tab, x)


def logits(params, x):
    return logits_batch(params, as_vector(x, "input")[None, :])[0]


def predict_batch(params, x):
    """Argmax class per row; ties break toward the lowest class index."""
    return np.argmax(logits_batch(params, x), axis=1)


def predict(params, x):
    return int(predict_batch(params, as_vector(x, "input")[None, :])[0])


def margins_batch(params, x, y):
    """Margin logit_y - max over other classes, per row."""
    out = logits_batch(params, x)
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.shape[0] != out.shape[0]:
        raise ValueError("label count does not match the batch")
    if out.shape[1] < 2:
        raise ValueError("margins need at least two classes")
    rows = np.arange(out.shape[0])
    own = out[rows, y]
    masked = out.copy()
    masked[rows, y] = -np.inf
    return own - masked.max(axis=1)


def margin(params, x, y):
    return float(margins_batch(params, as_vector(x, "input")[None, :],
                               np.array([y]))[0])


def accuracy(params, x, y):
    """Fraction of rows whose argmax prediction equals the label."""
    y = np.ascontiguousarray(y, dtype=np.int64)
    if y.shape[0] == 0:
        raise ValueError("cannot score an empty evaluation set")
    return float(np.mean(predict_batch(params, x) == y))


def train_erm(dataset, config, arch=None, init_seed=0):
    """Mini-batch SGD on softmax cross-entropy over the train split.

    Shuffles are drawn from streams derived per epoch, so two runs with the
    same dataset, config, and init seed produce identical parameters. A
    non-finite loss aborts with the epoch index.

    Returns (ModelParams, per-epoch mean objective values).
    """
    if arch is None:
        arch = ArchSpec(input_dim=dataset.x.shape[1], class_count=dataset.class_count)
    idx = dataset.train_indices()
    n = idx.shape[0]
    if n == 0:
        raise ValueError("train split is empty")
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds {n} train records")
    x = dataset.x[idx]
    y = dataset.labels[idx]
    template = init_params(arch, init_seed)
    flat = flatten_params(template)
    _, full_tab = layer_tables(template)

    trace = []
    for epoch in range(config.epochs):
        order = RandomStream(config.seed, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, grad = _kernels.xent_loss_grad(
                flat, full_tab, x[batch], y[batch], config.weight_decay)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"training loss became non-finite at epoch {epoch}", epoch)
            flat -= config.learning_rate * grad
            total += loss * batch.shape[0]
        trace.append(total / n)
    return unflatten_params(flat, template), np.asarray(trace)


def lipschitz_bound(params):
    """Product of extractor spectral norms; upper-bounds the feature map's
    Lipschitz constant since relu and identity are 1-Lipschitz."""
    bound = 1.0
    for layer in params.layers:
        bound *= spectral_norm(layer.weights)
    return float(bound)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MODEL_HEADER = "#margin-forge-model v1"


def _fmt_floats(arr):
    return " ".join(repr(float(v)) for v in np.asarray(arr).ravel())


def _parse_floats(text, count, lineno):
    parts = text.split()
    if len(parts) != count:
        raise ValueError(f"line {lineno}: expected {count} values, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ValueError(f"line {lineno}: unparseable float ({exc})") from None


def model_to_text(params, fingerprint=None):
    """Structured text form; floats use repr so round-trips are bit-exact."""
    lines = [_MODEL_HEADER,
             f"input_dim {params.input_dim}",
             f"class_count {params.class_count}",
             f"layer_count {len(params.layers)}"]
    for i, layer in enumerate(params.layers):
        nout, nin = layer.weights.shape
        lines.append(f"layer {i} {layer.activation} {nin} {nout}")
        lines.append("w " + _fmt_floats(layer.weights))
        lines.append("b " + _fmt_floats(layer.bias))
    nout, nin = params.head_weights.shape
    lines.append(f"head {nin} {nout}")
    lines.append("w " + _fmt_floats(params.head_weights))
    lines.append("b " + _fmt_floats(params.head_bias))
    if fingerprint is not None:
        lines.append("fingerprint " + json.dumps(fingerprint, sort_keys=True))
    lines.append("end")
    return "\n".join(lines) + "\n"


class _LineReader:
    def __init__(self, text):
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, expect=None):
        while self.pos < len(self.lines) and not self.lines[self.pos].strip():
            self.pos += 1
        if self.pos >= len(self.lines):
            raise ValueError("unexpected end of file")
        line = self.lines[self.pos]
        self.pos += 1
        if expect is not None and not line.startswith(expect):
            raise ValueError(f"line {self.pos}: expected {expect!r}, got {line[:40]!r}")
        return line, self.pos


def _read_matrix(reader, prefix, rows, cols):
    line, lineno = reader.next(prefix + " ")
    return _parse_floats(line[len(prefix) + 1:], rows * cols, lineno).reshape(rows, cols)


def text_to_model(text):
    """Parse ``model_to_text`` output; returns (ModelParams, fingerprint)."""
    reader = _LineReader(text)
    header, lineno = reader.next()
    if header.strip() != _MODEL_HEADER:
        raise ValueError(f"line {lineno}: bad header {header[:40]!r}")
    fields = {}
    for key in ("input_dim", "class_count", "layer_count"):
        line, lineno = reader.next(key)
        try:
            fields[key] = int(line.split()[1])
        except (IndexError, ValueError):
            raise ValueError(f"line {lineno}: malformed {key} line") from None
    layers = []
    for i in range(fields["layer_count"]):
        line, lineno = reader.next("layer ")
        parts = line.split()
        if len(parts) != 5 or int(parts[1]) != i:
            raise ValueError(f"line {lineno}: malformed layer header")
        act, nin, nout = parts[2], int(parts[3]), int(parts[4])
        w = _read_matrix(reader, "w", nout, nin)
        b_line, b_no = reader.next("b ")
        b = _parse_floats(b_line[2:], nout, b_no)
        layers.append(Layer(w, b, act))
    line, lineno = reader.next("head ")
    parts = line.split()
    if len(parts) != 3:
        raise ValueError(f"line {lineno}: malformed head header")
    nin, nout = int(parts[1]), int(parts[2])
    head_w = _read_matrix(reader, "w", nout, nin)
    b_line, b_no = reader.next("b ")
    head_b = _parse_floats(b_line[2:], nout, b_no)
    fingerprint = None
    line, lineno = reader.next()
    if line.startswith("fingerprint "):
        try:
            fingerprint = json.loads(line[len("fingerprint "):])
        except json.JSONDecodeError as exc:
            raise ValueError(f"line {lineno}: bad fingerprint json ({exc.msg})") from None
        line, lineno = reader.next()
    if line.strip() != "end":
        raise ValueError(f"line {lineno}: expected end marker")
    params = ModelParams(tuple(layers), head_w, head_b)
    if params.input_dim != fields["input_dim"] or params.class_count != fields["class_count"]:
        raise ValueError("declared dimensions do not match the stored arrays")
    return params, fingerprint


def save_model(params, path, fingerprint=None):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(model_to_text(params, fingerprint))


def load_model(path):
    with open(path, "r", encoding="ascii") as fh:
        return text_to_model(fh.read())
