"""Minimal CPU forward/backward engine for the supported layer kinds.

Arithmetic runs in float64; every layer output is rounded to the storage
dtype (float32 unless a caller asks for float64, as the finite-difference
check does). Convolutions use an im2col view and one tensordot per group.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from numpy.lib.stride_tricks import as_strided
from tqdm import tqdm

from errors import EmptyDataset, EngineError, ShapeMismatch
from model_io import DatasetHandle, TensorStore, make_rng
from netgraph import (
    ADD,
    AVGPOOL,
    BATCHNORM,
    BIAS,
    CONV,
    FC,
    FLATTEN,
    GLOBALPOOL,
    INPUT,
    LOSS,
    MAXPOOL,
    RELU,
    LayerNode,
    NetworkGraph,
    group_table,
)

logger = logging.getLogger(__name__)

EVAL_BATCH = 256


@dataclass
class BatchResult:
    loss: float
    correct: int
    logits: np.ndarray
    activations: dict[str, np.ndarray] = field(default_factory=dict)
    # tensor arriving at input k of a layer, after any absorbed chain
    inputs: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    grads_w: dict[str, np.ndarray] = field(default_factory=dict)
    grads_a: dict[str, np.ndarray] = field(default_factory=dict)
    grads_in: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)

    @property
    def batch_size(self) -> int:
        return len(self.logits)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    weight_decay: float = 5e-4
    seed: int = 0


def _param(params: Mapping[str, np.ndarray], layer: LayerNode, role: str) -> np.ndarray:
    return np.asarray(params[layer.params[role]], dtype=np.float64)


def _as_channels(x: np.ndarray, c: int) -> np.ndarray:
    return x.reshape(x.shape[0], c, -1)


def _extent(size: int, k: int, s: int) -> int:
    return (size - k) // s + 1


def _windows(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(B, C, k, k, Ho, Wo) strided view of a contiguous (B, C, H, W) array."""
    x = np.ascontiguousarray(x)
    b, c, h, w = x.shape
    sb, sc, sh, sw = x.strides
    return as_strided(x, shape=(b, c, k, k, _extent(h, k, s), _extent(w, k, s)),
                      strides=(sb, sc, sh, sw, s * sh, s * sw), writeable=False)


def _scatter_windows(cols: np.ndarray, shape: tuple[int, ...], k: int, s: int) -> np.ndarray:
    out = np.zeros(shape)
    ho, wo = cols.shape[-2:]
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + s * ho:s, j:j + s * wo:s] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


# forward ops: (layer, inputs, params) -> output, all float64

def _conv_forward(layer, ins, params):
    w = _param(params, layer, 'weight')
    cols = _windows(_pad(ins[0], layer.pad), layer.kernel, layer.stride)
    b, _, _, _, ho, wo = cols.shape
    og = layer.out_channels // layer.groups
    table = group_table(layer)
    out = np.empty((b, layer.out_channels, ho, wo))
    for r in range(layer.groups):
        part = np.tensordot(w[r * og:(r + 1) * og], cols[:, table[r]], axes=([1, 2, 3], [1, 2, 3]))
        out[:, r * og:(r + 1) * og] = part.transpose(1, 0, 2, 3)
    if layer.bias_ref is not None:
        out += _param(params, layer, 'bias')[None, :, None, None]
    return out


def _fc_forward(layer, ins, params):
    out = ins[0] @ _param(params, layer, 'weight').T
    if layer.bias_ref is not None:
        out += _param(params, layer, 'bias')[None, :]
    return out


def _batchnorm_forward(layer, ins, params):
    x = ins[0]
    c = len(params[layer.params['gamma']])
    scale = _param(params, layer, 'gamma') / np.sqrt(_param(params, layer, 'var') + layer.eps)
    y = (_as_channels(x, c) - _param(params, layer, 'mean')[None, :, None]) * scale[None, :, None]
    return (y + _param(params, layer, 'beta')[None, :, None]).reshape(x.shape)


def _bias_forward(layer, ins, params):
    x = ins[0]
    bias = _param(params, layer, 'bias')
    return (_as_channels(x, len(bias)) + bias[None, :, None]).reshape(x.shape)


def _maxpool_forward(layer, ins, params):
    win = _windows(ins[0], layer.kernel, layer.stride)
    return win.max(axis=(2, 3))


def _avgpool_forward(layer, ins, params):
    return _windows(ins[0], layer.kernel, layer.stride).mean(axis=(2, 3))


FORWARD: dict[str, Callable] = {
    CONV: _conv_forward,
    FC: _fc_forward,
    ADD: lambda layer, ins, params: np.sum(ins, axis=0),
    RELU: lambda layer, ins, params: np.maximum(ins[0], 0.0),
    BATCHNORM: _batchnorm_forward,
    BIAS: _bias_forward,
    MAXPOOL: _maxpool_forward,
    AVGPOOL: _avgpool_forward,
    GLOBALPOOL: lambda layer, ins, params: ins[0].mean(axis=(2, 3), keepdims=True),
    FLATTEN: lambda layer, ins, params: ins[0].reshape(len(ins[0]), -1),
}


# backward ops: (layer, inputs, params, dout, grads_w) -> [d input k]

def _accumulate(grads_w, name, g):
    grads_w[name] = grads_w[name] + g if name in grads_w else g


def _conv_backward(layer, ins, params, dout, grads_w):
    w = _param(params, layer, 'weight')
    x = _pad(ins[0], layer.pad)
    cols = _windows(x, layer.kernel, layer.stride)
    og = layer.out_channels // layer.groups
    table = group_table(layer)
    dw = np.empty_like(w)
    dcols = np.empty(cols.shape)
    for r in range(layer.groups):
        d = dout[:, r * og:(r + 1) * og]
        dw[r * og:(r + 1) * og] = np.tensordot(d, cols[:, table[r]], axes=([0, 2, 3], [0, 4, 5]))
        dcols[:, table[r]] = np.tensordot(w[r * og:(r + 1) * og], d, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
    _accumulate(grads_w, layer.weight_ref, dw)
    if layer.bias_ref is not None:
        _accumulate(grads_w, layer.bias_ref, dout.sum(axis=(0, 2, 3)))
    dx = _scatter_windows(dcols, x.shape, layer.kernel, layer.stride)
    p = layer.pad
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return [dx]


def _fc_backward(layer, ins, params, dout, grads_w):
    _accumulate(grads_w, layer.weight_ref, dout.T @ ins[0])
    if layer.bias_ref is not None:
        _accumulate(grads_w, layer.bias_ref, dout.sum(axis=0))
    return [dout @ _param(params, layer, 'weight')]


def _batchnorm_backward(layer, ins, params, dout, grads_w):
    x = ins[0]
    gamma, mean = _param(params, layer, 'gamma'), _param(params, layer, 'mean')
    var = _param(params, layer, 'var') + layer.eps
    c = len(gamma)
    xc = _as_channels(x, c) - mean[None, :, None]
    d = _as_channels(dout, c)
    _accumulate(grads_w, layer.params['gamma'], (d * xc).sum(axis=(0, 2)) / np.sqrt(var))
    _accumulate(grads_w, layer.params['beta'], d.sum(axis=(0, 2)))
    _accumulate(grads_w, layer.params['mean'], -d.sum(axis=(0, 2)) * gamma / np.sqrt(var))
    _accumulate(grads_w, layer.params['var'], -0.5 * (d * xc).sum(axis=(0, 2)) * gamma * var ** -1.5)
    return [(d * (gamma / np.sqrt(var))[None, :, None]).reshape(x.shape)]


def _bias_backward(layer, ins, params, dout, grads_w):
    c = len(params[layer.params['bias']])
    _accumulate(grads_w, layer.params['bias'], _as_channels(dout, c).sum(axis=(0, 2)))
    return [dout]


def _maxpool_backward(layer, ins, params, dout, grads_w):
    x = ins[0]
    k, s = layer.kernel, layer.stride
    win = _windows(x, k, s)
    b, c, _, _, ho, wo = win.shape
    flat = win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c, ho, wo, k * k)
    di, dj = np.divmod(flat.argmax(axis=-1), k)
    rows = np.arange(ho)[None, None, :, None] * s + di
    cols = np.arange(wo)[None, None, None, :] * s + dj
    dx = np.zeros(x.shape)
    np.add.at(dx, (np.arange(b)[:, None, None, None], np.arange(c)[None, :, None, None], rows, cols), dout)
    return [dx]


def _avgpool_backward(layer, ins, params, dout, grads_w):
    k = layer.kernel
    cols = np.broadcast_to(dout[:, :, None, None] / (k * k), dout.shape[:2] + (k, k) + dout.shape[2:])
    return [_scatter_windows(cols, ins[0].shape, k, layer.stride)]


BACKWARD: dict[str, Callable] = {
    CONV: _conv_backward,
    FC: _fc_backward,
    ADD: lambda layer, ins, params, dout, grads_w: [dout] * len(ins),
    RELU: lambda layer, ins, params, dout, grads_w: [dout * (ins[0] > 0)],
    BATCHNORM: _batchnorm_backward,
    BIAS: _bias_backward,
    MAXPOOL: _maxpool_backward,
    AVGPOOL: _avgpool_backward,
    GLOBALPOOL: lambda layer, ins, params, dout, grads_w: [
        np.broadcast_to(dout / (ins[0].shape[2] * ins[0].shape[3]), ins[0].shape).copy()],
    FLATTEN: lambda layer, ins, params, dout, grads_w: [dout.reshape(ins[0].shape)],
}


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(n), labels] + 1e-300)))
    return loss, probs


def _check_batch(graph: NetworkGraph, batch: np.ndarray):
    expected = graph.shapes[graph.input_layer.id].array_shape()
    if batch.ndim != 1 + len(expected) or tuple(batch.shape[1:]) != expected:
        raise ShapeMismatch(f'batch of shape {batch.shape} does not match input {expected}',
                            (graph.input_layer.id,))


def _run_forward(graph, batch, params, dtype):
    _check_batch(graph, batch)
    store = np.dtype(dtype)
    acts: dict[str, np.ndarray] = {}
    inputs: dict[tuple[str, int], np.ndarray] = {}
    logits = None
    for layer in graph.layers:
        if layer.kind == INPUT:
            acts[layer.id] = np.asarray(batch, dtype=store)
            continue
        ins = []
        for k, src in enumerate(layer.inputs):
            a = acts[src]
            for op in graph.edge_chains.get((layer.id, k), ()):
                a = FORWARD[op.kind](op, [a.astype(np.float64)], params).astype(store)
                acts[op.id] = a
            inputs[(layer.id, k)] = a
            ins.append(a.astype(np.float64))
        if layer.kind == LOSS:
            logits = ins[0]
            acts[layer.id] = inputs[(layer.id, 0)]
            continue
        try:
            acts[layer.id] = FORWARD[layer.kind](layer, ins, params).astype(store)
        except KeyError as e:
            raise EngineError(f'{layer.id}: no kernel for {layer.kind}') from e
    return acts, inputs, logits


def forward(graph: NetworkGraph, batch: np.ndarray, labels: np.ndarray,
            params: Mapping[str, np.ndarray] | None = None, dtype=np.float32) -> BatchResult:
    """Activations, mean cross-entropy and top-1 hits for one batch."""
    params = graph.store if params is None else params
    acts, inputs, logits = _run_forward(graph, batch, params, dtype)
    labels = np.asarray(labels, dtype=np.int64)
    loss, _ = _softmax_xent(logits, labels)
    correct = int((logits.argmax(axis=1) == labels).sum())
    return BatchResult(loss, correct, logits, acts, inputs)


def predict(graph: NetworkGraph, batch: np.ndarray,
            params: Mapping[str, np.ndarray] | None = None, dtype=np.float32) -> np.ndarray:
    params = graph.store if params is None else params
    return _run_forward(graph, batch, params, dtype)[2]


def backward(graph: NetworkGraph, batch: np.ndarray, labels: np.ndarray,
             params: Mapping[str, np.ndarray] | None = None, dtype=np.float32) -> BatchResult:
    """Forward plus exact reverse-mode gradients of the mean cross-entropy."""
    if graph.absorbed:
        raise EngineError('backward needs the full graph, not an absorbed view')
    params = graph.store if params is None else params
    result = forward(graph, batch, labels, params, dtype)
    labels = np.asarray(labels, dtype=np.int64)
    _, probs = _softmax_xent(result.logits, labels)
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)

    loss_layer = graph.loss_layer
    grads_a: dict[str, np.ndarray] = {loss_layer.inputs[0]: dlogits}
    result.grads_in[(loss_layer.id, 0)] = dlogits
    for layer in reversed(graph.layers):
        if layer.kind in (INPUT, LOSS):
            continue
        dout = grads_a.get(layer.id)
        if dout is None:
            dout = np.zeros(result.activations[layer.id].shape)
            grads_a[layer.id] = dout
        ins = [result.inputs[(layer.id, k)].astype(np.float64) for k in range(len(layer.inputs))]
        dins = BACKWARD[layer.kind](layer, ins, params, dout, result.grads_w)
        for k, (src, d) in enumerate(zip(layer.inputs, dins)):
            result.grads_in[(layer.id, k)] = d
            grads_a[src] = grads_a[src] + d if src in grads_a else d
    result.grads_a = grads_a
    return result


def evaluate_accuracy(graph: NetworkGraph, dataset: DatasetHandle,
                      params: Mapping[str, np.ndarray] | None = None,
                      batch_size: int = EVAL_BATCH) -> float:
    if len(dataset) == 0:
        raise EmptyDataset(f'{dataset.split} split is empty')
    correct = 0
    for x, y in dataset.batches(batch_size):
        correct += int((predict(graph, x, params).argmax(axis=1) == y).sum())
    return correct / len(dataset)


def trainable_tensors(graph: NetworkGraph) -> list[str]:
    names = []
    for layer in graph.layers:
        roles = {CONV: ('weight', 'bias'), FC: ('weight', 'bias'),
                 BIAS: ('bias',), BATCHNORM: ('gamma', 'beta')}.get(layer.kind, ())
        names.extend(layer.params[r] for r in roles if r in layer.params)
    return names


def train_sgd(graph: NetworkGraph, store: TensorStore, dataset: DatasetHandle,
              cfg: TrainConfig = TrainConfig(), progress: bool = False) -> list[float]:
    """SGD with momentum, updating `store` in place. BatchNorm keeps its
    running statistics fixed and trains as a per-channel affine map.
    Returns the mean training loss of every epoch."""
    if len(dataset) == 0:
        raise EmptyDataset(f'{dataset.split} split is empty')
    names = trainable_tensors(graph)
    decayed = {l.weight_ref for l in graph.weighted_layers()}
    velocity = {n: np.zeros(store.shape(n)) for n in names}
    rng = make_rng(cfg.seed, 5)
    history = []
    bar = tqdm(range(cfg.epochs), desc=graph.name or 'train', disable=not progress)
    for epoch in bar:
        order = rng.permutation(len(dataset))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            res = backward(graph, dataset.images[idx], dataset.labels[idx], store)
            for n in names:
                w = store[n].astype(np.float64)
                g = res.grads_w[n] + (cfg.weight_decay * w if n in decayed else 0.0)
                velocity[n] = cfg.momentum * velocity[n] + g
                store[n] = w - cfg.lr * velocity[n]
            total += res.loss * len(idx)
            seen += len(idx)
        history.append(total / seen)
        bar.set_postfix(loss=f'{history[-1]:.4f}')
        logger.debug('epoch %d: loss %.4f', epoch, history[-1])
    return history


def _hinges(graph: NetworkGraph, result: BatchResult) -> list[np.ndarray]:
    """Which side of every ReLU hinge and which max-pool winner the batch
    sits on; the loss is smooth in the parameters while these stay fixed."""
    pattern = []
    for layer in graph.layers:
        if layer.kind == RELU:
            pattern.append(result.inputs[(layer.id, 0)] > 0)
        elif layer.kind == MAXPOOL:
            win = _windows(result.inputs[(layer.id, 0)], layer.kernel, layer.stride)
            b, c, k, _, ho, wo = win.shape
            pattern.append(win.transpose(0, 1, 4, 5, 2, 3).reshape(b, c, ho, wo, k * k).argmax(axis=-1))
    return pattern


def _same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(graph: NetworkGraph, batch: np.ndarray, labels: np.ndarray,
                   params: Mapping[str, np.ndarray] | None = None,
                   h: float = 1e-3, kinks: dict[str, int] | None = None) -> dict[str, float]:
    """Central finite differences in float64 against `backward`.

    Returns, per parameter tensor, ||g_fd - g|| / max(||g_fd||, ||g||, 1e-12)
    over the coordinates whose +-h steps keep every ReLU and max-pool on the
    same branch as the unperturbed pass. Coordinates that switch a branch are
    left out and counted per tensor in `kinks` when given.
    """
    params = graph.store if params is None else params
    p64 = {n: np.array(params[n], dtype=np.float64) for n in params}
    analytic = backward(graph, batch, labels, p64, dtype=np.float64).grads_w
    base = _hinges(graph, forward(graph, batch, labels, p64, dtype=np.float64))
    errors = {}
    for name in sorted(analytic):
        theta = p64[name]
        fd = np.zeros_like(theta)
        smooth = np.ones(theta.shape, dtype=bool)
        for i in np.ndindex(theta.shape):
            orig = theta[i]
            theta[i] = orig + h
            up = forward(graph, batch, labels, p64, dtype=np.float64)
            theta[i] = orig - h
            down = forward(graph, batch, labels, p64, dtype=np.float64)
            theta[i] = orig
            fd[i] = (up.loss - down.loss) / (2 * h)
            smooth[i] = _same(base, _hinges(graph, up)) and _same(base, _hinges(graph, down))
        g = analytic[name]
        diff, fd, g = (fd - g)[smooth], fd[smooth], g[smooth]
        errors[name] = float(np.linalg.norm(diff) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-12))
        skipped = int(smooth.size - smooth.sum())
        if skipped:
            logger.debug('%s: %d of %d coordinates cross a kink', name, skipped, smooth.size)
        if kinks is not None:
            kinks[name] = skipped
    return errors
