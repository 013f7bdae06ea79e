"""Recorded computations: named-input evaluation, gradients, and finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import tensor as _t
from .params import ParamSet
from .tensor import ShapeError, Tensor

__all__ = ["Graph", "NodeRecord", "forward", "backward", "grad_check", "GradCheckReport"]


@dataclass
class NodeRecord:
    node_id: int
    op: str
    inputs: tuple[int | None, ...]
    saved: tuple = ()


class Graph:
    """A computation defined by a Python callable over named inputs.

    Each :func:`forward` call re-records the operations executed by ``fn`` as a
    topologically ordered list of :class:`NodeRecord`. ``fn`` receives the bound
    inputs as keyword arguments and returns a Tensor or a dict of Tensors.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]], input_names, params: ParamSet | None = None):
        self.fn = fn
        self.input_names = tuple(input_names)
        self.params = params
        self.nodes: list[NodeRecord] = []
        self.outputs: dict[str, int | None] = {}
        self._ids: dict[int, int] = {}

    def record(self, out: Tensor, parents, op: str, saved) -> None:
        nid = len(self.nodes)
        out.node_id = nid
        self._ids[id(out)] = nid
        inputs = tuple(self._ids.get(id(p)) for p in parents)
        self.nodes.append(NodeRecord(nid, op, inputs, saved))

    def _reset(self) -> None:
        self.nodes = []
        self.outputs = {}
        self._ids = {}


def forward(graph: Graph, inputs: Mapping[str, object]) -> dict[str, Tensor]:
    """Evaluate ``graph`` on named inputs, recording every operation."""
    unknown = set(inputs) - set(graph.input_names)
    if unknown:
        raise KeyError(f"unknown input name(s): {sorted(unknown)}")
    missing = set(graph.input_names) - set(inputs)
    if missing:
        raise KeyError(f"missing input(s): {sorted(missing)}")
    graph._reset()
    bound = {k: v if isinstance(v, Tensor) else _t.as_tensor(v) for k, v in inputs.items()}
    prev = getattr(_t._state, "recorder", None)
    _t._state.recorder = graph
    try:
        result = graph.fn(**bound)
    except ShapeError as exc:
        raise ShapeError(str(exc), node_id=len(graph.nodes)) from None
    finally:
        _t._state.recorder = prev
    if isinstance(result, Tensor):
        result = {"out": result}
    graph.outputs = {k: v.node_id for k, v in result.items()}
    return dict(result)


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every trainable tensor in ``graph.params``."""
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if graph.params is None:
        raise ValueError("graph has no ParamSet to report gradients for")
    graph.params.zero_grad()
    _t.backward(loss)
    out = {}
    for name, p in graph.params.trainable().items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.max_rel_error.values())

    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.max_rel_error.items() if not v < self.tolerance}

    def __str__(self) -> str:
        lines = [f"{'PASS' if v < self.tolerance else 'FAIL'} {k}: {v:.3e}" for k, v in self.max_rel_error.items()]
        return "\n".join(lines)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    # entries far below the tensor's gradient scale are compared against that scale
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    floor = 1e-6 * max(scale, 1e-3)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def grad_check(
    graph: Graph,
    inputs: Mapping[str, object],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    wrt_inputs: tuple[str, ...] = (),
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Must run on float64 parameters. ``max_entries`` caps the number of
    coordinates probed per tensor (sampled without replacement). Failures are
    reported, never raised.
    """
    params = graph.params if graph.params is not None else ParamSet()
    for name, p in params.trainable().items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    bound = {k: _t.as_tensor(v) for k, v in inputs.items()}
    for name in wrt_inputs:
        bound[name] = Tensor(np.asarray(bound[name].data, dtype=np.float64), requires_grad=True)

    def loss_value() -> float:
        with _t.no_grad():
            out = forward(graph, bound)
        return float(next(iter(out.values())).data)

    out = forward(graph, bound)
    loss = next(iter(out.values()))
    analytic = backward(graph, loss) if graph.params is not None else {}
    for name in wrt_inputs:
        analytic[f"input:{name}"] = bound[name].grad.copy()
    targets = dict(params.trainable())
    for name in wrt_inputs:
        targets[f"input:{name}"] = bound[name]

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in targets.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        a = np.asarray(analytic[name]).reshape(-1)[idx]
        report.max_rel_error[name] = _relative_error(a, numeric)
    return report
