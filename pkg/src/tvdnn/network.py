"""Gated feed-forward network used as a trainable flux closure.

The forward map for an input column y is

    z1  = act(W0 y + b0)
    z2  = act(W1 z1 + b1)
    z3  = z2 * act(W2 y + b2)
    z4  = act(W3 z3 + b3)
    z5  = z4 * act(W4 y + b4)
    out = W5 z5 + b5

with tanh activation.  Both gates take the raw input y, so under a linear
activation the map is a polynomial of degree three in y; tanh adds
saturation on top.  W0, W2, W4 are (hidden, in), W1 and W3 are
(hidden, hidden), W5 is (out, hidden), and biases are column vectors.

Evaluation is batched over the second axis: ``y`` has shape (n_in, n) and
the output (n_out, n).  All entry points accept tracked tape values in place
of arrays, including the input-derivative evaluation, so the derivative
itself stays differentiable with respect to the weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tape
from .tape import Var, val

CHECKPOINT_FORMAT = 1

_WEIGHT_NAMES = ("W0", "b0", "W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "W5", "b5")


class ConfigError(ValueError):
    """Inconsistent network architecture or input dimensions."""


@dataclass(frozen=True)
class NetSpec:
    """Architecture record: layer widths and the initialization flavor."""

    n_in: int
    n_hidden: int
    n_out: int
    init: str = "xavier"  # "xavier" | "xavier_zero_output"

    def __post_init__(self):
        if min(self.n_in, self.n_hidden, self.n_out) < 1:
            raise ConfigError("layer widths must be >= 1")
        if self.init not in ("xavier", "xavier_zero_output"):
            raise ConfigError(f"unknown init kind {self.init!r}")


@dataclass(frozen=True)
class NetParams:
    """Weights and biases; treated as immutable once constructed."""

    W0: np.ndarray
    b0: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray
    W4: np.ndarray
    b4: np.ndarray
    W5: np.ndarray
    b5: np.ndarray

    @property
    def n_in(self):
        return val(self.W0).shape[1]

    @property
    def n_hidden(self):
        return val(self.W0).shape[0]

    @property
    def n_out(self):
        return val(self.W5).shape[0]

    def arrays(self):
        return [getattr(self, name) for name in _WEIGHT_NAMES]

    def spec(self, init="xavier"):
        return NetSpec(self.n_in, self.n_hidden, self.n_out, init)


def init_params(spec: NetSpec, seed: int) -> NetParams:
    """Xavier-uniform weights (gain 1), zero biases, deterministic in seed.

    The ``xavier_zero_output`` flavor zeroes the output layer so the net
    starts as the constant-zero map.
    """
    rng = np.random.default_rng(seed)
    ni, nh, no = spec.n_in, spec.n_hidden, spec.n_out

    def xavier(n_out_dim, n_in_dim):
        limit = np.sqrt(6.0 / (n_in_dim + n_out_dim))
        return rng.uniform(-limit, limit, size=(n_out_dim, n_in_dim))

    w = {
        "W0": xavier(nh, ni),
        "W1": xavier(nh, nh),
        "W2": xavier(nh, ni),
        "W3": xavier(nh, nh),
        "W4": xavier(nh, ni),
        "W5": xavier(no, nh),
    }
    if spec.init == "xavier_zero_output":
        w["W5"] = np.zeros((no, nh))
    b = {f"b{i}": np.zeros((nh, 1)) for i in range(5)}
    b["b5"] = np.zeros((no, 1))
    return NetParams(**w, **b)


def _check_input(params, y):
    yv = val(y)
    if yv.ndim != 2 or yv.shape[0] != params.n_in:
        raise ConfigError(
            f"input shape {yv.shape} incompatible with {params.n_in}-input network"
        )


def forward(params: NetParams, y, act: str = "tanh"):
    """Evaluate the network on a batch of input columns.

    ``act`` may be ``"identity"``, a hook used by tests to expose the
    underlying polynomial structure.
    """
    _check_input(params, y)
    p = params
    if act == "tanh":
        z1 = tape.dense_tanh(p.W0, y, p.b0)
        z2 = tape.dense_tanh(p.W1, z1, p.b1)
        z3 = z2 * tape.dense_tanh(p.W2, y, p.b2)
        z4 = tape.dense_tanh(p.W3, z3, p.b3)
        z5 = z4 * tape.dense_tanh(p.W4, y, p.b4)
    elif act == "identity":
        z1 = tape.dense_linear(p.W0, y, p.b0)
        z2 = tape.dense_linear(p.W1, z1, p.b1)
        z3 = z2 * tape.dense_linear(p.W2, y, p.b2)
        z4 = tape.dense_linear(p.W3, z3, p.b3)
        z5 = z4 * tape.dense_linear(p.W4, y, p.b4)
    else:
        raise ConfigError(f"unknown activation {act!r}")
    return tape.dense_linear(p.W5, z5, p.b5)


def forward_with_input_jacobian(params: NetParams, y, act: str = "tanh"):
    """Network output together with its exact derivative in the input.

    Returns ``(out, cols)`` where ``cols[j]`` has shape (n_out, n) and holds
    d(out)/d(y_j) for every column of the batch.  The derivative is built by
    propagating one tangent per input component through the layer recurrence,
    reusing the forward activations, so when the inputs are tracked on a tape
    the derivative is differentiable with respect to the weights as well.
    """
    _check_input(params, y)
    p = params
    if act == "tanh":
        z1 = tape.dense_tanh(p.W0, y, p.b0)
        z2 = tape.dense_tanh(p.W1, z1, p.b1)
        g1 = tape.dense_tanh(p.W2, y, p.b2)
        z3 = z2 * g1
        z4 = tape.dense_tanh(p.W3, z3, p.b3)
        g2 = tape.dense_tanh(p.W4, y, p.b4)
        z5 = z4 * g2
        s1 = tape.one_minus_square(z1)
        s2 = tape.one_minus_square(z2)
        sg1 = tape.one_minus_square(g1)
        s4 = tape.one_minus_square(z4)
        sg2 = tape.one_minus_square(g2)
    elif act == "identity":
        z1 = tape.dense_linear(p.W0, y, p.b0)
        z2 = tape.dense_linear(p.W1, z1, p.b1)
        g1 = tape.dense_linear(p.W2, y, p.b2)
        z3 = z2 * g1
        z4 = tape.dense_linear(p.W3, z3, p.b3)
        g2 = tape.dense_linear(p.W4, y, p.b4)
        z5 = z4 * g2
        ones = np.ones_like(val(z1))
        s1 = s2 = s4 = ones
        sg1 = sg2 = np.ones_like(val(g1))
    else:
        raise ConfigError(f"unknown activation {act!r}")
    out = tape.dense_linear(p.W5, z5, p.b5)

    n_in = params.n_in
    if n_in == 1:
        dz1 = s1 * p.W0
        dz2 = s2 * tape.matmul(p.W1, dz1)
        dg1 = sg1 * p.W2
        dz3 = dz2 * g1 + z2 * dg1
        dz4 = s4 * tape.matmul(p.W3, dz3)
        dg2 = sg2 * p.W4
        dz5 = dz4 * g2 + z4 * dg2
        return out, [tape.matmul(p.W5, dz5)]

    # batch the n_in tangent directions as a (hidden, n_in, m) block:
    # elementwise factors broadcast over the direction axis without copies
    # and each hidden-layer propagation is one wide matrix product
    nh = params.n_hidden
    m = val(y).shape[1]

    def by_dir(v):          # (nh, m) -> (nh, 1, m)
        return tape.reshape(v, (nh, 1, m))

    def hidden_matmul(w, dz):
        flat = tape.matmul(w, tape.reshape(dz, (nh, n_in * m)))
        return tape.reshape(flat, (nh, n_in, m))

    w0c = tape.reshape(p.W0, (nh, n_in, 1))
    w2c = tape.reshape(p.W2, (nh, n_in, 1))
    w4c = tape.reshape(p.W4, (nh, n_in, 1))
    dz1 = by_dir(s1) * w0c
    dz2 = by_dir(s2) * hidden_matmul(p.W1, dz1)
    dg1 = by_dir(sg1) * w2c
    dz3 = dz2 * by_dir(g1) + by_dir(z2) * dg1
    dz4 = by_dir(s4) * hidden_matmul(p.W3, dz3)
    dg2 = by_dir(sg2) * w4c
    dz5 = dz4 * by_dir(g2) + by_dir(z4) * dg2
    flat = tape.matmul(p.W5, tape.reshape(dz5, (nh, n_in * m)))
    dout = tape.reshape(flat, (params.n_out, n_in, m))
    return out, [dout[:, j, :] for j in range(n_in)]


def input_jacobian(params: NetParams, y, act: str = "tanh"):
    """Jacobian d(out)/d(y) as an (n_out, n_in, n) array (values only)."""
    _, cols = forward_with_input_jacobian(params, y, act=act)
    return np.stack([val(c) for c in cols], axis=1)


# ---------------------------------------------------------------------------
# flat parameter vectors and bundles
# ---------------------------------------------------------------------------

def n_params(spec: NetSpec) -> int:
    ni, nh, no = spec.n_in, spec.n_hidden, spec.n_out
    return 3 * nh * ni + 2 * nh * nh + no * nh + 5 * nh + no


def pack(params: NetParams) -> np.ndarray:
    return np.concatenate([np.asarray(val(a)).ravel() for a in params.arrays()])


def unpack(vec: np.ndarray, spec: NetSpec) -> NetParams:
    ni, nh, no = spec.n_in, spec.n_hidden, spec.n_out
    shapes = [
        (nh, ni), (nh, 1), (nh, nh), (nh, 1), (nh, ni), (nh, 1),
        (nh, nh), (nh, 1), (nh, ni), (nh, 1), (no, nh), (no, 1),
    ]
    out = {}
    k = 0
    for name, shp in zip(_WEIGHT_NAMES, shapes):
        size = shp[0] * shp[1]
        out[name] = np.asarray(vec[k:k + size]).reshape(shp).copy()
        k += size
    if k != vec.size:
        raise ConfigError("parameter vector size does not match spec")
    return NetParams(**out)


def pack_bundle(bundle: dict) -> np.ndarray:
    return np.concatenate([pack(p) for p in bundle.values()])


def unpack_bundle(vec: np.ndarray, specs: dict) -> dict:
    out = {}
    k = 0
    for name, spec in specs.items():
        size = n_params(spec)
        out[name] = unpack(vec[k:k + size], spec)
        k += size
    if k != vec.size:
        raise ConfigError("bundle vector size does not match specs")
    return out


def bundle_specs(bundle: dict) -> dict:
    return {name: p.spec() for name, p in bundle.items()}


def as_leaves(params: NetParams, t) -> NetParams:
    """Mirror of ``params`` whose entries are leaves on tape ``t``."""
    return NetParams(*[t.leaf(a) for a in params.arrays()])


def leaf_list(params: NetParams):
    return list(params.arrays())


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

def save_checkpoint(path, bundle: dict, meta: dict | None = None):
    """Write a JSON checkpoint; float repr round-trips bit-exactly."""
    doc = {
        "format_version": CHECKPOINT_FORMAT,
        "nets": {},
        "meta": meta or {},
    }
    for name, p in bundle.items():
        doc["nets"][name] = {
            "spec": {"n_in": p.n_in, "n_hidden": p.n_hidden, "n_out": p.n_out},
            "arrays": {w: np.asarray(val(a)).tolist() for w, a in zip(_WEIGHT_NAMES, p.arrays())},
        }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path):
    """Read a checkpoint; returns (bundle, meta)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    bundle = {}
    for name, net in doc["nets"].items():
        arrays = {w: np.asarray(net["arrays"][w], dtype=np.float64) for w in _WEIGHT_NAMES}
        p = NetParams(**arrays)
        spec = net["spec"]
        if (p.n_in, p.n_hidden, p.n_out) != (spec["n_in"], spec["n_hidden"], spec["n_out"]):
            raise ConfigError(f"checkpoint net {name!r} arrays disagree with its spec")
        bundle[name] = p
    return bundle, doc.get("meta", {})
