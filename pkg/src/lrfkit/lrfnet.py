"""Learned local reference frames.

The z-axis is the keypoint normal. Each neighbor gets a weight from a small
per-point MLP fed with two rotation-invariant attributes (relative distance
and the cosine between the normal and the offset), and the x-axis is the
normalized weighted sum of the neighbors' tangent-plane projections.

The MLP is plain numpy with a hand-written backward pass so that training
needs nothing beyond numpy.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .baselines import frame_from_axes, normalized_sum, tangent_projections
from .errors import ChecksumError, DegenerateGeometryError, InvalidInputError
from .geometry import LocalPatch, as_point, estimate_normal

FORMAT_NAME = "lrfkit.weightnet"
FORMAT_VERSION = 1
DEFAULT_HIDDEN = (32, 64, 128, 64, 32)
VARIANTS = ("sum1", "sum2", "max")
ACTIVATIONS = ("relu", "sigmoid")


@dataclass(frozen=True)
class LrfNetConfig:
    n_points: int = 256
    z_subset_fraction: float = 1.0 / 3.0
    hidden: tuple = DEFAULT_HIDDEN
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 8:
            raise InvalidInputError("n_points must be >= 8")
        if not 0 < self.z_subset_fraction <= 1:
            raise InvalidInputError("z_subset_fraction must lie in (0, 1]")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def mirror_skips(n_hidden: int) -> dict:
    """U-Net style skips: the layer consuming hidden output ``j`` also gets
    the mirrored encoder output ``n_hidden + 1 - j``."""
    return {j: n_hidden + 1 - j for j in range(1, n_hidden + 1) if n_hidden + 1 - j < j}


def _sigmoid(a):
    # split by sign so large |a| never overflows exp
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True, eq=False)
class WeightNet:
    """Per-point MLP mapping an input feature row to a weight in (0, 1).

    ``weights[k]`` has shape ``(out, in)``. Layer ``k`` reads hidden output
    ``k`` (output 0 being the raw input), concatenated with output
    ``skips[k]`` when present.
    """

    weights: tuple
    biases: tuple
    activations: tuple
    skips: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=np.float64) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases))
        object.__setattr__(self, "activations", tuple(self.activations))
        object.__setattr__(self, "skips", {int(k): int(v) for k, v in dict(self.skips).items()})
        self.validate()

    @classmethod
    def create(cls, hidden: Sequence[int] = DEFAULT_HIDDEN, in_dim: int = 2, seed: int = 0) -> "WeightNet":
        rng = np.random.default_rng(seed)
        hidden = list(hidden)
        skips = mirror_skips(len(hidden))
        outs = hidden + [1]
        widths = [in_dim] + hidden
        weights, biases = [], []
        for k, out in enumerate(outs):
            fan_in = widths[k] + (widths[skips[k]] if k in skips else 0)
            bound = np.sqrt(6.0 / (fan_in + out))
            weights.append(rng.uniform(-bound, bound, (out, fan_in)))
            biases.append(rng.uniform(-bound, bound, out))
        acts = ["relu"] * len(hidden) + ["sigmoid"]
        return cls(tuple(weights), tuple(biases), tuple(acts), skips)

    @classmethod
    def uniform(cls, hidden: Sequence[int] = DEFAULT_HIDDEN, in_dim: int = 2) -> "WeightNet":
        """All parameters zero: every point gets weight 0.5."""
        net = cls.create(hidden, in_dim)
        return net.with_params([np.zeros_like(p) for p in net.params()])

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def layer_widths(self) -> list:
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def validate(self):
        widths = self.layer_widths()
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise InvalidInputError("weights, biases and activations must align")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            expect_in = widths[k] + (widths[self.skips[k]] if k in self.skips else 0)
            if w.ndim != 2 or w.shape[1] != expect_in or b.shape != (w.shape[0],):
                raise InvalidInputError(f"layer {k} has incompatible shape {w.shape}")
            if act not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {act!r}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInputError(f"layer {k} has non-finite parameters")
        for k, src in self.skips.items():
            if not 0 <= src <= k:
                raise InvalidInputError(f"skip {src}->{k} must point backwards")
        if self.weights[-1].shape[0] != 1 or self.activations[-1] != "sigmoid":
            raise InvalidInputError("output layer must be a single sigmoid unit")

    def params(self) -> list:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, do not mutate)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "WeightNet":
        params = list(params)
        return WeightNet(tuple(params[0::2]), tuple(params[1::2]), self.activations, self.skips)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params()))

    # -- forward / backward -----------------------------------------------------

    def forward(self, inputs, return_cache: bool = False):
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise InvalidInputError(f"expected (n, {self.in_dim}) inputs, got {x.shape}")
        hs = [x]
        layer_in = []
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            h_in = hs[k] if k not in self.skips else np.concatenate([hs[k], hs[self.skips[k]]], axis=1)
            a = h_in @ w.T + b
            h = np.maximum(a, 0.0) if act == "relu" else _sigmoid(a)
            layer_in.append(h_in)
            hs.append(h)
        out = hs[-1][:, 0]
        if return_cache:
            return out, (hs, layer_in)
        return out

    def backward(self, cache, grad_out) -> list:
        """Parameter gradients given d(objective)/d(output) per row."""
        hs, layer_in = cache
        grad_h = [None] * len(hs)
        grad_h[-1] = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
        grads = [None] * (2 * self.n_layers)
        for k in range(self.n_layers - 1, -1, -1):
            h = hs[k + 1]
            g = grad_h[k + 1]
            if self.activations[k] == "relu":
                da = g * (h > 0)
            else:
                da = g * h * (1.0 - h)
            grads[2 * k] = da.T @ layer_in[k]
            grads[2 * k + 1] = da.sum(axis=0)
            g_in = da @ self.weights[k]
            w0 = hs[k].shape[1]
            _accumulate(grad_h, k, g_in[:, :w0])
            if k in self.skips:
                _accumulate(grad_h, self.skips[k], g_in[:, w0:])
        return grads

    # -- persistence ------------------------------------------------------------

    def to_dict(self) -> dict:
        body = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "in_dim": self.in_dim,
            "skips": sorted([k, v] for k, v in self.skips.items()),
            "layers": [
                {
                    "in": int(w.shape[1]),
                    "out": int(w.shape[0]),
                    "activation": act,
                    "weight": w.ravel().tolist(),
                    "bias": b.tolist(),
                }
                for w, b, act in zip(self.weights, self.biases, self.activations)
            ],
        }
        body["checksum"] = _checksum(body)
        return body

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "WeightNet":
        if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
            raise ChecksumError("not a weight-net document")
        if doc.get("version") != FORMAT_VERSION:
            raise ChecksumError(f"unsupported weight-net version {doc.get('version')!r}")
        body = {k: v for k, v in doc.items() if k != "checksum"}
        if doc.get("checksum") != _checksum(body):
            raise ChecksumError("weight-net checksum mismatch")
        weights, biases, acts = [], [], []
        for layer in doc["layers"]:
            weights.append(np.asarray(layer["weight"], dtype=np.float64).reshape(layer["out"], layer["in"]))
            biases.append(np.asarray(layer["bias"], dtype=np.float64))
            acts.append(layer["activation"])
        return cls(tuple(weights), tuple(biases), tuple(acts), {k: v for k, v in doc["skips"]})

    @classmethod
    def from_json(cls, text: str) -> "WeightNet":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ChecksumError(f"weight file is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path) -> "WeightNet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def checksum(self) -> str:
        return self.to_dict()["checksum"]

    def summary(self) -> str:
        lines = [f"WeightNet: {self.n_layers} layers, {self.n_params()} parameters"]
        for k, (w, act) in enumerate(zip(self.weights, self.activations)):
            skip = f"  (+skip from output {self.skips[k]})" if k in self.skips else ""
            lines.append(f"  layer {k}: {w.shape[1]} -> {w.shape[0]} {act}{skip}")
        lines.append(f"checksum: {self.checksum()}")
        return "\n".join(lines)


def _accumulate(grad_h, i, g):
    grad_h[i] = g if grad_h[i] is None else grad_h[i] + g


def _checksum(body: dict) -> str:
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return "sha256:" + hashlib.sha256(canon.encode("utf-8")).hexdigest()


def param_count(in_dim: int, hidden: Sequence[int]) -> int:
    """Closed-form parameter count of ``WeightNet.create(hidden, in_dim)``."""
    hidden = list(hidden)
    skips = mirror_skips(len(hidden))
    widths = [in_dim] + hidden
    total = 0
    for k, out in enumerate(hidden + [1]):
        fan_in = widths[k] + (widths[skips[k]] if k in skips else 0)
        total += fan_in * out + out
    return total


# --- frame construction -------------------------------------------------------------


def compute_attributes(patch: LocalPatch, keypoint=None, z_axis=None) -> np.ndarray:
    """``(n, 2)`` array of (relative distance, cos(normal, offset)) per neighbor."""
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    z = as_point(z_axis)
    off = patch.neighbors - p
    dist = np.linalg.norm(off, axis=1)
    ok = dist >= 1e-12
    attrs = np.zeros((len(off), 2))
    attrs[ok, 0] = dist[ok] / patch.radius
    attrs[ok, 1] = np.clip((off[ok] @ z) / dist[ok], -1.0, 1.0)
    return attrs


def raw_inputs(patch: LocalPatch, keypoint=None, z_axis=None) -> np.ndarray:
    """``(n, 6)`` rows ``[(q - p) / r, z]`` used by the raw-coordinate variant."""
    p = patch.keypoint if keypoint is None else as_point(keypoint)
    z = as_point(z_axis)
    off = (patch.neighbors - p) / patch.radius
    return np.hstack([off, np.broadcast_to(z, off.shape)])


def weightnet_forward(net: WeightNet, attrs) -> np.ndarray:
    return net.forward(attrs)


def project_to_tangent(keypoint, neighbor, z_axis) -> np.ndarray:
    off = np.asarray(neighbor, dtype=np.float64) - as_point(keypoint)
    z = as_point(z_axis)
    return off - (off @ z)[..., None] * z


def weighted_x_axis(projections, weights) -> np.ndarray:
    v = np.asarray(projections, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(v) != len(w):
        raise InvalidInputError("projections and weights differ in length")
    return normalized_sum(v, w)


def max_weight_x_axis(projections, weights) -> np.ndarray:
    v = np.asarray(projections, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(v) == 0 or len(v) != len(w):
        raise InvalidInputError("need matching, non-empty projections and weights")
    best = v[int(np.argmax(w))]  # argmax returns the first maximal index
    norm = np.linalg.norm(best)
    if norm <= 1e-12:
        raise DegenerateGeometryError("max-weight projection has zero length")
    return best / norm


def network_inputs(patch: LocalPatch, z: np.ndarray, variant: str) -> np.ndarray:
    if variant == "sum2":
        return raw_inputs(patch, z_axis=z)
    return compute_attributes(patch, z_axis=z)


def estimate_lrf(
    net: WeightNet,
    patch: LocalPatch,
    keypoint=None,
    cfg: Optional[LrfNetConfig] = None,
    variant: str = "sum1",
) -> np.ndarray:
    """Learned LRF (columns x, y, z) of a patch."""
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    cfg = cfg or LrfNetConfig()
    if keypoint is not None:
        patch = LocalPatch(as_point(keypoint), patch.neighbors, patch.radius, patch.indices)
    z = estimate_normal(patch, subset_fraction=cfg.z_subset_fraction)
    weights = net.forward(network_inputs(patch, z, variant))
    proj = tangent_projections(patch.offsets, z)
    if variant == "max":
        x = max_weight_x_axis(proj, weights)
    else:
        x = weighted_x_axis(proj, weights)
    return frame_from_axes(x, z)
