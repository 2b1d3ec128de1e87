"""Post-hoc feature attribution: vanilla gradients, integrated gradients,
SmoothGrad, and epsilon-rule relevance propagation.

Each method produces a per-pixel map for one label. With ``record=True`` the
map is built inside a recording graph, so scalar functionals of it can be
differentiated with respect to model parameters (gradient methods need a
second-order backward; relevance propagation only a first-order one).

Channel reduction clips negative attributions to zero per channel and sums
over channels; it is applied after any elementwise input product.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Model

METHODS = ("vg", "ig", "sg", "lrp")
LRP_SUPPORTED = ("dense", "conv2d", "relu", "max-pool", "flatten")


@dataclass
class ExplainerConfig:
    method: str = "vg"
    baseline: Union[float, np.ndarray] = 0.0
    ig_steps: int = 20
    sg_samples: int = 20
    sg_sigma: float = 0.1
    lrp_epsilon: float = 1e-6
    noise_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.ig_steps < 1 or self.sg_samples < 1:
            raise ValueError("ig_steps and sg_samples must be >= 1")
        if self.sg_sigma < 0:
            raise ValueError("sg_sigma must be >= 0")
        if self.lrp_epsilon <= 0:
            raise ValueError("lrp_epsilon must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["baseline"], np.ndarray):
            d["baseline"] = d["baseline"].tolist()
        return d


@dataclass
class Explanation:
    attributions: Tensor            # (H, W), channel-reduced, nonnegative
    raw: Tensor                     # (C, H, W), signed, pre-reduction
    label: int
    method: str
    differentiable: bool

    def __post_init__(self):
        if not self.differentiable and not np.all(np.isfinite(self.attributions.data)):
            raise ValueError("explanation contains non-finite values")


def reduce_channels(raw: Tensor) -> Tensor:
    """Clamp negatives to zero per channel, then sum channels: (C,H,W) -> (H,W)."""
    if raw.ndim != 3:
        raise ad.ShapeError(f"reduce_channels: expected (C,H,W), got {raw.shape}")
    return ad.tsum(ad.clamp_min(raw, 0.0), axis=0)


def _reduce_batch(raw: Tensor) -> Tensor:
    """(B,C,H,W) -> (B,H,W) clamp-then-sum."""
    return ad.tsum(ad.clamp_min(raw, 0.0), axis=1)


def _check_label(model: Model, label: int):
    if not 0 <= label < model.num_labels:
        raise ValueError(f"label {label} out of range [0, {model.num_labels})")


def _as_input_tensor(x) -> Tensor:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr, requires_grad=True)


def _baseline_array(config: ExplainerConfig, shape) -> np.ndarray:
    b = config.baseline
    if isinstance(b, np.ndarray):
        if b.shape != tuple(shape[1:]):
            raise ad.ShapeError(f"baseline shape {b.shape} != input shape {tuple(shape[1:])}")
        return np.broadcast_to(b, shape).astype(np.float64)
    return np.full(shape, float(b))


def _vg_raw(model: Model, xt: Tensor, label: int, record: bool) -> Tensor:
    """Per-sample input gradients of the label logit, stacked: (B,C,H,W)."""
    logits = model.forward(xt)
    target = ad.tsum(logits[:, label])  # samples are independent rows
    return ad.backward(target, [xt], create_graph=record)[xt]


def vg_maps(model: Model, x: Tensor, label: int, record: bool = False) -> Tensor:
    _check_label(model, label)
    return _reduce_batch(_vg_raw(model, _as_input_tensor(x), label, record))


def ig_maps(model: Model, x, label: int, config: ExplainerConfig,
            record: bool = False) -> Tensor:
    _check_label(model, label)
    xt = _as_input_tensor(x)
    raw = _ig_raw(model, xt, label, config, record)
    return _reduce_batch(raw)


def _ig_raw(model: Model, xt: Tensor, label: int, config: ExplainerConfig,
            record: bool) -> Tensor:
    # interpolation points are fresh leaves: the loss differentiates through
    # the model at each point, not through the path arithmetic itself
    base = _baseline_array(config, xt.shape)
    delta = xt.data - base
    n = config.ig_steps
    acc = None
    for i in range(1, n + 1):
        point = Tensor(base + (i / n) * delta, requires_grad=True)
        g = _vg_raw(model, point, label, record)
        acc = g if acc is None else ad.add(acc, g)
    return ad.mul(Tensor(delta), ad.mul(acc, 1.0 / n))


def sg_maps(model: Model, x, label: int, config: ExplainerConfig,
            record: bool = False, seed_offset: int = 0) -> Tensor:
    _check_label(model, label)
    xt = _as_input_tensor(x)
    rng = np.random.default_rng(config.noise_seed + seed_offset)
    acc = None
    for _ in range(config.sg_samples):
        noise = rng.normal(0.0, config.sg_sigma, size=xt.shape)
        noisy = ad.add(xt, Tensor(noise))
        m = _reduce_batch(_vg_raw(model, noisy, label, record))
        acc = m if acc is None else ad.add(acc, m)
    return ad.mul(acc, 1.0 / config.sg_samples)


# ---------------------------------------------------------------------------
# epsilon-rule relevance propagation (CNN layer stack only)
# ---------------------------------------------------------------------------

def _stabilized(z: Tensor, eps: float) -> Tensor:
    sgn = Tensor(np.where(z.data >= 0, 1.0, -1.0))
    return ad.add(z, ad.mul(sgn, eps))


def _conv_input_adjoint(s: Tensor, layer, in_shape) -> Tensor:
    """Transpose of the conv's im2col-matmul linear map, applied to s."""
    b, cin, h, w = in_shape
    cout, _, kh, kw = layer.weight.shape
    pad = layer.padding
    hp, wp = h + 2 * pad, w + 2 * pad
    full, ho, wo = ad._full_window_indices(b, cin, hp, wp, kh, kw, layer.stride)
    smat = ad.reshape(ad.transpose(s, (0, 2, 3, 1)), (b * ho * wo, cout))
    wmat = ad.reshape(layer.weight, (cout, cin * kh * kw))
    cols = ad.reshape(ad.matmul(smat, wmat), (b, ho * wo, cin * kh * kw))
    padded = ad.put_flat(cols, full, (b, cin, hp, wp))
    if pad:
        return padded[:, :, pad:pad + h, pad:pad + w]
    return padded


def _lrp_relevances(model: Model, xt: Tensor, label: int, eps: float) -> list:
    """Relevance tensor at every layer boundary, output first, input last."""
    layers = getattr(model, "layers", None)
    if layers is None:
        kind = getattr(model, "arch", {}).get("kind", type(model).__name__)
        raise ValueError(
            "LRP supports only dense/conv2d/relu/max-pool layer stacks; "
            f"architecture {kind!r} contains self-attention/layernorm")
    for layer in layers:
        if layer.kind not in LRP_SUPPORTED:
            raise ValueError(f"LRP does not support layer kind {layer.kind!r}")

    acts = [xt]
    for layer in model.layers:
        acts.append(layer(acts[-1]))
    logits = acts[-1]

    onehot = np.zeros((1, model.num_labels))
    onehot[0, label] = 1.0
    r = ad.mul(logits, Tensor(np.broadcast_to(onehot, logits.shape).copy()))
    rels = [r]

    for layer, a in zip(reversed(model.layers), reversed(acts[:-1])):
        if layer.kind == "relu":
            pass  # relevance passes through the nonlinearity unchanged
        elif layer.kind == "flatten":
            r = ad.reshape(r, a.shape)
        elif layer.kind == "dense":
            z = ad.matmul(a, layer.weight)  # bias excluded from contributions
            s = ad.div(r, _stabilized(z, eps))
            r = ad.mul(a, ad.matmul(s, ad.transpose(layer.weight)))
        elif layer.kind == "conv2d":
            z = ad.conv2d(a, layer.weight, None, stride=layer.stride,
                          padding=layer.padding)
            s = ad.div(r, _stabilized(z, eps))
            r = ad.mul(a, _conv_input_adjoint(s, layer, a.shape))
        elif layer.kind == "max-pool":
            b, c, h, w = a.shape
            k = layer.kernel
            full, ho, wo = ad._full_window_indices(b * c, 1, h, w, k, k, k)
            with ad.no_grad():
                wins = ad.take_flat(a.detach(), full, (b * c, ho * wo, k * k))
            mask = np.zeros_like(wins.data)
            np.put_along_axis(mask, np.argmax(wins.data, axis=2)[..., None], 1.0, axis=2)
            rw = ad.mul(ad.reshape(r, (b * c, ho * wo, 1)), Tensor(mask))
            r = ad.reshape(ad.put_flat(rw, full, (b * c, 1, h, w)), (b, c, h, w))
        else:  # pragma: no cover - guarded above
            raise ValueError(f"LRP does not support layer kind {layer.kind!r}")
        rels.append(r)
    return rels


def lrp_maps(model: Model, x, label: int, config: ExplainerConfig,
             record: bool = False) -> Tensor:
    _check_label(model, label)
    xt = _as_input_tensor(x)
    if not record:
        with ad.no_grad():
            raw = _lrp_relevances(model, xt, label, config.lrp_epsilon)[-1]
    else:
        raw = _lrp_relevances(model, xt, label, config.lrp_epsilon)[-1]
    return _reduce_batch(raw)


# ---------------------------------------------------------------------------
# public single-image API and dispatch
# ---------------------------------------------------------------------------

def _explain_single(model, x, label, config, record, raw_fn) -> Explanation:
    xt = _as_input_tensor(x)
    raw = raw_fn(xt)
    reduced = _reduce_batch(raw)
    return Explanation(attributions=reduced[0], raw=raw[0], label=label,
                       method=config.method, differentiable=record)


def explain_vg(model: Model, x, label: int, record: bool = False) -> Explanation:
    _check_label(model, label)
    cfg = ExplainerConfig(method="vg")
    return _explain_single(model, x, label, cfg, record,
                           lambda xt: _vg_raw(model, xt, label, record))


def explain_ig(model: Model, x, label: int, config: Optional[ExplainerConfig] = None,
               record: bool = False) -> Explanation:
    config = config or ExplainerConfig(method="ig")
    _check_label(model, label)
    return _explain_single(model, x, label, config, record,
                           lambda xt: _ig_raw(model, xt, label, config, record))


def explain_sg(model: Model, x, label: int, config: Optional[ExplainerConfig] = None,
               record: bool = False) -> Explanation:
    """Mean of sg_samples channel-reduced gradient maps at noisy inputs."""
    config = config or ExplainerConfig(method="sg")
    _check_label(model, label)
    xt = _as_input_tensor(x)
    rng = np.random.default_rng(config.noise_seed)
    acc_map = acc_raw = None
    for _ in range(config.sg_samples):
        noisy = ad.add(xt, Tensor(rng.normal(0.0, config.sg_sigma, size=xt.shape)))
        g = _vg_raw(model, noisy, label, record)
        m = _reduce_batch(g)
        acc_raw = g if acc_raw is None else ad.add(acc_raw, g)
        acc_map = m if acc_map is None else ad.add(acc_map, m)
    scale = 1.0 / config.sg_samples
    return Explanation(attributions=ad.mul(acc_map, scale)[0],
                       raw=ad.mul(acc_raw, scale)[0], label=label,
                       method="sg", differentiable=record)


def explain_lrp(model: Model, x, label: int, config: Optional[ExplainerConfig] = None,
                record: bool = False) -> Explanation:
    config = config or ExplainerConfig(method="lrp")
    _check_label(model, label)
    xt = _as_input_tensor(x)
    if record:
        raw = _lrp_relevances(model, xt, label, config.lrp_epsilon)[-1]
    else:
        with ad.no_grad():
            raw = _lrp_relevances(model, xt, label, config.lrp_epsilon)[-1]
    reduced = _reduce_batch(raw)
    return Explanation(attributions=reduced[0], raw=raw[0], label=label,
                       method="lrp", differentiable=record)


def explanation_maps(model: Model, x, label: int, config: ExplainerConfig,
                     record: bool = False, seed_offset: int = 0) -> Tensor:
    """Batched (B,H,W) channel-reduced maps for any method; used by losses."""
    if config.method == "vg":
        return vg_maps(model, x, label, record)
    if config.method == "ig":
        return ig_maps(model, x, label, config, record)
    if config.method == "sg":
        return sg_maps(model, x, label, config, record, seed_offset)
    if config.method == "lrp":
        return lrp_maps(model, x, label, config, record)
    raise ValueError(f"unknown method {config.method!r}")


def explain(model: Model, x, label: int, config: ExplainerConfig,
            record: bool = False) -> Explanation:
    if config.method == "vg":
        return explain_vg(model, x, label, record)
    if config.method == "ig":
        return explain_ig(model, x, label, config, record)
    if config.method == "sg":
        return explain_sg(model, x, label, config, record)
    if config.method == "lrp":
        return explain_lrp(model, x, label, config, record)
    raise ValueError(f"unknown method {config.method!r}")


# ---------------------------------------------------------------------------
# export: flat float64 grid + JSON sidecar
# ---------------------------------------------------------------------------

def save_explanation(expl: Explanation, path_base: str, config: ExplainerConfig):
    grid = expl.attributions.data.astype("<f8")
    payload = grid.tobytes()
    with open(path_base + ".bin", "wb") as fh:
        fh.write(payload)
    sidecar = {
        "method": expl.method,
        "label": expl.label,
        "shape": list(grid.shape),
        "config": config.to_dict(),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(path_base + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=2)


def load_explanation(path_base: str):
    with open(path_base + ".json") as fh:
        sidecar = json.load(fh)
    payload = open(path_base + ".bin", "rb").read()
    if hashlib.sha256(payload).hexdigest() != sidecar["sha256"]:
        raise ValueError(f"checksum mismatch for {path_base}.bin")
    grid = np.frombuffer(payload, dtype="<f8").reshape(sidecar["shape"])
    return grid.astype(np.float64), sidecar
