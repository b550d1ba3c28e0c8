"""The texture CNN: two convolutions, a max-pool, energy pooling and a 128/64/3 head.

Data flow for the default configuration::

    input 1x224x224
      conv1 11x11/3 -> relu -> 32x72x72 --------------------+
      maxpool 2/2   -> 32x36x36                             |
      conv2 3x3/1   -> relu -> 64x34x34                     |
      energy(conv2) -> 64       energy(conv1) -> 32  <------+
      concat -> 96 -> fc 128 -> relu -> fc 64 -> relu -> fc 3

The 32-wide branch re-uses the rectified conv1 maps, so the concatenated
texture vector carries responses from both depths while adding no weights.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn

LAYER_NAMES = ("conv1", "conv2", "fc1", "fc2", "output")


@dataclass
class ArchConfig:
    input_size: int = 224
    in_channels: int = 1
    conv1_filters: int = 32
    conv1_kernel: int = 11
    conv1_stride: int = 3
    pool_window: int = 2
    pool_stride: int = 2
    conv2_filters: int = 64
    conv2_kernel: int = 3
    conv2_stride: int = 1
    conv1_reduce: str = "mean"  # "mean" (energy) or "max" over the rectified conv1 maps
    dense1: int = 128
    dense2: int = 64
    classes: int = 3

    def extents(self):
        """Spatial extents after conv1, pool and conv2."""
        c1 = nn.output_extent(self.input_size, self.conv1_kernel, self.conv1_stride)
        p = nn.output_extent(c1, self.pool_window, self.pool_stride)
        c2 = nn.output_extent(p, self.conv2_kernel, self.conv2_stride)
        return {"conv1": c1, "pool": p, "conv2": c2}

    @property
    def texture_width(self):
        return self.conv2_filters + self.conv1_filters

    def param_shapes(self):
        k1, k2 = self.conv1_kernel, self.conv2_kernel
        return {
            "conv1.weight": (self.conv1_filters, self.in_channels, k1, k1),
            "conv1.bias": (self.conv1_filters,),
            "conv2.weight": (self.conv2_filters, self.conv1_filters, k2, k2),
            "conv2.bias": (self.conv2_filters,),
            "fc1.weight": (self.texture_width, self.dense1),
            "fc1.bias": (self.dense1,),
            "fc2.weight": (self.dense1, self.dense2),
            "fc2.bias": (self.dense2,),
            "output.weight": (self.dense2, self.classes),
            "output.bias": (self.classes,),
        }

    def validate(self):
        if self.conv1_reduce not in ("mean", "max"):
            raise ValueError(f"conv1_reduce must be 'mean' or 'max', got {self.conv1_reduce!r}")
        for key, value in asdict(self).items():
            if isinstance(value, int) and value < 1:
                raise ValueError(f"{key} must be positive, got {value}")
        try:
            self.extents()
        except nn.ShapeError as exc:
            raise ValueError(f"inconsistent architecture: {exc}") from None
        return self


def param_table(config=None):
    """Per-layer trainable parameter counts as ``[(layer, count), ...]``."""
    config = config or ArchConfig()
    shapes = config.param_shapes()
    rows = []
    for layer in LAYER_NAMES:
        count = sum(int(np.prod(s)) for k, s in shapes.items() if k.split(".")[0] == layer)
        rows.append((layer, count))
    return rows


class TCNN:
    """Parameters plus forward/backward for the energy-pooling texture CNN.

    Inference never mutates the instance; training code owns the update of
    ``params`` (see :func:`train_step`).
    """

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = (config or ArchConfig()).validate()
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params = self._init_params(seed)

    def _init_params(self, seed):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.config.param_shapes().items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=self.dtype)
                continue
            # conv: fan_in = C*kh*kw; dense weights are (D, M) so fan_in = D
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            limit = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        return params

    def count_params(self, layers=None):
        layers = set(layers or LAYER_NAMES)
        return sum(p.size for k, p in self.params.items() if k.split(".")[0] in layers)

    # ------------------------------------------------------------- forward

    def _check_input(self, x):
        cfg = self.config
        want = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise nn.ShapeError(f"expected input (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")

    def _run(self, x, keep_cols=True):
        cfg, p = self.config, self.params
        self._check_input(x)
        x = x.astype(self.dtype, copy=False)
        ext = cfg.extents()

        c1, k_c1 = nn.conv2d_forward(x, p["conv1.weight"], p["conv1.bias"], cfg.conv1_stride)
        if not keep_cols:
            del k_c1["cols"]
        a1, k_r1 = nn.relu_forward(c1)
        assert a1.shape[2:] == (ext["conv1"], ext["conv1"])
        pooled, k_pool = nn.maxpool2d_forward(a1, cfg.pool_window, cfg.pool_stride)
        c2, k_c2 = nn.conv2d_forward(pooled, p["conv2.weight"], p["conv2.bias"], cfg.conv2_stride)
        if not keep_cols:
            del k_c2["cols"]
        a2, k_r2 = nn.relu_forward(c2)
        assert a2.shape[2:] == (ext["conv2"], ext["conv2"])

        e2, k_e2 = nn.energy_pool_forward(a2)
        if cfg.conv1_reduce == "mean":
            e1, k_e1 = nn.energy_pool_forward(a1)
        else:
            e1, k_e1 = nn.global_max_forward(a1)
        feat, k_cat = nn.concat_forward([e2, e1])

        h1, k_d1 = nn.dense_forward(feat, p["fc1.weight"], p["fc1.bias"])
        r1, k_rd1 = nn.relu_forward(h1)
        h2, k_d2 = nn.dense_forward(r1, p["fc2.weight"], p["fc2.bias"])
        r2, k_rd2 = nn.relu_forward(h2)
        logits, k_out = nn.dense_forward(r2, p["output.weight"], p["output.bias"])

        acts = {"conv1": a1, "conv2": a2, "energy": feat, "fc1": r1, "fc2": r2, "logits": logits}
        cache = {
            "c1": k_c1, "r1": k_r1, "pool": k_pool, "c2": k_c2, "r2": k_r2,
            "e2": k_e2, "e1": k_e1, "cat": k_cat,
            "d1": k_d1, "rd1": k_rd1, "d2": k_d2, "rd2": k_rd2, "out": k_out,
        }
        return logits, acts, cache

    def forward(self, x, capture=False):
        """Logits for a batch (N, C, H, W); with ``capture`` also the activation bundle."""
        logits, acts, _ = self._run(x, keep_cols=False)
        if capture:
            return logits, acts
        return logits

    def predict_proba(self, x, batch_size=64):
        out = []
        for i in range(0, len(x), batch_size):
            out.append(nn.softmax(self.forward(x[i:i + batch_size])))
        return np.concatenate(out) if out else np.zeros((0, self.config.classes), self.dtype)

    # ------------------------------------------------------------- backward

    def backward(self, dlogits, cache, need_input_grad=False):
        """Gradients of every parameter (and optionally the input) given dL/dlogits."""
        cfg = self.config
        g = {}
        dr2, g["output.weight"], g["output.bias"] = nn.dense_backward(dlogits, cache["out"])
        dh2 = nn.relu_backward(dr2, cache["rd2"])
        dr1, g["fc2.weight"], g["fc2.bias"] = nn.dense_backward(dh2, cache["d2"])
        dh1 = nn.relu_backward(dr1, cache["rd1"])
        dfeat, g["fc1.weight"], g["fc1.bias"] = nn.dense_backward(dh1, cache["d1"])

        de2, de1 = nn.concat_backward(dfeat, cache["cat"])
        da2 = nn.energy_pool_backward(de2, cache["e2"])
        dc2 = nn.relu_backward(da2, cache["r2"])
        dpooled, g["conv2.weight"], g["conv2.bias"] = nn.conv2d_backward(dc2, cache["c2"])

        da1 = nn.maxpool2d_backward(dpooled, cache["pool"])
        if cfg.conv1_reduce == "mean":
            da1 += nn.energy_pool_backward(de1, cache["e1"])
        else:
            da1 += nn.global_max_backward(de1, cache["e1"])
        dc1 = nn.relu_backward(da1, cache["r1"])
        dx, g["conv1.weight"], g["conv1.bias"] = nn.conv2d_backward(
            dc1, cache["c1"], need_dx=need_input_grad
        )
        if need_input_grad:
            g["input"] = dx
        return g

    def loss_and_grads(self, x, targets):
        logits, _, cache = self._run(x)
        probs, loss, dlogits = nn.softmax_xent(logits, targets)
        return loss, probs, self.backward(dlogits, cache)


def train_step(model, batch, targets, state, config):
    """One forward/backward pass and optimizer update. Returns the batch loss."""
    if len(batch) != len(targets):
        raise ValueError(f"{len(batch)} inputs but {len(targets)} targets")
    loss, _, grads = model.loss_and_grads(batch, targets)
    if not np.isfinite(loss):
        raise nn.NonFiniteError(f"non-finite loss {loss}; step aborted")
    nn.optimizer_step(model.params, grads, state, config)
    return loss


# ------------------------------------------------------------------ weights file

MAGIC = b"TCNW"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def _encode(params):
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(params))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_weights(model, path):
    """Write parameters as little-endian float32 records; 64-bit models are narrowed."""
    data = _encode(model.params)
    Path(path).write_bytes(data)
    return len(data)


def _decode(data):
    if len(data) < 16 or data[:4] != MAGIC:
        raise WeightsFormatError("not a TCNW weights file (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise WeightsFormatError("CRC mismatch; file is corrupt or truncated")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    pos = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            params[name] = arr
    except (struct.error, ValueError) as exc:
        raise WeightsFormatError(f"malformed record: {exc}") from None
    if pos != len(data) - 4:
        raise WeightsFormatError("trailing bytes after last record")
    return params


def load_weights(path, config=None, dtype=np.float32):
    """Read a weights file into a fresh model, checking every shape against ``config``."""
    params = _decode(Path(path).read_bytes())
    model = TCNN(config, dtype=dtype)
    expected = model.config.param_shapes()
    if list(params) != list(expected):
        raise WeightsFormatError(f"layer records {list(params)} do not match {list(expected)}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise WeightsFormatError(f"{name}: stored {params[name].shape}, architecture wants {shape}")
        model.params[name] = params[name].astype(model.dtype)
    return model


# ------------------------------------------------------------------ activations


def _to_gray8(fmap):
    lo, hi = float(fmap.min()), float(fmap.max())
    if hi <= lo:
        return np.full(fmap.shape, 128, dtype=np.uint8)
    return np.round((fmap - lo) / (hi - lo) * 255).astype(np.uint8)


def export_activations(model, image, layer="conv1"):
    """Min-max normalised 8-bit images of every map in ``layer`` ("conv1" or "conv2")."""
    if layer not in ("conv1", "conv2"):
        raise KeyError(f"unknown layer selector {layer!r}; use 'conv1' or 'conv2'")
    x = np.asarray(image)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[None]
    _, acts = model.forward(x, capture=True)
    return [_to_gray8(m) for m in acts[layer][0]]
