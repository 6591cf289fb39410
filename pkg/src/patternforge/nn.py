"""Layers and the two pattern networks.

``Classifier`` maps a batch of 1-D patterns to (embeddings, logits) through
a stack of convolution/pool stages and a dense embedding head. ``Refiner``
is a small encoder-decoder with skip connections whose output has the same
length as its input and is clamped into [0, 1].

Both are described by ordered ``LayerSpec`` lists, which also serve as the
checkpoint header, so a saved model can be rebuilt without the builder that
produced it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (Tensor, TensorError, accumulate_grad, add_rowvec, clip01,
                     concat, matmul, record_op)

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated or wrong-kind checkpoint file."""


# -- differentiable layer primitives ------------------------------------------


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, same: bool = True) -> Tensor:
    """1-D cross-correlation of (n, c_in, d) input with a (c_out, c_in, k) kernel.

    A 2-D (c_in, d) input is treated as a single sample and returned 2-D.
    """
    if kernel.data.ndim != 3:
        raise TensorError("conv1d: kernel must be (c_out, c_in, k)")
    if stride < 1:
        raise TensorError("conv1d: stride must be positive")
    squeeze = x.data.ndim == 2
    x3 = x.data[None] if squeeze else x.data
    if x3.ndim != 3 or x3.shape[1] != kernel.data.shape[1]:
        raise TensorError(
            f"conv1d: input {x.data.shape} does not match kernel {kernel.data.shape}"
        )
    n, c_in, d = x3.shape
    c_out, _, k = kernel.data.shape
    if same:
        out_len = -(-d // stride)
        pad_total = max((out_len - 1) * stride + k - d, 0)
    else:
        out_len = (d - k) // stride + 1
        pad_total = 0
    if k > d + pad_total or out_len < 1:
        raise TensorError(f"conv1d: kernel width {k} exceeds padded input length")
    pad_left = pad_total // 2
    xp = np.pad(x3, ((0, 0), (0, 0), (pad_left, pad_total - pad_left)))
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    out = np.einsum("nitk,oik->not", win, kernel.data)

    def bwd(g, x=x, kernel=kernel, win=win, xp_shape=xp.shape,
            pad_left=pad_left, d=d, stride=stride, k=k, out_len=out_len,
            squeeze=squeeze):
        if kernel.requires_grad:
            accumulate_grad(kernel, np.einsum("nitk,not->oik", win, g))
        if x.requires_grad:
            m = np.einsum("not,oik->nitk", g, kernel.data)
            gp = np.zeros(xp_shape)
            span = (out_len - 1) * stride + 1
            for j in range(k):
                gp[:, :, j:j + span:stride] += m[:, :, :, j]
            gx = gp[:, :, pad_left:pad_left + d]
            accumulate_grad(x, gx[0] if squeeze else gx)

    return record_op(out[0] if squeeze else out, (x, kernel), bwd, op="conv1d")


def maxpool1d(x: Tensor, width: int) -> Tensor:
    """Non-overlapping max pooling along the last axis; remainder truncated."""
    if width < 1:
        raise TensorError("maxpool1d: width must be positive")
    squeeze = x.data.ndim == 2
    x3 = x.data[None] if squeeze else x.data
    n, c, d = x3.shape
    d_out = d // width
    if d_out < 1:
        raise TensorError(f"maxpool1d: width {width} exceeds input length {d}")
    blocks = x3[:, :, : d_out * width].reshape(n, c, d_out, width)
    idx = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, idx[..., None], axis=3)[..., 0]

    def bwd(g, x=x, idx=idx, n=n, c=c, d=d, d_out=d_out, width=width,
            squeeze=squeeze):
        if not x.requires_grad:
            return
        gz = np.zeros((n, c, d_out, width))
        np.put_along_axis(gz, idx[..., None], g.reshape(n, c, d_out)[..., None], axis=3)
        buf = np.zeros((n, c, d))
        buf[:, :, : d_out * width] = gz.reshape(n, c, d_out * width)
        accumulate_grad(x, buf[0] if squeeze else buf)

    return record_op(out[0] if squeeze else out, (x,), bwd, op="maxpool1d")


def upsample1d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour repetition along the last axis."""
    if factor < 1:
        raise TensorError("upsample1d: factor must be positive")
    squeeze = x.data.ndim == 2
    x3 = x.data[None] if squeeze else x.data
    n, c, d = x3.shape
    out = np.repeat(x3, factor, axis=2)

    def bwd(g, x=x, n=n, c=c, d=d, factor=factor, squeeze=squeeze):
        gx = g.reshape(n, c, d, factor).sum(axis=3)
        accumulate_grad(x, gx[0] if squeeze else gx)

    return record_op(out[0] if squeeze else out, (x,), bwd, op="upsample1d")


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to an (n, c, d) activation."""
    if x.data.ndim != 3 or bias.data.shape != (x.data.shape[1],):
        raise TensorError("add_channel_bias: expected (n,c,d) input and (c,) bias")

    def bwd(g, x=x, bias=bias):
        accumulate_grad(x, g)
        accumulate_grad(bias, g.sum(axis=(0, 2)))

    return record_op(x.data + bias.data[None, :, None], (x, bias), bwd,
                     op="add_channel_bias")


# -- layer specs and sequential execution -------------------------------------

_KINDS = ("conv1d", "dense", "relu", "maxpool1d", "upsample1d", "skip-concat")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network: a kind plus its integer hyperparameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key, value in self.params.items():
            if key != "same" and int(value) < (0 if key == "source" else 1):
                raise ValueError(f"{self.kind}: hyperparameter {key}={value} invalid")


def conv(out_channels: int, kernel: int, stride: int = 1, same: bool = True) -> LayerSpec:
    return LayerSpec("conv1d", {"out_channels": out_channels, "kernel": kernel,
                                "stride": stride, "same": int(same)})


def dense(units: int) -> LayerSpec:
    return LayerSpec("dense", {"units": units})


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool(width: int) -> LayerSpec:
    return LayerSpec("maxpool1d", {"width": width})


def upsample(factor: int) -> LayerSpec:
    return LayerSpec("upsample1d", {"factor": factor})


def skip_concat(source: int) -> LayerSpec:
    return LayerSpec("skip-concat", {"source": source})


class _Sequence:
    """Allocates parameters for a LayerSpec list and runs it on batches."""

    def __init__(self, specs, prefix, in_channels, in_length, params,
                 source_shapes=None, rng_order=None):
        self.specs = list(specs)
        self.prefix = prefix
        self.out_shapes = []  # per-layer (channels, length) or ("vec", units)
        shape = ("map", in_channels, in_length)
        for i, spec in enumerate(self.specs):
            p = spec.params
            if spec.kind == "conv1d":
                if shape[0] != "map":
                    raise ValueError("conv1d after dense is not supported")
                _, c, d = shape
                k, stride = p["kernel"], p["stride"]
                if p["same"]:
                    out_len = -(-d // stride)
                else:
                    if k > d:
                        raise ValueError(f"conv1d kernel {k} exceeds input length {d}")
                    out_len = (d - k) // stride + 1
                name = f"{prefix}{i}"
                params[f"{name}.w"] = Tensor(
                    np.zeros((p["out_channels"], c, k)), requires_grad=True)
                params[f"{name}.b"] = Tensor(
                    np.zeros(p["out_channels"]), requires_grad=True)
                shape = ("map", p["out_channels"], out_len)
            elif spec.kind == "dense":
                feats = shape[1] * shape[2] if shape[0] == "map" else shape[1]
                name = f"{prefix}{i}"
                params[f"{name}.w"] = Tensor(
                    np.zeros((feats, p["units"])), requires_grad=True)
                params[f"{name}.b"] = Tensor(np.zeros(p["units"]), requires_grad=True)
                shape = ("vec", p["units"])
            elif spec.kind == "relu":
                pass
            elif spec.kind == "maxpool1d":
                _, c, d = shape
                d_out = d // p["width"]
                if d_out < 1:
                    raise ValueError(f"maxpool width {p['width']} exceeds length {d}")
                shape = ("map", c, d_out)
            elif spec.kind == "upsample1d":
                _, c, d = shape
                shape = ("map", c, d * p["factor"])
            elif spec.kind == "skip-concat":
                if source_shapes is None:
                    raise ValueError("skip-concat outside an encoder/decoder pair")
                src = source_shapes[p["source"]]
                if src[2] != shape[2]:
                    raise ValueError(
                        f"skip-concat length mismatch: {src[2]} vs {shape[2]}")
                shape = ("map", shape[1] + src[1], shape[2])
            self.out_shapes.append(shape)
        self.out_shape = shape

    def run(self, x: Tensor, params, sources=None):
        acts = []
        for i, spec in enumerate(self.specs):
            p = spec.params
            if spec.kind == "conv1d":
                name = f"{self.prefix}{i}"
                x = conv1d(x, params[f"{name}.w"], stride=p["stride"],
                           same=bool(p["same"]))
                x = add_channel_bias(x, params[f"{name}.b"])
            elif spec.kind == "dense":
                if x.data.ndim == 3:
                    n = x.data.shape[0]
                    x = x.reshape(n, x.data.shape[1] * x.data.shape[2])
                name = f"{self.prefix}{i}"
                x = add_rowvec(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])
            elif spec.kind == "relu":
                x = x.relu()
            elif spec.kind == "maxpool1d":
                x = maxpool1d(x, p["width"])
            elif spec.kind == "upsample1d":
                x = upsample1d(x, p["factor"])
            elif spec.kind == "skip-concat":
                x = concat([x, sources[p["source"]]], axis=1)
            acts.append(x)
        return x, acts


# -- models --------------------------------------------------------------------


class Classifier:
    """Embedding network plus a dense prediction head over its output."""

    kind = "classifier"

    def __init__(self, embed_layers, head_layers, length: int, classes: int):
        self.length = length
        self.classes = classes
        self.params: dict[str, Tensor] = {}
        self.embed = _Sequence(embed_layers, "embed.", 1, length, self.params)
        if self.embed.out_shape[0] != "vec":
            raise ValueError("embedding layers must end in a dense layer")
        self.embed_dim = self.embed.out_shape[1]
        self.head = _Sequence(head_layers, "head.", self.embed_dim, 1, self.params)
        if self.head.out_shape != ("vec", classes):
            raise ValueError("head layers must produce one logit per class")

    def forward(self, batch: Tensor) -> tuple[Tensor, Tensor]:
        """Batch of (n, d) patterns -> (n, m) embeddings and (n, l) logits."""
        if batch.data.ndim != 2 or batch.data.shape[1] != self.length:
            raise TensorError(
                f"classifier expects (n, {self.length}) input, got {batch.data.shape}")
        n = batch.data.shape[0]
        x = batch.reshape(n, 1, self.length)
        emb, _ = self.embed.run(x, self.params)
        logits, _ = self.head.run(emb, self.params)
        return emb, logits

    def spec_header(self) -> dict:
        return {
            "kind": self.kind,
            "length": self.length,
            "classes": self.classes,
            "layers": {
                "embed": _specs_to_json(self.embed.specs),
                "head": _specs_to_json(self.head.specs),
            },
        }

    @classmethod
    def from_header(cls, header: dict) -> "Classifier":
        return cls(
            _specs_from_json(header["layers"]["embed"]),
            _specs_from_json(header["layers"]["head"]),
            header["length"],
            header["classes"],
        )


class Refiner:
    """Encoder-decoder that rewrites a pattern without changing its length.

    Decoder ``skip-concat`` layers reference encoder layer indices. The
    decoder output is a correction added onto the input, so a zero-output
    decoder is the identity map; the sum is clamped into [0, 1], passing
    gradient only for values strictly inside the range.
    """

    kind = "refiner"

    def __init__(self, encoder_layers, decoder_layers, length: int):
        self.length = length
        self.params: dict[str, Tensor] = {}
        self.encoder = _Sequence(encoder_layers, "enc.", 1, length, self.params)
        enc_shapes = [("map", 1, length)] + self.encoder.out_shapes
        # decoder skips address encoder outputs by layer index (-1 = raw input)
        self.decoder = _Sequence(
            decoder_layers, "dec.",
            self.encoder.out_shape[1], self.encoder.out_shape[2],
            self.params,
            source_shapes={i - 1: s for i, s in enumerate(enc_shapes)},
        )
        if self.decoder.out_shape != ("map", 1, length):
            raise ValueError(
                f"decoder must restore shape (1, {length}), got {self.decoder.out_shape}")
        # training starts at the identity map: the last correction conv is
        # left at zero by init_parameters
        last_conv = max(i for i, s in enumerate(self.decoder.specs)
                        if s.kind == "conv1d")
        self.zero_init_params = (f"dec.{last_conv}.w",)

    def forward(self, batch: Tensor) -> Tensor:
        """Batch of (n, d) patterns -> refined (n, d) patterns in [0, 1]."""
        if batch.data.ndim != 2 or batch.data.shape[1] != self.length:
            raise TensorError(
                f"refiner expects (n, {self.length}) input, got {batch.data.shape}")
        n = batch.data.shape[0]
        x = batch.reshape(n, 1, self.length)
        bottom, enc_acts = self.encoder.run(x, self.params)
        sources = {i - 1: a for i, a in enumerate([x] + enc_acts)}
        correction, _ = self.decoder.run(bottom, self.params, sources=sources)
        return clip01(x + correction).reshape(n, self.length)

    def spec_header(self) -> dict:
        return {
            "kind": self.kind,
            "length": self.length,
            "layers": {
                "encoder": _specs_to_json(self.encoder.specs),
                "decoder": _specs_to_json(self.decoder.specs),
            },
        }

    @classmethod
    def from_header(cls, header: dict) -> "Refiner":
        return cls(
            _specs_from_json(header["layers"]["encoder"]),
            _specs_from_json(header["layers"]["decoder"]),
            header["length"],
        )


def build_classifier(length: int, classes: int, embed_dim: int = 32,
                     channels: tuple[int, ...] = (8, 16, 32), kernel: int = 5,
                     pool: int = 2) -> Classifier:
    """Default classifier: conv/relu/pool stages, then a dense embedding."""
    layers = []
    for c in channels:
        layers += [conv(c, kernel), relu(), maxpool(pool)]
    layers.append(dense(embed_dim))
    return Classifier(layers, [dense(classes)], length, classes)


def build_refiner(length: int, base_channels: int = 8, kernel: int = 3) -> Refiner:
    """Default refiner: two pooling levels down, two upsampling levels back,
    one skip concatenation per level, and a width-1 output convolution."""
    if length % 4 != 0:
        raise ValueError("refiner input length must be divisible by 4")
    b = base_channels
    encoder = [
        conv(b, kernel), relu(),          # index 1: full-resolution skip
        maxpool(2),
        conv(2 * b, kernel), relu(),      # index 4: half-resolution skip
        maxpool(2),
        conv(2 * b, kernel), relu(),
    ]
    decoder = [
        upsample(2), skip_concat(4),
        conv(b, kernel), relu(),
        upsample(2), skip_concat(1),
        conv(b, kernel), relu(),
        conv(1, 1),
    ]
    return Refiner(encoder, decoder, length)


def init_parameters(model, seed: int) -> None:
    """Fan-in-scaled uniform weights (He-style bounds), zero biases.

    Deterministic for a given seed; parameter order is the allocation order.
    Layers a model lists in ``zero_init_params`` stay zero (the refiner's
    final correction conv, so training starts at the identity map).
    """
    rng = np.random.default_rng(seed)
    skip = getattr(model, "zero_init_params", ())
    for name, p in model.params.items():
        if name.endswith(".w") and name not in skip:
            if p.data.ndim == 3:  # conv: (c_out, c_in, k)
                fan_in = p.data.shape[1] * p.data.shape[2]
            else:  # dense: (in, out)
                fan_in = p.data.shape[0]
            bound = np.sqrt(6.0 / fan_in)
            p.data[...] = rng.uniform(-bound, bound, size=p.data.shape)
        else:
            p.data[...] = 0.0


def freeze(model) -> None:
    for p in model.params.values():
        p.requires_grad = False


def unfreeze(model) -> None:
    for p in model.params.values():
        p.requires_grad = True


# -- checkpoint file format ----------------------------------------------------


def _specs_to_json(specs):
    return [[s.kind, {k: int(v) for k, v in sorted(s.params.items())}] for s in specs]


def _specs_from_json(items):
    return [LayerSpec(kind, dict(params)) for kind, params in items]


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError("truncated checkpoint file")
    return raw


def _read_str(fh) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_checkpoint(path, model, extra: dict[str, np.ndarray] | None = None) -> None:
    """Write model kind, layer specs and all parameter tensors.

    ``extra`` tensors (e.g. class prototypes) are stored with the same record
    format after the parameters.
    """
    records = [(name, p.data) for name, p in model.params.items()]
    records += [(name, np.asarray(arr, dtype=np.float64))
                for name, arr in (extra or {}).items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        _write_str(fh, model.kind)
        _write_str(fh, json.dumps(model.spec_header(), sort_keys=True,
                                  separators=(",", ":")))
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint: returns (model, extra-tensor dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"not a checkpoint file (magic {magic!r}, expected {CHECKPOINT_MAGIC!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        kind = _read_str(fh)
        header = json.loads(_read_str(fh))
        if kind == "classifier":
            model = Classifier.from_header(header)
        elif kind == "refiner":
            model = Refiner.from_header(header)
        else:
            raise CheckpointError(f"unknown model kind {kind!r}")
        (n_records,) = struct.unpack("<I", _read_exact(fh, 4))
        extra: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8")
            data = data.reshape(shape).astype(np.float64)
            if name in model.params:
                if model.params[name].data.shape != data.shape:
                    raise CheckpointError(f"parameter {name} has shape {data.shape}, "
                                          f"expected {model.params[name].data.shape}")
                model.params[name].data[...] = data
            else:
                extra[name] = data
    return model, extra
