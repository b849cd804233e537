"""Temporal convolutional autoencoder, frame-wise autoencoder and TCN classifier."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .nn import Tensor


class SpecError(ValueError):
    pass


def _spec_dict(spec) -> dict:
    d = asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def spec_hash(spec) -> str:
    payload = json.dumps({"kind": type(spec).__name__, **_spec_dict(spec)}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise SpecError(f"{cls.__name__}: unknown fields {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


@dataclass(frozen=True)
class AutoencoderSpec:
    joints: int
    frames: int
    depth: int = 4
    filter_width: int = 4
    feature_maps: int = 75
    latent_dim: int = 200

    def __post_init__(self):
        if min(self.joints, self.depth, self.filter_width, self.feature_maps) < 1:
            raise SpecError("joints, depth, filter_width and feature_maps must be positive")
        if self.latent_dim < 1:
            raise SpecError("latent dimension must be positive")
        if self.frames % (2**self.depth):
            raise SpecError(
                f"frames={self.frames} is not divisible by 2**depth={2**self.depth}; "
                f"resample to {min_frames(self.frames, self.depth)}"
            )

    @property
    def channels(self) -> int:
        return 3 * self.joints

    @property
    def bottleneck_frames(self) -> int:
        return self.frames // 2**self.depth

    def to_dict(self) -> dict:
        return _spec_dict(self)

    @classmethod
    def from_dict(cls, d) -> "AutoencoderSpec":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class ClassifierSpec:
    joints: int
    frames: int
    classes: int
    block_widths: tuple = (64, 128, 256)
    layers_per_block: int = 1
    filter_width: int = 8

    def __post_init__(self):
        if len(self.block_widths) < 1:
            raise SpecError("classifier needs at least one TCN block")
        if self.classes < 2:
            raise SpecError("classifier needs at least two classes")
        if self.layers_per_block < 1:
            raise SpecError("each block needs at least one convolution")
        if self.frames % (2 ** len(self.block_widths)):
            raise SpecError(f"frames={self.frames} not divisible by 2**blocks={2 ** len(self.block_widths)}")

    @property
    def channels(self) -> int:
        return 3 * self.joints

    def to_dict(self) -> dict:
        return _spec_dict(self)

    @classmethod
    def from_dict(cls, d) -> "ClassifierSpec":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class FramewiseSpec:
    joints: int
    hidden: tuple = (256, 128, 64)
    latent_dim: int = 8

    def __post_init__(self):
        if self.latent_dim < 1 or any(h < 1 for h in self.hidden):
            raise SpecError("frame-wise widths must be positive")

    @property
    def channels(self) -> int:
        return 3 * self.joints

    @property
    def layer_count(self) -> int:
        return 2 * (len(self.hidden) + 1)

    def to_dict(self) -> dict:
        return _spec_dict(self)

    @classmethod
    def from_dict(cls, d) -> "FramewiseSpec":
        return _from_dict(cls, d)


def min_frames(nominal: int, depth: int) -> int:
    """Smallest multiple of ``2**depth`` that is >= ``nominal``."""
    step = 2**depth
    return -(-nominal // step) * step


def _uniform(rng, shape, fan_in, gain=6.0):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Autoencoder:
    """``encode``: (B, 3J, N) -> (B, latent); ``decode``: (B, latent) -> (B, 3J, N)."""

    kind = "autoencoder"

    def __init__(self, spec: AutoencoderSpec, seed=0, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        p = self.params = nn.ParamStore(dtype)
        K, maps, d = spec.filter_width, spec.feature_maps, spec.depth
        for i in range(d):
            cin = spec.channels if i == 0 else maps
            p.add(f"enc.conv{i}.w", _uniform(rng, (maps, cin, K), cin * K))
            p.add(f"enc.conv{i}.b", np.zeros(maps))
        flat = maps * spec.bottleneck_frames
        p.add("enc.fc.w", _uniform(rng, (spec.latent_dim, flat), flat, 3.0))
        p.add("enc.fc.b", np.zeros(spec.latent_dim))
        p.add("dec.fc.w", _uniform(rng, (flat, spec.latent_dim), spec.latent_dim))
        p.add("dec.fc.b", np.zeros(flat))
        for i in range(d):
            cout = spec.channels if i == d - 1 else maps
            fan_in = maps * max(K // 2, 1)
            gain = 3.0 if i == d - 1 else 6.0
            p.add(f"dec.deconv{i}.w", _uniform(rng, (maps, cout, K), fan_in, gain))
            p.add(f"dec.deconv{i}.b", np.zeros(cout))

    def encode(self, x) -> Tensor:
        p, spec = self.params, self.spec
        h = nn.as_tensor(x)
        if h.ndim != 3 or h.shape[1:] != (spec.channels, spec.frames):
            raise nn.ShapeError(f"autoencoder expects (B, {spec.channels}, {spec.frames}), got {h.shape}")
        for i in range(spec.depth):
            h = nn.avg_pool1d(nn.relu(nn.conv1d(h, p[f"enc.conv{i}.w"], p[f"enc.conv{i}.b"])))
        h = nn.reshape(h, (h.shape[0], -1))
        return nn.linear(h, p["enc.fc.w"], p["enc.fc.b"])

    def decode(self, z) -> Tensor:
        p, spec = self.params, self.spec
        z = nn.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != spec.latent_dim:
            raise nn.ShapeError(f"decoder expects (B, {spec.latent_dim}) latents, got {z.shape}")
        h = nn.relu(nn.linear(z, p["dec.fc.w"], p["dec.fc.b"]))
        h = nn.reshape(h, (z.shape[0], spec.feature_maps, spec.bottleneck_frames))
        for i in range(spec.depth):
            h = nn.conv_transpose1d(h, p[f"dec.deconv{i}.w"], p[f"dec.deconv{i}.b"])
            if i < spec.depth - 1:
                h = nn.relu(h)
        return h

    def __call__(self, x) -> Tensor:
        return self.decode(self.encode(x))

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim


class FramewiseAutoencoder:
    """Fully-connected autoencoder applied to every frame independently.

    ``encode`` concatenates the per-frame codes, so a sequence latent has
    ``frames * latent_dim`` entries laid out frame-major.
    """

    kind = "framewise"

    def __init__(self, spec: FramewiseSpec, seed=0, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = nn.ParamStore(dtype)
        widths = [spec.channels, *spec.hidden, spec.latent_dim, *reversed(spec.hidden), spec.channels]
        self._n_layers = len(widths) - 1
        self._bottleneck = len(spec.hidden)
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            linear_out = i in (self._bottleneck, self._n_layers - 1)
            self.params.add(f"fc{i}.w", _uniform(rng, (b, a), a, 3.0 if linear_out else 6.0))
            self.params.add(f"fc{i}.b", np.zeros(b))

    def _run(self, h, start, stop):
        for i in range(start, stop):
            h = nn.linear(h, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i not in (self._bottleneck, self._n_layers - 1):
                h = nn.relu(h)
        return h

    def encode_frames(self, rows) -> Tensor:
        return self._run(nn.as_tensor(rows), 0, self._bottleneck + 1)

    def decode_frames(self, codes) -> Tensor:
        return self._run(nn.as_tensor(codes), self._bottleneck + 1, self._n_layers)

    def encode(self, x) -> Tensor:
        x = nn.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.spec.channels:
            raise nn.ShapeError(f"frame-wise AE expects (B, {self.spec.channels}, N), got {x.shape}")
        b, c, n = x.shape
        rows = nn.reshape(nn.transpose(x, (0, 2, 1)), (b * n, c))
        return nn.reshape(self.encode_frames(rows), (b, n * self.spec.latent_dim))

    def decode(self, z) -> Tensor:
        z = nn.as_tensor(z)
        b = z.shape[0]
        n = z.shape[1] // self.spec.latent_dim
        out = self.decode_frames(nn.reshape(z, (b * n, self.spec.latent_dim)))
        return nn.transpose(nn.reshape(out, (b, n, self.spec.channels)), (0, 2, 1))

    def __call__(self, x) -> Tensor:
        return self.decode(self.encode(x))

    def latent_dim_for(self, frames: int) -> int:
        return frames * self.spec.latent_dim


class TCNClassifier:
    """Residual temporal-convolution blocks, average pooling, global average, FC head."""

    kind = "classifier"

    def __init__(self, spec: ClassifierSpec, seed=0, dtype=np.float32):
        self.spec = spec
        rng = np.random.default_rng(seed)
        p = self.params = nn.ParamStore(dtype)
        K = spec.filter_width
        cin = spec.channels
        for b, width in enumerate(spec.block_widths):
            c = cin
            for l in range(spec.layers_per_block):
                p.add(f"b{b}.conv{l}.w", _uniform(rng, (width, c, K), c * K))
                p.add(f"b{b}.conv{l}.b", np.zeros(width))
                p.add(f"b{b}.bn{l}.scale", np.ones(width))
                p.add(f"b{b}.bn{l}.shift", np.zeros(width))
                p.add_buffer(f"b{b}.bn{l}.mean", np.zeros(width))
                p.add_buffer(f"b{b}.bn{l}.var", np.ones(width))
                c = width
            if cin != width:
                p.add(f"b{b}.proj.w", _uniform(rng, (width, cin, 1), cin, 3.0))
                p.add(f"b{b}.proj.b", np.zeros(width))
            cin = width
        p.add("head.w", _uniform(rng, (spec.classes, cin), cin, 3.0))
        p.add("head.b", np.zeros(spec.classes))

    def features(self, x, training: bool = False) -> Tensor:
        """Penultimate-layer activations (input to the FC head)."""
        p, spec = self.params, self.spec
        h = nn.as_tensor(x)
        if h.ndim != 3 or h.shape[1:] != (spec.channels, spec.frames):
            raise nn.ShapeError(f"classifier expects (B, {spec.channels}, {spec.frames}), got {h.shape}")
        cin = spec.channels
        for b, width in enumerate(spec.block_widths):
            y = h
            for l in range(spec.layers_per_block):
                y = nn.conv1d(y, p[f"b{b}.conv{l}.w"], p[f"b{b}.conv{l}.b"])
                y = nn.batchnorm1d(
                    y,
                    p[f"b{b}.bn{l}.scale"],
                    p[f"b{b}.bn{l}.shift"],
                    p.buffer(f"b{b}.bn{l}.mean"),
                    p.buffer(f"b{b}.bn{l}.var"),
                    training,
                )
                y = nn.relu(y)
            res = h if cin == width else nn.conv1d(h, p[f"b{b}.proj.w"], p[f"b{b}.proj.b"])
            h = nn.avg_pool1d(nn.add(y, res))
            cin = width
        return nn.mean_time(h)

    def logits(self, x, training: bool = False) -> Tensor:
        return nn.linear(self.features(x, training), self.params["head.w"], self.params["head.b"])

    __call__ = logits

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(np.argmax(self.logits(x[i : i + batch_size]).data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


def build_autoencoder(spec: AutoencoderSpec, seed=0, dtype=np.float32) -> Autoencoder:
    return Autoencoder(spec, seed, dtype)


def build_framewise_ae(spec: FramewiseSpec, seed=0, dtype=np.float32) -> FramewiseAutoencoder:
    return FramewiseAutoencoder(spec, seed, dtype)


def build_classifier(spec: ClassifierSpec, seed=0, dtype=np.float32) -> TCNClassifier:
    return TCNClassifier(spec, seed, dtype)


_KINDS = {
    "autoencoder": (AutoencoderSpec, Autoencoder),
    "framewise": (FramewiseSpec, FramewiseAutoencoder),
    "classifier": (ClassifierSpec, TCNClassifier),
}


def save_model(path, model, extra: Optional[dict] = None, meta: Optional[dict] = None) -> Path:
    """Checkpoint tagged with the model kind, spec and spec hash.

    ``extra`` arrays (e.g. fill statistics) are stored under ``extra:<name>``.
    """
    arrays = dict(model.params.state_dict())
    for name, value in (extra or {}).items():
        arrays[f"extra:{name}"] = value
    info = {
        "kind": model.kind,
        "spec": model.spec.to_dict(),
        "spec_hash": spec_hash(model.spec),
        **(meta or {}),
    }
    return nn.save_arrays(path, arrays, info)


def load_model(path, expected_spec=None):
    """Rebuild a model from its checkpoint; returns ``(model, extra_arrays, meta)``."""
    arrays, meta = nn.load_arrays(path)
    try:
        spec_cls, model_cls = _KINDS[meta["kind"]]
    except KeyError as exc:
        raise nn.CheckpointError(f"{path}: unknown or missing model kind") from exc
    spec = spec_cls.from_dict(meta["spec"])
    if spec_hash(spec) != meta.get("spec_hash"):
        raise nn.CheckpointError(f"{path}: spec hash does not match the stored spec")
    if expected_spec is not None and spec_hash(expected_spec) != meta["spec_hash"]:
        raise nn.CheckpointError(f"{path}: checkpoint was trained for a different spec")
    model = model_cls(spec)
    model.params.load_state_dict({k: v for k, v in arrays.items() if not k.startswith("extra:")})
    extra = {k[len("extra:") :]: v for k, v in arrays.items() if k.startswith("extra:")}
    return model, extra, meta
