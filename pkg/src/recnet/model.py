"""The Siamese encoder / decoder / tail network and its weight files.

Two profiles are provided:

``kitti``
    1x64x900 range images, bottleneck 256x64. Layer shapes follow the
    published architecture table: ten valid-padding convolutions down to
    256x1x64, ten transposed convolutions back up to 1x64x900.
``mini``
    1x32x450 images (32-beam sensors), bottleneck 128x32, eight layers per
    leg. The interior schedule is this package's own choice.

Encoder row 4 of the KITTI table is listed with kernel (2, 12), which maps a
width of 102 to 91 rather than the listed 90; a (2, 13) kernel is used so the
output shapes hold. Decoder row 3 needs to go from width 68 to 70 with a
width-5 kernel, which is done with a padding of one column on each side.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from recnet.engine import (
    Conv2dSpec,
    ConvTranspose2dSpec,
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    dense,
    parameter,
    prelu,
    sigmoid,
)
from recnet.errors import FormatError, ShapeError
from recnet.projection import ProjectionConfig, RangeImage

PRELU_INIT = 0.25

RWTS_MAGIC = b"RWTS"
RWTS_VERSION = 1


@dataclass(frozen=True)
class ModelProfile:
    name: str
    profile_id: int
    input_shape: tuple[int, int, int]
    encoder: tuple[Conv2dSpec, ...]
    decoder: tuple[ConvTranspose2dSpec, ...]
    tail: tuple[Conv2dSpec, ...]

    @property
    def bottleneck_shape(self) -> tuple[int, int]:
        c, _, w = self.encoder_shapes()[-1]
        return c, w

    @property
    def tail_flat_size(self) -> int:
        h, w = self.bottleneck_shape
        for spec in self.tail:
            h, w = spec.output_size(h, w)
        return self.tail[-1].out_channels * h * w

    def projection(self, **overrides) -> ProjectionConfig:
        _, h, w = self.input_shape
        if self.name == "kitti":
            return ProjectionConfig.kitti(width=w, height=h, **overrides)
        return ProjectionConfig.os1_32(width=w, height=h, **overrides)

    def encoder_shapes(self) -> list[tuple[int, int, int]]:
        c, h, w = self.input_shape
        shapes = []
        for spec in self.encoder:
            h, w = spec.output_size(h, w)
            shapes.append((spec.out_channels, h, w))
        return shapes

    def decoder_shapes(self) -> list[tuple[int, int, int]]:
        c, w = self.bottleneck_shape
        h = 1
        shapes = []
        for spec in self.decoder:
            h, w = spec.output_size(h, w)
            shapes.append((spec.out_channels, h, w))
        return shapes


def _enc(cin, cout, kernel, stride=(1, 1)):
    return Conv2dSpec(cin, cout, kernel, stride)


def _dec(cin, cout, kernel, stride, target, padding=(0, 0)):
    return ConvTranspose2dSpec(cin, cout, kernel, stride, target, padding)


KITTI = ModelProfile(
    name="kitti",
    profile_id=0,
    input_shape=(1, 64, 900),
    encoder=(
        _enc(1, 16, (5, 15), (2, 2)),
        _enc(16, 16, (3, 15), (2, 2)),
        _enc(16, 32, (3, 13), (2, 2)),
        _enc(32, 32, (2, 13), (2, 1)),
        _enc(32, 64, (2, 9), (2, 1)),
        _enc(64, 64, (1, 7)),
        _enc(64, 128, (1, 5)),
        _enc(128, 128, (1, 5)),
        _enc(128, 256, (1, 3)),
        _enc(256, 256, (1, 3)),
    ),
    decoder=(
        _dec(256, 256, (1, 3), (1, 1), (1, 66)),
        _dec(256, 128, (1, 3), (1, 1), (1, 68)),
        _dec(128, 128, (1, 5), (1, 1), (1, 70), padding=(0, 1)),
        _dec(128, 64, (1, 5), (1, 1), (1, 74)),
        _dec(64, 64, (1, 7), (1, 1), (1, 82)),
        _dec(64, 32, (2, 9), (2, 1), (2, 90)),
        _dec(32, 32, (2, 12), (2, 1), (5, 102)),
        _dec(32, 16, (3, 13), (2, 2), (13, 215)),
        _dec(16, 16, (3, 15), (2, 2), (30, 443)),
        _dec(16, 1, (5, 15), (2, 2), (64, 900)),
    ),
    tail=(
        _enc(1, 32, (9, 9), (5, 5)),
        _enc(32, 64, (5, 5), (3, 3)),
        _enc(64, 128, (3, 3)),
    ),
)

MINI = ModelProfile(
    name="mini",
    profile_id=1,
    input_shape=(1, 32, 450),
    encoder=(
        _enc(1, 16, (4, 15), (2, 2)),
        _enc(16, 16, (3, 15), (2, 2)),
        _enc(16, 32, (3, 13), (2, 2)),
        _enc(32, 32, (3, 5)),
        _enc(32, 64, (1, 3)),
        _enc(64, 64, (1, 3)),
        _enc(64, 128, (1, 3)),
        _enc(128, 128, (1, 4)),
    ),
    decoder=(
        _dec(128, 128, (1, 4), (1, 1), (1, 35)),
        _dec(128, 64, (1, 3), (1, 1), (1, 37)),
        _dec(64, 64, (1, 3), (1, 1), (1, 39)),
        _dec(64, 32, (1, 3), (1, 1), (1, 41)),
        _dec(32, 32, (3, 5), (1, 1), (3, 45)),
        _dec(32, 16, (3, 13), (2, 2), (7, 102)),
        _dec(16, 16, (3, 15), (2, 2), (15, 218)),
        _dec(16, 1, (4, 15), (2, 2), (32, 450)),
    ),
    tail=(
        _enc(1, 32, (9, 9), (5, 5)),
        _enc(32, 64, (5, 5), (3, 3)),
        _enc(64, 128, (3, 1)),
    ),
)

PROFILES = {p.name: p for p in (KITTI, MINI)}
PROFILES_BY_ID = {p.profile_id: p for p in (KITTI, MINI)}


def get_profile(name: str) -> ModelProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def _has_batchnorm(index: int, n_layers: int, leg: str) -> bool:
    # 1-based even layers; the decoder's output layer is left unnormalized
    if leg == "decoder" and index == n_layers - 1:
        return False
    return index % 2 == 1


class RecNet:
    """Shared-weight encoder legs, a single decoder leg and the similarity tail.

    Parameters are held in ``self.params`` (trainable tensors) and batch-norm
    running statistics in ``self.buffers``; both are keyed by dotted names.
    """

    def __init__(self, profile: ModelProfile | str = "kitti", seed: int = 0):
        self.profile = get_profile(profile) if isinstance(profile, str) else profile
        self.training = True
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._build(np.random.default_rng(seed))

    # construction --------------------------------------------------------

    def _kaiming(self, rng, shape, fan_in) -> np.ndarray:
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def _add(self, name, value):
        self.params[name] = parameter(np.asarray(value, dtype=np.float32), name=name)

    def _build(self, rng) -> None:
        p = self.profile
        for leg, specs in (("encoder", p.encoder), ("decoder", p.decoder)):
            for i, s in enumerate(specs):
                kh, kw = s.kernel
                pre = f"{leg}.{i}"
                if leg == "encoder":
                    shape = (s.out_channels, s.in_channels, kh, kw)
                    fan_in = s.in_channels * kh * kw
                else:
                    shape = (s.in_channels, s.out_channels, kh, kw)
                    fan_in = max(1, s.in_channels * kh * kw // (s.stride[0] * s.stride[1]))
                self._add(f"{pre}.weight", self._kaiming(rng, shape, fan_in))
                self._add(f"{pre}.bias", np.zeros(s.out_channels))
                if _has_batchnorm(i, len(specs), leg):
                    self._add(f"{pre}.bn.gamma", np.ones(s.out_channels))
                    self._add(f"{pre}.bn.beta", np.zeros(s.out_channels))
                    self.buffers[f"{pre}.bn.running_mean"] = np.zeros(s.out_channels, dtype=np.float32)
                    self.buffers[f"{pre}.bn.running_var"] = np.ones(s.out_channels, dtype=np.float32)
                if i < len(specs) - 1:
                    self._add(f"{pre}.prelu", np.full(1, PRELU_INIT))
        for i, s in enumerate(p.tail):
            kh, kw = s.kernel
            self._add(f"tail.{i}.weight", self._kaiming(rng, (s.out_channels, s.in_channels, kh, kw), s.in_channels * kh * kw))
            self._add(f"tail.{i}.bias", np.zeros(s.out_channels))
            self._add(f"tail.{i}.prelu", np.full(1, PRELU_INIT))
        n = p.tail_flat_size
        self._add("tail.dense.weight", self._kaiming(rng, (1, n), n))
        self._add("tail.dense.bias", np.zeros(1))

    # mode ----------------------------------------------------------------

    def train(self) -> RecNet:
        self.training = True
        return self

    def eval(self) -> RecNet:
        self.training = False
        return self

    # forward passes ------------------------------------------------------

    def _layer_post(self, h: Tensor, pre: str) -> Tensor:
        if f"{pre}.bn.gamma" in self.params:
            h = batchnorm2d(
                h,
                self.params[f"{pre}.bn.gamma"],
                self.params[f"{pre}.bn.beta"],
                self.buffers[f"{pre}.bn.running_mean"],
                self.buffers[f"{pre}.bn.running_var"],
                self.training,
                name=pre,
            )
        if f"{pre}.prelu" in self.params:
            h = prelu(h, self.params[f"{pre}.prelu"])
        return h

    @staticmethod
    def _batched(x: Tensor | np.ndarray, ndim: int) -> tuple[Tensor, bool]:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim == ndim - 1:
            return x.reshape((1,) + x.shape), True
        return x, False

    def encode(self, image, trace: list | None = None) -> Tensor:
        """``(N, 1, H, W)`` normalized images to ``(N, C, W_b)`` bottlenecks."""
        x, single = self._batched(image, 4)
        if tuple(x.shape[1:]) != self.profile.input_shape:
            raise ShapeError(
                f"encoder.0: input shape {tuple(x.shape[1:])} does not match profile "
                f"{self.profile.name} {self.profile.input_shape}"
            )
        for i, s in enumerate(self.profile.encoder):
            pre = f"encoder.{i}"
            x = conv2d(x, self.params[f"{pre}.weight"], self.params[f"{pre}.bias"], s.stride, name=pre)
            x = self._layer_post(x, pre)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
        n, c, h, w = x.shape
        beta = x.reshape(n, c, w)
        return beta.reshape(beta.shape[1:]) if single else beta

    def decode(self, beta, trace: list | None = None) -> Tensor:
        """Bottlenecks ``(N, C, W_b)`` to ``(N, 1, H, W)`` normalized images.

        In eval mode the output is clamped to ``[0, 1]``.
        """
        b, single = self._batched(beta, 3)
        if tuple(b.shape[1:]) != self.profile.bottleneck_shape:
            raise ShapeError(
                f"decoder.0: bottleneck shape {tuple(b.shape[1:])} does not match profile "
                f"{self.profile.name} {self.profile.bottleneck_shape}"
            )
        x = b.reshape(b.shape[0], b.shape[1], 1, b.shape[2])
        for i, s in enumerate(self.profile.decoder):
            pre = f"decoder.{i}"
            x = conv_transpose2d(
                x,
                self.params[f"{pre}.weight"],
                self.params[f"{pre}.bias"],
                s.stride,
                target=s.target,
                padding=s.padding,
                name=pre,
            )
            x = self._layer_post(x, pre)
            if trace is not None:
                trace.append(tuple(x.shape[1:]))
        if not self.training:
            x = Tensor(np.clip(x.data, 0.0, 1.0))
        return x.reshape(x.shape[1:]) if single else x

    def tail_logit(self, beta1, beta2) -> Tensor:
        b1, single = self._batched(beta1, 3)
        b2, _ = self._batched(beta2, 3)
        expected = self.profile.bottleneck_shape
        if tuple(b1.shape[1:]) != expected or tuple(b2.shape[1:]) != expected:
            raise ShapeError(f"tail: bottlenecks {b1.shape[1:]} / {b2.shape[1:]} do not match {expected}")
        delta = b1 - b2
        x = delta.reshape(delta.shape[0], 1, delta.shape[1], delta.shape[2])
        for i, s in enumerate(self.profile.tail):
            pre = f"tail.{i}"
            x = conv2d(x, self.params[f"{pre}.weight"], self.params[f"{pre}.bias"], s.stride, name=pre)
            x = prelu(x, self.params[f"{pre}.prelu"])
        x = dense(x.reshape(x.shape[0], -1), self.params["tail.dense.weight"], self.params["tail.dense.bias"])
        x = x.reshape(x.shape[0])
        return x.reshape(()) if single else x

    def tail(self, beta1, beta2) -> Tensor:
        """Similarity score in (0, 1) for each bottleneck pair."""
        return sigmoid(self.tail_logit(beta1, beta2))

    def forward(self, image1, image2) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Run both legs: returns ``(reconstruction of image1, score, beta1, beta2)``.

        The two legs go through the encoder as one batch, so they share
        weights and (in training mode) batch statistics.
        """
        x1, single = self._batched(image1, 4)
        x2, _ = self._batched(image2, 4)
        n = x1.shape[0]
        betas = self.encode(concat([x1, x2], axis=0))
        beta1, beta2 = betas[:n], betas[n:]
        recon = self.decode(beta1)
        score = self.tail(beta1, beta2)
        if single:
            return recon.reshape(recon.shape[1:]), score.reshape(()), beta1.reshape(beta1.shape[1:]), beta2.reshape(beta2.shape[1:])
        return recon, score, beta1, beta2

    # state ---------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data for k, p in self.params.items()}
        state.update(self.buffers)
        return dict(sorted(state.items()))

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = self.state_dict()
        for name, ref in expected.items():
            if name not in state:
                raise ShapeError(f"missing tensor {name!r} for profile {self.profile.name}")
            if tuple(np.shape(state[name])) != ref.shape:
                raise ShapeError(f"tensor {name!r}: shape {np.shape(state[name])} but profile expects {ref.shape}")
        extra = sorted(set(state) - set(expected))
        if extra:
            raise ShapeError(f"unexpected tensor {extra[0]!r} for profile {self.profile.name}")
        for name in expected:
            value = np.array(state[name], dtype=np.float32)
            if name in self.params:
                self.params[name].data = value
            else:
                self.buffers[name] = value

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def siamese_forward(model: RecNet, image1, image2):
    recon, score, _, _ = model.forward(image1, image2)
    return recon, score


# normalization at the network boundary -----------------------------------


def to_network(images, max_range: float | None = None) -> Tensor:
    """Stack range images into a normalized ``(N, 1, H, W)`` tensor."""
    if isinstance(images, RangeImage):
        images = [images]
    arrays = []
    for img in images:
        scale = max_range if max_range is not None else img.config.max_range
        arrays.append(np.asarray(img.data, dtype=np.float32) / np.float32(scale))
    return Tensor(np.stack(arrays)[:, None])


def from_network(output, config: ProjectionConfig) -> list[RangeImage]:
    """Undo normalization; cells outside the valid range window become empty."""
    data = output.data if isinstance(output, Tensor) else np.asarray(output)
    data = data.reshape(-1, config.height, config.width)
    images = []
    for arr in data:
        r = np.clip(arr.astype(np.float32), 0.0, 1.0) * np.float32(config.max_range)
        r[(r < config.min_range) | (r <= 0)] = 0.0
        images.append(RangeImage(r, config))
    return images


# weight files ---------------------------------------------------------------

_RWTS_HEADER = struct.Struct("<4sHHI")


def save_weights(model: RecNet, path: str | os.PathLike) -> None:
    """Write parameters and running statistics in the RWTS layout."""
    state = model.state_dict()
    chunks = [_RWTS_HEADER.pack(RWTS_MAGIC, RWTS_VERSION, model.profile.profile_id, len(state))]
    for name, arr in state.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def read_weights(path: str | os.PathLike) -> tuple[ModelProfile, dict[str, np.ndarray]]:
    """Parse an RWTS file into its profile and a name -> array mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < _RWTS_HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, profile_id, count = _RWTS_HEADER.unpack_from(raw)
    if magic != RWTS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != RWTS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if profile_id not in PROFILES_BY_ID:
        raise FormatError(f"{path}: unknown profile id {profile_id}", offset=6)
    off = _RWTS_HEADER.size
    state = {}

    def need(n):
        if off + n > len(raw):
            raise FormatError(f"{path}: truncated tensor record", offset=len(raw))

    for _ in range(count):
        need(2)
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(name_len + 1)
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        rank = raw[off]
        off += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        state[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims).copy()
        off += nbytes
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes", offset=off)
    return PROFILES_BY_ID[profile_id], state


def load_weights(path: str | os.PathLike, profile: ModelProfile | str | None = None) -> RecNet:
    """Load an RWTS file into a new model.

    When ``profile`` is given, every tensor must match its shape; the first
    mismatch raises ``ShapeError``.
    """
    file_profile, state = read_weights(path)
    target = file_profile if profile is None else (get_profile(profile) if isinstance(profile, str) else profile)
    model = RecNet(target)
    model.load_state_dict(state)
    return model
