"""Miniature teacher/student segmentation nets, paraphraser and critic.

Each network owns a :class:`ParamStore` of plain arrays. A forward pass first
*binds* the store into leaf tensors (trainable unless the net is frozen), so
callers can map gradients back to parameter names.
"""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from gfkd import ops
from gfkd.tensor import Tensor, as_tensor

TAP_SITES = ("enc2", "dec2")


class ParamStore:
    """Ordered name -> array collection with the seed that initialised it."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._values: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        if name not in self._values:
            raise KeyError(f"unknown parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def items(self):
        return self._values.items()

    def names(self):
        return list(self._values)

    def count(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        for k, v in self._values.items():
            out.add(k, v.copy())
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self._values.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[k], other[k]) for k in self._values
        )


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Shared parameter plumbing: registration, binding and freezing."""

    def __init__(self, seed: int):
        self.params = ParamStore(seed)
        self._rng = np.random.default_rng(seed)
        self.frozen = False

    def _conv(self, name: str, cin: int, cout: int, k: int) -> None:
        self.params.add(f"{name}.w", _uniform_fan_in(self._rng, (cout, cin, k, k), cin * k * k))
        self.params.add(f"{name}.b", np.zeros(cout))

    def _deconv(self, name: str, cin: int, cout: int, k: int) -> None:
        self.params.add(f"{name}.w", _uniform_fan_in(self._rng, (cin, cout, k, k), cin * k * k))
        self.params.add(f"{name}.b", np.zeros(cout))

    def freeze(self) -> "Module":
        self.frozen = True
        return self

    def bind(self) -> Dict[str, Tensor]:
        """Fresh leaf tensors for the current parameter values."""
        return {name: Tensor(v, requires_grad=not self.frozen) for name, v in self.params.items()}

    def frozen_view(self) -> Dict[str, Tensor]:
        """Constant tensors for the current values, regardless of ``frozen``."""
        return {name: Tensor(v) for name, v in self.params.items()}

    def load(self, store: ParamStore) -> None:
        if store.names() != self.params.names():
            raise ValueError("parameter names do not match this network")
        for k, v in store.items():
            self.params[k] = v.copy()


class MiniUNet(Module):
    """Three-stage encoder-decoder with skip concatenation.

    Widths run W, 2W, 4W down the encoder. The encoder stage-2 output and
    the decoder stage-2 output share shape (2W, H/2, W/2) and are exposed as
    the tap sites ``enc2`` and ``dec2``.
    """

    def __init__(self, width: int, in_channels: int, num_classes: int, seed: int):
        super().__init__(seed)
        self.width, self.in_channels, self.num_classes = width, in_channels, num_classes
        w = width
        self._conv("enc1", in_channels, w, 3)
        self._conv("enc2", w, 2 * w, 3)
        self._conv("bott", 2 * w, 4 * w, 3)
        self._conv("dec2", 4 * w + 2 * w, 2 * w, 3)
        self._conv("dec1", 2 * w + w, w, 3)
        self._conv("head", w, num_classes, 1)

    @property
    def tap_channels(self) -> int:
        return 2 * self.width

    def forward_with_taps(
        self, x, p: Optional[Dict[str, Tensor]] = None
    ) -> Tuple[Tensor, Dict[str, Tensor]]:
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) input, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"spatial extents must be divisible by 4, got {x.shape[2:]}")
        p = self.bind() if p is None else p

        def conv(name, t, pad=1):
            return ops.conv2d(t, p[f"{name}.w"], p[f"{name}.b"], stride=1, padding=pad)

        e1 = ops.relu(conv("enc1", x))
        e2 = ops.relu(conv("enc2", ops.max_pool2(e1)))
        bt = ops.relu(conv("bott", ops.max_pool2(e2)))
        d2 = ops.relu(conv("dec2", ops.concat_channels(ops.upsample_nearest2(bt), e2)))
        d1 = ops.relu(conv("dec1", ops.concat_channels(ops.upsample_nearest2(d2), e1)))
        logits = conv("head", d1, pad=0)
        return logits, {"enc2": e2, "dec2": d2}

    def forward(self, x, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
        return self.forward_with_taps(x, p)[0]

    def predict(self, images: np.ndarray, batch: int = 32) -> np.ndarray:
        """Argmax label maps for an (N, C, H, W) array."""
        out = []
        for i in range(0, len(images), batch):
            logits = self.forward(Tensor(images[i : i + batch]), self.frozen_view())
            out.append(logits.data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.int64)



def build_mini_unet(width: int, in_channels: int, num_classes: int, seed: int) -> MiniUNet:
    if width < 2:
        raise ValueError(f"width must be >= 2, got {width}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return MiniUNet(width, in_channels, num_classes, seed)


class Paraphraser(Module):
    """Convolutional autoencoder squeezing teacher features to the student width.

    Encoder: three 3x3 stride-1 pad-1 convolutions with channels
    C_t -> mid -> C_s -> C_s, where mid = round((C_t + C_s) / 2). The decoder
    mirrors it with transposed convolutions. Every layer is followed by
    leaky-ReLU.
    """

    def __init__(self, c_t: int, c_s: int, seed: int):
        super().__init__(seed)
        self.c_t, self.c_s = c_t, c_s
        mid = int(np.floor((c_t + c_s) / 2 + 0.5))
        self.channel_path = (c_t, mid, c_s)
        self._conv("en1", c_t, mid, 3)
        self._conv("en2", mid, c_s, 3)
        self._conv("en3", c_s, c_s, 3)
        self._deconv("de1", c_s, c_s, 3)
        self._deconv("de2", c_s, mid, 3)
        self._deconv("de3", mid, c_t, 3)

    def paraphrase(self, f_t, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
        f_t = as_tensor(f_t)
        if f_t.ndim != 4 or f_t.shape[1] != self.c_t:
            raise ValueError(f"paraphraser expects {self.c_t} input channels, got {f_t.shape}")
        p = self.bind() if p is None else p
        h = f_t
        for name in ("en1", "en2", "en3"):
            h = ops.leaky_relu(ops.conv2d(h, p[f"{name}.w"], p[f"{name}.b"], 1, 1))
        return h

    def decode(self, code: Tensor, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
        p = self.bind() if p is None else p
        h = code
        for name in ("de1", "de2", "de3"):
            h = ops.leaky_relu(ops.conv2d_transposed(h, p[f"{name}.w"], p[f"{name}.b"], 1, 1))
        return h

    def reconstruct(self, f_t, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
        p = self.bind() if p is None else p
        return self.decode(self.paraphrase(f_t, p), p)


def build_paraphraser(c_t: int, c_s: int, seed: int) -> Paraphraser:
    if c_s < 1:
        raise ValueError("student channels must be >= 1")
    if c_s > c_t:
        raise ValueError(f"paraphraser compresses: need C_t >= C_s, got {c_t} < {c_s}")
    return Paraphraser(c_t, c_s, seed)


CRITIC_WIDTHS = (16, 32, 64, 64)


class Discriminator(Module):
    """Wasserstein critic over [class probabilities, image].

    Four stride-2 3x3 convolutions with leaky-ReLU, global average pooling and
    an affine map to one unbounded score per sample.
    """

    def __init__(self, num_classes: int, image_channels: int, seed: int):
        super().__init__(seed)
        self.image_channels = image_channels
        self.in_channels = num_classes + image_channels
        cin = self.in_channels
        for i, cout in enumerate(CRITIC_WIDTHS):
            self._conv(f"c{i + 1}", cin, cout, 3)
            cin = cout
        self._conv("fc", cin, 1, 1)

    def discriminate(self, y_prob, x, p: Optional[Dict[str, Tensor]] = None) -> Tensor:
        y_prob, x = as_tensor(y_prob), as_tensor(x)
        if y_prob.shape[0] != x.shape[0] or y_prob.shape[2:] != x.shape[2:]:
            raise ValueError(f"critic inputs disagree: {y_prob.shape} vs {x.shape}")
        p = self.bind() if p is None else p
        h = ops.concat_channels(y_prob, x)
        if h.shape[1] != self.in_channels:
            raise ValueError(f"critic expects {self.in_channels} channels, got {h.shape[1]}")
        for i in range(len(CRITIC_WIDTHS)):
            h = ops.leaky_relu(ops.conv2d(h, p[f"c{i + 1}.w"], p[f"c{i + 1}.b"], stride=2, padding=1))
        h = ops.mean(h, axes=(2, 3), keepdims=True)
        h = ops.conv2d(h, p["fc.w"], p["fc.b"])
        return ops.reshape(h, (h.shape[0],))

    def clip(self, bound: float) -> None:
        for name, v in self.params.items():
            self.params[name] = np.clip(v, -bound, bound)


def build_discriminator(num_classes: int, image_channels: int, seed: int) -> Discriminator:
    return Discriminator(num_classes, image_channels, seed)
