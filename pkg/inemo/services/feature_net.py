"""Numpy convolutional feature extractor with exact backprop and per-pixel L2 normalization."""
from dataclasses import dataclass
import copy
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from inemo.errors import FrozenExtractorError, InvalidArgumentError
from inemo.services.optim import AdamState, adam_update

log = logging.getLogger(__name__)

_NORM_GUARD = 1e-12


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int
    channels: int


def default_layers(dim):
    return [ConvSpec(5, 2, 16), ConvSpec(3, 2, 32), ConvSpec(3, 1, int(dim))]


def _im2col(x, kernel, stride):
    """(B, H, W, C) padded input -> (B, Ho, Wo, k*k*C) patches ordered (ky, kx, c)."""
    win = sliding_window_view(x, (kernel, kernel), axis=(1, 2))[:, ::stride, ::stride]
    b, ho, wo, c = win.shape[:4]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b, ho, wo, kernel * kernel * c)


def _col2im(dcols, padded_shape, kernel, stride):
    b, ho, wo = dcols.shape[:3]
    c = padded_shape[3]
    dcols = dcols.reshape(b, ho, wo, kernel, kernel, c)
    dx = np.zeros(padded_shape)
    for ky in range(kernel):
        for kx in range(kernel):
            dx[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, ky, kx, :]
    return dx


class FeatureExtractor:
    """Conv stack (tanh after every layer) followed by per-pixel L2 normalization.

    Parameters live in one flat float64 vector: every layer's weights (k, k, Cin, Cout),
    then its bias when enabled.
    """

    def __init__(self, dim=128, layers=None, in_channels=3, bias=True, seed=0, params=None, frozen=False):
        self.dim = int(dim)
        self.in_channels = int(in_channels)
        self.bias = bool(bias)
        self.seed = int(seed)
        self.layers = [ConvSpec(*l) if not isinstance(l, ConvSpec) else l for l in (layers or default_layers(dim))]
        if self.layers[-1].channels != self.dim:
            raise InvalidArgumentError(
                f"Last layer has {self.layers[-1].channels} channels, expected feature dim {self.dim}"
            )
        self._shapes = []
        cin = self.in_channels
        for spec in self.layers:
            self._shapes.append((spec.kernel, spec.kernel, cin, spec.channels))
            cin = spec.channels
        self.frozen = False
        if params is None:
            params = self._init_params()
        self.params = np.asarray(params, dtype=np.float64).copy()
        if self.params.size != self.param_count:
            raise InvalidArgumentError(f"Expected {self.param_count} parameters, got {self.params.size}")
        if frozen:
            self._freeze()

    @property
    def stride(self):
        return int(np.prod([spec.stride for spec in self.layers]))

    @property
    def param_count(self):
        return sum(int(np.prod(s)) + (s[3] if self.bias else 0) for s in self._shapes)

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        chunks = []
        for shape in self._shapes:
            fan_in = shape[0] * shape[1] * shape[2]
            chunks.append(rng.standard_normal(int(np.prod(shape))) * np.sqrt(2.0 / fan_in))
            if self.bias:
                chunks.append(np.zeros(shape[3]))
        return np.concatenate(chunks)

    def _freeze(self):
        self.frozen = True
        self.params.setflags(write=False)

    def _unpack(self):
        out, pos = [], 0
        for shape in self._shapes:
            n = int(np.prod(shape))
            w = self.params[pos:pos + n].reshape(shape[0] * shape[1] * shape[2], shape[3])
            pos += n
            b = None
            if self.bias:
                b = self.params[pos:pos + shape[3]]
                pos += shape[3]
            out.append((w, b))
        return out

    def architecture(self):
        return {
            "dim": self.dim,
            "in_channels": self.in_channels,
            "bias": self.bias,
            "seed": self.seed,
            "layers": [[s.kernel, s.stride, s.channels] for s in self.layers],
        }

    @classmethod
    def from_architecture(cls, arch, params=None):
        return cls(
            dim=arch["dim"],
            layers=[ConvSpec(*l) for l in arch["layers"]],
            in_channels=arch["in_channels"],
            bias=arch["bias"],
            seed=arch.get("seed", 0),
            params=params,
        )

    # -- forward / backward -------------------------------------------------

    def _prepare(self, images):
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise InvalidArgumentError(f"Expected (B, H, W, {self.in_channels}) images, got {x.shape}")
        h, w = x.shape[1:3]
        s = self.stride
        if h < s or w < s:
            raise InvalidArgumentError(f"Image {h}x{w} is smaller than the stride {s}")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("Image contains non-finite values")
        ph, pw = (-h) % s, (-w) % s
        if ph or pw:
            x = np.pad(x, ((0, 0), (0, ph), (0, pw), (0, 0)))
        return x, single

    def forward_with_cache(self, images):
        """Feature maps (B, H/s, W/s, d) plus what backward needs."""
        x, single = self._prepare(images)
        cache = []
        for spec, (w, b) in zip(self.layers, self._unpack()):
            p = spec.kernel // 2
            xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
            cols = _im2col(xp, spec.kernel, spec.stride)
            z = cols @ w
            if b is not None:
                z = z + b
            x = np.tanh(z)
            cache.append((xp.shape, cols, x))
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        guarded = norm[..., 0] < _NORM_GUARD
        feats = x / np.where(guarded[..., None], 1.0, norm)
        if np.any(guarded):
            feats[guarded] = 0.0
            feats[guarded, 0] = 1.0
        return feats, (cache, feats, norm, guarded, single)

    def forward(self, images):
        feats, (_, _, _, _, single) = self.forward_with_cache(images)
        return feats[0] if single else feats

    def backward_from_cache(self, fw_cache, grad):
        if self.frozen:
            raise FrozenExtractorError("Gradients cannot be taken through a frozen snapshot")
        cache, feats, norm, guarded, single = fw_cache
        g = np.asarray(grad, dtype=np.float64)
        if single and g.ndim == 3:
            g = g[None]
        if g.shape != feats.shape:
            raise InvalidArgumentError(f"Gradient shape {g.shape} does not match feature map {feats.shape}")
        radial = np.sum(feats * g, axis=-1, keepdims=True)
        da = (g - feats * radial) / np.where(guarded[..., None], 1.0, norm)
        da[guarded] = 0.0

        grads = []
        for spec, (w, b), (padded_shape, cols, a) in reversed(list(zip(self.layers, self._unpack(), cache))):
            dz = da * (1.0 - a * a)
            flat = dz.reshape(-1, dz.shape[-1])
            dw = cols.reshape(-1, cols.shape[-1]).T @ flat
            layer = [dw.ravel()]
            if b is not None:
                layer.append(flat.sum(axis=0))
            grads.append(np.concatenate(layer))
            dcols = dz @ w.T
            dxp = _col2im(dcols, padded_shape, spec.kernel, spec.stride)
            p = spec.kernel // 2
            da = dxp[:, p:padded_shape[1] - p, p:padded_shape[2] - p, :]
        return np.concatenate(grads[::-1])

    def backward(self, images, grad):
        """Gradient of <forward(images), grad> w.r.t. the flat parameter vector."""
        if self.frozen:
            raise FrozenExtractorError("Gradients cannot be taken through a frozen snapshot")
        _, fw_cache = self.forward_with_cache(images)
        return self.backward_from_cache(fw_cache, grad)

    # -- updates ------------------------------------------------------------

    def snapshot(self):
        """Immutable deep copy used as the distillation teacher model."""
        twin = copy.deepcopy(self)
        twin.params = self.params.copy()
        twin._freeze()
        return twin

    def new_optimizer_state(self):
        return AdamState.zeros(self.param_count)

    def optimizer_step(self, grad, state, lr, weight_decay=1e-4):
        if self.frozen:
            raise FrozenExtractorError("A frozen snapshot cannot be updated")
        self.params = adam_update(self.params, grad, state, lr, weight_decay)
        return self.params


def forward(extractor, image):
    return extractor.forward(image)


def backward(extractor, image, grad):
    return extractor.backward(image, grad)


def snapshot(extractor):
    return extractor.snapshot()


def optimizer_step(extractor, grad, state, lr, weight_decay=1e-4):
    return extractor.optimizer_step(grad, state, lr, weight_decay)
