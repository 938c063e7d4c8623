"""Small numpy neural substrate: strided (transposed) convolutions, leaky
rectifiers, a sequential autoencoder, Adam and gradient checking.

Public tensors are ``(batch, channels, height, width)`` arrays.  Internally
layers run in ``(channels, height, width, batch)`` order: every convolution is
one matrix product, and the innermost (contiguous) axis is the batch, which
keeps the tap gathers cheap at the small spatial sizes used here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError


def _tap_range(i: int, n_in: int, n_out: int, stride: int, pad: int):
    """Output range [lo, hi) whose tap ``i`` lands inside the unpadded input,
    plus the matching input start index."""
    lo = max(0, -(-(pad - i) // stride))
    hi = min(n_out, (n_in - 1 - i + pad) // stride + 1)
    return lo, hi, lo * stride + i - pad


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Gather the ``k*k`` strided taps of a CHWB array into a column matrix
    ``(C*k*k, ho*wo*B)``; out-of-range taps read as zero padding."""
    c, h, w, b = x.shape
    cols = np.empty((c, k, k, ho, wo, b), dtype=x.dtype)
    for i in range(k):
        r0, r1, y0 = _tap_range(i, h, ho, stride, pad)
        for j in range(k):
            c0, c1, x0 = _tap_range(j, w, wo, stride, pad)
            view = cols[:, i, j]
            if pad:
                view[:, :r0] = 0
                view[:, r1:] = 0
                view[:, :, :c0] = 0
                view[:, :, c1:] = 0
            if r1 > r0 and c1 > c0:
                view[:, r0:r1, c0:c1] = x[:, y0:y0 + stride * (r1 - r0 - 1) + 1:stride,
                                          x0:x0 + stride * (c1 - c0 - 1) + 1:stride]
    return cols.reshape(c * k * k, ho * wo * b)


def _col2im(cols: np.ndarray, shape: tuple, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns into a CHWB array of
    ``shape``, dropping contributions that fall in the padding."""
    c, h, w, b = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(c, k, k, ho, wo, b)
    for i in range(k):
        r0, r1, y0 = _tap_range(i, h, ho, stride, pad)
        for j in range(k):
            c0, c1, x0 = _tap_range(j, w, wo, stride, pad)
            if r1 > r0 and c1 > c0:
                out[:, y0:y0 + stride * (r1 - r0 - 1) + 1:stride,
                    x0:x0 + stride * (c1 - c0 - 1) + 1:stride] += cols[:, i, j, r0:r1, c0:c1]
    return out


class Layer:
    kind = 0
    name = "layer"

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def out_shape(self, shape: tuple) -> tuple:
        """(channels, height, width) after this layer."""
        return shape

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError


class Conv2d(Layer):
    """Square-kernel convolution with stride and symmetric zero padding."""

    kind = 1
    name = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, rng=None, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.padding = kernel, stride, padding
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(1.0 / (in_ch * kernel * kernel))
        self.weight = rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)).astype(dtype)
        self.bias = rng.uniform(-bound, bound, out_ch).astype(dtype)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ConfigurationError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"{self.name}: input {h}x{w} too small for kernel {self.kernel}")
        return (self.out_ch, ho, wo)

    def forward(self, x):
        c, h, w, b = x.shape
        _, ho, wo = self.out_shape((c, h, w))
        cols = _im2col(x, self.kernel, self.stride, self.padding, ho, wo)
        y = self.weight.reshape(self.out_ch, -1) @ cols
        y += self.bias[:, None]
        self._cache = (cols, x.shape, ho, wo)
        return y.reshape(self.out_ch, ho, wo, b)

    def backward(self, dy, need_input_grad=True):
        cols, xshape, ho, wo = self._cache
        dy2 = dy.reshape(self.out_ch, -1)
        self.dweight[...] = (dy2 @ cols.T).reshape(self.weight.shape)
        self.dbias[...] = dy2.sum(axis=1)
        if not need_input_grad:
            return None
        dcols = self.weight.reshape(self.out_ch, -1).T @ dy2
        return _col2im(dcols, xshape, self.kernel, self.stride, self.padding, ho, wo)


class ConvTranspose2d(Layer):
    """Transposed convolution (the adjoint of :class:`Conv2d`), weight
    layout ``(in, out, k, k)``."""

    kind = 2
    name = "deconv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=0, output_padding=0,
                 rng=None, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.padding, self.output_padding = padding, output_padding
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = np.sqrt(1.0 / (in_ch * kernel * kernel))
        self.weight = rng.uniform(-bound, bound, (in_ch, out_ch, kernel, kernel)).astype(dtype)
        self.bias = rng.uniform(-bound, bound, out_ch).astype(dtype)
        self.dweight = np.zeros_like(self.weight)
        self.dbias = np.zeros_like(self.bias)
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def grads(self):
        return [self.dweight, self.dbias]

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.in_ch:
            raise ConfigurationError(f"{self.name}: expected {self.in_ch} input channels, got {c}")
        s, k, p, op = self.stride, self.kernel, self.padding, self.output_padding
        return (self.out_ch, (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op)

    def forward(self, x):
        c, h, w, b = x.shape
        _, ho, wo = self.out_shape((c, h, w))
        x2 = x.reshape(self.in_ch, -1)
        cols = self.weight.reshape(self.in_ch, -1).T @ x2
        y = _col2im(cols, (self.out_ch, ho, wo, b), self.kernel, self.stride, self.padding, h, w)
        y += self.bias[:, None, None, None]
        self._cache = (x2, h, w)
        return y

    def backward(self, dy, need_input_grad=True):
        x2, h, w = self._cache
        dcols = _im2col(dy, self.kernel, self.stride, self.padding, h, w)
        self.dweight[...] = (x2 @ dcols.T).reshape(self.weight.shape)
        self.dbias[...] = dy.sum(axis=(1, 2, 3))
        if not need_input_grad:
            return None
        dx = self.weight.reshape(self.in_ch, -1) @ dcols
        return dx.reshape(self.in_ch, h, w, -1)


class LeakyReLU(Layer):
    kind = 3
    name = "lrelu"

    def __init__(self, slope=0.2):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, x * x.dtype.type(self.slope))

    def backward(self, dy, need_input_grad=True):
        scale = np.where(self._mask, dy.dtype.type(1), dy.dtype.type(self.slope))
        return dy * scale


class Autoencoder:
    """Sequential stack of layers mapping a Tensor4 to a Tensor4."""

    def __init__(self, layers: list[Layer], in_channels: int, size: int = 32):
        self.layers = layers
        self.in_channels = in_channels
        self.size = size
        shape = (in_channels, size, size)
        for idx, layer in enumerate(layers):
            try:
                shape = layer.out_shape(shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"layer {idx} ({layer.name}): {exc}") from None
        self.out_channels = shape[0]
        self.output_shape = shape

    @property
    def encoder_layers(self) -> list[Layer]:
        return [l for l in self.layers if isinstance(l, Conv2d)]

    @property
    def decoder_layers(self) -> list[Layer]:
        return [l for l in self.layers if isinstance(l, ConvTranspose2d)]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def astype(self, dtype) -> "Autoencoder":
        """Cast parameters in place (gradient checks run in float64)."""
        for layer in self.layers:
            if isinstance(layer, (Conv2d, ConvTranspose2d)):
                layer.weight = layer.weight.astype(dtype)
                layer.bias = layer.bias.astype(dtype)
                layer.dweight = np.zeros_like(layer.weight)
                layer.dbias = np.zeros_like(layer.bias)
        return self

    def _check_input(self, batch: np.ndarray) -> None:
        if batch.ndim != 4:
            raise ConfigurationError(f"expected a 4-d batch, got shape {batch.shape}")
        _, c, h, w = batch.shape
        if (c, h, w) != (self.in_channels, self.size, self.size):
            raise ConfigurationError(
                f"layer 0 ({self.layers[0].name}): input (C,H,W)={(c, h, w)} does not match "
                f"model input {(self.in_channels, self.size, self.size)}"
            )

    def _forward_internal(self, batch: np.ndarray) -> np.ndarray:
        self._check_input(batch)
        dtype = self.layers[0].params()[0].dtype if self.layers[0].params() else batch.dtype
        x = np.ascontiguousarray(batch.transpose(1, 2, 3, 0), dtype=dtype)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(self._forward_internal(batch).transpose(3, 0, 1, 2))

    __call__ = forward

    def backward(self, dout: np.ndarray) -> None:
        """Backpropagate ``d loss / d output`` (BCHW); fills layer grads."""
        self.backward_internal(np.ascontiguousarray(dout.transpose(1, 2, 3, 0)))

    def backward_internal(self, g: np.ndarray) -> None:
        last = len(self.layers) - 1
        for idx in range(last, -1, -1):
            g = self.layers[idx].backward(g, need_input_grad=idx > 0)


def build_autoencoder(in_channels: int, out_channels: int, widths=(32, 64, 128),
                      slope: float = 0.2, seed: int = 0, size: int = 32) -> Autoencoder:
    """Seven-layer fully convolutional autoencoder.

    Three stride-2 convolutions, a stride-1 bottleneck convolution, then three
    stride-2 transposed convolutions back to ``size x size``.  Hidden layers
    use a leaky rectifier, the output layer is linear.
    """
    rng = np.random.default_rng(seed)
    w1, w2, w3 = widths
    layers: list[Layer] = [
        Conv2d(in_channels, w1, 3, 2, 1, rng=rng), LeakyReLU(slope),
        Conv2d(w1, w2, 3, 2, 1, rng=rng), LeakyReLU(slope),
        Conv2d(w2, w3, 3, 2, 1, rng=rng), LeakyReLU(slope),
        Conv2d(w3, w3, 3, 1, 1, rng=rng), LeakyReLU(slope),
        ConvTranspose2d(w3, w2, 3, 2, 1, 1, rng=rng), LeakyReLU(slope),
        ConvTranspose2d(w2, w1, 3, 2, 1, 1, rng=rng), LeakyReLU(slope),
        ConvTranspose2d(w1, out_channels, 3, 2, 1, 1, rng=rng),
    ]
    return Autoencoder(layers, in_channels, size)


def _masked(a: np.ndarray, mask) -> np.ndarray:
    return a if mask is None else a[:, np.asarray(mask, dtype=bool)]


def per_sample_loss(recon: np.ndarray, target: np.ndarray, channel_mask=None) -> np.ndarray:
    """Mean squared error per sample, accumulated in float64.

    ``channel_mask`` restricts the mean to a subset of channels (used by the
    prediction paradigm, which scores only the final temporal slice).
    """
    if recon.shape != target.shape:
        raise ConfigurationError(f"loss shape mismatch: {recon.shape} vs {target.shape}")
    diff = _masked(recon, channel_mask).astype(np.float64) - _masked(target, channel_mask)
    return (diff * diff).reshape(len(diff), -1).mean(axis=1)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                # decoupled: decay acts on the parameter, not through the moments
                update += self.lr * self.weight_decay * p
            p -= update.astype(p.dtype)


def loss_and_grad(model: Autoencoder, batch, targets, weights=None, channel_mask=None):
    """Weighted summed loss ``sum_i w_i L_i`` and its parameter gradients.

    ``weights`` may be a callable mapping the batch's per-sample losses to
    weights, so the weights come from the same forward pass as the update.
    Returns ``(per_sample_losses, weights, weighted_sum)``; gradients are
    left in the layers.  Zero-weight samples contribute exactly zero gradient.
    """
    out = model._forward_internal(batch)  # (C, H, W, B)
    targets = np.asarray(targets)
    if targets.shape != (out.shape[3],) + out.shape[:3]:
        raise ConfigurationError(f"loss shape mismatch: {(out.shape[3],) + out.shape[:3]} vs {targets.shape}")
    mask = np.ones(out.shape[0], bool) if channel_mask is None else np.asarray(channel_mask, bool)
    n = out.shape[3]
    tgt = targets.transpose(1, 2, 3, 0)
    diff = out[mask].astype(np.float64)
    diff -= tgt[mask]
    flat = diff.reshape(-1, n)
    losses = np.einsum("ib,ib->b", flat, flat) / flat.shape[0]
    if callable(weights):
        weights = weights(losses)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise ConfigurationError(f"weights length {w.shape} does not match batch size {n}")
    total = float(np.dot(w, losses))
    if not np.isfinite(total):
        raise DivergenceError(f"non-finite loss {total}; lower the learning rate")
    scale = 2.0 * w / flat.shape[0]
    dout = np.zeros_like(out)
    dout[mask] = diff * scale
    model.backward_internal(dout)
    return losses, w, total


def weighted_backward_step(model: Autoencoder, optimizer: Adam, batch, targets, weights=None,
                           channel_mask=None) -> tuple[np.ndarray, np.ndarray, float]:
    """One Adam step on ``sum_i v_i L_i``.

    Returns the pre-update per-sample losses, the weights used and the mean
    weighted loss.
    """
    losses, w, total = loss_and_grad(model, batch, targets, weights, channel_mask)
    optimizer.step(model.params(), model.grads())
    return losses, w, total / len(losses)


def finite_difference_check(model: Autoencoder, batch, targets, epsilon: float = 1e-4,
                            n_samples: int = 40, seed: int = 0, weights=None) -> float:
    """Max relative error between backprop and central differences over a
    random subset of parameters.  The model is cast to float64 in place.

    Parameters whose +/- epsilon perturbation flips a rectifier's active set
    are skipped and replaced by another draw.
    """
    model.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    def objective() -> float:
        recon = model.forward(batch)
        losses = per_sample_loss(recon, targets)
        return float(losses.sum() if weights is None else np.dot(weights, losses))

    def masks() -> list[np.ndarray]:
        return [l._mask.copy() for l in model.layers if isinstance(l, LeakyReLU)]

    loss_and_grad(model, batch, targets, weights)
    analytic = [g.copy() for g in model.grads()]
    rng = np.random.default_rng(seed)
    worst = 0.0
    params = model.params()
    for pi, p in enumerate(params):
        flat = p.reshape(-1)
        picks = rng.permutation(flat.size)
        checked = 0
        for idx in picks:
            if checked == n_samples:
                break
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = objective()
            mask_up = masks()
            flat[idx] = orig - epsilon
            down = objective()
            mask_down = masks()
            flat[idx] = orig
            # a rectifier kink inside [-eps, eps] invalidates the central difference
            if any((a != b).any() for a, b in zip(mask_up, mask_down)):
                continue
            checked += 1
            numeric = (up - down) / (2 * epsilon)
            a = analytic[pi].reshape(-1)[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"SPRCKPT1"


def _write_array(fh, arr: np.ndarray) -> None:
    fh.write(struct.pack("<i", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}i", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_array(fh) -> np.ndarray:
    (ndim,) = struct.unpack("<i", fh.read(4))
    shape = struct.unpack(f"<{ndim}i", fh.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def save_checkpoint(path, model: Autoencoder, optimizer: Adam | None = None) -> None:
    """Binary checkpoint: magic, model geometry, per-layer records, optimizer."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<3i", model.in_channels, model.size, len(model.layers)))
        for layer in model.layers:
            if isinstance(layer, LeakyReLU):
                fh.write(struct.pack("<id", layer.kind, layer.slope))
                continue
            extra = layer.output_padding if isinstance(layer, ConvTranspose2d) else 0
            fh.write(struct.pack("<i", layer.kind))
            _write_array(fh, np.array([layer.stride, layer.padding, extra], dtype=np.float32))
            _write_array(fh, layer.weight)
            _write_array(fh, layer.bias)
        opt = optimizer or Adam()
        fh.write(struct.pack("<i", opt.step_count))
        # hyperparameters stay float64 so a resumed run matches an uninterrupted one
        fh.write(struct.pack("<5d", opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay))
        fh.write(struct.pack("<i", len(opt.m)))
        for m, v in zip(opt.m, opt.v):
            _write_array(fh, m)
            _write_array(fh, v)


def load_checkpoint(path) -> tuple[Autoencoder, Adam]:
    try:
        return _load_checkpoint(path)
    except (struct.error, ValueError) as exc:
        raise ConfigurationError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _load_checkpoint(path) -> tuple[Autoencoder, Adam]:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ConfigurationError(f"{path}: not a checkpoint (bad magic)")
        in_ch, size, n_layers = struct.unpack("<3i", fh.read(12))
        layers: list[Layer] = []
        for _ in range(n_layers):
            (kind,) = struct.unpack("<i", fh.read(4))
            if kind == LeakyReLU.kind:
                (slope,) = struct.unpack("<d", fh.read(8))
                layers.append(LeakyReLU(slope))
                continue
            stride, padding, extra = (int(x) for x in _read_array(fh))
            weight, bias = _read_array(fh), _read_array(fh)
            k = weight.shape[-1]
            if kind == Conv2d.kind:
                layer = Conv2d(weight.shape[1], weight.shape[0], k, stride, padding)
            elif kind == ConvTranspose2d.kind:
                layer = ConvTranspose2d(weight.shape[0], weight.shape[1], k, stride, padding, extra)
            else:
                raise ConfigurationError(f"{path}: unknown layer kind {kind}")
            layer.weight, layer.bias = weight, bias
            layer.dweight, layer.dbias = np.zeros_like(weight), np.zeros_like(bias)
            layers.append(layer)
        (step,) = struct.unpack("<i", fh.read(4))
        lr, b1, b2, eps, wd = struct.unpack("<5d", fh.read(40))
        opt = Adam(lr=lr, beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step_count=step)
        (n_mom,) = struct.unpack("<i", fh.read(4))
        for _ in range(n_mom):
            opt.m.append(_read_array(fh))
            opt.v.append(_read_array(fh))
    return Autoencoder(layers, in_ch, size), opt
