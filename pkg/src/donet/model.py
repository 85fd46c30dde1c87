"""The dual-decoder segmentation network.

A shared encoder (conv-bn-relu, optional RCEM, maxpool per stage, with
optional pyramid inputs) feeds two structurally identical decoders. Each
decoder ends in a 1x1 convolution and a sigmoid; the joint prediction is
the element-wise product of the two maps.
"""

from dataclasses import dataclass, fields

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, Module, maxpool2x2
from .rcem import MultiScaleSkip, RcemBlock, check_rates
from .tensor import DEFAULT_DTYPE, Tensor, concat_channels, hadamard, make_rng, relu, sigmoid


@dataclass
class DonetConfig:
    input_channels: int = 3
    input_size: tuple = (64, 64)
    base_channels: int = 16
    stages: int = 4
    dilation_rates: tuple = (1, 2, 4, 8)
    use_rcem: bool = True
    use_dual: bool = True
    use_pyramid_inputs: bool = True

    def validate(self):
        if self.stages < 1:
            raise ConfigError(f"stages must be >= 1, got {self.stages}")
        if self.input_channels < 1 or self.base_channels < 1:
            raise ConfigError("input_channels and base_channels must be positive")
        h, w = self.input_size
        step = 2 ** self.stages
        if h % step or w % step or h < step or w < step:
            raise ConfigError(f"input size {(h, w)} is not divisible by 2**stages = {step}")
        check_rates(self.dilation_rates)
        return self

    def channels(self):
        """Encoder channel ladder, bottleneck last."""
        return [self.base_channels * 2 ** k for k in range(self.stages + 1)]


@dataclass
class PredictionTriple:
    y1: Tensor
    y2: Tensor
    y_joint: Tensor


def _conv_count(cin, cout, k, bias=True):
    return cout * cin * k * k + (cout if bias else 0)


def expected_parameter_count(cfg):
    """Closed-form parameter count from the channel arithmetic."""
    ch = cfg.channels()
    t = len(cfg.dilation_rates)
    cin = cfg.input_channels
    enc = 0
    rcem = 0
    prev = cin
    for k in range(cfg.stages + 1):
        width = prev
        if cfg.use_pyramid_inputs and k >= 1:
            enc += _conv_count(cin, prev, 3)
            width += prev
        enc += _conv_count(width, ch[k], 3) + 2 * ch[k]
        if k < cfg.stages and cfg.use_rcem:
            c = ch[k]
            rcem += t * _conv_count(c, c, 3)
            rcem += 4 * c * c * 9 * 2 + 4 * c + 3 * c
        prev = ch[k]
    dec = 0
    for k in range(cfg.stages):
        c = ch[k]
        dec += _conv_count(2 * c, c, 2)
        if cfg.use_rcem:
            inter = max(1, c // 2)
            dec += t * _conv_count(c, c, 3)
            dec += t * (_conv_count(c, inter, 1) + _conv_count(c, inter, 1, bias=False)
                        + _conv_count(inter, 1, 1))
            cat = (t + 1) * c
        else:
            cat = 2 * c
        dec += _conv_count(cat, c, 3) + 2 * c
    dec += _conv_count(ch[0], 1, 1)
    return enc + rcem + dec * (2 if cfg.use_dual else 1)


class Encoder(Module):
    def __init__(self, cfg, rng, dtype):
        ch = cfg.channels()
        self.pyramid = []
        self.convs = []
        self.norms = []
        prev = cfg.input_channels
        for k in range(cfg.stages + 1):
            width = prev
            if cfg.use_pyramid_inputs and k >= 1:
                self.pyramid.append(Conv2d(cfg.input_channels, prev, 3, rng=rng, dtype=dtype))
                width += prev
            self.convs.append(Conv2d(width, ch[k], 3, rng=rng, dtype=dtype))
            self.norms.append(BatchNorm2d(ch[k], dtype=dtype))
            prev = ch[k]

    def stage(self, k, x, pyramid, train):
        if self.pyramid and k >= 1:
            x = concat_channels([x, self.pyramid[k - 1](pyramid[k - 1])])
        return relu(self.norms[k](self.convs[k](x), train))


class Decoder(Module):
    def __init__(self, cfg, rng, dtype):
        ch = cfg.channels()
        self.use_rcem = cfg.use_rcem
        self.skips = []
        self.upproj = []
        self.convs = []
        self.norms = []
        for k in range(cfg.stages):
            c = ch[k]
            if cfg.use_rcem:
                skip = MultiScaleSkip(c, cfg.dilation_rates, rng=rng, dtype=dtype)
                self.skips.append(skip)
                cat = skip.out_channels()
            else:
                self.upproj.append(ConvTranspose2d(2 * c, c, k=2, stride=2, rng=rng, dtype=dtype))
                cat = 2 * c
            self.convs.append(Conv2d(cat, c, 3, rng=rng, dtype=dtype))
            self.norms.append(BatchNorm2d(c, dtype=dtype))
        self.head = Conv2d(ch[0], 1, k=1, rng=rng, dtype=dtype)

    def __call__(self, f, skips, train):
        R = f
        for k in reversed(range(len(self.convs))):
            if self.use_rcem:
                x = self.skips[k](skips[k], R)
            else:
                x = concat_channels([skips[k], self.upproj[k](R)])
            R = relu(self.norms[k](self.convs[k](x), train))
        return sigmoid(self.head(R))


class DonetModel(Module):
    def __init__(self, cfg, seed=0, dtype=DEFAULT_DTYPE):
        cfg.validate()
        self.config = cfg
        rng = make_rng(seed)
        self.encoder = Encoder(cfg, rng, dtype)
        if cfg.use_rcem:
            ch = cfg.channels()
            self.rcem = [RcemBlock(ch[k], cfg.dilation_rates, rng=rng, dtype=dtype)
                         for k in range(cfg.stages)]
        else:
            self.rcem = []
        self.decoder1 = Decoder(cfg, rng, dtype)
        self.decoder2 = Decoder(cfg, rng, dtype) if cfg.use_dual else None
        if cfg.use_rcem:
            for k, block in enumerate(self.rcem):
                if block.steps * block.bank[0].out_channels + ch[k] != \
                        self.decoder1.skips[k].out_channels():
                    raise ShapeError(f"decoder stage {k} channel contract broken")

    @property
    def dtype(self):
        return self.encoder.convs[0].weight.dtype

    def parameter_count(self):
        return sum(t.size for t in self.parameters())

    def __call__(self, image, train=False):
        return forward(self, image, train)


def build(config, seed=0, dtype=DEFAULT_DTYPE):
    return DonetModel(config, seed=seed, dtype=dtype)


def parameters(model):
    return model.named_parameters()


def pyramid_arrays(image, stages):
    """Average-pooled copies of ``image`` at 1/2, 1/4, ... 1/2**stages."""
    out = []
    x = image
    for _ in range(stages):
        n, c, h, w = x.shape
        x = x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
        out.append(x)
    return out


def joint_prediction(y1, y2):
    """Element-wise product of the two decoders' probability maps."""
    return hadamard(y1, y2)


def forward(model, image, train=False):
    """Run the network. ``train`` selects batch statistics in batchnorm."""
    cfg = model.config
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=model.dtype))
    n, c, h, w = image.shape
    if c != cfg.input_channels or (h, w) != tuple(cfg.input_size):
        raise ShapeError(f"input {image.shape} does not match configured "
                         f"({cfg.input_channels}, {tuple(cfg.input_size)})")
    if train and n < 2:
        raise ContractError("train mode needs a batch of at least 2 for batchnorm")
    pyramid = []
    if cfg.use_pyramid_inputs:
        pyramid = [Tensor(p) for p in pyramid_arrays(image.data, cfg.stages)]
    skips = []
    x = image
    for k in range(cfg.stages):
        feat = model.encoder.stage(k, x, pyramid, train)
        if cfg.use_rcem:
            feat, bundle = model.rcem[k](feat)
            skips.append(bundle)
        else:
            skips.append(feat)
        x = maxpool2x2(feat)
    f = model.encoder.stage(cfg.stages, x, pyramid, train)
    y1 = model.decoder1(f, skips, train)
    if model.decoder2 is None:
        return PredictionTriple(y1, None, y1)
    y2 = model.decoder2(f, skips, train)
    return PredictionTriple(y1, y2, joint_prediction(y1, y2))


CONFIG_FIELDS = [f.name for f in fields(DonetConfig)]
