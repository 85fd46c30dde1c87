"""Recurrent context encoding: a dilated-convolution bank read by a ConvLSTM,
and the attention-gated multi-scale skip that hands its states to a decoder."""

from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .layers import AttentionGate, Conv2d, ConvLSTMCell, ConvTranspose2d, Module
from .tensor import DEFAULT_DTYPE, concat_channels


def check_rates(rates):
    rates = tuple(int(r) for r in rates)
    if not rates or any(r < 1 for r in rates):
        raise ConfigError(f"dilation rates must be positive, got {rates}")
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ConfigError(f"dilation rates must be strictly ascending, got {rates}")
    return rates


@dataclass
class SkipBundle:
    """Hidden states H_1..H_T captured at one encoder stage."""

    states: list

    def __len__(self):
        return len(self.states)

    @property
    def shape(self):
        return self.states[0].shape


class RcemBlock(Module):
    def __init__(self, channels, dilation_rates=(1, 2, 4, 8), rng=None, dtype=DEFAULT_DTYPE):
        self.rates = check_rates(dilation_rates)
        self.bank = [Conv2d(channels, channels, 3, dilation=r, rng=rng, dtype=dtype)
                     for r in self.rates]
        self.cell = ConvLSTMCell(channels, channels, rng=rng, dtype=dtype)

    @property
    def steps(self):
        return len(self.bank)

    def __call__(self, F):
        return rcem_forward(self, F)


def rcem_forward(block, F):
    """Zoom-in recurrence over the dilation bank, starting from zero state.

    Returns the last hidden state (passed on down the encoder) and the
    bundle of all hidden states (kept for the decoders).
    """
    if F.shape[1] != block.bank[0].in_channels:
        raise ShapeError(f"rcem: feature has {F.shape[1]} channels, "
                         f"bank expects {block.bank[0].in_channels}")
    H, C = block.cell.zero_state(F)
    states = []
    for conv in block.bank:
        H, C = block.cell(conv(F), H, C)
        states.append(H)
    return H, SkipBundle(states)


class MultiScaleSkip(Module):
    """Decoder-side half of the RCEM for one resolution level.

    ``upproj`` lifts the half-resolution decoder feature R (2c channels) to
    the skip resolution; its output is both Z and the input of the dilated
    bank that produces the gating features R_t.
    """

    def __init__(self, channels, dilation_rates=(1, 2, 4, 8), rng=None, dtype=DEFAULT_DTYPE):
        rates = check_rates(dilation_rates)
        self.upproj = ConvTranspose2d(2 * channels, channels, k=2, stride=2, rng=rng, dtype=dtype)
        self.rbank = [Conv2d(channels, channels, 3, dilation=r, rng=rng, dtype=dtype)
                      for r in rates]
        self.gates = [AttentionGate(channels, channels, rng=rng, dtype=dtype) for _ in rates]

    def out_channels(self):
        c = self.upproj.out_channels
        return c * (len(self.gates) + 1)

    def __call__(self, bundle, R):
        return multi_scale_skip(bundle, R, self.gates, self.rbank, self.upproj)


def multi_scale_skip(bundle, R, gates, rbank, upproj):
    n, _, h, w = bundle.shape
    if len(bundle) != len(gates) or len(gates) != len(rbank):
        raise ShapeError(f"skip bundle has {len(bundle)} states for {len(gates)} gates")
    if R.shape[0] != n or (2 * R.shape[2], 2 * R.shape[3]) != (h, w):
        raise ShapeError(f"multi_scale_skip: decoder feature {R.shape} is not half of "
                         f"skip resolution {bundle.shape}")
    Z = upproj(R)
    filtered = [gate(H_t, conv(Z)) for gate, conv, H_t in zip(gates, rbank, bundle.states)]
    return concat_channels(filtered + [Z])
