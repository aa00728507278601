"""Temporal VAE: learned-prior recurrent latent model with a DCGAN encoder/decoder.

Three recurrent networks share one frame encoder and one frame decoder:

* prior estimator   ``(encode(x_{t-1}), h_prior)      -> N(mu_p, var_p)``
* inference model   ``(encode(x_t), h_post)           -> N(mu_q, var_q)``
* future predictor  ``([encode(x_{t-1}); z_t], h_pred) -> x'_t``

The module itself is stateless; recurrent state travels in :class:`HiddenStates`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .errors import ConfigError, ShapeError, StateError

__all__ = [
    "TVAEConfig",
    "LatentGaussian",
    "HiddenStates",
    "TVAE",
    "sample_latent",
    "assemble_volume",
    "encoder_stages",
]


@dataclass
class TVAEConfig:
    z_dim: int = 10
    g_dim: int = 128
    rnn_hidden: int = 256
    predictor_layers: int = 2
    prior_layers: int = 1
    inference_layers: int = 1
    conv_dims: int = 2
    skip_mode: str = "partial"
    input_shape: tuple[int, ...] = (1, 64, 64)
    base_channels: int = 64  # DCGAN width multiplier (64 in the reference DCGAN)

    def __post_init__(self) -> None:
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if self.z_dim < 1:
            raise ConfigError("z_dim must be >= 1")
        if self.g_dim < self.z_dim:
            raise ConfigError("g_dim must be >= z_dim")
        if self.conv_dims not in (2, 3):
            raise ConfigError(f"conv_dims must be 2 or 3, got {self.conv_dims}")
        if self.skip_mode not in ("partial", "full"):
            raise ConfigError(f"skip_mode must be 'partial' or 'full', got {self.skip_mode!r}")
        if min(self.rnn_hidden, self.predictor_layers, self.prior_layers, self.inference_layers, self.base_channels) < 1:
            raise ConfigError("recurrent sizes and base_channels must be >= 1")
        if len(self.input_shape) != self.conv_dims + 1:
            raise ConfigError(f"input_shape {self.input_shape} does not match conv_dims={self.conv_dims}")
        encoder_stages(self.input_shape)

    @classmethod
    def for_volumes(cls, n_slices: int = 48, size: int = 64, **kw) -> "TVAEConfig":
        return cls(conv_dims=3, input_shape=(1, n_slices, size, size), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


def encoder_stages(input_shape: Sequence[int]) -> int:
    """Number of conv stages: stride-2 halvings down to 4x4, then one 4x4 valid conv."""
    h, w = input_shape[-2:]
    if h != w or h < 4 or h & (h - 1):
        raise ConfigError(f"spatial size must be a square power of two >= 4, got {h}x{w}")
    n_down = int(math.log2(h)) - 2
    if len(input_shape) == 4:
        depth = input_shape[1]
        if depth % (2**n_down):
            raise ConfigError(f"depth {depth} not divisible by 2**{n_down}")
    return n_down + 1


@dataclass
class LatentGaussian:
    mu: torch.Tensor  # (B, z_dim)
    log_var: torch.Tensor  # (B, z_dim); sigma = exp(log_var / 2)

    @property
    def sigma(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)


def sample_latent(g: LatentGaussian, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mu + sigma * noise``."""
    return g.mu + torch.exp(0.5 * g.log_var) * noise


State = list[tuple[torch.Tensor, torch.Tensor]]


@dataclass
class HiddenStates:
    prior: State = field(default_factory=list)
    posterior: State = field(default_factory=list)
    predictor: State = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.predictor[0][0].shape[0]


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0 and c > g:
            return g
    return 1


class _Ops:
    def __init__(self, conv_dims: int):
        self.conv = nn.Conv2d if conv_dims == 2 else nn.Conv3d
        self.deconv = nn.ConvTranspose2d if conv_dims == 2 else nn.ConvTranspose3d
        self.dims = conv_dims


def _down(ops: _Ops, cin: int, cout: int, first: bool) -> nn.Sequential:
    layers: list[nn.Module] = [ops.conv(cin, cout, 4, 2, 1)]
    if not first:
        layers.append(nn.GroupNorm(_groups(cout), cout))
    layers.append(nn.LeakyReLU(0.2))
    return nn.Sequential(*layers)


def _up(ops: _Ops, cin: int, cout: int, kernel, stride: int, pad: int) -> nn.Sequential:
    return nn.Sequential(ops.deconv(cin, cout, kernel, stride, pad), nn.GroupNorm(_groups(cout), cout), nn.LeakyReLU(0.2))


class Encoder(nn.Module):
    """DCGAN discriminator trunk; returns features and shallow-to-deep skip maps."""

    def __init__(self, cfg: TVAEConfig):
        super().__init__()
        ops = _Ops(cfg.conv_dims)
        n = encoder_stages(cfg.input_shape)
        chans = [cfg.input_shape[0]] + [cfg.base_channels * 2**i for i in range(n - 1)]
        self.stages = nn.ModuleList(_down(ops, chans[i], chans[i + 1], i == 0) for i in range(n - 1))
        kernel = 4 if cfg.conv_dims == 2 else (cfg.input_shape[1] // 2 ** (n - 1), 4, 4)
        self.head = nn.Sequential(ops.conv(chans[-1], cfg.g_dim, kernel, 1, 0), nn.Tanh())
        self.input_shape = cfg.input_shape
        self.g_dim = cfg.g_dim

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"encoder expects (B, {self.input_shape}), got {tuple(x.shape)}")
        skips = []
        h = x
        for stage in self.stages:
            h = stage(h)
            skips.append(h)
        return self.head(h).reshape(x.shape[0], self.g_dim), skips


class Decoder(nn.Module):
    """DCGAN generator with skip concatenation; sigmoid output."""

    def __init__(self, cfg: TVAEConfig):
        super().__init__()
        ops = _Ops(cfg.conv_dims)
        n = encoder_stages(cfg.input_shape)
        self.n_skips = n - 1
        self.used = list(range(self.n_skips)) if cfg.skip_mode == "full" else list(range(min(2, self.n_skips)))
        chans = [cfg.input_shape[0]] + [cfg.base_channels * 2**i for i in range(n - 1)]
        kernel = 4 if cfg.conv_dims == 2 else (cfg.input_shape[1] // 2 ** (n - 1), 4, 4)
        self.head = _up(ops, cfg.g_dim, chans[-1], kernel, 1, 0)
        # ups[k] maps resolution of skip k to resolution of skip k-1, k = n-2 .. 0
        self.ups = nn.ModuleList()
        for k in range(self.n_skips):
            cin = chans[k + 1] * (2 if k in self.used else 1)
            if k == 0:
                self.ups.append(nn.Sequential(ops.deconv(cin, chans[0], 4, 2, 1), nn.Sigmoid()))
            else:
                self.ups.append(_up(ops, cin, chans[k], 4, 2, 1))
        self.g_dim = cfg.g_dim
        self.conv_dims = cfg.conv_dims
        self.input_shape = cfg.input_shape

    def forward(self, features: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        if features.dim() != 2 or features.shape[1] != self.g_dim:
            raise ShapeError(f"decoder expects (B, {self.g_dim}) features, got {tuple(features.shape)}")
        if len(skips) != self.n_skips:
            raise ShapeError(f"decoder expects {self.n_skips} skip maps, got {len(skips)}")
        h = self.head(features.reshape(features.shape[0], self.g_dim, *([1] * self.conv_dims)))
        for k in reversed(range(self.n_skips)):
            if k in self.used:
                if skips[k].shape[0] != h.shape[0] or skips[k].shape[2:] != h.shape[2:]:
                    raise ShapeError(f"skip {k} has shape {tuple(skips[k].shape)}, decoder state {tuple(h.shape)}")
                h = torch.cat([h, skips[k]], dim=1)
            h = self.ups[k](h)
        return h


class LSTMStack(nn.Module):
    """Linear embed -> stacked LSTM cells -> linear readout(s)."""

    def __init__(self, in_dim: int, hidden: int, layers: int):
        super().__init__()
        self.embed = nn.Linear(in_dim, hidden)
        self.cells = nn.ModuleList(nn.LSTMCell(hidden, hidden) for _ in range(layers))
        self.hidden = hidden

    def init_state(self, batch: int, like: torch.Tensor) -> State:
        z = like.new_zeros(batch, self.hidden)
        return [(z, z) for _ in self.cells]

    def forward(self, x: torch.Tensor, state: State) -> tuple[torch.Tensor, State]:
        if len(state) != len(self.cells) or state[0][0].shape[0] != x.shape[0]:
            raise StateError("recurrent state is uninitialized or does not match the batch")
        h = self.embed(x)
        new_state = []
        for cell, hc in zip(self.cells, state):
            hc = cell(h, hc)
            new_state.append(hc)
            h = hc[0]
        return h, new_state


class GaussianLSTM(nn.Module):
    def __init__(self, in_dim: int, z_dim: int, hidden: int, layers: int):
        super().__init__()
        self.rnn = LSTMStack(in_dim, hidden, layers)
        self.mu = nn.Linear(hidden, z_dim)
        self.log_var = nn.Linear(hidden, z_dim)

    def forward(self, x: torch.Tensor, state: State) -> tuple[LatentGaussian, State]:
        h, state = self.rnn(x, state)
        return LatentGaussian(self.mu(h), self.log_var(h)), state


class PredictorLSTM(nn.Module):
    def __init__(self, in_dim: int, g_dim: int, hidden: int, layers: int):
        super().__init__()
        self.rnn = LSTMStack(in_dim, hidden, layers)
        self.out = nn.Sequential(nn.Linear(hidden, g_dim), nn.Tanh())

    def forward(self, x: torch.Tensor, state: State) -> tuple[torch.Tensor, State]:
        h, state = self.rnn(x, state)
        return self.out(h), state


@dataclass
class TrainOutput:
    predictions: list[torch.Tensor]  # x'_2 .. x'_T
    priors: list[LatentGaussian]
    posteriors: list[LatentGaussian]


class TVAE(nn.Module):
    def __init__(self, cfg: TVAEConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.prior = GaussianLSTM(cfg.g_dim, cfg.z_dim, cfg.rnn_hidden, cfg.prior_layers)
        self.posterior = GaussianLSTM(cfg.g_dim, cfg.z_dim, cfg.rnn_hidden, cfg.inference_layers)
        self.predictor = PredictorLSTM(cfg.g_dim + cfg.z_dim, cfg.g_dim, cfg.rnn_hidden, cfg.predictor_layers)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose2d, nn.ConvTranspose3d)):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.GroupNorm):
                nn.init.normal_(m.weight, 1.0, 0.02)
                nn.init.zeros_(m.bias)
        for head in (self.prior, self.posterior):
            nn.init.zeros_(head.mu.bias)
            nn.init.zeros_(head.log_var.bias)

    # -- single steps -------------------------------------------------------

    def init_states(self, batch: int) -> HiddenStates:
        like = next(self.parameters())
        return HiddenStates(
            prior=self.prior.rnn.init_state(batch, like),
            posterior=self.posterior.rnn.init_state(batch, like),
            predictor=self.predictor.rnn.init_state(batch, like),
        )

    def encode(self, frame: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return self.encoder(frame)

    def decode(self, features: torch.Tensor, skips: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.decoder(features, skips)

    @staticmethod
    def _check(states: HiddenStates | None, name: str) -> None:
        if states is None or not getattr(states, name):
            raise StateError(f"{name} state is uninitialized; call init_states first")

    def prior_step(self, x_prev: torch.Tensor, states: HiddenStates) -> tuple[LatentGaussian, HiddenStates]:
        self._check(states, "prior")
        g, _ = self.encoder(x_prev)
        return self._prior_from(g, states)

    def inference_step(self, x_t: torch.Tensor, states: HiddenStates) -> tuple[LatentGaussian, HiddenStates]:
        self._check(states, "posterior")
        g, _ = self.encoder(x_t)
        return self._posterior_from(g, states)

    def predictor_step(
        self,
        z: torch.Tensor,
        x_prev: torch.Tensor,
        states: HiddenStates,
        skips: Sequence[torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, HiddenStates]:
        """Render x'_t; ``skips`` default to those of ``x_prev``."""
        self._check(states, "predictor")
        g, own_skips = self.encoder(x_prev)
        return self._predict_from(z, g, own_skips if skips is None else skips, states)

    def _prior_from(self, g, states):
        dist, s = self.prior(g, states.prior)
        return dist, HiddenStates(s, states.posterior, states.predictor)

    def _posterior_from(self, g, states):
        dist, s = self.posterior(g, states.posterior)
        return dist, HiddenStates(states.prior, s, states.predictor)

    def _predict_from(self, z, g_prev, skips, states):
        h, s = self.predictor(torch.cat([g_prev, z], dim=1), states.predictor)
        return self.decoder(h, skips), HiddenStates(states.prior, states.posterior, s)

    # -- sequences ----------------------------------------------------------

    def forward_train(self, frames: torch.Tensor, noise: torch.Tensor) -> TrainOutput:
        """Teacher-forced pass over ``frames`` (T, B, *input_shape).

        ``noise`` is (T-1, B, z_dim) standard normal, one row per predicted step.
        """
        T, B = frames.shape[:2]
        if T < 2:
            raise ShapeError(f"need at least 2 frames, got {T}")
        if tuple(noise.shape) != (T - 1, B, self.cfg.z_dim):
            raise ShapeError(f"noise must be {(T - 1, B, self.cfg.z_dim)}, got {tuple(noise.shape)}")
        g_all, skips_all = self.encoder(frames.reshape(T * B, *frames.shape[2:]))
        g_all = g_all.reshape(T, B, -1)
        skips_all = [s.reshape(T, B, *s.shape[1:]) for s in skips_all]

        states = self.init_states(B)
        out = TrainOutput([], [], [])
        for t in range(1, T):
            prior, states = self._prior_from(g_all[t - 1], states)
            post, states = self._posterior_from(g_all[t], states)
            z = sample_latent(post, noise[t - 1])
            x_pred, states = self._predict_from(z, g_all[t - 1], [s[t - 1] for s in skips_all], states)
            out.predictions.append(x_pred)
            out.priors.append(prior)
            out.posteriors.append(post)
        return out

    def forward_generate(self, context: torch.Tensor, noise: torch.Tensor, horizon: int = 1) -> torch.Tensor:
        """Warm up on ``context`` (C, B, *input_shape) and roll out ``horizon`` frames.

        ``noise`` is (horizon, B, z_dim); latents come from the learned prior.
        Returns (horizon, B, *input_shape).
        """
        if context.dim() < 2 or context.shape[0] < 1:
            raise ShapeError("context must contain at least one frame")
        if horizon < 1:
            raise ShapeError("horizon must be >= 1")
        C, B = context.shape[:2]
        if tuple(noise.shape) != (horizon, B, self.cfg.z_dim):
            raise ShapeError(f"noise must be {(horizon, B, self.cfg.z_dim)}, got {tuple(noise.shape)}")
        g_ctx, skips_ctx = self.encoder(context.reshape(C * B, *context.shape[2:]))
        g_ctx = g_ctx.reshape(C, B, -1)
        skips_ctx = [s.reshape(C, B, *s.shape[1:]) for s in skips_ctx]

        states = self.init_states(B)
        # warm-up: consume ground-truth transitions x_1 -> x_2 ... x_{C-1} -> x_C
        for t in range(1, C):
            prior, states = self._prior_from(g_ctx[t - 1], states)
            z = sample_latent(prior, torch.zeros_like(prior.mu))
            _, states = self._predict_from(z, g_ctx[t - 1], [s[t - 1] for s in skips_ctx], states)

        skips = [s[C - 1] for s in skips_ctx]
        g_prev = g_ctx[C - 1]
        frames = []
        for k in range(horizon):
            prior, states = self._prior_from(g_prev, states)
            z = sample_latent(prior, noise[k])
            x, states = self._predict_from(z, g_prev, skips, states)
            frames.append(x)
            if k + 1 < horizon:
                g_prev, _ = self.encoder(x)
        return torch.stack(frames)


def assemble_volume(slices: dict[int, torch.Tensor] | Sequence[torch.Tensor], n_slices: int = 48) -> torch.Tensor:
    """Stack per-slice predictions (each H x W, or 1 x H x W) in slice order."""
    if isinstance(slices, dict):
        missing = [i for i in range(n_slices) if i not in slices]
        if missing:
            raise ShapeError(f"missing slice predictions: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        items = [slices[i] for i in range(n_slices)]
    else:
        items = list(slices)
        if len(items) != n_slices:
            raise ShapeError(f"expected {n_slices} slices, got {len(items)}")
    items = [s.reshape(s.shape[-2:]) for s in items]
    return torch.stack(items)
