"""
Global-view extractor.

An encoder maps a window to a style vector ("global view"); a decoder
rebuilds the window from that vector alone, starting from a learned constant
map whose channels are scaled and shifted by the style at every stage. Both
are trained together on the L1 reconstruction error, optionally against a
discriminator.
"""
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .checkpoint import read_container, write_container
from .config import ExtractorConfig
from .errors import CheckpointError, ContractError, DimensionError, NonFiniteError
from .nn import Conv2d, Linear, Module, Parameter, Upsample2x
from .optim import AdamW
from .tensor import Tape, Tensor, backward, chunk, detach, reshape

__all__ = (
    "GlobalView",
    "Encoder",
    "DecoderStage",
    "Decoder",
    "Discriminator",
    "ExtractorModel",
    "ExtractorEpoch",
    "reconstruction_loss",
    "adversarial_losses",
    "train_extractor",
)

logger = logging.getLogger(__name__)

EXTRACTOR_MAGIC = b"EGNX"
ENCODER_STAGES = 4
DECODER_STAGES = 3


@dataclass
class GlobalView:
    vector: np.ndarray
    source_window_id: Optional[int] = None
    patient_id: Optional[int] = None


def _conv_stack(channels: List[int], rng: np.random.Generator) -> List[Conv2d]:
    return [
        Conv2d(c_in, c_out, 4, rng, stride=2, padding=1)
        for c_in, c_out in zip(channels[:-1], channels[1:])
    ]


class Encoder(Module):
    "Four stride-2 convolutions, flatten, linear."

    def __init__(
        self, image_size: int, style_dim: int, base_channels: int, rng: np.random.Generator
    ) -> None:
        if image_size % 2**ENCODER_STAGES:
            raise DimensionError(f"Image size {image_size} is not divisible by 16.")
        self.image_size = image_size
        self.style_dim = style_dim
        c = base_channels
        self.convs = _conv_stack([3, c, 2 * c, 2 * c, 4 * c], rng)
        final = image_size // 2**ENCODER_STAGES
        self.flat_features = 4 * c * final * final
        self.projection = Linear(self.flat_features, style_dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (3, self.image_size, self.image_size):
            raise DimensionError(
                f"Expected windows of shape (B, 3, {self.image_size}, {self.image_size}), got {x.shape}."
            )
        for conv in self.convs:
            x = conv(x).relu()
        return self.projection(reshape(x, (x.shape[0], self.flat_features)))


class DecoderStage(Module):
    """
    Upsample, 3x3 convolution, then one (scale, shift) pair per output
    channel computed linearly from the style: ``x * (1 + scale) + shift``.
    """

    def __init__(
        self, in_channels: int, out_channels: int, style_dim: int, rng: np.random.Generator
    ) -> None:
        self.out_channels = out_channels
        self.upsample = Upsample2x()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1)
        self.modulation = Linear(style_dim, 2 * out_channels, rng)

    def modulate(self, x: Tensor, style: Tensor) -> Tensor:
        scale, shift = chunk(self.modulation(style), axis=-1)
        batch = style.shape[0]
        scale = reshape(scale, (batch, self.out_channels, 1, 1))
        shift = reshape(shift, (batch, self.out_channels, 1, 1))
        return x * (scale + 1.0) + shift

    def forward(self, x: Tensor, style: Tensor) -> Tensor:
        return self.modulate(self.conv(self.upsample(x)), style).relu()


class Decoder(Module):
    def __init__(
        self, image_size: int, style_dim: int, base_channels: int, rng: np.random.Generator
    ) -> None:
        self.image_size = image_size
        self.style_dim = style_dim
        c = base_channels
        seed_size = image_size // 2**DECODER_STAGES
        self.seed = Parameter(rng.normal(0.0, 1.0, (1, 4 * c, seed_size, seed_size)))
        channels = [4 * c, 2 * c, c, c]
        self.stages = [
            DecoderStage(c_in, c_out, style_dim, rng)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        ]
        self.to_rgb = Conv2d(c, 3, 1, rng)

    def forward(self, style: Tensor) -> Tensor:
        if style.ndim != 2 or style.shape[1] != self.style_dim:
            raise DimensionError(
                f"Expected style vectors of shape (B, {self.style_dim}), got {style.shape}."
            )
        x: Tensor = self.seed
        for stage in self.stages:
            x = stage(x, style)
        return self.to_rgb(x).sigmoid()


class Discriminator(Module):
    "Stride-2 convolutions and a linear layer down to one logit per window."

    def __init__(self, image_size: int, base_channels: int, rng: np.random.Generator) -> None:
        c = base_channels
        self.convs = _conv_stack([3, c, 2 * c, 2 * c, 4 * c], rng)
        final = image_size // 2**ENCODER_STAGES
        self.flat_features = 4 * c * final * final
        self.logit = Linear(self.flat_features, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x).relu()
        return self.logit(reshape(x, (x.shape[0], self.flat_features)))


class ExtractorModel(Module):
    """
    Encoder E, decoder G and, when `adversarial`, discriminator F.
    """

    def __init__(
        self,
        image_size: int,
        style_dim: int,
        base_channels: int = 16,
        adversarial: bool = False,
        seed: int = 0,
    ) -> None:
        self.image_size = image_size
        self.style_dim = style_dim
        self.base_channels = base_channels
        self.adversarial = adversarial
        self.seed_value = seed

        rng = np.random.default_rng(seed)
        self.encoder = Encoder(image_size, style_dim, base_channels, rng)
        self.decoder = Decoder(image_size, style_dim, base_channels, rng)
        self.discriminator: Optional[Discriminator] = (
            Discriminator(image_size, base_channels, rng) if adversarial else None
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.decoder(self.encoder(x))

    def generator_parameters(self) -> List[Parameter]:
        return self.encoder.parameters() + self.decoder.parameters()

    def encode(
        self,
        window: np.ndarray,
        window_id: Optional[int] = None,
        patient_id: Optional[int] = None,
    ) -> GlobalView:
        "Global view of one (3, H, W) window."
        window = np.asarray(window, dtype=np.float64)
        if window.shape != (3, self.image_size, self.image_size):
            raise DimensionError(
                f"Expected a window of shape (3, {self.image_size}, {self.image_size}), got {window.shape}."
            )
        vector = self.encoder(Tensor(window[None])).numpy()[0]
        if not np.all(np.isfinite(vector)):
            raise NonFiniteError("Global view is not finite.", where=f"window {window_id}")
        return GlobalView(vector=vector.copy(), source_window_id=window_id, patient_id=patient_id)

    def encode_batch(self, windows: np.ndarray) -> np.ndarray:
        """
        Global views of (N, 3, H, W) windows, one row each. Every row equals
        what `encode` gives for that window.
        """
        return np.array(
            [self.encode(w).vector for w in windows], dtype=np.float64
        ).reshape(len(windows), self.style_dim)

    def decode(self, view: Any) -> np.ndarray:
        "Image (3, H, W) in [0, 1] from a global view."
        vector = view.vector if isinstance(view, GlobalView) else np.asarray(view, dtype=np.float64)
        if vector.shape != (self.style_dim,):
            raise DimensionError(
                f"Expected a view of length {self.style_dim}, got shape {vector.shape}."
            )
        return self.decoder(Tensor(vector[None])).numpy()[0]

    def config_echo(self) -> Dict[str, Any]:
        return {
            "kind": "extractor",
            "image_size": self.image_size,
            "style_dim": self.style_dim,
            "base_channels": self.base_channels,
            "adversarial": self.adversarial,
            "seed": self.seed_value,
        }

    def save(self, path: str) -> None:
        write_container(path, EXTRACTOR_MAGIC, self.config_echo(), self.named_parameters_arrays())

    def named_parameters_arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [(name, p.data) for name, p in self.named_parameters()]

    @classmethod
    def load(cls, path: str) -> "ExtractorModel":
        config, params = read_container(path, EXTRACTOR_MAGIC)
        if config.get("kind") != "extractor":
            raise CheckpointError(f"{path!r} is not an extractor checkpoint.")
        model = cls(
            image_size=int(config["image_size"]),
            style_dim=int(config["style_dim"]),
            base_channels=int(config["base_channels"]),
            adversarial=bool(config["adversarial"]),
            seed=int(config["seed"]),
        )
        model.load_state_dict(params)
        return model


def reconstruction_loss(x: Any, x_hat: Any) -> Tensor:
    "Mean absolute difference over all elements."
    x = x if isinstance(x, Tensor) else Tensor(x)
    x_hat = x_hat if isinstance(x_hat, Tensor) else Tensor(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"Cannot compare shapes {x.shape} and {x_hat.shape}.")
    return (x - x_hat).abs().mean()


def adversarial_losses(
    x: Tensor, x_hat: Tensor, discriminator: Optional[Discriminator]
) -> Tuple[Tensor, Tensor]:
    """
    Softplus GAN objective. Returns ``(generator_term, discriminator_term)``:
    the generator minimizes ``softplus(-F(x_hat))``, the discriminator
    ``softplus(-F(x)) + softplus(F(x_hat))``. Both are batch means.

    Pass a detached `x_hat` when the discriminator term is used for the
    discriminator update.
    """
    if discriminator is None:
        raise ContractError("The adversarial term is disabled in this extractor.")
    real = discriminator(x)
    fake = discriminator(x_hat)
    generator_term = (-fake).softplus().mean()
    discriminator_term = ((-real).softplus() + fake.softplus()).mean()
    return generator_term, discriminator_term


@dataclass
class ExtractorEpoch:
    epoch: int
    l1: float
    generator: float
    discriminator: float


def _check_finite(value: float, epoch: int, step: int, what: str) -> None:
    if not np.isfinite(value):
        where = f"epoch {epoch}, step {step}"
        logger.error("%s became %r at %s", what, value, where)
        raise NonFiniteError(f"{what} is {value!r} at {where}.", where=where)


def train_extractor(
    windows: np.ndarray,
    config: ExtractorConfig,
    image_size: int,
    style_dim: int,
    seed: int = 0,
    on_epoch: Optional[Callable[[ExtractorEpoch], None]] = None,
) -> Tuple[ExtractorModel, List[ExtractorEpoch]]:
    """
    Train encoder and decoder on the L1 reconstruction error.

    :param windows: (N, 3, H, W) training windows.
    :param on_epoch: Called after every epoch with its log row.
    """
    windows = np.asarray(windows, dtype=np.float64)
    if not len(windows):
        raise ContractError("Cannot train the extractor on zero windows.")

    model = ExtractorModel(
        image_size, style_dim, config.base_channels, config.adversarial, seed=seed
    )
    optimizer = AdamW(model.generator_parameters(), lr=config.lr)
    disc_optimizer = (
        AdamW(model.discriminator.parameters(), lr=config.lr)
        if model.discriminator is not None
        else None
    )

    log: List[ExtractorEpoch] = []
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(windows))
        totals = np.zeros(3)
        batches = 0

        for step, start in enumerate(range(0, len(windows), config.batch_size)):
            x = Tensor(windows[order[start : start + config.batch_size]])

            optimizer.zero_grad()
            with Tape():
                x_hat = model(x)
                l1 = reconstruction_loss(x, x_hat)
                loss = l1
                gen_value = 0.0
                if model.discriminator is not None:
                    gen_term, _ = adversarial_losses(x, x_hat, model.discriminator)
                    loss = l1 + gen_term * config.adversarial_weight
                    gen_value = gen_term.item()
                _check_finite(loss.item(), epoch, step, "Extractor loss")
                backward(loss)
            optimizer.step()

            disc_value = 0.0
            if model.discriminator is not None and disc_optimizer is not None:
                disc_optimizer.zero_grad()
                with Tape():
                    _, disc_term = adversarial_losses(x, detach(x_hat), model.discriminator)
                    _check_finite(disc_term.item(), epoch, step, "Discriminator loss")
                    backward(disc_term)
                disc_optimizer.step()
                disc_value = disc_term.item()

            totals += (l1.item(), gen_value, disc_value)
            batches += 1

        row = ExtractorEpoch(epoch, *(float(v) for v in totals / batches))
        log.append(row)
        logger.info(
            "extractor epoch %d: l1 %.5f, generator %.5f, discriminator %.5f",
            epoch, row.l1, row.generator, row.discriminator,
        )
        if on_epoch is not None:
            on_epoch(row)

    return model, log
