"""
The exemplar guided network.

A vision transformer reads the window patch by patch. Its input is joined by
the window's global view and by the global views and expressions of the
nearest exemplars, which a projector maps into the model dimension. Every
`eb_frequency` transformer blocks an exemplar bridging block (`ExemplarBridge`)
folds the exemplar expressions into the refined global view and rescales
the patch representations. The prediction head reads the final global view
together with an attention-pooled summary of the patches.

Shapes: B windows per batch, k exemplars, L patches, D style dimension,
M genes, ``D_m`` model dimension.
"""
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np

from .checkpoint import read_container, write_container
from .config import VARIANTS, ModelConfig
from .errors import CheckpointError, ConfigError, DimensionError, NonFiniteError
from .index import ExemplarSet
from .nn import AttentionPool, Linear, Module, Parameter, TransformerBlock, TwoLayerMlp, tile_index
from .tensor import Tensor, as_tensor, chunk, concat, reshape, take, transpose

__all__ = (
    "EgnState",
    "SharedProjector",
    "ExemplarBridge",
    "EgnModel",
    "canonical_exemplar_order",
)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"EGNM"

# Variants that build an exemplar bridge after every `eb_frequency` blocks.
_BRIDGED = ("full", "without_projector")


@dataclass
class EgnState:
    """
    :param h: (B, D_m) refined global view.
    :param r: (B, k, D_m) exemplar representations.
    :param s: (B, k, D_m) exemplar expression representations.
    :param z: (B, L, D_m) patch representations.
    """

    h: Tensor
    r: Tensor
    s: Tensor
    z: Optional[Tensor] = None

    def check_finite(self, layer: int) -> None:
        _guard(layer, h=self.h, r=self.r, s=self.s, z=self.z)


def _guard(layer: int, **values: Optional[Tensor]) -> None:
    for name, value in values.items():
        if value is not None and not np.all(np.isfinite(value.data)):
            logger.error("Non-finite %s after layer %d", name, layer)
            raise NonFiniteError(
                f"State {name!r} is not finite after layer {layer}.", where=f"layer {layer}"
            )


class SharedProjector(Module):
    """
    Projector of the exemplar pairs: the global-view projector (shared
    storage, not a copy) followed by one extra linear layer on
    ``[projected e_j, y_j]``.
    """

    def __init__(
        self, shared: TwoLayerMlp, model_dim: int, num_genes: int, rng: np.random.Generator
    ) -> None:
        self.shared = shared
        self.extra = Linear(model_dim + num_genes, model_dim, rng)

    def forward(self, views: Tensor, expressions: Tensor) -> Tensor:
        return self.extra(concat([self.shared(views), expressions], axis=-1))


class ExemplarBridge(Module):
    """
    Exemplar bridging block.

    Stage one lets the exemplars update the global view through sigmoid
    gates. Stage two turns the updated view into one gate per head and
    patch, scales per-patch projections with them and adds the result back
    to both the patches and the global view.

    `mlp_z` and `mlp_h` start at zero and carry no bias, so a fresh block (or
    one whose gates are closed) leaves patches and view unchanged.
    """

    def __init__(
        self,
        model_dim: int,
        num_patches: int,
        heads: int,
        head_dim: int,
        rng: np.random.Generator,
    ) -> None:
        self.model_dim = model_dim
        self.num_patches = num_patches
        self.heads = heads
        self.head_dim = head_dim

        self.mlp_s = Linear(model_dim, model_dim, rng)
        self.mlp_m = TwoLayerMlp(2 * model_dim, 2 * model_dim, 2 * model_dim, rng)
        self.mlp_gate = Linear(model_dim, heads * num_patches, rng)
        self.mlp_o = Linear(model_dim, 2 * heads * head_dim, rng)
        self.mlp_z = Linear(heads * head_dim, model_dim, rng, zero_init=True, bias=False)
        self.mlp_h = Linear(heads * head_dim, model_dim, rng, zero_init=True, bias=False)

    def exemplar_interaction(
        self, h: Tensor, r: Tensor, s: Tensor
    ) -> Tuple[Tensor, Tensor, Tensor]:
        """
        Returns ``(h_hat, r_next, s_next)``.
        """
        batch, k, dim = r.shape
        s_next = self.mlp_s(s)
        h_rows = reshape(h, (batch, 1, dim)) * np.ones((1, k, 1))
        gates = self.mlp_m(concat([h_rows, h_rows - r], axis=-1)).sigmoid()
        m_h, m_r = chunk(gates, axis=-1)
        h_hat = h + (m_h * s_next).mean(axis=1)
        r_next = r + m_r * s_next
        return h_hat, r_next, s_next

    def patch_gates(self, h_hat: Tensor) -> Tensor:
        "One gate per head and patch, shape (B, G, L)."
        batch = h_hat.shape[0]
        return reshape(self.mlp_gate(h_hat).sigmoid(), (batch, self.heads, self.num_patches))

    def patch_revision(self, h_hat: Tensor, z: Tensor) -> Tuple[Tensor, Tensor]:
        """
        Returns ``(h_next, z_next)``.
        """
        batch, patches, _ = z.shape
        gates = reshape(
            transpose(self.patch_gates(h_hat), (0, 2, 1)), (batch, patches, self.heads, 1)
        )
        projected = reshape(self.mlp_o(z), (batch, patches, self.heads, 2 * self.head_dim))
        o_h, o_z = chunk(projected * gates, axis=-1)
        o_h = reshape(o_h, (batch, patches, self.heads * self.head_dim))
        o_z = reshape(o_z, (batch, patches, self.heads * self.head_dim))

        z_next = z + self.mlp_z(o_z)
        h_next = h_hat + self.mlp_h(o_h.mean(axis=1))
        return h_next, z_next

    def forward(self, state: EgnState) -> EgnState:
        assert state.z is not None
        h_hat, r_next, s_next = self.exemplar_interaction(state.h, state.r, state.s)
        h_next, z_next = self.patch_revision(h_hat, state.z)
        return EgnState(h=h_next, r=r_next, s=s_next, z=z_next)


def canonical_exemplar_order(views: np.ndarray, expressions: np.ndarray) -> np.ndarray:
    """
    Per query, the permutation sorting its exemplars lexicographically on
    ``[e_j, y_j]``. Shape (B, k).
    """
    rows = np.concatenate([views, expressions], axis=-1)
    return np.stack([np.lexsort(r.T[::-1]) for r in rows])


class EgnModel(Module):
    """
    :param variant: Which dataflow to build. "full" is the complete network;
        "backbone_only" predicts from the pooled patches alone;
        "without_eb" joins the projected global view to the pooled patches
        without bridging blocks; "without_projector" replaces the projector
        networks by single linear layers; "linear_probe" is one linear layer
        on the global view.
    """

    def __init__(self, config: ModelConfig, variant: str = "full", seed: int = 0) -> None:
        problems = config.problems()
        if variant not in VARIANTS:
            problems.append(f"Unknown variant {variant!r}; expected one of {VARIANTS!r}.")
        if problems:
            raise ConfigError(problems)

        self.config = config
        self.variant = variant
        self.seed = seed
        rng = np.random.default_rng(seed)

        c = config
        dim = c.model_dim
        patch_features = 3 * c.patch_size * c.patch_size
        self._tiles = tile_index(3, c.image_size, c.patch_size)

        if variant == "linear_probe":
            self.head = Linear(c.style_dim, c.num_genes, rng)
            return

        self.patch_embedding = Linear(patch_features, dim, rng)
        self.positional = Parameter(rng.normal(0.0, 0.02, (c.num_patches, dim)))
        self.blocks = [
            TransformerBlock(dim, c.backbone_heads, c.ffn_dim, rng) for _ in range(c.depth)
        ]
        self.pool = AttentionPool(dim, rng)

        if variant == "backbone_only":
            self.head = Linear(dim, c.num_genes, rng)
            return

        if variant == "without_projector":
            self.project_h: Module = Linear(c.style_dim, dim, rng)
            self.project_r: Module = Linear(c.style_dim + c.num_genes, dim, rng)
            self.project_s: Module = Linear(c.num_genes, dim, rng)
        else:
            shared = TwoLayerMlp(c.style_dim, dim, dim, rng)
            self.project_h = shared
            if variant == "full":
                self.project_r = SharedProjector(shared, dim, c.num_genes, rng)
                self.project_s = TwoLayerMlp(c.num_genes, dim, dim, rng)

        if variant in _BRIDGED:
            self.bridges = [
                ExemplarBridge(dim, c.num_patches, c.eb_heads, c.eb_head_dim, rng)
                for _ in range(c.depth // c.eb_frequency)
            ]
        self.head = Linear(2 * dim, c.num_genes, rng)

    # Pieces.

    def patch_embed(self, windows: Tensor) -> Tensor:
        """
        Tile (B, 3, S, S) windows into L flattened patches and embed them:
        (B, L, D_m).
        """
        c = self.config
        windows = as_tensor(windows)
        if windows.ndim != 4 or windows.shape[1:] != (3, c.image_size, c.image_size):
            raise DimensionError(
                f"Expected windows of shape (B, 3, {c.image_size}, {c.image_size}), got {windows.shape}."
            )
        batch = windows.shape[0]
        patches = take(reshape(windows, (batch, 3 * c.image_size * c.image_size)), self._tiles)
        return self.patch_embedding(patches) + self.positional

    def _check_exemplars(
        self, views: np.ndarray, exemplar_views: np.ndarray, exemplar_expressions: np.ndarray
    ) -> None:
        c = self.config
        batch = views.shape[0]
        expected = {
            "views": (views.shape, (batch, c.style_dim)),
            "exemplar views": (exemplar_views.shape, (batch, c.num_exemplars, c.style_dim)),
            "exemplar expressions": (
                exemplar_expressions.shape,
                (batch, c.num_exemplars, c.num_genes),
            ),
        }
        for name, (found, wanted) in expected.items():
            if tuple(found) != wanted:
                raise DimensionError(f"{name} have shape {tuple(found)}, expected {wanted}.")

    def project_inputs(
        self, views: np.ndarray, exemplar_views: np.ndarray, exemplar_expressions: np.ndarray
    ) -> EgnState:
        """
        ``h0 = MLP_h(e_i)``, ``r0_j = MLP_r([e_j, y_j])``, ``s0_j = MLP_s(y_j)``.
        """
        if not hasattr(self, "project_r"):
            raise ConfigError([f"Variant {self.variant!r} has no exemplar projector."])
        views = np.asarray(views, dtype=np.float64)
        exemplar_views = np.asarray(exemplar_views, dtype=np.float64)
        exemplar_expressions = np.asarray(exemplar_expressions, dtype=np.float64)
        self._check_exemplars(views, exemplar_views, exemplar_expressions)

        h = self.project_h(Tensor(views))
        if isinstance(self.project_r, SharedProjector):
            r = self.project_r(Tensor(exemplar_views), Tensor(exemplar_expressions))
        else:
            pairs = np.concatenate([exemplar_views, exemplar_expressions], axis=-1)
            r = self.project_r(Tensor(pairs))
        s = self.project_s(Tensor(exemplar_expressions))
        return EgnState(h=h, r=r, s=s)

    # Dataflows.

    def forward(
        self,
        windows: Any,
        views: np.ndarray,
        exemplar_views: np.ndarray,
        exemplar_expressions: np.ndarray,
    ) -> Tensor:
        """
        Predicted expressions (B, M) for a batch.
        """
        return self.forward_ablated(
            self.variant, windows, views, exemplar_views, exemplar_expressions
        )

    def forward_ablated(
        self,
        variant: str,
        windows: Any,
        views: np.ndarray,
        exemplar_views: np.ndarray,
        exemplar_expressions: np.ndarray,
    ) -> Tensor:
        """
        Run the dataflow of `variant`. Apart from the model's own variant,
        a full model also runs "without_eb" (same head, bridges skipped).
        """
        if variant not in VARIANTS:
            raise ConfigError([f"Unknown variant {variant!r}; expected one of {VARIANTS!r}."])
        if variant != self.variant and not (self.variant == "full" and variant == "without_eb"):
            raise ConfigError(
                [f"A {self.variant!r} model cannot run the {variant!r} dataflow."]
            )

        views = np.asarray(views, dtype=np.float64)
        if variant == "linear_probe":
            if views.ndim != 2 or views.shape[1] != self.config.style_dim:
                raise DimensionError(
                    f"views have shape {views.shape}, expected (B, {self.config.style_dim})."
                )
            return self.head(Tensor(views))

        z = self.patch_embed(windows)

        if variant == "backbone_only":
            for t, block in enumerate(self.blocks):
                z = block(z)
                _guard(t, z=z)
            return self.head(self.pool(z))

        if variant == "without_eb":
            if views.ndim != 2 or views.shape[1] != self.config.style_dim:
                raise DimensionError(
                    f"views have shape {views.shape}, expected (B, {self.config.style_dim})."
                )
            h = self.project_h(Tensor(views))
            for t, block in enumerate(self.blocks):
                z = block(z)
                _guard(t, h=h, z=z)
            return self.head(concat([h, self.pool(z)], axis=-1))

        exemplar_views = np.asarray(exemplar_views, dtype=np.float64)
        exemplar_expressions = np.asarray(exemplar_expressions, dtype=np.float64)
        self._check_exemplars(views, exemplar_views, exemplar_expressions)
        # The bridge averages over exemplars; a fixed order makes the result
        # independent of the order the exemplars came in.
        order = canonical_exemplar_order(exemplar_views, exemplar_expressions)
        exemplar_views = np.take_along_axis(exemplar_views, order[..., None], axis=1)
        exemplar_expressions = np.take_along_axis(exemplar_expressions, order[..., None], axis=1)

        state = self.project_inputs(views, exemplar_views, exemplar_expressions)
        state.z = z
        state.check_finite(0)
        frequency = self.config.eb_frequency
        for t, block in enumerate(self.blocks):
            state.z = block(state.z)
            if (t + 1) % frequency == 0:
                state = self.bridges[(t + 1) // frequency - 1](state)
            state.check_finite(t + 1)

        assert state.z is not None
        return self.head(concat([state.h, self.pool(state.z)], axis=-1))

    def predict(self, window: np.ndarray, view: np.ndarray, exemplars: ExemplarSet) -> np.ndarray:
        "Expression vector (M,) for a single window."
        return self.forward(
            np.asarray(window)[None],
            np.asarray(view)[None],
            exemplars.views[None],
            exemplars.expressions[None],
        ).numpy()[0]

    # Persistence.

    def config_echo(self) -> Dict[str, Any]:
        return {
            "kind": "model",
            "variant": self.variant,
            "seed": self.seed,
            "model": asdict(self.config),
        }

    def save(self, path: str) -> None:
        write_container(
            path,
            MODEL_MAGIC,
            self.config_echo(),
            [(name, p.data) for name, p in self.named_parameters()],
        )

    @classmethod
    def load(cls, path: str) -> "EgnModel":
        echo, params = read_container(path, MODEL_MAGIC)
        if echo.get("kind") != "model":
            raise CheckpointError(f"{path!r} is not a model checkpoint.")
        try:
            config = ModelConfig(**echo["model"])
        except TypeError as e:
            raise CheckpointError(f"{path!r}: bad model config ({e}).")
        model = cls(config, variant=echo["variant"], seed=int(echo["seed"]))
        model.load_state_dict(params)
        return model
