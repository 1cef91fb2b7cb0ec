"""Student network: patch tokenizer, transformer encoder, concept extraction and heads."""
from __future__ import annotations

import math

import numpy as np

from .. import numerics as nx
from ..geometry import chamfer_l2, interpolation_matrix
from ..numerics import Tensor
from .config import ModelConfig
from .layers import MLP, Block, BatchNorm, CrossBlock, LayerNorm, Linear, Module, initialize


class PatchTokenizer(Module):
    """Shared per-point 1x1 convolutions, max-pooled within each patch."""

    def __init__(self, channels: tuple[int, ...], dim: int):
        widths = (3, *channels, dim)
        self.convs = [Linear(a, b) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [BatchNorm(c) for c in channels]

    def __call__(self, patches) -> Tensor:
        h = patches
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.norms):
                h = nx.relu(self.norms[i](h))
        return nx.max_pool(h, axis=-2)


class Backbone(Module):
    """Tokenizer, positional MLP and the stack of self-attention blocks."""

    def __init__(self, cfg: ModelConfig):
        self.tokenizer = PatchTokenizer(cfg.tokenizer_channels, cfg.dim)
        self.pos_embed = MLP(3, cfg.pos_hidden, cfg.dim, "gelu")
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.activation) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self._pos_every_layer = cfg.pos_every_layer

    def _input(self, arr) -> Tensor:
        if isinstance(arr, Tensor):
            return arr
        return Tensor(np.asarray(arr, dtype=self.norm.gain.dtype))

    def embed(self, patches, centers) -> tuple[Tensor, Tensor]:
        """(B, g, k, 3) patches and (B, g, 3) centers -> tokens and positional embeddings."""
        return self.tokenizer(self._input(patches)), self.pos_embed(self._input(centers))

    def encode(self, tokens, pos) -> list[Tensor]:
        """Per-layer outputs of the encoder.

        ``pos`` is added to the first block's input and, unless configured for
        input-only injection, to every block's output.
        """
        h = nx.add(tokens, pos)
        outs = []
        for blk in self.blocks:
            h = blk(h)
            if self._pos_every_layer:
                h = nx.add(h, pos)
            outs.append(h)
        return outs

    def __call__(self, patches, centers) -> list[Tensor]:
        return self.encode(*self.embed(patches, centers))


class ConceptExtractor(Module):
    """Learnable concept queries refined by one cross-attention block shared across layers."""

    def __init__(self, cfg: ModelConfig):
        self.queries = Tensor(np.zeros((cfg.concept_tokens, cfg.dim), dtype=np.float32), requires_grad=True)
        self.block = CrossBlock(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.activation)
        self.norm = LayerNorm(cfg.dim)

    def __call__(self, layer_features: list[Tensor]) -> Tensor:
        c = self.queries
        for f in layer_features:
            c = self.block(c, f)
        return self.norm(c)


class Projection(Module):
    """Two-layer MLP from flattened student features to an (l, d_cap) prefix."""

    def __init__(self, d_in: int, d_hidden: int, prefix_len: int, teacher_dim: int, act: str = "gelu"):
        self.mlp = MLP(d_in, d_hidden, prefix_len * teacher_dim, act)
        self._out = (prefix_len, teacher_dim)

    def __call__(self, x: Tensor, feature_dims: int = 2) -> Tensor:
        """Flatten the trailing ``feature_dims`` axes of ``x`` and project."""
        lead = x.shape[:x.ndim - feature_dims]
        flat = nx.reshape(x, (*lead, 1, -1))  # keep a row axis so unbatched input works
        return nx.reshape(self.mlp(flat), (*lead, *self._out))


class ReconHead(Module):
    """Mask token, transformer decoder and per-patch coordinate regressor."""

    def __init__(self, cfg: ModelConfig):
        self.mask_token = Tensor(np.zeros(cfg.dim, dtype=np.float32), requires_grad=True)
        self.blocks = [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, cfg.activation) for _ in range(cfg.decoder_depth)]
        self.norm = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.patch_size * 3)
        self._k = cfg.patch_size

    def decode(self, encoded: Tensor, pos: Tensor) -> Tensor:
        x = encoded
        for blk in self.blocks:
            x = blk(nx.add(x, pos))
        return self.norm(x)

    def predict(self, decoded: Tensor, mask_idx: np.ndarray) -> Tensor:
        picked = nx.gather_rows(decoded, mask_idx)
        out = self.head(picked)
        return nx.reshape(out, (*out.shape[:-1], self._k, 3))


class ClassificationHead(Module):
    def __init__(self, dim: int, hidden: int, num_classes: int):
        self.mlp = MLP(2 * dim, hidden, num_classes, "relu")

    def __call__(self, tokens: Tensor) -> Tensor:
        pooled = nx.concat([nx.mean_pool(tokens, axis=-2), nx.max_pool(tokens, axis=-2)], axis=-1)
        return self.mlp(pooled)


class SegmentationHead(Module):
    """Multi-layer patch features propagated to points by 3-NN interpolation."""

    def __init__(self, dim: int, hidden: int, num_labels: int):
        self.mlp = MLP(9 * dim, hidden, num_labels, "relu")

    def propagate(self, patch_feats: Tensor, centers, query_points) -> Tensor:
        w = interpolation_matrix(np.asarray(query_points, np.float64), np.asarray(centers, np.float64))
        return nx.matmul(Tensor(w.astype(patch_feats.dtype)), patch_feats)

    def __call__(self, layer_feats: list[Tensor], centers, query_points) -> Tensor:
        feats = nx.concat(layer_feats, axis=-1)                     # (B, g, 3d)
        glob = nx.concat([nx.mean_pool(feats, axis=-2), nx.max_pool(feats, axis=-2)], axis=-1)
        point = self.propagate(feats, centers, query_points)        # (B, n, 3d)
        n = point.shape[-2]
        glob = nx.reshape(glob, (*glob.shape[:-1], 1, glob.shape[-1]))
        spread = nx.add(glob, np.zeros((*point.shape[:-1], glob.shape[-1]), dtype=point.dtype))
        return self.mlp(nx.concat([point, spread], axis=-1)) if n else point


# --- full models ------------------------------------------------------------

def random_mask(batch: int, g: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted (batch, ceil(ratio * g)) patch indices to hide."""
    if g < 2:
        raise ValueError("masking needs at least two patches")
    m = math.ceil(ratio * g - 1e-9)
    if not 1 <= m <= g:
        raise ValueError(f"mask ratio {ratio} yields {m} of {g} patches")
    return np.sort(np.stack([rng.permutation(g)[:m] for _ in range(batch)]), axis=-1)


class PretrainModel(Module):
    """Backbone plus the pre-training heads selected by ``distill`` / ``recon``.

    With ``no_concept`` the concept extractor is bypassed and the projection
    reads mean- and max-pooled final-layer tokens instead.
    """

    def __init__(self, cfg: ModelConfig, distill: bool = True, recon: bool = False,
                 no_concept: bool = False, seed: int = 0, recon_seed: int | None = None):
        self.cfg = cfg
        self.encoder = Backbone(cfg)
        self.concept = ConceptExtractor(cfg) if distill and not no_concept else None
        self.projection = None
        if distill:
            d_in = 2 * cfg.dim if no_concept else cfg.concept_tokens * cfg.dim
            self.projection = Projection(d_in, cfg.concept_tokens * cfg.dim, cfg.prefix_len,
                                         cfg.teacher_dim, cfg.activation)
        self.recon = ReconHead(cfg) if recon else None
        initialize(self.encoder, seed, "encoder.", cfg.init_std)
        if self.concept is not None:
            initialize(self.concept, seed, "concept.", cfg.init_std)
        if self.projection is not None:
            initialize(self.projection, seed, "projection.", cfg.init_std)
        if self.recon is not None:
            initialize(self.recon, seed if recon_seed is None else recon_seed, "recon.", cfg.init_std)

    @property
    def no_concept(self) -> bool:
        return self.projection is not None and self.concept is None

    def concept_tokens(self, layers: list[Tensor]) -> Tensor:
        if self.concept is None:
            last = layers[-1]
            return nx.concat([nx.mean_pool(last, axis=-2), nx.max_pool(last, axis=-2)], axis=-1)
        return self.concept(layers)

    def student_prefix(self, patches, centers) -> Tensor:
        """Projected concept tokens C' with shape (B, l, d_cap)."""
        feats = self.concept_tokens(self.encoder(patches, centers))
        return self.projection(feats, feature_dims=1 if self.concept is None else 2)

    def distill_loss(self, patches, centers, prefix) -> Tensor:
        return distill_loss(self.student_prefix(patches, centers), prefix)

    def recon_loss(self, patches, centers, mask_idx: np.ndarray) -> Tensor:
        return mask_and_reconstruct(patches, centers, self.encoder, self.recon, mask_idx)


def distill_loss(c_prime: Tensor, prefix) -> Tensor:
    """MSE between projected concept tokens and the frozen teacher prefix."""
    target = prefix if isinstance(prefix, Tensor) else Tensor(prefix, frozen=True)
    if target.dtype != c_prime.dtype:
        target = Tensor(target.data.astype(c_prime.dtype), frozen=True)
    return nx.mse(c_prime, target)


def mask_and_reconstruct(patches, centers, encoder: Backbone, recon: ReconHead, mask_idx: np.ndarray) -> Tensor:
    """Mean l2 Chamfer distance between predicted and true masked patches.

    Masked patch tokens are replaced by the learnable mask token before the
    encoder; the decoder sees every encoded token plus positions.
    """
    patches = np.asarray(patches)
    if patches.shape[-3] < 2:
        raise ValueError("reconstruction needs at least two patches")
    tokens, pos = encoder.embed(patches, centers)
    hidden = np.zeros(tokens.shape[:-1], dtype=bool)
    np.put_along_axis(hidden, mask_idx, True, axis=-1)
    masked = nx.where(hidden[..., None], recon.mask_token, tokens)
    encoded = encoder.norm(encoder.encode(masked, pos)[-1])
    pred = recon.predict(recon.decode(encoded, pos), mask_idx)
    truth = np.take_along_axis(patches, mask_idx[..., None, None], axis=-3).astype(pred.dtype)
    return nx.mean(chamfer_l2(pred, Tensor(truth)))


class Classifier(Module):
    def __init__(self, cfg: ModelConfig, num_classes: int, seed: int = 0):
        self.cfg = cfg
        self.encoder = Backbone(cfg)
        self.head = ClassificationHead(cfg.dim, cfg.head_hidden, num_classes)
        initialize(self.encoder, seed, "encoder.", cfg.init_std)
        initialize(self.head, seed, "head.", cfg.init_std)

    def __call__(self, patches, centers) -> Tensor:
        layers = self.encoder(patches, centers)
        return self.head(self.encoder.norm(layers[-1]))


class Segmenter(Module):
    def __init__(self, cfg: ModelConfig, num_labels: int, seed: int = 0):
        self.cfg = cfg
        self.encoder = Backbone(cfg)
        self.head = SegmentationHead(cfg.dim, cfg.head_hidden, num_labels)
        self._layers = cfg.segmentation_layers
        initialize(self.encoder, seed, "encoder.", cfg.init_std)
        initialize(self.head, seed, "head.", cfg.init_std)

    def __call__(self, patches, centers, query_points) -> Tensor:
        layers = self.encoder(patches, centers)
        picked = [layers[i - 1] for i in self._layers]
        return self.head(picked, centers, query_points)
