"""Layer-wise ScD2TE model: sparse codes -> dense pooling -> 1x1 compression -> trees.

Layer ``l`` encodes its input grid (the image for ``l = 1``, the rescaled
score map of layer ``l - 1`` otherwise), turns the codes into per-atom
component maps, pools them with those of earlier layers according to the
reuse mode, augments the pool with shifted
copies at fixed context offsets, compresses it per pixel and regresses the
mask with a boosted tree ensemble.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import boosting as B
from . import csc
from .errors import InvalidArgumentError, InvalidStateError
from .metrics import f1_score

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
REUSE_MODES = ("dense", "previous_only", "none")
COLOR_MODES = ("luminance", "per_channel")
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ModelConfig:
    layer_count: int = 4
    filter_sides: tuple = (17, 29, 29, 29)
    atom_counts: tuple = (32, 32, 32, 32)
    compressed_channels: tuple = (32, 32, 32, 32)
    context_offsets: tuple = tuple(csc.compass_offsets((2, 4, 8)))
    samples_per_layer: int = 50000
    ensemble: B.EnsembleConfig = B.EnsembleConfig()
    sparse: csc.SparseCodingConfig = csc.SparseCodingConfig()
    threshold: float = 0.5
    color_mode: str = "luminance"
    reuse_mode: str = "dense"
    seed: int = 42

    def __post_init__(self):
        for name in ("filter_sides", "atom_counts", "compressed_channels"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        object.__setattr__(self, "context_offsets",
                           tuple((int(dx), int(dy)) for dx, dy in self.context_offsets))
        L = self.layer_count
        if L < 1:
            raise InvalidArgumentError("layer_count must be >= 1")
        for name in ("filter_sides", "atom_counts", "compressed_channels"):
            if len(getattr(self, name)) != L:
                raise InvalidArgumentError(f"{name} must have layer_count={L} entries")
        if any(s < 1 or s % 2 == 0 for s in self.filter_sides):
            raise InvalidArgumentError("filter sides must be odd")
        if any(c < 1 for c in self.atom_counts + self.compressed_channels):
            raise InvalidArgumentError("atom and channel counts must be >= 1")
        if not self.context_offsets:
            raise InvalidArgumentError("at least one context offset is required")
        if not 0 < self.threshold < 1:
            raise InvalidArgumentError("threshold must lie in (0, 1)")
        if self.color_mode not in COLOR_MODES:
            raise InvalidArgumentError(f"unknown color_mode {self.color_mode!r}")
        if self.reuse_mode not in REUSE_MODES:
            raise InvalidArgumentError(f"unknown reuse_mode {self.reuse_mode!r}")
        if self.samples_per_layer < 1:
            raise InvalidArgumentError("samples_per_layer must be >= 1")
        for ell in range(1, L + 1):
            g = self.pool_width(ell)
            if self.compressed_channels[ell - 1] > g:
                raise InvalidArgumentError(
                    f"layer {ell}: compressed_channels exceeds pool width {g}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small preset that trains the synthetic corpus in one to two minutes."""
        base = dict(
            filter_sides=(7, 7, 7, 7), atom_counts=(8, 8, 8, 8),
            compressed_channels=(16, 16, 16, 16), samples_per_layer=40000,
            sparse=csc.SparseCodingConfig(dict_epochs=6, patches_per_epoch=16,
                                          max_inner_iters=10, tol=1e-3),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def image_channels(self) -> int:
        return 3 if self.color_mode == "per_channel" else 1

    def code_channels(self, ell: int) -> int:
        c = self.atom_counts[ell - 1]
        return c * self.image_channels if ell == 1 else c

    def pooled_layers(self, ell: int) -> list[int]:
        """Layers whose codes feed ensemble ``ell``."""
        if self.reuse_mode == "dense":
            return list(range(1, ell + 1))
        if self.reuse_mode == "previous_only":
            return list(range(max(1, ell - 1), ell + 1))
        return [ell]

    def pool_width(self, ell: int) -> int:
        """Compressor input width g_l (pooled codes times context blocks)."""
        g = sum(self.code_channels(k) for k in self.pooled_layers(ell))
        return g * (1 + len(self.context_offsets))

    def layer_seed(self, ell: int, purpose: int) -> int:
        return int(np.random.SeedSequence([self.seed, ell, purpose]).generate_state(1)[0])


@dataclass(frozen=True)
class Layer:
    index: int
    dictionary: csc.LocalDictionary
    compressor: csc.Compressor
    ensemble: B.TreeEnsemble
    score_low: float = 0.0
    score_high: float = 1.0
    warnings: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.compressor.in_channels <= self.dictionary.atom_count:
            raise InvalidArgumentError("pool width must exceed the layer's atom count")
        if self.ensemble.n_features != self.compressor.out_channels:
            raise InvalidArgumentError("ensemble width must equal compressor output width")
        if not self.score_high >= self.score_low:
            raise InvalidArgumentError("score rescale bounds are inverted")

    def rescale(self, score: np.ndarray) -> np.ndarray:
        """Affine map of training score range onto [0, 1], clipped."""
        span = self.score_high - self.score_low
        if span <= 0:
            return np.zeros_like(score)
        return np.clip((score - self.score_low) / span, 0.0, 1.0)


@dataclass(frozen=True)
class ScD2TEModel:
    layers: tuple
    config: ModelConfig
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        cfg = self.config
        if len(self.layers) != cfg.layer_count:
            raise InvalidArgumentError("model must hold exactly layer_count trained layers")
        for ell, layer in enumerate(self.layers, start=1):
            if layer.index != ell:
                raise InvalidArgumentError("layer indices must run 1..L")
            if layer.dictionary.filter_side != cfg.filter_sides[ell - 1]:
                raise InvalidArgumentError(f"layer {ell}: filter side disagrees with config")
            if layer.dictionary.atom_count != cfg.atom_counts[ell - 1]:
                raise InvalidArgumentError(f"layer {ell}: atom count disagrees with config")
            if layer.compressor.in_channels != cfg.pool_width(ell):
                raise InvalidArgumentError(f"layer {ell}: compressor width disagrees with config")
            if layer.compressor.out_channels != cfg.compressed_channels[ell - 1]:
                raise InvalidArgumentError(f"layer {ell}: compressed width disagrees with config")


# -- images -------------------------------------------------------------------

def prepare_image(image, color_mode: str = "luminance") -> np.ndarray:
    """Validated float grid: ``(H, W)`` for luminance, ``(H, W, 3)`` per channel."""
    x = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("image contains non-finite values")
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[:, :, 0]
    if color_mode == "luminance":
        if x.ndim == 3 and x.shape[2] in (3, 4):
            x = x[:, :, :3] @ LUMA
        if x.ndim != 2:
            raise InvalidArgumentError(f"unsupported image shape {x.shape}")
    else:
        if x.ndim != 3 or x.shape[2] not in (3, 4):
            raise InvalidArgumentError("per_channel mode needs an RGB image")
        x = x[:, :, :3]
    if x.min() < 0 or x.max() > 1:
        raise InvalidArgumentError("image values must lie in [0, 1]")
    return np.ascontiguousarray(x)


def _channels(x: np.ndarray) -> list[np.ndarray]:
    if x.ndim == 2:
        return [x]
    return [np.ascontiguousarray(x[:, :, k]) for k in range(x.shape[2])]


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- one layer ------------------------------------------------------------------

def _encode_layer(x: np.ndarray, dictionary: csc.LocalDictionary, cfg: ModelConfig,
                  ell: int) -> csc.FeatureMaps:
    """Layer features: sparse codes of every channel, split into per-atom components."""
    maps = [csc.encode(ch, dictionary, cfg.sparse, ell) for ch in _channels(x)]
    codes = maps[0] if len(maps) == 1 else csc.concat_maps(maps, ell)
    return csc.atom_components(codes, dictionary)


def _pool(carry: Sequence[csc.FeatureMaps], cfg: ModelConfig, ell: int) -> csc.FeatureMaps:
    return csc.concat_maps([carry[k - 1] for k in cfg.pooled_layers(ell)], ell)


def _score(layer: Layer, pool: csc.FeatureMaps, offsets) -> np.ndarray:
    z = csc.compress_context(pool, offsets, layer.compressor)
    h, w, k = z.shape
    return B.predict(layer.ensemble, z.reshape(h * w, k)).reshape(h, w)


def forward_layer(model: ScD2TEModel, layer_index: int, input_grid,
                  carried_features: Sequence[csc.FeatureMaps]):
    """Run layer ``layer_index`` on ``input_grid``; returns ``(score, carry)``.

    ``carried_features`` must hold the feature maps of layers 1..l-1 and is
    returned extended by this layer's maps.  ``input_grid`` is the image for
    the first layer and the previous layer's rescaled score map otherwise.
    """
    cfg = model.config
    ell = layer_index
    if not 1 <= ell <= len(model.layers):
        raise InvalidArgumentError(f"layer index {ell} out of range")
    if len(carried_features) != ell - 1:
        raise InvalidStateError(
            f"layer {ell} needs {ell - 1} carried feature sets, got {len(carried_features)}")
    layer = model.layers[ell - 1]
    x = np.asarray(input_grid, dtype=np.float64)
    carry = list(carried_features) + [_encode_layer(x, layer.dictionary, cfg, ell)]
    return _score(layer, _pool(carry, cfg, ell), cfg.context_offsets), carry


def _check_size(x: np.ndarray, cfg: ModelConfig):
    if max(cfg.filter_sides) > min(x.shape[:2]):
        raise InvalidArgumentError(
            f"image {x.shape[:2]} is smaller than the largest filter side {max(cfg.filter_sides)}")


def score_layers(model: ScD2TEModel, image) -> list[np.ndarray]:
    """Raw score map after every layer."""
    cfg = model.config
    x = prepare_image(image, cfg.color_mode)
    _check_size(x, cfg)
    carry: list = []
    scores = []
    grid = x
    for ell, layer in enumerate(model.layers, start=1):
        score, carry = forward_layer(model, ell, grid, carry)
        scores.append(score)
        grid = layer.rescale(score)
    return scores


def predict_image(model: ScD2TEModel, image):
    """``(score_map, mask)`` of the final layer; mask is ``score >= threshold``."""
    score = score_layers(model, image)[-1]
    return score, (score >= model.config.threshold).astype(np.uint8)


# -- training -------------------------------------------------------------------

@dataclass(frozen=True)
class LayerReport:
    layer: int
    time_s: float
    train_f1: float
    warnings: tuple = ()


def stratified_pixels(mask: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Flat pixel indices, half foreground and half background where available."""
    flat = np.asarray(mask).reshape(-1) > 0
    fg, bg = np.flatnonzero(flat), np.flatnonzero(~flat)
    count = min(count, flat.size)
    n_fg = min(count // 2, fg.size)
    n_bg = min(count - n_fg, bg.size)
    n_fg = min(count - n_bg, fg.size)
    pick = np.concatenate([rng.choice(fg, n_fg, replace=False),
                           rng.choice(bg, n_bg, replace=False)])
    return np.sort(pick)


def _mean_f1(masks, preds) -> float:
    vals = []
    for m, p in zip(masks, preds):
        if m.any() or p.any():
            vals.append(f1_score(p, m))
    return float(np.mean(vals)) if vals else 1.0


class _LayerwiseTrainer:
    """Mutable training state: inputs and carries for every training image."""

    def __init__(self, images, masks, cfg: ModelConfig, threads: int = 1):
        self.cfg = cfg
        self.masks = masks
        self.threads = threads
        self.grids = images
        self.carries: list[list] = [[] for _ in images]
        self.layers: list[Layer] = []

    def fork(self, cfg: ModelConfig) -> "_LayerwiseTrainer":
        other = _LayerwiseTrainer(self.grids, self.masks, cfg, self.threads)
        other.carries = [list(c) for c in self.carries]
        other.layers = list(self.layers)
        return other

    def fit_next(self) -> tuple[Layer, LayerReport]:
        cfg = self.cfg
        ell = len(self.layers) + 1
        t0 = time.perf_counter()
        side = cfg.filter_sides[ell - 1]
        sparse = dataclasses.replace(cfg.sparse, seed=cfg.layer_seed(ell, 0))
        dict_inputs = [ch for g in self.grids for ch in _channels(g)]
        dictionary = csc.learn_dictionary(dict_inputs, cfg.atom_counts[ell - 1], side, sparse)
        warnings = list(dictionary.warnings)

        maps = _pmap(lambda g: _encode_layer(g, dictionary, cfg, ell), self.grids, self.threads)
        for carry, m in zip(self.carries, maps):
            carry.append(m)
        pools = [_pool(c, cfg, ell) for c in self.carries]

        rng = np.random.default_rng(cfg.layer_seed(ell, 1))
        n = len(pools)
        quotas = [cfg.samples_per_layer // n + (i < cfg.samples_per_layer % n) for i in range(n)]
        feats, targets = [], []
        for pool, mask, q in zip(pools, self.masks, quotas):
            idx = stratified_pixels(mask, q, rng)
            rows, cols = np.divmod(idx, pool.width)
            feats.append(csc.context_vectors(pool, cfg.context_offsets, rows, cols))
            targets.append(mask.reshape(-1)[idx].astype(np.float64))
        raw = np.concatenate(feats)
        y = np.concatenate(targets)
        comp = csc.fit_compressor(raw, cfg.compressed_channels[ell - 1])
        X = csc.apply_compressor(comp, raw)
        ens_cfg = dataclasses.replace(cfg.ensemble, seed=cfg.layer_seed(ell, 2))
        ensemble = B.fit_ensemble(B.SampleSet(X, y), ens_cfg)

        draft = Layer(ell, dictionary, comp, ensemble)
        scores = _pmap(lambda p: _score(draft, p, cfg.context_offsets), pools, self.threads)
        lo = float(min(s.min() for s in scores))
        hi = float(max(s.max() for s in scores))
        if hi <= lo:
            warnings.append(f"degenerate-layer: layer {ell} produced constant scores")
            log.warning("layer %d produced constant scores", ell)
        layer = dataclasses.replace(draft, score_low=lo, score_high=max(hi, lo),
                                    warnings=tuple(warnings))
        self.layers.append(layer)
        self.grids = [layer.rescale(s) for s in scores]
        self.last_scores = scores
        preds = [(s >= cfg.threshold) for s in scores]
        report = LayerReport(ell, time.perf_counter() - t0, _mean_f1(self.masks, preds),
                             tuple(warnings))
        log.info("layer %d trained in %.1fs, train F1 %.4f", ell, report.time_s, report.train_f1)
        return layer, report

    def model(self) -> ScD2TEModel:
        return ScD2TEModel(layers=tuple(self.layers), config=self.cfg)


def _prepare_dataset(dataset, cfg: ModelConfig):
    if len(dataset) == 0:
        raise InvalidArgumentError("dataset is empty")
    images, masks = [], []
    for n, (image, mask) in enumerate(dataset):
        x = prepare_image(image, cfg.color_mode)
        m = np.asarray(mask)
        if m.shape != x.shape[:2]:
            raise InvalidArgumentError(f"item {n}: mask shape {m.shape} != image shape {x.shape[:2]}")
        if not np.isin(m, (0, 1)).all():
            raise InvalidArgumentError(f"item {n}: mask is not binary")
        _check_size(x, cfg)
        images.append(x)
        masks.append(m.astype(np.uint8))
    return images, masks


def train(dataset, cfg: ModelConfig, threads: int = 1,
          on_layer: Optional[Callable[[LayerReport], None]] = None) -> ScD2TEModel:
    """Train all layers in order on ``(image, mask)`` pairs; no back-propagation."""
    images, masks = _prepare_dataset(dataset, cfg)
    trainer = _LayerwiseTrainer(images, masks, cfg, threads)
    for _ in range(cfg.layer_count):
        _, report = trainer.fit_next()
        if on_layer is not None:
            on_layer(report)
    return trainer.model()


@dataclass(frozen=True)
class AblationRow:
    mode: str
    layer: int
    time_s: float
    f1: float


def train_ablation(dataset, cfg: ModelConfig, test_set, modes=REUSE_MODES,
                   threads: int = 1, on_model=None) -> list[AblationRow]:
    """Held-out F1 after every layer for each reuse mode.

    The first layer does not depend on the reuse mode, so it is trained once
    and shared; its time is charged to every mode.  ``on_model(mode, model)``
    receives each finished full-depth model.
    """
    images, masks = _prepare_dataset(dataset, cfg)
    test_images, test_masks = _prepare_dataset(test_set, cfg)
    base = _LayerwiseTrainer(images, masks, dataclasses.replace(cfg, reuse_mode="dense"), threads)
    first, first_report = base.fit_next()
    rows = []
    for mode in modes:
        mcfg = dataclasses.replace(cfg, reuse_mode=mode)
        trainer = base.fork(mcfg)
        carries = [[] for _ in test_images]
        grids = list(test_images)
        for ell in range(1, cfg.layer_count + 1):
            if ell == 1:
                layer, elapsed = first, first_report.time_s
            else:
                layer, report = trainer.fit_next()
                elapsed = report.time_s
            model = ScD2TEModel(layers=tuple(trainer.layers), config=dataclasses.replace(
                mcfg, layer_count=ell, filter_sides=mcfg.filter_sides[:ell],
                atom_counts=mcfg.atom_counts[:ell],
                compressed_channels=mcfg.compressed_channels[:ell]))
            outs = _pmap(lambda a: forward_layer(model, ell, a[0], a[1]),
                         list(zip(grids, carries)), threads)
            scores = [s for s, _ in outs]
            carries = [c for _, c in outs]
            grids = [layer.rescale(s) for s in scores]
            f1 = _mean_f1(test_masks, [s >= cfg.threshold for s in scores])
            rows.append(AblationRow(mode, ell, elapsed, f1))
            log.info("ablation %s layer %d F1 %.4f", mode, ell, f1)
        if on_model is not None:
            on_model(mode, model)
    return rows
