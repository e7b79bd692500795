"""Convolutional sparse coding with a local (slice) dictionary.

An image ``x`` is modelled as ``sum_i p_i^T d a_i``: one code vector ``a_i`` per
pixel, each selecting a combination of the local filters ``d`` stamped at that
pixel.  Borders use symmetric reflection; stamping folds out-of-image samples
back onto their reflected location, which makes :func:`reconstruct` the exact
adjoint of :func:`extract_patch`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import InvalidArgumentError, InvalidInputError, SolverError

log = logging.getLogger(__name__)

DIVERGENCE_SLACK = 1e-9


@dataclass(frozen=True)
class SparseCodingConfig:
    lam: float = 0.15
    max_inner_iters: int = 50
    tol: float = 1e-4
    sparsity_ceiling: float = 0.25
    dict_epochs: int = 20
    patches_per_epoch: int = 64
    step_size: float = 1.0
    seed: int = 42

    def __post_init__(self):
        if not self.lam >= 0:
            raise InvalidArgumentError(f"lam must be >= 0, got {self.lam}")
        if not self.tol > 0:
            raise InvalidArgumentError(f"tol must be > 0, got {self.tol}")
        if not 0 < self.sparsity_ceiling <= 1:
            raise InvalidArgumentError("sparsity_ceiling must lie in (0, 1]")
        if self.max_inner_iters < 1 or self.dict_epochs < 0:
            raise InvalidArgumentError("iteration counts must be positive")
        if not self.step_size > 0:
            raise InvalidArgumentError("step_size must be positive")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class LocalDictionary:
    """Bank of unit-norm square filters stored as a ``(side**2, count)`` matrix."""

    atoms: np.ndarray
    filter_side: int
    warnings: tuple = ()
    objective_trace: tuple = ()

    def __post_init__(self):
        atoms = _frozen(self.atoms)
        object.__setattr__(self, "atoms", atoms)
        side = self.filter_side
        if side % 2 == 0 or side < 1:
            raise InvalidArgumentError(f"filter_side must be odd, got {side}")
        if atoms.ndim != 2 or atoms.shape[0] != side * side:
            raise InvalidArgumentError(
                f"atoms must have shape ({side * side}, c), got {atoms.shape}")
        norms = np.linalg.norm(atoms, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InvalidArgumentError("dictionary columns must have unit norm")

    @property
    def atom_count(self) -> int:
        return self.atoms.shape[1]

    @property
    def filters(self) -> np.ndarray:
        """Atoms as a ``(side, side, count)`` array."""
        s = self.filter_side
        return np.ascontiguousarray(self.atoms.reshape(s, s, self.atom_count))

    @classmethod
    def from_filters(cls, filters: np.ndarray, **kw) -> "LocalDictionary":
        filters = np.asarray(filters, dtype=np.float64)
        s, s2, c = filters.shape
        if s != s2:
            raise InvalidArgumentError("filters must be square")
        atoms = filters.reshape(s * s, c)
        return cls(atoms=normalize_columns(atoms), filter_side=s, **kw)


@dataclass(frozen=True)
class FeatureMaps:
    codes: np.ndarray  # (height, width, channels)
    layer_index: int = 1
    objective_trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        codes = _frozen(self.codes)
        if codes.ndim != 3:
            raise InvalidArgumentError("codes must be (height, width, channels)")
        object.__setattr__(self, "codes", codes)

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]

    @property
    def channels(self) -> int:
        return self.codes.shape[2]

    def nonzero_fraction(self) -> float:
        return float(np.count_nonzero(self.codes)) / max(self.codes.size, 1)


@dataclass(frozen=True)
class Compressor:
    """Per-pixel affine projection ``projection @ (v - mean)`` (a 1x1 convolution)."""

    projection: np.ndarray  # (out, in)
    mean: np.ndarray  # (in,)

    def __post_init__(self):
        proj = _frozen(self.projection)
        mean = _frozen(self.mean)
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "mean", mean)
        if proj.ndim != 2 or mean.shape != (proj.shape[1],):
            raise InvalidArgumentError("projection/mean shapes disagree")
        if proj.shape[0] > proj.shape[1]:
            raise InvalidArgumentError("out_channels must not exceed in_channels")
        gram = proj @ proj.T
        if not np.allclose(gram, np.eye(proj.shape[0]), atol=1e-6, rtol=0):
            raise InvalidArgumentError("projection rows must be orthonormal")

    @property
    def in_channels(self) -> int:
        return self.projection.shape[1]

    @property
    def out_channels(self) -> int:
        return self.projection.shape[0]


def normalize_columns(atoms: np.ndarray) -> np.ndarray:
    atoms = np.array(atoms, dtype=np.float64)
    norms = np.linalg.norm(atoms, axis=0)
    if np.any(norms == 0):
        raise InvalidArgumentError("cannot normalise a zero atom")
    atoms /= norms
    return atoms


def as_image(values, name: str = "image") -> np.ndarray:
    """Validate a 2-D finite grid and return it as contiguous float64."""
    x = np.ascontiguousarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return x


def _maps(h: int, w: int, side: int):
    r = side // 2
    return K.reflect_map(h, r), K.reflect_map(w, r)


def extract_patch(image, center: tuple[int, int], side: int) -> np.ndarray:
    """Return the ``side x side`` window centred at ``center=(row, col)``, flattened.

    Out-of-bounds samples come from symmetric reflection without edge
    repetition.
    """
    x = as_image(image)
    h, w = x.shape
    r = side // 2
    if side % 2 == 0 or side < 1:
        raise InvalidArgumentError(f"side must be odd, got {side}")
    if r >= h and r >= w:
        raise InvalidArgumentError(f"side {side} too large for a {h}x{w} image")
    row, col = center
    if not (0 <= row < h and 0 <= col < w):
        raise InvalidArgumentError(f"center {center} outside the image")
    rows = reflect(np.arange(row - r, row + r + 1), h)
    cols = reflect(np.arange(col - r, col + r + 1), w)
    return x[np.ix_(rows, cols)].reshape(-1)


def lasso_objective(image, codes: FeatureMaps, dictionary: LocalDictionary, lam: float) -> float:
    res = as_image(image) - reconstruct(codes, dictionary)
    return float(0.5 * np.sum(res * res) + lam * np.sum(np.abs(codes.codes)))


def _check_geometry(x: np.ndarray, side: int):
    if side > min(x.shape):
        raise InvalidArgumentError(
            f"filter side {side} exceeds image dimensions {x.shape}")


def _encode_array(x: np.ndarray, filters: np.ndarray, cfg: SparseCodingConfig,
                  weight: np.ndarray | None = None):
    """Run coordinate descent on one grid. Returns (codes, residual, trace).

    ``weight`` optionally masks the data term (1 = counted, 0 = ignored).
    """
    h, w = x.shape
    side, _, c = filters.shape
    rmap, cmap = _maps(h, w, side)
    uniform = weight is None
    if uniform:
        weight = np.ones((h, w))
    norms2 = K.folded_norms2(filters, weight, uniform, rmap, cmap)
    codes = np.zeros((h, w, c))
    res = x * weight
    frozen = np.zeros((h, w, c), dtype=np.bool_)
    trace = K.cd_sweeps(filters, cfg.lam, codes, res, weight, norms2, frozen,
                        cfg.max_inner_iters, cfg.tol, rmap, cmap)
    _check_descent(trace)

    limit = int(np.floor(cfg.sparsity_ceiling * codes.size))
    if np.count_nonzero(codes) > limit:
        # project onto the cardinality budget, then re-solve on the kept support
        flat = np.abs(codes).reshape(-1)
        keep = np.argsort(-flat, kind="stable")[:limit]
        mask = np.zeros(flat.size, dtype=np.bool_)
        mask[keep] = True
        codes.reshape(-1)[~mask] = 0.0
        frozen = ~mask.reshape(codes.shape)
        res = (x - K.stamp(codes, filters, rmap, cmap)) * weight
        tail = K.cd_sweeps(filters, cfg.lam, codes, res, weight, norms2, frozen,
                           cfg.max_inner_iters, cfg.tol, rmap, cmap)
        _check_descent(tail)
    return codes, res, trace


def _check_descent(trace: np.ndarray):
    steps = np.diff(trace)
    scale = np.maximum(np.abs(trace[:-1]), 1.0)
    if np.any(steps > DIVERGENCE_SLACK * scale):
        raise SolverError("coordinate descent objective increased")


def encode(image, dictionary: LocalDictionary, cfg: SparseCodingConfig,
           layer_index: int = 1) -> FeatureMaps:
    """Per-pixel sparse codes of ``image`` under a fixed dictionary.

    Minimises ``0.5 * ||x - sum_i p_i^T d a_i||^2 + lam * sum_i ||a_i||_1`` by
    cyclic coordinate descent, sweeping pixels in raster order (Gauss-Seidel),
    until the relative objective decrease falls below ``cfg.tol``.
    """
    x = as_image(image)
    _check_geometry(x, dictionary.filter_side)
    codes, _, trace = _encode_array(x, dictionary.filters, cfg)
    return FeatureMaps(codes=codes, layer_index=layer_index,
                       objective_trace=tuple(float(v) for v in trace))


def reconstruct(codes: FeatureMaps, dictionary: LocalDictionary) -> np.ndarray:
    if codes.channels != dictionary.atom_count:
        raise InvalidArgumentError(
            f"codes have {codes.channels} channels, dictionary has "
            f"{dictionary.atom_count} atoms")
    h, w = codes.height, codes.width
    rmap, cmap = _maps(h, w, dictionary.filter_side)
    return K.stamp(np.ascontiguousarray(codes.codes), dictionary.filters, rmap, cmap)



def atom_components(codes: FeatureMaps, dictionary: LocalDictionary) -> FeatureMaps:
    """Split the reconstruction by atom: channel k is atom k stamped with its codes.

    Channels sum to :func:`reconstruct`.  Unlike the spiky codes themselves,
    these maps are dense, which makes them usable as per-pixel descriptors.
    Codes with a multiple of ``atom_count`` channels (one block per colour
    channel) are split block by block.
    """
    c = dictionary.atom_count
    if codes.channels % c:
        raise InvalidArgumentError(
            f"codes have {codes.channels} channels, not a multiple of {c} atoms")
    rmap, cmap = _maps(codes.height, codes.width, dictionary.filter_side)
    filters = dictionary.filters
    blocks = [K.stamp_components(np.ascontiguousarray(codes.codes[:, :, b:b + c]),
                                 filters, rmap, cmap)
              for b in range(0, codes.channels, c)]
    return FeatureMaps(codes=np.concatenate(blocks, axis=2), layer_index=codes.layer_index)

# -- dictionary learning -----------------------------------------------------

def _random_patches(images, side, count, rng):
    """Random patches centred on local maxima of windowed energy, drawn with
    probability proportional to that energy (flat images fall back to
    uniform draws)."""
    from scipy.ndimage import maximum_filter
    centres, weights = [], []
    for n, x in enumerate(images):
        dev = x - np.median(x)
        energy = _window_energy(dev, side)
        peaks = (energy == maximum_filter(energy, size=side, mode="reflect")) & (energy > 0)
        ys, xs = np.nonzero(peaks)
        if len(ys) == 0:
            ys, xs = np.divmod(np.arange(x.size), x.shape[1])
            e = np.ones(x.size)
        else:
            e = energy[ys, xs]
        centres.extend((n, int(y), int(xx)) for y, xx in zip(ys, xs))
        weights.append(e)
    p = np.concatenate(weights)
    p = p / p.sum()
    picks = rng.choice(len(centres), size=count, replace=True, p=p)
    return np.array([extract_patch(images[centres[i][0]], centres[i][1:], side)
                     for i in picks])


def _initial_atoms(images, side, count, rng):
    cands = _random_patches(images, side, max(16 * count, 64), rng)
    norms = np.linalg.norm(cands, axis=1)
    cands = cands[norms > 1e-8] / norms[norms > 1e-8, None]
    if len(cands):
        cands = _recenter(cands.T, side).T
    # prefer patches that recur (many near-duplicates in the pool), skipping
    # any that resemble an atom already chosen
    chosen: list[int] = []
    if len(cands):
        corr = np.abs(cands @ cands.T)
        density = (corr ** 8).sum(axis=1)
        order = np.argsort(-density, kind="stable")
        for i in order:
            if len(chosen) == count:
                break
            if all(corr[i, j] < 0.5 for j in chosen):
                chosen.append(int(i))
        for i in order:
            if len(chosen) == count:
                break
            if int(i) not in chosen:
                chosen.append(int(i))
    atoms = [cands[i] for i in chosen]
    while len(atoms) < count:
        g = rng.standard_normal(side * side)
        atoms.append(g / np.linalg.norm(g))
    return np.array(atoms).T


def _draw_crops(images, side, count, rng):
    """Random crops paired with a data mask that drops a band of width
    ``side // 2`` along crop edges, where the crop cannot be explained by
    atoms centred inside it."""
    r = side // 2
    crops = []
    for _ in range(count):
        x = images[int(rng.integers(len(images)))]
        h, w = x.shape
        ch, cw = min(3 * side, h), min(3 * side, w)
        i = int(rng.integers(h - ch + 1))
        j = int(rng.integers(w - cw + 1))
        weight = np.zeros((ch, cw))
        weight[r:ch - r, r:cw - r] = 1.0
        if not weight.any():
            weight[:] = 1.0
        crops.append((np.ascontiguousarray(x[i:i + ch, j:j + cw]), weight))
    return crops


def _mean_objective(crops, filters, cfg):
    total = 0.0
    for crop, weight in crops:
        codes, res, _ = _encode_array(crop, filters, cfg, weight)
        total += 0.5 * float(np.sum(res * res)) + cfg.lam * float(np.abs(codes).sum())
    return total / len(crops)


def _sgd_epoch(atoms, batch, side, step, cfg):
    """One stochastic dictionary step on ``batch``; returns new atoms.

    Codes are computed for the batch with the current atoms, then each atom
    is set to the least-squares minimiser of the batch reconstruction error
    with the others fixed (block coordinate sweep).  The result is blended
    into the current atoms with weight ``step`` and re-normalised.
    """
    c = atoms.shape[1]
    n = side * side
    filters = np.ascontiguousarray(atoms.reshape(side, side, c))
    coded = []
    usage = np.zeros(c)
    worst, worst_energy = None, -1.0
    for crop, weight in batch:
        codes, res, _ = _encode_array(crop, filters, cfg, weight)
        coded.append((codes, res, weight))
        usage += np.einsum("ijk,ijk->k", codes, codes)
        local = _window_energy(res, side)
        at = np.unravel_index(int(np.argmax(local)), local.shape)
        if local[at] > worst_energy:
            worst_energy = float(local[at])
            worst = extract_patch(res, at, side)

    target = atoms.copy()
    for k in range(c):
        old = np.ascontiguousarray(target[:, k].reshape(side, side, 1))
        hess = np.zeros((n, n))
        rhs = np.zeros(n)
        partial = []
        for codes, res, weight in coded:
            rmap, cmap = _maps(codes.shape[0], codes.shape[1], side)
            single = np.ascontiguousarray(codes[:, :, k:k + 1])
            back = res + K.stamp(single, old, rmap, cmap) * weight
            hh, bb = K.atom_normal_equations(codes, back, weight, k, side)
            hess += hh
            rhs += bb
            partial.append((back, single, rmap, cmap))
        if not np.trace(hess) > 0:
            continue
        ridge = 1e-8 * np.trace(hess) / n
        new = np.linalg.solve(hess + ridge * np.eye(n), rhs)
        target[:, k] = new
        f = np.ascontiguousarray(new.reshape(side, side, 1))
        for j, (back, single, rmap, cmap) in enumerate(partial):
            codes, _, weight = coded[j]
            coded[j] = (codes, back - K.stamp(single, f, rmap, cmap) * weight, weight)

    blended = (1.0 - step) * atoms + step * target
    norms = np.linalg.norm(blended, axis=0)
    blended = np.where(norms > 0, blended / np.where(norms > 0, norms, 1.0), atoms)
    blended = _recenter(blended, side)
    return _replace_redundant(blended, usage, worst, side)


def _window_energy(res, side):
    from scipy.ndimage import uniform_filter
    return uniform_filter(res * res, size=side, mode="reflect")


def _replace_redundant(atoms, usage, patch, side, max_corr=0.95, min_usage=1e-3):
    """Swap out one unused or duplicated atom for a worst-explained residual patch."""
    if patch is None or not np.linalg.norm(patch) > 0:
        return atoms
    c = atoms.shape[1]
    corr = np.abs(atoms.T @ atoms) - np.eye(c)
    order = np.argsort(usage, kind="stable")
    for k in order:
        idle = usage[k] <= min_usage * usage.max()
        dup = np.any((corr[k] > max_corr) & (usage >= usage[k]) & (np.arange(c) != k))
        if idle or dup:
            out = atoms.copy()
            out[:, k] = patch / np.linalg.norm(patch)
            return _recenter(out, side)
    return atoms


def _recenter(atoms, side):
    """Shift each atom (zero fill) so its energy centroid sits on the centre pixel.

    Shift-invariance of the model lets an atom drift off-centre during
    learning, which truncates it at the window edge.
    """
    r = side // 2
    grid = np.arange(side) - r
    out = atoms.copy()
    for k in range(atoms.shape[1]):
        f = atoms[:, k].reshape(side, side)
        e = f * f
        total = e.sum()
        if total == 0:
            continue
        dy = int(np.round((e.sum(axis=1) @ grid) / total))
        dx = int(np.round((e.sum(axis=0) @ grid) / total))
        if dy == 0 and dx == 0:
            continue
        g = np.zeros_like(f)
        ys = slice(max(0, -dy), side - max(0, dy))
        xs = slice(max(0, -dx), side - max(0, dx))
        yd = slice(max(0, dy), side - max(0, -dy))
        xd = slice(max(0, dx), side - max(0, -dx))
        g[ys, xs] = f[yd, xd]
        n = np.linalg.norm(g)
        if n > 0:
            out[:, k] = (g / n).reshape(-1)
    return out


def learn_dictionary(images: Sequence, atom_count: int, filter_side: int,
                     cfg: SparseCodingConfig) -> LocalDictionary:
    """Alternate sparse coding and stochastic dictionary steps on the local filters.

    Each epoch encodes a fresh seeded mini-batch of crops, moves every atom
    towards its block least-squares optimum on that batch and re-normalises.
    Steps decay as ``step_size / epoch`` and are halved (up to four times)
    until the objective on a fixed held-out crop sample does not increase; a
    step that never passes is skipped, so ``objective_trace`` is monotone.
    Idle or duplicated atoms are swapped for the worst-explained residual
    patch of the batch.
    """
    if len(images) == 0:
        raise InvalidArgumentError("need at least one image")
    if atom_count < 1:
        raise InvalidArgumentError("atom_count must be >= 1")
    if filter_side % 2 == 0:
        raise InvalidArgumentError("filter_side must be odd")
    if cfg.patches_per_epoch < atom_count:
        raise InvalidArgumentError("patches_per_epoch must be >= atom_count")
    xs = [as_image(x) for x in images]
    for x in xs:
        _check_geometry(x, filter_side)
    warnings = []
    if all(np.ptp(x) == 0 for x in xs):
        warnings.append("degenerate-input: all training images are constant")

    rng = np.random.default_rng(cfg.seed)
    side = filter_side
    atoms = _initial_atoms(xs, side, atom_count, rng)
    held_out = _draw_crops(xs, side, max(8, cfg.patches_per_epoch // 4), rng)

    def as_filters(a):
        return np.ascontiguousarray(a.reshape(side, side, atom_count))

    current = _mean_objective(held_out, as_filters(atoms), cfg)
    trace = [current]
    for epoch in range(1, cfg.dict_epochs + 1):
        batch = _draw_crops(xs, side, cfg.patches_per_epoch, rng)
        step = min(1.0, cfg.step_size / epoch)
        for _ in range(5):
            cand = _sgd_epoch(atoms, batch, side, step, cfg)
            value = _mean_objective(held_out, as_filters(cand), cfg)
            if value <= current:
                atoms, current = cand, value
                break
            step *= 0.5
        trace.append(current)
        log.debug("dictionary epoch %d objective %.6g step %.4g", epoch, current, step)

    return LocalDictionary(atoms=normalize_columns(atoms), filter_side=side,
                           warnings=tuple(warnings), objective_trace=tuple(trace))


# -- 1x1 compression and context pooling -------------------------------------

def _pool_matrix(pool) -> np.ndarray:
    if isinstance(pool, FeatureMaps):
        return pool.codes.reshape(-1, pool.channels)
    arr = np.asarray(pool, dtype=np.float64)
    return arr.reshape(-1, arr.shape[-1])


def fit_compressor(pool, out_channels: int) -> Compressor:
    """PCA over per-pixel vectors: mean plus the leading principal directions."""
    data = _pool_matrix(pool)
    n, g = data.shape
    if out_channels > g:
        raise InvalidArgumentError(
            f"out_channels {out_channels} exceeds in_channels {g}")
    if out_channels < 1:
        raise InvalidArgumentError("out_channels must be >= 1")
    if n < out_channels:
        raise InvalidArgumentError("pool has fewer pixels than out_channels")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / max(n, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")[:out_channels]
    proj = vecs[:, order].T
    # fix the eigenvector sign so the result is deterministic across platforms
    pivot = np.argmax(np.abs(proj), axis=1)
    signs = np.sign(proj[np.arange(out_channels), pivot])
    proj = proj * signs[:, None]
    return Compressor(projection=proj, mean=mean)


def apply_compressor(comp: Compressor, pool):
    if isinstance(pool, FeatureMaps):
        if pool.channels != comp.in_channels:
            raise InvalidArgumentError(
                f"pool has {pool.channels} channels, compressor expects {comp.in_channels}")
        out = (pool.codes - comp.mean) @ comp.projection.T
        return FeatureMaps(codes=out, layer_index=pool.layer_index)
    arr = np.asarray(pool, dtype=np.float64)
    if arr.shape[-1] != comp.in_channels:
        raise InvalidArgumentError(
            f"pool has {arr.shape[-1]} channels, compressor expects {comp.in_channels}")
    return (arr - comp.mean) @ comp.projection.T


def compass_offsets(radii: Sequence[int]) -> list[tuple[int, int]]:
    """The 8 compass directions at each radius, as ``(dx, dy)`` pairs."""
    dirs = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)]
    return [(dx * r, dy * r) for r in radii for dx, dy in dirs]


def reflect(k, n: int) -> np.ndarray:
    """Vectorised reflection of integer indices into ``0 .. n-1`` (no edge repeat)."""
    k = np.asarray(k, dtype=np.int64)
    if n == 1:
        return np.zeros_like(k)
    period = 2 * (n - 1)
    k = np.mod(k, period)
    return np.where(k >= n, period - k, k)


def shift_reflect(codes: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """``out[y, x] = codes[y + dy, x + dx]`` with reflected out-of-range indices."""
    h, w = codes.shape[:2]
    return codes[reflect(np.arange(h) + dy, h)][:, reflect(np.arange(w) + dx, w)]


def build_context_features(maps: FeatureMaps, offsets: Sequence[tuple[int, int]]) -> FeatureMaps:
    blocks = [maps.codes] + [shift_reflect(maps.codes, int(dx), int(dy)) for dx, dy in offsets]
    return FeatureMaps(codes=np.concatenate(blocks, axis=2), layer_index=maps.layer_index)


def context_vectors(maps: FeatureMaps, offsets, rows, cols) -> np.ndarray:
    """Augmented vectors at selected pixels only; equals indexing
    :func:`build_context_features` output at ``(rows, cols)``."""
    h, w = maps.height, maps.width
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    parts = [maps.codes[rows, cols]]
    for dx, dy in offsets:
        parts.append(maps.codes[reflect(rows + dy, h), reflect(cols + dx, w)])
    return np.concatenate(parts, axis=1)


def compress_context(maps: FeatureMaps, offsets, comp: Compressor) -> np.ndarray:
    """``apply_compressor(comp, build_context_features(maps, offsets))`` without
    materialising the augmented stack: the projection is split per offset block
    and applied before shifting."""
    g = maps.channels
    if comp.in_channels != g * (1 + len(offsets)):
        raise InvalidArgumentError("compressor width does not match pool and offsets")
    proj = comp.projection
    out = maps.codes @ proj[:, :g].T
    for k, (dx, dy) in enumerate(offsets, start=1):
        part = maps.codes @ proj[:, k * g:(k + 1) * g].T
        out += shift_reflect(part, int(dx), int(dy))
    out -= comp.mean @ proj.T
    return out


def concat_maps(maps: Sequence[FeatureMaps], layer_index: int | None = None) -> FeatureMaps:
    if not maps:
        raise InvalidArgumentError("nothing to concatenate")
    shapes = {m.codes.shape[:2] for m in maps}
    if len(shapes) != 1:
        raise InvalidArgumentError("feature maps disagree in geometry")
    idx = maps[-1].layer_index if layer_index is None else layer_index
    return FeatureMaps(codes=np.concatenate([m.codes for m in maps], axis=2), layer_index=idx)


def dictionary_montage(dictionary: LocalDictionary, columns: int | None = None) -> np.ndarray:
    """Tile atoms into one 8-bit grid: each tile min-max scaled to 0..255,
    1-pixel black separators between and around tiles."""
    s = dictionary.filter_side
    c = dictionary.atom_count
    cols = columns or int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    out = np.zeros((rows * (s + 1) + 1, cols * (s + 1) + 1), dtype=np.uint8)
    filters = dictionary.filters
    for k in range(c):
        tile = filters[:, :, k]
        lo, hi = tile.min(), tile.max()
        scaled = np.zeros_like(tile) if hi == lo else (tile - lo) / (hi - lo)
        r, q = divmod(k, cols)
        y, x = 1 + r * (s + 1), 1 + q * (s + 1)
        out[y:y + s, x:x + s] = np.round(scaled * 255).astype(np.uint8)
    return out
