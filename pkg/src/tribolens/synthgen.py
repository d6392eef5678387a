"""Synthetic friction matrices with known low-rank ground truth."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import DEFAULT_MU_MAX, FrictionDataset, MaterialLibrary, channel_partner
from .errors import SchemaError

ORIENTATION_CHANNELS = ("static/ww", "static/wf", "static/fw", "static/ff")
FABRIC_LAYOUT = {"knit": 12, "woven": 18, "nonfabric": 10}


@dataclass
class SynthSpec:
    n: int = 30
    rank: int = 3
    channels: tuple = ("static",)
    noise_std: float = 0.01
    missing_rate: float = 0.1
    mu_range: tuple = (0.1, 1.0)
    mu_max: float = DEFAULT_MU_MAX
    seed: int = 0
    rescale: bool = True
    # kinetic = kinetic_ratio * static, kept at or below static
    kinetic_ratio: float = 0.8
    kinetic_noise: float = 0.0
    # orientation channels: target correlation with the base channel
    orientation_corr: float = 0.9
    layout: dict = None
    holdout: tuple = (("knit", "woven"),)
    masked_blocks: tuple = (("nonfabric", "nonfabric"),)
    woven_without_nonfabric: int = 6
    outlier_rate: float = 0.0
    outlier_scale: float = 0.3

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.mu_range = tuple(float(x) for x in self.mu_range)
        if self.layout is not None:
            self.layout = dict(self.layout)
            self.n = int(sum(self.layout.values()))
        if not 1 <= self.rank <= self.n:
            raise SchemaError(f"rank must lie in [1, n={self.n}], got {self.rank}")
        for name in ("missing_rate", "outlier_rate"):
            if not 0 <= getattr(self, name) < 1:
                raise SchemaError(f"{name} must lie in [0, 1)")
        if self.noise_std < 0:
            raise SchemaError("noise_std must be >= 0")
        lo, hi = self.mu_range
        if not 0 <= lo < hi <= self.mu_max:
            raise SchemaError(f"mu_range {self.mu_range} must sit inside [0, {self.mu_max}]")
        if not 0 < self.kinetic_ratio < 1:
            raise SchemaError("kinetic_ratio must lie in (0, 1)")
        if not 0 < self.orientation_corr <= 1:
            raise SchemaError("orientation_corr must lie in (0, 1]")
        for c in self.channels:
            head, _, orient = c.partition("/")
            if head not in ("static", "kinetic") or orient not in ("", "ww", "wf", "fw", "ff"):
                raise SchemaError(f"unsupported synthetic channel {c!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    values: np.ndarray
    base: np.ndarray
    factors: np.ndarray
    info: dict = field(default_factory=dict)


def _rescale(F, lo, hi):
    fmin, fmax = F.min(), F.max()
    if fmax == fmin:
        return np.full_like(F, 0.5 * (lo + hi))
    return lo + (hi - lo) * (F - fmin) / (fmax - fmin)


def _sym_noise(rng, n, std):
    E = rng.normal(0.0, std, size=(n, n))
    return np.triu(E) + np.triu(E, 1).T


def _pair_mask(rng, n, missing_rate):
    keep = rng.random((n, n)) >= missing_rate
    keep = np.triu(keep)
    return keep | keep.T


def _orientation_fields(rng, n, rank, fabric):
    """Perturbation fields per orientation, zero on pairs touching a non-fabric."""
    P = rng.normal(size=(n, rank)) * fabric[:, None]
    Q = rng.normal(size=(n, rank)) * fabric[:, None]
    W = rng.normal(size=(n, rank)) * fabric[:, None]
    ww = P @ P.T
    ff = Q @ Q.T
    wf = P @ W.T
    return {"ww": ww, "wf": wf, "fw": wf.T, "ff": ff}


def _truth_channels(spec, base, rng, fabric):
    n = spec.n
    fields = None
    chans = []
    for c in spec.channels:
        head, _, orient = c.partition("/")
        val = base
        if orient:
            if fields is None:
                fields = _orientation_fields(rng, n, max(1, spec.rank), fabric)
            pert = fields[orient]
            sp = pert.std()
            rho = spec.orientation_corr
            if sp > 0 and rho < 1:
                # corr(base, base + s*pert) = rho for independent fields
                s = base.std() * np.sqrt(1.0 / rho ** 2 - 1.0) / sp
                both = np.outer(fabric, fabric) > 0
                val = base + s * np.where(both, pert - pert[both].mean(), 0.0)
        if head == "kinetic":
            val = spec.kinetic_ratio * val
        chans.append(val)
    truth = np.stack(chans, axis=2)
    lo, hi = 0.0, spec.mu_max
    return np.clip(truth, lo, hi)


def _apply_kinetic_noise(spec, values, rng):
    chans = list(spec.channels)
    for k, c in enumerate(chans):
        head, _, orient = c.partition("/")
        if head != "kinetic":
            continue
        stat = "static" + ("/" + orient if orient else "")
        if spec.kinetic_noise > 0:
            values[:, :, k] += _sym_noise(rng, spec.n, spec.kinetic_noise)
        if stat in chans:
            values[:, :, k] = np.minimum(values[:, :, k], values[:, :, chans.index(stat)])
    return values


def _observe(spec, truth, mask2d, rng):
    n, _, C = truth.shape
    values = truth.copy()
    if spec.noise_std > 0:
        for k, c in enumerate(spec.channels):
            partner = channel_partner(c)
            if partner != c and partner in spec.channels and spec.channels.index(partner) < k:
                values[:, :, k] = values[:, :, spec.channels.index(partner)].T
                continue
            if partner != c and partner in spec.channels:
                E = rng.normal(0.0, spec.noise_std, size=(n, n))
            else:
                E = _sym_noise(rng, n, spec.noise_std)
            values[:, :, k] += E
    if spec.outlier_rate > 0:
        hit = np.triu(rng.random((n, n)) < spec.outlier_rate)
        hit = hit | hit.T
        shift = _sym_noise(rng, n, 1.0)
        shift = spec.outlier_scale * np.sign(shift) * (1.0 + np.abs(shift))
        values += (hit * shift)[:, :, None]
    values = _apply_kinetic_noise(spec, values, rng)
    values = np.clip(values, 0.0, spec.mu_max)
    mask = np.repeat(mask2d[:, :, None], C, axis=2)
    return values, mask


def gen_lowrank(spec):
    """Dataset and ground truth for ``F = A A^T`` affinely rescaled into ``mu_range``.

    ``A`` has i.i.d. uniform(0, 1) entries. The affine shift can add one to
    the rank, which ``info["rank_bound"]`` records. Unordered pairs go missing
    independently with probability ``missing_rate``; observed entries get
    symmetric Gaussian noise and are clipped to ``[0, mu_max]``.
    """
    if spec.layout is not None:
        return gen_blocks(spec)
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    A = rng.uniform(0.0, 1.0, size=(n, spec.rank))
    base = A @ A.T
    if spec.rescale:
        base = _rescale(base, *spec.mu_range)
    base = 0.5 * (base + base.T)
    truth = _truth_channels(spec, base, rng, np.ones(n))
    mask2d = _pair_mask(rng, n, spec.missing_rate)
    values, mask = _observe(spec, truth, mask2d, rng)
    lib = MaterialLibrary([f"m{i:02d}" for i in range(n)])
    ds = FrictionDataset(lib, spec.channels, values, mask, spec.mu_max)
    info = {"rank": spec.rank, "rank_bound": spec.rank + (1 if spec.rescale else 0),
            "seed": spec.seed}
    return ds, GroundTruth(truth, base, A, info)


def gen_blocks(spec):
    """Class-structured dataset with withheld and unmeasured blocks.

    Materials are laid out class by class (``layout`` maps class to count).
    Pairs inside ``masked_blocks`` and ``holdout`` class pairs are fully
    missing, and the last ``woven_without_nonfabric`` wovens have no
    measurements against non-fabrics. Orientation channels only differ from
    the base channel on fabric-fabric pairs.
    Returns (dataset, ground truth).
    """
    if spec.layout is None:
        return gen_lowrank(spec)
    rng = np.random.default_rng(spec.seed)
    classes = []
    names = []
    for cls, count in spec.layout.items():
        for i in range(count):
            classes.append(cls)
            names.append(f"{cls}{i:02d}")
    n = len(names)
    cls_arr = np.array(classes)
    A = rng.uniform(0.0, 1.0, size=(n, spec.rank))
    base = A @ A.T
    if spec.rescale:
        base = _rescale(base, *spec.mu_range)
    fabric = (cls_arr != "nonfabric").astype(np.float64)
    truth = _truth_channels(spec, base, rng, fabric)
    mask2d = _pair_mask(rng, n, spec.missing_rate)
    for a, b in tuple(spec.masked_blocks) + tuple(spec.holdout):
        blk = np.outer(cls_arr == a, cls_arr == b)
        mask2d &= ~(blk | blk.T)
    wovens = np.nonzero(cls_arr == "woven")[0]
    if spec.woven_without_nonfabric and len(wovens):
        cut = wovens[-spec.woven_without_nonfabric:]
        sel = np.zeros(n, dtype=bool)
        sel[cut] = True
        blk = np.outer(sel, cls_arr == "nonfabric")
        mask2d &= ~(blk | blk.T)
    values, mask = _observe(spec, truth, mask2d, rng)
    lib = MaterialLibrary(names, classes)
    ds = FrictionDataset(lib, spec.channels, values, mask, spec.mu_max)
    info = {"rank": spec.rank, "rank_bound": spec.rank + (1 if spec.rescale else 0),
            "seed": spec.seed, "layout": dict(spec.layout)}
    return ds, GroundTruth(truth, base, A, info)
