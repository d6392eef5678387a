"""Friction matrices with observation masks, channels and block layouts.

Unobserved entries are stored as ``mask == False`` with value 0. On disk
they are empty CSV cells. Orientation channels follow a transpose pairing:
swapping the two materials of a pair swaps the ``wf`` and ``fw`` channels,
so ``value[i, j, wf] == value[j, i, fw]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AssemblyError, LookupFailure, SchemaError, SplitError

CLASSES = ("knit", "woven", "nonfabric", "other")
DEFAULT_MU_MAX = 2.0
_PARTNERS = {"wf": "fw", "fw": "wf"}


def channel_partner(label):
    """Channel a value moves to when the two materials are swapped."""
    head, sep, orient = label.rpartition("/")
    if orient in _PARTNERS:
        return f"{head}{sep}{_PARTNERS[orient]}"
    return label


@dataclass(frozen=True)
class MaterialLibrary:
    names: tuple
    classes: tuple = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(set(names)) != len(names):
            raise SchemaError("material names must be unique")
        classes = self.classes
        if classes is None:
            classes = ("other",) * len(names)
        classes = tuple(classes)
        if len(classes) != len(names):
            raise SchemaError("one class tag per material required")
        bad = [c for c in classes if c not in CLASSES]
        if bad:
            raise SchemaError(f"unknown material classes {sorted(set(bad))}")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "_lookup", {n: i for i, n in enumerate(names)})

    @property
    def n(self):
        return len(self.names)

    def __len__(self):
        return len(self.names)

    def index(self, material):
        """Resolve a name or integer id to an index."""
        if isinstance(material, (int, np.integer)):
            if 0 <= material < self.n:
                return int(material)
            raise LookupFailure(f"material index {material} out of range [0, {self.n})")
        try:
            return self._lookup[material]
        except KeyError:
            raise LookupFailure(f"unknown material {material!r}") from None

    def members(self, cls):
        return [i for i, c in enumerate(self.classes) if c == cls]


@dataclass(frozen=True)
class InteractionVector:
    u: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class ProxyVector:
    v: np.ndarray
    mask: np.ndarray


class FrictionDataset:
    """Immutable n x n x C coefficient array plus observation mask."""

    def __init__(self, library, channels, values, mask=None, mu_max=DEFAULT_MU_MAX):
        if not isinstance(library, MaterialLibrary):
            library = MaterialLibrary(library)
        channels = tuple(channels)
        if not channels or len(set(channels)) != len(channels):
            raise SchemaError("channels must be a non-empty list of unique labels")
        values = np.array(values, dtype=np.float64)
        if values.ndim == 2:
            values = values[:, :, None]
        n = library.n
        if values.shape != (n, n, len(channels)):
            raise SchemaError(f"values shape {values.shape} != {(n, n, len(channels))}")
        if mask is None:
            mask = np.isfinite(values)
        mask = np.array(mask, dtype=bool)
        if mask.ndim == 2:
            mask = mask[:, :, None]
        if mask.shape != values.shape:
            raise SchemaError(f"mask shape {mask.shape} != values shape {values.shape}")
        if not mu_max > 0:
            raise SchemaError("mu_max must be positive")
        mask &= np.isfinite(values)
        values = np.where(mask, values, 0.0)
        obs = values[mask]
        if obs.size and (obs.min() < 0 or obs.max() > mu_max):
            raise SchemaError(
                f"observed coefficients must lie in [0, {mu_max}], "
                f"got range [{obs.min():.4g}, {obs.max():.4g}]")
        values.setflags(write=False)
        mask.setflags(write=False)
        self.library = library
        self.channels = channels
        self.values = values
        self.mask = mask
        self.mu_max = float(mu_max)

    def __repr__(self):
        return (f"FrictionDataset(n={self.n}, channels={list(self.channels)}, "
                f"observed={int(self.mask.sum())})")

    @property
    def n(self):
        return self.library.n

    def channel_index(self, channel):
        if channel is None:
            return 0
        if isinstance(channel, (int, np.integer)):
            if 0 <= channel < len(self.channels):
                return int(channel)
        elif channel in self.channels:
            return self.channels.index(channel)
        raise LookupFailure(f"unknown channel {channel!r}; have {list(self.channels)}")

    def replace(self, values=None, mask=None, channels=None, library=None):
        return FrictionDataset(
            self.library if library is None else library,
            self.channels if channels is None else channels,
            self.values if values is None else values,
            self.mask if mask is None else mask,
            self.mu_max,
        )

    def select_channels(self, channels):
        idx = [self.channel_index(c) for c in channels]
        return self.replace(self.values[:, :, idx], self.mask[:, :, idx],
                            channels=[self.channels[i] for i in idx])

    def partner_indices(self):
        """Index of each channel's transpose partner (itself if symmetric)."""
        out = []
        for c in self.channels:
            p = channel_partner(c)
            out.append(self.channels.index(p) if p in self.channels else self.channels.index(c))
        return np.array(out, dtype=np.intp)

    def pair_observed(self):
        """n x n boolean: the unordered pair {i, j} has any observed channel."""
        any_obs = self.mask.any(axis=2)
        return any_obs | any_obs.T

    def observed_pairs(self):
        """Unordered observed pairs as an (P, 2) array with i <= j, row-major."""
        obs = np.triu(self.pair_observed())
        i, j = np.nonzero(obs)
        return np.stack([i, j], axis=1).astype(np.intp)

    def pair_targets(self, pairs):
        """Values and masks at ordered positions ``(i, j)`` for each pair."""
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        return self.values[pairs[:, 0], pairs[:, 1]], self.mask[pairs[:, 0], pairs[:, 1]]

    def restrict_to_pairs(self, pairs):
        """Copy in which only the listed unordered pairs stay observed."""
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        keep = np.zeros((self.n, self.n), dtype=bool)
        keep[pairs[:, 0], pairs[:, 1]] = True
        keep[pairs[:, 1], pairs[:, 0]] = True
        return self.replace(mask=self.mask & keep[:, :, None])

    def without_pairs(self, pairs):
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        drop = np.zeros((self.n, self.n), dtype=bool)
        drop[pairs[:, 0], pairs[:, 1]] = True
        drop[pairs[:, 1], pairs[:, 0]] = True
        return self.replace(mask=self.mask & ~drop[:, :, None])

    def dense(self, channel=None, fill=np.nan):
        c = self.channel_index(channel)
        return np.where(self.mask[:, :, c], self.values[:, :, c], fill)


def _indices(ds, proxies):
    idx = getattr(proxies, "indices", proxies)
    return [ds.library.index(p) for p in idx]


def interaction_vector(ds, material, channel=None):
    """Row of the friction matrix for ``material`` plus its observation mask."""
    a = ds.library.index(material)
    c = ds.channel_index(channel)
    return InteractionVector(ds.values[a, :, c].copy(), ds.mask[a, :, c].copy())


def proxy_vector(ds, material, proxies, channel=None):
    """Interaction vector restricted to the proxy materials, in proxy order."""
    iv = interaction_vector(ds, material, channel)
    idx = _indices(ds, proxies)
    return ProxyVector(iv.u[idx], iv.s[idx])


def symmetrize(ds):
    """Merge each entry with its transpose partner.

    Both observed: the mean. One observed: mirrored. Neither: stays missing.
    """
    partner = ds.partner_indices()
    v_t = np.transpose(ds.values[:, :, partner], (1, 0, 2))
    m_t = np.transpose(ds.mask[:, :, partner], (1, 0, 2))
    v, m = ds.values, ds.mask
    both = m & m_t
    out = np.where(both, (v + v_t) / 2.0, np.where(m, v, np.where(m_t, v_t, 0.0)))
    return ds.replace(out, m | m_t)


def is_symmetric(ds, atol=0.0):
    partner = ds.partner_indices()
    v_t = np.transpose(ds.values[:, :, partner], (1, 0, 2))
    m_t = np.transpose(ds.mask[:, :, partner], (1, 0, 2))
    return bool(np.array_equal(ds.mask, m_t) and np.allclose(ds.values, v_t, rtol=0, atol=atol))


@dataclass
class Block:
    """Rectangular sub-matrix of measurements between two material groups.

    ``values`` has shape (len(rows), len(cols), C); NaN marks missing.
    """

    name: str
    rows: list
    cols: list
    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[:, :, None]
        if self.mask is None:
            self.mask = np.isfinite(self.values)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim == 2:
            self.mask = self.mask[:, :, None]
        expect = (len(self.rows), len(self.cols))
        if self.values.shape[:2] != expect or self.mask.shape != self.values.shape:
            raise SchemaError(f"block {self.name!r}: shape {self.values.shape} "
                              f"does not match rows x cols {expect}")


def assemble_blocks(library, channels, blocks, mu_max=DEFAULT_MU_MAX, atol=1e-12):
    """Place blocks into one dataset and mirror every entry to its transpose.

    Pairs not covered by any block stay missing. An entry written twice with
    different values raises ``AssemblyError``.
    """
    if not isinstance(library, MaterialLibrary):
        library = MaterialLibrary(library)
    channels = tuple(channels)
    n, nc = library.n, len(channels)
    partner = [channels.index(channel_partner(c)) if channel_partner(c) in channels
               else k for k, c in enumerate(channels)]
    values = np.zeros((n, n, nc))
    mask = np.zeros((n, n, nc), dtype=bool)

    def put(i, j, c, x, name):
        if mask[i, j, c]:
            if abs(values[i, j, c] - x) > atol:
                raise AssemblyError(
                    f"block {name!r}: conflicting value at ({library.names[i]}, "
                    f"{library.names[j]}, {channels[c]}): {values[i, j, c]} vs {x}")
            return
        values[i, j, c] = x
        mask[i, j, c] = True

    for blk in blocks:
        if blk.values.shape[2] != nc:
            raise SchemaError(f"block {blk.name!r} has {blk.values.shape[2]} channels, "
                              f"expected {nc}")
        ri = [library.index(r) for r in blk.rows]
        ci = [library.index(c) for c in blk.cols]
        a, b, c = np.nonzero(blk.mask)
        for x, y, z in zip(a, b, c):
            val = float(blk.values[x, y, z])
            put(ri[x], ci[y], z, val, blk.name)
            put(ci[y], ri[x], partner[z], val, blk.name)
    return FrictionDataset(library, channels, values, mask, mu_max)


# -- splits -------------------------------------------------------------------

@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    scheme: str = "random"
    info: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "scheme": self.scheme,
            "info": self.info,
            "train": self.train.tolist(),
            "val": self.val.tolist(),
            "test": self.test.tolist(),
        }

    @classmethod
    def from_json(cls, obj):
        def arr(x):
            return np.asarray(x, dtype=np.intp).reshape(-1, 2)
        return cls(arr(obj["train"]), arr(obj["val"]), arr(obj["test"]),
                   obj.get("scheme", "random"), obj.get("info", {}))


def _train_val(pairs, val_fraction, rng):
    perm = rng.permutation(len(pairs))
    n_val = int(round(val_fraction * len(pairs)))
    return pairs[np.sort(perm[n_val:])], pairs[np.sort(perm[:n_val])]


def split(ds, scheme="random", seed=0, *, fractions=(0.7, 0.15, 0.15), k=5, fold=0,
          material=None, classes=("knit", "woven"), val_fraction=0.15):
    """Partition observed unordered pairs into train/val/test.

    Schemes: ``random`` (exact fractions), ``kfold`` (fold ``fold`` of ``k``
    as test), ``loom`` (every pair touching ``material`` as test) and
    ``leave-block-out`` (every pair between the two ``classes`` as test).
    Outside the random scheme the validation set is ``val_fraction`` of the
    non-test pairs.
    """
    pairs = ds.observed_pairs()
    rng = np.random.default_rng(seed)
    n = len(pairs)
    if scheme == "random":
        if n < 3:
            raise SplitError(f"random split needs >= 3 observed pairs, have {n}")
        f = np.asarray(fractions, dtype=np.float64)
        f = f / f.sum()
        n_train = int(round(f[0] * n))
        n_val = int(round(f[1] * n))
        perm = rng.permutation(n)
        tr, va, te = perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]
        return Split(pairs[np.sort(tr)], pairs[np.sort(va)], pairs[np.sort(te)], "random",
                     {"fractions": f.tolist(), "seed": seed})
    if scheme == "kfold":
        if not 2 <= k <= n:
            raise SplitError(f"kfold needs 2 <= k <= {n}, got k={k}")
        if not 0 <= fold < k:
            raise SplitError(f"fold {fold} outside [0, {k})")
        perm = rng.permutation(n)
        folds = np.array_split(perm, k)
        test = pairs[np.sort(folds[fold])]
        rest = pairs[np.sort(np.concatenate([folds[i] for i in range(k) if i != fold]))]
        tr, va = _train_val(rest, val_fraction, np.random.default_rng(seed ^ (fold + 1)))
        return Split(tr, va, test, "kfold", {"k": k, "fold": fold, "seed": seed})
    if scheme == "loom":
        if material is None:
            raise SplitError("leave-one-material-out needs a material")
        m = ds.library.index(material)
        hit = (pairs[:, 0] == m) | (pairs[:, 1] == m)
        if hit.all() or not hit.any():
            raise SplitError(f"material {material!r} leaves no train or no test pairs")
        tr, va = _train_val(pairs[~hit], val_fraction, rng)
        return Split(tr, va, pairs[hit], "loom", {"material": m, "seed": seed})
    if scheme == "leave-block-out":
        ca, cb = classes
        cls = np.asarray(ds.library.classes)
        a, b = cls[pairs[:, 0]], cls[pairs[:, 1]]
        hit = ((a == ca) & (b == cb)) | ((a == cb) & (b == ca))
        if not hit.any():
            raise SplitError(f"no observed {ca}-{cb} pairs to withhold")
        if hit.all():
            raise SplitError(f"withholding {ca}-{cb} leaves nothing to train on")
        tr, va = _train_val(pairs[~hit], val_fraction, rng)
        return Split(tr, va, pairs[hit], "leave-block-out",
                     {"classes": [ca, cb], "seed": seed})
    raise SplitError(f"unknown split scheme {scheme!r}")


def kfold_splits(ds, k=5, seed=0, val_fraction=0.15):
    return [split(ds, "kfold", seed, k=k, fold=f, val_fraction=val_fraction) for f in range(k)]


# -- file formats -------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def write_matrix_csv(path, names, values, mask):
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["material", *names])
        for i, name in enumerate(names):
            w.writerow([name, *[_fmt(values[i, j]) if mask[i, j] else ""
                                for j in range(len(names))]])


def read_matrix_csv(path, names=None):
    """Return (names, values, mask) from a matrix CSV with empty cells as missing."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty matrix file")
    cols = [c.strip() for c in rows[0][1:]]
    body = rows[1:]
    rnames = [r[0].strip() for r in body]
    if rnames != cols:
        raise SchemaError(f"{path}: row and column material names differ")
    if names is not None and list(names) != cols:
        raise SchemaError(f"{path}: material order does not match manifest")
    n = len(cols)
    values = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for i, r in enumerate(body):
        if len(r) - 1 != n:
            raise SchemaError(f"{path}: row {i + 2} has {len(r) - 1} cells, expected {n}")
        for j, cell in enumerate(r[1:]):
            cell = cell.strip()
            if not cell or cell.lower() in ("nan", "n/a", "na"):
                continue
            try:
                x = float(cell)
            except ValueError:
                raise SchemaError(f"{path}: bad cell {cell!r} at row {i + 2}") from None
            if math.isfinite(x):
                values[i, j] = x
                mask[i, j] = True
    return cols, values, mask


def _safe_label(label):
    return label.replace("/", "_")


def save_dataset(ds, directory, stem="friction"):
    """Write the manifest JSON plus one matrix CSV per channel; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for k, ch in enumerate(ds.channels):
        fname = f"{stem}_{_safe_label(ch)}.csv"
        write_matrix_csv(directory / fname, ds.library.names, ds.values[:, :, k], ds.mask[:, :, k])
        files[ch] = fname
    manifest = {
        "materials": list(ds.library.names),
        "classes": list(ds.library.classes),
        "channels": list(ds.channels),
        "files": files,
        "mu_max": ds.mu_max,
    }
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path):
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read dataset manifest {manifest_path}: {exc}") from None
    for key in ("materials", "channels", "files"):
        if key not in manifest:
            raise SchemaError(f"manifest missing {key!r}")
    names = manifest["materials"]
    lib = MaterialLibrary(names, manifest.get("classes"))
    n, chans = lib.n, manifest["channels"]
    values = np.zeros((n, n, len(chans)))
    mask = np.zeros((n, n, len(chans)), dtype=bool)
    for k, ch in enumerate(chans):
        if ch not in manifest["files"]:
            raise SchemaError(f"manifest lists no file for channel {ch!r}")
        _, v, m = read_matrix_csv(manifest_path.parent / manifest["files"][ch], names)
        values[:, :, k], mask[:, :, k] = v, m
    return FrictionDataset(lib, chans, values, mask, manifest.get("mu_max", DEFAULT_MU_MAX))
