"""Encoder, symmetric fusion heads, decoder and ensembles.

A material is described by its interaction vector (or its proxy vector):
one slot per partner material, each slot holding one coefficient per input
channel plus an observation bit. The encoder maps that to an embedding;
fusion heads map a pair of embeddings to bounded coefficients.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .dataset import channel_partner
from .errors import DomainError, SchemaError, ShapeError, TriboError

CHECKPOINT_VERSION = 1
LOGVAR_MIN, LOGVAR_MAX = -10.0, 4.0
LOGIT_BOUND = 30.0


def glorot(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def _param(params, name, data):
    params[name] = Tensor(data, requires_grad=True, name=name)
    return params[name]


class _MLP:
    """Dense relu stack; the last layer is linear."""

    def __init__(self, params, prefix, sizes, rng):
        self.names = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            w = f"{prefix}.{i}.w"
            bias = f"{prefix}.{i}.b"
            _param(params, w, glorot(rng, a, b))
            _param(params, bias, np.zeros(b))
            self.names.append((w, bias))
        self.params = params

    def __call__(self, x):
        last = len(self.names) - 1
        for i, (w, b) in enumerate(self.names):
            x = ad.add(ad.matmul(x, self.params[w]), self.params[b])
            if i < last:
                x = ad.relu(x)
        return x


@dataclass
class EncoderConfig:
    variant: str = "attention"
    input_len: int = 0
    n_channels: int = 1
    embed_dim: int = 16
    token_dim: int = 32
    layers: int = 4
    heads: int = 4
    ff_dim: int = 64
    pooling: str = "mean"
    mlp_widths: tuple = (64, 64)

    def __post_init__(self):
        self.mlp_widths = tuple(self.mlp_widths)
        if self.variant not in ("attention", "mlp"):
            raise SchemaError(f"unknown encoder variant {self.variant!r}")
        if self.embed_dim <= 0 or self.input_len <= 0 or self.n_channels <= 0:
            raise SchemaError("encoder sizes must be positive")
        if self.variant == "attention" and self.token_dim % self.heads:
            raise SchemaError(f"heads={self.heads} must divide token_dim={self.token_dim}")
        if self.pooling not in ("mean", "max"):
            raise SchemaError(f"unknown pooling {self.pooling!r}")


class Encoder:
    """Maps (values, mask) of shape (B, T, C) to embeddings (B, d).

    Masked slots are zeroed before anything else touches them, so their
    values can never influence the output. The attention variant turns each
    slot into a token (linear projection of the slot's masked values and mask
    bits plus a learned per-slot embedding), runs post-norm transformer
    blocks with key masking and pools over observed tokens.
    """

    def __init__(self, config, rng):
        self.config = config
        self.params = OrderedDict()
        c = config
        feat = 2 * c.n_channels
        p = self.params
        if c.variant == "attention":
            D = c.token_dim
            _param(p, "enc.in.w", glorot(rng, feat, D))
            _param(p, "enc.in.b", np.zeros(D))
            _param(p, "enc.pos", glorot(rng, c.input_len, D))
            for l in range(c.layers):
                for m in ("q", "k", "v", "o"):
                    _param(p, f"enc.{l}.{m}", glorot(rng, D, D))
                _param(p, f"enc.{l}.bo", np.zeros(D))
                _param(p, f"enc.{l}.ln1.g", np.ones(D))
                _param(p, f"enc.{l}.ln1.b", np.zeros(D))
                _param(p, f"enc.{l}.ff1.w", glorot(rng, D, c.ff_dim))
                _param(p, f"enc.{l}.ff1.b", np.zeros(c.ff_dim))
                _param(p, f"enc.{l}.ff2.w", glorot(rng, c.ff_dim, D))
                _param(p, f"enc.{l}.ff2.b", np.zeros(D))
                _param(p, f"enc.{l}.ln2.g", np.ones(D))
                _param(p, f"enc.{l}.ln2.b", np.zeros(D))
            _param(p, "enc.out.w", glorot(rng, D, c.embed_dim))
            _param(p, "enc.out.b", np.zeros(c.embed_dim))
        else:
            sizes = [feat * c.input_len, *c.mlp_widths, c.embed_dim]
            self._mlp = _MLP(p, "enc.mlp", sizes, rng)

    def _check(self, values, mask):
        values = np.asarray(values, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if values.ndim == 2:
            values = values[:, :, None]
        if mask.ndim == 2:
            mask = mask[:, :, None]
        c = self.config
        if values.shape[1:] != (c.input_len, c.n_channels) or mask.shape != values.shape:
            raise ShapeError("encode", values.shape, mask.shape, (c.input_len, c.n_channels))
        return values, mask

    def __call__(self, values, mask, allow_empty=False):
        values, mask = self._check(values, mask)
        tokens = mask.any(axis=2)
        empty = ~tokens.any(axis=1)
        if empty.any() and not allow_empty:
            raise DomainError("encode: input has no observed entries")
        if empty.any() and self.config.variant == "attention":
            return self._with_empty(values, mask, empty)
        feats = np.concatenate([np.where(mask, values, 0.0), mask.astype(np.float64)], axis=2)
        if self.config.variant == "mlp":
            return self._mlp(Tensor(feats.reshape(feats.shape[0], -1)))
        return self._attend(feats, tokens)

    def _with_empty(self, values, mask, empty):
        keep = np.nonzero(~empty)[0]
        out = np.repeat(self.empty_embedding()[None, :], len(values), axis=0)
        if keep.size:
            with no_grad():
                out[keep] = self(values[keep], mask[keep]).data
        return Tensor(out)

    def empty_embedding(self):
        """Embedding of an input with nothing observed (pooled state of zeros)."""
        if self.config.variant == "mlp":
            c = self.config
            z = np.zeros((1, c.input_len, c.n_channels))
            with no_grad():
                return self(z, z.astype(bool), allow_empty=True).data[0]
        return self.params["enc.out.b"].data.copy()

    def _attend(self, feats, tokens):
        c, p = self.config, self.params
        B, T, _ = feats.shape
        D, H = c.token_dim, c.heads
        dh = D // H
        x = ad.add(ad.add(ad.matmul(Tensor(feats), p["enc.in.w"]), p["enc.in.b"]), p["enc.pos"])
        key_mask = tokens[:, None, None, :]
        inv = 1.0 / math.sqrt(dh)
        for l in range(c.layers):
            q = ad.transpose(ad.reshape(ad.matmul(x, p[f"enc.{l}.q"]), (B, T, H, dh)), (0, 2, 1, 3))
            k = ad.transpose(ad.reshape(ad.matmul(x, p[f"enc.{l}.k"]), (B, T, H, dh)), (0, 2, 3, 1))
            v = ad.transpose(ad.reshape(ad.matmul(x, p[f"enc.{l}.v"]), (B, T, H, dh)), (0, 2, 1, 3))
            att = ad.masked_softmax(ad.scale(ad.matmul(q, k), inv), key_mask)
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, D))
            o = ad.add(ad.matmul(o, p[f"enc.{l}.o"]), p[f"enc.{l}.bo"])
            x = ad.layer_norm(ad.add(x, o), p[f"enc.{l}.ln1.g"], p[f"enc.{l}.ln1.b"])
            h = ad.relu(ad.add(ad.matmul(x, p[f"enc.{l}.ff1.w"]), p[f"enc.{l}.ff1.b"]))
            h = ad.add(ad.matmul(h, p[f"enc.{l}.ff2.w"]), p[f"enc.{l}.ff2.b"])
            x = ad.layer_norm(ad.add(x, h), p[f"enc.{l}.ln2.g"], p[f"enc.{l}.ln2.b"])
        pool = ad.mean_pool if c.pooling == "mean" else ad.max_pool
        pooled = pool(x, 1, tokens)
        return ad.add(ad.matmul(pooled, p["enc.out.w"]), p["enc.out.b"])


def _head_key(label):
    orient = label.rpartition("/")[2]
    if orient in ("wf", "fw"):
        return "|".join(sorted((label, channel_partner(label))))
    return label


@dataclass
class FusionConfig:
    embed_dim: int = 16
    channels: tuple = ("static",)
    widths: tuple = (64, 32)
    mu_max: float = 2.0
    heteroscedastic: bool = True

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.widths = tuple(self.widths)
        if not self.mu_max > 0:
            raise SchemaError("mu_max must be positive")


class Fusion:
    """Per-channel heads over the swap-invariant features [z+w, |z-w|, z*w].

    Output logits are bounded to +-30 and squashed to ``mu_max * sigmoid``. With a heteroscedastic
    head each channel also gets a log-variance clamped to [-10, 4].

    Orientation channels ``wf``/``fw`` share one symmetric head plus an
    antisymmetric term ``q . (z_a - z_b)`` added for ``wf`` and subtracted
    for ``fw``, which keeps ``wf(a, b) == fw(b, a)`` exact.
    """

    def __init__(self, config, rng):
        self.config = config
        self.params = OrderedDict()
        out = 2 if config.heteroscedastic else 1
        d = config.embed_dim
        self.heads = OrderedDict()
        self._plan = []
        for label in config.channels:
            key = _head_key(label)
            if key not in self.heads:
                self.heads[key] = _MLP(self.params, f"fuse.{key}",
                                       [3 * d, *config.widths, out], rng)
                if key != label:
                    _param(self.params, f"fuse.{key}.dir", glorot(rng, d, 1))
            orient = label.rpartition("/")[2]
            sign = 0.0 if key == label else (1.0 if orient == "wf" else -1.0)
            self._plan.append((key, sign))

    @staticmethod
    def features(za, zb):
        return ad.concat([ad.add(za, zb), ad.tabs(ad.sub(za, zb)), ad.mul(za, zb)], axis=-1)

    def logits(self, za, zb):
        """Raw head outputs: list over channels of (B, 1 or 2) tensors."""
        za, zb = ad.as_tensor(za), ad.as_tensor(zb)
        if za.shape != zb.shape or za.shape[-1] != self.config.embed_dim:
            raise ShapeError("fuse", za.shape, zb.shape)
        feats = self.features(za, zb)
        cache, outs = {}, []
        for key, sign in self._plan:
            if key not in cache:
                cache[key] = self.heads[key](feats)
            raw = cache[key]
            if sign:
                direction = ad.matmul(ad.sub(za, zb), self.params[f"fuse.{key}.dir"])
                if self.config.heteroscedastic:
                    direction = ad.concat([direction, Tensor(np.zeros(direction.shape))], axis=-1)
                raw = ad.add(raw, ad.scale(direction, sign))
            outs.append(raw)
        return outs

    def __call__(self, za, zb):
        """Return (mu (B, C), log-variance (B, C) or None)."""
        outs = self.logits(za, zb)
        logit = ad.concat([ad.gather(o, [0], axis=-1) for o in outs], axis=-1)
        # float64 sigmoid rounds to exactly 1 past ~37; +-30 keeps mu strictly inside
        logit = ad.clamp(logit, -LOGIT_BOUND, LOGIT_BOUND)
        mu = ad.scale(ad.sigmoid(logit), self.config.mu_max)
        if not self.config.heteroscedastic:
            return mu, None
        lv = ad.concat([ad.gather(o, [1], axis=-1) for o in outs], axis=-1)
        return mu, ad.clamp(lv, LOGVAR_MIN, LOGVAR_MAX)


@dataclass
class DecoderConfig:
    embed_dim: int = 16
    out_dim: int = 1
    widths: tuple = (32,)
    identity: bool = False

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.identity and self.embed_dim != self.out_dim:
            raise SchemaError("identity decoder needs embed_dim == out_dim")


class Decoder:
    def __init__(self, config, rng):
        self.config = config
        self.params = OrderedDict()
        if not config.identity:
            self._mlp = _MLP(self.params, "dec", [config.embed_dim, *config.widths,
                                                   config.out_dim], rng)

    def __call__(self, z):
        z = ad.as_tensor(z)
        if z.shape[-1] != self.config.embed_dim:
            raise ShapeError("decode", z.shape, (self.config.embed_dim,))
        if self.config.identity:
            return z
        return self._mlp(z)


@dataclass
class ModelConfig:
    """Architecture knobs that are not tied to a particular dataset."""

    encoder: str = "attention"
    embed_dim: int = 16
    token_dim: int = 32
    layers: int = 4
    heads: int = 4
    ff_dim: int = 64
    pooling: str = "mean"
    mlp_widths: tuple = (64, 64)
    fusion_widths: tuple = (64, 32)
    heteroscedastic: bool = True
    decoder: bool = True
    decoder_widths: tuple = (32,)

    @classmethod
    def from_dict(cls, obj):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise SchemaError(f"unknown model config keys {sorted(extra)}")
        return cls(**obj)


@dataclass
class FrictionModel:
    encoder: Encoder
    fusion: Fusion
    decoder: Decoder = None
    input_channels: tuple = ()
    proxies: list = None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(cls, config, n_materials, channels, input_channels=None, proxies=None,
              mu_max=2.0, seed=0):
        rng = np.random.default_rng(seed)
        channels = tuple(channels)
        input_channels = tuple(input_channels or channels)
        input_len = len(proxies) if proxies is not None else n_materials
        enc = Encoder(EncoderConfig(
            variant=config.encoder, input_len=input_len, n_channels=len(input_channels),
            embed_dim=config.embed_dim, token_dim=config.token_dim, layers=config.layers,
            heads=config.heads, ff_dim=config.ff_dim, pooling=config.pooling,
            mlp_widths=config.mlp_widths), rng)
        fus = Fusion(FusionConfig(config.embed_dim, channels, config.fusion_widths, mu_max,
                                  config.heteroscedastic), rng)
        dec = None
        if config.decoder:
            dec = Decoder(DecoderConfig(config.embed_dim, input_len * len(input_channels),
                                        config.decoder_widths), rng)
        return cls(enc, fus, dec, input_channels,
                   None if proxies is None else [int(i) for i in proxies], seed,
                   {"n_materials": int(n_materials)})

    @property
    def channels(self):
        return self.fusion.config.channels

    @property
    def mu_max(self):
        return self.fusion.config.mu_max

    @property
    def heteroscedastic(self):
        return self.fusion.config.heteroscedastic

    def parameters(self):
        out = OrderedDict(self.encoder.params)
        out.update(self.fusion.params)
        if self.decoder is not None:
            out.update(self.decoder.params)
        return out

    def n_parameters(self):
        return int(sum(p.data.size for p in self.parameters().values()))

    def state(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.parameters().items())

    def load_state(self, state):
        params = self.parameters()
        if list(state) != list(params):
            raise SchemaError("parameter names do not match the architecture")
        for k, arr in state.items():
            if arr.shape != params[k].data.shape:
                raise SchemaError(f"parameter {k}: shape {arr.shape} != {params[k].data.shape}")
            params[k].data = np.array(arr, dtype=np.float64)

    def inputs(self, ds):
        """Encoder inputs (values, mask) of shape (n, T, C) for every material."""
        try:
            idx = [ds.channels.index(c) for c in self.input_channels]
        except ValueError:
            raise SchemaError(f"dataset lacks input channels {list(self.input_channels)}") from None
        values, mask = ds.values[:, :, idx], ds.mask[:, :, idx]
        if self.proxies is not None:
            values, mask = values[:, self.proxies], mask[:, self.proxies]
        if values.shape[1] != self.encoder.config.input_len:
            raise ShapeError("model inputs", values.shape, (self.encoder.config.input_len,))
        return values, mask

    def embed(self, values, mask, allow_empty=False):
        return self.encoder(values, mask, allow_empty=allow_empty)

    def embeddings(self, ds):
        values, mask = self.inputs(ds)
        with no_grad():
            return self.embed(values, mask, allow_empty=True).data

    def predict_pairs(self, ds, pairs, embeddings=None):
        """Mean and aleatoric variance (P, C) for ordered pairs (a, b)."""
        pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
        Z = self.embeddings(ds) if embeddings is None else embeddings
        with no_grad():
            mu, lv = self.fusion(Tensor(Z[pairs[:, 0]]), Tensor(Z[pairs[:, 1]]))
        var = np.exp(lv.data) if lv is not None else np.zeros_like(mu.data)
        return mu.data, var

    # -- checkpoints -----------------------------------------------------------

    def manifest(self):
        return {
            "format_version": CHECKPOINT_VERSION,
            "encoder": asdict(self.encoder.config),
            "fusion": asdict(self.fusion.config),
            "decoder": None if self.decoder is None else asdict(self.decoder.config),
            "input_channels": list(self.input_channels),
            "channels": list(self.channels),
            "proxies": self.proxies,
            "mu_max": self.mu_max,
            "seed": self.seed,
            "meta": self.meta,
            "dtype": "<f8",
            "params": [{"name": k, "shape": list(p.shape)} for k, p in self.parameters().items()],
        }

    def save(self, path):
        """Write ``<path>.json`` (manifest) and ``<path>.bin`` (parameters)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest = self.manifest()
        blob = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes()
                        for p in self.parameters().values())
        manifest["weights"] = path.with_suffix(".bin").name
        path.with_suffix(".bin").write_bytes(blob)
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n",
                                             encoding="utf-8")
        return path.with_suffix(".json")

    @classmethod
    def load(cls, path):
        path = Path(path)
        mpath = path if path.suffix == ".json" else path.with_suffix(".json")
        try:
            m = json.loads(mpath.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read checkpoint {mpath}: {exc}") from None
        if m.get("format_version") != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {m.get('format_version')}")
        rng = np.random.default_rng(0)
        enc = Encoder(EncoderConfig(**m["encoder"]), rng)
        fus = Fusion(FusionConfig(**m["fusion"]), rng)
        dec = Decoder(DecoderConfig(**m["decoder"]), rng) if m["decoder"] else None
        model = cls(enc, fus, dec, tuple(m["input_channels"]), m["proxies"], m["seed"],
                    m.get("meta", {}))
        raw = np.frombuffer((mpath.parent / m["weights"]).read_bytes(), dtype="<f8")
        total = sum(int(np.prod(spec["shape"], dtype=np.int64)) for spec in m["params"])
        if total != raw.size:
            raise SchemaError("checkpoint weight file size does not match manifest")
        state, offset = OrderedDict(), 0
        for spec in m["params"]:
            size = int(np.prod(spec["shape"], dtype=np.int64))
            state[spec["name"]] = raw[offset:offset + size].reshape(spec["shape"]).astype(np.float64)
            offset += size
        model.load_state(state)
        return model


# -- functional surface ---------------------------------------------------------

def encode(model_or_encoder, vec):
    """Embedding (d,) of one InteractionVector / ProxyVector / (values, mask)."""
    enc = getattr(model_or_encoder, "encoder", model_or_encoder)
    if hasattr(vec, "u"):
        values, mask = vec.u, vec.s
    elif hasattr(vec, "v"):
        values, mask = vec.v, vec.mask
    else:
        values, mask = vec
    values = np.asarray(values, dtype=np.float64).reshape(1, enc.config.input_len, -1)
    mask = np.asarray(mask, dtype=bool).reshape(values.shape)
    with no_grad():
        return enc(values, mask).data[0]


def fuse(model_or_fusion, za, zb, channel=None):
    """(mu_hat, sigma_sq or None) for one pair of embeddings on one channel."""
    fus = getattr(model_or_fusion, "fusion", model_or_fusion)
    c = 0 if channel is None else fus.config.channels.index(channel)
    with no_grad():
        mu, lv = fus(Tensor(np.atleast_2d(za)), Tensor(np.atleast_2d(zb)))
    sig = None if lv is None else float(np.exp(lv.data[0, c]))
    return float(mu.data[0, c]), sig


def decode(model_or_decoder, z):
    dec = getattr(model_or_decoder, "decoder", model_or_decoder)
    if dec is None:
        raise SchemaError("model has no decoder")
    with no_grad():
        return dec(Tensor(np.atleast_2d(z))).data[0]


# -- ensembles -----------------------------------------------------------------

class Ensemble(list):
    """Independently trained members sharing input layout and proxies."""

    def __init__(self, members=()):
        super().__init__(members)
        if self:
            first = self[0]
            for m in self[1:]:
                if (m.proxies != first.proxies or m.channels != first.channels
                        or m.encoder.config.input_len != first.encoder.config.input_len):
                    raise SchemaError("ensemble members disagree on inputs or channels")

    @property
    def channels(self):
        return self[0].channels

    @property
    def heteroscedastic(self):
        return all(m.heteroscedastic for m in self)

    def predict_pairs(self, ds, pairs):
        """Mean, aleatoric and epistemic variance arrays (P, C)."""
        if not len(self):
            raise TriboError("empty ensemble")
        means, alea = [], []
        for m in self:
            mu, var = m.predict_pairs(ds, pairs)
            means.append(mu)
            alea.append(var)
        means = np.stack(means)
        return means.mean(axis=0), np.stack(alea).mean(axis=0), means.var(axis=0)


def as_ensemble(modelset):
    if isinstance(modelset, Ensemble):
        return modelset
    if isinstance(modelset, FrictionModel):
        return Ensemble([modelset])
    return Ensemble(list(modelset))


def predict_pair(modelset, ds, a, b, channel=None):
    """(mean, aleatoric variance, epistemic variance) for one material pair."""
    ens = as_ensemble(modelset)
    if not len(ens):
        raise TriboError("empty ensemble")
    i, j = ds.library.index(a), ds.library.index(b)
    c = 0 if channel is None else list(ens.channels).index(channel)
    mean, alea, epi = ens.predict_pairs(ds, [[i, j]])
    return float(mean[0, c]), float(alea[0, c]), float(epi[0, c])
