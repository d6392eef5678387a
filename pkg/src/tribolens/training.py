"""Losses, input corruption, Adam, early-stopped training and metrics.

The objective for one mini-batch is

    alpha * sum (f - mu)^2 + beta * sum ||(v - phi(z)) * s||^2      (base)
    + gamma * 0.5 * sum w * (r^2 / sigma^2 + log sigma^2)           (NLL)
    + theta * sum ||(phi(z) - v) * s||_1                            (latent)
    + lambda_c * sum max(0, mu_kinetic - mu_static)                 (constraint)

with sums over observed (pair, channel) targets and over the distinct
materials of the batch. Reconstruction terms only count observed input
slots. ``reduction="mean"`` divides each sum by its number of terms.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .dataset import split as make_split
from .errors import NumericalError, SchemaError
from .model import Ensemble, FrictionModel, ModelConfig, as_ensemble


@dataclass
class TrainConfig:
    alpha: float = 0.9
    beta: float = 0.1
    gamma: float = 0.1
    theta: float = 0.1
    kappa: float = 50.0
    tau_quantile: float = 0.90
    robust_weights: bool = True
    sigma_v: float = 0.01
    mask_rate: float = 0.1
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    constraint_weight: float = 0.1
    reduction: str = "sum"

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta >= 0):
            raise SchemaError("alpha must be > 0 and beta >= 0")
        total = self.alpha + self.beta
        self.alpha, self.beta = self.alpha / total, self.beta / total
        for name in ("sigma_v", "gamma", "theta", "constraint_weight"):
            if getattr(self, name) < 0:
                raise SchemaError(f"{name} must be >= 0")
        if not 0 <= self.mask_rate < 1:
            raise SchemaError("mask_rate must lie in [0, 1)")
        if not 0 < self.tau_quantile < 1:
            raise SchemaError("tau_quantile must lie in (0, 1)")
        if not self.lr > 0 or not self.kappa > 0:
            raise SchemaError("lr and kappa must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise SchemaError("batch_size, max_epochs, patience out of range")
        if self.reduction not in ("sum", "mean"):
            raise SchemaError("reduction must be 'sum' or 'mean'")

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        extra = set(obj) - known
        if extra:
            raise SchemaError(f"unknown train config keys {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise SchemaError(f"bad config JSON {path}: {exc}") from None

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False
    metrics: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def history_csv(self):
        rows = ["epoch,train_loss,val_loss"]
        for e, (t, v) in enumerate(zip(self.train_loss, self.val_loss)):
            rows.append(f"{e},{t!r},{v!r}")
        return "\n".join(rows) + "\n"


# -- losses -------------------------------------------------------------------

def _reduce(x, count, reduction):
    s = ad.tsum(x)
    if reduction == "mean":
        return ad.scale(s, 1.0 / max(count, 1))
    return s


def pair_sq_error(mu, target, tmask, reduction="sum"):
    tmask = np.asarray(tmask, dtype=bool)
    diff = ad.sub(mu, Tensor(np.where(tmask, target, 0.0)))
    return _reduce(ad.mul(ad.square(diff), Tensor(tmask.astype(np.float64))),
                   int(tmask.sum()), reduction)


def recon_sq_error(recon, v, vmask, reduction="sum"):
    vmask = np.asarray(vmask, dtype=bool)
    diff = ad.sub(recon, Tensor(np.where(vmask, v, 0.0)))
    return _reduce(ad.mul(ad.square(diff), Tensor(vmask.astype(np.float64))),
                   recon.shape[0], reduction)


def loss_base(mu, target, tmask, alpha=0.9, beta=0.1, recon=None, v=None, vmask=None,
              reduction="sum"):
    """alpha * pairwise squared error + beta * squared reconstruction error."""
    loss = ad.scale(pair_sq_error(mu, target, tmask, reduction), alpha)
    if beta > 0:
        if recon is None:
            raise SchemaError("beta > 0 needs a decoder reconstruction")
        loss = ad.add(loss, ad.scale(recon_sq_error(recon, v, vmask, reduction), beta))
    return loss


def residual_weight(r, kappa, tau):
    """Logistic down-weighting ``1 / (1 + exp(kappa * (|r| - tau)))``."""
    if not kappa > 0:
        raise SchemaError("kappa must be positive")
    x = kappa * (np.abs(np.asarray(r, dtype=np.float64)) - tau)
    # 1 / (1 + e^x) evaluated without overflow
    return 0.5 * (1.0 - np.tanh(0.5 * x))


def loss_nll(mu, logvar, target, tmask, kappa=50.0, tau_quantile=0.9, robust=True,
             reduction="sum", weights=None):
    """Residual-weighted heteroscedastic Gaussian NLL.

    ``tau`` is the ``tau_quantile`` of |r| over the observed targets of this
    batch. Weights and ``tau`` are constants for differentiation. Pass
    ``weights`` to override them.
    """
    tmask = np.asarray(tmask, dtype=bool)
    target = np.where(tmask, target, 0.0)
    r = ad.sub(Tensor(target), mu)
    if weights is None:
        if robust and tmask.any():
            absr = np.abs(r.data)
            tau = float(np.quantile(absr[tmask], tau_quantile))
            weights = residual_weight(absr, kappa, tau)
        else:
            weights = np.ones(r.shape)
    w = np.where(tmask, weights, 0.0)
    inv_var = ad.exp(ad.scale(logvar, -1.0))
    per = ad.add(ad.mul(ad.square(r), inv_var), logvar)
    return ad.scale(_reduce(ad.mul(per, Tensor(w)), int(tmask.sum()), reduction), 0.5)


def loss_latent(recon, v, vmask, reduction="sum"):
    """L1 distance between the reconstruction and the clean input on observed slots."""
    vmask = np.asarray(vmask, dtype=bool)
    diff = ad.sub(recon, Tensor(np.where(vmask, v, 0.0)))
    return _reduce(ad.mul(ad.tabs(diff), Tensor(vmask.astype(np.float64))),
                   recon.shape[0], reduction)


def constraint_pairs(channels):
    """(static_index, kinetic_index) for channels that differ only by regime."""
    out = []
    for i, c in enumerate(channels):
        head, sep, tail = c.partition("/")
        if head == "static":
            other = "kinetic" + sep + tail
            if other in channels:
                out.append((i, list(channels).index(other)))
    return out


def loss_constraint(mu, pairs, reduction="sum"):
    """Hinge penalty on predicted kinetic exceeding predicted static."""
    if not pairs:
        return Tensor(0.0)
    s = ad.gather(mu, [p[0] for p in pairs], axis=-1)
    k = ad.gather(mu, [p[1] for p in pairs], axis=-1)
    return _reduce(ad.hinge(ad.sub(k, s)), mu.shape[0] * len(pairs), reduction)


def noise_objective(parts, config):
    """Combine named loss parts the way training does."""
    total = parts["base"]
    if "nll" in parts:
        total = ad.add(total, ad.scale(parts["nll"], config.gamma))
    if "latent" in parts:
        total = ad.add(total, ad.scale(parts["latent"], config.theta))
    if "constraint" in parts:
        total = ad.add(total, ad.scale(parts["constraint"], config.constraint_weight))
    return total


# -- corruption ------------------------------------------------------------------

def corrupt(v, mask, mask_rate, sigma_v, rng):
    """Drop observed slots with probability ``mask_rate`` and add noise to the rest.

    ``v`` and ``mask`` have shape (B, T) or (B, T, C); one keep decision is
    drawn per slot and shared by its channels. Every row keeps at least one
    observed slot (rows are redrawn until they do). Returns (v_noisy, m)
    with ``v_noisy = (v + eta) * m``.
    """
    v = np.asarray(v, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    squeeze = v.ndim == 2
    if squeeze:
        v, mask = v[:, :, None], mask[:, :, None]
    slot_obs = mask.any(axis=2)
    if not slot_obs.any(axis=1).all():
        raise SchemaError("corrupt: a row has no observed entries")
    if mask_rate > 0:
        keep = rng.random(slot_obs.shape) >= mask_rate
        bad = ~(keep & slot_obs).any(axis=1)
        while bad.any():
            keep[bad] = rng.random((int(bad.sum()), keep.shape[1])) >= mask_rate
            bad = ~(keep & slot_obs).any(axis=1)
        m = mask & keep[:, :, None]
    else:
        m = mask.copy()
    noisy = v
    if sigma_v > 0:
        noisy = v + rng.normal(0.0, sigma_v, size=v.shape)
    noisy = np.where(m, noisy, 0.0)
    if squeeze:
        return noisy[:, :, 0], m[:, :, 0]
    return noisy, m


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], 0)


def adam_step(params, grads, state, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """One bias-corrected Adam update of the tensors in ``params``."""
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, (p, g) in enumerate(zip(params, grads)):
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        p.data = p.data - lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + eps)
    return state


# -- training loop ---------------------------------------------------------------

def batch_parts(model, values, mask, pairs, targets, tmask, config, rng=None):
    """Loss parts for one batch of ordered pairs.

    ``values``/``mask`` are the encoder inputs of every material; only the
    materials touched by ``pairs`` are encoded. With ``rng`` the inputs are
    corrupted first.
    """
    pairs = np.asarray(pairs, dtype=np.intp)
    mats, local = np.unique(pairs, return_inverse=True)
    local = local.reshape(pairs.shape)
    clean_v, clean_m = values[mats], mask[mats]
    if rng is not None:
        xin, min_ = corrupt(clean_v, clean_m, config.mask_rate, config.sigma_v, rng)
    else:
        xin, min_ = clean_v, clean_m
    z = model.embed(xin, min_)
    za, zb = ad.gather(z, local[:, 0], axis=0), ad.gather(z, local[:, 1], axis=0)
    mu, lv = model.fusion(za, zb)
    red = config.reduction
    parts = {}
    recon = None
    flat_v = clean_v.reshape(len(mats), -1)
    flat_m = clean_m.reshape(len(mats), -1)
    if model.decoder is not None and (config.beta > 0 or config.theta > 0):
        recon = model.decoder(z)
    parts["base"] = loss_base(mu, targets, tmask, config.alpha, config.beta, recon, flat_v,
                              flat_m, red)
    if lv is not None and config.gamma > 0:
        parts["nll"] = loss_nll(mu, lv, targets, tmask, config.kappa, config.tau_quantile,
                                config.robust_weights, red)
    if recon is not None and config.theta > 0:
        parts["latent"] = loss_latent(recon, flat_v, flat_m, red)
    cpairs = constraint_pairs(model.channels)
    if cpairs and config.constraint_weight > 0:
        parts["constraint"] = loss_constraint(mu, cpairs, red)
    return parts, mu, lv


def _val_mse(model, input_ds, ds, pairs):
    if len(pairs) == 0:
        return math.nan
    mu, _ = model.predict_pairs(input_ds, pairs)
    target, tmask = ds.pair_targets(pairs)
    tmask = tmask[:, _channel_idx(ds, model.channels)]
    target = target[:, _channel_idx(ds, model.channels)]
    return float(((mu - target) ** 2)[tmask].mean()) if tmask.any() else math.nan


def _channel_idx(ds, channels):
    return [ds.channel_index(c) for c in channels]


def train(ds, config=None, model_config=None, split=None, proxies=None, channels=None,
          reveal_pairs=None, model=None):
    """Fit encoder and fusion end-to-end on the training pairs of ``split``.

    Encoder inputs only ever contain training pairs (plus ``reveal_pairs``,
    e.g. a held-out material's proxy measurements), so validation and test
    targets never leak into the inputs. Returns ``(model, report)`` where
    ``model`` holds the parameters of the best validation epoch.
    """
    config = config or TrainConfig()
    model_config = model_config or ModelConfig()
    channels = tuple(channels or ds.channels)
    if split is None:
        split = make_split(ds, "random", config.seed)
    train_pairs = np.asarray(split.train, dtype=np.intp).reshape(-1, 2)
    if len(train_pairs) == 0:
        raise SchemaError("training needs at least one observed train pair")
    visible = train_pairs if reveal_pairs is None else np.concatenate(
        [train_pairs, np.asarray(reveal_pairs, dtype=np.intp).reshape(-1, 2)])
    input_ds = ds.restrict_to_pairs(visible)
    if model is None:
        model = FrictionModel.build(model_config, ds.n, channels, channels, proxies,
                                    ds.mu_max, config.seed)
    values, mask = model.inputs(input_ds)
    tidx = _channel_idx(ds, model.channels)
    targets, tmask = ds.pair_targets(train_pairs)
    targets, tmask = targets[:, tidx], tmask[:, tidx]
    keep = tmask.any(axis=1)
    train_pairs, targets, tmask = train_pairs[keep], targets[keep], tmask[keep]
    usable = mask.reshape(ds.n, -1).any(axis=1)
    ok = usable[train_pairs[:, 0]] & usable[train_pairs[:, 1]]
    train_pairs, targets, tmask = train_pairs[ok], targets[ok], tmask[ok]
    if len(train_pairs) == 0:
        raise SchemaError("no train pair has observed inputs for both materials")

    params = list(model.parameters().values())
    state = AdamState.zeros(params)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    val_pairs = np.asarray(split.val, dtype=np.intp).reshape(-1, 2)
    monitor_val = len(val_pairs) > 0
    best_state = model.state()
    stale = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            parts, _, _ = batch_parts(model, values, mask, train_pairs[b], targets[b],
                                      tmask[b], config, rng)
            loss = noise_objective(parts, config)
            lval = float(loss.data)
            if not math.isfinite(lval):
                raise NumericalError(f"non-finite loss {lval} at epoch {epoch}")
            grads = ad.grad_of(loss, params)
            adam_step(params, grads, state, config.lr)
            total += lval
            count += len(b)
        train_loss = total / count
        if monitor_val:
            val_loss = _val_mse(model, input_ds, ds, val_pairs)
        else:
            val_loss = train_loss
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.epochs_run = epoch + 1
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_state = model.state()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stopped_early = True
                break
    model.load_state(best_state)
    model.meta.update({"train_config": config.to_dict(), "model_config": asdict(model_config)})
    return model, report


def proxy_protocol(ds, split, proxies):
    """Adapt a split to the proxy-measurement workflow.

    Every observed pair touching a proxy counts as measured input, so it is
    returned as ``reveal`` and removed from validation and test (it stays a
    training target). Returns (new split, reveal pairs).
    """
    from .dataset import Split

    idx = np.asarray(list(getattr(proxies, "indices", proxies)), dtype=np.intp)
    pairs = ds.observed_pairs()
    touch = np.isin(pairs, idx).any(axis=1)
    reveal = pairs[touch]

    def clean(p):
        p = np.asarray(p, dtype=np.intp).reshape(-1, 2)
        return p[~np.isin(p, idx).any(axis=1)]

    tr = np.asarray(split.train, dtype=np.intp).reshape(-1, 2)
    extra = reveal[~(reveal[:, None, :] == tr[None, :, :]).all(axis=2).any(axis=1)]
    train_pairs = np.concatenate([tr, extra]) if len(extra) else tr
    order = np.lexsort((train_pairs[:, 1], train_pairs[:, 0]))
    info = dict(split.info, proxies=idx.tolist())
    return Split(train_pairs[order], clean(split.val), clean(split.test), split.scheme,
                 info), reveal


def thread_cap():
    try:
        return max(1, int(os.environ.get("TRIBOLENS_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items):
    """Ordered map over independent tasks, at most TRIBOLENS_THREADS at once."""
    items = list(items)
    workers = min(thread_cap(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def train_ensemble(ds, config=None, model_config=None, members=5, split=None, **kw):
    """Train ``members`` models with seeds ``seed ^ i``; returns (Ensemble, reports)."""
    config = config or TrainConfig()
    if split is None:
        split = make_split(ds, "random", config.seed)

    def one(i):
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed ^ i})
        return train(ds, cfg, model_config, split, **kw)

    results = parallel_map(one, range(members))
    return Ensemble([m for m, _ in results]), [r for _, r in results]


# -- metrics ---------------------------------------------------------------------

def regression_metrics(y, yhat):
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    if y.size == 0:
        return {"n": 0, "mse": math.nan, "mae": math.nan, "r2": math.nan}
    res = y - yhat
    ss_res = float((res ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else -math.inf)
    return {"n": int(y.size), "mse": float((res ** 2).mean()), "mae": float(np.abs(res).mean()),
            "r2": r2}


def coverage(y, yhat, var, z):
    sd = np.sqrt(np.asarray(var, dtype=np.float64))
    return float(np.mean(np.abs(np.asarray(y) - np.asarray(yhat)) <= z * sd))


def predictions_table(modelset, input_ds, ds, pairs, channel_map=None):
    """Row per observed (pair, channel): i, j, channel, target, mean, aleatoric, epistemic.

    ``channel_map`` maps model channels to dataset target channels (used for
    cross-regime transfer); by default they match by label.
    """
    ens = as_ensemble(modelset)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    mean, alea, epi = ens.predict_pairs(input_ds, pairs)
    target, tmask = ds.pair_targets(pairs)
    rows = []
    for c, label in enumerate(ens.channels):
        tgt_label = (channel_map or {}).get(label, label)
        tc = ds.channel_index(tgt_label)
        for p in np.nonzero(tmask[:, tc])[0]:
            rows.append((int(pairs[p, 0]), int(pairs[p, 1]), label, float(target[p, tc]),
                         float(mean[p, c]), float(alea[p, c]), float(epi[p, c])))
    return rows


def metrics_from_rows(rows, heteroscedastic=True, ensemble=False):
    out = {}
    if not rows:
        return {"overall": regression_metrics([], [])}
    y = np.array([r[3] for r in rows])
    yhat = np.array([r[4] for r in rows])
    var = np.array([r[5] + r[6] for r in rows])
    labels = [r[2] for r in rows]

    def block(sel):
        m = regression_metrics(y[sel], yhat[sel])
        if heteroscedastic or ensemble:
            m["coverage_1sigma"] = coverage(y[sel], yhat[sel], var[sel], 1.0)
            m["coverage_2sigma"] = coverage(y[sel], yhat[sel], var[sel], 2.0)
        return m

    out["overall"] = block(np.ones(len(rows), dtype=bool))
    per = {}
    for label in dict.fromkeys(labels):
        per[label] = block(np.array([l == label for l in labels]))
    out["per_channel"] = per
    return out


def evaluate(modelset, input_ds, ds, pairs, channel_map=None):
    """MSE/MAE/R^2 overall and per channel, plus 1- and 2-sigma coverage.

    Coverage uses total variance (aleatoric + epistemic) and is reported
    when the models are heteroscedastic or more than one member is present.
    """
    ens = as_ensemble(modelset)
    rows = predictions_table(ens, input_ds, ds, pairs, channel_map)
    return metrics_from_rows(rows, ens.heteroscedastic, len(ens) > 1)


def violation_rate(modelset, input_ds, pairs):
    """Fraction of (pair, static/kinetic) predictions with kinetic above static."""
    ens = as_ensemble(modelset)
    cp = constraint_pairs(ens.channels)
    if not cp or len(pairs) == 0:
        return 0.0
    mean, _, _ = ens.predict_pairs(input_ds, pairs)
    viol = [mean[:, k] > mean[:, s] for s, k in cp]
    return float(np.mean(np.concatenate(viol)))


def autoencoder_baseline(ds, split=None, config=None, model_config=None, epochs=200,
                         lr=1e-3, seed=0):
    """Encoder/decoder trained only to reconstruct interaction vectors.

    Returns a model whose encoder is fixed by reconstruction; ``fit_frozen``
    then trains its fusion heads alone. Provided for comparison with
    end-to-end training.
    """
    config = config or TrainConfig(seed=seed)
    model_config = model_config or ModelConfig()
    if split is None:
        split = make_split(ds, "random", seed)
    input_ds = ds.restrict_to_pairs(split.train)
    model = FrictionModel.build(ModelConfig(**{**asdict(model_config), "decoder": True}),
                                ds.n, ds.channels, ds.channels, None, ds.mu_max, seed)
    values, mask = model.inputs(input_ds)
    usable = np.nonzero(mask.reshape(ds.n, -1).any(axis=1))[0]
    enc_params = list(model.encoder.params.values()) + list(model.decoder.params.values())
    state = AdamState.zeros(enc_params)
    rng = np.random.default_rng(seed)
    history = []
    flat_v = values.reshape(ds.n, -1)
    flat_m = mask.reshape(ds.n, -1)

    def recon_mse():
        with no_grad():
            r = model.decoder(model.embed(values[usable], mask[usable])).data
        d = (r - flat_v[usable])[flat_m[usable]]
        return float((d ** 2).mean())

    history.append(recon_mse())
    for _ in range(epochs):
        order = rng.permutation(usable)
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            z = model.embed(values[b], mask[b])
            loss = recon_sq_error(model.decoder(z), flat_v[b], flat_m[b])
            adam_step(enc_params, ad.grad_of(loss, enc_params), state, lr)
        history.append(recon_mse())
    return model, history


def encoder_autoencoder_baseline(ds, dims=16, config=None, split=None, epochs=200):
    """Embeddings (n, dims) from a reconstruction-only encoder/decoder."""
    config = config or TrainConfig()
    model, _ = autoencoder_baseline(ds, split, config, ModelConfig(embed_dim=dims),
                                    epochs, config.lr, config.seed)
    return model.embeddings(ds if split is None else ds.restrict_to_pairs(split.train))


def fit_frozen(model, ds, split, config=None):
    """Train only the fusion heads on top of a frozen encoder."""
    config = config or TrainConfig()
    input_ds = ds.restrict_to_pairs(split.train)
    values, mask = model.inputs(input_ds)
    with no_grad():
        Z = model.embed(values, mask, allow_empty=True).data
    pairs = np.asarray(split.train, dtype=np.intp)
    tidx = _channel_idx(ds, model.channels)
    targets, tmask = ds.pair_targets(pairs)
    targets, tmask = targets[:, tidx], tmask[:, tidx]
    fparams = list(model.fusion.params.values())
    state = AdamState.zeros(fparams)
    rng = np.random.default_rng(config.seed)
    val = np.asarray(split.val, dtype=np.intp).reshape(-1, 2)
    best, best_state, stale = math.inf, model.state(), 0
    for _ in range(config.max_epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            mu, _ = model.fusion(Tensor(Z[pairs[b, 0]]), Tensor(Z[pairs[b, 1]]))
            loss = pair_sq_error(mu, targets[b], tmask[b])
            adam_step(fparams, ad.grad_of(loss, fparams), state, config.lr)
        score = _val_mse(model, input_ds, ds, val) if len(val) else 0.0
        if score < best:
            best, best_state, stale = score, model.state(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best_state)
    return model


# -- protocols -------------------------------------------------------------------

@dataclass
class FitResult:
    models: Ensemble
    input_ds: object
    split: object
    reports: list
    reveal: np.ndarray = None


def fit_split(ds, split, config=None, model_config=None, proxies=None, channels=None,
              members=1):
    """Train one model (or an ensemble) on ``split``.

    With ``proxies`` the split is first adapted by ``proxy_protocol``.
    ``input_ds`` in the result is what the encoders may see at prediction time.
    """
    config = config or TrainConfig()
    reveal = None
    if proxies is not None:
        proxies = list(getattr(proxies, "indices", proxies))
        split, reveal = proxy_protocol(ds, split, proxies)
    kw = {"proxies": proxies, "channels": channels, "reveal_pairs": reveal}
    if members > 1:
        ens, reports = train_ensemble(ds, config, model_config, members, split, **kw)
    else:
        model, report = train(ds, config, model_config, split, **kw)
        ens, reports = Ensemble([model]), [report]
    visible = split.train if reveal is None else np.concatenate([split.train, reveal])
    return FitResult(ens, ds.restrict_to_pairs(visible), split, reports, reveal)


def cv_splits(ds, scheme, seed=0, k=5, materials=None, classes=("knit", "woven"),
              proxies=None, val_fraction=0.15):
    """Splits for one cross-validation protocol, in fold order.

    Leave-one-material-out needs ``proxies``: a held-out material is only
    described by its proxy measurements. Proxy materials themselves are not
    held out.
    """
    if scheme == "kfold":
        return [make_split(ds, "kfold", seed, k=k, fold=f, val_fraction=val_fraction)
                for f in range(k)]
    if scheme == "loom":
        if proxies is None:
            raise SchemaError("leave-one-material-out evaluation needs a proxy set")
        skip = set(getattr(proxies, "indices", proxies))
        if materials is None:
            materials = range(ds.n)
        pairs = ds.observed_pairs()
        out = []
        for m in materials:
            m = ds.library.index(m)
            touched = pairs[(pairs == m).any(axis=1)]
            if m in skip or len(touched) == 0:
                continue
            out.append(make_split(ds, "loom", seed ^ m, material=m, val_fraction=val_fraction))
        if not out:
            raise SchemaError("no material can be held out")
        return out
    if scheme == "leave-block-out":
        return [make_split(ds, "leave-block-out", seed, classes=tuple(classes),
                           val_fraction=val_fraction)]
    if scheme == "random":
        return [make_split(ds, "random", seed)]
    raise SchemaError(f"unknown evaluation scheme {scheme!r}")


def cross_validate(ds, scheme, config=None, model_config=None, proxies=None, channels=None,
                   members=1, k=5, materials=None, classes=("knit", "woven")):
    """Train and score one model per fold; folds use seeds ``seed ^ fold``.

    Returns per-fold metrics and metrics over the pooled test predictions,
    both in fold order.
    """
    config = config or TrainConfig()
    splits = cv_splits(ds, scheme, config.seed, k, materials, classes, proxies)

    def run(item):
        fold, sp = item
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed ^ fold})
        fit = fit_split(ds, sp, cfg, model_config, proxies, channels, members)
        rows = predictions_table(fit.models, fit.input_ds, ds, fit.split.test)
        return fit, rows

    results = parallel_map(run, list(enumerate(splits)))
    folds, pooled = [], []
    for fold, (fit, rows) in enumerate(results):
        ens = fit.models
        m = metrics_from_rows(rows, ens.heteroscedastic, len(ens) > 1)
        m["fold"] = fold
        m["info"] = fit.split.info
        folds.append(m)
        pooled.extend(rows)
    ens0 = results[0][0].models
    return {"scheme": scheme, "folds": folds,
            "pooled": metrics_from_rows(pooled, ens0.heteroscedastic, len(ens0) > 1)}


def transfer_map(channels, source="static", target="kinetic"):
    """Channel mapping used to score a ``source``-regime model on ``target`` data."""
    out = {}
    for c in channels:
        head, sep, tail = c.partition("/")
        if head != source:
            raise SchemaError(f"transfer expects {source} channels, got {c!r}")
        out[c] = target + sep + tail
    return out
