"""Proxy-set selection: spectral (RRQR) and embedding-preserving (mask-opt)."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .dataset import symmetrize
from .errors import DomainError, SchemaError
from .spectral import completion_rank, eig_sym, impute_mean, retention_size, rrqr_select
from .training import AdamState, adam_step, parallel_map

METHODS = ("rrqr", "mask-opt", "exhaustive", "manual")


@dataclass
class ProxySet:
    indices: list
    method: str = "manual"
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        if len(set(self.indices)) != len(self.indices):
            raise SchemaError(f"proxy indices must be distinct: {self.indices}")
        if any(i < 0 for i in self.indices):
            raise SchemaError("proxy indices must be non-negative")
        if self.method not in METHODS:
            raise SchemaError(f"unknown proxy method {self.method!r}")

    def __len__(self):
        return len(self.indices)

    def mask(self, n):
        m = np.zeros(n, dtype=bool)
        m[self.indices] = True
        return m

    def validate(self, n):
        if any(i >= n for i in self.indices):
            raise SchemaError(f"proxy index out of range for {n} materials")
        return self

    def to_json(self):
        return {"indices": self.indices, "method": self.method, "diagnostics": self.diagnostics}

    @classmethod
    def from_json(cls, obj):
        try:
            return cls(obj["indices"], obj.get("method", "manual"), obj.get("diagnostics", {}))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"bad proxy set JSON: {exc}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"cannot read proxy set {path}: {exc}") from None


def selection_matrix(ds, channel=None, impute="lowrank", retention=0.999, mode="energy"):
    """Symmetrized, completed single-channel matrix used for spectral selection.

    ``impute="lowrank"`` completes missing entries at the smallest rank that
    retains ``retention`` of the completed spectrum; ``"mean"`` uses the
    row/column-mean fill. Returns (matrix, completion rank or None).
    """
    sym = symmetrize(ds)
    c = sym.channel_index(channel)
    values, mask = sym.values[:, :, c], sym.mask[:, :, c]
    if impute == "mean":
        return impute_mean(values, mask), None
    if impute == "lowrank":
        k, X = completion_rank(values, mask, retention, mode)
        return X, k
    raise DomainError(f"unknown imputation {impute!r}")


def select_rrqr(ds, channel=None, retention=0.999, mode="energy", k=None, impute="lowrank"):
    """k = retention_size(spectrum, retention) pivot columns of the friction matrix."""
    F, _ = selection_matrix(ds, channel, impute, retention, mode)
    spec = eig_sym(F)
    if k is None:
        k = retention_size(spec, retention, mode)
    piv = rrqr_select(F, k)
    lam2 = spec.eigenvalues ** 2
    captured = float(lam2[:k].sum() / lam2.sum()) if lam2.sum() > 0 else 0.0
    return ProxySet(piv.indices, "rrqr", {
        "retention": retention, "mode": mode, "k": int(k), "energy_captured": captured,
        "imputation": impute, "residual_norms": piv.residual_norms.tolist()})


# -- embedding alignment ---------------------------------------------------------

class _Aligner:
    """Caches full-input embeddings so each candidate mask costs one pass."""

    def __init__(self, model, ds):
        if model.proxies is not None:
            raise SchemaError("mask optimization needs a model trained on full vectors")
        self.model = model
        self.values, self.mask = model.inputs(ds)
        with no_grad():
            self.full = model.embed(self.values, self.mask, allow_empty=True).data
        self.n = self.values.shape[1]

    def error(self, keep):
        keep = np.asarray(keep, dtype=bool)
        if keep.shape != (self.n,):
            raise SchemaError(f"mask must have length {self.n}")
        if keep.all():
            return 0.0
        m = self.mask & keep[None, :, None]
        with no_grad():
            z = self.model.embed(self.values, m, allow_empty=True).data
        return float(((self.full - z) ** 2).sum())


def alignment_error(model, ds, mask):
    """Sum over materials of ||g(u_A) - g(u_A restricted to mask)||^2."""
    return _Aligner(model, ds).error(mask)


def _mask_of(n, idx):
    m = np.zeros(n, dtype=bool)
    m[list(idx)] = True
    return m


def select_mask_opt(model, ds, epsilon=None, k_max=None, relative_epsilon=None,
                    channel=None):
    """Greedy forward selection of proxies preserving the embeddings.

    Starting from the empty set, repeatedly add the material whose inclusion
    lowers ``alignment_error`` the most (ties go to the lowest index) until the
    error is at most ``epsilon`` or ``k_max`` proxies are chosen. Passing
    ``relative_epsilon`` sets ``epsilon`` to that fraction of the empty-set
    error. ``diagnostics["converged"]`` is False when the tolerance was not met.
    """
    al = _Aligner(model, ds)
    n = al.n
    k_max = n if k_max is None else int(k_max)
    if not 0 <= k_max <= n:
        raise DomainError(f"k_max={k_max} outside [0, {n}]")
    empty_err = al.error(np.zeros(n, dtype=bool))
    if epsilon is None:
        if relative_epsilon is None:
            raise DomainError("give epsilon or relative_epsilon")
        epsilon = relative_epsilon * empty_err
    if epsilon < 0:
        raise DomainError("epsilon must be >= 0")
    chosen, trace = [], [empty_err]
    err = empty_err
    while err > epsilon and len(chosen) < k_max:
        cand = [j for j in range(n) if j not in chosen]
        errs = parallel_map(lambda j: al.error(_mask_of(n, chosen + [j])), cand)
        best = min(range(len(cand)), key=lambda t: (errs[t], cand[t]))
        chosen.append(cand[best])
        err = errs[best]
        trace.append(err)
    return ProxySet(chosen, "mask-opt", {
        "alignment_error": err, "empty_error": empty_err, "epsilon": float(epsilon),
        "trace": trace, "converged": bool(err <= epsilon), "k_max": k_max})


def budget_search(model, ds, epsilon=None, relative_epsilon=None, k_max=None):
    """Smallest greedy budget meeting the tolerance: returns (k*, ProxySet).

    k* is None when the tolerance cannot be met within ``k_max``.
    """
    ps = select_mask_opt(model, ds, epsilon, k_max, relative_epsilon)
    return (len(ps) if ps.diagnostics["converged"] else None), ps


def exhaustive_mask_opt(model, ds, epsilon=None, k_max=3, relative_epsilon=None):
    """Brute-force minimum-size proxy set meeting the tolerance (small n only).

    Within the minimal size the lowest-error subset wins, ties by
    lexicographic order.
    """
    al = _Aligner(model, ds)
    n = al.n
    if n > 12:
        raise DomainError(f"exhaustive search limited to n <= 12, got {n}")
    empty_err = al.error(np.zeros(n, dtype=bool))
    if epsilon is None:
        epsilon = relative_epsilon * empty_err
    best = ([], empty_err)
    for k in range(0, k_max + 1):
        scored = [(al.error(_mask_of(n, c)), c) for c in itertools.combinations(range(n), k)]
        err, combo = min(scored)
        best = (list(combo), err)
        if err <= epsilon:
            break
    return ProxySet(best[0], "exhaustive", {
        "alignment_error": best[1], "empty_error": empty_err, "epsilon": float(epsilon),
        "converged": bool(best[1] <= epsilon)})


def distill(model, ds, proxies, epochs=200, lr=1e-3, batch_size=32, seed=0):
    """Second-stage encoder on proxy vectors trained to match the full embeddings.

    Returns a new model whose encoder reads only the proxy slots and whose
    fusion heads are copied from ``model``.
    """
    from .model import Encoder, FrictionModel
    from dataclasses import replace as dc_replace

    idx = list(getattr(proxies, "indices", proxies))
    al = _Aligner(model, ds)
    rng = np.random.default_rng(seed)
    enc = Encoder(dc_replace(model.encoder.config, input_len=len(idx)), rng)
    values, mask = al.values[:, idx], al.mask[:, idx]
    rows = np.nonzero(mask.reshape(len(values), -1).any(axis=1))[0]
    if rows.size == 0:
        raise DomainError("no material has an observed proxy entry")
    params = list(enc.params.values())
    state = AdamState.zeros(params)
    for _ in range(epochs):
        order = rng.permutation(rows)
        for start in range(0, len(order), batch_size):
            b = order[start:start + batch_size]
            diff = ad.sub(enc(values[b], mask[b]), Tensor(al.full[b]))
            loss = ad.tsum(ad.square(diff))
            adam_step(params, ad.grad_of(loss, params), state, lr)
    out = FrictionModel(enc, model.fusion, None, model.input_channels, idx, model.seed,
                        dict(model.meta, distilled=True))
    with no_grad():
        z = enc(values, mask, allow_empty=True).data
    out.meta["distill_error"] = float(((z - al.full) ** 2).sum())
    return out
