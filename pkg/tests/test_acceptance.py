"""Acceptance criteria, one test each.

Every test prints a ``[PASS]``/``[FAIL]`` line with the measured numbers
before asserting, so ``pytest -s`` (or the tee'd log) shows the outcome.
"""

import itertools
import json
import math
import time
import warnings

import numpy as np
import pytest

from tribolens import autodiff as ad
from tribolens.cli import main as cli_main
from tribolens.dataset import split
from tribolens.errors import MeasurementWarning
from tribolens.measurement import free_slide_time, kinetic_mu, static_mu
from tribolens.model import Encoder, EncoderConfig, FrictionModel, ModelConfig, fuse
from tribolens.proxy import select_mask_opt, select_rrqr
from tribolens.spectral import column_volume, projection_residual, rrqr_select
from tribolens.synthgen import SynthSpec, gen_lowrank
from tribolens.training import (TrainConfig, batch_parts, evaluate, loss_base,
                                loss_constraint, loss_latent, loss_nll, constraint_pairs,
                                proxy_protocol, train, train_ensemble, violation_rate)


def report(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- 1. gradient correctness ------------------------------------------------------

def _tiny_model(seed, channels=("static",)):
    cfg = ModelConfig(embed_dim=4, token_dim=8, layers=1, heads=2, ff_dim=8,
                      fusion_widths=(8,), decoder_widths=(6,))
    return FrictionModel.build(cfg, 6, channels, channels, None, 2.0, seed)


def _loss_fn(kind, model, values, mask, pairs, targets, tmask, weights):
    """Scalar loss of one kind on a fixed, uncorrupted batch."""
    mats, local = np.unique(pairs, return_inverse=True)
    local = local.reshape(pairs.shape)
    z = model.embed(values[mats], mask[mats])
    za, zb = ad.gather(z, local[:, 0], axis=0), ad.gather(z, local[:, 1], axis=0)
    mu, lv = model.fusion(za, zb)
    flat_v = values[mats].reshape(len(mats), -1)
    flat_m = mask[mats].reshape(len(mats), -1)
    if kind == "base":
        return loss_base(mu, targets, tmask, 0.9, 0.1, model.decoder(z), flat_v, flat_m)
    if kind == "nll":
        return loss_nll(mu, lv, targets, tmask, weights=weights)
    if kind == "latent":
        return loss_latent(model.decoder(z), flat_v, flat_m)
    return loss_constraint(mu, constraint_pairs(model.channels))


def test_ac1_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    h = 1e-5
    worst, checked = {}, {}
    for kind in ("base", "nll", "latent", "constraint"):
        channels = ("static", "kinetic") if kind == "constraint" else ("static",)
        C = len(channels)
        worst[kind], checked[kind] = 0.0, 0
        for point in range(20):
            model = _tiny_model(100 + point, channels)
            params = model.parameters()
            # moderate jitter around the init; larger jitter drives the variance
            # head into its clamp where loss ~1e3 and h=1e-5 roundoff dominates
            for p in params.values():
                p.data = p.data + rng.normal(0, 0.1, p.shape)
            values = rng.uniform(0.1, 1.0, (6, 6, C))
            mask = rng.random((6, 6, C)) < 0.8
            mask[:, 0] = True
            pairs = np.array([[0, 1], [2, 3], [1, 4], [5, 5], [3, 0]])
            targets = rng.uniform(0.1, 1.0, (5, C))
            tmask = np.ones((5, C), dtype=bool)
            weights = rng.uniform(0.05, 1.0, (5, C))
            loss = _loss_fn(kind, model, values, mask, pairs, targets, tmask, weights)
            names = list(params)
            grads = dict(zip(names, ad.grad_of(loss, list(params.values()))))
            # probe 8 coordinates of random parameters at this point
            for _ in range(8):
                name = names[rng.integers(len(names))]
                p = params[name]
                idx = tuple(rng.integers(s) for s in p.shape)
                old = p.data[idx]
                p.data[idx] = old + h
                up = float(_loss_fn(kind, model, values, mask, pairs, targets, tmask, weights).data)
                p.data[idx] = old - h
                dn = float(_loss_fn(kind, model, values, mask, pairs, targets, tmask, weights).data)
                p.data[idx] = old
                fd = (up - dn) / (2 * h)
                g = float(grads[name][idx])
                scale = max(abs(g), abs(fd))
                rel = abs(g - fd) / scale if scale > 0 else 0.0
                tol = 1e-6 if abs(g) > 1e-3 else 1e-4
                worst[kind] = max(worst[kind], rel / tol)
                checked[kind] += 1
    elapsed = time.perf_counter() - start
    ok = all(w <= 1.0 for w in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k}: {checked[k]} probes, worst err/tol {worst[k]:.3g}" for k in worst)
    report("AC1 gradient correctness", ok, f"{detail}; {elapsed:.1f}s")


# -- 2. fusion symmetry and range ------------------------------------------------

def test_ac2_fusion_symmetry_and_range():
    rng = np.random.default_rng(2)
    model = FrictionModel.build(ModelConfig(), 10, ("static", "static/wf", "static/fw"),
                                ("static",), None, 2.0, 2)
    za = rng.normal(0, 3, (10_000, 16))
    zb = rng.normal(0, 3, (10_000, 16))
    with ad.no_grad():
        ab, _ = model.fusion(ad.Tensor(za), ad.Tensor(zb))
        ba, _ = model.fusion(ad.Tensor(zb), ad.Tensor(za))
    ab, ba = ab.data, ba.data
    sym = np.array_equal(ab[:, 0], ba[:, 0])
    swap = np.array_equal(ab[:, 1], ba[:, 2]) and np.array_equal(ab[:, 2], ba[:, 1])
    inside = bool((ab > 0).all() and (ab < 2.0).all())
    report("AC2 fusion symmetry/range", sym and swap and inside,
           f"symmetric bit-exact={sym}, wf/fw swap bit-exact={swap}, "
           f"range [{ab.min():.4g}, {ab.max():.4g}] strictly inside (0, 2)={inside}")


# -- 3. mask invariance ----------------------------------------------------------

def test_ac3_mask_invariance():
    rng = np.random.default_rng(3)
    cases, same = 0, 0
    for variant in ("attention", "mlp"):
        enc = Encoder(EncoderConfig(variant=variant, input_len=12, n_channels=2), rng)
        for _ in range(5):
            v = rng.uniform(0, 1, (100, 12, 2))
            m = rng.random((100, 12, 2)) < rng.uniform(0.2, 0.9)
            m[np.arange(100), rng.integers(12, size=100), 0] = True
            junk = np.where(m, v, rng.normal(0, 1e6, v.shape))
            junk[~m & (rng.random(v.shape) < 0.1)] = np.nan
            with ad.no_grad():
                z0 = enc(np.where(m, v, 0.0), m).data
                z1 = enc(junk, m).data
            same += int(np.sum([np.array_equal(a, b) for a, b in zip(z0, z1)]))
            cases += 100
    report("AC3 mask invariance", same == cases == 1000,
           f"{same}/{cases} encodings bit-identical under masked-value perturbation")


# -- 4. synthetic recovery -------------------------------------------------------

def test_ac4_synthetic_recovery():
    ds, _ = gen_lowrank(SynthSpec(n=30, rank=3, noise_std=0.01, missing_rate=0.1, seed=0))
    sp = split(ds, "random", 0)
    start = time.perf_counter()
    model, rep = train(ds, TrainConfig(max_epochs=200, patience=200, seed=0), ModelConfig(), sp)
    elapsed = time.perf_counter() - start
    r2 = evaluate(model, ds.restrict_to_pairs(sp.train), ds, sp.test)["overall"]["r2"]
    report("AC4 synthetic recovery", r2 >= 0.95 and rep.epochs_run <= 200 and elapsed < 300,
           f"test R2={r2:.4f} (>= 0.95), epochs={rep.epochs_run}, best={rep.best_epoch}, "
           f"{elapsed:.1f}s (< 300s), split sizes {len(sp.train)}/{len(sp.val)}/{len(sp.test)}")


# -- 5. proxy efficiency ---------------------------------------------------------

RANK = 3


def test_ac5_proxy_efficiency():
    rrqr_k, mask_k, converged, r2_proxy = [], [], [], None
    for seed in range(10):
        ds, _ = gen_lowrank(SynthSpec(n=30, rank=RANK, noise_std=0.01, missing_rate=0.1,
                                      seed=seed))
        sp = split(ds, "random", seed)
        visible = ds.restrict_to_pairs(sp.train)
        rr = select_rrqr(visible, retention=0.999)
        rrqr_k.append(len(rr))
        full, _ = train(ds, TrainConfig(max_epochs=60, patience=60, seed=seed, mask_rate=0.3),
                        ModelConfig(), sp)
        ps = select_mask_opt(full, visible, relative_epsilon=0.05, k_max=RANK + 1)
        mask_k.append(len(ps))
        converged.append(ps.diagnostics["converged"])
        if seed == 0:
            sp2, reveal = proxy_protocol(ds, sp, rr.indices)
            pm, _ = train(ds, TrainConfig(max_epochs=200, patience=200, seed=0), ModelConfig(),
                          sp2, proxies=rr.indices, reveal_pairs=reveal)
            inp = ds.restrict_to_pairs(np.concatenate([sp2.train, reveal]))
            r2_proxy = evaluate(pm, inp, ds, sp2.test)["overall"]["r2"]
        print(f"  seed {seed}: rrqr k={len(rr)} {rr.indices}, mask-opt k={len(ps)} {ps.indices} "
              f"trace={[round(t / ps.diagnostics['empty_error'], 4) for t in ps.diagnostics['trace']]}")
    fewer = sum(m <= r for m, r in zip(mask_k, rrqr_k))
    ok_rrqr = max(rrqr_k) <= RANK + 2
    ok_mask = all(converged) and max(mask_k) <= RANK + 1
    ok = ok_rrqr and r2_proxy >= 0.90 and ok_mask and fewer >= 8
    report("AC5 proxy efficiency", ok,
           f"rrqr k={rrqr_k} (<= {RANK + 2}); proxy-only test R2={r2_proxy:.4f} (>= 0.90); "
           f"mask-opt k={mask_k}, within 5% of empty-mask error on all seeds={all(converged)} "
           f"(k <= {RANK + 1}); mask-opt k <= rrqr k on {fewer}/10 seeds (>= 8)")


# -- 6. RRQR oracle equivalence --------------------------------------------------

def test_ac6_rrqr_oracle():
    start = time.perf_counter()
    worst_res, worst_ratio = 0.0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(6, 3))
        F = A @ np.diag(rng.uniform(0.5, 2.0, 3)) @ A.T
        cols = rrqr_select(F, 3).indices
        worst_res = max(worst_res, projection_residual(F, cols))
        best = max(column_volume(F, c) for c in itertools.combinations(range(6), 3))
        worst_ratio = max(worst_ratio, best / column_volume(F, cols))
    elapsed = time.perf_counter() - start
    ok = worst_res <= 1e-8 and worst_ratio <= 2.0 ** 3 and elapsed < 60
    report("AC6 RRQR oracle", ok,
           f"max projection residual {worst_res:.3g} (<= 1e-8), "
           f"max best/selected volume ratio {worst_ratio:.4f} (<= 8) over 20 seeds; {elapsed:.2f}s")


# -- 7. robust loss benefit ------------------------------------------------------

def test_ac7_robust_loss_benefit():
    wins, rows = 0, []
    for seed in range(10):
        ds, truth = gen_lowrank(SynthSpec(seed=seed, outlier_rate=0.1))
        sp = split(ds, "random", seed)
        visible = ds.restrict_to_pairs(sp.train)
        target = truth.values[sp.test[:, 0], sp.test[:, 1]]
        mse = []
        for robust in (True, False):
            cfg = TrainConfig(max_epochs=60, patience=60, seed=seed, robust_weights=robust,
                              alpha=0.1, beta=0.9, gamma=1.0)
            model, _ = train(ds, cfg, ModelConfig(), sp)
            mu, _ = model.predict_pairs(visible, sp.test)
            mse.append(float(((mu - target) ** 2).mean()))
        wins += mse[0] < mse[1]
        rows.append(f"{seed}:{mse[0]:.4g}/{mse[1]:.4g}")
    report("AC7 robust NLL benefit", wins >= 8,
           f"weighted beats unweighted on {wins}/10 seeds (>= 8); held-out MSE w/unw "
           + " ".join(rows))


# -- 8. calibration --------------------------------------------------------------

def test_ac8_calibration():
    ds, _ = gen_lowrank(SynthSpec(n=60, noise_std=0.05, seed=0))
    sp = split(ds, "random", 0, fractions=(0.5, 0.1, 0.4))
    cfg = TrainConfig(max_epochs=100, patience=20, seed=0, robust_weights=False)
    ens, _ = train_ensemble(ds, cfg, ModelConfig(encoder="mlp"), 5, sp)
    m = evaluate(ens, ds.restrict_to_pairs(sp.train), ds, sp.test)["overall"]
    c1, c2 = m["coverage_1sigma"], m["coverage_2sigma"]
    ok = m["n"] >= 500 and 0.55 <= c1 <= 0.80 and 0.88 <= c2 <= 0.99
    report("AC8 calibration", ok,
           f"{m['n']} test pairs (>= 500); 1-sigma coverage {c1:.3f} in [0.55, 0.80]; "
           f"2-sigma coverage {c2:.3f} in [0.88, 0.99]")


# -- 9. physics formulas ---------------------------------------------------------

def test_ac9_physics_formulas():
    tan30cos15 = math.tan(math.pi / 6) * math.cos(math.pi / 12)
    with warnings.catch_warnings():
        warnings.simplefilter("error", MeasurementWarning)
        cases = {
            "static(45,0)=1": (static_mu(45, 0), 1.0),
            "static(0,15)=0": (static_mu(0, 15), 0.0),
            "static(30,15)": (static_mu(30, 15), tan30cos15),
            "kinetic t->inf": (kinetic_mu(30, 1e9, 0.3, 9.81, 15), tan30cos15),
            "kinetic free slide": (kinetic_mu(30, free_slide_time(30, 0.3, 9.81), 0.3, 9.81, 0),
                                   0.0),
        }
    t_star = math.sqrt(2 * 0.3 / (9.81 * math.sin(math.pi / 6)))
    cases["free slide time"] = (free_slide_time(30, 0.3, 9.81), t_star)
    errs = {k: abs(a - b) for k, (a, b) in cases.items()}
    ok = max(errs.values()) <= 1e-9 and abs(t_star - 0.34975) < 5e-5
    report("AC9 physics formulas", ok,
           ", ".join(f"{k} err={e:.2g}" for k, e in errs.items()) + f"; t*={t_star:.5f}")


# -- 10. multi-task constraint ---------------------------------------------------

def test_ac10_constraint_violation_rate():
    spec = SynthSpec(channels=("static", "kinetic"), kinetic_ratio=0.9, kinetic_noise=0.01,
                     seed=0)
    ds, truth = gen_lowrank(spec)
    s, k = truth.values[:, :, 0], truth.values[:, :, 1]
    sp = split(ds, "random", 0)
    # a 10% static/kinetic gap needs a firmer hinge than the 0.1 default
    lam = 1.0
    model, _ = train(ds, TrainConfig(max_epochs=60, patience=60, seed=0, constraint_weight=lam),
                     ModelConfig(), sp)
    visible = ds.restrict_to_pairs(sp.train)
    rate = violation_rate(model, visible, sp.test)
    per = evaluate(model, visible, ds, sp.test)["per_channel"]
    report("AC10 static/kinetic constraint", rate < 0.05 and bool((k <= s).all()),
           f"lambda_c={lam}: test violation rate {rate:.4f} (< 0.05) over {len(sp.test)} pairs; "
           f"R2 static {per['static']['r2']:.3f}, kinetic {per['kinetic']['r2']:.3f}")


# -- 11. determinism -------------------------------------------------------------

def _pipeline(root):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({"train": {"max_epochs": 15}, "model": {"layers": 2}}))
    steps = [
        ["synth", "--seed", "11", "--n", "24", "--out", str(root / "data")],
        ["select-proxies", "--seed", "11", "--data", str(root / "data/friction.json"),
         "--out", str(root / "proxies")],
        ["train", "--seed", "11", "--config", str(cfg), "--data", str(root / "data/friction.json"),
         "--proxies", str(root / "proxies/proxies.json"), "--ensemble", "2",
         "--out", str(root / "model")],
        ["evaluate", "--seed", "11", "--data", str(root / "data/friction.json"),
         "--model", str(root / "model"), "--out", str(root / "eval")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return (root / "eval/metrics.json").read_bytes()


def test_ac11_pipeline_determinism(tmp_path):
    a = _pipeline(tmp_path / "run_a")
    b = _pipeline(tmp_path / "run_b")
    r2 = json.loads(a)["overall"]["r2"]
    report("AC11 pipeline determinism", a == b,
           f"metrics.json byte-identical across replays={a == b} ({len(a)} bytes, R2={r2:.4f})")
