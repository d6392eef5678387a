"""Command line entry point: ``tribolens <command> ...``.

Every command takes ``--seed``, ``--config`` and ``--out`` and writes a
``run_manifest.json`` into ``--out`` once it has succeeded. Failures print a
JSON object on stderr and exit with 2 (bad input), 3 (numeric failure) or
4 (search did not converge).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (FrictionDataset, MaterialLibrary, Split, load_dataset, save_dataset,
                      split as make_split, symmetrize, write_matrix_csv)
from .errors import NotConvergedError, SchemaError, TriboError
from .measurement import read_trials_csv, summarize_trials
from .model import FrictionModel, ModelConfig, predict_pair
from .proxy import ProxySet, select_mask_opt, select_rrqr
from .spectral import eig_sym, effective_rank, pca_project, retention_curve, retention_size
from .synthgen import FABRIC_LAYOUT, SynthSpec, gen_blocks
from .training import (TrainConfig, cross_validate, evaluate, fit_split, metrics_from_rows,
                       predictions_table, transfer_map)


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_config(path):
    """``{"train": {...}, "model": {...}}`` JSON; both sections optional."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict) or set(cfg) - {"train", "model", "synth"}:
        raise SchemaError("config must be an object with optional train/model/synth sections")
    return cfg


class Run:
    """Collects inputs and outputs of one command for its manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.inputs, self.outputs = [], []
        self.started = time.perf_counter()
        self.config = load_config(getattr(args, "config", None))

    def input(self, path):
        self.inputs.append(str(path))
        return path

    def write(self, name, text):
        path = self.out / name
        write_atomic(path, text)
        self.outputs.append(str(path))
        return path

    def record(self, path):
        self.outputs.append(str(path))

    def train_config(self, **override):
        cfg = dict(self.config.get("train", {}))
        cfg.setdefault("seed", self.args.seed)
        cfg.update({k: v for k, v in override.items() if v is not None})
        return TrainConfig.from_dict(cfg)

    def model_config(self, **override):
        cfg = dict(self.config.get("model", {}))
        cfg.update({k: v for k, v in override.items() if v is not None})
        return ModelConfig.from_dict(cfg)

    def finish(self):
        params = {k: v for k, v in vars(self.args).items() if k != "func"}
        blob = json.dumps({"args": params, "config": self.config}, sort_keys=True, default=str)
        manifest = {
            "command": self.args.command,
            "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
            "seed": self.args.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "tool_version": __version__,
            "wall_time_s": round(time.perf_counter() - self.started, 3),
        }
        write_atomic(self.out / "run_manifest.json", dump_json(manifest))


# -- commands --------------------------------------------------------------------

def cmd_ingest(run):
    a = run.args
    trials = read_trials_csv(run.input(a.trials))
    summary = summarize_trials(trials)
    names = []
    for (block, surface, _, _) in summary:
        for m in (block, surface):
            if m not in names:
                names.append(m)
    classes = None
    if a.classes:
        table = {}
        with open(run.input(a.classes), newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                table[row["material"].strip()] = row["class"].strip()
        classes = [table.get(m, "other") for m in names]
    channels = []
    for (_, _, regime, orient) in summary:
        label = regime if orient == "none" else f"{regime}/{orient}"
        if label not in channels:
            channels.append(label)
    n = len(names)
    values = np.zeros((n, n, len(channels)))
    mask = np.zeros_like(values, dtype=bool)
    rows = ["block,surface,regime,orientation,mean,std,count"]
    for (block, surface, regime, orient), (mean, std, count) in summary.items():
        c = channels.index(regime if orient == "none" else f"{regime}/{orient}")
        i, j = names.index(block), names.index(surface)
        values[i, j, c], mask[i, j, c] = mean, True
        rows.append(f"{block},{surface},{regime},{orient},{float(mean)!r},{float(std)!r},{count}")
    ds = FrictionDataset(MaterialLibrary(names, classes), channels, values, mask, a.mu_max)
    if not a.no_symmetrize:
        ds = symmetrize(ds)
    manifest = save_dataset(ds, run.out, a.stem)
    run.record(manifest)
    run.write("trial_summary.csv", "\n".join(rows) + "\n")
    print(manifest)


def cmd_spectrum(run):
    a = run.args
    ds = load_dataset(run.input(a.data))
    from .proxy import selection_matrix
    F, comp_rank = selection_matrix(ds, a.channel, a.impute, a.retention[-1], a.mode)
    spec = eig_sym(F)
    energy = retention_curve(spec, "energy")
    absc = retention_curve(spec, "abs")
    lines = ["index,eigenvalue,cumulative_energy,cumulative_abs"]
    for i, lam in enumerate(spec.eigenvalues):
        lines.append(f"{i},{float(lam)!r},{float(energy[i])!r},{float(absc[i])!r}")
    run.write("spectrum.csv", "\n".join(lines) + "\n")
    report = {
        "channel": ds.channels[ds.channel_index(a.channel)],
        "effective_rank": effective_rank(spec, a.tau_rel),
        "tau_rel": a.tau_rel,
        "mode": a.mode,
        "imputation": a.impute,
        "retention_sizes": {str(r): retention_size(spec, r, a.mode) for r in a.retention},
    }
    run.write("spectrum.json", dump_json(report))
    print(dump_json(report), end="")


def _load_models(path):
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("model_*.json"))
        if not files:
            raise SchemaError(f"no model checkpoints in {path}")
        return [FrictionModel.load(f) for f in files], path
    return [FrictionModel.load(path)], path.parent


def _load_split(path):
    try:
        return Split.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise SchemaError(f"cannot read split {path}: {exc}") from None


def _visible(ds, sp):
    pairs = sp.train
    reveal = sp.info.get("reveal")
    if reveal:
        pairs = np.concatenate([pairs, np.asarray(reveal, dtype=np.intp).reshape(-1, 2)])
    return ds.restrict_to_pairs(pairs)


def cmd_select_proxies(run):
    a = run.args
    ds = load_dataset(run.input(a.data))
    if a.split:
        ds = _visible(ds, _load_split(run.input(a.split)))
    if a.method == "rrqr":
        ps = select_rrqr(ds, a.channel, a.retention, a.mode, a.k, a.impute)
    else:
        if not a.model:
            raise SchemaError("--method mask-opt needs --model (trained on full vectors)")
        models, _ = _load_models(run.input(a.model))
        if a.epsilon is None and a.relative_epsilon is None:
            raise SchemaError("--method mask-opt needs --epsilon or --relative-epsilon")
        ps = select_mask_opt(models[0], ds, a.epsilon, a.k_max, a.relative_epsilon)
    ps.diagnostics["names"] = [ds.library.names[i] for i in ps.indices]
    run.write("proxies.json", dump_json(ps.to_json()))
    print(dump_json(ps.to_json()), end="")
    if ps.method == "mask-opt" and not ps.diagnostics["converged"]:
        run.finish()
        raise NotConvergedError(
            f"alignment tolerance not met with {len(ps)} proxies "
            f"(error {ps.diagnostics['alignment_error']:.6g})")


def _channels_arg(ds, text):
    if not text:
        return None
    chans = [c.strip() for c in text.split(",") if c.strip()]
    for c in chans:
        ds.channel_index(c)
    return chans


def cmd_train(run):
    a = run.args
    ds = load_dataset(run.input(a.data))
    cfg = run.train_config(max_epochs=a.epochs, seed=a.seed)
    mcfg = run.model_config(encoder=a.encoder)
    proxies = ProxySet.load(run.input(a.proxies)).validate(ds.n) if a.proxies else None
    if a.split:
        sp = _load_split(run.input(a.split))
    else:
        sp = make_split(ds, a.scheme, cfg.seed, k=a.k, fold=a.fold, material=a.material,
                        classes=tuple(a.classes.split(",")))
    fit = fit_split(ds, sp, cfg, mcfg, proxies and proxies.indices,
                    _channels_arg(ds, a.channels), a.ensemble)
    out_split = fit.split
    if fit.reveal is not None:
        out_split.info["reveal"] = fit.reveal.tolist()
    run.write("split.json", dump_json(out_split.to_json()))
    for i, m in enumerate(fit.models):
        run.record(m.save(run.out / f"model_{i}"))
    for i, rep in enumerate(fit.reports):
        run.write(f"history_{i}.csv", rep.history_csv())
    run.write("train_report.json", dump_json([r.to_dict() for r in fit.reports]))
    print(run.out)


def cmd_evaluate(run):
    a = run.args
    ds = load_dataset(run.input(a.data))
    models, mdir = _load_models(run.input(a.model))
    if a.scheme:
        first = models[0]
        cfg = TrainConfig.from_dict({**first.meta.get("train_config", {}), "seed": a.seed})
        if a.epochs is not None:
            cfg.max_epochs = a.epochs
        mcfg = ModelConfig.from_dict(first.meta.get("model_config", {}))
        materials = a.materials.split(",") if a.materials else None
        result = cross_validate(ds, a.scheme, cfg, mcfg, first.proxies, first.channels,
                                len(models), a.k, materials, tuple(a.classes.split(",")))
        run.write("metrics.json", dump_json(result))
        print(dump_json(result["pooled"]), end="")
        return
    sp = _load_split(run.input(a.split or mdir / "split.json"))
    input_ds = _visible(ds, sp)
    cmap = transfer_map(models[0].channels) if a.transfer else None
    rows = predictions_table(models, input_ds, ds, sp.test, cmap)
    hetero = all(m.heteroscedastic for m in models)
    metrics = metrics_from_rows(rows, hetero, len(models) > 1)
    if cmap:
        metrics["transfer"] = cmap
    lines = ["a,b,channel,target,mean,aleatoric_var,epistemic_var"]
    for i, j, ch, y, mu, al, ep in rows:
        lines.append(f"{ds.library.names[i]},{ds.library.names[j]},{ch},{float(y)!r},{float(mu)!r},{float(al)!r},{float(ep)!r}")
    run.write("predictions.csv", "\n".join(lines) + "\n")
    run.write("metrics.json", dump_json(metrics))
    print(dump_json(metrics["overall"]), end="")


def cmd_predict(run):
    a = run.args
    ds = load_dataset(run.input(a.data))
    models, mdir = _load_models(run.input(a.model))
    split_path = Path(a.split) if a.split else mdir / "split.json"
    input_ds = _visible(ds, _load_split(run.input(split_path))) if split_path.exists() else ds
    channel = a.channel or models[0].channels[0]
    if channel not in models[0].channels:
        raise SchemaError(f"model does not predict channel {channel!r}")
    mean, alea, epi = predict_pair(models, input_ds, a.a, a.b, channel)
    out = {"a": a.a, "b": a.b, "channel": channel, "mean": mean, "aleatoric_var": alea,
           "epistemic_var": epi, "std": float(np.sqrt(alea + epi))}
    run.write("prediction.json", dump_json(out))
    print(dump_json(out), end="")


def cmd_export_embeddings(run):
    a = run.args
    ds = load_dataset(run.input(a.data))
    models, mdir = _load_models(run.input(a.model))
    split_path = Path(a.split) if a.split else mdir / "split.json"
    input_ds = _visible(ds, _load_split(run.input(split_path))) if split_path.exists() else ds
    Z = models[0].embeddings(input_ds)
    names, classes = ds.library.names, ds.library.classes
    if a.pca:
        proj = pca_project(Z, a.pca)
        cols = [f"pc{i + 1}" for i in range(a.pca)]
        Z = proj.coords
        run.write("pca.json", dump_json({"explained": proj.explained.tolist()}))
    else:
        cols = [f"z{i}" for i in range(Z.shape[1])]
    lines = [",".join(["material", *cols, "class"])]
    for i in range(ds.n):
        lines.append(",".join([names[i], *[repr(float(x)) for x in Z[i]], classes[i]]))
    run.write("embeddings.csv", "\n".join(lines) + "\n")
    print(run.out / "embeddings.csv")


def cmd_synth(run):
    a = run.args
    kw = dict(run.config.get("synth", {}))
    flags = {"n": a.n, "rank": a.rank, "noise_std": a.noise, "missing_rate": a.missing,
             "outlier_rate": a.outliers}
    kw.update({k: v for k, v in flags.items() if v is not None})
    if a.channels:
        kw["channels"] = [c.strip() for c in a.channels.split(",")]
    if a.layout == "fabric":
        kw["layout"] = FABRIC_LAYOUT
    kw["seed"] = a.seed
    spec = SynthSpec(**kw)
    ds, truth = gen_blocks(spec)
    manifest = save_dataset(ds, run.out, a.stem)
    run.record(manifest)
    files = {}
    full = np.ones((ds.n, ds.n), dtype=bool)
    for k, ch in enumerate(ds.channels):
        name = f"{a.stem}_truth_{ch.replace('/', '_')}.csv"
        write_matrix_csv(run.out / name, ds.library.names, truth.values[:, :, k], full)
        run.record(run.out / name)
        files[ch] = name
    side = {"spec": spec.to_dict(), "files": files, "info": truth.info}
    run.write(f"{a.stem}_truth.json", dump_json(side))
    print(manifest)


# -- parser ----------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--config", help="JSON config with optional train/model/synth sections")
    p.add_argument("--out", required=True, help="output directory")


def _split_flags(p):
    p.add_argument("--k", type=int, default=5, help="folds for kfold")
    p.add_argument("--classes", default="knit,woven",
                   help="class pair withheld by leave-block-out (default knit,woven)")


def build_parser():
    ap = argparse.ArgumentParser(prog="tribolens", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"tribolens {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="aggregate tribometer trials into a dataset")
    _common(p)
    p.add_argument("--trials", required=True, help="trial CSV")
    p.add_argument("--classes", help="CSV with material,class columns")
    p.add_argument("--mu-max", type=float, default=2.0)
    p.add_argument("--stem", default="friction")
    p.add_argument("--no-symmetrize", action="store_true",
                   help="keep block/surface orientation as measured")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("spectrum", help="eigenvalues, effective rank, retention sizes")
    _common(p)
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.add_argument("--channel")
    p.add_argument("--retention", type=float, nargs="+", default=[0.95, 0.99, 0.995, 0.999])
    p.add_argument("--mode", choices=("energy", "abs"), default="energy")
    p.add_argument("--tau-rel", type=float, default=0.01)
    p.add_argument("--impute", choices=("lowrank", "mean"), default="lowrank")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("select-proxies", help="choose a proxy set")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("rrqr", "mask-opt"), default="rrqr")
    p.add_argument("--channel")
    p.add_argument("--retention", type=float, default=0.999)
    p.add_argument("--mode", choices=("energy", "abs"), default="energy")
    p.add_argument("--impute", choices=("lowrank", "mean"), default="lowrank")
    p.add_argument("--k", type=int, help="fixed RRQR budget (overrides --retention)")
    p.add_argument("--model", help="checkpoint or training directory (mask-opt)")
    p.add_argument("--split", help="only use the pairs visible under this split")
    p.add_argument("--epsilon", type=float, help="absolute alignment tolerance")
    p.add_argument("--relative-epsilon", type=float,
                   help="tolerance as a fraction of the empty-mask alignment error")
    p.add_argument("--k-max", type=int)
    p.set_defaults(func=cmd_select_proxies)

    p = sub.add_parser("train", help="train a model or ensemble")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--proxies", help="proxy set JSON; trains on proxy vectors")
    p.add_argument("--split", help="split JSON (default: drawn with --scheme)")
    p.add_argument("--scheme", choices=("random", "kfold", "loom", "leave-block-out"),
                   default="random")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--material", help="held-out material for loom")
    _split_flags(p)
    p.add_argument("--channels", help="comma-separated output channels")
    p.add_argument("--encoder", choices=("attention", "mlp"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--ensemble", type=int, default=1, help="number of members")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a trained model or cross-validate")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="training directory or checkpoint")
    p.add_argument("--split", help="split JSON (default: the training split)")
    p.add_argument("--scheme", choices=("kfold", "loom", "leave-block-out"),
                   help="retrain per fold with the model's configuration")
    _split_flags(p)
    p.add_argument("--materials", help="comma-separated materials to hold out (loom)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--transfer", action="store_true",
                   help="score static-channel predictions against kinetic targets")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="predict one material pair")
    _common(p)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split")
    p.add_argument("--channel")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-embeddings", help="write material embeddings as CSV")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split")
    p.add_argument("--pca", type=int, help="project onto this many principal axes")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--missing", type=float)
    p.add_argument("--outliers", type=float)
    p.add_argument("--channels", help="comma-separated, e.g. static,kinetic")
    p.add_argument("--layout", choices=("none", "fabric"), default="none",
                   help="fabric: 12 knit / 18 woven / 10 non-fabric block layout")
    p.add_argument("--stem", default="friction")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        run = Run(args)
        args.func(run)
        run.finish()
        return 0
    except TriboError as exc:
        err = {"error": exc.kind, "type": type(exc).__name__, "message": str(exc),
               "exit_code": exc.exit_code}
        print(json.dumps(err), file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        err = {"error": "schema", "type": type(exc).__name__, "message": str(exc),
               "exit_code": 2}
        print(json.dumps(err), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
