"""Command-line entry point: ``hopfadv <command> [flags]``.

Every command writes its artifacts plus ``manifest.json`` into ``--out-dir``
and prints a JSON summary on stdout. Exit codes: 0 success, 2 usage error,
3 domain error (an error JSON is printed on stderr and saved as
``error.json``), 4 when ``attack`` produces no accepted example.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import attacks, experiment, hopf, invariant, io, network, viz
from .errors import HopfError

log = logging.getLogger("hopfadv")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DOMAIN = 3
EXIT_NOT_ACCEPTED = 4

PAPER_H = (0.5, 2.0, 3.2)
# sparse attack settings used by repro: 7 sites, F=0.5; CR=0.3 converged fastest in tuning
DEA_PAPER = attacks.DeaConfig(population=200, pixels=7, mutation=0.5, crossover=0.3, iterations=400)
DEA_FAST = attacks.DeaConfig(population=20, pixels=7, mutation=0.5, crossover=0.3, iterations=5)
FIG4_TARGETS = {
    0.5: ((-1.0, -1.0, 0.0), (0.0, 1.0, -1.0)),
    2.0: ((1.0, 0.0, -1.0), (-1.0, 0.0, -1.0)),
    3.2: ((0.0, 1.0, 0.0), (0.0, -1.0, 0.0)),
}


class RunContext:
    """Output directory, collected artifact paths and manifest writing for one command."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.started = datetime.now(timezone.utc)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def json(self, name: str, obj) -> Path:
        p = io.write_json(self.path(name), obj)
        self.outputs.append(p)
        return p

    def csv(self, name: str, header, rows) -> Path:
        p = io.write_csv(self.path(name), header, rows)
        self.outputs.append(p)
        return p

    def table(self, stem: str, header, rows) -> Path:
        """Write a table in the format chosen by ``--format``."""
        if self.args.format == "csv":
            return self.csv(stem + ".csv", header, rows)
        return self.json(stem + ".json", [dict(zip(header, r)) for r in rows])

    def add(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def manifest(self) -> Path:
        flags = {k: v for k, v in vars(self.args).items() if k not in ("func",)}
        doc = io.manifest(self.args.command, flags, self.args.seed, self.outputs, self.started)
        return io.write_json(self.path("manifest.json"), doc)


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else int(args.seed)


def _vector(text: str) -> tuple[float, float, float]:
    parts = [float(v) for v in text.replace(" ", "").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _split(text: str):
    if text == "paper":
        return hopf.PAPER_SPLIT
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("split needs three comma-separated entries")
    if all(p.strip().isdigit() for p in parts):
        return tuple(int(p) for p in parts)
    return tuple(float(p) for p in parts)


def _field_input(args) -> hopf.BlochField:
    if getattr(args, "field", None):
        return io.load_field(args.field)
    if getattr(args, "h", None) is None:
        raise ValueError("give either --field or --h")
    return hopf.sample_field(args.grid, args.h)


def _finite(x):
    """``None`` for NaN/inf so tables stay serializable."""
    return x if x is None or np.isfinite(x) else None


def _emit(obj) -> None:
    print(io.encode(obj))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, ctx: RunContext) -> int:
    seed = _seed(args, hopf.PAPER_DATASET_SEED)
    train, val, test = hopf.generate_dataset(args.count, (args.h_min, args.h_max), hopf.PAPER_EXCLUSIONS,
                                             args.split, seed, args.grid)
    for name, part in (("train", train), ("val", val), ("test", test)):
        ctx.add(io.save_dataset(ctx.path(f"{name}.json"), part))
    counts = {name: len(part) for name, part in (("train", train), ("val", val), ("test", test))}
    _emit({"sizes": counts, "seed": seed})
    return EXIT_OK


def _load_split(data_dir: Path, name: str):
    return io.load_dataset(Path(data_dir) / f"{name}.json")


def cmd_train(args, ctx: RunContext) -> int:
    cfg = network.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                              rho=args.rho, seed=_seed(args))
    train = _load_split(args.data_dir, "train")
    val = _load_split(args.data_dir, "val")

    def progress(epoch, hist):
        log.info("epoch %d: train acc %.4f val acc %.4f", epoch + 1, hist.train_accuracy[-1], hist.val_accuracy[-1])

    model, hist = network.train(train, val, cfg, progress=progress)
    ctx.add(io.save_model(ctx.path("model.json"), model, {"train_config": cfg.__dict__, "best_epoch": hist.best_epoch + 1}))
    rows = [(i + 1, hist.train_loss[i], hist.train_accuracy[i], hist.val_loss[i], hist.val_accuracy[i])
            for i in range(len(hist.train_loss))]
    ctx.table("history", ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"], rows)
    _emit({"best_epoch": hist.best_epoch + 1, "val_accuracy": hist.val_accuracy[hist.best_epoch]})
    return EXIT_OK


def cmd_eval(args, ctx: RunContext) -> int:
    model = io.load_model(args.model)
    data = io.load_dataset(args.data)
    ev = network.evaluate(model, data)
    labels = [lab.chi for lab in hopf.PhaseLabel]
    ctx.json("metrics.json", {"accuracy": ev.accuracy, "confusion": ev.confusion.tolist(), "labels_chi": labels})
    rows = [(h, hopf.label_of(h).chi, hopf.PhaseLabel(int(np.argmax(p))).chi, *p) for h, p in zip(ev.h, ev.probabilities)]
    ctx.table("predictions", ["h", "label", "predicted", "p_chi0", "p_chi1", "p_chim2"], rows)
    _emit({"accuracy": ev.accuracy, "confusion": ev.confusion.tolist()})
    return EXIT_OK


def cmd_classify(args, ctx: RunContext) -> int:
    model = io.load_model(args.model)
    field = _field_input(args)
    p = network.forward(model, field)
    out = {"probabilities": {str(lab.chi): float(p[int(lab)]) for lab in hopf.PhaseLabel},
           "predicted_chi": hopf.PhaseLabel(int(np.argmax(p))).chi}
    ctx.json("classification.json", out)
    _emit(out)
    return EXIT_OK


def _run_attack(args, model, field, label) -> attacks.AdversarialExample | None:
    if args.method == "fgsm":
        raw = attacks.fgsm(model, field, label, args.epsilon)
        return attacks._finish(model, field, label, raw.data, "fgsm", {"epsilon": args.epsilon})
    if args.method == "dea":
        cfg = attacks.DeaConfig(population=args.pop, pixels=args.pixels, mutation=args.mutf, crossover=args.cross,
                                iterations=args.iters, seed=_seed(args))
        return attacks.dea(model, field, label, cfg, stop=args.stop)
    if args.search:
        ex, tried = attacks.search(model, field, label, methods=(args.method,), robust_trials=args.robust_trials,
                                   seed=_seed(args))
        return ex if ex is not None else (tried[-1] if tried else None)
    budget = attacks.AttackBudget(epsilon=args.epsilon, iterations=args.iters, gamma=args.gamma, mu=args.mu)
    return (attacks.pgd if args.method == "pgd" else attacks.mim)(model, field, label, budget)


def cmd_attack(args, ctx: RunContext) -> int:
    model = io.load_model(args.model)
    field = _field_input(args)
    h = field.h if field.h is not None else args.h
    if h is None:
        raise ValueError("the parent label needs h (store it in the field or pass --h)")
    label = hopf.label_of(h)
    ex = _run_attack(args, model, field, label)
    if ex.hopf_parent is None:
        attacks.attach_invariant(ex, field)
    out = Path(args.out) if args.out else ctx.path("adversarial.json")
    ctx.add(io.write_json(out, ex.to_dict()))
    summary = {k: v for k, v in ex.to_dict().items() if k != "field"}
    _emit(summary)
    return EXIT_OK if ex.accepted else EXIT_NOT_ACCEPTED


def cmd_hopf_index(args, ctx: RunContext) -> int:
    field = _field_input(args)
    t0 = time.perf_counter()
    res = invariant.hopf_index(field, staggered=not args.unstaggered)
    out = {**res.to_dict(), "n": field.n, "h": field.h, "seconds": time.perf_counter() - t0}
    ctx.json("hopf_index.json", out)
    _emit(out)
    return EXIT_OK


def _load_candidate(path) -> attacks.AdversarialExample:
    d = io.read_json(path)
    field = io.field_from_dict(d["field"])
    return attacks.AdversarialExample(
        field=field, parent_h=d.get("parent_h"), parent_label=hopf.PhaseLabel.from_chi(d["parent_label"]),
        method=d.get("method", "unknown"), params=d.get("params", {}),
        probabilities=np.asarray(d.get("probabilities", [np.nan] * 3)), seed=d.get("seed"),
        mean_fidelity=d.get("mean_fidelity"), changed_sites=d.get("changed_sites"),
        hopf_parent=d.get("hopf_parent"), hopf_adversarial=d.get("hopf_adversarial"))


def cmd_screen_noise(args, ctx: RunContext) -> int:
    model = io.load_model(args.model)
    cands = [_load_candidate(p) for p in args.candidates]
    ranked = attacks.screen_robustness(model, cands, trials=args.trials, repetitions=args.reps, seed=_seed(args),
                                       noise=not args.no_noise, workers=args.threads)
    rows = [(rank, str(args.candidates[cands.index(ex)]), ex.method, score) for rank, (ex, score) in enumerate(ranked)]
    ctx.table("screening", ["rank", "candidate", "method", "score"], rows)
    _emit([{"rank": r[0], "candidate": r[1], "score": r[3]} for r in rows])
    return EXIT_OK


def cmd_sim_experiment(args, ctx: RunContext) -> int:
    target = _field_input(args)
    seed = _seed(args)
    prepared = target
    prep_summary = None
    if not args.skip_passage:
        prep = experiment.prepare_field(hopf.BlochField(target.data / np.linalg.norm(target.data, axis=-1, keepdims=True),
                                                        target.h))
        prepared = prep.field
        prep_summary = {"min_fidelity": float(prep.fidelity.min()), "q_min": float(prep.q_min.min()),
                        "exact_sites": int(prep.exact.sum())}
    rec = experiment.tomography_round_trip(prepared, args.shots, seed=seed, noise=not args.no_noise)
    rec = experiment.Reconstruction(rec.field, experiment.fidelity(rec.field.data, target.data), rec.counts)
    out = Path(args.out) if args.out else ctx.path("reconstructed.json")
    ctx.add(io.save_field(out, hopf.BlochField(rec.field.data, target.h)))
    n = target.n
    idx = np.indices((n, n, n)).reshape(3, -1).T
    rows = [(int(i), int(j), int(k), float(f)) for (i, j, k), f in zip(idx, rec.fidelity.reshape(-1))]
    ctx.csv(args.csv or "fidelity.csv", ["ix", "iy", "iz", "fidelity"], rows)
    summary = {"mean_fidelity": rec.mean_fidelity, "median_fidelity": float(np.median(rec.fidelity)),
               "min_fidelity": float(rec.fidelity.min()), "shots": args.shots, "preparation": prep_summary}
    ctx.json("summary.json", summary)
    _emit(summary)
    return EXIT_OK


def cmd_fidelity(args, ctx: RunContext) -> int:
    a = io.load_field(args.a)
    b = io.load_field(args.b)
    if a.n != b.n:
        raise ValueError(f"grid sizes differ: {a.n} vs {b.n}")
    f = experiment.fidelity(a.data, b.data)
    out = {"mean": float(np.mean(f)), "min": float(np.min(f)), "median": float(np.median(f))}
    ctx.json("fidelity.json", out)
    _emit(out)
    return EXIT_OK


def export_viz(ctx: RunContext, field: hopf.BlochField, h: float, targets, resolution: int, eps: float,
               prefix: str = "") -> dict:
    ctx.csv(f"{prefix}textures.csv", ["kz", "kx", "ky", "sx", "sy", "sz"], viz.texture_rows(field))
    families = [viz.trace_preimage(h, t, resolution) for t in targets]
    all_torus, all_stereo, cloud_rows = [], [], []
    for fi, (t, fam) in enumerate(zip(targets, families)):
        all_torus.extend(fam)
        all_stereo.extend(viz.stereographic_curves(fam, h))
        try:
            pts = viz.preimage_points(h, resolution, t, eps)
            cloud_rows.extend((fi, *p, *viz.stereographic_map(p, h)) for p in pts)
        except HopfError:
            pass
    ctx.csv(f"{prefix}curves_torus.csv", ["curve_id", "order", "x", "y", "z"], viz.curve_rows(all_torus))
    ctx.csv(f"{prefix}curves_stereo.csv", ["curve_id", "order", "x", "y", "z"], viz.curve_rows(all_stereo))
    ctx.csv(f"{prefix}preimage_points.csv", ["target_id", "kx", "ky", "kz", "x", "y", "z"], cloud_rows)
    result = {"h": h, "targets": [list(viz._unit(t)) for t in targets], "resolution": resolution, "eps": eps,
              "loops_per_target": [len(f) for f in families]}
    if len(families) == 2:
        lk_t = viz.torus_linking_number(*families)
        sa, sb = viz.stereographic_curves(families[0], h), viz.stereographic_curves(families[1], h)
        lk_s = sum(viz.linking_number(x, y)[0] for x in sa for y in sb)
        result.update({"torus_linking": lk_t[1], "stereographic_linking": int(np.rint(lk_s)),
                       "stereographic_linking_raw": lk_s})
    ctx.json(f"{prefix}viz.json", result)
    return result


def cmd_export_viz(args, ctx: RunContext) -> int:
    field = _field_input(args)
    h = args.h if args.h is not None else field.h
    if h is None:
        raise ValueError("preimages need --h")
    targets = args.target or list(FIG4_TARGETS.get(h, FIG4_TARGETS[0.5]))
    result = export_viz(ctx, field, h, targets, args.resolution, args.eps)
    _emit(result)
    return EXIT_OK


# ---------------------------------------------------------------- repro


def cmd_repro(args, ctx: RunContext) -> int:
    """Full pipeline; ``--fast`` shrinks every stage for smoke runs."""
    seed = _seed(args, 0)
    fast = args.fast
    if fast:
        train, val, test = hopf.generate_dataset(count=300, split=(0.6, 0.2, 0.2), seed=seed)
        cfg = network.TrainConfig(epochs=args.epochs or 2, seed=seed)
    else:
        train, val, test = hopf.generate_dataset(seed=hopf.PAPER_DATASET_SEED)
        cfg = network.TrainConfig(epochs=args.epochs or 50, seed=seed)
    model, hist = network.train(train, val, cfg)
    ctx.add(io.save_model(ctx.path("model.json"), model))
    ev = network.evaluate(model, test)
    trials = 4 if fast else 100
    reps = experiment.PAPER_REPETITIONS
    rows = []
    for h in PAPER_H:
        field = hopf.sample_field(10, h)
        label = hopf.label_of(h)
        legit_p = network.forward(model, field)
        legit_chi = invariant.hopf_index(field).chi
        rows.append((h, "legitimate", "-", hopf.PhaseLabel(int(np.argmax(legit_p))).chi, *legit_p, legit_chi, 1.0, None))
        cands = []
        for method in ("mim", "pgd"):
            ex, _ = attacks.search(model, field, label, methods=(method,))
            if ex is not None:
                cands.append(ex)
        if h == 3.2:
            dcfg = DEA_FAST if fast else DEA_PAPER
            ex = attacks.dea(model, field, label, dataclasses.replace(dcfg, seed=seed), stop="accepted")
            if ex.accepted:
                cands.append(ex)
            else:
                # reported but never screened: only accepted examples are candidates
                ctx.json(f"adversarial_h{h}_dea_rejected.json", ex.to_dict())
                rows.append((h, "rejected", "dea", ex.predicted.chi, *ex.probabilities, _finite(ex.hopf_adversarial),
                             ex.mean_fidelity, None))
        ranked = attacks.screen_robustness(model, cands, trials=trials, repetitions=reps, seed=seed)
        for ex, score in ranked:
            ctx.json(f"adversarial_h{h}_{ex.method}.json", ex.to_dict())
            rows.append((h, "adversarial", ex.method, ex.predicted.chi, *ex.probabilities, ex.hopf_adversarial,
                         ex.mean_fidelity, score))
        if ranked:
            best = ranked[0][0]
            rec = experiment.tomography_round_trip(best.field, reps, seed=[seed, 99])
            p = network.forward(model, rec.field)
            rows.append((h, "adversarial-measured", best.method, hopf.PhaseLabel(int(np.argmax(p))).chi, *p,
                         invariant.hopf_index(rec.field).chi, rec.mean_fidelity, None))
    header = ["h", "kind", "method", "predicted_chi", "p_chi0", "p_chi1", "p_chim2", "hopf_index", "fidelity",
              "robustness"]
    ctx.table("summary", header, rows)
    viz_res = export_viz(ctx, hopf.sample_field(10, 0.5), 0.5, FIG4_TARGETS[0.5], 40 if fast else 80, 0.2, "viz_")
    out = {"test_accuracy": ev.accuracy, "best_epoch": hist.best_epoch + 1, "rows": len(rows),
           "torus_linking_h0.5": viz_res.get("torus_linking")}
    ctx.json("repro.json", out)
    _emit(out)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (command-specific default)")
    common.add_argument("--out-dir", default="out", help="directory for artifacts and manifest.json")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="format of tabular outputs")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap for data-parallel loops")
    common.add_argument("-v", "--verbose", action="store_true")

    field_src = argparse.ArgumentParser(add_help=False)
    field_src.add_argument("--field", help="BlochField JSON")
    field_src.add_argument("--h", type=float, help="mass parameter of an exact ground-state field")
    field_src.add_argument("--grid", type=int, default=10, help="grid size n for --h")

    # shared flags live on the subcommands only; a copy on the top-level parser
    # would be silently overwritten by the subcommand defaults
    p = argparse.ArgumentParser(prog="hopfadv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="generate labeled train/val/test fields")
    s.add_argument("--count", type=int, default=5000)
    s.add_argument("--h-min", type=float, default=-5.0)
    s.add_argument("--h-max", type=float, default=5.0)
    s.add_argument("--grid", type=int, default=10)
    s.add_argument("--split", type=_split, default=hopf.PAPER_SPLIT, help="'paper', three sizes or three fractions")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the classifier")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--rho", type=float, default=0.9)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix on a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("classify", parents=[common, field_src], help="class probabilities of one field")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("attack", parents=[common, field_src], help="craft an adversarial example")
    s.add_argument("--method", choices=("fgsm", "pgd", "mim", "dea"), required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out")
    s.add_argument("--epsilon", type=float, default=0.3)
    s.add_argument("--iters", type=int, default=10, help="attack iterations (DEA generations)")
    s.add_argument("--gamma", type=float, default=None, help="PGD box half-width (default epsilon)")
    s.add_argument("--mu", type=float, default=1.0)
    s.add_argument("--pop", type=int, default=100)
    s.add_argument("--pixels", type=int, default=7)
    s.add_argument("--mutf", type=float, default=0.5)
    s.add_argument("--cross", type=float, default=0.9)
    s.add_argument("--stop", choices=("fooled", "accepted"), default=None, help="DEA early-stopping rule")
    s.add_argument("--search", action="store_true", help="walk the budget grid until an example is accepted")
    s.add_argument("--robust-trials", type=int, default=0, help="with --search, also require noise robustness")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("hopf-index", parents=[common, field_src], help="lattice Hopf index of a field")
    s.add_argument("--unstaggered", action="store_true", help="pair F and A at the same site")
    s.set_defaults(func=cmd_hopf_index)

    s = sub.add_parser("screen-noise", parents=[common], help="rank adversarial examples by noise robustness")
    s.add_argument("--model", required=True)
    s.add_argument("--candidates", nargs="+", required=True)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--reps", type=int, default=experiment.PAPER_REPETITIONS)
    s.add_argument("--no-noise", action="store_true")
    s.set_defaults(func=cmd_screen_noise)

    s = sub.add_parser("sim-experiment", parents=[common, field_src], help="simulated preparation and tomography")
    s.add_argument("--shots", type=int, default=experiment.PAPER_REPETITIONS, help="repetitions per basis")
    s.add_argument("--out", help="reconstructed field JSON")
    s.add_argument("--csv", help="per-site fidelity CSV name")
    s.add_argument("--skip-passage", action="store_true", help="measure the target directly")
    s.add_argument("--no-noise", action="store_true")
    s.set_defaults(func=cmd_sim_experiment)

    s = sub.add_parser("fidelity", parents=[common], help="per-site fidelity between two fields")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.set_defaults(func=cmd_fidelity)

    s = sub.add_parser("export-viz", parents=[common, field_src], help="texture slices, preimage loops, linking")
    s.add_argument("--target", type=_vector, action="append", help="orientation 'x,y,z' (repeatable)")
    s.add_argument("--resolution", type=int, default=viz.DEFAULT_RESOLUTION)
    s.add_argument("--eps", type=float, default=0.2)
    s.set_defaults(func=cmd_export_viz)

    s = sub.add_parser("repro", parents=[common], help="run the whole pipeline")
    s.add_argument("--fast", action="store_true", help="tiny dataset and budgets (smoke test)")
    s.add_argument("--epochs", type=int, default=None)
    s.set_defaults(func=cmd_repro)
    return p


def _error_payload(err: Exception) -> dict:
    code = err.code if isinstance(err, HopfError) else "invalid_input"
    return {"error": code, "type": type(err).__name__, "message": str(err)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    ctx = RunContext(args)
    try:
        code = args.func(args, ctx)
    except (HopfError, ValueError, OSError, KeyError, json.JSONDecodeError) as err:
        payload = _error_payload(err)
        ctx.outputs.append(io.write_json(ctx.path("error.json"), payload))
        print(json.dumps(payload), file=sys.stderr)
        code = EXIT_DOMAIN
    ctx.manifest()
    return code


if __name__ == "__main__":
    sys.exit(main())
