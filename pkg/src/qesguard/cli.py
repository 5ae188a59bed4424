"""Command-line entry point: ``qesguard <subcommand> ...``.

Every subcommand validates its inputs before writing anything and stamps a
provenance block (seed, config hash, input hashes, versions) into its output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, dataio
from .attacks import KINDS, AttackConfig, parse_eps, run_attack
from .calibration import fit_to_input, generate_boundaries, recalibrate_for_transfer
from .classifier import PRESETS, accuracy, predict, train_classifier
from .detector import all_energies, init_detector, model_info, preset
from .early_exit import BoundaryMismatch, detect_batch
from .energy import baseline_report, load_profile, report, default_profile
from .metrics import evaluate
from .qes import TrainConfig, qes_train

log = logging.getLogger("qesguard")


class CliError(Exception):
    pass


def provenance(args: argparse.Namespace, inputs: dict, seed=None, config=None) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    blob = json.dumps(config if config is not None else cfg, sort_keys=True, default=str)
    return {
        "tool": "qesguard",
        "version": __version__,
        "command": args.command,
        "seed": seed if seed is not None else getattr(args, "seed", None),
        "config": cfg,
        "config_sha256": hashlib.sha256(blob.encode()).hexdigest(),
        "inputs": {k: dataio.file_sha256(v) for k, v in inputs.items() if v},
        "versions": {"python": platform.python_version(), "numpy": np.__version__},
    }


def _exists(*paths) -> None:
    for p in paths:
        if p and not Path(p).exists():
            raise CliError(f"input not found: {p}")


def _int_list(s: str) -> list:
    return [int(v) for v in s.split(",")]


def _num_list(s: str) -> list:
    """'80..96' (step 1), '80..96:4' or '5,10,20'."""
    if ".." in s:
        rng, _, step = s.partition(":")
        a, b = rng.split("..")
        step = float(step) if step else 1.0
        out, v = [], float(a)
        while v <= float(b) + 1e-9:
            out.append(round(v, 10))
            v += step
        return out
    return [float(v) for v in s.split(",")]


def _emit(path, obj: dict) -> None:
    if path:
        dataio.write_json(path, obj)
        log.info("wrote %s", path)
    else:
        print(json.dumps(dataio._plain(obj), indent=2))


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_dataset(a):
    tr, te = dataio.make_patch_dataset(a.kind, a.out, a.n_train, a.n_test, a.seed)
    print(json.dumps({"train": str(tr), "test": str(te)}))


def cmd_import_cifar10(a):
    _exists(a.src)
    tr, te = dataio.import_cifar10(a.src, a.out, a.n_train, a.n_test, a.seed)
    print(json.dumps({"train": str(tr), "test": str(te)}))


def cmd_train_classifier(a):
    _exists(a.data, a.test)
    if a.preset not in PRESETS:
        raise CliError(f"unknown preset {a.preset}")
    x, y = dataio.load_dataset(a.data)
    m = dataio.DatasetManifest.load(a.data)
    test = dataio.load_dataset(a.test) if a.test else None
    c = train_classifier(x, y, a.epochs, lr=a.lr, seed=a.seed, preset=a.preset, num_classes=m.num_classes,
                         test=test)
    c.metadata["provenance"] = provenance(a, {"data": a.data, "test": a.test})
    dataio.save_checkpoint(a.out, c)
    print(json.dumps({"train_acc": c.metadata["train_acc"], "test_acc": c.metadata.get("test_acc")}))


def cmd_gen_attacks(a):
    _exists(a.classifier, a.data)
    clf = dataio.load_checkpoint(a.classifier)
    x, y = dataio.load_dataset(a.data)
    m = dataio.DatasetManifest.load(a.data)
    cfg = AttackConfig(a.attack, eps=a.eps, steps=a.steps, alpha=a.alpha, sigma=a.sigma, c=a.c,
                       kappa=a.kappa, target=a.target, seed=a.seed, decay=a.decay)
    xa, info = run_attack(clf, x, y, cfg, num_classes=clf.num_classes)
    info.pop("cw_l2", None)
    out = Path(a.out)
    meta = {
        **info,
        "source_classifier": clf.fingerprint(),
        "source_data": dataio.file_sha256(m.root / m.images),
        "classifier_acc_natural": accuracy(clf, x, y),
        "classifier_acc_adversarial": accuracy(clf, xa, y),
        "provenance": provenance(a, {"classifier": a.classifier, "data": a.data}),
    }
    path = dataio.save_dataset(out.parent, out.stem, xa, y, m.num_classes, "float64", attack=meta)
    print(json.dumps({"manifest": str(path), "classifier_acc_adversarial": meta["classifier_acc_adversarial"]}))


def cmd_qes_train(a):
    _exists(a.nat, a.adv, a.config)
    xn, _ = dataio.load_dataset(a.nat)
    xa, _ = dataio.load_dataset(a.adv)
    madv = dataio.DatasetManifest.load(a.adv)
    mnat = dataio.DatasetManifest.load(a.nat)
    src = (madv.attack or {}).get("source_data")
    if src and src != dataio.file_sha256(mnat.root / mnat.images):
        raise CliError("adversarial set was not generated from this natural set")
    if len(xn) != len(xa):
        raise CliError(f"natural ({len(xn)}) and adversarial ({len(xa)}) sets differ in length")
    fields = json.loads(Path(a.config).read_text()) if a.config else {}
    for k in ("epochs", "optimizer", "lr_scale", "momentum", "seed", "batch_size"):
        v = getattr(a, k, None)
        if v is not None:
            fields[k] = v
    fields["bits"] = a.bits
    if isinstance(fields.get("epochs"), str):
        ep = _int_list(fields["epochs"])
        fields["epochs"] = ep[0] if len(ep) == 1 else ep
    cfg = TrainConfig(**fields)
    spec = preset(a.preset, tuple(xn.shape[1:]), a.depth)
    d0 = init_detector(spec, seed=cfg.seed, bits=a.bits)
    cfg.resolved(spec.n_layers)  # fail before any work
    d = qes_train(d0, xn, xa, cfg)
    d.metadata["provenance"] = provenance(a, {"nat": a.nat, "adv": a.adv, "config": a.config}, seed=cfg.seed)
    dataio.save_checkpoint(a.out, d)
    print(json.dumps({"checkpoint": a.out, "fingerprint": d.fingerprint()}))


def cmd_calibrate(a):
    _exists(a.detector, a.data)
    d = dataio.load_checkpoint(a.detector)
    x, _ = dataio.load_dataset(a.data)
    s_nat, idx = dataio.sample_nat(x, a.samples, a.seed)
    if a.fit:
        s_nat, transform = fit_to_input(s_nat, d.spec.input_shape)
    else:
        transform = "none"
    b = generate_boundaries(d, s_nat, a.K, a.L, a.U, transform=transform)
    b.provenance = provenance(a, {"detector": a.detector, "data": a.data})
    dataio.save_boundaries(a.out, b)
    print(json.dumps(b.as_dict()["final"]))


def _load_pair(a):
    _exists(a.detector, a.boundaries)
    d = dataio.load_checkpoint(a.detector)
    b = dataio.load_boundaries(a.boundaries)
    if b.detector_fingerprint != d.fingerprint():
        raise CliError("boundary file was calibrated for a different detector checkpoint")
    return d, b


def cmd_detect(a):
    d, b = _load_pair(a)
    _exists(a.data)
    x, _ = dataio.load_dataset(a.data)
    outs = detect_batch(d, b, x, early_exit=not a.no_early_exit)
    counts = {"natural": sum(o.verdict == "natural" for o in outs)}
    counts["adversarial"] = len(outs) - counts["natural"]
    dataio.save_outcomes(a.out, outs, {"summary": counts, "bits": d.bits[-1],
                                       "provenance": provenance(a, {"detector": a.detector,
                                                                    "boundaries": a.boundaries,
                                                                    "data": a.data})})
    print(json.dumps(counts))


def cmd_evaluate(a):
    d, b = _load_pair(a)
    _exists(a.classifier, a.nat, a.adv)
    clf = dataio.load_checkpoint(a.classifier)
    xn, yn = dataio.load_dataset(a.nat)
    xa, ya = dataio.load_dataset(a.adv)
    en, ea = all_energies(d, xn), all_energies(d, xa)
    early = not a.no_early_exit
    on = detect_batch(d, b, None, early, energies=en)
    oa = detect_batch(d, b, None, early, energies=ea)
    rep = evaluate(en[:, -1], ea[:, -1], [o.verdict for o in on], [o.verdict for o in oa],
                   predict(clf, xn)[0], predict(clf, xa)[0], yn, ya)
    out = {"metrics": rep.as_dict(), "early_exit": early,
           "exit_histogram": {"natural": np.bincount([o.exit_layer for o in on], minlength=d.n_layers + 1)[1:],
                              "adversarial": np.bincount([o.exit_layer for o in oa], minlength=d.n_layers + 1)[1:]},
           "classifier_natural_accuracy_pct": 100 * accuracy(clf, xn, yn),
           "provenance": provenance(a, {"detector": a.detector, "boundaries": a.boundaries,
                                        "classifier": a.classifier, "nat": a.nat, "adv": a.adv})}
    _emit(a.out, out)


def cmd_energy_report(a):
    prof = load_profile(a.profile, a.dataset) if a.profile else default_profile(a.dataset)
    if a.baseline:
        if a.n_nat is None or a.n_adv is None:
            raise CliError("--baseline needs --n-nat and --n-adv")
        r = baseline_report(a.n_nat, a.n_adv, prof)
        inputs = {"profile": a.profile}
    else:
        _exists(a.outcomes_nat, a.outcomes_adv)
        on, meta = dataio.load_outcomes(a.outcomes_nat)
        oa, _ = dataio.load_outcomes(a.outcomes_adv)
        bits = a.bits or meta.get("bits")
        if bits is None:
            raise CliError("bit width unknown; pass --bits")
        r = report(on, oa, prof, int(bits))
        inputs = {"outcomes_nat": a.outcomes_nat, "outcomes_adv": a.outcomes_adv, "profile": a.profile}
    out = {"report": r.as_dict(), "profile": prof.to_dict(), "provenance": provenance(a, inputs)}
    _emit(a.out, out)


def cmd_model_info(a):
    if a.detector:
        _exists(a.detector)
        d = dataio.load_checkpoint(a.detector)
    else:
        d = init_detector(preset(a.preset, depth=a.depth), bits=a.bits)
    print(json.dumps(dataio._plain(model_info(d)), indent=2))


def cmd_ablate(a):
    from . import pipeline as pl

    _exists(a.nat, a.adv, a.test_nat, a.test_adv, a.detector)
    xn, _ = dataio.load_dataset(a.nat)
    xa, _ = dataio.load_dataset(a.adv)
    tn, _ = dataio.load_dataset(a.test_nat)
    ta, _ = dataio.load_dataset(a.test_adv)
    cfg = pl.DeskConfig(seed=a.seed, bits=a.bits, detector=a.preset, qes_epochs=tuple(_int_list(a.epochs)),
                        optimizer=a.optimizer, lr_scale=a.lr_scale, k=a.K_default, l=a.L_default,
                        u=a.U_default, calib_samples=a.samples)
    rows = []
    if a.sweep == "KLU":
        if not a.detector:
            raise CliError("--sweep KLU needs --detector")
        d = dataio.load_checkpoint(a.detector)
        s_nat, _ = dataio.sample_nat(xn, a.samples, a.seed)
        rows = pl.klu_grid(d, all_energies(d, s_nat), all_energies(d, tn), all_energies(d, ta),
                           _num_list(a.K), _num_list(a.L), _num_list(a.U), d.bits[-1])
    else:
        values = _num_list(a.values) if a.values else None
        if a.sweep == "lambda":
            # scale the increments of lambda_a over layer 1 (0.4 and 1.1 at the reference point)
            for f in values or [0.5, 1.0, 1.5, 2.0]:
                la = [0.9, 0.9 + 0.4 * f, 0.9 + 1.1 * f]
                d = pl.train_detector(cfg, xn, xa, lambda_a=la)
                rows.append({"increment_scale": f, "lambda_a": la, **_sweep_row(pl, cfg, d, xn, tn, ta)})
        elif a.sweep == "preset":
            for name in (a.values.split(",") if a.values else ["D1", "D2", "D3"]):
                d = pl.train_detector(cfg, xn, xa, name=name)
                rows.append({"preset": name, "parameters": d.weight_count(), **_sweep_row(pl, cfg, d, xn, tn, ta)})
        elif a.sweep == "data-fraction":
            rng = np.random.default_rng(a.seed)
            perm = rng.permutation(len(xn))
            for f in values or [0.1, 0.4, 0.6, 1.0]:
                idx = np.sort(perm[: max(1, int(round(f * len(xn))))])
                d = pl.train_detector(cfg, xn[idx], xa[idx])
                rows.append({"fraction": f, "train_samples": len(idx), **_sweep_row(pl, cfg, d, xn, tn, ta)})
    _emit(a.out, {"sweep": a.sweep, "rows": rows,
                  "provenance": provenance(a, {"nat": a.nat, "adv": a.adv, "test_nat": a.test_nat,
                                               "test_adv": a.test_adv, "detector": a.detector})})


def _sweep_row(pl, cfg, d, xn, tn, ta) -> dict:
    from .energy import detection_energy

    b = pl.calibrate(cfg, d, xn)
    en, ea = all_energies(d, tn), all_energies(d, ta)
    on = detect_batch(d, b, None, True, energies=en)
    oa = detect_batch(d, b, None, True, energies=ea)
    from .metrics import auc, f1

    verdicts = [o.is_adversarial for o in on] + [o.is_adversarial for o in oa]
    truth = [False] * len(on) + [True] * len(oa)
    return {"auc": auc(en[:, -1], ea[:, -1]), "f1": f1(verdicts, truth),
            "E_D_joules": float(detection_energy(on + oa, default_profile(), cfg.bits))}


def cmd_transfer(a):
    _exists(a.detector, a.target, a.target_test, a.target_classifier)
    d = dataio.load_checkpoint(a.detector)
    xt, _ = dataio.load_dataset(a.target)
    s_nat, _ = dataio.sample_nat(xt, a.samples, a.seed)
    b = recalibrate_for_transfer(d, s_nat, a.K, a.L, a.U)
    clf = dataio.load_checkpoint(a.target_classifier)
    x, y = dataio.load_dataset(a.target_test)
    xf, _ = fit_to_input(x, d.spec.input_shape)
    en = all_energies(d, xf)
    on = detect_batch(d, b, None, True, energies=en)
    rows = {}
    for kind in a.attacks.split(","):
        cfg = AttackConfig(kind, eps=a.eps, seed=a.seed)
        xa, _ = run_attack(clf, x, y, cfg, num_classes=clf.num_classes)
        ea = all_energies(d, fit_to_input(xa, d.spec.input_shape)[0])
        oa = detect_batch(d, b, None, True, energies=ea)
        rep = evaluate(en[:, -1], ea[:, -1], [o.verdict for o in on], [o.verdict for o in oa],
                       predict(clf, x)[0], predict(clf, xa)[0], y, y)
        rows[cfg.kind] = {"auc": rep.auc, "f1": rep.f1}
    if a.boundaries_out:
        dataio.save_boundaries(a.boundaries_out, b)
    _emit(a.out, {"samples": a.samples, "transform": b.transform, "attacks": rows,
                  "provenance": provenance(a, {"detector": a.detector, "target": a.target,
                                               "target_test": a.target_test,
                                               "target_classifier": a.target_classifier})})


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qesguard", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="build a photo-patch dataset (A: RGB, B: grayscale)")
    s.add_argument("--kind", choices=["A", "B"], default="A")
    s.add_argument("--n-train", type=int, default=10000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("import-cifar10", help="subsample CIFAR-10 binary batches into datasets")
    s.add_argument("--src", required=True)
    s.add_argument("--n-train", type=int, default=10000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_import_cifar10)

    s = sub.add_parser("train-classifier")
    s.add_argument("--data", required=True)
    s.add_argument("--test")
    s.add_argument("--preset", default="small", choices=sorted(PRESETS))
    s.add_argument("--epochs", type=int, default=8)
    s.add_argument("--lr", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("gen-attacks")
    s.add_argument("--classifier", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--attack", required=True, type=str.upper, choices=KINDS + ("PGDL2",))
    s.add_argument("--eps", default="8/255", help='budget, decimal or fraction such as "8/255"')
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--alpha", default=None)
    s.add_argument("--decay", type=float, default=1.0)
    s.add_argument("--sigma", type=float, default=0.1)
    s.add_argument("--c", type=float, default=100.0)
    s.add_argument("--kappa", type=float, default=0.0)
    s.add_argument("--target", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output manifest path (.json)")
    s.set_defaults(func=cmd_gen_attacks)

    s = sub.add_parser("qes-train")
    s.add_argument("--nat", required=True)
    s.add_argument("--adv", required=True)
    s.add_argument("--bits", type=int, default=16)
    s.add_argument("--preset", default="D1")
    s.add_argument("--depth", type=int)
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--epochs", help="per-layer epochs, e.g. 60,20,20")
    s.add_argument("--optimizer", choices=["sgd", "adam"])
    s.add_argument("--lr-scale", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_qes_train)

    s = sub.add_parser("calibrate")
    s.add_argument("--detector", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--K", type=float, default=92)
    s.add_argument("--L", type=float, default=30)
    s.add_argument("--U", type=float, default=5)
    s.add_argument("--fit", action="store_true", help="center pad/crop samples to the detector input")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("detect")
    s.add_argument("--detector", required=True)
    s.add_argument("--boundaries", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--no-early-exit", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("evaluate")
    s.add_argument("--detector", required=True)
    s.add_argument("--boundaries", required=True)
    s.add_argument("--classifier", required=True)
    s.add_argument("--nat", required=True)
    s.add_argument("--adv", required=True)
    s.add_argument("--no-early-exit", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("energy-report")
    s.add_argument("--outcomes-nat")
    s.add_argument("--outcomes-adv")
    s.add_argument("--bits", type=int)
    s.add_argument("--dataset", default="cifar10")
    s.add_argument("--profile", help="JSON hardware profile (defaults to the bundled 45nm table)")
    s.add_argument("--baseline", action="store_true")
    s.add_argument("--n-nat", type=int)
    s.add_argument("--n-adv", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_energy_report)

    s = sub.add_parser("ablate")
    s.add_argument("--sweep", required=True, choices=["KLU", "lambda", "preset", "data-fraction"])
    s.add_argument("values", nargs="?", help="sweep values, e.g. 0.1,0.4,0.6,1.0")
    s.add_argument("--nat", required=True)
    s.add_argument("--adv", required=True)
    s.add_argument("--test-nat", required=True)
    s.add_argument("--test-adv", required=True)
    s.add_argument("--detector")
    s.add_argument("--K", default="80..96:4")
    s.add_argument("--L", default="5,10,20,30,40")
    s.add_argument("--U", default="5")
    s.add_argument("--K-default", type=float, default=92)
    s.add_argument("--L-default", type=float, default=30)
    s.add_argument("--U-default", type=float, default=5)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--preset", default="D1")
    s.add_argument("--bits", type=int, default=16)
    s.add_argument("--epochs", default="60,20,20")
    s.add_argument("--optimizer", default="adam", choices=["sgd", "adam"])
    s.add_argument("--lr-scale", type=float, default=20.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("transfer", help="recalibrate a source detector on target naturals and score target attacks")
    s.add_argument("--detector", required=True, help="detector trained on the source dataset")
    s.add_argument("--target", required=True, help="target training manifest (calibration pool)")
    s.add_argument("--target-test", required=True)
    s.add_argument("--target-classifier", required=True)
    s.add_argument("--samples", type=int, default=200)
    s.add_argument("--attacks", default="PGD,FGSM,BIM,MIFGSM")
    s.add_argument("--eps", default="8/255")
    s.add_argument("--K", type=float, default=92)
    s.add_argument("--L", type=float, default=30)
    s.add_argument("--U", type=float, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--boundaries-out")
    s.add_argument("--out")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("model-info")
    s.add_argument("--detector")
    s.add_argument("--preset", default="D1")
    s.add_argument("--depth", type=int)
    s.add_argument("--bits", type=int, default=16)
    s.set_defaults(func=cmd_model_info)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, dataio.DataError, BoundaryMismatch, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
