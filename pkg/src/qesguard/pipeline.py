"""Desk-scale end-to-end workflows shared by the CLI and the acceptance suite."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import dataio
from .attacks import AttackConfig, run_attack
from .calibration import BoundarySet, boundaries_from_energies, data_fingerprint, generate_boundaries, \
    recalibrate_for_transfer, fit_to_input
from .classifier import ClassifierState, accuracy, predict, train_classifier
from .detector import DetectorState, all_energies, init_detector, preset
from .early_exit import detect_batch
from .energy import detection_energy, default_profile
from .metrics import EvalReport, auc, evaluate
from .qes import TrainConfig, qes_train

log = logging.getLogger(__name__)

CIFAR_ENV = "QESGUARD_CIFAR10_DIR"

# attack strengths used for evaluation
PAPER_ATTACKS = {
    "FGSM": AttackConfig("FGSM", eps="8/255"),
    "FFGSM": AttackConfig("FFGSM", eps="8/255"),
    "BIM": AttackConfig("BIM", eps="8/255", steps=10),
    "PGD": AttackConfig("PGD", eps="8/255", steps=10),
    "PGD4": AttackConfig("PGD", eps="4/255", steps=10),
    "MIFGSM": AttackConfig("MIFGSM", eps="8/255", steps=10),
    "DIFGSM": AttackConfig("DIFGSM", eps="8/255", steps=10),
    "TPGD": AttackConfig("TPGD", eps="8/255", steps=10),
    "PGD-L2": AttackConfig("PGD-L2", eps=0.5, steps=10),
    "CW": AttackConfig("CW", c=100, kappa=0, steps=100),
    "GN": AttackConfig("GN", sigma=0.1),
}


@dataclass
class DeskConfig:
    n_train: int = 10000
    n_test: int = 2000
    seed: int = 0
    classifier_preset: str = "small"
    classifier_epochs: int = 8
    classifier_lr: float = 0.05
    eps: str = "8/255"
    pgd_steps: int = 10
    detector: str = "D1"
    bits: int = 16
    qes_epochs: tuple = (60, 20, 20)
    optimizer: str = "adam"
    lr_scale: float = 20.0
    calib_samples: int = 1000
    k: float = 92
    l: float = 30
    u: float = 5

    def train_config(self, **overrides) -> TrainConfig:
        c = TrainConfig(epochs=list(self.qes_epochs), bits=self.bits, seed=self.seed,
                        optimizer=self.optimizer, lr_scale=self.lr_scale, batch_size=200)
        return replace(c, **overrides)

    def as_dict(self) -> dict:
        return asdict(self)


def load_source_data(cfg: DeskConfig, kind: str = "A") -> tuple:
    """((x_train, y_train), (x_test, y_test), description).

    Dataset A is CIFAR-10 when the binary batches are available under the
    directory named by $QESGUARD_CIFAR10_DIR, otherwise the photo-patch stand-in.
    """
    src = os.environ.get(CIFAR_ENV)
    if kind.upper() == "A" and src:
        xtr, ytr = dataio.read_cifar10_batches(sorted(__import__("glob").glob(os.path.join(src, "data_batch_*.bin"))))
        xte, yte = dataio.read_cifar10_batches([os.path.join(src, "test_batch.bin")])
        rng = np.random.default_rng(cfg.seed)
        itr = np.sort(rng.permutation(len(xtr))[: cfg.n_train])
        ite = np.sort(rng.permutation(len(xte))[: cfg.n_test])
        return ((xtr[itr] / 255.0, ytr[itr]), (xte[ite] / 255.0, yte[ite]), "cifar10-binary")
    x, y = dataio.photo_patches(kind, cfg.n_train + cfg.n_test, seed=cfg.seed)
    x = x / 255.0
    return ((x[: cfg.n_train], y[: cfg.n_train]), (x[cfg.n_train :], y[cfg.n_train :]),
            f"photo-patches-{kind.upper()}")


@dataclass
class Evaluation:
    report: EvalReport
    outcomes_nat: list
    outcomes_adv: list
    energies_nat: np.ndarray
    energies_adv: np.ndarray

    def detection_energy_ratio(self, d: DetectorState, b: BoundarySet, bits: int) -> Fraction:
        """E_D with early exit over E_D at full depth, same samples."""
        prof = default_profile()
        early = detection_energy(self.outcomes_nat + self.outcomes_adv, prof, bits)
        full = detect_batch(d, b, None, early_exit=False,
                            energies=np.concatenate([self.energies_nat, self.energies_adv]))
        return early / detection_energy(full, prof, bits)


def evaluate_detector(d: DetectorState, b: BoundarySet, clf: Optional[ClassifierState], x_nat, y_nat,
                      x_adv, y_adv, early_exit: bool = True) -> Evaluation:
    e_nat, e_adv = all_energies(d, x_nat), all_energies(d, x_adv)
    on = detect_batch(d, b, None, early_exit, energies=e_nat)
    oa = detect_batch(d, b, None, early_exit, energies=e_adv)
    if clf is not None:
        pn, pa = predict(clf, x_nat)[0], predict(clf, x_adv)[0]
    else:  # no cloud model: treat every prediction as correct
        pn, pa = np.asarray(y_nat), np.asarray(y_adv)
    rep = evaluate(e_nat[:, -1], e_adv[:, -1], [o.verdict for o in on], [o.verdict for o in oa],
                   pn, pa, y_nat, y_adv)
    return Evaluation(rep, on, oa, e_nat, e_adv)


@dataclass
class DeskRun:
    cfg: DeskConfig
    source: str
    train: tuple
    test: tuple
    classifier: ClassifierState
    adv_train: np.ndarray
    adv_test: np.ndarray
    detector: DetectorState
    boundaries: BoundarySet
    evaluation: Evaluation
    timings: dict = field(default_factory=dict)

    @property
    def classifier_accuracy(self) -> float:
        return self.classifier.metadata["test_acc"]


def attack(clf: ClassifierState, x, y, cfg: AttackConfig) -> np.ndarray:
    return run_attack(clf, x, y, cfg, num_classes=clf.num_classes)[0]


def train_detector(cfg: DeskConfig, x_nat, x_adv, bits: Optional[int] = None, name: Optional[str] = None,
                   **train_overrides) -> DetectorState:
    spec = preset(name or cfg.detector, tuple(x_nat.shape[1:]))
    d0 = init_detector(spec, seed=cfg.seed, bits=bits or cfg.bits)
    tc = cfg.train_config(bits=bits or cfg.bits, **train_overrides)
    return qes_train(d0, x_nat, x_adv, tc)


def calibrate(cfg: DeskConfig, d: DetectorState, x_train) -> BoundarySet:
    s_nat, _ = dataio.sample_nat(x_train, cfg.calib_samples, seed=cfg.seed)
    return generate_boundaries(d, s_nat, cfg.k, cfg.l, cfg.u)


def run_desk(cfg: DeskConfig = DeskConfig(), data: Optional[tuple] = None) -> DeskRun:
    """Classifier -> PGD adversaries -> QES detector -> boundaries -> early-exit evaluation."""
    t = {}
    t0 = time.perf_counter()
    if data is None:
        (xtr, ytr), (xte, yte), source = load_source_data(cfg)
    else:
        (xtr, ytr), (xte, yte), source = data
    t["data"] = time.perf_counter() - t0

    s = time.perf_counter()
    clf = train_classifier(xtr, ytr, cfg.classifier_epochs, lr=cfg.classifier_lr, seed=cfg.seed,
                           preset=cfg.classifier_preset, num_classes=10, test=(xte, yte))
    t["classifier"] = time.perf_counter() - s
    log.info("classifier test accuracy %.4f", clf.metadata["test_acc"])

    s = time.perf_counter()
    pgd = AttackConfig("PGD", eps=cfg.eps, steps=cfg.pgd_steps, seed=cfg.seed)
    adv_tr = attack(clf, xtr, ytr, pgd)
    adv_te = attack(clf, xte, yte, replace(pgd, seed=cfg.seed + 1))
    t["attacks"] = time.perf_counter() - s

    s = time.perf_counter()
    d = train_detector(cfg, xtr, adv_tr)
    t["qes"] = time.perf_counter() - s

    s = time.perf_counter()
    b = calibrate(cfg, d, xtr)
    ev = evaluate_detector(d, b, clf, xte, yte, adv_te, yte)
    t["evaluate"] = time.perf_counter() - s
    t["total"] = time.perf_counter() - t0
    return DeskRun(cfg, source, (xtr, ytr), (xte, yte), clf, adv_tr, adv_te, d, b, ev, t)


def attack_aucs(run: DeskRun, kinds: Sequence[str], d: Optional[DetectorState] = None,
                clf: Optional[ClassifierState] = None, n: Optional[int] = None) -> dict:
    """Final-layer AUC per attack kind on the run's test set."""
    d = d or run.detector
    clf = clf or run.classifier
    xte, yte = run.test
    if n is not None:
        xte, yte = xte[:n], yte[:n]
    e_nat = all_energies(d, xte)[:, -1]
    out = {}
    for k in kinds:
        cfg = replace(PAPER_ATTACKS[k], seed=run.cfg.seed + 7)
        xa = attack(clf, xte, yte, cfg)
        out[k] = {"auc": auc(e_nat, all_energies(d, xa)[:, -1]), "classifier_acc": accuracy(clf, xa, yte)}
    return out


def transfer(run: DeskRun, target_kind: str = "B", samples: int = 200, n_train: int = 3000,
             n_test: int = 1000, kinds: Sequence[str] = ("PGD",), classifier_epochs: int = 8) -> dict:
    """Keep the source detector's weights; recalibrate on target naturals; score target attacks.

    Target attacks come from a classifier trained on the target data.
    """
    tcfg = replace(run.cfg, n_train=n_train, n_test=n_test, seed=run.cfg.seed + 101)
    (xtr, ytr), (xte, yte), source = load_source_data(tcfg, target_kind)
    clf = train_classifier(xtr, ytr, classifier_epochs, lr=run.cfg.classifier_lr, seed=tcfg.seed,
                           preset=run.cfg.classifier_preset, num_classes=10, test=(xte, yte))
    s_nat, _ = dataio.sample_nat(xtr, samples, seed=tcfg.seed)
    b = recalibrate_for_transfer(run.detector, s_nat, run.cfg.k, run.cfg.l, run.cfg.u)
    xte_fit, _ = fit_to_input(xte, run.detector.spec.input_shape)
    e_nat = all_energies(run.detector, xte_fit)
    rows = {}
    for k in kinds:
        xa = attack(clf, xte, yte, replace(PAPER_ATTACKS[k], seed=tcfg.seed))
        xa_fit, _ = fit_to_input(xa, run.detector.spec.input_shape)
        e_adv = all_energies(run.detector, xa_fit)
        on = detect_batch(run.detector, b, None, True, energies=e_nat)
        oa = detect_batch(run.detector, b, None, True, energies=e_adv)
        rep = evaluate(e_nat[:, -1], e_adv[:, -1], [o.verdict for o in on], [o.verdict for o in oa],
                       predict(clf, xte)[0], predict(clf, xa)[0], yte, yte)
        rows[k] = {"auc": rep.auc, "f1": rep.f1}
    return {"target": source, "samples": samples, "target_classifier_acc": clf.metadata["test_acc"],
            "boundaries": b, "attacks": rows}


def black_box(run: DeskRun, preset_name: str = "small-b", epochs: Optional[int] = None,
              kinds: Sequence[str] = ("PGD",)) -> dict:
    """Attacks crafted on an independently trained classifier of a different preset."""
    xtr, ytr = run.train
    xte, yte = run.test
    other = train_classifier(xtr, ytr, epochs or run.cfg.classifier_epochs, lr=run.cfg.classifier_lr,
                             seed=run.cfg.seed + 202, preset=preset_name, num_classes=10, test=(xte, yte))
    rows = attack_aucs(run, kinds, clf=other)
    return {"test_classifier": preset_name, "test_classifier_acc": other.metadata["test_acc"], "attacks": rows}


def klu_grid(d: DetectorState, e_calib: np.ndarray, e_nat: np.ndarray, e_adv: np.ndarray,
             ks: Sequence[float], ls: Sequence[float], us: Sequence[float], bits: int) -> list:
    """Detection quality vs detection energy over a K/L/U grid (energies computed once)."""
    prof = default_profile()
    rows = []
    for k in ks:
        for l in ls:
            for u in us:
                if k - l < 0 or k + u > 100:
                    continue
                b = boundaries_from_energies(e_calib, k, l, u, d.fingerprint())
                on = detect_batch(d, b, None, True, energies=e_nat)
                oa = detect_batch(d, b, None, True, energies=e_adv)
                vn = np.array([o.is_adversarial for o in on])
                va = np.array([o.is_adversarial for o in oa])
                tpr, fpr = va.mean(), vn.mean()
                ed = detection_energy(on + oa, prof, bits)
                rows.append({"K": k, "L": l, "U": u, "auc_verdict": float((tpr + 1 - fpr) / 2),
                             "tpr": float(tpr), "fpr": float(fpr), "E_D_joules": float(ed),
                             "E_D_per_sample_uJ": float(ed / (len(on) + len(oa)) * 10**6)})
    return rows
