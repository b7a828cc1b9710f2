"""Experiment driver: attack an evaluation set on a surrogate and score every target.

Reports are canonical CSV. Identical inputs and seed give identical bytes no
matter how many worker processes are used, because each image draws from its
own keyed random stream and images are attacked in fixed-size chunks that do
not depend on the worker count.
"""

from __future__ import annotations

import io
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attack, models
from .data import DatasetHandle, ImageTensor, RandomStream, save_png

CHUNK = 25
DENOMINATOR = "images the target classifies correctly before the attack"
CSV_HEADER = "variant,target,white_box,asr,n,mean_linf,seconds"
ABLATION = ("MIM_CE", "SAFER_BLOCKMIX_ONLY", "SAFER_SELFMIX_ONLY", "SAFER")
FEASIBILITY_TOL = 1e-9


class FeasibilityError(AssertionError):
    pass


class UndefinedRateError(ArithmeticError):
    """Raised when the target gets every clean image wrong, leaving nothing to score."""


@dataclass(frozen=True)
class ReportRow:
    variant: str
    target: str
    white_box: bool
    asr: float
    n: int
    mean_linf: float
    seconds: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.asr <= 1.0:
            raise ValueError(f"asr {self.asr} outside [0, 1]")
        if self.n <= 0:
            raise ValueError("a report row needs at least one scored image")


@dataclass
class EvalReport:
    surrogate: str
    rows: list
    seed: int
    config_digest: str
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: (r.variant, r.target))

    def row(self, variant: str, target: str) -> ReportRow:
        for r in self.rows:
            if r.variant == variant and r.target == target:
                return r
        raise KeyError((variant, target))

    def mean_asr(self, variant: str, include_white_box: bool = False) -> float:
        vals = [r.asr for r in self.rows if r.variant == variant and (include_white_box or not r.white_box)]
        if not vals:
            raise KeyError(variant)
        return float(np.mean(vals))

    def to_csv(self, timing: bool = False) -> str:
        out = io.StringIO()
        out.write(f"# surrogate={self.surrogate}\n")
        out.write(f"# seed={self.seed}\n")
        out.write(f"# config_digest={self.config_digest}\n")
        out.write(f"# asr_denominator={DENOMINATOR}\n")
        for k in sorted(self.notes):
            out.write(f"# {k}={self.notes[k]}\n")
        out.write(CSV_HEADER + "\n")
        for r in self.rows:
            secs = f"{r.seconds:.3f}" if timing else ""
            out.write(f"{r.variant},{r.target},{int(r.white_box)},{r.asr:.9g},{r.n},{r.mean_linf:.9g},{secs}\n")
        return out.getvalue()

    def write(self, path, timing: bool = False) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_csv(timing))


# -- scoring -------------------------------------------------------------------

def check_feasible(x: np.ndarray, x_adv: np.ndarray, epsilon: float, where="") -> None:
    dist = float(np.abs(x_adv - x).max())
    if dist > epsilon + FEASIBILITY_TOL:
        raise FeasibilityError(f"{where}: L-inf distance {dist:.6g} exceeds epsilon {epsilon:.6g}")
    if x_adv.min() < 0.0 or x_adv.max() > 1.0:
        raise FeasibilityError(f"{where}: pixels leave [0, 1]")


def score(target: models.ModelCheckpoint, pairs, epsilon: float | None = None) -> tuple:
    """(asr, n) over the pairs whose clean image the target gets right."""
    if not pairs:
        raise ValueError("attack_success_rate needs at least one pair")
    x = np.stack([np.asarray(p[0], dtype=np.float64) for p in pairs])
    x_adv = np.stack([np.asarray(p[1], dtype=np.float64) for p in pairs])
    y = np.array([p[2] for p in pairs])
    if epsilon is not None:
        for i in range(len(pairs)):
            check_feasible(x[i], x_adv[i], epsilon, f"pair {i}")
    eligible = models.predict_batch(target, x) == y
    n = int(eligible.sum())
    if n == 0:
        raise UndefinedRateError(f"target {target.name} misclassifies every clean image; ASR undefined")
    fooled = models.predict_batch(target, x_adv[eligible]) != y[eligible]
    return float(fooled.mean()), n


def attack_success_rate(target: models.ModelCheckpoint, pairs, epsilon: float | None = None) -> float:
    return score(target, pairs, epsilon)[0]


# -- attacking -------------------------------------------------------------------

def stream_key(label: str) -> int:
    return zlib.crc32(label.encode("ascii"))


_WORKER = {}


def _init_worker(model, data):
    _WORKER["model"], _WORKER["data"] = model, data


def _attack_chunk(args):
    images, cfg, seed, key = args
    rngs = [RandomStream(seed, key, img.id) for img in images]
    return attack.run_variant_batch(_WORKER["model"], images, _WORKER["data"], cfg, rngs)


def attack_images(model, images, data, cfg: attack.AttackConfig, seed: int, label: str | None = None,
                  workers: int = 1) -> list:
    """Attack ``images`` in fixed chunks; result order follows ``images``."""
    key = stream_key(label or cfg.variant)
    jobs = [(images[i:i + CHUNK], cfg, seed, key) for i in range(0, len(images), CHUNK)]
    if workers <= 1 or len(jobs) <= 1:
        _init_worker(model, data)
        parts = [_attack_chunk(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(model, data)) as ex:
            parts = list(ex.map(_attack_chunk, jobs))
    return [r for part in parts for r in part]


def dump_adversarials(results, variant: str, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        save_png(out / f"{r.original_id}_{variant}.png", r.x_adv.pixels)


def eval_images(data: DatasetHandle, n: int | None) -> list:
    return list(data.images if n is None else data.images[:n])


def _rows_for(label, surrogate, targets, images, results, cfg, seconds):
    rows = []
    for target in targets:
        pairs = [(img.pixels, r.x_adv.pixels, img.label) for img, r in zip(images, results)]
        asr, n = score(target, pairs, cfg.epsilon)
        eligible = models.predict_batch(target, np.stack([img.pixels for img in images])) == \
            np.array([img.label for img in images])
        linf = float(np.mean([r.linf for r, ok in zip(results, eligible) if ok]))
        rows.append(ReportRow(label, target.name, target.name == surrogate.name, asr, n, linf, seconds))
    return rows


def run_labelled(surrogate, targets, data, labelled_cfgs, seed, n_images=None, workers=1, dump_dir=None,
                 notes=None) -> EvalReport:
    """Shared engine: ``labelled_cfgs`` is a list of (row label, AttackConfig)."""
    images = eval_images(data, n_images)
    rows = []
    for label, cfg in labelled_cfgs:
        start = time.perf_counter()
        results = attack_images(surrogate, images, data, cfg, seed, label, workers)
        seconds = time.perf_counter() - start
        for img, r in zip(images, results):
            check_feasible(img.pixels, r.x_adv.pixels, cfg.epsilon, f"{label} image {img.id}")
        if dump_dir is not None:
            dump_adversarials(results, label, dump_dir)
        rows.extend(_rows_for(label, surrogate, targets, images, results, cfg, seconds))
    digest = attack.config_digest([c for _, c in labelled_cfgs])
    meta = {"n_images": len(images)}
    meta.update(notes or {})
    return EvalReport(surrogate.name, rows, seed, digest, meta)


def transfer_matrix(surrogate, targets, data, cfgs, seed, **kw) -> EvalReport:
    labels = [c.variant for c in cfgs]
    if len(set(labels)) != len(labels):
        raise ValueError("transfer_matrix: one config per variant")
    return run_labelled(surrogate, targets, data, list(zip(labels, cfgs)), seed, **kw)


def ablation_study(surrogate, targets, data, base_cfg: attack.AttackConfig, seed, **kw) -> EvalReport:
    if base_cfg.variant != "SAFER":
        raise ValueError("ablation_study expects a SAFER base config")
    cfgs = [base_cfg.replace(variant=v) for v in ABLATION]
    return transfer_matrix(surrogate, targets, data, cfgs, seed, **kw)


def tau_label(tau: int) -> str:
    return f"HF_NOISE_tau{tau:02d}"


def frequency_study(surrogate, targets, data, base_cfg: attack.AttackConfig, taus, seed, **kw) -> EvalReport:
    h, w = data.shape[:2]
    for tau in taus:
        if not 1 <= tau <= min(h, w):
            raise ValueError(f"tau {tau} outside 1..{min(h, w)}")
    labelled = [("MIM_CE", base_cfg.replace(variant="MIM_CE"))]
    labelled += [(tau_label(t), base_cfg.replace(variant="HF_NOISE", tau=t)) for t in taus]
    return run_labelled(surrogate, targets, data, labelled, seed, **kw)


def clean_accuracy(model: models.ModelCheckpoint, images: list) -> float:
    x = np.stack([img.pixels for img in images])
    return float(np.mean(models.predict_batch(model, x) == np.array([img.label for img in images])))


__all__ = ["EvalReport", "ReportRow", "FeasibilityError", "attack_success_rate", "score", "transfer_matrix",
           "ablation_study", "frequency_study", "attack_images", "check_feasible", "ImageTensor"]
