"""Grid search, multi-seed orchestration, and the ablation tables.

Every run is described by a :class:`RunSpec`. Cells are keyed by the spec's
settings plus the (teacher seed, student seed) pair, so two tables asking for
the same settings share one computation and therefore agree exactly.
"""
from __future__ import annotations

import copy
import hashlib
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..autodiff import ContractError, NumericOverflowError
from ..data import AugmentedDataset, GenerationError, build_dsd, generate_task
from ..models import Encoder, Head, HeadSpec, Model, load_checkpoint, save_checkpoint
from ..train import TrainConfig, TrainingDiverged, distill, evaluate, finetune, pretrain_encoder, probe
from .config import ExperimentConfig, to_dict
from .report import ReportTable, RunResult

# failures that mark a run as failed instead of crashing the harness
RUN_FAILURES = (TrainingDiverged, NumericOverflowError, GenerationError, FloatingPointError)


class GridError(RuntimeError):
    def __init__(self, failures: dict):
        detail = "; ".join(f"lr={lr:g} wd={wd:g}: {msg}" for (lr, wd), msg in failures.items())
        super().__init__(f"every grid point failed ({detail})")
        self.failures = failures


def derive_seed(base: int, *parts) -> int:
    """Stable 31-bit seed for a named sub-stream."""
    text = ":".join(str(p) for p in (base, *parts))
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=4).digest(), "little") >> 1


def pmap(fn, items, threads: int = 1) -> list:
    """Ordered map; with ``threads > 1`` the calls run on a thread pool."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridOutcome:
    best: tuple[float, float]
    scores: dict
    failures: dict


def run_grid(score, points, threads: int = 1) -> GridOutcome:
    """Pick the grid point with the best validation score.

    ``score(lr, wd)`` trains one run and returns its validation accuracy.
    Ties go to the smaller lr, then the smaller weight decay.
    """
    points = list(points)
    if not points:
        raise ContractError("grid must contain at least one point")

    def attempt(point):
        try:
            return float(score(*point)), None
        except RUN_FAILURES as exc:
            return None, f"{type(exc).__name__}: {exc}"

    scores, failures = {}, {}
    for point, (value, err) in zip(points, pmap(attempt, points, threads)):
        if err is None:
            scores[point] = value
        else:
            failures[point] = err
    if not scores:
        raise GridError(failures)
    best = max(scores, key=lambda p: (scores[p], -p[0], -p[1]))
    return GridOutcome(best, scores, failures)


# ---------------------------------------------------------------------------
# run specifications


@dataclass(frozen=True)
class RunSpec:
    name: str
    kind: str  # probe | finetune | distill
    model: str = "student"  # which pretrained encoder is trained
    teacher: str | None = None  # probed | finetuned | self
    mixer: str | None = None  # mixer kind building the synthetic set
    kd_synthetic: bool = False
    task_synthetic: bool = False
    loss_kind: str | None = None
    alpha: float | None = None
    hp: str = ""  # grid entry supplying lr / weight decay

    @property
    def signature(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "name")

    @property
    def teacher_label(self) -> str:
        return {None: "-", "probed": "teacher (probed)", "finetuned": "teacher (finetuned)", "self": "student (probed)"}[
            self.teacher
        ]


PROCEDURE_SPECS = {
    "probe-teacher": RunSpec("probe-teacher", "probe", "teacher", hp="probe-teacher"),
    "finetune-teacher": RunSpec("finetune-teacher", "finetune", "teacher", hp="finetune-teacher"),
    "probe-student": RunSpec("probe-student", "probe", hp="probe-student"),
    "finetune-student": RunSpec("finetune-student", "finetune", hp="finetune-student"),
    "distill": RunSpec("distill", "distill", teacher="probed", hp="distill"),
    # synthetic runs reuse the hyperparameters tuned without synthetics
    "distill+sd": RunSpec("distill+sd", "distill", teacher="probed", mixer="inter-class", kd_synthetic=True, hp="distill"),
    "self-distill": RunSpec("self-distill", "distill", teacher="self", hp="distill"),
    "distill-finetuned-teacher": RunSpec("distill-finetuned-teacher", "distill", teacher="finetuned", hp="distill"),
    "distill-hard-label": RunSpec("distill-hard-label", "distill", teacher="probed", loss_kind="hard-label-kd", hp="distill"),
    "distill-dkd": RunSpec("distill-dkd", "distill", teacher="probed", loss_kind="dkd", hp="distill"),
}

TABLE5_SPECS = [
    RunSpec("finetune task:D_sd-intra", "finetune", mixer="intra-class", task_synthetic=True, hp="finetune-student"),
    replace(PROCEDURE_SPECS["finetune-student"], name="finetune task:D_train"),
    RunSpec(
        "distill kd:D_sd-intra task:D_sd-intra",
        "distill",
        teacher="probed",
        mixer="intra-class",
        kd_synthetic=True,
        task_synthetic=True,
        hp="distill",
    ),
    RunSpec("distill kd:D_sd-intra task:D_train", "distill", teacher="probed", mixer="intra-class", kd_synthetic=True, hp="distill"),
    replace(PROCEDURE_SPECS["distill+sd"], name="distill kd:D_sd task:D_train"),
]

TABLE6_SPECS = [
    replace(PROCEDURE_SPECS["finetune-student"], name="L_task"),
    RunSpec("L_d", "distill", teacher="probed", alpha=1.0, hp="distill"),
    RunSpec("L_d +sd", "distill", teacher="probed", mixer="inter-class", kd_synthetic=True, alpha=1.0, hp="distill"),
    replace(PROCEDURE_SPECS["distill"], name="L_task+L_d"),
    replace(PROCEDURE_SPECS["distill+sd"], name="L_task+L_d +sd"),
]

ABLATION_COUNTERS = ("syn_task", "syn_kd", "label_reads")


# ---------------------------------------------------------------------------
# experiment context


class _Failed:
    def __init__(self, exc: BaseException):
        self.exc = exc


class Experiment:
    """Generated task, pretrained encoders, teachers and finished cells for one config."""

    def __init__(self, cfg: ExperimentConfig, threads: int = 1, encoder_dir: str | Path | None = None):
        cfg.validate()
        self.cfg = cfg
        self.threads = threads
        self.encoder_dir = Path(encoder_dir) if encoder_dir else None
        self.generated = generate_task(cfg.task, cfg.seed)
        self.splits = self.generated.splits
        self._cache: dict = {}
        self._locks: dict = {}
        self._guard = threading.Lock()

    # -- caching -------------------------------------------------------------

    def _cached(self, key, build):
        with self._guard:
            lock = self._locks.setdefault(key, threading.Lock())
        with lock:
            if key not in self._cache:
                try:
                    self._cache[key] = build()
                except RUN_FAILURES + (GridError,) as exc:
                    self._cache[key] = _Failed(exc)
        value = self._cache[key]
        if isinstance(value, _Failed):
            raise value.exc
        return value

    # -- building blocks -----------------------------------------------------

    def _fingerprint(self, which: str) -> str:
        payload = repr((self.cfg.seed, to_dict(self.cfg.task), to_dict(getattr(self.cfg, f"{which}_encoder")), to_dict(getattr(self.cfg, f"pretrain_{which}"))))
        return hashlib.sha256(payload.encode()).hexdigest()

    def encoder(self, which: str) -> Encoder:
        """Pretrained encoder (``teacher`` or ``student``); loaded from ``encoder_dir`` when it matches."""

        def build():
            fp = self._fingerprint(which)
            if self.encoder_dir is not None:
                path = self.encoder_dir / f"{which}.npz"
                tag = self.encoder_dir / f"{which}.fingerprint"
                if path.exists() and tag.exists() and tag.read_text().strip() == fp:
                    return load_checkpoint(path)
            spec = getattr(self.cfg, f"{which}_encoder")
            pcfg = getattr(self.cfg, f"pretrain_{which}")
            enc = pretrain_encoder(self.generated.pretrain, spec, replace(pcfg, seed=derive_seed(self.cfg.seed, "pretrain", which)))
            if self.encoder_dir is not None:
                save_checkpoint(enc, self.encoder_dir / f"{which}.npz")
                (self.encoder_dir / f"{which}.fingerprint").write_text(fp + "\n")
            return enc

        return self._cached(("encoder", which), build)

    def head_spec(self, which: str) -> HeadSpec:
        choice = getattr(self.cfg, f"{which}_head")
        enc_spec = getattr(self.cfg, f"{which}_encoder")
        return choice.resolve(enc_spec.output_dim, self.cfg.task.num_classes)

    def base_config(self, spec: RunSpec) -> TrainConfig:
        base = {"probe": self.cfg.probe, "finetune": self.cfg.finetune, "distill": self.cfg.distill}[spec.kind]
        loss = base.loss
        if spec.loss_kind is not None:
            loss = replace(loss, kind=spec.loss_kind)
        if spec.alpha is not None:
            loss = replace(loss, alpha=spec.alpha)
        return replace(
            base,
            loss=loss,
            use_synthetic_for_kd=spec.kd_synthetic,
            use_synthetic_for_task=spec.task_synthetic,
            strict_batches=base.strict_batches or self.cfg.strict_batches,
        )

    def dsd(self, mixer_kind: str | None, student_seed: int) -> AugmentedDataset:
        train = self.splits.train
        if mixer_kind is None:
            return AugmentedDataset.plain(train)

        def build():
            mixer = replace(self.cfg.mixer, kind=mixer_kind)
            enc = self.encoder("teacher") if mixer.interpolation == "encoder-latent" else None
            return build_dsd(train, mixer, self.cfg.multiplier, derive_seed(self.cfg.seed, "dsd", mixer_kind, student_seed), enc)

        return self._cached(("dsd", mixer_kind, student_seed), build)

    def register_dsd(self, name: str, student_seed: int, dsd: AugmentedDataset) -> None:
        """Make an externally built synthetic set available as mixer ``name``."""
        with self._guard:
            self._cache[("dsd", name, student_seed)] = dsd

    def teacher(self, kind: str, teacher_seed: int) -> Model:
        spec = {
            "probed": PROCEDURE_SPECS["probe-teacher"],
            "finetuned": PROCEDURE_SPECS["finetune-teacher"],
            "self": PROCEDURE_SPECS["probe-student"],
        }[kind]
        return self._cached(("teacher", kind, teacher_seed), lambda: self.train(spec, teacher_seed, None)[0])

    def hparams(self, key: str) -> tuple[float, float]:
        grid = self.cfg.grids.get(key)
        if grid is None:
            base = self.base_config(PROCEDURE_SPECS.get(key, PROCEDURE_SPECS["distill"]))
            return base.optimizer.lr, base.optimizer.weight_decay
        return self.grid(key).best

    def grid(self, key: str) -> GridOutcome:
        """Tune ``key`` on the validation split using the first seeds."""
        spec = PROCEDURE_SPECS[key]
        t0, s0 = self.cfg.teacher_seeds[0], self.cfg.seeds[0]
        if spec.teacher is not None:
            self.teacher(spec.teacher, t0)

        def score(lr, wd):
            model, _ = self.train(spec, t0 if spec.model == "teacher" else s0, t0, (lr, wd))
            return evaluate(model, self.splits.val)

        return self._cached(("grid", key), lambda: run_grid(score, self.cfg.grids[key].points(), self.threads))

    # -- one run ---------------------------------------------------------------

    def train(self, spec: RunSpec, seed: int, teacher_seed: int | None, hp: tuple[float, float] | None = None):
        """Train one model for ``spec``; ``seed`` seeds the trained model, ``teacher_seed`` picks the teacher."""
        lr, wd = hp if hp is not None else self.hparams(spec.hp)
        base = self.base_config(spec)
        run_seed = derive_seed(self.cfg.seed, spec.model, seed)
        cfg = replace(base, seed=run_seed, optimizer=replace(base.optimizer, lr=lr, weight_decay=wd))
        enc = self.encoder(spec.model)
        head = self.head_spec(spec.model)
        if spec.kind == "probe":
            return probe(enc, self.splits, head, cfg)
        model = Model(copy.deepcopy(enc), Head(head, run_seed), encoder_frozen=False)
        dsd = self.dsd(spec.mixer, seed)
        if spec.kind == "finetune":
            return finetune(model, self.splits, cfg, dsd=dsd if spec.mixer else None)
        teacher = self.teacher(spec.teacher, teacher_seed)
        return distill(model, teacher, dsd, cfg, val=self.splits.val)

    # -- cells -----------------------------------------------------------------

    def pairs(self, spec: RunSpec) -> list[tuple[str, int, int | None]]:
        """(label, seed, teacher_seed) for every cell of ``spec``."""
        cfg = self.cfg
        if spec.kind != "distill":
            seeds = cfg.teacher_seeds if spec.model == "teacher" else cfg.seeds
            prefix = "t" if spec.model == "teacher" else "s"
            return [(f"{prefix}{s}", s, None) for s in seeds]
        if cfg.pairing == "paired":
            return [(f"t{t}-s{s}", s, t) for t, s in zip(cfg.teacher_seeds, cfg.seeds)]
        return [(f"t{t}-s{s}", s, t) for t in cfg.teacher_seeds for s in cfg.student_seeds]

    def cell(self, spec: RunSpec, seed: int, teacher_seed: int | None) -> dict:
        def build():
            start = time.perf_counter()
            model, log = self.train(spec, seed, teacher_seed)
            return {
                "accuracy": evaluate(model, self.splits.test),
                "seconds": time.perf_counter() - start,
                "syn_task": log.synthetic_in_task,
                "syn_kd": log.synthetic_in_kd,
                "label_reads": log.label_rows_in_loss,
            }

        return self._cached(("cell", spec.signature, seed, teacher_seed), build)

    def prepare(self, specs: list[RunSpec]) -> None:
        """Resolve grids, teachers and synthetic sets ahead of the parallel cell dispatch."""
        for which in sorted({s.model for s in specs} | ({"teacher"} if any(s.teacher == "probed" or s.teacher == "finetuned" for s in specs) else set())):
            self.encoder(which)
        for key in sorted({s.hp for s in specs}):
            try:
                self.hparams(key)
            except (GridError,) + RUN_FAILURES:
                pass
        teachers = sorted({(s.teacher, t) for s in specs for _, _, t in self.pairs(s) if s.teacher})

        def make(item):
            try:
                self.teacher(*item)
            except RUN_FAILURES:
                pass

        pmap(make, teachers, self.threads)
        for s in specs:
            for _, seed, _ in self.pairs(s):
                if s.mixer:
                    try:
                        self.dsd(s.mixer, seed)
                    except RUN_FAILURES:
                        pass

    def run_specs(self, specs: list[RunSpec], title: str, baseline: str | None, columns=()) -> ReportTable:
        self.prepare(specs)
        jobs = [(spec, label, seed, t) for spec in specs for label, seed, t in self.pairs(spec)]

        def run(job):
            spec, label, seed, t = job
            try:
                return self.cell(spec, seed, t)
            except (GridError,) + RUN_FAILURES as exc:
                return {"error": f"{label}: {type(exc).__name__}: {exc}"}

        outcomes = pmap(run, jobs, self.threads)
        rows = []
        for spec in specs:
            mine = [(job, out) for job, out in zip(jobs, outcomes) if job[0] is spec]
            try:
                lr, wd = self.hparams(spec.hp)
            except (GridError,) + RUN_FAILURES:
                lr = wd = None
            row = RunResult(
                spec.name,
                spec.model,
                spec.teacher_label,
                spec.mixer is not None,
                lr=lr,
                weight_decay=wd,
            )
            errors = [out["error"] for _, out in mine if "error" in out]
            ok = [(job, out) for job, out in mine if "error" not in out]
            row.per_seed = [(job[1], out["accuracy"]) for job, out in ok]
            row.wall_time = sum(out["seconds"] for _, out in ok)
            row.counters = {c: int(sum(out[c] for _, out in ok)) for c in ABLATION_COUNTERS}
            if errors:
                row.error = "; ".join(errors)
            rows.append(row.finalize())
        return ReportTable(title, rows, baseline, tuple(columns))


# ---------------------------------------------------------------------------
# public entry points


def run_matrix(cfg: ExperimentConfig, threads: int = 1, experiment: Experiment | None = None) -> ReportTable:
    """Run every requested procedure over its seeds and tabulate against the finetuned student."""
    exp = experiment or Experiment(cfg, threads)
    specs = [PROCEDURE_SPECS[p] for p in cfg.procedures if p != "ablations"]
    baseline = "finetune-student" if "finetune-student" in cfg.procedures else None
    return exp.run_specs(specs, "procedure matrix (test accuracy)", baseline)


def run_ablation_table5(cfg: ExperimentConfig, threads: int = 1, experiment: Experiment | None = None) -> ReportTable:
    """Routing of intra-class synthetics into the task loss, the distillation loss, or both."""
    exp = experiment or Experiment(cfg, threads)
    return exp.run_specs(TABLE5_SPECS, "synthetic data per loss", TABLE5_SPECS[1].name, ABLATION_COUNTERS)


def run_ablation_table6(cfg: ExperimentConfig, threads: int = 1, experiment: Experiment | None = None) -> ReportTable:
    """Task loss only, distillation loss only, and both, each with and without synthetics."""
    exp = experiment or Experiment(cfg, threads)
    return exp.run_specs(TABLE6_SPECS, "loss terms", TABLE6_SPECS[0].name, ABLATION_COUNTERS)

