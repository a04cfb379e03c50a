"""Orchestration of the four-step transfer procedure, its comparators and ablations.

One ``Workbench`` per seed owns the datasets and memoizes every trained network
by a role key, so arms that need the same network (for example the default
transfer run and the level-4 arm of the level ablation) share it instead of
retraining. Each role gets its own derived RNG seed, so a network's weights do
not depend on which other arms ran before it.
"""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from .config import ExperimentPlan, to_dict
from .metrics import DEPTH_METRIC_NAMES
from .nets import STAGE_WIDTHS, Module, MultiTaskNetwork, TaskNetwork, TransferNet
from .scenegen import (
    DEPTH_PGM_SCALE,
    NUM_CLASSES,
    PairedDatasets,
    Split,
    build_dataset,
    write_pgm,
    write_ppm,
)
from .tensor import Tensor
from .training import (
    DEPTH,
    SEG,
    LossRecord,
    TrainConfig,
    TrainingAborted,
    encode_all,
    evaluate_outputs,
    out_channels,
    predict_batches,
    to_prediction,
    train_multitask,
    train_task_network,
    train_transfer,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
ARMS = ("atdt", "baseline", "oracle", "multitask", "levels", "non_shared", "no_bn", "proxy")
SEG_PALETTE = np.array([
    [128, 64, 128],  # ground
    [70, 130, 180],  # sky
    [70, 70, 70],  # building
    [0, 0, 142],  # vehicle
    [153, 153, 153],  # pole
    [220, 220, 0],  # sign
], dtype=np.float64) / 255.0


def tasks(direction: str) -> tuple[str, str]:
    """(T1, T2) for a direction: dep2sem transfers depth features to segmentation."""
    return (DEPTH, SEG) if direction == "dep2sem" else (SEG, DEPTH)


def higher_is_better(metric: str) -> bool:
    return metric in ("miou", "acc") or metric.startswith("iou_") or metric.startswith("delta")


def derive_seed(seed: int, key: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(key.encode())]).generate_state(1)[0])


def atdt_forward(n1: TaskNetwork, g: TransferNet, n2: TaskNetwork, x: Tensor, level: int) -> Tensor:
    """Inference of the transferred model: D2(G(E1(x)))."""
    return n2.decode(g(n1.encode(x, level)), level)


class ArmFailed(RuntimeError):
    pass


@dataclass
class Trained:
    net: Module
    records: list[LossRecord]
    seconds: float


class Workbench:
    """Datasets plus lazily trained, memoized networks for one seed."""

    def __init__(self, plan: ExperimentPlan, seed: int, run_dir: Path | None = None):
        self.plan = plan
        self.seed = seed
        self.t1, self.t2 = tasks(plan.direction)
        self.run_dir = run_dir
        self._nets: dict[str, Trained | Exception] = {}
        d = plan.data
        t0 = time.perf_counter()
        self.data: PairedDatasets = build_dataset(
            d.n_train, d.n_val, d.n_test, d.style_a, d.style_b, seed=seed, paired=d.paired,
            resolution=(d.resolution, d.resolution), grammar=d.grammar)
        self._proxy_b: Split | None = None
        self.data_seconds = time.perf_counter() - t0

    # ---------------------------------------------------------------- data
    def b_train(self, task: str, proxy: bool) -> Split:
        """B-train as seen by a network supervised on ``task``; depth may be proxy labels."""
        if task != DEPTH or not proxy:
            return self.data.B.train
        if self._proxy_b is None:
            p = self.plan.proxy
            self._proxy_b = self.data.B.train.with_proxy_depth(p.noise_sigma, p.hole_fraction,
                                                               derive_seed(self.seed, "proxy"))
        return self._proxy_b

    # ------------------------------------------------------------- networks
    def _checkpoint_dir(self) -> Path | None:
        if self.run_dir is None or not self.plan.save_checkpoints:
            return None
        return self.run_dir / "checkpoints"

    def _get(self, key: str, build: Callable[[int], tuple[Module, list[LossRecord]]]) -> Trained:
        if key not in self._nets:
            t0 = time.perf_counter()
            try:
                net, records = build(derive_seed(self.seed, key))
                self._nets[key] = Trained(net, records, time.perf_counter() - t0)
                ckdir = self._checkpoint_dir()
                if ckdir is not None:
                    ckdir.mkdir(parents=True, exist_ok=True)
                    checkpoint.save(ckdir / f"{key}.ckpt", net.state_dict())
            except TrainingAborted as exc:
                self._nets[key] = exc
        got = self._nets[key]
        if isinstance(got, Exception):
            raise ArmFailed(f"{key}: {got}") from got
        return got

    def _task_cfg(self, key: str) -> TrainConfig:
        c = self.plan.train_task
        return TrainConfig(c.steps, c.batch_size, c.lr, derive_seed(self.seed, key + "/batches"),
                           c.eval_every, c.eval_batch)

    def task_net(self, task: str, domains: str, bn: bool, proxy: bool = False) -> TaskNetwork:
        """``domains`` is "AB" (batches split evenly), "A" or "B"."""
        proxy = proxy and "B" in domains and task == DEPTH
        key = f"{task}_{domains}" + ("" if bn else "_nobn") + ("_proxy" if proxy else "")

        def build(init_seed):
            net = TaskNetwork(out_channels(task), seed=init_seed, use_batchnorm=bn, name=key)
            sources = [{"A": self.data.A.train, "B": self.b_train(task, proxy)}[d] for d in domains]
            val = self.data.B.val if "B" in domains else self.data.A.val
            return train_task_network(net, sources, task, self._task_cfg(key), val=val,
                                      checkpoint_dir=self._checkpoint_dir(), tag=key)

        return self._get(key, build).net

    def n1(self, bn: bool = True, proxy: bool = False) -> TaskNetwork:
        return self.task_net(self.t1, "AB", bn, proxy)

    def n2(self, bn: bool = True) -> TaskNetwork:
        return self.task_net(self.t2, "A", bn)

    def oracle(self, proxy: bool = False) -> TaskNetwork:
        return self.task_net(self.t2, "B", True, proxy)

    def transfer(self, level: int, bn: bool = True, shared: bool = True, proxy: bool = False) -> TransferNet:
        key = f"G_L{level}" + ("" if bn else "_nobn") + ("" if shared else "_nonshared") + ("_proxy" if proxy else "")
        n2 = self.n2(bn)
        src = self.n1(bn, proxy) if shared else self.task_net(self.t1, "A", bn)

        def build(init_seed):
            c = self.plan.train_transfer
            cfg = TrainConfig(c.steps, c.batch_size, c.lr, derive_seed(self.seed, key + "/batches"),
                              c.eval_every, c.eval_batch)
            g = TransferNet(STAGE_WIDTHS[level - 1], seed=init_seed, use_batchnorm=bn, name=key)
            return train_transfer(g, src, n2, self.data.A.train, cfg, level=level, val_a=self.data.A.val,
                                  loss_kind=self.plan.transfer_loss, checkpoint_dir=self._checkpoint_dir(),
                                  tag=key)

        return self._get(key, build).net

    def multitask(self) -> MultiTaskNetwork:
        key = "multitask"

        def build(init_seed):
            net = MultiTaskNetwork(out_channels(self.t1), out_channels(self.t2), seed=init_seed, name=key)
            a = self.data.A.train
            return train_multitask(net, [a, self.b_train(self.t1, self.plan.proxy_labels_on_b)], a,
                                   self.t1, self.t2, self._task_cfg(key),
                                   checkpoint_dir=self._checkpoint_dir(), tag=key)

        return self._get(key, build).net

    def curves(self) -> list[tuple[str, LossRecord]]:
        return [(k, r) for k, t in self._nets.items() if isinstance(t, Trained) for r in t.records]

    def seconds(self) -> dict[str, float]:
        return {k: t.seconds for k, t in self._nets.items() if isinstance(t, Trained)}

    # ------------------------------------------------------------ inference
    def predict(self, fn: Callable[[Tensor], Tensor], split: Split) -> np.ndarray:
        return predict_batches(fn, split.images, self.plan.train_task.eval_batch)

    def atdt_fn(self, level: int, bn: bool = True, shared: bool = True, proxy: bool = False,
                domain: str = "B") -> Callable[[Tensor], Tensor]:
        g = self.transfer(level, bn, shared, proxy)
        n2 = self.n2(bn)
        if shared:
            n1 = self.n1(bn, proxy)
        else:
            n1 = self.task_net(self.t1, domain, bn, proxy)
        return lambda x: atdt_forward(n1, g, n2, x, level)


# ---------------------------------------------------------------- results
def _record(method: str, variant: str, direction: str, domain: str, seed: int,
            metrics: dict[str, float] | None = None, error: str | None = None) -> dict:
    rec = {"method": method, "variant": variant, "direction": direction, "domain": domain,
           "seed": int(seed), "status": "ok" if error is None else "failed"}
    if error is None:
        rec["metrics"] = {k: float(v) for k, v in metrics.items()}
    else:
        rec["error"] = error
    return rec


@dataclass
class RunResult:
    """Metric records of every requested arm, per seed, plus where they were written."""

    plan: ExperimentPlan
    records: list[dict] = field(default_factory=list)
    run_dirs: dict[int, Path] = field(default_factory=dict)
    timings: dict[int, dict[str, float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.records)

    def select(self, method: str, domain: str = "B", variant: str = "default") -> list[dict]:
        return [r for r in self.records
                if r["method"] == method and r["domain"] == domain and r["variant"] == variant]

    def values(self, method: str, metric: str, domain: str = "B", variant: str = "default") -> list[float]:
        return [r["metrics"][metric] for r in self.select(method, domain, variant) if r["status"] == "ok"]

    def mean(self, method: str, metric: str, domain: str = "B", variant: str = "default") -> float:
        vals = self.values(method, metric, domain, variant)
        return float(np.mean(vals)) if vals else float("nan")


def _eval(bench: Workbench, task: str, fn, domain: str) -> dict[str, float]:
    split = getattr(bench.data, domain).test
    return evaluate_outputs(task, bench.predict(fn, split), split)


def _feature_magnitude(bench: Workbench, bn: bool, domain: str) -> dict[str, float]:
    """Scale of the T1 encoder features fed to G, on held-out images.

    ``mean_abs`` is the reported magnitude; ``rms`` and ``max_abs`` show the tails.
    """
    n1 = bench.n1(bn)
    split = getattr(bench.data, domain).test
    feats = encode_all(n1, split.images, bench.plan.split_level, bench.plan.train_task.eval_batch)
    return {"mean_abs": float(np.mean(np.abs(feats))), "rms": float(np.sqrt(np.mean(feats ** 2))),
            "max_abs": float(np.max(np.abs(feats)))}


def _arm_jobs(bench: Workbench, arm: str) -> list[tuple[str, str, str, Callable[[], dict]]]:
    """(method, variant, domain, thunk) evaluations that make up one arm."""
    plan, t1, t2 = bench.plan, bench.t1, bench.t2
    level = plan.split_level
    shared = plan.shared_encoder
    bn = plan.use_batchnorm
    proxy = plan.proxy_labels_on_b
    jobs = []
    if arm == "atdt":
        for dom in ("B", "A"):
            jobs.append(("atdt", "default", dom,
                         lambda dom=dom: _eval(bench, t2, bench.atdt_fn(level, bn, shared, proxy, dom), dom)))
        # how well N1 itself solves T1, which bounds what G can transfer
        for dom in ("B", "A"):
            jobs.append(("n1", "default", dom,
                         lambda dom=dom: _eval(bench, t1, bench.n1(bn, proxy) if shared
                                               else bench.task_net(t1, dom, bn, proxy), dom)))
    elif arm == "baseline":
        for dom in ("B", "A"):
            jobs.append(("baseline", "default", dom, lambda dom=dom: _eval(bench, t2, bench.n2(bn), dom)))
    elif arm == "oracle":
        jobs.append(("oracle", "default", "B", lambda: _eval(bench, t2, bench.oracle(proxy), "B")))
    elif arm == "multitask":
        def mt_fn(x):
            return bench.multitask()(x)[1]
        for dom in ("B", "A"):
            jobs.append(("multitask", "default", dom, lambda dom=dom: _eval(bench, t2, mt_fn, dom)))
    elif arm == "levels":
        for lv in (1, 2, 3, 4):
            for dom in ("B", "A"):
                jobs.append(("atdt", f"L{lv}", dom,
                             lambda lv=lv, dom=dom: _eval(bench, t2, bench.atdt_fn(lv, bn, True, proxy, dom), dom)))
    elif arm == "non_shared":
        for dom in ("B", "A"):
            jobs.append(("atdt", "non_shared", dom,
                         lambda dom=dom: _eval(bench, t2, bench.atdt_fn(level, bn, False, proxy, dom), dom)))
    elif arm == "no_bn":
        for dom in ("B", "A"):
            jobs.append(("atdt", "no_bn", dom,
                         lambda dom=dom: _eval(bench, t2, bench.atdt_fn(level, False, shared, proxy, dom), dom)))
            jobs.append(("baseline", "no_bn", dom,
                         lambda dom=dom: _eval(bench, t2, bench.n2(False), dom)))
        for variant, flag in (("bn", True), ("no_bn", False)):
            for dom in ("B", "A"):
                jobs.append(("feature_magnitude", variant, dom,
                             lambda flag=flag, dom=dom: _feature_magnitude(bench, flag, dom)))
    elif arm == "proxy":
        for dom in ("B", "A"):
            jobs.append(("atdt", "proxy", dom,
                         lambda dom=dom: _eval(bench, t2, bench.atdt_fn(level, bn, shared, True, dom), dom)))
    else:
        raise ValueError(f"unknown arm {arm!r}")
    return jobs


def _colorize(labels: np.ndarray) -> np.ndarray:
    return SEG_PALETTE[np.asarray(labels).reshape(labels.shape[-2:])].transpose(2, 0, 1)


def _write_target(path_stem: Path, task: str, value: np.ndarray) -> None:
    if task == SEG:
        write_ppm(path_stem.with_suffix(".ppm"), _colorize(value))
    else:
        write_pgm(path_stem.with_suffix(".pgm"), value * DEPTH_PGM_SCALE, 65535)


def _write_samples(bench: Workbench, arms: list[str], out: Path) -> None:
    k = min(bench.plan.qualitative_samples, len(bench.data.B.test))
    if k <= 0:
        return
    out.mkdir(parents=True, exist_ok=True)
    split = bench.data.B.test
    t2 = bench.t2
    plan = bench.plan
    fns = {}
    if "atdt" in arms:
        fns["atdt"] = lambda: bench.atdt_fn(plan.split_level, plan.use_batchnorm, plan.shared_encoder,
                                            plan.proxy_labels_on_b, "B")
    if "baseline" in arms:
        fns["baseline"] = lambda: bench.n2(plan.use_batchnorm)
    if "oracle" in arms:
        fns["oracle"] = lambda: bench.oracle(plan.proxy_labels_on_b)
    gt = split.labels[:k] if t2 == SEG else split.depth[:k]
    for i in range(k):
        write_ppm(out / f"{i:03d}_input.ppm", split.images[i])
        _write_target(out / f"{i:03d}_gt", t2, gt[i])
    for name, make in fns.items():
        try:
            fn = make()
        except ArmFailed:
            continue
        with_batch = predict_batches(fn, split.images[:k], k)
        pred = to_prediction(t2, with_batch)
        for i in range(k):
            _write_target(out / f"{i:03d}_{name}", t2, pred[i])


def _write_curves(path: Path, curves: list[tuple[str, LossRecord]]) -> None:
    keys: list[str] = []
    for _, r in curves:
        for k in r.val:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["net", "step", "loss", *keys])
        for name, r in curves:
            w.writerow([name, r.step, repr(r.train_loss), *[repr(r.val[k]) if k in r.val else "" for k in keys]])


def metrics_json(records: list[dict]) -> str:
    return json.dumps(records, indent=1, sort_keys=True) + "\n"


def run_seed(plan: ExperimentPlan, seed: int, arms: list[str], out: str | Path | None = None
             ) -> tuple[list[dict], dict[str, float], Path | None]:
    """Run the requested arms for one seed. Failed arms become failure records."""
    bad = [a for a in arms if a not in ARMS]
    if bad:
        raise ValueError(f"unknown arms {bad}")
    run_dir = Path(out) / plan.name / str(seed) if out is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    bench = Workbench(plan, seed, run_dir)
    if run_dir is not None:
        _write_manifest(run_dir / "manifest.json", plan, seed, arms, bench, checkpoints={})
    records = []
    arm_seconds = {}
    for arm in arms:
        t0 = time.perf_counter()
        for method, variant, dom, thunk in _arm_jobs(bench, arm):
            try:
                rec = _record(method, variant, plan.direction, dom, seed, thunk())
            except ArmFailed as exc:
                log.warning("seed %d %s/%s/%s failed: %s", seed, method, variant, dom, exc)
                rec = _record(method, variant, plan.direction, dom, seed, error=str(exc))
            records.append(rec)
        # wall time of an arm includes training any network it is first to need
        arm_seconds[f"arm/{arm}"] = time.perf_counter() - t0
    timings = {"data": bench.data_seconds, **bench.seconds(), **arm_seconds}
    if run_dir is not None:
        ck = sorted(p.name for p in (run_dir / "checkpoints").glob("*.ckpt")) if plan.save_checkpoints else []
        _write_manifest(run_dir / "manifest.json", plan, seed, arms, bench,
                        checkpoints={name: f"checkpoints/{name}" for name in ck})
        (run_dir / "metrics.json").write_text(metrics_json(records))
        (run_dir / "timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
        _write_curves(run_dir / "curves.csv", bench.curves())
        _write_samples(bench, arms, run_dir / "samples")
    return records, timings, run_dir


def _write_manifest(path: Path, plan: ExperimentPlan, seed: int, arms: list[str], bench: Workbench,
                    checkpoints: dict[str, str]) -> None:
    config = to_dict(plan)
    config["seeds"] = [seed]
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "seed": int(seed),
        "arms": list(arms),
        "config": config,
        "dataset": bench.data.manifest,
        "checkpoints": checkpoints,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _run_one(args):
    plan, seed, arms, out = args
    records, timings, run_dir = run_seed(plan, seed, arms, out)
    return seed, records, timings, run_dir


def run_arms(plan: ExperimentPlan, arms: list[str], out: str | Path | None = None, jobs: int = 1) -> RunResult:
    """Run ``arms`` for every seed of ``plan``; seeds may run in parallel processes."""
    plan.validate()
    work = [(plan, s, list(arms), out) for s in plan.seeds]
    if jobs > 1 and len(work) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_one, work))
    else:
        done = [_run_one(w) for w in work]
    result = RunResult(plan)
    for seed, records, timings, run_dir in done:
        result.records.extend(records)
        result.timings[seed] = timings
        if run_dir is not None:
            result.run_dirs[seed] = run_dir
    return result


def rerun_manifest(manifest: str | Path, out: str | Path) -> RunResult:
    """Re-execute the run described by a manifest into ``out``."""
    from .config import plan_from_dict
    doc = json.loads(Path(manifest).read_text())
    plan = plan_from_dict(doc["config"])
    return run_arms(plan, doc["arms"], out)


# ------------------------------------------------------------ operations
def methods_to_arms(methods: list[str]) -> list[str]:
    return [m for m in ARMS if m in methods]


def run_atdt(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    """The transfer pipeline plus whichever comparators the plan lists."""
    return run_arms(plan, methods_to_arms(["atdt", *plan.methods]), out, jobs)


def run_baseline(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    return run_arms(plan, ["baseline"], out, jobs)


def run_oracle(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    return run_arms(plan, ["oracle"], out, jobs)


def run_multitask_comparator(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    return run_arms(plan, ["atdt", "multitask"], out, jobs)


def ablate_transfer_level(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    """One G per level 1..4 on shared N1/N2; records ``atdt`` variants L1..L4 on A and B."""
    return run_arms(plan, ["levels"], out, jobs)


def ablate_shared_encoder(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    """Shared N1 on A and B against separate N1^A / N1^B with identical budgets."""
    return run_arms(plan, ["atdt", "non_shared"], out, jobs)


def ablate_batchnorm(plan: ExperimentPlan, out: str | Path | None = None, jobs: int = 1) -> RunResult:
    """Every network with and without batch norm, plus encoder feature magnitudes."""
    return run_arms(plan, ["atdt", "baseline", "no_bn"], out, jobs)


def depth_metric_names() -> tuple[str, ...]:
    return DEPTH_METRIC_NAMES


def seg_metric_names() -> tuple[str, ...]:
    return ("miou", "acc", *[f"iou_{i}" for i in range(NUM_CLASSES)])


def metric_names(direction: str) -> tuple[str, ...]:
    return seg_metric_names() if tasks(direction)[1] == SEG else depth_metric_names()


__all__ = [
    "ARMS", "ArmFailed", "RunResult", "Workbench", "ablate_batchnorm", "ablate_shared_encoder",
    "ablate_transfer_level", "atdt_forward", "derive_seed", "higher_is_better", "metric_names",
    "rerun_manifest", "run_arms", "run_atdt", "run_baseline", "run_multitask_comparator",
    "run_oracle", "run_seed", "tasks",
]
