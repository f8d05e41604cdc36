"""Training strategies under one harness.

Every iteration of the adversarial strategies performs three isolated
updates on the same mini-batch, each after a fresh forward pass:

  (a) curriculum scorer: descend -lam * weighted-domain loss (cmss only),
  (b) discriminator:     descend  lam * domain loss,
  (c) feature+classifier: descend classification loss - lam * weighted
      domain loss, realized through gradient reversal with the weights
      held constant.

`dann` is the same machinery with weights pinned to one and no scorer
update; `iwan` derives its weights from the discriminator instead of the
scorer; `source_only` trains the class head alone. A StepReport always
describes the state the step started from.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from .data import Batch, DomainDataset, make_batcher
from .networks import (
    ArchitectureSpec,
    ModelBundle,
    grad_reverse,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .objectives import (
    Schedule,
    WeightVector,
    cmss_objective,
    loss_cls,
    loss_dom,
    loss_wdom,
    normalize_weights,
)

STRATEGIES = ("cmss", "dann", "iwan", "source_only")

METRICS_COLUMNS = (
    "iter",
    "lambda",
    "L_cls",
    "L_dom",
    "L_wdom",
    "cmss_obj",
    "w_mean",
    "w_var",
    "target_acc",
)


class ConfigError(ValueError):
    """Invalid or inconsistent training configuration."""


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the run is aborted, never silently skipped."""


@dataclass(frozen=True)
class TrainConfig:
    strategy: str
    n_iter: int
    arch: ArchitectureSpec
    batch_source: int = 32
    batch_target: int = 32
    gamma: float = 10.0
    optimizer: str = "sgd"
    momentum: float = 0.9
    lr_features: float = 0.01
    lr_discriminator: float = 0.01
    lr_curriculum: float | None = None  # cmss only; resolved default 0.001
    discriminator_weighted: bool = False  # cmss only: weighted psi update
    seed: int = 0
    eval_every: int = 0  # 0 disables periodic evaluation
    snapshot_every: int = 0  # 0 disables intermediate checkpoints/dumps

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.n_iter < 0:
            raise ConfigError("n_iter must be >= 0")
        if self.batch_source <= 0 or self.batch_target <= 0:
            raise ConfigError("batch sizes must be positive")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if self.optimizer != "sgd":
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        for name in ("lr_features", "lr_discriminator"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.strategy != "cmss":
            if self.lr_curriculum is not None:
                raise ConfigError("lr_curriculum only applies to the cmss strategy")
            if self.discriminator_weighted:
                raise ConfigError("discriminator_weighted only applies to cmss")
        elif self.lr_curriculum is not None and self.lr_curriculum < 0:
            raise ConfigError("lr_curriculum must be >= 0")
        if self.eval_every < 0 or self.snapshot_every < 0:
            raise ConfigError("eval_every/snapshot_every must be >= 0")

    def resolved_lr_curriculum(self) -> float:
        return 0.001 if self.lr_curriculum is None else self.lr_curriculum

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["arch"] = asdict(self.arch)
        d["arch"]["input_shape"] = list(self.arch.input_shape)
        return d


@dataclass(frozen=True)
class StepReport:
    """Losses and weight statistics at the start of one training step.
    Domain fields are None for the source_only strategy."""

    t: int
    lam: float
    l_cls: float
    l_dom: float | None
    l_wdom: float | None
    cmss_obj: float | None
    w_mean: float | None
    w_var: float | None


@dataclass
class TrainState:
    config: TrainConfig
    bundle: ModelBundle
    schedule: Schedule
    opt_fc: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer | None
    opt_g: torch.optim.Optimizer | None
    t: int = 0
    lam: float = 0.0
    reports: deque[StepReport] = field(default_factory=lambda: deque(maxlen=256))


def init_state(config: TrainConfig, bundle: ModelBundle | None = None) -> TrainState:
    config.validate()
    if bundle is None:
        bundle = init_parameters(config.arch, config.seed)
    opt_fc = torch.optim.SGD(
        bundle.parameters_of("feature", "classifier"),
        lr=config.lr_features,
        momentum=config.momentum,
    )
    opt_d = opt_g = None
    if config.strategy != "source_only":
        opt_d = torch.optim.SGD(
            bundle.parameters_of("discriminator"),
            lr=config.lr_discriminator,
            momentum=config.momentum,
        )
    if config.strategy == "cmss":
        opt_g = torch.optim.SGD(
            bundle.parameters_of("curriculum"),
            lr=config.resolved_lr_curriculum(),
            momentum=config.momentum,
        )
    return TrainState(
        config=config,
        bundle=bundle,
        schedule=Schedule(n_iter=config.n_iter, gamma=config.gamma),
        opt_fc=opt_fc,
        opt_d=opt_d,
        opt_g=opt_g,
    )


class _trainable:
    """Enable gradients only for the named parameter groups."""

    def __init__(self, bundle: ModelBundle, *names: str):
        self.bundle = bundle
        self.names = set(names)

    def __enter__(self):
        self.saved = []
        for gname, mod in self.bundle.groups().items():
            on = gname in self.names
            for p in mod.parameters():
                self.saved.append((p, p.requires_grad))
                p.requires_grad_(on)

    def __exit__(self, *exc):
        for p, flag in self.saved:
            p.requires_grad_(flag)
        return False


def _step_weights(
    bundle: ModelBundle, xs: torch.Tensor, d_s: torch.Tensor, mode: str
) -> WeightVector:
    if mode == "uniform":
        return WeightVector(w=torch.ones_like(d_s), raw=torch.zeros_like(d_s))
    if mode == "curriculum":
        return normalize_weights(bundle.curriculum(xs))
    if mode == "discriminator":
        raw = 1.0 - d_s
        return WeightVector(w=raw * (raw.shape[0] / raw.sum()), raw=raw)
    raise ValueError(mode)


def _check_finite(report: StepReport) -> None:
    for name in ("l_cls", "l_dom", "l_wdom", "cmss_obj"):
        v = getattr(report, name)
        if v is not None and not math.isfinite(v):
            raise TrainingDiverged(f"{name} is non-finite at iteration {report.t}")


def _expect(state: TrainState, strategy: str) -> None:
    if state.config.strategy != strategy:
        raise ConfigError(f"state configured for {state.config.strategy!r}, not {strategy!r}")


def _adversarial_step(
    state: TrainState, batch: Batch, *, update_rho: bool, weight_mode: str
) -> StepReport:
    bundle = state.bundle
    t1 = state.t + 1
    lam = state.schedule.value(t1)
    xs = bundle.to_tensor(batch.source_x)
    xt = bundle.to_tensor(batch.target_x)
    ys = torch.as_tensor(batch.source_y, dtype=torch.long)

    # Report pass: every number reflects the parameters the step starts from.
    with torch.no_grad():
        fs = bundle.feature(xs)
        ft = bundle.feature(xt)
        d_s0 = bundle.discriminator(fs)
        d_t0 = bundle.discriminator(ft)
        w0 = _step_weights(bundle, xs, d_s0, weight_mode)
        report = StepReport(
            t=t1,
            lam=lam,
            l_cls=float(loss_cls(bundle.classifier(fs), ys)),
            l_dom=float(loss_dom(d_s0, d_t0)),
            l_wdom=float(loss_wdom(d_s0, d_t0, w0)),
            cmss_obj=float(cmss_objective(d_s0, w0)),
            w_mean=float(w0.w.mean()),
            w_var=float(w0.w.var(unbiased=False)),
        )
    _check_finite(report)

    # (a) curriculum scorer: min_rho -lam * L_wdom. Only the source half
    # depends on rho; discriminator outputs enter as constants.
    if update_rho:
        assert state.opt_g is not None
        with _trainable(bundle, "curriculum"):
            w = normalize_weights(bundle.curriculum(xs))
            loss_a = -lam * loss_wdom(d_s0, d_t0, w)
            state.opt_g.zero_grad()
            loss_a.backward()
            state.opt_g.step()

    # (b) discriminator: min_psi lam * L_dom (theta untouched so far, so the
    # report features equal a fresh forward bit-for-bit).
    assert state.opt_d is not None
    with _trainable(bundle, "discriminator"):
        d_s = bundle.discriminator(fs)
        d_t = bundle.discriminator(ft)
        if state.config.discriminator_weighted:
            with torch.no_grad():
                wb = _step_weights(bundle, xs, d_s0, weight_mode)
            loss_b = lam * loss_wdom(d_s, d_t, wb)
        else:
            loss_b = lam * loss_dom(d_s, d_t)
        state.opt_d.zero_grad()
        loss_b.backward()
        state.opt_d.step()

    # (c) feature/classifier: min_{theta,phi} L_cls - lam * L_wdom via
    # gradient reversal; weights enter as constants.
    with _trainable(bundle, "feature", "classifier"):
        fs2 = bundle.feature(xs)
        ft2 = bundle.feature(xt)
        logits = bundle.classifier(fs2)
        d_s2 = bundle.discriminator(grad_reverse(fs2, lam))
        d_t2 = bundle.discriminator(grad_reverse(ft2, lam))
        if weight_mode == "discriminator":
            wc = WeightVector(w=w0.w, raw=w0.raw)  # defined once per step
        else:
            with torch.no_grad():
                wc = _step_weights(bundle, xs, d_s0, weight_mode)
        loss_c = loss_cls(logits, ys) + loss_wdom(d_s2, d_t2, wc)
        state.opt_fc.zero_grad()
        loss_c.backward()
        state.opt_fc.step()

    state.t = t1
    state.lam = lam
    state.reports.append(report)
    return report


def train_step_cmss(state: TrainState, batch: Batch) -> StepReport:
    _expect(state, "cmss")
    return _adversarial_step(state, batch, update_rho=True, weight_mode="curriculum")


def train_step_dann(state: TrainState, batch: Batch) -> StepReport:
    _expect(state, "dann")
    return _adversarial_step(state, batch, update_rho=False, weight_mode="uniform")


def train_step_iwan(state: TrainState, batch: Batch) -> StepReport:
    _expect(state, "iwan")
    return _adversarial_step(state, batch, update_rho=False, weight_mode="discriminator")


def train_step_source_only(state: TrainState, batch: Batch) -> StepReport:
    _expect(state, "source_only")
    bundle = state.bundle
    t1 = state.t + 1
    lam = state.schedule.value(t1)
    xs = bundle.to_tensor(batch.source_x)
    ys = torch.as_tensor(batch.source_y, dtype=torch.long)
    with _trainable(bundle, "feature", "classifier"):
        loss = loss_cls(bundle.classifier(bundle.feature(xs)), ys)
        report = StepReport(
            t=t1, lam=lam, l_cls=float(loss),
            l_dom=None, l_wdom=None, cmss_obj=None, w_mean=None, w_var=None,
        )
        _check_finite(report)
        state.opt_fc.zero_grad()
        loss.backward()
        state.opt_fc.step()
    state.t = t1
    state.lam = lam
    state.reports.append(report)
    return report


STEP_FUNCTIONS: dict[str, Callable[[TrainState, Batch], StepReport]] = {
    "cmss": train_step_cmss,
    "dann": train_step_dann,
    "iwan": train_step_iwan,
    "source_only": train_step_source_only,
}


# ---------------------------------------------------------------------------
# Evaluation


def evaluate(bundle: ModelBundle, target_x: np.ndarray, target_y: np.ndarray) -> float:
    """Fraction of argmax(C(F(x))) == y over a labeled target hold-out;
    `target_y` holds 0-based class indices. Argmax returns the first
    maximum, so ties resolve to the lowest class index."""
    if target_x.shape[0] == 0:
        raise ValueError("empty test set")
    correct = 0
    with torch.no_grad():
        for start in range(0, target_x.shape[0], 512):
            xb = bundle.to_tensor(target_x[start : start + 512])
            pred = bundle.classifier(bundle.feature(xb)).argmax(dim=1)
            yb = torch.as_tensor(target_y[start : start + 512], dtype=torch.long)
            correct += int((pred == yb).sum())
    return correct / target_x.shape[0]


def evaluate_dataset(bundle: ModelBundle, dataset: DomainDataset) -> float:
    if dataset.target_test_x is None or dataset.target_test_y is None:
        raise ValueError("dataset carries no labeled target hold-out")
    return evaluate(
        bundle, dataset.target_test_x, dataset.class_indices(dataset.target_test_y)
    )


# ---------------------------------------------------------------------------
# The fit loop and its on-disk artifacts


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics_path: Path
    checkpoints: list[Path]
    weight_dumps: list[Path]
    feature_dumps: list[Path]


def config_hash(payload: dict[str, Any]) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _momentum_arrays(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    groups = state.bundle.groups()
    opts = {"feature": state.opt_fc, "classifier": state.opt_fc,
            "discriminator": state.opt_d, "curriculum": state.opt_g}
    for gname, mod in groups.items():
        opt = opts[gname]
        if opt is None:
            continue
        for pname, p in mod.named_parameters():
            buf = opt.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[f"{gname}/{pname}"] = buf.detach().numpy()
    return out


def _restore_momentum(state: TrainState, momentum: dict[str, np.ndarray]) -> None:
    opts = {"feature": state.opt_fc, "classifier": state.opt_fc,
            "discriminator": state.opt_d, "curriculum": state.opt_g}
    for gname, mod in state.bundle.groups().items():
        opt = opts[gname]
        if opt is None:
            continue
        for pname, p in mod.named_parameters():
            arr = momentum.get(f"{gname}/{pname}")
            if arr is not None:
                opt.state[p] = {
                    "momentum_buffer": torch.from_numpy(arr.copy()).to(p.dtype)
                }


def _fmt(v: float | int | None) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _write_run_config(
    run_dir: Path, config: TrainConfig, data_config: dict[str, Any] | None
) -> str:
    payload = {"train": config.to_dict(), "data": data_config or {}}
    h = config_hash(payload)
    doc = dict(payload, seed=config.seed, config_hash=h)
    (run_dir / "run_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return h

def _write_source_manifest(run_dir: Path, dataset: DomainDataset) -> None:
    # Diagnostics-side record: lets analysis tools resolve ids to labels and
    # hidden domains without the training interface ever exposing them.
    with open(run_dir / "source_manifest.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "label", "domain"])
        for i in range(dataset.n_source):
            writer.writerow([i, int(dataset.source_y[i]), int(dataset.source_d[i])])


def _checkpoint_extra(state: TrainState) -> dict[str, Any]:
    return {
        "t": state.t,
        "lambda": state.lam,
        "strategy": state.config.strategy,
        "n_iter": state.config.n_iter,
        # Batching and init randomness both derive from (seed, t) alone.
        "rng": {"seed": state.config.seed, "t": state.t},
    }


def _dump_weights_and_features(
    state: TrainState, dataset: DomainDataset, run_dir: Path, epoch: int
) -> tuple[Path, Path]:
    from .diagnostics import WeightDump, save_weight_dump, export_features

    bundle = state.bundle
    n = dataset.n_source
    raws = []
    with torch.no_grad():
        for start in range(0, n, 512):
            xb = bundle.to_tensor(dataset.source_x[start : start + 512])
            if state.config.strategy == "iwan":
                raws.append(1.0 - bundle.discriminator(bundle.feature(xb)))
            else:
                raws.append(bundle.curriculum(xb))
        raw = torch.cat(raws)
        if state.config.strategy == "iwan":
            normalized = raw * (n / raw.sum())
        else:
            normalized = normalize_weights(raw).w
    dump = WeightDump(
        epoch=epoch,
        sample_ids=np.arange(n, dtype=np.int64),
        hidden_domains=dataset.source_d.copy(),
        raw_scores=raw.numpy().astype(np.float64),
        normalized_weights=normalized.numpy().astype(np.float64),
    )
    wpath = run_dir / f"weights_epoch{epoch}.csv"
    save_weight_dump(dump, wpath)

    fpath = run_dir / f"features_epoch{epoch}.csv"
    all_x = np.concatenate(
        [dataset.source_x, dataset.target_x.reshape(dataset.n_target, *dataset.source_x.shape[1:])]
    )
    ids = np.concatenate([np.arange(n), np.arange(dataset.n_target)])
    domains = np.concatenate([dataset.source_d, np.zeros(dataset.n_target, dtype=np.int64)])
    export_features(bundle, all_x, ids, domains, fpath)
    return wpath, fpath


def fit(
    config: TrainConfig,
    dataset: DomainDataset,
    run_dir: str | Path,
    data_config: dict[str, Any] | None = None,
    resume_from: str | Path | None = None,
) -> RunArtifacts:
    """Run `n_iter` training steps, persisting metrics, checkpoints and
    weight/feature dumps under `run_dir`. Resuming from a checkpoint
    continues the exact uninterrupted trajectory."""
    config.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_run_config(run_dir, config, data_config)
    _write_source_manifest(run_dir, dataset)

    if resume_from is not None:
        bundle, momentum, extra = load_checkpoint(resume_from)
        if bundle.spec != config.arch:
            raise ConfigError("checkpoint architecture differs from config")
        state = init_state(config, bundle=bundle)
        _restore_momentum(state, momentum)
        state.t = int(extra["t"])
        state.lam = state.schedule.value(state.t)
    else:
        state = init_state(config)

    batcher = make_batcher(dataset, config.batch_source, config.batch_target, config.seed)
    step = STEP_FUNCTIONS[config.strategy]
    can_eval = dataset.target_test_x is not None and dataset.target_test_y is not None

    artifacts = RunArtifacts(
        run_dir=run_dir,
        metrics_path=run_dir / "metrics.csv",
        checkpoints=[],
        weight_dumps=[],
        feature_dumps=[],
    )

    def _save_ckpt(name: str) -> Path:
        path = run_dir / name
        save_checkpoint(path, state.bundle, _momentum_arrays(state), _checkpoint_extra(state))
        artifacts.checkpoints.append(path)
        return path

    if resume_from is None:
        _save_ckpt(f"checkpoint_{state.t:06d}.ckpt")

    fresh_metrics = resume_from is None or not artifacts.metrics_path.exists()
    with open(artifacts.metrics_path, "w" if fresh_metrics else "a", newline="") as f:
        writer = csv.writer(f)
        if fresh_metrics:
            writer.writerow(METRICS_COLUMNS)
        while state.t < config.n_iter:
            batch = batcher.batch_at(state.t)
            try:
                report = step(state, batch)
            except TrainingDiverged as e:
                _save_ckpt("checkpoint_diverged.ckpt")
                raise TrainingDiverged(f"{e} (diagnostic snapshot written)") from e
            target_acc = None
            is_last = state.t == config.n_iter
            if can_eval and (
                (config.eval_every and state.t % config.eval_every == 0) or is_last
            ):
                target_acc = evaluate_dataset(state.bundle, dataset)
            writer.writerow(
                [
                    report.t,
                    _fmt(report.lam),
                    _fmt(report.l_cls),
                    _fmt(report.l_dom),
                    _fmt(report.l_wdom),
                    _fmt(report.cmss_obj),
                    _fmt(report.w_mean),
                    _fmt(report.w_var),
                    _fmt(target_acc),
                ]
            )
            if config.snapshot_every and state.t % config.snapshot_every == 0 and not is_last:
                _save_ckpt(f"checkpoint_{state.t:06d}.ckpt")
                wp, fp = _dump_weights_and_features(
                    state, dataset, run_dir, epoch=state.t // batcher.batches_per_epoch
                )
                artifacts.weight_dumps.append(wp)
                artifacts.feature_dumps.append(fp)

    if state.t > 0:
        _save_ckpt(f"checkpoint_{state.t:06d}.ckpt")
    _save_ckpt("checkpoint_final.ckpt")
    final_epoch = state.t // batcher.batches_per_epoch if config.n_iter else 0
    wp, fp = _dump_weights_and_features(state, dataset, run_dir, epoch=final_epoch)
    artifacts.weight_dumps.append(wp)
    artifacts.feature_dumps.append(fp)
    return artifacts
