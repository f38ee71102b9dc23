"""Training loop: Adam with split parameter groups, the size-penalized
objective, periodic channel removal, plateau annealing, and metrics
emission.

Wall time per step is measured with an injectable monotonic clock around
the compute portion of the step (batch wait and evaluation excluded), so
timing trends reflect the shrinking network rather than I/O.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import network as ng
from . import pruner, sizemodel
from .errors import ConfigError, DataFormatError, DivergenceError
from .layers import softmax_cross_entropy
from .network import ParamStore, build_cifar_net, build_forward
from .optim import Adam

CSV_HEADER = "step,task_loss,Q,total_bits,live_channels,flops,train_acc,eval_acc,step_ms,lr_w,lr_q"


@dataclass
class PlateauConfig:
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-8


@dataclass
class TrainConfig:
    gamma: float = 0.0
    lr_weights: float = 1e-3
    lr_quant: float = 0.5
    eps_weights: float = 1e-5
    eps_quant: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 512
    main_steps: int = 850
    prune_interval: int = 50
    prune_warmup: int = 100
    bias_tol: float = 1e-5
    b_init: float = 8.0
    b_max: float = 16.0
    size_mode: str = "coupled"
    seed: int = 0
    plateau: PlateauConfig = field(default_factory=PlateauConfig)
    # artifact knobs
    width_scale: float = 1.0
    widths: list | None = None
    dataset: str = "cifar10"  # or "synthetic"
    data_path: str | None = None
    synthetic_kind: str = "two-gaussians-images"
    train_size: int = 5000
    eval_size: int = 1000
    separation: float = 6.0
    augment: bool = True
    prefetch: bool = False
    drain_coeff: float = 1.0
    log_interval: int = 10
    eval_interval: int = 50
    anneal: bool = True
    anneal_max_steps: int = 5000
    quantize_first_last: bool = True

    def validate(self):
        positive = {
            "lr_weights": self.lr_weights, "lr_quant": self.lr_quant,
            "eps_weights": self.eps_weights, "eps_quant": self.eps_quant,
            "bias_tol": self.bias_tol, "batch_size": self.batch_size,
            "log_interval": self.log_interval, "eval_interval": self.eval_interval,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.weight_decay < 0 or self.drain_coeff < 0:
            raise ConfigError("weight_decay and drain_coeff must be >= 0")
        if self.main_steps < 0 or self.prune_interval < 0 or self.prune_warmup < 0:
            raise ConfigError("step counts must be >= 0")
        if not 0 < self.b_init <= self.b_max:
            raise ConfigError(f"b_init must lie in (0, b_max={self.b_max}]")
        if self.size_mode not in ("simple", "coupled"):
            raise ConfigError(f"size_mode must be simple|coupled, got {self.size_mode!r}")
        if self.dataset not in ("cifar10", "synthetic"):
            raise ConfigError(f"dataset must be cifar10|synthetic, got {self.dataset!r}")
        if self.dataset == "synthetic" and self.synthetic_kind not in datamod.SYNTHETIC_KINDS:
            raise ConfigError(f"unknown synthetic_kind {self.synthetic_kind!r}")
        if self.plateau.factor <= 0 or self.plateau.factor >= 1:
            raise ConfigError("plateau.factor must lie in (0, 1)")
        if self.plateau.patience < 1 or self.plateau.min_lr <= 0:
            raise ConfigError("plateau.patience >= 1 and plateau.min_lr > 0 required")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, raw):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        if "plateau" in kwargs and isinstance(kwargs["plateau"], dict):
            plateau_known = set(PlateauConfig.__dataclass_fields__)
            plateau_unknown = set(kwargs["plateau"]) - plateau_known
            if plateau_unknown:
                raise ConfigError(f"unknown plateau keys: {sorted(plateau_unknown)}")
            kwargs["plateau"] = PlateauConfig(**kwargs["plateau"])
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


@dataclass
class MetricsRow:
    step: int
    task_loss: float
    Q: float
    total_bits: float
    live_channels: int
    flops: int
    train_acc: float
    eval_acc: float | None
    step_ms: float
    lr_w: float
    lr_q: float

    def to_csv(self):
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, (int, np.integer)):
                return str(int(x))
            return repr(float(x))
        return ",".join(fmt(v) for v in (
            self.step, self.task_loss, self.Q, self.total_bits,
            self.live_channels, self.flops, self.train_acc, self.eval_acc,
            self.step_ms, self.lr_w, self.lr_q))

    def to_json(self):
        payload = asdict(self)
        payload = {k: (float(v) if isinstance(v, (np.floating,)) else v)
                   for k, v in payload.items()}
        return json.dumps(payload)


@dataclass
class TrainResult:
    net: object
    opt: Adam
    rows: list
    step_times: list
    prune_events: list
    audit_violations: list
    initial_size: sizemodel.SizeReport
    final_size: sizemodel.SizeReport
    final_eval_acc: float
    final_eval_loss: float
    steps_run: int


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            fh.write(row.to_csv() + "\n")


def write_metrics_jsonl(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(row.to_json() + "\n")


def build_net(config):
    return build_cifar_net(
        width_scale=config.width_scale, widths=config.widths,
        seed=config.seed, b_init=config.b_init, b_max=config.b_max,
        quantize_first_last=config.quantize_first_last)


def make_datasets(config, data_path=None):
    """(train, eval) datasets per config; CIFAR path falls back to the
    SELFCOMP_DATA environment variable."""
    import os

    if config.dataset == "synthetic":
        train = datamod.synthetic_dataset(
            config.synthetic_kind, config.train_size, seed=config.seed * 2 + 1,
            separation=config.separation)
        evalset = datamod.synthetic_dataset(
            config.synthetic_kind, config.eval_size, seed=config.seed * 2 + 2,
            separation=config.separation)
        return train, evalset
    path = data_path or config.data_path or os.environ.get("SELFCOMP_DATA")
    if not path:
        raise DataFormatError(
            "no dataset path: set data_path in the config or SELFCOMP_DATA")
    return datamod.load_cifar10(path)


def evaluate_with_loss(net, dataset, batch_size=256):
    """Top-1 accuracy and mean cross-entropy in inference mode."""
    n = len(dataset)
    if n == 0:
        raise ConfigError("evaluation dataset is empty")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch_size):
        images = datamod.normalize(dataset.images[start:start + batch_size])
        labels = dataset.labels[start:start + batch_size]
        graph = build_forward(net, images, training=False, want_grads=False)
        logits = graph.logits.value
        loss = softmax_cross_entropy(graph.logits, labels).value
        loss_sum += float(loss) * len(labels)
        correct += int((logits.argmax(axis=1) == labels).sum())
    return correct / n, loss_sum / n


def evaluate(net, dataset, batch_size=256):
    """Deterministic top-1 accuracy on a dataset."""
    return evaluate_with_loss(net, dataset, batch_size)[0]


def _drain_prox(net, shrink):
    """Proximal soft-threshold on additive params of zero-bit channels;
    reaches exact zero, which the gradient path cannot."""
    if shrink <= 0:
        return
    for layer in net.weighted_layers():
        if layer.qb is None:
            continue
        mask = layer.qb == 0
        if not mask.any():
            continue
        targets = [layer.bias]
        bn = getattr(layer, "bn", None)
        if bn is not None:
            targets.append(bn.beta)
        for arr in targets:
            if arr is None:
                continue
            vals = arr[mask]
            arr[mask] = np.sign(vals) * np.maximum(np.abs(vals) - shrink, 0.0)


def _first_batch(dataset, config):
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x0D0E, 0]))
    order = rng.permutation(len(dataset))
    idx = order[:config.batch_size]
    images = datamod.augment_batch(dataset.images[idx], idx, 0, config.seed,
                                   enabled=config.augment)
    return images, dataset.labels[idx]


def train(net, datasets, config, clock=time.perf_counter, on_row=None):
    """Run the size-penalized optimization on net, in place.

    Main phase runs config.main_steps; with config.anneal the run then
    continues under a reduce-on-plateau schedule until the learning rate
    floor or eval-loss convergence (improvement < 1e-4 over three
    consecutive evaluations). Channel removal runs every prune_interval
    steps after prune_warmup, and once more at the very end.
    """
    config.validate()
    train_ds, eval_ds = datasets
    if len(train_ds) == 0:
        raise ConfigError("training dataset is empty")
    violations = ng.validate_network(net)
    if violations:
        raise ConfigError("network fails validation: " + "; ".join(violations))

    store = ParamStore(net)
    opt = Adam(store, lr_weights=config.lr_weights, lr_quant=config.lr_quant,
               eps_weights=config.eps_weights, eps_quant=config.eps_quant,
               weight_decay=config.weight_decay, b_max=config.b_max)
    stream = datamod.BatchStream(train_ds, config.batch_size, config.seed,
                                 augment_enabled=config.augment,
                                 prefetch=config.prefetch)

    rows = []
    step_times = []
    prune_events = []
    audit_violations = []
    initial_size = sizemodel.size_report(net, config.size_mode)

    def emit(row):
        rows.append(row)
        if on_row is not None:
            on_row(row)

    def metrics_row(step, task_loss, train_acc, eval_acc, step_ms):
        report = sizemodel.size_report(net, config.size_mode)
        return MetricsRow(
            step=step, task_loss=task_loss, Q=report.Q,
            total_bits=report.total_bits,
            live_channels=ng.total_live_channels(net), flops=report.flops,
            train_acc=train_acc, eval_acc=eval_acc, step_ms=step_ms,
            lr_w=opt.current_lr("weights"), lr_q=opt.current_lr("quant"))

    # step-0 row: the untouched network, inference mode, on what will be
    # the first training batch
    images0, labels0 = _first_batch(train_ds, config)
    graph0 = build_forward(net, images0, training=False, want_grads=False)
    task0 = softmax_cross_entropy(graph0.logits, labels0)
    acc0 = float((graph0.logits.value.argmax(axis=1) == labels0).mean())
    eval_acc0, _ = evaluate_with_loss(net, eval_ds)
    emit(metrics_row(0, float(task0.value), acc0, eval_acc0, 0.0))

    last_task = float(task0.value)
    last_train_acc = acc0

    # plateau state
    best_eval = np.inf
    evals_since_improve = 0
    small_improvements = 0
    prev_eval_loss = None
    min_scale = config.plateau.min_lr / config.lr_weights

    step = 0
    annealing = False
    stop = False
    while not stop:
        if not annealing and step >= config.main_steps:
            if not config.anneal:
                break
            annealing = True
        if annealing and step >= config.main_steps + config.anneal_max_steps:
            break
        step += 1
        images, labels = next(stream)

        t0 = clock()
        graph = build_forward(net, images, training=True)
        task = softmax_cross_entropy(graph.logits, labels)
        if not np.isfinite(task.value):
            raise DivergenceError(f"task loss became non-finite at step {step}")
        q_node = sizemodel.size_nodes(net, graph.leaves, config.size_mode)
        drain_node = sizemodel.bias_drain_node(net, graph.leaves)
        loss, _ = sizemodel.total_loss(
            task, q_node, drain_node, config.gamma, config.drain_coeff)
        ad.backward(loss)
        grads = {key: leaf.grad for key, leaf in graph.leaves.items()
                 if leaf.grad is not None}
        opt.step(grads)
        _drain_prox(net, config.drain_coeff * opt.current_lr("additive"))

        prune_report = None
        due = (config.prune_interval > 0 and step > config.prune_warmup
               and step % config.prune_interval == 0)
        if due:
            candidates = pruner.find_removable(net, config.bias_tol)
            for cand in candidates:
                if cand.additive_magnitude >= config.bias_tol:
                    audit_violations.append((step, cand.layer, cand.channel))
            if candidates:
                _, _, prune_report = pruner.prune(net, opt.state, candidates)
                if prune_report.channels_removed:
                    prune_events.append((step, prune_report))
        step_ms = (clock() - t0) * 1000.0
        step_times.append(step_ms)

        last_task = float(task.value)
        last_train_acc = float((graph.logits.value.argmax(axis=1) == labels).mean())

        eval_acc = None
        if step % config.eval_interval == 0:
            eval_acc, eval_loss = evaluate_with_loss(net, eval_ds)
            if annealing:
                if eval_loss < best_eval:
                    best_eval = eval_loss
                    evals_since_improve = 0
                else:
                    evals_since_improve += 1
                    if evals_since_improve >= config.plateau.patience:
                        opt.lr_scale *= config.plateau.factor
                        evals_since_improve = 0
                if prev_eval_loss is not None and prev_eval_loss - eval_loss < 1e-4:
                    small_improvements += 1
                else:
                    small_improvements = 0
                prev_eval_loss = eval_loss
                if opt.lr_scale <= min_scale or small_improvements >= 3:
                    stop = True
            else:
                best_eval = min(best_eval, eval_loss)
                prev_eval_loss = eval_loss

        if step % config.log_interval == 0 or (prune_report is not None and
                                               prune_report.channels_removed):
            emit(metrics_row(step, last_task, last_train_acc, eval_acc, step_ms))

        if not annealing and step >= config.main_steps and not config.anneal:
            break

    # final sweep: remove anything fully drained, then refresh the tail row
    candidates = pruner.find_removable(net, config.bias_tol)
    if candidates:
        _, _, final_report = pruner.prune(net, opt.state, candidates)
        if final_report.channels_removed:
            prune_events.append((step, final_report))
    if rows and rows[-1].step == step:
        rows.pop()
    final_eval_acc, final_eval_loss = evaluate_with_loss(net, eval_ds)
    final_row = metrics_row(step, last_task, last_train_acc, final_eval_acc,
                            step_times[-1] if step_times else 0.0)
    emit(final_row)

    return TrainResult(
        net=net, opt=opt, rows=rows, step_times=step_times,
        prune_events=prune_events, audit_violations=audit_violations,
        initial_size=initial_size,
        final_size=sizemodel.size_report(net, config.size_mode),
        final_eval_acc=final_eval_acc, final_eval_loss=final_eval_loss,
        steps_run=step)


def sweep_run_config(config, gamma, index):
    """Per-run config for a sweep entry: fresh seed derived from the base
    seed and the run index."""
    derived = int(np.random.SeedSequence([config.seed, 0x5EED, index]).generate_state(1)[0])
    return replace(config, gamma=float(gamma), seed=derived % (2 ** 31))


def gamma_sweep(config, gammas, clock=time.perf_counter):
    """One training run per compression factor; returns locus rows with
    final bits fraction, weights fraction and accuracy (sizes measured in
    the simple per-layer form after zero-bit channels are removed)."""
    if not gammas:
        raise ConfigError("gamma list is empty")
    locus = []
    for index, gamma in enumerate(gammas):
        run_cfg = sweep_run_config(config, gamma, index)
        net = build_net(run_cfg)
        bits_initial = sizemodel.size_report(net, "simple").total_bits
        try:
            datasets = make_datasets(run_cfg)
            result = train(net, datasets, run_cfg, clock=clock)
        except (DivergenceError, ConfigError) as exc:
            locus.append({"gamma": float(gamma), "failed": str(exc)})
            continue
        bits_final = sizemodel.size_report(result.net, "simple").total_bits
        locus.append({
            "gamma": float(gamma),
            "bits_fraction": bits_final / bits_initial,
            "weights_fraction": ng.count_weight_elements(result.net)
            / result.net.starting_weight_count,
            "accuracy": result.final_eval_acc,
            "result": result,
        })
    return locus
