"""Training loops, experiment orchestration and report emission."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackSpec, run_attack_batch
from .data import AugmentPolicy, LabeledDataset, augment, batches, load_split
from .defenses import KINDS, DefenseKind, Verdict, defend_batch
from .group import ELEMENTS, E, B, GroupElement, apply, parse_element
from .nn import (Network, NumericOverflowError, build_network, load_checkpoint, loss_and_grads_batch,
                 predict_batch, save_checkpoint, sgd_step)

log = logging.getLogger(__name__)

DATASETS = ("mnist", "cifar10")

ACCURACY_CONVENTION = (
    "attacks run on the first test images the undefended model classifies correctly; "
    "clean_accuracy is the undefended accuracy over the whole test split")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}, batch {batch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch
        self.batch = batch


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    defense: str = "none"
    attack: AttackSpec | None = None
    #: symmetry (or sequence of symmetries, applied left to right) the adversary perturbs
    attack_origin: GroupElement | tuple[GroupElement, ...] = E
    sample_count: int = 100
    seed: int = 0
    epochs: int = 3
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    model: str | None = None
    model_invert: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.defense not in KINDS:
            raise ConfigError(f"defense must be one of {KINDS}, got {self.defense!r}")
        if isinstance(self.attack_origin, (str, GroupElement)):
            self.attack_origin = parse_element(self.attack_origin)
        else:
            self.attack_origin = tuple(parse_element(g) for g in self.attack_origin)
        if self.sample_count < 1:
            raise ConfigError("sample_count must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def origin_elements(self) -> tuple[GroupElement, ...]:
        o = self.attack_origin
        return (o,) if isinstance(o, GroupElement) else o

    def echo(self) -> dict:
        d = asdict(self)
        d["attack"] = None if self.attack is None else asdict(self.attack)
        d["attack_origin"] = [g.cli_name for g in self.origin_elements]
        for key in ("model", "model_invert"):
            if d[key] is not None:
                d[key] = Path(d[key]).name
        d.pop("workers")
        return d

    def config_id(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# training


def training_policy(defense: str, seed: int) -> tuple[AugmentPolicy, bool]:
    """Augmentation for the model a defense needs, plus whether to pre-invert the data.

    none/flip: random flips.  invert (M-Invert): inverted images, random flips.
    subgroup: originals plus inverted copies, random flips.
    """
    if defense == "subgroup":
        return AugmentPolicy(random_flip=0.5, invert_duplicate=True, seed=seed), False
    return AugmentPolicy(random_flip=0.5, seed=seed), defense == "invert"


def accuracy(net: Network, ds: LabeledDataset) -> float:
    return float(np.mean(predict_batch(net, ds.images) == ds.labels)) if len(ds) else 0.0


def fit(train_set: LabeledDataset, test_set: LabeledDataset | None, config: ExperimentConfig) -> Network:
    """Train the default architecture on ``train_set`` as ``config.defense`` requires."""
    policy, pre_invert = training_policy(config.defense, config.seed)
    if pre_invert:
        train_set = LabeledDataset(apply(B, train_set.images), train_set.labels, train_set.num_classes)
        if test_set is not None:
            test_set = LabeledDataset(apply(B, test_set.images), test_set.labels, test_set.num_classes)
    net = build_network(train_set.image_shape, train_set.num_classes, seed=config.seed)
    velocity = None
    for epoch in range(config.epochs):
        epoch_set = augment(train_set, policy, epoch)
        order_rng = np.random.default_rng([config.seed, epoch, 1])
        total, count = 0.0, 0
        for b, idx in enumerate(batches(len(epoch_set), config.batch_size, order_rng)):
            try:
                out = loss_and_grads_batch(net, epoch_set.images[idx], epoch_set.labels[idx],
                                           wrt_input=False, wrt_params=True, reduction="mean")
            except NumericOverflowError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from exc
            batch_loss = float(out.loss.mean())
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, b, "non-finite loss")
            net, velocity = sgd_step(net, out.param_grads, config.lr, config.momentum, velocity)
            total += batch_loss * len(idx)
            count += len(idx)
        msg = f"epoch {epoch + 1}/{config.epochs} train_loss={total / count:.4f}"
        if test_set is not None:
            msg += f" test_accuracy={accuracy(net, test_set):.4f}"
        log.info(msg)
    return net


def train(config: ExperimentConfig, out: str | Path) -> Path:
    """Train on ``config.dataset`` and write a checkpoint to ``out``."""
    train_set = load_split(config.dataset, config.data_dir, "train")
    test_set = load_split(config.dataset, config.data_dir, "test")
    log.info("training %s model on %d %s images (config %s)",
             config.defense, len(train_set), config.dataset, config.config_id())
    net = fit(train_set, test_set, config)
    return save_checkpoint(net, out)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class SampleRow:
    index: int
    true_label: int
    undefended_label: int
    defended: Verdict
    attack_success: bool
    queries: int
    target: int | None = None


@dataclass
class EvalReport:
    config: dict
    config_id: str
    defense: str
    clean_accuracy: float
    defended_clean_accuracy: float
    undefended_adv_accuracy: float
    defended_adv_accuracy: float
    fallback_rate: float | None
    rows: list[SampleRow] = field(default_factory=list)

    @property
    def attack(self) -> dict | None:
        return self.config.get("attack")


def load_defense(config: ExperimentConfig) -> DefenseKind:
    if config.model is None:
        raise ConfigError("a model checkpoint is required")
    models = [load_checkpoint(config.model)]
    if config.defense == "invert":
        if config.model_invert is None:
            raise ConfigError("the invert defense needs --model-invert (M-Invert checkpoint)")
        models.append(load_checkpoint(config.model_invert))
    return DefenseKind(config.defense, models)


def _apply_origin(elements: Sequence[GroupElement], x: np.ndarray) -> np.ndarray:
    for g in elements:
        x = apply(g, x)
    return x


def select_correct(net: Network, ds: LabeledDataset, count: int) -> np.ndarray:
    """Indices of the first ``count`` test images ``net`` classifies correctly."""
    correct = np.flatnonzero(predict_batch(net, ds.images) == ds.labels)
    if len(correct) < count:
        raise ConfigError(f"only {len(correct)} correctly classified test images, {count} requested")
    return correct[:count]


def run_experiment(config: ExperimentConfig, defense: DefenseKind | None = None,
                   test_set: LabeledDataset | None = None, chunk: int = 100) -> EvalReport:
    """Attack correctly classified test images and evaluate the defense on the results.

    The adversary perturbs ``apply(origin, x)``; undefended and defended
    predictions are both taken on the adversarial image.
    """
    if defense is None:
        defense = load_defense(config)
    if defense.kind != config.defense:
        raise ConfigError(f"config defense {config.defense!r} but models for {defense.kind!r}")
    if test_set is None:
        test_set = load_split(config.dataset, config.data_dir, "test")
    net = defense.attacked_model
    clean_accuracy = accuracy(net, test_set)
    picked = select_correct(net, test_set, config.sample_count)
    x_src = _apply_origin(config.origin_elements, test_set.images[picked])
    y = test_set.labels[picked]

    def work(start: int):
        sl = slice(start, start + chunk)
        xs, ys = x_src[sl], y[sl]
        if config.attack is None:
            return xs, [None] * len(ys)
        seeds = [[config.attack.seed, int(i)] for i in picked[sl]]
        results = run_attack_batch(net, xs, ys, config.attack, seeds=seeds)
        return np.stack([r.x_adv for r in results]), results

    starts = range(0, len(picked), chunk)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    x_adv = np.concatenate([p[0] for p in parts])
    results = [r for p in parts for r in p[1]]

    undefended = predict_batch(net, x_adv)
    defended = defend_batch(defense, x_adv)
    defended_clean = defended if config.attack is None else defend_batch(defense, x_src)

    rows = []
    for k, i in enumerate(picked):
        r = results[k]
        rows.append(SampleRow(
            index=int(i), true_label=int(y[k]), undefended_label=int(undefended[k]),
            defended=defended[k],
            attack_success=bool(r.success) if r is not None else False,
            queries=int(r.queries_used) if r is not None else 0,
            target=r.target if r is not None else None))
    n = len(rows)
    fallback = None
    if defense.kind == "subgroup":
        fallback = sum(r.defended.mode == "fallback" for r in rows) / n
    return EvalReport(
        config=config.echo(), config_id=config.config_id(), defense=defense.kind,
        clean_accuracy=clean_accuracy,
        defended_clean_accuracy=sum(int(v.label == t) for v, t in zip(defended_clean, y)) / n,
        undefended_adv_accuracy=sum(int(r.undefended_label == r.true_label) for r in rows) / n,
        defended_adv_accuracy=sum(int(r.defended.label == r.true_label) for r in rows) / n,
        fallback_rate=fallback, rows=rows)


def measure_equivariance_gap(net: Network, dataset: LabeledDataset, sample_count: int | None = None) -> dict[str, float]:
    """Fraction of images whose predicted label changes under each symmetry."""
    ds = dataset if sample_count is None else dataset.subset(slice(0, sample_count))
    base = predict_batch(net, ds.images)
    return {g.cli_name: float(np.mean(predict_batch(net, apply(g, ds.images)) != base)) for g in ELEMENTS}


# ---------------------------------------------------------------------------
# reports

CSV_COLUMNS = [
    "row_type", "index", "true_label", "target", "undefended_label", "defended_label", "mode",
    "per_symmetry_labels", "attack_success", "queries",
    "clean_accuracy", "defended_clean_accuracy", "undefended_adv_accuracy", "defended_adv_accuracy",
    "fallback_rate",
]
SUMMARY_FIELDS = ("clean_accuracy", "defended_clean_accuracy", "undefended_adv_accuracy",
                  "defended_adv_accuracy", "fallback_rate")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    buf.write(f"# config_id: {report.config_id}\n")
    buf.write(f"# config: {json.dumps(report.config, sort_keys=True)}\n")
    buf.write(f"# convention: {ACCURACY_CONVENTION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        syms = "" if r.defended.per_symmetry_labels is None else " ".join(map(str, r.defended.per_symmetry_labels))
        w.writerow([_fmt(v) for v in ("sample", r.index, r.true_label, r.target, r.undefended_label,
                                      r.defended.label, r.defended.mode, syms, int(r.attack_success),
                                      r.queries)] + [""] * len(SUMMARY_FIELDS))
    w.writerow(["summary"] + [""] * 9 + [_fmt(getattr(report, f)) for f in SUMMARY_FIELDS])
    return buf.getvalue()


def read_report_csv(path: str | Path) -> dict:
    """Parse a CSV report back into its summary fields, config echo and sample rows."""
    text = Path(path).read_text()
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(": ")
            meta[key] = value
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    summary = next(r for r in rows if r["row_type"] == "summary")
    out = {f: (float(summary[f]) if summary[f] != "" else None) for f in SUMMARY_FIELDS}
    out["config"] = json.loads(meta["config"])
    out["config_id"] = meta["config_id"]
    out["rows"] = [r for r in rows if r["row_type"] == "sample"]
    return out


def _attack_cells(attack: dict | None) -> tuple[str, str, str]:
    if attack is None:
        return "-", "None", "0"
    names = {"pgd": "PGD", "square": "Square Attack", "adaptive_pgd": "Adaptive PGD"}
    norm = {"l2": "L2", "linf": "Linf"}[attack["norm"]]
    return norm, names[attack["family"]], f"{attack['eps']:.6g}"


def report_markdown(report: EvalReport) -> str:
    pct = lambda v: f"{100 * v:.2f}%"
    title = report.defense.capitalize() if report.defense != "none" else "No"
    lines = [
        f"## Symmetry defense evaluation ({report.config['dataset']}, {report.defense} defense)",
        "",
        f"- config_id: `{report.config_id}`",
        f"- config: `{json.dumps(report.config, sort_keys=True)}`",
        f"- seed: {report.config['seed']}; samples: {len(report.rows)}",
        f"- attack origin: {' -> '.join(report.config['attack_origin'])}",
        f"- convention: {ACCURACY_CONVENTION}",
        f"- clean accuracy (test split): {pct(report.clean_accuracy)}",
    ]
    if report.fallback_rate is not None:
        lines.append(f"- fallback_rate: {report.fallback_rate:.4f}")
    lines.append("")
    if report.attack is None:
        lines += ["| No defense | Proposed defense |", "|---|---|",
                  f"| {pct(report.undefended_adv_accuracy)} | {pct(report.defended_adv_accuracy)} |"]
    else:
        norm, name, eps = _attack_cells(report.attack)
        lines += [f"| Norm | Attack | ε | No defense | {title} defense |", "|---|---|---|---|---|",
                  f"| - | None | 0 | 100.00% | {pct(report.defended_clean_accuracy)} |",
                  f"| {norm} | {name} | {eps} | {pct(report.undefended_adv_accuracy)} "
                  f"| {pct(report.defended_adv_accuracy)} |"]
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path: str | Path, fmt: str = "csv") -> Path:
    if fmt not in ("csv", "markdown"):
        raise ConfigError(f"format must be csv or markdown, got {fmt!r}")
    path = Path(path)
    text = report_csv(report) if fmt == "csv" else report_markdown(report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
