"""Experiment specs, runs, sweeps and their JSON-lines persistence."""

import copy
import dataclasses
import json
import os
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .attacks import (
    ATTACKS,
    AttackReport,
    AuxiliaryDataset,
    FeatureOracle,
    RepresentationOracle,
    WhiteBoxHead,
    amc_attack,
    ka_attack,
    pmc_attack,
    rmle_attack,
    write_pnm,
)
from .data import DatasetSpec, make_splits
from .errors import ConfigurationError
from .guarantees import pipeline_leakage
from .metrics import accuracy
from .model import build_default_architecture
from .objectives import AuxClassifier, AuxGenerator
from .trainer import BaselineDefenseConfig, BoundaryDefense, DefenseConfig, plain_train, predict, train


def desk_defense(lambda_d=0.0, lambda_l=0.0, seed=0):
    """Training settings tuned for the desk structured-image task."""
    return DefenseConfig(
        lambda_d=lambda_d, lambda_l=lambda_l, learning_rate=0.05, batch_size=32, epochs=30, seed=seed,
        aux_learning_rate=1e-3, generator_learning_rate=1e-2, aux_optimizer="adam", lr_schedule="cosine",
        generator_steps=3,
    )


@dataclass
class AttackSpec:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.name!r}; choose from {ATTACKS}")


@dataclass
class ExperimentSpec:
    """Everything that determines one record.

    ``seed`` is copied into the dataset and defense seeds when this object is
    resolved, so one number selects the whole paired run.
    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    defense: DefenseConfig = field(default_factory=desk_defense)
    baseline: BaselineDefenseConfig = field(default_factory=BaselineDefenseConfig)
    attacks: list = field(default_factory=list)
    seed: int = 0
    scale: str = "desk"
    width: int = None
    generator_variance: float = 4.0
    aux_layers: int = 1  # 1 = linear q_phi(y|z)
    aux_hidden: int = 64
    eval_size: int = 100  # test images inverted by data attacks
    label: str = None

    def resolved(self):
        s = copy.deepcopy(self)
        s.dataset.seed = self.seed
        s.defense.seed = self.seed
        s.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in s.attacks]
        s.defense.validate()
        s.baseline.validate()
        return s

    @property
    def method(self):
        if self.label:
            return self.label
        if self.baseline.kind != "none":
            return self.baseline.kind
        return "vclub" if self.defense.lambda_d or self.defense.lambda_l else "none"

    def to_dict(self):
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        d["attacks"] = [asdict(a) if isinstance(a, AttackSpec) else dict(a) for a in self.attacks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        return cls(
            dataset=DatasetSpec(**d.pop("dataset")),
            defense=DefenseConfig(**d.pop("defense")),
            baseline=BaselineDefenseConfig(**d.pop("baseline")),
            attacks=[AttackSpec(**a) for a in d.pop("attacks")],
            **d,
        )


@dataclass
class ExperimentRecord:
    spec: dict
    method: str
    clean_accuracy: float
    attacks: list = field(default_factory=list)  # AttackReport dicts
    leakage: dict = None
    bound: dict = None
    final_epoch: dict = None
    started: str = None
    finished: str = None
    artifact_version: str = None

    def attack(self, name):
        for a in self.attacks:
            if a["attack"] == name:
                return a
        return None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))

    def content(self):
        """Record without timestamps, for determinism checks."""
        d = asdict(self)
        for k in ("started", "finished"):
            d.pop(k)
        if d.get("final_epoch"):
            d["final_epoch"] = {k: v for k, v in d["final_epoch"].items() if k != "seconds"}
        return d


def artifact_version():
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"], cwd=here, capture_output=True, text=True, timeout=10
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__

    return __version__


def _stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


@dataclass
class TrainedPipeline:
    """A trained model plus everything attacks need."""

    spec: ExperimentSpec
    model: object
    splits: object
    trace: object
    generator: object = None
    aux_classifier: object = None

    @property
    def boundary(self):
        return BoundaryDefense(self.spec.baseline, seed=self.spec.seed + 7)

    def representation_oracle(self):
        return RepresentationOracle(self.model.head, self.boundary)

    def feature_oracle(self):
        return FeatureOracle(self.representation_oracle(), self.model.encoder)


def build_pipeline(spec, server_hook=None):
    """Train the model described by ``spec`` (already resolved)."""
    splits = make_splits(spec.dataset)
    model = build_default_architecture(
        spec.dataset.input_shape, spec.dataset.num_classes, spec.scale, seed=spec.seed, width=spec.width
    )
    cfg = spec.defense
    gen = aux = None
    if cfg.lambda_d > 0 or cfg.lambda_l > 0:
        gen = AuxGenerator.for_model(model, seed=spec.seed + 1, variance=spec.generator_variance)
        aux = AuxClassifier.for_model(model, hidden=spec.aux_hidden, seed=spec.seed + 2, layers=spec.aux_layers)
        trace = train(model, gen, aux, splits.train, cfg, splits.test, spec.baseline, server_hook)
    else:
        trace = plain_train(model, splits.train, cfg, splits.test, spec.baseline, server_hook)
    return TrainedPipeline(spec, model, splits, trace, gen, aux)


def _clean_accuracy(p):
    from .trainer import DevicePart, LocalLink, ServerPart

    device = DevicePart(p.model.head, p.model.classifier, p.splits.train, p.spec.defense)
    link = LocalLink(ServerPart(p.model.encoder, 0.0), p.boundary)
    return accuracy(predict(device, link, p.splits.test.inputs), p.splits.test.labels)


def run_attack(pipeline, attack, image_dir=None):
    """Run one attack against a trained pipeline and return its report."""
    spec = pipeline.spec
    params = dict(attack.params)
    aux = AuxiliaryDataset.from_dataset(pipeline.splits.aux)
    test = pipeline.splits.test
    eval_inputs = test.inputs[: params.pop("eval_size", spec.eval_size)]
    seed = params.pop("seed", spec.seed)
    recon = None
    if attack.name == "KA":
        recon, rep = ka_attack(pipeline.representation_oracle(), aux, eval_inputs, seed=seed, **params)
    elif attack.name == "rMLE":
        target = pipeline.representation_oracle()(eval_inputs)
        recon, rep = rmle_attack(
            WhiteBoxHead(pipeline.model.head), target, spec.dataset.input_shape, seed=seed, ground_truth=eval_inputs, **params
        )
    elif attack.name == "PMC":
        rep = pmc_attack(pipeline.feature_oracle(), aux, test.inputs, test.labels, seed=seed, **params)
    else:
        gamma = params.pop("gamma", 8.0)

        def retrain(hook):
            return build_pipeline(spec, server_hook=hook).feature_oracle()

        rep = amc_attack(retrain, gamma, aux, test.inputs, test.labels, seed=seed, **params)
    if image_dir is not None and recon is not None:
        d = Path(image_dir)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(min(8, recon.shape[0])):
            write_pnm(d / f"{attack.name}_{i}_recon.pnm", recon[i].clamp(0, 1))
            write_pnm(d / f"{attack.name}_{i}_input.pnm", eval_inputs[i])
    return rep


def _leakage(p):
    if p.aux_classifier is None:
        return None
    test = p.splits.test
    with torch.no_grad():
        r = p.model.head.eval()(test.inputs[:200])
        z = p.model.encoder.eval()(r)
    p.model.train()
    out = {"label": pipeline_leakage(p.aux_classifier, z, test.labels[:200])}
    out["data"] = pipeline_leakage(p.generator, r, test.inputs[:200])
    return out


def run_experiment(spec, out=None, image_dir=None, pipeline=None):
    """Train, attack, score and (optionally) append the record to ``out``."""
    spec = spec.resolved()
    started = _stamp()
    try:
        p = pipeline or build_pipeline(spec)
        reports = [run_attack(p, a, image_dir).to_dict() for a in spec.attacks]
        record = ExperimentRecord(
            spec=spec.to_dict(),
            method=spec.method,
            clean_accuracy=_clean_accuracy(p),
            attacks=reports,
            leakage=_leakage(p),
            final_epoch=p.trace.epochs[-1] if p.trace.epochs else None,
            started=started,
            finished=_stamp(),
            artifact_version=artifact_version(),
        )
    except Exception as exc:
        coords = f"seed={spec.seed} lambda_d={spec.defense.lambda_d} lambda_l={spec.defense.lambda_l} method={spec.method}"
        raise type(exc)(f"[{coords}] {exc}") from exc
    if out is not None:
        append_records(out, [record])
    return record


def append_records(path, records):
    """Append records to a JSON-lines file atomically (write temp, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    existing = path.read_text() if path.exists() else ""
    body = existing + "".join(r.to_json() + "\n" for r in records)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(body)
    os.replace(tmp, path)


def load_records(path):
    return [ExperimentRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


SWEEP_AXES = ("lambda_d", "lambda_l", "noise_scale", "compression_rate", "aux_size", "seed")


def with_axis(spec, axis, value):
    s = copy.deepcopy(spec)
    if axis in ("lambda_d", "lambda_l"):
        setattr(s.defense, axis, float(value))
    elif axis in ("noise_scale", "compression_rate"):
        setattr(s.baseline, axis, float(value))
    elif axis == "aux_size":
        s.dataset.aux_size = int(value)
    elif axis == "seed":
        s.seed = int(value)
    else:
        raise ConfigurationError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    return s


def sweep(spec, axis, values, seeds=(0,), out=None, workers=1):
    """One record per (value, seed); records are written as they complete."""
    jobs = [with_axis(with_axis(spec, "seed", s), axis, v) for v in values for s in seeds]
    if workers <= 1:
        return [run_experiment(j, out) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(workers) as pool:
        records = list(pool.map(run_experiment, jobs))
    if out is not None:
        append_records(out, records)
    return records


def replace_spec(spec, **changes):
    return dataclasses.replace(spec, **changes)
