"""INI-style experiment configuration and its generated reference page.

Sections map onto the experiment dataclasses::

    [experiment]   ExperimentSpec scalars (seed, scale, ...)
    [dataset]      DatasetSpec
    [defense]      DefenseConfig
    [baseline]     BaselineDefenseConfig
    [attack.NAME]  one section per attack; keys become attack parameters
"""

import configparser
import dataclasses
import json
from pathlib import Path

from .data import DatasetSpec
from .errors import ConfigurationError
from .experiment import AttackSpec, ExperimentSpec
from .trainer import BaselineDefenseConfig, DefenseConfig

DOCS = {
    "experiment": {
        "seed": "Seed for data generation, initialization, shuffling and attacks.",
        "scale": "Architecture preset: desk or paper-like.",
        "width": "Channel width of the preset (empty for the preset default).",
        "generator_variance": "Fixed variance of the Gaussian q(x|r); 1 is the unit-variance family.",
        "aux_layers": "Linear layers in the label-side variational classifier (1 = linear).",
        "aux_hidden": "Hidden width of the label-side variational classifier when aux_layers > 1.",
        "eval_size": "Number of test images inverted by data attacks.",
        "label": "Method name used in plots (empty to derive it).",
    },
    "dataset": {
        "kind": "synthetic_gaussian_classes, synthetic_structured_images or image_folder.",
        "size": "Number of generated samples (ignored for image_folder).",
        "input_shape": "Comma-separated channels,height,width.",
        "num_classes": "Number of classes.",
        "test_fraction": "Fraction of samples held out for testing.",
        "aux_size": "Labelled samples given to the attacker (disjoint from train and test).",
        "seed": "Overridden by experiment.seed.",
        "root": "Directory of class sub-folders for image_folder.",
    },
    "defense": {
        "lambda_d": "Weight of the data-protection terms.",
        "lambda_l": "Weight of the label-protection terms.",
        "learning_rate": "SGD step size for head, encoder and classifier.",
        "batch_size": "Mini-batch size; the last partial batch is kept.",
        "epochs": "Passes over the training split.",
        "seed": "Overridden by experiment.seed.",
        "optimizer": "Optimizer for the split model (sgd).",
        "momentum": "SGD momentum.",
        "aux_learning_rate": "Step size of the label-side variational classifier (empty for learning_rate).",
        "generator_learning_rate": "Step size of the data-side generator (empty for learning_rate).",
        "aux_optimizer": "Optimizer for both variational models: sgd or adam.",
        "lr_schedule": "constant or cosine decay of the split-model step size.",
        "generator_steps": "Generator ascent steps per batch.",
    },
    "baseline": {
        "kind": "none, add_noise (Laplace) or compress (magnitude pruning).",
        "noise_scale": "Laplace scale b for add_noise.",
        "compression_rate": "Fraction of entries zeroed by compress.",
    },
}


def _coerce(value, default, name):
    if value.strip() == "":
        return None
    if name == "input_shape":
        return tuple(int(v) for v in value.split(","))
    if isinstance(default, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float) or default is None:
        try:
            return float(value) if any(c in value for c in ".eE") or default is not None else int(value)
        except ValueError:
            return value
    return value


def _apply(obj, section, items):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in items:
        if key not in fields:
            raise ConfigurationError(f"unknown key [{section}] {key}")
        default = getattr(obj, key)
        setattr(obj, key, _coerce(value, default, key))


def load_config(path_or_text, base=None):
    """Parse an INI file (or text) into an :class:`ExperimentSpec`."""
    cp = configparser.ConfigParser(interpolation=None)
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text and "=" not in path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    cp.read_string(text)
    spec = base or ExperimentSpec()
    targets = {"dataset": spec.dataset, "defense": spec.defense, "baseline": spec.baseline}
    attacks = []
    for section in cp.sections():
        items = list(cp.items(section))
        if section == "experiment":
            _apply(spec, section, [(k, v) for k, v in items])
        elif section in targets:
            _apply(targets[section], section, items)
        elif section.startswith("attack."):
            params = {}
            for k, v in items:
                try:
                    params[k] = json.loads(v)
                except json.JSONDecodeError:
                    params[k] = v
            attacks.append(AttackSpec(section.split(".", 1)[1], params))
        else:
            raise ConfigurationError(f"unknown section [{section}]")
    if attacks:
        spec.attacks = attacks
    spec.dataset = DatasetSpec(**dataclasses.asdict(spec.dataset))
    return spec


def config_reference():
    """Markdown reference of every configuration key with its default."""
    lines = ["# Configuration reference", "", "Generated by `splitmi.config.config_reference()`.", ""]
    defaults = {
        "experiment": ExperimentSpec(),
        "dataset": DatasetSpec(),
        "defense": ExperimentSpec().defense,
        "baseline": BaselineDefenseConfig(),
    }
    for section, obj in defaults.items():
        lines += [f"## [{section}]", "", "| key | default | meaning |", "|---|---|---|"]
        for f in dataclasses.fields(obj):
            if section == "experiment" and f.name in ("dataset", "defense", "baseline", "attacks"):
                continue
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(map(str, value))
            shown = "" if value is None else value
            meaning = DOCS[section][f.name].replace("|", "\\|")
            lines.append(f"| `{f.name}` | `{shown}` | {meaning} |")
        lines.append("")
    lines += [
        "## [attack.NAME]",
        "",
        "One section per attack (`KA`, `rMLE`, `PMC`, `AMC`). Values are parsed as JSON where possible",
        "and passed as keyword arguments, e.g. `steps = 1500`, `depth = 1`, `arch = \"mlp\"`, `gamma = 8`.",
        "",
    ]
    return "\n".join(lines)
