"""Command-line entry point.

Every command reads its settings from built-in defaults, then an optional
``--config`` JSON file, then flags (highest priority). The merged settings
are echoed into each report.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from ._io import atomic_write_bytes, atomic_write_text, ensure_dir
from .attribution import heatmap, write_heatmap
from .bench import (BiasSpec, ExperimentConfig, SynthSpec, disjoint_relations, four_attribute_spec, inject_bias,
                    run_experiment2, run_experiment3, synth_dataset, two_attribute_spec)
from .errors import NonFiniteLoss, PathError, ReprBiasError, ValidationError
from .groundtruth import read_relations
from .micronet import (LossSpec, MicroNet, TrainConfig, default_config, load_model, save_model,
                       train)
from .pipeline import DiagnosisConfig, attribute_representations, diagnose
from .relations import read_annotations_csv, write_annotations_csv
from .seeding import subseed, substream
from .tensor import load_tensor, tensor_to_bytes

IMAGES = "images.bltn"
ANNOTATIONS = "annotations.csv"
RELATIONS = "relations.csv"


@dataclass
class RunConfig:
    command: str = ""
    data_dir: str = "."
    out_dir: str = "."
    model: str | None = None
    relations: str | None = None
    seed: int = 0
    # synthetic data
    attributes: int = 2
    samples: int | None = None
    image_size: int = 16
    noise: float = 0.3
    bias_pair: list[int] | None = None
    tau: float = 1.0
    # training
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32
    init_scale: float = 1.0
    probe_layer: int | None = None
    # diagnosis
    lam: float | None = None
    lam_factor: float = 0.01
    max_units: int | None = None
    bins: int = 64
    smoothing: float = 0.5
    sigma_min: float = 0.05
    kl_percentile: float = 75.0
    kl_gate: float | None = None
    near_zero: float = 0.2
    far: float = 0.2
    fit: str = "pair_means"
    heatmaps: int = 0
    # heatmap command
    image_index: int = 0
    attribute: str | None = None
    # experiments
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    taus: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    pairs: list[list[int]] = field(default_factory=lambda: [[0, 1]])
    top_n: int = 3
    test_samples: int | None = None

    def diagnosis(self) -> DiagnosisConfig:
        return DiagnosisConfig(self.lam, self.lam_factor, self.max_units, self.bins, self.smoothing, self.sigma_min,
                               self.kl_percentile, self.kl_gate, self.near_zero, self.far, self.fit)

    def training(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.epochs, self.batch_size, subseed(self.seed, "train"),
                           self.init_scale)

    def synth(self) -> SynthSpec:
        if self.attributes == 2:
            spec = two_attribute_spec(seed=subseed(self.seed, "synth"), image_size=self.image_size, noise=self.noise)
        elif self.attributes == 4:
            spec = four_attribute_spec(seed=subseed(self.seed, "synth"), image_size=self.image_size,
                                       noise=self.noise)
        else:
            raise ValidationError("synthetic presets exist for 2 or 4 attributes")
        return replace(spec, samples=self.samples) if self.samples else spec


def merge_config(command: str, file_values: dict, flag_values: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ValidationError(f"unknown config keys: {unknown}")
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None and k in known})
    merged["command"] = command
    return RunConfig(**merged)


class _Stage:
    """Remembers which pipeline stage is running so errors can name it."""

    def __init__(self):
        self.name = "setup"

    def __call__(self, name):
        self.name = name
        return self


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out_dir(cfg: RunConfig) -> Path:
    return ensure_dir(Path(cfg.out_dir))


def _load_dataset(data_dir: Path):
    data_dir = Path(data_dir)
    for name in (IMAGES, ANNOTATIONS):
        if not (data_dir / name).is_file():
            raise PathError(f"missing dataset file: {data_dir / name}")
    table = read_annotations_csv(data_dir / ANNOTATIONS)
    images = load_tensor(data_dir / IMAGES)
    if images.ndim != 4 or images.shape[0] != len(table):
        raise ValidationError(f"{data_dir / IMAGES}: shape {images.shape} does not match {len(table)} annotations")
    return images, table


def _model_path(cfg: RunConfig, reading: bool = False) -> Path:
    if cfg.model:
        return Path(cfg.model)
    return Path(cfg.data_dir if reading else cfg.out_dir) / "model.bltm"


# -- commands -----------------------------------------------------------------


def cmd_synth(cfg: RunConfig, stage: _Stage) -> list[Path]:
    out = _out_dir(cfg)
    stage("synth")
    spec = cfg.synth()
    images, table = synth_dataset(spec)
    graph = disjoint_relations(spec)
    if cfg.bias_pair is not None:
        stage("bias")
        images, table = inject_bias(table, images, BiasSpec(tuple(cfg.bias_pair), cfg.tau, subseed(cfg.seed, "bias")))
    stage("write")
    atomic_write_bytes(out / IMAGES, tensor_to_bytes(images))
    write_annotations_csv(out / ANNOTATIONS, table)
    atomic_write_text(out / RELATIONS, graph.to_csv())
    atomic_write_text(out / "synth.json", _json({"config": asdict(cfg), "spec": spec.to_dict(),
                                                 "samples": len(table)}))
    return [out / IMAGES, out / ANNOTATIONS, out / RELATIONS, out / "synth.json"]


def cmd_train(cfg: RunConfig, stage: _Stage) -> list[Path]:
    stage("load")
    images, table = _load_dataset(Path(cfg.data_dir))
    model_path = _model_path(cfg)
    ensure_dir(model_path.parent)
    stage("train")
    net_cfg = default_config(len(table.names), images.shape[-1], images.shape[1])
    if cfg.probe_layer is not None:
        net_cfg = replace(net_cfg, probe_layer=cfg.probe_layer)
    net = MicroNet.initialize(net_cfg, substream(cfg.seed, "init"), cfg.init_scale)
    log = []
    net = train(net, images, table.values, LossSpec.logistic(len(table.names)), cfg.training(),
                on_epoch=lambda e, loss: log.append((e, loss)))
    stage("write")
    save_model(model_path, net)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mean_loss"])
    w.writerows((e, repr(float(loss))) for e, loss in log)
    log_path = model_path.with_name(model_path.stem + "_train_log.csv")
    atomic_write_text(log_path, buf.getvalue())
    return [model_path, log_path]


def _load_for_diagnosis(cfg: RunConfig, stage: _Stage):
    stage("load")
    images, table = _load_dataset(Path(cfg.data_dir))
    rel_path = Path(cfg.relations) if cfg.relations else Path(cfg.data_dir) / RELATIONS
    if not rel_path.is_file():
        raise PathError(f"missing relations file: {rel_path}")
    graph = read_relations(rel_path, table.names)
    model_path = _model_path(cfg, reading=True)
    if not model_path.is_file():
        raise PathError(f"missing model file: {model_path}")
    net = load_model(model_path)
    if cfg.probe_layer is not None:
        net = MicroNet(replace(net.config, probe_layer=cfg.probe_layer), net.params)
    if net.attribute_count != len(table.names):
        raise ValidationError(f"model predicts {net.attribute_count} attributes, annotations have {len(table.names)}")
    return images, table, graph, net


def cmd_diagnose(cfg: RunConfig, stage: _Stage) -> list[Path]:
    out = _out_dir(cfg)
    images, table, graph, net = _load_for_diagnosis(cfg, stage)
    stage("attribution")
    dcfg = cfg.diagnosis()
    reps = attribute_representations(net, images, dcfg)
    stage("diagnosis")
    report = diagnose(net, images, table, graph, dcfg, reps=reps, extra_config={"run": asdict(cfg)})
    stage("write")
    written = [out / "report.json", out / "summary.csv"]
    atomic_write_text(written[0], report.to_json(timestamp=_now()))
    atomic_write_text(written[1], report.summary_csv())
    hist_dir = out / "histograms"
    hist_dir.mkdir(exist_ok=True)
    for (i, j), d in sorted(report.distributions.items()):
        path = hist_dir / f"{table.names[i]}__{table.names[j]}.csv"
        atomic_write_text(path, d.to_csv())
        written.append(path)
    if cfg.heatmaps > 0:
        written += _write_heatmaps(out / "heatmaps", net, reps, table, range(min(cfg.heatmaps, len(table))),
                                   range(len(table.names)))
    return written


def _write_heatmaps(directory: Path, net, reps, table, rows, attrs) -> list[Path]:
    directory.mkdir(exist_ok=True)
    shape = net.config.probe_shape
    written = []
    for a in attrs:
        s = reps.surrogates[a]
        for k in rows:
            hmap = heatmap(reps.vectors[a][k], s.x[k], shape)
            written += write_heatmap(directory / f"{table.sample_ids[k]}__{table.names[a]}", hmap)
    return written


def cmd_heatmap(cfg: RunConfig, stage: _Stage) -> list[Path]:
    out = _out_dir(cfg)
    images, table, graph, net = _load_for_diagnosis(cfg, stage)
    if not 0 <= cfg.image_index < len(table):
        raise ValidationError(f"image index {cfg.image_index} outside [0, {len(table)})")
    attrs = [table.index(cfg.attribute)] if cfg.attribute else range(len(table.names))
    stage("attribution")
    reps = attribute_representations(net, images, cfg.diagnosis())
    stage("write")
    return _write_heatmaps(out, net, reps, table, [cfg.image_index], attrs)


def _experiment_config(cfg: RunConfig, spec: SynthSpec) -> ExperimentConfig:
    return ExperimentConfig(spec, cfg.training(), cfg.diagnosis())


def cmd_experiment2(cfg: RunConfig, stage: _Stage) -> list[Path]:
    out = _out_dir(cfg)
    stage("experiment2")
    res = run_experiment2([tuple(p) for p in cfg.pairs], cfg.taus, cfg.seeds, _experiment_config(cfg, cfg.synth()))
    summary = {
        "config": asdict(cfg),
        "reference_priors": res.reference,
        "pairs": [{"pair": list(p),
                   "mean_kl": {repr(t): res.mean_kl(p, t) for t in sorted(set(cfg.taus))},
                   "spearman_tau_kl": res.spearman(p) if len(set(cfg.taus)) > 1 else None}
                  for p in map(tuple, cfg.pairs)],
        "note": "bias removals are nested across tau within a seed",
    }
    stage("write")
    paths = [out / "experiment2.csv", out / "experiment2.json"]
    atomic_write_text(paths[0], res.to_csv())
    atomic_write_text(paths[1], _json(summary))
    return paths


def cmd_experiment3(cfg: RunConfig, stage: _Stage) -> list[Path]:
    out = _out_dir(cfg)
    stage("experiment3")
    spec = replace(cfg, attributes=4).synth()
    pair = tuple(cfg.bias_pair) if cfg.bias_pair else (0, 1)
    res = run_experiment3(pair, cfg.seeds, cfg.top_n, _experiment_config(cfg, spec), cfg.tau, cfg.test_samples)
    summary = {"config": asdict(cfg), "bias_pair": list(pair), "top_n": cfg.top_n,
               "mean_decrease": {m: res.mean_decrease(m) for m in ("ours", "entropy")}}
    stage("write")
    paths = [out / "experiment3.csv", out / "experiment3.json"]
    atomic_write_text(paths[0], res.to_csv())
    atomic_write_text(paths[1], _json(summary))
    return paths


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "heatmap": cmd_heatmap,
    "experiment2": cmd_experiment2,
    "experiment3": cmd_experiment3,
}


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def _pair_list(text):
    return [[int(a), int(b)] for a, b in (p.split("-") for p in text.split(",") if p.strip())]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="repbias", description="Diagnose representation bias in multi-attribute CNNs.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON file with settings; flags override it")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")

    def diag_flags(sp):
        sp.add_argument("--data-dir", dest="data_dir")
        sp.add_argument("--model")
        sp.add_argument("--relations")
        sp.add_argument("--probe-layer", dest="probe_layer", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--lambda-factor", dest="lam_factor", type=float)
        sp.add_argument("--max-units", dest="max_units", type=int)
        sp.add_argument("--bins", type=int)
        sp.add_argument("--smoothing", type=float)
        sp.add_argument("--sigma-min", dest="sigma_min", type=float)
        sp.add_argument("--kl-percentile", dest="kl_percentile", type=float)
        sp.add_argument("--kl-gate", dest="kl_gate", type=float)
        sp.add_argument("--near-zero", dest="near_zero", type=float)
        sp.add_argument("--far", type=float)
        sp.add_argument("--fit", choices=["pair_means", "pooled"])

    def train_flags(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--learning-rate", dest="learning_rate", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--init-scale", dest="init_scale", type=float)

    def synth_flags(sp):
        sp.add_argument("--attributes", type=int, choices=[2, 4])
        sp.add_argument("--samples", type=int)
        sp.add_argument("--image-size", dest="image_size", type=int)
        sp.add_argument("--noise", type=float)

    sp = sub.add_parser("synth", help="generate a synthetic attribute dataset")
    common(sp)
    synth_flags(sp)
    sp.add_argument("--bias-pair", dest="bias_pair", type=_int_list, help="e.g. 0,1")
    sp.add_argument("--tau", type=float)

    sp = sub.add_parser("train", help="train the network on a dataset directory")
    common(sp)
    train_flags(sp)
    sp.add_argument("--data-dir", dest="data_dir")
    sp.add_argument("--model", help="output model path (default OUT_DIR/model.bltm)")
    sp.add_argument("--probe-layer", dest="probe_layer", type=int)

    sp = sub.add_parser("diagnose", help="mine relationships and write the diagnosis report")
    common(sp)
    diag_flags(sp)
    sp.add_argument("--heatmaps", type=int, help="write heat maps for the first N images")

    sp = sub.add_parser("heatmap", help="write heat maps for one image")
    common(sp)
    diag_flags(sp)
    sp.add_argument("--image-index", dest="image_index", type=int)
    sp.add_argument("--attribute")

    for name in ("experiment2", "experiment3"):
        sp = sub.add_parser(name, help=f"run {name} on synthetic data")
        common(sp)
        synth_flags(sp)
        train_flags(sp)
        sp.add_argument("--seeds", type=_int_list)
        sp.add_argument("--lambda-factor", dest="lam_factor", type=float)
        sp.add_argument("--bins", type=int)
        sp.add_argument("--smoothing", type=float)
        if name == "experiment2":
            sp.add_argument("--taus", type=_float_list)
            sp.add_argument("--pairs", type=_pair_list, help="e.g. 0-1,2-3")
        else:
            sp.add_argument("--bias-pair", dest="bias_pair", type=_int_list)
            sp.add_argument("--tau", type=float)
            sp.add_argument("--top-n", dest="top_n", type=int)
            sp.add_argument("--test-samples", dest="test_samples", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    stage = _Stage()
    try:
        file_values = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    file_values = json.load(fh)
            except OSError as exc:
                raise PathError(f"cannot read config {args.config}: {exc}") from None
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{args.config}: invalid JSON ({exc})") from None
        flags = {k: v for k, v in vars(args).items() if k not in ("config", "command")}
        cfg = merge_config(args.command, file_values, flags)
        written = COMMANDS[args.command](cfg, stage)
    except ValidationError as exc:
        print(f"error [{stage.name}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLoss as exc:
        print(f"error [{stage.name}]: NonFiniteLoss at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return 2
    except (ReprBiasError, OSError) as exc:
        print(f"error [{stage.name}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
