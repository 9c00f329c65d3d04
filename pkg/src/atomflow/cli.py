"""Command-line entry point: ``atomflow <command> ...``.

Exit codes: 0 on success, 2 for usage or configuration errors, 3 for runtime
or data errors. ``ATOMFLOW_THREADS`` caps the numerical library's thread pool.
"""

from __future__ import annotations

import os

_threads = os.environ.get("ATOMFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import shutil  # noqa: E402
import sys  # noqa: E402
from dataclasses import asdict, dataclass, field, fields  # noqa: E402
from pathlib import Path  # noqa: E402

from .model import MODALITY_CHANNELS, MotionModel, ModelConfig, load_model, save_model  # noqa: E402
from .recognition import ClsConfig, Scenario, eval_classifier, load_classifier, save_classifier, train_classifier  # noqa: E402
from .synth import ClipLoadError, SceneConfig, build_dataset, default_programs, load_dataset, save_dataset  # noqa: E402
from .training import TrainConfig, TrainingError, eval_flow, train_unsupervised, zero_flow_rmse  # noqa: E402

log = logging.getLogger("atomflow")

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class ConfigError(ValueError):
    pass


class RuntimeFailure(RuntimeError):
    pass


# run configuration ----------------------------------------------------------


@dataclass
class DataSection:
    clips_per_program: int = 10
    split_seed: int = 0
    height: int = 64
    width: int = 64
    n_frames: int = 12
    size_range: tuple = (5.0, 8.0)
    max_distractors: int = 2


@dataclass
class CodecSection:
    bins_per_axis: int = 5
    bound: float = 1.0
    k_nn: int = 4
    M: int = 4


@dataclass
class ModelSection:
    enc_filters: tuple = (16, 32, 32)
    rep_channels: int = 32
    lstm_channels: int = 32
    dec_channels: int = 32
    dec_layers: int = 3


@dataclass
class RunConfig:
    seed: int = 0
    scenario: str | None = None
    output_dir: str | None = None
    dataset: DataSection = field(default_factory=DataSection)
    codec: CodecSection = field(default_factory=CodecSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClsConfig = field(default_factory=ClsConfig)

    def scene(self) -> SceneConfig:
        d = self.dataset
        return SceneConfig(d.height, d.width, d.n_frames, self.codec.M, self.train.horizon, tuple(d.size_range), d.max_distractors)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": self.seed})

    def model_config(self, scene: SceneConfig, num_classes: int) -> ModelConfig:
        m = self.model
        return ModelConfig(
            height=scene.height,
            width=scene.width,
            in_channels=len(MODALITY_CHANNELS[self.train.modality]),
            enc_filters=tuple(m.enc_filters),
            rep_channels=m.rep_channels,
            lstm_channels=m.lstm_channels,
            patch=scene.patch,
            num_classes=num_classes,
            dec_channels=m.dec_channels,
            dec_layers=m.dec_layers,
        )


SECTIONS = {"dataset": DataSection, "codec": CodecSection, "model": ModelSection, "train": TrainConfig, "classifier": ClsConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
    kwargs = {k: v for k, v in raw.items() if k not in SECTIONS}
    for name, cls in SECTIONS.items():
        kwargs[name] = _build(cls, raw.get(name, {}), name)
    for name in ("train", "classifier"):
        if "seed" in raw.get(name, {}):
            raise ConfigError(f"set the seed at the top level, not in {name}")
    cfg = RunConfig(**kwargs)
    validate_run_config(cfg)
    return cfg


def validate_run_config(cfg: RunConfig) -> None:
    try:
        cfg.scene().validate()
        cfg.train_config().validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for name, modality in (("train", cfg.train.modality), ("classifier", cfg.classifier.modality)):
        if modality not in MODALITY_CHANNELS:
            raise ConfigError(f"unknown {name}.modality {modality!r}")
    if cfg.scenario is not None and cfg.scenario not in {s.value for s in Scenario}:
        raise ConfigError(f"unknown scenario {cfg.scenario!r}")
    if cfg.codec.bins_per_axis % 2 == 0 or cfg.codec.bins_per_axis < 1:
        raise ConfigError(f"codec.bins_per_axis must be a positive odd integer, got {cfg.codec.bins_per_axis}")
    if not cfg.codec.bound > 0:
        raise ConfigError(f"codec.bound must be positive, got {cfg.codec.bound}")
    if not 1 <= cfg.codec.k_nn <= cfg.codec.bins_per_axis**3:
        raise ConfigError(f"codec.k_nn must lie in [1, {cfg.codec.bins_per_axis ** 3}]")


def load_run_config(path: str | None) -> tuple[RunConfig, str]:
    """Parse ``path`` (or the defaults); also return the JSON text to store beside outputs."""
    if path is None:
        text = "{}\n"
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return parse_run_config(raw), text


# helpers ---------------------------------------------------------------------


def prepare_out(path: str, force: bool, allow_existing: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not allow_existing and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise ConfigError(f"output directory {out} already exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_data(path: str):
    if not (Path(path) / "manifest.json").exists():
        raise RuntimeFailure(f"no dataset at {path} (manifest.json missing)")
    return load_dataset(path)


def check_geometry(cfg: RunConfig, ds) -> None:
    want = {"H": cfg.dataset.height, "W": cfg.dataset.width, "M": cfg.codec.M, "bins_per_axis": cfg.codec.bins_per_axis, "bound": cfg.codec.bound}
    have = {"H": ds.config.height, "W": ds.config.width, "M": ds.config.patch, "bins_per_axis": ds.codebook.bins_per_axis, "bound": ds.codebook.bound}
    diff = [f"{k}: config {want[k]} vs data {have[k]}" for k in want if want[k] != have[k]]
    if diff:
        raise ConfigError("geometry mismatch between config and data: " + "; ".join(diff))
    need = cfg.train.horizon + 2
    if ds.config.n_frames < need:
        raise ConfigError(f"horizon {cfg.train.horizon} needs clips of {need} frames, data has {ds.config.n_frames}")


# commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg, text = load_run_config(args.config)
    out = prepare_out(args.out, args.force)
    d, c = cfg.dataset, cfg.codec
    ds = build_dataset(default_programs(), d.clips_per_program, d.split_seed, cfg.scene(), c.bins_per_axis, c.bound, c.k_nn)
    save_dataset(ds, out)
    (out / "config.json").write_text(text)
    print(f"wrote {len(ds.clips)} clips to {out}")


def cmd_train_unsup(args) -> None:
    cfg, text = load_run_config(args.config)
    ds = _load_data(args.data)
    check_geometry(cfg, ds)
    out = prepare_out(args.out, args.force, allow_existing=args.resume)
    tc = cfg.train_config()
    if args.max_steps is not None:
        tc.max_steps = args.max_steps
    model = MotionModel(cfg.model_config(ds.config, ds.codebook.K), seed=cfg.seed)
    (out / "config.json").write_text(text)
    res = train_unsupervised(tc, ds, model, out_dir=out, resume=args.resume)
    print(f"checkpoint: {res.checkpoint}")


def cmd_train_cls(args) -> None:
    cfg, text = load_run_config(args.config)
    scenario = Scenario(args.scenario)
    if scenario is not Scenario.ARCHITECTURE_ONLY and not args.pretrained:
        raise ConfigError(f"--scenario {scenario.value} requires --pretrained")
    ds = _load_data(args.data)
    check_geometry(cfg, ds)
    pretrained, horizon = None, cfg.train.horizon
    if args.pretrained:
        if not (Path(args.pretrained) / "meta.json").exists():
            raise RuntimeFailure(f"no checkpoint at {args.pretrained}")
        pretrained, meta = load_model(args.pretrained)
        horizon = meta.get("horizon", horizon)
        if meta.get("modality", cfg.classifier.modality) != cfg.classifier.modality:
            raise ConfigError(f"pretrained modality {meta['modality']} differs from classifier.modality {cfg.classifier.modality}")
    out = prepare_out(args.out, args.force)
    cc = ClsConfig(**{**asdict(cfg.classifier), "seed": cfg.seed})
    mc = None
    if pretrained is None:
        mc = cfg.model_config(ds.config, ds.codebook.K)
        mc.in_channels = len(MODALITY_CHANNELS[cc.modality])
    # architecture_only with --pretrained copies that checkpoint's shape, never its weights
    clf = train_classifier(scenario, ds, pretrained, cc, model_config=mc)
    (out / "config.json").write_text(text)
    save_classifier(clf, out / "classifier", horizon=horizon)
    (out / "cls_log.csv").write_text(clf.log.to_csv())
    print(f"classifier: {out / 'classifier'}")


def cmd_eval_flow(args) -> None:
    ds = _load_data(args.data)
    if not (Path(args.checkpoint) / "meta.json").exists():
        raise RuntimeFailure(f"no checkpoint at {args.checkpoint}")
    out = prepare_out(args.out, args.force)
    _, meta = load_model(args.checkpoint)
    T = args.horizon or meta.get("horizon", ds.config.horizon)
    try:
        ev = eval_flow(args.checkpoint, ds, args.split, T)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    (out / "rmse.csv").write_text(ev.to_csv())
    write_json(
        out / "flow_eval.json",
        {
            "split": args.split,
            "horizon": T,
            "modality": meta.get("modality", "depth"),
            "rmse": [float(v) for v in ev.rmse],
            "zero_flow_rmse": [float(v) for v in zero_flow_rmse(ds, ds.indices(args.split), T)],
            "f1": float(ev.f1),
            "loss": float(ev.loss),
        },
    )
    print(ev.to_csv(), end="")


def cmd_eval_cls(args) -> None:
    ds = _load_data(args.data)
    if not (Path(args.classifier) / "meta.json").exists():
        raise RuntimeFailure(f"no classifier at {args.classifier}")
    out = prepare_out(args.out, args.force)
    clf = load_classifier(args.classifier)
    meta = json.loads((Path(args.classifier) / "meta.json").read_text())
    ev = eval_classifier(clf, ds, args.split, args.num_samples)
    (out / "confusion.csv").write_text(ev.confusion_csv())
    per = "class,accuracy\n" + "".join(f"{k},{float(a)!r}\n" for k, a in enumerate(ev.per_class)) + f"mean,{float(ev.accuracy)!r}\n"
    (out / "accuracy.csv").write_text(per)
    write_json(
        out / "cls_eval.json",
        {"scenario": clf.scenario.value, "horizon": meta.get("horizon"), "modality": clf.modality, "split": args.split, "accuracy": float(ev.accuracy)},
    )
    print(f"mean per-class accuracy {ev.accuracy:.4f}")


def _csv(rows: list[list]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _find_eval(run: Path, name: str) -> dict | None:
    hits = sorted([*run.glob(name), *run.glob(f"*/{name}")])
    return json.loads(hits[0].read_text()) if hits else None


def cmd_report(args) -> None:
    runs = Path(args.runs)
    if not runs.is_dir():
        raise RuntimeFailure(f"runs directory {runs} does not exist")
    flow, cls, missing = [], [], []
    for d in sorted(p for p in runs.iterdir() if p.is_dir()):
        f, c = _find_eval(d, "flow_eval.json"), _find_eval(d, "cls_eval.json")
        if f is not None:
            flow.append((d.name, f))
        if c is not None:
            cls.append((d.name, c))
        if f is None and c is None:
            missing.append(d.name)
    if missing:
        raise RuntimeFailure("runs without evaluation output: " + ", ".join(missing))
    if not flow and not cls:
        raise RuntimeFailure(f"no runs under {runs}")
    out = prepare_out(args.out, args.force)
    width = max((len(r["rmse"]) for _, r in flow), default=0)
    rows = [["run", "modality", "T"] + [f"rmse_t{t + 1}" for t in range(width)]]
    for name, r in flow:
        rows.append([name, r["modality"], r["horizon"]] + [repr(v) for v in r["rmse"]] + [""] * (width - len(r["rmse"])))
    (out / "rmse_curve.csv").write_text(_csv(rows))
    rows = [["run", "scenario", "T", "modality", "accuracy"]]
    for name, r in cls:
        rows.append([name, r["scenario"], r["horizon"], r["modality"], repr(r["accuracy"])])
    (out / "ablation.csv").write_text(_csv(rows))
    print(f"wrote {out / 'rmse_curve.csv'} and {out / 'ablation.csv'}")


# argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="atomflow", description="Atomic 3D flow representation learning at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, data=True):
        if config:
            sp.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by gen-data")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    sp = sub.add_parser("gen-data", help="generate the synthetic RGB-D dataset")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train-unsup", help="train the flow predictor")
    common(sp)
    sp.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/resume")
    sp.set_defaults(fn=cmd_train_unsup)

    sp = sub.add_parser("train-cls", help="train an activity classifier")
    common(sp)
    sp.add_argument("--scenario", required=True, choices=[s.value for s in Scenario])
    sp.add_argument("--pretrained", help="checkpoint directory from train-unsup")
    sp.set_defaults(fn=cmd_train_cls)

    sp = sub.add_parser("eval-flow", help="per-timestep RMSE and F1 of a checkpoint")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--horizon", type=int)
    sp.set_defaults(fn=cmd_eval_flow)

    sp = sub.add_parser("eval-cls", help="mean per-class accuracy and confusion matrix")
    common(sp, config=False)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--num-samples", type=int, default=25)
    sp.set_defaults(fn=cmd_eval_cls)

    sp = sub.add_parser("report", help="aggregate evaluated runs into rmse_curve.csv and ablation.csv")
    sp.add_argument("--runs", required=True, help="directory whose subdirectories are runs")
    sp.add_argument("--out", required=True, help="directory for the two CSVs")
    sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"atomflow: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, TrainingError, ClipLoadError, OSError, ValueError) as e:
        print(f"atomflow: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
