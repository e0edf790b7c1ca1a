"""``aeseg`` command line: gen-data, train, segment, eval.

Every command accepts ``--config run.json`` plus flag overrides and writes the
fully-resolved configuration as ``config.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from .data import HEALTHY, Manifest, PhantomParams, Volume, generate_cohort, read_volume, write_dataset, write_volume
from .errors import AesegError, ConfigError, ContractError
from .metrics import aggregate, dice, residual_histogram, write_histogram_csv, write_results_csv, write_summary_csv
from .models import (ModelConfig, ModelKind, build_model, check_consistency, default_latent, load_checkpoint,
                     parse_latent, reconstruct, save_checkpoint)
from .pipeline import PipelineConfig, fit_threshold, masked_training_residuals, residual, segment
from .training import TrainConfig, train

log = logging.getLogger("aeseg")

DESK_EPOCHS = 16
MODEL_CHOICES = ("dae", "sae", "dvae", "svae", "saegan", "anovaegan")


@dataclass
class DataSection:
    phantom: PhantomParams = field(default_factory=PhantomParams)
    n_healthy: int = 40
    n_lesion: int = 10
    train_frac: float = 1.0


@dataclass
class ModelSection:
    kind: str = "svae"
    latent: str = ""  # empty -> the kind's default bottleneck
    config: ModelConfig = field(default_factory=ModelConfig)


@dataclass
class SegmentSection:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    histogram_bins: int = 50
    example_figures: int = 4


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=DESK_EPOCHS))
    segment: SegmentSection = field(default_factory=SegmentSection)

    # -- resolution helpers
    def model_kind(self) -> ModelKind:
        return ModelKind.parse(self.model.kind)

    def latent_spec(self):
        kind = self.model_kind()
        return parse_latent(self.model.latent) if self.model.latent else default_latent(kind)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["model"]["latent"] = str(self.latent_spec())
        doc["model"]["kind"] = self.model_kind().value
        return doc


def _build(template, doc, where: str):
    """Copy of dataclass ``template`` updated from ``doc``; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{where.rstrip('.') or 'config'}: expected an object, got {type(doc).__name__}")
    known = {f.name for f in fields(template)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        current = getattr(template, name)
        kwargs[name] = _build(current, value, f"{where}{name}.") if is_dataclass(current) else value
    try:
        return replace(template, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where.rstrip('.') or 'config'}: {exc}") from exc


def _set_dotted(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
    node[keys[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path=None, overrides=()) -> RunConfig:
    """Read a JSON run config (optional) and apply ``(dotted.key, value)`` overrides."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    for key, value in overrides:
        _set_dotted(doc, key, value)
    cfg = _build(RunConfig(), doc, "")
    # the top-level seed drives every stage
    cfg.data.phantom = replace(cfg.data.phantom, seed=cfg.seed)
    cfg.train = replace(cfg.train, seed=cfg.seed)
    # validate everything up front so errors surface before any work starts
    cfg.train.validate()
    cfg.segment.pipeline.validate()
    check_consistency(cfg.model_kind(), cfg.latent_spec(), cfg.model.config)
    return cfg


def write_config(cfg: RunConfig, out_dir: Path) -> Path:
    path = out_dir / "config.json"
    path.write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    return path


# -- commands -----------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = generate_cohort(cfg.data.phantom, cfg.data.n_healthy, cfg.data.n_lesion)
    path = write_dataset(records, out_dir, cfg.data.train_frac, cfg.seed)
    write_config(cfg, out_dir)
    log.info("wrote %d patients to %s", len(records), out_dir)
    return path


def _healthy_train(manifest: Manifest):
    entries = [e for e in manifest.train if e.cohort == HEALTHY]
    if not entries:
        raise ConfigError("manifest has no healthy patients in the train split")
    return entries


def cmd_train(cfg: RunConfig, manifest_path, out_dir) -> Path:
    from .plotting import plot_losses

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Manifest.read(manifest_path)
    images = [manifest.load(e).image.data for e in _healthy_train(manifest)]
    data = np.concatenate([im[:, None] for im in images], axis=0)
    kind = cfg.model_kind()
    mcfg = replace(cfg.model.config, input_size=data.shape[-1]) \
        if cfg.model.config.input_size != data.shape[-1] else cfg.model.config
    if data.shape[-1] != data.shape[-2]:
        raise ConfigError(f"slices must be square, got {data.shape[-2]}x{data.shape[-1]}")
    cfg.model.config = mcfg
    check_consistency(kind, cfg.latent_spec(), mcfg)
    params = build_model(kind, cfg.latent_spec(), mcfg, seed=cfg.seed)

    def progress(epoch, report):
        log.info("epoch %d/%d  l_rec %.3f", epoch + 1, cfg.train.epochs, report.epoch_means("l_rec")[-1])

    params, report = train(kind, data, cfg.train, params=params, progress=progress)
    ckpt = out_dir / "model.ckpt"
    save_checkpoint(params, ckpt)
    report.write_csv(out_dir / "losses.csv")
    plot_losses(report, out_dir / "losses.png")
    write_config(cfg, out_dir)
    return ckpt


def _segment_one(params, manifest: Manifest, entry, thr, pcfg: PipelineConfig):
    rec = manifest.load(entry)
    t0 = time.perf_counter()
    x_hat = reconstruct(params, rec.image.data[:, None])[:, 0]
    res = segment(rec.image.data, x_hat, rec.brain_mask.data, thr, pcfg)
    seconds = (time.perf_counter() - t0) / rec.image.data.shape[0]
    return rec, x_hat, res, seconds


def cmd_segment(cfg: RunConfig, checkpoint, manifest_path, out_dir, jobs: int = 1) -> dict:
    """Fit the threshold on training residuals, segment every test patient."""
    from .plotting import plot_examples, plot_histogram

    out_dir = Path(out_dir)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = Manifest.read(manifest_path)
    params = load_checkpoint(checkpoint)
    pcfg = cfg.segment.pipeline
    if not manifest.test:
        raise ConfigError("manifest has no test patients")

    def train_residuals():
        for e in _healthy_train(manifest):
            rec = manifest.load(e)
            x_hat = reconstruct(params, rec.image.data[:, None])[:, 0]
            yield masked_training_residuals(rec.image.data, x_hat, rec.brain_mask.data, pcfg.erosion_radius)

    thr = fit_threshold(train_residuals(), pcfg.percentile, source=str(checkpoint))
    log.info("threshold %.6f (p%g of %d training residuals)", thr.value, thr.percentile, thr.n_samples)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        outcomes = list(pool.map(lambda e: _segment_one(params, manifest, e, thr, pcfg), manifest.test))

    model, latent = params.kind.value, str(params.latent)
    rows, res_all, les_all, brain_all, examples = [], [], [], [], []
    for rec, x_hat, res, seconds in outcomes:
        write_volume(Volume(res.mask), out_dir / "masks" / f"{rec.id}.vol")
        rows.append((model, latent, rec.id, dice(res.mask, rec.lesion_mask), seconds))
        res_all.append(residual(rec.image.data, x_hat).ravel())
        les_all.append(rec.lesion_mask.data.ravel())
        brain_all.append(rec.brain_mask.data.ravel())
        if len(examples) < cfg.segment.example_figures and rec.lesion_mask.data.any():
            z = int(np.argmax(rec.lesion_mask.data.sum(axis=(1, 2))))
            examples.append((rec.id, rec.image.data[z], x_hat[z], res.residual[z], res.mask[z],
                             rec.lesion_mask.data[z]))
    write_results_csv(out_dir / "results.csv", rows)
    edges, cn, ca = residual_histogram(np.concatenate(res_all), np.concatenate(les_all),
                                       np.concatenate(brain_all), cfg.segment.histogram_bins)
    write_histogram_csv(out_dir / "histogram.csv", edges, cn, ca)
    (out_dir / "threshold.json").write_text(json.dumps(
        {"value": thr.value, "percentile": thr.percentile, "n_samples": thr.n_samples,
         "model": model, "latent_spec": latent}, indent=2) + "\n")
    plot_histogram(edges, cn, ca, thr.value, out_dir / "histogram.png")
    if examples:
        plot_examples(examples, out_dir / "examples.png")
    write_config(cfg, out_dir)
    return {"results": out_dir / "results.csv", "histogram": out_dir / "histogram.csv",
            "threshold": thr}


def cmd_eval(predictions, manifest_path, out_path=None) -> Path:
    """Per-patient Dice of ``predictions/masks/<id>.vol`` and the summary row."""
    predictions = Path(predictions)
    manifest = Manifest.read(manifest_path)
    missing = [e.id for e in manifest.test if not (predictions / "masks" / f"{e.id}.vol").exists()]
    if missing:
        raise ContractError(f"no prediction for test patient(s): {', '.join(missing)}")
    meta_path = predictions / "threshold.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    seconds = {}
    if (predictions / "results.csv").exists():
        from .metrics import read_results_csv
        seconds = {r["patient_id"]: float(r["seconds"]) for r in read_results_csv(predictions / "results.csv")}
    scores, times = [], []
    for e in manifest.test:
        pred = read_volume(predictions / "masks" / f"{e.id}.vol")
        scores.append(dice(pred, manifest.load(e).lesion_mask))
        times.append(seconds.get(e.id, 0.0))
    rep = aggregate(scores, times, meta.get("model", ""), meta.get("latent_spec", ""))
    out_path = Path(out_path) if out_path else predictions / "summary.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_summary_csv(out_path, [rep])
    print(f"{rep.model} {rep.latent_spec}: dice {rep.mean:.4f} +- {rep.std:.4f}  "
          f"({rep.avg_seconds:.4f} s/sample)")
    return out_path


# -- argument handling ----------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int, help="overrides the run seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.epochs=5 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aeseg", description="Autoencoder anomaly segmentation on phantoms.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write phantom volumes + manifest")
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on the healthy train split")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--model", choices=MODEL_CHOICES)
    t.add_argument("--latent", help="dense:D or spatial:HxWxC")

    s = sub.add_parser("segment", parents=[common], help="threshold residuals of the test split")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--manifest", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("eval", parents=[common], help="Dice summary of a segment output directory")
    e.add_argument("--predictions", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--out", type=Path, help="summary CSV path (default: PREDICTIONS/summary.csv)")
    return p


def _overrides(args) -> list:
    out = []
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), _parse_value(v)))
    if args.seed is not None:
        out.append(("seed", args.seed))
    if getattr(args, "model", None):
        out.append(("model.kind", args.model))
    if getattr(args, "latent", None):
        out.append(("model.latent", args.latent))
    return out


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_run_config(args.config, _overrides(args))
        if args.command == "gen-data":
            print(cmd_gen_data(cfg, args.out))
        elif args.command == "train":
            print(cmd_train(cfg, args.manifest, args.out))
        elif args.command == "segment":
            out = cmd_segment(cfg, args.checkpoint, args.manifest, args.out, args.jobs)
            print(f"threshold {out['threshold'].value:.6f}")
            print(out["results"])
        else:
            cmd_eval(args.predictions, args.manifest, args.out)
    except AesegError as exc:
        print(f"aeseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"aeseg: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
