"""Pipeline stages behind the command-line interface.

Each stage is a plain function from a resolved config to files on disk,
so tests can drive them directly and sweep grid points can run in
worker processes. The run manifest is written atomically at the end of
a stage; an interrupted run leaves no manifest.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import (
    STAGE_DATASET,
    STAGE_ENCODER,
    STAGE_EVAL,
    STAGE_FINETUNE,
    STAGE_GAR,
    STAGE_PROBE,
    STAGE_TRAIN,
    ExperimentConfig,
    TOOL_VERSION,
    save_config,
    stage_seed,
)
from .data import (
    ActionDistribution,
    Dataset,
    generate_records,
    load_dataset,
    sample_start_pose,
    write_dataset,
)
from .latent import (
    LearnedWorldModel,
    load_checkpoint,
    make_encoder,
    save_checkpoint,
)
from .metrics import (
    EvalSequence,
    KIND_COMPOSITION,
    KIND_IDENTITY,
    KIND_INVERSE,
    ProbeConfig,
    evaluate_gac,
    evaluate_gar,
    write_gac_csv,
    write_gac_gnuplot,
    write_gac_json,
    write_gac_summary_csv,
    write_gar_csv,
    write_gar_json,
)
from .models import ExactModel, PerturbedModel, ViolationConfig, WorldModel
from .se2 import DistanceParams
from .segments import ActionIncrement
from .training import prediction_loss, train


class UnknownModelRefError(ValueError):
    """The model reference is neither a named reference model nor a checkpoint."""


def parse_model_ref(ref: str, eval_noise_sigma: float = 0.0) -> tuple[WorldModel, str]:
    """Resolve a model reference into a world model and a display name.

    Named forms: "exact", "drift:DX,DY,DTH", "noise:SIGMA", "sat:C",
    "asym:GP,GM", or "perturbed:{json}" for combined injectors. Anything
    ending in .json is loaded as a checkpoint and wrapped with the given
    evaluation observation noise.
    """
    if ref == "exact":
        return ExactModel(), "exact"
    if ref.startswith("drift:"):
        parts = [float(v) for v in ref.split(":", 1)[1].split(",")]
        if len(parts) != 3:
            raise UnknownModelRefError(f"drift needs three components, got {ref!r}")
        cfg = ViolationConfig(drift_bias=ActionIncrement(*parts))
        return PerturbedModel(cfg, name=ref), ref
    if ref.startswith("noise:"):
        cfg = ViolationConfig(noise_sigma=float(ref.split(":", 1)[1]))
        return PerturbedModel(cfg, name=ref), ref
    if ref.startswith("sat:"):
        cfg = ViolationConfig(saturation_scale=float(ref.split(":", 1)[1]))
        return PerturbedModel(cfg, name=ref), ref
    if ref.startswith("asym:"):
        parts = [float(v) for v in ref.split(":", 1)[1].split(",")]
        if len(parts) != 2:
            raise UnknownModelRefError(f"asym needs two gains, got {ref!r}")
        cfg = ViolationConfig(asym_gain=(parts[0], parts[1]))
        return PerturbedModel(cfg, name=ref), ref
    if ref.startswith("perturbed:"):
        cfg = ViolationConfig.from_dict(json.loads(ref.split(":", 1)[1]))
        return PerturbedModel(cfg, name=ref), ref
    if ref.endswith(".json"):
        path = Path(ref)
        if not path.exists():
            raise UnknownModelRefError(f"checkpoint not found: {ref}")
        net, encoder, _meta = load_checkpoint(path)
        model = LearnedWorldModel(encoder, net, name=path.stem)
        if eval_noise_sigma > 0.0:
            model = model.with_obs_noise(eval_noise_sigma)
        return model, path.stem
    raise UnknownModelRefError(f"unknown model reference: {ref!r}")


def model_is_deterministic(model: WorldModel) -> bool:
    if isinstance(model, ExactModel):
        return True
    if isinstance(model, PerturbedModel):
        return not model.cfg.is_stochastic()
    if isinstance(model, LearnedWorldModel):
        return model.encoder.obs_noise_sigma == 0.0
    return False


@dataclass
class _ManifestBuilder:
    config_hash: str
    stages: dict

    def add(self, name: str, paths: list[str], wall_clock_s: float) -> None:
        self.stages[name] = {"paths": sorted(paths), "wall_clock_s": wall_clock_s}

    def write(self, out_dir: Path) -> Path:
        payload = {
            "tool_version": TOOL_VERSION,
            "config_hash": self.config_hash,
            "stages": self.stages,
        }
        target = out_dir / "manifest.json"
        tmp = out_dir / "manifest.json.tmp"
        with open(tmp, "w") as f:
            json.dump(payload, f, sort_keys=True, indent=2)
            f.write("\n")
        os.replace(tmp, target)
        return target


def _new_manifest(cfg: ExperimentConfig) -> _ManifestBuilder:
    return _ManifestBuilder(config_hash=cfg.config_hash(), stages={})


def _dataset_dir(out_dir: Path) -> Path:
    return out_dir / "dataset"


def make_eval_sequences(n_sequences: int, length: int, action_dist: ActionDistribution,
                        seed: int) -> list[EvalSequence]:
    """Fixed evaluation sequences, identical across all evaluated models."""
    sequences = []
    for i in range(n_sequences):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
        rng = np.random.Generator(np.random.PCG64(ss))
        start = sample_start_pose(rng)
        actions = action_dist.sample_segment(length, rng)
        sequences.append(EvalSequence(start=start, actions=actions))
    return sequences


def probe_grid_from_config(cfg: ExperimentConfig) -> list[ProbeConfig]:
    grid = [ProbeConfig(KIND_IDENTITY, k=cfg.probes.identity_k, l=l)
            for l in cfg.probes.identity_lengths]
    grid += [ProbeConfig(KIND_INVERSE, k=cfg.probes.inverse_k, l=l)
             for l in cfg.probes.inverse_lengths]
    grid += [ProbeConfig(KIND_COMPOSITION, k=1, l=l)
             for l in cfg.probes.composition_lengths]
    return grid


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    """Generate the training dataset under <out_dir>/dataset."""
    t0 = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _new_manifest(cfg)
    model, model_name = parse_model_ref(cfg.dataset.model)
    seed = cfg.dataset.seed if cfg.dataset.seed is not None else stage_seed(cfg.seed, STAGE_DATASET)
    records = generate_records(
        model, cfg.dataset.n_trajectories, cfg.dataset.length,
        cfg.dataset.action_dist, seed, start_pos_sigma=cfg.dataset.start_pos_sigma,
    )
    data_dir = _dataset_dir(out_dir)
    write_dataset(data_dir, records, {"seed": seed, "model": model_name})
    save_config(out_dir / "resolved_config.json", cfg)
    manifest.add("gen-data", [str(data_dir)], time.perf_counter() - t0)
    manifest.write(out_dir)
    return data_dir


def _encoder_seed(cfg: ExperimentConfig) -> int:
    if cfg.encoder.seed is not None:
        return cfg.encoder.seed
    return stage_seed(cfg.seed, STAGE_ENCODER)


def _load_train_dataset(cfg: ExperimentConfig, out_dir: Path) -> Dataset:
    if cfg.train.dataset_path is not None:
        return load_dataset(cfg.train.dataset_path)
    return load_dataset(_dataset_dir(out_dir))


def _held_out_prediction_loss(cfg: ExperimentConfig, net, encoder) -> float:
    """Deterministic post-training prediction loss on freshly generated transitions."""
    model, _ = parse_model_ref(cfg.dataset.model)
    records = generate_records(
        model, 32, cfg.dataset.length, cfg.dataset.action_dist,
        stage_seed(cfg.seed, STAGE_EVAL), start_pos_sigma=cfg.dataset.start_pos_sigma,
    )
    transitions = [
        (rec.poses[t], rec.actions[t], rec.poses[t + 1])
        for rec in records
        for t in range(0, len(rec.actions), 4)
    ]
    return prediction_loss(net, encoder, transitions)


def cmd_train(cfg: ExperimentConfig, label: str | None = None) -> Path:
    """Train from the configured dataset; write checkpoint, loss curve, manifest.

    When the run names an init checkpoint it fine-tunes those parameters
    (the checkpoint's encoder must match the configured one).
    """
    t0 = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _new_manifest(cfg)
    dataset = _load_train_dataset(cfg, out_dir)
    encoder = make_encoder(
        cfg.encoder.latent_dim, _encoder_seed(cfg), cfg.encoder.obs_noise_sigma
    )
    initial_net = None
    stage = STAGE_TRAIN
    if cfg.train.init_checkpoint is not None:
        initial_net, ckpt_encoder, _meta = load_checkpoint(cfg.train.init_checkpoint)
        if not np.array_equal(ckpt_encoder.projection, encoder.projection):
            raise ValueError("init checkpoint was trained with a different encoder")
        stage = STAGE_FINETUNE
    run = replace(cfg.train, seed=stage_seed(cfg.seed, stage))
    result = train(run, cfg.ga, dataset, encoder, initial_net=initial_net)

    eval_loss = _held_out_prediction_loss(cfg, result.net, encoder)
    if label is None:
        label = "baseline" if cfg.ga.lambda_ga == 0.0 else "ga"
    ckpt_path = out_dir / "checkpoint.json"
    save_checkpoint(
        ckpt_path, result.net, encoder,
        meta={"label": label, "steps": run.steps, "eval_prediction_loss": eval_loss},
    )
    curve_path = out_dir / "loss_curve.csv"
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "active_constraint", "l_pred", "l_ga", "total"])
        for row in result.rows:
            w.writerow([row.step, row.active_constraint, repr(row.l_pred),
                        repr(row.l_ga), repr(row.total)])
    metrics_path = out_dir / "train_metrics.json"
    with open(metrics_path, "w") as f:
        json.dump(
            {"label": label, "eval_prediction_loss": eval_loss,
             "final_total": result.rows[-1].total, "steps": run.steps},
            f, sort_keys=True, indent=2,
        )
        f.write("\n")
    save_config(out_dir / "resolved_config.json", cfg)
    manifest.add("train", [str(ckpt_path), str(curve_path), str(metrics_path)],
                 time.perf_counter() - t0)
    manifest.write(out_dir)
    return ckpt_path


def cmd_probe(cfg: ExperimentConfig, model_ref: str):
    """Run the consistency probe grid against a model reference."""
    t0 = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _new_manifest(cfg)
    model, model_name = parse_model_ref(model_ref, cfg.probes.eval_noise_sigma)
    seed = stage_seed(cfg.seed, STAGE_PROBE)
    sequences = make_eval_sequences(
        cfg.probes.n_sequences, cfg.probes.sequence_length, cfg.probes.action_dist, seed
    )
    dist = DistanceParams(alpha_rot=cfg.probes.alpha_rot)
    report = evaluate_gac(
        model, sequences, probe_grid_from_config(cfg), dist, seed,
        concentration=cfg.probes.dirichlet_concentration,
    )
    paths = {
        "json": out_dir / "gac_report.json",
        "csv": out_dir / "gac_per_config.csv",
        "summary": out_dir / "gac_summary.csv",
        "gnuplot": out_dir / "gac_trends.dat",
    }
    write_gac_json(paths["json"], report, model_name)
    write_gac_csv(paths["csv"], report, model_name)
    write_gac_summary_csv(paths["summary"], report, model_name)
    write_gac_gnuplot(paths["gnuplot"], report)
    save_config(out_dir / "resolved_config.json", cfg)
    manifest.add("probe", [str(p) for p in paths.values()], time.perf_counter() - t0)
    manifest.write(out_dir)
    return report


def cmd_gar(cfg: ExperimentConfig, model_ref: str):
    """Run the rollout-dispersion evaluation against a model reference."""
    t0 = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _new_manifest(cfg)
    model, model_name = parse_model_ref(model_ref, cfg.gar.eval_noise_sigma)
    seed = stage_seed(cfg.seed, STAGE_GAR)
    sequences = make_eval_sequences(
        cfg.gar.n_sequences, max(cfg.gar.horizons), cfg.gar.action_dist, seed
    )
    note = "deterministic model: dispersion is zero" if model_is_deterministic(model) else None
    report = evaluate_gar(
        model, sequences, cfg.gar.horizons, cfg.gar.n_rollouts,
        DistanceParams(alpha_rot=cfg.gar.alpha_rot), seed, note=note,
    )
    json_path = out_dir / "gar_report.json"
    csv_path = out_dir / "gar.csv"
    write_gar_json(json_path, report, model_name)
    write_gar_csv(csv_path, report, model_name)
    save_config(out_dir / "resolved_config.json", cfg)
    manifest.add("gar", [str(json_path), str(csv_path)], time.perf_counter() - t0)
    manifest.write(out_dir)
    return report


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


SWEEP_AXES = ("constraints", "lambda", "span", "mode")


def sweep_points(cfg: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    """Grid points for one ablation axis, as (label, config) pairs."""
    if axis == "constraints":
        ga = cfg.ga
        return [
            ("baseline", replace(cfg, ga=replace(ga, lambda_ga=0.0))),
            ("id-only", replace(cfg, ga=replace(ga, lambda_inv=0.0, lambda_comp=0.0))),
            ("inv-only", replace(cfg, ga=replace(ga, lambda_id=0.0, lambda_comp=0.0))),
            ("comp-only", replace(cfg, ga=replace(ga, lambda_id=0.0, lambda_inv=0.0))),
            ("full", cfg),
        ]
    if axis == "lambda":
        return [
            (f"lambda={lam:g}", replace(cfg, ga=replace(cfg.ga, lambda_ga=lam)))
            for lam in (0.0, 0.1, 0.5, 1.0)
        ]
    if axis == "span":
        return [
            (f"span={span}", replace(cfg, ga=replace(cfg.ga, max_span=span)))
            for span in (2, 4, 6)
        ]
    if axis == "mode":
        return [
            ("free-running", replace(cfg, ga=replace(cfg.ga, mode="free-running"))),
            ("teacher-forced", replace(cfg, ga=replace(cfg.ga, mode="teacher-forced"))),
        ]
    raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def run_sweep_point(args: tuple[str, dict]) -> dict:
    """Train and evaluate one grid point; returns its consolidated row."""
    label, cfg_dict = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    ckpt = cmd_train(cfg, label=label)
    gac = cmd_probe(cfg, str(ckpt))
    gar = cmd_gar(cfg, str(ckpt))
    with open(Path(cfg.out_dir) / "train_metrics.json") as f:
        train_metrics = json.load(f)
    row = {
        "label": label,
        "delta_id": gac.delta_id,
        "delta_inv": gac.delta_inv,
        "delta_comp": gac.delta_comp,
        "e_gac": gac.e_gac,
        "eval_prediction_loss": train_metrics["eval_prediction_loss"],
        "checkpoint_hash": file_sha256(ckpt),
        "out_dir": cfg.out_dir,
    }
    for entry in gar.entries:
        row[f"gar{entry.horizon}_aligned"] = entry.aligned_mean
        row[f"gar{entry.horizon}_nonaligned"] = entry.nonaligned_mean
    return row


def cmd_ablate(cfg: ExperimentConfig, axis: str, threads: int = 1) -> list[dict]:
    """Train and evaluate every grid point on one axis, then consolidate.

    Grid points share the dataset generated from the base config. When a
    pretrain run is configured, one base model is trained first and every
    grid point fine-tunes it. Rows are written in grid order regardless
    of worker scheduling.
    """
    t0 = time.perf_counter()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _new_manifest(cfg)
    data_dir = _dataset_dir(out_dir)
    if not data_dir.is_dir():
        cmd_gen_data(cfg)
    base_ckpt = None
    if cfg.pretrain is not None:
        base_cfg = replace(
            cfg,
            out_dir=str(out_dir / "base"),
            train=replace(cfg.pretrain, dataset_path=str(data_dir)),
            ga=replace(cfg.ga, lambda_ga=0.0),
            pretrain=None,
        )
        base_ckpt = cmd_train(base_cfg, label="pretrain")
    points = []
    for label, point_cfg in sweep_points(cfg, axis):
        point_train = replace(
            point_cfg.train,
            dataset_path=str(data_dir),
            init_checkpoint=None if base_ckpt is None else str(base_ckpt),
        )
        point_cfg = replace(
            point_cfg,
            out_dir=str(out_dir / f"sweep_{axis}" / label.replace("=", "_")),
            train=point_train,
        )
        points.append((label, point_cfg.to_dict()))
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_sweep_point, points))
    else:
        rows = [run_sweep_point(p) for p in points]

    table_path = out_dir / f"ablation_{axis}.csv"
    fields = ["label", "delta_id", "delta_inv", "delta_comp", "e_gac"]
    gar_fields = sorted(k for k in rows[0] if k.startswith("gar"))
    fields += gar_fields + ["eval_prediction_loss", "checkpoint_hash"]
    with open(table_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(fields)
        for row in rows:
            w.writerow([row[k] if isinstance(row[k], str) else repr(row[k]) for k in fields])
    sweep_manifest = {
        "axis": axis,
        "rows": [
            {"label": r["label"], "checkpoint_hash": r["checkpoint_hash"], "out_dir": r["out_dir"]}
            for r in rows
        ],
    }
    with open(out_dir / f"ablation_{axis}_manifest.json", "w") as f:
        json.dump(sweep_manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    save_config(out_dir / "resolved_config.json", cfg)
    manifest.add(f"ablate-{axis}", [str(table_path)], time.perf_counter() - t0)
    manifest.write(out_dir)
    return rows


def cmd_report(out_dir) -> str:
    """Collect metric summaries under a run directory into one text table."""
    out = Path(out_dir)
    lines = []
    summaries = sorted(out.rglob("gac_summary.csv"))
    if summaries:
        lines.append("consistency (per model): delta_id delta_inv delta_comp e_gac")
        for path in summaries:
            with open(path) as f:
                rows = list(csv.DictReader(f))
            for r in rows:
                lines.append(
                    f"  {r['model']}: {float(r['delta_id']):.4g} {float(r['delta_inv']):.4g} "
                    f"{float(r['delta_comp']):.4g} {float(r['e_gac']):.4g}"
                )
    gars = sorted(out.rglob("gar.csv"))
    if gars:
        lines.append("dispersion (per model, horizon): aligned nonaligned")
        for path in gars:
            with open(path) as f:
                rows = list(csv.DictReader(f))
            for r in rows:
                lines.append(
                    f"  {r['model']} T={r['horizon']}: {float(r['aligned_mean']):.4g} "
                    f"{float(r['nonaligned_mean']):.4g}"
                )
    ablations = sorted(out.rglob("ablation_*.csv"))
    for path in ablations:
        lines.append(f"ablation table: {path}")
    if not lines:
        lines.append(f"no metric files found under {out}")
    text = "\n".join(lines) + "\n"
    with open(out / "report.txt", "w") as f:
        f.write(text)
    return text
