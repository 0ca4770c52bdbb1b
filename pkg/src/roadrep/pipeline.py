"""Stage orchestration over a working directory.

Every stage hashes its inputs and the effective config into a manifest
line; re-running with identical hashes skips the stage, so a pipeline is
resumable. One run owns the workdir exclusively via a lock file.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, config_hash
from .evaluation import (
    HeadConfig,
    derive_speed_labels,
    eval_destination,
    eval_speed_inference,
    eval_travel_time,
)
from .features import (
    FeatureCodec,
    compute_edge_features,
    discretize_features,
    extract_traffic_dynamics,
    load_dynamics,
    save_dynamics,
)
from .fusion import fuse
from .hypergraph import build_hypergraph, load_hypergraph, save_hypergraph
from .mixhop import build_mixhop, load_matrix, save_matrix
from .network import (
    RoadNetwork,
    Trajectory,
    generate_synthetic_city,
    load_network,
    load_trajectories,
    save_trajectories,
    simulate_trajectories,
    write_network,
)
from .spatial import SpatialConfig, SpatialModel, prepare_spatial_data, train_spatial
from .temporal import TemporalConfig, TemporalModel, representations, train_temporal

log = logging.getLogger("roadrep")

MANIFEST = "manifest.jsonl"
EVAL_SEED_COUNT = 5
FEATURE_NAMES = ("road_type", "length", "lanes", "oneway")

# seed offsets per purpose, so stages draw independent streams
SEED_CITY, SEED_TRAJ, SEED_ZONES, SEED_SPATIAL, SEED_TEMPORAL, SEED_GATE = 0, 1, 2, 3, 4, 5


class MissingArtifactError(RuntimeError):
    def __init__(self, path, producer: str):
        super().__init__(f"missing artifact {path}; run the {producer!r} stage first")
        self.producer = producer


@dataclass
class SynthSpec:
    rows: int = 7
    cols: int = 7
    rings: int = 2
    count: int = 240

    def as_params(self) -> dict:
        return {"rows": self.rows, "cols": self.cols, "rings": self.rings, "count": self.count}


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def workdir_lock(work: Path):
    """Exclusive ownership of a workdir for the duration of a run."""
    work.mkdir(parents=True, exist_ok=True)
    lock = work / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(f"workdir {work} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _manifest_records(work: Path) -> list[dict]:
    path = work / MANIFEST
    if not path.exists():
        return []
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _append_manifest(work: Path, record: dict):
    with open(work / MANIFEST, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _stage(work: Path, name: str, cfg: RunConfig, inputs: dict[str, Path],
           outputs: list[str], runner, params: dict | None = None) -> bool:
    """Run one stage unless an identical run is already recorded; returns ran?"""
    work.mkdir(parents=True, exist_ok=True)
    params = params or {}
    in_hashes = {key: file_hash(path) for key, path in inputs.items()}
    cfg_h = config_hash(cfg)
    for record in reversed(_manifest_records(work)):
        if (record.get("stage") == name and record.get("inputs") == in_hashes
                and record.get("config") == cfg_h and record.get("params") == params
                and all((work / out).exists() for out in record.get("outputs", []))):
            log.info("stage %s: up to date, skipping", name)
            return False
    log.info("stage %s: running", name)
    started = time.monotonic()
    runner()
    _append_manifest(work, {
        "stage": name,
        "inputs": in_hashes,
        "params": params,
        "config": cfg_h,
        "outputs": outputs,
        "wall_time": round(time.monotonic() - started, 3),
    })
    return True


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingArtifactError(path, producer)
    return Path(path)


def _raw_inputs(work: Path, cfg: RunConfig) -> dict[str, Path]:
    """Roads/edges/trajectories: user-supplied paths or the synth outputs."""
    producer = "synth"
    roads = Path(cfg.roads) if cfg.roads else work / "roads.csv"
    edges = Path(cfg.edges) if cfg.edges else work / "edges.csv"
    trajs = Path(cfg.trajectories) if cfg.trajectories else work / "trajectories.jsonl"
    return {
        "roads": _require(roads, producer if not cfg.roads else "user input"),
        "edges": _require(edges, producer if not cfg.edges else "user input"),
        "trajectories": _require(trajs, producer if not cfg.trajectories else "user input"),
    }


def _load_dense_trajectories(path) -> list[Trajectory]:
    """Read the validated (dense-id) trajectory artifact without remapping."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(Trajectory([int(r) for r in obj["roads"]],
                                      [int(t) for t in obj["times"]]))
    return out


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_synth(work: Path, cfg: RunConfig, spec: SynthSpec) -> bool:
    def run():
        net = generate_synthetic_city(spec.rows, spec.cols, spec.rings, cfg.seed + SEED_CITY)
        write_network(net, work / "roads.csv", work / "edges.csv")
        trajs = simulate_trajectories(net, spec.count, cfg.seed + SEED_TRAJ)
        save_trajectories(trajs, work / "trajectories.jsonl")
        log.info("synthesized %d roads, %d trajectories", net.n_roads, len(trajs))

    return _stage(work, "synth", cfg, {}, ["roads.csv", "edges.csv", "trajectories.jsonl"],
                  run, params=spec.as_params())


def stage_preprocess(work: Path, cfg: RunConfig) -> bool:
    raw = _raw_inputs(work, cfg)
    outputs = ["codec.json", "road_codes.npy", "edge_features.npy",
               "hypergraph.jsonl", "dynamics.bin", "valid_trajectories.jsonl"]

    def run():
        net = load_network(raw["roads"], raw["edges"])
        codec, codes = discretize_features(net)
        edge_feats, codec = compute_edge_features(net, codec)
        trajs, violations = load_trajectories(raw["trajectories"], net, strict=True)
        if violations:
            log.info("dropped reachability violations: %d", violations)
        hg = build_hypergraph(net, k_zones=cfg.k_zones, radius_m=cfg.radius_m,
                              seed=cfg.seed + SEED_ZONES,
                              use_functional=not cfg.no_hg1,
                              use_same_type=not cfg.no_hg2,
                              use_oneway=not cfg.no_hg3)
        dynamics = extract_traffic_dynamics(trajs, net.n_roads)
        (work / "codec.json").write_text(codec.to_json(), encoding="utf-8")
        np.save(work / "road_codes.npy", codes)
        np.save(work / "edge_features.npy", edge_feats)
        save_hypergraph(hg, work / "hypergraph.jsonl")
        save_dynamics(dynamics, work / "dynamics.bin")
        save_trajectories(trajs, work / "valid_trajectories.jsonl")

    return _stage(work, "preprocess", cfg, raw, outputs, run)


def stage_mixhop(work: Path, cfg: RunConfig) -> bool:
    if cfg.no_mixhop:
        log.info("stage mixhop: disabled by ablation flag")
        return False
    trajs_path = _require(work / "valid_trajectories.jsonl", "preprocess")
    codes_path = _require(work / "road_codes.npy", "preprocess")

    def run():
        n = int(np.load(codes_path).shape[0])
        matrix = build_mixhop(_load_dense_trajectories(trajs_path), n)
        save_matrix(matrix.normalized, work / "mixhop.bin")

    return _stage(work, "mixhop", cfg, {"trajectories": trajs_path, "codes": codes_path},
                  ["mixhop.bin"], run)


def _spatial_inputs(work: Path, cfg: RunConfig):
    raw = _raw_inputs(work, cfg)
    net = load_network(raw["roads"], raw["edges"])
    codec = FeatureCodec.from_json(_require(work / "codec.json", "preprocess").read_text())
    codes = np.load(_require(work / "road_codes.npy", "preprocess"))
    edge_feats = np.load(_require(work / "edge_features.npy", "preprocess"))
    hg = load_hypergraph(_require(work / "hypergraph.jsonl", "preprocess"), net.n_roads)
    mix = None
    if not cfg.no_mixhop:
        mix = load_matrix(_require(work / "mixhop.bin", "mixhop"))
    vocabs = [codec.vocab_size(name) for name in FEATURE_NAMES]
    data = prepare_spatial_data(net, codes, vocabs, edge_feats, hg,
                                mixhop_normalized=mix, raw_degrees=cfg.raw_degrees)
    return net, data


def _spatial_config(cfg: RunConfig, hyper_positives: bool = False,
                    no_projection: bool = False) -> SpatialConfig:
    return SpatialConfig(d=cfg.d, d_f=cfg.d_f, epochs=cfg.epochs_spatial,
                         batch=cfg.batch_contrastive, lr=cfg.lr,
                         temperature=cfg.temperature, no_mixhop=cfg.no_mixhop,
                         freeze_mixhop=cfg.freeze_mixhop, raw_degrees=cfg.raw_degrees,
                         hyper_positives=hyper_positives, no_projection=no_projection)


def stage_train_spatial(work: Path, cfg: RunConfig, hyper_positives: bool = False,
                        no_projection: bool = False) -> bool:
    inputs = {
        "codes": _require(work / "road_codes.npy", "preprocess"),
        "edge_features": _require(work / "edge_features.npy", "preprocess"),
        "hypergraph": _require(work / "hypergraph.jsonl", "preprocess"),
    }
    inputs.update(_raw_inputs(work, cfg))
    if not cfg.no_mixhop:
        inputs["mixhop"] = _require(work / "mixhop.bin", "mixhop")

    def run():
        _, data = _spatial_inputs(work, cfg)
        z_g, z_h, model, history = train_spatial(
            data, _spatial_config(cfg, hyper_positives, no_projection),
            cfg.seed + SEED_SPATIAL)
        ad.save_checkpoint(work / "spatial.ckpt", model.state())
        ad.save_checkpoint(work / "spatial_embeddings.ckpt", {"z_graph": z_g, "z_hyper": z_h})
        with open(work / "spatial_loss.csv", "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for step, loss in history:
                fh.write(f"{step},{loss!r}\n")
        log.info("spatial branch: %d steps, final loss %.4f", len(history), history[-1][1])

    return _stage(work, "train-spatial", cfg, inputs,
                  ["spatial.ckpt", "spatial_embeddings.ckpt", "spatial_loss.csv"], run,
                  params={"hyper_positives": hyper_positives, "no_projection": no_projection})


def _temporal_config(cfg: RunConfig) -> TemporalConfig:
    return TemporalConfig(d_t=cfg.d_t, d_out=cfg.d, epochs=cfg.epochs_temporal,
                          batch=cfg.batch_traffic, lr=cfg.lr,
                          lambda_reg=cfg.lambda_reg, lambda_cls=cfg.lambda_cls,
                          causal=not cfg.bidirectional)


def stage_train_temporal(work: Path, cfg: RunConfig) -> bool:
    if cfg.no_tm:
        log.info("stage train-temporal: disabled by ablation flag")
        return False
    dyn_path = _require(work / "dynamics.bin", "preprocess")

    def run():
        dynamics = load_dynamics(dyn_path)
        z_d, model, history, stats = train_temporal(dynamics, _temporal_config(cfg),
                                                    cfg.seed + SEED_TEMPORAL)
        state = model.state()
        state["stats.mean"] = np.array([stats["mean"]])
        state["stats.std"] = np.array([stats["std"]])
        ad.save_checkpoint(work / "temporal.ckpt", state)
        ad.save_checkpoint(work / "temporal_embeddings.ckpt", {"z_temporal": z_d})
        with open(work / "temporal_loss.csv", "w", encoding="utf-8") as fh:
            fh.write("step,loss_reg,loss_cls\n")
            for step, reg, cls in history:
                fh.write(f"{step},{reg!r},{cls!r}\n")
        log.info("temporal branch: %d steps", len(history))

    return _stage(work, "train-temporal", cfg, {"dynamics": dyn_path},
                  ["temporal.ckpt", "temporal_embeddings.ckpt", "temporal_loss.csv"], run)


def _speed_targets(work: Path, cfg: RunConfig):
    raw = _raw_inputs(work, cfg)
    net = load_network(raw["roads"], raw["edges"])
    trajs = _load_dense_trajectories(_require(work / "valid_trajectories.jsonl", "preprocess"))
    return net, trajs, derive_speed_labels(net, trajs)


def stage_fuse(work: Path, cfg: RunConfig) -> bool:
    inputs = {"spatial": _require(work / "spatial_embeddings.ckpt", "train-spatial")}
    if not cfg.no_tm:
        inputs["temporal"] = _require(work / "temporal_embeddings.ckpt", "train-temporal")

    def run():
        spatial = ad.load_checkpoint(inputs["spatial"])
        z_d = None
        provenance = {"graph": file_hash(inputs["spatial"]), "hyper": file_hash(inputs["spatial"])}
        if not cfg.no_tm:
            z_d = ad.load_checkpoint(inputs["temporal"])["z_temporal"]
            provenance["temporal"] = file_hash(inputs["temporal"])
        kwargs = {}
        if cfg.mode == "gated":
            _, _, labels = _speed_targets(work, cfg)
            kwargs = {"fit_targets": np.array([labels[r] for r in sorted(labels)]),
                      "fit_ids": np.array(sorted(labels)), "seed": cfg.seed + SEED_GATE}
        fused = fuse(spatial["z_graph"], spatial["z_hyper"], z_d, mode=cfg.mode,
                     provenance=provenance, **kwargs)
        ad.save_checkpoint(work / "fused.ckpt", {"z": fused.z})
        (work / "fused.json").write_text(json.dumps(
            {"mode": fused.mode, "d_out": fused.d_out, "provenance": fused.provenance},
            sort_keys=True), encoding="utf-8")

    return _stage(work, "fuse", cfg, inputs, ["fused.ckpt", "fused.json"], run)


def eval_seeds(cfg: RunConfig) -> list[int]:
    return [cfg.seed + i for i in range(EVAL_SEED_COUNT)]


def run_evaluations(z: np.ndarray, network: RoadNetwork, trajectories, seeds,
                    config_h: str = "", head_cfg: HeadConfig | None = None):
    """The three downstream tasks against one frozen representation."""
    labels = derive_speed_labels(network, trajectories)
    return [
        eval_speed_inference(z, labels, seeds, config_hash=config_h),
        eval_travel_time(z, trajectories, seeds, head_cfg=head_cfg, config_hash=config_h),
        eval_destination(z, trajectories, seeds, head_cfg=head_cfg, config_hash=config_h),
    ]


def write_reports(reports, json_path: Path, csv_path: Path):
    payload = {"reports": [r.to_dict() for r in reports]}
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=1), encoding="utf-8")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("task,metric,value\n")
        for report in reports:
            for row in report.csv_rows():
                fh.write(row + "\n")


def stage_eval(work: Path, cfg: RunConfig) -> bool:
    inputs = {
        "fused": _require(work / "fused.ckpt", "fuse"),
        "trajectories": _require(work / "valid_trajectories.jsonl", "preprocess"),
    }
    inputs.update(_raw_inputs(work, cfg))

    def run():
        z = ad.load_checkpoint(inputs["fused"])["z"]
        net, trajs, _ = _speed_targets(work, cfg)
        reports = run_evaluations(z, net, trajs, eval_seeds(cfg), config_h=config_hash(cfg))
        write_reports(reports, work / "eval_report.json", work / "eval_report.csv")
        for report in reports:
            log.info("eval %s: %s", report.task, report.metrics)

    return _stage(work, "eval", cfg, inputs, ["eval_report.json", "eval_report.csv"], run)


# ---------------------------------------------------------------------------
# zero-shot transfer
# ---------------------------------------------------------------------------

def zero_shot_transfer(work: Path, cfg: RunConfig, target_roads, target_edges,
                       target_trajectories):
    """Apply frozen source encoders to an unseen city and evaluate there.

    The source must have been trained without the transition-matrix
    weighting (it is city-specific). Target features are coded with the
    source codec; unseen categorical values land on the reserved UNK row
    and are counted in the report.
    """
    if not cfg.no_mixhop:
        raise ValueError("transfer requires a source trained with no_mixhop "
                         "(the transition matrix is city-specific)")
    codec = FeatureCodec.from_json(_require(work / "codec.json", "preprocess").read_text())
    spatial_state = ad.load_checkpoint(_require(work / "spatial.ckpt", "train-spatial"))
    net = load_network(_require(Path(target_roads), "target city"),
                       _require(Path(target_edges), "target city"))
    trajs, violations = load_trajectories(Path(target_trajectories), net, strict=True)
    if violations:
        log.info("target city: dropped %d reachability violations", violations)

    codes, unk_count = codec.encode_network(net)
    edge_feats, _ = compute_edge_features(net, codec)  # reuses source normalization
    hg = build_hypergraph(net, k_zones=cfg.k_zones, radius_m=cfg.radius_m,
                          seed=cfg.seed + SEED_ZONES,
                          use_functional=not cfg.no_hg1,
                          use_same_type=not cfg.no_hg2,
                          use_oneway=not cfg.no_hg3)
    vocabs = [codec.vocab_size(name) for name in FEATURE_NAMES]
    data = prepare_spatial_data(net, codes, vocabs, edge_feats, hg,
                                mixhop_normalized=None, raw_degrees=cfg.raw_degrees)
    model = SpatialModel(data, _spatial_config(cfg), seed=cfg.seed + SEED_SPATIAL)
    model.load_state(spatial_state)
    with ad.no_grad():
        z_g, z_h, _, _ = model.forward(data)

    z_d = None
    if not cfg.no_tm:
        state = ad.load_checkpoint(_require(work / "temporal.ckpt", "train-temporal"))
        stats = {"mean": float(state["stats.mean"][0]), "std": float(state["stats.std"][0])}
        tmodel = TemporalModel(24, _temporal_config(cfg), seed=cfg.seed + SEED_TEMPORAL)
        tmodel.load_state(state)
        dynamics = extract_traffic_dynamics(trajs, net.n_roads)
        z_d = representations(tmodel, dynamics, stats)

    kwargs = {}
    if cfg.mode == "gated":
        labels = derive_speed_labels(net, trajs)
        kwargs = {"fit_targets": np.array([labels[r] for r in sorted(labels)]),
                  "fit_ids": np.array(sorted(labels)), "seed": cfg.seed + SEED_GATE}
    fused = fuse(z_g.values, z_h.values, z_d, mode=cfg.mode, **kwargs)

    reports = run_evaluations(fused.z, net, trajs, eval_seeds(cfg),
                              config_h=config_hash(cfg))
    for report in reports:
        report.extra["unk_codes"] = int(unk_count)
    return reports, unk_count


def stage_transfer(work: Path, cfg: RunConfig, target_roads, target_edges,
                   target_trajectories) -> bool:
    inputs = {
        "spatial": _require(work / "spatial.ckpt", "train-spatial"),
        "codec": _require(work / "codec.json", "preprocess"),
        "target_roads": _require(Path(target_roads), "target city"),
        "target_edges": _require(Path(target_edges), "target city"),
        "target_trajectories": _require(Path(target_trajectories), "target city"),
    }
    if not cfg.no_tm:
        inputs["temporal"] = _require(work / "temporal.ckpt", "train-temporal")

    def run():
        reports, unk = zero_shot_transfer(work, cfg, target_roads, target_edges,
                                          target_trajectories)
        write_reports(reports, work / "transfer_report.json", work / "transfer_report.csv")
        log.info("transfer: %d unknown feature codes", unk)

    return _stage(work, "transfer", cfg, inputs,
                  ["transfer_report.json", "transfer_report.csv"], run)


def run_pipeline(work: Path, cfg: RunConfig, spec: SynthSpec | None = None,
                 hyper_positives: bool = False, no_projection: bool = False):
    """Chain every stage; external inputs skip synth."""
    work = Path(work)
    if not (cfg.roads or cfg.edges or cfg.trajectories):
        stage_synth(work, cfg, spec or SynthSpec())
    stage_preprocess(work, cfg)
    stage_mixhop(work, cfg)
    stage_train_spatial(work, cfg, hyper_positives, no_projection)
    stage_train_temporal(work, cfg)
    stage_fuse(work, cfg)
    stage_eval(work, cfg)
