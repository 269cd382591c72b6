"""Stage functions wiring preprocessing, supervoxels, graphs, training and evaluation.

Every stage reads its inputs from disk and writes its outputs to disk, so
any stage can be rerun on its own from cached artifacts.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gat import GatConfig, GatModel, load_checkpoint, model_forward, save_checkpoint
from .graph import (attach_labels, build_adjacency, extract_features, project_to_voxels,
                    read_rag, write_node_counts_csv, write_rag, Rag)
from .metrics import EvalReport, aggregate, evaluate, format_table, write_reports_csv
from .phantom import PhantomSpec, phantom_generate
from .supervoxel import (SlicParams, read_labeling, remove_outliers, run_slic, scaled_k,
                         write_labeling)
from .training import TrainConfig, train
from .volume import (MODALITIES, LabelVolume, MultiModalVolume, load_nifti_case, preprocess,
                     read_vxg, write_nifti_labels, write_vxg)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class UserError(StageError):
    """Bad paths or configuration; maps to exit code 2."""


@dataclass
class PipelineConfig:
    workdir: str = "run"
    input: str | None = None
    stages: list[str] = field(default_factory=lambda: [
        "preprocess", "build-graph", "train", "predict", "evaluate", "report"])
    phantom: dict | None = None
    slic: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train_cases: list[str] | None = None
    test_cases: list[str] | None = None
    checkpoint: str | None = None
    overlay: bool = False
    seed: int = 0

    def path(self, *parts) -> Path:
        return Path(self.workdir, *parts)


# --------------------------------------------------------------------------
# threading


def limit_threads(n: int | None = None):
    """Cap BLAS threads; ``VOXELGAT_THREADS`` is used when ``n`` is None."""
    from threadpoolctl import threadpool_limits

    if n is None:
        env = os.environ.get("VOXELGAT_THREADS")
        n = int(env) if env else None
    if n is None:
        return None
    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------
# stages


def _discover_cases(input_dir: Path) -> dict[str, object]:
    """Map case name -> VXG path or dict of NIfTI paths."""
    cases: dict[str, object] = {}
    for p in sorted(input_dir.glob("*.vxg")):
        cases[p.stem] = p
    for d in sorted(x for x in input_dir.iterdir() if x.is_dir()):
        files = {}
        for f in d.iterdir():
            name = f.name.lower()
            if not (name.endswith(".nii") or name.endswith(".nii.gz")):
                continue
            stem = name.split(".nii")[0]
            for key in MODALITIES + ("seg",):
                if stem.endswith("_" + key):
                    files[key] = str(f)
        if all(m in files for m in MODALITIES):
            cases[d.name] = files
    return cases


def stage_preprocess(input_dir, out_dir, percentile: float = 99.5) -> list[str]:
    input_dir, out_dir = Path(input_dir), Path(out_dir)
    if not input_dir.is_dir():
        raise UserError("preprocess", f"input directory not found: {input_dir}")
    cases = _discover_cases(input_dir)
    if not cases:
        raise UserError("preprocess", f"no .vxg files or NIfTI case folders in {input_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, src in cases.items():
        meta = {"source": str(src)}
        if isinstance(src, Path):
            v, lab = read_vxg(src)
        else:
            v, lab, affine = load_nifti_case(src, src.get("seg"))
            meta["affine"] = affine.tolist()
        meta["source_shape"] = list(v.shape)
        try:
            pv, pl = preprocess(v, lab, percentile)
        except ValueError as exc:
            raise StageError("preprocess", f"{name}: {exc}") from exc
        meta.update(spacing=list(pv.spacing), origin=list(pv.origin), shape=list(pv.shape))
        write_vxg(out_dir / f"{name}.vxg", pv, pl)
        np.save(out_dir / f"{name}.mask.npy", pv.brain_mask)
        (out_dir / f"{name}.json").write_text(json.dumps(meta, indent=2))
    return sorted(cases)


def load_preprocessed(prep_dir: Path, name: str):
    meta = json.loads((prep_dir / f"{name}.json").read_text())
    v, lab = read_vxg(prep_dir / f"{name}.vxg", tuple(meta["spacing"]))
    mask = np.load(prep_dir / f"{name}.mask.npy")
    v = MultiModalVolume(v.channels, v.spacing, tuple(meta["origin"]), mask)
    return v, lab, meta


def stage_build_graph(prep_dir, out_dir, slic: SlicParams | None = None, k: int | None = None,
                      omega: float = 2.0, max_iters: int = 10,
                      connectivity: bool = True) -> list[str]:
    prep_dir, out_dir = Path(prep_dir), Path(out_dir)
    names = sorted(p.stem for p in prep_dir.glob("*.vxg"))
    if not names:
        raise UserError("build-graph", f"no preprocessed volumes in {prep_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in names:
        v, lab, meta = load_preprocessed(prep_dir, name)
        params = slic or SlicParams(k=k or scaled_k(int(np.prod(v.shape))), omega=omega,
                                    max_iters=max_iters, enforce_connectivity=connectivity)
        try:
            s = remove_outliers(run_slic(v, params), v)
        except ValueError as exc:
            raise StageError("build-graph", f"{name}: {exc}") from exc
        labels = attach_labels(s, lab) if lab is not None else None
        g = Rag(extract_features(s, v), build_adjacency(s.assignment), labels,
                np.arange(s.n_clusters))
        write_labeling(out_dir / f"{name}.svx", s)
        write_rag(out_dir / f"{name}.rag", g)
        log.info("%s: %d nodes, %d edges", name, g.n_nodes, len(g.edges))
    return names


def _load_graphs(graph_dir: Path, names=None) -> dict[str, Rag]:
    names = names or sorted(p.stem for p in graph_dir.glob("*.rag"))
    return {n: read_rag(graph_dir / f"{n}.rag") for n in names}


def stage_train(graph_dir, checkpoint, cfg: TrainConfig, model_cfg: GatConfig | None = None,
                names=None, log_csv=None):
    graph_dir = Path(graph_dir)
    graphs = _load_graphs(graph_dir, names)
    graphs = {n: g for n, g in graphs.items() if g.labels is not None}
    if not graphs:
        raise UserError("train", f"no labelled graphs in {graph_dir}")
    Path(checkpoint).parent.mkdir(parents=True, exist_ok=True)
    model = GatModel(model_cfg or GatConfig(seed=cfg.seed))
    log.info("model has %d trainable parameters", model.param_count())
    model, tlog = train(model, list(graphs.values()), cfg, checkpoint_path=checkpoint)
    save_checkpoint(checkpoint, model, {"best_epoch": tlog.best_epoch})
    if log_csv is not None:
        tlog.to_csv(log_csv)
    if tlog.aborted:
        raise StageError("train", f"numeric failure, kept last good checkpoint: {tlog.aborted}")
    return model, tlog


def stage_predict(graph_dir, checkpoint, out_dir, names=None, prep_dir=None,
                  overlay_dir=None) -> list[str]:
    graph_dir, out_dir = Path(graph_dir), Path(out_dir)
    if not Path(checkpoint).is_file():
        raise UserError("predict", f"checkpoint not found: {checkpoint}")
    model = load_checkpoint(checkpoint)
    graphs = _load_graphs(graph_dir, names)
    if not graphs:
        raise UserError("predict", f"no graphs in {graph_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, g in graphs.items():
        s = read_labeling(graph_dir / f"{name}.svx")
        node_pred = model_forward(model, g).argmax(axis=1)
        pred = project_to_voxels(s, node_pred)
        np.save(out_dir / f"{name}.nodes.npy", node_pred)
        write_vxg(out_dir / f"{name}.vxg",
                  MultiModalVolume(np.zeros((4,) + pred.shape), brain_mask=np.zeros(pred.shape, bool)),
                  pred)
        if prep_dir is not None:
            meta_p = Path(prep_dir) / f"{name}.json"
            meta = json.loads(meta_p.read_text()) if meta_p.exists() else {}
            if "affine" in meta:
                full = uncrop(pred, meta)
                write_nifti_labels(out_dir / f"{name}_pred.nii.gz", full,
                                   np.asarray(meta["affine"]))
            if overlay_dir is not None:
                v, _, _ = load_preprocessed(Path(prep_dir), name)
                from .overlay import save_overlay
                Path(overlay_dir).mkdir(parents=True, exist_ok=True)
                save_overlay(Path(overlay_dir) / f"{name}.png", v, pred)
    return sorted(graphs)


def uncrop(labels: LabelVolume, meta: dict) -> LabelVolume:
    """Place a cropped label grid back into the source volume geometry."""
    full = np.zeros(tuple(meta["source_shape"]), dtype=np.uint8)
    o = meta["origin"]
    box = tuple(slice(a, a + s) for a, s in zip(o, labels.shape))
    full[box] = labels.labels
    return LabelVolume(full, labels.spacing)


def stage_evaluate(pred_dir, prep_dir, out_dir, graph_dir=None, names=None) -> list[EvalReport]:
    pred_dir, prep_dir, out_dir = Path(pred_dir), Path(prep_dir), Path(out_dir)
    names = names or sorted(p.stem for p in pred_dir.glob("*.vxg"))
    if not names:
        raise UserError("evaluate", f"no predictions in {pred_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    for name in names:
        _, pred = read_vxg(pred_dir / f"{name}.vxg")
        v, gt, meta = load_preprocessed(prep_dir, name)
        if gt is None:
            raise UserError("evaluate", f"{name}: no ground-truth labels")
        node_pred = node_gt = None
        if graph_dir is not None:
            g = read_rag(Path(graph_dir) / f"{name}.rag")
            node_gt = g.labels
            npred = pred_dir / f"{name}.nodes.npy"
            node_pred = np.load(npred) if npred.exists() else None
        rep = evaluate(pred, gt, v.spacing, name, node_pred, node_gt)
        (out_dir / f"{name}.json").write_text(rep.to_json())
        reports.append(rep)
    write_reports_csv(out_dir / "reports.csv", reports)
    return reports


def stage_report(eval_dir, out_path=None) -> dict:
    eval_dir = Path(eval_dir)
    files = sorted(p for p in eval_dir.glob("*.json") if p.name != "summary.json")
    if not files:
        raise UserError("report", f"no evaluation reports in {eval_dir}")
    reports = [EvalReport.from_dict(json.loads(p.read_text())) for p in files]
    agg = aggregate(reports)
    out_path = Path(out_path) if out_path else eval_dir / "summary.json"
    out_path.write_text(json.dumps(agg, indent=2, sort_keys=True))
    rows = [(r.case, _expand(r.node_counts_gt), _expand(r.node_counts_pred)) for r in reports
            if r.node_counts_gt is not None]
    if rows:
        write_node_counts_csv(eval_dir / "node_counts.csv", rows)
    print(format_table(agg))
    return agg


def _expand(counts):
    """Turn per-class counts back into a label vector for ``write_node_counts_csv``."""
    if counts is None:
        return None
    return np.repeat(np.arange(len(counts)), counts)


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run the configured stages in order; returns the aggregate evaluation."""
    wd = Path(cfg.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    raw = Path(cfg.input) if cfg.input else wd / "raw"
    prep, graphs, model_dir = wd / "prep", wd / "graphs", wd / "model"
    pred, evald = wd / "pred", wd / "eval"
    ckpt = Path(cfg.checkpoint) if cfg.checkpoint else model_dir / "model.gatc"
    if cfg.phantom is not None:
        spec = PhantomSpec(**{"seed": cfg.seed, **cfg.phantom})
        phantom_generate(spec, raw)
    if "preprocess" in cfg.stages:
        stage_preprocess(raw, prep)
    if "build-graph" in cfg.stages:
        slic = SlicParams(**cfg.slic) if cfg.slic else None
        stage_build_graph(prep, graphs, slic=slic)
    all_names = sorted(p.stem for p in graphs.glob("*.rag"))
    train_names = cfg.train_cases or all_names
    test_names = cfg.test_cases or all_names
    if "train" in cfg.stages:
        tcfg = TrainConfig(**{"seed": cfg.seed, **cfg.train})
        mcfg = GatConfig(**{"seed": cfg.seed, **cfg.model})
        stage_train(graphs, ckpt, tcfg, mcfg, train_names, model_dir / "trainlog.csv")
    if "predict" in cfg.stages:
        stage_predict(graphs, ckpt, pred, test_names, prep,
                      wd / "overlays" if cfg.overlay else None)
    result = {}
    if "evaluate" in cfg.stages:
        stage_evaluate(pred, prep, evald, graphs, test_names)
    if "report" in cfg.stages:
        result = stage_report(evald)
    return result
