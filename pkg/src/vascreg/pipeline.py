"""End-to-end steps shared by the command line and the demos.

Training, held-out evaluation against the rigid baseline, and full-case
coarse-to-fine registration.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn, synth
from .ddpm import NoiseSchedule, TrainConfig, build_schedule, sample_many, train
from .errors import ConfigError, ShapeMismatch
from .metrics import MetricReport, compute_metrics
from .model import ModelConfig, TempDiffRegNet

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Data selection
# --------------------------------------------------------------------------

def split_cases(manifest: dict) -> tuple[list[int], list[int]]:
    split = manifest["split"]
    return list(split["train"]), list(split["test"])


def load_split(data_dir, temporal: bool = True):
    """(train samples, held-out evaluation samples) for the chosen variant.

    Held-out evaluation always targets the last frame of each multi-frame
    window, so the single-frame variant is scored on exactly the same frames.
    """
    manifest = synth.load_manifest(data_dir)
    train_ids, test_ids = split_cases(manifest)
    variant = "multi" if temporal else "single"
    train_s = synth.load_samples(data_dir, variant, train_ids)
    test_s = synth.load_samples(data_dir, variant, test_ids)
    if not temporal:
        window = manifest["config"]["window"]
        stride = manifest["config"]["stride"]
        test_s = [s for s in test_s
                  if s.frames[0].frame_index - s.window * stride == window - 1]
    return train_s, test_s


# --------------------------------------------------------------------------
# Models on disk
# --------------------------------------------------------------------------

def save_model(path, model: TempDiffRegNet, extra: Optional[dict] = None) -> None:
    nn.save_checkpoint(path, model, {"model_config": model.cfg.to_dict(), **(extra or {})})


def load_model(path) -> tuple[TempDiffRegNet, dict]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    header, params = nn.read_checkpoint(p)
    cfg = ModelConfig(**header["extra"]["model_config"])
    model = TempDiffRegNet(cfg)
    nn.load_into(model, params)
    return model, header


def model_schedule(model: TempDiffRegNet) -> NoiseSchedule:
    c = model.cfg
    return build_schedule(c.T, c.beta_start, c.beta_end)


def fit(samples: Sequence, model_cfg: ModelConfig, train_cfg: TrainConfig,
        callback=None) -> tuple[TempDiffRegNet, list]:
    if not samples:
        raise ConfigError("no training samples")
    if samples[0].F != model_cfg.frames or samples[0].P != model_cfg.points:
        raise ShapeMismatch(f"samples are (F={samples[0].F}, P={samples[0].P}) but the model "
                            f"expects (F={model_cfg.frames}, P={model_cfg.points})")
    model = TempDiffRegNet(model_cfg)
    trace = train(model, samples, model_schedule(model), train_cfg, callback)
    return model, trace


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

@dataclass
class SampleResult:
    case_id: int
    branch_id: int
    window: int
    frame_index: int
    rigid: MetricReport
    refined: MetricReport
    refined_mm: np.ndarray   # (P, 2) last frame
    rigid_mm: np.ndarray
    gt_mm: np.ndarray


def evaluate(model: TempDiffRegNet, samples: Sequence, seed: int = 0,
             batch_size: int = 64, workers: int = 1) -> list[SampleResult]:
    """Refine every sample and score its last frame against the rigid projection."""
    schedule = model_schedule(model)
    chunks = [list(samples[i:i + batch_size]) for i in range(0, len(samples), batch_size)]

    def run(chunk):
        return sample_many(chunk, model, schedule, seed=seed, batch_size=batch_size)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            regs = [r for part in pool.map(run, chunks) for r in part]
    else:
        regs = [r for c in chunks for r in run(c)]
    out = []
    for s, r in zip(samples, regs):
        last = s.frames[-1]
        gt = last.label2d.points
        out.append(SampleResult(s.case_id, s.branch_id, s.window, last.frame_index,
                                compute_metrics(last.proj3d.points, gt),
                                compute_metrics(r.shape_mm[-1], gt),
                                r.shape_mm[-1], last.proj3d.points, gt))
    return out


def result_rows(results: Sequence[SampleResult]) -> list[dict]:
    rows = []
    for r in results:
        ids = {"case_id": r.case_id, "branch_id": r.branch_id, "window": r.window,
               "frame": r.frame_index}
        rows.append({**ids, "method": "rigid", **r.rigid.as_dict()})
        rows.append({**ids, "method": "refined", **r.refined.as_dict()})
    return rows


# --------------------------------------------------------------------------
# Full-case registration
# --------------------------------------------------------------------------

@dataclass
class CaseRegistration:
    case_id: int
    samples: list
    results: list            # SampleResult per (branch, window, frame)
    frames: dict             # frame index -> {"gt": {...}, "rigid": {...}, "refined": {...}}


def register_case(case: synth.CaseData, data_cfg: synth.DataConfig, model: TempDiffRegNet,
                  seed: int = 0, batch_size: int = 64) -> CaseRegistration:
    """SA-PnP per frame, branch-wise refinement, then per-frame recombination."""
    poses = synth.frame_poses(case, data_cfg)
    samples = synth.assemble_samples(case, data_cfg, poses)
    if model.cfg.frames == 1:
        samples = [s.single_frames()[-1] for s in samples]
    if samples and samples[0].P != model.cfg.points:
        raise ShapeMismatch(f"dataset uses P={samples[0].P}, model expects {model.cfg.points}")
    regs = sample_many(samples, model, model_schedule(model), seed=seed, batch_size=batch_size)
    frames: dict = {}
    results = []
    for s, reg in zip(samples, regs):
        # windows may overlap when stride < window; the later window wins
        for k, fr in enumerate(s.frames):
            gt, rigid, refined = fr.label2d.points, fr.proj3d.points, reg.shape_mm[k]
            slot = frames.setdefault(fr.frame_index, {"gt": {}, "rigid": {}, "refined": {}})
            slot["gt"][s.branch_id] = gt
            slot["rigid"][s.branch_id] = rigid
            slot["refined"][s.branch_id] = refined
            results.append(SampleResult(s.case_id, s.branch_id, s.window, fr.frame_index,
                                        compute_metrics(rigid, gt), compute_metrics(refined, gt),
                                        refined, rigid, gt))
    return CaseRegistration(case.case_id, samples, results, frames)


def registration_json(reg: CaseRegistration) -> dict:
    def curves(d):
        return {str(k): np.round(v, 9).tolist() for k, v in sorted(d.items())}
    return {"case_id": reg.case_id,
            "frames": [{"frame_index": f, "gt": curves(v["gt"]), "rigid": curves(v["rigid"]),
                        "refined": curves(v["refined"])}
                       for f, v in sorted(reg.frames.items())]}


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
