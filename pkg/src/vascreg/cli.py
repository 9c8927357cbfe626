"""Command line interface: ``python -m vascreg <command> [--config FILE] [--set k=v ...]``.

Commands
--------
gen-data     render the synthetic dataset (both variants plus manifest)
train        fit the refinement model and write a checkpoint and loss trace
eval         score held-out samples, rigid-only and refined, as CSV
register     coarse-to-fine registration of whole cases with SVG overlays
uncertainty  repeated sampling of one branch, drawn as a band plot

Exit codes: 0 success, 2 invalid configuration or inputs, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, pipeline, synth
from .config import RunConfig, build_id
from .ddpm import sample_uncertainty
from .errors import ConfigError, NonFiniteLoss, VascRegError
from .metrics import aggregate_reports, write_metrics_csv
from .plotting import overlay_svg, uncertainty_svg, write_svg

log = logging.getLogger("vascreg")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
ID_COLUMNS = ("case_id", "branch_id", "window", "frame", "method")


def _header(cfg: RunConfig, command: str) -> list[str]:
    return [f"vascreg {command}", f"build: {build_id()}", f"config: {cfg.to_json()}"]


def _out_dir(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg["paths"]["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg: RunConfig, args) -> Path:
    d = Path(args.data or cfg["paths"]["data"])
    if not (d / "manifest.json").is_file():
        raise ConfigError(f"no dataset at {d} (run gen-data first)")
    return d


def _checkpoint(cfg: RunConfig, args, out: Path) -> Path:
    return Path(args.checkpoint or cfg["paths"]["checkpoint"] or out / "model.ckpt")


def _load_checked(cfg: RunConfig, path: Path):
    model, header = pipeline.load_model(path)
    if model.cfg.frames != cfg.model_config().frames:
        raise ConfigError(f"checkpoint was trained with F={model.cfg.frames} but the config "
                          f"asks for F={cfg.model_config().frames}")
    return model, header


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = Path(args.data or cfg["paths"]["data"])
    manifest = synth.render_dataset(cfg.data_config(), None, cfg["seed"], out)
    manifest["build"] = build_id()
    manifest["run_config"] = json.loads(cfg.to_json())
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                  separators=(",", ":")) + "\n")
    log.info("wrote %d multi-frame and %d single-frame samples to %s (sha256 %s)",
             manifest["counts"]["multi_frame"], manifest["counts"]["single_frame"], out,
             manifest["content_sha256"][:12])
    return EXIT_OK


def _loss_csv(cfg: RunConfig, trace: list) -> str:
    buf = io.StringIO()
    for line in _header(cfg, "train"):
        buf.write(f"# {line}\n")
    cols = ["step", "total", "mse", "curv", "diff", "grad_norm"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in trace:
        w.writerow([row["step"]] + [format(float(row[c]), ".10g") for c in cols[1:]])
    return buf.getvalue()


def cmd_train(cfg: RunConfig, args) -> int:
    data, out = _data_dir(cfg, args), _out_dir(cfg, args)
    train_s, _ = pipeline.load_split(data, cfg.temporal)
    tc = cfg.train_config()
    steps_per_epoch = max(1, math.ceil(len(train_s) / tc.batch_size))
    epoch_losses: list[float] = []

    def on_step(step, terms):
        epoch_losses.append(terms["total"])
        if (step + 1) % steps_per_epoch == 0:
            log.info("epoch %d (step %d): mean loss %.6f", (step + 1) // steps_per_epoch,
                     step + 1, float(np.mean(epoch_losses)))
            epoch_losses.clear()

    log.info("training on %d samples (F=%d), %d steps", len(train_s),
             cfg.model_config().frames, tc.steps)
    try:
        model, trace = pipeline.fit(train_s, cfg.model_config(), tc, on_step)
    except NonFiniteLoss as exc:
        dump = {"error": str(exc), "step": getattr(exc, "step", None),
                "terms": getattr(exc, "terms", None), "build": build_id(),
                "run_config": json.loads(cfg.to_json())}
        pipeline.dump_json(out / "nonfinite_dump.json", dump)
        log.error("non-finite loss at step %s; diagnostics in %s", dump["step"],
                  out / "nonfinite_dump.json")
        raise
    ckpt = _checkpoint(cfg, args, out)
    manifest = synth.load_manifest(data)
    pipeline.save_model(ckpt, model, {"run_config": json.loads(cfg.to_json()),
                                      "build": build_id(),
                                      "dataset_sha256": manifest["content_sha256"]})
    (out / "loss_trace.csv").write_text(_loss_csv(cfg, trace))
    log.info("checkpoint written to %s", ckpt)
    return EXIT_OK


def _summaries(results) -> dict:
    return {"rigid": aggregate_reports([r.rigid for r in results]),
            "refined": aggregate_reports([r.refined for r in results])}


def cmd_eval(cfg: RunConfig, args) -> int:
    data, out = _data_dir(cfg, args), _out_dir(cfg, args)
    model, _ = _load_checked(cfg, _checkpoint(cfg, args, out))
    _, held = pipeline.load_split(data, cfg.temporal)
    if not held:
        raise ConfigError("dataset has no held-out samples")
    ev = cfg["eval"]
    results = pipeline.evaluate(model, held, cfg["seed"], ev["batch_size"], ev["workers"])
    summ = _summaries(results)
    path = out / "eval.csv"
    write_metrics_csv(path, pipeline.result_rows(results), ID_COLUMNS, _header(cfg, "eval"), summ)
    for name, s in summ.items():
        log.info("%-8s mse %.4f mm^2  mae %.4f mm  curv_err %.5f /mm  (n=%d)", name,
                 s.mean.mse, s.mean.mae, s.mean.curv_err, s.count)
    log.info("metrics written to %s", path)
    return EXIT_OK


def cmd_register(cfg: RunConfig, args) -> int:
    data, out = _data_dir(cfg, args), _out_dir(cfg, args)
    model, _ = _load_checked(cfg, _checkpoint(cfg, args, out))
    manifest = synth.load_manifest(data)
    cases = args.case or pipeline.split_cases(manifest)[1]
    dcfg = cfg.data_config()
    if manifest["config"]["points"] != dcfg.points or manifest["config"]["window"] != dcfg.window:
        raise ConfigError("dataset was rendered with a different points/window setting")
    reg_dir = out / "register"
    reg_dir.mkdir(exist_ok=True)
    meta = f"build={build_id()} config={cfg.to_json()}"
    all_results, svgs = [], 0
    for c in cases:
        reg = pipeline.register_case(synth.load_case(data, c), dcfg, model, cfg["seed"],
                                     cfg["eval"]["batch_size"])
        all_results.extend(reg.results)
        doc = pipeline.registration_json(reg)
        doc.update(build=build_id(), run_config=json.loads(cfg.to_json()))
        pipeline.dump_json(reg_dir / f"case_{c:03d}.json", doc)
        for f, curves in sorted(reg.frames.items()):
            if svgs >= cfg["eval"]["svg_limit"]:
                break
            ids = sorted(curves["gt"])
            svg = overlay_svg([curves["gt"][b] for b in ids], [curves["refined"][b] for b in ids],
                              [curves["rigid"][b] for b in ids],
                              title=f"case {c} frame {f}", metadata=meta)
            write_svg(reg_dir / f"case_{c:03d}_f{f:02d}.svg", svg)
            svgs += 1
    if not all_results:
        raise ConfigError("no branches were registered")
    write_metrics_csv(out / "register.csv", pipeline.result_rows(all_results), ID_COLUMNS,
                      _header(cfg, "register"), _summaries(all_results))
    log.info("registered %d cases into %s", len(cases), reg_dir)
    return EXIT_OK


def _pick_uncertainty_sample(held, args):
    if args.case is not None or args.branch is not None:
        chosen = [s for s in held
                  if (not args.case or s.case_id in args.case)
                  and (args.branch is None or s.branch_id == args.branch)
                  and (args.window is None or s.window == args.window)]
        if not chosen:
            raise ConfigError("no held-out sample matches the requested case/branch/window")
        return chosen[0]
    occluded = [s for s in held if s.frames[-1].occluded.any()]
    return (occluded or held)[0]


def cmd_uncertainty(cfg: RunConfig, args) -> int:
    data, out = _data_dir(cfg, args), _out_dir(cfg, args)
    model, _ = _load_checked(cfg, _checkpoint(cfg, args, out))
    _, held = pipeline.load_split(data, cfg.temporal)
    sample = _pick_uncertainty_sample(held, args)
    n = args.n_samples or cfg["eval"]["n_samples"]
    if n < 2:
        raise ConfigError("need at least two samplings")
    unc = sample_uncertainty(sample, model, pipeline.model_schedule(model), n, cfg["seed"])
    last = sample.frames[-1]
    stem = f"uncertainty_case{sample.case_id:03d}_b{sample.branch_id:02d}_w{sample.window:02d}"
    meta = f"build={build_id()} config={cfg.to_json()}"
    write_svg(out / f"{stem}.svg",
              uncertainty_svg(last.label2d.points, unc.mean[-1], unc.std[-1], unc.samples[:, -1],
                              title=f"case {sample.case_id} branch {sample.branch_id}, n={n}",
                              metadata=meta))
    buf = io.StringIO()
    for line in _header(cfg, "uncertainty"):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", "occluded", "mean_x", "mean_y", "std"])
    for i, (m, s, o) in enumerate(zip(unc.mean[-1], unc.std[-1], last.occluded)):
        w.writerow([i, int(o), format(m[0], ".10g"), format(m[1], ".10g"), format(s, ".10g")])
    (out / f"{stem}.csv").write_text(buf.getvalue())
    occ = last.occluded
    if occ.any() and (~occ).any():
        log.info("mean std occluded %.4f mm, clean %.4f mm", unc.std[-1][occ].mean(),
                 unc.std[-1][~occ].mean())
    log.info("band plot written to %s", out / f"{stem}.svg")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "register": cmd_register, "uncertainty": cmd_uncertainty}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vascreg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vascreg {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__name__.replace("cmd_", "").replace("_", "-"))
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. ablation.temporal_modeling=false")
        sp.add_argument("--data", help="dataset directory (overrides paths.data)")
        sp.add_argument("--out", help="output directory (overrides paths.out)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "register", "uncertainty", "train"):
            sp.add_argument("--checkpoint", help="model checkpoint (overrides paths.checkpoint)")
        if name in ("register", "uncertainty"):
            sp.add_argument("--case", type=int, action="append", help="case id (repeatable)")
        if name == "uncertainty":
            sp.add_argument("--branch", type=int)
            sp.add_argument("--window", type=int)
            sp.add_argument("--n-samples", type=int, dest="n_samples")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, args.set)
        return COMMANDS[args.command](cfg, args)
    except NonFiniteLoss as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (VascRegError, ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INVALID


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
