"""Batch driver: generate or load scenes, run the detector, write metrics, dumps and a manifest."""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import shutil
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__, selftest, taxonomy
from .geometry import Box3D
from .matching import LossWeights
from .metrics import ClassHierarchy, EvalFrame, evaluate
from .pipeline import PipelineConfig, PipelineWeights, run_scene
from .priors import SceneConfig, generate_scene, load_priors, nuscenes_prompt_table, save_priors

log = logging.getLogger("frustumfuse")

MODES = ("e2e", "proposals-only", "eval-only", "selftest")
SEED_ENV = "FOMO_SEED"


class RunError(Exception):
    """Configuration or I/O problem; reported as a one-line diagnostic."""


@dataclass
class RunConfig:
    mode: str
    seed: int
    out: Path
    scenes: int = 1
    jobs: int = 1
    scene: dict = field(default_factory=dict)
    pipeline: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    prior_cache: Path | None = None
    dump_dir: Path | None = None
    write_priors: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise RunError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.seed is None:
            raise RunError(f"no seed: pass --seed, set 'seed' in the config or export {SEED_ENV}")
        if self.scenes < 1 or self.jobs < 1:
            raise RunError("--scenes and --jobs must be at least 1")
        if self.prior_cache is not None and self.dump_dir is not None:
            raise RunError("give either input.prior_cache or input.dump_dir, not both")
        if self.mode == "eval-only" and self.dump_dir is None:
            raise RunError("eval-only mode needs input.dump_dir")
        if self.mode != "eval-only" and self.dump_dir is not None:
            raise RunError("input.dump_dir is only valid in eval-only mode")
        for path in (self.prior_cache, self.dump_dir):
            if path is not None and not path.is_dir():
                raise RunError(f"input directory does not exist: {path}")

    def payload(self) -> dict:
        """Everything that determines the outputs, in canonical form."""
        return {
            "mode": self.mode, "seed": self.seed, "scenes": self.scenes,
            "scene": self.scene, "pipeline": self.pipeline, "loss": self.loss, "eval": self.eval,
            "prior_cache": None if self.prior_cache is None else self.prior_cache.name,
            "dump_dir": None if self.dump_dir is None else self.dump_dir.name,
        }

    def digest(self) -> str:
        blob = json.dumps(self.payload(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


# ------------------------------------------------------------- config parsing

def _parse_override(item: str):
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise RunError(f"--set expects key=value, got {item!r}")
    return key.split("."), yaml.safe_load(raw)


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides or ():
        path, value = _parse_override(item)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise RunError(f"--set path {'.'.join(path)} crosses a non-mapping value")
        node[path[-1]] = value
    return data


def load_config(args) -> RunConfig:
    data = {}
    if args.config:
        try:
            data = yaml.safe_load(Path(args.config).read_text()) or {}
        except OSError as exc:
            raise RunError(f"cannot read config: {exc}") from exc
        except yaml.YAMLError as exc:
            raise RunError(f"config is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise RunError("config must be a mapping at the top level")
    data = apply_overrides(data, args.set)
    known = {"seed", "scenes", "jobs", "mode", "out", "scene", "pipeline", "loss", "eval", "input", "output"}
    unknown = set(data) - known
    if unknown:
        raise RunError(f"unknown config sections: {sorted(unknown)}")

    seed = args.seed if args.seed is not None else data.get("seed")
    if seed is None and os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise RunError(f"{SEED_ENV} must be an integer") from exc
    inp = data.get("input") or {}
    output = data.get("output") or {}
    out = args.out or data.get("out")
    if out is None:
        raise RunError("no output directory: pass --out")
    return RunConfig(
        mode=args.mode or data.get("mode", "e2e"),
        seed=None if seed is None else int(seed),
        out=Path(out),
        scenes=int(args.scenes if args.scenes is not None else data.get("scenes", 1)),
        jobs=int(args.jobs if args.jobs is not None else data.get("jobs", 1)),
        scene=data.get("scene") or {},
        pipeline=data.get("pipeline") or {},
        loss=data.get("loss") or {},
        eval=data.get("eval") or {},
        prior_cache=Path(inp["prior_cache"]) if inp.get("prior_cache") else None,
        dump_dir=Path(inp["dump_dir"]) if inp.get("dump_dir") else None,
        write_priors=bool(output.get("priors", False)),
    )


def build_hierarchy(eval_cfg: dict) -> tuple:
    h = ClassHierarchy()
    ranges = dict(h.ranges)
    ranges.update({k: float(v) for k, v in (eval_cfg.get("ranges") or {}).items()})
    frequency = dict(h.frequency)
    frequency.update(eval_cfg.get("frequency") or {})
    thresholds = tuple(float(t) for t in eval_cfg.get("thresholds", taxonomy.METRIC_THRESHOLDS))
    try:
        return ClassHierarchy(h.classes, h.parent, frequency, ranges), thresholds
    except ValueError as exc:
        raise RunError(f"bad eval config: {exc}") from exc


def scene_seed(seed: int, scene_id: int) -> int:
    return int(np.random.SeedSequence([seed, scene_id]).generate_state(1)[0])


# --------------------------------------------------------------- scene work

def _box_record(box: Box3D) -> list:
    return [float(v) for v in box.as_array()]


def process_scene(cfg: RunConfig, scene_id: int) -> dict:
    """Runs one scene; everything returned is plain data so it crosses process boundaries."""
    scene_cfg = SceneConfig.from_dict(cfg.scene)
    pipe_cfg = PipelineConfig.from_dict(cfg.pipeline)
    table = nuscenes_prompt_table()
    scene = generate_scene(scene_cfg, scene_seed(cfg.seed, scene_id), table)
    name = f"scene_{scene_id:04d}.fomp"
    if cfg.prior_cache is not None:
        path = cfg.prior_cache / name
        if not path.is_file():
            raise RunError(f"prior cache is missing {name}")
        cams = load_priors(path)
        if len(cams) != len(scene.cameras):
            raise RunError(f"{name} holds {len(cams)} cameras, rig has {len(scene.cameras)}")
        scene.priors = [p for p, _ in cams]
        scene.depth_maps = [d for _, d in cams]
    weights = PipelineWeights.build(pipe_cfg, scene_cfg.token_dim, len(table))
    res = run_scene(scene, pipe_cfg, weights, table, scene_id, refine_stage=cfg.mode == "e2e",
                    loss_weights=LossWeights(**cfg.loss))
    dets = [{"scene": scene_id, "box": _box_record(d.box), "class": pipe_cfg.classes[d.label],
             "score": d.score, "provenance": d.provenance} for d in res.refined]
    gts = [{"scene": scene_id, "box": _box_record(b), "class": c}
           for b, c in zip(scene.gt_boxes, scene.gt_classes)]
    priors = None
    if cfg.write_priors:
        priors = (name, list(zip(scene.priors, scene.depth_maps)))
    losses = dict(res.losses, scene=scene_id, discarded_priors=res.discarded_priors,
                  lidar_proposals=len(res.lidar_proposals),
                  camera_proposals=sum(len(c) for c in res.camera_proposals))
    return {"scene": scene_id, "detections": dets, "ground_truth": gts, "losses": losses, "priors": priors}


def _worker(args):
    cfg, scene_id = args
    return process_scene(cfg, scene_id)


def run_scenes(cfg: RunConfig) -> list:
    tasks = [(cfg, k) for k in range(cfg.scenes)]
    if cfg.jobs == 1:
        results = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_worker, tasks))
    return sorted(results, key=lambda r: r["scene"])


# ------------------------------------------------------------------ outputs

def _jsonl(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def read_jsonl(path: Path) -> list:
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise RunError(f"cannot read {path.name}: {exc}") from exc
    try:
        return [json.loads(line) for line in lines if line.strip()]
    except json.JSONDecodeError as exc:
        raise RunError(f"{path.name} is not valid JSON lines: {exc}") from exc


def frames_from_records(dets: list, gts: list, n_scenes: int | None = None) -> list:
    ids = sorted({r["scene"] for r in dets} | {r["scene"] for r in gts} | set(range(n_scenes or 0)))
    by_scene = {k: ([], [], [], [], []) for k in ids}
    for r in dets:
        f = by_scene[r["scene"]]
        f[0].append(Box3D.from_array(r["box"]))
        f[1].append(r["class"])
        f[2].append(float(r["score"]))
    for r in gts:
        f = by_scene[r["scene"]]
        f[3].append(Box3D.from_array(r["box"]))
        f[4].append(r["class"])
    return [EvalFrame(*by_scene[k]) for k in ids]


def manifest(cfg: RunConfig, files: list, extra: dict | None = None) -> str:
    data = {
        "config_sha256": cfg.digest(),
        "config": cfg.payload(),
        "seed": cfg.seed,
        "files": sorted(files),
        "versions": {
            "frustumfuse": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pyyaml": yaml.__version__,
        },
    }
    data.update(extra or {})
    return json.dumps(data, sort_keys=True, indent=2, default=str) + "\n"


def produce(cfg: RunConfig, stage: Path) -> list:
    """Writes every output file into ``stage`` and returns their names."""
    files = {}
    extra = {}
    if cfg.mode == "selftest":
        results = selftest.run_all(cfg.seed)
        report = {r.name: {"checks": r.checks, "failures": r.failures, "worst": r.worst} for r in results}
        passed = sum(r.passed for r in results)
        files["selftest.json"] = json.dumps({"suites": report, "passed": passed, "failed": len(results) - passed},
                                            sort_keys=True, indent=2) + "\n"
        extra["selftest_passed"] = passed == len(results)
    else:
        hierarchy, thresholds = build_hierarchy(cfg.eval)
        if cfg.mode == "eval-only":
            dets = read_jsonl(cfg.dump_dir / "detections.jsonl")
            gts = read_jsonl(cfg.dump_dir / "ground_truth.jsonl")
            frames = frames_from_records(dets, gts)
        else:
            results = run_scenes(cfg)
            dets = [d for r in results for d in r["detections"]]
            gts = [g for r in results for g in r["ground_truth"]]
            files["detections.jsonl"] = _jsonl(dets)
            files["ground_truth.jsonl"] = _jsonl(gts)
            files["losses.json"] = json.dumps({"scenes": [r["losses"] for r in results]},
                                              sort_keys=True, indent=2) + "\n"
            for r in results:
                if r["priors"] is not None:
                    name, cams = r["priors"]
                    (stage / "priors").mkdir(exist_ok=True)
                    save_priors(stage / "priors" / name, cams)
            frames = frames_from_records(dets, gts, cfg.scenes)
        files["metrics.json"] = evaluate(frames, hierarchy, thresholds).dumps()
    for name, text in files.items():
        (stage / name).write_text(text)
    names = sorted(files) + sorted(f"priors/{p.name}" for p in (stage / "priors").glob("*.fomp"))
    (stage / "manifest.json").write_text(manifest(cfg, names, extra))
    return names + ["manifest.json"]


def run(cfg: RunConfig) -> int:
    """Stages outputs in a scratch directory next to ``out`` and moves them in on success."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".partial-", dir=cfg.out))
    try:
        names = produce(cfg, stage)
        for name in names:
            dest = cfg.out / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(stage / name, dest)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    if cfg.mode == "selftest":
        report = json.loads((cfg.out / "selftest.json").read_text())
        print(f"selftest: {report['passed']} passed, {report['failed']} failed")
        return 0 if report["failed"] == 0 else 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frustumfuse", description=__doc__)
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--seed", type=int, help=f"base seed (falls back to the config, then ${SEED_ENV})")
    p.add_argument("--out", help="output directory")
    p.add_argument("--scenes", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return run(cfg)
    except (RunError, ValueError, TypeError, OSError) as exc:
        print(f"frustumfuse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
