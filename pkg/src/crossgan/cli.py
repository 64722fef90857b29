"""``crossgan`` command line: synthesize, train, detect, evaluate, visualize.

All stages share one JSON run configuration (``--config``); explicit flags
override it. Outputs go to ``--out``; a command refuses to write into a
nonempty directory unless ``--force`` is given, in which case only the
entries that command owns are replaced. A lock file in the output directory
keeps two invocations from writing there at once.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from filelock import FileLock, Timeout
from PIL import Image

from .dataset import (DatasetSplit, SyntheticSpec, dataset_fingerprint, generate_synthetic_corpus,
                      load_test_video, load_ucsd_layout, write_ucsd_layout)
from .detector import DEFAULT_LAMBDA, fuse_video, read_amp, video_differences, write_amp
from .errors import ConfigurationError, CrossGanError, TrainingDivergenceError
from .evaluation import (align_maps, eer_threshold, evaluate, frame_level_roc, frame_scores,
                         write_reports)
from .gan import Direction
from .optflow import FlowCache, FlowConfig
from .perception import cache_root, make_extractor
from .report import overlay, plot_roc, write_heatmap, write_scale
from .trainer import Checkpoint, TrainConfig, latest_checkpoint, train_network

logger = logging.getLogger("crossgan")

LOCK_NAME = ".crossgan.lock"


@dataclass
class RunConfig:
    data: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: Dict[str, TrainConfig] = field(default_factory=dict)
    extractor: str = "vgg16"
    lam: float = DEFAULT_LAMBDA
    out: Optional[str] = None
    seed: int = 0
    deterministic: bool = True
    dropout: bool = True

    def __post_init__(self):
        for d in Direction:
            self.train.setdefault(d.value, TrainConfig(direction=d))

    def validate(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be >= 0")
        if self.data is not None and not Path(self.data).exists():
            raise ConfigurationError(f"dataset root does not exist: {self.data}")
        for cfg in self.train.values():
            cfg.validate()
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {"data", "synthetic", "flow", "train", "train_F2O", "train_O2F", "extractor",
                 "lambda", "out", "seed", "deterministic", "dropout"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown run config keys: {sorted(unknown)}")
        try:
            flow = FlowConfig(**d.get("flow", {}))
        except TypeError as exc:
            raise ConfigurationError(f"invalid flow settings: {exc}") from exc
        seed = int(d.get("seed", 0))
        deterministic = bool(d.get("deterministic", True))
        train = {}
        for direction in Direction:
            merged = {"seed": seed, "deterministic": deterministic, **d.get("train", {}),
                      **d.get(f"train_{direction.value}", {}), "direction": direction.value}
            train[direction.value] = TrainConfig.from_dict(merged)
        syn = d.get("synthetic")
        return cls(data=d.get("data"),
                   synthetic=SyntheticSpec.from_dict(syn) if syn is not None else None,
                   flow=flow, train=train, extractor=d.get("extractor", "vgg16"),
                   lam=float(d.get("lambda", DEFAULT_LAMBDA)), out=d.get("out"), seed=seed,
                   deterministic=deterministic, dropout=bool(d.get("dropout", True)))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(_read_json(path, "config"))


def _read_json(path, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"{what} file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{p}: expected a JSON object")
    return data


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = {k: replace(v, seed=args.seed) for k, v in cfg.train.items()}
        if cfg.synthetic is not None:
            cfg.synthetic = replace(cfg.synthetic, seed=args.seed)
    if args.deterministic is not None:
        cfg.deterministic = args.deterministic
        cfg.train = {k: replace(v, deterministic=args.deterministic) for k, v in cfg.train.items()}
    if args.lam is not None:
        cfg.lam = args.lam
    if args.out is not None:
        cfg.out = args.out
    if getattr(args, "data", None):
        cfg.data = args.data
    if getattr(args, "extractor", None):
        cfg.extractor = args.extractor
    return cfg.validate()


# --------------------------------------------------------------------------
# output directory handling

def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigurationError("no output directory given (use --out or 'out' in the config)")
    return Path(cfg.out)


def _existing_entries(out: Path) -> List[Path]:
    if not out.exists():
        return []
    if not out.is_dir():
        raise ConfigurationError(f"output path is not a directory: {out}")
    return sorted(p for p in out.iterdir() if p.name != LOCK_NAME)


def _prepare_out(out: Path, force: bool, owned: Sequence[str]):
    """Refuse a nonempty ``out`` unless forced; when forced, drop only ``owned`` entries."""
    entries = _existing_entries(out)
    if entries and not force:
        raise ConfigurationError(f"output directory {out} is not empty; pass --force to overwrite")
    for name in owned:
        p = out / name
        if p.is_dir():
            shutil.rmtree(p)
        elif p.exists():
            p.unlink()
    out.mkdir(parents=True, exist_ok=True)


@contextmanager
def _lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise ConfigurationError(f"{out} is in use by another crossgan process") from exc
    try:
        yield
    finally:
        lock.release()


def _load_split(cfg: RunConfig) -> DatasetSplit:
    if cfg.data is not None:
        return load_ucsd_layout(cfg.data)
    if cfg.synthetic is not None:
        return generate_synthetic_corpus(cfg.synthetic)
    raise ConfigurationError("no dataset: pass --data or put 'data'/'synthetic' in the config")


def _flow_cache(cfg: RunConfig, split: DatasetSplit) -> FlowCache:
    return FlowCache(cache_root() / "flows" / dataset_fingerprint(split), cfg.flow)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# commands

def cmd_synthesize(args) -> int:
    cfg = _resolve_config(args)
    if args.spec:
        raw = _read_json(args.spec, "spec")
        spec = SyntheticSpec.from_dict(raw.get("synthetic_spec", raw))
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
    elif cfg.synthetic is not None:
        spec = cfg.synthetic
    else:
        raise ConfigurationError("no synthetic spec given (use --spec)")
    spec.validate()
    out = _require_out(cfg)
    _prepare_out(out, args.force, ("Train", "Test", "spec.json"))
    with _lock(out):
        split = generate_synthetic_corpus(spec)
        write_ucsd_layout(split, out, spec)
    print(f"wrote {len(split.train)} train and {len(split.test)} test videos to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    direction = Direction.parse(args.direction)
    tcfg = cfg.train[direction.value]
    overrides = {k: getattr(args, k) for k in ("epochs", "resolution", "ngf", "ndf", "lr", "optimizer")
                 if getattr(args, k) is not None}
    tcfg = replace(tcfg, **overrides).validate()
    out = _require_out(cfg)
    owned = [p.name for p in _existing_entries(out)
             if p.name.startswith(f"{direction.value}_") or p.name == f"metrics_{direction.value}.csv"]
    resume = None
    if args.resume:
        path = latest_checkpoint(out, direction) if out.is_dir() else None
        if path is None:
            raise ConfigurationError(f"--resume: no {direction.value} checkpoint in {out}")
        resume = Checkpoint.load(path)
        print(f"resuming from {path} (epoch {resume.epoch})")
    elif owned:
        if not args.force:
            raise ConfigurationError(
                f"{out} already holds {direction.value} checkpoints; pass --resume or --force")
        for name in owned:
            (out / name).unlink()

    split = _load_split(cfg)
    with _lock(out):
        try:
            ck = train_network(split, tcfg, out_dir=out, cache=_flow_cache(cfg, split), resume=resume)
        except TrainingDivergenceError as exc:
            last = latest_checkpoint(out, direction)
            raise ConfigurationError(
                f"training diverged: {exc}; state dumped to {exc.checkpoint_path}; "
                f"last good checkpoint: {last}") from exc
    path = latest_checkpoint(out, direction)
    print(f"{direction.arrow} checkpoint: {path} (epoch {ck.epoch})")
    return 0


def _load_pair(fo_path, of_path):
    ck_fo, ck_of = Checkpoint.load(fo_path), Checkpoint.load(of_path)
    for ck, path, want in ((ck_fo, fo_path, Direction.F2O), (ck_of, of_path, Direction.O2F)):
        if ck.config.direction is not want:
            raise ConfigurationError(
                f"{path} holds a {ck.config.direction.arrow} generator, expected {want.arrow}")
    if ck_fo.flow_range != ck_of.flow_range:
        raise ConfigurationError("the two checkpoints were fit with different flow ranges")
    return ck_fo, ck_of


def cmd_detect(args) -> int:
    cfg = _resolve_config(args)
    ck_fo, ck_of = _load_pair(args.fo, args.of)
    if args.no_dropout:
        cfg.dropout = False
    out = _require_out(cfg)
    _prepare_out(out, args.force, ("maps", "heatmaps", "manifest.json"))
    split = _load_split(cfg)
    videos = split.test
    if args.videos:
        wanted = [v.strip() for v in args.videos.split(",") if v.strip()]
        by_id = {v.video_id: v for v in videos}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise ConfigurationError(f"unknown test videos: {missing}")
        videos = [by_id[w] for w in wanted]
    extractor = make_extractor(cfg.extractor)
    cache = _flow_cache(cfg, split)
    gen_fo, gen_of = ck_fo.build_generator(), ck_of.build_generator()
    vmax = 1.0 + cfg.lam
    manifest = {
        "lambda": cfg.lam, "seed": cfg.seed, "dropout": cfg.dropout,
        "extractor": extractor.identifier,
        "checkpoints": {"F2O": {"name": Path(args.fo).name, "sha256": _sha256(args.fo)},
                        "O2F": {"name": Path(args.of).name, "sha256": _sha256(args.of)}},
        "heatmap_scale": "heatmaps/scale.json",
        "videos": {},
    }
    with _lock(out):
        (out / "heatmaps").mkdir(exist_ok=True)
        write_scale(out / "heatmaps" / "scale.json", vmax, lam=cfg.lam)
        for video in videos:
            diffs = video_differences(video, gen_fo, gen_of, extractor, ck_fo.flow_range, cache,
                                      dropout=cfg.dropout, seed=cfg.seed)
            maps = fuse_video(diffs, cfg.lam)
            mdir, hdir = out / "maps" / video.video_id, out / "heatmaps" / video.video_id
            mdir.mkdir(parents=True, exist_ok=True)
            hdir.mkdir(parents=True, exist_ok=True)
            for a in maps:
                write_amp(mdir / f"{a.frame_index:04d}.amp", a.values)
                write_heatmap(hdir / f"{a.frame_index:04d}.png", a.values, vmax)
            manifest["videos"][video.video_id] = {
                "m_O": maps[0].m_O, "m_S": maps[0].m_S, "n_maps": len(maps),
                "n_frames": len(video), "resolution": list(video.source_resolution)}
            print(f"{video.video_id}: {len(maps)} maps  m_O={maps[0].m_O:.6g}  m_S={maps[0].m_S:.6g}")
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return 0


def _maps_root(path: Path) -> Path:
    return path / "maps" if (path / "maps").is_dir() else path


def _read_video_maps(vdir: Path) -> List[np.ndarray]:
    return [read_amp(p) for p in sorted(vdir.glob("*.amp"))]


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    root = _maps_root(Path(args.maps))
    if not root.is_dir():
        raise ConfigurationError(f"maps directory does not exist: {root}")
    if cfg.data is None:
        raise ConfigurationError("evaluate needs the dataset root with ground truth (--data)")
    test_dir = Path(cfg.data) / "Test"
    vids = sorted(d.name for d in root.iterdir() if d.is_dir() and any(d.glob("*.amp")))
    if not vids:
        raise ConfigurationError(f"no .amp maps under {root}")
    maps, gt = {}, {}
    for vid in vids:
        video = load_test_video(test_dir / vid)
        if video.ground_truth is None:
            raise ConfigurationError(f"{vid}: no ground truth (labels file or masks) under {test_dir}")
        maps[vid] = _read_video_maps(root / vid)
        gt[vid] = video.ground_truth
    protocols = ["frame_level", "pixel_level"] if args.protocol == "both" else [f"{args.protocol}_level"]
    dataset = Path(cfg.data).resolve().name
    reports = [evaluate(maps, gt, p, dataset, sub_coverage=args.sub_coverage) for p in protocols]
    out = Path(cfg.out) if cfg.out else Path(args.maps) / "evaluation"
    _prepare_out(out, args.force, ["metrics.csv", "summary.json", "roc.png"]
                 + [f"roc_{p}.csv" for p in protocols])
    with _lock(out):
        write_reports(reports, out)
        plot_roc(reports, out / "roc.png")
    for rep in reports:
        print(f"{rep.protocol}  AUC {rep.auc:.4f}  EER {rep.eer:.4f}")
    print(f"reports written to {out}")
    return 0


def _frames_base(frames: Path) -> Path:
    return frames / "Test" if (frames / "Test").is_dir() else frames


def cmd_visualize(args) -> int:
    cfg = _resolve_config(args)
    maps_arg, frames_arg = Path(args.maps), Path(args.frames)
    for p in (maps_arg, frames_arg):
        if not p.is_dir():
            raise ConfigurationError(f"directory does not exist: {p}")
    if any(maps_arg.glob("*.amp")):
        pairs = [(maps_arg, frames_arg)]
    else:
        root, base = _maps_root(maps_arg), _frames_base(frames_arg)
        pairs = [(d, base / d.name) for d in sorted(root.iterdir())
                 if d.is_dir() and any(d.glob("*.amp"))]
        if not pairs:
            raise ConfigurationError(f"no .amp maps under {root}")
    out = _require_out(cfg)
    _prepare_out(out, args.force, [f.name for _, f in pairs] + ["thresholds.json"])
    chosen = {}
    with _lock(out):
        for mdir, fdir in pairs:
            maps = _read_video_maps(mdir)
            video = load_test_video(fdir)
            n = len(video)
            if len(maps) not in (n - 1, n):
                raise ConfigurationError(
                    f"{fdir.name}: {len(maps)} maps do not correspond to {n} frames")
            maps = align_maps(maps, n)
            if args.threshold is not None:
                thr, source = float(args.threshold), "flag"
            else:
                thr, source = None, "half_max"
                gt = video.ground_truth
                if gt is not None and 0 < int(gt.frame_labels.sum()) < n:
                    thr = eer_threshold(frame_level_roc(frame_scores(maps), gt.frame_labels))
                    source = "eer"
                if thr is None or not np.isfinite(thr):
                    thr, source = 0.5 * max(float(m.max()) for m in maps), "half_max"
            vout = out / fdir.name
            vout.mkdir(parents=True, exist_ok=True)
            for t, (frame, a) in enumerate(zip(video.frames, maps)):
                if a.shape != frame.shape:
                    raise ConfigurationError(f"{fdir.name}: map {t} shape {a.shape} != frame {frame.shape}")
                Image.fromarray(overlay(frame.pixels, a, thr)).save(vout / f"{t:04d}.png", format="PNG")
            chosen[fdir.name] = {"threshold": thr, "source": source, "frames": n}
            print(f"{fdir.name}: {n} overlays, threshold {thr:.6g} ({source})")
        (out / "thresholds.json").write_text(json.dumps(chosen, indent=2, sort_keys=True) + "\n")
    return 0


# --------------------------------------------------------------------------

def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", help="JSON run configuration")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="force deterministic kernels (default: on)")
    g.add_argument("--out", default=None, help="output directory")
    g.add_argument("--force", action="store_true", help="overwrite outputs in a nonempty directory")
    g.add_argument("--lambda", dest="lam", type=float, default=None,
                   help=f"weight of the flow channel in the fused map (default {DEFAULT_LAMBDA})")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="crossgan", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", parents=[common], help="write a synthetic corpus")
    p.add_argument("--spec", help="JSON synthetic spec")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("train", parents=[common], help="train one generator direction")
    p.add_argument("--data", help="dataset root (UCSD layout)")
    p.add_argument("--direction", required=True, help="F2O or O2F")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--ngf", type=int)
    p.add_argument("--ndf", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", parents=[common], help="abnormality maps for test videos")
    p.add_argument("--data", help="dataset root (UCSD layout)")
    p.add_argument("--fo", required=True, help="frame-to-flow checkpoint")
    p.add_argument("--of", required=True, help="flow-to-frame checkpoint")
    p.add_argument("--videos", help="comma-separated test video ids (default: all)")
    p.add_argument("--extractor", help="vgg16, alexnet or test-double")
    p.add_argument("--no-dropout", action="store_true", help="disable dropout noise at test time")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common], help="frame/pixel ROC, AUC and EER")
    p.add_argument("--maps", required=True, help="detect output (or its maps/ directory)")
    p.add_argument("--data", help="dataset root with Test ground truth")
    p.add_argument("--protocol", choices=["frame", "pixel", "both"], default="both")
    p.add_argument("--sub-coverage", choices=["false_positive", "miss"], default="false_positive",
                   help="pixel protocol: how abnormal frames detected below 40%% coverage count")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", parents=[common], help="red overlays of detections")
    p.add_argument("--maps", required=True, help="maps of one video, or a maps tree")
    p.add_argument("--frames", required=True, help="frames of one video, or a dataset root")
    p.add_argument("--threshold", type=float, help="display threshold on A")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CrossGanError, ValueError, OSError) as exc:
        print(f"crossgan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
