"""``densernet`` command line: generate, mine, train, export, evaluate, compare, profile, pipeline.

Every command works inside one output directory (``--out``) guarded by a lock
file, and records what it wrote in ``produced_files.json``.
Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock, Timeout

from . import data as D
from .errors import DenserNetError, FormatError, NumericalError, ValidationError
from .evaluation import build_index, matching_metrics, mean_matching_report, recall_at_n
from .io import FeatureRecord, load_checkpoint, load_store, save_checkpoint, write_index, write_record
from .model import DenserNet
from .network import ABLATIONS, NetworkConfig
from .objective import TrainConfig, TrainingData, decode_images, train

log = logging.getLogger("densernet")

WORKERS_ENV = "DENSERNET_WORKERS"
PRODUCED = "produced_files.json"
LOCK = ".densernet.lock"
SCHEMA_VERSION = 1


class UsageError(DenserNetError):
    pass


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class MiningConfig:
    pos_radius_m: float = 10.0
    neg_radius_m: float = 25.0
    triplets_per_query: int = 4
    max_dynamic: float = 0.2
    hard_negatives: bool = False


@dataclass(frozen=True)
class EvalConfig:
    d_m: float = 25.0
    recall_ns: tuple[int, ...] = (1, 5, 10)
    eps_px: float = 3.0
    max_keypoints: int = 64
    nms_radius: int = 1
    benchmark_pairs_per_block: int = 2
    heatmaps: int = 4

    def __post_init__(self):
        object.__setattr__(self, "recall_ns", tuple(int(n) for n in self.recall_ns))


_PRESETS = {"tiny": NetworkConfig.tiny, "mobilenet-like": NetworkConfig.mobilenet_like,
            "vgg-like": NetworkConfig.vgg_like}


def _section(cls, d: dict, name: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"config section {name!r}: unknown fields {sorted(unknown)}")
    return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig.tiny)
    train: TrainConfig = TrainConfig()
    scene: D.SceneSpec = D.SceneSpec()
    mining: MiningConfig = MiningConfig()
    evaluation: EvalConfig = EvalConfig()
    out: str = "runs/default"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        """Sections may omit their own seed; the global ``seed`` fills it in."""
        d = dict(d)
        d.pop("schema_version", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
        seed = int(d.get("seed", 0))
        net = dict(d.get("network", {}))
        preset = net.pop("preset", "tiny")
        if preset not in _PRESETS:
            raise ValidationError(f"unknown network preset {preset!r}; choose from {sorted(_PRESETS)}")
        net.setdefault("seed", seed)
        scene = dict(d.get("scene", {}))
        scene.setdefault("texture_seed", seed)
        tr = dict(d.get("train", {}))
        tr.setdefault("seed", seed)
        return cls(
            network=_PRESETS[preset](**net),
            train=TrainConfig.from_dict(tr),
            scene=D.SceneSpec.from_dict(scene),
            mining=_section(MiningConfig, d.get("mining", {}), "mining"),
            evaluation=_section(EvalConfig, d.get("evaluation", {}), "evaluation"),
            out=str(d.get("out", cls.out)),
            seed=seed,
        )

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "network": self.network.to_dict(), "train": asdict(self.train),
                "scene": self.scene.to_dict(), "mining": asdict(self.mining),
                "evaluation": dict(asdict(self.evaluation), recall_ns=list(self.evaluation.recall_ns)),
                "out": self.out, "seed": self.seed}


def resolve_config(args) -> RunConfig:
    """Config file first, then flags (flags win)."""
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {args.config} is not valid JSON: {e}") from None
    if args.seed is not None:
        raw["seed"] = args.seed
        for section, key in (("network", "seed"), ("scene", "texture_seed"), ("train", "seed")):
            raw.setdefault(section, {})[key] = args.seed
    if args.ablation is not None:
        raw.setdefault("network", {})["ablation"] = args.ablation
    for flag, key in (("margin", "margin"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_triplets", "batch_triplets")):
        value = getattr(args, flag, None)
        if value is not None:
            raw.setdefault("train", {})[key] = value
    if args.out is not None:
        raw["out"] = args.out
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid configuration: {e}") from None


# --------------------------------------------------------------------------
# layout and bookkeeping

@dataclass
class Layout:
    root: Path

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def triplets(self) -> Path:
        return self.root / "triplets.jsonl"

    def train_dir(self, ablation: str) -> Path:
        return self.root / "train" / ablation

    def store(self, ablation: str) -> Path:
        return self.root / "features" / ablation

    def reports(self, ablation: str) -> Path:
        return self.root / "reports" / ablation


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def record_produced(root: Path, paths) -> None:
    """Merge sha256 digests of ``paths`` into the output directory's file manifest."""
    manifest = root / PRODUCED
    files = {}
    if manifest.exists():
        files = json.loads(manifest.read_text()).get("files", {})
    for p in paths:
        p = Path(p)
        if p.is_file():
            files[p.relative_to(root).as_posix()] = _sha256(p)
    body = {"schema_version": SCHEMA_VERSION, "files": dict(sorted(files.items()))}
    manifest.write_text(json.dumps(body, indent=1) + "\n")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _load_images(root: Path, entries) -> dict[str, np.ndarray]:
    return {e.id: D.load_image(root / e.image_path) for e in entries}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found at {path}")
    return path


# --------------------------------------------------------------------------
# commands

def cmd_generate(cfg: RunConfig, force: bool = False) -> list[Path]:
    lay = Layout(Path(cfg.out))
    if lay.data.exists():
        if not force:
            raise UsageError(f"{lay.data} already exists; pass --force to overwrite")
        shutil.rmtree(lay.data)
    city = D.generate_city(cfg.scene)
    bench = D.generate_pairs_benchmark(cfg.scene, cfg.evaluation.benchmark_pairs_per_block)
    written = D.write_city(city, lay.data, bench)
    written.append(_write_json(lay.data / "scene.json", {"schema_version": SCHEMA_VERSION, **cfg.scene.to_dict()}))
    print(f"generated {len(city.manifest)} images, {len(city.pairs)} pairs, "
          f"{len(bench[0])} benchmark pairs under {lay.data}")
    return written


def cmd_mine(cfg: RunConfig, features: str | None = None) -> list[Path]:
    lay = Layout(Path(cfg.out))
    manifest = D.load_manifest(_require(lay.data / "manifest.jsonl", "dataset manifest"))
    feats = None
    if features:
        store = load_store(features, [e.id for e in manifest if e.split == "train"])
        feats = {k: r.global_vector for k, r in store.items()}
    m = cfg.mining
    triplets = D.mine_triplets(manifest, feats, m.pos_radius_m, m.neg_radius_m, m.triplets_per_query,
                               m.max_dynamic, seed=cfg.seed, hard_negatives=m.hard_negatives)
    D.write_triplets(triplets, lay.triplets)
    print(f"mined {len(triplets)} triplets -> {lay.triplets}")
    return [lay.triplets]


def cmd_train(cfg: RunConfig) -> list[Path]:
    lay = Layout(Path(cfg.out))
    manifest = D.load_manifest(_require(lay.data / "manifest.jsonl", "dataset manifest"))
    triplets = D.load_triplets(_require(lay.triplets, "triplet file (run `densernet mine` first)"))
    pairs = D.load_pairs(_require(lay.data / "pairs.json", "pair file"))
    needed = {x for t in triplets for x in (t.query_id, t.positive_id, t.negative_id)}
    needed |= {e.id for e in manifest if e.split in ("val", "db")}
    images = _load_images(lay.data, [e for e in manifest if e.id in needed])
    tdata = TrainingData.build(images, triplets, pairs, manifest)

    final = lay.train_dir(cfg.network.ablation)
    # train into a staging directory so a failed run leaves the previous result intact
    out = final.with_name(final.name + ".partial")
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    model = DenserNet(cfg.network)
    if cfg.train.epochs == 0:
        save_checkpoint(model, out / "selected.ckpt", meta={"epoch": None, "selected": True})
        (out / "train_log.jsonl").write_text("")
        print("0 epochs: wrote the initial model as the selected checkpoint")
    else:
        _, tlog = train(model, tdata, cfg.train, checkpoint_dir=out,
                        on_epoch=lambda r: print(f"epoch {r.epoch:3d}  loss {r.mean_loss:.4f}  "
                                                 f"lr {r.learning_rate:.3g}  val recall@5 {r.val_recall_at_5}",
                                                 flush=True))
        (out / "train_log.jsonl").write_text(tlog.to_jsonl())
        _write_json(out / "run_config.json", cfg.to_dict())
        print(f"selected epoch {tlog.selected_epoch}")
    if final.exists():
        shutil.rmtree(final)
    out.rename(final)
    print(f"checkpoint {final / 'selected.ckpt'}")
    return sorted(final.iterdir())


def cmd_export(cfg: RunConfig, checkpoint: str | None = None, manifest_path: str | None = None) -> list[Path]:
    lay = Layout(Path(cfg.out))
    ckpt = Path(checkpoint) if checkpoint else lay.train_dir(cfg.network.ablation) / "selected.ckpt"
    model, _ = load_checkpoint(_require(ckpt, "checkpoint"))
    mpath = Path(manifest_path) if manifest_path else lay.data / "manifest.jsonl"
    manifest = D.load_manifest(_require(mpath, "manifest"))
    images = _load_images(mpath.parent, manifest)
    bench_file = mpath.parent / "benchmark_pairs.json"
    bench_ids: set[str] = set()
    if bench_file.exists():
        for p in D.load_pairs(bench_file):
            for image_id in (p.image1, p.image2):
                if image_id in images and image_id not in bench_ids:
                    raise UsageError(f"benchmark image id {image_id!r} collides with a manifest id")
                if image_id not in images:
                    images[image_id] = D.load_image(mpath.parent / "benchmark" / f"{image_id}.png")
                    bench_ids.add(image_id)

    store = lay.store(model.config.ablation)
    if store.exists():
        shutil.rmtree(store)
    (store / "records").mkdir(parents=True)
    ev = cfg.evaluation
    index, written = {}, []
    ids = list(images)
    for d in decode_images(model, images, ids, max_keypoints=ev.max_keypoints, nms_radius=ev.nms_radius):
        rel = f"records/{d.image_id}.rec"
        write_record(FeatureRecord.from_decoded(d, images[d.image_id].shape[:2]), store / rel)
        index[d.image_id] = rel
        written.append(store / rel)
    write_index(store, index)
    written.append(store / "index.json")
    print(f"exported {len(index)} records -> {store}")
    return written


def _plot_pr(report, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.2))
    if report.pr_curve:
        prec, rec = zip(*report.pr_curve)
        a.plot(rec, prec, marker=".")
    a.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.05), title="top-1 PR")
    ns = sorted(report.recall_at)
    b.bar([str(n) for n in ns], [report.recall_at[n] for n in ns])
    b.set(xlabel="N", ylabel="recall@N", ylim=(0, 1), title="recall@N")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def heatmap_overlay(image: np.ndarray, scores: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Detection field upsampled to the image size, colour-mapped and alpha-blended; uint8 RGB."""
    import cv2

    h, w = image.shape[:2]
    s = cv2.resize(scores.astype(np.float32), (w, h), interpolation=cv2.INTER_LINEAR)
    s = s / s.max() if s.max() > 0 else s
    heat = cv2.applyColorMap(np.round(s * 255).astype(np.uint8), cv2.COLORMAP_JET)
    heat = cv2.cvtColor(heat, cv2.COLOR_BGR2RGB).astype(np.float32) / 255
    return np.round(np.clip((1 - alpha) * image + alpha * heat, 0, 1) * 255).astype(np.uint8)


def cmd_evaluate(cfg: RunConfig, store_dir: str | None = None, mode: str = "both", plots: bool = False,
                 manifest_path: str | None = None) -> list[Path]:
    lay = Layout(Path(cfg.out))
    store = Path(store_dir) if store_dir else lay.store(cfg.network.ablation)
    mpath = Path(manifest_path) if manifest_path else lay.data / "manifest.jsonl"
    name = store.name
    out = lay.reports(name)
    out.mkdir(parents=True, exist_ok=True)
    ev = cfg.evaluation
    written = []
    manifest = D.load_manifest(_require(mpath, "manifest"))
    if mode in ("retrieval", "both"):
        db = [e for e in manifest if e.split == "db"]
        queries = [e for e in manifest if e.split == "query"]
        recs = load_store(store, [e.id for e in db + queries])
        index = build_index([(e.id, recs[e.id].global_vector.astype(np.float64), e.latlon) for e in db])
        report = recall_at_n(index, [(e.id, recs[e.id].global_vector.astype(np.float64), e.latlon) for e in queries],
                             ev.d_m, ev.recall_ns)
        written.append(_write_json(out / "retrieval.json", report.to_dict()))
        print("retrieval " + "  ".join(f"recall@{n} {v:.3f}" for n, v in sorted(report.recall_at.items()))
              + f"  mAP {report.map:.3f}")
        if plots:
            _plot_pr(report, out / "retrieval.png")
            written.append(out / "retrieval.png")
    if mode in ("matching", "both"):
        pairs = D.load_pairs(_require(mpath.parent / "benchmark_pairs.json", "benchmark pairs"))
        recs = load_store(store, sorted({i for p in pairs for i in (p.image1, p.image2)}))
        reports = [matching_metrics(p, recs[p.image1].keypoints, recs[p.image2].keypoints,
                                    recs[p.image1].image_shape, ev.eps_px) for p in pairs]
        summary = mean_matching_report(reports)
        summary["pairs_detail"] = [dict(r.to_dict(), image1=p.image1, image2=p.image2)
                                   for p, r in zip(pairs, reports)]
        written.append(_write_json(out / "matching.json", summary))
        print("matching " + "  ".join(f"{k} {summary[k]:.3f}" for k in ("repeatability", "mle_px", "map",
                                                                         "matching_score")
                                      if summary[k] is not None))
    if plots and ev.heatmaps > 0:
        hm = out / "heatmaps"
        hm.mkdir(exist_ok=True)
        chosen = [e for e in manifest if e.split == "query"][: ev.heatmaps]
        recs = load_store(store, [e.id for e in chosen])
        for e in chosen:
            p = hm / f"{e.id}.png"
            D.save_png(p, heatmap_overlay(D.load_image(mpath.parent / e.image_path), recs[e.id].scores))
            written.append(p)
    return written


def comparison_table(report_dirs: list[Path]) -> list[dict]:
    """One row per run, ordered by recall@1 (descending), then name."""
    rows = []
    for d in report_dirs:
        row = {"run": d.name}
        r = d / "retrieval.json"
        if r.exists():
            body = json.loads(r.read_text())
            row.update({f"recall@{k}": v for k, v in body["recall_at"].items()})
            row["map_retrieval"] = body["map"]
        m = d / "matching.json"
        if m.exists():
            body = json.loads(m.read_text())
            row.update({k: body[k] for k in ("repeatability", "mle_px", "map", "matching_score")})
        rows.append(row)
    rows.sort(key=lambda r: (-(r.get("recall@1") if r.get("recall@1") is not None else -1.0), r["run"]))
    return rows


def cmd_compare(cfg: RunConfig, runs: list[str] | None = None) -> list[Path]:
    lay = Layout(Path(cfg.out))
    base = lay.root / "reports"
    dirs = [base / r for r in runs] if runs else sorted(p for p in base.iterdir() if p.is_dir()) \
        if base.exists() else []
    missing = [str(d) for d in dirs if not d.is_dir()]
    if missing or not dirs:
        raise UsageError(f"no report directories to compare {missing or ''}")
    rows = comparison_table(dirs)
    cols = list(dict.fromkeys(k for r in rows for k in r))
    path = lay.root / "comparison.csv"
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print("  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return [path, _write_json(lay.root / "comparison.json", {"schema_version": SCHEMA_VERSION, "rows": rows})]


def cmd_profile(cfg: RunConfig, checkpoint: str | None = None, timed: bool = True) -> list[Path]:
    from .profiling import profile

    lay = Layout(Path(cfg.out))
    if checkpoint:
        model, _ = load_checkpoint(_require(Path(checkpoint), "checkpoint"))
    else:
        model = DenserNet(cfg.network).eval()
    size = cfg.scene.image_size
    rep = profile(model, (size, size), timed=timed)
    out = lay.reports(model.config.ablation)
    body = rep.to_dict()
    body["table"] = rep.table_rows()
    path = _write_json(out / "profile.json", body)
    for row in body["table"]:
        wall = "-" if row["wall_ms"] is None else f"{row['wall_ms']:.3f} ms"
        print(f"{row['part']:6s} {row['flops']:>14,d} FLOPs  {wall}")
    print(f"ratio_r {rep.ratio_r:.4f}")
    return [path]


def cmd_pipeline(cfg: RunConfig, ablations: list[str], force: bool, plots: bool) -> list[Path]:
    written = cmd_generate(cfg, force=force)
    written += cmd_mine(cfg)
    for a in ablations:
        c = replace(cfg, network=cfg.network.with_ablation(a))
        written += cmd_train(c)
        written += cmd_export(c)
        written += cmd_evaluate(c, plots=plots)
        written += cmd_profile(c, str(Layout(Path(c.out)).train_dir(a) / "selected.ckpt"))
    written += cmd_compare(cfg)
    return written


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--seed", type=int)
    common.add_argument("--ablation", choices=sorted(ABLATIONS))
    common.add_argument("--margin", type=float)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--batch-triplets", type=int, dest="batch_triplets")
    common.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="densernet", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="render the synthetic city")
    s = sub.add_parser("mine", parents=[common], help="mine training triplets")
    s.add_argument("--features", help="feature store used to rank positives (and hard negatives)")
    sub.add_parser("train", parents=[common], help="train and select the best recall@5 epoch")
    s = sub.add_parser("export", parents=[common], help="decode images into a feature store")
    s.add_argument("--checkpoint")
    s.add_argument("--manifest")
    s = sub.add_parser("evaluate", parents=[common], help="matching and/or retrieval reports")
    s.add_argument("--store")
    s.add_argument("--manifest")
    s.add_argument("--mode", choices=("matching", "retrieval", "both"), default="both")
    s.add_argument("--plots", action="store_true", help="also write PNG plots and heatmaps")
    s = sub.add_parser("compare", parents=[common], help="table of runs ordered by recall@1")
    s.add_argument("runs", nargs="*", help="report directory names under <out>/reports")
    s = sub.add_parser("profile", parents=[common], help="FLOPs and wall time per part")
    s.add_argument("--checkpoint")
    s.add_argument("--no-timing", action="store_true")
    s = sub.add_parser("pipeline", parents=[common], help="generate, mine, then train/export/evaluate/profile")
    s.add_argument("--ablations", default="full,hb", help="comma-separated ablation modes")
    s.add_argument("--plots", action="store_true")
    return p


def _dispatch(args, cfg: RunConfig) -> list[Path]:
    c = args.command
    if c == "generate":
        return cmd_generate(cfg, args.force)
    if c == "mine":
        return cmd_mine(cfg, args.features)
    if c == "train":
        return cmd_train(cfg)
    if c == "export":
        return cmd_export(cfg, args.checkpoint, args.manifest)
    if c == "evaluate":
        return cmd_evaluate(cfg, args.store, args.mode, args.plots, args.manifest)
    if c == "compare":
        return cmd_compare(cfg, args.runs)
    if c == "profile":
        return cmd_profile(cfg, args.checkpoint, not args.no_timing)
    ablations = [a.strip() for a in args.ablations.split(",") if a.strip()]
    bad = [a for a in ablations if a not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown ablation modes {bad}")
    return cmd_pipeline(cfg, ablations, args.force, args.plots)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    workers = os.environ.get(WORKERS_ENV)
    if workers:
        torch.set_num_threads(max(1, int(workers)))
    try:
        cfg = resolve_config(args)
        root = Path(cfg.out)
        try:
            root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise UsageError(f"cannot create output directory {root}: {e}") from None
        if not os.access(root, os.W_OK):
            raise UsageError(f"output directory {root} is not writable")
        try:
            with FileLock(str(root / LOCK), timeout=0):
                written = _dispatch(args, cfg)
                record_produced(root, written)
        except Timeout:
            raise UsageError(f"another densernet command holds the lock on {root}") from None
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (DenserNetError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
