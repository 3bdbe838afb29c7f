"""Command-line pipeline: synth, gen-gt, train-ppa, train-afc, extract, match, eval, viz.

Every command is a pure function of its inputs, flags and seed. Usage errors
and missing inputs exit with status 2; failures during computation exit 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import afc, synth
from . import attention_gt as agt
from .config import ConfigError, RunConfig, load_config
from .formats import FormatError, read_checkpoint, read_tensor, write_checkpoint, write_pgm, write_tensor
from .matcher import GalleryEntry, evaluate
from .pose_model import NUM_KEYPOINTS, NUM_PARTS, read_poses
from .ppa_net import PpaLossWeights, PpaNet, PpaTrainConfig, evaluate_stages, train_ppa

log = logging.getLogger("aacn")

FEATURE_KINDS = ("composed", "aligned", "global")


class UsageError(Exception):
    """Bad flags or missing inputs (exit status 2)."""


# -- helpers -----------------------------------------------------------------------

def parse_grid(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


def _require_file(path: str, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_manifest(path: str) -> dict:
    _require_file(path, "manifest")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    manifest["_root"] = os.path.dirname(os.path.abspath(path))
    return manifest


def _resolve(manifest: dict, rel: str) -> str:
    return _require_file(os.path.join(manifest["_root"], rel), "input file")


def _poses(manifest: dict) -> dict:
    files = {rec["pose_file"] for rec in manifest["samples"]}
    poses = {}
    for rel in sorted(files):
        poses.update(read_poses(_resolve(manifest, rel)))
    return poses


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _grid_cfg(cfg: RunConfig, grid) -> agt.GtConfig:
    h, w = grid
    try:
        return agt.GtConfig(w, h, cfg.image_w, cfg.image_h, cfg.sigma_band, cfg.sigma_gauss)
    except ValueError as exc:
        raise UsageError(f"--grid {h}x{w}: {exc}") from exc


def _upsample(maps: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour upsampling of ``(P, h0, w0)`` maps by an integer factor."""
    _, h0, w0 = maps.shape
    if h % h0 or w % w0:
        raise UsageError(f"cannot upsample attention from {h0}x{w0} to {h}x{w}")
    return np.repeat(np.repeat(maps, h // h0, axis=1), w // w0, axis=2)


# -- PPA checkpoint I/O ----------------------------------------------------------------

def save_ppa(path: str, net: PpaNet, grid) -> None:
    state = dict(net.state_dict())
    state["meta.in_channels"] = np.array([net.in_channels], np.float64)
    state["meta.hidden"] = np.array([net.hidden], np.float64)
    state["meta.use_keypoints"] = np.array([1.0 if net.use_keypoints else 0.0])
    state["meta.residual"] = np.array([1.0 if net.residual else 0.0])
    state["meta.grid"] = np.array(grid, np.float64)
    write_checkpoint(path, state)


def load_ppa(path: str):
    state = read_checkpoint(_require_file(path, "PPA checkpoint"))
    try:
        net = PpaNet(int(state["meta.in_channels"][0]), int(state["meta.hidden"][0]),
                     bool(state["meta.use_keypoints"][0]), residual=bool(state["meta.residual"][0]))
        grid = tuple(int(v) for v in state["meta.grid"])
    except KeyError as exc:
        raise FormatError(f"{path}: not a PPA checkpoint (missing {exc})") from None
    net.load_state_dict({k: v for k, v in state.items() if not k.startswith("meta.")})
    return net, grid


def ppa_part_maps(net: PpaNet, image: np.ndarray, ppa_grid, cfg: RunConfig) -> np.ndarray:
    """Stage-2 part maps (11 non-rigid then 3 rigid) upsampled to the feature grid."""
    x = synth.block_average(image, *ppa_grid)
    _, s2 = net.predict(x[None])
    maps = np.concatenate([s2["N"][0], s2["R"][0]])
    return _upsample(maps, cfg.grid_h, cfg.grid_w)


# -- commands --------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    path = synth.generate_benchmark(
        args.out, args.ids, args.samples_per_id, args.occlusion_rate, args.clutter, cfg.seed,
        cfg.gt_config(), cfg.channels, cfg.occluded_attention, args.train_ids)
    print(path)
    return 0


def cmd_gen_gt(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    grid = _grid_cfg(cfg, args.grid or (cfg.grid_h, cfg.grid_w))
    poses = _poses(manifest)
    os.makedirs(args.out, exist_ok=True)
    for rec in manifest["samples"]:
        t = agt.gt_targets(poses[rec["id"]], grid)
        write_tensor(os.path.join(args.out, f"{rec['id']}.aacn"), np.concatenate([t["K"], t["N"], t["R"]]))
    print(f"wrote {len(manifest['samples'])} target files to {args.out}")
    return 0


def _ppa_dataset(manifest, poses, records, grid: agt.GtConfig):
    X, T = [], {"K": [], "N": [], "R": []}
    for rec in records:
        image = read_tensor(_resolve(manifest, rec["image_file"])).astype(np.float64)
        X.append(synth.block_average(image, grid.map_h, grid.map_w))
        t = agt.gt_targets(poses[rec["id"]], grid)
        for k in T:
            T[k].append(t[k])
    return np.stack(X), {k: np.stack(v) for k, v in T.items()}


def cmd_train_ppa(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    grid_hw = args.grid or (cfg.ppa_grid_h, cfg.ppa_grid_w)
    grid = _grid_cfg(cfg, grid_hw)
    records = manifest["samples"]
    if args.samples:
        records = records[:args.samples]
    X, T = _ppa_dataset(manifest, _poses(manifest), records, grid)
    tcfg = PpaTrainConfig(epochs=cfg.epochs, lr=cfg.lr, weights=PpaLossWeights(cfg.mu1, cfg.mu2),
                          seed=cfg.seed, hidden=args.hidden, use_keypoints=not args.no_keypoints)
    res = train_ppa(X, T, tcfg)
    save_ppa(args.out, res.net, grid_hw)
    s1, s2 = evaluate_stages(res.net, X, T, tcfg.weights)
    print(json.dumps({"initial_loss": res.history[0] if res.history else None,
                      "final_loss": res.history[-1] if res.history else None,
                      "stage1_loss": s1, "stage2_loss": s2}, indent=2))
    return 0


def _attention_for(rec, manifest, poses, cfg: RunConfig, source: str, args, ppa) -> np.ndarray:
    if source == "gt":
        return agt.part_maps(poses[rec["id"]], cfg.gt_config())
    if source == "ppa":
        image = read_tensor(_resolve(manifest, rec["image_file"])).astype(np.float64)
        return ppa_part_maps(ppa[0], image, ppa[1], cfg)
    if args.attention_dir:
        maps = read_tensor(_require_file(os.path.join(args.attention_dir, f"{rec['id']}.aacn"), "attention file"))
    else:
        maps = read_tensor(_resolve(manifest, rec["attention_file"]))
    if maps.shape[0] == NUM_KEYPOINTS + NUM_PARTS:
        maps = maps[NUM_KEYPOINTS:]  # gen-gt output: keypoint maps first
    if maps.shape[0] != NUM_PARTS:
        raise FormatError(f"{rec['id']}: expected {NUM_PARTS} attention maps, got {maps.shape[0]}")
    return maps.astype(np.float64)


def _bank(manifest, cfg: RunConfig, source: str, args, splits: Sequence[str]):
    poses = _poses(manifest) if source == "gt" else {}
    ppa = None
    if source == "ppa":
        if not args.ppa_checkpoint:
            raise UsageError("--attention ppa needs --ppa-checkpoint")
        ppa = load_ppa(args.ppa_checkpoint)
    recs, fa, vis, pooled = [], [], [], []
    for rec in manifest["samples"]:
        if rec["split"] not in splits:
            continue
        F = read_tensor(_resolve(manifest, rec["feature_file"])).astype(np.float64)
        maps = _attention_for(rec, manifest, poses, cfg, source, args, ppa)
        if maps.shape[1:] != F.shape[1:]:
            raise FormatError(f"{rec['id']}: attention grid {maps.shape[1:]} != feature grid {F.shape[1:]}")
        a, v = afc.align_batch(F[None], maps[None])
        recs.append(rec)
        fa.append(a[0])
        vis.append(v[0])
        pooled.append(afc.global_pool_batch(F[None])[0])
    if not recs:
        raise UsageError(f"manifest has no samples with split in {list(splits)}")
    return recs, np.stack(fa), np.stack(vis), np.stack(pooled)


def cmd_train_afc(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    source = args.attention or cfg.attention_source
    recs, fa, vis, _ = _bank(manifest, cfg, source, args, ("train",))
    labels = np.array([r["identity"] for r in recs])
    head = afc.CompositionHead(fa.shape[1] // NUM_PARTS, seed=cfg.seed)
    head.fit_input_stats(vis, fa)
    tcfg = afc.CompositionTrainConfig(epochs=args.epochs, lr=cfg.lr if args.lr is None else args.lr,
                                      weight_lr=args.weight_lr, margin=cfg.margin, seed=cfg.seed)
    try:
        history = afc.train_composition(vis, fa, labels, head, tcfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_checkpoint(args.out, head.state_dict())
    print(json.dumps({"initial_loss": history[0] if history else None,
                      "final_loss": history[-1] if history else None}, indent=2))
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    manifest = _load_manifest(args.manifest)
    source = args.attention or cfg.attention_source
    recs, fa, vis, pooled = _bank(manifest, cfg, source, args, ("query", "gallery"))
    if args.features == "composed":
        if args.checkpoint:
            head = afc.CompositionHead.from_state_dict(read_checkpoint(_require_file(args.checkpoint, "checkpoint")))
        else:
            log.warning("no --checkpoint given; composing with an untrained head (seed %d)", cfg.seed)
            head = afc.CompositionHead(fa.shape[1] // NUM_PARTS, seed=cfg.seed)
        feats, _ = head.embed(vis, fa)
    elif args.features == "aligned":
        feats = fa
    else:
        feats = pooled
    index: Dict[str, List[dict]] = {"query": [], "gallery": []}
    for rec, f in zip(recs, feats):
        d = os.path.join(args.out, rec["split"])
        os.makedirs(d, exist_ok=True)
        write_tensor(os.path.join(d, f"{rec['id']}.aacn"), f.reshape(-1, 1, 1))
        index[rec["split"]].append({"id": rec["id"], "identity": rec["identity"], "camera": rec["camera"],
                                    "file": f"{rec['id']}.aacn"})
    for split, entries in index.items():
        os.makedirs(os.path.join(args.out, split), exist_ok=True)
        _write_json(os.path.join(args.out, split, "index.json"), {"samples": entries})
    print(f"wrote {len(recs)} {args.features} features to {args.out}")
    return 0


def read_entries(directory: str) -> List[GalleryEntry]:
    index = _require_file(os.path.join(directory, "index.json"), "feature index")
    with open(index, "r", encoding="utf-8") as fh:
        samples = json.load(fh)["samples"]
    return [GalleryEntry(s["id"], s["identity"], s["camera"],
                         read_tensor(_require_file(os.path.join(directory, s["file"]), "feature file")))
            for s in samples]


def _report(query_dir, gallery_dir, cfg: RunConfig, metric, mode) -> str:
    queries, gallery = read_entries(query_dir), read_entries(gallery_dir)
    rep = evaluate(queries, gallery, mode or cfg.mode, metric or cfg.metric, cfg.cross_camera)
    return rep.to_json()


def cmd_match(args, cfg: RunConfig) -> int:
    text = _report(args.query_dir, args.gallery_dir, cfg, args.metric, args.mode)
    if args.report:
        with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    sys.stdout.write(_report(os.path.join(args.features_dir, "query"),
                             os.path.join(args.features_dir, "gallery"), cfg, args.metric, args.mode))
    return 0


def cmd_viz(args, cfg: RunConfig) -> int:
    maps = read_tensor(_require_file(args.input, "attention file")).astype(np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise FormatError(f"{args.input}: expected (P, H, W) maps, got shape {maps.shape}")
    channels = args.channel if args.channel else range(maps.shape[0])
    os.makedirs(args.out, exist_ok=True)
    for c in channels:
        if not 0 <= c < maps.shape[0]:
            raise UsageError(f"--channel {c} out of range (0..{maps.shape[0] - 1})")
        m = maps[c]
        if args.normalize:
            m = afc.normalize_attention(m)
        write_pgm(os.path.join(args.out, f"map_{c:02d}.pgm"), m)
    return 0


# -- parser ----------------------------------------------------------------------------

def _global_flags(default) -> argparse.ArgumentParser:
    # accepted before or after the command; the per-command copy must not
    # overwrite a value given before it, hence SUPPRESS there
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--config", default=default, help="run config (JSON or key=value lines)")
    g.add_argument("--seed", type=int, default=default)
    g.add_argument("--threads", type=int, default=default,
                   help="accepted for interface compatibility; compute is single-threaded")
    g.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="aacn", description=__doc__.splitlines()[0], parents=[_global_flags(None)])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic benchmark")
    s.add_argument("--out", required=True)
    s.add_argument("--ids", type=int, default=10)
    s.add_argument("--samples-per-id", type=int, default=4)
    s.add_argument("--occlusion-rate", type=float, default=0.5)
    s.add_argument("--clutter", type=float, default=0.3)
    s.add_argument("--train-ids", type=int, default=0, help="extra identities with split 'train'")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("gen-gt", parents=[common], help="write K/N/R target maps (28 channels) per sample")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid", type=parse_grid)
    s.set_defaults(func=cmd_gen_gt)

    s = sub.add_parser("train-ppa", parents=[common], help="train the part attention network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--mu1", type=float)
    s.add_argument("--mu2", type=float)
    s.add_argument("--grid", type=parse_grid)
    s.add_argument("--samples", type=int, default=0, help="use only the first N manifest samples")
    s.add_argument("--hidden", type=int, default=16)
    s.add_argument("--no-keypoints", action="store_true", help="drop the keypoint branch")
    s.set_defaults(func=cmd_train_ppa)

    s = sub.add_parser("train-afc", parents=[common], help="train the composition head on the 'train' split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--attention", choices=("gt", "ppa", "file"))
    s.add_argument("--attention-dir")
    s.add_argument("--ppa-checkpoint")
    s.add_argument("--epochs", type=int, default=afc.CompositionTrainConfig.epochs)
    s.add_argument("--lr", type=float, help="fusion-layer step size (default: config lr)")
    s.add_argument("--weight-lr", type=float, default=afc.CompositionTrainConfig.weight_lr,
                   help="part-weight estimator step size")
    s.set_defaults(func=cmd_train_afc)

    s = sub.add_parser("extract", parents=[common], help="write per-image descriptors")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--attention", choices=("gt", "ppa", "file"))
    s.add_argument("--attention-dir", help="directory of per-sample maps for --attention file")
    s.add_argument("--ppa-checkpoint")
    s.add_argument("--checkpoint", help="composition head checkpoint")
    s.add_argument("--features", choices=FEATURE_KINDS, default="composed")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("match", parents=[common], help="rank a gallery and write a report")
    s.add_argument("--query-dir", required=True)
    s.add_argument("--gallery-dir", required=True)
    s.add_argument("--metric", choices=("euclidean", "cosine"))
    s.add_argument("--mode", choices=("single", "multi"))
    s.add_argument("--report")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("eval", parents=[common], help="print the evaluation report of extracted features")
    s.add_argument("--features-dir", required=True)
    s.add_argument("--metric", choices=("euclidean", "cosine"))
    s.add_argument("--mode", choices=("single", "multi"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz", parents=[common], help="export attention maps as PGM images")
    s.add_argument("--input", required=True, help="tensor file of shape (P, H, W)")
    s.add_argument("--out", required=True)
    s.add_argument("--channel", type=int, action="append")
    s.add_argument("--normalize", action="store_true", help="divide each map by its maximum")
    s.set_defaults(func=cmd_viz)
    return p


def _overrides(args) -> dict:
    keys = ("seed", "threads", "epochs", "lr", "mu1", "mu2")
    out = {k: getattr(args, k, None) for k in keys}
    if args.command != "train-afc" and getattr(args, "attention", None):
        out["attention_source"] = args.attention
    if args.command == "train-afc":
        out.pop("epochs")
        out.pop("lr")
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None:
            _require_file(args.config, "config file")
        cfg = load_config(args.config, **_overrides(args))
        return args.func(args, cfg)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"aacn {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, FloatingPointError, ValueError, KeyError) as exc:
        print(f"aacn {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
