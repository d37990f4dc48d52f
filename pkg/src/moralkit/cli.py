"""``moralkit`` command line: simulate, train, eval, ablate, plot."""
import argparse
import csv
import hashlib
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import weights
from ._accel import configure_threads
from .config import load_config
from .errors import EmptyDataset, FormatError, InvalidConfig, MoralkitError
from .evaluation import detections_from_jsonl, detections_to_jsonl, evaluate, format_table, report_json
from .model import END_TO_END, DetectorTrainConfig, build_detector, build_samples, predict, train_detector
from .mre.pointnet import build_mos
from .mre.training import build_samples as mos_samples
from .mre.training import evaluate_mos, evaluate_threshold, train_mos
from .pipeline import PRESETS, SPLITS, Benchmark, ablate, ablation_table, benchmark_split, map_series, sub_seed
from .plot import accumulation_svgs, bev_svg
from .scene import FORMAT_VERSION, read_sequence, sequence_digest, simulate, write_sequence
from .training import History, make_optimizer

log = logging.getLogger("moralkit")
MANIFEST = "manifest.json"


# ---------------------------------------------------------------- helpers

def _effective_config(args):
    cfg = load_config(args.config, args.seed)
    mre = cfg.mre
    if getattr(args, "frames", None) is not None:
        mre = replace(mre, frames=args.frames)
    if getattr(args, "alpha", None) is not None:
        mre = replace(mre, alpha=args.alpha)
    if getattr(args, "strict", False):
        mre = replace(mre, strict=True)
    if getattr(args, "epochs", None) is not None:
        mre = replace(mre, train=replace(mre.train, epochs=args.epochs))
        cfg = replace(cfg, detector=replace(cfg.detector, train=replace(cfg.detector.train, epochs=args.epochs)))
    cfg = replace(cfg, mre=mre)
    if getattr(args, "out", None):
        cfg = replace(cfg, out=args.out)
    return cfg.validate()


def _out_dir(cfg):
    p = Path(cfg.out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def find_sequences(root):
    """Sequence directories (those holding ``sequence.json``) under ``root``, sorted by path."""
    root = Path(root)
    if not root.exists():
        raise FormatError(f"{root}: no such data directory")
    if (root / "sequence.json").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("sequence.json"))


def load_split(root, *names):
    """Sequences from the first existing ``root/<name>`` of ``names``, else every sequence under ``root``."""
    root = Path(root)
    for n in names:
        if (root / n).is_dir():
            dirs = find_sequences(root / n)
            if dirs:
                return [read_sequence(d) for d in dirs]
    return [read_sequence(d) for d in find_sequences(root)]


def _write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history.epoch_loss, 1):
            w.writerow([i, repr(float(v))])


def _history_meta(history):
    return {"step_loss": [float(v) for v in history.step_loss], "epoch_loss": [float(v) for v in history.epoch_loss]}


def _history_from(meta):
    h = meta.get("history") or {}
    return History(list(h.get("step_loss", [])), list(h.get("epoch_loss", [])))


class _Stop(Exception):
    pass


def _checkpointer(path, modules, meta, stop_after):
    def on_epoch(epoch, optimizer, history):
        weights.save_checkpoint(path, modules, dict(meta, epoch=epoch, history=_history_meta(history)), optimizer)
        log.info("epoch %d loss %.6f", epoch, history.epoch_loss[-1])
        if stop_after is not None and epoch >= stop_after:
            raise _Stop(epoch)
    return on_epoch


# ---------------------------------------------------------------- simulate

def cmd_simulate(args):
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    entries = []
    if cfg.simulate.mode == "scene":
        seq = simulate(cfg.scene_config(), name="scene")
        write_sequence(seq, out)
        entries.append({"path": ".", "digest": sequence_digest(seq), "frames": len(seq)})
    else:
        for split in SPLITS:
            for seq in benchmark_split(cfg.seed, split, cfg.benchmark):
                d = out / split / seq.name
                write_sequence(seq, d)
                entries.append({"path": f"{split}/{seq.name}", "digest": sequence_digest(seq), "frames": len(seq)})
    # where the files went is not part of what they are
    config = cfg.to_dict()
    config.pop("out", None)
    manifest = {"format": FORMAT_VERSION, "seed": cfg.seed, "config_hash": cfg.digest(), "config": config,
                "sequences": entries}
    text = _canonical_json(manifest)
    (out / MANIFEST).write_text(text)
    print(f"wrote {len(entries)} sequence(s) to {out}")
    print(f"manifest sha256 {hashlib.sha256(text.encode()).hexdigest()}")
    return 0


# ---------------------------------------------------------------- train

def _train_mos(cfg, args, out):
    train_seqs = load_split(args.data, "mos-train", "train")
    test_seqs = load_split(args.data, "mos-test", "test") if _has_any(args.data, "mos-test", "test") else []
    m = cfg.mre
    net = build_mos(m.network, seed=sub_seed(cfg.seed, "mos-init"))
    samples = mos_samples(train_seqs, net, m.frames)
    if not samples:
        raise EmptyDataset(f"no {m.frames}-frame windows in {args.data}")
    tc = replace(m.train, seed=sub_seed(cfg.seed, "mos-train"))
    modules = {"mos": net}
    meta = {"kind": "mos", "config_hash": cfg.digest(), "seed": cfg.seed}
    history, start, optimizer = None, 0, None
    if args.resume:
        optimizer = make_optimizer([p for p in net.parameters() if p.requires_grad], tc)
        rmeta = weights.load_checkpoint(args.resume, modules, optimizer)
        history, start = _history_from(rmeta), int(rmeta.get("epoch", 0))
    ckpt = out / "mos_ckpt.mkwt"
    try:
        net, history = train_mos(net, samples, tc, history, start, optimizer,
                                 _checkpointer(ckpt, modules, meta, args.stop_after))
    except _Stop:
        _, rmeta = weights.load(ckpt)
        history = _history_from(rmeta)
        print(f"stopped after epoch {rmeta['epoch']}; resume with --resume {ckpt}")
    weights.save_checkpoint(out / "mos.mkwt", modules, dict(meta, epoch=len(history.epoch_loss),
                                                              history=_history_meta(history)))
    _write_loss_csv(out / "mos_loss.csv", history)
    eval_seqs = test_seqs or train_seqs
    held = "held-out" if test_seqs else "training"
    test = mos_samples(eval_seqs, net, m.frames)
    metrics = {"mos": evaluate_mos(net, test, m.alpha), "threshold": evaluate_threshold(test), "split": held}
    (out / "mos_metrics.json").write_text(_canonical_json(metrics))
    print(f"moving-IoU ({held}) {metrics['mos']['moving_iou']:.4f}  precision {metrics['mos']['precision']:.4f}  "
          f"threshold-baseline precision {metrics['threshold']['precision']:.4f}")
    return 0


def _has_any(root, *names):
    return any((Path(root) / n).is_dir() for n in names)


def _load_mos(cfg, path):
    net = build_mos(cfg.mre.network, seed=sub_seed(cfg.seed, "mos-init"))
    if path is None:
        return net
    tensors, _ = weights.load(path)
    prefix = "mos/"
    weights.load_module_tensors(net, tensors, prefix)
    return net


def _detector_samples(cfg, seqs, mos, keep=False):
    d = cfg.detector
    return build_samples(seqs, mos, cfg.mre.frames, cfg.mre.alpha, d.use_mre, cfg.ground_params(), 1, keep,
                         tau=cfg.mre.tau, strict=cfg.mre.strict)


def _train_detector(cfg, args, out, mode):
    mos = _load_mos(cfg, args.mos)
    seqs = load_split(args.data, "train")
    samples = _detector_samples(cfg, seqs, mos, keep=mode == END_TO_END)
    det = build_detector(cfg.detector_config(), seed=sub_seed(cfg.seed, "det-init"))
    tc = DetectorTrainConfig(replace(cfg.detector.train, seed=sub_seed(cfg.seed, "det-train")), mode)
    modules = {"detector": det, "mos": mos}
    # staged training leaves the MOS network frozen, so only end-to-end checkpoints carry it
    ck_modules = modules if mode == END_TO_END else {"detector": det}
    meta = {"kind": "detector", "mode": mode, "config_hash": cfg.digest(), "seed": cfg.seed}
    history, start, optimizer = None, 0, None
    if args.resume:
        params = [p for m in ck_modules.values() for p in m.parameters()]
        optimizer = make_optimizer([p for p in params if p.requires_grad], tc.train)
        rmeta = weights.load_checkpoint(args.resume, ck_modules, optimizer)
        history, start = _history_from(rmeta), int(rmeta.get("epoch", 0))
    ckpt = out / "detector_ckpt.mkwt"
    try:
        det, history = train_detector(det, samples, tc, mos, history, start, optimizer,
                                      _checkpointer(ckpt, ck_modules, meta, args.stop_after))
    except _Stop:
        _, rmeta = weights.load(ckpt)
        history = _history_from(rmeta)
        print(f"stopped after epoch {rmeta['epoch']}; resume with --resume {ckpt}")
    weights.save_checkpoint(out / "detector.mkwt", modules, dict(meta, epoch=len(history.epoch_loss),
                                                                   history=_history_meta(history)))
    _write_loss_csv(out / "detector_loss.csv", history)
    print(f"trained detector ({mode}) on {len(samples)} frame(s); final loss "
          f"{history.epoch_loss[-1] if history.epoch_loss else float('nan'):.6f}")
    return 0


def cmd_train(args):
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    if args.stage == "mos":
        return _train_mos(cfg, args, out)
    mode = END_TO_END if args.stage == "end2end" else "staged"
    return _train_detector(cfg, args, out, mode)


# ---------------------------------------------------------------- eval

def eval_frames(cfg, seqs):
    """Ground truth for the evaluated frames: every frame with ``K - 1`` frames of history."""
    gt = {}
    k = cfg.mre.frames
    for s, seq in enumerate(seqs):
        for t in range(k - 1, len(seq)):
            gt[f"{seq.name or s}/{seq[t].frame_id}"] = list(seq[t].boxes)
    return gt


def cmd_eval(args):
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    seqs = load_split(args.data, "test")
    gt = eval_frames(cfg, seqs)
    if args.detections:
        dets = detections_from_jsonl(Path(args.detections).read_text())
        source = str(args.detections)
    else:
        if not args.weights:
            raise InvalidConfig("--weights", "eval needs --weights or --detections")
        tensors, meta = weights.load(args.weights)
        if meta.get("kind") != "detector":
            raise FormatError(f"{args.weights}: not a detector container (kind={meta.get('kind')!r})")
        mos = build_mos(cfg.mre.network)
        weights.load_module_tensors(mos, tensors, "mos/")
        det = build_detector(cfg.detector_config())
        weights.load_module_tensors(det, tensors, "detector/")
        samples = _detector_samples(cfg, seqs, mos)
        dets = predict(det, samples)
        (out / "detections.jsonl").write_text(detections_to_jsonl(dets))
        source = str(args.weights)
    report = evaluate(dets, gt, cfg.eval.build())
    (out / "report.json").write_text(report_json(report, frames=len(gt), detections=len(dets)) + "\n")
    table = format_table([("result", report)])
    (out / "report.txt").write_text(table + "\n")
    print(f"evaluated {len(dets)} detection(s) from {source} on {len(gt)} frame(s)")
    print(table)
    return 0


# ---------------------------------------------------------------- ablate

def cmd_ablate(args):
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    seeds = (args.seed,) if args.seed is not None else tuple(cfg.ablate.seeds)
    presets = PRESETS if args.preset == "all" else (args.preset,)
    benches = {s: Benchmark(s, cfg) for s in seeds}
    for preset in presets:
        res = ablate(preset, seeds, cfg, benches)
        text = ablation_table(res)
        (out / f"ablate_{preset}.txt").write_text(text + "\n")
        payload = {"preset": preset, "seeds": list(seeds), "map": {str(k): v for k, v in map_series(res).items()},
                   "reports": {str(s): [[label, rep] for label, rep in rows] for s, rows in res.items()}}
        (out / f"ablate_{preset}.json").write_text(report_json(payload) + "\n")
        print(f"== {preset}")
        print(text)
    return 0


# ---------------------------------------------------------------- plot

def cmd_plot(args):
    cfg = _effective_config(args)
    out = _out_dir(cfg)
    dets = detections_from_jsonl(Path(args.detections).read_text()) if args.detections else []
    mos = _load_mos(cfg, args.weights) if args.weights else None
    written = []
    for s, d in enumerate(find_sequences(args.data)):
        seq = read_sequence(d)
        name = seq.name or str(s)
        fr = seq[len(seq) - 1]
        fid = f"{name}/{fr.frame_id}"
        frame_dets = [x for x in dets if x.frame_id == fid]
        x_r, y_r = seq.config.x_range, seq.config.y_range
        stem = name.replace("/", "_")
        svg = bev_svg(fr.radar, fr.labels, fr.boxes, frame_dets, fr.lidar, x_r, y_r, f"{name} frame {fr.frame_id}")
        path = out / f"{stem}_frame_{fr.frame_id}.svg"
        path.write_text(svg)
        written.append(path)
        k = min(cfg.mre.frames, len(seq))
        if any(np.hypot(v[0], v[1]) > 0.1 for v in fr.velocities):
            for variant, text in accumulation_svgs(seq, k, None, mos, cfg.mre.alpha).items():
                p = out / f"{stem}_accum_{variant}.svg"
                p.write_text(text)
                written.append(p)
        if args.limit and s + 1 >= args.limit:
            break
    print(f"wrote {len(written)} SVG file(s) to {out}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser():
    p = argparse.ArgumentParser(prog="moralkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="pipeline TOML file (defaults built in)")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--frames", type=int, metavar="K", help="radar frames to accumulate")
        sp.add_argument("--alpha", type=float, metavar="A", help="motion-probability threshold")
        sp.add_argument("--strict", action="store_true", help="error on degenerate compensation inputs")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("simulate", help="write synthetic sequences")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train the MOS network or the detector")
    common(sp)
    sp.add_argument("data", help="data directory written by 'simulate'")
    sp.add_argument("--stage", choices=("mos", "detector", "end2end"), required=True)
    sp.add_argument("--mos", help="MOS weights for the detector stages")
    sp.add_argument("--epochs", type=int, help="override the configured epoch count")
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--stop-after", type=int, help="stop (with a checkpoint) after this epoch")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a detector or stored detections")
    common(sp)
    sp.add_argument("data")
    sp.add_argument("--weights", help="detector container from 'train'")
    sp.add_argument("--detections", help="JSON-lines detections to score instead of running inference")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation preset on the synthetic benchmark")
    common(sp)
    sp.add_argument("--preset", choices=PRESETS + ("all",), required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("plot", help="render BEV SVGs")
    common(sp)
    sp.add_argument("data", help="sequence or data directory")
    sp.add_argument("--detections", help="JSON-lines detections to overlay")
    sp.add_argument("--weights", help="MOS weights for the accumulation plots (default: simulator labels)")
    sp.add_argument("--limit", type=int, default=0, help="plot at most this many sequences")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    configure_threads()
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except InvalidConfig as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return 2
    except (MoralkitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
