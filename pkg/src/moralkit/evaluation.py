"""Detection and segmentation metrics: BEV IoU, per-class AP, mAP, MOS scores,
and the tail-elongation diagnostic."""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import CLASSES, Detection, ObjectClass
from .errors import LengthMismatch, TooFewPoints
from .kernels import bev_iou_matrix

INF = float("inf")


@dataclass(frozen=True)
class RegionSpec:
    name: str
    bounds: tuple = (-INF, INF, -INF, INF)  # x_min, x_max, y_min, y_max

    def __post_init__(self):
        b = tuple(float(v) for v in self.bounds)
        if not (b[1] > b[0] and b[3] > b[2]):
            raise ValueError(f"degenerate region {b}")
        object.__setattr__(self, "bounds", b)

    def contains(self, x, y):
        x0, x1, y0, y1 = self.bounds
        return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


ENTIRE_AREA = RegionSpec("EntireArea")
DRIVING_CORRIDOR = RegionSpec("DrivingCorridor", (0.0, 25.0, -4.0, 4.0))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: {
        ObjectClass.CAR: 0.50, ObjectClass.PEDESTRIAN: 0.25, ObjectClass.CYCLIST: 0.25})
    regions: tuple = (ENTIRE_AREA, DRIVING_CORRIDOR)
    recall_points: int = 40

    def __post_init__(self):
        th = {ObjectClass(k): float(v) for k, v in self.iou_thresholds.items()}
        for k, v in th.items():
            if not 0 < v <= 1:
                raise ValueError(f"IoU threshold for {k.value} must be in (0, 1], got {v}")
        object.__setattr__(self, "iou_thresholds", th)


def bev_iou(a, b):
    """IoU of the yaw-rotated BEV footprints of two boxes."""
    return float(bev_iou_matrix(a.bev(), b.bev())[0, 0])


def region_filter(boxes, region):
    """Boxes (or detections) whose BEV center lies in ``region``'s half-open rectangle."""
    out = []
    for b in boxes:
        box = b.box if isinstance(b, Detection) else b
        if region.contains(box.center[0], box.center[1]):
            out.append(b)
    return out


def _as_frames(items, is_det):
    """Normalize to ``{frame_id: [items]}``."""
    if isinstance(items, dict):
        return {k: list(v) for k, v in items.items()}
    out = {}
    for it in items:
        key = it.frame_id if is_det else ""
        out.setdefault(key, []).append(it)
    return out


def greedy_match(dets, gts, iou_thresh):
    """Match score-sorted detections of one frame to its GTs; returns a TP flag per detection."""
    if not dets:
        return np.zeros(0, dtype=bool)
    if not gts:
        return np.zeros(len(dets), dtype=bool)
    iou = bev_iou_matrix(np.array([d.box.bev() for d in dets]), np.array([g.bev() for g in gts]))
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for i in range(len(dets)):
        cand = np.where(used, -1.0, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            used[j] = True
            tp[i] = True
    return tp


def interpolated_ap(recall, precision, n_points=40):
    """Mean over recall levels ``1/n .. 1`` of the best precision reaching that recall."""
    vals = []
    for k in range(1, n_points + 1):
        r = k / n_points
        reach = precision[recall >= r]
        vals.append(float(reach.max()) if len(reach) else 0.0)
    return math.fsum(vals) / n_points


def average_precision(detections, ground_truths, cls, iou_thresh, region=ENTIRE_AREA, n_points=40):
    """Per-class AP with greedy matching and ``n_points``-point interpolation.

    ``detections`` is a list of :class:`Detection` (grouped by ``frame_id``)
    or a ``{frame_id: [Detection]}`` dict; ``ground_truths`` a
    ``{frame_id: [Box3D]}`` dict or a flat list (single frame ``""``).
    Returns NaN when no ground truth of ``cls`` lies in ``region``.
    """
    cls = ObjectClass(cls)
    det_frames = _as_frames(detections, True)
    gt_frames = _as_frames(ground_truths, False)
    if not isinstance(ground_truths, dict) and not isinstance(detections, dict):
        # flat lists: treat as one frame regardless of frame ids
        det_frames = {"": [d for v in det_frames.values() for d in v]}
    gts = {k: region_filter([g for g in v if g.cls == cls], region) for k, v in gt_frames.items()}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return float("nan")
    scored = []  # (score, order, frame, det)
    order = 0
    for k in sorted(det_frames):
        for d in region_filter([d for d in det_frames[k] if d.box.cls == cls], region):
            scored.append((d.score, order, k, d))
            order += 1
    scored.sort(key=lambda s: (-s[0], s[1]))
    if not scored:
        return 0.0
    tp = np.zeros(len(scored), dtype=bool)
    by_frame = {}
    for pos, s in enumerate(scored):
        by_frame.setdefault(s[2], []).append(pos)
    for k, positions in by_frame.items():
        flags = greedy_match([scored[p][3] for p in positions], gts.get(k, []), iou_thresh)
        tp[positions] = flags
    tp_c = np.cumsum(tp)
    fp_c = np.cumsum(~tp)
    recall = tp_c / n_gt
    precision = tp_c / (tp_c + fp_c)
    return interpolated_ap(recall, precision, n_points)


def evaluate(detections, ground_truths, config=EvalConfig()):
    """Per-region, per-class AP and mAP as a nested dict."""
    report = {}
    for region in config.regions:
        row = {}
        for cls in CLASSES:
            row[cls.value] = average_precision(detections, ground_truths, cls,
                                               config.iou_thresholds[cls], region, config.recall_points)
        row["mAP"] = mean_ap(row)
        report[region.name] = row
    return report


def mean_ap(row):
    vals = [row[c.value] for c in CLASSES if not math.isnan(row[c.value])]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def mos_metrics(pred, labels):
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if pred.shape != labels.shape:
        raise LengthMismatch(f"{pred.shape} vs {labels.shape}")
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    n = len(pred)
    acc = float(np.mean(pred == labels)) if n else 1.0
    iou = tp / (tp + fp + fn) if tp + fp + fn else 1.0
    precision = tp / (tp + fp) if tp + fp else (1.0 if fn == 0 else 0.0)
    recall = tp / (tp + fn) if tp + fn else 1.0
    return {"accuracy": acc, "moving_iou": iou, "precision": precision, "recall": recall,
            "tp": tp, "fp": fp, "fn": fn}


def _projections(points, box, direction, reach, lateral_margin):
    d = np.asarray(direction, dtype=np.float64)[:2]
    d = d / np.linalg.norm(d)
    perp = np.array([-d[1], d[0]])
    rel = np.asarray(points)[:, :2] - np.asarray(box.center[:2])
    along = rel @ d
    across = rel @ perp
    th = box.yaw - math.atan2(d[1], d[0])
    l, w = box.size[0], box.size[1]
    ext_along = 0.5 * (abs(l * math.cos(th)) + abs(w * math.sin(th)))
    ext_across = 0.5 * (abs(l * math.sin(th)) + abs(w * math.cos(th)))
    keep = (np.abs(across) <= ext_across + lateral_margin) & (np.abs(along) <= ext_along + reach * 2 * ext_along)
    return along[keep]


def spread(values, lo=5.0, hi=95.0):
    return float(np.percentile(values, hi) - np.percentile(values, lo))


def tail_elongation(accumulated, gt_box, motion_dir, reference, reach=2.0, lateral_margin=0.5):
    """Excess spread (m) of the points near ``gt_box`` along ``motion_dir``.

    Points are associated to the box when they lie laterally within the
    footprint (plus ``lateral_margin``) and longitudinally within the
    footprint extended by ``reach`` box lengths on both sides. The result is
    the 5-95 percentile spread of the accumulated cloud minus that of the
    single-frame ``reference`` cloud.
    """
    acc = _projections(accumulated, gt_box, motion_dir, reach, lateral_margin)
    ref = _projections(reference, gt_box, motion_dir, reach, lateral_margin)
    if len(acc) < 2 or len(ref) < 2:
        raise TooFewPoints(f"need >= 2 associated points, got {len(acc)} accumulated / {len(ref)} reference")
    return spread(acc) - spread(ref)


# ---------------------------------------------------------------- reports

def format_table(report):
    """Aligned text table: one row per report entry, Car/Ped./Cyc./mAP per region."""
    regions = None
    rows = report if isinstance(report, list) else [("", report)]
    for _, r in rows:
        regions = list(r.keys())
        break
    heads = ["Car", "Ped.", "Cyc.", "mAP"]
    keys = [c.value for c in CLASSES] + ["mAP"]
    label_w = max([len(str(n)) for n, _ in rows] + [8])
    lines = []
    top = " " * label_w + " | " + " | ".join(f"{name:^31}" for name in regions)
    sub = f"{'':<{label_w}} | " + " | ".join(" ".join(f"{h:>7}" for h in heads) for _ in regions)
    lines += [top, sub, "-" * len(sub)]
    for name, r in rows:
        cells = []
        for region in regions:
            cells.append(" ".join(_pct(r[region][k]) for k in keys))
        lines.append(f"{str(name):<{label_w}} | " + " | ".join(cells))
    return "\n".join(lines)


def _pct(v):
    return f"{'nan':>7}" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{100 * v:7.2f}"


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def report_json(report, **extra):
    """JSON text of an :func:`evaluate` report; undefined APs (no ground truth) become ``null``."""
    payload = {"ap": report}
    payload.update(extra)
    return json.dumps(_json_safe(payload), indent=1, sort_keys=True)


def detections_to_jsonl(detections):
    return "".join(json.dumps(d.to_dict(), sort_keys=True) + "\n" for d in detections)


def detections_from_jsonl(text):
    return [Detection.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]


def boxes_from_frames(frames, prefix=""):
    """``{frame_id: [Box3D]}`` from simulator frames."""
    return {prefix + fr.frame_id: list(fr.boxes) for fr in frames}
