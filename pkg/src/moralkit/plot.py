"""Deterministic bird's-eye-view SVG rendering (no plotting library)."""
import json
import math

import numpy as np

from .core import Detection

GT_COLOR = "#1a9850"
DET_COLOR = "#d73027"
STATIC_COLOR = "#7f7f7f"
MOVING_COLOR = "#2c7bb6"
LIDAR_COLOR = "#bdbdbd"


def _f(v):
    return f"{v:.2f}"


class BevCanvas:
    """x (forward) runs left to right, y (left) runs bottom to top."""

    def __init__(self, x_range=(0.0, 51.2), y_range=(-25.6, 25.6), scale=10.0, margin=40.0):
        self.x0, self.x1 = map(float, x_range)
        self.y0, self.y1 = map(float, y_range)
        self.scale = float(scale)
        self.margin = float(margin)
        self.items = []

    @property
    def size(self):
        return (2 * self.margin + (self.x1 - self.x0) * self.scale,
                2 * self.margin + (self.y1 - self.y0) * self.scale)

    def to_px(self, x, y):
        return self.margin + (x - self.x0) * self.scale, self.margin + (self.y1 - y) * self.scale

    def axes(self, step=10.0):
        w, h = self.size
        m = self.margin
        self.items.append(f'<rect x="{_f(m)}" y="{_f(m)}" width="{_f(w - 2 * m)}" height="{_f(h - 2 * m)}" '
                          'fill="none" stroke="#000" stroke-width="1"/>')
        for v in np.arange(math.ceil(self.x0 / step) * step, self.x1 + 1e-9, step):
            px, _ = self.to_px(v, self.y0)
            self.items.append(f'<line x1="{_f(px)}" y1="{_f(h - m)}" x2="{_f(px)}" y2="{_f(h - m + 5)}" stroke="#000"/>')
            self.items.append(f'<text x="{_f(px)}" y="{_f(h - m + 18)}" font-size="11" '
                              f'text-anchor="middle">{v:g}</text>')
        for v in np.arange(math.ceil(self.y0 / step) * step, self.y1 + 1e-9, step):
            _, py = self.to_px(self.x0, v)
            self.items.append(f'<line x1="{_f(m - 5)}" y1="{_f(py)}" x2="{_f(m)}" y2="{_f(py)}" stroke="#000"/>')
            self.items.append(f'<text x="{_f(m - 8)}" y="{_f(py + 4)}" font-size="11" '
                              f'text-anchor="end">{v:g}</text>')
        self.items.append(f'<text x="{_f(w / 2)}" y="{_f(h - 4)}" font-size="12" text-anchor="middle">x [m]</text>')
        self.items.append(f'<text x="12" y="{_f(h / 2)}" font-size="12" text-anchor="middle" '
                          f'transform="rotate(-90 12 {_f(h / 2)})">y [m]</text>')

    def points(self, xy, color, radius=1.5, cls=""):
        for x, y in np.asarray(xy, dtype=np.float64).reshape(-1, 2):
            if not (self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1):
                continue
            px, py = self.to_px(x, y)
            self.items.append(f'<circle class="{cls}" cx="{_f(px)}" cy="{_f(py)}" r="{_f(radius)}" fill="{color}"/>')

    def box(self, box, color, label=""):
        corners = _corners(box)
        pts = " ".join(f"{_f(px)},{_f(py)}" for px, py in (self.to_px(x, y) for x, y in corners))
        self.items.append(f'<polygon points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        if label:
            px, py = self.to_px(*corners.max(axis=0))
            self.items.append(f'<text x="{_f(px)}" y="{_f(py)}" font-size="10" fill="{color}">{label}</text>')

    def title(self, text):
        w, _ = self.size
        self.items.append(f'<text x="{_f(w / 2)}" y="20" font-size="14" text-anchor="middle">{_escape(text)}</text>')

    def render(self, desc=None):
        w, h = self.size
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_f(w)}" height="{_f(h)}" '
                f'viewBox="0 0 {_f(w)} {_f(h)}">')
        body = [head, '<rect width="100%" height="100%" fill="#fff"/>']
        if desc is not None:
            body.append(f"<desc>{_escape(json.dumps(desc, sort_keys=True))}</desc>")
        return "\n".join(body + self.items + ["</svg>", ""])


def _escape(s):
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _corners(box):
    x, y = box.center[0], box.center[1]
    l, w = box.size[0], box.size[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local = np.array([[l / 2, w / 2], [-l / 2, w / 2], [-l / 2, -w / 2], [l / 2, -w / 2]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([x, y])


def bev_svg(radar=None, labels=None, gt_boxes=(), detections=(), lidar=None, x_range=(0.0, 51.2),
            y_range=(-25.6, 25.6), title="", desc=None, scale=10.0):
    """One BEV panel: LiDAR (light), radar points (moving highlighted), GT and predicted boxes."""
    cv = BevCanvas(x_range, y_range, scale)
    cv.axes()
    if lidar is not None and len(lidar):
        cv.points(np.asarray(lidar)[:, :2], LIDAR_COLOR, 0.8, "lidar")
    if radar is not None and len(radar):
        radar = np.asarray(radar)
        lab = np.zeros(len(radar), bool) if labels is None else np.asarray(labels).astype(bool)
        cv.points(radar[~lab, :2], STATIC_COLOR, 1.5, "static")
        cv.points(radar[lab, :2], MOVING_COLOR, 2.0, "moving")
    for b in gt_boxes:
        cv.box(b, GT_COLOR)
    for d in detections:
        box = d.box if isinstance(d, Detection) else d
        cv.box(box, DET_COLOR, f"{d.score:.2f}" if isinstance(d, Detection) else "")
    if title:
        cv.title(title)
    return cv.render(desc)


def accumulation_svgs(seq, k=5, mask=None, net=None, alpha=0.5, window=((0.0, 30.0), (-8.0, 8.0)), scale=20.0):
    """Uncompensated and compensated K-frame accumulations of a sequence, with the tail metric.

    Returns ``{"uncompensated": svg, "compensated": svg}``. Each SVG's ``<desc>``
    carries the elongation of the first moving object's cluster, measured on the
    points the simulator labels as moving so nearby static clutter does not count.
    """
    from .evaluation import tail_elongation
    from .mre.compensation import accumulate

    target = len(seq) - 1
    fr = seq[target]
    if mask is None and net is None:
        mask = _oracle(seq, k, target)
    acc = accumulate(seq, k, net, alpha, target, mask=mask)
    movers = [(b, v) for b, v in zip(fr.boxes, fr.velocities) if np.hypot(v[0], v[1]) > 0.1]
    out = {}
    for name, cloud in (("uncompensated", acc.stacked), ("compensated", acc.cloud)):
        desc = {"frames": k, "variant": name}
        if movers:
            box, vel = movers[0]
            direction = np.asarray(vel[:2]) / np.hypot(vel[0], vel[1])
            own = acc.labels.astype(bool)
            single = fr.radar[fr.labels.astype(bool)]
            try:
                desc["elongation_m"] = round(tail_elongation(cloud[own], box, direction, single), 6)
            except ValueError:
                pass
        title = f"{k}-frame accumulation, {name}"
        if "elongation_m" in desc:
            title += f" (excess elongation {desc['elongation_m']:.2f} m)"
        out[name] = bev_svg(cloud, acc.mask.labels, fr.boxes, (), None, window[0], window[1], title, desc, scale)
    return out


def _oracle(seq, k, target):
    from .mre.compensation import stack_frames
    return stack_frames(seq, k, target)[1]


def svg_points(svg, cls=None):
    """Recover plotted point coordinates (pixels) from an SVG produced here."""
    out = []
    for line in svg.splitlines():
        if not line.startswith("<circle"):
            continue
        if cls is not None and f'class="{cls}"' not in line:
            continue
        parts = dict(p.split("=", 1) for p in line[len("<circle "):-2].split(" ") if "=" in p)
        out.append((float(parts["cx"].strip('"')), float(parts["cy"].strip('"'))))
    return np.array(out).reshape(-1, 2)
