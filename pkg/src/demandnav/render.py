"""SVG rendering of scenes, trajectories and affordance heat layers."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .sim import Scene

PALETTE = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
    "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78",
    "#98df8a", "#ff9896",
]


class MismatchedSceneError(Exception):
    pass


def _class_color(label: str, classes: list[str]) -> str:
    return PALETTE[classes.index(label) % len(PALETTE)]


def render_svg(
    scene: Scene,
    records: Optional[list[dict]] = None,
    affordance: Optional[tuple[np.ndarray, dict]] = None,
    scale: float = 60.0,
) -> str:
    """Floorplan + optional trajectory and affordance layers as SVG text.

    The affordance layer colors cells from dark (impassable) to red
    (high score).  Correction events appear as crosses on the path.
    """
    if records:
        meta = records[0]
        if meta.get("type") == "meta" and meta.get("scene_id") != scene.id:
            raise MismatchedSceneError(
                f"trace is for scene {meta.get('scene_id')!r}, not {scene.id!r}"
            )
    xmin, xmax, ymin, ymax = scene.bounds
    width = (xmax - xmin) * scale
    height = (ymax - ymin) * scale

    def sx(x: float) -> float:
        return (x - xmin) * scale

    def sy(y: float) -> float:
        return (ymax - y) * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.2f} {height:.2f}">',
        f'<rect x="0" y="0" width="{width:.2f}" height="{height:.2f}" fill="#fafafa"/>',
    ]

    if affordance is not None:
        values, meta = affordance
        res = float(meta["resolution"])
        ox, oy = meta["origin"]
        cell = res * scale
        h, w = values.shape
        for iy in range(h):
            for ix in range(w):
                v = values[iy, ix]
                color = "#202020" if v <= 0 else f"rgb({int(80 + 175 * v)},{int(40 * (1 - v))},40)"
                x = sx(ox + ix * res)
                y = sy(oy + (iy + 1) * res)
                parts.append(
                    f'<rect x="{x:.2f}" y="{y:.2f}" width="{cell:.2f}" '
                    f'height="{cell:.2f}" fill="{color}" fill-opacity="0.6"/>'
                )

    for r in scene.rooms:
        parts.append(
            f'<rect x="{sx(r[0]):.2f}" y="{sy(r[3]):.2f}" width="{(r[1]-r[0])*scale:.2f}" '
            f'height="{(r[3]-r[2])*scale:.2f}" fill="none" stroke="#dddddd"/>'
        )
    n_objects = len(scene.objects)
    for b in scene.obstacles[: len(scene.obstacles) - n_objects]:
        parts.append(
            f'<rect x="{sx(b[0]):.2f}" y="{sy(b[3]):.2f}" width="{(b[1]-b[0])*scale:.2f}" '
            f'height="{(b[3]-b[2])*scale:.2f}" fill="#555555"/>'
        )
    classes = sorted(scene.class_set())
    for obj in scene.objects:
        b = obj.box
        color = _class_color(obj.label, classes)
        parts.append(
            f'<rect x="{sx(b[0]):.2f}" y="{sy(b[3]):.2f}" width="{(b[1]-b[0])*scale:.2f}" '
            f'height="{(b[3]-b[2])*scale:.2f}" fill="{color}" fill-opacity="0.8"/>'
        )
        cx, cy = obj.center2d
        parts.append(
            f'<text x="{sx(cx):.2f}" y="{sy(cy):.2f}" font-size="{0.14*scale:.1f}" '
            f'text-anchor="middle" fill="#111111">{obj.label}</text>'
        )

    if records:
        pts = [(r["x"], r["y"]) for r in records if r.get("type") == "action"]
        if pts:
            meta = records[0]
            if meta.get("type") == "meta":
                spawn = scene.spawns[meta["spawn_index"]]
                pts = [(spawn.x, spawn.y)] + pts
            poly = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
            parts.append(
                f'<polyline points="{poly}" fill="none" stroke="#0033cc" stroke-width="2"/>'
            )
            parts.append(
                f'<circle cx="{sx(pts[0][0]):.2f}" cy="{sy(pts[0][1]):.2f}" r="5" fill="#00aa00"/>'
            )
            parts.append(
                f'<circle cx="{sx(pts[-1][0]):.2f}" cy="{sy(pts[-1][1]):.2f}" r="5" fill="#cc0000"/>'
            )
        for r in records:
            if r.get("type") != "correction":
                continue
            # place the cross at the pose of the most recent action
            prior = [a for a in records if a.get("type") == "action" and a["step"] <= r["step"]]
            if not prior:
                continue
            x, y = sx(prior[-1]["x"]), sy(prior[-1]["y"])
            parts.append(
                f'<path d="M {x-5:.2f} {y-5:.2f} L {x+5:.2f} {y+5:.2f} '
                f'M {x-5:.2f} {y+5:.2f} L {x+5:.2f} {y-5:.2f}" '
                f'stroke="#ff8800" stroke-width="3"/>'
            )
    parts.append("</svg>")
    return "\n".join(parts)
