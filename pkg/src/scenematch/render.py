"""Plain-text SVG figures: match lines and visibility-coloured keypoints."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PANEL_WIDTH = 400.0
GAP = 20.0


def _colour(p_visible: float) -> str:
    # red (invisible) to green (visible)
    p = float(np.clip(p_visible, 0.0, 1.0))
    return f"rgb({round(255 * (1 - p))},{round(200 * p)},60)"


def side_by_side(pos_s: np.ndarray, size_s, pos_t: np.ndarray, size_t, matches,
                 p_vis_s=None, p_vis_t=None, title: str = "") -> str:
    """Both images as outlined panels, keypoints as dots, matches as line segments.

    Keypoints are grey unless visibility probabilities are given.  Each match
    is one ``<line class="match">`` element.
    """
    scale = PANEL_WIDTH / max(size_s[0], size_t[0])
    offset = PANEL_WIDTH + GAP
    height = max(size_s[1], size_t[1]) * scale
    width = 2 * PANEL_WIDTH + GAP
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height + 24:.0f}" '
           f'viewBox="0 -24 {width:.0f} {height + 24:.0f}">']
    if title:
        out.append(f'<text x="4" y="-8" font-family="sans-serif" font-size="12">{escape(title)}</text>')
    for dx, (w, h) in ((0.0, size_s), (offset, size_t)):
        out.append(f'<rect x="{dx:.1f}" y="0" width="{w * scale:.1f}" height="{h * scale:.1f}" '
                   'fill="none" stroke="#444"/>')
    for i, j, conf in matches:
        x1, y1 = pos_s[i, :2] * scale
        x2, y2 = pos_t[j, :2] * scale
        out.append(f'<line class="match" x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2 + offset:.1f}" y2="{y2:.1f}" '
                   f'stroke="#1f77b4" stroke-opacity="{0.3 + 0.7 * conf:.2f}" stroke-width="0.8"/>')
    for dx, pos, probs, cls in ((0.0, pos_s, p_vis_s, "kp-source"), (offset, pos_t, p_vis_t, "kp-target")):
        for k, (u, v) in enumerate(pos[:, :2] * scale):
            fill = "#888" if probs is None else _colour(probs[k])
            out.append(f'<circle class="{cls}" cx="{u + dx:.1f}" cy="{v:.1f}" r="2.2" fill="{fill}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
