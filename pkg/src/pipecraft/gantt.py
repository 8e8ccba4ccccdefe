"""Static SVG Gantt rendering of a simulated timeline: one row per actor,
task blocks colored by direction, transfers as a thin band under each row."""
from __future__ import annotations

from pipecraft.simulator import SimReport

COLORS = {"fwd": "#4C78A8", "bwd": "#59A14F", "aux": "#9D9D9D", "comm": "#F28E2B"}
ROW_H = 34
COMM_H = 8
PAD = 4
LABEL_W = 64


def render_svg(report: SimReport, width_px: int = 960) -> str:
    P = report.num_actors
    span = max(report.step_time_s, 1e-12)
    scale = (width_px - LABEL_W - 2 * PAD) / span
    height = P * (ROW_H + COMM_H + PAD) + 2 * PAD + 16

    def x(t: float) -> float:
        return LABEL_W + PAD + t * scale

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" '
        f'height="{height}" font-family="monospace" font-size="10">',
        f'<rect width="{width_px}" height="{height}" fill="#FAFAFA"/>',
    ]
    for a in range(P):
        top = PAD + a * (ROW_H + COMM_H + PAD)
        parts.append(f'<g class="actor-row" data-actor="{a}">')
        parts.append(f'<text x="{PAD}" y="{top + ROW_H / 2 + 3}">actor {a}</text>')
        parts.append(f'<rect x="{x(0)}" y="{top}" width="{span * scale:.2f}" '
                     f'height="{ROW_H}" fill="#EFEFEF"/>')
        for e in report.events:
            if e.actor != a or e.end <= e.start:
                continue
            w = (e.end - e.start) * scale
            if e.kind == "comm":
                parts.append(
                    f'<rect class="blk comm" x="{x(e.start):.2f}" y="{top + ROW_H}" '
                    f'width="{w:.2f}" height="{COMM_H}" fill="{COLORS["comm"]}">'
                    f'<title>{e.label}</title></rect>')
            else:
                parts.append(
                    f'<rect class="blk {e.kind}" x="{x(e.start):.2f}" y="{top + 1}" '
                    f'width="{w:.2f}" height="{ROW_H - 2}" fill="{COLORS[e.kind]}" '
                    f'stroke="#FFFFFF" stroke-width="0.5">'
                    f'<title>{e.label} [{e.start:.3g}, {e.end:.3g}]</title></rect>')
        parts.append("</g>")
    axis_y = height - 12
    parts.append(f'<text x="{x(0)}" y="{axis_y}">0</text>')
    parts.append(f'<text x="{x(span) - 40}" y="{axis_y}">{span:.4g}s</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_svg(report: SimReport, path, width_px: int = 960) -> None:
    with open(path, "w") as f:
        f.write(render_svg(report, width_px))
        f.write("\n")
