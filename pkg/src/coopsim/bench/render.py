"""Static bird's-eye-view rendering of recorded traces."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Polygon  # noqa: E402

from ..geometry import Pose, relative_points  # noqa: E402
from ..sim.episode import TraceRecord  # noqa: E402
from ..sim.world import rect_corners  # noqa: E402

ROLE_COLORS = {"ego": "#7f7f7f", "occluder": "#f28e2b", "collider": "#d62728", "parked": "#bab0ac",
               "background": "#4e79a7"}
VIEW = 40.0


def parse_frames(spec: str) -> range:
    """``"A..B"`` is the half-open range [A, B); a single number selects one frame."""
    if ".." in spec:
        a, b = spec.split("..", 1)
        return range(int(a), int(b))
    i = int(spec)
    return range(i, i + 1)


def _role_color(info: dict) -> str:
    role = info.get("role", "background")
    if role == "background" and not info.get("networked", False):
        return "#9ecae9"
    return ROLE_COLORS.get(role, "#4e79a7")


def _draw_frame(trace: TraceRecord, i: int, path: Path) -> None:
    f = trace.frames[i]
    head = trace.header
    ego_id = trace.ego_id
    me = f.vehicle(ego_id)
    ego_pose = Pose(*me.pose)
    fig, axes = plt.subplots(1, 3, figsize=(12, 4), dpi=80)

    ax = axes[0]
    for r in head.get("statics", []):
        ax.add_patch(Polygon(rect_corners(r[0], r[1], r[2], r[3], r[4]), closed=True, fc="#d9d9d9", ec="none"))
    for v in f.vehicles:
        info = head["vehicles"].get(str(v.vid), {})
        hl, hw = info.get("half_extents", (2.25, 0.9))
        ax.add_patch(Polygon(rect_corners(v.pose[0], v.pose[1], hl, hw, v.pose[3]), closed=True,
                             fc=_role_color(info), ec="k", lw=0.5))
    if len(f.plan):
        ax.scatter(f.plan[:, 0], f.plan[:, 1], c=np.linspace(1, 0, len(f.plan)), cmap="winter", s=6, zorder=3)
    ax.set_xlim(me.pose[0] - VIEW, me.pose[0] + VIEW)
    ax.set_ylim(me.pose[1] - VIEW, me.pose[1] + VIEW)
    ax.set_title(f"frame {f.frame}  t={f.frame * head.get('dt', 0.1):.1f}s")

    for ax in axes[1:]:
        ax.set_xlim(-VIEW, VIEW)
        ax.set_ylim(-VIEW, VIEW)
        ax.scatter([0], [0], marker="^", c=ROLE_COLORS["ego"], s=30)
    if f.ego_points is None:
        for ax in axes[1:]:
            ax.text(0, 0, "no observation recorded", ha="center", va="center", fontsize=9)
    else:
        axes[1].scatter(f.ego_points[:, 0], f.ego_points[:, 1], s=2, c="k")
        axes[2].scatter(f.ego_points[:, 0], f.ego_points[:, 1], s=2, c="k")
        for n in f.neighbors:
            pts = relative_points(n.points, n.pose, ego_pose)
            axes[2].scatter(pts[:, 0], pts[:, 1], s=2, c="#4e79a7", alpha=0.5)
            kp = relative_points(n.message.keypoints, n.pose, ego_pose)
            axes[2].scatter(kp[:, 0], kp[:, 1], s=18, marker="x", c="#d62728")
    axes[1].set_title("ego LiDAR")
    axes[2].set_title(f"fused ({len(f.neighbors)} messages)")
    for ax in axes:
        ax.set_aspect("equal")
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def render_bev(trace: TraceRecord, frames, out_dir) -> list[Path]:
    """PNG per selected frame: world BEV, ego LiDAR BEV, fused BEV. Empty selection writes nothing."""
    sel = parse_frames(frames) if isinstance(frames, str) else (
        range(frames, frames + 1) if isinstance(frames, int) else frames)
    n = len(trace.frames)
    for i in sel:
        if not 0 <= i < n:
            raise IndexError(f"frame {i} out of range: trace has {n} frames")
    out = []
    if len(sel) == 0:
        return out
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    for i in sel:
        p = d / f"frame_{i:04d}.png"
        _draw_frame(trace, i, p)
        out.append(p)
    return out
