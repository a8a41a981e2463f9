"""Policy plots: the advisory chosen for every intruder placement on a 2-D slice."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .actions import ACTION_LABELS, CLEAR_INDEX, N_ACTIONS
from .container import atomic_write, dump_json
from .kinematics import ALT, HDG, SPD, STATE_WIDTH, VRATE, X, Y
from .simulator import PolicyContractError, check_actions, observe_batch


class Plane(str, Enum):
    HORIZONTAL = "horizontal"  # intruder cross-track (u) vs along-track (v), fixed altitude
    VERTICAL = "vertical"  # intruder range along a bearing (u) vs relative altitude (v)


FORMATS = ("ppm", "svg", "csv", "png")

# index order = combined action index (vertical major: CLIMB, CLEAR, DESCEND)
PALETTE = (
    (31, 119, 180),   # LEFT/CLIMB
    (23, 190, 207),   # CLEAR/CLIMB
    (148, 103, 189),  # RIGHT/CLIMB
    (214, 39, 40),    # LEFT/CLEAR
    (235, 235, 235),  # CLEAR/CLEAR
    (44, 160, 44),    # RIGHT/CLEAR
    (255, 127, 14),   # LEFT/DESCEND
    (188, 189, 34),   # CLEAR/DESCEND
    (140, 86, 75),    # RIGHT/DESCEND
)


@dataclass(frozen=True)
class PlotSpec:
    plane: Plane = Plane.HORIZONTAL
    nx: int = 151
    ny: int = 151
    u_extent: tuple = (-15000.0, 15000.0)
    v_extent: tuple = (-15000.0, 15000.0)
    fmt: str = "ppm"
    # fixed values for everything not on the plane
    rel_alt: float = 0.0
    bearing: float = 0.0
    own_speed: float = 300.0
    intruder_speed: float = 300.0
    intruder_rel_heading: float = math.pi
    own_vrate: float = 0.0
    intruder_vrate: float = 0.0
    prev_action: int = CLEAR_INDEX

    def __post_init__(self):
        object.__setattr__(self, "plane", Plane(self.plane))
        object.__setattr__(self, "u_extent", tuple(float(v) for v in self.u_extent))
        object.__setattr__(self, "v_extent", tuple(float(v) for v in self.v_extent))
        if self.nx < 2 or self.ny < 2:
            raise ValueError("plot resolution must be at least 2 per axis")
        for ext in (self.u_extent, self.v_extent):
            if len(ext) != 2 or not all(map(math.isfinite, ext)) or not ext[0] < ext[1]:
                raise ValueError(f"plot extents must be finite and ordered, got {ext}")
        if self.fmt not in FORMATS:
            raise ValueError(f"unsupported plot format {self.fmt!r}; use one of {FORMATS}")
        if not 0 <= self.prev_action < N_ACTIONS:
            raise ValueError("prev_action must be an action index")

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Cell coordinates; v runs top to bottom (image row order)."""
        return (np.linspace(*self.u_extent, self.nx), np.linspace(*self.v_extent, self.ny)[::-1])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plane"] = self.plane.value
        d["u_extent"], d["v_extent"] = list(self.u_extent), list(self.v_extent)
        return d


@dataclass
class PolicyGrid:
    actions: np.ndarray  # (ny, nx), row 0 at the top
    spec: PlotSpec = field(default_factory=PlotSpec)

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.shape != (self.spec.ny, self.spec.nx):
            raise ValueError("grid shape does not match its spec")
        if self.actions.min() < 0 or self.actions.max() >= N_ACTIONS:
            raise ValueError("grid cells must hold action indices 0..8")


def placement_states(spec: PlotSpec):
    """Own/intruder state rows for every cell (ownship at the origin heading north)."""
    u, v = spec.axes()
    uu, vv = np.meshgrid(u, v)
    n = uu.size
    own = np.zeros((n, STATE_WIDTH))
    intr = np.zeros((n, STATE_WIDTH))
    own[:, SPD], own[:, VRATE], own[:, ALT] = spec.own_speed, spec.own_vrate, 5000.0
    intr[:, SPD], intr[:, VRATE] = spec.intruder_speed, spec.intruder_vrate
    intr[:, HDG] = spec.intruder_rel_heading % (2 * math.pi)
    if spec.plane is Plane.HORIZONTAL:
        intr[:, X], intr[:, Y] = vv.ravel(), uu.ravel()
        intr[:, ALT] = own[:, ALT] + spec.rel_alt
    else:
        intr[:, X] = uu.ravel() * math.cos(spec.bearing)
        intr[:, Y] = uu.ravel() * math.sin(spec.bearing)
        intr[:, ALT] = own[:, ALT] + vv.ravel()
    return own, intr


def policy_grid(policy, spec: PlotSpec) -> PolicyGrid:
    own, intr = placement_states(spec)
    obs = observe_batch(own, intr, np.full(len(own), spec.prev_action))
    try:
        act = check_actions(policy(obs), len(obs))
    except PolicyContractError as exc:
        raw = np.asarray(policy(obs))
        bad = np.flatnonzero((raw < 0) | (raw >= N_ACTIONS)) if raw.shape == (len(obs),) else []
        where = ""
        if len(bad):
            r, c = divmod(int(bad[0]), spec.nx)
            u, v = spec.axes()
            where = f" (first bad cell u={u[c]:.1f} ft, v={v[r]:.1f} ft)"
        raise PolicyContractError(f"{exc}{where}") from exc
    return PolicyGrid(act.reshape(spec.ny, spec.nx), spec)


# ----------------------------------------------------------------------------
# rendering

def render_ppm(grid: PolicyGrid) -> bytes:
    rgb = np.asarray(PALETTE, dtype=np.uint8)[grid.actions]
    head = f"P6\n{grid.spec.nx} {grid.spec.ny}\n255\n".encode("ascii")
    return head + rgb.tobytes()


def render_csv(grid: PolicyGrid) -> bytes:
    u, v = grid.spec.axes()
    lines = ["u_ft,v_ft,action_index,action"]
    for r in range(grid.spec.ny):
        for c in range(grid.spec.nx):
            a = int(grid.actions[r, c])
            lines.append(f"{u[c]!r},{v[r]!r},{a},{ACTION_LABELS[a]}")
    return ("\n".join(lines) + "\n").encode("ascii")


def render_svg(grid: PolicyGrid, cell: int = 4) -> bytes:
    ny, nx = grid.actions.shape
    legend_h = 14 * N_ACTIONS + 8
    w, h = nx * cell, ny * cell + legend_h
    out = ['<?xml version="1.0" encoding="UTF-8"?>',
           f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" '
           f'shape-rendering="crispEdges">']
    for r in range(ny):
        row = grid.actions[r]
        c = 0
        while c < nx:  # merge horizontal runs of one action into one rect
            e = c
            while e + 1 < nx and row[e + 1] == row[c]:
                e += 1
            out.append(f'<rect x="{c * cell}" y="{r * cell}" width="{(e - c + 1) * cell}" '
                       f'height="{cell}" fill="{_hex(PALETTE[row[c]])}"/>')
            c = e + 1
    y0 = ny * cell + 4
    for a in range(N_ACTIONS):
        out.append(f'<rect x="2" y="{y0 + 14 * a}" width="10" height="10" '
                   f'fill="{_hex(PALETTE[a])}" stroke="black" stroke-width="0.5"/>')
        out.append(f'<text x="16" y="{y0 + 14 * a + 9}" font-size="10" '
                   f'font-family="sans-serif">{ACTION_LABELS[a]}</text>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")


def render_png(grid: PolicyGrid) -> bytes:
    """Matplotlib figure with axes in feet and an action legend."""
    import io

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap
    from matplotlib.patches import Patch

    spec = grid.spec
    cmap = ListedColormap([np.array(c) / 255.0 for c in PALETTE])
    fig, ax = plt.subplots(figsize=(6.4, 5.2))
    ax.imshow(grid.actions, cmap=cmap, vmin=-0.5, vmax=N_ACTIONS - 0.5, interpolation="nearest",
              extent=(*spec.u_extent, *spec.v_extent), aspect="auto")
    ax.plot([0], [0], marker="^" if spec.plane is Plane.HORIZONTAL else ">", color="black")
    if spec.plane is Plane.HORIZONTAL:
        ax.set_xlabel("intruder cross-track offset (ft)")
        ax.set_ylabel("intruder along-track offset (ft)")
    else:
        ax.set_xlabel("intruder range along bearing (ft)")
        ax.set_ylabel("intruder relative altitude (ft)")
    present = sorted(set(np.unique(grid.actions).tolist()))
    ax.legend(handles=[Patch(color=np.array(PALETTE[a]) / 255.0, label=ACTION_LABELS[a])
                       for a in present], loc="upper left", bbox_to_anchor=(1.01, 1.0),
              fontsize=8, frameon=False)
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


_RENDERERS = {"ppm": render_ppm, "svg": render_svg, "csv": render_csv, "png": render_png}


def render(grid: PolicyGrid, fmt: str | None = None) -> bytes:
    fmt = fmt or grid.spec.fmt
    if fmt not in _RENDERERS:
        raise ValueError(f"unsupported plot format {fmt!r}; use one of {FORMATS}")
    return _RENDERERS[fmt](grid)


def _hex(rgb) -> str:
    return "#%02x%02x%02x" % tuple(rgb)


def legend_text(spec: PlotSpec) -> str:
    lines = ["action_index  label  rgb"]
    lines += [f"{a}  {ACTION_LABELS[a]}  {PALETTE[a][0]},{PALETTE[a][1]},{PALETTE[a][2]}"
              for a in range(N_ACTIONS)]
    lines.append("")
    lines.append("fixed values: " + dump_json(spec.to_dict()))
    return "\n".join(lines) + "\n"


def write_plot(grid: PolicyGrid, path, also_png: bool = True) -> list[Path]:
    """Write the grid in its spec format plus a legend sidecar (and a PNG figure)."""
    path = Path(path)
    atomic_write(path, render(grid))
    written = [path]
    side = path.with_name(path.name + ".legend.txt")
    atomic_write(side, legend_text(grid.spec))
    written.append(side)
    if also_png and grid.spec.fmt != "png":
        png = path.with_suffix(".png")
        atomic_write(png, render_png(grid))
        written.append(png)
    return written


def grid_difference(a: PolicyGrid, b: PolicyGrid) -> tuple[float, np.ndarray]:
    """Share of cells whose actions differ, and the 9x9 confusion counts (a rows, b cols)."""
    if a.spec != b.spec:
        raise ValueError("grid_difference needs grids built from the same spec")
    conf = np.zeros((N_ACTIONS, N_ACTIONS), dtype=np.int64)
    np.add.at(conf, (a.actions.ravel(), b.actions.ravel()), 1)
    return float(np.mean(a.actions != b.actions)), conf
