"""Symbolic-numeric observability analysis of the self-calibrating VIO system.

The monocular camera-IMU system is modeled as an input-affine system
x' = f0 + f1*a_m + f2*w_m over the state

    [gamma (2), rho, v^B (3), g^B (3), b_g (3), b_a (3),
     vec M_g (9), vec T_s (9), lower M_a (6),
     p_CB (3), q_CB (4), intrinsics (8)]            -> dim 54

with outputs: the projected landmark direction (full distortion polynomial
or the bare direction for the reduced system), the squared gravity magnitude,
and the squared quaternion norm.  Gradients of Lie derivatives stack into
codistributions whose generic ranks decide observability.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .expr import ExprGraph
from .geometry import Transform

FIELD_NAMES = ["f0", "f11", "f12", "f13", "f21", "f22", "f23"]

PINHOLE_RADTAN = "pinhole_radtan"
KANNALA_BRANDT = "kannala_brandt"


class DegeneratePointError(RuntimeError):
    """Sampled evaluation points disagree on the generic rank."""


@dataclass
class VioObservabilitySystem:
    graph: ExprGraph
    dim: int
    model: str
    reduced: bool
    stereo: bool
    fields: dict                      # name -> {state index: Expr}
    outputs: dict                     # name -> [Expr]
    slices: dict                      # block name -> slice into the state

    def output_list(self, include_h2: bool = True):
        items = []
        for name, exprs in self.outputs.items():
            if name == "h2" and not include_h2:
                continue
            for i, e in enumerate(exprs):
                items.append((f"{name}[{i}]", e))
        return items


def _quat_rotation(g: ExprGraph, q):
    """R(q) for a free quaternion (normalized form, rational in q)."""
    w, x, y, z = q
    n2 = w * w + x * x + y * y + z * z
    rows = [
        [w * w + x * x - y * y - z * z, 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), w * w - x * x + y * y - z * z, 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ]
    return [[g.div(e, n2) for e in row] for row in rows]


def _matvec(m, v):
    return [sum(m[i][j] * v[j] for j in range(3)) for i in range(3)]


def _cross(a, b):
    return [a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0]]


def build_vio_system(model: str = PINHOLE_RADTAN, reduced: bool = False,
                     stereo_baseline: Transform | None = None) -> VioObservabilitySystem:
    """Expression-graph system model of the self-calibrating monocular VIO.

    reduced=True replaces the projection output with the bare landmark
    direction and removes the intrinsics from the state (dim 46).  A stereo
    baseline adds a second direction output through a fixed extrinsic.

    The fisheye variant carries the 6-parameter model (two distortion
    coefficients): that is the variant whose parameters are all identifiable
    from second-order derivatives, while higher-degree distortion terms need
    higher orders."""
    if reduced:
        n_intr = 0
    elif model == KANNALA_BRANDT:
        n_intr = 6
    else:
        n_intr = 8
    dim = 46 + n_intr
    g = ExprGraph(dim)
    sl = {"gamma": slice(0, 2), "rho": slice(2, 3), "v": slice(3, 6),
          "g": slice(6, 9), "bg": slice(9, 12), "ba": slice(12, 15),
          "Mg": slice(15, 24), "Ts": slice(24, 33), "Ma": slice(33, 39),
          "p_CB": slice(39, 42), "q_CB": slice(42, 46),
          "intrinsics": slice(46, 46 + n_intr)}

    gamma = [g.var(0), g.var(1)]
    rho = g.var(2)
    v = [g.var(i) for i in range(3, 6)]
    g_b = [g.var(i) for i in range(6, 9)]
    b_g = [g.var(i) for i in range(9, 12)]
    b_a = [g.var(i) for i in range(12, 15)]
    m_g = [[g.var(15 + 3 * i + j) for j in range(3)] for i in range(3)]
    t_s = [[g.var(24 + 3 * i + j) for j in range(3)] for i in range(3)]
    ma_idx = iter(range(33, 39))
    m_a = [[g.zero] * 3 for _ in range(3)]
    for i in range(3):
        for j in range(i + 1):
            m_a[i][j] = g.var(next(ma_idx))
    p_cb = [g.var(i) for i in range(39, 42)]
    q_cb = [g.var(i) for i in range(42, 46)]
    r_cb = _quat_rotation(g, q_cb)

    gamma_bar = [gamma[0], gamma[1], g.one]

    def dynamics(omega_t, a_t, drift: bool):
        """Nonzero entries (dict index -> Expr) for one field column."""
        rw = _matvec(r_cb, omega_t)
        lever = [rho * p_cb[i] - gamma_bar[i] for i in range(3)]
        u = _cross(rw, lever)
        if drift:
            rv = _matvec(r_cb, v)
            u = [u[i] - rho * rv[i] for i in range(3)]
        rows = {
            0: u[0] - gamma[0] * u[2],
            1: u[1] - gamma[1] * u[2],
            2: g.const(-1.0) * rho * u[2],
        }
        vxw = _cross(v, omega_t)
        for i in range(3):
            e = vxw[i] + a_t[i]
            if drift:
                e = e + g_b[i]
            rows[3 + i] = e
        gxw = _cross(g_b, omega_t)
        for i in range(3):
            rows[6 + i] = gxw[i]
        return {k: e for k, e in rows.items()
                if not (e.op == 0 and e.value == 0.0)}

    # affine decomposition of the calibrated rates
    w0 = [sum(m_g[i][j] * (t_s[j][0] * b_a[0] + t_s[j][1] * b_a[1]
                           + t_s[j][2] * b_a[2] - b_g[j]) for j in range(3))
          for i in range(3)]
    a0 = [g.const(-1.0) * sum(m_a[i][j] * b_a[j] for j in range(3)) for i in range(3)]
    fields = {"f0": dynamics(w0, a0, drift=True)}
    for j in range(3):
        w_col = [g.const(-1.0) * sum(m_g[i][k] * t_s[k][j] for k in range(3))
                 for i in range(3)]
        a_col = [m_a[i][j] for i in range(3)]
        fields[f"f1{j + 1}"] = dynamics(w_col, a_col, drift=False)
    for j in range(3):
        fields[f"f2{j + 1}"] = dynamics([m_g[i][j] for i in range(3)],
                                        [g.zero] * 3, drift=False)

    outputs = {}
    if reduced:
        outputs["h1"] = [gamma[0], gamma[1]]
    elif model == PINHOLE_RADTAN:
        fx, fy, cx, cy, k1, k2, p1, p2 = (g.var(46 + i) for i in range(8))
        r2 = gamma[0] * gamma[0] + gamma[1] * gamma[1]
        radial = g.one + k1 * r2 + k2 * r2 * r2
        outputs["h1"] = [
            fx * (gamma[0] * radial + 2.0 * p1 * gamma[0] * gamma[1]
                  + p2 * (r2 + 2.0 * gamma[0] * gamma[0])) + cx,
            fy * (gamma[1] * radial + p1 * (r2 + 2.0 * gamma[1] * gamma[1])
                  + 2.0 * p2 * gamma[0] * gamma[1]) + cy,
        ]
    elif model == KANNALA_BRANDT:
        fx, fy, cx, cy, k1, k2 = (g.var(46 + i) for i in range(6))
        r2 = gamma[0] * gamma[0] + gamma[1] * gamma[1]
        s = g.pow(r2, 0.5)
        theta = g.atan(s)
        t2 = theta * theta
        r_d = theta * (g.one + t2 * (k1 + t2 * k2))
        outputs["h1"] = [fx * r_d * gamma[0] / s + cx,
                         fy * r_d * gamma[1] / s + cy]
    else:
        raise ValueError(f"unknown camera model {model!r}")

    outputs["h2"] = [g_b[0] * g_b[0] + g_b[1] * g_b[1] + g_b[2] * g_b[2]]
    outputs["h3"] = [q_cb[0] * q_cb[0] + q_cb[1] * q_cb[1]
                     + q_cb[2] * q_cb[2] + q_cb[3] * q_cb[3]]

    stereo = stereo_baseline is not None
    if stereo:
        r10 = stereo_baseline.rotation
        t10 = stereo_baseline.translation
        pt = [sum(g.const(r10[i, j]) * gamma_bar[j] for j in range(3))
              + rho * g.const(t10[i]) for i in range(3)]
        outputs["h4"] = [pt[0] / pt[2], pt[1] / pt[2]]

    return VioObservabilitySystem(graph=g, dim=dim, model=model, reduced=reduced,
                                  stereo=stereo, fields=fields, outputs=outputs,
                                  slices=sl)


def lie_derivative(system: VioObservabilitySystem, h, field_name: str):
    """L^1 of a scalar output along one field column (symbolic)."""
    grad = system.graph.gradient(h)
    field = system.fields[field_name]
    g = system.graph
    total = g.zero
    for i, f_i in field.items():
        gi = grad.get(i)
        if gi is not None:
            total = g.add(total, g.mul(gi, f_i))
    return total


def lie_gradient(system: VioObservabilitySystem, spec: list, output: str,
                 component: int = 0):
    """Symbolic gradient row of L^k h, k = len(spec), along the given ordered
    field list (e.g. ["f0", "f11"])."""
    h = system.outputs[output][component]
    for name in spec:
        h = lie_derivative(system, h, name)
    grad = system.graph.gradient(h)
    return grad, h


@dataclass
class Codistribution:
    dim: int
    rows: list = field(default_factory=list)        # (tag, grad dict)
    matrices: list = field(default_factory=list)    # one (m, dim) per point

    def tags(self):
        return [t for t, _ in self.rows]


def sample_generic_points(system: VioObservabilitySystem, rng, n_points: int) -> np.ndarray:
    """Points drawn from nondegenerate ranges, shape (dim, n_points)."""
    pts = np.empty((system.dim, n_points))
    for k in range(n_points):
        x = np.empty(system.dim)
        x[0:2] = rng.uniform(-0.5, 0.5, 2)
        x[2] = rng.uniform(0.2, 2.0)
        x[3:6] = rng.uniform(-1.0, 1.0, 3)
        direction = rng.normal(size=3)
        x[6:9] = 9.81 * direction / np.linalg.norm(direction)
        x[9:12] = rng.uniform(-0.05, 0.05, 3)
        x[12:15] = rng.uniform(-0.2, 0.2, 3)
        x[15:24] = (np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))).ravel()
        x[24:33] = rng.uniform(-0.05, 0.05, 9)
        ma = np.tril(np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3)))
        x[33:39] = [ma[0, 0], ma[1, 0], ma[1, 1], ma[2, 0], ma[2, 1], ma[2, 2]]
        x[39:42] = rng.uniform(-0.3, 0.3, 3)
        q = rng.normal(size=4)
        x[42:46] = q / np.linalg.norm(q) * rng.uniform(0.7, 1.3)
        if system.dim > 46:
            x[46:48] = rng.uniform(300.0, 400.0, 2)
            x[48:50] = rng.uniform(200.0, 400.0, 2)
            x[50:system.dim] = rng.uniform(-0.2, 0.2, system.dim - 50)
        pts[:, k] = x
    return pts


def evaluate_rows(system: VioObservabilitySystem, rows, points: np.ndarray,
                  cache: dict | None = None) -> np.ndarray:
    """Numeric (n_rows, dim, n_points) stack of gradient rows."""
    g = system.graph
    roots, locs = [], []
    for r, (tag, grad) in enumerate(rows):
        for i, e in grad.items():
            roots.append(e)
            locs.append((r, i))
    out = np.zeros((len(rows), system.dim, points.shape[1]))
    if roots:
        values = g.evaluate(roots, points, cache=cache)
        for (r, i), val in zip(locs, values):
            out[r, i, :] = val
    return out


def matrix_rank(matrix: np.ndarray, sv_threshold: float = 1e-8) -> int:
    """Rank via singular values after row normalization (near-zero rows kept
    unnormalized so they cannot lift the rank)."""
    if matrix.shape[0] == 0:
        return 0
    norms = np.linalg.norm(matrix, axis=1)
    scale = norms.max() if norms.size else 0.0
    if scale == 0.0:
        return 0
    keep = norms > 1e-12 * scale
    m = matrix.copy()
    m[keep] /= norms[keep, None]
    sv = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(sv > sv_threshold * sv[0]))


@dataclass
class RankResult:
    ranks_per_order: list
    stop_order: int
    codistribution: Codistribution
    points: np.ndarray


def incremental_rank(system: VioObservabilitySystem, rng=None, max_order: int = 3,
                     n_points: int = 5, include_h2: bool = True,
                     points: np.ndarray | None = None,
                     stop_at_full_rank: bool = True,
                     max_retries: int = 3) -> RankResult:
    """Codistribution ranks per Lie-derivative order at generic points.

    The incremental build stops when the rank stalls between orders or hits
    the state dimension.  All sampled points must agree on every rank; points
    that disagree with the majority are resampled a bounded number of times
    before the run is declared degenerate."""
    if points is None:
        if rng is None:
            rng = np.random.default_rng(12345)
        points = sample_generic_points(system, rng, n_points)

    for _ in range(max_retries + 1):
        result = _rank_once(system, points, max_order, include_h2, stop_at_full_rank)
        if result is not None:
            return result
        points = sample_generic_points(system, rng or np.random.default_rng(0),
                                       points.shape[1])
    raise DegeneratePointError("sampled points kept disagreeing on the rank")


def _rank_once(system, points, max_order, include_h2, stop_at_full_rank):
    g = system.graph
    cache = {}
    codist = Codistribution(dim=system.dim)
    n_pts = points.shape[1]
    stacks = [np.zeros((0, system.dim)) for _ in range(n_pts)]
    ranks_per_order = []

    def add_rows(rows):
        nonlocal stacks
        numeric = evaluate_rows(system, rows, points, cache)
        codist.rows.extend(rows)
        stacks = [np.vstack([stacks[k], numeric[:, :, k]]) for k in range(n_pts)]

    def current_ranks():
        return [matrix_rank(s) for s in stacks]

    # order 0
    level = []   # (tag, scalar expr, grad dict)
    rows0 = []
    for tag, h in system.output_list(include_h2):
        grad = g.gradient(h)
        rows0.append((f"L0 {tag}", grad))
        level.append((tag, h, grad))
    add_rows(rows0)
    prev_rank = None
    order = 0
    while order < max_order:
        order += 1
        next_level = []
        done = False
        for tag, h, grad in level:
            batch_rows = []
            for fname in FIELD_NAMES:
                fcol = system.fields[fname]
                total = g.zero
                for i, f_i in fcol.items():
                    gi = grad.get(i)
                    if gi is not None:
                        total = g.add(total, g.mul(gi, f_i))
                new_tag = f"{tag};{fname}"
                new_grad = g.gradient(total)
                batch_rows.append((f"L{order} {new_tag}", new_grad))
                next_level.append((new_tag, total, new_grad))
            add_rows(batch_rows)
            if stop_at_full_rank:
                ranks = current_ranks()
                if min(ranks) == system.dim:
                    done = True
                    break
        ranks = current_ranks()
        if len(set(ranks)) != 1:
            return None
        ranks_per_order.append(ranks[0])
        if done or ranks[0] == system.dim:
            break
        if prev_rank is not None and ranks[0] == prev_rank:
            break
        prev_rank = ranks[0]
        level = next_level

    codist.matrices = stacks
    return RankResult(ranks_per_order=ranks_per_order, stop_order=order,
                      codistribution=codist, points=points)


def observable_component_test(matrix: np.ndarray, column: int) -> bool:
    """True iff removing the column drops the rank by exactly one."""
    full = matrix_rank(matrix)
    without = matrix_rank(np.delete(matrix, column, axis=1))
    return full - without == 1


def unit_covector_test(matrix: np.ndarray, column: int) -> bool:
    """True iff the unit covector of the column lies in the row span."""
    unit = np.zeros((1, matrix.shape[1]))
    unit[0, column] = 1.0
    return matrix_rank(np.vstack([matrix, unit])) == matrix_rank(matrix)


def scale_nullspace(point: np.ndarray) -> np.ndarray:
    """The metric-scale direction of the gravity-norm-free system: blocks
    [0_2, -rho, v, g, 0_24, lower M_a, p_CB, 0_...] at the given point."""
    n = np.zeros(point.shape[0])
    n[2] = -point[2]
    n[3:6] = point[3:6]
    n[6:9] = point[6:9]
    n[33:39] = point[33:39]
    n[39:42] = point[39:42]
    return n


def nullspace_residual(matrix: np.ndarray, direction: np.ndarray) -> float:
    denom = np.linalg.norm(matrix) * np.linalg.norm(direction)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(matrix @ direction) / denom)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class RankReport:
    full_ranks: list
    reduced_ranks: list
    reduced_stop_order: int
    intrinsics_observable: dict      # model -> list[bool] (8 entries)
    no_h2_rank: int
    no_h2_deficit: int
    nullspace_residuals: list
    stereo_rank: int
    dim_full: int = 54
    dim_reduced: int = 46

    def passed(self) -> bool:
        return (self.full_ranks[:2] == [18, 47]
                and self.reduced_ranks[-1] == 46
                and all(all(v) for v in self.intrinsics_observable.values())
                and self.no_h2_deficit == 1
                and max(self.nullspace_residuals) < 1e-8
                and self.stereo_rank == 46)

    def intrinsics_all_observable(self) -> bool:
        return all(all(v) for v in self.intrinsics_observable.values())

    def text(self) -> str:
        lines = ["observability rank report", "=" * 34]
        lines.append(f"full system dim {self.dim_full} "
                     f"rank(O1)={self.full_ranks[0]} rank(O2)={self.full_ranks[1]}")
        lines.append(f"reduced system dim {self.dim_reduced} ranks per order "
                     f"{self.reduced_ranks} (stopped at order {self.reduced_stop_order})")
        for model, flags in self.intrinsics_observable.items():
            lines.append(f"intrinsics observable at order 2 ({model}): "
                         f"{sum(flags)}/{len(flags)}")
        lines.append(f"without gravity norm: rank {self.no_h2_rank} "
                     f"(deficit {self.no_h2_deficit})")
        lines.append("scale nullspace residuals: "
                     + ", ".join(f"{r:.3e}" for r in self.nullspace_residuals))
        lines.append(f"stereo baseline, no gravity norm: rank {self.stereo_rank} "
                     f"of {self.dim_reduced}")
        lines.append(f"PASS: {self.passed()}")
        return "\n".join(lines) + "\n"

    def csv_rows(self):
        rows = [("full_rank_o1", self.full_ranks[0]),
                ("full_rank_o2", self.full_ranks[1]),
                ("reduced_rank_final", self.reduced_ranks[-1]),
                ("reduced_stop_order", self.reduced_stop_order),
                ("no_h2_rank", self.no_h2_rank),
                ("no_h2_deficit", self.no_h2_deficit),
                ("stereo_no_h2_rank", self.stereo_rank),
                ("max_nullspace_residual", max(self.nullspace_residuals))]
        for model, flags in self.intrinsics_observable.items():
            rows.append((f"intrinsics_observable_{model}", sum(flags)))
        return rows


def rank_report(seed: int = 12345, n_points: int = 5,
                baseline: float = 0.11) -> RankReport:
    """All rank results of the analysis at seeded generic points."""
    rng = np.random.default_rng(seed)

    full = build_vio_system(PINHOLE_RADTAN)
    res_full = incremental_rank(full, rng, max_order=2, n_points=n_points,
                                stop_at_full_rank=False)

    intrinsics_obs = {}
    for model, system, res in [(PINHOLE_RADTAN, full, res_full), (KANNALA_BRANDT, None, None)]:
        if system is None:
            system = build_vio_system(KANNALA_BRANDT)
            res = incremental_rank(system, rng, max_order=2, n_points=n_points,
                                   stop_at_full_rank=False)
        flags = []
        for col in range(46, system.dim):
            ok = all(observable_component_test(m, col)
                     for m in res.codistribution.matrices)
            flags.append(ok)
        intrinsics_obs[model] = flags

    # scale ambiguity without the gravity-norm output
    res_no_h2 = incremental_rank(full, rng, max_order=2, n_points=n_points,
                                 include_h2=False, stop_at_full_rank=False,
                                 points=res_full.points)
    no_h2_rank = res_no_h2.ranks_per_order[-1]
    residuals = []
    for k, m in enumerate(res_no_h2.codistribution.matrices):
        direction = scale_nullspace(res_no_h2.points[:, k])
        residuals.append(nullspace_residual(m, direction))

    reduced = build_vio_system(reduced=True)
    res_reduced = incremental_rank(reduced, rng, max_order=3, n_points=n_points)

    stereo = build_vio_system(reduced=True,
                              stereo_baseline=Transform(np.eye(3),
                                                        np.array([baseline, 0.0, 0.0])))
    res_stereo = incremental_rank(stereo, rng, max_order=3, n_points=n_points,
                                  include_h2=False)

    return RankReport(
        full_ranks=res_full.ranks_per_order,
        reduced_ranks=res_reduced.ranks_per_order,
        reduced_stop_order=res_reduced.stop_order,
        intrinsics_observable=intrinsics_obs,
        no_h2_rank=no_h2_rank,
        no_h2_deficit=res_full.ranks_per_order[-1] - no_h2_rank,
        nullspace_residuals=residuals,
        stereo_rank=res_stereo.ranks_per_order[-1])


def write_rank_report(report: RankReport, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "rank_report.txt"), "w", newline="\n") as f:
        f.write(report.text())
    from .dataset import write_csv
    write_csv(os.path.join(out_dir, "rank_report.csv"), ["name", "value"],
              report.csv_rows())


# ---------------------------------------------------------------------------
# empirical time-parameter identifiability (runs the full pipeline)


def time_parameter_experiment(profile: str, duration_s: float = 90.0,
                              seed: int = 7, overrides: dict | None = None) -> dict:
    """sigma(t_d)/sigma(t_r) reduction ratios of filter runs under a motion
    profile: 'general' (wavy circle), 'constant' (constant body-frame
    inputs), or 'static' (standstill)."""
    from .config import merge_config
    from .runner import run_filter
    from .simulator import run_scenario

    kind = {"general": "wavy_circle", "constant": "constant_circle",
            "static": "rest"}[profile]
    user = {"scenario": {"kind": kind, "duration_s": duration_s}}
    if overrides:
        import copy
        user = copy.deepcopy(user)
        for key, value in overrides.items():
            node = user
            parts = key.split(".")
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
    cfg = merge_config(user)
    dataset = run_scenario(cfg, seed)
    table, _ = run_filter(dataset, cfg, seed)
    out = {}
    for name in ("cam0_td", "cam0_tr"):
        sig = table[f"sigma_{name}"]
        out[name] = float(sig[-1] / sig[0])
    return out
