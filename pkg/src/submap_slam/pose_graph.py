"""Robust pose-graph optimization with dense surface terms and a line process.

Nodes are per-submap pose corrections (node 0 gauge-fixed to identity).
Odometry edges carry identity constraints between consecutive submaps; loop
edges carry registered constraints with a jointly optimized weight in [0, 1]
that prunes outliers in a first stage before a final weighted-off re-run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, se3_exp
from .pointcloud import PointCloud

GRAPH_FORMAT_VERSION = 1


@dataclass
class CorrespondenceSet:
    """Pairs (p from the source surface, q from the target), world coordinates."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 3)
        if len(self.p) != len(self.q):
            raise ValueError("pair arrays differ in length")

    def __len__(self):
        return len(self.p)

    @staticmethod
    def empty() -> "CorrespondenceSet":
        return CorrespondenceSet(np.zeros((0, 3)), np.zeros((0, 3)))


def build_correspondence_set(s_i: PointCloud, s_j: PointCloud, x: Pose,
                             eps: float) -> CorrespondenceSet:
    """Match each p in S_i whose transformed X∘p has a neighbor in S_j within eps."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if len(s_i) == 0 or len(s_j) == 0:
        return CorrespondenceSet.empty()
    moved = x.apply(s_i.positions)
    dist, nn = cKDTree(s_j.positions).query(moved, k=1)
    mask = dist <= eps
    return CorrespondenceSet(s_i.positions[mask], s_j.positions[nn[mask]])


def edge_residual(t_s: Pose, t_t: Pose, x: Pose, corr: CorrespondenceSet):
    """Sum of squared distances || T_s p - T_t X p ||² over the stored pairs.

    Returns (value, degenerate_flag); an empty set is 0 and flagged.
    """
    if len(corr) == 0:
        return 0.0, True
    a = t_s.apply(corr.p)
    b = t_t.apply(x.apply(corr.p))
    return float(np.sum((a - b) ** 2)), False


def line_process_weight(residual: float, mu: float) -> float:
    """Closed-form argmin over l of l*r + mu*(sqrt(l) - 1)²."""
    if mu <= 0:
        raise ValueError("mu must be positive")
    if residual < 0:
        raise ValueError("residual must be non-negative")
    return (mu / (mu + residual)) ** 2


@dataclass
class PgoParams:
    loop_weight: float = 5.0        # lambda
    mu_factor: float = 0.04         # mu = mu_factor * kappa
    eps: float = 0.05
    l_min: float = 0.25
    mu_global: bool = False         # kappa averaged over all loop edges instead of per edge
    min_corr: int = 25              # below this mean cardinality an edge is degenerate
    lm_damping_init: float = 1e-4
    max_outer_iterations: int = 50
    max_lm_iterations: int = 25
    rel_tol: float = 1e-6

    def __post_init__(self):
        if self.loop_weight <= 0 or self.mu_factor <= 0:
            raise ValueError("loop_weight and mu_factor must be positive")
        if not 0.0 < self.l_min < 1.0:
            raise ValueError("l_min must be in (0, 1)")


@dataclass
class LoopEdge:
    s: int
    t: int
    constraint: Pose                  # X = T_st
    corr_fwd: CorrespondenceSet       # pairs from S_s, residual T_s p - T_t X p
    corr_bwd: CorrespondenceSet       # pairs from S_t, residual T_t q - T_s X⁻¹ q
    weight: float = 1.0
    fitness: float = 0.0

    @property
    def kappa(self) -> float:
        return 0.5 * (len(self.corr_fwd) + len(self.corr_bwd))


@dataclass
class OdometryEdge:
    s: int
    t: int
    corr_fwd: CorrespondenceSet
    corr_bwd: CorrespondenceSet


@dataclass
class PoseGraph:
    node_ids: list = field(default_factory=list)
    corrections: dict = field(default_factory=dict)   # submap id -> Pose
    odometry_edges: list = field(default_factory=list)
    loop_edges: list = field(default_factory=list)

    def add_node(self, submap_id: int) -> None:
        if submap_id in self.corrections:
            return
        self.node_ids.append(submap_id)
        self.corrections[submap_id] = Pose.identity()

    def add_odometry_edge(self, edge: OdometryEdge) -> None:
        if edge.t != edge.s + 1:
            raise ValueError("odometry edges must connect consecutive submaps")
        self.odometry_edges.append(edge)

    def add_loop_edge(self, edge: LoopEdge) -> None:
        if abs(edge.s - edge.t) <= 1:
            raise ValueError("loop edges must connect non-adjacent submaps")
        self.loop_edges.append(edge)


@dataclass
class PgoReport:
    objective_trace: list
    stage2_trace: list
    pruned_edges: list
    converged: bool
    warning: str = ""


class _Problem:
    """Dense LM solver state for one optimization stage."""

    def __init__(self, graph: PoseGraph, loop_edges, params: PgoParams):
        self.params = params
        self.ids = sorted(graph.node_ids)
        if not self.ids:
            raise ValueError("empty graph")
        self.fixed = self.ids[0]
        present = set(self.ids)
        for e in graph.odometry_edges:
            if e.s not in present or e.t not in present:
                raise ValueError("odometry edge references missing node")
        # connectivity through odometry edges
        reach = {self.fixed}
        edges = [(e.s, e.t) for e in graph.odometry_edges]
        changed = True
        while changed:
            changed = False
            for s, t in edges:
                if s in reach and t not in reach:
                    reach.add(t)
                    changed = True
                elif t in reach and s not in reach:
                    reach.add(s)
                    changed = True
        if reach != present:
            raise ValueError("graph not connected through odometry edges")
        self.free = [i for i in self.ids if i != self.fixed]
        self.col = {nid: 6 * k for k, nid in enumerate(self.free)}
        self.odometry = graph.odometry_edges
        self.loops = loop_edges

    @staticmethod
    def _directed_terms(edge):
        """Yield (node_a, node_b, pts_a, pts_b) with residual T_a pts_a - T_b pts_b."""
        if isinstance(edge, OdometryEdge):
            x = Pose.identity()
        else:
            x = edge.constraint
        if len(edge.corr_fwd):
            yield edge.s, edge.t, edge.corr_fwd.p, x.apply(edge.corr_fwd.p)
        if len(edge.corr_bwd):
            yield edge.t, edge.s, edge.corr_bwd.p, x.inverse().apply(edge.corr_bwd.p)

    def edge_value(self, corrections, edge) -> float:
        total = 0.0
        for na, nb, pa, pb in self._directed_terms(edge):
            a = corrections[na].apply(pa)
            b = corrections[nb].apply(pb)
            total += float(np.sum((a - b) ** 2))
        return total

    def objective(self, corrections, weights, mus) -> float:
        val = sum(self.edge_value(corrections, e) for e in self.odometry)
        lam = self.params.loop_weight
        for k, e in enumerate(self.loops):
            l = weights[k]
            val += lam * (l * self.edge_value(corrections, e)
                          + mus[k] * (np.sqrt(l) - 1.0) ** 2)
        return val

    def _accumulate(self, h, g, corrections, edge, weight):
        for na, nb, pa, pb in self._directed_terms(edge):
            a = corrections[na].apply(pa)
            b = corrections[nb].apply(pb)
            r = (a - b)
            n = len(r)
            ja = np.zeros((n, 3, 6))
            jb = np.zeros((n, 3, 6))
            # d(exp(xi) y)/d xi at 0 = [-skew(y) | I], xi = (omega, v)
            for mat, y, sign in ((ja, a, 1.0), (jb, b, -1.0)):
                mat[:, 0, 1] = sign * y[:, 2]
                mat[:, 0, 2] = -sign * y[:, 1]
                mat[:, 1, 0] = -sign * y[:, 2]
                mat[:, 1, 2] = sign * y[:, 0]
                mat[:, 2, 0] = sign * y[:, 1]
                mat[:, 2, 1] = -sign * y[:, 0]
                mat[:, 0, 3] = sign
                mat[:, 1, 4] = sign
                mat[:, 2, 5] = sign
            blocks = []
            if na != self.fixed:
                blocks.append((self.col[na], ja))
            if nb != self.fixed:
                blocks.append((self.col[nb], jb))
            for ca, jma in blocks:
                ga = weight * np.einsum("nij,ni->j", jma, r)
                g[ca:ca + 6] += ga
                for cb, jmb in blocks:
                    hab = weight * np.einsum("nij,nik->jk", jma, jmb)
                    h[ca:ca + 6, cb:cb + 6] += hab

    def lm(self, corrections, weights, mus, trace):
        """LM on pose corrections with the line process held fixed."""
        params = self.params
        damping = params.lm_damping_init
        obj = self.objective(corrections, weights, mus)
        dim = 6 * len(self.free)
        warning = ""
        for _ in range(params.max_lm_iterations):
            if dim == 0:
                break
            h = np.zeros((dim, dim))
            g = np.zeros(dim)
            for e in self.odometry:
                self._accumulate(h, g, corrections, e, 1.0)
            for k, e in enumerate(self.loops):
                w = params.loop_weight * weights[k]
                if w > 0:
                    self._accumulate(h, g, corrections, e, w)
            accepted = False
            for _ in range(12):
                try:
                    delta = np.linalg.solve(h + damping * np.diag(np.maximum(np.diag(h), 1e-12)), -g)
                except np.linalg.LinAlgError:
                    damping *= 10
                    continue
                cand = dict(corrections)
                for nid in self.free:
                    c = self.col[nid]
                    xi = delta[c:c + 6]
                    cand[nid] = se3_exp(np.concatenate([xi[:3], xi[3:]])).compose(corrections[nid])
                cand_obj = self.objective(cand, weights, mus)
                if cand_obj <= obj + 1e-15:
                    corrections.update(cand)
                    damping = max(damping * 0.5, 1e-12)
                    rel = (obj - cand_obj) / max(obj, 1e-300)
                    obj = cand_obj
                    trace.append(obj)
                    accepted = True
                    break
                damping *= 10
            if not accepted:
                warning = "LM step rejected at max damping; best-so-far returned"
                break
            if rel < params.rel_tol:
                break
        return obj, warning


def optimize(graph: PoseGraph, params: PgoParams):
    """Two-stage robust PGO.

    Stage 1 alternates the closed-form line-process update with LM steps on
    the pose corrections, then prunes loop edges with weight below l_min
    (degenerate edges are pruned outright). Stage 2 re-optimizes with the
    survivors at fixed weight 1. Returns (corrections, weights, report).
    """
    live = []
    weights_out = {}
    pruned = []
    for e in graph.loop_edges:
        if e.kappa < params.min_corr:
            weights_out[(e.s, e.t)] = 0.0
            pruned.append((e.s, e.t, "degenerate correspondence set"))
        else:
            live.append(e)
    problem = _Problem(graph, live, params)
    corrections = {nid: graph.corrections[nid] for nid in graph.node_ids}

    kappas = [e.kappa for e in live]
    if params.mu_global and kappas:
        mean_kappa = float(np.mean(kappas))
        mus = [params.mu_factor * mean_kappa] * len(live)
    else:
        mus = [params.mu_factor * k for k in kappas]

    weights = [1.0] * len(live)
    trace = []
    warning = ""
    prev_obj = np.inf
    for _ in range(params.max_outer_iterations):
        # closed-form line process update (exact minimizer for fixed poses)
        for k, e in enumerate(live):
            r = problem.edge_value(corrections, e)
            weights[k] = line_process_weight(r, mus[k])
        trace.append(problem.objective(corrections, weights, mus))
        obj, warn = problem.lm(corrections, weights, mus, trace)
        warning = warning or warn
        if prev_obj - obj < params.rel_tol * max(prev_obj, 1e-300):
            break
        prev_obj = obj

    survivors = []
    for k, e in enumerate(live):
        weights_out[(e.s, e.t)] = weights[k]
        if weights[k] < params.l_min:
            pruned.append((e.s, e.t, f"line process weight {weights[k]:.4f} < l_min"))
        else:
            survivors.append(e)

    # Stage 2: survivors at fixed weight 1
    stage2 = _Problem(graph, survivors, params)
    trace2 = []
    w2 = [1.0] * len(survivors)
    mu2 = [1.0] * len(survivors)  # unused: weights fixed, mu term constant
    prev_obj = np.inf
    for _ in range(params.max_outer_iterations):
        obj, warn = stage2.lm(corrections, w2, mu2, trace2)
        warning = warning or warn
        if prev_obj - obj < params.rel_tol * max(prev_obj, 1e-300):
            break
        prev_obj = obj

    report = PgoReport(trace, trace2, pruned, converged=not warning, warning=warning)
    return corrections, weights_out, report


def apply_corrections(submaps, trajectory, corrections: dict):
    """Correct every submap (points + poses) and re-read the trajectory.

    Trajectory poses are replaced by the corrected frame poses stored in the
    owning submaps; frames not owned by any submap keep their old pose.
    """
    from .geometry import Trajectory
    from .submap import apply_correction

    for sm in submaps:
        if sm.id not in corrections:
            raise ValueError(f"missing correction for submap {sm.id}")
        apply_correction(sm, corrections[sm.id])
    frame_pose = {}
    for sm in submaps:
        frame_pose.update(sm.frame_poses)
    poses = [frame_pose.get(fid, pose) for fid, pose in zip(trajectory.frame_ids, trajectory.poses)]
    return Trajectory(list(trajectory.frame_ids), list(trajectory.timestamps), poses)


def rebase_graph(graph: PoseGraph, corrections: dict) -> None:
    """Re-express stored constraints in the corrected world frame.

    After corrections T_s are applied to the submaps, edge points move with
    them (p -> T_s p) and each loop constraint becomes T_t ∘ X ∘ T_s⁻¹; node
    corrections reset to identity so residuals stay consistent.
    """
    def move(corr: CorrespondenceSet, ts: Pose, tt: Pose) -> CorrespondenceSet:
        if len(corr) == 0:
            return corr
        return CorrespondenceSet(ts.apply(corr.p), tt.apply(corr.q))

    for e in graph.odometry_edges:
        ts, tt = corrections[e.s], corrections[e.t]
        e.corr_fwd = move(e.corr_fwd, ts, tt)
        e.corr_bwd = move(e.corr_bwd, tt, ts)
    for e in graph.loop_edges:
        ts, tt = corrections[e.s], corrections[e.t]
        e.corr_fwd = move(e.corr_fwd, ts, tt)
        e.corr_bwd = move(e.corr_bwd, tt, ts)
        e.constraint = tt.compose(e.constraint.compose(ts.inverse()))
    for nid in graph.node_ids:
        graph.corrections[nid] = Pose.identity()


# ---------------------------------------------------------------------------
# Text dump / load (correspondence sets go to a sidecar .npz)

def save_graph(path, graph: PoseGraph, sidecar_path=None) -> None:
    lines = [f"# pose_graph v{GRAPH_FORMAT_VERSION}"]
    for nid in sorted(graph.node_ids):
        c = graph.corrections[nid]
        vals = " ".join(f"{v:.9f}" for v in [*c.t, *c.quat])
        lines.append(f"NODE {nid} {vals}")
    for e in graph.odometry_edges:
        lines.append(f"EDGE_ODOM {e.s} {e.t}")
    for e in graph.loop_edges:
        vals = " ".join(f"{v:.9f}" for v in [*e.constraint.t, *e.constraint.quat])
        lines.append(f"EDGE_LOOP {e.s} {e.t} {vals} {e.fitness:.6f}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
    if sidecar_path is not None:
        blobs = {}
        for i, e in enumerate(graph.odometry_edges):
            blobs[f"odom_{i}_fp"] = e.corr_fwd.p
            blobs[f"odom_{i}_fq"] = e.corr_fwd.q
            blobs[f"odom_{i}_bp"] = e.corr_bwd.p
            blobs[f"odom_{i}_bq"] = e.corr_bwd.q
        for i, e in enumerate(graph.loop_edges):
            blobs[f"loop_{i}_fp"] = e.corr_fwd.p
            blobs[f"loop_{i}_fq"] = e.corr_fwd.q
            blobs[f"loop_{i}_bp"] = e.corr_bwd.p
            blobs[f"loop_{i}_bq"] = e.corr_bwd.q
        np.savez_compressed(sidecar_path, **blobs)


def load_graph(path, sidecar_path=None) -> PoseGraph:
    graph = PoseGraph()
    odom_n = 0
    loop_n = 0
    sidecar = np.load(sidecar_path) if sidecar_path is not None else None

    def corr(prefix, i, d):
        if sidecar is None:
            return CorrespondenceSet.empty()
        return CorrespondenceSet(sidecar[f"{prefix}_{i}_{d}p"], sidecar[f"{prefix}_{i}_{d}q"])

    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "NODE":
                nid = int(parts[1])
                t = [float(v) for v in parts[2:5]]
                q = [float(v) for v in parts[5:9]]
                graph.add_node(nid)
                graph.corrections[nid] = Pose(q, t)
            elif parts[0] == "EDGE_ODOM":
                graph.add_odometry_edge(OdometryEdge(
                    int(parts[1]), int(parts[2]),
                    corr("odom", odom_n, "f"), corr("odom", odom_n, "b")))
                odom_n += 1
            elif parts[0] == "EDGE_LOOP":
                s, t = int(parts[1]), int(parts[2])
                tv = [float(v) for v in parts[3:6]]
                q = [float(v) for v in parts[6:10]]
                fitness = float(parts[10])
                graph.add_loop_edge(LoopEdge(
                    s, t, Pose(q, tv),
                    corr("loop", loop_n, "f"), corr("loop", loop_n, "b"),
                    fitness=fitness))
                loop_n += 1
            else:
                raise ValueError(f"unknown record {parts[0]!r}")
    return graph
