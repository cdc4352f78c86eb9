"""Conditioned branching backbone trees grown until every line exits D_k.

Three constructions share one engine.  Each line is a drift-transformed
diffusion (drift = grad log of its guide field) carrying an event clock; when
the clock fires the line is replaced by two children at the event point.

* kill-driven ("killing"): guide v = g - u for two ordered solutions of the
  semilinear equation; the event rate is the residual kill rate of the
  transform, computed from the discrete generator, which lands on 2v up to
  solver error.
* clock-driven ("clock"): same guide, conservative diffusion with an explicit
  branch clock at rate 2v.  The two constructions generate the same tree law;
  the harness tests exactly that.
* tagged: each line carries a nonempty subset tag A; the guide is the joint
  field v_A, the event rate is 2 * (sum over ordered covering pairs of
  v_B v_C) / v_A, and children tags are drawn from the splitting law.

The engine tracks, per tree: the number of lines reaching each chain boundary
(exit line counts), branch events bucketed by the first not-yet-exited region
(exactly the events belonging to the corresponding pruned tree), the first
branch time, an optional running integral of an immigration integrand field,
and optionally full recorded paths for small runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from .geometry import DomainChain
from .pde import ScalarField, VectorField, grad_log, residual_semilinear
from .diffusion import local_dt, DRIFT_CAP
from .subsets import SubsetFamily, ordered_pair_covers, elements_of


class FieldConsistencyError(ValueError):
    """Input fields do not satisfy their defining equations."""


@dataclass
class TreeNode:
    id: int
    parent: int
    tag: int
    birth_time: float
    times: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None
    terminal: str = ""
    exit_point: Optional[np.ndarray] = None
    children: tuple = ()


@dataclass
class BackboneTree:
    """Recorded tree; node 0 is the root, children reference parent ids."""

    label: str
    k: int
    nodes: List[TreeNode]
    flagged: bool = False
    root_tag: int = 1

    def exit_count(self) -> int:
        return sum(1 for nd in self.nodes if nd.terminal == "exited")

    def leaf_tags(self) -> List[int]:
        return [nd.tag for nd in self.nodes if nd.terminal == "exited"]

    def branch_nodes(self) -> List[TreeNode]:
        return [nd for nd in self.nodes if nd.terminal == "branched"]

    def total_duration(self) -> float:
        tot = 0.0
        for nd in self.nodes:
            if nd.times is not None and len(nd.times) > 1:
                tot += float(nd.times[-1] - nd.times[0])
        return tot

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "k": self.k,
            "flagged": self.flagged,
            "nodes": [
                {
                    "id": nd.id,
                    "parent": nd.parent,
                    "tag": list(elements_of(nd.tag)),
                    "birth_time": nd.birth_time,
                    "terminal": nd.terminal,
                    "children": list(nd.children),
                    "path": None
                    if nd.points is None
                    else [[float(t), float(p[0]), float(p[1])]
                          for t, p in zip(nd.times, nd.points)],
                }
                for nd in self.nodes
            ],
        }


def prune_tree(tree: BackboneTree, j: int, chain: DomainChain) -> BackboneTree:
    """Clip a recorded tree at the first exit of D_j (j <= its growth region).

    Nodes whose line already left D_j before their birth are dropped; a node
    whose own path crosses the D_j boundary is truncated there and becomes an
    exited leaf of the pruned tree.
    """
    if not 1 <= j <= tree.k:
        raise ValueError(f"prune region {j} outside 1..{tree.k}")
    shape = chain.region(j)
    kept: Dict[int, TreeNode] = {}

    def visit(nid: int, inside: bool):
        nd = tree.nodes[nid]
        if not inside:
            return
        if nd.points is None:
            raise ValueError("pruning requires recorded paths")
        pts = nd.points
        crossing = None
        if len(pts) > 1:
            crossed, frac, cpt = shape.segment_exit(pts[:-1], pts[1:])
            hits = np.flatnonzero(crossed)
            if len(hits):
                i = int(hits[0])
                crossing = (i, cpt[i], float(
                    nd.times[i] + frac[i] * (nd.times[i + 1] - nd.times[i])
                ))
        if crossing is None:
            kept[nid] = TreeNode(
                nd.id, nd.parent, nd.tag, nd.birth_time, nd.times.copy(),
                nd.points.copy(), nd.terminal, nd.exit_point, nd.children,
            )
            for ch in nd.children:
                visit(ch, True)
        else:
            i, cpt, tc = crossing
            times = np.concatenate([nd.times[: i + 1], [tc]])
            pts2 = np.concatenate([pts[: i + 1], cpt[None]])
            kept[nid] = TreeNode(
                nd.id, nd.parent, nd.tag, nd.birth_time, times, pts2,
                "exited", cpt, (),
            )

    visit(0, True)
    # Reindex ids densely, preserving parent/child structure.
    order = sorted(kept)
    remap = {old: new for new, old in enumerate(order)}
    nodes = []
    for old in order:
        nd = kept[old]
        nodes.append(
            TreeNode(
                remap[old],
                remap[nd.parent] if nd.parent >= 0 else -1,
                nd.tag, nd.birth_time, nd.times, nd.points, nd.terminal,
                nd.exit_point,
                tuple(remap[c] for c in nd.children if c in kept),
            )
        )
    return BackboneTree(tree.label, j, nodes, tree.flagged, tree.root_tag)


# ----------------------------------------------------------------------------
# Engine


@dataclass
class TagDynamics:
    drift: VectorField
    rate: ScalarField


@dataclass
class TreeSpec:
    """Everything the engine needs: per-tag dynamics and the tag splitter."""

    label: str
    tags: Dict[int, TagDynamics]
    root_tag: int
    splitter: Optional[Callable] = None  # (tag, point, rng) -> (tag_b, tag_c)
    integrand: Optional[ScalarField] = None


@dataclass(frozen=True)
class TreeParams:
    dt: float = 2.5e-4
    dt_min_factor: float = 1.0 / 64.0
    band: Optional[float] = None
    node_budget: int = 100_000
    max_iters: int = 2_000_000

    def dt_min(self) -> float:
        return self.dt * self.dt_min_factor

    def band_for(self, chain: DomainChain) -> float:
        return 0.1 * chain.scale if self.band is None else self.band


@dataclass
class ForestStats:
    """Per-tree statistics from one batch of grown trees."""

    k: int
    gammas: np.ndarray          # (ntrees, k+1): lines reaching each boundary
    annulus_events: np.ndarray  # (ntrees, k+1): branch events per pruned region
    first_branch: np.ndarray    # (ntrees,) nan when the root exits eventless
    laplace_exponent: np.ndarray
    flagged: np.ndarray         # bool (budget/step-cap/abort)
    split_retries: int = 0
    trees: Optional[List[BackboneTree]] = None

    @property
    def gamma(self) -> np.ndarray:
        return self.gammas[:, self.k]

    def laplace_values(self) -> np.ndarray:
        return np.exp(-self.laplace_exponent)


def grow_forest(
    x0,
    spec: TreeSpec,
    chain: DomainChain,
    k: int,
    ntrees: int,
    rng: np.random.Generator,
    params: TreeParams = TreeParams(),
    *,
    record: bool = False,
) -> ForestStats:
    """Grow ntrees independent trees until every line exits D_k."""
    shape = chain.region(k)
    start = np.asarray(x0, dtype=float)
    if not shape.contains(start[None, :])[0]:
        raise ValueError(f"start point {x0} outside D_{k}")
    dt, dt_min = params.dt, params.dt_min()
    band = params.band_for(chain)

    tree = np.arange(ntrees, dtype=np.int64)
    tag = np.full(ntrees, spec.root_tag, dtype=np.int64)
    x = np.repeat(start[None, :], ntrees, axis=0)
    t = np.zeros(ntrees)
    next_k = np.ones(ntrees, dtype=np.int64)
    lid = np.arange(ntrees, dtype=np.int64)

    gammas = np.zeros((ntrees, k + 1), dtype=np.int64)
    annulus = np.zeros((ntrees, k + 1), dtype=np.int64)
    first_branch = np.full(ntrees, np.nan)
    lap = np.zeros(ntrees)
    nodes = np.ones(ntrees, dtype=np.int64)
    flagged = np.zeros(ntrees, dtype=bool)
    split_retries = 0

    rec: Dict[int, dict] = {}
    next_lid = ntrees
    if record:
        for i in range(ntrees):
            rec[i] = {
                "tree": i, "parent": -1, "tag": int(spec.root_tag),
                "birth": 0.0, "times": [0.0], "pts": [start.copy()],
                "terminal": "capped", "exit": None, "children": [],
            }

    inner_shapes = {j: chain.region(j) for j in range(1, k + 1)}

    for _ in range(params.max_iters):
        if len(x) == 0:
            break
        # Per-tag drift and event rate.
        mu = np.zeros_like(x)
        rate = np.zeros(len(x))
        for tg in np.unique(tag):
            sel = tag == tg
            dyn = spec.tags[int(tg)]
            mu[sel] = dyn.drift.interp(x[sel])
            rate[sel] = np.maximum(dyn.rate.interp(x[sel]), 0.0)
        bad = np.abs(mu).max(axis=1) > DRIFT_CAP

        dist = shape.boundary_distance(x)
        dtl = local_dt(dist, dt, dt_min, band)
        with np.errstate(divide="ignore"):
            ev = np.where(rate > 0.0, rng.exponential(size=len(x)) / np.maximum(rate, 1e-300), np.inf)
        dt_eff = np.minimum(dtl, ev)
        x_new = x + mu * dt_eff[:, None] + rng.normal(size=x.shape) * np.sqrt(dt_eff)[:, None]
        crossed, frac, cpts = shape.segment_exit(x, x_new)
        adv = np.where(crossed, frac * dt_eff, dt_eff)
        seg_end = np.where(crossed[:, None], cpts, x_new)

        if spec.integrand is not None:
            np.add.at(lap, tree, spec.integrand.interp(x) * adv)
        t_new = t + adv

        # Inner-boundary crossings bump the per-region line counters; the
        # target boundary is counted directly from the exit rows below.
        pending = np.flatnonzero(next_k <= k - 1)
        seg_start = x.copy()
        while len(pending):
            still = []
            for j in np.unique(next_k[pending]):
                rows = pending[next_k[pending] == j]
                cj, fj, pj = inner_shapes[int(j)].segment_exit(seg_start[rows], seg_end[rows])
                hit = rows[cj]
                if len(hit):
                    np.add.at(gammas[:, int(j)], tree[hit], 1)
                    next_k[hit] += 1
                    seg_start[hit] = pj[cj]
                    still.extend(hit[next_k[hit] <= k - 1].tolist())
            pending = np.asarray(sorted(still), dtype=np.int64)
        np.add.at(gammas[:, k], tree[crossed & ~bad], 1)

        event = (~crossed) & (ev <= dtl) & ~bad

        if record:
            for i in range(len(x)):
                buf = rec[int(lid[i])]
                buf["times"].append(float(t_new[i]))
                buf["pts"].append(seg_end[i].copy())

        # Exits.
        exit_rows = np.flatnonzero(crossed & ~bad)
        if record:
            for i in exit_rows:
                buf = rec[int(lid[i])]
                buf["terminal"] = "exited"
                buf["exit"] = cpts[i].copy()
        # Aborts flag the whole tree.
        if np.any(bad):
            flagged[np.unique(tree[bad])] = True
            if record:
                for i in np.flatnonzero(bad):
                    rec[int(lid[i])]["terminal"] = "aborted"

        # Branch events spawn two children (possibly retagged).
        ev_rows = np.flatnonzero(event)
        consumed = np.zeros(len(x), dtype=bool)
        child_cols = []
        for i in ev_rows:
            tr = int(tree[i])
            tags2 = (int(tag[i]), int(tag[i]))
            if spec.splitter is not None:
                drawn = spec.splitter(int(tag[i]), seg_end[i], rng)
                if drawn is None:
                    split_retries += 1
                    continue  # degenerate split weights: line continues, clock re-arms
                tags2 = drawn
            consumed[i] = True
            if nodes[tr] + 2 > params.node_budget:
                flagged[tr] = True
                if record:
                    rec[int(lid[i])]["terminal"] = "capped"
                continue
            nodes[tr] += 2
            annulus[tr, min(int(next_k[i]), k)] += 1
            if not np.isfinite(first_branch[tr]):
                first_branch[tr] = t_new[i]
            else:
                first_branch[tr] = min(first_branch[tr], float(t_new[i]))
            ids = (next_lid, next_lid + 1)
            next_lid += 2
            if record:
                rec[int(lid[i])]["terminal"] = "branched"
                rec[int(lid[i])]["children"] = list(ids)
                for cid, ctag in zip(ids, tags2):
                    rec[cid] = {
                        "tree": tr, "parent": int(lid[i]), "tag": int(ctag),
                        "birth": float(t_new[i]), "times": [float(t_new[i])],
                        "pts": [seg_end[i].copy()], "terminal": "capped",
                        "exit": None, "children": [],
                    }
            child_cols.append((tr, tags2[0], seg_end[i], t_new[i], next_k[i], ids[0]))
            child_cols.append((tr, tags2[1], seg_end[i], t_new[i], next_k[i], ids[1]))

        keep = np.flatnonzero(~crossed & ~bad & ~consumed)
        if child_cols:
            ctree = np.array([c[0] for c in child_cols], dtype=np.int64)
            ctag = np.array([c[1] for c in child_cols], dtype=np.int64)
            cx = np.array([c[2] for c in child_cols])
            ct = np.array([c[3] for c in child_cols])
            cnk = np.array([c[4] for c in child_cols], dtype=np.int64)
            clid = np.array([c[5] for c in child_cols], dtype=np.int64)
            tree = np.concatenate([tree[keep], ctree])
            tag = np.concatenate([tag[keep], ctag])
            x = np.concatenate([seg_end[keep], cx])
            t = np.concatenate([t_new[keep], ct])
            next_k = np.concatenate([next_k[keep], cnk])
            lid = np.concatenate([lid[keep], clid])
        else:
            tree = tree[keep]
            tag = tag[keep]
            x = seg_end[keep]
            t = t_new[keep]
            next_k = next_k[keep]
            lid = lid[keep]
        # Drop lines of flagged trees.
        live = ~flagged[tree]
        tree, tag, x, t, next_k, lid = (
            tree[live], tag[live], x[live], t[live], next_k[live], lid[live]
        )
    else:
        if len(x):
            flagged[np.unique(tree)] = True

    trees_out = None
    if record:
        trees_out = _assemble_trees(rec, ntrees, spec, k, flagged)
    return ForestStats(
        k=k, gammas=gammas, annulus_events=annulus, first_branch=first_branch,
        laplace_exponent=lap, flagged=flagged, split_retries=split_retries,
        trees=trees_out,
    )


def _assemble_trees(rec: Dict[int, dict], ntrees: int, spec: TreeSpec, k: int,
                    flagged: np.ndarray) -> List[BackboneTree]:
    trees: List[BackboneTree] = []
    for root in range(ntrees):
        ids = [i for i, b in rec.items() if b["tree"] == root]
        remap = {old: new for new, old in enumerate(sorted(ids))}
        nodes = []
        for old in sorted(ids):
            b = rec[old]
            nodes.append(
                TreeNode(
                    id=remap[old],
                    parent=remap[b["parent"]] if b["parent"] in remap else -1,
                    tag=b["tag"],
                    birth_time=b["birth"],
                    times=np.asarray(b["times"]),
                    points=np.asarray(b["pts"]),
                    terminal=b["terminal"],
                    exit_point=b["exit"],
                    children=tuple(remap[c] for c in b["children"] if c in remap),
                )
            )
        trees.append(
            BackboneTree(spec.label, k, nodes, bool(flagged[root]), spec.root_tag)
        )
    return trees


# ----------------------------------------------------------------------------
# Construction-specific specs


@dataclass
class PairFields:
    """Two ordered solutions of the semilinear equation and their gap v = g - u."""

    g: ScalarField
    u: Optional[ScalarField] = None

    def v_values(self) -> np.ndarray:
        uv = 0.0 if self.u is None else self.u.values
        return self.g.values - uv

    def v_field(self) -> ScalarField:
        return self.g.copy_with(np.maximum(self.v_values(), 0.0), name="v")

    def validate(self, tol: float = 1e-8) -> None:
        for f in (self.g, self.u):
            if f is None:
                continue
            r = residual_semilinear(f)
            if not r < tol * (1.0 + f.max()):
                raise FieldConsistencyError(
                    f"field {f.name or '?'} residual {r:.2e} exceeds tolerance"
                )
        if np.min(self.v_values()) < -1e-9 * (1.0 + self.g.max()):
            raise FieldConsistencyError("ordered solutions required: g >= u")


def _generator_residual_rate(fields: PairFields, floor: float) -> ScalarField:
    """Residual kill rate of the gap-guided transform, from the discrete operator.

    rate = (4 g v - (1/2) Lap_h v) / v on interior nodes of the solve region;
    equals 2 v exactly for exact discrete solutions.  Nodes without a stencil
    (boundary and beyond) fall back to 2 v.
    """
    g = fields.g
    grid = g.grid
    v = np.maximum(fields.v_values(), 0.0)
    rate = 2.0 * v.copy()
    inodes = grid.interior_nodes(g.region)
    half_lap = 0.5 * grid.apply_laplacian(fields.v_values())[inodes]
    vi = v[inodes]
    safe = np.maximum(vi, floor)
    rate[inodes] = np.where(
        vi > floor, (4.0 * g.values[inodes] * vi - half_lap) / safe, 2.0 * vi
    )
    return g.copy_with(np.maximum(rate, 0.0), name="residual-rate")


def killing_tree_spec(
    fields: PairFields,
    integrand: Optional[ScalarField] = None,
    *,
    drift_floor: float = 1e-12,
) -> TreeSpec:
    """Kill-driven construction: residual killing of the transform respawns two."""
    fields.validate()
    v = fields.v_field()
    return TreeSpec(
        label="killing",
        tags={1: TagDynamics(grad_log(v, drift_floor),
                             _generator_residual_rate(fields, drift_floor))},
        root_tag=1,
        integrand=integrand,
    )


def clock_tree_spec(
    fields: PairFields,
    integrand: Optional[ScalarField] = None,
    *,
    drift_floor: float = 1e-12,
    rate_factor: float = 2.0,
) -> TreeSpec:
    """Clock-driven construction: conservative diffusion, branch clock 2v.

    rate_factor exists for negative-control experiments; the faithful
    construction uses the default 2.
    """
    fields.validate()
    v = fields.v_field()
    return TreeSpec(
        label="clock",
        tags={1: TagDynamics(grad_log(v, drift_floor),
                             v.copy_with(rate_factor * v.values))},
        root_tag=1,
        integrand=integrand,
    )


def tagged_tree_spec(
    vfam: SubsetFamily,
    integrand: Optional[ScalarField] = None,
    *,
    drift_floor: float = 1e-12,
) -> TreeSpec:
    """Subset-tagged construction from a family of joint guide fields."""
    n = vfam.n
    any_field: ScalarField = vfam[vfam.full_mask]
    grid = any_field.grid
    tags = {}
    pair_lists = {}
    for a_mask in vfam.masks():
        va = vfam[a_mask]
        if np.min(va.values) < -1e-9 * (1.0 + va.max()):
            raise FieldConsistencyError(
                f"joint field for {elements_of(a_mask)} is negative"
            )
        pairs = ordered_pair_covers(a_mask)
        pair_lists[a_mask] = pairs
        pair_sum = np.zeros(grid.n_nodes)
        for b, c in pairs:
            pair_sum += np.maximum(vfam[b].values, 0.0) * np.maximum(vfam[c].values, 0.0)
        rate = 2.0 * pair_sum / np.maximum(va.values, drift_floor)
        tags[a_mask] = TagDynamics(
            grad_log(va, drift_floor), va.copy_with(rate, name="tag-rate")
        )

    def splitter(tag_mask: int, point: np.ndarray, rng: np.random.Generator):
        pairs = pair_lists[tag_mask]
        w = np.array(
            [
                max(float(vfam[b].interp(point[None])[0]), 0.0)
                * max(float(vfam[c].interp(point[None])[0]), 0.0)
                for b, c in pairs
            ]
        )
        tot = w.sum()
        if tot <= 0.0:
            return None
        return pairs[int(rng.choice(len(pairs), p=w / tot))]

    return TreeSpec(
        label="tagged",
        tags=tags,
        root_tag=vfam.full_mask,
        splitter=splitter,
        integrand=integrand,
    )


# ----------------------------------------------------------------------------
# Single-tree wrappers and statistics


def _single(spec: TreeSpec, x0, chain, k, dt, rng, node_budget) -> BackboneTree:
    params = TreeParams(dt=dt, node_budget=node_budget)
    stats_ = grow_forest(x0, spec, chain, k, 1, rng, params, record=True)
    return stats_.trees[0]


def grow_tree_killing(x0, fields: PairFields, chain: DomainChain, k: int,
                      dt: float, rng: np.random.Generator,
                      node_budget: int = 100_000) -> BackboneTree:
    return _single(killing_tree_spec(fields), x0, chain, k, dt, rng, node_budget)


def grow_tree_clock(x0, fields: PairFields, chain: DomainChain, k: int,
                    dt: float, rng: np.random.Generator,
                    node_budget: int = 100_000) -> BackboneTree:
    return _single(clock_tree_spec(fields), x0, chain, k, dt, rng, node_budget)


def grow_tree_tagged(x0, vfam: SubsetFamily, uN: ScalarField, chain: DomainChain,
                     k: int, dt: float, rng: np.random.Generator,
                     node_budget: int = 100_000) -> BackboneTree:
    if float(vfam[vfam.full_mask].interp(np.asarray(x0, dtype=float)[None])[0]) <= 0.0:
        raise FieldConsistencyError("root guide field vanishes at the start point")
    del uN  # the immigration kill field; not needed for the backbone itself
    return _single(tagged_tree_spec(vfam), x0, chain, k, dt, rng, node_budget)


def branch_stats(forest: ForestStats) -> dict:
    """Exit-line histogram and per-region branch-event means with CIs.

    Events are bucketed by the smallest not-yet-exited region at branch time,
    so bucket j collects exactly the events of the j-pruned tree; cumulative
    sums over buckets give the pruned-tree totals.
    """
    ok = ~forest.flagged
    gam = forest.gamma[ok]
    hist = np.bincount(gam, minlength=12)
    ann = forest.annulus_events[:, 1:]
    means = ann.mean(axis=0)
    ses = ann.std(axis=0, ddof=1) / np.sqrt(len(ann)) if len(ann) > 1 else 0 * means
    cum = np.cumsum(ann, axis=1)
    return {
        "n_trees": int(len(forest.gamma)),
        "n_flagged": int(np.sum(forest.flagged)),
        "gamma_hist": hist.tolist(),
        "gamma_mean": float(gam.mean()) if len(gam) else float("nan"),
        "annulus_means": means.tolist(),
        "annulus_ses": ses.tolist(),
        "cumulative_means": cum.mean(axis=0).tolist(),
        "cumulative_ses": (cum.std(axis=0, ddof=1) / np.sqrt(len(cum))).tolist()
        if len(cum) > 1 else (0 * cum.mean(axis=0)).tolist(),
    }
