"""Independent reference implementations used by the tests.

Nothing here imports the code under test except plain data types; each
oracle recomputes its quantity the slow, obvious way.
"""

from __future__ import annotations

import itertools
import math

import networkx as nx
import numpy as np

from dualmem import numerics as T

# ---------------------------------------------------------------------------
# gradients


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(|a|, |b|, 1e-8), elementwise worst case."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0


def check_grads(build, arrays: dict[str, np.ndarray], h: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build(**tensors)`` returns a Tensor; it is reduced to a scalar with a
    fixed random projection so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    proj = None

    def scalar(values: dict[str, np.ndarray], grad: bool):
        nonlocal proj
        ts = {k: T.Tensor(v.copy(), requires_grad=grad) for k, v in values.items()}
        with T.Tape() as tape:
            out = build(**ts)
            if proj is None:
                proj = rng.normal(size=out.shape)
            loss = T.tsum(out * proj)
            if grad:
                tape.backward(loss)
        return loss.item(), ts

    _, ts = scalar(arrays, True)
    worst = 0.0
    for name, arr in arrays.items():
        def f(x, name=name):
            vals = dict(arrays)
            vals[name] = x
            return scalar(vals, False)[0]
        num = fd_gradient(f, arr.copy(), h)
        worst = max(worst, rel_error_scaled(ts[name].grad, num))
    return worst


def rel_error_scaled(analytic, numeric) -> float:
    """Relative error normalized by the gradient's overall scale.

    Entries many orders below the largest gradient component carry only
    floating-point cancellation noise, so the denominator is floored at
    1e-6 of that component.
    """
    a = np.zeros_like(numeric) if analytic is None else np.asarray(analytic)
    scale = max(np.abs(numeric).max(), np.abs(a).max(), 1e-8)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6 * scale)
    return float((np.abs(a - numeric) / denom).max())


# ---------------------------------------------------------------------------
# contrastive losses by direct summation


def cosine(u, v) -> float:
    return float(np.dot(u, v) / (math.sqrt(np.dot(u, u)) * math.sqrt(np.dot(v, v))))


def infonce_direct(anchors, candidates, positives, allowed, tau) -> float:
    """Average over anchors of -log(exp(s_ip/tau) / sum_{j allowed} exp(s_ij/tau)), with plain loops."""
    total = 0.0
    for i in range(len(anchors)):
        num = math.exp(cosine(anchors[i], candidates[positives[i]]) / tau)
        den = 0.0
        for j in range(len(candidates)):
            if allowed[i][j]:
                den += math.exp(cosine(anchors[i], candidates[j]) / tau)
        total += -math.log(num / den)
    return total / len(anchors)


# ---------------------------------------------------------------------------
# grid world


def grid_graph(layout) -> nx.Graph:
    """4-connected graph over free cells."""
    g = nx.Graph()
    for y in range(layout.height):
        for x in range(layout.width):
            if layout.grid[y, x] != 0:
                continue
            g.add_node((x, y))
            for dx, dy in ((1, 0), (0, 1)):
                nx_, ny = x + dx, y + dy
                if nx_ < layout.width and ny < layout.height and layout.grid[ny, nx_] == 0:
                    g.add_edge((x, y), (nx_, ny))
    return g


def shortest_cells(layout, a, b) -> int:
    return nx.shortest_path_length(grid_graph(layout), tuple(a), tuple(b))


def pose_graph_turns(layout, start, goal) -> tuple[int, int]:
    """Dijkstra over (x, y, heading) with lexicographic cost (moves, turns)."""
    big = 10_000
    g = nx.DiGraph()
    vec = ((0, -1), (1, 0), (0, 1), (-1, 0))
    for (x, y) in grid_graph(layout).nodes:
        for h in range(4):
            g.add_edge((x, y, h), (x, y, (h + 3) % 4), w=1)
            g.add_edge((x, y, h), (x, y, (h + 1) % 4), w=1)
            nx_, ny = x + vec[h][0], y + vec[h][1]
            if 0 <= nx_ < layout.width and 0 <= ny < layout.height and layout.grid[ny, nx_] == 0:
                g.add_edge((x, y, h), (nx_, ny, h), w=big)
    for h in range(4):
        g.add_edge((goal[0], goal[1], h), "goal", w=0)
    cost = nx.shortest_path_length(g, (start.x, start.y, start.heading), "goal", weight="w")
    return cost // big, cost % big


def visible_cells_bruteforce(layout, pose, k: int = 16) -> set:
    """Cells whose center-to-center ray (4 samples per Chebyshev cell, half away from zero) hits no wall.

    Works in world coordinates directly, one target cell at a time.
    """
    fwd = ((0, -1), (1, 0), (0, 1), (-1, 0))[pose.heading]
    right = (-fwd[1], fwd[0])
    out = set()
    for row in range(k):
        for col in range(k):
            f, l = k // 2 - row, col - k // 2
            x = pose.x + f * fwd[0] + l * right[0]
            y = pose.y + f * fwd[1] + l * right[1]
            if not (0 <= x < layout.width and 0 <= y < layout.height):
                continue
            n = 4 * max(abs(f), abs(l))
            blocked = False
            for i in range(1, n):
                s = i / n
                a = int(math.copysign(math.floor(abs(f * s) + 0.5), f * s))
                b = int(math.copysign(math.floor(abs(l * s) + 0.5), l * s))
                if (a, b) in ((0, 0), (f, l)):
                    continue
                cx = pose.x + a * fwd[0] + b * right[0]
                cy = pose.y + a * fwd[1] + b * right[1]
                if not (0 <= cx < layout.width and 0 <= cy < layout.height) or layout.grid[cy, cx] == -1:
                    blocked = True
                    break
            if not blocked:
                out.add((x, y))
    return out


# ---------------------------------------------------------------------------
# metrics


def spl_direct(results) -> float:
    return sum(s * L / max(P, L) if max(P, L) > 0 else float(s) for s, L, P in results) / len(results)


def mra_direct(pred: float, truth: float) -> float:
    """Mean over theta in {0.50, 0.55, ..., 0.95} of 1[|pred - truth| / truth < 1 - theta]."""
    hits = 0
    for i in range(10):
        # 1 - theta written as an exact ratio of integers
        hits += abs(pred - truth) / truth < (50 - 5 * i) / 100
    return hits / 10


def wilcoxon_enumerate(diffs) -> tuple[float, float]:
    """W+ and the two-sided p by listing every sign pattern over the average ranks."""
    d = [x for x in diffs if x != 0]
    mags = sorted(abs(x) for x in d)
    def rank(v):
        pos = [i + 1 for i, m in enumerate(mags) if m == v]
        return sum(pos) / len(pos)
    ranks = [rank(abs(x)) for x in d]
    w = sum(r for r, x in zip(ranks, d) if x > 0)
    mean = sum(ranks) / 2
    extreme = 0
    for signs in itertools.product((0, 1), repeat=len(ranks)):
        s = sum(r for r, keep in zip(ranks, signs) if keep)
        if abs(s - mean) >= abs(w - mean) - 1e-9:
            extreme += 1
    return w, min(1.0, extreme / 2 ** len(ranks))


def check_param_grads(loss_fn, params, h: float = 1e-5, max_entries: int = 12, seed: int = 0) -> float:
    """Worst relative error on up to ``max_entries`` random entries of each parameter.

    ``loss_fn()`` must rebuild the graph from the current parameter values
    and return a scalar Tensor.
    """
    for p in params:
        p.grad = None
    with T.Tape() as tape:
        tape.backward(loss_fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        analytic = np.zeros(len(picks)) if p.grad is None else p.grad.reshape(-1)[picks]
        numeric = np.zeros(len(picks))
        for j, i in enumerate(picks):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn().item()
            flat[i] = old - h
            down = loss_fn().item()
            flat[i] = old
            numeric[j] = (up - down) / (2 * h)
        worst = max(worst, rel_error_scaled(analytic, numeric))
    return worst


def projected(out, seed: int = 1):
    """Scalar sum(out * R) with a fixed random R, for gradient checks of tensor-valued maps."""
    r = np.random.default_rng(seed).normal(size=out.shape)
    return T.tsum(out * r)


# ---------------------------------------------------------------------------
# episodes and QA

_VEC = ((0, -1), (1, 0), (0, 1), (-1, 0))


def walk(layout, start, actions):
    """(x, y, heading) before every action, ending with the pose where STOP is issued."""
    x, y, h = start.x, start.y, start.heading
    out = [(x, y, h)]
    for a in actions:
        if a == 3:
            break
        if a == 1:
            h = (h + 3) % 4
        elif a == 2:
            h = (h + 1) % 4
        else:
            nx_, ny = x + _VEC[h][0], y + _VEC[h][1]
            if 0 <= nx_ < layout.width and 0 <= ny < layout.height and layout.grid[ny, nx_] == 0:
                x, y = nx_, ny
        out.append((x, y, h))
    return out


def neighbours_of(layout, cells) -> set:
    out = set()
    for x, y in cells:
        for dx, dy in _VEC:
            c = (x + dx, y + dy)
            if 0 <= c[0] < layout.width and 0 <= c[1] < layout.height and layout.grid[c[1], c[0]] == 0:
                out.add(c)
    return out


def _route_moves(route: str) -> list[int]:
    acts, words, i = [], route.split(), 0
    while i < len(words):
        w = words[i]
        i += 1
        if w == "forward":
            digits = ""
            while i < len(words) and words[i].isdigit():
                digits += words[i]
                i += 1
            acts += [0] * int(digits)
        else:
            acts.append(1 if w == "left" else 2)
    return acts


def _route_reaches(layout, pose, route, targets, length) -> bool:
    acts = _route_moves(route)
    path = walk(layout, _P(*pose), acts)
    # every FORWARD must actually move and the walk must be shortest
    moved = sum(1 for a, b in zip(path, path[1:]) if a[:2] != b[:2])
    return moved == acts.count(0) == length and path[-1][:2] in targets


class _P:
    def __init__(self, x, y, h):
        self.x, self.y, self.heading = x, y, h


def _first_seen(layout, poses) -> dict[int, int]:
    first = {}
    for t, (x, y, h) in enumerate(poses):
        cells = visible_cells_bruteforce(layout, _P(x, y, h))
        for o in layout.objects:
            if o.id not in first and any(tuple(c) in cells for c in o.cells):
                first[o.id] = t
    return first


def _centre(cells):
    return sum(c[0] for c in cells) / len(cells), sum(c[1] for c in cells) / len(cells)


def verify_qa(layout, episode, item) -> str | None:
    """Recompute an answer from the layout alone; returns a failure message or None."""
    objs = {o.id: o for o in layout.objects}
    counts: dict[str, int] = {}
    for o in layout.objects:
        counts[o.cls] = counts.get(o.cls, 0) + 1
    m, cat = item.meta, item.category
    letters = "abcd"
    if cat == "obj_count":
        truth = str(sum(o.cls == m["cls"] for o in layout.objects))
    elif cat == "abs_dist":
        a, b = _centre(objs[m["a"]].cells), _centre(objs[m["b"]].cells)
        truth = str(int(math.floor(math.hypot(a[0] - b[0], a[1] - b[1]) + 0.5)))
    elif cat == "obj_size":
        truth = str(len(objs[m["object"]].cells))
    elif cat == "room_size":
        r = layout.rooms[m["room"]]
        truth = str(sum(1 for y in range(r.y0, r.y1 + 1) for x in range(r.x0, r.x1 + 1)))
    elif cat == "rel_dist":
        ref = _centre(objs[m["ref"]].cells)
        d = [math.dist(ref, _centre(objs[c].cells)) for c in m["cands"]]
        if len(d) > 1 and sorted(d)[1] - sorted(d)[0] < 1e-9:
            return "tied nearest candidate"
        truth = letters[d.index(min(d))]
    elif cat == "rel_dir":
        x, y, h = walk(layout, episode.start, episode.actions)[-1]
        cx, cy = _centre(objs[m["object"]].cells)
        dx, dy = cx - x, cy - y
        f = dx * _VEC[h][0] + dy * _VEC[h][1]
        r = -dx * _VEC[h][1] + dy * _VEC[h][0]
        if abs(abs(f) - abs(r)) < 0.5:
            return "ambiguous direction"
        word = ("front" if f > 0 else "back") if abs(f) > abs(r) else ("right" if r > 0 else "left")
        truth = letters[item.options.index(word)]
    elif cat == "route_plan":
        end = walk(layout, episode.start, episode.actions)[-1]
        lengths = nx.single_source_shortest_path_length(grid_graph(layout), end[:2])
        # a route has at least one move, so the cell the agent stands on is not a target
        targets = {c for c in neighbours_of(layout, objs[m["object"]].cells) if lengths.get(c, 0) > 0}
        best = min(lengths[c] for c in targets)
        good = [i for i, r in enumerate(item.options) if _route_reaches(layout, end, r, targets, best)]
        if len(good) != 1:
            return f"{len(good)} options reach the object along a shortest path"
        truth = letters[good[0]]
    elif cat == "appr_order":
        first = _first_seen(layout, walk(layout, episode.start, episode.actions))
        order = " ".join(objs[i].cls for i in sorted(m["objects"], key=lambda i: first[i]))
        if len({first[i] for i in m["objects"]}) != 3:
            return "first sightings are not distinct"
        truth = letters[item.options.index(order)]
    elif cat == "support":
        held = objs[m["object"]]
        hosts = [o for o in layout.objects if o.id != held.id and set(map(tuple, held.cells)) <= set(map(tuple, o.cells))]
        if len(hosts) != 1:
            return "supporter is not unique"
        truth = hosts[0].cls
    else:
        return f"unknown category {cat}"
    if cat in ("obj_count", "abs_dist", "obj_size", "room_size") and int(truth) <= 0:
        return "non-positive numeric answer"
    if cat in ("rel_dist", "rel_dir", "route_plan", "appr_order") and len(set(item.options)) != len(item.options):
        return "duplicate options"
    return None if item.answer == truth else f"answer {item.answer!r} != recomputed {truth!r}"
