"""Executable versions of the expressivity results, used as oracles.

* prefix / initial-state equivalence and the reachability (Vandermonde) test;
* the input-projection absorption construction for S6;
* the essential discretized parameter count for one S4 channel;
* the layer-grouping construction that embeds a shallow target deep S4 model
  into a deeper frozen one, with an inventory of every touched parameter.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .ssm import (
    DeepS4Layer,
    S6Block,
    StackedModel,
    discretize,
    kernel_discrete,
    scan_discrete,
    s6_step_sizes,
)

RANK_RTOL = 1e-10
ALIGN_TOL = 1e-12
MAX_BRUTE_H = 8
PASS_LOG_DT = math.log(1e4)


# ---------------------------------------------------------------- initial state vs prefix


def _reach_matrix(abar, bbar, M):
    abar = np.asarray(abar, dtype=np.float64)
    bbar = np.asarray(bbar, dtype=np.float64)
    powers = np.arange(M - 1, -1, -1)
    return (abar[:, None] ** powers[None, :]) * bbar[:, None]  # (H, M)


def prefix_to_initial_state(abar, bbar, P):
    """h0* = sum_m abar^(M-m) * bbar * p_m: the state a zero-initialized scan reaches after P."""
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 1 or len(P) < 1:
        raise ValueError("prefix must be a non-empty 1-D sequence")
    return _reach_matrix(abar, bbar, len(P)) @ P


def reachability_rank(abar, bbar, M):
    """Numerical rank of the H x M reachability matrix and whether it spans R^H."""
    if M < 1:
        raise ValueError("M must be >= 1")
    s = np.linalg.svd(_reach_matrix(abar, bbar, M), compute_uv=False)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    return rank, rank == len(np.atleast_1d(abar))


def initial_state_to_prefix(abar, bbar, h0, M):
    """Minimum-norm prefix of length M whose injected state is h0."""
    abar = np.atleast_1d(np.asarray(abar, dtype=np.float64))
    bbar = np.atleast_1d(np.asarray(bbar, dtype=np.float64))
    H = abar.size
    if M < H:
        raise ValueError(f"need prefix length M >= H ({M} < {H})")
    if np.any(bbar == 0):
        raise ValueError("nondegeneracy violated: some bbar entry is zero")
    if H > 1 and np.min(np.abs(abar[:, None] - abar[None, :])[~np.eye(H, dtype=bool)]) == 0:
        raise ValueError("nondegeneracy violated: abar entries are not distinct")
    A = _reach_matrix(abar, bbar, M)
    h0 = np.asarray(h0, dtype=np.float64)
    P, *_ = np.linalg.lstsq(A, h0, rcond=None)
    if backward_error(A, P, h0) > 1e-10:
        raise ValueError("least-squares solve is not backward stable here; system is too ill-conditioned")
    return P


def backward_error(A, P, h0):
    """Normwise backward error ||A P - h0|| / (||A|| ||P|| + ||h0||).

    Close abar make A badly conditioned, so the forward error of the
    round trip can be large even when the solve is as good as float64 allows.
    """
    num_ = float(np.linalg.norm(A @ P - h0))
    den = float(np.linalg.norm(A, 2) * np.linalg.norm(P) + np.linalg.norm(h0))
    return num_ / den if den else num_


# ---------------------------------------------------------------- S6 input projection


def w_s6(block):
    """Stack [W_B; W_C; W_dt_down] -> (2H + r, D)."""
    return np.vstack([block.w_b, block.w_c, block.w_dt_down])


def with_w_s6(block, W):
    H = block.H
    return S6Block(block.a, W[:H], W[H : 2 * H], W[2 * H :], block.w_dt_up, block.beta_dt, block.w_in, block.h0)


def construct_win_hat(W_bar, W, W_in):
    """W_in_hat with W @ W_in_hat == W_bar @ W_in, closest to W_in in Frobenius norm."""
    W_bar, W, W_in = (np.asarray(v, dtype=np.float64) for v in (W_bar, W, W_in))
    k, D = W.shape
    if W_bar.shape != (k, D) or W_in.shape != (D, D):
        raise ValueError(f"shape mismatch: W {W.shape}, W_bar {W_bar.shape}, W_in {W_in.shape}")
    if k > D:
        raise ValueError(f"construction needs 2H + r <= D, got {k} > {D}")
    U, s, Vt = np.linalg.svd(W, full_matrices=True)
    if s[-1] <= RANK_RTOL * s[0]:
        raise ValueError("W_S6 is rank deficient; the construction needs its inverse singular values")
    V = Vt.T
    top = (U.T @ W_bar @ W_in) / s[:, None]
    Q = V[:, k:].T @ W_in
    return V @ np.vstack([top, Q])


def s6_induced(block, X):
    """Input-dependent (Delta, B, C) sequences on X (D, N)."""
    Z = block.w_in @ X
    return s6_step_sizes(block, Z), block.w_b @ Z, block.w_c @ Z


# ---------------------------------------------------------------- essential parameter count

SPACES = ("discretized", "zoh", "bilinear")


@dataclass(frozen=True)
class EssentialResult:
    count: int
    permutation: tuple
    updated: tuple  # (first, second, c) in the frozen channel's original order
    edits: tuple  # (dim, parameter, new value)


def _redundant(space, first, second, c, dt):
    if space == "discretized":
        return first * second * c
    x = dt * first
    if space == "zoh":
        return dt * np.expm1(x) * second * c
    return dt * (1.0 + x / 2.0) * second * c


def _objective(space, frozen, target, dt, perm):
    f1, f2, c = frozen
    t1, t2, tc = target
    Hs = len(t1)
    bc = f2 * c
    tbc = t2 * tc
    head, tail = list(perm[:Hs]), list(perm[Hs:])
    red = _redundant(space, f1[tail], f2[tail], c[tail], dt)
    return (
        int(np.sum(np.abs(red) > 0))
        + int(np.sum(np.abs(f1[head] - t1) > ALIGN_TOL))
        + int(np.sum(np.abs(bc[head] - tbc) > ALIGN_TOL))
    )


def _check_essential_inputs(frozen, target):
    frozen = tuple(np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in frozen)
    target = tuple(np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in target)
    H, Hs = len(frozen[0]), len(target[0])
    if any(len(v) != H for v in frozen) or any(len(v) != Hs for v in target):
        raise ValueError("frozen and target parameter vectors must each share a length")
    if Hs > H:
        raise ValueError(f"target has more states than the frozen channel ({Hs} > {H})")
    if H > MAX_BRUTE_H:
        raise ValueError(f"exhaustive search supports H <= {MAX_BRUTE_H}, got {H}")
    if any(np.any(v == 0) for v in frozen):
        raise ValueError("frozen channel has a zero parameter entry (invalid channel)")
    return frozen, target


def essential_param_count(frozen, target, space="discretized", dt=1.0):
    """Minimal number of entries to edit so the frozen channel equals the zero-padded target.

    ``frozen`` = (abar, bbar, c) for the discretized space, or the continuous
    (a, b, c) for zoh / bilinear, where both channels share step size ``dt``.
    Exhaustive over permutations; the lexicographically first minimizer wins.
    """
    if space not in SPACES:
        raise ValueError(f"space must be one of {SPACES}")
    frozen, target = _check_essential_inputs(frozen, target)
    H, Hs = len(frozen[0]), len(target[0])
    f1, f2, c = frozen
    t1, t2, tc = target
    red = np.abs(_redundant(space, f1, f2, c, dt)) > 0
    mis = (np.abs(f1[:, None] - t1[None, :]) > ALIGN_TOL).astype(int) + (
        np.abs((f2 * c)[:, None] - (t2 * tc)[None, :]) > ALIGN_TOL
    )
    total_red = int(red.sum())
    cols = np.arange(Hs)
    # The tail's cost ignores its order, so the first full permutation with a
    # given head is that head followed by the remaining dims in ascending order.
    best, best_head = None, None
    for head in itertools.permutations(range(H), Hs):
        hd = list(head)
        cost = total_red - int(red[hd].sum()) + int(mis[hd, cols].sum())
        if best is None or cost < best:
            best, best_head = cost, head
    best_perm = tuple(best_head) + tuple(sorted(set(range(H)) - set(best_head)))
    f1, f2, c = (v.copy() for v in frozen)
    t1, t2, tc = target
    edits = []
    for pos, j in enumerate(best_perm):
        if pos >= Hs:
            if abs(_redundant(space, f1[j], f2[j], c[j], dt)) > 0:
                c[j] = 0.0
                edits.append((j, "c", 0.0))
            continue
        if abs(f1[j] - t1[pos]) > ALIGN_TOL:
            f1[j] = t1[pos]
            edits.append((j, "a", t1[pos]))
        if abs(f2[j] * c[j] - t2[pos] * tc[pos]) > ALIGN_TOL:
            c[j] = t2[pos] * tc[pos] / f2[j]
            edits.append((j, "c", c[j]))
    return EssentialResult(best, tuple(best_perm), (f1, f2, c), tuple(edits))


def essential_count_assignment(frozen, target, space="discretized", dt=1.0):
    """Same minimum via a rectangular assignment problem (independent of the brute force)."""
    frozen, target = _check_essential_inputs(frozen, target)
    f1, f2, c = frozen
    t1, t2, tc = target
    red = np.abs(_redundant(space, f1, f2, c, dt)) > 0
    cost = (
        (np.abs(f1[:, None] - t1[None, :]) > ALIGN_TOL).astype(float)
        + (np.abs((f2 * c)[:, None] - (t2 * tc)[None, :]) > ALIGN_TOL)
        - red[:, None]
    )
    rows, cols = linear_sum_assignment(cost)
    return int(round(red.sum() + cost[rows, cols].sum()))


# ---------------------------------------------------------------- layer-grouping embedding


@dataclass
class LayerInventory:
    role: str  # "emulate", "final", "identity"
    tuned_channels: set = field(default_factory=set)
    tuned_states: dict = field(default_factory=dict)  # channel -> set of states with a/c edits
    masked_entries: int = 0  # C entries set to zero
    pass_channels: set = field(default_factory=set)  # log_dt pushed to the pass-through regime
    w_rank: int = 0
    w_full: bool = False
    residual_changed: bool = False
    bias_changed: bool = False

    def to_dict(self):
        return {
            "role": self.role,
            "tuned_channels": len(self.tuned_channels),
            "max_tuned_states": max((len(v) for v in self.tuned_states.values()), default=0),
            "masked_entries": self.masked_entries,
            "pass_channels": len(self.pass_channels),
            "w_rank": self.w_rank,
            "w_full": self.w_full,
            "residual_changed": self.residual_changed,
            "bias_changed": self.bias_changed,
        }


@dataclass
class Embedding:
    model: StackedModel
    inventory: list
    group_size: int
    chunk: int


def _align_channel(layer_a, layer_b, layer_c, log_dt, t_a, t_b, t_c, t_log_dt):
    """Match one frozen channel to a target channel on H* states; returns new (a, c), tuned states."""
    dt, tdt = math.exp(log_dt), math.exp(t_log_dt)
    fa, fb = discretize(layer_a, layer_b, dt)
    ta, tb = discretize(t_a, t_b, tdt)
    res = essential_param_count((fa, fb, layer_c), (ta, tb, t_c))
    a, c = layer_a.copy(), layer_c.copy()
    Hs = len(t_a)
    tuned = set()
    for pos, j in enumerate(res.permutation):
        if pos >= Hs:
            c[j] = 0.0
            continue
        if abs(fa[j] - ta[pos]) > ALIGN_TOL:
            a[j] = math.log(ta[pos]) / dt
            tuned.add(j)
        _, new_bbar = discretize(a[j], layer_b[j], dt)
        want = tb[pos] * t_c[pos]
        if want == 0:
            c[j] = 0.0  # masking, not tuning
        elif abs(new_bbar * c[j] - want) > ALIGN_TOL:
            c[j] = want / new_bbar
            tuned.add(j)
    return a, c, tuned


def _rank(M):
    if not np.any(M):
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > RANK_RTOL * s[0]))


def construct_sdt_embedding(target, frozen):
    """Edit ``frozen`` so that it computes exactly what ``target`` computes.

    Both models are linear-activation deep S4 stacks; the target has no
    residual path. Groups of floor(L / L*) frozen layers emulate one target
    layer: each non-final layer of a group swaps in a chunk of ceil(D / group)
    target channels and passes every other channel through its residual; the
    group's final layer handles the last chunk, applies the target's W and
    beta, and turns already-processed channels into a scaled identity by
    pushing their step size into the regime where abar underflows to 0.
    Leftover layers become identities.
    """
    Ls, L = target.L, frozen.L
    if L < Ls:
        raise ValueError(f"frozen model needs at least as many layers as the target ({L} < {Ls})")
    if any(act != "linear" for act in frozen.activations + target.activations):
        raise ValueError("construction assumes linear activations")
    if any(np.any(t.u != 0) for t in target.layers):
        raise ValueError("target must not have residual connections")
    D = frozen.D
    if target.D != D:
        raise ValueError("target and frozen models must share D")
    if any(t.H > f.H for t in target.layers for f in frozen.layers):
        raise ValueError("target needs H* <= H")
    if any(np.any(layer.a >= 0) for layer in frozen.layers):
        raise ValueError("frozen state matrices must be strictly negative")
    k = L // Ls
    m = math.ceil(D / k)
    chunks = [list(range(j * m, min(D, (j + 1) * m))) for j in range(k)]
    new_layers, inventory = [], []
    for g in range(Ls):
        tl = target.layers[g]
        for j in range(k):
            layer = frozen.layers[g * k + j]
            final = j == k - 1
            active = chunks[j]
            a, c = layer.a.copy(), layer.c.copy()
            log_dt, W = layer.log_dt.copy(), layer.W.copy()
            inv = LayerInventory("final" if final else "emulate")
            for d in range(D):
                if d in active:
                    a[d], c[d], tuned = _align_channel(
                        layer.a[d], layer.b[d], layer.c[d], layer.log_dt[d], tl.a[d], tl.b[d], tl.c[d], tl.log_dt[d]
                    )
                    inv.masked_entries += int(np.sum((c[d] == 0) & (layer.c[d] != 0)))
                    if tuned:
                        inv.tuned_channels.add(d)
                        inv.tuned_states[d] = tuned
                elif final and any(d in ch for ch in chunks[:j]):
                    log_dt[d] = max(PASS_LOG_DT, math.log(800.0 / float(np.min(-layer.a[d]))))
                    inv.pass_channels.add(d)
                else:
                    inv.masked_entries += int(np.count_nonzero(c[d]))
                    c[d] = 0.0
            if final:
                W = tl.W.copy()
                for d in range(D):
                    if d in inv.pass_channels:
                        abar, bbar = discretize(a[d], layer.b[d], math.exp(log_dt[d]))
                        kappa = float(np.sum(bbar * c[d]))
                        if np.any(abar != 0) or kappa == 0:
                            raise ValueError(f"channel {d} cannot be turned into a pass-through")
                        W[:, d] = tl.W[:, d] / kappa
                beta, u = tl.beta.copy(), np.zeros(D)
                inv.w_full = True
            else:
                for d in active:
                    W[:, d] = np.eye(D)[:, d]
                beta = np.zeros(D)
                u = np.ones(D)
                u[active] = 0.0
            inv.w_rank = _rank(W - layer.W)
            inv.residual_changed = bool(np.any(u != layer.u))
            inv.bias_changed = bool(np.any(beta != layer.beta))
            new_layers.append(DeepS4Layer(a, layer.b, c, log_dt, W, beta, u))
            inventory.append(inv)
    for layer in frozen.layers[k * Ls :]:
        inv = LayerInventory("identity", masked_entries=int(np.count_nonzero(layer.c)))
        u, beta = np.ones(D), np.zeros(D)
        inv.residual_changed = bool(np.any(u != layer.u))
        inv.bias_changed = bool(np.any(beta != layer.beta))
        new_layers.append(DeepS4Layer(layer.a, layer.b, np.zeros_like(layer.c), layer.log_dt, layer.W, beta, u))
        inventory.append(inv)
    model = StackedModel(tuple(new_layers), frozen.activations)
    return Embedding(model, inventory, k, m)


def embedding_budget(target, frozen):
    """Per-layer budgets stated for the construction."""
    L, Ls, D = frozen.L, target.L, frozen.D
    return {
        "channels": math.ceil(D * Ls / L),
        "states": max(t.H for t in target.layers),
        "rank": math.ceil(L / Ls),
    }


def check_budgets(embedding, target, frozen):
    """List of budget violations (empty when every layer complies)."""
    b = embedding_budget(target, frozen)
    out = []
    for i, inv in enumerate(embedding.inventory):
        d = inv.to_dict()
        if d["tuned_channels"] > b["channels"]:
            out.append(f"layer {i}: {d['tuned_channels']} tuned channels > {b['channels']}")
        if d["max_tuned_states"] > b["states"]:
            out.append(f"layer {i}: {d['max_tuned_states']} tuned states > {b['states']}")
        if not inv.w_full and d["w_rank"] > b["rank"]:
            out.append(f"layer {i}: projection update rank {d['w_rank']} > {b['rank']}")
    return out


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class OracleReport:
    name: str
    instance: str
    discrepancy: float
    threshold: float

    @property
    def passed(self):
        return bool(self.discrepancy <= self.threshold)

    @property
    def verdict(self):
        return "PASS" if self.passed else "FAIL"

    def line(self):
        return f"{self.verdict} {self.name} [{self.instance}] discrepancy={self.discrepancy:.3e} threshold={self.threshold:.1e}"


def random_channel(rng, H):
    """Discretized channel with distinct abar in (0, 1) and nonzero bbar, c."""
    while True:
        abar = rng.uniform((H,), 0.05, 0.95)
        if H == 1 or np.min(np.diff(np.sort(abar))) > 1e-3:
            break
    bbar = rng.uniform((H,), 0.2, 1.0) * np.where(rng.uniform((H,)) < 0.5, -1.0, 1.0)
    c = rng.normal((H,))
    c[np.abs(c) < 1e-3] = 1.0
    return abar, bbar, c


def max_rel_diff(x, y):
    return float(np.max(np.abs(x - y)) / max(1.0, float(np.max(np.abs(y)))))


def oracle_scan_conv(rng, trials):
    reps = []
    for t in range(trials):
        r = rng.spawn(t)
        H = int(r.integers((), 1, 17))
        N = int(r.integers((), 1, 257))
        abar, bbar, c = random_channel(r, H)
        x = r.normal((N,))
        y_scan, _ = scan_discrete(abar, bbar, c, x)
        K = kernel_discrete(abar, bbar, c, N)
        y_conv = np.convolve(x, K)[:N]
        reps.append(OracleReport("scan_conv", f"H={H} N={N}", max_rel_diff(y_conv, y_scan), 1e-9))
    return reps


def oracle_prefix_state(rng, trials):
    reps = []
    for t in range(trials):
        r = rng.spawn(t)
        H = int(r.integers((), 1, 9))
        M = int(r.integers((), 1, 17))
        N = int(r.integers((), 1, 65))
        abar, bbar, c = random_channel(r, H)
        P, x = r.normal((M,)), r.normal((N,))
        y_full, _ = scan_discrete(abar, bbar, c, np.concatenate([P, x]))
        y_init, _ = scan_discrete(abar, bbar, c, x, prefix_to_initial_state(abar, bbar, P))
        reps.append(OracleReport("prefix_state", f"H={H} M={M} N={N}", max_rel_diff(y_init, y_full[M:]), 1e-9))
    return reps


def oracle_reachability(rng, trials):
    """Rank verdict must equal (M >= H); when reachable, the inverse map is backward stable."""
    reps = []
    for t in range(trials):
        r = rng.spawn(t)
        H = int(r.integers((), 1, 7))
        M = int(r.integers((), 1, 9))
        abar, bbar, _ = random_channel(r, H)
        _, full = reachability_rank(abar, bbar, M)
        reps.append(OracleReport("reachability", f"H={H} M={M} verdict", 0.0 if full == (M >= H) else 1.0, 0.0))
        if full:
            h0 = r.normal((H,))
            P = initial_state_to_prefix(abar, bbar, h0, M)
            err = backward_error(_reach_matrix(abar, bbar, M), P, h0)
            reps.append(OracleReport("reachability", f"H={H} M={M} round-trip backward error", err, 1e-13))
    return reps


def random_s6(rng, D, H, r):
    from .ssm import init_s6_block

    return init_s6_block(rng, D, H, r)


def oracle_win_hat(rng, trials):
    reps = []
    for t in range(trials):
        r = rng.spawn(t)
        H = int(r.integers((), 1, 4))
        rk = int(r.integers((), 1, 3))
        D = 2 * H + rk + int(r.integers((), 0, 4))
        block = random_s6(r, D, H, rk)
        W = w_s6(block)
        W_bar = W + r.normal(W.shape) * 0.5
        W_hat = construct_win_hat(W_bar, W, block.w_in)
        updated_s6 = with_w_s6(block, W_bar)
        from dataclasses import replace

        updated_in = replace(block, w_in=W_hat)
        X = r.normal((D, 16))
        a = s6_induced(updated_s6, X)
        b = s6_induced(updated_in, X)
        disc = max(max_rel_diff(p, q) for p, q in zip(b, a))
        reps.append(OracleReport("win_hat", f"D={D} H={H} r={rk}", disc, 1e-9))
    return reps


def random_essential_instance(r, H, Hs):
    """Target with Hs states and a frozen channel sharing a random subset of its entries."""
    ta, tb, tc = random_channel(r, Hs)
    fa, fb, fc = random_channel(r, H)
    slots = r.permutation(H)[:Hs]
    for pos, j in enumerate(slots):
        u = r.uniform((2,))
        if u[0] < 0.5:
            fa[j] = ta[pos]
        if u[1] < 0.5:
            fc[j] = tb[pos] * tc[pos] / fb[j]
    return (fa, fb, fc), (ta, tb, tc)


def oracle_essential(rng, trials, max_h=5):
    reps = []
    for H in range(1, max_h + 1):
        for Hs in range(1, H + 1):
            for t in range(trials):
                r = rng.spawn(H, Hs, t)
                frozen, target = random_essential_instance(r, H, Hs)
                res = essential_param_count(frozen, target)
                exhaustive = min(_objective("discretized", frozen, target, 1.0, p) for p in itertools.permutations(range(H)))
                assign = essential_count_assignment(frozen, target)
                x = r.normal((32,))
                y_upd, _ = scan_discrete(*res.updated, x)
                y_tgt, _ = scan_discrete(*target, x)
                disc = max_rel_diff(y_upd, y_tgt) + abs(res.count - exhaustive) + abs(res.count - assign)
                disc += abs(len(res.edits) - res.count)
                reps.append(OracleReport("essential", f"H={H} H*={Hs} count={res.count}", disc, 1e-9))
    return reps


def random_target_and_frozen(r, L, D, H, Ls=1, Hs=None):
    from .ssm import init_model

    Hs = Hs or max(1, H // 2)
    target = init_model(r.spawn(1), Ls, D, Hs, activation="linear", residual=False)
    target = target.replace({f"layers.{i}.a": -r.spawn(2, i).uniform((D, Hs), 0.5, 3.0) for i in range(Ls)})
    frozen = init_model(r.spawn(3), L, D, H, activation="linear", residual=True)
    frozen = frozen.replace({f"layers.{i}.u": r.spawn(4, i).normal((D,)) for i in range(L)})
    frozen = frozen.replace({f"layers.{i}.beta": r.spawn(5, i).normal((D,)) * 0.1 for i in range(L)})
    return target, frozen


def embedding_report(target, frozen, X):
    from .ssm import model_forward

    emb = construct_sdt_embedding(target, frozen)
    disc = max(max_rel_diff(model_forward(emb.model, x)[0], model_forward(target, x)[0]) for x in X)
    return emb, disc, check_budgets(emb, target, frozen)


def oracle_embedding(rng, trials, shapes=((2, 2, 4, 2), (4, 8, 4, 2), (4, 64, 8, 4))):
    reps = []
    for L, D, H, Hs in shapes:
        for t in range(max(1, trials // 10)):
            r = rng.spawn(L, D, t)
            target, frozen = random_target_and_frozen(r, L, D, H, 1, Hs)
            X = [r.spawn(9, i).normal((D, 24)) for i in range(3)]
            emb, disc, violations = embedding_report(target, frozen, X)
            reps.append(OracleReport("embedding", f"L={L} D={D} H={H} H*={Hs} equality", disc, 1e-8))
            reps.append(
                OracleReport(
                    "embedding",
                    f"L={L} D={D} budgets" + (": " + "; ".join(violations[:2]) if violations else ""),
                    float(len(violations)),
                    0.0,
                )
            )
    return reps


def grad_check_instance(rng, kind):
    """Deep S4 (L=2, D=8, H=8) or S6 (D=8, H=4, r=2) with MSE against a perturbed copy's outputs.

    Targets come from a slightly perturbed model (the fine-tuning regime). With
    unrelated random targets the loss is O(1), and central-difference roundoff
    (~1e-11 absolute at eps=1e-5) swamps the ~1e-8 gradients of channels with
    tiny step sizes.
    """
    from . import num
    from .ssm import frozen_values, init_model, model_forward, model_graph

    if kind == "s4":
        model = init_model(rng, 2, 8, 8, activation="relu")
    else:
        model = init_model(rng, 1, 8, 4, activation="linear", kind="s6", r=2)
    X = rng.spawn(1).normal((1, model.D, 32))
    params = model.named_parameters()
    noisy = {
        k: v + 0.05 * (np.abs(v).mean() + 1e-3) * rng.spawn(7, i).normal(v.shape) for i, (k, v) in enumerate(params.items())
    }
    Y = model_forward(model.replace(noisy), X[0])[0][None]

    def loss(nodes):
        out, _ = model_graph(model, {**frozen_values(model), **nodes}, X)
        diff = out - num.constant(Y)
        return (diff * diff).mean()

    return loss, dict(params)


def oracle_grad(rng, trials):
    from . import num

    reps = []
    for kind in ("s4", "s6"):
        for t in range(max(1, trials // 10)):
            loss, params = grad_check_instance(rng.spawn(len(kind), t), kind)
            err = num.grad_check(loss, params, eps=1e-5)
            reps.append(OracleReport("grad_check", f"{kind} params={sum(v.size for v in params.values())}", err, 1e-4))
    return reps


ORACLES = {
    "scan_conv": oracle_scan_conv,
    "grad_check": oracle_grad,
    "prefix_state": oracle_prefix_state,
    "reachability": oracle_reachability,
    "win_hat": oracle_win_hat,
    "essential": oracle_essential,
    "embedding": oracle_embedding,
}


def run_oracles(names=None, seed=0, trials=10):
    from .num import RngStream

    names = list(ORACLES) if names is None else list(names)
    reports = []
    for i, name in enumerate(names):
        if name not in ORACLES:
            raise KeyError(f"unknown oracle {name!r}; choose from {sorted(ORACLES)}")
        reports.extend(ORACLES[name](RngStream(seed, (i + 1000,)), trials))
    return reports
