"""Deterministic in-process simulation of tensor parallelism for the block.

Two sharding schemes:

* grouped-value ("topology-aware"): every shard gets its own query/key head,
  a slice of the value heads, and its own norm weights; each shard is a
  plain multi-value block, and the only collective is the standard
  output-projection sum (forward) and input-gradient sum (backward).
* shared-q/k ("topology-independent"): query/key projections replicated,
  value heads partitioned, norm weight sharded along features. Costs one
  extra AllReduce in the forward (norm statistic) and three in the backward
  (norm reduction, and the two shared q/k activation gradients).

Workers are written once as generators yielding AllReduce payloads; a
sequential round-robin driver and a threaded driver produce identical
results because the combine order over shards is fixed ascending.
"""

import threading
from dataclasses import dataclass, field

import numpy as np

from . import layer as ml
from . import recurrence as rec
from . import tensor_core as tc


class ProtocolError(RuntimeError):
    """A collective was joined inconsistently across shards."""


@dataclass
class ReduceRound:
    round_id: int
    op: str
    elements: int


class CollectiveBus:
    """Barrier-synchronized sum reductions with a fixed ascending combine
    order and a per-round log. Usable concurrently from shard threads."""

    def __init__(self, world_size):
        self.world_size = world_size
        self.log = []
        self._cond = threading.Condition()
        self._shard_round = [0] * world_size
        self._payloads = {}
        self._results = {}
        self._active_round = 0
        self._departed = set()
        self._error = None

    def _combine(self, payloads_by_shard, round_id):
        """Sum over shards in ascending shard-id order; logs the round."""
        shard_ids = sorted(payloads_by_shard)
        shapes = {payloads_by_shard[s].shape for s in shard_ids}
        if len(shapes) != 1:
            raise ProtocolError(f"round {round_id}: payload shapes disagree: {sorted(shapes)}")
        total = payloads_by_shard[shard_ids[0]].astype(np.float64, copy=True)
        for s in shard_ids[1:]:
            total = total + payloads_by_shard[s]
        self.log.append(ReduceRound(round_id=round_id, op="all_reduce_sum",
                                    elements=int(total.size)))
        return total

    def all_reduce_sum(self, shard_id, payload):
        """Blocking collective sum; every shard receives the identical total."""
        payload = np.asarray(payload, dtype=np.float64)
        with self._cond:
            round_id = self._shard_round[shard_id]
            self._shard_round[shard_id] += 1
            if self._error is not None:
                raise ProtocolError(self._error)
            prev = next(iter(self._payloads.values()), None)
            if prev is not None and prev.shape != payload.shape:
                self._error = (f"round {round_id}: payload shapes disagree: "
                               f"{prev.shape} vs {payload.shape}")
                self._cond.notify_all()
                raise ProtocolError(self._error)
            self._payloads[shard_id] = payload
            if len(self._payloads) + len(self._departed) == self.world_size:
                if len(self._departed) > 0:
                    self._error = (f"round {round_id}: shards {sorted(self._departed)} "
                                   "left before joining")
                    self._cond.notify_all()
                    raise ProtocolError(self._error)
                try:
                    self._results[round_id] = self._combine(self._payloads, round_id)
                except ProtocolError as err:
                    self._error = str(err)
                    self._cond.notify_all()
                    raise
                self._payloads = {}
                self._active_round += 1
                self._cond.notify_all()
            else:
                self._cond.wait_for(
                    lambda: round_id in self._results or self._error is not None)
                if self._error is not None and round_id not in self._results:
                    raise ProtocolError(self._error)
            return self._results[round_id].copy()

    def leave(self, shard_id):
        """Deregister a finished shard; flags a deadlock if a round is open."""
        with self._cond:
            self._departed.add(shard_id)
            if self._payloads and len(self._payloads) + len(self._departed) >= self.world_size:
                self._error = (f"shard {shard_id} left while round "
                               f"{self._active_round} was waiting for it")
                self._cond.notify_all()


def all_reduce_sum(bus, shard_id, payload):
    """Module-level alias for the bus collective."""
    return bus.all_reduce_sum(shard_id, payload)


def run_workers_sequential(bus, workers):
    """Round-robin cooperative driver for generator workers.

    Advances every worker (ascending shard id) to its next yield, combines,
    sends the result back. A worker finishing while others still wait on a
    round is a protocol error.
    """
    n = len(workers)
    gens = list(workers)
    results = [None] * n
    active = list(range(n))
    round_id = 0
    to_send = {}
    while active:
        requests = {}
        finished = []
        for sid in list(active):
            try:
                if sid in to_send:
                    requests[sid] = gens[sid].send(to_send.pop(sid))
                else:
                    requests[sid] = next(gens[sid])
            except StopIteration as stop:
                results[sid] = stop.value
                finished.append(sid)
        for sid in finished:
            active.remove(sid)
        if not requests:
            break
        if finished or len(requests) != n:
            raise ProtocolError(
                f"round {round_id}: shards {sorted(set(range(n)) - set(requests))} "
                "did not join")
        payloads = {sid: np.asarray(requests[sid], dtype=np.float64) for sid in requests}
        total = bus._combine(payloads, round_id)
        round_id += 1
        to_send = {sid: total.copy() for sid in requests}
    return results


def run_workers_threaded(bus, workers):
    """Drive the generator workers on real threads through the blocking bus."""
    n = len(workers)
    results = [None] * n
    errors = [None] * n

    def drive(sid):
        gen = workers[sid]
        try:
            try:
                request = next(gen)
                while True:
                    reply = bus.all_reduce_sum(sid, request)
                    request = gen.send(reply)
            except StopIteration as stop:
                results[sid] = stop.value
        except BaseException as exc:  # noqa: BLE001 - propagated to caller
            errors[sid] = exc
        finally:
            bus.leave(sid)

    threads = [threading.Thread(target=drive, args=(sid,)) for sid in range(n)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


# --- sharding ------------------------------------------------------------------

@dataclass
class ShardSpec:
    """How heads and norm features split across simulated workers."""
    world_size: int
    scheme: str
    head_ranges: list
    feature_ranges: list


def _head_slices(n_heads, world):
    if n_heads % world != 0:
        raise rec.ConfigError(f"{n_heads} value heads not divisible by world size {world}")
    per = n_heads // world
    return [(s * per, (s + 1) * per) for s in range(world)]


def _slice_params(params, lo, hi, q_k_copy):
    """Sub-layer over value heads [lo, hi); q/k tensors are copies."""
    v = params.v_dim
    return ml.M2RNNLayerParams(
        d_model=params.d_model, n_heads=hi - lo, k_dim=params.k_dim, v_dim=v,
        w_q=q_k_copy(params.w_q), b_q=q_k_copy(params.b_q), conv_q=q_k_copy(params.conv_q),
        w_k=q_k_copy(params.w_k), b_k=q_k_copy(params.b_k), conv_k=q_k_copy(params.conv_k),
        w_v=params.w_v[:, lo * v:hi * v].copy(),
        b_v=params.b_v[lo * v:hi * v].copy(),
        conv_v=params.conv_v[:, lo * v:hi * v].copy(),
        w_f=params.w_f[:, lo:hi].copy(),
        w_g=params.w_g[:, lo * v:hi * v].copy(),
        transition=params.transition[lo:hi].copy(),
        w_r=params.w_r[lo:hi].copy(),
        rms_weight=params.rms_weight[lo * v:hi * v].copy(),
        w_o=params.w_o[lo * v:hi * v].copy(),
        gate=rec.ForgetGateParams(alpha=params.gate.alpha[lo:hi].copy(),
                                  beta=params.gate.beta[lo:hi].copy()),
        rms_groups=1,
        rms_eps=params.rms_eps,
        clip=params.clip,
    )


def shard_topology_aware(params, world_size):
    """Grouped-value sharding: every shard owns a full q/k head pair plus its
    value-head slice and local norm weights. Returns (spec, shard_params)."""
    ranges = _head_slices(params.n_heads, world_size)
    shards = [_slice_params(params, lo, hi, q_k_copy=lambda a: a.copy())
              for lo, hi in ranges]
    v = params.v_dim
    spec = ShardSpec(world_size=world_size, scheme="topology-aware",
                     head_ranges=ranges,
                     feature_ranges=[(lo * v, hi * v) for lo, hi in ranges])
    return spec, shards


def shard_topology_independent(params, world_size):
    """Shared-q/k sharding: q/k replicated bit-identically, value heads and
    norm features partitioned. Returns (spec, shard_params)."""
    ranges = _head_slices(params.n_heads, world_size)
    shards = [_slice_params(params, lo, hi, q_k_copy=lambda a: a.copy())
              for lo, hi in ranges]
    v = params.v_dim
    spec = ShardSpec(world_size=world_size, scheme="topology-independent",
                     head_ranges=ranges,
                     feature_ranges=[(lo * v, hi * v) for lo, hi in ranges])
    return spec, shards


def distinct_parameter_count(shards, scheme):
    """Number of distinct learnable scalars across the sharded model.

    Under the shared-q/k scheme the replicated q/k tensors count once."""
    total = 0
    for i, shard in enumerate(shards):
        for name, arr in shard.named_tensors():
            replicated = name in ("w_q", "b_q", "conv_q", "w_k", "b_k", "conv_k")
            if scheme == "topology-independent" and replicated and i > 0:
                continue
            total += arr.size
    return total


# --- RMSNorm with sharded features ----------------------------------------------

def rmsnorm_tp_forward(bus, shard_id, x_local, w_local, d_global, eps=tc.RMS_EPS):
    """Feature-sharded RMSNorm forward: one scalar-per-token AllReduce."""
    x_local = tc.asarray64(x_local)
    local_ssq = tc._feature_square_sum(x_local)
    total_ssq = bus.all_reduce_sum(shard_id, local_ssq)
    s = tc.rms_scale_from_ssq(total_ssq, d_global, eps)
    y_local = (w_local * x_local) * s[..., None]
    return y_local, s


def rmsnorm_tp_backward(bus, shard_id, x_local, w_local, s, dy_local, d_global):
    """Feature-sharded RMSNorm backward: one scalar-per-token AllReduce."""
    x_local = tc.asarray64(x_local)
    p = w_local * tc.asarray64(dy_local)
    r_local = np.zeros(x_local.shape[:-1])
    for j in range(x_local.shape[-1]):
        r_local = r_local + p[..., j] * x_local[..., j]
    r = bus.all_reduce_sum(shard_id, r_local)
    dx, dw_terms = tc.rms_backward_from_r(x_local, w_local, s, dy_local, r,
                                          nfeat=d_global)
    if x_local.ndim == 1:
        return dx, dw_terms
    return dx, np.sum(dw_terms.reshape(-1, x_local.shape[-1]), axis=0)


# --- full layer step under TP -----------------------------------------------------

@dataclass
class CommLogRow:
    step: int
    direction: str
    round: int
    op: str
    elements: int


@dataclass
class TPStepResult:
    output: np.ndarray
    dx: np.ndarray
    grads: dict
    comm_log: list
    forward_rounds: int
    backward_rounds: int
    shard_grads: list = field(default_factory=list)


def comm_log_to_csv(rows):
    lines = ["step,direction,round,op,elements"]
    for r in rows:
        lines.append(f"{r.step},{r.direction},{r.round},{r.op},{r.elements}")
    return "\n".join(lines) + "\n"


def _aware_worker(shard_params, x, dy, clip):
    """Grouped-value shard: an unmodified block plus the standard reduces."""
    o_partial, _, cache = ml.layer_forward_train(shard_params, x)
    o = yield o_partial
    grads, dx_partial = ml.layer_backward(shard_params, cache, dy, clip=clip)
    dx = yield dx_partial
    return {"o": o, "dx": dx, "grads": grads}


def _independent_worker(shard_params, x, dy, nv_global, is_root, clip):
    """Shared-q/k shard: manual block step with the extra synchronizations."""
    p = shard_params
    b, t, d = x.shape
    x2 = x.reshape(b * t, d)
    nv_local = p.nv

    (proj_q, conv_q_out, q, proj_k, conv_k_out, k, proj_v, conv_v_out, v,
     u_f, f, u_g, g) = ml._project(p, x)

    h0 = np.zeros((b, p.n_heads, p.k_dim, p.v_dim))
    inputs = rec.RecurrenceInputs(q=q, k=k, v=v, f=f, h0=h0, w=p.transition)
    h_full = rec.m2rnn_forward_cached(inputs)
    y = rec.readout_from_states(h_full, q)

    y_res = y.reshape(b, t, nv_local) + p.w_r.reshape(nv_local) * v.reshape(b, t, nv_local)
    gated = y_res * g

    # forward sync 1: norm statistic (one scalar per token)
    local_ssq = tc._feature_square_sum(gated.reshape(b * t, nv_local))
    total_ssq = yield local_ssq
    s = tc.rms_scale_from_ssq(total_ssq, nv_global, p.rms_eps)
    normed = (p.rms_weight * gated.reshape(b * t, nv_local)) * s[:, None]

    # forward sync 2: standard output-projection reduction
    o_partial = tc.matmul(normed, p.w_o).reshape(b, t, d)
    o = yield o_partial

    # backward
    grads = {}
    dy2 = tc.asarray64(dy).reshape(b * t, d)
    grads["w_o"] = tc.matmul(normed.T, dy2)
    dnormed = tc.matmul(dy2, p.w_o.T)

    # backward sync 1: norm reduction (one scalar per token)
    gated2 = gated.reshape(b * t, nv_local)
    pvec = p.rms_weight * dnormed
    r_local = np.zeros(b * t)
    for j in range(nv_local):
        r_local = r_local + pvec[:, j] * gated2[:, j]
    r = yield r_local
    dgated2, dw_terms = tc.rms_backward_from_r(gated2, p.rms_weight, s, dnormed, r,
                                               nfeat=nv_global)
    grads["rms_weight"] = np.sum(dw_terms, axis=0)
    dgated = dgated2.reshape(b, t, nv_local)

    dy_res = dgated * g
    dg = dgated * y_res
    du_g = dg * tc.silu_grad(u_g)
    du_g2 = du_g.reshape(b * t, nv_local)
    grads["w_g"] = tc.matmul(x2.T, du_g2)
    dx2 = tc.matmul(du_g2, p.w_g.T)

    v_flat = v.reshape(b, t, nv_local)
    grads["w_r"] = np.sum(dy_res * v_flat, axis=(0, 1)).reshape(p.n_heads, p.v_dim)
    dv_res = (dy_res * p.w_r.reshape(nv_local)).reshape(v.shape)

    rg = rec.m2rnn_backward(inputs, h_full, dy_res.reshape(v.shape), clip=clip)
    grads["transition"] = rg.dw

    dpsi_dx, dpsi_da, dpsi_db = rec.forget_gate_grad(u_f, p.gate.alpha, p.gate.beta)
    du_f = rg.df * dpsi_dx
    grads["gate_alpha"] = np.sum(rg.df * dpsi_da, axis=(0, 1))
    grads["gate_beta"] = np.sum(rg.df * dpsi_db, axis=(0, 1))
    du_f2 = du_f.reshape(b * t, p.n_heads)
    grads["w_f"] = tc.matmul(x2.T, du_f2)
    dx2 = dx2 + tc.matmul(du_f2, p.w_f.T)

    # backward syncs 2+3: shared q/k activation gradients (partial per shard)
    dq_total = yield rg.dq
    dk_total = yield rg.dk

    def back_projection(dact, conv_out, proj, conv_kernel, w):
        dconv = dact * tc.silu_grad(conv_out)
        dproj, dkernel = ml._batched_conv_backward(proj, conv_kernel, dconv)
        dproj2 = dproj.reshape(b * t, -1)
        return (tc.matmul(x2.T, dproj2), np.sum(dproj2, axis=0), dkernel,
                tc.matmul(dproj2, w.T))

    grads["w_q"], grads["b_q"], grads["conv_q"], dxq = back_projection(
        dq_total, conv_q_out, proj_q, p.conv_q, p.w_q)
    grads["w_k"], grads["b_k"], grads["conv_k"], dxk = back_projection(
        dk_total, conv_k_out, proj_k, p.conv_k, p.w_k)
    if is_root:
        # replicated-path input gradient is counted exactly once
        dx2 = dx2 + dxq + dxk

    dv_total = (rg.dv + dv_res).reshape(b, t, nv_local)
    grads["w_v"], grads["b_v"], grads["conv_v"], dxv = back_projection(
        dv_total, conv_v_out, proj_v, p.conv_v, p.w_v)
    dx2 = dx2 + dxv

    # backward sync 4: standard input-gradient reduction
    dx = yield dx2.reshape(b, t, d)
    return {"o": o, "dx": dx, "grads": grads}


def tp_layer_step(scheme, world_size, params, x, dy, mode="sequential", step=0):
    """One forward+backward of the block under a sharding scheme.

    Returns a TPStepResult whose grads are reassembled to the unsharded
    layout (replicated q/k gradients taken from shard 0; they are asserted
    bit-identical across shards). The comm_log covers every AllReduce round,
    including the standard output/input reductions.
    """
    if scheme == "topology-aware":
        spec, shards = shard_topology_aware(params, world_size)
        n_fwd = 1
        workers = [_aware_worker(sp, x, dy, params.clip) for sp in shards]
    elif scheme == "topology-independent":
        spec, shards = shard_topology_independent(params, world_size)
        n_fwd = 2
        workers = [_independent_worker(sp, x, dy, params.nv, sid == 0, params.clip)
                   for sid, sp in enumerate(shards)]
    else:
        raise rec.ConfigError(f"unknown TP scheme {scheme!r}")

    bus = CollectiveBus(world_size)
    if mode == "sequential":
        results = run_workers_sequential(bus, workers)
    elif mode == "threads":
        results = run_workers_threaded(bus, workers)
    else:
        raise rec.ConfigError(f"unknown execution mode {mode!r}")

    comm_log = [CommLogRow(step=step,
                           direction="forward" if r.round_id < n_fwd else "backward",
                           round=r.round_id, op=r.op, elements=r.elements)
                for r in bus.log]

    grads = _reassemble_grads(scheme, spec, params, [res["grads"] for res in results])
    return TPStepResult(output=results[0]["o"], dx=results[0]["dx"], grads=grads,
                        comm_log=comm_log, forward_rounds=n_fwd,
                        backward_rounds=len(bus.log) - n_fwd,
                        shard_grads=[res["grads"] for res in results])


def _reassemble_grads(scheme, spec, params, shard_grads):
    """Concatenate per-shard gradients back to the unsharded layout."""
    v = params.v_dim
    out = {}
    replicated = ("w_q", "b_q", "conv_q", "w_k", "b_k", "conv_k")
    if scheme == "topology-independent":
        for name in replicated:
            ref = shard_grads[0][name]
            for other in shard_grads[1:]:
                if not np.array_equal(ref, other[name]):
                    raise ProtocolError(f"replicated gradient {name} diverged across shards")
            out[name] = ref
    out["w_v"] = np.concatenate([g["w_v"] for g in shard_grads], axis=1)
    out["b_v"] = np.concatenate([g["b_v"] for g in shard_grads])
    out["conv_v"] = np.concatenate([g["conv_v"] for g in shard_grads], axis=1)
    out["w_f"] = np.concatenate([g["w_f"] for g in shard_grads], axis=1)
    out["w_g"] = np.concatenate([g["w_g"] for g in shard_grads], axis=1)
    out["transition"] = np.concatenate([g["transition"] for g in shard_grads], axis=0)
    out["w_r"] = np.concatenate([g["w_r"] for g in shard_grads], axis=0)
    out["rms_weight"] = np.concatenate([g["rms_weight"] for g in shard_grads])
    out["w_o"] = np.concatenate([g["w_o"] for g in shard_grads], axis=0)
    out["gate_alpha"] = np.concatenate([g["gate_alpha"] for g in shard_grads])
    out["gate_beta"] = np.concatenate([g["gate_beta"] for g in shard_grads])
    return out
