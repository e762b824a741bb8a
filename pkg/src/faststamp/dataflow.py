"""Streaming simulation of the quantized encoder as a graph of dataflow stages.

Every layer is a stage (a Python generator) and stages talk only through
bounded single-producer/single-consumer FIFOs. The stream element is one
pixel's channel vector of raw fixed-point words, in raster order, image
after image. Skip connections leave through clone stages, which copy their
input stream into two FIFOs because a FIFO can be read only once.

A stage yields requests to the scheduler:

* ``("get", fifo)``: receive the next element (sent back into the generator)
* ``("put", fifo, value)``: append an element

A request is ready when the FIFO is non-empty (get) or not full (put).
Schedulers pick among ready stages; a full pass over the stages without a
single step while some stage is unfinished is a deadlock, reported with
the wait-for cycle that blocks it.

Graph dump format (``StageGraph.dump``), one line per item::

    stage <id> <kind> in=<fifo,...> out=<fifo,...> [key=value ...]
    fifo <id> cap=<capacity> width=<channels> <producer> -> <consumer>

Run report (``RunReport.records``), one JSON object per line with a
``record`` field of ``fifo``, ``stage`` or ``summary``.
"""
import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import quant
from .errors import ConfigError, DeadlockError, ShapeError
from .model import _bits, _spatial_sizes

KINDS = ("source", "linear", "upsample", "concat", "clone", "dwconv", "pwconv", "bn", "act", "sink")


@dataclass
class FifoChannel:
    id: str
    width: int                 # channels per element
    capacity: int
    producer: str = ""
    consumer: str = ""
    skip: bool = False         # carries a skip connection out of a clone stage


@dataclass
class Stage:
    id: str
    kind: str
    inputs: list
    outputs: list
    attrs: dict = field(default_factory=dict)   # geometry (plain values)
    params: dict = field(default_factory=dict)  # bound raw weights


class StageGraph:
    def __init__(self, qparams):
        self.qparams = qparams
        self.stages = {}
        self.fifos = {}
        self.order = []

    # -- construction
    def fifo(self, fid, width, capacity, skip=False):
        if fid in self.fifos:
            raise ConfigError(f"duplicate FIFO id {fid}")
        self.fifos[fid] = FifoChannel(fid, width, capacity, skip=skip)
        return fid

    def stage(self, sid, kind, inputs, outputs, attrs=None, params=None):
        if kind not in KINDS:
            raise ConfigError(f"unknown stage kind {kind!r}")
        if sid in self.stages:
            raise ConfigError(f"duplicate stage id {sid}")
        self.stages[sid] = Stage(sid, kind, list(inputs), list(outputs), attrs or {}, params or {})
        for f in inputs:
            if self.fifos[f].consumer:
                raise ConfigError(f"FIFO {f} already has consumer {self.fifos[f].consumer}")
            self.fifos[f].consumer = sid
        for f in outputs:
            if self.fifos[f].producer:
                raise ConfigError(f"FIFO {f} already has producer {self.fifos[f].producer}")
            self.fifos[f].producer = sid
        return sid

    # -- checks
    def topological_order(self):
        indeg = {s: 0 for s in self.stages}
        for f in self.fifos.values():
            indeg[f.consumer] += 1
        ready = deque(s for s in self.stages if indeg[s] == 0)
        order = []
        while ready:
            s = ready.popleft()
            order.append(s)
            for f in self.stages[s].outputs:
                c = self.fifos[f].consumer
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.stages):
            raise ConfigError("stage graph has a cycle")
        return order

    def validate(self):
        """Raise :class:`ConfigError` listing every structural problem found."""
        problems = []
        for f in self.fifos.values():
            if not f.producer or not f.consumer:
                problems.append(f"FIFO {f.id} lacks a producer or consumer")
            if f.capacity < 1:
                problems.append(f"FIFO {f.id} capacity {f.capacity} < 1")
        arity = {"clone": (1, 2), "concat": (2, 1), "source": (0, 1), "sink": (1, 0)}
        for s in self.stages.values():
            want = arity.get(s.kind, (1, 1))
            if (len(s.inputs), len(s.outputs)) != want:
                problems.append(f"stage {s.id} ({s.kind}) has {len(s.inputs)} inputs / "
                                f"{len(s.outputs)} outputs, expected {want}")
        for f in self.fifos.values():
            if f.skip and f.producer and self.stages[f.producer].kind != "clone":
                problems.append(f"skip FIFO {f.id} is not fed by a clone stage")
        if problems:
            raise ConfigError("; ".join(problems))
        self.order = self.topological_order()
        return self

    def count(self, kind):
        return sum(1 for s in self.stages.values() if s.kind == kind)

    def capacities(self):
        return {f: c.capacity for f, c in self.fifos.items()}

    def with_capacities(self, caps):
        g = StageGraph(self.qparams)
        g.stages = self.stages
        g.fifos = {f: FifoChannel(c.id, c.width, int(caps.get(f, c.capacity)), c.producer, c.consumer, c.skip)
                   for f, c in self.fifos.items()}
        g.order = self.order
        return g

    def dump(self):
        lines = []
        for sid in self.order:
            s = self.stages[sid]
            extra = "".join(f" {k}={v}" for k, v in sorted(s.attrs.items()))
            lines.append(f"stage {sid} {s.kind} in={','.join(s.inputs) or '-'} "
                         f"out={','.join(s.outputs) or '-'}{extra}")
        for f in self.fifos.values():
            lines.append(f"fifo {f.id} cap={f.capacity} width={f.width} {f.producer} -> {f.consumer}"
                         + (" skip" if f.skip else ""))
        return "\n".join(lines) + "\n"


# ------------------------------------------------------------ graph construction


def build_pipeline(qparams, config=None, capacity=None, skip_capacity=None):
    """One stage per encoder layer plus sources, clones and the sink.

    Default FIFO capacities: two rows of the stream for ordinary FIFOs and a
    whole frame for skip FIFOs (``capacity``/``skip_capacity`` override
    them with a single number).
    """
    cfg = config or qparams.config
    if config is not None and config != qparams.config:
        raise ConfigError("model config does not match the quantized parameters")
    g = StageGraph(qparams)
    t = qparams.tensors
    H, W = cfg.image_size
    sizes = _spatial_sizes((H, W), cfg.enc_strides)

    def cap(hw, skip=False):
        if skip:
            return skip_capacity or hw[0] * hw[1]
        return capacity or 2 * hw[1]

    def new(fid, width, hw, skip=False):
        return g.fifo(fid, width, cap(hw, skip), skip)

    # message path
    gh, gw = cfg.grid
    g.stage("src.msg", "source", [], [new("f.msg", cfg.message_length, (1, 1))], {"what": "message"})
    g.stage("enc.msg.linear", "linear", ["f.msg"], [new("f.grid", 1, (gh, gw))],
            {"grid": (gh, gw)}, {"w": t["enc.msg.w"], "b": t["enc.msg.b"]})
    g.stage("enc.msg.up", "upsample", ["f.grid"], [new("f.plane", 1, (H, W))],
            {"factor": cfg.upsample_factor, "in_hw": (gh, gw)})
    g.stage("src.img", "source", [], [new("f.img", 3, (H, W))], {"what": "image"})
    g.stage("enc.in.concat", "concat", ["f.img", "f.plane"], [new("f.x0", 4, (H, W))], {"hw": (H, W)})

    def block(prefix, fin, cin, cout, hw_in, stride):
        hw_out = (quant_out(hw_in[0], stride), quant_out(hw_in[1], stride))
        a = new(f"{prefix}.f.dw", cin, hw_out)
        g.stage(f"{prefix}.dw", "dwconv", [fin], [a], {"stride": stride, "in_hw": hw_in},
                {"k": t[prefix + ".dw"]})
        b = new(f"{prefix}.f.pw", cout, hw_out)
        g.stage(f"{prefix}.pw", "pwconv", [a], [b], {}, {"w": t[prefix + ".pw"], "b": t[prefix + ".pb"]})
        c = new(f"{prefix}.f.bn", cout, hw_out)
        g.stage(f"{prefix}.bn", "bn", [b], [c], {}, {"a": t[prefix + ".bn.a"], "b": t[prefix + ".bn.b"]})
        d = new(f"{prefix}.f.act", cout, hw_out)
        g.stage(f"{prefix}.relu", "act", [c], [d], {"fn": "relu"})
        return d, hw_out

    chans = [4] + list(cfg.enc_down)
    skips = []
    h, hw = "f.x0", (H, W)
    for i, st in enumerate(cfg.enc_strides):
        # every down-block input except the deepest output is reused by an up block
        c = f"clone{i}"
        main = new(f"{c}.f.main", chans[i], hw)
        skip = new(f"{c}.f.skip", chans[i], hw, skip=True)
        g.stage(c, "clone", [h], [main, skip], {"level": i})
        skips.append((skip, chans[i], hw))
        h, hw = block(f"enc.down{i}", main, chans[i], cfg.enc_down[i], hw, st)
    prev = cfg.enc_down[-1]
    for j, c_out in enumerate(cfg.enc_up):
        st = cfg.enc_strides[len(cfg.enc_strides) - 1 - j]
        skip, c_skip, hw_skip = skips.pop()
        up = new(f"enc.up{j}.f.up", prev, hw_skip)
        g.stage(f"enc.up{j}.up", "upsample", [h], [up], {"factor": st, "in_hw": hw})
        cat = new(f"enc.up{j}.f.cat", prev + c_skip, hw_skip)
        g.stage(f"enc.up{j}.concat", "concat", [up, skip], [cat], {"hw": hw_skip})
        h, hw = block(f"enc.up{j}", cat, prev + c_skip, c_out, hw_skip, 1)
        prev = c_out
    a = new("enc.out.f.dw", prev, hw)
    g.stage("enc.out.dw", "dwconv", [h], [a], {"stride": 1, "in_hw": hw}, {"k": t["enc.out.dw"]})
    b = new("enc.out.f.pw", 3, hw)
    g.stage("enc.out.pw", "pwconv", [a], [b], {}, {"w": t["enc.out.pw"], "b": t["enc.out.pb"]})
    c = new("enc.out.f.tanh", 3, hw)
    g.stage("enc.out.tanh", "act", [b], [c], {"fn": "tanh"})
    g.stage("sink", "sink", [c], [], {"hw": hw})
    if sizes[0] != hw:
        raise ShapeError("encoder does not return to the input resolution")
    return g.validate()


def quant_out(n, stride):
    return (n - 1) // stride + 1


# ------------------------------------------------------------ stage behaviour


def _stage_proc(stage, graph, n_images, ctx, compute):
    """Generator implementing one stage for ``n_images`` consecutive frames."""
    spec = graph.qparams.spec
    k, a = stage.kind, stage.attrs
    p = stage.params
    ins, outs = stage.inputs, stage.outputs

    if k == "source":
        for n in range(n_images):
            if a["what"] == "message":
                yield ("put", outs[0], ctx["bits_raw"][n] if compute else None)
            else:
                img = ctx["x_raw"][n] if compute else None
                hh, ww = ctx["hw"]
                for y in range(hh):
                    for x in range(ww):
                        yield ("put", outs[0], img[:, y, x] if compute else None)
    elif k == "linear":
        gh, gw = a["grid"]
        for _ in range(n_images):
            v = yield ("get", ins[0])
            grid = quant.linear_q(v, p["w"], p["b"], spec) if compute else None
            for c in range(gh * gw):
                yield ("put", outs[0], grid[c:c + 1] if compute else None)
    elif k == "upsample":
        f = a["factor"]
        hh, ww = a["in_hw"]
        for _ in range(n_images):
            for _ in range(hh):
                row = []
                for _ in range(ww):
                    row.append((yield ("get", ins[0])))
                for _ in range(f):
                    for v in row:
                        for _ in range(f):
                            yield ("put", outs[0], v)
    elif k == "concat":
        hh, ww = a["hw"]
        for _ in range(n_images * hh * ww):
            u = yield ("get", ins[0])
            v = yield ("get", ins[1])
            yield ("put", outs[0], np.concatenate([u, v]) if compute else None)
    elif k == "clone":
        total = ctx["elements"][ins[0]]
        for _ in range(total):
            v = yield ("get", ins[0])
            yield ("put", outs[0], v)
            yield ("put", outs[1], v)
    elif k == "dwconv":
        yield from _dwconv_proc(stage, spec, n_images, compute)
    elif k in ("pwconv", "bn", "act"):
        if k == "pwconv":
            fn = lambda v: quant.pointwise_q(v, p["w"], p["b"], spec)  # noqa: E731
        elif k == "bn":
            fn = lambda v: quant.bn_q(v, p["a"], p["b"], spec)  # noqa: E731
        elif a["fn"] == "relu":
            fn = quant.relu_q
        else:
            fn = lambda v: quant.tanh_lut(v, spec)  # noqa: E731
        for _ in range(ctx["elements"][ins[0]]):
            v = yield ("get", ins[0])
            yield ("put", outs[0], fn(v) if compute else None)
    elif k == "sink":
        hh, ww = a["hw"]
        out = ctx["out"]
        for n in range(n_images):
            for y in range(hh):
                for x in range(ww):
                    v = yield ("get", ins[0])
                    if compute:
                        out[n, :, y, x] = quant.output_to_u8(v, spec)
    else:  # pragma: no cover - guarded by StageGraph.stage
        raise ConfigError(f"unknown stage kind {k}")


def _dwconv_proc(stage, spec, n_images, compute):
    """Line-buffered KxK depthwise conv with zero 'same' padding."""
    kern = stage.params["k"]
    ks = kern.shape[1]
    pad = (ks - 1) // 2
    stride = stage.attrs["stride"]
    hh, ww = stage.attrs["in_hw"]
    ho, wo = quant_out(hh, stride), quant_out(ww, stride)
    fin, fout = stage.inputs[0], stage.outputs[0]
    c = kern.shape[0]
    for _ in range(n_images):
        rows = {}
        have = 0  # input rows fully received
        for oy in range(ho):
            need = min(hh, oy * stride + pad + 1)
            while have < need:
                row = []
                for _ in range(ww):
                    row.append((yield ("get", fin)))
                rows[have] = np.stack(row, axis=1) if compute else None  # (C, W)
                have += 1
            # the line buffer only keeps the K rows a window can touch
            for r in [r for r in rows if r < oy * stride - pad]:
                del rows[r]
            if compute:
                band = np.zeros((c, ks, ww + 2 * pad), dtype=np.int64)
                for i in range(ks):
                    r = oy * stride - pad + i
                    if 0 <= r < hh:
                        band[:, i, pad:pad + ww] = rows[r]
            for ox in range(wo):
                v = None
                if compute:
                    win = band[:, :, ox * stride:ox * stride + ks]
                    v = quant.depthwise_window_q(win, kern, spec)
                yield ("put", fout, v)
        while have < hh:  # rows below the last window
            for _ in range(ww):
                yield ("get", fin)
            have += 1


# ------------------------------------------------------------ schedulers


SCHEDULES = ("greedy", "round_robin", "reverse", "random")


@dataclass
class RunReport:
    fifos: dict
    stages: dict
    schedule: str
    steps: int

    def records(self):
        out = []
        for f, r in self.fifos.items():
            out.append({"record": "fifo", "id": f, **r})
        for s, r in self.stages.items():
            out.append({"record": "stage", "id": s, **r})
        out.append({"record": "summary", "schedule": self.schedule, "steps": self.steps,
                    "conserved": self.conserved()})
        return out

    def to_jsonl(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def high_water(self):
        return {f: r["high_water"] for f, r in self.fifos.items()}

    def conserved(self):
        """Pushes equal pops on every FIFO and stage counters match their FIFOs."""
        ok = all(r["pushed"] == r["popped"] for r in self.fifos.values())
        for sid, r in self.stages.items():
            ok &= r["consumed"] == sum(self.fifos[f]["popped"] for f in r["inputs"])
            ok &= r["produced"] == sum(self.fifos[f]["pushed"] for f in r["outputs"])
        return bool(ok)


def _simulate(graph, n_images, ctx, compute, schedule="greedy", seed=0, max_steps=None):
    order = graph.order
    if schedule == "reverse":
        order = order[::-1]
    elif schedule not in SCHEDULES:
        raise ConfigError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
    rng = np.random.default_rng(seed)
    queues = {f: deque() for f in graph.fifos}
    caps = {f: c.capacity for f, c in graph.fifos.items()}
    hw = {f: 0 for f in graph.fifos}
    pushed = {f: 0 for f in graph.fifos}
    popped = {f: 0 for f in graph.fifos}
    procs, pending, done = {}, {}, set()
    steps = {s: 0 for s in order}
    for sid in order:
        g = _stage_proc(graph.stages[sid], graph, n_images, ctx, compute)
        procs[sid] = g
        try:
            pending[sid] = next(g)
        except StopIteration:
            done.add(sid)

    def ready(sid):
        req = pending[sid]
        if req[0] == "get":
            return bool(queues[req[1]])
        return len(queues[req[1]]) < caps[req[1]]

    def step(sid):
        req = pending[sid]
        f = req[1]
        if req[0] == "get":
            send = queues[f].popleft()
            popped[f] += 1
        else:
            queues[f].append(req[2])
            pushed[f] += 1
            hw[f] = max(hw[f], len(queues[f]))
            send = None
        steps[sid] += 1
        try:
            pending[sid] = procs[sid].send(send)
        except StopIteration:
            done.add(sid)
            del pending[sid]

    total = 0
    while len(done) < len(order):
        progressed = 0
        if schedule == "random":
            live = [s for s in order if s not in done and ready(s)]
            if live:
                step(live[int(rng.integers(len(live)))])
                progressed = 1
        else:
            for sid in order:
                if schedule == "round_robin":
                    if sid not in done and ready(sid):
                        step(sid)
                        progressed += 1
                else:  # greedy: run each stage until it blocks
                    while sid not in done and ready(sid):
                        step(sid)
                        progressed += 1
        if not progressed:
            raise _deadlock(graph, pending, done, queues)
        total += progressed
        if max_steps is not None and total > max_steps:
            raise DeadlockError("step budget exhausted", ())

    report_stages = {}
    for sid in graph.order:
        s = graph.stages[sid]
        report_stages[sid] = {"kind": s.kind, "inputs": s.inputs, "outputs": s.outputs,
                              "consumed": sum(popped[f] for f in s.inputs),
                              "produced": sum(pushed[f] for f in s.outputs), "steps": steps[sid]}
    report_fifos = {f: {"capacity": caps[f], "high_water": hw[f], "pushed": pushed[f], "popped": popped[f],
                        "producer": graph.fifos[f].producer, "consumer": graph.fifos[f].consumer}
                    for f in graph.fifos}
    return RunReport(report_fifos, report_stages, schedule, total)


def _deadlock(graph, pending, done, queues):
    def waits_on(sid):
        req = pending[sid]
        f = graph.fifos[req[1]]
        return (f.producer if req[0] == "get" else f.consumer), req

    start = next(s for s in graph.order if s not in done)
    seen, chain = {}, []
    s = start
    while s not in seen:
        if s in done:
            return DeadlockError(f"stage chain {' -> '.join(chain)} waits on finished stage {s} "
                                 "(stream length mismatch)", tuple(chain + [s]))
        seen[s] = len(chain)
        chain.append(s)
        s, _ = waits_on(s)
    cycle = chain[seen[s]:] + [s]
    detail = ", ".join(f"{c} {pending[c][0]}s {pending[c][1]}" for c in cycle[:-1])
    return DeadlockError(f"deadlock: {' -> '.join(cycle)} ({detail})", tuple(cycle))


def _element_counts(graph, n_images):
    """Elements carried by each FIFO (clone and 1:1 stages need their totals up front)."""
    counts = {}
    for sid in graph.order:
        s = graph.stages[sid]
        if s.kind == "source":
            hh, ww = graph.qparams.config.image_size
            n = n_images if s.attrs["what"] == "message" else n_images * hh * ww
        elif s.kind == "linear":
            n = n_images * s.attrs["grid"][0] * s.attrs["grid"][1]
        elif s.kind == "upsample":
            hh, ww = s.attrs["in_hw"]
            n = n_images * hh * ww * s.attrs["factor"] ** 2
        elif s.kind == "dwconv":
            hh, ww = s.attrs["in_hw"]
            st = s.attrs["stride"]
            n = n_images * quant_out(hh, st) * quant_out(ww, st)
        else:  # concat, clone and the 1:1 stages keep the stream length
            n = counts[s.inputs[0]]
        for f in s.outputs:
            counts[f] = n
    return counts


def _prepare(graph, x_u8, s):
    cfg, spec = graph.qparams.config, graph.qparams.spec
    x = np.asarray(x_u8)
    if x.dtype != np.uint8:
        raise ShapeError("run_streaming expects uint8 pixels")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != tuple(cfg.image_size):
        raise ShapeError(f"expected (N, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {x.shape}")
    bits = np.atleast_2d(_bits(s))
    if bits.shape != (x.shape[0], cfg.message_length):
        raise ShapeError(f"need {x.shape[0]} messages of {cfg.message_length} bits")
    n = x.shape[0]
    ctx = {"x_raw": quant.input_from_u8(x, spec), "bits_raw": quant.bits_to_raw(bits, spec),
           "hw": tuple(cfg.image_size), "elements": _element_counts(graph, n),
           "out": np.zeros(x.shape, dtype=np.uint8)}
    return ctx, n, single


def run_streaming(graph, x_u8, s, schedule="greedy", seed=0):
    """Stream image(s) and message(s) through the graph; returns (uint8 output, RunReport)."""
    ctx, n, single = _prepare(graph, x_u8, s)
    report = _simulate(graph, n, ctx, True, schedule, seed)
    out = ctx["out"]
    return (out[0] if single else out), report


def run_tokens(graph, n_images=1, schedule="greedy", seed=0):
    """Timing-only run: same control flow, no arithmetic (used for FIFO sizing)."""
    cfg = graph.qparams.config
    dummy = np.zeros((n_images, 3) + tuple(cfg.image_size), dtype=np.uint8)
    ctx, n, _ = _prepare(graph, dummy, np.zeros((n_images, cfg.message_length), dtype=np.uint8))
    return _simulate(graph, n, ctx, False, schedule, seed)


def deadlock_free(graph, caps, schedule="greedy", n_images=1):
    try:
        run_tokens(graph.with_capacities(caps), n_images, schedule)
        return True
    except DeadlockError:
        return False


def min_fifo_depths(graph, schedule="greedy", n_images=1):
    """Smallest per-FIFO capacities that run without deadlock under ``schedule``.

    Coordinate-wise binary search in graph order, starting from the graph's
    own capacities (which must be deadlock-free).
    """
    caps = graph.capacities()
    if not deadlock_free(graph, caps, schedule, n_images):
        raise DeadlockError("starting capacities already deadlock", ())
    for f in graph.fifos:
        lo, hi = 1, caps[f]
        while lo < hi:
            mid = (lo + hi) // 2
            trial = dict(caps, **{f: mid})
            if deadlock_free(graph, trial, schedule, n_images):
                hi = mid
            else:
                lo = mid + 1
        caps[f] = lo
    return caps
