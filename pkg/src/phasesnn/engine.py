"""Event-driven inference over a converted spiking model.

The per-phase leaky accumulation is simulated in its time-invariant form:
an input spike arriving at phase tau adds weight * q_prev**-tau to a
neuron's accumulated drive u, and the neuron commits a spike for phase t
as soon as the drive observed w phases later clears v_theta * q_cur**-t.
This is algebraically the multiply-by-Q running potential with the firing
threshold rescaled every phase, but it never forms Q**t and makes the
wait-timestep decision rule explicit. Comparisons are strict in round
mode (a value exactly on a cutoff does not fire, matching the codec) and
inclusive in floor mode (exactly representable values re-encode losslessly).

Every hidden neuron fires at most once per inference by construction: a
neuron's spike is a single phase slot. Additions are counted exactly: one
per presynaptic spike per synapse actually accumulated, and a neuron stops
accumulating once its firing decision is committed (at phase
min(fire_phase + w, T)).
"""

from dataclasses import dataclass

import numpy as np

from . import codec
from .builder import SnnModel
from .calibrate import broadcast_anchor
from .errors import ShapeMismatchError, UnsupportedLayerError
from .model import _conv2d, _pool2d


@dataclass
class LayerActivity:
    """Spike codes leaving one layer plus the work done to produce them.

    Hidden layers carry `phases` ((B, *shape) ints, 0 = no spike); the
    binary-coded input carries `bits` ((B, T, *shape) bools) instead.
    """

    q: float
    phases: np.ndarray | None = None
    bits: np.ndarray | None = None
    spikes: int = 0
    additions: int = 0
    neurons: int = 0

    @property
    def batch(self) -> int:
        arr = self.phases if self.phases is not None else self.bits
        return arr.shape[0]


@dataclass
class NetworkRun:
    logits: np.ndarray
    preds: np.ndarray
    input_activity: LayerActivity
    activities: list          # one per spiking layer, aligned with snn.layers
    t: int
    w: int
    single_spike_input: bool = False


def _phase_stream(activity: LayerActivity, t: int):
    """Yield (value drive, spike mask) arrays for phases 1..T."""
    if activity.bits is not None:
        weights = codec.phase_values(codec.CodecConfig(activity.q, t))
        for tau in range(1, t + 1):
            mask = activity.bits[:, tau - 1]
            yield mask * weights[tau - 1], mask
    else:
        weights = codec.phase_values(codec.CodecConfig(activity.q, t))
        for tau in range(1, t + 1):
            mask = activity.phases == tau
            yield mask * weights[tau - 1], mask


def _drive_and_count(layer, value, mask):
    """(weighted drive per output neuron, event count, count position map).

    The count array may collapse axes shared between output neurons (conv
    counts depend only on spatial position); `positions` maps each flat
    output neuron to its column in the count array.
    """
    if layer.kind == "conv":
        drive = _conv2d(value, layer.weights, None, layer.stride, layer.padding)
        ones = np.ones((1,) + layer.weights.shape[1:])
        count = _conv2d(mask.astype(np.float64), ones, None,
                        layer.stride, layer.padding)[:, 0]
        b, out_c, ho, wo = drive.shape
        positions = np.tile(np.arange(ho * wo), out_c)
        return drive.reshape(b, -1), count.reshape(b, -1), positions
    if layer.kind == "linear":
        drive = value @ layer.weights.T
        b = drive.shape[0]
        out_f = drive.shape[-1]
        count = mask.sum(axis=-1).astype(np.float64).reshape(b, -1)
        if count.shape[-1] == 1:
            positions = np.zeros(out_f, dtype=np.int64)
        else:  # (B, N, F) node features: counts vary per node only
            positions = np.repeat(np.arange(count.shape[-1]), out_f)
        return drive.reshape(b, -1), count, positions
    if layer.kind == "sparse":
        adj = layer.adjacency
        ones = adj.copy()
        ones.data = np.ones_like(ones.data)
        drive = np.stack([adj @ s for s in value])
        count = np.stack([ones @ s for s in mask.astype(np.float64)])
        b = drive.shape[0]
        return drive.reshape(b, -1), count.reshape(b, -1), \
            np.arange(drive[0].size, dtype=np.int64)
    if layer.kind == "avgpool":
        pooled = _pool2d(value, layer.kernel, layer.stride, np.sum)
        drive = pooled * layer.weights[None, :, None, None]
        count = _pool2d(mask.astype(np.float64), layer.kernel, layer.stride, np.sum)
        b = drive.shape[0]
        return drive.reshape(b, -1), count.reshape(b, -1), \
            np.arange(drive[0].size, dtype=np.int64)
    raise UnsupportedLayerError(f"no drive rule for spiking layer kind {layer.kind}")


def _expand_per_neuron(arr, out_shape):
    """Broadcast a per-channel array over a flattened (C, ...) output."""
    per = int(np.prod(out_shape)) // arr.size
    return np.repeat(arr, per)


def run_layer(layer, activity: LayerActivity, t: int, w: int, mode: str = "round",
              skip: LayerActivity | None = None) -> LayerActivity:
    """Single-spike firing pass over one weighted layer.

    Neuron j fires at the smallest phase t0 whose lookahead drive
    u(min(t0+w, T)) clears v_theta_j * q_cur**-t0; computation for j stops
    there, which the addition count reflects.
    """
    b = activity.batch
    n_out = int(np.prod(layer.out_shape))
    u = np.empty((b, t, n_out))
    counts = None
    skip_counts = None

    acc = np.zeros((b, n_out))
    acc += _expand_per_neuron(layer.v_init, layer.out_shape)[None, :]
    streams = [_phase_stream(activity, t)]
    if skip is not None:
        streams.append(_phase_stream(skip, t))
        skip_w = _expand_per_neuron(layer.skip_weights, layer.out_shape)
        skip_acc = np.zeros((b, n_out))
        skip_counts = np.empty((b, t, n_out), dtype=np.float64)
    for tau in range(1, t + 1):
        value, mask = next(streams[0])
        drive, count, positions = _drive_and_count(layer, value, mask)
        if counts is None:
            counts = np.empty((b, t, count.shape[-1]))
        acc = acc + drive
        counts[:, tau - 1] = count if tau == 1 else counts[:, tau - 2] + count
        if skip is not None:
            s_value, s_mask = next(streams[1])
            s_value = s_value.reshape(b, -1)
            s_mask = s_mask.reshape(b, -1)
            skip_acc = skip_acc + skip_w[None, :] * s_value
            prev = skip_counts[:, tau - 2] if tau > 1 else 0.0
            skip_counts[:, tau - 1] = prev + s_mask
            u[:, tau - 1] = acc + skip_acc
        else:
            u[:, tau - 1] = acc

    v_theta = _expand_per_neuron(layer.v_theta, layer.out_shape)
    q_pow = codec.phase_values(codec.CodecConfig(layer.q_cur, t))
    thresholds = v_theta[None, :] * q_pow[:, None]          # (T, n_out)
    look = np.minimum(np.arange(1, t + 1) + w, t) - 1
    u_look = u[:, look]
    if mode == "round":
        cond = u_look > thresholds[None]
    else:
        cond = u_look >= thresholds[None]
    fired = cond.any(axis=1)
    phase = np.where(fired, cond.argmax(axis=1) + 1, 0).astype(np.int64)

    cutoff = np.where(fired, np.minimum(phase + w, t), t)    # phases accumulated
    rows = np.arange(b)[:, None]
    additions = counts[rows, cutoff - 1, positions[None, :]].sum()
    if skip_counts is not None:
        additions += skip_counts[rows, cutoff - 1, np.arange(n_out)[None, :]].sum()

    return LayerActivity(
        q=layer.q_cur, phases=phase.reshape((b,) + layer.out_shape),
        spikes=int(fired.sum()), additions=int(round(additions)),
        neurons=n_out)


def run_maxpool(layer, activity: LayerActivity, t: int) -> LayerActivity:
    """Each pool group forwards its earliest spike; later members are skipped."""
    phases = activity.phases
    sentinel = np.where(phases == 0, t + 1, phases)
    pooled = _pool2d(sentinel, layer.kernel, layer.stride, np.min)
    pooled = np.where(pooled == t + 1, 0, pooled)
    return LayerActivity(
        q=layer.q_cur, phases=pooled, spikes=int((pooled > 0).sum()),
        additions=0, neurons=int(np.prod(layer.out_shape)))


def run_output(layer, activity: LayerActivity, t: int,
               skip: LayerActivity | None = None):
    """Accumulate potentials of the non-firing output layer; returns logits."""
    b = activity.batch
    n_out = int(np.prod(layer.out_shape))
    acc = np.zeros((b, n_out))
    acc += _expand_per_neuron(layer.v_init, layer.out_shape)[None, :]
    total_count = np.zeros(b)
    for value, mask in _phase_stream(activity, t):
        drive, count, positions = _drive_and_count(layer, value, mask)
        acc = acc + drive
        total_count += count[:, positions].sum(axis=-1)
    if skip is not None:
        skip_w = _expand_per_neuron(layer.skip_weights, layer.out_shape)
        for s_value, s_mask in _phase_stream(skip, t):
            acc = acc + skip_w[None, :] * s_value.reshape(b, -1)
            total_count += s_mask.reshape(b, -1).sum(axis=-1)
    logits = acc.reshape((b,) + layer.out_shape)
    report = LayerActivity(q=layer.q_cur, phases=np.zeros((b,) + layer.out_shape,
                                                          dtype=np.int64),
                           spikes=0, additions=int(round(total_count.sum())),
                           neurons=n_out)
    return logits, report


def _input_activity(snn: SnnModel, x: np.ndarray, single_spike: bool) -> LayerActivity:
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(snn.input_shape):
        raise ShapeMismatchError(
            f"input shape {x.shape[1:]} does not match model {snn.input_shape}")
    anchor = broadcast_anchor(snn.input_anchor, snn.input_shape)
    scaled = np.clip(x / anchor, 0.0, 1.0)
    n_in = int(np.prod(snn.input_shape))
    if single_spike:
        cfg = codec.CodecConfig(2.0, snn.t, "round")
        phases = codec.encode_array(np.minimum(scaled, np.nextafter(1.0, 0.0)), cfg)
        return LayerActivity(q=2.0, phases=phases, spikes=int((phases > 0).sum()),
                             additions=0, neurons=n_in)
    bits = codec.encode_input_array(scaled, snn.t)
    bits = np.moveaxis(bits, -1, 1)
    return LayerActivity(q=2.0, bits=bits, spikes=int(bits.sum()),
                         additions=0, neurons=n_in)


def run_network(snn: SnnModel, x: np.ndarray, w: int | None = None,
                single_spike_input: bool = False) -> NetworkRun:
    """Drive the whole network for a batch; collects per-layer activity."""
    w = snn.w if w is None else w
    if not (0 <= w <= snn.t):
        raise ShapeMismatchError(f"wait timestep {w} outside [0, {snn.t}]")
    inp = _input_activity(snn, x, single_spike_input)
    current = inp
    activities = []
    logits = None
    for i, layer in enumerate(snn.layers):
        is_output = i == len(snn.layers) - 1
        skip = activities[layer.skip_source] if layer.skip_source is not None else None
        if layer.kind == "flatten":
            b = current.batch
            n = int(np.prod(layer.out_shape))
            if current.bits is not None:
                current = LayerActivity(
                    q=current.q, bits=current.bits.reshape((b, snn.t) + layer.out_shape),
                    spikes=current.spikes, neurons=n)
            else:
                current = LayerActivity(
                    q=current.q, phases=current.phases.reshape((b,) + layer.out_shape),
                    spikes=current.spikes, neurons=n)
            # structural only: the same spikes reshaped, no work done here
            activities.append(LayerActivity(q=current.q, spikes=0, additions=0,
                                            neurons=0))
            continue
        if layer.kind == "maxpool":
            current = run_maxpool(layer, current, snn.t)
        elif is_output:
            if layer.fires:
                raise UnsupportedLayerError("output layer must be non-firing")
            logits, current = run_output(layer, current, snn.t, skip=skip)
        else:
            current = run_layer(layer, current, snn.t, w, snn.mode, skip=skip)
            assert current.phases.max(initial=0) <= snn.t
        activities.append(current)

    preds = np.argmax(logits, axis=-1)
    return NetworkRun(logits=logits, preds=preds, input_activity=inp,
                      activities=activities, t=snn.t, w=w,
                      single_spike_input=single_spike_input)


def infer_batch(snn: SnnModel, x: np.ndarray, w: int | None = None,
                single_spike_input: bool = False, chunk: int = 256) -> NetworkRun:
    """run_network over a large batch, chunked; counts are aggregated.

    Spike phase arrays are kept only when the batch fits in one chunk.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] <= chunk:
        return run_network(snn, x, w=w, single_spike_input=single_spike_input)
    runs = [run_network(snn, x[i:i + chunk], w=w,
                        single_spike_input=single_spike_input)
            for i in range(0, x.shape[0], chunk)]
    first = runs[0]
    activities = []
    for li in range(len(first.activities)):
        activities.append(LayerActivity(
            q=first.activities[li].q, phases=None,
            spikes=sum(r.activities[li].spikes for r in runs),
            additions=sum(r.activities[li].additions for r in runs),
            neurons=first.activities[li].neurons))
    inp = LayerActivity(q=first.input_activity.q, bits=None,
                        spikes=sum(r.input_activity.spikes for r in runs),
                        additions=0, neurons=first.input_activity.neurons)
    return NetworkRun(
        logits=np.concatenate([r.logits for r in runs]),
        preds=np.concatenate([r.preds for r in runs]),
        input_activity=inp, activities=activities, t=first.t, w=first.w,
        single_spike_input=single_spike_input)


def infer(snn: SnnModel, x: np.ndarray, w: int | None = None):
    """Classify a single input; returns (class index, network run)."""
    run = run_network(snn, np.asarray(x, dtype=np.float64)[None], w=w)
    return int(run.preds.reshape(-1)[0]), run


def infer_single_spike_input(snn: SnnModel, x: np.ndarray, w: int | None = None) -> int:
    """Classify with the input itself reduced to one spike per pixel."""
    run = run_network(snn, np.asarray(x, dtype=np.float64)[None], w=w,
                      single_spike_input=True)
    return int(run.preds.reshape(-1)[0])
