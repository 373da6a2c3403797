"""Harmonization network: shared-MLP point encoder with max-pool interpolation,
a learned per-sensor embedding table, and an MLP harmonization head.

The graph is fixed, so reverse-mode gradients are written out by hand and
checked against central finite differences. Everything is float64 numpy;
training is deterministic for a fixed seed in single-threaded mode.

Per-point features are offsets relative to the query location plus the
corrupted intensity. The head consumes the interpolated intensity
concatenated with the difference of source and target sensor embeddings.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .dataset import Example
from .pointcloud import EMBEDDING_DICT_SIZE, FormatError, Scan, SpatialIndex

DICT_SIZE = EMBEDDING_DICT_SIZE
EMBED_DIM = 3
PN_WIDTHS = (64, 128)   # shared per-point layers
PN_POST = 64            # post-pool hidden width
HEAD_HIDDEN = 100

PARAM_SHAPES = {
    "pointnet.fc1.weight": (PN_WIDTHS[0], 4),
    "pointnet.fc1.bias": (PN_WIDTHS[0],),
    "pointnet.fc2.weight": (PN_WIDTHS[1], PN_WIDTHS[0]),
    "pointnet.fc2.bias": (PN_WIDTHS[1],),
    "pointnet.fc3.weight": (PN_POST, PN_WIDTHS[1]),
    "pointnet.fc3.bias": (PN_POST,),
    "pointnet.fc4.weight": (1, PN_POST),
    "pointnet.fc4.bias": (1,),
    "embedding.table": (DICT_SIZE, EMBED_DIM),
    "head.fc1.weight": (HEAD_HIDDEN, 4),
    "head.fc1.bias": (HEAD_HIDDEN,),
    "head.fc2.weight": (1, HEAD_HIDDEN),
    "head.fc2.bias": (1,),
}

HEAD_KEYS = ("embedding.table", "head.fc1.weight", "head.fc1.bias",
             "head.fc2.weight", "head.fc2.bias")

CHECKPOINT_MAGIC = b"LHM1"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Validation loss went non-finite; carries the last good parameters."""

    def __init__(self, message, params, history):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass
class TrainConfig:
    epochs: int = 40
    batch: int = 50
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    peak_decay: float = 0.2   # fractional drop of the peak per epoch
    dropout: float = 0.3
    loss: str = "l1"          # "l1" | "l2"
    seed: int = 0

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")
        if self.loss not in ("l1", "l2"):
            raise ValueError(f"unknown loss {self.loss!r}")


def init_params(rng: np.random.Generator, keys=None) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, N(0, 0.1) embeddings."""
    params = {}
    for name, shape in PARAM_SHAPES.items():
        if keys is not None and name not in keys:
            continue
        if name == "embedding.table":
            params[name] = rng.normal(0.0, 0.1, size=shape)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def pack_batch(examples: list[Example]):
    """Pad variable-length neighborhoods into dense arrays plus a validity mask."""
    b = len(examples)
    nmax = max(ex.neighbors.shape[0] for ex in examples)
    x = np.zeros((b, nmax, 4))
    mask = np.zeros((b, nmax), dtype=bool)
    src = np.empty(b, dtype=np.int64)
    tgt = np.empty(b, dtype=np.int64)
    gt_i = np.empty(b)
    gt_h = np.empty(b)
    for j, ex in enumerate(examples):
        n = ex.neighbors.shape[0]
        x[j, :n] = ex.neighbors.astype(np.float64)
        mask[j, :n] = True
        src[j], tgt[j] = ex.source_id, ex.target_id
        gt_i[j], gt_h[j] = ex.gt_interp, ex.gt_harm
    return x, mask, src, tgt, gt_i, gt_h


def head_forward(params, interp, src, tgt, drop_mask=None):
    """Harmonization head: [I, e_src - e_tgt] -> hidden 100 ReLU (dropout) -> sigmoid."""
    emb = params["embedding.table"]
    diff = emb[src] - emb[tgt]
    hin = np.column_stack([interp, diff])
    z5 = hin @ params["head.fc1.weight"].T + params["head.fc1.bias"]
    a5 = np.maximum(z5, 0.0)
    d5 = a5 if drop_mask is None else a5 * drop_mask
    z6 = d5 @ params["head.fc2.weight"].T + params["head.fc2.bias"]
    h = _sigmoid(z6[:, 0])
    cache = dict(hin=hin, z5pos=z5 > 0, a5=a5, drop_mask=drop_mask, d5=d5, h=h,
                 src=src, tgt=tgt)
    return h, cache


def head_backward(params, cache, d_h):
    """Gradients of the head given dL/dH; returns (grads, dL/dI)."""
    h = cache["h"]
    dz6 = (d_h * h * (1.0 - h))[:, None]
    grads = {
        "head.fc2.weight": dz6.T @ cache["d5"],
        "head.fc2.bias": dz6.sum(axis=0),
    }
    dd5 = dz6 @ params["head.fc2.weight"]
    da5 = dd5 if cache["drop_mask"] is None else dd5 * cache["drop_mask"]
    dz5 = da5 * cache["z5pos"]
    grads["head.fc1.weight"] = dz5.T @ cache["hin"]
    grads["head.fc1.bias"] = dz5.sum(axis=0)
    dhin = dz5 @ params["head.fc1.weight"]
    demb = np.zeros_like(params["embedding.table"])
    np.add.at(demb, cache["src"], dhin[:, 1:])
    np.add.at(demb, cache["tgt"], -dhin[:, 1:])
    grads["embedding.table"] = demb
    return grads, dhin[:, 0]


def forward_batch(params, x, mask, src, tgt, drop_mask=None):
    """Full forward pass; returns (I, H, trace) with everything backward needs."""
    b, n, _ = x.shape
    w1, b1 = params["pointnet.fc1.weight"], params["pointnet.fc1.bias"]
    w2, b2 = params["pointnet.fc2.weight"], params["pointnet.fc2.bias"]
    z1 = (x.reshape(-1, 4) @ w1.T).reshape(b, n, -1) + b1
    a1 = np.maximum(z1, 0.0)
    z2 = (a1.reshape(-1, a1.shape[-1]) @ w2.T).reshape(b, n, -1) + b2
    a2 = np.maximum(z2, 0.0)
    # ReLU activations are >= 0, so -1 marks padded slots out of the max-pool
    a2m = np.where(mask[:, :, None], a2, -1.0)
    arg = a2m.argmax(axis=1)                      # first max index per channel
    pooled = np.take_along_axis(a2m, arg[:, None, :], axis=1)[:, 0, :]
    z3 = pooled @ params["pointnet.fc3.weight"].T + params["pointnet.fc3.bias"]
    a3 = np.maximum(z3, 0.0)
    z4 = a3 @ params["pointnet.fc4.weight"].T + params["pointnet.fc4.bias"]
    interp = _sigmoid(z4[:, 0])
    harm, head_cache = head_forward(params, interp, src, tgt, drop_mask)
    trace = dict(x=x, mask=mask, z1pos=z1 > 0, a1=a1, z2pos=z2 > 0, arg=arg,
                 pooled=pooled, z3pos=z3 > 0, a3=a3, interp=interp,
                 head=head_cache)
    return interp, harm, trace


def forward_example(params, example: Example, mode: str = "eval",
                    rng: Optional[np.random.Generator] = None,
                    dropout: float = 0.3):
    """Single-example forward. Train mode draws a dropout mask from rng."""
    if not (0 <= example.source_id < DICT_SIZE and 0 <= example.target_id < DICT_SIZE):
        raise ValueError(
            f"scan id outside embedding dictionary [0, {DICT_SIZE}):"
            f" {example.source_id}, {example.target_id}"
        )
    x, mask, src, tgt, _, _ = pack_batch([example])
    drop = None
    if mode == "train" and dropout > 0:
        if rng is None:
            raise ValueError("train mode needs an rng for the dropout mask")
        keep = 1.0 - dropout
        drop = (rng.random((1, HEAD_HIDDEN)) < keep) / keep
    interp, harm, trace = forward_batch(params, x, mask, src, tgt, drop)
    return float(interp[0]), float(harm[0]), trace


def loss_terms(interp, harm, gt_i, gt_h, rho: str):
    """Batch losses (sums over examples) and their derivatives."""
    ei = interp - gt_i
    eh = harm - gt_h
    if rho == "l1":
        l_i, l_h = np.abs(ei).sum(), np.abs(eh).sum()
        d_i, d_h = np.sign(ei), np.sign(eh)
    elif rho == "l2":
        l_i, l_h = (ei ** 2).sum(), (eh ** 2).sum()
        d_i, d_h = 2.0 * ei, 2.0 * eh
    else:
        raise ValueError(f"unknown loss {rho!r}")
    return float(l_i), float(l_h), float(l_i + l_h), d_i, d_h


def backward_batch(params, trace, d_interp, d_harm):
    """Exact gradients of the summed batch loss for every parameter."""
    grads, d_i_head = head_backward(params, trace["head"], d_harm)
    d_interp_total = d_interp + d_i_head
    interp = trace["interp"]
    dz4 = (d_interp_total * interp * (1.0 - interp))[:, None]
    grads["pointnet.fc4.weight"] = dz4.T @ trace["a3"]
    grads["pointnet.fc4.bias"] = dz4.sum(axis=0)
    da3 = dz4 @ params["pointnet.fc4.weight"]
    dz3 = da3 * trace["z3pos"]
    grads["pointnet.fc3.weight"] = dz3.T @ trace["pooled"]
    grads["pointnet.fc3.bias"] = dz3.sum(axis=0)
    dpool = dz3 @ params["pointnet.fc3.weight"]
    b, n = trace["mask"].shape
    da2 = np.zeros((b, n, dpool.shape[1]))
    np.put_along_axis(da2, trace["arg"][:, None, :], dpool[:, None, :], axis=1)
    dz2 = da2 * trace["z2pos"]
    r2 = dz2.reshape(-1, dz2.shape[-1])
    grads["pointnet.fc2.weight"] = r2.T @ trace["a1"].reshape(-1, trace["a1"].shape[-1])
    grads["pointnet.fc2.bias"] = r2.sum(axis=0)
    da1 = (r2 @ params["pointnet.fc2.weight"]).reshape(dz2.shape[0], n, -1)
    dz1 = da1 * trace["z1pos"]
    r1 = dz1.reshape(-1, dz1.shape[-1])
    grads["pointnet.fc1.weight"] = r1.T @ trace["x"].reshape(-1, 4)
    grads["pointnet.fc1.bias"] = r1.sum(axis=0)
    return grads


def cyclical_lr(epoch: int, step: int, steps_per_epoch: int, config: TrainConfig) -> float:
    """Triangular schedule: lr_min up to the epoch peak at mid-epoch, back down;
    the peak itself decays by peak_decay per epoch."""
    if not 0 <= step < steps_per_epoch:
        raise ValueError("step must lie in [0, steps_per_epoch)")
    peak = config.lr_max * (1.0 - config.peak_decay) ** epoch
    half = steps_per_epoch // 2
    if half == 0:
        return peak
    if step <= half:
        return config.lr_min + (peak - config.lr_min) * (step / half)
    return peak - (peak - config.lr_min) * ((step - half) / (steps_per_epoch - half))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, lr, state: AdamState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Standard bias-corrected Adam update, in place."""
    for g in grads.values():
        if not np.isfinite(g).all():
            raise FloatingPointError("non-finite gradient; aborting the update")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for key, g in grads.items():
        m = state.m[key]
        v = state.v[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def evaluate_split(params, examples: list[Example], rho: str, batch: int = 256):
    """Summed (loss_I, loss_H, total) over a split in eval mode."""
    tot_i = tot_h = 0.0
    for lo in range(0, len(examples), batch):
        x, mask, src, tgt, gt_i, gt_h = pack_batch(examples[lo:lo + batch])
        interp, harm, _ = forward_batch(params, x, mask, src, tgt)
        l_i, l_h, _, _, _ = loss_terms(interp, harm, gt_i, gt_h, rho)
        tot_i += l_i
        tot_h += l_h
    return tot_i, tot_h, tot_i + tot_h


def train(train_examples: list[Example], val_examples: list[Example],
          config: TrainConfig, params: Optional[dict] = None,
          param_keys=None, log=None):
    """Full training loop; returns (best-validation params, history rows).

    History rows are (epoch, step, lr, loss_I, loss_H, loss_total, split) with
    summed batch losses for train steps and summed split losses for the
    per-epoch validation row (step -1, lr 0).
    """
    if not train_examples:
        raise ValueError("empty training split")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(rng, keys=param_keys)
    state = AdamState.for_params(params)
    n = len(train_examples)
    steps_per_epoch = (n + config.batch - 1) // config.batch
    keep = 1.0 - config.dropout
    history = []
    best = (np.inf, copy_params(params))
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for step in range(steps_per_epoch):
            sel = order[step * config.batch:(step + 1) * config.batch]
            batch = [train_examples[i] for i in sel]
            x, mask, src, tgt, gt_i, gt_h = pack_batch(batch)
            drop = None
            if config.dropout > 0:
                drop = (rng.random((len(batch), HEAD_HIDDEN)) < keep) / keep
            lr = cyclical_lr(epoch, step, steps_per_epoch, config)
            interp, harm, trace = forward_batch(params, x, mask, src, tgt, drop)
            l_i, l_h, l_tot, d_i, d_h = loss_terms(interp, harm, gt_i, gt_h, config.loss)
            history.append((epoch, step, lr, l_i, l_h, l_tot, "train"))
            if not np.isfinite(l_tot):
                raise TrainingDiverged(
                    f"training loss non-finite at epoch {epoch} step {step}",
                    best[1], history,
                )
            grads = backward_batch(params, trace, d_i, d_h)
            adam_step(params, grads, lr, state)
        v_i, v_h, v_tot = evaluate_split(params, val_examples, config.loss) \
            if val_examples else (0.0, 0.0, 0.0)
        history.append((epoch, -1, 0.0, v_i, v_h, v_tot, "val"))
        if log:
            log(f"epoch {epoch}: val loss_I={v_i:.4f} loss_H={v_h:.4f}")
        if val_examples and not np.isfinite(v_tot):
            raise TrainingDiverged(
                f"validation loss non-finite after epoch {epoch}", best[1], history)
        if v_tot < best[0] or not val_examples:
            best = (v_tot, copy_params(params))
    return best[1], history


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "step", "lr", "loss_I", "loss_H", "loss_total", "split"])
        for epoch, step, lr, l_i, l_h, l_tot, split in history:
            w.writerow([epoch, step, repr(lr), repr(l_i), repr(l_h), repr(l_tot), split])


def harmonize_points(params, source_index: SpatialIndex, locs: np.ndarray,
                     source_id: int, target_id: int, k: int = 5,
                     radius: float = 1.0, chunk: int = 512):
    """Predict harmonized intensities at locs from their source-scan
    neighborhoods (the query point participates in its own neighborhood).

    Returns (harmonized float32 array, indices with an empty neighborhood)."""
    if not (0 <= target_id < DICT_SIZE):
        raise ValueError(f"target_id outside embedding dictionary [0, {DICT_SIZE})")
    locs = np.asarray(locs, dtype=np.float64).reshape(-1, 3)
    m = locs.shape[0]
    neighborhoods = []
    empty = []
    for i in range(m):
        idx, _ = source_index.query(locs[i], k, radius)
        if idx.size == 0:
            empty.append(i)
            neighborhoods.append(None)
            continue
        offs = source_index.xyz[idx] - locs[i]
        vals = source_index.intensity[idx]
        neighborhoods.append(np.column_stack([offs, vals.astype(np.float64)]))
    out = np.zeros(m, dtype=np.float32)
    todo = [i for i in range(m) if neighborhoods[i] is not None]
    src = np.full(len(todo), source_id, dtype=np.int64)
    tgt = np.full(len(todo), target_id, dtype=np.int64)
    for lo in range(0, len(todo), chunk):
        block = todo[lo:lo + chunk]
        nmax = max(neighborhoods[i].shape[0] for i in block)
        x = np.zeros((len(block), nmax, 4))
        mask = np.zeros((len(block), nmax), dtype=bool)
        for j, i in enumerate(block):
            nb = neighborhoods[i]
            x[j, :nb.shape[0]] = nb
            mask[j, :nb.shape[0]] = True
        _, harm, _ = forward_batch(params, x, mask, src[lo:lo + chunk], tgt[lo:lo + chunk])
        out[block] = harm.astype(np.float32)
    return out, np.array(empty, dtype=np.int64)


def harmonize_scan(params, source: Scan, index: SpatialIndex, target_id: int,
                   k: int = 5, radius: float = 1.0):
    """Replace every intensity of the source scan with its harmonized value.

    Points whose neighborhood is empty keep their original intensity; their
    count is reported alongside the scan."""
    harm, empty = harmonize_points(params, index, source.xyz, source.scan_id,
                                   target_id, k, radius)
    if empty.size:
        harm[empty] = source.intensity[empty]
    return source.with_intensity(np.clip(harm, 0.0, 1.0)), int(empty.size)


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 10
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            end = off + 8 * size
            if end > len(raw):
                raise FormatError(f"{path}: truncated block {name!r} at byte {off}")
            params[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(dims).copy()
            off = end
    except struct.error as e:
        raise FormatError(f"{path}: truncated checkpoint at byte {off}") from e
    bad = [
        f"{name}: expected {PARAM_SHAPES[name]}, got {tuple(p.shape)}"
        for name, p in params.items()
        if name in PARAM_SHAPES and tuple(p.shape) != PARAM_SHAPES[name]
    ]
    unknown = [name for name in params if name not in PARAM_SHAPES]
    if bad or unknown:
        raise FormatError(
            f"{path}: parameter blocks do not match the architecture: "
            + "; ".join(bad + [f"unknown block {u!r}" for u in unknown])
        )
    # a checkpoint holds either the full model or a bare harmonization head
    if set(params) not in (set(PARAM_SHAPES), set(HEAD_KEYS)):
        missing = [n for n in PARAM_SHAPES if n not in params]
        raise FormatError(f"{path}: missing parameter blocks: {', '.join(missing)}")
    return params
