"""Implicit occlusion field: a small fully-connected network over encoded points.

The field maps a shape code and a positional encoding of a point to the
probability that the point is occluded. In ``single`` mode the shape code is
a learned constant (one scene); in ``conditioned`` mode a two-layer encoder
computes it from a transient volume. Gradients are derived by hand and
checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import HiddenCube

PROB_CLIP = 1e-7
WEIGHTS_MAGIC = b"OCCF"
WEIGHTS_VERSION = 1


class FitDivergence(RuntimeError):
    """Training produced a non-finite loss. ``params`` holds the last finite state."""

    def __init__(self, message, params=None, step=None):
        super().__init__(message)
        self.params = params
        self.step = step


@dataclass(frozen=True)
class PositionalEncoding:
    n_frequencies: int = 6
    include_raw: bool = True

    @property
    def dim(self) -> int:
        return 3 * (2 * self.n_frequencies + int(self.include_raw))

    def __call__(self, p: np.ndarray) -> np.ndarray:
        """Encode points already mapped to [-1, 1]^3.

        Layout: [p, sin(pi p), cos(pi p), sin(2 pi p), cos(2 pi p), ...],
        each block holding the three coordinates.
        """
        p = np.asarray(p).reshape(-1, 3)
        blocks = [p] if self.include_raw else []
        for k in range(self.n_frequencies):
            arg = (2.0 ** k) * np.pi * p
            blocks += [np.sin(arg), np.cos(arg)]
        if not blocks:
            return np.zeros((len(p), 0), dtype=p.dtype)
        return np.concatenate(blocks, axis=1)


def encode_position(p, enc: PositionalEncoding) -> np.ndarray:
    return enc(p)


def softplus_sigmoid(z):
    """softplus(z) and its derivative sigmoid(z), sharing one exp(-|z|).

    Written with plain exp/log1p because those vectorize well in float32,
    unlike np.logaddexp.
    """
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    sp = np.maximum(z, 0.0)
    sp += np.log1p(e)
    return sp, np.where(z >= 0, r, e * r)


def softplus(z):
    return softplus_sigmoid(z)[0]


def sigmoid(z):
    return softplus_sigmoid(z)[1]


def bce_loss(predictions, labels) -> float:
    """Mean binary cross-entropy with predictions clipped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(predictions, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def transient_features(data: np.ndarray, pool: int = 4) -> np.ndarray:
    """Peak-normalize, log(1 + m), average-pool time by ``pool`` and flatten."""
    m = np.asarray(data, dtype=np.float64)
    peak = m.max()
    if peak > 0:
        m = m / peak
    m = np.log1p(m)
    nt = m.shape[-1] - m.shape[-1] % pool
    m = m[..., :nt].reshape(*m.shape[:-1], nt // pool, pool).mean(axis=-1)
    return m.ravel()


@dataclass
class OcclusionField:
    """Network parameters plus the fixed configuration needed to evaluate them.

    Parameter names: ``code`` (single mode) or ``enc_w0, enc_b0, enc_w1,
    enc_b1`` (conditioned mode), then ``w0, b0, ..., wL, bL`` for the decoder.
    """

    params: dict
    encoding: PositionalEncoding = field(default_factory=PositionalEncoding)
    hidden: tuple = (128, 128, 128, 128)
    code_dim: int = 16
    mode: str = "single"
    cube: HiddenCube = field(default_factory=HiddenCube)
    transient_shape: tuple | None = None
    pool: int = 4

    @classmethod
    def create(cls, mode: str = "single", encoding: PositionalEncoding | None = None,
               hidden=(128, 128, 128, 128), code_dim: int | None = None,
               cube: HiddenCube | None = None, transient_shape=None, encoder_hidden: int = 128,
               pool: int = 4, seed: int = 0, dtype=np.float32) -> "OcclusionField":
        """Fresh field. Hidden layers use uniform fan-in init; the output layer starts at zero."""
        if mode not in ("single", "conditioned"):
            raise ValueError(f"unknown mode {mode!r}")
        encoding = encoding or PositionalEncoding()
        code_dim = code_dim if code_dim is not None else (16 if mode == "single" else 128)
        rng = np.random.default_rng(seed)
        params = {}

        def uniform(fan_in, shape):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape).astype(dtype)

        if mode == "single":
            params["code"] = np.zeros(code_dim, dtype=dtype)
        else:
            if transient_shape is None:
                raise ValueError("conditioned mode needs transient_shape")
            nx, ny, nt = transient_shape
            n_in = nx * ny * (nt // pool)
            params["enc_w0"] = uniform(n_in, (n_in, encoder_hidden))
            params["enc_b0"] = np.zeros(encoder_hidden, dtype=dtype)
            params["enc_w1"] = uniform(encoder_hidden, (encoder_hidden, code_dim))
            params["enc_b1"] = np.zeros(code_dim, dtype=dtype)
        widths = [code_dim + encoding.dim, *hidden]
        for i in range(len(hidden)):
            params[f"w{i}"] = uniform(widths[i], (widths[i], widths[i + 1]))
            params[f"b{i}"] = np.zeros(widths[i + 1], dtype=dtype)
        n = len(hidden)
        params[f"w{n}"] = np.zeros((widths[-1], 1), dtype=dtype)
        params[f"b{n}"] = np.zeros(1, dtype=dtype)
        return cls(params, encoding, tuple(hidden), code_dim, mode,
                   cube or HiddenCube(), tuple(transient_shape) if transient_shape else None, pool)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def astype(self, dtype) -> "OcclusionField":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return OcclusionField(params, self.encoding, self.hidden, self.code_dim, self.mode,
                              self.cube, self.transient_shape, self.pool)

    # -- evaluation ---------------------------------------------------------

    def _unit(self, points):
        """World points -> [-1, 1]^3 over the hidden cube."""
        return (2.0 * self.cube.to_unit(np.asarray(points, dtype=np.float64).reshape(-1, 3)) - 1.0)

    def _code(self, transient):
        if self.mode == "single":
            if transient is not None:
                raise ValueError("single-scene field takes no transient")
            return self.params["code"], None
        if transient is None:
            raise ValueError("conditioned field needs a transient")
        data = transient.data if hasattr(transient, "data") else transient
        if self.transient_shape is not None and tuple(data.shape) != self.transient_shape:
            raise ValueError(f"transient shape {data.shape} != {self.transient_shape}")
        x = transient_features(data, self.pool).astype(self.dtype)
        pre = x @ self.params["enc_w0"] + self.params["enc_b0"]
        h = softplus(pre)
        code = h @ self.params["enc_w1"] + self.params["enc_b1"]
        return code, (x, pre, h)

    def _forward(self, points, transient):
        code, enc_cache = self._code(transient)
        q = self.encoding(self._unit(points)).astype(self.dtype)
        a = np.concatenate([np.broadcast_to(code, (len(q), self.code_dim)), q], axis=1)
        acts, slopes = [a], []
        n = len(self.hidden)
        for i in range(n):
            sp, sg = softplus_sigmoid(acts[-1] @ self.params[f"w{i}"] + self.params[f"b{i}"])
            slopes.append(sg)
            acts.append(sp)
        logits = (acts[-1] @ self.params[f"w{n}"] + self.params[f"b{n}"])[:, 0]
        return logits, (acts, slopes, enc_cache)

    def logits(self, points, transient=None) -> np.ndarray:
        return self._forward(points, transient)[0]

    def forward(self, points, transient=None) -> np.ndarray:
        """Occlusion probability in (0, 1) for each point."""
        return sigmoid(self.logits(points, transient).astype(np.float64))

    __call__ = forward

    def predict(self, points, transient=None, chunk: int = 65536) -> np.ndarray:
        points = np.asarray(points).reshape(-1, 3)
        out = np.empty(len(points))
        for i in range(0, len(points), chunk):
            out[i:i + chunk] = self.forward(points[i:i + chunk], transient)
        return out

    # -- gradients ----------------------------------------------------------

    def loss_and_grad(self, batches) -> tuple[float, dict]:
        """Mean BCE over all points of all (transient, points, labels) batches and its gradient."""
        batches = list(batches)
        total = sum(len(b[1]) for b in batches)
        grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}
        loss = 0.0
        for transient, points, labels in batches:
            loss += self._accumulate(transient, points, labels, total, grads)
        return loss, {k: g.astype(self.dtype) for k, g in grads.items()}

    def _accumulate(self, transient, points, labels, total, grads) -> float:
        y = np.asarray(labels, dtype=np.float64)
        logits, (acts, slopes, enc_cache) = self._forward(points, transient)
        p = sigmoid(logits.astype(np.float64))
        pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
        loss = float(np.sum(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)))) / total
        # d loss / d logit is (p - y) / total where the clip is inactive.
        active = (p > PROB_CLIP) & (p < 1.0 - PROB_CLIP)
        dz = (np.where(active, p - y, 0.0) / total)[:, None].astype(self.dtype)
        n = len(self.hidden)
        grads[f"w{n}"] += acts[n].T @ dz
        grads[f"b{n}"] += dz.sum(axis=0)
        da = dz @ self.params[f"w{n}"].T
        for i in range(n - 1, -1, -1):
            dz = da * slopes[i]
            grads[f"w{i}"] += acts[i].T @ dz
            grads[f"b{i}"] += dz.sum(axis=0)
            da = dz @ self.params[f"w{i}"].T
        dcode = da[:, :self.code_dim].sum(axis=0)
        if self.mode == "single":
            grads["code"] += dcode
        else:
            x, pre, h = enc_cache
            grads["enc_w1"] += np.outer(h, dcode)
            grads["enc_b1"] += dcode
            dpre = (dcode @ self.params["enc_w1"].T) * sigmoid(pre)
            grads["enc_w0"] += np.outer(x, dpre)
            grads["enc_b0"] += dpre
        return loss

    def backward(self, points, labels, transient=None) -> dict:
        """Gradient of the mean BCE on one batch w.r.t. every parameter."""
        return self.loss_and_grad([(transient, points, labels)])[1]

    # -- serialization ------------------------------------------------------

    def metadata(self) -> dict:
        return {
            "format": "occfields-weights",
            "version": WEIGHTS_VERSION,
            "mode": self.mode,
            "n_frequencies": self.encoding.n_frequencies,
            "include_raw": self.encoding.include_raw,
            "hidden": list(self.hidden),
            "code_dim": self.code_dim,
            "cube_side_m": self.cube.side,
            "cube_z_near_m": self.cube.z_near,
            "transient_shape": list(self.transient_shape) if self.transient_shape else None,
            "pool": self.pool,
            "activation": "softplus",
            "output": "logistic",
            "tensors": list(self.params),
        }

    def save(self, path) -> None:
        """Binary weights (magic, version, dtype, per-tensor dims and data) plus JSON metadata."""
        path = Path(path)
        width = self.dtype.itemsize
        chunks = [WEIGHTS_MAGIC, struct.pack("<IBI", WEIGHTS_VERSION, width, len(self.params))]
        for name, arr in self.params.items():
            raw = name.encode()
            chunks.append(struct.pack("<H", len(raw)) + raw)
            chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(np.ascontiguousarray(arr, dtype=f"<f{width}").tobytes())
        path.write_bytes(b"".join(chunks))
        Path(str(path) + ".json").write_text(json.dumps(self.metadata(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "OcclusionField":
        path = Path(path)
        buf = path.read_bytes()
        if buf[:4] != WEIGHTS_MAGIC:
            raise ValueError(f"{path} is not a weight file")
        version, width, count = struct.unpack_from("<IBI", buf, 4)
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weight file version {version}")
        off = 4 + struct.calcsize("<IBI")
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(buf, dtype=f"<f{width}", count=size, offset=off).reshape(shape).copy()
            off += size * width
        meta = json.loads(Path(str(path) + ".json").read_text())
        ts = meta.get("transient_shape")
        return cls(
            params,
            PositionalEncoding(meta["n_frequencies"], meta["include_raw"]),
            tuple(meta["hidden"]), meta["code_dim"], meta["mode"],
            HiddenCube(meta["cube_side_m"], meta["cube_z_near_m"]),
            tuple(ts) if ts else None, meta.get("pool", 4),
        )


# ---------------------------------------------------------------------------
# Training


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


@dataclass
class FitConfig:
    steps: int = 2000
    batch: int = 20_000
    lr: float = 1e-3
    val_fraction: float = 0.1
    eval_every: int = 100
    seed: int = 0
    # Cosine decay of the learning rate down to lr * lr_final over the run; 1.0 keeps it constant.
    lr_final: float = 1.0


@dataclass
class FitReport:
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_step: int = -1
    best_val_loss: float = float("inf")
    n_train: int = 0
    n_val: int = 0
    val_iou: float = float("nan")
    initial_loss: float = float("nan")
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def loss_csv(self) -> str:
        rows = ["step,train_bce,val_bce"]
        rows += [f"{s},{t:.6g},{v:.6g}" for s, t, v in zip(self.steps, self.train_loss, self.val_loss)]
        return "\n".join(rows) + "\n"


def _point_iou(pred, gt) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    union = np.count_nonzero(pred | gt)
    return 1.0 if union == 0 else np.count_nonzero(pred & gt) / union


def fit(fld: OcclusionField, sample_sets, config: FitConfig = FitConfig(), transients=None) -> FitReport:
    """Fit the field to labeled points by Adam on the mean BCE.

    ``sample_sets`` is one OcclusionSampleSet or a list of them; conditioned
    fields need one transient per set. Minibatches draw ``config.batch``
    points spread over the scenes. The weights with the best validation loss
    are kept in ``fld.params``.
    """
    t0 = time.perf_counter()
    if not isinstance(sample_sets, (list, tuple)):
        sample_sets = [sample_sets]
    if transients is None:
        transients = [None] * len(sample_sets)
    elif not isinstance(transients, (list, tuple)):
        transients = [transients]
    if len(transients) != len(sample_sets):
        raise ValueError("need one transient per sample set")

    rng = np.random.default_rng(config.seed)
    train, val = [], []
    for s in sample_sets:
        idx = rng.permutation(len(s))
        n_val = int(round(len(s) * config.val_fraction))
        val.append((s.points[idx[:n_val]], s.global_label[idx[:n_val]]))
        train.append((s.points[idx[n_val:]], s.global_label[idx[n_val:]]))

    report = FitReport(n_train=sum(len(t[0]) for t in train), n_val=sum(len(v[0]) for v in val))
    has_val = report.n_val > 0

    def val_loss():
        batches = [(tr, p, y) for tr, (p, y) in zip(transients, val) if len(p)]
        if not batches:
            return float("nan")
        total = sum(len(b[1]) for b in batches)
        return sum(bce_loss(fld.predict(p, tr), y) * len(p) for tr, p, y in batches) / total

    opt = Adam(fld.params, config.lr)
    per_scene = max(1, config.batch // len(train))
    best = fld.copy_params()
    report.initial_loss = val_loss() if has_val else float("nan")
    report.best_val_loss = report.initial_loss if has_val else float("inf")
    report.best_step = 0
    last_finite = fld.copy_params()
    running = []
    for step in range(1, config.steps + 1):
        batches = []
        for tr, (p, y) in zip(transients, train):
            sel = rng.integers(0, len(p), size=min(per_scene, len(p)))
            batches.append((tr, p[sel], y[sel]))
        loss, grads = fld.loss_and_grad(batches)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            fld.params.update(last_finite)
            raise FitDivergence(f"non-finite loss at step {step}", last_finite, step)
        opt.lr = config.lr * (config.lr_final + (1.0 - config.lr_final)
                              * 0.5 * (1.0 + np.cos(np.pi * (step - 1) / config.steps)))
        opt.step(fld.params, grads)
        running.append(loss)
        if step % config.eval_every == 0 or step == config.steps:
            last_finite = fld.copy_params()
            vl = val_loss() if has_val else float(np.mean(running))
            report.steps.append(step)
            report.train_loss.append(float(np.mean(running)))
            report.val_loss.append(vl)
            running = []
            if vl <= report.best_val_loss or not has_val:
                report.best_val_loss = vl
                report.best_step = step
                best = fld.copy_params()
    fld.params.update(best)
    if has_val:
        preds = [fld.predict(p, tr) > 0.5 for tr, (p, _) in zip(transients, val)]
        report.val_iou = _point_iou(np.concatenate(preds), np.concatenate([y for _, y in val]))
    report.wall_clock_s = time.perf_counter() - t0
    return report
