"""Vanilla LSTM velocity forecaster with a bivariate Gaussian head, in plain numpy.

Velocities are in metres per frame. The model divides inputs by a fixed
``scale`` (set from the training data) and multiplies the predicted mean and
spread back, so the network works on order-one numbers.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

OBS_LEN = 10  # observed positions, i.e. OBS_LEN - 1 velocities
PRED_LEN = 9
WEIGHTS_MAGIC = b"NTW1"
PARAM_NAMES = ("W_emb", "b_emb", "W_x", "W_h", "b", "W_dec", "b_dec")
# raw head outputs are clamped so exp/tanh stay strictly inside their ranges in floating point
RAW_S_MAX = 30.0
RAW_R_MAX = 7.0  # tanh(7) = 1 - 1.7e-6


@dataclass
class LstmModel:
    params: dict
    scale: float = 1.0

    @property
    def d_emb(self) -> int:
        return self.params["W_emb"].shape[0]

    @property
    def d_h(self) -> int:
        return self.params["W_h"].shape[1]

    def __post_init__(self):
        p = self.params
        e, h = p["W_emb"].shape[0], p["W_h"].shape[1]
        shapes = {"W_emb": (e, 2), "b_emb": (e,), "W_x": (4 * h, e), "W_h": (4 * h, h), "b": (4 * h,),
                  "W_dec": (5, h), "b_dec": (5,)}
        for k, s in shapes.items():
            if p[k].shape != s:
                raise ValueError(f"{k} has shape {p[k].shape}, expected {s}")
            if not np.all(np.isfinite(p[k])):
                raise ValueError(f"{k} has non-finite entries")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def copy(self) -> "LstmModel":
        return LstmModel({k: v.copy() for k, v in self.params.items()}, self.scale)


@dataclass(frozen=True)
class GaussianParams:
    mu: np.ndarray
    sigma: np.ndarray
    rho: float

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) <= 0) or not abs(self.rho) < 1:
            raise ValueError("need sigma > 0 and |rho| < 1")

    @property
    def cov(self) -> np.ndarray:
        sx, sy = self.sigma
        c = self.rho * sx * sy
        return np.array([[sx * sx, c], [c, sy * sy]])


@dataclass
class TrajectoryForecast:
    track_id: int
    positions: np.ndarray  # (w, 2)
    params: list = field(default_factory=list)


def init_model(d_emb=16, d_h=64, seed=0, scale=1.0) -> LstmModel:
    rng = np.random.default_rng(seed)

    def u(shape, fan):
        k = 1.0 / math.sqrt(fan)
        return rng.uniform(-k, k, shape)

    b = np.zeros(4 * d_h)
    b[d_h:2 * d_h] = 1.0  # forget gate starts open
    params = {
        "W_emb": u((d_emb, 2), 2), "b_emb": np.zeros(d_emb),
        "W_x": u((4 * d_h, d_emb), d_h), "W_h": u((4 * d_h, d_h), d_h), "b": b,
        "W_dec": u((5, d_h), d_h) * 0.1, "b_dec": np.zeros(5),
    }
    return LstmModel(params, scale)


def zero_model(d_emb=16, d_h=64) -> LstmModel:
    m = init_model(d_emb, d_h)
    return LstmModel({k: np.zeros_like(v) for k, v in m.params.items()})


# ---- layers: forward and backward, for one vector or a batch in rows ----

def embed_velocity(dv, model: LstmModel) -> np.ndarray:
    p = model.params
    return np.maximum(np.asarray(dv, float) @ p["W_emb"].T + p["b_emb"], 0.0)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_step(h, c, e, model: LstmModel, cache=None):
    p = model.params
    d = model.d_h
    z = e @ p["W_x"].T + h @ p["W_h"].T + p["b"]
    i = _sigmoid(z[..., :d])
    f = _sigmoid(z[..., d:2 * d])
    o = _sigmoid(z[..., 2 * d:3 * d])
    g = np.tanh(z[..., 3 * d:])
    c2 = f * c + i * g
    tc = np.tanh(c2)
    h2 = o * tc
    if cache is not None:
        cache.update(h=h, c=c, e=e, i=i, f=f, o=o, g=g, tc=tc)
    return h2, c2


def lstm_step_backward(dh2, dc2, cache, model: LstmModel, grads):
    """Backprop through one cell; accumulates parameter grads, returns (dh, dc, de)."""
    p = model.params
    i, f, o, g, tc = cache["i"], cache["f"], cache["o"], cache["g"], cache["tc"]
    dc = dc2 + dh2 * o * (1 - tc * tc)
    do = dh2 * tc
    di = dc * g
    dg = dc * i
    df = dc * cache["c"]
    dz = np.concatenate([di * i * (1 - i), df * f * (1 - f), do * o * (1 - o), dg * (1 - g * g)], axis=-1)
    dz2 = np.atleast_2d(dz)
    grads["W_x"] += dz2.T @ np.atleast_2d(cache["e"])
    grads["W_h"] += dz2.T @ np.atleast_2d(cache["h"])
    grads["b"] += dz2.sum(axis=0)
    return dz @ p["W_h"], dc * f, dz @ p["W_x"]


def embed_backward(de, dv, model: LstmModel, grads):
    p = model.params
    a = np.asarray(dv, float) @ p["W_emb"].T + p["b_emb"]
    da = de * (a > 0)
    grads["W_emb"] += np.atleast_2d(da).T @ np.atleast_2d(dv)
    grads["b_emb"] += np.atleast_2d(da).sum(axis=0)
    return da @ p["W_emb"]


def decode_raw(h, model: LstmModel) -> np.ndarray:
    p = model.params
    return h @ p["W_dec"].T + p["b_dec"]


def _clamp_head(raw):
    s = np.clip(raw[..., 2:4], -RAW_S_MAX, RAW_S_MAX)
    r = np.clip(raw[..., 4], -RAW_R_MAX, RAW_R_MAX)
    return s, r


def raw_to_params(raw) -> GaussianParams:
    raw = np.asarray(raw, float)
    s, r = _clamp_head(raw)
    return GaussianParams(raw[:2].copy(), np.exp(s), float(np.tanh(r)))


def decode_gaussian(h, model: LstmModel) -> GaussianParams:
    return raw_to_params(decode_raw(h, model))


def nll_loss(params: GaussianParams, target) -> float:
    sx, sy = (float(v) for v in params.sigma)
    rho = float(params.rho)
    if sx <= 0 or sy <= 0 or not abs(rho) < 1:
        raise ValueError("invalid Gaussian parameters")
    d = np.asarray(target, float) - params.mu
    nx, ny = d[0] / sx, d[1] / sy
    om = 1 - rho * rho
    z = nx * nx - 2 * rho * nx * ny + ny * ny
    return math.log(2 * math.pi * sx * sy * math.sqrt(om)) + z / (2 * om)


def nll_raw(raw, target):
    """Loss and d loss / d raw for rows of raw decoder outputs (m_x, m_y, s_x, s_y, r)."""
    raw = np.atleast_2d(raw)
    target = np.atleast_2d(target)
    s, r = _clamp_head(raw)
    sx, sy = np.exp(s[:, 0]), np.exp(s[:, 1])
    rho = np.tanh(r)
    om = 1 - rho * rho
    nx = (target[:, 0] - raw[:, 0]) / sx
    ny = (target[:, 1] - raw[:, 1]) / sy
    q = nx * nx - 2 * rho * nx * ny + ny * ny
    loss = math.log(2 * math.pi) + s[:, 0] + s[:, 1] + 0.5 * np.log(om) + q / (2 * om)
    ax = (nx - rho * ny) / om
    ay = (ny - rho * nx) / om
    grad = np.column_stack([-ax / sx, -ay / sy, 1 - nx * ax, 1 - ny * ay, -rho - nx * ny + rho * q / om])
    # flat outside the clamp
    grad[:, 2:4] *= np.abs(raw[:, 2:4]) < RAW_S_MAX
    grad[:, 4] *= np.abs(raw[:, 4]) < RAW_R_MAX
    return loss, grad


# ---- sequences ----

def sequence_loss(model: LstmModel, inputs, targets, loss_from: int, want_grads=True):
    """Teacher-forced run over (B, T, 2) scaled inputs.

    The output after input t is scored against targets[:, t] for t >= loss_from.
    Returns (mean loss over scored steps, grads or None).
    """
    x = np.asarray(inputs, float)
    y = np.asarray(targets, float)
    bsz, n_steps, _ = x.shape
    d = model.d_h
    h = np.zeros((bsz, d))
    c = np.zeros((bsz, d))
    caches, scored = [], []
    total = 0.0
    n_scored = bsz * (n_steps - loss_from)
    for t in range(n_steps):
        e = embed_velocity(x[:, t], model)
        cache = {}
        h, c = lstm_step(h, c, e, model, cache)
        caches.append(cache)
        if t >= loss_from:
            raw = decode_raw(h, model)
            loss, g = nll_raw(raw, y[:, t])
            total += loss.sum()
            scored.append((h, g / n_scored))
        else:
            scored.append(None)
    mean = total / n_scored
    if not want_grads:
        return mean, None
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    dh = np.zeros((bsz, d))
    dc = np.zeros((bsz, d))
    for t in range(n_steps - 1, -1, -1):
        if scored[t] is not None:
            h_t, graw = scored[t]
            grads["W_dec"] += graw.T @ h_t
            grads["b_dec"] += graw.sum(axis=0)
            dh = dh + graw @ p["W_dec"]
        dh, dc, de = lstm_step_backward(dh, dc, caches[t], model, grads)
        embed_backward(de, x[:, t], model, grads)
    return mean, grads


def velocities(positions) -> np.ndarray:
    return np.diff(np.asarray(positions, float).reshape(-1, 2), axis=0)


def forecast(history, w: int, model: LstmModel, mode="mean", seed=None, track_id=-1) -> TrajectoryForecast:
    """Roll the model forward ``w`` frames from a position history (oldest first)."""
    hist = np.asarray(history, float).reshape(-1, 2)
    if len(hist) < 2:
        raise ValueError("need at least two positions to form a velocity")
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown forecast mode {mode!r}")
    rng = np.random.default_rng(seed) if mode == "sample" else None
    s = model.scale
    h = np.zeros(model.d_h)
    c = np.zeros(model.d_h)
    for v in velocities(hist) / s:
        h, c = lstm_step(h, c, embed_velocity(v, model), model)
    pos = hist[-1].copy()
    out, params = [], []
    for _ in range(w):
        gp = decode_gaussian(h, model)
        if rng is None:
            v = gp.mu
        else:
            v = rng.multivariate_normal(gp.mu, gp.cov, method="cholesky")
        params.append(GaussianParams(gp.mu * s, gp.sigma * s, gp.rho))
        pos = pos + v * s
        out.append(pos.copy())
        h, c = lstm_step(h, c, embed_velocity(v, model), model)
    return TrajectoryForecast(track_id, np.array(out).reshape(w, 2), params)


def forecast_batch(histories, w: int, model: LstmModel) -> np.ndarray:
    """Mean-mode forecasts for equal-length histories (B, L, 2) -> (B, w, 2)."""
    hist = np.asarray(histories, float)
    bsz = len(hist)
    if bsz == 0:
        return np.zeros((0, w, 2))
    s = model.scale
    vel = np.diff(hist, axis=1) / s
    h = np.zeros((bsz, model.d_h))
    c = np.zeros((bsz, model.d_h))
    for t in range(vel.shape[1]):
        h, c = lstm_step(h, c, embed_velocity(vel[:, t], model), model)
    pos = hist[:, -1].copy()
    out = np.zeros((bsz, w, 2))
    for k in range(w):
        v = decode_raw(h, model)[:, :2]
        pos = pos + v * s
        out[:, k] = pos
        h, c = lstm_step(h, c, embed_velocity(v, model), model)
    return out


# ---- training ----

@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    clip: float = 5.0
    batch_size: int = 64
    d_emb: int = 16
    d_h: int = 64
    obs_len: int = OBS_LEN
    pred_len: int = PRED_LEN
    stride: int = 2
    val_fraction: float = 0.4
    seed: int = 0


def make_windows(trajectories, obs_len=OBS_LEN, pred_len=PRED_LEN, stride=1) -> np.ndarray:
    """All (obs_len + pred_len)-position windows from each (T, 2) trajectory -> (N, L, 2)."""
    n = obs_len + pred_len
    out = []
    for tr in trajectories:
        tr = np.asarray(tr, float)
        for s in range(0, len(tr) - n + 1, stride):
            out.append(tr[s:s + n])
    return np.array(out).reshape(-1, n, 2)


def split_items(n_items: int, val_fraction: float, seed: int):
    """Shuffled (train, val) index split."""
    order = np.random.default_rng(seed).permutation(n_items)
    n_train = int(round(n_items * (1 - val_fraction)))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def _teacher_batch(windows, obs_len, scale):
    v = np.diff(windows, axis=1) / scale
    # input v_t predicts v_{t+1}; score only the forecast segment
    return v[:, :-1], v[:, 1:], obs_len - 2


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            mh = self.m[k] / (1 - self.b1**self.t)
            vh = self.v[k] / (1 - self.b2**self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + self.eps)


def clip_grads(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


def _round_f32(model: LstmModel) -> LstmModel:
    # weights are stored as float32; keep the in-memory model identical to a reload
    return LstmModel({k: v.astype(np.float32).astype(np.float64) for k, v in model.params.items()},
                     float(np.float32(model.scale)))


@dataclass
class TrainResult:
    model: LstmModel
    train_loss: list
    val_loss: list
    best_epoch: int


def train(train_windows, val_windows, config: TrainConfig | None = None) -> TrainResult:
    cfg = config or TrainConfig()
    train_windows = np.asarray(train_windows, float)
    val_windows = np.asarray(val_windows, float)
    if len(train_windows) == 0:
        raise ValueError("no training windows")
    if len(val_windows) == 0:
        val_windows = train_windows
    rng = np.random.default_rng(cfg.seed)
    scale = float(np.std(np.diff(train_windows, axis=1))) or 1.0
    model = init_model(cfg.d_emb, cfg.d_h, cfg.seed, scale)
    opt = Adam(model.params, cfg.lr)
    xv, yv, lf = _teacher_batch(val_windows, cfg.obs_len, scale)
    best, best_loss, best_epoch = model.copy(), math.inf, 0
    tr_hist, va_hist = [], []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_windows))
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = train_windows[order[s:s + cfg.batch_size]]
            x, y, lf = _teacher_batch(batch, cfg.obs_len, scale)
            loss, grads = sequence_loss(model, x, y, lf)
            clip_grads(grads, cfg.clip)
            opt.step(model.params, grads)
            total += loss * len(batch)
            count += len(batch)
        tr_hist.append(total / count)
        va, _ = sequence_loss(model, xv, yv, lf, want_grads=False)
        va_hist.append(float(va))
        log.info("epoch %d train %.4f val %.4f", epoch, tr_hist[-1], va)
        if va < best_loss:
            best, best_loss, best_epoch = model.copy(), va, epoch
    return TrainResult(_round_f32(best), tr_hist, va_hist, best_epoch)


def write_loss_log(result: TrainResult, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_nll,val_nll\n")
        for k, (a, b) in enumerate(zip(result.train_loss, result.val_loss), 1):
            fh.write(f"{k},{a:.6f},{b:.6f}\n")


# ---- weights file: magic, u32 header length, JSON header, little-endian float32 payload ----

def save_model(model: LstmModel, path) -> None:
    tensors, blobs, offset = [], [], 0
    for name in PARAM_NAMES:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": tensors, "scale": model.scale}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC + struct.pack("<I", len(header)) + header)
        for b in blobs:
            fh.write(b)


def load_model(path) -> LstmModel:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    base = 8 + n
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"]))
        start = base + t["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=start)
        params[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return LstmModel(params, float(np.float32(header["scale"])))
