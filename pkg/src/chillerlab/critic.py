"""Ensemble critic: multi-tower, multi-head MLPs trained on z-scored Monte Carlo targets.

Each tower sees a masked subset of the input features and feeds one or more
heads. Layout of one member::

    masked features -> [shared ReLU layer] x S -> per head: [ReLU layer] x H -> linear output

All ensemble members share the architecture and are stored stacked along a
leading axis so that one matmul serves every member. Members differ in their
initialization seed and in the order they visit the data.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .config import FacilityConfig
from .dataset import FeatureMask, Normalizer, TrainingSet, validate_masks

CHECKPOINT_MAGIC = b"CHLCRIT1"
CHECKPOINT_VERSION = 1
HIDDEN_BIAS = 0.01  # keeps fresh ReLUs off their kink


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CriticHParams:
    ensemble_size: int = 10
    shared_hidden_layers: int = 1
    per_head_hidden_layers: int = 2
    units_per_layer: int = 128
    learning_rate: float = 0.001
    epochs: int = 200
    batch_size: int = 256
    seed: int = 0
    init_seeds: tuple[int, ...] | None = None  # one per member; default seed*1000 + i

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        for name in ("units_per_layer", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.shared_hidden_layers < 0 or self.per_head_hidden_layers < 0 or self.epochs < 0:
            raise ValueError("layer and epoch counts must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.init_seeds is not None and len(self.init_seeds) != self.ensemble_size:
            raise ValueError("need one init seed per ensemble member")

    def member_seeds(self) -> tuple[int, ...]:
        if self.init_seeds is not None:
            return tuple(self.init_seeds)
        return tuple(self.seed * 1000 + i for i in range(self.ensemble_size))


def parameter_count(masks: Sequence[FeatureMask], hp: CriticHParams) -> int:
    """Closed-form number of trainable scalars in one ensemble member."""
    u = hp.units_per_layer
    total = 0
    for m in masks:
        width = len(m.features)
        for _ in range(hp.shared_hidden_layers):
            total += (width + 1) * u
            width = u
        head = 0
        w = width
        for _ in range(hp.per_head_hidden_layers):
            head += (w + 1) * u
            w = u
        head += w + 1
        total += len(m.heads) * head
    return total


@dataclass(frozen=True)
class EnsemblePrediction:
    mean: np.ndarray  # (batch, n_heads), target units
    std: np.ndarray  # (batch, n_heads), ensemble spread in target units
    names: tuple[str, ...]

    def head(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        i = self.names.index(name)
        return self.mean[:, i], self.std[:, i]

    def __len__(self) -> int:
        return len(self.mean)


@dataclass
class EnsembleModel:
    hparams: CriticHParams
    masks: tuple[FeatureMask, ...]
    feature_names: tuple[str, ...]
    target_names: tuple[str, ...]
    feature_norm: Normalizer
    target_norm: Normalizer
    params: dict[str, np.ndarray]
    history: list[np.ndarray] = field(default_factory=list)

    @property
    def size(self) -> int:
        return next(iter(self.params.values())).shape[0]

    def member(self, i: int, dtype=np.float64) -> "EnsembleModel":
        p = {k: v[i:i + 1].astype(dtype) for k, v in self.params.items()}
        return replace(self, params=p, history=[], hparams=replace(self.hparams, ensemble_size=1, init_seeds=None))

    def flat_weights(self) -> np.ndarray:
        """(members, n_params) view of every member's weights."""
        return np.concatenate([v.reshape(v.shape[0], -1) for _, v in sorted(self.params.items())], axis=1)

    def features_for(self, state: Mapping[str, float], actions: np.ndarray,
                     action_names: Sequence[str]) -> np.ndarray:
        """Feature matrix for one state and a batch of actions (rows of ``actions``)."""
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        X = np.empty((len(actions), len(self.feature_names)))
        pos = {a: j for j, a in enumerate(action_names)}
        for i, name in enumerate(self.feature_names):
            if name in pos:
                X[:, i] = actions[:, pos[name]]
            elif name in state:
                X[:, i] = state[name]
            else:
                raise KeyError(f"missing feature {name!r}")
        return X


# --------------------------------------------------------------------------- network


def _tower_cols(model_or_names, masks) -> list[np.ndarray]:
    names = list(model_or_names)
    return [np.array([names.index(f) for f in m.features]) for m in masks]


def _head_index(masks: Sequence[FeatureMask], target_names: Sequence[str]) -> list[np.ndarray]:
    return [np.array([list(target_names).index(h) for h in m.heads]) for m in masks]


def init_params(masks: Sequence[FeatureMask], hp: CriticHParams, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal hidden layers with 0.01 biases, linear outputs with zero bias; one RNG per member."""
    u = hp.units_per_layer
    per_member = []
    for seed in hp.member_seeds():
        rng = np.random.default_rng(seed)
        p = {}
        for m in masks:
            width = len(m.features)
            for s in range(hp.shared_hidden_layers):
                p[f"{m.name}.shared{s}.W"] = rng.normal(0, np.sqrt(2.0 / width), (width, u))
                p[f"{m.name}.shared{s}.b"] = np.full((1, u), HIDDEN_BIAS)
                width = u
            nh = len(m.heads)
            for layer in range(hp.per_head_hidden_layers):
                p[f"{m.name}.head{layer}.W"] = rng.normal(0, np.sqrt(2.0 / width), (nh, width, u))
                p[f"{m.name}.head{layer}.b"] = np.full((nh, 1, u), HIDDEN_BIAS)
                width = u
            p[f"{m.name}.out.W"] = rng.normal(0, np.sqrt(1.0 / width), (nh, width, 1))
            p[f"{m.name}.out.b"] = np.zeros((nh, 1, 1))
        per_member.append(p)
    return {k: np.stack([p[k] for p in per_member]).astype(dtype) for k in per_member[0]}


def _forward(params, masks, hp, cols, heads, X, keep=False):
    """X: (M, B, F) normalized features. Returns (M, B, K) outputs and optional caches."""
    M, B, _ = X.shape
    K = sum(len(h) for h in heads)
    out = np.empty((M, B, K), dtype=X.dtype)
    caches = []
    for m, c, hidx in zip(masks, cols, heads):
        h = X[:, :, c]
        acts = [h]
        for s in range(hp.shared_hidden_layers):
            h = np.maximum(h @ params[f"{m.name}.shared{s}.W"] + params[f"{m.name}.shared{s}.b"], 0)
            acts.append(h)
        g = np.broadcast_to(h[:, None], (M, len(hidx)) + h.shape[1:])
        hacts = [g]
        for layer in range(hp.per_head_hidden_layers):
            g = np.maximum(g @ params[f"{m.name}.head{layer}.W"] + params[f"{m.name}.head{layer}.b"], 0)
            hacts.append(g)
        y = g @ params[f"{m.name}.out.W"] + params[f"{m.name}.out.b"]  # (M, H, B, 1)
        out[:, :, hidx] = np.moveaxis(y[..., 0], 1, 2)
        if keep:
            caches.append((acts, hacts))
    return out, caches


def _backward(params, masks, hp, cols, heads, caches, dY):
    """Gradients of the loss given dL/dY (M, B, K)."""
    grads = {}
    for m, c, hidx, (acts, hacts) in zip(masks, cols, heads, caches):
        d = np.moveaxis(dY[:, :, hidx], 2, 1)[..., None]  # (M, H, B, 1)
        g = hacts[-1]
        grads[f"{m.name}.out.W"] = np.swapaxes(g, -1, -2) @ d
        grads[f"{m.name}.out.b"] = d.sum(axis=2, keepdims=True)
        d = d @ np.swapaxes(params[f"{m.name}.out.W"], -1, -2)
        for layer in reversed(range(hp.per_head_hidden_layers)):
            d = d * (hacts[layer + 1] > 0)
            grads[f"{m.name}.head{layer}.W"] = np.swapaxes(hacts[layer], -1, -2) @ d
            grads[f"{m.name}.head{layer}.b"] = d.sum(axis=2, keepdims=True)
            d = d @ np.swapaxes(params[f"{m.name}.head{layer}.W"], -1, -2)
        d = d.sum(axis=1)  # heads share the tower trunk
        for s in reversed(range(hp.shared_hidden_layers)):
            d = d * (acts[s + 1] > 0)
            grads[f"{m.name}.shared{s}.W"] = np.swapaxes(acts[s], -1, -2) @ d
            grads[f"{m.name}.shared{s}.b"] = d.sum(axis=1, keepdims=True)
            d = d @ np.swapaxes(params[f"{m.name}.shared{s}.W"], -1, -2)
    return grads


def _loss_and_grads(params, masks, hp, cols, heads, X, Y):
    """Sum over heads of per-head MSE, per member. X (M,B,F), Y (M,B,K) z-scored."""
    out, caches = _forward(params, masks, hp, cols, heads, X, keep=True)
    err = out - Y
    B = X.shape[1]
    loss = (err**2).mean(axis=1).sum(axis=1)  # (M,)
    grads = _backward(params, masks, hp, cols, heads, caches, 2.0 * err / B)
    return loss, grads


class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, g in grads.items():
            self.m[k] *= self.b1
            self.m[k] += (1 - self.b1) * g
            self.v[k] *= self.b2
            self.v[k] += (1 - self.b2) * g * g
            params[k] -= (self.lr / c1) * self.m[k] / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------------------- training / prediction


def train(examples: TrainingSet, masks: Sequence[FeatureMask], hparams: CriticHParams = CriticHParams(),
          progress: Callable[[int, np.ndarray], None] | None = None) -> EnsembleModel:
    """Train every member from scratch on ``examples``; returns the ensemble."""
    masks = tuple(masks)
    validate_masks(masks, examples.feature_names, examples.target_names)
    if len(examples) < 2:
        raise ValueError("need at least 2 training examples")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fnorm = Normalizer.fit(examples.features, examples.feature_names)
    tnorm = Normalizer.fit(examples.targets, examples.target_names)
    params = init_params(masks, hparams)
    model = EnsembleModel(hparams, masks, examples.feature_names, examples.target_names, fnorm, tnorm, params)
    if hparams.epochs == 0:
        return model

    X = fnorm.apply(examples.features).astype(np.float32)
    Y = tnorm.apply(examples.targets).astype(np.float32)
    cols = _tower_cols(examples.feature_names, masks)
    heads = _head_index(masks, examples.target_names)
    n = len(X)
    bs = min(hparams.batch_size, n)
    order_rngs = [np.random.default_rng([s, 7]) for s in hparams.member_seeds()]
    opt = _Adam(params, hparams.learning_rate)
    for epoch in range(hparams.epochs):
        perms = np.stack([r.permutation(n) for r in order_rngs])
        total = np.zeros(hparams.ensemble_size)
        for start in range(0, n, bs):
            idx = perms[:, start:start + bs]
            with np.errstate(invalid="ignore", over="ignore"):
                loss, grads = _loss_and_grads(params, masks, hparams, cols, heads, X[idx], Y[idx])
            if not np.all(np.isfinite(loss)):
                bad = int(np.flatnonzero(~np.isfinite(loss))[0])
                raise TrainingError(f"non-finite loss in member {bad} at epoch {epoch}, batch starting {start}; "
                                    f"target std {tnorm.std.tolist()}")
            opt.step(params, grads)
            total += loss * idx.shape[1]
        model.history.append(total / n)
        if progress is not None:
            progress(epoch, total / n)
    return model


def predict_features(model: EnsembleModel, features: np.ndarray, chunk: int = 8192,
                     z_scale: bool = False) -> EnsemblePrediction:
    """Ensemble mean/std per head for raw feature rows (batch, n_features)."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if features.shape[1] != len(model.feature_names):
        raise KeyError(f"expected {len(model.feature_names)} features, got {features.shape[1]}")
    hp = model.hparams
    cols = _tower_cols(model.feature_names, model.masks)
    heads = _head_index(model.masks, model.target_names)
    dtype = next(iter(model.params.values())).dtype
    Xz = model.feature_norm.apply(features).astype(dtype)
    K = len(model.target_names)
    mean = np.empty((len(Xz), K))
    std = np.empty((len(Xz), K))
    for start in range(0, len(Xz), chunk):
        x = Xz[start:start + chunk]
        z, _ = _forward(model.params, model.masks, hp, cols, heads, np.broadcast_to(x, (model.size,) + x.shape))
        y = z.astype(np.float64)
        if not z_scale:
            y = y * model.target_norm.std + model.target_norm.mean
        mean[start:start + chunk] = y.mean(axis=0)
        std[start:start + chunk] = y.std(axis=0)
    return EnsemblePrediction(mean, std, model.target_names)


def predict(model: EnsembleModel, state: Mapping[str, float], actions: np.ndarray,
            action_names: Sequence[str]) -> EnsemblePrediction:
    """Predictions for one state and a batch of candidate actions."""
    return predict_features(model, model.features_for(state, actions, action_names))


# --------------------------------------------------------------------------- diagnostics


def gradient_check(model: EnsembleModel, features: np.ndarray, targets: np.ndarray, member: int = 0,
                   step: float = 1e-5, corrupt: Callable[[dict], dict] | None = None) -> float:
    """Max relative error between backprop and central differences for one member.

    Runs in float64 on the z-scored loss. ``corrupt`` may alter the analytic
    gradients before comparison (used to show the check can fail).
    The relative error of a scalar pair is ``|a - n| / max(|a| + |n|, 1e-6)``.
    """
    net = model.member(member, np.float64)
    hp = net.hparams
    cols = _tower_cols(net.feature_names, net.masks)
    heads = _head_index(net.masks, net.target_names)
    X = net.feature_norm.apply(features)[None]
    Y = net.target_norm.apply(targets)[None]
    _, grads = _loss_and_grads(net.params, net.masks, hp, cols, heads, X, Y)
    if corrupt is not None:
        grads = corrupt(grads)
    worst = 0.0
    for k, p in net.params.items():
        flat = p.reshape(-1)
        g = grads[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            lp, _ = _forward(net.params, net.masks, hp, cols, heads, X)
            flat[i] = old - step
            lm, _ = _forward(net.params, net.masks, hp, cols, heads, X)
            flat[i] = old
            num = (((lp - Y) ** 2).mean(axis=1).sum() - ((lm - Y) ** 2).mean(axis=1).sum()) / (2 * step)
            err = abs(g[i] - num) / max(abs(g[i]) + abs(num), 1e-6)
            worst = max(worst, err)
    return worst


def sensitivity(model: EnsembleModel, anchor: Mapping[str, float], dim: str, deltas: Sequence[float],
                config: FacilityConfig) -> np.ndarray:
    """Predicted change per head when action ``dim`` moves by each delta, all else fixed.

    Returns (len(deltas), n_heads). Each ``anchor[dim] + delta`` must be an allowed value.
    """
    spec = config.action_dim(dim)
    base = float(anchor[dim])
    for d in deltas:
        if not spec.on_grid(base + d):
            raise ValueError(f"{dim}: {base} + {d} is not an allowed value")
    rows = np.array([[float(anchor[n]) for n in model.feature_names]] * (len(deltas) + 1))
    j = model.feature_names.index(dim)
    rows[1:, j] = base + np.asarray(deltas, dtype=float)
    mu = predict_features(model, rows).mean
    return mu[1:] - mu[0]


def feature_importance(model: EnsembleModel, features: np.ndarray, head: str | None = None,
                       n_resamples: int = 32, n_anchors: int = 64, seed: int = 0) -> dict[str, float]:
    """Variance of the predicted mean when one feature is redrawn from its empirical marginal.

    Averaged over ``n_anchors`` random rows; other features stay at the anchor values.
    """
    features = np.asarray(features, dtype=float)
    if len(features) < 2:
        raise ValueError("need at least 2 rows")
    rng = np.random.default_rng(seed)
    anchors = features[rng.choice(len(features), size=min(n_anchors, len(features)), replace=False)]
    k = model.target_names.index(head) if head else 0
    scores = {}
    for j, name in enumerate(model.feature_names):
        draws = features[rng.integers(0, len(features), size=(len(anchors), n_resamples)), j]
        batch = np.repeat(anchors, n_resamples, axis=0)
        batch[:, j] = draws.reshape(-1)
        mu = predict_features(model, batch).mean[:, k].reshape(len(anchors), n_resamples)
        scores[name] = float(mu.var(axis=1).mean())
    return scores


# --------------------------------------------------------------------------- checkpoints


def _norm_meta(n: Normalizer) -> dict:
    return {"names": list(n.names)}


def save(model: EnsembleModel, path: str | Path) -> None:
    """Deterministic binary checkpoint: magic, JSON header, raw little-endian arrays."""
    arrays = {f"param:{k}": v for k, v in sorted(model.params.items())}
    arrays.update({"fnorm:mean": model.feature_norm.mean, "fnorm:std": model.feature_norm.std,
                   "tnorm:mean": model.target_norm.mean, "tnorm:std": model.target_norm.std})
    manifest = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    hp = asdict(model.hparams)
    meta = {
        "version": CHECKPOINT_VERSION,
        "hparams": hp,
        "masks": [{"name": m.name, "features": list(m.features), "heads": list(m.heads)} for m in model.masks],
        "feature_names": list(model.feature_names),
        "target_names": list(model.target_names),
        "feature_norm": _norm_meta(model.feature_norm),
        "target_norm": _norm_meta(model.target_norm),
        "arrays": manifest,
    }
    header = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load(path: str | Path) -> EnsembleModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a critic checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    meta = json.loads(data[16:16 + hlen])
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta['version']}")
    body = memoryview(data)[16 + hlen:]
    arrays = {}
    for entry in meta["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype=dt, count=count, offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = a.astype(dt.newbyteorder("="), copy=True)
    hp = dict(meta["hparams"])
    if hp.get("init_seeds") is not None:
        hp["init_seeds"] = tuple(hp["init_seeds"])
    masks = tuple(FeatureMask(m["name"], tuple(m["features"]), tuple(m["heads"])) for m in meta["masks"])
    params = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("param:")}
    return EnsembleModel(
        CriticHParams(**hp), masks, tuple(meta["feature_names"]), tuple(meta["target_names"]),
        Normalizer(arrays["fnorm:mean"], arrays["fnorm:std"], tuple(meta["feature_norm"]["names"])),
        Normalizer(arrays["tnorm:mean"], arrays["tnorm:std"], tuple(meta["target_norm"]["names"])),
        params,
    )
