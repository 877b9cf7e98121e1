"""End-to-end training of a small parameter-map predictor through the contour evolution.

The predictor is two padded 3x3 convolutions::

    image -> conv(1->8) -> relu -> conv(8->4) -> (lambda1, lambda2, phi0, P)

Its outputs seed the level-set evolution, the evolved level set and ``P``
are scored against the mask, and the whole chain is differentiated on one
tape.  Parameters are kept float32-representable so that a saved model
reloads to exactly the same predictions.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fields
from .acm import AcmParams, LambdaMode, evolve, mask_from_phi
from .losses import LossWeights, dtac_total_loss
from .metrics import dice_score

log = logging.getLogger(__name__)

MODL_MAGIC = b"MODL"
MODL_VERSION = 1

OUTPUT_INIT_STD = 0.01

TRAINABLE = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "lam_const")
_SHAPES = {
    "conv1_w": (8, 1, 3, 3),
    "conv1_b": (8,),
    "conv2_w": (4, 8, 3, 3),
    "conv2_b": (4,),
    "lam_const": (2,),
}


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class PredictorParams:
    conv1_w: np.ndarray
    conv1_b: np.ndarray
    conv2_w: np.ndarray
    conv2_b: np.ndarray
    lam_const: np.ndarray  # raw scalars used when lambda_mode is 'constants'
    phi_scale: float = 10.0
    lambda_scale: float = math.e ** 2

    def __post_init__(self):
        for name in TRAINABLE:
            a = _f32(getattr(self, name))
            if a.shape != _SHAPES[name]:
                raise ValueError(f"{name} must have shape {_SHAPES[name]}, got {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} is not finite")
            setattr(self, name, a)
        if not (self.phi_scale > 0 and self.lambda_scale > 0):
            raise ValueError("phi_scale and lambda_scale must be > 0")
        self.phi_scale = float(np.float32(self.phi_scale))
        self.lambda_scale = float(np.float32(self.lambda_scale))

    @classmethod
    def zeros(cls, **kw) -> "PredictorParams":
        return cls(**{k: np.zeros(s) for k, s in _SHAPES.items()}, **kw)

    @classmethod
    def init(cls, seed: int = 0, **kw) -> "PredictorParams":
        """He-normal first layer, near-zero output layer.

        First-layer biases centre each filter on mid-grey so that the hidden
        units split bright from dark patches.  The small output kernels keep
        every head off the sigmoid plateau at the start; the output biases
        start both lambdas at 1 and the other heads at 0.
        """
        rng = np.random.default_rng(seed)
        lambda_scale = kw.get("lambda_scale", math.e ** 2)
        lam_raw = -math.log(lambda_scale - 1.0) if lambda_scale > 1.0 else 0.0
        w1 = rng.normal(0.0, math.sqrt(2.0 / 9.0), _SHAPES["conv1_w"])
        return cls(
            conv1_w=w1,
            conv1_b=-0.5 * w1.sum(axis=(1, 2, 3)),
            conv2_w=rng.normal(0.0, OUTPUT_INIT_STD, _SHAPES["conv2_w"]),
            conv2_b=np.array([lam_raw, lam_raw, 0.0, 0.0]),
            lam_const=np.full(2, lam_raw),
            **kw,
        )

    def tensors(self) -> dict:
        return {k: getattr(self, k) for k in TRAINABLE}

    def with_tensors(self, new: dict) -> "PredictorParams":
        return replace(self, **new)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    alpha0: float = 0.05
    # the curvature term is explicit-Euler unstable on the nearly flat initial
    # level sets the predictor emits, so training evolves with mu = 0
    acm: AcmParams = field(default_factory=lambda: AcmParams(iters=20, mu=0.0))
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "momentum"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "momentum"):
            raise ValueError("optimizer must be 'sgd' or 'momentum'")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "alpha0": self.alpha0,
            "acm": self.acm.to_dict(),
            "weights": self.weights.to_dict(),
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "momentum": self.momentum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {"epochs", "alpha0", "acm", "weights", "batch_size", "seed", "optimizer", "momentum"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "acm" in d:
            d["acm"] = AcmParams.from_dict(d["acm"])
        if "weights" in d:
            d["weights"] = LossWeights.from_dict(d["weights"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# forward model


def predictor_forward(image, params: PredictorParams, tensors=None):
    """Map an image (H, W) or batch (B, H, W) to ``(lambda1, lambda2, phi0, P)``.

    ``tensors`` overrides the trainable arrays (e.g. with tape Vars).
    """
    t = params.tensors() if tensors is None else tensors
    x = np.asarray(image, dtype=np.float64)[..., None, :, :]
    h = ad.relu(ad.conv3x3(x, t["conv1_w"]) + ad.reshape(t["conv1_b"], (8, 1, 1)))
    raw = ad.conv3x3(h, t["conv2_w"]) + ad.reshape(t["conv2_b"], (4, 1, 1))
    lam1 = ad.scale(ad.sigmoid(raw[..., 0, :, :]), params.lambda_scale)
    lam2 = ad.scale(ad.sigmoid(raw[..., 1, :, :]), params.lambda_scale)
    phi0 = ad.scale(ad.sigmoid(raw[..., 2, :, :]) - 0.5, params.phi_scale)
    prob = ad.sigmoid(raw[..., 3, :, :])
    return lam1, lam2, phi0, prob


def constant_lambdas(params: PredictorParams, tensors=None):
    t = params.tensors() if tensors is None else tensors
    lam = ad.scale(ad.sigmoid(t["lam_const"]), params.lambda_scale)
    return lam[0], lam[1]


def forward(image, params: PredictorParams, acm: AcmParams, tensors=None):
    """Predictor plus evolution; returns ``(phi_N, P)``."""
    lam1, lam2, phi0, prob = predictor_forward(image, params, tensors)
    if acm.lambda_mode is LambdaMode.CONSTANTS:
        lam1, lam2 = constant_lambdas(params, tensors)
    phi_n, _ = evolve(image, phi0, lam1, lam2, acm)
    return phi_n, prob


def batch_loss(images, gts, params: PredictorParams, acm: AcmParams, tensors=None):
    phi_n, prob = forward(images, params, acm, tensors)
    return dtac_total_loss(phi_n, prob, np.asarray(gts, dtype=np.float64), acm.eps)


def predict(image, params: PredictorParams, acm: AcmParams) -> np.ndarray:
    """Final level set for an image or batch (no tape)."""
    phi_n, _ = forward(image, params, acm)
    return ad.value(phi_n)


def clear_of_kinks(images, params: PredictorParams, margin: float) -> PredictorParams:
    """Shift hidden biases so no ReLU input on ``images`` lies within ``margin`` of 0.

    Each channel's bias moves by the smallest multiple of ``margin`` that
    clears it.  Finite differences with a step below ``margin`` then never
    straddle a kink, which is what a gradient check at this point needs.
    """
    if not margin > 0:
        raise ValueError("margin must be > 0")
    x = np.asarray(images, dtype=np.float64)[..., None, :, :]
    z = ad.conv3x3(x, params.conv1_w)
    z = np.moveaxis(z, -3, 0).reshape(len(params.conv1_b), -1)
    bias = params.conv1_b.copy()
    for c, zc in enumerate(z):
        for k in range(1, 100_000):
            shift = (k // 2) * margin * (1 if k % 2 else -1)
            if np.min(np.abs(zc + bias[c] + shift)) >= margin:
                bias[c] += shift
                break
        else:
            raise ValueError(f"no kink-free bias for channel {c}")
    return replace(params, conv1_b=bias)


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(e: float, n_epochs: float, alpha0: float) -> float:
    """Polynomial decay ``alpha0 * (1 - e / N_e) ** 0.9``."""
    if e < 0 or e > n_epochs:
        raise ValueError(f"epoch {e} outside [0, {n_epochs}]")
    return alpha0 * (1.0 - e / n_epochs) ** 0.9


def loss_and_grads(images, gts, params: PredictorParams, acm: AcmParams):
    tape = ad.Tape()
    tvars = {k: tape.var(v) for k, v in params.tensors().items()}
    loss = batch_loss(images, gts, params, acm, tvars)
    grads = tape.backward(loss)
    return float(loss.value), {k: grads[v] for k, v in tvars.items()}


def train_step(batch, params: PredictorParams, config: TrainConfig, lr: float, velocity=None):
    """One gradient step on ``batch = (images, gts)``.

    Returns ``(new_params, loss, velocity)``; ``velocity`` carries the
    momentum buffers between calls and is ignored for plain SGD.
    """
    images, gts = batch
    loss, grads = loss_and_grads(images, gts, params, config.acm)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss!r}")
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}")
    if velocity is None:
        velocity = {k: np.zeros_like(g) for k, g in grads.items()}
    new = {}
    for k, p in params.tensors().items():
        if config.optimizer == "momentum":
            velocity[k] = config.momentum * velocity[k] + grads[k]
            step = velocity[k]
        else:
            step = grads[k]
        new[k] = _f32(p - lr * step)
    return params.with_tensors(new), loss, velocity


def load_pairs(dataset_dir):
    """Load ``scene_*.pgm`` / ``scene_*_gt.pgm`` pairs in sorted order."""
    d = Path(dataset_dir)
    images, gts, names = [], [], []
    for p in sorted(d.glob("*.pgm")):
        if p.stem.endswith("_gt"):
            continue
        gt_path = p.with_name(p.stem + "_gt.pgm")
        if not gt_path.exists():
            continue
        images.append(fields.read_pgm(p))
        gts.append(fields.read_mask(gt_path))
        names.append(p.stem)
    if not images:
        raise ValueError(f"no image/mask pairs found in {d}")
    return np.stack(images), np.stack(gts), names


def mean_dice(images, gts, params: PredictorParams, acm: AcmParams, chunk: int = 16) -> float:
    scores = []
    for i in range(0, len(images), chunk):
        phi = predict(images[i:i + chunk], params, acm)
        scores += [dice_score(g, mask_from_phi(p)) for g, p in zip(gts[i:i + chunk], phi)]
    return float(np.mean(scores))


def fit_arrays(images, gts, config: TrainConfig, val=None, params: PredictorParams | None = None):
    """Train on in-memory arrays; returns ``(params, history)``.

    ``history`` has one dict per epoch with the learning rate used, the mean
    training loss and (when ``val = (images, gts)`` is given) held-out Dice.
    """
    params = PredictorParams.init(config.seed) if params is None else params
    history = []
    if config.epochs == 0:
        return params, history
    rng = np.random.default_rng(config.seed)
    velocity = None
    n = len(images)
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config.alpha0)
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            params, loss, velocity = train_step((images[idx], gts[idx]), params, config, lr, velocity)
            losses.append(loss * len(idx))
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.sum(losses) / n)}
        if val is not None:
            row["val_dice"] = mean_dice(val[0], val[1], params, config.acm)
        log.info("epoch %d lr %.5f loss %.5f dice %s", epoch, lr, row["train_loss"], row.get("val_dice"))
        history.append(row)
    return params, history


def fit(dataset_dir, config: TrainConfig, val_fraction: float = 0.2, model_out=None):
    """Train on a scene directory; the last ``val_fraction`` of pairs is held out."""
    images, gts, _ = load_pairs(dataset_dir)
    n_val = int(round(len(images) * val_fraction))
    if n_val >= len(images):
        raise ValueError("validation split leaves no training data")
    split = len(images) - n_val
    val = (images[split:], gts[split:]) if n_val else None
    params, history = fit_arrays(images[:split], gts[:split], config, val)
    if model_out is not None:
        save_model(model_out, params)
    return params, history


# ---------------------------------------------------------------------------
# model file


def _tensor_block(name: str, a: np.ndarray) -> bytes:
    a = np.asarray(a, dtype=np.float64)
    g = a.reshape(a.shape[0], -1) if a.ndim >= 2 else a.reshape(1, -1)
    raw = name.encode("ascii")
    return struct.pack("<B", len(raw)) + raw + fields.fgrd_block(g)


def save_model(path, params: PredictorParams) -> None:
    out = bytearray(MODL_MAGIC + struct.pack("<B", MODL_VERSION))
    for name in TRAINABLE:
        out += _tensor_block(name, getattr(params, name))
    out += _tensor_block("phi_scale", np.array([params.phi_scale]))
    out += _tensor_block("lambda_scale", np.array([params.lambda_scale]))
    Path(path).write_bytes(bytes(out))


def load_model(path) -> PredictorParams:
    buf = Path(path).read_bytes()
    if buf[:4] != MODL_MAGIC:
        raise ValueError("not a MODL file")
    if buf[4] != MODL_VERSION:
        raise ValueError(f"unsupported MODL version {buf[4]}")
    pos = 5
    tensors = {}
    while pos < len(buf):
        n = buf[pos]
        name = buf[pos + 1:pos + 1 + n].decode("ascii")
        g, pos = fields.parse_fgrd(buf, pos + 1 + n)
        tensors[name] = g
    missing = set(TRAINABLE) | {"phi_scale", "lambda_scale"}
    missing -= set(tensors)
    if missing:
        raise ValueError(f"MODL file lacks {sorted(missing)}")
    kw = {k: tensors[k].reshape(_SHAPES[k]) for k in TRAINABLE}
    return PredictorParams(
        **kw,
        phi_scale=float(tensors["phi_scale"][0, 0]),
        lambda_scale=float(tensors["lambda_scale"][0, 0]),
    )
