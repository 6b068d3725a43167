"""Feed-forward classifier with dropout and attached loss-prediction modules.

Layout (row-vector convention, ``x`` has shape (B, d))::

    a_0 = relu(x @ W0 + b0)            block 0
    a_i = relu(drop(a_{i-1}) @ Wi + bi) block i
    logits = drop(a_L) @ Wout + bout

Each attached block ``i`` feeds a loss module ``g_i = relu(a_i @ Ui + ci)``;
the module outputs are concatenated and mapped to a scalar predicted loss by
``concat(g) @ v + v0``.  Global average pooling over a vector activation is
the identity, so modules read ``a_i`` directly.  Modules see the
pre-dropout activation.  Dropout is inverted (scaled at train time).
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tplab import objective
from tplab import rng as rngmod

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    input_dim: int
    n_classes: int
    hidden_dims: tuple = (64, 64, 32)
    dropout_p: float = 0.25
    lossmod_attach: tuple | None = None  # None attaches to every block
    lossmod_mid_dim: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.lossmod_attach is not None:
            object.__setattr__(self, "lossmod_attach", tuple(int(a) for a in self.lossmod_attach))

    @property
    def attach(self):
        if self.lossmod_attach is None:
            return tuple(range(len(self.hidden_dims)))
        return self.lossmod_attach

    def validate(self):
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be non-empty")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if self.input_dim < 1 or self.n_classes < 2:
            raise ValueError("input_dim must be >= 1 and n_classes >= 2")
        if not 0 <= self.dropout_p < 1:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.lossmod_mid_dim < 1:
            raise ValueError(f"lossmod_mid_dim must be >= 1, got {self.lossmod_mid_dim}")
        bad = [a for a in self.attach if not 0 <= a < len(self.hidden_dims)]
        if bad or len(set(self.attach)) != len(self.attach):
            raise ValueError(f"lossmod_attach {self.attach} is not a set of valid block indices")
        return self

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "hidden_dims": list(self.hidden_dims),
            "dropout_p": self.dropout_p,
            "lossmod_attach": None if self.lossmod_attach is None else list(self.lossmod_attach),
            "lossmod_mid_dim": self.lossmod_mid_dim,
        }

    def param_shapes(self):
        """Ordered parameter names and shapes; this order is the checkpoint order."""
        shapes = {}
        prev = self.input_dim
        for i, h in enumerate(self.hidden_dims):
            shapes[f"W{i}"] = (prev, h)
            shapes[f"b{i}"] = (h,)
            prev = h
        shapes["Wout"] = (prev, self.n_classes)
        shapes["bout"] = (self.n_classes,)
        m = self.lossmod_mid_dim
        for a in self.attach:
            shapes[f"U{a}"] = (self.hidden_dims[a], m)
            shapes[f"c{a}"] = (m,)
        shapes["v"] = (m * len(self.attach),)
        shapes["v0"] = (1,)
        return shapes


@dataclass
class Model:
    arch: ArchSpec
    params: dict
    velocity: dict
    forward_rows: int = 0  # instrumentation: rows pushed through forward()

    def copy(self):
        return Model(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.velocity.items()},
        )

    def backbone_names(self):
        n = len(self.arch.hidden_dims)
        return [f"W{i}" for i in range(n)] + [f"b{i}" for i in range(n)] + ["Wout", "bout"]

    def module_names(self):
        return [k for k in self.params if k not in set(self.backbone_names())]


@dataclass
class ForwardTrace:
    logits: np.ndarray
    block_activations: list
    latent: np.ndarray
    predicted_loss: np.ndarray
    dropout_masks: list | None = None
    # cached for backward
    inputs: list = field(default_factory=list)  # input to each block (post-dropout)
    head_input: np.ndarray | None = None
    module_hidden: list = field(default_factory=list)

    @property
    def module_features(self):
        """Concatenated module activations; ``predicted_loss = features @ v + v0``."""
        return np.concatenate(self.module_hidden, axis=1)


def init_model(arch, seed):
    arch.validate()
    g = rngmod.stream(seed, rngmod.INIT)
    shapes = arch.param_shapes()
    # bias fan-in is that of its weight matrix
    fan = {}
    for name, shape in shapes.items():
        if name.startswith("W") or name.startswith("U"):
            fan[name] = shape[0]
    params = {}
    for name, shape in shapes.items():
        if name.startswith(("W", "U")):
            n_in = shape[0]
        elif name == "bout":
            n_in = fan["Wout"]
        elif name.startswith("b"):
            n_in = fan["W" + name[1:]]
        elif name.startswith("c"):
            n_in = fan["U" + name[1:]]
        else:  # v, v0
            n_in = shapes["v"][0]
        bound = 1.0 / np.sqrt(n_in)
        params[name] = g.uniform(-bound, bound, size=shape)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return Model(arch, params, velocity)


def _check(arr, what):
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values in {what}")


def forward(model, x, train=False, rng=None, masks=None, modules=True):
    """Run the network.

    ``train=True`` samples inverted-dropout masks from ``rng`` unless
    explicit ``masks`` (one per block) are given.  Eval mode is deterministic.
    ``modules=False`` skips the loss modules (``predicted_loss`` is then None).
    """
    # overflow surfaces as a named FloatingPointError from _check instead of a warning
    with np.errstate(over="ignore", invalid="ignore"):
        return _forward(model, x, train, rng, masks, modules)


def _forward(model, x, train, rng, masks, modules):
    p = model.params
    arch = model.arch
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != arch.input_dim:
        raise ValueError(f"input has dim {x.shape[1]}, expected {arch.input_dim}")
    model.forward_rows += x.shape[0]
    drop = train and arch.dropout_p > 0
    if drop and masks is None:
        if rng is None:
            raise ValueError("train-mode forward with dropout needs an rng")
        keep = 1.0 - arch.dropout_p
        masks = [
            (rng.random((x.shape[0], h)) < keep) / keep for h in arch.hidden_dims
        ]
    if not drop:
        masks = None

    inputs, acts = [], []
    h = x
    for i in range(len(arch.hidden_dims)):
        inputs.append(h)
        z = h @ p[f"W{i}"] + p[f"b{i}"]
        _check(z, f"block {i}")
        a = np.maximum(z, 0.0)
        acts.append(a)
        h = a * masks[i] if masks is not None else a
    logits = h @ p["Wout"] + p["bout"]
    _check(logits, "classifier head")

    if not modules:
        return ForwardTrace(logits, acts, acts[-1], None, masks, inputs, h, [])
    hidden = [np.maximum(acts[a] @ p[f"U{a}"] + p[f"c{a}"], 0.0) for a in arch.attach]
    g = np.concatenate(hidden, axis=1)
    lhat = g @ p["v"] + p["v0"][0]
    _check(lhat, "loss module")
    return ForwardTrace(logits, acts, acts[-1], lhat, masks, inputs, h, hidden)


def predict_proba(model, x):
    return objective.softmax(forward(model, x, modules=False).logits)


def mc_predict(model, x, T=10, rng=None):
    """T dropout-sampled softmax outputs, shape (T, n, C)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if rng is None:
        rng = np.random.default_rng(0)
    return np.stack([
        objective.softmax(forward(model, x, train=True, rng=rng, modules=False).logits)
        for _ in range(T)
    ])


def latent(model, x):
    return forward(model, x, modules=False).latent


def loss_and_grads(
    model, x, y, loss_cfg, detach=False, train=True, rng=None, masks=None, target_losses=None
):
    """Combined loss ``mean CE + eta * module_loss`` and its exact gradients.

    Per-sample CE values enter the module loss as constants (pass
    ``target_losses`` to pin them to given values instead).  With
    ``detach`` the module-loss gradient stops at the block activations, so
    backbone gradients equal those of CE alone.  Returns
    ``(total, ce_mean, module_loss, grads)``.
    """
    y = np.asarray(y, dtype=np.int64)
    B = len(y)
    if B % 2:
        raise ValueError(f"batch of {B} cannot be paired for the ranking loss")
    tr = forward(model, x, train=train, rng=rng, masks=masks)
    p = model.params
    arch = model.arch

    ce = objective.cross_entropy(tr.logits, y)
    ce_mean = float(ce.mean())
    lhat = tr.predicted_loss
    target = ce if target_losses is None else np.asarray(target_losses, dtype=np.float64)
    mod = objective.loss_module_loss(target, lhat, loss_cfg)
    total = objective.combined_loss(ce_mean, mod, loss_cfg.eta)

    grads = {}
    # loss modules
    dl = loss_cfg.eta * objective.loss_module_grad(target, lhat, loss_cfg)
    G = np.concatenate(tr.module_hidden, axis=1)
    grads["v"] = G.T @ dl
    grads["v0"] = np.array([dl.sum()])
    dG = dl[:, None] * p["v"][None, :]
    m = arch.lossmod_mid_dim
    from_module = {}
    for k, a in enumerate(arch.attach):
        dh = dG[:, k * m:(k + 1) * m] * (tr.module_hidden[k] > 0)
        grads[f"U{a}"] = tr.block_activations[a].T @ dh
        grads[f"c{a}"] = dh.sum(axis=0)
        if not detach:
            from_module[a] = dh @ p[f"U{a}"].T

    # backbone
    dlogits = objective.softmax(tr.logits)
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    grads["Wout"] = tr.head_input.T @ dlogits
    grads["bout"] = dlogits.sum(axis=0)
    dh = dlogits @ p["Wout"].T
    for i in reversed(range(len(arch.hidden_dims))):
        da = dh * tr.dropout_masks[i] if tr.dropout_masks is not None else dh
        if i in from_module:
            da = da + from_module[i]
        dz = da * (tr.block_activations[i] > 0)
        grads[f"W{i}"] = tr.inputs[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        if i:
            dh = dz @ p[f"W{i}"].T
    grads = {k: grads[k] for k in p}
    return total, ce_mean, mod, grads


def sgd_step(model, grads, lr, momentum):
    """Classic momentum: ``v <- mu v + g``, ``w <- w - lr v``."""
    for name, w in model.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
    for name, w in model.params.items():
        v = model.velocity[name]
        v *= momentum
        v += grads[name]
        w -= lr * v


# ---------------------------------------------------------------- checkpoints


def model_to_dict(model):
    def enc(arrs):
        return {k: {"shape": list(a.shape), "data": [repr(float(v)) for v in a.ravel()]} for k, a in arrs.items()}

    return {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "params": enc(model.params),
        "velocity": enc(model.velocity),
    }


def model_from_dict(doc):
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
    arch = ArchSpec(**doc["arch"]).validate()

    def dec(section):
        out = {}
        for name, shape in arch.param_shapes().items():
            rec = doc[section][name]
            if tuple(rec["shape"]) != shape:
                raise ValueError(f"{section}.{name} has shape {rec['shape']}, expected {list(shape)}")
            out[name] = np.array([float(v) for v in rec["data"]], dtype=np.float64).reshape(shape)
        return out

    return Model(arch, dec("params"), dec("velocity"))


def checkpoint_bytes(model):
    return json.dumps(model_to_dict(model), separators=(",", ":")).encode()


def save_model(model, path):
    Path(path).write_bytes(checkpoint_bytes(model))


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
