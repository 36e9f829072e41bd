"""Differentiable objectives over flat parameter vectors.

Every model exposes ``objective(w, batch)`` (mean loss over the batch) and
``gradient(w, batch)`` (its analytic gradient).  Models hold no parameters;
they only describe how a flat vector is interpreted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import BatchStream, Dataset
from .numerics import InvalidInputError, ParamVector, RngStream, ShapeError

RngLike = Union[RngStream, np.random.Generator]


def _gen(rng: RngLike) -> np.random.Generator:
    return rng.generator() if isinstance(rng, RngStream) else rng


class Model:
    kind: str = "base"
    dim: int

    def objective(self, w: ParamVector, batch: Optional[Dataset]) -> float:
        return self.loss_and_grad(w, batch)[0]

    def gradient(self, w: ParamVector, batch: Optional[Dataset]) -> ParamVector:
        return self.loss_and_grad(w, batch)[1]

    def loss_and_grad(self, w: ParamVector, batch: Optional[Dataset]) -> tuple[float, ParamVector]:
        raise NotImplementedError

    def init_params(self, rng: RngLike, scale: float = 1.0) -> ParamVector:
        raise NotImplementedError

    def evaluate(self, w: ParamVector, ds: Dataset) -> dict:
        return {"loss": self.objective(w, ds)}

    def describe(self) -> dict:
        return {"kind": self.kind, "dim": self.dim}

    def _check(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 1 or w.shape[0] != self.dim:
            raise ShapeError(f"{self.kind} model expects {self.dim} parameters, got shape {w.shape}")
        return w


def _check_batch(batch: Optional[Dataset]) -> Dataset:
    if batch is None or batch.n == 0:
        raise InvalidInputError("batch must be nonempty")
    return batch


# -- quadratic --------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticSpec:
    center: np.ndarray
    curvature: np.ndarray

    def __post_init__(self) -> None:
        c = np.asarray(self.center, dtype=np.float64)
        a = np.asarray(self.curvature, dtype=np.float64)
        if c.shape != a.shape or c.ndim != 1:
            raise ShapeError("center and curvature must be 1-D vectors of equal length")
        if not np.all(a > 0):
            raise InvalidInputError("curvature entries must be > 0")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "curvature", a)


class QuadraticModel(Model):
    """``F(w) = mean_b 1/2 sum_d A_d (w_d - c_d - x_bd)^2``.

    Batch rows act as offsets of the center, so the Hessian ``diag(A)`` does
    not depend on the batch and the exact smoothness constant is ``max(A)``.
    Passing ``batch=None`` evaluates the offset-free quadratic.
    """

    kind = "quadratic"

    def __init__(self, center, curvature=None):
        center = np.asarray(center, dtype=np.float64)
        if curvature is None:
            curvature = np.ones_like(center)
        self.spec = QuadraticSpec(center, curvature)
        self.dim = self.spec.center.shape[0]

    @property
    def lipschitz(self) -> float:
        return float(self.spec.curvature.max())

    def _offset(self, batch: Optional[Dataset]) -> np.ndarray:
        if batch is None:
            return self.spec.center
        if batch.d != self.dim:
            raise ShapeError(f"offset rows have width {batch.d}, model dim is {self.dim}")
        return self.spec.center + batch.inputs.mean(axis=0)

    def loss_and_grad(self, w, batch):
        w = self._check(w)
        a = self.spec.curvature
        if batch is None:
            r = w - self.spec.center
            return 0.5 * float(np.dot(a * r, r)), a * r
        r = w[None, :] - self.spec.center[None, :] - batch.inputs
        loss = 0.5 * float(np.mean(np.sum(a * r * r, axis=1)))
        return loss, a * (w - self._offset(batch))

    def init_params(self, rng, scale=1.0):
        return scale * _gen(rng).standard_normal(self.dim)

    def describe(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "center": self.spec.center.tolist(),
            "curvature": self.spec.curvature.tolist(),
        }


# -- logistic regression ----------------------------------------------------


class LogisticModel(Model):
    """Binary logistic regression; parameters are ``[weights..., bias]``, targets in {0, 1}."""

    kind = "logistic"

    def __init__(self, d_in: int):
        if d_in < 1:
            raise InvalidInputError("d_in must be >= 1")
        self.d_in = d_in
        self.dim = d_in + 1

    def logits(self, w, x):
        return x @ w[:-1] + w[-1]

    def loss_and_grad(self, w, batch):
        w = self._check(w)
        batch = _check_batch(batch)
        x, y = batch.inputs, batch.targets
        z = self.logits(w, x)
        # log(1 + e^z) - y z, stable for large |z|
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        s = 0.5 * (1.0 + np.tanh(0.5 * z)) - y
        g = np.empty(self.dim)
        g[:-1] = x.T @ s / batch.n
        g[-1] = s.mean()
        return loss, g

    def init_params(self, rng, scale=1.0):
        w = np.zeros(self.dim)
        w[:-1] = scale * _gen(rng).standard_normal(self.d_in) / math.sqrt(self.d_in)
        return w

    def evaluate(self, w, ds):
        z = self.logits(np.asarray(w), ds.inputs)
        acc = float(np.mean((z > 0) == (ds.targets > 0.5)))
        return {"loss": self.objective(w, ds), "accuracy": acc}

    def describe(self):
        return {"kind": self.kind, "dim": self.dim, "d_in": self.d_in}


# -- tanh MLP ---------------------------------------------------------------


class MLPModel(Model):
    """Fully connected tanh network with a single linear output unit.

    Parameters are laid out layer by layer as ``W`` (out x in, row-major)
    followed by ``b``.  ``loss`` is ``"mse"`` (half mean squared error) or
    ``"logistic"`` (binary cross-entropy on the output logit).

    ``parametrization="mean-field"`` multiplies the output layer's weighted
    sum by ``1 / width`` of the last hidden layer (and initializes those
    weights with unit variance), so curvature shrinks as the network widens.
    ``"standard"`` uses no multiplier and ``1 / sqrt(fan_in)`` variance.
    """

    kind = "mlp"

    def __init__(self, d_in: int, hidden: Sequence[int], loss: str = "mse", parametrization: str = "standard"):
        if loss not in ("mse", "logistic"):
            raise InvalidInputError(f"unknown loss {loss!r}")
        if parametrization not in ("standard", "mean-field"):
            raise InvalidInputError(f"unknown parametrization {parametrization!r}")
        if d_in < 1 or any(h < 1 for h in hidden):
            raise InvalidInputError("layer widths must be >= 1")
        self.d_in = d_in
        self.hidden = tuple(int(h) for h in hidden)
        self.loss = loss
        self.parametrization = parametrization
        self.sizes = (d_in,) + self.hidden + (1,)
        self.out_mult = 1.0 / self.sizes[-2] if parametrization == "mean-field" else 1.0
        self.shapes = [(self.sizes[l + 1], self.sizes[l]) for l in range(len(self.sizes) - 1)]
        self.offsets = []
        pos = 0
        for out, inp in self.shapes:
            self.offsets.append(pos)
            pos += out * inp + out
        self.dim = pos

    def unpack(self, w):
        layers = []
        for (out, inp), off in zip(self.shapes, self.offsets):
            W = w[off : off + out * inp].reshape(out, inp)
            b = w[off + out * inp : off + out * inp + out]
            layers.append((W, b))
        return layers

    def weight_slice(self, layer: int) -> slice:
        out, inp = self.shapes[layer]
        off = self.offsets[layer]
        return slice(off, off + out * inp)

    def forward(self, w, x):
        acts = [x]
        h = x
        layers = self.unpack(w)
        last = len(layers) - 1
        for l, (W, b) in enumerate(layers):
            if l < last:
                h = np.tanh(h @ W.T + b)
            else:
                h = self.out_mult * (h @ W.T) + b
            acts.append(h)
        return acts

    def predict(self, w, x):
        return self.forward(np.asarray(w), x)[-1][:, 0]

    def loss_and_grad(self, w, batch):
        w = self._check(w)
        batch = _check_batch(batch)
        if batch.d != self.d_in:
            raise ShapeError(f"batch has {batch.d} features, model expects {self.d_in}")
        acts = self.forward(w, batch.inputs)
        out = acts[-1][:, 0]
        y = batch.targets
        n = batch.n
        if self.loss == "mse":
            r = out - y
            loss = 0.5 * float(np.mean(r * r))
            delta = (r / n)[:, None]
        else:
            loss = float(np.mean(np.logaddexp(0.0, out) - y * out))
            delta = ((0.5 * (1.0 + np.tanh(0.5 * out)) - y) / n)[:, None]

        grad = np.empty(self.dim)
        layers = self.unpack(w)
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            out_dim, in_dim = self.shapes[l]
            off = self.offsets[l]
            mult = self.out_mult if l == len(layers) - 1 else 1.0
            grad[off : off + out_dim * in_dim] = mult * (delta.T @ acts[l]).ravel()
            grad[off + out_dim * in_dim : off + out_dim * in_dim + out_dim] = delta.sum(axis=0)
            if l > 0:
                delta = ((mult * delta) @ W) * (1.0 - acts[l] ** 2)
        return loss, grad

    def init_params(self, rng, scale=1.0):
        """Gaussian weights with std ``scale / sqrt(fan_in)`` (unit-scale output layer
        under mean-field); zero biases."""
        g = _gen(rng)
        w = np.zeros(self.dim)
        last = len(self.shapes) - 1
        for l, (out, inp) in enumerate(self.shapes):
            std = scale if (l == last and self.parametrization == "mean-field") else scale / math.sqrt(inp)
            w[self.weight_slice(l)] = std * g.standard_normal(out * inp)
        return w

    def evaluate(self, w, ds):
        res = {"loss": self.objective(w, ds)}
        if self.loss == "logistic":
            res["accuracy"] = float(np.mean((self.predict(w, ds.inputs) > 0) == (ds.targets > 0.5)))
        return res

    def describe(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "d_in": self.d_in,
            "hidden": list(self.hidden),
            "loss": self.loss,
            "parametrization": self.parametrization,
        }


# -- low-rank adapter -------------------------------------------------------


@dataclass
class LowRankAdapter(Model):
    """Frozen MLP parameters plus trainable factors ``B`` (out x r), ``A`` (r x in).

    The trainable vector concatenates ``B`` then ``A`` for each adapted layer;
    the effective weight of an adapted layer is ``W + B @ A``.
    """

    base: MLPModel
    base_params: np.ndarray
    rank: int
    layers: tuple[int, ...]
    kind: str = field(default="lowrank", init=False)

    def __post_init__(self) -> None:
        self.base_params = np.array(self.base_params, dtype=np.float64)
        self.base_params.flags.writeable = False
        self._slots = []
        pos = 0
        for l in self.layers:
            out, inp = self.base.shapes[l]
            self._slots.append((l, out, inp, pos))
            pos += self.rank * (out + inp)
        self.dim = pos

    def factors(self, w):
        for l, out, inp, pos in self._slots:
            B = w[pos : pos + out * self.rank].reshape(out, self.rank)
            A = w[pos + out * self.rank : pos + self.rank * (out + inp)].reshape(self.rank, inp)
            yield l, B, A

    def effective(self, w) -> np.ndarray:
        w = self._check(w)
        eff = self.base_params.copy()
        for l, B, A in self.factors(w):
            sl = self.base.weight_slice(l)
            eff[sl] = eff[sl] + (B @ A).ravel()
        return eff

    def loss_and_grad(self, w, batch):
        w = self._check(w)
        loss, g_full = self.base.loss_and_grad(self.effective(w), batch)
        g = np.empty(self.dim)
        for (l, B, A), (_, out, inp, pos) in zip(self.factors(w), self._slots):
            G = g_full[self.base.weight_slice(l)].reshape(out, inp)
            g[pos : pos + out * self.rank] = (G @ A.T).ravel()
            g[pos + out * self.rank : pos + self.rank * (out + inp)] = (B.T @ G).ravel()
        return loss, g

    def init_params(self, rng, scale=1.0):
        """``B = 0`` so the initial effective weights equal the base weights."""
        g = _gen(rng)
        w = np.zeros(self.dim)
        for l, out, inp, pos in self._slots:
            a = pos + out * self.rank
            w[a : a + self.rank * inp] = scale * g.standard_normal(self.rank * inp) / math.sqrt(inp)
        return w

    def evaluate(self, w, ds):
        return self.base.evaluate(self.effective(w), ds)

    def describe(self):
        return {
            "kind": self.kind,
            "dim": self.dim,
            "rank": self.rank,
            "layers": list(self.layers),
            "base": self.base.describe(),
        }


def wrap_lowrank(
    model: MLPModel,
    rank: int,
    base_params: ParamVector,
    layers: Optional[Sequence[int]] = None,
) -> LowRankAdapter:
    """Freeze ``base_params`` and expose rank-``rank`` factors as the trainable vector.

    ``layers=None`` adapts every weight matrix whose smaller side exceeds ``rank``.
    """
    if not isinstance(model, MLPModel):
        raise InvalidInputError("low-rank wrapping needs a model with dense weight matrices")
    if rank < 1:
        raise InvalidInputError(f"rank must be >= 1, got {rank}")
    model._check(base_params)
    if layers is None:
        layers = [l for l, (out, inp) in enumerate(model.shapes) if min(out, inp) > rank]
        if not layers:
            raise InvalidInputError(f"no layer has both sides larger than rank {rank}")
    for l in layers:
        if not 0 <= l < len(model.shapes):
            raise InvalidInputError(f"layer {l} out of range")
        out, inp = model.shapes[l]
        if rank >= min(out, inp):
            raise InvalidInputError(
                f"rank {rank} is not low-rank for layer {l} of shape {out}x{inp}"
            )
    return LowRankAdapter(model, base_params, rank, tuple(layers))


# -- oracles and training helpers -------------------------------------------


def finite_diff_gradient(model: Model, w, batch, h: float = 1e-5) -> ParamVector:
    """Central differences ``(F(w + h e_j) - F(w - h e_j)) / 2h`` for every coordinate."""
    if not h > 0:
        raise InvalidInputError(f"step h must be > 0, got {h}")
    w = np.array(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvalidInputError("finite differences need a nonempty 1-D parameter vector")
    g = np.empty_like(w)
    for j in range(w.size):
        orig = w[j]
        w[j] = orig + h
        fp = model.objective(w, batch)
        w[j] = orig - h
        fm = model.objective(w, batch)
        w[j] = orig
        g[j] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def pretrain(
    model: Model,
    pooled: Dataset,
    steps: int,
    lr: float,
    rng: RngStream,
    *,
    init: Optional[ParamVector] = None,
    batch_size: int = 32,
    init_scale: float = 1.0,
) -> ParamVector:
    """Plain SGD on a pooled dataset; ``steps=0`` returns the initialization unchanged."""
    if steps < 0:
        raise InvalidInputError("steps must be >= 0")
    w = np.array(init if init is not None else model.init_params(rng.fork("init"), init_scale), dtype=np.float64)
    stream = BatchStream(pooled.n, batch_size, rng.fork("batches"))
    for _ in range(steps):
        w = w - lr * model.gradient(w, pooled.take(stream.next_indices()))
    return w
