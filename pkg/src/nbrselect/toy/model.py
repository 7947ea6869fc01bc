"""Two-layer tanh network with a classifier head and a domain head behind a
gradient reversal layer, trained by full-batch gradient descent in numpy.

The domain head is either linear on the shared features (``domain_hidden=0``)
or has one tanh hidden layer of its own. A linear discriminator can only match
first moments of the projected features, which lets the shared layer park the
target between the source clusters instead of on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, log_softmax, softmax


class DivergenceError(RuntimeError):
    pass


@dataclass
class MlpModel:
    w1: np.ndarray  # (n_in, hidden)
    b1: np.ndarray  # (hidden,)
    wc: np.ndarray  # (hidden, n_classes)
    bc: np.ndarray  # (n_classes,)
    wd: np.ndarray  # (hidden or domain_hidden,)
    bd: np.ndarray  # (1,)
    wd1: Optional[np.ndarray] = None  # (hidden, domain_hidden)
    bd1: Optional[np.ndarray] = None  # (domain_hidden,)

    @classmethod
    def init(
        cls,
        hidden_units: int,
        rng: np.random.Generator,
        n_in: int = 2,
        n_classes: int = 2,
        domain_hidden: int = 0,
    ) -> "MlpModel":
        a1 = 1.0 / np.sqrt(n_in)
        a2 = 1.0 / np.sqrt(hidden_units)
        model = cls(
            w1=rng.uniform(-a1, a1, size=(n_in, hidden_units)),
            b1=np.zeros(hidden_units),
            wc=rng.uniform(-a2, a2, size=(hidden_units, n_classes)),
            bc=np.zeros(n_classes),
            wd=np.zeros(0),
            bd=np.zeros(1),
        )
        if domain_hidden:
            model.wd1 = rng.uniform(-a2, a2, size=(hidden_units, domain_hidden))
            model.bd1 = np.zeros(domain_hidden)
            model.wd = rng.uniform(-1 / np.sqrt(domain_hidden), 1 / np.sqrt(domain_hidden), size=domain_hidden)
        else:
            model.wd = rng.uniform(-a2, a2, size=hidden_units)
        return model

    def params(self) -> dict:
        names = ["w1", "b1", "wc", "bc", "wd", "bd"]
        if self.wd1 is not None:
            names += ["wd1", "bd1"]
        return {k: getattr(self, k) for k in names}

    def copy(self) -> "MlpModel":
        return MlpModel(**{k: v.copy() for k, v in self.params().items()})

    def hidden(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.hidden(x) @ self.wc + self.bc

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x), axis=1)

    def domain_logit(self, h: np.ndarray) -> np.ndarray:
        if self.wd1 is not None:
            h = np.tanh(h @ self.wd1 + self.bd1)
        return h @ self.wd + self.bd[0]


def grl_forward(features: np.ndarray) -> np.ndarray:
    return features


def grl_backward(upstream_gradient: np.ndarray, lambda_adv: float) -> np.ndarray:
    """Gradient reversal: identity forward, ``-lambda_adv * g`` backward."""
    return -lambda_adv * np.asarray(upstream_gradient)


@dataclass
class Batch:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray


def _cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(-log_softmax(logits, axis=1)[np.arange(len(y)), y].mean())


def _domain_labels(n_s: int, n_t: int) -> np.ndarray:
    return np.concatenate([np.ones(n_s), np.zeros(n_t)])


def loss_terms(model: MlpModel, batch: Batch, collapse_class: Optional[int] = None) -> dict:
    """Source cross-entropy, domain BCE (source = 1) and optional target-collapse CE."""
    hs = model.hidden(batch.xs)
    ht = model.hidden(batch.xt)
    out = {"source": _cross_entropy(hs @ model.wc + model.bc, batch.ys)}
    z = model.domain_logit(grl_forward(np.vstack([hs, ht])))
    d = _domain_labels(len(hs), len(ht))
    # log(1 + exp(-z)) for d=1, log(1 + exp(z)) for d=0
    out["domain"] = float(np.mean(np.logaddexp(0.0, np.where(d == 1, -z, z))))
    if collapse_class is not None:
        out["collapse"] = _cross_entropy(ht @ model.wc + model.bc, np.full(len(ht), collapse_class))
    return out


def _ce_grads(model: MlpModel, h: np.ndarray, y: np.ndarray):
    """Gradients of mean CE w.r.t. classifier head and hidden activations."""
    p = softmax(h @ model.wc + model.bc, axis=1)
    p[np.arange(len(y)), y] -= 1.0
    dlogits = p / len(y)
    return h.T @ dlogits, dlogits.sum(axis=0), dlogits @ model.wc.T


def _domain_grads(model: MlpModel, h: np.ndarray, d: np.ndarray) -> tuple[dict, np.ndarray]:
    """Gradients of mean domain BCE w.r.t. domain-head params and its input."""
    if model.wd1 is not None:
        g = np.tanh(h @ model.wd1 + model.bd1)
        dz = (expit(g @ model.wd + model.bd[0]) - d) / len(d)
        dpre = np.outer(dz, model.wd) * (1.0 - g * g)
        grads = {
            "wd": g.T @ dz,
            "bd": np.array([dz.sum()]),
            "wd1": h.T @ dpre,
            "bd1": dpre.sum(axis=0),
        }
        return grads, dpre @ model.wd1.T
    dz = (expit(h @ model.wd + model.bd[0]) - d) / len(d)
    return {"wd": h.T @ dz, "bd": np.array([dz.sum()])}, np.outer(dz, model.wd)


def _hidden_param_grads(x: np.ndarray, h: np.ndarray, dh: np.ndarray):
    dpre = dh * (1.0 - h * h)
    return x.T @ dpre, dpre.sum(axis=0)


def gradients(
    model: MlpModel, batch: Batch, lambda_adv: float, collapse_class: Optional[int] = None
) -> dict:
    """Update directions for one gradient step.

    Adversarial mode (``collapse_class`` is None): the domain head descends
    ``lambda_adv * L_domain`` while the shared layer receives the domain
    gradient through the reversal layer, i.e. it descends
    ``L_source - lambda_adv * L_domain``.

    Collapse mode: plain gradient of ``L_source + lambda_adv * L_collapse``
    where the collapse term pushes every target sample to ``collapse_class``.
    """
    hs = model.hidden(batch.xs)
    ht = model.hidden(batch.xt)
    n_s = len(hs)
    g_wc, g_bc, dhs = _ce_grads(model, hs, batch.ys)
    dht = np.zeros_like(ht)
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}

    if collapse_class is None:
        if lambda_adv != 0.0:
            dom, dh = _domain_grads(model, np.vstack([hs, ht]), _domain_labels(n_s, len(ht)))
            for k, g in dom.items():
                grads[k] = lambda_adv * g
            dh = grl_backward(dh, lambda_adv)
            dhs = dhs + dh[:n_s]
            dht = dht + dh[n_s:]
    else:
        t_wc, t_bc, t_dh = _ce_grads(model, ht, np.full(len(ht), collapse_class))
        g_wc = g_wc + lambda_adv * t_wc
        g_bc = g_bc + lambda_adv * t_bc
        dht = dht + lambda_adv * t_dh

    s_w1, s_b1 = _hidden_param_grads(batch.xs, hs, dhs)
    t_w1, t_b1 = _hidden_param_grads(batch.xt, ht, dht)
    grads.update(w1=s_w1 + t_w1, b1=s_b1 + t_b1, wc=g_wc, bc=g_bc)
    return grads


@dataclass
class TrainingLog:
    source_loss: list = field(default_factory=list)
    domain_loss: list = field(default_factory=list)


def fit(
    model: MlpModel,
    batch: Batch,
    epochs: int,
    learning_rate: float,
    lambda_adv: float,
    collapse_class: Optional[int] = None,
) -> TrainingLog:
    """Full-batch gradient descent, in place.

    Losses are logged before every step and once after the last, so the log
    has ``epochs + 1`` entries and entry 0 is the untrained model.
    """
    log = TrainingLog()
    for epoch in range(epochs + 1):
        terms = loss_terms(model, batch)
        if not (np.isfinite(terms["source"]) and np.isfinite(terms["domain"])):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}; try a smaller learning_rate (now {learning_rate})"
            )
        log.source_loss.append(terms["source"])
        log.domain_loss.append(terms["domain"])
        if epoch == epochs:
            break
        for name, g in gradients(model, batch, lambda_adv, collapse_class).items():
            getattr(model, name)[...] -= learning_rate * g
        if not all(np.isfinite(p).all() for p in model.params().values()):
            raise DivergenceError(
                f"non-finite parameters after epoch {epoch}; try a smaller learning_rate (now {learning_rate})"
            )
    return log
