"""Prior-informed test-time adaptation.

Each test slice is adapted for ``n_iter`` steps. A step forwards the slice
and its test-time-augmented copy with source/test batch-norm statistics
merged, averages the two logit maps into a posterior, draws pseudo-labels
from the posterior divided by a smoothed class prior, and takes one
optimizer step on masked cross-entropy plus a consistency term. The prior
then moves toward the pseudo-label class frequencies by an exponential
moving average.
"""
import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .augmentation import INVERTIBLE_KINDS, tta_forward, tta_inverse
from .model import NonFiniteOutputError, norm_layers, set_bn_merge

ALPHA_PROFILES = {"cardiac": 0.9, "brain": 0.5}


@dataclass
class AdaptationConfig:
    n_iter: int = 2
    alpha: float = 0.9
    lam: float = 1.0
    rho: float = 0.4
    adapt_lr: float = 0.01
    lv_classes: tuple = (1,)
    episodic: bool = True
    average_logits: bool = True
    tta_kind: str = "horizontal_flip"
    ema_source: str = "pre"
    params: str = "all"
    optimizer: str = "sgd"

    def __post_init__(self):
        if self.n_iter < 0:
            raise ValueError("n_iter must be >= 0")
        for name in ("alpha", "rho"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.adapt_lr > 0:
            raise ValueError("adapt_lr must be > 0")
        if self.tta_kind not in INVERTIBLE_KINDS:
            raise ValueError(f"tta_kind must be one of {INVERTIBLE_KINDS}")
        if self.ema_source not in ("pre", "post"):
            raise ValueError("ema_source must be 'pre' or 'post'")
        if self.params not in ("all", "norm_only"):
            raise ValueError("params must be 'all' or 'norm_only'")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.lv_classes is not None:
            self.lv_classes = tuple(int(c) for c in self.lv_classes)

    @classmethod
    def for_profile(cls, profile, **overrides):
        return cls(alpha=ALPHA_PROFILES[profile], **overrides)

    def validate_classes(self, num_classes):
        if self.lv_classes is not None and any(not 0 <= c < num_classes for c in self.lv_classes):
            raise ValueError(f"lv_classes {self.lv_classes} outside [0, {num_classes})")

    def to_dict(self):
        d = asdict(self)
        d["lv_classes"] = None if self.lv_classes is None else list(self.lv_classes)
        return d


# ---------------------------------------------------------------- equation-level ops

def _to_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def smooth_prior(p, alpha, num_classes=None):
    """``alpha / C + (1 - alpha) * p``: shrink the prior toward uniform."""
    p = np.asarray(p, dtype=np.float64)
    C = num_classes or p.shape[0]
    if p.shape != (C,):
        raise ValueError(f"prior has shape {p.shape}, expected ({C},)")
    return alpha / C + (1.0 - alpha) * p


def averaged_posterior(S, S_prime, average_logits=True):
    """Softmax over the class axis (-3) of the mean logit map, or of ``S``
    alone when ``average_logits`` is false."""
    s, torch_in = _to_tensor(S)
    sp, _ = _to_tensor(S_prime)
    if s.shape != sp.shape:
        raise ValueError(f"logit shapes differ: {tuple(s.shape)} vs {tuple(sp.shape)}")
    z = (s + sp) / 2 if average_logits else s
    P = torch.softmax(z, dim=-3)
    return P if torch_in else P.numpy()


def reweighted_pseudo_labels(P, q):
    """Per-pixel argmax of ``P_c / q_c``; ties go to the lowest class index."""
    P = P.detach().cpu().numpy() if isinstance(P, torch.Tensor) else np.asarray(P)
    q = np.asarray(q, dtype=np.float64)
    if np.any(q <= 0):
        raise ValueError("reweighting vector must be strictly positive")
    shape = [1] * P.ndim
    shape[-3] = -1
    return np.argmax(P / q.reshape(shape), axis=-3)


def lv_mask(y_hat, lv_classes):
    y = np.asarray(y_hat)
    if lv_classes is None:
        return np.ones(y.shape, dtype=bool)
    return np.isin(y, list(lv_classes))


def mce_loss(P, y_hat, lv_classes, log_input=False):
    """Cross-entropy averaged over pixels whose pseudo-label is in
    ``lv_classes`` (all pixels when None); 0 if no pixel qualifies.

    ``P`` holds probabilities, or log-probabilities with ``log_input``.
    """
    p, torch_in = _to_tensor(P)
    y = torch.as_tensor(np.asarray(y_hat), dtype=torch.int64)
    if p.shape[:-3] + p.shape[-2:] != y.shape:
        raise ValueError(f"posterior {tuple(p.shape)} does not match labels {tuple(y.shape)}")
    mask = torch.as_tensor(lv_mask(y_hat, lv_classes))
    if not bool(mask.any()):
        out = p.sum() * 0.0
    else:
        chosen = torch.gather(p, -3, y.unsqueeze(-3)).squeeze(-3)
        logp = chosen if log_input else torch.log(chosen)
        out = -logp[mask].mean()
    return out if torch_in else float(out)


def consistency_loss(S, S_prime):
    """Mean absolute difference over every class-pixel entry."""
    s, torch_in = _to_tensor(S)
    sp, _ = _to_tensor(S_prime)
    if s.shape != sp.shape:
        raise ValueError(f"logit shapes differ: {tuple(s.shape)} vs {tuple(sp.shape)}")
    out = (s - sp).abs().mean()
    return out if torch_in else float(out)


def class_frequency(y_hat, num_classes):
    y = np.asarray(y_hat).ravel()
    return np.bincount(y, minlength=num_classes)[:num_classes] / y.size


def ema_update_prior(p, y_hat, alpha, num_classes=None):
    p = np.asarray(p, dtype=np.float64)
    return alpha * p + (1.0 - alpha) * class_frequency(y_hat, num_classes or p.shape[0])


# ---------------------------------------------------------------- the engine

@dataclass
class AdaptationTrace:
    records: list = field(default_factory=list)
    fallback: bool = False
    fallback_reason: str = ""
    q_final: list = None

    def to_dict(self):
        return asdict(self)


def _input_tensor(model, x):
    param = next(model.parameters())
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))
    t = t.to(param.dtype)
    while t.ndim < 4:
        t = t.unsqueeze(0)
    return t


def _logit_pair(model, x, kind):
    S = model(x)
    S_prime = tta_inverse(model(tta_forward(x, kind)), kind)
    return S, S_prime


def adaptable_parameters(model, which="all"):
    if which == "all":
        return [p for p in model.parameters()]
    out = []
    for _, m in norm_layers(model):
        out.extend(p for p in (m.weight, m.bias) if p is not None)
    return out


def _make_optimizer(params, cfg):
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=cfg.adapt_lr)
    return torch.optim.Adam(params, lr=cfg.adapt_lr)


def pitta_losses(model, x, q, cfg):
    """One forward step: (total loss, mce, consistency, posterior, pseudo-labels).

    ``x`` is a (1, 1, H, W) tensor; the posterior and pseudo-labels are
    detached, the losses carry gradients.
    """
    S, S_prime = _logit_pair(model, x, cfg.tta_kind)
    l_cons = consistency_loss(S, S_prime)
    z = (S + S_prime) / 2 if cfg.average_logits else S
    logP = torch.log_softmax(z, dim=1)
    P = logP.detach().exp()
    y_hat = reweighted_pseudo_labels(P, q)
    l_mce = mce_loss(logP, y_hat, cfg.lv_classes, log_input=True)
    return l_mce + cfg.lam * l_cons, l_mce, l_cons, P, y_hat


def adapt_image(model, gmr_slice, cfg=None, p0=None):
    """Adapt ``model`` in place on one slice and return (labels, trace).

    ``p0`` is the class prior to start from, normally the training-set prior.
    The final labels are argmax(P / q) with P the posterior of the last
    iteration and q the reweighting vector after the last prior update. On a
    non-finite loss the parameters are restored and the unadapted
    prediction is returned, with ``trace.fallback`` set.
    """
    cfg = cfg or AdaptationConfig()
    x = _input_tensor(model, gmr_slice)
    p = np.asarray(p0, dtype=np.float64)
    C = p.shape[0]
    cfg.validate_classes(C)
    if not math.isclose(p.sum(), 1.0, abs_tol=1e-6) or np.any(p < 0):
        raise ValueError("p0 must lie on the probability simplex")
    q = smooth_prior(p, cfg.alpha, C)
    trace = AdaptationTrace()

    snapshot = copy.deepcopy(model.state_dict())
    was_training = model.training
    model.eval()
    set_bn_merge(model, cfg.rho)
    params = adaptable_parameters(model, cfg.params)
    opt = _make_optimizer(params, cfg)
    P_first = P_last = None
    try:
        if cfg.n_iter == 0:
            with torch.no_grad():
                S, S_prime = _logit_pair(model, x, cfg.tta_kind)
                P_last = averaged_posterior(S, S_prime, cfg.average_logits)
        for n in range(1, cfg.n_iter + 1):
            total, l_mce, l_cons, P, y_hat = pitta_losses(model, x, q, cfg)
            if P_first is None:
                P_first = P
            P_last = P
            if not torch.isfinite(total):
                raise NonFiniteOutputError(f"non-finite loss at iteration {n}")
            opt.zero_grad()
            total.backward()
            opt.step()
            if cfg.ema_source == "post":
                with torch.no_grad():
                    S2, S2p = _logit_pair(model, x, cfg.tta_kind)
                    freq_labels = reweighted_pseudo_labels(
                        averaged_posterior(S2, S2p, cfg.average_logits), q)
            else:
                freq_labels = y_hat
            p_next = ema_update_prior(p, freq_labels, cfg.alpha, C)
            q_next = smooth_prior(p_next, cfg.alpha, C)
            trace.records.append({
                "iteration": n,
                "loss_cons": float(l_cons.detach()),
                "loss_mce": float(l_mce.detach()),
                "loss_total": float(total.detach()),
                "mask_pixels": int(lv_mask(y_hat, cfg.lv_classes).sum()),
                "p": p.tolist(), "q": q.tolist(),
                "p_next": p_next.tolist(), "q_next": q_next.tolist(),
                "pseudo_label_frequency": class_frequency(y_hat, C).tolist(),
            })
            p, q = p_next, q_next
    except (NonFiniteOutputError, FloatingPointError) as exc:
        model.load_state_dict(snapshot)
        trace.fallback = True
        trace.fallback_reason = str(exc)
        q = smooth_prior(np.asarray(p0, dtype=np.float64), cfg.alpha, C)
        if P_first is None:
            with torch.no_grad():
                S, S_prime = _logit_pair(model, x, cfg.tta_kind)
                P_first = averaged_posterior(S, S_prime, cfg.average_logits)
        P_last = P_first
    finally:
        set_bn_merge(model, None)
        model.train(was_training)
    trace.q_final = q.tolist()
    labels = reweighted_pseudo_labels(P_last, q)[0]
    return labels, trace


class PITTAAdapter:
    """Run adaptation over a sequence of slices.

    In episodic mode every slice starts from the source weights and the
    training prior. Otherwise weights and prior carry over from one slice to
    the next.
    """

    def __init__(self, model, class_prior, config=None):
        self.source_state = copy.deepcopy(model.state_dict())
        self.model = model
        self.class_prior = np.asarray(class_prior, dtype=np.float64)
        self.config = config or AdaptationConfig()
        self.config.validate_classes(len(self.class_prior))
        self._p = self.class_prior.copy()

    def reset(self):
        self.model.load_state_dict(self.source_state)
        self._p = self.class_prior.copy()

    def adapt(self, gmr_slice):
        if self.config.episodic:
            self.reset()
        labels, trace = adapt_image(self.model, gmr_slice, self.config, self._p)
        if not self.config.episodic and trace.records and not trace.fallback:
            self._p = np.asarray(trace.records[-1]["p_next"])
        return labels, trace

    def predict(self, slices):
        out, traces = [], []
        for s in slices:
            labels, trace = self.adapt(s)
            out.append(labels)
            traces.append(trace)
        if self.config.episodic:
            self.reset()
        return np.stack(out), traces
