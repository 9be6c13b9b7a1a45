"""Central finite-difference check of the training and adaptation losses."""
import numpy as np
import torch
import torch.nn.functional as F

from gmdg import model, pitta


def tiny_double_model(num_classes=3, seed=0):
    arch = model.architecture_for("tiny", num_classes, base_channels=4, channel_mult=(1, 2),
                                  input_size=(8, 8))
    return model.build_model(arch, seed=seed, dtype=torch.float64)


def ce_objective(net, x, y):
    net.train()
    return lambda: F.cross_entropy(net(x), y)


def total_objective(net, x, p0, cfg):
    """Adaptation loss with the pseudo-labels frozen at the current weights."""
    net.eval()
    model.set_bn_merge(net, cfg.rho)
    q = pitta.smooth_prior(p0, cfg.alpha)
    _, _, _, _, y_hat = pitta.pitta_losses(net, x, q, cfg)

    def f():
        S, S_prime = pitta._logit_pair(net, x, cfg.tta_kind)
        logP = torch.log_softmax((S + S_prime) / 2, dim=1)
        return (pitta.mce_loss(logP, y_hat, cfg.lv_classes, log_input=True)
                + cfg.lam * pitta.consistency_loss(S, S_prime))

    return f, y_hat


def finite_difference_errors(net, objective, n_coords=25, eps=1e-6, seed=0):
    """Relative errors between autograd and central differences at random
    coordinates whose analytic gradient is not negligible."""
    params = [p for p in net.parameters() if p.requires_grad]
    net.zero_grad()
    objective().backward()
    grads = [p.grad.detach().clone() for p in params]
    candidates = [(i, j) for i, g in enumerate(grads)
                  for j in np.flatnonzero(np.abs(g.numpy().ravel()) > 1e-7)]
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)
    errors = []
    with torch.no_grad():
        for k in picks:
            i, j = candidates[k]
            flat = params[i].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            up = objective().item()
            flat[j] = orig - eps
            down = objective().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[i].view(-1)[j].item()
            errors.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return np.array(errors)
