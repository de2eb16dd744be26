"""Finite-difference check of the octuplet loss through the toy backbone."""
import numpy as np
import torch

from octuplet.coremath import pairwise_distances
from octuplet.degrade import degrade_pixels
from octuplet.octuplet import TERMS
from octuplet.torch_loss import octuplet_loss_torch
from octuplet.training import toy_backbone

from oracles import relative_mismatch

STEP = 1e-5
RTOL = 1e-3
ATOL = 1e-8
KINK_GAP = 1e-3


def _inputs(rng, B):
    hr = rng.random((B, 112, 112, 3)).astype(np.float64)
    res = rng.choice([7, 14, 28], size=B)
    lr = np.stack([degrade_pixels(x, r) for x, r in zip(hr, res)]).astype(np.float64)
    labels = np.repeat(np.arange(B // 2), 2)
    return torch.tensor(np.concatenate([hr, lr])), labels


def _near_kink(emb, labels, margin):
    """True when a hinge or a hardest-negative choice is within KINK_GAP of switching."""
    B = len(labels)
    side = {"h": emb[:B], "l": emb[B:]}
    for t in TERMS:
        A, P = side[t[0]], side[t[1]]
        D = pairwise_distances(A, P, "euclidean")
        for i in range(B):
            p = [j for j in range(B) if labels[j] == labels[i] and j != i][0]
            neg = np.sort(D[i, labels != labels[i]])
            if len(neg) > 1 and neg[1] - neg[0] < KINK_GAP:
                return True
            if abs(D[i, p] - neg[0] + margin) < KINK_GAP:
                return True
    return False


class _KinkProbe:
    """Records the sign pattern of every ReLU input and the loss's active set."""

    def __init__(self, model):
        self.masks = []
        self.handles = [m.register_forward_hook(self._hook)
                        for m in model.modules() if isinstance(m, torch.nn.ReLU)]

    def _hook(self, module, inputs, output):
        self.masks.append((inputs[0] > 0).clone())

    def take(self):
        out, self.masks = self.masks, []
        return out

    def remove(self):
        for h in self.handles:
            h.remove()


def _loss_pattern(emb, labels, margin):
    B = len(labels)
    side = {"h": emb[:B], "l": emb[B:]}
    pattern = []
    for t in TERMS:
        A, P = side[t[0]], side[t[1]]
        D = pairwise_distances(A, P, "euclidean")
        for i in range(B):
            p = [j for j in range(B) if labels[j] == labels[i] and j != i][0]
            cand = np.flatnonzero(labels != labels[i])
            n = int(cand[np.argmin(D[i, cand])])
            pattern.append((n, D[i, p] - D[i, n] + margin > 0))
    return pattern


def backbone_gradcheck(seed=0, max_params=None, B=4, margin=1.0, width=2, dim=4):
    """Compare autograd against central differences on backbone parameters.

    Returns ``(worst, n_checked, n_kinks)`` where ``worst`` is the largest
    ``|a - n| / (RTOL * max(|a|, |n|) + ATOL)`` over kink-free parameters;
    the check passes when it is at most 1. A parameter is a kink
    configuration when its +-STEP perturbation flips any ReLU input sign,
    any hinge's active state or any mined negative; those are counted in
    ``n_kinks`` and left out of ``worst``.
    """
    for attempt in range(50):
        rng = np.random.default_rng([seed, attempt])
        model = toy_backbone(dim, seed=seed * 1000 + attempt, width=width).double()
        model.train()
        x, labels = _inputs(rng, B)
        with torch.no_grad():
            emb = model(x).numpy()
        if not _near_kink(emb, labels, margin):
            break
    else:
        raise RuntimeError("no kink-free configuration found")

    params = [p for p in model.parameters()]
    probe = _KinkProbe(model)

    def loss():
        e = model(x)
        total, _ = octuplet_loss_torch(e[:B], e[B:], labels, "euclidean", margin, False)
        pattern = (probe.take(), _loss_pattern(e.detach().numpy(), labels, margin))
        return total, pattern

    model.zero_grad()
    loss()[0].backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in params]).numpy().copy()

    flat_index = [(k, j) for k, p in enumerate(params) for j in range(p.numel())]
    if max_params is not None and max_params < len(flat_index):
        pick = np.sort(rng.choice(len(flat_index), size=max_params, replace=False))
        flat_index = [flat_index[i] for i in pick]
        offsets = np.cumsum([0] + [p.numel() for p in params])
        analytic = np.array([analytic[offsets[k] + j] for k, j in flat_index])

    numeric = np.empty(len(flat_index))
    smooth = np.ones(len(flat_index), dtype=bool)
    with torch.no_grad():
        for n, (k, j) in enumerate(flat_index):
            view = params[k].view(-1)
            old = view[j].item()
            view[j] = old + STEP
            up, (relu_up, loss_up) = loss()
            view[j] = old - STEP
            down, (relu_down, loss_down) = loss()
            view[j] = old
            numeric[n] = (up.item() - down.item()) / (2 * STEP)
            smooth[n] = loss_up == loss_down and all(
                torch.equal(a, b) for a, b in zip(relu_up, relu_down))
    probe.remove()
    worst = relative_mismatch(analytic[smooth], numeric[smooth], RTOL, ATOL)
    return worst, len(flat_index), int((~smooth).sum())
