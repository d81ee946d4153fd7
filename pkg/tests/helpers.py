"""Shared fixtures for the unit and acceptance suites."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from longissl import objectives
from longissl.data import index_to_permutation
from longissl.nets import EncoderConfig, SSLModel, build_downstream

TINY_SHAPE = (8, 8, 8)


def tiny_encoder_config(**kw) -> EncoderConfig:
    return EncoderConfig(**{"architecture": "resnet10", "feature_dim": 8, "width_multiplier": 1 / 32, "stem": "desk", **kw})


def tiny_ssl_model(seed: int = 0) -> SSLModel:
    torch.manual_seed(seed)
    return SSLModel(tiny_encoder_config(), hidden=(8, 8), projection_dim=4).double().train()


def pretext_losses(seed: int = 0):
    """name -> (model, closure returning the scalar loss) on fixed float64 inputs."""
    g = torch.Generator().manual_seed(seed)
    rnd = lambda *s: torch.randn(*s, generator=g, dtype=torch.float64)

    def tov():
        model = tiny_ssl_model(seed)
        x, y = rnd(3, 4, *TINY_SHAPE), torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
        return model, lambda: objectives.bce_loss(y, model.tov_forward(model.encode_sequences(x)))

    def top():
        model = tiny_ssl_model(seed)
        x, t = rnd(3, 3, *TINY_SHAPE), torch.tensor([0, 4, 5])
        return model, lambda: objectives.perm_ce_loss(model.top_forward(model.encode_sequences(x), 3), t)

    def ntxent():
        model = tiny_ssl_model(seed)
        xi, xj = rnd(3, *TINY_SHAPE), rnd(3, *TINY_SHAPE)
        return model, lambda: objectives.ntxent_loss(model.project(model.encode(xi)), model.project(model.encode(xj)), 0.5)

    def topc():
        model = tiny_ssl_model(seed)
        n, b = 3, 3
        x = rnd(2 * b, n, *TINY_SHAPE)
        classes = [1, 3, 5]
        order = torch.tensor([index_to_permutation(n, c) for c in classes])

        def loss():
            feats = model.encode_sequences(x)
            hi, hj = feats[:b], feats[b:]
            con = objectives.ntxent_loss(model.project(hi[:, 0]), model.project(hj[:, 0]), 0.5)
            permuted = torch.gather(hi, 1, order[:, :, None].expand(-1, -1, hi.shape[2]))
            return objectives.topc_loss(con, objectives.perm_ce_loss(model.top_forward(permuted, n), torch.tensor(classes)))

        return model, loss

    def downstream():
        src = tiny_ssl_model(seed)
        model = build_downstream(src, "TOP", 2, 3, src.encoder.config, (8, 8), TINY_SHAPE).double().train()
        x, gaps, y = rnd(4, 2, *TINY_SHAPE), torch.tensor([[1.2], [2.0], [1.0], [2.5]], dtype=torch.float64), torch.tensor([0, 1, 2, 1])
        return model, lambda: F.cross_entropy(model(x, gaps), y)

    return {"tov": tov, "top": top, "ntxent": ntxent, "topc": topc, "downstream": downstream}


def finite_difference_pass_rate(model, loss_fn, per_tensor: int = 20, h: float = 1e-6, tol: float = 1e-3, seed: int = 0):
    """Fraction of sampled parameter entries whose autograd gradient matches central differences.

    Every parameter tensor contributes up to ``per_tensor`` randomly chosen entries.
    Returns (pass_rate, num_checked, tensors_with_nonzero_grad).
    """
    rng = np.random.default_rng(seed)
    model.zero_grad()
    loss_fn().backward()
    checked = passed = 0
    nonzero = 0
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is None:
                continue
            nonzero += bool(p.grad.abs().max() > 0)
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                num, ana = (up - down) / (2 * h), grad[i].item()
                err = abs(num - ana)
                checked += 1
                passed += err <= tol * max(abs(num), abs(ana)) or err < 1e-9
    return passed / max(checked, 1), checked, nonzero


def nt_xent_double_loop(zi, zj, tau: float) -> float:
    """Reference NT-Xent with explicit loops (all 2B-1 denominator terms)."""
    allz = [np.asarray(v, dtype=np.float64) for v in list(zi) + list(zj)]
    b = len(zi)
    cos = lambda u, v: float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    total = 0.0
    for a, p in [(k, k + b) for k in range(b)] + [(k + b, k) for k in range(b)]:
        den = sum(math.exp(cos(allz[a], allz[k]) / tau) for k in range(2 * b) if k != a)
        total += -math.log(math.exp(cos(allz[a], allz[p]) / tau) / den)
    return total / b


# criterion -> (passed, detail); printed by the terminal-summary hook in conftest
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str = "") -> bool:
    ACCEPTANCE[criterion] = (bool(passed), detail)
    return bool(passed)
