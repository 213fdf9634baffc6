"""Single-step probes on tiny groups shared by the trainer and acceptance tests."""
import copy

import torch
import torch.nn.functional as F

from ffsd.config import ExperimentConfig
from ffsd.networks import build_group
from ffsd.trainer import make_optimizer, make_optimizers, train_iteration


def tiny_config(variant="ffsd_full", n=3, **distill):
    return ExperimentConfig().replace(
        data=dict(num_classes=3, image_size=8),
        model=dict(widths=[4, 8], depth=1),
        distill=dict(variant=variant, n=n, **distill),
        train=dict(batch_size=6, seed=0),
    )


def tiny_batch(cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(6, 3, cfg.data.image_size, cfg.data.image_size, generator=g)
    y = torch.randint(0, cfg.data.num_classes, (6,), generator=g)
    return x, y


def params_of(module):
    return [p.detach().clone() for p in module.parameters()]


def one_step(group, cfg, x, y):
    """Run one iteration; returns ``{component: [param delta]}``."""
    before = {k: params_of(m) for k, m in group.components().items()}
    train_iteration(group, make_optimizers(group, cfg), x, y, cfg)
    after = {k: params_of(m) for k, m in group.components().items()}
    return {k: [a - b for a, b in zip(after[k], before[k])] for k in before}


def perturbed(group, name, scale=0.5, seed=1):
    g2 = copy.deepcopy(group)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in g2.components()[name].parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))
    return g2


def delta_gap(da, db):
    """Largest absolute difference between two components' parameter updates."""
    return max(float((a - b).abs().max()) for a, b in zip(da, db))


def isolation_gaps(cfg, source, x=None, y=None):
    """Perturb ``source`` and report every other component's update change."""
    if x is None:
        x, y = tiny_batch(cfg)
    base = build_group(cfg)
    other = perturbed(base, source)
    d0 = one_step(base, cfg, x, y)
    d1 = one_step(other, cfg, x, y)
    return {k: delta_gap(d0[k], d1[k]) for k in d0 if k != source}


def degenerate_step_gaps(seed=0):
    """One step of each student under zeroed distillation weights vs. a plain CE step."""
    cfg = tiny_config(n=2, lambda_div=0.0, lambda_fea=0.0, lambda_self=0.0, alpha=0.0, kl_weight=0.0)
    cfg = cfg.replace(train=dict(seed=seed))
    x, y = tiny_batch(cfg, seed)
    group = build_group(cfg)
    standalone = [copy.deepcopy(s) for s in group.students]
    train_iteration(group, make_optimizers(group, cfg), x, y, cfg)
    gaps = []
    for s, ref in zip(group.students, standalone):
        ref.train()
        opt = make_optimizer(cfg.optim, ref.parameters())
        opt.zero_grad()
        F.cross_entropy(ref(x), y).backward()
        opt.step()
        gaps.append(max(float((a - b).abs().max()) for a, b in zip(params_of(s), params_of(ref))))
    return gaps
