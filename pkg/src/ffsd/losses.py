"""Distillation losses and attention transforms.

Every function here is a pure function of tensors. Losses return a
:class:`LossValue` whose ``value`` is a differentiable scalar and whose
``components``/``weights`` record the weighted sub-terms for logging.

Conventions shared by all functions:

* logits are ``(B, K)``, labels ``(B,)`` int64;
* feature maps are ``(B, C, H, W)`` and attention maps ``(B, H, W)``;
* norms are taken per sample over the flattened tensor, then batch-averaged;
* reported losses are batch means.
"""
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .exceptions import ConfigError, InvalidInputError

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12
NORM_EPS = 1e-8


@dataclass
class LossValue:
    value: torch.Tensor
    components: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def item(self):
        return float(self.value.detach())

    def weighted_sum(self):
        total = 0.0
        for name, comp in self.components.items():
            total = total + self.weights.get(name, 1.0) * float(comp.detach())
        return total

    def as_dict(self, prefix=""):
        out = {f"{prefix}total" if prefix else "total": self.item()}
        for name, comp in self.components.items():
            out[f"{prefix}{name}"] = float(comp.detach())
        return out


def _as_tensor(x):
    if isinstance(x, LossValue):
        return x.value
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.get_default_dtype())


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise InvalidInputError(f"{name} contains non-finite entries")


def _check_temperature(T):
    if not T >= 1:
        raise ConfigError(f"temperature must be >= 1, got {T}")


def _check_weight(w, name):
    if w < 0:
        raise ConfigError(f"{name} must be non-negative, got {w}")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise InvalidInputError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def softened_prediction(z, T=1.0):
    """Temperature softmax ``exp(z/T) / sum exp(z/T)`` along the last axis."""
    _check_temperature(T)
    z = _as_tensor(z)
    _check_finite(z, "logits")
    # torch.softmax subtracts the row max before exponentiating
    return torch.softmax(z / T, dim=-1)


def _kl_rows(target, log_pred):
    # xlogy gives 0 for target == 0 entries
    return (torch.xlogy(target, target) - target * log_pred).sum(dim=-1)


def kl_divergence(target, pred):
    """``KL(target || pred)`` between probability rows, batch-averaged."""
    target = _as_tensor(target)
    pred = _as_tensor(pred)
    _same_shape(target, pred, "kl_divergence")
    kl = _kl_rows(target, torch.log(pred.clamp_min(LOG_EPS))).mean()
    return LossValue(kl, {"kl": kl}, {"kl": 1.0})


def _soft_kl(target_logits, logits, T):
    """KL between softened predictions, computed from logits in log space."""
    target = torch.softmax(target_logits / T, dim=-1)
    return _kl_rows(target, F.log_softmax(logits / T, dim=-1)).mean()


def base_loss(y, z_i, peers, T=2.0, kl_weight=1.0):
    """Mutual-learning objective: CE plus ``T^2`` times the summed peer KL.

    ``peers`` are the other common students' logits; they act as fixed
    targets, so pass detached tensors.
    """
    _check_temperature(T)
    _check_finite(z_i, "logits")
    ce = F.cross_entropy(z_i, y)
    if len(peers) == 0:
        logger.warning("base_loss called with no peers; KL term is zero")
        kl = torch.zeros((), dtype=z_i.dtype, device=z_i.device)
    else:
        kl = sum(_soft_kl(z_j, z_i, T) for z_j in peers)
    w = kl_weight * T * T
    return LossValue(ce + w * kl, {"ce": ce, "kl": kl}, {"ce": 1.0, "kl": w})


def ensemble_logits(zs):
    if len(zs) == 0:
        raise InvalidInputError("ensemble_logits needs at least one logit tensor")
    shapes = {tuple(z.shape) for z in zs}
    if len(shapes) != 1:
        raise InvalidInputError(f"ensemble_logits: inconsistent shapes {sorted(shapes)}")
    return torch.stack(list(zs)).mean(dim=0)


def fusion_loss(y, z_f, z_e, T=2.0, kl_weight=1.0):
    """Fusion-classifier objective: CE on ``z_f`` plus ``T^2 KL(p_e || p_f)``."""
    _check_temperature(T)
    _same_shape(z_f, z_e, "fusion_loss")
    ce = F.cross_entropy(z_f, y)
    kl = _soft_kl(z_e, z_f, T)
    w = kl_weight * T * T
    return LossValue(ce + w * kl, {"ce": ce, "kl": kl}, {"ce": 1.0, "kl": w})


def _normalized_l2(a, b):
    a = a.flatten(1)
    b = b.flatten(1)
    a = a / a.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    b = b / b.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
    diff = a - b
    # sqrt has an unbounded derivative at 0; route through a safe branch
    sq = (diff * diff).sum(dim=1)
    zero = sq == 0
    dist = torch.sqrt(torch.where(zero, torch.ones_like(sq), sq))
    return torch.where(zero, torch.zeros_like(sq), dist).mean()


def normalized_l2_match(a, b):
    """Distance between per-sample L2-normalized tensors, in ``[0, 2]``."""
    _same_shape(a, b, "normalized_l2_match")
    d = _normalized_l2(a, b)
    return LossValue(d, {"match": d}, {"match": 1.0})


def _sum_matches(xs, ys, what):
    if len(xs) != len(ys):
        raise InvalidInputError(f"{what}: {len(xs)} levels vs {len(ys)} targets")
    terms = []
    for m, (x, t) in enumerate(zip(xs, ys)):
        _same_shape(x, t, f"{what} level {m + 1}")
        terms.append(_normalized_l2(x, t))
    if not terms:
        return torch.zeros(())
    return torch.stack(terms).sum()


def leader_feature_loss(F0L, Ff, decoded, Fe):
    """Leader last-layer loss: match fused map, and match concatenation via the aligner."""
    if F0L.shape != Ff.shape:
        raise InvalidInputError(
            f"leader_feature_loss: leader feature {tuple(F0L.shape)} vs fused feature {tuple(Ff.shape)}")
    if decoded.shape != Fe.shape:
        raise InvalidInputError(
            f"leader_feature_loss: aligned feature {tuple(decoded.shape)} vs concatenated feature {tuple(Fe.shape)}")
    fused = _normalized_l2(F0L, Ff)
    concat = _normalized_l2(decoded, Fe)
    return LossValue(fused + concat, {"fused": fused, "concat": concat}, {"fused": 1.0, "concat": 1.0})


def naive_diversity_loss(features):
    """Negative pairwise L2 distance between students' feature maps.

    ``features[i][l]`` is student ``i``'s map at level ``l``. The sum runs over
    ordered pairs ``i != j``, so each unordered pair counts twice.
    """
    n = len(features)
    if n == 0:
        raise InvalidInputError("naive_diversity_loss needs at least one student")
    L = len(features[0])
    for i, feats in enumerate(features):
        if len(feats) != L:
            raise InvalidInputError(f"student {i} has {len(feats)} levels, expected {L}")
        for l in range(L):
            _same_shape(feats[l], features[0][l], f"naive_diversity_loss student {i} level {l}")
    total = torch.zeros((), dtype=features[0][0].dtype, device=features[0][0].device)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            for l in range(L):
                diff = (features[i][l] - features[j][l]).flatten(1)
                sq = (diff * diff).sum(dim=1)
                zero = sq == 0
                dist = torch.where(zero, torch.zeros_like(sq), torch.sqrt(torch.where(zero, torch.ones_like(sq), sq)))
                total = total + dist.mean()
    div = -total / L
    return LossValue(div, {"div": div}, {"div": 1.0})


def attention_map(F_):
    """Channel-wise sum of squared activations: ``(B, C, H, W) -> (B, H, W)``."""
    if F_.dim() != 4:
        raise InvalidInputError(f"attention_map expects (B, C, H, W), got {tuple(F_.shape)}")
    return (F_ * F_).sum(dim=1)


def diversify_attention(A):
    """Shift attention toward the slightly weaker task-relevant areas.

    Per sample, with ``P = ||A||_2`` and ``t`` the ``ceil(H*W/3)``-th smallest
    entry: entries below ``t`` are kept, entries at or above ``t`` become
    ``P - A``.
    """
    if A.dim() != 3:
        raise InvalidInputError(f"diversify_attention expects (B, H, W), got {tuple(A.shape)}")
    B, H, W = A.shape
    flat = A.reshape(B, H * W)
    k = math.ceil(H * W / 3)
    t = flat.kthvalue(k, dim=1, keepdim=True).values
    P = flat.norm(dim=1, keepdim=True)
    if (P == 0).any():
        logger.debug("diversify_attention: %d all-zero map(s) passed through", int((P == 0).sum()))
    out = torch.where(flat >= t, P - flat, flat)
    return out.reshape(B, H, W)


def attention_to_feature(F_, A, A_bar):
    """Rescale each pixel's channel vector so the attention of the result is ``A_bar``."""
    if F_.dim() != 4:
        raise InvalidInputError(f"attention_to_feature expects (B, C, H, W), got {tuple(F_.shape)}")
    expected = (F_.shape[0],) + tuple(F_.shape[2:])
    if tuple(A.shape) != expected or tuple(A_bar.shape) != expected:
        raise InvalidInputError(
            f"attention_to_feature: attention shapes {tuple(A.shape)}, {tuple(A_bar.shape)} "
            f"do not match feature {tuple(F_.shape)}")
    scale = torch.sqrt(A_bar.clamp_min(0) / (A + NORM_EPS))
    return F_ * scale.unsqueeze(1)


def chain_diversity_loss(A_i, A_bar_prev):
    """Match each level's attention to the previous student's diversified attention."""
    d = _sum_matches(A_i, A_bar_prev, "chain_diversity_loss")
    return LossValue(d, {"div": d}, {"div": 1.0})


def sd_module_loss(A_primed, A_true, F_primed, F_true, alpha=1.0):
    _check_weight(alpha, "alpha")
    if not len(A_primed) == len(A_true) == len(F_primed) == len(F_true):
        raise InvalidInputError(
            f"sd_module_loss: list lengths {len(A_primed)}, {len(A_true)}, {len(F_primed)}, {len(F_true)}")
    att = _sum_matches(A_primed, A_true, "sd_module_loss attention")
    feat = _sum_matches(F_primed, F_true, "sd_module_loss feature")
    return LossValue(att + alpha * feat, {"attention": att, "feature": feat}, {"attention": 1.0, "feature": alpha})


def sd_chain_diversity_loss(A_i, A_bar_primed_prev, A_bar_prev_M):
    """Diversity loss with shallow targets produced by the previous student's SD module.

    ``A_i`` has all M levels; ``A_bar_primed_prev`` covers levels 1..M-1 and
    ``A_bar_prev_M`` is the diversified last-level attention.
    """
    if len(A_i) != len(A_bar_primed_prev) + 1:
        raise InvalidInputError(
            f"sd_chain_diversity_loss: {len(A_i)} levels need {len(A_i) - 1} shallow targets, "
            f"got {len(A_bar_primed_prev)}")
    shallow = _sum_matches(A_i[:-1], A_bar_primed_prev, "sd_chain_diversity_loss")
    _same_shape(A_i[-1], A_bar_prev_M, "sd_chain_diversity_loss last level")
    last = _normalized_l2(A_i[-1], A_bar_prev_M)
    return LossValue(shallow + last, {"shallow": shallow, "last": last}, {"shallow": 1.0, "last": 1.0})


def common_student_loss(base, div, lambda_div):
    _check_weight(lambda_div, "lambda_div")
    b = _as_tensor(base)
    d = _as_tensor(div)
    return LossValue(b + lambda_div * d, {"base": b, "div": d}, {"base": 1.0, "div": lambda_div})


def leader_self_loss(F0, F_star):
    d = _sum_matches(F0, F_star, "leader_self_loss")
    return LossValue(d, {"self": d}, {"self": 1.0})


def leader_loss(ce, kl, feat, self_loss, T=2.0, lambda_fea=10.0, lambda_self=1e3, kl_weight=1.0):
    """Leader objective ``ce + T^2 kl + lambda_fea feat + lambda_self self``."""
    _check_temperature(T)
    _check_weight(lambda_fea, "lambda_fea")
    _check_weight(lambda_self, "lambda_self")
    parts = {"ce": _as_tensor(ce), "kl": _as_tensor(kl), "feat": _as_tensor(feat), "self": _as_tensor(self_loss)}
    weights = {"ce": 1.0, "kl": kl_weight * T * T, "feat": lambda_fea, "self": lambda_self}
    total = sum(weights[k] * v for k, v in parts.items())
    return LossValue(total, parts, weights)
