"""Accuracy columns, inter-student similarity and attention export."""
import itertools
import json
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import batches
from .exceptions import InvalidInputError
from .losses import attention_map

logger = logging.getLogger(__name__)


@dataclass
class EvalReport:
    student_acc: list
    ens_acc: float
    fusion_acc: float = None
    leader_acc: float = None
    cosine: float = None
    student_mean: float = None  # the "2Net Avg" column: arithmetic mean of student accuracies
    n_samples: int = 0

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def flat(self):
        row = {f"student_{i}_acc": a for i, a in enumerate(self.student_acc, 1)}
        row.update(student_mean=self.student_mean, ens_acc=self.ens_acc, fusion_acc=self.fusion_acc,
                   leader_acc=self.leader_acc, cosine=self.cosine)
        return row

    def summary(self):
        parts = [f"students {', '.join(f'{a:.2f}' for a in self.student_acc)}", f"ens {self.ens_acc:.2f}"]
        if self.fusion_acc is not None:
            parts.append(f"fusion {self.fusion_acc:.2f}")
        if self.leader_acc is not None:
            parts.append(f"leader {self.leader_acc:.2f}")
        if self.cosine is not None:
            parts.append(f"cos {self.cosine:.4f}")
        return " | ".join(parts)


@contextmanager
def eval_mode(*modules):
    was = [m.training for m in modules]
    for m in modules:
        m.eval()
    try:
        with torch.no_grad():
            yield
    finally:
        for m, w in zip(modules, was):
            m.train(w)


def accuracy(logits, labels):
    """Top-1 accuracy in percent."""
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise InvalidInputError("accuracy of an empty set is undefined")
    pred = torch.as_tensor(logits).argmax(dim=-1)
    return 100.0 * float((pred == labels).double().mean())


def union_accuracy(logit_list, labels):
    """Percent of samples that at least one model classifies correctly."""
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise InvalidInputError("accuracy of an empty set is undefined")
    if not logit_list:
        raise InvalidInputError("union_accuracy needs at least one model")
    correct = torch.zeros(len(labels), dtype=torch.bool)
    for z in logit_list:
        correct |= torch.as_tensor(z).argmax(dim=-1) == labels
    return 100.0 * float(correct.double().mean())


def mean_cosine(fa, fb):
    """Mean over samples of the cosine similarity of flattened per-sample tensors."""
    return float(F.cosine_similarity(fa.flatten(1).double(), fb.flatten(1).double(), dim=1, eps=1e-12).mean())


def _forward(model, x):
    if hasattr(model, "forward_with_taps"):
        return model.forward_with_taps(x)
    return model(x), None


def predict_logits(model, ds, policy=None, batch_size=500):
    with eval_mode(model):
        return torch.cat([_forward(model, x)[0] for x, _ in batches(ds, batch_size, policy=policy, train=False)])


def top1_accuracy(model, ds, policy=None, batch_size=500):
    return accuracy(predict_logits(model, ds, policy, batch_size), ds.labels)


def ens_accuracy(models, ds, policy=None, batch_size=500):
    return union_accuracy([predict_logits(m, ds, policy, batch_size) for m in models], ds.labels)


def student_cosine(models, ds, policy=None, batch_size=500, representation="features"):
    """Mean per-sample cosine similarity between students' final feature maps.

    With more than two models the pairwise values are averaged.
    ``representation="probs"`` compares softmax outputs instead.
    """
    if len(models) < 2:
        raise InvalidInputError("student_cosine needs at least two models")
    if len(models) > 2:
        logger.info("student_cosine: averaging over %d model pairs", len(models) * (len(models) - 1) // 2)
    sims = {pair: [] for pair in itertools.combinations(range(len(models)), 2)}
    weights = []
    with eval_mode(*models):
        for x, _ in batches(ds, batch_size, policy=policy, train=False):
            reps = []
            for m in models:
                z, taps = _forward(m, x)
                reps.append(torch.softmax(z, dim=-1) if representation == "probs" else taps[-1])
            weights.append(len(x))
            for i, j in sims:
                sims[(i, j)].append(mean_cosine(reps[i], reps[j]))
    w = np.asarray(weights, dtype=np.float64)
    per_pair = [float(np.dot(v, w) / w.sum()) for v in sims.values()]
    return float(np.mean(per_pair))


def evaluate_group(group, ds, policy=None, batch_size=500, fusion=True, leader=True):
    """Evaluate all students, their union, the fusion classifier and the leader in one pass."""
    n = group.n
    mods = list(group.students) + [group.leader, group.fusion]
    student_logits = [[] for _ in range(n)]
    fusion_logits, leader_logits = [], []
    cos_sums = {pair: 0.0 for pair in itertools.combinations(range(n), 2)}
    with eval_mode(*mods):
        for x, _ in batches(ds, batch_size, policy=policy, train=False):
            outs = [s.forward_with_taps(x) for s in group.students]
            for i, (z, _) in enumerate(outs):
                student_logits[i].append(z)
            for i, j in cos_sums:
                cos_sums[(i, j)] += mean_cosine(outs[i][1][-1], outs[j][1][-1]) * len(x)
            if fusion:
                fusion_logits.append(group.fusion.fuse([t[-1] for _, t in outs])[1])
            if leader:
                leader_logits.append(group.leader(x))
    labels = ds.labels
    student_logits = [torch.cat(z) for z in student_logits]
    accs = [accuracy(z, labels) for z in student_logits]
    cosine = float(np.mean([v / len(ds) for v in cos_sums.values()])) if cos_sums else None
    return EvalReport(
        student_acc=accs,
        ens_acc=union_accuracy(student_logits, labels),
        fusion_acc=accuracy(torch.cat(fusion_logits), labels) if fusion else None,
        leader_acc=accuracy(torch.cat(leader_logits), labels) if leader else None,
        cosine=cosine,
        student_mean=float(np.mean(accs)),
        n_samples=len(ds),
    )


# --- attention export ----------------------------------------------------

def minmax_normalize(a):
    """Scale each ``(H, W)`` map to [0, 1]; constant maps become all-zero."""
    flat = a.flatten(1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.zeros_like(flat))
    return out.reshape(a.shape)


def attention_maps(model, x):
    """Min-max normalized attention of every tap for a batch ``x``."""
    with eval_mode(model):
        _, taps = model.forward_with_taps(x)
        return [minmax_normalize(attention_map(t)).float() for t in taps]


def export_attention(model, x, out_path, sample_ids=None, meta=None):
    """Write normalized attention maps as little-endian float32 plus a JSON index.

    ``out_path`` gets the raw tensor data; ``out_path + ".json"`` lists one
    entry per (sample, level) with its byte offset and shape. ``meta`` is
    copied into the index as-is.
    """
    out_path = Path(out_path)
    if sample_ids is None:
        sample_ids = list(range(len(x)))
    maps = attention_maps(model, x)
    entries = []
    offset = 0
    try:
        with out_path.open("wb") as f:
            for s, sid in enumerate(sample_ids):
                for level, a in enumerate(maps, 1):
                    data = a[s].numpy().astype("<f4")
                    f.write(data.tobytes())
                    entries.append({"sample_id": int(sid), "level": level, "offset": offset, "shape": list(data.shape)})
                    offset += data.nbytes
        index = {"dtype": "float32", "byteorder": "little", "normalization": "minmax", **(meta or {}),
                 "entries": entries}
        out_path.with_name(out_path.name + ".json").write_text(json.dumps(index, indent=2))
    except OSError as exc:
        raise OSError(f"cannot write attention export to {out_path}: {exc}") from exc
    return out_path


def read_attention_export(path):
    """Returns a list of ``(sample_id, level, array)`` from an export."""
    path = Path(path)
    index = json.loads(path.with_name(path.name + ".json").read_text())
    raw = path.read_bytes()
    out = []
    for e in index["entries"]:
        count = int(np.prod(e["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["offset"]).reshape(e["shape"])
        out.append((e["sample_id"], e["level"], arr))
    return out
