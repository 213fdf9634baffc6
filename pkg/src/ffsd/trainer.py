"""Training loop: one forward pass per mini-batch, then per-component updates.

Update order within an iteration: common student 1 (mutual learning only),
common students 2..n (mutual learning plus chain diversity), leader,
fusion module, then every self-distillation module. Any tensor that crosses
a component boundary is detached, so each update only moves the parameters
of its own component; the channel aligner is optimized with the leader.
"""
import csv
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from . import losses as L
from .config import ExperimentConfig, config_diff, config_hash, derive_seed, from_dict
from .data import AugmentationPolicy, batches, load_datasets
from .evaluation import EvalReport, evaluate_group
from .exceptions import ConfigError, FormatError, InvalidInputError, TrainingAborted
from .networks import build_group

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VariantFlags:
    kl: bool  # peer mimicry in the common-student loss
    diversity: str  # "", "sd_chain", "chain" or "l2"
    leader: bool  # leader + fusion module + aligner are trained
    sd: bool  # self-distillation modules trained and used


VARIANTS = {
    "independent": VariantFlags(kl=False, diversity="", leader=False, sd=False),
    "dml": VariantFlags(kl=True, diversity="", leader=False, sd=False),
    "ffsd_full": VariantFlags(kl=True, diversity="sd_chain", leader=True, sd=True),
    "ffsd_no_sd": VariantFlags(kl=True, diversity="chain", leader=True, sd=False),
    "l2_div": VariantFlags(kl=True, diversity="l2", leader=True, sd=False),
    "l2_div_sd": VariantFlags(kl=True, diversity="l2", leader=True, sd=True),
}


# --- optimizers and schedules --------------------------------------------

def make_optimizer(spec, params):
    params = list(params)
    if spec.family == "sgd":
        return torch.optim.SGD(params, lr=spec.lr, momentum=spec.momentum, weight_decay=spec.weight_decay,
                               nesterov=spec.nesterov and spec.momentum > 0)
    return torch.optim.Adam(params, lr=spec.lr, weight_decay=spec.weight_decay)


def lr_at(spec, epoch):
    """Learning rate for a 0-based epoch: optional linear warmup, then milestone decay."""
    if epoch < spec.warmup_epochs:
        return spec.warmup_start_lr + (spec.lr - spec.warmup_start_lr) * (epoch + 1) / spec.warmup_epochs
    k = sum(1 for m in spec.milestones if epoch >= m)
    return spec.lr * spec.gamma ** k


def make_optimizers(group, config):
    flags = VARIANTS[config.distill.variant]
    opts = {}
    for i, s in enumerate(group.students, 1):
        opts[f"student_{i}"] = make_optimizer(config.optim, s.parameters())
    if flags.leader:
        opts["leader"] = make_optimizer(config.optim, list(group.leader.parameters()) + list(group.aligner.parameters()))
        opts["fusion"] = make_optimizer(config.optim, group.fusion.parameters())
    if flags.sd:
        for i, m in enumerate(group.sd):
            opts[f"sd_{i}"] = make_optimizer(config.sd_optim, m.parameters())
    return opts


def set_epoch_lr(optimizers, config, epoch):
    for name, opt in optimizers.items():
        spec = config.sd_optim if name.startswith("sd_") else config.optim
        for g in opt.param_groups:
            g["lr"] = lr_at(spec, epoch)


# --- one iteration -------------------------------------------------------

@contextmanager
def preserved_buffers(module):
    """Run a module forward without letting it change its BN running statistics."""
    saved = {k: v.clone() for k, v in module.named_buffers()}
    try:
        yield
    finally:
        with torch.no_grad():
            for k, v in module.named_buffers():
                v.copy_(saved[k])


def diversity_targets(sd_prev, taps_prev):
    """Detached diversity targets built from the previous student's taps.

    Returns ``(A_bar_M, A_bar_primed)``: the diversified last-level attention
    and the attentions of the previous student's SD-module outputs when fed
    the feature map rescaled to carry that diversified attention.
    """
    with torch.no_grad():
        F_M = taps_prev[-1].detach()
        A_M = L.attention_map(F_M)
        A_bar = L.diversify_attention(A_M)
        F_bar = L.attention_to_feature(F_M, A_M, A_bar)
        with preserved_buffers(sd_prev):
            shallow = sd_prev(F_bar)
        return A_bar, [L.attention_map(f) for f in shallow]


def _zero():
    return torch.zeros(())


def _with_info(lv, sub, prefix):
    """Attach ``sub``'s terms for logging with weight 0 so the weighted sum is unchanged."""
    for k, v in sub.components.items():
        lv.components[prefix + k] = v
        lv.weights[prefix + k] = 0.0
    return lv


def compute_losses(group, x, y, config):
    """Forward every component on one batch and build each component's objective.

    Returns an ordered ``{component: LossValue}`` in update order.
    """
    d = config.distill
    flags = VARIANTS[d.variant]
    T = d.temperature
    group.train()

    outs = [s.forward_with_taps(x) for s in group.students]
    logits = [o[0] for o in outs]
    taps = [o[1] for o in outs]
    z_e = L.ensemble_logits([z.detach() for z in logits])

    result = {}
    for i in range(group.n):
        name = f"student_{i + 1}"
        if not flags.kl:
            ce = F.cross_entropy(logits[i], y)
            result[name] = L.LossValue(ce, {"ce": ce}, {"ce": 1.0})
            continue
        peers = [logits[j].detach() for j in range(group.n) if j != i]
        base = L.base_loss(y, logits[i], peers, T, d.kl_weight)
        if flags.diversity == "l2":
            feats = [[t if j == i else t.detach() for t in taps[j]] for j in range(group.n)]
            div = L.naive_diversity_loss(feats)
        elif flags.diversity and i > 0:
            A_i = [L.attention_map(t) for t in taps[i]]
            if flags.diversity == "sd_chain":
                A_bar_M, A_bar_shallow = diversity_targets(group.sd[i], taps[i - 1])
                div = L.sd_chain_diversity_loss(A_i, A_bar_shallow, A_bar_M)
            else:
                targets = [L.diversify_attention(L.attention_map(t.detach())) for t in taps[i - 1]]
                div = L.chain_diversity_loss(A_i, targets)
        else:
            # first student, or no diversity: mutual learning only
            result[name] = _with_info(L.common_student_loss(base, _zero(), 0.0), base, "base_")
            continue
        result[name] = _with_info(L.common_student_loss(base, div, d.lambda_div), base, "base_")

    if flags.leader:
        z0, taps0 = group.leader.forward_with_taps(x)
        Ff, z_f, Fe = group.fusion.fuse([t[-1].detach() for t in taps])
        target = z_e if d.leader_kl_target == "ensemble" else z_f.detach()
        ce = F.cross_entropy(z0, y)
        kl = L._soft_kl(target, z0, T)
        feat = L.leader_feature_loss(taps0[-1], Ff.detach(), group.aligner(taps0[-1]), Fe.detach())
        if flags.sd:
            with torch.no_grad(), preserved_buffers(group.sd[0]):
                F_star = group.sd[0](Ff.detach())
            self_loss = L.leader_self_loss(taps0[:-1], F_star)
        else:
            self_loss = _zero()
        lv = L.leader_loss(ce, kl, feat, self_loss, T, d.lambda_fea, d.lambda_self, d.kl_weight)
        result["leader"] = _with_info(lv, feat, "feat_")
        result["fusion"] = L.fusion_loss(y, z_f, z_e, T, d.kl_weight)
    else:
        taps0 = None

    if flags.sd:
        all_taps = [taps0] + taps
        for i, student_taps in enumerate(all_taps):
            target_F = [t.detach() for t in student_taps[:-1]]
            out = group.sd[i](student_taps[-1].detach())
            result[f"sd_{i}"] = L.sd_module_loss([L.attention_map(f) for f in out],
                                                 [L.attention_map(f) for f in target_F], out, target_F, d.alpha)
    return result


def _component_params(group, name):
    if name == "leader":
        return list(group.leader.parameters()) + list(group.aligner.parameters())
    if name == "fusion":
        return list(group.fusion.parameters())
    kind, idx = name.rsplit("_", 1)
    if kind == "student":
        return list(group.students[int(idx) - 1].parameters())
    return list(group.sd[int(idx)].parameters())


def train_iteration(group, optimizers, x, y, config):
    """Run one iteration and return ``{"<component>/<term>": value}`` scalars."""
    try:
        result = compute_losses(group, x, y, config)
    except InvalidInputError as exc:
        if "non-finite" not in str(exc):
            raise
        raise TrainingAborted("forward", float("nan")) from exc
    metrics = {}
    threshold = config.train.divergence_threshold
    for name, lv in result.items():
        value = lv.item()
        if not torch.isfinite(lv.value) or value > threshold:
            raise TrainingAborted(name, value)
        opt = optimizers[name]
        opt.zero_grad(set_to_none=True)
        lv.value.backward()
        if config.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(_component_params(group, name), config.train.grad_clip)
        opt.step()
        metrics.update(lv.as_dict(prefix=f"{name}/"))
    return metrics


# --- epochs, checkpoints, experiments ------------------------------------

@dataclass
class ExperimentReport:
    config_hash: str
    variant: str
    final: dict
    history: list = field(default_factory=list)
    initial_metrics: dict = field(default_factory=dict)
    output_dir: str = ""

    def table_row(self):
        f = self.final
        row = {f"student_{i}": a for i, a in enumerate(f["student_acc"], 1)}
        row.update(student_mean=f["student_mean"], ens=f["ens_acc"], fusion=f["fusion_acc"], leader=f["leader_acc"],
                   cosine=f["cosine"])
        return row

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


class Trainer:
    """Owns a :class:`StudentGroup`, its optimizers and the epoch counter."""

    def __init__(self, config, group=None):
        self.config = config
        self.group = group if group is not None else build_group(config)
        self.optimizers = make_optimizers(self.group, config)
        self.flags = VARIANTS[config.distill.variant]
        self.epoch = 0
        self.iteration = 0
        self.history = []
        self.initial_metrics = {}
        self.batch_seed = derive_seed(config.train.seed, "batches")

    def train_epoch(self, train_set, policy):
        cfg = self.config
        set_epoch_lr(self.optimizers, cfg, self.epoch)
        sums, count = {}, 0
        for x, y in batches(train_set, cfg.train.batch_size, self.batch_seed, self.epoch, policy, train=True,
                            workers=cfg.data.workers):
            m = train_iteration(self.group, self.optimizers, x, y, cfg)
            if self.iteration == 0:
                self.initial_metrics = dict(m)
            self.iteration += 1
            count += 1
            for k, v in m.items():
                sums[k] = sums.get(k, 0.0) + v
        return {k: v / count for k, v in sums.items()}

    def evaluate(self, test_set, policy):
        return evaluate_group(self.group, test_set, policy, self.config.train.eval_batch_size,
                              fusion=self.flags.leader, leader=self.flags.leader)

    def fit_epoch(self, train_set, test_set, policy):
        t0 = time.perf_counter()
        losses = self.train_epoch(train_set, policy)
        report = self.evaluate(test_set, policy)
        row = {"epoch": self.epoch + 1, "lr": lr_at(self.config.optim, self.epoch),
               "seconds": time.perf_counter() - t0, **report.flat(), **losses}
        self.history.append(row)
        self.epoch += 1
        return row, report

    # checkpointing

    def state(self):
        return {"epoch": self.epoch, "iteration": self.iteration, "history": self.history,
                "initial_metrics": self.initial_metrics}

    def save_checkpoint(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        files = {}
        for name, module in self.group.components().items():
            files[name] = f"{name}.pt"
            torch.save(module.state_dict(), tmp / files[name])
        torch.save({k: o.state_dict() for k, o in self.optimizers.items()}, tmp / "optimizers.pt")
        manifest = {"config_hash": config_hash(self.config), "config": self.config.to_dict(), "components": files,
                    **self.state()}
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)

    @classmethod
    def from_checkpoint(cls, path, config=None):
        """Restore a trainer; ``config`` (if given) must hash to the checkpoint's config."""
        group, manifest, saved_cfg = load_checkpoint(path)
        if config is not None and config_hash(config) != manifest["config_hash"]:
            diff = "; ".join(config_diff(saved_cfg, config)) or "hash differs"
            raise ConfigError(f"checkpoint {path} was written with a different config: {diff}")
        trainer = cls(config or saved_cfg, group)
        opt_states = torch.load(Path(path) / "optimizers.pt", weights_only=True)
        for k, o in trainer.optimizers.items():
            o.load_state_dict(opt_states[k])
        trainer.epoch = manifest["epoch"]
        trainer.iteration = manifest["iteration"]
        trainer.history = manifest["history"]
        trainer.initial_metrics = manifest["initial_metrics"]
        return trainer


def load_checkpoint(path):
    """Returns ``(group, manifest, config)`` from a checkpoint directory."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in {path}")
    manifest = json.loads(mpath.read_text())
    cfg = from_dict(manifest["config"])
    if config_hash(cfg) != manifest["config_hash"]:
        raise FormatError(f"{mpath}: stored config does not match its hash")
    group = build_group(cfg)
    for name, module in group.components().items():
        f = path / manifest["components"].get(name, f"{name}.pt")
        if not f.is_file():
            raise FileNotFoundError(f"checkpoint component archive missing: {name} ({f})")
        try:
            state = torch.load(f, weights_only=True)
            module.load_state_dict(state)
        except Exception as exc:
            raise FormatError(f"checkpoint component archive {name} ({f}) is unreadable: {exc}") from exc
    return group, manifest, cfg


def resolve_output_dir(config):
    out = Path(config.train.output_dir)
    root = os.environ.get("FFSD_OUTPUT_ROOT")
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _append_csv(path, row):
    new = not path.exists()
    if not new:
        with path.open() as f:
            header = next(csv.reader(f))
    else:
        header = list(row)
    with path.open("a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=header, extrasaction="ignore")
        if new:
            w.writeheader()
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in header})


def run_experiment(config, datasets=None, resume=True, write=True):
    """Train for ``config.train.epochs`` epochs, evaluating after each.

    Writes ``config.toml``, ``metrics.csv``, ``checkpoint/`` and
    ``report.json`` under the output directory (unless ``write`` is false).
    An existing checkpoint is resumed only if its config hash matches.
    """
    chash = config_hash(config)
    out = resolve_output_dir(config)
    ckpt = out / "checkpoint"
    trainer = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (ckpt / "manifest.json").is_file():
            trainer = Trainer.from_checkpoint(ckpt, config)
            logger.info("resuming %s at epoch %d", out, trainer.epoch)
        (out / "config.toml").write_text(f"# config_hash = {chash}\n" + config.to_toml())
    if trainer is None:
        trainer = Trainer(config)
    train_set, test_set = datasets if datasets is not None else load_datasets(config)
    policy = AugmentationPolicy.from_dataset(train_set, config.data.pad, config.data.flip_p, config.data.augment)

    report = None
    while trainer.epoch < config.train.epochs:
        row, report = trainer.fit_epoch(train_set, test_set, policy)
        logger.info("epoch %d: %s", row["epoch"], report.summary())
        if write:
            _append_csv(out / "metrics.csv", {"config_hash": chash, **row})
            trainer.save_checkpoint(ckpt)
    if report is None:
        report = trainer.evaluate(test_set, policy)
    result = ExperimentReport(chash, config.distill.variant, report.to_dict(), trainer.history,
                              trainer.initial_metrics, str(out))
    if write:
        (out / "report.json").write_text(result.to_json())
    result.trainer = trainer
    return result
