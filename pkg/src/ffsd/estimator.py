"""scikit-learn style facade over the trainer for in-memory image arrays."""
import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .config import ExperimentConfig
from .data import AugmentationPolicy, LabeledImageSet, batches
from .evaluation import eval_mode
from .exceptions import InvalidInputError
from .trainer import VARIANTS, Trainer


def check_images(X, image_size=None):
    """Validate an image batch and return it as uint8 ``(N, 3, H, W)``.

    Float input is read as intensities in [0, 1]; integer input as 0..255.
    """
    X = check_array(X, allow_nd=True, dtype=None, ensure_all_finite=True)
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise InvalidInputError(f"expected square RGB images shaped (N, 3, H, H), got {X.shape}")
    if image_size is not None and X.shape[2] != image_size:
        raise InvalidInputError(f"model was fitted on {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if np.issubdtype(X.dtype, np.floating):
        if X.min() < 0 or X.max() > 1:
            raise InvalidInputError("float images must lie in [0, 1]")
        return np.round(X * 255).astype(np.uint8)
    if X.min() < 0 or X.max() > 255:
        raise InvalidInputError("integer images must lie in [0, 255]")
    return X.astype(np.uint8)


class FFSDClassifier(ClassifierMixin, BaseEstimator):
    """Trains a student group and predicts with one of its networks.

    ``predictor`` picks the network behind ``predict``: ``"leader"`` (the
    default; falls back to the first student for variants without one),
    ``"fusion"`` or ``"student_<i>"``.
    """

    def __init__(self, variant="ffsd_full", n=2, widths=(16, 32, 64), depth=1, epochs=20, batch_size=32, lr=0.1,
                 milestones=(10, 15), temperature=2.0, lambda_div=0.1, lambda_fea=0.1, lambda_self=0.1, alpha=1.0,
                 pad=2, flip_p=0.5, predictor="leader", random_state=0):
        self.variant = variant
        self.n = n
        self.widths = widths
        self.depth = depth
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.milestones = milestones
        self.temperature = temperature
        self.lambda_div = lambda_div
        self.lambda_fea = lambda_fea
        self.lambda_self = lambda_self
        self.alpha = alpha
        self.pad = pad
        self.flip_p = flip_p
        self.predictor = predictor
        self.random_state = random_state

    def _config(self, num_classes, image_size):
        return ExperimentConfig().replace(
            data=dict(num_classes=num_classes, image_size=image_size, pad=self.pad, flip_p=float(self.flip_p)),
            model=dict(widths=[int(w) for w in self.widths], depth=int(self.depth)),
            distill=dict(variant=self.variant, n=int(self.n), temperature=float(self.temperature),
                         lambda_div=float(self.lambda_div), lambda_fea=float(self.lambda_fea),
                         lambda_self=float(self.lambda_self), alpha=float(self.alpha)),
            optim=dict(lr=float(self.lr), milestones=[int(m) for m in self.milestones]),
            sd_optim=dict(milestones=[int(m) for m in self.milestones]),
            train=dict(epochs=int(self.epochs), batch_size=int(self.batch_size), seed=int(self.random_state)),
        )

    def fit(self, X, y):
        images = check_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(images):
            raise InvalidInputError(f"y must be 1-d with {len(images)} entries, got shape {y.shape}")
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InvalidInputError("need at least two classes")
        cfg = self._config(len(self.classes_), images.shape[2])
        ds = LabeledImageSet(images, codes, len(self.classes_))
        self.policy_ = AugmentationPolicy.from_dataset(ds, cfg.data.pad, cfg.data.flip_p)
        trainer = Trainer(cfg)
        self.loss_history_ = []
        for _ in range(cfg.train.epochs):
            self.loss_history_.append(trainer.train_epoch(ds, self.policy_))
            trainer.epoch += 1
        self.config_ = cfg
        self.group_ = trainer.group
        self.n_features_in_ = int(np.prod(images.shape[1:]))
        return self

    def _network(self):
        name = self.predictor
        if name == "leader" and not VARIANTS[self.config_.distill.variant].leader:
            name = "student_1"
        if name in ("leader", "fusion"):
            return name
        if name.startswith("student_") and name[8:].isdigit() and 1 <= int(name[8:]) <= self.group_.n:
            return name
        raise InvalidInputError(f"unknown predictor {self.predictor!r}")

    def _outputs(self, X):
        check_is_fitted(self, "group_")
        images = check_images(X, self.config_.data.image_size)
        ds = LabeledImageSet(images, np.zeros(len(images), np.int64), len(self.classes_))
        name = self._network()
        g = self.group_
        logits, feats = [], []
        with eval_mode(g):
            for x, _ in batches(ds, 500, policy=self.policy_, train=False):
                if name == "fusion":
                    Ff, z, _ = g.fusion.fuse([s.forward_with_taps(x)[1][-1] for s in g.students])
                else:
                    z, taps = g.components()[name].forward_with_taps(x)
                    Ff = taps[-1]
                logits.append(z)
                feats.append(Ff.mean(dim=(2, 3)))
        return torch.cat(logits).numpy(), torch.cat(feats).numpy()

    def decision_function(self, X):
        return self._outputs(X)[0]

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "group_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X):
        """Globally pooled last-stage features of the predicting network."""
        return self._outputs(X)[1]
