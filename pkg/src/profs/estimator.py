"""Scikit-learn style front end for the projection training loop.

`ProfsEmbedder` is a transformer: `fit(X, y)` learns the embedding
network on labeled vectors, `transform(X)` maps new vectors into the
embedding space, and `score(X, y)` reports recall@1 there.  All the
real work happens in the engine modules; this class just adapts the
interface and bookkeeping conventions.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datakit import Dataset
from .evalmetrics import recall_at_k
from .losses import MarginParams, ProjectionLossParams
from .numcore import MlpSpec, embed_batch
from .sampling import BatchPlan
from .scheduler import OptimizerConfig, ScheduleConfig, run_training


class ProfsEmbedder(BaseEstimator, TransformerMixin):
    """Metric embedding learned by alternating approximate projections.

    Parameters mirror the engine's knobs; `batch_size=None` picks
    min(128, positives_per_class * n_classes) rounded down to a
    multiple of positives_per_class.
    """

    def __init__(
        self,
        *,
        embed_dim: int = 32,
        hidden_dims: tuple[int, ...] = (64,),
        activation: str = "relu",
        normalize_output: bool = True,
        loss: str = "margin",
        epsilon: float = 1.0,
        delta: float = 0.2,
        epsilon_trainable: bool = True,
        eps_plus: float = 0.8,
        eps_minus: float = 1.2,
        batch_size: int | None = None,
        positives_per_class: int = 2,
        pairing: str = "balanced_pairs",
        mining: str = "random",
        m_steps: int | None = None,
        rho: float = 6.0,
        lam: float = 1e-3,
        lambda_anneal: float | None = None,
        max_projections: int = 150,
        optimizer: str = "adam",
        lr: float = 1e-3,
        head_lr_multiplier: float = 10.0,
        beta1: float = 0.9,
        beta2: float = 0.99,
        allow_replacement: bool = False,
        random_state: int = 0,
    ):
        self.embed_dim = embed_dim
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.normalize_output = normalize_output
        self.loss = loss
        self.epsilon = epsilon
        self.delta = delta
        self.epsilon_trainable = epsilon_trainable
        self.eps_plus = eps_plus
        self.eps_minus = eps_minus
        self.batch_size = batch_size
        self.positives_per_class = positives_per_class
        self.pairing = pairing
        self.mining = mining
        self.m_steps = m_steps
        self.rho = rho
        self.lam = lam
        self.lambda_anneal = lambda_anneal
        self.max_projections = max_projections
        self.optimizer = optimizer
        self.lr = lr
        self.head_lr_multiplier = head_lr_multiplier
        self.beta1 = beta1
        self.beta2 = beta2
        self.allow_replacement = allow_replacement
        self.random_state = random_state

    def _resolved_batch_size(self, n_classes: int) -> int:
        if self.batch_size is not None:
            return self.batch_size
        ipc = self.positives_per_class
        auto = min(128, ipc * n_classes)
        return max(ipc, (auto // ipc) * ipc)

    def fit(self, X, y) -> "ProfsEmbedder":
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, encoded = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise ValueError("fit needs at least two classes")
        spec = MlpSpec(
            input_dim=X.shape[1],
            hidden_dims=tuple(self.hidden_dims),
            embed_dim=self.embed_dim,
            activation=self.activation,
            normalize_output=self.normalize_output,
        )
        margin = MarginParams(
            epsilon=self.epsilon,
            delta=self.delta,
            epsilon_trainable=self.epsilon_trainable,
        )
        projection = None
        if self.loss == "projection":
            projection = ProjectionLossParams(
                eps_plus=self.eps_plus, eps_minus=self.eps_minus, lam=self.lam
            )
        schedule = ScheduleConfig(
            loss_kind=self.loss,
            margin=margin,
            projection=projection,
            lam=self.lam,
            lambda_anneal=self.lambda_anneal,
            m_steps=self.m_steps,
            rho=self.rho,
            max_projections=self.max_projections,
            mining=self.mining,
            allow_replacement=self.allow_replacement,
        )
        plan = BatchPlan(
            batch_size=self._resolved_batch_size(classes.size),
            positives_per_class=self.positives_per_class,
            pairing=self.pairing,
        )
        opt = OptimizerConfig(
            kind=self.optimizer,
            lr=self.lr,
            head_lr_multiplier=self.head_lr_multiplier,
            beta1=self.beta1,
            beta2=self.beta2,
        )
        dataset = Dataset(x=X, labels=encoded.astype(np.int64), name="fit")
        state = run_training(
            dataset, spec, schedule, plan, opt, seed=self.random_state
        )
        self.classes_ = classes
        self.n_features_in_ = X.shape[1]
        self.spec_ = spec
        self.params_ = state.theta
        self.history_ = state.history
        self.n_projections_ = state.k
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return embed_batch(X, self.params_, self.spec_)

    def score(self, X, y) -> float:
        """Recall@1 of the embedded samples."""
        X, y = check_X_y(X, y, dtype=np.float64)
        emb = self.transform(X)
        _, encoded = np.unique(y, return_inverse=True)
        return recall_at_k(emb, encoded.astype(np.int64), ks=(1,))[1]
