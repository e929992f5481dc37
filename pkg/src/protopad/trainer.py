"""Episodic training of the embedder and PadReport-producing evaluation.

One optimizer step is taken per episode: the episode loss is backpropagated
through the prototypes into every support and query embedding and from there
into the MLP parameters, which AdamW updates with decoupled weight decay.
Early stopping watches the mean loss over a fixed set of validation episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset, Label, feature_matrix
from .episodes import EpisodeSpec, sample_episode, sample_support
from .errors import DataError, NumericalError
from .metrics import (
    DEFAULT_PAIS,
    DetCurve,
    PadReport,
    ScoreSet,
    build_report,
    det_curve,
    eer,
)
from .mlp import (
    EmbeddingConfig,
    MlpParameters,
    embed_backward,
    embed_forward_batch,
    flatten,
    init_parameters,
    unflatten,
    zeros_like,
)
from .protonet import (
    DistanceMetric,
    classify_query,
    compute_prototypes,
    episode_loss_gradient,
)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters and the episodic training budget."""

    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 30
    max_epochs: int = 500
    episodes_per_epoch: int = 100
    val_episodes: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        # learning_rate 0 is tolerated here so frozen-model behaviour can be
        # exercised; the CLI rejects configs with lr <= 0.
        if not (self.learning_rate >= 0.0 and np.isfinite(self.learning_rate)):
            raise DataError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.weight_decay < 0.0:
            raise DataError("weight_decay must be >= 0")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise DataError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise DataError("epsilon must be positive")
        if min(self.patience, self.max_epochs, self.episodes_per_epoch, self.val_episodes) < 1:
            raise DataError("patience, epoch and episode counts must be >= 1")


@dataclass(frozen=True)
class OptimizerState:
    """AdamW first/second moment accumulators and the step counter."""

    m: MlpParameters
    v: MlpParameters
    t: int = 0


def init_optimizer_state(params: MlpParameters) -> OptimizerState:
    return OptimizerState(m=zeros_like(params), v=zeros_like(params), t=0)


def adamw_step(
    params: MlpParameters,
    grads: MlpParameters,
    state: OptimizerState,
    cfg: TrainConfig,
) -> tuple[MlpParameters, OptimizerState]:
    """One AdamW update with decoupled weight decay.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2; after bias correction the
    parameters move by -lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    """
    t = state.t + 1
    new_w, new_b = [], []
    new_mw, new_mb, new_vw, new_vb = [], [], [], []
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for theta, g, m, v, out_p, out_m, out_v in (
        (params.weights, grads.weights, state.m.weights, state.v.weights, new_w, new_mw, new_vw),
        (params.biases, grads.biases, state.m.biases, state.v.biases, new_b, new_mb, new_vb),
    ):
        for th, gr, mm, vv in zip(theta, g, m, v):
            if th.shape != gr.shape:
                raise DataError(f"gradient shape {gr.shape} does not match parameter {th.shape}")
            m2 = cfg.beta1 * mm + (1.0 - cfg.beta1) * gr
            v2 = cfg.beta2 * vv + (1.0 - cfg.beta2) * gr * gr
            m_hat = m2 / bc1
            v_hat = v2 / bc2
            out_p.append(th - cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.epsilon)
                                                   + cfg.weight_decay * th))
            out_m.append(m2)
            out_v.append(v2)
    updated = MlpParameters(tuple(new_w), tuple(new_b))
    return updated, OptimizerState(
        m=MlpParameters(tuple(new_mw), tuple(new_mb)),
        v=MlpParameters(tuple(new_vw), tuple(new_vb)),
        t=t,
    )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_eer: float


@dataclass(frozen=True)
class TrainHistory:
    epochs: tuple[EpochStats, ...]
    best_epoch: int
    stop_reason: str

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_eer"]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.val_eer!r}")
        return "\n".join(lines) + "\n"


def _mix_seed(spec_seed: int, cfg_seed: int, stream: int) -> int:
    return (spec_seed * 1_000_003 + cfg_seed * 8_191 + stream) % 2**63


def _episode_step(
    params: MlpParameters,
    embed_cfg: EmbeddingConfig,
    episode,
) -> tuple[float, MlpParameters]:
    """Loss and parameter gradients for one episode (support stacked first)."""
    ns = len(episode.support)
    x = feature_matrix(list(episode.support) + list(episode.query))
    z, cache = embed_forward_batch(params, x, embed_cfg.activation)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite embeddings; the optimization has diverged")
    grads = episode_loss_gradient(
        z[:ns],
        [int(s.label) for s in episode.support],
        z[ns:],
        [int(s.label) for s in episode.query],
        episode.class_set,
    )
    g_embed = np.vstack([grads.grad_support, grads.grad_query])
    return grads.loss, embed_backward(params, cache, g_embed, embed_cfg.activation)


def _episode_scores(
    params: MlpParameters, embed_cfg: EmbeddingConfig, episode
) -> tuple[float, list[tuple[int, float]]]:
    """Validation loss plus (true class, bona fide posterior) per query."""
    ns = len(episode.support)
    x = feature_matrix(list(episode.support) + list(episode.query))
    z, _ = embed_forward_batch(params, x, embed_cfg.activation)
    grads = episode_loss_gradient(
        z[:ns],
        [int(s.label) for s in episode.support],
        z[ns:],
        [int(s.label) for s in episode.query],
        episode.class_set,
    )
    bf_col = episode.class_set.index(int(Label.BONA_FIDE))
    scored = [
        (int(s.label), float(grads.query_posteriors[i, bf_col]))
        for i, s in enumerate(episode.query)
    ]
    return grads.loss, scored


def train(
    train_ds: Dataset,
    val_ds: Dataset,
    episode_spec: EpisodeSpec,
    embed_cfg: EmbeddingConfig,
    train_cfg: TrainConfig,
    val_episode_spec: EpisodeSpec | None = None,
    initial_params: MlpParameters | None = None,
) -> tuple[MlpParameters, TrainHistory]:
    """Episodic AdamW training with early stopping on validation loss.

    Every epoch draws ``episodes_per_epoch`` fresh training episodes (one
    optimizer step each) and then scores a fixed, seed-stable set of
    validation episodes. Training stops when the validation loss has not
    improved for ``patience`` consecutive epochs; the parameters from the
    best validation epoch are returned. ``val_episode_spec`` lets validation
    use a different recipe (needed when the training spec carries support
    pools whose sample ids only exist in the training split);
    ``initial_params`` starts from an existing checkpoint instead of a fresh
    initialization.

    Raises:
        DataError: episode spec infeasible on either dataset.
        NumericalError: a non-finite training loss.
    """
    if embed_cfg.input_dim != train_ds.dimension or embed_cfg.input_dim != val_ds.dimension:
        raise DataError(
            f"embedder expects dimension {embed_cfg.input_dim}, datasets have "
            f"{train_ds.dimension}/{val_ds.dimension}"
        )
    if int(Label.BONA_FIDE) not in episode_spec.class_set:
        raise DataError("class_set must contain the bona fide class (1)")

    base_val_spec = val_episode_spec if val_episode_spec is not None else episode_spec
    train_spec = replace(episode_spec, seed=_mix_seed(episode_spec.seed, train_cfg.seed, 0))
    val_spec = replace(base_val_spec, seed=_mix_seed(base_val_spec.seed, train_cfg.seed, 1))
    # Fail fast if either split cannot satisfy the spec.
    sample_episode(train_ds, train_spec, 0)
    sample_episode(val_ds, val_spec, 0)

    params = initial_params if initial_params is not None else init_parameters(embed_cfg)
    state = init_optimizer_state(params)
    best_params = params
    best_val = np.inf
    best_epoch = 0
    epochs_since_best = 0
    stats: list[EpochStats] = []
    stop_reason = "max_epochs"
    step = 0

    for epoch in range(1, train_cfg.max_epochs + 1):
        losses = []
        for _ in range(train_cfg.episodes_per_epoch):
            episode = sample_episode(train_ds, train_spec, step)
            step += 1
            loss, grads = _episode_step(params, embed_cfg, episode)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite training loss {loss!r} at epoch {epoch}, step {step}"
                )
            params, state = adamw_step(params, grads, state, train_cfg)
            losses.append(loss)

        val_losses = []
        episode_eers = []
        for j in range(train_cfg.val_episodes):
            episode = sample_episode(val_ds, val_spec, j)
            loss, scored = _episode_scores(params, embed_cfg, episode)
            val_losses.append(loss)
            episode_eers.append(_episode_eer(scored))
        val_loss = float(np.mean(val_losses))
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        val_eer = float(np.mean([e for e in episode_eers if not np.isnan(e)] or [np.nan]))
        stats.append(EpochStats(epoch, float(np.mean(losses)), val_loss, val_eer))

        if val_loss < best_val:
            best_val = val_loss
            best_params = params
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= train_cfg.patience:
                stop_reason = "early_stopping"
                break

    return best_params, TrainHistory(tuple(stats), best_epoch, stop_reason)


def _episode_eer(scored: Sequence[tuple[int, float]]) -> float:
    """EER of one episode's query scores; the logged val_eer averages these."""
    bf = [s for cls, s in scored if cls == int(Label.BONA_FIDE)]
    attacks = [s for cls, s in scored if cls != int(Label.BONA_FIDE)]
    if not bf or not attacks:
        return float("nan")
    return eer(det_curve(ScoreSet(np.array(bf), {DEFAULT_PAIS: np.array(attacks)})))


@dataclass(frozen=True)
class EvalResult:
    """Report plus the per-country DET curves and the support actually used."""

    report: PadReport
    curves: dict[str, DetCurve]
    support_sample_ids: tuple[str, ...]


def evaluate(
    params: MlpParameters,
    embed_cfg: EmbeddingConfig,
    eval_ds: Dataset,
    episode_spec: EpisodeSpec,
    metric: DistanceMetric = DistanceMetric.SQUARED_EUCLIDEAN,
    support_ds: Dataset | None = None,
    support_draw_index: int = 0,
    pais_by_screen_source: bool = False,
    per_country_prototypes: bool = False,
) -> EvalResult:
    """Score every evaluation sample against a spec-drawn support set.

    The support set is drawn from ``support_ds`` (the evaluation set itself
    when omitted); every evaluation sample outside the support is scored
    exactly once with the posterior probability of the bona fide class.
    Scores are grouped by country; countries with a single class present are
    skipped and recorded in the report.
    """
    if embed_cfg.input_dim != eval_ds.dimension:
        raise DataError(
            f"checkpoint expects dimension {embed_cfg.input_dim}, dataset has {eval_ds.dimension}"
        )
    source = support_ds if support_ds is not None else eval_ds
    support = sample_support(source, episode_spec, support_draw_index)
    support_ids = {s.sample_id for s in support}

    z_support, _ = embed_forward_batch(params, feature_matrix(support), embed_cfg.activation)
    queries = [s for s in eval_ds.samples if s.sample_id not in support_ids]
    if not queries:
        raise DataError("no evaluation samples left after removing the support set")
    z_query, _ = embed_forward_batch(params, feature_matrix(queries), embed_cfg.activation)

    bf_class = int(Label.BONA_FIDE)
    if per_country_prototypes:
        groups = list(dict.fromkeys((s.country, int(s.label)) for s in support))
        proto_vecs = compute_prototypes(
            [(groups.index((s.country, int(s.label))), z) for s, z in zip(support, z_support)],
            list(range(len(groups))),
        )
        bf_cols = [i for i, (_, cls) in enumerate(groups) if cls == bf_class]
    else:
        protos = compute_prototypes(
            [(int(s.label), z) for s, z in zip(support, z_support)], episode_spec.class_set
        )

    scores: dict[str, dict[str, list[float]]] = {}
    for sample, z in zip(queries, z_query):
        if per_country_prototypes:
            posterior, _ = classify_query(z, proto_vecs, metric)
            score = float(sum(posterior.probabilities[i] for i in bf_cols))
            score = min(1.0, max(0.0, score))
        else:
            posterior, _ = classify_query(z, protos, metric)
            score = posterior.prob_of(bf_class)
        entry = scores.setdefault(sample.country, {"bf": [], "attacks": {}})
        if int(sample.label) == bf_class:
            entry["bf"].append(score)
        else:
            pais = sample.screen_source if pais_by_screen_source else DEFAULT_PAIS
            entry["attacks"].setdefault(pais, []).append(score)

    score_sets = {
        country: ScoreSet(
            np.array(entry["bf"], dtype=np.float64),
            {p: np.array(v, dtype=np.float64) for p, v in sorted(entry["attacks"].items())},
        )
        for country, entry in sorted(scores.items())
    }
    report = build_report(score_sets)
    curves = {c: det_curve(score_sets[c]) for c in report.countries}
    return EvalResult(report=report, curves=curves, support_sample_ids=tuple(sorted(support_ids)))


def gradient_check(
    embed_cfg: EmbeddingConfig,
    support_x: np.ndarray,
    support_classes: Sequence[int],
    query_x: np.ndarray,
    query_classes: Sequence[int],
    class_set: Sequence[int] = (0, 1),
    fd_step: float = 1e-5,
) -> float:
    """Max guarded relative error between analytic and finite-difference grads.

    The end-to-end objective (episode loss through prototypes and the MLP) is
    differentiated analytically and compared against central finite
    differences over every parameter. The guard floor keeps near-zero
    gradient entries from inflating the relative error.
    """
    params = init_parameters(embed_cfg)
    support_x = np.asarray(support_x, dtype=np.float64)
    query_x = np.asarray(query_x, dtype=np.float64)
    ns = support_x.shape[0]

    def loss_at(p: MlpParameters) -> float:
        z, _ = embed_forward_batch(p, np.vstack([support_x, query_x]), embed_cfg.activation)
        grads = episode_loss_gradient(
            z[:ns], support_classes, z[ns:], query_classes, class_set
        )
        return grads.loss

    x = np.vstack([support_x, query_x])
    z, cache = embed_forward_batch(params, x, embed_cfg.activation)
    grads = episode_loss_gradient(z[:ns], support_classes, z[ns:], query_classes, class_set)
    analytic = flatten(
        embed_backward(
            params, cache, np.vstack([grads.grad_support, grads.grad_query]), embed_cfg.activation
        )
    )

    theta = flatten(params)
    numeric = np.zeros_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] = theta[i] + fd_step
        up = loss_at(unflatten(bumped, params))
        bumped[i] = theta[i] - fd_step
        down = loss_at(unflatten(bumped, params))
        numeric[i] = (up - down) / (2.0 * fd_step)

    if np.max(np.abs(analytic)) < 1e-12 and np.max(np.abs(numeric)) < 1e-12:
        return 0.0
    floor = 1e-4 * max(1.0, float(np.max(np.abs(numeric))))
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
