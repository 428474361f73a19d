"""The continual discovery engine.

Stage 0 learns a representation from the labeled batch with a margin
contrastive loss against per-class prototypes, freezes the backbone, fills
the replay pool, builds an orthogonal prototype bank, and trains a projector
to route each class onto its assigned orthogonal direction. Every later
stage splits an unlabeled batch into known and novel sides, accumulates the
novel side into a pool, re-clusters the whole pool, assigns any genuinely
new classes to fresh orthogonal directions, and fine-tunes the projector on
current data plus replayed initial-class representations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .config import EngineConfig
from .discovery import (APConfig, calibrate_ap_quantile,
                        calibrate_merge_threshold, joint_discover)
from .encoder import FeedForwardNet
from .evaluation import evaluate_stage
from .harness import make_stage_report
from .numerics import (AdamState, ZeroVectorError, adam_step, make_rng,
                       normalize_rows, squared_distances)
from .pools import DynamicPool, StaticPool
from .prototypes import (ContrastiveHyper, OrthogonalBank, PrototypeBank,
                         contrastive_loss)
from .splitter import (InsufficientReliableError, SplitConfig,
                       TrainingDivergedError, calibrate_epsilon,
                       nonparametric_split, parametric_split)


def softmax_rows(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def orthogonal_ce(Z, targets, proto_matrix, normalize: bool = True):
    """Cross entropy of projected features against assigned prototypes.

    Logits are dot products of (optionally unit-normalized) projections with
    every currently assigned prototype. Returns (mean loss, dL/dZ).
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    targets = np.asarray(targets, dtype=np.int64)
    n = Z.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if normalize:
        norms = np.linalg.norm(Z, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("zero projection cannot be normalized")
        Zh = Z / norms
    else:
        Zh = Z
    logits = Zh @ proto_matrix.T
    probs = softmax_rows(logits)
    picked = probs[np.arange(n), targets]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    dZh = dlogits @ proto_matrix
    if normalize:
        dZ = (dZh - Zh * np.sum(dZh * Zh, axis=1, keepdims=True)) / norms
    else:
        dZ = dZh
    return loss, dZ


def incremental_loss(Z_cur, targets_cur, Z_replay, targets_replay,
                     proto_matrix, normalize: bool = True):
    """Unweighted sum of current-stage and replay cross entropies.

    An empty replay side contributes exactly zero, so the total degrades to
    the plain cross entropy when there is nothing to replay.
    """
    loss_c, dZc = orthogonal_ce(Z_cur, targets_cur, proto_matrix, normalize)
    Z_replay = np.atleast_2d(np.asarray(Z_replay, dtype=np.float64))
    if Z_replay.shape[0] == 0:
        return loss_c, dZc, np.zeros_like(Z_replay)
    loss_r, dZr = orthogonal_ce(Z_replay, targets_replay, proto_matrix, normalize)
    return loss_c + loss_r, dZc, dZr


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class StageOutcome:
    report: dict
    metrics: object


class Engine:
    """Stateful continual discovery over one stream of batches."""

    def __init__(self, config: EngineConfig):
        self.config = config
        self.rng = make_rng(config.seed)
        self.backbone: FeedForwardNet | None = None
        self.projector: FeedForwardNet | None = None
        self.prototypes: PrototypeBank | None = None
        self.ortho: OrthogonalBank | None = None
        self.static_pool: StaticPool | None = None
        self.dynamic_pool: DynamicPool | None = None
        self.known_classes: list = []
        self.known_means: dict = {}            # initial class id -> stage-0 mean
        self.discovered_means: dict = {}       # engine id -> pool-space mean
        self.discovered_members: dict = {}     # engine id -> pool row indices
        self.identity_threshold: float = np.inf
        self.merge_threshold: float = 0.0
        self.epsilon: float = 0.0
        self.ap_preference: float | str = "median"
        self.ap_quantile: float | None = None
        self.last_cluster_count: int = 0
        self.stage: int = -1
        self._next_novel_id: int = 0
        # Plain growing softmax head, used when the orthogonal incremental
        # classifier is switched off.
        self.head_labels: list = []
        self.head_W: np.ndarray | None = None
        self.head_b: np.ndarray | None = None

    # ----- shared helpers -------------------------------------------------

    def _build_nets(self, input_dim: int):
        cfg = self.config
        b_dims = [input_dim, *cfg.backbone_hidden, cfg.rep_dim]
        b_acts = ["tanh"] * len(cfg.backbone_hidden) + ["identity"]
        self.backbone = FeedForwardNet.build(b_dims, b_acts, self.rng)
        p_dims = [cfg.rep_dim, *cfg.projector_hidden, cfg.rep_dim]
        p_acts = ["tanh"] * len(cfg.projector_hidden) + ["identity"]
        self.projector = FeedForwardNet.build(p_dims, p_acts, self.rng)

    def represent(self, X):
        F = self.backbone.forward(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        if self.config.normalize_f:
            F = normalize_rows(F)
        return F

    def project(self, F):
        return self.projector.forward(F)

    def model_param_bytes(self) -> int:
        total = self.backbone.param_bytes() + self.projector.param_bytes()
        if self.prototypes is not None:
            total += self.prototypes.vectors.nbytes
        if self.ortho is not None:
            total += self.ortho.vectors.nbytes
        if self.head_W is not None:
            total += self.head_W.nbytes + self.head_b.nbytes
        return total

    def pool_bytes(self):
        static = self.static_pool.nbytes() if self.static_pool else 0
        dynamic = self.dynamic_pool.nbytes() if self.dynamic_pool else 0
        return static, dynamic

    def predict(self, X):
        """Engine labels for raw inputs; known ids are the true initial ids."""
        F = self.represent(X)
        if not self.config.cio:
            Z = self.project(F)
            logits = Z @ self.head_W.T + self.head_b
            picks = np.argmax(logits, axis=1)
            return np.asarray([self.head_labels[i] for i in picks], dtype=np.int64)
        Z = self.project(F)
        if self.config.normalize_z:
            Z = normalize_rows(Z)
        return np.asarray(self.ortho.classify(Z), dtype=np.int64)

    def estimated_total_classes(self) -> int:
        """Current belief about how many classes exist in the stream.

        With the pooled view the latest clustering covers every novel class
        seen so far; without it the per-stage counts can only be summed.
        """
        if self.config.jdn:
            return len(self.known_classes) + self.last_cluster_count
        return len(self.known_classes) + len(self.discovered_means)

    # ----- stage 0 --------------------------------------------------------

    def _train_backbone_contrastive(self, X, label_idx):
        cfg = self.config
        hyper = ContrastiveHyper(alpha=cfg.alpha, sigma=cfg.sigma)
        b_state = AdamState.for_params(self.backbone.params(), lr=cfg.lr_backbone)
        p_state = AdamState.for_params([self.prototypes.vectors], lr=cfg.lr_prototypes)
        n = X.shape[0]
        for _ in range(cfg.epochs_initial):
            for idx in _batches(n, cfg.batch_size, self.rng):
                F, trace = self.backbone.forward(X[idx], want_trace=True)
                _, dF, dP = contrastive_loss(F, label_idx[idx], self.prototypes, hyper)
                grads, _ = self.backbone.backward(trace, dF)
                self.backbone.set_params(adam_step(self.backbone.params(), grads, b_state))
                new_vecs = adam_step([self.prototypes.vectors], [dP], p_state)[0]
                self.prototypes.vectors = new_vecs

    def _train_projector(self, F, target_idx, epochs, replay: bool = False):
        cfg = self.config
        state = AdamState.for_params(self.projector.params(), lr=cfg.lr_projector)
        n = F.shape[0]
        proto = self.ortho.assigned()[1]
        for _ in range(epochs):
            cur_iter = list(_batches(n, cfg.batch_size, self.rng))
            if replay:
                RX, Rt = self._replay_arrays()
                r_iter = list(_batches(len(RX), cfg.batch_size, self.rng))
            for j, idx in enumerate(cur_iter):
                Z, trace = self.projector.forward(F[idx], want_trace=True)
                loss, dZ = orthogonal_ce(Z, target_idx[idx], proto, cfg.normalize_z)
                grads, _ = self.projector.backward(trace, dZ)
                if replay and r_iter:
                    ridx = r_iter[j % len(r_iter)]
                    Zr, tr_r = self.projector.forward(RX[ridx], want_trace=True)
                    _, dZr = orthogonal_ce(Zr, Rt[ridx], proto, cfg.normalize_z)
                    rgrads, _ = self.projector.backward(tr_r, dZr)
                    grads = [g + rg for g, rg in zip(grads, rgrads)]
                self.projector.set_params(adam_step(self.projector.params(), grads, state))

    def _replay_arrays(self):
        RX, labels = self.static_pool.replay_epoch(self.rng)
        targets = np.asarray([self.ortho.assignment_index(l) for l in labels],
                             dtype=np.int64)
        return RX, targets

    def _grow_head(self, new_labels):
        d = self.config.rep_dim
        for label in new_labels:
            row = 0.01 * self.rng.standard_normal((1, d))
            if self.head_W is None:
                self.head_W = row
                self.head_b = np.zeros(1)
            else:
                self.head_W = np.vstack([self.head_W, row])
                self.head_b = np.append(self.head_b, 0.0)
            self.head_labels.append(int(label))

    def _train_head(self, F, labels, epochs):
        """Projector plus linear head trained with plain cross entropy."""
        cfg = self.config
        pos = {l: i for i, l in enumerate(self.head_labels)}
        targets = np.asarray([pos[int(l)] for l in labels], dtype=np.int64)
        p_state = AdamState.for_params(self.projector.params(), lr=cfg.lr_projector)
        h_state = AdamState.for_params([self.head_W, self.head_b],
                                       lr=cfg.lr_projector)
        n = F.shape[0]
        for _ in range(epochs):
            for idx in _batches(n, cfg.batch_size, self.rng):
                Z, trace = self.projector.forward(F[idx], want_trace=True)
                logits = Z @ self.head_W.T + self.head_b
                probs = softmax_rows(logits)
                dlog = probs
                dlog[np.arange(len(idx)), targets[idx]] -= 1.0
                dlog /= len(idx)
                gW = dlog.T @ Z
                gb = dlog.sum(axis=0)
                dZ = dlog @ self.head_W
                p_grads, _ = self.projector.backward(trace, dZ)
                self.head_W, self.head_b = adam_step(
                    [self.head_W, self.head_b], [gW, gb], h_state)
                self.projector.set_params(
                    adam_step(self.projector.params(), p_grads, p_state))

    def _feature_and_norms(self, H):
        """Representation plus the row norms needed for its backward pass."""
        if not self.config.normalize_f:
            return H, None
        norms = np.linalg.norm(H, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ZeroVectorError("cannot normalize zero-norm row")
        return H / norms, norms

    @staticmethod
    def _feature_backward(dF, F, norms):
        if norms is None:
            return dF
        return (dF - F * (dF * F).sum(axis=1, keepdims=True)) / norms

    def _train_joint_ortho(self, X, target_idx, epochs):
        """Backbone and projector descend the anchor CE together.

        Used when the embedding stage is disabled: there is no separate
        contrastive phase, so the classification loss is the only shaping
        signal the backbone ever sees.
        """
        cfg = self.config
        b_state = AdamState.for_params(self.backbone.params(), lr=cfg.lr_backbone)
        p_state = AdamState.for_params(self.projector.params(), lr=cfg.lr_projector)
        proto = self.ortho.assigned()[1]
        n = X.shape[0]
        for _ in range(epochs):
            for idx in _batches(n, cfg.batch_size, self.rng):
                H, b_trace = self.backbone.forward(X[idx], want_trace=True)
                F, norms = self._feature_and_norms(H)
                Z, p_trace = self.projector.forward(F, want_trace=True)
                _, dZ = orthogonal_ce(Z, target_idx[idx], proto, cfg.normalize_z)
                p_grads, dF = self.projector.backward(p_trace, dZ)
                b_grads, _ = self.backbone.backward(
                    b_trace, self._feature_backward(dF, F, norms))
                self.projector.set_params(
                    adam_step(self.projector.params(), p_grads, p_state))
                self.backbone.set_params(
                    adam_step(self.backbone.params(), b_grads, b_state))

    def _train_joint_head(self, X, labels, epochs):
        """Backbone, projector and softmax head trained together."""
        cfg = self.config
        pos = {l: i for i, l in enumerate(self.head_labels)}
        targets = np.asarray([pos[int(l)] for l in labels], dtype=np.int64)
        b_state = AdamState.for_params(self.backbone.params(), lr=cfg.lr_backbone)
        p_state = AdamState.for_params(self.projector.params(), lr=cfg.lr_projector)
        h_state = AdamState.for_params([self.head_W, self.head_b],
                                       lr=cfg.lr_projector)
        n = X.shape[0]
        for _ in range(epochs):
            for idx in _batches(n, cfg.batch_size, self.rng):
                H, b_trace = self.backbone.forward(X[idx], want_trace=True)
                F, norms = self._feature_and_norms(H)
                Z, p_trace = self.projector.forward(F, want_trace=True)
                logits = Z @ self.head_W.T + self.head_b
                probs = softmax_rows(logits)
                dlog = probs
                dlog[np.arange(len(idx)), targets[idx]] -= 1.0
                dlog /= len(idx)
                gW = dlog.T @ Z
                gb = dlog.sum(axis=0)
                dZ = dlog @ self.head_W
                p_grads, dF = self.projector.backward(p_trace, dZ)
                b_grads, _ = self.backbone.backward(
                    b_trace, self._feature_backward(dF, F, norms))
                self.head_W, self.head_b = adam_step(
                    [self.head_W, self.head_b], [gW, gb], h_state)
                self.projector.set_params(
                    adam_step(self.projector.params(), p_grads, p_state))
                self.backbone.set_params(
                    adam_step(self.backbone.params(), b_grads, b_state))

    def run_initial_stage(self, X, y) -> StageOutcome:
        t0 = time.perf_counter()
        cfg = self.config
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64)
        self.stage = 0
        self.known_classes = sorted(set(y.tolist()))
        self._next_novel_id = max(self.known_classes) + 1
        self._build_nets(X.shape[1])
        notes = []

        if cfg.cio:
            self.ortho = OrthogonalBank.random_init(
                cfg.rep_dim, self.rng, tau=cfg.tau,
                include_self_term=cfg.include_self_term)
            self.ortho.orthogonalize(cfg.ortho_steps, cfg.ortho_lr)
        else:
            notes.append("orthogonal classifier off: plain softmax head")
            self._grow_head(self.known_classes)

        if cfg.ied:
            self.prototypes = PrototypeBank.random_init(
                self.known_classes, cfg.rep_dim, self.rng)
            label_idx = np.asarray([self.prototypes.index_of(l) for l in y])
            self._train_backbone_contrastive(X, label_idx)
            self.backbone.freeze()
            F = self.represent(X)
            if cfg.cio:
                Z = self.project(F)
                for c in self.known_classes:
                    self.ortho.assign_class(Z[y == c].mean(axis=0), c)
                target_idx = np.asarray(
                    [self.ortho.assignment_index(l) for l in y], dtype=np.int64)
                self._train_projector(F, target_idx, cfg.epochs_projector)
            else:
                self._train_head(F, y, cfg.epochs_projector)
        else:
            # Embedding stage off: no contrastive phase, no learnable bank.
            # The backbone and the classifier consume the combined epoch
            # budget together and prototypes fall back to class means.
            notes.append("discriminative embedding off: joint training, "
                         "class-mean prototypes")
            joint_epochs = cfg.epochs_initial + cfg.epochs_projector
            if cfg.cio:
                Z0 = self.project(self.represent(X))
                for c in self.known_classes:
                    self.ortho.assign_class(Z0[y == c].mean(axis=0), c)
                target_idx = np.asarray(
                    [self.ortho.assignment_index(l) for l in y], dtype=np.int64)
                self._train_joint_ortho(X, target_idx, joint_epochs)
            else:
                self._train_joint_head(X, y, joint_epochs)
            self.backbone.freeze()
            F = self.represent(X)
            self.prototypes = PrototypeBank.from_class_means(F, y)

        self.static_pool = StaticPool.build(F, y, cfg.static_per_class)
        self.dynamic_pool = DynamicPool(cfg.rep_dim)

        if cfg.epsilon == "auto":
            self.epsilon = calibrate_epsilon(F, y, self.prototypes,
                                             own_weight=cfg.split_own_weight)
        else:
            self.epsilon = float(cfg.epsilon)

        means = np.stack([F[y == c].mean(axis=0) for c in self.known_classes])
        self.known_means = {c: means[i] for i, c in enumerate(self.known_classes)}
        lam_grid = None
        if len(self.known_classes) > 1:
            d2 = squared_distances(means, means)
            np.fill_diagonal(d2, np.inf)
            self.identity_threshold = float(np.sqrt(d2.min())) / 2.0
            np.fill_diagonal(d2, 0.0)
            lam_grid = np.linspace(0.0, float(np.sqrt(d2.max())),
                                   cfg.merge_grid_size)
        if cfg.ap_quantile is not None:
            self.ap_quantile = cfg.ap_quantile
        elif cfg.calibrate_preference:
            # Aim past the true count: blob fragments re-fuse under the
            # calibrated merge threshold, while missed splits cannot recover.
            target = max(len(self.known_classes),
                         int(round(cfg.overcluster_factor * len(self.known_classes))))
            self.ap_quantile = calibrate_ap_quantile(
                F, target, self.rng, cfg.ap_damping)
        self.merge_threshold = calibrate_merge_threshold(
            F, len(self.known_classes), cfg.fine_k, cfg.confidence_cut,
            self.rng, grid=lam_grid, grid_size=cfg.merge_grid_size,
            ap_config=self._ap_config())

        report = self._finish_stage(0, n_train=len(X), n_known_pred=len(X),
                                    n_novel_pred=0, n_discarded=0,
                                    notes=notes, t0=t0)
        return report

    # ----- incremental stages ---------------------------------------------

    def _split_batch(self, F, notes):
        cfg = self.config
        try:
            split_cfg = SplitConfig(epsilon=self.epsilon, delta=cfg.delta,
                                    mlp_hidden=cfg.mlp_hidden,
                                    mlp_epochs=cfg.mlp_epochs,
                                    mlp_lr=cfg.mlp_lr,
                                    batch_size=cfg.batch_size)
            return parametric_split(F, self.prototypes, split_cfg, self.rng)
        except (InsufficientReliableError, TrainingDivergedError) as exc:
            notes.append(f"split refiner fallback: {exc}")
            return nonparametric_split(F, self.prototypes, self.epsilon)

    def _ap_config(self) -> APConfig:
        return APConfig(damping=self.config.ap_damping,
                        preference=self.ap_preference,
                        preference_quantile=self.ap_quantile)

    def _match_discovered(self, result, pool):
        """Map this stage's pool clusters onto stable engine class ids.

        Pool members sitting inside the identity threshold of an initial
        class mean are split leakage: each re-joins its initial class rather
        than training toward a novel prototype. Whatever remains of a
        cluster is its core; a core below the cluster-size floor dissolves
        (the cluster was leakage, not a novel class). Surviving cores
        inherit ids by member overlap with the previous stage's clusters
        (the pool only appends, so row indices are stable), then by mean
        distance, and mint fresh ids otherwise. Returns (per-row engine
        labels with -1 for unusable rows, fresh ids, #dissolved clusters).
        """
        cluster_ids = sorted(result.class_means.keys())
        members = {cid: np.flatnonzero(result.pseudo_labels == cid)
                   for cid in cluster_ids}
        engine_labels = np.full(len(result.pseudo_labels), -1, dtype=np.int64)

        # Leak re-identification runs first so a leak cluster can never
        # survive as a phantom class through member overlap with itself.
        core = dict(members)
        means = dict(result.class_means)
        dissolved = set()
        if np.isfinite(self.identity_threshold) and self.known_means:
            km_ids = list(self.known_means.keys())
            km = np.stack([self.known_means[c] for c in km_ids])
            for cid in cluster_ids:
                rows = members[cid]
                d = np.sqrt(squared_distances(pool[rows], km))
                nearest = np.argmin(d, axis=1)
                dmin = d[np.arange(len(rows)), nearest]
                close = dmin < self.identity_threshold
                for r, j in zip(rows[close], nearest[close]):
                    engine_labels[r] = km_ids[j]
                core[cid] = rows[~close]
                if len(core[cid]) < max(1, self.config.min_cluster_size):
                    dissolved.add(cid)
                elif close.any():
                    means[cid] = pool[core[cid]].mean(axis=0)

        prev_ids = list(self.discovered_means.keys())
        cluster_to_engine = {}
        overlap_pairs = []
        for cid in cluster_ids:
            if cid in dissolved:
                continue
            own = set(core[cid].tolist())
            for pid in prev_ids:
                prev = self.discovered_members.get(pid, set())
                shared = len(own & prev)
                if prev and shared * 2 >= min(len(own), len(prev)):
                    overlap_pairs.append((-shared, cid, pid))
        overlap_pairs.sort()
        used_prev = set()
        for _, cid, pid in overlap_pairs:
            if cid in cluster_to_engine or pid in used_prev:
                continue
            cluster_to_engine[cid] = pid
            used_prev.add(pid)

        dist_pairs = []
        for cid in cluster_ids:
            if cid in dissolved or cid in cluster_to_engine:
                continue
            for pid in prev_ids:
                if pid in used_prev:
                    continue
                d = float(np.linalg.norm(means[cid] - self.discovered_means[pid]))
                if d < self.identity_threshold:
                    dist_pairs.append((d, cid, pid))
        dist_pairs.sort()
        for d, cid, pid in dist_pairs:
            if cid in cluster_to_engine or pid in used_prev:
                continue
            cluster_to_engine[cid] = pid
            used_prev.add(pid)

        new_ids = []
        for cid in cluster_ids:
            if cid in dissolved:
                continue
            if cid not in cluster_to_engine:
                eid = self._next_novel_id
                self._next_novel_id += 1
                cluster_to_engine[cid] = eid
                new_ids.append(eid)
        for cid, eid in cluster_to_engine.items():
            engine_labels[core[cid]] = eid
            self.discovered_means[eid] = means[cid]
            self.discovered_members[eid] = set(core[cid].tolist())
        return engine_labels, new_ids, len(dissolved)

    def run_incremental_stage(self, X) -> StageOutcome:
        if self.stage < 0:
            raise RuntimeError("run the initial labeled stage first")
        t0 = time.perf_counter()
        cfg = self.config
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        self.stage += 1
        notes = []

        F = self.represent(X)
        split = self._split_batch(F, notes)
        known_idx = split.known_indices
        novel_idx = split.novel_indices
        known_F = F[known_idx]
        known_labels = np.asarray(split.known_labels, dtype=np.int64)

        if cfg.jdn:
            self.dynamic_pool.update(F[novel_idx], self.stage)
            pool = self.dynamic_pool.all_entries()
        else:
            notes.append("joint discovery off: clustering current batch only")
            pool = F[novel_idx]
        result = joint_discover(
            pool, self.merge_threshold, cfg.fine_k, cfg.confidence_cut,
            self.rng, self._ap_config(),
            use_fine=cfg.jdn, use_merge=cfg.jdn,
            min_cluster_size=cfg.min_cluster_size)
        notes.extend(result.warnings)

        if cfg.jdn:
            engine_labels, new_ids, n_dissolved = self._match_discovered(result, pool)
            if n_dissolved:
                notes.append(f"{n_dissolved} leak cluster(s) dissolved back "
                             "into initial classes")
        else:
            # Without the pooled view every cluster looks brand new.
            engine_labels = np.full(len(result.pseudo_labels), -1, dtype=np.int64)
            new_ids, n_dissolved = [], 0
            for cid in sorted(result.class_means.keys()):
                eid = self._next_novel_id
                self._next_novel_id += 1
                engine_labels[result.pseudo_labels == cid] = eid
                new_ids.append(eid)
                self.discovered_means[eid] = result.class_means[cid]
        self.last_cluster_count = result.cluster_count - n_dissolved

        kept = engine_labels >= 0
        novel_train_F = pool[kept]
        novel_train_labels = engine_labels[kept]

        train_F = np.concatenate([known_F, novel_train_F]) if len(novel_train_F) \
            else known_F
        train_labels = np.concatenate([known_labels, novel_train_labels]) if \
            len(novel_train_labels) else known_labels

        if cfg.cio:
            Z = self.project(F)
            for eid in new_ids:
                mask = novel_train_labels == eid
                member_Z = self.project(novel_train_F[mask])
                try:
                    self.ortho.assign_class(member_Z.mean(axis=0), eid)
                except Exception as exc:
                    notes.append(f"prototype capacity reached for class {eid}: {exc}")
                    self.discovered_means.pop(eid, None)
                    self.discovered_members.pop(eid, None)
            usable = np.asarray([self.ortho.is_assigned(l) for l in train_labels])
            targets = np.asarray(
                [self.ortho.assignment_index(l) for l in train_labels[usable]],
                dtype=np.int64)
            if usable.any():
                self._train_projector(train_F[usable], targets,
                                      cfg.epochs_incremental, replay=True)
        else:
            self._grow_head(new_ids)
            self._train_head(train_F, train_labels, cfg.epochs_incremental)

        n_discarded = int(np.sum(engine_labels < 0)) if len(pool) else 0
        return self._finish_stage(self.stage, n_train=len(X),
                                  n_known_pred=len(known_idx),
                                  n_novel_pred=len(novel_idx),
                                  n_discarded=n_discarded,
                                  notes=notes, t0=t0)

    # ----- reporting ------------------------------------------------------

    def attach_test_data(self, test_fn):
        """``test_fn(stage) -> (X, y) or None`` supplies evaluation data."""
        self._test_fn = test_fn

    def _finish_stage(self, stage, *, n_train, n_known_pred, n_novel_pred,
                      n_discarded, notes, t0) -> StageOutcome:
        metrics_dict = {}
        metrics_obj = None
        predictions = None
        test_fn = getattr(self, "_test_fn", None)
        if test_fn is not None:
            data = test_fn(stage)
            if data is not None:
                Xt, yt = data
                preds = self.predict(Xt)
                predictions = (yt, preds)
                metrics_obj = evaluate_stage(yt, preds, self.known_classes, stage)
                candidates = {
                    "overall": metrics_obj.overall,
                    "known_accuracy": metrics_obj.known_accuracy,
                    "novel_accuracy": metrics_obj.novel_accuracy,
                }
                # Stages without one of the sides yield NaN; keep reports JSON-clean.
                metrics_dict = {k: v for k, v in candidates.items() if np.isfinite(v)}
        static_b, dynamic_b = self.pool_bytes()
        est_total = self.estimated_total_classes()
        report = make_stage_report(
            stage,
            n_train=n_train,
            n_known_pred=n_known_pred,
            n_novel_pred=n_novel_pred,
            n_discarded=n_discarded,
            estimated_novel_classes=est_total - len(self.known_classes),
            estimated_total_classes=est_total,
            discovered_ids=sorted(self.discovered_means.keys()),
            metrics=metrics_dict,
            static_pool_bytes=static_b,
            dynamic_pool_bytes=dynamic_b,
            wall_time_s=time.perf_counter() - t0,
            notes=notes,
            predictions=predictions,
        )
        return StageOutcome(report, metrics_obj)


def run_stream(config: EngineConfig, stream) -> dict:
    """Run a full stream and return the run-level report."""
    from .evaluation import aggregate
    from .harness import SCHEMA_VERSION

    engine = Engine(config)
    engine.attach_test_data(lambda s: stream.test_split_at(s))
    outcomes = []
    t0 = time.perf_counter()
    for stage, (X, y) in enumerate(stream.train_batches):
        if stage == 0:
            outcomes.append(engine.run_initial_stage(X, y))
        else:
            outcomes.append(engine.run_incremental_stage(X))
    metrics = [o.metrics for o in outcomes if o.metrics is not None]
    summary = aggregate(metrics).as_dict() if metrics else {}

    def denan(obj):
        if isinstance(obj, dict):
            return {k: denan(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [denan(v) for v in obj]
        if isinstance(obj, float) and not np.isfinite(obj):
            return None
        return obj

    summary = denan(summary)
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": config.seed,
        "config": config.to_dict(),
        "stages": [o.report for o in outcomes],
        "summary": summary,
        "model_param_bytes": engine.model_param_bytes(),
        "wall_time_s": time.perf_counter() - t0,
    }
