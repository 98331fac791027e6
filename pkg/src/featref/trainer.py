"""Per-fold SGD training and full-protocol orchestration.

Flow fields are computed once per clip and cached on disk; training and
evaluation read the cache. Every source of randomness (init, shuffling,
dropout) derives from one seed, so single-threaded runs are bit-exact
reproducible. Folds are independent and can run on a small thread pool;
each worker owns its model and tape, so the aggregate is identical to a
serial run.
"""

from __future__ import annotations

import logging
import os
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .dataset import SCHEMES, LabelScheme, label_samples, load_frame, load_frames
from .errors import ConfigError, DataError, NumericError, ProtocolError
from .flow import (FlowField, TVL1Params, normalize_flow, read_flow,
                   resize_bilinear, spot_apex, tvl1_flow, write_flow,
                   NETWORK_INPUT_SIZE)
from .ioutil import atomic_write_bytes, atomic_write_text, write_json
from .protocols import (CDMER_EXPERIMENTS, FoldPlan, compute_metrics,
                        confusion_from_predictions, confusion_to_csv,
                        plan_cdmer, plan_loso, MetricsReport)

log = logging.getLogger(__name__)

PROTOCOLS = ("cde", "single", "cdmer")

# per-protocol (learning rate, momentum) defaults
PROTOCOL_HYPERPARAMS = {
    "cde": (0.001, 0.0),
    "single": (0.0005, 0.8),
    "cdmer": (0.0005, 0.8),
}

DEFAULT_SCHEME = {"cde": "cde3", "single": "single4", "cdmer": "cdmer3"}


@dataclass
class TrainConfig:
    protocol: str = "single"
    batch_size: int = 32
    learning_rate: float | None = None   # None -> protocol default
    momentum: float | None = None        # None -> protocol default
    epochs: int = 100
    seed: int = 0
    rounds: int = 1
    workers: int | None = None           # None -> available cores (FR_THREADS caps)
    loss_reduction: str = "mean"         # 'sum' recovers the literal summed losses

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        lr, mom = self.resolved_hyperparams()
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= mom < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {mom}")
        if self.epochs < 1 or self.rounds < 1:
            raise ConfigError("epochs and rounds must be >= 1")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError("loss_reduction must be 'mean' or 'sum'")

    def resolved_hyperparams(self):
        lr_default, mom_default = PROTOCOL_HYPERPARAMS[self.protocol]
        lr = self.learning_rate if self.learning_rate is not None else lr_default
        mom = self.momentum if self.momentum is not None else mom_default
        return lr, mom


@dataclass
class FoldResult:
    fold_key: str
    confusion: np.ndarray
    final_train_loss: float
    epochs_run: int
    params: mdl.ModelParams


class FlowCache:
    """Directory of cached flow fields keyed by clip id."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, clip_id: str) -> Path:
        return self.directory / f"{clip_id}.frflow"

    def has(self, clip_id: str) -> bool:
        return self.path_for(clip_id).is_file()

    def get(self, clip_id: str) -> FlowField:
        path = self.path_for(clip_id)
        if not path.is_file():
            raise DataError(
                f"no cached flow for clip '{clip_id}'; compute flows first")
        return read_flow(path)

    def put(self, clip_id: str, fieldg: FlowField) -> None:
        write_flow(self.path_for(clip_id), fieldg)

    def ensure(self, samples, tvl1: TVL1Params | None = None) -> int:
        """Compute and store flows for any samples not yet cached.

        Annotated apex indices are used directly; clips without one get
        the inter-frame difference spotting. Returns how many flows were
        computed.
        """
        computed = 0
        for s in samples:
            if self.has(s.clip_id):
                continue
            onset = load_frame(s.frame_paths[s.onset_index])
            if s.apex_index is not None:
                apex_frame = load_frame(s.frame_paths[s.apex_index])
            else:
                frames = load_frames(s)
                apex_frame = frames[spot_apex(frames)]
            self.put(s.clip_id, tvl1_flow(onset, apex_frame, tvl1))
            computed += 1
        return computed


def network_inputs(fieldg: FlowField):
    """Resize a cached flow to the network grid and standardize it."""
    s = NETWORK_INPUT_SIZE
    if fieldg.shape != (s, s):
        fieldg = resize_bilinear(fieldg, s, s)
    return normalize_flow(fieldg)


def assemble_inputs(samples, cache: FlowCache):
    """Stack per-sample flow tensors into batch arrays [n,1,28,28] x2."""
    us, vs = [], []
    for s in samples:
        tu, tv = network_inputs(cache.get(s.clip_id))
        us.append(tu.data)
        vs.append(tv.data)
    return (np.concatenate(us, axis=0) if us else np.zeros((0, 1, 28, 28), np.float32),
            np.concatenate(vs, axis=0) if vs else np.zeros((0, 1, 28, 28), np.float32))


class SGD:
    """Plain stochastic gradient descent with optional momentum."""

    def __init__(self, params: mdl.ModelParams, learning_rate: float, momentum: float = 0.0):
        self.params = params
        self.lr = float(learning_rate)
        self.momentum = float(momentum)
        self.velocity = ({name: np.zeros_like(t.data) for name, t in params.items()}
                         if momentum > 0 else None)

    def zero_grad(self):
        for _, t in self.params.items():
            t.grad = None

    def step(self):
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            if self.velocity is None:
                t.data -= self.lr * g
            else:
                v = self.velocity[name]
                v *= self.momentum
                v += g
                t.data -= self.lr * v


def _fold_seed_seq(base_seed: int, fold_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(fold_index),))


def _round_base_seed(seed: int, round_index: int) -> int:
    return int(seed) + int(round_index)


def train_fold(model_config: mdl.ModelConfig, train_samples, train_labels,
               cache: FlowCache, train_config: TrainConfig,
               seed_seq: np.random.SeedSequence | None = None):
    """Train one fold; returns (params, final_loss, epochs_run).

    Deterministic given the seed sequence: initialization, per-epoch
    shuffling and dropout each use their own child stream.
    """
    train_config.validate()
    model_config.validate()
    y = np.asarray(train_labels, dtype=np.int64)
    if len(train_samples) != y.shape[0]:
        raise DataError(f"{len(train_samples)} samples but {y.shape[0]} labels")
    if len(train_samples) == 0:
        raise ProtocolError("training fold is empty")
    missing = [k for k in range(model_config.n_classes) if not np.any(y == k)]
    if missing:
        warnings.warn(
            f"classes {missing} absent from this training fold; their detectors "
            f"see only negatives", stacklevel=2)

    if seed_seq is None:
        seed_seq = _fold_seed_seq(train_config.seed, 0)
    init_ss, shuffle_ss, dropout_ss = seed_seq.spawn(3)
    params = mdl.build_model(model_config, np.random.default_rng(init_ss))
    lr, momentum = train_config.resolved_hyperparams()
    opt = SGD(params, lr, momentum)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout_rng = np.random.default_rng(dropout_ss)

    u_all, v_all = assemble_inputs(train_samples, cache)
    n = u_all.shape[0]
    bs = train_config.batch_size
    reduction = train_config.loss_reduction
    final_loss = float("nan")
    for _ in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            ub = ad.Tensor(u_all[sel])
            vb = ad.Tensor(v_all[sel])
            yb = y[sel]
            with ad.Tape() as tape:
                out = mdl.forward_full(params, ub, vb, training=True, rng=dropout_rng)
                l_cls = mdl.classification_loss(out.logits, yb, reduction)
                if model_config.variant == mdl.VARIANT_BASIC:
                    loss = l_cls
                else:
                    l_prop = mdl.proposal_loss(out.detector_probs, yb,
                                               model_config.n_classes, reduction)
                    loss = mdl.total_loss(l_prop, l_cls, model_config.proposal_weight)
                opt.zero_grad()
                tape.backward(loss)
            final_loss = loss.item()
            if not np.isfinite(final_loss):
                raise NumericError(f"training loss became non-finite ({final_loss})")
            opt.step()
    return params, final_loss, train_config.epochs


def evaluate_fold(params: mdl.ModelParams, test_samples, test_labels,
                  cache: FlowCache) -> np.ndarray:
    """Confusion matrix of argmax predictions over a test fold, computed
    in evaluation mode (dropout off)."""
    if not params.all_finite():
        raise NumericError("model parameters contain non-finite values")
    y = np.asarray(test_labels, dtype=np.int64)
    u_all, v_all = assemble_inputs(test_samples, cache)
    out = mdl.forward_full(params, ad.Tensor(u_all), ad.Tensor(v_all), training=False)
    pred = mdl.predict(out.logits)
    return confusion_from_predictions(y, pred, params.config.n_classes)


# ---------------------------------------------------------------------------
# protocol orchestration


@dataclass
class ProtocolRun:
    report: MetricsReport            # micro-aggregated metrics of round 0
    round_reports: list              # one MetricsReport per round
    fold_results: list               # FoldResult for every round-0 fold
    plan: FoldPlan
    classes: tuple
    report_dict: dict                # what report.json contains


def _resolve_workers(train_config: TrainConfig, n_folds: int) -> int:
    w = train_config.workers if train_config.workers is not None else (os.cpu_count() or 1)
    env_cap = os.environ.get("FR_THREADS")
    if env_cap:
        try:
            w = min(w, max(1, int(env_cap)))
        except ValueError:
            raise ConfigError(f"FR_THREADS must be an integer, got {env_cap!r}") from None
    return max(1, min(w, n_folds))


def _run_folds(plan: FoldPlan, by_id, labels_by_id, model_config, train_config,
               cache, base_seed, workers):
    def run_one(idx_fold):
        idx, fold = idx_fold
        train_samples = [by_id[i] for i in fold.train_ids]
        test_samples = [by_id[i] for i in fold.test_ids]
        train_labels = np.array([labels_by_id[i] for i in fold.train_ids], dtype=np.int64)
        test_labels = np.array([labels_by_id[i] for i in fold.test_ids], dtype=np.int64)
        params, final_loss, epochs = train_fold(
            model_config, train_samples, train_labels, cache, train_config,
            seed_seq=_fold_seed_seq(base_seed, idx))
        confusion = evaluate_fold(params, test_samples, test_labels, cache)
        return FoldResult(fold_key=fold.key, confusion=confusion,
                          final_train_loss=final_loss, epochs_run=epochs, params=params)

    tasks = list(enumerate(plan.folds))
    if workers <= 1:
        return [run_one(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, tasks))


def run_protocol(model_config: mdl.ModelConfig, train_config: TrainConfig,
                 samples, cache: FlowCache, scheme: LabelScheme | str | None = None,
                 experiment: int | None = None, run_dir=None) -> ProtocolRun:
    """Train and evaluate every fold of the configured protocol.

    ``samples`` is the full pool; excluded labels are dropped up front.
    For the cross-database protocol, ``experiment`` picks the source and
    target databases out of the pool. With ``rounds`` > 1 the whole plan
    repeats with per-round seeds and the report carries mean and standard
    deviation of the headline metrics; fold artifacts come from round 0.
    """
    train_config.validate()
    model_config.validate()
    if isinstance(scheme, str):
        scheme = SCHEMES[scheme]
    if scheme is None:
        scheme = SCHEMES[DEFAULT_SCHEME[train_config.protocol]]
    if len(scheme.classes) != model_config.n_classes:
        raise ConfigError(
            f"scheme '{scheme.name}' has {len(scheme.classes)} classes but the model "
            f"is configured for {model_config.n_classes}")

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        resolved_lr, resolved_momentum = train_config.resolved_hyperparams()
        config_echo = {
            "model": asdict(model_config),
            "train": {**asdict(train_config),
                      "learning_rate": resolved_lr, "momentum": resolved_momentum},
            "scheme": scheme.name,
            "experiment": experiment,
        }
        write_json(run_dir / "config.json", config_echo)

    kept, labels, dropped = label_samples(samples, scheme)
    if dropped:
        log.info("dropped %d samples excluded by scheme '%s'", dropped, scheme.name)
    if not kept:
        raise ProtocolError("no samples remain after label re-grouping")
    seen = set()
    for s in kept:
        if s.clip_id in seen:
            raise DataError(f"duplicate clip_id '{s.clip_id}' in the sample pool")
        seen.add(s.clip_id)

    if train_config.protocol == "cdmer":
        if experiment is None:
            raise ConfigError("the cross-database protocol needs an experiment number")
        src_db, tgt_db = CDMER_EXPERIMENTS.get(experiment, (None, None))
        if src_db is None:
            raise ProtocolError(f"cross-database experiment must be 1..12, got {experiment}")
        source = [s for s in kept if s.database == src_db]
        target = [s for s in kept if s.database == tgt_db]
        plan = plan_cdmer(source, target, experiment)
    else:
        plan = plan_loso(kept, protocol=train_config.protocol)

    by_id = {s.clip_id: s for s in kept}
    labels_by_id = {s.clip_id: int(l) for s, l in zip(kept, labels)}
    workers = _resolve_workers(train_config, len(plan.folds))

    round_reports = []
    round0_results = None
    for r in range(train_config.rounds):
        base_seed = _round_base_seed(train_config.seed, r)
        results = _run_folds(plan, by_id, labels_by_id, model_config, train_config,
                             cache, base_seed, workers)
        round_reports.append(compute_metrics([fr.confusion for fr in results],
                                             classes=scheme.classes))
        if r == 0:
            round0_results = results

    report = round_reports[0]
    report_dict = _build_report_dict(train_config, round_reports, round0_results,
                                     scheme, experiment)
    if run_dir is not None:
        for fr in round0_results:
            fold_dir = run_dir / "folds" / fr.fold_key
            fold_dir.mkdir(parents=True, exist_ok=True)
            atomic_write_text(fold_dir / "confusion.csv",
                              confusion_to_csv(fr.confusion, scheme.classes))
            mdl.save_checkpoint(fold_dir / "checkpoint", fr.params)
        write_json(run_dir / "report.json", report_dict)
    return ProtocolRun(report=report, round_reports=round_reports,
                       fold_results=round0_results, plan=plan,
                       classes=scheme.classes, report_dict=report_dict)


def _build_report_dict(train_config, round_reports, round0_results, scheme, experiment):
    per_round = [{"acc": m.acc, "uf1": m.uf1, "uar": m.uar} for m in round_reports]
    means = {k: float(np.mean([pr[k] for pr in per_round])) for k in ("acc", "uf1", "uar")}
    stds = {k: float(np.std([pr[k] for pr in per_round])) for k in ("acc", "uf1", "uar")}
    d = round_reports[0].to_dict()
    d.update({
        "protocol": train_config.protocol,
        "scheme": scheme.name,
        "experiment": experiment,
        "rounds": {"count": train_config.rounds, "mean": means, "std": stds,
                   "per_round": per_round},
        "folds": {fr.fold_key: {"confusion": fr.confusion.tolist(),
                                "final_train_loss": fr.final_train_loss,
                                "epochs_run": fr.epochs_run}
                  for fr in round0_results},
    })
    return d


def export_features(params: mdl.ModelParams, samples, labels, cache: FlowCache,
                    path) -> None:
    """Evaluation-mode shared and refined features for external tools,
    framed exactly like checkpoint tensors."""
    u_all, v_all = assemble_inputs(samples, cache)
    out = mdl.forward_full(params, ad.Tensor(u_all), ad.Tensor(v_all), training=False)
    tensors = {"z": out.shared.data,
               "labels": np.asarray(labels, dtype=np.float32)}
    if out.refined is not None:
        tensors["z_refined"] = out.refined.data
    chunks = [b"FRFEAT1\x00"]
    for name, data in tensors.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def compare_variants(model_config: mdl.ModelConfig, train_config: TrainConfig,
                     samples, cache: FlowCache,
                     variants=(mdl.VARIANT_BASIC, mdl.VARIANT_FC,
                               mdl.VARIANT_CONCAT, mdl.VARIANT_FULL),
                     scheme=None) -> dict:
    """Run the same protocol once per variant; returns variant -> report."""
    results = {}
    for variant in variants:
        cfg = replace(model_config, variant=variant)
        results[variant] = run_protocol(cfg, train_config, samples, cache,
                                        scheme=scheme).report
    return results


def format_comparison(results: dict) -> str:
    lines = [f"{'variant':<12} {'acc':>8} {'uf1':>8} {'uar':>8}"]
    for variant, rep in results.items():
        lines.append(f"{variant:<12} {rep.acc:>8.4f} {rep.uf1:>8.4f} {rep.uar:>8.4f}")
    return "\n".join(lines)
