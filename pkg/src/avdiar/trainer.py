"""Training and inference drivers for the diarization model.

The optimizer is Adam under the inverse-square-root learning-rate schedule
``lr(step) = dim^-0.5 * min(step^-0.5, step * warmup^-1.5)`` with linear
warm-up.  The speaker-recognition auxiliary losses are weighted by an
epoch-decayed beta.  Validation tunes the activity binarization threshold
over a small grid — jointly with the attractor stop-class threshold when
the speaker head is on — and the checkpoint with the lowest validation DER
is retained, carrying its tuned thresholds in the config header.  Runs are
bit-reproducible for a fixed seed on one thread.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DropoutKeys, backward
from .features import FeatureSequence, logmel, read_wav, splice_subsample
from .fusion import write_activity_csv
from .losses import (LossWeights, dia_bce_pit, existence_bce, speaker_ce_pit,
                     stop_ce, total_loss)
from .model import PRESETS, ActivityMatrix, AttractorSet, Model, save_model
from .scoring import aggregate_reports, binarize, score_recording
from .segments import SegmentList, parse_rttm, segments_to_frames


class TrainError(RuntimeError):
    """Raised when training cannot proceed (bad manifest, non-finite loss)."""


_MODE_FLAGS = ("use_positional_encoding", "use_attention_eda", "use_speaker_head")


@dataclass
class TrainConfig:
    """Desk-scale defaults; full-scale runs use warmup_steps=10000 and the
    larger model dims passed through ModelConfig."""

    epochs: int = 50
    batch_size: int = 1
    warmup_steps: int = 200
    seed: int = 0
    grad_accum: int = 1              # batch-size multiplier
    pit_mode: str = "sinkhorn"       # stream pairing: "sinkhorn" | "exhaustive"
    use_positional_encoding: bool = False
    use_attention_eda: bool = False
    use_speaker_head: bool = False
    exist_weight: float = 1.0        # existence-BCE weight when the speaker head is off
    alpha: float = 0.01
    beta0: float = 0.1
    beta_decay: float = 0.92
    gamma: float = 5.0
    threshold_grid: tuple[float, ...] = (0.3, 0.4, 0.5, 0.6, 0.7)
    stop_grid: tuple[float, ...] = (0.02, 0.05, 0.1, 0.2, 0.3, 0.5)
    median_frames: int = 11
    collar_s: float = 0.25
    val_every: int = 1               # epochs between validation passes
    resume_step: int = 0             # schedule/optimizer step offset for continued runs

    def __post_init__(self):
        for name in ("epochs", "batch_size", "warmup_steps", "grad_accum", "val_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.resume_step < 0:
            raise ValueError("resume_step must be >= 0")
        if not self.threshold_grid:
            raise ValueError("threshold_grid must not be empty")
        if not self.stop_grid:
            raise ValueError("stop_grid must not be empty")

    def weights_for_epoch(self, epoch: int) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta0=self.beta0,
                           beta_decay=self.beta_decay, gamma=self.gamma,
                           epoch=epoch)

    @classmethod
    def for_preset(cls, name: str, **overrides) -> "TrainConfig":
        """Mirror one of the model ablation presets' mode flags."""
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        kwargs = dict(PRESETS[name])
        kwargs.update(overrides)
        return cls(**kwargs)


# ---- dataset loading ---------------------------------------------------


@dataclass
class Example:
    rec_id: str
    frames: np.ndarray               # (T, input_dim) spliced features
    frame_shift_s: float
    y: np.ndarray                    # (T, S) reference activity
    speakers: list[str]              # column order of y
    corpus_labels: list[int] | None  # 1-based corpus identity per column
    ref: SegmentList


def wav_features(path) -> FeatureSequence:
    """Shared front end: log-mel bank, then context splicing + subsampling."""
    return splice_subsample(logmel(read_wav(path)))


def load_dataset(manifest_path, need_speaker_labels: bool = False) -> list[Example]:
    """Read a simulation manifest and extract features + frame labels for
    every recording it lists.  Paths are resolved relative to the manifest."""
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise TrainError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise TrainError(f"{path}: not valid JSON ({exc})")
    if not isinstance(manifest, list) or not manifest:
        raise TrainError(f"{path}: manifest must be a non-empty list of recordings")
    base = path.parent
    examples = []
    for entry in manifest:
        try:
            rec_id = entry["id"]
            wav_rel, rttm_rel = entry["wav"], entry["rttm"]
        except (TypeError, KeyError) as exc:
            raise TrainError(f"{path}: manifest entry missing field {exc}")
        feats = wav_features(base / wav_rel)
        refs = parse_rttm(base / rttm_rel)
        if rec_id in refs:
            segs = refs[rec_id]
        elif len(refs) == 1:
            segs = next(iter(refs.values()))
        else:
            raise TrainError(f"{rec_id}: no reference segments in {rttm_rel}")
        n_frames = feats.frames.shape[0]
        y, speakers = segments_to_frames(segs, feats.frame_shift_s, n_frames)
        if y.shape[1] == 0:
            raise TrainError(f"{rec_id}: reference contains no speech")
        labels = None
        if need_speaker_labels:
            spk_map = entry.get("speakers")
            if not spk_map:
                raise TrainError(
                    f"{rec_id}: manifest lacks the speaker identities the "
                    f"speaker head trains against")
            try:
                labels = [int(spk_map[s]) for s in speakers]
            except KeyError as exc:
                raise TrainError(f"{rec_id}: no corpus identity for speaker {exc}")
        examples.append(Example(rec_id, feats.frames, feats.frame_shift_s,
                                y, speakers, labels, segs))
    return examples


# ---- optimizer ---------------------------------------------------------


def lr_at(step: int, dim: int, warmup_steps: int) -> float:
    """Inverse-square-root schedule with linear warm-up; the peak value
    dim^-0.5 * warmup^-0.5 is reached exactly at step == warmup_steps."""
    if step < 1:
        raise ValueError("schedule steps count from 1")
    return dim ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class Adam:
    """Adam with the Transformer-schedule hyper-parameters."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---- loss composition --------------------------------------------------


def example_loss(model: Model, ex: Example, weights: LossWeights,
                 cfg: TrainConfig, train: bool = True, noise_seed: int = 0):
    """Forward pass and composite objective for one recording.

    Speaker-head modes combine diarization BCE with the identity CE and the
    stop-attractor CE under the epoch-decayed beta; the other modes add the
    plain attractor-existence BCE instead.  Returns (loss tensor, float parts).
    """
    s_true = ex.y.shape[1]
    e = model.encode_frames(ex.frames, train=train,
                            dropout_keys=DropoutKeys(noise_seed))
    states = model.eda_encode(e, shuffle_seed=noise_seed)
    att = model.eda_decode(states, s_true=s_true)
    y_hat = model.activity_probs(e, att)
    dia = dia_bce_pit(y_hat, ex.y, weights, mode=cfg.pit_mode)
    parts = {"dia": dia.loss.data.item(), "spk": None, "stop": None, "exist": None}
    if model.cfg.use_speaker_head:
        posts = att.speaker_posteriors
        spk = speaker_ce_pit(ag.narrow(posts, 0, 0, s_true), ex.corpus_labels,
                             mode=cfg.pit_mode)
        stop = stop_ce(ag.narrow(posts, 0, s_true, 1))
        tot = total_loss(dia.loss, spk.loss, stop, weights)
        parts["spk"], parts["stop"] = spk.loss.data.item(), stop.data.item()
    else:
        exist = existence_bce(att.existence_probs)
        tot = ag.add(dia.loss, ag.mul(exist, cfg.exist_weight))
        parts["exist"] = exist.data.item()
    parts["total"] = tot.data.item()
    return tot, parts


# ---- validation --------------------------------------------------------


def validation_der(model: Model, examples: list[Example],
                   cfg: TrainConfig) -> tuple[float | None, float, float]:
    """Aggregate DER minimized over the binarization threshold grid and, for
    speaker-head models, jointly over the stop-class threshold grid (that
    knob is a validation-tunable by contract).  Returns
    (percent or None, threshold, stop_threshold); ties keep grid order.
    """
    spk_mode = model.cfg.use_speaker_head
    if spk_mode:
        # One full-length decode per recording; each candidate stop
        # threshold only truncates the shared attractor sequence.
        decoded = []
        for ex in examples:
            e = model.encode_frames(ex.frames, train=False)
            att = model.eda_decode(model.eda_encode(e),
                                   forced_s=model.cfg.max_decode_speakers)
            p0 = att.speaker_posteriors.data[:, 0]
            probs = ag.sigmoid(ag.matmul(e, ag.transpose(att.attractors))).data
            decoded.append((p0, probs))
        taus = cfg.stop_grid
    else:
        inferred = [model.infer(ex.frames, ex.frame_shift_s) for ex in examples]
        taus = (model.cfg.stop_class_threshold,)
    best_der = math.inf
    best_th, best_tau = cfg.threshold_grid[0], taus[0]
    for tau in taus:
        if spk_mode:
            mats = []
            for ex, (p0, probs) in zip(examples, decoded):
                fired = np.nonzero(p0 > tau)[0]
                s = int(fired[0]) if fired.size else probs.shape[1]
                mats.append(ActivityMatrix(probs[:, :s], ex.frame_shift_s))
        else:
            mats = [am for am, _ in inferred]
        for th in cfg.threshold_grid:
            reports = []
            for ex, am in zip(examples, mats):
                hyp = binarize(am, threshold=th, median_frames=cfg.median_frames)
                reports.append(score_recording(ex.ref, hyp, collar_s=cfg.collar_s,
                                               rec_id=ex.rec_id))
            agg_der = aggregate_reports(reports).der
            if agg_der is not None and agg_der < best_der:
                best_der, best_th, best_tau = agg_der, th, tau
    if best_der is math.inf:
        return None, best_th, best_tau
    return best_der, best_th, best_tau


# ---- training loop -----------------------------------------------------


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_der: float | None = None
    best_threshold: float = 0.5
    best_stop_threshold: float = 0.5
    steps: int = 0


def _check_modes(model: Model, cfg: TrainConfig) -> None:
    for name in _MODE_FLAGS:
        if getattr(model.cfg, name) != getattr(cfg, name):
            raise TrainError(
                f"TrainConfig.{name}={getattr(cfg, name)} disagrees with the "
                f"model ({getattr(model.cfg, name)})")


def _noise_seed(cfg: TrainConfig, epoch: int, example_index: int) -> int:
    return int(np.random.SeedSequence(
        [cfg.seed, epoch, example_index]).generate_state(1)[0])


def train(model: Model, manifest_path, cfg: TrainConfig,
          ckpt_path=None, log_path=None, val_manifest_path=None) -> TrainResult:
    """Run the full loop over a simulation manifest.

    The model is left at its final state; the state with the lowest
    validation DER is written to ckpt_path as it is found.  Without a
    separate validation manifest the training set doubles as validation.
    Each epoch appends one JSON line {epoch, dia_loss, spk_loss, stop_loss,
    beta, val_der, ...} to log_path.
    """
    _check_modes(model, cfg)
    train_set = load_dataset(manifest_path,
                             need_speaker_labels=model.cfg.use_speaker_head)
    if val_manifest_path is None:
        val_set = train_set
    else:
        val_set = load_dataset(val_manifest_path)
    if model.cfg.use_speaker_head:
        n_classes = model.cfg.n_corpus_speakers
        for ex in train_set:
            bad = [l for l in ex.corpus_labels if not 1 <= l <= n_classes]
            if bad:
                raise TrainError(
                    f"{ex.rec_id}: corpus identities {bad} outside the model's "
                    f"1..{n_classes} range")

    opt = Adam(model.params)
    opt.t = cfg.resume_step
    step = cfg.resume_step
    eff_batch = cfg.batch_size * cfg.grad_accum
    result = TrainResult(best_stop_threshold=model.cfg.stop_class_threshold)
    log_f = open(log_path, "w") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            weights = cfg.weights_for_epoch(epoch)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_set))
            sums = {"dia": 0.0, "spk": 0.0, "stop": 0.0, "exist": 0.0, "total": 0.0}
            model.zero_grad()
            pending = 0
            for pos, ei in enumerate(order):
                ex = train_set[int(ei)]
                where = (f"at epoch {epoch}, batch {pos // eff_batch} "
                         f"(recording {ex.rec_id})")
                try:
                    loss, parts = example_loss(
                        model, ex, weights, cfg, train=True,
                        noise_seed=_noise_seed(cfg, epoch, int(ei)))
                except (ValueError, FloatingPointError) as exc:
                    # non-finite activations surface here when the pairing or
                    # posterior checks reject them before the loss is a number
                    raise TrainError(f"training failed {where}: {exc}") from exc
                if not np.isfinite(parts["total"]):
                    raise TrainError(f"non-finite loss {where}")
                backward(loss)
                for k, v in parts.items():
                    if v is not None:
                        sums[k] += v
                pending += 1
                if pending == eff_batch or pos == len(order) - 1:
                    step += 1
                    opt.step(lr_at(step, model.cfg.dim, cfg.warmup_steps))
                    model.zero_grad()
                    pending = 0

            spk_mode = model.cfg.use_speaker_head
            if epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1:
                val_der, val_th, val_stop = validation_der(model, val_set, cfg)
                if spk_mode:
                    # keep the tuned stopping knob paired with these weights,
                    # in the live model and in any checkpoint written below
                    model.cfg.stop_class_threshold = val_stop
            else:
                val_der = None
                val_th = result.best_threshold
                val_stop = result.best_stop_threshold
            n = len(train_set)
            record = {
                "epoch": epoch,
                "dia_loss": sums["dia"] / n,
                "spk_loss": sums["spk"] / n if spk_mode else None,
                "stop_loss": sums["stop"] / n if spk_mode else None,
                "beta": weights.beta,
                "val_der": val_der,
                "total_loss": sums["total"] / n,
                "exist_loss": None if spk_mode else sums["exist"] / n,
                "threshold": val_th,
                "stop_threshold": val_stop if spk_mode else None,
            }
            result.history.append(record)
            if log_f:
                log_f.write(json.dumps(record, sort_keys=True) + "\n")
                log_f.flush()
            if val_der is not None and (result.best_val_der is None
                                        or val_der < result.best_val_der):
                result.best_epoch = epoch
                result.best_val_der = val_der
                result.best_threshold = val_th
                result.best_stop_threshold = val_stop
                if ckpt_path:
                    save_model(ckpt_path, model)
    finally:
        if log_f:
            log_f.close()
    result.steps = step
    if ckpt_path and result.best_val_der is None:
        save_model(ckpt_path, model)
    return result


# ---- inference with exports --------------------------------------------


@dataclass
class InferResult:
    activity: ActivityMatrix
    attractors: AttractorSet
    embeddings: np.ndarray           # (T, dim) frame embeddings


def run_inference(model: Model, frames: np.ndarray, frame_shift_s: float = 0.1,
                  oracle_speakers: int | None = None) -> InferResult:
    """Deterministic forward pass keeping the frame embeddings for export."""
    e = model.encode_frames(frames, train=False)
    states = model.eda_encode(e)
    att = model.eda_decode(states, forced_s=oracle_speakers)
    if att.n_speakers == 0:
        y = np.zeros((frames.shape[0], 0))
    else:
        y = model.activity_probs(e, att).data.copy()
    return InferResult(ActivityMatrix(y, frame_shift_s), att, e.data.copy())


def write_attractor_csv(path, att: AttractorSet) -> None:
    """All decoded attractors, flagged by whether they count as speakers."""
    a = att.attractors.data
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["is_speaker"] + [f"d{j}" for j in range(a.shape[1])])
        for i in range(a.shape[0]):
            w.writerow([1 if i < att.n_speakers else 0] + list(a[i]))


def write_embedding_csv(path, embeddings: np.ndarray, frame_shift_s: float) -> None:
    """Frame embeddings with their frame times, for external projection plots."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t"] + [f"d{j}" for j in range(embeddings.shape[1])])
        for i in range(embeddings.shape[0]):
            w.writerow([i * frame_shift_s] + list(embeddings[i]))


def infer_to_files(model: Model, wav_path, out_prefix,
                   oracle_speakers: int | None = None) -> InferResult:
    """Decode one recording and write `<prefix>.activity.csv`,
    `<prefix>.attractors.csv`, and `<prefix>.embeddings.csv`."""
    feats = wav_features(wav_path)
    res = run_inference(model, feats.frames, feats.frame_shift_s, oracle_speakers)
    prefix = Path(out_prefix)
    if prefix.parent != Path(""):
        prefix.parent.mkdir(parents=True, exist_ok=True)
    write_activity_csv(f"{prefix}.activity.csv", res.activity)
    write_attractor_csv(f"{prefix}.attractors.csv", res.attractors)
    write_embedding_csv(f"{prefix}.embeddings.csv", res.embeddings,
                        res.activity.frame_shift_s)
    return res
