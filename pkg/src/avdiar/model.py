"""Self-attentive frame encoder plus LSTM attractor decoder.

Four configurations are reachable from `ModelConfig` flags alone:

- baseline: no positional encoding, zero-vector decoder inputs, stop decided
  by the attractor-existence head;
- attention decoding: sinusoidal positional encoding on, each decode step is
  conditioned on a context vector attending over the LSTM encoder states;
- speaker head: a (J+1)-way softmax over attractors, class 0 meaning "not a
  speaker", which doubles as the stop criterion;
- both combined.

Checkpoint container (documented contract): a magic line ``AVDIAR-MODEL v1``,
one JSON line ``{"config": {...}, "weights": [[name, shape], ...]}`` with
sorted keys, then each weight's raw little-endian float64 bytes in listed
order.  Byte-identical across repeated saves of the same weights.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import DropoutKeys, ShapeError, Tensor

CHECKPOINT_MAGIC = b"AVDIAR-MODEL v1\n"


class ModelIOError(ValueError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class ModelConfig:
    n_layers: int = 2
    dim: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    dropout: float = 0.1
    input_dim: int = 600
    use_positional_encoding: bool = False
    use_attention_eda: bool = False
    use_speaker_head: bool = False
    n_corpus_speakers: int = 0
    max_decode_speakers: int = 20
    existence_threshold: float = 0.5
    stop_class_threshold: float = 0.5

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.use_speaker_head and self.n_corpus_speakers < 1:
            raise ValueError("speaker head requires n_corpus_speakers >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        for name in ("existence_threshold", "stop_class_threshold"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} {v} outside (0, 1)")
        if self.max_decode_speakers < 1:
            raise ValueError("max_decode_speakers must be >= 1")


PRESETS = {
    "baseline": dict(use_positional_encoding=False, use_attention_eda=False,
                     use_speaker_head=False),
    "att": dict(use_positional_encoding=True, use_attention_eda=True,
                use_speaker_head=False),
    "spk": dict(use_positional_encoding=False, use_attention_eda=False,
                use_speaker_head=True),
    "plusplus": dict(use_positional_encoding=True, use_attention_eda=True,
                     use_speaker_head=True),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    """Desk-scale config for one of the four ablation variants; pass
    full-scale dims through overrides when needed."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kwargs = dict(PRESETS[name])
    if kwargs["use_speaker_head"]:
        kwargs["n_corpus_speakers"] = 8
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@dataclass
class AttractorSet:
    attractors: Tensor                    # (S_dec, D)
    existence_probs: Tensor               # (S_dec,)
    speaker_posteriors: Tensor | None     # (S_dec, J+1), rows sum to 1
    context_vectors: np.ndarray | None    # (S_dec, D), attention mode only
    attention_weights: np.ndarray | None  # (S_dec, T), attention mode only
    n_speakers: int                       # leading rows that count as speakers

    @property
    def n_decoded(self) -> int:
        return self.attractors.data.shape[0]


@dataclass
class ActivityMatrix:
    y_hat: np.ndarray
    frame_shift_s: float

    def __post_init__(self):
        if np.any(self.y_hat < 0) or np.any(self.y_hat > 1):
            raise ValueError("activity probabilities outside [0, 1]")


def sinusoidal_encoding(n_pos: int, dim: int) -> np.ndarray:
    pos = np.arange(n_pos)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


class Model:
    """Parameter container plus the forward ops; weights live in a flat
    name -> Tensor dict so the optimizer and checkpointing stay generic."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, ff = cfg.dim, cfg.ff_dim

        def mat(name, fan_in, fan_out):
            self.params[name] = Tensor(rng.normal(0.0, fan_in ** -0.5, (fan_in, fan_out)),
                                       requires_grad=True)

        def vec(name, n, value=0.0):
            self.params[name] = Tensor(np.full(n, value), requires_grad=True)

        mat("input_proj.w", cfg.input_dim, d)
        vec("input_proj.b", d)
        for i in range(cfg.n_layers):
            p = f"enc{i}."
            vec(p + "ln1.g", d, 1.0)
            vec(p + "ln1.b", d)
            for proj in ("wq", "wk", "wv", "wo"):
                mat(p + "attn." + proj, d, d)
                vec(p + "attn.b" + proj[1], d)
            vec(p + "ln2.g", d, 1.0)
            vec(p + "ln2.b", d)
            mat(p + "ff.w1", d, ff)
            vec(p + "ff.b1", ff)
            mat(p + "ff.w2", ff, d)
            vec(p + "ff.b2", d)
        vec("ln_out.g", d, 1.0)
        vec("ln_out.b", d)
        for side in ("eda_enc", "eda_dec"):
            mat(side + ".w_ih", d, 4 * d)
            mat(side + ".w_hh", d, 4 * d)
            bias = np.zeros(4 * d)
            bias[d:2 * d] = 1.0    # forget-gate bias
            self.params[side + ".b"] = Tensor(bias, requires_grad=True)
        mat("att.w", 3 * d, d)
        vec("att.b", d)
        mat("att.v", d, 1)
        mat("exist.w", d, 1)
        vec("exist.b", 1)
        if cfg.use_speaker_head:
            mat("spk.w", d, cfg.n_corpus_speakers + 1)
            vec("spk.b", cfg.n_corpus_speakers + 1)

    @property
    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    # ---- frame encoder -------------------------------------------------

    def encode_frames(self, frames: np.ndarray, train: bool = False,
                      dropout_keys: DropoutKeys | None = None) -> Tensor:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.input_dim:
            raise ShapeError(
                f"encode_frames: feature width {frames.shape} does not match "
                f"input projection width {self.cfg.input_dim}")
        keys = dropout_keys or DropoutKeys(0)
        cfg = self.cfg
        p = self.params
        x = _linear(Tensor(frames), p["input_proj.w"], p["input_proj.b"])
        if cfg.use_positional_encoding:
            x = ag.add(x, Tensor(sinusoidal_encoding(frames.shape[0], cfg.dim)))
        d_head = cfg.dim // cfg.n_heads
        scale = d_head ** -0.5
        for i in range(cfg.n_layers):
            pre = f"enc{i}."
            h = ag.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = _linear(h, p[pre + "attn.wq"], p[pre + "attn.bq"])
            k = _linear(h, p[pre + "attn.wk"], p[pre + "attn.bk"])
            v = _linear(h, p[pre + "attn.wv"], p[pre + "attn.bv"])
            heads = []
            for hd in range(cfg.n_heads):
                qh = ag.narrow(q, 1, hd * d_head, d_head)
                kh = ag.narrow(k, 1, hd * d_head, d_head)
                vh = ag.narrow(v, 1, hd * d_head, d_head)
                scores = ag.mul(ag.matmul(qh, ag.transpose(kh)), scale)
                heads.append(ag.matmul(ag.softmax(scores, axis=-1), vh))
            att = _linear(ag.concat(heads, axis=1), p[pre + "attn.wo"], p[pre + "attn.bo"])
            x = ag.add(x, ag.dropout(att, cfg.dropout, train, keys.next()))
            h2 = ag.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            ff = _linear(ag.relu(_linear(h2, p[pre + "ff.w1"], p[pre + "ff.b1"])),
                         p[pre + "ff.w2"], p[pre + "ff.b2"])
            x = ag.add(x, ag.dropout(ff, cfg.dropout, train, keys.next()))
        return ag.layer_norm(x, p["ln_out.g"], p["ln_out.b"])

    # ---- EDA -----------------------------------------------------------

    def _lstm_step(self, prefix: str, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        d = self.cfg.dim
        gates = ag.add(ag.add(ag.matmul(x, p[prefix + ".w_ih"]),
                              ag.matmul(h, p[prefix + ".w_hh"])),
                       p[prefix + ".b"])
        i = ag.sigmoid(ag.narrow(gates, 1, 0, d))
        f = ag.sigmoid(ag.narrow(gates, 1, d, d))
        g = ag.tanh(ag.narrow(gates, 1, 2 * d, d))
        o = ag.sigmoid(ag.narrow(gates, 1, 3 * d, d))
        c_new = ag.add(ag.mul(f, c), ag.mul(i, g))
        return ag.mul(o, ag.tanh(c_new)), c_new

    def eda_encode(self, e: Tensor, shuffle_seed: int = 0) -> tuple[Tensor, Tensor, Tensor]:
        """Run the LSTM encoder over frame embeddings; vanilla mode shuffles
        the time order first (the decoder should not rely on it), attention
        mode keeps natural order so the per-step states align with time.

        Returns (all hidden states in processing order, final h, final c).
        """
        t_frames = e.data.shape[0]
        if t_frames < 1:
            raise ShapeError("eda_encode: need at least one frame")
        if self.cfg.use_attention_eda:
            order = np.arange(t_frames)
        else:
            order = np.random.default_rng(shuffle_seed).permutation(t_frames)
        d = self.cfg.dim
        h = Tensor(np.zeros((1, d)))
        c = Tensor(np.zeros((1, d)))
        states = []
        for t in order:
            h, c = self._lstm_step("eda_enc", ag.narrow(e, 0, int(t), 1), h, c)
            states.append(h)
        return ag.concat(states, axis=0), h, c

    def attention_context(self, a_prev: Tensor, c_prev: Tensor,
                          h_e: Tensor) -> tuple[Tensor, Tensor]:
        """Additive attention over encoder states: score_t is a one-layer
        tanh network on [a_prev; c_prev; h_t]; returns the context vector
        (1, D) and the weight column (T, 1) summing to 1."""
        p = self.params
        t_frames = h_e.data.shape[0]
        ones = Tensor(np.ones((t_frames, 1)))
        a_rep = ag.matmul(ones, a_prev)
        c_rep = ag.matmul(ones, c_prev)
        u = ag.tanh(_linear(ag.concat([a_rep, c_rep, h_e], axis=1),
                            p["att.w"], p["att.b"]))
        w = ag.softmax(ag.matmul(u, p["att.v"]), axis=0)
        z = ag.matmul(ag.transpose(w), h_e)
        return z, w

    def speaker_posterior_row(self, attractor: Tensor) -> Tensor:
        if not self.cfg.use_speaker_head:
            raise ValueError("speaker posteriors need use_speaker_head=true")
        return ag.softmax(_linear(attractor, self.params["spk.w"],
                                  self.params["spk.b"]), axis=1)

    def speaker_posteriors(self, attractors: Tensor) -> Tensor:
        """(S, J+1) posterior matrix for a block of attractors."""
        if not self.cfg.use_speaker_head:
            raise ValueError("speaker posteriors need use_speaker_head=true")
        return ag.softmax(_linear(attractors, self.params["spk.w"],
                                  self.params["spk.b"]), axis=1)

    def eda_decode(self, states: tuple[Tensor, Tensor, Tensor],
                   s_true: int | None = None,
                   forced_s: int | None = None) -> AttractorSet:
        """Emit attractors from the decoder LSTM.

        - training (`s_true`): exactly s_true + 1 rows, the last being the
          stop attractor;
        - oracle count (`forced_s`): exactly forced_s rows, all speakers;
        - otherwise inference: decode until the stop criterion fires
          (existence head below threshold, or "not a speaker" class above
          threshold when the speaker head is on), capped at
          max_decode_speakers rows.
        """
        if s_true is not None and forced_s is not None:
            raise ValueError("pass at most one of s_true / forced_s")
        cfg = self.cfg
        h_all, h, c = states
        d = cfg.dim
        zero_in = Tensor(np.zeros((1, d)))
        a_prev = Tensor(np.zeros((1, d)))
        if s_true is not None:
            n_rows, n_speakers = s_true + 1, s_true
        elif forced_s is not None:
            n_rows, n_speakers = forced_s, forced_s
        else:
            n_rows, n_speakers = cfg.max_decode_speakers, None
        rows, exists, posts, ctxs, atts = [], [], [], [], []
        stopped_at = None
        for s in range(n_rows):
            if cfg.use_attention_eda:
                z, w = self.attention_context(a_prev, c, h_all)
                x_in = z
                ctxs.append(z.data.copy().reshape(-1))
                atts.append(w.data.copy().reshape(-1))
            else:
                x_in = zero_in
            h, c = self._lstm_step("eda_dec", x_in, h, c)
            rows.append(h)
            exists.append(ag.sigmoid(_linear(h, self.params["exist.w"],
                                             self.params["exist.b"])))
            if cfg.use_speaker_head:
                posts.append(self.speaker_posterior_row(h))
            a_prev = h
            if n_speakers is None:
                if cfg.use_speaker_head:
                    fired = posts[-1].data[0, 0] > cfg.stop_class_threshold
                else:
                    fired = exists[-1].data[0, 0] < cfg.existence_threshold
                if fired:
                    stopped_at = s
                    break
        if n_speakers is None:
            n_speakers = stopped_at if stopped_at is not None else len(rows)
        return AttractorSet(
            attractors=ag.concat(rows, axis=0),
            existence_probs=ag.reshape(ag.concat(exists, axis=0), (len(rows),)),
            speaker_posteriors=ag.concat(posts, axis=0) if posts else None,
            context_vectors=np.stack(ctxs) if ctxs else None,
            attention_weights=np.stack(atts) if atts else None,
            n_speakers=n_speakers,
        )

    # ---- read-out ------------------------------------------------------

    def activity_logits(self, e: Tensor, attractors: AttractorSet) -> Tensor:
        """(T, n_speakers) pre-sigmoid inner products."""
        if attractors.n_speakers == 0:
            raise ValueError("no speaker attractors to score")
        a_spk = ag.narrow(attractors.attractors, 0, 0, attractors.n_speakers)
        return ag.matmul(e, ag.transpose(a_spk))

    def activity_probs(self, e: Tensor, attractors: AttractorSet) -> Tensor:
        return ag.sigmoid(self.activity_logits(e, attractors))

    def infer(self, frames: np.ndarray, frame_shift_s: float = 0.1,
              oracle_speakers: int | None = None,
              shuffle_seed: int = 0) -> tuple[ActivityMatrix, AttractorSet]:
        """Full forward pass without gradients recorded into any optimizer:
        features -> frame embeddings -> attractors -> activity."""
        e = self.encode_frames(frames, train=False)
        states = self.eda_encode(e, shuffle_seed=shuffle_seed)
        attractors = self.eda_decode(states, forced_s=oracle_speakers)
        if attractors.n_speakers == 0:
            y = np.zeros((frames.shape[0], 0))
        else:
            y = self.activity_probs(e, attractors).data.copy()
        return ActivityMatrix(y, frame_shift_s), attractors


# ---- checkpoint I/O ----------------------------------------------------


def save_model(path, model: Model) -> None:
    names = sorted(model.params)
    header = {
        "config": asdict(model.cfg),
        "weights": [[n, list(model.params[n].data.shape)] for n in names],
    }
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(json.dumps(header, sort_keys=True,
                           separators=(",", ":")).encode() + b"\n")
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelIOError(f"{path}: not a model checkpoint (bad magic)")
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ModelIOError(f"{path}: unreadable header: {exc}") from None
        try:
            cfg = ModelConfig(**header["config"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelIOError(f"{path}: bad config: {exc}") from None
        model = Model(cfg, seed=0)
        listed = {name for name, _ in header.get("weights", [])}
        if listed != set(model.params):
            raise ModelIOError(
                f"{path}: weight names do not match config "
                f"(missing {sorted(set(model.params) - listed)[:3]}...)")
        for name, shape in header["weights"]:
            shape = tuple(int(x) for x in shape)
            if model.params[name].data.shape != shape:
                raise ModelIOError(
                    f"{path}: {name} has shape {shape}, expected "
                    f"{model.params[name].data.shape}")
            n_bytes = int(np.prod(shape)) * 8
            blob = f.read(n_bytes)
            if len(blob) != n_bytes:
                raise ModelIOError(f"{path}: truncated at weight {name}")
            model.params[name] = Tensor(
                np.frombuffer(blob, dtype="<f8").reshape(shape).copy(),
                requires_grad=True)
        if f.read(1):
            raise ModelIOError(f"{path}: trailing bytes after weights")
    return model
