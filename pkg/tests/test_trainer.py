import json
import math

import numpy as np
import pytest

from avdiar.autograd import Tensor, backward
from avdiar.corpus import generate_synthetic_corpus
from avdiar.fusion import read_activity_csv
from avdiar.model import Model, load_model, preset_config
from avdiar.simulate import desk_config, emit_dataset
from avdiar.trainer import (Adam, Example, TrainConfig, TrainError, example_loss,
                            infer_to_files, load_dataset, lr_at, run_inference,
                            train, validation_der, wav_features)

TOY = dict(dim=16, n_heads=2, ff_dim=32, dropout=0.0)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Two 5 s, 2-speaker recordings drawn from a 4-speaker corpus."""
    root = tmp_path_factory.mktemp("trainset")
    corpus = generate_synthetic_corpus(root / "corpus", n_speakers=4,
                                       clips_per_speaker=2, clip_len_s=4.0,
                                       n_noise=1, n_music=1, bed_len_s=6.0,
                                       seed=1)
    out = root / "data"
    emit_dataset(desk_config(seed=3, recording_len_s=5.0, n_speakers=2),
                 corpus, 2, out)
    return out / "manifest.json"


def toy_model(preset="baseline", **over) -> Model:
    kwargs = dict(TOY)
    kwargs.update(over)
    return Model(preset_config(preset, **kwargs), seed=0)


def toy_train_cfg(preset="baseline", **over) -> TrainConfig:
    base = dict(epochs=1, warmup_steps=50, seed=0)
    base.update(over)
    return TrainConfig.for_preset(preset, **base)


# ---- schedule ----------------------------------------------------------


def test_lr_peaks_at_warmup():
    dim, warmup = 64, 200
    assert lr_at(warmup, dim, warmup) == pytest.approx(dim ** -0.5 * warmup ** -0.5)
    assert lr_at(warmup - 1, dim, warmup) < lr_at(warmup, dim, warmup)
    assert lr_at(warmup + 1, dim, warmup) < lr_at(warmup, dim, warmup)


def test_lr_linear_rampup_and_sqrt_decay():
    dim, warmup = 64, 100
    # linear in the step count below warm-up
    assert lr_at(50, dim, warmup) == pytest.approx(0.5 * lr_at(100, dim, warmup))
    # inverse square root beyond it
    assert lr_at(4 * warmup, dim, warmup) == pytest.approx(0.5 * lr_at(warmup, dim, warmup))


def test_lr_steps_count_from_one():
    with pytest.raises(ValueError):
        lr_at(0, 64, 100)


# ---- config ------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(grad_accum=0)
    with pytest.raises(ValueError):
        TrainConfig(threshold_grid=())
    with pytest.raises(ValueError):
        TrainConfig(resume_step=-1)


def test_for_preset_mirrors_mode_flags():
    cfg = TrainConfig.for_preset("plusplus", epochs=3)
    assert (cfg.use_positional_encoding, cfg.use_attention_eda,
            cfg.use_speaker_head) == (True, True, True)
    assert cfg.epochs == 3
    assert TrainConfig.for_preset("baseline").use_speaker_head is False
    with pytest.raises(ValueError):
        TrainConfig.for_preset("nope")


def test_beta_decays_per_epoch():
    cfg = TrainConfig()
    assert cfg.weights_for_epoch(0).beta == pytest.approx(0.1)
    assert cfg.weights_for_epoch(5).beta == pytest.approx(0.1 * 0.92 ** 5)


# ---- optimizer ---------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    # with bias correction the first update is lr * g / (|g| + eps) ~ lr * sign(g)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    opt = Adam({"p": p})
    opt.step(0.01)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-6)


def test_adam_descends_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam({"p": p})
    for _ in range(400):
        p.grad = 2.0 * p.data          # d/dp of p^2
        opt.step(0.05)
    assert abs(float(p.data[0])) < 0.1


def test_adam_skips_parameters_without_gradients():
    p = Tensor(np.array([1.0]), requires_grad=True)
    q = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.array([1.0])
    Adam({"p": p, "q": q}).step(0.1)
    assert float(q.data[0]) == 2.0
    assert float(p.data[0]) != 1.0


# ---- dataset -----------------------------------------------------------


def test_load_dataset_shapes_and_labels(dataset):
    examples = load_dataset(dataset, need_speaker_labels=True)
    assert len(examples) == 2
    for ex in examples:
        assert ex.frames.shape == (50, 600)           # 5 s at 0.1 s shift
        assert ex.frame_shift_s == pytest.approx(0.1)
        assert ex.y.shape == (50, len(ex.speakers))
        assert ex.speakers == sorted(ex.speakers)
        assert all(1 <= lab <= 4 for lab in ex.corpus_labels)
        assert ex.y.max() == 1.0                      # some speech rasterized


def test_load_dataset_without_labels(dataset):
    examples = load_dataset(dataset)
    assert all(ex.corpus_labels is None for ex in examples)


def test_load_dataset_errors(tmp_path):
    with pytest.raises(TrainError, match="not found"):
        load_dataset(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(TrainError, match="valid JSON"):
        load_dataset(bad)
    empty = tmp_path / "empty.json"
    empty.write_text("[]")
    with pytest.raises(TrainError, match="non-empty"):
        load_dataset(empty)
    partial = tmp_path / "partial.json"
    partial.write_text(json.dumps([{"id": "x"}]))
    with pytest.raises(TrainError, match="missing field"):
        load_dataset(partial)


# ---- smoke training ----------------------------------------------------


def test_one_epoch_writes_checkpoint_and_log(dataset, tmp_path):
    model = toy_model()
    res = train(model, dataset, toy_train_cfg(),
                ckpt_path=tmp_path / "m.ckpt", log_path=tmp_path / "log.jsonl")
    assert (tmp_path / "m.ckpt").exists()
    reloaded = load_model(tmp_path / "m.ckpt")
    assert reloaded.n_params == model.n_params
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 1
    rec = json.loads(lines[0])
    for key in ("epoch", "dia_loss", "spk_loss", "stop_loss", "beta", "val_der"):
        assert key in rec
    assert rec["epoch"] == 0
    assert rec["dia_loss"] > 0
    assert rec["spk_loss"] is None and rec["stop_loss"] is None
    assert rec["beta"] == pytest.approx(0.1)
    assert isinstance(rec["val_der"], float)
    assert res.steps == 2                             # two recordings, batch size 1


def test_speaker_mode_logs_auxiliary_losses(dataset, tmp_path):
    model = toy_model("spk", n_corpus_speakers=4)
    res = train(model, dataset, toy_train_cfg("spk"),
                log_path=tmp_path / "log.jsonl")
    rec = res.history[0]
    assert rec["spk_loss"] > 0 and rec["stop_loss"] > 0
    assert rec["exist_loss"] is None


def test_mode_mismatch_rejected(dataset):
    with pytest.raises(TrainError, match="use_speaker_head"):
        train(toy_model("baseline"), dataset, toy_train_cfg("spk"))


def test_corpus_identity_out_of_range(dataset):
    # the model only knows 2 corpus identities but the data references id 3+
    model = toy_model("spk", n_corpus_speakers=2)
    with pytest.raises(TrainError, match="outside"):
        train(model, dataset, toy_train_cfg("spk"))


def test_nan_loss_aborts_with_batch_id(dataset):
    model = toy_model()
    model.params["input_proj.w"].data[:] = np.nan
    with pytest.raises(TrainError, match=r"epoch 0, batch 0 \(recording rec000"):
        train(model, dataset, toy_train_cfg())


def test_training_reduces_loss(dataset):
    res = train(toy_model(), dataset, toy_train_cfg(epochs=5))
    assert res.history[-1]["total_loss"] < res.history[0]["total_loss"]


# ---- determinism -------------------------------------------------------


def test_fixed_seed_runs_are_bit_identical(dataset, tmp_path):
    histories, ckpts = [], []
    for run in range(2):
        model = toy_model("spk", n_corpus_speakers=4, dropout=0.1)
        res = train(model, dataset, toy_train_cfg("spk", epochs=2, seed=11),
                    ckpt_path=tmp_path / f"run{run}.ckpt")
        histories.append(json.dumps(res.history, sort_keys=True))
        ckpts.append((tmp_path / f"run{run}.ckpt").read_bytes())
    assert histories[0] == histories[1]
    assert ckpts[0] == ckpts[1]


def test_grad_accum_matches_larger_batch(dataset, tmp_path):
    # batch_size 2 and batch_size 1 x grad_accum 2 take identical steps
    for run, (bs, acc) in enumerate([(2, 1), (1, 2)]):
        model = toy_model()
        train(model, dataset, toy_train_cfg(epochs=2, batch_size=bs, grad_accum=acc),
              ckpt_path=tmp_path / f"acc{run}.ckpt")
    assert (tmp_path / "acc0.ckpt").read_bytes() == (tmp_path / "acc1.ckpt").read_bytes()


def test_grad_accum_reduces_step_count(dataset):
    res = train(toy_model(), dataset, toy_train_cfg(epochs=2, grad_accum=2))
    assert res.steps == 2                             # one step per epoch


# ---- gradient coverage -------------------------------------------------


def test_gradient_reaches_encoder_and_eda():
    rng = np.random.default_rng(5)
    model = toy_model("plusplus", n_corpus_speakers=4)
    ex = Example("r", rng.normal(size=(12, 600)), 0.1,
                 (rng.random((12, 2)) < 0.4).astype(float), ["a", "b"], [1, 2], None)
    cfg = toy_train_cfg("plusplus")
    loss, parts = example_loss(model, ex, cfg.weights_for_epoch(0), cfg)
    backward(loss)
    enc = model.params["enc0.attn.wq"].grad
    dec = model.params["eda_dec.w_ih"].grad
    assert enc is not None and np.linalg.norm(enc) > 0
    assert dec is not None and np.linalg.norm(dec) > 0
    assert parts["spk"] > 0 and parts["stop"] > 0


# ---- overfit oracle ----------------------------------------------------


@pytest.fixture(scope="module")
def single_recording(tmp_path_factory):
    """One 10 s, 2-speaker recording for the overfit check."""
    root = tmp_path_factory.mktemp("overfit")
    corpus = generate_synthetic_corpus(root / "corpus", n_speakers=4,
                                       clips_per_speaker=2, clip_len_s=4.0,
                                       n_noise=1, n_music=1, bed_len_s=6.0,
                                       seed=2)
    out = root / "data"
    emit_dataset(desk_config(seed=5, recording_len_s=10.0, n_speakers=2),
                 corpus, 1, out)
    return out / "manifest.json"


def test_overfit_single_recording(single_recording):
    model = Model(preset_config("baseline", dropout=0.0), seed=0)
    cfg = toy_train_cfg(epochs=50, warmup_steps=40, val_every=10)
    res = train(model, single_recording, cfg)
    first = res.history[0]["total_loss"]
    last = res.history[-1]["total_loss"]
    assert last < 0.1 * first, f"loss only fell from {first:.2f} to {last:.2f}"


# ---- validation --------------------------------------------------------


def test_validation_threshold_grid_selects_minimum(dataset):
    model = toy_model()
    examples = load_dataset(dataset)
    cfg = toy_train_cfg()
    der, th, _ = validation_der(model, examples, cfg)
    assert th in cfg.threshold_grid
    assert der is None or der >= 0.0


def test_separate_validation_manifest(dataset, tmp_path):
    res = train(toy_model(), dataset, toy_train_cfg(),
                val_manifest_path=dataset)
    assert isinstance(res.history[0]["val_der"], float)


def test_val_every_skips_epochs(dataset):
    res = train(toy_model(), dataset, toy_train_cfg(epochs=3, val_every=2))
    assert res.history[0]["val_der"] is not None      # epoch 0 validated
    assert res.history[1]["val_der"] is None
    assert res.history[2]["val_der"] is not None      # final epoch always validated


def test_resume_continues_schedule(dataset, tmp_path):
    model = toy_model()
    first = train(model, dataset, toy_train_cfg(epochs=1),
                  ckpt_path=tmp_path / "a.ckpt")
    second = train(model, dataset, toy_train_cfg(epochs=1, resume_step=first.steps))
    assert second.steps == 2 * first.steps


# ---- inference exports -------------------------------------------------


def test_infer_writes_deterministic_exports(dataset, tmp_path):
    wav = dataset.parent / "rec0000.wav"
    model = toy_model()
    r1 = infer_to_files(model, wav, tmp_path / "a" / "rec")
    r2 = infer_to_files(model, wav, tmp_path / "b" / "rec")
    for name in ("rec.activity.csv", "rec.attractors.csv", "rec.embeddings.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert r1.embeddings.shape == (50, 16)            # one row per feature frame
    assert r1.activity.y_hat.shape[0] == 50
    assert r1.attractors.n_decoded <= model.cfg.max_decode_speakers


def test_infer_respects_oracle_speaker_count(dataset, tmp_path):
    wav = dataset.parent / "rec0000.wav"
    res = infer_to_files(toy_model(), wav, tmp_path / "rec", oracle_speakers=3)
    assert res.activity.y_hat.shape == (50, 3)
    am = read_activity_csv(tmp_path / "rec.activity.csv")
    np.testing.assert_allclose(am.y_hat, res.activity.y_hat, atol=1e-12)
    assert am.frame_shift_s == pytest.approx(0.1)


def test_infer_export_headers(dataset, tmp_path):
    wav = dataset.parent / "rec0000.wav"
    infer_to_files(toy_model(), wav, tmp_path / "rec", oracle_speakers=2)
    att_lines = (tmp_path / "rec.attractors.csv").read_text().splitlines()
    assert att_lines[0].startswith("is_speaker,d0,")
    assert len(att_lines) == 3                        # header + 2 forced attractors
    assert all(line.startswith("1,") for line in att_lines[1:])
    emb_lines = (tmp_path / "rec.embeddings.csv").read_text().splitlines()
    assert emb_lines[0].startswith("t,d0,")
    assert emb_lines[1].startswith("0.0,")


def test_run_inference_matches_model_infer(dataset):
    examples = load_dataset(dataset)
    model = toy_model()
    mine = run_inference(model, examples[0].frames, 0.1, oracle_speakers=2)
    theirs, _ = model.infer(examples[0].frames, 0.1, oracle_speakers=2)
    np.testing.assert_allclose(mine.activity.y_hat, theirs.y_hat, atol=1e-12)
