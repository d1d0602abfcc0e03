"""Command-line front end: one binary with a subcommand per pipeline stage.

Every subcommand exits 0 on success and nonzero with a single
``error: <reason>`` line on stderr otherwise; all randomness is controlled
by explicit ``--seed`` flags.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .corpus import Corpus, generate_synthetic_corpus
from .fusion import (fuse_scores, fuse_tracks, match_streams,
                     read_activity_csv, write_activity_csv)
from .model import PRESETS, Model, load_model, preset_config
from .scoring import (aggregate_reports, binarize, format_report_table,
                      score_recording)
from .segments import SegmentList, parse_rttm, write_rttm
from .simulate import LufsTargets, SimConfig, emit_dataset
from .trainer import (TrainConfig, infer_to_files, run_inference, train,
                      wav_features, write_embedding_csv)
from .vahc import ahc_cluster, clusters_to_streams, read_tracks, track_embedding


class _Parser(argparse.ArgumentParser):
    """argparse with a one-line machine-parsable usage error."""

    def error(self, message):
        self.exit(2, f"error: {message}\n")


# ---- subcommands -------------------------------------------------------


def _load_sim_config(path) -> SimConfig:
    if path is None:
        return SimConfig()
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: simulation config must be a JSON object")
    if "lufs" in raw:
        raw["lufs"] = LufsTargets(**raw["lufs"])
    try:
        return SimConfig(**raw)
    except TypeError as exc:
        raise ValueError(f"{path}: {exc}")


def cmd_simulate(args) -> int:
    cfg = _load_sim_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = Path(args.out)
    if args.corpus == "synthetic":
        corpus = generate_synthetic_corpus(out / "corpus", seed=cfg.seed)
    else:
        corpus = Corpus.from_dir(args.corpus)
    manifest = emit_dataset(cfg, corpus, args.n, out)
    print(f"wrote {len(manifest)} recordings to {out}")
    return 0


def cmd_train(args) -> int:
    tcfg = TrainConfig.for_preset(args.preset, epochs=args.epochs, seed=args.seed)
    overrides = {}
    if tcfg.use_speaker_head:
        manifest = json.loads(Path(args.manifest).read_text())
        ids = [v for entry in manifest for v in entry.get("speakers", {}).values()]
        overrides["n_corpus_speakers"] = max(ids, default=0)
    model = Model(preset_config(args.preset, **overrides), seed=args.seed)
    log_path = args.log if args.log else f"{args.out}.log.jsonl"
    result = train(model, args.manifest, tcfg, ckpt_path=args.out,
                   log_path=log_path, val_manifest_path=args.val_manifest)
    best = "--" if result.best_val_der is None else f"{result.best_val_der:.2f}"
    print(f"trained {tcfg.epochs} epochs; best val DER {best} "
          f"(epoch {result.best_epoch}, threshold {result.best_threshold}); "
          f"checkpoint {args.out}")
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.model)
    result = infer_to_files(model, args.wav, args.out_prefix,
                            oracle_speakers=args.oracle_speakers)
    if args.rttm_out:
        rec_id = args.rec_id if args.rec_id else Path(args.wav).stem
        hyp = binarize(result.activity, threshold=args.threshold,
                       median_frames=args.median_frames)
        write_rttm(args.rttm_out, hyp, rec_id)
    print(f"decoded {result.activity.y_hat.shape[1]} speakers; "
          f"outputs at {args.out_prefix}.*")
    return 0


def cmd_vahc(args) -> int:
    tracks = read_tracks(args.tracks)
    rng = np.random.default_rng(args.seed)
    embeddings = {t.track_id: track_embedding(t, rng=rng) for t in tracks}
    result = ahc_cluster(embeddings, distance_threshold=args.threshold)
    streams = clusters_to_streams(result, tracks, args.shift, args.frames)
    write_activity_csv(args.out, streams)
    print(f"{result.n_clusters} clusters from {len(tracks)} tracks -> {args.out}")
    return 0


def cmd_fuse(args) -> int:
    audio = read_activity_csv(args.audio)
    if args.mode == "track":
        fused = fuse_tracks(audio, read_tracks(args.visual))
    else:
        if args.visual.endswith(".jsonl"):
            raise ValueError(
                "recording mode fuses an activity CSV; run vahc first or "
                "use --mode track for raw face tracks")
        visual = read_activity_csv(args.visual)
        mapping = match_streams(audio, visual)
        fused = fuse_scores(audio, visual, mapping, mute_others=args.mute_others)
    write_activity_csv(args.out, fused)
    if args.rttm_out:
        rec_id = args.rec_id if args.rec_id else Path(args.out).stem
        hyp = binarize(fused, threshold=args.threshold,
                       median_frames=args.median_frames)
        write_rttm(args.rttm_out, hyp, rec_id)
    print(f"fused {audio.y_hat.shape[1]} audio streams into "
          f"{fused.y_hat.shape[1]} -> {args.out}")
    return 0


def cmd_score(args) -> int:
    refs = parse_rttm(args.ref)
    hyps = parse_rttm(args.hyp)
    rows = []
    for rec_id in sorted(set(refs) | set(hyps)):
        ref = refs.get(rec_id, SegmentList([]))
        hyp = hyps.get(rec_id, SegmentList([]))
        rows.append((rec_id, score_recording(ref, hyp, collar_s=args.collar,
                                             rec_id=rec_id)))
    agg = aggregate_reports([r for _, r in rows])
    if args.json:
        print(json.dumps({"aggregate": agg.as_dict(),
                          "recordings": {name: r.as_dict() for name, r in rows}},
                         sort_keys=True))
    else:
        sys.stdout.write(format_report_table(rows + [("ALL", agg)]))
        der = "--" if agg.der is None else f"{agg.der:.2f}"
        print(f"DER {der}")
    return 0


def cmd_export_emb(args) -> int:
    model = load_model(args.model)
    feats = wav_features(args.wav)
    result = run_inference(model, feats.frames, feats.frame_shift_s)
    write_embedding_csv(args.out, result.embeddings, feats.frame_shift_s)
    print(f"wrote {result.embeddings.shape[0]} frame embeddings to {args.out}")
    return 0


# ---- parser ------------------------------------------------------------


def _add_rttm_export(p: _Parser) -> None:
    p.add_argument("--rttm-out", help="also write binarized segments as RTTM")
    p.add_argument("--rec-id", help="recording id for the RTTM (default: derived)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="activity threshold for the RTTM export")
    p.add_argument("--median-frames", type=int, default=11,
                   help="median smoothing window (odd frame count)")


def build_parser() -> _Parser:
    p = _Parser(prog="avdiar",
                description="audio-visual speaker diarization laboratory")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[], help="render a simulated dataset")
    s.add_argument("--config", help="JSON file of simulation parameters")
    s.add_argument("--corpus", default="synthetic",
                   help='source corpus directory, or "synthetic"')
    s.add_argument("--out", default="sim_out", help="output dataset directory")
    s.add_argument("--n", type=int, default=10, help="number of recordings")
    s.add_argument("--seed", type=int, default=None,
                   help="overrides the config seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a model on a simulation manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--preset", required=True, choices=sorted(PRESETS))
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--val-manifest", help="separate validation manifest")
    s.add_argument("--log", help="JSONL epoch log (default: <out>.log.jsonl)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="decode one recording to CSV exports")
    s.add_argument("--model", required=True, help="checkpoint path")
    s.add_argument("--wav", required=True)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--oracle-speakers", type=int, default=None,
                   help="decode exactly N speakers (ground-truth count mode)")
    _add_rttm_export(s)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("vahc", help="cluster face tracks into visual streams")
    s.add_argument("--tracks", required=True, help="face-track JSONL file")
    s.add_argument("--threshold", type=float, default=-0.5,
                   help="linkage distance threshold (negated cosine)")
    s.add_argument("--frames", type=int, required=True,
                   help="output frame count T")
    s.add_argument("--shift", type=float, required=True,
                   help="output frame shift in seconds")
    s.add_argument("--out", required=True, help="activity CSV path")
    s.add_argument("--seed", type=int, default=0,
                   help="seed for track-embedding frame sampling")
    s.set_defaults(func=cmd_vahc)

    s = sub.add_parser("fuse", help="fuse audio activity with visual streams")
    s.add_argument("--audio", required=True, help="audio activity CSV")
    s.add_argument("--visual", required=True,
                   help="visual activity CSV (recording mode) or tracks JSONL "
                        "(track mode)")
    s.add_argument("--mode", choices=("recording", "track"), default="recording")
    s.add_argument("--mute-others", action="store_true",
                   help="zero other streams where exactly one face is active")
    s.add_argument("--out", required=True, help="fused activity CSV")
    _add_rttm_export(s)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("score", help="collar-based DER/JER between RTTM files")
    s.add_argument("--ref", required=True)
    s.add_argument("--hyp", required=True)
    s.add_argument("--collar", type=float, default=0.25)
    s.add_argument("--json", action="store_true",
                   help="print one JSON object instead of the table")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("export-emb", help="export frame embeddings for plots")
    s.add_argument("--model", required=True)
    s.add_argument("--wav", required=True)
    s.add_argument("--out", required=True, help="embedding CSV path")
    s.set_defaults(func=cmd_export_emb)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        message = " ".join(str(exc).split()) or exc.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
