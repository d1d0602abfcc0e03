"""Score-level late fusion of audio activity with visual speech streams.

Audio streams carry probabilities; visual streams are binary.  Matching
scores a pair (s, s') by summing the audio probabilities of s over the
frames where s' is active, and the best one-to-one pairing of min(S, S')
streams wins.  Fusion replaces matched audio scores with 1.0 at visually
active frames, appends unmatched visual streams as new speakers (the output
always has max(S, S') columns), and can optionally mute all other speakers
at frames where exactly one visual stream is active.  The track-level
variant matches each face track independently to its best audio stream with
no one-to-one constraint and keeps the audio column count.
"""

from __future__ import annotations

import csv

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ActivityMatrix
from .vahc import FaceTrack

__all__ = ["match_streams", "fuse_scores", "fuse_tracks",
           "write_activity_csv", "read_activity_csv"]


def _check_compatible(audio: ActivityMatrix, visual: ActivityMatrix) -> None:
    if audio.y_hat.shape[0] != visual.y_hat.shape[0]:
        raise ValueError(f"frame counts disagree: audio {audio.y_hat.shape[0]} "
                         f"vs visual {visual.y_hat.shape[0]}")
    if audio.frame_shift_s != visual.frame_shift_s:
        raise ValueError(f"frame shifts disagree: audio {audio.frame_shift_s} "
                         f"vs visual {visual.frame_shift_s}")


def match_streams(audio: ActivityMatrix,
                  visual: ActivityMatrix) -> dict[int, int]:
    """Best one-to-one pairing {audio stream -> visual stream} of
    min(S, S') pairs, maximizing summed matching scores."""
    _check_compatible(audio, visual)
    active = visual.y_hat > 0.5
    scores = audio.y_hat.T @ active.astype(float)
    if scores.size == 0:
        return {}
    rows, cols = linear_sum_assignment(-scores)
    return {int(a): int(v) for a, v in zip(rows, cols)}


def _validate_mapping(mapping: dict[int, int], n_audio: int,
                      n_visual: int) -> None:
    if len(set(mapping.keys())) != len(mapping) \
            or len(set(mapping.values())) != len(mapping):
        raise ValueError("mapping must be one-to-one")
    for a, v in mapping.items():
        if not (0 <= a < n_audio and 0 <= v < n_visual):
            raise ValueError(f"mapping pair ({a}, {v}) outside "
                             f"{n_audio} audio x {n_visual} visual streams")
    # maximality keeps the fused stream count at max(S, S'): every stream on
    # the smaller side must be paired, which is what match_streams produces
    if len(mapping) != min(n_audio, n_visual):
        raise ValueError(
            f"mapping must pair every stream of the smaller side: got "
            f"{len(mapping)} pairs for {n_audio} audio x {n_visual} visual")


def fuse_scores(audio: ActivityMatrix, visual: ActivityMatrix,
                mapping: dict[int, int],
                mute_others: bool = False) -> ActivityMatrix:
    """Replace matched audio scores with 1.0 at visually active frames and
    append unmatched visual streams as new speakers."""
    _check_compatible(audio, visual)
    n_frames, n_audio = audio.y_hat.shape
    n_visual = visual.y_hat.shape[1]
    _validate_mapping(mapping, n_audio, n_visual)
    active = visual.y_hat > 0.5

    out = np.zeros((n_frames, max(n_audio, n_visual)))
    out[:, :n_audio] = audio.y_hat
    visual_col = {}
    for a, v in mapping.items():
        out[active[:, v], a] = 1.0
        visual_col[v] = a
    unmatched = [v for v in range(n_visual) if v not in visual_col]
    for k, v in enumerate(unmatched):
        col = n_audio + k
        out[:, col] = active[:, v].astype(float)
        visual_col[v] = col

    if mute_others and n_visual:
        single = active.sum(axis=1) == 1
        rows = np.flatnonzero(single)
        if rows.size:
            keep_col = np.array([visual_col[v] for v in range(n_visual)])
            keep = keep_col[np.argmax(active[rows], axis=1)]
            saved = out[rows, keep].copy()
            out[rows, :] = 0.0
            out[rows, keep] = saved
    return ActivityMatrix(out, audio.frame_shift_s)


def fuse_tracks(audio: ActivityMatrix,
                tracks: list[FaceTrack]) -> ActivityMatrix:
    """Per-track fusion: each track picks the audio stream with the highest
    matching score (ties to the lowest stream index, scored against the
    original audio so track order is irrelevant) and overwrites that
    stream's score with 1.0 at its active frames."""
    out = audio.y_hat.copy()
    n_frames, n_streams = out.shape
    if n_streams == 0 or not tracks:
        return ActivityMatrix(out, audio.frame_shift_s)
    for track in tracks:
        on = track.times[np.asarray(track.active) > 0]
        idx = np.floor(on / audio.frame_shift_s + 1e-6).astype(int)
        idx = idx[(idx >= 0) & (idx < n_frames)]
        if idx.size == 0:
            continue
        stream = int(np.argmax(audio.y_hat[idx].sum(axis=0)))
        out[idx, stream] = 1.0
    return ActivityMatrix(out, audio.frame_shift_s)


# ---- CSV serialization ---------------------------------------------------


def write_activity_csv(path, mat: ActivityMatrix) -> None:
    n_frames, n_streams = mat.y_hat.shape
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t"] + [f"s{j}" for j in range(n_streams)])
        for i in range(n_frames):
            writer.writerow([i * mat.frame_shift_s] + list(mat.y_hat[i]))


def read_activity_csv(path, frame_shift_s: float | None = None) -> ActivityMatrix:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty activity file")
    n_streams = len(rows[0]) - 1
    body = rows[1:]
    data = np.array([[float(x) for x in row[1:]] for row in body]) \
        if body else np.zeros((0, n_streams))
    if frame_shift_s is None:
        if len(body) < 2:
            raise ValueError(f"{path}: cannot infer frame shift from fewer "
                             f"than two rows; pass frame_shift_s")
        frame_shift_s = float(body[1][0]) - float(body[0][0])
    return ActivityMatrix(data, frame_shift_s)
